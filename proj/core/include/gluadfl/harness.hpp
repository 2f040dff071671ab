#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gluadfl/fl_engine.hpp"
#include "gluadfl/synth.hpp"
#include "gluadfl/timeseries.hpp"

namespace gluadfl {

// Cohort input: either a synthetic spec or CGM CSV files, never both.
struct PlanCohort {
    std::string name = "synth";
    std::optional<SynthCohortSpec> synthetic;
    std::vector<std::filesystem::path> csv_paths;
};

struct PersonalizationSpec {
    int steps = 200;
    double learning_rate = 1e-4;
};

// One experiment plan = a grid over {method, rho, gamma, hidden} x seeds on
// one cohort. Default grids: lr in {1e-3, 1e-4, 1e-5}, hidden in
// {128, 256, 512}, four seeds.
struct ExperimentPlan {
    PlanCohort cohort;
    std::vector<PlanCohort> extra_cohorts; // cross-cohort test columns

    // "random" | "ring" | "cluster" -> decentralized rounds,
    // "fedavg" (alias "star") -> centralized baseline,
    // "pooled" -> pooled supervised baseline (rho pinned to 0).
    std::vector<std::string> methods = {"random", "ring", "cluster"};
    std::vector<double> inactive_ratios = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
    std::vector<double> learning_rates = {1e-3, 1e-4, 1e-5};
    std::vector<int> hidden_sizes = {128, 256, 512};
    std::vector<std::uint64_t> seeds = {1, 2, 3, 4};

    LearnerKind learner = LearnerKind::Lstm;
    int input_len = 12;
    int horizon = 6;
    int rounds = 500;
    int eval_every = 10;
    int batch_size = 64;
    int comm_batch = 7;
    int cluster_size = 4;
    SplitFractions fractions;
    bool grad_at_aggregate = false;
    bool weight_by_samples = false;
    double clip_norm = 0.0;
    double init_scale = 0.1;
    int local_steps = 1;
    std::optional<PersonalizationSpec> personalization;

    std::filesystem::path out_dir = "artifacts";
    int jobs = 1;
};

// Parses and schema-checks a plan; errors carry the offending JSON path.
ExperimentPlan parse_plan(const std::string& json_text, const std::string& origin);
ExperimentPlan load_plan(const std::filesystem::path& path);
std::string canonical_plan_json(const ExperimentPlan& plan);

struct CellResult {
    std::string name;
    std::string method;
    double rho = 0.0;
    double gamma = 0.0;
    int hidden = 0;
    std::uint64_t seed = 0;
    bool diverged = false;
    std::string error;
    double final_val_rmse = 0.0;
    double final_test_rmse = 0.0;
};

struct PlanOutcome {
    std::filesystem::path out_dir;
    std::vector<CellResult> cells;
    int diverged_count = 0;
};

// Executes every grid cell (work queue, plan.jobs workers), writes traces,
// per-patient reports, checkpoints, cells.csv, val-based hyperparameter
// selection, summary and manifest. Diverged cells are recorded, not fatal.
PlanOutcome run_plan(const ExperimentPlan& plan);

// Hyperparameter selection consumes validation scores only; test columns are
// structurally out of reach.
struct ValidationScore {
    std::string method;
    double rho = 0.0;
    double gamma = 0.0;
    int hidden = 0;
    double mean_val_rmse = 0.0;
    int n_seeds = 0;
};

struct Selection {
    std::string method;
    double rho = 0.0;
    double gamma = 0.0;
    int hidden = 0;
    double mean_val_rmse = 0.0;
};

std::vector<Selection> select_best(std::span<const ValidationScore> scores);

// Per (method, rho) summary across artifact directories: mean(SD) of final
// test RMSE at the validation-selected hyperparameters, paired delta against
// the random topology, and an ordering flag. Missing cells yield NA fields.
struct CompareRow {
    std::string method;
    double rho = 0.0;
    int n_seeds = 0;
    double test_rmse_mean = 0.0;
    double test_rmse_sd = 0.0;
    bool has_delta = false;
    double delta_vs_random = 0.0; // this method minus random, same rho
    std::string flag;             // "beats_random" when the expected order flips
};

std::vector<CompareRow> compare_report(std::span<const std::filesystem::path> artifact_dirs);
void write_compare_csv(std::ostream& out, std::span<const CompareRow> rows);

} // namespace gluadfl
