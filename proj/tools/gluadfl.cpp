// Command-line front end: synthesize cohorts, run experiment plans, compare
// artifacts, and cross-evaluate checkpoints. Exit codes: 0 success, 2 config
// error, 3 plan finished but some cells diverged.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "gluadfl/csv.hpp"
#include "gluadfl/errors.hpp"
#include "gluadfl/fl_engine.hpp"
#include "gluadfl/harness.hpp"
#include "gluadfl/synth.hpp"

namespace fs = std::filesystem;
using namespace gluadfl;

namespace {

int run_synth(const SynthCohortSpec& spec, const fs::path& out_dir) {
    fs::create_directories(out_dir);
    const auto cohort = generate_synth_cohort(spec);
    double sum = 0.0, sum_sq = 0.0;
    std::size_t n = 0;
    for (const auto& series : cohort) {
        write_cgm_csv_file(out_dir / (series.patient_id + ".csv"), series);
        for (const auto& v : series.values) {
            if (!v) continue;
            sum += *v;
            sum_sq += *v * *v;
            ++n;
        }
    }
    const double mean = sum / static_cast<double>(n);
    const double sd = std::sqrt(sum_sq / static_cast<double>(n) - mean * mean);
    std::cout << "wrote " << cohort.size() << " patients to " << out_dir.string()
              << " (pooled mean " << mean << " mg/dL, sd " << sd << ")\n";
    return 0;
}

int run_eval(const fs::path& checkpoint_path, const std::vector<fs::path>& data,
             int horizon, int interval, const std::optional<fs::path>& out_file) {
    const Checkpoint ckpt = load_checkpoint(checkpoint_path);
    require(ckpt.stats.has_value(), Errc::Config,
            "checkpoint '" + checkpoint_path.string() + "' carries no normalization stats");

    std::vector<TestCohort> cohorts;
    for (const auto& entry : data) {
        TestCohort cohort;
        cohort.name = entry.stem().string();
        std::vector<fs::path> files;
        if (fs::is_directory(entry)) {
            for (const auto& f : fs::directory_iterator(entry)) {
                if (f.path().extension() == ".csv") files.push_back(f.path());
            }
            std::sort(files.begin(), files.end());
            cohort.name = entry.filename().string();
        } else {
            files.push_back(entry);
        }
        require(!files.empty(), Errc::Config, "no CSV files under '" + entry.string() + "'");
        for (const auto& f : files) {
            for (auto& series : read_cgm_csv_file(f, interval)) {
                cohort.test_series.push_back(split_by_time(series, SplitFractions{}).test);
            }
        }
        cohorts.push_back(std::move(cohort));
    }

    EvalModel model{"checkpoint", ckpt.spec, ckpt.params, *ckpt.stats};
    const auto matrix = cross_evaluate(std::span<const EvalModel>(&model, 1), cohorts, horizon);

    std::ofstream file;
    std::ostream* out = &std::cout;
    if (out_file) {
        file.open(*out_file);
        require(file.good(), Errc::Io, "cannot open '" + out_file->string() + "'");
        out = &file;
    }
    *out << "train_cohort,test_cohort,patient,rmse,mard,mae,grmse,time_lag_min,n_samples\n";
    for (const auto& row : matrix) {
        for (const auto& cell : row) {
            for (const auto& p : cell.patients) {
                *out << cell.train_cohort << ',' << cell.test_cohort << ',' << p.patient_id << ','
                     << p.metrics.rmse << ',' << p.metrics.mard << ',' << p.metrics.mae << ','
                     << p.metrics.grmse << ',' << p.metrics.time_lag << ',' << p.metrics.n_samples
                     << '\n';
            }
            *out << cell.train_cohort << ',' << cell.test_cohort << ",mean," << cell.mean.rmse
                 << ',' << cell.mean.mard << ',' << cell.mean.mae << ',' << cell.mean.grmse << ','
                 << cell.mean.time_lag << ',' << cell.mean.n_samples << '\n';
        }
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"GluADFL: asynchronous decentralized federated learning for glucose prediction"};
    app.require_subcommand(1);

    // synth
    auto* synth = app.add_subcommand("synth", "Generate a synthetic CGM cohort as CSV files");
    SynthCohortSpec spec;
    fs::path synth_out = "cohort";
    synth->add_option("--out", synth_out, "Output directory")->capture_default_str();
    synth->add_option("--patients", spec.n_patients, "Number of patients")->capture_default_str();
    synth->add_option("--days", spec.days, "Days per patient")->capture_default_str();
    synth->add_option("--seed", spec.rng_seed, "Generator seed")->capture_default_str();
    synth->add_option("--mean", spec.mean_target, "Pooled mean target, mg/dL")->capture_default_str();
    synth->add_option("--sd", spec.sd_target, "Pooled SD target, mg/dL")->capture_default_str();
    synth->add_option("--missing", spec.missing_rate, "Missingness fraction [0, 0.5)")->capture_default_str();
    synth->add_option("--heterogeneity", spec.heterogeneity, "Per-patient jitter scale")->capture_default_str();
    synth->add_option("--interval", spec.interval_minutes, "Sampling interval, minutes")->capture_default_str();

    // run
    auto* run = app.add_subcommand("run", "Execute an experiment plan");
    fs::path plan_path;
    std::optional<std::string> run_out;
    std::optional<int> run_jobs;
    std::optional<std::uint64_t> run_seed;
    run->add_option("--plan", plan_path, "Plan JSON file")->required();
    run->add_option("--out", run_out, "Override the plan's output directory");
    run->add_option("--jobs", run_jobs, "Override the plan's worker count");
    run->add_option("--seed", run_seed, "Replace the plan's seed list with one seed");

    // report
    auto* report = app.add_subcommand("report", "Summarize artifact directories");
    std::vector<fs::path> artifact_dirs;
    std::optional<fs::path> report_out;
    report->add_option("dirs", artifact_dirs, "Artifact directories (each with cells.csv)")
        ->required();
    report->add_option("--out", report_out, "Write the summary CSV here instead of stdout");

    // eval
    auto* eval = app.add_subcommand("eval", "Cross-evaluate a checkpoint on CGM cohorts");
    fs::path ckpt_path;
    std::vector<fs::path> eval_data;
    int eval_horizon = 6;
    int eval_interval = 5;
    std::optional<fs::path> eval_out;
    eval->add_option("--checkpoint", ckpt_path, "Checkpoint JSON")->required();
    eval->add_option("--data", eval_data, "Cohort: a CSV file or a directory of CSVs (repeatable)")
        ->required();
    eval->add_option("--horizon", eval_horizon, "Prediction horizon, steps")->capture_default_str();
    eval->add_option("--interval", eval_interval, "Expected CGM interval, minutes")->capture_default_str();
    eval->add_option("--out", eval_out, "Write the matrix CSV here instead of stdout");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (synth->parsed()) return run_synth(spec, synth_out);

        if (run->parsed()) {
            ExperimentPlan plan = load_plan(plan_path);
            // environment may override output path and parallelism only
            if (const char* env = std::getenv("GLUADFL_OUT")) plan.out_dir = env;
            if (const char* env = std::getenv("GLUADFL_JOBS")) plan.jobs = std::max(1, std::atoi(env));
            if (run_out) plan.out_dir = *run_out;
            if (run_jobs) plan.jobs = *run_jobs;
            if (run_seed) plan.seeds = {*run_seed};
            const PlanOutcome outcome = run_plan(plan);
            for (const auto& cell : outcome.cells) {
                std::cout << cell.name << ": "
                          << (cell.diverged ? "diverged" : "ok") << '\n';
            }
            std::cout << outcome.cells.size() << " cells, " << outcome.diverged_count
                      << " diverged, artifacts in " << outcome.out_dir.string() << '\n';
            return outcome.diverged_count > 0 ? 3 : 0;
        }

        if (report->parsed()) {
            const auto rows = compare_report(artifact_dirs);
            if (report_out) {
                std::ofstream out(*report_out);
                require(out.good(), Errc::Io, "cannot open '" + report_out->string() + "'");
                write_compare_csv(out, rows);
            } else {
                write_compare_csv(std::cout, rows);
            }
            return 0;
        }

        if (eval->parsed()) return run_eval(ckpt_path, eval_data, eval_horizon, eval_interval, eval_out);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        switch (e.code()) {
        case Errc::Config:
        case Errc::Io:
        case Errc::InvalidArgument: return 2;
        default: return 1;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
