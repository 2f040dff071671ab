#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "gluadfl/learner.hpp"
#include "gluadfl/metrics.hpp"
#include "gluadfl/timeseries.hpp"
#include "gluadfl/topology.hpp"

namespace gluadfl {

struct NodeState {
    int node_id = 0;
    ParamVector params;
    std::vector<Sample> train_samples;
    std::vector<Sample> val_samples;
    std::uint64_t batch_rng_seed = 0;
};

// Exactly round(inactive_ratio * n_nodes) nodes sit out each round, drawn
// from a per-round stream.
struct ActivitySchedule {
    int n_nodes = 0;
    double inactive_ratio = 0.0;
    std::uint64_t seed = 0;

    int inactive_per_round() const;
    std::vector<std::uint8_t> active_mask(int round) const;
};

struct RunConfig {
    int rounds = 500;            // T
    double learning_rate = 1e-3; // gamma; 0 runs pure averaging rounds (diagnostics)
    TopologySpec topology;
    LearnerSpec learner;
    double inactive_ratio = 0.0; // rho in [0, 1)
    std::uint64_t seed = 1;      // master seed; all streams derive from it
    int batch_size = 64;
    int local_steps = 1;
    // Algorithm default: the gradient is evaluated at the node's previous
    // parameters while the step starts from the aggregated ones. Set to true
    // to evaluate at the aggregate instead.
    bool grad_at_aggregate = false;
    bool weight_by_samples = false; // FedAvg server mean weighted by train counts
    double clip_norm = 0.0;         // 0 disables; 5.0 is the usual guard
    int eval_every = 10;
    int eval_max_samples = 2048;    // validation subsample cap for traces
    NormStats stats;                // converts trace RMSE to mg/dL
    // Resume support: rounds [start_round, rounds] are executed against the
    // node parameters passed in, which must hold the state after round
    // start_round - 1 (a run snapshot). Streams are keyed by absolute round,
    // so a resumed run is bit-identical to an uninterrupted one.
    int start_round = 1;
    // Shuffles within-round node processing order; results must not depend
    // on it (round state is double-buffered). 0 keeps ascending order.
    std::uint64_t processing_shuffle_seed = 0;
};

struct RoundRecord {
    int round = 0;
    int active_nodes = 0;
    int in_edges = 0;
    double val_rmse = 0.0; // mg/dL, population model on pooled validation
};

struct RunTrace {
    std::vector<RoundRecord> records;
};

struct RunResult {
    ParamVector population;
    RunTrace trace;
    std::vector<ParamVector> node_params; // final per-node state (empty for pooled)
};

// Stream derivations used by the engine, public so oracles and debug tools
// can reconstruct round graphs and schedules of a run.
namespace run_streams {
std::uint64_t init(std::uint64_t run_seed, int node_id);
std::uint64_t batch(std::uint64_t run_seed, int node_id);
std::uint64_t graph(std::uint64_t run_seed);
std::uint64_t activity(std::uint64_t run_seed);
} // namespace run_streams

// Node states with per-node init and batch streams derived from cfg.seed.
std::vector<NodeState> make_nodes(const RunConfig& cfg, std::vector<std::vector<Sample>> train,
                                  std::vector<std::vector<Sample>> val);

// Mean of own and received, summed own-first then in the given order; the
// engine passes receives sorted by sender id.
ParamVector aggregate_neighbors(const ParamVector& own, std::span<const ParamVector> received);

// (round, all node params) snapshot for pausing and resuming a run.
struct RunSnapshot {
    int round = 0;
    std::vector<ParamVector> node_params;
};
void save_run_snapshot(const std::filesystem::path& path, const RunSnapshot& snap);
RunSnapshot load_run_snapshot(const std::filesystem::path& path);

// Installs snapshot state into node states and returns the start round for
// the continuation run.
int apply_run_snapshot(const RunSnapshot& snap, std::vector<NodeState>& nodes);

// Asynchronous decentralized rounds: broadcast, neighbor-average against the
// previous round's snapshot, one local SGD step per active node; the final
// population model is the unweighted mean over all nodes.
RunResult run_gluadfl(const RunConfig& cfg, std::vector<NodeState> nodes);

// Centralized baseline on the same seeds: broadcast server model to active
// clients, local step, server re-averages active clients.
RunResult run_fedavg(const RunConfig& cfg, std::vector<NodeState> nodes);

// Single learner over the pooled training set, rounds * n_nodes steps of the
// same batch schedule; the supervised reference point.
RunResult run_pooled_supervised(const RunConfig& cfg, const std::vector<NodeState>& nodes);

// Fine-tunes `start` on the node's own training samples. steps == 0 returns
// `start` unchanged.
ParamVector personalize(const LearnerSpec& spec, const ParamVector& start, const NodeState& node,
                        double learning_rate, int steps, int batch_size);

// Pooled RMSE in mg/dL of one model over samples normalized with `stats`.
double eval_rmse_mgdl(const LearnerSpec& spec, const ParamVector& params,
                      std::span<const Sample> samples, const NormStats& stats);

// Denormalized (actual, predicted) pairs in the samples' order.
PredictionSet predict_set(const LearnerSpec& spec, const ParamVector& params,
                          std::span<const Sample> samples, const NormStats& stats);

// Cross-cohort evaluation protocol: each trained model is tested on every
// cohort's test series; inputs are normalized and predictions denormalized
// with the model's own training-cohort stats. Diagonal cells are seen
// patients, off-diagonal unseen.
struct EvalModel {
    std::string cohort_name;
    LearnerSpec spec;
    ParamVector params;
    NormStats stats;
};

struct TestCohort {
    std::string name;
    std::vector<GlucoseSeries> test_series;
};

struct PatientReport {
    std::string patient_id;
    MetricsReport metrics;
};

struct CrossEvalCell {
    std::string train_cohort;
    std::string test_cohort;
    std::vector<PatientReport> patients;
    MetricsReport mean; // across patients; time lag averaged over defined values
    MetricsReport sd;
};

std::vector<std::vector<CrossEvalCell>> cross_evaluate(std::span<const EvalModel> models,
                                                       std::span<const TestCohort> cohorts,
                                                       int horizon,
                                                       const GPenaltySpec& pen = {});

} // namespace gluadfl
