#include "gluadfl/fl_engine.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "gluadfl/errors.hpp"
#include "gluadfl/rng.hpp"

namespace gluadfl {

namespace {

constexpr std::uint64_t kInitTag = 0x494e4954ULL;
constexpr std::uint64_t kBatchTag = 0x42415443ULL;
constexpr std::uint64_t kActivityTag = 0x41435456ULL;
constexpr std::uint64_t kGraphTag = 0x544f504fULL;
constexpr std::uint64_t kShuffleTag = 0x53485546ULL;
constexpr std::uint64_t kPersonalizeTag = 0x50455253ULL;

void check_nodes(const std::vector<NodeState>& nodes, std::size_t min_nodes) {
    require(nodes.size() >= min_nodes, Errc::InvalidArgument,
            "need at least " + std::to_string(min_nodes) + " nodes");
    for (const auto& n : nodes) {
        require(!n.train_samples.empty(), Errc::InvalidArgument,
                "node " + std::to_string(n.node_id) + " has no training samples");
    }
}

void check_finite(const ParamVector& p, int round, int node) {
    for (double v : p) {
        if (!std::isfinite(v)) {
            raise(Errc::Diverged, "non-finite parameters at round " + std::to_string(round) +
                                      ", node " + std::to_string(node));
        }
    }
}

// Own first, then senders in the order given, divide once at the end. The
// public aggregate_neighbors and the round loop must share this exact
// summation so oracle tests can compare bitwise.
void mean_params(const ParamVector& own, std::span<const ParamVector* const> received,
                 ParamVector& out) {
    out = own;
    for (const ParamVector* r : received) {
        require(r->size() == own.size(), Errc::ShapeMismatch, "aggregating mismatched vectors");
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += (*r)[i];
    }
    const double inv = 1.0 / static_cast<double>(1 + received.size());
    for (double& v : out) v *= inv;
}

// Uniform mini-batch without replacement from the node's stream for (t, k).
void sample_batch(const NodeState& node, int round, int local_step, int batch_size,
                  std::vector<const Sample*>& out) {
    const int n = static_cast<int>(node.train_samples.size());
    const int take = std::min(batch_size, n);
    Rng rng(derive_stream({node.batch_rng_seed, static_cast<std::uint64_t>(round),
                           static_cast<std::uint64_t>(local_step)}));
    const auto idx = rng.sample_without_replacement(n, take);
    out.clear();
    for (int i : idx) out.push_back(&node.train_samples[static_cast<std::size_t>(i)]);
}

// Evaluation subsample: every stride-th pooled validation sample, capped.
std::vector<const Sample*> eval_pool(const std::vector<NodeState>& nodes, int cap) {
    std::vector<const Sample*> pool;
    for (const auto& n : nodes) {
        for (const auto& s : n.val_samples) pool.push_back(&s);
    }
    if (cap > 0 && static_cast<int>(pool.size()) > cap) {
        const std::size_t stride = (pool.size() + static_cast<std::size_t>(cap) - 1) /
                                   static_cast<std::size_t>(cap);
        std::vector<const Sample*> sub;
        for (std::size_t i = 0; i < pool.size(); i += stride) sub.push_back(pool[i]);
        pool.swap(sub);
    }
    return pool;
}

double rmse_mgdl(const LearnerSpec& spec, const ParamVector& params,
                 std::span<const Sample* const> samples, const NormStats& stats) {
    if (samples.empty()) return 0.0;
    double acc = 0.0;
    for (const Sample* s : samples) {
        const double e = s->target - forward(spec, params, s->input);
        acc += e * e;
    }
    return stats.std_dev * std::sqrt(acc / static_cast<double>(samples.size()));
}

ParamVector mean_of_all(const std::vector<ParamVector>& params) {
    ParamVector mean(params.front().size(), 0.0);
    for (const auto& p : params) {
        for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += p[i];
    }
    const double inv = 1.0 / static_cast<double>(params.size());
    for (double& v : mean) v *= inv;
    return mean;
}

std::vector<int> processing_order(int n_nodes, std::uint64_t shuffle_seed, int round) {
    std::vector<int> order(static_cast<std::size_t>(n_nodes));
    std::iota(order.begin(), order.end(), 0);
    if (shuffle_seed != 0) {
        Rng rng(derive_stream({shuffle_seed, kShuffleTag, static_cast<std::uint64_t>(round)}));
        rng.shuffle(order);
    }
    return order;
}

// One node's local update: sub-step 0 evaluates the gradient at grad_point
// (the algorithm's previous-parameters default), later sub-steps at the
// current iterate. A zero learning rate turns rounds into pure averaging.
void local_update(const RunConfig& cfg, const NodeState& node, const ParamVector& grad_point,
                  ParamVector& iterate, int round, std::vector<const Sample*>& batch) {
    if (cfg.learning_rate == 0.0) return;
    for (int k = 0; k < cfg.local_steps; ++k) {
        sample_batch(node, round, k, cfg.batch_size, batch);
        const ParamVector& at = (k == 0) ? grad_point : iterate;
        Gradient g;
        try {
            g = grad(cfg.learner, at, std::span<const Sample* const>(batch));
        } catch (const Error& e) {
            if (e.code() == Errc::NonFinite) {
                raise(Errc::Diverged, "non-finite gradient at round " + std::to_string(round) +
                                          ", node " + std::to_string(node.node_id));
            }
            throw;
        }
        clip_gradient(g, cfg.clip_norm);
        sgd_step_inplace(iterate, g, cfg.learning_rate);
    }
}

} // namespace

namespace run_streams {

std::uint64_t init(std::uint64_t run_seed, int node_id) {
    return derive_stream({run_seed, kInitTag, static_cast<std::uint64_t>(node_id)});
}
std::uint64_t batch(std::uint64_t run_seed, int node_id) {
    return derive_stream({run_seed, kBatchTag, static_cast<std::uint64_t>(node_id)});
}
std::uint64_t graph(std::uint64_t run_seed) { return derive_stream({run_seed, kGraphTag}); }
std::uint64_t activity(std::uint64_t run_seed) { return derive_stream({run_seed, kActivityTag}); }

} // namespace run_streams

int ActivitySchedule::inactive_per_round() const {
    return static_cast<int>(std::llround(inactive_ratio * static_cast<double>(n_nodes)));
}

std::vector<std::uint8_t> ActivitySchedule::active_mask(int round) const {
    require(inactive_ratio >= 0.0 && inactive_ratio < 1.0, Errc::InvalidArgument,
            "inactive_ratio must be in [0, 1)");
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(n_nodes), 1);
    const int k = inactive_per_round();
    if (k == 0) return mask;
    Rng rng(derive_stream({seed, kActivityTag, static_cast<std::uint64_t>(round)}));
    for (int idx : rng.sample_without_replacement(n_nodes, k)) {
        mask[static_cast<std::size_t>(idx)] = 0;
    }
    return mask;
}

std::vector<NodeState> make_nodes(const RunConfig& cfg, std::vector<std::vector<Sample>> train,
                                  std::vector<std::vector<Sample>> val) {
    require(train.size() == val.size(), Errc::ShapeMismatch,
            "train/val node counts differ");
    std::vector<NodeState> nodes;
    nodes.reserve(train.size());
    for (std::size_t n = 0; n < train.size(); ++n) {
        NodeState node;
        node.node_id = static_cast<int>(n);
        LearnerSpec spec = cfg.learner;
        spec.init_seed = run_streams::init(cfg.seed, static_cast<int>(n));
        node.params = init_params(spec);
        node.train_samples = std::move(train[n]);
        node.val_samples = std::move(val[n]);
        node.batch_rng_seed = run_streams::batch(cfg.seed, static_cast<int>(n));
        nodes.push_back(std::move(node));
    }
    return nodes;
}

ParamVector aggregate_neighbors(const ParamVector& own, std::span<const ParamVector> received) {
    std::vector<const ParamVector*> ptrs;
    ptrs.reserve(received.size());
    for (const auto& r : received) ptrs.push_back(&r);
    ParamVector out;
    mean_params(own, ptrs, out);
    return out;
}

void check_start_round(const RunConfig& cfg) {
    require(cfg.start_round >= 1 && cfg.start_round <= cfg.rounds + 1, Errc::InvalidArgument,
            "start_round must lie in [1, rounds + 1]");
}

void save_run_snapshot(const std::filesystem::path& path, const RunSnapshot& snap) {
    nlohmann::json j;
    j["format"] = "gluadfl-run-snapshot";
    j["version"] = 1;
    j["round"] = snap.round;
    j["node_params"] = snap.node_params;
    std::ofstream out(path);
    require(out.good(), Errc::Io, "cannot open '" + path.string() + "' for writing");
    out << j.dump() << '\n';
    require(out.good(), Errc::Io, "write failed for '" + path.string() + "'");
}

RunSnapshot load_run_snapshot(const std::filesystem::path& path) {
    std::ifstream in(path);
    require(in.good(), Errc::Io, "cannot open '" + path.string() + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        raise(Errc::Io, "bad run snapshot '" + path.string() + "': " + e.what());
    }
    require(j.value("format", "") == "gluadfl-run-snapshot", Errc::Io,
            "'" + path.string() + "' is not a run snapshot");
    require(j.value("version", 0) == 1, Errc::Io, "unsupported snapshot version");
    RunSnapshot snap;
    snap.round = j.at("round").get<int>();
    snap.node_params = j.at("node_params").get<std::vector<ParamVector>>();
    return snap;
}

int apply_run_snapshot(const RunSnapshot& snap, std::vector<NodeState>& nodes) {
    require(snap.node_params.size() == nodes.size(), Errc::ShapeMismatch,
            "snapshot node count does not match");
    for (std::size_t n = 0; n < nodes.size(); ++n) nodes[n].params = snap.node_params[n];
    return snap.round + 1;
}

RunResult run_gluadfl(const RunConfig& cfg, std::vector<NodeState> nodes) {
    check_nodes(nodes, 3);
    check_start_round(cfg);
    const int n_nodes = static_cast<int>(nodes.size());
    const ActivitySchedule sched{n_nodes, cfg.inactive_ratio, run_streams::activity(cfg.seed)};
    const std::uint64_t graph_seed = run_streams::graph(cfg.seed);
    const auto val_pool = eval_pool(nodes, cfg.eval_max_samples);

    std::vector<ParamVector> prev(static_cast<std::size_t>(n_nodes));
    std::vector<ParamVector> next(static_cast<std::size_t>(n_nodes));
    for (int n = 0; n < n_nodes; ++n) prev[static_cast<std::size_t>(n)] = nodes[static_cast<std::size_t>(n)].params;

    RunTrace trace;
    std::vector<const Sample*> batch;
    std::vector<const ParamVector*> received;

    for (int t = cfg.start_round; t <= cfg.rounds; ++t) {
        const auto active = sched.active_mask(t);
        const CommGraph graph = sample_round_graph(cfg.topology, active, graph_seed, t);
        const auto order = processing_order(n_nodes, cfg.processing_shuffle_seed, t);

        for (int n : order) {
            const auto ni = static_cast<std::size_t>(n);
            if (!active[ni]) {
                next[ni] = prev[ni]; // inactive nodes carry parameters forward
                continue;
            }
            received.clear();
            for (int src : graph.in_neighbors[ni]) {
                received.push_back(&prev[static_cast<std::size_t>(src)]);
            }
            ParamVector aggregated;
            mean_params(prev[ni], received, aggregated);
            local_update(cfg, nodes[ni], cfg.grad_at_aggregate ? aggregated : prev[ni], aggregated,
                         t, batch);
            check_finite(aggregated, t, n);
            next[ni] = std::move(aggregated);
        }
        prev.swap(next);

        if (t % cfg.eval_every == 0 || t == cfg.rounds) {
            RoundRecord rec;
            rec.round = t;
            rec.active_nodes = static_cast<int>(std::count(active.begin(), active.end(), 1));
            rec.in_edges = graph.in_edge_count();
            rec.val_rmse = rmse_mgdl(cfg.learner, mean_of_all(prev), val_pool, cfg.stats);
            trace.records.push_back(rec);
        }
    }

    RunResult out{mean_of_all(prev), std::move(trace), std::move(prev)};
    return out;
}

RunResult run_fedavg(const RunConfig& cfg, std::vector<NodeState> nodes) {
    check_nodes(nodes, 1);
    check_start_round(cfg);
    const int n_nodes = static_cast<int>(nodes.size());
    const ActivitySchedule sched{n_nodes, cfg.inactive_ratio, run_streams::activity(cfg.seed)};
    const auto val_pool = eval_pool(nodes, cfg.eval_max_samples);

    std::vector<ParamVector> client(static_cast<std::size_t>(n_nodes));
    for (int n = 0; n < n_nodes; ++n) client[static_cast<std::size_t>(n)] = nodes[static_cast<std::size_t>(n)].params;

    // The server state is a deterministic function of client params and the
    // activity schedule, so a resumed run can rebuild it: mean of the clients
    // active in the last round that had any, else the overall mean.
    ParamVector server;
    {
        int k = cfg.start_round - 1;
        std::vector<std::uint8_t> mask;
        while (k > 0) {
            mask = sched.active_mask(k);
            if (std::count(mask.begin(), mask.end(), 1) > 0) break;
            --k;
        }
        if (k == 0) {
            server = mean_of_all(client);
        } else {
            ParamVector acc(client.front().size(), 0.0);
            double total_w = 0.0;
            for (int n = 0; n < n_nodes; ++n) {
                const auto ni = static_cast<std::size_t>(n);
                if (!mask[ni]) continue;
                const double w = cfg.weight_by_samples
                                     ? static_cast<double>(nodes[ni].train_samples.size())
                                     : 1.0;
                for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += w * client[ni][i];
                total_w += w;
            }
            for (double& v : acc) v /= total_w;
            server = std::move(acc);
        }
    }

    RunTrace trace;
    std::vector<const Sample*> batch;

    for (int t = cfg.start_round; t <= cfg.rounds; ++t) {
        const auto active = sched.active_mask(t);
        int active_count = 0;

        for (int n = 0; n < n_nodes; ++n) {
            const auto ni = static_cast<std::size_t>(n);
            if (!active[ni]) continue;
            ++active_count;
            // Broadcast, then local step; the gradient default mirrors the
            // decentralized rule (previous own parameters).
            ParamVector iterate = server;
            local_update(cfg, nodes[ni], cfg.grad_at_aggregate ? server : client[ni], iterate, t,
                         batch);
            check_finite(iterate, t, n);
            client[ni] = std::move(iterate);
        }

        if (active_count > 0) {
            ParamVector acc(server.size(), 0.0);
            double total_w = 0.0;
            for (int n = 0; n < n_nodes; ++n) {
                const auto ni = static_cast<std::size_t>(n);
                if (!active[ni]) continue;
                const double w =
                    cfg.weight_by_samples
                        ? static_cast<double>(nodes[ni].train_samples.size())
                        : 1.0;
                for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += w * client[ni][i];
                total_w += w;
            }
            for (double& v : acc) v /= total_w;
            server = std::move(acc);
        }

        if (t % cfg.eval_every == 0 || t == cfg.rounds) {
            RoundRecord rec;
            rec.round = t;
            rec.active_nodes = active_count;
            rec.in_edges = 2 * active_count; // up and down the star
            rec.val_rmse = rmse_mgdl(cfg.learner, server, val_pool, cfg.stats);
            trace.records.push_back(rec);
        }
    }

    RunResult out{std::move(server), std::move(trace), std::move(client)};
    return out;
}

RunResult run_pooled_supervised(const RunConfig& cfg, const std::vector<NodeState>& nodes) {
    check_nodes(nodes, 1);
    check_start_round(cfg);
    const int n_nodes = static_cast<int>(nodes.size());
    const auto val_pool = eval_pool(nodes, cfg.eval_max_samples);

    NodeState pooled;
    pooled.node_id = 0;
    pooled.batch_rng_seed = nodes.front().batch_rng_seed;
    for (const auto& n : nodes) {
        pooled.train_samples.insert(pooled.train_samples.end(), n.train_samples.begin(),
                                    n.train_samples.end());
    }
    require(!pooled.train_samples.empty(), Errc::InvalidArgument, "pooled training set is empty");

    std::vector<ParamVector> inits;
    inits.reserve(static_cast<std::size_t>(n_nodes));
    for (const auto& n : nodes) inits.push_back(n.params);
    ParamVector params = mean_of_all(inits);

    RunTrace trace;
    std::vector<const Sample*> batch;

    // One step per round: the single learner gets the same per-model step
    // budget as a federated node, which makes the one-node FedAvg
    // equivalence exact.
    for (int t = cfg.start_round; t <= cfg.rounds; ++t) {
        local_update(cfg, pooled, params, params, t, batch);
        check_finite(params, t, 0);
        if (t % cfg.eval_every == 0 || t == cfg.rounds) {
            RoundRecord rec;
            rec.round = t;
            rec.active_nodes = 1;
            rec.in_edges = 0;
            rec.val_rmse = rmse_mgdl(cfg.learner, params, val_pool, cfg.stats);
            trace.records.push_back(rec);
        }
    }

    return RunResult{std::move(params), std::move(trace), {}};
}

ParamVector personalize(const LearnerSpec& spec, const ParamVector& start, const NodeState& node,
                        double learning_rate, int steps, int batch_size) {
    require(steps >= 0, Errc::InvalidArgument, "steps must be >= 0");
    if (steps == 0) return start;
    require(!node.train_samples.empty(), Errc::InvalidArgument,
            "cannot personalize without training samples");

    ParamVector params = start;
    std::vector<const Sample*> batch;
    const int n = static_cast<int>(node.train_samples.size());
    for (int step = 1; step <= steps; ++step) {
        Rng rng(derive_stream({node.batch_rng_seed, kPersonalizeTag,
                               static_cast<std::uint64_t>(step)}));
        const auto idx = rng.sample_without_replacement(n, std::min(batch_size, n));
        batch.clear();
        for (int i : idx) batch.push_back(&node.train_samples[static_cast<std::size_t>(i)]);
        Gradient g = grad(spec, params, std::span<const Sample* const>(batch));
        sgd_step_inplace(params, g, learning_rate);
    }
    for (double v : params) {
        require(std::isfinite(v), Errc::Diverged, "personalization diverged");
    }
    return params;
}

double eval_rmse_mgdl(const LearnerSpec& spec, const ParamVector& params,
                      std::span<const Sample> samples, const NormStats& stats) {
    require(!samples.empty(), Errc::InvalidArgument, "evaluation over an empty sample set");
    double acc = 0.0;
    for (const Sample& s : samples) {
        const double e = s.target - forward(spec, params, s.input);
        acc += e * e;
    }
    return stats.std_dev * std::sqrt(acc / static_cast<double>(samples.size()));
}

PredictionSet predict_set(const LearnerSpec& spec, const ParamVector& params,
                          std::span<const Sample> samples, const NormStats& stats) {
    PredictionSet ps;
    ps.reserve(samples.size());
    for (const Sample& s : samples) {
        PredictionPair p;
        p.actual = denormalize(s.target, stats);
        p.predicted = denormalize(forward(spec, params, s.input), stats);
        ps.push_back(p);
    }
    return ps;
}

std::vector<std::vector<CrossEvalCell>> cross_evaluate(std::span<const EvalModel> models,
                                                       std::span<const TestCohort> cohorts,
                                                       int horizon, const GPenaltySpec& pen) {
    require(!models.empty() && !cohorts.empty(), Errc::InvalidArgument,
            "cross_evaluate needs at least one model and one cohort");

    std::vector<std::vector<CrossEvalCell>> matrix;
    for (const auto& model : models) {
        std::vector<CrossEvalCell> row;
        for (const auto& cohort : cohorts) {
            CrossEvalCell cell;
            cell.train_cohort = model.cohort_name;
            cell.test_cohort = cohort.name;
            for (const auto& series : cohort.test_series) {
                const auto norm = normalize(series, model.stats);
                const auto samples = windowize(norm, series, model.spec.input_len, horizon);
                if (samples.empty()) continue;
                const auto ps = predict_set(model.spec, model.params, samples, model.stats);
                PatientReport rep;
                rep.patient_id = series.patient_id;
                rep.metrics =
                    evaluate_all(ps, pen, series.interval_minutes, model.spec.input_len);
                cell.patients.push_back(std::move(rep));
            }

            // mean(SD) across patients, population divisor; lag over patients
            // where it is defined.
            auto fold = [&](auto proj) {
                double sum = 0.0, sum_sq = 0.0;
                std::size_t n = 0;
                for (const auto& p : cell.patients) {
                    const double v = proj(p.metrics);
                    if (std::isnan(v)) continue;
                    sum += v;
                    sum_sq += v * v;
                    ++n;
                }
                if (n == 0) return std::pair<double, double>{0.0, 0.0};
                const double mean = sum / static_cast<double>(n);
                const double var = std::max(sum_sq / static_cast<double>(n) - mean * mean, 0.0);
                return std::pair<double, double>{mean, std::sqrt(var)};
            };
            std::tie(cell.mean.rmse, cell.sd.rmse) = fold([](const MetricsReport& m) { return m.rmse; });
            std::tie(cell.mean.mard, cell.sd.mard) = fold([](const MetricsReport& m) { return m.mard; });
            std::tie(cell.mean.mae, cell.sd.mae) = fold([](const MetricsReport& m) { return m.mae; });
            std::tie(cell.mean.grmse, cell.sd.grmse) = fold([](const MetricsReport& m) { return m.grmse; });
            std::tie(cell.mean.time_lag, cell.sd.time_lag) =
                fold([](const MetricsReport& m) { return m.time_lag; });
            for (const auto& p : cell.patients) cell.mean.n_samples += p.metrics.n_samples;
            row.push_back(std::move(cell));
        }
        matrix.push_back(std::move(row));
    }
    return matrix;
}

} // namespace gluadfl
