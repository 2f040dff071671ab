#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>

#include "gluadfl/errors.hpp"
#include "gluadfl/fl_engine.hpp"
#include "gluadfl/rng.hpp"

using namespace gluadfl;

namespace {

// Small in-memory cohort: every node gets a few random normalized samples.
std::vector<std::vector<Sample>> toy_samples(int n_nodes, int per_node, int input_len,
                                             std::uint64_t seed) {
    Rng rng(seed);
    std::vector<std::vector<Sample>> out(static_cast<std::size_t>(n_nodes));
    for (auto& node : out) {
        for (int i = 0; i < per_node; ++i) {
            Sample s;
            s.input.resize(static_cast<std::size_t>(input_len));
            for (auto& v : s.input) v = rng.normal();
            // target correlated with the last input so training has signal
            s.target = 0.8 * s.input.back() + 0.1 * rng.normal();
            s.target_index = i;
            node.push_back(std::move(s));
        }
    }
    return out;
}

RunConfig toy_config(int rounds = 5, double lr = 1e-2) {
    RunConfig cfg;
    cfg.rounds = rounds;
    cfg.learning_rate = lr;
    cfg.learner.kind = LearnerKind::Lstm;
    cfg.learner.input_len = 6;
    cfg.learner.hidden_size = 4;
    cfg.learner.init_scale = 0.3;
    cfg.topology.kind = TopologyKind::Random;
    cfg.topology.comm_batch = 3;
    cfg.batch_size = 8;
    cfg.eval_every = 2;
    cfg.seed = 99;
    return cfg;
}

std::vector<NodeState> toy_nodes(const RunConfig& cfg, int n_nodes, std::uint64_t data_seed = 1) {
    auto train = toy_samples(n_nodes, 24, cfg.learner.input_len, data_seed);
    auto val = toy_samples(n_nodes, 8, cfg.learner.input_len, data_seed + 100);
    return make_nodes(cfg, std::move(train), std::move(val));
}

ParamVector mean_by_hand(const std::vector<ParamVector>& vs) {
    ParamVector m(vs.front().size(), 0.0);
    for (const auto& v : vs) {
        for (std::size_t i = 0; i < m.size(); ++i) m[i] += v[i];
    }
    for (auto& x : m) x /= static_cast<double>(vs.size());
    return m;
}

} // namespace

TEST_CASE("aggregate_neighbors examples") {
    const ParamVector own{0.0};
    CHECK(aggregate_neighbors(own, {}) == own);

    std::vector<ParamVector> recv{{3.0}, {6.0}};
    CHECK(aggregate_neighbors(own, recv) == ParamVector{3.0});

    const ParamVector c{1.5, -2.25, 8.0};
    std::vector<ParamVector> same{c, c, c};
    CHECK(aggregate_neighbors(c, same) == c);

    std::vector<ParamVector> bad{{1.0, 2.0}};
    CHECK_THROWS_AS(aggregate_neighbors(own, bad), Error);
}

TEST_CASE("activity schedule draws exactly round(rho N) inactive nodes") {
    ActivitySchedule sched{16, 0.7, 42};
    CHECK(sched.inactive_per_round() == 11); // round(11.2)
    for (int t = 1; t <= 20; ++t) {
        const auto mask = sched.active_mask(t);
        CHECK(std::count(mask.begin(), mask.end(), 0) == 11);
    }
    ActivitySchedule all{16, 0.0, 42};
    const auto mask = all.active_mask(3);
    CHECK(std::count(mask.begin(), mask.end(), 1) == 16);
    ActivitySchedule bad{16, 1.0, 42};
    CHECK_THROWS_AS(bad.active_mask(1), Error);
}

TEST_CASE("one averaging round on the complete graph reaches the init mean") {
    RunConfig cfg = toy_config(1, 0.0); // gamma 0: pure averaging
    cfg.topology.comm_batch = 15;
    auto nodes = toy_nodes(cfg, 16);
    std::vector<ParamVector> inits;
    for (const auto& n : nodes) inits.push_back(n.params);
    const auto mean = mean_by_hand(inits);

    const auto rr = run_gluadfl(cfg, std::move(nodes));
    REQUIRE(rr.node_params.size() == 16);
    for (const auto& p : rr.node_params) {
        for (std::size_t i = 0; i < p.size(); ++i) {
            CHECK(std::abs(p[i] - mean[i]) < 1e-12);
        }
    }
    for (std::size_t i = 0; i < mean.size(); ++i) {
        CHECK(std::abs(rr.population[i] - mean[i]) < 1e-12);
    }
}

TEST_CASE("a round with every node idle is a no-op") {
    RunConfig cfg = toy_config(3, 1e-2);
    cfg.inactive_ratio = 0.97; // round(0.97 * 16) = 16: all idle every round
    auto nodes = toy_nodes(cfg, 16);
    std::vector<ParamVector> inits;
    for (const auto& n : nodes) inits.push_back(n.params);

    const auto rr = run_gluadfl(cfg, std::move(nodes));
    for (std::size_t n = 0; n < 16; ++n) CHECK(rr.node_params[n] == inits[n]);
    CHECK(rr.population == mean_by_hand(inits));
}

TEST_CASE("gamma 0 conserves the parameter mean on regular symmetric graphs") {
    for (auto kind : {TopologyKind::Ring, TopologyKind::Random}) {
        RunConfig cfg = toy_config(5, 0.0);
        cfg.topology.kind = kind;
        cfg.topology.comm_batch = kind == TopologyKind::Random ? 11 : 7; // complete when random
        auto nodes = toy_nodes(cfg, 12);
        std::vector<ParamVector> inits;
        for (const auto& n : nodes) inits.push_back(n.params);
        const auto before = mean_by_hand(inits);

        const auto rr = run_gluadfl(cfg, std::move(nodes));
        const auto after = mean_by_hand(rr.node_params);
        for (std::size_t i = 0; i < before.size(); ++i) {
            CHECK(after[i] == doctest::Approx(before[i]).epsilon(1e-12));
        }
    }
}

TEST_CASE("each node's aggregation matches the brute-force oracle (directed random)") {
    RunConfig cfg = toy_config(1, 0.0);
    cfg.topology.kind = TopologyKind::Random;
    cfg.topology.comm_batch = 3;
    cfg.seed = 321;
    auto nodes = toy_nodes(cfg, 8);
    std::vector<ParamVector> inits;
    for (const auto& n : nodes) inits.push_back(n.params);

    const auto rr = run_gluadfl(cfg, std::move(nodes));

    // reconstruct round 1's graph from the public stream derivation
    const auto graph = sample_round_graph(cfg.topology, std::vector<std::uint8_t>(8, 1),
                                          run_streams::graph(cfg.seed), 1);
    for (int n = 0; n < 8; ++n) {
        std::vector<ParamVector> received;
        for (int src : graph.in_neighbors[static_cast<std::size_t>(n)]) {
            received.push_back(inits[static_cast<std::size_t>(src)]);
        }
        const auto expected = aggregate_neighbors(inits[static_cast<std::size_t>(n)], received);
        CHECK(rr.node_params[static_cast<std::size_t>(n)] == expected); // bitwise
    }
}

TEST_CASE("processing order permutation leaves results bit-identical") {
    RunConfig a = toy_config(50, 5e-3);
    a.inactive_ratio = 0.3;
    RunConfig b = a;
    b.processing_shuffle_seed = 987654321;

    const auto ra = run_gluadfl(a, toy_nodes(a, 16));
    const auto rb = run_gluadfl(b, toy_nodes(b, 16));
    CHECK(ra.population == rb.population);
    REQUIRE(ra.trace.records.size() == rb.trace.records.size());
    for (std::size_t i = 0; i < ra.trace.records.size(); ++i) {
        CHECK(ra.trace.records[i].val_rmse == rb.trace.records[i].val_rmse);
        CHECK(ra.trace.records[i].in_edges == rb.trace.records[i].in_edges);
    }
    for (std::size_t n = 0; n < ra.node_params.size(); ++n) {
        CHECK(ra.node_params[n] == rb.node_params[n]);
    }
}

TEST_CASE("identical configs reproduce traces and parameters bitwise") {
    RunConfig cfg = toy_config(20, 1e-2);
    cfg.inactive_ratio = 0.25;
    const auto a = run_gluadfl(cfg, toy_nodes(cfg, 9));
    const auto b = run_gluadfl(cfg, toy_nodes(cfg, 9));
    CHECK(a.population == b.population);
    REQUIRE(a.trace.records.size() == b.trace.records.size());
    for (std::size_t i = 0; i < a.trace.records.size(); ++i) {
        CHECK(a.trace.records[i].val_rmse == b.trace.records[i].val_rmse);
    }
}

TEST_CASE("final population is the arithmetic mean of final node parameters") {
    RunConfig cfg = toy_config(7, 1e-2);
    cfg.inactive_ratio = 0.4;
    const auto rr = run_gluadfl(cfg, toy_nodes(cfg, 10));
    const auto recomputed = mean_by_hand(rr.node_params);
    for (std::size_t i = 0; i < recomputed.size(); ++i) {
        CHECK(rr.population[i] == doctest::Approx(recomputed[i]).epsilon(1e-12));
    }
}

TEST_CASE("divergence is reported with round and node") {
    RunConfig cfg = toy_config(30, 1e200); // absurd step size
    cfg.learner.kind = LearnerKind::Linear;
    try {
        run_gluadfl(cfg, toy_nodes(cfg, 4));
        FAIL("expected divergence");
    } catch (const Error& e) {
        CHECK(e.code() == Errc::Diverged);
        const std::string what = e.what();
        CHECK(what.find("round") != std::string::npos);
        CHECK(what.find("node") != std::string::npos);
    }
}

TEST_CASE("fedavg with one client degenerates to plain SGD") {
    RunConfig cfg = toy_config(6, 1e-2);
    auto nodes = toy_nodes(cfg, 1);
    const auto node_copy = nodes.front();

    const auto rr = run_fedavg(cfg, std::move(nodes));

    // manual SGD with the same batch stream
    ParamVector params = node_copy.params;
    for (int t = 1; t <= cfg.rounds; ++t) {
        Rng rng(derive_stream({node_copy.batch_rng_seed, static_cast<std::uint64_t>(t), 0}));
        const auto idx = rng.sample_without_replacement(
            static_cast<int>(node_copy.train_samples.size()),
            std::min<int>(cfg.batch_size, static_cast<int>(node_copy.train_samples.size())));
        std::vector<Sample> batch;
        for (int i : idx) batch.push_back(node_copy.train_samples[static_cast<std::size_t>(i)]);
        const auto g = grad(cfg.learner, params, std::span<const Sample>(batch));
        sgd_step_inplace(params, g, cfg.learning_rate);
    }
    CHECK(rr.population == params);
}

TEST_CASE("fedavg with gamma 0 keeps the server constant") {
    RunConfig cfg = toy_config(8, 0.0);
    auto nodes = toy_nodes(cfg, 6);
    std::vector<ParamVector> inits;
    for (const auto& n : nodes) inits.push_back(n.params);
    const auto rr = run_fedavg(cfg, std::move(nodes));
    const auto expected = mean_by_hand(inits);
    for (std::size_t i = 0; i < expected.size(); ++i) {
        CHECK(rr.population[i] == doctest::Approx(expected[i]).epsilon(1e-15));
    }
    for (std::size_t i = 1; i < rr.trace.records.size(); ++i) {
        CHECK(rr.trace.records[i].val_rmse == rr.trace.records[0].val_rmse);
    }
}

TEST_CASE("pooled supervised equals single-client fedavg, trace included") {
    RunConfig cfg = toy_config(10, 1e-2);
    const auto fed = run_fedavg(cfg, toy_nodes(cfg, 1));
    const auto pooled = run_pooled_supervised(cfg, toy_nodes(cfg, 1));
    CHECK(fed.population == pooled.population);
    REQUIRE(fed.trace.records.size() == pooled.trace.records.size());
    for (std::size_t i = 0; i < fed.trace.records.size(); ++i) {
        CHECK(fed.trace.records[i].round == pooled.trace.records[i].round);
        CHECK(fed.trace.records[i].val_rmse == pooled.trace.records[i].val_rmse);
    }
}

TEST_CASE("pooled supervised with zero rounds returns the mean initialization") {
    RunConfig cfg = toy_config(0, 1e-2);
    auto nodes = toy_nodes(cfg, 5);
    std::vector<ParamVector> inits;
    for (const auto& n : nodes) inits.push_back(n.params);
    const auto rr = run_pooled_supervised(cfg, nodes);
    const auto expected = mean_by_hand(inits);
    for (std::size_t i = 0; i < expected.size(); ++i) {
        CHECK(rr.population[i] == doctest::Approx(expected[i]).epsilon(1e-15));
    }
    CHECK(rr.trace.records.empty());
}

TEST_CASE("resuming from a snapshot is bit-identical to an uninterrupted run") {
    RunConfig cfg = toy_config(12, 1e-2);
    cfg.inactive_ratio = 0.3;
    const auto straight = run_gluadfl(cfg, toy_nodes(cfg, 8));

    // first half, snapshot through disk, second half
    RunConfig first = cfg;
    first.rounds = 6;
    const auto half = run_gluadfl(first, toy_nodes(first, 8));
    const auto path = std::filesystem::temp_directory_path() / "gluadfl_resume_test.json";
    save_run_snapshot(path, RunSnapshot{6, half.node_params});
    const auto snap = load_run_snapshot(path);
    std::filesystem::remove(path);
    CHECK(snap.node_params == half.node_params);

    RunConfig second = cfg;
    auto nodes = toy_nodes(second, 8);
    second.start_round = apply_run_snapshot(snap, nodes);
    CHECK(second.start_round == 7);
    const auto resumed = run_gluadfl(second, std::move(nodes));

    CHECK(resumed.population == straight.population);
    for (std::size_t n = 0; n < straight.node_params.size(); ++n) {
        CHECK(resumed.node_params[n] == straight.node_params[n]);
    }

    const auto fed_straight = run_fedavg(cfg, toy_nodes(cfg, 8));
    RunConfig fed_first = cfg;
    fed_first.rounds = 6;
    const auto fed_half = run_fedavg(fed_first, toy_nodes(fed_first, 8));
    RunConfig fed_second = cfg;
    fed_second.start_round = 7;
    auto fed_nodes = toy_nodes(fed_second, 8);
    apply_run_snapshot(RunSnapshot{6, fed_half.node_params}, fed_nodes);
    const auto fed_resumed = run_fedavg(fed_second, std::move(fed_nodes));
    CHECK(fed_resumed.population == fed_straight.population);
}

TEST_CASE("inactive nodes carry parameters bit-identically through skipped rounds") {
    RunConfig cfg = toy_config(10, 1e-2);
    cfg.inactive_ratio = 0.5;
    const ActivitySchedule sched{12, cfg.inactive_ratio, run_streams::activity(cfg.seed)};

    // advance one round at a time and watch the idle nodes
    auto nodes = toy_nodes(cfg, 12);
    std::vector<ParamVector> prev;
    for (const auto& n : nodes) prev.push_back(n.params);
    for (int t = 1; t <= cfg.rounds; ++t) {
        RunConfig step = cfg;
        step.start_round = t;
        step.rounds = t;
        auto working = toy_nodes(cfg, 12);
        for (std::size_t n = 0; n < working.size(); ++n) working[n].params = prev[n];
        const auto rr = run_gluadfl(step, std::move(working));
        const auto mask = sched.active_mask(t);
        for (std::size_t n = 0; n < rr.node_params.size(); ++n) {
            if (!mask[n]) CHECK(rr.node_params[n] == prev[n]);
        }
        prev = rr.node_params;
    }
}

TEST_CASE("personalize with zero steps returns the start unchanged") {
    RunConfig cfg = toy_config();
    auto nodes = toy_nodes(cfg, 3);
    const auto tuned = personalize(cfg.learner, nodes[0].params, nodes[0], 1e-4, 0, 8);
    CHECK(tuned == nodes[0].params);
    CHECK_THROWS_AS(personalize(cfg.learner, nodes[0].params, nodes[0], 1e-4, -1, 8), Error);
}

TEST_CASE("personalize takes deterministic fine-tuning steps") {
    RunConfig cfg = toy_config();
    auto nodes = toy_nodes(cfg, 3);
    const auto a = personalize(cfg.learner, nodes[1].params, nodes[1], 1e-3, 20, 8);
    const auto b = personalize(cfg.learner, nodes[1].params, nodes[1], 1e-3, 20, 8);
    CHECK(a == b);
    CHECK(a != nodes[1].params);
}

TEST_CASE("cross_evaluate fills the seen/unseen matrix") {
    // two tiny synthetic-ish cohorts built by hand
    auto make_series = [](const std::string& id, double base, std::uint64_t seed) {
        GlucoseSeries s;
        s.patient_id = id;
        Rng rng(seed);
        double v = base;
        for (int i = 0; i < 120; ++i) {
            v = std::clamp(v + rng.normal() * 4.0, 60.0, 350.0);
            s.values.emplace_back(v);
        }
        return s;
    };
    TestCohort a{"A", {make_series("a0", 140.0, 1), make_series("a1", 160.0, 2)}};
    TestCohort b{"B", {make_series("b0", 150.0, 3)}};

    LearnerSpec spec{LearnerKind::Linear, 12, 0, 7, 0.1};
    EvalModel model{"A", spec, init_params(spec), NormStats{150.0, 40.0}};
    std::vector<TestCohort> cohorts{a, b};

    const auto matrix = cross_evaluate(std::span<const EvalModel>(&model, 1), cohorts, 6);
    REQUIRE(matrix.size() == 1);
    REQUIRE(matrix[0].size() == 2);
    CHECK(matrix[0][0].train_cohort == "A");
    CHECK(matrix[0][0].test_cohort == "A");
    CHECK(matrix[0][0].patients.size() == 2);
    CHECK(matrix[0][1].test_cohort == "B");
    CHECK(matrix[0][1].patients.size() == 1);
    for (const auto& p : matrix[0][0].patients) {
        CHECK(p.metrics.n_samples > 0);
        CHECK(p.metrics.rmse > 0.0);
        CHECK(p.metrics.rmse >= p.metrics.mae);
    }
    CHECK(matrix[0][0].mean.n_samples ==
          matrix[0][0].patients[0].metrics.n_samples + matrix[0][0].patients[1].metrics.n_samples);
}
