#include <benchmark/benchmark.h>

#include "gluadfl/fl_engine.hpp"
#include "gluadfl/rng.hpp"
#include "gluadfl/synth.hpp"
#include "gluadfl/timeseries.hpp"

using namespace gluadfl;

namespace {

std::vector<Sample> random_batch(int len, int n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Sample> batch(static_cast<std::size_t>(n));
    for (auto& s : batch) {
        s.input.resize(static_cast<std::size_t>(len));
        for (auto& v : s.input) v = rng.normal();
        s.target = rng.normal();
    }
    return batch;
}

void BM_LstmForward(benchmark::State& state) {
    LearnerSpec spec{LearnerKind::Lstm, 12, static_cast<int>(state.range(0)), 1, 0.5};
    const auto p = init_params(spec);
    const auto batch = random_batch(12, 1, 2);
    for (auto _ : state) {
        benchmark::DoNotOptimize(forward(spec, p, batch[0].input));
    }
}
BENCHMARK(BM_LstmForward)->Arg(8)->Arg(32)->Arg(128);

void BM_LstmGradBatch64(benchmark::State& state) {
    LearnerSpec spec{LearnerKind::Lstm, 12, static_cast<int>(state.range(0)), 1, 0.5};
    const auto p = init_params(spec);
    const auto batch = random_batch(12, 64, 3);
    for (auto _ : state) {
        benchmark::DoNotOptimize(grad(spec, p, std::span<const Sample>(batch)));
    }
}
BENCHMARK(BM_LstmGradBatch64)->Arg(8)->Arg(32);

void BM_RoundGraph(benchmark::State& state) {
    TopologySpec spec;
    spec.kind = TopologyKind::Random;
    spec.comm_batch = 7;
    const std::vector<std::uint8_t> active(static_cast<std::size_t>(state.range(0)), 1);
    int t = 0;
    for (auto _ : state) {
        benchmark::DoNotOptimize(sample_round_graph(spec, active, 42, ++t));
    }
}
BENCHMARK(BM_RoundGraph)->Arg(16)->Arg(128);

void BM_SynthCohort(benchmark::State& state) {
    SynthCohortSpec spec;
    spec.n_patients = 4;
    spec.days = static_cast<int>(state.range(0));
    spec.rng_seed = 5;
    for (auto _ : state) {
        benchmark::DoNotOptimize(generate_synth_cohort(spec));
    }
}
BENCHMARK(BM_SynthCohort)->Arg(7)->Arg(14);

void BM_GluadflRound(benchmark::State& state) {
    SynthCohortSpec sspec;
    sspec.n_patients = 16;
    sspec.days = 7;
    sspec.rng_seed = 9;
    const auto cohort = generate_synth_cohort(sspec);
    std::vector<GlucoseSeries> trains;
    std::vector<SeriesSplit> splits;
    for (const auto& s : cohort) splits.push_back(split_by_time(s, SplitFractions{}));
    for (const auto& sp : splits) trains.push_back(sp.train);
    const auto stats = fit_norm_pooled(trains);
    std::vector<std::vector<Sample>> train, val;
    for (const auto& sp : splits) {
        train.push_back(windowize(normalize(sp.train, stats), sp.train, 12, 6));
        val.push_back(windowize(normalize(sp.val, stats), sp.val, 12, 6));
    }

    RunConfig cfg;
    cfg.rounds = static_cast<int>(state.range(0));
    cfg.learning_rate = 0.05;
    cfg.clip_norm = 5.0;
    cfg.learner.kind = LearnerKind::Lstm;
    cfg.learner.hidden_size = 8;
    cfg.learner.init_scale = 0.5;
    cfg.topology.comm_batch = 7;
    cfg.eval_every = 1 << 20; // no evals inside the timed region
    cfg.stats = stats;
    for (auto _ : state) {
        benchmark::DoNotOptimize(run_gluadfl(cfg, make_nodes(cfg, train, val)));
    }
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_GluadflRound)->Arg(5)->Unit(benchmark::kMillisecond);

} // namespace

BENCHMARK_MAIN();
