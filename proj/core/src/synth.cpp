#include "gluadfl/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "gluadfl/errors.hpp"
#include "gluadfl/rng.hpp"

namespace gluadfl {

namespace {

constexpr double kTwoPi = 2.0 * 3.14159265358979323846;
constexpr double kClipLo = 40.0;
constexpr double kClipHi = 400.0;
constexpr std::uint64_t kSynthTag = 0x53594e54ULL;   // shape stream
constexpr std::uint64_t kGapTag = 0x47415053ULL;     // missingness stream

struct Meal {
    double at_min;     // absolute minutes from series start
    double amplitude;  // peak height, mg/dL before calibration
    double tau_rise;
    double tau_decay;
};

// Bi-exponential excursion normalized to unit peak.
double excursion(double dt_min, const Meal& m) {
    if (dt_min <= 0.0) return 0.0;
    const double raw = std::exp(-dt_min / m.tau_decay) - std::exp(-dt_min / m.tau_rise);
    const double t_peak =
        std::log(m.tau_decay / m.tau_rise) * m.tau_decay * m.tau_rise / (m.tau_decay - m.tau_rise);
    const double peak =
        std::exp(-t_peak / m.tau_decay) - std::exp(-t_peak / m.tau_rise);
    return raw / peak;
}

// Uncalibrated trace for one patient: slow daily rhythm, 3-5 meal bumps per
// day, and an OU noise track.
std::vector<double> raw_trace(const SynthCohortSpec& spec, int patient) {
    Rng rng(derive_stream({spec.rng_seed, kSynthTag, static_cast<std::uint64_t>(patient)}));

    auto jitter = [&](double v) { return v * (1.0 + spec.heterogeneity * rng.uniform(-1.0, 1.0)); };

    const double base = spec.mean_target * (1.0 + 0.25 * spec.heterogeneity * rng.uniform(-1.0, 1.0));
    const double circ_amp = jitter(18.0);
    const double circ_phase_min = rng.uniform(0.0, 24.0 * 60.0);
    const double noise_sd = jitter(10.0);
    const double noise_tau_min = jitter(120.0);

    std::vector<Meal> meals;
    const double anchors[5] = {7.5, 12.5, 18.5, 15.5, 21.5}; // hours; snacks last
    for (int day = 0; day < spec.days; ++day) {
        const int n_meals = 3 + rng.below_int(3);
        for (int k = 0; k < n_meals; ++k) {
            Meal m;
            m.at_min = (day * 24.0 + anchors[k] + rng.uniform(-1.0, 1.0)) * 60.0;
            m.amplitude = jitter(rng.uniform(50.0, 120.0));
            m.tau_rise = rng.uniform(30.0, 45.0);
            m.tau_decay = rng.uniform(90.0, 150.0);
            meals.push_back(m);
        }
    }

    const int len = spec.days * 24 * 60 / spec.interval_minutes;
    std::vector<double> trace(static_cast<std::size_t>(len));
    const double dt = static_cast<double>(spec.interval_minutes);
    const double alpha = std::exp(-dt / noise_tau_min);
    const double shock_sd = noise_sd * std::sqrt(1.0 - alpha * alpha);
    double ou = noise_sd * rng.normal();
    for (int i = 0; i < len; ++i) {
        const double t_min = i * dt;
        double v = base + circ_amp * std::sin(kTwoPi * (t_min - circ_phase_min) / (24.0 * 60.0));
        for (const auto& m : meals) v += m.amplitude * excursion(t_min - m.at_min, m);
        v += ou;
        trace[static_cast<std::size_t>(i)] = v;
        ou = alpha * ou + shock_sd * rng.normal();
    }
    return trace;
}

void apply_gaps(const SynthCohortSpec& spec, int patient, GlucoseSeries& series) {
    if (spec.missing_rate <= 0.0) return;
    Rng rng(derive_stream({spec.rng_seed, kGapTag, static_cast<std::uint64_t>(patient)}));
    const auto len = series.size();
    const auto target = static_cast<std::size_t>(spec.missing_rate * static_cast<double>(len));
    std::size_t hidden = 0;
    // Contiguous gaps of 1..12 slots; overlaps just extend existing gaps.
    while (hidden < target) {
        const auto gap = 1 + static_cast<std::size_t>(rng.below(12));
        const auto start = static_cast<std::size_t>(rng.below(len));
        for (std::size_t i = start; i < std::min(start + gap, len) && hidden < target; ++i) {
            if (series.values[i].has_value()) {
                series.values[i].reset();
                ++hidden;
            }
        }
    }
}

} // namespace

std::vector<GlucoseSeries> generate_synth_cohort(const SynthCohortSpec& spec) {
    require(spec.n_patients >= 1, Errc::InvalidArgument, "n_patients must be >= 1");
    require(spec.days >= 1, Errc::InvalidArgument, "days must be >= 1");
    require(spec.missing_rate >= 0.0 && spec.missing_rate < 0.5, Errc::InvalidArgument,
            "missing_rate must be in [0, 0.5)");
    require(spec.interval_minutes > 0, Errc::InvalidArgument, "interval_minutes must be positive");

    std::vector<std::vector<double>> traces;
    traces.reserve(static_cast<std::size_t>(spec.n_patients));
    for (int p = 0; p < spec.n_patients; ++p) traces.push_back(raw_trace(spec, p));

    // Iterate an affine map v -> scale*(v - m) + shift against the post-clip
    // pooled moments until both targets are inside a 2 mg/dL tolerance.
    double scale = 1.0;
    double shift = spec.mean_target;
    double base_mean = 0.0;
    double base_sd = 1.0;
    {
        double sum = 0.0, sum_sq = 0.0;
        std::size_t n = 0;
        for (const auto& t : traces) {
            for (double v : t) {
                sum += v;
                sum_sq += v * v;
                ++n;
            }
        }
        base_mean = sum / static_cast<double>(n);
        base_sd = std::sqrt(std::max(sum_sq / static_cast<double>(n) - base_mean * base_mean, 1e-12));
        scale = spec.sd_target / base_sd;
    }

    constexpr int kMaxIters = 40;
    constexpr double kTol = 2.0;
    bool calibrated = false;
    for (int iter = 0; iter < kMaxIters && !calibrated; ++iter) {
        double sum = 0.0, sum_sq = 0.0;
        std::size_t n = 0;
        for (const auto& t : traces) {
            for (double v : t) {
                const double c = std::clamp(scale * (v - base_mean) + shift, kClipLo, kClipHi);
                sum += c;
                sum_sq += c * c;
                ++n;
            }
        }
        const double mean = sum / static_cast<double>(n);
        const double sd = std::sqrt(std::max(sum_sq / static_cast<double>(n) - mean * mean, 0.0));
        if (std::abs(mean - spec.mean_target) <= kTol && std::abs(sd - spec.sd_target) <= kTol) {
            calibrated = true;
            break;
        }
        if (sd > 1e-9) scale *= spec.sd_target / sd;
        shift += spec.mean_target - mean;
    }
    require(calibrated, Errc::CalibrationFailed,
            "pooled moments did not reach the mean/SD targets");

    std::vector<GlucoseSeries> cohort;
    cohort.reserve(traces.size());
    for (int p = 0; p < spec.n_patients; ++p) {
        GlucoseSeries s;
        char id[24];
        std::snprintf(id, sizeof id, "synth-%03d", p);
        s.patient_id = id;
        s.start_epoch_s = 1704067200; // 2024-01-01T00:00:00Z
        s.interval_minutes = spec.interval_minutes;
        s.values.reserve(traces[static_cast<std::size_t>(p)].size());
        for (double v : traces[static_cast<std::size_t>(p)]) {
            s.values.emplace_back(std::clamp(scale * (v - base_mean) + shift, kClipLo, kClipHi));
        }
        apply_gaps(spec, p, s);
        s.validate();
        cohort.push_back(std::move(s));
    }
    return cohort;
}

} // namespace gluadfl
