#include "gluadfl/metrics.hpp"

#include <cmath>
#include <limits>

#include "gluadfl/errors.hpp"

namespace gluadfl {

const char* const kGrmseVariant = "step2.0";

namespace {

void check_nonempty(const PredictionSet& ps) {
    require(!ps.empty(), Errc::InvalidArgument, "empty prediction set");
}

// Pearson correlation of x against y; Degenerate if either side is constant.
double pearson(std::span<const double> x, std::span<const double> y) {
    const auto n = static_cast<double>(x.size());
    double sx = 0.0, sy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sx += x[i];
        sy += y[i];
    }
    const double mx = sx / n;
    const double my = sy / n;
    double sxx = 0.0, syy = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double dx = x[i] - mx;
        const double dy = y[i] - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    require(sxx > 0.0 && syy > 0.0, Errc::Degenerate,
            "zero-variance segment in cross-correlation");
    return sxy / std::sqrt(sxx * syy);
}

} // namespace

double rmse(const PredictionSet& ps) {
    check_nonempty(ps);
    double acc = 0.0;
    for (const auto& p : ps) {
        const double e = p.actual - p.predicted;
        acc += e * e;
    }
    return std::sqrt(acc / static_cast<double>(ps.size()));
}

double mard(const PredictionSet& ps) {
    check_nonempty(ps);
    double acc = 0.0;
    for (const auto& p : ps) {
        require(p.actual > 0.0, Errc::InvalidArgument, "MARD requires positive actual values");
        acc += std::abs(p.actual - p.predicted) / p.actual;
    }
    return acc / static_cast<double>(ps.size()) * 100.0;
}

double mae(const PredictionSet& ps) {
    check_nonempty(ps);
    double acc = 0.0;
    for (const auto& p : ps) acc += std::abs(p.actual - p.predicted);
    return acc / static_cast<double>(ps.size());
}

double grmse(const PredictionSet& ps, const GPenaltySpec& pen) {
    check_nonempty(ps);
    require(pen.hypo_threshold < pen.hyper_threshold, Errc::InvalidArgument,
            "hypo threshold must be below hyper threshold");
    require(pen.penalty_weight >= 1.0, Errc::InvalidArgument, "penalty_weight must be >= 1");
    double acc = 0.0;
    for (const auto& p : ps) {
        const double e = p.actual - p.predicted;
        const bool hypo_over = p.predicted > p.actual && p.actual < pen.hypo_threshold;
        const bool hyper_under = p.predicted < p.actual && p.actual > pen.hyper_threshold;
        const double w = (hypo_over || hyper_under) ? pen.penalty_weight : 1.0;
        acc += w * e * e;
    }
    return std::sqrt(acc / static_cast<double>(ps.size()));
}

double time_lag_minutes(std::span<const double> actual, std::span<const double> predicted,
                        int interval_minutes, int max_lag_samples, bool allow_negative) {
    require(actual.size() == predicted.size(), Errc::ShapeMismatch,
            "actual/predicted length mismatch");
    require(max_lag_samples >= 0, Errc::InvalidArgument, "max_lag_samples must be >= 0");
    require(actual.size() >= static_cast<std::size_t>(max_lag_samples) + 2, Errc::InvalidArgument,
            "series too short for the requested lag range");

    const auto len = actual.size();
    auto corr_at = [&](int k) {
        const auto lag = static_cast<std::size_t>(std::abs(k));
        const auto seg = len - lag;
        if (k >= 0) {
            return pearson(predicted.subspan(lag, seg), actual.subspan(0, seg));
        }
        return pearson(predicted.subspan(0, seg), actual.subspan(lag, seg));
    };

    int best_k = 0;
    double best = corr_at(0);
    auto consider = [&](int k) {
        const double c = corr_at(k);
        if (c > best) { // strict: ties keep the earlier candidate
            best = c;
            best_k = k;
        }
    };
    for (int k = 1; k <= max_lag_samples; ++k) {
        consider(k);
        if (allow_negative) consider(-k);
    }
    return static_cast<double>(best_k) * static_cast<double>(interval_minutes);
}

MetricsReport evaluate_all(const PredictionSet& ps, const GPenaltySpec& pen, int interval_minutes,
                           int max_lag_samples) {
    MetricsReport r;
    r.rmse = rmse(ps);
    r.mard = mard(ps);
    r.mae = mae(ps);
    r.grmse = grmse(ps, pen);
    r.n_samples = ps.size();
    if (ps.size() >= static_cast<std::size_t>(max_lag_samples) + 2 && max_lag_samples >= 0) {
        std::vector<double> act(ps.size()), pred(ps.size());
        for (std::size_t i = 0; i < ps.size(); ++i) {
            act[i] = ps[i].actual;
            pred[i] = ps[i].predicted;
        }
        try {
            r.time_lag = time_lag_minutes(act, pred, interval_minutes, max_lag_samples);
        } catch (const Error&) {
            r.time_lag = std::numeric_limits<double>::quiet_NaN(); // constant segment
        }
    } else {
        r.time_lag = std::numeric_limits<double>::quiet_NaN();
    }
    return r;
}

} // namespace gluadfl
