#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace gluadfl {

// (actual, predicted) in mg/dL, ordered by target index within a patient.
struct PredictionPair {
    double actual = 0.0;
    double predicted = 0.0;
};
using PredictionSet = std::vector<PredictionPair>;

// Step penalty surface: clinically dangerous errors (overestimating lows,
// underestimating highs) weigh penalty_weight, everything else 1. Reports
// carry the variant tag "step2.0" so a different surface can be swapped in.
struct GPenaltySpec {
    double hypo_threshold = 70.0;
    double hyper_threshold = 180.0;
    double penalty_weight = 2.0;
};

struct MetricsReport {
    double rmse = 0.0;     // mg/dL
    double mard = 0.0;     // percent
    double mae = 0.0;      // mg/dL
    double grmse = 0.0;    // mg/dL
    double time_lag = 0.0; // minutes; NaN when the series is too short
    std::size_t n_samples = 0;
};

double rmse(const PredictionSet& ps);
double mard(const PredictionSet& ps);
double mae(const PredictionSet& ps);
double grmse(const PredictionSet& ps, const GPenaltySpec& pen);

// delta_l * argmax_k Pearson(predicted[k:], actual[:len-k]) over
// k in [0, max_lag_samples], ties to the smallest k. With negative lags
// enabled the search order is 0, 1, -1, 2, -2, ...
double time_lag_minutes(std::span<const double> actual, std::span<const double> predicted,
                        int interval_minutes, int max_lag_samples, bool allow_negative = false);

MetricsReport evaluate_all(const PredictionSet& ps, const GPenaltySpec& pen, int interval_minutes,
                           int max_lag_samples);

extern const char* const kGrmseVariant; // identifies the penalty surface in reports

} // namespace gluadfl
