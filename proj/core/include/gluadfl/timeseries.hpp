#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace gluadfl {

// One CGM trace on a uniform time grid. Gaps are explicit MISSING entries
// (nullopt); indices always map to start_epoch_s + i * interval_minutes * 60.
struct GlucoseSeries {
    std::string patient_id;
    std::int64_t start_epoch_s = 0;
    int interval_minutes = 5;
    std::vector<std::optional<double>> values;

    std::size_t size() const noexcept { return values.size(); }
    std::size_t present_count() const noexcept;

    // Checks the mg/dL range invariant on present readings; throws on violation.
    void validate() const;
};

// Z-score statistics, always fit on a training split.
struct NormStats {
    double mean = 0.0;
    double std_dev = 1.0;
};

// One supervised pair: L normalized inputs (gaps zero-filled) and the
// normalized reading H steps past the window. Targets are always present
// readings in the raw series.
struct Sample {
    std::vector<double> input;
    double target = 0.0;
    std::string patient_id;
    int target_index = 0;
};

struct SplitFractions {
    double train = 0.6;
    double val = 0.2;
    double test = 0.2;
};

struct SeriesSplit {
    GlucoseSeries train;
    GlucoseSeries val;
    GlucoseSeries test;
};

// Contiguous prefix/middle/suffix partition with boundaries at
// floor(len * cumulative_fraction). The val/test pieces keep their own
// start times so the grid invariant still holds.
SeriesSplit split_by_time(const GlucoseSeries& series, SplitFractions fractions);

// Mean and population standard deviation (divisor N) over present readings.
NormStats fit_norm(const GlucoseSeries& train);

// Pooled variant over several patients' training splits.
NormStats fit_norm_pooled(std::span<const GlucoseSeries> trains);

double normalize_value(double mgdl, const NormStats& stats) noexcept;
double denormalize(double normalized, const NormStats& stats) noexcept;

// Present reading -> (v - mean) / std, MISSING -> 0.0.
std::vector<double> normalize(const GlucoseSeries& series, const NormStats& stats);

// Stride-1 sliding windows. A sample is emitted for window start i when the
// raw reading at i + input_len - 1 + horizon is present; inputs may contain
// zero-filled gaps. Series shorter than input_len + horizon yield no samples.
std::vector<Sample> windowize(std::span<const double> norm_series, const GlucoseSeries& raw_series,
                              int input_len, int horizon);

} // namespace gluadfl
