#include "gluadfl/timeseries.hpp"

#include <cmath>

#include "gluadfl/errors.hpp"

namespace gluadfl {

std::size_t GlucoseSeries::present_count() const noexcept {
    std::size_t n = 0;
    for (const auto& v : values) {
        if (v.has_value()) ++n;
    }
    return n;
}

void GlucoseSeries::validate() const {
    require(interval_minutes > 0, Errc::InvalidArgument, "interval_minutes must be positive");
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (!values[i].has_value()) continue;
        const double v = *values[i];
        if (!std::isfinite(v) || v <= 0.0 || v >= 1000.0) {
            raise(Errc::InvalidArgument, "reading " + std::to_string(i) + " of patient '" +
                                             patient_id + "' outside (0, 1000) mg/dL");
        }
    }
}

SeriesSplit split_by_time(const GlucoseSeries& series, SplitFractions f) {
    require(series.size() >= 3, Errc::InvalidArgument,
            "series '" + series.patient_id + "' has fewer than 3 readings");
    require(f.train > 0.0 && f.val > 0.0 && f.test > 0.0, Errc::InvalidArgument,
            "split fractions must all be positive");
    require(std::abs(f.train + f.val + f.test - 1.0) < 1e-9, Errc::InvalidArgument,
            "split fractions must sum to 1");

    const auto len = series.size();
    const auto b1 = static_cast<std::size_t>(std::floor(static_cast<double>(len) * f.train));
    const auto b2 = static_cast<std::size_t>(std::floor(static_cast<double>(len) * (f.train + f.val)));

    const std::int64_t step = static_cast<std::int64_t>(series.interval_minutes) * 60;
    auto slice = [&](std::size_t lo, std::size_t hi) {
        GlucoseSeries out;
        out.patient_id = series.patient_id;
        out.interval_minutes = series.interval_minutes;
        out.start_epoch_s = series.start_epoch_s + static_cast<std::int64_t>(lo) * step;
        out.values.assign(series.values.begin() + static_cast<std::ptrdiff_t>(lo),
                          series.values.begin() + static_cast<std::ptrdiff_t>(hi));
        return out;
    };

    return SeriesSplit{slice(0, b1), slice(b1, b2), slice(b2, len)};
}

namespace {

struct Moments {
    double sum = 0.0;
    double sum_sq = 0.0;
    std::size_t n = 0;

    void add(const GlucoseSeries& s) {
        for (const auto& v : s.values) {
            if (!v.has_value()) continue;
            sum += *v;
            sum_sq += *v * *v;
            ++n;
        }
    }

    NormStats finish() const {
        require(n >= 2, Errc::InvalidArgument,
                "need at least 2 present readings to fit normalization");
        const double mean = sum / static_cast<double>(n);
        const double var = sum_sq / static_cast<double>(n) - mean * mean;
        require(var > 0.0, Errc::ZeroVariance, "training readings have zero variance");
        return NormStats{mean, std::sqrt(var)};
    }
};

} // namespace

NormStats fit_norm(const GlucoseSeries& train) {
    Moments m;
    m.add(train);
    return m.finish();
}

NormStats fit_norm_pooled(std::span<const GlucoseSeries> trains) {
    Moments m;
    for (const auto& s : trains) m.add(s);
    return m.finish();
}

double normalize_value(double mgdl, const NormStats& stats) noexcept {
    return (mgdl - stats.mean) / stats.std_dev;
}

double denormalize(double normalized, const NormStats& stats) noexcept {
    return stats.mean + normalized * stats.std_dev;
}

std::vector<double> normalize(const GlucoseSeries& series, const NormStats& stats) {
    require(stats.std_dev > 0.0, Errc::InvalidArgument, "normalization std must be positive");
    std::vector<double> out(series.size(), 0.0);
    for (std::size_t i = 0; i < series.size(); ++i) {
        if (series.values[i].has_value()) out[i] = normalize_value(*series.values[i], stats);
    }
    return out;
}

std::vector<Sample> windowize(std::span<const double> norm_series, const GlucoseSeries& raw_series,
                              int input_len, int horizon) {
    require(input_len >= 1 && horizon >= 1, Errc::InvalidArgument,
            "input_len and horizon must be >= 1");
    require(norm_series.size() == raw_series.size(), Errc::ShapeMismatch,
            "normalized and raw series differ in length");

    std::vector<Sample> samples;
    const auto len = static_cast<std::ptrdiff_t>(raw_series.size());
    const auto window = static_cast<std::ptrdiff_t>(input_len);
    const auto h = static_cast<std::ptrdiff_t>(horizon);
    for (std::ptrdiff_t i = 0; i + window - 1 + h < len; ++i) {
        const std::ptrdiff_t target = i + window - 1 + h;
        if (!raw_series.values[static_cast<std::size_t>(target)].has_value()) continue;
        Sample s;
        s.input.assign(norm_series.begin() + i, norm_series.begin() + i + window);
        s.target = norm_series[static_cast<std::size_t>(target)];
        s.patient_id = raw_series.patient_id;
        s.target_index = static_cast<int>(target);
        samples.push_back(std::move(s));
    }
    return samples;
}

} // namespace gluadfl
