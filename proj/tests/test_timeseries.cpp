#include <doctest.h>

#include <cmath>
#include <sstream>

#include "gluadfl/csv.hpp"
#include "gluadfl/errors.hpp"
#include "gluadfl/rng.hpp"
#include "gluadfl/synth.hpp"
#include "gluadfl/timeseries.hpp"

using namespace gluadfl;

namespace {

GlucoseSeries flat_series(std::size_t n, double value = 120.0) {
    GlucoseSeries s;
    s.patient_id = "p0";
    s.start_epoch_s = 1704067200;
    for (std::size_t i = 0; i < n; ++i) s.values.emplace_back(value);
    return s;
}

GlucoseSeries random_gapped_series(Rng& rng, std::size_t n, double gap_prob) {
    GlucoseSeries s;
    s.patient_id = "rand";
    for (std::size_t i = 0; i < n; ++i) {
        if (rng.uniform() < gap_prob) s.values.emplace_back(std::nullopt);
        else s.values.emplace_back(rng.uniform(60.0, 300.0));
    }
    return s;
}

} // namespace

TEST_CASE("split_by_time boundaries follow floor of cumulative fractions") {
    auto check = [](std::size_t n, std::size_t a, std::size_t b, std::size_t c) {
        const auto sp = split_by_time(flat_series(n), SplitFractions{0.6, 0.2, 0.2});
        CHECK(sp.train.size() == a);
        CHECK(sp.val.size() == b);
        CHECK(sp.test.size() == c);
    };
    check(100, 60, 20, 20);
    check(101, 60, 20, 21);
    check(10, 6, 2, 2);
}

TEST_CASE("split_by_time preserves count, order and the time grid") {
    Rng rng(7);
    for (int rep = 0; rep < 50; ++rep) {
        const auto n = 3 + rng.below(400);
        const auto series = random_gapped_series(rng, n, 0.2);
        const auto sp = split_by_time(series, SplitFractions{0.5, 0.25, 0.25});
        CHECK(sp.train.size() + sp.val.size() + sp.test.size() == n);
        std::vector<std::optional<double>> glued = sp.train.values;
        glued.insert(glued.end(), sp.val.values.begin(), sp.val.values.end());
        glued.insert(glued.end(), sp.test.values.begin(), sp.test.values.end());
        CHECK(glued == series.values);
        const std::int64_t step = series.interval_minutes * 60;
        CHECK(sp.val.start_epoch_s ==
              series.start_epoch_s + static_cast<std::int64_t>(sp.train.size()) * step);
        CHECK(sp.test.start_epoch_s ==
              sp.val.start_epoch_s + static_cast<std::int64_t>(sp.val.size()) * step);
    }
}

TEST_CASE("split_by_time rejects short series and bad fractions") {
    CHECK_THROWS_AS(split_by_time(flat_series(2), SplitFractions{}), Error);
    CHECK_THROWS_AS(split_by_time(flat_series(10), SplitFractions{0.5, 0.5, 0.5}), Error);
    CHECK_THROWS_AS(split_by_time(flat_series(10), SplitFractions{1.0, -0.5, 0.5}), Error);
}

TEST_CASE("fit_norm uses population divisor over present readings") {
    GlucoseSeries s = flat_series(0);
    s.values = {100.0, 200.0};
    const auto st = fit_norm(s);
    CHECK(st.mean == doctest::Approx(150.0).epsilon(1e-12));
    CHECK(st.std_dev == doctest::Approx(50.0).epsilon(1e-12));

    GlucoseSeries gapped = flat_series(0);
    gapped.values = {120.0, std::nullopt, 120.0, 180.0};
    CHECK(fit_norm(gapped).mean == doctest::Approx(140.0).epsilon(1e-12));
}

TEST_CASE("fit_norm error cases") {
    GlucoseSeries constant = flat_series(20, 100.0);
    CHECK_THROWS_WITH_AS(fit_norm(constant), doctest::Contains("zero variance"), Error);
    try {
        fit_norm(constant);
    } catch (const Error& e) {
        CHECK(e.code() == Errc::ZeroVariance);
    }

    GlucoseSeries one = flat_series(0);
    one.values = {100.0, std::nullopt};
    CHECK_THROWS_AS(fit_norm(one), Error);
}

TEST_CASE("normalize maps mean to 0, mean+std to 1, MISSING to 0") {
    const NormStats st{150.0, 50.0};
    GlucoseSeries s = flat_series(0);
    s.values = {150.0, std::nullopt, 200.0};
    const auto norm = normalize(s, st);
    CHECK(norm[0] == 0.0);
    CHECK(norm[1] == 0.0);
    CHECK(norm[2] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("denormalize inverts normalize to 1e-12 relative") {
    const NormStats st{143.7, 58.31};
    CHECK(denormalize(0.0, st) == st.mean);
    CHECK(denormalize(1.0, st) == doctest::Approx(st.mean + st.std_dev).epsilon(1e-15));
    Rng rng(99);
    double max_rel = 0.0;
    for (int i = 0; i < 1000; ++i) {
        const double v = rng.uniform(40.0, 400.0);
        const double back = denormalize(normalize_value(v, st), st);
        max_rel = std::max(max_rel, std::abs(back - v) / v);
    }
    CHECK(max_rel < 1e-12);
}

TEST_CASE("windowize counts on the spec examples") {
    const NormStats st{150.0, 50.0};
    auto count = [&](std::size_t n, std::vector<std::size_t> missing_at) {
        GlucoseSeries s = flat_series(n, 100.0);
        for (std::size_t i = 0; i < n; ++i) {
            if (i % 3 == 0) s.values[i] = 90.0 + static_cast<double>(i); // avoid constants
        }
        for (auto i : missing_at) s.values[i].reset();
        return windowize(normalize(s, st), s, 12, 6).size();
    };
    CHECK(count(18, {}) == 1);
    CHECK(count(19, {18}) == 1);
    CHECK(count(17, {}) == 0);
}

TEST_CASE("windowize matches exhaustive enumeration on random gapped series") {
    Rng rng(2024);
    const NormStats st{150.0, 50.0};
    for (int rep = 0; rep < 200; ++rep) {
        const int L = 1 + rng.below_int(14);
        const int H = 1 + rng.below_int(8);
        const auto n = rng.below(90);
        const auto series = random_gapped_series(rng, n, rng.uniform(0.0, 0.4));
        const auto norm = normalize(series, st);
        const auto samples = windowize(norm, series, L, H);

        // independent enumeration of valid (window, present target) pairs
        std::size_t expected = 0;
        for (std::size_t i = 0; i + static_cast<std::size_t>(L + H) <= n; ++i) {
            const std::size_t target = i + static_cast<std::size_t>(L - 1 + H);
            if (series.values[target].has_value()) ++expected;
        }
        REQUIRE(samples.size() == expected);

        for (const auto& smp : samples) {
            CHECK(smp.input.size() == static_cast<std::size_t>(L));
            const auto start = static_cast<std::size_t>(smp.target_index) -
                               static_cast<std::size_t>(L - 1 + H);
            for (int k = 0; k < L; ++k) {
                CHECK(smp.input[static_cast<std::size_t>(k)] ==
                      norm[start + static_cast<std::size_t>(k)]);
            }
            CHECK(smp.target == norm[static_cast<std::size_t>(smp.target_index)]);
            CHECK(series.values[static_cast<std::size_t>(smp.target_index)].has_value());
        }
    }
}

TEST_CASE("synthetic cohort hits the calibration band") {
    SynthCohortSpec spec;
    spec.n_patients = 6;
    spec.days = 5;
    spec.rng_seed = 11;
    spec.mean_target = 155.0;
    spec.sd_target = 58.0;
    const auto cohort = generate_synth_cohort(spec);
    REQUIRE(cohort.size() == 6);

    double sum = 0.0, sum_sq = 0.0;
    std::size_t n = 0;
    for (const auto& s : cohort) {
        for (const auto& v : s.values) {
            REQUIRE(v.has_value());
            CHECK(*v >= 40.0);
            CHECK(*v <= 400.0);
            sum += *v;
            sum_sq += *v * *v;
            ++n;
        }
    }
    const double mean = sum / static_cast<double>(n);
    const double sd = std::sqrt(sum_sq / static_cast<double>(n) - mean * mean);
    CHECK(mean > 145.0);
    CHECK(mean < 165.0);
    CHECK(sd > 48.0);
    CHECK(sd < 68.0);
}

TEST_CASE("synthetic cohort is reproducible bit-exactly and honors missing_rate") {
    SynthCohortSpec spec;
    spec.n_patients = 3;
    spec.days = 4;
    spec.rng_seed = 5;
    spec.missing_rate = 0.1;
    const auto a = generate_synth_cohort(spec);
    const auto b = generate_synth_cohort(spec);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].patient_id == b[i].patient_id);
        CHECK(a[i].values == b[i].values);
    }

    std::size_t missing = 0, total = 0;
    for (const auto& s : a) {
        for (const auto& v : s.values) {
            ++total;
            if (!v.has_value()) ++missing;
        }
    }
    const double rate = static_cast<double>(missing) / static_cast<double>(total);
    CHECK(rate > 0.05);
    CHECK(rate < 0.12);

    spec.missing_rate = 0.0;
    for (const auto& s : generate_synth_cohort(spec)) {
        CHECK(s.present_count() == s.size());
    }
}

TEST_CASE("synthetic cohort rejects bad specs") {
    SynthCohortSpec spec;
    spec.missing_rate = 0.6;
    CHECK_THROWS_AS(generate_synth_cohort(spec), Error);
    spec.missing_rate = 0.0;
    spec.n_patients = 0;
    CHECK_THROWS_AS(generate_synth_cohort(spec), Error);
}

TEST_CASE("unreachable calibration targets fail explicitly") {
    SynthCohortSpec spec;
    spec.n_patients = 2;
    spec.days = 2;
    spec.rng_seed = 3;
    // mean pinned to the lower clip bound leaves no room for this spread
    spec.mean_target = 40.0;
    spec.sd_target = 200.0;
    try {
        generate_synth_cohort(spec);
        FAIL("expected CalibrationFailed");
    } catch (const Error& e) {
        CHECK(e.code() == Errc::CalibrationFailed);
    }
}

TEST_CASE("iso8601 round trip") {
    CHECK(format_iso8601(0) == "1970-01-01T00:00:00Z");
    CHECK(format_iso8601(1704067200) == "2024-01-01T00:00:00Z");
    CHECK(parse_iso8601("2024-01-01T00:00:00Z") == 1704067200);
    Rng rng(3);
    for (int i = 0; i < 200; ++i) {
        const auto t = static_cast<std::int64_t>(rng.below(4102444800ull)); // < 2100
        CHECK(parse_iso8601(format_iso8601(t)) == t);
    }
    CHECK_THROWS_AS(parse_iso8601("2024-01-01 bad"), Error);
}

TEST_CASE("cgm csv round trip keeps values bit-exact and gaps explicit") {
    Rng rng(17);
    GlucoseSeries s = random_gapped_series(rng, 50, 0.2);
    s.patient_id = "alpha";
    s.start_epoch_s = 1704067200;
    // trailing entry must be present so the row count fixes the length
    s.values.back() = 123.456;

    std::stringstream ss;
    write_cgm_csv(ss, s);
    const auto read = read_cgm_csv(ss, 5);
    REQUIRE(read.size() == 1);
    CHECK(read[0].patient_id == "alpha");
    CHECK(read[0].start_epoch_s == s.start_epoch_s);
    REQUIRE(read[0].size() == s.size());
    CHECK(read[0].values == s.values);
}

TEST_CASE("cgm csv import validates the grid") {
    std::stringstream off_grid;
    off_grid << "patient_id,timestamp_iso8601,glucose_mgdl\n"
             << "p,2024-01-01T00:00:00Z,100\n"
             << "p,2024-01-01T00:05:00Z,105\n"
             << "p,2024-01-01T00:12:00Z,110\n";
    CHECK_THROWS_WITH_AS(read_cgm_csv(off_grid, 5), doctest::Contains("grid"), Error);

    std::stringstream wrong_rate;
    wrong_rate << "patient_id,timestamp_iso8601,glucose_mgdl\n"
               << "p,2024-01-01T00:00:00Z,100\n"
               << "p,2024-01-01T00:10:00Z,105\n"
               << "p,2024-01-01T00:20:00Z,110\n";
    CHECK_THROWS_WITH_AS(read_cgm_csv(wrong_rate, 5), doctest::Contains("inferred interval"),
                         Error);

    std::stringstream unsorted;
    unsorted << "patient_id,timestamp_iso8601,glucose_mgdl\n"
             << "p,2024-01-01T00:05:00Z,100\n"
             << "p,2024-01-01T00:00:00Z,110\n";
    CHECK_THROWS_WITH_AS(read_cgm_csv(unsorted, 5), doctest::Contains("sorted"), Error);

    std::stringstream two_patients;
    two_patients << "patient_id,timestamp_iso8601,glucose_mgdl\n"
                 << "a,2024-01-01T00:00:00Z,100\n"
                 << "a,2024-01-01T00:05:00Z,\n"
                 << "a,2024-01-01T00:10:00Z,120\n"
                 << "b,2024-01-01T00:00:00Z,90\n"
                 << "b,2024-01-01T00:05:00Z,95\n";
    const auto cohort = read_cgm_csv(two_patients, 5);
    REQUIRE(cohort.size() == 2);
    CHECK(cohort[0].patient_id == "a");
    CHECK(!cohort[0].values[1].has_value());
    CHECK(cohort[1].size() == 2);
}
