#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "gluadfl/timeseries.hpp"

namespace gluadfl {

// UTC only, "YYYY-MM-DDThh:mm:ssZ".
std::string format_iso8601(std::int64_t epoch_s);
std::int64_t parse_iso8601(const std::string& text);

// CGM CSV: header `patient_id,timestamp_iso8601,glucose_mgdl`, one row per
// grid slot, empty glucose field for MISSING, rows sorted by timestamp.
void write_cgm_csv(std::ostream& out, const GlucoseSeries& series);
void write_cgm_csv_file(const std::filesystem::path& path, const GlucoseSeries& series);

// A file may hold several patients; each patient's rows must form a uniform
// grid whose inferred interval matches expected_interval_minutes.
std::vector<GlucoseSeries> read_cgm_csv(std::istream& in, int expected_interval_minutes = 5);
std::vector<GlucoseSeries> read_cgm_csv_file(const std::filesystem::path& path,
                                             int expected_interval_minutes = 5);

} // namespace gluadfl
