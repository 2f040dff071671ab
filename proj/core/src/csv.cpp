#include "gluadfl/csv.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "gluadfl/errors.hpp"

namespace gluadfl {

namespace {

// Howard Hinnant's civil-date algorithms; avoids timezone-dependent libc calls.
std::int64_t days_from_civil(int y, int m, int d) {
    y -= m <= 2;
    const int era = (y >= 0 ? y : y - 399) / 400;
    const unsigned yoe = static_cast<unsigned>(y - era * 400);
    const unsigned doy = static_cast<unsigned>((153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1);
    const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    return static_cast<std::int64_t>(era) * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

void civil_from_days(std::int64_t z, int& y, int& m, int& d) {
    z += 719468;
    const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
    const unsigned doe = static_cast<unsigned>(z - era * 146097);
    const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
    const std::int64_t yy = static_cast<std::int64_t>(yoe) + era * 400;
    const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    const unsigned mp = (5 * doy + 2) / 153;
    d = static_cast<int>(doy - (153 * mp + 2) / 5 + 1);
    m = static_cast<int>(mp + (mp < 10 ? 3 : -9));
    y = static_cast<int>(yy + (m <= 2));
}

} // namespace

std::string format_iso8601(std::int64_t epoch_s) {
    std::int64_t days = epoch_s / 86400;
    std::int64_t rem = epoch_s % 86400;
    if (rem < 0) {
        rem += 86400;
        --days;
    }
    int y = 0, m = 0, d = 0;
    civil_from_days(days, y, m, d);
    char buf[32];
    std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02lld:%02lld:%02lldZ", y, m, d,
                  static_cast<long long>(rem / 3600), static_cast<long long>((rem / 60) % 60),
                  static_cast<long long>(rem % 60));
    return buf;
}

std::int64_t parse_iso8601(const std::string& text) {
    int y = 0, mo = 0, d = 0, h = 0, mi = 0, s = 0;
    char t = 0, z = 0;
    if (std::sscanf(text.c_str(), "%d-%d-%d%c%d:%d:%d%c", &y, &mo, &d, &t, &h, &mi, &s, &z) != 8 ||
        (t != 'T' && t != ' ') || z != 'Z') {
        raise(Errc::Io, "bad ISO8601 timestamp '" + text + "' (expected YYYY-MM-DDThh:mm:ssZ)");
    }
    return days_from_civil(y, mo, d) * 86400 + h * 3600 + mi * 60 + s;
}

void write_cgm_csv(std::ostream& out, const GlucoseSeries& series) {
    out << "patient_id,timestamp_iso8601,glucose_mgdl\n";
    const std::int64_t step = static_cast<std::int64_t>(series.interval_minutes) * 60;
    for (std::size_t i = 0; i < series.size(); ++i) {
        out << series.patient_id << ','
            << format_iso8601(series.start_epoch_s + static_cast<std::int64_t>(i) * step) << ',';
        if (series.values[i].has_value()) {
            char buf[32];
            std::snprintf(buf, sizeof buf, "%.17g", *series.values[i]);
            out << buf;
        }
        out << '\n';
    }
}

void write_cgm_csv_file(const std::filesystem::path& path, const GlucoseSeries& series) {
    std::ofstream out(path);
    require(out.good(), Errc::Io, "cannot open '" + path.string() + "' for writing");
    write_cgm_csv(out, series);
    require(out.good(), Errc::Io, "write failed for '" + path.string() + "'");
}

std::vector<GlucoseSeries> read_cgm_csv(std::istream& in, int expected_interval_minutes) {
    std::string line;
    require(static_cast<bool>(std::getline(in, line)), Errc::Io, "empty CGM CSV");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    require(line == "patient_id,timestamp_iso8601,glucose_mgdl", Errc::Io,
            "unexpected CGM CSV header '" + line + "'");

    struct Row {
        std::int64_t ts;
        std::optional<double> value;
    };
    // std::map keeps patients ordered by id for deterministic output.
    std::map<std::string, std::vector<Row>> rows;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto c1 = line.find(',');
        const auto c2 = line.find(',', c1 + 1);
        require(c1 != std::string::npos && c2 != std::string::npos, Errc::Io,
                "line " + std::to_string(line_no) + ": expected 3 fields");
        Row r;
        r.ts = parse_iso8601(line.substr(c1 + 1, c2 - c1 - 1));
        const std::string field = line.substr(c2 + 1);
        if (!field.empty()) {
            try {
                r.value = std::stod(field);
            } catch (const std::exception&) {
                raise(Errc::Io, "line " + std::to_string(line_no) + ": bad glucose value '" + field + "'");
            }
        }
        rows[line.substr(0, c1)].push_back(r);
    }

    std::vector<GlucoseSeries> out;
    const std::int64_t step = static_cast<std::int64_t>(expected_interval_minutes) * 60;
    for (auto& [pid, rs] : rows) {
        require(rs.size() >= 2, Errc::Io, "patient '" + pid + "' has fewer than 2 rows");
        GlucoseSeries s;
        s.patient_id = pid;
        s.interval_minutes = expected_interval_minutes;
        s.start_epoch_s = rs.front().ts;
        std::int64_t inferred = 0; // smallest consecutive row spacing
        for (std::size_t i = 1; i < rs.size(); ++i) {
            const std::int64_t diff = rs[i].ts - rs[i - 1].ts;
            if (diff <= 0) {
                raise(Errc::Io, "patient '" + pid + "': rows not sorted by timestamp");
            }
            if (inferred == 0 || diff < inferred) inferred = diff;
        }
        if (inferred != step) {
            raise(Errc::Io, "patient '" + pid + "': inferred interval " +
                                std::to_string(inferred / 60) + " min does not match the expected " +
                                std::to_string(expected_interval_minutes) + " min");
        }
        for (std::size_t i = 0; i < rs.size(); ++i) {
            const std::int64_t offset = rs[i].ts - s.start_epoch_s;
            if (offset % step != 0) {
                raise(Errc::Io, "patient '" + pid + "': timestamp " + format_iso8601(rs[i].ts) +
                                    " off the " + std::to_string(expected_interval_minutes) +
                                    "-minute grid");
            }
            const auto idx = static_cast<std::size_t>(offset / step);
            if (idx >= s.values.size()) s.values.resize(idx + 1); // absent rows become MISSING
            s.values[idx] = rs[i].value;
        }
        s.validate();
        out.push_back(std::move(s));
    }
    return out;
}

std::vector<GlucoseSeries> read_cgm_csv_file(const std::filesystem::path& path,
                                             int expected_interval_minutes) {
    std::ifstream in(path);
    require(in.good(), Errc::Io, "cannot open '" + path.string() + "'");
    return read_cgm_csv(in, expected_interval_minutes);
}

} // namespace gluadfl
