#include "gluadfl/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>
#include <unistd.h>

#include "gluadfl/csv.hpp"
#include "gluadfl/errors.hpp"
#include "gluadfl/rng.hpp"

namespace gluadfl {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint64_t kFreshInitTag = 0x46524553ULL;

std::string fmt(double v, const char* f = "%.9g") {
    char buf[48];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

std::string fmt_mean_sd(double mean, double sd) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2f(%.2f)", mean, sd);
    return buf;
}

std::uint64_t fnv1a64(const std::string& text) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// ---- plan parsing ---------------------------------------------------------

[[noreturn]] void config_error(const std::string& path, const std::string& what) {
    raise(Errc::Config, path + ": " + what);
}

void check_keys(const json& obj, const std::string& path, std::initializer_list<const char*> allowed) {
    for (const auto& [key, _] : obj.items()) {
        if (std::find_if(allowed.begin(), allowed.end(),
                         [&](const char* a) { return key == a; }) == allowed.end()) {
            config_error(path + "." + key, "unknown key");
        }
    }
}

double as_double(const json& j, const std::string& path) {
    if (!j.is_number()) config_error(path, "expected a number");
    return j.get<double>();
}

int as_int(const json& j, const std::string& path) {
    if (!j.is_number_integer()) config_error(path, "expected an integer");
    return j.get<int>();
}

std::uint64_t as_u64(const json& j, const std::string& path) {
    if (!j.is_number_unsigned() && !j.is_number_integer()) config_error(path, "expected an unsigned integer");
    if (j.is_number_integer() && j.get<std::int64_t>() < 0) config_error(path, "must be non-negative");
    return j.get<std::uint64_t>();
}

std::string as_string(const json& j, const std::string& path) {
    if (!j.is_string()) config_error(path, "expected a string");
    return j.get<std::string>();
}

bool as_bool(const json& j, const std::string& path) {
    if (!j.is_boolean()) config_error(path, "expected a boolean");
    return j.get<bool>();
}

const json* opt(const json& obj, const char* key) {
    auto it = obj.find(key);
    return it == obj.end() ? nullptr : &*it;
}

PlanCohort parse_cohort(const json& j, const std::string& path) {
    if (!j.is_object()) config_error(path, "expected an object");
    check_keys(j, path, {"name", "synthetic", "csv"});
    PlanCohort c;
    if (const json* v = opt(j, "name")) c.name = as_string(*v, path + ".name");
    const json* synth = opt(j, "synthetic");
    const json* csv = opt(j, "csv");
    if ((synth == nullptr) == (csv == nullptr)) {
        config_error(path, "exactly one of 'synthetic' or 'csv' is required");
    }
    if (synth) {
        const std::string sp = path + ".synthetic";
        if (!synth->is_object()) config_error(sp, "expected an object");
        check_keys(*synth, sp,
                   {"patients", "days", "seed", "mean_target", "sd_target", "missing_rate",
                    "heterogeneity", "interval_minutes"});
        SynthCohortSpec s;
        if (const json* v = opt(*synth, "patients")) s.n_patients = as_int(*v, sp + ".patients");
        if (const json* v = opt(*synth, "days")) s.days = as_int(*v, sp + ".days");
        if (const json* v = opt(*synth, "seed")) s.rng_seed = as_u64(*v, sp + ".seed");
        if (const json* v = opt(*synth, "mean_target")) s.mean_target = as_double(*v, sp + ".mean_target");
        if (const json* v = opt(*synth, "sd_target")) s.sd_target = as_double(*v, sp + ".sd_target");
        if (const json* v = opt(*synth, "missing_rate")) s.missing_rate = as_double(*v, sp + ".missing_rate");
        if (const json* v = opt(*synth, "heterogeneity")) s.heterogeneity = as_double(*v, sp + ".heterogeneity");
        if (const json* v = opt(*synth, "interval_minutes")) s.interval_minutes = as_int(*v, sp + ".interval_minutes");
        if (s.n_patients < 1) config_error(sp + ".patients", "must be >= 1");
        if (s.days < 1) config_error(sp + ".days", "must be >= 1");
        if (s.missing_rate < 0.0 || s.missing_rate >= 0.5) config_error(sp + ".missing_rate", "must be in [0, 0.5)");
        c.synthetic = s;
    } else {
        const std::string cp = path + ".csv";
        if (!csv->is_array() || csv->empty()) config_error(cp, "expected a non-empty array of paths");
        for (std::size_t i = 0; i < csv->size(); ++i) {
            c.csv_paths.emplace_back(as_string((*csv)[i], cp + "[" + std::to_string(i) + "]"));
        }
    }
    return c;
}

std::string normalize_method(const std::string& m, const std::string& path) {
    if (m == "star") return "fedavg"; // the star graph is the centralized baseline
    if (m == "random" || m == "ring" || m == "cluster" || m == "fedavg" || m == "pooled") return m;
    config_error(path, "unknown method '" + m + "'");
}

} // namespace

ExperimentPlan parse_plan(const std::string& json_text, const std::string& origin) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::parse_error& e) {
        raise(Errc::Config, origin + ": " + e.what()); // nlohmann reports the byte offset
    }
    if (!j.is_object()) raise(Errc::Config, origin + ": plan must be a JSON object");
    check_keys(j, "$",
               {"cohort", "extra_cohorts", "grid", "learner", "input_len", "horizon", "rounds",
                "eval_every", "batch_size", "comm_batch", "cluster_size", "split",
                "grad_at_aggregate", "weight_by_samples", "clip_norm", "init_scale", "local_steps",
                "personalization", "out", "jobs"});

    ExperimentPlan plan;
    const json* cohort = opt(j, "cohort");
    if (!cohort) raise(Errc::Config, origin + ": $.cohort is required");
    plan.cohort = parse_cohort(*cohort, "$.cohort");

    if (const json* extras = opt(j, "extra_cohorts")) {
        if (!extras->is_array()) config_error("$.extra_cohorts", "expected an array");
        for (std::size_t i = 0; i < extras->size(); ++i) {
            plan.extra_cohorts.push_back(
                parse_cohort((*extras)[i], "$.extra_cohorts[" + std::to_string(i) + "]"));
        }
    }

    if (const json* grid = opt(j, "grid")) {
        if (!grid->is_object()) config_error("$.grid", "expected an object");
        check_keys(*grid, "$.grid",
                   {"methods", "inactive_ratios", "learning_rates", "hidden_sizes", "seeds"});
        if (const json* v = opt(*grid, "methods")) {
            if (!v->is_array() || v->empty()) config_error("$.grid.methods", "expected a non-empty array");
            plan.methods.clear();
            for (std::size_t i = 0; i < v->size(); ++i) {
                const std::string path = "$.grid.methods[" + std::to_string(i) + "]";
                plan.methods.push_back(normalize_method(as_string((*v)[i], path), path));
            }
        }
        if (const json* v = opt(*grid, "inactive_ratios")) {
            if (!v->is_array() || v->empty()) config_error("$.grid.inactive_ratios", "expected a non-empty array");
            plan.inactive_ratios.clear();
            for (std::size_t i = 0; i < v->size(); ++i) {
                const std::string path = "$.grid.inactive_ratios[" + std::to_string(i) + "]";
                const double r = as_double((*v)[i], path);
                if (r < 0.0 || r >= 1.0) config_error(path, "must be in [0, 1)");
                plan.inactive_ratios.push_back(r);
            }
        }
        if (const json* v = opt(*grid, "learning_rates")) {
            if (!v->is_array() || v->empty()) config_error("$.grid.learning_rates", "expected a non-empty array");
            plan.learning_rates.clear();
            for (std::size_t i = 0; i < v->size(); ++i) {
                const std::string path = "$.grid.learning_rates[" + std::to_string(i) + "]";
                const double g = as_double((*v)[i], path);
                if (g <= 0.0) config_error(path, "must be positive");
                plan.learning_rates.push_back(g);
            }
        }
        if (const json* v = opt(*grid, "hidden_sizes")) {
            if (!v->is_array() || v->empty()) config_error("$.grid.hidden_sizes", "expected a non-empty array");
            plan.hidden_sizes.clear();
            for (std::size_t i = 0; i < v->size(); ++i) {
                const std::string path = "$.grid.hidden_sizes[" + std::to_string(i) + "]";
                const int h = as_int((*v)[i], path);
                if (h < 8 || h > 512) config_error(path, "must be in [8, 512]");
                plan.hidden_sizes.push_back(h);
            }
        }
        if (const json* v = opt(*grid, "seeds")) {
            if (!v->is_array() || v->empty()) config_error("$.grid.seeds", "expected a non-empty array");
            plan.seeds.clear();
            for (std::size_t i = 0; i < v->size(); ++i) {
                plan.seeds.push_back(as_u64((*v)[i], "$.grid.seeds[" + std::to_string(i) + "]"));
            }
        }
    }

    if (const json* v = opt(j, "learner")) plan.learner = learner_kind_from_string(as_string(*v, "$.learner"));
    if (const json* v = opt(j, "input_len")) plan.input_len = as_int(*v, "$.input_len");
    if (const json* v = opt(j, "horizon")) plan.horizon = as_int(*v, "$.horizon");
    if (const json* v = opt(j, "rounds")) plan.rounds = as_int(*v, "$.rounds");
    if (const json* v = opt(j, "eval_every")) plan.eval_every = as_int(*v, "$.eval_every");
    if (const json* v = opt(j, "batch_size")) plan.batch_size = as_int(*v, "$.batch_size");
    if (const json* v = opt(j, "comm_batch")) plan.comm_batch = as_int(*v, "$.comm_batch");
    if (const json* v = opt(j, "cluster_size")) plan.cluster_size = as_int(*v, "$.cluster_size");
    if (const json* v = opt(j, "grad_at_aggregate")) plan.grad_at_aggregate = as_bool(*v, "$.grad_at_aggregate");
    if (const json* v = opt(j, "weight_by_samples")) plan.weight_by_samples = as_bool(*v, "$.weight_by_samples");
    if (const json* v = opt(j, "clip_norm")) plan.clip_norm = as_double(*v, "$.clip_norm");
    if (const json* v = opt(j, "init_scale")) plan.init_scale = as_double(*v, "$.init_scale");
    if (const json* v = opt(j, "local_steps")) plan.local_steps = as_int(*v, "$.local_steps");
    if (const json* v = opt(j, "out")) plan.out_dir = as_string(*v, "$.out");
    if (const json* v = opt(j, "jobs")) plan.jobs = as_int(*v, "$.jobs");

    if (const json* v = opt(j, "split")) {
        if (!v->is_array() || v->size() != 3) config_error("$.split", "expected [train, val, test]");
        plan.fractions.train = as_double((*v)[0], "$.split[0]");
        plan.fractions.val = as_double((*v)[1], "$.split[1]");
        plan.fractions.test = as_double((*v)[2], "$.split[2]");
    }
    if (const json* v = opt(j, "personalization")) {
        if (!v->is_object()) config_error("$.personalization", "expected an object");
        check_keys(*v, "$.personalization", {"steps", "learning_rate"});
        PersonalizationSpec p;
        if (const json* s = opt(*v, "steps")) p.steps = as_int(*s, "$.personalization.steps");
        if (const json* s = opt(*v, "learning_rate")) p.learning_rate = as_double(*s, "$.personalization.learning_rate");
        if (p.steps < 0) config_error("$.personalization.steps", "must be >= 0");
        if (p.learning_rate <= 0.0) config_error("$.personalization.learning_rate", "must be positive");
        plan.personalization = p;
    }

    if (plan.input_len < 1) config_error("$.input_len", "must be >= 1");
    if (plan.horizon < 1) config_error("$.horizon", "must be >= 1");
    if (plan.rounds < 1) config_error("$.rounds", "must be >= 1");
    if (plan.eval_every < 1) config_error("$.eval_every", "must be >= 1");
    if (plan.batch_size < 1) config_error("$.batch_size", "must be >= 1");
    if (plan.comm_batch < 1) config_error("$.comm_batch", "must be >= 1");
    if (plan.cluster_size < 2) config_error("$.cluster_size", "must be >= 2");
    if (plan.local_steps < 1) config_error("$.local_steps", "must be >= 1");
    if (plan.clip_norm < 0.0) config_error("$.clip_norm", "must be >= 0");
    if (plan.init_scale <= 0.0) config_error("$.init_scale", "must be positive");
    if (plan.jobs < 1) config_error("$.jobs", "must be >= 1");
    const double fsum = plan.fractions.train + plan.fractions.val + plan.fractions.test;
    if (plan.fractions.train <= 0.0 || plan.fractions.val <= 0.0 || plan.fractions.test <= 0.0 ||
        std::abs(fsum - 1.0) > 1e-9) {
        config_error("$.split", "fractions must be positive and sum to 1");
    }
    return plan;
}

ExperimentPlan load_plan(const fs::path& path) {
    std::ifstream in(path);
    require(in.good(), Errc::Config, "cannot open plan '" + path.string() + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_plan(ss.str(), path.string());
}

namespace {

json cohort_to_json(const PlanCohort& c) {
    json j;
    j["name"] = c.name;
    if (c.synthetic) {
        const auto& s = *c.synthetic;
        j["synthetic"] = {{"patients", s.n_patients},
                          {"days", s.days},
                          {"seed", s.rng_seed},
                          {"mean_target", s.mean_target},
                          {"sd_target", s.sd_target},
                          {"missing_rate", s.missing_rate},
                          {"heterogeneity", s.heterogeneity},
                          {"interval_minutes", s.interval_minutes}};
    } else {
        json paths = json::array();
        for (const auto& p : c.csv_paths) paths.push_back(p.string());
        j["csv"] = paths;
    }
    return j;
}

} // namespace

std::string canonical_plan_json(const ExperimentPlan& plan) {
    json j;
    j["cohort"] = cohort_to_json(plan.cohort);
    json extras = json::array();
    for (const auto& c : plan.extra_cohorts) extras.push_back(cohort_to_json(c));
    j["extra_cohorts"] = extras;
    j["grid"] = {{"methods", plan.methods},
                 {"inactive_ratios", plan.inactive_ratios},
                 {"learning_rates", plan.learning_rates},
                 {"hidden_sizes", plan.hidden_sizes},
                 {"seeds", plan.seeds}};
    j["learner"] = to_string(plan.learner);
    j["input_len"] = plan.input_len;
    j["horizon"] = plan.horizon;
    j["rounds"] = plan.rounds;
    j["eval_every"] = plan.eval_every;
    j["batch_size"] = plan.batch_size;
    j["comm_batch"] = plan.comm_batch;
    j["cluster_size"] = plan.cluster_size;
    j["split"] = {plan.fractions.train, plan.fractions.val, plan.fractions.test};
    j["grad_at_aggregate"] = plan.grad_at_aggregate;
    j["weight_by_samples"] = plan.weight_by_samples;
    j["clip_norm"] = plan.clip_norm;
    j["init_scale"] = plan.init_scale;
    j["local_steps"] = plan.local_steps;
    if (plan.personalization) {
        j["personalization"] = {{"steps", plan.personalization->steps},
                                {"learning_rate", plan.personalization->learning_rate}};
    }
    return j.dump(2); // nlohmann objects are key-sorted, so this is canonical
}

// ---- cohort materialization ------------------------------------------------

namespace {

struct MaterializedCohort {
    std::string name;
    std::vector<std::string> patient_ids;
    std::vector<GlucoseSeries> test_series; // raw test splits, cross-eval input
    std::vector<std::vector<Sample>> train;
    std::vector<std::vector<Sample>> val;
    std::vector<std::vector<Sample>> test;
    NormStats stats;
    int interval_minutes = 5;
};

MaterializedCohort materialize(const PlanCohort& c, const ExperimentPlan& plan,
                               bool need_samples) {
    std::vector<GlucoseSeries> series;
    int interval = 5;
    if (c.synthetic) {
        interval = c.synthetic->interval_minutes;
        series = generate_synth_cohort(*c.synthetic);
    } else {
        for (const auto& path : c.csv_paths) {
            auto part = read_cgm_csv_file(path);
            series.insert(series.end(), std::make_move_iterator(part.begin()),
                          std::make_move_iterator(part.end()));
        }
        require(!series.empty(), Errc::Config, "cohort '" + c.name + "' has no patients");
        interval = series.front().interval_minutes;
        std::sort(series.begin(), series.end(),
                  [](const GlucoseSeries& a, const GlucoseSeries& b) {
                      return a.patient_id < b.patient_id;
                  });
    }

    MaterializedCohort out;
    out.name = c.name;
    out.interval_minutes = interval;

    std::vector<SeriesSplit> splits;
    splits.reserve(series.size());
    for (const auto& s : series) splits.push_back(split_by_time(s, plan.fractions));

    std::vector<GlucoseSeries> trains;
    trains.reserve(splits.size());
    for (const auto& sp : splits) trains.push_back(sp.train);
    out.stats = fit_norm_pooled(trains);

    for (std::size_t p = 0; p < splits.size(); ++p) {
        out.patient_ids.push_back(series[p].patient_id);
        out.test_series.push_back(splits[p].test);
        if (!need_samples) continue;
        auto window = [&](const GlucoseSeries& part) {
            return windowize(normalize(part, out.stats), part, plan.input_len, plan.horizon);
        };
        out.train.push_back(window(splits[p].train));
        out.val.push_back(window(splits[p].val));
        out.test.push_back(window(splits[p].test));
        require(!out.train.back().empty(), Errc::Config,
                "patient '" + series[p].patient_id + "' has no training samples at L=" +
                    std::to_string(plan.input_len) + ", H=" + std::to_string(plan.horizon));
    }
    return out;
}

std::vector<Sample> flatten(const std::vector<std::vector<Sample>>& per_patient) {
    std::vector<Sample> out;
    for (const auto& v : per_patient) out.insert(out.end(), v.begin(), v.end());
    return out;
}

// ---- cell execution ---------------------------------------------------------

struct CellSpec {
    std::string name;
    std::string method;
    double rho;
    double gamma;
    int hidden;
    std::uint64_t seed;
};

std::string cell_name(const std::string& method, double rho, double gamma, int hidden,
                      std::uint64_t seed) {
    std::ostringstream os;
    os << method << "_rho" << fmt(rho, "%g") << "_g" << fmt(gamma, "%g") << "_h" << hidden << "_s"
       << seed;
    return os.str();
}

RunConfig cell_config(const ExperimentPlan& plan, const CellSpec& cell, const NormStats& stats) {
    RunConfig cfg;
    cfg.rounds = plan.rounds;
    cfg.learning_rate = cell.gamma;
    cfg.topology.comm_batch = plan.comm_batch;
    cfg.topology.cluster_size = plan.cluster_size;
    if (cell.method == "ring") cfg.topology.kind = TopologyKind::Ring;
    else if (cell.method == "cluster") cfg.topology.kind = TopologyKind::Cluster;
    else cfg.topology.kind = TopologyKind::Random;
    cfg.learner.kind = plan.learner;
    cfg.learner.input_len = plan.input_len;
    cfg.learner.hidden_size = cell.hidden;
    cfg.learner.init_scale = plan.init_scale;
    cfg.inactive_ratio = cell.rho;
    cfg.seed = cell.seed;
    cfg.batch_size = plan.batch_size;
    cfg.local_steps = plan.local_steps;
    cfg.grad_at_aggregate = plan.grad_at_aggregate;
    cfg.weight_by_samples = plan.weight_by_samples;
    cfg.clip_norm = plan.clip_norm;
    cfg.eval_every = plan.eval_every;
    cfg.stats = stats;
    return cfg;
}

void write_trace_csv(const fs::path& path, const CellSpec& cell, const RunTrace& trace) {
    std::ofstream out(path);
    require(out.good(), Errc::Io, "cannot open '" + path.string() + "'");
    out << "t,topology,rho,seed,val_rmse\n";
    for (const auto& r : trace.records) {
        out << r.round << ',' << cell.method << ',' << fmt(cell.rho, "%g") << ',' << cell.seed
            << ',' << fmt(r.val_rmse) << '\n';
    }
}

void write_report_csv(const fs::path& path, const CellSpec& cell,
                      const std::vector<std::vector<CrossEvalCell>>& matrix) {
    std::ofstream out(path);
    require(out.good(), Errc::Io, "cannot open '" + path.string() + "'");
    out << "train_cohort,test_cohort,patient,seed,method,rho,gamma,hidden,"
           "rmse,mard,mae,grmse,time_lag_min,n_samples,grmse_variant\n";
    auto prefix = [&](const CrossEvalCell& c, const std::string& patient) {
        out << c.train_cohort << ',' << c.test_cohort << ',' << patient << ',' << cell.seed << ','
            << cell.method << ',' << fmt(cell.rho, "%g") << ',' << fmt(cell.gamma, "%g") << ','
            << cell.hidden << ',';
    };
    for (const auto& row : matrix) {
        for (const auto& c : row) {
            for (const auto& p : c.patients) {
                prefix(c, p.patient_id);
                out << fmt(p.metrics.rmse) << ',' << fmt(p.metrics.mard) << ','
                    << fmt(p.metrics.mae) << ',' << fmt(p.metrics.grmse) << ','
                    << fmt(p.metrics.time_lag) << ',' << p.metrics.n_samples << ','
                    << kGrmseVariant << '\n';
            }
            prefix(c, "mean(sd)");
            out << '"' << fmt_mean_sd(c.mean.rmse, c.sd.rmse) << "\",\""
                << fmt_mean_sd(c.mean.mard, c.sd.mard) << "\",\""
                << fmt_mean_sd(c.mean.mae, c.sd.mae) << "\",\""
                << fmt_mean_sd(c.mean.grmse, c.sd.grmse) << "\",\""
                << fmt_mean_sd(c.mean.time_lag, c.sd.time_lag) << "\"," << c.mean.n_samples << ','
                << kGrmseVariant << '\n';
        }
    }
}

struct CellRun {
    CellResult result;
    ParamVector population; // kept for the personalization study
};

} // namespace

std::vector<Selection> select_best(std::span<const ValidationScore> scores) {
    std::map<std::pair<std::string, double>, Selection> best;
    for (const auto& s : scores) {
        const auto key = std::make_pair(s.method, s.rho);
        auto it = best.find(key);
        if (it == best.end() || s.mean_val_rmse < it->second.mean_val_rmse) {
            best[key] = Selection{s.method, s.rho, s.gamma, s.hidden, s.mean_val_rmse};
        }
    }
    std::vector<Selection> out;
    out.reserve(best.size());
    for (auto& [_, sel] : best) out.push_back(sel);
    return out;
}

PlanOutcome run_plan(const ExperimentPlan& plan) {
    const fs::path out = plan.out_dir;
    fs::create_directories(out / "traces");
    fs::create_directories(out / "reports");
    fs::create_directories(out / "checkpoints");

    const auto started_utc = std::chrono::duration_cast<std::chrono::seconds>(
                                 std::chrono::system_clock::now().time_since_epoch())
                                 .count();

    MaterializedCohort main = materialize(plan.cohort, plan, true);
    std::vector<TestCohort> eval_cohorts;
    eval_cohorts.push_back(TestCohort{main.name, main.test_series});
    for (const auto& extra : plan.extra_cohorts) {
        MaterializedCohort m = materialize(extra, plan, false);
        eval_cohorts.push_back(TestCohort{m.name, std::move(m.test_series)});
    }
    const std::vector<Sample> pooled_val = flatten(main.val);
    const std::vector<Sample> pooled_test = flatten(main.test);

    std::vector<CellSpec> cells;
    for (const auto& method : plan.methods) {
        const std::vector<double> rhos =
            method == "pooled" ? std::vector<double>{0.0} : plan.inactive_ratios;
        for (double rho : rhos) {
            for (double gamma : plan.learning_rates) {
                for (int hidden : plan.hidden_sizes) {
                    for (std::uint64_t seed : plan.seeds) {
                        cells.push_back(CellSpec{cell_name(method, rho, gamma, hidden, seed),
                                                 method, rho, gamma, hidden, seed});
                    }
                }
            }
        }
    }

    std::vector<CellRun> runs(cells.size());
    std::atomic<std::size_t> next{0};

    auto worker = [&]() {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= cells.size()) return;
            const CellSpec& cell = cells[i];
            CellRun& run = runs[i];
            run.result.name = cell.name;
            run.result.method = cell.method;
            run.result.rho = cell.rho;
            run.result.gamma = cell.gamma;
            run.result.hidden = cell.hidden;
            run.result.seed = cell.seed;

            const RunConfig cfg = cell_config(plan, cell, main.stats);
            try {
                auto nodes = make_nodes(cfg, main.train, main.val);
                RunResult rr;
                if (cell.method == "fedavg") rr = run_fedavg(cfg, std::move(nodes));
                else if (cell.method == "pooled") rr = run_pooled_supervised(cfg, nodes);
                else rr = run_gluadfl(cfg, std::move(nodes));

                run.result.final_val_rmse =
                    eval_rmse_mgdl(cfg.learner, rr.population, pooled_val, main.stats);
                run.result.final_test_rmse =
                    eval_rmse_mgdl(cfg.learner, rr.population, pooled_test, main.stats);

                write_trace_csv(out / "traces" / (cell.name + ".csv"), cell, rr.trace);
                EvalModel model{main.name, cfg.learner, rr.population, main.stats};
                const auto matrix =
                    cross_evaluate(std::span<const EvalModel>(&model, 1), eval_cohorts,
                                   plan.horizon);
                write_report_csv(out / "reports" / (cell.name + ".csv"), cell, matrix);
                save_checkpoint(out / "checkpoints" / (cell.name + ".json"),
                                Checkpoint{cfg.learner, rr.population, main.stats});
                run.population = std::move(rr.population);
            } catch (const Error& e) {
                if (e.code() == Errc::Diverged || e.code() == Errc::NonFinite) {
                    run.result.diverged = true;
                    run.result.error = e.what();
                } else {
                    throw;
                }
            }
        }
    };

    {
        std::vector<std::thread> pool;
        for (int j = 1; j < plan.jobs; ++j) pool.emplace_back(worker);
        worker();
        for (auto& t : pool) t.join();
    }

    // cells.csv, grid order
    {
        std::ofstream cf(out / "cells.csv");
        require(cf.good(), Errc::Io, "cannot open cells.csv");
        cf << "name,method,rho,gamma,hidden,seed,status,final_val_rmse,final_test_rmse\n";
        for (const auto& run : runs) {
            const auto& r = run.result;
            cf << r.name << ',' << r.method << ',' << fmt(r.rho, "%g") << ',' << fmt(r.gamma, "%g")
               << ',' << r.hidden << ',' << r.seed << ',' << (r.diverged ? "diverged" : "ok") << ',';
            if (r.diverged) cf << "NA,NA\n";
            else cf << fmt(r.final_val_rmse) << ',' << fmt(r.final_test_rmse) << '\n';
        }
    }

    // summary + validation-based selection
    struct Agg {
        std::vector<double> val, test;
    };
    std::map<std::tuple<std::string, double, double, int>, Agg> groups;
    for (const auto& run : runs) {
        if (run.result.diverged) continue;
        auto& g = groups[{run.result.method, run.result.rho, run.result.gamma, run.result.hidden}];
        g.val.push_back(run.result.final_val_rmse);
        g.test.push_back(run.result.final_test_rmse);
    }
    auto mean_sd = [](const std::vector<double>& v) {
        double sum = 0.0, sum_sq = 0.0;
        for (double x : v) {
            sum += x;
            sum_sq += x * x;
        }
        const double n = static_cast<double>(v.size());
        const double mean = v.empty() ? 0.0 : sum / n;
        const double var = v.empty() ? 0.0 : std::max(sum_sq / n - mean * mean, 0.0);
        return std::make_pair(mean, std::sqrt(var));
    };

    std::vector<ValidationScore> scores;
    for (const auto& [key, agg] : groups) {
        ValidationScore s;
        std::tie(s.method, s.rho, s.gamma, s.hidden) = key;
        s.mean_val_rmse = mean_sd(agg.val).first;
        s.n_seeds = static_cast<int>(agg.val.size());
        scores.push_back(s);
    }
    const auto selected = select_best(scores);
    auto is_selected = [&](const std::string& m, double rho, double gamma, int hidden) {
        for (const auto& sel : selected) {
            if (sel.method == m && sel.rho == rho && sel.gamma == gamma && sel.hidden == hidden)
                return true;
        }
        return false;
    };

    {
        std::ofstream sf(out / "summary.csv");
        require(sf.good(), Errc::Io, "cannot open summary.csv");
        sf << "method,rho,gamma,hidden,n_seeds,val_rmse_mean,val_rmse_sd,test_rmse_mean,"
              "test_rmse_sd,selected\n";
        for (const auto& [key, agg] : groups) {
            const auto& [method, rho, gamma, hidden] = key;
            const auto [vm, vs] = mean_sd(agg.val);
            const auto [tm, ts] = mean_sd(agg.test);
            sf << method << ',' << fmt(rho, "%g") << ',' << fmt(gamma, "%g") << ',' << hidden << ','
               << agg.val.size() << ',' << fmt(vm) << ',' << fmt(vs) << ',' << fmt(tm) << ','
               << fmt(ts) << ',' << (is_selected(method, rho, gamma, hidden) ? 1 : 0) << '\n';
        }
        std::ofstream self(out / "selection.csv");
        require(self.good(), Errc::Io, "cannot open selection.csv");
        self << "method,rho,gamma,hidden,mean_val_rmse\n";
        for (const auto& sel : selected) {
            self << sel.method << ',' << fmt(sel.rho, "%g") << ',' << fmt(sel.gamma, "%g") << ','
                 << sel.hidden << ',' << fmt(sel.mean_val_rmse) << '\n';
        }
    }

    // Personalization study on the preferred decentralized method at the
    // lowest rho in the grid, validation-selected hyperparameters.
    if (plan.personalization) {
        std::string method;
        for (const char* cand : {"random", "cluster", "ring"}) {
            if (std::find(plan.methods.begin(), plan.methods.end(), cand) != plan.methods.end()) {
                method = cand;
                break;
            }
        }
        if (!method.empty()) {
            const double rho = *std::min_element(plan.inactive_ratios.begin(),
                                                 plan.inactive_ratios.end());
            const Selection* sel = nullptr;
            for (const auto& s : selected) {
                if (s.method == method && s.rho == rho) sel = &s;
            }
            if (sel) {
                std::ofstream pf(out / "personalization.csv");
                require(pf.good(), Errc::Io, "cannot open personalization.csv");
                pf << "seed,node,patient,variant,start_test_rmse,tuned_test_rmse\n";
                for (std::uint64_t seed : plan.seeds) {
                    const CellSpec cell{cell_name(method, rho, sel->gamma, sel->hidden, seed),
                                        method, rho, sel->gamma, sel->hidden, seed};
                    const CellRun* run = nullptr;
                    for (std::size_t i = 0; i < cells.size(); ++i) {
                        if (cells[i].name == cell.name && !runs[i].result.diverged) run = &runs[i];
                    }
                    if (!run) continue;
                    RunConfig cfg = cell_config(plan, cell, main.stats);
                    auto nodes = make_nodes(cfg, main.train, main.val);
                    LearnerSpec fresh = cfg.learner;
                    fresh.init_seed = derive_stream({seed, kFreshInitTag});
                    const ParamVector random_start = init_params(fresh);
                    for (std::size_t n = 0; n < nodes.size(); ++n) {
                        if (main.test[n].empty()) continue;
                        auto emit = [&](const char* variant, const ParamVector& start) {
                            const ParamVector tuned = personalize(
                                cfg.learner, start, nodes[n], plan.personalization->learning_rate,
                                plan.personalization->steps, plan.batch_size);
                            pf << seed << ',' << n << ',' << main.patient_ids[n] << ',' << variant
                               << ','
                               << fmt(eval_rmse_mgdl(cfg.learner, start, main.test[n], main.stats))
                               << ','
                               << fmt(eval_rmse_mgdl(cfg.learner, tuned, main.test[n], main.stats))
                               << '\n';
                        };
                        emit("population", run->population);
                        emit("random_init", random_start);
                    }
                }
            }
        }
    }

    // manifest: the one artifact allowed to carry wall clock and host info
    {
        const std::string canonical = canonical_plan_json(plan);
        char host[256] = "unknown";
        gethostname(host, sizeof host - 1);
        json manifest;
        manifest["format"] = "gluadfl-manifest";
        manifest["version"] = 1;
        manifest["plan"] = json::parse(canonical);
        char hash[32];
        std::snprintf(hash, sizeof hash, "%016llx",
                      static_cast<unsigned long long>(fnv1a64(canonical)));
        manifest["plan_hash"] = hash;
        manifest["created_utc"] = format_iso8601(started_utc);
        manifest["host"] = host;
        manifest["cohort"] = {{"patients", main.patient_ids.size()},
                              {"norm_mean", main.stats.mean},
                              {"norm_std", main.stats.std_dev},
                              {"train_samples", flatten(main.train).size()},
                              {"val_samples", pooled_val.size()},
                              {"test_samples", pooled_test.size()}};
        json cj = json::array();
        for (const auto& run : runs) {
            cj.push_back({{"name", run.result.name},
                          {"status", run.result.diverged ? "diverged" : "ok"},
                          {"error", run.result.error}});
        }
        manifest["cells"] = cj;
        std::ofstream mf(out / "manifest.json");
        require(mf.good(), Errc::Io, "cannot open manifest.json");
        mf << manifest.dump(2) << '\n';
    }

    PlanOutcome outcome;
    outcome.out_dir = out;
    for (auto& run : runs) {
        if (run.result.diverged) ++outcome.diverged_count;
        outcome.cells.push_back(std::move(run.result));
    }
    return outcome;
}

// ---- compare ----------------------------------------------------------------

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            fields.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(ch);
        }
    }
    fields.push_back(cur);
    return fields;
}

} // namespace

std::vector<CompareRow> compare_report(std::span<const fs::path> artifact_dirs) {
    struct CellRow {
        std::string method;
        double rho, gamma;
        int hidden;
        std::uint64_t seed;
        double val_rmse, test_rmse;
    };
    std::vector<CellRow> rows;
    std::set<std::pair<std::string, double>> groups_seen;

    for (const auto& dir : artifact_dirs) {
        const fs::path file = dir / "cells.csv";
        std::ifstream in(file);
        require(in.good(), Errc::Io, "cannot open '" + file.string() + "'");
        std::string line;
        std::getline(in, line); // header
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            const auto f = split_csv_line(line);
            require(f.size() == 9, Errc::Io, "malformed cells.csv row in '" + file.string() + "'");
            groups_seen.insert({f[1], std::stod(f[2])});
            if (f[6] != "ok") continue;
            CellRow r;
            r.method = f[1];
            r.rho = std::stod(f[2]);
            r.gamma = std::stod(f[3]);
            r.hidden = std::stoi(f[4]);
            r.seed = std::stoull(f[5]);
            r.val_rmse = std::stod(f[7]);
            r.test_rmse = std::stod(f[8]);
            rows.push_back(r);
        }
    }

    // Validation-selected hyperparameters per (method, rho), then test stats
    // over that subset.
    std::map<std::tuple<std::string, double, double, int>, std::vector<double>> val_groups;
    for (const auto& r : rows) val_groups[{r.method, r.rho, r.gamma, r.hidden}].push_back(r.val_rmse);
    std::vector<ValidationScore> scores;
    for (const auto& [key, vals] : val_groups) {
        ValidationScore s;
        std::tie(s.method, s.rho, s.gamma, s.hidden) = key;
        double sum = 0.0;
        for (double v : vals) sum += v;
        s.mean_val_rmse = sum / static_cast<double>(vals.size());
        s.n_seeds = static_cast<int>(vals.size());
        scores.push_back(s);
    }
    const auto selected = select_best(scores);

    std::map<std::pair<std::string, double>, std::vector<double>> test_by_group;
    for (const auto& sel : selected) {
        auto& bucket = test_by_group[{sel.method, sel.rho}];
        for (const auto& r : rows) {
            if (r.method == sel.method && r.rho == sel.rho && r.gamma == sel.gamma &&
                r.hidden == sel.hidden) {
                bucket.push_back(r.test_rmse);
            }
        }
    }

    std::vector<CompareRow> out;
    for (const auto& key : groups_seen) {
        CompareRow row;
        row.method = key.first;
        row.rho = key.second;
        auto it = test_by_group.find(key);
        if (it != test_by_group.end() && !it->second.empty()) {
            const auto& v = it->second;
            double sum = 0.0, sum_sq = 0.0;
            for (double x : v) {
                sum += x;
                sum_sq += x * x;
            }
            const double n = static_cast<double>(v.size());
            row.n_seeds = static_cast<int>(v.size());
            row.test_rmse_mean = sum / n;
            row.test_rmse_sd = std::sqrt(std::max(sum_sq / n - row.test_rmse_mean * row.test_rmse_mean, 0.0));
        }
        out.push_back(row);
    }

    // Paired deltas against the random topology at the same rho.
    for (auto& row : out) {
        if (row.method == "random" || row.n_seeds == 0) continue;
        for (const auto& base : out) {
            if (base.method == "random" && base.rho == row.rho && base.n_seeds > 0) {
                row.has_delta = true;
                row.delta_vs_random = row.test_rmse_mean - base.test_rmse_mean;
                if (row.delta_vs_random < 0.0) row.flag = "beats_random";
            }
        }
    }
    return out;
}

void write_compare_csv(std::ostream& out, std::span<const CompareRow> rows) {
    out << "method,rho,n_seeds,test_rmse_mean,test_rmse_sd,delta_vs_random,flag\n";
    for (const auto& r : rows) {
        out << r.method << ',' << fmt(r.rho, "%g") << ',' << r.n_seeds << ',';
        if (r.n_seeds == 0) out << "NA,NA,";
        else out << fmt(r.test_rmse_mean) << ',' << fmt(r.test_rmse_sd) << ',';
        if (r.has_delta) out << fmt(r.delta_vs_random);
        else out << "NA";
        out << ',' << r.flag << '\n';
    }
}

} // namespace gluadfl
