#include "gluadfl/learner.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

#include "gluadfl/errors.hpp"
#include "gluadfl/rng.hpp"

namespace gluadfl {

namespace {

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// Step-by-step activations cached for BPTT. Reused across calls on the same
// thread to keep the training loop allocation-free.
struct LstmTape {
    std::vector<double> gates; // L x 4h, post-activation, gate-major per step
    std::vector<double> cell;  // L x h
    std::vector<double> hidden; // L x h
    std::vector<double> cell_tanh; // L x h

    void resize(int steps, int h) {
        gates.resize(static_cast<std::size_t>(steps) * 4 * static_cast<std::size_t>(h));
        cell.resize(static_cast<std::size_t>(steps) * static_cast<std::size_t>(h));
        hidden.resize(static_cast<std::size_t>(steps) * static_cast<std::size_t>(h));
        cell_tanh.resize(static_cast<std::size_t>(steps) * static_cast<std::size_t>(h));
    }
};

thread_local LstmTape tl_tape;
thread_local std::vector<double> tl_dh;
thread_local std::vector<double> tl_dc;
thread_local std::vector<double> tl_dgate;

// Runs the recurrence, optionally filling the tape, and returns the scalar head output.
double lstm_forward(const ParamVector& p, int h, std::span<const double> input, LstmTape* tape) {
    const auto lay = lstm_layout(h);
    const double* wx = p.data() + lay.wx;
    const double* wh = p.data() + lay.wh;
    const double* bias = p.data() + lay.bias;
    const double* head_w = p.data() + lay.head_w;
    const int steps = static_cast<int>(input.size());
    const auto hu = static_cast<std::size_t>(h);

    std::vector<double> state_h(hu, 0.0);
    std::vector<double> state_c(hu, 0.0);
    std::vector<double> next_h(hu, 0.0);

    for (int t = 0; t < steps; ++t) {
        const double x = input[static_cast<std::size_t>(t)];
        // All gates at step t read h_{t-1}; the new hidden state lands in
        // next_h and is swapped in after the unit loop.
        for (int j = 0; j < h; ++j) {
            double pre[4];
            for (int gate = 0; gate < 4; ++gate) {
                const std::size_t unit = static_cast<std::size_t>(gate) * hu + static_cast<std::size_t>(j);
                double acc = wx[unit] * x + bias[unit];
                const double* row = wh + unit * hu;
                for (std::size_t k = 0; k < hu; ++k) acc += row[k] * state_h[k];
                pre[gate] = acc;
            }
            const double gi = sigmoid(pre[0]);
            const double gf = sigmoid(pre[1]);
            const double gg = std::tanh(pre[2]);
            const double go = sigmoid(pre[3]);
            const double c = gf * state_c[static_cast<std::size_t>(j)] + gi * gg;
            const double ct = std::tanh(c);
            state_c[static_cast<std::size_t>(j)] = c;
            next_h[static_cast<std::size_t>(j)] = go * ct;
            if (tape) {
                const std::size_t base = static_cast<std::size_t>(t) * 4 * hu + static_cast<std::size_t>(j);
                tape->gates[base] = gi;
                tape->gates[base + hu] = gf;
                tape->gates[base + 2 * hu] = gg;
                tape->gates[base + 3 * hu] = go;
                tape->cell[static_cast<std::size_t>(t) * hu + static_cast<std::size_t>(j)] = c;
                tape->cell_tanh[static_cast<std::size_t>(t) * hu + static_cast<std::size_t>(j)] = ct;
            }
        }
        state_h.swap(next_h);
        if (tape) {
            for (std::size_t j = 0; j < hu; ++j)
                tape->hidden[static_cast<std::size_t>(t) * hu + j] = state_h[j];
        }
    }

    double out = p[lay.head_b];
    for (std::size_t j = 0; j < hu; ++j) out += head_w[j] * state_h[j];
    return out;
}

// Accumulates d(loss)/d(params) for one sample given d(loss)/d(prediction).
void lstm_backward(const ParamVector& p, int h, std::span<const double> input, const LstmTape& tape,
                   double dpred, Gradient& g) {
    const auto lay = lstm_layout(h);
    const double* wh = p.data() + lay.wh;
    const double* head_w = p.data() + lay.head_w;
    double* g_wx = g.data() + lay.wx;
    double* g_wh = g.data() + lay.wh;
    double* g_bias = g.data() + lay.bias;
    double* g_head_w = g.data() + lay.head_w;
    const int steps = static_cast<int>(input.size());
    const auto hu = static_cast<std::size_t>(h);

    auto& dh = tl_dh;
    auto& dc = tl_dc;
    auto& dgate = tl_dgate;
    dh.assign(hu, 0.0);
    dc.assign(hu, 0.0);
    dgate.resize(4 * hu);

    const double* h_last = tape.hidden.data() + static_cast<std::size_t>(steps - 1) * hu;
    for (std::size_t j = 0; j < hu; ++j) {
        g_head_w[j] += dpred * h_last[j];
        dh[j] = dpred * head_w[j];
    }
    g[lay.head_b] += dpred;

    for (int t = steps - 1; t >= 0; --t) {
        const double x = input[static_cast<std::size_t>(t)];
        const double* gates = tape.gates.data() + static_cast<std::size_t>(t) * 4 * hu;
        const double* ct = tape.cell_tanh.data() + static_cast<std::size_t>(t) * hu;
        const double* c_prev_row =
            t > 0 ? tape.cell.data() + static_cast<std::size_t>(t - 1) * hu : nullptr;
        const double* h_prev_row =
            t > 0 ? tape.hidden.data() + static_cast<std::size_t>(t - 1) * hu : nullptr;

        for (std::size_t j = 0; j < hu; ++j) {
            const double gi = gates[j];
            const double gf = gates[hu + j];
            const double gg = gates[2 * hu + j];
            const double go = gates[3 * hu + j];
            const double tc = ct[j];
            const double c_prev = c_prev_row ? c_prev_row[j] : 0.0;

            const double dct = dh[j] * go * (1.0 - tc * tc) + dc[j];
            dgate[j] = dct * gg * gi * (1.0 - gi);                 // input gate pre-act
            dgate[hu + j] = dct * c_prev * gf * (1.0 - gf);        // forget gate pre-act
            dgate[2 * hu + j] = dct * gi * (1.0 - gg * gg);        // cell candidate pre-act
            dgate[3 * hu + j] = dh[j] * tc * go * (1.0 - go);      // output gate pre-act
            dc[j] = dct * gf;
        }

        for (std::size_t u = 0; u < 4 * hu; ++u) {
            const double da = dgate[u];
            g_wx[u] += da * x;
            g_bias[u] += da;
        }
        if (t > 0) {
            for (std::size_t j = 0; j < hu; ++j) dh[j] = 0.0;
            for (std::size_t u = 0; u < 4 * hu; ++u) {
                const double da = dgate[u];
                double* g_row = g_wh + u * hu;
                const double* w_row = wh + u * hu;
                for (std::size_t k = 0; k < hu; ++k) {
                    g_row[k] += da * h_prev_row[k];
                    dh[k] += da * w_row[k];
                }
            }
        }
    }
}

void check_input(const LearnerSpec& spec, std::span<const double> input) {
    require(static_cast<int>(input.size()) == spec.input_len, Errc::ShapeMismatch,
            "input length does not match spec.input_len");
    for (double v : input) {
        require(std::isfinite(v), Errc::NonFinite, "non-finite model input");
    }
}

void check_spec(const LearnerSpec& spec) {
    require(spec.input_len >= 1, Errc::InvalidArgument, "input_len must be >= 1");
    if (spec.kind == LearnerKind::Lstm) {
        require(spec.hidden_size >= 1, Errc::InvalidArgument, "hidden_size must be >= 1");
    }
}

} // namespace

LstmLayout lstm_layout(int h) {
    const auto hu = static_cast<std::size_t>(h);
    LstmLayout lay{};
    lay.wx = 0;
    lay.wh = 4 * hu;
    lay.bias = lay.wh + 4 * hu * hu;
    lay.head_w = lay.bias + 4 * hu;
    lay.head_b = lay.head_w + hu;
    lay.total = lay.head_b + 1;
    return lay;
}

std::size_t param_count(const LearnerSpec& spec) {
    check_spec(spec);
    if (spec.kind == LearnerKind::Linear) return static_cast<std::size_t>(spec.input_len) + 1;
    return lstm_layout(spec.hidden_size).total;
}

ParamVector init_params(const LearnerSpec& spec) {
    const std::size_t n = param_count(spec);
    Rng rng(spec.init_seed);
    ParamVector p(n);
    for (auto& v : p) v = rng.uniform(-spec.init_scale, spec.init_scale);
    if (spec.kind == LearnerKind::Lstm) {
        const auto lay = lstm_layout(spec.hidden_size);
        const auto hu = static_cast<std::size_t>(spec.hidden_size);
        for (std::size_t j = 0; j < hu; ++j) p[lay.bias + hu + j] += 1.0; // forget-gate block
    }
    return p;
}

double forward(const LearnerSpec& spec, const ParamVector& params, std::span<const double> input) {
    check_input(spec, input);
    require(params.size() == param_count(spec), Errc::ShapeMismatch,
            "parameter vector length does not match spec");
    if (spec.kind == LearnerKind::Linear) {
        double acc = params[static_cast<std::size_t>(spec.input_len)];
        for (std::size_t i = 0; i < input.size(); ++i) acc += params[i] * input[i];
        return acc;
    }
    return lstm_forward(params, spec.hidden_size, input, nullptr);
}

double loss(const LearnerSpec& spec, const ParamVector& params,
            std::span<const Sample* const> batch) {
    require(!batch.empty(), Errc::InvalidArgument, "loss of an empty batch");
    double acc = 0.0;
    for (const Sample* s : batch) {
        const double err = s->target - forward(spec, params, s->input);
        acc += err * err;
    }
    return acc / static_cast<double>(batch.size());
}

double loss(const LearnerSpec& spec, const ParamVector& params, std::span<const Sample> batch) {
    require(!batch.empty(), Errc::InvalidArgument, "loss of an empty batch");
    double acc = 0.0;
    for (const Sample& s : batch) {
        const double err = s.target - forward(spec, params, s.input);
        acc += err * err;
    }
    return acc / static_cast<double>(batch.size());
}

Gradient grad(const LearnerSpec& spec, const ParamVector& params,
              std::span<const Sample* const> batch) {
    require(!batch.empty(), Errc::InvalidArgument, "gradient of an empty batch");
    require(params.size() == param_count(spec), Errc::ShapeMismatch,
            "parameter vector length does not match spec");

    Gradient g(params.size(), 0.0);
    const double inv_batch = 1.0 / static_cast<double>(batch.size());

    if (spec.kind == LearnerKind::Linear) {
        const auto lw = static_cast<std::size_t>(spec.input_len);
        for (const Sample* s : batch) {
            check_input(spec, s->input);
            double pred = params[lw];
            for (std::size_t i = 0; i < lw; ++i) pred += params[i] * s->input[i];
            const double dpred = -2.0 * (s->target - pred) * inv_batch;
            for (std::size_t i = 0; i < lw; ++i) g[i] += dpred * s->input[i];
            g[lw] += dpred;
        }
    } else {
        tl_tape.resize(spec.input_len, spec.hidden_size);
        for (const Sample* s : batch) {
            check_input(spec, s->input);
            const double pred = lstm_forward(params, spec.hidden_size, s->input, &tl_tape);
            const double dpred = -2.0 * (s->target - pred) * inv_batch;
            lstm_backward(params, spec.hidden_size, s->input, tl_tape, dpred, g);
        }
    }

    for (double v : g) {
        require(std::isfinite(v), Errc::NonFinite, "non-finite gradient");
    }
    return g;
}

Gradient grad(const LearnerSpec& spec, const ParamVector& params, std::span<const Sample> batch) {
    std::vector<const Sample*> ptrs;
    ptrs.reserve(batch.size());
    for (const Sample& s : batch) ptrs.push_back(&s);
    return grad(spec, params, std::span<const Sample* const>(ptrs));
}

ParamVector sgd_step(const ParamVector& params, const Gradient& g, double learning_rate) {
    ParamVector out = params;
    sgd_step_inplace(out, g, learning_rate);
    return out;
}

void sgd_step_inplace(ParamVector& params, const Gradient& g, double learning_rate) {
    require(learning_rate > 0.0, Errc::InvalidArgument, "learning rate must be positive");
    require(params.size() == g.size(), Errc::ShapeMismatch, "params/gradient length mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) params[i] -= learning_rate * g[i];
}

void clip_gradient(Gradient& g, double max_norm) {
    if (max_norm <= 0.0) return;
    double sq = 0.0;
    for (double v : g) sq += v * v;
    const double norm = std::sqrt(sq);
    if (norm <= max_norm) return;
    const double scale = max_norm / norm;
    for (double& v : g) v *= scale;
}

const char* to_string(LearnerKind kind) noexcept {
    return kind == LearnerKind::Lstm ? "lstm" : "linear";
}

LearnerKind learner_kind_from_string(const std::string& name) {
    if (name == "lstm") return LearnerKind::Lstm;
    if (name == "linear") return LearnerKind::Linear;
    raise(Errc::Config, "unknown learner kind '" + name + "'");
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    nlohmann::json j;
    j["format"] = "gluadfl-checkpoint";
    j["version"] = 1;
    j["spec"] = {{"kind", to_string(ckpt.spec.kind)},
                 {"input_len", ckpt.spec.input_len},
                 {"hidden_size", ckpt.spec.hidden_size},
                 {"init_seed", ckpt.spec.init_seed},
                 {"init_scale", ckpt.spec.init_scale}};
    j["params"] = ckpt.params;
    if (ckpt.stats) {
        j["norm_stats"] = {{"mean", ckpt.stats->mean}, {"std", ckpt.stats->std_dev}};
    }
    std::ofstream out(path);
    require(out.good(), Errc::Io, "cannot open '" + path.string() + "' for writing");
    out << j.dump(2) << '\n';
    require(out.good(), Errc::Io, "write failed for '" + path.string() + "'");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path);
    require(in.good(), Errc::Io, "cannot open '" + path.string() + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        raise(Errc::Io, "bad checkpoint '" + path.string() + "': " + e.what());
    }
    require(j.value("format", "") == "gluadfl-checkpoint", Errc::Io,
            "'" + path.string() + "' is not a checkpoint file");
    require(j.value("version", 0) == 1, Errc::Io, "unsupported checkpoint version");

    Checkpoint ckpt;
    const auto& s = j.at("spec");
    ckpt.spec.kind = learner_kind_from_string(s.at("kind").get<std::string>());
    ckpt.spec.input_len = s.at("input_len").get<int>();
    ckpt.spec.hidden_size = s.at("hidden_size").get<int>();
    ckpt.spec.init_seed = s.at("init_seed").get<std::uint64_t>();
    ckpt.spec.init_scale = s.at("init_scale").get<double>();
    ckpt.params = j.at("params").get<ParamVector>();
    require(ckpt.params.size() == param_count(ckpt.spec), Errc::ShapeMismatch,
            "checkpoint parameter count does not match its spec");
    if (j.contains("norm_stats")) {
        NormStats st;
        st.mean = j["norm_stats"].at("mean").get<double>();
        st.std_dev = j["norm_stats"].at("std").get<double>();
        ckpt.stats = st;
    }
    return ckpt;
}

} // namespace gluadfl
