#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "gluadfl/timeseries.hpp"

namespace gluadfl {

enum class LearnerKind { Lstm, Linear };

// Fully determines the parameter layout and count.
//
//   Linear: [w(0..L-1), bias]                                  -> L + 1
//   Lstm:   [wx(4h), wh(4h*h), bias(4h), head_w(h), head_b]    -> 4h(1+h) + 4h + h + 1
//
// Gate blocks are ordered input, forget, cell, output; wh is gate-major
// row-major (unit j, then previous hidden k).
struct LearnerSpec {
    LearnerKind kind = LearnerKind::Lstm;
    int input_len = 12;
    int hidden_size = 8; // ignored for Linear
    std::uint64_t init_seed = 0;
    double init_scale = 0.1;
};

using ParamVector = std::vector<double>;
using Gradient = std::vector<double>;

// Offsets into the flat LSTM parameter vector.
struct LstmLayout {
    std::size_t wx;
    std::size_t wh;
    std::size_t bias;
    std::size_t head_w;
    std::size_t head_b;
    std::size_t total;
};
LstmLayout lstm_layout(int hidden_size);

std::size_t param_count(const LearnerSpec& spec);

// Uniform(-init_scale, +init_scale) in layout order, forget-gate biases
// shifted by +1; deterministic in init_seed.
ParamVector init_params(const LearnerSpec& spec);

double forward(const LearnerSpec& spec, const ParamVector& params, std::span<const double> input);

// Mean squared error of Sample targets, the empirical node loss.
double loss(const LearnerSpec& spec, const ParamVector& params, std::span<const Sample> batch);
double loss(const LearnerSpec& spec, const ParamVector& params,
            std::span<const Sample* const> batch);

// Analytic gradient of loss: backpropagation through time for the LSTM,
// closed form for Linear.
Gradient grad(const LearnerSpec& spec, const ParamVector& params, std::span<const Sample> batch);
Gradient grad(const LearnerSpec& spec, const ParamVector& params,
              std::span<const Sample* const> batch);

ParamVector sgd_step(const ParamVector& params, const Gradient& g, double learning_rate);
void sgd_step_inplace(ParamVector& params, const Gradient& g, double learning_rate);

// L2 clipping; max_norm <= 0 disables.
void clip_gradient(Gradient& g, double max_norm);

// Versioned JSON checkpoint; round-trips spec + params bit-exactly.
struct Checkpoint {
    LearnerSpec spec;
    ParamVector params;
    std::optional<NormStats> stats; // training-cohort stats, when known
};
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

const char* to_string(LearnerKind kind) noexcept;
LearnerKind learner_kind_from_string(const std::string& name);

} // namespace gluadfl
