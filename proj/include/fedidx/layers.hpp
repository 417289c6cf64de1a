#pragma once

#include <concepts>
#include <cstddef>
#include <type_traits>
#include <span>
#include <string>
#include <vector>

#include "fedidx/errors.hpp"
#include "fedidx/matrix.hpp"
#include "fedidx/random.hpp"
#include "fedidx/tape.hpp"

namespace fedidx {

enum class Activation { Tanh, Relu, Identity };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

// Weights decay during SGD; biases do not.
enum class TensorRole { Weight, Bias };

struct DenseParams {
  Matrix weight;  // in_dim x out_dim
  Matrix bias;    // 1 x out_dim

  std::size_t in_dim() const { return weight.rows(); }
  std::size_t out_dim() const { return weight.cols(); }
  bool operator==(const DenseParams&) const = default;
};

struct MlpParams {
  std::vector<DenseParams> layers;
  std::vector<Activation> activations;  // one per layer

  std::size_t in_dim() const { return layers.empty() ? 0 : layers.front().in_dim(); }
  std::size_t out_dim() const { return layers.empty() ? 0 : layers.back().out_dim(); }
  bool operator==(const MlpParams&) const = default;
};

// Uniform in +-sqrt(6 / (fan_in + fan_out)); zero bias.
DenseParams init_dense(std::size_t in_dim, std::size_t out_dim, Rng& rng);

// `dims` lists every layer boundary: {in, hidden..., out}.
MlpParams init_mlp(std::span<const std::size_t> dims, std::span<const Activation> activations,
                   Rng& rng);

// Throws DimensionError naming the first inconsistent layer.
void validate(const MlpParams& params);

Matrix dense_forward(const DenseParams& p, const Matrix& input);
Matrix apply_activation(Activation a, Matrix m);
Matrix mlp_forward(const MlpParams& params, const Matrix& input);

template <class Self, class F>
  requires std::same_as<std::remove_const_t<Self>, DenseParams>
void visit_tensors(Self& p, F&& f) {
  f(p.weight, TensorRole::Weight);
  f(p.bias, TensorRole::Bias);
}

template <class Self, class F>
  requires std::same_as<std::remove_const_t<Self>, MlpParams>
void visit_tensors(Self& p, F&& f) {
  for (auto& layer : p.layers) visit_tensors(layer, f);
}

template <class Params>
std::size_t tensor_count(const Params& p) {
  std::size_t n = 0;
  visit_tensors(p, [&](const Matrix&, TensorRole) { ++n; });
  return n;
}

template <class Params>
std::size_t scalar_count(const Params& p) {
  std::size_t n = 0;
  visit_tensors(p, [&](const Matrix& m, TensorRole) { n += m.size(); });
  return n;
}

template <class Params>
bool all_finite(const Params& p) {
  bool ok = true;
  visit_tensors(p, [&](const Matrix& m, TensorRole) { ok = ok && m.all_finite(); });
  return ok;
}

// Gradients, one matrix per tensor in visit order.
using Gradients = std::vector<Matrix>;

// Tape handles for parameters bound as trainable leaves. Binding consumes
// leaves in visit order starting at `cursor`.
struct DenseVars {
  Tape::Var weight;
  Tape::Var bias;
};

struct MlpVars {
  std::vector<DenseVars> layers;
  std::vector<Activation> activations;
};

template <class Params>
std::vector<Tape::Var> bind_params(Tape& tape, const Params& p) {
  std::vector<Tape::Var> leaves;
  visit_tensors(p, [&](const Matrix& m, TensorRole) { leaves.push_back(tape.param(m)); });
  return leaves;
}

DenseVars dense_vars(std::span<const Tape::Var> leaves, std::size_t& cursor);
MlpVars mlp_vars(const MlpParams& p, std::span<const Tape::Var> leaves, std::size_t& cursor);

Tape::Var dense_forward(Tape& tape, const DenseVars& p, Tape::Var input);
Tape::Var apply_activation(Tape& tape, Activation a, Tape::Var x);
Tape::Var mlp_forward(Tape& tape, const MlpVars& p, Tape::Var input);

}  // namespace fedidx

namespace fedidx {

// Parameterwise sum_k weights[k] * models[k], accumulated in the given order.
template <class Params>
Params weighted_average(std::span<const Params* const> models, std::span<const double> weights) {
  if (models.empty()) throw DimensionError("weighted_average of no models");
  if (models.size() != weights.size()) {
    throw DimensionError("weighted_average: " + std::to_string(models.size()) + " models, " +
                         std::to_string(weights.size()) + " weights");
  }
  Params out = *models.front();
  visit_tensors(out, [](Matrix& m, TensorRole) {
    for (double& v : m.data()) v = 0.0;
  });
  for (std::size_t k = 0; k < models.size(); ++k) {
    std::vector<const Matrix*> src;
    visit_tensors(*models[k], [&](const Matrix& m, TensorRole) { src.push_back(&m); });
    std::size_t t = 0;
    visit_tensors(out, [&](Matrix& m, TensorRole) {
      if (t >= src.size() || !src[t]->same_shape(m)) {
        throw DimensionError("weighted_average: model " + std::to_string(k) +
                             " has mismatched tensor " + std::to_string(t));
      }
      auto d = m.data();
      auto s = src[t]->data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += weights[k] * s[i];
      ++t;
    });
  }
  return out;
}

}  // namespace fedidx
