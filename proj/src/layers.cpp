#include "fedidx/layers.hpp"

#include <cmath>

#include "fedidx/errors.hpp"

namespace fedidx {

std::string to_string(Activation a) {
  switch (a) {
    case Activation::Tanh: return "tanh";
    case Activation::Relu: return "relu";
    case Activation::Identity: return "identity";
  }
  return "identity";
}

Activation activation_from_string(const std::string& s) {
  if (s == "tanh") return Activation::Tanh;
  if (s == "relu") return Activation::Relu;
  if (s == "identity") return Activation::Identity;
  throw ConfigError("unknown activation '" + s + "'");
}

DenseParams init_dense(std::size_t in_dim, std::size_t out_dim, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(in_dim + out_dim));
  std::uniform_real_distribution<double> u(-limit, limit);
  DenseParams p{Matrix(in_dim, out_dim), Matrix(1, out_dim)};
  for (double& w : p.weight.data()) w = u(rng);
  return p;
}

MlpParams init_mlp(std::span<const std::size_t> dims, std::span<const Activation> activations,
                   Rng& rng) {
  if (dims.size() < 2) throw DimensionError("init_mlp needs at least an input and output dim");
  if (activations.size() != dims.size() - 1) {
    throw DimensionError("init_mlp: " + std::to_string(activations.size()) +
                         " activations for " + std::to_string(dims.size() - 1) + " layers");
  }
  MlpParams p;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    p.layers.push_back(init_dense(dims[i], dims[i + 1], rng));
    p.activations.push_back(activations[i]);
  }
  return p;
}

void validate(const MlpParams& params) {
  if (params.layers.size() != params.activations.size()) {
    throw DimensionError("mlp has " + std::to_string(params.layers.size()) + " layers but " +
                         std::to_string(params.activations.size()) + " activations");
  }
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    const DenseParams& l = params.layers[i];
    if (l.bias.rows() != 1 || l.bias.cols() != l.out_dim()) {
      throw DimensionError("layer " + std::to_string(i) + ": bias " + l.bias.shape_string() +
                           " does not match weight " + l.weight.shape_string());
    }
    if (i > 0 && params.layers[i - 1].out_dim() != l.in_dim()) {
      throw DimensionError("layer " + std::to_string(i) + ": input dim " +
                           std::to_string(l.in_dim()) + " does not chain with previous output " +
                           std::to_string(params.layers[i - 1].out_dim()));
    }
  }
}

Matrix dense_forward(const DenseParams& p, const Matrix& input) {
  Matrix out = matmul(input, p.weight);
  for (std::size_t i = 0; i < out.rows(); ++i) {
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += p.bias(0, j);
  }
  return out;
}

Matrix apply_activation(Activation a, Matrix m) {
  switch (a) {
    case Activation::Tanh:
      for (double& v : m.data()) v = std::tanh(v);
      break;
    case Activation::Relu:
      for (double& v : m.data()) v = v > 0.0 ? v : 0.0;
      break;
    case Activation::Identity:
      break;
  }
  return m;
}

Matrix mlp_forward(const MlpParams& params, const Matrix& input) {
  validate(params);
  Matrix x = input;
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    if (x.cols() != params.layers[i].in_dim()) {
      throw DimensionError("layer " + std::to_string(i) + " expects " +
                           std::to_string(params.layers[i].in_dim()) + " inputs, got " +
                           std::to_string(x.cols()));
    }
    x = apply_activation(params.activations[i], dense_forward(params.layers[i], x));
  }
  return x;
}

DenseVars dense_vars(std::span<const Tape::Var> leaves, std::size_t& cursor) {
  if (cursor + 2 > leaves.size()) throw DimensionError("dense_vars: not enough bound leaves");
  DenseVars v{leaves[cursor], leaves[cursor + 1]};
  cursor += 2;
  return v;
}

MlpVars mlp_vars(const MlpParams& p, std::span<const Tape::Var> leaves, std::size_t& cursor) {
  MlpVars v;
  for (std::size_t i = 0; i < p.layers.size(); ++i) v.layers.push_back(dense_vars(leaves, cursor));
  v.activations = p.activations;
  return v;
}

Tape::Var dense_forward(Tape& tape, const DenseVars& p, Tape::Var input) {
  return tape.add_row_vector(tape.matmul(input, p.weight), p.bias);
}

Tape::Var apply_activation(Tape& tape, Activation a, Tape::Var x) {
  switch (a) {
    case Activation::Tanh: return tape.tanh(x);
    case Activation::Relu: return tape.relu(x);
    case Activation::Identity: return x;
  }
  return x;
}

Tape::Var mlp_forward(Tape& tape, const MlpVars& p, Tape::Var input) {
  Tape::Var x = input;
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    if (tape.value(x).cols() != tape.value(p.layers[i].weight).rows()) {
      throw DimensionError("layer " + std::to_string(i) + " expects " +
                           std::to_string(tape.value(p.layers[i].weight).rows()) +
                           " inputs, got " + std::to_string(tape.value(x).cols()));
    }
    x = apply_activation(tape, p.activations[i], dense_forward(tape, p.layers[i], x));
  }
  return x;
}

}  // namespace fedidx
