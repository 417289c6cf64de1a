#pragma once

#include <string>
#include <vector>

#include "fedidx/errors.hpp"
#include "fedidx/layers.hpp"
#include "fedidx/tape.hpp"

namespace fedidx {

struct SgdState {
  std::vector<Matrix> momentum_buffers;  // lazily shaped on the first step
  double learning_rate = 1e-2;
  double momentum = 0.0;
  double weight_decay = 0.0;
};

SgdState make_sgd(double learning_rate, double momentum, double weight_decay);

// v <- momentum * v + (grad + weight_decay * param)   (decay on weights only)
// param <- param - lr * v
template <class Params>
void sgd_step(Params& params, const Gradients& grads, SgdState& state) {
  if (grads.size() != tensor_count(params)) {
    throw DimensionError("sgd_step: " + std::to_string(grads.size()) + " gradients for " +
                         std::to_string(tensor_count(params)) + " tensors");
  }
  if (state.momentum_buffers.empty()) {
    visit_tensors(params, [&](const Matrix& m, TensorRole) {
      state.momentum_buffers.emplace_back(m.rows(), m.cols());
    });
  }
  std::size_t k = 0;
  visit_tensors(params, [&](Matrix& m, TensorRole role) {
    const Matrix& g = grads[k];
    Matrix& v = state.momentum_buffers[k];
    if (!g.same_shape(m) || !v.same_shape(m)) {
      throw DimensionError("sgd_step: tensor " + std::to_string(k) + " is " + m.shape_string() +
                           " but gradient is " + g.shape_string());
    }
    const double wd = role == TensorRole::Weight ? state.weight_decay : 0.0;
    auto pd = m.data();
    auto gd = g.data();
    auto vd = v.data();
    for (std::size_t i = 0; i < pd.size(); ++i) {
      vd[i] = state.momentum * vd[i] + (gd[i] + wd * pd[i]);
      pd[i] -= state.learning_rate * vd[i];
    }
    ++k;
  });
}

struct ValueAndGrad {
  double value = 0.0;
  Gradients grads;
};

// Binds every tensor of `params` as a trainable leaf, lets `build` record
// a scalar loss from the bound leaves, and back-propagates.
template <class Params, class Build>
ValueAndGrad value_and_grad(const Params& params, Build&& build) {
  Tape tape;
  const std::vector<Tape::Var> leaves = bind_params(tape, params);
  const Tape::Var loss = build(tape, std::span<const Tape::Var>(leaves));
  tape.backward(loss);
  ValueAndGrad out;
  out.value = tape.scalar(loss);
  out.grads.reserve(leaves.size());
  for (const Tape::Var& v : leaves) out.grads.push_back(tape.grad(v));
  return out;
}

template <class Params, class Build>
double loss_value(const Params& params, Build&& build) {
  Tape tape;
  const std::vector<Tape::Var> leaves = bind_params(tape, params);
  return tape.scalar(build(tape, std::span<const Tape::Var>(leaves)));
}

}  // namespace fedidx
