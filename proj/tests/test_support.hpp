#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "fedidx/layers.hpp"
#include "fedidx/matrix.hpp"
#include "fedidx/random.hpp"

namespace fedidx::testing {

inline Matrix random_matrix(std::size_t rows, std::size_t cols, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(rows, cols);
  for (double& x : m.data()) x = n(rng);
  return m;
}

inline double reference_activation(Activation a, double x) {
  switch (a) {
    case Activation::Tanh: return std::tanh(x);
    case Activation::Relu: return x > 0.0 ? x : 0.0;
    case Activation::Identity: return x;
  }
  return x;
}

// Scalar-by-scalar evaluation of an MLP, written without the matrix kernels.
inline std::vector<std::vector<double>> reference_mlp(const MlpParams& p,
                                                      const std::vector<std::vector<double>>& in) {
  std::vector<std::vector<double>> cur = in;
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const DenseParams& layer = p.layers[l];
    std::vector<std::vector<double>> next(cur.size(), std::vector<double>(layer.out_dim()));
    for (std::size_t r = 0; r < cur.size(); ++r) {
      for (std::size_t j = 0; j < layer.out_dim(); ++j) {
        double s = layer.bias(0, j);
        for (std::size_t i = 0; i < layer.in_dim(); ++i) s += cur[r][i] * layer.weight(i, j);
        next[r][j] = reference_activation(p.activations[l], s);
      }
    }
    cur = std::move(next);
  }
  return cur;
}

inline std::vector<std::vector<double>> rows_of(const Matrix& m) {
  std::vector<std::vector<double>> out(m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r) out[r].assign(m.row(r).begin(), m.row(r).end());
  return out;
}

inline double ref_cos(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

}  // namespace fedidx::testing
