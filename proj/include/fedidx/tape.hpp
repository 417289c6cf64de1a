#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "fedidx/matrix.hpp"

namespace fedidx {

// Reverse-mode gradient tape over matrix values. It records a fixed set of
// primitives, which is exactly what the losses in this library are built from.
class Tape {
 public:
  struct Var {
    std::size_t id = 0;
  };

  enum class Op : std::uint8_t {
    Leaf,
    MatMul,
    AddRowVector,
    Add,
    Sub,
    Scale,
    AddScalar,
    Square,
    Tanh,
    Relu,
    ConcatCols,
    SliceCols,
    Transpose,
    RowNormalize,
    RowCosine,
    AbsSum,
    Sum,
    Mean,
    LogSumExpOffDiag,
    SoftmaxCrossEntropy,
    KlFromLogits,
    ArgmaxRows,  // forward only
  };

  Var constant(Matrix value);
  Var param(Matrix value);

  const Matrix& value(Var v) const { return nodes_[v.id].value; }
  double scalar(Var v) const;
  // Gradient accumulated by backward(); zero matrix if the node got none.
  Matrix grad(Var v) const;
  std::size_t size() const noexcept { return nodes_.size(); }

  Var matmul(Var a, Var b);
  Var add_row_vector(Var a, Var row);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var scale(Var a, double c);
  Var add_scalar(Var a, double c);
  Var square(Var a);
  Var tanh(Var a);
  Var relu(Var a);
  Var concat_cols(Var a, Var b);
  Var slice_cols(Var a, std::size_t start, std::size_t count);
  Var transpose(Var a);
  // Each row divided by its L2 norm. Zero rows are a DomainError.
  Var row_normalize(Var a);
  // Column vector of per-row cosine similarities between a and b.
  Var row_cosine(Var a, Var b);
  Var abs_sum(Var a);
  Var sum(Var a);
  Var mean(Var a);
  // Column vector: out_j = log sum_{k != j} exp(s_jk) for a square s.
  Var log_sum_exp_off_diag(Var s);
  // Mean over rows of -log softmax(logits)_label.
  Var softmax_cross_entropy(Var logits, std::span<const int> labels);
  // Mean over rows of KL(softmax(p) || softmax(q)). With stop_p the p branch
  // is a constant target and receives no gradient.
  Var kl_from_logits(Var p, Var q, bool stop_p);
  // One-hot matrix of each row's argmax. Not differentiable.
  Var argmax_rows(Var a);

  // Accumulates d(output)/d(node) for every node feeding `output`, which
  // must be 1x1.
  void backward(Var output);

 private:
  struct Node {
    Op op = Op::Leaf;
    Matrix value;
    Matrix grad;
    std::size_t in0 = 0;
    std::size_t in1 = 0;
    bool needs_grad = false;
    bool stop_in0 = false;
    double c = 0.0;
    std::size_t start = 0;
    std::vector<int> labels;
    Matrix aux;  // op-specific cache (norms, softmax probabilities, ...)
  };

  Var push(Node node);
  Node& node(Var v) { return nodes_[v.id]; }
  const Node& node(Var v) const { return nodes_[v.id]; }
  void accumulate(std::size_t id, const Matrix& g);
  Matrix& grad_buffer(std::size_t id);
  void backprop_node(const Node& n);

  std::vector<Node> nodes_;
};

}  // namespace fedidx
