#include "fedidx/tape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "fedidx/errors.hpp"

namespace fedidx {

namespace {

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(op) + ": shapes " + a.shape_string() + " and " +
                         b.shape_string());
  }
}

// Row-wise softmax with max subtraction; also returns log-probabilities.
void row_softmax(const Matrix& logits, Matrix& prob, Matrix& log_prob) {
  prob = Matrix(logits.rows(), logits.cols());
  log_prob = Matrix(logits.rows(), logits.cols());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    auto x = logits.row(i);
    const double mx = *std::max_element(x.begin(), x.end());
    double s = 0.0;
    for (double v : x) s += std::exp(v - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < x.size(); ++j) {
      log_prob(i, j) = x[j] - lse;
      prob(i, j) = std::exp(log_prob(i, j));
    }
  }
}

const char* op_name(Tape::Op op) {
  switch (op) {
    case Tape::Op::Leaf: return "leaf";
    case Tape::Op::MatMul: return "matmul";
    case Tape::Op::AddRowVector: return "add_row_vector";
    case Tape::Op::Add: return "add";
    case Tape::Op::Sub: return "sub";
    case Tape::Op::Scale: return "scale";
    case Tape::Op::AddScalar: return "add_scalar";
    case Tape::Op::Square: return "square";
    case Tape::Op::Tanh: return "tanh";
    case Tape::Op::Relu: return "relu";
    case Tape::Op::ConcatCols: return "concat_cols";
    case Tape::Op::SliceCols: return "slice_cols";
    case Tape::Op::Transpose: return "transpose";
    case Tape::Op::RowNormalize: return "row_normalize";
    case Tape::Op::RowCosine: return "row_cosine";
    case Tape::Op::AbsSum: return "abs_sum";
    case Tape::Op::Sum: return "sum";
    case Tape::Op::Mean: return "mean";
    case Tape::Op::LogSumExpOffDiag: return "log_sum_exp_off_diag";
    case Tape::Op::SoftmaxCrossEntropy: return "softmax_cross_entropy";
    case Tape::Op::KlFromLogits: return "kl_from_logits";
    case Tape::Op::ArgmaxRows: return "argmax_rows";
  }
  return "unknown";
}

}  // namespace

Tape::Var Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Tape::Var Tape::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

Tape::Var Tape::param(Matrix value) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = true;
  return push(std::move(n));
}

double Tape::scalar(Var v) const {
  const Matrix& m = value(v);
  if (m.rows() != 1 || m.cols() != 1) {
    throw DimensionError("scalar() on a " + m.shape_string() + " value");
  }
  return m(0, 0);
}

Matrix Tape::grad(Var v) const {
  const Node& n = node(v);
  if (n.grad.empty() && !n.value.empty()) return Matrix(n.value.rows(), n.value.cols());
  return n.grad;
}

Tape::Var Tape::matmul(Var a, Var b) {
  Node n;
  n.op = Op::MatMul;
  n.value = fedidx::matmul(value(a), value(b));
  n.in0 = a.id;
  n.in1 = b.id;
  n.needs_grad = node(a).needs_grad || node(b).needs_grad;
  return push(std::move(n));
}

Tape::Var Tape::add_row_vector(Var a, Var row) {
  const Matrix& av = value(a);
  const Matrix& rv = value(row);
  if (rv.rows() != 1 || rv.cols() != av.cols()) {
    throw DimensionError("add_row_vector: " + av.shape_string() + " + " + rv.shape_string());
  }
  Node n;
  n.op = Op::AddRowVector;
  n.value = av;
  for (std::size_t i = 0; i < av.rows(); ++i) {
    for (std::size_t j = 0; j < av.cols(); ++j) n.value(i, j) += rv(0, j);
  }
  n.in0 = a.id;
  n.in1 = row.id;
  n.needs_grad = node(a).needs_grad || node(row).needs_grad;
  return push(std::move(n));
}

Tape::Var Tape::add(Var a, Var b) {
  require_same_shape(value(a), value(b), "add");
  Node n;
  n.op = Op::Add;
  n.value = value(a);
  auto out = n.value.data();
  auto bv = value(b).data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  n.in0 = a.id;
  n.in1 = b.id;
  n.needs_grad = node(a).needs_grad || node(b).needs_grad;
  return push(std::move(n));
}

Tape::Var Tape::sub(Var a, Var b) {
  require_same_shape(value(a), value(b), "sub");
  Node n;
  n.op = Op::Sub;
  n.value = value(a);
  auto out = n.value.data();
  auto bv = value(b).data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  n.in0 = a.id;
  n.in1 = b.id;
  n.needs_grad = node(a).needs_grad || node(b).needs_grad;
  return push(std::move(n));
}

Tape::Var Tape::scale(Var a, double c) {
  Node n;
  n.op = Op::Scale;
  n.value = value(a);
  for (double& v : n.value.data()) v *= c;
  n.in0 = a.id;
  n.c = c;
  n.needs_grad = node(a).needs_grad;
  return push(std::move(n));
}

Tape::Var Tape::add_scalar(Var a, double c) {
  Node n;
  n.op = Op::AddScalar;
  n.value = value(a);
  for (double& v : n.value.data()) v += c;
  n.in0 = a.id;
  n.c = c;
  n.needs_grad = node(a).needs_grad;
  return push(std::move(n));
}

Tape::Var Tape::square(Var a) {
  Node n;
  n.op = Op::Square;
  n.value = value(a);
  for (double& v : n.value.data()) v *= v;
  n.in0 = a.id;
  n.needs_grad = node(a).needs_grad;
  return push(std::move(n));
}

Tape::Var Tape::tanh(Var a) {
  Node n;
  n.op = Op::Tanh;
  n.value = value(a);
  for (double& v : n.value.data()) v = std::tanh(v);
  n.in0 = a.id;
  n.needs_grad = node(a).needs_grad;
  return push(std::move(n));
}

Tape::Var Tape::relu(Var a) {
  Node n;
  n.op = Op::Relu;
  n.value = value(a);
  for (double& v : n.value.data()) v = v > 0.0 ? v : 0.0;
  n.in0 = a.id;
  n.needs_grad = node(a).needs_grad;
  return push(std::move(n));
}

Tape::Var Tape::concat_cols(Var a, Var b) {
  Node n;
  n.op = Op::ConcatCols;
  n.value = fedidx::concat_cols(value(a), value(b));
  n.in0 = a.id;
  n.in1 = b.id;
  n.needs_grad = node(a).needs_grad || node(b).needs_grad;
  return push(std::move(n));
}

Tape::Var Tape::slice_cols(Var a, std::size_t start, std::size_t count) {
  Node n;
  n.op = Op::SliceCols;
  n.value = fedidx::slice_cols(value(a), start, count);
  n.in0 = a.id;
  n.start = start;
  n.needs_grad = node(a).needs_grad;
  return push(std::move(n));
}

Tape::Var Tape::transpose(Var a) {
  Node n;
  n.op = Op::Transpose;
  n.value = fedidx::transpose(value(a));
  n.in0 = a.id;
  n.needs_grad = node(a).needs_grad;
  return push(std::move(n));
}

Tape::Var Tape::row_normalize(Var a) {
  const Matrix& av = value(a);
  Node n;
  n.op = Op::RowNormalize;
  n.value = av;
  n.aux = Matrix(av.rows(), 1);
  for (std::size_t i = 0; i < av.rows(); ++i) {
    const double nr = norm2(av.row(i));
    if (!(nr > 0.0)) {
      throw DomainError("row_normalize: row " + std::to_string(i) + " has zero norm");
    }
    n.aux(i, 0) = nr;
    for (double& v : n.value.row(i)) v /= nr;
  }
  n.in0 = a.id;
  n.needs_grad = node(a).needs_grad;
  return push(std::move(n));
}

Tape::Var Tape::row_cosine(Var a, Var b) {
  const Matrix& av = value(a);
  const Matrix& bv = value(b);
  require_same_shape(av, bv, "row_cosine");
  Node n;
  n.op = Op::RowCosine;
  n.value = Matrix(av.rows(), 1);
  n.aux = Matrix(av.rows(), 2);
  for (std::size_t i = 0; i < av.rows(); ++i) {
    const double na = norm2(av.row(i));
    const double nb = norm2(bv.row(i));
    if (!(na > 0.0) || !(nb > 0.0)) {
      throw DomainError("row_cosine: row " + std::to_string(i) + " has zero norm");
    }
    n.aux(i, 0) = na;
    n.aux(i, 1) = nb;
    n.value(i, 0) = dot(av.row(i), bv.row(i)) / (na * nb);
  }
  n.in0 = a.id;
  n.in1 = b.id;
  n.needs_grad = node(a).needs_grad || node(b).needs_grad;
  return push(std::move(n));
}

Tape::Var Tape::abs_sum(Var a) {
  Node n;
  n.op = Op::AbsSum;
  double s = 0.0;
  for (double v : value(a).data()) s += std::abs(v);
  n.value = Matrix(1, 1, s);
  n.in0 = a.id;
  n.needs_grad = node(a).needs_grad;
  return push(std::move(n));
}

Tape::Var Tape::sum(Var a) {
  Node n;
  n.op = Op::Sum;
  double s = 0.0;
  for (double v : value(a).data()) s += v;
  n.value = Matrix(1, 1, s);
  n.in0 = a.id;
  n.needs_grad = node(a).needs_grad;
  return push(std::move(n));
}

Tape::Var Tape::mean(Var a) {
  const Matrix& av = value(a);
  if (av.empty()) throw DomainError("mean of an empty matrix");
  Node n;
  n.op = Op::Mean;
  double s = 0.0;
  for (double v : av.data()) s += v;
  n.value = Matrix(1, 1, s / static_cast<double>(av.size()));
  n.in0 = a.id;
  n.needs_grad = node(a).needs_grad;
  return push(std::move(n));
}

Tape::Var Tape::log_sum_exp_off_diag(Var s) {
  const Matrix& sv = value(s);
  if (sv.rows() != sv.cols()) {
    throw DimensionError("log_sum_exp_off_diag needs a square matrix, got " + sv.shape_string());
  }
  if (sv.rows() < 2) throw DomainError("log_sum_exp_off_diag needs at least 2 rows");
  const std::size_t b = sv.rows();
  Node n;
  n.op = Op::LogSumExpOffDiag;
  n.value = Matrix(b, 1);
  n.aux = Matrix(b, b);  // off-diagonal softmax weights
  for (std::size_t j = 0; j < b; ++j) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < b; ++k) {
      if (k != j) mx = std::max(mx, sv(j, k));
    }
    double acc = 0.0;
    for (std::size_t k = 0; k < b; ++k) {
      if (k != j) acc += std::exp(sv(j, k) - mx);
    }
    n.value(j, 0) = mx + std::log(acc);
    for (std::size_t k = 0; k < b; ++k) {
      if (k != j) n.aux(j, k) = std::exp(sv(j, k) - mx) / acc;
    }
  }
  n.in0 = s.id;
  n.needs_grad = node(s).needs_grad;
  return push(std::move(n));
}

Tape::Var Tape::softmax_cross_entropy(Var logits, std::span<const int> labels) {
  const Matrix& lv = value(logits);
  if (labels.size() != lv.rows()) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                         " labels for " + lv.shape_string() + " logits");
  }
  if (lv.rows() == 0) throw DomainError("softmax_cross_entropy on an empty batch");
  Node n;
  n.op = Op::SoftmaxCrossEntropy;
  Matrix log_prob;
  row_softmax(lv, n.aux, log_prob);
  double s = 0.0;
  for (std::size_t i = 0; i < lv.rows(); ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= lv.cols()) {
      throw DomainError("softmax_cross_entropy: label " + std::to_string(y) + " out of range");
    }
    s -= log_prob(i, static_cast<std::size_t>(y));
  }
  n.value = Matrix(1, 1, s / static_cast<double>(lv.rows()));
  n.labels.assign(labels.begin(), labels.end());
  n.in0 = logits.id;
  n.needs_grad = node(logits).needs_grad;
  return push(std::move(n));
}

Tape::Var Tape::kl_from_logits(Var p, Var q, bool stop_p) {
  const Matrix& pv = value(p);
  const Matrix& qv = value(q);
  require_same_shape(pv, qv, "kl_from_logits");
  if (pv.rows() == 0) throw DomainError("kl_from_logits on an empty batch");
  Matrix pp, lp, qp, lq;
  row_softmax(pv, pp, lp);
  row_softmax(qv, qp, lq);
  Node n;
  n.op = Op::KlFromLogits;
  // aux layout: [p probs | q probs | per-row KL | log p - log q]
  const std::size_t c = pv.cols();
  n.aux = Matrix(pv.rows(), 3 * c + 1);
  double total = 0.0;
  for (std::size_t i = 0; i < pv.rows(); ++i) {
    double kl = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double diff = lp(i, j) - lq(i, j);
      kl += pp(i, j) * diff;
      n.aux(i, j) = pp(i, j);
      n.aux(i, c + j) = qp(i, j);
      n.aux(i, 2 * c + 1 + j) = diff;
    }
    n.aux(i, 2 * c) = kl;
    total += kl;
  }
  n.value = Matrix(1, 1, total / static_cast<double>(pv.rows()));
  n.in0 = p.id;
  n.in1 = q.id;
  n.stop_in0 = stop_p;
  n.needs_grad = (!stop_p && node(p).needs_grad) || node(q).needs_grad;
  return push(std::move(n));
}

Tape::Var Tape::argmax_rows(Var a) {
  const Matrix& av = value(a);
  Node n;
  n.op = Op::ArgmaxRows;
  n.value = Matrix(av.rows(), av.cols());
  for (std::size_t i = 0; i < av.rows(); ++i) {
    auto r = av.row(i);
    if (r.empty()) continue;
    n.value(i, static_cast<std::size_t>(std::max_element(r.begin(), r.end()) - r.begin())) = 1.0;
  }
  n.in0 = a.id;
  n.needs_grad = node(a).needs_grad;
  return push(std::move(n));
}

Matrix& Tape::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty() && !n.value.empty()) n.grad = Matrix(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::accumulate(std::size_t id, const Matrix& g) {
  if (!nodes_[id].needs_grad) return;
  Matrix& buf = grad_buffer(id);
  auto dst = buf.data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void Tape::backward(Var output) {
  const Node& out = node(output);
  if (out.value.rows() != 1 || out.value.cols() != 1) {
    throw DimensionError("backward() needs a 1x1 output, got " + out.value.shape_string());
  }
  for (Node& n : nodes_) n.grad = Matrix();
  grad_buffer(output.id)(0, 0) = 1.0;
  for (std::size_t id = output.id + 1; id-- > 0;) {
    const Node& n = nodes_[id];
    if (!n.needs_grad || n.grad.empty() || n.op == Op::Leaf) continue;
    backprop_node(n);
  }
}

void Tape::backprop_node(const Node& n) {
  const Matrix& g = n.grad;
  switch (n.op) {
    case Op::MatMul: {
      const Matrix& a = nodes_[n.in0].value;
      const Matrix& b = nodes_[n.in1].value;
      if (nodes_[n.in0].needs_grad) accumulate(n.in0, matmul_transposed(g, b));
      if (nodes_[n.in1].needs_grad) accumulate(n.in1, fedidx::matmul(fedidx::transpose(a), g));
      break;
    }
    case Op::AddRowVector: {
      accumulate(n.in0, g);
      if (nodes_[n.in1].needs_grad) {
        Matrix col(1, g.cols());
        for (std::size_t i = 0; i < g.rows(); ++i) {
          for (std::size_t j = 0; j < g.cols(); ++j) col(0, j) += g(i, j);
        }
        accumulate(n.in1, col);
      }
      break;
    }
    case Op::Add:
      accumulate(n.in0, g);
      accumulate(n.in1, g);
      break;
    case Op::Sub: {
      accumulate(n.in0, g);
      if (nodes_[n.in1].needs_grad) {
        Matrix neg = g;
        for (double& v : neg.data()) v = -v;
        accumulate(n.in1, neg);
      }
      break;
    }
    case Op::Scale: {
      Matrix ga = g;
      for (double& v : ga.data()) v *= n.c;
      accumulate(n.in0, ga);
      break;
    }
    case Op::AddScalar:
      accumulate(n.in0, g);
      break;
    case Op::Square: {
      Matrix ga = g;
      auto x = nodes_[n.in0].value.data();
      auto d = ga.data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] *= 2.0 * x[i];
      accumulate(n.in0, ga);
      break;
    }
    case Op::Tanh: {
      Matrix ga = g;
      auto y = n.value.data();
      auto d = ga.data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] *= 1.0 - y[i] * y[i];
      accumulate(n.in0, ga);
      break;
    }
    case Op::Relu: {
      Matrix ga = g;
      auto x = nodes_[n.in0].value.data();
      auto d = ga.data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] = x[i] > 0.0 ? d[i] : 0.0;
      accumulate(n.in0, ga);
      break;
    }
    case Op::ConcatCols: {
      const std::size_t ca = nodes_[n.in0].value.cols();
      const std::size_t cb = nodes_[n.in1].value.cols();
      if (nodes_[n.in0].needs_grad) accumulate(n.in0, fedidx::slice_cols(g, 0, ca));
      if (nodes_[n.in1].needs_grad) accumulate(n.in1, fedidx::slice_cols(g, ca, cb));
      break;
    }
    case Op::SliceCols: {
      const Matrix& a = nodes_[n.in0].value;
      Matrix ga(a.rows(), a.cols());
      for (std::size_t i = 0; i < g.rows(); ++i) {
        for (std::size_t j = 0; j < g.cols(); ++j) ga(i, n.start + j) = g(i, j);
      }
      accumulate(n.in0, ga);
      break;
    }
    case Op::Transpose:
      accumulate(n.in0, fedidx::transpose(g));
      break;
    case Op::RowNormalize: {
      Matrix ga(g.rows(), g.cols());
      for (std::size_t i = 0; i < g.rows(); ++i) {
        const double yg = dot(n.value.row(i), g.row(i));
        const double nr = n.aux(i, 0);
        for (std::size_t j = 0; j < g.cols(); ++j) {
          ga(i, j) = (g(i, j) - n.value(i, j) * yg) / nr;
        }
      }
      accumulate(n.in0, ga);
      break;
    }
    case Op::RowCosine: {
      const Matrix& a = nodes_[n.in0].value;
      const Matrix& b = nodes_[n.in1].value;
      Matrix ga(a.rows(), a.cols());
      Matrix gb(b.rows(), b.cols());
      for (std::size_t i = 0; i < a.rows(); ++i) {
        const double na = n.aux(i, 0);
        const double nb = n.aux(i, 1);
        const double c = n.value(i, 0);
        const double gi = g(i, 0);
        for (std::size_t j = 0; j < a.cols(); ++j) {
          ga(i, j) = gi * (b(i, j) / (na * nb) - c * a(i, j) / (na * na));
          gb(i, j) = gi * (a(i, j) / (na * nb) - c * b(i, j) / (nb * nb));
        }
      }
      accumulate(n.in0, ga);
      accumulate(n.in1, gb);
      break;
    }
    case Op::AbsSum: {
      const Matrix& a = nodes_[n.in0].value;
      Matrix ga(a.rows(), a.cols());
      auto x = a.data();
      auto d = ga.data();
      const double gv = g(0, 0);
      for (std::size_t i = 0; i < d.size(); ++i) {
        d[i] = x[i] > 0.0 ? gv : (x[i] < 0.0 ? -gv : 0.0);
      }
      accumulate(n.in0, ga);
      break;
    }
    case Op::Sum:
    case Op::Mean: {
      const Matrix& a = nodes_[n.in0].value;
      const double gv = n.op == Op::Mean ? g(0, 0) / static_cast<double>(a.size()) : g(0, 0);
      accumulate(n.in0, Matrix(a.rows(), a.cols(), gv));
      break;
    }
    case Op::LogSumExpOffDiag: {
      Matrix ga = n.aux;
      for (std::size_t j = 0; j < ga.rows(); ++j) {
        for (double& v : ga.row(j)) v *= g(j, 0);
      }
      accumulate(n.in0, ga);
      break;
    }
    case Op::SoftmaxCrossEntropy: {
      Matrix ga = n.aux;
      const double scale = g(0, 0) / static_cast<double>(ga.rows());
      for (std::size_t i = 0; i < ga.rows(); ++i) {
        ga(i, static_cast<std::size_t>(n.labels[i])) -= 1.0;
        for (double& v : ga.row(i)) v *= scale;
      }
      accumulate(n.in0, ga);
      break;
    }
    case Op::KlFromLogits: {
      const std::size_t rows = nodes_[n.in0].value.rows();
      const std::size_t c = nodes_[n.in0].value.cols();
      const double scale = g(0, 0) / static_cast<double>(rows);
      if (nodes_[n.in1].needs_grad) {
        Matrix gq(rows, c);
        for (std::size_t i = 0; i < rows; ++i) {
          for (std::size_t j = 0; j < c; ++j) gq(i, j) = scale * (n.aux(i, c + j) - n.aux(i, j));
        }
        accumulate(n.in1, gq);
      }
      if (!n.stop_in0 && nodes_[n.in0].needs_grad) {
        Matrix gp(rows, c);
        for (std::size_t i = 0; i < rows; ++i) {
          const double kl = n.aux(i, 2 * c);
          for (std::size_t j = 0; j < c; ++j) {
            gp(i, j) = scale * n.aux(i, j) * (n.aux(i, 2 * c + 1 + j) - kl);
          }
        }
        accumulate(n.in0, gp);
      }
      break;
    }
    case Op::Leaf:
      break;
    default:
      throw UnsupportedPrimitive(std::string("no gradient rule for primitive '") +
                                 op_name(n.op) + "'");
  }
}

}  // namespace fedidx
