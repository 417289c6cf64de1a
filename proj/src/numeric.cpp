#include "fedidx/numeric.hpp"

#include <algorithm>
#include <cmath>

#include "fedidx/errors.hpp"

namespace fedidx {

namespace {

Vector log_softmax(std::span<const double> v) {
  if (v.empty()) return {};
  const double mx = *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += std::exp(x - mx);
  const double lse = mx + std::log(s);
  Vector out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] - lse;
  return out;
}

}  // namespace

double cosine_sim(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("cosine_sim of unequal lengths");
  const double na = norm2(a);
  const double nb = norm2(b);
  if (!(na > 0.0) || !(nb > 0.0)) throw DomainError("cosine_sim of a zero-norm vector");
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

Vector softmax(std::span<const double> v) {
  if (v.empty()) return {};
  const double mx = *std::max_element(v.begin(), v.end());
  Vector out(v.size());
  double s = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - mx);
    s += out[i];
  }
  for (double& x : out) x /= s;
  return out;
}

double kl_from_logits(std::span<const double> p_logits, std::span<const double> q_logits) {
  if (p_logits.size() != q_logits.size()) throw DimensionError("kl_from_logits length mismatch");
  const Vector lp = log_softmax(p_logits);
  const Vector lq = log_softmax(q_logits);
  double kl = 0.0;
  for (std::size_t i = 0; i < lp.size(); ++i) kl += std::exp(lp[i]) * (lp[i] - lq[i]);
  return std::max(kl, 0.0);
}

Vector normalized(std::span<const double> v) {
  const double n = norm2(v);
  if (!(n > 0.0)) throw DomainError("cannot normalize a zero-norm vector");
  Vector out(v.begin(), v.end());
  for (double& x : out) x /= n;
  return out;
}

}  // namespace fedidx
