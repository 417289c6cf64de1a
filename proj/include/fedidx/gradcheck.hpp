#pragma once

#include <algorithm>
#include <cmath>

#include "fedidx/errors.hpp"
#include "fedidx/optim.hpp"

namespace fedidx {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
};

// Compares the tape gradient of `build` against central differences with
// step h on every scalar parameter. Relative error uses the denominator
// max(|analytic|, |numeric|, 1e-6).
template <class Params, class Build>
GradCheckResult finite_diff_check(const Params& params, Build&& build, double h) {
  if (!(h > 0.0)) throw DomainError("finite_diff_check needs h > 0");
  const ValueAndGrad analytic = value_and_grad(params, build);
  Params probe = params;
  GradCheckResult result;
  std::size_t t = 0;
  visit_tensors(probe, [&](Matrix& m, TensorRole) {
    auto d = m.data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double saved = d[i];
      d[i] = saved + h;
      const double up = loss_value(probe, build);
      d[i] = saved - h;
      const double down = loss_value(probe, build);
      d[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic.grads[t].data()[i];
      // Entries whose true value is zero come out of the difference as
      // roundoff of order eps * |loss| / h; below the floor the error is
      // judged in absolute terms instead.
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
      const double rel = std::abs(a - numeric) / denom;
      if (rel > result.max_rel_error) {
        result.max_rel_error = rel;
        result.worst_tensor = t;
        result.worst_index = i;
      }
    }
    ++t;
  });
  return result;
}

}  // namespace fedidx
