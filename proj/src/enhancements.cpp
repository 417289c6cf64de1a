#include "fedidx/enhancements.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <string>

#include "fedidx/errors.hpp"
#include "fedidx/numeric.hpp"

namespace fedidx {

double similarity_S(const ClientIndex& beta_i, std::span<const WeightedIndex> selected) {
  if (selected.empty()) throw DomainError("similarity_S needs a nonempty selected set");
  double total = 0.0;
  double acc = 0.0;
  for (const auto& s : selected) {
    if (s.index == nullptr) throw DomainError("similarity_S: null index");
    if (!(s.n_samples > 0.0)) throw DomainError("similarity_S: sample counts must be positive");
    total += s.n_samples;
    acc += s.n_samples * (cosine_sim(beta_i.beta_f, s.index->beta_f) +
                          cosine_sim(beta_i.beta_l, s.index->beta_l));
  }
  return std::clamp(acc / (2.0 * total), -1.0, 1.0);
}

SamplerState make_sampler(std::size_t total_clients, double tau) {
  if (total_clients == 0) throw ConfigError("sampler needs at least one client");
  if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("tau must be finite and > 0");
  SamplerState s;
  s.total_clients = total_clients;
  s.tau = tau;
  return s;
}

std::size_t cooldown_window(std::size_t total_clients, std::size_t k) {
  if (k == 0) throw DomainError("cooldown window needs K > 0");
  return total_clients / (2 * k);
}

std::vector<double> sampling_probabilities(std::span<const double> similarities, double tau) {
  if (!(tau > 0.0)) throw DomainError("tau must be > 0");
  std::vector<double> scaled(similarities.size());
  std::transform(similarities.begin(), similarities.end(), scaled.begin(),
                 [&](double s) { return s / tau; });
  return softmax(scaled);
}

namespace {

std::size_t draw_index(std::span<const double> weights, Rng& rng) {
  double total = 0.0;
  for (double w : weights) total += w;
  double u = std::uniform_real_distribution<double>(0.0, total)(rng);
  std::size_t last_positive = weights.size();
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (weights[i] <= 0.0) continue;
    last_positive = i;
    if (u < weights[i]) return i;
    u -= weights[i];
  }
  return last_positive;  // rounding fell off the end
}

}  // namespace

SamplingResult sample_clients(SamplerState& state, std::span<const ClientIndex> indices,
                              std::span<const double> n_samples, std::size_t k, std::size_t round,
                              Rng& rng) {
  if (indices.size() != state.total_clients) {
    throw DimensionError("sampler built for " + std::to_string(state.total_clients) +
                         " clients, got " + std::to_string(indices.size()) + " indices");
  }
  if (n_samples.size() != indices.size()) {
    throw DimensionError("sample_clients: need one sample count per index");
  }
  if (k == 0) throw DomainError("sample_clients: K must be positive");
  if (!state.history.empty() && round <= state.history.back().first) {
    throw DomainError("sample_clients: rounds must be strictly increasing");
  }

  SamplingResult out;
  out.cooldown_window = cooldown_window(state.total_clients, k);

  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    auto it = state.last_selected_round.find(indices[i].client_id);
    if (it == state.last_selected_round.end() || round - it->second >= out.cooldown_window) {
      eligible.push_back(i);
    }
  }
  if (eligible.size() < k) {
    throw DomainError("only " + std::to_string(eligible.size()) + " clients eligible in round " +
                      std::to_string(round) + ", need " + std::to_string(k) +
                      " (cooldown window " + std::to_string(out.cooldown_window) + " rounds)");
  }

  std::vector<double> p;
  if (state.history.empty()) {
    p.assign(eligible.size(), 1.0 / static_cast<double>(eligible.size()));
  } else {
    std::vector<WeightedIndex> prev;
    for (std::uint32_t id : state.history.back().second) {
      for (std::size_t j = 0; j < indices.size(); ++j) {
        if (indices[j].client_id == id) prev.push_back({&indices[j], n_samples[j]});
      }
    }
    std::vector<double> s(eligible.size());
    for (std::size_t e = 0; e < eligible.size(); ++e) s[e] = similarity_S(indices[eligible[e]], prev);
    p = sampling_probabilities(s, state.tau);
  }

  out.probabilities.assign(indices.size(), 0.0);
  for (std::size_t e = 0; e < eligible.size(); ++e) out.probabilities[eligible[e]] = p[e];

  std::vector<double> remaining = p;
  for (std::size_t draw = 0; draw < k; ++draw) {
    std::size_t e = draw_index(remaining, rng);
    remaining[e] = 0.0;
    out.selected.push_back(indices[eligible[e]].client_id);
  }
  std::sort(out.selected.begin(), out.selected.end());

  for (std::uint32_t id : out.selected) state.last_selected_round[id] = round;
  state.history.emplace_back(round, out.selected);
  return out;
}

AggregatorState make_aggregator(double gamma, double lambda1) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("gamma must be in [0, 1]");
  if (!(lambda1 > 0.0) || !std::isfinite(lambda1)) {
    throw ConfigError("lambda1 must be finite and > 0");
  }
  AggregatorState s;
  s.gamma = gamma;
  s.lambda1 = lambda1;
  return s;
}

void update_accumulator(AggregatorState& state, std::span<const ClientIndex> indices,
                        std::span<const WeightedIndex> selected) {
  for (const auto& idx : indices) {
    double& a = state.accum[idx.client_id];
    a = state.gamma * a + similarity_S(idx, selected);
  }
}

std::vector<double> aggregation_weights(std::span<const double> accum,
                                        std::span<const double> n_samples, double lambda1) {
  if (accum.size() != n_samples.size()) {
    throw DimensionError("aggregation_weights: accumulator and sample counts differ in length");
  }
  if (accum.empty()) throw DomainError("aggregation_weights: empty participant set");
  if (!(lambda1 > 0.0)) throw DomainError("lambda1 must be > 0");
  double total = 0.0;
  for (double n : n_samples) {
    if (!(n > 0.0)) throw DomainError("aggregation_weights: sample counts must be positive");
    total += n;
  }
  double max_a = *std::max_element(accum.begin(), accum.end());
  std::vector<double> w(accum.size());
  double z = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i] = (n_samples[i] / total) * std::exp((accum[i] - max_a) / lambda1);
    z += w[i];
  }
  for (double& v : w) v /= z;
  return w;
}

std::vector<double> aggregation_weights(const AggregatorState& state,
                                        std::span<const WeightedIndex> selected) {
  std::vector<double> a;
  std::vector<double> n;
  for (const auto& s : selected) {
    auto it = state.accum.find(s.index->client_id);
    a.push_back(it == state.accum.end() ? 0.0 : it->second);
    n.push_back(s.n_samples);
  }
  return aggregation_weights(a, n, state.lambda1);
}

std::vector<double> project_to_simplex(std::span<const double> v) {
  if (v.empty()) throw DomainError("project_to_simplex: empty vector");
  std::vector<double> u(v.begin(), v.end());
  std::sort(u.begin(), u.end(), std::greater<>());
  double cumsum = 0.0;
  double theta = 0.0;
  for (std::size_t j = 0; j < u.size(); ++j) {
    cumsum += u[j];
    double t = (cumsum - 1.0) / static_cast<double>(j + 1);
    if (u[j] - t > 0.0) theta = t;
  }
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = std::max(v[i] - theta, 0.0);
  return out;
}

double aggregation_objective(std::span<const double> p, std::span<const double> accum,
                             std::span<const double> prior, double lambda1) {
  double f = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    f += p[i] * accum[i];
    if (p[i] > 0.0) f += lambda1 * p[i] * std::log(prior[i] / p[i]);
  }
  return f;
}

OracleResult oracle_solve_aggregation(std::span<const double> accum, std::span<const double> prior,
                                      double lambda1, std::size_t iterations, double step) {
  const std::size_t n = accum.size();
  if (n == 0 || prior.size() != n) throw DimensionError("oracle: A and q must match and be nonempty");
  if (!(lambda1 > 0.0)) throw DomainError("lambda1 must be > 0");
  for (double q : prior) {
    if (!(q > 0.0)) throw DomainError("oracle: prior must be positive");
  }

  OracleResult r;
  std::vector<double> p(n, 1.0 / static_cast<double>(n));
  double f = aggregation_objective(p, accum, prior, lambda1);
  std::vector<double> g(n);
  std::vector<double> trial(n);
  constexpr double kFloor = 1e-300;
  for (std::size_t it = 0; it < iterations; ++it) {
    for (std::size_t i = 0; i < n; ++i) {
      g[i] = accum[i] + lambda1 * (std::log(prior[i]) - std::log(std::max(p[i], kFloor)) - 1.0);
    }
    double eta = step;
    std::vector<double> next;
    double f_next = f;
    for (int halvings = 0; halvings < 60; ++halvings, eta *= 0.5) {
      for (std::size_t i = 0; i < n; ++i) trial[i] = p[i] + eta * g[i];
      next = project_to_simplex(trial);
      f_next = aggregation_objective(next, accum, prior, lambda1);
      if (f_next >= f) break;
    }
    r.iterations = it + 1;
    if (f_next < f) {  // no ascent step exists at machine precision
      r.final_change = 0.0;
      break;
    }
    r.final_change = f_next - f;
    p = std::move(next);
    f = f_next;
  }
  r.weights = p;
  r.objective = f;
  r.converged = r.final_change <= 1e-10;
  return r;
}

OracleResult oracle_solve_aggregation(const std::vector<std::vector<double>>& similarity_trace,
                                      double gamma, std::span<const double> prior, double lambda1,
                                      std::size_t iterations, double step) {
  if (similarity_trace.empty()) throw DomainError("oracle: empty similarity trace");
  const std::size_t t = similarity_trace.size();
  std::vector<double> accum(prior.size(), 0.0);
  for (std::size_t i = 0; i < accum.size(); ++i) {
    for (std::size_t tau = 1; tau <= t; ++tau) {
      const auto& row = similarity_trace[tau - 1];
      if (row.size() != accum.size()) throw DimensionError("oracle: ragged similarity trace");
      accum[i] += std::pow(gamma, static_cast<double>(t - tau)) * row[i];
    }
  }
  return oracle_solve_aggregation(accum, prior, lambda1, iterations, step);
}

Matrix feature_index_matrix(std::span<const ClientIndex> indices) {
  if (indices.empty()) throw DomainError("feature_index_matrix: no indices");
  const std::size_t d = indices.front().beta_f.size();
  Matrix b(d, indices.size());
  for (std::size_t j = 0; j < indices.size(); ++j) {
    if (indices[j].beta_f.size() != d) throw DimensionError("feature indices differ in length");
    for (std::size_t r = 0; r < d; ++r) b(r, j) = indices[j].beta_f[r];
  }
  return b;
}

Tape::Var local_reg_term(Tape& tape, Tape::Var z, Tape::Var logits_main, Tape::Var projection,
                         const DenseVars& proj_head, const Matrix& index_matrix,
                         const LocalRegOptions& options) {
  const Matrix& zv = tape.value(z);
  const Matrix& pv = tape.value(projection);
  if (zv.cols() != pv.rows()) {
    throw DimensionError("local reg: z has " + std::to_string(zv.cols()) +
                         " columns but P has " + std::to_string(pv.rows()) + " rows");
  }
  if (pv.cols() != index_matrix.rows()) {
    throw DimensionError("local reg: P maps to " + std::to_string(pv.cols()) +
                         " dims but B_f has " + std::to_string(index_matrix.rows()) + " rows");
  }
  const double batch = static_cast<double>(zv.rows());
  const double m = static_cast<double>(index_matrix.cols());

  Tape::Var zp = tape.matmul(z, projection);
  Tape::Var proj_logits = dense_forward(tape, proj_head, zp);
  Tape::Var orth = tape.abs_sum(tape.matmul(zp, tape.constant(index_matrix)));
  if (options.orth_normalized) orth = tape.scale(orth, 1.0 / (batch * m));

  Tape::Var main = options.stop_main ? tape.constant(tape.value(logits_main)) : logits_main;
  Tape::Var dist = options.main_is_first ? tape.kl_from_logits(main, proj_logits, false)
                                         : tape.kl_from_logits(proj_logits, main, false);
  return tape.scale(tape.add(orth, dist), options.reg_weight);
}

LocalRegResult local_reg_loss(const Matrix& z, const Matrix& logits_main,
                              const LocalRegParams& params) {
  if (params.options.reg_weight < 0.0) throw DomainError("reg_weight must be >= 0");
  if (logits_main.rows() != z.rows()) {
    throw DimensionError("local reg: z and main logits have different batch sizes");
  }
  Tape tape;
  Tape::Var zv = tape.param(z);
  Tape::Var lm = tape.param(logits_main);
  Tape::Var pv = tape.param(params.projection);
  DenseVars head{tape.param(params.proj_head.weight), tape.param(params.proj_head.bias)};
  Tape::Var loss =
      local_reg_term(tape, zv, lm, pv, head, params.index_matrix, params.options);
  tape.backward(loss);
  LocalRegResult r;
  r.loss = tape.scalar(loss);
  r.grad_projection = tape.grad(pv);
  r.grad_proj_head = {tape.grad(head.weight), tape.grad(head.bias)};
  r.grad_z = tape.grad(zv);
  r.grad_logits_main = tape.grad(lm);
  return r;
}

}  // namespace fedidx
