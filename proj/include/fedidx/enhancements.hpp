#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "fedidx/index_gen.hpp"
#include "fedidx/layers.hpp"
#include "fedidx/random.hpp"
#include "fedidx/tape.hpp"

namespace fedidx {

// A participating client's index together with its sample count N_j.
struct WeightedIndex {
  const ClientIndex* index = nullptr;
  double n_samples = 0.0;
};

// S(beta_i, C) = 1/(2 N) * sum_j N_j (cos(bf_i, bf_j) + cos(bl_i, bl_j)), N = sum_j N_j.
double similarity_S(const ClientIndex& beta_i, std::span<const WeightedIndex> selected);

// ---------------------------------------------------------------------------
// similarity-guided client sampling

struct SamplerState {
  std::size_t total_clients = 0;
  double tau = 1.0;
  // (round, selected ids) in increasing round order
  std::vector<std::pair<std::size_t, std::vector<std::uint32_t>>> history;
  std::map<std::uint32_t, std::size_t> last_selected_round;
};

SamplerState make_sampler(std::size_t total_clients, double tau);

struct SamplingResult {
  std::vector<std::uint32_t> selected;  // ascending client id
  // Selection distribution over all clients (in `indices` order) before the
  // first draw; zero for clients in cooldown.
  std::vector<double> probabilities;
  std::size_t cooldown_window = 0;
};

// floor(M / (2K))
std::size_t cooldown_window(std::size_t total_clients, std::size_t k);

// softmax(S / tau) over the given similarity values.
std::vector<double> sampling_probabilities(std::span<const double> similarities, double tau);

// Draws K distinct clients for round t (1-based). Round one, or any round
// with no history, is uniform over eligible clients; later rounds follow
// softmax(S(beta_i, C^{t-1}) / tau) over eligible clients, drawn one at a
// time with renormalisation. `n_samples[k]` is N for indices[k].
SamplingResult sample_clients(SamplerState& state, std::span<const ClientIndex> indices,
                              std::span<const double> n_samples, std::size_t k, std::size_t round,
                              Rng& rng);

// ---------------------------------------------------------------------------
// discounted-similarity aggregation weights

struct AggregatorState {
  double gamma = 0.5;
  double lambda1 = 1.0;
  std::map<std::uint32_t, double> accum;  // A_i = sum_tau gamma^(t-tau) S(beta_i, C^tau)
};

AggregatorState make_aggregator(double gamma, double lambda1);

// A_i <- gamma * A_i + S(beta_i, C^t) for every client in `indices`.
void update_accumulator(AggregatorState& state, std::span<const ClientIndex> indices,
                        std::span<const WeightedIndex> selected);

// p_i proportional to q_i * exp(A_i / lambda1), q_i = N_i / sum N, over the
// selected clients, in the order given.
std::vector<double> aggregation_weights(const AggregatorState& state,
                                        std::span<const WeightedIndex> selected);
std::vector<double> aggregation_weights(std::span<const double> accum,
                                        std::span<const double> n_samples, double lambda1);

struct OracleResult {
  std::vector<double> weights;
  double objective = 0.0;
  double final_change = 0.0;  // objective change at the last iteration
  bool converged = false;
  std::size_t iterations = 0;
};

// Maximises sum_i p_i A_i + lambda1 sum_i p_i log(q_i / p_i) over the
// probability simplex by projected gradient ascent. The first step of every
// iteration is `step`; it is halved while the objective would decrease.
OracleResult oracle_solve_aggregation(std::span<const double> accum, std::span<const double> prior,
                                      double lambda1, std::size_t iterations = 10000,
                                      double step = 1e-2);
// Same, with A built directly from a per-round similarity trace:
// A_i = sum_{tau=1..t} gamma^(t - tau) trace[tau-1][i].
OracleResult oracle_solve_aggregation(const std::vector<std::vector<double>>& similarity_trace,
                                      double gamma, std::span<const double> prior, double lambda1,
                                      std::size_t iterations = 10000, double step = 1e-2);

double aggregation_objective(std::span<const double> p, std::span<const double> accum,
                             std::span<const double> prior, double lambda1);

// Euclidean projection onto the probability simplex.
std::vector<double> project_to_simplex(std::span<const double> v);

// ---------------------------------------------------------------------------
// orthogonality-regularised local training

struct LocalRegOptions {
  double reg_weight = 1.0;
  bool orth_normalized = true;  // divide |z_P B_f|_1 by batch * M
  bool main_is_first = true;    // KL(main || projected) rather than KL(projected || main)
  bool stop_main = true;        // main logits act as a constant target
};

struct LocalRegParams {
  Matrix projection;     // P, d x d_index
  DenseParams proj_head;  // d_index -> C
  Matrix index_matrix;   // B_f, d_index x M, frozen
  LocalRegOptions options;
};

// Stacks every client's beta_f as a column.
Matrix feature_index_matrix(std::span<const ClientIndex> indices);

// reg_weight * (|z P B_f|_1 / (B M) + KL(softmax(main) || softmax(head(z P)))).
Tape::Var local_reg_term(Tape& tape, Tape::Var z, Tape::Var logits_main, Tape::Var projection,
                         const DenseVars& proj_head, const Matrix& index_matrix,
                         const LocalRegOptions& options);

struct LocalRegResult {
  double loss = 0.0;
  Matrix grad_projection;
  Gradients grad_proj_head;  // weight, bias
  Matrix grad_z;
  Matrix grad_logits_main;  // zero when stop_main
};

LocalRegResult local_reg_loss(const Matrix& z, const Matrix& logits_main,
                              const LocalRegParams& params);

}  // namespace fedidx
