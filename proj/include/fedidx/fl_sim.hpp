#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedidx/embeddings.hpp"
#include "fedidx/enhancements.hpp"
#include "fedidx/index_gen.hpp"
#include "fedidx/layers.hpp"

namespace fedidx {

// Trainable projection of z used by the local regulariser: z_P = z P and
// its own classifier head.
struct ProjectionBranch {
  Matrix projection;  // d x d_index
  DenseParams head;   // d_index -> C

  bool operator==(const ProjectionBranch&) const = default;
};

struct GlobalModel {
  MlpParams backbone;  // d_emb -> d, output is the penultimate feature z
  DenseParams head;    // d -> C
  std::optional<ProjectionBranch> branch;

  std::size_t feature_dim() const { return backbone.out_dim(); }
  std::size_t n_classes() const { return head.out_dim(); }
  bool operator==(const GlobalModel&) const = default;
};

template <class Self, class F>
  requires std::same_as<std::remove_const_t<Self>, GlobalModel>
void visit_tensors(Self& m, F&& f) {
  visit_tensors(m.backbone, f);
  visit_tensors(m.head, f);
  if (m.branch) {
    f(m.branch->projection, TensorRole::Weight);
    visit_tensors(m.branch->head, f);
  }
}

struct ModelArch {
  std::size_t d_emb = 32;
  std::size_t hidden = 64;
  std::size_t n_classes = 5;
  Activation activation = Activation::Tanh;
  std::size_t projection_dim = 0;  // 0: no projection branch
};

GlobalModel init_global_model(const ModelArch& arch, Rng& rng);

Matrix features(const GlobalModel& model, const Matrix& x);
Matrix logits(const GlobalModel& model, const Matrix& x);
std::vector<int> predict(const GlobalModel& model, const Matrix& x);

enum class ServerAlgorithm { FedAvg, FedAvgM };
std::string to_string(ServerAlgorithm a);
ServerAlgorithm server_algorithm_from_string(const std::string& s);

struct EnhancementConfig {
  bool sampling = false;
  double tau = 1.0;
  bool aggregation = false;
  double gamma = 0.5;
  double lambda1 = 1.0;
  bool local_reg = false;
  LocalRegOptions reg;
};

struct FlConfig {
  std::size_t rounds = 100;
  double fraction = 0.1;
  std::size_t local_epochs = 5;
  double learning_rate = 1e-2;
  double momentum = 0.9;
  double weight_decay = 5e-5;
  ServerAlgorithm algorithm = ServerAlgorithm::FedAvg;
  double server_momentum = 0.5;
  std::size_t batch_size = 32;
  std::size_t hidden = 64;
  std::size_t threads = 1;  // clients trained concurrently within a round
  std::uint64_t seed = 0;
  EnhancementConfig enhancements;
};

void validate(const FlConfig& config);

// ceil(fraction * M), at least one.
std::size_t clients_per_round(double fraction, std::size_t total_clients);

struct ClientUpdate {
  std::uint32_t client_id = 0;
  GlobalModel params;
  std::size_t n_samples = 0;
  double train_loss = 0.0;
};

// Frozen pieces of the local regulariser.
struct LocalRegHook {
  Matrix index_matrix;  // B_f, d_index x M
  LocalRegOptions options;
};

// Mean cross-entropy (plus the regulariser when `reg` is given) over a batch.
ValueAndGrad local_loss_grad(const GlobalModel& model, const Matrix& x,
                             std::span<const int> labels, const LocalRegHook* reg);

// Minibatch SGD with fresh momentum over the shard's training split.
// train_loss is the mean minibatch loss of the last epoch, or the full
// training-split loss when no epochs run.
ClientUpdate local_train(const GlobalModel& model, const ClientShard& shard,
                         const FlConfig& config, const LocalRegHook* reg, Rng& rng);

// Weighted parameter mean. Updates are summed in ascending client id order.
GlobalModel aggregate(std::span<const ClientUpdate> updates, std::span<const double> weights);

GlobalModel server_step_fedavg(const GlobalModel& prev, const GlobalModel& aggregated);

struct ServerStep {
  GlobalModel model;
  std::vector<Matrix> buffer;
};
// delta = prev - aggregated; buffer <- momentum * buffer + delta;
// new = prev - buffer. An empty buffer counts as zero.
ServerStep server_step_fedavgm(const GlobalModel& prev, const GlobalModel& aggregated,
                               std::vector<Matrix> buffer, double server_momentum);

struct ClientAccuracy {
  std::uint32_t client_id = 0;
  double accuracy = 0.0;
};

struct EvalResult {
  double mean_accuracy = 0.0;  // unweighted over evaluated clients
  std::vector<ClientAccuracy> per_client;
  std::vector<std::uint32_t> excluded;  // clients with an empty test split
};

EvalResult evaluate(const GlobalModel& model, std::span<const ClientShard> shards);

struct RoundLog {
  std::size_t round = 0;
  std::vector<std::uint32_t> selected;  // ascending
  std::vector<double> probs;            // selection probability of each selected client
  std::vector<double> agg_weights;
  double mean_accuracy = 0.0;
  std::vector<ClientAccuracy> per_client;
  std::vector<std::uint32_t> excluded;
  double mean_train_loss = 0.0;
};

struct ExperimentResult {
  std::vector<RoundLog> rounds;
  std::size_t best_round = 0;
  double best_mean_accuracy = 0.0;
  double final_mean_accuracy = 0.0;
  GlobalModel final_model;
};

// Enhancements need one index per shard, matched by client id.
ExperimentResult run_experiment(std::span<const ClientShard> shards,
                                std::span<const ClientIndex> indices, const FlConfig& config);

// round,client_ids,probs,agg_weights,mean_acc with ';' separated lists.
std::string round_log_csv(std::span<const RoundLog> logs);

}  // namespace fedidx
