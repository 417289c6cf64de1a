#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "fedidx/embeddings.hpp"
#include "fedidx/layers.hpp"
#include "fedidx/optim.hpp"
#include "fedidx/tape.hpp"

namespace fedidx {

enum class IndexStrategy { Global, Federated };
enum class DecoderKind { Linear, Mlp };
enum class IndexPart { Feature, Label, Full };

std::string to_string(IndexStrategy s);
IndexStrategy index_strategy_from_string(const std::string& s);
std::string to_string(DecoderKind d);
DecoderKind decoder_kind_from_string(const std::string& s);
std::string to_string(IndexPart p);
IndexPart index_part_from_string(const std::string& s);

// Decomposition block maps [D, D] (2*d_emb) to [z, u_f] (2*d_index); the
// reconstruction head maps [z, u_f] back to d_emb.
struct DsaIgnParams {
  MlpParams decomposition;
  MlpParams reconstruction;

  std::size_t d_emb() const { return reconstruction.out_dim(); }
  std::size_t d_index() const { return decomposition.out_dim() / 2; }
  bool operator==(const DsaIgnParams&) const = default;
};

template <class Self, class F>
  requires std::same_as<std::remove_const_t<Self>, DsaIgnParams>
void visit_tensors(Self& p, F&& f) {
  visit_tensors(p.decomposition, f);
  visit_tensors(p.reconstruction, f);
}

struct DsaIgnArch {
  std::size_t d_emb = 32;
  std::size_t d_index = 0;  // 0 means d_emb
  std::size_t decomposition_layers = 3;
  Activation hidden_activation = Activation::Tanh;
  DecoderKind decoder = DecoderKind::Linear;
};

DsaIgnParams init_dsa_ign(const DsaIgnArch& arch, Rng& rng);

struct SampleIndexBatch {
  Matrix Z;  // data encodings, B x d_index
  Matrix U;  // sample feature indices, B x d_index
};

struct ClientIndex {
  std::uint32_t client_id = 0;
  std::uint32_t domain_id = 0;
  Vector beta_f;
  Vector beta_l;

  bool operator==(const ClientIndex&) const = default;
};

struct LossWeights {
  double sim = 1.0;
  double orth = 1.0;
  double recon = 1.0;
  double div = 1.0;
};

struct IndexGenConfig {
  DsaIgnArch arch;
  LossWeights weights;
  bool orth_normalized = true;  // divide |Z U^T|_1 by B^2
  IndexStrategy strategy = IndexStrategy::Global;
  std::size_t epochs = 200;
  std::size_t batch_size = 128;  // Global: per-client upload and minibatch size
  std::size_t local_batch_size = 32;  // Federated: client minibatch size
  double learning_rate = 1e-2;
  double momentum = 0.9;
  double weight_decay = 2e-2;
  std::size_t rounds = 100;
  double fraction = 0.1;
  std::size_t local_epochs = 10;
  std::uint64_t seed = 0;
};

void validate(const IndexGenConfig& config);

SampleIndexBatch decompose(const DsaIgnParams& params, const Matrix& images);
Matrix reconstruct(const DsaIgnParams& params, const SampleIndexBatch& batch);

double loss_sim(const Matrix& Z, const Matrix& labels);
double loss_orth(const Matrix& Z, const Matrix& U, bool normalized = true);
double loss_recon(const Matrix& reconstructed, const Matrix& images);
// Throws DomainError for fewer than two rows.
double loss_div(const Matrix& U);

double total_loss(const DsaIgnParams& params, const Matrix& images, const Matrix& labels,
                  const IndexGenConfig& config);
ValueAndGrad total_loss_grad(const DsaIgnParams& params, const Matrix& images,
                             const Matrix& labels, const IndexGenConfig& config);

// Tape-level pieces, shared by the scalar losses and by training.
struct DsaIgnVars {
  MlpVars decomposition;
  MlpVars reconstruction;
};
DsaIgnVars dsa_ign_vars(const DsaIgnParams& p, std::span<const Tape::Var> leaves,
                        std::size_t& cursor);
Tape::Var loss_sim(Tape& tape, Tape::Var Z, Tape::Var labels);
Tape::Var loss_orth(Tape& tape, Tape::Var Z, Tape::Var U, bool normalized);
Tape::Var loss_recon(Tape& tape, Tape::Var reconstructed, Tape::Var images);
Tape::Var loss_div(Tape& tape, Tape::Var U);
// Weighted objective. The diversity term needs two or more rows and is
// skipped for single-sample batches.
Tape::Var total_loss(Tape& tape, const DsaIgnVars& vars, Tape::Var images, Tape::Var labels,
                     const IndexGenConfig& config);

struct IndexTrainTrace {
  std::vector<double> epoch_loss;  // mean minibatch loss per epoch (Global) or round (Federated)
  std::size_t sgd_steps = 0;
};

DsaIgnParams train_global(std::span<const ClientShard> shards, const IndexGenConfig& config,
                          IndexTrainTrace* trace = nullptr);
DsaIgnParams train_federated(std::span<const ClientShard> shards, const IndexGenConfig& config,
                             IndexTrainTrace* trace = nullptr);
// Dispatches on config.strategy.
DsaIgnParams train_index(std::span<const ClientShard> shards, const IndexGenConfig& config,
                         IndexTrainTrace* trace = nullptr);

// The samples each client contributes to the Global pool: min(batch, N_i)
// indices drawn without replacement.
std::vector<std::size_t> pool_indices(const ClientShard& shard, std::size_t batch_size,
                                      std::uint64_t seed);

// Minibatch SGD over (images, labels) for `epochs`, reshuffling every epoch.
// A trailing batch of one sample is merged into the previous batch.
// Returns the mean minibatch loss of the last epoch.
double sgd_epochs(DsaIgnParams& params, const Matrix& images, const Matrix& labels,
                  const IndexGenConfig& config, std::size_t epochs, Rng& shuffle_rng,
                  SgdState& opt, IndexTrainTrace* trace);

ClientIndex compute_client_index(const DsaIgnParams& params, const ClientShard& shard);
std::vector<ClientIndex> compute_client_indices(const DsaIgnParams& params,
                                                std::span<const ClientShard> shards);

Matrix index_similarity_matrix(std::span<const ClientIndex> indices, IndexPart part);

// Mean of cos(u_j, u_k) over all j < k.
double mean_pairwise_cosine(const Matrix& U);

// Binary params file: magic "DSAI", u32 version, then both networks as
// u32 n_layers followed by (u32 in, u32 out, u32 activation, weights, bias).
void save_dsa_ign(const DsaIgnParams& params, const std::filesystem::path& path);
DsaIgnParams load_dsa_ign(const std::filesystem::path& path);

// CSV with header client_id,domain_id,part,dim_0..dim_{d-1}; two rows per
// client (part f, then part l).
void write_index_csv(std::span<const ClientIndex> indices, const std::filesystem::path& path);
std::vector<ClientIndex> read_index_csv(const std::filesystem::path& path);
std::string index_csv_string(std::span<const ClientIndex> indices);
std::vector<ClientIndex> parse_index_csv(const std::string& text);

// Similarity matrix as CSV with client ids as header row and first column.
std::string similarity_csv_string(std::span<const ClientIndex> indices, const Matrix& sim);

// Shortest round-trip formatting of a double.
std::string format_double(double v);

}  // namespace fedidx
