#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "fedidx/matrix.hpp"

namespace fedidx {

// One (image embedding, label embedding, label) triple. Stands in for the
// output of a frozen image/text encoder pair.
struct EmbeddingPair {
  Vector image;      // D, unit norm
  Vector label_emb;  // L, unit norm, shared by all pairs of the same label
  int label = 0;

  bool operator==(const EmbeddingPair&) const = default;
};

struct ClientShard {
  std::uint32_t client_id = 0;
  std::uint32_t domain_id = 0;
  std::vector<EmbeddingPair> pairs;
  Matrix label_table;  // n_classes x d_emb; row y is the label embedding of class y

  std::size_t n_samples() const noexcept { return pairs.size(); }
  std::size_t d_emb() const noexcept { return label_table.cols(); }
  std::size_t n_classes() const noexcept { return label_table.rows(); }
  // The last floor(N/5) samples form the test split; sample order is
  // randomised at generation, so the split is fixed by the shard itself.
  std::size_t n_test() const noexcept { return pairs.size() / 5; }
  std::size_t n_train() const noexcept { return pairs.size() - n_test(); }

  bool operator==(const ClientShard&) const = default;
};

struct SynthesisSpec {
  std::size_t n_classes = 5;
  std::size_t n_domains = 1;
  std::size_t clients_per_domain = 10;
  std::size_t samples_min = 100;
  std::size_t samples_max = 100;
  std::size_t d_emb = 32;
  double label_align = 1.0;
  double domain_strength = 0.5;
  double noise_sigma = 0.2;
  std::optional<double> dirichlet_alpha;  // label shift when set
  std::uint64_t seed = 0;

  std::size_t n_clients() const noexcept { return n_domains * clients_per_domain; }
};

// Throws ConfigError describing the first violated constraint.
void validate(const SynthesisSpec& spec);

// `count` orthonormal vectors in R^d from Gram-Schmidt over seeded Gaussian
// draws. The first k vectors depend only on the first k draws.
std::vector<Vector> orthonormal_set(std::size_t count, std::size_t d, std::uint64_t seed);

std::vector<Vector> synth_label_embeddings(std::size_t n_classes, std::size_t d_emb,
                                           std::uint64_t seed);

// Unit domain directions, orthogonal to each other and to every label embedding.
std::vector<Vector> synth_domain_directions(const SynthesisSpec& spec);

// Per-client class proportions: Dirichlet(alpha) draws when the spec sets
// alpha, uniform otherwise. Indexed by client id. Clients draw in id order
// from one kClassMix stream, each with a fresh Gamma(alpha, 1) distribution.
std::vector<Vector> client_class_proportions(const SynthesisSpec& spec);

// D = normalize(label_align * L_y + domain_strength * e_domain + noise_sigma * eps).
// Client ids run domain-major: clients 0..k-1 belong to domain 0, and so on.
std::vector<ClientShard> synth_client_shards(const SynthesisSpec& spec);

// Per-class Dirichlet(alpha) allocation of sample indices to `n_clients`.
// Each returned index list is sorted ascending; no client is left empty.
std::vector<std::vector<std::size_t>> dirichlet_partition(std::span<const int> labels, double alpha,
                                                          std::size_t n_clients,
                                                          std::uint64_t seed);

// Binary shard file: magic "FIDX", u32 version, u32 n_clients, then per
// client a header, the sample records, and the client's label table. All
// integers and doubles little-endian.
void save_shards(std::span<const ClientShard> shards, const std::filesystem::path& path);
std::vector<ClientShard> load_shards(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_shards(std::span<const ClientShard> shards);
std::vector<ClientShard> decode_shards(std::span<const std::uint8_t> bytes);

// Stacks the image (or label) embeddings of `indices` into a matrix.
Matrix image_matrix(const ClientShard& shard, std::span<const std::size_t> indices);
Matrix label_matrix(const ClientShard& shard, std::span<const std::size_t> indices);
std::vector<int> labels_of(const ClientShard& shard, std::span<const std::size_t> indices);

}  // namespace fedidx
