#include "fedidx/embeddings.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "binary_io.hpp"
#include "fedidx/errors.hpp"
#include "fedidx/numeric.hpp"
#include "fedidx/random.hpp"

namespace fedidx {

namespace {

constexpr std::uint32_t kShardVersion = 1;

Vector dirichlet(double alpha, std::size_t k, Rng& rng) {
  std::gamma_distribution<double> gamma(alpha, 1.0);
  Vector p(k);
  double s = 0.0;
  for (double& x : p) {
    x = gamma(rng);
    s += x;
  }
  if (!(s > 0.0)) {
    // Every gamma draw underflowed; fall back to uniform.
    std::fill(p.begin(), p.end(), 1.0 / static_cast<double>(k));
    return p;
  }
  for (double& x : p) x /= s;
  return p;
}

// Splits `idx` into consecutive chunks whose sizes follow the cumulative
// proportions.
std::vector<std::vector<std::size_t>> split_by_proportions(const std::vector<std::size_t>& idx,
                                                           const Vector& props) {
  std::vector<std::vector<std::size_t>> out(props.size());
  const double n = static_cast<double>(idx.size());
  double cum = 0.0;
  std::size_t begin = 0;
  for (std::size_t c = 0; c < props.size(); ++c) {
    cum += props[c];
    std::size_t end = c + 1 == props.size()
                          ? idx.size()
                          : std::min(idx.size(), static_cast<std::size_t>(std::floor(cum * n)));
    end = std::max(end, begin);
    out[c].assign(idx.begin() + static_cast<std::ptrdiff_t>(begin),
                  idx.begin() + static_cast<std::ptrdiff_t>(end));
    begin = end;
  }
  return out;
}

}  // namespace

void validate(const SynthesisSpec& spec) {
  if (spec.n_classes < 1) throw ConfigError("n_classes must be >= 1");
  if (spec.n_domains < 1) throw ConfigError("n_domains must be >= 1");
  if (spec.clients_per_domain < 1) throw ConfigError("clients_per_domain must be >= 1");
  if (spec.samples_min < 1) throw ConfigError("samples_min must be >= 1");
  if (spec.samples_max < spec.samples_min) throw ConfigError("samples_max must be >= samples_min");
  if (spec.d_emb < spec.n_classes + spec.n_domains) {
    throw ConfigError("d_emb (" + std::to_string(spec.d_emb) + ") must be >= n_classes + n_domains (" +
                      std::to_string(spec.n_classes + spec.n_domains) + ")");
  }
  if (!(spec.label_align >= 0.0 && spec.label_align <= 1.0)) {
    throw ConfigError("label_align must be in [0, 1]");
  }
  if (!(spec.domain_strength >= 0.0)) throw ConfigError("domain_strength must be >= 0");
  if (!(spec.noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be >= 0");
  if (spec.dirichlet_alpha && !(*spec.dirichlet_alpha > 0.0)) {
    throw ConfigError("dirichlet_alpha must be > 0");
  }
  if (spec.label_align == 0.0 && spec.domain_strength == 0.0 && spec.noise_sigma == 0.0) {
    throw ConfigError("label_align, domain_strength and noise_sigma are all zero");
  }
}

std::vector<Vector> orthonormal_set(std::size_t count, std::size_t d, std::uint64_t seed) {
  if (count > d) {
    throw DomainError("cannot build " + std::to_string(count) + " orthonormal vectors in R^" +
                      std::to_string(d));
  }
  Rng rng = make_rng(seed, {stream::kLabelEmbeddings});
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<Vector> basis;
  basis.reserve(count);
  while (basis.size() < count) {
    Vector v(d);
    for (double& x : v) x = gauss(rng);
    // Two passes of modified Gram-Schmidt keep |cos| near machine precision.
    for (int pass = 0; pass < 2; ++pass) {
      for (const Vector& b : basis) {
        const double proj = dot(v, b);
        for (std::size_t i = 0; i < d; ++i) v[i] -= proj * b[i];
      }
    }
    const double n = norm2(v);
    if (n < 1e-6) continue;
    for (double& x : v) x /= n;
    basis.push_back(std::move(v));
  }
  return basis;
}

std::vector<Vector> synth_label_embeddings(std::size_t n_classes, std::size_t d_emb,
                                           std::uint64_t seed) {
  if (n_classes > d_emb) {
    throw DomainError("n_classes (" + std::to_string(n_classes) + ") exceeds d_emb (" +
                      std::to_string(d_emb) + ")");
  }
  return orthonormal_set(n_classes, d_emb, seed);
}

std::vector<Vector> synth_domain_directions(const SynthesisSpec& spec) {
  validate(spec);
  std::vector<Vector> all = orthonormal_set(spec.n_classes + spec.n_domains, spec.d_emb, spec.seed);
  return {all.begin() + static_cast<std::ptrdiff_t>(spec.n_classes), all.end()};
}

std::vector<Vector> client_class_proportions(const SynthesisSpec& spec) {
  validate(spec);
  const std::size_t m = spec.n_clients();
  std::vector<Vector> props;
  props.reserve(m);
  if (!spec.dirichlet_alpha) {
    props.assign(m, Vector(spec.n_classes, 1.0 / static_cast<double>(spec.n_classes)));
    return props;
  }
  Rng rng = make_rng(spec.seed, {stream::kClassMix});
  for (std::size_t i = 0; i < m; ++i) props.push_back(dirichlet(*spec.dirichlet_alpha, spec.n_classes, rng));
  return props;
}

std::vector<ClientShard> synth_client_shards(const SynthesisSpec& spec) {
  validate(spec);
  const std::vector<Vector> basis =
      orthonormal_set(spec.n_classes + spec.n_domains, spec.d_emb, spec.seed);
  const std::vector<Vector> proportions = client_class_proportions(spec);

  Matrix table(spec.n_classes, spec.d_emb);
  for (std::size_t c = 0; c < spec.n_classes; ++c) {
    std::copy(basis[c].begin(), basis[c].end(), table.row(c).begin());
  }

  std::vector<ClientShard> shards;
  shards.reserve(spec.n_clients());
  for (std::size_t dom = 0; dom < spec.n_domains; ++dom) {
    const Vector& e_dom = basis[spec.n_classes + dom];
    for (std::size_t k = 0; k < spec.clients_per_domain; ++k) {
      const std::size_t id = dom * spec.clients_per_domain + k;
      Rng rng = make_rng(spec.seed, {stream::kSamples, id});
      std::uniform_int_distribution<std::size_t> count(spec.samples_min, spec.samples_max);
      std::discrete_distribution<int> label_dist(proportions[id].begin(), proportions[id].end());
      std::normal_distribution<double> gauss(0.0, 1.0);

      ClientShard shard;
      shard.client_id = static_cast<std::uint32_t>(id);
      shard.domain_id = static_cast<std::uint32_t>(dom);
      shard.label_table = table;
      const std::size_t n = count(rng);
      shard.pairs.reserve(n);
      for (std::size_t j = 0; j < n; ++j) {
        EmbeddingPair p;
        p.label = label_dist(rng);
        const Vector& l = basis[static_cast<std::size_t>(p.label)];
        Vector d(spec.d_emb);
        for (std::size_t t = 0; t < spec.d_emb; ++t) {
          d[t] = spec.label_align * l[t] + spec.domain_strength * e_dom[t];
        }
        if (spec.noise_sigma > 0.0) {
          for (std::size_t t = 0; t < spec.d_emb; ++t) d[t] += spec.noise_sigma * gauss(rng);
        }
        p.image = normalized(d);
        p.label_emb = l;
        shard.pairs.push_back(std::move(p));
      }
      shards.push_back(std::move(shard));
    }
  }
  return shards;
}

std::vector<std::vector<std::size_t>> dirichlet_partition(std::span<const int> labels, double alpha,
                                                          std::size_t n_clients,
                                                          std::uint64_t seed) {
  if (!(alpha > 0.0)) throw DomainError("dirichlet_partition needs alpha > 0");
  if (n_clients < 1) throw DomainError("dirichlet_partition needs at least one client");
  if (labels.size() < n_clients) {
    throw DomainError("dirichlet_partition: " + std::to_string(labels.size()) +
                      " samples cannot fill " + std::to_string(n_clients) + " clients");
  }
  std::vector<int> classes(labels.begin(), labels.end());
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());

  Rng rng = make_rng(seed, {stream::kPartition});
  // per class: shuffled member indices and their current split across clients
  std::vector<std::vector<std::size_t>> members(classes.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto c = static_cast<std::size_t>(
        std::lower_bound(classes.begin(), classes.end(), labels[i]) - classes.begin());
    members[c].push_back(i);
  }
  std::vector<std::vector<std::vector<std::size_t>>> split(classes.size());
  for (std::size_t c = 0; c < classes.size(); ++c) {
    std::shuffle(members[c].begin(), members[c].end(), rng);
    split[c] = split_by_proportions(members[c], dirichlet(alpha, n_clients, rng));
  }

  auto client_sizes = [&] {
    std::vector<std::size_t> sizes(n_clients, 0);
    for (const auto& per_class : split) {
      for (std::size_t k = 0; k < n_clients; ++k) sizes[k] += per_class[k].size();
    }
    return sizes;
  };
  auto has_empty = [&] {
    const auto sizes = client_sizes();
    return std::find(sizes.begin(), sizes.end(), 0) != sizes.end();
  };

  // Redraw class proportion vectors in round-robin order, up to 100 times.
  for (std::size_t attempt = 0; attempt < 100 && has_empty(); ++attempt) {
    const std::size_t c = attempt % classes.size();
    split[c] = split_by_proportions(members[c], dirichlet(alpha, n_clients, rng));
  }

  std::vector<std::vector<std::size_t>> out(n_clients);
  for (const auto& per_class : split) {
    for (std::size_t k = 0; k < n_clients; ++k) {
      out[k].insert(out[k].end(), per_class[k].begin(), per_class[k].end());
    }
  }
  // Still empty: move one sample from the currently largest client.
  for (std::size_t k = 0; k < n_clients; ++k) {
    if (!out[k].empty()) continue;
    auto largest = std::max_element(out.begin(), out.end(),
                                     [](const auto& a, const auto& b) { return a.size() < b.size(); });
    out[k].push_back(largest->back());
    largest->pop_back();
  }
  for (auto& v : out) std::sort(v.begin(), v.end());
  return out;
}

std::vector<std::uint8_t> encode_shards(std::span<const ClientShard> shards) {
  detail::ByteWriter w;
  w.raw("FIDX", 4);
  w.u32(kShardVersion);
  w.u32(static_cast<std::uint32_t>(shards.size()));
  for (const ClientShard& s : shards) {
    const std::size_t d = s.d_emb();
    if (s.pairs.empty()) {
      throw DomainError("client " + std::to_string(s.client_id) + " has no samples");
    }
    w.u32(s.client_id);
    w.u32(s.domain_id);
    w.u32(static_cast<std::uint32_t>(s.n_samples()));
    w.u32(static_cast<std::uint32_t>(d));
    w.u32(static_cast<std::uint32_t>(s.n_classes()));
    for (const EmbeddingPair& p : s.pairs) {
      if (p.image.size() != d) {
        throw DimensionError("client " + std::to_string(s.client_id) +
                             ": image embedding length differs from the label table");
      }
      w.u32(static_cast<std::uint32_t>(p.label));
      for (double x : p.image) w.f64(x);
    }
    for (double x : s.label_table.data()) w.f64(x);
  }
  return w.take();
}

std::vector<ClientShard> decode_shards(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  r.expect_magic("FIDX");
  const std::size_t version_at = r.offset();
  const std::uint32_t version = r.u32("version");
  if (version != kShardVersion) {
    throw FormatError("unsupported shard file version " + std::to_string(version), version_at);
  }
  const std::uint32_t n_clients = r.u32("n_clients");
  std::vector<ClientShard> shards;
  for (std::uint32_t c = 0; c < n_clients; ++c) {
    ClientShard s;
    s.client_id = r.u32("client_id");
    s.domain_id = r.u32("domain_id");
    const std::size_t n_at = r.offset();
    const std::uint32_t n = r.u32("n_samples");
    const std::size_t d_at = r.offset();
    const std::uint32_t d = r.u32("d_emb");
    const std::size_t c_at = r.offset();
    const std::uint32_t n_classes = r.u32("n_classes");
    if (n == 0) throw FormatError("client with zero samples", n_at);
    if (d == 0) throw FormatError("d_emb must be positive", d_at);
    if (n_classes == 0) throw FormatError("n_classes must be positive", c_at);
    // Reject sizes the remaining bytes cannot hold before allocating.
    const std::size_t need = static_cast<std::size_t>(n) * (4 + 8 * static_cast<std::size_t>(d)) +
                             static_cast<std::size_t>(n_classes) * d * 8;
    if (need > r.remaining()) {
      throw FormatError("truncated sample records for client " + std::to_string(s.client_id),
                        r.offset());
    }
    s.pairs.resize(n);
    for (auto& p : s.pairs) {
      const std::size_t label_at = r.offset();
      const std::uint32_t label = r.u32("label");
      if (label >= n_classes) {
        throw FormatError("label " + std::to_string(label) + " >= n_classes", label_at);
      }
      p.label = static_cast<int>(label);
      p.image.resize(d);
      for (double& x : p.image) x = r.f64("image embedding");
    }
    s.label_table = Matrix(n_classes, d);
    for (double& x : s.label_table.data()) x = r.f64("label table");
    for (auto& p : s.pairs) {
      auto row = s.label_table.row(static_cast<std::size_t>(p.label));
      p.label_emb.assign(row.begin(), row.end());
    }
    shards.push_back(std::move(s));
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after last client", r.offset());
  return shards;
}

void save_shards(std::span<const ClientShard> shards, const std::filesystem::path& path) {
  detail::write_file(path, encode_shards(shards));
}

std::vector<ClientShard> load_shards(const std::filesystem::path& path) {
  return decode_shards(detail::read_file(path));
}

Matrix image_matrix(const ClientShard& shard, std::span<const std::size_t> indices) {
  Matrix m(indices.size(), shard.d_emb());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const Vector& v = shard.pairs.at(indices[i]).image;
    std::copy(v.begin(), v.end(), m.row(i).begin());
  }
  return m;
}

Matrix label_matrix(const ClientShard& shard, std::span<const std::size_t> indices) {
  Matrix m(indices.size(), shard.d_emb());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const Vector& v = shard.pairs.at(indices[i]).label_emb;
    std::copy(v.begin(), v.end(), m.row(i).begin());
  }
  return m;
}

std::vector<int> labels_of(const ClientShard& shard, std::span<const std::size_t> indices) {
  std::vector<int> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(shard.pairs.at(i).label);
  return out;
}

}  // namespace fedidx
