#include "fedidx/index_gen.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "binary_io.hpp"
#include "fedidx/errors.hpp"
#include "fedidx/numeric.hpp"
#include "fedidx/random.hpp"

namespace fedidx {

namespace {

constexpr std::uint32_t kParamsVersion = 1;

void check_finite(double loss, const char* where) {
  if (!std::isfinite(loss)) throw NumericError(std::string("non-finite loss in ") + where);
}

}  // namespace

std::string to_string(IndexStrategy s) {
  return s == IndexStrategy::Global ? "global" : "federated";
}

IndexStrategy index_strategy_from_string(const std::string& s) {
  if (s == "global") return IndexStrategy::Global;
  if (s == "federated") return IndexStrategy::Federated;
  throw ConfigError("unknown index strategy '" + s + "' (expected global or federated)");
}

std::string to_string(DecoderKind d) { return d == DecoderKind::Linear ? "linear" : "mlp"; }

DecoderKind decoder_kind_from_string(const std::string& s) {
  if (s == "linear") return DecoderKind::Linear;
  if (s == "mlp") return DecoderKind::Mlp;
  throw ConfigError("unknown decoder '" + s + "' (expected linear or mlp)");
}

std::string to_string(IndexPart p) {
  switch (p) {
    case IndexPart::Feature: return "feature";
    case IndexPart::Label: return "label";
    case IndexPart::Full: return "full";
  }
  return "full";
}

IndexPart index_part_from_string(const std::string& s) {
  if (s == "feature" || s == "f") return IndexPart::Feature;
  if (s == "label" || s == "l") return IndexPart::Label;
  if (s == "full") return IndexPart::Full;
  throw ConfigError("unknown index part '" + s + "' (expected feature, label or full)");
}

DsaIgnParams init_dsa_ign(const DsaIgnArch& arch, Rng& rng) {
  if (arch.d_emb == 0) throw ConfigError("d_emb must be positive");
  if (arch.decomposition_layers == 0) throw ConfigError("decomposition needs at least one layer");
  const std::size_t d_idx = arch.d_index == 0 ? arch.d_emb : arch.d_index;
  const std::size_t in = 2 * arch.d_emb;
  const std::size_t hidden = 2 * arch.d_emb;

  std::vector<std::size_t> dims{in};
  std::vector<Activation> acts;
  for (std::size_t i = 0; i + 1 < arch.decomposition_layers; ++i) {
    dims.push_back(hidden);
    acts.push_back(arch.hidden_activation);
  }
  dims.push_back(2 * d_idx);
  acts.push_back(Activation::Identity);

  DsaIgnParams p;
  p.decomposition = init_mlp(dims, acts, rng);
  if (arch.decoder == DecoderKind::Linear) {
    const std::size_t rd[] = {2 * d_idx, arch.d_emb};
    const Activation ra[] = {Activation::Identity};
    p.reconstruction = init_mlp(rd, ra, rng);
  } else {
    const std::size_t rd[] = {2 * d_idx, 2 * d_idx, arch.d_emb};
    const Activation ra[] = {arch.hidden_activation, Activation::Identity};
    p.reconstruction = init_mlp(rd, ra, rng);
  }
  return p;
}

void validate(const IndexGenConfig& c) {
  if (c.weights.sim < 0 || c.weights.orth < 0 || c.weights.recon < 0 || c.weights.div < 0) {
    throw ConfigError("loss weights must be >= 0");
  }
  if (!(c.fraction > 0.0 && c.fraction <= 1.0)) throw ConfigError("fraction must be in (0, 1]");
  if (c.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (c.local_batch_size < 1) throw ConfigError("local_batch_size must be >= 1");
  if (!(c.learning_rate >= 0.0) || !std::isfinite(c.learning_rate)) {
    throw ConfigError("learning_rate must be finite and >= 0");
  }
  if (!(c.momentum >= 0.0 && c.momentum < 1.0)) throw ConfigError("momentum must be in [0, 1)");
  if (!(c.weight_decay >= 0.0) || !std::isfinite(c.weight_decay)) {
    throw ConfigError("weight_decay must be finite and >= 0");
  }
  if (c.arch.decomposition_layers < 1) throw ConfigError("decomposition_layers must be >= 1");
}

// ---------------------------------------------------------------------------
// forward passes

namespace {

void check_images(const DsaIgnParams& params, const Matrix& images) {
  if (images.cols() != params.d_emb()) {
    throw DimensionError("expected " + std::to_string(params.d_emb()) +
                         "-dim embeddings, got " + std::to_string(images.cols()));
  }
  if (params.decomposition.in_dim() != 2 * params.d_emb()) {
    throw DimensionError("decomposition input dim " +
                         std::to_string(params.decomposition.in_dim()) + " != 2 * d_emb");
  }
}

}  // namespace

SampleIndexBatch decompose(const DsaIgnParams& params, const Matrix& images) {
  check_images(params, images);
  const Matrix out = mlp_forward(params.decomposition, concat_cols(images, images));
  const std::size_t d = params.d_index();
  return {slice_cols(out, 0, d), slice_cols(out, d, d)};
}

Matrix reconstruct(const DsaIgnParams& params, const SampleIndexBatch& batch) {
  if (batch.Z.rows() != batch.U.rows()) throw DimensionError("Z and U row counts differ");
  return mlp_forward(params.reconstruction, concat_cols(batch.Z, batch.U));
}

// ---------------------------------------------------------------------------
// losses

Tape::Var loss_sim(Tape& tape, Tape::Var Z, Tape::Var labels) {
  // mean(1 - cos)
  return tape.add_scalar(tape.scale(tape.mean(tape.row_cosine(Z, labels)), -1.0), 1.0);
}

Tape::Var loss_orth(Tape& tape, Tape::Var Z, Tape::Var U, bool normalized) {
  const double b = static_cast<double>(tape.value(Z).rows());
  const Tape::Var l1 = tape.abs_sum(tape.matmul(Z, tape.transpose(U)));
  return normalized ? tape.scale(l1, 1.0 / (b * b)) : l1;
}

Tape::Var loss_recon(Tape& tape, Tape::Var reconstructed, Tape::Var images) {
  return tape.mean(tape.square(tape.sub(reconstructed, images)));
}

Tape::Var loss_div(Tape& tape, Tape::Var U) {
  if (tape.value(U).rows() < 2) throw DomainError("loss_div needs a batch of at least 2");
  const Tape::Var n = tape.row_normalize(U);
  const Tape::Var gram = tape.matmul(n, tape.transpose(n));
  return tape.mean(tape.log_sum_exp_off_diag(gram));
}

double loss_sim(const Matrix& Z, const Matrix& labels) {
  Tape t;
  return t.scalar(loss_sim(t, t.constant(Z), t.constant(labels)));
}

double loss_orth(const Matrix& Z, const Matrix& U, bool normalized) {
  Tape t;
  return t.scalar(loss_orth(t, t.constant(Z), t.constant(U), normalized));
}

double loss_recon(const Matrix& reconstructed, const Matrix& images) {
  Tape t;
  return t.scalar(loss_recon(t, t.constant(reconstructed), t.constant(images)));
}

double loss_div(const Matrix& U) {
  Tape t;
  return t.scalar(loss_div(t, t.constant(U)));
}

DsaIgnVars dsa_ign_vars(const DsaIgnParams& p, std::span<const Tape::Var> leaves,
                        std::size_t& cursor) {
  DsaIgnVars v;
  v.decomposition = mlp_vars(p.decomposition, leaves, cursor);
  v.reconstruction = mlp_vars(p.reconstruction, leaves, cursor);
  return v;
}

Tape::Var total_loss(Tape& tape, const DsaIgnVars& vars, Tape::Var images, Tape::Var labels,
                     const IndexGenConfig& config) {
  const Tape::Var out = mlp_forward(tape, vars.decomposition, tape.concat_cols(images, images));
  const std::size_t d = tape.value(out).cols() / 2;
  const Tape::Var Z = tape.slice_cols(out, 0, d);
  const Tape::Var U = tape.slice_cols(out, d, d);
  const Tape::Var rec = mlp_forward(tape, vars.reconstruction, tape.concat_cols(Z, U));

  const LossWeights& w = config.weights;
  Tape::Var total = tape.constant(Matrix(1, 1, 0.0));
  auto add_term = [&](double weight, Tape::Var term) {
    if (weight != 0.0) total = tape.add(total, tape.scale(term, weight));
  };
  if (w.div != 0.0 && tape.value(U).rows() >= 2) add_term(w.div, loss_div(tape, U));
  add_term(w.sim, loss_sim(tape, Z, labels));
  add_term(w.orth, loss_orth(tape, Z, U, config.orth_normalized));
  add_term(w.recon, loss_recon(tape, rec, images));
  return total;
}

double total_loss(const DsaIgnParams& params, const Matrix& images, const Matrix& labels,
                  const IndexGenConfig& config) {
  check_images(params, images);
  return loss_value(params, [&](Tape& t, std::span<const Tape::Var> leaves) {
    std::size_t cursor = 0;
    const DsaIgnVars v = dsa_ign_vars(params, leaves, cursor);
    return total_loss(t, v, t.constant(images), t.constant(labels), config);
  });
}

ValueAndGrad total_loss_grad(const DsaIgnParams& params, const Matrix& images,
                             const Matrix& labels, const IndexGenConfig& config) {
  check_images(params, images);
  return value_and_grad(params, [&](Tape& t, std::span<const Tape::Var> leaves) {
    std::size_t cursor = 0;
    const DsaIgnVars v = dsa_ign_vars(params, leaves, cursor);
    return total_loss(t, v, t.constant(images), t.constant(labels), config);
  });
}

// ---------------------------------------------------------------------------
// training

double sgd_epochs(DsaIgnParams& params, const Matrix& images, const Matrix& labels,
                  const IndexGenConfig& config, std::size_t epochs, Rng& shuffle_rng,
                  SgdState& opt, IndexTrainTrace* trace) {
  const std::size_t n = images.rows();
  std::vector<std::size_t> order(n);
  double last = 0.0;
  for (std::size_t e = 0; e < epochs; ++e) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n;) {
      std::size_t end = std::min(n, start + config.batch_size);
      if (n - end == 1) end = n;  // no single-sample tail batch
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      const Matrix xb = gather_rows(images, idx);
      const Matrix lb = gather_rows(labels, idx);
      const ValueAndGrad vg = total_loss_grad(params, xb, lb, config);
      check_finite(vg.value, "index training");
      sgd_step(params, vg.grads, opt);
      sum += vg.value;
      ++batches;
      if (trace) ++trace->sgd_steps;
      start = end;
    }
    last = batches ? sum / static_cast<double>(batches) : 0.0;
    if (trace) trace->epoch_loss.push_back(last);
  }
  return last;
}

std::vector<std::size_t> pool_indices(const ClientShard& shard, std::size_t batch_size,
                                      std::uint64_t seed) {
  const std::size_t n = shard.n_samples();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const std::size_t take = std::min(batch_size, n);
  Rng rng = make_rng(seed, {stream::kPool, shard.client_id});
  for (std::size_t i = 0; i < take; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(take);
  return idx;
}

namespace {

void check_shards(std::span<const ClientShard> shards) {
  if (shards.empty()) throw DomainError("index training needs at least one client shard");
  for (const ClientShard& s : shards) {
    if (s.n_samples() == 0) {
      throw DomainError("client " + std::to_string(s.client_id) + " has no samples");
    }
  }
}

DsaIgnArch resolved_arch(const IndexGenConfig& config, std::span<const ClientShard> shards) {
  DsaIgnArch arch = config.arch;
  arch.d_emb = shards.front().d_emb();
  return arch;
}

Matrix all_images(const ClientShard& s) {
  std::vector<std::size_t> idx(s.n_samples());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return image_matrix(s, idx);
}

Matrix all_labels(const ClientShard& s) {
  std::vector<std::size_t> idx(s.n_samples());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return label_matrix(s, idx);
}

}  // namespace

DsaIgnParams train_global(std::span<const ClientShard> shards, const IndexGenConfig& config,
                          IndexTrainTrace* trace) {
  validate(config);
  check_shards(shards);
  Rng init_rng = make_rng(config.seed, {stream::kInit});
  DsaIgnParams params = init_dsa_ign(resolved_arch(config, shards), init_rng);

  std::size_t pool_size = 0;
  std::vector<std::vector<std::size_t>> picks;
  for (const ClientShard& s : shards) {
    picks.push_back(pool_indices(s, config.batch_size, config.seed));
    pool_size += picks.back().size();
  }
  Matrix images(pool_size, params.d_emb());
  Matrix labels(pool_size, params.d_emb());
  std::size_t row = 0;
  for (std::size_t k = 0; k < shards.size(); ++k) {
    for (std::size_t j : picks[k]) {
      const auto& p = shards[k].pairs[j];
      std::copy(p.image.begin(), p.image.end(), images.row(row).begin());
      std::copy(p.label_emb.begin(), p.label_emb.end(), labels.row(row).begin());
      ++row;
    }
  }

  SgdState opt = make_sgd(config.learning_rate, config.momentum, config.weight_decay);
  Rng shuffle = make_rng(config.seed, {stream::kShuffle});
  sgd_epochs(params, images, labels, config, config.epochs, shuffle, opt, trace);
  return params;
}

DsaIgnParams train_federated(std::span<const ClientShard> shards, const IndexGenConfig& config,
                             IndexTrainTrace* trace) {
  validate(config);
  check_shards(shards);
  Rng init_rng = make_rng(config.seed, {stream::kInit});
  DsaIgnParams global = init_dsa_ign(resolved_arch(config, shards), init_rng);

  // Clients in ascending id order so aggregation order is fixed.
  std::vector<std::size_t> by_id(shards.size());
  std::iota(by_id.begin(), by_id.end(), std::size_t{0});
  std::sort(by_id.begin(), by_id.end(),
            [&](std::size_t a, std::size_t b) { return shards[a].client_id < shards[b].client_id; });

  const std::size_t m = shards.size();
  const auto k = static_cast<std::size_t>(
      std::ceil(config.fraction * static_cast<double>(m) - 1e-12));
  const std::size_t per_round = std::clamp<std::size_t>(k, 1, m);
  IndexGenConfig local_config = config;
  local_config.batch_size = config.local_batch_size;

  for (std::size_t round = 0; round < config.rounds; ++round) {
    Rng sel = make_rng(config.seed, {stream::kSelect, round});
    std::vector<std::size_t> pool = by_id;
    for (std::size_t i = 0; i < per_round; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, m - 1);
      std::swap(pool[i], pool[pick(sel)]);
    }
    pool.resize(per_round);
    std::sort(pool.begin(), pool.end(), [&](std::size_t a, std::size_t b) {
      return shards[a].client_id < shards[b].client_id;
    });

    std::vector<DsaIgnParams> local;
    std::vector<double> weights;
    double total_n = 0.0;
    double round_loss = 0.0;
    for (std::size_t c : pool) {
      const ClientShard& s = shards[c];
      DsaIgnParams p = global;
      SgdState opt = make_sgd(config.learning_rate, config.momentum, config.weight_decay);
      Rng shuffle = make_rng(config.seed, {stream::kLocal, round, s.client_id});
      round_loss += sgd_epochs(p, all_images(s), all_labels(s), local_config, config.local_epochs,
                               shuffle, opt, nullptr);
      local.push_back(std::move(p));
      weights.push_back(static_cast<double>(s.n_samples()));
      total_n += static_cast<double>(s.n_samples());
    }
    for (double& w : weights) w /= total_n;
    std::vector<const DsaIgnParams*> ptrs;
    for (const auto& p : local) ptrs.push_back(&p);
    global = weighted_average<DsaIgnParams>(ptrs, weights);
    if (trace) trace->epoch_loss.push_back(round_loss / static_cast<double>(pool.size()));
  }
  return global;
}

DsaIgnParams train_index(std::span<const ClientShard> shards, const IndexGenConfig& config,
                         IndexTrainTrace* trace) {
  return config.strategy == IndexStrategy::Global ? train_global(shards, config, trace)
                                                  : train_federated(shards, config, trace);
}

// ---------------------------------------------------------------------------
// client indices

ClientIndex compute_client_index(const DsaIgnParams& params, const ClientShard& shard) {
  if (shard.n_samples() == 0) {
    throw DomainError("client " + std::to_string(shard.client_id) + " has no samples");
  }
  const SampleIndexBatch b = decompose(params, all_images(shard));
  const std::size_t n = shard.n_samples();
  ClientIndex idx;
  idx.client_id = shard.client_id;
  idx.domain_id = shard.domain_id;
  idx.beta_f.assign(b.U.cols(), 0.0);
  idx.beta_l.assign(shard.d_emb(), 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t t = 0; t < b.U.cols(); ++t) idx.beta_f[t] += b.U(j, t);
    const Vector& l = shard.pairs[j].label_emb;
    for (std::size_t t = 0; t < l.size(); ++t) idx.beta_l[t] += l[t];
  }
  const double inv = static_cast<double>(n);
  for (double& v : idx.beta_f) v /= inv;
  for (double& v : idx.beta_l) v /= inv;
  return idx;
}

std::vector<ClientIndex> compute_client_indices(const DsaIgnParams& params,
                                                std::span<const ClientShard> shards) {
  std::vector<ClientIndex> out;
  out.reserve(shards.size());
  for (const ClientShard& s : shards) out.push_back(compute_client_index(params, s));
  std::sort(out.begin(), out.end(),
            [](const ClientIndex& a, const ClientIndex& b) { return a.client_id < b.client_id; });
  return out;
}

namespace {

Vector index_part(const ClientIndex& idx, IndexPart part) {
  switch (part) {
    case IndexPart::Feature: return idx.beta_f;
    case IndexPart::Label: return idx.beta_l;
    case IndexPart::Full: {
      Vector v = idx.beta_f;
      v.insert(v.end(), idx.beta_l.begin(), idx.beta_l.end());
      return v;
    }
  }
  return {};
}

}  // namespace

Matrix index_similarity_matrix(std::span<const ClientIndex> indices, IndexPart part) {
  const std::size_t m = indices.size();
  std::vector<Vector> parts;
  parts.reserve(m);
  for (const ClientIndex& idx : indices) parts.push_back(index_part(idx, part));
  Matrix sim(m, m);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = i; j < m; ++j) {
      const double c = cosine_sim(parts[i], parts[j]);
      sim(i, j) = c;
      sim(j, i) = c;
    }
  }
  return sim;
}

double mean_pairwise_cosine(const Matrix& U) {
  if (U.rows() < 2) throw DomainError("mean_pairwise_cosine needs at least 2 rows");
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t j = 0; j < U.rows(); ++j) {
    for (std::size_t k = j + 1; k < U.rows(); ++k) {
      s += cosine_sim(U.row(j), U.row(k));
      ++n;
    }
  }
  return s / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// persistence

namespace {

void write_mlp(detail::ByteWriter& w, const MlpParams& p) {
  w.u32(static_cast<std::uint32_t>(p.layers.size()));
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    const DenseParams& l = p.layers[i];
    w.u32(static_cast<std::uint32_t>(l.in_dim()));
    w.u32(static_cast<std::uint32_t>(l.out_dim()));
    w.u32(static_cast<std::uint32_t>(p.activations[i]));
    for (double x : l.weight.data()) w.f64(x);
    for (double x : l.bias.data()) w.f64(x);
  }
}

MlpParams read_mlp(detail::ByteReader& r) {
  MlpParams p;
  const std::uint32_t n = r.u32("n_layers");
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::uint32_t in = r.u32("layer in_dim");
    const std::uint32_t out = r.u32("layer out_dim");
    const std::size_t act_at = r.offset();
    const std::uint32_t act = r.u32("layer activation");
    if (act > static_cast<std::uint32_t>(Activation::Identity)) {
      throw FormatError("unknown activation code " + std::to_string(act), act_at);
    }
    const std::size_t need = (static_cast<std::size_t>(in) * out + out) * 8;
    if (need > r.remaining()) throw FormatError("truncated layer weights", r.offset());
    DenseParams l{Matrix(in, out), Matrix(1, out)};
    for (double& x : l.weight.data()) x = r.f64("weight");
    for (double& x : l.bias.data()) x = r.f64("bias");
    p.layers.push_back(std::move(l));
    p.activations.push_back(static_cast<Activation>(act));
  }
  validate(p);
  return p;
}

}  // namespace

void save_dsa_ign(const DsaIgnParams& params, const std::filesystem::path& path) {
  detail::ByteWriter w;
  w.raw("DSAI", 4);
  w.u32(kParamsVersion);
  write_mlp(w, params.decomposition);
  write_mlp(w, params.reconstruction);
  detail::write_file(path, w.take());
}

DsaIgnParams load_dsa_ign(const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = detail::read_file(path);
  detail::ByteReader r(bytes);
  r.expect_magic("DSAI");
  const std::size_t at = r.offset();
  const std::uint32_t version = r.u32("version");
  if (version != kParamsVersion) {
    throw FormatError("unsupported params file version " + std::to_string(version), at);
  }
  DsaIgnParams p;
  p.decomposition = read_mlp(r);
  p.reconstruction = read_mlp(r);
  if (r.remaining() != 0) throw FormatError("trailing bytes after parameters", r.offset());
  return p;
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string index_csv_string(std::span<const ClientIndex> indices) {
  const std::size_t d = indices.empty() ? 0 : indices.front().beta_f.size();
  std::string out = "client_id,domain_id,part";
  for (std::size_t t = 0; t < d; ++t) out += ",dim_" + std::to_string(t);
  out += '\n';
  for (const ClientIndex& idx : indices) {
    if (idx.beta_f.size() != d || idx.beta_l.size() != d) {
      throw DimensionError("client " + std::to_string(idx.client_id) +
                           ": index parts must share one dimension for CSV export");
    }
    for (const auto& [tag, vec] : {std::pair{'f', &idx.beta_f}, std::pair{'l', &idx.beta_l}}) {
      out += std::to_string(idx.client_id) + ',' + std::to_string(idx.domain_id) + ',' + tag;
      for (double v : *vec) out += ',' + format_double(v);
      out += '\n';
    }
  }
  return out;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  fields.push_back(cur);
  return fields;
}

double parse_double(const std::string& s, std::size_t line_no) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw FormatError("not a number: '" + s + "'", line_no, "line");
  }
  return v;
}

std::uint32_t parse_u32(const std::string& s, std::size_t line_no) {
  std::uint32_t v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw FormatError("not an unsigned integer: '" + s + "'", line_no, "line");
  }
  return v;
}

}  // namespace

std::vector<ClientIndex> parse_index_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 1;
  if (!std::getline(in, line)) throw FormatError("empty index CSV", 1, "line");
  const std::vector<std::string> header = split_csv_line(line);
  if (header.size() < 4 || header[0] != "client_id" || header[1] != "domain_id" ||
      header[2] != "part") {
    throw FormatError("index CSV header must start with client_id,domain_id,part,dim_0", 1, "line");
  }
  const std::size_t d = header.size() - 3;
  for (std::size_t t = 0; t < d; ++t) {
    if (header[3 + t] != "dim_" + std::to_string(t)) {
      throw FormatError("unexpected header column '" + header[3 + t] + "'", 1, "line");
    }
  }
  std::vector<ClientIndex> out;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const std::vector<std::string> f = split_csv_line(line);
    if (f.size() != header.size()) {
      throw FormatError("expected " + std::to_string(header.size()) + " fields, got " +
                        std::to_string(f.size()),
                        line_no, "line");
    }
    const std::uint32_t id = parse_u32(f[0], line_no);
    const std::uint32_t dom = parse_u32(f[1], line_no);
    Vector v(d);
    for (std::size_t t = 0; t < d; ++t) v[t] = parse_double(f[3 + t], line_no);
    auto it = std::find_if(out.begin(), out.end(),
                           [&](const ClientIndex& c) { return c.client_id == id; });
    if (it == out.end()) {
      out.push_back(ClientIndex{id, dom, {}, {}});
      it = out.end() - 1;
    } else if (it->domain_id != dom) {
      throw FormatError("client " + std::to_string(id) + " listed with two domains", line_no, "line");
    }
    Vector& slot = f[2] == "f" ? it->beta_f : (f[2] == "l" ? it->beta_l : v);
    if (&slot == &v) throw FormatError("part must be 'f' or 'l', got '" + f[2] + "'", line_no, "line");
    if (!slot.empty()) throw FormatError("duplicate row for client " + std::to_string(id), line_no, "line");
    slot = std::move(v);
  }
  for (const ClientIndex& c : out) {
    if (c.beta_f.empty() || c.beta_l.empty()) {
      throw FormatError("client " + std::to_string(c.client_id) + " is missing its f or l row",
                        line_no, "line");
    }
  }
  std::sort(out.begin(), out.end(),
            [](const ClientIndex& a, const ClientIndex& b) { return a.client_id < b.client_id; });
  return out;
}

void write_index_csv(std::span<const ClientIndex> indices, const std::filesystem::path& path) {
  const std::string text = index_csv_string(indices);
  detail::write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::vector<ClientIndex> read_index_csv(const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = detail::read_file(path);
  return parse_index_csv(std::string(bytes.begin(), bytes.end()));
}

std::string similarity_csv_string(std::span<const ClientIndex> indices, const Matrix& sim) {
  if (sim.rows() != indices.size() || sim.cols() != indices.size()) {
    throw DimensionError("similarity matrix does not match the index list");
  }
  std::string out = "client_id";
  for (const ClientIndex& c : indices) out += ',' + std::to_string(c.client_id);
  out += '\n';
  for (std::size_t i = 0; i < indices.size(); ++i) {
    out += std::to_string(indices[i].client_id);
    for (std::size_t j = 0; j < indices.size(); ++j) out += ',' + format_double(sim(i, j));
    out += '\n';
  }
  return out;
}

}  // namespace fedidx
