#include "fedidx/fl_sim.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <numeric>
#include <random>
#include <sstream>

#include "fedidx/errors.hpp"
#include "fedidx/optim.hpp"

namespace fedidx {

GlobalModel init_global_model(const ModelArch& arch, Rng& rng) {
  if (arch.d_emb == 0 || arch.hidden == 0 || arch.n_classes == 0) {
    throw ConfigError("model dimensions must be positive");
  }
  GlobalModel m;
  const std::size_t dims[] = {arch.d_emb, arch.hidden};
  const Activation acts[] = {arch.activation};
  m.backbone = init_mlp(dims, acts, rng);
  m.head = init_dense(arch.hidden, arch.n_classes, rng);
  if (arch.projection_dim > 0) {
    ProjectionBranch b;
    b.projection = init_dense(arch.hidden, arch.projection_dim, rng).weight;
    b.head = init_dense(arch.projection_dim, arch.n_classes, rng);
    m.branch = std::move(b);
  }
  return m;
}

Matrix features(const GlobalModel& model, const Matrix& x) { return mlp_forward(model.backbone, x); }

Matrix logits(const GlobalModel& model, const Matrix& x) {
  return dense_forward(model.head, features(model, x));
}

std::vector<int> predict(const GlobalModel& model, const Matrix& x) {
  const Matrix l = logits(model, x);
  std::vector<int> out(l.rows());
  for (std::size_t r = 0; r < l.rows(); ++r) {
    auto row = l.row(r);
    out[r] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

std::string to_string(ServerAlgorithm a) {
  return a == ServerAlgorithm::FedAvg ? "fedavg" : "fedavgm";
}

ServerAlgorithm server_algorithm_from_string(const std::string& s) {
  if (s == "fedavg") return ServerAlgorithm::FedAvg;
  if (s == "fedavgm") return ServerAlgorithm::FedAvgM;
  throw ConfigError("unknown server algorithm '" + s + "' (expected fedavg or fedavgm)");
}

void validate(const FlConfig& c) {
  auto finite_nonneg = [](double v) { return std::isfinite(v) && v >= 0.0; };
  if (c.rounds < 1) throw ConfigError("fl.rounds must be >= 1");
  if (!(c.fraction > 0.0 && c.fraction <= 1.0)) throw ConfigError("fl.fraction must be in (0, 1]");
  if (!finite_nonneg(c.learning_rate)) throw ConfigError("fl.lr must be finite and >= 0");
  if (!finite_nonneg(c.momentum)) throw ConfigError("fl.momentum must be finite and >= 0");
  if (!finite_nonneg(c.weight_decay)) throw ConfigError("fl.weight_decay must be finite and >= 0");
  if (!finite_nonneg(c.server_momentum)) {
    throw ConfigError("fl.server_momentum must be finite and >= 0");
  }
  if (c.batch_size == 0) throw ConfigError("fl.batch_size must be >= 1");
  if (c.hidden == 0) throw ConfigError("fl.hidden must be >= 1");
  if (c.threads == 0) throw ConfigError("fl.threads must be >= 1");
  const auto& e = c.enhancements;
  if (!(e.tau > 0.0) || !std::isfinite(e.tau)) throw ConfigError("enhancements.tau must be > 0");
  if (!(e.gamma >= 0.0 && e.gamma <= 1.0)) throw ConfigError("enhancements.gamma must be in [0, 1]");
  if (!(e.lambda1 > 0.0) || !std::isfinite(e.lambda1)) {
    throw ConfigError("enhancements.lambda1 must be > 0");
  }
  if (!finite_nonneg(e.reg.reg_weight)) throw ConfigError("enhancements.reg_weight must be >= 0");
}

std::size_t clients_per_round(double fraction, std::size_t total_clients) {
  const auto k = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(total_clients)));
  return std::clamp<std::size_t>(k, 1, total_clients);
}

ValueAndGrad local_loss_grad(const GlobalModel& model, const Matrix& x,
                             std::span<const int> labels, const LocalRegHook* reg) {
  if (reg && !model.branch) throw DimensionError("local regulariser needs a projection branch");
  return value_and_grad(model, [&](Tape& tape, std::span<const Tape::Var> leaves) {
    std::size_t cursor = 0;
    const MlpVars backbone = mlp_vars(model.backbone, leaves, cursor);
    const DenseVars head = dense_vars(leaves, cursor);
    const Tape::Var z = mlp_forward(tape, backbone, tape.constant(x));
    const Tape::Var out = dense_forward(tape, head, z);
    Tape::Var loss = tape.softmax_cross_entropy(out, labels);
    if (model.branch) {
      const Tape::Var p = leaves[cursor++];
      const DenseVars proj_head = dense_vars(leaves, cursor);
      if (reg) {
        loss = tape.add(loss, local_reg_term(tape, z, out, p, proj_head, reg->index_matrix,
                                             reg->options));
      }
    }
    return loss;
  });
}

ClientUpdate local_train(const GlobalModel& model, const ClientShard& shard,
                         const FlConfig& config, const LocalRegHook* reg, Rng& rng) {
  const std::size_t n = shard.n_train();
  if (n == 0) {
    throw DomainError("client " + std::to_string(shard.client_id) + " has no training samples");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const Matrix x_all = image_matrix(shard, order);
  const std::vector<int> y_all = labels_of(shard, order);

  ClientUpdate u;
  u.client_id = shard.client_id;
  u.n_samples = n;
  u.params = model;
  SgdState opt = make_sgd(config.learning_rate, config.momentum, config.weight_decay);

  if (config.local_epochs == 0) {
    u.train_loss = local_loss_grad(model, x_all, y_all, reg).value;
    return u;
  }
  for (std::size_t e = 0; e < config.local_epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    double sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += config.batch_size) {
      const std::size_t end = std::min(n, start + config.batch_size);
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      const Matrix xb = gather_rows(x_all, idx);
      std::vector<int> yb(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) yb[i] = y_all[idx[i]];
      const ValueAndGrad vg = local_loss_grad(u.params, xb, yb, reg);
      if (!std::isfinite(vg.value)) {
        throw NumericError("non-finite local loss on client " + std::to_string(shard.client_id));
      }
      sgd_step(u.params, vg.grads, opt);
      sum += vg.value;
      ++batches;
    }
    u.train_loss = sum / static_cast<double>(batches);
  }
  return u;
}

GlobalModel aggregate(std::span<const ClientUpdate> updates, std::span<const double> weights) {
  if (updates.empty()) throw DomainError("aggregate: no updates");
  if (updates.size() != weights.size()) {
    throw DimensionError("aggregate: " + std::to_string(updates.size()) + " updates but " +
                         std::to_string(weights.size()) + " weights");
  }
  double total = 0.0;
  for (double w : weights) total += w;
  if (std::abs(total - 1.0) > 1e-9) {
    throw DomainError("aggregate: weights sum to " + std::to_string(total) + ", expected 1");
  }
  std::vector<std::size_t> order(updates.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return updates[a].client_id < updates[b].client_id;
  });
  std::vector<const GlobalModel*> models;
  std::vector<double> w;
  for (std::size_t i : order) {
    models.push_back(&updates[i].params);
    w.push_back(weights[i]);
  }
  return weighted_average<GlobalModel>(models, w);
}

GlobalModel server_step_fedavg(const GlobalModel& /*prev*/, const GlobalModel& aggregated) {
  return aggregated;
}

ServerStep server_step_fedavgm(const GlobalModel& prev, const GlobalModel& aggregated,
                               std::vector<Matrix> buffer, double server_momentum) {
  if (buffer.empty()) {
    visit_tensors(prev, [&](const Matrix& m, TensorRole) { buffer.emplace_back(m.rows(), m.cols()); });
  }
  std::vector<const Matrix*> agg;
  visit_tensors(aggregated, [&](const Matrix& m, TensorRole) { agg.push_back(&m); });
  if (agg.size() != buffer.size()) throw DimensionError("fedavgm: model structure mismatch");
  ServerStep out{prev, std::move(buffer)};
  std::size_t k = 0;
  visit_tensors(out.model, [&](Matrix& m, TensorRole) {
    Matrix& b = out.buffer[k];
    const Matrix& a = *agg[k];
    if (!a.same_shape(m) || !b.same_shape(m)) throw DimensionError("fedavgm: tensor shape mismatch");
    auto md = m.data();
    auto ad = a.data();
    auto bd = b.data();
    for (std::size_t i = 0; i < md.size(); ++i) {
      const double delta = md[i] - ad[i];
      bd[i] = server_momentum * bd[i] + delta;
      md[i] -= bd[i];
    }
    ++k;
  });
  return out;
}

EvalResult evaluate(const GlobalModel& model, std::span<const ClientShard> shards) {
  EvalResult r;
  double sum = 0.0;
  for (const ClientShard& s : shards) {
    const std::size_t n_test = s.n_test();
    if (n_test == 0) {
      r.excluded.push_back(s.client_id);
      continue;
    }
    std::vector<std::size_t> idx(n_test);
    std::iota(idx.begin(), idx.end(), s.n_train());
    const std::vector<int> pred = predict(model, image_matrix(s, idx));
    std::size_t correct = 0;
    for (std::size_t i = 0; i < n_test; ++i) {
      if (pred[i] == s.pairs[idx[i]].label) ++correct;
    }
    const double acc = static_cast<double>(correct) / static_cast<double>(n_test);
    r.per_client.push_back({s.client_id, acc});
    sum += acc;
  }
  if (r.per_client.empty()) throw DomainError("evaluate: no client has a test split");
  r.mean_accuracy = sum / static_cast<double>(r.per_client.size());
  return r;
}

namespace {

struct Participant {
  const ClientShard* shard;
  const ClientIndex* index;  // null when enhancements are off
};

std::vector<std::uint32_t> uniform_selection(const std::vector<std::uint32_t>& ids, std::size_t k,
                                             Rng& rng) {
  std::vector<std::uint32_t> pool = ids;
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(k);
  std::sort(pool.begin(), pool.end());
  return pool;
}

}  // namespace

ExperimentResult run_experiment(std::span<const ClientShard> shards,
                                std::span<const ClientIndex> indices, const FlConfig& config) {
  validate(config);
  if (shards.empty()) throw DomainError("run_experiment: no client shards");
  const auto& enh = config.enhancements;
  const bool uses_index = enh.sampling || enh.aggregation || enh.local_reg;

  std::vector<Participant> clients;
  for (const ClientShard& s : shards) clients.push_back({&s, nullptr});
  std::sort(clients.begin(), clients.end(), [](const Participant& a, const Participant& b) {
    return a.shard->client_id < b.shard->client_id;
  });
  for (std::size_t i = 1; i < clients.size(); ++i) {
    if (clients[i].shard->client_id == clients[i - 1].shard->client_id) {
      throw DomainError("duplicate client id " + std::to_string(clients[i].shard->client_id));
    }
  }

  std::vector<ClientIndex> sorted_indices;
  if (uses_index) {
    if (indices.empty()) throw ConfigError("enhancements are enabled but no client indices were given");
    for (const Participant& c : clients) {
      auto it = std::find_if(indices.begin(), indices.end(), [&](const ClientIndex& ci) {
        return ci.client_id == c.shard->client_id;
      });
      if (it == indices.end()) {
        throw ConfigError("no index for client " + std::to_string(c.shard->client_id));
      }
      sorted_indices.push_back(*it);
    }
    for (std::size_t i = 0; i < clients.size(); ++i) clients[i].index = &sorted_indices[i];
  }

  const std::size_t m = clients.size();
  const std::size_t k = clients_per_round(config.fraction, m);
  std::vector<std::uint32_t> ids;
  std::vector<double> n_train;
  for (const Participant& c : clients) {
    ids.push_back(c.shard->client_id);
    n_train.push_back(static_cast<double>(c.shard->n_train()));
  }
  auto position = [&](std::uint32_t id) {
    return static_cast<std::size_t>(std::lower_bound(ids.begin(), ids.end(), id) - ids.begin());
  };

  ModelArch arch;
  arch.d_emb = shards.front().d_emb();
  arch.hidden = config.hidden;
  arch.n_classes = shards.front().n_classes();
  std::optional<LocalRegHook> hook;
  if (enh.local_reg) {
    hook = LocalRegHook{feature_index_matrix(sorted_indices), enh.reg};
    arch.projection_dim = hook->index_matrix.rows();
  }
  Rng init_rng = make_rng(config.seed, {stream::kInit});
  GlobalModel global = init_global_model(arch, init_rng);

  SamplerState sampler;
  if (enh.sampling) sampler = make_sampler(m, enh.tau);
  AggregatorState aggregator;
  if (enh.aggregation) aggregator = make_aggregator(enh.gamma, enh.lambda1);
  std::vector<Matrix> server_buffer;

  ExperimentResult result;
  for (std::size_t t = 1; t <= config.rounds; ++t) {
    RoundLog log;
    log.round = t;
    Rng select_rng = make_rng(config.seed, {stream::kSelect, t});
    if (enh.sampling) {
      SamplingResult s = sample_clients(sampler, sorted_indices, n_train, k, t, select_rng);
      log.selected = s.selected;
      for (std::uint32_t id : log.selected) log.probs.push_back(s.probabilities[position(id)]);
    } else {
      log.selected = uniform_selection(ids, k, select_rng);
      log.probs.assign(k, 1.0 / static_cast<double>(m));
    }

    std::vector<ClientUpdate> updates(log.selected.size());
    auto train_one = [&](std::size_t j) {
      const Participant& c = clients[position(log.selected[j])];
      Rng rng = make_rng(config.seed, {stream::kLocal, t, c.shard->client_id});
      updates[j] = local_train(global, *c.shard, config, hook ? &*hook : nullptr, rng);
    };
    if (config.threads <= 1) {
      for (std::size_t j = 0; j < updates.size(); ++j) train_one(j);
    } else {
      for (std::size_t start = 0; start < updates.size(); start += config.threads) {
        std::vector<std::future<void>> running;
        const std::size_t end = std::min(updates.size(), start + config.threads);
        for (std::size_t j = start; j < end; ++j) {
          running.push_back(std::async(std::launch::async, train_one, j));
        }
        for (auto& f : running) f.get();
      }
    }

    if (enh.aggregation) {
      std::vector<WeightedIndex> participants;
      for (std::uint32_t id : log.selected) {
        const std::size_t p = position(id);
        participants.push_back({clients[p].index, n_train[p]});
      }
      update_accumulator(aggregator, sorted_indices, participants);
      log.agg_weights = aggregation_weights(aggregator, participants);
    } else {
      double total = 0.0;
      for (std::uint32_t id : log.selected) total += n_train[position(id)];
      for (std::uint32_t id : log.selected) log.agg_weights.push_back(n_train[position(id)] / total);
    }

    const GlobalModel aggregated = aggregate(updates, log.agg_weights);
    if (config.algorithm == ServerAlgorithm::FedAvg) {
      global = server_step_fedavg(global, aggregated);
    } else {
      ServerStep step =
          server_step_fedavgm(global, aggregated, std::move(server_buffer), config.server_momentum);
      global = std::move(step.model);
      server_buffer = std::move(step.buffer);
    }
    if (!all_finite(global)) throw NumericError("global model diverged in round " + std::to_string(t));

    double loss_sum = 0.0;
    for (const ClientUpdate& u : updates) loss_sum += u.train_loss;
    log.mean_train_loss = loss_sum / static_cast<double>(updates.size());

    EvalResult ev = evaluate(global, shards);
    log.mean_accuracy = ev.mean_accuracy;
    log.per_client = std::move(ev.per_client);
    log.excluded = std::move(ev.excluded);
    if (result.rounds.empty() || log.mean_accuracy > result.best_mean_accuracy) {
      result.best_mean_accuracy = log.mean_accuracy;
      result.best_round = t;
    }
    result.rounds.push_back(std::move(log));
  }
  result.final_mean_accuracy = result.rounds.back().mean_accuracy;
  result.final_model = std::move(global);
  return result;
}

namespace {

template <class T, class Fmt>
std::string join(const std::vector<T>& v, Fmt fmt) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ';';
    out += fmt(v[i]);
  }
  return out;
}

}  // namespace

std::string round_log_csv(std::span<const RoundLog> logs) {
  std::string out = "round,client_ids,probs,agg_weights,mean_acc\n";
  for (const RoundLog& l : logs) {
    out += std::to_string(l.round) + ',';
    out += join(l.selected, [](std::uint32_t id) { return std::to_string(id); }) + ',';
    out += join(l.probs, format_double) + ',';
    out += join(l.agg_weights, format_double) + ',';
    out += format_double(l.mean_accuracy) + '\n';
  }
  return out;
}

}  // namespace fedidx
