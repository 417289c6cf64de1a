#include <gtest/gtest.h>

#include <cmath>

#include "fedidx/errors.hpp"
#include "fedidx/fl_sim.hpp"
#include "reference_fedavg.hpp"
#include "test_support.hpp"

using namespace fedidx;
using fedidx::testing::random_matrix;

namespace {

SynthesisSpec label_shift(std::uint64_t seed, std::size_t clients = 8) {
  SynthesisSpec s;
  s.clients_per_domain = clients;
  s.samples_min = s.samples_max = 60;
  s.dirichlet_alpha = 0.1;
  s.seed = seed;
  return s;
}

GlobalModel tiny_model(std::uint64_t seed, std::size_t d = 3, std::size_t h = 4, std::size_t c = 3) {
  ModelArch a;
  a.d_emb = d;
  a.hidden = h;
  a.n_classes = c;
  Rng rng(seed);
  return init_global_model(a, rng);
}

ClientShard one_sample_shard(const std::vector<double>& x, int label, std::size_t classes) {
  ClientShard s;
  s.client_id = 0;
  s.label_table = Matrix(classes, x.size());
  s.pairs.push_back({x, Vector(x.size(), 0.0), label});
  return s;
}

std::vector<double> flatten(const GlobalModel& m) {
  std::vector<double> out;
  visit_tensors(m, [&](const Matrix& t, TensorRole) { out.insert(out.end(), t.data().begin(), t.data().end()); });
  return out;
}

}  // namespace

TEST(ClientsPerRound, CeilAndClamp) {
  EXPECT_EQ(clients_per_round(0.1, 20), 2u);
  EXPECT_EQ(clients_per_round(0.15, 20), 3u);
  EXPECT_EQ(clients_per_round(0.01, 20), 1u);
  EXPECT_EQ(clients_per_round(1.0, 7), 7u);
}

TEST(LocalTrain, NoEpochsOrZeroRateLeavesModel) {
  const auto shards = synth_client_shards(label_shift(1, 2));
  ModelArch a;
  Rng init(1);
  const GlobalModel m = init_global_model(a, init);
  FlConfig c;
  c.local_epochs = 0;
  Rng rng(2);
  ClientUpdate u = local_train(m, shards[0], c, nullptr, rng);
  EXPECT_EQ(u.params, m);
  EXPECT_EQ(u.n_samples, shards[0].n_train());
  c.local_epochs = 3;
  c.learning_rate = 0.0;
  u = local_train(m, shards[0], c, nullptr, rng);
  EXPECT_EQ(u.params, m);
}

TEST(LocalTrain, SingleSampleStepMatchesHandBackprop) {
  const GlobalModel m = tiny_model(3);
  const std::vector<double> x = {0.3, -1.2, 0.8};
  const int label = 2;
  ClientShard s = one_sample_shard(x, label, 3);
  ASSERT_EQ(s.n_train(), 1u);
  FlConfig c;
  c.local_epochs = 1;
  c.learning_rate = 0.1;
  c.weight_decay = 0.01;
  Rng rng(4);
  const ClientUpdate u = local_train(m, s, c, nullptr, rng);

  const Matrix& w1 = m.backbone.layers[0].weight;
  const Matrix& b1 = m.backbone.layers[0].bias;
  std::vector<double> z(4), lg(3), p(3), dl(3), dz(4, 0.0);
  for (std::size_t j = 0; j < 4; ++j) {
    double a = b1(0, j);
    for (std::size_t i = 0; i < 3; ++i) a += x[i] * w1(i, j);
    z[j] = std::tanh(a);
  }
  double zsum = 0.0;
  for (std::size_t k = 0; k < 3; ++k) {
    lg[k] = m.head.bias(0, k);
    for (std::size_t j = 0; j < 4; ++j) lg[k] += z[j] * m.head.weight(j, k);
    p[k] = std::exp(lg[k]);
    zsum += p[k];
  }
  for (std::size_t k = 0; k < 3; ++k) dl[k] = p[k] / zsum - (k == label ? 1.0 : 0.0);
  for (std::size_t j = 0; j < 4; ++j)
    for (std::size_t k = 0; k < 3; ++k) dz[j] += m.head.weight(j, k) * dl[k];

  auto step = [&](double param, double grad, bool weight) {
    return param - 0.1 * (grad + (weight ? 0.01 * param : 0.0));
  };
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j)
      EXPECT_NEAR(u.params.backbone.layers[0].weight(i, j),
                  step(w1(i, j), x[i] * dz[j] * (1 - z[j] * z[j]), true), 1e-15);
  for (std::size_t j = 0; j < 4; ++j) {
    EXPECT_NEAR(u.params.backbone.layers[0].bias(0, j), step(b1(0, j), dz[j] * (1 - z[j] * z[j]), false), 1e-15);
    for (std::size_t k = 0; k < 3; ++k)
      EXPECT_NEAR(u.params.head.weight(j, k), step(m.head.weight(j, k), z[j] * dl[k], true), 1e-15);
  }
  for (std::size_t k = 0; k < 3; ++k)
    EXPECT_NEAR(u.params.head.bias(0, k), step(m.head.bias(0, k), dl[k], false), 1e-15);
}

TEST(LocalTrain, RejectsClientWithoutTrainingData) {
  ClientShard s;
  s.label_table = Matrix(3, 3);
  FlConfig c;
  Rng rng(1);
  EXPECT_THROW(local_train(tiny_model(1), s, c, nullptr, rng), DomainError);
}

TEST(Aggregate, WeightedAverageAndOrder) {
  const GlobalModel a = tiny_model(5), b = tiny_model(6), c = tiny_model(7);
  const std::vector<ClientUpdate> ups = {{4, a, 10, 0.0}, {1, b, 30, 0.0}, {9, c, 60, 0.0}};
  const std::vector<double> w = {0.1, 0.3, 0.6};
  const GlobalModel avg = aggregate(ups, w);
  const auto fa = flatten(a), fb = flatten(b), fc = flatten(c), fr = flatten(avg);
  for (std::size_t i = 0; i < fr.size(); ++i) {
    EXPECT_NEAR(fr[i], 0.1 * fa[i] + 0.3 * fb[i] + 0.6 * fc[i], 1e-15);
  }
  const std::vector<ClientUpdate> shuffled = {ups[2], ups[0], ups[1]};
  const std::vector<double> ws = {0.6, 0.1, 0.3};
  EXPECT_EQ(aggregate(shuffled, ws), avg);

  const std::vector<ClientUpdate> one = {ups[0]};
  const double w1[] = {1.0};
  EXPECT_EQ(aggregate(one, w1), a);
  const double bad[] = {0.5, 0.3, 0.1};
  EXPECT_THROW(aggregate(ups, bad), DomainError);
  EXPECT_THROW(aggregate(ups, w1), DimensionError);
}

TEST(ServerStep, FedAvgMRecurrence) {
  const GlobalModel x0 = tiny_model(8), a1 = tiny_model(9), a2 = tiny_model(10);
  const double beta = 0.7;
  ServerStep s1 = server_step_fedavgm(x0, a1, {}, beta);
  ServerStep s2 = server_step_fedavgm(s1.model, a2, s1.buffer, beta);
  const auto f0 = flatten(x0), f1 = flatten(a1), f2 = flatten(a2), r1 = flatten(s1.model),
             r2 = flatten(s2.model);
  for (std::size_t i = 0; i < f0.size(); ++i) {
    const double v1 = f0[i] - f1[i];
    const double x1 = f0[i] - v1;
    const double v2 = beta * v1 + (x1 - f2[i]);
    EXPECT_NEAR(r1[i], x1, 1e-15);
    EXPECT_NEAR(r2[i], x1 - v2, 1e-14);
  }
  const ServerStep plain = server_step_fedavgm(x0, a1, {}, 0.0);
  const auto fp = flatten(plain.model);
  for (std::size_t i = 0; i < fp.size(); ++i) EXPECT_NEAR(fp[i], f1[i], 1e-15);
  EXPECT_EQ(server_step_fedavg(x0, a1), a1);
}

TEST(Evaluate, ConstantPredictorAndExclusions) {
  auto shards = synth_client_shards(label_shift(11, 4));
  GlobalModel m = tiny_model(12, 32, 6, 5);
  for (double& v : m.head.weight.data()) v = 0.0;
  m.head.bias = Matrix::from_rows({{0.0, 0.0, 1.0, 0.0, 0.0}});
  shards.push_back(ClientShard{});
  shards.back().client_id = 99;
  shards.back().label_table = shards[0].label_table;
  shards.back().pairs.assign(shards[0].pairs.begin(), shards[0].pairs.begin() + 4);
  const EvalResult r = evaluate(m, shards);
  ASSERT_EQ(r.per_client.size(), 4u);
  ASSERT_EQ(r.excluded, std::vector<std::uint32_t>{99});
  double sum = 0.0;
  for (std::size_t c = 0; c < 4; ++c) {
    const auto& s = shards[c];
    std::size_t hits = 0;
    for (std::size_t i = s.n_train(); i < s.pairs.size(); ++i) hits += s.pairs[i].label == 2;
    const double acc = static_cast<double>(hits) / static_cast<double>(s.n_test());
    EXPECT_EQ(r.per_client[c].accuracy, acc);
    sum += acc;
  }
  EXPECT_DOUBLE_EQ(r.mean_accuracy, sum / 4.0);
  const std::vector<ClientShard> none = {shards.back()};
  EXPECT_THROW(evaluate(m, none), DomainError);
}

TEST(RunExperiment, SingleClientAlwaysSelected) {
  const auto shards = synth_client_shards(label_shift(13, 1));
  FlConfig c;
  c.rounds = 3;
  c.local_epochs = 1;
  c.seed = 13;
  const ExperimentResult r = run_experiment(shards, {}, c);
  ASSERT_EQ(r.rounds.size(), 3u);
  for (const auto& l : r.rounds) {
    EXPECT_EQ(l.selected, std::vector<std::uint32_t>{0});
    EXPECT_EQ(l.agg_weights, std::vector<double>{1.0});
    EXPECT_EQ(l.probs, std::vector<double>{1.0});
  }
}

TEST(RunExperiment, DefaultWeightsFollowTrainCounts) {
  SynthesisSpec s = label_shift(14, 10);
  s.samples_min = 40;
  s.samples_max = 120;
  const auto shards = synth_client_shards(s);
  FlConfig c;
  c.rounds = 4;
  c.fraction = 0.3;
  c.local_epochs = 1;
  c.seed = 14;
  const ExperimentResult r = run_experiment(shards, {}, c);
  for (const auto& l : r.rounds) {
    ASSERT_EQ(l.selected.size(), 3u);
    EXPECT_TRUE(std::is_sorted(l.selected.begin(), l.selected.end()));
    double total = 0.0;
    for (auto id : l.selected) total += static_cast<double>(shards[id].n_train());
    double sum = 0.0;
    for (std::size_t j = 0; j < 3; ++j) {
      EXPECT_DOUBLE_EQ(l.agg_weights[j], static_cast<double>(shards[l.selected[j]].n_train()) / total);
      EXPECT_DOUBLE_EQ(l.probs[j], 0.1);
      sum += l.agg_weights[j];
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
  double best = -1.0;
  std::size_t best_round = 0;
  for (const auto& l : r.rounds) {
    if (l.mean_accuracy > best) {
      best = l.mean_accuracy;
      best_round = l.round;
    }
  }
  EXPECT_EQ(r.best_round, best_round);
  EXPECT_EQ(r.best_mean_accuracy, best);
  EXPECT_EQ(r.final_mean_accuracy, r.rounds.back().mean_accuracy);
}

TEST(RunExperiment, EnhancementsNeedIndices) {
  const auto shards = synth_client_shards(label_shift(15, 3));
  FlConfig c;
  c.rounds = 1;
  for (int which = 0; which < 3; ++which) {
    FlConfig e = c;
    e.enhancements.sampling = which == 0;
    e.enhancements.aggregation = which == 1;
    e.enhancements.local_reg = which == 2;
    EXPECT_THROW(run_experiment(shards, {}, e), ConfigError);
  }
  std::vector<ClientIndex> partial = {ClientIndex{0, 0, Vector(4, 1.0), Vector(4, 1.0)}};
  c.enhancements.sampling = true;
  EXPECT_THROW(run_experiment(shards, partial, c), ConfigError);
}

TEST(RunExperiment, ThreadCountDoesNotChangeResults) {
  const auto shards = synth_client_shards(label_shift(16, 10));
  IndexGenConfig ic;
  ic.epochs = 2;
  ic.seed = 16;
  const auto idx = compute_client_indices(train_global(shards, ic), shards);
  FlConfig c;
  c.rounds = 4;
  c.fraction = 0.5;
  c.local_epochs = 2;
  c.seed = 16;
  c.enhancements.sampling = c.enhancements.aggregation = c.enhancements.local_reg = true;
  const ExperimentResult one = run_experiment(shards, idx, c);
  c.threads = 4;
  const ExperimentResult four = run_experiment(shards, idx, c);
  EXPECT_EQ(round_log_csv(one.rounds), round_log_csv(four.rounds));
  EXPECT_EQ(one.final_model, four.final_model);
  ASSERT_TRUE(one.final_model.branch.has_value());
}

TEST(RunExperiment, MatchesReferenceFedAvgLoop) {
  const auto shards = synth_client_shards(label_shift(17, 10));
  for (bool momentum : {false, true}) {
    FlConfig c;
    c.rounds = 5;
    c.fraction = 0.2;
    c.local_epochs = 2;
    c.seed = 17;
    c.algorithm = momentum ? ServerAlgorithm::FedAvgM : ServerAlgorithm::FedAvg;
    const ExperimentResult r = run_experiment(shards, {}, c);
    fedidx::testing::RefSettings rs;
    rs.rounds = 5;
    rs.fraction = 0.2;
    rs.local_epochs = 2;
    rs.seed = 17;
    rs.server_momentum_on = momentum;
    const auto ref = fedidx::testing::reference_fedavg(shards, rs);
    for (std::size_t t = 0; t < 5; ++t) {
      EXPECT_EQ(r.rounds[t].selected, ref.selected[t]);
      EXPECT_EQ(r.rounds[t].mean_accuracy, ref.mean_accuracy[t]) << "round " << t + 1;
    }
    EXPECT_EQ(r.final_model.backbone.layers[0].weight, ref.final_net.w1);
    EXPECT_EQ(r.final_model.head.bias, ref.final_net.b2);
  }
}

TEST(RoundLog, CsvLayout) {
  RoundLog l;
  l.round = 3;
  l.selected = {2, 7};
  l.probs = {0.25, 0.5};
  l.agg_weights = {0.4, 0.6};
  l.mean_accuracy = 0.75;
  const std::vector<RoundLog> logs = {l};
  EXPECT_EQ(round_log_csv(logs), "round,client_ids,probs,agg_weights,mean_acc\n3,2;7,0.25;0.5,0.4;0.6,0.75\n");
}

TEST(Config, ValidationAndNames) {
  FlConfig c;
  EXPECT_NO_THROW(validate(c));
  FlConfig bad = c;
  bad.rounds = 0;
  EXPECT_THROW(validate(bad), ConfigError);
  bad = c;
  bad.fraction = 0.0;
  EXPECT_THROW(validate(bad), ConfigError);
  bad = c;
  bad.enhancements.lambda1 = 0.0;
  EXPECT_THROW(validate(bad), ConfigError);
  EXPECT_EQ(server_algorithm_from_string(to_string(ServerAlgorithm::FedAvgM)), ServerAlgorithm::FedAvgM);
  EXPECT_THROW(server_algorithm_from_string("fedprox"), ConfigError);
}
