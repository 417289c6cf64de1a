#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include "fedidx/embeddings.hpp"
#include "fedidx/errors.hpp"
#include "fedidx/numeric.hpp"
#include "fedidx/random.hpp"

using namespace fedidx;

namespace {

SynthesisSpec three_domain_spec(std::uint64_t seed) {
  SynthesisSpec s;
  s.n_classes = 5;
  s.n_domains = 3;
  s.clients_per_domain = 4;
  s.samples_min = 100;
  s.samples_max = 200;
  s.seed = seed;
  return s;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("fedidx_test_" + name);
}

}  // namespace

TEST(LabelEmbeddings, SingleClassIsUnit) {
  auto v = synth_label_embeddings(1, 8, 3);
  ASSERT_EQ(v.size(), 1u);
  EXPECT_NEAR(norm2(v[0]), 1.0, 1e-12);
}

TEST(LabelEmbeddings, FullBasisHasIdentityGram) {
  const std::size_t d = 16;
  auto v = synth_label_embeddings(d, d, 9);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) EXPECT_NEAR(dot(v[i], v[j]), i == j ? 1.0 : 0.0, 1e-9);
}

TEST(LabelEmbeddings, DeterministicAndOrthogonal) {
  auto a = synth_label_embeddings(5, 32, 42);
  auto b = synth_label_embeddings(5, 32, 42);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, synth_label_embeddings(5, 32, 43));
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = i + 1; j < 5; ++j) EXPECT_LT(std::abs(cosine_sim(a[i], a[j])), 1e-9);
  EXPECT_THROW(synth_label_embeddings(9, 8, 1), DomainError);
}

TEST(SynthSpec, Validation) {
  SynthesisSpec s = three_domain_spec(1);
  s.d_emb = 7;
  EXPECT_THROW(validate(s), ConfigError);
  s = three_domain_spec(1);
  s.samples_max = 50;
  EXPECT_THROW(validate(s), ConfigError);
  s = three_domain_spec(1);
  s.dirichlet_alpha = 0.0;
  EXPECT_THROW(validate(s), ConfigError);
  s = three_domain_spec(1);
  s.label_align = 1.5;
  EXPECT_THROW(validate(s), ConfigError);
}

TEST(SynthShards, InvariantsHold) {
  const auto shards = synth_client_shards(three_domain_spec(7));
  ASSERT_EQ(shards.size(), 12u);
  for (std::size_t i = 0; i < shards.size(); ++i) {
    const ClientShard& s = shards[i];
    EXPECT_EQ(s.client_id, i);
    EXPECT_EQ(s.domain_id, i / 4);
    EXPECT_GE(s.n_samples(), 100u);
    EXPECT_LE(s.n_samples(), 200u);
    for (const EmbeddingPair& p : s.pairs) {
      EXPECT_NEAR(norm2(p.image), 1.0, 1e-9);
      EXPECT_NEAR(norm2(p.label_emb), 1.0, 1e-9);
      ASSERT_GE(p.label, 0);
      ASSERT_LT(p.label, 5);
      const auto row = s.label_table.row(static_cast<std::size_t>(p.label));
      EXPECT_TRUE(std::equal(row.begin(), row.end(), p.label_emb.begin()));
    }
  }
  EXPECT_EQ(shards, synth_client_shards(three_domain_spec(7)));
}

TEST(SynthShards, NoiselessImageEqualsLabel) {
  SynthesisSpec s = three_domain_spec(2);
  s.noise_sigma = 0.0;
  s.domain_strength = 0.0;
  s.label_align = 1.0;
  for (const auto& shard : synth_client_shards(s))
    for (const auto& p : shard.pairs) {
      for (std::size_t t = 0; t < p.image.size(); ++t) EXPECT_NEAR(p.image[t], p.label_emb[t], 1e-15);
      EXPECT_NEAR(cosine_sim(p.image, p.label_emb), 1.0, 1e-15);
    }
}

TEST(SynthShards, NoDomainSignalWithoutStrength) {
  SynthesisSpec s;
  s.n_classes = 4;
  s.n_domains = 2;
  s.clients_per_domain = 10;
  s.samples_min = s.samples_max = 200;
  s.domain_strength = 0.0;
  s.noise_sigma = 0.5;
  s.seed = 5;
  const auto shards = synth_client_shards(s);
  const auto dirs = synth_domain_directions(s);
  // Two-sample test on the projection of D onto each domain direction.
  for (const Vector& e : dirs) {
    double sum[2] = {0, 0}, sq[2] = {0, 0};
    std::size_t n[2] = {0, 0};
    for (const auto& shard : shards)
      for (const auto& p : shard.pairs) {
        const double x = dot(p.image, e);
        sum[shard.domain_id] += x;
        sq[shard.domain_id] += x * x;
        ++n[shard.domain_id];
      }
    double mean[2], var[2];
    for (int k = 0; k < 2; ++k) {
      mean[k] = sum[k] / static_cast<double>(n[k]);
      var[k] = sq[k] / static_cast<double>(n[k]) - mean[k] * mean[k];
    }
    const double se = std::sqrt(var[0] / static_cast<double>(n[0]) + var[1] / static_cast<double>(n[1]));
    EXPECT_LT(std::abs(mean[0] - mean[1]), 3.0 * se);
  }
}

TEST(SynthShards, DomainMeanPointsToOwnDirection) {
  SynthesisSpec s = three_domain_spec(11);
  s.noise_sigma = 0.05;
  const auto shards = synth_client_shards(s);
  const auto dirs = synth_domain_directions(s);
  for (std::size_t dom = 0; dom < 3; ++dom) {
    Vector mean(s.d_emb, 0.0);
    for (const auto& shard : shards) {
      if (shard.domain_id != dom) continue;
      for (const auto& p : shard.pairs)
        for (std::size_t t = 0; t < s.d_emb; ++t) mean[t] += p.image[t];
    }
    const double own = cosine_sim(mean, dirs[dom]);
    for (std::size_t other = 0; other < 3; ++other) {
      if (other != dom) EXPECT_GT(own, cosine_sim(mean, dirs[other]));
    }
  }
}

TEST(ClassProportions, MatchesReferenceSamplerDrawForDraw) {
  SynthesisSpec s;
  s.n_classes = 2;
  s.n_domains = 1;
  s.clients_per_domain = 1000;
  s.dirichlet_alpha = 0.1;
  s.seed = 2024;
  const auto props = client_class_proportions(s);

  // Reference: per client, C fresh Gamma(alpha, 1) draws on the same stream, normalised.
  Rng rng = make_rng(s.seed, {stream::kClassMix});
  double max_sum = 0.0, max_sq = 0.0;
  for (std::size_t i = 0; i < 1000; ++i) {
    std::gamma_distribution<double> g(0.1, 1.0);
    const double a = g(rng), b = g(rng);
    const double pa = a / (a + b), pb = b / (a + b);
    EXPECT_EQ(props[i][0], pa);
    EXPECT_EQ(props[i][1], pb);
    const double m = std::max(props[i][0], props[i][1]);
    max_sum += m;
    max_sq += m * m;
  }
  const double mean_max = max_sum / 1000.0;

  // E[max(p, 1-p)] for p ~ Beta(a, a) by quadrature after u = (1-p)^a:
  // (2 / (a B(a,a))) * integral_0^{0.5^a} (1 - u^{1/a})^a du.
  const double a = 0.1;
  const double beta = std::tgamma(a) * std::tgamma(a) / std::tgamma(2 * a);
  const double upper = std::pow(0.5, a);
  const int n = 20000;
  double integral = 0.0;
  for (int k = 0; k <= n; ++k) {
    const double u = upper * k / n;
    const double f = std::pow(1.0 - std::pow(u, 1.0 / a), a);
    integral += f * (k == 0 || k == n ? 1.0 : (k % 2 ? 4.0 : 2.0));
  }
  integral *= upper / (3.0 * n);
  const double expected = 2.0 * integral / (a * beta);
  const double sd = std::sqrt(max_sq / 1000.0 - mean_max * mean_max);
  EXPECT_NEAR(mean_max, expected, 4.0 * sd / std::sqrt(1000.0));
  EXPECT_GT(expected, 0.9);
}

TEST(DirichletPartition, SingleClientGetsEverything) {
  std::vector<int> labels = {0, 1, 1, 2, 0, 2, 2};
  auto parts = dirichlet_partition(labels, 0.5, 1, 3);
  ASSERT_EQ(parts.size(), 1u);
  std::vector<std::size_t> all(labels.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  EXPECT_EQ(parts[0], all);
}

TEST(DirichletPartition, LargeAlphaFollowsGlobalHistogram) {
  std::vector<int> labels;
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 2000 + 500 * c; ++i) labels.push_back(c);
  const std::size_t m = 4;
  auto parts = dirichlet_partition(labels, 1e6, m, 17);
  const double total = static_cast<double>(labels.size());
  for (const auto& part : parts) {
    std::vector<double> hist(3, 0.0);
    for (std::size_t i : part) hist[static_cast<std::size_t>(labels[i])] += 1.0;
    for (int c = 0; c < 3; ++c) {
      const double global = (2000.0 + 500.0 * c) / total;
      const double local = hist[static_cast<std::size_t>(c)] / static_cast<double>(part.size());
      EXPECT_NEAR(local / global, 1.0, 0.05);
    }
  }
}

TEST(DirichletPartition, CoversEveryIndexOnceAndNoEmptyClient) {
  std::vector<int> labels;
  for (int i = 0; i < 60; ++i) labels.push_back(i % 3);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto parts = dirichlet_partition(labels, 0.05, 10, seed);
    std::vector<int> seen(labels.size(), 0);
    for (const auto& p : parts) {
      EXPECT_FALSE(p.empty());
      EXPECT_TRUE(std::is_sorted(p.begin(), p.end()));
      for (std::size_t i : p) ++seen[i];
    }
    for (int s : seen) EXPECT_EQ(s, 1);
    EXPECT_EQ(parts, dirichlet_partition(labels, 0.05, 10, seed));
  }
  EXPECT_THROW(dirichlet_partition(labels, 0.1, 61, 1), DomainError);
}

TEST(ShardFile, RoundTripIsBitExact) {
  const auto shards = synth_client_shards(three_domain_spec(3));
  const auto path = temp_path("roundtrip.fidx");
  save_shards(shards, path);
  EXPECT_EQ(load_shards(path), shards);
  std::filesystem::remove(path);
}

TEST(ShardFile, EmptyListRoundTrips) {
  const std::vector<ClientShard> none;
  EXPECT_TRUE(decode_shards(encode_shards(none)).empty());
}

TEST(ShardFile, TruncatedRecordIsRejectedWithOffset) {
  SynthesisSpec s = three_domain_spec(4);
  s.n_domains = 1;
  s.clients_per_domain = 1;
  const auto bytes = encode_shards(synth_client_shards(s));
  // Cut inside the first sample's image vector: header 12 + client header 20 + label 4 + 3 doubles.
  const std::size_t cut = 12 + 20 + 4 + 24;
  std::vector<std::uint8_t> truncated(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
  try {
    decode_shards(truncated);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    // Reported at the first sample record, which cannot be complete.
    EXPECT_EQ(e.offset(), 12u + 20u);
    EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos);
  }
}

TEST(ShardFile, CorruptHeadersAreRejected) {
  auto bytes = encode_shards(synth_client_shards(three_domain_spec(4)));
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_shards(bad_magic), FormatError);
  auto bad_version = bytes;
  bad_version[4] = 9;
  EXPECT_THROW(decode_shards(bad_version), FormatError);
  auto trailing = bytes;
  trailing.push_back(0);
  EXPECT_THROW(decode_shards(trailing), FormatError);
  EXPECT_THROW(load_shards(temp_path("does_not_exist.fidx")), Error);
}

TEST(ShardFile, EmptyShardIsNotWritable) {
  ClientShard s;
  s.label_table = Matrix(2, 4);
  const std::vector<ClientShard> v = {s};
  EXPECT_THROW(encode_shards(v), DomainError);
}
