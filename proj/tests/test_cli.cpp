#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "fedidx/cli.hpp"
#include "fedidx/errors.hpp"

using namespace fedidx;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / (std::string("fedidx_cli_") + info->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  static json small_config() {
    return {{"seed", 5},
            {"data", {{"n_domains", 2}, {"clients_per_domain", 3}, {"samples_min", 40}, {"samples_max", 60}}},
            {"index", {{"epochs", 2}, {"rounds", 2}}},
            {"fl", {{"rounds", 2}, {"fraction", 0.5}, {"local_epochs", 1}}}};
  }

  fs::path write_config(const json& j, const std::string& name = "config.json") {
    json c = j;
    if (!c.contains("output_dir")) c["output_dir"] = (dir_ / "out").string();
    const fs::path p = dir_ / name;
    std::ofstream(p) << c.dump(2);
    return p;
  }

  int run(std::vector<std::string> args) {
    args.insert(args.begin(), "fedidx");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    out_.str("");
    err_.str("");
    return run_cli(static_cast<int>(argv.size()), argv.data(), out_, err_);
  }

  static std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }

  fs::path dir_;
  std::ostringstream out_, err_;
};

}  // namespace

TEST(ConfigParse, DefaultsAndRoundTrip) {
  const ExperimentConfig c = parse_config(json{{"seed", 3}});
  EXPECT_EQ(c.seed, 3u);
  EXPECT_EQ(c.fl.rounds, FlConfig{}.rounds);
  EXPECT_EQ(c.index.batch_size, 128u);
  const json echoed = to_json(c);
  EXPECT_EQ(to_json(parse_config(echoed)), echoed);
  for (const char* section : {"data", "index", "fl", "enhancements"}) {
    EXPECT_TRUE(echoed.contains(section)) << section;
  }
}

TEST(ConfigParse, UnknownKeysAreErrors) {
  for (const json& doc : {json{{"seed", 1}, {"sed", 2}}, json{{"seed", 1}, {"fl", {{"roundz", 3}}}},
                          json{{"seed", 1}, {"enhancements", {{"tau", 1.0}, {"lambda", 2.0}}}}}) {
    try {
      parse_config(doc);
      ADD_FAILURE() << "accepted " << doc.dump();
    } catch (const ConfigError& e) {
      EXPECT_NE(std::string(e.what()).find("unknown key"), std::string::npos) << e.what();
    }
  }
}

TEST(ConfigParse, TypeAndValueErrors) {
  EXPECT_THROW(parse_config(json{{"seed", "x"}}), ConfigError);
  EXPECT_THROW(parse_config(json{{"fl", {{"rounds", -1}}}}), ConfigError);
  EXPECT_THROW(parse_config(json{{"fl", {{"algorithm", "fedprox"}}}}), ConfigError);
  EXPECT_THROW(parse_config(json{{"index", {{"strategy", "hybrid"}}}}), ConfigError);
  EXPECT_THROW(parse_config(json::array()), ConfigError);
}

TEST(ConfigParse, SeedMustBeExplicit) {
  ExperimentConfig c = parse_config(json::object());
  EXPECT_FALSE(c.seed.has_value());
  EXPECT_THROW(resolve_seed(c), ConfigError);
  c.seed = 11;
  resolve_seed(c);
  EXPECT_EQ(c.data.seed, 11u);
  EXPECT_EQ(c.fl.seed, 11u);
  EXPECT_EQ(c.index.seed, 11u);
}

TEST_F(CliTest, GenDataIsDeterministicAndCreatesDirs) {
  json cfg = small_config();
  cfg["output_dir"] = (dir_ / "nested" / "deeper").string();
  const fs::path p = write_config(cfg);
  ASSERT_EQ(run({"gen-data", "--config", p.string()}), 0) << err_.str();
  const fs::path shards = dir_ / "nested" / "deeper" / "shards.fidx";
  ASSERT_TRUE(fs::exists(shards));
  EXPECT_TRUE(fs::exists(dir_ / "nested" / "deeper" / "shards.json"));
  const std::string first = slurp(shards);
  ASSERT_EQ(run({"gen-data", "--config", p.string()}), 0);
  EXPECT_EQ(slurp(shards), first);
  ASSERT_EQ(run({"gen-data", "--config", p.string(), "--seed", "6"}), 0);
  EXPECT_NE(slurp(shards), first);
}

TEST_F(CliTest, ExitCodes) {
  json bad_dims = small_config();
  bad_dims["data"]["d_emb"] = 6;  // needs at least classes + domains = 7
  EXPECT_EQ(run({"gen-data", "--config", write_config(bad_dims).string()}), 2);

  json no_seed = small_config();
  no_seed.erase("seed");
  EXPECT_EQ(run({"gen-data", "--config", write_config(no_seed).string()}), 2);
  EXPECT_NE(err_.str().find("seed"), std::string::npos);

  json typo = small_config();
  typo["fl"]["lr_"] = 0.1;
  EXPECT_EQ(run({"gen-data", "--config", write_config(typo).string()}), 2);

  EXPECT_EQ(run({"gen-data", "--config", (dir_ / "missing.json").string()}), 2);
  std::ofstream(dir_ / "broken.json") << "{ not json";
  EXPECT_EQ(run({"gen-data", "--config", (dir_ / "broken.json").string()}), 2);
  EXPECT_EQ(run({"no-such-command"}), 2);
  EXPECT_EQ(run({"gen-data"}), 2);

  const fs::path ok = write_config(small_config());
  EXPECT_EQ(run({"train-index", "--config", ok.string()}), 2);  // no shards yet
  ASSERT_EQ(run({"gen-data", "--config", ok.string()}), 0);
  EXPECT_EQ(run({"run-fl", "--config", ok.string(), "--enhancements", "all"}), 2);  // no index
  EXPECT_NE(err_.str().find("index"), std::string::npos);

  json diverge = small_config();
  diverge["fl"]["lr"] = 1e300;
  EXPECT_EQ(run({"run-fl", "--config", write_config(diverge, "diverge.json").string()}), 3);
}

TEST_F(CliTest, TrainIndexOutputs) {
  const fs::path p = write_config(small_config());
  ASSERT_EQ(run({"gen-data", "--config", p.string()}), 0);
  ASSERT_EQ(run({"train-index", "--config", p.string()}), 0) << err_.str();
  const fs::path out = dir_ / "out";
  const std::string params = slurp(out / "index_params.dsai");
  const std::string csv = slurp(out / "index.csv");
  ASSERT_EQ(run({"train-index", "--config", p.string()}), 0);
  EXPECT_EQ(slurp(out / "index_params.dsai"), params);
  EXPECT_EQ(slurp(out / "index.csv"), csv);

  json fed = small_config();
  fed["index"]["strategy"] = "federated";
  ASSERT_EQ(run({"train-index", "--config", write_config(fed, "fed.json").string()}), 0);
  EXPECT_NE(slurp(out / "index_params.dsai"), params);

  json zero = small_config();
  zero["index"]["epochs"] = 0;
  ASSERT_EQ(run({"train-index", "--config", write_config(zero, "zero.json").string()}), 0);
  const ExperimentConfig zc = [&] {
    ExperimentConfig c = load_config(dir_ / "zero.json");
    resolve_seed(c);
    return c;
  }();
  const auto shards = load_shards(out / "shards.fidx");
  Rng rng = make_rng(zc.index.seed, {stream::kInit});
  DsaIgnArch arch = zc.index.arch;
  arch.d_emb = shards[0].d_emb();
  EXPECT_EQ(read_index_csv(out / "index.csv"),
            compute_client_indices(init_dsa_ign(arch, rng), shards));
}

TEST_F(CliTest, RunFlVariantsAndDeterminism) {
  const fs::path p = write_config(small_config());
  ASSERT_EQ(run({"gen-data", "--config", p.string()}), 0);
  ASSERT_EQ(run({"train-index", "--config", p.string()}), 0);
  const fs::path out = dir_ / "out";
  ASSERT_EQ(run({"run-fl", "--config", p.string(), "--enhancements", "all"}), 0) << err_.str();
  ASSERT_EQ(run({"run-fl", "--config", p.string(), "--enhancements", "none"}), 0) << err_.str();
  ASSERT_EQ(run({"run-fl", "--config", p.string()}), 0);
  for (const char* f : {"rounds_all.csv", "summary_all.json", "rounds_none.csv", "summary_none.json",
                        "rounds.csv", "summary.json", "manifest_run-fl_all.json"}) {
    EXPECT_TRUE(fs::exists(out / f)) << f;
  }
  const json all = json::parse(slurp(out / "summary_all.json"));
  const json none = json::parse(slurp(out / "summary_none.json"));
  EXPECT_TRUE(all["config"]["enhancements"]["sampling"].get<bool>());
  EXPECT_FALSE(none["config"]["enhancements"]["local_reg"].get<bool>());
  EXPECT_EQ(all["rounds_run"], 2);
  for (const char* k : {"best_mean_accuracy", "final_mean_accuracy", "best_round"}) {
    EXPECT_TRUE(all.contains(k)) << k;
  }

  const json manifest = json::parse(slurp(out / "manifest_run-fl_all.json"));
  for (const auto& [name, path] : manifest["artifacts"].items()) {
    EXPECT_TRUE(fs::exists(path.get<std::string>())) << name;
  }
  EXPECT_EQ(manifest["config"], all["config"]);

  const std::string rounds = slurp(out / "rounds_all.csv");
  const std::string summary = slurp(out / "summary_all.json");
  ASSERT_EQ(run({"run-fl", "--config", p.string(), "--enhancements", "all", "--threads", "3"}), 0);
  EXPECT_EQ(slurp(out / "rounds_all.csv"), rounds);
  json rerun = json::parse(slurp(out / "summary_all.json"));
  rerun["config"]["fl"]["threads"] = 1;
  EXPECT_EQ(rerun, json::parse(summary));
}

TEST_F(CliTest, HeatmapShapes) {
  const fs::path one = dir_ / "one.csv";
  std::ofstream(one) << "client_id,domain_id,part,dim_0,dim_1\n4,0,f,0.5,2\n4,0,l,1,0\n";
  ASSERT_EQ(run({"export-heatmap", "--index", one.string(), "--out", (dir_ / "h1").string()}), 0)
      << err_.str();
  const std::string single = slurp(dir_ / "h1" / "heatmap_feature.csv");
  EXPECT_NE(single.find("4"), std::string::npos);
  EXPECT_NE(single.find(",1\n"), std::string::npos) << single;

  const fs::path p = write_config(small_config());
  ASSERT_EQ(run({"gen-data", "--config", p.string()}), 0);
  ASSERT_EQ(run({"train-index", "--config", p.string()}), 0);
  ASSERT_EQ(run({"export-heatmap", "--config", p.string(), "--part", "full"}), 0) << err_.str();
  std::ifstream in(dir_ / "out" / "heatmap_full.csv");
  std::string line;
  std::getline(in, line);
  std::vector<std::vector<double>> m;
  while (std::getline(in, line)) {
    std::stringstream ss(line);
    std::string cell;
    std::getline(ss, cell, ',');
    m.emplace_back();
    while (std::getline(ss, cell, ',')) m.back().push_back(std::stod(cell));
  }
  ASSERT_EQ(m.size(), 6u);
  for (std::size_t i = 0; i < 6; ++i) {
    ASSERT_EQ(m[i].size(), 6u);
    EXPECT_NEAR(m[i][i], 1.0, 1e-12);
    for (std::size_t j = 0; j < 6; ++j) EXPECT_EQ(m[i][j], m[j][i]);
  }

  const fs::path bad = dir_ / "bad.csv";
  std::ofstream(bad) << "client_id,domain_id,part,dim_0\n0,0,f,abc\n";
  EXPECT_EQ(run({"export-heatmap", "--index", bad.string(), "--out", dir_.string()}), 2);
  EXPECT_NE(err_.str().find("line 2"), std::string::npos) << err_.str();
}
