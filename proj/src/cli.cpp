#include "fedidx/cli.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <set>

#include <CLI11.hpp>

#include "fedidx/errors.hpp"

namespace fedidx {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Reads typed fields out of one JSON object and remembers which keys were
// used, so leftovers can be reported as unknown.
class Section {
 public:
  Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw ConfigError("'" + name_ + "' must be a JSON object");
  }

  bool has(const char* key) const { return j_.contains(key); }
  // For keys whose value is consumed elsewhere.
  void mark(const char* key) { seen_.insert(key); }

  template <class U>
    requires std::is_unsigned_v<U> && (!std::is_same_v<U, bool>)
  void get(const char* key, U& out) {
    if (const json* v = find(key)) {
      // Documents built in code hold small literals as signed integers.
      const bool ok = v->is_number_unsigned() ||
                      (v->is_number_integer() && v->get<std::int64_t>() >= 0);
      if (!ok) throw type_error(key, "a non-negative integer");
      out = v->get<U>();
    }
  }
  void get(const char* key, double& out) {
    if (const json* v = find(key)) {
      if (!v->is_number()) throw type_error(key, "a number");
      const double d = v->get<double>();
      if (!std::isfinite(d)) throw ConfigError(path(key) + " must be finite");
      out = d;
    }
  }
  void get(const char* key, bool& out) {
    if (const json* v = find(key)) {
      if (!v->is_boolean()) throw type_error(key, "true or false");
      out = v->get<bool>();
    }
  }
  void get(const char* key, std::string& out) {
    if (const json* v = find(key)) {
      if (!v->is_string()) throw type_error(key, "a string");
      out = v->get<std::string>();
    }
  }
  void get(const char* key, std::optional<double>& out) {
    if (const json* v = find(key)) {
      if (v->is_null()) {
        out.reset();
        return;
      }
      double d = 0.0;
      get(key, d);
      out = d;
    }
  }
  template <class Enum, class Parse>
  void get_enum(const char* key, Enum& out, Parse parse) {
    std::string s;
    if (!has(key)) {
      seen_.insert(key);
      return;
    }
    get(key, s);
    try {
      out = parse(s);
    } catch (const Error& e) {
      throw ConfigError(path(key) + ": " + e.what());
    }
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError("unknown key '" + path(k.c_str()) + "'");
    }
  }

 private:
  const json* find(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }
  std::string path(const char* key) const { return name_.empty() ? key : name_ + "." + key; }
  ConfigError type_error(const char* key, const char* expected) const {
    return ConfigError(path(key) + " must be " + expected);
  }

  const json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

void parse_data(const json& j, ExperimentConfig& c) {
  Section s(j, "data");
  SynthesisSpec& d = c.data;
  s.get("n_classes", d.n_classes);
  s.get("n_domains", d.n_domains);
  s.get("clients_per_domain", d.clients_per_domain);
  s.get("samples_min", d.samples_min);
  s.get("samples_max", d.samples_max);
  s.get("d_emb", d.d_emb);
  s.get("label_align", d.label_align);
  s.get("domain_strength", d.domain_strength);
  s.get("noise_sigma", d.noise_sigma);
  s.get("dirichlet_alpha", d.dirichlet_alpha);
  if (s.has("shards")) {
    std::string p;
    s.get("shards", p);
    c.shards_path = p;
  }
  s.finish();
}

void parse_index(const json& j, IndexGenConfig& c) {
  Section s(j, "index");
  s.get("d_index", c.arch.d_index);
  s.get("decomposition_layers", c.arch.decomposition_layers);
  s.get_enum("hidden_activation", c.arch.hidden_activation, activation_from_string);
  s.get_enum("decoder", c.arch.decoder, decoder_kind_from_string);
  s.get("w_sim", c.weights.sim);
  s.get("w_orth", c.weights.orth);
  s.get("w_recon", c.weights.recon);
  s.get("w_div", c.weights.div);
  s.get("orth_normalized", c.orth_normalized);
  s.get_enum("strategy", c.strategy, index_strategy_from_string);
  s.get("epochs", c.epochs);
  s.get("batch_size", c.batch_size);
  s.get("local_batch_size", c.local_batch_size);
  s.get("lr", c.learning_rate);
  s.get("momentum", c.momentum);
  s.get("weight_decay", c.weight_decay);
  s.get("rounds", c.rounds);
  s.get("fraction", c.fraction);
  s.get("local_epochs", c.local_epochs);
  s.finish();
}

void parse_fl(const json& j, FlConfig& c) {
  Section s(j, "fl");
  s.get("rounds", c.rounds);
  s.get("fraction", c.fraction);
  s.get("local_epochs", c.local_epochs);
  s.get("lr", c.learning_rate);
  s.get("momentum", c.momentum);
  s.get("weight_decay", c.weight_decay);
  s.get_enum("algorithm", c.algorithm, server_algorithm_from_string);
  s.get("server_momentum", c.server_momentum);
  s.get("batch_size", c.batch_size);
  s.get("hidden", c.hidden);
  s.get("threads", c.threads);
  s.finish();
}

std::string kl_direction_name(bool main_first) { return main_first ? "main_first" : "projected_first"; }

bool kl_direction_from_string(const std::string& s) {
  if (s == "main_first") return true;
  if (s == "projected_first") return false;
  throw ConfigError("unknown KL direction '" + s + "' (expected main_first or projected_first)");
}

void parse_enhancements(const json& j, EnhancementConfig& e) {
  Section s(j, "enhancements");
  s.get("sampling", e.sampling);
  s.get("tau", e.tau);
  s.get("aggregation", e.aggregation);
  s.get("gamma", e.gamma);
  s.get("lambda1", e.lambda1);
  s.get("local_reg", e.local_reg);
  s.get("reg_weight", e.reg.reg_weight);
  s.get("reg_orth_normalized", e.reg.orth_normalized);
  s.get_enum("kl_direction", e.reg.main_is_first, kl_direction_from_string);
  s.get("stop_main", e.reg.stop_main);
  s.finish();
}

}  // namespace

ExperimentConfig parse_config(const json& doc) {
  ExperimentConfig c;
  Section top(doc, "");
  if (top.has("seed")) {
    std::uint64_t seed = 0;
    top.get("seed", seed);
    c.seed = seed;
  }
  if (top.has("output_dir")) {
    std::string out;
    top.get("output_dir", out);
    c.output_dir = out;
  }
  if (doc.contains("data")) parse_data(doc.at("data"), c);
  if (doc.contains("index")) parse_index(doc.at("index"), c.index);
  if (doc.contains("fl")) parse_fl(doc.at("fl"), c.fl);
  if (doc.contains("enhancements")) parse_enhancements(doc.at("enhancements"), c.fl.enhancements);
  for (const char* k : {"data", "index", "fl", "enhancements"}) top.mark(k);
  top.finish();

  if (!c.shards_path) validate(c.data);
  validate(c.index);
  validate(c.fl);
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return parse_config(doc);
}

void resolve_seed(ExperimentConfig& c) {
  if (!c.seed) throw ConfigError("no seed given: set \"seed\" in the config or pass --seed");
  c.data.seed = *c.seed;
  c.index.seed = *c.seed;
  c.fl.seed = *c.seed;
}

json to_json(const ExperimentConfig& c) {
  json data = {
      {"n_classes", c.data.n_classes},
      {"n_domains", c.data.n_domains},
      {"clients_per_domain", c.data.clients_per_domain},
      {"samples_min", c.data.samples_min},
      {"samples_max", c.data.samples_max},
      {"d_emb", c.data.d_emb},
      {"label_align", c.data.label_align},
      {"domain_strength", c.data.domain_strength},
      {"noise_sigma", c.data.noise_sigma},
      {"dirichlet_alpha", c.data.dirichlet_alpha ? json(*c.data.dirichlet_alpha) : json(nullptr)},
  };
  if (c.shards_path) data["shards"] = c.shards_path->string();
  const IndexGenConfig& i = c.index;
  json index = {
      {"d_index", i.arch.d_index},
      {"decomposition_layers", i.arch.decomposition_layers},
      {"hidden_activation", to_string(i.arch.hidden_activation)},
      {"decoder", to_string(i.arch.decoder)},
      {"w_sim", i.weights.sim},
      {"w_orth", i.weights.orth},
      {"w_recon", i.weights.recon},
      {"w_div", i.weights.div},
      {"orth_normalized", i.orth_normalized},
      {"strategy", to_string(i.strategy)},
      {"epochs", i.epochs},
      {"batch_size", i.batch_size},
      {"local_batch_size", i.local_batch_size},
      {"lr", i.learning_rate},
      {"momentum", i.momentum},
      {"weight_decay", i.weight_decay},
      {"rounds", i.rounds},
      {"fraction", i.fraction},
      {"local_epochs", i.local_epochs},
  };
  const FlConfig& f = c.fl;
  json fl = {
      {"rounds", f.rounds},
      {"fraction", f.fraction},
      {"local_epochs", f.local_epochs},
      {"lr", f.learning_rate},
      {"momentum", f.momentum},
      {"weight_decay", f.weight_decay},
      {"algorithm", to_string(f.algorithm)},
      {"server_momentum", f.server_momentum},
      {"batch_size", f.batch_size},
      {"hidden", f.hidden},
      {"threads", f.threads},
  };
  const EnhancementConfig& e = f.enhancements;
  json enh = {
      {"sampling", e.sampling},
      {"tau", e.tau},
      {"aggregation", e.aggregation},
      {"gamma", e.gamma},
      {"lambda1", e.lambda1},
      {"local_reg", e.local_reg},
      {"reg_weight", e.reg.reg_weight},
      {"reg_orth_normalized", e.reg.orth_normalized},
      {"kl_direction", kl_direction_name(e.reg.main_is_first)},
      {"stop_main", e.reg.stop_main},
  };
  json out = {{"output_dir", c.output_dir.string()},
              {"data", data},
              {"index", index},
              {"fl", fl},
              {"enhancements", enh}};
  out["seed"] = c.seed ? json(*c.seed) : json(nullptr);
  return out;
}

json to_json(const RunManifest& m) {
  json artifacts = json::object();
  for (const auto& [name, path] : m.artifacts) artifacts[name] = path.string();
  return {{"command", m.command},
          {"version", kVersion},
          {"config", m.config},
          {"artifacts", artifacts},
          {"duration_seconds", m.duration_seconds}};
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw Error("write to '" + path.string() + "' failed");
}

fs::path shards_file(const ExperimentConfig& c) {
  return c.shards_path ? *c.shards_path : c.output_dir / "shards.fidx";
}

std::vector<ClientShard> read_shards(const ExperimentConfig& c) {
  const fs::path p = shards_file(c);
  if (!fs::exists(p)) {
    throw ConfigError("shard file '" + p.string() + "' not found; run gen-data first or set data.shards");
  }
  return load_shards(p);
}

}  // namespace

RunManifest cmd_gen_data(const ExperimentConfig& c) {
  const std::vector<ClientShard> shards = synth_client_shards(c.data);
  const fs::path shard_path = c.output_dir / "shards.fidx";
  const fs::path sidecar = c.output_dir / "shards.json";
  save_shards(shards, shard_path);
  json spec = to_json(c)["data"];
  spec.erase("shards");
  spec["seed"] = c.data.seed;
  write_text(sidecar, spec.dump(2) + "\n");
  return {"gen-data", "", to_json(c), {{"shards", shard_path}, {"shards_spec", sidecar}}, 0.0};
}

RunManifest cmd_train_index(const ExperimentConfig& c) {
  const std::vector<ClientShard> shards = read_shards(c);
  const DsaIgnParams params = train_index(shards, c.index);
  const std::vector<ClientIndex> indices = compute_client_indices(params, shards);
  const fs::path params_path = c.output_dir / "index_params.dsai";
  const fs::path csv_path = c.output_dir / "index.csv";
  save_dsa_ign(params, params_path);
  write_index_csv(indices, csv_path);
  return {"train-index", "", to_json(c), {{"index_params", params_path}, {"index_csv", csv_path}}, 0.0};
}

json experiment_summary(const ExperimentResult& r, const ExperimentConfig& c) {
  json per_client = json::array();
  for (const ClientAccuracy& a : r.rounds.back().per_client) {
    per_client.push_back({{"client_id", a.client_id}, {"accuracy", a.accuracy}});
  }
  json excluded = json::array();
  for (std::uint32_t id : r.rounds.back().excluded) excluded.push_back(id);
  return {{"version", kVersion},
          {"local_model", "mlp over embeddings: d_emb -> hidden (tanh) -> classes"},
          {"rounds_run", r.rounds.size()},
          {"best_round", r.best_round},
          {"best_mean_accuracy", r.best_mean_accuracy},
          {"final_mean_accuracy", r.final_mean_accuracy},
          {"final_per_client_accuracy", per_client},
          {"excluded_clients", excluded},
          {"config", to_json(c)}};
}

RunManifest cmd_run_fl(const ExperimentConfig& config, const RunFlOptions& options) {
  ExperimentConfig c = config;
  EnhancementConfig& e = c.fl.enhancements;
  std::string suffix;
  if (options.enhancements == EnhancementOverride::All) {
    e.sampling = e.aggregation = e.local_reg = true;
    suffix = "_all";
  } else if (options.enhancements == EnhancementOverride::None) {
    e.sampling = e.aggregation = e.local_reg = false;
    suffix = "_none";
  }
  const std::vector<ClientShard> shards = read_shards(c);
  std::vector<ClientIndex> indices;
  RunManifest m{"run-fl", suffix, {}, {}, 0.0};
  if (e.sampling || e.aggregation || e.local_reg) {
    const fs::path idx = options.index_csv ? *options.index_csv : c.output_dir / "index.csv";
    if (!fs::exists(idx)) {
      throw ConfigError("enhancements are enabled but index file '" + idx.string() +
                        "' does not exist; run train-index or pass --index");
    }
    indices = read_index_csv(idx);
    m.artifacts.emplace_back("index_csv", idx);
  }
  const ExperimentResult result = run_experiment(shards, indices, c.fl);
  const fs::path rounds_path = c.output_dir / ("rounds" + suffix + ".csv");
  const fs::path summary_path = c.output_dir / ("summary" + suffix + ".json");
  write_text(rounds_path, round_log_csv(result.rounds));
  write_text(summary_path, experiment_summary(result, c).dump(2) + "\n");
  m.config = to_json(c);
  m.artifacts.emplace_back("rounds_csv", rounds_path);
  m.artifacts.emplace_back("summary", summary_path);
  return m;
}

RunManifest cmd_export_heatmap(const fs::path& index_csv, IndexPart part, const fs::path& output_dir) {
  const std::vector<ClientIndex> indices = read_index_csv(index_csv);
  const Matrix sim = index_similarity_matrix(indices, part);
  const fs::path out = output_dir / ("heatmap_" + to_string(part) + ".csv");
  write_text(out, similarity_csv_string(indices, sim));
  return {"export-heatmap", "", json{{"index_csv", index_csv.string()}, {"part", to_string(part)}},
          {{"heatmap", out}}, 0.0};
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Federated client-index simulator"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kVersion));

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::string index_path;
  std::string part = "f";
  std::string enh = "config";
  std::size_t threads = 0;

  auto add_common = [&](CLI::App* cmd, bool config_required) {
    auto* opt = cmd->add_option("--config", config_path, "Experiment config (JSON)");
    if (config_required) opt->required();
    cmd->add_option("--seed", seed, "Override the config seed");
    cmd->add_option("--out", out_dir, "Override the output directory");
  };
  CLI::App* gen = app.add_subcommand("gen-data", "Generate synthetic client shards");
  add_common(gen, true);
  CLI::App* train = app.add_subcommand("train-index", "Train DSA-IGN and write client indices");
  add_common(train, true);
  CLI::App* run = app.add_subcommand("run-fl", "Run a federated experiment");
  add_common(run, true);
  run->add_option("--index", index_path, "Client index CSV (default: <out>/index.csv)");
  run->add_option("--enhancements", enh, "config | all | none")
      ->check(CLI::IsMember({"config", "all", "none"}));
  run->add_option("--threads", threads, "Clients trained concurrently per round");
  CLI::App* heat = app.add_subcommand("export-heatmap", "Write the client similarity matrix");
  add_common(heat, false);
  heat->add_option("--index", index_path, "Client index CSV (default: <out>/index.csv)");
  heat->add_option("--part", part, "f | l | full")->check(CLI::IsMember({"f", "l", "full"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  const auto start = std::chrono::steady_clock::now();
  try {
    ExperimentConfig cfg;
    if (!config_path.empty()) cfg = load_config(config_path);
    if (seed) cfg.seed = seed;
    if (!out_dir.empty()) cfg.output_dir = out_dir;
    if (threads > 0) cfg.fl.threads = threads;

    RunManifest manifest;
    if (heat->parsed()) {
      const fs::path idx = index_path.empty() ? cfg.output_dir / "index.csv" : fs::path(index_path);
      manifest = cmd_export_heatmap(idx, index_part_from_string(part), cfg.output_dir);
    } else {
      resolve_seed(cfg);
      if (gen->parsed()) {
        manifest = cmd_gen_data(cfg);
      } else if (train->parsed()) {
        manifest = cmd_train_index(cfg);
      } else {
        RunFlOptions opts;
        if (!index_path.empty()) opts.index_csv = index_path;
        opts.enhancements = enh == "all"    ? EnhancementOverride::All
                            : enh == "none" ? EnhancementOverride::None
                                            : EnhancementOverride::Config;
        manifest = cmd_run_fl(cfg, opts);
      }
    }
    manifest.duration_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const fs::path manifest_path = cfg.output_dir / ("manifest_" + manifest.command + manifest.variant + ".json");
    write_text(manifest_path, to_json(manifest).dump(2) + "\n");
    for (const auto& [name, path] : manifest.artifacts) out << name << ": " << path.string() << "\n";
    out << "manifest: " << manifest_path.string() << "\n";
    return 0;
  } catch (const NumericError& e) {
    err << "error: " << e.what() << "\n";
    return 3;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace fedidx
