#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedidx/embeddings.hpp"
#include "fedidx/fl_sim.hpp"
#include "fedidx/index_gen.hpp"

namespace fedidx {

inline constexpr const char* kVersion = "0.1.0";

struct ExperimentConfig {
  std::optional<std::uint64_t> seed;
  std::filesystem::path output_dir = "out";
  SynthesisSpec data;
  std::optional<std::filesystem::path> shards_path;  // data.shards: load instead of synthesising
  IndexGenConfig index;
  FlConfig fl;
};

// Strict parse: unknown keys, wrong types and invalid values are ConfigErrors.
ExperimentConfig parse_config(const nlohmann::json& doc);
ExperimentConfig load_config(const std::filesystem::path& path);
// Every field, defaults included. Seeds are pushed into the nested sections.
nlohmann::json to_json(const ExperimentConfig& config);

// Copies the top-level seed into every section; ConfigError when absent.
void resolve_seed(ExperimentConfig& config);

struct RunManifest {
  std::string command;
  std::string variant;  // file-name suffix, e.g. "_all" for run-fl --enhancements all
  nlohmann::json config;
  std::vector<std::pair<std::string, std::filesystem::path>> artifacts;
  double duration_seconds = 0.0;
};
nlohmann::json to_json(const RunManifest& manifest);

enum class EnhancementOverride { Config, All, None };

struct RunFlOptions {
  std::optional<std::filesystem::path> index_csv;
  EnhancementOverride enhancements = EnhancementOverride::Config;
};

RunManifest cmd_gen_data(const ExperimentConfig& config);
RunManifest cmd_train_index(const ExperimentConfig& config);
RunManifest cmd_run_fl(const ExperimentConfig& config, const RunFlOptions& options);
RunManifest cmd_export_heatmap(const std::filesystem::path& index_csv, IndexPart part,
                               const std::filesystem::path& output_dir);

// Summary document written by run-fl.
nlohmann::json experiment_summary(const ExperimentResult& result, const ExperimentConfig& config);

// Exit codes: 0 success, 2 usage/config/input error, 3 non-finite numbers
// during a run, 1 anything else.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace fedidx
