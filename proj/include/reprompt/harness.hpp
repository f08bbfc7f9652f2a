#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "reprompt/analysis.hpp"
#include "reprompt/error.hpp"
#include "reprompt/gcg.hpp"
#include "reprompt/soft_prompt.hpp"
#include "reprompt/train.hpp"

namespace reprompt::harness {

inline constexpr int kManifestVersion = 1;

struct SizeSpec {
  std::string label;
  ModelConfig config;
};

/// How a hard reconstruction run picks its starting prompt.
enum class HardInit { kRandom, kRepeat, kCorrupt, kText };

struct HardRun {
  std::string name = "gcg";  // output directory under reconstruct/
  HardInit init = HardInit::kRandom;
  double corrupt_fraction = 0.3;
  std::vector<std::string> warm_starts;  // one per prompt, for kText
  bool mask_from_corpus = false;
  GCGConfig gcg;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "reprompt-out";

  std::filesystem::path corpus_path;  // empty: synthetic corpus
  int synthetic_lines = 2000;
  std::vector<SizeSpec> sizes;
  TrainConfig train;
  std::string model;  // size used by per-model stages; empty means the last size

  std::vector<std::string> prompts;
  int n_docs = 50;
  int held_out = 100;
  SamplingConfig sampling;

  std::string soft_name = "soft";
  GDConfig soft;
  int soft_length = 0;  // 0: the ground-truth prompt length

  HardRun hard;

  std::vector<std::string> winrate_methods;
  std::string shuffle_method = "gcg";
  ShuffleTestConfig shuffle;
  std::string position_source = "ground_truth";
  int position_docs = 50;
  int position_bins = 5;
  TransferConfig transfer;
  int transfer_prompts = 5;  // 0: all prompts

  nlohmann::json resolved;  // the merged JSON this struct was read from

  const SizeSpec& active_size() const;
};

/// Built-in defaults as JSON; the toy suite and prompt list live here.
nlohmann::json default_config_json();

/// defaults < file < overrides. Each override is "dotted.key=value", value
/// parsed as JSON when possible, else taken as a string. kConfig on unknown
/// keys, malformed values or missing referenced files.
ExperimentConfig load_config(const std::filesystem::path& file,
                             const std::vector<std::string>& overrides);
ExperimentConfig parse_config(const nlohmann::json& j);

/// SHA-256 of the canonical dump of the resolved config.
std::string config_hash(const ExperimentConfig& config);

struct Failure {
  std::string item;
  ErrorCode code;
  std::string message;
};

struct StageReport {
  std::string stage;
  std::vector<std::filesystem::path> outputs;  // relative to output_dir
  std::vector<Failure> failures;
  double wall_clock_s = 0.0;
};

/// 0 success, 1 config error, 2 data error, 3 numeric failure.
int exit_code_for(ErrorCode code);
int exit_code_for(const StageReport& report);

StageReport cmd_train(const ExperimentConfig& config);
StageReport cmd_generate(const ExperimentConfig& config);
StageReport cmd_reconstruct_soft(const ExperimentConfig& config);
StageReport cmd_reconstruct_hard(const ExperimentConfig& config);
StageReport cmd_kl(const ExperimentConfig& config);
StageReport cmd_analyze_winrate(const ExperimentConfig& config);
StageReport cmd_analyze_shuffle(const ExperimentConfig& config);
StageReport cmd_analyze_position(const ExperimentConfig& config);
StageReport cmd_analyze_transfer(const ExperimentConfig& config);

/// Runs `stage` by subcommand name and records it in the manifest.
StageReport run_stage(const std::string& stage, const ExperimentConfig& config);
const std::vector<std::string>& stage_names();

/// Adds or replaces the stage entry in <output_dir>/manifest.json, hashing
/// every listed output.
void record_stage(const ExperimentConfig& config, const StageReport& report);

// Document files: one JSON object per line, {"tokens": [...], "text": "..."}.
void write_documents(const std::filesystem::path& path, const DocumentSet& docs);
DocumentSet read_documents(const std::filesystem::path& path);

std::string prompt_id(std::size_t index);

}  // namespace reprompt::harness
