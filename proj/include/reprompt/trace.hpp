#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "reprompt/stats.hpp"

namespace reprompt {

/// Ground truth used only for reporting: KL is measured on held-out
/// documents drawn from the true prompt, never fed to the optimizer.
struct GroundTruth {
  Prompt prompt;
  DocumentSet held_out;
};

struct TraceRecord {
  int epoch = 0;
  double loss = 0.0;
  Tokens tokens;  // empty for soft prompts
  std::optional<KLEstimate> kl;
};

/// Record 0 is the initial state; record t follows t updates.
struct OptimizationTrace {
  std::vector<TraceRecord> records;
  int best_epoch = 0;     // argmin of loss, earliest on ties
  int best_kl_epoch = -1; // argmin of KL over the evaluated epochs, -1 if none
  bool diverged = false;
  std::string diagnostic;

  std::vector<double> losses() const;
  double best_loss() const { return records.at(best_epoch).loss; }
  std::optional<KLEstimate> best_kl() const;

  /// Appends a record and updates the best indices.
  void add(TraceRecord record);
};

void to_json(nlohmann::json& j, const TraceRecord& r);

/// One JSON object per line, in epoch order.
std::string trace_jsonl(const OptimizationTrace& trace);

/// Whether to evaluate KL after `epoch` updates out of `total`.
inline bool kl_due(int epoch, int total, int every) {
  return epoch == total || (every > 0 && epoch % every == 0);
}

}  // namespace reprompt
