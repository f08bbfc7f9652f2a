#include "reprompt/trace.hpp"

namespace reprompt {

std::vector<double> OptimizationTrace::losses() const {
  std::vector<double> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(r.loss);
  return out;
}

std::optional<KLEstimate> OptimizationTrace::best_kl() const {
  if (best_kl_epoch < 0) return std::nullopt;
  for (const auto& r : records) {
    if (r.epoch == best_kl_epoch) return r.kl;
  }
  return std::nullopt;
}

void OptimizationTrace::add(TraceRecord record) {
  if (records.empty() || record.loss < best_loss()) best_epoch = record.epoch;
  if (record.kl) {
    const auto best = best_kl();
    if (!best || record.kl->mean < best->mean) best_kl_epoch = record.epoch;
  }
  records.push_back(std::move(record));
}

void to_json(nlohmann::json& j, const TraceRecord& r) {
  j = {{"epoch", r.epoch}, {"loss", r.loss}};
  if (!r.tokens.empty()) j["tokens"] = r.tokens;
  if (r.kl) j["kl"] = *r.kl;
}

std::string trace_jsonl(const OptimizationTrace& trace) {
  std::string out;
  for (const auto& r : trace.records) out += nlohmann::json(r).dump() + "\n";
  return out;
}

}  // namespace reprompt
