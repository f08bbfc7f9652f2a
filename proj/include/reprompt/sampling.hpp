#pragma once

#include <cstdint>

#include "reprompt/model.hpp"

namespace reprompt {

struct SamplingConfig {
  int max_len = 16;
  double temperature = 1.0;  // 0 selects the argmax (lowest id on ties)
  bool stop_at_eos = true;   // EOS is kept as the document's last token
};

/// Draws n documents from P(. | prompt). Document i uses its own stream
/// derived from (seed, i), so the set is reproducible and order-independent.
template <typename Real>
DocumentSet sample_documents(const ModelParameters<Real>& params, const Prompt& prompt, int n,
                             const SamplingConfig& config, std::uint64_t seed);

}  // namespace reprompt
