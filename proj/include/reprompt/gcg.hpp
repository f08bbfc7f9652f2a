#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "reprompt/trace.hpp"

namespace reprompt {

/// Tokens GCG may place in a prompt. Specials are never allowed.
struct VocabularyMask {
  std::vector<bool> allowed;
  std::string provenance;

  int count() const;
  bool permits(TokenId id) const {
    return id >= 0 && static_cast<std::size_t>(id) < allowed.size() && allowed[id];
  }
};

/// allowed[v] iff v occurs somewhere in the corpus (specials excluded).
/// kArgument for an empty corpus, kMask when nothing remains allowed.
VocabularyMask build_vocab_mask(const DocumentSet& corpus, int vocab_size,
                                std::string provenance = "");

struct GCGConfig {
  int epochs = 200;
  int top_k = 32;
  int batch = 64;
  LossSpec loss;
  std::optional<VocabularyMask> mask;
  bool include_incumbent = true;  // false: choose only among sampled candidates
  std::uint64_t seed = 0;
  int eval_every = 10;

  void validate(int vocab_size) const;
};

struct StepResult {
  Prompt prompt;
  double loss = 0.0;
};

/// One greedy coordinate-gradient step. Each position's pool is the top_k
/// allowed tokens by most negative one-hot gradient, excluding the token
/// already there. When batch covers every pooled substitution they are all
/// evaluated; otherwise `batch` are drawn (position uniform over non-empty
/// pools, token uniform within the pool). Ties go to the lowest candidate
/// index, then to the incumbent. kMask if every pool is empty.
template <typename Real>
StepResult gcg_step(const ModelParameters<Real>& params, const Prompt& prompt,
                    const DocumentSet& docs, const GCGConfig& config, std::uint64_t step_seed);

template <typename Real>
struct HardResult {
  Prompt prompt;  // best-loss prompt seen
  OptimizationTrace trace;
};

/// Runs gcg_step for config.epochs epochs from `init`; the prompt length is
/// fixed at |init|.
template <typename Real>
HardResult<Real> reconstruct_hard(const ModelParameters<Real>& params, const DocumentSet& docs,
                                  const Prompt& init, const GCGConfig& config,
                                  const std::optional<GroundTruth>& eval = std::nullopt);

/// Warm start from text; kArgument when it tokenizes to nothing or to ids
/// outside the model's vocabulary.
template <typename Real>
HardResult<Real> reconstruct_hard(const ModelParameters<Real>& params, const DocumentSet& docs,
                                  const std::string& warm_start, const GCGConfig& config,
                                  const std::optional<GroundTruth>& eval = std::nullopt);

/// Replaces round(fraction * k) distinct positions with different tokens
/// drawn from `mask` (or from all non-special tokens).
Prompt corrupt_prompt(const Prompt& prompt, double fraction, int vocab_size, std::uint64_t seed,
                      const VocabularyMask* mask = nullptr);

/// k tokens drawn uniformly from `mask` (or from all non-special tokens).
Prompt random_prompt(int k, int vocab_size, std::uint64_t seed,
                     const VocabularyMask* mask = nullptr);

}  // namespace reprompt
