#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "reprompt/random.hpp"
#include "reprompt/sampling.hpp"
#include "reprompt/stats.hpp"

namespace reprompt {

// ---- win rates ----

/// Per-prompt KL for one method, keyed by prompt id.
using MethodScores = std::map<std::string, double>;

struct WinRateTable {
  std::vector<std::string> methods;
  std::vector<std::vector<double>> rate;  // rate[a][b]: share of prompts where a beats b
  int n_prompts = 0;
};

/// Strictly lower KL wins; exact ties give 1/2 to both sides. kArgument when
/// the methods were not scored on the same prompt ids.
WinRateTable win_rate_table(const std::map<std::string, MethodScores>& scores);

// ---- Clopper-Pearson ----

struct Interval {
  double lo = 0.0;
  double hi = 1.0;
};

/// Exact two-sided interval at level alpha from Beta quantiles. `successes`
/// may be fractional (half-credit ties); kArgument outside 0 <= k <= n, n >= 1.
Interval clopper_pearson(double successes, int trials, double alpha);

// ---- token-order sensitivity ----

/// Uniform random permutation of the prompt's positions.
Prompt shuffle_prompt(const Prompt& prompt, Rng& rng);

struct ShuffleTestConfig {
  int trials = 10;          // m
  int docs_per_trial = 20;  // documents per KL estimate
  double alpha = 0.05;      // level of the reported intervals
  std::uint64_t seed = 0;
  SamplingConfig sampling;

  void validate() const;
};

/// A reference prompt and the comparison prompt tested against it.
struct PromptPair {
  Prompt reference;
  Prompt candidate;
};

struct ShuffleTrial {
  int pair = 0;
  int trial = 0;
  double kl_candidate = 0.0;  // estimate of d(shuffled candidate || candidate)
  double kl_reference = 0.0;  // estimate of d(shuffled reference || reference)
  bool win = false;           // kl_candidate < kl_reference
};

struct PairSensitivity {
  int wins = 0;
  int trials = 0;
  double w() const { return trials ? double(wins) / trials : 0.0; }
};

struct SensitivityResult {
  double u = 0.0;
  double mean_w = 0.0;
  Interval u_interval;  // U * n successes out of n pairs
  Interval w_interval;  // pooled wins out of n * m trials
  double alpha = 0.05;
  std::vector<PairSensitivity> pairs;
  std::vector<ShuffleTrial> trials;
};

/// U = (1/n) sum_pairs [ 1{w > 1/2} + 1/2 * 1{w = 1/2} ].
double sensitivity_statistic(const std::vector<PairSensitivity>& pairs);

/// Every trial draws fresh shuffles of both prompts, samples documents from
/// each shuffled prompt and counts a win when the candidate drifted less.
template <typename Real>
SensitivityResult token_order_sensitivity(const ModelParameters<Real>& params,
                                          const std::vector<PromptPair>& pairs,
                                          const ShuffleTestConfig& config);

// ---- positional importance ----

/// Entry i estimates d(r_i(p) || p), r_i replacing position i with unk_id,
/// from documents drawn under r_i(p). Positions already holding unk_id give
/// exact zeros.
template <typename Real>
std::vector<KLEstimate> positional_importance(const ModelParameters<Real>& params,
                                              const Prompt& prompt, TokenId unk_id,
                                              int docs_per_estimate, std::uint64_t seed,
                                              const SamplingConfig& sampling = {});

struct PositionBin {
  double lo = 0.0, hi = 0.0;  // relative position range [lo, hi)
  int count = 0;
  double mean = 0.0;
  double sd = 0.0;
};

/// Pools per-prompt curves by relative position i / k_p into equal bins.
std::vector<PositionBin> bin_positional_curves(const std::vector<std::vector<KLEstimate>>& curves,
                                               int bins);

// ---- transferability ----

template <typename Real>
struct SuiteMember {
  std::string label;
  const ModelParameters<Real>* params = nullptr;
};

struct TransferConfig {
  int docs_per_estimate = 50;
  std::uint64_t seed = 0;
  SamplingConfig sampling;
};

struct TransferMatrix {
  std::vector<std::string> labels;
  std::vector<std::vector<KLEstimate>> kl;  // [source][destination]
  std::vector<std::vector<double>> ratio;   // kl[s][t].mean / kl[s][s].mean
};

/// Seed of the documents drawn from ground-truth prompt j on the model
/// labelled `label`.
std::uint64_t transfer_doc_seed(std::uint64_t root, const std::string& label, std::size_t prompt);

/// kl[s][t] is the mean over prompts j of d(p*_j || prompts[s][j]) on model
/// t, with documents drawn from p*_j on model t (shared across sources and
/// seeded by the model's label, so reordering the suite reorders the
/// matrix). Its stderr is sqrt(sum se_j^2) / n. kSuite when vocabularies
/// differ.
template <typename Real>
TransferMatrix transfer_matrix(const std::vector<SuiteMember<Real>>& suite,
                               const std::vector<Prompt>& ground_truth,
                               const std::vector<std::vector<Prompt>>& prompts,
                               const TransferConfig& config);

/// One-sided comparison of two KL means: difference b - a and its z score.
struct MeanComparison {
  double difference = 0.0;
  double std_error = 0.0;
  double z = 0.0;
  bool holds = false;  // a <= b
};
MeanComparison compare_means(const KLEstimate& a, const KLEstimate& b);

// ---- tabular output ----

std::string win_rate_tsv(const WinRateTable& table);
std::string sensitivity_tsv(const SensitivityResult& result);
nlohmann::json sensitivity_summary(const SensitivityResult& result);
std::string positional_tsv(const std::vector<std::vector<KLEstimate>>& curves);
std::string position_bins_tsv(const std::vector<PositionBin>& bins);
std::string transfer_tsv(const TransferMatrix& m);

/// Fixed-precision rendering used in every table ("%.17g" so values round-trip).
std::string format_number(double x);

}  // namespace reprompt
