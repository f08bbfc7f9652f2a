#pragma once

#include <cstdint>
#include <vector>

#include <json.hpp>

#include "reprompt/objective.hpp"

namespace reprompt {

/// Monte-Carlo KL estimate in nats. std_error is the sample standard deviation
/// of the per-document log-ratios over sqrt(n_docs); with a single document it
/// is reported as 0 and `degenerate` is set.
struct KLEstimate {
  double mean = 0.0;
  double std_error = 0.0;
  int n_docs = 0;
  bool degenerate = false;

  bool operator==(const KLEstimate&) const = default;
};

void to_json(nlohmann::json& j, const KLEstimate& k);
void from_json(const nlohmann::json& j, KLEstimate& k);

/// Mean and standard error of per-document values.
KLEstimate summarize_log_ratios(const std::vector<double>& ratios);

/// log P(doc | prompt); 0 for an empty document. kLength when k_p + k_d > max_seq_len.
template <typename Real>
double doc_logprob(const ModelParameters<Real>& params, const Prompt& prompt, const Document& doc);

/// Mean document NLL plus the fluency term described by `spec`.
/// kArgument for an empty document set.
template <typename Real>
double corpus_nll(const ModelParameters<Real>& params, const Prompt& prompt,
                  const DocumentSet& docs, const LossSpec& spec = {});

/// Estimates d_KL(p* || p) from documents drawn under p*. log P(d | p*) is
/// computed once per document at construction so that many candidate
/// prompts can be compared against the same baseline.
template <typename Real>
class KLEstimator {
 public:
  KLEstimator(const ModelParameters<Real>& params, const Prompt& p_star, DocumentSet docs);

  KLEstimate estimate(const Prompt& p) const;
  KLEstimate estimate_soft(const Matrix<Real>& soft_prompt) const;

  std::vector<double> log_ratios(const Prompt& p) const;
  const std::vector<double>& baseline() const { return baseline_; }
  const DocumentSet& documents() const { return docs_; }

 private:
  std::vector<double> ratios_from_rows(const Matrix<Real>& rows) const;

  const ModelParameters<Real>* params_;
  Prompt p_star_;
  DocumentSet docs_;
  std::vector<double> baseline_;
};

template <typename Real>
KLEstimate estimate_kl(const ModelParameters<Real>& params, const Prompt& p_star, const Prompt& p,
                       const DocumentSet& docs_from_pstar);

/// Exact KL between the length-doc_len continuation distributions of p* and
/// p (EOS treated as an ordinary token), by walking the prefix tree and
/// summing P*(prefix) * KL(next-token distributions). kBudget when
/// V^doc_len exceeds `budget`.
template <typename Real>
double exact_kl_enumerate(const ModelParameters<Real>& params, const Prompt& p_star,
                          const Prompt& p, int doc_len, double budget = 1e6);

}  // namespace reprompt
