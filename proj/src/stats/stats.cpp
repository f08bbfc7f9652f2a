#include "reprompt/stats.hpp"

#include <cmath>

#include "reprompt/error.hpp"
#include "reprompt/parallel.hpp"

namespace reprompt {

void to_json(nlohmann::json& j, const KLEstimate& k) {
  j = {{"mean", k.mean}, {"stderr", k.std_error}, {"n_docs", k.n_docs}};
  if (k.degenerate) j["degenerate"] = true;
}

void from_json(const nlohmann::json& j, KLEstimate& k) {
  k.mean = j.at("mean").get<double>();
  k.std_error = j.at("stderr").get<double>();
  k.n_docs = j.at("n_docs").get<int>();
  k.degenerate = j.value("degenerate", false);
}

KLEstimate summarize_log_ratios(const std::vector<double>& ratios) {
  if (ratios.empty()) throw Error(ErrorCode::kArgument, "no documents to estimate from");
  KLEstimate out;
  out.n_docs = static_cast<int>(ratios.size());
  double sum = 0;
  for (double r : ratios) sum += r;
  out.mean = sum / static_cast<double>(ratios.size());
  if (ratios.size() == 1) {
    out.degenerate = true;
    return out;
  }
  double sq = 0;
  for (double r : ratios) sq += (r - out.mean) * (r - out.mean);
  const double n = static_cast<double>(ratios.size());
  out.std_error = std::sqrt(sq / (n - 1.0)) / std::sqrt(n);
  return out;
}

template <typename Real>
double doc_logprob(const ModelParameters<Real>& params, const Prompt& prompt, const Document& doc) {
  const Matrix<Real> rows = embed(params, std::span<const TokenId>(prompt.tokens));
  return -static_cast<double>(document_nll(params, rows, doc));
}

template <typename Real>
double corpus_nll(const ModelParameters<Real>& params, const Prompt& prompt,
                  const DocumentSet& docs, const LossSpec& spec) {
  return static_cast<double>(hard_loss(params, prompt, docs, spec));
}

template <typename Real>
KLEstimator<Real>::KLEstimator(const ModelParameters<Real>& params, const Prompt& p_star,
                               DocumentSet docs)
    : params_(&params), p_star_(p_star), docs_(std::move(docs)) {
  if (docs_.empty()) throw Error(ErrorCode::kArgument, "empty document set");
  baseline_.resize(docs_.size());
  parallel_for(docs_.size(), [&](std::size_t i) {
    baseline_[i] = doc_logprob(*params_, p_star_, docs_[i]);
  });
}

template <typename Real>
std::vector<double> KLEstimator<Real>::ratios_from_rows(const Matrix<Real>& rows) const {
  std::vector<double> out(docs_.size());
  parallel_for(docs_.size(), [&](std::size_t i) {
    out[i] = baseline_[i] + static_cast<double>(document_nll(*params_, rows, docs_[i]));
  });
  return out;
}

template <typename Real>
std::vector<double> KLEstimator<Real>::log_ratios(const Prompt& p) const {
  return ratios_from_rows(embed(*params_, std::span<const TokenId>(p.tokens)));
}

template <typename Real>
KLEstimate KLEstimator<Real>::estimate(const Prompt& p) const {
  return summarize_log_ratios(log_ratios(p));
}

template <typename Real>
KLEstimate KLEstimator<Real>::estimate_soft(const Matrix<Real>& soft_prompt) const {
  return summarize_log_ratios(ratios_from_rows(soft_prompt));
}

template <typename Real>
KLEstimate estimate_kl(const ModelParameters<Real>& params, const Prompt& p_star, const Prompt& p,
                       const DocumentSet& docs_from_pstar) {
  return KLEstimator<Real>(params, p_star, docs_from_pstar).estimate(p);
}

namespace {

template <typename Real>
double kl_subtree(const ModelParameters<Real>& params, const Prompt& p_star, const Prompt& p,
                  Tokens& prefix, double log_weight, int remaining) {
  Tokens ctx_star = p_star.tokens, ctx = p.tokens;
  ctx_star.insert(ctx_star.end(), prefix.begin(), prefix.end());
  ctx.insert(ctx.end(), prefix.begin(), prefix.end());
  const auto lp_star = next_token_logprobs(params, std::span<const TokenId>(ctx_star));
  const auto lp = next_token_logprobs(params, std::span<const TokenId>(ctx));
  const double weight = std::exp(log_weight);
  double total = 0;
  for (std::size_t v = 0; v < lp.size(); ++v) {
    const double a = static_cast<double>(lp_star[v]);
    total += weight * std::exp(a) * (a - static_cast<double>(lp[v]));
  }
  if (remaining > 1) {
    for (std::size_t v = 0; v < lp.size(); ++v) {
      prefix.push_back(static_cast<TokenId>(v));
      total += kl_subtree(params, p_star, p, prefix, log_weight + static_cast<double>(lp_star[v]),
                          remaining - 1);
      prefix.pop_back();
    }
  }
  return total;
}

}  // namespace

template <typename Real>
double exact_kl_enumerate(const ModelParameters<Real>& params, const Prompt& p_star,
                          const Prompt& p, int doc_len, double budget) {
  if (doc_len < 1) throw Error(ErrorCode::kArgument, "doc_len must be at least 1");
  if (std::pow(static_cast<double>(params.config.vocab_size), doc_len) > budget) {
    throw Error(ErrorCode::kBudget, "V^doc_len exceeds the enumeration budget");
  }
  const int longest = static_cast<int>(std::max(p_star.size(), p.size()));
  if (longest + doc_len > params.config.max_seq_len) {
    throw Error(ErrorCode::kLength, "prompt + doc_len exceeds max_seq_len");
  }
  Tokens prefix;
  return kl_subtree(params, p_star, p, prefix, 0.0, doc_len);
}

#define REPROMPT_INSTANTIATE(Real)                                                              \
  template double doc_logprob(const ModelParameters<Real>&, const Prompt&, const Document&);   \
  template double corpus_nll(const ModelParameters<Real>&, const Prompt&, const DocumentSet&,  \
                             const LossSpec&);                                                 \
  template class KLEstimator<Real>;                                                            \
  template KLEstimate estimate_kl(const ModelParameters<Real>&, const Prompt&, const Prompt&,  \
                                  const DocumentSet&);                                         \
  template double exact_kl_enumerate(const ModelParameters<Real>&, const Prompt&,              \
                                     const Prompt&, int, double);

REPROMPT_INSTANTIATE(float)
REPROMPT_INSTANTIATE(double)

}  // namespace reprompt
