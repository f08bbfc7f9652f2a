#pragma once

#include "reprompt/model.hpp"

namespace reprompt {

/// Sign convention of the fluency term. kPenalizeNll adds gamma * NLL(prompt),
/// pushing toward likely prompts. kLiteral adds gamma * log P(prompt), which
/// rewards unlikely prompts; kept only for comparison runs.
enum class FluencySign { kPenalizeNll, kLiteral };

/// Loss = doc_weight * mean_i NLL(d_i | p) + gamma * NLL(p | BOS).
/// Defaults give the plain mean document NLL.
struct LossSpec {
  double doc_weight = 1.0;
  double fluency_weight = 0.0;
  FluencySign fluency_sign = FluencySign::kPenalizeNll;

  double signed_fluency_weight() const {
    return fluency_sign == FluencySign::kPenalizeNll ? fluency_weight : -fluency_weight;
  }
};

/// Input rows for [prompt_rows, doc[0..k_d-2]] and the matching targets.
/// Throws kLength when k_p + k_d exceeds max_seq_len.
template <typename Real>
Matrix<Real> document_inputs(const ModelParameters<Real>& params, const Matrix<Real>& prompt_rows,
                             const Document& doc);

/// -log P(doc | prompt given as embedding rows). Zero for an empty document.
/// With d_prompt_rows non-null, adds weight * d(-log P)/d(prompt_rows).
template <typename Real>
Real document_nll(const ModelParameters<Real>& params, const Matrix<Real>& prompt_rows,
                  const Document& doc, Matrix<Real>* d_prompt_rows = nullptr,
                  Real weight = Real(1));

/// -log P(prompt | BOS): the fluency term.
template <typename Real>
Real prompt_nll(const ModelParameters<Real>& params, const Prompt& prompt);

/// Loss over a soft prompt (no fluency term: a soft prompt has no tokens).
template <typename Real>
Real soft_loss(const ModelParameters<Real>& params, const Matrix<Real>& soft_prompt,
               const DocumentSet& docs, const LossSpec& spec = {});

/// Loss over a hard prompt; equals soft_loss(embed(prompt)) plus the fluency term.
template <typename Real>
Real hard_loss(const ModelParameters<Real>& params, const Prompt& prompt,
               const DocumentSet& docs, const LossSpec& spec = {});

/// k_p x d gradient of the loss with respect to the soft prompt rows.
/// The fluency weight must be zero. Optionally also returns the loss.
template <typename Real>
Matrix<Real> grad_wrt_soft(const ModelParameters<Real>& params, const Matrix<Real>& soft_prompt,
                           const DocumentSet& docs, const LossSpec& spec = {},
                           Real* loss = nullptr);

/// k_p x V gradient with respect to the one-hot rows of the prompt, i.e. the
/// embedding-input gradient propagated through W_E plus, for the fluency term,
/// the target-side dependence on the one-hot rows.
template <typename Real>
Matrix<Real> grad_wrt_onehot(const ModelParameters<Real>& params, const Prompt& prompt,
                             const DocumentSet& docs, const LossSpec& spec = {},
                             Real* loss = nullptr);

}  // namespace reprompt
