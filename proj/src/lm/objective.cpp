#include "reprompt/objective.hpp"

#include <cmath>

#include "reprompt/error.hpp"
#include "reprompt/parallel.hpp"

namespace reprompt {

template <typename Real>
Matrix<Real> document_inputs(const ModelParameters<Real>& params, const Matrix<Real>& prompt_rows,
                             const Document& doc) {
  const auto k_p = prompt_rows.rows();
  const auto k_d = static_cast<Eigen::Index>(doc.size());
  if (k_p < 1) throw Error(ErrorCode::kArgument, "prompt must have at least one row");
  if (k_p + k_d > params.config.max_seq_len) {
    throw Error(ErrorCode::kLength, "prompt (" + std::to_string(k_p) + ") + document (" +
                                        std::to_string(k_d) + ") exceeds max_seq_len " +
                                        std::to_string(params.config.max_seq_len));
  }
  const Eigen::Index len = k_p + std::max<Eigen::Index>(k_d - 1, 0);
  Matrix<Real> inputs(len, params.config.d_model);
  inputs.topRows(k_p) = prompt_rows;
  if (k_d > 1) {
    inputs.bottomRows(k_d - 1) =
        embed(params, std::span<const TokenId>(doc.tokens.data(), doc.tokens.size() - 1));
  }
  return inputs;
}

template <typename Real>
Real document_nll(const ModelParameters<Real>& params, const Matrix<Real>& prompt_rows,
                  const Document& doc, Matrix<Real>* d_prompt_rows, Real weight) {
  const Matrix<Real> inputs = document_inputs(params, prompt_rows, doc);
  if (doc.tokens.empty()) return Real(0);
  const bool want_grad = d_prompt_rows != nullptr;
  SequenceEval<Real> ev = evaluate_sequence(params, inputs, std::span<const TokenId>(doc.tokens),
                                            want_grad, weight);
  if (want_grad) *d_prompt_rows += ev.d_inputs.topRows(prompt_rows.rows());
  return ev.nll;
}

namespace {

// Inputs [BOS, p_0 .. p_{k-2}] whose outputs score p_0 .. p_{k-1}.
template <typename Real>
Matrix<Real> fluency_inputs(const ModelParameters<Real>& params, const Prompt& prompt) {
  if (prompt.tokens.empty()) throw Error(ErrorCode::kArgument, "empty prompt");
  if (static_cast<int>(prompt.size()) > params.config.max_seq_len) {
    throw Error(ErrorCode::kLength, "prompt longer than max_seq_len");
  }
  Tokens seq;
  seq.reserve(prompt.size());
  seq.push_back(kBos);
  seq.insert(seq.end(), prompt.tokens.begin(), prompt.tokens.end() - 1);
  return embed(params, std::span<const TokenId>(seq));
}

template <typename Real>
void require_finite(Real value, const char* what) {
  if (!std::isfinite(static_cast<double>(value))) {
    throw Error(ErrorCode::kNumeric, std::string(what) + " is not finite");
  }
}

// Mean document NLL over docs, scaled by doc_weight; optional gradient with
// respect to the prompt rows. Per-document terms are reduced in index order.
template <typename Real>
Real documents_term(const ModelParameters<Real>& params, const Matrix<Real>& prompt_rows,
                    const DocumentSet& docs, Real doc_weight, Matrix<Real>* grad) {
  if (docs.empty()) throw Error(ErrorCode::kArgument, "empty document set");
  const Real scale = doc_weight / static_cast<Real>(docs.size());
  std::vector<Real> nll(docs.size());
  std::vector<Matrix<Real>> grads(grad ? docs.size() : 0);
  parallel_for(docs.size(), [&](std::size_t i) {
    if (grad) {
      grads[i] = Matrix<Real>::Zero(prompt_rows.rows(), prompt_rows.cols());
      nll[i] = document_nll(params, prompt_rows, docs[i], &grads[i], scale);
    } else {
      nll[i] = document_nll(params, prompt_rows, docs[i]);
    }
  });
  Real total = 0;
  for (std::size_t i = 0; i < docs.size(); ++i) total += nll[i];
  if (grad) {
    *grad = Matrix<Real>::Zero(prompt_rows.rows(), prompt_rows.cols());
    for (const auto& g : grads) *grad += g;
  }
  return doc_weight * total / static_cast<Real>(docs.size());
}

}  // namespace

template <typename Real>
Real prompt_nll(const ModelParameters<Real>& params, const Prompt& prompt) {
  const Matrix<Real> inputs = fluency_inputs(params, prompt);
  return evaluate_sequence(params, inputs, std::span<const TokenId>(prompt.tokens), false).nll;
}

template <typename Real>
Real soft_loss(const ModelParameters<Real>& params, const Matrix<Real>& soft_prompt,
               const DocumentSet& docs, const LossSpec& spec) {
  if (spec.fluency_weight != 0.0) {
    throw Error(ErrorCode::kArgument, "soft prompts have no fluency term");
  }
  const Real loss =
      documents_term(params, soft_prompt, docs, static_cast<Real>(spec.doc_weight),
                     static_cast<Matrix<Real>*>(nullptr));
  require_finite(loss, "soft-prompt loss");
  return loss;
}

template <typename Real>
Real hard_loss(const ModelParameters<Real>& params, const Prompt& prompt, const DocumentSet& docs,
               const LossSpec& spec) {
  const Matrix<Real> rows = embed(params, std::span<const TokenId>(prompt.tokens));
  Real loss = documents_term(params, rows, docs, static_cast<Real>(spec.doc_weight),
                     static_cast<Matrix<Real>*>(nullptr));
  if (spec.fluency_weight != 0.0) {
    loss += static_cast<Real>(spec.signed_fluency_weight()) * prompt_nll(params, prompt);
  }
  require_finite(loss, "hard-prompt loss");
  return loss;
}

template <typename Real>
Matrix<Real> grad_wrt_soft(const ModelParameters<Real>& params, const Matrix<Real>& soft_prompt,
                           const DocumentSet& docs, const LossSpec& spec, Real* loss) {
  if (spec.fluency_weight != 0.0) {
    throw Error(ErrorCode::kArgument, "soft prompts have no fluency term");
  }
  Matrix<Real> grad;
  const Real value =
      documents_term(params, soft_prompt, docs, static_cast<Real>(spec.doc_weight), &grad);
  require_finite(value, "soft-prompt loss");
  if (!grad.allFinite()) throw Error(ErrorCode::kNumeric, "soft-prompt gradient is not finite");
  if (loss) *loss = value;
  return grad;
}

template <typename Real>
Matrix<Real> grad_wrt_onehot(const ModelParameters<Real>& params, const Prompt& prompt,
                             const DocumentSet& docs, const LossSpec& spec, Real* loss) {
  const Matrix<Real> rows = embed(params, std::span<const TokenId>(prompt.tokens));
  Matrix<Real> d_rows;
  Real value = documents_term(params, rows, docs, static_cast<Real>(spec.doc_weight), &d_rows);
  Matrix<Real> target_side;

  if (spec.fluency_weight != 0.0) {
    const auto weight = static_cast<Real>(spec.signed_fluency_weight());
    const Matrix<Real> inputs = fluency_inputs(params, prompt);
    SequenceEval<Real> ev =
        evaluate_sequence(params, inputs, std::span<const TokenId>(prompt.tokens), true, weight);
    value += weight * ev.nll;
    // Input row r + 1 carries prompt token r (row 0 is BOS).
    d_rows.topRows(rows.rows() - 1) += ev.d_inputs.bottomRows(rows.rows() - 1);
    // Target side: NLL = -sum_j onehot_j . logprobs_j.
    target_side = -weight * ev.logprobs;
  }

  Matrix<Real> grad = d_rows * params.token_embedding.transpose();
  if (target_side.size() > 0) grad += target_side;
  require_finite(value, "hard-prompt loss");
  if (!grad.allFinite()) throw Error(ErrorCode::kNumeric, "one-hot gradient is not finite");
  if (loss) *loss = value;
  return grad;
}

#define REPROMPT_INSTANTIATE(Real)                                                           \
  template Matrix<Real> document_inputs(const ModelParameters<Real>&, const Matrix<Real>&,  \
                                        const Document&);                                   \
  template Real document_nll(const ModelParameters<Real>&, const Matrix<Real>&,             \
                             const Document&, Matrix<Real>*, Real);                         \
  template Real prompt_nll(const ModelParameters<Real>&, const Prompt&);                    \
  template Real soft_loss(const ModelParameters<Real>&, const Matrix<Real>&,                \
                          const DocumentSet&, const LossSpec&);                             \
  template Real hard_loss(const ModelParameters<Real>&, const Prompt&, const DocumentSet&,  \
                          const LossSpec&);                                                 \
  template Matrix<Real> grad_wrt_soft(const ModelParameters<Real>&, const Matrix<Real>&,    \
                                      const DocumentSet&, const LossSpec&, Real*);          \
  template Matrix<Real> grad_wrt_onehot(const ModelParameters<Real>&, const Prompt&,        \
                                        const DocumentSet&, const LossSpec&, Real*);

REPROMPT_INSTANTIATE(float)
REPROMPT_INSTANTIATE(double)

}  // namespace reprompt
