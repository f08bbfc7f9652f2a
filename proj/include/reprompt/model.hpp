#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "reprompt/vocab.hpp"

namespace reprompt {

template <typename Real>
using Matrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ModelConfig {
  int vocab_size = kByteVocabSize;
  int d_model = 32;
  int n_layers = 2;
  int n_heads = 4;
  int d_ff = 128;
  int max_seq_len = 64;
  double ln_eps = 1e-5;
  double init_std = 0.02;
  std::uint64_t seed = 0;

  /// Throws kArgument when dimensions are inconsistent.
  void validate() const;
  Vocabulary vocabulary() const { return Vocabulary{vocab_size}; }
  bool operator==(const ModelConfig&) const = default;
};

// Row vectors (gains, biases) are stored as 1 x n matrices so every tensor
// can be visited, serialized and optimized uniformly.
template <typename Real>
struct LayerWeights {
  Matrix<Real> ln1_gain, ln1_bias;  // 1 x d
  Matrix<Real> w_qkv, b_qkv;        // d x 3d, 1 x 3d
  Matrix<Real> w_out, b_out;        // d x d, 1 x d
  Matrix<Real> ln2_gain, ln2_bias;  // 1 x d
  Matrix<Real> w_ff1, b_ff1;        // d x ff, 1 x ff
  Matrix<Real> w_ff2, b_ff2;        // ff x d, 1 x d
};

/// Pre-LN decoder-only transformer with learned positions. The output head is
/// tied to token_embedding (logits = h * W_E^T).
template <typename Real>
struct ModelParameters {
  ModelConfig config;
  Matrix<Real> token_embedding;     // V x d
  Matrix<Real> position_embedding;  // max_seq_len x d
  std::vector<LayerWeights<Real>> layers;
  Matrix<Real> lnf_gain, lnf_bias;  // 1 x d

  /// Calls f(name, tensor) for every tensor in a fixed order.
  template <typename F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <typename F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

  /// Same shapes as `config` demands; weights zero, layer-norm gains one.
  static ModelParameters zeros(const ModelConfig& config);

  template <typename To>
  ModelParameters<To> cast() const {
    ModelParameters<To> out = ModelParameters<To>::zeros(config);
    auto src = tensors();
    auto dst = out.tensors();
    for (std::size_t i = 0; i < src.size(); ++i) {
      *dst[i].second = src[i].second->template cast<To>();
    }
    return out;
  }

  std::vector<std::pair<std::string, const Matrix<Real>*>> tensors() const;
  std::vector<std::pair<std::string, Matrix<Real>*>> tensors();

  bool all_finite() const;
  void set_zero();

 private:
  template <typename Self, typename F>
  static void visit_impl(Self& self, F& f) {
    f(std::string("token_embedding"), self.token_embedding);
    f(std::string("position_embedding"), self.position_embedding);
    for (std::size_t l = 0; l < self.layers.size(); ++l) {
      auto& w = self.layers[l];
      const std::string p = "layers." + std::to_string(l) + ".";
      f(p + "ln1_gain", w.ln1_gain);
      f(p + "ln1_bias", w.ln1_bias);
      f(p + "w_qkv", w.w_qkv);
      f(p + "b_qkv", w.b_qkv);
      f(p + "w_out", w.w_out);
      f(p + "b_out", w.b_out);
      f(p + "ln2_gain", w.ln2_gain);
      f(p + "ln2_bias", w.ln2_bias);
      f(p + "w_ff1", w.w_ff1);
      f(p + "b_ff1", w.b_ff1);
      f(p + "w_ff2", w.w_ff2);
      f(p + "b_ff2", w.b_ff2);
    }
    f(std::string("lnf_gain"), self.lnf_gain);
    f(std::string("lnf_bias"), self.lnf_bias);
  }
};

/// Gaussian init with config.init_std (residual projections scaled by
/// 1/sqrt(2 * n_layers)), deterministic in config.seed.
template <typename Real>
ModelParameters<Real> init_parameters(const ModelConfig& config);

template <typename Real>
struct LayerActivations {
  Matrix<Real> ln1_hat, ln1_rstd, ln1_out;
  Matrix<Real> qkv;
  std::vector<Matrix<Real>> probs;  // per head, L x L, zero above diagonal
  Matrix<Real> attn;                // heads concatenated, before w_out
  Matrix<Real> ln2_hat, ln2_rstd, ln2_out;
  Matrix<Real> ff_pre, ff_act;
};

template <typename Real>
struct ForwardPass {
  std::vector<LayerActivations<Real>> layers;
  Matrix<Real> lnf_hat, lnf_rstd, lnf_out;
  int first_output = 0;
  Matrix<Real> logprobs;  // (L - first_output) x V, row r belongs to position first_output + r
};

/// Runs the network on `inputs` (L x d token-embedding rows; positional
/// embeddings are added here). Log-probabilities are produced only for rows
/// first_output..L-1.
template <typename Real>
ForwardPass<Real> forward(const ModelParameters<Real>& params, const Matrix<Real>& inputs,
                          int first_output);

/// Back-propagates d_logits (aligned with pass.logprobs) and returns the
/// gradient with respect to `inputs`. When `grads` is non-null, parameter
/// gradients are accumulated into it, including the tied-head contribution to
/// token_embedding (but not the input-embedding scatter, which the caller owns).
template <typename Real>
Matrix<Real> backward(const ModelParameters<Real>& params, const Matrix<Real>& inputs,
                      const ForwardPass<Real>& pass, const Matrix<Real>& d_logits,
                      ModelParameters<Real>* grads);

/// Rows of W_E for `tokens`.
template <typename Real>
Matrix<Real> embed(const ModelParameters<Real>& params, std::span<const TokenId> tokens);

/// NLL of a sequence given its input rows: row first_output + j predicts
/// targets[j]. With want_grad, d_inputs receives weight * dNLL/dinputs and
/// parameter gradients (scaled by weight) accumulate into grads if non-null.
template <typename Real>
struct SequenceEval {
  Real nll = 0;
  Matrix<Real> logprobs;  // targets.size() x V
  Matrix<Real> d_inputs;  // L x d when want_grad
};

template <typename Real>
SequenceEval<Real> evaluate_sequence(const ModelParameters<Real>& params,
                                     const Matrix<Real>& inputs,
                                     std::span<const TokenId> targets, bool want_grad,
                                     Real weight = Real(1),
                                     ModelParameters<Real>* grads = nullptr);

/// log P(next token | context) for a non-empty token context.
template <typename Real>
std::vector<Real> next_token_logprobs(const ModelParameters<Real>& params,
                                      std::span<const TokenId> context);

}  // namespace reprompt
