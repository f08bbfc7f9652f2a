#include "reprompt/model.hpp"

#include <cmath>
#include <limits>
#include <random>

#include "reprompt/error.hpp"

namespace reprompt {

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorCode::kArgument, what); };
  if (vocab_size < kNumSpecial + 1) fail("vocab_size must leave room for a non-special token");
  if (d_model < 1 || n_layers < 0 || n_heads < 1 || d_ff < 1) fail("non-positive dimension");
  if (d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (max_seq_len < 2) fail("max_seq_len must be at least 2");
  if (!(ln_eps > 0)) fail("ln_eps must be positive");
}

template <typename Real>
ModelParameters<Real> ModelParameters<Real>::zeros(const ModelConfig& config) {
  config.validate();
  const int d = config.d_model;
  ModelParameters p;
  p.config = config;
  p.token_embedding = Matrix<Real>::Zero(config.vocab_size, d);
  p.position_embedding = Matrix<Real>::Zero(config.max_seq_len, d);
  p.layers.resize(config.n_layers);
  for (auto& w : p.layers) {
    w.ln1_gain = Matrix<Real>::Ones(1, d);
    w.ln1_bias = Matrix<Real>::Zero(1, d);
    w.w_qkv = Matrix<Real>::Zero(d, 3 * d);
    w.b_qkv = Matrix<Real>::Zero(1, 3 * d);
    w.w_out = Matrix<Real>::Zero(d, d);
    w.b_out = Matrix<Real>::Zero(1, d);
    w.ln2_gain = Matrix<Real>::Ones(1, d);
    w.ln2_bias = Matrix<Real>::Zero(1, d);
    w.w_ff1 = Matrix<Real>::Zero(d, config.d_ff);
    w.b_ff1 = Matrix<Real>::Zero(1, config.d_ff);
    w.w_ff2 = Matrix<Real>::Zero(config.d_ff, d);
    w.b_ff2 = Matrix<Real>::Zero(1, d);
  }
  p.lnf_gain = Matrix<Real>::Ones(1, d);
  p.lnf_bias = Matrix<Real>::Zero(1, d);
  return p;
}

template <typename Real>
std::vector<std::pair<std::string, const Matrix<Real>*>> ModelParameters<Real>::tensors()
    const {
  std::vector<std::pair<std::string, const Matrix<Real>*>> out;
  visit([&](const std::string& name, const Matrix<Real>& m) { out.emplace_back(name, &m); });
  return out;
}

template <typename Real>
std::vector<std::pair<std::string, Matrix<Real>*>> ModelParameters<Real>::tensors() {
  std::vector<std::pair<std::string, Matrix<Real>*>> out;
  visit([&](const std::string& name, Matrix<Real>& m) { out.emplace_back(name, &m); });
  return out;
}

template <typename Real>
bool ModelParameters<Real>::all_finite() const {
  bool ok = true;
  visit([&](const std::string&, const Matrix<Real>& m) { ok = ok && m.allFinite(); });
  return ok;
}

template <typename Real>
void ModelParameters<Real>::set_zero() {
  visit([](const std::string&, Matrix<Real>& m) { m.setZero(); });
}

template <typename Real>
ModelParameters<Real> init_parameters(const ModelConfig& config) {
  ModelParameters<Real> p = ModelParameters<Real>::zeros(config);
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto fill = [&](Matrix<Real>& m, double std) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Real>(std * normal(rng));
  };
  const double resid_std = config.init_std / std::sqrt(2.0 * std::max(1, config.n_layers));
  fill(p.token_embedding, config.init_std);
  fill(p.position_embedding, config.init_std);
  for (auto& w : p.layers) {
    fill(w.w_qkv, config.init_std);
    fill(w.w_out, resid_std);
    fill(w.w_ff1, config.init_std);
    fill(w.w_ff2, resid_std);
  }
  return p;
}

namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

template <typename Real>
void layer_norm(const Matrix<Real>& x, const Matrix<Real>& gain, const Matrix<Real>& bias,
                Real eps, Matrix<Real>& hat, Matrix<Real>& rstd, Matrix<Real>& out) {
  const Eigen::Index rows = x.rows(), cols = x.cols();
  hat.resize(rows, cols);
  rstd.resize(rows, 1);
  out.resize(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const Real mean = x.row(r).mean();
    Real var = 0;
    for (Eigen::Index c = 0; c < cols; ++c) {
      const Real diff = x(r, c) - mean;
      var += diff * diff;
    }
    var /= static_cast<Real>(cols);
    const Real s = Real(1) / std::sqrt(var + eps);
    rstd(r, 0) = s;
    for (Eigen::Index c = 0; c < cols; ++c) {
      hat(r, c) = (x(r, c) - mean) * s;
      out(r, c) = hat(r, c) * gain(0, c) + bias(0, c);
    }
  }
}

// Returns dx; accumulates gain/bias gradients when given.
template <typename Real>
Matrix<Real> layer_norm_backward(const Matrix<Real>& dy, const Matrix<Real>& hat,
                                 const Matrix<Real>& rstd, const Matrix<Real>& gain,
                                 Matrix<Real>* d_gain, Matrix<Real>* d_bias) {
  const Eigen::Index rows = dy.rows(), cols = dy.cols();
  Matrix<Real> dx(rows, cols);
  const Real inv_n = Real(1) / static_cast<Real>(cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    Real mean_dhat = 0, mean_dhat_hat = 0;
    for (Eigen::Index c = 0; c < cols; ++c) {
      const Real dhat = dy(r, c) * gain(0, c);
      mean_dhat += dhat;
      mean_dhat_hat += dhat * hat(r, c);
    }
    mean_dhat *= inv_n;
    mean_dhat_hat *= inv_n;
    for (Eigen::Index c = 0; c < cols; ++c) {
      const Real dhat = dy(r, c) * gain(0, c);
      dx(r, c) = rstd(r, 0) * (dhat - mean_dhat - hat(r, c) * mean_dhat_hat);
    }
  }
  if (d_gain) *d_gain += (dy.array() * hat.array()).colwise().sum().matrix();
  if (d_bias) *d_bias += dy.colwise().sum();
  return dx;
}

template <typename Real>
void add_row(Matrix<Real>& m, const Matrix<Real>& row) {
  m.rowwise() += row.row(0);
}

template <typename Real>
void check_inputs(const ModelParameters<Real>& params, const Matrix<Real>& inputs) {
  if (inputs.rows() < 1 || inputs.rows() > params.config.max_seq_len) {
    throw Error(ErrorCode::kLength, "sequence of " + std::to_string(inputs.rows()) +
                                        " positions outside [1, max_seq_len=" +
                                        std::to_string(params.config.max_seq_len) + "]");
  }
  if (inputs.cols() != params.config.d_model) {
    throw Error(ErrorCode::kArgument, "input rows must have d_model columns");
  }
}

}  // namespace

template <typename Real>
ForwardPass<Real> forward(const ModelParameters<Real>& params, const Matrix<Real>& inputs,
                          int first_output) {
  check_inputs(params, inputs);
  const ModelConfig& cfg = params.config;
  const Eigen::Index len = inputs.rows();
  const int d = cfg.d_model;
  const int head_dim = d / cfg.n_heads;
  const Real scale = Real(1) / std::sqrt(static_cast<Real>(head_dim));
  const Real eps = static_cast<Real>(cfg.ln_eps);
  if (first_output < 0 || first_output >= len) {
    throw Error(ErrorCode::kArgument, "first_output outside the sequence");
  }

  ForwardPass<Real> pass;
  pass.first_output = first_output;
  pass.layers.resize(params.layers.size());

  Matrix<Real> x = inputs + params.position_embedding.topRows(len);
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const LayerWeights<Real>& w = params.layers[l];
    LayerActivations<Real>& a = pass.layers[l];

    layer_norm(x, w.ln1_gain, w.ln1_bias, eps, a.ln1_hat, a.ln1_rstd, a.ln1_out);
    a.qkv.noalias() = a.ln1_out * w.w_qkv;
    add_row(a.qkv, w.b_qkv);

    a.attn.resize(len, d);
    a.probs.resize(cfg.n_heads);
    for (int h = 0; h < cfg.n_heads; ++h) {
      const auto q = a.qkv.middleCols(h * head_dim, head_dim);
      const auto k = a.qkv.middleCols(d + h * head_dim, head_dim);
      const auto v = a.qkv.middleCols(2 * d + h * head_dim, head_dim);
      Matrix<Real>& p = a.probs[h];
      p.noalias() = (q * k.transpose()) * scale;
      for (Eigen::Index i = 0; i < len; ++i) {
        Real mx = p(i, 0);
        for (Eigen::Index j = 1; j <= i; ++j) mx = std::max(mx, p(i, j));
        Real sum = 0;
        for (Eigen::Index j = 0; j <= i; ++j) {
          p(i, j) = std::exp(p(i, j) - mx);
          sum += p(i, j);
        }
        for (Eigen::Index j = 0; j <= i; ++j) p(i, j) /= sum;
        for (Eigen::Index j = i + 1; j < len; ++j) p(i, j) = 0;
      }
      a.attn.middleCols(h * head_dim, head_dim).noalias() = p * v;
    }
    x.noalias() += a.attn * w.w_out;
    add_row(x, w.b_out);

    layer_norm(x, w.ln2_gain, w.ln2_bias, eps, a.ln2_hat, a.ln2_rstd, a.ln2_out);
    a.ff_pre.noalias() = a.ln2_out * w.w_ff1;
    add_row(a.ff_pre, w.b_ff1);
    a.ff_act.resize(a.ff_pre.rows(), a.ff_pre.cols());
    for (Eigen::Index i = 0; i < a.ff_pre.size(); ++i) {
      const Real u = a.ff_pre.data()[i];
      const Real t = std::tanh(static_cast<Real>(kGeluC) * (u + static_cast<Real>(kGeluA) * u * u * u));
      a.ff_act.data()[i] = Real(0.5) * u * (Real(1) + t);
    }
    x.noalias() += a.ff_act * w.w_ff2;
    add_row(x, w.b_ff2);
  }

  layer_norm(x, params.lnf_gain, params.lnf_bias, eps, pass.lnf_hat, pass.lnf_rstd,
             pass.lnf_out);
  const Eigen::Index n_out = len - first_output;
  pass.logprobs.noalias() =
      pass.lnf_out.bottomRows(n_out) * params.token_embedding.transpose();
  for (Eigen::Index r = 0; r < n_out; ++r) {
    const Real mx = pass.logprobs.row(r).maxCoeff();
    Real sum = 0;
    for (Eigen::Index c = 0; c < pass.logprobs.cols(); ++c) sum += std::exp(pass.logprobs(r, c) - mx);
    const Real lse = mx + std::log(sum);
    pass.logprobs.row(r).array() -= lse;
  }
  return pass;
}

template <typename Real>
Matrix<Real> backward(const ModelParameters<Real>& params, const Matrix<Real>& inputs,
                      const ForwardPass<Real>& pass, const Matrix<Real>& d_logits,
                      ModelParameters<Real>* grads) {
  const ModelConfig& cfg = params.config;
  const Eigen::Index len = inputs.rows();
  const int d = cfg.d_model;
  const int head_dim = d / cfg.n_heads;
  const Real scale = Real(1) / std::sqrt(static_cast<Real>(head_dim));
  const Eigen::Index n_out = len - pass.first_output;
  if (d_logits.rows() != n_out || d_logits.cols() != cfg.vocab_size) {
    throw Error(ErrorCode::kArgument, "d_logits shape does not match the forward pass");
  }

  Matrix<Real> d_lnf_out = Matrix<Real>::Zero(len, d);
  d_lnf_out.bottomRows(n_out).noalias() = d_logits * params.token_embedding;
  if (grads) {
    grads->token_embedding.noalias() += d_logits.transpose() * pass.lnf_out.bottomRows(n_out);
  }
  Matrix<Real> dx = layer_norm_backward(d_lnf_out, pass.lnf_hat, pass.lnf_rstd, params.lnf_gain,
                                        grads ? &grads->lnf_gain : nullptr,
                                        grads ? &grads->lnf_bias : nullptr);

  for (std::size_t li = params.layers.size(); li-- > 0;) {
    const LayerWeights<Real>& w = params.layers[li];
    const LayerActivations<Real>& a = pass.layers[li];
    LayerWeights<Real>* g = grads ? &grads->layers[li] : nullptr;

    // Feed-forward block: x += gelu(ln2(x) W1 + b1) W2 + b2.
    Matrix<Real> d_pre = dx * w.w_ff2.transpose();
    if (g) {
      g->w_ff2.noalias() += a.ff_act.transpose() * dx;
      g->b_ff2 += dx.colwise().sum();
    }
    for (Eigen::Index i = 0; i < d_pre.size(); ++i) {
      const Real u = a.ff_pre.data()[i];
      const Real c = static_cast<Real>(kGeluC);
      const Real t = std::tanh(c * (u + static_cast<Real>(kGeluA) * u * u * u));
      const Real du = c * (Real(1) + Real(3) * static_cast<Real>(kGeluA) * u * u);
      d_pre.data()[i] *= Real(0.5) * (Real(1) + t) + Real(0.5) * u * (Real(1) - t * t) * du;
    }
    Matrix<Real> d_ln2 = d_pre * w.w_ff1.transpose();
    if (g) {
      g->w_ff1.noalias() += a.ln2_out.transpose() * d_pre;
      g->b_ff1 += d_pre.colwise().sum();
    }
    dx += layer_norm_backward(d_ln2, a.ln2_hat, a.ln2_rstd, w.ln2_gain,
                              g ? &g->ln2_gain : nullptr, g ? &g->ln2_bias : nullptr);

    // Attention block: x += attn(ln1(x)) Wo + bo.
    Matrix<Real> d_attn = dx * w.w_out.transpose();
    if (g) {
      g->w_out.noalias() += a.attn.transpose() * dx;
      g->b_out += dx.colwise().sum();
    }
    Matrix<Real> d_qkv(len, 3 * d);
    for (int h = 0; h < cfg.n_heads; ++h) {
      const auto q = a.qkv.middleCols(h * head_dim, head_dim);
      const auto k = a.qkv.middleCols(d + h * head_dim, head_dim);
      const auto v = a.qkv.middleCols(2 * d + h * head_dim, head_dim);
      const Matrix<Real>& p = a.probs[h];
      const auto d_out = d_attn.middleCols(h * head_dim, head_dim);
      Matrix<Real> d_p = d_out * v.transpose();
      d_qkv.middleCols(2 * d + h * head_dim, head_dim).noalias() = p.transpose() * d_out;
      Matrix<Real> d_s(len, len);
      for (Eigen::Index i = 0; i < len; ++i) {
        Real dot = 0;
        for (Eigen::Index j = 0; j <= i; ++j) dot += p(i, j) * d_p(i, j);
        for (Eigen::Index j = 0; j < len; ++j) {
          d_s(i, j) = j <= i ? p(i, j) * (d_p(i, j) - dot) * scale : Real(0);
        }
      }
      d_qkv.middleCols(h * head_dim, head_dim).noalias() = d_s * k;
      d_qkv.middleCols(d + h * head_dim, head_dim).noalias() = d_s.transpose() * q;
    }
    Matrix<Real> d_ln1 = d_qkv * w.w_qkv.transpose();
    if (g) {
      g->w_qkv.noalias() += a.ln1_out.transpose() * d_qkv;
      g->b_qkv += d_qkv.colwise().sum();
    }
    dx += layer_norm_backward(d_ln1, a.ln1_hat, a.ln1_rstd, w.ln1_gain,
                              g ? &g->ln1_gain : nullptr, g ? &g->ln1_bias : nullptr);
  }

  if (grads) grads->position_embedding.topRows(len) += dx;
  return dx;
}

template <typename Real>
Matrix<Real> embed(const ModelParameters<Real>& params, std::span<const TokenId> tokens) {
  Matrix<Real> out(static_cast<Eigen::Index>(tokens.size()), params.config.d_model);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const TokenId t = tokens[i];
    if (t < 0 || t >= params.config.vocab_size) {
      throw Error(ErrorCode::kArgument, "token id " + std::to_string(t) + " outside vocabulary");
    }
    out.row(static_cast<Eigen::Index>(i)) = params.token_embedding.row(t);
  }
  return out;
}

template <typename Real>
SequenceEval<Real> evaluate_sequence(const ModelParameters<Real>& params,
                                     const Matrix<Real>& inputs,
                                     std::span<const TokenId> targets, bool want_grad,
                                     Real weight, ModelParameters<Real>* grads) {
  const Eigen::Index len = inputs.rows();
  const auto n_targets = static_cast<Eigen::Index>(targets.size());
  if (n_targets < 1 || n_targets > len) {
    throw Error(ErrorCode::kArgument, "targets must cover 1..L trailing positions");
  }
  for (TokenId t : targets) {
    if (t < 0 || t >= params.config.vocab_size) {
      throw Error(ErrorCode::kArgument, "target id " + std::to_string(t) + " outside vocabulary");
    }
  }
  ForwardPass<Real> pass = forward(params, inputs, static_cast<int>(len - n_targets));
  SequenceEval<Real> out;
  for (Eigen::Index j = 0; j < n_targets; ++j) out.nll -= pass.logprobs(j, targets[j]);
  if (want_grad) {
    Matrix<Real> d_logits = pass.logprobs.array().exp().matrix();
    for (Eigen::Index j = 0; j < n_targets; ++j) d_logits(j, targets[j]) -= Real(1);
    d_logits *= weight;
    out.d_inputs = backward(params, inputs, pass, d_logits, grads);
  }
  out.logprobs = std::move(pass.logprobs);
  return out;
}

template <typename Real>
std::vector<Real> next_token_logprobs(const ModelParameters<Real>& params,
                                      std::span<const TokenId> context) {
  const auto len = static_cast<int>(context.size());
  if (len < 1 || len > params.config.max_seq_len - 1) {
    throw Error(ErrorCode::kLength, "context length " + std::to_string(len) +
                                        " outside [1, max_seq_len - 1]");
  }
  const Matrix<Real> inputs = embed(params, context);
  const ForwardPass<Real> pass = forward(params, inputs, len - 1);
  return std::vector<Real>(pass.logprobs.data(), pass.logprobs.data() + pass.logprobs.cols());
}

#define REPROMPT_INSTANTIATE(Real)                                                         \
  template struct ModelParameters<Real>;                                                   \
  template ModelParameters<Real> init_parameters<Real>(const ModelConfig&);                \
  template ForwardPass<Real> forward(const ModelParameters<Real>&, const Matrix<Real>&, int); \
  template Matrix<Real> backward(const ModelParameters<Real>&, const Matrix<Real>&,         \
                                 const ForwardPass<Real>&, const Matrix<Real>&,              \
                                 ModelParameters<Real>*);                                    \
  template Matrix<Real> embed(const ModelParameters<Real>&, std::span<const TokenId>);      \
  template SequenceEval<Real> evaluate_sequence(const ModelParameters<Real>&,               \
                                                const Matrix<Real>&,                        \
                                                std::span<const TokenId>, bool, Real,       \
                                                ModelParameters<Real>*);                    \
  template std::vector<Real> next_token_logprobs(const ModelParameters<Real>&,              \
                                                 std::span<const TokenId>);

REPROMPT_INSTANTIATE(float)
REPROMPT_INSTANTIATE(double)

}  // namespace reprompt
