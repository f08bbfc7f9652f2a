#include "reprompt/soft_prompt.hpp"

#include <cmath>

#include "reprompt/checkpoint.hpp"
#include "reprompt/error.hpp"
#include "reprompt/random.hpp"

namespace reprompt {

void GDConfig::validate() const {
  if (!(step_size > 0) || !std::isfinite(step_size)) {
    throw Error(ErrorCode::kConfig, "step size must be positive");
  }
  if (epochs < 0) throw Error(ErrorCode::kConfig, "epochs must be >= 0");
}

template <typename Real>
Matrix<Real> init_soft(const ModelParameters<Real>& params, int k_p, std::uint64_t seed) {
  if (k_p < 1) throw Error(ErrorCode::kArgument, "soft prompt needs at least one row");
  const auto& w = params.token_embedding;
  Matrix<Real> z(k_p, w.cols());
  Rng rng(derive_seed(seed, {0x50f7}));
  for (int i = 0; i < k_p; ++i) z.row(i) = w.row(static_cast<Eigen::Index>(uniform_index(rng, w.rows())));
  return z;
}

namespace {

template <typename Real>
std::optional<KLEstimate> maybe_kl(const KLEstimator<Real>* est, const Matrix<Real>& z, int epoch,
                                   const GDConfig& config) {
  if (!est || !kl_due(epoch, config.epochs, config.eval_every)) return std::nullopt;
  return est->estimate_soft(z);
}

}  // namespace

template <typename Real>
SoftResult<Real> reconstruct_soft(const ModelParameters<Real>& params, const DocumentSet& docs,
                                  int k_p, const GDConfig& config,
                                  const std::optional<GroundTruth>& eval,
                                  const std::optional<Matrix<Real>>& init) {
  config.validate();
  if (docs.empty()) throw Error(ErrorCode::kArgument, "empty document set");
  Matrix<Real> z = init ? *init : init_soft(params, k_p, config.seed);
  if (z.rows() != k_p || z.cols() != params.config.d_model) {
    throw Error(ErrorCode::kShape, "initial soft prompt has the wrong shape");
  }
  std::optional<KLEstimator<Real>> est;
  if (eval) est.emplace(params, eval->prompt, eval->held_out);

  SoftResult<Real> out;
  Real loss;
  Matrix<Real> grad = grad_wrt_soft(params, z, docs, LossSpec{}, &loss);
  out.trace.add({0, double(loss), {}, maybe_kl(est ? &*est : nullptr, z, 0, config)});
  out.prompt = z;

  Matrix<Real> m1, m2;
  if (config.adaptive) {
    m1 = Matrix<Real>::Zero(z.rows(), z.cols());
    m2 = m1;
  }
  const auto eta = static_cast<Real>(config.step_size);
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    Matrix<Real> next;
    if (config.adaptive) {
      m1 = Real(0.9) * m1 + Real(0.1) * grad;
      m2 = Real(0.999) * m2 + Real(0.001) * grad.cwiseProduct(grad);
      const Real c1 = 1 - std::pow(Real(0.9), Real(epoch));
      const Real c2 = 1 - std::pow(Real(0.999), Real(epoch));
      next = z - eta * ((m1 / c1).array() / ((m2 / c2).array().sqrt() + Real(1e-8))).matrix();
    } else {
      next = z - eta * grad;
    }
    Matrix<Real> next_grad;
    try {
      if (!next.allFinite()) throw Error(ErrorCode::kNumeric, "soft prompt is not finite");
      next_grad = grad_wrt_soft(params, next, docs, LossSpec{}, &loss);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kNumeric) throw;
      out.trace.diverged = true;
      out.trace.diagnostic = "diverged at epoch " + std::to_string(epoch) + ": " + e.what();
      break;
    }
    z = std::move(next);
    grad = std::move(next_grad);
    const int before = out.trace.best_epoch;
    out.trace.add({epoch, double(loss), {}, maybe_kl(est ? &*est : nullptr, z, epoch, config)});
    if (out.trace.best_epoch != before) out.prompt = z;
  }
  out.last = z;
  return out;
}

void save_soft_prompt(const std::filesystem::path& path, const Matrix<float>& prompt,
                      const nlohmann::json& metadata) {
  save_tensors(path, "soft_prompt", {{"prompt", prompt}}, metadata);
}

Matrix<float> load_soft_prompt(const std::filesystem::path& path) {
  TensorFile f = load_tensors(path, "soft_prompt");
  if (f.tensors.size() != 1 || f.tensors[0].name != "prompt" || f.tensors[0].value.rows() < 1) {
    throw Error(ErrorCode::kShape, "soft prompt file must hold one non-empty 'prompt' tensor");
  }
  if (!f.tensors[0].value.allFinite()) throw Error(ErrorCode::kNumeric, "soft prompt is not finite");
  return f.tensors[0].value;
}

#define REPROMPT_INSTANTIATE(Real)                                                          \
  template Matrix<Real> init_soft(const ModelParameters<Real>&, int, std::uint64_t);       \
  template SoftResult<Real> reconstruct_soft(const ModelParameters<Real>&, const DocumentSet&, \
                                             int, const GDConfig&,                          \
                                             const std::optional<GroundTruth>&,             \
                                             const std::optional<Matrix<Real>>&);

REPROMPT_INSTANTIATE(float)
REPROMPT_INSTANTIATE(double)

}  // namespace reprompt
