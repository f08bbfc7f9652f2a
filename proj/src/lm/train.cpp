#include "reprompt/train.hpp"

#include <cmath>
#include <numeric>

#include "reprompt/error.hpp"
#include "reprompt/random.hpp"

namespace reprompt {

namespace {

// [BOS] doc [EOS], or doc [EOS] when with_bos is false (documents too short
// to leave a target keep the BOS).
Tokens framed(const Document& doc, int max_seq_len, bool with_bos = true) {
  Tokens seq;
  seq.reserve(doc.size() + 2);
  if (with_bos || doc.tokens.empty()) seq.push_back(kBos);
  seq.insert(seq.end(), doc.tokens.begin(), doc.tokens.end());
  seq.push_back(kEos);
  if (static_cast<int>(seq.size()) > max_seq_len + 1) seq.resize(max_seq_len + 1);
  return seq;
}

}  // namespace

template <typename Real>
TrainResult<Real> train_model(const std::vector<Document>& corpus, const ModelConfig& config,
                              const TrainConfig& train) {
  if (corpus.empty()) throw Error(ErrorCode::kArgument, "empty training corpus");
  if (train.steps < 0 || train.batch_size < 1) {
    throw Error(ErrorCode::kArgument, "steps must be >= 0 and batch_size >= 1");
  }
  if (!(train.bos_rate >= 0 && train.bos_rate <= 1)) {
    throw Error(ErrorCode::kArgument, "bos_rate must lie in [0, 1]");
  }
  config.validate();

  TrainResult<Real> result{init_parameters<Real>(config), {}};
  ModelParameters<Real>& params = result.params;
  ModelParameters<Real> grads = ModelParameters<Real>::zeros(config);
  ModelParameters<Real> m = ModelParameters<Real>::zeros(config);
  ModelParameters<Real> v = ModelParameters<Real>::zeros(config);
  m.set_zero();
  v.set_zero();
  auto param_t = params.tensors();
  auto grad_t = grads.tensors();
  auto m_t = m.tensors();
  auto v_t = v.tensors();

  Rng order_rng(train.data_seed);
  Rng frame_rng(derive_seed(train.data_seed, {1}));
  std::vector<std::size_t> order(corpus.size());
  std::size_t cursor = order.size();

  for (int step = 0; step < train.steps; ++step) {
    std::vector<Tokens> batch;
    while (static_cast<int>(batch.size()) < train.batch_size) {
      if (cursor == order.size()) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        for (std::size_t i = order.size(); i > 1; --i) {
          std::swap(order[i - 1], order[uniform_index(order_rng, i)]);
        }
        cursor = 0;
      }
      const bool with_bos = uniform_unit(frame_rng) < train.bos_rate;
      batch.push_back(framed(corpus[order[cursor++]], config.max_seq_len, with_bos));
    }

    std::size_t n_targets = 0;
    for (const Tokens& seq : batch) n_targets += seq.size() - 1;
    const Real weight = Real(1) / static_cast<Real>(n_targets);

    grads.set_zero();
    double loss = 0;
    for (const Tokens& seq : batch) {
      const std::span<const TokenId> in(seq.data(), seq.size() - 1);
      const std::span<const TokenId> targets(seq.data() + 1, seq.size() - 1);
      const Matrix<Real> inputs = embed(params, in);
      SequenceEval<Real> ev = evaluate_sequence(params, inputs, targets, true, weight, &grads);
      for (std::size_t r = 0; r < in.size(); ++r) {
        grads.token_embedding.row(in[r]) += ev.d_inputs.row(static_cast<Eigen::Index>(r));
      }
      loss += static_cast<double>(ev.nll);
    }
    loss /= static_cast<double>(n_targets);
    if (!std::isfinite(loss) || !grads.all_finite()) {
      throw Error(ErrorCode::kNumeric, "training loss became non-finite at step " +
                                           std::to_string(step));
    }
    result.loss_trace.push_back(loss);

    if (train.grad_clip > 0) {
      double sq = 0;
      for (auto& [name, g] : grad_t) sq += static_cast<double>(g->squaredNorm());
      const double norm = std::sqrt(sq);
      if (norm > train.grad_clip) {
        const Real s = static_cast<Real>(train.grad_clip / norm);
        for (auto& [name, g] : grad_t) *g *= s;
      }
    }

    const double t = step + 1;
    const Real lr = static_cast<Real>(train.learning_rate);
    const Real b1 = static_cast<Real>(train.beta1), b2 = static_cast<Real>(train.beta2);
    const Real c1 = static_cast<Real>(1.0 - std::pow(train.beta1, t));
    const Real c2 = static_cast<Real>(1.0 - std::pow(train.beta2, t));
    const Real eps = static_cast<Real>(train.adam_eps);
    for (std::size_t k = 0; k < param_t.size(); ++k) {
      auto& p = *param_t[k].second;
      const auto& g = *grad_t[k].second;
      auto& mk = *m_t[k].second;
      auto& vk = *v_t[k].second;
      for (Eigen::Index i = 0; i < p.size(); ++i) {
        const Real gi = g.data()[i];
        mk.data()[i] = b1 * mk.data()[i] + (Real(1) - b1) * gi;
        vk.data()[i] = b2 * vk.data()[i] + (Real(1) - b2) * gi * gi;
        const Real mhat = mk.data()[i] / c1;
        const Real vhat = vk.data()[i] / c2;
        p.data()[i] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }
  return result;
}

template <typename Real>
double corpus_token_nll(const ModelParameters<Real>& params, const std::vector<Document>& corpus) {
  double total = 0;
  std::size_t count = 0;
  for (const auto& doc : corpus) {
    const Tokens seq = framed(doc, params.config.max_seq_len);
    const std::span<const TokenId> in(seq.data(), seq.size() - 1);
    const Matrix<Real> inputs = embed(params, in);
    total += static_cast<double>(
        evaluate_sequence(params, inputs, std::span<const TokenId>(seq.data() + 1, seq.size() - 1),
                          false)
            .nll);
    count += seq.size() - 1;
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

template TrainResult<float> train_model(const std::vector<Document>&, const ModelConfig&,
                                        const TrainConfig&);
template TrainResult<double> train_model(const std::vector<Document>&, const ModelConfig&,
                                         const TrainConfig&);
template double corpus_token_nll(const ModelParameters<float>&, const std::vector<Document>&);
template double corpus_token_nll(const ModelParameters<double>&, const std::vector<Document>&);

}  // namespace reprompt
