#pragma once

#include <cmath>
#include <random>

#include "reprompt/model.hpp"
#include "reprompt/random.hpp"

namespace reprompt::testing {

inline ModelConfig tiny_config(int vocab = kByteVocabSize, int d = 16, int layers = 2,
                               int heads = 2, int max_len = 24) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.d_model = d;
  c.n_layers = layers;
  c.n_heads = heads;
  c.d_ff = 2 * d;
  c.max_seq_len = max_len;
  c.seed = 7;
  return c;
}

/// Every tensor (gains and biases included) drawn N(mean, std) so that no
/// code path sees conveniently structured weights.
template <typename Real>
ModelParameters<Real> random_params(const ModelConfig& config, std::uint64_t seed, double std = 0.3) {
  auto p = ModelParameters<Real>::zeros(config);
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  p.visit([&](const std::string& name, Matrix<Real>& m) {
    const bool gain = name.find("gain") != std::string::npos;
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      m.data()[i] = static_cast<Real>((gain ? 1.0 : 0.0) + std * normal(rng));
    }
  });
  return p;
}

inline Tokens random_tokens(Rng& rng, int n, int vocab, int lo = 0) {
  Tokens t(static_cast<std::size_t>(n));
  for (auto& x : t) x = static_cast<TokenId>(lo + uniform_index(rng, vocab - lo));
  return t;
}

inline double rel_error(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace reprompt::testing
