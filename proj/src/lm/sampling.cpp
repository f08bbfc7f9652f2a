#include "reprompt/sampling.hpp"

#include <cmath>

#include "reprompt/error.hpp"
#include "reprompt/parallel.hpp"
#include "reprompt/random.hpp"

namespace reprompt {

namespace {

template <typename Real>
TokenId draw(const std::vector<Real>& logprobs, double temperature, Rng& rng) {
  if (temperature == 0.0) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < logprobs.size(); ++i) {
      if (logprobs[i] > logprobs[best]) best = i;
    }
    return static_cast<TokenId>(best);
  }
  std::vector<double> weights(logprobs.size());
  double mx = -INFINITY;
  for (Real lp : logprobs) mx = std::max(mx, static_cast<double>(lp) / temperature);
  double total = 0;
  for (std::size_t i = 0; i < logprobs.size(); ++i) {
    weights[i] = std::exp(static_cast<double>(logprobs[i]) / temperature - mx);
    total += weights[i];
  }
  const double u = uniform_unit(rng) * total;
  double acc = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    acc += weights[i];
    if (u < acc) return static_cast<TokenId>(i);
  }
  // u landed in the rounding gap at the top; take the last non-zero weight.
  for (std::size_t i = weights.size(); i-- > 0;) {
    if (weights[i] > 0) return static_cast<TokenId>(i);
  }
  return 0;
}

}  // namespace

template <typename Real>
DocumentSet sample_documents(const ModelParameters<Real>& params, const Prompt& prompt, int n,
                             const SamplingConfig& config, std::uint64_t seed) {
  if (n < 1) throw Error(ErrorCode::kArgument, "n must be at least 1");
  if (!(config.temperature >= 0.0)) throw Error(ErrorCode::kArgument, "temperature must be >= 0");
  if (config.max_len < 0) throw Error(ErrorCode::kArgument, "max_len must be >= 0");
  if (prompt.tokens.empty()) throw Error(ErrorCode::kArgument, "empty prompt");
  if (static_cast<int>(prompt.size()) + config.max_len > params.config.max_seq_len) {
    throw Error(ErrorCode::kCapacity, "prompt length " + std::to_string(prompt.size()) +
                                          " + max_len " + std::to_string(config.max_len) +
                                          " exceeds max_seq_len " +
                                          std::to_string(params.config.max_seq_len));
  }
  DocumentSet docs(static_cast<std::size_t>(n));
  parallel_for(docs.size(), [&](std::size_t i) {
    Rng rng(derive_seed(seed, {i}));
    Tokens context = prompt.tokens;
    Document& doc = docs[i];
    for (int step = 0; step < config.max_len; ++step) {
      const TokenId t = draw(next_token_logprobs(params, std::span<const TokenId>(context)),
                             config.temperature, rng);
      doc.tokens.push_back(t);
      context.push_back(t);
      if (config.stop_at_eos && t == kEos) break;
    }
  });
  return docs;
}

template DocumentSet sample_documents(const ModelParameters<float>&, const Prompt&, int,
                                      const SamplingConfig&, std::uint64_t);
template DocumentSet sample_documents(const ModelParameters<double>&, const Prompt&, int,
                                      const SamplingConfig&, std::uint64_t);

}  // namespace reprompt
