#include "reprompt/gcg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "reprompt/error.hpp"
#include "reprompt/parallel.hpp"
#include "reprompt/random.hpp"

namespace reprompt {

int VocabularyMask::count() const {
  return static_cast<int>(std::count(allowed.begin(), allowed.end(), true));
}

VocabularyMask build_vocab_mask(const DocumentSet& corpus, int vocab_size, std::string provenance) {
  if (corpus.empty()) throw Error(ErrorCode::kArgument, "empty corpus for vocabulary mask");
  VocabularyMask mask{std::vector<bool>(static_cast<std::size_t>(vocab_size), false),
                      std::move(provenance)};
  for (const auto& doc : corpus) {
    for (TokenId t : doc.tokens) {
      if (t < 0 || t >= vocab_size) throw Error(ErrorCode::kArgument, "corpus token out of range");
      if (!Vocabulary::is_special(t)) mask.allowed[t] = true;
    }
  }
  if (mask.count() == 0) throw Error(ErrorCode::kMask, "corpus leaves no allowed tokens");
  return mask;
}

void GCGConfig::validate(int vocab_size) const {
  if (epochs < 0) throw Error(ErrorCode::kConfig, "epochs must be >= 0");
  if (top_k < 1 || top_k > vocab_size) {
    throw Error(ErrorCode::kConfig, "top_k must lie in [1, V]");
  }
  if (batch < 1) throw Error(ErrorCode::kConfig, "batch must be >= 1");
  if (mask) {
    if (static_cast<int>(mask->allowed.size()) != vocab_size) {
      throw Error(ErrorCode::kMask, "mask length differs from the vocabulary size");
    }
    if (mask->count() == 0) throw Error(ErrorCode::kMask, "mask allows no tokens");
  }
}

namespace {

std::vector<TokenId> candidate_tokens(int vocab_size, const VocabularyMask* mask) {
  std::vector<TokenId> out;
  for (TokenId v = 0; v < vocab_size; ++v) {
    if (mask ? mask->permits(v) : !Vocabulary::is_special(v)) out.push_back(v);
  }
  if (out.empty()) throw Error(ErrorCode::kMask, "no tokens to draw from");
  return out;
}

struct Substitution {
  std::size_t pos;
  TokenId token;
};

}  // namespace

template <typename Real>
StepResult gcg_step(const ModelParameters<Real>& params, const Prompt& prompt,
                    const DocumentSet& docs, const GCGConfig& config, std::uint64_t step_seed) {
  const int vocab = params.config.vocab_size;
  config.validate(vocab);
  if (docs.empty()) throw Error(ErrorCode::kArgument, "empty document set");
  const VocabularyMask* mask = config.mask ? &*config.mask : nullptr;

  const Matrix<Real> grad = grad_wrt_onehot(params, prompt, docs, config.loss);
  const std::size_t k_p = prompt.size();

  std::vector<std::vector<TokenId>> pools(k_p);
  std::size_t total = 0;
  for (std::size_t i = 0; i < k_p; ++i) {
    std::vector<TokenId> ids;
    for (TokenId v = 0; v < vocab; ++v) {
      if (v != prompt.tokens[i] && (!mask || mask->permits(v))) ids.push_back(v);
    }
    const auto keep = std::min<std::size_t>(ids.size(), config.top_k);
    std::partial_sort(ids.begin(), ids.begin() + keep, ids.end(), [&](TokenId a, TokenId b) {
      const Real ga = grad(i, a), gb = grad(i, b);
      return ga < gb || (ga == gb && a < b);
    });
    ids.resize(keep);
    total += keep;
    pools[i] = std::move(ids);
  }
  if (total == 0) throw Error(ErrorCode::kMask, "every position has an empty candidate pool");

  std::vector<Substitution> subs;
  if (static_cast<std::size_t>(config.batch) >= total) {
    for (std::size_t i = 0; i < k_p; ++i) {
      for (TokenId v : pools[i]) subs.push_back({i, v});
    }
  } else {
    std::vector<std::size_t> live;
    for (std::size_t i = 0; i < k_p; ++i) {
      if (!pools[i].empty()) live.push_back(i);
    }
    Rng rng(step_seed);
    for (int b = 0; b < config.batch; ++b) {
      const std::size_t i = live[uniform_index(rng, live.size())];
      subs.push_back({i, pools[i][uniform_index(rng, pools[i].size())]});
    }
  }

  const std::size_t n_eval = subs.size() + (config.include_incumbent ? 1 : 0);
  std::vector<double> losses(n_eval);
  parallel_for(n_eval, [&](std::size_t c) {
    Prompt cand = prompt;
    if (c < subs.size()) cand.tokens[subs[c].pos] = subs[c].token;
    losses[c] = static_cast<double>(hard_loss(params, cand, docs, config.loss));
  });

  std::size_t best = 0;
  for (std::size_t c = 1; c < n_eval; ++c) {
    if (losses[c] < losses[best]) best = c;
  }
  StepResult out{prompt, losses[best]};
  if (best < subs.size()) out.prompt.tokens[subs[best].pos] = subs[best].token;
  return out;
}

template <typename Real>
HardResult<Real> reconstruct_hard(const ModelParameters<Real>& params, const DocumentSet& docs,
                                  const Prompt& init, const GCGConfig& config,
                                  const std::optional<GroundTruth>& eval) {
  config.validate(params.config.vocab_size);
  if (init.tokens.empty()) throw Error(ErrorCode::kArgument, "initial prompt is empty");
  for (TokenId t : init.tokens) {
    if (!params.config.vocabulary().contains(t)) {
      throw Error(ErrorCode::kArgument, "initial prompt token out of vocabulary");
    }
  }
  std::optional<KLEstimator<Real>> est;
  if (eval) est.emplace(params, eval->prompt, eval->held_out);
  auto kl_at = [&](const Prompt& p, int epoch) -> std::optional<KLEstimate> {
    if (!est || !kl_due(epoch, config.epochs, config.eval_every)) return std::nullopt;
    return est->estimate(p);
  };

  HardResult<Real> out;
  Prompt current = init;
  out.prompt = init;
  out.trace.add({0, static_cast<double>(hard_loss(params, current, docs, config.loss)),
                 current.tokens, kl_at(current, 0)});
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    StepResult step = gcg_step(params, current, docs, config,
                               derive_seed(config.seed, {static_cast<std::uint64_t>(epoch)}));
    current = std::move(step.prompt);
    const int before = out.trace.best_epoch;
    out.trace.add({epoch, step.loss, current.tokens, kl_at(current, epoch)});
    if (out.trace.best_epoch != before) out.prompt = current;
  }
  return out;
}

template <typename Real>
HardResult<Real> reconstruct_hard(const ModelParameters<Real>& params, const DocumentSet& docs,
                                  const std::string& warm_start, const GCGConfig& config,
                                  const std::optional<GroundTruth>& eval) {
  Prompt init = make_prompt(warm_start);
  if (init.tokens.empty()) throw Error(ErrorCode::kArgument, "warm start tokenizes to nothing");
  return reconstruct_hard(params, docs, init, config, eval);
}

Prompt corrupt_prompt(const Prompt& prompt, double fraction, int vocab_size, std::uint64_t seed,
                      const VocabularyMask* mask) {
  if (!(fraction >= 0 && fraction <= 1)) {
    throw Error(ErrorCode::kArgument, "corruption fraction must lie in [0, 1]");
  }
  const auto pool = candidate_tokens(vocab_size, mask);
  Rng rng(seed);
  std::vector<std::size_t> order(prompt.size());
  std::iota(order.begin(), order.end(), 0);
  // Partial Fisher-Yates picks the positions to replace.
  const auto n = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(prompt.size())));
  Prompt out = prompt;
  for (std::size_t j = 0; j < n; ++j) {
    std::swap(order[j], order[j + uniform_index(rng, order.size() - j)]);
    const std::size_t pos = order[j];
    if (pool.size() == 1 && pool[0] == prompt.tokens[pos]) continue;
    TokenId t;
    do {
      t = pool[uniform_index(rng, pool.size())];
    } while (t == prompt.tokens[pos]);
    out.tokens[pos] = t;
  }
  return out;
}

Prompt random_prompt(int k, int vocab_size, std::uint64_t seed, const VocabularyMask* mask) {
  if (k < 1) throw Error(ErrorCode::kArgument, "prompt length must be >= 1");
  const auto pool = candidate_tokens(vocab_size, mask);
  Rng rng(seed);
  Prompt out;
  for (int i = 0; i < k; ++i) out.tokens.push_back(pool[uniform_index(rng, pool.size())]);
  return out;
}

#define REPROMPT_INSTANTIATE(Real)                                                             \
  template StepResult gcg_step(const ModelParameters<Real>&, const Prompt&, const DocumentSet&, \
                               const GCGConfig&, std::uint64_t);                               \
  template HardResult<Real> reconstruct_hard(const ModelParameters<Real>&, const DocumentSet&,  \
                                             const Prompt&, const GCGConfig&,                  \
                                             const std::optional<GroundTruth>&);               \
  template HardResult<Real> reconstruct_hard(const ModelParameters<Real>&, const DocumentSet&,  \
                                             const std::string&, const GCGConfig&,             \
                                             const std::optional<GroundTruth>&);

REPROMPT_INSTANTIATE(float)
REPROMPT_INSTANTIATE(double)

}  // namespace reprompt
