#include "reprompt/analysis.hpp"

#include <boost/math/special_functions/beta.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include "reprompt/error.hpp"
#include "reprompt/parallel.hpp"

namespace reprompt {

std::string format_number(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

WinRateTable win_rate_table(const std::map<std::string, MethodScores>& scores) {
  if (scores.empty()) throw Error(ErrorCode::kArgument, "no methods to compare");
  WinRateTable t;
  const MethodScores& first = scores.begin()->second;
  if (first.empty()) throw Error(ErrorCode::kArgument, "no prompts scored");
  for (const auto& [name, s] : scores) {
    if (s.size() != first.size() ||
        !std::equal(s.begin(), s.end(), first.begin(),
                    [](const auto& a, const auto& b) { return a.first == b.first; })) {
      throw Error(ErrorCode::kArgument, "method '" + name + "' was scored on a different prompt set");
    }
    t.methods.push_back(name);
  }
  t.n_prompts = static_cast<int>(first.size());
  const std::size_t m = t.methods.size();
  t.rate.assign(m, std::vector<double>(m, 0.0));
  for (std::size_t a = 0; a < m; ++a) {
    for (std::size_t b = 0; b < m; ++b) {
      const auto& sa = scores.at(t.methods[a]);
      const auto& sb = scores.at(t.methods[b]);
      double wins = 0;
      for (const auto& [id, kl] : sa) {
        const double other = sb.at(id);
        wins += kl < other ? 1.0 : (kl == other ? 0.5 : 0.0);
      }
      t.rate[a][b] = wins / t.n_prompts;
    }
  }
  return t;
}

Interval clopper_pearson(double k, int n, double alpha) {
  if (n < 1 || !(k >= 0) || k > n || !(alpha > 0 && alpha < 1)) {
    throw Error(ErrorCode::kArgument, "clopper_pearson needs 0 <= k <= n, n >= 1, alpha in (0,1)");
  }
  Interval out;
  if (k > 0) out.lo = boost::math::ibeta_inv(k, n - k + 1, alpha / 2);
  if (k < n) out.hi = boost::math::ibeta_inv(k + 1, n - k, 1 - alpha / 2);
  return out;
}

Prompt shuffle_prompt(const Prompt& prompt, Rng& rng) {
  Prompt out = prompt;
  for (std::size_t i = out.size(); i > 1; --i) {
    std::swap(out.tokens[i - 1], out.tokens[uniform_index(rng, i)]);
  }
  return out;
}

void ShuffleTestConfig::validate() const {
  if (trials < 1) throw Error(ErrorCode::kConfig, "trials must be >= 1");
  if (docs_per_trial < 1) throw Error(ErrorCode::kConfig, "docs_per_trial must be >= 1");
  if (!(alpha > 0 && alpha < 1)) throw Error(ErrorCode::kConfig, "alpha must lie in (0, 1)");
}

double sensitivity_statistic(const std::vector<PairSensitivity>& pairs) {
  if (pairs.empty()) throw Error(ErrorCode::kArgument, "no prompt pairs");
  // Compare integer counts so w = 1/2 is detected exactly.
  double total = 0;
  for (const auto& p : pairs) {
    if (2 * p.wins > p.trials) total += 1.0;
    else if (2 * p.wins == p.trials) total += 0.5;
  }
  return total / static_cast<double>(pairs.size());
}

namespace {

// Shuffle drift d(shuffled || original) with documents from the shuffle.
template <typename Real>
double shuffle_drift(const ModelParameters<Real>& params, const Prompt& prompt,
                     const ShuffleTestConfig& config, std::uint64_t shuffle_seed,
                     std::uint64_t doc_seed) {
  Rng rng(shuffle_seed);
  const Prompt shuffled = shuffle_prompt(prompt, rng);
  if (shuffled == prompt) return 0.0;
  const auto docs =
      sample_documents(params, shuffled, config.docs_per_trial, config.sampling, doc_seed);
  return estimate_kl(params, shuffled, prompt, docs).mean;
}

}  // namespace

template <typename Real>
SensitivityResult token_order_sensitivity(const ModelParameters<Real>& params,
                                          const std::vector<PromptPair>& pairs,
                                          const ShuffleTestConfig& config) {
  config.validate();
  if (pairs.empty()) throw Error(ErrorCode::kArgument, "no prompt pairs");
  const std::size_t m = static_cast<std::size_t>(config.trials);
  std::vector<ShuffleTrial> trials(pairs.size() * m);
  parallel_for(trials.size(), [&](std::size_t idx) {
    const std::size_t j = idx / m, t = idx % m;
    const std::uint64_t s = derive_seed(config.seed, {j, t});
    ShuffleTrial& rec = trials[idx];
    rec.pair = static_cast<int>(j);
    rec.trial = static_cast<int>(t);
    rec.kl_candidate = shuffle_drift(params, pairs[j].candidate, config, derive_seed(s, {0}),
                                     derive_seed(s, {1}));
    rec.kl_reference = shuffle_drift(params, pairs[j].reference, config, derive_seed(s, {2}),
                                     derive_seed(s, {3}));
    rec.win = rec.kl_candidate < rec.kl_reference;
  });

  SensitivityResult out;
  out.alpha = config.alpha;
  out.trials = std::move(trials);
  out.pairs.assign(pairs.size(), PairSensitivity{0, config.trials});
  int total_wins = 0;
  for (const auto& rec : out.trials) {
    out.pairs[rec.pair].wins += rec.win;
    total_wins += rec.win;
  }
  const int n = static_cast<int>(pairs.size());
  out.u = sensitivity_statistic(out.pairs);
  for (const auto& p : out.pairs) out.mean_w += p.w();
  out.mean_w /= n;
  out.u_interval = clopper_pearson(out.u * n, n, config.alpha);
  out.w_interval = clopper_pearson(total_wins, n * config.trials, config.alpha);
  return out;
}

template <typename Real>
std::vector<KLEstimate> positional_importance(const ModelParameters<Real>& params,
                                              const Prompt& prompt, TokenId unk_id,
                                              int docs_per_estimate, std::uint64_t seed,
                                              const SamplingConfig& sampling) {
  if (prompt.tokens.empty()) throw Error(ErrorCode::kArgument, "empty prompt");
  if (docs_per_estimate < 1) throw Error(ErrorCode::kArgument, "docs_per_estimate must be >= 1");
  if (!params.config.vocabulary().contains(unk_id)) {
    throw Error(ErrorCode::kArgument, "unk id outside the vocabulary");
  }
  std::vector<KLEstimate> out(prompt.size());
  parallel_for(prompt.size(), [&](std::size_t i) {
    if (prompt.tokens[i] == unk_id) {
      out[i] = KLEstimate{0.0, 0.0, docs_per_estimate, docs_per_estimate == 1};
      return;
    }
    Prompt replaced = prompt;
    replaced.tokens[i] = unk_id;
    const auto docs =
        sample_documents(params, replaced, docs_per_estimate, sampling, derive_seed(seed, {i}));
    out[i] = estimate_kl(params, replaced, prompt, docs);
  });
  return out;
}

std::vector<PositionBin> bin_positional_curves(const std::vector<std::vector<KLEstimate>>& curves,
                                               int bins) {
  if (bins < 1) throw Error(ErrorCode::kArgument, "bins must be >= 1");
  std::vector<std::vector<double>> values(static_cast<std::size_t>(bins));
  for (const auto& curve : curves) {
    const auto k = curve.size();
    for (std::size_t i = 0; i < k; ++i) {
      const auto b = std::min<std::size_t>(i * bins / k, bins - 1);
      values[b].push_back(curve[i].mean);
    }
  }
  std::vector<PositionBin> out(static_cast<std::size_t>(bins));
  for (int b = 0; b < bins; ++b) {
    PositionBin& bin = out[b];
    bin.lo = double(b) / bins;
    bin.hi = double(b + 1) / bins;
    const auto& v = values[b];
    bin.count = static_cast<int>(v.size());
    if (v.empty()) {
      bin.mean = bin.sd = std::numeric_limits<double>::quiet_NaN();
      continue;
    }
    for (double x : v) bin.mean += x;
    bin.mean /= v.size();
    if (v.size() > 1) {
      double sq = 0;
      for (double x : v) sq += (x - bin.mean) * (x - bin.mean);
      bin.sd = std::sqrt(sq / (v.size() - 1));
    }
  }
  return out;
}

std::uint64_t transfer_doc_seed(std::uint64_t root, const std::string& label, std::size_t prompt) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char c : label) h = (h ^ c) * 0x100000001b3ULL;
  return derive_seed(root, {h, prompt});
}

template <typename Real>
TransferMatrix transfer_matrix(const std::vector<SuiteMember<Real>>& suite,
                               const std::vector<Prompt>& ground_truth,
                               const std::vector<std::vector<Prompt>>& prompts,
                               const TransferConfig& config) {
  if (suite.empty()) throw Error(ErrorCode::kArgument, "empty model suite");
  if (ground_truth.empty()) throw Error(ErrorCode::kArgument, "no ground-truth prompts");
  if (config.docs_per_estimate < 1) {
    throw Error(ErrorCode::kArgument, "docs_per_estimate must be >= 1");
  }
  if (prompts.size() != suite.size()) {
    throw Error(ErrorCode::kArgument, "need one prompt list per source model");
  }
  const Vocabulary vocab = suite[0].params->config.vocabulary();
  for (std::size_t s = 0; s < suite.size(); ++s) {
    if (!(suite[s].params->config.vocabulary() == vocab)) {
      throw Error(ErrorCode::kSuite, "model '" + suite[s].label + "' uses a different vocabulary");
    }
    if (prompts[s].size() != ground_truth.size()) {
      throw Error(ErrorCode::kArgument, "source '" + suite[s].label + "' has the wrong prompt count");
    }
  }
  const std::size_t S = suite.size(), J = ground_truth.size();

  // estimates[t][j][s]
  std::vector<std::vector<std::vector<KLEstimate>>> est(
      S, std::vector<std::vector<KLEstimate>>(J, std::vector<KLEstimate>(S)));
  parallel_for(S * J, [&](std::size_t idx) {
    const std::size_t t = idx / J, j = idx % J;
    const auto& params = *suite[t].params;
    const auto docs = sample_documents(params, ground_truth[j], config.docs_per_estimate,
                                       config.sampling,
                                       transfer_doc_seed(config.seed, suite[t].label, j));
    const KLEstimator<Real> kl(params, ground_truth[j], docs);
    for (std::size_t s = 0; s < S; ++s) est[t][j][s] = kl.estimate(prompts[s][j]);
  });

  TransferMatrix m;
  for (const auto& member : suite) m.labels.push_back(member.label);
  m.kl.assign(S, std::vector<KLEstimate>(S));
  m.ratio.assign(S, std::vector<double>(S, 0.0));
  for (std::size_t s = 0; s < S; ++s) {
    for (std::size_t t = 0; t < S; ++t) {
      double mean = 0, var = 0;
      int docs = 0;
      for (std::size_t j = 0; j < J; ++j) {
        mean += est[t][j][s].mean;
        var += est[t][j][s].std_error * est[t][j][s].std_error;
        docs += est[t][j][s].n_docs;
      }
      m.kl[s][t] = KLEstimate{mean / J, std::sqrt(var) / J, docs, config.docs_per_estimate == 1};
    }
  }
  for (std::size_t s = 0; s < S; ++s) {
    for (std::size_t t = 0; t < S; ++t) {
      m.ratio[s][t] = s == t ? 1.0 : m.kl[s][t].mean / m.kl[s][s].mean;
    }
  }
  return m;
}

MeanComparison compare_means(const KLEstimate& a, const KLEstimate& b) {
  MeanComparison c;
  c.difference = b.mean - a.mean;
  c.std_error = std::sqrt(a.std_error * a.std_error + b.std_error * b.std_error);
  c.z = c.std_error > 0 ? c.difference / c.std_error : 0.0;
  c.holds = a.mean <= b.mean;
  return c;
}

std::string win_rate_tsv(const WinRateTable& table) {
  std::ostringstream out;
  out << "method\topponent\twin_rate\tn_prompts\n";
  for (std::size_t a = 0; a < table.methods.size(); ++a) {
    for (std::size_t b = 0; b < table.methods.size(); ++b) {
      out << table.methods[a] << '\t' << table.methods[b] << '\t'
          << format_number(table.rate[a][b]) << '\t' << table.n_prompts << '\n';
    }
  }
  return out.str();
}

std::string sensitivity_tsv(const SensitivityResult& r) {
  std::ostringstream out;
  out << "pair\ttrial\tkl_candidate\tkl_reference\twin\n";
  for (const auto& t : r.trials) {
    out << t.pair << '\t' << t.trial << '\t' << format_number(t.kl_candidate) << '\t'
        << format_number(t.kl_reference) << '\t' << (t.win ? 1 : 0) << '\n';
  }
  return out.str();
}

nlohmann::json sensitivity_summary(const SensitivityResult& r) {
  nlohmann::json w = nlohmann::json::array();
  for (const auto& p : r.pairs) w.push_back({{"wins", p.wins}, {"trials", p.trials}, {"w", p.w()}});
  return {{"U", r.u},
          {"U_interval", {r.u_interval.lo, r.u_interval.hi}},
          {"mean_w", r.mean_w},
          {"w_interval", {r.w_interval.lo, r.w_interval.hi}},
          {"alpha", r.alpha},
          {"n_pairs", r.pairs.size()},
          {"pairs", w}};
}

std::string positional_tsv(const std::vector<std::vector<KLEstimate>>& curves) {
  std::ostringstream out;
  out << "prompt\tposition\tlength\trelative_position\tkl\tstderr\n";
  for (std::size_t p = 0; p < curves.size(); ++p) {
    const auto k = curves[p].size();
    for (std::size_t i = 0; i < k; ++i) {
      out << p << '\t' << i << '\t' << k << '\t' << format_number(double(i) / k) << '\t'
          << format_number(curves[p][i].mean) << '\t' << format_number(curves[p][i].std_error)
          << '\n';
    }
  }
  return out.str();
}

std::string position_bins_tsv(const std::vector<PositionBin>& bins) {
  std::ostringstream out;
  out << "bin_lo\tbin_hi\tcount\tmean_kl\tsd_kl\n";
  for (const auto& b : bins) {
    out << format_number(b.lo) << '\t' << format_number(b.hi) << '\t' << b.count << '\t'
        << format_number(b.mean) << '\t' << format_number(b.sd) << '\n';
  }
  return out.str();
}

std::string transfer_tsv(const TransferMatrix& m) {
  std::ostringstream out;
  out << "source\tdestination\tkl\tstderr\tratio\n";
  for (std::size_t s = 0; s < m.labels.size(); ++s) {
    for (std::size_t t = 0; t < m.labels.size(); ++t) {
      out << m.labels[s] << '\t' << m.labels[t] << '\t' << format_number(m.kl[s][t].mean) << '\t'
          << format_number(m.kl[s][t].std_error) << '\t' << format_number(m.ratio[s][t]) << '\n';
    }
  }
  return out.str();
}

#define REPROMPT_INSTANTIATE(Real)                                                              \
  template SensitivityResult token_order_sensitivity(const ModelParameters<Real>&,             \
                                                     const std::vector<PromptPair>&,           \
                                                     const ShuffleTestConfig&);                \
  template std::vector<KLEstimate> positional_importance(const ModelParameters<Real>&,         \
                                                         const Prompt&, TokenId, int,          \
                                                         std::uint64_t, const SamplingConfig&); \
  template TransferMatrix transfer_matrix(const std::vector<SuiteMember<Real>>&,               \
                                          const std::vector<Prompt>&,                          \
                                          const std::vector<std::vector<Prompt>>&,             \
                                          const TransferConfig&);

REPROMPT_INSTANTIATE(float)
REPROMPT_INSTANTIATE(double)

}  // namespace reprompt
