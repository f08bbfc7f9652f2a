// Acceptance suite: one PASS/FAIL line per criterion. Criteria 1-4 and 7 run
// on small hand-built models; 5, 6, 8 and 9 run the toy pipeline through the
// harness and read its reports.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "grad_oracle.hpp"
#include "reprompt/analysis.hpp"
#include "reprompt/checkpoint.hpp"
#include "reprompt/gcg.hpp"
#include "reprompt/harness.hpp"
#include "reprompt/sampling.hpp"
#include "reprompt/stats.hpp"
#include "test_util.hpp"

namespace reprompt {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using testing::random_params;
using testing::random_tokens;
using testing::rel_error;
using testing::tiny_config;

struct Outcome {
  bool pass = false;
  std::string detail;
  bool gating = true;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---- 1: gradients against central differences ----

Outcome gradients() {
  const ModelConfig config = tiny_config(kByteVocabSize, 16, 2, 2, 24);
  const auto params = random_params<double>(config, 101);
  Rng rng(102);
  const Prompt prompt{random_tokens(rng, 5, config.vocab_size)};
  DocumentSet docs;
  for (int i = 0; i < 3; ++i) docs.push_back({random_tokens(rng, 3 + 2 * i, config.vocab_size)});
  const double h = 1e-5;
  double worst_soft = 0, worst_onehot = 0;

  const Matrix<double> z = embed(params, std::span<const TokenId>(prompt.tokens));
  const Matrix<double> gs = grad_wrt_soft(params, z, docs);
  for (int t = 0; t < 20; ++t) {
    const auto i = static_cast<Eigen::Index>(uniform_index(rng, z.rows()));
    const auto j = static_cast<Eigen::Index>(uniform_index(rng, z.cols()));
    Matrix<double> zp = z, zm = z;
    zp(i, j) += h;
    zm(i, j) -= h;
    const double fd = (soft_loss(params, zp, docs) - soft_loss(params, zm, docs)) / (2 * h);
    worst_soft = std::max(worst_soft, rel_error(gs(i, j), fd));
  }

  // The one-hot gradient is checked with and without the fluency term.
  for (double gamma : {0.0, 1.0}) {
    LossSpec spec;
    spec.fluency_weight = gamma;
    const Matrix<double> g = grad_wrt_onehot(params, prompt, docs, spec);
    const Matrix<double> onehot = testing::onehot_of(prompt, config.vocab_size);
    for (int t = 0; t < 20; ++t) {
      const auto i = static_cast<Eigen::Index>(uniform_index(rng, onehot.rows()));
      const auto v = static_cast<Eigen::Index>(uniform_index(rng, onehot.cols()));
      Matrix<double> pp = onehot, pm = onehot;
      pp(i, v) += h;
      pm(i, v) -= h;
      const double fd = (testing::relaxed_loss(params, pp, docs, spec) -
                         testing::relaxed_loss(params, pm, docs, spec)) / (2 * h);
      worst_onehot = std::max(worst_onehot, rel_error(g(i, v), fd));
    }
  }
  return {worst_soft < 1e-4 && worst_onehot < 1e-4,
          "max rel error soft " + fmt("%.2e", worst_soft) + ", one-hot " + fmt("%.2e", worst_onehot)};
}

// ---- 2: Monte-Carlo estimate against exact enumeration ----

Outcome estimator_vs_exact() {
  const ModelConfig config = tiny_config(8, 8, 2, 2, 12);
  const auto params = random_params<double>(config, 201, 0.8);
  Rng rng(202);
  int within = 0;
  double min_exact = 1e300;
  for (int t = 0; t < 20; ++t) {
    const Prompt ps{random_tokens(rng, 2, 8)}, p{random_tokens(rng, 2, 8)};
    const auto docs = sample_documents(params, ps, 500, SamplingConfig{3, 1.0, false},
                                       derive_seed(203, {std::uint64_t(t)}));
    const KLEstimate k = estimate_kl(params, ps, p, docs);
    const double exact = exact_kl_enumerate(params, ps, p, 3);
    min_exact = std::min(min_exact, exact);
    if (std::abs(k.mean - exact) <= 3 * k.std_error) ++within;
  }
  return {within >= 19 && min_exact >= -1e-9,
          std::to_string(within) + "/20 within 3 stderr, min exact KL " + fmt("%.3g", min_exact)};
}

// ---- 3: identical prompts ----

Outcome identity() {
  const auto params = random_params<double>(tiny_config(), 301);
  Rng rng(302);
  int exact = 0;
  for (int t = 0; t < 50; ++t) {
    const Prompt p{random_tokens(rng, 1 + t % 8, kByteVocabSize)};
    const auto docs = sample_documents(params, p, 10, SamplingConfig{8, 1.0, true},
                                       derive_seed(303, {std::uint64_t(t)}));
    const KLEstimate k = estimate_kl(params, p, p, docs);
    if (k.mean == 0.0 && k.std_error == 0.0) ++exact;
  }
  return {exact == 50, std::to_string(exact) + "/50 exactly (0, 0)"};
}

// ---- 4: GCG monotonicity and coordinate-local optimality ----

Outcome gcg_soundness() {
  int violations = 0;
  for (int inst = 0; inst < 10; ++inst) {
    const auto params = random_params<double>(tiny_config(kByteVocabSize, 16, 1, 2, 24), 400 + inst);
    Rng rng(401 + inst);
    const Prompt truth{random_tokens(rng, 4, kByteVocabSize, kNumSpecial)};
    const auto docs = sample_documents(params, truth, 8, SamplingConfig{6, 1.0, true}, 402 + inst);
    GCGConfig cfg;
    cfg.epochs = 200;
    cfg.top_k = 16;
    cfg.batch = 16;
    cfg.seed = 403 + inst;
    const auto r = reconstruct_hard(params, docs, random_prompt(4, kByteVocabSize, 404 + inst), cfg);
    const auto losses = r.trace.losses();
    for (std::size_t t = 1; t < losses.size(); ++t) {
      if (losses[t] > losses[t - 1]) ++violations;
    }
  }

  int optimal = 0;
  for (int inst = 0; inst < 10; ++inst) {
    const auto params = random_params<double>(tiny_config(8, 8, 2, 2, 12), 410 + inst, 0.8);
    const auto docs = sample_documents(params, Prompt{{4, 5}}, 4, SamplingConfig{2, 1.0, false}, 411 + inst);
    GCGConfig cfg;
    cfg.top_k = 8;
    cfg.batch = 64;  // more than the 14 substitutions, so each step is exhaustive
    Prompt p{{static_cast<TokenId>(inst % 8), static_cast<TokenId>((inst + 3) % 8)}};
    for (int step = 0; step < 100; ++step) {
      const auto next = gcg_step(params, p, docs, cfg, derive_seed(412, {std::uint64_t(step)}));
      if (next.prompt == p) break;
      p = next.prompt;
    }
    const double base = hard_loss(params, p, docs);
    bool improvable = false;
    for (std::size_t i = 0; i < p.size(); ++i) {
      for (TokenId v = 0; v < 8; ++v) {
        Prompt q = p;
        q.tokens[i] = v;
        if (hard_loss(params, q, docs) < base) improvable = true;
      }
    }
    if (!improvable) ++optimal;
  }
  return {violations == 0 && optimal == 10,
          std::to_string(violations) + " monotonicity violations over 10x200 epochs, " +
              std::to_string(optimal) + "/10 fixpoints coordinate-optimal"};
}

// ---- 7: shuffle-test arithmetic and exact intervals ----

// P(X >= k) for X ~ Binomial(n, p), summed directly.
double upper_tail(int k, int n, double p) {
  double total = 0;
  for (int i = k; i <= n; ++i) {
    total += std::exp(std::lgamma(n + 1.0) - std::lgamma(i + 1.0) - std::lgamma(n - i + 1.0) +
                      i * std::log(p) + (n - i) * std::log1p(-p));
  }
  return total;
}

// Lower Clopper-Pearson bound by bisection on the binomial tail.
double lower_bound_oracle(int k, int n, double alpha) {
  if (k == 0) return 0.0;
  double lo = 0, hi = 1;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (upper_tail(k, n, mid) < alpha / 2 ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

Outcome shuffle_mechanics() {
  std::vector<std::string> bad;
  const PairSensitivity win{3, 4}, tie{2, 4}, loss{1, 4};
  if (win.w() != 0.75 || tie.w() != 0.5) bad.push_back("w");
  if (sensitivity_statistic({win, tie, loss}) != 0.5) bad.push_back("U with half credit");
  if (sensitivity_statistic({tie, tie}) != 0.5) bad.push_back("U all ties");

  const auto params = random_params<double>(tiny_config(), 701);
  ShuffleTestConfig cfg;
  cfg.trials = 3;
  cfg.docs_per_trial = 4;
  const auto r = token_order_sensitivity(params, {{Prompt{{10}}, Prompt{{20}}}}, cfg);
  if (r.u != 0.0 || r.pairs[0].wins != 0) bad.push_back("length-1 pair");

  const Interval ten = clopper_pearson(10, 10, 0.05);
  if (std::abs(ten.lo - 0.6915) > 1e-3 || ten.hi != 1.0) bad.push_back("10/10 interval");
  double worst = 0;
  for (int n : {5, 10, 40, 100}) {
    for (int k = 0; k <= n; k += std::max(1, n / 5)) {
      const Interval ci = clopper_pearson(k, n, 0.05);
      worst = std::max(worst, std::abs(ci.lo - lower_bound_oracle(k, n, 0.05)));
      // The upper bound mirrors the lower bound of the failures.
      worst = std::max(worst, std::abs(ci.hi - (1 - lower_bound_oracle(n - k, n, 0.05))));
    }
  }
  if (worst > 1e-9) bad.push_back("interval vs oracle");
  std::string detail = "10/10 lower bound " + fmt("%.4f", ten.lo) + ", max oracle gap " +
                       fmt("%.1e", worst);
  for (const auto& b : bad) detail += "; wrong: " + b;
  return {bad.empty(), detail};
}

// ---- pipeline-based criteria ----

struct Pipeline {
  fs::path root;      // work directory
  fs::path run;       // output_dir used by both runs
  fs::path first;     // first run, moved aside
  std::vector<std::string> overrides;
  harness::ExperimentConfig config;
  std::vector<std::string> failures;
  double seconds = 0;
};

std::vector<std::string> run_pipeline(const harness::ExperimentConfig& config) {
  std::vector<std::string> failures;
  for (const auto& stage : harness::stage_names()) {
    const auto r = harness::run_stage(stage, config);
    for (const auto& f : r.failures) failures.push_back(stage + "/" + f.item + ": " + f.message);
  }
  return failures;
}

json without_timings(json manifest) {
  for (auto& [name, stage] : manifest["stages"].items()) stage.erase("wall_clock_s");
  return manifest;
}

Outcome determinism(Pipeline& p) {
  fs::remove_all(p.run);
  const auto t0 = std::chrono::steady_clock::now();
  const auto second = run_pipeline(p.config);
  std::cout << "  second pipeline run: "
            << std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() << " s\n";
  if (!second.empty()) return {false, "second run failed: " + second.front()};

  std::set<fs::path> files;
  for (const fs::path& dir : {p.first, p.run}) {
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
      if (e.is_regular_file()) files.insert(fs::relative(e.path(), dir));
    }
  }
  int differing = 0;
  std::string first_diff;
  for (const auto& rel : files) {
    const fs::path a = p.first / rel, b = p.run / rel;
    bool same;
    if (rel == "manifest.json") {
      same = fs::exists(a) && fs::exists(b) &&
             without_timings(json::parse(slurp(a))) == without_timings(json::parse(slurp(b)));
    } else {
      same = fs::exists(a) && fs::exists(b) && slurp(a) == slurp(b);
    }
    if (!same) {
      ++differing;
      if (first_diff.empty()) first_diff = rel.string();
    }
  }
  return {differing == 0 && files.size() > 10,
          std::to_string(files.size()) + " files compared, " + std::to_string(differing) +
              " differ" + (first_diff.empty() ? "" : " (first: " + first_diff + ")")};
}

struct ArmSummary {
  double mean = 0;
  double std_error = 0;
  harness::ExperimentConfig config;
};

std::map<std::string, double> best_kls(const fs::path& summary) {
  std::map<std::string, double> out;
  std::istringstream in(slurp(summary));
  for (std::string line; std::getline(in, line);) {
    const json j = json::parse(line);
    out[j["prompt_id"]] = j["best_kl"].is_null() ? NAN : j["best_kl"]["mean"].get<double>();
  }
  return out;
}

Outcome warm_start(Pipeline& p) {
  // The pipeline's own hard run is the cold start (random tokens); the warm
  // arm starts from ground truth with 30% of its tokens replaced.
  auto overrides = p.overrides;
  overrides.insert(overrides.end(), {"output_dir=" + p.first.string(), "hard.name=warm", "hard.init=corrupt", "hard.corrupt_fraction=0.3"});
  const auto warm_cfg = harness::load_config("", overrides);
  const auto r = harness::run_stage("reconstruct-hard", warm_cfg);
  if (!r.failures.empty()) return {false, "warm run failed: " + r.failures.front().message};

  const auto cold = best_kls(p.first / "reconstruct" / p.config.hard.name / "summary.jsonl");
  const auto warm = best_kls(p.first / "reconstruct" / "warm" / "summary.jsonl");
  std::map<std::string, MethodScores> scores{{"cold", cold}, {"warm", warm}};
  const auto table = win_rate_table(scores);
  std::cout << "  win rates (row beats column):\n";
  std::istringstream tsv(win_rate_tsv(table));
  for (std::string line; std::getline(tsv, line);) std::cout << "    " << line << "\n";

  double mc = 0, mw = 0;
  for (const auto& [id, v] : cold) mc += v;
  for (const auto& [id, v] : warm) mw += v;
  mc /= cold.size();
  mw /= warm.size();
  return {cold.size() == 10 && warm.size() == 10 && mw <= mc,
          "mean best KL warm " + fmt("%.4f", mw) + " vs cold " + fmt("%.4f", mc) + " over " +
              std::to_string(warm.size()) + " prompts"};
}

Outcome soft_convergence(Pipeline& p) {
  const auto& c = p.config;
  const auto params = load_checkpoint(p.first / "models" / (c.active_size().label + ".json"))
                          .params.cast<double>();
  const std::vector<int> sizes{4, 16, 64};
  const std::size_t n_prompts = 5;
  // kl[s][j]: best held-out KL for prompt j trained on sizes[s] documents.
  std::vector<std::vector<KLEstimate>> kl(sizes.size(), std::vector<KLEstimate>(n_prompts));
  for (std::size_t j = 0; j < n_prompts; ++j) {
    const Prompt truth = make_prompt(c.prompts[j]);
    const GroundTruth eval{
        truth, harness::read_documents(p.first / "docs" / (harness::prompt_id(j) + ".heldout.jsonl"))};
    // Nested training sets: the first n of one 64-document draw.
    const auto pool = sample_documents(params, truth, sizes.back(), c.sampling,
                                       derive_seed(c.seed, {600, j}));
    for (std::size_t s = 0; s < sizes.size(); ++s) {
      const DocumentSet docs(pool.begin(), pool.begin() + sizes[s]);
      GDConfig gd = c.soft;
      gd.seed = derive_seed(c.seed, {601, j});
      const auto r = reconstruct_soft(params, docs, static_cast<int>(truth.size()), gd, eval);
      kl[s][j] = *r.trace.best_kl();
    }
  }
  std::vector<KLEstimate> pooled(sizes.size());
  for (std::size_t s = 0; s < sizes.size(); ++s) {
    double var = 0;
    for (const auto& k : kl[s]) {
      pooled[s].mean += k.mean / n_prompts;
      var += k.std_error * k.std_error;
    }
    pooled[s].std_error = std::sqrt(var) / n_prompts;
    std::cout << "  n=" << sizes[s] << ": mean best KL " << fmt("%.4f", pooled[s].mean) << " +- "
              << fmt("%.4f", pooled[s].std_error) << "  per prompt:";
    for (const auto& k : kl[s]) std::cout << " " << fmt("%.3f", k.mean);
    std::cout << "\n";
  }
  bool ok = true;
  std::string detail;
  for (std::size_t s = 0; s + 1 < sizes.size(); ++s) {
    const MeanComparison cmp = compare_means(pooled[s + 1], pooled[s]);
    // Non-increasing within one standard error of the difference.
    const bool holds = pooled[s + 1].mean <= pooled[s].mean + cmp.std_error;
    ok = ok && holds;
    detail += (s ? ", " : "") + std::to_string(sizes[s]) + "->" + std::to_string(sizes[s + 1]) +
              ": " + fmt("%+.4f", pooled[s + 1].mean - pooled[s].mean) + " (se " +
              fmt("%.4f", cmp.std_error) + ")";
  }
  return {ok, detail};
}

Outcome transfer(Pipeline& p) {
  std::istringstream in(slurp(p.first / "analysis" / "transfer.tsv"));
  std::string line;
  std::getline(in, line);
  const std::size_t n = p.config.sizes.size();
  int cells = 0, diagonal_exact = 0, finite = 0;
  while (std::getline(in, line)) {
    std::istringstream row(line);
    std::string src, dst, kl, se, ratio;
    std::getline(row, src, '\t');
    std::getline(row, dst, '\t');
    std::getline(row, kl, '\t');
    std::getline(row, se, '\t');
    std::getline(row, ratio, '\t');
    ++cells;
    if (std::isfinite(std::stod(kl)) && std::isfinite(std::stod(ratio))) ++finite;
    if (src == dst && std::stod(ratio) == 1.0) ++diagonal_exact;
  }
  const json s = json::parse(slurp(p.first / "analysis" / "transfer_summary.json"));
  std::cout << "  informative: prompts from the smallest model on the largest, KL "
            << fmt("%.4f", s["smallest_to_largest_kl"]["mean"].get<double>()) << " vs the largest's own "
            << fmt("%.4f", s["largest_self_kl"]["mean"].get<double>()) << "; difference "
            << fmt("%.4f", s["difference"].get<double>()) << " +- "
            << fmt("%.4f", s["difference_stderr"].get<double>()) << " (z "
            << fmt("%.2f", s["z"].get<double>()) << "), smaller transfers worse: "
            << (s["largest_at_least_as_good"].get<bool>() ? "yes" : "no") << "\n";
  return {cells == static_cast<int>(n * n) && finite == cells && diagonal_exact == static_cast<int>(n),
          std::to_string(cells) + " cells emitted, " + std::to_string(diagonal_exact) + "/" +
              std::to_string(n) + " diagonal ratios exactly 1"};
}

}  // namespace
}  // namespace reprompt

int main(int argc, char** argv) {
  using namespace reprompt;
  CLI::App app{"acceptance criteria"};
  std::string work = (fs::temp_directory_path() / "reprompt_acceptance").string();
  std::vector<int> only;
  std::vector<std::string> extra;
  app.add_option("--work-dir", work, "scratch directory for the pipeline runs");
  app.add_option("--only", only, "criterion numbers to run");
  app.add_option("--set", extra, "pipeline config overrides");
  CLI11_PARSE(app, argc, argv);
  auto wanted = [&](int n) { return only.empty() || std::count(only.begin(), only.end(), n); };

  Pipeline pipe;
  pipe.root = work;
  pipe.run = pipe.root / "run";
  pipe.first = pipe.root / "first";
  pipe.overrides = {"output_dir=" + pipe.run.string()};
  pipe.overrides.insert(pipe.overrides.end(), extra.begin(), extra.end());
  const bool needs_pipeline = wanted(5) || wanted(6) || wanted(8) || wanted(9);
  if (needs_pipeline) {
    pipe.config = harness::load_config("", pipe.overrides);
    fs::remove_all(pipe.root);
    const auto t0 = std::chrono::steady_clock::now();
    pipe.failures = run_pipeline(pipe.config);
    pipe.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << "toy pipeline: " << pipe.seconds << " s, " << pipe.failures.size() << " failures\n";
    for (const auto& f : pipe.failures) std::cout << "  " << f << "\n";
    fs::rename(pipe.run, pipe.first);
  }

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient correctness", gradients},
      {"estimator agrees with exact KL", estimator_vs_exact},
      {"identity gives exactly zero", identity},
      {"GCG monotone and locally optimal", gcg_soundness},
      {"warm start beats cold start", [&] { return warm_start(pipe); }},
      {"soft prompt KL falls with more documents", [&] { return soft_convergence(pipe); }},
      {"shuffle test mechanics", shuffle_mechanics},
      {"transfer matrix structure", [&] { return transfer(pipe); }},
      {"pipeline rerun is bit-exact", [&] { return determinism(pipe); }},
  };
  // The warm-start arm adds files to the first run, so the rerun comparison
  // goes before it.
  const std::vector<int> order{1, 2, 3, 4, 7, 8, 6, 9, 5};

  int failed = 0;
  for (int n : order) {
    if (!wanted(n)) continue;
    const auto& [name, fn] = criteria[n - 1];
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      if (needs_pipeline && n >= 5 && n != 7 && !pipe.failures.empty()) {
        o = {false, "pipeline reported failures"};
      } else {
        o = fn();
      }
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << (o.pass ? "PASS" : "FAIL") << " [" << n << "] " << name << ": " << o.detail << " ("
              << fmt("%.1f", secs) << " s)" << std::endl;
    if (!o.pass && o.gating) ++failed;
  }
  return failed == 0 ? 0 : 1;
}
