#include <algorithm>
#include <chrono>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>

#include "reprompt/checkpoint.hpp"
#include "reprompt/corpus.hpp"
#include "reprompt/harness.hpp"
#include "reprompt/parallel.hpp"

namespace reprompt::harness {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Stage tags mixed into the root seed.
enum SeedTag : std::uint64_t {
  kCorpusSeed = 0,
  kGenerateSeed = 3,
  kSoftSeed = 4,
  kHardSeed = 5,
  kHardInitSeed = 6,
  kPositionSeed = 8,
  kTransferDocsSeed = 10,
};

std::string dump(const json& j) {
  return j.dump(-1, ' ', false, json::error_handler_t::replace);
}

std::uint64_t name_key(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) h = (h ^ c) * 0x100000001b3ULL;
  return h;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out << text;
  if (!out) throw Error(ErrorCode::kIo, "short write to " + path.string());
}

std::vector<json> read_jsonl(const fs::path& path) {
  std::vector<json> out;
  std::istringstream in(read_text(path));
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded()) throw Error(ErrorCode::kIo, "malformed line in " + path.string());
    out.push_back(std::move(j));
  }
  return out;
}

// TSV cell for free text: left bare unless it needs escaping.
std::string quoted(const std::string& text) {
  const std::string escaped = dump(json(text));
  return escaped.compare(1, escaped.size() - 2, text) == 0 ? text : escaped;
}

class Stage {
 public:
  Stage(const ExperimentConfig& config, std::string name)
      : config_(config), start_(std::chrono::steady_clock::now()) {
    report_.stage = std::move(name);
  }

  fs::path path(const fs::path& rel) const { return config_.output_dir / rel; }

  void write(const fs::path& rel, const std::string& text) {
    write_text(path(rel), text);
    add_output(rel);
  }

  void add_output(const fs::path& rel) {
    std::lock_guard lock(mutex_);
    report_.outputs.push_back(rel);
  }

  void fail(const std::string& item, const Error& e) {
    std::lock_guard lock(mutex_);
    report_.failures.push_back({item, e.code(), e.what()});
  }

  // Runs fn for every prompt on the worker pool; a failing prompt is recorded
  // and skipped.
  template <typename Fn>
  void for_each_prompt(std::size_t n, Fn fn) {
    std::vector<std::optional<Failure>> failures(n);
    parallel_for(n, [&](std::size_t j) {
      try {
        fn(j);
      } catch (const Error& e) {
        failures[j] = Failure{prompt_id(j), e.code(), e.what()};
      } catch (const json::exception& e) {
        failures[j] = Failure{prompt_id(j), ErrorCode::kIo, e.what()};
      }
    });
    for (auto& f : failures) {
      if (f) report_.failures.push_back(*f);
    }
  }

  StageReport finish() {
    std::sort(report_.outputs.begin(), report_.outputs.end());
    report_.wall_clock_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    return report_;
  }

 private:
  const ExperimentConfig& config_;
  std::chrono::steady_clock::time_point start_;
  StageReport report_;
  std::mutex mutex_;
};

std::vector<std::string> load_corpus_lines(const ExperimentConfig& c) {
  if (c.corpus_path.empty()) {
    return synthetic_corpus(c.synthetic_lines, derive_seed(c.seed, {kCorpusSeed}));
  }
  return read_corpus(c.corpus_path);
}

fs::path model_path(const std::string& label) { return fs::path("models") / (label + ".json"); }

ModelParameters<double> load_model(const ExperimentConfig& c, const SizeSpec& size) {
  ModelBundle bundle = load_checkpoint(c.output_dir / model_path(size.label));
  if (!(bundle.vocabulary == size.config.vocabulary())) {
    throw Error(ErrorCode::kSuite, "checkpoint '" + size.label + "' vocabulary differs from config");
  }
  return bundle.params.cast<double>();
}

Prompt ground_truth(const ExperimentConfig& c, std::size_t j) { return make_prompt(c.prompts[j]); }

fs::path docs_path(std::size_t j) { return fs::path("docs") / (prompt_id(j) + ".jsonl"); }
fs::path held_path(std::size_t j) { return fs::path("docs") / (prompt_id(j) + ".heldout.jsonl"); }
fs::path method_dir(const std::string& method) { return fs::path("reconstruct") / method; }

json kl_json(const std::optional<KLEstimate>& k) { return k ? json(*k) : json(nullptr); }

std::string kl_cell(const json& k, const char* field) {
  return k.is_null() ? "nan" : format_number(k.at(field).get<double>());
}

// Per-prompt summaries written by the reconstruction stages, keyed by prompt id.
std::map<std::string, json> read_summary(const ExperimentConfig& c, const std::string& method) {
  const fs::path file = c.output_dir / method_dir(method) / "summary.jsonl";
  if (!fs::exists(file)) {
    throw Error(ErrorCode::kIo, "no reconstruction results for method '" + method + "'");
  }
  std::map<std::string, json> out;
  for (auto& j : read_jsonl(file)) {
    const auto id = j.at("prompt_id").get<std::string>();
    out[id] = std::move(j);
  }
  return out;
}

std::vector<std::string> available_methods(const ExperimentConfig& c) {
  std::vector<std::string> out;
  const fs::path root = c.output_dir / "reconstruct";
  if (!fs::exists(root)) return out;
  for (const auto& e : fs::directory_iterator(root)) {
    if (fs::exists(e.path() / "summary.jsonl")) out.push_back(e.path().filename().string());
  }
  std::sort(out.begin(), out.end());
  return out;
}

void write_summary(Stage& stage, const std::string& method, const std::vector<json>& rows,
                   const std::vector<std::string>& columns) {
  std::string jsonl, tsv;
  for (std::size_t i = 0; i < columns.size(); ++i) tsv += (i ? "\t" : "") + columns[i];
  tsv += "\n";
  for (const auto& r : rows) {
    if (r.is_null()) continue;
    jsonl += dump(r) + "\n";
    for (std::size_t i = 0; i < columns.size(); ++i) {
      const std::string& col = columns[i];
      std::string cell;
      if (col == "best_kl") {
        cell = kl_cell(r.at("best_kl"), "mean");
      } else if (col == "best_kl_stderr") {
        cell = kl_cell(r.at("best_kl"), "stderr");
      } else {
        const json& v = r.at(col);
        cell = v.is_string() ? quoted(v.get<std::string>())
               : v.is_number_float() ? format_number(v.get<double>())
                                     : dump(v);
      }
      tsv += (i ? "\t" : "") + cell;
    }
    tsv += "\n";
  }
  stage.write(method_dir(method) / "summary.jsonl", jsonl);
  stage.write(method_dir(method) / "summary.tsv", tsv);
}

Prompt hard_init(const ExperimentConfig& c, const HardRun& run, const Prompt& truth, std::size_t j,
                 int vocab, const VocabularyMask* mask, std::uint64_t tag) {
  const std::uint64_t seed = derive_seed(c.seed, {kHardInitSeed, name_key(run.name), tag, j});
  switch (run.init) {
    case HardInit::kRandom:
      return random_prompt(static_cast<int>(truth.size()), vocab, seed, mask);
    case HardInit::kRepeat:
      return Prompt{Tokens(truth.size(), kNumSpecial)};
    case HardInit::kCorrupt:
      return corrupt_prompt(truth, run.corrupt_fraction, vocab, seed, mask);
    case HardInit::kText:
      break;
  }
  Prompt p = make_prompt(run.warm_starts.at(j));
  if (p.tokens.empty()) throw Error(ErrorCode::kArgument, "warm start tokenizes to nothing");
  return p;
}

}  // namespace

std::string prompt_id(std::size_t index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "p%02zu", index);
  return buf;
}

void write_documents(const fs::path& path, const DocumentSet& docs) {
  std::string text;
  for (const auto& d : docs) {
    text += dump({{"tokens", d.tokens}, {"text", detokenize(d.tokens)}}) + "\n";
  }
  write_text(path, text);
}

DocumentSet read_documents(const fs::path& path) {
  DocumentSet docs;
  for (const auto& j : read_jsonl(path)) docs.push_back(Document{j.at("tokens").get<Tokens>()});
  if (docs.empty()) throw Error(ErrorCode::kIo, path.string() + " holds no documents");
  return docs;
}

StageReport cmd_train(const ExperimentConfig& c) {
  Stage stage(c, "train");
  const auto lines = load_corpus_lines(c);
  const auto corpus = tokenize_corpus(lines);
  std::string corpus_text;
  for (const auto& l : lines) corpus_text += l + "\n";
  const json corpus_info = {
      {"source", c.corpus_path.empty() ? "synthetic" : c.corpus_path.string()},
      {"lines", lines.size()},
      {"sha256", sha256_hex(corpus_text.data(), corpus_text.size())}};
  // Sizes train one after another; each owns the whole worker pool.
  json suite = json::array();
  for (const auto& size : c.sizes) {
    try {
      const auto result = train_model<float>(corpus, size.config, c.train);
      const json provenance = {{"label", size.label},
                               {"corpus", corpus_info},
                               {"train", {{"steps", c.train.steps},
                                          {"batch_size", c.train.batch_size},
                                          {"learning_rate", c.train.learning_rate},
                                          {"bos_rate", c.train.bos_rate},
                                          {"data_seed", c.train.data_seed}}},
                               {"final_loss", result.loss_trace.empty()
                                                  ? json(nullptr)
                                                  : json(result.loss_trace.back())}};
      save_checkpoint(result.params, stage.path(model_path(size.label)), provenance);
      stage.add_output(model_path(size.label));
      stage.add_output(fs::path("models") / (size.label + ".bin"));
      std::string tsv = "step\tloss\n";
      for (std::size_t s = 0; s < result.loss_trace.size(); ++s) {
        tsv += std::to_string(s) + "\t" + format_number(result.loss_trace[s]) + "\n";
      }
      stage.write(fs::path("models") / (size.label + ".loss.tsv"), tsv);
      suite.push_back({{"label", size.label},
                       {"config", config_to_json(size.config)},
                       {"vocabulary_sha256", size.config.vocabulary().layout_hash()},
                       {"final_loss", provenance["final_loss"]}});
    } catch (const Error& e) {
      stage.fail(size.label, e);
    }
  }
  stage.write("models/suite.json", dump({{"corpus", corpus_info}, {"sizes", suite}}) + "\n");
  return stage.finish();
}

StageReport cmd_generate(const ExperimentConfig& c) {
  Stage stage(c, "generate");
  const auto params = load_model(c, c.active_size());
  std::string index = "prompt_id\ttext\ttokens\n";
  for (std::size_t j = 0; j < c.prompts.size(); ++j) {
    index += prompt_id(j) + "\t" + quoted(c.prompts[j]) + "\t" +
             dump(json(ground_truth(c, j).tokens)) + "\n";
  }
  stage.write("docs/prompts.tsv", index);
  stage.for_each_prompt(c.prompts.size(), [&](std::size_t j) {
    const Prompt p = ground_truth(c, j);
    const auto docs =
        sample_documents(params, p, c.n_docs, c.sampling, derive_seed(c.seed, {kGenerateSeed, j, 0}));
    const auto held = sample_documents(params, p, c.held_out, c.sampling,
                                       derive_seed(c.seed, {kGenerateSeed, j, 1}));
    write_documents(stage.path(docs_path(j)), docs);
    stage.add_output(docs_path(j));
    write_documents(stage.path(held_path(j)), held);
    stage.add_output(held_path(j));
  });
  return stage.finish();
}

StageReport cmd_reconstruct_soft(const ExperimentConfig& c) {
  Stage stage(c, "reconstruct-soft");
  const auto params = load_model(c, c.active_size());
  std::vector<json> rows(c.prompts.size());
  stage.for_each_prompt(c.prompts.size(), [&](std::size_t j) {
    const Prompt truth = ground_truth(c, j);
    const auto docs = read_documents(c.output_dir / docs_path(j));
    const GroundTruth eval{truth, read_documents(c.output_dir / held_path(j))};
    GDConfig gd = c.soft;
    gd.seed = derive_seed(c.seed, {kSoftSeed, j});
    const int k_p = c.soft_length > 0 ? c.soft_length : static_cast<int>(truth.size());
    const auto r = reconstruct_soft(params, docs, k_p, gd, eval);

    const fs::path base = method_dir(c.soft_name) / prompt_id(j);
    stage.write(base.string() + ".trace.jsonl", trace_jsonl(r.trace));
    const fs::path prompt_file = base.string() + ".prompt.json";
    save_soft_prompt(stage.path(prompt_file), r.prompt.cast<float>(),
                     {{"prompt_id", prompt_id(j)}, {"best_epoch", r.trace.best_epoch}});
    stage.add_output(prompt_file);
    stage.add_output(base.string() + ".prompt.bin");
    rows[j] = {{"prompt_id", prompt_id(j)},
               {"truth", c.prompts[j]},
               {"rows", k_p},
               {"best_epoch", r.trace.best_epoch},
               {"best_loss", r.trace.best_loss()},
               {"best_kl_epoch", r.trace.best_kl_epoch},
               {"best_kl", kl_json(r.trace.best_kl())},
               {"diverged", r.trace.diverged}};
    if (r.trace.diverged) throw Error(ErrorCode::kNumeric, r.trace.diagnostic);
  });
  write_summary(stage, c.soft_name, rows,
                {"prompt_id", "truth", "rows", "best_epoch", "best_loss", "best_kl_epoch", "best_kl",
                 "best_kl_stderr", "diverged"});
  return stage.finish();
}

StageReport cmd_reconstruct_hard(const ExperimentConfig& c) {
  Stage stage(c, "reconstruct-hard");
  const auto& size = c.active_size();
  const auto params = load_model(c, size);
  const int vocab = size.config.vocab_size;
  GCGConfig gcg = c.hard.gcg;
  if (c.hard.mask_from_corpus) {
    const auto lines = load_corpus_lines(c);
    gcg.mask = build_vocab_mask(tokenize_corpus(lines), vocab,
                                c.corpus_path.empty() ? "synthetic" : c.corpus_path.string());
  }
  std::vector<json> rows(c.prompts.size());
  stage.for_each_prompt(c.prompts.size(), [&](std::size_t j) {
    const Prompt truth = ground_truth(c, j);
    const auto docs = read_documents(c.output_dir / docs_path(j));
    const GroundTruth eval{truth, read_documents(c.output_dir / held_path(j))};
    const VocabularyMask* mask = gcg.mask ? &*gcg.mask : nullptr;
    const Prompt init = hard_init(c, c.hard, truth, j, vocab, mask, 0);
    GCGConfig cfg = gcg;
    cfg.seed = derive_seed(c.seed, {kHardSeed, name_key(c.hard.name), j});
    const auto r = reconstruct_hard(params, docs, init, cfg, eval);

    const fs::path base = method_dir(c.hard.name) / prompt_id(j);
    stage.write(base.string() + ".trace.jsonl", trace_jsonl(r.trace));
    rows[j] = {{"prompt_id", prompt_id(j)},
               {"truth", c.prompts[j]},
               {"init", detokenize(init.tokens)},
               {"text", detokenize(r.prompt.tokens)},
               {"tokens", r.prompt.tokens},
               {"best_epoch", r.trace.best_epoch},
               {"best_loss", r.trace.best_loss()},
               {"truth_loss", static_cast<double>(hard_loss(params, truth, docs, cfg.loss))},
               {"best_kl_epoch", r.trace.best_kl_epoch},
               {"best_kl", kl_json(r.trace.best_kl())}};
    if (gcg.mask) rows[j]["mask_size"] = gcg.mask->count();
  });
  write_summary(stage, c.hard.name, rows,
                {"prompt_id", "truth", "init", "text", "best_epoch", "best_loss", "truth_loss",
                 "best_kl_epoch", "best_kl", "best_kl_stderr"});
  return stage.finish();
}

StageReport cmd_kl(const ExperimentConfig& c) {
  Stage stage(c, "kl");
  const auto params = load_model(c, c.active_size());
  const auto methods = available_methods(c);
  if (methods.empty()) throw Error(ErrorCode::kIo, "no reconstruction results to score");
  std::vector<std::map<std::string, json>> summaries;
  for (const auto& m : methods) summaries.push_back(read_summary(c, m));

  std::vector<std::string> lines(c.prompts.size());
  stage.for_each_prompt(c.prompts.size(), [&](std::size_t j) {
    const std::string id = prompt_id(j);
    const KLEstimator<double> est(params, ground_truth(c, j),
                                  read_documents(c.output_dir / held_path(j)));
    for (std::size_t m = 0; m < methods.size(); ++m) {
      const auto it = summaries[m].find(id);
      if (it == summaries[m].end()) continue;
      KLEstimate k;
      if (it->second.contains("tokens")) {
        k = est.estimate(Prompt{it->second.at("tokens").get<Tokens>()});
      } else {
        const auto z = load_soft_prompt(c.output_dir / method_dir(methods[m]) / (id + ".prompt.json"));
        k = est.estimate_soft(z.cast<double>());
      }
      lines[j] += methods[m] + "\t" + id + "\t" + format_number(k.mean) + "\t" +
                  format_number(k.std_error) + "\t" + std::to_string(k.n_docs) + "\n";
    }
  });
  std::string tsv = "method\tprompt_id\tkl\tstderr\tn_docs\n";
  for (const auto& l : lines) tsv += l;
  stage.write("kl.tsv", tsv);
  return stage.finish();
}

StageReport cmd_analyze_winrate(const ExperimentConfig& c) {
  Stage stage(c, "analyze-winrate");
  const auto methods = c.winrate_methods.empty() ? available_methods(c) : c.winrate_methods;
  std::map<std::string, MethodScores> scores;
  for (const auto& m : methods) {
    for (const auto& [id, row] : read_summary(c, m)) {
      if (row.at("best_kl").is_null()) {
        throw Error(ErrorCode::kArgument, "method '" + m + "' has no KL for " + id);
      }
      scores[m][id] = row.at("best_kl").at("mean").get<double>();
    }
  }
  stage.write("analysis/winrate.tsv", win_rate_tsv(win_rate_table(scores)));
  return stage.finish();
}

namespace {

std::vector<Prompt> method_prompts(const ExperimentConfig& c, const std::string& method) {
  std::vector<Prompt> out(c.prompts.size());
  if (method == "ground_truth") {
    for (std::size_t j = 0; j < c.prompts.size(); ++j) out[j] = ground_truth(c, j);
    return out;
  }
  const auto summary = read_summary(c, method);
  for (std::size_t j = 0; j < c.prompts.size(); ++j) {
    const auto it = summary.find(prompt_id(j));
    if (it == summary.end() || !it->second.contains("tokens")) {
      throw Error(ErrorCode::kArgument,
                  "method '" + method + "' has no hard prompt for " + prompt_id(j));
    }
    out[j].tokens = it->second.at("tokens").get<Tokens>();
  }
  return out;
}

}  // namespace

StageReport cmd_analyze_shuffle(const ExperimentConfig& c) {
  Stage stage(c, "analyze-shuffle");
  const auto params = load_model(c, c.active_size());
  const auto candidates = method_prompts(c, c.shuffle_method);
  std::vector<PromptPair> pairs;
  for (std::size_t j = 0; j < c.prompts.size(); ++j) pairs.push_back({ground_truth(c, j), candidates[j]});
  const auto result = token_order_sensitivity(params, pairs, c.shuffle);
  stage.write("analysis/shuffle.tsv", sensitivity_tsv(result));
  json summary = sensitivity_summary(result);
  summary["method"] = c.shuffle_method;
  stage.write("analysis/shuffle_summary.json", summary.dump(2) + "\n");
  return stage.finish();
}

StageReport cmd_analyze_position(const ExperimentConfig& c) {
  Stage stage(c, "analyze-position");
  const auto params = load_model(c, c.active_size());
  const auto prompts = method_prompts(c, c.position_source);
  std::vector<std::vector<KLEstimate>> curves(prompts.size());
  stage.for_each_prompt(prompts.size(), [&](std::size_t j) {
    curves[j] = positional_importance(params, prompts[j], kUnk, c.position_docs,
                                      derive_seed(c.seed, {kPositionSeed, j}), c.sampling);
  });
  std::vector<std::vector<KLEstimate>> done;
  for (auto& curve : curves) {
    if (!curve.empty()) done.push_back(curve);
  }
  stage.write("analysis/position.tsv", positional_tsv(done));
  stage.write("analysis/position_bins.tsv",
              position_bins_tsv(bin_positional_curves(done, c.position_bins)));
  return stage.finish();
}

StageReport cmd_analyze_transfer(const ExperimentConfig& c) {
  Stage stage(c, "analyze-transfer");
  std::vector<ModelParameters<double>> models;
  for (const auto& size : c.sizes) models.push_back(load_model(c, size));
  const std::size_t n_prompts = c.transfer_prompts > 0
                                    ? std::min<std::size_t>(c.transfer_prompts, c.prompts.size())
                                    : c.prompts.size();
  std::vector<Prompt> truth;
  for (std::size_t j = 0; j < n_prompts; ++j) truth.push_back(ground_truth(c, j));

  // Reconstruct every prompt on every size from documents of that size.
  const std::size_t S = c.sizes.size();
  std::vector<std::vector<Prompt>> optimized(S, std::vector<Prompt>(n_prompts));
  std::vector<std::string> rows(S * n_prompts);
  stage.for_each_prompt(S * n_prompts, [&](std::size_t idx) {
    const std::size_t s = idx / n_prompts, j = idx % n_prompts;
    const auto& label = c.sizes[s].label;
    const auto docs = sample_documents(models[s], truth[j], c.n_docs, c.sampling,
                                       derive_seed(c.seed, {kTransferDocsSeed, name_key(label), j}));
    const int vocab = c.sizes[s].config.vocab_size;
    GCGConfig cfg = c.hard.gcg;
    cfg.seed = derive_seed(c.seed, {kHardSeed, name_key(c.hard.name), name_key(label), j});
    const Prompt init = hard_init(c, c.hard, truth[j], j, vocab, nullptr, name_key(label));
    const auto r = reconstruct_hard(models[s], docs, init, cfg);
    optimized[s][j] = r.prompt;
    rows[idx] = label + "\t" + prompt_id(j) + "\t" + quoted(detokenize(r.prompt.tokens)) + "\t" +
                dump(json(r.prompt.tokens)) + "\t" + format_number(r.trace.best_loss()) + "\n";
  });
  if (!stage.finish().failures.empty()) return stage.finish();

  std::vector<SuiteMember<double>> suite;
  for (std::size_t s = 0; s < S; ++s) suite.push_back({c.sizes[s].label, &models[s]});
  const TransferMatrix m = transfer_matrix(suite, truth, optimized, c.transfer);
  std::string prompts_tsv = "source\tprompt_id\ttext\ttokens\tbest_loss\n";
  for (const auto& r : rows) prompts_tsv += r;
  stage.write("analysis/transfer_prompts.tsv", prompts_tsv);
  stage.write("analysis/transfer.tsv", transfer_tsv(m));

  // Prompts optimized on the largest model should suit it at least as well
  // as prompts carried over from the smallest one.
  const MeanComparison cmp = compare_means(m.kl[S - 1][S - 1], m.kl[0][S - 1]);
  json summary = {{"sizes", m.labels},
                  {"prompts", n_prompts},
                  {"largest_self_kl", m.kl[S - 1][S - 1]},
                  {"smallest_to_largest_kl", m.kl[0][S - 1]},
                  {"destination_normalized_ratio",
                   m.kl[0][S - 1].mean / m.kl[S - 1][S - 1].mean},
                  {"difference", cmp.difference},
                  {"difference_stderr", cmp.std_error},
                  {"z", cmp.z},
                  {"largest_at_least_as_good", cmp.holds}};
  stage.write("analysis/transfer_summary.json", dump(summary) + "\n");
  return stage.finish();
}

const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> kNames = {
      "train",          "generate",        "reconstruct-soft", "reconstruct-hard", "kl",
      "analyze-winrate", "analyze-shuffle", "analyze-position", "analyze-transfer"};
  return kNames;
}

StageReport run_stage(const std::string& stage, const ExperimentConfig& c) {
  StageReport report;
  try {
    if (stage == "train") report = cmd_train(c);
    else if (stage == "generate") report = cmd_generate(c);
    else if (stage == "reconstruct-soft") report = cmd_reconstruct_soft(c);
    else if (stage == "reconstruct-hard") report = cmd_reconstruct_hard(c);
    else if (stage == "kl") report = cmd_kl(c);
    else if (stage == "analyze-winrate") report = cmd_analyze_winrate(c);
    else if (stage == "analyze-shuffle") report = cmd_analyze_shuffle(c);
    else if (stage == "analyze-position") report = cmd_analyze_position(c);
    else if (stage == "analyze-transfer") report = cmd_analyze_transfer(c);
    else throw Error(ErrorCode::kConfig, "unknown stage '" + stage + "'");
  } catch (const Error& e) {
    report.stage = stage;
    report.failures.push_back({"stage", e.code(), e.what()});
  } catch (const nlohmann::json::exception& e) {
    report.stage = stage;
    report.failures.push_back({"stage", ErrorCode::kIo, e.what()});
  }
  record_stage(c, report);
  return report;
}

void record_stage(const ExperimentConfig& c, const StageReport& report) {
  const fs::path file = c.output_dir / "manifest.json";
  json manifest;
  if (fs::exists(file)) {
    manifest = json::parse(read_text(file), nullptr, false);
    if (manifest.is_discarded() || !manifest.is_object()) manifest = json();
  }
  if (manifest.is_null()) manifest = {{"format", "reprompt-manifest"}, {"stages", json::object()}};
  manifest["format_version"] = kManifestVersion;
  manifest["artifact_versions"] = {{"checkpoint_format", kCheckpointFormatVersion},
                                   {"manifest_format", kManifestVersion}};
  manifest["config_sha256"] = config_hash(c);
  manifest["config"] = c.resolved;

  json outputs = json::array();
  for (const auto& rel : report.outputs) {
    const fs::path p = c.output_dir / rel;
    outputs.push_back({{"path", rel.generic_string()},
                       {"bytes", fs::file_size(p)},
                       {"sha256", sha256_file(p)}});
  }
  json failures = json::array();
  for (const auto& f : report.failures) {
    failures.push_back({{"item", f.item}, {"code", to_string(f.code)}, {"message", f.message}});
  }
  manifest["stages"][report.stage] = {{"config_sha256", config_hash(c)},
                                      {"outputs", outputs},
                                      {"failures", failures},
                                      {"wall_clock_s", report.wall_clock_s}};
  write_text(file, dump(manifest.is_object() ? manifest : json::object()) + "\n");
}

}  // namespace reprompt::harness
