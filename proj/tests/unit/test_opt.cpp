#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "reprompt/checkpoint.hpp"
#include "reprompt/error.hpp"
#include "reprompt/gcg.hpp"
#include "reprompt/sampling.hpp"
#include "reprompt/soft_prompt.hpp"
#include "test_util.hpp"

namespace reprompt {
namespace {

using testing::random_params;
using testing::random_tokens;
using testing::tiny_config;

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an Error";
  return ErrorCode::kArgument;
}

// Micro instance: V = 8, k_p = 2, documents of length 2.
struct Micro {
  ModelParameters<double> params;
  Prompt truth;
  DocumentSet docs;
};

Micro micro_instance(std::uint64_t seed) {
  Micro m{random_params<double>(tiny_config(8, 8, 1, 2, 8), seed, 0.8), {}, {}};
  Rng rng(seed + 100);
  m.truth.tokens = random_tokens(rng, 2, 8);
  m.docs = sample_documents(m.params, m.truth, 6, SamplingConfig{2, 1.0, false}, seed);
  return m;
}

// ---- soft prompts ----

TEST(InitSoft, RowsComeFromEmbeddingAndAreSeeded) {
  const auto params = random_params<double>(tiny_config(), 1);
  const auto z = init_soft(params, 5, 9);
  ASSERT_EQ(z.rows(), 5);
  for (int i = 0; i < 5; ++i) {
    bool found = false;
    for (int v = 0; v < params.config.vocab_size && !found; ++v) {
      found = z.row(i) == params.token_embedding.row(v);
    }
    EXPECT_TRUE(found) << "row " << i;
  }
  EXPECT_EQ(z, init_soft(params, 5, 9));
  EXPECT_NE(z, init_soft(params, 5, 10));
  EXPECT_EQ(code_of([&] { init_soft(params, 0, 1); }), ErrorCode::kArgument);
}

TEST(InitSoft, IdenticalEmbeddingRowsGiveIdenticalPrompt) {
  auto params = random_params<double>(tiny_config(), 2);
  for (int v = 1; v < params.config.vocab_size; ++v) {
    params.token_embedding.row(v) = params.token_embedding.row(0);
  }
  const auto z = init_soft(params, 4, 3);
  for (int i = 1; i < 4; ++i) EXPECT_EQ(z.row(i), z.row(0));
}

TEST(ReconstructSoft, ZeroEpochsReturnsInit) {
  const auto params = random_params<double>(tiny_config(), 3);
  const DocumentSet docs{{{10, 11, 12}}};
  GDConfig cfg;
  cfg.epochs = 0;
  cfg.seed = 4;
  const auto r = reconstruct_soft(params, docs, 3, cfg);
  EXPECT_EQ(r.prompt, init_soft(params, 3, 4));
  EXPECT_EQ(r.last, r.prompt);
  ASSERT_EQ(r.trace.records.size(), 1u);
  EXPECT_EQ(r.trace.records[0].loss, soft_loss(params, r.prompt, docs));
}

TEST(ReconstructSoft, SmallStepsDecreaseLossMonotonically) {
  // One layer, one prompt row, d = 2.
  const auto params = random_params<double>(tiny_config(12, 2, 1, 1, 8), 5, 0.7);
  const auto docs = sample_documents(params, Prompt{{6}}, 8, SamplingConfig{4, 1.0, false}, 6);
  GDConfig cfg;
  cfg.epochs = 50;
  cfg.seed = 7;
  bool monotone = false;
  for (int halving = 0; halving < 30 && !monotone; ++halving) {
    cfg.step_size = 1.0 / std::pow(2.0, halving);
    const auto losses = reconstruct_soft(params, docs, 1, cfg).trace.losses();
    monotone = true;
    for (std::size_t t = 1; t < losses.size(); ++t) monotone &= losses[t] < losses[t - 1];
  }
  EXPECT_TRUE(monotone);
}

TEST(ReconstructSoft, StartAtBruteForcedHardOptimum) {
  const Micro m = micro_instance(8);
  Prompt best;
  double best_loss = std::numeric_limits<double>::infinity();
  for (TokenId a = 0; a < 8; ++a) {
    for (TokenId b = 0; b < 8; ++b) {
      const double l = hard_loss(m.params, Prompt{{a, b}}, m.docs);
      if (l < best_loss) best_loss = l, best = Prompt{{a, b}};
    }
  }
  GDConfig cfg;
  cfg.epochs = 1;
  cfg.step_size = 1e-4;
  const auto r = reconstruct_soft(m.params, m.docs, 2, cfg, std::nullopt,
                                  std::optional(embed(m.params, std::span<const TokenId>(best.tokens))));
  EXPECT_EQ(r.trace.records[0].loss, best_loss);
  EXPECT_LE(r.trace.records[1].loss, best_loss + 1e-6);
}

TEST(ReconstructSoft, KlCadenceAndBestIndices) {
  const auto params = random_params<double>(tiny_config(), 9);
  const Prompt truth{{40, 41, 42}};
  const auto docs = sample_documents(params, truth, 8, SamplingConfig{6, 1.0, true}, 10);
  const auto held = sample_documents(params, truth, 8, SamplingConfig{6, 1.0, true}, 11);
  GDConfig cfg;
  cfg.epochs = 25;
  cfg.step_size = 0.05;
  const auto r = reconstruct_soft(params, docs, 3, cfg, GroundTruth{truth, held});
  ASSERT_EQ(r.trace.records.size(), 26u);
  std::vector<int> evaluated;
  double best_kl = std::numeric_limits<double>::infinity();
  for (const auto& rec : r.trace.records) {
    if (rec.kl) {
      evaluated.push_back(rec.epoch);
      best_kl = std::min(best_kl, rec.kl->mean);
    }
  }
  EXPECT_EQ(evaluated, (std::vector<int>{0, 10, 20, 25}));
  EXPECT_EQ(r.trace.best_kl()->mean, best_kl);
  const auto losses = r.trace.losses();
  EXPECT_EQ(r.trace.best_loss(), *std::min_element(losses.begin(), losses.end()));
  EXPECT_EQ(soft_loss(params, r.prompt, docs), r.trace.best_loss());
}

TEST(ReconstructSoft, BitIdenticalReruns) {
  const auto params = random_params<double>(tiny_config(), 12);
  const auto docs = sample_documents(params, Prompt{{50, 51}}, 6, SamplingConfig{5, 1.0, true}, 13);
  GDConfig cfg;
  cfg.epochs = 15;
  cfg.seed = 14;
  const auto a = reconstruct_soft(params, docs, 2, cfg);
  const auto b = reconstruct_soft(params, docs, 2, cfg);
  EXPECT_EQ(a.prompt, b.prompt);
  EXPECT_EQ(a.trace.losses(), b.trace.losses());
  EXPECT_EQ(trace_jsonl(a.trace), trace_jsonl(b.trace));
}

TEST(ReconstructSoft, DivergenceKeepsLastFiniteState) {
  const auto params = random_params<double>(tiny_config(), 15, 1.0);
  const DocumentSet docs{{{10, 11, 12}}};
  GDConfig cfg;
  cfg.epochs = 5;
  cfg.step_size = 1e308;
  const auto r = reconstruct_soft(params, docs, 2, cfg);
  EXPECT_TRUE(r.trace.diverged);
  EXPECT_FALSE(r.trace.diagnostic.empty());
  EXPECT_TRUE(r.last.allFinite());
  EXPECT_EQ(r.trace.records.size(), 1u);
}

TEST(ReconstructSoft, RejectsBadConfig) {
  const auto params = random_params<double>(tiny_config(), 16);
  const DocumentSet docs{{{10}}};
  GDConfig cfg;
  cfg.step_size = 0;
  EXPECT_EQ(code_of([&] { reconstruct_soft(params, docs, 2, cfg); }), ErrorCode::kConfig);
  EXPECT_EQ(code_of([&] { reconstruct_soft(params, DocumentSet{}, 2, GDConfig{}); }),
            ErrorCode::kArgument);
}

TEST(SoftPromptFile, RoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "reprompt_soft_test";
  const auto params = random_params<float>(tiny_config(), 17);
  const auto z = init_soft(params, 3, 18);
  save_soft_prompt(dir / "soft.json", z, {{"k_p", 3}});
  EXPECT_EQ(load_soft_prompt(dir / "soft.json"), z);
  save_checkpoint(params, dir / "model.json");
  EXPECT_EQ(code_of([&] { load_soft_prompt(dir / "model.json"); }), ErrorCode::kVersion);
  std::filesystem::remove_all(dir);
}

// ---- vocabulary masks ----

TEST(VocabMask, MarksOnlyCorpusTokens) {
  const auto mask = build_vocab_mask({Document{tokenize("ab")}}, kByteVocabSize, "ab");
  EXPECT_EQ(mask.count(), 2);
  EXPECT_TRUE(mask.permits(Vocabulary::from_byte('a')));
  EXPECT_TRUE(mask.permits(Vocabulary::from_byte('b')));
  EXPECT_FALSE(mask.permits(Vocabulary::from_byte('c')));
  EXPECT_EQ(mask.provenance, "ab");
}

TEST(VocabMask, FullCoverageExcludesSpecials) {
  Document all;
  for (int b = 0; b < 256; ++b) all.tokens.push_back(Vocabulary::from_byte(b));
  all.tokens.push_back(kEos);
  const auto mask = build_vocab_mask({all}, kByteVocabSize);
  EXPECT_EQ(mask.count(), 256);
  for (TokenId s = 0; s < kNumSpecial; ++s) EXPECT_FALSE(mask.permits(s));
}

TEST(VocabMask, Errors) {
  EXPECT_EQ(code_of([] { build_vocab_mask({}, 10); }), ErrorCode::kArgument);
  EXPECT_EQ(code_of([] { build_vocab_mask({Document{{kEos, kBos}}}, 10); }), ErrorCode::kMask);
}

// ---- GCG ----

TEST(GcgStep, ExhaustiveSingleTokenFindsGlobalBest) {
  const Micro m = micro_instance(20);
  GCGConfig cfg;
  cfg.top_k = 8;
  cfg.batch = 8;
  const DocumentSet docs = m.docs;
  double best = std::numeric_limits<double>::infinity();
  TokenId arg = -1;
  for (TokenId v = 0; v < 8; ++v) {
    const double l = hard_loss(m.params, Prompt{{v}}, docs);
    if (l < best) best = l, arg = v;
  }
  for (TokenId start = 0; start < 8; ++start) {
    const StepResult r = gcg_step(m.params, Prompt{{start}}, docs, cfg, 1);
    EXPECT_EQ(r.prompt, Prompt{{arg}});
    EXPECT_EQ(r.loss, best);
  }
}

TEST(GcgStep, NeverWorseThanIncumbent) {
  const auto params = random_params<double>(tiny_config(), 21);
  Rng rng(22);
  GCGConfig cfg;
  cfg.top_k = 4;
  cfg.batch = 5;
  for (int trial = 0; trial < 6; ++trial) {
    const Prompt p{random_tokens(rng, 4, kByteVocabSize)};
    const auto docs = sample_documents(params, Prompt{{60, 61}}, 4, SamplingConfig{5, 1.0, true}, trial);
    const StepResult r = gcg_step(params, p, docs, cfg, trial);
    EXPECT_LE(r.loss, hard_loss(params, p, docs));
    EXPECT_EQ(r.loss, hard_loss(params, r.prompt, docs));
  }
}

TEST(GcgStep, FixpointIsCoordinateLocalOptimum) {
  for (std::uint64_t seed = 30; seed < 33; ++seed) {
    const Micro m = micro_instance(seed);
    GCGConfig cfg;
    cfg.top_k = 8;
    cfg.batch = 16;
    Prompt p{{4, 4}};
    double loss = hard_loss(m.params, p, m.docs);
    for (int it = 0; it < 100; ++it) {
      const StepResult r = gcg_step(m.params, p, m.docs, cfg, it);
      if (!(r.loss < loss)) break;
      p = r.prompt;
      loss = r.loss;
    }
    for (std::size_t i = 0; i < 2; ++i) {
      for (TokenId v = 0; v < 8; ++v) {
        Prompt q = p;
        q.tokens[i] = v;
        EXPECT_GE(hard_loss(m.params, q, m.docs), loss) << "seed " << seed;
      }
    }
  }
}

TEST(GcgStep, MaskIsRespectedAndEmptyPoolsAreErrors) {
  const auto params = random_params<double>(tiny_config(), 23);
  const auto docs = sample_documents(params, Prompt{{70}}, 3, SamplingConfig{4, 1.0, true}, 24);
  GCGConfig cfg;
  cfg.top_k = 3;
  cfg.batch = 4;
  cfg.mask = build_vocab_mask({Document{tokenize("xyz")}}, kByteVocabSize);
  Prompt p = make_prompt("xxxx");
  for (int it = 0; it < 5; ++it) {
    p = gcg_step(params, p, docs, cfg, it).prompt;
    for (TokenId t : p.tokens) EXPECT_TRUE(cfg.mask->permits(t));
  }
  cfg.mask = build_vocab_mask({Document{tokenize("q")}}, kByteVocabSize);
  EXPECT_EQ(code_of([&] { gcg_step(params, make_prompt("qq"), docs, cfg, 0); }), ErrorCode::kMask);
  // A position that already holds a disallowed token still has candidates.
  EXPECT_EQ(gcg_step(params, make_prompt("aq"), docs, cfg, 0).prompt, make_prompt("qq"));
}

TEST(GcgStep, ConfigValidation) {
  const auto params = random_params<double>(tiny_config(), 25);
  const DocumentSet docs{{{10}}};
  GCGConfig cfg;
  cfg.top_k = 0;
  EXPECT_EQ(code_of([&] { gcg_step(params, Prompt{{5}}, docs, cfg, 0); }), ErrorCode::kConfig);
  cfg.top_k = kByteVocabSize + 1;
  EXPECT_EQ(code_of([&] { gcg_step(params, Prompt{{5}}, docs, cfg, 0); }), ErrorCode::kConfig);
  cfg.top_k = 4;
  cfg.batch = 0;
  EXPECT_EQ(code_of([&] { gcg_step(params, Prompt{{5}}, docs, cfg, 0); }), ErrorCode::kConfig);
}

TEST(ReconstructHard, ZeroEpochsReturnsInit) {
  const auto params = random_params<double>(tiny_config(), 26);
  const DocumentSet docs{{{10, 11}}};
  GCGConfig cfg;
  cfg.epochs = 0;
  const auto r = reconstruct_hard(params, docs, Prompt{{4, 4, 4}}, cfg);
  EXPECT_EQ(r.prompt, (Prompt{{4, 4, 4}}));
  EXPECT_EQ(r.trace.records.size(), 1u);
}

TEST(ReconstructHard, WarmStartAtTruthNeverGetsWorse) {
  const auto params = random_params<double>(tiny_config(), 27);
  const Prompt truth = make_prompt("cat");
  const auto docs = sample_documents(params, truth, 6, SamplingConfig{6, 1.0, true}, 28);
  GCGConfig cfg;
  cfg.epochs = 6;
  cfg.top_k = 8;
  cfg.batch = 8;
  const auto r = reconstruct_hard(params, docs, std::string("cat"), cfg);
  const auto losses = r.trace.losses();
  EXPECT_EQ(losses[0], hard_loss(params, truth, docs));
  for (std::size_t t = 1; t < losses.size(); ++t) EXPECT_LE(losses[t], losses[t - 1]);
  EXPECT_LE(r.trace.best_loss(), losses[0]);
  EXPECT_EQ(hard_loss(params, r.prompt, docs), r.trace.best_loss());
  EXPECT_EQ(code_of([&] { reconstruct_hard(params, docs, std::string(), cfg); }),
            ErrorCode::kArgument);
}

TEST(ReconstructHard, SeededAndTraced) {
  const auto params = random_params<double>(tiny_config(), 29);
  const Prompt truth = make_prompt("dog");
  const auto docs = sample_documents(params, truth, 4, SamplingConfig{6, 1.0, true}, 30);
  const auto held = sample_documents(params, truth, 4, SamplingConfig{6, 1.0, true}, 31);
  GCGConfig cfg;
  cfg.epochs = 5;
  cfg.top_k = 6;
  cfg.batch = 4;
  cfg.eval_every = 2;
  cfg.seed = 5;
  const Prompt init = random_prompt(3, kByteVocabSize, 32);
  const auto a = reconstruct_hard(params, docs, init, cfg, GroundTruth{truth, held});
  const auto b = reconstruct_hard(params, docs, init, cfg, GroundTruth{truth, held});
  EXPECT_EQ(trace_jsonl(a.trace), trace_jsonl(b.trace));
  EXPECT_EQ(a.prompt, b.prompt);
  int kl_records = 0;
  for (const auto& rec : a.trace.records) kl_records += rec.kl.has_value();
  EXPECT_EQ(kl_records, 4);  // epochs 0, 2, 4, 5
  const auto line = nlohmann::json::parse(trace_jsonl(a.trace).substr(0, trace_jsonl(a.trace).find('\n')));
  EXPECT_EQ(line["epoch"], 0);
  EXPECT_EQ(line["tokens"].get<Tokens>(), init.tokens);
  EXPECT_TRUE(line.contains("kl"));
}

TEST(ReconstructHard, FluencyWeightFavorsLikelyPrompts) {
  const auto params = random_params<double>(tiny_config(kByteVocabSize, 16, 1, 2, 24), 33, 0.5);
  const Prompt truth = make_prompt("bird");
  const auto docs = sample_documents(params, truth, 6, SamplingConfig{6, 1.0, true}, 34);
  std::vector<double> fluency;
  for (double gamma : {0.0, 1.0, 10.0}) {
    GCGConfig cfg;
    cfg.epochs = 15;
    cfg.top_k = 16;
    cfg.batch = 16;
    cfg.loss.fluency_weight = gamma;
    const auto r = reconstruct_hard(params, docs, make_prompt("aaaa"), cfg);
    fluency.push_back(prompt_nll(params, r.prompt));
  }
  const int holds = (fluency[1] <= fluency[0]) + (fluency[2] <= fluency[1]) + (fluency[2] <= fluency[0]);
  EXPECT_GE(holds, 2) << fluency[0] << " " << fluency[1] << " " << fluency[2];
}

TEST(PromptGenerators, CorruptAndRandom) {
  const Prompt p = make_prompt("abcdefghij");
  const Prompt c = corrupt_prompt(p, 0.3, kByteVocabSize, 40);
  int changed = 0;
  for (std::size_t i = 0; i < p.size(); ++i) changed += c.tokens[i] != p.tokens[i];
  EXPECT_EQ(changed, 3);
  EXPECT_EQ(c, corrupt_prompt(p, 0.3, kByteVocabSize, 40));
  EXPECT_EQ(corrupt_prompt(p, 0.0, kByteVocabSize, 40), p);
  const auto mask = build_vocab_mask({Document{tokenize("xy")}}, kByteVocabSize);
  const Prompt r = random_prompt(20, kByteVocabSize, 41, &mask);
  for (TokenId t : r.tokens) EXPECT_TRUE(mask.permits(t));
  for (TokenId t : random_prompt(50, kByteVocabSize, 42).tokens) EXPECT_FALSE(Vocabulary::is_special(t));
}

}  // namespace
}  // namespace reprompt
