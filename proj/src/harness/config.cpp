#include <fstream>
#include <sstream>

#include "reprompt/checkpoint.hpp"
#include "reprompt/harness.hpp"

namespace reprompt::harness {

using nlohmann::json;

json default_config_json() {
  return json::parse(R"({
    "seed": 0,
    "output_dir": "reprompt-out",
    "corpus": {"path": "", "synthetic_lines": 2000},
    "suite": {
      "template": {"vocab_size": 260, "max_seq_len": 48, "ln_eps": 1e-5, "init_std": 0.02},
      "sizes": [
        {"label": "small", "d_model": 16, "n_layers": 1, "n_heads": 2, "d_ff": 64},
        {"label": "medium", "d_model": 24, "n_layers": 2, "n_heads": 2, "d_ff": 96},
        {"label": "large", "d_model": 32, "n_layers": 3, "n_heads": 4, "d_ff": 128}
      ],
      "train": {"steps": 1500, "batch_size": 16, "learning_rate": 3e-3, "beta1": 0.9,
                "beta2": 0.999, "adam_eps": 1e-8, "grad_clip": 1.0, "bos_rate": 0.5}
    },
    "model": "",
    "prompts": ["the dog chased", "my cat slept on", "a robot welded", "the chef baked",
                "our team won", "the king ruled", "a bird sang", "the ship sailed",
                "the dog licked", "a robot sorted"],
    "generation": {"n_docs": 50, "held_out": 100, "max_len": 16, "temperature": 1.0,
                   "stop_at_eos": true},
    "soft": {"name": "soft", "step_size": 0.5, "epochs": 200, "eval_every": 10,
             "adaptive": false, "length": 0},
    "hard": {"name": "gcg", "init": "random", "corrupt_fraction": 0.3, "warm_starts": [],
             "mask": "none", "epochs": 40, "top_k": 16, "batch": 24, "fluency_weight": 0.0,
             "fluency_sign": "penalize_nll", "include_incumbent": true, "eval_every": 10},
    "analysis": {
      "winrate": {"methods": []},
      "shuffle": {"method": "gcg", "trials": 10, "docs_per_trial": 20, "alpha": 0.05},
      "position": {"source": "ground_truth", "docs": 50, "bins": 5},
      "transfer": {"docs": 50, "prompts": 5}
    }
  })");
}

namespace {

[[noreturn]] void config_error(const std::string& what) { throw Error(ErrorCode::kConfig, what); }

const std::vector<std::string> kSizeKeys = {"label",   "vocab_size", "d_model",  "n_layers",
                                            "n_heads", "d_ff",       "max_seq_len", "ln_eps",
                                            "init_std"};

void check_keys(const json& given, const json& known, const std::string& path) {
  if (!given.is_object() || !known.is_object()) return;
  for (const auto& [key, value] : given.items()) {
    const std::string here = path.empty() ? key : path + "." + key;
    if (!known.contains(key)) config_error("unknown config key '" + here + "'");
    if (here == "suite.sizes") {
      if (!value.is_array() || value.empty()) config_error("suite.sizes must be a non-empty list");
      for (const auto& size : value) {
        if (!size.is_object()) config_error("suite.sizes entries must be objects");
        for (const auto& [k, v] : size.items()) {
          if (std::find(kSizeKeys.begin(), kSizeKeys.end(), k) == kSizeKeys.end()) {
            config_error("unknown config key 'suite.sizes[]." + k + "'");
          }
        }
      }
      continue;
    }
    check_keys(value, known.at(key), here);
  }
}

json parse_value(const std::string& text) {
  json v = json::parse(text, nullptr, false);
  return v.is_discarded() ? json(text) : v;
}

void apply_override(json& root, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    config_error("override '" + assignment + "' is not key=value");
  }
  const std::string key = assignment.substr(0, eq);
  json* node = &root;
  std::stringstream parts(key);
  std::string part;
  std::vector<std::string> path;
  while (std::getline(parts, part, '.')) path.push_back(part);
  for (std::size_t i = 0; i < path.size(); ++i) {
    const std::string& p = path[i];
    json* next = nullptr;
    if (node->is_array()) {
      std::size_t idx = 0;
      try {
        idx = std::stoul(p);
      } catch (const std::exception&) {
        config_error("'" + key + "': '" + p + "' is not a list index");
      }
      if (idx >= node->size()) config_error("'" + key + "': index " + p + " out of range");
      next = &(*node)[idx];
    } else if (node->is_object()) {
      next = &(*node)[p];
    } else {
      config_error("'" + key + "' descends into a non-object value");
    }
    node = next;
  }
  *node = parse_value(assignment.substr(eq + 1));
}

HardInit parse_init(const std::string& s) {
  if (s == "random") return HardInit::kRandom;
  if (s == "repeat") return HardInit::kRepeat;
  if (s == "corrupt") return HardInit::kCorrupt;
  if (s == "text") return HardInit::kText;
  config_error("hard.init must be random, repeat, corrupt or text (got '" + s + "')");
}

}  // namespace

const SizeSpec& ExperimentConfig::active_size() const {
  if (model.empty()) return sizes.back();
  for (const auto& s : sizes) {
    if (s.label == model) return s;
  }
  config_error("model '" + model + "' is not a suite size");
}

ExperimentConfig parse_config(const json& j) {
  check_keys(j, default_config_json(), "");
  ExperimentConfig c;
  try {
    c.resolved = j;
    c.seed = j.at("seed").get<std::uint64_t>();
    c.output_dir = j.at("output_dir").get<std::string>();
    c.corpus_path = j.at("corpus").at("path").get<std::string>();
    c.synthetic_lines = j.at("corpus").at("synthetic_lines").get<int>();

    const json& suite = j.at("suite");
    for (const auto& s : suite.at("sizes")) {
      json merged = suite.at("template");
      merged.update(s);
      SizeSpec size;
      size.label = merged.value("label", std::string());
      if (size.label.empty()) config_error("every suite size needs a label");
      size.config = config_from_json(merged);
      size.config.seed = derive_seed(c.seed, {2});  // same init stream for every size
      size.config.validate();
      for (const auto& other : c.sizes) {
        if (other.label == size.label) config_error("duplicate size label '" + size.label + "'");
      }
      c.sizes.push_back(size);
    }
    const json& tr = suite.at("train");
    c.train.steps = tr.at("steps").get<int>();
    c.train.batch_size = tr.at("batch_size").get<int>();
    c.train.learning_rate = tr.at("learning_rate").get<double>();
    c.train.beta1 = tr.at("beta1").get<double>();
    c.train.beta2 = tr.at("beta2").get<double>();
    c.train.adam_eps = tr.at("adam_eps").get<double>();
    c.train.grad_clip = tr.at("grad_clip").get<double>();
    c.train.bos_rate = tr.at("bos_rate").get<double>();
    c.train.data_seed = derive_seed(c.seed, {1});
    c.model = j.at("model").get<std::string>();
    c.active_size();

    c.prompts = j.at("prompts").get<std::vector<std::string>>();
    for (const auto& p : c.prompts) {
      if (p.empty()) config_error("ground-truth prompts must be non-empty");
    }
    const json& gen = j.at("generation");
    c.n_docs = gen.at("n_docs").get<int>();
    c.held_out = gen.at("held_out").get<int>();
    c.sampling.max_len = gen.at("max_len").get<int>();
    c.sampling.temperature = gen.at("temperature").get<double>();
    c.sampling.stop_at_eos = gen.at("stop_at_eos").get<bool>();
    if (c.n_docs < 1 || c.held_out < 1) config_error("document counts must be >= 1");
    if (c.sampling.max_len < 1 || !(c.sampling.temperature >= 0)) {
      config_error("generation.max_len must be >= 1 and temperature >= 0");
    }

    const json& soft = j.at("soft");
    c.soft_name = soft.at("name").get<std::string>();
    c.soft.step_size = soft.at("step_size").get<double>();
    c.soft.epochs = soft.at("epochs").get<int>();
    c.soft.eval_every = soft.at("eval_every").get<int>();
    c.soft.adaptive = soft.at("adaptive").get<bool>();
    c.soft_length = soft.at("length").get<int>();
    try {
      c.soft.validate();
    } catch (const Error& e) {
      config_error(std::string("soft: ") + e.what());
    }

    const json& hard = j.at("hard");
    c.hard.name = hard.at("name").get<std::string>();
    c.hard.init = parse_init(hard.at("init").get<std::string>());
    c.hard.corrupt_fraction = hard.at("corrupt_fraction").get<double>();
    c.hard.warm_starts = hard.at("warm_starts").get<std::vector<std::string>>();
    const std::string mask = hard.at("mask").get<std::string>();
    if (mask != "none" && mask != "corpus") config_error("hard.mask must be none or corpus");
    c.hard.mask_from_corpus = mask == "corpus";
    c.hard.gcg.epochs = hard.at("epochs").get<int>();
    c.hard.gcg.top_k = hard.at("top_k").get<int>();
    c.hard.gcg.batch = hard.at("batch").get<int>();
    c.hard.gcg.loss.fluency_weight = hard.at("fluency_weight").get<double>();
    const std::string sign = hard.at("fluency_sign").get<std::string>();
    if (sign == "penalize_nll") {
      c.hard.gcg.loss.fluency_sign = FluencySign::kPenalizeNll;
    } else if (sign == "literal") {
      c.hard.gcg.loss.fluency_sign = FluencySign::kLiteral;
    } else {
      config_error("hard.fluency_sign must be penalize_nll or literal");
    }
    if (c.hard.gcg.loss.fluency_weight < 0) config_error("hard.fluency_weight must be >= 0");
    c.hard.gcg.include_incumbent = hard.at("include_incumbent").get<bool>();
    c.hard.gcg.eval_every = hard.at("eval_every").get<int>();
    if (c.hard.name.empty() || c.soft_name.empty() || c.hard.name == c.soft_name) {
      config_error("soft.name and hard.name must be distinct and non-empty");
    }
    if (c.hard.init == HardInit::kText && c.hard.warm_starts.size() != c.prompts.size()) {
      config_error("hard.warm_starts needs one entry per prompt");
    }
    try {
      c.hard.gcg.validate(c.active_size().config.vocab_size);
    } catch (const Error& e) {
      config_error(std::string("hard: ") + e.what());
    }

    const json& an = j.at("analysis");
    c.winrate_methods = an.at("winrate").at("methods").get<std::vector<std::string>>();
    const json& sh = an.at("shuffle");
    c.shuffle_method = sh.at("method").get<std::string>();
    c.shuffle.trials = sh.at("trials").get<int>();
    c.shuffle.docs_per_trial = sh.at("docs_per_trial").get<int>();
    c.shuffle.alpha = sh.at("alpha").get<double>();
    c.shuffle.seed = derive_seed(c.seed, {7});
    c.shuffle.sampling = c.sampling;
    try {
      c.shuffle.validate();
    } catch (const Error& e) {
      config_error(std::string("analysis.shuffle: ") + e.what());
    }
    const json& pos = an.at("position");
    c.position_source = pos.at("source").get<std::string>();
    c.position_docs = pos.at("docs").get<int>();
    c.position_bins = pos.at("bins").get<int>();
    if (c.position_docs < 1 || c.position_bins < 1) {
      config_error("analysis.position docs and bins must be >= 1");
    }
    const json& tf = an.at("transfer");
    c.transfer.docs_per_estimate = tf.at("docs").get<int>();
    c.transfer.seed = derive_seed(c.seed, {9});
    c.transfer.sampling = c.sampling;
    c.transfer_prompts = tf.at("prompts").get<int>();
    if (c.transfer.docs_per_estimate < 1 || c.transfer_prompts < 0) {
      config_error("analysis.transfer docs must be >= 1 and prompts >= 0");
    }
  } catch (const json::exception& e) {
    config_error(std::string("malformed config: ") + e.what());
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kConfig) throw;
    config_error(e.what());
  }
  if (!c.corpus_path.empty() && !std::filesystem::exists(c.corpus_path)) {
    config_error("corpus path '" + c.corpus_path.string() + "' does not exist");
  }
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& file,
                             const std::vector<std::string>& overrides) {
  json j = default_config_json();
  if (!file.empty()) {
    std::ifstream in(file);
    if (!in) config_error("cannot read config file '" + file.string() + "'");
    json given = json::parse(in, nullptr, false);
    if (given.is_discarded() || !given.is_object()) {
      config_error("config file '" + file.string() + "' is not a JSON object");
    }
    check_keys(given, j, "");
    j.merge_patch(given);
  }
  for (const auto& o : overrides) apply_override(j, o);
  return parse_config(j);
}

std::string config_hash(const ExperimentConfig& config) {
  const std::string canonical = config.resolved.dump();
  return sha256_hex(canonical.data(), canonical.size());
}

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::kConfig:
    case ErrorCode::kArgument:
      return 1;
    case ErrorCode::kNumeric:
      return 3;
    default:
      return 2;
  }
}

int exit_code_for(const StageReport& report) {
  int worst = 0;
  for (const auto& f : report.failures) worst = std::max(worst, exit_code_for(f.code));
  return worst;
}

}  // namespace reprompt::harness
