#include "reprompt/corpus.hpp"

#include <fstream>

#include <json.hpp>

#include "reprompt/error.hpp"
#include "reprompt/random.hpp"

namespace reprompt {

std::vector<std::string> read_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open corpus " + path.string());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line.front() == '{') {
      auto j = nlohmann::json::parse(line, nullptr, false);
      if (!j.is_discarded() && j.is_object() && j.contains("text") && j["text"].is_string()) {
        out.push_back(j["text"].get<std::string>());
        continue;
      }
    }
    out.push_back(line);
  }
  return out;
}

std::vector<Document> tokenize_corpus(const std::vector<std::string>& lines) {
  std::vector<Document> docs;
  docs.reserve(lines.size());
  for (const auto& l : lines) docs.push_back(Document{tokenize(l)});
  return docs;
}

namespace {

struct Topic {
  std::string subject;
  std::vector<std::string> verbs;
  std::vector<std::string> objects;
  std::vector<std::string> endings;
};

const std::vector<Topic>& topics() {
  static const std::vector<Topic> kTopics = {
      {"the dog", {"chased", "barked at", "licked"}, {"the cat", "a ball", "the mailman"}, {".", " again.", " all day."}},
      {"my cat", {"ignored", "slept on", "scratched"}, {"the sofa", "a box", "my hand"}, {".", " quietly.", " twice."}},
      {"a robot", {"computed", "welded", "sorted"}, {"the data", "steel", "bolts"}, {".", " fast.", " nonstop."}},
      {"the chef", {"baked", "sliced", "tasted"}, {"bread", "onions", "the soup"}, {".", " slowly.", " at noon."}},
      {"our team", {"won", "lost", "played"}, {"the match", "a game", "the final"}, {".", " at home.", " today."}},
      {"the king", {"ruled", "taxed", "feared"}, {"the land", "his people", "dragons"}, {".", " wisely.", " long ago."}},
      {"a bird", {"sang", "built", "found"}, {"a song", "a nest", "seeds"}, {".", " at dawn.", " in spring."}},
      {"the ship", {"sailed", "carried", "sank near"}, {"the coast", "spices", "an island"}, {".", " north.", " at night."}},
  };
  return kTopics;
}

}  // namespace

const std::vector<std::string>& synthetic_subjects() {
  static const std::vector<std::string> kSubjects = [] {
    std::vector<std::string> s;
    for (const auto& t : topics()) s.push_back(t.subject);
    return s;
  }();
  return kSubjects;
}

std::vector<std::string> synthetic_corpus(int n_lines, std::uint64_t seed) {
  Rng rng(seed);
  auto pick = [&](const std::vector<std::string>& v) -> const std::string& {
    return v[uniform_index(rng, v.size())];
  };
  std::vector<std::string> lines;
  lines.reserve(static_cast<std::size_t>(std::max(0, n_lines)));
  for (int i = 0; i < n_lines; ++i) {
    const Topic& t = topics()[uniform_index(rng, topics().size())];
    lines.push_back(t.subject + " " + pick(t.verbs) + " " + pick(t.objects) + pick(t.endings));
  }
  return lines;
}

}  // namespace reprompt
