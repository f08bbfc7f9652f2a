#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "reprompt/vocab.hpp"

namespace reprompt {

/// Reads a UTF-8 corpus: one document per line, or JSON lines carrying a
/// "text" field (detected per line). Blank lines are skipped.
std::vector<std::string> read_corpus(const std::filesystem::path& path);

std::vector<Document> tokenize_corpus(const std::vector<std::string>& lines);

/// Seeded template-grammar English: each subject has its own verbs, objects
/// and endings, so a sentence prefix strongly constrains its continuation.
std::vector<std::string> synthetic_corpus(int n_lines, std::uint64_t seed);

/// Subject phrases used by synthetic_corpus; handy ground-truth prompts.
const std::vector<std::string>& synthetic_subjects();

}  // namespace reprompt
