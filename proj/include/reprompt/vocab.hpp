#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace reprompt {

using TokenId = std::int32_t;
using Tokens = std::vector<TokenId>;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kUnk = 3;
inline constexpr int kNumSpecial = 4;
inline constexpr int kByteVocabSize = kNumSpecial + 256;

/// Byte-level vocabulary: ids 0..3 are PAD, BOS, EOS, UNK and ids 4..259 map
/// to raw bytes 0..255. Smaller vocabularies (used by micro test models) keep
/// the same special ids and simply have fewer byte ids.
struct Vocabulary {
  int size = kByteVocabSize;

  bool contains(TokenId id) const { return id >= 0 && id < size; }
  static bool is_special(TokenId id) { return id >= 0 && id < kNumSpecial; }
  static TokenId from_byte(unsigned char b) { return kNumSpecial + b; }

  /// Stable identifier for the layout, written into checkpoint manifests.
  std::string layout_hash() const;

  bool operator==(const Vocabulary&) const = default;
};

struct Prompt {
  Tokens tokens;
  std::size_t size() const { return tokens.size(); }
  bool operator==(const Prompt&) const = default;
};

struct Document {
  Tokens tokens;
  std::size_t size() const { return tokens.size(); }
  bool operator==(const Document&) const = default;
};

using DocumentSet = std::vector<Document>;

Tokens tokenize(std::string_view text);

/// Inverse of tokenize. Special ids render as bracketed names ("[EOS]"), so
/// this is lossless only on tokenize's image.
std::string detokenize(std::span<const TokenId> tokens);

inline Prompt make_prompt(std::string_view text) { return Prompt{tokenize(text)}; }

}  // namespace reprompt
