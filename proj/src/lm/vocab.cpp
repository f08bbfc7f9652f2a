#include "reprompt/vocab.hpp"

#include "reprompt/error.hpp"

namespace reprompt {

const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kArgument: return "argument error";
    case ErrorCode::kLength: return "length error";
    case ErrorCode::kCapacity: return "capacity error";
    case ErrorCode::kNumeric: return "numeric error";
    case ErrorCode::kBudget: return "budget error";
    case ErrorCode::kMask: return "mask error";
    case ErrorCode::kSuite: return "suite error";
    case ErrorCode::kIo: return "io error";
    case ErrorCode::kVersion: return "version error";
    case ErrorCode::kShape: return "shape error";
    case ErrorCode::kTruncated: return "truncated error";
    case ErrorCode::kChecksum: return "checksum error";
    case ErrorCode::kConfig: return "config error";
  }
  return "error";
}

std::string Vocabulary::layout_hash() const {
  return "bytes4+specials:pad0,bos1,eos2,unk3:V" + std::to_string(size);
}

Tokens tokenize(std::string_view text) {
  Tokens out;
  out.reserve(text.size());
  for (char c : text) {
    out.push_back(Vocabulary::from_byte(static_cast<unsigned char>(c)));
  }
  return out;
}

std::string detokenize(std::span<const TokenId> tokens) {
  static constexpr const char* kNames[kNumSpecial] = {"[PAD]", "[BOS]", "[EOS]",
                                                      "[UNK]"};
  std::string out;
  out.reserve(tokens.size());
  for (TokenId t : tokens) {
    if (t >= kNumSpecial && t < kByteVocabSize) {
      out.push_back(static_cast<char>(t - kNumSpecial));
    } else if (t >= 0 && t < kNumSpecial) {
      out += kNames[t];
    } else {
      throw Error(ErrorCode::kArgument,
                  "token id " + std::to_string(t) + " outside byte vocabulary");
    }
  }
  return out;
}

}  // namespace reprompt
