#pragma once

#include <stdexcept>
#include <string>

namespace reprompt {

enum class ErrorCode {
  kArgument,   // malformed call arguments
  kLength,     // context or sequence outside model capacity
  kCapacity,   // generation would exceed max_seq_len
  kNumeric,    // non-finite loss or gradient
  kBudget,     // enumeration budget exceeded
  kMask,       // vocabulary mask leaves nothing to choose from
  kSuite,      // model suite members disagree on the vocabulary
  kIo,         // file could not be read or written
  kVersion,    // checkpoint format version mismatch
  kShape,      // checkpoint tensor shape disagrees with manifest/config
  kTruncated,  // checkpoint blob shorter than the manifest says
  kChecksum,   // checkpoint blob content hash mismatch
  kConfig,     // experiment configuration invalid
};

const char* to_string(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace reprompt
