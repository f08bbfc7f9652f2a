#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "reprompt/model.hpp"

namespace reprompt {

inline constexpr int kCheckpointFormatVersion = 1;

/// A named row-major tensor as stored on disk (always 32-bit floats).
struct NamedTensor {
  std::string name;
  Matrix<float> value;
};

/// Writes `<path>` (JSON manifest) and the blob next to it (`<path>` with its
/// extension replaced by ".bin"). The manifest records kind, format version,
/// per-tensor shapes and byte offsets, the blob size and its SHA-256.
void save_tensors(const std::filesystem::path& path, const std::string& kind,
                  const std::vector<NamedTensor>& tensors, const nlohmann::json& metadata);

struct TensorFile {
  std::string kind;
  nlohmann::json metadata;
  std::vector<NamedTensor> tensors;
};

/// Validates version, blob length and checksum before decoding. Errors:
/// kIo (missing/unreadable), kVersion, kTruncated, kChecksum, kShape.
TensorFile load_tensors(const std::filesystem::path& path, const std::string& expected_kind);

/// Frozen model plus everything needed to use it.
struct ModelBundle {
  ModelConfig config;
  Vocabulary vocabulary;
  ModelParameters<float> params;
  nlohmann::json provenance;  // training settings, corpus identity, trace summary
};

void save_checkpoint(const ModelParameters<float>& params, const std::filesystem::path& path,
                     const nlohmann::json& provenance = nlohmann::json::object());

/// Tensor shapes are checked against the config in the manifest (kShape).
ModelBundle load_checkpoint(const std::filesystem::path& path);

nlohmann::json config_to_json(const ModelConfig& config);
ModelConfig config_from_json(const nlohmann::json& j);

std::string sha256_hex(const void* data, std::size_t size);
std::string sha256_file(const std::filesystem::path& path);

}  // namespace reprompt
