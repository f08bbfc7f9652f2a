#include "reprompt/checkpoint.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>

#include "reprompt/error.hpp"

namespace reprompt {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr const char* kFormatName = "reprompt-tensors";

fs::path blob_path(const fs::path& manifest) {
  fs::path p = manifest;
  p.replace_extension(".bin");
  return p;
}

void put_f32(std::string& out, float value) {
  const auto bits = std::bit_cast<std::uint32_t>(value);
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xffu));
}

float get_f32(const std::string& in, std::size_t offset) {
  std::uint32_t bits = 0;
  for (int b = 0; b < 4; ++b) {
    bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[offset + b])) << (8 * b);
  }
  return std::bit_cast<float>(bits);
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::kIo, "short write to " + path.string());
}

}  // namespace

std::string sha256_hex(const void* data, std::size_t size) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(),
                                                               &EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx.get(), data, size) != 1 ||
      EVP_DigestFinal_ex(ctx.get(), digest, &len) != 1) {
    throw Error(ErrorCode::kIo, "sha256 failed");
  }
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) {
    hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  }
  return hex.str();
}

std::string sha256_file(const fs::path& path) {
  const std::string bytes = read_file(path);
  return sha256_hex(bytes.data(), bytes.size());
}

void save_tensors(const fs::path& path, const std::string& kind,
                  const std::vector<NamedTensor>& tensors, const json& metadata) {
  std::string blob;
  json entries = json::array();
  for (const auto& t : tensors) {
    const std::size_t offset = blob.size();
    for (Eigen::Index i = 0; i < t.value.size(); ++i) put_f32(blob, t.value.data()[i]);
    entries.push_back({{"name", t.name},
                       {"shape", {t.value.rows(), t.value.cols()}},
                       {"offset", offset},
                       {"bytes", blob.size() - offset}});
  }
  const fs::path blob_file = blob_path(path);
  json manifest = {{"format", kFormatName},
                   {"format_version", kCheckpointFormatVersion},
                   {"kind", kind},
                   {"dtype", "f32-le"},
                   {"layout", "row-major"},
                   {"blob", {{"file", blob_file.filename().string()},
                             {"bytes", blob.size()},
                             {"sha256", sha256_hex(blob.data(), blob.size())}}},
                   {"tensors", entries},
                   {"metadata", metadata}};
  write_file(blob_file, blob);
  write_file(path, manifest.dump(2) + "\n");
}

TensorFile load_tensors(const fs::path& path, const std::string& expected_kind) {
  json manifest;
  try {
    manifest = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kIo, "malformed manifest " + path.string() + ": " + e.what());
  }
  try {
    if (manifest.value("format", std::string()) != kFormatName) {
      throw Error(ErrorCode::kVersion, path.string() + " is not a tensor manifest");
    }
    const int version = manifest.at("format_version").get<int>();
    if (version != kCheckpointFormatVersion) {
      throw Error(ErrorCode::kVersion, "format version " + std::to_string(version) +
                                           " is incompatible with supported version " +
                                           std::to_string(kCheckpointFormatVersion));
    }
    TensorFile out;
    out.kind = manifest.at("kind").get<std::string>();
    if (!expected_kind.empty() && out.kind != expected_kind) {
      throw Error(ErrorCode::kVersion,
                  "expected a '" + expected_kind + "' file, found '" + out.kind + "'");
    }
    out.metadata = manifest.value("metadata", json::object());

    const fs::path blob_file = path.parent_path() / manifest.at("blob").at("file").get<std::string>();
    const std::string blob = read_file(blob_file);
    const auto expected_bytes = manifest.at("blob").at("bytes").get<std::size_t>();
    if (blob.size() < expected_bytes) {
      throw Error(ErrorCode::kTruncated, "blob has " + std::to_string(blob.size()) +
                                             " bytes, manifest says " +
                                             std::to_string(expected_bytes));
    }
    if (blob.size() != expected_bytes) {
      throw Error(ErrorCode::kShape, "blob is longer than the manifest says");
    }
    if (sha256_hex(blob.data(), blob.size()) != manifest.at("blob").at("sha256").get<std::string>()) {
      throw Error(ErrorCode::kChecksum, "blob content does not match manifest checksum");
    }
    for (const auto& e : manifest.at("tensors")) {
      const auto rows = e.at("shape").at(0).get<Eigen::Index>();
      const auto cols = e.at("shape").at(1).get<Eigen::Index>();
      const auto offset = e.at("offset").get<std::size_t>();
      const auto bytes = e.at("bytes").get<std::size_t>();
      if (rows < 0 || cols < 0 || bytes != static_cast<std::size_t>(rows * cols) * 4 ||
          offset + bytes > blob.size()) {
        throw Error(ErrorCode::kShape, "tensor " + e.at("name").get<std::string>() +
                                           " does not fit its declared shape");
      }
      NamedTensor t{e.at("name").get<std::string>(), Matrix<float>(rows, cols)};
      for (Eigen::Index i = 0; i < rows * cols; ++i) {
        t.value.data()[i] = get_f32(blob, offset + static_cast<std::size_t>(i) * 4);
      }
      out.tensors.push_back(std::move(t));
    }
    return out;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kShape, "manifest " + path.string() + " is missing fields: " + e.what());
  }
}

json config_to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},   {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},       {"d_ff", c.d_ff},         {"max_seq_len", c.max_seq_len},
          {"ln_eps", c.ln_eps},         {"init_std", c.init_std}, {"seed", c.seed}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.d_model = j.value("d_model", c.d_model);
  c.n_layers = j.value("n_layers", c.n_layers);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.d_ff = j.value("d_ff", c.d_ff);
  c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
  c.ln_eps = j.value("ln_eps", c.ln_eps);
  c.init_std = j.value("init_std", c.init_std);
  c.seed = j.value("seed", c.seed);
  return c;
}

void save_checkpoint(const ModelParameters<float>& params, const fs::path& path,
                     const json& provenance) {
  std::vector<NamedTensor> tensors;
  params.visit([&](const std::string& name, const Matrix<float>& m) {
    tensors.push_back({name, m});
  });
  const json metadata = {{"config", config_to_json(params.config)},
                         {"vocabulary", {{"size", params.config.vocab_size},
                                         {"layout", params.config.vocabulary().layout_hash()}}},
                         {"provenance", provenance}};
  save_tensors(path, "model", tensors, metadata);
}

ModelBundle load_checkpoint(const fs::path& path) {
  TensorFile file = load_tensors(path, "model");
  ModelBundle bundle;
  try {
    bundle.config = config_from_json(file.metadata.at("config"));
    bundle.vocabulary = Vocabulary{file.metadata.at("vocabulary").at("size").get<int>()};
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kShape, std::string("checkpoint metadata incomplete: ") + e.what());
  }
  if (bundle.vocabulary.size != bundle.config.vocab_size) {
    throw Error(ErrorCode::kShape, "vocabulary size disagrees with model config");
  }
  bundle.provenance = file.metadata.value("provenance", json::object());
  bundle.params = ModelParameters<float>::zeros(bundle.config);
  auto slots = bundle.params.tensors();
  if (slots.size() != file.tensors.size()) {
    throw Error(ErrorCode::kShape, "checkpoint has " + std::to_string(file.tensors.size()) +
                                       " tensors, config implies " + std::to_string(slots.size()));
  }
  for (std::size_t i = 0; i < slots.size(); ++i) {
    auto& [name, slot] = slots[i];
    const NamedTensor& t = file.tensors[i];
    if (t.name != name || t.value.rows() != slot->rows() || t.value.cols() != slot->cols()) {
      throw Error(ErrorCode::kShape, "tensor '" + t.name + "' does not match expected '" + name +
                                         "' " + std::to_string(slot->rows()) + "x" +
                                         std::to_string(slot->cols()));
    }
    *slot = t.value;
  }
  if (!bundle.params.all_finite()) {
    throw Error(ErrorCode::kNumeric, "checkpoint contains non-finite parameters");
  }
  return bundle;
}

}  // namespace reprompt
