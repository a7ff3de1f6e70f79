#include "circuitlab/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include <fmt/core.h>
#include <nlohmann/json.hpp>

#include "circuitlab/errors.hpp"

namespace circuitlab::model {

namespace {

void put_u32_le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

std::uint32_t get_u32_le(std::string_view in) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[i])) << (8 * i);
  return v;
}

void put_f32_le(std::string& out, float f) { put_u32_le(out, std::bit_cast<std::uint32_t>(f)); }

float get_f32_le(std::string_view in) { return std::bit_cast<float>(get_u32_le(in)); }

}  // namespace

std::string encode_checkpoint(const ModelParams& params) {
  nlohmann::json manifest;
  manifest["config"] = params.config;
  manifest["tensors"] = nlohmann::json::array();
  std::size_t offset = 0;
  const auto tensors = params.tensors();
  for (const auto& t : tensors) {
    manifest["tensors"].push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}});
    offset += t.data.size() * sizeof(float);
  }
  const std::string header = manifest.dump();
  std::string out;
  out.reserve(8 + header.size() + offset);
  out.append(kCheckpointMagic);
  put_u32_le(out, static_cast<std::uint32_t>(header.size()));
  out.append(header);
  for (const auto& t : tensors)
    for (float v : t.data) put_f32_le(out, v);
  return out;
}

ModelParams decode_checkpoint(std::string_view bytes) {
  if (bytes.size() < 8 || bytes.substr(0, 4) != kCheckpointMagic) {
    throw CheckpointError("checkpoint: bad magic (expected \"CFG1\")");
  }
  const std::uint32_t header_len = get_u32_le(bytes.substr(4, 4));
  if (bytes.size() < 8 + static_cast<std::size_t>(header_len)) {
    throw CheckpointError(fmt::format("checkpoint: manifest length {} exceeds file size {}", header_len,
                                      bytes.size()));
  }
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(8, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint: malformed manifest: ") + e.what());
  }
  if (!manifest.is_object() || !manifest.contains("config") || !manifest.contains("tensors") ||
      !manifest["tensors"].is_array()) {
    throw CheckpointError("checkpoint: manifest lacks config or tensors");
  }

  ModelConfig config;
  try {
    config = manifest["config"].get<ModelConfig>();
    config.validate();
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("checkpoint: invalid config: ") + e.what());
  }

  ModelParams params = ModelParams::zeros(config);
  auto tensors = params.tensors();
  const auto& entries = manifest["tensors"];
  if (entries.size() != tensors.size()) {
    throw CheckpointError(fmt::format("checkpoint: manifest lists {} tensors, config requires {}",
                                      entries.size(), tensors.size()));
  }
  const std::string_view payload = bytes.substr(8 + header_len);
  std::size_t expected_offset = 0;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    auto& t = tensors[i];
    const auto& e = entries[i];
    std::string name;
    std::vector<int> shape;
    std::size_t offset = 0;
    try {
      name = e.at("name").get<std::string>();
      shape = e.at("shape").get<std::vector<int>>();
      offset = e.at("offset").get<std::size_t>();
    } catch (const nlohmann::json::exception& ex) {
      throw CheckpointError(fmt::format("checkpoint: malformed tensor entry {}: {}", i, ex.what()));
    }
    if (name != t.name) {
      throw CheckpointError(fmt::format("checkpoint: tensor {} is '{}', expected '{}'", i, name, t.name));
    }
    if (shape != t.shape) {
      throw CheckpointError(fmt::format("checkpoint: shape mismatch for '{}'", name));
    }
    if (offset != expected_offset) {
      throw CheckpointError(fmt::format("checkpoint: tensor '{}' at offset {}, expected {}", name, offset,
                                        expected_offset));
    }
    const std::size_t nbytes = t.data.size() * sizeof(float);
    if (offset + nbytes > payload.size()) {
      throw CheckpointError(fmt::format("checkpoint: payload truncated in tensor '{}' ({} of {} bytes present)",
                                        name, payload.size() > offset ? payload.size() - offset : 0, nbytes));
    }
    for (std::size_t k = 0; k < t.data.size(); ++k) t.data[k] = get_f32_le(payload.substr(offset + 4 * k, 4));
    expected_offset += nbytes;
  }
  if (expected_offset != payload.size()) {
    throw CheckpointError(fmt::format("checkpoint: {} trailing payload bytes", payload.size() - expected_offset));
  }
  return params;
}

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
  const std::string bytes = encode_checkpoint(params);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("checkpoint: cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("checkpoint: write failed for '" + path.string() + "'");
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

}  // namespace circuitlab::model
