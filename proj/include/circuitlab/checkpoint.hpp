#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include "circuitlab/model.hpp"

namespace circuitlab::model {

// Container layout:
//   "CFG1" | u32 LE manifest length | UTF-8 JSON manifest | payload
// The manifest is {"config": {...}, "tensors": [{"name", "shape", "offset"}]}
// with byte offsets into the payload, which is little-endian float32 data in
// manifest order.

inline constexpr std::string_view kCheckpointMagic = "CFG1";

std::string encode_checkpoint(const ModelParams& params);
/// Throws CheckpointError on bad magic, malformed manifest, shape or count
/// mismatch, or truncated payload. Never returns partial parameters.
ModelParams decode_checkpoint(std::string_view bytes);

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_checkpoint(const std::filesystem::path& path);

}  // namespace circuitlab::model
