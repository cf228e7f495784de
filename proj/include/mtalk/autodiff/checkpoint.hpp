#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "mtalk/autodiff/tensor.hpp"

namespace mtalk::ad {

// Container layout:
//   8 bytes   magic "MTALKCK1"
//   8 bytes   little-endian u64 header length H
//   H bytes   UTF-8 JSON header {format_version, dtype, step, params:[{name, shape}], config}
//   payload   little-endian f32 buffers, one per header entry, in header order
struct Checkpoint {
  ParamSet<float> params;
  std::int64_t step = 0;
  nlohmann::json config = nlohmann::json::object();
};

inline constexpr int kCheckpointFormatVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::string& bytes);

}  // namespace mtalk::ad
