// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>

#include <nlohmann/json.hpp>

#include "riverpref/net.hpp"

namespace riverpref {

inline constexpr std::uint32_t kCheckpointFormatVersion = 1;

struct CheckpointMeta {
  std::string checkpoint_id;
  int episode_index = -1;
  std::string method;
  nlohmann::json hyperparameters = nlohmann::json::object();
  std::uint64_t creation_seed = 0;
};

struct Checkpoint {
  NetParams params;
  CheckpointMeta meta;
};

/// Binary container: magic, format_version, JSON metadata block, then named
/// tensors (shape + row-major little-endian float64), then an FNV-1a checksum.
std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::string& bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace riverpref
