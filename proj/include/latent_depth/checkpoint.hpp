#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "latent_depth/network.hpp"

namespace latent_depth {

// Binary checkpoint layout (all integers little-endian):
//   "LDEPTHCK"  u32 version  u32 reserved  u64 header_len  header JSON
//   float64 tensor data in declaration order  u64 FNV-1a of everything before it
// The header records the network config, caller metadata and a name/shape
// table for every stored tensor, running statistics included.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  DepthModel model;
  nlohmann::json metadata;
};

std::string serialize_checkpoint(const DepthModel& model,
                                 const nlohmann::json& metadata = nlohmann::json::object());
Checkpoint deserialize_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const DepthModel& model,
                     const nlohmann::json& metadata = nlohmann::json::object());
Checkpoint load_checkpoint(const std::filesystem::path& path);

nlohmann::json config_to_json(const NetworkConfig& config);
NetworkConfig config_from_json(const nlohmann::json& j);

}  // namespace latent_depth
