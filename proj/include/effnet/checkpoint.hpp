#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "effnet/model.hpp"

namespace effnet {

nlohmann::json to_json(const ModelConfig& cfg);
/// Missing keys keep their defaults; unknown keys are a ConfigError.
ModelConfig model_config_from_json(const nlohmann::json& j);

/// Sorted-key compact JSON of the model config. Its SHA-256 is the config
/// digest stored in checkpoint headers.
std::string canonical_config(const ModelConfig& cfg);
std::string config_digest(const ModelConfig& cfg);

struct TensorRecord {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

/// On disk, little-endian:
///   "EFNM" | u16 version | 32-byte config digest | u32 meta length | meta JSON
///   | u32 record count | records
/// with each record: u16 name length | name | u8 rank | u32 extents | f32 values.
/// The meta JSON holds {"model": config, "state": free-form training state}.
struct Checkpoint {
  static constexpr std::uint16_t kVersion = 1;

  ModelConfig model;
  nlohmann::json state = nlohmann::json::object();
  std::vector<TensorRecord> records;

  const TensorRecord* find(std::string_view name) const;
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
/// Throws DataError on a bad magic, unknown version, truncation, or a digest
/// that does not match the embedded config.
Checkpoint parse_checkpoint(std::string_view bytes, const std::string& origin = "checkpoint");

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// One record per tensor, named prefix + parameter name, stored at 32 bits.
std::vector<TensorRecord> tensor_records(const ParameterList& params,
                                         const std::string& prefix = "");

/// Copies records prefix + name into each parameter. Throws DataError when a
/// record is missing or its shape differs.
void load_tensors(const ParameterList& params, const Checkpoint& ckpt,
                  const std::string& prefix = "");

/// Throws DataError unless `ckpt` was written for exactly `expected`.
void require_config(const Checkpoint& ckpt, const ModelConfig& expected);

/// Rebuilds the model from the embedded config and loads its weights.
EffNetMini restore_model(const Checkpoint& ckpt);

}  // namespace effnet
