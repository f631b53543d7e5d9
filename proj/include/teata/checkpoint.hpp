#pragma once

// Checkpoint directory layout:
//   checkpoint.json  schema version, config hash, step, method, model dims,
//                    tensor checksum and the parameter index
//                    (name -> {shape, dtype, file, offset}) in storage order
//   tensors.bin      little-endian float32 values, concatenated in index order

#include "teata/tensor.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace teata {

inline constexpr int kCheckpointSchemaVersion = 1;

struct NamedTensor {
  std::string name;
  Matrix value;
};

struct Checkpoint {
  int schema_version = kCheckpointSchemaVersion;
  std::string config_hash;
  int step = 0;
  std::string method;
  nlohmann::ordered_json model;  // encoder dimensions, enough to rebuild the modules
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const;
};

void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& checkpoint);

/// Throws MissingFile, VersionMismatch (schema), or IntegrityError (bad size/checksum).
Checkpoint load_checkpoint(const std::filesystem::path& dir);

/// Rounds every entry to float32 precision, matching what a save/load cycle yields.
Matrix round_to_float(const Matrix& m);

}  // namespace teata
