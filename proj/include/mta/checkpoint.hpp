#pragma once

// Checkpoints: a binary weight archive plus a JSON metadata sidecar stored
// next to it with the extension replaced by ".json".
//
// Weight archive layout (little endian):
//   "MTAW" | u32 version | u32 tensor count |
//   per tensor: u32 name length | name | u32 rank | u64 dims[rank] | f64 values

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "mta/model.hpp"

namespace mta {

inline constexpr std::uint32_t kWeightFormatVersion = 1;

enum class TrainingKind { Standard, Adversarial, Msm };

std::string_view training_kind_name(TrainingKind kind);
TrainingKind parse_training_kind(std::string_view name);

struct CheckpointMeta {
  std::string id;
  ArchitectureSpec arch;
  std::string dataset;
  std::uint64_t seed = 0;
  std::size_t epochs = 0;
  double accuracy = 0.0;
  TrainingKind training_kind = TrainingKind::Standard;
  std::string config_hash;
  /// Free-form extras (recipe, optimizer notes); preserved verbatim.
  nlohmann::json extra = nlohmann::json::object();

  void validate() const;
  friend bool operator==(const CheckpointMeta&, const CheckpointMeta&) = default;
};

void to_json(nlohmann::json& j, const CheckpointMeta& m);
void from_json(const nlohmann::json& j, CheckpointMeta& m);

std::filesystem::path metadata_path(const std::filesystem::path& weights_path);

/// Serialized weight archive of a classifier's parameters.
std::string encode_weights(const Classifier& model);
/// Loads an archive into `model`; names and shapes must match exactly.
void decode_weights(std::string_view bytes, Classifier& model, const std::string& source = "<memory>");

void save_checkpoint(const Classifier& model, const CheckpointMeta& meta, const std::filesystem::path& weights_path);

struct LoadedCheckpoint {
  Classifier model;
  CheckpointMeta meta;
};

/// NotFoundError when either file is missing; FormatError on a version or
/// layout mismatch.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& weights_path);
CheckpointMeta load_checkpoint_meta(const std::filesystem::path& weights_path);

}  // namespace mta
