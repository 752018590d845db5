#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hemorl/nnkit/layers.hpp"

namespace hemorl::nn {

inline constexpr int kCheckpointFormatVersion = 1;

struct CheckpointHeader {
  int format_version = kCheckpointFormatVersion;
  std::vector<LayerSpec> layers;
  std::uint64_t seed = 0;
  std::string init_scheme{kInitScheme};
  /// Caller-specific metadata (embed architecture, preprocessing hash, ...).
  nlohmann::json extra = nlohmann::json::object();
};

struct NamedTensor {
  std::string name;
  Tensor value;
};

struct Checkpoint {
  CheckpointHeader header;
  std::vector<NamedTensor> tensors;
};

/// JSON container; tensor payloads are IEEE-754 bit patterns in hex, so a
/// save/load round trip is bit-exact.
nlohmann::json checkpoint_to_json(const CheckpointHeader& header, const std::vector<const Parameter*>& params);
Checkpoint checkpoint_from_json(const nlohmann::json& j);

void save_checkpoint(const std::filesystem::path& path, const CheckpointHeader& header,
                     const std::vector<const Parameter*>& params);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copies tensors into `params` in declared order; names and shapes must match.
void restore_parameters(const Checkpoint& ckpt, const std::vector<Parameter*>& params);

nlohmann::json layer_spec_to_json(const LayerSpec& spec);
LayerSpec layer_spec_from_json(const nlohmann::json& j);

}  // namespace hemorl::nn
