#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "diffsr/field.hpp"

namespace diffsr::nn {

inline constexpr const char* kBundleVersion = "diffsr-bundle/1";

struct TrainingMeta {
  long steps = 0;
  std::uint64_t seed = 0;
};

/// Serialized weights plus everything needed to rebuild the network that owns them.
struct ModelBundle {
  std::string version = kBundleVersion;
  std::string kind;  // "transform" or "denoiser"
  nlohmann::ordered_json architecture;
  NormSpec norm;
  TrainingMeta meta;
  std::vector<float> weights;

  /// Content hash (FNV-1a over kind, architecture and weight bits), hex encoded.
  std::string id() const;
};

nlohmann::ordered_json norm_to_json(const NormSpec& norm);
NormSpec norm_from_json(const nlohmann::json& j);

std::vector<std::uint8_t> encode_bundle(const ModelBundle& bundle);
ModelBundle decode_bundle(std::span<const std::uint8_t> bytes);
void save_bundle(const ModelBundle& bundle, const std::string& path);
ModelBundle load_bundle(const std::string& path);

}  // namespace diffsr::nn
