#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "diffsr/field.hpp"

// Procedural paired (satellite, radar) scenes.
namespace diffsr {

struct StormParams {
  int n_cells_min = 1;
  int n_cells_max = 12;
  int n_cells_override = -1;  // >= 0 fixes the cell count
  double amp_min = 20.0;
  double amp_max = 55.0;
  double sigma_min = 2.0;
  double sigma_max = 12.0;
  double background_max = 12.0;  // background level drawn from [0, background_max]
  double texture = 0.15;         // relative amplitude of fine multiplicative texture
  double texture_sigma = 1.0;
  double bt_base = 280.0;
  double bt_slope = -1.5;
  std::array<double, 3> noise_sd = {1.0, 1.0, 1.0};
  std::array<double, 3> blur_sigma = {1.5, 3.0, 5.0};
  double lightning_threshold = 40.0;
  double flash_scale = 5.0;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static StormParams from_json(const nlohmann::json& j);
};

inline constexpr double kBtMin = 180.0;
inline constexpr double kBtMax = 320.0;

/// Per-channel offsets added to bt_base and multipliers applied to bt_slope.
inline constexpr std::array<double, 3> kBtBaseOffset = {0.0, -30.0, 10.0};
inline constexpr std::array<double, 3> kBtSlopeFactor = {1.0, 0.7, 1.3};

/// Separable Gaussian blur, kernel truncated at 3 sigma, mirrored edges. sigma <= 0 copies.
std::vector<double> gaussian_blur(std::span<const double> img, int rows, int cols, double sigma);

Scene gen_scene(const StormParams& params, int rows, int cols, const std::string& id = "");

std::string scene_id(int index);

/// Scene i uses params with seed = master_seed + i.
std::vector<Scene> gen_dataset(int n, int rows, int cols, std::uint64_t master_seed, StormParams params = {});

}  // namespace diffsr
