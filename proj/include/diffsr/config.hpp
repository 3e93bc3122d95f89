#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "diffsr/diffusion.hpp"
#include "diffsr/metrics.hpp"
#include "diffsr/patching.hpp"
#include "diffsr/synth.hpp"
#include "diffsr/transform.hpp"

// Declarative run configuration (TOML). Every key is optional; unknown keys are errors.
namespace diffsr {

struct DataConfig {
  int scenes = 64;
  int rows = 64;
  int cols = 64;
  int train_scenes = 48;  // scenes [0, train_scenes) train, the rest validate
  std::uint64_t seed = 0;
};

struct NormConfig {
  NormSpec spec;
  bool fit_channels = true;  // refit satellite affines on the training scenes
};

struct PatchConfig {
  int size = 32;
  int stride = 32;
  FilterPolicy filter{50, 6.0};
};

struct TransformRun {
  TransformConfig model{8, 64, 4, 4, 4.0, 5.0, 4.0, 1e-3, 64, 8};
  long steps = 2000;
  std::uint64_t seed = 0;
};

struct DiffusionRun {
  DenoiserConfig model{16, 3, 64, ConditionMode::Both};
  ScheduleConfig schedule;
  DiffusionTrainOptions train{8, 1e-3};
  long steps = 2000;
  std::uint64_t seed = 0;
};

struct SampleConfig {
  std::uint64_t seed = 0;
  int stride = 32;                  // window stride for full-scene sampling
  std::vector<std::string> scenes;  // empty: every validation scene
};

struct PathConfig {
  std::string data;  // scene manifest
  std::string tm_bundle;
  std::string diff_bundle;
};

struct RunConfig {
  std::uint64_t seed = 1;
  DataConfig data;
  StormParams storm;
  NormConfig norm;
  PatchConfig patch;
  TransformRun transform;
  DiffusionRun diffusion;
  SampleConfig sample;
  MetricConfig metrics;
  PathConfig paths;

  void validate() const;
};

/// Parses TOML text. Stage seeds left unset derive from the top-level seed. Relative
/// paths are resolved against `base_dir`.
RunConfig parse_config(const std::string& text, const std::string& base_dir = ".", const std::uint64_t* seed_override = nullptr);
RunConfig load_config(const std::string& path, const std::uint64_t* seed_override = nullptr);

/// The fully resolved config as TOML; parse_config of this text reproduces `cfg`.
std::string dump_config(const RunConfig& cfg);

}  // namespace diffsr
