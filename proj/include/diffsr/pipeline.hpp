#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "diffsr/config.hpp"
#include "diffsr/dataset.hpp"
#include "diffsr/diffusion.hpp"
#include "diffsr/metrics.hpp"

// Run-directory level operations behind the CLI subcommands.
namespace diffsr {

/// Exclusive ownership of a run directory through a lock file created with O_EXCL.
class RunLock {
 public:
  explicit RunLock(const std::string& dir);
  ~RunLock();
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::string path_;
};

struct SceneSplit {
  std::vector<Scene> train;
  std::vector<Scene> val;
};

SceneSplit split_scenes(std::vector<Scene> scenes, int train_scenes);

/// Config norm, with satellite affines refit on `train` when requested.
NormSpec resolve_norm(const RunConfig& cfg, const std::vector<Scene>& train);

/// Patchified and filtered training patches, in scene order.
std::vector<Patch> training_patches(const std::vector<Scene>& scenes, const PatchConfig& cfg);

/// "step,loss" with one row per step; values printed with %.9g.
std::string loss_csv(const std::vector<LossRecord>& log);
std::string timing_csv(const std::vector<LossRecord>& log);

void write_text(const std::string& path, const std::string& text);
std::string read_text(const std::string& path);

/// Per-item seed for patch `index` of scene `id`.
std::uint64_t patch_seed(std::uint64_t seed, const std::string& id, int index);

struct SceneSample {
  Field sample;    // dBZ
  Field estimate;  // dBZ; the stage-1 estimate assembled from the same patches (empty for SatelliteOnly)
};

/// Full-scene synthesis: patchify, stage-1 estimate per patch, diffusion sample per patch,
/// depatchify with overlap averaging, denormalize.
SceneSample sample_scene(const Scene& scene, const nn::ModelBundle* tm, const nn::ModelBundle& diff, int patch_size,
                         int stride, std::uint64_t seed);

std::string cmd_gen_data(const RunConfig& cfg, const std::string& out);
std::string cmd_patchify(const RunConfig& cfg, const std::string& out);
std::string cmd_train_tm(const RunConfig& cfg, const std::string& out);
std::string cmd_train_diff(const RunConfig& cfg, const std::string& out);
/// Writes pred/ (and estimate/ when the mode uses one) manifests plus PNGs; returns the pred manifest.
std::string cmd_sample(const RunConfig& cfg, const std::string& out);
/// Returns the compact metrics CSV path.
std::string cmd_evaluate(const RunConfig& cfg, const std::string& pred_manifest, const std::string& truth_manifest,
                         const std::string& out, const std::string& model_id);

struct AblationRow {
  std::string model;
  ConditionMode mode;
  double ssim;
  double rmse;
  double csi35_pool8;
  double csi50_pool8;
};

/// Trains and samples each condition mode on shared seeds. Returns the comparison table path.
std::string cmd_ablate(const RunConfig& cfg, const std::string& out, std::vector<AblationRow>* rows = nullptr);

}  // namespace diffsr
