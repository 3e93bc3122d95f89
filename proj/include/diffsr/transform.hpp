#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "diffsr/field.hpp"
#include "diffsr/nn/bundle.hpp"
#include "diffsr/nn/layers.hpp"

namespace diffsr {

/// Hyperparameters of the stage-1 modality transformation network.
struct TransformConfig {
  int embed_patch = 16;
  int embed_dim = 128;
  int depth = 4;
  int heads = 4;
  double mlp_ratio = 4.0;
  double w0 = 5.0;
  double w1 = 4.0;
  double lr = 1e-4;
  int image_size = 64;  // side of the training image; fixes the learned positional grid
  int batch = 8;

  void validate() const;
  /// Throws unless an (rows, cols) image can be tokenized.
  void validate_input(int rows, int cols) const;
  int grid_side() const { return image_size / embed_patch; }

  nlohmann::ordered_json to_json() const;
  static TransformConfig from_json(const nlohmann::json& j);
};

/// One pre-norm transformer encoder block.
template <class T>
struct TransformerBlock {
  nn::LayerNorm<T> norm1;
  nn::SelfAttention<T> attn;
  nn::LayerNorm<T> norm2;
  nn::Dense<T> fc1;
  nn::Dense<T> fc2;

  TransformerBlock(int dim, int heads, int hidden, CounterRng& rng);
  nn::Var<T> operator()(const nn::Var<T>& x) const;
  void collect(nn::ParamList<T>& out) const;
};

/// Patch embedding + learned positional grid + transformer blocks + per-token linear head.
template <class T>
class TransformNet {
 public:
  TransformNet(const TransformConfig& cfg, std::uint64_t seed);

  /// (B, 4, H, W) satellite stack -> (B, 1, H, W) unclamped model-space reflectivity.
  nn::Var<T> forward(const nn::Var<T>& satellite) const;

  nn::ParamList<T> parameters() const;
  const TransformConfig& config() const { return cfg_; }
  nn::Var<T>& positional() { return pos_; }

 private:
  TransformConfig cfg_;
  nn::Dense<T> embed_;
  nn::Var<T> pos_;  // (grid*grid, D)
  std::vector<TransformerBlock<T>> blocks_;
  nn::LayerNorm<T> norm_;
  nn::Dense<T> head_;
};

/// Exponentially weighted squared error over mask-valid pixels:
/// mean of exp(w0 * t^w1) * (pred - t)^2, with pred and t in [0, 1] weight space.
/// An empty mask means every pixel counts.
template <class T>
nn::Var<T> weighted_loss(const nn::Var<T>& pred, const nn::Tensor<T>& target, double w0, double w1,
                         std::span<const std::uint8_t> mask = {});

/// Frozen-model inference: clamped to [model_lo, model_hi]; throws on non-finite output.
nn::Tensor<float> tm_forward(const nn::Tensor<float>& satellite, const TransformNet<float>& net, const NormSpec& norm);

/// The stage-1 estimate y' in model space.
struct RadarEstimate {
  Field values;  // normalized
  std::string provenance;
};

/// Estimate for any satellite stack (a full scene or one patch); `mask` is attached to the result.
RadarEstimate estimate(const std::array<Field, kSatelliteChannels>& satellite, std::span<const std::uint8_t> mask,
                       const TransformNet<float>& net, const nn::ModelBundle& bundle);
RadarEstimate estimate_scene(const Scene& scene, const TransformNet<float>& net, const nn::ModelBundle& bundle);

struct LossRecord {
  long step = 0;
  double loss = 0.0;
  double wall_ms = 0.0;
};

struct TrainResult {
  nn::ModelBundle bundle;
  std::vector<LossRecord> log;
};

/// Image-level training with the weighted loss and Adam. Deterministic given `seed`.
TrainResult train_tm(std::span<const Scene> scenes, const TransformConfig& cfg, const NormSpec& norm, long steps,
                     std::uint64_t seed);

nn::ModelBundle make_transform_bundle(const TransformNet<float>& net, const NormSpec& norm, nn::TrainingMeta meta);
TransformNet<float> transform_from_bundle(const nn::ModelBundle& bundle);

}  // namespace diffsr
