#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "diffsr/nn/bundle.hpp"
#include "diffsr/nn/layers.hpp"
#include "diffsr/patching.hpp"
#include "diffsr/transform.hpp"

namespace diffsr {

enum class ConditionMode { SatelliteOnly, EstimateOnly, Both };

/// "satellite", "estimate", "both"
std::string_view to_string(ConditionMode mode);
ConditionMode mode_from_string(std::string_view name);
int condition_channels(ConditionMode mode);

/// Variance schedule. Arrays are indexed by t - 1 for t = 1..T.
///
/// A respaced schedule keeps the original step of each entry in `model_t`, which is
/// what the denoiser sees, and the original length in `train_steps`.
struct NoiseSchedule {
  int T = 0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;
  std::vector<double> sigma;
  std::vector<int> model_t;
  int train_steps = 0;

  double beta_at(int t) const { return beta[index(t)]; }
  double alpha_at(int t) const { return alpha[index(t)]; }
  double alpha_bar_at(int t) const { return alpha_bar[index(t)]; }
  double sigma_at(int t) const { return sigma[index(t)]; }
  int model_step(int t) const { return model_t[index(t)]; }

  void check_step(int t) const;

 private:
  std::size_t index(int t) const {
    check_step(t);
    return static_cast<std::size_t>(t - 1);
  }
};

/// Linear betas from beta_min to beta_max.
NoiseSchedule build_schedule(int T, double beta_min, double beta_max);

/// Schedule from explicit betas in [0, 1). beta = 0 is allowed here for limit cases.
NoiseSchedule schedule_from_betas(std::vector<double> betas);

/// Plain subsequence stepping: keeps `count` evenly spaced steps of `s` (always including T)
/// and recomputes betas so the kept alpha_bar values are unchanged.
NoiseSchedule respace(const NoiseSchedule& s, int count);

/// sqrt(alpha_bar_t) * y0 + sqrt(1 - alpha_bar_t) * eps
template <class T>
nn::Tensor<T> forward_sample(const nn::Tensor<T>& y0, int t, const nn::Tensor<T>& eps, const NoiseSchedule& s);

/// (1/sqrt(alpha_t)) (y_t - (beta_t / sqrt(1 - alpha_bar_t)) eps_pred) + sigma_t z; z is ignored at t = 1.
template <class T>
nn::Tensor<T> reverse_step(const nn::Tensor<T>& y_t, int t, const nn::Tensor<T>& eps_pred, const nn::Tensor<T>& z,
                           const NoiseSchedule& s);

/// The same step taken through the predicted clean image: x0 = clamp((y_t - sqrt(1 - alpha_bar_t) eps_pred) /
/// sqrt(alpha_bar_t), lo, hi), then the posterior mean of y_{t-1} given (y_t, x0), plus sigma_t z.
/// With a wide enough range it equals reverse_step.
template <class T>
nn::Tensor<T> reverse_step_clipped(const nn::Tensor<T>& y_t, int t, const nn::Tensor<T>& eps_pred, const nn::Tensor<T>& z,
                                   const NoiseSchedule& s, double lo, double hi);

/// Channel stack in the fixed order [ABI-C07, ABI-C09, ABI-C13, GLM, estimate], restricted to
/// the mode. `satellite` is (B, 4, H, W), `estimate` (B, 1, H, W); either may be null when unused.
nn::Tensor<float> assemble_condition(ConditionMode mode, const nn::Tensor<float>* satellite,
                                     const nn::Tensor<float>* estimate);

struct DenoiserConfig {
  int base_channels = 32;
  int depth = 3;
  int time_dim = 128;
  ConditionMode mode = ConditionMode::Both;
  // eps = net + sqrt(1 - alpha_bar_t) (y_t - sqrt(alpha_bar_t) estimate); off in satellite mode
  bool anchor = false;

  int condition_channels() const { return diffsr::condition_channels(mode); }
  void validate() const;
  nlohmann::ordered_json to_json() const;
  static DenoiserConfig from_json(const nlohmann::json& j);
};

/// Residual block: GN-SiLU-conv, plus a projected time embedding, GN-SiLU-conv, 1x1 skip when widths differ.
template <class T>
struct ResBlock {
  nn::GroupNorm<T> norm1;
  nn::Conv2d<T> conv1;
  nn::Dense<T> time_proj;
  nn::GroupNorm<T> norm2;
  nn::Conv2d<T> conv2;
  nn::Conv2d<T> skip;  // undefined weight when in == out

  ResBlock() = default;
  ResBlock(int in, int out, int time_width, CounterRng& rng);
  nn::Var<T> operator()(const nn::Var<T>& x, const nn::Var<T>& temb) const;
  void collect(nn::ParamList<T>& out) const;
};

/// UNet-style epsilon predictor over concat(y_t, condition). The condition is average-pooled
/// and concatenated again at the input of every coarser encoder level.
template <class T>
class Denoiser {
 public:
  Denoiser(const DenoiserConfig& cfg, std::uint64_t seed);

  /// y_t (B, 1, H, W), condition (B, C, H, W), one time step per batch item, embedded
  /// against `steps` (the training schedule length). Returns (B, 1, H, W).
  nn::Var<T> forward(const nn::Var<T>& y_t, const nn::Var<T>& condition, std::span<const int> t, int steps) const;

  nn::ParamList<T> parameters() const;
  const DenoiserConfig& config() const { return cfg_; }

 private:
  DenoiserConfig cfg_;
  nn::Conv2d<T> in_conv_;
  nn::Dense<T> time1_;
  nn::Dense<T> time2_;
  std::vector<ResBlock<T>> down_blocks_;
  std::vector<nn::Conv2d<T>> downsample_;
  ResBlock<T> mid_;
  std::vector<ResBlock<T>> up_blocks_;  // indexed by level
  std::vector<nn::Conv2d<T>> upsample_;
  nn::GroupNorm<T> out_norm_;
  nn::Conv2d<T> out_conv_;
};

/// Epsilon model: (y_t, condition, per-item model steps) -> eps prediction.
template <class T>
using EpsModel = std::function<nn::Var<T>(const nn::Var<T>&, const nn::Var<T>&, std::span<const int>)>;

/// MSE(eps, model(forward_sample(y0, t_b, eps), condition, t_b)) over a batch with per-item steps.
template <class T>
nn::Var<T> diffusion_loss_step(const nn::Tensor<T>& y0, const nn::Tensor<T>& condition, std::span<const int> t,
                               const nn::Tensor<T>& eps, const EpsModel<T>& model, const NoiseSchedule& s);

/// Ancestral sampling for a (B, C, H, W) condition. Item b uses only `seeds[b]`, so results
/// do not depend on how items are grouped into model calls. Output is clamped to [lo, hi]; with
/// `clip_x0` every step goes through reverse_step_clipped on the same range.
nn::Tensor<float> sample(const nn::Tensor<float>& condition, const EpsModel<float>& model, const NoiseSchedule& s,
                         std::span<const std::uint64_t> seeds, float lo = -1.0f, float hi = 1.0f, bool clip_x0 = false);

/// EpsModel bound to a frozen denoiser. The schedule supplies the step embedding length and,
/// for an anchored denoiser, alpha_bar of each model step.
EpsModel<float> bind(const Denoiser<float>& net, const NoiseSchedule& s);

struct ScheduleConfig {
  int T = 200;
  double beta_min = 1e-4;
  double beta_max = 0.02;
  int sample_steps = 0;  // 0 samples with every training step
  bool clip_x0 = false;

  NoiseSchedule training() const { return build_schedule(T, beta_min, beta_max); }
  NoiseSchedule sampling() const;
  nlohmann::ordered_json to_json() const;
  static ScheduleConfig from_json(const nlohmann::json& j);
};

struct DiffusionTrainOptions {
  int batch = 8;
  double lr = 1e-4;
  double ema = 0.0;  // decay of the weight average saved in the bundle; 0 saves the last weights
};

/// One training example: model-space target and its condition stack, both (1, ., h, w).
struct DiffusionExample {
  nn::Tensor<float> target;
  nn::Tensor<float> condition;
};

/// Model-space target and condition for each patch. The estimate comes from the frozen TM
/// applied to the patch; `tm` may be null only for SatelliteOnly.
std::vector<DiffusionExample> make_examples(std::span<const Patch> patches, ConditionMode mode,
                                            const nn::ModelBundle* tm, const NormSpec& norm);

/// Adam on the epsilon objective. Deterministic given `seed`.
TrainResult train_diffusion(std::span<const DiffusionExample> examples, const DenoiserConfig& cfg,
                            const ScheduleConfig& schedule, const NormSpec& norm, long steps, std::uint64_t seed,
                            const DiffusionTrainOptions& opts = {});

nn::ModelBundle make_denoiser_bundle(const Denoiser<float>& net, const ScheduleConfig& schedule, const NormSpec& norm,
                                     nn::TrainingMeta meta);
Denoiser<float> denoiser_from_bundle(const nn::ModelBundle& bundle);
ScheduleConfig schedule_from_bundle(const nn::ModelBundle& bundle);

}  // namespace diffsr
