#include "diffsr/diffusion.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <memory>

#include "diffsr/nn/adam.hpp"
#include "diffsr/nn/time_embed.hpp"
#include "diffsr/parallel.hpp"
#include "diffsr/tensors.hpp"

namespace diffsr {

using nn::Tensor;
using nn::Var;

std::string_view to_string(ConditionMode mode) {
  switch (mode) {
    case ConditionMode::SatelliteOnly: return "satellite";
    case ConditionMode::EstimateOnly: return "estimate";
    case ConditionMode::Both: return "both";
  }
  return "?";
}

ConditionMode mode_from_string(std::string_view name) {
  if (name == "satellite") return ConditionMode::SatelliteOnly;
  if (name == "estimate") return ConditionMode::EstimateOnly;
  if (name == "both") return ConditionMode::Both;
  fail(ErrorKind::InvalidArgument, "unknown condition mode '" + std::string(name) + "' (satellite|estimate|both)");
}

int condition_channels(ConditionMode mode) {
  switch (mode) {
    case ConditionMode::SatelliteOnly: return kSatelliteChannels;
    case ConditionMode::EstimateOnly: return 1;
    case ConditionMode::Both: return kSatelliteChannels + 1;
  }
  return 0;
}

// ---- schedule ----

void NoiseSchedule::check_step(int t) const {
  require(t >= 1 && t <= T, ErrorKind::OutOfRange,
          "time step " + std::to_string(t) + " outside [1, " + std::to_string(T) + "]");
}

NoiseSchedule schedule_from_betas(std::vector<double> betas) {
  require(!betas.empty(), ErrorKind::InvalidArgument, "schedule needs at least one step");
  NoiseSchedule s;
  s.T = static_cast<int>(betas.size());
  s.train_steps = s.T;
  double prod = 1.0;
  for (std::size_t i = 0; i < betas.size(); ++i) {
    const double b = betas[i];
    require(std::isfinite(b) && b >= 0.0 && b < 1.0, ErrorKind::InvalidArgument,
            "beta " + std::to_string(b) + " outside [0, 1)");
    prod *= 1.0 - b;
    s.beta.push_back(b);
    s.alpha.push_back(1.0 - b);
    s.alpha_bar.push_back(prod);
    s.sigma.push_back(std::sqrt(b));
    s.model_t.push_back(static_cast<int>(i) + 1);
  }
  return s;
}

NoiseSchedule build_schedule(int T, double beta_min, double beta_max) {
  require(T >= 1, ErrorKind::InvalidArgument, "schedule length must be at least 1");
  require(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0, ErrorKind::InvalidArgument,
          "need 0 < beta_min <= beta_max < 1");
  std::vector<double> betas(static_cast<std::size_t>(T));
  for (int i = 0; i < T; ++i)
    betas[static_cast<std::size_t>(i)] = T == 1 ? beta_min : beta_min + (beta_max - beta_min) * i / (T - 1);
  return schedule_from_betas(std::move(betas));
}

NoiseSchedule respace(const NoiseSchedule& s, int count) {
  require(count >= 1 && count <= s.T, ErrorKind::InvalidArgument,
          "cannot respace " + std::to_string(s.T) + " steps to " + std::to_string(count));
  std::vector<double> betas;
  std::vector<int> kept;
  double prev = 1.0;
  for (int i = 1; i <= count; ++i) {
    const int tau = static_cast<int>(static_cast<long>(i) * s.T / count);
    const double ab = s.alpha_bar_at(tau);
    betas.push_back(1.0 - ab / prev);
    kept.push_back(s.model_step(tau));
    prev = ab;
  }
  NoiseSchedule out = schedule_from_betas(std::move(betas));
  out.model_t = std::move(kept);
  out.train_steps = s.train_steps;
  return out;
}

template <class T>
Tensor<T> forward_sample(const Tensor<T>& y0, int t, const Tensor<T>& eps, const NoiseSchedule& s) {
  require(y0.shape() == eps.shape(), ErrorKind::ShapeMismatch,
          "forward_sample: y0 " + nn::shape_str(y0.shape()) + " vs eps " + nn::shape_str(eps.shape()));
  const double ab = s.alpha_bar_at(t);
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  Tensor<T> out(y0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(a * y0[i] + b * eps[i]);
  return out;
}

template <class T>
Tensor<T> reverse_step(const Tensor<T>& y_t, int t, const Tensor<T>& eps_pred, const Tensor<T>& z,
                       const NoiseSchedule& s) {
  require(y_t.shape() == eps_pred.shape(), ErrorKind::ShapeMismatch, "reverse_step: eps_pred shape");
  const bool noisy = t > 1;
  require(!noisy || z.shape() == y_t.shape(), ErrorKind::ShapeMismatch, "reverse_step: z shape");
  const double ab = s.alpha_bar_at(t);
  const double inv_sqrt_alpha = 1.0 / std::sqrt(s.alpha_at(t));
  const double coef = ab < 1.0 ? s.beta_at(t) / std::sqrt(1.0 - ab) : 0.0;
  const double sigma = s.sigma_at(t);
  Tensor<T> out(y_t.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    double v = inv_sqrt_alpha * (y_t[i] - coef * eps_pred[i]);
    if (noisy) v += sigma * z[i];
    out[i] = static_cast<T>(v);
  }
  return out;
}

template <class T>
Tensor<T> reverse_step_clipped(const Tensor<T>& y_t, int t, const Tensor<T>& eps_pred, const Tensor<T>& z,
                               const NoiseSchedule& s, double lo, double hi) {
  require(y_t.shape() == eps_pred.shape(), ErrorKind::ShapeMismatch, "reverse_step_clipped: eps_pred shape");
  const bool noisy = t > 1;
  require(!noisy || z.shape() == y_t.shape(), ErrorKind::ShapeMismatch, "reverse_step_clipped: z shape");
  require(lo < hi, ErrorKind::InvalidArgument, "reverse_step_clipped: empty range");
  const double ab = s.alpha_bar_at(t);
  const double ab_prev = noisy ? s.alpha_bar_at(t - 1) : 1.0;
  require(ab < 1.0, ErrorKind::InvalidArgument, "reverse_step_clipped needs beta_t > 0");
  const double c_x0 = s.beta_at(t) * std::sqrt(ab_prev) / (1.0 - ab);
  const double c_y = (1.0 - ab_prev) * std::sqrt(s.alpha_at(t)) / (1.0 - ab);
  const double sigma = s.sigma_at(t);
  const double root_ab = std::sqrt(ab), root_1mab = std::sqrt(1.0 - ab);
  Tensor<T> out(y_t.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x0 = std::clamp((y_t[i] - root_1mab * eps_pred[i]) / root_ab, lo, hi);
    double v = c_x0 * x0 + c_y * y_t[i];
    if (noisy) v += sigma * z[i];
    out[i] = static_cast<T>(v);
  }
  return out;
}

Tensor<float> assemble_condition(ConditionMode mode, const Tensor<float>* satellite, const Tensor<float>* estimate) {
  const bool want_sat = mode != ConditionMode::EstimateOnly;
  const bool want_est = mode != ConditionMode::SatelliteOnly;
  require(!want_sat || satellite, ErrorKind::MissingInput,
          std::string("condition mode '") + std::string(to_string(mode)) + "' needs satellite data");
  require(!want_est || estimate, ErrorKind::MissingInput,
          std::string("condition mode '") + std::string(to_string(mode)) + "' needs a stage-1 estimate");
  const Tensor<float>* ref = want_sat ? satellite : estimate;
  require(ref->ndim() == 4, ErrorKind::ShapeMismatch, "condition inputs must be 4-D");
  const int B = ref->dim(0), H = ref->dim(2), W = ref->dim(3);
  if (want_sat)
    require(satellite->shape() == nn::Shape({B, kSatelliteChannels, H, W}), ErrorKind::ShapeMismatch,
            "satellite condition must be (B, 4, H, W), got " + nn::shape_str(satellite->shape()));
  if (want_est)
    require(estimate->shape() == nn::Shape({B, 1, H, W}), ErrorKind::ShapeMismatch,
            "estimate condition must be (B, 1, H, W), got " + nn::shape_str(estimate->shape()));
  const int C = condition_channels(mode);
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  Tensor<float> out({B, C, H, W});
  for (int b = 0; b < B; ++b) {
    float* dst = out.data() + static_cast<std::size_t>(b) * C * plane;
    if (want_sat) {
      std::copy_n(satellite->data() + static_cast<std::size_t>(b) * kSatelliteChannels * plane,
                  kSatelliteChannels * plane, dst);
      dst += kSatelliteChannels * plane;
    }
    if (want_est) std::copy_n(estimate->data() + static_cast<std::size_t>(b) * plane, plane, dst);
  }
  return out;
}

// ---- denoiser ----

void DenoiserConfig::validate() const {
  require(base_channels >= 1, ErrorKind::InvalidArgument, "base_channels must be positive");
  require(depth >= 1 && depth <= 8, ErrorKind::InvalidArgument, "denoiser depth must be in [1, 8]");
  require(time_dim >= 2 && time_dim % 2 == 0, ErrorKind::InvalidArgument, "time_dim must be even");
}

nlohmann::ordered_json DenoiserConfig::to_json() const {
  return {{"base_channels", base_channels},
          {"depth", depth},
          {"time_dim", time_dim},
          {"mode", std::string(to_string(mode))},
          {"anchor", anchor},
          {"condition_channels", condition_channels()}};
}

DenoiserConfig DenoiserConfig::from_json(const nlohmann::json& j) {
  DenoiserConfig c;
  c.base_channels = j.at("base_channels").get<int>();
  c.depth = j.at("depth").get<int>();
  c.time_dim = j.at("time_dim").get<int>();
  c.mode = mode_from_string(j.at("mode").get<std::string>());
  c.anchor = j.value("anchor", false);
  if (j.contains("condition_channels"))
    require(j.at("condition_channels").get<int>() == c.condition_channels(), ErrorKind::Config,
            "condition_channels does not match mode");
  c.validate();
  return c;
}

template <class T>
ResBlock<T>::ResBlock(int in, int out, int time_width, CounterRng& rng)
    : norm1(nn::default_groups(in), in),
      conv1(in, out, 3, 1, 1, rng),
      time_proj(time_width, out, rng),
      norm2(nn::default_groups(out), out),
      conv2(out, out, 3, 1, 1, rng) {
  if (in != out) skip = nn::Conv2d<T>(in, out, 1, 1, 0, rng);
}

template <class T>
Var<T> ResBlock<T>::operator()(const Var<T>& x, const Var<T>& temb) const {
  Var<T> h = conv1(nn::silu(norm1(x)));
  h = nn::add_channel_bias(h, time_proj(nn::silu(temb)));
  h = conv2(nn::silu(norm2(h)));
  return nn::add(h, skip.weight.defined() ? skip(x) : x);
}

template <class T>
void ResBlock<T>::collect(nn::ParamList<T>& out) const {
  norm1.collect(out);
  conv1.collect(out);
  time_proj.collect(out);
  norm2.collect(out);
  conv2.collect(out);
  if (skip.weight.defined()) skip.collect(out);
}

namespace {

int level_width(const DenoiserConfig& cfg, int level) { return cfg.base_channels << level; }

}  // namespace

template <class T>
Denoiser<T>::Denoiser(const DenoiserConfig& cfg, std::uint64_t seed)
    : cfg_(cfg) {
  cfg_.validate();
  cfg_.anchor = cfg_.anchor && cfg_.mode != ConditionMode::SatelliteOnly;
  CounterRng rng(derive_key(seed, 0xD0E5));
  const int C = cfg_.condition_channels();
  const int E = cfg_.time_dim;
  in_conv_ = nn::Conv2d<T>(1 + C, cfg_.base_channels, 3, 1, 1, rng);
  time1_ = nn::Dense<T>(E, E, rng);
  time2_ = nn::Dense<T>(E, E, rng);
  for (int l = 0; l < cfg_.depth; ++l) {
    const int in = l == 0 ? cfg_.base_channels : level_width(cfg_, l - 1) + C;
    down_blocks_.emplace_back(in, level_width(cfg_, l), E, rng);
    if (l + 1 < cfg_.depth) downsample_.emplace_back(level_width(cfg_, l), level_width(cfg_, l), 3, 2, 1, rng);
  }
  const int bottom = level_width(cfg_, cfg_.depth - 1);
  mid_ = ResBlock<T>(bottom, bottom, E, rng);
  for (int l = 0; l < cfg_.depth; ++l) {
    up_blocks_.emplace_back(2 * level_width(cfg_, l), level_width(cfg_, l), E, rng);
    if (l > 0) upsample_.emplace_back(level_width(cfg_, l), level_width(cfg_, l - 1), 3, 1, 1, rng);
  }
  out_norm_ = nn::GroupNorm<T>(nn::default_groups(cfg_.base_channels), cfg_.base_channels);
  out_conv_ = nn::Conv2d<T>(cfg_.base_channels, 1, 3, 1, 1, rng);
}

template <class T>
Var<T> Denoiser<T>::forward(const Var<T>& y_t, const Var<T>& condition, std::span<const int> t, int steps) const {
  const auto& ys = y_t.shape();
  const auto& cs = condition.shape();
  const int C = cfg_.condition_channels();
  require(ys.size() == 4 && ys[1] == 1, ErrorKind::ShapeMismatch,
          "denoiser input must be (B, 1, H, W), got " + nn::shape_str(ys));
  require(cs == nn::Shape({ys[0], C, ys[2], ys[3]}), ErrorKind::ShapeMismatch,
          "condition " + nn::shape_str(cs) + " does not match y_t " + nn::shape_str(ys) + " with " +
              std::to_string(C) + " channels");
  const int factor = 1 << (cfg_.depth - 1);
  require(ys[2] % factor == 0 && ys[3] % factor == 0, ErrorKind::ShapeMismatch,
          "denoiser input sides must be divisible by " + std::to_string(factor));
  const int B = ys[0];
  require(static_cast<int>(t.size()) == B, ErrorKind::ShapeMismatch, "need one time step per batch item");

  Tensor<T> emb({B, cfg_.time_dim});
  for (int b = 0; b < B; ++b) {
    const auto e = nn::time_embed(t[static_cast<std::size_t>(b)], cfg_.time_dim, steps);
    for (int k = 0; k < cfg_.time_dim; ++k) emb[static_cast<std::size_t>(b) * cfg_.time_dim + k] = static_cast<T>(e[k]);
  }
  const Var<T> temb = time2_(nn::silu(time1_(Var<T>::constant(std::move(emb)))));

  Var<T> h = in_conv_(nn::concat_channels<T>({y_t, condition}));
  Var<T> cond = condition;
  std::vector<Var<T>> skips;
  for (int l = 0; l < cfg_.depth; ++l) {
    if (l > 0) {
      cond = nn::avg_pool2x(cond);
      h = nn::concat_channels<T>({h, cond});
    }
    h = down_blocks_[static_cast<std::size_t>(l)](h, temb);
    skips.push_back(h);
    if (l + 1 < cfg_.depth) h = downsample_[static_cast<std::size_t>(l)](h);
  }
  h = mid_(h, temb);
  for (int l = cfg_.depth - 1; l >= 0; --l) {
    h = up_blocks_[static_cast<std::size_t>(l)](nn::concat_channels<T>({h, skips[static_cast<std::size_t>(l)]}), temb);
    if (l > 0) h = upsample_[static_cast<std::size_t>(l - 1)](nn::upsample_nearest2x(h));
  }
  return out_conv_(nn::silu(out_norm_(h)));
}

template <class T>
nn::ParamList<T> Denoiser<T>::parameters() const {
  nn::ParamList<T> out;
  in_conv_.collect(out);
  time1_.collect(out);
  time2_.collect(out);
  for (const auto& b : down_blocks_) b.collect(out);
  for (const auto& c : downsample_) c.collect(out);
  mid_.collect(out);
  for (const auto& b : up_blocks_) b.collect(out);
  for (const auto& c : upsample_) c.collect(out);
  out_norm_.collect(out);
  out_conv_.collect(out);
  return out;
}

// ---- objective and sampling ----

template <class T>
Var<T> diffusion_loss_step(const Tensor<T>& y0, const Tensor<T>& condition, std::span<const int> t,
                           const Tensor<T>& eps, const EpsModel<T>& model, const NoiseSchedule& s) {
  require(y0.ndim() == 4 && y0.shape() == eps.shape(), ErrorKind::ShapeMismatch, "diffusion_loss_step: y0/eps shapes");
  const int B = y0.dim(0);
  require(static_cast<int>(t.size()) == B, ErrorKind::ShapeMismatch, "need one time step per batch item");
  const std::size_t item = y0.size() / static_cast<std::size_t>(B);
  Tensor<T> y_t(y0.shape());
  std::vector<int> model_t(t.size());
  for (int b = 0; b < B; ++b) {
    const int tb = t[static_cast<std::size_t>(b)];
    const double ab = s.alpha_bar_at(tb);
    const double a = std::sqrt(ab), c = std::sqrt(1.0 - ab);
    const std::size_t off = static_cast<std::size_t>(b) * item;
    for (std::size_t i = off; i < off + item; ++i) y_t[i] = static_cast<T>(a * y0[i] + c * eps[i]);
    model_t[static_cast<std::size_t>(b)] = s.model_step(tb);
  }
  Var<T> pred = model(Var<T>::constant(std::move(y_t)), Var<T>::constant(condition), model_t);
  Var<T> loss = nn::mse(pred, eps);
  require(std::isfinite(static_cast<double>(loss.value()[0])), ErrorKind::NonFinite, "diffusion loss is not finite");
  return loss;
}

Tensor<float> sample(const Tensor<float>& condition, const EpsModel<float>& model, const NoiseSchedule& s,
                     std::span<const std::uint64_t> seeds, float lo, float hi, bool clip_x0) {
  require(condition.ndim() == 4, ErrorKind::ShapeMismatch, "condition must be (B, C, H, W)");
  const int B = condition.dim(0), C = condition.dim(1), H = condition.dim(2), W = condition.dim(3);
  require(static_cast<int>(seeds.size()) == B, ErrorKind::ShapeMismatch, "need one seed per condition item");
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  Tensor<float> out({B, 1, H, W});
  parallel_for(static_cast<std::size_t>(B), [&](std::size_t b) {
    nn::NoGradGuard guard;
    Tensor<float> cond({1, C, H, W});
    std::copy_n(condition.data() + b * C * plane, C * plane, cond.data());
    const Var<float> cond_var = Var<float>::constant(std::move(cond));
    const std::uint64_t key = seeds[b];
    Tensor<float> y({1, 1, H, W});
    CounterRng init(derive_key(key, 0x5EED));
    for (auto& v : y.span()) v = static_cast<float>(init.normal());
    Tensor<float> z({1, 1, H, W});
    for (int t = s.T; t >= 1; --t) {
      const int mt = s.model_step(t);
      const Tensor<float> eps = model(Var<float>::constant(y), cond_var, std::span<const int>(&mt, 1)).value();
      if (t > 1) {
        CounterRng noise(derive_key(derive_key(key, 0x2015E), static_cast<std::uint64_t>(t)));
        for (auto& v : z.span()) v = static_cast<float>(noise.normal());
      }
      y = clip_x0 ? reverse_step_clipped(y, t, eps, z, s, lo, hi) : reverse_step(y, t, eps, z, s);
      for (float v : y.span())
        require(std::isfinite(v), ErrorKind::NonFinite, "sampling produced a non-finite value at t=" + std::to_string(t));
    }
    for (std::size_t i = 0; i < plane; ++i) out[b * plane + i] = std::clamp(y[i], lo, hi);
  });
  return out;
}

EpsModel<float> bind(const Denoiser<float>& net, const NoiseSchedule& s) {
  const int steps = s.train_steps;
  if (!net.config().anchor)
    return [&net, steps](const Var<float>& y, const Var<float>& c, std::span<const int> t) {
      return net.forward(y, c, t, steps);
    };
  std::vector<double> ab(static_cast<std::size_t>(steps) + 1, -1.0);
  for (int i = 1; i <= s.T; ++i) ab[static_cast<std::size_t>(s.model_step(i))] = s.alpha_bar_at(i);
  return [&net, steps, ab = std::move(ab)](const Var<float>& y, const Var<float>& c, std::span<const int> t) {
    const Tensor<float>& yv = y.value();
    const Tensor<float>& cv = c.value();
    const int B = yv.dim(0), C = cv.dim(1);
    const std::size_t plane = yv.size() / static_cast<std::size_t>(B);
    Tensor<float> skip(yv.shape());
    for (int b = 0; b < B; ++b) {
      const int tb = t[static_cast<std::size_t>(b)];
      require(tb >= 1 && tb <= steps && ab[static_cast<std::size_t>(tb)] >= 0.0, ErrorKind::InvalidArgument,
              "anchor: model step outside the schedule");
      const double a = ab[static_cast<std::size_t>(tb)];
      const double k = std::sqrt(1.0 - a), m = std::sqrt(a);
      const float* est = cv.data() + (static_cast<std::size_t>(b) * C + (C - 1)) * plane;
      const std::size_t off = static_cast<std::size_t>(b) * plane;
      for (std::size_t i = 0; i < plane; ++i)
        skip[off + i] = static_cast<float>(k * (yv[off + i] - m * est[i]));
    }
    return nn::add(net.forward(y, c, t, steps), Var<float>::constant(std::move(skip)));
  };
}

// ---- training ----

NoiseSchedule ScheduleConfig::sampling() const {
  const NoiseSchedule full = training();
  return sample_steps > 0 && sample_steps < T ? respace(full, sample_steps) : full;
}

nlohmann::ordered_json ScheduleConfig::to_json() const {
  return {{"T", T},
          {"beta_min", beta_min},
          {"beta_max", beta_max},
          {"sample_steps", sample_steps},
          {"clip_x0", clip_x0}};
}

ScheduleConfig ScheduleConfig::from_json(const nlohmann::json& j) {
  ScheduleConfig c;
  c.T = j.at("T").get<int>();
  c.beta_min = j.at("beta_min").get<double>();
  c.beta_max = j.at("beta_max").get<double>();
  c.sample_steps = j.value("sample_steps", 0);
  c.clip_x0 = j.value("clip_x0", false);
  require(c.sample_steps >= 0 && c.sample_steps <= c.T, ErrorKind::Config, "sample_steps must be in [0, T]");
  (void)c.training();
  return c;
}

std::vector<DiffusionExample> make_examples(std::span<const Patch> patches, ConditionMode mode,
                                            const nn::ModelBundle* tm, const NormSpec& norm) {
  const bool want_est = mode != ConditionMode::SatelliteOnly;
  require(!want_est || tm != nullptr, ErrorKind::MissingInput,
          std::string("condition mode '") + std::string(to_string(mode)) + "' requires a trained transform bundle");
  std::unique_ptr<TransformNet<float>> net;
  if (want_est) net = std::make_unique<TransformNet<float>>(transform_from_bundle(*tm));
  std::vector<DiffusionExample> out(patches.size());
  parallel_for(patches.size(), [&](std::size_t i) {
    const Patch& p = patches[i];
    const std::array<const std::array<Field, kSatelliteChannels>*, 1> stack{&p.satellite};
    const Tensor<float> sat = satellite_batch(stack, norm);
    Tensor<float> est;
    if (want_est) est = tm_forward(satellite_batch(stack, tm->norm), *net, tm->norm);
    DiffusionExample ex;
    ex.target = Tensor<float>({1, 1, p.size, p.size});
    write_refl(p.radar, norm, ex.target.data());
    ex.condition = assemble_condition(mode, &sat, want_est ? &est : nullptr);
    out[i] = std::move(ex);
  });
  return out;
}

nn::ModelBundle make_denoiser_bundle(const Denoiser<float>& net, const ScheduleConfig& schedule, const NormSpec& norm,
                                     nn::TrainingMeta meta) {
  nn::ModelBundle b;
  b.kind = "denoiser";
  b.architecture = net.config().to_json();
  b.architecture["schedule"] = schedule.to_json();
  b.norm = norm;
  b.meta = meta;
  for (double w : nn::flatten_parameters(net.parameters())) b.weights.push_back(static_cast<float>(w));
  return b;
}

Denoiser<float> denoiser_from_bundle(const nn::ModelBundle& bundle) {
  require(bundle.kind == "denoiser", ErrorKind::InvalidArgument, "bundle kind '" + bundle.kind + "' is not denoiser");
  Denoiser<float> net(DenoiserConfig::from_json(bundle.architecture), bundle.meta.seed);
  auto params = net.parameters();
  nn::assign_parameters<float, float>(params, bundle.weights);
  return net;
}

ScheduleConfig schedule_from_bundle(const nn::ModelBundle& bundle) {
  return ScheduleConfig::from_json(bundle.architecture.at("schedule"));
}

TrainResult train_diffusion(std::span<const DiffusionExample> examples, const DenoiserConfig& cfg,
                            const ScheduleConfig& schedule, const NormSpec& norm, long steps, std::uint64_t seed,
                            const DiffusionTrainOptions& opts) {
  require(!examples.empty(), ErrorKind::InvalidArgument, "train_diffusion needs at least one example");
  require(steps >= 0 && opts.batch >= 1 && opts.lr > 0.0 && opts.ema >= 0.0 && opts.ema < 1.0,
          ErrorKind::InvalidArgument, "invalid training options");
  cfg.validate();
  const NoiseSchedule s = schedule.training();
  const int C = cfg.condition_channels();
  const nn::Shape tshape = examples[0].target.shape();
  const int H = tshape.at(2), W = tshape.at(3);
  for (const auto& ex : examples) {
    require(ex.target.shape() == tshape, ErrorKind::ShapeMismatch, "all training targets must share one shape");
    require(ex.condition.shape() == nn::Shape({1, C, H, W}), ErrorKind::ShapeMismatch,
            "condition " + nn::shape_str(ex.condition.shape()) + " does not fit a " + std::to_string(C) +
                "-channel denoiser");
  }
  const std::size_t plane = static_cast<std::size_t>(H) * W;

  Denoiser<float> net(cfg, seed);
  auto params = net.parameters();
  nn::Adam<float> opt(params, nn::AdamHyper{opts.lr});
  const EpsModel<float> model = bind(net, s);

  TrainResult result;
  std::vector<double> shadow;
  if (opts.ema > 0.0) shadow = nn::flatten_parameters(params);
  const auto start = std::chrono::steady_clock::now();
  const int B = opts.batch;
  for (long step = 1; step <= steps; ++step) {
    CounterRng rng(derive_key(seed, static_cast<std::uint64_t>(step)));
    Tensor<float> y0({B, 1, H, W});
    Tensor<float> cond({B, C, H, W});
    Tensor<float> eps({B, 1, H, W});
    std::vector<int> t(static_cast<std::size_t>(B));
    for (int b = 0; b < B; ++b) {
      const auto& ex = examples[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(examples.size()) - 1))];
      std::copy_n(ex.target.data(), plane, y0.data() + b * plane);
      std::copy_n(ex.condition.data(), C * plane, cond.data() + b * C * plane);
      t[static_cast<std::size_t>(b)] = static_cast<int>(rng.uniform_int(1, s.T));
    }
    for (auto& v : eps.span()) v = static_cast<float>(rng.normal());
    opt.zero_grad();
    double value = 0.0;
    try {
      Var<float> loss = diffusion_loss_step(y0, cond, t, eps, model, s);
      value = loss.value()[0];
      loss.backward();
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::NonFinite) throw;
      fail(ErrorKind::Divergence, "diffusion training diverged at step " + std::to_string(step));
    }
    opt.step();
    if (!shadow.empty()) {
      std::size_t k = 0;
      for (const auto& p : params)
        for (float v : p.value().span()) {
          shadow[k] = opts.ema * shadow[k] + (1.0 - opts.ema) * v;
          ++k;
        }
    }
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    result.log.push_back(LossRecord{step, value, ms});
  }
  if (!shadow.empty()) nn::assign_parameters<float, double>(params, shadow);
  result.bundle = make_denoiser_bundle(net, schedule, norm, nn::TrainingMeta{steps, seed});
  return result;
}

template Tensor<float> reverse_step_clipped(const Tensor<float>&, int, const Tensor<float>&, const Tensor<float>&,
                                           const NoiseSchedule&, double, double);
template Tensor<double> reverse_step_clipped(const Tensor<double>&, int, const Tensor<double>&, const Tensor<double>&,
                                            const NoiseSchedule&, double, double);
template Tensor<float> forward_sample(const Tensor<float>&, int, const Tensor<float>&, const NoiseSchedule&);
template Tensor<double> forward_sample(const Tensor<double>&, int, const Tensor<double>&, const NoiseSchedule&);
template Tensor<float> reverse_step(const Tensor<float>&, int, const Tensor<float>&, const Tensor<float>&,
                                    const NoiseSchedule&);
template Tensor<double> reverse_step(const Tensor<double>&, int, const Tensor<double>&, const Tensor<double>&,
                                     const NoiseSchedule&);
template struct ResBlock<float>;
template struct ResBlock<double>;
template class Denoiser<float>;
template class Denoiser<double>;
template Var<float> diffusion_loss_step(const Tensor<float>&, const Tensor<float>&, std::span<const int>,
                                        const Tensor<float>&, const EpsModel<float>&, const NoiseSchedule&);
template Var<double> diffusion_loss_step(const Tensor<double>&, const Tensor<double>&, std::span<const int>,
                                         const Tensor<double>&, const EpsModel<double>&, const NoiseSchedule&);

}  // namespace diffsr
