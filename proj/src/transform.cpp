#include "diffsr/transform.hpp"

#include <chrono>
#include <cmath>

#include "diffsr/nn/adam.hpp"
#include "diffsr/tensors.hpp"

namespace diffsr {

using nn::Tensor;
using nn::Var;

void TransformConfig::validate() const {
  require(embed_patch >= 1, ErrorKind::InvalidArgument, "embed_patch must be positive");
  require(embed_dim >= 1 && heads >= 1 && embed_dim % heads == 0, ErrorKind::InvalidArgument,
          "embed_dim must be divisible by heads");
  require(depth >= 0, ErrorKind::InvalidArgument, "depth must be non-negative");
  require(mlp_ratio > 0.0, ErrorKind::InvalidArgument, "mlp_ratio must be positive");
  require(w1 >= 0.0 && std::isfinite(w0), ErrorKind::InvalidArgument, "loss weights need finite w0 and w1 >= 0");
  require(lr > 0.0, ErrorKind::InvalidArgument, "learning rate must be positive");
  require(batch >= 1, ErrorKind::InvalidArgument, "batch must be positive");
  require(image_size >= embed_patch && image_size % embed_patch == 0, ErrorKind::InvalidArgument,
          "embed_patch must divide image_size");
}

void TransformConfig::validate_input(int rows, int cols) const {
  require(rows % embed_patch == 0 && cols % embed_patch == 0, ErrorKind::ShapeMismatch,
          "input " + std::to_string(rows) + "x" + std::to_string(cols) + " is not divisible by embed_patch " +
              std::to_string(embed_patch));
}

nlohmann::ordered_json TransformConfig::to_json() const {
  return {{"embed_patch", embed_patch}, {"embed_dim", embed_dim}, {"depth", depth},   {"heads", heads},
          {"mlp_ratio", mlp_ratio},     {"w0", w0},               {"w1", w1},         {"lr", lr},
          {"image_size", image_size},   {"batch", batch}};
}

TransformConfig TransformConfig::from_json(const nlohmann::json& j) {
  TransformConfig c;
  c.embed_patch = j.at("embed_patch").get<int>();
  c.embed_dim = j.at("embed_dim").get<int>();
  c.depth = j.at("depth").get<int>();
  c.heads = j.at("heads").get<int>();
  c.mlp_ratio = j.at("mlp_ratio").get<double>();
  c.w0 = j.at("w0").get<double>();
  c.w1 = j.at("w1").get<double>();
  c.lr = j.at("lr").get<double>();
  c.image_size = j.at("image_size").get<int>();
  c.batch = j.at("batch").get<int>();
  c.validate();
  return c;
}

template <class T>
TransformerBlock<T>::TransformerBlock(int dim, int heads, int hidden, CounterRng& rng)
    : norm1(dim), attn(dim, heads, rng), norm2(dim), fc1(dim, hidden, rng), fc2(hidden, dim, rng) {}

template <class T>
Var<T> TransformerBlock<T>::operator()(const Var<T>& x) const {
  Var<T> h = nn::add(x, attn(norm1(x)));
  return nn::add(h, fc2(nn::gelu(fc1(norm2(h)))));
}

template <class T>
void TransformerBlock<T>::collect(nn::ParamList<T>& out) const {
  norm1.collect(out);
  attn.collect(out);
  norm2.collect(out);
  fc1.collect(out);
  fc2.collect(out);
}

template <class T>
TransformNet<T>::TransformNet(const TransformConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  CounterRng rng(derive_key(seed, 0x7A11));
  const int p = cfg_.embed_patch;
  const int D = cfg_.embed_dim;
  embed_ = nn::Dense<T>(kSatelliteChannels * p * p, D, rng);
  const int grid = cfg_.grid_side();
  pos_ = Var<T>::parameter(nn::normal_tensor<T>({grid * grid, D}, 0.02, rng));
  const int hidden = std::max(1, static_cast<int>(std::lround(cfg_.mlp_ratio * D)));
  for (int i = 0; i < cfg_.depth; ++i) blocks_.emplace_back(D, cfg_.heads, hidden, rng);
  norm_ = nn::LayerNorm<T>(D);
  head_ = nn::Dense<T>(D, p * p, rng);
}

template <class T>
Var<T> TransformNet<T>::forward(const Var<T>& satellite) const {
  require(satellite.value().ndim() == 4 && satellite.value().dim(1) == kSatelliteChannels, ErrorKind::ShapeMismatch,
          "transform input must be (B, 4, H, W), got " + nn::shape_str(satellite.shape()));
  const int H = satellite.value().dim(2), W = satellite.value().dim(3);
  cfg_.validate_input(H, W);
  const int p = cfg_.embed_patch;
  const int grid = cfg_.grid_side();
  Var<T> x = embed_(nn::image_to_tokens(satellite, p));
  x = nn::add_rows(x, nn::resize_grid(pos_, grid, grid, H / p, W / p));
  for (const auto& block : blocks_) x = block(x);
  return nn::tokens_to_image(head_(norm_(x)), 1, H, W, p);
}

template <class T>
nn::ParamList<T> TransformNet<T>::parameters() const {
  nn::ParamList<T> out;
  embed_.collect(out);
  out.push_back(pos_);
  for (const auto& block : blocks_) block.collect(out);
  norm_.collect(out);
  head_.collect(out);
  return out;
}

template <class T>
Var<T> weighted_loss(const Var<T>& pred, const Tensor<T>& target, double w0, double w1,
                     std::span<const std::uint8_t> mask) {
  require(pred.shape() == target.shape(), ErrorKind::ShapeMismatch,
          "weighted_loss: prediction " + nn::shape_str(pred.shape()) + " vs target " + nn::shape_str(target.shape()));
  require(mask.empty() || mask.size() == target.size(), ErrorKind::ShapeMismatch, "weighted_loss: mask size");
  const std::size_t n = target.size();
  Tensor<T> coeff(target.shape());  // w_i / m on valid pixels, 0 elsewhere
  std::size_t m = 0;
  for (std::size_t i = 0; i < n; ++i) m += (mask.empty() || mask[i]) ? 1 : 0;
  require(m > 0, ErrorKind::EmptyMask, "weighted_loss: no valid pixels");
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask.empty() && !mask[i]) continue;
    const double t = target[i];
    const double w = std::exp(w0 * std::pow(t, w1));
    require(std::isfinite(w), ErrorKind::NonFinite,
            "weighted_loss: non-finite weight for target " + std::to_string(t));
    const double r = static_cast<double>(pred.value()[i]) - t;
    acc += w * r * r;
    coeff[i] = static_cast<T>(w / static_cast<double>(m));
  }
  return nn::make_op<T>(Tensor<T>({1}, static_cast<T>(acc / static_cast<double>(m))), {pred},
                        [coeff, target](nn::Node<T>& node) {
                          const T g0 = node.grad[0];
                          const T* p = node.inputs[0]->value.data();
                          T* g = node.inputs[0]->grad_buffer().data();
                          for (std::size_t i = 0; i < coeff.size(); ++i)
                            g[i] += g0 * T{2} * coeff[i] * (p[i] - target[i]);
                        });
}

Tensor<float> tm_forward(const Tensor<float>& satellite, const TransformNet<float>& net, const NormSpec& norm) {
  nn::NoGradGuard guard;
  Tensor<float> out = net.forward(Var<float>::constant(satellite)).value();
  const auto lo = static_cast<float>(norm.model_lo);
  const auto hi = static_cast<float>(norm.model_hi);
  for (std::size_t i = 0; i < out.size(); ++i) {
    require(std::isfinite(out[i]), ErrorKind::NonFinite, "transform produced a non-finite value at " + std::to_string(i));
    out[i] = std::clamp(out[i], lo, hi);
  }
  return out;
}

RadarEstimate estimate(const std::array<Field, kSatelliteChannels>& satellite, std::span<const std::uint8_t> mask,
                       const TransformNet<float>& net, const nn::ModelBundle& bundle) {
  const std::array<const std::array<Field, kSatelliteChannels>*, 1> stacks{&satellite};
  const Tensor<float> y = tm_forward(satellite_batch(stacks, bundle.norm), net, bundle.norm);
  return RadarEstimate{plane_to_field(y, 0, 0, mask), bundle.id()};
}

RadarEstimate estimate_scene(const Scene& scene, const TransformNet<float>& net, const nn::ModelBundle& bundle) {
  return estimate(scene.satellite, scene.radar.mask(), net, bundle);
}

nn::ModelBundle make_transform_bundle(const TransformNet<float>& net, const NormSpec& norm, nn::TrainingMeta meta) {
  nn::ModelBundle b;
  b.kind = "transform";
  b.architecture = net.config().to_json();
  b.norm = norm;
  b.meta = meta;
  for (double w : nn::flatten_parameters(net.parameters())) b.weights.push_back(static_cast<float>(w));
  return b;
}

TransformNet<float> transform_from_bundle(const nn::ModelBundle& bundle) {
  require(bundle.kind == "transform", ErrorKind::InvalidArgument, "bundle kind '" + bundle.kind + "' is not transform");
  TransformNet<float> net(TransformConfig::from_json(bundle.architecture), bundle.meta.seed);
  auto params = net.parameters();
  nn::assign_parameters<float, float>(params, bundle.weights);
  return net;
}

TrainResult train_tm(std::span<const Scene> scenes, const TransformConfig& cfg, const NormSpec& norm, long steps,
                     std::uint64_t seed) {
  require(!scenes.empty(), ErrorKind::InvalidArgument, "train_tm needs at least one scene");
  require(steps >= 0, ErrorKind::InvalidArgument, "steps must be non-negative");
  cfg.validate();
  norm.validate();
  const int H = scenes[0].rows(), W = scenes[0].cols();
  cfg.validate_input(H, W);
  const std::size_t plane = static_cast<std::size_t>(H) * W;

  // Training data is normalized once; weight-space targets are (dBZ - min)/(max - min).
  std::vector<float> inputs(scenes.size() * kSatelliteChannels * plane);
  std::vector<float> targets(scenes.size() * plane);
  std::vector<std::uint8_t> masks(scenes.size() * plane);
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    const Scene& sc = scenes[s];
    sc.validate();
    require(sc.rows() == H && sc.cols() == W, ErrorKind::ShapeMismatch, "all training scenes must share one shape");
    write_satellite(sc.satellite, norm, inputs.data() + s * kSatelliteChannels * plane);
    for (std::size_t i = 0; i < plane; ++i) {
      targets[s * plane + i] =
          static_cast<float>((std::clamp<double>(sc.radar.values()[i], norm.dbz_min, norm.dbz_max) - norm.dbz_min) /
                             (norm.dbz_max - norm.dbz_min));
      masks[s * plane + i] = sc.radar.mask()[i];
    }
  }

  TransformNet<float> net(cfg, seed);
  auto params = net.parameters();
  nn::Adam<float> opt(params, nn::AdamHyper{cfg.lr});
  const auto to_unit = static_cast<float>(1.0 / (norm.model_hi - norm.model_lo));
  const auto unit_offset = static_cast<float>(-norm.model_lo / (norm.model_hi - norm.model_lo));

  TrainResult result;
  const auto start = std::chrono::steady_clock::now();
  const int B = cfg.batch;
  for (long step = 1; step <= steps; ++step) {
    CounterRng rng(derive_key(seed, static_cast<std::uint64_t>(step)));
    Tensor<float> x({B, kSatelliteChannels, H, W});
    Tensor<float> t({B, 1, H, W});
    std::vector<std::uint8_t> m(static_cast<std::size_t>(B) * plane);
    for (int b = 0; b < B; ++b) {
      const auto s = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(scenes.size()) - 1));
      std::copy_n(inputs.data() + s * kSatelliteChannels * plane, kSatelliteChannels * plane,
                  x.data() + b * kSatelliteChannels * plane);
      std::copy_n(targets.data() + s * plane, plane, t.data() + b * plane);
      std::copy_n(masks.data() + s * plane, plane, m.data() + b * plane);
    }
    opt.zero_grad();
    Var<float> pred_unit = nn::affine(net.forward(Var<float>::constant(std::move(x))), to_unit, unit_offset);
    Var<float> loss = weighted_loss(pred_unit, t, cfg.w0, cfg.w1, m);
    const double value = loss.value()[0];
    if (!std::isfinite(value))
      fail(ErrorKind::Divergence, "transform training diverged at step " + std::to_string(step));
    loss.backward();
    opt.step();
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    result.log.push_back(LossRecord{step, value, ms});
  }
  result.bundle = make_transform_bundle(net, norm, nn::TrainingMeta{steps, seed});
  return result;
}

template struct TransformerBlock<float>;
template struct TransformerBlock<double>;
template class TransformNet<float>;
template class TransformNet<double>;
template Var<float> weighted_loss(const Var<float>&, const Tensor<float>&, double, double, std::span<const std::uint8_t>);
template Var<double> weighted_loss(const Var<double>&, const Tensor<double>&, double, double,
                                   std::span<const std::uint8_t>);

}  // namespace diffsr
