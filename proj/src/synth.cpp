#include "diffsr/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "diffsr/error.hpp"
#include "diffsr/rng.hpp"

namespace diffsr {

void StormParams::validate() const {
  require(n_cells_min >= 0 && n_cells_min <= n_cells_max, ErrorKind::InvalidArgument, "bad cell count range");
  require(n_cells_override >= -1, ErrorKind::InvalidArgument, "n_cells_override must be >= -1");
  require(amp_min >= 0.0 && amp_min <= amp_max, ErrorKind::InvalidArgument, "bad cell amplitude range");
  require(sigma_min > 0.0 && sigma_min <= sigma_max, ErrorKind::InvalidArgument, "bad cell sigma range");
  require(background_max >= 0.0, ErrorKind::InvalidArgument, "background_max must be non-negative");
  require(texture >= 0.0 && texture_sigma >= 0.0, ErrorKind::InvalidArgument, "texture settings must be non-negative");
  for (double sd : noise_sd) require(sd >= 0.0, ErrorKind::InvalidArgument, "noise_sd must be non-negative");
  require(blur_sigma[0] < blur_sigma[1] && blur_sigma[1] < blur_sigma[2], ErrorKind::InvalidArgument,
          "blur sigmas must be strictly increasing");
  require(flash_scale > 0.0, ErrorKind::InvalidArgument, "flash_scale must be positive");
}

nlohmann::ordered_json StormParams::to_json() const {
  return {{"n_cells_min", n_cells_min},
          {"n_cells_max", n_cells_max},
          {"n_cells_override", n_cells_override},
          {"amp_min", amp_min},
          {"amp_max", amp_max},
          {"sigma_min", sigma_min},
          {"sigma_max", sigma_max},
          {"background_max", background_max},
          {"texture", texture},
          {"texture_sigma", texture_sigma},
          {"bt_base", bt_base},
          {"bt_slope", bt_slope},
          {"noise_sd", noise_sd},
          {"blur_sigma", blur_sigma},
          {"lightning_threshold", lightning_threshold},
          {"flash_scale", flash_scale},
          {"seed", seed}};
}

StormParams StormParams::from_json(const nlohmann::json& j) {
  StormParams p;
  p.n_cells_min = j.at("n_cells_min").get<int>();
  p.n_cells_max = j.at("n_cells_max").get<int>();
  p.n_cells_override = j.at("n_cells_override").get<int>();
  p.amp_min = j.at("amp_min").get<double>();
  p.amp_max = j.at("amp_max").get<double>();
  p.sigma_min = j.at("sigma_min").get<double>();
  p.sigma_max = j.at("sigma_max").get<double>();
  p.background_max = j.at("background_max").get<double>();
  p.texture = j.at("texture").get<double>();
  p.texture_sigma = j.at("texture_sigma").get<double>();
  p.bt_base = j.at("bt_base").get<double>();
  p.bt_slope = j.at("bt_slope").get<double>();
  p.noise_sd = j.at("noise_sd").get<std::array<double, 3>>();
  p.blur_sigma = j.at("blur_sigma").get<std::array<double, 3>>();
  p.lightning_threshold = j.at("lightning_threshold").get<double>();
  p.flash_scale = j.at("flash_scale").get<double>();
  p.seed = j.at("seed").get<std::uint64_t>();
  p.validate();
  return p;
}

namespace {

int mirror(int i, int n) {
  while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
  return i;
}

std::vector<double> normals(std::uint64_t key, std::size_t n) {
  CounterRng rng(key);
  std::vector<double> out(n);
  for (auto& v : out) v = rng.normal();
  return out;
}

}  // namespace

std::vector<double> gaussian_blur(std::span<const double> img, int rows, int cols, double sigma) {
  require(img.size() == static_cast<std::size_t>(rows) * cols, ErrorKind::ShapeMismatch, "blur: size mismatch");
  std::vector<double> out(img.begin(), img.end());
  if (sigma <= 0.0) return out;
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) total += k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= total;
  std::vector<double> tmp(out.size());
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i)
        acc += k[static_cast<std::size_t>(i + radius)] * img[static_cast<std::size_t>(r) * cols + mirror(c + i, cols)];
      tmp[static_cast<std::size_t>(r) * cols + c] = acc;
    }
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i)
        acc += k[static_cast<std::size_t>(i + radius)] * tmp[static_cast<std::size_t>(mirror(r + i, rows)) * cols + c];
      out[static_cast<std::size_t>(r) * cols + c] = acc;
    }
  return out;
}

Scene gen_scene(const StormParams& params, int rows, int cols, const std::string& id) {
  params.validate();
  require(rows >= 32 && cols >= 32, ErrorKind::InvalidArgument,
          "synthetic scenes need at least 32x32 pixels, got " + std::to_string(rows) + "x" + std::to_string(cols));
  const std::size_t n = static_cast<std::size_t>(rows) * cols;
  const std::uint64_t key = params.seed;

  // Convective cells.
  CounterRng cell_rng(derive_key(key, 1));
  const int n_cells = params.n_cells_override >= 0
                          ? params.n_cells_override
                          : static_cast<int>(cell_rng.uniform_int(params.n_cells_min, params.n_cells_max));
  std::vector<double> core(n, 0.0);
  for (int i = 0; i < n_cells; ++i) {
    const double cy = cell_rng.uniform(0.0, rows), cx = cell_rng.uniform(0.0, cols);
    const double amp = cell_rng.uniform(params.amp_min, params.amp_max);
    const double sa = cell_rng.uniform(params.sigma_min, params.sigma_max);
    const double sb = sa * cell_rng.uniform(0.4, 1.0);
    const double theta = cell_rng.uniform(0.0, std::numbers::pi);
    const double ct = std::cos(theta), st = std::sin(theta);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) {
        const double dy = r + 0.5 - cy, dx = c + 0.5 - cx;
        const double u = ct * dx + st * dy, v = -st * dx + ct * dy;
        core[static_cast<std::size_t>(r) * cols + c] += amp * std::exp(-0.5 * (u * u / (sa * sa) + v * v / (sb * sb)));
      }
  }

  // Fine texture, unit variance, modulating the cells.
  std::vector<double> tex = gaussian_blur(normals(derive_key(key, 2), n), rows, cols, params.texture_sigma);
  double ss = 0.0;
  for (double v : tex) ss += v * v;
  const double tex_sd = std::sqrt(ss / static_cast<double>(n));
  if (tex_sd > 0.0)
    for (auto& v : tex) v /= tex_sd;

  // Smooth background in [0, level].
  CounterRng bg_rng(derive_key(key, 3));
  const double level = bg_rng.uniform(0.0, params.background_max);
  std::vector<double> bg = gaussian_blur(normals(derive_key(key, 4), n), rows, cols, 6.0);
  const auto [lo_it, hi_it] = std::minmax_element(bg.begin(), bg.end());
  const double lo = *lo_it, span = *hi_it - *lo_it;

  std::vector<double> radar(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double u = span > 0.0 ? (bg[i] - lo) / span : 0.0;
    radar[i] = std::clamp(core[i] * (1.0 + params.texture * tex[i]) + level * u, 0.0, 60.0);
  }

  Scene scene;
  scene.id = id;
  scene.radar = Field(rows, cols, Units::Dbz, std::vector<float>(radar.begin(), radar.end()));
  for (int k = 0; k < 3; ++k) {
    const auto ku = static_cast<std::size_t>(k);
    const std::vector<double> blurred = gaussian_blur(radar, rows, cols, params.blur_sigma[ku]);
    CounterRng noise(derive_key(key, 10 + static_cast<std::uint64_t>(k)));
    const double base = params.bt_base + kBtBaseOffset[ku];
    const double slope = params.bt_slope * kBtSlopeFactor[ku];
    std::vector<float> bt(n);
    for (std::size_t i = 0; i < n; ++i)
      bt[i] = static_cast<float>(std::clamp(base + slope * blurred[i] + params.noise_sd[ku] * noise.normal(), kBtMin, kBtMax));
    scene.satellite[ku] = Field(rows, cols, Units::BrightnessK, std::move(bt));
  }
  const std::vector<double> smooth = gaussian_blur(radar, rows, cols, 2.0);
  CounterRng flash(derive_key(key, 20));
  std::vector<float> glm(n, 0.0f);
  for (std::size_t i = 0; i < n; ++i) {
    const bool strike = flash.bernoulli(0.5);
    if (smooth[i] > params.lightning_threshold && strike) glm[i] = static_cast<float>(params.flash_scale);
  }
  scene.satellite[3] = Field(rows, cols, Units::FlashDensity, std::move(glm));
  return scene;
}

std::string scene_id(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%05d", index);
  return buf;
}

std::vector<Scene> gen_dataset(int n, int rows, int cols, std::uint64_t master_seed, StormParams params) {
  require(n >= 1, ErrorKind::InvalidArgument, "dataset size must be at least 1");
  std::vector<Scene> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    params.seed = master_seed + static_cast<std::uint64_t>(i);
    out.push_back(gen_scene(params, rows, cols, scene_id(i)));
  }
  return out;
}

}  // namespace diffsr
