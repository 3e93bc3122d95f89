#include "diffsr/config.hpp"

#include <array>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <toml.hpp>

#include "diffsr/error.hpp"

namespace fs = std::filesystem;

namespace diffsr {

namespace {

[[noreturn]] void config_error(const std::string& where, const std::string& what) {
  fail(ErrorKind::Config, "config " + where + ": " + what);
}

class Section {
 public:
  Section(const toml::table* table, std::string path) : table_(table), path_(std::move(path)) {}

  bool present() const { return table_ != nullptr; }

  Section sub(const std::string& key) {
    used_.insert(key);
    const toml::node* n = node(key);
    if (!n) return Section(nullptr, where(key));
    if (!n->is_table()) config_error(where(key), "expected a table");
    return Section(n->as_table(), where(key));
  }

  template <class T>
  void get(const std::string& key, T& dst) {
    used_.insert(key);
    const toml::node* n = node(key);
    if (n) convert(*n, key, dst);
  }

  /// Rejects keys that no get()/sub() call asked for.
  void finish() const {
    if (!table_) return;
    for (auto&& [k, v] : *table_) {
      (void)v;
      const std::string key(k.str());
      if (!used_.count(key)) config_error(where(key), "unknown key");
    }
  }

 private:
  const toml::node* node(const std::string& key) const { return table_ ? table_->get(key) : nullptr; }
  std::string where(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void convert(const toml::node& n, const std::string& key, double& dst) {
    auto v = n.value<double>();
    if (!v || !(n.is_floating_point() || n.is_integer())) config_error(where(key), "expected a number");
    dst = *v;
  }
  void convert(const toml::node& n, const std::string& key, long& dst) {
    if (!n.is_integer()) config_error(where(key), "expected an integer");
    dst = static_cast<long>(*n.value<std::int64_t>());
  }
  void convert(const toml::node& n, const std::string& key, int& dst) {
    long v = 0;
    convert(n, key, v);
    if (v < INT32_MIN || v > INT32_MAX) config_error(where(key), "integer out of range");
    dst = static_cast<int>(v);
  }
  void convert(const toml::node& n, const std::string& key, std::uint64_t& dst) {
    long v = 0;
    convert(n, key, v);
    if (v < 0) config_error(where(key), "seed must be non-negative");
    dst = static_cast<std::uint64_t>(v);
  }
  void convert(const toml::node& n, const std::string& key, bool& dst) {
    if (!n.is_boolean()) config_error(where(key), "expected true or false");
    dst = *n.value<bool>();
  }
  void convert(const toml::node& n, const std::string& key, std::string& dst) {
    if (!n.is_string()) config_error(where(key), "expected a string");
    dst = *n.value<std::string>();
  }
  template <class T>
  void convert(const toml::node& n, const std::string& key, std::vector<T>& dst) {
    if (!n.is_array()) config_error(where(key), "expected an array");
    dst.clear();
    for (const auto& item : *n.as_array()) {
      T v{};
      convert(item, key, v);
      dst.push_back(v);
    }
  }
  template <class T, std::size_t N>
  void convert(const toml::node& n, const std::string& key, std::array<T, N>& dst) {
    std::vector<T> v;
    convert(n, key, v);
    if (v.size() != N) config_error(where(key), "expected " + std::to_string(N) + " values");
    std::copy(v.begin(), v.end(), dst.begin());
  }

  const toml::table* table_;
  std::string path_;
  std::set<std::string> used_;
};

// Stage seeds default to distinct streams of the top-level seed, kept within TOML's int64 range.
std::uint64_t stage_seed(std::uint64_t seed, std::uint64_t tag) { return derive_key(seed, tag) >> 1; }

std::string resolve_path(const std::string& p, const std::string& base) {
  if (p.empty()) return p;
  const fs::path path(p);
  return (path.is_absolute() ? path : fs::path(base) / path).lexically_normal().string();
}

}  // namespace

void RunConfig::validate() const {
  require(data.scenes >= 1 && data.train_scenes >= 1 && data.train_scenes <= data.scenes, ErrorKind::Config,
          "data.train_scenes must be in [1, data.scenes]");
  require(data.rows >= 32 && data.cols >= 32, ErrorKind::Config, "data.rows and data.cols must be at least 32");
  storm.validate();
  norm.spec.validate();
  patch.filter.validate();
  require(patch.size >= 1 && patch.stride >= 1 && patch.size <= std::min(data.rows, data.cols), ErrorKind::Config,
          "patch.size must fit the scenes and patch.stride must be positive");
  transform.model.validate();
  require(transform.steps >= 0 && diffusion.steps >= 0, ErrorKind::Config, "steps must be non-negative");
  diffusion.model.validate();
  (void)diffusion.schedule.training();
  require(diffusion.schedule.sample_steps >= 0 && diffusion.schedule.sample_steps <= diffusion.schedule.T,
          ErrorKind::Config, "diffusion.sample_steps must be in [0, T]");
  require(diffusion.train.batch >= 1 && diffusion.train.lr > 0.0, ErrorKind::Config, "bad diffusion batch or lr");
  require(diffusion.train.ema >= 0.0 && diffusion.train.ema < 1.0, ErrorKind::Config, "diffusion.ema must be in [0, 1)");
  require(sample.stride >= 1, ErrorKind::Config, "sample.stride must be positive");
  metrics.validate();
}

RunConfig parse_config(const std::string& text, const std::string& base_dir, const std::uint64_t* seed_override) {
  toml::table root;
  try {
    root = toml::parse(text);
  } catch (const toml::parse_error& e) {
    std::ostringstream msg;
    msg << e.description() << " at line " << e.source().begin.line;
    fail(ErrorKind::Config, "config is not valid TOML: " + msg.str());
  }
  RunConfig c;
  Section top(&root, "");
  top.get("seed", c.seed);
  const auto seed_defaults = [&c] {
    c.data.seed = c.seed;
    c.transform.seed = stage_seed(c.seed, 0x7A);
    c.diffusion.seed = stage_seed(c.seed, 0xD1);
    c.sample.seed = stage_seed(c.seed, 0x5A);
  };
  seed_defaults();

  {
    Section s = top.sub("data");
    s.get("scenes", c.data.scenes);
    s.get("rows", c.data.rows);
    s.get("cols", c.data.cols);
    s.get("train_scenes", c.data.train_scenes);
    s.get("seed", c.data.seed);
    s.finish();
  }
  {
    Section s = top.sub("storm");
    StormParams& p = c.storm;
    s.get("n_cells_min", p.n_cells_min);
    s.get("n_cells_max", p.n_cells_max);
    s.get("n_cells_override", p.n_cells_override);
    s.get("amp_min", p.amp_min);
    s.get("amp_max", p.amp_max);
    s.get("sigma_min", p.sigma_min);
    s.get("sigma_max", p.sigma_max);
    s.get("background_max", p.background_max);
    s.get("texture", p.texture);
    s.get("texture_sigma", p.texture_sigma);
    s.get("bt_base", p.bt_base);
    s.get("bt_slope", p.bt_slope);
    s.get("noise_sd", p.noise_sd);
    s.get("blur_sigma", p.blur_sigma);
    s.get("lightning_threshold", p.lightning_threshold);
    s.get("flash_scale", p.flash_scale);
    s.finish();
  }
  {
    Section s = top.sub("norm");
    NormSpec& n = c.norm.spec;
    s.get("dbz_min", n.dbz_min);
    s.get("dbz_max", n.dbz_max);
    s.get("model_lo", n.model_lo);
    s.get("model_hi", n.model_hi);
    s.get("fit_channels", c.norm.fit_channels);
    std::array<double, kSatelliteChannels> offsets{}, scales{};
    for (int k = 0; k < kSatelliteChannels; ++k) {
      offsets[static_cast<std::size_t>(k)] = n.channels[static_cast<std::size_t>(k)].offset;
      scales[static_cast<std::size_t>(k)] = n.channels[static_cast<std::size_t>(k)].scale;
    }
    s.get("channel_offset", offsets);
    s.get("channel_scale", scales);
    for (int k = 0; k < kSatelliteChannels; ++k)
      n.channels[static_cast<std::size_t>(k)] = ChannelAffine{offsets[static_cast<std::size_t>(k)], scales[static_cast<std::size_t>(k)]};
    s.finish();
  }
  {
    Section s = top.sub("patch");
    s.get("size", c.patch.size);
    s.get("stride", c.patch.stride);
    s.get("gamma", c.patch.filter.gamma);
    s.get("value_threshold", c.patch.filter.value_threshold);
    s.finish();
  }
  {
    Section s = top.sub("transform");
    TransformConfig& m = c.transform.model;
    s.get("embed_patch", m.embed_patch);
    s.get("embed_dim", m.embed_dim);
    s.get("depth", m.depth);
    s.get("heads", m.heads);
    s.get("mlp_ratio", m.mlp_ratio);
    s.get("w0", m.w0);
    s.get("w1", m.w1);
    s.get("lr", m.lr);
    s.get("image_size", m.image_size);
    s.get("batch", m.batch);
    s.get("steps", c.transform.steps);
    s.get("seed", c.transform.seed);
    s.finish();
  }
  {
    Section s = top.sub("diffusion");
    DenoiserConfig& m = c.diffusion.model;
    s.get("base_channels", m.base_channels);
    s.get("depth", m.depth);
    s.get("time_dim", m.time_dim);
    std::string mode(to_string(m.mode));
    s.get("mode", mode);
    try {
      m.mode = mode_from_string(mode);
    } catch (const Error& e) {
      config_error("diffusion.mode", e.what());
    }
    s.get("anchor", m.anchor);
    s.get("T", c.diffusion.schedule.T);
    s.get("beta_min", c.diffusion.schedule.beta_min);
    s.get("beta_max", c.diffusion.schedule.beta_max);
    s.get("sample_steps", c.diffusion.schedule.sample_steps);
    s.get("clip_x0", c.diffusion.schedule.clip_x0);
    s.get("batch", c.diffusion.train.batch);
    s.get("lr", c.diffusion.train.lr);
    s.get("ema", c.diffusion.train.ema);
    s.get("steps", c.diffusion.steps);
    s.get("seed", c.diffusion.seed);
    s.finish();
  }
  {
    Section s = top.sub("sample");
    s.get("seed", c.sample.seed);
    s.get("stride", c.sample.stride);
    s.get("scenes", c.sample.scenes);
    s.finish();
  }
  {
    Section s = top.sub("metrics");
    s.get("thresholds", c.metrics.thresholds);
    s.get("pools", c.metrics.pools);
    s.get("ssim_window", c.metrics.ssim.window);
    s.get("ssim_sigma", c.metrics.ssim.sigma);
    s.get("data_range", c.metrics.ssim.data_range);
    s.finish();
  }
  {
    Section s = top.sub("paths");
    s.get("data", c.paths.data);
    s.get("tm_bundle", c.paths.tm_bundle);
    s.get("diff_bundle", c.paths.diff_bundle);
    s.finish();
    c.paths.data = resolve_path(c.paths.data, base_dir);
    c.paths.tm_bundle = resolve_path(c.paths.tm_bundle, base_dir);
    c.paths.diff_bundle = resolve_path(c.paths.diff_bundle, base_dir);
  }
  top.finish();
  // An explicit --seed replaces every seed in the file.
  if (seed_override) {
    c.seed = *seed_override;
    seed_defaults();
  }
  try {
    c.validate();
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::Config) throw;
    fail(ErrorKind::Config, e.what());
  }
  return c;
}

RunConfig load_config(const std::string& path, const std::uint64_t* seed_override) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::Io, "cannot open config '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  const fs::path base = fs::absolute(fs::path(path)).parent_path();
  return parse_config(ss.str(), base.string(), seed_override);
}

namespace {

template <class T>
toml::array to_array(const T& values) {
  toml::array a;
  for (const auto& v : values) {
    if constexpr (std::is_same_v<std::decay_t<decltype(v)>, std::string>) a.push_back(v);
    else if constexpr (std::is_integral_v<std::decay_t<decltype(v)>>) a.push_back(static_cast<std::int64_t>(v));
    else a.push_back(static_cast<double>(v));
  }
  return a;
}

std::int64_t i64(std::uint64_t v) { return static_cast<std::int64_t>(v); }

}  // namespace

std::string dump_config(const RunConfig& c) {
  const StormParams& p = c.storm;
  const NormSpec& n = c.norm.spec;
  std::array<double, kSatelliteChannels> offsets{}, scales{};
  for (std::size_t k = 0; k < kSatelliteChannels; ++k) {
    offsets[k] = n.channels[k].offset;
    scales[k] = n.channels[k].scale;
  }
  const TransformConfig& tm = c.transform.model;
  const DenoiserConfig& dm = c.diffusion.model;
  toml::table root{
      {"seed", i64(c.seed)},
      {"data", toml::table{{"scenes", c.data.scenes},
                           {"rows", c.data.rows},
                           {"cols", c.data.cols},
                           {"train_scenes", c.data.train_scenes},
                           {"seed", i64(c.data.seed)}}},
      {"storm", toml::table{{"n_cells_min", p.n_cells_min},
                            {"n_cells_max", p.n_cells_max},
                            {"n_cells_override", p.n_cells_override},
                            {"amp_min", p.amp_min},
                            {"amp_max", p.amp_max},
                            {"sigma_min", p.sigma_min},
                            {"sigma_max", p.sigma_max},
                            {"background_max", p.background_max},
                            {"texture", p.texture},
                            {"texture_sigma", p.texture_sigma},
                            {"bt_base", p.bt_base},
                            {"bt_slope", p.bt_slope},
                            {"noise_sd", to_array(p.noise_sd)},
                            {"blur_sigma", to_array(p.blur_sigma)},
                            {"lightning_threshold", p.lightning_threshold},
                            {"flash_scale", p.flash_scale}}},
      {"norm", toml::table{{"dbz_min", n.dbz_min},
                           {"dbz_max", n.dbz_max},
                           {"model_lo", n.model_lo},
                           {"model_hi", n.model_hi},
                           {"fit_channels", c.norm.fit_channels},
                           {"channel_offset", to_array(offsets)},
                           {"channel_scale", to_array(scales)}}},
      {"patch", toml::table{{"size", c.patch.size},
                            {"stride", c.patch.stride},
                            {"gamma", c.patch.filter.gamma},
                            {"value_threshold", c.patch.filter.value_threshold}}},
      {"transform", toml::table{{"embed_patch", tm.embed_patch},
                                {"embed_dim", tm.embed_dim},
                                {"depth", tm.depth},
                                {"heads", tm.heads},
                                {"mlp_ratio", tm.mlp_ratio},
                                {"w0", tm.w0},
                                {"w1", tm.w1},
                                {"lr", tm.lr},
                                {"image_size", tm.image_size},
                                {"batch", tm.batch},
                                {"steps", static_cast<std::int64_t>(c.transform.steps)},
                                {"seed", i64(c.transform.seed)}}},
      {"diffusion", toml::table{{"base_channels", dm.base_channels},
                                {"depth", dm.depth},
                                {"time_dim", dm.time_dim},
                                {"mode", std::string(to_string(dm.mode))},
                                {"anchor", dm.anchor},
                                {"T", c.diffusion.schedule.T},
                                {"beta_min", c.diffusion.schedule.beta_min},
                                {"beta_max", c.diffusion.schedule.beta_max},
                                {"sample_steps", c.diffusion.schedule.sample_steps},
                                {"clip_x0", c.diffusion.schedule.clip_x0},
                                {"batch", c.diffusion.train.batch},
                                {"lr", c.diffusion.train.lr},
                                {"ema", c.diffusion.train.ema},
                                {"steps", static_cast<std::int64_t>(c.diffusion.steps)},
                                {"seed", i64(c.diffusion.seed)}}},
      {"sample", toml::table{{"seed", i64(c.sample.seed)}, {"stride", c.sample.stride}, {"scenes", to_array(c.sample.scenes)}}},
      {"metrics", toml::table{{"thresholds", to_array(c.metrics.thresholds)},
                              {"pools", to_array(c.metrics.pools)},
                              {"ssim_window", c.metrics.ssim.window},
                              {"ssim_sigma", c.metrics.ssim.sigma},
                              {"data_range", c.metrics.ssim.data_range}}},
      {"paths", toml::table{{"data", c.paths.data}, {"tm_bundle", c.paths.tm_bundle}, {"diff_bundle", c.paths.diff_bundle}}},
  };
  std::ostringstream out;
  out << root << '\n';
  return out.str();
}

}  // namespace diffsr
