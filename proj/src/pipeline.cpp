#include "diffsr/pipeline.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "diffsr/render.hpp"
#include "diffsr/tensors.hpp"

namespace fs = std::filesystem;

namespace diffsr {

RunLock::RunLock(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  require(!ec && fs::is_directory(dir), ErrorKind::Io, "cannot create run directory '" + dir + "'");
  path_ = (fs::path(dir) / ".lock").string();
  const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    const std::string p = path_;
    path_.clear();
    fail(ErrorKind::Io, "run directory is in use (lock file " + p + " exists; remove it if no run is active)");
  }
  const std::string pid = std::to_string(::getpid()) + "\n";
  (void)!::write(fd, pid.data(), pid.size());
  ::close(fd);
}

RunLock::~RunLock() {
  if (!path_.empty()) ::unlink(path_.c_str());
}

SceneSplit split_scenes(std::vector<Scene> scenes, int train_scenes) {
  require(train_scenes >= 1 && static_cast<std::size_t>(train_scenes) <= scenes.size(), ErrorKind::Config,
          "train_scenes=" + std::to_string(train_scenes) + " but the dataset has " + std::to_string(scenes.size()) +
              " scenes");
  SceneSplit s;
  for (std::size_t i = 0; i < scenes.size(); ++i)
    (static_cast<int>(i) < train_scenes ? s.train : s.val).push_back(std::move(scenes[i]));
  return s;
}

NormSpec resolve_norm(const RunConfig& cfg, const std::vector<Scene>& train) {
  return cfg.norm.fit_channels ? fit_channel_norm(train, cfg.norm.spec) : cfg.norm.spec;
}

std::vector<Patch> training_patches(const std::vector<Scene>& scenes, const PatchConfig& cfg) {
  std::vector<Patch> out;
  for (const auto& s : scenes) {
    const auto kept = filter_patches(patchify(s, cfg.size, cfg.stride), cfg.filter);
    out.insert(out.end(), kept.begin(), kept.end());
  }
  return out;
}

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::string join(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  require(!ec && fs::is_directory(dir), ErrorKind::Io, "cannot create directory '" + dir + "'");
}

std::vector<double> moving_average(const std::vector<LossRecord>& log, std::size_t window) {
  std::vector<double> out;
  double acc = 0.0;
  for (std::size_t i = 0; i < log.size(); ++i) {
    acc += log[i].loss;
    if (i >= window) acc -= log[i - window].loss;
    out.push_back(acc / static_cast<double>(std::min(i + 1, window)));
  }
  return out;
}

void write_training_logs(const std::vector<LossRecord>& log, const std::string& out) {
  write_text(join(out, "loss.csv"), loss_csv(log));
  write_text(join(out, "timing.csv"), timing_csv(log));
  write_png(plot_series(moving_average(log, 50)), join(out, "loss.png"));
}

std::vector<Scene> load_data(const RunConfig& cfg) {
  require(!cfg.paths.data.empty(), ErrorKind::MissingInput, "paths.data is not set (run gen-data first)");
  return load_scenes(cfg.paths.data);
}

nn::ModelBundle load_tm(const RunConfig& cfg, ConditionMode mode) {
  require(!cfg.paths.tm_bundle.empty(), ErrorKind::MissingInput,
          std::string("condition mode '") + std::string(to_string(mode)) +
              "' needs a stage-1 bundle: set paths.tm_bundle (run 'train tm' first)");
  require(fs::exists(cfg.paths.tm_bundle), ErrorKind::MissingInput,
          "stage-1 bundle '" + cfg.paths.tm_bundle + "' does not exist");
  return nn::load_bundle(cfg.paths.tm_bundle);
}

std::string run_train_tm(RunConfig cfg, const std::string& out) {
  ensure_dir(out);
  SceneSplit split = split_scenes(load_data(cfg), cfg.data.train_scenes);
  const NormSpec norm = resolve_norm(cfg, split.train);
  TrainResult r = train_tm(split.train, cfg.transform.model, norm, cfg.transform.steps, cfg.transform.seed);
  const std::string bundle = join(out, "tm.bundle");
  nn::save_bundle(r.bundle, bundle);
  write_training_logs(r.log, out);
  cfg.paths.tm_bundle = fs::absolute(bundle).lexically_normal().string();
  write_text(join(out, "config.toml"), dump_config(cfg));
  return bundle;
}

std::string run_train_diff(RunConfig cfg, const std::string& out) {
  ensure_dir(out);
  const ConditionMode mode = cfg.diffusion.model.mode;
  SceneSplit split = split_scenes(load_data(cfg), cfg.data.train_scenes);
  nn::ModelBundle tm;
  const bool use_tm = mode != ConditionMode::SatelliteOnly;
  if (use_tm) tm = load_tm(cfg, mode);
  const NormSpec norm = use_tm ? tm.norm : resolve_norm(cfg, split.train);
  const std::vector<Patch> patches = training_patches(split.train, cfg.patch);
  require(!patches.empty(), ErrorKind::InvalidArgument,
          "no training patch passes the filter (gamma=" + std::to_string(cfg.patch.filter.gamma) + ")");
  const auto examples = make_examples(patches, mode, use_tm ? &tm : nullptr, norm);
  TrainResult r = train_diffusion(examples, cfg.diffusion.model, cfg.diffusion.schedule, norm, cfg.diffusion.steps,
                                  cfg.diffusion.seed, cfg.diffusion.train);
  const std::string bundle = join(out, "diff.bundle");
  nn::save_bundle(r.bundle, bundle);
  write_training_logs(r.log, out);
  nlohmann::ordered_json info = r.bundle.architecture;
  info["training_patches"] = patches.size();
  if (use_tm) info["tm_bundle_id"] = tm.id();
  write_text(join(out, "denoiser.json"), info.dump(2) + "\n");
  cfg.paths.diff_bundle = fs::absolute(bundle).lexically_normal().string();
  write_text(join(out, "config.toml"), dump_config(cfg));
  return bundle;
}

std::string run_sample(const RunConfig& cfg, const std::string& out) {
  ensure_dir(out);
  require(!cfg.paths.diff_bundle.empty(), ErrorKind::MissingInput, "paths.diff_bundle is not set (run 'train diff' first)");
  const nn::ModelBundle diff = nn::load_bundle(cfg.paths.diff_bundle);
  const ConditionMode mode = DenoiserConfig::from_json(diff.architecture).mode;
  nn::ModelBundle tm;
  const bool use_tm = mode != ConditionMode::SatelliteOnly;
  if (use_tm) tm = load_tm(cfg, mode);

  SceneSplit split = split_scenes(load_data(cfg), cfg.data.train_scenes);
  std::vector<const Scene*> chosen;
  if (cfg.sample.scenes.empty()) {
    for (const auto& s : split.val) chosen.push_back(&s);
  } else {
    std::string missing;
    for (const auto& id : cfg.sample.scenes) {
      const Scene* hit = nullptr;
      for (const auto* group : {&split.train, &split.val})
        for (const auto& s : *group)
          if (s.id == id) hit = &s;
      if (hit) chosen.push_back(hit);
      else missing += (missing.empty() ? "" : ", ") + id;
    }
    require(missing.empty(), ErrorKind::MissingInput, "unknown scene ids: " + missing);
  }
  require(!chosen.empty(), ErrorKind::InvalidArgument, "no scenes to sample");

  const std::string png_dir = join(out, "png");
  ensure_dir(png_dir);
  std::vector<NamedField> samples, estimates;
  for (const Scene* s : chosen) {
    SceneSample r = sample_scene(*s, use_tm ? &tm : nullptr, diff, cfg.patch.size, cfg.sample.stride, cfg.sample.seed);
    write_png(render_reflectivity(r.sample), join(png_dir, s->id + "_sample.png"));
    write_png(render_reflectivity(s->radar), join(png_dir, s->id + "_truth.png"));
    if (use_tm) {
      write_png(render_reflectivity(r.estimate), join(png_dir, s->id + "_estimate.png"));
      estimates.push_back({s->id, std::move(r.estimate)});
    }
    samples.push_back({s->id, std::move(r.sample)});
  }
  const std::string pred = write_radar_fields(samples, join(out, "pred"));
  if (use_tm) write_radar_fields(estimates, join(out, "estimate"));
  write_text(join(out, "config.toml"), dump_config(cfg));
  return pred;
}

std::string run_evaluate(const RunConfig& cfg, const std::string& pred_manifest, const std::string& truth_manifest,
                         const std::string& out, const std::string& model_id) {
  ensure_dir(out);
  const auto preds = load_radar_fields(pred_manifest);
  const auto truths = load_radar_fields(truth_manifest);
  std::string missing;
  for (const auto& p : preds) {
    bool found = false;
    for (const auto& t : truths) found = found || t.id == p.id;
    if (!found) missing += (missing.empty() ? "" : ", ") + p.id;
  }
  require(missing.empty(), ErrorKind::MissingInput, "truth manifest lacks scene ids: " + missing);
  require(!preds.empty(), ErrorKind::InvalidArgument, "prediction manifest is empty");
  std::vector<MetricRow> compact, full;
  for (const auto& p : preds) {
    const Field* truth = nullptr;
    for (const auto& t : truths)
      if (t.id == p.id) truth = &t.field;
    const MetricReport rep = evaluate(p.field, *truth, cfg.metrics);
    compact.push_back({p.id, model_id, metric_values(rep, false)});
    full.push_back({p.id, model_id, metric_values(rep, true)});
  }
  compact.push_back(aggregate_row(compact, model_id));
  full.push_back(aggregate_row(full, model_id));
  const std::string path = join(out, "metrics.csv");
  write_text(path, metrics_csv(metric_columns(cfg.metrics, false), compact));
  write_text(join(out, "metrics_full.csv"), metrics_csv(metric_columns(cfg.metrics, true), full));

  // CSI of the aggregate row, one group per threshold, one bar per pool.
  const auto& agg = compact.back().values;
  std::vector<std::vector<double>> groups;
  std::size_t k = 2;
  for (std::size_t t = 0; t < cfg.metrics.thresholds.size(); ++t) {
    groups.emplace_back();
    for (std::size_t p = 0; p < cfg.metrics.pools.size(); ++p) groups.back().push_back(agg[k++]);
  }
  write_png(plot_bars(groups), join(out, "metrics.png"));
  return path;
}

}  // namespace

std::string loss_csv(const std::vector<LossRecord>& log) {
  std::string out = "step,loss\n";
  for (const auto& r : log) out += std::to_string(r.step) + "," + fmt(r.loss) + "\n";
  return out;
}

std::string timing_csv(const std::vector<LossRecord>& log) {
  std::string out = "step,wall_ms\n";
  for (const auto& r : log) out += std::to_string(r.step) + "," + fmt(r.wall_ms) + "\n";
  return out;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(f), ErrorKind::Io, "cannot write '" + path + "'");
  f << text;
  require(static_cast<bool>(f), ErrorKind::Io, "failed writing '" + path + "'");
}

std::string read_text(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(static_cast<bool>(f), ErrorKind::Io, "cannot read '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::uint64_t patch_seed(std::uint64_t seed, const std::string& id, int index) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : id) h = (h ^ c) * 0x100000001b3ULL;
  return derive_key(derive_key(seed, h), static_cast<std::uint64_t>(index));
}

SceneSample sample_scene(const Scene& scene, const nn::ModelBundle* tm, const nn::ModelBundle& diff, int patch_size,
                         int stride, std::uint64_t seed) {
  const DenoiserConfig dcfg = DenoiserConfig::from_json(diff.architecture);
  const bool use_tm = dcfg.mode != ConditionMode::SatelliteOnly;
  const Denoiser<float> net = denoiser_from_bundle(diff);
  const ScheduleConfig scfg = schedule_from_bundle(diff);
  const NoiseSchedule sched = scfg.sampling();
  const NormSpec& norm = diff.norm;

  const std::vector<Patch> patches = patchify(scene, patch_size, stride);
  const auto examples = make_examples(patches, dcfg.mode, tm, norm);
  const int C = dcfg.condition_channels();
  const std::size_t plane = static_cast<std::size_t>(patch_size) * patch_size;
  nn::Tensor<float> cond({static_cast<int>(patches.size()), C, patch_size, patch_size});
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < patches.size(); ++i) {
    std::copy_n(examples[i].condition.data(), C * plane, cond.data() + i * C * plane);
    seeds.push_back(patch_seed(seed, scene.id, static_cast<int>(i)));
  }
  const nn::Tensor<float> out = sample(cond, bind(net, sched), sched, seeds, static_cast<float>(norm.model_lo),
                                       static_cast<float>(norm.model_hi), scfg.clip_x0);

  std::vector<Tile> sample_tiles, estimate_tiles;
  for (std::size_t i = 0; i < patches.size(); ++i) {
    const Patch& p = patches[i];
    sample_tiles.push_back({p.row0, p.col0, plane_to_field(out, static_cast<int>(i), 0, p.radar.mask())});
    if (use_tm)
      estimate_tiles.push_back({p.row0, p.col0, plane_to_field(examples[i].condition, 0, C - 1, p.radar.mask())});
  }
  SceneSample r;
  r.sample = denormalize_refl(depatchify(sample_tiles, scene.rows(), scene.cols()), norm);
  if (use_tm) r.estimate = denormalize_refl(depatchify(estimate_tiles, scene.rows(), scene.cols()), norm);
  return r;
}

std::string cmd_gen_data(const RunConfig& cfg, const std::string& out) {
  RunLock lock(out);
  const auto scenes = gen_dataset(cfg.data.scenes, cfg.data.rows, cfg.data.cols, cfg.data.seed, cfg.storm);
  const std::string manifest = write_scenes(scenes, out);
  RunConfig resolved = cfg;
  resolved.paths.data = fs::absolute(manifest).lexically_normal().string();
  write_text(join(out, "config.toml"), dump_config(resolved));
  return manifest;
}

std::string cmd_patchify(const RunConfig& cfg, const std::string& out) {
  RunLock lock(out);
  SceneSplit split = split_scenes(load_data(cfg), cfg.data.train_scenes);
  std::vector<Scene> as_scenes;
  for (const Patch& p : training_patches(split.train, cfg.patch)) {
    Scene s;
    s.id = p.scene_id + "_r" + std::to_string(p.row0) + "_c" + std::to_string(p.col0);
    s.satellite = p.satellite;
    s.radar = p.radar;
    as_scenes.push_back(std::move(s));
  }
  const std::string manifest = write_scenes(as_scenes, out);
  write_text(join(out, "config.toml"), dump_config(cfg));
  return manifest;
}

std::string cmd_train_tm(const RunConfig& cfg, const std::string& out) {
  RunLock lock(out);
  return run_train_tm(cfg, out);
}

std::string cmd_train_diff(const RunConfig& cfg, const std::string& out) {
  RunLock lock(out);
  return run_train_diff(cfg, out);
}

std::string cmd_sample(const RunConfig& cfg, const std::string& out) {
  RunLock lock(out);
  return run_sample(cfg, out);
}

std::string cmd_evaluate(const RunConfig& cfg, const std::string& pred_manifest, const std::string& truth_manifest,
                         const std::string& out, const std::string& model_id) {
  RunLock lock(out);
  return run_evaluate(cfg, pred_manifest, truth_manifest, out, model_id);
}

std::string cmd_ablate(const RunConfig& base, const std::string& out, std::vector<AblationRow>* rows_out) {
  RunLock lock(out);
  RunConfig cfg = base;
  if (cfg.paths.tm_bundle.empty())
    cfg.paths.tm_bundle = fs::absolute(run_train_tm(cfg, join(out, "tm"))).lexically_normal().string();

  struct Variant {
    const char* model;
    ConditionMode mode;
  };
  const Variant variants[] = {{"Diff-baseline1", ConditionMode::SatelliteOnly},
                              {"Diff-baseline2", ConditionMode::EstimateOnly},
                              {"DiffSR", ConditionMode::Both}};
  std::vector<AblationRow> rows;
  for (const auto& v : variants) {
    RunConfig run = cfg;
    run.diffusion.model.mode = v.mode;
    const std::string dir = join(out, std::string(to_string(v.mode)));
    run.paths.diff_bundle = fs::absolute(run_train_diff(run, dir)).lexically_normal().string();
    const std::string pred = run_sample(run, dir);
    const nn::ModelBundle diff = nn::load_bundle(run.paths.diff_bundle);
    const std::string csv = run_evaluate(run, pred, run.paths.data, dir, diff.id());
    write_text(join(dir, "config.toml"), dump_config(run));

    // Aggregate row of the compact CSV: rmse, ssim, then CSI threshold-major, pool-minor.
    std::istringstream lines(read_text(csv));
    std::string line, last;
    while (std::getline(lines, line))
      if (!line.empty()) last = line;
    std::vector<double> vals;
    std::istringstream cells(last);
    std::string cell;
    for (int i = 0; std::getline(cells, cell, ','); ++i)
      if (i >= 2) vals.push_back(std::stod(cell));
    const auto csi_at = [&](double thr, int pool) {
      std::size_t k = 2;
      for (double t : run.metrics.thresholds)
        for (int p : run.metrics.pools) {
          if (t == thr && p == pool) return vals.at(k);
          ++k;
        }
      fail(ErrorKind::Config, "ablation needs CSI at threshold " + fmt(thr) + " and pool " + std::to_string(pool));
    };
    rows.push_back({v.model, v.mode, vals.at(1), vals.at(0), csi_at(35.0, 8), csi_at(50.0, 8)});
  }

  std::string csv = "model,condition,ssim,rmse,csi35_pool8,csi50_pool8\n";
  std::string md = "| Model | Condition | SSIM | RMSE | CSI-35 POOL8 | CSI-50 POOL8 | LPIPS |\n|---|---|---|---|---|---|---|\n";
  for (const auto& r : rows) {
    csv += r.model + "," + std::string(to_string(r.mode)) + "," + fmt(r.ssim) + "," + fmt(r.rmse) + "," +
           fmt(r.csi35_pool8) + "," + fmt(r.csi50_pool8) + "\n";
    md += "| " + r.model + " | " + std::string(to_string(r.mode)) + " | " + fmt(r.ssim) + " | " + fmt(r.rmse) + " | " +
          fmt(r.csi35_pool8) + " | " + fmt(r.csi50_pool8) + " | n/a |\n";
  }
  const std::string table = join(out, "ablation.csv");
  write_text(table, csv);
  write_text(join(out, "ablation.md"), md);
  write_text(join(out, "config.toml"), dump_config(cfg));
  if (rows_out) *rows_out = rows;
  return table;
}

}  // namespace diffsr
