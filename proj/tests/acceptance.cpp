// Acceptance harness: one PASS/FAIL line per criterion.
//
//   acceptance [--criteria 1,2,5] [--work DIR] [--config desk.toml]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "diffsr/config.hpp"
#include "diffsr/dataset.hpp"
#include "diffsr/error.hpp"
#include "diffsr/patching.hpp"
#include "diffsr/pipeline.hpp"
#include "diffsr/tensors.hpp"
#include "support/oracles.hpp"

namespace fs = std::filesystem;
using namespace diffsr;
using namespace diffsr::oracles;

namespace {

struct Outcome {
  bool pass = true;
  std::vector<std::string> notes;

  void check(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      notes.push_back("FAILED " + what);
    }
  }
  void note(const std::string& what) { notes.push_back(what); }
};

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::string fmt(const char* f, double a, double b) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a, b);
  return buf;
}

std::string fmt(const char* f, double a, double b, double c) {
  char buf[160];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// ---- 1: diffusion math ----

Outcome criterion_1() {
  Outcome o;
  for (int T : {200, 1000}) {
    const auto s = build_schedule(T, 1e-4, 0.02);
    double prod = 1.0, worst = 0.0;
    for (int t = 1; t <= T; ++t) {
      prod *= 1.0 - s.beta_at(t);
      worst = std::max(worst, std::abs(s.alpha_bar_at(t) - prod));
    }
    o.check(worst <= 1e-12, fmt("alpha_bar identity T=%.0f, error %.3g", T, worst));
  }

  std::mt19937_64 pick(7);
  const auto s = build_schedule(200, 1e-4, 0.02);
  const int n = 10000;
  for (int k = 0; k < 5; ++k) {
    const double y0 = std::uniform_real_distribution<double>(-1.0, 1.0)(pick);
    const int t = std::uniform_int_distribution<int>(1, 200)(pick);
    CounterRng rng(derive_key(11, static_cast<std::uint64_t>(k)));
    Tensor<double> eps({n});
    for (auto& v : eps.span()) v = rng.normal();
    const auto y = forward_sample(Tensor<double>({n}, y0), t, eps, s);
    double m = 0.0, q = 0.0;
    for (double v : y.span()) m += v;
    m /= n;
    for (double v : y.span()) q += (v - m) * (v - m);
    const double var = q / (n - 1);
    const double ab = s.alpha_bar_at(t);
    const double true_var = 1.0 - ab;
    const bool mean_ok = std::abs(m - std::sqrt(ab) * y0) < 3.0 * std::sqrt(true_var / n);
    const bool var_ok = std::abs(var - true_var) < 3.0 * true_var * std::sqrt(2.0 / (n - 1));
    o.check(mean_ok && var_ok, fmt("moments at y0=%.3f t=%.0f", y0, t));
  }

  double worst = 0.0;
  CounterRng rng(3);
  for (int i = 0; i < 100; ++i) {
    const auto s1 = schedule_from_betas({rng.uniform(1e-4, 0.9)});
    const double y0 = rng.uniform(-1, 1), e = rng.normal();
    const auto y1 = forward_sample(Tensor<double>({1}, y0), 1, Tensor<double>({1}, e), s1);
    const auto back = reverse_step(y1, 1, Tensor<double>({1}, e), Tensor<double>({1}, rng.normal()), s1);
    worst = std::max(worst, std::abs(back[0] - y0));
  }
  o.check(worst <= 1e-6, fmt("t=1 recovery error %.3g", worst));

  const double ab = build_schedule(1000, 1e-4, 0.02).alpha_bar_at(1000);
  o.check(ab >= 3e-5 && ab <= 5e-5, fmt("alpha_bar_1000 = %.4g", ab));
  o.note(fmt("alpha_bar_1000 %.4g", ab));
  return o;
}

// ---- 2: metrics oracles ----

Outcome criterion_2() {
  Outcome o;
  std::mt19937_64 rng(2024);
  long mismatches = 0, bound_violations = 0;
  for (int i = 0; i < 1000; ++i) {
    const Field p = random_dbz(rng, 16, 16, i % 3 == 0);
    const Field t0 = random_dbz(rng, 16, 16);
    const Field t(16, 16, Units::Dbz, std::vector<float>(t0.values().begin(), t0.values().end()),
                  std::vector<std::uint8_t>(p.mask().begin(), p.mask().end()));
    for (double thr : {15.0, 35.0, 50.0})
      for (int pool : {1, 4, 8}) {
        const auto c = contingency(p, t, thr, pool);
        if (!(c == brute_force(p, t, thr, pool))) ++mismatches;
        const auto sc = scores(c);
        if (sc.pod_defined && sc.csi_defined && sc.csi > sc.pod + 1e-15) ++bound_violations;
        if (sc.far_defined && sc.csi_defined && sc.csi > 1.0 - sc.far + 1e-15) ++bound_violations;
      }
  }
  o.check(mismatches == 0, fmt("%.0f contingency tables differ from brute force", static_cast<double>(mismatches)));
  o.check(bound_violations == 0, fmt("%.0f CSI bound violations", static_cast<double>(bound_violations)));

  const Field hp(2, 2, Units::Dbz, {20, 0, 40, 10});
  const Field ht(2, 2, Units::Dbz, {20, 40, 0, 10});
  o.check(scores(contingency(hp, ht, 15.0, 1)).csi == 1.0 / 3.0, "hand example CSI = 1/3");

  std::vector<float> pv(16, 0.0f), tv(16, 0.0f);
  pv[0] = 40.0f;
  tv[15] = 40.0f;
  const Field pp(4, 4, Units::Dbz, pv), pt(4, 4, Units::Dbz, tv);
  o.check(scores(contingency(pp, pt, 35.0, 1)).csi == 0.0 && scores(contingency(pp, pt, 35.0, 4)).csi == 1.0,
          "pooled 4x4 example flips CSI 0 -> 1");

  const Field f = random_dbz(rng, 24, 24);
  const double same = ssim(f, f);
  o.check(std::abs(same - 1.0) <= 1e-9, fmt("SSIM identity %.12f", same));
  SsimOptions so;
  so.data_range = 1.0;
  const double c = ssim(Field::filled(16, 16, Units::Normalized, 0.5f), Field::filled(16, 16, Units::Normalized, 0.25f), so);
  o.check(std::abs(c - 0.800064) <= 1e-6, fmt("SSIM constant closed form %.7f", c));
  return o;
}

// ---- 3: losses and gradients ----

Outcome criterion_3() {
  Outcome o;
  Tensor<double> pred({1, 1, 1, 1}, 0.3), target({1, 1, 1, 1}, 0.5);
  const double wl = weighted_loss(Var<double>::constant(pred), target, 5.0, 4.0).value()[0];
  o.check(std::abs(wl - 0.0546735) <= 1e-7, fmt("weighted_loss single pixel %.9f", wl));

  CounterRng rng(5);
  const auto p = normal_tensor<double>({2, 1, 4, 4}, 1.0, rng);
  const auto q = normal_tensor<double>({2, 1, 4, 4}, 1.0, rng);
  const double w0 = weighted_loss(Var<double>::constant(p), q, 0.0, 4.0).value()[0];
  const double plain = mse(Var<double>::constant(p), q).value()[0];
  o.check(w0 == plain, "w0 = 0 equals plain MSE");

  {
    CounterRng r(2);
    Dense<double> d(6, 3, r);
    d.bias.mutable_value() = normal_tensor<double>({3}, 1.0, r);
    auto x = rand_leaf<double>({4, 6}, r);
    GradTarget<double> t{{x, d.weight, d.bias}, [=] { return probe(d(x), 2); }};
    const double e = grad_check(t).max_relative_error;
    o.check(e < 1e-4, fmt("dense grad error %.3g", e));
  }
  const auto fd = fixtures<double>();
  const auto ff = fixtures<float>();
  double worst64 = 0.0, worst32 = 0.0;
  for (std::size_t i = 0; i < fd.size(); ++i)
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
      auto t = fd[i].build(seed);
      worst64 = std::max(worst64, grad_check(t).max_relative_error);
      auto a = ff[i].build(seed);
      auto b = fd[i].build(seed);
      worst32 = std::max(worst32, grad_check(a, b).max_relative_error);
    }
  o.check(worst64 < 1e-5, fmt("op grad error 64-bit %.3g", worst64));
  o.check(worst32 < 1e-3, fmt("op grad error 32-bit %.3g", worst32));
  const double tm = transform_grad_error();
  o.check(tm < 1e-3, fmt("full TM grad error %.3g", tm));
  const double dn = denoiser_grad_error();
  o.check(dn < 1e-3, fmt("full denoiser grad error %.3g", dn));
  o.note(fmt("ops %.2g/%.2g, TM %.2g", worst64, worst32, tm) + fmt(", denoiser %.2g", dn));
  return o;
}

// ---- 4: patch protocol ----

Scene ramp_scene(int rows, int cols) {
  Scene s;
  s.id = "ramp";
  std::vector<float> v(static_cast<std::size_t>(rows) * cols);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(i % 61);
  s.radar = Field(rows, cols, Units::Dbz, v);
  for (int c = 0; c < kSatelliteChannels; ++c) {
    const bool glm = c == kSatelliteChannels - 1;
    s.satellite[static_cast<std::size_t>(c)] =
        Field::filled(rows, cols, glm ? Units::FlashDensity : Units::BrightnessK, glm ? 0.0f : 250.0f);
  }
  return s;
}

Outcome criterion_4() {
  Outcome o;
  const Scene big = ramp_scene(768, 1536);
  const auto patches = patchify(big, 256, 256);
  o.check(patches.size() == 18, fmt("768x1536 gives %.0f patches", static_cast<double>(patches.size())));

  std::vector<Tile> tiles;
  for (const auto& p : patches) tiles.push_back({p.row0, p.col0, p.radar});
  const Field back = depatchify(tiles, big.rows(), big.cols());
  o.check(std::equal(back.values().begin(), back.values().end(), big.radar.values().begin()),
          "depatchify(patchify(x)) == x");

  const int gamma = 1000;
  bool boundary = true;
  for (int above : {gamma, gamma - 1}) {
    std::vector<float> v(32 * 32, 0.0f);
    for (int i = 0; i < above; ++i) v[static_cast<std::size_t>(i)] = 30.0f;
    Scene s = ramp_scene(32, 32);
    s.radar = Field(32, 32, Units::Dbz, v);
    const auto kept = filter_patches(patchify(s, 32, 32), FilterPolicy{gamma, 6.0});
    boundary = boundary && kept.size() == (above >= gamma ? 1u : 0u);
  }
  o.check(boundary, "gamma boundary: gamma kept, gamma - 1 discarded");
  return o;
}

// ---- 5-7: desk runs ----

Outcome criterion_5(const RunConfig& base, const std::string& dir) {
  Outcome o;
  RunConfig cfg = base;
  cfg.paths.data = cmd_gen_data(cfg, dir + "/data");
  cfg.paths.tm_bundle = cmd_train_tm(cfg, dir + "/tm");

  const SceneSplit split = split_scenes(load_scenes(cfg.paths.data), cfg.data.train_scenes);
  const nn::ModelBundle tm = nn::load_bundle(cfg.paths.tm_bundle);
  const TransformNet<float> tnet = transform_from_bundle(tm);
  double sum = 0.0, count = 0.0;
  for (const auto& s : split.train)
    for (float v : s.radar.values()) {
      sum += v;
      ++count;
    }
  const float constant = static_cast<float>(sum / count);
  std::vector<double> r_tm, r_const;
  for (const auto& s : split.val) {
    const RadarEstimate e = estimate_scene(s, tnet, tm);
    r_tm.push_back(rmse(denormalize_refl(e.values, tm.norm), s.radar));
    r_const.push_back(rmse(Field::filled(s.rows(), s.cols(), Units::Dbz, constant), s.radar));
  }
  o.check(mean(r_tm) < mean(r_const), fmt("TM validation RMSE %.3f vs constant %.3f", mean(r_tm), mean(r_const)));
  o.note(fmt("TM val RMSE %.2f (constant %.2f)", mean(r_tm), mean(r_const)));

  cfg.diffusion.model.mode = ConditionMode::Both;
  cfg.paths.diff_bundle = cmd_train_diff(cfg, dir + "/diff");
  std::vector<double> losses;
  {
    std::istringstream lines(read_text(dir + "/diff/loss.csv"));
    std::string line;
    std::getline(lines, line);
    while (std::getline(lines, line)) losses.push_back(std::stod(line.substr(line.find(',') + 1)));
  }
  const std::size_t w = std::min<std::size_t>(500, losses.size() / 2);
  const double lead = mean({losses.begin(), losses.begin() + static_cast<long>(w)});
  const double trail = mean({losses.end() - static_cast<long>(w), losses.end()});
  o.check(w > 0 && trail < lead, fmt("diffusion loss trailing %.4f vs leading %.4f", trail, lead));
  o.note(fmt("diffusion loss %.4f -> %.4f", lead, trail));

  // 32 filtered validation patches, three sampling seeds.
  std::vector<Patch> patches = training_patches(split.val, cfg.patch);
  patches.resize(std::min<std::size_t>(32, patches.size()));
  o.check(patches.size() == 32, fmt("only %.0f validation patches pass the filter", static_cast<double>(patches.size())));
  const nn::ModelBundle diff = nn::load_bundle(cfg.paths.diff_bundle);
  const NormSpec& norm = diff.norm;
  const auto examples = make_examples(patches, ConditionMode::Both, &tm, norm);
  const int C = condition_channels(ConditionMode::Both);
  const int P = cfg.patch.size;
  const std::size_t plane = static_cast<std::size_t>(P) * P;
  nn::Tensor<float> cond({static_cast<int>(patches.size()), C, P, P});
  for (std::size_t i = 0; i < patches.size(); ++i)
    std::copy_n(examples[i].condition.data(), C * plane, cond.data() + i * C * plane);
  const Denoiser<float> net = denoiser_from_bundle(diff);
  const ScheduleConfig scfg = schedule_from_bundle(diff);
  const NoiseSchedule sched = scfg.sampling();

  std::vector<double> r_est;
  double f_truth = 0.0, f_est = 0.0, pixels = 0.0;
  for (std::size_t i = 0; i < patches.size(); ++i) {
    const Field est = denormalize_refl(plane_to_field(examples[i].condition, 0, C - 1), norm);
    r_est.push_back(rmse(est, patches[i].radar));
    for (std::size_t k = 0; k < est.size(); ++k) {
      f_truth += patches[i].radar.values()[k] > 40.0f;
      f_est += est.values()[k] > 40.0f;
      ++pixels;
    }
  }
  f_truth /= pixels;
  f_est /= pixels;
  const double est_med = median(r_est);

  int good = 0;
  for (int k = 0; k < 3; ++k) {
    const std::uint64_t seed = derive_key(cfg.sample.seed, static_cast<std::uint64_t>(k));
    std::vector<std::uint64_t> seeds;
    for (std::size_t i = 0; i < patches.size(); ++i) seeds.push_back(patch_seed(seed, patches[i].scene_id, static_cast<int>(i)));
    const auto out = sample(cond, bind(net, sched), sched, seeds, static_cast<float>(norm.model_lo),
                            static_cast<float>(norm.model_hi), scfg.clip_x0);
    std::vector<double> r_smp;
    std::vector<NamedField> fields;
    double f_smp = 0.0;
    for (std::size_t i = 0; i < patches.size(); ++i) {
      const Field smp = denormalize_refl(plane_to_field(out, static_cast<int>(i), 0), norm);
      r_smp.push_back(rmse(smp, patches[i].radar));
      for (float v : smp.values()) f_smp += v > 40.0f;
      fields.push_back({patches[i].scene_id + "_r" + std::to_string(patches[i].row0) + "_c" + std::to_string(patches[i].col0), smp});
    }
    f_smp /= pixels;
    write_radar_fields(fields, dir + "/samples/seed" + std::to_string(k));
    const double ratio = median(r_smp) / est_med;
    const bool ok = ratio <= 1.5 && std::abs(f_smp - f_truth) < std::abs(f_est - f_truth);
    good += ok;
    o.note(fmt("seed %.0f: RMSE ratio %.3f", k, ratio) + fmt(", freq>40 sample %.4f truth %.4f", f_smp, f_truth) +
           fmt(" estimate %.4f", f_est));
  }
  o.check(good >= 2, fmt("%.0f of 3 seeds meet the ratio and exceedance checks", good));
  return o;
}

Outcome criterion_6(const RunConfig& base, const std::string& dir, const std::string& tm_bundle) {
  Outcome o;
  RunConfig cfg = base;
  const std::string data_dir = dir + "/data";
  cfg.paths.data = fs::exists(data_dir + "/manifest.json") ? data_dir + "/manifest.json" : cmd_gen_data(cfg, data_dir);
  cfg.paths.tm_bundle = tm_bundle;
  std::vector<AblationRow> rows;
  const std::string table = cmd_ablate(cfg, dir + "/ablate", &rows);
  o.check(rows.size() == 3, "three ablation rows");
  bool finite = true;
  for (const auto& r : rows) {
    finite = finite && std::isfinite(r.ssim) && std::isfinite(r.rmse) && std::isfinite(r.csi35_pool8) &&
             std::isfinite(r.csi50_pool8);
    o.note(r.model + fmt(": SSIM %.3f RMSE %.2f", r.ssim, r.rmse) + fmt(" CSI35/8 %.3f CSI50/8 %.3f", r.csi35_pool8, r.csi50_pool8));
  }
  o.check(finite, "all ablation cells finite");
  o.check(fs::exists(table), "ablation table written");
  for (const char* mode : {"satellite", "estimate", "both"}) {
    const std::string d = dir + "/ablate/" + mode;
    for (const char* f : {"diff.bundle", "loss.csv", "denoiser.json", "config.toml", "pred/manifest.json", "metrics.csv",
                          "metrics_full.csv"})
      o.check(fs::exists(d + "/" + f), std::string("artifact ") + mode + "/" + f);
  }
  return o;
}

// Every RGF and loss CSV under `a` has a byte-identical twin under `b`.
Outcome compare_trees(const std::string& a, const std::string& b) {
  Outcome o;
  long compared = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    const auto name = e.path().filename().string();
    if (e.path().extension() != ".rgf" && name != "loss.csv") continue;
    const fs::path twin = fs::path(b) / fs::relative(e.path(), a);
    ++compared;
    if (!fs::exists(twin)) {
      o.check(false, "missing " + twin.string());
    } else if (read_text(e.path().string()) != read_text(twin.string())) {
      o.check(false, "differs: " + fs::relative(e.path(), a).string());
    }
  }
  o.check(compared > 0, "no artifacts to compare");
  o.note(fmt("%.0f files compared", static_cast<double>(compared)));
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::vector<int> criteria = {1, 2, 3, 4, 5, 6, 7};
  std::string work = (fs::temp_directory_path() / "diffsr_acceptance").string();
  std::string config = DIFFSR_DESK_CONFIG;
  app.add_option("--criteria", criteria, "criteria to run")->delimiter(',')->check(CLI::Range(1, 7));
  app.add_option("--work", work, "scratch directory (recreated)");
  app.add_option("--config", config, "desk config for criteria 5-7")->check(CLI::ExistingFile);
  CLI11_PARSE(app, argc, argv);
  std::setvbuf(stdout, nullptr, _IOLBF, 0);

  const std::set<int> want(criteria.begin(), criteria.end());
  const std::map<int, double> budget = {{1, 10}, {2, 30}, {3, 60}, {4, 10}, {5, 1800}, {6, 2700}, {7, 4500}};
  const std::map<int, std::string> title = {{1, "diffusion math"}, {2, "metrics oracles"}, {3, "loss/gradient"},
                                            {4, "patch protocol"}, {5, "end-to-end desk run"}, {6, "ablation harness"},
                                            {7, "reproducibility"}};
  bool all = true;
  const auto report = [&](int id, const std::function<Outcome()>& run) -> Outcome {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o.check(false, std::string("error: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    o.check(secs < budget.at(id), fmt("over time budget (%.0f s > %.0f s)", secs, budget.at(id)));
    all = all && o.pass;
    std::printf("criterion %d (%s): %s [%.1f s]\n", id, title.at(id).c_str(), o.pass ? "PASS" : "FAIL", secs);
    for (const auto& n : o.notes) std::printf("    %s\n", n.c_str());
    return o;
  };

  if (want.count(1)) report(1, criterion_1);
  if (want.count(2)) report(2, criterion_2);
  if (want.count(3)) report(3, criterion_3);
  if (want.count(4)) report(4, criterion_4);

  if (want.count(5) || want.count(6) || want.count(7)) {
    const RunConfig cfg = load_config(config);
    fs::remove_all(work);
    fs::create_directories(work);
    const std::string a = work + "/run_a";
    Outcome first5, first6;
    if (want.count(5) || want.count(7)) first5 = report(5, [&] { return criterion_5(cfg, a); });
    if (want.count(6) || want.count(7)) {
      const std::string tm = a + "/tm/tm.bundle";
      first6 = report(6, [&] { return criterion_6(cfg, a, fs::exists(tm) ? tm : std::string()); });
    }
    if (want.count(7)) {
      report(7, [&] {
        const std::string b = work + "/run_b";
        const Outcome again5 = criterion_5(cfg, b);
        const Outcome again6 = criterion_6(cfg, b, b + "/tm/tm.bundle");
        Outcome o = compare_trees(a, b);
        o.check(again5.notes == first5.notes && again6.notes == first6.notes, "reported numbers differ between runs");
        return o;
      });
    }
  }
  std::printf("overall: %s\n", all ? "PASS" : "FAIL");
  return all ? 0 : 1;
}
