#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "diffsr/pipeline.hpp"

namespace fs = std::filesystem;
using namespace diffsr;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string data, tm_bundle, diff_bundle;
};

void add_common(CLI::App* app, Common& c, bool needs_out = true) {
  app->add_option("--config", c.config, "TOML run config (defaults apply when omitted)")->check(CLI::ExistingFile);
  app->add_option("--seed", c.seed, "override the top-level seed and every stage seed");
  auto* out = app->add_option("--out", c.out, "run directory");
  if (needs_out) out->required();
  app->add_option("--data", c.data, "scene manifest (overrides paths.data)");
  app->add_option("--tm-bundle", c.tm_bundle, "stage-1 bundle (overrides paths.tm_bundle)");
  app->add_option("--diff-bundle", c.diff_bundle, "denoiser bundle (overrides paths.diff_bundle)");
}

std::string absolute(const std::string& p) { return fs::absolute(p).lexically_normal().string(); }

RunConfig resolve(const Common& c) {
  const std::uint64_t* seed = c.seed ? &*c.seed : nullptr;
  RunConfig cfg = c.config.empty() ? parse_config("", ".", seed) : load_config(c.config, seed);
  if (!c.data.empty()) cfg.paths.data = absolute(c.data);
  if (!c.tm_bundle.empty()) cfg.paths.tm_bundle = absolute(c.tm_bundle);
  if (!c.diff_bundle.empty()) cfg.paths.diff_bundle = absolute(c.diff_bundle);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-stage satellite-to-radar synthesis"};
  app.require_subcommand(1);

  Common gen_c, patch_c, tm_c, diff_c, sample_c, eval_c, ablate_c;
  std::string mode;
  std::vector<std::string> scene_ids;
  std::string pred, truth, model_id = "model";

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic scene corpus");
  add_common(gen, gen_c);
  auto* patch = app.add_subcommand("patchify", "cut and filter training patches");
  add_common(patch, patch_c);
  auto* train = app.add_subcommand("train", "train a stage");
  train->require_subcommand(1);
  auto* train_tm = train->add_subcommand("tm", "train the stage-1 transform model");
  add_common(train_tm, tm_c);
  auto* train_diff = train->add_subcommand("diff", "train the stage-2 denoiser");
  add_common(train_diff, diff_c);
  train_diff->add_option("--mode", mode, "condition mode")->check(CLI::IsMember({"satellite", "estimate", "both"}));
  auto* smp = app.add_subcommand("sample", "synthesize full scenes");
  add_common(smp, sample_c);
  smp->add_option("--scene", scene_ids, "scene id (repeatable; default: validation scenes)");
  auto* ev = app.add_subcommand("evaluate", "score predictions against truth");
  add_common(ev, eval_c);
  ev->add_option("--pred", pred, "prediction manifest")->required();
  ev->add_option("--truth", truth, "truth manifest (default: paths.data)");
  ev->add_option("--model-id", model_id, "model_id column value");
  auto* abl = app.add_subcommand("ablate", "compare the three condition modes");
  add_common(abl, ablate_c);

  CLI11_PARSE(app, argc, argv);

  try {
    std::string result;
    if (*gen) {
      result = cmd_gen_data(resolve(gen_c), gen_c.out);
    } else if (*patch) {
      result = cmd_patchify(resolve(patch_c), patch_c.out);
    } else if (*train_tm) {
      result = cmd_train_tm(resolve(tm_c), tm_c.out);
    } else if (*train_diff) {
      RunConfig cfg = resolve(diff_c);
      if (!mode.empty()) cfg.diffusion.model.mode = mode_from_string(mode);
      result = cmd_train_diff(cfg, diff_c.out);
    } else if (*smp) {
      RunConfig cfg = resolve(sample_c);
      if (!scene_ids.empty()) cfg.sample.scenes = scene_ids;
      result = cmd_sample(cfg, sample_c.out);
    } else if (*ev) {
      RunConfig cfg = resolve(eval_c);
      const std::string t = truth.empty() ? cfg.paths.data : truth;
      if (t.empty()) fail(ErrorKind::MissingInput, "no truth manifest: pass --truth or set paths.data");
      result = cmd_evaluate(cfg, pred, t, eval_c.out, model_id);
    } else if (*abl) {
      result = cmd_ablate(resolve(ablate_c), ablate_c.out);
    }
    std::printf("%s\n", result.c_str());
    return 0;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "diffsr: %s\n", e.what());
    return 1;
  }
}
