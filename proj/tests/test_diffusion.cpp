#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "diffsr/diffusion.hpp"
#include "diffsr/nn/grad_check.hpp"
#include "support/oracles.hpp"

using namespace diffsr;
using namespace diffsr::nn;
using namespace diffsr::oracles;

namespace {

Tensor<double> scalar4(double v) { return Tensor<double>({1, 1, 1, 1}, v); }

Tensor<float> randn(Shape s, std::uint64_t seed) { 
  CounterRng rng(seed);
  return normal_tensor<float>(std::move(s), 1.0, rng);
}

}  // namespace

TEST(Schedule, CumulativeProductIdentity) {
  for (int T : {1, 10, 200, 1000}) {
    const auto s = build_schedule(T, 1e-4, 0.02);
    double prod = 1.0;
    for (int t = 1; t <= T; ++t) {
      prod *= 1.0 - s.beta_at(t);
      EXPECT_NEAR(s.alpha_bar_at(t), prod, 1e-12);
      EXPECT_EQ(s.alpha_at(t), 1.0 - s.beta_at(t));
      EXPECT_EQ(s.sigma_at(t), std::sqrt(s.beta_at(t)));
      if (t > 1) {
        EXPECT_LT(s.alpha_bar_at(t), s.alpha_bar_at(t - 1));
      }
    }
  }
}

TEST(Schedule, LinearEndpoints) {
  const auto s = build_schedule(1000, 1e-4, 0.02);
  EXPECT_DOUBLE_EQ(s.beta_at(1), 1e-4);
  EXPECT_DOUBLE_EQ(s.beta_at(1000), 0.02);
  EXPECT_GE(s.alpha_bar_at(1000), 3e-5);
  EXPECT_LE(s.alpha_bar_at(1000), 5e-5);
}

TEST(Schedule, SingleStep) {
  const auto s = build_schedule(1, 0.5, 0.5);
  ASSERT_EQ(s.T, 1);
  EXPECT_DOUBLE_EQ(s.alpha_bar_at(1), 0.5);
}

TEST(Schedule, Errors) {
  EXPECT_THROW(build_schedule(0, 1e-4, 0.02), Error);
  EXPECT_THROW(build_schedule(10, 0.0, 0.02), Error);
  EXPECT_THROW(build_schedule(10, 0.03, 0.02), Error);
  EXPECT_THROW(build_schedule(10, 1e-4, 1.0), Error);
  const auto s = build_schedule(10, 1e-4, 0.02);
  EXPECT_THROW(s.alpha_bar_at(0), Error);
  EXPECT_THROW(s.alpha_bar_at(11), Error);
}

TEST(Schedule, RespacePreservesKeptAlphaBar) {
  const auto s = build_schedule(200, 1e-4, 0.02);
  const auto r = respace(s, 50);
  ASSERT_EQ(r.T, 50);
  EXPECT_EQ(r.model_step(50), 200);
  for (int i = 1; i <= 50; ++i) EXPECT_NEAR(r.alpha_bar_at(i), s.alpha_bar_at(r.model_step(i)), 1e-12);
  EXPECT_EQ(r.train_steps, 200);
}

TEST(ForwardSample, DirectEvaluation) {
  const auto s = schedule_from_betas({0.75});
  const auto y = forward_sample(scalar4(1.0), 1, scalar4(0.5), s);
  EXPECT_NEAR(y[0], 0.9330127, 1e-7);
}

TEST(ForwardSample, NoNoiseLimit) {
  const auto s = schedule_from_betas({0.0, 0.0});
  const auto y0 = randn({1, 1, 3, 3}, 1).cast<double>();
  EXPECT_TRUE(forward_sample(y0, 2, randn({1, 1, 3, 3}, 2).cast<double>(), s) == y0);
}

TEST(ForwardSample, OutOfRange) {
  const auto s = build_schedule(5, 1e-4, 0.02);
  EXPECT_THROW(forward_sample(scalar4(1.0), 6, scalar4(0.0), s), Error);
}

TEST(ForwardSampleProperty, MomentMatching) {
  const auto s = build_schedule(1000, 1e-4, 0.02);
  CounterRng pick(17);
  const int n = 10000;
  for (int trial = 0; trial < 5; ++trial) {
    const double y0 = pick.uniform(-1.0, 1.0);
    const int t = static_cast<int>(pick.uniform_int(1, 1000));
    CounterRng rng(derive_key(23, static_cast<std::uint64_t>(trial)));
    Tensor<double> eps({n, 1, 1, 1});
    for (auto& v : eps.span()) v = rng.normal();
    const auto y = forward_sample(Tensor<double>({n, 1, 1, 1}, y0), t, eps, s);
    double m = 0.0, m2 = 0.0;
    for (double v : y.span()) m += v;
    m /= n;
    for (double v : y.span()) m2 += (v - m) * (v - m);
    const double var = m2 / (n - 1);
    const double ab = s.alpha_bar_at(t), true_var = 1.0 - ab;
    EXPECT_LT(std::abs(m - std::sqrt(ab) * y0), 3.0 * std::sqrt(true_var / n)) << "t=" << t;
    // Var of the sample variance of a normal is 2 sigma^4 / (n - 1).
    EXPECT_LT(std::abs(var - true_var), 3.0 * true_var * std::sqrt(2.0 / (n - 1))) << "t=" << t;
  }
}

TEST(ReverseStep, ExactRecoveryAtOne) {
  const auto s = schedule_from_betas({0.2});
  const auto y1 = forward_sample(scalar4(1.0), 1, scalar4(0.5), s);
  EXPECT_NEAR(y1[0], 1.1180340, 1e-7);
  const auto y0 = reverse_step(y1, 1, scalar4(0.5), scalar4(123.0), s);
  EXPECT_NEAR(y0[0], 1.0, 1e-6);
}

TEST(ReverseStepProperty, ExactRecoveryRandom) {
  CounterRng rng(4);
  for (int i = 0; i < 50; ++i) {
    const auto s = schedule_from_betas({rng.uniform(1e-4, 0.9)});
    const double y0 = rng.uniform(-1, 1), eps = rng.normal();
    const auto y1 = forward_sample(scalar4(y0), 1, scalar4(eps), s);
    EXPECT_NEAR(reverse_step(y1, 1, scalar4(eps), scalar4(rng.normal()), s)[0], y0, 1e-6);
  }
}

TEST(ReverseStep, ZeroBetaIsIdentity) {
  const auto s = schedule_from_betas({0.1, 0.0});
  const auto y = reverse_step(scalar4(0.7), 2, scalar4(0.3), scalar4(0.0), s);
  EXPECT_DOUBLE_EQ(y[0], 0.7);
}

TEST(ReverseStep, PosteriorMeanWithTrueEps) {
  const auto s = build_schedule(50, 1e-4, 0.02);
  for (int t : {2, 10, 50}) {
    const double y0 = 0.6, eps = -0.8;
    const auto yt = forward_sample(scalar4(y0), t, scalar4(eps), s);
    const double got = reverse_step(yt, t, scalar4(eps), scalar4(0.0), s)[0];
    const double ab_prev = s.alpha_bar_at(t - 1), ab = s.alpha_bar_at(t), a = s.alpha_at(t);
    const double want = std::sqrt(ab_prev) * y0 + std::sqrt(a) * (1.0 - ab_prev) / std::sqrt(1.0 - ab) * eps;
    EXPECT_NEAR(got, want, 1e-6) << t;
  }
}

TEST(ReverseStepClippedProperty, WideRangeMatchesPlainStep) {
  CounterRng rng(21);
  const auto full = build_schedule(60, 5e-4, 0.1);
  for (const auto& s : {full, respace(full, 12)}) {
    for (int i = 0; i < 40; ++i) {
      const int t = 1 + static_cast<int>(rng.uniform(0, s.T - 1e-9));
      const auto y = scalar4(rng.normal()), e = scalar4(rng.normal()), z = scalar4(rng.normal());
      EXPECT_NEAR(reverse_step_clipped(y, t, e, z, s, -1e9, 1e9)[0], reverse_step(y, t, e, z, s)[0], 1e-9) << t;
    }
  }
}

TEST(ReverseStepClipped, LastStepReturnsClampedPrediction) {
  const auto s = schedule_from_betas({0.2});
  // x0 = (y - sqrt(0.2) eps) / sqrt(0.8)
  const auto y = scalar4(1.5), e = scalar4(0.1);
  const double x0 = (1.5 - std::sqrt(0.2) * 0.1) / std::sqrt(0.8);
  EXPECT_NEAR(reverse_step_clipped(y, 1, e, scalar4(9.0), s, -5.0, 5.0)[0], x0, 1e-12);
  EXPECT_DOUBLE_EQ(reverse_step_clipped(y, 1, e, scalar4(9.0), s, -1.0, 1.0)[0], 1.0);
}

TEST(ReverseStepClipped, ClippedPredictionEntersPosteriorMean) {
  const auto s = build_schedule(10, 1e-2, 0.2);
  const int t = 6;
  const double ab = s.alpha_bar_at(t), ab_prev = s.alpha_bar_at(t - 1);
  // y chosen so the unclipped x0 prediction is 3.
  const double y = std::sqrt(ab) * 3.0;
  const double got = reverse_step_clipped(scalar4(y), t, scalar4(0.0), scalar4(0.0), s, -1.0, 1.0)[0];
  const double want = s.beta_at(t) * std::sqrt(ab_prev) / (1.0 - ab) * 1.0 +
                      (1.0 - ab_prev) * std::sqrt(s.alpha_at(t)) / (1.0 - ab) * y;
  EXPECT_NEAR(got, want, 1e-12);
}

TEST(Condition, ChannelCounts) {
  const auto sat = randn({2, 4, 8, 8}, 1), est = randn({2, 1, 8, 8}, 2);
  const auto both = assemble_condition(ConditionMode::Both, &sat, &est);
  EXPECT_EQ(both.shape(), (Shape{2, 5, 8, 8}));
  EXPECT_EQ(assemble_condition(ConditionMode::SatelliteOnly, &sat, nullptr).dim(1), 4);
  EXPECT_EQ(assemble_condition(ConditionMode::EstimateOnly, nullptr, &est).dim(1), 1);
  // Order: satellite channels then estimate.
  EXPECT_EQ(both[64 * 4], est[0]);
  EXPECT_EQ(both[64 * 5], sat[64 * 4]);
  EXPECT_EQ(condition_channels(ConditionMode::EstimateOnly), 1);
}

TEST(Condition, MissingInput) {
  const auto sat = randn({1, 4, 4, 4}, 1);
  try {
    assemble_condition(ConditionMode::Both, &sat, nullptr);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::MissingInput);
  }
  EXPECT_THROW(assemble_condition(ConditionMode::SatelliteOnly, nullptr, nullptr), Error);
}

TEST(Condition, ModeNames) {
  for (auto m : {ConditionMode::SatelliteOnly, ConditionMode::EstimateOnly, ConditionMode::Both})
    EXPECT_EQ(mode_from_string(to_string(m)), m);
  EXPECT_THROW(mode_from_string("radar"), Error);
}

TEST(LossStep, OracleModels) {
  const auto s = build_schedule(100, 1e-4, 0.02);
  const int B = 4;
  const auto y0 = randn({B, 1, 32, 32}, 1), eps = randn({B, 1, 32, 32}, 2), cond = randn({B, 5, 32, 32}, 3);
  const std::vector<int> t = {1, 30, 60, 100};
  EpsModel<float> exact = [&](const Var<float>&, const Var<float>&, std::span<const int>) { return Var<float>::constant(eps); };
  EXPECT_EQ(diffusion_loss_step(y0, cond, t, eps, exact, s).value()[0], 0.0f);
  EpsModel<float> zeros = [&](const Var<float>& y, const Var<float>&, std::span<const int>) {
    return Var<float>::constant(Tensor<float>(y.shape()));
  };
  double ms = 0.0;
  for (float v : eps.span()) ms += static_cast<double>(v) * v;
  ms /= static_cast<double>(eps.size());
  const double loss = diffusion_loss_step(y0, cond, t, eps, zeros, s).value()[0];
  EXPECT_NEAR(loss, ms, 1e-6);
  EXPECT_NEAR(loss, 1.0, 0.1);
}

TEST(LossStep, GradientWrtModelOutput) {
  const auto s = build_schedule(20, 1e-4, 0.02);
  CounterRng rng(5);
  const auto y0 = normal_tensor<double>({2, 1, 4, 4}, 1.0, rng), eps = normal_tensor<double>({2, 1, 4, 4}, 1.0, rng);
  const auto cond = normal_tensor<double>({2, 1, 4, 4}, 1.0, rng);
  auto out = Var<double>::parameter(normal_tensor<double>({2, 1, 4, 4}, 1.0, rng));
  const std::vector<int> t = {3, 17};
  EpsModel<double> model = [&](const Var<double>& y, const Var<double>&, std::span<const int>) {
    return add(out, scale(y, 0.0));
  };
  GradTarget<double> target{{out}, [&] { return diffusion_loss_step(y0, cond, t, eps, model, s); }};
  EXPECT_LT(grad_check(target).max_relative_error, 1e-4);
}

TEST(LossStep, NonFinite) {
  const auto s = build_schedule(10, 1e-4, 0.02);
  const auto y0 = randn({1, 1, 4, 4}, 1);
  const std::vector<int> t = {2};
  EpsModel<float> bad = [](const Var<float>& y, const Var<float>&, std::span<const int>) {
    return Var<float>::constant(Tensor<float>(y.shape(), std::nanf("")));
  };
  try {
    diffusion_loss_step(y0, y0, t, y0, bad, s);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::NonFinite);
  }
}

TEST(Sample, SingleStepClosedForm) {
  const auto s = schedule_from_betas({0.3});
  Tensor<float> seen;
  EpsModel<float> zero = [&](const Var<float>& y, const Var<float>&, std::span<const int>) {
    seen = y.value();
    return Var<float>::constant(Tensor<float>(y.shape()));
  };
  const std::vector<std::uint64_t> seeds = {42};
  const auto out = sample(randn({1, 4, 8, 8}, 1), zero, s, seeds);
  ASSERT_EQ(seen.size(), out.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    EXPECT_FLOAT_EQ(out[i], std::clamp(static_cast<float>(seen[i] / std::sqrt(0.7)), -1.0f, 1.0f));
}

TEST(Sample, DeterministicAndBatchIndependent) {
  const DenoiserConfig cfg{8, 2, 16, ConditionMode::Both};
  const Denoiser<float> net(cfg, 3);
  const auto s = build_schedule(8, 1e-4, 0.02);
  const auto cond = randn({3, 5, 8, 8}, 2);
  const std::vector<std::uint64_t> seeds = {1, 2, 3};
  const auto a = sample(cond, bind(net, s), s, seeds);
  const auto b = sample(cond, bind(net, s), s, seeds);
  EXPECT_TRUE(a == b);
  Tensor<float> one({1, 5, 8, 8});
  std::copy_n(cond.data() + 2 * 5 * 64, 5 * 64, one.data());
  const std::vector<std::uint64_t> third = {3};
  const auto c = sample(one, bind(net, s), s, third);
  for (int i = 0; i < 64; ++i) EXPECT_EQ(c[static_cast<std::size_t>(i)], a[static_cast<std::size_t>(2 * 64 + i)]);
  for (float v : a.span()) {
    EXPECT_GE(v, -1.0f);
    EXPECT_LE(v, 1.0f);
  }
}

// A model that returns the exact noise for a known y0 makes the last step land on y0,
// on full and respaced schedules alike.
TEST(Sample, OracleModelRecoversTarget) {
  const auto full = build_schedule(100, 5e-4, 0.1);
  for (const auto& s : {full, respace(full, 20)}) {
    const auto y0 = randn({1, 1, 6, 6}, 8);
    Tensor<float> target = y0;
    for (auto& v : target.span()) v = std::clamp(v * 0.4f, -0.9f, 0.9f);
    EpsModel<float> oracle = [&](const Var<float>& y, const Var<float>&, std::span<const int> mt) {
      int t = 0;
      for (int i = 1; i <= s.T; ++i)
        if (s.model_step(i) == mt[0]) t = i;
      const double ab = s.alpha_bar_at(t);
      Tensor<float> eps(y.shape());
      for (std::size_t i = 0; i < eps.size(); ++i)
        eps[i] = static_cast<float>((y.value()[i] - std::sqrt(ab) * target[i]) / std::sqrt(1.0 - ab));
      return Var<float>::constant(eps);
    };
    const std::vector<std::uint64_t> seeds = {5};
    for (bool clip : {false, true}) {
      const auto out = sample(randn({1, 1, 6, 6}, 9), oracle, s, seeds, -1.0f, 1.0f, clip);
      for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out[i], target[i], 1e-4);
    }
  }
}

TEST(Sample, NonFiniteNamesStep) {
  const auto s = build_schedule(5, 1e-4, 0.02);
  EpsModel<float> bad = [](const Var<float>& y, const Var<float>&, std::span<const int> t) {
    return Var<float>::constant(Tensor<float>(y.shape(), t[0] == 3 ? std::nanf("") : 0.0f));
  };
  const std::vector<std::uint64_t> seeds = {1};
  try {
    sample(randn({1, 1, 4, 4}, 1), bad, s, seeds);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::NonFinite);
    EXPECT_NE(std::string(e.what()).find("t=3"), std::string::npos) << e.what();
  }
}

TEST(Denoiser, ShapeContract) {
  const DenoiserConfig cfg{8, 3, 16, ConditionMode::Both};
  const Denoiser<float> net(cfg, 1);
  const std::vector<int> t = {7};
  const auto out = net.forward(Var<float>::constant(randn({1, 1, 64, 64}, 1)), Var<float>::constant(randn({1, 5, 64, 64}, 2)), t, 200);
  EXPECT_EQ(out.shape(), (Shape{1, 1, 64, 64}));
  EXPECT_THROW(net.forward(Var<float>::constant(randn({1, 1, 64, 64}, 1)), Var<float>::constant(randn({1, 4, 64, 64}, 2)), t, 200),
               Error);
}

TEST(Denoiser, TimeEmbeddingIsLive) {
  const DenoiserConfig cfg{8, 2, 16, ConditionMode::EstimateOnly};
  const Denoiser<float> net(cfg, 1);
  const auto y = Var<float>::constant(randn({1, 1, 16, 16}, 1)), c = Var<float>::constant(randn({1, 1, 16, 16}, 2));
  const std::vector<int> t1 = {1}, tT = {200};
  EXPECT_FALSE(net.forward(y, c, t1, 200).value() == net.forward(y, c, tT, 200).value());
}

TEST(Denoiser, GradCheckToySize) { EXPECT_LT(denoiser_grad_error(), 1e-3); }

TEST(Denoiser, ConfigJsonCarriesConditionChannels) {
  const DenoiserConfig cfg{16, 3, 64, ConditionMode::EstimateOnly};
  const auto j = cfg.to_json();
  EXPECT_EQ(j.at("condition_channels").get<int>(), 1);
  const auto back = DenoiserConfig::from_json(j);
  EXPECT_EQ(back.mode, ConditionMode::EstimateOnly);
  EXPECT_EQ(back.base_channels, 16);
  DenoiserConfig bad = cfg;
  bad.depth = 0;
  EXPECT_THROW(bad.validate(), Error);
}

namespace {

DenoiserConfig anchored(ConditionMode mode) {
  DenoiserConfig cfg{8, 2, 16, mode};
  cfg.anchor = true;
  return cfg;
}

}  // namespace

TEST(Anchor, AddsEstimateSkipToNetOutput) {
  for (ConditionMode mode : {ConditionMode::EstimateOnly, ConditionMode::Both}) {
    DenoiserConfig plain_cfg = anchored(mode);
    plain_cfg.anchor = false;
    const Denoiser<float> plain(plain_cfg, 4), anch(anchored(mode), 4);
    const NoiseSchedule full = build_schedule(50, 5e-4, 0.1);
    const NoiseSchedule s = respace(full, 7);
    const int C = condition_channels(mode);
    const auto y = randn({2, 1, 16, 16}, 11), c = randn({2, C, 16, 16}, 12);
    const std::vector<int> t = {s.model_step(2), s.model_step(7)};
    const auto a = bind(anch, s)(Var<float>::constant(y), Var<float>::constant(c), t).value();
    const auto p = bind(plain, s)(Var<float>::constant(y), Var<float>::constant(c), t).value();
    const std::size_t plane = 16 * 16;
    for (int b = 0; b < 2; ++b) {
      const double ab = full.alpha_bar_at(t[static_cast<std::size_t>(b)]);
      for (std::size_t i = 0; i < plane; ++i) {
        const std::size_t k = b * plane + i;
        const double est = c[(static_cast<std::size_t>(b) * C + (C - 1)) * plane + i];
        EXPECT_NEAR(a[k] - p[k], std::sqrt(1.0 - ab) * (y[k] - std::sqrt(ab) * est), 1e-5);
      }
    }
  }
}

TEST(Anchor, ZeroNetPredictsBlendOfInputAndEstimate) {
  const Denoiser<float> net(anchored(ConditionMode::EstimateOnly), 4);
  auto params = net.parameters();
  const std::vector<float> zeros(flatten_parameters(params).size(), 0.0f);
  assign_parameters<float, float>(params, zeros);
  const NoiseSchedule s = build_schedule(20, 5e-4, 0.1);
  const auto y = randn({1, 1, 8, 8}, 21), est = randn({1, 1, 8, 8}, 22);
  for (int t : {1, 10, 20}) {
    const std::vector<int> ts = {t};
    const auto eps = bind(net, s)(Var<float>::constant(y), Var<float>::constant(est), ts).value();
    const double ab = s.alpha_bar_at(t);
    for (std::size_t i = 0; i < y.size(); ++i) {
      const double x0 = (y[i] - std::sqrt(1.0 - ab) * eps[i]) / std::sqrt(ab);
      EXPECT_NEAR(x0, std::sqrt(ab) * y[i] + (1.0 - ab) * est[i], 1e-4);
    }
  }
}

TEST(Anchor, IgnoredWithoutEstimateChannel) {
  const Denoiser<float> net(anchored(ConditionMode::SatelliteOnly), 4);
  EXPECT_FALSE(net.config().anchor);
}

TEST(Anchor, JsonRoundTrip) {
  const auto j = anchored(ConditionMode::Both).to_json();
  EXPECT_TRUE(DenoiserConfig::from_json(j).anchor);
  auto old = j;
  old.erase("anchor");
  EXPECT_FALSE(DenoiserConfig::from_json(old).anchor);
}

TEST(Anchor, StepOutsideScheduleRejected) {
  const Denoiser<float> net(anchored(ConditionMode::EstimateOnly), 4);
  const NoiseSchedule s = respace(build_schedule(20, 5e-4, 0.1), 4);
  int missing = 1;
  while (std::find(s.model_t.begin(), s.model_t.end(), missing) != s.model_t.end()) ++missing;
  const std::vector<int> t = {missing};
  EXPECT_THROW(bind(net, s)(Var<float>::constant(randn({1, 1, 8, 8}, 1)), Var<float>::constant(randn({1, 1, 8, 8}, 2)), t),
               Error);
}

namespace {

std::vector<DiffusionExample> toy_examples(int C) {
  std::vector<DiffusionExample> ex;
  for (int i = 0; i < 4; ++i) {
    auto target = randn({1, 1, 8, 8}, 100 + i);
    for (auto& v : target.span()) v = std::clamp(v * 0.3f, -1.0f, 1.0f);
    ex.push_back({target, randn({1, C, 8, 8}, 200 + i)});
  }
  return ex;
}

}  // namespace

TEST(TrainDiffusion, ZeroStepsKeepsInit) {
  const DenoiserConfig cfg{4, 2, 8, ConditionMode::Both};
  const auto r = train_diffusion(toy_examples(5), cfg, ScheduleConfig{20, 1e-4, 0.02, 0}, NormSpec{}, 0, 9);
  const Denoiser<float> init(cfg, 9);
  const auto flat = flatten_parameters(init.parameters());
  ASSERT_EQ(flat.size(), r.bundle.weights.size());
  for (std::size_t i = 0; i < flat.size(); ++i) EXPECT_EQ(static_cast<float>(flat[i]), r.bundle.weights[i]);
  EXPECT_TRUE(r.log.empty());
}

TEST(TrainDiffusion, EstimateOnlyDeterministic) {
  const DenoiserConfig cfg{4, 2, 8, ConditionMode::EstimateOnly};
  DiffusionTrainOptions opt{2, 1e-3};
  const auto a = train_diffusion(toy_examples(1), cfg, ScheduleConfig{20, 1e-4, 0.02, 0}, NormSpec{}, 15, 4, opt);
  const auto b = train_diffusion(toy_examples(1), cfg, ScheduleConfig{20, 1e-4, 0.02, 0}, NormSpec{}, 15, 4, opt);
  ASSERT_EQ(a.log.size(), 15u);
  for (std::size_t i = 0; i < a.log.size(); ++i) EXPECT_EQ(a.log[i].loss, b.log[i].loss);
  EXPECT_EQ(a.bundle.weights, b.bundle.weights);
  EXPECT_EQ(DenoiserConfig::from_json(a.bundle.architecture).condition_channels(), 1);
  const auto back = denoiser_from_bundle(a.bundle);
  EXPECT_EQ(schedule_from_bundle(a.bundle).T, 20);
  EXPECT_EQ(parameter_count(back.parameters()), a.bundle.weights.size());
}

TEST(TrainDiffusion, EmaAfterOneStep) {
  const DenoiserConfig cfg{4, 2, 8, ConditionMode::Both};
  const ScheduleConfig sc{20, 1e-4, 0.02, 0};
  const auto last = train_diffusion(toy_examples(5), cfg, sc, NormSpec{}, 1, 9, DiffusionTrainOptions{2, 1e-2});
  const auto avg = train_diffusion(toy_examples(5), cfg, sc, NormSpec{}, 1, 9, DiffusionTrainOptions{2, 1e-2, 0.25});
  const auto init = flatten_parameters(Denoiser<float>(cfg, 9).parameters());
  ASSERT_EQ(avg.log[0].loss, last.log[0].loss);
  for (std::size_t i = 0; i < init.size(); ++i) {
    const double want = 0.25 * init[i] + 0.75 * last.bundle.weights[i];
    EXPECT_NEAR(avg.bundle.weights[i], want, 1e-6 * (1.0 + std::abs(want))) << i;
  }
  EXPECT_THROW(train_diffusion(toy_examples(5), cfg, sc, NormSpec{}, 1, 9, DiffusionTrainOptions{2, 1e-2, 1.0}), Error);
}

TEST(TrainDiffusion, MismatchedConditionRejected) {
  const DenoiserConfig cfg{4, 2, 8, ConditionMode::Both};
  EXPECT_THROW(train_diffusion(toy_examples(4), cfg, ScheduleConfig{20, 1e-4, 0.02, 0}, NormSpec{}, 2, 1), Error);
}
