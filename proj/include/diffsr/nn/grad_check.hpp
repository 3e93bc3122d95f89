#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "diffsr/nn/autograd.hpp"
#include "diffsr/rng.hpp"

namespace diffsr::nn {

/// A scalar objective together with the leaves it is differentiated against.
template <class T>
struct GradTarget {
  std::vector<Var<T>> leaves;
  std::function<Var<T>()> objective;
};

struct GradCheckOptions {
  double step = 1e-3;           // central-difference h
  int samples_per_leaf = 24;    // coordinates probed per leaf (all when the leaf is smaller)
  std::uint64_t seed = 7;
  // Per-leaf error denominator floor, as a fraction of that leaf's largest analytic |gradient|.
  double floor_fraction = 1e-2;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t coordinates = 0;
};

/// Reverse-mode gradients of `analytic` against central differences of `oracle`.
///
/// Both targets must describe the same function with leaves of identical shape and
/// value; the oracle is evaluated in 64-bit, so a float model can be checked
/// against its double twin. Relative error per coordinate is
/// |a - n| / max(|a|, |n|, floor_fraction * max_j |a_j|).
template <class T>
GradCheckResult grad_check(GradTarget<T>& analytic, GradTarget<double>& oracle, const GradCheckOptions& opt = {}) {
  require(analytic.leaves.size() == oracle.leaves.size(), ErrorKind::ShapeMismatch,
          "grad_check: analytic and oracle leaf lists differ");
  for (auto& leaf : analytic.leaves) leaf.zero_grad();
  {
    Var<T> loss = analytic.objective();
    require(std::isfinite(static_cast<double>(loss.value()[0])), ErrorKind::NonFinite,
            "grad_check: non-finite objective");
    loss.backward();
  }
  auto evaluate = [&]() {
    NoGradGuard guard;
    const double v = oracle.objective().value()[0];
    require(std::isfinite(v), ErrorKind::NonFinite, "grad_check: non-finite objective under perturbation");
    return v;
  };

  GradCheckResult result;
  CounterRng rng(opt.seed);
  for (std::size_t li = 0; li < analytic.leaves.size(); ++li) {
    auto& a_leaf = analytic.leaves[li];
    auto& o_leaf = oracle.leaves[li];
    require(a_leaf.shape() == o_leaf.shape(), ErrorKind::ShapeMismatch, "grad_check: leaf shapes differ");
    const std::size_t n = a_leaf.value().size();
    const Tensor<T>& grad = a_leaf.grad();
    auto analytic_at = [&](std::size_t i) { return grad.empty() ? 0.0 : static_cast<double>(grad[i]); };

    std::vector<std::size_t> coords;
    if (n <= static_cast<std::size_t>(opt.samples_per_leaf)) {
      for (std::size_t i = 0; i < n; ++i) coords.push_back(i);
    } else {
      for (int s = 0; s < opt.samples_per_leaf; ++s)
        coords.push_back(static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(n) - 1)));
    }
    double scale = 0.0;
    for (std::size_t i = 0; i < n; ++i) scale = std::max(scale, std::abs(analytic_at(i)));
    const double floor = std::max(opt.floor_fraction * scale, 1e-12);

    for (std::size_t i : coords) {
      double& x = o_leaf.mutable_value()[i];
      const double saved = x;
      x = saved + opt.step;
      const double plus = evaluate();
      x = saved - opt.step;
      const double minus = evaluate();
      x = saved;
      const double numeric = (plus - minus) / (2.0 * opt.step);
      const double a = analytic_at(i);
      const double denom = std::max({std::abs(a), std::abs(numeric), floor});
      result.max_relative_error = std::max(result.max_relative_error, std::abs(a - numeric) / denom);
      ++result.coordinates;
    }
  }
  return result;
}

inline GradCheckResult grad_check(GradTarget<double>& target, const GradCheckOptions& opt = {}) {
  return grad_check<double>(target, target, opt);
}

}  // namespace diffsr::nn
