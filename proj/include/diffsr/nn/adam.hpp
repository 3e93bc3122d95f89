#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "diffsr/nn/autograd.hpp"

namespace diffsr::nn {

struct AdamHyper {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class T>
struct AdamState {
  std::vector<T> m;
  std::vector<T> v;
  long step = 0;
};

/// One bias-corrected Adam update, in place. Moment buffers are created zeroed on first use.
template <class T>
void adam_step(std::span<T> weights, std::span<const T> grads, AdamState<T>& state, const AdamHyper& hp) {
  require(weights.size() == grads.size(), ErrorKind::ShapeMismatch,
          "adam_step: " + std::to_string(weights.size()) + " weights vs " + std::to_string(grads.size()) + " grads");
  if (state.m.empty() && state.step == 0) {
    state.m.assign(weights.size(), T{0});
    state.v.assign(weights.size(), T{0});
  }
  require(state.m.size() == weights.size() && state.v.size() == weights.size(), ErrorKind::ShapeMismatch,
          "adam_step: optimizer state does not match weight count");
  ++state.step;
  const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(hp.beta1), b2 = static_cast<T>(hp.beta2);
  const T step_size = static_cast<T>(hp.lr / bc1);
  const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
  const T eps = static_cast<T>(hp.eps);
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const T g = grads[i];
    state.m[i] = b1 * state.m[i] + (T{1} - b1) * g;
    state.v[i] = b2 * state.v[i] + (T{1} - b2) * g * g;
    weights[i] -= step_size * state.m[i] / (std::sqrt(state.v[i]) * inv_sqrt_bc2 + eps);
  }
}

/// Adam over a parameter list; parameters without a gradient buffer are treated as g = 0.
template <class T>
class Adam {
 public:
  Adam(ParamList<T> params, AdamHyper hyper) : params_(std::move(params)), states_(params_.size()), hyper_(hyper) {}

  void zero_grad() { zero_grads(params_); }

  void step() {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      Tensor<T>& g = p.grad_buffer();
      adam_step<T>(p.mutable_value().span(), g.span(), states_[i], hyper_);
    }
  }

  long steps() const { return states_.empty() ? 0 : states_.front().step; }

 private:
  ParamList<T> params_;
  std::vector<AdamState<T>> states_;
  AdamHyper hyper_;
};

}  // namespace diffsr::nn
