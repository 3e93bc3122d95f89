#pragma once

#include <cmath>

#include "diffsr/nn/ops.hpp"
#include "diffsr/rng.hpp"

namespace diffsr::nn {

/// Normal(0, std) tensor drawn in double precision so that float and double
/// instantiations seeded alike start from the same (rounded) weights.
template <class T>
Tensor<T> normal_tensor(Shape shape, double stddev, CounterRng& rng) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.span()) v = static_cast<T>(stddev * rng.normal());
  return t;
}

template <class T>
struct Dense {
  Var<T> weight;  // (in, out)
  Var<T> bias;    // (out)

  Dense() = default;
  Dense(int in, int out, CounterRng& rng, double gain = 1.0, bool with_bias = true)
      : weight(Var<T>::parameter(normal_tensor<T>({in, out}, gain / std::sqrt(static_cast<double>(in)), rng))) {
    if (with_bias) bias = Var<T>::parameter(Tensor<T>({out}));
  }

  Var<T> operator()(const Var<T>& x) const { return linear(x, weight, bias); }

  void collect(ParamList<T>& out) const {
    out.push_back(weight);
    if (bias.defined()) out.push_back(bias);
  }
};

template <class T>
struct Conv2d {
  Var<T> weight;  // (out, in, k, k)
  Var<T> bias;
  int stride = 1;
  int pad = 0;

  Conv2d() = default;
  Conv2d(int in, int out, int kernel, int stride_, int pad_, CounterRng& rng, double gain = 1.0)
      : weight(Var<T>::parameter(normal_tensor<T>(
            {out, in, kernel, kernel}, gain / std::sqrt(static_cast<double>(in * kernel * kernel)), rng))),
        bias(Var<T>::parameter(Tensor<T>({out}))),
        stride(stride_),
        pad(pad_) {}

  Var<T> operator()(const Var<T>& x) const { return conv2d(x, weight, bias, stride, pad); }

  void collect(ParamList<T>& out) const {
    out.push_back(weight);
    out.push_back(bias);
  }
};

template <class T>
struct LayerNorm {
  Var<T> gamma;
  Var<T> beta;

  LayerNorm() = default;
  explicit LayerNorm(int dim)
      : gamma(Var<T>::parameter(Tensor<T>({dim}, T{1}))), beta(Var<T>::parameter(Tensor<T>({dim}))) {}

  Var<T> operator()(const Var<T>& x) const { return layer_norm(x, gamma, beta); }

  void collect(ParamList<T>& out) const {
    out.push_back(gamma);
    out.push_back(beta);
  }
};

/// Largest group count <= 8 that divides `channels` with at least two channels per group.
/// One-channel groups would erase any per-channel bias added before the norm.
inline int default_groups(int channels) {
  for (int g = 8; g > 1; --g)
    if (channels % g == 0 && channels / g >= 2) return g;
  return 1;
}

template <class T>
struct GroupNorm {
  Var<T> gamma;
  Var<T> beta;
  int groups = 1;

  GroupNorm() = default;
  GroupNorm(int groups_, int channels)
      : gamma(Var<T>::parameter(Tensor<T>({channels}, T{1}))),
        beta(Var<T>::parameter(Tensor<T>({channels}))),
        groups(groups_) {}

  Var<T> operator()(const Var<T>& x) const { return group_norm(x, groups, gamma, beta); }

  void collect(ParamList<T>& out) const {
    out.push_back(gamma);
    out.push_back(beta);
  }
};

/// Multi-head self-attention over (B, N, D) tokens.
template <class T>
struct SelfAttention {
  Dense<T> qkv;
  Dense<T> proj;
  int heads = 1;

  SelfAttention() = default;
  SelfAttention(int dim, int heads_, CounterRng& rng) : qkv(dim, 3 * dim, rng), proj(dim, dim, rng), heads(heads_) {
    require(dim % heads_ == 0, ErrorKind::InvalidArgument, "attention heads must divide the embedding width");
  }

  Var<T> operator()(const Var<T>& x) const { return proj(self_attention(qkv(x), heads)); }

  void collect(ParamList<T>& out) const {
    qkv.collect(out);
    proj.collect(out);
  }
};

}  // namespace diffsr::nn
