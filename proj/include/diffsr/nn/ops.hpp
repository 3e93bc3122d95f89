#pragma once

#include <vector>

#include "diffsr/nn/autograd.hpp"

// Differentiable primitives. Image tensors are (batch, channels, rows, cols);
// token tensors are (batch, tokens, features).
namespace diffsr::nn {

template <class T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> scale(const Var<T>& a, T s);
/// a * x + b elementwise.
template <class T> Var<T> affine(const Var<T>& x, T a, T b);
template <class T> Var<T> reshape(const Var<T>& a, Shape shape);

template <class T> Var<T> silu(const Var<T>& x);
template <class T> Var<T> gelu(const Var<T>& x);
/// Hard clamp; gradient passes only strictly inside (lo, hi).
template <class T> Var<T> clamp(const Var<T>& x, T lo, T hi);

template <class T> Var<T> sum(const Var<T>& x);
template <class T> Var<T> mean(const Var<T>& x);
/// sum_i x_i * w_i against a constant weight tensor of the same size.
template <class T> Var<T> sum_product(const Var<T>& x, const Tensor<T>& w);
/// Mean squared difference to a constant target.
template <class T> Var<T> mse(const Var<T>& pred, const Tensor<T>& target);

/// x[..., in] * W[in, out] + b[out]; `b` may be undefined.
template <class T> Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b);

/// 2-D cross-correlation. w is (out, in, k, k); `b` may be undefined.
template <class T> Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad);
template <class T> Var<T> upsample_nearest2x(const Var<T>& x);
template <class T> Var<T> avg_pool2x(const Var<T>& x);
template <class T> Var<T> concat_channels(const std::vector<Var<T>>& xs);
/// x(b, c, :, :) + v(b, c)
template <class T> Var<T> add_channel_bias(const Var<T>& x, const Var<T>& v);

template <class T> Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5));
template <class T>
Var<T> group_norm(const Var<T>& x, int groups, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5));

/// Fused multi-head scaled dot-product self-attention. qkv is (B, N, 3D) laid out
/// as [q | k | v]; the result is (B, N, D) with heads concatenated.
template <class T> Var<T> self_attention(const Var<T>& qkv, int heads);

/// (B, C, H, W) -> (B, (H/p)(W/p), C p p), tokens row-major over the patch grid.
template <class T> Var<T> image_to_tokens(const Var<T>& x, int patch);
/// Inverse of image_to_tokens.
template <class T> Var<T> tokens_to_image(const Var<T>& tokens, int channels, int rows, int cols, int patch);
/// x(b, n, d) + rows(n, d)
template <class T> Var<T> add_rows(const Var<T>& x, const Var<T>& rows);
/// Bilinear resampling of an (gh*gw, D) grid of vectors to (oh*ow, D), half-pixel centers.
template <class T> Var<T> resize_grid(const Var<T>& grid, int gh, int gw, int oh, int ow);

}  // namespace diffsr::nn
