#include "diffsr/nn/ops.hpp"

#include <cmath>
#include <numbers>

#include <Eigen/Core>

namespace diffsr::nn {

namespace {

thread_local bool g_grad_enabled = true;

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapM = Eigen::Map<Mat<T>>;
template <class T>
using CMapM = Eigen::Map<const Mat<T>>;
template <class T>
using StridedM = Eigen::Map<Mat<T>, 0, Eigen::OuterStride<>>;
template <class T>
using CStridedM = Eigen::Map<const Mat<T>, 0, Eigen::OuterStride<>>;
template <class T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

template <class T>
void check_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  require(a.shape() == b.shape(), ErrorKind::ShapeMismatch,
          std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
}

template <class T>
void check_rank(const Var<T>& x, int rank, const char* op) {
  require(x.value().ndim() == rank, ErrorKind::ShapeMismatch,
          std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(x.shape()));
}

template <class T>
bool wants_grad(const Node<T>& n, std::size_t i) {
  return i < n.inputs.size() && n.inputs[i] && n.inputs[i]->requires_grad;
}

template <class T, class F, class D>
Var<T> unary(const Var<T>& x, F forward, D derivative) {
  Tensor<T> out(x.shape());
  const T* xv = x.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = forward(xv[i]);
  return make_op<T>(std::move(out), {x}, [derivative](Node<T>& n) {
    const T* xs = n.inputs[0]->value.data();
    T* g = n.inputs[0]->grad_buffer().data();
    for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * derivative(xs[i]);
  });
}

template <class T>
void im2col(const T* x, int channels, int rows, int cols, int k, int stride, int pad, int out_rows, int out_cols,
            T* col) {
  const std::size_t n = static_cast<std::size_t>(out_rows) * out_cols;
  for (int c = 0; c < channels; ++c) {
    const T* xc = x + static_cast<std::size_t>(c) * rows * cols;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* dst = col + (static_cast<std::size_t>(c) * k * k + ky * k + kx) * n;
        for (int oy = 0; oy < out_rows; ++oy) {
          const int iy = oy * stride - pad + ky;
          T* drow = dst + static_cast<std::size_t>(oy) * out_cols;
          if (iy < 0 || iy >= rows) {
            std::fill(drow, drow + out_cols, T{0});
            continue;
          }
          const T* srow = xc + static_cast<std::size_t>(iy) * cols;
          for (int ox = 0; ox < out_cols; ++ox) {
            const int ix = ox * stride - pad + kx;
            drow[ox] = (ix >= 0 && ix < cols) ? srow[ix] : T{0};
          }
        }
      }
    }
  }
}

template <class T>
void col2im(const T* col, int channels, int rows, int cols, int k, int stride, int pad, int out_rows, int out_cols,
            T* x) {
  const std::size_t n = static_cast<std::size_t>(out_rows) * out_cols;
  for (int c = 0; c < channels; ++c) {
    T* xc = x + static_cast<std::size_t>(c) * rows * cols;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* src = col + (static_cast<std::size_t>(c) * k * k + ky * k + kx) * n;
        for (int oy = 0; oy < out_rows; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= rows) continue;
          const T* srow = src + static_cast<std::size_t>(oy) * out_cols;
          T* drow = xc + static_cast<std::size_t>(iy) * cols;
          for (int ox = 0; ox < out_cols; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < cols) drow[ix] += srow[ox];
          }
        }
      }
    }
  }
}

// Index of element (b, c, y, x) of an image in the token layout produced by image_to_tokens.
struct TokenLayout {
  int channels, rows, cols, patch, grid_cols, features, tokens;

  TokenLayout(int c, int h, int w, int p)
      : channels(c), rows(h), cols(w), patch(p), grid_cols(w / p), features(c * p * p), tokens((h / p) * (w / p)) {}

  std::size_t token_index(int c, int y, int x) const {
    const int token = (y / patch) * grid_cols + (x / patch);
    const int feature = (c * patch + (y % patch)) * patch + (x % patch);
    return static_cast<std::size_t>(token) * features + feature;
  }
};

}  // namespace

bool grad_enabled() noexcept { return g_grad_enabled; }
void set_grad_enabled(bool enabled) noexcept { g_grad_enabled = enabled; }

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a, b, "add");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return make_op<T>(std::move(out), {a, b}, [](Node<T>& n) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (!wants_grad(n, k)) continue;
      T* g = n.inputs[k]->grad_buffer().data();
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
    }
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a, b, "sub");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return make_op<T>(std::move(out), {a, b}, [](Node<T>& n) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (!wants_grad(n, k)) continue;
      const T sign = k == 0 ? T{1} : T{-1};
      T* g = n.inputs[k]->grad_buffer().data();
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += sign * n.grad[i];
    }
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  check_same_shape(a, b, "mul");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return make_op<T>(std::move(out), {a, b}, [](Node<T>& n) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (!wants_grad(n, k)) continue;
      const T* other = n.inputs[1 - k]->value.data();
      T* g = n.inputs[k]->grad_buffer().data();
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * other[i];
    }
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.span()) v *= s;
  return make_op<T>(std::move(out), {a}, [s](Node<T>& n) {
    T* g = n.inputs[0]->grad_buffer().data();
    for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += s * n.grad[i];
  });
}

template <class T>
Var<T> affine(const Var<T>& x, T a, T b) {
  Tensor<T> out = x.value();
  for (auto& v : out.span()) v = a * v + b;
  return make_op<T>(std::move(out), {x}, [a](Node<T>& n) {
    T* g = n.inputs[0]->grad_buffer().data();
    for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += a * n.grad[i];
  });
}

template <class T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  require(numel(shape) == a.value().size(), ErrorKind::ShapeMismatch,
          "reshape " + shape_str(a.shape()) + " -> " + shape_str(shape) + " changes element count");
  return make_op<T>(a.value().reshape(std::move(shape)), {a}, [](Node<T>& n) {
    T* g = n.inputs[0]->grad_buffer().data();
    for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
  });
}

template <class T>
Var<T> silu(const Var<T>& x) {
  return unary(
      x, [](T v) { return v / (T{1} + std::exp(-v)); },
      [](T v) {
        const T s = T{1} / (T{1} + std::exp(-v));
        return s * (T{1} + v * (T{1} - s));
      });
}

template <class T>
Var<T> gelu(const Var<T>& x) {
  return unary(
      x, [](T v) { return T(0.5) * v * (T{1} + std::erf(v * T(std::numbers::sqrt2 / 2))); },
      [](T v) {
        const T cdf = T(0.5) * (T{1} + std::erf(v * T(std::numbers::sqrt2 / 2)));
        const T pdf = std::exp(T(-0.5) * v * v) * T(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
        return cdf + v * pdf;
      });
}

template <class T>
Var<T> clamp(const Var<T>& x, T lo, T hi) {
  return unary(
      x, [lo, hi](T v) { return std::clamp(v, lo, hi); }, [lo, hi](T v) { return (v > lo && v < hi) ? T{1} : T{0}; });
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Var<T> sum(const Var<T>& x) {
  double acc = 0.0;
  for (T v : x.value().span()) acc += v;
  return make_op<T>(Tensor<T>({1}, static_cast<T>(acc)), {x}, [](Node<T>& n) {
    const T g0 = n.grad[0];
    for (T& g : n.inputs[0]->grad_buffer().span()) g += g0;
  });
}

template <class T>
Var<T> mean(const Var<T>& x) {
  return scale(sum(x), T{1} / static_cast<T>(x.value().size()));
}

template <class T>
Var<T> sum_product(const Var<T>& x, const Tensor<T>& w) {
  require(w.size() == x.value().size(), ErrorKind::ShapeMismatch, "sum_product: size mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) acc += static_cast<double>(x.value()[i]) * w[i];
  return make_op<T>(Tensor<T>({1}, static_cast<T>(acc)), {x}, [w](Node<T>& n) {
    const T g0 = n.grad[0];
    T* g = n.inputs[0]->grad_buffer().data();
    for (std::size_t i = 0; i < w.size(); ++i) g[i] += g0 * w[i];
  });
}

template <class T>
Var<T> mse(const Var<T>& pred, const Tensor<T>& target) {
  require(pred.shape() == target.shape(), ErrorKind::ShapeMismatch,
          "mse: prediction " + shape_str(pred.shape()) + " vs target " + shape_str(target.shape()));
  const std::size_t n = target.size();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(pred.value()[i]) - target[i];
    acc += d * d;
  }
  return make_op<T>(Tensor<T>({1}, static_cast<T>(acc / static_cast<double>(n))), {pred}, [target](Node<T>& node) {
    const T k = T{2} * node.grad[0] / static_cast<T>(target.size());
    const T* p = node.inputs[0]->value.data();
    T* g = node.inputs[0]->grad_buffer().data();
    for (std::size_t i = 0; i < target.size(); ++i) g[i] += k * (p[i] - target[i]);
  });
}

// ---------------------------------------------------------------------------
// Dense

template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  require(w.value().ndim() == 2, ErrorKind::ShapeMismatch, "linear: weight must be 2-D");
  const int in = w.value().dim(0);
  const int out = w.value().dim(1);
  require(x.value().dim(-1) == in, ErrorKind::ShapeMismatch,
          "linear: input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(w.shape()));
  const auto rows = static_cast<Eigen::Index>(x.value().size() / in);
  Shape os = x.shape();
  os.back() = out;
  Tensor<T> y(os);
  MapM<T> Y(y.data(), rows, out);
  Y.noalias() = CMapM<T>(x.value().data(), rows, in) * CMapM<T>(w.value().data(), in, out);
  std::vector<Var<T>> inputs{x, w};
  if (b.defined()) {
    require(b.value().size() == static_cast<std::size_t>(out), ErrorKind::ShapeMismatch, "linear: bias size");
    Y.rowwise() += Eigen::Map<const RowVec<T>>(b.value().data(), out);
    inputs.push_back(b);
  }
  return make_op<T>(std::move(y), std::move(inputs), [rows, in, out](Node<T>& n) {
    CMapM<T> G(n.grad.data(), rows, out);
    if (wants_grad(n, 0))
      MapM<T>(n.inputs[0]->grad_buffer().data(), rows, in).noalias() +=
          G * CMapM<T>(n.inputs[1]->value.data(), in, out).transpose();
    if (wants_grad(n, 1))
      MapM<T>(n.inputs[1]->grad_buffer().data(), in, out).noalias() +=
          CMapM<T>(n.inputs[0]->value.data(), rows, in).transpose() * G;
    if (wants_grad(n, 2)) Eigen::Map<RowVec<T>>(n.inputs[2]->grad_buffer().data(), out) += G.colwise().sum();
  });
}

// ---------------------------------------------------------------------------
// Convolutional

template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad) {
  check_rank(x, 4, "conv2d");
  check_rank(w, 4, "conv2d weight");
  const int B = x.value().dim(0), C = x.value().dim(1), H = x.value().dim(2), W = x.value().dim(3);
  const int O = w.value().dim(0), k = w.value().dim(2);
  require(w.value().dim(1) == C && w.value().dim(3) == k, ErrorKind::ShapeMismatch,
          "conv2d: input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(w.shape()));
  require(stride >= 1 && pad >= 0, ErrorKind::InvalidArgument, "conv2d: bad stride/pad");
  const int Ho = (H + 2 * pad - k) / stride + 1;
  const int Wo = (W + 2 * pad - k) / stride + 1;
  require(Ho >= 1 && Wo >= 1, ErrorKind::ShapeMismatch, "conv2d: kernel larger than padded input");
  const Eigen::Index K = static_cast<Eigen::Index>(C) * k * k;
  const Eigen::Index N = static_cast<Eigen::Index>(Ho) * Wo;

  Tensor<T> y({B, O, Ho, Wo});
  AlignedVector<T> col(static_cast<std::size_t>(K * N));
  CMapM<T> Wm(w.value().data(), O, K);
  for (int bi = 0; bi < B; ++bi) {
    const T* xb = x.value().data() + static_cast<std::size_t>(bi) * C * H * W;
    T* yb = y.data() + static_cast<std::size_t>(bi) * O * N;
    if (k == 1 && stride == 1 && pad == 0) {
      MapM<T>(yb, O, N).noalias() = Wm * CMapM<T>(xb, K, N);
    } else {
      im2col(xb, C, H, W, k, stride, pad, Ho, Wo, col.data());
      MapM<T>(yb, O, N).noalias() = Wm * CMapM<T>(col.data(), K, N);
    }
    if (b.defined())
      MapM<T>(yb, O, N).colwise() += Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(b.value().data(), O);
  }

  std::vector<Var<T>> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  return make_op<T>(std::move(y), std::move(inputs), [=](Node<T>& n) {
    const bool gx = wants_grad(n, 0), gw = wants_grad(n, 1), gb = wants_grad(n, 2);
    const T* xv = n.inputs[0]->value.data();
    CMapM<T> Wm(n.inputs[1]->value.data(), O, K);
    AlignedVector<T> col(static_cast<std::size_t>(K * N));
    AlignedVector<T> dcol(gx ? static_cast<std::size_t>(K * N) : 0);
    const bool pointwise = k == 1 && stride == 1 && pad == 0;
    for (int bi = 0; bi < B; ++bi) {
      CMapM<T> G(n.grad.data() + static_cast<std::size_t>(bi) * O * N, O, N);
      const T* xb = xv + static_cast<std::size_t>(bi) * C * H * W;
      if (gw) {
        auto DW = MapM<T>(n.inputs[1]->grad_buffer().data(), O, K);
        if (pointwise) {
          DW.noalias() += G * CMapM<T>(xb, K, N).transpose();
        } else {
          im2col(xb, C, H, W, k, stride, pad, Ho, Wo, col.data());
          DW.noalias() += G * CMapM<T>(col.data(), K, N).transpose();
        }
      }
      if (gx) {
        T* dxb = n.inputs[0]->grad_buffer().data() + static_cast<std::size_t>(bi) * C * H * W;
        if (pointwise) {
          MapM<T>(dxb, K, N).noalias() += Wm.transpose() * G;
        } else {
          MapM<T>(dcol.data(), K, N).noalias() = Wm.transpose() * G;
          col2im(dcol.data(), C, H, W, k, stride, pad, Ho, Wo, dxb);
        }
      }
      if (gb)
        Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(n.inputs[2]->grad_buffer().data(), O) += G.rowwise().sum();
    }
  });
}

template <class T>
Var<T> upsample_nearest2x(const Var<T>& x) {
  check_rank(x, 4, "upsample_nearest2x");
  const int B = x.value().dim(0), C = x.value().dim(1), H = x.value().dim(2), W = x.value().dim(3);
  Tensor<T> y({B, C, 2 * H, 2 * W});
  const std::size_t planes = static_cast<std::size_t>(B) * C;
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = x.value().data() + p * H * W;
    T* dst = y.data() + p * 4 * H * W;
    for (int r = 0; r < 2 * H; ++r)
      for (int c = 0; c < 2 * W; ++c) dst[static_cast<std::size_t>(r) * 2 * W + c] = src[(r / 2) * W + c / 2];
  }
  return make_op<T>(std::move(y), {x}, [planes, H, W](Node<T>& n) {
    T* g = n.inputs[0]->grad_buffer().data();
    for (std::size_t p = 0; p < planes; ++p) {
      const T* src = n.grad.data() + p * 4 * H * W;
      T* dst = g + p * H * W;
      for (int r = 0; r < 2 * H; ++r)
        for (int c = 0; c < 2 * W; ++c) dst[(r / 2) * W + c / 2] += src[static_cast<std::size_t>(r) * 2 * W + c];
    }
  });
}

template <class T>
Var<T> avg_pool2x(const Var<T>& x) {
  check_rank(x, 4, "avg_pool2x");
  const int B = x.value().dim(0), C = x.value().dim(1), H = x.value().dim(2), W = x.value().dim(3);
  require(H % 2 == 0 && W % 2 == 0, ErrorKind::ShapeMismatch, "avg_pool2x needs even spatial dims");
  const int h = H / 2, w = W / 2;
  Tensor<T> y({B, C, h, w});
  const std::size_t planes = static_cast<std::size_t>(B) * C;
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = x.value().data() + p * H * W;
    T* dst = y.data() + p * h * w;
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) {
        const T* s = src + static_cast<std::size_t>(2 * r) * W + 2 * c;
        dst[r * w + c] = T(0.25) * (s[0] + s[1] + s[W] + s[W + 1]);
      }
  }
  return make_op<T>(std::move(y), {x}, [planes, H, W, h, w](Node<T>& n) {
    T* g = n.inputs[0]->grad_buffer().data();
    for (std::size_t p = 0; p < planes; ++p) {
      const T* src = n.grad.data() + p * h * w;
      T* dst = g + p * H * W;
      for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c) dst[static_cast<std::size_t>(r) * W + c] += T(0.25) * src[(r / 2) * w + c / 2];
    }
  });
}

template <class T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
  require(!xs.empty(), ErrorKind::InvalidArgument, "concat_channels: nothing to concatenate");
  for (const auto& x : xs) check_rank(x, 4, "concat_channels");
  const int B = xs[0].value().dim(0), H = xs[0].value().dim(2), W = xs[0].value().dim(3);
  std::vector<int> chans;
  int total = 0;
  for (const auto& x : xs) {
    require(x.value().dim(0) == B && x.value().dim(2) == H && x.value().dim(3) == W, ErrorKind::ShapeMismatch,
            "concat_channels: " + shape_str(x.shape()) + " vs " + shape_str(xs[0].shape()));
    chans.push_back(x.value().dim(1));
    total += chans.back();
  }
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  Tensor<T> y({B, total, H, W});
  for (int bi = 0; bi < B; ++bi) {
    T* dst = y.data() + static_cast<std::size_t>(bi) * total * plane;
    for (std::size_t k = 0; k < xs.size(); ++k) {
      const std::size_t len = chans[k] * plane;
      const T* src = xs[k].value().data() + bi * len;
      std::copy_n(src, len, dst);
      dst += len;
    }
  }
  return make_op<T>(std::move(y), xs, [chans, B, total, plane](Node<T>& n) {
    for (int bi = 0; bi < B; ++bi) {
      const T* src = n.grad.data() + static_cast<std::size_t>(bi) * total * plane;
      for (std::size_t k = 0; k < chans.size(); ++k) {
        const std::size_t len = chans[k] * plane;
        if (wants_grad(n, k)) {
          T* g = n.inputs[k]->grad_buffer().data() + bi * len;
          for (std::size_t i = 0; i < len; ++i) g[i] += src[i];
        }
        src += len;
      }
    }
  });
}

template <class T>
Var<T> add_channel_bias(const Var<T>& x, const Var<T>& v) {
  check_rank(x, 4, "add_channel_bias");
  const int B = x.value().dim(0), C = x.value().dim(1);
  require(v.value().size() == static_cast<std::size_t>(B) * C, ErrorKind::ShapeMismatch,
          "add_channel_bias: bias " + shape_str(v.shape()) + " vs input " + shape_str(x.shape()));
  const std::size_t plane = static_cast<std::size_t>(x.value().dim(2)) * x.value().dim(3);
  Tensor<T> y = x.value();
  for (std::size_t bc = 0; bc < static_cast<std::size_t>(B) * C; ++bc) {
    const T add = v.value()[bc];
    T* p = y.data() + bc * plane;
    for (std::size_t i = 0; i < plane; ++i) p[i] += add;
  }
  return make_op<T>(std::move(y), {x, v}, [B, C, plane](Node<T>& n) {
    if (wants_grad(n, 0)) {
      T* g = n.inputs[0]->grad_buffer().data();
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
    }
    if (wants_grad(n, 1)) {
      T* g = n.inputs[1]->grad_buffer().data();
      for (std::size_t bc = 0; bc < static_cast<std::size_t>(B) * C; ++bc) {
        double acc = 0.0;
        const T* p = n.grad.data() + bc * plane;
        for (std::size_t i = 0; i < plane; ++i) acc += p[i];
        g[bc] += static_cast<T>(acc);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Normalization

namespace {

// Normalizes `count` groups of `len` contiguous values; `channel_of(group, i)` names the
// affine parameter index of element i.
template <class T, class ChannelOf>
Var<T> normalize_groups(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, std::size_t count, std::size_t len,
                        T eps, ChannelOf channel_of) {
  Tensor<T> y(x.shape());
  std::vector<T> mean(count), rstd(count);
  const T* xv = x.value().data();
  const T* gv = gamma.value().data();
  const T* bv = beta.value().data();
  for (std::size_t gi = 0; gi < count; ++gi) {
    const T* xs = xv + gi * len;
    double m = 0.0;
    for (std::size_t i = 0; i < len; ++i) m += xs[i];
    m /= static_cast<double>(len);
    double var = 0.0;
    for (std::size_t i = 0; i < len; ++i) var += (xs[i] - m) * (xs[i] - m);
    var /= static_cast<double>(len);
    mean[gi] = static_cast<T>(m);
    rstd[gi] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    T* ys = y.data() + gi * len;
    for (std::size_t i = 0; i < len; ++i) {
      const std::size_t ch = channel_of(gi, i);
      ys[i] = (xs[i] - mean[gi]) * rstd[gi] * gv[ch] + bv[ch];
    }
  }
  return make_op<T>(std::move(y), {x, gamma, beta}, [=](Node<T>& n) {
    const T* xs0 = n.inputs[0]->value.data();
    const T* gam = n.inputs[1]->value.data();
    T* dx = wants_grad(n, 0) ? n.inputs[0]->grad_buffer().data() : nullptr;
    T* dg = wants_grad(n, 1) ? n.inputs[1]->grad_buffer().data() : nullptr;
    T* db = wants_grad(n, 2) ? n.inputs[2]->grad_buffer().data() : nullptr;
    AlignedVector<T> dxhat(len);
    for (std::size_t gi = 0; gi < count; ++gi) {
      const T* xs = xs0 + gi * len;
      const T* gs = n.grad.data() + gi * len;
      double sum_d = 0.0, sum_dx = 0.0;
      for (std::size_t i = 0; i < len; ++i) {
        const std::size_t ch = channel_of(gi, i);
        const T xhat = (xs[i] - mean[gi]) * rstd[gi];
        if (dg) dg[ch] += gs[i] * xhat;
        if (db) db[ch] += gs[i];
        dxhat[i] = gs[i] * gam[ch];
        sum_d += dxhat[i];
        sum_dx += static_cast<double>(dxhat[i]) * xhat;
      }
      if (!dx) continue;
      const T md = static_cast<T>(sum_d / static_cast<double>(len));
      const T mdx = static_cast<T>(sum_dx / static_cast<double>(len));
      T* d = dx + gi * len;
      for (std::size_t i = 0; i < len; ++i) {
        const T xhat = (xs[i] - mean[gi]) * rstd[gi];
        d[i] += rstd[gi] * (dxhat[i] - md - xhat * mdx);
      }
    }
  });
}

}  // namespace

template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  const int D = x.value().dim(-1);
  require(gamma.value().size() == static_cast<std::size_t>(D) && beta.value().size() == static_cast<std::size_t>(D),
          ErrorKind::ShapeMismatch, "layer_norm: affine size must equal the last dim");
  return normalize_groups(x, gamma, beta, x.value().size() / D, static_cast<std::size_t>(D), eps,
                          [](std::size_t, std::size_t i) { return i; });
}

template <class T>
Var<T> group_norm(const Var<T>& x, int groups, const Var<T>& gamma, const Var<T>& beta, T eps) {
  check_rank(x, 4, "group_norm");
  const int B = x.value().dim(0), C = x.value().dim(1);
  require(groups >= 1 && C % groups == 0, ErrorKind::InvalidArgument, "group_norm: groups must divide channels");
  require(gamma.value().size() == static_cast<std::size_t>(C) && beta.value().size() == static_cast<std::size_t>(C),
          ErrorKind::ShapeMismatch, "group_norm: affine size must equal channels");
  const std::size_t plane = static_cast<std::size_t>(x.value().dim(2)) * x.value().dim(3);
  const std::size_t per_group = static_cast<std::size_t>(C / groups);
  const auto g = static_cast<std::size_t>(groups);
  return normalize_groups(x, gamma, beta, static_cast<std::size_t>(B) * g, per_group * plane, eps,
                          [=](std::size_t gi, std::size_t i) { return (gi % g) * per_group + i / plane; });
}

// ---------------------------------------------------------------------------
// Attention

template <class T>
Var<T> self_attention(const Var<T>& qkv, int heads) {
  check_rank(qkv, 3, "self_attention");
  const int B = qkv.value().dim(0), N = qkv.value().dim(1), D3 = qkv.value().dim(2);
  require(D3 % 3 == 0, ErrorKind::ShapeMismatch, "self_attention: last dim must be 3*D");
  const int D = D3 / 3;
  require(heads >= 1 && D % heads == 0, ErrorKind::InvalidArgument, "self_attention: heads must divide D");
  const int dh = D / heads;
  const T scale_qk = T{1} / std::sqrt(static_cast<T>(dh));

  Tensor<T> out({B, N, D});
  auto probs = std::make_shared<AlignedVector<T>>(static_cast<std::size_t>(B) * heads * N * N);
  Mat<T> S(N, N);
  for (int b = 0; b < B; ++b) {
    const T* base = qkv.value().data() + static_cast<std::size_t>(b) * N * D3;
    for (int h = 0; h < heads; ++h) {
      CStridedM<T> Q(base + h * dh, N, dh, Eigen::OuterStride<>(D3));
      CStridedM<T> K(base + D + h * dh, N, dh, Eigen::OuterStride<>(D3));
      CStridedM<T> V(base + 2 * D + h * dh, N, dh, Eigen::OuterStride<>(D3));
      S.noalias() = scale_qk * (Q * K.transpose());
      for (int i = 0; i < N; ++i) {
        const T mx = S.row(i).maxCoeff();
        S.row(i) = (S.row(i).array() - mx).exp();
        S.row(i) /= S.row(i).sum();
      }
      MapM<T>(probs->data() + (static_cast<std::size_t>(b) * heads + h) * N * N, N, N) = S;
      StridedM<T>(out.data() + static_cast<std::size_t>(b) * N * D + h * dh, N, dh, Eigen::OuterStride<>(D))
          .noalias() = S * V;
    }
  }
  return make_op<T>(std::move(out), {qkv}, [=](Node<T>& n) {
    Mat<T> dP(N, N), dS(N, N);
    for (int b = 0; b < B; ++b) {
      const T* base = n.inputs[0]->value.data() + static_cast<std::size_t>(b) * N * D3;
      T* gbase = n.inputs[0]->grad_buffer().data() + static_cast<std::size_t>(b) * N * D3;
      for (int h = 0; h < heads; ++h) {
        CStridedM<T> Q(base + h * dh, N, dh, Eigen::OuterStride<>(D3));
        CStridedM<T> K(base + D + h * dh, N, dh, Eigen::OuterStride<>(D3));
        CStridedM<T> V(base + 2 * D + h * dh, N, dh, Eigen::OuterStride<>(D3));
        CMapM<T> P(probs->data() + (static_cast<std::size_t>(b) * heads + h) * N * N, N, N);
        CStridedM<T> dO(n.grad.data() + static_cast<std::size_t>(b) * N * D + h * dh, N, dh, Eigen::OuterStride<>(D));
        StridedM<T> dQ(gbase + h * dh, N, dh, Eigen::OuterStride<>(D3));
        StridedM<T> dK(gbase + D + h * dh, N, dh, Eigen::OuterStride<>(D3));
        StridedM<T> dV(gbase + 2 * D + h * dh, N, dh, Eigen::OuterStride<>(D3));
        dV.noalias() += P.transpose() * dO;
        dP.noalias() = dO * V.transpose();
        for (int i = 0; i < N; ++i) {
          const T dot = (dP.row(i).array() * P.row(i).array()).sum();
          dS.row(i) = P.row(i).array() * (dP.row(i).array() - dot);
        }
        dQ.noalias() += scale_qk * (dS * K);
        dK.noalias() += scale_qk * (dS.transpose() * Q);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Token layout

template <class T>
Var<T> image_to_tokens(const Var<T>& x, int patch) {
  check_rank(x, 4, "image_to_tokens");
  const int B = x.value().dim(0), C = x.value().dim(1), H = x.value().dim(2), W = x.value().dim(3);
  require(patch >= 1 && H % patch == 0 && W % patch == 0, ErrorKind::ShapeMismatch,
          "image_to_tokens: " + shape_str(x.shape()) + " not divisible by patch " + std::to_string(patch));
  const TokenLayout L(C, H, W, patch);
  const std::size_t img = static_cast<std::size_t>(C) * H * W;
  Tensor<T> y({B, L.tokens, L.features});
  for (int b = 0; b < B; ++b) {
    const T* src = x.value().data() + b * img;
    T* dst = y.data() + b * img;
    for (int c = 0; c < C; ++c)
      for (int r = 0; r < H; ++r)
        for (int q = 0; q < W; ++q) dst[L.token_index(c, r, q)] = src[(static_cast<std::size_t>(c) * H + r) * W + q];
  }
  return make_op<T>(std::move(y), {x}, [L, B, img](Node<T>& n) {
    T* g = n.inputs[0]->grad_buffer().data();
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < L.channels; ++c)
        for (int r = 0; r < L.rows; ++r)
          for (int q = 0; q < L.cols; ++q)
            g[b * img + (static_cast<std::size_t>(c) * L.rows + r) * L.cols + q] +=
                n.grad[b * img + L.token_index(c, r, q)];
  });
}

template <class T>
Var<T> tokens_to_image(const Var<T>& tokens, int channels, int rows, int cols, int patch) {
  check_rank(tokens, 3, "tokens_to_image");
  require(patch >= 1 && rows % patch == 0 && cols % patch == 0, ErrorKind::ShapeMismatch,
          "tokens_to_image: image not divisible by patch");
  const TokenLayout L(channels, rows, cols, patch);
  const int B = tokens.value().dim(0);
  require(tokens.value().dim(1) == L.tokens && tokens.value().dim(2) == L.features, ErrorKind::ShapeMismatch,
          "tokens_to_image: token tensor " + shape_str(tokens.shape()) + " does not match image layout");
  const std::size_t img = static_cast<std::size_t>(channels) * rows * cols;
  Tensor<T> y({B, channels, rows, cols});
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < channels; ++c)
      for (int r = 0; r < rows; ++r)
        for (int q = 0; q < cols; ++q)
          y[b * img + (static_cast<std::size_t>(c) * rows + r) * cols + q] =
              tokens.value()[b * img + L.token_index(c, r, q)];
  return make_op<T>(std::move(y), {tokens}, [L, B, img](Node<T>& n) {
    T* g = n.inputs[0]->grad_buffer().data();
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < L.channels; ++c)
        for (int r = 0; r < L.rows; ++r)
          for (int q = 0; q < L.cols; ++q)
            g[b * img + L.token_index(c, r, q)] +=
                n.grad[b * img + (static_cast<std::size_t>(c) * L.rows + r) * L.cols + q];
  });
}

template <class T>
Var<T> add_rows(const Var<T>& x, const Var<T>& rows) {
  check_rank(x, 3, "add_rows");
  const int B = x.value().dim(0);
  const std::size_t per = static_cast<std::size_t>(x.value().dim(1)) * x.value().dim(2);
  require(rows.value().size() == per, ErrorKind::ShapeMismatch,
          "add_rows: " + shape_str(rows.shape()) + " does not broadcast over " + shape_str(x.shape()));
  Tensor<T> y = x.value();
  for (int b = 0; b < B; ++b)
    for (std::size_t i = 0; i < per; ++i) y[b * per + i] += rows.value()[i];
  return make_op<T>(std::move(y), {x, rows}, [B, per](Node<T>& n) {
    if (wants_grad(n, 0)) {
      T* g = n.inputs[0]->grad_buffer().data();
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
    }
    if (wants_grad(n, 1)) {
      T* g = n.inputs[1]->grad_buffer().data();
      for (int b = 0; b < B; ++b)
        for (std::size_t i = 0; i < per; ++i) g[i] += n.grad[b * per + i];
    }
  });
}

template <class T>
Var<T> resize_grid(const Var<T>& grid, int gh, int gw, int oh, int ow) {
  check_rank(grid, 2, "resize_grid");
  require(grid.value().dim(0) == gh * gw, ErrorKind::ShapeMismatch, "resize_grid: grid rows != gh*gw");
  require(oh >= 1 && ow >= 1, ErrorKind::InvalidArgument, "resize_grid: output grid must be non-empty");
  if (gh == oh && gw == ow) return grid;
  const int D = grid.value().dim(1);
  struct Tap {
    int src;
    T weight;
  };
  auto axis = [](int in, int out, int o, int& i0, int& i1, T& frac) {
    double s = (o + 0.5) * static_cast<double>(in) / out - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in - 1));
    i0 = static_cast<int>(std::floor(s));
    i1 = std::min(i0 + 1, in - 1);
    frac = static_cast<T>(s - i0);
  };
  std::vector<std::array<Tap, 4>> taps(static_cast<std::size_t>(oh) * ow);
  for (int oy = 0; oy < oh; ++oy) {
    int y0, y1;
    T fy;
    axis(gh, oh, oy, y0, y1, fy);
    for (int ox = 0; ox < ow; ++ox) {
      int x0, x1;
      T fx;
      axis(gw, ow, ox, x0, x1, fx);
      taps[static_cast<std::size_t>(oy) * ow + ox] = {Tap{y0 * gw + x0, (1 - fy) * (1 - fx)},
                                                      Tap{y0 * gw + x1, (1 - fy) * fx},
                                                      Tap{y1 * gw + x0, fy * (1 - fx)}, Tap{y1 * gw + x1, fy * fx}};
    }
  }
  Tensor<T> y({oh * ow, D});
  for (std::size_t o = 0; o < taps.size(); ++o)
    for (const Tap& t : taps[o])
      for (int d = 0; d < D; ++d) y[o * D + d] += t.weight * grid.value()[static_cast<std::size_t>(t.src) * D + d];
  return make_op<T>(std::move(y), {grid}, [taps, D](Node<T>& n) {
    T* g = n.inputs[0]->grad_buffer().data();
    for (std::size_t o = 0; o < taps.size(); ++o)
      for (const Tap& t : taps[o])
        for (int d = 0; d < D; ++d) g[static_cast<std::size_t>(t.src) * D + d] += t.weight * n.grad[o * D + d];
  });
}

#define DIFFSR_INSTANTIATE_OPS(T)                                                                 \
  template Var<T> add(const Var<T>&, const Var<T>&);                                              \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                              \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                              \
  template Var<T> scale(const Var<T>&, T);                                                        \
  template Var<T> affine(const Var<T>&, T, T);                                                    \
  template Var<T> reshape(const Var<T>&, Shape);                                                  \
  template Var<T> silu(const Var<T>&);                                                            \
  template Var<T> gelu(const Var<T>&);                                                            \
  template Var<T> clamp(const Var<T>&, T, T);                                                     \
  template Var<T> sum(const Var<T>&);                                                             \
  template Var<T> mean(const Var<T>&);                                                            \
  template Var<T> sum_product(const Var<T>&, const Tensor<T>&);                                   \
  template Var<T> mse(const Var<T>&, const Tensor<T>&);                                           \
  template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                            \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>&, int, int);                  \
  template Var<T> upsample_nearest2x(const Var<T>&);                                              \
  template Var<T> avg_pool2x(const Var<T>&);                                                      \
  template Var<T> concat_channels(const std::vector<Var<T>>&);                                    \
  template Var<T> add_channel_bias(const Var<T>&, const Var<T>&);                                 \
  template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, T);                     \
  template Var<T> group_norm(const Var<T>&, int, const Var<T>&, const Var<T>&, T);                \
  template Var<T> self_attention(const Var<T>&, int);                                             \
  template Var<T> image_to_tokens(const Var<T>&, int);                                            \
  template Var<T> tokens_to_image(const Var<T>&, int, int, int, int);                             \
  template Var<T> add_rows(const Var<T>&, const Var<T>&);                                         \
  template Var<T> resize_grid(const Var<T>&, int, int, int, int);

DIFFSR_INSTANTIATE_OPS(float)
DIFFSR_INSTANTIATE_OPS(double)

#undef DIFFSR_INSTANTIATE_OPS

}  // namespace diffsr::nn
