#include "qdwi/diff/ops.hpp"

#include <algorithm>
#include <cmath>

#include "blas.hpp"

namespace qdwi::diff {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw FormatError(msg);
}

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
}

template <typename T>
void require_rank(const Var<T>& a, int rank, const char* op) {
  require(a.value().rank() == rank, std::string(op) + ": expected rank " + std::to_string(rank) +
                                        ", got " + shape_str(a.shape()));
}

struct ConvGeom {
  int c, h, w, k, stride, pad, ho, wo;
  int patch() const { return c * k * k; }
  int out_pixels() const { return ho * wo; }
  bool identity_cols() const { return k == 1 && stride == 1 && pad == 0; }
};

// Output columns [lo, hi) read inside the input row for kernel column kj.
inline void valid_cols(const ConvGeom& g, int kj, int& lo, int& hi) {
  const int off = kj - g.pad;  // iw = ow * stride + off
  lo = off >= 0 ? 0 : (-off + g.stride - 1) / g.stride;
  hi = g.w - 1 - off < 0 ? 0 : std::min(g.wo, (g.w - 1 - off) / g.stride + 1);
  lo = std::min(lo, hi);
}

template <typename T>
void im2col(const T* img, const ConvGeom& g, T* cols, std::size_t ld) {
  for (int c = 0; c < g.c; ++c) {
    const T* plane = img + static_cast<std::size_t>(c) * g.h * g.w;
    for (int ki = 0; ki < g.k; ++ki) {
      for (int kj = 0; kj < g.k; ++kj) {
        T* row = cols + static_cast<std::size_t>((c * g.k + ki) * g.k + kj) * ld;
        int lo, hi;
        valid_cols(g, kj, lo, hi);
        const int off = kj - g.pad;
        for (int oh = 0; oh < g.ho; ++oh) {
          const int ih = oh * g.stride - g.pad + ki;
          T* dst = row + oh * g.wo;
          if (ih < 0 || ih >= g.h) {
            std::fill(dst, dst + g.wo, T(0));
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(ih) * g.w + off;
          std::fill(dst, dst + lo, T(0));
          if (g.stride == 1) {
            std::copy(src + lo, src + hi, dst + lo);
          } else {
            for (int ow = lo; ow < hi; ++ow) dst[ow] = src[ow * g.stride];
          }
          std::fill(dst + hi, dst + g.wo, T(0));
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, const ConvGeom& g, T* img, std::size_t ld) {
  for (int c = 0; c < g.c; ++c) {
    T* plane = img + static_cast<std::size_t>(c) * g.h * g.w;
    for (int ki = 0; ki < g.k; ++ki) {
      for (int kj = 0; kj < g.k; ++kj) {
        const T* row = cols + static_cast<std::size_t>((c * g.k + ki) * g.k + kj) * ld;
        int lo, hi;
        valid_cols(g, kj, lo, hi);
        const int off = kj - g.pad;
        for (int oh = 0; oh < g.ho; ++oh) {
          const int ih = oh * g.stride - g.pad + ki;
          if (ih < 0 || ih >= g.h) continue;
          const T* src = row + oh * g.wo;
          T* dst = plane + static_cast<std::size_t>(ih) * g.w + off;
          for (int ow = lo; ow < hi; ++ow) dst[ow * g.stride] += src[ow];
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>* bias, int stride, int pad) {
  require_rank(x, 4, "conv2d");
  require_rank(weight, 4, "conv2d weight");
  const int n = x.dim(0);
  const int out_c = weight.dim(0);
  ConvGeom g{x.dim(1), x.dim(2), x.dim(3), weight.dim(2), stride, pad, 0, 0};
  require(weight.dim(1) == g.c && weight.dim(3) == g.k,
          "conv2d: weight " + shape_str(weight.shape()) + " incompatible with input " +
              shape_str(x.shape()));
  require(stride >= 1 && pad >= 0, "conv2d: invalid stride/padding");
  g.ho = (g.h + 2 * pad - g.k) / stride + 1;
  g.wo = (g.w + 2 * pad - g.k) / stride + 1;
  require(g.ho >= 1 && g.wo >= 1, "conv2d: output would be empty for input " + shape_str(x.shape()));
  if (bias) require(bias->shape() == Shape{out_c}, "conv2d: bias shape mismatch");

  const int patch = g.patch();
  const int npix = g.out_pixels();
  const std::size_t in_stride = static_cast<std::size_t>(g.c) * g.h * g.w;
  const std::size_t out_stride = static_cast<std::size_t>(out_c) * npix;

  // The whole batch goes through one gemm: columns are [patch, n * npix].
  const std::size_t ld = static_cast<std::size_t>(n) * npix;
  std::vector<T> cols(static_cast<std::size_t>(patch) * ld);
  for (int s = 0; s < n; ++s) {
    const T* src = x.value().data() + s * in_stride;
    if (g.identity_cols()) {
      for (int c = 0; c < g.c; ++c)
        std::copy_n(src + static_cast<std::size_t>(c) * npix, npix, cols.data() + c * ld + s * npix);
    } else {
      im2col(src, g, cols.data() + static_cast<std::size_t>(s) * npix, ld);
    }
  }
  std::vector<T> flat(static_cast<std::size_t>(out_c) * ld);
  detail::gemm(false, false, out_c, static_cast<int>(ld), patch, T(1), weight.value().data(), patch, cols.data(),
               static_cast<int>(ld), T(0), flat.data(), static_cast<int>(ld));
  Tensor<T> out(Shape{n, out_c, g.ho, g.wo});
  for (int s = 0; s < n; ++s)
    for (int o = 0; o < out_c; ++o) {
      const T* src = flat.data() + o * ld + static_cast<std::size_t>(s) * npix;
      T* dst = out.data() + s * out_stride + static_cast<std::size_t>(o) * npix;
      const T b = bias ? bias->value()[static_cast<std::size_t>(o)] : T(0);
      for (int p = 0; p < npix; ++p) dst[p] = src[p] + b;
    }

  std::vector<Var<T>> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  // Columns are rebuilt in the backward pass rather than kept alive.
  return make_node<T>("conv2d", std::move(out), std::move(inputs), [g, n, out_c](Node<T>& self) {
    const int patch = g.patch();
    const int npix = g.out_pixels();
    const std::size_t ld = static_cast<std::size_t>(n) * npix;
    const std::size_t in_stride = static_cast<std::size_t>(g.c) * g.h * g.w;
    const std::size_t out_stride = static_cast<std::size_t>(out_c) * npix;
    const Tensor<T>& xin = self.inputs[0]->value;
    const Tensor<T>& w = self.inputs[1]->value;
    const bool need_x = self.wants_grad(0);
    const bool need_w = self.wants_grad(1);
    const bool need_b = self.inputs.size() > 2 && self.wants_grad(2);

    std::vector<T> dy(static_cast<std::size_t>(out_c) * ld);
    for (int s = 0; s < n; ++s)
      for (int o = 0; o < out_c; ++o)
        std::copy_n(self.grad.data() + s * out_stride + static_cast<std::size_t>(o) * npix, npix,
                    dy.data() + o * ld + static_cast<std::size_t>(s) * npix);
    if (need_b) {
      T* db = self.inputs[2]->grad_buffer().data();
      for (int o = 0; o < out_c; ++o) {
        const T* row = dy.data() + o * ld;
        T acc = 0;
        for (std::size_t p = 0; p < ld; ++p) acc += row[p];
        db[o] += acc;
      }
    }
    if (need_w) {
      std::vector<T> cols(static_cast<std::size_t>(patch) * ld);
      for (int s = 0; s < n; ++s) {
        const T* src = xin.data() + s * in_stride;
        if (g.identity_cols()) {
          for (int c = 0; c < g.c; ++c)
            std::copy_n(src + static_cast<std::size_t>(c) * npix, npix, cols.data() + c * ld + s * npix);
        } else {
          im2col(src, g, cols.data() + static_cast<std::size_t>(s) * npix, ld);
        }
      }
      detail::gemm(false, true, out_c, patch, static_cast<int>(ld), T(1), dy.data(), static_cast<int>(ld),
                   cols.data(), static_cast<int>(ld), T(1), self.inputs[1]->grad_buffer().data(), patch);
    }
    if (need_x) {
      std::vector<T> dcols(static_cast<std::size_t>(patch) * ld);
      detail::gemm(true, false, patch, static_cast<int>(ld), out_c, T(1), w.data(), patch, dy.data(),
                   static_cast<int>(ld), T(0), dcols.data(), static_cast<int>(ld));
      T* dx = self.inputs[0]->grad_buffer().data();
      for (int s = 0; s < n; ++s) {
        T* dxs = dx + s * in_stride;
        if (g.identity_cols()) {
          for (int c = 0; c < g.c; ++c) {
            const T* src = dcols.data() + c * ld + static_cast<std::size_t>(s) * npix;
            T* dst = dxs + static_cast<std::size_t>(c) * npix;
            for (int p = 0; p < npix; ++p) dst[p] += src[p];
          }
        } else {
          col2im(dcols.data() + static_cast<std::size_t>(s) * npix, g, dxs, ld);
        }
      }
    }
  });
}

template <typename T>
Var<T> upsample2x(const Var<T>& x) {
  require_rank(x, 4, "upsample2x");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<T> out(Shape{n, c, 2 * h, 2 * w});
  const T* src = x.value().data();
  T* dst = out.data();
  for (int p = 0; p < n * c; ++p) {
    const T* sp = src + static_cast<std::size_t>(p) * h * w;
    T* dp = dst + static_cast<std::size_t>(p) * 4 * h * w;
    for (int i = 0; i < 2 * h; ++i) {
      const T* srow = sp + (i / 2) * w;
      T* drow = dp + static_cast<std::size_t>(i) * 2 * w;
      for (int j = 0; j < 2 * w; ++j) drow[j] = srow[j / 2];
    }
  }
  return make_node<T>("upsample2x", std::move(out), {x}, [n, c, h, w](Node<T>& self) {
    T* dx = self.inputs[0]->grad_buffer().data();
    const T* dy = self.grad.data();
    for (int p = 0; p < n * c; ++p) {
      T* dp = dx + static_cast<std::size_t>(p) * h * w;
      const T* gp = dy + static_cast<std::size_t>(p) * 4 * h * w;
      for (int i = 0; i < 2 * h; ++i) {
        const T* grow = gp + static_cast<std::size_t>(i) * 2 * w;
        T* drow = dp + (i / 2) * w;
        for (int j = 0; j < 2 * w; ++j) drow[j / 2] += grow[j];
      }
    }
  });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>* bias) {
  require_rank(x, 2, "linear");
  require_rank(weight, 2, "linear weight");
  const int n = x.dim(0), in = x.dim(1), out_f = weight.dim(0);
  require(weight.dim(1) == in, "linear: weight " + shape_str(weight.shape()) +
                                   " incompatible with input " + shape_str(x.shape()));
  if (bias) require(bias->shape() == Shape{out_f}, "linear: bias shape mismatch");
  Tensor<T> out(Shape{n, out_f});
  detail::gemm(false, true, n, out_f, in, T(1), x.value().data(), in, weight.value().data(), in,
               T(0), out.data(), out_f);
  if (bias) {
    for (int s = 0; s < n; ++s)
      for (int o = 0; o < out_f; ++o) out[static_cast<std::size_t>(s) * out_f + o] += bias->value()[o];
  }
  std::vector<Var<T>> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  return make_node<T>("linear", std::move(out), std::move(inputs), [n, in, out_f](Node<T>& self) {
    const T* dy = self.grad.data();
    if (self.wants_grad(0)) {
      detail::gemm(false, false, n, in, out_f, T(1), dy, out_f, self.inputs[1]->value.data(), in,
                   T(1), self.inputs[0]->grad_buffer().data(), in);
    }
    if (self.wants_grad(1)) {
      detail::gemm(true, false, out_f, in, n, T(1), dy, out_f, self.inputs[0]->value.data(), in,
                   T(1), self.inputs[1]->grad_buffer().data(), in);
    }
    if (self.inputs.size() > 2 && self.wants_grad(2)) {
      T* db = self.inputs[2]->grad_buffer().data();
      for (int s = 0; s < n; ++s)
        for (int o = 0; o < out_f; ++o) db[o] += dy[static_cast<std::size_t>(s) * out_f + o];
    }
  });
}

template <typename T>
Var<T> instance_norm(const Var<T>& x, T eps) {
  require_rank(x, 4, "instance_norm");
  require(eps > T(0), "instance_norm: eps must be positive");
  const int planes = x.dim(0) * x.dim(1);
  const int hw = x.dim(2) * x.dim(3);
  require(hw >= 1, "instance_norm: empty spatial extent");
  Tensor<T> out(x.shape());
  std::vector<T> inv_std(static_cast<std::size_t>(planes));
  for (int p = 0; p < planes; ++p) {
    const T* src = x.value().data() + static_cast<std::size_t>(p) * hw;
    T* dst = out.data() + static_cast<std::size_t>(p) * hw;
    T mu = 0;
    for (int i = 0; i < hw; ++i) mu += src[i];
    mu /= T(hw);
    T var = 0;
    for (int i = 0; i < hw; ++i) var += (src[i] - mu) * (src[i] - mu);
    var /= T(hw);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(p)] = is;
    for (int i = 0; i < hw; ++i) dst[i] = (src[i] - mu) * is;
  }
  return make_node<T>("instance_norm", std::move(out), {x},
                      [planes, hw, inv_std = std::move(inv_std)](Node<T>& self) {
                        T* dx = self.inputs[0]->grad_buffer().data();
                        for (int p = 0; p < planes; ++p) {
                          const std::size_t off = static_cast<std::size_t>(p) * hw;
                          const T* y = self.value.data() + off;
                          const T* dy = self.grad.data() + off;
                          T mg = 0, mgy = 0;
                          for (int i = 0; i < hw; ++i) {
                            mg += dy[i];
                            mgy += dy[i] * y[i];
                          }
                          mg /= T(hw);
                          mgy /= T(hw);
                          const T is = inv_std[static_cast<std::size_t>(p)];
                          for (int i = 0; i < hw; ++i) dx[off + i] += is * (dy[i] - mg - y[i] * mgy);
                        }
                      });
}

template <typename T>
Var<T> channel_affine(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta) {
  require_rank(x, 4, "channel_affine");
  const Shape nc{x.dim(0), x.dim(1)};
  require(gamma.shape() == nc && beta.shape() == nc,
          "channel_affine: modulation shapes " + shape_str(gamma.shape()) + "/" +
              shape_str(beta.shape()) + " do not match " + shape_str(nc));
  const int planes = nc[0] * nc[1];
  const int hw = x.dim(2) * x.dim(3);
  Tensor<T> out(x.shape());
  for (int p = 0; p < planes; ++p) {
    const T gm = gamma.value()[p], bt = beta.value()[p];
    const T* src = x.value().data() + static_cast<std::size_t>(p) * hw;
    T* dst = out.data() + static_cast<std::size_t>(p) * hw;
    for (int i = 0; i < hw; ++i) dst[i] = gm * src[i] + bt;
  }
  return make_node<T>("channel_affine", std::move(out), {x, gamma, beta},
                      [planes, hw](Node<T>& self) {
                        const T* xs = self.inputs[0]->value.data();
                        const T* gm = self.inputs[1]->value.data();
                        const T* dy = self.grad.data();
                        T* dx = self.wants_grad(0) ? self.inputs[0]->grad_buffer().data() : nullptr;
                        T* dg = self.wants_grad(1) ? self.inputs[1]->grad_buffer().data() : nullptr;
                        T* db = self.wants_grad(2) ? self.inputs[2]->grad_buffer().data() : nullptr;
                        for (int p = 0; p < planes; ++p) {
                          const std::size_t off = static_cast<std::size_t>(p) * hw;
                          T sg = 0, sgx = 0;
                          for (int i = 0; i < hw; ++i) {
                            sg += dy[off + i];
                            sgx += dy[off + i] * xs[off + i];
                            if (dx) dx[off + i] += gm[p] * dy[off + i];
                          }
                          if (dg) dg[p] += sgx;
                          if (db) db[p] += sg;
                        }
                      });
}

namespace {

// Elementwise unary op with derivative expressed through (x, y).
template <typename T, typename F, typename D>
Var<T> unary(const char* name, const Var<T>& x, F f, D dfdx) {
  Tensor<T> out(x.shape());
  const T* src = x.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(src[i]);
  return make_node<T>(name, std::move(out), {x}, [dfdx](Node<T>& self) {
    T* dx = self.inputs[0]->grad_buffer().data();
    const T* xs = self.inputs[0]->value.data();
    const T* ys = self.value.data();
    const T* dy = self.grad.data();
    for (std::size_t i = 0; i < self.value.size(); ++i) dx[i] += dy[i] * dfdx(xs[i], ys[i]);
  });
}

}  // namespace

template <typename T>
Var<T> leaky_relu(const Var<T>& x, T slope) {
  return unary<T>(
      "leaky_relu", x, [slope](T v) { return v > T(0) ? v : slope * v; },
      [slope](T v, T) { return v > T(0) ? T(1) : slope; });
}

template <typename T>
Var<T> tanh(const Var<T>& x) {
  return unary<T>(
      "tanh", x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Var<T> clamp(const Var<T>& x, T lo, T hi) {
  require(lo <= hi, "clamp: empty interval");
  return unary<T>(
      "clamp", x, [lo, hi](T v) { return std::clamp(v, lo, hi); },
      [lo, hi](T v, T) { return (v >= lo && v <= hi) ? T(1) : T(0); });
}

template <typename T>
Var<T> clamp_straight_through(const Var<T>& x, T lo, T hi) {
  require(lo <= hi, "clamp: empty interval");
  return unary<T>(
      "clamp_straight_through", x, [lo, hi](T v) { return std::clamp(v, lo, hi); },
      [](T, T) { return T(1); });
}

template <typename T>
Var<T> square(const Var<T>& a) {
  return unary<T>(
      "square", a, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <typename T>
Var<T> abs(const Var<T>& a) {
  return unary<T>(
      "abs", a, [](T v) { return std::abs(v); },
      [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  return unary<T>(
      "scale", a, [s](T v) { return s * v; }, [s](T, T) { return s; });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T s) {
  return unary<T>(
      "add_scalar", a, [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  return make_node<T>("add", std::move(out), {a, b}, [](Node<T>& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (!self.wants_grad(k)) continue;
      T* d = self.inputs[k]->grad_buffer().data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i];
    }
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "sub");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  return make_node<T>("sub", std::move(out), {a, b}, [](Node<T>& self) {
    if (self.wants_grad(0)) {
      T* d = self.inputs[0]->grad_buffer().data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i];
    }
    if (self.wants_grad(1)) {
      T* d = self.inputs[1]->grad_buffer().data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] -= self.grad[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "mul");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return make_node<T>("mul", std::move(out), {a, b}, [](Node<T>& self) {
    const T* av = self.inputs[0]->value.data();
    const T* bv = self.inputs[1]->value.data();
    if (self.wants_grad(0)) {
      T* d = self.inputs[0]->grad_buffer().data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i] * bv[i];
    }
    if (self.wants_grad(1)) {
      T* d = self.inputs[1]->grad_buffer().data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i] * av[i];
    }
  });
}

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  require_rank(a, 4, "concat_channels");
  require_rank(b, 4, "concat_channels");
  require(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
          "concat_channels: incompatible shapes " + shape_str(a.shape()) + " and " +
              shape_str(b.shape()));
  const int n = a.dim(0);
  const std::size_t sa = a.value().size() / n, sb = b.value().size() / n;
  Tensor<T> out(Shape{n, a.dim(1) + b.dim(1), a.dim(2), a.dim(3)});
  for (int s = 0; s < n; ++s) {
    std::copy_n(a.value().data() + s * sa, sa, out.data() + s * (sa + sb));
    std::copy_n(b.value().data() + s * sb, sb, out.data() + s * (sa + sb) + sa);
  }
  return make_node<T>("concat_channels", std::move(out), {a, b}, [n, sa, sb](Node<T>& self) {
    for (int s = 0; s < n; ++s) {
      const T* g = self.grad.data() + s * (sa + sb);
      if (self.wants_grad(0)) {
        T* d = self.inputs[0]->grad_buffer().data() + s * sa;
        for (std::size_t i = 0; i < sa; ++i) d[i] += g[i];
      }
      if (self.wants_grad(1)) {
        T* d = self.inputs[1]->grad_buffer().data() + s * sb;
        for (std::size_t i = 0; i < sb; ++i) d[i] += g[sa + i];
      }
    }
  });
}

template <typename T>
Var<T> spatial_mean(const Var<T>& x) {
  require_rank(x, 4, "spatial_mean");
  const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> out(Shape{n, c});
  for (int p = 0; p < n * c; ++p) {
    const T* src = x.value().data() + static_cast<std::size_t>(p) * hw;
    T acc = 0;
    for (int i = 0; i < hw; ++i) acc += src[i];
    out[p] = acc / T(hw);
  }
  return make_node<T>("spatial_mean", std::move(out), {x}, [n, c, hw](Node<T>& self) {
    T* dx = self.inputs[0]->grad_buffer().data();
    for (int p = 0; p < n * c; ++p) {
      const T g = self.grad[p] / T(hw);
      T* d = dx + static_cast<std::size_t>(p) * hw;
      for (int i = 0; i < hw; ++i) d[i] += g;
    }
  });
}

template <typename T>
Var<T> channel_dot(const Var<T>& x, const Var<T>& w) {
  require_rank(x, 4, "channel_dot");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3), hw = h * wd;
  require(w.shape() == Shape{n, c}, "channel_dot: weight shape " + shape_str(w.shape()) +
                                        " does not match " + shape_str(x.shape()));
  Tensor<T> out(Shape{n, 1, h, wd});
  for (int s = 0; s < n; ++s) {
    T* dst = out.data() + static_cast<std::size_t>(s) * hw;
    for (int ch = 0; ch < c; ++ch) {
      const T wv = w.value()[static_cast<std::size_t>(s) * c + ch];
      const T* src = x.value().data() + (static_cast<std::size_t>(s) * c + ch) * hw;
      for (int i = 0; i < hw; ++i) dst[i] += wv * src[i];
    }
  }
  return make_node<T>("channel_dot", std::move(out), {x, w}, [n, c, hw](Node<T>& self) {
    const T* xs = self.inputs[0]->value.data();
    const T* ws = self.inputs[1]->value.data();
    T* dx = self.wants_grad(0) ? self.inputs[0]->grad_buffer().data() : nullptr;
    T* dw = self.wants_grad(1) ? self.inputs[1]->grad_buffer().data() : nullptr;
    for (int s = 0; s < n; ++s) {
      const T* g = self.grad.data() + static_cast<std::size_t>(s) * hw;
      for (int ch = 0; ch < c; ++ch) {
        const std::size_t off = (static_cast<std::size_t>(s) * c + ch) * hw;
        const std::size_t wi = static_cast<std::size_t>(s) * c + ch;
        T acc = 0;
        for (int i = 0; i < hw; ++i) {
          acc += g[i] * xs[off + i];
          if (dx) dx[off + i] += g[i] * ws[wi];
        }
        if (dw) dw[wi] += acc;
      }
    }
  });
}

template <typename T>
Var<T> row_dot(const Var<T>& a, const Var<T>& b) {
  require_rank(a, 2, "row_dot");
  require_same_shape(a, b, "row_dot");
  const int n = a.dim(0), c = a.dim(1);
  Tensor<T> out(Shape{n, 1});
  for (int s = 0; s < n; ++s) {
    T acc = 0;
    for (int k = 0; k < c; ++k)
      acc += a.value()[static_cast<std::size_t>(s) * c + k] * b.value()[static_cast<std::size_t>(s) * c + k];
    out[s] = acc;
  }
  return make_node<T>("row_dot", std::move(out), {a, b}, [n, c](Node<T>& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (!self.wants_grad(k)) continue;
      T* d = self.inputs[k]->grad_buffer().data();
      const T* other = self.inputs[1 - k]->value.data();
      for (int s = 0; s < n; ++s)
        for (int j = 0; j < c; ++j) {
          const std::size_t i = static_cast<std::size_t>(s) * c + j;
          d[i] += self.grad[s] * other[i];
        }
    }
  });
}

template <typename T>
Var<T> concat_batch(const Var<T>& a, const Var<T>& b) {
  require(a.value().rank() >= 1 && a.value().rank() == b.value().rank(), "concat_batch: rank mismatch");
  for (int i = 1; i < a.value().rank(); ++i)
    require(a.dim(i) == b.dim(i), "concat_batch: incompatible shapes " + shape_str(a.shape()) + " and " +
                                      shape_str(b.shape()));
  Shape shape = a.shape();
  shape[0] += b.dim(0);
  Tensor<T> out(shape);
  const std::size_t na = a.value().size();
  std::copy_n(a.value().data(), na, out.data());
  std::copy_n(b.value().data(), b.value().size(), out.data() + na);
  return make_node<T>("concat_batch", std::move(out), {a, b}, [na](Node<T>& self) {
    if (self.wants_grad(0)) {
      T* d = self.inputs[0]->grad_buffer().data();
      for (std::size_t i = 0; i < na; ++i) d[i] += self.grad[i];
    }
    if (self.wants_grad(1)) {
      T* d = self.inputs[1]->grad_buffer().data();
      for (std::size_t i = 0; i < self.inputs[1]->value.size(); ++i) d[i] += self.grad[na + i];
    }
  });
}

template <typename T>
Var<T> slice_batch(const Var<T>& x, int begin, int end) {
  require(x.value().rank() >= 1 && 0 <= begin && begin < end && end <= x.dim(0),
          "slice_batch: range out of bounds for " + shape_str(x.shape()));
  Shape shape = x.shape();
  const std::size_t row = x.value().size() / static_cast<std::size_t>(shape[0]);
  shape[0] = end - begin;
  Tensor<T> out(shape);
  std::copy_n(x.value().data() + begin * row, out.size(), out.data());
  const std::size_t off = begin * row;
  return make_node<T>("slice_batch", std::move(out), {x}, [off](Node<T>& self) {
    T* d = self.inputs[0]->grad_buffer().data() + off;
    for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i];
  });
}

template <typename T>
Var<T> slice_cols(const Var<T>& x, int begin, int end) {
  require_rank(x, 2, "slice_cols");
  const int n = x.dim(0), k = x.dim(1);
  require(0 <= begin && begin < end && end <= k, "slice_cols: range out of bounds");
  const int w = end - begin;
  Tensor<T> out(Shape{n, w});
  for (int s = 0; s < n; ++s)
    std::copy_n(x.value().data() + static_cast<std::size_t>(s) * k + begin, w,
                out.data() + static_cast<std::size_t>(s) * w);
  return make_node<T>("slice_cols", std::move(out), {x}, [n, k, begin, w](Node<T>& self) {
    T* d = self.inputs[0]->grad_buffer().data();
    for (int s = 0; s < n; ++s)
      for (int j = 0; j < w; ++j)
        d[static_cast<std::size_t>(s) * k + begin + j] += self.grad[static_cast<std::size_t>(s) * w + j];
  });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  require(shape_numel(shape) == x.value().size(),
          "reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape) + " changes element count");
  return make_node<T>("reshape", x.value().reshaped(std::move(shape)), {x}, [](Node<T>& self) {
    T* d = self.inputs[0]->grad_buffer().data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i];
  });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  T acc = 0;
  for (T v : a.value().values()) acc += v;
  return make_node<T>("sum", Tensor<T>::scalar(acc), {a}, [](Node<T>& self) {
    T* d = self.inputs[0]->grad_buffer().data();
    const T g = self.grad[0];
    for (std::size_t i = 0; i < self.inputs[0]->value.size(); ++i) d[i] += g;
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  const std::size_t count = a.value().size();
  require(count > 0, "mean: empty tensor");
  T acc = 0;
  for (T v : a.value().values()) acc += v;
  return make_node<T>("mean", Tensor<T>::scalar(acc / T(count)), {a}, [count](Node<T>& self) {
    T* d = self.inputs[0]->grad_buffer().data();
    const T g = self.grad[0] / T(count);
    for (std::size_t i = 0; i < count; ++i) d[i] += g;
  });
}

template <typename T>
Var<T> detach(const Var<T>& a) {
  return Var<T>::constant(a.value(), a.name() + ".detached");
}

#define QDWI_INSTANTIATE_OPS(T)                                                           \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>*, int, int);          \
  template Var<T> upsample2x(const Var<T>&);                                              \
  template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>*);                    \
  template Var<T> instance_norm(const Var<T>&, T);                                        \
  template Var<T> channel_affine(const Var<T>&, const Var<T>&, const Var<T>&);            \
  template Var<T> leaky_relu(const Var<T>&, T);                                           \
  template Var<T> tanh(const Var<T>&);                                                    \
  template Var<T> clamp(const Var<T>&, T, T);                                             \
  template Var<T> clamp_straight_through(const Var<T>&, T, T);                            \
  template Var<T> concat_batch(const Var<T>&, const Var<T>&);                             \
  template Var<T> slice_batch(const Var<T>&, int, int);                                   \
  template Var<T> add(const Var<T>&, const Var<T>&);                                      \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                      \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                      \
  template Var<T> scale(const Var<T>&, T);                                                \
  template Var<T> add_scalar(const Var<T>&, T);                                           \
  template Var<T> square(const Var<T>&);                                                  \
  template Var<T> abs(const Var<T>&);                                                     \
  template Var<T> concat_channels(const Var<T>&, const Var<T>&);                          \
  template Var<T> spatial_mean(const Var<T>&);                                            \
  template Var<T> channel_dot(const Var<T>&, const Var<T>&);                              \
  template Var<T> row_dot(const Var<T>&, const Var<T>&);                                  \
  template Var<T> slice_cols(const Var<T>&, int, int);                                    \
  template Var<T> reshape(const Var<T>&, Shape);                                          \
  template Var<T> sum(const Var<T>&);                                                     \
  template Var<T> mean(const Var<T>&);                                                    \
  template Var<T> detach(const Var<T>&);

QDWI_INSTANTIATE_OPS(float)
QDWI_INSTANTIATE_OPS(double)

}  // namespace qdwi::diff
