#include "qdwi/diff/spectral_norm.hpp"

#include <cmath>

#include "blas.hpp"

namespace qdwi::diff {

namespace {

template <typename T>
T normalize(std::vector<T>& v) {
  T n = 0;
  for (T x : v) n += x * x;
  n = std::sqrt(n);
  if (n > T(0)) {
    for (T& x : v) x /= n;
  }
  return n;
}

struct MatDims {
  int rows, cols;
};

template <typename T>
MatDims matrix_dims(const Tensor<T>& w) {
  if (w.rank() < 1 || w.size() == 0) throw FormatError("spectral_normalize: empty weight");
  const int rows = w.dim(0);
  return {rows, static_cast<int>(w.size() / static_cast<std::size_t>(rows))};
}

// Runs the iteration and returns (sigma, v); u updated in place.
template <typename T>
T iterate(const Tensor<T>& w, std::vector<T>& u, std::vector<T>& v, int iters) {
  const auto [rows, cols] = matrix_dims(w);
  if (iters < 1) throw FormatError("spectral_normalize: power_iters must be >= 1");
  if (static_cast<int>(u.size()) != rows) throw FormatError("spectral_normalize: state vector length mismatch");
  if (normalize(u) == T(0)) {
    for (T& x : u) x = T(1) / std::sqrt(T(rows));
  }
  v.assign(static_cast<std::size_t>(cols), T(0));
  std::vector<T> wv(static_cast<std::size_t>(rows));
  for (int it = 0; it < iters; ++it) {
    detail::gemm(true, false, cols, 1, rows, T(1), w.data(), cols, u.data(), 1, T(0), v.data(), 1);
    if (normalize(v) == T(0)) return T(0);
    detail::gemm(false, false, rows, 1, cols, T(1), w.data(), cols, v.data(), 1, T(0), wv.data(), 1);
    u = wv;
    if (normalize(u) == T(0)) return T(0);
  }
  detail::gemm(false, false, rows, 1, cols, T(1), w.data(), cols, v.data(), 1, T(0), wv.data(), 1);
  T sigma = 0;
  for (int i = 0; i < rows; ++i) sigma += u[static_cast<std::size_t>(i)] * wv[static_cast<std::size_t>(i)];
  return sigma;
}

}  // namespace

template <typename T>
T power_iteration(const Tensor<T>& weight, Tensor<T>& u, int iters) {
  std::vector<T> uv(u.values().begin(), u.values().end());
  std::vector<T> v;
  const T sigma = iterate(weight, uv, v, iters);
  u = Tensor<T>(u.shape(), std::move(uv));
  return sigma;
}

template <typename T>
SpectralNormResult<T> spectral_normalize(const Var<T>& weight, int power_iters, const Tensor<T>& u) {
  std::vector<T> uv(u.values().begin(), u.values().end());
  std::vector<T> v;
  const T sigma = iterate(weight.value(), uv, v, power_iters);
  Tensor<T> u_out(Shape{static_cast<int>(uv.size())}, uv);
  if (!(sigma > T(0)) || !std::isfinite(sigma)) {
    // Zero matrix: nothing to normalise.
    return {weight, std::move(u_out), T(1)};
  }
  const auto [rows, cols] = matrix_dims(weight.value());
  Tensor<T> out(weight.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = weight.value()[i] / sigma;
  Var<T> result = make_node<T>(
      "spectral_normalize", std::move(out), {weight},
      [sigma, rows = rows, cols = cols, uv, v](Node<T>& self) {
        // d(W/s) with s = u^T W v:  G/s - <G, W>/s^2 * u v^T
        const T* g = self.grad.data();
        const T* w = self.inputs[0]->value.data();
        T gw = 0;
        for (std::size_t i = 0; i < self.grad.size(); ++i) gw += g[i] * w[i];
        const T coef = gw / (sigma * sigma);
        T* d = self.inputs[0]->grad_buffer().data();
        for (int r = 0; r < rows; ++r)
          for (int c = 0; c < cols; ++c) {
            const std::size_t i = static_cast<std::size_t>(r) * cols + c;
            d[i] += g[i] / sigma - coef * uv[static_cast<std::size_t>(r)] * v[static_cast<std::size_t>(c)];
          }
      });
  return {std::move(result), std::move(u_out), sigma};
}

template SpectralNormResult<float> spectral_normalize(const Var<float>&, int, const Tensor<float>&);
template SpectralNormResult<double> spectral_normalize(const Var<double>&, int, const Tensor<double>&);
template float power_iteration(const Tensor<float>&, Tensor<float>&, int);
template double power_iteration(const Tensor<double>&, Tensor<double>&, int);

}  // namespace qdwi::diff
