#pragma once

#include "qdwi/diff/graph.hpp"

namespace qdwi::diff {

template <typename T>
struct SpectralNormResult {
  Var<T> weight;  ///< W / sigma
  Tensor<T> u;    ///< updated left singular-vector estimate, to be persisted
  T sigma;        ///< estimate of the largest singular value (1 for a zero matrix)
};

/// Divides W (viewed as [rows, numel/rows]) by a power-iteration estimate of
/// its largest singular value. `u` is the persisted left vector (length rows);
/// the gradient treats u and v as constants.
template <typename T>
SpectralNormResult<T> spectral_normalize(const Var<T>& weight, int power_iters, const Tensor<T>& u);

/// Power iteration on a plain matrix; updates u in place and returns sigma.
template <typename T>
T power_iteration(const Tensor<T>& weight, Tensor<T>& u, int iters);

extern template SpectralNormResult<float> spectral_normalize(const Var<float>&, int, const Tensor<float>&);
extern template SpectralNormResult<double> spectral_normalize(const Var<double>&, int, const Tensor<double>&);
extern template float power_iteration(const Tensor<float>&, Tensor<float>&, int);
extern template double power_iteration(const Tensor<double>&, Tensor<double>&, int);

}  // namespace qdwi::diff
