#pragma once

#include "qdwi/diff/param_set.hpp"

namespace qdwi::diff {

template <typename T>
struct AdamState {
  std::map<std::string, Tensor<T>> first_moment;
  std::map<std::string, Tensor<T>> second_moment;
  T beta1 = T(0.5);
  T beta2 = T(0.999);
  T epsilon = T(1e-8);
  T learning_rate = T(1e-4);
};

template <typename T>
AdamState<T> make_adam(T learning_rate, T beta1, T beta2, T epsilon = T(1e-8));

/// Bias-corrected Adam update in place; increments params.step_count.
/// Moments are created lazily. Throws FormatError on a missing gradient or a
/// shape mismatch (before touching any parameter).
template <typename T>
void adam_step(ParamSet<T>& params, const GradMap<T>& grads, AdamState<T>& state);

extern template AdamState<float> make_adam(float, float, float, float);
extern template AdamState<double> make_adam(double, double, double, double);
extern template void adam_step(ParamSet<float>&, const GradMap<float>&, AdamState<float>&);
extern template void adam_step(ParamSet<double>&, const GradMap<double>&, AdamState<double>&);

}  // namespace qdwi::diff
