#include "qdwi/diff/adam.hpp"

#include <cmath>

namespace qdwi::diff {

template <typename T>
AdamState<T> make_adam(T learning_rate, T beta1, T beta2, T epsilon) {
  AdamState<T> s;
  s.learning_rate = learning_rate;
  s.beta1 = beta1;
  s.beta2 = beta2;
  s.epsilon = epsilon;
  return s;
}

template <typename T>
void adam_step(ParamSet<T>& params, const GradMap<T>& grads, AdamState<T>& state) {
  if (!(state.beta1 > T(0) && state.beta1 < T(1) && state.beta2 > T(0) && state.beta2 < T(1))) {
    throw FormatError("adam: betas must lie in (0, 1)");
  }
  for (const auto& [name, var] : params) {
    auto it = grads.find(name);
    if (it == grads.end()) throw FormatError("adam: missing gradient for '" + name + "'");
    if (it->second.shape() != var.shape()) {
      throw FormatError("adam: shape mismatch for '" + name + "': " + shape_str(it->second.shape()) +
                        " vs " + shape_str(var.shape()));
    }
  }

  const auto t = static_cast<T>(params.step_count + 1);
  const T c1 = T(1) - std::pow(state.beta1, t);
  const T c2 = T(1) - std::pow(state.beta2, t);
  for (const auto& [name, cvar] : params) {
    Var<T> var = cvar;
    const Tensor<T>& g = grads.at(name);
    auto& m = state.first_moment[name];
    auto& v = state.second_moment[name];
    if (m.shape() != var.shape()) m = Tensor<T>(var.shape());
    if (v.shape() != var.shape()) v = Tensor<T>(var.shape());
    Tensor<T>& p = var.mutable_value();
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = state.beta1 * m[i] + (T(1) - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (T(1) - state.beta2) * g[i] * g[i];
      const T mhat = m[i] / c1;
      const T vhat = v[i] / c2;
      p[i] -= state.learning_rate * mhat / (std::sqrt(vhat) + state.epsilon);
    }
  }
  ++params.step_count;
}

template AdamState<float> make_adam(float, float, float, float);
template AdamState<double> make_adam(double, double, double, double);
template void adam_step(ParamSet<float>&, const GradMap<float>&, AdamState<float>&);
template void adam_step(ParamSet<double>&, const GradMap<double>&, AdamState<double>&);

}  // namespace qdwi::diff
