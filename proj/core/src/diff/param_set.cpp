#include "qdwi/diff/param_set.hpp"

#include <cstring>

namespace qdwi::diff {

template <typename T>
ParamSet<T>::ParamSet(const ParamSet& other)
    : buffers(other.buffers), step_count(other.step_count) {
  for (const auto& [name, var] : other.entries_) add(name, var.value());
}

template <typename T>
ParamSet<T>& ParamSet<T>::operator=(const ParamSet& other) {
  if (this != &other) {
    ParamSet copy(other);
    *this = std::move(copy);
  }
  return *this;
}

template <typename T>
Var<T>& ParamSet<T>::add(const std::string& name, Tensor<T> init) {
  auto [it, inserted] = entries_.emplace(name, Var<T>::parameter(std::move(init), name));
  if (!inserted) throw FormatError("duplicate parameter name '" + name + "'");
  return it->second;
}

template <typename T>
Var<T>& ParamSet<T>::at(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw FormatError("unknown parameter '" + name + "'");
  return it->second;
}

template <typename T>
const Var<T>& ParamSet<T>::at(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw FormatError("unknown parameter '" + name + "'");
  return it->second;
}

template <typename T>
std::size_t ParamSet<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [name, var] : entries_) n += var.value().size();
  return n;
}

template <typename T>
void ParamSet<T>::zero_grad() {
  for (auto& [name, var] : entries_) var.zero_grad();
}

template <typename T>
std::uint64_t ParamSet<T>::digest() const {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& [name, var] : entries_) {
    mix(name.data(), name.size());
    mix(var.value().data(), var.value().size() * sizeof(T));
  }
  return h;
}

template <typename T>
GradMap<T> evaluate_with_gradients(const Var<T>& output, ParamSet<T>& params) {
  params.zero_grad();
  backward(output);
  GradMap<T> grads;
  for (const auto& [name, var] : params) {
    grads.emplace(name, var.grad().empty() ? Tensor<T>(var.shape()) : var.grad());
  }
  params.zero_grad();
  return grads;
}

template class ParamSet<float>;
template class ParamSet<double>;
template GradMap<float> evaluate_with_gradients(const Var<float>&, ParamSet<float>&);
template GradMap<double> evaluate_with_gradients(const Var<double>&, ParamSet<double>&);

}  // namespace qdwi::diff
