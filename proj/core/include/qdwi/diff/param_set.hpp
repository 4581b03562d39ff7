#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "qdwi/diff/graph.hpp"

namespace qdwi::diff {

template <typename T>
using GradMap = std::map<std::string, Tensor<T>>;

/// Named trainable parameters plus persistent non-trainable buffers.
/// Iteration is lexicographic by name. Copies are deep: a copied set owns
/// fresh graph leaves.
template <typename T>
class ParamSet {
 public:
  using Entries = std::map<std::string, Var<T>>;

  ParamSet() = default;
  ParamSet(const ParamSet& other);
  ParamSet& operator=(const ParamSet& other);
  ParamSet(ParamSet&&) noexcept = default;
  ParamSet& operator=(ParamSet&&) noexcept = default;

  /// Registers a parameter; throws on duplicate names.
  Var<T>& add(const std::string& name, Tensor<T> init);
  Var<T>& at(const std::string& name);
  const Var<T>& at(const std::string& name) const;
  bool contains(const std::string& name) const { return entries_.count(name) != 0; }

  const Entries& entries() const noexcept { return entries_; }
  typename Entries::const_iterator begin() const { return entries_.begin(); }
  typename Entries::const_iterator end() const { return entries_.end(); }
  std::size_t size() const noexcept { return entries_.size(); }
  std::size_t scalar_count() const;

  void zero_grad();

  /// FNV-1a over names and raw bytes of parameters (buffers excluded).
  std::uint64_t digest() const;

  template <typename U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (const auto& [name, var] : entries_) out.add(name, var.value().template cast<U>());
    for (const auto& [name, buf] : buffers) out.buffers[name] = buf.template cast<U>();
    out.step_count = step_count;
    return out;
  }

  std::map<std::string, Tensor<T>> buffers;
  std::uint64_t step_count = 0;

 private:
  Entries entries_;
};

/// Runs the reverse sweep from a scalar output and returns one gradient per
/// parameter; parameters the output does not depend on get zeros.
template <typename T>
GradMap<T> evaluate_with_gradients(const Var<T>& output, ParamSet<T>& params);

extern template class ParamSet<float>;
extern template class ParamSet<double>;
extern template GradMap<float> evaluate_with_gradients(const Var<float>&, ParamSet<float>&);
extern template GradMap<double> evaluate_with_gradients(const Var<double>&, ParamSet<double>&);

}  // namespace qdwi::diff
