#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "qdwi/diff/param_set.hpp"

namespace qdwi {

using diff::ParamSet;
using diff::Tensor;
using diff::Var;

/// Which instance-norm sites receive q-space modulation.
enum class FilmSites { BottleneckAndDecoder, All, None };
/// Output head activation. Clamp bounds outputs to [0, intensity_cap] and
/// passes gradients straight through.
enum class OutputActivation { Clamp, Linear };

struct GeneratorConfig {
  int input_channels = 3;  ///< 1: B0, 2: B0+T2, 3: B0+T2+T1
  int base_width = 32;
  int depth = 2;
  int residual_blocks = 4;
  int mlp_hidden_width = 64;
  FilmSites film_sites = FilmSites::BottleneckAndDecoder;
  OutputActivation output_activation = OutputActivation::Clamp;
  double intensity_cap = 1.5;
  double norm_epsilon = 1e-5;
  double leaky_slope = 0.2;
  bool skip_connections = true;

  friend bool operator==(const GeneratorConfig&, const GeneratorConfig&) = default;
};

void validate(const GeneratorConfig& config);

struct FilmSite {
  std::string name;
  int channels;
  bool conditioned;
};

/// Every normalisation site of the network in forward order.
std::vector<FilmSite> film_sites(const GeneratorConfig& config);

/// Per-site modulation for a batch: gamma and beta are [N, C].
template <typename T>
struct FilmParams {
  std::vector<std::string> sites;
  std::vector<Var<T>> gamma;
  std::vector<Var<T>> beta;

  std::size_t find(const std::string& site) const;
};

template <typename T>
ParamSet<T> init_generator_params(const GeneratorConfig& config, std::uint64_t seed);

/// Shared 3-layer perceptron: 4 -> hidden -> hidden trunk, then one affine
/// head per conditioned site emitting (delta_gamma, beta); gamma = 1 + delta_gamma.
/// `condition` is [N, 4].
template <typename T>
FilmParams<T> condition_embed(const Var<T>& condition, const ParamSet<T>& params, const GeneratorConfig& config);

/// gamma * instance_norm(h) + beta, per sample and channel.
template <typename T>
Var<T> film_modulate(const Var<T>& h, const Var<T>& gamma, const Var<T>& beta, T epsilon);

/// structural [N, C, H, W] and condition [N, 4] -> predicted DWI [N, 1, H, W].
template <typename T>
Var<T> generator_forward(const Var<T>& structural, const Var<T>& condition, const ParamSet<T>& params,
                         const GeneratorConfig& config);

/// Packs condition vectors into an [N, 4] constant.
template <typename T>
Var<T> condition_batch(const std::vector<std::array<float, 4>>& conditions);

extern template struct FilmParams<float>;
extern template struct FilmParams<double>;

}  // namespace qdwi
