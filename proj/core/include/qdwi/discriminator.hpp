#pragma once

#include <cstdint>

#include "qdwi/diff/param_set.hpp"

namespace qdwi {

using diff::ParamSet;
using diff::Tensor;
using diff::Var;

struct DiscriminatorConfig {
  int input_channels = 4;  ///< structural channels plus the candidate DWI
  int base_width = 32;
  int depth = 2;
  int power_iterations = 1;
  double leaky_slope = 0.2;

  friend bool operator==(const DiscriminatorConfig&, const DiscriminatorConfig&) = default;
};

void validate(const DiscriminatorConfig& config);

/// Update: run power iteration and persist the refreshed u vectors.
/// Frozen: reuse the stored u vectors without modifying them.
enum class SpectralMode { Update, Frozen };

/// f(phi, b) = b^T V phi + psi(phi). V is [4, F]; psi is an affine map F -> 1.
template <typename T>
struct ProjectionHead {
  Var<T> V;
  Var<T> psi_w;  ///< [1, F]
  Var<T> psi_b;  ///< [1]
};

/// phi [N, F], b [N, 4] -> [N, 1].
template <typename T>
Var<T> project_condition(const Var<T>& phi, const Var<T>& condition, const ProjectionHead<T>& head);

/// Per-pixel variant: phi [N, F, H, W], b [N, 4] -> [N, 1, H, W], one head
/// shared by all positions.
template <typename T>
Var<T> project_condition_pixels(const Var<T>& phi, const Var<T>& condition, const ProjectionHead<T>& head);

template <typename T>
struct DiscriminatorOutput {
  Var<T> global_score;  ///< [N, 1]
  Var<T> pixel_scores;  ///< [N, 1, H, W]
};

template <typename T>
ParamSet<T> init_discriminator_params(const DiscriminatorConfig& config, std::uint64_t seed);

template <typename T>
ProjectionHead<T> global_head(const ParamSet<T>& params);
template <typename T>
ProjectionHead<T> pixel_head(const ParamSet<T>& params);

/// Names of every spectrally normalised weight.
std::vector<std::string> spectral_weight_names(const DiscriminatorConfig& config);

/// x [N, input_channels, H, W], b [N, 4]. In Update mode the u buffers in
/// `params` are refreshed.
template <typename T>
DiscriminatorOutput<T> discriminator_forward(const Var<T>& x, const Var<T>& condition, ParamSet<T>& params,
                                             const DiscriminatorConfig& config, SpectralMode mode);

}  // namespace qdwi
