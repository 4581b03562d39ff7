#pragma once

#include "qdwi/discriminator.hpp"

namespace qdwi {

struct LossWeights {
  double lambda_gan = 1.0;
  double lambda_l1 = 100.0;

  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

void validate(const LossWeights& weights);

/// Least-squares discriminator objective summed over the global and pixel
/// branches. Pixel terms are means over positions; batch terms are means.
template <typename T>
Var<T> lsgan_d_loss(const DiscriminatorOutput<T>& real, const DiscriminatorOutput<T>& fake);

template <typename T>
Var<T> lsgan_g_loss(const DiscriminatorOutput<T>& fake);

/// Per-sample mean absolute error against target_dwi where bvalues[n] > 0 and
/// against target_b0 where bvalues[n] == 0, averaged over the batch.
/// All slices are [N, 1, H, W].
template <typename T>
Var<T> l1_translation_loss(const Var<T>& pred, const Var<T>& target_dwi, const Var<T>& target_b0,
                           const std::vector<double>& bvalues);

template <typename T>
Var<T> total_generator_loss(const Var<T>& adv, const Var<T>& l1, const LossWeights& weights);

}  // namespace qdwi
