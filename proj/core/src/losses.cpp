#include "qdwi/losses.hpp"

#include "qdwi/diff/ops.hpp"
#include "qdwi/error.hpp"

namespace qdwi {

namespace ops = diff;

void validate(const LossWeights& w) {
  if (!(w.lambda_gan >= 0) || !(w.lambda_l1 >= 0)) throw FormatError("loss weights must be >= 0");
}

namespace {

template <typename T>
Var<T> half_mse_to(const Var<T>& x, T target) {
  return ops::scale(ops::mean(ops::square(ops::add_scalar(x, -target))), T(0.5));
}

}  // namespace

template <typename T>
Var<T> lsgan_d_loss(const DiscriminatorOutput<T>& real, const DiscriminatorOutput<T>& fake) {
  if (real.pixel_scores.shape() != fake.pixel_scores.shape()) {
    throw FormatError("lsgan_d_loss: real and fake score maps differ in shape");
  }
  Var<T> global = ops::add(half_mse_to(real.global_score, T(1)), half_mse_to(fake.global_score, T(0)));
  Var<T> pixel = ops::add(half_mse_to(real.pixel_scores, T(1)), half_mse_to(fake.pixel_scores, T(0)));
  return ops::add(global, pixel);
}

template <typename T>
Var<T> lsgan_g_loss(const DiscriminatorOutput<T>& fake) {
  return ops::add(half_mse_to(fake.global_score, T(1)), half_mse_to(fake.pixel_scores, T(1)));
}

template <typename T>
Var<T> l1_translation_loss(const Var<T>& pred, const Var<T>& target_dwi, const Var<T>& target_b0,
                           const std::vector<double>& bvalues) {
  if (pred.shape() != target_dwi.shape() || pred.shape() != target_b0.shape()) {
    throw FormatError("l1_translation_loss: shape mismatch " + diff::shape_str(pred.shape()) + " vs " +
                      diff::shape_str(target_dwi.shape()));
  }
  const int n = pred.dim(0);
  if (static_cast<int>(bvalues.size()) != n) throw FormatError("l1_translation_loss: one bvalue per sample required");
  // Branch selection is a constant per sample, so mix the two targets up front.
  const std::size_t per = pred.value().size() / static_cast<std::size_t>(n);
  Tensor<T> target(pred.shape());
  for (int i = 0; i < n; ++i) {
    const auto& src = bvalues[i] > 0 ? target_dwi.value() : target_b0.value();
    std::copy_n(src.data() + i * per, per, target.data() + i * per);
  }
  return ops::mean(ops::abs(ops::sub(pred, Var<T>::constant(std::move(target), "l1.target"))));
}

template <typename T>
Var<T> total_generator_loss(const Var<T>& adv, const Var<T>& l1, const LossWeights& w) {
  validate(w);
  return ops::add(ops::scale(adv, static_cast<T>(w.lambda_gan)), ops::scale(l1, static_cast<T>(w.lambda_l1)));
}

#define QDWI_INSTANTIATE_LOSSES(T)                                                                            \
  template Var<T> lsgan_d_loss(const DiscriminatorOutput<T>&, const DiscriminatorOutput<T>&);                \
  template Var<T> lsgan_g_loss(const DiscriminatorOutput<T>&);                                               \
  template Var<T> l1_translation_loss(const Var<T>&, const Var<T>&, const Var<T>&, const std::vector<double>&); \
  template Var<T> total_generator_loss(const Var<T>&, const Var<T>&, const LossWeights&);

QDWI_INSTANTIATE_LOSSES(float)
QDWI_INSTANTIATE_LOSSES(double)

}  // namespace qdwi
