#include <random>

#include <gtest/gtest.h>

#include "qdwi/diff/ops.hpp"
#include "qdwi/error.hpp"
#include "qdwi/losses.hpp"

using namespace qdwi;
using diff::Shape;

namespace {

DiscriminatorOutput<double> constant_output(int n, int h, int w, double global, double pixel) {
  return {Var<double>::constant(Tensor<double>({n, 1}, global)),
          Var<double>::constant(Tensor<double>({n, 1, h, w}, pixel))};
}

Var<double> filled(Shape s, double v) { return Var<double>::constant(Tensor<double>(std::move(s), v)); }

}  // namespace

TEST(LsganD, AllHalfScores) {
  const auto o = constant_output(2, 4, 4, 0.5, 0.5);
  EXPECT_NEAR(lsgan_d_loss(o, o).item(), 0.5, 1e-12);
}

TEST(LsganD, PerfectDiscriminatorIsZero) {
  EXPECT_EQ(lsgan_d_loss(constant_output(2, 4, 4, 1, 1), constant_output(2, 4, 4, 0, 0)).item(), 0.0);
}

TEST(LsganD, SingleFooledPixel) {
  const int h = 5, w = 7;
  auto fake = constant_output(1, h, w, 0, 0);
  Tensor<double> p({1, 1, h, w});
  p[13] = 1.0;
  fake.pixel_scores = Var<double>::constant(p);
  EXPECT_NEAR(lsgan_d_loss(constant_output(1, h, w, 1, 1), fake).item(), 0.5 / (h * w), 1e-15);
}

TEST(LsganD, ZeroOnlyAtTargets) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-2, 2);
  for (int i = 0; i < 200; ++i) {
    const auto real = constant_output(1, 2, 2, u(rng), u(rng));
    const auto fake = constant_output(1, 2, 2, u(rng), u(rng));
    EXPECT_GT(lsgan_d_loss(real, fake).item(), 0.0);
  }
}

TEST(LsganG, Examples) {
  EXPECT_EQ(lsgan_g_loss(constant_output(3, 4, 4, 1, 1)).item(), 0.0);
  EXPECT_NEAR(lsgan_g_loss(constant_output(3, 4, 4, 0, 0)).item(), 1.0, 1e-12);
  EXPECT_NEAR(lsgan_g_loss(constant_output(3, 4, 4, 0.5, 0.5)).item(), 0.25, 1e-12);
}

TEST(LsganG, ResolutionInvariantForConstantMaps) {
  EXPECT_NEAR(lsgan_g_loss(constant_output(1, 4, 4, 0.3, 0.7)).item(),
              lsgan_g_loss(constant_output(1, 32, 16, 0.3, 0.7)).item(), 1e-12);
}

TEST(LsganG, GradientPushesScoresUp) {
  for (double s : {-1.0, 0.0, 0.5, 0.99}) {
    auto g = Var<double>::parameter(Tensor<double>({1, 1}, s), "g");
    auto p = Var<double>::parameter(Tensor<double>({1, 1, 2, 2}, s), "p");
    diff::backward(lsgan_g_loss(DiscriminatorOutput<double>{g, p}));
    EXPECT_LT(g.grad()[0], 0.0);
    for (double v : p.grad().values()) EXPECT_LT(v, 0.0);
    // Finite-difference confirmation on the global score.
    const double h = 1e-6;
    auto at = [&](double v) { return lsgan_g_loss(constant_output(1, 2, 2, v, s)).item(); };
    EXPECT_LT((at(s + h) - at(s - h)) / (2 * h), 0.0);
  }
}

TEST(L1, Examples) {
  const Shape s{2, 1, 3, 3};
  EXPECT_EQ(l1_translation_loss(filled(s, 0.4), filled(s, 0.4), filled(s, 1.0), {1000, 1000}).item(), 0.0);
  EXPECT_EQ(l1_translation_loss(filled(s, 1.0), filled(s, 0.4), filled(s, 1.0), {0, 0}).item(), 0.0);
  EXPECT_NEAR(l1_translation_loss(filled(s, 0.5), filled(s, 0.4), filled(s, 1.0), {1000, 3000}).item(), 0.1, 1e-12);
}

TEST(L1, BranchIsPerSample) {
  const Shape s{2, 1, 2, 2};
  // Sample 0 compares to the DWI (0.4 away), sample 1 to B0 (exact).
  EXPECT_NEAR(l1_translation_loss(filled(s, 1.0), filled(s, 0.6), filled(s, 1.0), {1000, 0}).item(), 0.2, 1e-12);
}

TEST(L1, ShapeMismatch) {
  EXPECT_THROW(l1_translation_loss(filled({1, 1, 2, 2}, 0), filled({1, 1, 3, 2}, 0), filled({1, 1, 2, 2}, 0), {1}),
               FormatError);
}

TEST(Total, WeightedSum) {
  auto s = [](double v) { return Var<double>::constant(Tensor<double>({1}, v)); };
  EXPECT_NEAR(total_generator_loss(s(0.25), s(0.02), LossWeights{1, 100}).item(), 2.25, 1e-12);
  EXPECT_EQ(total_generator_loss(s(0.25), s(0.02), LossWeights{1, 0}).item(), 0.25);
  EXPECT_EQ(total_generator_loss(s(0), s(0), LossWeights{}).item(), 0.0);
  EXPECT_THROW(total_generator_loss(s(0), s(0), LossWeights{-1, 1}), FormatError);
}

TEST(Losses, NonNegative) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0, 2);
  for (int i = 0; i < 100; ++i) {
    const auto a = constant_output(1, 2, 2, n(rng), n(rng));
    const auto b = constant_output(1, 2, 2, n(rng), n(rng));
    EXPECT_GE(lsgan_d_loss(a, b).item(), 0.0);
    EXPECT_GE(lsgan_g_loss(a).item(), 0.0);
  }
}
