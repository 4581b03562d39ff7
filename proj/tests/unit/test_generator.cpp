#include <cmath>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "qdwi/diff/ops.hpp"
#include "qdwi/error.hpp"
#include "qdwi/generator.hpp"
#include "tiny.hpp"

using namespace qdwi;
using diff::Shape;

namespace {

template <typename T>
Var<T> random_input(Shape s, std::uint64_t seed, double lo = 0, double hi = 1) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<T> t(std::move(s));
  for (auto& v : t.values()) v = static_cast<T>(u(rng));
  return Var<T>::constant(std::move(t));
}

template <typename T>
Var<T> cond(std::array<float, 4> c, int n = 1) {
  return condition_batch<T>(std::vector<std::array<float, 4>>(static_cast<std::size_t>(n), c));
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST(Generator, OutputShape) {
  GeneratorConfig c;
  c.base_width = 4;
  const auto p = init_generator_params<float>(c, 1);
  const auto y = generator_forward(random_input<float>({1, 3, 64, 64}, 2), cond<float>({1, 0, 0, 0.5f}), p, c);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 64, 64}));
}

TEST(Generator, RejectsBadShapes) {
  const auto c = testkit::tiny_generator();
  const auto p = init_generator_params<double>(c, 1);
  EXPECT_THROW(generator_forward(random_input<double>({1, 3, 18, 16}, 2), cond<double>({1, 0, 0, 1}), p, c),
               FormatError);
  EXPECT_THROW(generator_forward(random_input<double>({1, 2, 16, 16}, 2), cond<double>({1, 0, 0, 1}), p, c),
               FormatError);
  GeneratorConfig bad = c;
  bad.depth = 1;
  EXPECT_THROW(validate(bad), FormatError);
  bad = c;
  bad.input_channels = 4;
  EXPECT_THROW(validate(bad), FormatError);
}

TEST(Generator, InputChannelAblations) {
  for (int ch : {1, 2, 3}) {
    auto c = testkit::tiny_generator();
    c.input_channels = ch;
    const auto p = init_generator_params<double>(c, 3);
    EXPECT_EQ(p.at("gen.stem.w").dim(1), ch);
    EXPECT_EQ(generator_forward(random_input<double>({2, ch, 16, 16}, 4), cond<double>({0, 1, 0, 1}, 2), p, c)
                  .shape(),
              (Shape{2, 1, 16, 16}));
  }
}

TEST(ConditionEmbed, ZeroHeadsGiveIdentity) {
  const auto c = testkit::tiny_generator();
  const auto p = init_generator_params<double>(c, 5);
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<float> u(-1, 1);
  for (int i = 0; i < 20; ++i) {
    const auto f = condition_embed(cond<double>({u(rng), u(rng), u(rng), u(rng)}), p, c);
    ASSERT_FALSE(f.sites.empty());
    for (std::size_t k = 0; k < f.sites.size(); ++k) {
      for (double g : f.gamma[k].value().values()) EXPECT_EQ(g, 1.0);
      for (double b : f.beta[k].value().values()) EXPECT_EQ(b, 0.0);
    }
  }
}

TEST(ConditionEmbed, HeadLengthsMatchChannels) {
  GeneratorConfig c;
  const auto p = init_generator_params<float>(c, 1);
  const auto f = condition_embed(cond<float>({1, 0, 0, 1}), p, c);
  for (const auto& site : film_sites(c)) {
    const auto k = f.find(site.name);
    if (!site.conditioned) {
      EXPECT_EQ(k, f.sites.size());
      continue;
    }
    EXPECT_EQ(f.gamma[k].shape(), (Shape{1, site.channels}));
    EXPECT_EQ(f.beta[k].shape(), (Shape{1, site.channels}));
  }
  // Default sites: every bottleneck/decoder norm, encoder plain.
  EXPECT_EQ(f.sites.size(), static_cast<std::size_t>(2 * c.residual_blocks + c.depth));
  EXPECT_EQ(f.gamma[f.find("res0.a")].dim(1), 128);
}

TEST(ConditionEmbed, Deterministic) {
  const auto c = testkit::tiny_generator();
  auto p = init_generator_params<double>(c, 5);
  testkit::perturb_film_heads(p, 1);
  const auto a = condition_embed(cond<double>({0.3f, 0.4f, 0.5f, 0.6f}), p, c);
  const auto b = condition_embed(cond<double>({0.3f, 0.4f, 0.5f, 0.6f}), p, c);
  for (std::size_t k = 0; k < a.sites.size(); ++k) EXPECT_EQ(a.gamma[k].value(), b.gamma[k].value());
}

TEST(FilmModulate, IdentityEqualsInstanceNorm) {
  const auto h = random_input<double>({2, 3, 5, 5}, 1, -2, 2);
  const auto y = film_modulate(h, Var<double>::constant(Tensor<double>({2, 3}, 1.0)),
                               Var<double>::constant(Tensor<double>({2, 3}, 0.0)), 1e-5);
  EXPECT_EQ(y.value(), diff::instance_norm(h, 1e-5).value());
}

TEST(FilmModulate, ZeroScaleGivesConstant) {
  const auto y = film_modulate(random_input<double>({1, 2, 4, 4}, 2, -3, 3),
                               Var<double>::constant(Tensor<double>({1, 2}, 0.0)),
                               Var<double>::constant(Tensor<double>({1, 2}, 0.7)), 1e-5);
  for (double v : y.value().values()) EXPECT_EQ(v, 0.7);
}

TEST(FilmModulate, HandEvaluatedChannel) {
  const auto h = Var<double>::constant(Tensor<double>({1, 1, 1, 2}, std::vector<double>{1, 3}));
  const auto y = film_modulate(h, Var<double>::constant(Tensor<double>({1, 1}, 2.0)),
                               Var<double>::constant(Tensor<double>({1, 1}, 1.0)), 1e-12);
  EXPECT_NEAR(y.value()[0], -1.0, 1e-9);
  EXPECT_NEAR(y.value()[1], 3.0, 1e-9);
}

TEST(FilmModulate, LengthMismatch) {
  const auto h = random_input<double>({1, 3, 2, 2}, 1);
  EXPECT_THROW(film_modulate(h, Var<double>::constant(Tensor<double>({1, 2}, 1.0)),
                             Var<double>::constant(Tensor<double>({1, 2}, 0.0)), 1e-5),
               FormatError);
}

TEST(FilmModulate, ChannelPermutationEquivariance) {
  std::mt19937_64 rng(9);
  std::vector<int> perm{2, 0, 3, 1};
  for (int trial = 0; trial < 20; ++trial) {
    const auto h = random_input<double>({1, 4, 3, 3}, trial, -1, 1);
    const auto g = random_input<double>({1, 4}, 100 + trial, -2, 2);
    const auto b = random_input<double>({1, 4}, 200 + trial, -2, 2);
    Tensor<double> hp({1, 4, 3, 3}), gp({1, 4}), bp({1, 4});
    for (int c = 0; c < 4; ++c) {
      std::copy_n(h.value().data() + 9 * perm[c], 9, hp.data() + 9 * c);
      gp[c] = g.value()[perm[c]];
      bp[c] = b.value()[perm[c]];
    }
    const auto y = film_modulate(h, g, b, 1e-5);
    const auto yp = film_modulate(Var<double>::constant(hp), Var<double>::constant(gp), Var<double>::constant(bp),
                                  1e-5);
    for (int c = 0; c < 4; ++c)
      for (int i = 0; i < 9; ++i) EXPECT_EQ(yp.value()[9 * c + i], y.value()[9 * perm[c] + i]);
  }
}

TEST(Generator, IdentityInitIgnoresCondition) {
  const auto c = testkit::tiny_generator();
  const auto p = init_generator_params<double>(c, 11);
  const auto s = random_input<double>({1, 3, 16, 16}, 3);
  const auto a = generator_forward(s, cond<double>({1, 0, 0, 1.0f / 3}), p, c);
  const auto b = generator_forward(s, cond<double>({0, 0.6f, 0.8f, 1}), p, c);
  EXPECT_EQ(a.value(), b.value());
}

TEST(Generator, ConditioningReachesOutput) {
  const auto c = testkit::tiny_generator();
  auto p = init_generator_params<double>(c, 11);
  testkit::perturb_film_heads(p, 4);
  const auto s = random_input<double>({1, 3, 16, 16}, 3);
  const auto a = generator_forward(s, cond<double>({1, 0, 0, 1.0f / 3}), p, c);
  const auto b = generator_forward(s, cond<double>({0, 0.6f, 0.8f, 1}), p, c);
  EXPECT_GT(max_abs_diff(a.value(), b.value()), 1e-6);

  // Jacobian w.r.t. each condition component by central differences.
  const double h = 1e-4;
  for (int k = 0; k < 4; ++k) {
    std::array<float, 4> lo{0.3f, 0.4f, 0.5f, 0.5f}, hi = lo;
    lo[k] -= static_cast<float>(h);
    hi[k] += static_cast<float>(h);
    EXPECT_GT(max_abs_diff(generator_forward(s, cond<double>(hi), p, c).value(),
                           generator_forward(s, cond<double>(lo), p, c).value()),
              1e-9)
        << "component " << k;
  }
}

TEST(Generator, Deterministic) {
  GeneratorConfig c;
  c.base_width = 4;
  const auto p = init_generator_params<float>(c, 2);
  const auto s = random_input<float>({2, 3, 16, 16}, 8);
  EXPECT_EQ(generator_forward(s, cond<float>({1, 0, 0, 1}, 2), p, c).value(),
            generator_forward(s, cond<float>({1, 0, 0, 1}, 2), p, c).value());
  EXPECT_EQ(init_generator_params<float>(c, 2).digest(), p.digest());
}

TEST(Generator, ClampRespectsBounds) {
  GeneratorConfig c = testkit::tiny_generator(OutputActivation::Clamp);
  auto p = init_generator_params<double>(c, 2);
  testkit::perturb_film_heads(p, 9, 3.0);
  for (int trial = 0; trial < 10; ++trial) {
    const auto y = generator_forward(random_input<double>({1, 3, 16, 16}, trial, -20, 20),
                                     cond<double>({0, 0, 1, 0.9f}), p, c);
    for (double v : y.value().values()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, c.intensity_cap);
    }
  }
}

TEST(Generator, TrunkGradientsNonzeroAfterHeadPerturbation) {
  const auto c = testkit::tiny_generator();
  auto p = init_generator_params<double>(c, 13);
  testkit::perturb_film_heads(p, 2);
  const auto s = random_input<double>({1, 3, 16, 16}, 5);
  const auto b = cond<double>({0.6f, 0.8f, 0, 2.0f / 3});
  auto loss = [&] { return diff::mean(generator_forward(s, b, p, c)); };
  const auto g = diff::evaluate_with_gradients(loss(), p);
  for (const char* name : {"gen.mlp.fc0.w", "gen.mlp.fc0.b", "gen.mlp.fc1.w", "gen.mlp.fc1.b"}) {
    double m = 0;
    for (double v : g.at(name).values()) m = std::max(m, std::abs(v));
    EXPECT_GT(m, 1e-8) << name;
  }
  EXPECT_LT(testkit::check_gradients(p, loss).max_rel_error, 1e-5);
}

TEST(Generator, FilmSiteVariants) {
  for (auto sites : {FilmSites::All, FilmSites::None}) {
    auto c = testkit::tiny_generator();
    c.film_sites = sites;
    const auto p = init_generator_params<double>(c, 1);
    const auto f = condition_embed(cond<double>({1, 0, 0, 1}), p, c);
    EXPECT_EQ(f.sites.size(), sites == FilmSites::None ? 0u : film_sites(c).size());
    EXPECT_EQ(generator_forward(random_input<double>({1, 3, 16, 16}, 1), cond<double>({1, 0, 0, 1}), p, c).shape(),
              (Shape{1, 1, 16, 16}));
  }
}
