#pragma once

// Small network configurations shared by unit and acceptance tests.

#include "qdwi/discriminator.hpp"
#include "qdwi/generator.hpp"
#include "qdwi/training.hpp"

namespace qdwi::testkit {

inline GeneratorConfig tiny_generator(OutputActivation act = OutputActivation::Linear) {
  GeneratorConfig g;
  g.base_width = 2;
  g.depth = 2;
  g.residual_blocks = 1;
  g.mlp_hidden_width = 8;
  g.output_activation = act;
  return g;
}

inline DiscriminatorConfig tiny_discriminator() {
  DiscriminatorConfig d;
  d.base_width = 2;
  d.depth = 2;
  return d;
}

inline TrainConfig tiny_train_config() {
  TrainConfig c;
  c.generator = tiny_generator(OutputActivation::Clamp);
  c.discriminator = tiny_discriminator();
  c.batch_size = 2;
  c.steps = 10;
  c.seed = 17;
  return c;
}

/// Nudges every zero-initialised FiLM head so conditioning reaches the output.
template <typename T>
void perturb_film_heads(ParamSet<T>& p, std::uint64_t seed, double scale = 0.3) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  for (const auto& [name, var] : p) {
    if (name.rfind("gen.film.", 0) != 0) continue;
    Var<T> h = var;
    for (auto& v : h.mutable_value().values()) v = static_cast<T>(n(rng));
  }
}

}  // namespace qdwi::testkit
