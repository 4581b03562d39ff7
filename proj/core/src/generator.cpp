#include "qdwi/generator.hpp"

#include <cmath>
#include <random>

#include "qdwi/diff/ops.hpp"
#include "qdwi/error.hpp"
#include "qdwi/rng.hpp"

namespace qdwi {

namespace ops = diff;

void validate(const GeneratorConfig& c) {
  if (c.input_channels < 1 || c.input_channels > 3) throw FormatError("generator input_channels must be 1, 2 or 3");
  if (c.depth < 2) throw FormatError("generator depth must be >= 2");
  if (c.base_width < 1 || c.mlp_hidden_width < 1 || c.residual_blocks < 0) {
    throw FormatError("generator widths must be positive");
  }
  if (!(c.intensity_cap > 0) || !(c.norm_epsilon > 0)) throw FormatError("generator cap/epsilon must be positive");
}

std::vector<FilmSite> film_sites(const GeneratorConfig& c) {
  const bool enc = c.film_sites == FilmSites::All;
  const bool deep = c.film_sites != FilmSites::None;
  std::vector<FilmSite> sites;
  sites.push_back({"stem", c.base_width, enc});
  for (int i = 1; i <= c.depth; ++i) sites.push_back({"enc" + std::to_string(i), c.base_width << i, enc});
  const int bottleneck = c.base_width << c.depth;
  for (int j = 0; j < c.residual_blocks; ++j) {
    sites.push_back({"res" + std::to_string(j) + ".a", bottleneck, deep});
    sites.push_back({"res" + std::to_string(j) + ".b", bottleneck, deep});
  }
  for (int i = c.depth; i >= 1; --i) sites.push_back({"dec" + std::to_string(i), c.base_width << (i - 1), deep});
  return sites;
}

template <typename T>
std::size_t FilmParams<T>::find(const std::string& site) const {
  for (std::size_t i = 0; i < sites.size(); ++i)
    if (sites[i] == site) return i;
  return sites.size();
}

namespace {

template <typename T>
Tensor<T> he_normal(diff::Shape shape, int fan_in, double gain, std::mt19937_64& rng) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> n(0.0, gain * std::sqrt(2.0 / fan_in));
  for (auto& v : t.values()) v = static_cast<T>(n(rng));
  return t;
}

}  // namespace

template <typename T>
ParamSet<T> init_generator_params(const GeneratorConfig& c, std::uint64_t seed) {
  validate(c);
  std::mt19937_64 rng(derive_seed(seed, {0x67656e}));
  ParamSet<T> p;
  auto conv = [&](const std::string& name, int out, int in, int k) {
    p.add(name, he_normal<T>({out, in, k, k}, in * k * k, 1.0, rng));
  };
  conv("gen.stem.w", c.base_width, c.input_channels, 3);
  for (int i = 1; i <= c.depth; ++i)
    conv("gen.enc" + std::to_string(i) + ".w", c.base_width << i, c.base_width << (i - 1), 3);
  const int bw = c.base_width << c.depth;
  for (int j = 0; j < c.residual_blocks; ++j) {
    conv("gen.res" + std::to_string(j) + ".conv1.w", bw, bw, 3);
    conv("gen.res" + std::to_string(j) + ".conv2.w", bw, bw, 3);
  }
  for (int i = c.depth; i >= 1; --i)
    conv("gen.dec" + std::to_string(i) + ".w", c.base_width << (i - 1), c.base_width << i, 3);
  p.add("gen.head.w", he_normal<T>({1, c.base_width, 1, 1}, c.base_width, 0.5, rng));
  p.add("gen.head.b", Tensor<T>({1}, T(0.3)));

  const int hid = c.mlp_hidden_width;
  p.add("gen.mlp.fc0.w", he_normal<T>({hid, 4}, 4, 1.0, rng));
  p.add("gen.mlp.fc0.b", Tensor<T>({hid}));
  p.add("gen.mlp.fc1.w", he_normal<T>({hid, hid}, hid, 1.0, rng));
  p.add("gen.mlp.fc1.b", Tensor<T>({hid}));
  for (const auto& site : film_sites(c)) {
    if (!site.conditioned) continue;
    // Zero heads: modulation starts as the identity.
    p.add("gen.film." + site.name + ".w", Tensor<T>({2 * site.channels, hid}));
    p.add("gen.film." + site.name + ".b", Tensor<T>({2 * site.channels}));
  }
  return p;
}

template <typename T>
FilmParams<T> condition_embed(const Var<T>& condition, const ParamSet<T>& params, const GeneratorConfig& c) {
  if (condition.value().rank() != 2 || condition.dim(1) != 4) {
    throw FormatError("condition batch must be [N, 4], got " + diff::shape_str(condition.shape()));
  }
  const T slope = static_cast<T>(c.leaky_slope);
  Var<T> h = ops::leaky_relu(ops::linear(condition, params.at("gen.mlp.fc0.w"), &params.at("gen.mlp.fc0.b")), slope);
  h = ops::leaky_relu(ops::linear(h, params.at("gen.mlp.fc1.w"), &params.at("gen.mlp.fc1.b")), slope);
  FilmParams<T> out;
  for (const auto& site : film_sites(c)) {
    if (!site.conditioned) continue;
    const auto& w = params.at("gen.film." + site.name + ".w");
    const auto& b = params.at("gen.film." + site.name + ".b");
    Var<T> head = ops::linear(h, w, &b);
    out.sites.push_back(site.name);
    out.gamma.push_back(ops::add_scalar(ops::slice_cols(head, 0, site.channels), T(1)));
    out.beta.push_back(ops::slice_cols(head, site.channels, 2 * site.channels));
  }
  return out;
}

template <typename T>
Var<T> film_modulate(const Var<T>& h, const Var<T>& gamma, const Var<T>& beta, T epsilon) {
  if (h.value().rank() != 4 || gamma.shape() != diff::Shape{h.dim(0), h.dim(1)} || gamma.shape() != beta.shape()) {
    throw FormatError("film_modulate: modulation length mismatch for features " + diff::shape_str(h.shape()));
  }
  return ops::channel_affine(ops::instance_norm(h, epsilon), gamma, beta);
}

template <typename T>
Var<T> generator_forward(const Var<T>& structural, const Var<T>& condition, const ParamSet<T>& params,
                         const GeneratorConfig& c) {
  validate(c);
  const auto& s = structural.shape();
  if (s.size() != 4 || s[1] != c.input_channels) {
    throw FormatError("generator expects [N, " + std::to_string(c.input_channels) + ", H, W], got " +
                      diff::shape_str(s));
  }
  const int factor = 1 << c.depth;
  if (s[2] % factor != 0 || s[3] % factor != 0) {
    throw FormatError("generator input spatial dims must be divisible by " + std::to_string(factor));
  }
  if (condition.shape() != diff::Shape{s[0], 4}) {
    throw FormatError("condition batch must be [" + std::to_string(s[0]) + ", 4]");
  }

  const FilmParams<T> film = condition_embed(condition, params, c);
  const T eps = static_cast<T>(c.norm_epsilon);
  const T slope = static_cast<T>(c.leaky_slope);
  auto normalize = [&](const std::string& site, const Var<T>& h) {
    const std::size_t i = film.find(site);
    if (i == film.sites.size()) return ops::instance_norm(h, eps);
    return film_modulate(h, film.gamma[i], film.beta[i], eps);
  };
  auto conv = [&](const Var<T>& x, const std::string& name, int stride) {
    return ops::conv2d(x, params.at(name), static_cast<const Var<T>*>(nullptr), stride, 1);
  };

  std::vector<Var<T>> skips;
  Var<T> h = ops::leaky_relu(normalize("stem", conv(structural, "gen.stem.w", 1)), slope);
  skips.push_back(h);
  for (int i = 1; i <= c.depth; ++i) {
    const std::string n = "enc" + std::to_string(i);
    h = ops::leaky_relu(normalize(n, conv(h, "gen." + n + ".w", 2)), slope);
    skips.push_back(h);
  }
  for (int j = 0; j < c.residual_blocks; ++j) {
    const std::string n = "res" + std::to_string(j);
    Var<T> r = ops::leaky_relu(normalize(n + ".a", conv(h, "gen." + n + ".conv1.w", 1)), slope);
    r = normalize(n + ".b", conv(r, "gen." + n + ".conv2.w", 1));
    h = ops::add(h, r);
  }
  for (int i = c.depth; i >= 1; --i) {
    const std::string n = "dec" + std::to_string(i);
    h = ops::leaky_relu(normalize(n, conv(ops::upsample2x(h), "gen." + n + ".w", 1)), slope);
    if (c.skip_connections) h = ops::add(h, skips[static_cast<std::size_t>(i - 1)]);
  }
  Var<T> out = ops::conv2d(h, params.at("gen.head.w"), &params.at("gen.head.b"), 1, 0);
  if (c.output_activation == OutputActivation::Clamp) {
    out = ops::clamp_straight_through(out, T(0), static_cast<T>(c.intensity_cap));
  }
  return out;
}

template <typename T>
Var<T> condition_batch(const std::vector<std::array<float, 4>>& conditions) {
  Tensor<T> t({static_cast<int>(conditions.size()), 4});
  for (std::size_t i = 0; i < conditions.size(); ++i)
    for (int k = 0; k < 4; ++k) t[4 * i + k] = static_cast<T>(conditions[i][k]);
  return Var<T>::constant(std::move(t), "condition");
}

template struct FilmParams<float>;
template struct FilmParams<double>;

#define QDWI_INSTANTIATE_GENERATOR(T)                                                                        \
  template ParamSet<T> init_generator_params<T>(const GeneratorConfig&, std::uint64_t);                     \
  template FilmParams<T> condition_embed(const Var<T>&, const ParamSet<T>&, const GeneratorConfig&);        \
  template Var<T> film_modulate(const Var<T>&, const Var<T>&, const Var<T>&, T);                            \
  template Var<T> generator_forward(const Var<T>&, const Var<T>&, const ParamSet<T>&, const GeneratorConfig&); \
  template Var<T> condition_batch<T>(const std::vector<std::array<float, 4>>&);

QDWI_INSTANTIATE_GENERATOR(float)
QDWI_INSTANTIATE_GENERATOR(double)

}  // namespace qdwi
