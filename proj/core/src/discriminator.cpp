#include "qdwi/discriminator.hpp"

#include <cmath>
#include <random>

#include "qdwi/diff/ops.hpp"
#include "qdwi/diff/spectral_norm.hpp"
#include "qdwi/error.hpp"
#include "qdwi/rng.hpp"

namespace qdwi {

namespace ops = diff;

void validate(const DiscriminatorConfig& c) {
  if (c.input_channels < 2) throw FormatError("discriminator input_channels must be >= 2");
  if (c.depth < 1) throw FormatError("discriminator depth must be >= 1");
  if (c.base_width < 1) throw FormatError("discriminator base_width must be positive");
  if (c.power_iterations < 1) throw FormatError("discriminator power_iterations must be >= 1");
}

std::vector<std::string> spectral_weight_names(const DiscriminatorConfig& c) {
  std::vector<std::string> names;
  for (int i = 0; i <= c.depth; ++i) names.push_back("disc.enc" + std::to_string(i) + ".w");
  for (int i = c.depth; i >= 1; --i) names.push_back("disc.dec" + std::to_string(i) + ".w");
  return names;
}

template <typename T>
ParamSet<T> init_discriminator_params(const DiscriminatorConfig& c, std::uint64_t seed) {
  validate(c);
  std::mt19937_64 rng(derive_seed(seed, {0x646973}));
  ParamSet<T> p;
  auto normal = [&](diff::Shape shape, double std) {
    Tensor<T> t(std::move(shape));
    std::normal_distribution<double> n(0.0, std);
    for (auto& v : t.values()) v = static_cast<T>(n(rng));
    return t;
  };
  auto conv = [&](const std::string& name, int out, int in) {
    p.add(name + ".w", normal({out, in, 3, 3}, std::sqrt(2.0 / (in * 9))));
    p.add(name + ".b", Tensor<T>({out}));
  };
  conv("disc.enc0", c.base_width, c.input_channels);
  for (int i = 1; i <= c.depth; ++i) conv("disc.enc" + std::to_string(i), c.base_width << i, c.base_width << (i - 1));
  for (int i = c.depth; i >= 1; --i) conv("disc.dec" + std::to_string(i), c.base_width << (i - 1), c.base_width << i);

  const int fg = c.base_width << c.depth;
  const int fp = c.base_width;
  p.add("disc.global.V", normal({4, fg}, 1.0 / std::sqrt(fg)));
  p.add("disc.global.psi.w", normal({1, fg}, 1.0 / std::sqrt(fg)));
  p.add("disc.global.psi.b", Tensor<T>({1}));
  p.add("disc.pixel.V", normal({4, fp, 1, 1}, 1.0 / std::sqrt(fp)));
  p.add("disc.pixel.psi.w", normal({1, fp, 1, 1}, 1.0 / std::sqrt(fp)));
  p.add("disc.pixel.psi.b", Tensor<T>({1}));

  for (const auto& name : spectral_weight_names(c)) {
    const auto& w = p.at(name).value();
    Tensor<T> u({w.dim(0)});
    for (auto& v : u.values()) v = static_cast<T>(std::normal_distribution<double>(0.0, 1.0)(rng));
    diff::power_iteration(w, u, 10);
    p.buffers[name.substr(0, name.size() - 2) + ".sn_u"] = std::move(u);
  }
  return p;
}

template <typename T>
ProjectionHead<T> global_head(const ParamSet<T>& p) {
  return {p.at("disc.global.V"), p.at("disc.global.psi.w"), p.at("disc.global.psi.b")};
}

template <typename T>
ProjectionHead<T> pixel_head(const ParamSet<T>& p) {
  return {p.at("disc.pixel.V"), p.at("disc.pixel.psi.w"), p.at("disc.pixel.psi.b")};
}

template <typename T>
Var<T> project_condition(const Var<T>& phi, const Var<T>& condition, const ProjectionHead<T>& head) {
  if (phi.value().rank() != 2 || condition.shape() != diff::Shape{phi.dim(0), 4} ||
      head.V.shape() != diff::Shape{4, phi.dim(1)} || head.psi_w.shape() != diff::Shape{1, phi.dim(1)}) {
    throw FormatError("project_condition: dimension mismatch for features " + diff::shape_str(phi.shape()));
  }
  // b^T V phi = b . (phi V^T)
  Var<T> embedded = ops::linear(phi, head.V, static_cast<const Var<T>*>(nullptr));
  return ops::add(ops::row_dot(embedded, condition), ops::linear(phi, head.psi_w, &head.psi_b));
}

template <typename T>
Var<T> project_condition_pixels(const Var<T>& phi, const Var<T>& condition, const ProjectionHead<T>& head) {
  if (phi.value().rank() != 4 || condition.shape() != diff::Shape{phi.dim(0), 4} ||
      head.V.shape() != diff::Shape{4, phi.dim(1), 1, 1} || head.psi_w.shape() != diff::Shape{1, phi.dim(1), 1, 1}) {
    throw FormatError("project_condition_pixels: dimension mismatch for features " + diff::shape_str(phi.shape()));
  }
  Var<T> embedded = ops::conv2d(phi, head.V, static_cast<const Var<T>*>(nullptr), 1, 0);
  return ops::add(ops::channel_dot(embedded, condition), ops::conv2d(phi, head.psi_w, &head.psi_b, 1, 0));
}

template <typename T>
DiscriminatorOutput<T> discriminator_forward(const Var<T>& x, const Var<T>& condition, ParamSet<T>& params,
                                             const DiscriminatorConfig& c, SpectralMode mode) {
  validate(c);
  const auto& s = x.shape();
  if (s.size() != 4 || s[1] != c.input_channels) {
    throw FormatError("discriminator expects [N, " + std::to_string(c.input_channels) + ", H, W], got " +
                      diff::shape_str(s));
  }
  const int factor = 1 << c.depth;
  if (s[2] % factor != 0 || s[3] % factor != 0) {
    throw FormatError("discriminator input spatial dims must be divisible by " + std::to_string(factor));
  }
  if (condition.shape() != diff::Shape{s[0], 4}) throw FormatError("condition batch must be [N, 4]");

  const T slope = static_cast<T>(c.leaky_slope);
  auto sn_conv = [&](const Var<T>& in, const std::string& layer, int stride) {
    const std::string key = layer + ".sn_u";
    auto it = params.buffers.find(key);
    if (it == params.buffers.end()) throw FormatError("missing spectral state " + key);
    auto sn = diff::spectral_normalize(params.at(layer + ".w"), c.power_iterations, it->second);
    if (mode == SpectralMode::Update) it->second = std::move(sn.u);
    return ops::leaky_relu(ops::conv2d(in, sn.weight, &params.at(layer + ".b"), stride, 1), slope);
  };

  std::vector<Var<T>> skips;
  Var<T> h = sn_conv(x, "disc.enc0", 1);
  skips.push_back(h);
  for (int i = 1; i <= c.depth; ++i) {
    h = sn_conv(h, "disc.enc" + std::to_string(i), 2);
    skips.push_back(h);
  }
  DiscriminatorOutput<T> out;
  out.global_score = project_condition(ops::spatial_mean(h), condition, global_head(params));
  for (int i = c.depth; i >= 1; --i) {
    h = ops::add(sn_conv(ops::upsample2x(h), "disc.dec" + std::to_string(i), 1), skips[static_cast<std::size_t>(i - 1)]);
  }
  out.pixel_scores = project_condition_pixels(h, condition, pixel_head(params));
  return out;
}

#define QDWI_INSTANTIATE_DISC(T)                                                                          \
  template ParamSet<T> init_discriminator_params<T>(const DiscriminatorConfig&, std::uint64_t);          \
  template ProjectionHead<T> global_head(const ParamSet<T>&);                                            \
  template ProjectionHead<T> pixel_head(const ParamSet<T>&);                                             \
  template Var<T> project_condition(const Var<T>&, const Var<T>&, const ProjectionHead<T>&);             \
  template Var<T> project_condition_pixels(const Var<T>&, const Var<T>&, const ProjectionHead<T>&);      \
  template DiscriminatorOutput<T> discriminator_forward(const Var<T>&, const Var<T>&, ParamSet<T>&,      \
                                                        const DiscriminatorConfig&, SpectralMode);

QDWI_INSTANTIATE_DISC(float)
QDWI_INSTANTIATE_DISC(double)

}  // namespace qdwi
