#include "qdwi/phantom.hpp"

#include <cmath>
#include <numbers>
#include <random>

#include <json.hpp>

#include "qdwi/error.hpp"
#include "qdwi/rng.hpp"

namespace qdwi {

const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Validation: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

double simulate_dwi_signal(const Eigen::Matrix3d& diffusion, double s0, const BVector& theta, double bvalue) {
  if (bvalue < 0) throw FormatError("negative bvalue");
  const Eigen::Vector3d g(theta.x, theta.y, theta.z);
  const double q = g.dot(diffusion * g);
  if (q < -1e-12) throw FormatError("diffusion tensor is not positive semi-definite (negative quadratic form)");
  if (bvalue == 0) return s0;
  return s0 * std::exp(-bvalue * std::max(q, 0.0));
}

Eigen::Matrix3d prolate_tensor(const Eigen::Vector3d& axis, double parallel, double perpendicular) {
  const Eigen::Vector3d e = axis.normalized();
  return perpendicular * Eigen::Matrix3d::Identity() + (parallel - perpendicular) * e * e.transpose();
}

void validate(const PhantomSpec& spec) {
  for (int d : spec.dims) {
    if (d < 16) throw FormatError("phantom dims must be at least 16 in every axis");
  }
  if (spec.bundles < 1) throw FormatError("degenerate phantom spec: no anisotropic bundle");
  if (spec.subject_count() < 1 || spec.train_subjects < 0 || spec.val_subjects < 0 || spec.test_subjects < 0) {
    throw FormatError("degenerate phantom spec: no subjects");
  }
  if (!(spec.s0_csf > 0 && spec.s0_parenchyma > 0 && spec.s0_bundle > 0)) {
    throw FormatError("degenerate phantom spec: no tissue signal");
  }
  if (spec.noise_sigma < 0 || spec.structural_noise < 0) throw FormatError("noise levels must be non-negative");
  if (!(spec.bundle_parallel >= spec.bundle_perpendicular && spec.bundle_perpendicular >= 0)) {
    throw FormatError("bundle eigenvalues must satisfy parallel >= perpendicular >= 0");
  }
}

namespace {

struct Bundle {
  Eigen::Vector3d point, axis;
  double radius;
  Eigen::Matrix3d tensor;
};

struct Geometry {
  Eigen::Vector3d center, semi_axes;
  double csf_start;
  std::vector<Bundle> bundles;
};

Geometry draw_geometry(const PhantomSpec& spec, std::mt19937_64& rng) {
  auto uni = [&rng](double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng); };
  const double X = spec.dims[0], Y = spec.dims[1], Z = spec.dims[2];
  Geometry g;
  g.center = {X / 2 - 0.5 + uni(-1.5, 1.5), Y / 2 - 0.5 + uni(-1.5, 1.5), Z / 2 - 0.5 + uni(-0.5, 0.5)};
  g.semi_axes = {X * uni(0.40, 0.46), Y * uni(0.40, 0.46), Z * uni(0.60, 0.75)};
  g.csf_start = uni(0.80, 0.86);
  double first_angle = uni(0, std::numbers::pi);
  for (int k = 0; k < spec.bundles; ++k) {
    const double angle = k == 0 ? first_angle
                         : k == 1 ? first_angle + uni(std::numbers::pi / 3, 2 * std::numbers::pi / 3)
                                  : uni(0, std::numbers::pi);
    const double tilt = uni(-0.15, 0.15);
    Bundle b;
    b.axis = Eigen::Vector3d(std::cos(angle) * std::cos(tilt), std::sin(angle) * std::cos(tilt), std::sin(tilt));
    b.point = g.center + Eigen::Vector3d(uni(-3, 3), uni(-3, 3), 0);
    b.radius = uni(spec.bundle_radius_min, spec.bundle_radius_max);
    b.tensor = prolate_tensor(b.axis, spec.bundle_parallel, spec.bundle_perpendicular);
    g.bundles.push_back(b);
  }
  return g;
}

double rician(double signal, double sigma, std::mt19937_64& rng) {
  if (sigma == 0) return signal;
  std::normal_distribution<double> n(0.0, sigma);
  const double re = signal + n(rng);
  const double im = n(rng);
  return std::sqrt(re * re + im * im);
}

}  // namespace

TensorField make_tensor_field(const PhantomSpec& spec, std::uint64_t subject_seed) {
  validate(spec);
  std::mt19937_64 rng(derive_seed(subject_seed, {0x6e6f6d}));
  const Geometry geo = draw_geometry(spec, rng);
  TensorField f;
  f.dims = spec.dims;
  const std::size_t n = static_cast<std::size_t>(spec.dims[0]) * spec.dims[1] * spec.dims[2];
  f.diffusion.assign(n, Eigen::Matrix3d::Zero());
  f.s0.assign(n, 0.0);
  f.label.assign(n, Tissue::Background);
  for (int z = 0; z < spec.dims[2]; ++z)
    for (int y = 0; y < spec.dims[1]; ++y)
      for (int x = 0; x < spec.dims[0]; ++x) {
        const Eigen::Vector3d p(x, y, z);
        const double rho = (p - geo.center).cwiseQuotient(geo.semi_axes).norm();
        const std::size_t i = f.index(x, y, z);
        if (rho > 1.0) continue;
        if (rho > geo.csf_start) {
          f.label[i] = Tissue::Csf;
          f.s0[i] = spec.s0_csf;
          f.diffusion[i] = spec.csf_diffusivity * Eigen::Matrix3d::Identity();
          continue;
        }
        Eigen::Matrix3d sum = Eigen::Matrix3d::Zero();
        int hits = 0;
        for (const Bundle& b : geo.bundles) {
          const Eigen::Vector3d d = p - b.point;
          const double dist = (d - d.dot(b.axis) * b.axis).norm();
          if (dist <= b.radius) {
            sum += b.tensor;
            ++hits;
          }
        }
        if (hits == 0) {
          f.label[i] = Tissue::Parenchyma;
          f.s0[i] = spec.s0_parenchyma;
          f.diffusion[i] = spec.parenchyma_diffusivity * Eigen::Matrix3d::Identity();
        } else {
          f.label[i] = hits == 1 ? Tissue::Bundle : Tissue::Crossing;
          f.s0[i] = spec.s0_bundle;
          f.diffusion[i] = sum / hits;
        }
      }
  return f;
}

PhantomSubject simulate_subject(const PhantomSpec& spec, const GradientTable& table, std::uint64_t subject_seed,
                                int id, Split split) {
  PhantomSubject s;
  s.id = id;
  s.split = split;
  s.field = make_tensor_field(spec, subject_seed);
  const std::size_t n = s.field.s0.size();
  std::mt19937_64 rng(derive_seed(subject_seed, {0x6e6f697365}));
  std::normal_distribution<double> struct_noise(0.0, 1.0);

  s.mask.assign(n, 0);
  std::vector<float> b0(n, 0.f), t2(n, 0.f), t1(n, 0.f);
  for (std::size_t i = 0; i < n; ++i) {
    const Tissue t = s.field.label[i];
    if (t == Tissue::Background) continue;
    s.mask[i] = 1;
    const double s0 = s.field.s0[i];
    const double t1_level = t == Tissue::Csf ? 0.2 : t == Tissue::Parenchyma ? 0.6 : 0.85;
    b0[i] = static_cast<float>(rician(s0, spec.noise_sigma, rng));
    t2[i] = static_cast<float>(std::pow(s0, 1.5) + spec.structural_noise * struct_noise(rng));
    t1[i] = static_cast<float>(t1_level + spec.structural_noise * struct_noise(rng));
  }
  s.structural = VolumeStack(spec.dims, spec.voxel_size);
  s.structural.add_channel("B0", std::move(b0));
  s.structural.add_channel("T2", std::move(t2));
  s.structural.add_channel("T1", std::move(t1));

  s.dwis = VolumeStack(spec.dims, spec.voxel_size);
  for (std::size_t g = 0; g < table.size(); ++g) {
    std::vector<float> dwi(n, 0.f);
    for (std::size_t i = 0; i < n; ++i) {
      if (!s.mask[i]) continue;
      const double clean = simulate_dwi_signal(s.field.diffusion[i], s.field.s0[i], table[g].direction, table[g].bvalue);
      dwi[i] = static_cast<float>(rician(clean, spec.noise_sigma, rng));
    }
    s.dwis.add_channel(dwi_channel_name(g), std::move(dwi));
  }
  return s;
}

std::vector<PhantomSubject> generate_phantom_dataset(const PhantomSpec& spec, const GradientTable& table,
                                                     std::uint64_t seed) {
  validate(spec);
  std::vector<PhantomSubject> out;
  const int n = spec.subject_count();
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const Split split = i < spec.train_subjects                        ? Split::Train
                        : i < spec.train_subjects + spec.val_subjects ? Split::Validation
                                                                       : Split::Test;
    out.push_back(simulate_subject(spec, table, derive_seed(seed, {static_cast<std::uint64_t>(i)}), i, split));
  }
  return out;
}

}  // namespace qdwi

namespace qdwi {

namespace {

using nlohmann::json;

// Field table shared by the reader and the writer.
template <typename Spec, typename Fn>
void visit_spec(Spec& s, Fn&& fn) {
  fn("dims", s.dims);
  fn("voxel_size", s.voxel_size);
  fn("train_subjects", s.train_subjects);
  fn("val_subjects", s.val_subjects);
  fn("test_subjects", s.test_subjects);
  fn("bundles", s.bundles);
  fn("bundle_parallel", s.bundle_parallel);
  fn("bundle_perpendicular", s.bundle_perpendicular);
  fn("bundle_radius_min", s.bundle_radius_min);
  fn("bundle_radius_max", s.bundle_radius_max);
  fn("parenchyma_diffusivity", s.parenchyma_diffusivity);
  fn("csf_diffusivity", s.csf_diffusivity);
  fn("s0_csf", s.s0_csf);
  fn("s0_parenchyma", s.s0_parenchyma);
  fn("s0_bundle", s.s0_bundle);
  fn("noise_sigma", s.noise_sigma);
  fn("structural_noise", s.structural_noise);
}

}  // namespace

PhantomSpec parse_phantom_spec(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("phantom spec: malformed JSON: ") + e.what());
  }
  if (!j.is_object()) throw FormatError("phantom spec: expected a JSON object");
  PhantomSpec spec;
  std::size_t seen = 0;
  visit_spec(spec, [&](const char* key, auto& field) {
    if (!j.contains(key)) return;
    ++seen;
    try {
      field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
    } catch (const json::exception&) {
      throw FormatError(std::string("phantom spec: key \"") + key + "\" has the wrong type");
    }
  });
  if (seen != j.size()) {
    for (const auto& [key, value] : j.items()) {
      bool known = false;
      visit_spec(spec, [&](const char* k, auto&) { known = known || key == k; });
      if (!known) throw FormatError("phantom spec: unknown key \"" + key + "\"");
    }
  }
  validate(spec);
  return spec;
}

PhantomSpec read_phantom_spec(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  return parse_phantom_spec(std::string(bytes.begin(), bytes.end()));
}

std::string phantom_spec_to_json(const PhantomSpec& spec) {
  json j = json::object();
  visit_spec(spec, [&](const char* key, const auto& field) { j[key] = field; });
  return j.dump(2);
}

}  // namespace qdwi
