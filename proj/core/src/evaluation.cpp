#include "qdwi/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Dense>
#include <json.hpp>

#include "qdwi/diff/ops.hpp"
#include "qdwi/error.hpp"
#include "qdwi/training.hpp"

namespace qdwi {

using nlohmann::json;

// ---- metrics ----

std::string metric_report_to_json(const MetricReport& r) {
  json j;
  j["psnr"] = std::isinf(r.psnr) ? json("inf") : json(r.psnr);
  j["ssim"] = r.ssim;
  j["mae"] = r.mae;
  j["mask"] = r.mask;
  j["notes"] = r.notes;
  return j.dump(2);
}

MetricReport metric_report_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    MetricReport r;
    r.psnr = j.at("psnr").is_string() ? std::numeric_limits<double>::infinity() : j.at("psnr").get<double>();
    r.ssim = j.at("ssim").get<double>();
    r.mae = j.at("mae").get<double>();
    r.mask = j.value("mask", "");
    r.notes = j.value("notes", "");
    return r;
  } catch (const json::exception& e) {
    throw FormatError(std::string("metric report: ") + e.what());
  }
}

namespace {

std::vector<double> gaussian_kernel(int size, double sigma) {
  std::vector<double> k(static_cast<std::size_t>(size));
  const double c = (size - 1) / 2.0;
  double total = 0;
  for (int i = 0; i < size; ++i) total += k[i] = std::exp(-0.5 * (i - c) * (i - c) / (sigma * sigma));
  for (double& v : k) v /= total;
  return k;
}

// Separable Gaussian smoothing along one axis of an (X, Y, Z) raster. Taps
// falling outside the volume are dropped and the rest renormalised.
void blur_axis(std::vector<double>& v, std::array<int, 3> dims, int axis, const std::vector<double>& k) {
  const int half = static_cast<int>(k.size()) / 2;
  const std::array<std::size_t, 3> stride{1, static_cast<std::size_t>(dims[0]),
                                          static_cast<std::size_t>(dims[0]) * dims[1]};
  std::vector<double> out(v.size());
  for (int z = 0; z < dims[2]; ++z)
    for (int y = 0; y < dims[1]; ++y)
      for (int x = 0; x < dims[0]; ++x) {
        const std::array<int, 3> p{x, y, z};
        const std::size_t i = x + stride[1] * y + stride[2] * z;
        double acc = 0, wsum = 0;
        for (int t = -half; t <= half; ++t) {
          const int q = p[axis] + t;
          if (q < 0 || q >= dims[axis]) continue;
          const double w = k[static_cast<std::size_t>(t + half)];
          acc += w * v[i + static_cast<std::ptrdiff_t>(t) * static_cast<std::ptrdiff_t>(stride[axis])];
          wsum += w;
        }
        out[i] = acc / wsum;
      }
  v.swap(out);
}

}  // namespace

double ssim(std::span<const float> a, std::span<const float> b, std::array<int, 3> dims,
            std::span<const std::uint8_t> mask, const MetricOptions& o) {
  const std::size_t n = static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  if (a.size() != n || b.size() != n || mask.size() != n) throw FormatError("ssim: size mismatch");
  const auto k = gaussian_kernel(o.window, o.sigma);
  const bool volumetric = dims[2] >= o.window;
  std::vector<double> mx(a.begin(), a.end()), my(b.begin(), b.end()), sxx(n), syy(n), sxy(n);
  for (std::size_t i = 0; i < n; ++i) {
    sxx[i] = double(a[i]) * a[i];
    syy[i] = double(b[i]) * b[i];
    sxy[i] = double(a[i]) * b[i];
  }
  for (auto* v : {&mx, &my, &sxx, &syy, &sxy}) {
    blur_axis(*v, dims, 0, k);
    blur_axis(*v, dims, 1, k);
    if (volumetric) blur_axis(*v, dims, 2, k);
  }
  const double c1 = std::pow(o.k1 * o.range, 2), c2 = std::pow(o.k2 * o.range, 2);
  auto local = [&](std::size_t i) {
    const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i], cxy = sxy[i] - mx[i] * my[i];
    return ((2 * mx[i] * my[i] + c1) * (2 * cxy + c2)) / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
  };
  const std::size_t plane = static_cast<std::size_t>(dims[0]) * dims[1];
  if (volumetric) {
    double total = 0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (mask[i]) total += local(i), ++count;
    if (count == 0) throw FormatError("ssim: empty mask");
    return total / count;
  }
  double total = 0;
  int slices = 0;
  for (int z = 0; z < dims[2]; ++z) {
    double s = 0;
    std::size_t count = 0;
    for (std::size_t i = plane * z; i < plane * (z + 1); ++i)
      if (mask[i]) s += local(i), ++count;
    if (count) total += s / count, ++slices;
  }
  if (slices == 0) throw FormatError("ssim: empty mask");
  return total / slices;
}

MetricReport compute_metrics(std::span<const float> pred, std::span<const float> ref, std::array<int, 3> dims,
                             std::span<const std::uint8_t> mask, const MetricOptions& o) {
  VolumeStack p(dims, {1, 1, 1}), r(dims, {1, 1, 1});
  p.add_channel("X", std::vector<float>(pred.begin(), pred.end()));
  r.add_channel("X", std::vector<float>(ref.begin(), ref.end()));
  return compute_metrics(p, r, mask, o);
}

MetricReport compute_metrics(const VolumeStack& pred, const VolumeStack& ref, std::span<const std::uint8_t> mask,
                             const MetricOptions& o) {
  if (pred.dims() != ref.dims()) throw FormatError("compute_metrics: dims differ");
  if (pred.channel_count() != ref.channel_count() || pred.channel_count() == 0) {
    throw FormatError("compute_metrics: channel counts differ");
  }
  if (mask.size() != pred.voxel_count()) throw FormatError("compute_metrics: mask size mismatch");
  std::size_t count = 0;
  for (auto m : mask) count += m != 0;
  if (count == 0) throw FormatError("compute_metrics: empty mask");

  double abs_sum = 0, sq_sum = 0, ssim_sum = 0;
  for (std::size_t c = 0; c < pred.channel_count(); ++c) {
    bool identical = true;
    const auto& a = pred.channel(c);
    const auto& b = ref.channel(c);
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (!mask[i]) continue;
      const double d = double(a[i]) - b[i];
      abs_sum += std::abs(d);
      sq_sum += d * d;
      identical = identical && a[i] == b[i];
    }
    ssim_sum += identical ? 1.0 : ssim(a, b, pred.dims(), mask, o);
  }
  const double total = static_cast<double>(count) * pred.channel_count();
  MetricReport r;
  r.mae = abs_sum / total;
  const double mse = sq_sum / total;
  r.psnr = mse == 0 ? std::numeric_limits<double>::infinity() : 10 * std::log10(o.range * o.range / mse);
  r.ssim = ssim_sum / pred.channel_count();
  r.mask = std::to_string(count) + " voxels";
  const bool volumetric = pred.dims()[2] >= o.window;
  r.notes = std::string(volumetric ? "ssim 3d " : "ssim 2d per-slice ") + std::to_string(o.window) + " window, R=" +
            json(o.range).dump() + ", " + std::to_string(pred.channel_count()) + " channel(s)";
  return r;
}

std::vector<std::uint8_t> mask_from_volume(const VolumeStack& mask) {
  if (mask.channel_count() == 0) throw FormatError("mask volume has no channels");
  std::vector<std::uint8_t> m(mask.voxel_count());
  const auto& c = mask.channel(0);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = c[i] != 0;
  return m;
}

// ---- synthesis and restoration ----

VolumeStack synthesize_volume(const Synthesizer& model, const VolumeStack& structural,
                              const std::vector<GradientEntry>& entries) {
  const auto [w, h, d] = structural.dims();
  const int factor = 1 << model.config.depth;
  if (w % factor || h % factor) {
    throw FormatError("structural in-plane dims must be divisible by " + std::to_string(factor));
  }
  const int ch = model.config.input_channels;
  const VolumeStack norm = normalize_structural(structural, ch);
  // Same floor rule as the training targets.
  VolumeStack b0(structural.dims(), structural.voxel_size());
  b0.add_channel("B0", structural.channel("B0"));
  const std::vector<float> support = ratio_volume(structural, b0, model.config.intensity_cap).channel(0);

  const std::size_t plane = static_cast<std::size_t>(w) * h;
  diff::Tensor<float> s({d, ch, h, w});
  for (int z = 0; z < d; ++z)
    for (int c = 0; c < ch; ++c) {
      auto sl = norm.slice(static_cast<std::size_t>(c), z);
      std::copy(sl.begin(), sl.end(), s.data() + (static_cast<std::size_t>(z) * ch + c) * plane);
    }
  const auto structural_var = Var<float>::constant(std::move(s), "structural");

  VolumeStack out(structural.dims(), structural.voxel_size());
  for (std::size_t g = 0; g < entries.size(); ++g) {
    const auto cond = to_condition(entries[g], model.max_bvalue).as_array();
    Var<float> pred = generator_forward(structural_var, condition_batch<float>(std::vector(d, cond)), model.params,
                                        model.config);
    std::vector<float> v(pred.value().data(), pred.value().data() + pred.value().size());
    for (std::size_t i = 0; i < v.size(); ++i)
      if (support[i] == 0) v[i] = 0;
    out.add_channel(dwi_channel_name(g), std::move(v));
  }
  return out;
}

std::ptrdiff_t find_entry(const GradientTable& table, const GradientEntry& e) {
  for (std::size_t i = 0; i < table.size(); ++i) {
    const auto& t = table[i];
    if (std::abs(t.bvalue - e.bvalue) <= 1e-3 && std::abs(t.direction.x - e.direction.x) <= 1e-6 &&
        std::abs(t.direction.y - e.direction.y) <= 1e-6 && std::abs(t.direction.z - e.direction.z) <= 1e-6) {
      return static_cast<std::ptrdiff_t>(i);
    }
  }
  return -1;
}

Restoration restore_qspace(const VolumeStack& kept, const GradientTable& kept_table, const GradientTable& full_table,
                           const Synthesizer& model, const VolumeStack& structural) {
  const auto kept_channels = kept.dwi_channels();
  if (kept_channels.size() != kept_table.size()) {
    throw FormatError("restore: kept table has " + std::to_string(kept_table.size()) + " entries but the stack has " +
                      std::to_string(kept_channels.size()) + " DWI channels");
  }
  if (kept.dims() != structural.dims()) throw FormatError("restore: DWI and structural dims differ");
  std::vector<std::ptrdiff_t> source(full_table.size(), -1);
  for (std::size_t k = 0; k < kept_table.size(); ++k) {
    const std::ptrdiff_t i = find_entry(full_table, kept_table[k]);
    if (i < 0) throw FormatError("restore: kept entry " + std::to_string(k) + " is absent from the full table");
    source[static_cast<std::size_t>(i)] = static_cast<std::ptrdiff_t>(kept_channels[k]);
  }
  std::vector<GradientEntry> missing;
  for (std::size_t i = 0; i < full_table.size(); ++i)
    if (source[i] < 0) missing.push_back(full_table[i]);
  const VolumeStack synth = missing.empty() ? VolumeStack() : synthesize_volume(model, structural, missing);

  Restoration r;
  r.dwis = VolumeStack(kept.dims(), kept.voxel_size());
  std::size_t next = 0;
  for (std::size_t i = 0; i < full_table.size(); ++i) {
    const bool real = source[i] >= 0;
    r.dwis.add_channel(dwi_channel_name(i),
                       real ? kept.channel(static_cast<std::size_t>(source[i])) : synth.channel(next++));
    r.synthetic.push_back(!real);
  }
  return r;
}

// ---- tensor fitting ----

Eigen::Matrix3d TensorFit::tensor(std::size_t v) const {
  const auto& c = coeffs.at(v);
  Eigen::Matrix3d d;
  d << c[1], c[4], c[5], c[4], c[2], c[6], c[5], c[6], c[3];
  return d;
}

Eigen::MatrixXd dti_design(const GradientTable& table) {
  Eigen::MatrixXd x(static_cast<Eigen::Index>(table.size()), 7);
  for (std::size_t i = 0; i < table.size(); ++i) {
    const auto& e = table[i];
    const double l = e.bvalue, gx = e.direction.x, gy = e.direction.y, gz = e.direction.z;
    x.row(static_cast<Eigen::Index>(i)) << 1, -l * gx * gx, -l * gy * gy, -l * gz * gz, -2 * l * gx * gy,
        -2 * l * gx * gz, -2 * l * gy * gz;
  }
  return x;
}

bool dti_fit_voxel(const Eigen::MatrixXd& x, std::span<const double> signals, int passes, std::array<double, 7>& out) {
  const Eigen::Index n = x.rows();
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!(signals[static_cast<std::size_t>(i)] > 0)) return false;
    y[i] = std::log(signals[static_cast<std::size_t>(i)]);
  }
  // Ordinary fit first, then refits weighted by squared predicted signals.
  Eigen::VectorXd w = Eigen::VectorXd::Ones(n);
  Eigen::VectorXd beta;
  for (int pass = 0; pass <= passes; ++pass) {
    const Eigen::VectorXd sw = w.array().sqrt();
    beta = (sw.asDiagonal() * x).colPivHouseholderQr().solve(sw.cwiseProduct(y));
    w = (2 * (x * beta).array()).exp();
  }
  for (int k = 0; k < 7; ++k) out[static_cast<std::size_t>(k)] = beta[k];
  return beta.allFinite();
}

TensorFit dti_fit(const VolumeStack& dwis, const GradientTable& table, std::span<const std::uint8_t> mask,
                  int passes) {
  const auto channels = dwis.dwi_channels();
  if (channels.size() != table.size()) throw FormatError("dti_fit: table/channel count mismatch");
  if (mask.size() != dwis.voxel_count()) throw FormatError("dti_fit: mask size mismatch");
  if (passes < 0) throw FormatError("dti_fit: reweight passes must be >= 0");
  const Eigen::MatrixXd x = dti_design(table);
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(x);
  qr.setThreshold(1e-10);
  if (table.size() < 7 || qr.rank() < 7) throw FormatError("dti_fit: insufficient directions");

  TensorFit fit;
  fit.dims = dwis.dims();
  fit.coeffs.assign(dwis.voxel_count(), {});
  fit.valid.assign(dwis.voxel_count(), 0);
  std::vector<double> s(channels.size());
  for (std::size_t v = 0; v < dwis.voxel_count(); ++v) {
    if (!mask[v]) continue;
    for (std::size_t c = 0; c < channels.size(); ++c) s[c] = dwis.channel(channels[c])[v];
    std::array<double, 7> coeff;
    if (dti_fit_voxel(x, s, passes, coeff)) {
      fit.coeffs[v] = coeff;
      fit.valid[v] = 1;
    }
  }
  return fit;
}

void prepend_b0(VolumeStack& dwis, GradientTable& table, std::span<const std::uint8_t> mask) {
  if (mask.size() != dwis.voxel_count()) throw FormatError("prepend_b0: mask size mismatch");
  VolumeStack out(dwis.dims(), dwis.voxel_size());
  std::vector<float> ones(dwis.voxel_count());
  for (std::size_t i = 0; i < ones.size(); ++i) ones[i] = mask[i] ? 1.0f : 0.0f;
  out.add_channel(dwi_channel_name(0), std::move(ones));
  const auto idx = dwis.dwi_channels();
  for (std::size_t k = 0; k < idx.size(); ++k) out.add_channel(dwi_channel_name(k + 1), dwis.channel(idx[k]));
  std::vector<GradientEntry> entries{GradientEntry{}};
  entries.insert(entries.end(), table.entries().begin(), table.entries().end());
  GradientTable t(std::move(entries));
  dwis = std::move(out);
  table = std::move(t);
}

Eigen::Vector3d tensor_eigenvalues(const Eigen::Matrix3d& d) {
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(d, Eigen::EigenvaluesOnly);
  return es.eigenvalues().cwiseMax(0.0);
}

double fractional_anisotropy(const Eigen::Vector3d& l) {
  const double denom = l.squaredNorm();
  if (denom <= 0) return 0;
  const double num = (l[0] - l[1]) * (l[0] - l[1]) + (l[1] - l[2]) * (l[1] - l[2]) + (l[0] - l[2]) * (l[0] - l[2]);
  return std::clamp(std::sqrt(0.5 * num / denom), 0.0, 1.0);
}

double mean_diffusivity(const Eigen::Vector3d& l) { return l.sum() / 3.0; }

std::vector<float> fa_map(const TensorFit& fit) {
  std::vector<float> out(fit.coeffs.size(), 0.0f);
  for (std::size_t v = 0; v < out.size(); ++v)
    if (fit.valid[v]) out[v] = static_cast<float>(fractional_anisotropy(tensor_eigenvalues(fit.tensor(v))));
  return out;
}

std::vector<float> md_map(const TensorFit& fit) {
  std::vector<float> out(fit.coeffs.size(), 0.0f);
  for (std::size_t v = 0; v < out.size(); ++v)
    if (fit.valid[v]) out[v] = static_cast<float>(mean_diffusivity(tensor_eigenvalues(fit.tensor(v))));
  return out;
}

}  // namespace qdwi
