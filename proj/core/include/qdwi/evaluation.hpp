#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "qdwi/generator.hpp"
#include "qdwi/qspace.hpp"
#include "qdwi/volume.hpp"

namespace qdwi {

struct MetricReport {
  double psnr = 0;  ///< +infinity when the masked MSE is zero
  double ssim = 0;
  double mae = 0;
  std::string mask;
  std::string notes;
};

/// {psnr, ssim, mae, mask, notes}; an infinite PSNR is written as "inf".
std::string metric_report_to_json(const MetricReport& report);
MetricReport metric_report_from_json(const std::string& text);

struct MetricOptions {
  double range = 1.5;  ///< dynamic range R for PSNR and SSIM
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01, k2 = 0.03;
};

/// Metrics between two single-channel rasters of dims (X, Y, Z) over the
/// voxels where mask != 0. SSIM uses a 3D Gaussian window when Z >= window,
/// otherwise a 2D window per slice averaged over slices.
MetricReport compute_metrics(std::span<const float> pred, std::span<const float> ref, std::array<int, 3> dims,
                             std::span<const std::uint8_t> mask, const MetricOptions& options = {});

/// Multi-channel variant: MAE and PSNR pool every channel; SSIM is the
/// channel mean. Channels are matched by position.
MetricReport compute_metrics(const VolumeStack& pred, const VolumeStack& ref, std::span<const std::uint8_t> mask,
                             const MetricOptions& options = {});

/// Mean of the local SSIM map over masked voxels.
double ssim(std::span<const float> a, std::span<const float> b, std::array<int, 3> dims,
            std::span<const std::uint8_t> mask, const MetricOptions& options = {});

/// Nonzero voxels of the first channel of a mask volume.
std::vector<std::uint8_t> mask_from_volume(const VolumeStack& mask);

/// Trained generator plus the normalisation it was trained with.
struct Synthesizer {
  GeneratorConfig config;
  ParamSet<float> params;
  double max_bvalue = 0;
};

/// One DWI:<i> channel per entry, synthesised slice by slice from raw
/// structural channels. Voxels at or below the B0 floor are set to 0, matching
/// the ratio convention of the training targets.
VolumeStack synthesize_volume(const Synthesizer& model, const VolumeStack& structural,
                              const std::vector<GradientEntry>& entries);

struct Restoration {
  VolumeStack dwis;             ///< one channel per full-table entry
  std::vector<bool> synthetic;  ///< provenance per channel
};

/// Index of `entry` in `table` (directions within 1e-6, b-values within 1e-3),
/// or -1.
std::ptrdiff_t find_entry(const GradientTable& table, const GradientEntry& entry);

/// Merges kept DWIs (one channel per kept entry, in kept order) with
/// synthesised DWIs for every other entry of the full table.
Restoration restore_qspace(const VolumeStack& kept_dwis, const GradientTable& kept_table,
                           const GradientTable& full_table, const Synthesizer& model, const VolumeStack& structural);

/// Per voxel: ln S0, Dxx, Dyy, Dzz, Dxy, Dxz, Dyz.
struct TensorFit {
  std::array<int, 3> dims{};
  std::vector<std::array<double, 7>> coeffs;
  std::vector<std::uint8_t> valid;

  Eigen::Matrix3d tensor(std::size_t voxel) const;
};

/// Weighted linear least squares on ln S with `reweight_passes` refits using
/// squared predicted signals as weights. Voxels outside the mask or with any
/// S <= 0 are invalid.
TensorFit dti_fit(const VolumeStack& dwis, const GradientTable& table, std::span<const std::uint8_t> mask,
                  int reweight_passes = 1);

/// Fit of a single voxel; returns false when some signal is not positive.
bool dti_fit_voxel(const Eigen::MatrixXd& design, std::span<const double> signals, int reweight_passes,
                   std::array<double, 7>& out);
Eigen::MatrixXd dti_design(const GradientTable& table);

/// Prepends a b = 0 entry (ratio 1 inside the mask) to a ratio stack.
void prepend_b0(VolumeStack& dwis, GradientTable& table, std::span<const std::uint8_t> mask);

double fractional_anisotropy(const Eigen::Vector3d& eigenvalues);
double mean_diffusivity(const Eigen::Vector3d& eigenvalues);
/// Eigenvalues with negatives clamped to 0.
Eigen::Vector3d tensor_eigenvalues(const Eigen::Matrix3d& d);

std::vector<float> fa_map(const TensorFit& fit);
std::vector<float> md_map(const TensorFit& fit);

}  // namespace qdwi
