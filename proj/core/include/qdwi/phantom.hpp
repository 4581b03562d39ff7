#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "qdwi/qspace.hpp"
#include "qdwi/volume.hpp"

namespace qdwi {

enum class Tissue : std::uint8_t { Background = 0, Csf = 1, Parenchyma = 2, Bundle = 3, Crossing = 4 };

/// Per-voxel ground truth for one phantom subject.
struct TensorField {
  std::array<int, 3> dims{};
  std::vector<Eigen::Matrix3d> diffusion;  ///< mm^2/s, symmetric PSD
  std::vector<double> s0;
  std::vector<Tissue> label;

  std::size_t index(int x, int y, int z) const {
    return (static_cast<std::size_t>(z) * dims[1] + y) * dims[0] + x;
  }
};

struct PhantomSpec {
  std::array<int, 3> dims{48, 48, 16};
  std::array<double, 3> voxel_size{2.0, 2.0, 2.0};
  int train_subjects = 6;
  int val_subjects = 1;
  int test_subjects = 1;
  int bundles = 2;  ///< 0 makes the spec degenerate for training purposes
  double bundle_parallel = 1.7e-3;
  double bundle_perpendicular = 0.3e-3;
  double bundle_radius_min = 3.5, bundle_radius_max = 5.5;  ///< voxels
  double parenchyma_diffusivity = 0.8e-3;
  double csf_diffusivity = 3.0e-3;
  double s0_csf = 1.0, s0_parenchyma = 0.75, s0_bundle = 0.65;
  double noise_sigma = 0.02;  ///< Rician sigma as a fraction of the reference S0 (1.0)
  double structural_noise = 0.01;

  int subject_count() const { return train_subjects + val_subjects + test_subjects; }
};

enum class Split { Train, Validation, Test };
const char* split_name(Split s);

struct PhantomSubject {
  int id = 0;
  Split split = Split::Train;
  TensorField field;
  VolumeStack structural;  ///< B0, T2, T1
  VolumeStack dwis;        ///< raw DWI signal, one DWI:<i> channel per table entry
  std::vector<std::uint8_t> mask;  ///< tissue (label != background)
};

/// S0 * exp(-l * theta^T D theta). Throws if the quadratic form is below -1e-12.
double simulate_dwi_signal(const Eigen::Matrix3d& diffusion, double s0, const BVector& theta, double bvalue);

/// Prolate tensor with principal axis `axis` (normalised internally).
Eigen::Matrix3d prolate_tensor(const Eigen::Vector3d& axis, double parallel, double perpendicular);

TensorField make_tensor_field(const PhantomSpec& spec, std::uint64_t subject_seed);

/// One subject; deterministic per (spec, table, subject_seed).
PhantomSubject simulate_subject(const PhantomSpec& spec, const GradientTable& table, std::uint64_t subject_seed,
                                int id, Split split);

/// All subjects with disjoint train/validation/test splits; subject i uses
/// a seed derived from (seed, i), so subjects can be generated independently.
std::vector<PhantomSubject> generate_phantom_dataset(const PhantomSpec& spec, const GradientTable& table,
                                                     std::uint64_t seed);

void validate(const PhantomSpec& spec);

}  // namespace qdwi

namespace qdwi {

/// Strict JSON form of PhantomSpec; absent keys keep their defaults and
/// unknown keys are rejected.
PhantomSpec parse_phantom_spec(const std::string& json_text);
PhantomSpec read_phantom_spec(const std::filesystem::path& path);
std::string phantom_spec_to_json(const PhantomSpec& spec);

}  // namespace qdwi
