#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace qdwi {

/// Gradient direction. Unit norm, or exactly zero for b = 0 entries.
struct BVector {
  double x = 0, y = 0, z = 0;

  double norm() const;
  bool is_zero() const { return x == 0 && y == 0 && z == 0; }
  BVector operator-() const { return {-x, -y, -z}; }
  friend bool operator==(const BVector&, const BVector&) = default;
};

struct GradientEntry {
  BVector direction;
  double bvalue = 0;  ///< s/mm^2
  friend bool operator==(const GradientEntry&, const GradientEntry&) = default;
};

/// Ordered q-space sampling scheme. Entry order is the acquisition order.
class GradientTable {
 public:
  GradientTable() = default;
  explicit GradientTable(std::vector<GradientEntry> entries);

  const std::vector<GradientEntry>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }
  const GradientEntry& operator[](std::size_t i) const { return entries_[i]; }

  /// Largest b-value in the table unless an override was configured.
  double max_bvalue() const;
  void set_max_bvalue(std::optional<double> value) { max_override_ = value; }

  GradientTable subset(const std::vector<std::size_t>& indices) const;
  void push_back(GradientEntry e) { entries_.push_back(e); }

  friend bool operator==(const GradientTable& a, const GradientTable& b) {
    return a.entries_ == b.entries_;
  }

 private:
  std::vector<GradientEntry> entries_;
  std::optional<double> max_override_;
};

/// Network conditioning input (theta_x, theta_y, theta_z, normalised b).
struct ConditionVector {
  float tx = 0, ty = 0, tz = 0, l_norm = 0;
  std::array<float, 4> as_array() const { return {tx, ty, tz, l_norm}; }
  friend bool operator==(const ConditionVector&, const ConditionVector&) = default;
};

/// Parses FSL-style text: bvec holds 3 rows (x, y, z) of N values, bval one
/// row of N values. Directions with norm in [0.9, 1.1] are renormalised.
GradientTable parse_gradient_table(std::string_view bvec_text, std::string_view bval_text);
GradientTable read_gradient_table(const std::filesystem::path& bvec, const std::filesystem::path& bval);

std::string format_bvec(const GradientTable& table);
std::string format_bval(const GradientTable& table);
void write_gradient_table(const GradientTable& table, const std::filesystem::path& bvec,
                          const std::filesystem::path& bval);

ConditionVector to_condition(const GradientEntry& entry, double max_bvalue);

/// k = round-half-up((1 - r) * n).
std::size_t retained_count(std::size_t n, double r);

struct Downsampled {
  GradientTable kept;
  GradientTable removed;
  std::vector<std::size_t> kept_indices;
  std::vector<std::size_t> removed_indices;
};

/// Uniform random subset of retained_count(N, r) entries; both parts keep the
/// original order. Deterministic per seed.
Downsampled downsample(const GradientTable& table, double r, std::uint64_t seed);

/// v or -v, whichever has a positive first nonzero component.
BVector antipodal_canonicalize(const BVector& v);

/// Spherical linear interpolation between two unit directions.
BVector slerp(const BVector& from, const BVector& to, double t);

/// Multi-shell scheme with `per_shell` near-uniform hemisphere directions per
/// shell (golden-angle spiral, rotated per shell).
GradientTable make_multishell_table(const std::vector<double>& shells, int per_shell);

}  // namespace qdwi
