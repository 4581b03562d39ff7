#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace qdwi {

/// Multi-channel 3D raster. Each channel is stored Z-major, then Y, with X
/// fastest. Channel names come from {B0, T2, T1, DWI:<index>} (free-form
/// names such as FA or mask are also accepted).
class VolumeStack {
 public:
  VolumeStack() = default;
  VolumeStack(std::array<int, 3> dims, std::array<double, 3> voxel_size);

  const std::array<int, 3>& dims() const noexcept { return dims_; }
  const std::array<double, 3>& voxel_size() const noexcept { return voxel_size_; }
  std::size_t voxel_count() const noexcept;
  std::size_t slice_size() const noexcept { return static_cast<std::size_t>(dims_[0]) * dims_[1]; }
  std::size_t channel_count() const noexcept { return channels_.size(); }
  const std::vector<std::string>& names() const noexcept { return names_; }

  /// Appends a channel; `data` must hold voxel_count() values.
  std::vector<float>& add_channel(std::string name, std::vector<float> data);
  std::vector<float>& add_channel(std::string name);

  std::vector<float>& channel(std::size_t i) { return channels_.at(i); }
  const std::vector<float>& channel(std::size_t i) const { return channels_.at(i); }
  const std::vector<float>& channel(const std::string& name) const;
  std::ptrdiff_t find(const std::string& name) const;

  std::span<const float> slice(std::size_t c, int z) const;
  std::size_t index(int x, int y, int z) const noexcept {
    return (static_cast<std::size_t>(z) * dims_[1] + y) * dims_[0] + x;
  }

  /// Indices of channels named DWI:<i>, in stack order.
  std::vector<std::size_t> dwi_channels() const;

  friend bool operator==(const VolumeStack&, const VolumeStack&) = default;

 private:
  std::array<int, 3> dims_{0, 0, 0};
  std::array<double, 3> voxel_size_{1, 1, 1};
  std::vector<std::string> names_;
  std::vector<std::vector<float>> channels_;
};

std::string dwi_channel_name(std::size_t index);

/// QVOL container: "QVOL0001", u32 LE header length, JSON header, LE float32 raster.
std::vector<std::uint8_t> encode_volume(const VolumeStack& stack);
VolumeStack decode_volume(std::span<const std::uint8_t> bytes);
void write_volume(const VolumeStack& stack, const std::filesystem::path& path);
VolumeStack read_volume(const std::filesystem::path& path);

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);
void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace qdwi
