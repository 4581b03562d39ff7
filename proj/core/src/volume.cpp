#include "qdwi/volume.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include <json.hpp>

#include "qdwi/byte_io.hpp"
#include "qdwi/error.hpp"

namespace qdwi {

namespace {
constexpr char kMagic[8] = {'Q', 'V', 'O', 'L', '0', '0', '0', '1'};
}

VolumeStack::VolumeStack(std::array<int, 3> dims, std::array<double, 3> voxel_size)
    : dims_(dims), voxel_size_(voxel_size) {
  for (int d : dims_) {
    if (d <= 0) throw FormatError("volume dimensions must be positive");
  }
}

std::size_t VolumeStack::voxel_count() const noexcept {
  return static_cast<std::size_t>(dims_[0]) * dims_[1] * dims_[2];
}

std::vector<float>& VolumeStack::add_channel(std::string name, std::vector<float> data) {
  if (data.size() != voxel_count()) {
    throw FormatError("channel '" + name + "' has " + std::to_string(data.size()) +
                      " values, expected " + std::to_string(voxel_count()));
  }
  names_.push_back(std::move(name));
  channels_.push_back(std::move(data));
  return channels_.back();
}

std::vector<float>& VolumeStack::add_channel(std::string name) {
  return add_channel(std::move(name), std::vector<float>(voxel_count(), 0.0f));
}

const std::vector<float>& VolumeStack::channel(const std::string& name) const {
  const auto i = find(name);
  if (i < 0) throw FormatError("volume has no channel '" + name + "'");
  return channels_[static_cast<std::size_t>(i)];
}

std::ptrdiff_t VolumeStack::find(const std::string& name) const {
  for (std::size_t i = 0; i < names_.size(); ++i)
    if (names_[i] == name) return static_cast<std::ptrdiff_t>(i);
  return -1;
}

std::span<const float> VolumeStack::slice(std::size_t c, int z) const {
  return std::span<const float>(channels_.at(c)).subspan(static_cast<std::size_t>(z) * slice_size(),
                                                         slice_size());
}

std::vector<std::size_t> VolumeStack::dwi_channels() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < names_.size(); ++i)
    if (names_[i].rfind("DWI:", 0) == 0) out.push_back(i);
  return out;
}

std::string dwi_channel_name(std::size_t index) { return "DWI:" + std::to_string(index); }

std::vector<std::uint8_t> encode_volume(const VolumeStack& stack) {
  nlohmann::json header;
  header["dims"] = stack.dims();
  header["voxel_size"] = stack.voxel_size();
  header["channels"] = stack.names();
  const std::string text = header.dump();

  std::vector<std::uint8_t> out(kMagic, kMagic + 8);
  byte_io::put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  out.reserve(out.size() + stack.channel_count() * stack.voxel_count() * 4);
  for (std::size_t c = 0; c < stack.channel_count(); ++c) {
    for (float v : stack.channel(c)) {
      if (!std::isfinite(v)) throw FormatError("refusing to write non-finite voxel in '" + stack.names()[c] + "'");
    }
    byte_io::put_floats(out, stack.channel(c));
  }
  return out;
}

VolumeStack decode_volume(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 8) != 0) throw FormatError("bad magic");
  const std::uint32_t hlen = byte_io::get_u32(bytes.data() + 8);
  if (bytes.size() < 12 + static_cast<std::size_t>(hlen)) throw FormatError("truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + hlen);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed header: ") + e.what());
  }
  std::array<int, 3> dims{};
  std::array<double, 3> vox{};
  std::vector<std::string> names;
  try {
    dims = header.at("dims").get<std::array<int, 3>>();
    vox = header.at("voxel_size").get<std::array<double, 3>>();
    names = header.at("channels").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed header: ") + e.what());
  }
  VolumeStack stack(dims, vox);
  const std::size_t payload = bytes.size() - 12 - hlen;
  const std::size_t expected = names.size() * stack.voxel_count() * 4;
  if (payload % 4 != 0) throw FormatError("truncated raster");
  if (payload != expected) {
    throw FormatError("size mismatch: header describes " + std::to_string(expected / 4) +
                      " floats, raster holds " + std::to_string(payload / 4));
  }
  const std::uint8_t* p = bytes.data() + 12 + hlen;
  for (auto& name : names) {
    std::vector<float> data(stack.voxel_count());
    byte_io::get_floats(p, data);
    p += data.size() * 4;
    stack.add_channel(std::move(name), std::move(data));
  }
  return stack;
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for " + path.string());
}

void write_volume(const VolumeStack& stack, const std::filesystem::path& path) {
  write_bytes(path, encode_volume(stack));
}

VolumeStack read_volume(const std::filesystem::path& path) { return decode_volume(read_bytes(path)); }

}  // namespace qdwi
