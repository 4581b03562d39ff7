#include <cstring>

#include <json.hpp>

#include "qdwi/byte_io.hpp"
#include "qdwi/error.hpp"
#include "qdwi/training.hpp"

namespace qdwi {

using nlohmann::json;
using namespace byte_io;

namespace {

constexpr char kMagic[8] = {'Q', 'C', 'K', 'P', 'T', '0', '0', '1'};

// Every tensor the checkpoint carries, in a fixed order.
template <typename State, typename Fn>
void visit_tensors(State& s, Fn&& fn) {
  for (auto [name, var] : s.gen.entries()) fn(name, var.mutable_value());
  for (auto [name, var] : s.disc.entries()) fn(name, var.mutable_value());
  for (auto& [name, t] : s.gen.buffers) fn("buffer/" + name, t);
  for (auto& [name, t] : s.disc.buffers) fn("buffer/" + name, t);
  for (auto& [name, t] : s.adam_g.first_moment) fn("adam_g.m/" + name, t);
  for (auto& [name, t] : s.adam_g.second_moment) fn("adam_g.v/" + name, t);
  for (auto& [name, t] : s.adam_d.first_moment) fn("adam_d.m/" + name, t);
  for (auto& [name, t] : s.adam_d.second_moment) fn("adam_d.v/" + name, t);
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const TrainState& state, const TrainConfig& config, double max_bvalue) {
  json tensors = json::array();
  std::vector<std::uint8_t> blob;
  auto& s = const_cast<TrainState&>(state);
  visit_tensors(s, [&](const std::string& name, Tensor<float>& t) {
    if (!t.all_finite()) throw FormatError("checkpoint: non-finite values in " + name);
    tensors.push_back({{"name", name}, {"shape", t.shape()}, {"byte_offset", blob.size()}});
    put_floats(blob, t.values());
  });
  json manifest = {{"format", "QCKPT001"},
                   {"config", json::parse(train_config_to_json(config))},
                   {"max_bvalue", max_bvalue},
                   {"step", state.step},
                   {"last_d_loss", state.last_d_loss},
                   {"gen_updates", state.gen.step_count},
                   {"disc_updates", state.disc.step_count},
                   {"tensors", tensors}};
  const std::string text = manifest.dump();
  std::vector<std::uint8_t> out(kMagic, kMagic + 8);
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), blob.begin(), blob.end());
  return out;
}

void save_checkpoint(const TrainState& state, const TrainConfig& config, double max_bvalue,
                     const std::filesystem::path& path) {
  write_bytes(path, encode_checkpoint(state, config, max_bvalue));
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 8) != 0) throw FormatError("checkpoint: bad magic");
  const std::uint32_t len = get_u32(bytes.data() + 8);
  if (bytes.size() < 12 + static_cast<std::size_t>(len)) throw FormatError("checkpoint: truncated manifest");
  json m;
  try {
    m = json::parse(bytes.begin() + 12, bytes.begin() + 12 + len);
  } catch (const json::parse_error&) {
    throw FormatError("checkpoint: malformed manifest");
  }
  const auto blob = bytes.subspan(12 + len);

  Checkpoint ck;
  try {
    ck.config = parse_train_config(m.at("config").dump());
    ck.max_bvalue = m.at("max_bvalue").get<double>();
    ck.state = init_train_state(ck.config);
    ck.state.step = m.at("step").get<std::uint64_t>();
    ck.state.last_d_loss = m.at("last_d_loss").get<double>();
    ck.state.gen.step_count = m.at("gen_updates").get<std::uint64_t>();
    ck.state.disc.step_count = m.at("disc_updates").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint: manifest field error: ") + e.what());
  }

  std::map<std::string, json> entries;
  for (const auto& t : m.at("tensors")) entries[t.at("name").get<std::string>()] = t;
  auto read_tensor = [&](const std::string& name, const diff::Shape& expected) {
    auto it = entries.find(name);
    if (it == entries.end()) throw FormatError("checkpoint: shape drift, missing tensor " + name);
    const diff::Shape shape = it->second.at("shape").get<diff::Shape>();
    if (shape != expected) {
      throw FormatError("checkpoint: shape drift for " + name + ": stored " + diff::shape_str(shape) + ", expected " +
                        diff::shape_str(expected));
    }
    const std::size_t off = it->second.at("byte_offset").get<std::size_t>();
    const std::size_t count = diff::shape_numel(shape);
    if (off + 4 * count > blob.size()) throw FormatError("checkpoint: manifest/blob mismatch for " + name);
    std::vector<float> values(count);
    get_floats(blob.data() + off, values);
    entries.erase(it);
    return Tensor<float>(shape, std::move(values));
  };

  auto& s = ck.state;
  for (auto [name, var] : s.gen.entries()) var.mutable_value() = read_tensor(name, var.shape());
  for (auto [name, var] : s.disc.entries()) var.mutable_value() = read_tensor(name, var.shape());
  for (auto& [name, t] : s.gen.buffers) t = read_tensor("buffer/" + name, t.shape());
  for (auto& [name, t] : s.disc.buffers) t = read_tensor("buffer/" + name, t.shape());
  // Optimiser moments exist only once a step has run; adopt whatever is stored.
  auto adopt = [&](const std::string& prefix, const ParamSet<float>& params, std::map<std::string, Tensor<float>>& dst) {
    for (const auto& [name, var] : params) {
      if (entries.count(prefix + name)) dst[name] = read_tensor(prefix + name, var.shape());
    }
  };
  adopt("adam_g.m/", s.gen, s.adam_g.first_moment);
  adopt("adam_g.v/", s.gen, s.adam_g.second_moment);
  adopt("adam_d.m/", s.disc, s.adam_d.first_moment);
  adopt("adam_d.v/", s.disc, s.adam_d.second_moment);
  if (!entries.empty()) throw FormatError("checkpoint: shape drift, unexpected tensor " + entries.begin()->first);
  return ck;
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_bytes(path)); }

Checkpoint load_checkpoint(const std::filesystem::path& path, const TrainConfig& config) {
  Checkpoint ck = load_checkpoint(path);
  const TrainState fresh = init_train_state(config);
  auto compare = [](const ParamSet<float>& want, const ParamSet<float>& got) {
    for (const auto& [name, var] : want) {
      if (!got.contains(name)) throw FormatError("checkpoint: shape drift, missing tensor " + name);
      if (got.at(name).shape() != var.shape()) {
        throw FormatError("checkpoint: shape drift for " + name + ": stored " + diff::shape_str(got.at(name).shape()) +
                          ", expected " + diff::shape_str(var.shape()));
      }
    }
    if (want.size() != got.size()) throw FormatError("checkpoint: shape drift, parameter count differs");
  };
  compare(fresh.gen, ck.state.gen);
  compare(fresh.disc, ck.state.disc);
  return ck;
}

}  // namespace qdwi
