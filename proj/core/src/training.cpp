#include "qdwi/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>
#include <set>

#include <json.hpp>

#include "qdwi/diff/ops.hpp"
#include "qdwi/error.hpp"
#include "qdwi/rng.hpp"

namespace qdwi {

using nlohmann::json;
namespace ops = diff;

namespace {

void reject_unknown(const json& j, std::initializer_list<const char*> allowed, const char* where) {
  if (!j.is_object()) throw FormatError(std::string(where) + ": expected a JSON object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, value] : j.items()) {
    if (!ok.count(key)) throw FormatError(std::string(where) + ": unknown key \"" + key + "\"");
  }
}

template <typename V>
void read_key(const json& j, const char* key, V& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const json::exception&) {
    throw FormatError(std::string("config key \"") + key + "\" has the wrong type");
  }
}

const char* film_name(FilmSites s) {
  switch (s) {
    case FilmSites::All: return "all";
    case FilmSites::None: return "none";
    default: return "bottleneck_decoder";
  }
}

GeneratorConfig generator_from_json(const json& j) {
  reject_unknown(j,
                 {"input_channels", "base_width", "depth", "residual_blocks", "mlp_hidden_width", "film_sites",
                  "output_activation", "intensity_cap", "norm_epsilon", "leaky_slope", "skip_connections"},
                 "generator");
  GeneratorConfig c;
  read_key(j, "input_channels", c.input_channels);
  read_key(j, "base_width", c.base_width);
  read_key(j, "depth", c.depth);
  read_key(j, "residual_blocks", c.residual_blocks);
  read_key(j, "mlp_hidden_width", c.mlp_hidden_width);
  read_key(j, "intensity_cap", c.intensity_cap);
  read_key(j, "norm_epsilon", c.norm_epsilon);
  read_key(j, "leaky_slope", c.leaky_slope);
  read_key(j, "skip_connections", c.skip_connections);
  std::string film = film_name(c.film_sites);
  read_key(j, "film_sites", film);
  if (film == "all") c.film_sites = FilmSites::All;
  else if (film == "none") c.film_sites = FilmSites::None;
  else if (film == "bottleneck_decoder") c.film_sites = FilmSites::BottleneckAndDecoder;
  else throw FormatError("generator.film_sites: unknown value \"" + film + "\"");
  std::string act = c.output_activation == OutputActivation::Clamp ? "clamp" : "linear";
  read_key(j, "output_activation", act);
  if (act == "clamp") c.output_activation = OutputActivation::Clamp;
  else if (act == "linear") c.output_activation = OutputActivation::Linear;
  else throw FormatError("generator.output_activation: unknown value \"" + act + "\"");
  validate(c);
  return c;
}

json generator_to_json(const GeneratorConfig& c) {
  return {{"input_channels", c.input_channels},
          {"base_width", c.base_width},
          {"depth", c.depth},
          {"residual_blocks", c.residual_blocks},
          {"mlp_hidden_width", c.mlp_hidden_width},
          {"film_sites", film_name(c.film_sites)},
          {"output_activation", c.output_activation == OutputActivation::Clamp ? "clamp" : "linear"},
          {"intensity_cap", c.intensity_cap},
          {"norm_epsilon", c.norm_epsilon},
          {"leaky_slope", c.leaky_slope},
          {"skip_connections", c.skip_connections}};
}

json to_json(const TrainConfig& c) {
  return {{"lr_g", c.lr_g},
          {"lr_d", c.lr_d},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"batch_size", c.batch_size},
          {"d_update_period", c.d_update_period},
          {"p_zero_b", c.p_zero_b},
          {"p_antipodal", c.p_antipodal},
          {"weights", {{"lambda_gan", c.weights.lambda_gan}, {"lambda_l1", c.weights.lambda_l1}}},
          {"seed", c.seed},
          {"steps", c.steps},
          {"max_bvalue", c.max_bvalue},
          {"generator", generator_to_json(c.generator)},
          {"discriminator",
           {{"input_channels", c.discriminator.input_channels},
            {"base_width", c.discriminator.base_width},
            {"depth", c.discriminator.depth},
            {"power_iterations", c.discriminator.power_iterations},
            {"leaky_slope", c.discriminator.leaky_slope}}}};
}

}  // namespace

void validate(const TrainConfig& c) {
  auto prob = [](double p) { return p >= 0 && p <= 1; };
  if (!prob(c.p_zero_b) || !prob(c.p_antipodal)) throw FormatError("augmentation probabilities must lie in [0, 1]");
  if (c.d_update_period < 1) throw FormatError("d_update_period must be >= 1");
  if (c.batch_size < 1) throw FormatError("batch_size must be >= 1");
  if (c.steps < 0) throw FormatError("steps must be >= 0");
  if (!(c.lr_g > 0) || !(c.lr_d > 0)) throw FormatError("learning rates must be positive");
  if (!(c.beta1 > 0 && c.beta1 < 1) || !(c.beta2 > 0 && c.beta2 < 1)) throw FormatError("betas must lie in (0, 1)");
  if (c.max_bvalue < 0) throw FormatError("max_bvalue must be >= 0");
  validate(c.weights);
  validate(c.generator);
  validate(c.discriminator);
  if (c.discriminator.input_channels != c.generator.input_channels + 1) {
    throw FormatError("discriminator.input_channels must equal generator.input_channels + 1");
  }
}

TrainConfig parse_train_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("config: malformed JSON: ") + e.what());
  }
  reject_unknown(j,
                 {"lr_g", "lr_d", "beta1", "beta2", "batch_size", "d_update_period", "p_zero_b", "p_antipodal",
                  "weights", "seed", "steps", "max_bvalue", "generator", "discriminator"},
                 "config");
  TrainConfig c;
  read_key(j, "lr_g", c.lr_g);
  read_key(j, "lr_d", c.lr_d);
  read_key(j, "beta1", c.beta1);
  read_key(j, "beta2", c.beta2);
  read_key(j, "batch_size", c.batch_size);
  read_key(j, "d_update_period", c.d_update_period);
  read_key(j, "p_zero_b", c.p_zero_b);
  read_key(j, "p_antipodal", c.p_antipodal);
  read_key(j, "seed", c.seed);
  read_key(j, "steps", c.steps);
  read_key(j, "max_bvalue", c.max_bvalue);
  if (j.contains("weights")) {
    const json& w = j["weights"];
    reject_unknown(w, {"lambda_gan", "lambda_l1"}, "weights");
    read_key(w, "lambda_gan", c.weights.lambda_gan);
    read_key(w, "lambda_l1", c.weights.lambda_l1);
  }
  if (j.contains("generator")) c.generator = generator_from_json(j["generator"]);
  c.discriminator.input_channels = c.generator.input_channels + 1;
  c.discriminator.base_width = c.generator.base_width;
  c.discriminator.depth = c.generator.depth;
  if (j.contains("discriminator")) {
    const json& d = j["discriminator"];
    reject_unknown(d, {"input_channels", "base_width", "depth", "power_iterations", "leaky_slope"}, "discriminator");
    read_key(d, "input_channels", c.discriminator.input_channels);
    read_key(d, "base_width", c.discriminator.base_width);
    read_key(d, "depth", c.discriminator.depth);
    read_key(d, "power_iterations", c.discriminator.power_iterations);
    read_key(d, "leaky_slope", c.discriminator.leaky_slope);
  }
  validate(c);
  return c;
}

TrainConfig read_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_train_config(text);
}

std::string train_config_to_json(const TrainConfig& c) { return to_json(c).dump(2); }

GeneratorConfig parse_generator_config(const std::string& text) {
  try {
    return generator_from_json(json::parse(text));
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("generator config: malformed JSON: ") + e.what());
  }
}

std::string generator_config_to_json(const GeneratorConfig& c) { return generator_to_json(c).dump(); }

// ---- augmentation ----

AugmentDecision draw_augmentation(std::mt19937_64& rng, double p_zero_b, double p_antipodal) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  AugmentDecision d;
  d.zero_b = u(rng) < p_zero_b;
  d.antipodal = u(rng) < p_antipodal;
  return d;
}

TrainSample augment_sample(TrainSample s, const AugmentDecision& d) {
  if (d.zero_b) {
    s.condition.l_norm = 0;
    s.bvalue = 0;
    s.target = s.target_b0;
  }
  if (d.antipodal) {
    // Negate without turning 0 into -0 so zero directions stay bit-identical.
    auto neg = [](float v) { return v == 0.0f ? v : -v; };
    s.condition.tx = neg(s.condition.tx);
    s.condition.ty = neg(s.condition.ty);
    s.condition.tz = neg(s.condition.tz);
  }
  return s;
}

TrainSample augment_sample(TrainSample s, std::mt19937_64& rng, double p_zero_b, double p_antipodal) {
  return augment_sample(std::move(s), draw_augmentation(rng, p_zero_b, p_antipodal));
}

// ---- data preparation ----

std::vector<float> ratio_to_b0(std::span<const float> dwi, std::span<const float> b0, int width, int height,
                               int depth, double cap) {
  const std::size_t plane = static_cast<std::size_t>(width) * height;
  if (dwi.size() != plane * depth || b0.size() != dwi.size()) throw FormatError("ratio_to_b0: size mismatch");
  std::vector<float> out(dwi.size(), 0.0f);
  for (int z = 0; z < depth; ++z) {
    const std::size_t off = plane * z;
    float peak = 0;
    for (std::size_t i = 0; i < plane; ++i) peak = std::max(peak, b0[off + i]);
    const double floor = 1e-3 * peak;
    for (std::size_t i = 0; i < plane; ++i) {
      const double b = b0[off + i];
      if (b <= floor || b <= 0) continue;
      out[off + i] = static_cast<float>(std::clamp(dwi[off + i] / b, 0.0, cap));
    }
  }
  return out;
}

VolumeStack ratio_volume(const VolumeStack& structural, const VolumeStack& raw, double cap) {
  if (structural.dims() != raw.dims()) throw FormatError("ratio_volume: structural and DWI dims differ");
  const auto& b0 = structural.channel("B0");
  const auto [w, h, d] = raw.dims();
  VolumeStack out(raw.dims(), raw.voxel_size());
  for (std::size_t c = 0; c < raw.channel_count(); ++c) {
    out.add_channel(raw.names()[c], ratio_to_b0(raw.channel(c), b0, w, h, d, cap));
  }
  return out;
}

VolumeStack normalize_structural(const VolumeStack& s, int channels) {
  static const char* kNames[] = {"B0", "T2", "T1"};
  if (channels < 1 || channels > 3) throw FormatError("structural channel count must be 1, 2 or 3");
  VolumeStack out(s.dims(), s.voxel_size());
  for (int c = 0; c < channels; ++c) {
    if (s.find(kNames[c]) < 0) throw FormatError(std::string("structural stack lacks channel ") + kNames[c]);
    std::vector<float> v = s.channel(kNames[c]);
    std::vector<float> pos;
    for (float x : v)
      if (x > 0) pos.push_back(x);
    float scale = 1;
    if (!pos.empty()) {
      auto nth = pos.begin() + static_cast<std::ptrdiff_t>(0.99 * (pos.size() - 1));
      std::nth_element(pos.begin(), nth, pos.end());
      if (*nth > 0) scale = *nth;
    }
    for (float& x : v) x /= scale;
    out.add_channel(kNames[c], std::move(v));
  }
  return out;
}

SampleSet::SampleSet(int input_channels, double max_bvalue, double cap)
    : channels_(input_channels), max_bvalue_(max_bvalue), cap_(cap) {
  if (!(max_bvalue > 0)) throw FormatError("SampleSet: max_bvalue must be positive");
}

void SampleSet::add_subject(const VolumeStack& structural, const VolumeStack& raw_dwis, const GradientTable& table) {
  const auto dwi_idx = raw_dwis.dwi_channels();
  if (dwi_idx.size() != table.size()) {
    throw FormatError("table/channel count mismatch: table has " + std::to_string(table.size()) + " entries, stack " +
                      std::to_string(dwi_idx.size()) + " DWI channels");
  }
  const auto [w, h, d] = structural.dims();
  if (subjects_.empty()) {
    width_ = w;
    height_ = h;
  } else if (w != width_ || h != height_) {
    throw FormatError("SampleSet: subjects must share in-plane dims");
  }
  for (const auto& e : table.entries()) to_condition(e, max_bvalue_);  // range check up front

  Subject s;
  s.structural = normalize_structural(structural, channels_);
  VolumeStack dw(raw_dwis.dims(), raw_dwis.voxel_size());
  for (std::size_t i : dwi_idx) dw.add_channel(raw_dwis.names()[i], raw_dwis.channel(i));
  s.ratios = ratio_volume(structural, dw, cap_);
  VolumeStack b0(structural.dims(), structural.voxel_size());
  b0.add_channel("B0", structural.channel("B0"));
  s.b0_ratio = ratio_volume(structural, b0, cap_);
  s.table = table;
  const auto sid = static_cast<std::uint32_t>(subjects_.size());
  subjects_.push_back(std::move(s));
  for (int z = 0; z < d; ++z)
    for (std::size_t g = 0; g < table.size(); ++g)
      index_.push_back({sid, static_cast<std::uint32_t>(z), static_cast<std::uint32_t>(g)});
}

TrainSample SampleSet::sample(std::size_t i) const {
  const Ref& r = index_.at(i);
  const Subject& s = subjects_[r.subject];
  TrainSample out;
  out.height = height_;
  out.width = width_;
  out.structural.reserve(static_cast<std::size_t>(channels_) * height_ * width_);
  for (int c = 0; c < channels_; ++c) {
    auto sl = s.structural.slice(static_cast<std::size_t>(c), static_cast<int>(r.z));
    out.structural.insert(out.structural.end(), sl.begin(), sl.end());
  }
  const auto& e = s.table[r.gradient];
  out.condition = to_condition(e, max_bvalue_);
  out.bvalue = e.bvalue;
  auto t = s.ratios.slice(r.gradient, static_cast<int>(r.z));
  out.target.assign(t.begin(), t.end());
  auto b = s.b0_ratio.slice(0, static_cast<int>(r.z));
  out.target_b0.assign(b.begin(), b.end());
  return out;
}

std::vector<TrainSample> build_samples(const VolumeStack& structural, const VolumeStack& raw_dwis,
                                       const GradientTable& table, int input_channels, double max_bvalue,
                                       double cap) {
  SampleSet set(input_channels, max_bvalue, cap);
  set.add_subject(structural, raw_dwis, table);
  std::vector<TrainSample> out;
  out.reserve(set.size());
  for (std::size_t i = 0; i < set.size(); ++i) out.push_back(set.sample(i));
  return out;
}

// ---- optimisation ----

TrainState init_train_state(const TrainConfig& c) {
  validate(c);
  TrainState s;
  s.gen = init_generator_params<float>(c.generator, derive_seed(c.seed, {1}));
  s.disc = init_discriminator_params<float>(c.discriminator, derive_seed(c.seed, {2}));
  s.adam_g = diff::make_adam<float>(static_cast<float>(c.lr_g), static_cast<float>(c.beta1),
                                    static_cast<float>(c.beta2));
  s.adam_d = diff::make_adam<float>(static_cast<float>(c.lr_d), static_cast<float>(c.beta1),
                                    static_cast<float>(c.beta2));
  return s;
}

namespace {

struct BatchTensors {
  Var<float> structural, condition, target, target_b0;
  std::vector<double> bvalues;
};

BatchTensors stack_batch(const std::vector<TrainSample>& batch, int channels) {
  if (batch.empty()) throw FormatError("train_step: empty batch");
  const int n = static_cast<int>(batch.size());
  const int h = batch[0].height, w = batch[0].width;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  Tensor<float> s({n, channels, h, w}), c({n, 4}), t({n, 1, h, w}), t0({n, 1, h, w});
  BatchTensors out;
  for (int i = 0; i < n; ++i) {
    const auto& b = batch[static_cast<std::size_t>(i)];
    if (b.height != h || b.width != w || b.structural.size() != plane * channels || b.target.size() != plane ||
        b.target_b0.size() != plane) {
      throw FormatError("train_step: inconsistent sample shapes in batch");
    }
    std::copy(b.structural.begin(), b.structural.end(), s.data() + i * plane * channels);
    std::copy(b.target.begin(), b.target.end(), t.data() + i * plane);
    std::copy(b.target_b0.begin(), b.target_b0.end(), t0.data() + i * plane);
    const auto a = b.condition.as_array();
    std::copy(a.begin(), a.end(), c.data() + 4 * i);
    out.bvalues.push_back(b.bvalue);
  }
  out.structural = Var<float>::constant(std::move(s), "structural");
  out.condition = Var<float>::constant(std::move(c), "condition");
  out.target = Var<float>::constant(std::move(t), "target");
  out.target_b0 = Var<float>::constant(std::move(t0), "target_b0");
  return out;
}

void check_finite(double v, std::uint64_t step, const char* component) {
  if (!std::isfinite(v)) {
    throw NonFiniteError(component, "non-finite " + std::string(component) + " at step " + std::to_string(step));
  }
}

/// Temporarily stops gradient accumulation into a parameter set.
class FreezeGuard {
 public:
  explicit FreezeGuard(ParamSet<float>& p) : p_(p) {
    for (const auto& [name, v] : p_) v.node()->requires_grad = false;
  }
  ~FreezeGuard() {
    for (const auto& [name, v] : p_) v.node()->requires_grad = true;
  }
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

 private:
  ParamSet<float>& p_;
};

}  // namespace

LossRecord train_step(const std::vector<TrainSample>& batch, TrainState& st, const TrainConfig& c) {
  const BatchTensors b = stack_batch(batch, c.generator.input_channels);
  LossRecord rec;
  rec.step = st.step;

  Var<float> fake = generator_forward(b.structural, b.condition, st.gen, c.generator);

  if (st.step % static_cast<std::uint64_t>(c.d_update_period) == 0) {
    const int n = b.structural.dim(0);
    Var<float> real_x = ops::concat_channels(b.structural, b.target);
    Var<float> fake_x = ops::concat_channels(b.structural, ops::detach(fake));
    auto out = discriminator_forward(ops::concat_batch(real_x, fake_x), ops::concat_batch(b.condition, b.condition),
                                     st.disc, c.discriminator, SpectralMode::Update);
    DiscriminatorOutput<float> real{ops::slice_batch(out.global_score, 0, n), ops::slice_batch(out.pixel_scores, 0, n)};
    DiscriminatorOutput<float> fk{ops::slice_batch(out.global_score, n, 2 * n),
                                  ops::slice_batch(out.pixel_scores, n, 2 * n)};
    Var<float> d_loss = lsgan_d_loss(real, fk);
    rec.d_loss = d_loss.item();
    check_finite(rec.d_loss, st.step, "d_loss");
    auto grads = diff::evaluate_with_gradients(d_loss, st.disc);
    diff::adam_step(st.disc, grads, st.adam_d);
    st.last_d_loss = rec.d_loss;
    rec.d_updated = true;
  } else {
    rec.d_loss = st.last_d_loss;
  }

  Var<float> total;
  {
    FreezeGuard freeze(st.disc);
    auto out = discriminator_forward(ops::concat_channels(b.structural, fake), b.condition, st.disc, c.discriminator,
                                     SpectralMode::Frozen);
    Var<float> adv = lsgan_g_loss(out);
    Var<float> l1 = l1_translation_loss(fake, b.target, b.target_b0, b.bvalues);
    total = total_generator_loss(adv, l1, c.weights);
    rec.g_adv = adv.item();
    rec.g_l1 = l1.item();
    rec.g_total = total.item();
    check_finite(rec.g_adv, st.step, "g_adv");
    check_finite(rec.g_l1, st.step, "g_l1");
    check_finite(rec.g_total, st.step, "g_total");
  }
  auto grads = diff::evaluate_with_gradients(total, st.gen);
  diff::adam_step(st.gen, grads, st.adam_g);
  ++st.step;
  return rec;
}

BatchSampler::BatchSampler(const SampleSet& samples, const TrainConfig& config) : samples_(samples), config_(config) {
  if (samples.size() == 0) throw FormatError("no training samples");
}

std::vector<TrainSample> BatchSampler::batch(std::uint64_t step) {
  const std::uint64_t n = samples_.size();
  const std::uint64_t bs = static_cast<std::uint64_t>(config_.batch_size);
  std::vector<TrainSample> out;
  out.reserve(bs);
  for (std::uint64_t slot = 0; slot < bs; ++slot) {
    const std::uint64_t pos = step * bs + slot;
    const std::uint64_t epoch = pos / n;
    if (epoch != cached_epoch_) {
      order_.resize(n);
      std::iota(order_.begin(), order_.end(), 0u);
      std::mt19937_64 rng(derive_seed(config_.seed, {0x65706f6368, epoch}));
      std::shuffle(order_.begin(), order_.end(), rng);
      cached_epoch_ = epoch;
    }
    std::mt19937_64 aug(derive_seed(config_.seed, {0x617567, step, slot}));
    out.push_back(augment_sample(samples_.sample(order_[pos % n]), aug, config_.p_zero_b, config_.p_antipodal));
  }
  return out;
}

void train(const SampleSet& samples, TrainState& state, const TrainConfig& config, const StepCallback& on_step) {
  BatchSampler sampler(samples, config);
  while (state.step < static_cast<std::uint64_t>(config.steps)) {
    LossRecord rec = train_step(sampler.batch(state.step), state, config);
    if (on_step) on_step(rec);
  }
}

void write_loss_header(std::ostream& out) { out << "step,g_adv,g_l1,g_total,d_loss\n"; }

void write_loss_row(std::ostream& out, const LossRecord& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%llu,%.9g,%.9g,%.9g,%.9g\n", static_cast<unsigned long long>(r.step), r.g_adv,
                r.g_l1, r.g_total, r.d_loss);
  out << buf;
}

}  // namespace qdwi
