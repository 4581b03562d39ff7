#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <random>
#include <string>
#include <vector>

#include "qdwi/diff/adam.hpp"
#include "qdwi/discriminator.hpp"
#include "qdwi/generator.hpp"
#include "qdwi/losses.hpp"
#include "qdwi/qspace.hpp"
#include "qdwi/volume.hpp"

namespace qdwi {

struct TrainConfig {
  double lr_g = 1e-4;
  double lr_d = 5e-5;
  double beta1 = 0.5;
  double beta2 = 0.999;
  int batch_size = 8;
  int d_update_period = 2;
  double p_zero_b = 0.1;
  double p_antipodal = 0.1;
  LossWeights weights;
  std::uint64_t seed = 0;
  int steps = 3000;
  double max_bvalue = 0;  ///< 0: take the training table maximum
  GeneratorConfig generator;
  DiscriminatorConfig discriminator;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

void validate(const TrainConfig& config);
/// Strict parse: unknown keys are rejected.
TrainConfig parse_train_config(const std::string& json_text);
TrainConfig read_train_config(const std::filesystem::path& path);
std::string train_config_to_json(const TrainConfig& config);

GeneratorConfig parse_generator_config(const std::string& json_text);
std::string generator_config_to_json(const GeneratorConfig& config);

/// One axial slice paired with one gradient. Rasters are row-major H x W.
struct TrainSample {
  int height = 0, width = 0;
  std::vector<float> structural;  ///< C x H x W
  ConditionVector condition;
  double bvalue = 0;
  std::vector<float> target;     ///< B0-ratio DWI
  std::vector<float> target_b0;  ///< B0 ratio of B0 itself
};

struct AugmentDecision {
  bool zero_b = false;
  bool antipodal = false;
};

AugmentDecision draw_augmentation(std::mt19937_64& rng, double p_zero_b, double p_antipodal);
TrainSample augment_sample(TrainSample sample, const AugmentDecision& decision);
TrainSample augment_sample(TrainSample sample, std::mt19937_64& rng, double p_zero_b, double p_antipodal);

/// Voxel-wise DWI / B0 with the B0 floor at 1e-3 of each slice maximum
/// (below-floor voxels give 0) and the result clamped to [0, cap].
std::vector<float> ratio_to_b0(std::span<const float> dwi, std::span<const float> b0, int width, int height,
                               int depth, double cap);
/// Ratio stack of every DWI channel of `raw_dwis` against the B0 channel.
VolumeStack ratio_volume(const VolumeStack& structural, const VolumeStack& raw_dwis, double cap);

/// Scales each structural channel by the 99th percentile of its positive
/// voxels and keeps the first `channels` of (B0, T2, T1).
VolumeStack normalize_structural(const VolumeStack& structural, int channels);

/// Slice-by-gradient sample store for a set of subjects.
class SampleSet {
 public:
  SampleSet(int input_channels, double max_bvalue, double cap);

  /// `raw_dwis` holds raw signals; one channel per table entry.
  void add_subject(const VolumeStack& structural, const VolumeStack& raw_dwis, const GradientTable& table);

  std::size_t size() const noexcept { return index_.size(); }
  TrainSample sample(std::size_t i) const;
  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }

 private:
  struct Subject {
    VolumeStack structural;  ///< normalised
    VolumeStack ratios;
    VolumeStack b0_ratio;
    GradientTable table;
  };
  struct Ref {
    std::uint32_t subject, z, gradient;
  };
  int channels_;
  double max_bvalue_;
  double cap_;
  int height_ = 0, width_ = 0;
  std::vector<Subject> subjects_;
  std::vector<Ref> index_;
};

/// All slice/gradient samples of one subject, in (z, gradient) order.
std::vector<TrainSample> build_samples(const VolumeStack& structural, const VolumeStack& raw_dwis,
                                       const GradientTable& table, int input_channels, double max_bvalue,
                                       double cap = 1.5);

struct LossRecord {
  std::uint64_t step = 0;
  double g_adv = 0, g_l1 = 0, g_total = 0;
  double d_loss = 0;  ///< latest discriminator loss (carried over on steps without a D update)
  bool d_updated = false;
};

struct TrainState {
  ParamSet<float> gen;
  ParamSet<float> disc;
  diff::AdamState<float> adam_g;
  diff::AdamState<float> adam_d;
  std::uint64_t step = 0;
  double last_d_loss = 0;
};

TrainState init_train_state(const TrainConfig& config);

/// One optimisation step on a prepared batch. The discriminator is updated
/// first when step % d_update_period == 0, then the generator.
LossRecord train_step(const std::vector<TrainSample>& batch, TrainState& state, const TrainConfig& config);

/// Deterministic batch stream: per-epoch permutations seeded by (seed, epoch)
/// and per-sample augmentation seeded by (seed, step, slot).
class BatchSampler {
 public:
  BatchSampler(const SampleSet& samples, const TrainConfig& config);
  std::vector<TrainSample> batch(std::uint64_t step);

 private:
  const SampleSet& samples_;
  TrainConfig config_;
  std::uint64_t cached_epoch_ = ~0ULL;
  std::vector<std::uint32_t> order_;
};

using StepCallback = std::function<void(const LossRecord&)>;

/// Runs steps [state.step, config.steps).
void train(const SampleSet& samples, TrainState& state, const TrainConfig& config, const StepCallback& on_step = {});

void write_loss_header(std::ostream& out);
void write_loss_row(std::ostream& out, const LossRecord& record);

/// QCKPT001 container holding config, max_bvalue, step and all parameters,
/// buffers and optimiser moments.
void save_checkpoint(const TrainState& state, const TrainConfig& config, double max_bvalue,
                     const std::filesystem::path& path);
std::vector<std::uint8_t> encode_checkpoint(const TrainState& state, const TrainConfig& config, double max_bvalue);

struct Checkpoint {
  TrainConfig config;
  double max_bvalue = 0;
  TrainState state;
};

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// Loads into a state built from `config`; throws "shape drift" on mismatch.
Checkpoint load_checkpoint(const std::filesystem::path& path, const TrainConfig& config);

}  // namespace qdwi
