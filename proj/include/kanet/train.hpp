#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "kanet/hsi.hpp"
#include "kanet/model.hpp"

namespace kanet {

struct TrainConfig {
  std::size_t epochs = 80;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Epochs between grid updates inside the first ceil(epochs / 4) epochs; 0 disables them.
  std::size_t grid_update_every = 1;
  std::uint64_t seed = 0;
  /// Only 64 is supported; 32 is rejected at validation.
  int precision = 64;
  /// Samples in the fixed calibration batch used by grid updates.
  std::size_t calibration_size = 64;
  /// Unfolded rows per KAN conv layer fed to a grid update.
  std::size_t grid_rows = 4096;

  void validate() const;
};

/// Everything a run needs besides the data.
struct RunConfig {
  TrainConfig train;
  NetworkConfig network;
};

/// Flat `key = value` lines; '#' starts a comment. Keys are TrainConfig and
/// NetworkConfig field names; unknown keys, repeated keys and bad values are ConfigErrors
/// that name the line. Unset keys keep the values of `base`.
RunConfig parse_config(const std::string& text, const RunConfig& base = {});
RunConfig load_config(const std::filesystem::path& path, const RunConfig& base = {});
/// Inverse of parse_config: every key, one per line, in a fixed order.
std::string format_config(const RunConfig& config);

/// Adam with bias correction over a fixed parameter list.
class Adam {
 public:
  /// `names` label parameters in errors; empty means use Parameter::name.
  Adam(std::vector<Parameter*> params, const TrainConfig& config, std::vector<std::string> names = {});

  /// Throws NumericError naming the parameter when a gradient is not finite; nothing is updated then.
  void step();
  /// Zeroes first and second moments of spline-coefficient parameters (after their grids change).
  void reset_spline_moments();
  std::size_t steps() const { return steps_; }
  void set_learning_rate(double lr) { lr_ = lr; }

 private:
  std::vector<Parameter*> params_;
  std::vector<std::string> names_;
  std::vector<Tensor> m_, v_;
  std::vector<std::size_t> counts_;  // per-parameter step count for bias correction
  double lr_, beta1_, beta2_, eps_;
  std::size_t steps_ = 0;
};

struct LossResult {
  double loss = 0.0;
  Tensor grad;  // d(mean loss)/d logits
  std::size_t correct = 0;
  std::vector<int> predictions;  // argmax, 1-based
};

/// Mean softmax cross-entropy over the batch; targets are 1..K.
LossResult cross_entropy(const Tensor& logits, const std::vector<int>& targets);

/// Patches, split and train-split band statistics, already standardized.
struct Dataset {
  PatchSet patches;
  Split split;
  BandStats stats;
  std::size_t classes = 0;
  std::size_t height = 0;
  std::size_t width = 0;
};

Dataset prepare_dataset(const LabeledCube& cube, std::size_t patch, const SplitSpec& split);

/// [n, 1, M, M, L] tensor of the selected patches and their labels.
Tensor gather_batch(const PatchSet& patches, const std::vector<std::size_t>& indices, std::vector<int>* labels = nullptr);

/// Parameters and buffers of a model plus what is needed to rebuild and feed it.
struct Checkpoint {
  NetworkConfig network;
  BandStats stats;
  std::vector<std::pair<std::string, Tensor>> state;

  static Checkpoint capture(Model& model, const BandStats& stats);
  /// Builds the network and loads the state; throws FormatError on name or shape mismatch.
  Model restore() const;

  bool operator==(const Checkpoint&) const = default;
};

/// KANC container: "KANC", u32 version, config text, band statistics and named state tensors, little-endian.
std::vector<unsigned char> encode_checkpoint(const Checkpoint& checkpoint);
Checkpoint decode_checkpoint(const std::vector<unsigned char>& bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
  bool grid_updated = false;
  double seconds = 0.0;
};

struct RunReport {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_val_accuracy = 0.0;
  Metrics test;
  std::size_t parameter_count = 0;
  std::vector<std::string> warnings;
};

struct TrainResult {
  RunReport report;
  Checkpoint checkpoint;  // best validation accuracy
};

/// Full training run; progress lines go to `log` when given.
TrainResult train(const RunConfig& config, const Dataset& data, std::ostream* log = nullptr);

/// Eval-mode predictions (1-based) for the selected patches, in batches.
std::vector<int> predict(Model& model, const PatchSet& patches, const std::vector<std::size_t>& indices,
                         std::size_t batch_size = 64);

struct Evaluation {
  Metrics metrics;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint16_t> class_map;  // H x W, 0 where unlabeled
};

/// Classifies every labeled pixel of the cube with the checkpoint's model and band statistics.
Evaluation evaluate(const Checkpoint& checkpoint, const LabeledCube& cube);

/// Per-epoch CSV with wall time.
std::string epochs_csv(const RunReport& report);
/// key: value lines plus a per-class table; no timing, so reruns compare equal.
std::string format_report(const RunReport& report);
/// Binary PGM (P5) with the class index as pixel value.
void write_pgm(const std::filesystem::path& path, std::size_t height, std::size_t width,
               const std::vector<std::uint16_t>& pixels);

}  // namespace kanet
