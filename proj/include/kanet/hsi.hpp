#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "kanet/errors.hpp"

namespace kanet {

/// Hyperspectral cube with a label map. Reflectance is row-major with the band
/// index fastest; label 0 marks unlabeled background, 1..classes are classes.
struct LabeledCube {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t bands = 0;
  std::size_t classes = 0;
  std::vector<float> reflectance;
  std::vector<std::uint16_t> labels;

  LabeledCube() = default;
  LabeledCube(std::size_t h, std::size_t w, std::size_t l, std::size_t k);

  float& at(std::size_t r, std::size_t c, std::size_t b) { return reflectance[(r * width + c) * bands + b]; }
  float at(std::size_t r, std::size_t c, std::size_t b) const { return reflectance[(r * width + c) * bands + b]; }
  std::uint16_t& label(std::size_t r, std::size_t c) { return labels[r * width + c]; }
  std::uint16_t label(std::size_t r, std::size_t c) const { return labels[r * width + c]; }

  /// Throws DomainError when sizes, labels or reflectance violate the invariants.
  void validate() const;

  bool operator==(const LabeledCube&) const = default;
};

enum class PadMode { reflect, zero };

/// Pads both spatial axes by `pad` per side; labels are padded with 0.
/// Reflection excludes the edge pixel (padded[-1] == original[1]).
LabeledCube pad_cube(const LabeledCube& cube, std::size_t pad, PadMode mode = PadMode::reflect);

/// One M x M x L block per labeled pixel, in row-major pixel order.
struct PatchSet {
  std::size_t size = 0;  // M
  std::size_t bands = 0;
  std::vector<double> patches;   // n x M x M x L
  std::vector<int> labels;       // 1..K
  std::vector<std::array<std::size_t, 3>> origin;  // (row, col, cube-flat pixel index)

  std::size_t count() const { return labels.size(); }
  std::size_t patch_volume() const { return size * size * bands; }
  const double* patch(std::size_t i) const { return patches.data() + i * patch_volume(); }
};

/// Pads by (M - 1) / 2 and cuts a block around every labeled pixel. M must be odd.
PatchSet extract_patches(const LabeledCube& cube, std::size_t m, PadMode mode = PadMode::reflect);

struct SplitSpec {
  std::array<std::size_t, 3> ratios{6, 1, 3};  // train : val : test
  std::uint64_t seed = 0;
};

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
  std::vector<std::string> warnings;
};

/// Per class: seeded shuffle, floor(n * r_train / sum) to train, floor(n * r_val / sum)
/// to val, the rest to test. A class with fewer samples than non-empty parts gives one
/// sample each to train, val, test in that order and records a warning. Index lists are sorted.
Split stratified_split(const std::vector<int>& labels, const SplitSpec& spec);

/// "a:b:c" -> ratios; ConfigError on malformed text.
std::array<std::size_t, 3> parse_ratios(const std::string& text);

struct Metrics {
  std::size_t classes = 0;
  std::vector<std::size_t> confusion;  // K x K, rows = truth
  double overall_accuracy = 0.0;
  double average_accuracy = 0.0;
  double kappa = 0.0;
  /// Recall per class; NaN for classes absent from the truth.
  std::vector<double> class_accuracy;

  std::size_t at(std::size_t truth, std::size_t pred) const { return confusion[truth * classes + pred]; }
};

/// Labels are 1..K.
Metrics compute_metrics(const std::vector<int>& truth, const std::vector<int>& pred, std::size_t classes);
/// From a K x K confusion matrix (rows = truth).
Metrics metrics_from_confusion(std::vector<std::size_t> confusion, std::size_t classes);

struct SynthOptions {
  std::size_t classes = 5;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t bands = 16;
  std::size_t blob_count = 10;
  double noise = 0.05;
  double labeled_fraction = 0.7;
  std::uint64_t seed = 0;
};

/// Rectangular class blobs with smooth per-class spectra (sums of Gaussians
/// over band index) plus Gaussian noise; the pixels farthest from their
/// blob's center are left unlabeled.
LabeledCube synth_cube(const SynthOptions& options);

/// HSC1 container: "HSC1", u32 version = 1, u32 H, W, L, K, H*W*L f32 reflectance,
/// H*W u16 labels, all little-endian. Errors carry the byte offset.
void write_cube(const std::filesystem::path& path, const LabeledCube& cube);
LabeledCube read_cube(const std::filesystem::path& path);
std::vector<unsigned char> encode_cube(const LabeledCube& cube);
LabeledCube decode_cube(const std::vector<unsigned char>& bytes);

struct BandStats {
  std::vector<double> mean;
  std::vector<double> stddev;  // population; 1 where a band is constant

  bool operator==(const BandStats&) const = default;
};

/// Per-band statistics over the given cube-flat pixel indices.
BandStats band_statistics(const LabeledCube& cube, const std::vector<std::size_t>& pixels);
/// (v - mean) / stddev per band, in place.
void standardize(PatchSet& patches, const BandStats& stats);

}  // namespace kanet
