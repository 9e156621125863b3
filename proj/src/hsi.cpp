#include "kanet/hsi.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>
#include <numeric>

#include "kanet/random.hpp"

namespace kanet {

namespace {

constexpr std::size_t kHeaderBytes = 24;
constexpr std::uint32_t kVersion = 1;

std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
  const auto len = static_cast<std::ptrdiff_t>(n);
  if (i < 0) return static_cast<std::size_t>(-i);
  if (i >= len) return static_cast<std::size_t>(2 * len - 2 - i);
  return static_cast<std::size_t>(i);
}

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int s = 0; s < 32; s += 8) out.push_back(static_cast<unsigned char>(v >> s));
}

std::uint32_t get_u32(const std::vector<unsigned char>& in, std::size_t offset) {
  std::uint32_t v = 0;
  for (int s = 0; s < 4; ++s) v |= static_cast<std::uint32_t>(in[offset + static_cast<std::size_t>(s)]) << (8 * s);
  return v;
}

std::size_t checked_mul(std::size_t a, std::size_t b, std::size_t offset) {
  if (a != 0 && b > std::numeric_limits<std::size_t>::max() / a) {
    throw FormatError("HSC1: dimensions at byte offset " + std::to_string(offset) + " overflow the addressable size");
  }
  return a * b;
}

}  // namespace

LabeledCube::LabeledCube(std::size_t h, std::size_t w, std::size_t l, std::size_t k)
    : height(h), width(w), bands(l), classes(k), reflectance(h * w * l, 0.0f), labels(h * w, 0) {}

void LabeledCube::validate() const {
  if (height == 0 || width == 0 || bands == 0) throw DomainError("cube: dimensions must be positive");
  if (reflectance.size() != height * width * bands || labels.size() != height * width) {
    throw DomainError("cube: storage does not match its dimensions");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] > classes) {
      throw DomainError("cube: label " + std::to_string(labels[i]) + " at pixel " + std::to_string(i) +
                        " exceeds class count " + std::to_string(classes));
    }
  }
  for (std::size_t i = 0; i < reflectance.size(); ++i) {
    if (!std::isfinite(reflectance[i])) throw DomainError("cube: non-finite reflectance at value " + std::to_string(i));
  }
}

LabeledCube pad_cube(const LabeledCube& cube, std::size_t pad, PadMode mode) {
  if (pad >= std::min(cube.height, cube.width)) {
    throw GeometryError("pad_cube: padding " + std::to_string(pad) + " must be smaller than the " +
                        std::to_string(cube.height) + "x" + std::to_string(cube.width) + " image");
  }
  LabeledCube out(cube.height + 2 * pad, cube.width + 2 * pad, cube.bands, cube.classes);
  const auto p = static_cast<std::ptrdiff_t>(pad);
  for (std::size_t r = 0; r < out.height; ++r) {
    const std::ptrdiff_t sr = static_cast<std::ptrdiff_t>(r) - p;
    const bool row_inside = sr >= 0 && sr < static_cast<std::ptrdiff_t>(cube.height);
    for (std::size_t c = 0; c < out.width; ++c) {
      const std::ptrdiff_t sc = static_cast<std::ptrdiff_t>(c) - p;
      const bool inside = row_inside && sc >= 0 && sc < static_cast<std::ptrdiff_t>(cube.width);
      if (inside) out.label(r, c) = cube.label(static_cast<std::size_t>(sr), static_cast<std::size_t>(sc));
      if (!inside && mode == PadMode::zero) continue;
      const std::size_t rr = reflect_index(sr, cube.height), cc = reflect_index(sc, cube.width);
      std::copy_n(cube.reflectance.data() + (rr * cube.width + cc) * cube.bands, cube.bands, &out.at(r, c, 0));
    }
  }
  return out;
}

PatchSet extract_patches(const LabeledCube& cube, std::size_t m, PadMode mode) {
  if (m % 2 == 0) throw GeometryError("extract_patches: patch size " + std::to_string(m) + " must be odd");
  const std::size_t half = (m - 1) / 2;
  const LabeledCube padded = pad_cube(cube, half, mode);
  PatchSet set;
  set.size = m;
  set.bands = cube.bands;
  for (std::size_t r = 0; r < cube.height; ++r)
    for (std::size_t c = 0; c < cube.width; ++c) {
      const int label = cube.label(r, c);
      if (label == 0) continue;
      set.labels.push_back(label);
      set.origin.push_back({r, c, r * cube.width + c});
      // Padded coordinates of the block's top-left corner are (r, c).
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < m; ++j) {
          const float* spectrum = padded.reflectance.data() + ((r + i) * padded.width + c + j) * padded.bands;
          set.patches.insert(set.patches.end(), spectrum, spectrum + cube.bands);
        }
    }
  return set;
}

Split stratified_split(const std::vector<int>& labels, const SplitSpec& spec) {
  const std::size_t total = spec.ratios[0] + spec.ratios[1] + spec.ratios[2];
  if (total == 0) throw ConfigError("split: ratios must not all be zero");
  const int max_label = labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end());
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(std::max(max_label, 0)) + 1);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 1) throw DomainError("split: label at index " + std::to_string(i) + " is not a class (>= 1)");
    by_class[static_cast<std::size_t>(labels[i])].push_back(i);
  }
  const std::size_t parts = static_cast<std::size_t>(std::count_if(spec.ratios.begin(), spec.ratios.end(),
                                                                   [](std::size_t r) { return r > 0; }));
  Split split;
  std::vector<std::size_t>* lists[3] = {&split.train, &split.val, &split.test};
  for (std::size_t k = 1; k < by_class.size(); ++k) {
    std::vector<std::size_t>& idx = by_class[k];
    if (idx.empty()) continue;
    Rng rng(derive_seed(spec.seed, k));
    rng.shuffle(idx);
    const std::size_t n = idx.size();
    std::array<std::size_t, 3> take{n * spec.ratios[0] / total, n * spec.ratios[1] / total, 0};
    take[2] = n - take[0] - take[1];
    if (n < parts) {
      take = {0, 0, 0};
      for (std::size_t i = 0; i < n; ++i) take[i] = 1;
      split.warnings.push_back("class " + std::to_string(k) + " has " + std::to_string(n) +
                               " samples, fewer than the split parts; assigned train, val, test in order");
    }
    std::size_t pos = 0;
    for (std::size_t part = 0; part < 3; ++part)
      for (std::size_t i = 0; i < take[part]; ++i) lists[part]->push_back(idx[pos++]);
  }
  for (auto* l : lists) std::sort(l->begin(), l->end());
  return split;
}

std::array<std::size_t, 3> parse_ratios(const std::string& text) {
  std::vector<std::string> fields;
  std::size_t pos = 0;
  for (std::size_t end; (end = text.find(':', pos)) != std::string::npos; pos = end + 1) fields.push_back(text.substr(pos, end - pos));
  fields.push_back(text.substr(pos));
  std::array<std::size_t, 3> out{};
  bool ok = fields.size() == 3;
  for (std::size_t i = 0; ok && i < 3; ++i) {
    ok = !fields[i].empty() && fields[i].size() <= 9 && fields[i].find_first_not_of("0123456789") == std::string::npos;
    if (ok) out[i] = std::stoul(fields[i]);
  }
  if (!ok || out[0] + out[1] + out[2] == 0) {
    throw ConfigError("split ratios must look like a:b:c with non-negative integers and a positive sum, got '" + text + "'");
  }
  return out;
}

Metrics compute_metrics(const std::vector<int>& truth, const std::vector<int>& pred, std::size_t classes) {
  if (truth.size() != pred.size()) {
    throw DimensionError("metrics: " + std::to_string(truth.size()) + " truth labels vs " +
                         std::to_string(pred.size()) + " predictions");
  }
  std::vector<std::size_t> confusion(classes * classes, 0);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 1 || pred[i] < 1 || static_cast<std::size_t>(truth[i]) > classes ||
        static_cast<std::size_t>(pred[i]) > classes) {
      throw DomainError("metrics: label outside 1.." + std::to_string(classes) + " at index " + std::to_string(i));
    }
    ++confusion[static_cast<std::size_t>(truth[i] - 1) * classes + static_cast<std::size_t>(pred[i] - 1)];
  }
  return metrics_from_confusion(std::move(confusion), classes);
}

Metrics metrics_from_confusion(std::vector<std::size_t> confusion, std::size_t classes) {
  if (confusion.size() != classes * classes) throw DimensionError("metrics: confusion matrix is not K x K");
  Metrics m;
  m.classes = classes;
  m.confusion = std::move(confusion);
  m.class_accuracy.assign(classes, std::numeric_limits<double>::quiet_NaN());
  std::size_t total = 0, diagonal = 0, present = 0;
  double recall_sum = 0.0;
  std::vector<std::size_t> row(classes, 0), col(classes, 0);
  for (std::size_t t = 0; t < classes; ++t)
    for (std::size_t p = 0; p < classes; ++p) {
      const std::size_t v = m.at(t, p);
      row[t] += v;
      col[p] += v;
      total += v;
      if (t == p) diagonal += v;
    }
  for (std::size_t k = 0; k < classes; ++k) {
    if (row[k] == 0) continue;
    m.class_accuracy[k] = static_cast<double>(m.at(k, k)) / static_cast<double>(row[k]);
    recall_sum += m.class_accuracy[k];
    ++present;
  }
  if (total == 0) return m;
  const double n = static_cast<double>(total);
  m.overall_accuracy = static_cast<double>(diagonal) / n;
  m.average_accuracy = recall_sum / static_cast<double>(present);
  // kappa = (N * diag - chance) / (N^2 - chance) in integer counts, so a single rounding.
  std::uint64_t chance = 0;
  for (std::size_t k = 0; k < classes; ++k) chance += static_cast<std::uint64_t>(row[k]) * col[k];
  const std::uint64_t square = static_cast<std::uint64_t>(total) * total;
  const auto agree = static_cast<std::int64_t>(static_cast<std::uint64_t>(total) * diagonal);
  // Chance agreement of 1 only happens when truth and prediction are one shared class.
  m.kappa = chance < square ? static_cast<double>(agree - static_cast<std::int64_t>(chance)) / static_cast<double>(square - chance)
                            : (diagonal == total ? 1.0 : 0.0);
  return m;
}

LabeledCube synth_cube(const SynthOptions& o) {
  if (o.classes < 2) throw DomainError("synth_cube: at least two classes are required");
  if (o.height == 0 || o.width == 0 || o.bands == 0) throw DomainError("synth_cube: dimensions must be positive");
  if (o.blob_count == 0) throw DomainError("synth_cube: blob_count must be positive");
  if (!(o.noise >= 0.0)) throw DomainError("synth_cube: noise must be non-negative");
  if (!(o.labeled_fraction > 0.0 && o.labeled_fraction <= 1.0)) throw DomainError("synth_cube: labeled_fraction must be in (0, 1]");
  Rng rng(o.seed);
  const auto bands = static_cast<double>(o.bands);

  // Spectra: a floor plus three Gaussian bumps; redrawn if too close to an earlier class.
  std::vector<std::vector<double>> signature;
  for (std::size_t k = 0; k < o.classes; ++k) {
    std::vector<double> s;
    for (int attempt = 0; attempt < 100; ++attempt) {
      s.assign(o.bands, rng.uniform(0.1, 0.3));
      for (int bump = 0; bump < 3; ++bump) {
        const double amp = rng.uniform(0.2, 0.8), center = rng.uniform(0.0, bands - 1.0);
        const double width = rng.uniform(bands / 10.0, bands / 3.0) + 0.5;
        for (std::size_t l = 0; l < o.bands; ++l) {
          const double d = (static_cast<double>(l) - center) / width;
          s[l] += amp * std::exp(-0.5 * d * d);
        }
      }
      double closest = std::numeric_limits<double>::infinity();
      for (const auto& other : signature) {
        double d = 0.0;
        for (std::size_t l = 0; l < o.bands; ++l) d += (s[l] - other[l]) * (s[l] - other[l]);
        closest = std::min(closest, std::sqrt(d / bands));
      }
      if (closest > 0.1) break;
    }
    signature.push_back(std::move(s));
  }

  struct Blob {
    double r, c, hr, hc;
    std::uint16_t label;
  };
  std::vector<Blob> blobs;
  const auto h = static_cast<double>(o.height), w = static_cast<double>(o.width);
  for (std::size_t i = 0; i < o.blob_count; ++i) {
    blobs.push_back({rng.uniform(0.0, h), rng.uniform(0.0, w), rng.uniform(h / 8.0, h / 3.0) + 0.5,
                     rng.uniform(w / 8.0, w / 3.0) + 0.5, static_cast<std::uint16_t>(i % o.classes + 1)});
  }

  LabeledCube cube(o.height, o.width, o.bands, o.classes);
  const std::size_t pixels = o.height * o.width;
  std::vector<double> depth(pixels);  // scaled Chebyshev distance to the owning blob's center
  std::vector<std::uint16_t> owner(pixels);
  for (std::size_t r = 0; r < o.height; ++r)
    for (std::size_t c = 0; c < o.width; ++c) {
      double best = std::numeric_limits<double>::infinity();
      for (const Blob& b : blobs) {
        const double d = std::max(std::abs(static_cast<double>(r) + 0.5 - b.r) / b.hr,
                                  std::abs(static_cast<double>(c) + 0.5 - b.c) / b.hc);
        if (d < best) {
          best = d;
          owner[r * o.width + c] = b.label;
        }
      }
      depth[r * o.width + c] = best;
    }
  std::vector<std::size_t> order(pixels);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return depth[a] < depth[b]; });
  const auto labeled = static_cast<std::size_t>(std::lround(o.labeled_fraction * static_cast<double>(pixels)));
  for (std::size_t i = 0; i < labeled; ++i) cube.labels[order[i]] = owner[order[i]];

  for (std::size_t p = 0; p < pixels; ++p) {
    const auto& s = signature[owner[p] - 1u];
    for (std::size_t l = 0; l < o.bands; ++l) {
      const double noise = o.noise > 0.0 ? rng.normal(0.0, o.noise) : 0.0;
      cube.reflectance[p * o.bands + l] = static_cast<float>(s[l] + noise);
    }
  }
  return cube;
}

std::vector<unsigned char> encode_cube(const LabeledCube& cube) {
  cube.validate();
  for (std::size_t v : {cube.height, cube.width, cube.bands, cube.classes}) {
    if (v > std::numeric_limits<std::uint32_t>::max()) throw FormatError("HSC1: dimension exceeds u32");
  }
  if (cube.classes > std::numeric_limits<std::uint16_t>::max()) throw FormatError("HSC1: class count exceeds u16 labels");
  std::vector<unsigned char> out{'H', 'S', 'C', '1'};
  out.reserve(kHeaderBytes + cube.reflectance.size() * 4 + cube.labels.size() * 2);
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(cube.height));
  put_u32(out, static_cast<std::uint32_t>(cube.width));
  put_u32(out, static_cast<std::uint32_t>(cube.bands));
  put_u32(out, static_cast<std::uint32_t>(cube.classes));
  for (float f : cube.reflectance) put_u32(out, std::bit_cast<std::uint32_t>(f));
  for (std::uint16_t l : cube.labels) {
    out.push_back(static_cast<unsigned char>(l));
    out.push_back(static_cast<unsigned char>(l >> 8));
  }
  return out;
}

LabeledCube decode_cube(const std::vector<unsigned char>& in) {
  if (in.size() < kHeaderBytes) {
    throw FormatError("HSC1: file ends at byte offset " + std::to_string(in.size()) + " inside the " +
                      std::to_string(kHeaderBytes) + "-byte header");
  }
  if (!(in[0] == 'H' && in[1] == 'S' && in[2] == 'C' && in[3] == '1')) throw FormatError("HSC1: bad magic at byte offset 0");
  const std::uint32_t version = get_u32(in, 4);
  if (version != kVersion) throw FormatError("HSC1: unsupported version " + std::to_string(version) + " at byte offset 4");
  const char* names[4] = {"height", "width", "bands", "classes"};
  std::size_t dims[4];
  for (std::size_t i = 0; i < 4; ++i) {
    dims[i] = get_u32(in, 8 + 4 * i);
    if (dims[i] == 0 && i < 3) {
      throw FormatError(std::string("HSC1: ") + names[i] + " at byte offset " + std::to_string(8 + 4 * i) +
                        " must be positive");
    }
  }
  const std::size_t pixels = checked_mul(dims[0], dims[1], 8);
  const std::size_t values = checked_mul(pixels, dims[2], 16);
  const std::size_t value_bytes = checked_mul(values, 4, 16);
  const std::size_t label_bytes = checked_mul(pixels, 2, 8);
  const std::size_t expected = kHeaderBytes + value_bytes + label_bytes;
  if (expected < value_bytes) throw FormatError("HSC1: dimensions at byte offset 8 overflow the addressable size");
  if (in.size() < expected) {
    throw FormatError("HSC1: truncated, expected " + std::to_string(expected) + " bytes but the file ends at byte offset " +
                      std::to_string(in.size()));
  }
  if (in.size() > expected) {
    throw FormatError("HSC1: " + std::to_string(in.size() - expected) + " trailing bytes after byte offset " +
                      std::to_string(expected));
  }
  LabeledCube cube(dims[0], dims[1], dims[2], dims[3]);
  for (std::size_t i = 0; i < values; ++i) {
    const std::size_t offset = kHeaderBytes + 4 * i;
    const float f = std::bit_cast<float>(get_u32(in, offset));
    if (!std::isfinite(f)) throw FormatError("HSC1: non-finite reflectance at byte offset " + std::to_string(offset));
    cube.reflectance[i] = f;
  }
  for (std::size_t i = 0; i < pixels; ++i) {
    const std::size_t offset = kHeaderBytes + value_bytes + 2 * i;
    const auto label = static_cast<std::uint16_t>(in[offset] | (in[offset + 1] << 8));
    if (label > cube.classes) {
      throw FormatError("HSC1: label " + std::to_string(label) + " at byte offset " + std::to_string(offset) +
                        " exceeds the class count " + std::to_string(cube.classes));
    }
    cube.labels[i] = label;
  }
  return cube;
}

void write_cube(const std::filesystem::path& path, const LabeledCube& cube) {
  const std::vector<unsigned char> bytes = encode_cube(cube);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("HSC1: cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("HSC1: write to " + path.string() + " failed");
}

LabeledCube read_cube(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("HSC1: cannot open " + path.string());
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_cube(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

BandStats band_statistics(const LabeledCube& cube, const std::vector<std::size_t>& pixels) {
  if (pixels.empty()) throw DomainError("band_statistics: no pixels given");
  BandStats stats;
  stats.mean.assign(cube.bands, 0.0);
  stats.stddev.assign(cube.bands, 0.0);
  for (std::size_t p : pixels) {
    if (p >= cube.height * cube.width) throw DimensionError("band_statistics: pixel index out of range");
    for (std::size_t l = 0; l < cube.bands; ++l) stats.mean[l] += cube.reflectance[p * cube.bands + l];
  }
  const auto n = static_cast<double>(pixels.size());
  for (double& m : stats.mean) m /= n;
  for (std::size_t p : pixels)
    for (std::size_t l = 0; l < cube.bands; ++l) {
      const double d = cube.reflectance[p * cube.bands + l] - stats.mean[l];
      stats.stddev[l] += d * d;
    }
  for (double& s : stats.stddev) {
    s = std::sqrt(s / n);
    if (!(s > 0.0)) s = 1.0;
  }
  return stats;
}

void standardize(PatchSet& patches, const BandStats& stats) {
  if (stats.mean.size() != patches.bands || stats.stddev.size() != patches.bands) {
    throw DimensionError("standardize: statistics cover " + std::to_string(stats.mean.size()) + " bands, patches have " +
                         std::to_string(patches.bands));
  }
  for (std::size_t i = 0; i < patches.patches.size(); ++i) {
    const std::size_t l = i % patches.bands;
    patches.patches[i] = (patches.patches[i] - stats.mean[l]) / stats.stddev[l];
  }
}

}  // namespace kanet
