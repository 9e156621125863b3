#include "kanet/train.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iterator>
#include <limits>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>

#include "kanet/random.hpp"

namespace kanet {

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fixed(double v, int digits) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& text, const std::string& where) {
  T value{};
  const char* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc{} || ptr != end) throw ConfigError(where + ": '" + text + "' is not a valid number");
  if constexpr (std::is_floating_point_v<T>) {
    if (!std::isfinite(value)) throw ConfigError(where + ": '" + text + "' is not finite");
  }
  return value;
}

std::vector<std::size_t> parse_list(const std::string& text, const std::string& where) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) out.push_back(parse_number<std::size_t>(trim(item), where));
  if (out.empty()) throw ConfigError(where + ": empty list");
  return out;
}

std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

const char* sharing_name(GridSharing g) {
  switch (g) {
    case GridSharing::per_feature: return "per_feature";
    case GridSharing::per_group: return "per_group";
    case GridSharing::per_layer: return "per_layer";
  }
  return "?";
}

// Setter per key; each receives the raw value text and a location for messages.
using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

const std::vector<std::pair<std::string, Setter>>& setters() {
  static const std::vector<std::pair<std::string, Setter>> table = {
      {"epochs", [](RunConfig& c, const std::string& v, const std::string& w) { c.train.epochs = parse_number<std::size_t>(v, w); }},
      {"batch_size", [](RunConfig& c, const std::string& v, const std::string& w) { c.train.batch_size = parse_number<std::size_t>(v, w); }},
      {"learning_rate", [](RunConfig& c, const std::string& v, const std::string& w) { c.train.learning_rate = parse_number<double>(v, w); }},
      {"beta1", [](RunConfig& c, const std::string& v, const std::string& w) { c.train.beta1 = parse_number<double>(v, w); }},
      {"beta2", [](RunConfig& c, const std::string& v, const std::string& w) { c.train.beta2 = parse_number<double>(v, w); }},
      {"eps", [](RunConfig& c, const std::string& v, const std::string& w) { c.train.eps = parse_number<double>(v, w); }},
      {"grid_update_every", [](RunConfig& c, const std::string& v, const std::string& w) { c.train.grid_update_every = parse_number<std::size_t>(v, w); }},
      {"seed", [](RunConfig& c, const std::string& v, const std::string& w) { c.train.seed = parse_number<std::uint64_t>(v, w); }},
      {"precision", [](RunConfig& c, const std::string& v, const std::string& w) { c.train.precision = parse_number<int>(v, w); }},
      {"calibration_size", [](RunConfig& c, const std::string& v, const std::string& w) { c.train.calibration_size = parse_number<std::size_t>(v, w); }},
      {"grid_rows", [](RunConfig& c, const std::string& v, const std::string& w) { c.train.grid_rows = parse_number<std::size_t>(v, w); }},
      {"stages", [](RunConfig& c, const std::string& v, const std::string& w) { c.network.stages = parse_list(v, w); }},
      {"k0", [](RunConfig& c, const std::string& v, const std::string& w) { c.network.k0 = parse_number<std::size_t>(v, w); }},
      {"grid_size", [](RunConfig& c, const std::string& v, const std::string& w) { c.network.grid_size = parse_number<int>(v, w); }},
      {"spline_order", [](RunConfig& c, const std::string& v, const std::string& w) { c.network.spline_order = parse_number<int>(v, w); }},
      {"epsilon", [](RunConfig& c, const std::string& v, const std::string& w) { c.network.epsilon = parse_number<double>(v, w); }},
      {"margin", [](RunConfig& c, const std::string& v, const std::string& w) { c.network.margin = parse_number<double>(v, w); }},
      {"noise_scale", [](RunConfig& c, const std::string& v, const std::string& w) { c.network.noise_scale = parse_number<double>(v, w); }},
      {"grid_sharing", [](RunConfig& c, const std::string& v, const std::string& w) {
         if (v == "per_feature") c.network.grid_sharing = GridSharing::per_feature;
         else if (v == "per_group") c.network.grid_sharing = GridSharing::per_group;
         else if (v == "per_layer") c.network.grid_sharing = GridSharing::per_layer;
         else throw ConfigError(w + ": grid_sharing must be per_feature, per_group or per_layer, got '" + v + "'");
       }},
      {"patch", [](RunConfig& c, const std::string& v, const std::string& w) {
         const auto p = parse_list(v, w);
         if (p.size() != 3) throw ConfigError(w + ": patch needs three extents M,N,L");
         c.network.patch = {p[0], p[1], p[2]};
       }},
      {"classes", [](RunConfig& c, const std::string& v, const std::string& w) { c.network.classes = parse_number<std::size_t>(v, w); }},
      {"bottleneck_factor", [](RunConfig& c, const std::string& v, const std::string& w) { c.network.bottleneck_factor = parse_number<std::size_t>(v, w); }},
      {"compression", [](RunConfig& c, const std::string& v, const std::string& w) { c.network.compression = parse_number<double>(v, w); }},
      {"head", [](RunConfig& c, const std::string& v, const std::string& w) {
         if (v == "linear") c.network.head = HeadKind::linear;
         else if (v == "kan") c.network.head = HeadKind::kan;
         else throw ConfigError(w + ": head must be linear or kan, got '" + v + "'");
       }},
  };
  return table;
}

std::string network_text(const NetworkConfig& n) {
  std::string s;
  s += "stages = " + join(n.stages) + "\n";
  s += "k0 = " + std::to_string(n.k0) + "\n";
  s += "grid_size = " + std::to_string(n.grid_size) + "\n";
  s += "spline_order = " + std::to_string(n.spline_order) + "\n";
  s += "epsilon = " + fmt(n.epsilon) + "\n";
  s += "margin = " + fmt(n.margin) + "\n";
  s += "noise_scale = " + fmt(n.noise_scale) + "\n";
  s += std::string("grid_sharing = ") + sharing_name(n.grid_sharing) + "\n";
  s += "patch = " + join({n.patch[0], n.patch[1], n.patch[2]}) + "\n";
  s += "classes = " + std::to_string(n.classes) + "\n";
  s += "bottleneck_factor = " + std::to_string(n.bottleneck_factor) + "\n";
  s += "compression = " + fmt(n.compression) + "\n";
  s += std::string("head = ") + (n.head == HeadKind::kan ? "kan" : "linear") + "\n";
  return s;
}

bool all_finite(const Tensor& t) {
  return std::all_of(t.data().begin(), t.data().end(), [](double v) { return std::isfinite(v); });
}

// Little-endian writer and positioned reader for the checkpoint container.
struct Writer {
  std::vector<unsigned char> bytes;
  void u32(std::uint32_t v) {
    for (int s = 0; s < 32; s += 8) bytes.push_back(static_cast<unsigned char>(v >> s));
  }
  void u64(std::uint64_t v) {
    for (int s = 0; s < 64; s += 8) bytes.push_back(static_cast<unsigned char>(v >> s));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes.insert(bytes.end(), s.begin(), s.end());
  }
};

struct Reader {
  const std::vector<unsigned char>& bytes;
  std::size_t pos = 0;

  void need(std::size_t n, const char* what) {
    if (bytes.size() - pos < n) {
      throw FormatError("KANC: truncated at byte offset " + std::to_string(pos) + " reading " + what + ": need " +
                        std::to_string(n) + " bytes, " + std::to_string(bytes.size() - pos) + " remain");
    }
  }
  std::uint64_t uint(int width, const char* what) {
    need(static_cast<std::size_t>(width), what);
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(bytes[pos + static_cast<std::size_t>(i)]) << (8 * i);
    pos += static_cast<std::size_t>(width);
    return v;
  }
  std::uint32_t u32(const char* what) { return static_cast<std::uint32_t>(uint(4, what)); }
  std::uint64_t u64(const char* what) { return uint(8, what); }
  double f64(const char* what) { return std::bit_cast<double>(u64(what)); }
  std::string str(const char* what) {
    const std::size_t n = u32(what);
    need(n, what);
    std::string s(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.begin() + static_cast<std::ptrdiff_t>(pos + n));
    pos += n;
    return s;
  }
};

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("train: learning_rate must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("train: beta1 and beta2 must be in [0, 1)");
  if (!(eps > 0.0)) throw ConfigError("train: eps must be > 0");
  if (precision == 32) throw ConfigError("train: precision 32 is not supported; this build computes in 64-bit only");
  if (precision != 64) throw ConfigError("train: precision must be 32 or 64, got " + std::to_string(precision));
  if (calibration_size < 1) throw ConfigError("train: calibration_size must be >= 1");
  if (grid_rows < 1) throw ConfigError("train: grid_rows must be >= 1");
}

RunConfig parse_config(const std::string& text, const RunConfig& base) {
  RunConfig config = base;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = "config line " + std::to_string(line_no);
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    const auto& table = setters();
    const auto it = std::find_if(table.begin(), table.end(), [&](const auto& e) { return e.first == key; });
    if (it == table.end()) throw ConfigError(where + ": unknown key '" + key + "'");
    if (!seen.insert(key).second) throw ConfigError(where + ": key '" + key + "' given twice");
    if (value.empty()) throw ConfigError(where + ": key '" + key + "' has no value");
    it->second(config, value, where + " (" + key + ")");
  }
  config.train.validate();
  return config;
}

RunConfig load_config(const std::filesystem::path& path, const RunConfig& base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config(ss.str(), base);
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string format_config(const RunConfig& c) {
  const TrainConfig& t = c.train;
  std::string s;
  s += "epochs = " + std::to_string(t.epochs) + "\n";
  s += "batch_size = " + std::to_string(t.batch_size) + "\n";
  s += "learning_rate = " + fmt(t.learning_rate) + "\n";
  s += "beta1 = " + fmt(t.beta1) + "\n";
  s += "beta2 = " + fmt(t.beta2) + "\n";
  s += "eps = " + fmt(t.eps) + "\n";
  s += "grid_update_every = " + std::to_string(t.grid_update_every) + "\n";
  s += "seed = " + std::to_string(t.seed) + "\n";
  s += "precision = " + std::to_string(t.precision) + "\n";
  s += "calibration_size = " + std::to_string(t.calibration_size) + "\n";
  s += "grid_rows = " + std::to_string(t.grid_rows) + "\n";
  return s + network_text(c.network);
}

Adam::Adam(std::vector<Parameter*> params, const TrainConfig& config, std::vector<std::string> names)
    : params_(std::move(params)), names_(std::move(names)), lr_(config.learning_rate), beta1_(config.beta1),
      beta2_(config.beta2), eps_(config.eps) {
  if (names_.empty())
    for (Parameter* p : params_) names_.push_back(p->name);
  if (names_.size() != params_.size()) throw DimensionError("adam: one name per parameter is required");
  for (Parameter* p : params_) {
    m_.emplace_back(p->value.shape());
    v_.emplace_back(p->value.shape());
  }
  counts_.assign(params_.size(), 0);
}

void Adam::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i]->grad.shape() != params_[i]->value.shape()) throw DimensionError("adam: gradient shape of " + names_[i]);
    if (!all_finite(params_[i]->grad)) throw NumericError("adam: non-finite gradient in " + names_[i]);
  }
  ++steps_;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const double t = static_cast<double>(++counts_[i]);
    const double c1 = 1.0 - std::pow(beta1_, t), c2 = 1.0 - std::pow(beta2_, t);
    auto value = params_[i]->value.data();
    const auto grad = params_[i]->grad.data();
    auto m = m_[i].data(), v = v_[i].data();
    for (std::size_t j = 0; j < value.size(); ++j) {
      const double g = grad[j];
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g;
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g * g;
      value[j] -= lr_ * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
    }
  }
}

void Adam::reset_spline_moments() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i]->kind != ParamKind::spline_coefficients) continue;
    m_[i].fill(0.0);
    v_[i].fill(0.0);
    counts_[i] = 0;
  }
}

LossResult cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
  if (logits.rank() != 2 || logits.extent(0) != targets.size() || logits.extent(0) == 0) {
    throw DimensionError("cross_entropy: logits " + shape_string(logits.shape()) + " vs " +
                         std::to_string(targets.size()) + " targets");
  }
  const std::size_t b = logits.extent(0), k = logits.extent(1);
  LossResult r;
  r.grad = Tensor({b, k});
  r.predictions.resize(b);
  const double inv_b = 1.0 / static_cast<double>(b);
  for (std::size_t i = 0; i < b; ++i) {
    if (targets[i] < 1 || static_cast<std::size_t>(targets[i]) > k) {
      throw DomainError("cross_entropy: target " + std::to_string(targets[i]) + " at row " + std::to_string(i) +
                        " outside 1.." + std::to_string(k));
    }
    const double* z = logits.data().data() + i * k;
    const std::size_t arg = static_cast<std::size_t>(std::max_element(z, z + k) - z);
    const double top = z[arg];
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) sum += std::exp(z[j] - top);
    const double lse = top + std::log(sum);
    const std::size_t t = static_cast<std::size_t>(targets[i] - 1);
    r.loss += (lse - z[t]) * inv_b;
    for (std::size_t j = 0; j < k; ++j) r.grad.at(i, j) = (std::exp(z[j] - lse) - (j == t ? 1.0 : 0.0)) * inv_b;
    r.predictions[i] = static_cast<int>(arg) + 1;
    if (arg == t) ++r.correct;
  }
  return r;
}

Dataset prepare_dataset(const LabeledCube& cube, std::size_t patch, const SplitSpec& split) {
  cube.validate();
  Dataset d;
  d.patches = extract_patches(cube, patch);
  if (d.patches.count() == 0) throw DomainError("dataset: the cube has no labeled pixels");
  d.split = stratified_split(d.patches.labels, split);
  if (d.split.train.empty()) throw DomainError("dataset: the split leaves no training samples");
  std::vector<std::size_t> pixels;
  for (std::size_t i : d.split.train) pixels.push_back(d.patches.origin[i][2]);
  d.stats = band_statistics(cube, pixels);
  standardize(d.patches, d.stats);
  d.classes = cube.classes;
  d.height = cube.height;
  d.width = cube.width;
  return d;
}

Tensor gather_batch(const PatchSet& patches, const std::vector<std::size_t>& indices, std::vector<int>* labels) {
  const std::size_t volume = patches.patch_volume();
  Tensor x({indices.size(), 1, patches.size, patches.size, patches.bands});
  double* out = x.data().data();
  if (labels) labels->clear();
  for (std::size_t n = 0; n < indices.size(); ++n) {
    const std::size_t i = indices[n];
    if (i >= patches.count()) throw DimensionError("gather_batch: sample index out of range");
    std::copy_n(patches.patch(i), volume, out + n * volume);
    if (labels) labels->push_back(patches.labels[i]);
  }
  return x;
}

Checkpoint Checkpoint::capture(Model& model, const BandStats& stats) {
  Checkpoint c;
  c.network = model.config();
  c.stats = stats;
  model.visit_state([&](const std::string& name, Tensor& t) { c.state.emplace_back(name, t); });
  return c;
}

Model Checkpoint::restore() const {
  Model model(network, 0);
  std::size_t i = 0;
  model.visit_state([&](const std::string& name, Tensor& t) {
    if (i >= state.size()) throw FormatError("checkpoint: missing state entry '" + name + "'");
    const auto& [saved_name, saved] = state[i++];
    if (saved_name != name) throw FormatError("checkpoint: expected state '" + name + "', found '" + saved_name + "'");
    if (saved.shape() != t.shape()) {
      throw FormatError("checkpoint: state '" + name + "' has shape " + shape_string(saved.shape()) + ", network needs " +
                        shape_string(t.shape()));
    }
    t = saved;
  });
  if (i != state.size()) throw FormatError("checkpoint: " + std::to_string(state.size() - i) + " unused state entries");
  return model;
}

std::vector<unsigned char> encode_checkpoint(const Checkpoint& c) {
  Writer w;
  w.bytes = {'K', 'A', 'N', 'C'};
  w.u32(1);
  w.str(network_text(c.network));
  if (c.stats.mean.size() != c.stats.stddev.size()) throw DimensionError("checkpoint: band statistics disagree in length");
  w.u32(static_cast<std::uint32_t>(c.stats.mean.size()));
  for (double v : c.stats.mean) w.f64(v);
  for (double v : c.stats.stddev) w.f64(v);
  w.u32(static_cast<std::uint32_t>(c.state.size()));
  for (const auto& [name, t] : c.state) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) w.u64(d);
    for (double v : t.data()) w.f64(v);
  }
  return std::move(w.bytes);
}

Checkpoint decode_checkpoint(const std::vector<unsigned char>& bytes) {
  Reader r{bytes};
  r.need(4, "magic");
  if (!(bytes[0] == 'K' && bytes[1] == 'A' && bytes[2] == 'N' && bytes[3] == 'C')) throw FormatError("KANC: bad magic at byte offset 0");
  r.pos = 4;
  if (const auto version = r.u32("version"); version != 1) {
    throw FormatError("KANC: unsupported version " + std::to_string(version) + " at byte offset 4");
  }
  Checkpoint c;
  const std::size_t config_at = r.pos;
  try {
    c.network = parse_config(r.str("network config")).network;
  } catch (const ConfigError& e) {
    throw FormatError("KANC: bad network config at byte offset " + std::to_string(config_at) + ": " + e.what());
  }
  const std::size_t bands = r.u32("band count");
  r.need(bands * 16, "band statistics");
  for (std::size_t i = 0; i < bands; ++i) c.stats.mean.push_back(r.f64("band mean"));
  for (std::size_t i = 0; i < bands; ++i) c.stats.stddev.push_back(r.f64("band stddev"));
  const std::size_t count = r.u32("state count");
  for (std::size_t i = 0; i < count; ++i) {
    std::string name = r.str("state name");
    const std::size_t rank_at = r.pos;
    const std::size_t rank = r.u32("rank");
    if (rank > 8) throw FormatError("KANC: rank " + std::to_string(rank) + " at byte offset " + std::to_string(rank_at));
    Shape shape;
    std::size_t size = 1;
    for (std::size_t d = 0; d < rank; ++d) {
      const std::size_t dim_at = r.pos;
      shape.push_back(r.u64("extent"));
      if (shape.back() != 0 && size > (bytes.size() / 8) / shape.back()) {
        throw FormatError("KANC: extent at byte offset " + std::to_string(dim_at) + " exceeds the file size");
      }
      size *= shape.back();
    }
    r.need(size * 8, "tensor values");
    Tensor t(shape);
    for (double& v : t.data()) v = r.f64("tensor value");
    c.state.emplace_back(std::move(name), std::move(t));
  }
  if (r.pos != bytes.size()) {
    throw FormatError("KANC: " + std::to_string(bytes.size() - r.pos) + " trailing bytes after byte offset " +
                      std::to_string(r.pos));
  }
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  const auto bytes = encode_checkpoint(checkpoint);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("KANC: cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("KANC: write to " + path.string() + " failed");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("KANC: cannot open " + path.string());
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_checkpoint(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

std::vector<int> predict(Model& model, const PatchSet& patches, const std::vector<std::size_t>& indices,
                         std::size_t batch_size) {
  std::vector<int> out;
  out.reserve(indices.size());
  for (std::size_t start = 0; start < indices.size(); start += batch_size) {
    const std::vector<std::size_t> chunk(indices.begin() + static_cast<std::ptrdiff_t>(start),
                                         indices.begin() + static_cast<std::ptrdiff_t>(std::min(indices.size(), start + batch_size)));
    const Tensor logits = model.forward(gather_batch(patches, chunk), Mode::eval);
    const std::size_t k = logits.extent(1);
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      const double* z = logits.data().data() + i * k;
      out.push_back(static_cast<int>(std::max_element(z, z + k) - z) + 1);
    }
  }
  return out;
}

namespace {

struct Pass {
  double loss = 0.0;
  double accuracy = 0.0;
};

Pass evaluate_split(Model& model, const PatchSet& patches, const std::vector<std::size_t>& indices, std::size_t batch) {
  Pass p;
  if (indices.empty()) return p;
  std::size_t correct = 0;
  std::vector<int> labels;
  for (std::size_t start = 0; start < indices.size(); start += batch) {
    const std::vector<std::size_t> chunk(indices.begin() + static_cast<std::ptrdiff_t>(start),
                                         indices.begin() + static_cast<std::ptrdiff_t>(std::min(indices.size(), start + batch)));
    const Tensor x = gather_batch(patches, chunk, &labels);
    const LossResult r = cross_entropy(model.forward(x, Mode::eval), labels);
    p.loss += r.loss * static_cast<double>(chunk.size());
    correct += r.correct;
  }
  p.loss /= static_cast<double>(indices.size());
  p.accuracy = static_cast<double>(correct) / static_cast<double>(indices.size());
  return p;
}

}  // namespace

TrainResult train(const RunConfig& config, const Dataset& data, std::ostream* log) {
  const TrainConfig& tc = config.train;
  tc.validate();
  NetworkConfig net = config.network;
  net.patch = {data.patches.size, data.patches.size, data.patches.bands};
  net.classes = data.classes;
  net.validate();

  Model model(net, tc.seed);
  std::vector<Parameter*> params = model.parameters();
  std::vector<std::string> names(params.size());
  model.visit_state([&](const std::string& name, Tensor& t) {
    for (std::size_t i = 0; i < params.size(); ++i)
      if (&params[i]->value == &t) names[i] = name;
  });
  Adam adam(params, tc, names);

  TrainResult result;
  result.report.parameter_count = model.parameter_count();
  result.report.warnings = data.split.warnings;

  std::vector<std::size_t> calibration = data.split.train;
  Rng(derive_seed(tc.seed, 1)).shuffle(calibration);
  calibration.resize(std::min(calibration.size(), tc.calibration_size));
  std::sort(calibration.begin(), calibration.end());
  const Tensor calibration_batch = gather_batch(data.patches, calibration);
  const std::size_t grid_phase = (tc.epochs + 3) / 4;

  bool have_best = false;
  std::vector<int> labels;
  for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    std::vector<std::size_t> order = data.split.train;
    Rng(derive_seed(tc.seed, 1000 + epoch)).shuffle(order);
    double loss_sum = 0.0;
    std::size_t correct = 0, step = 0;
    for (std::size_t start = 0; start < order.size(); start += tc.batch_size, ++step) {
      const std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(start),
                                           order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + tc.batch_size)));
      const Tensor x = gather_batch(data.patches, batch, &labels);
      model.zero_grad();
      const LossResult r = cross_entropy(model.forward(x, Mode::train), labels);
      if (!std::isfinite(r.loss)) {
        throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) + " step " + std::to_string(step));
      }
      model.backward(r.grad);
      adam.step();
      loss_sum += r.loss * static_cast<double>(batch.size());
      correct += r.correct;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    rec.train_accuracy = static_cast<double>(correct) / static_cast<double>(order.size());
    if (tc.grid_update_every > 0 && epoch <= grid_phase && epoch % tc.grid_update_every == 0) {
      model.update_grids(calibration_batch, net.grid_update(), tc.grid_rows, derive_seed(tc.seed, 2000 + epoch));
      adam.reset_spline_moments();
      rec.grid_updated = true;
    }
    const Pass val = evaluate_split(model, data.patches, data.split.val, 64);
    rec.val_loss = val.loss;
    rec.val_accuracy = val.accuracy;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    result.report.epochs.push_back(rec);

    // Without a validation split the last epoch is kept.
    if (!have_best || data.split.val.empty() || rec.val_accuracy > result.report.best_val_accuracy) {
      have_best = true;
      result.report.best_epoch = epoch;
      result.report.best_val_accuracy = rec.val_accuracy;
      result.checkpoint = Checkpoint::capture(model, data.stats);
    }
    if (log) {
      *log << "epoch " << epoch << "/" << tc.epochs << "  loss " << fixed(rec.train_loss, 4) << "  acc "
           << fixed(rec.train_accuracy, 4) << "  val_loss " << fixed(rec.val_loss, 4) << "  val_acc "
           << fixed(rec.val_accuracy, 4) << (rec.grid_updated ? "  [grid]" : "") << "  " << fixed(rec.seconds, 2)
           << "s\n";
      log->flush();
    }
  }

  Model best = result.checkpoint.restore();
  std::vector<int> truth;
  for (std::size_t i : data.split.test) truth.push_back(data.patches.labels[i]);
  result.report.test = compute_metrics(truth, predict(best, data.patches, data.split.test), data.classes);
  return result;
}

Evaluation evaluate(const Checkpoint& checkpoint, const LabeledCube& cube) {
  const NetworkConfig& net = checkpoint.network;
  if (cube.bands != net.patch[2] || checkpoint.stats.mean.size() != cube.bands) {
    throw DimensionError("evaluate: checkpoint expects " + std::to_string(net.patch[2]) + " bands, cube has " +
                         std::to_string(cube.bands));
  }
  if (cube.classes != net.classes) {
    throw DimensionError("evaluate: checkpoint has " + std::to_string(net.classes) + " classes, cube has " +
                         std::to_string(cube.classes));
  }
  if (net.patch[0] != net.patch[1]) throw GeometryError("evaluate: only square patches can be cut from a cube");
  cube.validate();
  PatchSet patches = extract_patches(cube, net.patch[0]);
  standardize(patches, checkpoint.stats);
  Model model = checkpoint.restore();
  std::vector<std::size_t> all(patches.count());
  std::iota(all.begin(), all.end(), 0);
  const std::vector<int> pred = predict(model, patches, all);
  Evaluation e;
  e.metrics = compute_metrics(patches.labels, pred, net.classes);
  e.height = cube.height;
  e.width = cube.width;
  e.class_map.assign(cube.height * cube.width, 0);
  for (std::size_t i = 0; i < pred.size(); ++i) e.class_map[patches.origin[i][2]] = static_cast<std::uint16_t>(pred[i]);
  return e;
}

std::string epochs_csv(const RunReport& report) {
  std::string s = "epoch,train_loss,train_acc,val_loss,val_acc,grid_update,seconds\n";
  for (const EpochRecord& r : report.epochs) {
    s += std::to_string(r.epoch) + "," + fmt(r.train_loss) + "," + fmt(r.train_accuracy) + "," + fmt(r.val_loss) + "," +
         fmt(r.val_accuracy) + "," + (r.grid_updated ? "1" : "0") + "," + fixed(r.seconds, 3) + "\n";
  }
  return s;
}

std::string format_report(const RunReport& report) {
  const Metrics& m = report.test;
  std::string s;
  s += "parameters: " + std::to_string(report.parameter_count) + "\n";
  s += "epochs: " + std::to_string(report.epochs.size()) + "\n";
  s += "best_epoch: " + std::to_string(report.best_epoch) + "\n";
  s += "best_val_accuracy: " + fmt(report.best_val_accuracy) + "\n";
  s += "test_samples: " + std::to_string(std::accumulate(m.confusion.begin(), m.confusion.end(), std::size_t{0})) + "\n";
  s += "test_overall_accuracy: " + fmt(m.overall_accuracy) + "\n";
  s += "test_average_accuracy: " + fmt(m.average_accuracy) + "\n";
  s += "test_kappa: " + fmt(m.kappa) + "\n";
  for (const auto& w : report.warnings) s += "warning: " + w + "\n";
  s += "\nclass  support  accuracy\n";
  for (std::size_t k = 0; k < m.classes; ++k) {
    std::size_t support = 0;
    for (std::size_t p = 0; p < m.classes; ++p) support += m.at(k, p);
    s += std::to_string(k + 1) + "  " + std::to_string(support) + "  " +
         (std::isnan(m.class_accuracy[k]) ? std::string("n/a") : fmt(m.class_accuracy[k])) + "\n";
  }
  s += "\nconfusion (rows = truth)\n";
  for (std::size_t t = 0; t < m.classes; ++t) {
    for (std::size_t p = 0; p < m.classes; ++p) s += (p ? " " : "") + std::to_string(m.at(t, p));
    s += "\n";
  }
  s += "\nepoch  train_loss  train_acc  val_loss  val_acc  grid_update\n";
  for (const EpochRecord& r : report.epochs) {
    s += std::to_string(r.epoch) + "  " + fmt(r.train_loss) + "  " + fmt(r.train_accuracy) + "  " + fmt(r.val_loss) +
         "  " + fmt(r.val_accuracy) + "  " + (r.grid_updated ? "1" : "0") + "\n";
  }
  return s;
}

void write_pgm(const std::filesystem::path& path, std::size_t height, std::size_t width,
               const std::vector<std::uint16_t>& pixels) {
  if (pixels.size() != height * width) throw DimensionError("write_pgm: pixel count does not match the raster");
  const std::uint16_t top = pixels.empty() ? 1 : std::max<std::uint16_t>(1, *std::max_element(pixels.begin(), pixels.end()));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out << "P5\n" << width << " " << height << "\n" << top << "\n";
  for (std::uint16_t p : pixels) {
    if (top > 255) out.put(static_cast<char>(p >> 8));
    out.put(static_cast<char>(p & 0xff));
  }
  if (!out) throw FormatError("write to " + path.string() + " failed");
}

}  // namespace kanet
