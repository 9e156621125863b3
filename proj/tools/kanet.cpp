// kanet: synthetic data, training, evaluation and the small numerical experiments.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "kanet/errors.hpp"
#include "kanet/experiments.hpp"
#include "kanet/train.hpp"

namespace fs = std::filesystem;
using namespace kanet;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw FormatError("cannot write " + path.string());
}

std::string fixed(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

int run_synth(const SynthOptions& options, const fs::path& out) {
  const LabeledCube cube = synth_cube(options);
  write_cube(out, cube);
  std::size_t labeled = 0;
  for (auto l : cube.labels) labeled += l != 0;
  std::cout << "wrote " << out.string() << ": " << cube.height << "x" << cube.width << "x" << cube.bands << ", "
            << cube.classes << " classes, " << labeled << " labeled pixels\n";
  return 0;
}

struct TrainArgs {
  fs::path cube;
  std::size_t patch = 7;
  std::string split = "6:1:3";
  fs::path config;
  std::uint64_t seed = 0;
  bool seed_given = false;
  fs::path out = "run";
};

int run_train(const TrainArgs& a) {
  RunConfig rc;
  if (!a.config.empty()) rc = load_config(a.config);
  if (a.seed_given) rc.train.seed = a.seed;
  const LabeledCube cube = read_cube(a.cube);
  const Dataset data = prepare_dataset(cube, a.patch, SplitSpec{parse_ratios(a.split), rc.train.seed});
  std::cout << "samples: train " << data.split.train.size() << ", val " << data.split.val.size() << ", test "
            << data.split.test.size() << "\n";
  for (const auto& w : data.split.warnings) std::cerr << "warning: " << w << "\n";

  const TrainResult result = train(rc, data, &std::cout);
  fs::create_directories(a.out);
  save_checkpoint(a.out / "checkpoint.kanc", result.checkpoint);
  write_text(a.out / "report.txt", format_report(result.report));
  write_text(a.out / "epochs.csv", epochs_csv(result.report));
  RunConfig used = rc;
  used.network = result.checkpoint.network;
  write_text(a.out / "config.txt", format_config(used));
  std::cout << "test OA " << fixed(result.report.test.overall_accuracy) << ", AA "
            << fixed(result.report.test.average_accuracy) << ", kappa " << fixed(result.report.test.kappa) << "\n"
            << "wrote " << (a.out / "checkpoint.kanc").string() << ", report.txt, epochs.csv, config.txt\n";
  return 0;
}

int run_eval(const fs::path& checkpoint, const fs::path& cube_path, fs::path map) {
  const Evaluation e = evaluate(load_checkpoint(checkpoint), read_cube(cube_path));
  std::cout << "overall_accuracy: " << fixed(e.metrics.overall_accuracy) << "\n"
            << "average_accuracy: " << fixed(e.metrics.average_accuracy) << "\n"
            << "kappa: " << fixed(e.metrics.kappa) << "\n";
  for (std::size_t k = 0; k < e.metrics.classes; ++k) {
    std::cout << "class " << k + 1 << ": " << fixed(e.metrics.class_accuracy[k]) << "\n";
  }
  if (map.empty()) map = fs::path(checkpoint).replace_extension(".pgm");
  write_pgm(map, e.height, e.width, e.class_map);
  std::cout << "class map: " << map.string() << "\n";
  return 0;
}

int run_gradcheck(const std::string& layer, double tolerance) {
  bool ok = true;
  for (const GradCheckEntry& e : gradcheck_suite(layer, tolerance)) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%-16s max_rel_err %.3e  coords %6zu  %s\n", e.layer.c_str(), e.max_relative_error,
                  e.coordinates, e.passed ? "PASS" : "FAIL");
    std::cout << buf;
    ok = ok && e.passed;
  }
  return ok ? 0 : 1;
}

int run_scaling(const ScalingConfig& c, const fs::path& out) {
  const ScalingResult r = scaling_experiment(c);
  const std::string csv = scaling_csv(r);
  if (out.empty()) {
    std::cout << csv;
  } else {
    write_text(out, csv);
    std::cout << "wrote " << out.string() << "\n";
  }
  std::cout << "kan slope " << r.kan_slope << ", mlp slope " << r.mlp_slope << " (N^-4 would be -4)\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"KAN-DenseNet hyperspectral classifier"};
  app.require_subcommand(1);

  SynthOptions synth;
  fs::path synth_out = "synth.hsc";
  auto* s = app.add_subcommand("synth", "Write a synthetic HSC1 cube");
  s->add_option("--out", synth_out, "Output file")->capture_default_str();
  s->add_option("--classes", synth.classes)->capture_default_str();
  s->add_option("--height", synth.height)->capture_default_str();
  s->add_option("--width", synth.width)->capture_default_str();
  s->add_option("--bands", synth.bands)->capture_default_str();
  s->add_option("--blobs", synth.blob_count)->capture_default_str();
  s->add_option("--noise", synth.noise)->capture_default_str();
  s->add_option("--labeled-fraction", synth.labeled_fraction)->capture_default_str();
  s->add_option("--seed", synth.seed)->capture_default_str();

  TrainArgs ta;
  auto* t = app.add_subcommand("train", "Train on an HSC1 cube");
  t->add_option("--cube", ta.cube, "HSC1 cube")->required();
  t->add_option("--patch", ta.patch, "Odd patch size M")->capture_default_str();
  t->add_option("--split", ta.split, "train:val:test ratios")->capture_default_str();
  t->add_option("--config", ta.config, "key = value config file");
  auto* seed_opt = t->add_option("--seed", ta.seed, "Overrides the config seed");
  t->add_option("--out", ta.out, "Output directory")->capture_default_str();

  fs::path ckpt, eval_cube, map;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on every labeled pixel");
  e->add_option("--checkpoint", ckpt)->required();
  e->add_option("--cube", eval_cube)->required();
  e->add_option("--map", map, "PGM class map (default: next to the checkpoint)");

  std::string layer;
  double tolerance = 1e-4;
  auto* g = app.add_subcommand("gradcheck", "Finite-difference checks of every layer");
  g->add_option("--layer", layer)->check(CLI::IsMember(gradcheck_layers()));
  g->add_option("--tolerance", tolerance)->capture_default_str();

  ScalingConfig sc;
  fs::path scaling_out;
  auto* sl = app.add_subcommand("scaling", "Loss vs parameter count for KAN and MLP regression");
  sl->add_option("--out", scaling_out, "CSV file (default: stdout)");
  sl->add_option("--steps", sc.steps)->capture_default_str();
  sl->add_option("--seed", sc.seed)->capture_default_str();

  GridDemoConfig gd;
  auto* d = app.add_subcommand("grid-demo", "Grid update on a two-mode sample");
  d->add_option("--epsilon", gd.epsilon)->capture_default_str();
  d->add_option("--grid-size", gd.grid_size)->capture_default_str();
  d->add_option("--seed", gd.seed)->capture_default_str();

  CLI11_PARSE(app, argc, argv);
  ta.seed_given = seed_opt->count() > 0;

  try {
    if (*s) return run_synth(synth, synth_out);
    if (*t) return run_train(ta);
    if (*e) return run_eval(ckpt, eval_cube, map);
    if (*g) return run_gradcheck(layer, tolerance);
    if (*sl) return run_scaling(sc, scaling_out);
    if (*d) {
      std::cout << format_grid_demo(grid_demo(gd), gd);
      return 0;
    }
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 2;
  }
  return 0;
}
