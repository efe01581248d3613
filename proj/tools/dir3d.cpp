// dir3d command-line front end.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "dir3d/config.hpp"
#include "dir3d/data.hpp"
#include "dir3d/errors.hpp"
#include "dir3d/evaluation.hpp"
#include "dir3d/gradcheck.hpp"
#include "dir3d/model.hpp"
#include "dir3d/ops.hpp"
#include "dir3d/training.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace dir3d;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> manifests;
  std::uint64_t seed = 0;
  std::string out;
};

struct TrainFlags {
  std::size_t epochs = 30;
  std::size_t batch = 8;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::size_t decay_every = 0;
  double decay_factor = 0.1;
  double target = 0.0;
  bool no_landmarks = false;
};

void add_common(CLI::App* app, Common& c, const std::string& default_config) {
  c.config = default_config;
  app->add_option("--config", c.config, "Config file, or a preset name (reference, toy, tiny)")
      ->capture_default_str();
  app->add_option("--manifest", c.manifests, "Dataset manifest JSON (repeatable)");
  app->add_option("--seed", c.seed, "Random seed")->capture_default_str();
  app->add_option("--out", c.out, "Output directory");
}

void add_train_flags(CLI::App* app, TrainFlags& t) {
  app->add_option("--epochs", t.epochs, "Epoch budget")->capture_default_str();
  app->add_option("--batch-size", t.batch, "Sequences per batch")->capture_default_str();
  app->add_option("--lr", t.lr, "Learning rate")->capture_default_str();
  app->add_option("--momentum", t.momentum, "SGD momentum")->capture_default_str();
  app->add_option("--weight-decay", t.weight_decay, "L2 weight decay on weight tensors")->capture_default_str();
  app->add_option("--lr-decay-every", t.decay_every, "Multiply the rate by --lr-decay-factor every N epochs (0 = off)");
  app->add_option("--lr-decay-factor", t.decay_factor, "Step-decay factor")->capture_default_str();
  app->add_option("--target-accuracy", t.target, "Stop once eval-mode train accuracy reaches this (0 = off)");
  app->add_flag("--no-landmarks", t.no_landmarks, "Use an all-ones mask in place of landmark weights");
}

SgdOptions sgd_of(const TrainFlags& t) { return {t.lr, t.momentum, t.weight_decay, t.decay_every, t.decay_factor}; }

FitOptions fit_of(const TrainFlags& t) {
  FitOptions f;
  f.epochs = t.epochs;
  f.batch_size = t.batch;
  f.target_train_accuracy = t.target;
  if (t.no_landmarks) f.mask_source = MaskSource::Ones;
  return f;
}

ModelConfig load_config(const std::string& spec) {
  if (fs::exists(spec)) return ModelConfig::load(spec);
  return ModelConfig::preset(spec);
}

Dataset load_data(const std::string& manifest, const ModelConfig& config) {
  const auto m = DatasetManifest::load(manifest);
  if (m.channels != config.channels) {
    throw DataError(manifest + ": manifest has " + std::to_string(m.channels) + " channels, config expects " +
                    std::to_string(config.channels));
  }
  return load_dataset(m, config.height, config.width);
}

fs::path out_dir(const Common& c) {
  if (c.out.empty()) throw ContractError("--out is required");
  fs::create_directories(c.out);
  return c.out;
}

void require_manifests(const Common& c, std::size_t minimum) {
  if (c.manifests.size() < minimum) {
    throw ContractError("need at least " + std::to_string(minimum) + " --manifest argument" + (minimum > 1 ? "s" : ""));
  }
}

int cmd_gen_synth(const Common& c, SynthOptions o) {
  o.seed = c.seed;
  const auto path = write_synth_dataset(out_dir(c), o);
  std::cout << "wrote " << path.string() << " (" << o.classes * o.videos_per_class << " videos, " << o.classes
            << " classes, " << o.subjects << " subjects)\n";
  return 0;
}

int cmd_train(const Common& c, const TrainFlags& t, const std::string& validation, const std::string& resume) {
  require_manifests(c, 1);
  const auto dir = out_dir(c);
  auto config = load_config(c.config);
  Dataset data = load_data(c.manifests.front(), config);
  for (std::size_t i = 1; i < c.manifests.size(); ++i) {
    auto more = load_data(c.manifests[i], config);
    if (more.class_names != data.class_names) throw DataError(c.manifests[i] + ": label map differs from the first manifest");
    for (auto& s : more.samples) data.samples.push_back(std::move(s));
  }
  if (data.class_names.size() > config.num_classes) {
    throw ConfigError("classes: config has " + std::to_string(config.num_classes) + ", data has " +
                      std::to_string(data.class_names.size()));
  }
  std::optional<Dataset> val;
  if (!validation.empty()) val = load_data(validation, config);

  Checkpoint<float> ck = resume.empty() ? Checkpoint<float>{build<float>(config, c.seed), TrainerState<float>{}}
                                        : load_checkpoint<float>(resume, &config);
  if (resume.empty()) ck.state = make_trainer(ck.params, c.seed, sgd_of(t));

  auto fo = fit_of(t);
  fo.metrics_csv = dir / "metrics.csv";
  if (resume.empty()) fs::remove(*fo.metrics_csv);
  fo.on_epoch = [](const EpochLog& row) {
    std::cout << "epoch " << row.epoch << ' ' << row.split << " loss " << std::setprecision(6) << row.loss
              << " accuracy " << row.accuracy << std::endl;
  };
  MaskCache cache;
  const auto result = fit(ck.params, data, val ? &*val : nullptr, fo, ck.state, &cache);
  save_checkpoint(dir / "model.ckpt", ck.params, ck.state);
  if (result.best) save_checkpoint(dir / "best.ckpt", *result.best, ck.state);

  ForwardOptions base;
  base.mask_source = fo.mask_source;
  const auto& scored = val ? *val : data;
  const auto ev = evaluate(ck.params, scored, t.batch, &cache, {}, base);
  EvalReport report;
  report.protocol = val ? "train, scored on validation manifest" : "train, scored on training data";
  report.class_names = data.class_names;
  report.folds.push_back({1, {}, data.size(), scored.size(), result.epochs_run, ev.accuracy});
  report.mean = ev.accuracy;
  report.confusion = confusion_matrix(ev.truths, ev.predictions, config.num_classes);
  report.notes.push_back("checkpoint " + (dir / "model.ckpt").string());
  report.write(dir);
  std::cout << report.to_text();
  return 0;
}

int cmd_subject_independent(const Common& c, const TrainFlags& t, std::size_t folds, std::size_t max_folds) {
  require_manifests(c, 1);
  const auto dir = out_dir(c);
  const auto config = load_config(c.config);
  const auto data = load_data(c.manifests.front(), config);
  ProtocolOptions p;
  p.k = folds;
  p.max_folds = max_folds;
  p.fit = fit_of(t);
  p.sgd = sgd_of(t);
  p.seed = c.seed;
  p.log = &std::cout;
  auto report = run_subject_independent<float>(data, config, p);
  if (t.no_landmarks) report.notes.push_back("landmark masks replaced by all-ones masks");
  report.write(dir);
  std::cout << report.to_text();
  return 0;
}

int cmd_cross_database(const Common& c, const TrainFlags& t, const std::string& test_db) {
  require_manifests(c, 1);
  const auto dir = out_dir(c);
  const auto config = load_config(c.config);
  std::vector<Dataset> sets;
  for (const auto& m : c.manifests) sets.push_back(load_data(m, config));
  ProtocolOptions p;
  p.fit = fit_of(t);
  p.sgd = sgd_of(t);
  p.seed = c.seed;
  p.log = &std::cout;
  const auto report = run_cross_database<float>(sets, test_db, config, p);
  report.write(dir);
  std::cout << report.to_text();
  return 0;
}

int cmd_mask_preview(const Common& c, std::size_t video, std::size_t frame) {
  const auto dir = out_dir(c);
  const auto config = load_config(c.config);
  std::vector<LandmarkFrame> frames;
  std::string source;
  if (c.manifests.empty()) {
    SynthOptions o;
    o.classes = 2;
    o.videos_per_class = 1;
    o.subjects = 1;
    o.height = config.height;
    o.width = config.width;
    o.seed = c.seed;
    frames = synth_dataset(o).samples.front().landmarks;
    source = "synthetic sample";
  } else {
    const auto m = DatasetManifest::load(c.manifests.front());
    if (video >= m.videos.size()) throw ContractError("--video " + std::to_string(video) + " out of range");
    const auto& v = m.videos[video];
    std::size_t h = config.height, w = config.width;
    for (const auto& entry : fs::directory_iterator(v.frames_dir)) {
      if (entry.is_regular_file()) {
        const auto img = read_pnm(entry.path());
        h = img.height;
        w = img.width;
        break;
      }
    }
    frames = read_landmark_csv(v.landmarks_csv, h, w);
    source = v.landmarks_csv.string();
  }
  if (frame >= frames.size()) throw ContractError("--frame " + std::to_string(frame) + " out of range");

  const auto trace = trace_shapes(config);
  const std::pair<const char*, std::size_t> grids[] = {{"block_a", trace.block_a_output[1]},
                                                       {"block_b", trace.block_b_output[1]}};
  for (const auto& [stage, g] : grids) {
    const GridSize size{g, g};
    const auto map = rasterize_weight_map(rescale_landmarks(frames[frame], size), size, config.mask);
    const auto path = dir / ("mask_" + std::string(stage) + "_" + std::to_string(g) + "x" + std::to_string(g) + "_frame" +
                             std::to_string(frame) + ".pgm");
    write_weight_map_pgm(path, map);
    std::cout << "wrote " << path.string() << '\n';
  }
  const GridSize full{frames[frame].height(), frames[frame].width()};
  const auto path = dir / ("mask_input_frame" + std::to_string(frame) + ".pgm");
  write_weight_map_pgm(path, rasterize_weight_map(rescale_landmarks(frames[frame], full), full, config.mask));
  std::cout << "wrote " << path.string() << " from " << source << '\n';
  return 0;
}

int cmd_grad_check(const Common& c, std::size_t coordinates, double tolerance, double step) {
  const auto config = load_config(c.config);
  GradCheckOptions go;
  go.max_coordinates = coordinates;
  go.seed = c.seed;
  go.step = step;
  const auto start = std::chrono::steady_clock::now();
  const auto results = check_model_gradients(config, c.seed, go);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  double worst = 0.0;
  std::ostringstream csv;
  csv << "tensor,coordinates,relative_error,max_abs_error\n";
  nlohmann::json j = nlohmann::json::array();
  std::cout << std::left << std::setw(44) << "tensor" << std::right << std::setw(8) << "probes" << std::setw(14)
            << "rel.error" << '\n';
  for (const auto& r : results) {
    worst = std::max(worst, r.relative_error);
    std::cout << std::left << std::setw(44) << r.name << std::right << std::setw(8) << r.coordinates << std::setw(14)
              << std::scientific << std::setprecision(3) << r.relative_error << std::defaultfloat << '\n';
    csv << r.name << ',' << r.coordinates << ',' << std::setprecision(17) << r.relative_error << ','
        << r.max_abs_error << '\n';
    j.push_back({{"tensor", r.name}, {"coordinates", r.coordinates}, {"relative_error", r.relative_error},
                 {"max_abs_error", r.max_abs_error}});
  }
  const bool ok = worst < tolerance;
  std::cout << "worst relative error " << std::scientific << worst << std::defaultfloat << " (tolerance " << tolerance
            << ") in " << std::fixed << std::setprecision(1) << secs << " s: " << (ok ? "PASS" : "FAIL") << '\n';
  if (!c.out.empty()) {
    const auto dir = out_dir(c);
    std::ofstream(dir / "gradcheck.csv") << csv.str();
    std::ofstream(dir / "gradcheck.json") << nlohmann::json{{"worst", worst}, {"tolerance", tolerance},
                                                            {"pass", ok}, {"tensors", j}}.dump(2) << '\n';
  }
  return ok ? 0 : 1;
}

int cmd_shape_trace(const Common& c, bool execute) {
  const auto config = load_config(c.config);
  const auto trace = trace_shapes(config);
  std::vector<TraceRow> rows = trace.rows;
  std::string mode = "symbolic";
  if (execute) {
    const auto params = build<float>(config, c.seed);
    Tensor<float> clip({1, config.frames, config.height, config.width, config.channels}, 0.5f);
    SequenceLandmarks lm;
    std::vector<Point2> pts(kLandmarkCount);
    for (std::size_t i = 0; i < kLandmarkCount; ++i) {
      const double a = 6.283185307179586 * static_cast<double>(i) / kLandmarkCount;
      pts[i] = {config.width * (0.5 + 0.3 * std::cos(a)), config.height * (0.5 + 0.3 * std::sin(a))};
    }
    for (std::size_t t = 0; t < config.frames; ++t) lm.emplace_back(pts, config.height, config.width);
    std::vector<TraceRow> executed;
    ForwardOptions fo;
    fo.trace = &executed;
    const auto start = std::chrono::steady_clock::now();
    NoGradGuard ng;
    forward(params, clip, {lm}, fo);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    rows = executed;
    std::ostringstream m;
    m << "executed forward in " << std::fixed << std::setprecision(1) << secs << " s";
    mode = m.str();
  }
  std::cout << format_trace(rows);
  std::cout << "parameters: " << trace.parameter_count << '\n';
  std::cout << "grids: stem " << trace.stem_output[1] << "x" << trace.stem_output[2] << ", reduction_a "
            << trace.reduction_a_output[1] << "x" << trace.reduction_a_output[2] << ", reduction_b "
            << trace.reduction_b_output[1] << "x" << trace.reduction_b_output[2] << " (" << mode << ")\n";
  if (!c.out.empty()) {
    const auto dir = out_dir(c);
    std::ofstream(dir / "trace.txt") << format_trace(rows);
    std::ofstream csv(dir / "trace.csv");
    csv << "stage,layer,shape\n";
    nlohmann::json j = nlohmann::json::array();
    for (const auto& r : rows) {
      csv << r.stage << ",\"" << r.layer << "\"," << shape_to_string(r.shape) << '\n';
      j.push_back({{"stage", r.stage}, {"layer", r.layer}, {"shape", r.shape}});
    }
    std::ofstream(dir / "trace.json") << nlohmann::json{{"parameters", trace.parameter_count}, {"rows", j}}.dump(2) << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"3D Inception-ResNet + LSTM facial expression recognition with landmark-weighted residuals"};
  app.require_subcommand(1);

  Common train_c, si_c, cd_c, gen_c, mask_c, grad_c, trace_c;
  TrainFlags train_t, si_t, cd_t;

  auto* train = app.add_subcommand("train", "Train on one or more manifests and write a checkpoint and report");
  add_common(train, train_c, "toy");
  add_train_flags(train, train_t);
  std::string validation, resume;
  train->add_option("--validation", validation, "Manifest scored each epoch; the best model is kept");
  train->add_option("--resume", resume, "Continue from a checkpoint");

  auto* si = app.add_subcommand("eval-subject-independent", "k-fold evaluation with subject-disjoint folds");
  add_common(si, si_c, "toy");
  add_train_flags(si, si_t);
  std::size_t folds = 5, max_folds = 0;
  si->add_option("--folds", folds, "Number of folds")->capture_default_str();
  si->add_option("--max-folds", max_folds, "Run only the first N folds (0 = all)");

  auto* cd = app.add_subcommand("eval-cross-database", "Train on all databases but one and test on it");
  add_common(cd, cd_c, "toy");
  add_train_flags(cd, cd_t);
  std::string test_db;
  cd->add_option("--test-database", test_db, "Database id held out for testing")->required();

  auto* gen = app.add_subcommand("gen-synth", "Write a synthetic dataset (PGM frames, landmark CSVs, manifest)");
  add_common(gen, gen_c, "toy");
  SynthOptions so;
  gen->add_option("--classes", so.classes)->capture_default_str();
  gen->add_option("--videos-per-class", so.videos_per_class)->capture_default_str();
  gen->add_option("--subjects", so.subjects)->capture_default_str();
  gen->add_option("--frames", so.frames, "Frames per video")->capture_default_str();
  gen->add_option("--height", so.height)->capture_default_str();
  gen->add_option("--width", so.width)->capture_default_str();
  gen->add_option("--channels", so.channels)->capture_default_str();
  gen->add_option("--noise", so.noise)->capture_default_str();
  gen->add_option("--database", so.database)->capture_default_str();
  gen->add_flag("--distractors", so.distractors, "Add moving background blobs outside the landmark region");

  auto* mask = app.add_subcommand("mask-preview", "Write landmark weight maps as PGM images");
  add_common(mask, mask_c, "toy");
  std::size_t video = 0, frame = 0;
  mask->add_option("--video", video, "Video index in the manifest")->capture_default_str();
  mask->add_option("--frame", frame, "Frame index within the video")->capture_default_str();

  auto* grad = app.add_subcommand("grad-check", "Finite-difference check of the full model gradient (64-bit)");
  add_common(grad, grad_c, "tiny");
  std::size_t coordinates = 0;
  double tolerance = 1e-4;
  grad->add_option("--coordinates", coordinates, "Probe at most N coordinates per tensor (0 = all)");
  grad->add_option("--tolerance", tolerance, "Relative error bound")->capture_default_str();
  double step = 1e-5;
  grad->add_option("--step", step, "Central-difference step")->capture_default_str();

  auto* st = app.add_subcommand("shape-trace", "Print the layer-by-layer tensor sizes of a config");
  add_common(st, trace_c, "reference");
  bool execute = false;
  st->add_flag("--execute", execute, "Run one forward pass instead of shape arithmetic only");

  app.footer(
      "Frames are read as PGM/PPM (P2, P3, P5, P6). Convert other formats first, for example\n"
      "  convert frame.png frame.pgm   or   ffmpeg -i video.mp4 frames/frame_%04d.pgm");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) return cmd_train(train_c, train_t, validation, resume);
    if (*si) return cmd_subject_independent(si_c, si_t, folds, max_folds);
    if (*cd) return cmd_cross_database(cd_c, cd_t, test_db);
    if (*gen) return cmd_gen_synth(gen_c, so);
    if (*mask) return cmd_mask_preview(mask_c, video, frame);
    if (*grad) return cmd_grad_check(grad_c, coordinates, tolerance, step);
    if (*st) return cmd_shape_trace(trace_c, execute);
  } catch (const dir3d::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
