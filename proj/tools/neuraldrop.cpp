// neuraldrop: synth, prep, train, simulate, reconstruct and eval from the command line.
//
// Exit codes: 0 success, 2 configuration, 3 data, 4 training, 5 scene.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "neuraldrop/dataprep.hpp"
#include "neuraldrop/neural.hpp"
#include "neuraldrop/reconstruct.hpp"
#include "neuraldrop/simulate.hpp"
#include "neuraldrop/synth.hpp"
#include "neuraldrop/training.hpp"

namespace fs = std::filesystem;
using namespace nd;

namespace {

enum Exit { kOk = 0, kConfig = 2, kData = 3, kTraining = 4, kScene = 5 };

struct Failure {
  int code;
  std::string message;
};

void log(const std::string& line) { std::cerr << line << '\n'; }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Failure{kConfig, "cannot read " + path};
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<Frame> load_frames(const std::string& dir) {
  if (!fs::is_directory(dir)) throw Failure{kData, "frame directory " + dir + " does not exist"};
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string n = e.path().filename().string();
    if (n.rfind("frame_", 0) == 0 && e.path().extension() == ".pgm") names.push_back(e.path().string());
  }
  std::sort(names.begin(), names.end());
  std::vector<Frame> frames;
  for (const auto& n : names) frames.push_back(read_pgm(n));
  return frames;
}

// ---------------------------------------------------------------- synth

struct SynthArgs {
  std::string config;
  std::uint64_t seed = 1;
  std::string out;
};

int run_synth(const SynthArgs& a) {
  SynthParams params;
  if (!a.config.empty()) {
    if (!fs::exists(a.config)) throw Failure{kConfig, "config file " + a.config + " does not exist"};
    params = synth_params_from_json(read_file(a.config));
  }
  params.validate();
  fs::create_directories(a.out);
  nlohmann::ordered_json manifest;
  manifest["format"] = "nd-manifest v1";
  manifest["seed"] = a.seed;
  manifest["params"] = nlohmann::ordered_json::parse(synth_params_to_json(params));
  manifest["sequences"] = nlohmann::ordered_json::array();
  for (int s = 0; s < params.n_sequences; ++s) {
    char name[32];
    std::snprintf(name, sizeof name, "seq_%03d", s);
    const fs::path dir = fs::path(a.out) / name;
    fs::create_directories(dir);
    const SynthClip clip = synth_generate(params, a.seed, s);
    for (std::size_t f = 0; f < clip.frames.size(); ++f) {
      char fn[32];
      std::snprintf(fn, sizeof fn, "frame_%06zu.pgm", f);
      write_pgm((dir / fn).string(), clip.frames[f]);
    }
    save_tracks((dir / "truth.json").string(), clip.truth);
    int splits = 0, merges = 0;
    for (const auto& t : clip.truth) {
      splits += t.terminal_event == TerminalEvent::Split;
      merges += t.terminal_event == TerminalEvent::Merged;
    }
    manifest["sequences"].push_back({{"name", name},
                                     {"frames", clip.frames.size()},
                                     {"truth", std::string(name) + "/truth.json"},
                                     {"tracks", clip.truth.size()},
                                     {"splits", splits},
                                     {"merges", merges}});
    log(std::string(name) + ": " + std::to_string(clip.frames.size()) + " frames, " +
        std::to_string(clip.truth.size()) + " tracks");
  }
  std::ofstream((fs::path(a.out) / "manifest.json").string()) << manifest.dump(2) << '\n';
  return kOk;
}

// ---------------------------------------------------------------- prep

struct PrepArgs {
  std::string frames;
  std::string manifest;
  int K = kDefaultWindow;
  std::string out;
  std::string tracks;
};

int run_prep(const PrepArgs& a) {
  std::vector<std::string> dirs;
  if (!a.manifest.empty()) {
    if (!fs::exists(a.manifest)) throw Failure{kConfig, "manifest " + a.manifest + " does not exist"};
    nlohmann::json m;
    try {
      m = nlohmann::json::parse(read_file(a.manifest));
    } catch (const nlohmann::json::exception& e) {
      throw Failure{kConfig, "manifest " + a.manifest + " is not valid JSON"};
    }
    if (m.value("format", "") != "nd-manifest v1") throw Failure{kConfig, "unsupported manifest format"};
    const fs::path base = fs::path(a.manifest).parent_path();
    for (const auto& s : m.at("sequences")) dirs.push_back((base / s.at("name").get<std::string>()).string());
  } else {
    dirs.push_back(a.frames);
  }
  std::vector<TrackedSequence> all;
  int splits = 0, merges = 0, next_id = 0;
  for (const auto& dir : dirs) {
    const auto frames = load_frames(dir);
    ExtractedTracks tr;
    try {
      tr = extract_tracks(frames, PrepOptions{}, next_id);
    } catch (const Error& e) {
      throw Failure{kData, dir + ": " + e.what()};
    }
    for (auto& s : tr.sequences) {
      next_id = std::max(next_id, s.id + 1);
      all.push_back(std::move(s));
    }
    splits += tr.splits;
    merges += tr.merges;
  }
  const Dataset ds = build_dataset(all, a.K);
  for (const auto& w : ds.warnings) log("warning: " + w);
  if (ds.samples.empty()) log("warning: dataset is empty");
  int positives = 0;
  for (const auto& s : ds.samples) positives += s.breakage;
  save_dataset(a.out, ds);
  if (!a.tracks.empty()) save_tracks(a.tracks, all);
  std::cout << "clips " << dirs.size() << ", sequences " << all.size() << ", splits " << splits << ", merges "
            << merges << ", samples " << ds.samples.size() << ", breakage positives " << positives << '\n';
  return kOk;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::string net;
  std::string dataset;
  int epochs = 1000;
  int batch = 128;
  double lr = 1e-2;
  double decay = 1e-6;
  std::string optimizer = "sgd";
  std::uint64_t seed = 1;
  int width = 0;
  double dropout = 0.2;
  std::string out;
  std::string loss_csv;
};

int run_train(const TrainArgs& a) {
  const Dataset ds = load_dataset(a.dataset);
  nn::Model model;
  nn::TrainData data;
  nn::TrainConfig cfg;
  if (a.net == "contour") {
    model = nn::build_contour_net(a.width, a.dropout, a.seed);
    data = contour_train_data(ds);
  } else if (a.net == "gradient") {
    model = nn::build_gradient_net(a.width, a.dropout, a.seed);
    model.feature_scale = gradient_scale(ds);
    data = gradient_train_data(ds, model.feature_scale);
  } else {
    model = nn::build_breakage_net(a.width, a.dropout, a.seed);
    const nn::TrainData full = breakage_train_data(ds);
    const nn::Mat rows = full.inputs[0].transpose();
    std::vector<int> labels(full.size());
    for (int s = 0; s < full.size(); ++s) labels[s] = full.targets(0, s) > 0.5;
    const int pos = static_cast<int>(std::count(labels.begin(), labels.end(), 1));
    const auto kept = nn::near_miss_undersample(rows, labels, 1.0);
    data = full.subset(kept);
    int kept_pos = 0;
    for (int k : kept) kept_pos += labels[k];
    std::cout << "breakage balance: " << pos << " positives, " << full.size() - pos << " negatives -> " << kept_pos
              << " positives, " << static_cast<int>(kept.size()) - kept_pos << " negatives\n";
    cfg.loss = nn::Loss::Bce;
  }
  cfg.epochs = a.epochs;
  cfg.batch_size = a.batch;
  cfg.lr = a.lr;
  cfg.lr_decay = a.decay;
  cfg.optimizer = a.optimizer == "adam" ? nn::Optimizer::Adam : nn::Optimizer::SgdNesterov;
  cfg.seed = a.seed;
  try {
    cfg.validate();
  } catch (const Error& e) {
    throw Failure{kConfig, e.what()};
  }
  const int every = std::max(1, a.epochs / 10);
  const auto res = nn::train(model, data, cfg, [&](int epoch, double loss) {
    if ((epoch + 1) % every == 0 || epoch + 1 == a.epochs)
      log("epoch " + std::to_string(epoch + 1) + " loss " + format_double(loss));
  });
  nn::save_model(a.out, model);
  const std::string csv = a.loss_csv.empty() ? (fs::path(a.out).replace_extension("").string() + "_loss.csv") : a.loss_csv;
  nn::write_loss_csv(csv, res.epoch_loss);
  std::cout << a.net << " net: " << model.parameter_count() << " parameters, " << data.size() << " samples, "
            << a.epochs << " epochs";
  if (!res.epoch_loss.empty()) std::cout << ", final loss " << format_double(res.epoch_loss.back());
  std::cout << '\n';
  return kOk;
}

// ---------------------------------------------------------------- simulate / eval

struct SceneSetup {
  SceneConfig cfg;
  Models models;
  InitDatabase db;
};

SceneSetup load_scene(const std::string& path) {
  SceneSetup s;
  try {
    s.cfg = load_scene_config(path);
    if (s.cfg.contour_model.empty() || s.cfg.gradient_model.empty() || s.cfg.breakage_model.empty())
      throw Error(ErrorCode::InvalidConfig, "scene needs contour, gradient and breakage models");
    s.models = Models::load(s.cfg.contour_model, s.cfg.gradient_model, s.cfg.breakage_model);
    if (!s.cfg.database.empty()) s.db = database_from_tracks(load_tracks(s.cfg.database), s.cfg.database);
  } catch (const Error& e) {
    throw Failure{kScene, e.what()};
  }
  return s;
}

struct SimulateArgs {
  std::string scene;
  std::string out;
  int steps = 0;
};

int run_simulate(const SimulateArgs& a) {
  SceneSetup setup = load_scene(a.scene);
  const SceneConfig& cfg = setup.cfg;
  Scene scene;
  try {
    scene = make_scene(cfg, setup.db.empty() ? nullptr : &setup.db);
  } catch (const Error& e) {
    throw Failure{kScene, e.what()};
  }
  const std::string out = a.out.empty() ? cfg.output : a.out;
  fs::create_directories(out);
  std::ofstream traj((fs::path(out) / "trajectory.csv").string());
  write_trajectory_header(traj);
  StepReport init;
  for (const auto& d : scene.drops) init.events.push_back({0, d.id, "init"});
  write_trajectory_rows(traj, scene, init);

  NeuralPredictor predictor(std::move(setup.models));
  const int steps = a.steps > 0 ? a.steps : cfg.steps;
  double worst_per_drop = 0.0, total_predict = 0.0;
  int total_predicted = 0;
  for (int t = 0; t < steps; ++t) {
    const auto t0 = std::chrono::steady_clock::now();
    const StepReport rep = step_scene(scene, predictor);
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_trajectory_rows(traj, scene, rep);
    for (const auto& f : rep.failures) log("step " + std::to_string(scene.step) + ": " + f);
    const double per_drop = rep.predicted ? rep.predict_seconds / rep.predicted : 0.0;
    worst_per_drop = std::max(worst_per_drop, per_drop);
    total_predict += rep.predict_seconds;
    total_predicted += rep.predicted;
    if (cfg.export_meshes && scene.step % cfg.mesh_every == 0) {
      std::vector<std::string> skipped;
      export_scene_meshes(scene, out, cfg.mesh_cells, cfg.smooth_iters, &skipped);
      for (const auto& s : skipped) log("step " + std::to_string(scene.step) + ": mesh skipped, " + s);
    }
    log("step " + std::to_string(scene.step) + ": " + std::to_string(scene.drops.size()) + " drops, " +
        fmt("%.3f", per_drop * 1e3) + " ms/drop prediction, " + fmt("%.3f", wall * 1e3) + " ms total, splits " +
        std::to_string(rep.splits) + ", merges " + std::to_string(rep.merges));
  }
  std::cout << "steps " << steps << ", drops " << scene.drops.size() << ", mean prediction "
            << fmt("%.3f", total_predicted ? total_predict / total_predicted * 1e3 : 0.0) << " ms/drop, worst step "
            << fmt("%.3f", worst_per_drop * 1e3) << " ms/drop, volume " << format_double(scene.total_volume())
            << (scene.flagged ? ", flagged" : "") << '\n';
  return kOk;
}

struct EvalArgs {
  std::string scene;
  std::string truth;
  std::string out;
  int steps = 20;
};

int run_eval(const EvalArgs& a) {
  SceneSetup setup = load_scene(a.scene);
  std::vector<TrackedSequence> truth;
  try {
    truth = load_tracks(a.truth);
  } catch (const Error& e) {
    throw Failure{kData, e.what()};
  }
  NeuralPredictor predictor(std::move(setup.models));
  RolloutEval ev;
  try {
    ev = evaluate_rollouts(truth, predictor, setup.cfg.terrain, setup.cfg.K, a.steps);
  } catch (const Error& e) {
    throw Failure{kScene, e.what()};
  }
  std::ofstream os(a.out);
  write_eval_csv(os, ev);
  std::cout << "mean_err " << format_double(ev.mean_err) << ", split precision " << format_double(ev.precision())
            << " (" << ev.matched_predicted << "/" << ev.predicted_splits << "), recall " << format_double(ev.recall())
            << " (" << ev.matched_truth << "/" << ev.truth_splits << ")\n";
  return kOk;
}

// ---------------------------------------------------------------- reconstruct

struct ReconstructArgs {
  std::string contour;
  std::string gradient;
  double volume = 0.0;
  std::string out;
  int cells = 96;
  int smooth = 3;
  double incline = 0.0;
};

int run_reconstruct(const ReconstructArgs& a) {
  Contour c = [&] {
    try {
      return load_contour(a.contour);
    } catch (const Error& e) {
      throw Failure{kData, e.what()};
    }
  }();
  GradientProfile g;
  ReconstructionProblem prob;
  ColorField color;
  try {
    g = load_gradient(a.gradient);
    prob = rasterize(c, g, default_grid(c, a.cells));
    color = solve_biharmonic(prob);
  } catch (const Error& e) {
    throw Failure{kData, e.what()};
  }
  HeightField h;
  try {
    h = smooth(color_to_height(color, prob.cells, a.volume), a.smooth);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::DegenerateField) throw Failure{kData, e.what()};
    log("warning: color field is zero everywhere (zero gradients?); writing a flat mesh, requested volume " +
        format_double(a.volume) + " not represented");
    h = HeightField{prob.grid, prob.cells, std::vector<double>(prob.grid.size(), 0.0), 0.0};
  }
  const Terrain plane = Terrain::plane(a.incline);
  export_mesh(h, a.incline > 0 ? &plane : nullptr, a.out);
  std::cout << "grid " << h.grid.nx << "x" << h.grid.ny << ", CG iterations " << color.iterations << ", volume "
            << format_double(h.integral()) << '\n';
  return kOk;
}

int exit_code_for(ErrorCode c) {
  switch (c) {
    case ErrorCode::InvalidParams:
    case ErrorCode::InvalidConfig:
    case ErrorCode::InvalidArgument:
      return kConfig;
    case ErrorCode::NonFiniteLoss:
    case ErrorCode::NoPositives:
      return kTraining;
    default:
      return kData;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"NeuralDrop: learned contact-front prediction for liquid drops on solids"};
  app.name("neuraldrop");
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Generate synthetic drop clips with ground-truth tracks");
  synth->add_option("--config", sa.config, "Generator parameters (JSON); defaults when omitted");
  synth->add_option("--seed", sa.seed, "Random seed");
  synth->add_option("--out", sa.out, "Output directory")->required();

  PrepArgs pa;
  auto* prep = app.add_subcommand("prep", "Extract tracks from frames and build a training dataset");
  auto* frames_opt = prep->add_option("--frames", pa.frames, "Directory of frame_%06d.pgm files");
  auto* manifest_opt = prep->add_option("--manifest", pa.manifest, "Manifest written by synth");
  frames_opt->excludes(manifest_opt);
  prep->add_option("--K", pa.K, "Window length")->check(CLI::PositiveNumber);
  prep->add_option("--out", pa.out, "Dataset file (JSON lines)")->required();
  prep->add_option("--tracks", pa.tracks, "Also write the extracted tracks here");

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train one of the three networks");
  train->add_option("--net", ta.net, "Network to train")->required()->check(CLI::IsMember({"contour", "gradient", "breakage"}));
  train->add_option("--dataset", ta.dataset, "Dataset file")->required();
  train->add_option("--epochs", ta.epochs, "Training epochs")->check(CLI::NonNegativeNumber);
  train->add_option("--batch", ta.batch, "Mini-batch size")->check(CLI::PositiveNumber);
  train->add_option("--lr", ta.lr, "Initial learning rate");
  train->add_option("--decay", ta.decay, "Learning-rate decay per iteration");
  train->add_option("--optimizer", ta.optimizer, "sgd (Nesterov momentum) or adam")->check(CLI::IsMember({"sgd", "adam"}));
  train->add_option("--seed", ta.seed, "Initialization and shuffling seed");
  train->add_option("--width", ta.width, "Hidden width, 0 for the full-size network")->check(CLI::NonNegativeNumber);
  train->add_option("--dropout", ta.dropout, "Dropout rate")->check(CLI::Range(0.0, 0.95));
  train->add_option("--out", ta.out, "Model file (JSON)")->required();
  train->add_option("--loss-csv", ta.loss_csv, "Loss curve; defaults to <out stem>_loss.csv");

  SimulateArgs ma;
  auto* simulate = app.add_subcommand("simulate", "Run a scene");
  simulate->add_option("--scene", ma.scene, "Scene configuration (JSON)")->required();
  simulate->add_option("--out", ma.out, "Output directory; overrides the scene's output");
  simulate->add_option("--steps", ma.steps, "Step count; 0 uses the scene's")->check(CLI::NonNegativeNumber);

  ReconstructArgs ra;
  auto* recon = app.add_subcommand("reconstruct", "Rebuild a height-field mesh from a contour and gradient profile");
  recon->add_option("--contour", ra.contour, "Contour file")->required();
  recon->add_option("--gradient", ra.gradient, "Gradient profile file")->required();
  recon->add_option("--volume", ra.volume, "Liquid volume")->required()->check(CLI::PositiveNumber);
  recon->add_option("--out", ra.out, "OBJ file")->required();
  recon->add_option("--cells", ra.cells, "Minimum grid cells across the drop")->check(CLI::Range(8, 256));
  recon->add_option("--smooth", ra.smooth, "Smoothing passes")->check(CLI::NonNegativeNumber);
  recon->add_option("--incline", ra.incline, "Place the mesh on a plane of this incline (degrees), 0 for flat")
      ->check(CLI::Range(0.0, 90.0));

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Roll out truth sequences and compare with the ground truth");
  eval->add_option("--scene", ea.scene, "Scene configuration providing models, terrain and K")->required();
  eval->add_option("--truth", ea.truth, "Ground-truth tracks")->required();
  eval->add_option("--out", ea.out, "CSV: step,drop,err,event")->required();
  eval->add_option("--steps", ea.steps, "Rollout steps per sequence")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kConfig;
  }

  try {
    if (*synth) return run_synth(sa);
    if (*prep) {
      if (pa.frames.empty() && pa.manifest.empty()) throw Failure{kConfig, "prep needs --frames or --manifest"};
      return run_prep(pa);
    }
    if (*train) return run_train(ta);
    if (*simulate) return run_simulate(ma);
    if (*recon) return run_reconstruct(ra);
    if (*eval) return run_eval(ea);
  } catch (const Failure& f) {
    log("error: " + f.message);
    return f.code;
  } catch (const Error& e) {
    log(std::string("error: ") + e.what());
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    log(std::string("error: ") + e.what());
    return kData;
  }
  return kOk;
}
