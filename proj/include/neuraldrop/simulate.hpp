#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "neuraldrop/dataprep.hpp"
#include "neuraldrop/neural.hpp"
#include "neuraldrop/reconstruct.hpp"

namespace nd {

/// One simulated drop. `history` holds the last K states, newest last.
struct DropState {
  int id = 0;
  std::vector<TrackEntry> history;
  double volume = 0.0;
  bool alive = true;

  const TrackEntry& current() const { return history.back(); }
  /// Drops the oldest entry and appends `e`, keeping the length fixed.
  void push(TrackEntry e);
  /// Length K, positive volume, canonical contours.
  void validate(int K) const;
};

/// Known (contour, gradient) pairs for cold-start gradient lookup. Contours are stored
/// mean-centered and divided by their RMS radius.
class InitDatabase {
 public:
  InitDatabase() = default;
  explicit InitDatabase(std::string source) : source_(std::move(source)) {}

  /// Skips the entry when an existing one is closer than `dedupe_eps`.
  /// Returns true when added.
  bool add(const Contour& contour, const GradientProfile& gradient, double dedupe_eps = 1e-3);

  std::size_t size() const { return shapes_.size(); }
  bool empty() const { return shapes_.empty(); }
  const std::string& source() const { return source_; }
  const GradientProfile& gradient(std::size_t i) const { return gradients_[i]; }

  /// Index of the entry nearest to the normalized query, lowest index on ties, and its
  /// L2 distance. Throws EmptyDatabase.
  std::pair<std::size_t, double> nearest(const Contour& query) const;

  static std::array<double, kShapeDim> normalize(const Contour& c);

 private:
  std::string source_;
  std::vector<std::array<double, kShapeDim>> shapes_;
  std::vector<GradientProfile> gradients_;
};

/// Every tracked state of every sequence.
InitDatabase database_from_tracks(const std::vector<TrackedSequence>& seqs, const std::string& source = "tracks");

/// Cold start: K copies of (contour, nearest database gradient, centroid).
DropState init_drop(const Contour& contour, double volume, const InitDatabase& db, int K, int id = 0);
DropState init_drop(const Contour& contour, const GradientProfile& gradient, double volume, int K, int id = 0);

/// (sin theta)^(1/3) for theta in degrees. Throws DegenerateIncline for theta <= 0.
double incline_scale(double theta_deg);
inline constexpr double kTrainingIncline = 30.0;

struct Models {
  nn::Model contour;
  nn::Model gradient;
  nn::Model breakage;

  static Models load(const std::string& contour_path, const std::string& gradient_path,
                     const std::string& breakage_path);
};

/// Next state from the networks. History is scaled about each drop center by
/// incline_scale(theta) / incline_scale(30) before prediction and the result is scaled
/// back. Throws NonFinitePrediction.
TrackEntry predict_step(const DropState& state, const Models& models, double theta_avg_deg);
/// predict_step, then pushes the result into the history.
TrackEntry step_drop(DropState& state, const Models& models, double theta_avg_deg);

/// Classifier output on the newest contour; true only when strictly above 0.5.
bool predict_breakage(const DropState& state, const nn::Model& model);
double breakage_probability(const DropState& state, const nn::Model& model);

/// Objective minimized by find_split_pair: |x_i - x_j| - C(i, j).
double split_objective(const Contour& contour, int i, int j);
/// Exhaustive scan over i < j with cyclic index gap >= min_separation and n_i . n_j < delta.
/// Ties go to the lexicographically smallest pair. Throws NoValidPair.
std::pair<int, int> find_split_pair(const Contour& contour, const SplitConfig& cfg = {});

/// Cuts every history contour along the chord between control points i and j (found on
/// the newest contour) and refits both pieces. The first child is the piece running
/// from i to j. Volume is shared by newest child area. Throws NoValidPair and
/// DegenerateChild (a child under 1% of the parent area, or an invalid piece).
std::pair<DropState, DropState> split_drop(const DropState& state, const SplitConfig& cfg = {}, int id_a = 0,
                                           int id_b = 0);

/// Union of the newest contours, cold-started. Throws NoOverlap and StitchFailure.
DropState merge_drops(const DropState& a, const DropState& b, int K, int id = 0);

// ---------------------------------------------------------------- scenes

struct DropSpec {
  std::optional<Contour> contour;
  std::optional<GradientProfile> gradient;
  double volume = 0.0;
};

struct SceneConfig {
  Terrain terrain;
  std::string terrain_path;  // empty for a plane
  std::vector<DropSpec> drops;
  std::string contour_model;
  std::string gradient_model;
  std::string breakage_model;
  std::string database;  // tracks file for cold-start gradients
  int K = kDefaultWindow;
  double dt = 1.0 / 240.0;
  int steps = 100;
  std::uint64_t seed = 1;
  SplitConfig split;
  /// Drops whose center leaves [xmin, ymin, xmax, ymax] are removed.
  std::array<double, 4> domain{0.0, 0.0, 1.0, 1.0};
  std::string output = "out";
  bool export_meshes = false;
  int mesh_every = 1;
  int mesh_cells = 48;
  int smooth_iters = 3;

  /// Throws InvalidConfig.
  void validate() const;
};

/// Relative paths are resolved against the config file's directory. Drops take either
/// "contour": path or "circle": {"center": [x, y], "radius": r}. Throws InvalidConfig.
SceneConfig load_scene_config(const std::string& path);

/// Source of per-drop predictions; the neural one is used in production, tests script
/// their own.
class Predictor {
 public:
  virtual ~Predictor() = default;
  virtual TrackEntry predict(const DropState& state, double theta_avg_deg) = 0;
  virtual bool breaks(const DropState& state) = 0;
};

class NeuralPredictor : public Predictor {
 public:
  explicit NeuralPredictor(Models models) : models_(std::move(models)) {}
  TrackEntry predict(const DropState& state, double theta_avg_deg) override;
  bool breaks(const DropState& state) override;
  const Models& models() const { return models_; }

 private:
  Models models_;
};

/// Mean incline in degrees over terrain cells under the contour (the centroid's
/// incline when no cell center is inside).
double average_incline(const Terrain& terrain, const Contour& contour);

struct DropEvent {
  int step = 0;
  int drop = 0;
  std::string event;  // init, step, frozen, split, merge, exit, failed
};

struct Scene {
  int K = kDefaultWindow;
  Terrain terrain;
  SplitConfig split;
  std::array<double, 4> domain{0.0, 0.0, 1.0, 1.0};
  std::vector<DropState> drops;  // live drops, ascending id
  int step = 0;
  int next_id = 0;
  double exited_volume = 0.0;
  double failed_volume = 0.0;
  bool flagged = false;
  /// Children of a split touch along the cut; they are not merged until they have
  /// been apart at least once.
  std::set<std::pair<int, int>> separating;

  double total_volume() const;
  DropState& add_drop(DropState d);
};

struct StepReport {
  std::vector<DropEvent> events;
  std::vector<std::string> failures;
  int splits = 0;
  int merges = 0;
  int exits = 0;
  double predict_seconds = 0.0;  // prediction only, summed over drops
  int predicted = 0;
};

/// Cold-starts the scene drops. Drops without a gradient need a non-empty database.
Scene make_scene(const SceneConfig& cfg, const InitDatabase* db);

/// One step: predict every drop, split drops the predictor flags, merge overlapping pairs
/// greedily in ascending id order, remove drops that left the domain. Per-drop failures
/// become "failed" events and flag the scene.
StepReport step_scene(Scene& scene, Predictor& predictor);

/// "step,drop,cx,cy,area,volume,event"
void write_trajectory_header(std::ostream& os);
void write_trajectory_rows(std::ostream& os, const Scene& scene, const StepReport& report);

/// step_%05d_drop_%03d.obj
std::string mesh_file_name(int step, int drop);
/// Reconstructs and writes one OBJ per live drop; returns the number written. Drops whose
/// reconstruction fails are skipped and reported in `skipped`.
int export_scene_meshes(const Scene& scene, const std::string& dir, int mesh_cells, int smooth_iters,
                        std::vector<std::string>* skipped = nullptr);

// ---------------------------------------------------------------- evaluation

struct RolloutRow {
  int step = 0;
  int sequence = 0;
  double err = 0.0;
  bool split = false;  // first step the predictor reported a breakage
};

struct RolloutEval {
  std::vector<RolloutRow> rows;
  double mean_err = 0.0;
  int truth_splits = 0;
  int predicted_splits = 0;
  int matched_truth = 0;
  int matched_predicted = 0;

  /// 1 when there is nothing to match.
  double precision() const { return predicted_splits ? double(matched_predicted) / predicted_splits : 1.0; }
  double recall() const { return truth_splits ? double(matched_truth) / truth_splits : 1.0; }
};

/// Mean distance between corresponding control points, in scene units.
double control_point_error(const Contour& a, const Contour& b);

/// Cold-starts every truth sequence of length >= 2 from its first frame (with its own
/// gradient) and rolls forward up to `max_steps` steps, comparing each prediction with the
/// truth frame of the same index. A sequence's predicted split is the first step the
/// predictor reports a breakage; it matches a truth split within +-1 frame.
RolloutEval evaluate_rollouts(const std::vector<TrackedSequence>& truth, Predictor& predictor, const Terrain& terrain,
                              int K, int max_steps);

/// "step,drop,err,event"
void write_eval_csv(std::ostream& os, const RolloutEval& ev);

}  // namespace nd
