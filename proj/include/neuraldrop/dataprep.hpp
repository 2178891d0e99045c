#pragma once

#include <array>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "neuraldrop/geometry.hpp"
#include "neuraldrop/image.hpp"

namespace nd {

/// Color-gradient magnitudes along the inward normal at each control point,
/// in intensity units per scene unit.
struct GradientProfile {
  std::array<double, kControlPoints> mags{};

  /// Throws InvalidArgument on negative or non-finite entries.
  void validate() const;
  bool operator==(const GradientProfile&) const = default;
};

GradientProfile extract_gradient_profile(const Frame& frame, const Contour& contour);

/// Magnitude at curve parameter t, linear in arc length between the two neighboring
/// control-point locations.
double profile_at(const Contour& contour, const GradientProfile& profile, double t);

/// Text format: header "gradient v1" then 52 magnitudes, one per line.
void write_gradient(std::ostream& os, const GradientProfile& g);
GradientProfile read_gradient(std::istream& is);
void save_gradient(const std::string& path, const GradientProfile& g);
GradientProfile load_gradient(const std::string& path);

// ---------------------------------------------------------------- tracking

enum class TrackEventKind { Continue, Merge, Split, Start, End };

const char* to_string(TrackEventKind kind);

/// Indices into the prev and cur contour lists.
struct TrackEvent {
  TrackEventKind kind = TrackEventKind::Continue;
  std::vector<int> prev;
  std::vector<int> cur;
};

/// Dense samples of a inside b plus dense samples of b inside a.
int overlap_score(const Contour& a, const Contour& b);
inline constexpr int kTrackOverlapThreshold = 8;

/// Events sorted by (kind, first prev index, first cur index). Throws
/// AmbiguousTopology naming `frame_index` for three-way or chained overlaps.
std::vector<TrackEvent> track(const std::vector<Contour>& prev, const std::vector<Contour>& cur,
                              int frame_index = 0);

enum class TerminalEvent { Ends, LeavesView, Merged, Split };

const char* to_string(TerminalEvent e);
TerminalEvent terminal_event_from_string(const std::string& s);

struct TrackEntry {
  Contour contour;
  GradientProfile gradient;
  Vec2 center;
};

struct TrackedSequence {
  int id = 0;
  int start_frame = 0;
  std::vector<TrackEntry> frames;
  TerminalEvent terminal_event = TerminalEvent::Ends;
  /// Local index of the last frame before the split, set iff terminal_event == Split.
  std::optional<int> split_frame;
  std::vector<int> parents;
  std::vector<int> children;

  int length() const { return static_cast<int>(frames.size()); }
  int end_frame() const { return start_frame + length() - 1; }
  void validate() const;
};

// ---------------------------------------------------------------- features

/// Feature layout for one step: 52 x, 52 y, then 2 center values.
inline constexpr int kShapeDim = 2 * kControlPoints;
inline constexpr int kStepDim = kShapeDim + 2;

/// Shape features of a contour relative to `ref`: x_i - ref.x, then y_i - ref.y.
std::array<double, kShapeDim> shape_features(const Contour& c, Vec2 ref);
std::array<double, kStepDim> step_features(const Contour& c, Vec2 ref, Vec2 center_offset);
/// Mean-centered on the contour's own centroid; the breakage classifier input.
std::array<double, kShapeDim> breakage_features(const Contour& c);

/// Rebuilds a contour from a predicted step vector: control points are ref + offsets,
/// then shifted so their mean lands on origin + predicted center offset.
Contour decode_step(std::span<const double> step, Vec2 ref, Vec2 origin);

// ---------------------------------------------------------------- dataset

struct TrainingSample {
  int seq_id = 0;
  int t0 = 0;
  std::vector<std::array<double, kStepDim>> inputs;
  std::vector<std::array<double, kControlPoints>> grad_inputs;
  std::array<double, kStepDim> target{};
  std::array<double, kControlPoints> grad_target{};
  std::array<double, kShapeDim> breakage_input{};
  bool breakage = false;
};

struct Dataset {
  int K = 5;
  std::vector<TrainingSample> samples;
  std::vector<std::string> warnings;

  /// Coordinate features in [-1,1], gradients >= 0 and finite, window lengths equal K.
  void validate() const;
};

inline constexpr int kDefaultWindow = 5;

/// Sliding windows over every sequence, ordered by (seq id, window start).
Dataset build_dataset(const std::vector<TrackedSequence>& sequences, int K);

void write_dataset(std::ostream& os, const Dataset& ds);
Dataset read_dataset(std::istream& is);
void save_dataset(const std::string& path, const Dataset& ds);
Dataset load_dataset(const std::string& path);

// ---------------------------------------------------------------- prep pipeline

struct PrepOptions {
  int morph_radius = 1;
  int min_area = 16;
  /// Frames whose Otsu classes differ in mean intensity by less than this are empty.
  double min_contrast = 30.0;
  /// A drop whose last contour comes within this many pixels of the border leaves the view.
  double border_margin_px = 3.0;
};

/// Contours plus profiles for one frame, sorted by topmost point.
struct FrameContours {
  std::vector<Contour> contours;
  std::vector<GradientProfile> profiles;
};

FrameContours extract_frame(const Frame& frame, const PrepOptions& opt = {});

struct ExtractedTracks {
  std::vector<TrackedSequence> sequences;
  int splits = 0;
  int merges = 0;
};

/// Threshold, clean, trace, fit, track and profile a whole clip. Sequence ids
/// start at `first_id` and follow first appearance order.
ExtractedTracks extract_tracks(const std::vector<Frame>& frames, const PrepOptions& opt = {},
                               int first_id = 0);

void write_tracks(std::ostream& os, const std::vector<TrackedSequence>& seqs);
std::vector<TrackedSequence> read_tracks(std::istream& is);
void save_tracks(const std::string& path, const std::vector<TrackedSequence>& seqs);
std::vector<TrackedSequence> load_tracks(const std::string& path);

}  // namespace nd
