#pragma once

#include <array>
#include <iosfwd>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "neuraldrop/common.hpp"

namespace nd {

inline constexpr int kControlPoints = 52;
inline constexpr int kDenseSamples = 256;

using ControlPolygon = std::array<Vec2, kControlPoints>;
using NormalSet = std::array<Vec2, kControlPoints>;

namespace spline {

/// Evaluates a uniform periodic cubic B-spline at parameter t (period = ctrl.size()).
/// Parameter t = i lands on the curve point governed mostly by control point i.
Vec2 eval(std::span<const Vec2> ctrl, double t);
Vec2 derivative(std::span<const Vec2> ctrl, double t);
Vec2 second_derivative(std::span<const Vec2> ctrl, double t);

/// Basis weights for local coordinate u in [0,1) applied to P[k-1], P[k], P[k+1], P[k+2].
std::array<double, 4> basis(double u);

std::vector<Vec2> sample(std::span<const Vec2> ctrl, int n);

}  // namespace spline

namespace polygon {

/// Shoelace signed area; negative for clockwise loops under y-up.
double signed_area(std::span<const Vec2> loop);
/// Even-odd rule; points within `boundary_eps` of an edge count as inside.
bool contains(std::span<const Vec2> loop, Vec2 p, double boundary_eps = 1e-9);
bool is_simple(std::span<const Vec2> loop);
double segment_distance(Vec2 p, Vec2 a, Vec2 b);
double perimeter(std::span<const Vec2> loop);

}  // namespace polygon

/// Closed uniform periodic cubic B-spline with 52 control points in canonical
/// form: clockwise (y-up) and control point 0 is the topmost one (ties: min x,
/// then lowest input index). Construction always canonicalizes.
class Contour {
 public:
  explicit Contour(std::span<const Vec2> ctrl);

  const ControlPolygon& ctrl() const { return ctrl_; }
  /// The 256 dense samples at t = 52k/256, starting at control point 0.
  const std::vector<Vec2>& dense() const { return dense_; }

  Vec2 eval(double t) const { return spline::eval(ctrl_, t); }
  Vec2 derivative(double t) const { return spline::derivative(ctrl_, t); }

  /// Mean of the control points; used as the drop center everywhere.
  Vec2 centroid() const;

  /// Arc length from t = 0 to t (t in [0, 52]) along the dense arc-length polyline.
  double arc_length_to(double t) const;
  double perimeter() const { return knot_arc_.back(); }
  /// Inverse of arc_length_to.
  double param_at_arc_length(double s) const;

  bool is_simple() const { return polygon::is_simple(dense_); }

  Contour translated(Vec2 d) const;
  Contour scaled(double s, Vec2 about) const;
  Contour mirrored_x(double axis_x) const;

  friend bool operator==(const Contour& a, const Contour& b) { return a.ctrl_ == b.ctrl_; }

 private:
  ControlPolygon ctrl_{};
  std::vector<Vec2> dense_;
  // Cumulative polyline length at each integer parameter, 53 entries.
  std::vector<double> knot_arc_;
  // Sub-span polyline for arc-length queries.
  std::vector<double> fine_arc_;
};

struct FitResult {
  Contour contour;
  double rms = 0.0;
};

/// Least-squares periodic cubic B-spline fit of a closed sample loop.
/// Chord-length parameters, then parameter correction passes by closest-point projection.
FitResult fit_spline(std::span<const Vec2> samples);

Contour canonicalize(std::span<const Vec2> ctrl);

std::vector<Vec2> sample(const Contour& contour, int n);

NormalSet inward_normals(const Contour& contour);

/// Positive enclosed area; throws SelfIntersecting for non-simple or degenerate loops.
double enclosed_area(const Contour& contour);

/// Shorter-way curvilinear distance between the parameter locations of control points i and j.
double arc_length_between(const Contour& contour, int i, int j);

bool point_in_contour(const Contour& contour, Vec2 p);

struct OverlapSamples {
  std::vector<int> a_in_b;
  std::vector<int> b_in_a;
  bool overlapping() const { return !a_in_b.empty() || !b_in_a.empty(); }
};

OverlapSamples overlap_samples(const Contour& a, const Contour& b);

struct SplitConfig {
  double delta = -0.5;
  int min_separation = 6;

  void validate() const;
};

/// Closest point on the curve to p, refined by Newton iterations from the nearest dense sample.
double closest_param(const Contour& contour, Vec2 p);

void write_contour(std::ostream& os, const Contour& contour);
Contour read_contour(std::istream& is);
void save_contour(const std::string& path, const Contour& contour);
Contour load_contour(const std::string& path);

}  // namespace nd
