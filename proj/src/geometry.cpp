#include "neuraldrop/geometry.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

namespace nd {

namespace {

constexpr int kArcSubdivisions = 8;
constexpr int kCorrectionPasses = 4;

inline int wrap_index(long k, int n) {
  long r = k % n;
  return static_cast<int>(r < 0 ? r + n : r);
}

inline double wrap_param(double t, int n) {
  double r = std::fmod(t, static_cast<double>(n));
  if (r < 0) r += n;
  if (r >= n) r = 0.0;
  return r;
}

}  // namespace

// ---------------------------------------------------------------------------
// spline

namespace spline {

std::array<double, 4> basis(double u) {
  const double u2 = u * u;
  const double u3 = u2 * u;
  const double v = 1.0 - u;
  return {v * v * v / 6.0, (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0,
          (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0, u3 / 6.0};
}

namespace {

std::array<double, 4> basis_d1(double u) {
  const double v = 1.0 - u;
  return {-0.5 * v * v, 1.5 * u * u - 2.0 * u, -1.5 * u * u + u + 0.5, 0.5 * u * u};
}

std::array<double, 4> basis_d2(double u) { return {1.0 - u, 3.0 * u - 2.0, -3.0 * u + 1.0, u}; }

template <typename BasisFn>
Vec2 combine(std::span<const Vec2> ctrl, double t, BasisFn fn) {
  const int n = static_cast<int>(ctrl.size());
  const double tw = wrap_param(t, n);
  const int k = std::min(static_cast<int>(std::floor(tw)), n - 1);
  const auto w = fn(tw - k);
  Vec2 p;
  for (int m = 0; m < 4; ++m) p += ctrl[wrap_index(k - 1 + m, n)] * w[m];
  return p;
}

}  // namespace

Vec2 eval(std::span<const Vec2> ctrl, double t) { return combine(ctrl, t, basis); }
Vec2 derivative(std::span<const Vec2> ctrl, double t) { return combine(ctrl, t, basis_d1); }
Vec2 second_derivative(std::span<const Vec2> ctrl, double t) { return combine(ctrl, t, basis_d2); }

std::vector<Vec2> sample(std::span<const Vec2> ctrl, int n) {
  std::vector<Vec2> out(n);
  const double period = static_cast<double>(ctrl.size());
  for (int k = 0; k < n; ++k) out[k] = eval(ctrl, period * k / n);
  return out;
}

}  // namespace spline

// ---------------------------------------------------------------------------
// polygon

namespace polygon {

double signed_area(std::span<const Vec2> loop) {
  const std::size_t n = loop.size();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += cross(loop[i], loop[(i + 1) % n]);
  return 0.5 * acc;
}

double perimeter(std::span<const Vec2> loop) {
  double acc = 0.0;
  for (std::size_t i = 0; i < loop.size(); ++i) acc += distance(loop[i], loop[(i + 1) % loop.size()]);
  return acc;
}

double segment_distance(Vec2 p, Vec2 a, Vec2 b) {
  const Vec2 ab = b - a;
  const double len2 = dot(ab, ab);
  if (len2 == 0.0) return distance(p, a);
  const double s = std::clamp(dot(p - a, ab) / len2, 0.0, 1.0);
  return distance(p, a + ab * s);
}

bool contains(std::span<const Vec2> loop, Vec2 p, double boundary_eps) {
  const std::size_t n = loop.size();
  bool inside = false;
  for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
    const Vec2 a = loop[i];
    const Vec2 b = loop[j];
    if (segment_distance(p, a, b) <= boundary_eps) return true;
    if ((a.y > p.y) != (b.y > p.y)) {
      const double xc = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
      if (p.x < xc) inside = !inside;
    }
  }
  return inside;
}

namespace {

inline double orient(Vec2 a, Vec2 b, Vec2 c) { return cross(b - a, c - a); }

inline bool on_segment(Vec2 a, Vec2 b, Vec2 p) {
  return std::min(a.x, b.x) <= p.x && p.x <= std::max(a.x, b.x) && std::min(a.y, b.y) <= p.y &&
         p.y <= std::max(a.y, b.y);
}

bool segments_intersect(Vec2 p1, Vec2 p2, Vec2 q1, Vec2 q2) {
  const double d1 = orient(q1, q2, p1);
  const double d2 = orient(q1, q2, p2);
  const double d3 = orient(p1, p2, q1);
  const double d4 = orient(p1, p2, q2);
  if (((d1 > 0 && d2 < 0) || (d1 < 0 && d2 > 0)) && ((d3 > 0 && d4 < 0) || (d3 < 0 && d4 > 0)))
    return true;
  if (d1 == 0 && on_segment(q1, q2, p1)) return true;
  if (d2 == 0 && on_segment(q1, q2, p2)) return true;
  if (d3 == 0 && on_segment(p1, p2, q1)) return true;
  if (d4 == 0 && on_segment(p1, p2, q2)) return true;
  return false;
}

}  // namespace

bool is_simple(std::span<const Vec2> loop) {
  const std::size_t n = loop.size();
  if (n < 3) return false;
  struct Box {
    double x0, x1, y0, y1;
  };
  std::vector<Box> boxes(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2 a = loop[i];
    const Vec2 b = loop[(i + 1) % n];
    boxes[i] = {std::min(a.x, b.x), std::max(a.x, b.x), std::min(a.y, b.y), std::max(a.y, b.y)};
  }
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2 a = loop[i];
    const Vec2 b = loop[(i + 1) % n];
    // Adjacent segments share a vertex; they only fail if they fold back onto each other.
    const Vec2 c = loop[(i + 2) % n];
    if (orient(a, b, c) == 0.0 && dot(b - a, c - b) < 0.0) return false;
    for (std::size_t j = i + 2; j < n; ++j) {
      if (i == 0 && j == n - 1) continue;
      const Box& bi = boxes[i];
      const Box& bj = boxes[j];
      if (bi.x1 < bj.x0 || bj.x1 < bi.x0 || bi.y1 < bj.y0 || bj.y1 < bi.y0) continue;
      if (segments_intersect(a, b, loop[j], loop[(j + 1) % n])) return false;
    }
  }
  return true;
}

}  // namespace polygon

// ---------------------------------------------------------------------------
// Contour

Contour::Contour(std::span<const Vec2> ctrl) {
  if (ctrl.size() != static_cast<std::size_t>(kControlPoints))
    throw Error(ErrorCode::InvalidArgument,
                "contour needs exactly 52 control points, got " + std::to_string(ctrl.size()));
  ControlPolygon p{};
  std::copy(ctrl.begin(), ctrl.end(), p.begin());

  if (polygon::signed_area(spline::sample(p, kDenseSamples)) > 0.0) {
    // Reversing the control sequence reverses the parameter direction of the same curve.
    ControlPolygon q{};
    for (int k = 0; k < kControlPoints; ++k) q[k] = p[wrap_index(-k, kControlPoints)];
    p = q;
  }

  int start = 0;
  for (int k = 1; k < kControlPoints; ++k) {
    const Vec2 c = p[k];
    const Vec2 s = p[start];
    if (c.y > s.y || (c.y == s.y && c.x < s.x)) start = k;
  }
  for (int k = 0; k < kControlPoints; ++k) ctrl_[k] = p[(start + k) % kControlPoints];

  dense_ = spline::sample(ctrl_, kDenseSamples);

  const int fine_n = kControlPoints * kArcSubdivisions;
  fine_arc_.assign(fine_n + 1, 0.0);
  Vec2 prev = eval(0.0);
  for (int k = 1; k <= fine_n; ++k) {
    const Vec2 cur = eval(static_cast<double>(k) / kArcSubdivisions);
    fine_arc_[k] = fine_arc_[k - 1] + distance(prev, cur);
    prev = cur;
  }
  knot_arc_.resize(kControlPoints + 1);
  for (int i = 0; i <= kControlPoints; ++i) knot_arc_[i] = fine_arc_[i * kArcSubdivisions];
}

Vec2 Contour::centroid() const {
  Vec2 c;
  for (const Vec2& p : ctrl_) c += p;
  return c / kControlPoints;
}

double Contour::arc_length_to(double t) const {
  const double tc = std::clamp(t, 0.0, static_cast<double>(kControlPoints));
  const double f = tc * kArcSubdivisions;
  const int k = std::min(static_cast<int>(std::floor(f)), kControlPoints * kArcSubdivisions - 1);
  const double u = f - k;
  return fine_arc_[k] + u * (fine_arc_[k + 1] - fine_arc_[k]);
}

double Contour::param_at_arc_length(double s) const {
  const double total = fine_arc_.back();
  double sc = std::fmod(s, total);
  if (sc < 0) sc += total;
  const auto it = std::upper_bound(fine_arc_.begin(), fine_arc_.end(), sc);
  const int k = std::clamp(static_cast<int>(it - fine_arc_.begin()) - 1, 0,
                           kControlPoints * kArcSubdivisions - 1);
  const double seg = fine_arc_[k + 1] - fine_arc_[k];
  const double u = seg > 0 ? (sc - fine_arc_[k]) / seg : 0.0;
  return (k + u) / kArcSubdivisions;
}

Contour Contour::translated(Vec2 d) const {
  ControlPolygon p = ctrl_;
  for (Vec2& q : p) q += d;
  return Contour(p);
}

Contour Contour::scaled(double s, Vec2 about) const {
  ControlPolygon p = ctrl_;
  for (Vec2& q : p) q = about + (q - about) * s;
  return Contour(p);
}

Contour Contour::mirrored_x(double axis_x) const {
  ControlPolygon p = ctrl_;
  for (Vec2& q : p) q.x = 2.0 * axis_x - q.x;
  return Contour(p);
}

Contour canonicalize(std::span<const Vec2> ctrl) { return Contour(ctrl); }

std::vector<Vec2> sample(const Contour& contour, int n) {
  if (n < 3) throw Error(ErrorCode::InvalidArgument, "sample count must be >= 3");
  return spline::sample(contour.ctrl(), n);
}

// ---------------------------------------------------------------------------
// fitting

namespace {

ControlPolygon solve_control_points(std::span<const Vec2> pts, std::span<const double> params) {
  constexpr int n = kControlPoints;
  Eigen::MatrixXd normal = Eigen::MatrixXd::Zero(n, n);
  Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(n, 2);
  for (std::size_t s = 0; s < pts.size(); ++s) {
    const double t = wrap_param(params[s], n);
    const int k = std::min(static_cast<int>(std::floor(t)), n - 1);
    const auto w = spline::basis(t - k);
    int idx[4];
    for (int m = 0; m < 4; ++m) idx[m] = wrap_index(k - 1 + m, n);
    for (int a = 0; a < 4; ++a) {
      rhs(idx[a], 0) += w[a] * pts[s].x;
      rhs(idx[a], 1) += w[a] * pts[s].y;
      for (int b = 0; b < 4; ++b) normal(idx[a], idx[b]) += w[a] * w[b];
    }
  }
  Eigen::LDLT<Eigen::MatrixXd> ldlt(normal);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive() ||
      ldlt.vectorD().minCoeff() <= 1e-14 * ldlt.vectorD().maxCoeff())
    throw Error(ErrorCode::DegenerateLoop, "sample parameters do not support every control point");
  const Eigen::MatrixXd sol = ldlt.solve(rhs);
  ControlPolygon out{};
  for (int i = 0; i < n; ++i) out[i] = {sol(i, 0), sol(i, 1)};
  return out;
}

double project_param(std::span<const Vec2> ctrl, Vec2 p, double t) {
  for (int it = 0; it < 6; ++it) {
    const Vec2 r = spline::eval(ctrl, t) - p;
    const Vec2 d1 = spline::derivative(ctrl, t);
    const Vec2 d2 = spline::second_derivative(ctrl, t);
    double denom = dot(d1, d1) + dot(r, d2);
    if (denom <= 0.0) denom = dot(d1, d1);
    if (denom <= 0.0) break;
    const double step = std::clamp(dot(r, d1) / denom, -0.5, 0.5);
    t -= step;
    if (std::abs(step) < 1e-15) break;
  }
  return t;
}

}  // namespace

namespace {

double sum_sq_distance(std::span<const Vec2> ctrl, std::span<const Vec2> pts, std::span<const double> params) {
  double e = 0.0;
  for (std::size_t s = 0; s < pts.size(); ++s) {
    const Vec2 r = spline::eval(ctrl, params[s]) - pts[s];
    e += dot(r, r);
  }
  return e;
}

struct Candidate {
  ControlPolygon ctrl{};
  double energy = 0.0;
};

// Least squares for fixed parameters, then closest-point parameter correction passes.
Candidate fit_with_params(std::span<const Vec2> pts, std::vector<double> params) {
  Candidate best;
  best.ctrl = solve_control_points(pts, params);
  best.energy = sum_sq_distance(best.ctrl, pts, params);
  for (int pass = 0; pass < kCorrectionPasses; ++pass) {
    for (std::size_t s = 0; s < pts.size(); ++s) params[s] = project_param(best.ctrl, pts[s], params[s]);
    const ControlPolygon ctrl = solve_control_points(pts, params);
    const double energy = sum_sq_distance(ctrl, pts, params);
    if (!(energy < best.energy)) break;
    best = {ctrl, energy};
  }
  return best;
}

}  // namespace

FitResult fit_spline(std::span<const Vec2> samples) {
  std::vector<Vec2> pts;
  pts.reserve(samples.size());
  for (const Vec2& p : samples)
    if (pts.empty() || !(p == pts.back())) pts.push_back(p);
  while (pts.size() > 1 && pts.front() == pts.back()) pts.pop_back();

  if (pts.size() < static_cast<std::size_t>(kControlPoints))
    throw Error(ErrorCode::InsufficientSamples,
                "need at least 52 distinct samples, got " + std::to_string(pts.size()));

  double x0 = pts[0].x, x1 = x0, y0 = pts[0].y, y1 = y0;
  for (const Vec2& p : pts) {
    x0 = std::min(x0, p.x);
    x1 = std::max(x1, p.x);
    y0 = std::min(y0, p.y);
    y1 = std::max(y1, p.y);
  }
  const double diag = std::hypot(x1 - x0, y1 - y0);
  if (diag == 0.0 || std::abs(polygon::signed_area(pts)) <= 1e-12 * diag * diag)
    throw Error(ErrorCode::DegenerateLoop, "sample loop encloses zero area");

  const std::size_t m = pts.size();
  std::vector<double> chord(m, 0.0);
  double total = 0.0;
  for (std::size_t s = 1; s < m; ++s) {
    total += distance(pts[s - 1], pts[s]);
    chord[s] = total;
  }
  total += distance(pts[m - 1], pts[0]);
  for (double& t : chord) t = kControlPoints * t / total;

  // Index-uniform parameters reproduce a spline exactly from its own uniform samples.
  std::vector<double> uniform(m);
  for (std::size_t s = 0; s < m; ++s) uniform[s] = static_cast<double>(kControlPoints) * s / m;

  Candidate best = fit_with_params(pts, std::move(chord));
  Candidate alt = fit_with_params(pts, std::move(uniform));
  if (alt.energy < best.energy) best = alt;

  return {Contour(best.ctrl), std::sqrt(best.energy / static_cast<double>(m))};
}

// ---------------------------------------------------------------------------
// queries

NormalSet inward_normals(const Contour& contour) {
  NormalSet normals{};
  for (int i = 0; i < kControlPoints; ++i) {
    const Vec2 d = contour.derivative(i);
    const double len = norm(d);
    if (len < 1e-12)
      throw Error(ErrorCode::DegenerateTangent, "vanishing tangent at control point " + std::to_string(i));
    // Clockwise traversal keeps the interior on the right.
    normals[i] = Vec2{d.y, -d.x} / len;
  }
  return normals;
}

double enclosed_area(const Contour& contour) {
  const auto& dense = contour.dense();
  if (!polygon::is_simple(dense))
    throw Error(ErrorCode::SelfIntersecting, "dense samples self-intersect");
  const double area = -polygon::signed_area(dense);
  if (area < 1e-12) throw Error(ErrorCode::SelfIntersecting, "contour encloses no area");
  return area;
}

double arc_length_between(const Contour& contour, int i, int j) {
  if (i < 0 || j < 0 || i >= kControlPoints || j >= kControlPoints)
    throw Error(ErrorCode::InvalidArgument, "control point index out of range");
  const double d = std::abs(contour.arc_length_to(j) - contour.arc_length_to(i));
  return std::min(d, contour.perimeter() - d);
}

bool point_in_contour(const Contour& contour, Vec2 p) {
  return polygon::contains(contour.dense(), p, 1e-9);
}

OverlapSamples overlap_samples(const Contour& a, const Contour& b) {
  OverlapSamples out;
  const auto& da = a.dense();
  const auto& db = b.dense();
  auto box = [](const std::vector<Vec2>& pts) {
    std::array<double, 4> r{pts[0].x, pts[0].y, pts[0].x, pts[0].y};
    for (const Vec2& p : pts) r = {std::min(r[0], p.x), std::min(r[1], p.y), std::max(r[2], p.x), std::max(r[3], p.y)};
    return r;
  };
  const auto ba = box(da), bb = box(db);
  if (ba[2] < bb[0] || bb[2] < ba[0] || ba[3] < bb[1] || bb[3] < ba[1]) return out;
  for (int k = 0; k < static_cast<int>(da.size()); ++k)
    if (polygon::contains(db, da[k])) out.a_in_b.push_back(k);
  for (int k = 0; k < static_cast<int>(db.size()); ++k)
    if (polygon::contains(da, db[k])) out.b_in_a.push_back(k);
  return out;
}

void SplitConfig::validate() const {
  if (!(delta >= -1.0 && delta < 1.0))
    throw Error(ErrorCode::InvalidArgument, "split delta must lie in [-1, 1)");
  if (min_separation < 2 || min_separation > 25)
    throw Error(ErrorCode::InvalidArgument, "split min_separation must lie in [2, 25]");
}

double closest_param(const Contour& contour, Vec2 p) {
  const auto& dense = contour.dense();
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int k = 0; k < static_cast<int>(dense.size()); ++k) {
    const double d = distance(dense[k], p);
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  const double t0 = static_cast<double>(kControlPoints) * best / kDenseSamples;
  return wrap_param(project_param(contour.ctrl(), p, t0), kControlPoints);
}

// ---------------------------------------------------------------------------
// serialization

void write_contour(std::ostream& os, const Contour& contour) {
  os << "contour v1\n";
  for (const Vec2& p : contour.ctrl()) os << format_double(p.x) << ' ' << format_double(p.y) << '\n';
}

Contour read_contour(std::istream& is) {
  std::string header;
  if (!std::getline(is, header)) throw Error(ErrorCode::CorruptFile, "empty contour stream");
  if (!header.empty() && header.back() == '\r') header.pop_back();
  if (header != "contour v1") throw Error(ErrorCode::VersionMismatch, "expected 'contour v1', got '" + header + "'");
  std::vector<Vec2> pts;
  pts.reserve(kControlPoints);
  for (int i = 0; i < kControlPoints; ++i) {
    Vec2 p;
    if (!(is >> p.x >> p.y)) throw Error(ErrorCode::CorruptFile, "truncated contour at point " + std::to_string(i));
    pts.push_back(p);
  }
  return Contour(pts);
}

void save_contour(const std::string& path, const Contour& contour) {
  std::ofstream os(path);
  if (!os) throw Error(ErrorCode::IoError, "cannot write " + path);
  write_contour(os, contour);
}

Contour load_contour(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorCode::IoError, "cannot read " + path);
  return read_contour(is);
}

}  // namespace nd
