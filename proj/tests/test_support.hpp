#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "neuraldrop/geometry.hpp"
#include "neuraldrop/reconstruct.hpp"

namespace nd::testing {

inline std::vector<Vec2> circle_samples(Vec2 c, double r, int n, bool clockwise = true, double phase = M_PI / 2) {
  std::vector<Vec2> pts(n);
  for (int k = 0; k < n; ++k) {
    const double a = phase + (clockwise ? -1.0 : 1.0) * 2.0 * M_PI * k / n;
    pts[k] = {c.x + r * std::cos(a), c.y + r * std::sin(a)};
  }
  return pts;
}

inline Contour circle_contour(Vec2 c, double r) { return fit_spline(circle_samples(c, r, 256)).contour; }

/// Star-shaped smooth blob with a few random harmonics.
inline Contour random_blob(std::mt19937_64& rng, Vec2 c, double r0, double amp = 0.25) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double a[4], ph[4];
  for (int k = 0; k < 4; ++k) {
    a[k] = amp * u(rng) / (k + 1);
    ph[k] = 2 * M_PI * u(rng);
  }
  std::vector<Vec2> pts(256);
  for (int k = 0; k < 256; ++k) {
    const double t = M_PI / 2 - 2 * M_PI * k / 256;
    double r = 1.0;
    for (int h = 0; h < 4; ++h) r += a[h] * std::cos((h + 2) * t + ph[h]);
    pts[k] = {c.x + r0 * r * std::cos(t), c.y + r0 * r * std::sin(t)};
  }
  return fit_spline(pts).contour;
}

/// Two discs of radius lobe_r centered at +-half_gap joined by a band of half-width neck.
inline Contour dumbbell(Vec2 c, double lobe_r, double half_gap, double neck, double tilt = 0.0) {
  auto width = [&](double x) {
    double w = 0.0;
    for (double g : {half_gap, -half_gap}) {
      const double d = lobe_r * lobe_r - (x - g) * (x - g);
      if (d > 0) w = std::max(w, std::sqrt(d));
    }
    if (std::abs(x) <= half_gap) w = std::max(w, neck);
    return w;
  };
  const double ext = half_gap + lobe_r;
  std::vector<Vec2> local;
  const int n = 200;
  for (int k = 0; k < n; ++k) {
    const double x = -ext * std::cos(M_PI * k / n);
    local.push_back({x, width(x)});
  }
  for (int k = 0; k < n; ++k) {
    const double x = ext * std::cos(M_PI * k / n);
    local.push_back({x, -width(x)});
  }
  std::vector<Vec2> pts;
  for (const Vec2& p : local)
    pts.push_back({c.x + p.x * std::cos(tilt) - p.y * std::sin(tilt), c.y + p.x * std::sin(tilt) + p.y * std::cos(tilt)});
  return fit_spline(pts).contour;
}

/// Solves the biharmonic problem on a disc of radius 0.25 centered at (0.5, 0.5) with
/// Dirichlet values and ghost gradients sampled from an exact biharmonic function c*,
/// and returns max |c - c*| over the drop divided by max |c*| there.
template <typename F, typename G>
double manufactured_error(double h, F exact, G gradient) {
  const int n = static_cast<int>(std::lround(1.0 / h));
  GridSpec grid{n, n, h, {0.0, 0.0}};
  GradientProfile flat;
  flat.mags.fill(1.0);
  ReconstructionProblem pb = rasterize(circle_contour({0.5, 0.5}, 0.25), flat, grid);
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < n; ++i) {
      const int c = grid.index(i, j);
      if (pb.cells[c] != CellClass::Band) continue;
      const Vec2 x = grid.center(i, j);
      pb.dirichlet[c] = exact(x);
      pb.band_gradient[c] = gradient(x);
    }
  SolveOptions opt;
  opt.tol = 1e-12;
  const ColorField f = solve_biharmonic(pb, opt);
  double err = 0.0, peak = 0.0;
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < n; ++i) {
      const int c = grid.index(i, j);
      if (pb.cells[c] == CellClass::Exterior) continue;
      const double e = exact(grid.center(i, j));
      err = std::max(err, std::abs(f.values[c] - e));
      peak = std::max(peak, std::abs(e));
    }
  return err / peak;
}

inline double cubic_sum(Vec2 p) { return p.x * p.x * p.x + p.y * p.y * p.y; }
inline Vec2 cubic_sum_grad(Vec2 p) { return {3 * p.x * p.x, 3 * p.y * p.y}; }
inline double saddle(Vec2 p) { return p.x * p.x - p.y * p.y; }
inline Vec2 saddle_grad(Vec2 p) { return {2 * p.x, -2 * p.y}; }

}  // namespace nd::testing
