#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "neuraldrop/dataprep.hpp"

namespace nd {

/// Regular grid; cell (i, j) has its center at origin + ((i + 0.5) h, (j + 0.5) h), y up.
struct GridSpec {
  int nx = 0;
  int ny = 0;
  double h = 0.0;
  Vec2 origin;

  void validate() const;
  Vec2 center(int i, int j) const { return {origin.x + (i + 0.5) * h, origin.y + (j + 0.5) * h}; }
  int index(int i, int j) const { return j * nx + i; }
  std::size_t size() const { return static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny); }
  bool operator==(const GridSpec&) const = default;
};

/// Tight bounding box plus a 4-cell margin, h chosen so the larger extent spans at
/// least `min_cells` cells, capped at 256 cells per side.
GridSpec default_grid(const Contour& contour, int min_cells = 96);

enum class CellClass : std::uint8_t { Exterior, Band, Interior };

struct ReconstructionProblem {
  GridSpec grid;
  std::vector<CellClass> cells;
  // Band-cell data, indexed like `cells` and only meaningful on band cells.
  std::vector<double> dirichlet;
  std::vector<double> neumann;
  // Gradient used to extrapolate ghost values, g * n_inward in production. A test can
  // replace it with the full gradient of a manufactured solution.
  std::vector<Vec2> band_gradient;

  int count(CellClass c) const;
  /// Every interior cell's 13-point stencil stays inside the grid.
  void validate() const;
};

/// Classifies cells by point_in_contour at their centers; the band is the set of inside
/// cells with an outside 4-neighbor. Neumann values are the profile interpolated linearly
/// in arc length at the closest curve point. Dirichlet values are 0.
/// Throws ContourTooSmall (< 4 inside cells) and MarginViolation (contour within 3 cells
/// of the grid edge).
ReconstructionProblem rasterize(const Contour& contour, const GradientProfile& profile, const GridSpec& grid);

struct SolveOptions {
  double tol = 1e-8;
  // 0 means 10 times the number of unknowns.
  int max_iter = 0;
};

struct ColorField {
  GridSpec grid;
  std::vector<double> values;  // band cells hold their Dirichlet value, exterior 0
  int iterations = 0;
  double residual = 0.0;  // ||b - A x|| / ||b||, 0 for a zero right-hand side
};

/// 13-point biharmonic stencil on interior cells. Band cells are Dirichlet; exterior
/// cells reached by a stencil are ghosts extrapolated from their nearest band cell b:
/// c_ghost = dirichlet(b) + band_gradient(b) . (x_ghost - x_b). Solved by Jacobi
/// preconditioned conjugate gradients. Throws NoConvergence and SingularSystem.
ColorField solve_biharmonic(const ReconstructionProblem& problem, const SolveOptions& opt = {});

/// Same discretization solved by sparse LDLT, for cross-checking small grids.
ColorField solve_biharmonic_direct(const ReconstructionProblem& problem);

struct HeightField {
  GridSpec grid;
  std::vector<CellClass> cells;
  std::vector<double> values;
  double volume = 0.0;

  double integral() const;
};

/// Negative colors inside the drop are clamped to 0, then everything is scaled so the
/// integral equals `volume`. Throws DegenerateField when the integral is not positive.
HeightField color_to_height(const ColorField& c, const std::vector<CellClass>& cells, double volume);

/// Each pass replaces every interior cell by the mean of itself and its 4 neighbors,
/// with band and exterior cells held at 0; the result is rescaled to the tracked volume.
HeightField smooth(const HeightField& field, int iters = 3);

/// Ground surface under the drops: an inclined plane or a sampled height field.
struct Terrain {
  enum class Kind { Plane, Field };
  Kind kind = Kind::Plane;
  // Plane: z = y tan(incline), so drops run toward -y.
  double incline_deg = 30.0;
  // Field: heights at cell centers, cell (i, j) row-major with j = 0 at the bottom.
  GridSpec grid;
  std::vector<double> heights;

  static Terrain plane(double incline_deg);
  double height(Vec2 p) const;
  /// Surface gradient dz/dx, dz/dy.
  Vec2 slope(Vec2 p) const;
  /// Incline angle in degrees, atan(|slope|).
  double incline_at(Vec2 p) const;
};

/// 16-bit PGM plus a JSON sidecar (same stem, .json) holding {"h", "z_scale"}; the
/// height of a pixel is value * z_scale. The top image row is the highest y.
Terrain load_terrain(const std::string& pgm_path);
void save_terrain(const std::string& pgm_path, const Terrain& terrain, double z_scale);

struct Mesh {
  std::vector<std::array<double, 3>> vertices;
  std::vector<std::array<int, 3>> faces;  // 0-based, counter-clockwise seen from +z
};

/// Vertices at the centers of inside cells, z = terrain + height, band cells at the
/// terrain. Two triangles per 2x2 block of inside cells, one when exactly three are inside.
Mesh build_mesh(const HeightField& field, const Terrain* terrain = nullptr);
/// OBJ with v/f records only, 9 significant digits.
void write_obj(std::ostream& os, const Mesh& mesh);
void export_mesh(const HeightField& field, const Terrain* terrain, const std::string& path);

/// Debug dump of a field as a 16-bit PGM scaled to its own maximum.
void save_field_pgm(const std::string& path, const GridSpec& grid, const std::vector<double>& values);

struct Reconstruction {
  ReconstructionProblem problem;
  ColorField color;
  HeightField height;
};

/// rasterize -> solve -> color_to_height -> smooth on the default grid.
Reconstruction reconstruct(const Contour& contour, const GradientProfile& profile, double volume, int smooth_iters = 3,
                           int min_cells = 96);

}  // namespace nd
