#include "neuraldrop/reconstruct.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>

#include <Eigen/IterativeLinearSolvers>
#include <Eigen/SparseCholesky>
#include <Eigen/SparseCore>
#include <json.hpp>

#include "neuraldrop/image.hpp"

namespace nd {

void GridSpec::validate() const {
  if (nx < 8 || ny < 8) throw Error(ErrorCode::InvalidArgument, "grid needs at least 8x8 cells");
  if (!(h > 0) || !std::isfinite(h)) throw Error(ErrorCode::InvalidArgument, "grid spacing must be > 0");
}

GridSpec default_grid(const Contour& contour, int min_cells) {
  if (min_cells < 8 || min_cells > 248) throw Error(ErrorCode::InvalidArgument, "min_cells must be in [8, 248]");
  Vec2 lo{1e300, 1e300}, hi{-1e300, -1e300};
  for (const Vec2& p : contour.dense()) {
    lo = {std::min(lo.x, p.x), std::min(lo.y, p.y)};
    hi = {std::max(hi.x, p.x), std::max(hi.y, p.y)};
  }
  const double w = hi.x - lo.x, ht = hi.y - lo.y;
  GridSpec g;
  g.h = std::max(w, ht) / min_cells;
  if (!(g.h > 0)) throw Error(ErrorCode::ContourTooSmall, "contour has no extent");
  g.nx = std::min(256, static_cast<int>(std::ceil(w / g.h)) + 8);
  g.ny = std::min(256, static_cast<int>(std::ceil(ht / g.h)) + 8);
  g.origin = {0.5 * (lo.x + hi.x) - 0.5 * g.nx * g.h, 0.5 * (lo.y + hi.y) - 0.5 * g.ny * g.h};
  return g;
}

int ReconstructionProblem::count(CellClass c) const {
  return static_cast<int>(std::count(cells.begin(), cells.end(), c));
}

namespace {

struct StencilTap {
  int di, dj;
  double w;
};

// The 5-point Laplacian applied twice, scaled by h^4.
constexpr StencilTap kStencil[13] = {
    {0, 0, 20},  {1, 0, -8},  {-1, 0, -8}, {0, 1, -8}, {0, -1, -8}, {1, 1, 2},  {1, -1, 2},
    {-1, 1, 2},  {-1, -1, 2}, {2, 0, 1},   {-2, 0, 1}, {0, 2, 1},   {0, -2, 1},
};

bool inside(CellClass c) { return c != CellClass::Exterior; }

}  // namespace

void ReconstructionProblem::validate() const {
  grid.validate();
  const std::size_t n = grid.size();
  if (cells.size() != n || dirichlet.size() != n || neumann.size() != n || band_gradient.size() != n)
    throw Error(ErrorCode::InvalidArgument, "problem arrays do not match the grid");
  for (int j = 0; j < grid.ny; ++j)
    for (int i = 0; i < grid.nx; ++i) {
      if (cells[grid.index(i, j)] != CellClass::Interior) continue;
      if (i < 2 || j < 2 || i >= grid.nx - 2 || j >= grid.ny - 2)
        throw Error(ErrorCode::MarginViolation, "interior cell stencil leaves the grid");
    }
}

ReconstructionProblem rasterize(const Contour& contour, const GradientProfile& profile, const GridSpec& grid) {
  grid.validate();
  profile.validate();
  const double lo_x = grid.origin.x + 3 * grid.h, hi_x = grid.origin.x + (grid.nx - 3) * grid.h;
  const double lo_y = grid.origin.y + 3 * grid.h, hi_y = grid.origin.y + (grid.ny - 3) * grid.h;
  for (const Vec2& p : contour.dense())
    if (p.x < lo_x || p.x > hi_x || p.y < lo_y || p.y > hi_y)
      throw Error(ErrorCode::MarginViolation, "contour is not inside the grid with a 3-cell margin");

  ReconstructionProblem pb;
  pb.grid = grid;
  const std::size_t n = grid.size();
  pb.cells.assign(n, CellClass::Exterior);
  pb.dirichlet.assign(n, 0.0);
  pb.neumann.assign(n, 0.0);
  pb.band_gradient.assign(n, Vec2{});
  for (int j = 0; j < grid.ny; ++j)
    for (int i = 0; i < grid.nx; ++i)
      if (point_in_contour(contour, grid.center(i, j))) pb.cells[grid.index(i, j)] = CellClass::Interior;
  if (pb.count(CellClass::Interior) < 4) throw Error(ErrorCode::ContourTooSmall, "fewer than 4 cells inside the contour");

  std::vector<int> band;
  for (int j = 1; j + 1 < grid.ny; ++j)
    for (int i = 1; i + 1 < grid.nx; ++i) {
      const int id = grid.index(i, j);
      if (pb.cells[id] != CellClass::Interior) continue;
      const bool edge = !inside(pb.cells[grid.index(i + 1, j)]) || !inside(pb.cells[grid.index(i - 1, j)]) ||
                        !inside(pb.cells[grid.index(i, j + 1)]) || !inside(pb.cells[grid.index(i, j - 1)]);
      if (edge) band.push_back(id);
    }
  for (int id : band) {
    pb.cells[id] = CellClass::Band;
    const Vec2 x = grid.center(id % grid.nx, id / grid.nx);
    const double t = closest_param(contour, x);
    const Vec2 d = contour.derivative(t);
    const Vec2 inward = Vec2{d.y, -d.x} / norm(d);
    const double g = profile_at(contour, profile, t);
    pb.neumann[id] = g;
    pb.band_gradient[id] = inward * g;
  }
  return pb;
}

namespace {

struct LinearSystem {
  std::vector<int> unknown_of;  // cell -> unknown index or -1
  std::vector<int> cell_of;
  Eigen::SparseMatrix<double> A;
  Eigen::VectorXd b;
};

LinearSystem assemble(const ReconstructionProblem& pb) {
  pb.validate();
  const GridSpec& g = pb.grid;
  LinearSystem sys;
  sys.unknown_of.assign(g.size(), -1);
  for (std::size_t c = 0; c < g.size(); ++c)
    if (pb.cells[c] == CellClass::Interior) {
      sys.unknown_of[c] = static_cast<int>(sys.cell_of.size());
      sys.cell_of.push_back(static_cast<int>(c));
    }
  const int n = static_cast<int>(sys.cell_of.size());
  if (n == 0) throw Error(ErrorCode::SingularSystem, "no interior unknowns");

  std::vector<double> ghost(g.size(), std::numeric_limits<double>::quiet_NaN());
  // A ghost is always 4-adjacent to a band cell; it takes the mean of the
  // extrapolations from those neighbors.
  auto ghost_value = [&](int gi, int gj) {
    const int id = g.index(gi, gj);
    if (!std::isnan(ghost[id])) return ghost[id];
    const Vec2 x = g.center(gi, gj);
    double sum = 0.0;
    int n_band = 0;
    constexpr int kNb[4][2] = {{1, 0}, {-1, 0}, {0, 1}, {0, -1}};
    for (const auto& d : kNb) {
      const int i = gi + d[0], j = gj + d[1];
      if (i < 0 || j < 0 || i >= g.nx || j >= g.ny) continue;
      const int c = g.index(i, j);
      if (pb.cells[c] != CellClass::Band) continue;
      sum += pb.dirichlet[c] + dot(pb.band_gradient[c], x - g.center(i, j));
      ++n_band;
    }
    if (n_band == 0) throw Error(ErrorCode::SingularSystem, "ghost cell without a neighboring band cell");
    ghost[id] = sum / n_band;
    return ghost[id];
  };

  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(static_cast<std::size_t>(n) * 13);
  sys.b = Eigen::VectorXd::Zero(n);
  for (int u = 0; u < n; ++u) {
    const int c = sys.cell_of[u];
    const int i = c % g.nx, j = c / g.nx;
    for (const auto& tap : kStencil) {
      const int qi = i + tap.di, qj = j + tap.dj;
      const int q = g.index(qi, qj);
      switch (pb.cells[q]) {
        case CellClass::Interior: trip.emplace_back(u, sys.unknown_of[q], tap.w); break;
        case CellClass::Band: sys.b(u) -= tap.w * pb.dirichlet[q]; break;
        case CellClass::Exterior: sys.b(u) -= tap.w * ghost_value(qi, qj); break;
      }
    }
  }
  sys.A.resize(n, n);
  sys.A.setFromTriplets(trip.begin(), trip.end());
  return sys;
}

ColorField scatter(const ReconstructionProblem& pb, const LinearSystem& sys, const Eigen::VectorXd& x) {
  ColorField f;
  f.grid = pb.grid;
  f.values.assign(pb.grid.size(), 0.0);
  for (std::size_t c = 0; c < pb.grid.size(); ++c)
    if (pb.cells[c] == CellClass::Band) f.values[c] = pb.dirichlet[c];
  for (std::size_t u = 0; u < sys.cell_of.size(); ++u) f.values[sys.cell_of[u]] = x(static_cast<Eigen::Index>(u));
  return f;
}

}  // namespace

ColorField solve_biharmonic(const ReconstructionProblem& pb, const SolveOptions& opt) {
  if (!(opt.tol > 0)) throw Error(ErrorCode::InvalidArgument, "tolerance must be > 0");
  const LinearSystem sys = assemble(pb);
  const Eigen::Index n = sys.b.size();
  const double bnorm = sys.b.norm();
  if (bnorm == 0.0) return scatter(pb, sys, Eigen::VectorXd::Zero(n));
  const int max_iter = opt.max_iter > 0 ? opt.max_iter : static_cast<int>(10 * n);

  Eigen::ConjugateGradient<Eigen::SparseMatrix<double>, Eigen::Lower | Eigen::Upper> cg;
  cg.compute(sys.A);
  cg.setTolerance(opt.tol);
  Eigen::VectorXd x = Eigen::VectorXd::Zero(n);
  int iterations = 0;
  double residual = 1.0;
  // The recurrence residual can drift from the true one; restart until the true
  // residual meets the tolerance or the budget runs out.
  while (iterations < max_iter) {
    cg.setMaxIterations(max_iter - iterations);
    x = cg.solveWithGuess(sys.b, x);
    iterations += static_cast<int>(cg.iterations());
    residual = (sys.b - sys.A * x).norm() / bnorm;
    if (!x.allFinite()) throw Error(ErrorCode::SingularSystem, "conjugate gradients broke down");
    if (residual <= opt.tol || cg.iterations() == 0) break;
  }
  if (!(residual <= opt.tol))
    throw Error(ErrorCode::NoConvergence, "relative residual " + format_double(residual) + " after " +
                                              std::to_string(iterations) + " iterations");
  ColorField f = scatter(pb, sys, x);
  f.iterations = iterations;
  f.residual = residual;
  return f;
}

ColorField solve_biharmonic_direct(const ReconstructionProblem& pb) {
  const LinearSystem sys = assemble(pb);
  Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> ldlt(sys.A);
  if (ldlt.info() != Eigen::Success) throw Error(ErrorCode::SingularSystem, "LDLT factorization failed");
  const Eigen::VectorXd x = ldlt.solve(sys.b);
  ColorField f = scatter(pb, sys, x);
  const double bnorm = sys.b.norm();
  f.residual = bnorm > 0 ? (sys.b - sys.A * x).norm() / bnorm : 0.0;
  return f;
}

// ---------------------------------------------------------------- heights

double HeightField::integral() const {
  double s = 0.0;
  for (double v : values) s += v;
  return s * grid.h * grid.h;
}

HeightField color_to_height(const ColorField& c, const std::vector<CellClass>& cells, double volume) {
  if (cells.size() != c.values.size()) throw Error(ErrorCode::InvalidArgument, "cell classes do not match the field");
  if (!(volume >= 0) || !std::isfinite(volume)) throw Error(ErrorCode::InvalidArgument, "volume must be >= 0");
  HeightField hf;
  hf.grid = c.grid;
  hf.cells = cells;
  hf.volume = volume;
  hf.values.assign(c.values.size(), 0.0);
  for (std::size_t k = 0; k < cells.size(); ++k)
    if (inside(cells[k])) hf.values[k] = std::max(0.0, c.values[k]);
  const double total = hf.integral();
  if (!(total > 0)) throw Error(ErrorCode::DegenerateField, "color field integrates to zero");
  const double scale = volume / total;
  for (double& v : hf.values) v *= scale;
  return hf;
}

HeightField smooth(const HeightField& field, int iters) {
  if (iters < 0) throw Error(ErrorCode::InvalidArgument, "iterations must be >= 0");
  if (iters == 0) return field;
  const GridSpec& g = field.grid;
  HeightField out = field;
  for (std::size_t k = 0; k < out.values.size(); ++k)
    if (out.cells[k] != CellClass::Interior) out.values[k] = 0.0;
  std::vector<double> next(out.values.size());
  for (int it = 0; it < iters; ++it) {
    next = out.values;
    for (int j = 1; j + 1 < g.ny; ++j)
      for (int i = 1; i + 1 < g.nx; ++i) {
        const int c = g.index(i, j);
        if (out.cells[c] != CellClass::Interior) continue;
        next[c] = (out.values[c] + out.values[c - 1] + out.values[c + 1] + out.values[c - g.nx] + out.values[c + g.nx]) / 5.0;
      }
    out.values.swap(next);
  }
  const double total = out.integral();
  if (total > 0) {
    const double scale = out.volume / total;
    for (double& v : out.values) v *= scale;
  }
  return out;
}

// ---------------------------------------------------------------- terrain

Terrain Terrain::plane(double incline_deg) {
  Terrain t;
  t.kind = Kind::Plane;
  t.incline_deg = incline_deg;
  return t;
}

double Terrain::height(Vec2 p) const {
  if (kind == Kind::Plane) return p.y * std::tan(incline_deg * M_PI / 180.0);
  const double fx = std::clamp((p.x - grid.origin.x) / grid.h - 0.5, 0.0, grid.nx - 1.0);
  const double fy = std::clamp((p.y - grid.origin.y) / grid.h - 0.5, 0.0, grid.ny - 1.0);
  const int i0 = std::min(static_cast<int>(fx), grid.nx - 2), j0 = std::min(static_cast<int>(fy), grid.ny - 2);
  const double ax = fx - i0, ay = fy - j0;
  auto z = [&](int i, int j) { return heights[grid.index(i, j)]; };
  return (1 - ay) * ((1 - ax) * z(i0, j0) + ax * z(i0 + 1, j0)) + ay * ((1 - ax) * z(i0, j0 + 1) + ax * z(i0 + 1, j0 + 1));
}

Vec2 Terrain::slope(Vec2 p) const {
  if (kind == Kind::Plane) return {0.0, std::tan(incline_deg * M_PI / 180.0)};
  const double e = 0.5 * grid.h;
  return {(height(p + Vec2{e, 0}) - height(p - Vec2{e, 0})) / (2 * e),
          (height(p + Vec2{0, e}) - height(p - Vec2{0, e})) / (2 * e)};
}

double Terrain::incline_at(Vec2 p) const {
  if (kind == Kind::Plane) return incline_deg;
  return std::atan(norm(slope(p))) * 180.0 / M_PI;
}

namespace {

std::filesystem::path sidecar_path(const std::string& pgm_path) {
  return std::filesystem::path(pgm_path).replace_extension(".json");
}

}  // namespace

Terrain load_terrain(const std::string& pgm_path) {
  const Image16 img = read_pgm16(pgm_path);
  const auto side = sidecar_path(pgm_path);
  std::ifstream is(side);
  if (!is) throw Error(ErrorCode::IoError, "missing terrain sidecar " + side.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const std::exception& e) {
    throw Error(ErrorCode::CorruptFile, "terrain sidecar is not valid JSON: " + std::string(e.what()));
  }
  if (!j.contains("h") || !j.contains("z_scale") || !j["h"].is_number() || !j["z_scale"].is_number())
    throw Error(ErrorCode::CorruptFile, "terrain sidecar needs numeric h and z_scale");
  Terrain t;
  t.kind = Terrain::Kind::Field;
  t.grid.nx = img.width;
  t.grid.ny = img.height;
  t.grid.h = j["h"].get<double>();
  if (img.width < 2 || img.height < 2 || !(t.grid.h > 0)) throw Error(ErrorCode::CorruptFile, "degenerate terrain grid");
  const double zs = j["z_scale"].get<double>();
  t.heights.resize(t.grid.size());
  for (int r = 0; r < img.height; ++r)
    for (int c = 0; c < img.width; ++c)
      t.heights[t.grid.index(c, img.height - 1 - r)] = img.values[static_cast<std::size_t>(r) * img.width + c] * zs;
  return t;
}

void save_terrain(const std::string& pgm_path, const Terrain& terrain, double z_scale) {
  if (terrain.kind != Terrain::Kind::Field) throw Error(ErrorCode::InvalidArgument, "only sampled terrain can be saved");
  if (!(z_scale > 0)) throw Error(ErrorCode::InvalidArgument, "z_scale must be > 0");
  Image16 img;
  img.width = terrain.grid.nx;
  img.height = terrain.grid.ny;
  img.values.resize(terrain.grid.size());
  for (int r = 0; r < img.height; ++r)
    for (int c = 0; c < img.width; ++c) {
      const double v = std::round(terrain.heights[terrain.grid.index(c, img.height - 1 - r)] / z_scale);
      img.values[static_cast<std::size_t>(r) * img.width + c] = static_cast<std::uint16_t>(std::clamp(v, 0.0, 65535.0));
    }
  write_pgm16(pgm_path, img);
  nlohmann::ordered_json j;
  j["h"] = terrain.grid.h;
  j["z_scale"] = z_scale;
  std::ofstream os(sidecar_path(pgm_path));
  if (!os) throw Error(ErrorCode::IoError, "cannot write terrain sidecar");
  os << j.dump() << '\n';
}

// ---------------------------------------------------------------- meshes

Mesh build_mesh(const HeightField& field, const Terrain* terrain) {
  const GridSpec& g = field.grid;
  Mesh mesh;
  std::vector<int> vid(g.size(), -1);
  for (int j = 0; j < g.ny; ++j)
    for (int i = 0; i < g.nx; ++i) {
      const int c = g.index(i, j);
      if (!inside(field.cells[c])) continue;
      const Vec2 p = g.center(i, j);
      const double base = terrain ? terrain->height(p) : 0.0;
      const double z = base + (field.cells[c] == CellClass::Interior ? field.values[c] : 0.0);
      vid[c] = static_cast<int>(mesh.vertices.size());
      mesh.vertices.push_back({p.x, p.y, z});
    }
  for (int j = 0; j + 1 < g.ny; ++j)
    for (int i = 0; i + 1 < g.nx; ++i) {
      // Counter-clockwise corners of the 2x2 block.
      const int q[4] = {vid[g.index(i, j)], vid[g.index(i + 1, j)], vid[g.index(i + 1, j + 1)], vid[g.index(i, j + 1)]};
      const int present = (q[0] >= 0) + (q[1] >= 0) + (q[2] >= 0) + (q[3] >= 0);
      if (present == 4) {
        mesh.faces.push_back({q[0], q[1], q[2]});
        mesh.faces.push_back({q[0], q[2], q[3]});
      } else if (present == 3) {
        std::array<int, 3> f{};
        int n = 0;
        for (int k = 0; k < 4; ++k)
          if (q[k] >= 0) f[n++] = q[k];
        mesh.faces.push_back(f);
      }
    }
  return mesh;
}

void write_obj(std::ostream& os, const Mesh& mesh) {
  char buf[96];
  for (const auto& v : mesh.vertices) {
    std::snprintf(buf, sizeof(buf), "v %.9g %.9g %.9g\n", v[0], v[1], v[2]);
    os << buf;
  }
  for (const auto& f : mesh.faces) os << "f " << f[0] + 1 << ' ' << f[1] + 1 << ' ' << f[2] + 1 << '\n';
}

void export_mesh(const HeightField& field, const Terrain* terrain, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorCode::IoError, "cannot write " + path);
  write_obj(os, build_mesh(field, terrain));
  if (!os) throw Error(ErrorCode::IoError, "write failed: " + path);
}

void save_field_pgm(const std::string& path, const GridSpec& grid, const std::vector<double>& values) {
  double peak = 0.0;
  for (double v : values) peak = std::max(peak, std::abs(v));
  Image16 img;
  img.width = grid.nx;
  img.height = grid.ny;
  img.values.resize(grid.size());
  for (int r = 0; r < grid.ny; ++r)
    for (int c = 0; c < grid.nx; ++c) {
      const double v = peak > 0 ? std::max(0.0, values[grid.index(c, grid.ny - 1 - r)]) / peak : 0.0;
      img.values[static_cast<std::size_t>(r) * grid.nx + c] = static_cast<std::uint16_t>(std::lround(v * 65535.0));
    }
  write_pgm16(path, img);
}

Reconstruction reconstruct(const Contour& contour, const GradientProfile& profile, double volume, int smooth_iters,
                           int min_cells) {
  Reconstruction r;
  r.problem = rasterize(contour, profile, default_grid(contour, min_cells));
  r.color = solve_biharmonic(r.problem);
  r.height = smooth(color_to_height(r.color, r.problem.cells, volume), smooth_iters);
  return r;
}

}  // namespace nd
