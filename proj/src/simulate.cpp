#include "neuraldrop/simulate.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <ostream>
#include <set>

#include <boost/geometry.hpp>
#include <boost/geometry/geometries/point_xy.hpp>
#include <json.hpp>

#include "neuraldrop/image.hpp"

namespace nd {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- drop state

void DropState::push(TrackEntry e) {
  if (history.empty()) throw Error(ErrorCode::InvalidArgument, "drop history is not initialized");
  std::rotate(history.begin(), history.begin() + 1, history.end());
  history.back() = std::move(e);
}

void DropState::validate(int K) const {
  if (static_cast<int>(history.size()) != K)
    throw Error(ErrorCode::InvalidArgument, "drop " + std::to_string(id) + " history length " +
                                                std::to_string(history.size()) + " != K = " + std::to_string(K));
  if (!(volume > 0) || !std::isfinite(volume))
    throw Error(ErrorCode::InvalidArgument, "drop " + std::to_string(id) + " volume must be > 0");
  for (const auto& e : history)
    if (!(canonicalize(e.contour.ctrl()) == e.contour))
      throw Error(ErrorCode::InvalidArgument, "drop " + std::to_string(id) + " holds a non-canonical contour");
}

// ---------------------------------------------------------------- database

std::array<double, kShapeDim> InitDatabase::normalize(const Contour& c) {
  const Vec2 m = c.centroid();
  double ss = 0.0;
  for (const Vec2& p : c.ctrl()) {
    const Vec2 d = p - m;
    ss += dot(d, d);
  }
  const double rms = std::sqrt(ss / kControlPoints);
  if (!(rms > 0)) throw Error(ErrorCode::InvalidArgument, "contour has zero extent");
  std::array<double, kShapeDim> out{};
  for (int i = 0; i < kControlPoints; ++i) {
    out[i] = (c.ctrl()[i].x - m.x) / rms;
    out[kControlPoints + i] = (c.ctrl()[i].y - m.y) / rms;
  }
  return out;
}

namespace {

double shape_distance(const std::array<double, kShapeDim>& a, const std::array<double, kShapeDim>& b) {
  double s = 0.0;
  for (int i = 0; i < kShapeDim; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

}  // namespace

bool InitDatabase::add(const Contour& contour, const GradientProfile& gradient, double dedupe_eps) {
  const auto shape = normalize(contour);
  for (const auto& s : shapes_)
    if (shape_distance(s, shape) < dedupe_eps) return false;
  shapes_.push_back(shape);
  gradients_.push_back(gradient);
  return true;
}

std::pair<std::size_t, double> InitDatabase::nearest(const Contour& query) const {
  if (shapes_.empty()) throw Error(ErrorCode::EmptyDatabase, "gradient database '" + source_ + "' is empty");
  const auto q = normalize(query);
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < shapes_.size(); ++i) {
    const double d = shape_distance(shapes_[i], q);
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  return {best, best_d};
}

InitDatabase database_from_tracks(const std::vector<TrackedSequence>& seqs, const std::string& source) {
  InitDatabase db(source);
  for (const auto& s : seqs)
    for (const auto& e : s.frames) db.add(e.contour, e.gradient);
  return db;
}

DropState init_drop(const Contour& contour, const GradientProfile& gradient, double volume, int K, int id) {
  if (K < 1) throw Error(ErrorCode::InvalidArgument, "K must be >= 1");
  if (!(volume > 0) || !std::isfinite(volume)) throw Error(ErrorCode::InvalidArgument, "drop volume must be > 0");
  gradient.validate();
  DropState d;
  d.id = id;
  d.volume = volume;
  d.history.assign(K, TrackEntry{contour, gradient, contour.centroid()});
  return d;
}

DropState init_drop(const Contour& contour, double volume, const InitDatabase& db, int K, int id) {
  const auto [idx, dist] = db.nearest(contour);
  (void)dist;
  return init_drop(contour, db.gradient(idx), volume, K, id);
}

double incline_scale(double theta_deg) {
  if (!(theta_deg > 0))
    throw Error(ErrorCode::DegenerateIncline, "incline " + format_double(theta_deg) + " deg gives no flow");
  if (!(theta_deg <= 90)) throw Error(ErrorCode::InvalidArgument, "incline must be <= 90 deg");
  return std::cbrt(std::sin(theta_deg * std::numbers::pi / 180.0));
}

// ---------------------------------------------------------------- prediction

Models Models::load(const std::string& contour_path, const std::string& gradient_path,
                    const std::string& breakage_path) {
  Models m{nn::load_model(contour_path), nn::load_model(gradient_path), nn::load_model(breakage_path)};
  if (m.contour.input_dim != kStepDim || m.contour.output_dim() != kStepDim)
    throw Error(ErrorCode::DimMismatch, "contour model must map 106 -> 106");
  if (m.gradient.input_dim != kControlPoints || m.gradient.output_dim() != kControlPoints)
    throw Error(ErrorCode::DimMismatch, "gradient model must map 52 -> 52");
  if (m.breakage.input_dim != kShapeDim || m.breakage.output_dim() != 1)
    throw Error(ErrorCode::DimMismatch, "breakage model must map 104 -> 1");
  return m;
}

TrackEntry predict_step(const DropState& state, const Models& models, double theta_avg_deg) {
  if (state.history.empty()) throw Error(ErrorCode::InvalidArgument, "drop history is not initialized");
  const double s_rel = incline_scale(theta_avg_deg) / incline_scale(kTrainingIncline);
  const int K = static_cast<int>(state.history.size());

  std::vector<Contour> scaled;
  scaled.reserve(K);
  for (const auto& e : state.history) scaled.push_back(s_rel == 1.0 ? e.contour : e.contour.scaled(s_rel, e.center));
  const Vec2 ref = scaled.back().centroid();
  const Vec2 origin = state.history.front().center;

  nn::Sequence xs(K, nn::Mat(kStepDim, 1));
  nn::Sequence gs(K, nn::Mat(kControlPoints, 1));
  const double gscale = s_rel / models.gradient.feature_scale;
  for (int k = 0; k < K; ++k) {
    const auto f = step_features(scaled[k], ref, state.history[k].center - origin);
    for (int r = 0; r < kStepDim; ++r) xs[k](r, 0) = f[r];
    for (int r = 0; r < kControlPoints; ++r) gs[k](r, 0) = state.history[k].gradient.mags[r] * gscale;
  }

  const nn::Mat out = nn::forward(models.contour, xs, false);
  const nn::Mat gout = nn::forward(models.gradient, gs, false);
  if (!out.allFinite() || !gout.allFinite())
    throw Error(ErrorCode::NonFinitePrediction, "drop " + std::to_string(state.id) + ": network output is not finite");

  Contour next = [&] {
    try {
      Contour c = decode_step(std::span<const double>(out.data(), kStepDim), ref, origin);
      return s_rel == 1.0 ? c : c.scaled(1.0 / s_rel, c.centroid());
    } catch (const Error& e) {
      throw Error(ErrorCode::NonFinitePrediction, "drop " + std::to_string(state.id) + ": " + e.what());
    }
  }();
  GradientProfile g;
  for (int r = 0; r < kControlPoints; ++r)
    g.mags[r] = std::max(0.0, gout(r, 0) * models.gradient.feature_scale / s_rel);
  const Vec2 center = next.centroid();
  return TrackEntry{std::move(next), g, center};
}

TrackEntry step_drop(DropState& state, const Models& models, double theta_avg_deg) {
  TrackEntry e = predict_step(state, models, theta_avg_deg);
  state.push(e);
  return e;
}

double breakage_probability(const DropState& state, const nn::Model& model) {
  if (state.history.empty()) throw Error(ErrorCode::InvalidArgument, "drop history is not initialized");
  const auto f = breakage_features(state.current().contour);
  nn::Mat x(kShapeDim, 1);
  for (int r = 0; r < kShapeDim; ++r) x(r, 0) = f[r];
  return nn::forward(model, nn::Sequence{x}, false)(0, 0);
}

bool predict_breakage(const DropState& state, const nn::Model& model) {
  return breakage_probability(state, model) > 0.5;
}

TrackEntry NeuralPredictor::predict(const DropState& state, double theta_avg_deg) {
  return predict_step(state, models_, theta_avg_deg);
}

bool NeuralPredictor::breaks(const DropState& state) { return predict_breakage(state, models_.breakage); }

// ---------------------------------------------------------------- splitting

double split_objective(const Contour& contour, int i, int j) {
  return distance(contour.eval(i), contour.eval(j)) - arc_length_between(contour, i, j);
}

std::pair<int, int> find_split_pair(const Contour& contour, const SplitConfig& cfg) {
  cfg.validate();
  const NormalSet n = inward_normals(contour);
  std::array<Vec2, kControlPoints> x{};
  for (int i = 0; i < kControlPoints; ++i) x[i] = contour.eval(i);
  int bi = -1, bj = -1;
  double best = std::numeric_limits<double>::infinity();
  for (int i = 0; i < kControlPoints; ++i) {
    for (int j = i + 1; j < kControlPoints; ++j) {
      const int gap = std::min(j - i, kControlPoints - (j - i));
      if (gap < cfg.min_separation || !(dot(n[i], n[j]) < cfg.delta)) continue;
      const double v = distance(x[i], x[j]) - arc_length_between(contour, i, j);
      if (v < best) {
        best = v;
        bi = i;
        bj = j;
      }
    }
  }
  if (bi < 0) throw Error(ErrorCode::NoValidPair, "no control point pair satisfies the split constraints");
  return {bi, bj};
}

namespace {

// Closed loop: the curve from parameter t0 forward to t1, then the chord back to the start.
std::vector<Vec2> cut_piece(const Contour& c, double t0, double t1) {
  const double span = t1 - t0;
  const int n_curve = std::max(8, static_cast<int>(std::ceil(span / kControlPoints * kDenseSamples)));
  std::vector<Vec2> loop;
  for (int k = 0; k <= n_curve; ++k) loop.push_back(c.eval(std::fmod(t0 + span * k / n_curve, kControlPoints)));
  const Vec2 a = loop.back(), b = loop.front();
  const double spacing = c.perimeter() / kDenseSamples;
  const int n_chord = std::max(1, static_cast<int>(std::ceil(distance(a, b) / spacing)));
  for (int k = 1; k < n_chord; ++k) loop.push_back(a + (b - a) * (static_cast<double>(k) / n_chord));
  return loop;
}

// Gradient on a child control point: from the parent curve where the child follows it,
// linear along the chord otherwise.
GradientProfile child_gradient(const Contour& child, const Contour& parent, const GradientProfile& pg, double i,
                               double j) {
  const Vec2 a = parent.eval(i), b = parent.eval(j);
  const double ga = profile_at(parent, pg, i), gb = profile_at(parent, pg, j);
  const Vec2 ab = b - a;
  const double len2 = dot(ab, ab);
  GradientProfile g;
  for (int k = 0; k < kControlPoints; ++k) {
    const Vec2 p = child.eval(k);
    const double t = closest_param(parent, p);
    const double d_curve = distance(parent.eval(t), p);
    const double w = len2 > 0 ? std::clamp(dot(p - a, ab) / len2, 0.0, 1.0) : 0.0;
    const double d_chord = distance(a + ab * w, p);
    g.mags[k] = d_chord < d_curve ? (1 - w) * ga + w * gb : profile_at(parent, pg, t);
  }
  return g;
}

Contour fit_loop(const std::vector<Vec2>& loop) {
  return fit_spline(resample_closed(loop, kDenseSamples)).contour;
}

}  // namespace

std::pair<DropState, DropState> split_drop(const DropState& state, const SplitConfig& cfg, int id_a, int id_b) {
  if (state.history.empty()) throw Error(ErrorCode::InvalidArgument, "drop history is not initialized");
  const auto [i, j] = find_split_pair(state.current().contour, cfg);
  DropState a, b;
  a.id = id_a;
  b.id = id_b;
  const TrackEntry& newest = state.current();
  const Vec2 xi = newest.contour.eval(i) - newest.center, xj = newest.contour.eval(j) - newest.center;
  try {
    for (const auto& e : state.history) {
      // Older contours are cut where the newest cut points land relative to the drop
      // center; indices alone are not stable when the canonical start point moves.
      double ti = i, tj = j;
      if (&e != &newest) {
        ti = closest_param(e.contour, e.center + xi);
        tj = closest_param(e.contour, e.center + xj);
      }
      if (tj <= ti) tj += kControlPoints;
      const Contour ca = fit_loop(cut_piece(e.contour, ti, tj));
      const Contour cb = fit_loop(cut_piece(e.contour, tj, ti + kControlPoints));
      a.history.push_back(TrackEntry{ca, child_gradient(ca, e.contour, e.gradient, ti, tj), ca.centroid()});
      b.history.push_back(TrackEntry{cb, child_gradient(cb, e.contour, e.gradient, ti, tj), cb.centroid()});
    }
  } catch (const Error& err) {
    throw Error(ErrorCode::DegenerateChild, std::string("split piece could not be refit: ") + err.what());
  }
  const Contour& pa = a.current().contour;
  const Contour& pb = b.current().contour;
  if (!pa.is_simple() || !pb.is_simple())
    throw Error(ErrorCode::DegenerateChild, "split produced a self-intersecting child");
  const double parent_area = enclosed_area(state.current().contour);
  const double area_a = enclosed_area(pa), area_b = enclosed_area(pb);
  if (area_a < 0.01 * parent_area || area_b < 0.01 * parent_area)
    throw Error(ErrorCode::DegenerateChild, "child area below 1% of the parent");
  a.volume = state.volume * (area_a / (area_a + area_b));
  b.volume = state.volume - a.volume;
  if (!(a.volume > 0) || !(b.volume > 0)) throw Error(ErrorCode::DegenerateChild, "child volume is not positive");
  return {std::move(a), std::move(b)};
}

// ---------------------------------------------------------------- merging

namespace {

namespace bg = boost::geometry;
using BgPoint = bg::model::d2::point_xy<double>;
using BgPolygon = bg::model::polygon<BgPoint, true, false>;  // clockwise, open

BgPolygon to_polygon(const std::vector<Vec2>& loop) {
  BgPolygon poly;
  for (const Vec2& p : loop) poly.outer().emplace_back(p.x, p.y);
  bg::correct(poly);
  return poly;
}

}  // namespace

DropState merge_drops(const DropState& a, const DropState& b, int K, int id) {
  if (a.history.empty() || b.history.empty()) throw Error(ErrorCode::InvalidArgument, "drop history is not initialized");
  const Contour& ca = a.current().contour;
  const Contour& cb = b.current().contour;
  if (!overlap_samples(ca, cb).overlapping())
    throw Error(ErrorCode::NoOverlap, "drops " + std::to_string(a.id) + " and " + std::to_string(b.id) + " do not overlap");

  // Polygon union of the dense sample loops: the outside parts of both outlines joined at
  // their crossing points. Holes are dropped.
  bg::model::multi_polygon<BgPolygon> u;
  bg::union_(to_polygon(ca.dense()), to_polygon(cb.dense()), u);
  if (u.size() != 1)
    throw Error(ErrorCode::StitchFailure, "union has " + std::to_string(u.size()) + " separate outlines");
  std::vector<Vec2> loop;
  for (const auto& p : u.front().outer()) loop.push_back({p.x(), p.y()});
  if (loop.size() > 1 && loop.front() == loop.back()) loop.pop_back();
  if (loop.size() < 8) throw Error(ErrorCode::StitchFailure, "union outline is degenerate");
  std::optional<Contour> merged;
  try {
    merged = fit_loop(loop);
  } catch (const Error& e) {
    throw Error(ErrorCode::StitchFailure, std::string("union outline could not be refit: ") + e.what());
  }
  if (!merged->is_simple()) throw Error(ErrorCode::StitchFailure, "refit outline self-intersects");

  GradientProfile g;
  const auto& ga = a.current().gradient;
  const auto& gb = b.current().gradient;
  for (int k = 0; k < kControlPoints; ++k) {
    const Vec2 p = merged->eval(k);
    const double ta = closest_param(ca, p), tb = closest_param(cb, p);
    const double da = distance(ca.eval(ta), p), db = distance(cb.eval(tb), p);
    g.mags[k] = da <= db ? profile_at(ca, ga, ta) : profile_at(cb, gb, tb);
  }
  return init_drop(*merged, g, a.volume + b.volume, K, id);
}

// ---------------------------------------------------------------- scene config

void SceneConfig::validate() const {
  auto bad = [](const std::string& m) { throw Error(ErrorCode::InvalidConfig, m); };
  if (terrain.kind == Terrain::Kind::Plane && !(terrain.incline_deg > 0 && terrain.incline_deg <= 90))
    bad("plane incline must be in (0, 90] degrees");
  if (K < 1) bad("K must be >= 1");
  if (!(dt > 0)) bad("dt must be > 0");
  if (steps < 1) bad("steps must be >= 1");
  if (mesh_every < 1) bad("mesh_every must be >= 1");
  if (mesh_cells < 8) bad("mesh_cells must be >= 8");
  if (smooth_iters < 0) bad("smooth_iters must be >= 0");
  if (!(domain[0] < domain[2] && domain[1] < domain[3])) bad("domain must be [xmin, ymin, xmax, ymax]");
  try {
    split.validate();
  } catch (const Error& e) {
    bad(e.what());
  }
  for (std::size_t i = 0; i < drops.size(); ++i) {
    if (!drops[i].contour) bad("drop " + std::to_string(i) + " has no contour");
    if (!(drops[i].volume > 0)) bad("drop " + std::to_string(i) + " volume must be > 0");
  }
}

namespace {

template <typename T>
T get_or(const nlohmann::json& j, const char* key, T def) {
  return j.contains(key) ? j.at(key).get<T>() : def;
}

Contour circle_contour(Vec2 c, double r) {
  std::vector<Vec2> pts;
  for (int k = 0; k < kDenseSamples; ++k) {
    const double a = 2 * std::numbers::pi * k / kDenseSamples;
    pts.push_back(c + Vec2{r * std::cos(a), -r * std::sin(a)});
  }
  return fit_spline(pts).contour;
}

}  // namespace

SceneConfig load_scene_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::InvalidConfig, "cannot open scene config " + path);
  const fs::path base = fs::path(path).parent_path();
  auto resolve = [&](const std::string& p) {
    if (p.empty()) return p;
    const fs::path q(p);
    return q.is_absolute() ? p : (base / q).string();
  };
  SceneConfig cfg;
  try {
    const auto j = nlohmann::json::parse(in);
    if (j.contains("format") && j.at("format") != "nd-scene v1")
      throw Error(ErrorCode::InvalidConfig, "unsupported scene format " + j.at("format").dump());
    if (j.contains("terrain")) {
      const auto& t = j.at("terrain");
      const std::string type = get_or<std::string>(t, "type", "plane");
      if (type == "plane") {
        cfg.terrain = Terrain::plane(get_or<double>(t, "incline_deg", 30.0));
      } else if (type == "heightfield") {
        cfg.terrain_path = resolve(t.at("path").get<std::string>());
        cfg.terrain = load_terrain(cfg.terrain_path);
      } else {
        throw Error(ErrorCode::InvalidConfig, "unknown terrain type '" + type + "'");
      }
    }
    for (const auto& d : j.value("drops", nlohmann::json::array())) {
      DropSpec s;
      s.volume = d.at("volume").get<double>();
      if (d.contains("contour")) {
        s.contour = load_contour(resolve(d.at("contour").get<std::string>()));
      } else if (d.contains("circle")) {
        const auto& c = d.at("circle");
        const auto ctr = c.at("center").get<std::array<double, 2>>();
        const double r = c.at("radius").get<double>();
        if (!(r > 0)) throw Error(ErrorCode::InvalidConfig, "circle radius must be > 0");
        s.contour = circle_contour({ctr[0], ctr[1]}, r);
      }
      if (d.contains("gradient")) s.gradient = load_gradient(resolve(d.at("gradient").get<std::string>()));
      cfg.drops.push_back(std::move(s));
    }
    if (j.contains("models")) {
      const auto& m = j.at("models");
      cfg.contour_model = resolve(get_or<std::string>(m, "contour", ""));
      cfg.gradient_model = resolve(get_or<std::string>(m, "gradient", ""));
      cfg.breakage_model = resolve(get_or<std::string>(m, "breakage", ""));
    }
    cfg.database = resolve(get_or<std::string>(j, "database", ""));
    cfg.K = get_or<int>(j, "K", cfg.K);
    cfg.dt = get_or<double>(j, "dt", cfg.dt);
    cfg.steps = get_or<int>(j, "steps", cfg.steps);
    cfg.seed = get_or<std::uint64_t>(j, "seed", cfg.seed);
    cfg.split.delta = get_or<double>(j, "split_delta", cfg.split.delta);
    cfg.split.min_separation = get_or<int>(j, "min_separation", cfg.split.min_separation);
    cfg.domain = get_or<std::array<double, 4>>(j, "domain", cfg.domain);
    cfg.output = resolve(get_or<std::string>(j, "output", cfg.output));
    cfg.export_meshes = get_or<bool>(j, "export_meshes", cfg.export_meshes);
    cfg.mesh_every = get_or<int>(j, "mesh_every", cfg.mesh_every);
    cfg.mesh_cells = get_or<int>(j, "mesh_cells", cfg.mesh_cells);
    cfg.smooth_iters = get_or<int>(j, "smooth_iters", cfg.smooth_iters);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, path + ": " + e.what());
  } catch (const Error& e) {
    if (e.code() == ErrorCode::InvalidConfig) throw;
    throw Error(ErrorCode::InvalidConfig, path + ": " + e.what());
  }
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------- scene stepping

double Scene::total_volume() const {
  double v = exited_volume + failed_volume;
  for (const auto& d : drops) v += d.volume;
  return v;
}

DropState& Scene::add_drop(DropState d) {
  d.id = next_id++;
  drops.push_back(std::move(d));
  return drops.back();
}

Scene make_scene(const SceneConfig& cfg, const InitDatabase* db) {
  cfg.validate();
  Scene s;
  s.K = cfg.K;
  s.terrain = cfg.terrain;
  s.split = cfg.split;
  s.domain = cfg.domain;
  for (const auto& spec : cfg.drops) {
    if (spec.gradient) {
      s.add_drop(init_drop(*spec.contour, *spec.gradient, spec.volume, cfg.K));
    } else {
      if (!db) throw Error(ErrorCode::EmptyDatabase, "a drop without a gradient needs a database");
      s.add_drop(init_drop(*spec.contour, spec.volume, *db, cfg.K));
    }
  }
  return s;
}

double average_incline(const Terrain& terrain, const Contour& contour) {
  if (terrain.kind == Terrain::Kind::Plane) return terrain.incline_deg;
  const GridSpec& g = terrain.grid;
  Vec2 lo = contour.dense().front(), hi = lo;
  for (const Vec2& p : contour.dense()) {
    lo = {std::min(lo.x, p.x), std::min(lo.y, p.y)};
    hi = {std::max(hi.x, p.x), std::max(hi.y, p.y)};
  }
  const int i0 = std::max(0, static_cast<int>(std::floor((lo.x - g.origin.x) / g.h)));
  const int i1 = std::min(g.nx - 1, static_cast<int>(std::ceil((hi.x - g.origin.x) / g.h)));
  const int j0 = std::max(0, static_cast<int>(std::floor((lo.y - g.origin.y) / g.h)));
  const int j1 = std::min(g.ny - 1, static_cast<int>(std::ceil((hi.y - g.origin.y) / g.h)));
  double sum = 0.0;
  int n = 0;
  for (int j = j0; j <= j1; ++j)
    for (int i = i0; i <= i1; ++i)
      if (point_in_contour(contour, g.center(i, j))) {
        sum += terrain.incline_at(g.center(i, j));
        ++n;
      }
  return n > 0 ? sum / n : terrain.incline_at(contour.centroid());
}

namespace {

// Pairs still separating from `old_id` carry over to the drops that replace it.
void inherit_separation(std::set<std::pair<int, int>>& sep, int old_id, std::initializer_list<int> new_ids) {
  std::vector<int> partners;
  for (auto it = sep.begin(); it != sep.end();) {
    if (it->first == old_id || it->second == old_id) {
      partners.push_back(it->first == old_id ? it->second : it->first);
      it = sep.erase(it);
    } else {
      ++it;
    }
  }
  for (int p : partners)
    for (int n : new_ids)
      if (p != n) sep.insert({std::min(p, n), std::max(p, n)});
}

}  // namespace

StepReport step_scene(Scene& scene, Predictor& predictor) {
  StepReport rep;
  const int step = ++scene.step;
  auto fail = [&](DropState& d, const std::string& why) {
    d.alive = false;
    scene.failed_volume += d.volume;
    scene.flagged = true;
    rep.failures.push_back("drop " + std::to_string(d.id) + ": " + why);
    rep.events.push_back({step, d.id, "failed"});
  };

  // Prediction: drops are independent.
  std::vector<std::string> event(scene.drops.size(), "step");
  for (std::size_t k = 0; k < scene.drops.size(); ++k) {
    DropState& d = scene.drops[k];
    try {
      const double theta = average_incline(scene.terrain, d.current().contour);
      if (!(theta > 0)) {
        d.push(d.current());
        event[k] = "frozen";
        continue;
      }
      const auto t0 = std::chrono::steady_clock::now();
      TrackEntry e = predictor.predict(d, theta);
      rep.predict_seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      ++rep.predicted;
      d.push(std::move(e));
    } catch (const Error& e) {
      fail(d, e.what());
    }
  }

  // Splits, in id order.
  std::vector<DropState> next;
  std::vector<std::string> next_event;
  for (std::size_t k = 0; k < scene.drops.size(); ++k) {
    DropState& d = scene.drops[k];
    if (!d.alive) continue;
    bool split = false;
    try {
      if (predictor.breaks(d)) {
        auto [a, b] = split_drop(d, scene.split, scene.next_id, scene.next_id + 1);
        inherit_separation(scene.separating, d.id, {a.id, b.id});
        scene.separating.insert({a.id, b.id});
        scene.next_id += 2;
        rep.events.push_back({step, d.id, "split"});
        next.push_back(std::move(a));
        next.push_back(std::move(b));
        next_event.insert(next_event.end(), 2, "split");
        ++rep.splits;
        split = true;
      }
    } catch (const Error& e) {
      // NoValidPair and DegenerateChild cancel the split for this step.
      if (e.code() != ErrorCode::NoValidPair && e.code() != ErrorCode::DegenerateChild) {
        fail(d, e.what());
        continue;
      }
    }
    if (!split) {
      next.push_back(std::move(d));
      next_event.push_back(event[k]);
    }
  }

  // Greedy merges over pairs in ascending (id_a, id_b) order.
  std::set<std::pair<int, int>> deferred;
  bool merged_any = true;
  while (merged_any) {
    merged_any = false;
    std::vector<std::size_t> order(next.size());
    for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
    std::sort(order.begin(), order.end(), [&](auto x, auto y) { return next[x].id < next[y].id; });
    for (std::size_t p = 0; p < order.size() && !merged_any; ++p) {
      for (std::size_t q = p + 1; q < order.size() && !merged_any; ++q) {
        DropState& a = next[order[p]];
        DropState& b = next[order[q]];
        if (deferred.count({a.id, b.id})) continue;
        const bool touching = overlap_samples(a.current().contour, b.current().contour).overlapping();
        if (scene.separating.count({a.id, b.id})) {
          if (!touching) scene.separating.erase({a.id, b.id});
          continue;
        }
        if (!touching) continue;
        try {
          DropState m = merge_drops(a, b, scene.K, scene.next_id++);
          rep.events.push_back({step, a.id, "merge"});
          rep.events.push_back({step, b.id, "merge"});
          const std::size_t hi = std::max(order[p], order[q]), lo = std::min(order[p], order[q]);
          next.erase(next.begin() + static_cast<std::ptrdiff_t>(hi));
          next_event.erase(next_event.begin() + static_cast<std::ptrdiff_t>(hi));
          inherit_separation(scene.separating, a.id, {m.id});
          inherit_separation(scene.separating, b.id, {m.id});
          next[lo] = std::move(m);
          next_event[lo] = "merge";
          ++rep.merges;
          merged_any = true;
        } catch (const Error& e) {
          deferred.insert({a.id, b.id});
          rep.failures.push_back("merge of drops " + std::to_string(a.id) + " and " + std::to_string(b.id) +
                                 " deferred: " + e.what());
        }
      }
    }
  }

  // Drops whose center leaves the domain.
  scene.drops.clear();
  for (std::size_t k = 0; k < next.size(); ++k) {
    const Vec2 c = next[k].current().center;
    const auto& dom = scene.domain;
    if (c.x < dom[0] || c.y < dom[1] || c.x > dom[2] || c.y > dom[3]) {
      scene.exited_volume += next[k].volume;
      rep.events.push_back({step, next[k].id, "exit"});
      ++rep.exits;
      continue;
    }
    rep.events.push_back({step, next[k].id, next_event[k]});
    scene.drops.push_back(std::move(next[k]));
  }
  std::sort(scene.drops.begin(), scene.drops.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  return rep;
}

void write_trajectory_header(std::ostream& os) { os << "step,drop,cx,cy,area,volume,event\n"; }

void write_trajectory_rows(std::ostream& os, const Scene& scene, const StepReport& report) {
  auto row = [&](int drop, const DropState* d, const std::string& ev) {
    os << scene.step << ',' << drop << ',';
    if (d) {
      const auto& e = d->current();
      double area = 0.0;
      try {
        area = enclosed_area(e.contour);
      } catch (const Error&) {
      }
      os << format_double(e.center.x) << ',' << format_double(e.center.y) << ',' << format_double(area) << ','
         << format_double(d->volume);
    } else {
      os << ",,,";
    }
    os << ',' << ev << '\n';
  };
  for (const auto& ev : report.events) {
    const DropState* d = nullptr;
    for (const auto& s : scene.drops)
      if (s.id == ev.drop) d = &s;
    row(ev.drop, d, ev.event);
  }
}

std::string mesh_file_name(int step, int drop) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "step_%05d_drop_%03d.obj", step, drop);
  return buf;
}

int export_scene_meshes(const Scene& scene, const std::string& dir, int mesh_cells, int smooth_iters,
                        std::vector<std::string>* skipped) {
  fs::create_directories(dir);
  int written = 0;
  for (const auto& d : scene.drops) {
    try {
      const auto& e = d.current();
      const Reconstruction r = reconstruct(e.contour, e.gradient, d.volume, smooth_iters, mesh_cells);
      export_mesh(r.height, &scene.terrain, (fs::path(dir) / mesh_file_name(scene.step, d.id)).string());
      ++written;
    } catch (const Error& err) {
      if (skipped) skipped->push_back("drop " + std::to_string(d.id) + ": " + err.what());
    }
  }
  return written;
}

// ---------------------------------------------------------------- evaluation

double control_point_error(const Contour& a, const Contour& b) {
  double s = 0.0;
  for (int i = 0; i < kControlPoints; ++i) s += distance(a.ctrl()[i], b.ctrl()[i]);
  return s / kControlPoints;
}

RolloutEval evaluate_rollouts(const std::vector<TrackedSequence>& truth, Predictor& predictor, const Terrain& terrain,
                              int K, int max_steps) {
  if (max_steps < 1) throw Error(ErrorCode::InvalidArgument, "max_steps must be >= 1");
  RolloutEval ev;
  double err_sum = 0.0;
  for (const auto& seq : truth) {
    if (seq.length() < 2) continue;
    const int n = std::min(max_steps, seq.length() - 1);
    const auto& first = seq.frames.front();
    DropState d = init_drop(first.contour, first.gradient, 1.0, K, seq.id);
    std::optional<int> predicted;
    for (int t = 1; t <= n; ++t) {
      const double theta = average_incline(terrain, d.current().contour);
      d.push(predictor.predict(d, theta));
      RolloutRow row{t, seq.id, control_point_error(d.current().contour, seq.frames[t].contour), false};
      if (!predicted && predictor.breaks(d)) {
        predicted = t;
        row.split = true;
      }
      err_sum += row.err;
      ev.rows.push_back(row);
    }
    const bool truth_split = seq.terminal_event == TerminalEvent::Split && seq.split_frame && *seq.split_frame <= n;
    const bool match = truth_split && predicted && std::abs(*predicted - *seq.split_frame) <= 1;
    ev.truth_splits += truth_split;
    ev.predicted_splits += predicted.has_value();
    ev.matched_truth += match;
    ev.matched_predicted += match;
  }
  ev.mean_err = ev.rows.empty() ? 0.0 : err_sum / static_cast<double>(ev.rows.size());
  return ev;
}

void write_eval_csv(std::ostream& os, const RolloutEval& ev) {
  os << "step,drop,err,event\n";
  for (const auto& r : ev.rows)
    os << r.step << ',' << r.sequence << ',' << format_double(r.err) << ',' << (r.split ? "split" : "") << '\n';
}

}  // namespace nd
