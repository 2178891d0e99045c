#include "neuraldrop/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include <json.hpp>

namespace nd {

using ojson = nlohmann::ordered_json;

void SynthParams::validate() const {
  auto bad = [](const std::string& what) { return Error(ErrorCode::InvalidParams, "invalid synth params: " + what); };
  if (width < 16 || height < 16) throw bad("width and height must be >= 16");
  if (frames < 1) throw bad("frames must be >= 1");
  if (n_sequences < 1) throw bad("n_sequences must be >= 1");
  if (drop_count < 0) throw bad("drop_count must be >= 0");
  if (!(min_radius > 0 && min_radius <= max_radius && max_radius < 0.5)) throw bad("need 0 < min_radius <= max_radius < 0.5");
  if (!(alpha >= 0 && std::isfinite(alpha))) throw bad("alpha must be >= 0");
  if (!(beta > 0 && std::isfinite(beta))) throw bad("beta must be > 0");
  if (!(max_step > 0 && max_step <= 0.05)) throw bad("max_step must be in (0, 0.05]");
  if (!(elongation_rate >= 0)) throw bad("elongation_rate must be >= 0");
  if (!(split_elongation > 0)) throw bad("split_elongation must be > 0");
  if (!(max_initial_elongation >= 0 && max_initial_elongation < split_elongation))
    throw bad("max_initial_elongation must be in [0, split_elongation)");
  if (!(tail_fraction > 0 && tail_fraction < 0.5)) throw bad("tail_fraction must be in (0, 0.5)");
  if (!(tail_sharpness >= 1)) throw bad("tail_sharpness must be >= 1");
  if (!(background >= 0 && peak > 0 && background + peak <= 255)) throw bad("need background >= 0, peak > 0, sum <= 255");
  if (!(noise >= 0 && noise < peak)) throw bad("noise must be in [0, peak)");
  if (!(merge_gap_px >= 0 && exit_margin_px >= 0)) throw bad("gaps must be >= 0");
  for (const auto& d : drops)
    if (!(d.radius > 0 && d.elongation >= 0)) throw bad("explicit drops need radius > 0 and elongation >= 0");
}

SynthParams synth_params_from_json(const std::string& text) {
  ojson j;
  try {
    j = ojson::parse(text);
  } catch (const std::exception& e) {
    throw Error(ErrorCode::InvalidParams, std::string("synth config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw Error(ErrorCode::InvalidParams, "synth config must be a JSON object");
  SynthParams p;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "width") p.width = v.get<int>();
      else if (key == "height") p.height = v.get<int>();
      else if (key == "frames") p.frames = v.get<int>();
      else if (key == "n_sequences") p.n_sequences = v.get<int>();
      else if (key == "drop_count") p.drop_count = v.get<int>();
      else if (key == "min_radius") p.min_radius = v.get<double>();
      else if (key == "max_radius") p.max_radius = v.get<double>();
      else if (key == "alpha") p.alpha = v.get<double>();
      else if (key == "beta") p.beta = v.get<double>();
      else if (key == "max_step") p.max_step = v.get<double>();
      else if (key == "elongation_rate") p.elongation_rate = v.get<double>();
      else if (key == "max_initial_elongation") p.max_initial_elongation = v.get<double>();
      else if (key == "split_elongation") p.split_elongation = v.get<double>();
      else if (key == "tail_fraction") p.tail_fraction = v.get<double>();
      else if (key == "min_split_radius") p.min_split_radius = v.get<double>();
      else if (key == "tail_sharpness") p.tail_sharpness = v.get<double>();
      else if (key == "background") p.background = v.get<double>();
      else if (key == "peak") p.peak = v.get<double>();
      else if (key == "noise") p.noise = v.get<double>();
      else if (key == "merge_gap_px") p.merge_gap_px = v.get<double>();
      else if (key == "exit_margin_px") p.exit_margin_px = v.get<double>();
      else if (key == "drops") {
        for (const auto& d : v) {
          SynthDrop sd;
          sd.center = {d.at("center").at(0).get<double>(), d.at("center").at(1).get<double>()};
          sd.radius = d.at("radius").get<double>();
          sd.elongation = d.value("elongation", 0.0);
          p.drops.push_back(sd);
        }
      } else {
        throw Error(ErrorCode::InvalidParams, "unknown synth parameter '" + key + "'");
      }
    }
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    throw Error(ErrorCode::InvalidParams, std::string("bad synth parameter value: ") + e.what());
  }
  p.validate();
  return p;
}

std::string synth_params_to_json(const SynthParams& p) {
  ojson j;
  j["width"] = p.width;
  j["height"] = p.height;
  j["frames"] = p.frames;
  j["n_sequences"] = p.n_sequences;
  j["drop_count"] = p.drop_count;
  j["min_radius"] = p.min_radius;
  j["max_radius"] = p.max_radius;
  j["alpha"] = p.alpha;
  j["beta"] = p.beta;
  j["max_step"] = p.max_step;
  j["elongation_rate"] = p.elongation_rate;
  j["max_initial_elongation"] = p.max_initial_elongation;
  j["split_elongation"] = p.split_elongation;
  j["tail_fraction"] = p.tail_fraction;
  j["min_split_radius"] = p.min_split_radius;
  j["tail_sharpness"] = p.tail_sharpness;
  j["background"] = p.background;
  j["peak"] = p.peak;
  j["noise"] = p.noise;
  j["merge_gap_px"] = p.merge_gap_px;
  j["exit_margin_px"] = p.exit_margin_px;
  ojson drops = ojson::array();
  for (const auto& d : p.drops) drops.push_back({{"center", {d.center.x, d.center.y}}, {"radius", d.radius}, {"elongation", d.elongation}});
  j["drops"] = std::move(drops);
  return j.dump(2);
}

double synth_speed(const SynthParams& p, double area) {
  return std::min(p.max_step, p.alpha * std::pow(area, p.beta));
}

namespace {

constexpr double kPi = std::numbers::pi;

struct Blob {
  int seq = 0;
  Vec2 c;
  double area = 0;
  double e = 0;
};

class Shape {
 public:
  explicit Shape(const SynthParams& p) : p_(p) {}

  double tail(double phi) const {
    const double s = std::sin(phi);
    return s > 0 ? std::pow(s, p_.tail_sharpness) : 0.0;
  }
  // Area of the unit-r0 shape: 0.5 * integral of (1 + e*tail)^2.
  double area_factor(double e) const {
    constexpr int n = 2048;
    double acc = 0;
    for (int k = 0; k < n; ++k) {
      const double r = 1 + e * tail(2 * kPi * (k + 0.5) / n);
      acc += r * r;
    }
    return 0.5 * acc * 2 * kPi / n;
  }
  double r0(const Blob& b) const { return std::sqrt(b.area / area_factor(b.e)); }
  double radius(const Blob& b, double r0v, double phi) const { return r0v * (1 + b.e * tail(phi)); }

 private:
  const SynthParams& p_;
};

double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

}  // namespace

SynthClip synth_generate(const SynthParams& params, std::uint64_t seed, int sequence_index) {
  params.validate();
  const Shape shape(params);
  const SceneMapping map{params.width, params.height};
  const double ppu = map.pixels_per_unit();
  const double dom_w = params.width / ppu, dom_h = params.height / ppu;
  const double merge_gap = params.merge_gap_px / ppu, exit_margin = params.exit_margin_px / ppu;

  std::mt19937_64 rng(seed ^ (0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(sequence_index + 1)));
  SynthClip clip;
  std::vector<Blob> live;

  auto new_seq = [&](int start_frame) {
    TrackedSequence s;
    s.id = static_cast<int>(clip.truth.size());
    s.start_frame = start_frame;
    clip.truth.push_back(std::move(s));
    return clip.truth.back().id;
  };

  auto gap = [&](const Blob& a, const Blob& b) {
    const Vec2 d = b.c - a.c;
    const double phi = std::atan2(d.y, d.x);
    return norm(d) - shape.radius(a, shape.r0(a), phi) - shape.radius(b, shape.r0(b), phi + kPi);
  };

  if (!params.drops.empty()) {
    for (const auto& d : params.drops) {
      Blob b{new_seq(0), d.center, kPi * d.radius * d.radius, d.elongation};
      live.push_back(b);
    }
  } else {
    for (int k = 0; k < params.drop_count; ++k) {
      for (int attempt = 0; attempt < 100; ++attempt) {
        const double r = params.min_radius + (params.max_radius - params.min_radius) * uniform01(rng);
        Blob b;
        b.area = kPi * r * r;
        b.e = r >= params.min_split_radius ? params.max_initial_elongation * uniform01(rng) : 0.0;
        const double r0 = shape.r0(b);
        const double side = r + 2 * merge_gap;
        const double top = r0 * (1 + b.e) + 2 * merge_gap;
        const double x = side + (dom_w - 2 * side) * uniform01(rng);
        const double ylo = 0.45 * dom_h, yhi = dom_h - top;
        const double y = ylo + std::max(0.0, yhi - ylo) * uniform01(rng);
        b.c = {x, y};
        bool ok = yhi > ylo;
        for (const auto& o : live) ok = ok && gap(o, b) > 3 * merge_gap;
        if (ok) {
          b.seq = new_seq(0);
          live.push_back(b);
          break;
        }
      }
    }
  }

  const double noise_span = params.noise;
  for (int f = 0; f < params.frames; ++f) {
    // Record ground truth and render.
    std::vector<double> r0s;
    for (const auto& b : live) {
      const double r0 = shape.r0(b);
      r0s.push_back(r0);
      std::vector<Vec2> pts(kDenseSamples);
      for (int k = 0; k < kDenseSamples; ++k) {
        const double phi = kPi / 2 - 2 * kPi * k / kDenseSamples;
        pts[k] = b.c + Vec2{std::cos(phi), std::sin(phi)} * shape.radius(b, r0, phi);
      }
      const Contour contour = fit_spline(pts).contour;
      const NormalSet normals = inward_normals(contour);
      auto color = [&](Vec2 q) {
        const Vec2 d = q - b.c;
        const double rho = norm(d) / shape.radius(b, r0, std::atan2(d.y, d.x));
        return params.peak * (1 - rho * rho);
      };
      GradientProfile gp;
      constexpr double h = 1e-6;
      for (int i = 0; i < kControlPoints; ++i) {
        const Vec2 p = contour.eval(i);
        gp.mags[i] = std::max(0.0, (color(p + normals[i] * h) - color(p - normals[i] * h)) / (2 * h));
      }
      clip.truth[b.seq].frames.push_back({contour, gp, contour.centroid()});
    }

    Frame frame(params.width, params.height, 0, f);
    for (int row = 0; row < params.height; ++row)
      for (int col = 0; col < params.width; ++col) {
        const Vec2 q = map.to_scene({static_cast<double>(col), static_cast<double>(row)});
        double v = 0;
        for (std::size_t k = 0; k < live.size(); ++k) {
          const Vec2 d = q - live[k].c;
          const double rad = shape.radius(live[k], r0s[k], std::atan2(d.y, d.x));
          const double rho2 = (d.x * d.x + d.y * d.y) / (rad * rad);
          if (rho2 < 1) v = std::max(v, params.peak * (1 - rho2));
        }
        const double n = noise_span > 0 ? (2 * uniform01(rng) - 1) * noise_span : 0.0;
        frame.at(col, row) = static_cast<std::uint8_t>(std::clamp(std::lround(params.background + v + n), 0L, 255L));
      }
    clip.frames.push_back(std::move(frame));
    if (f + 1 == params.frames) break;

    // Advance to the next frame: splits, motion, merges, exits.
    std::vector<Blob> next;
    for (std::size_t k = 0; k < live.size(); ++k) {
      const Blob& b = live[k];
      const double v = synth_speed(params, b.area);
      if (b.e > params.split_elongation) {
        clip.truth[b.seq].terminal_event = TerminalEvent::Split;
        clip.truth[b.seq].split_frame = clip.truth[b.seq].length() - 1;
        Blob head{0, b.c - Vec2{0, v}, (1 - params.tail_fraction) * b.area, 0.0};
        Blob tail{0, b.c, params.tail_fraction * b.area, 0.0};
        const double r_h = std::sqrt(head.area / kPi), r_t = std::sqrt(tail.area / kPi);
        const double tip = b.c.y + r0s[k] * (1 + b.e);
        tail.c.y = std::max(tip - r_t, head.c.y + r_h + r_t + merge_gap);
        for (Blob* child : {&head, &tail}) {
          child->seq = new_seq(f + 1);
          clip.truth[child->seq].parents.push_back(b.seq);
          clip.truth[b.seq].children.push_back(child->seq);
          next.push_back(*child);
        }
        continue;
      }
      Blob moved = b;
      moved.c.y -= v;
      if (std::sqrt(b.area / kPi) >= params.min_split_radius) moved.e += params.elongation_rate;
      next.push_back(moved);
    }

    std::vector<char> gone(next.size(), 0);
    std::vector<Blob> merged;
    for (std::size_t a = 0; a < next.size(); ++a)
      for (std::size_t c = a + 1; c < next.size(); ++c) {
        // Drops born from a split this step are not merged until they have been seen once.
        const bool fresh = clip.truth[next[a].seq].frames.empty() || clip.truth[next[c].seq].frames.empty();
        if (fresh || gone[a] || gone[c] || gap(next[a], next[c]) >= merge_gap) continue;
        gone[a] = gone[c] = 1;
        const Blob& x = next[a];
        const Blob& y = next[c];
        // Weighting by radius rather than area keeps a small partner under the merged blob,
        // so the two parents both overlap their child.
        const double wx = std::sqrt(x.area), wy = std::sqrt(y.area);
        Blob m{0, (x.c * wx + y.c * wy) / (wx + wy), x.area + y.area, 0.0};
        m.seq = new_seq(f + 1);
        for (const Blob* parent : {&x, &y}) {
          TrackedSequence& ps = clip.truth[parent->seq];
          ps.terminal_event = TerminalEvent::Merged;
          ps.children.push_back(m.seq);
          clip.truth[m.seq].parents.push_back(ps.id);
        }
        merged.push_back(m);
      }

    live.clear();
    for (std::size_t a = 0; a < next.size(); ++a)
      if (!gone[a]) live.push_back(next[a]);
    for (const auto& m : merged) live.push_back(m);

    std::vector<Blob> kept;
    for (const auto& b : live) {
      if (b.c.y - shape.r0(b) < exit_margin) {
        clip.truth[b.seq].terminal_event = TerminalEvent::LeavesView;
        continue;
      }
      kept.push_back(b);
    }
    live = std::move(kept);
  }

  // Sequences with no rendered frames (born and removed between frames) are dropped.
  std::vector<char> seen(clip.truth.size(), 0);
  for (const auto& s : clip.truth) seen[s.id] = !s.frames.empty();
  auto rendered = [&](int id) { return seen[id] != 0; };
  std::vector<TrackedSequence> truth;
  for (auto& s : clip.truth)
    if (!s.frames.empty()) truth.push_back(std::move(s));
  for (auto& s : truth) {
    std::erase_if(s.children, [&](int id) { return !rendered(id); });
    std::erase_if(s.parents, [&](int id) { return !rendered(id); });
  }
  clip.truth = std::move(truth);
  return clip;
}

}  // namespace nd
