#include "neuraldrop/dataprep.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace nd {

using ojson = nlohmann::ordered_json;

void GradientProfile::validate() const {
  for (double m : mags)
    if (!std::isfinite(m) || m < 0.0)
      throw Error(ErrorCode::InvalidArgument, "gradient magnitudes must be finite and >= 0");
}

namespace {

GradientProfile profile_impl(const Frame& frame, const Contour& contour, bool clamp_to_frame) {
  const SceneMapping map{frame.width, frame.height};
  const double ppu = map.pixels_per_unit();
  const NormalSet normals = inward_normals(contour);
  GradientProfile gp;
  for (int i = 0; i < kControlPoints; ++i) {
    Vec2 pix = map.to_pixel(contour.eval(i));
    if (clamp_to_frame) {
      pix.x = std::clamp(pix.x, 1.0, frame.width - 2.0);
      pix.y = std::clamp(pix.y, 1.0, frame.height - 2.0);
    }
    const Vec2 g = sobel_at(frame, pix);
    gp.mags[i] = std::max(0.0, dot(g, normals[i]) * ppu);
  }
  return gp;
}

}  // namespace

GradientProfile extract_gradient_profile(const Frame& frame, const Contour& contour) {
  return profile_impl(frame, contour, false);
}

double profile_at(const Contour& contour, const GradientProfile& profile, double t) {
  t = std::fmod(t, static_cast<double>(kControlPoints));
  if (t < 0) t += kControlPoints;
  const int k = std::clamp(static_cast<int>(std::floor(t)), 0, kControlPoints - 1);
  const double s0 = contour.arc_length_to(k), s1 = contour.arc_length_to(k + 1);
  const double w = s1 > s0 ? std::clamp((contour.arc_length_to(t) - s0) / (s1 - s0), 0.0, 1.0) : 0.0;
  return (1 - w) * profile.mags[k] + w * profile.mags[(k + 1) % kControlPoints];
}

void write_gradient(std::ostream& os, const GradientProfile& g) {
  os << "gradient v1\n";
  for (double m : g.mags) os << format_double(m) << '\n';
}

GradientProfile read_gradient(std::istream& is) {
  std::string header;
  if (!std::getline(is, header)) throw Error(ErrorCode::CorruptFile, "empty gradient stream");
  if (!header.empty() && header.back() == '\r') header.pop_back();
  if (header != "gradient v1") throw Error(ErrorCode::VersionMismatch, "expected 'gradient v1', got '" + header + "'");
  GradientProfile g;
  for (int i = 0; i < kControlPoints; ++i)
    if (!(is >> g.mags[i])) throw Error(ErrorCode::CorruptFile, "truncated gradient at entry " + std::to_string(i));
  g.validate();
  return g;
}

void save_gradient(const std::string& path, const GradientProfile& g) {
  std::ofstream os(path);
  if (!os) throw Error(ErrorCode::IoError, "cannot write " + path);
  write_gradient(os, g);
}

GradientProfile load_gradient(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorCode::IoError, "cannot read " + path);
  return read_gradient(is);
}

// ---------------------------------------------------------------- tracking

const char* to_string(TrackEventKind kind) {
  switch (kind) {
    case TrackEventKind::Continue: return "continue";
    case TrackEventKind::Merge: return "merge";
    case TrackEventKind::Split: return "split";
    case TrackEventKind::Start: return "start";
    case TrackEventKind::End: return "end";
  }
  return "?";
}

int overlap_score(const Contour& a, const Contour& b) {
  const OverlapSamples o = overlap_samples(a, b);
  return static_cast<int>(o.a_in_b.size() + o.b_in_a.size());
}

std::vector<TrackEvent> track(const std::vector<Contour>& prev, const std::vector<Contour>& cur, int frame_index) {
  const int np = static_cast<int>(prev.size()), nc = static_cast<int>(cur.size());
  std::vector<std::vector<int>> p_adj(np), c_adj(nc);
  for (int i = 0; i < np; ++i)
    for (int j = 0; j < nc; ++j)
      if (overlap_score(prev[i], cur[j]) >= kTrackOverlapThreshold) {
        p_adj[i].push_back(j);
        c_adj[j].push_back(i);
      }

  auto ambiguous = [&](const std::string& what) {
    return Error(ErrorCode::AmbiguousTopology, "ambiguous topology at frame " + std::to_string(frame_index) + ": " + what);
  };

  std::vector<TrackEvent> events;
  std::vector<char> p_done(np, 0), c_done(nc, 0);
  for (int i = 0; i < np; ++i) {
    if (p_done[i]) continue;
    // Connected component of the bipartite overlap graph containing prev i.
    std::vector<int> ps{i}, cs;
    p_done[i] = 1;
    std::size_t pi = 0, ci = 0;
    while (pi < ps.size() || ci < cs.size()) {
      for (; pi < ps.size(); ++pi)
        for (int j : p_adj[ps[pi]])
          if (!c_done[j]) {
            c_done[j] = 1;
            cs.push_back(j);
          }
      for (; ci < cs.size(); ++ci)
        for (int q : c_adj[cs[ci]])
          if (!p_done[q]) {
            p_done[q] = 1;
            ps.push_back(q);
          }
    }
    std::sort(ps.begin(), ps.end());
    std::sort(cs.begin(), cs.end());
    TrackEvent ev{TrackEventKind::Continue, ps, cs};
    if (ps.size() == 1 && cs.empty()) {
      ev.kind = TrackEventKind::End;
    } else if (ps.size() == 1 && cs.size() == 1) {
      ev.kind = TrackEventKind::Continue;
    } else if (ps.size() == 2 && cs.size() == 1) {
      ev.kind = TrackEventKind::Merge;
    } else if (ps.size() == 1 && cs.size() == 2) {
      ev.kind = TrackEventKind::Split;
    } else {
      throw ambiguous(std::to_string(ps.size()) + " previous contours overlap " + std::to_string(cs.size()) +
                      " current contours");
    }
    events.push_back(std::move(ev));
  }
  for (int j = 0; j < nc; ++j)
    if (!c_done[j]) events.push_back({TrackEventKind::Start, {}, {j}});

  std::sort(events.begin(), events.end(), [](const TrackEvent& a, const TrackEvent& b) {
    if (a.kind != b.kind) return a.kind < b.kind;
    const int pa = a.prev.empty() ? -1 : a.prev[0], pb = b.prev.empty() ? -1 : b.prev[0];
    if (pa != pb) return pa < pb;
    const int ca = a.cur.empty() ? -1 : a.cur[0], cb = b.cur.empty() ? -1 : b.cur[0];
    return ca < cb;
  });
  return events;
}

const char* to_string(TerminalEvent e) {
  switch (e) {
    case TerminalEvent::Ends: return "ends";
    case TerminalEvent::LeavesView: return "leaves_view";
    case TerminalEvent::Merged: return "merged";
    case TerminalEvent::Split: return "split";
  }
  return "?";
}

TerminalEvent terminal_event_from_string(const std::string& s) {
  if (s == "ends") return TerminalEvent::Ends;
  if (s == "leaves_view") return TerminalEvent::LeavesView;
  if (s == "merged") return TerminalEvent::Merged;
  if (s == "split") return TerminalEvent::Split;
  throw Error(ErrorCode::CorruptFile, "unknown terminal event '" + s + "'");
}

void TrackedSequence::validate() const {
  if (frames.empty()) throw Error(ErrorCode::InvalidArgument, "sequence has no frames");
  for (const auto& e : frames) {
    if (e.center.x < 0 || e.center.x > 1 || e.center.y < 0 || e.center.y > 1)
      throw Error(ErrorCode::InvalidArgument, "sequence center outside the unit domain");
    e.gradient.validate();
  }
  if ((terminal_event == TerminalEvent::Split) != split_frame.has_value())
    throw Error(ErrorCode::InvalidArgument, "split_frame must be set exactly for split sequences");
  if (split_frame && (*split_frame < 0 || *split_frame >= length()))
    throw Error(ErrorCode::InvalidArgument, "split_frame out of range");
}

// ---------------------------------------------------------------- features

std::array<double, kShapeDim> shape_features(const Contour& c, Vec2 ref) {
  std::array<double, kShapeDim> f{};
  for (int i = 0; i < kControlPoints; ++i) {
    f[i] = c.ctrl()[i].x - ref.x;
    f[kControlPoints + i] = c.ctrl()[i].y - ref.y;
  }
  return f;
}

std::array<double, kStepDim> step_features(const Contour& c, Vec2 ref, Vec2 center_offset) {
  std::array<double, kStepDim> f{};
  const auto s = shape_features(c, ref);
  std::copy(s.begin(), s.end(), f.begin());
  f[kShapeDim] = center_offset.x;
  f[kShapeDim + 1] = center_offset.y;
  return f;
}

std::array<double, kShapeDim> breakage_features(const Contour& c) { return shape_features(c, c.centroid()); }

namespace {

std::array<double, kShapeDim> self_centered(std::span<const double> shape) {
  std::array<double, kShapeDim> f{};
  double mx = 0, my = 0;
  for (int i = 0; i < kControlPoints; ++i) {
    mx += shape[i];
    my += shape[kControlPoints + i];
  }
  mx /= kControlPoints;
  my /= kControlPoints;
  for (int i = 0; i < kControlPoints; ++i) {
    f[i] = shape[i] - mx;
    f[kControlPoints + i] = shape[kControlPoints + i] - my;
  }
  return f;
}

}  // namespace

Contour decode_step(std::span<const double> step, Vec2 ref, Vec2 origin) {
  if (step.size() != static_cast<std::size_t>(kStepDim))
    throw Error(ErrorCode::DimMismatch, "step vector must have 106 entries");
  std::array<Vec2, kControlPoints> pts{};
  Vec2 mean{0, 0};
  for (int i = 0; i < kControlPoints; ++i) {
    pts[i] = ref + Vec2{step[i], step[kControlPoints + i]};
    mean += pts[i];
  }
  mean = mean / kControlPoints;
  const Vec2 shift = origin + Vec2{step[kShapeDim], step[kShapeDim + 1]} - mean;
  for (auto& p : pts) p += shift;
  return Contour(pts);
}

// ---------------------------------------------------------------- dataset

void Dataset::validate() const {
  if (K < 1) throw Error(ErrorCode::InvalidArgument, "dataset K must be >= 1");
  auto in_range = [](double v) { return std::isfinite(v) && v >= -1.0 && v <= 1.0; };
  for (const auto& s : samples) {
    if (static_cast<int>(s.inputs.size()) != K || static_cast<int>(s.grad_inputs.size()) != K)
      throw Error(ErrorCode::InvalidArgument, "sample window length differs from dataset K");
    for (const auto& step : s.inputs)
      for (double v : step)
        if (!in_range(v)) throw Error(ErrorCode::InvalidArgument, "input coordinate feature outside [-1,1]");
    for (double v : s.target)
      if (!in_range(v)) throw Error(ErrorCode::InvalidArgument, "target coordinate feature outside [-1,1]");
    for (const auto& g : s.grad_inputs)
      for (double v : g)
        if (!std::isfinite(v) || v < 0) throw Error(ErrorCode::InvalidArgument, "negative gradient magnitude");
    for (double v : s.grad_target)
      if (!std::isfinite(v) || v < 0) throw Error(ErrorCode::InvalidArgument, "negative gradient magnitude");
  }
}

Dataset build_dataset(const std::vector<TrackedSequence>& sequences, int K) {
  if (K < 1) throw Error(ErrorCode::InvalidArgument, "window length K must be >= 1");
  std::vector<const TrackedSequence*> order;
  for (const auto& s : sequences) order.push_back(&s);
  std::stable_sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->id < b->id; });

  Dataset ds;
  ds.K = K;
  for (const TrackedSequence* seq : order) {
    const int L = seq->length();
    if (L < K + 1) {
      ds.warnings.push_back("sequence " + std::to_string(seq->id) + " has " + std::to_string(L) +
                            " frames, fewer than K+1 = " + std::to_string(K + 1) + "; skipped");
      continue;
    }
    for (int t0 = 0; t0 + K < L; ++t0) {
      TrainingSample s;
      s.seq_id = seq->id;
      s.t0 = t0;
      const Vec2 ref = seq->frames[t0 + K - 1].contour.centroid();
      const Vec2 origin = seq->frames[t0].center;
      for (int k = 0; k < K; ++k) {
        const auto& e = seq->frames[t0 + k];
        s.inputs.push_back(step_features(e.contour, ref, e.center - origin));
        s.grad_inputs.push_back(e.gradient.mags);
      }
      const auto& tgt = seq->frames[t0 + K];
      s.target = step_features(tgt.contour, ref, tgt.center - origin);
      s.grad_target = tgt.gradient.mags;
      s.breakage_input = breakage_features(tgt.contour);
      s.breakage = seq->split_frame.has_value() && *seq->split_frame == t0 + K;
      ds.samples.push_back(std::move(s));
    }
  }
  ds.validate();
  return ds;
}

namespace {

constexpr const char* kDatasetFormat = "nd-dataset v1";
constexpr const char* kNormalization =
    "scene units (larger image side = 1, y up); step = [x0..x51, y0..y51, cx, cy]; control points relative to "
    "the centroid of the window's last input contour; center = displacement from the window's first center";

template <typename Arr>
ojson to_json_array(const Arr& a) {
  ojson j = ojson::array();
  for (double v : a) j.push_back(v);
  return j;
}

template <std::size_t N>
std::array<double, N> from_json_array(const ojson& j, const char* what) {
  if (!j.is_array() || j.size() != N)
    throw Error(ErrorCode::CorruptFile, std::string("bad array length for ") + what);
  std::array<double, N> a{};
  for (std::size_t i = 0; i < N; ++i) {
    if (!j[i].is_number()) throw Error(ErrorCode::CorruptFile, std::string("non-numeric entry in ") + what);
    a[i] = j[i].get<double>();
  }
  return a;
}

}  // namespace

void write_dataset(std::ostream& os, const Dataset& ds) {
  ojson header;
  header["format"] = kDatasetFormat;
  header["K"] = ds.K;
  header["normalization"] = kNormalization;
  header["records"] = ds.samples.size();
  os << header.dump() << '\n';
  for (const auto& s : ds.samples) {
    ojson r;
    r["seq_id"] = s.seq_id;
    r["t0"] = s.t0;
    ojson inputs = ojson::array(), grads = ojson::array();
    for (const auto& step : s.inputs) inputs.push_back(to_json_array(step));
    for (const auto& g : s.grad_inputs) grads.push_back(to_json_array(g));
    r["inputs"] = std::move(inputs);
    r["grad_inputs"] = std::move(grads);
    r["target"] = to_json_array(s.target);
    r["grad_target"] = to_json_array(s.grad_target);
    r["breakage"] = s.breakage;
    os << r.dump() << '\n';
  }
}

Dataset read_dataset(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw Error(ErrorCode::CorruptFile, "empty dataset file");
  ojson header;
  try {
    header = ojson::parse(line);
  } catch (const std::exception&) {
    throw Error(ErrorCode::CorruptFile, "dataset header is not JSON");
  }
  if (!header.contains("format") || header["format"] != kDatasetFormat)
    throw Error(ErrorCode::VersionMismatch, "expected dataset format '" + std::string(kDatasetFormat) + "'");
  Dataset ds;
  ds.K = header.value("K", 0);
  const std::size_t expected = header.value("records", std::size_t{0});
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    TrainingSample s;
    try {
      const ojson r = ojson::parse(line);
      s.seq_id = r.at("seq_id").get<int>();
      s.t0 = r.at("t0").get<int>();
      for (const auto& step : r.at("inputs")) s.inputs.push_back(from_json_array<kStepDim>(step, "inputs"));
      for (const auto& g : r.at("grad_inputs")) s.grad_inputs.push_back(from_json_array<kControlPoints>(g, "grad_inputs"));
      s.target = from_json_array<kStepDim>(r.at("target"), "target");
      s.grad_target = from_json_array<kControlPoints>(r.at("grad_target"), "grad_target");
      s.breakage = r.at("breakage").get<bool>();
    } catch (const Error&) {
      throw;
    } catch (const std::exception& e) {
      throw Error(ErrorCode::CorruptFile, std::string("bad dataset record: ") + e.what());
    }
    s.breakage_input = self_centered(std::span<const double>(s.target.data(), kShapeDim));
    ds.samples.push_back(std::move(s));
  }
  if (ds.samples.size() != expected)
    throw Error(ErrorCode::CorruptFile, "dataset record count does not match header");
  try {
    ds.validate();
  } catch (const Error& e) {
    throw Error(ErrorCode::CorruptFile, std::string("dataset failed validation: ") + e.what());
  }
  return ds;
}

void save_dataset(const std::string& path, const Dataset& ds) {
  std::ofstream os(path);
  if (!os) throw Error(ErrorCode::IoError, "cannot write " + path);
  write_dataset(os, ds);
  if (!os) throw Error(ErrorCode::IoError, "write failed: " + path);
}

Dataset load_dataset(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorCode::IoError, "cannot open " + path);
  return read_dataset(is);
}

// ---------------------------------------------------------------- prep pipeline

FrameContours extract_frame(const Frame& frame, const PrepOptions& opt) {
  frame.validate();
  FrameContours out;
  int t = 0;
  try {
    t = otsu_threshold(frame);
  } catch (const Error& e) {
    if (e.code() == ErrorCode::UniformImage) return out;
    throw;
  }
  double s0 = 0, n0 = 0, s1 = 0, n1 = 0;
  for (auto p : frame.pixels) {
    if (p > t) {
      s1 += p;
      n1 += 1;
    } else {
      s0 += p;
      n0 += 1;
    }
  }
  if (n0 == 0 || n1 == 0 || s1 / n1 - s0 / n0 < opt.min_contrast) return out;

  const Mask mask = morph_open_close(binarize(frame, t), opt.morph_radius);
  for (const auto& loop : trace_contours(mask, opt.min_area)) {
    const auto pts = resample_closed(loop, kDenseSamples);
    std::optional<Contour> fitted;
    try {
      fitted = fit_spline(pts).contour;
    } catch (const Error&) {
      continue;
    }
    const Contour& c = *fitted;
    if (!c.is_simple() || std::abs(polygon::signed_area(c.dense())) < 1e-12) continue;
    out.profiles.push_back(profile_impl(frame, c, true));
    out.contours.push_back(c);
  }
  return out;
}

namespace {

bool near_border(const Contour& c, const Frame& f, double margin_px) {
  const SceneMapping map{f.width, f.height};
  for (const auto& p : c.dense()) {
    const Vec2 q = map.to_pixel(p);
    if (q.x < margin_px || q.y < margin_px || q.x > f.width - 1 - margin_px || q.y > f.height - 1 - margin_px)
      return true;
  }
  return false;
}

}  // namespace

ExtractedTracks extract_tracks(const std::vector<Frame>& frames, const PrepOptions& opt, int first_id) {
  ExtractedTracks out;
  std::vector<TrackedSequence> seqs;
  int next_id = first_id;
  // Sequence index (into seqs) for every contour of the previous frame.
  std::vector<int> active;
  FrameContours prev;

  auto open_seq = [&](int frame_idx, const FrameContours& fc, int j) {
    TrackedSequence s;
    s.id = next_id++;
    s.start_frame = frame_idx;
    s.frames.push_back({fc.contours[j], fc.profiles[j], fc.contours[j].centroid()});
    seqs.push_back(std::move(s));
    return static_cast<int>(seqs.size()) - 1;
  };

  for (int f = 0; f < static_cast<int>(frames.size()); ++f) {
    FrameContours cur = extract_frame(frames[f], opt);
    std::vector<int> now(cur.contours.size(), -1);
    if (f == 0) {
      for (int j = 0; j < static_cast<int>(cur.contours.size()); ++j) now[j] = open_seq(f, cur, j);
    } else {
      const auto events = track(prev.contours, cur.contours, f);
      // New sequences are opened in ascending current-contour order.
      std::vector<std::vector<int>> parents_of(cur.contours.size());
      for (const auto& ev : events) {
        switch (ev.kind) {
          case TrackEventKind::Continue: {
            const int s = active[ev.prev[0]];
            const int j = ev.cur[0];
            seqs[s].frames.push_back({cur.contours[j], cur.profiles[j], cur.contours[j].centroid()});
            now[j] = s;
            break;
          }
          case TrackEventKind::Merge:
            ++out.merges;
            for (int p : ev.prev) {
              seqs[active[p]].terminal_event = TerminalEvent::Merged;
              parents_of[ev.cur[0]].push_back(active[p]);
            }
            break;
          case TrackEventKind::Split: {
            ++out.splits;
            TrackedSequence& s = seqs[active[ev.prev[0]]];
            s.terminal_event = TerminalEvent::Split;
            s.split_frame = s.length() - 1;
            for (int j : ev.cur) parents_of[j].push_back(active[ev.prev[0]]);
            break;
          }
          case TrackEventKind::Start:
            break;
          case TrackEventKind::End: {
            TrackedSequence& s = seqs[active[ev.prev[0]]];
            s.terminal_event = near_border(s.frames.back().contour, frames[f - 1], opt.border_margin_px)
                                   ? TerminalEvent::LeavesView
                                   : TerminalEvent::Ends;
            break;
          }
        }
      }
      for (int j = 0; j < static_cast<int>(cur.contours.size()); ++j) {
        if (now[j] >= 0) continue;
        now[j] = open_seq(f, cur, j);
        for (int p : parents_of[j]) {
          seqs[now[j]].parents.push_back(seqs[p].id);
          seqs[p].children.push_back(seqs[now[j]].id);
        }
      }
    }
    active = std::move(now);
    prev = std::move(cur);
  }
  // Sequences still alive at the end of the clip.
  if (!frames.empty())
    for (int s : active)
      seqs[s].terminal_event = near_border(seqs[s].frames.back().contour, frames.back(), opt.border_margin_px)
                                   ? TerminalEvent::LeavesView
                                   : TerminalEvent::Ends;
  out.sequences = std::move(seqs);
  return out;
}

// ---------------------------------------------------------------- tracks file

namespace {

constexpr const char* kTracksFormat = "nd-tracks v1";

}  // namespace

void write_tracks(std::ostream& os, const std::vector<TrackedSequence>& seqs) {
  ojson doc;
  doc["format"] = kTracksFormat;
  ojson arr = ojson::array();
  for (const auto& s : seqs) {
    ojson js;
    js["id"] = s.id;
    js["start_frame"] = s.start_frame;
    js["terminal_event"] = to_string(s.terminal_event);
    js["split_frame"] = s.split_frame ? ojson(*s.split_frame) : ojson(nullptr);
    js["parents"] = s.parents;
    js["children"] = s.children;
    ojson frames = ojson::array();
    for (const auto& e : s.frames) {
      ojson fr;
      ojson ctrl = ojson::array();
      for (const auto& p : e.contour.ctrl()) ctrl.push_back({p.x, p.y});
      fr["ctrl"] = std::move(ctrl);
      fr["gradient"] = to_json_array(e.gradient.mags);
      fr["center"] = {e.center.x, e.center.y};
      frames.push_back(std::move(fr));
    }
    js["frames"] = std::move(frames);
    arr.push_back(std::move(js));
  }
  doc["sequences"] = std::move(arr);
  os << doc.dump(1) << '\n';
}

std::vector<TrackedSequence> read_tracks(std::istream& is) {
  ojson doc;
  try {
    doc = ojson::parse(is);
  } catch (const std::exception&) {
    throw Error(ErrorCode::CorruptFile, "tracks file is not valid JSON");
  }
  if (!doc.contains("format") || doc["format"] != kTracksFormat)
    throw Error(ErrorCode::VersionMismatch, "expected tracks format '" + std::string(kTracksFormat) + "'");
  std::vector<TrackedSequence> out;
  try {
    for (const auto& js : doc.at("sequences")) {
      TrackedSequence s;
      s.id = js.at("id").get<int>();
      s.start_frame = js.at("start_frame").get<int>();
      s.terminal_event = terminal_event_from_string(js.at("terminal_event").get<std::string>());
      if (!js.at("split_frame").is_null()) s.split_frame = js.at("split_frame").get<int>();
      s.parents = js.at("parents").get<std::vector<int>>();
      s.children = js.at("children").get<std::vector<int>>();
      for (const auto& fr : js.at("frames")) {
        std::array<Vec2, kControlPoints> ctrl{};
        const auto& jc = fr.at("ctrl");
        if (jc.size() != static_cast<std::size_t>(kControlPoints))
          throw Error(ErrorCode::CorruptFile, "track frame needs 52 control points");
        for (int i = 0; i < kControlPoints; ++i) ctrl[i] = {jc[i].at(0).get<double>(), jc[i].at(1).get<double>()};
        GradientProfile gp;
        gp.mags = from_json_array<kControlPoints>(fr.at("gradient"), "gradient");
        const Vec2 center{fr.at("center").at(0).get<double>(), fr.at("center").at(1).get<double>()};
        s.frames.push_back({Contour(ctrl), gp, center});
      }
      s.validate();
      out.push_back(std::move(s));
    }
  } catch (const Error& e) {
    if (e.code() == ErrorCode::CorruptFile) throw;
    throw Error(ErrorCode::CorruptFile, std::string("bad tracks file: ") + e.what());
  } catch (const std::exception& e) {
    throw Error(ErrorCode::CorruptFile, std::string("bad tracks file: ") + e.what());
  }
  return out;
}

void save_tracks(const std::string& path, const std::vector<TrackedSequence>& seqs) {
  std::ofstream os(path);
  if (!os) throw Error(ErrorCode::IoError, "cannot write " + path);
  write_tracks(os, seqs);
  if (!os) throw Error(ErrorCode::IoError, "write failed: " + path);
}

std::vector<TrackedSequence> load_tracks(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorCode::IoError, "cannot open " + path);
  return read_tracks(is);
}

}  // namespace nd
