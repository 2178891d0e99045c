#include "neuraldrop/image.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include <boost/multiprecision/cpp_int.hpp>

#include "neuraldrop/geometry.hpp"

namespace nd {

void Frame::validate() const {
  if (width < 16 || height < 16)
    throw Error(ErrorCode::InvalidArgument, "frame must be at least 16x16");
  if (pixels.size() != static_cast<std::size_t>(width) * height)
    throw Error(ErrorCode::InvalidArgument, "frame buffer size does not match dimensions");
}

std::size_t Mask::count() const {
  return static_cast<std::size_t>(std::count_if(bits.begin(), bits.end(), [](std::uint8_t b) { return b != 0; }));
}

namespace {

// Reads the PGM header fields (magic, width, height, maxval), skipping comments.
struct PgmHeader {
  int width = 0, height = 0, maxval = 0;
};

int read_header_int(std::istream& is) {
  while (true) {
    int c = is.peek();
    if (c == EOF) throw Error(ErrorCode::CorruptFile, "truncated PGM header");
    if (std::isspace(c)) {
      is.get();
    } else if (c == '#') {
      std::string line;
      std::getline(is, line);
    } else {
      break;
    }
  }
  int v = 0;
  if (!(is >> v)) throw Error(ErrorCode::CorruptFile, "bad PGM header");
  return v;
}

PgmHeader read_pgm_header(std::istream& is, const std::string& path) {
  char magic[2] = {0, 0};
  is.read(magic, 2);
  if (!is || magic[0] != 'P' || magic[1] != '5')
    throw Error(ErrorCode::CorruptFile, "not a binary PGM (P5): " + path);
  PgmHeader h;
  h.width = read_header_int(is);
  h.height = read_header_int(is);
  h.maxval = read_header_int(is);
  is.get();  // single whitespace before raster
  if (h.width <= 0 || h.height <= 0 || h.maxval <= 0 || h.maxval > 65535)
    throw Error(ErrorCode::CorruptFile, "bad PGM dimensions: " + path);
  return h;
}

}  // namespace

Frame read_pgm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorCode::IoError, "cannot open " + path);
  const PgmHeader h = read_pgm_header(is, path);
  if (h.maxval > 255) throw Error(ErrorCode::CorruptFile, "expected 8-bit PGM: " + path);
  Frame f(h.width, h.height);
  is.read(reinterpret_cast<char*>(f.pixels.data()), static_cast<std::streamsize>(f.pixels.size()));
  if (!is) throw Error(ErrorCode::CorruptFile, "truncated PGM raster: " + path);
  return f;
}

void write_pgm(const std::string& path, const Frame& frame) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorCode::IoError, "cannot write " + path);
  os << "P5\n" << frame.width << ' ' << frame.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(frame.pixels.data()), static_cast<std::streamsize>(frame.pixels.size()));
  if (!os) throw Error(ErrorCode::IoError, "write failed: " + path);
}

Image16 read_pgm16(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorCode::IoError, "cannot open " + path);
  const PgmHeader h = read_pgm_header(is, path);
  Image16 img{h.width, h.height, std::vector<std::uint16_t>(static_cast<std::size_t>(h.width) * h.height)};
  if (h.maxval <= 255) {
    std::vector<unsigned char> raw(img.values.size());
    is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!is) throw Error(ErrorCode::CorruptFile, "truncated PGM raster: " + path);
    std::copy(raw.begin(), raw.end(), img.values.begin());
    return img;
  }
  std::vector<unsigned char> raw(img.values.size() * 2);
  is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!is) throw Error(ErrorCode::CorruptFile, "truncated PGM raster: " + path);
  for (std::size_t i = 0; i < img.values.size(); ++i)
    img.values[i] = static_cast<std::uint16_t>((raw[2 * i] << 8) | raw[2 * i + 1]);
  return img;
}

void write_pgm16(const std::string& path, const Image16& image) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorCode::IoError, "cannot write " + path);
  os << "P5\n" << image.width << ' ' << image.height << "\n65535\n";
  std::vector<unsigned char> raw(image.values.size() * 2);
  for (std::size_t i = 0; i < image.values.size(); ++i) {
    raw[2 * i] = static_cast<unsigned char>(image.values[i] >> 8);
    raw[2 * i + 1] = static_cast<unsigned char>(image.values[i] & 0xff);
  }
  os.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!os) throw Error(ErrorCode::IoError, "write failed: " + path);
}

int otsu_threshold(const Frame& frame) {
  using boost::multiprecision::cpp_int;
  std::array<std::int64_t, 256> hist{};
  for (auto p : frame.pixels) ++hist[p];
  const auto distinct = std::count_if(hist.begin(), hist.end(), [](std::int64_t c) { return c > 0; });
  if (distinct < 2) throw Error(ErrorCode::UniformImage, "image has a single intensity");

  std::int64_t total_n = 0, total_s = 0;
  for (int i = 0; i < 256; ++i) {
    total_n += hist[i];
    total_s += hist[i] * i;
  }
  // Between-class variance up to the constant 1/N^2: (s0*n1 - s1*n0)^2 / (n0*n1).
  // Compared as exact cross products.
  int best_t = -1;
  cpp_int best_num = 0, best_den = 1;
  std::int64_t n0 = 0, s0 = 0;
  for (int t = 0; t < 255; ++t) {
    n0 += hist[t];
    s0 += hist[t] * t;
    const std::int64_t n1 = total_n - n0, s1 = total_s - s0;
    if (n0 == 0 || n1 == 0) continue;
    const cpp_int d = cpp_int(s0) * n1 - cpp_int(s1) * n0;
    const cpp_int num = d * d;
    const cpp_int den = cpp_int(n0) * n1;
    if (best_t < 0 || num * best_den > best_num * den) {
      best_t = t;
      best_num = num;
      best_den = den;
    }
  }
  return best_t;
}

Mask binarize(const Frame& frame, int threshold) {
  Mask m(frame.width, frame.height);
  for (std::size_t i = 0; i < frame.pixels.size(); ++i) m.bits[i] = frame.pixels[i] > threshold ? 1 : 0;
  return m;
}

namespace {

std::vector<std::pair<int, int>> disc_offsets(int radius) {
  std::vector<std::pair<int, int>> off;
  for (int dy = -radius; dy <= radius; ++dy)
    for (int dx = -radius; dx <= radius; ++dx)
      if (dx * dx + dy * dy <= radius * radius) off.emplace_back(dx, dy);
  return off;
}

// Out-of-image neighbors are ignored by both operators.
Mask erode(const Mask& m, const std::vector<std::pair<int, int>>& off) {
  Mask out(m.width, m.height);
  for (int r = 0; r < m.height; ++r)
    for (int c = 0; c < m.width; ++c) {
      bool keep = m.at(c, r);
      for (std::size_t k = 0; keep && k < off.size(); ++k) {
        const int cc = c + off[k].first, rr = r + off[k].second;
        if (cc >= 0 && cc < m.width && rr >= 0 && rr < m.height && !m.at(cc, rr)) keep = false;
      }
      out.set(c, r, keep);
    }
  return out;
}

Mask dilate(const Mask& m, const std::vector<std::pair<int, int>>& off) {
  Mask out(m.width, m.height);
  for (int r = 0; r < m.height; ++r)
    for (int c = 0; c < m.width; ++c) {
      bool hit = m.at(c, r);
      for (std::size_t k = 0; !hit && k < off.size(); ++k) {
        const int cc = c + off[k].first, rr = r + off[k].second;
        if (cc >= 0 && cc < m.width && rr >= 0 && rr < m.height && m.at(cc, rr)) hit = true;
      }
      out.set(c, r, hit);
    }
  return out;
}

}  // namespace

Mask morph_open_close(const Mask& mask, int radius) {
  if (radius < 0) throw Error(ErrorCode::InvalidArgument, "morphology radius must be >= 0");
  if (radius == 0) return mask;
  const auto off = disc_offsets(radius);
  Mask opened = dilate(erode(mask, off), off);
  return erode(dilate(opened, off), off);
}

namespace {

// 8-connected component labels; -1 for background.
std::vector<int> label_components(const Mask& m, int& count) {
  std::vector<int> label(m.bits.size(), -1);
  count = 0;
  std::vector<int> stack;
  for (int r = 0; r < m.height; ++r)
    for (int c = 0; c < m.width; ++c) {
      const int idx = r * m.width + c;
      if (!m.bits[idx] || label[idx] >= 0) continue;
      label[idx] = count;
      stack.push_back(idx);
      while (!stack.empty()) {
        const int cur = stack.back();
        stack.pop_back();
        const int cr = cur / m.width, cc = cur % m.width;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int nr = cr + dy, nc = cc + dx;
            if (nr < 0 || nr >= m.height || nc < 0 || nc >= m.width) continue;
            const int nidx = nr * m.width + nc;
            if (m.bits[nidx] && label[nidx] < 0) {
              label[nidx] = count;
              stack.push_back(nidx);
            }
          }
      }
      ++count;
    }
  return label;
}

// Marching squares at iso level 0.5 on a field whose border ring is zero.
// Returns the loops in local pixel coordinates (col, row).
std::vector<std::vector<Vec2>> march(const std::vector<double>& f, int w, int h) {
  constexpr double iso = 0.5;
  auto val = [&](int i, int j) { return f[static_cast<std::size_t>(j) * w + i]; };
  auto in = [&](int i, int j) { return val(i, j) >= iso; };

  std::vector<Vec2> pts;
  std::vector<std::array<int, 2>> nbr;
  std::unordered_map<long long, int> edge_point;

  // Edge keys: horizontal edge from (i,j) to (i+1,j) -> orient 0; vertical (i,j)-(i,j+1) -> 1.
  auto point_on = [&](int i, int j, int orient) -> int {
    const long long key = (static_cast<long long>(j) * w + i) * 2 + orient;
    auto it = edge_point.find(key);
    if (it != edge_point.end()) return it->second;
    const int i2 = orient == 0 ? i + 1 : i, j2 = orient == 0 ? j : j + 1;
    const double va = val(i, j), vb = val(i2, j2);
    const double t = (iso - va) / (vb - va);
    pts.push_back({i + t * (i2 - i), j + t * (j2 - j)});
    nbr.push_back({-1, -1});
    const int id = static_cast<int>(pts.size()) - 1;
    edge_point.emplace(key, id);
    return id;
  };
  auto link = [&](int a, int b) {
    (nbr[a][0] < 0 ? nbr[a][0] : nbr[a][1]) = b;
    (nbr[b][0] < 0 ? nbr[b][0] : nbr[b][1]) = a;
  };

  for (int j = 0; j + 1 < h; ++j)
    for (int i = 0; i + 1 < w; ++i) {
      const bool tl = in(i, j), tr = in(i + 1, j), br = in(i + 1, j + 1), bl = in(i, j + 1);
      // Edges in order: top, right, bottom, left.
      std::array<int, 4> e{-1, -1, -1, -1};
      if (tl != tr) e[0] = point_on(i, j, 0);
      if (tr != br) e[1] = point_on(i + 1, j, 1);
      if (bl != br) e[2] = point_on(i, j + 1, 0);
      if (tl != bl) e[3] = point_on(i, j, 1);
      std::vector<int> hit;
      for (int k = 0; k < 4; ++k)
        if (e[k] >= 0) hit.push_back(k);
      if (hit.size() == 2) {
        link(e[hit[0]], e[hit[1]]);
      } else if (hit.size() == 4) {
        const double center = 0.25 * (val(i, j) + val(i + 1, j) + val(i + 1, j + 1) + val(i, j + 1));
        if ((center >= iso) == tl) {
          link(e[0], e[1]);
          link(e[2], e[3]);
        } else {
          link(e[3], e[0]);
          link(e[1], e[2]);
        }
      }
    }

  std::vector<std::vector<Vec2>> loops;
  std::vector<char> used(pts.size(), 0);
  for (std::size_t s = 0; s < pts.size(); ++s) {
    if (used[s]) continue;
    std::vector<Vec2> loop;
    int prev = -1, cur = static_cast<int>(s);
    while (cur >= 0 && !used[cur]) {
      used[cur] = 1;
      if (loop.empty() || distance(loop.back(), pts[cur]) > 1e-12) loop.push_back(pts[cur]);
      const int next = nbr[cur][0] != prev ? nbr[cur][0] : nbr[cur][1];
      prev = cur;
      cur = next;
    }
    if (loop.size() >= 2 && distance(loop.front(), loop.back()) <= 1e-12) loop.pop_back();
    if (loop.size() >= 3) loops.push_back(std::move(loop));
  }
  return loops;
}

}  // namespace

std::vector<std::vector<Vec2>> trace_contours(const Mask& mask, int min_area) {
  int ncomp = 0;
  const auto label = label_components(mask, ncomp);
  struct Box {
    int c0, c1, r0, r1, area;
  };
  std::vector<Box> boxes(ncomp, Box{mask.width, -1, mask.height, -1, 0});
  for (int r = 0; r < mask.height; ++r)
    for (int c = 0; c < mask.width; ++c) {
      const int l = label[r * mask.width + c];
      if (l < 0) continue;
      Box& b = boxes[l];
      b.c0 = std::min(b.c0, c);
      b.c1 = std::max(b.c1, c);
      b.r0 = std::min(b.r0, r);
      b.r1 = std::max(b.r1, r);
      ++b.area;
    }

  const SceneMapping map{mask.width, mask.height};
  constexpr int margin = 2;
  std::vector<std::vector<Vec2>> out;
  for (int l = 0; l < ncomp; ++l) {
    const Box& b = boxes[l];
    if (b.area < min_area) continue;
    const int w = b.c1 - b.c0 + 1 + 2 * margin, h = b.r1 - b.r0 + 1 + 2 * margin;
    std::vector<double> raw(static_cast<std::size_t>(w) * h, 0.0);
    for (int r = b.r0; r <= b.r1; ++r)
      for (int c = b.c0; c <= b.c1; ++c)
        if (label[r * mask.width + c] == l)
          raw[static_cast<std::size_t>(r - b.r0 + margin) * w + (c - b.c0 + margin)] = 1.0;
    // Separable [1 2 1]/4 smoothing.
    std::vector<double> tmp(raw.size(), 0.0), field(raw.size(), 0.0);
    for (int j = 0; j < h; ++j)
      for (int i = 1; i + 1 < w; ++i)
        tmp[j * w + i] = 0.25 * (raw[j * w + i - 1] + 2 * raw[j * w + i] + raw[j * w + i + 1]);
    for (int j = 1; j + 1 < h; ++j)
      for (int i = 0; i < w; ++i)
        field[j * w + i] = 0.25 * (tmp[(j - 1) * w + i] + 2 * tmp[j * w + i] + tmp[(j + 1) * w + i]);

    auto loops = march(field, w, h);
    if (loops.empty()) continue;
    std::vector<Vec2> best;
    double best_area = -1.0;
    for (auto& loop : loops) {
      for (auto& p : loop) p = map.to_scene({p.x + b.c0 - margin, p.y + b.r0 - margin});
      const double a = std::abs(polygon::signed_area(loop));
      if (a > best_area) {
        best_area = a;
        best = std::move(loop);
      }
    }
    if (polygon::signed_area(best) > 0) std::reverse(best.begin(), best.end());
    out.push_back(std::move(best));
  }

  auto top = [](const std::vector<Vec2>& loop) {
    Vec2 t = loop[0];
    for (const auto& p : loop)
      if (p.y > t.y || (p.y == t.y && p.x < t.x)) t = p;
    return t;
  };
  std::stable_sort(out.begin(), out.end(), [&](const auto& a, const auto& b) {
    const Vec2 ta = top(a), tb = top(b);
    if (ta.y != tb.y) return ta.y > tb.y;
    return ta.x < tb.x;
  });
  return out;
}

Vec2 sobel_at(const Frame& frame, Vec2 p) {
  const int w = frame.width, h = frame.height;
  if (!(p.x >= 1.0 && p.x <= w - 2.0 && p.y >= 1.0 && p.y <= h - 2.0))
    throw Error(ErrorCode::OutOfBounds, "sobel sample point too close to the frame border");
  auto I = [&](int c, int r) { return static_cast<double>(frame.at(c, r)); };
  auto grad = [&](int c, int r) -> Vec2 {
    const double gx = (I(c + 1, r - 1) + 2 * I(c + 1, r) + I(c + 1, r + 1)) -
                      (I(c - 1, r - 1) + 2 * I(c - 1, r) + I(c - 1, r + 1));
    // Rows grow downward, so y-up is the row above minus the row below.
    const double gy = (I(c - 1, r - 1) + 2 * I(c, r - 1) + I(c + 1, r - 1)) -
                      (I(c - 1, r + 1) + 2 * I(c, r + 1) + I(c + 1, r + 1));
    return {gx / 8.0, gy / 8.0};
  };
  int c0 = static_cast<int>(std::floor(p.x)), r0 = static_cast<int>(std::floor(p.y));
  c0 = std::min(c0, w - 3);
  r0 = std::min(r0, h - 3);
  const double fx = p.x - c0, fy = p.y - r0;
  const Vec2 g00 = grad(c0, r0), g10 = grad(c0 + 1, r0), g01 = grad(c0, r0 + 1), g11 = grad(c0 + 1, r0 + 1);
  return g00 * ((1 - fx) * (1 - fy)) + g10 * (fx * (1 - fy)) + g01 * ((1 - fx) * fy) + g11 * (fx * fy);
}

std::vector<Vec2> resample_closed(const std::vector<Vec2>& loop, int n) {
  if (loop.size() < 2 || n < 1) throw Error(ErrorCode::InvalidArgument, "resample needs a loop and n >= 1");
  const std::size_t m = loop.size();
  std::vector<double> cum(m + 1, 0.0);
  for (std::size_t i = 0; i < m; ++i) cum[i + 1] = cum[i] + distance(loop[i], loop[(i + 1) % m]);
  const double total = cum[m];
  if (total <= 0) throw Error(ErrorCode::DegenerateLoop, "zero-length loop");
  std::vector<Vec2> out;
  out.reserve(n);
  std::size_t seg = 0;
  for (int k = 0; k < n; ++k) {
    const double s = total * k / n;
    while (seg + 1 < m && cum[seg + 1] <= s) ++seg;
    const double len = cum[seg + 1] - cum[seg];
    const double t = len > 0 ? (s - cum[seg]) / len : 0.0;
    out.push_back(loop[seg] + (loop[(seg + 1) % m] - loop[seg]) * t);
  }
  return out;
}

}  // namespace nd
