#pragma once

// Brute-force reference implementations shared by the unit and acceptance suites.

#include <boost/multiprecision/cpp_int.hpp>
#include <algorithm>
#include <cmath>
#include <tuple>
#include <utility>
#include <vector>

#include "neuraldrop/image.hpp"
#include "neuraldrop/neural.hpp"
#include "neuraldrop/simulate.hpp"

namespace nd::oracle {

/// Between-class variance straight from the definition, as an exact rational,
/// scanned over every threshold; strict improvement keeps the lowest maximizer.
inline int otsu_exhaustive(const Frame& f) {
  using boost::multiprecision::cpp_rational;
  const std::size_t n = f.pixels.size();
  int best = -1;
  cpp_rational best_var = -1;
  for (int t = 0; t < 255; ++t) {
    long long n0 = 0, n1 = 0, s0 = 0, s1 = 0;
    for (auto p : f.pixels) {
      if (p <= t) {
        n0 += 1;
        s0 += p;
      } else {
        n1 += 1;
        s1 += p;
      }
    }
    if (n0 == 0 || n1 == 0) continue;
    const cpp_rational w0(n0, static_cast<long long>(n)), w1(n1, static_cast<long long>(n));
    const cpp_rational mu0(s0, n0), mu1(s1, n1);
    const cpp_rational var = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
    if (var > best_var) {
      best_var = var;
      best = t;
    }
  }
  return best;
}

/// Largest relative difference between backward() and central differences of
/// L = sum(w .* forward(x)) over every parameter entry. Relative error uses a floor
/// of 1e-6 on the denominator so entries with a vanishing gradient compare absolutely.
inline double max_gradient_error(nn::Model& model, const nn::Sequence& x, const nn::Mat& w, double eps = 1e-5) {
  nn::ForwardCache cache;
  nn::forward(model, x, false, &cache);
  const auto analytic = nn::backward(model, cache, w);
  auto loss = [&] { return nn::forward(model, x, false).cwiseProduct(w).sum(); };
  const auto params = nn::parameters(model);
  double worst = 0.0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    nn::Mat& m = *params[p];
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      const double keep = m.data()[i];
      m.data()[i] = keep + eps;
      const double up = loss();
      m.data()[i] = keep - eps;
      const double down = loss();
      m.data()[i] = keep;
      const double numeric = (up - down) / (2 * eps);
      const double a = analytic[p].data()[i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-6});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

/// A one-unit LSTM written out by hand: h = o * act(c), zero initial state.
inline double scalar_lstm(const double W[4], const double U[4], const double b[4], double x, int steps,
                          double (*act)(double)) {
  auto sig = [](double z) { return 1.0 / (1.0 + std::exp(-z)); };
  double h = 0, c = 0;
  for (int t = 0; t < steps; ++t) {
    const double i = sig(W[0] * x + U[0] * h + b[0]);
    const double f = sig(W[1] * x + U[1] * h + b[1]);
    const double g = std::tanh(W[2] * x + U[2] * h + b[2]);
    const double o = sig(W[3] * x + U[3] * h + b[3]);
    c = f * c + i * g;
    h = o * act(c);
  }
  return h;
}

/// Ranks every negative by the mean distance to its 3 nearest positives with a full
/// sort, then keeps the first round(ratio * positives).
inline std::vector<int> near_miss_exhaustive(const nn::Mat& samples, const std::vector<int>& labels, double ratio) {
  std::vector<int> pos, neg;
  for (std::size_t i = 0; i < labels.size(); ++i) (labels[i] ? pos : neg).push_back(static_cast<int>(i));
  std::vector<std::pair<double, int>> ranked;
  for (int n : neg) {
    std::vector<double> d;
    for (int p : pos) {
      double s = 0;
      for (Eigen::Index k = 0; k < samples.cols(); ++k) s += (samples(n, k) - samples(p, k)) * (samples(n, k) - samples(p, k));
      d.push_back(std::sqrt(s));
    }
    std::sort(d.begin(), d.end());
    const std::size_t k = std::min<std::size_t>(3, d.size());
    double mean = 0;
    for (std::size_t j = 0; j < k; ++j) mean += d[j];
    ranked.emplace_back(mean / static_cast<double>(k), n);
  }
  std::sort(ranked.begin(), ranked.end());
  std::vector<int> out = pos;
  const std::size_t want = std::min(neg.size(), static_cast<std::size_t>(std::llround(ratio * pos.size())));
  for (std::size_t j = 0; j < want; ++j) out.push_back(ranked[j].second);
  std::sort(out.begin(), out.end());
  return out;
}

/// Every ordered pair, no early rejection: constraints are checked after the objective,
/// and the best pair is picked by (value, min index, max index).
inline std::pair<int, int> split_pair_brute_force(const Contour& c, const SplitConfig& cfg) {
  const NormalSet n = inward_normals(c);
  bool found = false;
  std::tuple<double, int, int> best{0.0, 0, 0};
  for (int i = 0; i < kControlPoints; ++i) {
    for (int j = 0; j < kControlPoints; ++j) {
      if (i == j) continue;
      const double v = distance(c.eval(i), c.eval(j)) - arc_length_between(c, i, j);
      const int d = std::abs(i - j);
      const bool ok = std::min(d, kControlPoints - d) >= cfg.min_separation && dot(n[i], n[j]) < cfg.delta;
      if (!ok) continue;
      const std::tuple<double, int, int> cand{v, std::min(i, j), std::max(i, j)};
      if (!found || cand < best) best = cand;
      found = true;
    }
  }
  if (!found) return {-1, -1};
  return {std::get<1>(best), std::get<2>(best)};
}

/// Union area of two dense-sample polygons by fine point sampling of their bounding box.
inline double union_area_sampled(const Contour& a, const Contour& b, int n = 600) {
  Vec2 lo = a.dense().front(), hi = lo;
  for (const auto* c : {&a, &b})
    for (const Vec2& p : c->dense()) {
      lo = {std::min(lo.x, p.x), std::min(lo.y, p.y)};
      hi = {std::max(hi.x, p.x), std::max(hi.y, p.y)};
    }
  const double hx = (hi.x - lo.x) / n, hy = (hi.y - lo.y) / n;
  long count = 0;
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < n; ++i) {
      const Vec2 p{lo.x + (i + 0.5) * hx, lo.y + (j + 0.5) * hy};
      if (polygon::contains(a.dense(), p, 0.0) || polygon::contains(b.dense(), p, 0.0)) ++count;
    }
  return count * hx * hy;
}

}  // namespace nd::oracle
