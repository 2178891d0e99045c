#pragma once

#include <random>

#include "neuraldrop/neural.hpp"

namespace nd::testing {

inline nn::Mat random_mat(std::mt19937_64& rng, int r, int c, double scale = 1.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  nn::Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

inline nn::Sequence random_seq(std::mt19937_64& rng, int steps, int dim, int batch) {
  nn::Sequence s;
  for (int t = 0; t < steps; ++t) s.push_back(random_mat(rng, dim, batch));
  return s;
}

// Two LSTM branches with different cell activations, a merge, a last-step LSTM and
// two dense layers.
inline nn::Model toy_net(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> w(2, 4);
  nn::GraphBuilder g("toy", 5);
  const int a = g.input("a", 0, 3);
  const int b = g.input("b", 3, 2);
  const int la = g.lstm(a, w(rng), true, nn::Activation::Tanh);
  const int lb = g.lstm(b, w(rng), true, nn::Activation::Linear);
  const int m = g.concat({la, lb});
  const int l = g.lstm(m, w(rng), false, nn::Activation::Sigmoid);
  const int d = g.dense(l, w(rng), nn::Activation::Tanh);
  const int d2 = g.dense(d, w(rng), nn::Activation::Relu);
  g.dense(d2, 2, nn::Activation::Sigmoid);
  nn::Model model = g.finish(0.0, rng());
  // Nonzero biases so every gate path is exercised.
  for (auto& layer : model.layers) layer.b = random_mat(rng, static_cast<int>(layer.b.rows()), 1, 0.5);
  return model;
}

}  // namespace nd::testing
