#include "neuraldrop/training.hpp"

#include <algorithm>

namespace nd {

namespace {

template <std::size_t N, typename Get>
nn::TrainData window_data(const Dataset& ds, Get get_step, double scale) {
  nn::TrainData d;
  const auto n = static_cast<Eigen::Index>(ds.samples.size());
  d.inputs.assign(static_cast<std::size_t>(ds.K), nn::Mat(N, n));
  d.targets.resize(N, n);
  for (Eigen::Index s = 0; s < n; ++s) {
    const TrainingSample& ts = ds.samples[s];
    for (int t = 0; t < ds.K; ++t) {
      const std::array<double, N>& step = get_step(ts, t);
      for (std::size_t r = 0; r < N; ++r) d.inputs[t](r, s) = step[r] / scale;
    }
    const std::array<double, N>& target = get_step(ts, -1);
    for (std::size_t r = 0; r < N; ++r) d.targets(r, s) = target[r] / scale;
  }
  return d;
}

}  // namespace

nn::TrainData contour_train_data(const Dataset& ds) {
  return window_data<kStepDim>(
      ds, [](const TrainingSample& s, int t) -> const auto& { return t < 0 ? s.target : s.inputs[t]; }, 1.0);
}

nn::TrainData gradient_train_data(const Dataset& ds, double scale) {
  if (!(scale > 0)) throw Error(ErrorCode::InvalidArgument, "gradient scale must be > 0");
  return window_data<kControlPoints>(
      ds, [](const TrainingSample& s, int t) -> const auto& { return t < 0 ? s.grad_target : s.grad_inputs[t]; },
      scale);
}

nn::TrainData breakage_train_data(const Dataset& ds) {
  nn::TrainData d;
  const auto n = static_cast<Eigen::Index>(ds.samples.size());
  d.inputs.assign(1, nn::Mat(kShapeDim, n));
  d.targets.resize(1, n);
  for (Eigen::Index s = 0; s < n; ++s) {
    for (int r = 0; r < kShapeDim; ++r) d.inputs[0](r, s) = ds.samples[s].breakage_input[r];
    d.targets(0, s) = ds.samples[s].breakage ? 1.0 : 0.0;
  }
  return d;
}

double gradient_scale(const Dataset& ds) {
  double m = 0.0;
  for (const auto& s : ds.samples) {
    for (const auto& g : s.grad_inputs) m = std::max(m, *std::max_element(g.begin(), g.end()));
    m = std::max(m, *std::max_element(s.grad_target.begin(), s.grad_target.end()));
  }
  return m > 0 ? m : 1.0;
}

}  // namespace nd
