#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "neuraldrop/dataprep.hpp"

namespace nd {

/// A drop placed explicitly instead of at random. Radius is the equivalent-disc radius.
struct SynthDrop {
  Vec2 center;
  double radius = 0.06;
  double elongation = 0.0;
};

struct SynthParams {
  int width = 160;
  int height = 160;
  int frames = 60;
  int n_sequences = 1;
  int drop_count = 2;
  double min_radius = 0.05;
  double max_radius = 0.075;
  // Speed law v = alpha * area^beta, scene units per frame, capped at max_step.
  double alpha = 0.06;
  double beta = 0.5;
  double max_step = 0.05;
  double elongation_rate = 0.04;
  double max_initial_elongation = 0.8;
  double split_elongation = 2.0;
  // Area fraction carried away by the tail child at a split.
  double tail_fraction = 0.15;
  // Drops smaller than this equivalent radius never elongate.
  double min_split_radius = 0.045;
  double tail_sharpness = 8.0;
  double background = 20.0;
  double peak = 200.0;
  double noise = 2.0;
  // Pixel gaps at which drops merge or leave the view.
  double merge_gap_px = 4.0;
  double exit_margin_px = 3.0;
  std::vector<SynthDrop> drops;

  /// Throws InvalidParams.
  void validate() const;
};

SynthParams synth_params_from_json(const std::string& text);
std::string synth_params_to_json(const SynthParams& p);

/// Centroid speed for a drop of the given area (scene units per frame).
double synth_speed(const SynthParams& p, double area);

struct SynthClip {
  std::vector<Frame> frames;
  std::vector<TrackedSequence> truth;
};

/// One clip per sequence index; clip i depends only on (params, seed, i).
SynthClip synth_generate(const SynthParams& params, std::uint64_t seed, int sequence_index = 0);

}  // namespace nd
