#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "neuraldrop/common.hpp"

namespace nd {

/// 8-bit grayscale frame. Row 0 is the top of the image.
struct Frame {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;
  int timestamp = 0;

  Frame() = default;
  Frame(int w, int h, std::uint8_t fill = 0, int t = 0)
      : width(w), height(h), pixels(static_cast<std::size_t>(w) * h, fill), timestamp(t) {}

  std::uint8_t at(int col, int row) const { return pixels[static_cast<std::size_t>(row) * width + col]; }
  std::uint8_t& at(int col, int row) { return pixels[static_cast<std::size_t>(row) * width + col]; }

  /// Throws InvalidArgument unless both dimensions are at least 16 and the buffer matches.
  void validate() const;
};

struct Mask {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> bits;

  Mask() = default;
  Mask(int w, int h) : width(w), height(h), bits(static_cast<std::size_t>(w) * h, 0) {}

  bool at(int col, int row) const { return bits[static_cast<std::size_t>(row) * width + col] != 0; }
  void set(int col, int row, bool v) { bits[static_cast<std::size_t>(row) * width + col] = v ? 1 : 0; }
  bool operator==(const Mask&) const = default;
  std::size_t count() const;
};

/// Maps pixel index space (pixel centers at integer col,row; rows grow downward)
/// to scene units (y-up, the larger image side spans [0,1]).
struct SceneMapping {
  int width = 0;
  int height = 0;

  double pixels_per_unit() const { return static_cast<double>(width > height ? width : height); }
  Vec2 to_scene(Vec2 pix) const {
    const double s = pixels_per_unit();
    return {(pix.x + 0.5) / s, (height - pix.y - 0.5) / s};
  }
  Vec2 to_pixel(Vec2 scene) const {
    const double s = pixels_per_unit();
    return {scene.x * s - 0.5, height - scene.y * s - 0.5};
  }
};

Frame read_pgm(const std::string& path);
void write_pgm(const std::string& path, const Frame& frame);

struct Image16 {
  int width = 0;
  int height = 0;
  std::vector<std::uint16_t> values;
};

Image16 read_pgm16(const std::string& path);
void write_pgm16(const std::string& path, const Image16& image);

/// Otsu threshold over the 256-bin histogram; foreground is intensity > threshold.
/// Exact integer arithmetic; ties resolve to the lowest threshold.
int otsu_threshold(const Frame& frame);

Mask binarize(const Frame& frame, int threshold);

/// Opening then closing with a disc structuring element.
Mask morph_open_close(const Mask& mask, int radius);

/// One clockwise (scene y-up) loop per connected foreground component, outer boundary
/// only, in scene units. Components below `min_area` pixels are dropped. Loops are
/// sorted by their topmost point (highest first, ties by smaller x).
std::vector<std::vector<Vec2>> trace_contours(const Mask& mask, int min_area = 16);

/// Sobel gradient (1/8-normalized, intensity per pixel, x right / y up) bilinearly
/// interpolated at a point in pixel index space.
Vec2 sobel_at(const Frame& frame, Vec2 pixel_point);

/// Resamples a closed polyline at n points equally spaced in arc length, starting at loop[0].
std::vector<Vec2> resample_closed(const std::vector<Vec2>& loop, int n);

}  // namespace nd
