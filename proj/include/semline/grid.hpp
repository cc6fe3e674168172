#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include "semline/geometry.hpp"

namespace semline {

/// Dense H×W×C grid of doubles in row-major (row, column, channel) order.
/// Pixel (x, y) has its center at continuous coordinates (x+0.5, y+0.5).
struct FeatureGrid {
  int h = 0;
  int w = 0;
  int c = 0;
  std::vector<double> v;

  static FeatureGrid zeros(int h, int w, int c);

  std::size_t index(int y, int x, int ch) const {
    return (static_cast<std::size_t>(y) * w + x) * c + ch;
  }
  double& at(int y, int x, int ch) { return v[index(y, x, ch)]; }
  double at(int y, int x, int ch) const { return v[index(y, x, ch)]; }

  bool same_shape(const FeatureGrid& o) const {
    return h == o.h && w == o.w && c == o.c;
  }
  ImageSize size() const { return {w, h}; }
};

/// Throws DimensionError unless all values are finite and dims are positive.
void require_finite(const FeatureGrid& g, const char* what);

/// Per-pixel Gaussian weights exp(-d^2 / (2 sigma^2)) of pixel-center distance
/// to the line; length h*w, row-major.
std::vector<double> gaussian_weights(int h, int w, const Line& grid_line, double sigma);

/// Y^c(k) = w(d_k) * X^c(k): every channel of pixel k scaled by the Gaussian
/// of k's distance to the line. Peak weight is 1 on the line itself.
FeatureGrid gaussian_weight(const FeatureGrid& x, const Line& grid_line, double sigma);

/// Backward of gaussian_weight: accumulates w(d_k) * dout into dx.
void gaussian_weight_backward(const FeatureGrid& dout, const Line& grid_line,
                              double sigma, FeatureGrid& dx);

/// Precomputed bilinear sampling plan for reflecting a grid across a line:
/// for each output pixel, up to four source taps (pixel index into h*w, or -1
/// when the tap falls outside the grid) with their interpolation weights.
struct FlipPlan {
  int h = 0;
  int w = 0;
  std::vector<std::array<int, 4>> taps;
  std::vector<std::array<double, 4>> weights;
  std::vector<unsigned char> exact;  // 1 when the reflection lands on a pixel center
};

FlipPlan make_flip_plan(int h, int w, const Line& grid_line);

/// Applies a flip plan to every channel of y.
FeatureGrid flip_apply(const FlipPlan& plan, const FeatureGrid& y);

/// Adjoint of flip_apply: scatters dout back through the taps into dy.
void flip_adjoint(const FlipPlan& plan, const FeatureGrid& dout, FeatureGrid& dy);

/// Mirrors y across the line: output pixel p takes the bilinear sample of y
/// at the reflection of p's center; samples outside the grid are zero.
FeatureGrid mirror_flip(const FeatureGrid& y, const Line& grid_line);

/// Backward of mirror_flip: accumulates the adjoint scatter of dout into dy.
void mirror_flip_backward(const FeatureGrid& dout, const Line& grid_line, FeatureGrid& dy);

/// Stacks b's channels after a's. Heights and widths must match.
FeatureGrid concat_channels(const FeatureGrid& a, const FeatureGrid& b);

/// Backward of concat_channels: splits dout back into the two channel blocks
/// and accumulates into da / db.
void concat_channels_backward(const FeatureGrid& dout, FeatureGrid& da, FeatureGrid& db);

/// Rescales an image-space line onto a grid of the given extent: coordinates
/// are multiplied by the axis scale factors, then endpoints are re-projected
/// onto the grid boundary. Throws DegenerateLineError if the result violates
/// the line invariants.
Line rescale_line(const Line& line, const ImageSize& from, const ImageSize& to);

}  // namespace semline
