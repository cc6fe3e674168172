#include "semline/grid.hpp"

#include <cmath>
#include <sstream>

#include "semline/error.hpp"

namespace semline {

FeatureGrid FeatureGrid::zeros(int h, int w, int c) {
  if (h < 1 || w < 1 || c < 1) {
    std::ostringstream os;
    os << "grid dimensions must be positive, got " << h << "x" << w << "x" << c;
    throw DimensionError(os.str());
  }
  FeatureGrid g;
  g.h = h;
  g.w = w;
  g.c = c;
  g.v.assign(static_cast<std::size_t>(h) * w * c, 0.0);
  return g;
}

void require_finite(const FeatureGrid& g, const char* what) {
  if (g.h < 1 || g.w < 1 || g.c < 1 ||
      g.v.size() != static_cast<std::size_t>(g.h) * g.w * g.c) {
    std::ostringstream os;
    os << what << ": inconsistent grid shape " << g.h << "x" << g.w << "x" << g.c
       << " with " << g.v.size() << " values";
    throw DimensionError(os.str());
  }
  for (double x : g.v) {
    if (!std::isfinite(x)) {
      std::ostringstream os;
      os << what << ": grid contains a non-finite value";
      throw ValidationError(os.str());
    }
  }
}

std::vector<double> gaussian_weights(int h, int w, const Line& grid_line, double sigma) {
  if (!(sigma > 0.0) || !std::isfinite(sigma)) {
    throw ConfigError("gaussian weighting sigma must be positive");
  }
  const Vec2 s = grid_line.start();
  const Vec2 d = grid_line.end() - grid_line.start();
  const double len = std::sqrt(dot(d, d));
  if (len <= 0.0) throw DegenerateLineError("gaussian weighting: zero-length line");
  const double inv = 1.0 / (2.0 * sigma * sigma);
  std::vector<double> out(static_cast<std::size_t>(h) * w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const Vec2 p{x + 0.5, y + 0.5};
      const double dist = cross(d, p - s) / len;
      out[static_cast<std::size_t>(y) * w + x] = std::exp(-dist * dist * inv);
    }
  }
  return out;
}

FeatureGrid gaussian_weight(const FeatureGrid& x, const Line& grid_line, double sigma) {
  const std::vector<double> wts = gaussian_weights(x.h, x.w, grid_line, sigma);
  FeatureGrid out = x;
  std::size_t i = 0;
  for (int y = 0; y < x.h; ++y) {
    for (int xx = 0; xx < x.w; ++xx) {
      const double wt = wts[static_cast<std::size_t>(y) * x.w + xx];
      for (int ch = 0; ch < x.c; ++ch, ++i) out.v[i] *= wt;
    }
  }
  return out;
}

void gaussian_weight_backward(const FeatureGrid& dout, const Line& grid_line,
                              double sigma, FeatureGrid& dx) {
  if (!dout.same_shape(dx)) {
    throw DimensionError("gaussian_weight_backward: gradient shape mismatch");
  }
  const std::vector<double> wts = gaussian_weights(dout.h, dout.w, grid_line, sigma);
  std::size_t i = 0;
  for (int y = 0; y < dout.h; ++y) {
    for (int xx = 0; xx < dout.w; ++xx) {
      const double wt = wts[static_cast<std::size_t>(y) * dout.w + xx];
      for (int ch = 0; ch < dout.c; ++ch, ++i) dx.v[i] += wt * dout.v[i];
    }
  }
}

FlipPlan make_flip_plan(int h, int w, const Line& grid_line) {
  const Vec2 s = grid_line.start();
  const Vec2 d = grid_line.end() - grid_line.start();
  const double len = std::sqrt(dot(d, d));
  if (len <= 0.0) throw DegenerateLineError("mirror flip: zero-length line");
  const Vec2 nrm{-d.y / len, d.x / len};
  FlipPlan plan;
  plan.h = h;
  plan.w = w;
  const std::size_t total = static_cast<std::size_t>(h) * w;
  plan.taps.assign(total, {-1, -1, -1, -1});
  plan.weights.assign(total, {0.0, 0.0, 0.0, 0.0});
  plan.exact.assign(total, 0);
  std::size_t k = 0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x, ++k) {
      const Vec2 p{x + 0.5, y + 0.5};
      const double sd = dot(p - s, nrm);
      const Vec2 r = p - (2.0 * sd) * nrm;
      const double fx = r.x - 0.5;
      const double fy = r.y - 0.5;
      const double x0d = std::floor(fx);
      const double y0d = std::floor(fy);
      const int x0 = static_cast<int>(x0d);
      const int y0 = static_cast<int>(y0d);
      const double ax = fx - x0d;
      const double ay = fy - y0d;
      if (ax == 0.0 && ay == 0.0) {
        // Reflection lands exactly on a pixel center: direct copy, no blur.
        plan.exact[k] = 1;
        if (x0 >= 0 && x0 < w && y0 >= 0 && y0 < h) {
          plan.taps[k][0] = y0 * w + x0;
          plan.weights[k][0] = 1.0;
        }
        continue;
      }
      const int xs[4] = {x0, x0 + 1, x0, x0 + 1};
      const int ys[4] = {y0, y0, y0 + 1, y0 + 1};
      const double ws[4] = {(1.0 - ax) * (1.0 - ay), ax * (1.0 - ay),
                            (1.0 - ax) * ay, ax * ay};
      for (int t = 0; t < 4; ++t) {
        if (xs[t] < 0 || xs[t] >= w || ys[t] < 0 || ys[t] >= h) continue;
        if (ws[t] == 0.0) continue;
        plan.taps[k][t] = ys[t] * w + xs[t];
        plan.weights[k][t] = ws[t];
      }
    }
  }
  return plan;
}

FeatureGrid flip_apply(const FlipPlan& plan, const FeatureGrid& y) {
  if (y.h != plan.h || y.w != plan.w) {
    throw DimensionError("mirror flip: plan/grid shape mismatch");
  }
  FeatureGrid out = FeatureGrid::zeros(y.h, y.w, y.c);
  const int c = y.c;
  const std::size_t total = static_cast<std::size_t>(y.h) * y.w;
  for (std::size_t k = 0; k < total; ++k) {
    const auto& taps = plan.taps[k];
    const auto& wts = plan.weights[k];
    if (plan.exact[k]) {
      if (taps[0] >= 0) {
        const std::size_t src = static_cast<std::size_t>(taps[0]) * c;
        const std::size_t dst = k * c;
        for (int ch = 0; ch < c; ++ch) out.v[dst + ch] = y.v[src + ch];
      }
      continue;
    }
    const std::size_t dst = k * c;
    for (int t = 0; t < 4; ++t) {
      if (taps[t] < 0) continue;
      const std::size_t src = static_cast<std::size_t>(taps[t]) * c;
      const double wt = wts[t];
      for (int ch = 0; ch < c; ++ch) out.v[dst + ch] += wt * y.v[src + ch];
    }
  }
  return out;
}

void flip_adjoint(const FlipPlan& plan, const FeatureGrid& dout, FeatureGrid& dy) {
  if (dout.h != plan.h || dout.w != plan.w || !dout.same_shape(dy)) {
    throw DimensionError("mirror flip adjoint: shape mismatch");
  }
  const int c = dout.c;
  const std::size_t total = static_cast<std::size_t>(dout.h) * dout.w;
  for (std::size_t k = 0; k < total; ++k) {
    const auto& taps = plan.taps[k];
    const auto& wts = plan.weights[k];
    const std::size_t src = k * c;
    for (int t = 0; t < 4; ++t) {
      if (taps[t] < 0) continue;
      const std::size_t dst = static_cast<std::size_t>(taps[t]) * c;
      const double wt = wts[t];
      for (int ch = 0; ch < c; ++ch) dy.v[dst + ch] += wt * dout.v[src + ch];
    }
  }
}

FeatureGrid mirror_flip(const FeatureGrid& y, const Line& grid_line) {
  return flip_apply(make_flip_plan(y.h, y.w, grid_line), y);
}

void mirror_flip_backward(const FeatureGrid& dout, const Line& grid_line, FeatureGrid& dy) {
  flip_adjoint(make_flip_plan(dout.h, dout.w, grid_line), dout, dy);
}

FeatureGrid concat_channels(const FeatureGrid& a, const FeatureGrid& b) {
  if (a.h != b.h || a.w != b.w) {
    std::ostringstream os;
    os << "concat_channels: spatial shapes differ (" << a.h << "x" << a.w
       << " vs " << b.h << "x" << b.w << ")";
    throw DimensionError(os.str());
  }
  FeatureGrid out = FeatureGrid::zeros(a.h, a.w, a.c + b.c);
  const std::size_t total = static_cast<std::size_t>(a.h) * a.w;
  for (std::size_t k = 0; k < total; ++k) {
    const std::size_t dst = k * static_cast<std::size_t>(out.c);
    const std::size_t sa = k * static_cast<std::size_t>(a.c);
    const std::size_t sb = k * static_cast<std::size_t>(b.c);
    for (int ch = 0; ch < a.c; ++ch) out.v[dst + ch] = a.v[sa + ch];
    for (int ch = 0; ch < b.c; ++ch) out.v[dst + a.c + ch] = b.v[sb + ch];
  }
  return out;
}

void concat_channels_backward(const FeatureGrid& dout, FeatureGrid& da, FeatureGrid& db) {
  if (dout.h != da.h || dout.w != da.w || dout.h != db.h || dout.w != db.w ||
      dout.c != da.c + db.c) {
    throw DimensionError("concat_channels_backward: shape mismatch");
  }
  const std::size_t total = static_cast<std::size_t>(dout.h) * dout.w;
  for (std::size_t k = 0; k < total; ++k) {
    const std::size_t src = k * static_cast<std::size_t>(dout.c);
    const std::size_t ia = k * static_cast<std::size_t>(da.c);
    const std::size_t ib = k * static_cast<std::size_t>(db.c);
    for (int ch = 0; ch < da.c; ++ch) da.v[ia + ch] += dout.v[src + ch];
    for (int ch = 0; ch < db.c; ++ch) db.v[ib + ch] += dout.v[src + da.c + ch];
  }
}

Line rescale_line(const Line& line, const ImageSize& from, const ImageSize& to) {
  const double sx = static_cast<double>(to.width) / from.width;
  const double sy = static_cast<double>(to.height) / from.height;
  Vec2 s{line.x_s * sx, line.y_s * sy};
  Vec2 e{line.x_e * sx, line.y_e * sy};
  s = nearest_boundary_point(s, to);
  e = nearest_boundary_point(e, to);
  Line out{s.x, s.y, e.x, e.y};
  require_valid_line(out, to);
  return out;
}

}  // namespace semline
