#include "semline/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "semline/error.hpp"

namespace semline {

ConvParams make_conv(int kh, int kw, int cin, int cout) {
  if (kh < 1 || kw < 1 || kh % 2 == 0 || kw % 2 == 0) {
    throw DimensionError("convolution kernel dims must be odd and positive");
  }
  if (cin < 1 || cout < 1) {
    throw DimensionError("convolution channel counts must be positive");
  }
  ConvParams p;
  p.kh = kh;
  p.kw = kw;
  p.cin = cin;
  p.cout = cout;
  p.w.assign(static_cast<std::size_t>(kh) * kw * cin * cout, 0.0);
  p.b.assign(static_cast<std::size_t>(cout), 0.0);
  return p;
}

DenseParams make_dense(int in, int out) {
  if (in < 1 || out < 1) throw DimensionError("dense layer dims must be positive");
  DenseParams p;
  p.in = in;
  p.out = out;
  p.w.assign(static_cast<std::size_t>(in) * out, 0.0);
  p.b.assign(static_cast<std::size_t>(out), 0.0);
  return p;
}

void init_uniform(std::span<double> values, int fan_in, Rng& rng) {
  const double bound = std::sqrt(1.0 / std::max(1, fan_in));
  for (double& v : values) v = rng.uniform(-bound, bound);
}

FeatureGrid conv2d(const ConvParams& params, const FeatureGrid& x) {
  if (x.c != params.cin) {
    std::ostringstream os;
    os << "conv2d: input depth " << x.c << " does not match filter depth "
       << params.cin;
    throw DimensionError(os.str());
  }
  const int ph = params.kh / 2;
  const int pw = params.kw / 2;
  FeatureGrid out = FeatureGrid::zeros(x.h, x.w, params.cout);
  for (int y = 0; y < x.h; ++y) {
    for (int xx = 0; xx < x.w; ++xx) {
      double* o = &out.v[out.index(y, xx, 0)];
      for (int co = 0; co < params.cout; ++co) o[co] = params.b[co];
      for (int ky = 0; ky < params.kh; ++ky) {
        const int yy = y + ky - ph;
        if (yy < 0 || yy >= x.h) continue;
        for (int kx = 0; kx < params.kw; ++kx) {
          const int sx = xx + kx - pw;
          if (sx < 0 || sx >= x.w) continue;
          const double* in = &x.v[x.index(yy, sx, 0)];
          for (int co = 0; co < params.cout; ++co) {
            const double* wrow =
                &params.w[((static_cast<std::size_t>(co) * params.cin) * params.kh + ky) *
                              params.kw +
                          kx];
            double acc = 0.0;
            // wrow strides by kh*kw per input channel.
            const std::size_t stride = static_cast<std::size_t>(params.kh) * params.kw;
            for (int ci = 0; ci < params.cin; ++ci) {
              acc += wrow[static_cast<std::size_t>(ci) * stride] * in[ci];
            }
            o[co] += acc;
          }
        }
      }
    }
  }
  return out;
}

void conv2d_backward(const ConvParams& params, const FeatureGrid& x,
                     const FeatureGrid& dout, FeatureGrid* dx, ConvParams* dparams) {
  if (x.c != params.cin || dout.c != params.cout || dout.h != x.h || dout.w != x.w) {
    throw DimensionError("conv2d_backward: shape mismatch");
  }
  if (dx && !dx->same_shape(x)) {
    throw DimensionError("conv2d_backward: dx shape mismatch");
  }
  const int ph = params.kh / 2;
  const int pw = params.kw / 2;
  const std::size_t stride = static_cast<std::size_t>(params.kh) * params.kw;
  for (int y = 0; y < x.h; ++y) {
    for (int xx = 0; xx < x.w; ++xx) {
      const double* go = &dout.v[dout.index(y, xx, 0)];
      if (dparams) {
        for (int co = 0; co < params.cout; ++co) dparams->b[co] += go[co];
      }
      for (int ky = 0; ky < params.kh; ++ky) {
        const int yy = y + ky - ph;
        if (yy < 0 || yy >= x.h) continue;
        for (int kx = 0; kx < params.kw; ++kx) {
          const int sx = xx + kx - pw;
          if (sx < 0 || sx >= x.w) continue;
          const double* in = &x.v[x.index(yy, sx, 0)];
          double* gin = dx ? &dx->v[dx->index(yy, sx, 0)] : nullptr;
          for (int co = 0; co < params.cout; ++co) {
            const double g = go[co];
            if (g == 0.0) continue;
            const std::size_t base =
                ((static_cast<std::size_t>(co) * params.cin) * params.kh + ky) *
                    params.kw +
                kx;
            if (dparams) {
              for (int ci = 0; ci < params.cin; ++ci) {
                dparams->w[base + static_cast<std::size_t>(ci) * stride] += g * in[ci];
              }
            }
            if (gin) {
              const double* wrow = &params.w[base];
              for (int ci = 0; ci < params.cin; ++ci) {
                gin[ci] += g * wrow[static_cast<std::size_t>(ci) * stride];
              }
            }
          }
        }
      }
    }
  }
}

std::vector<double> dense(const DenseParams& params, std::span<const double> x) {
  if (static_cast<int>(x.size()) != params.in) {
    std::ostringstream os;
    os << "dense: input length " << x.size() << " does not match layer input dim "
       << params.in;
    throw DimensionError(os.str());
  }
  std::vector<double> out(static_cast<std::size_t>(params.out));
  for (int o = 0; o < params.out; ++o) {
    const double* row = &params.w[static_cast<std::size_t>(o) * params.in];
    double acc = params.b[o];
    for (int i = 0; i < params.in; ++i) acc += row[i] * x[i];
    out[o] = acc;
  }
  return out;
}

void dense_backward(const DenseParams& params, std::span<const double> x,
                    std::span<const double> dout, std::vector<double>* dx,
                    DenseParams* dparams) {
  if (static_cast<int>(x.size()) != params.in ||
      static_cast<int>(dout.size()) != params.out) {
    throw DimensionError("dense_backward: shape mismatch");
  }
  if (dx && static_cast<int>(dx->size()) != params.in) {
    throw DimensionError("dense_backward: dx shape mismatch");
  }
  for (int o = 0; o < params.out; ++o) {
    const double g = dout[o];
    if (g == 0.0) continue;
    const std::size_t base = static_cast<std::size_t>(o) * params.in;
    if (dparams) {
      dparams->b[o] += g;
      for (int i = 0; i < params.in; ++i) dparams->w[base + i] += g * x[i];
    }
    if (dx) {
      for (int i = 0; i < params.in; ++i) (*dx)[i] += g * params.w[base + i];
    }
  }
}

double sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

FeatureGrid tanh_grid(const FeatureGrid& x) {
  FeatureGrid out = x;
  for (double& v : out.v) v = std::tanh(v);
  return out;
}

void tanh_grid_backward(const FeatureGrid& y, const FeatureGrid& dout, FeatureGrid& dx) {
  if (!y.same_shape(dout) || !y.same_shape(dx)) {
    throw DimensionError("tanh_grid_backward: shape mismatch");
  }
  for (std::size_t i = 0; i < y.v.size(); ++i) {
    dx.v[i] += (1.0 - y.v[i] * y.v[i]) * dout.v[i];
  }
}

std::vector<double> tanh_vec(std::span<const double> x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::tanh(x[i]);
  return out;
}

void tanh_vec_backward(std::span<const double> y, std::span<const double> dout,
                       std::span<double> dx) {
  if (y.size() != dout.size() || y.size() != dx.size()) {
    throw DimensionError("tanh_vec_backward: shape mismatch");
  }
  for (std::size_t i = 0; i < y.size(); ++i) {
    dx[i] += (1.0 - y[i] * y[i]) * dout[i];
  }
}

FeatureGrid avg_pool2(const FeatureGrid& x) {
  const int oh = (x.h + 1) / 2;
  const int ow = (x.w + 1) / 2;
  FeatureGrid out = FeatureGrid::zeros(oh, ow, x.c);
  for (int y = 0; y < oh; ++y) {
    const int y0 = 2 * y;
    const int y1 = std::min(y0 + 2, x.h);
    for (int xx = 0; xx < ow; ++xx) {
      const int x0 = 2 * xx;
      const int x1 = std::min(x0 + 2, x.w);
      const double inv = 1.0 / ((y1 - y0) * (x1 - x0));
      for (int ch = 0; ch < x.c; ++ch) {
        double acc = 0.0;
        for (int sy = y0; sy < y1; ++sy) {
          for (int sx = x0; sx < x1; ++sx) acc += x.at(sy, sx, ch);
        }
        out.at(y, xx, ch) = acc * inv;
      }
    }
  }
  return out;
}

void avg_pool2_backward(int in_h, int in_w, const FeatureGrid& dout, FeatureGrid& dx) {
  if (dx.h != in_h || dx.w != in_w || dx.c != dout.c ||
      dout.h != (in_h + 1) / 2 || dout.w != (in_w + 1) / 2) {
    throw DimensionError("avg_pool2_backward: shape mismatch");
  }
  for (int y = 0; y < dout.h; ++y) {
    const int y0 = 2 * y;
    const int y1 = std::min(y0 + 2, in_h);
    for (int xx = 0; xx < dout.w; ++xx) {
      const int x0 = 2 * xx;
      const int x1 = std::min(x0 + 2, in_w);
      const double inv = 1.0 / ((y1 - y0) * (x1 - x0));
      for (int ch = 0; ch < dout.c; ++ch) {
        const double g = dout.at(y, xx, ch) * inv;
        for (int sy = y0; sy < y1; ++sy) {
          for (int sx = x0; sx < x1; ++sx) dx.at(sy, sx, ch) += g;
        }
      }
    }
  }
}

ProbPair softmax2(double l0, double l1) {
  const double m = std::max(l0, l1);
  const double e0 = std::exp(l0 - m);
  const double e1 = std::exp(l1 - m);
  const double s = e0 + e1;
  return {e0 / s, e1 / s};
}

void softmax2_backward(const ProbPair& y, double dp, double dq, double& dl0, double& dl1) {
  const double mean = dp * y.p + dq * y.q;
  dl0 += y.p * (dp - mean);
  dl1 += y.q * (dq - mean);
}

double cross_entropy(const ProbPair& pred, const ProbPair& label) {
  // Clamping (rather than adding) the epsilon keeps the loss exact for any
  // probability >= kLogEps; only a hard zero is nudged away from -inf.
  return -(label.p * std::log(std::max(pred.p, kLogEps)) +
           label.q * std::log(std::max(pred.q, kLogEps)));
}

void cross_entropy_backward(const ProbPair& pred, const ProbPair& label,
                            double& dp, double& dq) {
  dp += -label.p / std::max(pred.p, kLogEps);
  dq += -label.q / std::max(pred.q, kLogEps);
}

double smooth_l1(std::span<const double> delta, std::span<const double> target) {
  if (delta.size() != target.size()) {
    throw DimensionError("smooth_l1: length mismatch");
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < delta.size(); ++i) {
    const double x = delta[i] - target[i];
    const double a = std::abs(x);
    acc += a < 1.0 ? 0.5 * x * x : a - 0.5;
  }
  return acc;
}

void smooth_l1_backward(std::span<const double> delta, std::span<const double> target,
                        double dout, std::span<double> ddelta) {
  if (delta.size() != target.size() || delta.size() != ddelta.size()) {
    throw DimensionError("smooth_l1_backward: length mismatch");
  }
  for (std::size_t i = 0; i < delta.size(); ++i) {
    const double x = delta[i] - target[i];
    const double d = std::abs(x) < 1.0 ? x : (x > 0.0 ? 1.0 : -1.0);
    ddelta[i] += dout * d;
  }
}

GradCheckReport grad_check(const std::function<double()>& value,
                           std::vector<std::span<double>> params,
                           std::span<const double> analytic, double eps,
                           std::size_t max_coords, std::uint64_t seed) {
  if (!(eps >= 1e-6 && eps <= 1e-3)) {
    throw ConfigError("grad_check eps must lie in [1e-6, 1e-3]");
  }
  std::size_t total = 0;
  for (const auto& blk : params) total += blk.size();
  if (analytic.size() != total) {
    throw DimensionError("grad_check: analytic gradient length mismatch");
  }
  for (double g : analytic) {
    if (!std::isfinite(g)) throw ValidationError("grad_check: non-finite analytic gradient");
  }
  std::vector<std::size_t> coords(total);
  std::iota(coords.begin(), coords.end(), std::size_t{0});
  if (max_coords > 0 && max_coords < total) {
    // Seeded partial Fisher-Yates: the first max_coords entries become a
    // uniform sample without replacement.
    Rng rng(mix_seed(seed, 0x67726164));
    for (std::size_t i = 0; i < max_coords; ++i) {
      const std::size_t j =
          i + static_cast<std::size_t>(rng.next_u64() % (total - i));
      std::swap(coords[i], coords[j]);
    }
    coords.resize(max_coords);
  }
  auto locate = [&params](std::size_t flat) -> double* {
    for (auto& blk : params) {
      if (flat < blk.size()) return &blk[flat];
      flat -= blk.size();
    }
    return nullptr;
  };
  GradCheckReport report;
  report.coords_checked = coords.size();
  for (std::size_t flat : coords) {
    double* slot = locate(flat);
    const double saved = *slot;
    *slot = saved + eps;
    const double fp = value();
    *slot = saved - eps;
    const double fm = value();
    *slot = saved;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw ValidationError("grad_check: non-finite objective value");
    }
    const double gn = (fp - fm) / (2.0 * eps);
    const double ga = analytic[flat];
    // The absolute floor keeps near-zero coordinates from amplifying central
    // difference noise (truncation + roundoff) into a spurious relative error.
    const double rel = std::abs(ga - gn) / std::max(1e-6, std::abs(ga) + std::abs(gn));
    report.max_rel_err = std::max(report.max_rel_err, rel);
  }
  return report;
}

std::vector<double> flatten(const std::vector<std::span<const double>>& blocks) {
  std::vector<double> out;
  std::size_t total = 0;
  for (const auto& blk : blocks) total += blk.size();
  out.reserve(total);
  for (const auto& blk : blocks) out.insert(out.end(), blk.begin(), blk.end());
  return out;
}

}  // namespace semline
