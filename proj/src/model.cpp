#include "semline/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "semline/error.hpp"

namespace semline {

std::string to_string(AttentionMode mode) {
  switch (mode) {
    case AttentionMode::mirror: return "mirror";
    case AttentionMode::noflip: return "noflip";
    case AttentionMode::none: return "none";
  }
  return "mirror";
}

AttentionMode attention_mode_from_string(const std::string& s) {
  if (s == "mirror") return AttentionMode::mirror;
  if (s == "noflip") return AttentionMode::noflip;
  if (s == "none") return AttentionMode::none;
  throw ConfigError("unknown attention mode '" + s + "' (expected mirror, noflip, or none)");
}

bool operator==(const Topology& a, const Topology& b) {
  return a.in_channels == b.in_channels && a.stage_channels == b.stage_channels &&
         a.attention_n == b.attention_n && a.sigma == b.sigma &&
         a.pool_threshold == b.pool_threshold && a.fc_width == b.fc_width &&
         a.attention == b.attention;
}

namespace {

void check_topology(const Topology& t) {
  if (t.in_channels < 1) throw ConfigError("topology: in_channels must be positive");
  for (int c : t.stage_channels) {
    if (c < 1) throw ConfigError("topology: stage channels must be positive");
  }
  if (t.attention_n < 1 || t.attention_n % 2 == 0) {
    throw ConfigError("topology: attention kernel n must be odd and positive");
  }
  if (!(t.sigma > 0.0)) throw ConfigError("topology: sigma must be positive");
  if (!(t.pool_threshold > 0.0)) {
    throw ConfigError("topology: pool threshold must be positive");
  }
  if (t.fc_width < 1) throw ConfigError("topology: fc width must be positive");
}

AttentionParams make_attention(const Topology& t, int channels) {
  const int mult = t.attention == AttentionMode::mirror ? 2 : 1;
  AttentionParams a;
  a.f0 = make_conv(t.attention_n, t.attention_n, mult * channels, 1);
  const int m = 2 * t.attention_n + 1;
  a.f1 = make_conv(m, m, 1, 1);
  a.f2 = make_conv(m, m, 1, 1);
  return a;
}

void init_conv(ConvParams& c, Rng& rng) {
  init_uniform(c.w, c.kh * c.kw * c.cin, rng);
}

}  // namespace

DetectorParams make_detector(const Topology& topo, std::uint64_t seed) {
  check_topology(topo);
  DetectorParams p;
  p.topo = topo;
  p.backbone[0] = make_conv(3, 3, topo.in_channels, topo.stage_channels[0]);
  p.backbone[1] = make_conv(3, 3, topo.stage_channels[0], topo.stage_channels[1]);
  p.backbone[2] = make_conv(3, 3, topo.stage_channels[1], topo.stage_channels[2]);
  p.backbone[3] = make_conv(3, 3, topo.stage_channels[2], topo.stage_channels[3]);
  const int pooled_dim = 2 * topo.stage_channels[2] + 2 * topo.stage_channels[3];
  p.fc1 = make_dense(pooled_dim, topo.fc_width);
  p.cls = make_dense(topo.fc_width, 2);
  p.reg = make_dense(topo.fc_width, 4);
  if (p.has_attention()) {
    p.att3 = make_attention(topo, topo.stage_channels[2]);
    p.att4 = make_attention(topo, topo.stage_channels[3]);
  }
  Rng rng(mix_seed(seed, 0x6d6f64656c));
  for (ConvParams& c : p.backbone) init_conv(c, rng);
  if (p.has_attention()) {
    init_conv(p.att3.f0, rng);
    init_conv(p.att3.f1, rng);
    init_conv(p.att3.f2, rng);
    init_conv(p.att4.f0, rng);
    init_conv(p.att4.f1, rng);
    init_conv(p.att4.f2, rng);
  }
  init_uniform(p.fc1.w, p.fc1.in, rng);
  // cls and reg stay zero: a fresh detector answers p = 0.5 and zero offsets.
  return p;
}

DetectorParams zeros_like(const DetectorParams& like) {
  DetectorParams z;
  z.topo = like.topo;
  for (std::size_t i = 0; i < like.backbone.size(); ++i) {
    z.backbone[i] = like.backbone[i];
    std::fill(z.backbone[i].w.begin(), z.backbone[i].w.end(), 0.0);
    std::fill(z.backbone[i].b.begin(), z.backbone[i].b.end(), 0.0);
  }
  auto zero_att = [](const AttentionParams& a) {
    AttentionParams out = a;
    for (ConvParams* c : {&out.f0, &out.f1, &out.f2}) {
      std::fill(c->w.begin(), c->w.end(), 0.0);
      std::fill(c->b.begin(), c->b.end(), 0.0);
    }
    return out;
  };
  z.att3 = zero_att(like.att3);
  z.att4 = zero_att(like.att4);
  auto zero_dense = [](const DenseParams& d) {
    DenseParams out = d;
    std::fill(out.w.begin(), out.w.end(), 0.0);
    std::fill(out.b.begin(), out.b.end(), 0.0);
    return out;
  };
  z.fc1 = zero_dense(like.fc1);
  z.cls = zero_dense(like.cls);
  z.reg = zero_dense(like.reg);
  return z;
}

std::vector<std::span<double>> param_spans(DetectorParams& p) {
  std::vector<std::span<double>> out;
  auto add_conv = [&out](ConvParams& c) {
    out.emplace_back(c.w);
    out.emplace_back(c.b);
  };
  auto add_dense = [&out](DenseParams& d) {
    out.emplace_back(d.w);
    out.emplace_back(d.b);
  };
  for (ConvParams& c : p.backbone) add_conv(c);
  if (p.has_attention()) {
    add_conv(p.att3.f0);
    add_conv(p.att3.f1);
    add_conv(p.att3.f2);
    add_conv(p.att4.f0);
    add_conv(p.att4.f1);
    add_conv(p.att4.f2);
  }
  add_dense(p.fc1);
  add_dense(p.cls);
  add_dense(p.reg);
  return out;
}

std::vector<std::span<const double>> param_views(const DetectorParams& p) {
  auto spans = param_spans(const_cast<DetectorParams&>(p));
  return {spans.begin(), spans.end()};
}

void axpy_params(DetectorParams& dst, const DetectorParams& grad, double alpha) {
  auto d = param_spans(dst);
  auto g = param_spans(const_cast<DetectorParams&>(grad));
  if (d.size() != g.size()) throw DimensionError("axpy_params: block count mismatch");
  for (std::size_t k = 0; k < d.size(); ++k) {
    if (d[k].size() != g[k].size()) {
      throw DimensionError("axpy_params: block shape mismatch");
    }
    for (std::size_t i = 0; i < d[k].size(); ++i) d[k][i] += alpha * g[k][i];
  }
}

std::size_t param_count(const DetectorParams& p) {
  std::size_t total = 0;
  for (const auto& blk : param_views(p)) total += blk.size();
  return total;
}

BackboneTrace backbone_forward(const DetectorParams& params, const FeatureGrid& image) {
  if (image.c != params.topo.in_channels) {
    std::ostringstream os;
    os << "backbone: image has " << image.c << " channels, expected "
       << params.topo.in_channels;
    throw DimensionError(os.str());
  }
  BackboneTrace t;
  t.input = image;
  t.act[0] = tanh_grid(conv2d(params.backbone[0], image));
  t.pooled[0] = avg_pool2(t.act[0]);
  t.act[1] = tanh_grid(conv2d(params.backbone[1], t.pooled[0]));
  t.pooled[1] = avg_pool2(t.act[1]);
  t.act[2] = tanh_grid(conv2d(params.backbone[2], t.pooled[1]));
  t.act[3] = tanh_grid(conv2d(params.backbone[3], t.act[2]));
  return t;
}

void backbone_backward(const DetectorParams& params, const BackboneTrace& trace,
                       const FeatureGrid& d_stage3, const FeatureGrid& d_stage4,
                       DetectorParams& grads, FeatureGrid* d_input) {
  FeatureGrid da3 = d_stage3;
  {
    FeatureGrid dpre4 = FeatureGrid::zeros(trace.act[3].h, trace.act[3].w, trace.act[3].c);
    tanh_grid_backward(trace.act[3], d_stage4, dpre4);
    conv2d_backward(params.backbone[3], trace.act[2], dpre4, &da3, &grads.backbone[3]);
  }
  FeatureGrid dp2 = FeatureGrid::zeros(trace.pooled[1].h, trace.pooled[1].w, trace.pooled[1].c);
  {
    FeatureGrid dpre3 = FeatureGrid::zeros(trace.act[2].h, trace.act[2].w, trace.act[2].c);
    tanh_grid_backward(trace.act[2], da3, dpre3);
    conv2d_backward(params.backbone[2], trace.pooled[1], dpre3, &dp2, &grads.backbone[2]);
  }
  FeatureGrid da2 = FeatureGrid::zeros(trace.act[1].h, trace.act[1].w, trace.act[1].c);
  avg_pool2_backward(trace.act[1].h, trace.act[1].w, dp2, da2);
  FeatureGrid dp1 = FeatureGrid::zeros(trace.pooled[0].h, trace.pooled[0].w, trace.pooled[0].c);
  {
    FeatureGrid dpre2 = FeatureGrid::zeros(trace.act[1].h, trace.act[1].w, trace.act[1].c);
    tanh_grid_backward(trace.act[1], da2, dpre2);
    conv2d_backward(params.backbone[1], trace.pooled[0], dpre2, &dp1, &grads.backbone[1]);
  }
  FeatureGrid da1 = FeatureGrid::zeros(trace.act[0].h, trace.act[0].w, trace.act[0].c);
  avg_pool2_backward(trace.act[0].h, trace.act[0].w, dp1, da1);
  {
    FeatureGrid dpre1 = FeatureGrid::zeros(trace.act[0].h, trace.act[0].w, trace.act[0].c);
    tanh_grid_backward(trace.act[0], da1, dpre1);
    conv2d_backward(params.backbone[0], trace.input, dpre1, d_input, &grads.backbone[0]);
  }
}

namespace {

void pool_strips(int h, int w, const Line& grid_line, double threshold, int sign,
                 std::vector<int>& u, std::vector<int>& v) {
  const Vec2 s = grid_line.start();
  const Vec2 d = grid_line.end() - grid_line.start();
  const double len = std::sqrt(dot(d, d));
  u.clear();
  v.clear();
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const Vec2 p{x + 0.5, y + 0.5};
      const double sd = cross(d, p - s) / len * sign;
      if (sd > 0.0 && sd <= threshold) {
        u.push_back(y * w + x);
      } else if (sd < 0.0 && -sd <= threshold) {
        v.push_back(y * w + x);
      }
    }
  }
}

}  // namespace

LineStageGeom make_line_stage_geom(const Line& image_line, const ImageSize& image,
                                   const ImageSize& grid, double sigma,
                                   double pool_threshold, bool need_flip) {
  LineStageGeom g;
  g.grid = grid;
  g.grid_line = rescale_line(image_line, image, grid);
  g.gauss = gaussian_weights(grid.height, grid.width, g.grid_line, sigma);
  if (need_flip) g.plan = make_flip_plan(grid.height, grid.width, g.grid_line);
  const int sign = first_side_sign(g.grid_line, grid);
  pool_strips(grid.height, grid.width, g.grid_line, pool_threshold, sign, g.pool_u, g.pool_v);
  return g;
}

namespace {

FeatureGrid apply_gauss(const FeatureGrid& x, const std::vector<double>& wts) {
  FeatureGrid out = x;
  std::size_t i = 0;
  const std::size_t total = static_cast<std::size_t>(x.h) * x.w;
  for (std::size_t k = 0; k < total; ++k) {
    const double wt = wts[k];
    for (int ch = 0; ch < x.c; ++ch, ++i) out.v[i] *= wt;
  }
  return out;
}

void apply_gauss_backward(const FeatureGrid& dout, const std::vector<double>& wts,
                          FeatureGrid& dx) {
  std::size_t i = 0;
  const std::size_t total = static_cast<std::size_t>(dout.h) * dout.w;
  for (std::size_t k = 0; k < total; ++k) {
    const double wt = wts[k];
    for (int ch = 0; ch < dout.c; ++ch, ++i) dx.v[i] += wt * dout.v[i];
  }
}

}  // namespace

FeatureGrid mirror_attention_cached(const FeatureGrid& x, const LineStageGeom& geom,
                                    const AttentionParams& params, AttentionMode mode,
                                    AttentionTrace* trace) {
  if (mode == AttentionMode::none) {
    if (trace) trace->yatt = x;
    return x;
  }
  if (x.h != geom.grid.height || x.w != geom.grid.width) {
    throw DimensionError("mirror attention: grid/geometry shape mismatch");
  }
  FeatureGrid y = apply_gauss(x, geom.gauss);
  FeatureGrid cat =
      mode == AttentionMode::mirror ? concat_channels(y, flip_apply(geom.plan, y)) : y;
  FeatureGrid a0 = conv2d(params.f0, cat);
  FeatureGrid h1 = conv2d(params.f1, a0);
  FeatureGrid mask = conv2d(params.f2, h1);
  for (double& m : mask.v) m = sigmoid(m);
  FeatureGrid yatt = y;
  const std::size_t total = static_cast<std::size_t>(y.h) * y.w;
  std::size_t i = 0;
  for (std::size_t k = 0; k < total; ++k) {
    const double amp = 1.0 + mask.v[k];
    for (int ch = 0; ch < y.c; ++ch, ++i) yatt.v[i] *= amp;
  }
  if (trace) {
    trace->y = std::move(y);
    trace->cat = std::move(cat);
    trace->a0 = std::move(a0);
    trace->h1 = std::move(h1);
    trace->mask = std::move(mask);
    trace->yatt = yatt;
  }
  return yatt;
}

FeatureGrid mirror_attention(const FeatureGrid& x, const Line& grid_line,
                             const AttentionParams& params, double sigma,
                             AttentionMode mode) {
  if (mode == AttentionMode::none) return x;
  LineStageGeom geom;
  geom.grid = ImageSize{x.w, x.h};
  geom.grid_line = grid_line;
  geom.gauss = gaussian_weights(x.h, x.w, grid_line, sigma);
  if (mode == AttentionMode::mirror) geom.plan = make_flip_plan(x.h, x.w, grid_line);
  return mirror_attention_cached(x, geom, params, mode, nullptr);
}

void mirror_attention_backward(const FeatureGrid& x, const LineStageGeom& geom,
                               const AttentionParams& params, AttentionMode mode,
                               const AttentionTrace& trace, const FeatureGrid& dyatt,
                               FeatureGrid& dx, AttentionParams& grads) {
  if (mode == AttentionMode::none) {
    if (!dx.same_shape(dyatt)) {
      throw DimensionError("mirror attention backward: shape mismatch");
    }
    for (std::size_t i = 0; i < dx.v.size(); ++i) dx.v[i] += dyatt.v[i];
    return;
  }
  const FeatureGrid& y = trace.y;
  const std::size_t total = static_cast<std::size_t>(y.h) * y.w;
  // Product rule through yatt = (1 + mask) * y.
  FeatureGrid dy = FeatureGrid::zeros(y.h, y.w, y.c);
  FeatureGrid dmask = FeatureGrid::zeros(y.h, y.w, 1);
  {
    std::size_t i = 0;
    for (std::size_t k = 0; k < total; ++k) {
      const double amp = 1.0 + trace.mask.v[k];
      double acc = 0.0;
      for (int ch = 0; ch < y.c; ++ch, ++i) {
        dy.v[i] += amp * dyatt.v[i];
        acc += dyatt.v[i] * y.v[i];
      }
      dmask.v[k] = acc;
    }
  }
  // Through the sigmoid into the three convolutions.
  FeatureGrid dpre = FeatureGrid::zeros(y.h, y.w, 1);
  for (std::size_t k = 0; k < total; ++k) {
    const double m = trace.mask.v[k];
    dpre.v[k] = m * (1.0 - m) * dmask.v[k];
  }
  FeatureGrid dh1 = FeatureGrid::zeros(y.h, y.w, 1);
  conv2d_backward(params.f2, trace.h1, dpre, &dh1, &grads.f2);
  FeatureGrid da0 = FeatureGrid::zeros(y.h, y.w, 1);
  conv2d_backward(params.f1, trace.a0, dh1, &da0, &grads.f1);
  FeatureGrid dcat = FeatureGrid::zeros(y.h, y.w, trace.cat.c);
  conv2d_backward(params.f0, trace.cat, da0, &dcat, &grads.f0);
  if (mode == AttentionMode::mirror) {
    FeatureGrid dyt = FeatureGrid::zeros(y.h, y.w, y.c);
    concat_channels_backward(dcat, dy, dyt);
    flip_adjoint(geom.plan, dyt, dy);
  } else {
    for (std::size_t i = 0; i < dy.v.size(); ++i) dy.v[i] += dcat.v[i];
  }
  apply_gauss_backward(dy, geom.gauss, dx);
}

std::vector<double> region_pool_cached(const FeatureGrid& y_att, const LineStageGeom& geom) {
  if (!pools_nonempty(geom)) {
    throw DegenerateRegionError("region pooling strip contains no grid cells");
  }
  const int c = y_att.c;
  std::vector<double> out(static_cast<std::size_t>(2 * c), 0.0);
  for (int k : geom.pool_u) {
    const double* row = &y_att.v[static_cast<std::size_t>(k) * c];
    for (int ch = 0; ch < c; ++ch) out[ch] += row[ch];
  }
  for (int k : geom.pool_v) {
    const double* row = &y_att.v[static_cast<std::size_t>(k) * c];
    for (int ch = 0; ch < c; ++ch) out[c + ch] += row[ch];
  }
  const double ui = 1.0 / static_cast<double>(geom.pool_u.size());
  const double vi = 1.0 / static_cast<double>(geom.pool_v.size());
  for (int ch = 0; ch < c; ++ch) {
    out[ch] *= ui;
    out[c + ch] *= vi;
  }
  return out;
}

std::vector<double> region_pool(const FeatureGrid& y_att, const Line& grid_line,
                                double threshold) {
  if (!(threshold > 0.0)) throw ConfigError("region pooling threshold must be positive");
  LineStageGeom geom;
  geom.grid = ImageSize{y_att.w, y_att.h};
  geom.grid_line = grid_line;
  const int sign = first_side_sign(grid_line, geom.grid);
  pool_strips(y_att.h, y_att.w, grid_line, threshold, sign, geom.pool_u, geom.pool_v);
  return region_pool_cached(y_att, geom);
}

void region_pool_backward(const LineStageGeom& geom, int channels,
                          std::span<const double> dout, FeatureGrid& dyatt) {
  if (static_cast<int>(dout.size()) != 2 * channels || dyatt.c != channels) {
    throw DimensionError("region_pool_backward: shape mismatch");
  }
  const double ui = 1.0 / static_cast<double>(geom.pool_u.size());
  const double vi = 1.0 / static_cast<double>(geom.pool_v.size());
  for (int k : geom.pool_u) {
    double* row = &dyatt.v[static_cast<std::size_t>(k) * channels];
    for (int ch = 0; ch < channels; ++ch) row[ch] += dout[ch] * ui;
  }
  for (int k : geom.pool_v) {
    double* row = &dyatt.v[static_cast<std::size_t>(k) * channels];
    for (int ch = 0; ch < channels; ++ch) row[ch] += dout[channels + ch] * vi;
  }
}

LineTrace line_forward_cached(const DetectorParams& params, const BackboneTrace& trunk,
                              const Line& canon_line, const LineStageGeom& g3,
                              const LineStageGeom& g4) {
  LineTrace t;
  t.canon = canon_line;
  const AttentionMode mode = params.topo.attention;
  const FeatureGrid yatt3 =
      mirror_attention_cached(trunk.stage3(), g3, params.att3, mode, &t.at3);
  const FeatureGrid yatt4 =
      mirror_attention_cached(trunk.stage4(), g4, params.att4, mode, &t.at4);
  std::vector<double> z3 = region_pool_cached(yatt3, g3);
  std::vector<double> z4 = region_pool_cached(yatt4, g4);
  t.z = std::move(z3);
  t.z.insert(t.z.end(), z4.begin(), z4.end());
  const std::vector<double> pre = dense(params.fc1, t.z);
  t.h = tanh_vec(pre);
  const std::vector<double> logits = dense(params.cls, t.h);
  t.logits = {logits[0], logits[1]};
  t.prob = softmax2(logits[0], logits[1]);
  const std::vector<double> off = dense(params.reg, t.h);
  t.offset = {off[0], off[1], off[2], off[3]};
  return t;
}

void line_backward_cached(const DetectorParams& params, const BackboneTrace& trunk,
                          const LineStageGeom& g3, const LineStageGeom& g4,
                          const LineTrace& trace, const ProbPair& dprob,
                          const LineOffset& doffset, FeatureGrid& d_stage3,
                          FeatureGrid& d_stage4, DetectorParams& grads) {
  double dl0 = 0.0, dl1 = 0.0;
  softmax2_backward(trace.prob, dprob.p, dprob.q, dl0, dl1);
  const double dlog[2] = {dl0, dl1};
  std::vector<double> dh(trace.h.size(), 0.0);
  dense_backward(params.cls, trace.h, std::span<const double>(dlog, 2), &dh, &grads.cls);
  const double doff[4] = {doffset.dx_s, doffset.dy_s, doffset.dx_e, doffset.dy_e};
  dense_backward(params.reg, trace.h, std::span<const double>(doff, 4), &dh, &grads.reg);
  std::vector<double> dpre(trace.h.size(), 0.0);
  tanh_vec_backward(trace.h, dh, dpre);
  std::vector<double> dz(trace.z.size(), 0.0);
  dense_backward(params.fc1, trace.z, dpre, &dz, &grads.fc1);

  const AttentionMode mode = params.topo.attention;
  const int c3 = trunk.stage3().c;
  const int c4 = trunk.stage4().c;
  const std::span<const double> dzs(dz);
  {
    FeatureGrid dyatt3 = FeatureGrid::zeros(trunk.stage3().h, trunk.stage3().w, c3);
    region_pool_backward(g3, c3, dzs.subspan(0, 2 * c3), dyatt3);
    mirror_attention_backward(trunk.stage3(), g3, params.att3, mode, trace.at3, dyatt3,
                              d_stage3, grads.att3);
  }
  {
    FeatureGrid dyatt4 = FeatureGrid::zeros(trunk.stage4().h, trunk.stage4().w, c4);
    region_pool_backward(g4, c4, dzs.subspan(2 * c3, 2 * c4), dyatt4);
    mirror_attention_backward(trunk.stage4(), g4, params.att4, mode, trace.at4, dyatt4,
                              d_stage4, grads.att4);
  }
}

namespace {

LineTrace run_one_line(const DetectorParams& params, const BackboneTrace& trunk,
                       const FeatureGrid& image, const Line& line) {
  const ImageSize image_size{image.w, image.h};
  require_valid_line(line, image_size);
  const Line canon = canonical_line(line, image_size);
  const bool flip = params.topo.attention == AttentionMode::mirror;
  const ImageSize grid3{trunk.stage3().w, trunk.stage3().h};
  const ImageSize grid4{trunk.stage4().w, trunk.stage4().h};
  const LineStageGeom g3 = make_line_stage_geom(canon, image_size, grid3,
                                                params.topo.sigma,
                                                params.topo.pool_threshold, flip);
  const LineStageGeom g4 = make_line_stage_geom(canon, image_size, grid4,
                                                params.topo.sigma,
                                                params.topo.pool_threshold, flip);
  return line_forward_cached(params, trunk, canon, g3, g4);
}

}  // namespace

std::pair<ProbPair, LineOffset> detector_forward(const DetectorParams& params,
                                                 const FeatureGrid& image,
                                                 const Line& line) {
  const BackboneTrace trunk = backbone_forward(params, image);
  const LineTrace t = run_one_line(params, trunk, image, line);
  return {t.prob, t.offset};
}

std::vector<double> line_feature(const DetectorParams& params, const FeatureGrid& image,
                                 const Line& line) {
  const BackboneTrace trunk = backbone_forward(params, image);
  return run_one_line(params, trunk, image, line).h;
}

double detector_loss(const ProbPair& prob, const LineOffset& offset,
                     const ProbPair& label, const LineOffset& target, double lambda) {
  double loss = cross_entropy(prob, label);
  if (label.p > 0.5) {
    const double d[4] = {offset.dx_s, offset.dy_s, offset.dx_e, offset.dy_e};
    const double t[4] = {target.dx_s, target.dy_s, target.dx_e, target.dy_e};
    loss += lambda * smooth_l1(std::span<const double>(d, 4), std::span<const double>(t, 4));
  }
  return loss;
}

void detector_loss_backward(const ProbPair& prob, const LineOffset& offset,
                            const ProbPair& label, const LineOffset& target,
                            double lambda, ProbPair& dprob, LineOffset& doffset) {
  double dp = 0.0, dq = 0.0;
  cross_entropy_backward(prob, label, dp, dq);
  dprob.p += dp;
  dprob.q += dq;
  if (label.p > 0.5) {
    const double d[4] = {offset.dx_s, offset.dy_s, offset.dx_e, offset.dy_e};
    const double t[4] = {target.dx_s, target.dy_s, target.dx_e, target.dy_e};
    double dd[4] = {0.0, 0.0, 0.0, 0.0};
    smooth_l1_backward(std::span<const double>(d, 4), std::span<const double>(t, 4),
                       lambda, std::span<double>(dd, 4));
    doffset.dx_s += dd[0];
    doffset.dy_s += dd[1];
    doffset.dx_e += dd[2];
    doffset.dy_e += dd[3];
  }
}

Line regress_line(const Line& line, const LineOffset& offset, const ImageSize& size) {
  const Line canon = canonical_line(line, size);
  const Vec2 s = nearest_boundary_point(
      {canon.x_s + offset.dx_s, canon.y_s + offset.dy_s}, size);
  const Vec2 e = nearest_boundary_point(
      {canon.x_e + offset.dx_e, canon.y_e + offset.dy_e}, size);
  const Line out{s.x, s.y, e.x, e.y};
  require_valid_line(out, size);
  return out;
}

SiameseHeadParams make_siamese(int feature_dim, int hidden, std::uint64_t seed) {
  if (feature_dim < 1 || hidden < 1) {
    throw ConfigError("siamese head dims must be positive");
  }
  SiameseHeadParams p;
  p.fc_in = make_dense(2 * feature_dim, hidden);
  p.fc_out = make_dense(hidden, 2);
  Rng rng(mix_seed(seed, 0x70616972));
  init_uniform(p.fc_in.w, p.fc_in.in, rng);
  // fc_out stays zero: an untrained head answers (0.5, 0.5) for every pair.
  return p;
}

SiameseHeadParams siamese_zeros_like(const SiameseHeadParams& like) {
  SiameseHeadParams z = like;
  std::fill(z.fc_in.w.begin(), z.fc_in.w.end(), 0.0);
  std::fill(z.fc_in.b.begin(), z.fc_in.b.end(), 0.0);
  std::fill(z.fc_out.w.begin(), z.fc_out.w.end(), 0.0);
  std::fill(z.fc_out.b.begin(), z.fc_out.b.end(), 0.0);
  return z;
}

std::vector<std::span<double>> siamese_spans(SiameseHeadParams& p) {
  return {std::span<double>(p.fc_in.w), std::span<double>(p.fc_in.b),
          std::span<double>(p.fc_out.w), std::span<double>(p.fc_out.b)};
}

std::vector<std::span<const double>> siamese_views(const SiameseHeadParams& p) {
  auto spans = siamese_spans(const_cast<SiameseHeadParams&>(p));
  return {spans.begin(), spans.end()};
}

void siamese_axpy(SiameseHeadParams& dst, const SiameseHeadParams& grad, double alpha) {
  auto d = siamese_spans(dst);
  auto g = siamese_spans(const_cast<SiameseHeadParams&>(grad));
  for (std::size_t k = 0; k < d.size(); ++k) {
    for (std::size_t i = 0; i < d[k].size(); ++i) d[k][i] += alpha * g[k][i];
  }
}

ProbPair siamese_forward(const SiameseHeadParams& params, std::span<const double> f_i,
                         std::span<const double> f_j, SiameseTrace* trace) {
  if (f_i.size() != f_j.size()) {
    throw DimensionError("siamese head: feature dims differ");
  }
  if (static_cast<int>(f_i.size() + f_j.size()) != params.fc_in.in) {
    throw DimensionError("siamese head: feature dim does not match head input");
  }
  std::vector<double> input;
  input.reserve(f_i.size() + f_j.size());
  input.insert(input.end(), f_i.begin(), f_i.end());
  input.insert(input.end(), f_j.begin(), f_j.end());
  const std::vector<double> pre = dense(params.fc_in, input);
  std::vector<double> hidden = tanh_vec(pre);
  const std::vector<double> logits = dense(params.fc_out, hidden);
  const ProbPair prob = softmax2(logits[0], logits[1]);
  if (trace) {
    trace->input = std::move(input);
    trace->hidden = std::move(hidden);
    trace->logits = {logits[0], logits[1]};
    trace->prob = prob;
  }
  return prob;
}

void siamese_backward(const SiameseHeadParams& params, const SiameseTrace& trace,
                      const ProbPair& dprob, SiameseHeadParams& grads) {
  double dl0 = 0.0, dl1 = 0.0;
  softmax2_backward(trace.prob, dprob.p, dprob.q, dl0, dl1);
  const double dlog[2] = {dl0, dl1};
  std::vector<double> dhidden(trace.hidden.size(), 0.0);
  dense_backward(params.fc_out, trace.hidden, std::span<const double>(dlog, 2), &dhidden,
                 &grads.fc_out);
  std::vector<double> dpre(trace.hidden.size(), 0.0);
  tanh_vec_backward(trace.hidden, dhidden, dpre);
  dense_backward(params.fc_in, trace.input, dpre, nullptr, &grads.fc_in);
}

}  // namespace semline
