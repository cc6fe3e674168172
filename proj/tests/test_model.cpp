#include <doctest.h>

#include <array>
#include <cmath>
#include <span>
#include <vector>

#include "semline/error.hpp"
#include "semline/model.hpp"
#include "semline/nn.hpp"
#include "semline/rng.hpp"
#include "semline/train.hpp"

using namespace semline;

namespace {

FeatureGrid random_grid(Rng& rng, int h, int w, int c) {
  FeatureGrid g = FeatureGrid::zeros(h, w, c);
  for (double& v : g.v) v = rng.uniform(-1.0, 1.0);
  return g;
}

AttentionParams zero_attention(int channels, int n, bool mirror) {
  AttentionParams p;
  p.f0 = make_conv(n, n, mirror ? 2 * channels : channels, 1);
  p.f1 = make_conv(2 * n + 1, 2 * n + 1, 1, 1);
  p.f2 = make_conv(2 * n + 1, 2 * n + 1, 1, 1);
  return p;
}

void randomize_attention(AttentionParams& p, Rng& rng) {
  for (ConvParams* c : {&p.f0, &p.f1, &p.f2}) {
    init_uniform(c->w, c->cin * c->kh * c->kw, rng);
    init_uniform(c->b, c->cin * c->kh * c->kw, rng);
  }
}

void randomize_heads(DetectorParams& det, Rng& rng) {
  init_uniform(det.cls.w, det.cls.in, rng);
  init_uniform(det.cls.b, det.cls.in, rng);
  init_uniform(det.reg.w, det.reg.in, rng);
  init_uniform(det.reg.b, det.reg.in, rng);
}

}  // namespace

TEST_CASE("attention with zero filters applies the constant residual mask 1.5") {
  Rng rng(71);
  const int c = 2, n = 3;
  const FeatureGrid x = random_grid(rng, 8, 8, c);
  const Line line{0, 3.4, 8, 4.6};
  const double sigma = 4.0;
  const AttentionParams zero = zero_attention(c, n, true);

  // All convolutions output 0, the sigmoid turns it into 0.5, and the
  // residual (1 + A) scales the Gaussian-weighted input by exactly 1.5.
  const FeatureGrid y = gaussian_weight(x, line, sigma);
  const FeatureGrid yatt = mirror_attention(x, line, zero, sigma, AttentionMode::mirror);
  REQUIRE(yatt.same_shape(y));
  for (std::size_t i = 0; i < y.v.size(); ++i) {
    CHECK(yatt.v[i] == doctest::Approx(1.5 * y.v[i]).epsilon(1e-12));
  }

  // Mode none passes the input through untouched.
  const FeatureGrid none = mirror_attention(x, line, zero, sigma, AttentionMode::none);
  CHECK(none.v == x.v);
}

TEST_CASE("attention output is bounded by twice the weighted input, same sign") {
  Rng rng(73);
  const int c = 3, n = 3;
  const FeatureGrid x = random_grid(rng, 10, 10, c);
  const Line line{2.2, 0, 7.9, 10};
  for (const AttentionMode mode : {AttentionMode::mirror, AttentionMode::noflip}) {
    AttentionParams p = zero_attention(c, n, mode == AttentionMode::mirror);
    randomize_attention(p, rng);
    const FeatureGrid y = gaussian_weight(x, line, 4.0);
    const FeatureGrid yatt = mirror_attention(x, line, p, 4.0, mode);
    for (std::size_t i = 0; i < y.v.size(); ++i) {
      CHECK(std::abs(yatt.v[i]) <= 2.0 * std::abs(y.v[i]) + 1e-15);
      CHECK(std::abs(yatt.v[i]) >= std::abs(y.v[i]) - 1e-15);
      CHECK(yatt.v[i] * y.v[i] >= 0.0);  // the (1+A) mask never flips sign
    }
  }
}

TEST_CASE("the flip branch doubles the f0 input channels in mirror mode only") {
  Rng rng(79);
  const int c = 2;
  const ImageSize image{32, 32};
  const ImageSize grid{8, 8};
  const Line line{0, 12, 32, 20};
  const FeatureGrid x = random_grid(rng, 8, 8, c);

  AttentionParams mirror_p = zero_attention(c, 3, true);
  randomize_attention(mirror_p, rng);
  const LineStageGeom gm = make_line_stage_geom(line, image, grid, 4.0, 3.0, true);
  AttentionTrace tm;
  mirror_attention_cached(x, gm, mirror_p, AttentionMode::mirror, &tm);
  CHECK(tm.cat.c == 2 * c);

  // The flipped block of the f0 input equals mirror_flip of the weighted map.
  const FeatureGrid flipped = mirror_flip(tm.y, gm.grid_line);
  for (int y = 0; y < 8; ++y) {
    for (int xx = 0; xx < 8; ++xx) {
      for (int ch = 0; ch < c; ++ch) {
        CHECK(tm.cat.at(y, xx, ch) == doctest::Approx(tm.y.at(y, xx, ch)));
        CHECK(tm.cat.at(y, xx, c + ch) == doctest::Approx(flipped.at(y, xx, ch)));
      }
    }
  }

  AttentionParams noflip_p = zero_attention(c, 3, false);
  randomize_attention(noflip_p, rng);
  const LineStageGeom gn = make_line_stage_geom(line, image, grid, 4.0, 3.0, false);
  AttentionTrace tn;
  mirror_attention_cached(x, gn, noflip_p, AttentionMode::noflip, &tn);
  CHECK(tn.cat.c == c);
}

TEST_CASE("region_pool matches a direct scalar loop") {
  Rng rng(83);
  const int h = 9, w = 9, c = 3;
  const FeatureGrid y = random_grid(rng, h, w, c);
  const Line line{0, 2.7, 9, 6.3};
  const double thr = 3.0;
  const auto got = region_pool(y, line, thr);
  REQUIRE(got.size() == static_cast<std::size_t>(2 * c));

  // Oracle: strips of signed pixel-center distance, first side per
  // first_side_sign, mean per channel, concatenated.
  const int s = first_side_sign(line, ImageSize{w, h});
  std::vector<double> mean_u(c, 0.0), mean_v(c, 0.0);
  int nu = 0, nv = 0;
  for (int yy = 0; yy < h; ++yy) {
    for (int xx = 0; xx < w; ++xx) {
      const double d = s * point_line_distance(line, {xx + 0.5, yy + 0.5});
      if (d > 0.0 && d <= thr) {
        ++nu;
        for (int ch = 0; ch < c; ++ch) mean_u[ch] += y.at(yy, xx, ch);
      } else if (-d > 0.0 && -d <= thr) {
        ++nv;
        for (int ch = 0; ch < c; ++ch) mean_v[ch] += y.at(yy, xx, ch);
      }
    }
  }
  REQUIRE(nu > 0);
  REQUIRE(nv > 0);
  for (int ch = 0; ch < c; ++ch) {
    CHECK(got[ch] == doctest::Approx(mean_u[ch] / nu).epsilon(1e-12));
    CHECK(got[c + ch] == doctest::Approx(mean_v[ch] / nv).epsilon(1e-12));
  }

  // The cached variant agrees with the direct one.
  const LineStageGeom geom =
      make_line_stage_geom(Line{0, 27, 90, 63}, ImageSize{90, 90}, ImageSize{w, h}, 4.0,
                           thr, false);
  const auto direct = region_pool(y, geom.grid_line, thr);
  const auto cached = region_pool_cached(y, geom);
  REQUIRE(direct.size() == cached.size());
  for (std::size_t i = 0; i < direct.size(); ++i) {
    CHECK(cached[i] == doctest::Approx(direct[i]).epsilon(1e-12));
  }

  // Reversing the endpoints flips the side classifier, so the two strip
  // pools swap blocks.  (Endpoint-order invariance of the full detector
  // comes from canonicalizing the line first.)
  const Line rev{line.x_e, line.y_e, line.x_s, line.y_s};
  const auto got_rev = region_pool(y, rev, thr);
  REQUIRE(got_rev.size() == got.size());
  for (int ch = 0; ch < c; ++ch) {
    CHECK(got_rev[ch] == doctest::Approx(got[c + ch]).epsilon(1e-12));
    CHECK(got_rev[c + ch] == doctest::Approx(got[ch]).epsilon(1e-12));
  }

  // A line hugging the boundary leaves one strip without pixel centers.
  CHECK_THROWS_AS(region_pool(y, Line{0.2, 0, 0.2, 9}, thr), DegenerateRegionError);
}

TEST_CASE("region_pool_backward is the adjoint of region_pool") {
  Rng rng(89);
  const int h = 8, w = 8, c = 2;
  const ImageSize image{64, 64};
  const LineStageGeom geom =
      make_line_stage_geom(Line{0, 20, 64, 44}, image, ImageSize{w, h}, 4.0, 3.0, false);
  const FeatureGrid y = random_grid(rng, h, w, c);
  const auto out = region_pool_cached(y, geom);
  std::vector<double> u(out.size());
  for (double& v : u) v = rng.uniform(-1.0, 1.0);
  FeatureGrid dy = FeatureGrid::zeros(h, w, c);
  region_pool_backward(geom, c, u, dy);
  double lhs = 0.0, rhs = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) lhs += out[i] * u[i];
  for (std::size_t i = 0; i < y.v.size(); ++i) rhs += y.v[i] * dy.v[i];
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("mirror attention gradient check (parameters and input)") {
  Rng rng(97);
  const int c = 2, n = 3;
  const ImageSize image{24, 24};
  const ImageSize grid{6, 6};
  const Line image_line{0, 8, 24, 15};
  for (const AttentionMode mode : {AttentionMode::mirror, AttentionMode::noflip}) {
    AttentionParams p = zero_attention(c, n, mode == AttentionMode::mirror);
    randomize_attention(p, rng);
    FeatureGrid x = random_grid(rng, 6, 6, c);
    const FeatureGrid proj = random_grid(rng, 6, 6, c);
    const LineStageGeom geom =
        make_line_stage_geom(image_line, image, grid, 4.0, 3.0, mode == AttentionMode::mirror);

    const auto objective = [&]() {
      const FeatureGrid yatt = mirror_attention_cached(x, geom, p, mode, nullptr);
      double s = 0.0;
      for (std::size_t i = 0; i < yatt.v.size(); ++i) s += yatt.v[i] * proj.v[i];
      return s;
    };

    AttentionTrace trace;
    mirror_attention_cached(x, geom, p, mode, &trace);
    AttentionParams grads = zero_attention(c, n, mode == AttentionMode::mirror);
    FeatureGrid dx = FeatureGrid::zeros(6, 6, c);
    mirror_attention_backward(x, geom, p, mode, trace, proj, dx, grads);

    std::vector<double> analytic;
    for (const ConvParams* g : {&grads.f0, &grads.f1, &grads.f2}) {
      analytic.insert(analytic.end(), g->w.begin(), g->w.end());
      analytic.insert(analytic.end(), g->b.begin(), g->b.end());
    }
    analytic.insert(analytic.end(), dx.v.begin(), dx.v.end());
    const auto report = grad_check(
        objective,
        {std::span<double>(p.f0.w), std::span<double>(p.f0.b), std::span<double>(p.f1.w),
         std::span<double>(p.f1.b), std::span<double>(p.f2.w), std::span<double>(p.f2.b),
         std::span<double>(x.v)},
        analytic, 1e-4);
    CHECK(report.max_rel_err < 1e-4);
  }
}

TEST_CASE("backbone stage shapes and pooling wiring") {
  Rng rng(101);
  Topology topo;
  DetectorParams det = make_detector(topo, 3);
  const FeatureGrid image = random_grid(rng, 16, 16, 3);
  const BackboneTrace trace = backbone_forward(det, image);
  CHECK(trace.act[0].h == 16);
  CHECK(trace.act[0].c == 8);
  CHECK(trace.pooled[0].h == 8);
  CHECK(trace.act[1].h == 8);
  CHECK(trace.act[1].c == 16);
  CHECK(trace.pooled[1].h == 4);
  CHECK(trace.stage3().h == 4);
  CHECK(trace.stage3().c == 32);
  CHECK(trace.stage4().h == 4);
  CHECK(trace.stage4().c == 32);
  for (const FeatureGrid* g : {&trace.act[0], &trace.act[1], &trace.act[2], &trace.act[3]}) {
    for (double v : g->v) CHECK(std::abs(v) <= 1.0);
  }
  // The pooled maps are exactly avg_pool2 of the stage activations.
  const FeatureGrid p0 = avg_pool2(trace.act[0]);
  CHECK(p0.v == trace.pooled[0].v);
}

TEST_CASE("untrained detector answers exactly p=0.5 with zero offsets") {
  Rng rng(103);
  Topology topo;
  const DetectorParams det = make_detector(topo, 11);
  const FeatureGrid image = random_grid(rng, 16, 16, 3);
  const auto [prob, offset] = detector_forward(det, image, Line{0, 6, 16, 10});
  CHECK(prob.p == 0.5);  // exact: zero-initialized heads
  CHECK(prob.q == 0.5);
  CHECK(offset.dx_s == 0.0);
  CHECK(offset.dy_s == 0.0);
  CHECK(offset.dx_e == 0.0);
  CHECK(offset.dy_e == 0.0);

  // Per-candidate loss of the untrained detector is exactly -log(0.5) = ln 2:
  // a negative label has no regression term, and for a positive label a zero
  // target makes the regression term vanish with the zero-initialized offsets.
  const LineOffset zero_target{0.0, 0.0, 0.0, 0.0};
  CHECK(detector_loss(prob, offset, one_hot(false), zero_target, 1.0) == std::log(2.0));
  CHECK(detector_loss(prob, offset, one_hot(true), zero_target, 1.0) == std::log(2.0));
}

TEST_CASE("detector_forward is invariant to the endpoint order") {
  Rng rng(107);
  Topology topo;
  DetectorParams det = make_detector(topo, 13);
  randomize_heads(det, rng);
  const FeatureGrid image = random_grid(rng, 16, 16, 3);
  const Line line{0, 6, 16, 10};
  const Line swapped{16, 10, 0, 6};
  const auto [p1, o1] = detector_forward(det, image, line);
  const auto [p2, o2] = detector_forward(det, image, swapped);
  CHECK(p1.p == doctest::Approx(p2.p).epsilon(1e-15));
  CHECK(o1.dx_s == doctest::Approx(o2.dx_s).epsilon(1e-15));
  CHECK(o1.dy_s == doctest::Approx(o2.dy_s).epsilon(1e-15));
  CHECK(o1.dx_e == doctest::Approx(o2.dx_e).epsilon(1e-15));
  CHECK(o1.dy_e == doctest::Approx(o2.dy_e).epsilon(1e-15));
}

TEST_CASE("line_feature returns the shared fully connected output") {
  Rng rng(109);
  Topology topo;
  DetectorParams det = make_detector(topo, 17);
  randomize_heads(det, rng);
  const FeatureGrid image = random_grid(rng, 16, 16, 3);
  const Line line{0, 6, 16, 10};
  const auto feature = line_feature(det, image, line);
  REQUIRE(static_cast<int>(feature.size()) == topo.fc_width);
  for (double v : feature) CHECK(std::abs(v) <= 1.0);  // tanh output

  // It matches the cached forward path's h vector.
  const BackboneTrace trunk = backbone_forward(det, image);
  const ImageSize grid{4, 4};
  const Line canon = canonical_line(line, image.size());
  const LineStageGeom g3 = make_line_stage_geom(canon, image.size(), grid, topo.sigma,
                                                topo.pool_threshold, true);
  const LineStageGeom g4 = make_line_stage_geom(canon, image.size(), grid, topo.sigma,
                                                topo.pool_threshold, true);
  const LineTrace trace = line_forward_cached(det, trunk, canon, g3, g4);
  REQUIRE(trace.h.size() == feature.size());
  for (std::size_t i = 0; i < feature.size(); ++i) {
    CHECK(feature[i] == doctest::Approx(trace.h[i]).epsilon(1e-12));
  }
  CHECK(trace.z.size() == static_cast<std::size_t>(2 * 32 + 2 * 32));
}

TEST_CASE("detector_loss composes cross entropy and gated smooth L1") {
  const ProbPair prob{0.7, 0.3};
  const LineOffset offset{0.4, -0.2, 1.8, 0.1};
  const LineOffset target{0.1, 0.1, -0.3, 0.0};
  const double lambda = 1.0;

  const std::array<double, 4> d{offset.dx_s, offset.dy_s, offset.dx_e, offset.dy_e};
  const std::array<double, 4> t{target.dx_s, target.dy_s, target.dx_e, target.dy_e};

  const double pos = detector_loss(prob, offset, one_hot(true), target, lambda);
  const double want_pos = cross_entropy(prob, one_hot(true)) + lambda * smooth_l1(d, t);
  CHECK(pos == doctest::Approx(want_pos).epsilon(1e-10));

  // Negative labels drop the regression term entirely.
  const double neg = detector_loss(prob, offset, one_hot(false), target, lambda);
  CHECK(neg == doctest::Approx(cross_entropy(prob, one_hot(false))).epsilon(1e-10));

  // And the offset gradient is zero for negatives.
  ProbPair dprob;
  LineOffset doffset;
  detector_loss_backward(prob, offset, one_hot(false), target, lambda, dprob, doffset);
  CHECK(doffset.dx_s == 0.0);
  CHECK(doffset.dy_e == 0.0);
}

TEST_CASE("regress_line applies offsets then re-projects onto the boundary") {
  const ImageSize size{100, 100};
  const Line line{20, 0, 60, 100};  // canonical: arc 20 before arc 240
  const LineOffset off{2, -3, -4, 5};
  const Line r = regress_line(line, off, size);
  CHECK(r.x_s == doctest::Approx(22.0));
  CHECK(r.y_s == doctest::Approx(0.0));   // (22,-3) projects back to the top edge
  CHECK(r.x_e == doctest::Approx(56.0));
  CHECK(r.y_e == doctest::Approx(100.0));

  // Offsets are defined against the canonical order, so the endpoint order of
  // the input does not matter.
  const Line swapped{60, 100, 20, 0};
  const Line r2 = regress_line(swapped, off, size);
  CHECK(r == r2);

  // Offsets that collapse the chord onto one edge are rejected.
  CHECK_THROWS_AS(regress_line(line, LineOffset{0, 0, -30, -99.9}, size), ValidationError);
}

TEST_CASE("zero offsets keep a canonical line unchanged") {
  const ImageSize size{100, 100};
  const Line line{20, 0, 60, 100};
  const Line r = regress_line(line, LineOffset{}, size);
  CHECK(r == line);
}

TEST_CASE("siamese head: untrained answers 0.5, trained path gradient-checks") {
  Rng rng(113);
  SiameseHeadParams head = make_siamese(8, 16, 5);
  std::vector<double> fi(8), fj(8);
  for (double& v : fi) v = rng.uniform(-1.0, 1.0);
  for (double& v : fj) v = rng.uniform(-1.0, 1.0);
  const ProbPair p0 = siamese_forward(head, fi, fj, nullptr);
  CHECK(p0.p == 0.5);  // zero output layer
  CHECK(p0.q == 0.5);

  init_uniform(head.fc_out.w, head.fc_out.in, rng);
  init_uniform(head.fc_out.b, head.fc_out.in, rng);

  const ProbPair label = one_hot(true);
  const auto objective = [&]() {
    return cross_entropy(siamese_forward(head, fi, fj, nullptr), label);
  };
  SiameseTrace trace;
  const ProbPair prob = siamese_forward(head, fi, fj, &trace);
  double dp = 0.0, dq = 0.0;
  cross_entropy_backward(prob, label, dp, dq);
  SiameseHeadParams grads = siamese_zeros_like(head);
  siamese_backward(head, trace, ProbPair{dp, dq}, grads);
  const auto analytic = flatten(siamese_views(grads));
  const auto report = grad_check(objective, siamese_spans(head), analytic, 1e-4);
  CHECK(report.max_rel_err < 1e-4);

  // The head is order-sensitive by construction: [f_i; f_j] != [f_j; f_i].
  const ProbPair pij = siamese_forward(head, fi, fj, nullptr);
  const ProbPair pji = siamese_forward(head, fj, fi, nullptr);
  CHECK(pij.p != doctest::Approx(pji.p).epsilon(1e-12));
}

TEST_CASE("full detector composition gradient check at 16x16x4") {
  const auto report = detector_grad_check(1, 300);
  CHECK(report.max_rel_err < 1e-4);
  CHECK(report.coords_checked == 300);
}

TEST_CASE("parameter spans cover every tensor and axpy updates in place") {
  Topology topo;
  DetectorParams det = make_detector(topo, 19);
  const std::size_t count = param_count(det);
  std::size_t total = 0;
  for (const auto& s : param_views(det)) total += s.size();
  CHECK(total == count);

  DetectorParams grad = zeros_like(det);
  auto spans = param_spans(grad);
  spans[0][0] = 2.0;
  const double before = param_views(det)[0][0];
  axpy_params(det, grad, -0.5);
  CHECK(param_views(det)[0][0] == doctest::Approx(before - 1.0));

  // Attention-free topologies carry no attention tensors.
  Topology plain = topo;
  plain.attention = AttentionMode::none;
  const DetectorParams det_plain = make_detector(plain, 19);
  CHECK(param_count(det_plain) < count);
  CHECK(!det_plain.has_attention());
}
