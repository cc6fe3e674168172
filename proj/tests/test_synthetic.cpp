#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "semline/error.hpp"
#include "semline/geometry.hpp"
#include "semline/synthetic.hpp"

using namespace semline;

namespace {

/// Bilinear sample of channel 0 at an arbitrary point (pixel centers sit at
/// half-integer coordinates).
double sample_bilinear(const FeatureGrid& img, double x, double y) {
  const double fx = std::clamp(x - 0.5, 0.0, static_cast<double>(img.w - 1));
  const double fy = std::clamp(y - 0.5, 0.0, static_cast<double>(img.h - 1));
  const int x0 = std::min(static_cast<int>(fx), img.w - 2);
  const int y0 = std::min(static_cast<int>(fy), img.h - 2);
  const double ax = fx - x0;
  const double ay = fy - y0;
  return (1 - ax) * (1 - ay) * img.at(y0, x0, 0) + ax * (1 - ay) * img.at(y0, x0 + 1, 0) +
         (1 - ax) * ay * img.at(y0 + 1, x0, 0) + ax * ay * img.at(y0 + 1, x0 + 1, 0);
}

}  // namespace

TEST_CASE("scene generation is deterministic and prefix-stable") {
  SceneConfig cfg;
  cfg.size = {48, 48};
  const auto a = gen_synthetic(5, cfg, 99);
  const auto b = gen_synthetic(5, cfg, 99);
  REQUIRE(a.size() == 5);
  for (int i = 0; i < 5; ++i) {
    CHECK(a[static_cast<std::size_t>(i)].image.v == b[static_cast<std::size_t>(i)].image.v);
    REQUIRE(a[static_cast<std::size_t>(i)].gts.size() == b[static_cast<std::size_t>(i)].gts.size());
  }
  // Scene i depends only on (seed, i): shorter runs are prefixes of longer ones.
  const auto c = gen_synthetic(2, cfg, 99);
  CHECK(c[1].image.v == a[1].image.v);
  // A different seed changes the scenes.
  const auto d = gen_synthetic(1, cfg, 100);
  CHECK(d[0].image.v != a[0].image.v);
}

TEST_CASE("noise-free single-line scenes step by exactly the contrast") {
  SceneConfig cfg;
  cfg.size = {40, 40};
  cfg.noise = 0.0;
  cfg.contrast = 0.2;
  cfg.min_lines = 1;
  cfg.max_lines = 1;
  const auto scenes = gen_synthetic(4, cfg, 7);
  for (const auto& scene : scenes) {
    REQUIRE(scene.gts.size() == 1);
    CHECK(scene.gts[0].primary);
    const Line& gt = scene.gts[0].line;
    validate_line(gt, cfg.size);

    // Every pixel holds one of exactly two tones separated by the contrast,
    // split by the side of the line.
    double lo = 2.0, hi = -1.0;
    for (int y = 0; y < cfg.size.height; ++y) {
      for (int x = 0; x < cfg.size.width; ++x) {
        const double v = scene.image.at(y, x, 0);
        lo = std::min(lo, v);
        hi = std::max(hi, v);
        // Noise-free scenes are grayscale: all channels agree.
        CHECK(scene.image.at(y, x, 1) == v);
        CHECK(scene.image.at(y, x, 2) == v);
      }
    }
    // Tones are float32-quantized at generation, so the step matches the
    // contrast only to single-precision resolution.
    CHECK(hi - lo == doctest::Approx(cfg.contrast).epsilon(1e-5));
    int mismatched = 0;
    for (int y = 0; y < cfg.size.height; ++y) {
      for (int x = 0; x < cfg.size.width; ++x) {
        const double v = scene.image.at(y, x, 0);
        CHECK((v == doctest::Approx(lo).epsilon(1e-12) ||
               v == doctest::Approx(hi).epsilon(1e-12)));
        // Tones on one side all agree; use the line side as the predictor.
        const double d = point_line_distance(gt, {x + 0.5, y + 0.5});
        const bool bright = v > 0.5 * (lo + hi);
        const bool side = d > 0.0;
        mismatched += (bright != side) ? 1 : 0;
      }
    }
    // The side predictor is either the bright side or the dark side.
    const int total = cfg.size.width * cfg.size.height;
    CHECK((mismatched == 0 || mismatched == total));
  }
}

TEST_CASE("multi-line scenes respect the gt structure constraints") {
  SceneConfig cfg;
  cfg.size = {64, 64};
  cfg.noise = 0.0;
  const auto scenes = gen_synthetic(12, cfg, 21);
  for (const auto& scene : scenes) {
    const std::size_t k = scene.gts.size();
    REQUIRE(k >= static_cast<std::size_t>(cfg.min_lines));
    REQUIRE(k <= static_cast<std::size_t>(cfg.max_lines));
    int primaries = 0;
    for (const auto& gt : scene.gts) {
      validate_line(gt.line, cfg.size);
      primaries += gt.primary ? 1 : 0;
      // Each side of each line covers at least the configured fraction.
      const auto [r1, r2] = split_regions(gt.line, cfg.size);
      const double total = static_cast<double>(cfg.size.width) * cfg.size.height;
      CHECK(r1.area() >= cfg.min_region_frac * total - 1e-9);
      CHECK(r2.area() >= cfg.min_region_frac * total - 1e-9);
    }
    CHECK(primaries == 1);
    for (std::size_t i = 0; i < k; ++i) {
      for (std::size_t j = i + 1; j < k; ++j) {
        CHECK(miou(scene.gts[i].line, scene.gts[j].line, cfg.size) <=
              cfg.max_gt_overlap + 1e-12);
      }
    }

    // Every gt separates the two sides by at least the contrast in the mean.
    for (const auto& gt : scene.gts) {
      double sum_a = 0.0, sum_b = 0.0;
      int n_a = 0, n_b = 0;
      for (int y = 0; y < cfg.size.height; ++y) {
        for (int x = 0; x < cfg.size.width; ++x) {
          const double v = scene.image.at(y, x, 0);
          if (point_line_distance(gt.line, {x + 0.5, y + 0.5}) > 0.0) {
            sum_a += v;
            ++n_a;
          } else {
            sum_b += v;
            ++n_b;
          }
        }
      }
      REQUIRE(n_a > 0);
      REQUIRE(n_b > 0);
      CHECK(std::abs(sum_a / n_a - sum_b / n_b) >= cfg.contrast - 1e-6);
    }
  }
}

TEST_CASE("pixel values stay inside the unit interval with noise") {
  SceneConfig cfg;
  cfg.size = {32, 32};
  const auto scenes = gen_synthetic(8, cfg, 5);
  for (const auto& scene : scenes) {
    for (const double v : scene.image.v) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
}

TEST_CASE("symmetric scenes mirror across their single primary line") {
  SceneConfig cfg;
  cfg.size = {48, 48};
  cfg.mode = SceneMode::symmetric;
  cfg.noise = 0.0;
  const auto scenes = gen_synthetic(6, cfg, 31);
  for (const auto& scene : scenes) {
    CHECK(scene.mode == SceneMode::symmetric);
    REQUIRE(scene.gts.size() == 1);
    CHECK(scene.gts[0].primary);
    const Line& axis = scene.gts[0].line;
    validate_line(axis, cfg.size);

    // Reflect interior pixel centers across the axis and compare by bilinear
    // interpolation; the texture is smooth, so the tolerance absorbs the
    // interpolation error.
    const Vec2 s = axis.start();
    Vec2 dvec = axis.end() - axis.start();
    const double len = std::sqrt(dot(dvec, dvec));
    dvec = (1.0 / len) * dvec;
    const Vec2 n{-dvec.y, dvec.x};
    int compared = 0;
    for (int y = 2; y < cfg.size.height - 2; y += 3) {
      for (int x = 2; x < cfg.size.width - 2; x += 3) {
        const Vec2 p{x + 0.5, y + 0.5};
        const double across = dot(p - s, n);
        const Vec2 q = p - (2.0 * across) * n;
        if (q.x < 2.0 || q.y < 2.0 || q.x > cfg.size.width - 2.0 ||
            q.y > cfg.size.height - 2.0) {
          continue;
        }
        ++compared;
        const double direct = scene.image.at(y, x, 0);
        const double mirrored = sample_bilinear(scene.image, q.x, q.y);
        CHECK(std::abs(direct - mirrored) < 0.05);
      }
    }
    CHECK(compared > 20);
  }
}

TEST_CASE("impossible scene configurations are rejected up front") {
  SceneConfig cfg;
  cfg.size = {32, 32};

  SceneConfig weak = cfg;
  weak.contrast = 0.015;  // not above twice the noise
  weak.noise = 0.01;
  CHECK_THROWS_AS(gen_synthetic(1, weak, 1), ConfigError);

  SceneConfig shrunk = cfg;
  shrunk.primary_boost = 0.5;
  CHECK_THROWS_AS(gen_synthetic(1, shrunk, 1), ConfigError);

  SceneConfig overfull = cfg;
  overfull.max_lines = 12;  // 13 tone bands at the default contrast exceed [0,1]
  CHECK_THROWS_AS(gen_synthetic(1, overfull, 1), ConfigError);

  SceneConfig inverted = cfg;
  inverted.min_lines = 3;
  inverted.max_lines = 2;
  CHECK_THROWS_AS(gen_synthetic(1, inverted, 1), ConfigError);

  CHECK_THROWS_AS(gen_synthetic(-1, cfg, 1), ConfigError);

  SceneConfig cramped = cfg;
  cramped.min_region_frac = 0.49;  // almost no chord splits 49/51 every time
  cramped.max_lines = 3;
  CHECK_THROWS_AS(gen_synthetic(4, cramped, 1), ConfigError);
}

TEST_CASE("scene mode names round-trip") {
  CHECK(to_string(SceneMode::heterogeneous) == "heterogeneous");
  CHECK(to_string(SceneMode::symmetric) == "symmetric");
  CHECK(scene_mode_from_string("heterogeneous") == SceneMode::heterogeneous);
  CHECK(scene_mode_from_string("symmetric") == SceneMode::symmetric);
  CHECK_THROWS_AS(scene_mode_from_string("other"), ConfigError);
}
