#include "semline/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "semline/error.hpp"
#include "semline/rng.hpp"

namespace semline {

std::string to_string(SceneMode mode) {
  return mode == SceneMode::heterogeneous ? "heterogeneous" : "symmetric";
}

SceneMode scene_mode_from_string(const std::string& s) {
  if (s == "heterogeneous") return SceneMode::heterogeneous;
  if (s == "symmetric") return SceneMode::symmetric;
  throw ConfigError("unknown scene mode '" + s + "' (expected heterogeneous or symmetric)");
}

namespace {

constexpr int kSceneAttempts = 500;

void check_config(const SceneConfig& c) {
  if (c.size.width < 2 || c.size.height < 2) {
    throw ConfigError("scene size must be at least 2x2");
  }
  if (!(c.noise >= 0.0)) throw ConfigError("noise must be nonnegative");
  if (!(c.contrast > 2.0 * c.noise)) {
    throw ConfigError("contrast must exceed twice the noise amplitude");
  }
  if (c.min_lines < 1 || c.max_lines < c.min_lines) {
    throw ConfigError("line count range must satisfy 1 <= min <= max");
  }
  if (!(c.min_region_frac > 0.0 && c.min_region_frac < 0.5)) {
    throw ConfigError("min region fraction must lie in (0, 0.5)");
  }
  if (!(c.primary_boost >= 1.0)) throw ConfigError("primary boost must be >= 1");
  if (!(c.max_gt_overlap > 0.0 && c.max_gt_overlap <= 1.0)) {
    throw ConfigError("max gt overlap must lie in (0, 1]");
  }
  if (c.mode == SceneMode::heterogeneous) {
    // Worst case tone budget: max_lines bands, one step boosted, plus noise
    // headroom on both ends, must fit into [0, 1].
    const double step = c.contrast + 2.0 * c.noise;
    double total = c.max_lines * step;
    if (c.max_lines >= 2) total += (c.primary_boost - 1.0) * step;
    if (total + 2.0 * c.noise > 1.0) {
      std::ostringstream os;
      os << "tone budget exceeds [0,1]: " << c.max_lines << " lines at contrast "
         << c.contrast << ", noise " << c.noise << ", primary boost "
         << c.primary_boost << " need " << total + 2.0 * c.noise;
      throw ConfigError(os.str());
    }
  } else {
    if (c.noise > 0.1) {
      throw ConfigError("symmetric mode supports noise amplitude up to 0.1");
    }
  }
}

/// Chord of the rectangle on the infinite line {p : dot(p, n) = u} with
/// direction d (unit, perpendicular to n). Returns false when the chord is
/// degenerate or clips to (almost) nothing.
bool chord_through(const ImageSize& size, Vec2 d, Vec2 n, double u, Line& out) {
  const Vec2 p0{u * n.x, u * n.y};
  double t_lo = -1e18, t_hi = 1e18;
  auto clip_axis = [&](double origin, double dir, double limit) {
    if (std::abs(dir) < 1e-15) {
      return origin >= -1e-12 && origin <= limit + 1e-12;
    }
    double a = (0.0 - origin) / dir;
    double b = (limit - origin) / dir;
    if (a > b) std::swap(a, b);
    t_lo = std::max(t_lo, a);
    t_hi = std::min(t_hi, b);
    return true;
  };
  if (!clip_axis(p0.x, d.x, size.width)) return false;
  if (!clip_axis(p0.y, d.y, size.height)) return false;
  if (t_hi - t_lo < 1e-6) return false;
  const Vec2 a = nearest_boundary_point(p0 + t_lo * d, size);
  const Vec2 b = nearest_boundary_point(p0 + t_hi * d, size);
  out = Line{a.x, a.y, b.x, b.y};
  return !validate_line(out, size).has_value();
}

bool regions_large_enough(const Line& line, const ImageSize& size, double frac) {
  const double total = static_cast<double>(size.width) * size.height;
  try {
    const auto [r1, r2] = split_regions(line, size);
    return r1.area() >= frac * total && r2.area() >= frac * total;
  } catch (const DegenerateLineError&) {
    return false;
  }
}

struct SceneLines {
  std::vector<Line> lines;  // ordered along the shared normal
  Vec2 n{0.0, 0.0};         // unit normal (tone axis)
  std::vector<double> offsets;
};

/// Draws k parallel chords (k >= 1) satisfying the area and overlap limits.
bool sample_lines(Rng& rng, const SceneConfig& c, int k, SceneLines& out) {
  const double theta = rng.uniform(0.0, 3.14159265358979323846);
  const Vec2 d{std::cos(theta), std::sin(theta)};
  const Vec2 n{-d.y, d.x};
  const double w = c.size.width;
  const double h = c.size.height;
  double u_lo = 1e18, u_hi = -1e18;
  const Vec2 corners[4] = {{0.0, 0.0}, {w, 0.0}, {w, h}, {0.0, h}};
  for (const Vec2& corner : corners) {
    const double u = dot(corner, n);
    u_lo = std::min(u_lo, u);
    u_hi = std::max(u_hi, u);
  }
  std::vector<double> offsets;
  std::vector<Line> lines;
  for (int j = 0; j < k; ++j) {
    const double u = rng.uniform(u_lo, u_hi);
    Line line;
    if (!chord_through(c.size, d, n, u, line)) return false;
    if (!regions_large_enough(line, c.size, c.min_region_frac)) return false;
    offsets.push_back(u);
    lines.push_back(line);
  }
  // Order bands along the normal so tones can increase monotonically.
  std::vector<std::size_t> idx(offsets.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(),
            [&offsets](std::size_t a, std::size_t b) { return offsets[a] < offsets[b]; });
  SceneLines result;
  result.n = n;
  for (std::size_t i : idx) {
    result.offsets.push_back(offsets[i]);
    result.lines.push_back(lines[i]);
  }
  for (std::size_t i = 0; i + 1 < result.offsets.size(); ++i) {
    if (result.offsets[i + 1] - result.offsets[i] < 1e-6) return false;
  }
  for (std::size_t i = 0; i < result.lines.size(); ++i) {
    for (std::size_t j = i + 1; j < result.lines.size(); ++j) {
      if (miou(result.lines[i], result.lines[j], c.size) > c.max_gt_overlap) return false;
    }
  }
  out = std::move(result);
  return true;
}

SyntheticScene make_heterogeneous(Rng& rng, const SceneConfig& c) {
  const int k = c.min_lines + rng.uniform_int(c.max_lines - c.min_lines + 1);
  SceneLines sl;
  int attempt = 0;
  while (!sample_lines(rng, c, k, sl)) {
    if (++attempt >= kSceneAttempts) {
      throw ConfigError("could not sample a scene satisfying the region constraints; "
                        "relax min_region_frac / max_gt_overlap or reduce line count");
    }
  }
  const int primary = rng.uniform_int(k);
  // Tone staircase: each band adds one step; the primary line's step is
  // boosted so the dominant boundary has the strongest contrast.
  const double base_step = c.contrast + 2.0 * c.noise;
  std::vector<double> steps(static_cast<std::size_t>(k), base_step);
  if (k >= 2) steps[static_cast<std::size_t>(primary)] *= c.primary_boost;
  const double total = std::accumulate(steps.begin(), steps.end(), 0.0);
  const double head = 1.0 - 2.0 * c.noise - total;
  if (head < 0.0) {
    throw ConfigError("tone budget exceeded for sampled scene");  // guarded by check_config
  }
  const double t0 = c.noise + rng.uniform() * head;

  SyntheticScene scene;
  scene.mode = SceneMode::heterogeneous;
  scene.image = FeatureGrid::zeros(c.size.height, c.size.width, 3);
  for (int y = 0; y < c.size.height; ++y) {
    for (int x = 0; x < c.size.width; ++x) {
      const Vec2 p{x + 0.5, y + 0.5};
      const double u = dot(p, sl.n);
      double tone = t0;
      for (int j = 0; j < k; ++j) {
        if (sl.offsets[static_cast<std::size_t>(j)] < u) {
          tone += steps[static_cast<std::size_t>(j)];
        }
      }
      for (int ch = 0; ch < 3; ++ch) {
        const double eps = c.noise > 0.0 ? rng.uniform(-c.noise, c.noise) : 0.0;
        // Intensities are kept exactly float32-representable so in-memory
        // scenes and PFM files carry identical values: results do not depend
        // on whether a pipeline stage ran in-process or through files.
        scene.image.at(y, x, ch) = static_cast<double>(static_cast<float>(tone + eps));
      }
    }
  }
  for (int j = 0; j < k; ++j) {
    scene.gts.push_back({sl.lines[static_cast<std::size_t>(j)], j == primary});
  }
  return scene;
}

SyntheticScene make_symmetric(Rng& rng, const SceneConfig& c) {
  Line line;
  int attempt = 0;
  for (;; ++attempt) {
    if (attempt >= kSceneAttempts) {
      throw ConfigError("could not sample a symmetric scene line; relax min_region_frac");
    }
    SceneLines sl;
    if (!sample_lines(rng, c, 1, sl)) continue;
    line = sl.lines[0];
    break;
  }
  const Vec2 s = line.start();
  Vec2 d = line.end() - line.start();
  const double len = std::sqrt(dot(d, d));
  d = (1.0 / len) * d;
  const Vec2 n{-d.y, d.x};

  // Smooth separable texture in (unsigned distance, along-line) coordinates;
  // the unsigned distance makes the field exactly mirror-symmetric.
  constexpr int kWaves = 3;
  double amp[kWaves], freq_d[kWaves], freq_t[kWaves], phase_d[kWaves], phase_t[kWaves];
  double amp_total = 0.0;
  for (int m = 0; m < kWaves; ++m) {
    amp[m] = rng.uniform(0.5, 1.0);
    amp_total += amp[m];
    freq_d[m] = rng.uniform(0.10, 0.35);
    freq_t[m] = rng.uniform(0.10, 0.35);
    phase_d[m] = rng.uniform(0.0, 6.283185307179586);
    phase_t[m] = rng.uniform(0.0, 6.283185307179586);
  }
  const double scale = 0.35 / amp_total;
  for (int m = 0; m < kWaves; ++m) amp[m] *= scale;

  SyntheticScene scene;
  scene.mode = SceneMode::symmetric;
  scene.image = FeatureGrid::zeros(c.size.height, c.size.width, 3);
  for (int y = 0; y < c.size.height; ++y) {
    for (int x = 0; x < c.size.width; ++x) {
      const Vec2 p{x + 0.5, y + 0.5};
      const Vec2 rel = p - s;
      const double across = std::abs(dot(rel, n));
      const double along = dot(rel, d);
      double value = 0.5;
      for (int m = 0; m < kWaves; ++m) {
        value += amp[m] * std::cos(freq_d[m] * across + phase_d[m]) *
                 std::cos(freq_t[m] * along + phase_t[m]);
      }
      for (int ch = 0; ch < 3; ++ch) {
        const double eps = c.noise > 0.0 ? rng.uniform(-c.noise, c.noise) : 0.0;
        // float32-representable for file/in-memory parity (see make_heterogeneous).
        scene.image.at(y, x, ch) =
            static_cast<double>(static_cast<float>(std::clamp(value + eps, 0.0, 1.0)));
      }
    }
  }
  scene.gts.push_back({line, true});
  return scene;
}

}  // namespace

std::vector<SyntheticScene> gen_synthetic(int count, const SceneConfig& config,
                                          std::uint64_t seed) {
  if (count < 0) throw ConfigError("scene count must be nonnegative");
  check_config(config);
  std::vector<SyntheticScene> scenes;
  scenes.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(i)));
    scenes.push_back(config.mode == SceneMode::heterogeneous
                         ? make_heterogeneous(rng, config)
                         : make_symmetric(rng, config));
  }
  return scenes;
}

}  // namespace semline
