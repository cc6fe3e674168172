#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "semline/geometry.hpp"
#include "semline/grid.hpp"

namespace semline {

/// The two reasons a line is semantic in generated scenes: the regions on the
/// two sides differ (heterogeneous) or the scene mirrors across the line
/// (symmetric).
enum class SceneMode { heterogeneous, symmetric };

std::string to_string(SceneMode mode);
SceneMode scene_mode_from_string(const std::string& s);

struct GtLine {
  Line line;
  bool primary = false;
};

struct SceneConfig {
  ImageSize size{64, 64};
  SceneMode mode = SceneMode::heterogeneous;
  double contrast = 0.14;  // minimum mean intensity gap across each gt line
  double noise = 0.01;     // uniform per-pixel noise amplitude
  int min_lines = 1;       // heterogeneous only; symmetric scenes have one line
  int max_lines = 3;
  double min_region_frac = 0.15;  // each side of each gt covers at least this
  double primary_boost = 2.8;     // extra tone step across the primary line
  double max_gt_overlap = 0.70;   // pairwise mIoU cap between gt lines
};

/// One generated image with its ground truth.
struct SyntheticScene {
  FeatureGrid image;  // H×W×3, intensities in [0,1]
  std::vector<GtLine> gts;
  SceneMode mode = SceneMode::heterogeneous;
};

/// Deterministic scene generator: scene i depends only on (seed, i) and the
/// config. Heterogeneous scenes stack parallel tone bands so every gt line
/// separates regions whose mean intensities differ by at least `contrast`
/// (exactly `contrast` for single-line noise-free scenes); symmetric scenes
/// modulate a smooth texture by the unsigned distance to the line so the
/// field mirrors across it. Throws ConfigError when the constraints are
/// unsatisfiable.
std::vector<SyntheticScene> gen_synthetic(int count, const SceneConfig& config,
                                          std::uint64_t seed);

}  // namespace semline
