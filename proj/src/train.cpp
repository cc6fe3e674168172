#include "semline/train.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "semline/error.hpp"
#include "semline/rng.hpp"

namespace semline {

std::string to_string(SelectMode mode) {
  switch (mode) {
    case SelectMode::rm: return "rm";
    case SelectMode::nms: return "nms";
    case SelectMode::none: return "none";
  }
  throw ConfigError("invalid selection mode value");
}

SelectMode select_mode_from_string(const std::string& s) {
  if (s == "rm") return SelectMode::rm;
  if (s == "nms") return SelectMode::nms;
  if (s == "none") return SelectMode::none;
  throw ConfigError("unknown selection mode '" + s + "' (expected rm, nms, or none)");
}

namespace {

// ---- config parsing --------------------------------------------------------

int parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const long long r = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing characters");
    if (r < std::numeric_limits<int>::min() || r > std::numeric_limits<int>::max()) {
      throw std::out_of_range("out of int range");
    }
    return static_cast<int>(r);
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': cannot parse '" + v + "' as an integer");
  }
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const unsigned long long r = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing characters");
    return static_cast<std::uint64_t>(r);
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': cannot parse '" + v +
                      "' as an unsigned integer");
  }
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double r = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing characters");
    if (!std::isfinite(r)) throw std::invalid_argument("not finite");
    return r;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': cannot parse '" + v + "' as a number");
  }
}

std::array<int, 4> parse_channels(const std::string& key, const std::string& v) {
  std::array<int, 4> out{};
  std::stringstream ss(v);
  std::string item;
  std::size_t i = 0;
  while (std::getline(ss, item, ',')) {
    if (i >= out.size()) throw ConfigError("config key '" + key + "': expected 4 values");
    out[i++] = parse_int(key, item);
  }
  if (i != out.size()) throw ConfigError("config key '" + key + "': expected 4 values");
  return out;
}

void validate_config(const TrainConfig& c) {
  auto require = [](bool ok, const char* msg) {
    if (!ok) throw ConfigError(msg);
  };
  require(c.train_count >= 1, "train_count must be at least 1");
  require(c.test_count >= 0, "test_count must be nonnegative");
  require(c.siamese_hidden >= 1, "siamese_hidden must be at least 1");
  require(c.candidate_step > 0.0, "candidate_step must be positive");
  require(c.positive_threshold > 0.0 && c.positive_threshold < 1.0,
          "positive_threshold must lie in (0, 1)");
  require(c.epochs >= 0, "epochs must be nonnegative");
  require(c.learning_rate > 0.0, "learning_rate must be positive");
  require(c.batch_pos >= 1, "batch_pos must be at least 1");
  require(c.batch_neg >= 1, "batch_neg must be at least 1");
  require(c.lambda >= 0.0, "lambda must be nonnegative");
  require(c.stage2_epochs >= 0, "stage2_epochs must be nonnegative");
  require(c.stage2_learning_rate > 0.0, "stage2_learning_rate must be positive");
  require(c.stage2_pair_batch >= 2, "stage2_pair_batch must be at least 2");
  require(c.max_detections >= 1, "max_detections must be at least 1");
  require(c.nms_threshold > 0.0 && c.nms_threshold <= 1.0,
          "nms_threshold must lie in (0, 1]");
  require(c.tau_lo >= 0.0 && c.tau_hi <= 1.0 && c.tau_lo < c.tau_hi,
          "tau sweep must satisfy 0 <= tau_lo < tau_hi <= 1");
  require(c.tau_step > 0.0, "tau_step must be positive");
}

// ---- batch sampling --------------------------------------------------------

/// `count` draws: without replacement while the pool suffices, then uniform
/// fills (so short pools are oversampled rather than under-filled).
std::vector<int> sample_batch(Rng& rng, const std::vector<int>& ids, int count) {
  std::vector<int> out;
  if (ids.empty() || count <= 0) return out;
  out.reserve(static_cast<std::size_t>(count));
  if (static_cast<int>(ids.size()) >= count) {
    std::vector<int> pool = ids;
    for (int i = 0; i < count; ++i) {
      const int j = i + rng.uniform_int(static_cast<int>(pool.size()) - i);
      std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
      out.push_back(pool[static_cast<std::size_t>(i)]);
    }
  } else {
    out = ids;
    while (static_cast<int>(out.size()) < count) {
      out.push_back(ids[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(ids.size())))]);
    }
  }
  return out;
}

/// Up to `budget` ids: all of them when they fit, else a seeded subsample.
std::vector<int> take_up_to(Rng& rng, const std::vector<int>& ids, int budget) {
  if (static_cast<int>(ids.size()) <= budget) return ids;
  return sample_batch(rng, ids, budget);
}

std::array<double, 4> offset_array(const LineOffset& o) {
  return {o.dx_s, o.dy_s, o.dx_e, o.dy_e};
}

double regression_loss(const LineOffset& offset, const CandidateLabel& lab, double lambda) {
  if (!(lab.label.p > 0.5)) return 0.0;
  const auto d = offset_array(offset);
  const auto t = offset_array(lab.target);
  return lambda * smooth_l1(d, t);
}

void check_finite_loss(double value, const char* stage, int epoch) {
  if (!std::isfinite(value)) {
    std::ostringstream os;
    os << stage << " loss diverged (non-finite) at epoch " << epoch;
    throw TrainingError(os.str());
  }
}

int halved(int v) { return (v + 1) / 2; }

const std::vector<double>& feature_of(const ScenePairExamples& ex, const PairLabel::Ref& r) {
  return r.is_gt ? ex.gt_features[static_cast<std::size_t>(r.index)]
                 : ex.det_features[static_cast<std::size_t>(r.index)];
}

bool label_available(const ScenePairExamples& ex, const PairLabel& lab) {
  return !feature_of(ex, lab.a).empty() && !feature_of(ex, lab.b).empty();
}

}  // namespace

// ---- config ----------------------------------------------------------------

TrainConfig config_from_map(const std::map<std::string, std::string>& kv) {
  TrainConfig c;
  for (const auto& [key, v] : kv) {
    if (key == "width") c.scene.size.width = parse_int(key, v);
    else if (key == "height") c.scene.size.height = parse_int(key, v);
    else if (key == "mode") c.scene.mode = scene_mode_from_string(v);
    else if (key == "contrast") c.scene.contrast = parse_double(key, v);
    else if (key == "noise") c.scene.noise = parse_double(key, v);
    else if (key == "min_lines") c.scene.min_lines = parse_int(key, v);
    else if (key == "max_lines") c.scene.max_lines = parse_int(key, v);
    else if (key == "min_region_frac") c.scene.min_region_frac = parse_double(key, v);
    else if (key == "primary_boost") c.scene.primary_boost = parse_double(key, v);
    else if (key == "max_gt_overlap") c.scene.max_gt_overlap = parse_double(key, v);
    else if (key == "train_count") c.train_count = parse_int(key, v);
    else if (key == "test_count") c.test_count = parse_int(key, v);
    else if (key == "in_channels") c.topo.in_channels = parse_int(key, v);
    else if (key == "stage_channels") c.topo.stage_channels = parse_channels(key, v);
    else if (key == "attention_n") c.topo.attention_n = parse_int(key, v);
    else if (key == "sigma") c.topo.sigma = parse_double(key, v);
    else if (key == "pool_threshold") c.topo.pool_threshold = parse_double(key, v);
    else if (key == "fc_width") c.topo.fc_width = parse_int(key, v);
    else if (key == "attention") c.topo.attention = attention_mode_from_string(v);
    else if (key == "siamese_hidden") c.siamese_hidden = parse_int(key, v);
    else if (key == "candidate_step") c.candidate_step = parse_double(key, v);
    else if (key == "positive_threshold") c.positive_threshold = parse_double(key, v);
    else if (key == "epochs") c.epochs = parse_int(key, v);
    else if (key == "learning_rate") c.learning_rate = parse_double(key, v);
    else if (key == "batch_pos") c.batch_pos = parse_int(key, v);
    else if (key == "batch_neg") c.batch_neg = parse_int(key, v);
    else if (key == "lambda") c.lambda = parse_double(key, v);
    else if (key == "stage2_epochs") c.stage2_epochs = parse_int(key, v);
    else if (key == "stage2_learning_rate") c.stage2_learning_rate = parse_double(key, v);
    else if (key == "stage2_pair_batch") c.stage2_pair_batch = parse_int(key, v);
    else if (key == "max_detections") c.max_detections = parse_int(key, v);
    else if (key == "select_mode") c.select_mode = select_mode_from_string(v);
    else if (key == "nms_threshold") c.nms_threshold = parse_double(key, v);
    else if (key == "tau_lo") c.tau_lo = parse_double(key, v);
    else if (key == "tau_hi") c.tau_hi = parse_double(key, v);
    else if (key == "tau_step") c.tau_step = parse_double(key, v);
    else if (key == "seed") c.seed = parse_u64(key, v);
    else throw ConfigError("unknown config key '" + key + "'");
  }
  validate_config(c);
  return c;
}

// ---- candidates & labels ---------------------------------------------------

CandidateSet build_candidate_set(const ImageSize& image, const Topology& topo, double step) {
  CandidateSet set;
  set.image = image;
  set.grid3 = ImageSize{halved(halved(image.width)), halved(halved(image.height))};
  set.grid4 = set.grid3;  // both attended stages sit after the two 2x pools
  const bool flip = topo.attention == AttentionMode::mirror;
  for (const Line& raw : generate_candidates(image, step)) {
    const Line line = canonical_line(raw, image);
    LineStageGeom g3, g4;
    try {
      g3 = make_line_stage_geom(line, image, set.grid3, topo.sigma, topo.pool_threshold, flip);
      g4 = make_line_stage_geom(line, image, set.grid4, topo.sigma, topo.pool_threshold, flip);
    } catch (const ValidationError&) {
      continue;  // line collapses on the coarse grid
    }
    if (!pools_nonempty(g3) || !pools_nonempty(g4)) continue;
    set.lines.push_back(line);
    set.g3.push_back(std::move(g3));
    set.g4.push_back(std::move(g4));
  }
  if (set.lines.empty()) {
    throw EmptyCandidateError("no candidate line has usable pooling regions at this size");
  }
  return set;
}

std::vector<CandidateLabel> assign_candidate_labels(const std::vector<Line>& candidates,
                                                    const std::vector<Line>& gts,
                                                    const ImageSize& size,
                                                    double positive_threshold) {
  if (!(positive_threshold > 0.0 && positive_threshold < 1.0)) {
    throw ConfigError("positive_threshold must lie in (0, 1)");
  }
  std::vector<CandidateLabel> out;
  out.reserve(candidates.size());
  for (const Line& cand : candidates) {
    CandidateLabel lab;
    lab.label = one_hot(false);
    double best = -1.0;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double m = miou(cand, gts[g], size);
      if (m > best) {
        best = m;
        lab.gt = static_cast<int>(g);
      }
    }
    if (best > positive_threshold) {
      lab.label = one_hot(true);
      const Line c = canonical_line(cand, size);
      const Line g = canonical_line(gts[static_cast<std::size_t>(lab.gt)], size);
      lab.target = {g.x_s - c.x_s, g.y_s - c.y_s, g.x_e - c.x_e, g.y_e - c.y_e};
    } else {
      lab.gt = -1;
    }
    out.push_back(lab);
  }
  return out;
}

// ---- detection -------------------------------------------------------------

namespace {

/// Feature of an arbitrary image line against a ready trunk, or empty when
/// its geometry degenerates at either stage.
std::vector<double> feature_for_line(const DetectorParams& det, const BackboneTrace& trunk,
                                     const Line& image_line, const ImageSize& image,
                                     const ImageSize& grid3, const ImageSize& grid4) {
  const bool flip = det.topo.attention == AttentionMode::mirror;
  try {
    const Line canon = canonical_line(image_line, image);
    const LineStageGeom g3 =
        make_line_stage_geom(canon, image, grid3, det.topo.sigma, det.topo.pool_threshold, flip);
    const LineStageGeom g4 =
        make_line_stage_geom(canon, image, grid4, det.topo.sigma, det.topo.pool_threshold, flip);
    if (!pools_nonempty(g3) || !pools_nonempty(g4)) return {};
    return line_forward_cached(det, trunk, canon, g3, g4).h;
  } catch (const ValidationError&) {
    return {};
  }
}

void check_image(const FeatureGrid& image, const Checkpoint& model, const CandidateSet& cands) {
  if (image.c != model.detector.topo.in_channels) {
    throw DimensionError("image channel count does not match the detector");
  }
  if (image.w != cands.image.width || image.h != cands.image.height) {
    throw DimensionError("image size does not match the candidate set");
  }
}

}  // namespace

RawDetections detect_raw(const FeatureGrid& image, const Checkpoint& model,
                         const CandidateSet& cands, const TrainConfig& config,
                         bool with_pairwise) {
  check_image(image, model, cands);
  const DetectorParams& det = model.detector;
  const BackboneTrace trunk = backbone_forward(det, image);
  if (trunk.stage3().h != cands.grid3.height || trunk.stage3().w != cands.grid3.width ||
      trunk.stage4().h != cands.grid4.height || trunk.stage4().w != cands.grid4.width) {
    throw DimensionError("candidate set grids do not match the trunk stages");
  }

  struct Survivor {
    Line line;
    double score;
    std::vector<double> feature;
  };
  std::vector<Survivor> kept;
  for (std::size_t i = 0; i < cands.lines.size(); ++i) {
    LineTrace trace = line_forward_cached(det, trunk, cands.lines[i], cands.g3[i], cands.g4[i]);
    if (!(trace.prob.p > 0.5)) continue;
    Line refined = cands.lines[i];
    try {
      refined = regress_line(cands.lines[i], trace.offset, cands.image);
    } catch (const ValidationError&) {
      refined = cands.lines[i];  // keep the unregressed candidate
    }
    std::vector<double> feature =
        feature_for_line(det, trunk, refined, cands.image, cands.grid3, cands.grid4);
    if (feature.empty()) feature = trace.h;  // refined line unpoolable: reuse the candidate's
    kept.push_back({refined, trace.prob.p, std::move(feature)});
  }

  std::vector<std::size_t> order(kept.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&kept](std::size_t a, std::size_t b) {
    return kept[a].score > kept[b].score;
  });
  if (static_cast<int>(order.size()) > config.max_detections) {
    order.resize(static_cast<std::size_t>(config.max_detections));
  }

  RawDetections raw;
  for (std::size_t k : order) {
    raw.lines.push_back(kept[k].line);
    raw.scores.push_back(kept[k].score);
    raw.features.push_back(std::move(kept[k].feature));
  }
  if (with_pairwise && !raw.features.empty()) {
    auto [pr, pm] = pairwise_scores(raw.features, model.rank, model.match);
    raw.pr = std::move(pr);
    raw.pm = std::move(pm);
  }
  return raw;
}

std::pair<std::vector<Detection>, SelectionResult> apply_selection(
    const std::vector<Line>& lines, const std::vector<double>& scores,
    const PairwiseMatrix& pr, const PairwiseMatrix& pm, SelectMode mode,
    double nms_threshold, const ImageSize& size) {
  if (lines.size() != scores.size()) {
    throw DimensionError("detection lines and scores differ in length");
  }
  std::vector<Detection> dets;
  SelectionResult trace;
  if (lines.empty()) return {dets, trace};

  std::vector<int> keep;
  const int n = static_cast<int>(lines.size());
  switch (mode) {
    case SelectMode::rm: {
      if (pr.n != n || pm.n != n) {
        throw DimensionError("pairwise matrices do not match the detection count");
      }
      trace = select_iterate(pr, pm);
      keep = trace.selected;
      break;
    }
    case SelectMode::nms:
      keep = nms(lines, scores, size, nms_threshold);
      break;
    case SelectMode::none: {
      keep.resize(static_cast<std::size_t>(n));
      std::iota(keep.begin(), keep.end(), 0);
      std::stable_sort(keep.begin(), keep.end(),
                       [&scores](int a, int b) {
                         return scores[static_cast<std::size_t>(a)] >
                                scores[static_cast<std::size_t>(b)];
                       });
      break;
    }
  }
  for (std::size_t k = 0; k < keep.size(); ++k) {
    const auto i = static_cast<std::size_t>(keep[k]);
    dets.push_back({lines[i], scores[i], k == 0});
  }
  return {dets, trace};
}

std::vector<Detection> detect(const FeatureGrid& image, const Checkpoint& model,
                              const CandidateSet& cands, const TrainConfig& config) {
  const RawDetections raw =
      detect_raw(image, model, cands, config, config.select_mode == SelectMode::rm);
  return apply_selection(raw.lines, raw.scores, raw.pr, raw.pm, config.select_mode,
                         config.nms_threshold, cands.image)
      .first;
}

// ---- pair examples ---------------------------------------------------------

ScenePairExamples build_scene_pairs(const SyntheticScene& scene, const Checkpoint& model,
                                    const CandidateSet& cands, const TrainConfig& config) {
  RawDetections raw = detect_raw(scene.image, model, cands, config, false);

  std::vector<Line> gt_lines;
  gt_lines.reserve(scene.gts.size());
  for (const GtLine& g : scene.gts) gt_lines.push_back(g.line);

  std::vector<std::pair<Line, std::optional<int>>> dets;
  for (const Line& line : raw.lines) {
    std::optional<int> matched;
    double best = -1.0;
    for (std::size_t g = 0; g < gt_lines.size(); ++g) {
      const double m = miou(line, gt_lines[g], cands.image);
      if (m > best) {
        best = m;
        matched = static_cast<int>(g);
      }
    }
    if (!(best > config.positive_threshold)) matched.reset();
    dets.emplace_back(line, matched);
  }

  ScenePairExamples ex;
  ex.det_features = std::move(raw.features);
  const BackboneTrace trunk = backbone_forward(model.detector, scene.image);
  for (const Line& g : gt_lines) {
    ex.gt_features.push_back(feature_for_line(model.detector, trunk, g, cands.image,
                                              cands.grid3, cands.grid4));
  }
  for (PairLabel& lab : build_pair_labels(dets, gt_lines)) {
    if (label_available(ex, lab)) ex.labels.push_back(lab);
  }
  return ex;
}

PairAccuracy pair_accuracy(const std::vector<ScenePairExamples>& data,
                           const SiameseHeadParams& rank, const SiameseHeadParams& match) {
  std::size_t rank_ok = 0, pos_ok = 0, neg_ok = 0;
  PairAccuracy acc;
  for (const ScenePairExamples& ex : data) {
    for (const PairLabel& lab : ex.labels) {
      const bool is_rank = lab.task == PairLabel::Task::ranking;
      const ProbPair prob = siamese_forward(is_rank ? rank : match, feature_of(ex, lab.a),
                                            feature_of(ex, lab.b), nullptr);
      const bool correct = lab.target.p > 0.5 ? prob.p > 0.5 : prob.p < 0.5;
      if (is_rank) {
        ++acc.ranking_n;
        rank_ok += correct;
      } else if (lab.target.p > 0.5) {
        ++acc.match_pos_n;
        pos_ok += correct;
      } else {
        ++acc.match_neg_n;
        neg_ok += correct;
      }
    }
  }
  if (acc.ranking_n) acc.ranking = static_cast<double>(rank_ok) / acc.ranking_n;
  if (acc.match_pos_n) acc.match_pos = static_cast<double>(pos_ok) / acc.match_pos_n;
  if (acc.match_neg_n) acc.match_neg = static_cast<double>(neg_ok) / acc.match_neg_n;
  return acc;
}

// ---- training --------------------------------------------------------------

TrainedModel train_toy(const std::vector<SyntheticScene>& scenes, const TrainConfig& config) {
  validate_config(config);
  if (scenes.empty()) throw ValidationError("training requires at least one scene");
  for (const SyntheticScene& s : scenes) {
    if (s.image.w != config.scene.size.width || s.image.h != config.scene.size.height) {
      throw DimensionError("scene image size does not match the configured size");
    }
    if (s.image.c != config.topo.in_channels) {
      throw DimensionError("scene channel count does not match the detector input");
    }
  }

  TrainedModel out;
  Checkpoint& model = out.params;
  model.detector = make_detector(config.topo, config.seed);
  model.rank = make_siamese(config.topo.fc_width, config.siamese_hidden,
                            mix_seed(config.seed, 0x72616e6bULL));
  model.match = make_siamese(config.topo.fc_width, config.siamese_hidden,
                             mix_seed(config.seed, 0x6d617463ULL));

  const CandidateSet cands =
      build_candidate_set(config.scene.size, config.topo, config.candidate_step);

  // Per-scene candidate supervision (candidates and gts are fixed).
  std::vector<std::vector<CandidateLabel>> labels;
  std::vector<std::vector<int>> pos_ids(scenes.size()), neg_ids(scenes.size());
  labels.reserve(scenes.size());
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    std::vector<Line> gts;
    for (const GtLine& g : scenes[s].gts) gts.push_back(g.line);
    labels.push_back(
        assign_candidate_labels(cands.lines, gts, cands.image, config.positive_threshold));
    for (std::size_t i = 0; i < labels[s].size(); ++i) {
      (labels[s][i].label.p > 0.5 ? pos_ids[s] : neg_ids[s]).push_back(static_cast<int>(i));
    }
  }

  // Stage 1: detector training. Epoch 0 evaluates without updating.
  Rng rng1(mix_seed(config.seed, 0x73746731ULL));
  const int c3 = config.topo.stage_channels[2];
  const int c4 = config.topo.stage_channels[3];
  for (int epoch = 0; epoch <= config.epochs; ++epoch) {
    const bool update = epoch > 0;
    double cls_sum = 0.0, reg_sum = 0.0;
    std::size_t count = 0;
    for (std::size_t s = 0; s < scenes.size(); ++s) {
      std::vector<int> batch;
      if (pos_ids[s].empty()) {
        batch = sample_batch(rng1, neg_ids[s], config.batch_pos + config.batch_neg);
      } else {
        batch = sample_batch(rng1, pos_ids[s], config.batch_pos);
        const auto negs = sample_batch(rng1, neg_ids[s], config.batch_neg);
        batch.insert(batch.end(), negs.begin(), negs.end());
      }
      if (batch.empty()) continue;

      const BackboneTrace trunk = backbone_forward(model.detector, scenes[s].image);
      DetectorParams grads = zeros_like(model.detector);
      FeatureGrid d3 = FeatureGrid::zeros(cands.grid3.height, cands.grid3.width, c3);
      FeatureGrid d4 = FeatureGrid::zeros(cands.grid4.height, cands.grid4.width, c4);
      for (const int idx : batch) {
        const auto i = static_cast<std::size_t>(idx);
        const LineTrace trace =
            line_forward_cached(model.detector, trunk, cands.lines[i], cands.g3[i], cands.g4[i]);
        const CandidateLabel& lab = labels[s][i];
        cls_sum += cross_entropy(trace.prob, lab.label);
        reg_sum += regression_loss(trace.offset, lab, config.lambda);
        ++count;
        if (update) {
          ProbPair dprob;
          LineOffset doffset;
          detector_loss_backward(trace.prob, trace.offset, lab.label, lab.target,
                                 config.lambda, dprob, doffset);
          line_backward_cached(model.detector, trunk, cands.g3[i], cands.g4[i], trace, dprob,
                               doffset, d3, d4, grads);
        }
      }
      if (update) {
        backbone_backward(model.detector, trunk, d3, d4, grads, nullptr);
        axpy_params(model.detector, grads,
                    -config.learning_rate / static_cast<double>(batch.size()));
      }
    }
    check_finite_loss(cls_sum + reg_sum, "stage 1", epoch);
    const double denom = count ? static_cast<double>(count) : 1.0;
    out.log.stage1.push_back({cls_sum / denom, reg_sum / denom});
  }

  // Stage 2: the detector is frozen; train the two comparison heads on pair
  // labels built from its own correct detections.
  std::vector<ScenePairExamples> pairs;
  pairs.reserve(scenes.size());
  std::vector<std::vector<int>> rank_ids(scenes.size()), mpos_ids(scenes.size()),
      mneg_ids(scenes.size());
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    pairs.push_back(build_scene_pairs(scenes[s], model, cands, config));
    for (std::size_t l = 0; l < pairs[s].labels.size(); ++l) {
      const PairLabel& lab = pairs[s].labels[l];
      if (lab.task == PairLabel::Task::ranking) {
        rank_ids[s].push_back(static_cast<int>(l));
      } else {
        (lab.target.p > 0.5 ? mpos_ids[s] : mneg_ids[s]).push_back(static_cast<int>(l));
      }
    }
  }

  Rng rng2(mix_seed(config.seed, 0x73746732ULL));
  const int half = std::max(1, config.stage2_pair_batch / 2);
  for (int epoch = 1; epoch <= config.stage2_epochs; ++epoch) {
    double rank_sum = 0.0, match_sum = 0.0;
    std::size_t rank_count = 0, match_count = 0;
    for (std::size_t s = 0; s < scenes.size(); ++s) {
      const ScenePairExamples& ex = pairs[s];
      const auto rank_batch = take_up_to(rng2, rank_ids[s], config.stage2_pair_batch);
      // Matching batches are balanced: the scarce polarity is oversampled.
      auto match_batch = sample_batch(rng2, mpos_ids[s], mpos_ids[s].empty() ? 0 : half);
      const auto negs = sample_batch(rng2, mneg_ids[s], mneg_ids[s].empty() ? 0 : half);
      match_batch.insert(match_batch.end(), negs.begin(), negs.end());

      for (const bool is_rank : {true, false}) {
        const auto& batch = is_rank ? rank_batch : match_batch;
        if (batch.empty()) continue;
        SiameseHeadParams& head = is_rank ? model.rank : model.match;
        SiameseHeadParams grads = siamese_zeros_like(head);
        for (const int l : batch) {
          const PairLabel& lab = ex.labels[static_cast<std::size_t>(l)];
          SiameseTrace trace;
          const ProbPair prob =
              siamese_forward(head, feature_of(ex, lab.a), feature_of(ex, lab.b), &trace);
          const double ce = cross_entropy(prob, lab.target);
          (is_rank ? rank_sum : match_sum) += ce;
          ++(is_rank ? rank_count : match_count);
          double dp = 0.0, dq = 0.0;
          cross_entropy_backward(prob, lab.target, dp, dq);
          siamese_backward(head, trace, ProbPair{dp, dq}, grads);
        }
        siamese_axpy(head, grads,
                     -config.stage2_learning_rate / static_cast<double>(batch.size()));
      }
    }
    check_finite_loss(rank_sum + match_sum, "stage 2", epoch);
    out.log.rank_ce.push_back(rank_count ? rank_sum / static_cast<double>(rank_count) : 0.0);
    out.log.match_ce.push_back(match_count ? match_sum / static_cast<double>(match_count) : 0.0);
  }

  return out;
}

std::string TrainLog::text() const {
  std::ostringstream os;
  os << std::fixed << std::setprecision(6);
  for (std::size_t e = 0; e < stage1.size(); ++e) {
    os << "stage1 epoch " << e << " cls " << stage1[e].cls << " reg " << stage1[e].reg
       << "\n";
  }
  for (std::size_t e = 0; e < rank_ce.size(); ++e) {
    os << "stage2 epoch " << e + 1 << " rank " << rank_ce[e] << " match " << match_ce[e]
       << "\n";
  }
  return os.str();
}

// ---- evaluation ------------------------------------------------------------

EvalSummary evaluate_detections(const std::vector<DetectionRecord>& dets,
                                const std::vector<AnnotationRecord>& gts, double tau_lo,
                                double tau_hi, double tau_step) {
  std::map<std::string, const DetectionRecord*> by_id;
  for (const DetectionRecord& d : dets) {
    if (!by_id.emplace(d.id, &d).second) {
      throw ValidationError("duplicate detection record id '" + d.id + "'");
    }
  }
  if (by_id.size() != gts.size()) {
    throw ValidationError("detection and annotation files cover different image sets");
  }

  std::vector<std::optional<Line>> primary_preds;
  std::vector<Line> primary_gts;
  std::vector<std::vector<Line>> pred_sets, gt_sets;
  std::vector<ImageSize> sizes;
  for (const AnnotationRecord& gt : gts) {
    const auto it = by_id.find(gt.id);
    if (it == by_id.end()) {
      throw ValidationError("no detection record for image '" + gt.id + "'");
    }
    const DetectionRecord& det = *it->second;
    if (det.size.width != gt.size.width || det.size.height != gt.size.height) {
      throw ValidationError("image '" + gt.id + "' has mismatched sizes across files");
    }

    std::optional<Line> primary;
    std::vector<Line> preds;
    for (const Detection& d : det.detections) {
      preds.push_back(d.line);
      if (d.primary) {
        if (primary) throw ValidationError("image '" + gt.id + "' has two primary detections");
        primary = d.line;
      }
    }
    if (!det.detections.empty() && !primary) {
      throw ValidationError("image '" + gt.id + "' has detections but no primary flag");
    }

    std::optional<Line> gt_primary;
    std::vector<Line> gt_lines;
    for (const GtLine& g : gt.lines) {
      gt_lines.push_back(g.line);
      if (g.primary) gt_primary = g.line;
    }
    if (!gt_primary) throw ValidationError("image '" + gt.id + "' has no primary annotation");

    primary_preds.push_back(primary);
    primary_gts.push_back(*gt_primary);
    pred_sets.push_back(std::move(preds));
    gt_sets.push_back(std::move(gt_lines));
    sizes.push_back(gt.size);
  }

  EvalSummary summary;
  summary.accuracy = curve_and_auc(
      [&](double tau) { return primary_accuracy(primary_preds, primary_gts, sizes, tau); },
      tau_lo, tau_hi, tau_step);
  summary.precision = curve_and_auc(
      [&](double tau) { return precision_recall(pred_sets, gt_sets, sizes, tau).first; },
      tau_lo, tau_hi, tau_step);
  summary.recall = curve_and_auc(
      [&](double tau) { return precision_recall(pred_sets, gt_sets, sizes, tau).second; },
      tau_lo, tau_hi, tau_step);
  summary.accuracy_at_085 = primary_accuracy(primary_preds, primary_gts, sizes, 0.85);
  return summary;
}

std::string EvalSummary::text(std::size_t images) const {
  std::ostringstream os;
  os << "images=" << images << "\n";
  os << std::fixed << std::setprecision(6);
  os << "auc_accuracy=" << accuracy.auc << "\n";
  os << "auc_precision=" << precision.auc << "\n";
  os << "auc_recall=" << recall.auc << "\n";
  os << "accuracy_tau085=" << accuracy_at_085 << "\n";
  if (!accuracy.taus.empty()) {
    os << "tau_lo=" << accuracy.taus.front() << "\n";
    os << "tau_hi=" << accuracy.taus.back() << "\n";
  }
  os << "empty_denominator_value=1\n";
  return os.str();
}

// ---- gradient verification --------------------------------------------------

GradCheckReport detector_grad_check(std::uint64_t seed, std::size_t max_coords) {
  Topology topo;
  topo.in_channels = 4;
  const ImageSize image{16, 16};

  DetectorParams det = make_detector(topo, seed);
  Rng rng(mix_seed(seed, 0x67636865ULL));
  init_uniform(det.cls.w, det.cls.in, rng);
  init_uniform(det.cls.b, det.cls.in, rng);
  init_uniform(det.reg.w, det.reg.in, rng);
  init_uniform(det.reg.b, det.reg.in, rng);

  FeatureGrid input = FeatureGrid::zeros(image.height, image.width, topo.in_channels);
  for (double& v : input.v) v = rng.uniform();

  const ImageSize grid{halved(halved(image.width)), halved(halved(image.height))};
  const bool flip = topo.attention == AttentionMode::mirror;
  std::vector<Line> usable;
  std::vector<LineStageGeom> geoms3, geoms4;
  for (const Line& raw : generate_candidates(image, 4.0)) {
    const Line line = canonical_line(raw, image);
    try {
      LineStageGeom g3 =
          make_line_stage_geom(line, image, grid, topo.sigma, topo.pool_threshold, flip);
      LineStageGeom g4 =
          make_line_stage_geom(line, image, grid, topo.sigma, topo.pool_threshold, flip);
      if (!pools_nonempty(g3) || !pools_nonempty(g4)) continue;
      usable.push_back(line);
      geoms3.push_back(std::move(g3));
      geoms4.push_back(std::move(g4));
    } catch (const ValidationError&) {
    }
  }
  if (usable.empty()) throw ValidationError("no usable line for the gradient check");
  const auto pick = static_cast<std::size_t>(rng.uniform_int(static_cast<int>(usable.size())));
  const Line line = usable[pick];
  const LineStageGeom& g3 = geoms3[pick];
  const LineStageGeom& g4 = geoms4[pick];

  const ProbPair label = one_hot(true);
  const LineOffset target{rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0),
                          rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0)};
  const double lambda = 1.0;

  const auto objective = [&]() {
    const BackboneTrace trunk = backbone_forward(det, input);
    const LineTrace trace = line_forward_cached(det, trunk, line, g3, g4);
    return detector_loss(trace.prob, trace.offset, label, target, lambda);
  };

  const BackboneTrace trunk = backbone_forward(det, input);
  const LineTrace trace = line_forward_cached(det, trunk, line, g3, g4);
  DetectorParams grads = zeros_like(det);
  FeatureGrid d3 = FeatureGrid::zeros(grid.height, grid.width, topo.stage_channels[2]);
  FeatureGrid d4 = FeatureGrid::zeros(grid.height, grid.width, topo.stage_channels[3]);
  ProbPair dprob;
  LineOffset doffset;
  detector_loss_backward(trace.prob, trace.offset, label, target, lambda, dprob, doffset);
  line_backward_cached(det, trunk, g3, g4, trace, dprob, doffset, d3, d4, grads);
  FeatureGrid dinput = FeatureGrid::zeros(input.h, input.w, input.c);
  backbone_backward(det, trunk, d3, d4, grads, &dinput);

  std::vector<double> analytic = flatten(param_views(grads));
  analytic.insert(analytic.end(), dinput.v.begin(), dinput.v.end());
  auto spans = param_spans(det);
  spans.emplace_back(input.v);
  return grad_check(objective, spans, analytic, 1e-4, max_coords, seed);
}

}  // namespace semline
