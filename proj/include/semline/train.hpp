#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "semline/io.hpp"

namespace semline {

/// Post-detection selection strategy:
///  rm   — reliability ranking + match-removal loop over the head outputs;
///  nms  — greedy overlap suppression baseline;
///  none — keep all survivors, highest score first.
enum class SelectMode { rm, nms, none };

std::string to_string(SelectMode mode);
SelectMode select_mode_from_string(const std::string& s);

/// Every knob of the pipeline. All fields have working defaults; text configs
/// override them via config_from_map.
struct TrainConfig {
  SceneConfig scene;
  int train_count = 500;
  int test_count = 100;
  Topology topo;
  int siamese_hidden = 128;
  double candidate_step = 8.0;
  double positive_threshold = 0.85;  // mIoU rule for positives / correct detections
  int epochs = 20;
  double learning_rate = 0.05;
  int batch_pos = 8;  // positive candidates sampled per scene step
  int batch_neg = 8;
  double lambda = 1.0;  // regression weight in the detector loss
  int stage2_epochs = 40;
  double stage2_learning_rate = 0.05;
  int stage2_pair_batch = 96;  // pair labels sampled per scene step
  int max_detections = 8;
  SelectMode select_mode = SelectMode::rm;
  double nms_threshold = 0.85;
  double tau_lo = 0.50;
  double tau_hi = 1.00;
  double tau_step = 0.005;
  std::uint64_t seed = 1;
};

/// Applies `key=value` overrides onto the defaults. Unknown keys, duplicate
/// handling, and unparsable values raise config errors; the full key list is
/// documented in the README.
TrainConfig config_from_map(const std::map<std::string, std::string>& kv);

/// Candidate lines for one image size plus their per-stage geometry
/// (rescaled line, Gaussian weights, flip plan, pooling strips), shared by
/// every image of that size. Candidates whose pooling strips come out empty
/// at either attended stage are dropped up front — they cannot be scored.
struct CandidateSet {
  ImageSize image{0, 0};
  ImageSize grid3{0, 0}, grid4{0, 0};
  std::vector<Line> lines;  // canonical endpoint order
  std::vector<LineStageGeom> g3, g4;
};

CandidateSet build_candidate_set(const ImageSize& image, const Topology& topo, double step);

/// Supervision for one candidate: one-hot class label, regression target
/// (zero and masked for negatives), and the matched gt index (-1 if none).
struct CandidateLabel {
  ProbPair label;
  LineOffset target;
  int gt = -1;
};

/// A candidate is positive when its best-overlap gt exceeds the threshold;
/// the target is the endpoint difference gt - candidate in canonical order.
std::vector<CandidateLabel> assign_candidate_labels(const std::vector<Line>& candidates,
                                                    const std::vector<Line>& gts,
                                                    const ImageSize& size,
                                                    double positive_threshold);

struct StageOneEpoch {
  double cls = 0.0;  // mean classification cross-entropy per sampled candidate
  double reg = 0.0;  // mean weighted regression loss per sampled candidate
};

struct TrainLog {
  std::vector<StageOneEpoch> stage1;  // entry 0 is the pre-update evaluation pass
  std::vector<double> rank_ce;        // stage-2 mean cross-entropy per epoch
  std::vector<double> match_ce;

  /// Human-readable log block (one line per epoch, no timestamps).
  std::string text() const;
};

struct TrainedModel {
  Checkpoint params;
  TrainLog log;
};

/// Two-stage training: (1) minibatch gradient descent of the detector on
/// labeled candidates — epoch 0 only evaluates; (2) with the detector frozen,
/// cross-entropy training of the ranking and matching heads on pair labels
/// built from the detector's own correct detections. Deterministic in
/// (scenes, config). Non-finite losses raise a training error naming the
/// epoch.
TrainedModel train_toy(const std::vector<SyntheticScene>& scenes, const TrainConfig& config);

/// Selection-independent detection output for one image: survivors of the
/// p > 0.5 rule with their regressed lines, sorted by descending score and
/// capped at max_detections.
struct RawDetections {
  std::vector<Line> lines;
  std::vector<double> scores;
  std::vector<std::vector<double>> features;
  PairwiseMatrix pr, pm;  // head outputs; n = 0 when not requested
};

RawDetections detect_raw(const FeatureGrid& image, const Checkpoint& model,
                         const CandidateSet& cands, const TrainConfig& config,
                         bool with_pairwise);

/// Applies one selection mode to raw survivors. The first returned detection
/// carries the primary flag. The trace is nonempty only in rm mode.
std::pair<std::vector<Detection>, SelectionResult> apply_selection(
    const std::vector<Line>& lines, const std::vector<double>& scores,
    const PairwiseMatrix& pr, const PairwiseMatrix& pm, SelectMode mode,
    double nms_threshold, const ImageSize& size);

/// Full per-image pipeline with the config's selection mode.
std::vector<Detection> detect(const FeatureGrid& image, const Checkpoint& model,
                              const CandidateSet& cands, const TrainConfig& config);

/// Pair-training examples extracted from one scene: features of the raw
/// detections and of the gt lines, plus the pair labels over them. Labels
/// whose gt feature could not be computed (degenerate pooling) are dropped.
struct ScenePairExamples {
  std::vector<std::vector<double>> det_features;
  std::vector<std::vector<double>> gt_features;  // empty vector = unavailable
  std::vector<PairLabel> labels;
};

ScenePairExamples build_scene_pairs(const SyntheticScene& scene, const Checkpoint& model,
                                    const CandidateSet& cands, const TrainConfig& config);

/// Correct-side rates of the two heads on labeled pairs (p on the target side
/// strictly above 0.5), split by task and matching polarity. Rates over zero
/// pairs default to 1.
struct PairAccuracy {
  double ranking = 1.0;
  double match_pos = 1.0;
  double match_neg = 1.0;
  std::size_t ranking_n = 0, match_pos_n = 0, match_neg_n = 0;
};

PairAccuracy pair_accuracy(const std::vector<ScenePairExamples>& data,
                           const SiameseHeadParams& rank, const SiameseHeadParams& match);

/// Metric suite over per-image detection/annotation records (aligned by id):
/// primary-accuracy curve, precision and recall curves, their AUCs, and the
/// primary accuracy at the 0.85 operating threshold.
struct EvalSummary {
  EvalCurve accuracy;
  EvalCurve precision;
  EvalCurve recall;
  double accuracy_at_085 = 0.0;

  /// Key=value text block (images, AUCs, operating-point accuracy).
  std::string text(std::size_t images) const;
};

EvalSummary evaluate_detections(const std::vector<DetectionRecord>& dets,
                                const std::vector<AnnotationRecord>& gts, double tau_lo,
                                double tau_hi, double tau_step);

/// Full-composition gradient check: the loss of one candidate line pushed
/// through trunk, attention, pooling, and both heads on a random 16x16
/// four-channel input, with every parameter tensor randomized and the input
/// itself as the final checked block. `max_coords` of 0 checks every
/// coordinate; otherwise a seeded subsample.
GradCheckReport detector_grad_check(std::uint64_t seed, std::size_t max_coords);

}  // namespace semline
