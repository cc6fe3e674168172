#pragma once

#include <optional>
#include <utility>
#include <vector>

#include "semline/geometry.hpp"
#include "semline/model.hpp"

namespace semline {

/// Dense n×n score matrix; entry (i, j) is a probability about the ordered
/// pair of lines (i, j). The diagonal is unused.
struct PairwiseMatrix {
  int n = 0;
  std::vector<double> v;

  static PairwiseMatrix make(int n);
  double& at(int i, int j) { return v[static_cast<std::size_t>(i) * n + j]; }
  double at(int i, int j) const { return v[static_cast<std::size_t>(i) * n + j]; }
};

/// Evaluates both comparison heads on every ordered pair of features:
/// Pr[i][j] = probability that line i outranks line j,
/// Pm[i][j] = probability that lines i and j mark the same boundary.
std::pair<PairwiseMatrix, PairwiseMatrix> pairwise_scores(
    const std::vector<std::vector<double>>& features, const SiameseHeadParams& rank_head,
    const SiameseHeadParams& match_head);

/// r_i = sum over alive rivals j != i of Pr[i][j], for each i in `alive`
/// (result parallel to `alive`). `alive` must be nonempty with valid indices.
std::vector<double> reliability(const PairwiseMatrix& pr, const std::vector<int>& alive);

struct SelectionStep {
  int selected = -1;
  std::vector<int> removed;  // matched rivals dropped in this round
};

struct SelectionResult {
  std::vector<int> selected;  // in selection order; first is the primary line
  std::vector<SelectionStep> steps;
};

/// Alternating select-and-remove loop: pick the alive line with the highest
/// reliability (ties to the lowest index), retire it as selected, drop every
/// alive rival whose match probability against it exceeds 0.5, and repeat
/// until no line is left.
SelectionResult select_iterate(const PairwiseMatrix& pr, const PairwiseMatrix& pm);

/// Greedy overlap suppression baseline: repeatedly keep the highest-score
/// remaining line (ties to the lowest index) and discard remaining lines
/// whose mIoU against it exceeds overlap_thr. Returns kept indices in
/// keep order.
std::vector<int> nms(const std::vector<Line>& lines, const std::vector<double>& scores,
                     const ImageSize& size, double overlap_thr);

/// Training target for one ordered feature pair.
struct PairLabel {
  enum class Task { ranking, matching };
  struct Ref {
    bool is_gt = false;  // true: index into the gt list; false: detection list
    int index = 0;
  };
  Task task{};
  Ref a, b;
  ProbPair target;  // one-hot: (1,0) means "a outranks b" / "a matches b"
};

/// Builds supervision pairs from matched detections:
///  ranking — for every detection matched to a ground truth, the pair
///  (gt, detection) with the gt marked more reliable, in both orderings;
///  matching — every ordered pair of distinct detections, positive exactly
///  when both are matched to the same ground truth.
std::vector<PairLabel> build_pair_labels(
    const std::vector<std::pair<Line, std::optional<int>>>& detections,
    const std::vector<Line>& gts);

}  // namespace semline
