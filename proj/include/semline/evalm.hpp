#pragma once

#include <functional>
#include <optional>
#include <ostream>
#include <utility>
#include <vector>

#include "semline/geometry.hpp"

namespace semline {

/// One detected line with its classification score; `primary` marks the
/// line selected first for the image (exactly one per nonempty set).
struct Detection {
  Line line;
  double score = 0.0;
  bool primary = false;
};

/// Fraction of images whose predicted primary line overlaps the ground-truth
/// primary with mIoU above tau; images without a prediction count as misses.
double primary_accuracy(const std::vector<std::optional<Line>>& preds,
                        const std::vector<Line>& gts,
                        const std::vector<ImageSize>& sizes, double tau);

/// Per-image sufficient statistics of the greedy one-to-one matching between
/// predicted and ground-truth lines: the overlap values of matched pairs
/// (pairs visited in descending mIoU; a pair matches when both sides are
/// still free) plus the two set sizes. A matched pair survives threshold tau
/// exactly when its recorded overlap exceeds tau, so one pass serves every
/// threshold in a sweep.
struct MatchStats {
  std::vector<double> matched;  // mIoU of each greedy match, descending
  std::size_t n_pred = 0;
  std::size_t n_gt = 0;
};

MatchStats greedy_match_stats(const std::vector<Line>& preds,
                              const std::vector<Line>& gts, const ImageSize& size);

/// Aggregated precision and recall at one threshold: greedy matching per
/// image, N_l / N_e / N_m summed over images, precision = N_l/(N_l+N_e),
/// recall = N_l/(N_l+N_m); an empty denominator yields 1 by convention.
std::pair<double, double> precision_recall(const std::vector<std::vector<Line>>& preds,
                                           const std::vector<std::vector<Line>>& gts,
                                           const std::vector<ImageSize>& sizes,
                                           double tau);

/// A metric sampled over a threshold sweep with its area-under-curve summary.
struct EvalCurve {
  std::vector<double> taus;
  std::vector<double> values;
  double auc = 0.0;  // percent of the swept range
};

/// Samples `metric` at tau_lo, tau_lo+step, ..., tau_hi and integrates by
/// trapezoid; auc = 100 * integral / swept width (the constant-1 metric
/// scores exactly 100).
EvalCurve curve_and_auc(const std::function<double(double)>& metric, double tau_lo,
                        double tau_hi, double step);

/// CSV emission: header `tau,accuracy`, rows in 6-decimal fixed point.
void write_accuracy_csv(std::ostream& os, const EvalCurve& curve);

/// CSV emission: header `tau,precision,recall`; both curves share taus.
void write_pr_csv(std::ostream& os, const EvalCurve& precision, const EvalCurve& recall);

}  // namespace semline
