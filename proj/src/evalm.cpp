#include "semline/evalm.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>

#include "semline/error.hpp"

namespace semline {

double primary_accuracy(const std::vector<std::optional<Line>>& preds,
                        const std::vector<Line>& gts,
                        const std::vector<ImageSize>& sizes, double tau) {
  if (preds.size() != gts.size() || preds.size() != sizes.size()) {
    throw DimensionError("primary_accuracy: per-image lists differ in length");
  }
  if (preds.empty()) throw ValidationError("primary_accuracy: no images");
  if (!(tau >= 0.0 && tau <= 1.0)) throw ConfigError("tau must lie in [0,1]");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (!preds[i]) continue;
    if (miou(*preds[i], gts[i], sizes[i]) > tau) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(preds.size());
}

MatchStats greedy_match_stats(const std::vector<Line>& preds,
                              const std::vector<Line>& gts, const ImageSize& size) {
  MatchStats stats;
  stats.n_pred = preds.size();
  stats.n_gt = gts.size();
  if (preds.empty() || gts.empty()) return stats;
  struct Pair {
    double overlap;
    int p, g;
  };
  std::vector<Pair> pairs;
  pairs.reserve(preds.size() * gts.size());
  for (int p = 0; p < static_cast<int>(preds.size()); ++p) {
    for (int g = 0; g < static_cast<int>(gts.size()); ++g) {
      pairs.push_back({miou(preds[static_cast<std::size_t>(p)],
                            gts[static_cast<std::size_t>(g)], size),
                       p, g});
    }
  }
  std::sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
    if (a.overlap != b.overlap) return a.overlap > b.overlap;
    if (a.p != b.p) return a.p < b.p;
    return a.g < b.g;
  });
  std::vector<bool> p_used(preds.size(), false);
  std::vector<bool> g_used(gts.size(), false);
  for (const Pair& pr : pairs) {
    if (p_used[static_cast<std::size_t>(pr.p)] || g_used[static_cast<std::size_t>(pr.g)]) {
      continue;
    }
    p_used[static_cast<std::size_t>(pr.p)] = true;
    g_used[static_cast<std::size_t>(pr.g)] = true;
    stats.matched.push_back(pr.overlap);
  }
  return stats;
}

std::pair<double, double> precision_recall(const std::vector<std::vector<Line>>& preds,
                                           const std::vector<std::vector<Line>>& gts,
                                           const std::vector<ImageSize>& sizes,
                                           double tau) {
  if (preds.size() != gts.size() || preds.size() != sizes.size()) {
    throw DimensionError("precision_recall: per-image lists differ in length");
  }
  if (!(tau >= 0.0 && tau <= 1.0)) throw ConfigError("tau must lie in [0,1]");
  std::size_t n_l = 0, n_e = 0, n_m = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const MatchStats stats = greedy_match_stats(preds[i], gts[i], sizes[i]);
    std::size_t hits = 0;
    for (double v : stats.matched) {
      if (v > tau) ++hits;
    }
    n_l += hits;
    n_e += stats.n_pred - hits;
    n_m += stats.n_gt - hits;
  }
  const double precision =
      (n_l + n_e) == 0 ? 1.0 : static_cast<double>(n_l) / static_cast<double>(n_l + n_e);
  const double recall =
      (n_l + n_m) == 0 ? 1.0 : static_cast<double>(n_l) / static_cast<double>(n_l + n_m);
  return {precision, recall};
}

EvalCurve curve_and_auc(const std::function<double(double)>& metric, double tau_lo,
                        double tau_hi, double step) {
  if (!(tau_lo < tau_hi)) throw ConfigError("curve: tau_lo must be below tau_hi");
  if (!(step > 0.0)) throw ConfigError("curve: step must be positive");
  const int count = static_cast<int>(std::floor((tau_hi - tau_lo) / step + 1e-9)) + 1;
  EvalCurve curve;
  curve.taus.reserve(static_cast<std::size_t>(count));
  curve.values.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const double t = tau_lo + i * step;
    curve.taus.push_back(t);
    curve.values.push_back(metric(t));
  }
  // Trapezoid over the sampled points; the normalizer is the same sum of
  // sampled widths, so a constant-1 metric integrates to exactly 100.
  double integral = 0.0;
  double width = 0.0;
  for (std::size_t i = 0; i + 1 < curve.taus.size(); ++i) {
    const double dt = curve.taus[i + 1] - curve.taus[i];
    integral += 0.5 * (curve.values[i] + curve.values[i + 1]) * dt;
    width += dt;
  }
  curve.auc = width > 0.0 ? 100.0 * integral / width : 0.0;
  return curve;
}

void write_accuracy_csv(std::ostream& os, const EvalCurve& curve) {
  os << "tau,accuracy\n";
  os << std::fixed << std::setprecision(6);
  for (std::size_t i = 0; i < curve.taus.size(); ++i) {
    os << curve.taus[i] << ',' << curve.values[i] << '\n';
  }
  os.unsetf(std::ios_base::floatfield);
}

void write_pr_csv(std::ostream& os, const EvalCurve& precision, const EvalCurve& recall) {
  if (precision.taus.size() != recall.taus.size()) {
    throw DimensionError("pr curves: tau grids differ");
  }
  os << "tau,precision,recall\n";
  os << std::fixed << std::setprecision(6);
  for (std::size_t i = 0; i < precision.taus.size(); ++i) {
    os << precision.taus[i] << ',' << precision.values[i] << ',' << recall.values[i]
       << '\n';
  }
  os.unsetf(std::ios_base::floatfield);
}

}  // namespace semline
