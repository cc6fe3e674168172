#include "semline/select.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

#include "semline/error.hpp"

namespace semline {

PairwiseMatrix PairwiseMatrix::make(int n) {
  if (n < 0) throw DimensionError("pairwise matrix size must be nonnegative");
  PairwiseMatrix m;
  m.n = n;
  m.v.assign(static_cast<std::size_t>(n) * n, 0.0);
  return m;
}

std::pair<PairwiseMatrix, PairwiseMatrix> pairwise_scores(
    const std::vector<std::vector<double>>& features, const SiameseHeadParams& rank_head,
    const SiameseHeadParams& match_head) {
  if (features.empty()) {
    throw ValidationError("pairwise_scores requires at least one feature");
  }
  const int n = static_cast<int>(features.size());
  PairwiseMatrix pr = PairwiseMatrix::make(n);
  PairwiseMatrix pm = PairwiseMatrix::make(n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (i == j) continue;
      pr.at(i, j) = siamese_forward(rank_head, features[i], features[j], nullptr).p;
      pm.at(i, j) = siamese_forward(match_head, features[i], features[j], nullptr).p;
    }
  }
  return {std::move(pr), std::move(pm)};
}

std::vector<double> reliability(const PairwiseMatrix& pr, const std::vector<int>& alive) {
  if (alive.empty()) throw ValidationError("reliability: alive set is empty");
  for (int i : alive) {
    if (i < 0 || i >= pr.n) {
      std::ostringstream os;
      os << "reliability: index " << i << " out of range for n=" << pr.n;
      throw ValidationError(os.str());
    }
  }
  std::vector<double> r(alive.size(), 0.0);
  for (std::size_t a = 0; a < alive.size(); ++a) {
    const int i = alive[a];
    double acc = 0.0;
    for (int j : alive) {
      if (j != i) acc += pr.at(i, j);
    }
    r[a] = acc;
  }
  return r;
}

SelectionResult select_iterate(const PairwiseMatrix& pr, const PairwiseMatrix& pm) {
  if (pr.n != pm.n) {
    throw DimensionError("select_iterate: matrices have different sizes");
  }
  SelectionResult result;
  std::vector<int> alive(static_cast<std::size_t>(pr.n));
  std::iota(alive.begin(), alive.end(), 0);
  while (!alive.empty()) {
    const std::vector<double> r = reliability(pr, alive);
    std::size_t best = 0;
    for (std::size_t a = 1; a < r.size(); ++a) {
      if (r[a] > r[best]) best = a;  // ties keep the earlier (lower) index
    }
    const int star = alive[best];
    SelectionStep step;
    step.selected = star;
    std::vector<int> next;
    next.reserve(alive.size());
    for (int j : alive) {
      if (j == star) continue;
      if (pm.at(star, j) > 0.5) {
        step.removed.push_back(j);
      } else {
        next.push_back(j);
      }
    }
    result.selected.push_back(star);
    result.steps.push_back(std::move(step));
    alive = std::move(next);
  }
  return result;
}

std::vector<int> nms(const std::vector<Line>& lines, const std::vector<double>& scores,
                     const ImageSize& size, double overlap_thr) {
  if (lines.size() != scores.size()) {
    throw DimensionError("nms: lines and scores have different lengths");
  }
  std::vector<int> order(lines.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&scores](int a, int b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });
  std::vector<int> kept;
  std::vector<bool> suppressed(lines.size(), false);
  for (int i : order) {
    if (suppressed[static_cast<std::size_t>(i)]) continue;
    kept.push_back(i);
    for (int j : order) {
      if (j == i || suppressed[static_cast<std::size_t>(j)]) continue;
      if (miou(lines[static_cast<std::size_t>(i)], lines[static_cast<std::size_t>(j)],
               size) > overlap_thr) {
        suppressed[static_cast<std::size_t>(j)] = true;
      }
    }
  }
  return kept;
}

std::vector<PairLabel> build_pair_labels(
    const std::vector<std::pair<Line, std::optional<int>>>& detections,
    const std::vector<Line>& gts) {
  std::vector<PairLabel> labels;
  const int nd = static_cast<int>(detections.size());
  for (int d = 0; d < nd; ++d) {
    const auto& matched = detections[static_cast<std::size_t>(d)].second;
    if (!matched) continue;
    const int g = *matched;
    if (g < 0 || g >= static_cast<int>(gts.size())) {
      throw ValidationError("build_pair_labels: matched gt id out of range");
    }
    // The ground truth outranks its own detection, in both orderings.
    labels.push_back({PairLabel::Task::ranking, {true, g}, {false, d}, one_hot(true)});
    labels.push_back({PairLabel::Task::ranking, {false, d}, {true, g}, one_hot(false)});
  }
  for (int i = 0; i < nd; ++i) {
    for (int j = 0; j < nd; ++j) {
      if (i == j) continue;
      const auto& mi = detections[static_cast<std::size_t>(i)].second;
      const auto& mj = detections[static_cast<std::size_t>(j)].second;
      const bool same = mi.has_value() && mj.has_value() && *mi == *mj;
      labels.push_back(
          {PairLabel::Task::matching, {false, i}, {false, j}, one_hot(same)});
    }
  }
  return labels;
}

}  // namespace semline
