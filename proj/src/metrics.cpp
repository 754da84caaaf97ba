#include "raseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace raseg::metrics {

namespace {

void check_labels(std::span<const int> y_true, std::span<const int> y_pred) {
  if (y_true.empty()) throw ValidationError("metric over an empty label set");
  if (y_true.size() != y_pred.size()) {
    throw ValidationError("y_true has " + std::to_string(y_true.size()) + " labels, y_pred has " +
                          std::to_string(y_pred.size()));
  }
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    if ((y_true[i] != 0 && y_true[i] != 1) || (y_pred[i] != 0 && y_pred[i] != 1)) {
      throw ValidationError("labels must be binary (0/1)");
    }
  }
}

double f1(long tp, long fp, long fn) {
  const long denom = 2 * tp + fp + fn;
  return denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
}

}  // namespace

ConfusionCounts confusion(std::span<const int> y_true, std::span<const int> y_pred) {
  check_labels(y_true, y_pred);
  ConfusionCounts c;
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    if (y_true[i] == 1) {
      (y_pred[i] == 1 ? c.tp : c.fn)++;
    } else {
      (y_pred[i] == 1 ? c.fp : c.tn)++;
    }
  }
  return c;
}

double dice_score(std::span<const float> pred, std::span<const float> gt) {
  if (pred.size() != gt.size()) {
    throw ValidationError("dice_score: masks have " + std::to_string(pred.size()) + " and " +
                          std::to_string(gt.size()) + " voxels");
  }
  long p = 0, g = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if ((pred[i] != 0.0f && pred[i] != 1.0f) || (gt[i] != 0.0f && gt[i] != 1.0f)) {
      throw ValidationError("dice_score: masks must be binary");
    }
    const bool a = pred[i] != 0.0f, b = gt[i] != 0.0f;
    p += a;
    g += b;
    both += a && b;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

double dice_score(const volio::Volume& pred, const volio::Volume& gt) {
  if (pred.shape() != gt.shape()) throw ValidationError("dice_score: mask shapes differ");
  return dice_score(pred.data(), gt.data());
}

double accuracy(std::span<const int> y_true, std::span<const int> y_pred) {
  const ConfusionCounts c = confusion(y_true, y_pred);
  return static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
}

double f1_macro(std::span<const int> y_true, std::span<const int> y_pred) {
  const ConfusionCounts c = confusion(y_true, y_pred);
  // Class 0's F1 swaps the roles of positives and negatives.
  return 0.5 * (f1(c.tp, c.fp, c.fn) + f1(c.tn, c.fn, c.fp));
}

double roc_auc(std::span<const int> y_true, std::span<const double> scores) {
  if (y_true.size() != scores.size()) throw ValidationError("roc_auc: labels and scores differ in length");
  long pos = 0, neg = 0;
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    if (y_true[i] != 0 && y_true[i] != 1) throw ValidationError("roc_auc: labels must be binary");
    if (!std::isfinite(scores[i])) throw ValidationError("roc_auc: scores must be finite");
    (y_true[i] == 1 ? pos : neg)++;
  }
  if (pos == 0 || neg == 0) throw ValidationError("roc_auc: undefined with a single class present");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Count in half-units so ties stay exact: each win is 2, each tie 1.
  long long half_units = 0;
  long neg_below = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    long grp_pos = 0, grp_neg = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (y_true[order[j]] == 1 ? grp_pos : grp_neg)++;
      ++j;
    }
    half_units += 2LL * grp_pos * neg_below + static_cast<long long>(grp_pos) * grp_neg;
    neg_below += grp_neg;
    i = j;
  }
  return static_cast<double>(half_units) / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
}

}  // namespace raseg::metrics
