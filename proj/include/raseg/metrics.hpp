#pragma once

#include <span>

#include "raseg/volio.hpp"

namespace raseg::metrics {

struct ConfusionCounts {
  long tp = 0, fp = 0, tn = 0, fn = 0;
  long total() const { return tp + fp + tn + fn; }
};

/// Counts with class 1 as the positive class.
ConfusionCounts confusion(std::span<const int> y_true, std::span<const int> y_pred);

/// 2|P n G| / (|P| + |G|); two empty masks score 1.
double dice_score(const volio::Volume& pred, const volio::Volume& gt);
double dice_score(std::span<const float> pred, std::span<const float> gt);

double accuracy(std::span<const int> y_true, std::span<const int> y_pred);
/// Unweighted mean of the per-class F1 of classes 0 and 1.
double f1_macro(std::span<const int> y_true, std::span<const int> y_pred);
/// Mann-Whitney statistic with ties counted as one half.
double roc_auc(std::span<const int> y_true, std::span<const double> scores);

}  // namespace raseg::metrics
