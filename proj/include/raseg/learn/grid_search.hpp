#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "raseg/learn/classifiers.hpp"
#include "raseg/learn/reducers.hpp"

namespace raseg::learn {

/// Validation indices per fold (each sorted). Every class is shuffled with
/// the seed and dealt round-robin, so each fold receives
/// floor or ceil of n_c / k samples of class c.
/// Throws ValidationError when a class has fewer than k samples.
std::vector<std::vector<int>> stratified_kfold(std::span<const int> y, int k, std::uint64_t seed);

/// Optional reduction step fitted inside each training fold.
struct ReduceOptions {
  std::optional<ReducerKind> kind;
  double pca_variance = 0.95;
  double lda_shrinkage = 1e-3;
};

struct FoldScores {
  int fold = 0;
  double accuracy = 0.0;
  double f1_macro = 0.0;
  double roc_auc = 0.0;
  std::vector<int> val_index;
  std::vector<int> y_true;
  std::vector<int> y_pred;
  std::vector<double> score;
};

struct CvEvaluation {
  std::vector<FoldScores> folds;
  /// Means over folds.
  double accuracy = 0.0;
  double f1_macro = 0.0;
  double roc_auc = 0.0;
  /// Sample standard deviations over folds.
  double accuracy_std = 0.0;
  double f1_macro_std = 0.0;
  double roc_auc_std = 0.0;
};

struct Pipeline {
  std::optional<ReducerModel> reducer;
  Classifier classifier;

  Eigen::MatrixXd predict_proba(const Eigen::MatrixXd& X) const;
  std::vector<int> predict(const Eigen::MatrixXd& X) const;
};

Pipeline fit_pipeline(ClassifierKind kind, const ClassifierParams& params, const ReduceOptions& reduce,
                      const Eigen::MatrixXd& X, std::span<const int> y);

CvEvaluation cross_validate_classifier(ClassifierKind kind, const ClassifierParams& params,
                                       const ReduceOptions& reduce, const Eigen::MatrixXd& X,
                                       std::span<const int> y, int k, std::uint64_t seed);

struct GridPoint {
  ClassifierParams params;
  CvEvaluation cv;
};

struct GridSearchResult {
  ClassifierKind kind = ClassifierKind::Qda;
  std::vector<GridPoint> table;
  /// Index of the point with the highest mean F1-macro; the first wins ties.
  std::size_t best = 0;

  const GridPoint& best_point() const { return table.at(best); }
};

/// Every point is scored on the same stratified folds.
GridSearchResult grid_search(ClassifierKind kind, const std::vector<ClassifierParams>& grid,
                             const ReduceOptions& reduce, const Eigen::MatrixXd& X, std::span<const int> y,
                             int k = 5, std::uint64_t seed = 0, int threads = 1);

/// Built-in grids: qda {default}; dt max_depth {3, 5, none};
/// rf n_trees {100, 200} x max_depth {none, 10}; svc sigmoid, C {0.1, 1, 10}.
std::vector<ClassifierParams> default_grid(ClassifierKind kind, const ClassifierParams& base = {});

/// A grid from JSON: either an array of parameter objects, or an object
/// mapping parameter names to value arrays (cartesian product, keys in
/// sorted order, the last key varying fastest).
std::vector<ClassifierParams> grid_from_json(ClassifierKind kind, const nlohmann::json& j,
                                             const ClassifierParams& base = {});

nlohmann::json to_json(const FoldScores& f);
/// {kind, params, accuracy, f1_macro, roc_auc, per_fold, ...} for the best
/// point, with the full table under "grid".
nlohmann::json report_json(const GridSearchResult& r);

}  // namespace raseg::learn
