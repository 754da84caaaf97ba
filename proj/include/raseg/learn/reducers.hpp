#pragma once

#include <span>
#include <string>

#include <Eigen/Core>

#include "raseg/ndiff/archive.hpp"

namespace raseg::learn {

enum class ReducerKind { Pca, Lda };

std::string to_string(ReducerKind k);
ReducerKind parse_reducer(const std::string& name);

struct ReducerModel {
  ReducerKind kind = ReducerKind::Pca;
  Eigen::VectorXd mean;
  /// One component per row (k x d).
  Eigen::MatrixXd projection;
  /// PCA only: variance and variance ratio of the kept components.
  Eigen::VectorXd explained_variance;
  Eigen::VectorXd explained_variance_ratio;
  /// PCA on zero-variance data; a single arbitrary component is kept.
  bool degenerate = false;
  /// LDA only: the within-class scatter was rank deficient and shrunk.
  bool shrunk = false;

  Eigen::MatrixXd transform(const Eigen::MatrixXd& X) const;
};

/// Components from the SVD of the centred data; keeps the smallest k whose
/// cumulative explained-variance ratio reaches `variance_threshold`. Each
/// component's largest-magnitude entry is positive.
ReducerModel pca_fit(const Eigen::MatrixXd& X, double variance_threshold = 0.95);

/// Two-class LDA with one component. Full-rank within-class scatter goes
/// through an SVD whitening route; a rank-deficient scatter is shrunk
/// towards its diagonal by `shrinkage` first. The direction is scaled to
/// unit within-class variance and signed so the class-1 mean projects
/// positive.
ReducerModel lda_fit(const Eigen::MatrixXd& X, std::span<const int> y, double shrinkage = 1e-3);

void save_reducer(nd::Archive& ar, const ReducerModel& m);
ReducerModel load_reducer(const nd::Archive& ar);

}  // namespace raseg::learn
