#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "raseg/ndiff/archive.hpp"

namespace raseg::learn {

enum class ClassifierKind { Qda, Dt, Rf, Svc };

std::string to_string(ClassifierKind k);
ClassifierKind parse_classifier(const std::string& name);

enum class KernelKind { Sigmoid, Linear, Rbf };

/// Hyperparameters for every classifier kind; each kind reads its own subset.
struct ClassifierParams {
  // qda
  double reg_scale = 1e-6;
  // dt, rf; max_depth < 0 means unbounded
  int max_depth = -1;
  int min_samples_leaf = 1;
  // rf; max_features 0 means ceil(sqrt(d)), < 0 means all features
  int n_trees = 200;
  bool bootstrap = true;
  int max_features = 0;
  std::uint64_t seed = 0;
  // svc; gamma <= 0 means 1 / (d * var(X))
  KernelKind kernel = KernelKind::Sigmoid;
  double C = 1.0;
  double gamma = 0.0;
  double coef0 = 0.0;
  double tol = 1e-3;
  long max_iter = 1000000;
};

/// Only the fields the kind uses.
nlohmann::json params_to_json(ClassifierKind kind, const ClassifierParams& p);
ClassifierParams params_from_json(ClassifierKind kind, const nlohmann::json& j, const ClassifierParams& defaults = {});

// --- QDA -------------------------------------------------------------------

struct QdaModel {
  std::array<double, 2> log_prior{};
  std::array<Eigen::VectorXd, 2> mean;
  /// Regularised covariances.
  std::array<Eigen::MatrixXd, 2> cov;
};

/// Per-class Gaussian with reg_scale * trace(cov) / d added to the diagonal.
QdaModel qda_fit(const Eigen::MatrixXd& X, std::span<const int> y, double reg_scale = 1e-6);
/// log p(x | class) + log prior, per class (n x 2).
Eigen::MatrixXd qda_joint_log_likelihood(const QdaModel& m, const Eigen::MatrixXd& X);
Eigen::MatrixXd qda_predict_proba(const QdaModel& m, const Eigen::MatrixXd& X);

// --- CART ------------------------------------------------------------------

struct TreeNode {
  /// -1 marks a leaf.
  int feature = -1;
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  /// Fraction of class 1 among the node's training samples.
  double p1 = 0.0;
  int samples = 0;
};

struct DecisionTree {
  std::vector<TreeNode> nodes;

  double predict_p1(const Eigen::Ref<const Eigen::RowVectorXd>& x) const;
  int depth() const;
};

struct TreeParams {
  int max_depth = -1;
  int min_samples_leaf = 1;
  /// Features examined per split; <= 0 or >= d examines all of them.
  int max_features = -1;
};

/// Greedy Gini CART. Samples go left when x[feature] <= threshold;
/// thresholds are midpoints between consecutive distinct values. Among equal
/// impurities the earlier feature and then the smaller threshold win.
/// `sample_index` lists the training rows (repeats allowed); empty uses all.
DecisionTree dt_fit(const Eigen::MatrixXd& X, std::span<const int> y, const TreeParams& params,
                    std::span<const int> sample_index = {}, std::uint64_t feature_seed = 0);
Eigen::MatrixXd dt_predict_proba(const DecisionTree& t, const Eigen::MatrixXd& X);

struct RandomForest {
  std::vector<DecisionTree> trees;
};

/// Tree t draws its bootstrap sample and split features from
/// derive_seed(seed, t).
RandomForest rf_fit(const Eigen::MatrixXd& X, std::span<const int> y, const ClassifierParams& params);
Eigen::MatrixXd rf_predict_proba(const RandomForest& f, const Eigen::MatrixXd& X);

// --- SVC -------------------------------------------------------------------

struct SvcModel {
  KernelKind kernel = KernelKind::Sigmoid;
  double gamma = 1.0;
  double coef0 = 0.0;
  double C = 1.0;
  /// Support vectors (rows) and their alpha_i * y_i, labels in {-1,+1}.
  Eigen::MatrixXd support;
  Eigen::VectorXd dual_coef;
  double bias = 0.0;
  /// Full dual solution over the training set, for constraint checks.
  Eigen::VectorXd alpha;
  Eigen::VectorXi y_signed;
  long iterations = 0;
  /// Final maximal KKT violation.
  double kkt_gap = 0.0;
};

double kernel_value(KernelKind k, double gamma, double coef0, const Eigen::Ref<const Eigen::RowVectorXd>& a,
                    const Eigen::Ref<const Eigen::RowVectorXd>& b);

/// Soft-margin dual solved by SMO with second-order working-set selection.
/// Throws ConvergenceError when max_iter is reached before the KKT gap
/// drops below tol.
SvcModel svc_fit(const Eigen::MatrixXd& X, std::span<const int> y, const ClassifierParams& params);
Eigen::VectorXd svc_decision(const SvcModel& m, const Eigen::MatrixXd& X);
/// Columns (1 - s, s) with s the logistic of the decision value.
Eigen::MatrixXd svc_predict_proba(const SvcModel& m, const Eigen::MatrixXd& X);

// --- Uniform interface -----------------------------------------------------

struct Classifier {
  ClassifierKind kind = ClassifierKind::Qda;
  ClassifierParams params;
  std::variant<QdaModel, DecisionTree, RandomForest, SvcModel> model;

  /// n x 2 class probabilities.
  Eigen::MatrixXd predict_proba(const Eigen::MatrixXd& X) const;
  std::vector<int> predict(const Eigen::MatrixXd& X) const;
};

Classifier fit_classifier(ClassifierKind kind, const ClassifierParams& params, const Eigen::MatrixXd& X,
                          std::span<const int> y);

void save_classifier(nd::Archive& ar, const Classifier& c);
Classifier load_classifier(const nd::Archive& ar);

}  // namespace raseg::learn
