#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <set>

#include "oracles.hpp"
#include "raseg/learn/classifiers.hpp"
#include "raseg/learn/features.hpp"
#include "raseg/learn/grid_search.hpp"
#include "raseg/learn/reducers.hpp"

using namespace raseg;
using namespace raseg::learn;

TEST_CASE("PCA spans the leading covariance eigenvectors") {
  auto cl = oracle::gaussian_clusters(80, 6, 0.0, 1.0, 1);
  for (int j = 0; j < 6; ++j) cl.X.col(j) *= 1.0 + 2.0 * j;
  const auto m = pca_fit(cl.X, 0.9);
  const int k = static_cast<int>(m.projection.rows());
  CHECK(k >= 1);
  CHECK(k < 6);
  CHECK(oracle::max_principal_angle(m.projection, oracle::covariance_eigenvectors(cl.X, k)) < 1e-6);
  CHECK(m.explained_variance_ratio.sum() >= 0.9);
  CHECK(m.explained_variance_ratio.head(k - 1).sum() < 0.9 + 1e-12);
  const Eigen::MatrixXd Z = m.transform(cl.X);
  CHECK(Z.rows() == 80);
  CHECK(Z.cols() == k);
  CHECK(Z.colwise().mean().norm() < 1e-10);
}

TEST_CASE("PCA on constant data degrades gracefully") {
  const Eigen::MatrixXd X = Eigen::MatrixXd::Constant(5, 3, 2.0);
  const auto m = pca_fit(X);
  CHECK(m.degenerate);
  CHECK(m.projection.rows() == 1);
  CHECK_THROWS_AS(pca_fit(Eigen::MatrixXd(1, 3)), ValidationError);
}

TEST_CASE("LDA recovers the Fisher direction") {
  auto cl = oracle::gaussian_clusters(120, 4, 1.0, 1.0, 2);
  cl.X.col(1) *= 3.0;
  const auto m = lda_fit(cl.X, cl.y);
  const Eigen::VectorXd w = m.projection.row(0).transpose(), ref = oracle::fisher_direction(cl.X, cl.y);
  CHECK(std::abs(w.dot(ref) / (w.norm() * ref.norm())) > 1.0 - 1e-9);
  CHECK(!m.shrunk);
  const Eigen::MatrixXd z = m.transform(cl.X);
  double m1 = 0;
  for (int i = 0; i < 120; ++i) m1 += cl.y[i] ? z(i, 0) : 0.0;
  CHECK(m1 > 0);
}

TEST_CASE("LDA shrinks a rank-deficient scatter") {
  auto cl = oracle::gaussian_clusters(10, 30, 2.0, 1.0, 3);
  const auto m = lda_fit(cl.X, cl.y);
  CHECK(m.shrunk);
  CHECK(m.projection.allFinite());
  CHECK_THROWS_AS(lda_fit(cl.X, std::vector<int>(10, 1)), ValidationError);
}

TEST_CASE("QDA posteriors sum to one and follow the densities") {
  auto cl = oracle::gaussian_clusters(60, 3, 2.0, 1.0, 4);
  const auto m = qda_fit(cl.X, cl.y);
  const Eigen::MatrixXd p = qda_predict_proba(m, cl.X);
  for (int i = 0; i < p.rows(); ++i) CHECK(p.row(i).sum() == doctest::Approx(1.0).epsilon(1e-14));
  const Eigen::MatrixXd ll = qda_joint_log_likelihood(m, cl.X.topRows(3));
  for (int i = 0; i < 3; ++i)
    for (int c = 0; c < 2; ++c)
      CHECK(ll(i, c) == doctest::Approx(oracle::gaussian_log_density(cl.X.row(i).transpose(), m.mean[c], m.cov[c]) +
                                        m.log_prior[c])
                            .epsilon(1e-10));
}

TEST_CASE("decision tree root split matches exhaustive search") {
  auto cl = oracle::gaussian_clusters(40, 3, 1.0, 1.0, 5);
  const auto t = dt_fit(cl.X, cl.y, TreeParams{1, 1, -1});
  const auto ref = oracle::exhaustive_root_split(cl.X, cl.y);
  REQUIRE(t.nodes.size() == 3);
  CHECK(t.nodes[0].feature == ref.feature);
  CHECK(t.nodes[0].threshold == ref.threshold);
  CHECK(t.depth() == 1);
}

TEST_CASE("unbounded trees fit separable training data and honour leaf size") {
  auto cl = oracle::gaussian_clusters(50, 2, 0.5, 1.0, 6);
  const auto t = dt_fit(cl.X, cl.y, TreeParams{});
  const Eigen::MatrixXd p = dt_predict_proba(t, cl.X);
  for (int i = 0; i < 50; ++i) CHECK(p(i, 1) == static_cast<double>(cl.y[i]));
  const auto t5 = dt_fit(cl.X, cl.y, TreeParams{-1, 5, -1});
  for (const auto& n : t5.nodes) CHECK(n.samples >= 5);
}

TEST_CASE("a one-tree forest without bootstrap equals the tree") {
  auto cl = oracle::gaussian_clusters(60, 3, 0.7, 1.0, 7);
  ClassifierParams p;
  p.n_trees = 1;
  p.bootstrap = false;
  p.max_features = -1;
  CHECK(rf_predict_proba(rf_fit(cl.X, cl.y, p), cl.X) == dt_predict_proba(dt_fit(cl.X, cl.y, TreeParams{}), cl.X));
  p.n_trees = 5;
  p.bootstrap = true;
  p.max_features = 0;
  CHECK(rf_predict_proba(rf_fit(cl.X, cl.y, p), cl.X) == rf_predict_proba(rf_fit(cl.X, cl.y, p), cl.X));
}

TEST_CASE("SVC dual is feasible and classifies clusters") {
  auto cl = oracle::gaussian_clusters(80, 3, 2.0, 1.0, 8);
  for (auto kernel : {KernelKind::Sigmoid, KernelKind::Linear, KernelKind::Rbf}) {
    ClassifierParams p;
    p.kernel = kernel;
    p.tol = 1e-8;
    const auto m = svc_fit(cl.X, cl.y, p);
    double eq = 0;
    for (int i = 0; i < 80; ++i) {
      CHECK(m.alpha(i) >= 0.0);
      CHECK(m.alpha(i) <= p.C);
      eq += m.alpha(i) * m.y_signed(i);
    }
    CHECK(std::abs(eq) < 1e-9);
    CHECK(m.kkt_gap < 1e-8);
    const Eigen::VectorXd f = svc_decision(m, cl.X);
    int correct = 0;
    for (int i = 0; i < 80; ++i) correct += (f(i) > 0) == (cl.y[i] == 1);
    CHECK(correct >= 72);
  }
  ClassifierParams tiny;
  tiny.max_iter = 1;
  tiny.tol = 1e-12;
  CHECK_THROWS_AS(svc_fit(cl.X, cl.y, tiny), ConvergenceError);
}

TEST_CASE("classifiers survive an archive round-trip") {
  auto cl = oracle::gaussian_clusters(40, 3, 1.5, 1.0, 9);
  for (auto kind : {ClassifierKind::Qda, ClassifierKind::Dt, ClassifierKind::Rf, ClassifierKind::Svc}) {
    ClassifierParams p;
    p.n_trees = 7;
    const auto c = fit_classifier(kind, p, cl.X, cl.y);
    nd::Archive ar;
    save_classifier(ar, c);
    const auto back = load_classifier(nd::Archive::parse(ar.serialize(), "mem"));
    CHECK(back.kind == kind);
    CHECK(back.predict_proba(cl.X) == c.predict_proba(cl.X));
    CHECK(params_to_json(kind, back.params) == params_to_json(kind, c.params));
  }
  CHECK_THROWS_AS(parse_classifier("knn"), ValidationError);
}

TEST_CASE("stratified folds keep class ratios and partition the data") {
  std::vector<int> y(50);
  for (int i = 0; i < 50; ++i) y[i] = i < 20 ? 1 : 0;
  const auto folds = stratified_kfold(y, 5, 3);
  std::set<int> seen;
  for (const auto& f : folds) {
    CHECK(f.size() == 10);
    CHECK(std::count_if(f.begin(), f.end(), [&](int i) { return y[i] == 1; }) == 4);
    seen.insert(f.begin(), f.end());
  }
  CHECK(seen.size() == 50);
  CHECK(stratified_kfold(y, 5, 3) == folds);
  CHECK_THROWS_WITH_AS(stratified_kfold(std::vector<int>{0, 0, 0, 1, 1, 0}, 3, 0), doctest::Contains("stratification"),
                       ValidationError);
}

TEST_CASE("grid search picks the best mean F1 and reports every point") {
  auto cl = oracle::gaussian_clusters(60, 4, 1.2, 1.0, 10);
  const auto grid = grid_from_json(ClassifierKind::Dt, nlohmann::json{{"max_depth", {1, 3}}, {"min_samples_leaf", {1, 4}}});
  REQUIRE(grid.size() == 4);
  CHECK(grid[1].max_depth == 1);
  CHECK(grid[1].min_samples_leaf == 4);
  const auto r = grid_search(ClassifierKind::Dt, grid, ReduceOptions{}, cl.X, cl.y, 5, 0, 2);
  REQUIRE(r.table.size() == 4);
  for (const auto& pt : r.table) CHECK(pt.cv.f1_macro <= r.best_point().cv.f1_macro);
  const auto serial = grid_search(ClassifierKind::Dt, grid, ReduceOptions{}, cl.X, cl.y, 5, 0, 1);
  CHECK(report_json(serial) == report_json(r));
  const auto rep = report_json(r);
  CHECK(rep["per_fold"].size() == 5);
  CHECK(rep["grid"].size() == 4);
  CHECK(default_grid(ClassifierKind::Rf).size() == 4);
  CHECK_THROWS_AS(grid_from_json(ClassifierKind::Dt, nlohmann::json{{"n_trees", {0}}}), ValidationError);
}

TEST_CASE("features flatten channel-major after in-plane averaging") {
  nd::Tensor5<float> f({1, 2, 3, 2, 2});
  for (int c = 0; c < 2; ++c)
    for (int d = 0; d < 3; ++d)
      for (int h = 0; h < 2; ++h)
        for (int w = 0; w < 2; ++w) f(0, c, d, h, w) = static_cast<float>(10 * c + d + 0.25 * (h + w));
  const auto v = reduce_and_flatten(f, "s", 1);
  REQUIRE(v.values.size() == 6);
  CHECK(v.values[4] == doctest::Approx(10 + 1 + 0.25));
  const auto dir = std::filesystem::temp_directory_path() / "raseg_learn_test";
  std::filesystem::create_directories(dir);
  FeatureVector u{"t", {1.5, -2.0, 1e-17, 3, 4, 5}, std::nullopt};
  write_features_csv(dir / "f.csv", {v, u});
  const auto back = read_features_csv(dir / "f.csv");
  REQUIRE(back.size() == 2);
  CHECK(back[0].values == v.values);
  CHECK(back[1].values == u.values);
  CHECK(back[0].label == 1);
  CHECK(!back[1].label);
  CHECK_THROWS_AS(to_table(back).y(), ValidationError);
  std::filesystem::remove_all(dir);
}
