#include "raseg/learn/grid_search.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <numeric>
#include <thread>

#include "raseg/common.hpp"
#include "raseg/metrics.hpp"

namespace raseg::learn {

using Eigen::MatrixXd;
using nlohmann::json;

std::vector<std::vector<int>> stratified_kfold(std::span<const int> y, int k, std::uint64_t seed) {
  if (k < 2) throw ValidationError("stratified_kfold: k must be >= 2");
  std::vector<std::vector<int>> folds(static_cast<std::size_t>(k));
  std::size_t offset = 0;
  for (int c = 0; c < 2; ++c) {
    std::vector<int> idx;
    for (std::size_t i = 0; i < y.size(); ++i) {
      if (y[i] == c) idx.push_back(static_cast<int>(i));
    }
    if (static_cast<int>(idx.size()) < k) {
      throw ValidationError("stratification: class " + std::to_string(c) + " has " + std::to_string(idx.size()) +
                            " samples, fewer than the " + std::to_string(k) + " folds");
    }
    Rng rng(derive_seed(seed, 0x7374726174, static_cast<std::uint64_t>(c)));
    rng.shuffle(idx);
    // Class 1 continues the deal where class 0 stopped, balancing fold sizes.
    for (std::size_t t = 0; t < idx.size(); ++t) folds[(t + offset) % folds.size()].push_back(idx[t]);
    offset = (offset + idx.size()) % folds.size();
  }
  for (auto& f : folds) std::sort(f.begin(), f.end());
  return folds;
}

namespace {

MatrixXd select_rows(const MatrixXd& X, const std::vector<int>& rows) {
  MatrixXd out(static_cast<Eigen::Index>(rows.size()), X.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = X.row(rows[i]);
  return out;
}

std::optional<ReducerModel> fit_reducer(const ReduceOptions& r, const MatrixXd& X, std::span<const int> y) {
  if (!r.kind) return std::nullopt;
  return *r.kind == ReducerKind::Pca ? pca_fit(X, r.pca_variance) : lda_fit(X, y, r.lda_shrinkage);
}

void mean_std(const std::vector<FoldScores>& f, double FoldScores::*field, double& mean, double& sd) {
  const double n = static_cast<double>(f.size());
  mean = 0.0;
  for (const auto& s : f) mean += s.*field;
  mean /= n;
  sd = 0.0;
  if (f.size() > 1) {
    for (const auto& s : f) sd += (s.*field - mean) * (s.*field - mean);
    sd = std::sqrt(sd / (n - 1.0));
  }
}

FoldScores run_fold(ClassifierKind kind, const ClassifierParams& params, const ReduceOptions& reduce,
                    const MatrixXd& X, std::span<const int> y, const std::vector<int>& val, int fold) {
  std::vector<char> is_val(y.size(), 0);
  for (int i : val) is_val[static_cast<std::size_t>(i)] = 1;
  std::vector<int> train;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (!is_val[i]) train.push_back(static_cast<int>(i));
  }
  std::vector<int> y_train;
  for (int i : train) y_train.push_back(y[static_cast<std::size_t>(i)]);

  const Pipeline p = fit_pipeline(kind, params, reduce, select_rows(X, train), y_train);
  const MatrixXd Xv = select_rows(X, val);
  const MatrixXd proba = p.predict_proba(Xv);

  FoldScores s;
  s.fold = fold;
  s.val_index = val;
  s.y_pred = p.predict(Xv);
  for (std::size_t i = 0; i < val.size(); ++i) {
    s.y_true.push_back(y[static_cast<std::size_t>(val[i])]);
    s.score.push_back(proba(static_cast<Eigen::Index>(i), 1));
  }
  s.accuracy = metrics::accuracy(s.y_true, s.y_pred);
  s.f1_macro = metrics::f1_macro(s.y_true, s.y_pred);
  s.roc_auc = metrics::roc_auc(s.y_true, s.score);
  return s;
}

CvEvaluation summarize(std::vector<FoldScores> folds) {
  CvEvaluation cv;
  cv.folds = std::move(folds);
  mean_std(cv.folds, &FoldScores::accuracy, cv.accuracy, cv.accuracy_std);
  mean_std(cv.folds, &FoldScores::f1_macro, cv.f1_macro, cv.f1_macro_std);
  mean_std(cv.folds, &FoldScores::roc_auc, cv.roc_auc, cv.roc_auc_std);
  return cv;
}

void check_inputs(const MatrixXd& X, std::span<const int> y) {
  if (static_cast<Eigen::Index>(y.size()) != X.rows()) {
    throw ValidationError("feature matrix has " + std::to_string(X.rows()) + " rows but " +
                          std::to_string(y.size()) + " labels");
  }
}

}  // namespace

MatrixXd Pipeline::predict_proba(const MatrixXd& X) const {
  return classifier.predict_proba(reducer ? reducer->transform(X) : X);
}

std::vector<int> Pipeline::predict(const MatrixXd& X) const {
  return classifier.predict(reducer ? reducer->transform(X) : X);
}

Pipeline fit_pipeline(ClassifierKind kind, const ClassifierParams& params, const ReduceOptions& reduce,
                      const MatrixXd& X, std::span<const int> y) {
  check_inputs(X, y);
  Pipeline p;
  p.reducer = fit_reducer(reduce, X, y);
  p.classifier = fit_classifier(kind, params, p.reducer ? p.reducer->transform(X) : X, y);
  return p;
}

CvEvaluation cross_validate_classifier(ClassifierKind kind, const ClassifierParams& params,
                                       const ReduceOptions& reduce, const MatrixXd& X, std::span<const int> y,
                                       int k, std::uint64_t seed) {
  check_inputs(X, y);
  const auto folds = stratified_kfold(y, k, seed);
  std::vector<FoldScores> scores;
  for (int f = 0; f < k; ++f) scores.push_back(run_fold(kind, params, reduce, X, y, folds[f], f));
  return summarize(std::move(scores));
}

GridSearchResult grid_search(ClassifierKind kind, const std::vector<ClassifierParams>& grid,
                             const ReduceOptions& reduce, const MatrixXd& X, std::span<const int> y, int k,
                             std::uint64_t seed, int threads) {
  if (grid.empty()) throw ValidationError("grid_search: empty parameter grid");
  check_inputs(X, y);
  const auto folds = stratified_kfold(y, k, seed);
  const std::size_t tasks = grid.size() * static_cast<std::size_t>(k);
  std::vector<FoldScores> results(tasks);
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto worker = [&] {
    for (std::size_t t = next++; t < tasks; t = next++) {
      try {
        const std::size_t g = t / static_cast<std::size_t>(k);
        const int f = static_cast<int>(t % static_cast<std::size_t>(k));
        results[t] = run_fold(kind, grid[g], reduce, X, y, folds[f], f);
      } catch (...) {
        std::lock_guard lock(failure_mu);
        if (!failure) failure = std::current_exception();
        next = tasks;
      }
    }
  };
  const int n_threads = std::clamp(threads, 1, static_cast<int>(tasks));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (int i = 0; i < n_threads; ++i) pool.emplace_back(worker);
  }
  if (failure) std::rethrow_exception(failure);

  GridSearchResult r;
  r.kind = kind;
  for (std::size_t g = 0; g < grid.size(); ++g) {
    std::vector<FoldScores> fs(results.begin() + static_cast<std::ptrdiff_t>(g * k),
                               results.begin() + static_cast<std::ptrdiff_t>((g + 1) * k));
    r.table.push_back({grid[g], summarize(std::move(fs))});
    if (r.table.back().cv.f1_macro > r.table[r.best].cv.f1_macro) r.best = g;
  }
  return r;
}

std::vector<ClassifierParams> default_grid(ClassifierKind kind, const ClassifierParams& base) {
  std::vector<ClassifierParams> grid;
  switch (kind) {
    case ClassifierKind::Qda: grid.push_back(base); break;
    case ClassifierKind::Dt:
      for (int depth : {3, 5, -1}) {
        grid.push_back(base);
        grid.back().max_depth = depth;
      }
      break;
    case ClassifierKind::Rf:
      for (int trees : {100, 200}) {
        for (int depth : {-1, 10}) {
          grid.push_back(base);
          grid.back().n_trees = trees;
          grid.back().max_depth = depth;
        }
      }
      break;
    case ClassifierKind::Svc:
      for (double c : {0.1, 1.0, 10.0}) {
        grid.push_back(base);
        grid.back().kernel = KernelKind::Sigmoid;
        grid.back().C = c;
      }
      break;
  }
  return grid;
}

std::vector<ClassifierParams> grid_from_json(ClassifierKind kind, const json& j, const ClassifierParams& base) {
  std::vector<ClassifierParams> grid;
  if (j.is_array()) {
    for (const auto& p : j) grid.push_back(params_from_json(kind, p, base));
  } else if (j.is_object()) {
    std::vector<json> points{json::object()};
    for (const auto& [key, values] : j.items()) {
      if (!values.is_array() || values.empty()) {
        throw ValidationError("grid entry '" + key + "' must be a nonempty array");
      }
      std::vector<json> next;
      for (const auto& p : points) {
        for (const auto& v : values) {
          json q = p;
          q[key] = v;
          next.push_back(std::move(q));
        }
      }
      points = std::move(next);
    }
    for (const auto& p : points) grid.push_back(params_from_json(kind, p, base));
  } else {
    throw ValidationError("grid must be an array of parameter objects or an object of value arrays");
  }
  if (grid.empty()) throw ValidationError("grid is empty");
  return grid;
}

json to_json(const FoldScores& f) {
  return json{{"fold", f.fold},         {"accuracy", f.accuracy}, {"f1_macro", f.f1_macro},
              {"roc_auc", f.roc_auc},   {"val_index", f.val_index}, {"y_true", f.y_true},
              {"y_pred", f.y_pred},     {"score", f.score}};
}

namespace {

json point_json(ClassifierKind kind, const GridPoint& p) {
  json folds = json::array();
  for (const auto& f : p.cv.folds) folds.push_back(to_json(f));
  return json{{"params", params_to_json(kind, p.params)},
              {"accuracy", p.cv.accuracy},
              {"accuracy_std", p.cv.accuracy_std},
              {"f1_macro", p.cv.f1_macro},
              {"f1_macro_std", p.cv.f1_macro_std},
              {"roc_auc", p.cv.roc_auc},
              {"roc_auc_std", p.cv.roc_auc_std},
              {"per_fold", std::move(folds)}};
}

}  // namespace

json report_json(const GridSearchResult& r) {
  json out = point_json(r.kind, r.best_point());
  out["kind"] = to_string(r.kind);
  out["best_index"] = r.best;
  json table = json::array();
  for (const auto& p : r.table) {
    json row = point_json(r.kind, p);
    row.erase("per_fold");
    table.push_back(std::move(row));
  }
  out["grid"] = std::move(table);
  return out;
}

}  // namespace raseg::learn
