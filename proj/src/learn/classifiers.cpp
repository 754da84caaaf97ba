#include "raseg/learn/classifiers.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <numeric>

#include <Eigen/Cholesky>

namespace raseg::learn {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using nlohmann::json;

std::string to_string(ClassifierKind k) {
  switch (k) {
    case ClassifierKind::Qda: return "qda";
    case ClassifierKind::Dt: return "dt";
    case ClassifierKind::Rf: return "rf";
    case ClassifierKind::Svc: return "svc";
  }
  return "?";
}

ClassifierKind parse_classifier(const std::string& name) {
  if (name == "qda") return ClassifierKind::Qda;
  if (name == "dt") return ClassifierKind::Dt;
  if (name == "rf") return ClassifierKind::Rf;
  if (name == "svc") return ClassifierKind::Svc;
  throw ValidationError("unknown classifier '" + name + "' (expected qda, dt, rf or svc)");
}

namespace {

std::string kernel_name(KernelKind k) {
  switch (k) {
    case KernelKind::Sigmoid: return "sigmoid";
    case KernelKind::Linear: return "linear";
    case KernelKind::Rbf: return "rbf";
  }
  return "?";
}

KernelKind parse_kernel(const std::string& s) {
  if (s == "sigmoid") return KernelKind::Sigmoid;
  if (s == "linear") return KernelKind::Linear;
  if (s == "rbf") return KernelKind::Rbf;
  throw ValidationError("unknown kernel '" + s + "'");
}

json depth_json(int d) { return d < 0 ? json(nullptr) : json(d); }

void check_xy(const MatrixXd& X, std::span<const int> y, const char* who, bool need_both) {
  if (X.rows() == 0) throw ValidationError(std::string(who) + ": no training samples");
  if (static_cast<Eigen::Index>(y.size()) != X.rows()) {
    throw ValidationError(std::string(who) + ": X has " + std::to_string(X.rows()) + " rows, y has " +
                          std::to_string(y.size()));
  }
  if (!X.allFinite()) throw ValidationError(std::string(who) + ": features must be finite");
  bool seen[2] = {false, false};
  for (int v : y) {
    if (v != 0 && v != 1) throw ValidationError(std::string(who) + ": labels must be binary");
    seen[v] = true;
  }
  if (need_both && !(seen[0] && seen[1])) throw ValidationError(std::string(who) + ": both classes must be present");
}

double stable_logistic(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

}  // namespace

json params_to_json(ClassifierKind kind, const ClassifierParams& p) {
  switch (kind) {
    case ClassifierKind::Qda: return json{{"reg_scale", p.reg_scale}};
    case ClassifierKind::Dt:
      return json{{"criterion", "gini"}, {"max_depth", depth_json(p.max_depth)}, {"min_samples_leaf", p.min_samples_leaf}};
    case ClassifierKind::Rf:
      return json{{"criterion", "gini"},
                  {"n_trees", p.n_trees},
                  {"max_depth", depth_json(p.max_depth)},
                  {"min_samples_leaf", p.min_samples_leaf},
                  {"bootstrap", p.bootstrap},
                  {"max_features", p.max_features == 0 ? json("sqrt") : p.max_features < 0 ? json("all") : json(p.max_features)},
                  {"seed", p.seed}};
    case ClassifierKind::Svc:
      return json{{"kernel", kernel_name(p.kernel)},
                  {"C", p.C},
                  {"gamma", p.gamma > 0 ? json(p.gamma) : json("scale")},
                  {"coef0", p.coef0},
                  {"tol", p.tol},
                  {"max_iter", p.max_iter}};
  }
  return json::object();
}

ClassifierParams params_from_json(ClassifierKind kind, const json& j, const ClassifierParams& d) {
  ClassifierParams p = d;
  try {
    if (j.contains("reg_scale")) p.reg_scale = j["reg_scale"].get<double>();
    if (j.contains("max_depth")) p.max_depth = j["max_depth"].is_null() ? -1 : j["max_depth"].get<int>();
    if (j.contains("min_samples_leaf")) p.min_samples_leaf = j["min_samples_leaf"].get<int>();
    if (j.contains("n_trees")) p.n_trees = j["n_trees"].get<int>();
    if (j.contains("bootstrap")) p.bootstrap = j["bootstrap"].get<bool>();
    if (j.contains("max_features")) {
      const auto& v = j["max_features"];
      if (v.is_string()) {
        if (v == "sqrt") p.max_features = 0;
        else if (v == "all") p.max_features = -1;
        else throw ValidationError("max_features must be 'sqrt', 'all' or an integer");
      } else {
        p.max_features = v.get<int>();
      }
    }
    if (j.contains("seed")) p.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("kernel")) p.kernel = parse_kernel(j["kernel"].get<std::string>());
    if (j.contains("C")) p.C = j["C"].get<double>();
    if (j.contains("gamma")) p.gamma = j["gamma"].is_string() ? 0.0 : j["gamma"].get<double>();
    if (j.contains("coef0")) p.coef0 = j["coef0"].get<double>();
    if (j.contains("tol")) p.tol = j["tol"].get<double>();
    if (j.contains("max_iter")) p.max_iter = j["max_iter"].get<long>();
  } catch (const json::exception& e) {
    throw ValidationError(to_string(kind) + " params: " + e.what());
  }
  if (p.min_samples_leaf < 1) throw ValidationError("min_samples_leaf must be >= 1");
  if (p.n_trees < 1) throw ValidationError("n_trees must be >= 1");
  if (!(p.C > 0)) throw ValidationError("C must be > 0");
  if (!(p.tol > 0)) throw ValidationError("tol must be > 0");
  if (p.max_iter < 1) throw ValidationError("max_iter must be >= 1");
  if (!(p.reg_scale >= 0)) throw ValidationError("reg_scale must be >= 0");
  return p;
}

// ---------------------------------------------------------------------------
// QDA

QdaModel qda_fit(const MatrixXd& X, std::span<const int> y, double reg_scale) {
  check_xy(X, y, "qda_fit", true);
  const Eigen::Index d = X.cols();
  QdaModel m;
  for (int c = 0; c < 2; ++c) {
    std::vector<Eigen::Index> rows;
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
      if (y[i] == c) rows.push_back(i);
    }
    if (rows.size() < 2) throw ValidationError("qda_fit: each class needs at least 2 samples");
    MatrixXd Xc(static_cast<Eigen::Index>(rows.size()), d);
    for (std::size_t k = 0; k < rows.size(); ++k) Xc.row(static_cast<Eigen::Index>(k)) = X.row(rows[k]);
    m.mean[c] = Xc.colwise().mean().transpose();
    const MatrixXd centered = Xc.rowwise() - m.mean[c].transpose();
    m.cov[c] = centered.transpose() * centered / static_cast<double>(rows.size() - 1);
    const double tr = m.cov[c].trace();
    m.cov[c].diagonal().array() += tr > 0 ? reg_scale * tr / static_cast<double>(d) : std::max(reg_scale, 1e-12);
    m.log_prior[c] = std::log(static_cast<double>(rows.size()) / static_cast<double>(X.rows()));
  }
  return m;
}

MatrixXd qda_joint_log_likelihood(const QdaModel& m, const MatrixXd& X) {
  const Eigen::Index d = m.mean[0].size();
  if (X.cols() != d) throw DimensionError("qda: expected " + std::to_string(d) + " features");
  MatrixXd out(X.rows(), 2);
  for (int c = 0; c < 2; ++c) {
    const Eigen::LLT<MatrixXd> llt(m.cov[c]);
    if (llt.info() != Eigen::Success) throw NumericalError("qda: class covariance is not positive definite");
    const MatrixXd L = llt.matrixL();
    const double log_det = 2.0 * L.diagonal().array().log().sum();
    const MatrixXd diff = (X.rowwise() - m.mean[c].transpose()).transpose();
    const MatrixXd z = llt.matrixL().solve(diff);
    const VectorXd maha = z.colwise().squaredNorm().transpose();
    out.col(c) = (-0.5 * (maha.array() + log_det + static_cast<double>(d) * std::log(2.0 * std::numbers::pi)) +
                  m.log_prior[c])
                     .matrix();
  }
  return out;
}

MatrixXd qda_predict_proba(const QdaModel& m, const MatrixXd& X) {
  const MatrixXd jll = qda_joint_log_likelihood(m, X);
  MatrixXd p(X.rows(), 2);
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    const double mx = jll.row(i).maxCoeff();
    const double lse = mx + std::log(std::exp(jll(i, 0) - mx) + std::exp(jll(i, 1) - mx));
    p(i, 0) = std::exp(jll(i, 0) - lse);
    p(i, 1) = std::exp(jll(i, 1) - lse);
  }
  return p;
}

// ---------------------------------------------------------------------------
// CART

double DecisionTree::predict_p1(const Eigen::Ref<const Eigen::RowVectorXd>& x) const {
  int k = 0;
  while (nodes[k].feature >= 0) k = x(nodes[k].feature) <= nodes[k].threshold ? nodes[k].left : nodes[k].right;
  return nodes[k].p1;
}

int DecisionTree::depth() const {
  std::vector<int> depth(nodes.size(), 0);
  int best = 0;
  for (std::size_t k = 0; k < nodes.size(); ++k) {
    best = std::max(best, depth[k]);
    if (nodes[k].feature >= 0) {
      depth[nodes[k].left] = depth[k] + 1;
      depth[nodes[k].right] = depth[k] + 1;
    }
  }
  return best;
}

namespace {

double weighted_gini(long l0, long l1, long r0, long r1) {
  const double nl = static_cast<double>(l0 + l1), nr = static_cast<double>(r0 + r1);
  const double gl = nl > 0 ? nl - (static_cast<double>(l0) * l0 + static_cast<double>(l1) * l1) / nl : 0.0;
  const double gr = nr > 0 ? nr - (static_cast<double>(r0) * r0 + static_cast<double>(r1) * r1) / nr : 0.0;
  return (gl + gr) / (nl + nr);
}

class TreeBuilder {
 public:
  TreeBuilder(const MatrixXd& X, std::span<const int> y, const TreeParams& p, std::uint64_t seed)
      : X_(X), y_(y), p_(p), rng_(seed) {}

  DecisionTree run(std::vector<int> idx) {
    build(idx, 0);
    return std::move(tree_);
  }

 private:
  int build(std::vector<int>& idx, int depth) {
    const int id = static_cast<int>(tree_.nodes.size());
    tree_.nodes.emplace_back();
    long c1 = 0;
    for (int i : idx) c1 += y_[i];
    const long n = static_cast<long>(idx.size()), c0 = n - c1;
    tree_.nodes[id].p1 = static_cast<double>(c1) / static_cast<double>(n);
    tree_.nodes[id].samples = static_cast<int>(n);
    if (c0 == 0 || c1 == 0) return id;
    if (p_.max_depth >= 0 && depth >= p_.max_depth) return id;
    if (n < 2L * p_.min_samples_leaf) return id;

    const int d = static_cast<int>(X_.cols());
    std::vector<int> feats(d);
    std::iota(feats.begin(), feats.end(), 0);
    if (p_.max_features > 0 && p_.max_features < d) {
      for (int k = 0; k < p_.max_features; ++k) {
        const int j = k + static_cast<int>(rng_.below(static_cast<std::uint64_t>(d - k)));
        std::swap(feats[k], feats[j]);
      }
      feats.resize(p_.max_features);
      std::sort(feats.begin(), feats.end());
    }

    double best_imp = weighted_gini(c0, c1, 0, 0);
    int best_f = -1;
    double best_thr = 0.0;
    std::vector<std::pair<double, int>> vals(idx.size());
    for (int f : feats) {
      for (std::size_t k = 0; k < idx.size(); ++k) vals[k] = {X_(idx[k], f), y_[idx[k]]};
      std::sort(vals.begin(), vals.end());
      long l0 = 0, l1 = 0;
      for (std::size_t k = 0; k + 1 < vals.size(); ++k) {
        (vals[k].second ? l1 : l0)++;
        if (!(vals[k].first < vals[k + 1].first)) continue;
        const long nl = static_cast<long>(k + 1);
        if (nl < p_.min_samples_leaf || n - nl < p_.min_samples_leaf) continue;
        const double imp = weighted_gini(l0, l1, c0 - l0, c1 - l1);
        if (imp < best_imp) {
          best_imp = imp;
          best_f = f;
          best_thr = 0.5 * (vals[k].first + vals[k + 1].first);
          if (!(best_thr < vals[k + 1].first)) best_thr = vals[k].first;
        }
      }
    }
    if (best_f < 0) return id;

    std::vector<int> left, right;
    for (int i : idx) (X_(i, best_f) <= best_thr ? left : right).push_back(i);
    idx.clear();
    idx.shrink_to_fit();
    tree_.nodes[id].feature = best_f;
    tree_.nodes[id].threshold = best_thr;
    const int l = build(left, depth + 1);
    tree_.nodes[id].left = l;
    const int r = build(right, depth + 1);
    tree_.nodes[id].right = r;
    return id;
  }

  const MatrixXd& X_;
  std::span<const int> y_;
  TreeParams p_;
  Rng rng_;
  DecisionTree tree_;
};

}  // namespace

DecisionTree dt_fit(const MatrixXd& X, std::span<const int> y, const TreeParams& params,
                    std::span<const int> sample_index, std::uint64_t feature_seed) {
  check_xy(X, y, "dt_fit", false);
  if (params.min_samples_leaf < 1) throw ValidationError("dt_fit: min_samples_leaf must be >= 1");
  std::vector<int> idx;
  if (sample_index.empty()) {
    idx.resize(static_cast<std::size_t>(X.rows()));
    std::iota(idx.begin(), idx.end(), 0);
  } else {
    idx.assign(sample_index.begin(), sample_index.end());
    for (int i : idx) {
      if (i < 0 || i >= X.rows()) throw ValidationError("dt_fit: sample index out of range");
    }
  }
  return TreeBuilder(X, y, params, feature_seed).run(std::move(idx));
}

MatrixXd dt_predict_proba(const DecisionTree& t, const MatrixXd& X) {
  MatrixXd p(X.rows(), 2);
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    p(i, 1) = t.predict_p1(X.row(i));
    p(i, 0) = 1.0 - p(i, 1);
  }
  return p;
}

RandomForest rf_fit(const MatrixXd& X, std::span<const int> y, const ClassifierParams& params) {
  check_xy(X, y, "rf_fit", false);
  const int d = static_cast<int>(X.cols());
  TreeParams tp{params.max_depth, params.min_samples_leaf, 0};
  tp.max_features = params.max_features == 0   ? static_cast<int>(std::ceil(std::sqrt(static_cast<double>(d))))
                    : params.max_features < 0 ? d
                                              : params.max_features;
  RandomForest f;
  const int n = static_cast<int>(X.rows());
  for (int t = 0; t < params.n_trees; ++t) {
    Rng rng(derive_seed(params.seed, static_cast<std::uint64_t>(t)));
    std::vector<int> idx(n);
    if (params.bootstrap) {
      for (int& i : idx) i = static_cast<int>(rng.below(static_cast<std::uint64_t>(n)));
    } else {
      std::iota(idx.begin(), idx.end(), 0);
    }
    f.trees.push_back(dt_fit(X, y, tp, idx, derive_seed(params.seed, static_cast<std::uint64_t>(t), 1)));
  }
  return f;
}

MatrixXd rf_predict_proba(const RandomForest& f, const MatrixXd& X) {
  MatrixXd p = MatrixXd::Zero(X.rows(), 2);
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    double acc = 0.0;
    for (const auto& t : f.trees) acc += t.predict_p1(X.row(i));
    p(i, 1) = acc / static_cast<double>(f.trees.size());
    p(i, 0) = 1.0 - p(i, 1);
  }
  return p;
}

// ---------------------------------------------------------------------------
// SVC

double kernel_value(KernelKind k, double gamma, double coef0, const Eigen::Ref<const Eigen::RowVectorXd>& a,
                    const Eigen::Ref<const Eigen::RowVectorXd>& b) {
  switch (k) {
    case KernelKind::Sigmoid: return std::tanh(gamma * a.dot(b) + coef0);
    case KernelKind::Linear: return a.dot(b);
    case KernelKind::Rbf: return std::exp(-gamma * (a - b).squaredNorm());
  }
  return 0.0;
}

SvcModel svc_fit(const MatrixXd& X, std::span<const int> labels, const ClassifierParams& params) {
  check_xy(X, labels, "svc_fit", true);
  const Eigen::Index n = X.rows();
  SvcModel m;
  m.kernel = params.kernel;
  m.coef0 = params.coef0;
  m.C = params.C;
  if (params.gamma > 0) {
    m.gamma = params.gamma;
  } else {
    const double mean = X.mean();
    const double var = (X.array() - mean).square().mean();
    m.gamma = var > 0 ? 1.0 / (static_cast<double>(X.cols()) * var) : 1.0;
  }
  m.y_signed.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) m.y_signed(i) = labels[i] == 1 ? 1 : -1;
  const Eigen::VectorXi& y = m.y_signed;

  MatrixXd Q(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j <= i; ++j) {
      Q(i, j) = Q(j, i) = y(i) * y(j) * kernel_value(m.kernel, m.gamma, m.coef0, X.row(i), X.row(j));
    }
  }
  constexpr double kTau = 1e-12;
  const double C = params.C;
  VectorXd alpha = VectorXd::Zero(n);
  VectorXd G = VectorXd::Constant(n, -1.0);
  auto upper = [&](Eigen::Index t) { return alpha(t) >= C; };
  auto lower = [&](Eigen::Index t) { return alpha(t) <= 0.0; };

  long iter = 0;
  double gap = std::numeric_limits<double>::infinity();
  while (true) {
    double Gmax = -std::numeric_limits<double>::infinity(), Gmax2 = -std::numeric_limits<double>::infinity();
    Eigen::Index i = -1, j = -1;
    for (Eigen::Index t = 0; t < n; ++t) {
      if (y(t) == 1) {
        if (!upper(t) && -G(t) >= Gmax) {
          Gmax = -G(t);
          i = t;
        }
      } else if (!lower(t) && G(t) >= Gmax) {
        Gmax = G(t);
        i = t;
      }
    }
    double obj_min = std::numeric_limits<double>::infinity();
    for (Eigen::Index t = 0; t < n; ++t) {
      if (y(t) == 1) {
        if (lower(t)) continue;
        const double grad_diff = Gmax + G(t);
        Gmax2 = std::max(Gmax2, G(t));
        if (i >= 0 && grad_diff > 0) {
          const double quad = Q(i, i) + Q(t, t) - 2.0 * y(i) * Q(i, t);
          const double obj = -(grad_diff * grad_diff) / (quad > 0 ? quad : kTau);
          if (obj <= obj_min) {
            obj_min = obj;
            j = t;
          }
        }
      } else {
        if (upper(t)) continue;
        const double grad_diff = Gmax - G(t);
        Gmax2 = std::max(Gmax2, -G(t));
        if (i >= 0 && grad_diff > 0) {
          const double quad = Q(i, i) + Q(t, t) + 2.0 * y(i) * Q(i, t);
          const double obj = -(grad_diff * grad_diff) / (quad > 0 ? quad : kTau);
          if (obj <= obj_min) {
            obj_min = obj;
            j = t;
          }
        }
      }
    }
    gap = Gmax + Gmax2;
    if (gap < params.tol || j < 0) break;
    if (iter >= params.max_iter) {
      char buf[128];
      std::snprintf(buf, sizeof buf, "svc_fit: no convergence after %ld iterations (KKT gap %.3g)", iter, gap);
      throw ConvergenceError(buf, gap);
    }
    ++iter;

    const double ai = alpha(i), aj = alpha(j);
    if (y(i) != y(j)) {
      double quad = Q(i, i) + Q(j, j) + 2.0 * Q(i, j);
      if (quad <= 0) quad = kTau;
      const double delta = (-G(i) - G(j)) / quad;
      const double diff = alpha(i) - alpha(j);
      alpha(i) += delta;
      alpha(j) += delta;
      if (diff > 0) {
        if (alpha(j) < 0) {
          alpha(j) = 0;
          alpha(i) = diff;
        }
      } else if (alpha(i) < 0) {
        alpha(i) = 0;
        alpha(j) = -diff;
      }
      if (diff > 0) {
        if (alpha(i) > C) {
          alpha(i) = C;
          alpha(j) = C - diff;
        }
      } else if (alpha(j) > C) {
        alpha(j) = C;
        alpha(i) = C + diff;
      }
    } else {
      double quad = Q(i, i) + Q(j, j) - 2.0 * Q(i, j);
      if (quad <= 0) quad = kTau;
      const double delta = (G(i) - G(j)) / quad;
      const double sum = alpha(i) + alpha(j);
      alpha(i) -= delta;
      alpha(j) += delta;
      if (sum > C) {
        if (alpha(i) > C) {
          alpha(i) = C;
          alpha(j) = sum - C;
        }
      } else if (alpha(j) < 0) {
        alpha(j) = 0;
        alpha(i) = sum;
      }
      if (sum > C) {
        if (alpha(j) > C) {
          alpha(j) = C;
          alpha(i) = sum - C;
        }
      } else if (alpha(i) < 0) {
        alpha(i) = 0;
        alpha(j) = sum;
      }
    }
    const double di = alpha(i) - ai, dj = alpha(j) - aj;
    G += Q.col(i) * di + Q.col(j) * dj;
  }

  // Bias from free vectors, or the midpoint of the feasible interval.
  double ub = std::numeric_limits<double>::infinity(), lb = -ub, sum_free = 0.0;
  long n_free = 0;
  for (Eigen::Index t = 0; t < n; ++t) {
    const double yG = y(t) * G(t);
    if (upper(t)) {
      if (y(t) == -1) ub = std::min(ub, yG);
      else lb = std::max(lb, yG);
    } else if (lower(t)) {
      if (y(t) == 1) ub = std::min(ub, yG);
      else lb = std::max(lb, yG);
    } else {
      ++n_free;
      sum_free += yG;
    }
  }
  const double rho = n_free > 0 ? sum_free / static_cast<double>(n_free) : 0.5 * (ub + lb);
  m.bias = -rho;
  m.alpha = alpha;
  m.iterations = iter;
  m.kkt_gap = gap;

  std::vector<Eigen::Index> sv;
  for (Eigen::Index t = 0; t < n; ++t) {
    if (alpha(t) > 0) sv.push_back(t);
  }
  m.support.resize(static_cast<Eigen::Index>(sv.size()), X.cols());
  m.dual_coef.resize(static_cast<Eigen::Index>(sv.size()));
  for (std::size_t k = 0; k < sv.size(); ++k) {
    m.support.row(static_cast<Eigen::Index>(k)) = X.row(sv[k]);
    m.dual_coef(static_cast<Eigen::Index>(k)) = alpha(sv[k]) * y(sv[k]);
  }
  return m;
}

VectorXd svc_decision(const SvcModel& m, const MatrixXd& X) {
  if (m.support.rows() > 0 && X.cols() != m.support.cols()) {
    throw DimensionError("svc: expected " + std::to_string(m.support.cols()) + " features");
  }
  VectorXd f = VectorXd::Constant(X.rows(), m.bias);
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    for (Eigen::Index k = 0; k < m.support.rows(); ++k) {
      f(i) += m.dual_coef(k) * kernel_value(m.kernel, m.gamma, m.coef0, m.support.row(k), X.row(i));
    }
  }
  return f;
}

MatrixXd svc_predict_proba(const SvcModel& m, const MatrixXd& X) {
  const VectorXd f = svc_decision(m, X);
  MatrixXd p(X.rows(), 2);
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    p(i, 1) = stable_logistic(f(i));
    p(i, 0) = 1.0 - p(i, 1);
  }
  return p;
}

// ---------------------------------------------------------------------------
// Uniform interface

MatrixXd Classifier::predict_proba(const MatrixXd& X) const {
  return std::visit(
      [&](const auto& mdl) -> MatrixXd {
        using M = std::decay_t<decltype(mdl)>;
        if constexpr (std::is_same_v<M, QdaModel>) return qda_predict_proba(mdl, X);
        else if constexpr (std::is_same_v<M, DecisionTree>) return dt_predict_proba(mdl, X);
        else if constexpr (std::is_same_v<M, RandomForest>) return rf_predict_proba(mdl, X);
        else return svc_predict_proba(mdl, X);
      },
      model);
}

std::vector<int> Classifier::predict(const MatrixXd& X) const {
  std::vector<int> out(static_cast<std::size_t>(X.rows()));
  if (const auto* svc = std::get_if<SvcModel>(&model)) {
    const VectorXd f = svc_decision(*svc, X);
    for (Eigen::Index i = 0; i < X.rows(); ++i) out[i] = f(i) > 0 ? 1 : 0;
    return out;
  }
  const MatrixXd p = predict_proba(X);
  for (Eigen::Index i = 0; i < X.rows(); ++i) out[i] = p(i, 1) > p(i, 0) ? 1 : 0;
  return out;
}

Classifier fit_classifier(ClassifierKind kind, const ClassifierParams& params, const MatrixXd& X,
                          std::span<const int> y) {
  Classifier c{kind, params, QdaModel{}};
  switch (kind) {
    case ClassifierKind::Qda: c.model = qda_fit(X, y, params.reg_scale); break;
    case ClassifierKind::Dt:
      c.model = dt_fit(X, y, TreeParams{params.max_depth, params.min_samples_leaf, -1});
      break;
    case ClassifierKind::Rf: c.model = rf_fit(X, y, params); break;
    case ClassifierKind::Svc: c.model = svc_fit(X, y, params); break;
  }
  return c;
}

namespace {

std::vector<double> flatten_rows(const MatrixXd& M) {
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(M.size()));
  for (Eigen::Index i = 0; i < M.rows(); ++i)
    for (Eigen::Index j = 0; j < M.cols(); ++j) out.push_back(M(i, j));
  return out;
}

MatrixXd rows_matrix(const nd::Archive& ar, const std::string& name, int rank = 2) {
  const auto& e = ar.entry(name);
  const auto& v = ar.values_f64(name, rank);
  const Eigen::Index r = e.dims[0];
  const Eigen::Index c = static_cast<Eigen::Index>(r > 0 ? v.size() / static_cast<std::size_t>(r) : 0);
  MatrixXd M(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) M(i, j) = v[static_cast<std::size_t>(i * c + j)];
  return M;
}

void put_tree(nd::Archive& ar, const std::string& name, const DecisionTree& t) {
  std::vector<double> v;
  for (const auto& n : t.nodes) {
    v.insert(v.end(), {static_cast<double>(n.feature), n.threshold, static_cast<double>(n.left),
                       static_cast<double>(n.right), n.p1, static_cast<double>(n.samples)});
  }
  ar.put(name, {static_cast<std::int64_t>(t.nodes.size()), 6}, std::move(v));
}

DecisionTree get_tree(const nd::Archive& ar, const std::string& name) {
  const MatrixXd M = rows_matrix(ar, name);
  if (M.cols() != 6 || M.rows() < 1) throw FormatError(name + ": malformed tree");
  DecisionTree t;
  const int n = static_cast<int>(M.rows());
  for (int i = 0; i < n; ++i) {
    TreeNode nd{static_cast<int>(M(i, 0)), M(i, 1), static_cast<int>(M(i, 2)), static_cast<int>(M(i, 3)), M(i, 4),
                static_cast<int>(M(i, 5))};
    if (nd.feature >= 0 && (nd.left <= i || nd.left >= n || nd.right <= i || nd.right >= n)) {
      throw FormatError(name + ": node " + std::to_string(i) + " has invalid children");
    }
    t.nodes.push_back(nd);
  }
  return t;
}

}  // namespace

void save_classifier(nd::Archive& ar, const Classifier& c) {
  ar.metadata["classifier"] = {{"kind", to_string(c.kind)}, {"params", params_to_json(c.kind, c.params)}};
  if (const auto* q = std::get_if<QdaModel>(&c.model)) {
    const auto d = static_cast<std::int64_t>(q->mean[0].size());
    ar.put("qda.log_prior", {2}, {q->log_prior[0], q->log_prior[1]});
    std::vector<double> means, covs;
    for (int k = 0; k < 2; ++k) {
      means.insert(means.end(), q->mean[k].data(), q->mean[k].data() + d);
      const auto f = flatten_rows(q->cov[k]);
      covs.insert(covs.end(), f.begin(), f.end());
    }
    ar.put("qda.mean", {2, d}, std::move(means));
    ar.put("qda.cov", {2, d, d}, std::move(covs));
  } else if (const auto* t = std::get_if<DecisionTree>(&c.model)) {
    put_tree(ar, "dt.nodes", *t);
  } else if (const auto* f = std::get_if<RandomForest>(&c.model)) {
    char name[32];
    for (std::size_t k = 0; k < f->trees.size(); ++k) {
      std::snprintf(name, sizeof name, "rf.tree.%05zu", k);
      put_tree(ar, name, f->trees[k]);
    }
  } else if (const auto* s = std::get_if<SvcModel>(&c.model)) {
    ar.metadata["classifier"]["kernel"] = kernel_name(s->kernel);
    ar.put("svc.support", {s->support.rows(), s->support.cols()}, flatten_rows(s->support));
    ar.put("svc.dual_coef", {s->dual_coef.size()},
           std::vector<double>(s->dual_coef.data(), s->dual_coef.data() + s->dual_coef.size()));
    ar.put("svc.scalars", {4}, {s->gamma, s->coef0, s->bias, s->C});
  }
}

Classifier load_classifier(const nd::Archive& ar) {
  if (!ar.metadata.contains("classifier")) throw FormatError("archive holds no classifier");
  const auto& meta = ar.metadata["classifier"];
  Classifier c;
  try {
    c.kind = parse_classifier(meta.at("kind").get<std::string>());
    c.params = params_from_json(c.kind, meta.at("params"));
  } catch (const ValidationError& e) {
    throw FormatError(std::string("classifier metadata: ") + e.what());
  }
  switch (c.kind) {
    case ClassifierKind::Qda: {
      QdaModel q;
      const auto& lp = ar.values_f64("qda.log_prior", 1);
      const MatrixXd means = rows_matrix(ar, "qda.mean");
      const auto& e = ar.entry("qda.cov");
      const auto& cv = ar.values_f64("qda.cov", 3);
      const Eigen::Index d = means.cols();
      if (lp.size() != 2 || means.rows() != 2 || e.dims[1] != d || e.dims[2] != d) {
        throw FormatError("qda entries have inconsistent dims");
      }
      for (int k = 0; k < 2; ++k) {
        q.log_prior[k] = lp[k];
        q.mean[k] = means.row(k).transpose();
        q.cov[k].resize(d, d);
        for (Eigen::Index i = 0; i < d; ++i)
          for (Eigen::Index j = 0; j < d; ++j) q.cov[k](i, j) = cv[static_cast<std::size_t>((k * d + i) * d + j)];
      }
      c.model = std::move(q);
      break;
    }
    case ClassifierKind::Dt: c.model = get_tree(ar, "dt.nodes"); break;
    case ClassifierKind::Rf: {
      RandomForest f;
      for (const auto& [name, e] : ar.entries()) {
        if (name.rfind("rf.tree.", 0) == 0) f.trees.push_back(get_tree(ar, name));
      }
      if (f.trees.empty()) throw FormatError("random forest archive holds no trees");
      c.model = std::move(f);
      break;
    }
    case ClassifierKind::Svc: {
      SvcModel s;
      s.kernel = parse_kernel(meta.value("kernel", "sigmoid"));
      s.support = rows_matrix(ar, "svc.support");
      const auto& dc = ar.values_f64("svc.dual_coef", 1);
      s.dual_coef = Eigen::Map<const VectorXd>(dc.data(), static_cast<Eigen::Index>(dc.size()));
      const auto& sc = ar.values_f64("svc.scalars", 1);
      if (sc.size() != 4 || s.dual_coef.size() != s.support.rows()) throw FormatError("svc entries are inconsistent");
      s.gamma = sc[0];
      s.coef0 = sc[1];
      s.bias = sc[2];
      s.C = sc[3];
      c.model = std::move(s);
      break;
    }
  }
  return c;
}

}  // namespace raseg::learn
