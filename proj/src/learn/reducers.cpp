#include "raseg/learn/reducers.hpp"

#include <Eigen/Dense>
#include <Eigen/SVD>

namespace raseg::learn {

using Eigen::MatrixXd;
using Eigen::VectorXd;

std::string to_string(ReducerKind k) { return k == ReducerKind::Pca ? "pca" : "lda"; }

ReducerKind parse_reducer(const std::string& name) {
  if (name == "pca") return ReducerKind::Pca;
  if (name == "lda") return ReducerKind::Lda;
  throw ValidationError("unknown reducer '" + name + "' (expected pca or lda)");
}

MatrixXd ReducerModel::transform(const MatrixXd& X) const {
  if (X.cols() != mean.size()) {
    throw DimensionError("reducer expects " + std::to_string(mean.size()) + " features, got " +
                         std::to_string(X.cols()));
  }
  return (X.rowwise() - mean.transpose()) * projection.transpose();
}

namespace {

void check_matrix(const MatrixXd& X, const char* who) {
  if (X.rows() < 2) throw ValidationError(std::string(who) + ": need at least 2 samples");
  if (X.cols() < 1) throw ValidationError(std::string(who) + ": need at least 1 feature");
  if (!X.allFinite()) throw ValidationError(std::string(who) + ": features must be finite");
}

template <typename Row>
void fix_sign(Row&& v) {
  Eigen::Index arg = 0;
  v.cwiseAbs().maxCoeff(&arg);
  if (v(arg) < 0) v *= -1.0;
}

}  // namespace

ReducerModel pca_fit(const MatrixXd& X, double threshold) {
  check_matrix(X, "pca_fit");
  if (!(threshold > 0.0 && threshold <= 1.0)) throw ValidationError("pca_fit: variance threshold must be in (0,1]");
  ReducerModel m;
  m.kind = ReducerKind::Pca;
  m.mean = X.colwise().mean().transpose();
  const MatrixXd Xc = X.rowwise() - m.mean.transpose();
  const Eigen::BDCSVD<MatrixXd> svd(Xc, Eigen::ComputeThinV);
  const VectorXd var = svd.singularValues().array().square() / static_cast<double>(X.rows() - 1);
  const double total = var.sum();
  if (!(total > 0.0)) {
    m.degenerate = true;
    m.projection = MatrixXd::Zero(1, X.cols());
    m.projection(0, 0) = 1.0;
    m.explained_variance = VectorXd::Zero(1);
    m.explained_variance_ratio = VectorXd::Zero(1);
    return m;
  }
  const VectorXd ratio = var / total;
  Eigen::Index k = 0;
  double cum = 0.0;
  while (k < ratio.size()) {
    cum += ratio(k++);
    if (cum >= threshold - 1e-12) break;
  }
  m.projection = svd.matrixV().leftCols(k).transpose();
  for (Eigen::Index i = 0; i < k; ++i) fix_sign(m.projection.row(i));
  m.explained_variance = var.head(k);
  m.explained_variance_ratio = ratio.head(k);
  return m;
}

ReducerModel lda_fit(const MatrixXd& X, std::span<const int> y, double shrinkage) {
  check_matrix(X, "lda_fit");
  if (static_cast<Eigen::Index>(y.size()) != X.rows()) throw ValidationError("lda_fit: X and y differ in length");
  const Eigen::Index d = X.cols();
  VectorXd mu[2] = {VectorXd::Zero(d), VectorXd::Zero(d)};
  long count[2] = {0, 0};
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    const int c = y[i];
    if (c != 0 && c != 1) throw ValidationError("lda_fit: labels must be binary");
    mu[c] += X.row(i).transpose();
    ++count[c];
  }
  if (count[0] < 2 || count[1] < 2) throw ValidationError("lda_fit: each class needs at least 2 samples");
  mu[0] /= static_cast<double>(count[0]);
  mu[1] /= static_cast<double>(count[1]);

  MatrixXd Xw(X.rows(), d);
  for (Eigen::Index i = 0; i < X.rows(); ++i) Xw.row(i) = X.row(i) - mu[y[i]].transpose();
  const double dof = static_cast<double>(X.rows() - 2);

  ReducerModel m;
  m.kind = ReducerKind::Lda;
  m.mean = X.colwise().mean().transpose();
  const VectorXd diff = mu[1] - mu[0];
  VectorXd w;

  // Whitening route: scale features, SVD the within-class residuals, and
  // express the class-mean difference in the whitened basis.
  VectorXd sd = (Xw.array().square().colwise().sum() / dof).sqrt().transpose();
  for (Eigen::Index k = 0; k < d; ++k) {
    if (sd(k) == 0.0) sd(k) = 1.0;
  }
  const MatrixXd Z = (Xw.array().rowwise() / sd.transpose().array()).matrix() / std::sqrt(dof);
  const Eigen::BDCSVD<MatrixXd> svd(Z, Eigen::ComputeThinV);
  const VectorXd& s = svd.singularValues();
  const double tol = 1e-4;
  Eigen::Index rank = 0;
  while (rank < s.size() && s(rank) > tol) ++rank;

  if (rank == d) {
    // scalings map raw features to whitened coordinates.
    const MatrixXd scalings = sd.cwiseInverse().asDiagonal() * svd.matrixV().leftCols(rank) *
                              s.head(rank).cwiseInverse().asDiagonal();
    const VectorXd between = scalings.transpose() * diff;
    w = scalings * between.normalized();
  } else {
    m.shrunk = true;
    MatrixXd Sw = Xw.transpose() * Xw / dof;
    const VectorXd diag = Sw.diagonal();
    Sw *= (1.0 - shrinkage);
    Sw.diagonal() += shrinkage * diag;
    const Eigen::SelfAdjointEigenSolver<MatrixXd> es(Sw);
    const VectorXd& ev = es.eigenvalues();
    const double cutoff = 1e-12 * std::max(ev.maxCoeff(), 0.0);
    VectorXd inv = VectorXd::Zero(ev.size());
    for (Eigen::Index k = 0; k < ev.size(); ++k) {
      if (ev(k) > cutoff) inv(k) = 1.0 / ev(k);
    }
    w = es.eigenvectors() * inv.asDiagonal() * (es.eigenvectors().transpose() * diff);
    const double within = w.dot(Sw * w);
    if (!(within > 0.0)) throw NumericalError("lda_fit: degenerate within-class scatter");
    w /= std::sqrt(within);
  }
  if (!w.allFinite() || w.squaredNorm() == 0.0) throw NumericalError("lda_fit: classes are not separable by a direction");
  if (w.dot(diff) < 0.0) w = -w;
  m.projection = w.transpose();
  return m;
}

void save_reducer(nd::Archive& ar, const ReducerModel& m) {
  ar.metadata["reducer"] = {{"kind", to_string(m.kind)}, {"degenerate", m.degenerate}, {"shrunk", m.shrunk}};
  const auto d = static_cast<std::int64_t>(m.mean.size());
  const auto k = static_cast<std::int64_t>(m.projection.rows());
  ar.put("reducer.mean", {d}, std::vector<double>(m.mean.data(), m.mean.data() + d));
  std::vector<double> proj;
  for (Eigen::Index i = 0; i < m.projection.rows(); ++i)
    for (Eigen::Index j = 0; j < m.projection.cols(); ++j) proj.push_back(m.projection(i, j));
  ar.put("reducer.projection", {k, d}, std::move(proj));
  if (m.explained_variance.size() > 0) {
    const auto n = static_cast<std::int64_t>(m.explained_variance.size());
    ar.put("reducer.explained_variance", {n},
           std::vector<double>(m.explained_variance.data(), m.explained_variance.data() + n));
    ar.put("reducer.explained_variance_ratio", {n},
           std::vector<double>(m.explained_variance_ratio.data(), m.explained_variance_ratio.data() + n));
  }
}

ReducerModel load_reducer(const nd::Archive& ar) {
  if (!ar.metadata.contains("reducer")) throw FormatError("archive holds no reducer");
  ReducerModel m;
  const auto& meta = ar.metadata["reducer"];
  m.kind = parse_reducer(meta.at("kind").get<std::string>());
  m.degenerate = meta.value("degenerate", false);
  m.shrunk = meta.value("shrunk", false);
  const auto& mean = ar.values_f64("reducer.mean", 1);
  m.mean = Eigen::Map<const VectorXd>(mean.data(), static_cast<Eigen::Index>(mean.size()));
  const auto& e = ar.entry("reducer.projection");
  if (e.dims.size() != 2 || e.dims[1] != static_cast<std::int64_t>(mean.size())) {
    throw FormatError("reducer.projection has inconsistent dims");
  }
  m.projection = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      ar.values_f64("reducer.projection", 2).data(), e.dims[0], e.dims[1]);
  if (ar.contains("reducer.explained_variance")) {
    const auto& v = ar.values_f64("reducer.explained_variance", 1);
    const auto& r = ar.values_f64("reducer.explained_variance_ratio", 1);
    m.explained_variance = Eigen::Map<const VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
    m.explained_variance_ratio = Eigen::Map<const VectorXd>(r.data(), static_cast<Eigen::Index>(r.size()));
  }
  return m;
}

}  // namespace raseg::learn
