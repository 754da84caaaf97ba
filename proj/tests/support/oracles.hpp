#pragma once

// Reference implementations used only by tests. They favour the most direct
// formulation over speed and share no code with the library.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <vector>

#include <Eigen/Dense>

namespace oracle {

/// Direct-loop 3D cross-correlation on flat (N,C,D,H,W) buffers.
struct Dims5 {
  int n, c, d, h, w;
  std::size_t numel() const { return static_cast<std::size_t>(n) * c * d * h * w; }
};

inline std::vector<double> conv3d(const std::vector<double>& x, Dims5 xs, const std::vector<double>& w, Dims5 ws,
                                  const std::vector<double>& b, int stride, int pad, Dims5& ys) {
  ys = {xs.n, ws.n, (xs.d + 2 * pad - ws.d) / stride + 1, (xs.h + 2 * pad - ws.h) / stride + 1,
        (xs.w + 2 * pad - ws.w) / stride + 1};
  std::vector<double> y(ys.numel(), 0.0);
  auto X = [&](int n, int c, int d, int h, int ww) {
    return x[(((static_cast<std::size_t>(n) * xs.c + c) * xs.d + d) * xs.h + h) * xs.w + ww];
  };
  auto W = [&](int o, int c, int a, int bb, int e) {
    return w[(((static_cast<std::size_t>(o) * ws.c + c) * ws.d + a) * ws.h + bb) * ws.w + e];
  };
  for (int n = 0; n < ys.n; ++n)
    for (int o = 0; o < ys.c; ++o)
      for (int d = 0; d < ys.d; ++d)
        for (int h = 0; h < ys.h; ++h)
          for (int ww = 0; ww < ys.w; ++ww) {
            double acc = b.empty() ? 0.0 : b[o];
            for (int c = 0; c < xs.c; ++c)
              for (int a = 0; a < ws.d; ++a)
                for (int bb = 0; bb < ws.h; ++bb)
                  for (int e = 0; e < ws.w; ++e) {
                    const int zd = d * stride - pad + a, zh = h * stride - pad + bb, zw = ww * stride - pad + e;
                    if (zd < 0 || zd >= xs.d || zh < 0 || zh >= xs.h || zw < 0 || zw >= xs.w) continue;
                    acc += X(n, c, zd, zh, zw) * W(o, c, a, bb, e);
                  }
            y[(((static_cast<std::size_t>(n) * ys.c + o) * ys.d + d) * ys.h + h) * ys.w + ww] = acc;
          }
  return y;
}

/// Scatter form of the transposed convolution; w is (Cin, Cout, k, k, k).
inline std::vector<double> tconv3d(const std::vector<double>& x, Dims5 xs, const std::vector<double>& w, Dims5 ws,
                                   int stride, int pad, int out_pad, Dims5& ys) {
  ys = {xs.n, ws.c, (xs.d - 1) * stride - 2 * pad + ws.d + out_pad, (xs.h - 1) * stride - 2 * pad + ws.h + out_pad,
        (xs.w - 1) * stride - 2 * pad + ws.w + out_pad};
  std::vector<double> y(ys.numel(), 0.0);
  for (int n = 0; n < xs.n; ++n)
    for (int ci = 0; ci < xs.c; ++ci)
      for (int d = 0; d < xs.d; ++d)
        for (int h = 0; h < xs.h; ++h)
          for (int ww = 0; ww < xs.w; ++ww) {
            const double v = x[(((static_cast<std::size_t>(n) * xs.c + ci) * xs.d + d) * xs.h + h) * xs.w + ww];
            for (int co = 0; co < ws.c; ++co)
              for (int a = 0; a < ws.d; ++a)
                for (int bb = 0; bb < ws.h; ++bb)
                  for (int e = 0; e < ws.w; ++e) {
                    const int od = d * stride - pad + a, oh = h * stride - pad + bb, ow = ww * stride - pad + e;
                    if (od < 0 || od >= ys.d || oh < 0 || oh >= ys.h || ow < 0 || ow >= ys.w) continue;
                    y[(((static_cast<std::size_t>(n) * ys.c + co) * ys.d + od) * ys.h + oh) * ys.w + ow] +=
                        v * w[(((static_cast<std::size_t>(ci) * ws.c + co) * ws.d + a) * ws.h + bb) * ws.w + e];
                  }
          }
  return y;
}

/// Mann-Whitney AUC by counting every (positive, negative) pair.
inline double pair_count_auc(const std::vector<int>& y, const std::vector<double>& s) {
  double wins = 0.0;
  long pairs = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i] != 1) continue;
    for (std::size_t j = 0; j < y.size(); ++j) {
      if (y[j] != 0) continue;
      ++pairs;
      if (s[i] > s[j]) wins += 1.0;
      else if (s[i] == s[j]) wins += 0.5;
    }
  }
  return wins / static_cast<double>(pairs);
}

/// log N(x; mu, cov) computed from the determinant and explicit inverse.
inline double gaussian_log_density(const Eigen::VectorXd& x, const Eigen::VectorXd& mu, const Eigen::MatrixXd& cov) {
  const Eigen::FullPivLU<Eigen::MatrixXd> lu(cov);
  const Eigen::VectorXd diff = x - mu;
  const double quad = diff.dot(lu.inverse() * diff);
  return -0.5 * (quad + std::log(lu.determinant()) + static_cast<double>(x.size()) * std::log(2.0 * std::numbers::pi));
}

inline double gini(double c0, double c1) {
  const double n = c0 + c1;
  if (n == 0) return 0.0;
  const double p0 = c0 / n, p1 = c1 / n;
  return 1.0 - p0 * p0 - p1 * p1;
}

struct Split {
  int feature = -1;
  double threshold = 0.0;
  double impurity = std::numeric_limits<double>::infinity();
};

/// Tries every midpoint of every feature and returns the lowest weighted
/// child impurity (first feature, then smallest threshold on ties).
inline Split exhaustive_root_split(const Eigen::MatrixXd& X, const std::vector<int>& y) {
  Split best;
  const double n = static_cast<double>(y.size());
  for (int f = 0; f < X.cols(); ++f) {
    std::vector<double> v(X.col(f).data(), X.col(f).data() + X.rows());
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
    for (std::size_t k = 0; k + 1 < v.size(); ++k) {
      const double thr = 0.5 * (v[k] + v[k + 1]);
      double l0 = 0, l1 = 0, r0 = 0, r1 = 0;
      for (int i = 0; i < X.rows(); ++i) {
        if (X(i, f) <= thr) (y[i] ? l1 : l0) += 1;
        else (y[i] ? r1 : r0) += 1;
      }
      const double imp = ((l0 + l1) * gini(l0, l1) + (r0 + r1) * gini(r0, r1)) / n;
      if (imp < best.impurity - 1e-12) best = {f, thr, imp};
    }
  }
  return best;
}

/// Largest principal angle (radians) between the row spaces of A and B.
inline double max_principal_angle(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B) {
  const Eigen::MatrixXd Qa = Eigen::HouseholderQR<Eigen::MatrixXd>(A.transpose()).householderQ() *
                             Eigen::MatrixXd::Identity(A.cols(), A.rows());
  const Eigen::MatrixXd Qb = Eigen::HouseholderQR<Eigen::MatrixXd>(B.transpose()).householderQ() *
                             Eigen::MatrixXd::Identity(B.cols(), B.rows());
  const Eigen::VectorXd sv = Eigen::JacobiSVD<Eigen::MatrixXd>(Qa.transpose() * Qb).singularValues();
  return std::acos(std::clamp(sv.minCoeff(), -1.0, 1.0));
}

/// Top-k eigenvectors of the sample covariance, one per row.
inline Eigen::MatrixXd covariance_eigenvectors(const Eigen::MatrixXd& X, int k) {
  const Eigen::MatrixXd C = X.rowwise() - X.colwise().mean();
  const Eigen::MatrixXd S = C.transpose() * C / static_cast<double>(X.rows() - 1);
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(S);
  Eigen::MatrixXd out(k, X.cols());
  for (int i = 0; i < k; ++i) out.row(i) = es.eigenvectors().col(X.cols() - 1 - i).transpose();
  return out;
}

/// Sw^-1 (mu1 - mu0) with Sw the pooled within-class scatter.
inline Eigen::VectorXd fisher_direction(const Eigen::MatrixXd& X, const std::vector<int>& y) {
  Eigen::VectorXd mu[2] = {Eigen::VectorXd::Zero(X.cols()), Eigen::VectorXd::Zero(X.cols())};
  double cnt[2] = {0, 0};
  for (int i = 0; i < X.rows(); ++i) {
    mu[y[i]] += X.row(i).transpose();
    cnt[y[i]] += 1;
  }
  mu[0] /= cnt[0];
  mu[1] /= cnt[1];
  Eigen::MatrixXd Sw = Eigen::MatrixXd::Zero(X.cols(), X.cols());
  for (int i = 0; i < X.rows(); ++i) {
    const Eigen::VectorXd d = X.row(i).transpose() - mu[y[i]];
    Sw += d * d.transpose();
  }
  return Sw.fullPivLu().solve(mu[1] - mu[0]);
}

struct Clusters {
  Eigen::MatrixXd X;
  std::vector<int> y;
};

/// Two isotropic Gaussian blobs centred at -sep/2 and +sep/2 along every
/// axis, alternating labels.
inline Clusters gaussian_clusters(int n, int d, double sep, double sigma, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, sigma);
  Clusters c{Eigen::MatrixXd(n, d), std::vector<int>(static_cast<std::size_t>(n))};
  for (int i = 0; i < n; ++i) {
    c.y[i] = i % 2;
    for (int j = 0; j < d; ++j) c.X(i, j) = (c.y[i] ? 0.5 : -0.5) * sep + nd(rng);
  }
  return c;
}

}  // namespace oracle
