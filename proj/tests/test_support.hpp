#pragma once

// Random instance generators and brute-force oracles shared by the test
// suites. Nothing here calls into the solver it is used to check.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

namespace gridmix::oracle {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

struct RandomInstance {
  MatrixXd Z;
  VectorXd y;
};

/// Kernel-like design: entries in (0, 1), binary outcome.
inline RandomInstance randomInstance(std::mt19937_64& rng, Index rows, Index cols) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::bernoulli_distribution coin(0.4);
  RandomInstance inst{MatrixXd(rows, cols), VectorXd(rows)};
  for (Index i = 0; i < rows; ++i) {
    for (Index r = 0; r < cols; ++r) inst.Z(i, r) = unif(rng);
    inst.y(i) = coin(rng) ? 1.0 : 0.0;
  }
  return inst;
}

inline VectorXd randomSimplexPoint(std::mt19937_64& rng, Index n) {
  std::exponential_distribution<double> ex(1.0);
  VectorXd v(n);
  for (Index i = 0; i < n; ++i) v(i) = ex(rng);
  return v / v.sum();
}

inline double residualObjective(const MatrixXd& Z, const VectorXd& y, double mu,
                                const VectorXd& theta) {
  return (y - Z * theta).squaredNorm() / (2.0 * static_cast<double>(Z.rows())) +
         0.5 * mu * theta.squaredNorm();
}

/// Exact minimizer by enumerating every support set and solving the
/// equality-constrained normal equations on it (R small).
inline VectorXd supportEnumerationSolve(const MatrixXd& Z, const VectorXd& y, double mu) {
  const Index R = Z.cols();
  const double n = static_cast<double>(Z.rows());
  VectorXd best;
  double bestVal = std::numeric_limits<double>::infinity();
  for (std::uint32_t mask = 1; mask < (1u << R); ++mask) {
    std::vector<Index> s;
    for (Index r = 0; r < R; ++r)
      if (mask & (1u << r)) s.push_back(r);
    const Index k = static_cast<Index>(s.size());
    MatrixXd A = MatrixXd::Zero(k + 1, k + 1);
    VectorXd b(k + 1);
    for (Index a = 0; a < k; ++a) {
      for (Index c = 0; c < k; ++c) A(a, c) = Z.col(s[a]).dot(Z.col(s[c])) / n;
      A(a, a) += mu;
      A(a, k) = 1.0;
      A(k, a) = 1.0;
      b(a) = Z.col(s[a]).dot(y) / n;
    }
    b(k) = 1.0;
    const VectorXd sol = A.fullPivLu().solve(b);
    if (!sol.allFinite() || (A * sol - b).norm() > 1e-9) continue;
    VectorXd theta = VectorXd::Zero(R);
    bool feasible = true;
    for (Index a = 0; a < k; ++a) {
      if (sol(a) < -1e-12) feasible = false;
      theta(s[a]) = std::max(0.0, sol(a));
    }
    if (!feasible) continue;
    theta /= theta.sum();
    const double v = residualObjective(Z, y, mu, theta);
    if (v < bestVal) {
      bestVal = v;
      best = theta;
    }
  }
  return best;
}

/// Projected gradient for the reduced problem over {x >= 0, sum(x) <= 1},
/// objective (1/(2n))||yt - Zt x||^2 + (mu/2)(||x||^2 + (1 - sum x)^2).
inline VectorXd solveReducedForm(const MatrixXd& Zt, const VectorXd& yt, double mu,
                                 int iters = 200000) {
  const Index m = Zt.cols();
  const double n = static_cast<double>(Zt.rows());
  MatrixXd G = Zt.transpose() * Zt / n;
  const VectorXd b = Zt.transpose() * yt / n;
  // Hessian of the ridge part: mu (I + 11').
  MatrixXd H = G + mu * (MatrixXd::Identity(m, m) + MatrixXd::Ones(m, m));
  const double L = Eigen::SelfAdjointEigenSolver<MatrixXd>(H).eigenvalues().maxCoeff() * 1.01 + 1e-12;
  auto project = [m](VectorXd v) {
    v = v.cwiseMax(0.0);
    if (v.sum() <= 1.0) return v;
    // Bisection on the simplex shift.
    double lo = 0.0, hi = v.maxCoeff();
    for (int k = 0; k < 200; ++k) {
      const double mid = 0.5 * (lo + hi);
      ((v.array() - mid).max(0.0).sum() > 1.0 ? lo : hi) = mid;
    }
    VectorXd out = (v.array() - hi).max(0.0);
    (void)m;
    return out;
  };
  VectorXd x = VectorXd::Constant(m, 1.0 / static_cast<double>(m + 1));
  for (int it = 0; it < iters; ++it) {
    const VectorXd g = G * x - b + mu * x - mu * (1.0 - x.sum()) * VectorXd::Ones(m);
    x = project(x - g / L);
  }
  return x;
}

/// Type-7 quantile (linear interpolation between order statistics).
inline double quantile7(std::vector<double> v, double p) {
  std::sort(v.begin(), v.end());
  const double h = (static_cast<double>(v.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

/// Smallest eigenvalue of a symmetric matrix by bisection on the inertia of
/// A - sigma I (count of negative pivots in an unpivoted LDL' recursion).
inline double smallestEigenvalueBisection(const MatrixXd& A, double tol = 1e-13) {
  const Index n = A.rows();
  auto negativeCount = [&](double sigma) {
    // Gaussian elimination without pivoting; Sylvester's law of inertia.
    MatrixXd M = A;
    M.diagonal().array() -= sigma;
    int neg = 0;
    for (Index k = 0; k < n; ++k) {
      double piv = M(k, k);
      if (piv == 0.0) piv = -1e-300;
      if (piv < 0.0) ++neg;
      for (Index i = k + 1; i < n; ++i) {
        const double f = M(i, k) / piv;
        for (Index j = k + 1; j < n; ++j) M(i, j) -= f * M(k, j);
      }
    }
    return neg;
  };
  double bound = 0.0;
  for (Index i = 0; i < n; ++i) bound = std::max(bound, A.row(i).cwiseAbs().sum());
  double lo = -bound - 1.0, hi = bound + 1.0;
  while (hi - lo > tol * std::max(1.0, std::abs(lo))) {
    const double mid = 0.5 * (lo + hi);
    (negativeCount(mid) >= 1 ? hi : lo) = mid;
  }
  return 0.5 * (lo + hi);
}

}  // namespace gridmix::oracle
