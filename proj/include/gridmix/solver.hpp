#pragma once

// Simplex-constrained ridge least squares
//
//   minimize  (1/(2NJ)) ||y - Z theta||^2 + (mu/2) ||theta||^2
//   s.t.      theta >= 0,  sum(theta) = 1.
//
// mu = 0 is the constrained least-squares fixed-grid estimator; mu > 0 adds the
// ridge term of its elastic-net generalization (Lagrangian form). The problem
// only depends on (Z, y) through the Gram matrix Z'Z/NJ and the moment Z'y/NJ,
// so all routines work on a QuadraticLoss.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "gridmix/errors.hpp"
#include "gridmix/model_core.hpp"

namespace gridmix {

/// f(theta) = 0.5 theta'G theta - b'theta + c, with G = Z'Z/n, b = Z'y/n, c = y'y/(2n).
struct QuadraticLoss {
  Matrix gram;
  Vector moment;
  double constant = 0.0;

  Index size() const { return gram.rows(); }
};

inline QuadraticLoss makeLoss(const Matrix& Z, const Vector& y) {
  detail::require(Z.rows() == y.size(), "kernel rows must match outcome length");
  detail::require(Z.rows() >= 1, "design must have at least one row");
  detail::require(Z.allFinite() && y.allFinite(), "design and outcome must be finite");
  const double n = static_cast<double>(Z.rows());
  QuadraticLoss loss;
  loss.gram.noalias() = Z.transpose() * Z;
  loss.gram /= n;
  loss.moment.noalias() = Z.transpose() * y;
  loss.moment /= n;
  loss.constant = y.squaredNorm() / (2.0 * n);
  return loss;
}

inline double objective(const QuadraticLoss& loss, double mu, const Vector& theta) {
  return 0.5 * theta.dot(loss.gram * theta) - loss.moment.dot(theta) + loss.constant +
         0.5 * mu * theta.squaredNorm();
}

/// Objective evaluated from residuals rather than the Gram form.
inline double objective(const Matrix& Z, const Vector& y, double mu, const Vector& theta) {
  const double n = static_cast<double>(Z.rows());
  return (y - Z * theta).squaredNorm() / (2.0 * n) + 0.5 * mu * theta.squaredNorm();
}

inline Vector gradient(const QuadraticLoss& loss, double mu, const Vector& theta) {
  return loss.gram * theta - loss.moment + mu * theta;
}

/// Euclidean projection onto {x >= 0, sum(x) = 1} by sorting.
inline Vector projectOntoSimplex(const Vector& v) {
  const Index n = v.size();
  std::vector<double> sorted(v.data(), v.data() + n);
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  double cumsum = 0.0;
  double tau = 0.0;
  for (Index k = 0; k < n; ++k) {
    cumsum += sorted[static_cast<std::size_t>(k)];
    const double t = (cumsum - 1.0) / static_cast<double>(k + 1);
    if (sorted[static_cast<std::size_t>(k)] - t > 0.0) tau = t;
  }
  Vector out = (v.array() - tau).max(0.0).matrix();
  // Sorting-based tau is exact up to rounding; renormalize the last ulp drift.
  const double s = out.sum();
  if (s > 0.0) out /= s;
  return out;
}

struct SolverConfig {
  double mu = 0.0;
  double tolKKT = 1e-9;
  double tolObj = 1e-12;
  int maxIters = 50'000;
  // tolKKT is absolute for curvature L <= 1 and relative to L above that.
  std::optional<Vector> warmStart;
  bool recordTrace = false;
};

struct KKTReport {
  double stationarity = 0.0;
  double complementarity = 0.0;
  double sumFeasibility = 0.0;
  double signFeasibility = 0.0;
  /// Multiplier of the sum constraint recovered from stationarity on the support.
  double lambda = 0.0;
  /// Multipliers of theta >= 0.
  Vector nu;

  double residual() const {
    return std::max({stationarity, complementarity, sumFeasibility, signFeasibility});
  }
};

/// Support threshold used for complementarity checks.
inline constexpr double kActiveTol = 1e-10;

inline KKTReport kktResiduals(const QuadraticLoss& loss, double mu, const Vector& theta,
                              double activeTol = kActiveTol) {
  detail::require(theta.size() == loss.size(), "weight dimension mismatch");
  const Vector g = gradient(loss, mu, theta);
  KKTReport rep;
  double sum = 0.0;
  Index count = 0;
  for (Index r = 0; r < theta.size(); ++r) {
    if (theta(r) > activeTol) {
      sum += g(r);
      ++count;
    }
  }
  rep.lambda = count > 0 ? -sum / static_cast<double>(count) : -g.minCoeff();
  rep.nu = g.array() + rep.lambda;
  for (Index r = 0; r < theta.size(); ++r) {
    if (theta(r) > activeTol)
      rep.stationarity = std::max(rep.stationarity, std::abs(rep.nu(r)));
    else
      rep.stationarity = std::max(rep.stationarity, std::max(0.0, -rep.nu(r)));
    rep.complementarity = std::max(rep.complementarity, std::abs(rep.nu(r) * theta(r)));
  }
  rep.sumFeasibility = std::abs(theta.sum() - 1.0);
  rep.signFeasibility = std::max(0.0, -theta.minCoeff());
  return rep;
}

inline KKTReport kktResiduals(const Matrix& Z, const Vector& y, double mu, const Vector& theta) {
  return kktResiduals(makeLoss(Z, y), mu, theta);
}

struct Solution {
  WeightVector theta = WeightVector(Vector::Ones(1));
  double objective = 0.0;
  double lambda = 0.0;
  double kktResidual = 0.0;
  int iterations = 0;
  /// Objective of the accepted iterate after every iteration (recordTrace only).
  std::vector<double> trace;
};

/// Raised when maxIters is hit before the KKT tolerance; carries the best iterate.
class SolverError : public NumericalError {
 public:
  SolverError(const std::string& msg, Solution best)
      : NumericalError(msg), best_(std::move(best)) {}
  const Solution& best() const { return best_; }

 private:
  Solution best_;
};

namespace detail {

inline double largestEigenvalue(const Matrix& H) {
  const Index n = H.rows();
  Vector v(n);
  for (Index i = 0; i < n; ++i) v(i) = 1.0 + 1e-3 * static_cast<double>(i % 7);
  v.normalize();
  double est = 0.0;
  for (int it = 0; it < 30; ++it) {
    Vector w = H * v;
    const double norm = w.norm();
    if (norm == 0.0) return 0.0;
    const double next = v.dot(w);
    v = w / norm;
    if (std::abs(next - est) <= 1e-8 * std::max(1.0, std::abs(next))) {
      est = next;
      break;
    }
    est = next;
  }
  // The Rayleigh quotient never overshoots; bound it above by ||H v|| too.
  return std::max(est, (H * v).norm());
}

/// Exact minimizer over the face {theta_r = 0, r not in support}, with signs
/// repaired by dropping negative coordinates. Returns nullopt if no KKT point
/// is found within a few active-set moves.
inline std::optional<Vector> polishOnSupport(const QuadraticLoss& loss, double mu,
                                             std::vector<Index> support, double tol) {
  const Index R = loss.size();
  for (int round = 0; round < 8 && !support.empty(); ++round) {
    const Index s = static_cast<Index>(support.size());
    Matrix kkt = Matrix::Zero(s + 1, s + 1);
    Vector rhs(s + 1);
    for (Index a = 0; a < s; ++a) {
      for (Index b = 0; b < s; ++b) kkt(a, b) = loss.gram(support[a], support[b]);
      kkt(a, a) += mu;
      kkt(a, s) = 1.0;
      kkt(s, a) = 1.0;
      rhs(a) = loss.moment(support[a]);
    }
    rhs(s) = 1.0;
    const Vector sol = kkt.completeOrthogonalDecomposition().solve(rhs);
    if (!sol.allFinite()) return std::nullopt;

    Index worst = -1;
    for (Index a = 0; a < s; ++a)
      if (sol(a) < 0.0 && (worst < 0 || sol(a) < sol(worst))) worst = a;
    if (worst >= 0) {
      support.erase(support.begin() + worst);
      continue;
    }
    Vector theta = Vector::Zero(R);
    for (Index a = 0; a < s; ++a) theta(support[a]) = sol(a);
    if (std::abs(theta.sum() - 1.0) > 1e-12) return std::nullopt;
    theta /= theta.sum();
    const KKTReport rep = kktResiduals(loss, mu, theta);
    if (rep.residual() <= tol) return theta;
    // Enter the most violated inactive coordinate.
    Index enter = -1;
    for (Index r = 0; r < R; ++r) {
      if (theta(r) > kActiveTol) continue;
      if (rep.nu(r) < -tol && (enter < 0 || rep.nu(r) < rep.nu(enter))) enter = r;
    }
    if (enter < 0) return std::nullopt;
    support.push_back(enter);
    std::sort(support.begin(), support.end());
  }
  return std::nullopt;
}

}  // namespace detail

/// Accelerated projected gradient with function-value restarts (the accepted
/// iterate never increases the objective), step 1/L from power iteration, and
/// an exact equality-constrained solve on the identified support to finish.
inline Solution solveSimplexRidge(const QuadraticLoss& loss, const SolverConfig& cfg) {
  const Index R = loss.size();
  detail::require(R >= 1, "empty grid");
  detail::require(loss.gram.cols() == R && loss.moment.size() == R, "loss dimension mismatch");
  detail::require(cfg.mu >= 0.0 && std::isfinite(cfg.mu), "mu must be finite and >= 0");
  detail::require(cfg.tolKKT > 0.0 && cfg.tolObj > 0.0, "tolerances must be positive");
  const double mu = cfg.mu;

  auto finish = [&](const Vector& theta, int iters, std::vector<double> trace) {
    Solution sol;
    sol.theta = WeightVector(theta);
    sol.objective = objective(loss, mu, theta);
    const KKTReport rep = kktResiduals(loss, mu, theta);
    sol.lambda = rep.lambda;
    sol.kktResidual = rep.residual();
    sol.iterations = iters;
    sol.trace = std::move(trace);
    return sol;
  };

  if (R == 1) return finish(Vector::Ones(1), 0, {});

  Matrix H = loss.gram;
  H.diagonal().array() += mu;
  double L = detail::largestEigenvalue(H) * 1.02;
  if (!(L > 0.0)) L = 1.0;
  // KKT residuals carry the gradient's units; compare them relative to the
  // curvature once it exceeds one (mu -> infinity otherwise stalls on roundoff).
  const double tolKKT = cfg.tolKKT * std::max(1.0, L);

  Vector x;
  if (cfg.warmStart) {
    detail::require(cfg.warmStart->size() == R, "warm start dimension mismatch");
    x = projectOntoSimplex(*cfg.warmStart);
  } else {
    x = Vector::Constant(R, 1.0 / static_cast<double>(R));
  }
  double fx = objective(loss, mu, x);
  Vector yk = x;
  double t = 1.0;
  std::vector<double> trace;
  if (cfg.recordTrace) trace.push_back(fx);

  constexpr int kCheckEvery = 10;
  double fAtLastCheck = fx;
  std::vector<Index> lastSupport;

  for (int it = 1; it <= cfg.maxIters; ++it) {
    Vector z = projectOntoSimplex(yk - gradient(loss, mu, yk) / L);
    double fz = objective(loss, mu, z);
    if (fz > fx) {
      // Restart momentum from the accepted iterate with a plain gradient step.
      t = 1.0;
      for (int guard = 0; guard < 60; ++guard) {
        z = projectOntoSimplex(x - gradient(loss, mu, x) / L);
        fz = objective(loss, mu, z);
        if (fz <= fx) break;
        L *= 2.0;
      }
      if (fz > fx) {
        z = x;
        fz = fx;
      }
      yk = z;
      x = std::move(z);
      fx = fz;
    } else {
      const double tNext = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
      yk = z + ((t - 1.0) / tNext) * (z - x);
      t = tNext;
      x = std::move(z);
      fx = fz;
    }
    if (cfg.recordTrace) trace.push_back(fx);

    if (it % kCheckEvery != 0) continue;
    const KKTReport rep = kktResiduals(loss, mu, x);
    std::vector<Index> support;
    for (Index r = 0; r < R; ++r)
      if (x(r) > kActiveTol) support.push_back(r);
    if (rep.residual() <= tolKKT) {
      if (auto polished = detail::polishOnSupport(loss, mu, support, rep.residual())) {
        if (objective(loss, mu, *polished) <= fx + 1e-14 * std::max(1.0, std::abs(fx)))
          return finish(*polished, it, std::move(trace));
      }
      return finish(x, it, std::move(trace));
    }
    const bool stalled =
        std::abs(fAtLastCheck - fx) <= cfg.tolObj * std::max(1.0, std::abs(fx));
    if (support == lastSupport || stalled) {
      if (stalled) {
        // Widen the face with every coordinate whose multiplier is negative.
        for (Index r = 0; r < R; ++r)
          if (x(r) <= kActiveTol && rep.nu(r) < 0.0) support.push_back(r);
        std::sort(support.begin(), support.end());
      }
      if (auto polished = detail::polishOnSupport(loss, mu, support, tolKKT)) {
        const double fp = objective(loss, mu, *polished);
        if (fp <= fx + 1e-14 * std::max(1.0, std::abs(fx))) {
          if (cfg.recordTrace) trace.push_back(std::min(fp, fx));
          return finish(*polished, it, std::move(trace));
        }
      }
    }
    lastSupport = std::move(support);
    fAtLastCheck = fx;
  }
  Solution best = finish(x, cfg.maxIters, std::move(trace));
  throw SolverError("simplex ridge solver hit maxIters=" + std::to_string(cfg.maxIters) +
                        " with KKT residual " + std::to_string(best.kktResidual),
                    std::move(best));
}

inline Solution solveSimplexRidge(const Matrix& Z, const Vector& y, const SolverConfig& cfg) {
  detail::require(Z.cols() >= 1, "empty grid");
  return solveSimplexRidge(makeLoss(Z, y), cfg);
}

inline Solution solveSimplexRidge(const KernelMatrix& km, const Vector& y,
                                  const SolverConfig& cfg) {
  return solveSimplexRidge(km.Z, y, cfg);
}

/// Exhaustive minimization over the simplex lattice with resolution `step`.
/// Test oracle only; R is capped at 4.
inline WeightVector oracleGridSearch(const Matrix& Z, const Vector& y, double mu, double step) {
  const Index R = Z.cols();
  detail::require(R >= 1, "empty grid");
  if (R > 4) throw ValidationError("oracleGridSearch supports R <= 4");
  detail::require(step > 0.0 && step <= 0.1, "oracle step must lie in (0, 0.1]");
  if (R == 1) return WeightVector(Vector::Ones(1));
  const auto n = static_cast<int>(std::llround(1.0 / step));
  const QuadraticLoss loss = makeLoss(Z, y);

  Vector theta(R);
  Vector best;
  double bestVal = std::numeric_limits<double>::infinity();
  std::vector<int> counts(static_cast<std::size_t>(R), 0);
  std::function<void(Index, int)> rec = [&](Index pos, int remaining) {
    if (pos == R - 1) {
      counts[static_cast<std::size_t>(pos)] = remaining;
      for (Index r = 0; r < R; ++r)
        theta(r) = static_cast<double>(counts[static_cast<std::size_t>(r)]) / n;
      const double v = objective(loss, mu, theta);
      if (v < bestVal) {
        bestVal = v;
        best = theta;
      }
      return;
    }
    for (int c = 0; c <= remaining; ++c) {
      counts[static_cast<std::size_t>(pos)] = c;
      rec(pos + 1, remaining - c);
    }
  };
  rec(0, n);
  return WeightVector(best / best.sum());
}

}  // namespace gridmix
