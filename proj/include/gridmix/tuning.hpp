#pragma once

// Ridge-parameter path and K-fold cross-validation with four selection rules:
// minimum MSE, one-standard-error, maximum log-likelihood, and maximum share
// of correctly predicted choices.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "gridmix/errors.hpp"
#include "gridmix/model_core.hpp"
#include "gridmix/solver.hpp"

namespace gridmix {

/// Strictly decreasing ridge values ending at 0.
class MuPath {
 public:
  explicit MuPath(std::vector<double> values) : values_(std::move(values)) {
    detail::require(!values_.empty(), "mu path must be nonempty");
    detail::require(values_.back() == 0.0, "mu path must end with 0");
    for (std::size_t k = 0; k < values_.size(); ++k) {
      detail::require(std::isfinite(values_[k]) && values_[k] >= 0.0, "mu values must be >= 0");
      if (k > 0) detail::require(values_[k] < values_[k - 1], "mu path must be strictly decreasing");
    }
  }

  const std::vector<double>& values() const { return values_; }
  std::size_t size() const { return values_.size(); }
  double operator[](std::size_t k) const { return values_[k]; }

 private:
  std::vector<double> values_;
};

struct MuPathConfig {
  double muMax = 100.0;
  double minRatio = 1e-4;
  /// Total length including the terminal zero.
  std::size_t length = 101;
};

/// (length - 1) geometric values from muMax down to muMax * minRatio, then 0.
inline MuPath makeMuPath(const MuPathConfig& cfg = {}) {
  detail::require(cfg.muMax > 0.0 && std::isfinite(cfg.muMax),
                  "muMax must be positive so the path has values before the terminal 0");
  detail::require(cfg.minRatio > 0.0 && cfg.minRatio < 1.0, "minRatio must lie in (0, 1)");
  detail::require(cfg.length >= 2, "mu path needs at least one positive value and 0");
  const std::size_t geo = cfg.length - 1;
  std::vector<double> v(cfg.length, 0.0);
  if (geo == 1) {
    v[0] = cfg.muMax;
  } else {
    const double logStep = std::log(cfg.minRatio) / static_cast<double>(geo - 1);
    for (std::size_t k = 0; k < geo; ++k)
      v[k] = cfg.muMax * std::exp(logStep * static_cast<double>(k));
  }
  return MuPath(std::move(v));
}

enum class SelectionRule { MinMSE, OneSE, MaxLL, MaxPredOut };

inline const char* toString(SelectionRule rule) {
  switch (rule) {
    case SelectionRule::MinMSE: return "MSE";
    case SelectionRule::OneSE: return "OneSE";
    case SelectionRule::MaxLL: return "LL";
    case SelectionRule::MaxPredOut: return "PredOut";
  }
  return "?";
}

struct CVPoint {
  double mu = 0.0;
  double mseMean = 0.0;
  /// Standard deviation of the K fold MSEs divided by sqrt(K).
  double mseSE = 0.0;
  double llMean = 0.0;
  double predOutMean = 0.0;
};

struct CVResult {
  std::vector<CVPoint> points;
  std::uint64_t seed = 0;
  Index folds = 0;
  /// Fold of each unit.
  std::vector<int> foldOf;
  /// Held-out units whose predicted choice probability was clamped before the log.
  Index clampedLogs = 0;
};

/// Random balanced assignment of N units to K folds; depends on (seed, N, K) only.
inline std::vector<int> assignFolds(Index units, Index folds, std::uint64_t seed) {
  detail::require(folds >= 2, "cross-validation needs K >= 2");
  detail::require(units >= folds, "cross-validation needs N >= K");
  std::vector<Index> order(static_cast<std::size_t>(units));
  std::iota(order.begin(), order.end(), Index{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<int> fold(static_cast<std::size_t>(units));
  for (std::size_t p = 0; p < order.size(); ++p)
    fold[static_cast<std::size_t>(order[p])] = static_cast<int>(p % static_cast<std::size_t>(folds));
  return fold;
}

struct HoldoutScore {
  double mse = 0.0;
  double ll = 0.0;
  double predOut = 0.0;
  Index clamped = 0;
};

/// Out-of-sample criteria for weights `theta` on the listed units.
inline HoldoutScore scoreHoldout(const ChoiceDataset& data, const KernelMatrix& km,
                                 std::span<const Index> units, const Vector& theta) {
  constexpr double kLogFloor = 1e-300;
  const Index J = data.alternatives();
  HoldoutScore s;
  double sq = 0.0, ll = 0.0, hits = 0.0;
  for (Index i : units) {
    const Vector p = km.Z.middleRows(i * J, J) * theta;
    const Vector yi = data.y().segment(i * J, J);
    sq += (yi - p).squaredNorm();
    const double pOut = data.hasOutside() ? 1.0 - p.sum() : 0.0;
    const int chosen = data.choice(i);
    double pc = chosen >= 0 ? p(chosen) : pOut;
    if (!(pc > kLogFloor)) {
      pc = kLogFloor;
      ++s.clamped;
    }
    ll += std::log(pc);
    // Lowest alternative index wins ties; the outside option loses ties.
    Index best = 0;
    for (Index j = 1; j < J; ++j)
      if (p(j) > p(best)) best = j;
    const int predicted = (data.hasOutside() && pOut > p(best)) ? -1 : static_cast<int>(best);
    if (predicted == chosen) hits += 1.0;
  }
  const double nv = static_cast<double>(units.size());
  s.mse = sq / (nv * static_cast<double>(J));
  s.ll = ll / nv;
  s.predOut = hits / nv;
  return s;
}

struct CVConfig {
  Index folds = 10;
  std::uint64_t seed = 1;
  /// Solver settings; `mu` and `warmStart` are overwritten per path value.
  SolverConfig solver;
  bool warmStarts = true;
};

/// Unit-level K-fold cross-validation over the whole mu path.
inline CVResult crossValidate(const ChoiceDataset& data, const KernelMatrix& km,
                              const MuPath& path, const CVConfig& cfg) {
  const Index N = data.units();
  const Index J = data.alternatives();
  const Index R = km.gridSize();
  detail::require(km.Z.rows() == data.rows(), "kernel rows must match dataset rows");
  CVResult res;
  res.seed = cfg.seed;
  res.folds = cfg.folds;
  res.foldOf = assignFolds(N, cfg.folds, cfg.seed);

  std::vector<std::vector<Index>> members(static_cast<std::size_t>(cfg.folds));
  for (Index i = 0; i < N; ++i)
    members[static_cast<std::size_t>(res.foldOf[static_cast<std::size_t>(i)])].push_back(i);

  // Unnormalized per-fold Gram/moment blocks; training sums are total minus fold.
  std::vector<Matrix> foldGram(members.size(), Matrix::Zero(R, R));
  std::vector<Vector> foldMoment(members.size(), Vector::Zero(R));
  std::vector<double> foldYY(members.size(), 0.0);
  for (std::size_t k = 0; k < members.size(); ++k) {
    detail::require(!members[k].empty(), "cross-validation fold with zero units");
    Matrix Zk(static_cast<Index>(members[k].size()) * J, R);
    Vector yk(Zk.rows());
    for (std::size_t u = 0; u < members[k].size(); ++u) {
      const Index i = members[k][u];
      Zk.middleRows(static_cast<Index>(u) * J, J) = km.Z.middleRows(i * J, J);
      yk.segment(static_cast<Index>(u) * J, J) = data.y().segment(i * J, J);
    }
    foldGram[k].noalias() = Zk.transpose() * Zk;
    foldMoment[k].noalias() = Zk.transpose() * yk;
    foldYY[k] = yk.squaredNorm();
  }
  Matrix totalGram = Matrix::Zero(R, R);
  Vector totalMoment = Vector::Zero(R);
  double totalYY = 0.0;
  for (std::size_t k = 0; k < members.size(); ++k) {
    totalGram += foldGram[k];
    totalMoment += foldMoment[k];
    totalYY += foldYY[k];
  }

  const std::size_t P = path.size();
  const auto K = static_cast<std::size_t>(cfg.folds);
  std::vector<std::vector<HoldoutScore>> scores(P, std::vector<HoldoutScore>(K));
  for (std::size_t k = 0; k < K; ++k) {
    const double nTrain = static_cast<double>((N - static_cast<Index>(members[k].size())) * J);
    QuadraticLoss loss;
    loss.gram = (totalGram - foldGram[k]) / nTrain;
    loss.moment = (totalMoment - foldMoment[k]) / nTrain;
    loss.constant = (totalYY - foldYY[k]) / (2.0 * nTrain);
    std::optional<Vector> warm;
    for (std::size_t p = 0; p < P; ++p) {
      SolverConfig sc = cfg.solver;
      sc.mu = path[p];
      sc.warmStart = cfg.warmStarts ? warm : std::nullopt;
      const Solution sol = solveSimplexRidge(loss, sc);
      warm = sol.theta.values();
      scores[p][k] = scoreHoldout(data, km, members[k], sol.theta.values());
    }
  }

  res.points.resize(P);
  for (std::size_t p = 0; p < P; ++p) {
    CVPoint& pt = res.points[p];
    pt.mu = path[p];
    double m = 0.0, ll = 0.0, po = 0.0;
    for (const auto& s : scores[p]) {
      m += s.mse;
      ll += s.ll;
      po += s.predOut;
      res.clampedLogs += s.clamped;
    }
    const double kd = static_cast<double>(K);
    pt.mseMean = m / kd;
    pt.llMean = ll / kd;
    pt.predOutMean = po / kd;
    double var = 0.0;
    for (const auto& s : scores[p]) var += (s.mse - pt.mseMean) * (s.mse - pt.mseMean);
    pt.mseSE = std::sqrt(var / (kd - 1.0)) / std::sqrt(kd);
  }
  return res;
}

inline CVResult crossValidate(const ChoiceDataset& data, const Grid& grid, const MuPath& path,
                              Index folds, std::uint64_t seed) {
  CVConfig cfg;
  cfg.folds = folds;
  cfg.seed = seed;
  return crossValidate(data, evalLogitKernel(data, grid), path, cfg);
}

/// Selected ridge value; ties go to the larger mu.
inline double selectMu(const CVResult& cv, SelectionRule rule) {
  detail::require(!cv.points.empty(), "empty cross-validation result");
  const auto& pts = cv.points;
  auto better = [](double candidate, double incumbent, double muC, double muI, bool maximize) {
    if (candidate == incumbent) return muC > muI;
    return maximize ? candidate > incumbent : candidate < incumbent;
  };
  std::size_t best = 0;
  for (std::size_t k = 1; k < pts.size(); ++k) {
    bool take = false;
    switch (rule) {
      case SelectionRule::MinMSE:
      case SelectionRule::OneSE:
        take = better(pts[k].mseMean, pts[best].mseMean, pts[k].mu, pts[best].mu, false);
        break;
      case SelectionRule::MaxLL:
        take = better(pts[k].llMean, pts[best].llMean, pts[k].mu, pts[best].mu, true);
        break;
      case SelectionRule::MaxPredOut:
        take = better(pts[k].predOutMean, pts[best].predOutMean, pts[k].mu, pts[best].mu, true);
        break;
    }
    if (take) best = k;
  }
  if (rule != SelectionRule::OneSE) return pts[best].mu;
  const double threshold = pts[best].mseMean + pts[best].mseSE;
  double chosen = pts[best].mu;
  for (const auto& pt : pts)
    if (pt.mseMean <= threshold && pt.mu > chosen) chosen = pt.mu;
  return chosen;
}

}  // namespace gridmix
