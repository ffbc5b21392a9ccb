#pragma once

// Joint estimation of fixed coefficients and grid weights by EM, with a
// weighted multinomial-logit M-step, plus mixture elasticities.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "gridmix/errors.hpp"
#include "gridmix/model_core.hpp"
#include "gridmix/solver.hpp"
#include "gridmix/tuning.hpp"

namespace gridmix {

namespace detail {

/// Random-coefficient utilities x^M beta_r for every row and grid point.
inline Matrix randomUtilities(const ChoiceDataset& data, const Grid& grid) {
  require(data.randomDim() == grid.dim(),
          "grid dimension must equal the number of random-coefficient covariates");
  return data.xRandom() * grid.points().transpose();
}

/// Logit probabilities of all outcomes of unit i at grid point r; returns the
/// outside probability (0 without an outside option).
inline double unitProbabilities(const ChoiceDataset& data, const Matrix& vRandom, const Vector& offsets,
                                Index i, Index r, Vector& p) {
  const Index J = data.alternatives();
  Vector u = vRandom.col(r).segment(i * J, J);
  if (offsets.size() > 0) u += offsets.segment(i * J, J);
  p.resize(J);
  return logitProbabilities(u, data.hasOutside(), p);
}

inline double chosenProbability(const ChoiceDataset& data, const Vector& p, double pOut, Index i) {
  const int c = data.choice(i);
  return c >= 0 ? p(c) : pOut;
}

}  // namespace detail

/// Per-unit posterior probabilities over grid points given the observed choice.
inline Matrix posteriorWeights(const ChoiceDataset& data, const Grid& grid, const Vector& betaF,
                               const WeightVector& theta) {
  detail::require(theta.size() == grid.size(), "one weight per grid point required");
  const Matrix v = detail::randomUtilities(data, grid);
  const Vector off = data.fixedOffsets(betaF);
  const Index N = data.units(), R = grid.size();
  Matrix h(N, R);
  Vector p;
  for (Index i = 0; i < N; ++i) {
    double denom = 0.0;
    for (Index r = 0; r < R; ++r) {
      const double pOut = detail::unitProbabilities(data, v, off, i, r, p);
      h(i, r) = theta[r] * detail::chosenProbability(data, p, pOut, i);
      denom += h(i, r);
    }
    if (!(denom > 1e-300))
      throw NumericalError("unit " + data.unitIds()[static_cast<std::size_t>(i)] +
                           ": model assigns its observed choice probability 0");
    h.row(i) /= denom;
  }
  return h;
}

/// (1/N) sum_i log sum_r theta_r P_i(observed choice | beta_r, betaF).
inline double mixtureLogLikelihood(const ChoiceDataset& data, const Grid& grid, const Vector& betaF,
                                   const WeightVector& theta) {
  const Matrix v = detail::randomUtilities(data, grid);
  const Vector off = data.fixedOffsets(betaF);
  double ll = 0.0;
  Vector p;
  for (Index i = 0; i < data.units(); ++i) {
    double mix = 0.0;
    for (Index r = 0; r < grid.size(); ++r) {
      const double pOut = detail::unitProbabilities(data, v, off, i, r, p);
      mix += theta[r] * detail::chosenProbability(data, p, pOut, i);
    }
    ll += std::log(std::max(mix, 1e-300));
  }
  return ll / static_cast<double>(data.units());
}

struct WeightedLogitConfig {
  double gradTol = 1e-8;
  int maxIters = 200;
  int maxHalvings = 50;
  double ridge = 1e-8;
};

struct WeightedLogitResult {
  Vector beta;
  /// (1/N) sum_i sum_r h_ir log P_i(observed choice | beta_r, beta).
  double objective = 0.0;
  double gradNorm = 0.0;
  int iterations = 0;
};

/// Weighted log-likelihood, gradient and Hessian in the fixed coefficients.
struct WeightedLogitEval {
  double value = 0.0;
  Vector grad;
  Matrix hess;
};

inline WeightedLogitEval weightedLogitObjective(const ChoiceDataset& data, const Matrix& vRandom,
                                                const Matrix& h, const Vector& beta, bool withHessian = true) {
  const Index J = data.alternatives(), F = data.fixedDim();
  const Vector off = data.fixedOffsets(beta);
  WeightedLogitEval ev;
  ev.grad = Vector::Zero(F);
  if (withHessian) ev.hess = Matrix::Zero(F, F);
  Vector p, xbar(F);
  for (Index i = 0; i < data.units(); ++i) {
    const auto xf = data.xFixed().middleRows(i * J, J);
    const int c = data.choice(i);
    for (Index r = 0; r < vRandom.cols(); ++r) {
      const double w = h(i, r);
      if (w == 0.0) continue;
      const double pOut = detail::unitProbabilities(data, vRandom, off, i, r, p);
      ev.value += w * std::log(std::max(c >= 0 ? p(c) : pOut, 1e-300));
      xbar.noalias() = xf.transpose() * p;
      if (c >= 0) ev.grad += w * (xf.row(c).transpose() - xbar);
      else ev.grad -= w * xbar;
      if (withHessian) {
        ev.hess.noalias() -= w * (xf.transpose() * p.asDiagonal() * xf);
        ev.hess.noalias() += w * (xbar * xbar.transpose());
      }
    }
  }
  const double n = static_cast<double>(data.units());
  ev.value /= n;
  ev.grad /= n;
  if (withHessian) ev.hess /= n;
  return ev;
}

/// Newton ascent with step halving on the posterior-weighted logit likelihood.
inline WeightedLogitResult fitWeightedLogit(const ChoiceDataset& data, const Matrix& h, const Grid& grid,
                                            const Vector& betaInit, const WeightedLogitConfig& cfg = {}) {
  const Index F = data.fixedDim();
  detail::require(betaInit.size() == F, "initial fixed coefficients have the wrong length");
  detail::require(h.rows() == data.units() && h.cols() == grid.size(), "posterior matrix must be N x R");
  WeightedLogitResult res;
  res.beta = betaInit;
  if (F == 0) return res;
  const Matrix v = detail::randomUtilities(data, grid);
  WeightedLogitEval ev = weightedLogitObjective(data, v, h, res.beta);
  for (res.iterations = 0; res.iterations < cfg.maxIters; ++res.iterations) {
    res.gradNorm = ev.grad.cwiseAbs().maxCoeff();
    if (res.gradNorm <= cfg.gradTol) break;
    Matrix A = -ev.hess;
    A.diagonal().array() += cfg.ridge;
    Eigen::LDLT<Matrix> ldlt(A);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive() || ldlt.vectorD().minCoeff() <= 0.0)
      throw NumericalError("weighted logit Hessian is numerically singular");
    const Vector step = ldlt.solve(ev.grad);
    double t = 1.0;
    bool accepted = false;
    for (int k = 0; k <= cfg.maxHalvings; ++k, t *= 0.5) {
      const Vector trial = res.beta + t * step;
      WeightedLogitEval te = weightedLogitObjective(data, v, h, trial);
      // Close to the optimum the value change drops below rounding noise; a
      // smaller gradient then decides.
      const double noise = 64.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(ev.value));
      if (te.value >= ev.value ||
          (te.value >= ev.value - noise && te.grad.squaredNorm() < ev.grad.squaredNorm())) {
        res.beta = trial;
        ev = std::move(te);
        accepted = true;
        break;
      }
    }
    if (!accepted) throw NumericalError("weighted logit diverged: no ascent after step halving");
  }
  res.gradNorm = ev.grad.cwiseAbs().maxCoeff();
  res.objective = ev.value;
  if (res.gradNorm > cfg.gradTol && res.iterations >= cfg.maxIters)
    throw NumericalError("weighted logit did not reach the gradient tolerance");
  return res;
}

/// Plain multinomial logit in the fixed coefficients with random coefficients
/// held at the grid mean.
inline Vector plainLogitStart(const ChoiceDataset& data, const Grid& grid, const WeightedLogitConfig& cfg = {}) {
  const Matrix centre = grid.points().colwise().mean();
  const Grid one(centre, grid.scheme(), grid.range());
  return fitWeightedLogit(data, Matrix::Ones(data.units(), 1), one, Vector::Zero(data.fixedDim()), cfg).beta;
}

enum class EMStart { PlainLogit, Zeros };

struct EMConfig {
  /// Ridge parameter for the weight step; chosen once by cross-validation when unset.
  std::optional<double> mu = 0.0;
  SelectionRule rule = SelectionRule::OneSE;
  MuPathConfig path;
  Index folds = 10;
  std::uint64_t seed = 1;
  SolverConfig solver;
  WeightedLogitConfig logit;
  EMStart start = EMStart::PlainLogit;
  std::optional<Vector> betaInit;
  int maxIters = 500;
  double tolBeta = 1e-6;
  double tolLL = 1e-8;
};

struct EMIteration {
  /// Mixture log-likelihood after the weight step and after the fixed-coefficient step.
  double llBeforeBeta = 0.0;
  double llAfterBeta = 0.0;
  double betaChange = 0.0;
};

struct EMResult {
  Vector betaF;
  WeightVector theta = WeightVector::uniform(1);
  Matrix posterior;
  double logLik = 0.0;
  double mu = 0.0;
  int iterations = 0;
  std::vector<EMIteration> trace;
};

class EMError : public NumericalError {
 public:
  EMError(const std::string& msg, EMResult last) : NumericalError(msg), last_(std::move(last)) {}
  const EMResult& last() const { return last_; }

 private:
  EMResult last_;
};

/// Alternates kernel evaluation, weight fit, posterior computation and the
/// weighted-logit update until the coefficients and likelihood settle.
inline EMResult runEM(const ChoiceDataset& data, const Grid& grid, const EMConfig& cfg = {}) {
  const Index F = data.fixedDim();
  EMResult st;
  if (cfg.betaInit) {
    detail::require(cfg.betaInit->size() == F, "initial fixed coefficients have the wrong length");
    st.betaF = *cfg.betaInit;
  } else {
    st.betaF = cfg.start == EMStart::PlainLogit && F > 0 ? plainLogitStart(data, grid, cfg.logit)
                                                         : Vector::Zero(F);
  }

  auto fitTheta = [&](const Vector& betaF, std::optional<Vector> warm) {
    const KernelMatrix km = evalLogitKernel(data, grid, data.fixedOffsets(betaF));
    SolverConfig sc = cfg.solver;
    sc.mu = st.mu;
    sc.warmStart = std::move(warm);
    return solveSimplexRidge(km, data.y(), sc).theta;
  };

  if (cfg.mu) {
    detail::require(*cfg.mu >= 0.0, "mu must be nonnegative");
    st.mu = *cfg.mu;
  } else {
    CVConfig cv;
    cv.folds = cfg.folds;
    cv.seed = cfg.seed;
    cv.solver = cfg.solver;
    const KernelMatrix km = evalLogitKernel(data, grid, data.fixedOffsets(st.betaF));
    st.mu = selectMu(crossValidate(data, km, makeMuPath(cfg.path), cv), cfg.rule);
  }

  st.theta = fitTheta(st.betaF, std::nullopt);
  if (F == 0) {
    st.logLik = mixtureLogLikelihood(data, grid, st.betaF, st.theta);
    st.posterior = posteriorWeights(data, grid, st.betaF, st.theta);
    st.iterations = 1;
    return st;
  }

  double prevLL = -std::numeric_limits<double>::infinity();
  for (st.iterations = 1; st.iterations <= cfg.maxIters; ++st.iterations) {
    if (st.iterations > 1) st.theta = fitTheta(st.betaF, st.theta.values());
    st.posterior = posteriorWeights(data, grid, st.betaF, st.theta);
    EMIteration rec;
    rec.llBeforeBeta = mixtureLogLikelihood(data, grid, st.betaF, st.theta);
    const Vector next = fitWeightedLogit(data, st.posterior, grid, st.betaF, cfg.logit).beta;
    rec.betaChange = (next - st.betaF).cwiseAbs().maxCoeff();
    st.betaF = next;
    rec.llAfterBeta = mixtureLogLikelihood(data, grid, st.betaF, st.theta);
    st.trace.push_back(rec);
    st.logLik = rec.llAfterBeta;
    if (rec.betaChange < cfg.tolBeta && std::abs(rec.llAfterBeta - prevLL) < cfg.tolLL) return st;
    prevLL = rec.llAfterBeta;
  }
  st.iterations = cfg.maxIters;
  throw EMError("EM did not converge within " + std::to_string(cfg.maxIters) + " iterations", st);
}

/// Identifies the covariate whose elasticities are computed.
struct VariableRef {
  bool fixed = false;
  Index column = 0;
};

struct ElasticityResult {
  /// Entry (k, j): elasticity of alternative j's probability with respect to
  /// the variable of alternative k.
  Matrix mean;
  Matrix median;
  Index excludedUnits = 0;
};

namespace detail {

/// Mixture probabilities of one unit and their derivative with respect to the
/// variable of every alternative: dP(k, j) = d P_j / d x_{k,t}.
inline void unitMixtureDerivatives(const ChoiceDataset& data, const Matrix& vRandom, const Vector& off,
                                   const Grid& grid, const WeightVector& theta, const Vector& betaF,
                                   VariableRef var, Index i, Vector& P, Matrix& dP) {
  const Index J = data.alternatives();
  P = Vector::Zero(J);
  dP = Matrix::Zero(J, J);
  Vector p;
  for (Index r = 0; r < grid.size(); ++r) {
    if (theta[r] == 0.0) continue;
    unitProbabilities(data, vRandom, off, i, r, p);
    const double b = var.fixed ? betaF(var.column) : grid.point(r)(var.column);
    P += theta[r] * p;
    for (Index k = 0; k < J; ++k)
      for (Index j = 0; j < J; ++j) dP(k, j) += theta[r] * b * p(j) * ((j == k ? 1.0 : 0.0) - p(k));
  }
}

inline double median(std::vector<double> v) {
  const std::size_t n = v.size();
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(n / 2), v.end());
  const double hi = v[n / 2];
  if (n % 2) return hi;
  return 0.5 * (hi + *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(n / 2)));
}

}  // namespace detail

/// Point elasticities of the mixture choice probabilities, aggregated over units.
inline ElasticityResult elasticities(const ChoiceDataset& data, const Grid& grid, const WeightVector& theta,
                                     const Vector& betaF, VariableRef var) {
  detail::require(theta.size() == grid.size(), "one weight per grid point required");
  detail::require(var.column >= 0 && var.column < (var.fixed ? data.fixedDim() : data.randomDim()),
                  "elasticity variable column out of range");
  const Index J = data.alternatives();
  const Matrix v = detail::randomUtilities(data, grid);
  const Vector off = data.fixedOffsets(betaF);
  const Matrix& X = var.fixed ? data.xFixed() : data.xRandom();
  std::vector<std::vector<double>> cells(static_cast<std::size_t>(J * J));
  ElasticityResult res;
  Vector P;
  Matrix dP;
  for (Index i = 0; i < data.units(); ++i) {
    detail::unitMixtureDerivatives(data, v, off, grid, theta, betaF, var, i, P, dP);
    if (P.minCoeff() <= 1e-12) {
      ++res.excludedUnits;
      continue;
    }
    for (Index k = 0; k < J; ++k)
      for (Index j = 0; j < J; ++j)
        cells[static_cast<std::size_t>(k * J + j)].push_back(X(i * J + k, var.column) * dP(k, j) / P(j));
  }
  if (cells[0].empty()) throw NumericalError("every unit has a choice probability <= 1e-12");
  res.mean.resize(J, J);
  res.median.resize(J, J);
  for (Index k = 0; k < J; ++k)
    for (Index j = 0; j < J; ++j) {
      const auto& c = cells[static_cast<std::size_t>(k * J + j)];
      double s = 0.0;
      for (double e : c) s += e;
      res.mean(k, j) = s / static_cast<double>(c.size());
      res.median(k, j) = detail::median(c);
    }
  return res;
}

}  // namespace gridmix
