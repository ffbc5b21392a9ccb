#pragma once

// Monte Carlo machinery: covariate and choice simulation under the
// random-coefficients logit, the two benchmark coefficient distributions
// (discrete mass on grid points, two-component bivariate normal mixture),
// and a deterministic multi-threaded experiment runner.

#include <boost/math/distributions/normal.hpp>
#include <boost/math/quadrature/gauss_kronrod.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <mutex>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include "gridmix/errors.hpp"
#include "gridmix/metrics.hpp"
#include "gridmix/model_core.hpp"
#include "gridmix/solver.hpp"
#include "gridmix/tuning.hpp"

namespace gridmix {

// ---------------------------------------------------------------------------
// Random streams

/// SplitMix64 finalizer; used to derive independent seeds from counters.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

/// Seed for stream `stream` of task `counter` under `master`.
inline std::uint64_t deriveSeed(std::uint64_t master, std::uint64_t counter, std::uint64_t stream = 0) {
  return splitmix64(splitmix64(splitmix64(master) ^ counter) ^ (stream * 0xD1B54A32D192ED03ull));
}

namespace streams {
inline constexpr std::uint64_t kCovariates = 1;
inline constexpr std::uint64_t kCoefficients = 2;
inline constexpr std::uint64_t kErrors = 3;
inline constexpr std::uint64_t kFolds = 4;
inline constexpr std::uint64_t kEvalPoints = 5;
}  // namespace streams

/// Uniform on the open interval (0, 1) from 53 random bits.
inline double openUniform(std::mt19937_64& rng) {
  return (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53;
}

inline double standardGumbel(std::mt19937_64& rng) { return -std::log(-std::log(openUniform(rng))); }

// ---------------------------------------------------------------------------
// Data simulation

/// Independent uniform covariates per dimension; defaults to U(0,5) x U(-3,1).
inline Matrix drawCovariates(Index units, Index alternatives, std::uint64_t seed,
                             const std::vector<Interval>& ranges = {{0.0, 5.0}, {-3.0, 1.0}}) {
  detail::require(units >= 1 && alternatives >= 1, "drawCovariates needs N, J >= 1");
  detail::require(!ranges.empty(), "at least one covariate range required");
  std::mt19937_64 rng(seed);
  Matrix x(units * alternatives, static_cast<Index>(ranges.size()));
  for (Index row = 0; row < x.rows(); ++row)
    for (Index k = 0; k < x.cols(); ++k) {
      const auto& iv = ranges[static_cast<std::size_t>(k)];
      x(row, k) = iv.lo + (iv.hi - iv.lo) * openUniform(rng);
    }
  return x;
}

/// Utility-maximizing choices with standard Gumbel errors. Rows of `betas` are
/// per-unit coefficients. Error draws per unit: outside option first (when
/// present), then alternatives in order.
inline Vector simulateChoices(const Matrix& x, Index alternatives, const Matrix& betas,
                              std::uint64_t seed, bool hasOutside = true,
                              const Vector& offsets = Vector()) {
  const Index J = alternatives;
  detail::require(J >= 1 && x.rows() % J == 0, "covariate rows must be a multiple of J");
  const Index N = x.rows() / J;
  detail::require(betas.rows() == N, "one coefficient vector per unit required");
  detail::require(betas.cols() == x.cols(), "coefficient dimension must match covariates");
  detail::require(offsets.size() == 0 || offsets.size() == x.rows(), "offsets need one entry per row");
  std::mt19937_64 rng(seed);
  Vector y = Vector::Zero(x.rows());
  for (Index i = 0; i < N; ++i) {
    double best = hasOutside ? standardGumbel(rng) : -std::numeric_limits<double>::infinity();
    Index pick = -1;
    for (Index j = 0; j < J; ++j) {
      double u = x.row(i * J + j).dot(betas.row(i)) + standardGumbel(rng);
      if (offsets.size() > 0) u += offsets(i * J + j);
      if (u > best) {
        best = u;
        pick = j;
      }
    }
    if (pick >= 0) y(i * J + pick) = 1.0;
  }
  return y;
}

inline std::vector<std::string> sequentialIds(Index n) {
  std::vector<std::string> ids;
  ids.reserve(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) ids.push_back(std::to_string(i + 1));
  return ids;
}

// ---------------------------------------------------------------------------
// Bivariate normal CDF

inline double normalCDF(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

/// P(X <= h, Y <= k) for standard normals with correlation r, |r| < 1:
/// Phi(h)Phi(k) + (1/2pi) * integral over t in [0, asin r] of
/// exp(-(h^2 + k^2 - 2hk sin t) / (2 cos^2 t)).
inline double bivariateNormalCDF(double h, double k, double r) {
  detail::require(std::abs(r) < 1.0, "correlation must lie strictly inside (-1, 1)");
  if (std::isnan(h) || std::isnan(k)) throw ValidationError("bivariate normal CDF at NaN");
  constexpr double kBig = 40.0;
  h = std::clamp(h, -kBig, kBig);
  k = std::clamp(k, -kBig, kBig);
  const double base = normalCDF(h) * normalCDF(k);
  if (r == 0.0) return base;
  auto f = [h, k](double t) {
    const double s = std::sin(t), c = std::cos(t);
    return std::exp(-(h * h + k * k - 2.0 * h * k * s) / (2.0 * c * c));
  };
  const double integral =
      boost::math::quadrature::gauss_kronrod<double, 61>::integrate(f, 0.0, std::asin(r), 8, 1e-14);
  return std::clamp(base + integral / (2.0 * std::numbers::pi), 0.0, 1.0);
}

// ---------------------------------------------------------------------------
// Data-generating processes

struct Box {
  std::vector<Interval> sides;

  bool contains(const Eigen::Ref<const Eigen::RowVectorXd>& p) const {
    for (std::size_t k = 0; k < sides.size(); ++k)
      if (p(static_cast<Index>(k)) < sides[k].lo || p(static_cast<Index>(k)) > sides[k].hi) return false;
    return true;
  }
};

/// Uniform mass on the grid points that fall in any of the support boxes.
struct DiscreteDGPSpec {
  std::vector<Box> regions;
  Index units = 1000;
  Index alternatives = 4;
  std::uint64_t seed = 1;
};

/// Gaussian mixture with a shared covariance.
struct MixtureDGPSpec {
  std::vector<Eigen::Vector2d> means{Eigen::Vector2d(-2.2, -2.2), Eigen::Vector2d(1.3, 1.3)};
  Eigen::Matrix2d covariance = (Eigen::Matrix2d() << 0.8, 0.15, 0.15, 0.8).finished();
  std::vector<double> mixing{0.5, 0.5};
  Index units = 1000;
  Index alternatives = 4;
  std::uint64_t seed = 1;
  /// Grid points with mixture density above this value count as true support.
  double densityThreshold = 1e-3;
};

inline DiscreteDGPSpec benchmarkDiscreteSpec() {
  DiscreteDGPSpec s;
  // Lower box stops at -0.5 in both axes; this yields S = 17, 49, 161 on the 5x5, 9x9 and 17x17 lattices.
  s.regions = {Box{{{-4.5, -0.5}, {-4.5, -0.5}}}, Box{{{-0.5, 4.5}, {-0.5, 3.5}}}};
  return s;
}

inline std::vector<Interval> benchmarkBox() { return {{-4.5, 3.5}, {-4.5, 3.5}}; }

struct GroundTruth {
  /// True CDF of the coefficient distribution.
  std::function<double(const Eigen::Ref<const Eigen::RowVectorXd>&)> cdf;
  /// Weights on the estimation grid when the truth lives on it.
  std::optional<Vector> weights;
  /// Grid points that carry true mass (discrete) or density above threshold (mixture).
  std::vector<bool> support;

  Index supportSize() const { return static_cast<Index>(std::count(support.begin(), support.end(), true)); }
};

struct SimulatedSample {
  ChoiceDataset data;
  Matrix betas;
  GroundTruth truth;
};

inline std::vector<bool> discreteSupport(const DiscreteDGPSpec& spec, const Grid& grid) {
  std::vector<bool> mask(static_cast<std::size_t>(grid.size()), false);
  for (Index r = 0; r < grid.size(); ++r)
    for (const auto& box : spec.regions) {
      detail::require(static_cast<Index>(box.sides.size()) == grid.dim(),
                      "support region dimension must match the grid");
      if (box.contains(grid.point(r))) mask[static_cast<std::size_t>(r)] = true;
    }
  return mask;
}

inline void validate(const MixtureDGPSpec& spec) {
  detail::require(!spec.means.empty() && spec.means.size() == spec.mixing.size(),
                  "one mixing weight per component required");
  double total = 0.0;
  for (double w : spec.mixing) {
    detail::require(w >= 0.0, "mixing weights must be nonnegative");
    total += w;
  }
  detail::require(std::abs(total - 1.0) <= 1e-12, "mixing weights must sum to 1");
  const auto& S = spec.covariance;
  detail::require(S(0, 1) == S(1, 0) && S(0, 0) > 0.0 && S.determinant() > 0.0,
                  "mixture covariance must be symmetric positive definite");
}

inline double mixtureDensity(const MixtureDGPSpec& spec, const Eigen::Vector2d& b) {
  const Eigen::Matrix2d inv = spec.covariance.inverse();
  const double norm = 1.0 / (2.0 * std::numbers::pi * std::sqrt(spec.covariance.determinant()));
  double d = 0.0;
  for (std::size_t c = 0; c < spec.means.size(); ++c) {
    const Eigen::Vector2d z = b - spec.means[c];
    d += spec.mixing[c] * norm * std::exp(-0.5 * z.dot(inv * z));
  }
  return d;
}

inline double mixtureCDF(const MixtureDGPSpec& spec, const Eigen::Ref<const Eigen::RowVectorXd>& b) {
  detail::require(b.size() == 2, "mixture CDF is bivariate");
  const double s1 = std::sqrt(spec.covariance(0, 0)), s2 = std::sqrt(spec.covariance(1, 1));
  const double r = spec.covariance(0, 1) / (s1 * s2);
  double F = 0.0;
  for (std::size_t c = 0; c < spec.means.size(); ++c)
    F += spec.mixing[c] *
         bivariateNormalCDF((b(0) - spec.means[c](0)) / s1, (b(1) - spec.means[c](1)) / s2, r);
  return F;
}

inline std::vector<bool> mixtureSupport(const MixtureDGPSpec& spec, const Grid& grid) {
  detail::require(grid.dim() == 2, "mixture truth needs a two-dimensional grid");
  std::vector<bool> mask(static_cast<std::size_t>(grid.size()));
  for (Index r = 0; r < grid.size(); ++r)
    mask[static_cast<std::size_t>(r)] =
        mixtureDensity(spec, grid.point(r).transpose()) > spec.densityThreshold;
  return mask;
}

/// Draws coefficients, covariates and choices for the discrete design on `grid`.
inline SimulatedSample sampleDGP(const DiscreteDGPSpec& spec, const Grid& grid) {
  const auto mask = discreteSupport(spec, grid);
  std::vector<Index> support;
  for (Index r = 0; r < grid.size(); ++r)
    if (mask[static_cast<std::size_t>(r)]) support.push_back(r);
  detail::require(!support.empty(), "discrete DGP regions contain no grid points");

  Vector w = Vector::Zero(grid.size());
  for (Index r : support) w(r) = 1.0 / static_cast<double>(support.size());

  std::mt19937_64 rng(deriveSeed(spec.seed, 0, streams::kCoefficients));
  Matrix betas(spec.units, grid.dim());
  for (Index i = 0; i < spec.units; ++i) {
    const auto pick = static_cast<std::size_t>(openUniform(rng) * static_cast<double>(support.size()));
    betas.row(i) = grid.point(support[std::min(pick, support.size() - 1)]);
  }
  detail::require(grid.dim() == 2, "benchmark covariates are two-dimensional");
  const Matrix x = drawCovariates(spec.units, spec.alternatives, deriveSeed(spec.seed, 0, streams::kCovariates));
  Vector y = simulateChoices(x, spec.alternatives, betas, deriveSeed(spec.seed, 0, streams::kErrors));

  StepCDF stepTruth(grid, WeightVector(w));
  GroundTruth truth;
  truth.cdf = [stepTruth](const Eigen::Ref<const Eigen::RowVectorXd>& b) { return stepTruth(b); };
  truth.weights = w;
  truth.support = mask;
  return {ChoiceDataset(sequentialIds(spec.units), spec.alternatives, x, Matrix(), std::move(y), true),
          std::move(betas), std::move(truth)};
}

/// Draws coefficients, covariates and choices from the normal mixture; `grid`
/// only determines the true-support mask.
inline SimulatedSample sampleDGP(const MixtureDGPSpec& spec, const Grid& grid) {
  validate(spec);
  std::mt19937_64 rng(deriveSeed(spec.seed, 0, streams::kCoefficients));
  std::normal_distribution<double> nd(0.0, 1.0);
  const Eigen::Matrix2d L = spec.covariance.llt().matrixL();
  Matrix betas(spec.units, 2);
  for (Index i = 0; i < spec.units; ++i) {
    const double u = openUniform(rng);
    std::size_t c = 0;
    double acc = spec.mixing[0];
    while (u > acc && c + 1 < spec.mixing.size()) acc += spec.mixing[++c];
    const Eigen::Vector2d z(nd(rng), nd(rng));
    betas.row(i) = (spec.means[c] + L * z).transpose();
  }
  const Matrix x = drawCovariates(spec.units, spec.alternatives, deriveSeed(spec.seed, 0, streams::kCovariates));
  Vector y = simulateChoices(x, spec.alternatives, betas, deriveSeed(spec.seed, 0, streams::kErrors));

  GroundTruth truth;
  truth.cdf = [spec](const Eigen::Ref<const Eigen::RowVectorXd>& b) { return mixtureCDF(spec, b); };
  truth.support = mixtureSupport(spec, grid);
  return {ChoiceDataset(sequentialIds(spec.units), spec.alternatives, x, Matrix(), std::move(y), true),
          std::move(betas), std::move(truth)};
}

// ---------------------------------------------------------------------------
// Correlation diagnostic

inline double quantileType7(std::vector<double> v, double p) {
  detail::require(!v.empty(), "quantile of an empty sample");
  std::sort(v.begin(), v.end());
  const double h = (static_cast<double>(v.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

/// Third quartile of |corr| over all pairs of kernel columns; constant columns are skipped.
inline double correlationQ3(const Matrix& Z) {
  Matrix c = Z.rowwise() - Z.colwise().mean();
  const Eigen::RowVectorXd norms = c.colwise().norm();
  std::vector<Index> keep;
  for (Index r = 0; r < Z.cols(); ++r)
    if (norms(r) > 0.0) keep.push_back(r);
  detail::require(keep.size() >= 2, "correlation quartile needs two nonconstant columns");
  Matrix u(Z.rows(), static_cast<Index>(keep.size()));
  for (std::size_t k = 0; k < keep.size(); ++k) u.col(static_cast<Index>(k)) = c.col(keep[k]) / norms(keep[k]);
  const Matrix C = u.transpose() * u;
  std::vector<double> vals;
  vals.reserve(keep.size() * (keep.size() - 1) / 2);
  for (Index a = 0; a < C.rows(); ++a)
    for (Index b = a + 1; b < C.cols(); ++b) vals.push_back(std::min(1.0, std::abs(C(a, b))));
  return quantileType7(std::move(vals), 0.75);
}

// ---------------------------------------------------------------------------
// Experiment runner

enum class Estimator { FKRB, MinMSE, OneSE, MaxLL, MaxPredOut };

inline const char* toString(Estimator e) {
  switch (e) {
    case Estimator::FKRB: return "FKRB";
    case Estimator::MinMSE: return "MSE";
    case Estimator::OneSE: return "OneSE";
    case Estimator::MaxLL: return "LL";
    case Estimator::MaxPredOut: return "PredOut";
  }
  return "?";
}

inline SelectionRule ruleOf(Estimator e) {
  switch (e) {
    case Estimator::MinMSE: return SelectionRule::MinMSE;
    case Estimator::OneSE: return SelectionRule::OneSE;
    case Estimator::MaxLL: return SelectionRule::MaxLL;
    case Estimator::MaxPredOut: return SelectionRule::MaxPredOut;
    case Estimator::FKRB: break;
  }
  throw ValidationError("FKRB has no selection rule");
}

struct ExperimentSpec {
  std::variant<DiscreteDGPSpec, MixtureDGPSpec> dgp = benchmarkDiscreteSpec();
  std::vector<Index> sampleSizes{1000};
  std::vector<Index> gridSizes{25};
  std::vector<Interval> gridRange = benchmarkBox();
  /// Defaults to a lattice for the discrete design and Halton for the mixture.
  std::optional<GridScheme> scheme;
  Index replications = 200;
  std::vector<Estimator> estimators{Estimator::FKRB, Estimator::MinMSE, Estimator::OneSE};
  MuPathConfig path;
  /// Replaces the generated path when set (for example {0}).
  std::optional<std::vector<double>> explicitPath;
  Index folds = 10;
  Index evalPoints = 10000;
  double positiveThreshold = 1e-3;
  SolverConfig solver;
  std::uint64_t masterSeed = 20240101;
  unsigned threads = 0;
};

struct EstimateRecord {
  Estimator estimator = Estimator::FKRB;
  bool ok = false;
  std::string error;
  Vector theta;
  double mu = 0.0;
  double ise = 0.0;
  double absError = 0.0;
  SupportReport support;
};

struct ReplicationRecord {
  Index units = 0;
  Index gridSize = 0;
  Index replication = 0;
  std::uint64_t seed = 0;
  Index trueSupport = 0;
  double correlationQ3 = 0.0;
  std::vector<EstimateRecord> estimates;
};

struct SummaryRow {
  Index units = 0;
  Index gridSize = 0;
  Index trueSupport = 0;
  Estimator estimator = Estimator::FKRB;
  double rmise = 0.0;
  /// NaN when the truth has no grid weights.
  double l1 = 0.0;
  double pos = 0.0;
  double truePos = 0.0;
  double sign = 0.0;
  double mu = 0.0;
  double rhoQ3 = 0.0;
  Index replications = 0;
  Index failures = 0;
};

struct ExperimentResult {
  std::vector<SummaryRow> summary;
  std::vector<ReplicationRecord> replications;
};

inline bool isDiscrete(const ExperimentSpec& spec) {
  return std::holds_alternative<DiscreteDGPSpec>(spec.dgp);
}

inline Grid experimentGrid(const ExperimentSpec& spec, Index R) {
  const GridScheme scheme =
      spec.scheme.value_or(isDiscrete(spec) ? GridScheme::UniformLattice : GridScheme::Halton);
  return buildGrid(spec.gridRange, R, scheme);
}

/// Evaluation points drawn uniformly over the grid range from the master seed.
inline Matrix experimentEvalPoints(const ExperimentSpec& spec) {
  std::mt19937_64 rng(deriveSeed(spec.masterSeed, 0, streams::kEvalPoints));
  Matrix pts(spec.evalPoints, static_cast<Index>(spec.gridRange.size()));
  for (Index e = 0; e < pts.rows(); ++e)
    for (Index k = 0; k < pts.cols(); ++k) {
      const auto& iv = spec.gridRange[static_cast<std::size_t>(k)];
      pts(e, k) = iv.lo + (iv.hi - iv.lo) * openUniform(rng);
    }
  return pts;
}

/// Fits every requested estimator on one simulated sample.
inline std::vector<EstimateRecord> fitEstimators(const ExperimentSpec& spec, const SimulatedSample& sample,
                                                 const Grid& grid, const KernelMatrix& km,
                                                 const Matrix& evalPts, const Vector& truthAtEval,
                                                 std::uint64_t foldSeed) {
  const QuadraticLoss loss = makeLoss(km.Z, sample.data.y());
  std::vector<EstimateRecord> out;
  std::optional<CVResult> cv;
  std::string cvError;
  const bool needCV = std::any_of(spec.estimators.begin(), spec.estimators.end(),
                                  [](Estimator e) { return e != Estimator::FKRB; });
  if (needCV) {
    try {
      const MuPath path = spec.explicitPath ? MuPath(*spec.explicitPath) : makeMuPath(spec.path);
      CVConfig cfg;
      cfg.folds = spec.folds;
      cfg.seed = foldSeed;
      cfg.solver = spec.solver;
      cv = crossValidate(sample.data, km, path, cfg);
    } catch (const NumericalError& e) {
      cvError = std::string("cross-validation: ") + e.what();
    }
  }
  for (Estimator est : spec.estimators) {
    EstimateRecord rec;
    rec.estimator = est;
    try {
      if (est != Estimator::FKRB && !cv) throw NumericalError(cvError);
      rec.mu = est == Estimator::FKRB ? 0.0 : selectMu(*cv, ruleOf(est));
      SolverConfig sc = spec.solver;
      sc.mu = rec.mu;
      const Solution sol = solveSimplexRidge(loss, sc);
      rec.theta = sol.theta.values();
      const StepCDF cdf(grid, sol.theta);
      rec.ise = integratedSquaredError(cdf.evaluate(evalPts), truthAtEval);
      if (sample.truth.weights) rec.absError = absoluteWeightError(rec.theta, *sample.truth.weights);
      rec.support = supportMetrics(rec.theta, sample.truth.support, spec.positiveThreshold);
      rec.ok = true;
    } catch (const NumericalError& e) {
      rec.error = e.what();
    }
    out.push_back(std::move(rec));
  }
  return out;
}

/// Runs all (N, R, replication) cells. Every replication draws from seeds
/// derived from (master seed, cell counter), so the result is identical for
/// any thread count.
inline ExperimentResult runMonteCarlo(const ExperimentSpec& spec) {
  detail::require(spec.replications >= 1, "experiment needs M >= 1");
  detail::require(!spec.sampleSizes.empty() && !spec.gridSizes.empty(), "experiment needs N and R values");
  detail::require(!spec.estimators.empty(), "experiment needs at least one estimator");
  detail::require(spec.evalPoints >= 1, "experiment needs evaluation points");

  const Matrix evalPts = experimentEvalPoints(spec);
  std::vector<Grid> grids;
  for (Index R : spec.gridSizes) grids.push_back(experimentGrid(spec, R));

  // The truth at the evaluation points depends on the grid only for the discrete design.
  std::vector<Vector> truthAtEval(grids.size());
  for (std::size_t g = 0; g < grids.size(); ++g) {
    if (g > 0 && !isDiscrete(spec)) {
      truthAtEval[g] = truthAtEval[0];
      continue;
    }
    Vector t(evalPts.rows());
    if (isDiscrete(spec)) {
      const auto& d = std::get<DiscreteDGPSpec>(spec.dgp);
      const auto mask = discreteSupport(d, grids[g]);
      const auto s = static_cast<double>(std::count(mask.begin(), mask.end(), true));
      detail::require(s > 0, "discrete DGP regions contain no grid points");
      Vector w(grids[g].size());
      for (Index r = 0; r < w.size(); ++r) w(r) = mask[static_cast<std::size_t>(r)] ? 1.0 / s : 0.0;
      t = StepCDF(grids[g], WeightVector(w)).evaluate(evalPts);
    } else {
      const auto& m = std::get<MixtureDGPSpec>(spec.dgp);
      for (Index e = 0; e < evalPts.rows(); ++e) t(e) = mixtureCDF(m, evalPts.row(e));
    }
    truthAtEval[g] = std::move(t);
  }

  struct Task {
    std::size_t n, g;
    Index m;
  };
  std::vector<Task> tasks;
  for (std::size_t n = 0; n < spec.sampleSizes.size(); ++n)
    for (std::size_t g = 0; g < grids.size(); ++g)
      for (Index m = 0; m < spec.replications; ++m) tasks.push_back({n, g, m});

  std::vector<ReplicationRecord> records(tasks.size());
  auto runTask = [&](std::size_t t) {
    const Task& task = tasks[t];
    const Grid& grid = grids[task.g];
    const std::uint64_t seed = deriveSeed(spec.masterSeed, t + 1);
    ReplicationRecord rec;
    rec.units = spec.sampleSizes[task.n];
    rec.gridSize = grid.size();
    rec.replication = task.m;
    rec.seed = seed;
    const SimulatedSample sample = std::visit(
        [&](auto dgp) {
          dgp.units = rec.units;
          dgp.seed = seed;
          return sampleDGP(dgp, grid);
        },
        spec.dgp);
    rec.trueSupport = sample.truth.supportSize();
    const KernelMatrix km = evalLogitKernel(sample.data, grid);
    rec.correlationQ3 = correlationQ3(km.Z);
    rec.estimates = fitEstimators(spec, sample, grid, km, evalPts, truthAtEval[task.g],
                                  deriveSeed(seed, 0, streams::kFolds));
    records[t] = std::move(rec);
  };

  unsigned threads = spec.threads ? spec.threads : std::max(1u, std::thread::hardware_concurrency());
  threads = std::min<unsigned>(threads, static_cast<unsigned>(tasks.size()));
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failureMutex;
  auto worker = [&] {
    for (std::size_t t; (t = next.fetch_add(1)) < tasks.size();) {
      try {
        runTask(t);
      } catch (...) {
        std::lock_guard lock(failureMutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned k = 0; k < threads; ++k) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (failure) std::rethrow_exception(failure);

  ExperimentResult res;
  for (std::size_t n = 0; n < spec.sampleSizes.size(); ++n) {
    for (std::size_t g = 0; g < grids.size(); ++g) {
      for (std::size_t e = 0; e < spec.estimators.size(); ++e) {
        SummaryRow row;
        row.units = spec.sampleSizes[n];
        row.gridSize = grids[g].size();
        row.estimator = spec.estimators[e];
        double ise = 0.0, l1 = 0.0, pos = 0.0, tp = 0.0, sign = 0.0, mu = 0.0, rho = 0.0, support = 0.0;
        Index ok = 0;
        for (std::size_t t = 0; t < tasks.size(); ++t) {
          if (tasks[t].n != n || tasks[t].g != g) continue;
          const auto& rec = records[t];
          const auto& est = rec.estimates[e];
          ++row.replications;
          rho += rec.correlationQ3;
          support += static_cast<double>(rec.trueSupport);
          if (!est.ok) {
            ++row.failures;
            continue;
          }
          ++ok;
          ise += est.ise;
          l1 += est.absError;
          pos += static_cast<double>(est.support.posCount);
          tp += est.support.truePosShare;
          sign += est.support.signShare;
          mu += est.mu;
        }
        const double reps = static_cast<double>(row.replications);
        row.trueSupport = static_cast<Index>(std::llround(support / reps));
        row.rhoQ3 = rho / reps;
        const double k = static_cast<double>(ok);
        const double nan = std::numeric_limits<double>::quiet_NaN();
        row.rmise = ok ? std::sqrt(ise / k) : nan;
        row.l1 = ok && isDiscrete(spec) ? l1 / k : nan;
        row.pos = ok ? pos / k : nan;
        row.truePos = ok ? tp / k : nan;
        row.sign = ok ? sign / k : nan;
        row.mu = ok ? mu / k : nan;
        res.summary.push_back(row);
      }
    }
  }
  res.replications = std::move(records);
  return res;
}

}  // namespace gridmix
