#include <gtest/gtest.h>

#include <random>

#include "gridmix/simulate.hpp"
#include "gridmix/twostep.hpp"

using namespace gridmix;

namespace {

/// Mixture probabilities of every alternative of unit i, outside utility 0.
Vector mixtureProbs(const Matrix& xR, const Matrix& xF, Index J, Index i, const Matrix& pts,
                    const Vector& theta, const Vector& betaF) {
  Vector P = Vector::Zero(J);
  for (Index r = 0; r < pts.rows(); ++r) {
    Vector e(J);
    double denom = 1.0;
    for (Index j = 0; j < J; ++j) {
      double u = xR.row(i * J + j).dot(pts.row(r));
      if (betaF.size() > 0) u += xF.row(i * J + j).dot(betaF);
      e(j) = std::exp(u);
      denom += e(j);
    }
    P += theta(r) * e / denom;
  }
  return P;
}

/// Weighted log-likelihood written out directly.
double weightedLL(const ChoiceDataset& d, const Matrix& pts, const Matrix& h, const Vector& betaF) {
  const Index J = d.alternatives();
  double s = 0.0;
  for (Index i = 0; i < d.units(); ++i)
    for (Index r = 0; r < pts.rows(); ++r) {
      const Vector one = Vector::Unit(pts.rows(), r);
      const Vector p = mixtureProbs(d.xRandom(), d.xFixed(), J, i, pts, one, betaF);
      const int c = d.choice(i);
      s += h(i, r) * std::log(c >= 0 ? p(c) : 1.0 - p.sum());
    }
  return s;
}

struct Design {
  ChoiceDataset data;
  Grid grid;
};

/// One random covariate, `F` fixed covariates, choices drawn at `betaM` per unit.
Design makeDesign(Index N, Index J, const Matrix& pts, const Vector& betaF, std::uint64_t seed,
                  const Vector* weights = nullptr) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.5, 1.5);
  const Index F = betaF.size();
  Matrix xR(N * J, pts.cols()), xF(N * J, F);
  for (Index k = 0; k < xR.size(); ++k) xR.data()[k] = u(rng);
  for (Index k = 0; k < xF.size(); ++k) xF.data()[k] = u(rng);
  Matrix betas(N, pts.cols());
  std::discrete_distribution<Index> pick;
  if (weights) pick = std::discrete_distribution<Index>(weights->data(), weights->data() + weights->size());
  for (Index i = 0; i < N; ++i) betas.row(i) = pts.row(weights ? pick(rng) : 0);
  const Vector off = F > 0 ? Vector(xF * betaF) : Vector();
  Vector y = simulateChoices(xR, J, betas, seed + 1, true, off);
  std::vector<Interval> range(static_cast<std::size_t>(pts.cols()), Interval{-3, 3});
  return {ChoiceDataset(sequentialIds(N), J, xR, xF, std::move(y), true), Grid(pts, GridScheme::Halton, range)};
}

}  // namespace

TEST(Posterior, SinglePointIsOne) {
  const auto d = makeDesign(30, 3, Matrix::Constant(1, 1, 0.4), Vector(), 1);
  const Matrix h = posteriorWeights(d.data, d.grid, Vector(), WeightVector::uniform(1));
  EXPECT_TRUE(h.isOnes(0));
}

TEST(Posterior, IdenticalKernelsReturnPrior) {
  // Random covariate identically zero makes every grid point's kernel equal.
  Matrix pts(3, 1);
  pts << -1, 0, 2;
  auto d = makeDesign(20, 2, pts, Vector(), 2);
  const ChoiceDataset flat(d.data.unitIds(), 2, Matrix::Zero(40, 1), Matrix(), d.data.y(), true);
  const WeightVector th(Eigen::Vector3d(0.2, 0.5, 0.3));
  const Matrix h = posteriorWeights(flat, d.grid, Vector(), th);
  for (Index i = 0; i < 20; ++i) EXPECT_LT((h.row(i).transpose() - th.values()).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Posterior, TwoPointArithmetic) {
  // J = 1 without outside option is degenerate, so use J = 2 with probabilities (0.8, 0.2)
  // for the chosen alternative at the two grid points.
  const double a = std::log(0.8 / 0.2);
  Matrix x(2, 1);
  x << 1.0, 0.0;
  Vector y(2);
  y << 1, 0;
  const ChoiceDataset d({"u"}, 2, x, Matrix(), y, false);
  Matrix pts(2, 1);
  pts << a, -a;
  const Grid g(pts, GridScheme::Halton, {{-3, 3}});
  const Matrix h = posteriorWeights(d, g, Vector(), WeightVector::uniform(2));
  EXPECT_NEAR(h(0, 0), 0.8, 1e-15);
  EXPECT_NEAR(h(0, 1), 0.2, 1e-15);
}

TEST(Posterior, RowsSumToOne) {
  Matrix pts(4, 2);
  pts << -1, 1, 0, 0, 2, -1, 0.5, 0.5;
  const auto d = makeDesign(200, 3, pts, Eigen::Vector2d(0.3, -0.7), 3);
  const WeightVector th(Eigen::Vector4d(0.1, 0.2, 0.3, 0.4));
  const Matrix h = posteriorWeights(d.data, d.grid, Eigen::Vector2d(0.3, -0.7), th);
  EXPECT_GE(h.minCoeff(), 0.0);
  EXPECT_LT((h.rowwise().sum().array() - 1.0).abs().maxCoeff(), 1e-10);
}

TEST(Posterior, ZeroProbabilityNamesUnit) {
  Matrix x(2, 1);
  x << 1.0, 0.0;
  Vector y(2);
  y << 0, 1;
  const ChoiceDataset d({"unit-7"}, 2, x, Matrix(), y, false);
  const Grid g(Matrix::Constant(1, 1, 2000.0), GridScheme::Halton, {{0, 3000}});
  try {
    posteriorWeights(d, g, Vector(), WeightVector::uniform(1));
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("unit-7"), std::string::npos);
  }
}

TEST(WeightedLogit, NoFixedCoefficientsIsNoOp) {
  const auto d = makeDesign(10, 2, Matrix::Zero(1, 1), Vector(), 4);
  const auto r = fitWeightedLogit(d.data, Matrix::Ones(10, 1), d.grid, Vector());
  EXPECT_EQ(r.beta.size(), 0);
  EXPECT_EQ(r.iterations, 0);
}

TEST(WeightedLogit, SinglePointMatchesPlainLogitMLE) {
  const Vector truth = Eigen::Vector2d(0.8, -0.4);
  const auto d = makeDesign(500, 3, Matrix::Zero(1, 1), truth, 5);
  const auto r = fitWeightedLogit(d.data, Matrix::Ones(500, 1), d.grid, Vector::Zero(2));
  EXPECT_LE(r.gradNorm, 1e-8);

  // Plain MNL by gradient ascent with a fixed step, written from scratch.
  Vector b = Vector::Zero(2);
  const Index J = 3;
  for (int it = 0; it < 20000; ++it) {
    Vector g = Vector::Zero(2);
    for (Index i = 0; i < 500; ++i) {
      const Vector p = mixtureProbs(d.data.xRandom(), d.data.xFixed(), J, i, Matrix::Zero(1, 1),
                                    Vector::Ones(1), b);
      Vector xbar = Vector::Zero(2);
      for (Index j = 0; j < J; ++j) xbar += p(j) * d.data.xFixed().row(i * J + j).transpose();
      const int c = d.data.choice(i);
      g += (c >= 0 ? Vector(d.data.xFixed().row(i * J + c).transpose()) : Vector::Zero(2)) - xbar;
    }
    g /= 500.0;
    b += 1.0 * g;
    if (g.cwiseAbs().maxCoeff() < 1e-12) break;
  }
  EXPECT_LT((r.beta - b).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(WeightedLogit, MatchesBruteForceLineSearch) {
  Matrix pts(2, 1);
  pts << -0.7, 1.1;
  const auto d = makeDesign(20, 3, pts, Vector::Constant(1, 0.9), 6);
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0, 1);
  Matrix h(20, 2);
  for (Index i = 0; i < 20; ++i) {
    h(i, 0) = u(rng);
    h(i, 1) = 1.0 - h(i, 0);
  }
  const auto r = fitWeightedLogit(d.data, h, d.grid, Vector::Zero(1));
  double best = -5.0, bestVal = -std::numeric_limits<double>::infinity();
  for (int k = 0; k <= 100000; ++k) {
    const double b = -5.0 + 1e-4 * k;
    const double v = weightedLL(d.data, pts, h, Vector::Constant(1, b));
    if (v > bestVal) {
      bestVal = v;
      best = b;
    }
  }
  ASSERT_GT(best, -5.0);
  ASSERT_LT(best, 5.0);
  EXPECT_NEAR(r.beta(0), best, 1e-4);
  EXPECT_GE(r.objective * 20.0, bestVal - 1e-9);
}

TEST(WeightedLogit, GradientMatchesFiniteDifferences) {
  Matrix pts(3, 1);
  pts << -1, 0, 1;
  const auto d = makeDesign(60, 3, pts, Eigen::Vector2d(0.5, 0.2), 8);
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0.1, 1);
  Matrix h(60, 3);
  for (Index k = 0; k < h.size(); ++k) h.data()[k] = u(rng);
  h = h.array().colwise() / h.rowwise().sum().array();
  const Matrix v = d.data.xRandom() * pts.transpose();
  const Vector b = Eigen::Vector2d(0.3, -0.6);
  const auto ev = weightedLogitObjective(d.data, v, h, b, true);
  for (Index f = 0; f < 2; ++f) {
    const double step = 1e-6;
    Vector bp = b, bm = b;
    bp(f) += step;
    bm(f) -= step;
    const double fd = (weightedLogitObjective(d.data, v, h, bp, false).value -
                       weightedLogitObjective(d.data, v, h, bm, false).value) / (2 * step);
    EXPECT_NEAR(ev.grad(f), fd, 1e-5 * std::max(1.0, std::abs(fd)));
  }
  EXPECT_NEAR(ev.value * 60.0, weightedLL(d.data, pts, h, b), 1e-10);
}

TEST(EM, NoFixedCoefficientsIsSingleSolve) {
  Matrix pts(3, 1);
  pts << -1, 0, 1;
  const auto d = makeDesign(300, 3, pts, Vector(), 10);
  EMConfig cfg;
  cfg.mu = 0.05;
  const auto em = runEM(d.data, d.grid, cfg);
  SolverConfig sc;
  sc.mu = 0.05;
  const auto direct = solveSimplexRidge(evalLogitKernel(d.data, d.grid), d.data.y(), sc);
  EXPECT_EQ(em.theta.values(), direct.theta.values());
  EXPECT_EQ(em.iterations, 1);
}

TEST(EM, RecoversFixedCoefficient) {
  const Matrix pts = Matrix::Constant(1, 1, 0.6);
  const auto d = makeDesign(20000, 3, pts, Vector::Constant(1, 1.5), 11);
  EMConfig cfg;
  const auto a = runEM(d.data, d.grid, cfg);
  EXPECT_NEAR(a.betaF(0), 1.5, 0.05);
  cfg.start = EMStart::Zeros;
  const auto b = runEM(d.data, d.grid, cfg);
  EXPECT_NEAR(a.betaF(0), b.betaF(0), 1e-4);
}

TEST(EM, LikelihoodNondecreasingOnCoefficientStep) {
  Matrix pts(5, 1);
  pts << -2, -1, 0, 1, 2;
  const Vector w = (Vector(5) << 0.3, 0, 0.2, 0, 0.5).finished();
  const auto d = makeDesign(2000, 3, pts, Eigen::Vector2d(1.0, -0.5), 12, &w);
  EMConfig cfg;
  cfg.mu = 0.01;
  const auto em = runEM(d.data, d.grid, cfg);
  ASSERT_FALSE(em.trace.empty());
  for (const auto& t : em.trace) EXPECT_GE(t.llAfterBeta, t.llBeforeBeta - 1e-10);
  EXPECT_NEAR(em.betaF(0), 1.0, 0.2);
  EXPECT_NEAR(em.betaF(1), -0.5, 0.2);
}

TEST(EM, IterationCapCarriesState) {
  Matrix pts(2, 1);
  pts << -1, 1;
  const auto d = makeDesign(300, 3, pts, Vector::Constant(1, 0.7), 13);
  EMConfig cfg;
  cfg.maxIters = 1;
  cfg.tolBeta = 0.0;
  try {
    runEM(d.data, d.grid, cfg);
    FAIL() << "expected EMError";
  } catch (const EMError& e) {
    EXPECT_EQ(e.last().betaF.size(), 1);
    EXPECT_EQ(e.last().trace.size(), 1u);
  }
}

TEST(Elasticities, PlainLogitOwnAndCross) {
  const Matrix pts = Matrix::Constant(1, 1, -0.8);
  const auto d = makeDesign(50, 3, pts, Vector(), 14);
  const auto e = elasticities(d.data, d.grid, WeightVector::uniform(1), Vector(), {false, 0});
  std::vector<double> own0;
  double mean0 = 0.0;
  for (Index i = 0; i < 50; ++i) {
    const Vector P = mixtureProbs(d.data.xRandom(), d.data.xFixed(), 3, i, pts, Vector::Ones(1), Vector());
    mean0 += -0.8 * d.data.xRandom()(i * 3, 0) * (1.0 - P(0));
  }
  EXPECT_NEAR(e.mean(0, 0), mean0 / 50.0, 1e-12);
  for (Index k = 0; k < 3; ++k)
    for (Index j = 0; j < 3; ++j)
      if (j != k)
        for (Index l = 0; l < 3; ++l)
          if (l != k && l != j) EXPECT_NEAR(e.mean(k, j), e.mean(k, l), 1e-10);
  EXPECT_EQ(e.excludedUnits, 0);
}

TEST(Elasticities, ZeroCoefficientGivesZero) {
  Matrix pts(3, 2);
  pts << 0, -1, 0, 0.5, 0, 2;
  const auto d = makeDesign(40, 3, pts, Vector(), 15);
  const auto e = elasticities(d.data, d.grid, WeightVector(Eigen::Vector3d(0.2, 0.3, 0.5)), Vector(), {false, 0});
  EXPECT_EQ(e.mean.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(e.median.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Elasticities, MatchFiniteDifferences) {
  std::mt19937_64 rng(16);
  Matrix pts(4, 2);
  pts << -1.2, 0.4, 0.3, -0.9, 1.0, 1.5, 0.0, 0.2;
  const Vector th = Eigen::Vector4d(0.1, 0.4, 0.25, 0.25);
  const Vector bF = Eigen::Vector2d(0.6, -1.1);
  for (int rep = 0; rep < 5; ++rep) {
    const auto d = makeDesign(1, 3, pts, bF, 100 + rep);
    for (VariableRef var : {VariableRef{false, 1}, VariableRef{true, 0}}) {
      const auto e = elasticities(d.data, d.grid, WeightVector(th), bF, var);
      for (Index k = 0; k < 3; ++k) {
        Matrix xR = d.data.xRandom(), xF = d.data.xFixed();
        Matrix& X = var.fixed ? xF : xR;
        const double x0 = X(k, var.column);
        const double step = 1e-5 * std::abs(x0);
        X(k, var.column) = x0 + step;
        const Vector Pp = mixtureProbs(xR, xF, 3, 0, pts, th, bF);
        X(k, var.column) = x0 - step;
        const Vector Pm = mixtureProbs(xR, xF, 3, 0, pts, th, bF);
        X(k, var.column) = x0;
        const Vector P = mixtureProbs(xR, xF, 3, 0, pts, th, bF);
        for (Index j = 0; j < 3; ++j) {
          const double fd = x0 * (Pp(j) - Pm(j)) / (2 * step) / P(j);
          EXPECT_NEAR(e.mean(k, j), fd, 1e-4 * std::max(std::abs(fd), 1e-3)) << k << "," << j;
          EXPECT_EQ(e.mean(k, j), e.median(k, j));
        }
      }
    }
  }
}
