#include <gtest/gtest.h>

#include <random>

#include "gridmix/simulate.hpp"
#include "test_support.hpp"

using namespace gridmix;

TEST(DrawCovariates, RangeDeterminismAndMean) {
  const Matrix a = drawCovariates(250000, 4, 17);
  EXPECT_GE(a.col(0).minCoeff(), 0.0);
  EXPECT_LE(a.col(0).maxCoeff(), 5.0);
  EXPECT_GE(a.col(1).minCoeff(), -3.0);
  EXPECT_LE(a.col(1).maxCoeff(), 1.0);
  // 3 sigma / sqrt(n) with sigma = 5 / sqrt(12) and n = 1e6.
  EXPECT_NEAR(a.col(0).mean(), 2.5, 3.0 * 5.0 / std::sqrt(12.0) / 1000.0);
  const Matrix b = drawCovariates(1000, 4, 17);
  EXPECT_EQ(a.topRows(4000), b);
}

TEST(SimulateChoices, SymmetricRace) {
  const Index N = 100000;
  const Vector y = simulateChoices(Matrix::Zero(N, 1), 1, Matrix::Zero(N, 1), 3);
  EXPECT_NEAR(y.mean(), 0.5, 0.005);
}

TEST(SimulateChoices, DominantAlternative) {
  const Index N = 100000;
  Matrix x = Matrix::Zero(N * 2, 1);
  for (Index i = 0; i < N; ++i) x(i * 2, 0) = 50.0;
  const Vector y = simulateChoices(x, 2, Matrix::Ones(N, 1), 4);
  for (Index i = 0; i < N; ++i) ASSERT_EQ(y(i * 2), 1.0);
}

TEST(SimulateChoices, SharesMatchLogitKernel) {
  const Index N = 100000, J = 3;
  Matrix x(N * J, 2);
  for (Index i = 0; i < N; ++i) {
    x.row(i * J) << 1.0, -0.5;
    x.row(i * J + 1) << 0.2, 0.4;
    x.row(i * J + 2) << -0.3, 0.0;
  }
  const Eigen::RowVector2d beta(0.8, -1.2);
  const Vector y = simulateChoices(x, J, beta.replicate(N, 1), 5);
  const ChoiceDataset data(sequentialIds(N), J, x, Matrix(), y, true);
  const Grid g(beta, GridScheme::Halton, {{-2, 2}, {-2, 2}});
  const KernelMatrix km = evalLogitKernel(data, g);
  for (Index j = 0; j < J; ++j) {
    double share = 0.0;
    for (Index i = 0; i < N; ++i) share += y(i * J + j);
    EXPECT_NEAR(share / N, km.Z(j, 0), 0.01);
  }
}

TEST(BivariateNormal, IndependentAndLimits) {
  EXPECT_NEAR(bivariateNormalCDF(0.3, -0.7, 0.0), normalCDF(0.3) * normalCDF(-0.7), 1e-15);
  EXPECT_NEAR(bivariateNormalCDF(0.0, 0.0, 0.5), 0.25 + std::asin(0.5) / (2 * std::numbers::pi), 1e-14);
  EXPECT_NEAR(bivariateNormalCDF(1e300, 1e300, 0.2), 1.0, 1e-15);
  EXPECT_NEAR(bivariateNormalCDF(-50, 1.0, 0.2), 0.0, 1e-15);
  EXPECT_NEAR(bivariateNormalCDF(100, 0.4, 0.3), normalCDF(0.4), 1e-14);
  EXPECT_NEAR(bivariateNormalCDF(0.2, 1.1, 0.1875), bivariateNormalCDF(1.1, 0.2, 0.1875), 1e-15);
  EXPECT_THROW(bivariateNormalCDF(0, 0, 1.0), ValidationError);
}

TEST(BivariateNormal, AgreesWithMonteCarlo) {
  std::mt19937_64 rng(99);
  std::normal_distribution<double> nd(0, 1);
  const double r = 0.1875;
  const int n = 1000000;
  const double pts[][2] = {{-1.0, 0.5}, {0.3, 0.3}, {1.5, -2.0}};
  int hits[3] = {0, 0, 0};
  for (int s = 0; s < n; ++s) {
    const double a = nd(rng);
    const double b = r * a + std::sqrt(1 - r * r) * nd(rng);
    for (int k = 0; k < 3; ++k) hits[k] += (a <= pts[k][0] && b <= pts[k][1]);
  }
  for (int k = 0; k < 3; ++k)
    EXPECT_NEAR(bivariateNormalCDF(pts[k][0], pts[k][1], r), static_cast<double>(hits[k]) / n, 2.5e-3);
}

TEST(MixtureDGP, CdfTails) {
  const MixtureDGPSpec spec;
  EXPECT_NEAR(mixtureCDF(spec, Eigen::RowVector2d(1e300, 1e300)), 1.0, 1e-14);
  EXPECT_LE(mixtureCDF(spec, Eigen::RowVector2d(-14.5, -14.5)), 0.007);
}

TEST(MixtureDGP, SampleAndSupport) {
  const Grid g = buildGrid(benchmarkBox(), 50, GridScheme::Halton);
  MixtureDGPSpec spec;
  spec.units = 20000;
  spec.seed = 3;
  const auto s = sampleDGP(spec, g);
  EXPECT_EQ(s.data.units(), 20000);
  EXPECT_EQ(s.data.alternatives(), 4);
  EXPECT_FALSE(s.truth.weights.has_value());
  EXPECT_EQ(s.truth.supportSize(), 34);
  EXPECT_NEAR(s.betas.col(0).mean(), 0.5 * (-2.2 + 1.3), 0.05);
  // Within-component covariance: pooled covariance minus the between-component part.
  const double between = 0.25 * 3.5 * 3.5;
  const Eigen::RowVector2d m = s.betas.colwise().mean();
  const Matrix c = s.betas.rowwise() - m;
  const Matrix cov = c.transpose() * c / static_cast<double>(s.betas.rows());
  EXPECT_NEAR(cov(0, 0) - between, 0.8, 0.06);
  EXPECT_NEAR(cov(0, 1) - between, 0.15, 0.06);
}

TEST(DiscreteDGP, SupportCountsOnLattice) {
  const auto spec = benchmarkDiscreteSpec();
  const Index expected[][2] = {{25, 17}, {81, 49}, {289, 161}};
  for (const auto& e : expected) {
    const Grid g = buildGrid(benchmarkBox(), e[0], GridScheme::UniformLattice);
    const auto mask = discreteSupport(spec, g);
    EXPECT_EQ(std::count(mask.begin(), mask.end(), true), e[1]) << "R = " << e[0];
  }
}

TEST(DiscreteDGP, TruthLivesOnGrid) {
  const Grid g = buildGrid(benchmarkBox(), 25, GridScheme::UniformLattice);
  auto spec = benchmarkDiscreteSpec();
  spec.units = 500;
  const auto s = sampleDGP(spec, g);
  ASSERT_TRUE(s.truth.weights.has_value());
  EXPECT_NEAR(s.truth.weights->sum(), 1.0, 1e-14);
  for (Index i = 0; i < 500; ++i) {
    bool found = false;
    for (Index r = 0; r < g.size(); ++r)
      if ((g.point(r) - s.betas.row(i)).cwiseAbs().maxCoeff() == 0.0) found = (*s.truth.weights)(r) > 0;
    ASSERT_TRUE(found);
  }
  EXPECT_NEAR(s.truth.cdf(Eigen::RowVector2d(3.5, 3.5)), 1.0, 1e-14);

  DiscreteDGPSpec empty;
  empty.regions = {Box{{{10, 11}, {10, 11}}}};
  EXPECT_THROW(sampleDGP(empty, g), ValidationError);
}

TEST(CorrelationQ3, MatchesDirectComputationAndPermutation) {
  std::mt19937_64 rng(21);
  const auto inst = oracle::randomInstance(rng, 60, 7);
  std::vector<double> vals;
  for (Index a = 0; a < 7; ++a)
    for (Index b = a + 1; b < 7; ++b) {
      const Vector x = inst.Z.col(a).array() - inst.Z.col(a).mean();
      const Vector y = inst.Z.col(b).array() - inst.Z.col(b).mean();
      vals.push_back(std::abs(x.dot(y) / std::sqrt(x.squaredNorm() * y.squaredNorm())));
    }
  const double direct = oracle::quantile7(vals, 0.75);
  EXPECT_NEAR(correlationQ3(inst.Z), direct, 1e-12);
  Matrix perm = inst.Z;
  perm.col(0).swap(perm.col(5));
  perm.col(2).swap(perm.col(6));
  EXPECT_NEAR(correlationQ3(perm), direct, 1e-12);
}

TEST(DeriveSeed, DistinctStreams) {
  EXPECT_NE(deriveSeed(1, 1), deriveSeed(1, 2));
  EXPECT_NE(deriveSeed(1, 1, 0), deriveSeed(1, 1, 1));
  EXPECT_EQ(deriveSeed(7, 3, 2), deriveSeed(7, 3, 2));
}

namespace {

ExperimentSpec smallExperiment() {
  ExperimentSpec spec;
  spec.sampleSizes = {300};
  spec.gridSizes = {25};
  spec.replications = 3;
  spec.folds = 5;
  spec.path.length = 11;
  spec.evalPoints = 400;
  spec.masterSeed = 77;
  return spec;
}

}  // namespace

TEST(RunMonteCarlo, DeterministicAcrossThreadCounts) {
  auto spec = smallExperiment();
  spec.threads = 1;
  const auto a = runMonteCarlo(spec);
  spec.threads = 3;
  const auto b = runMonteCarlo(spec);
  ASSERT_EQ(a.summary.size(), 3u);
  for (std::size_t k = 0; k < a.summary.size(); ++k) {
    EXPECT_EQ(a.summary[k].rmise, b.summary[k].rmise);
    EXPECT_EQ(a.summary[k].l1, b.summary[k].l1);
    EXPECT_EQ(a.summary[k].mu, b.summary[k].mu);
    EXPECT_EQ(a.summary[k].rhoQ3, b.summary[k].rhoQ3);
    EXPECT_EQ(a.summary[k].trueSupport, 17);
    EXPECT_EQ(a.summary[k].failures, 0);
  }
}

TEST(RunMonteCarlo, ZeroPathCollapsesToFKRB) {
  auto spec = smallExperiment();
  spec.replications = 1;
  spec.explicitPath = std::vector<double>{0.0};
  spec.estimators = {Estimator::FKRB, Estimator::MinMSE, Estimator::OneSE};
  const auto r = runMonteCarlo(spec);
  for (std::size_t k = 1; k < 3; ++k) {
    EXPECT_EQ(r.summary[k].rmise, r.summary[0].rmise);
    EXPECT_EQ(r.summary[k].pos, r.summary[0].pos);
    EXPECT_EQ(r.summary[k].mu, 0.0);
  }
}

TEST(RunMonteCarlo, SolverFailuresAreCounted) {
  auto spec = smallExperiment();
  spec.estimators = {Estimator::FKRB};
  spec.solver.maxIters = 1;
  const auto r = runMonteCarlo(spec);
  EXPECT_EQ(r.summary[0].failures, 3);
  EXPECT_TRUE(std::isnan(r.summary[0].rmise));
}
