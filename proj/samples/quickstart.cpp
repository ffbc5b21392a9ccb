// Simulate the discrete benchmark once, fit the unpenalized and the
// cross-validated estimators, and compare them against the truth.

#include <cstdio>

#include "gridmix/gridmix.hpp"

using namespace gridmix;

int main() {
  const Grid grid = buildGrid(benchmarkBox(), 25, GridScheme::UniformLattice);

  DiscreteDGPSpec dgp = benchmarkDiscreteSpec();
  dgp.units = 1000;
  dgp.seed = 7;
  const SimulatedSample sample = sampleDGP(dgp, grid);
  const Vector& truth = *sample.truth.weights;

  const KernelMatrix km = evalLogitKernel(sample.data, grid);

  CVConfig cv;
  cv.seed = deriveSeed(dgp.seed, 0, streams::kFolds);
  const CVResult path = crossValidate(sample.data, km, makeMuPath(), cv);

  std::printf("%-6s %10s %8s %6s\n", "rule", "mu", "L1", "pos");
  for (auto [name, mu] : {std::pair{"FKRB", 0.0}, std::pair{"MSE", selectMu(path, SelectionRule::MinMSE)},
                          std::pair{"OneSE", selectMu(path, SelectionRule::OneSE)}}) {
    SolverConfig sc;
    sc.mu = mu;
    const Solution fit = solveSimplexRidge(km, sample.data.y(), sc);
    const auto support = supportMetrics(fit.theta.values(), sample.truth.support);
    std::printf("%-6s %10.4g %8.4f %6lld\n", name, mu, absoluteWeightError(fit.theta.values(), truth),
                static_cast<long long>(support.posCount));
  }

  // Weight-error diagnostics for the unpenalized fit.
  const Index ref = grid.size() - 1;
  const auto td = transformDesign(km, sample.data.y(), ref);
  const auto [active, thetaS] = reducedSupport(truth, ref);
  const Solution fkrb = solveSimplexRidge(km, sample.data.y(), SolverConfig{});

  TheoryInputs in;
  in.zTilde = td.zTilde;
  in.support = active;
  in.thetaS = thetaS;
  in.lambda = fkrb.lambda;
  in.N = sample.data.units();
  in.J = sample.data.alternatives();
  in.R = grid.size();
  const TheoryReport rep = evaluateTheory(in);
  std::printf("\nlambda %.3g  gamma %.3g  xi_min %.3g", rep.lambda, rep.gamma, rep.xiMin);
  if (rep.weightBound) std::printf("  weight bound %.3g", *rep.weightBound);
  std::printf("\n");
  for (const auto& note : rep.notes) std::printf("  note: %s\n", note.c_str());
}
