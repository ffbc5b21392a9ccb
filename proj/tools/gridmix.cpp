// gridmix command-line front end.
//
// Every option can also be given in a key-value file passed with --config;
// flags on the command line override the file. Exit codes: 0 success,
// 2 invalid input, 3 numerical failure, 4 file system error.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "gridmix/gridmix.hpp"

namespace fs = std::filesystem;
using namespace gridmix;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitNumerical = 3;
constexpr int kExitIO = 4;

std::vector<std::string> splitList(const std::string& s, char sep = ',') {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) {
    item = detail::trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

double toDouble(const std::string& s, const std::string& what) {
  double v = 0.0;
  if (!detail::parseDouble(s, v)) throw ValidationError(what + ": '" + s + "' is not a number");
  return v;
}

std::vector<Index> indexList(const std::string& s, const std::string& what) {
  std::vector<Index> out;
  for (const auto& item : splitList(s)) {
    const double v = toDouble(item, what);
    if (v < 1 || v != std::floor(v)) throw ValidationError(what + ": '" + item + "' is not a positive integer");
    out.push_back(static_cast<Index>(v));
  }
  if (out.empty()) throw ValidationError(what + " is empty");
  return out;
}

/// "lo:hi,lo:hi" per dimension.
std::vector<Interval> parseRange(const std::string& s) {
  std::vector<Interval> out;
  for (const auto& part : splitList(s)) {
    const auto colon = part.find(':');
    if (colon == std::string::npos) throw ValidationError("range: expected lo:hi, got '" + part + "'");
    out.push_back({toDouble(part.substr(0, colon), "range"), toDouble(part.substr(colon + 1), "range")});
  }
  if (out.empty()) throw ValidationError("range is empty");
  return out;
}

GridScheme parseScheme(const std::string& s) {
  if (s == "lattice") return GridScheme::UniformLattice;
  if (s == "halton") return GridScheme::Halton;
  throw ValidationError("scheme must be 'lattice' or 'halton'");
}

Estimator parseEstimator(const std::string& s) {
  for (auto e : {Estimator::FKRB, Estimator::MinMSE, Estimator::OneSE, Estimator::MaxLL, Estimator::MaxPredOut})
    if (s == toString(e)) return e;
  throw ValidationError("unknown estimator '" + s + "' (FKRB, MSE, OneSE, LL, PredOut)");
}

/// Options shared by the commands that read a choice file.
struct DataOptions {
  std::string data;
  std::string random;
  std::string fixed;
  bool outside = true;
  std::string firstStage;

  void add(CLI::App* app, bool firstStageFlag = true) {
    app->add_option("--data", data, "long-format choice CSV (unit_id, alt_id, chosen, covariates)")->required();
    app->add_option("--random", random, "comma-separated random-coefficient covariate columns")->required();
    app->add_option("--fixed", fixed, "comma-separated fixed-coefficient covariate columns");
    app->add_option("--outside", outside, "units may choose an outside option (true/false)");
    if (firstStageFlag)
      app->add_option("--first_stage", firstStage, "fixed coefficients file (name, value)");
  }

  ChoiceSchema schema() const { return {splitList(random), splitList(fixed), outside}; }
  ChoiceDataset load() const { return loadChoiceCSV(data, schema()); }

  /// Fixed coefficients in column order, read from the first-stage file.
  Vector fixedCoefficients() const {
    const auto names = splitList(fixed);
    if (names.empty()) return Vector();
    if (firstStage.empty()) throw ValidationError("fixed columns need --first_stage coefficients");
    const auto pairs = readFirstStage(firstStage);
    Vector b(static_cast<Index>(names.size()));
    for (std::size_t k = 0; k < names.size(); ++k) {
      auto it = std::find_if(pairs.begin(), pairs.end(), [&](const auto& p) { return p.first == names[k]; });
      if (it == pairs.end()) throw ValidationError(firstStage + ": no coefficient for '" + names[k] + "'");
      b(static_cast<Index>(k)) = it->second;
    }
    return b;
  }
};

struct GridOptions {
  Index gridSize = 25;
  std::string range;
  std::string scheme = "halton";

  void add(CLI::App* app) {
    app->add_option("--grid_size", gridSize, "number of grid points R");
    app->add_option("--range", range, "grid box as lo:hi per random covariate, comma separated");
    app->add_option("--scheme", scheme, "grid scheme: lattice or halton");
  }

  Grid build(Index dim) const {
    std::vector<Interval> box;
    if (range.empty()) {
      if (dim != 2) throw ValidationError("--range is required unless there are two random covariates");
      box = benchmarkBox();
    } else {
      box = parseRange(range);
    }
    if (static_cast<Index>(box.size()) != dim)
      throw ValidationError("--range has " + std::to_string(box.size()) + " intervals for " + std::to_string(dim) +
                            " random covariates");
    return buildGrid(box, gridSize, parseScheme(scheme));
  }
};

struct TuningOptions {
  std::optional<double> mu;
  std::string rule = "OneSE";
  double muMax = 100.0;
  double muRatio = 1e-4;
  Index muLength = 101;
  Index folds = 10;
  std::uint64_t seed = 1;

  void add(CLI::App* app, bool withMu = true) {
    if (withMu) {
      app->add_option("--mu", mu, "fixed ridge penalty; skips cross-validation");
      app->add_option("--rule", rule, "selection rule: FKRB, MSE, OneSE, LL or PredOut");
    }
    app->add_option("--mu_max", muMax, "largest penalty on the path");
    app->add_option("--mu_ratio", muRatio, "smallest positive penalty as a fraction of mu_max");
    app->add_option("--mu_length", muLength, "path length including the terminal 0");
    app->add_option("--folds", folds, "cross-validation folds");
    app->add_option("--seed", seed, "random seed");
  }

  MuPathConfig path() const {
    MuPathConfig p;
    p.muMax = muMax;
    p.minRatio = muRatio;
    p.length = muLength;
    return p;
  }

  CVConfig cv() const {
    CVConfig c;
    c.folds = folds;
    c.seed = seed;
    return c;
  }
};

struct Common {
  std::string out = ".";
  Index evalPoints = 10000;
  unsigned threads = 0;

  fs::path dir() const {
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw IOError(out + ": " + ec.message());
    return fs::path(out);
  }
};

/// Weight fit with the penalty either fixed or chosen by cross-validation.
struct Fit {
  Solution solution;
  double mu = 0.0;
  std::optional<CVResult> cv;
};

Fit fitWeights(const ChoiceDataset& data, const KernelMatrix& km, const TuningOptions& t) {
  Fit f;
  if (t.mu) {
    detail::require(*t.mu >= 0.0, "mu must be nonnegative");
    f.mu = *t.mu;
  } else {
    const Estimator e = parseEstimator(t.rule);
    if (e != Estimator::FKRB) {
      f.cv = crossValidate(data, km, makeMuPath(t.path()), t.cv());
      f.mu = selectMu(*f.cv, ruleOf(e));
    }
  }
  SolverConfig sc;
  sc.mu = f.mu;
  f.solution = solveSimplexRidge(km, data.y(), sc);
  return f;
}

/// Uniform draws over the grid box followed by the box maximum.
Matrix cdfEvalPoints(const Grid& grid, Index count, std::uint64_t seed) {
  std::mt19937_64 rng(deriveSeed(seed, 0, streams::kEvalPoints));
  Matrix pts(count + 1, grid.dim());
  for (Index e = 0; e < count; ++e)
    for (Index k = 0; k < grid.dim(); ++k) {
      const auto& iv = grid.range()[static_cast<std::size_t>(k)];
      pts(e, k) = iv.lo + (iv.hi - iv.lo) * openUniform(rng);
    }
  for (Index k = 0; k < grid.dim(); ++k) pts(count, k) = grid.range()[static_cast<std::size_t>(k)].hi;
  return pts;
}

void writeFit(const fs::path& dir, const Grid& grid, const Fit& f, const Common& c, std::uint64_t seed) {
  writeWeightsCSV(grid.points(), f.solution.theta.values(), dir / "weights.csv");
  const Matrix ev = cdfEvalPoints(grid, c.evalPoints, seed);
  writeCdfCSV(ev, StepCDF(grid, f.solution.theta).evaluate(ev), dir / "cdf.csv");
  if (f.cv) writeCvCSV(*f.cv, dir / "cv.csv");
}

void reportFit(const Fit& f, double threshold = 1e-3) {
  const Vector& th = f.solution.theta.values();
  std::cout << "mu " << detail::formatDouble(f.mu) << "\n"
            << "lambda " << detail::formatDouble(f.solution.lambda) << "\n"
            << "objective " << detail::formatDouble(f.solution.objective) << "\n"
            << "positive_weights " << (th.array() > threshold).count() << "\n";
}

void writeFixed(const fs::path& path, const std::vector<std::string>& names, const Vector& b) {
  detail::CsvWriter w(path);
  w.header({"name", "value"});
  for (std::size_t k = 0; k < names.size(); ++k) w.field(names[k]).field(b(static_cast<Index>(k))).endRow();
  w.close();
}

/// Applies config-file values as defaults of same-named options anywhere in the app.
void applyConfig(CLI::App& app, const std::map<std::string, std::string>& cfg) {
  for (const auto& [key, value] : cfg) {
    if (key == "config") continue;
    bool used = false;
    std::vector<CLI::App*> apps{&app};
    for (auto* sub : app.get_subcommands([](CLI::App*) { return true; })) apps.push_back(sub);
    for (auto* a : apps) {
      CLI::Option* opt = a->get_option_no_throw("--" + key);
      if (!opt) continue;
      try {
        opt->default_val(value)->required(false);
      } catch (const CLI::ParseError& e) {
        throw ValidationError("config key '" + key + "': " + e.what());
      }
      used = true;
    }
    if (!used) throw ValidationError("unknown config key '" + key + "'");
  }
}

std::optional<std::string> configPath(int argc, char** argv) {
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--config" && i + 1 < argc) return std::string(argv[i + 1]);
    if (a.rfind("--config=", 0) == 0) return a.substr(9);
  }
  return std::nullopt;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Random-coefficient logit weights on a fixed grid, with ridge-regularized fits"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string configFile;
  app.add_option("--config", configFile, "key-value file; flags override its entries");

  Common common;
  auto addCommon = [&](CLI::App* sub) {
    sub->add_option("--out", common.out, "output directory");
    sub->add_option("--eval_points", common.evalPoints, "CDF evaluation points");
    sub->add_option("--threads", common.threads, "worker threads (0 = all cores)");
  };

  DataOptions data;
  GridOptions grid;
  TuningOptions tuning;

  // estimate
  auto* estimate = app.add_subcommand("estimate", "fit grid weights on a choice file");
  data.add(estimate);
  grid.add(estimate);
  tuning.add(estimate);
  addCommon(estimate);

  // crossval
  auto* crossval = app.add_subcommand("crossval", "cross-validation table and the penalty chosen by each rule");
  data.add(crossval);
  grid.add(crossval);
  tuning.add(crossval, false);
  addCommon(crossval);

  // simulate
  std::string dgp = "discrete", units = "1000", gridSizes = "25", estimators = "FKRB,MSE,OneSE";
  Index replications = 200;
  std::string simScheme;
  auto* simulate = app.add_subcommand("simulate", "Monte Carlo experiment on a benchmark design");
  simulate->add_option("--dgp", dgp, "discrete or mixture");
  simulate->add_option("--units", units, "comma-separated sample sizes N");
  simulate->add_option("--grid_sizes", gridSizes, "comma-separated grid sizes R");
  simulate->add_option("--replications", replications, "replications M");
  simulate->add_option("--estimators", estimators, "comma-separated estimators: FKRB, MSE, OneSE, LL, PredOut");
  simulate->add_option("--scheme", simScheme, "grid scheme override: lattice or halton");
  bool datasetOnly = false;
  simulate->add_option("--dataset_only", datasetOnly,
                       "write one sample (first N and R) as data.csv plus true weights, then stop");
  tuning.add(simulate, false);
  addCommon(simulate);

  // theory
  std::string theoryDgp;
  Index theoryUnits = 1000;
  double delta = 0.05;
  std::optional<double> kOverride, lambdaOverride;
  auto* theory = app.add_subcommand("theory", "support-recovery and error-bound diagnostics");
  theory->add_option("--data", data.data, "choice CSV; the fitted weights stand in for the truth");
  theory->add_option("--random", data.random, "random-coefficient covariate columns");
  theory->add_option("--fixed", data.fixed, "fixed-coefficient covariate columns");
  theory->add_option("--outside", data.outside, "units may choose an outside option");
  theory->add_option("--first_stage", data.firstStage, "fixed coefficients file");
  theory->add_option("--dgp", theoryDgp, "simulate one discrete or mixture benchmark sample instead of --data");
  theory->add_option("--units", theoryUnits, "sample size for --dgp");
  theory->add_option("--delta", delta, "confidence level delta");
  theory->add_option("--k", kOverride, "constant k (default gamma / lambda)");
  theory->add_option("--lambda", lambdaOverride, "multiplier lambda (default from the fit)");
  grid.add(theory);
  tuning.add(theory);
  addCommon(theory);

  // twostep
  auto* twostep = app.add_subcommand("twostep", "fixed and random coefficients: EM, or weights given first-stage values");
  data.add(twostep);
  grid.add(twostep);
  tuning.add(twostep);
  addCommon(twostep);
  std::string emStart = "logit";
  Index emMaxIters = 500;
  twostep->add_option("--em_start", emStart, "EM start for fixed coefficients: logit or zeros");
  twostep->add_option("--em_max_iters", emMaxIters, "EM iteration cap");

  // elasticities
  std::string weightsFile, variable;
  auto* elastic = app.add_subcommand("elasticities", "mean and median elasticities of the fitted mixture");
  data.add(elastic);
  elastic->add_option("--weights", weightsFile, "weights.csv from estimate or twostep")->required();
  elastic->add_option("--variable", variable, "covariate whose elasticities are reported")->required();
  addCommon(elastic);

  try {
    if (auto cfg = configPath(argc, argv)) applyConfig(app, readConfig(*cfg));
    app.parse(argc, argv);

    if (estimate->parsed() || crossval->parsed()) {
      const ChoiceDataset d = data.load();
      const Grid g = grid.build(d.randomDim());
      const KernelMatrix km = evalLogitKernel(d, g, d.fixedDim() ? d.fixedOffsets(data.fixedCoefficients()) : Vector());
      const fs::path dir = common.dir();
      if (crossval->parsed()) {
        const CVResult cv = crossValidate(d, km, makeMuPath(tuning.path()), tuning.cv());
        writeCvCSV(cv, dir / "cv.csv");
        for (auto e : {Estimator::MinMSE, Estimator::OneSE, Estimator::MaxLL, Estimator::MaxPredOut})
          std::cout << toString(e) << " " << detail::formatDouble(selectMu(cv, ruleOf(e))) << "\n";
        if (cv.clampedLogs > 0) std::cout << "clamped_log_terms " << cv.clampedLogs << "\n";
      } else {
        const Fit f = fitWeights(d, km, tuning);
        writeFit(dir, g, f, common, tuning.seed);
        reportFit(f);
      }
    } else if (simulate->parsed()) {
      ExperimentSpec spec;
      if (dgp == "discrete") {
        spec.dgp = benchmarkDiscreteSpec();
      } else if (dgp == "mixture") {
        spec.dgp = MixtureDGPSpec{};
      } else {
        throw ValidationError("dgp must be 'discrete' or 'mixture'");
      }
      spec.sampleSizes = indexList(units, "units");
      spec.gridSizes = indexList(gridSizes, "grid_sizes");
      spec.replications = replications;
      spec.estimators.clear();
      for (const auto& e : splitList(estimators)) spec.estimators.push_back(parseEstimator(e));
      if (!simScheme.empty()) spec.scheme = parseScheme(simScheme);
      spec.path = tuning.path();
      spec.folds = tuning.folds;
      spec.masterSeed = tuning.seed;
      spec.evalPoints = common.evalPoints;
      spec.threads = common.threads;
      if (datasetOnly) {
        const Grid g = experimentGrid(spec, spec.gridSizes.front());
        const auto sample = std::visit(
            [&](auto dgpSpec) {
              dgpSpec.units = spec.sampleSizes.front();
              dgpSpec.seed = spec.masterSeed;
              return sampleDGP(dgpSpec, g);
            },
            spec.dgp);
        const fs::path dir = common.dir();
        writeChoiceCSV(sample.data, dir / "data.csv", {{"x1", "x2"}, {}, true});
        if (sample.truth.weights) writeWeightsCSV(g.points(), *sample.truth.weights, dir / "truth.csv");
        std::cout << "units " << sample.data.units() << "\ntrue_support " << sample.truth.supportSize() << "\n";
        return 0;
      }
      const auto res = runMonteCarlo(spec);
      writeSummaryCSV(res.summary, common.dir() / "summary.csv");
      for (const auto& r : res.summary)
        std::cout << r.units << " " << r.gridSize << " " << r.trueSupport << " " << toString(r.estimator)
                  << " RMISE " << detail::formatDouble(r.rmise) << " Pos " << detail::formatDouble(r.pos)
                  << " failures " << r.failures << "\n";
    } else if (theory->parsed()) {
      std::optional<ChoiceDataset> d;
      std::optional<Grid> g;
      Vector offsets;
      std::optional<Vector> truth;
      if (!theoryDgp.empty()) {
        if (!data.data.empty()) throw ValidationError("give either --data or --dgp, not both");
        if (theoryDgp == "discrete") {
          auto spec = benchmarkDiscreteSpec();
          spec.units = theoryUnits;
          spec.seed = tuning.seed;
          g = grid.build(2);
          auto s = sampleDGP(spec, *g);
          d = std::move(s.data);
          truth = s.truth.weights;
        } else if (theoryDgp == "mixture") {
          MixtureDGPSpec spec;
          spec.units = theoryUnits;
          spec.seed = tuning.seed;
          g = grid.build(2);
          d = sampleDGP(spec, *g).data;
        } else {
          throw ValidationError("dgp must be 'discrete' or 'mixture'");
        }
      } else {
        if (data.data.empty() || data.random.empty()) throw ValidationError("theory needs --data and --random, or --dgp");
        d = data.load();
        g = grid.build(d->randomDim());
        if (d->fixedDim()) offsets = d->fixedOffsets(data.fixedCoefficients());
      }
      const KernelMatrix km = evalLogitKernel(*d, *g, offsets);
      const Fit f = fitWeights(*d, km, tuning);
      const Vector target = truth.value_or(f.solution.theta.values());
      const Index ref = g->size() - 1;
      const auto td = transformDesign(km, d->y(), ref);
      auto [support, thetaS] = reducedSupport(target, ref);
      TheoryInputs in;
      in.zTilde = td.zTilde;
      in.support = std::move(support);
      in.thetaS = std::move(thetaS);
      in.mu = f.mu;
      in.lambda = lambdaOverride.value_or(f.solution.lambda);
      in.N = d->units();
      in.J = d->alternatives();
      in.R = g->size();
      in.delta = delta;
      in.k = kOverride;
      TheoryReport rep = evaluateTheory(in);
      if (!truth) rep.notes.push_back("true weights unknown; the fitted weights define the support");
      writeTheoryJSON(rep, common.dir() / "theory.json");
      std::cout << toJson(rep).dump(2) << "\n";
    } else if (twostep->parsed()) {
      const ChoiceDataset d = data.load();
      const Grid g = grid.build(d.randomDim());
      const fs::path dir = common.dir();
      const auto names = splitList(data.fixed);
      if (!data.firstStage.empty() || names.empty()) {
        const Vector b = data.fixedCoefficients();
        const KernelMatrix km = evalLogitKernel(d, g, d.fixedDim() ? d.fixedOffsets(b) : Vector());
        const Fit f = fitWeights(d, km, tuning);
        writeFit(dir, g, f, common, tuning.seed);
        if (!names.empty()) writeFixed(dir / "fixed.csv", names, b);
        reportFit(f);
      } else {
        EMConfig cfg;
        cfg.mu = tuning.mu;
        if (!tuning.mu) {
          const Estimator e = parseEstimator(tuning.rule);
          if (e == Estimator::FKRB) cfg.mu = 0.0;
          else cfg.rule = ruleOf(e);
        }
        cfg.path = tuning.path();
        cfg.folds = tuning.folds;
        cfg.seed = tuning.seed;
        cfg.maxIters = static_cast<int>(emMaxIters);
        if (emStart == "logit") cfg.start = EMStart::PlainLogit;
        else if (emStart == "zeros") cfg.start = EMStart::Zeros;
        else throw ValidationError("em_start must be 'logit' or 'zeros'");
        const EMResult em = runEM(d, g, cfg);
        Fit f;
        f.mu = em.mu;
        f.solution.theta = em.theta;
        writeFit(dir, g, f, common, tuning.seed);
        writeFixed(dir / "fixed.csv", names, em.betaF);
        std::cout << "mu " << detail::formatDouble(em.mu) << "\n"
                  << "iterations " << em.iterations << "\n"
                  << "log_likelihood " << detail::formatDouble(em.logLik) << "\n";
        for (std::size_t k = 0; k < names.size(); ++k)
          std::cout << names[k] << " " << detail::formatDouble(em.betaF(static_cast<Index>(k))) << "\n";
      }
    } else if (elastic->parsed()) {
      const ChoiceDataset d = data.load();
      const PointTable w = readWeightsCSV(weightsFile);
      if (w.points.cols() != d.randomDim())
        throw ValidationError(weightsFile + ": grid dimension does not match the random covariates");
      std::vector<Interval> box;
      for (Index k = 0; k < w.points.cols(); ++k) box.push_back({w.points.col(k).minCoeff(), w.points.col(k).maxCoeff()});
      const Grid g(w.points, GridScheme::Halton, box);
      const Vector b = data.fixedCoefficients();
      VariableRef var;
      const auto rnames = splitList(data.random), fnames = splitList(data.fixed);
      if (auto it = std::find(rnames.begin(), rnames.end(), variable); it != rnames.end()) {
        var = {false, static_cast<Index>(it - rnames.begin())};
      } else if (auto jt = std::find(fnames.begin(), fnames.end(), variable); jt != fnames.end()) {
        var = {true, static_cast<Index>(jt - fnames.begin())};
      } else {
        throw ValidationError("variable '" + variable + "' is not a declared covariate");
      }
      const auto e = elasticities(d, g, WeightVector(w.values), b, var);
      detail::CsvWriter out(common.dir() / "elasticities.csv");
      out.header({"statistic", "changed_alt", "affected_alt", "value"});
      for (const auto& [label, m] : {std::pair<std::string, const Matrix*>{"mean", &e.mean}, {"median", &e.median}})
        for (Index k = 0; k < m->rows(); ++k)
          for (Index j = 0; j < m->cols(); ++j) out.field(label).field(k + 1).field(j + 1).field((*m)(k, j)).endRow();
      out.close();
      std::cout << "excluded_units " << e.excludedUnits << "\n" << e.mean << "\n";
    }
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitValidation;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const IOError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIO;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumerical;
  }
  return 0;
}
