#pragma once

// Accuracy of estimated distributions and support recovery of weight vectors.

#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "gridmix/errors.hpp"
#include "gridmix/model_core.hpp"

namespace gridmix {

/// Mean over evaluation points of the squared CDF gap for one run.
inline double integratedSquaredError(const Vector& estimated, const Vector& truth) {
  detail::require(estimated.size() == truth.size() && truth.size() > 0,
                  "CDF value vectors must be nonempty and of equal length");
  return (estimated - truth).squaredNorm() / static_cast<double>(truth.size());
}

/// Root mean integrated squared error from CDF values tabulated at fixed points:
/// `estimated[m]` holds run m at every point, `truth` the true CDF there.
inline double rmise(std::span<const Vector> estimated, const Vector& truth) {
  detail::require(!estimated.empty(), "rmise needs at least one run");
  double acc = 0.0;
  for (const auto& run : estimated) acc += integratedSquaredError(run, truth);
  return std::sqrt(acc / static_cast<double>(estimated.size()));
}

/// Callable form: evaluates every CDF at the rows of `evalPoints`.
inline double rmise(std::span<const StepCDF> estimated,
                    const std::function<double(const Eigen::RowVectorXd&)>& trueCDF,
                    const Matrix& evalPoints) {
  detail::require(evalPoints.rows() > 0, "rmise needs at least one evaluation point");
  Vector truth(evalPoints.rows());
  for (Index e = 0; e < evalPoints.rows(); ++e) truth(e) = trueCDF(evalPoints.row(e));
  std::vector<Vector> runs;
  runs.reserve(estimated.size());
  for (const auto& cdf : estimated) runs.push_back(cdf.evaluate(evalPoints));
  return rmise(std::span<const Vector>(runs), truth);
}

/// Mean absolute weight error for one run.
inline double absoluteWeightError(const Vector& estimated, const Vector& truth) {
  detail::require(estimated.size() == truth.size() && truth.size() > 0,
                  "weight vectors must be nonempty and of equal length");
  return (estimated - truth).cwiseAbs().mean();
}

inline double l1Bias(std::span<const Vector> estimated, const Vector& truth) {
  detail::require(!estimated.empty(), "l1Bias needs at least one run");
  double acc = 0.0;
  for (const auto& w : estimated) acc += absoluteWeightError(w, truth);
  return acc / static_cast<double>(estimated.size());
}

struct SupportReport {
  Index posCount = 0;
  double truePosShare = 0.0;
  double signShare = 0.0;
  double threshold = 1e-3;
};

/// Positive-weight classification of raw estimates against a true support mask.
inline SupportReport supportMetrics(const Vector& theta, const std::vector<bool>& trueSupport,
                                    double threshold = 1e-3) {
  detail::require(static_cast<std::size_t>(theta.size()) == trueSupport.size(),
                  "support mask length must match the weight vector");
  detail::require(threshold >= 0.0, "threshold must be nonnegative");
  SupportReport rep;
  rep.threshold = threshold;
  Index truePos = 0, trueCount = 0, agree = 0;
  for (Index r = 0; r < theta.size(); ++r) {
    const bool pos = theta(r) > threshold;
    const bool truth = trueSupport[static_cast<std::size_t>(r)];
    rep.posCount += pos;
    trueCount += truth;
    truePos += pos && truth;
    agree += pos == truth;
  }
  rep.truePosShare = trueCount > 0 ? static_cast<double>(truePos) / static_cast<double>(trueCount) : 1.0;
  rep.signShare = theta.size() > 0 ? static_cast<double>(agree) / static_cast<double>(theta.size()) : 1.0;
  return rep;
}

}  // namespace gridmix
