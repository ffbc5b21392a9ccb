#pragma once

// Domain types of the fixed-grid estimator: coefficient grids, choice data,
// logit kernel matrices, the reduced (R-1)-weight design and the step CDF
// assembled from estimated grid weights.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gridmix/errors.hpp"

namespace gridmix {

using Index = Eigen::Index;
using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

enum class GridScheme { UniformLattice, Halton };

struct Interval {
  double lo = 0.0;
  double hi = 1.0;
};

/// R fixed coefficient vectors of dimension K, stored row-wise.
class Grid {
 public:
  Grid(Matrix points, GridScheme scheme, std::vector<Interval> range)
      : points_(std::move(points)), scheme_(scheme), range_(std::move(range)) {
    detail::require(points_.rows() >= 1, "grid must contain at least one point");
    detail::require(static_cast<Index>(range_.size()) == points_.cols(),
                    "grid range dimension does not match point dimension");
    for (Index r = 0; r < points_.rows(); ++r) {
      for (Index k = 0; k < points_.cols(); ++k) {
        const double v = points_(r, k);
        detail::require(std::isfinite(v), "grid point is not finite");
        detail::require(v >= range_[k].lo - 1e-12 && v <= range_[k].hi + 1e-12,
                        "grid point outside its range");
      }
    }
    for (Index r = 0; r < points_.rows(); ++r)
      for (Index s = r + 1; s < points_.rows(); ++s)
        detail::require((points_.row(r) - points_.row(s)).cwiseAbs().maxCoeff() > 0.0,
                        "grid points must be pairwise distinct");
  }

  Index size() const { return points_.rows(); }
  Index dim() const { return points_.cols(); }
  const Matrix& points() const { return points_; }
  auto point(Index r) const { return points_.row(r); }
  GridScheme scheme() const { return scheme_; }
  const std::vector<Interval>& range() const { return range_; }

 private:
  Matrix points_;
  GridScheme scheme_;
  std::vector<Interval> range_;
};

namespace detail {

inline std::vector<int> firstPrimes(Index count) {
  std::vector<int> primes;
  for (int n = 2; static_cast<Index>(primes.size()) < count; ++n) {
    bool prime = true;
    for (int p : primes) {
      if (p * p > n) break;
      if (n % p == 0) {
        prime = false;
        break;
      }
    }
    if (prime) primes.push_back(n);
  }
  return primes;
}

inline double radicalInverse(std::uint64_t index, int base) {
  double result = 0.0;
  double scale = 1.0 / base;
  while (index > 0) {
    result += static_cast<double>(index % base) * scale;
    index /= base;
    scale /= base;
  }
  return result;
}

}  // namespace detail

/// Builds a grid over the box `range`. Halton points use the first K primes
/// as bases starting at index 1; lattices include both endpoints per axis.
inline Grid buildGrid(std::span<const Interval> range, Index count, GridScheme scheme) {
  detail::require(count >= 1, "grid size R must be at least 1");
  detail::require(!range.empty(), "grid range must have at least one dimension");
  for (const auto& iv : range)
    detail::require(iv.lo < iv.hi, "grid range requires lo < hi in every dimension");
  const Index dim = static_cast<Index>(range.size());
  Matrix pts(count, dim);

  if (scheme == GridScheme::UniformLattice) {
    const auto perAxis =
        static_cast<Index>(std::llround(std::pow(static_cast<double>(count), 1.0 / dim)));
    Index total = 1;
    for (Index k = 0; k < dim; ++k) total *= perAxis;
    if (perAxis < 1 || total != count)
      throw ValidationError("UniformLattice requires R to be a perfect K-th power; got R=" +
                            std::to_string(count));
    // Row-major enumeration with the first coordinate varying slowest.
    for (Index r = 0; r < count; ++r) {
      Index rem = r;
      for (Index k = dim - 1; k >= 0; --k) {
        const Index idx = rem % perAxis;
        rem /= perAxis;
        const auto& iv = range[k];
        pts(r, k) = perAxis == 1
                        ? 0.5 * (iv.lo + iv.hi)
                        : iv.lo + (iv.hi - iv.lo) * static_cast<double>(idx) /
                                      static_cast<double>(perAxis - 1);
      }
    }
  } else {
    const auto bases = detail::firstPrimes(dim);
    for (Index r = 0; r < count; ++r) {
      for (Index k = 0; k < dim; ++k) {
        const double u = detail::radicalInverse(static_cast<std::uint64_t>(r + 1), bases[k]);
        pts(r, k) = range[k].lo + (range[k].hi - range[k].lo) * u;
      }
    }
  }
  return Grid(std::move(pts), scheme, std::vector<Interval>(range.begin(), range.end()));
}

/// N units facing J alternatives. Rows are unit-major: row(i, j) = i*J + j.
/// Covariates split into random-coefficient columns and fixed-coefficient
/// columns (the latter may be empty). A unit with no chosen alternative picked
/// the outside option, which is only allowed when `hasOutside` is set.
class ChoiceDataset {
 public:
  ChoiceDataset(std::vector<std::string> unitIds, Index alternatives, Matrix xRandom,
                Matrix xFixed, Vector y, bool hasOutside)
      : ids_(std::move(unitIds)),
        J_(alternatives),
        xRandom_(std::move(xRandom)),
        xFixed_(std::move(xFixed)),
        y_(std::move(y)),
        hasOutside_(hasOutside) {
    detail::require(J_ >= 1, "dataset needs at least one alternative");
    const Index n = static_cast<Index>(ids_.size());
    detail::require(n >= 1, "dataset needs at least one unit");
    detail::require(xRandom_.rows() == n * J_, "random covariate rows must equal N*J");
    if (xFixed_.size() == 0) xFixed_.resize(n * J_, 0);
    detail::require(xFixed_.rows() == n * J_, "fixed covariate rows must equal N*J");
    detail::require(y_.size() == n * J_, "choice vector length must equal N*J");
    detail::require(xRandom_.allFinite() && xFixed_.allFinite(), "covariates must be finite");
    choice_.assign(static_cast<std::size_t>(n), -1);
    for (Index i = 0; i < n; ++i) {
      int count = 0;
      for (Index j = 0; j < J_; ++j) {
        const double v = y_(i * J_ + j);
        detail::require(v == 0.0 || v == 1.0,
                        "unit " + ids_[static_cast<std::size_t>(i)] + ": choices must be 0/1");
        if (v == 1.0) {
          ++count;
          choice_[static_cast<std::size_t>(i)] = static_cast<int>(j);
        }
      }
      if (count > 1)
        throw ValidationError("unit " + ids_[static_cast<std::size_t>(i)] + ": multiple choices");
      if (count == 0 && !hasOutside_)
        throw ValidationError("unit " + ids_[static_cast<std::size_t>(i)] +
                              ": no alternative chosen and no outside option");
    }
  }

  Index units() const { return static_cast<Index>(ids_.size()); }
  Index alternatives() const { return J_; }
  Index rows() const { return y_.size(); }
  Index randomDim() const { return xRandom_.cols(); }
  Index fixedDim() const { return xFixed_.cols(); }
  bool hasOutside() const { return hasOutside_; }
  Index row(Index i, Index j) const { return i * J_ + j; }

  const std::vector<std::string>& unitIds() const { return ids_; }
  const Matrix& xRandom() const { return xRandom_; }
  const Matrix& xFixed() const { return xFixed_; }
  const Vector& y() const { return y_; }
  /// Chosen alternative of unit i, or -1 for the outside option.
  int choice(Index i) const { return choice_[static_cast<std::size_t>(i)]; }

  /// Utility offsets x^F beta^F per row; zero when there are no fixed columns.
  Vector fixedOffsets(const Vector& betaFixed) const {
    detail::require(betaFixed.size() == fixedDim(), "fixed coefficient dimension mismatch");
    if (fixedDim() == 0) return Vector::Zero(rows());
    return xFixed_ * betaFixed;
  }

  /// Dataset restricted to the listed units, in the given order.
  ChoiceDataset subset(std::span<const Index> units) const {
    const Index m = static_cast<Index>(units.size());
    std::vector<std::string> ids;
    ids.reserve(units.size());
    Matrix xr(m * J_, randomDim());
    Matrix xf(m * J_, fixedDim());
    Vector y(m * J_);
    for (Index u = 0; u < m; ++u) {
      const Index i = units[static_cast<std::size_t>(u)];
      ids.push_back(ids_[static_cast<std::size_t>(i)]);
      xr.middleRows(u * J_, J_) = xRandom_.middleRows(i * J_, J_);
      xf.middleRows(u * J_, J_) = xFixed_.middleRows(i * J_, J_);
      y.segment(u * J_, J_) = y_.segment(i * J_, J_);
    }
    return ChoiceDataset(std::move(ids), J_, std::move(xr), std::move(xf), std::move(y),
                         hasOutside_);
  }

 private:
  std::vector<std::string> ids_;
  Index J_;
  Matrix xRandom_;
  Matrix xFixed_;
  Vector y_;
  bool hasOutside_;
  std::vector<int> choice_;
};

/// NJ x R conditional choice probabilities z_{i,j}^r.
struct KernelMatrix {
  Matrix Z;
  Index alternatives = 1;
  bool hasOutside = true;

  Index rowIndex(Index i, Index j) const { return i * alternatives + j; }
  Index units() const { return Z.rows() / alternatives; }
  Index gridSize() const { return Z.cols(); }

  /// Outside-option probability of unit i at grid point r.
  double outside(Index i, Index r) const {
    if (!hasOutside) return 0.0;
    return std::max(0.0, 1.0 - Z.col(r).segment(i * alternatives, alternatives).sum());
  }
};

namespace detail {

/// Softmax over {outside (utility 0), alternatives} with max subtraction.
/// Writes J probabilities to `out` and returns the outside probability.
template <class Utilities, class Out>
double logitProbabilities(const Utilities& u, bool hasOutside, Out&& out) {
  double m = u.maxCoeff();
  if (hasOutside) m = std::max(m, 0.0);
  double denom = hasOutside ? std::exp(-m) : 0.0;
  for (Index j = 0; j < u.size(); ++j) {
    out(j) = std::exp(u(j) - m);
    denom += out(j);
  }
  for (Index j = 0; j < u.size(); ++j) out(j) /= denom;
  return hasOutside ? std::exp(-m) / denom : 0.0;
}

}  // namespace detail

/// Logit kernel at every grid point. `offsets` (one per row) adds the
/// fixed-coefficient part of utility; pass an empty vector when absent.
inline KernelMatrix evalLogitKernel(const ChoiceDataset& data, const Grid& grid,
                                    const Vector& offsets = Vector()) {
  detail::require(data.randomDim() == grid.dim(),
                  "grid dimension must equal the number of random-coefficient covariates");
  detail::require(grid.points().allFinite(), "grid entries must be finite");
  detail::require(offsets.size() == 0 || offsets.size() == data.rows(),
                  "utility offsets must have one entry per row");
  detail::require(offsets.size() == 0 || offsets.allFinite(), "utility offsets must be finite");
  const Index J = data.alternatives();
  const Index R = grid.size();
  KernelMatrix km{Matrix(data.rows(), R), J, data.hasOutside()};
  // Utilities for all rows and grid points at once: (NJ x K) * (K x R).
  Matrix util = data.xRandom() * grid.points().transpose();
  if (offsets.size() != 0) util.colwise() += offsets;
  for (Index r = 0; r < R; ++r) {
    for (Index i = 0; i < data.units(); ++i) {
      detail::logitProbabilities(util.col(r).segment(i * J, J), data.hasOutside(),
                                 km.Z.col(r).segment(i * J, J));
    }
  }
  return km;
}

/// Design with one weight eliminated via theta_ref = 1 - sum(others).
struct TransformedDesign {
  Vector yTilde;
  Matrix zTilde;
  Index refIndex = 0;

  /// Position of grid index r among the retained columns; -1 for the reference.
  Index column(Index r) const { return r == refIndex ? -1 : (r < refIndex ? r : r - 1); }
};

inline TransformedDesign transformDesign(const Matrix& Z, const Vector& y, Index refIndex) {
  const Index R = Z.cols();
  detail::require(R >= 2, "transformDesign needs at least two grid points");
  detail::require(refIndex >= 0 && refIndex < R, "reference index out of range");
  detail::require(y.size() == Z.rows(), "outcome length must match kernel rows");
  TransformedDesign td;
  td.refIndex = refIndex;
  td.yTilde = y - Z.col(refIndex);
  td.zTilde.resize(Z.rows(), R - 1);
  for (Index r = 0, c = 0; r < R; ++r) {
    if (r == refIndex) continue;
    td.zTilde.col(c++) = Z.col(r) - Z.col(refIndex);
  }
  return td;
}

inline TransformedDesign transformDesign(const KernelMatrix& km, const Vector& y,
                                         std::optional<Index> refIndex = std::nullopt) {
  return transformDesign(km.Z, y, refIndex.value_or(km.Z.cols() - 1));
}

/// A point on the probability simplex.
class WeightVector {
 public:
  static constexpr double kSumTolerance = 1e-10;

  explicit WeightVector(Vector theta) : theta_(std::move(theta)) {
    detail::require(theta_.size() >= 1, "weight vector must be nonempty");
    detail::require(theta_.allFinite(), "weights must be finite");
    detail::require(theta_.minCoeff() >= 0.0, "weights must be nonnegative");
    detail::require(std::abs(theta_.sum() - 1.0) <= kSumTolerance, "weights must sum to one");
  }

  static WeightVector uniform(Index R) {
    return WeightVector(Vector::Constant(R, 1.0 / static_cast<double>(R)));
  }

  Index size() const { return theta_.size(); }
  double operator[](Index r) const { return theta_(r); }
  const Vector& values() const { return theta_; }

 private:
  Vector theta_;
};

/// F(beta) = sum of weights at grid points lying componentwise below beta.
class StepCDF {
 public:
  StepCDF(Matrix points, WeightVector weights)
      : points_(std::move(points)), weights_(std::move(weights)) {
    detail::require(points_.rows() == weights_.size(), "one weight per grid point required");
  }
  StepCDF(const Grid& grid, WeightVector weights) : StepCDF(grid.points(), std::move(weights)) {}

  double operator()(const Eigen::Ref<const Eigen::RowVectorXd>& beta) const {
    detail::require(beta.size() == points_.cols(), "evaluation point dimension mismatch");
    double acc = 0.0;
    for (Index r = 0; r < points_.rows(); ++r)
      if ((points_.row(r).array() <= beta.array()).all()) acc += weights_[r];
    return std::clamp(acc, 0.0, 1.0);
  }

  /// Evaluates at each row of `beta`.
  Vector evaluate(const Matrix& beta) const {
    Vector out(beta.rows());
    for (Index e = 0; e < beta.rows(); ++e) out(e) = (*this)(beta.row(e));
    return out;
  }

  const Matrix& points() const { return points_; }
  const WeightVector& weights() const { return weights_; }

 private:
  Matrix points_;
  WeightVector weights_;
};

inline double evalCDF(const StepCDF& cdf, const Eigen::Ref<const Eigen::RowVectorXd>& beta) {
  return cdf(beta);
}

}  // namespace gridmix
