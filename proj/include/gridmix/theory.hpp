#pragma once

// Finite-sample diagnostics for support recovery and weight error:
// concentration radius, irrepresentable-condition margin, ridge-shifted
// minimum eigenvalues, the active-weight gap rho, and the weight and
// distribution error bounds.

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "gridmix/errors.hpp"
#include "gridmix/model_core.hpp"

namespace gridmix {

/// sqrt(2 log(2 (R-1) J / delta) / N).
inline double gammaBound(Index R, Index J, Index N, double delta) {
  detail::require(R >= 2, "gamma needs R >= 2");
  detail::require(J >= 1 && N >= 1, "gamma needs J, N >= 1");
  detail::require(delta > 0.0 && delta <= 1.0, "delta must lie in (0, 1]");
  const double arg = 2.0 * static_cast<double>(R - 1) * static_cast<double>(J) / delta;
  return std::sqrt(2.0 * std::log(arg) / static_cast<double>(N));
}

/// Everything the diagnostics need, in the reduced (R-1)-column coordinates.
struct TheoryInputs {
  /// NJ x (R-1) transformed design.
  Matrix zTilde;
  /// Active reduced columns (true support without the reference point).
  std::vector<Index> support;
  double mu = 0.0;
  double lambda = 0.0;
  /// True weights on `support`, same order.
  Vector thetaS;
  Index N = 0, J = 0, R = 0;
  double delta = 0.05;
  /// Defaults to gamma / lambda * (1 + 1e-9).
  std::optional<double> k;
};

struct TheoryReport {
  double gamma = 0.0;
  std::optional<double> neicMargin;
  double xiMinS = 0.0;
  double xiMin = 0.0;
  std::optional<double> rho;
  std::optional<double> weightBound;
  std::optional<double> distBound;
  std::optional<bool> corollaryHolds;
  double k = 0.0;
  double lambda = 0.0;
  double mu = 0.0;
  /// Reasons for any quantity left empty.
  std::vector<std::string> notes;
};

namespace detail {

inline void validateInputs(const TheoryInputs& in) {
  const Index m = in.zTilde.cols();
  require(in.R == m + 1, "zTilde must have R-1 columns");
  require(in.zTilde.rows() == in.N * in.J, "zTilde must have N*J rows");
  require(in.zTilde.allFinite(), "zTilde must be finite");
  require(in.mu >= 0.0, "mu must be nonnegative");
  require(static_cast<Index>(in.support.size()) == in.thetaS.size(),
          "one true weight per active column required");
  std::vector<Index> s = in.support;
  std::sort(s.begin(), s.end());
  require(std::adjacent_find(s.begin(), s.end()) == s.end(), "active set has duplicates");
  for (Index r : s) require(r >= 0 && r < m, "active index out of range");
  require(in.thetaS.size() == 0 || in.thetaS.minCoeff() > 0.0, "true active weights must be positive");
  require(in.thetaS.sum() <= 1.0 + 1e-10, "true active weights must sum to at most 1");
}

inline std::vector<Index> complementOf(const std::vector<Index>& s, Index m) {
  std::vector<bool> in(static_cast<std::size_t>(m), false);
  for (Index r : s) in[static_cast<std::size_t>(r)] = true;
  std::vector<Index> c;
  for (Index r = 0; r < m; ++r)
    if (!in[static_cast<std::size_t>(r)]) c.push_back(r);
  return c;
}

inline Matrix scaledGram(const Matrix& zTilde) {
  Matrix G = Matrix::Zero(zTilde.cols(), zTilde.cols());
  G.selfadjointView<Eigen::Lower>().rankUpdate(zTilde.transpose());
  G.triangularView<Eigen::StrictlyUpper>() = G.transpose();
  return G / static_cast<double>(zTilde.rows());
}

inline Matrix block(const Matrix& G, const std::vector<Index>& rows, const std::vector<Index>& cols) {
  Matrix B(static_cast<Index>(rows.size()), static_cast<Index>(cols.size()));
  for (std::size_t a = 0; a < rows.size(); ++a)
    for (std::size_t b = 0; b < cols.size(); ++b) B(static_cast<Index>(a), static_cast<Index>(b)) = G(rows[a], cols[b]);
  return B;
}

inline double smallestEigenvalue(const Matrix& A) {
  if (A.rows() == 0) return 0.0;
  Eigen::SelfAdjointEigenSolver<Matrix> es(A, Eigen::EigenvaluesOnly);
  if (es.info() != Eigen::Success) throw NumericalError("eigenvalue computation did not converge");
  return es.eigenvalues()(0);
}

/// Solves (G_SS + mu I) x = rhs, failing when the system is numerically singular.
inline Vector solveActive(const Matrix& GSS, double mu, const Vector& rhs) {
  Matrix A = GSS;
  A.diagonal().array() += mu;
  Eigen::SelfAdjointEigenSolver<Matrix> es(A);
  if (es.info() != Eigen::Success) throw NumericalError("eigenvalue computation did not converge");
  const double top = std::max(std::abs(es.eigenvalues()(A.rows() - 1)), 1e-300);
  if (es.eigenvalues()(0) <= 1e-12 * top)
    throw NumericalError("NIC undefined; FKRB selection condition fails by singularity");
  const Matrix& V = es.eigenvectors();
  return V * ((V.transpose() * rhs).array() / es.eigenvalues().array()).matrix();
}

}  // namespace detail

struct EigenPair {
  double xiMinS = 0.0;
  double xiMin = 0.0;
};

/// Smallest eigenvalues of (1/NJ) Zt_S' Zt_S + mu I and (1/NJ) Zt' Zt + mu I.
inline EigenPair minEigenvalues(const Matrix& zTilde, const std::vector<Index>& support, double mu) {
  detail::require(zTilde.allFinite(), "zTilde must be finite");
  const Matrix G = detail::scaledGram(zTilde);
  EigenPair out;
  out.xiMin = detail::smallestEigenvalue(G) + mu;
  out.xiMinS = support.empty() ? mu : detail::smallestEigenvalue(detail::block(G, support, support)) + mu;
  return out;
}

/// 1 - max over inactive r of [G_{S^C S} (G_SS + mu I)^{-1} (1 + (mu/lambda) theta*_S)]_r.
inline double neicMargin(const TheoryInputs& in) {
  detail::validateInputs(in);
  const auto comp = detail::complementOf(in.support, in.zTilde.cols());
  detail::require(!in.support.empty(), "NEIC needs a nonempty active set");
  detail::require(!comp.empty(), "NEIC needs a nonempty inactive set");
  const Matrix G = detail::scaledGram(in.zTilde);
  Vector rhs = Vector::Ones(in.thetaS.size());
  if (in.mu > 0.0) {
    detail::require(in.lambda > 0.0, "NEIC with mu > 0 needs lambda > 0");
    rhs += (in.mu / in.lambda) * in.thetaS;
  }
  const Vector v = detail::solveActive(detail::block(G, in.support, in.support), in.mu, rhs);
  return 1.0 - (detail::block(G, comp, in.support) * v).maxCoeff();
}

/// min over active i of |[(G_SS + mu I)^{-1} (G_SS theta*_S - lambda 1)]_i|.
inline double rho(const TheoryInputs& in) {
  detail::validateInputs(in);
  detail::require(!in.support.empty(), "rho needs a nonempty active set");
  const Matrix GSS = detail::block(detail::scaledGram(in.zTilde), in.support, in.support);
  const Vector rhs = GSS * in.thetaS - in.lambda * Vector::Ones(in.thetaS.size());
  return detail::solveActive(GSS, in.mu, rhs).cwiseAbs().minCoeff();
}

inline double defaultK(double gamma, double lambda) {
  detail::require(lambda > 0.0, "k defaults to gamma/lambda and needs lambda > 0");
  return gamma / lambda * (1.0 + 1e-9);
}

struct ErrorBounds {
  double weightBound = 0.0;
  double distBound = 0.0;
  bool corollaryHolds = false;
};

/// Weight and CDF error bounds given the ridge-shifted eigenvalue xiMu and the
/// unshifted xi0; requires gamma <= k lambda.
inline ErrorBounds errorBounds(const TheoryInputs& in, double xiMu, double xi0) {
  detail::validateInputs(in);
  const double gamma = gammaBound(in.R, in.J, in.N, in.delta);
  const double k = in.k.value_or(defaultK(gamma, in.lambda));
  detail::require(k > 0.0, "k must be positive");
  if (!(gamma <= k * in.lambda))
    throw ValidationError("error bound requires gamma(N, delta) <= k * lambda");
  detail::require(xiMu > 0.0, "error bound requires a positive minimum eigenvalue");
  const double kl = k * in.lambda;
  const double rm1 = static_cast<double>(in.R - 1);
  const double s = static_cast<double>(in.support.size());
  const double tmax = in.thetaS.size() ? in.thetaS.maxCoeff() : 0.0;
  ErrorBounds b;
  b.weightBound = (2.0 * std::sqrt(rm1) * kl + 2.0 * in.mu * std::sqrt(s) * tmax) / xiMu;
  b.distBound = (4.0 * rm1 * kl + 4.0 * in.mu * std::sqrt(s * rm1) * tmax) / xiMu;
  b.corollaryHolds = std::sqrt(s) * tmax * xi0 < std::sqrt(rm1) * kl;
  return b;
}

inline ErrorBounds errorBounds(const TheoryInputs& in) {
  const auto e = minEigenvalues(in.zTilde, in.support, in.mu);
  return errorBounds(in, e.xiMin, e.xiMin - in.mu);
}

/// All diagnostics; quantities that are undefined on this instance are left
/// empty with a note.
inline TheoryReport evaluateTheory(const TheoryInputs& in) {
  detail::validateInputs(in);
  TheoryReport rep;
  rep.mu = in.mu;
  rep.lambda = in.lambda;
  rep.gamma = gammaBound(in.R, in.J, in.N, in.delta);
  const auto e = minEigenvalues(in.zTilde, in.support, in.mu);
  rep.xiMin = e.xiMin;
  rep.xiMinS = e.xiMinS;
  try {
    rep.neicMargin = neicMargin(in);
  } catch (const std::exception& ex) {
    rep.notes.push_back(std::string("neicMargin: ") + ex.what());
  }
  try {
    rep.rho = rho(in);
  } catch (const std::exception& ex) {
    rep.notes.push_back(std::string("rho: ") + ex.what());
  }
  try {
    rep.k = in.k.value_or(defaultK(rep.gamma, in.lambda));
    const auto b = errorBounds(in, e.xiMin, e.xiMin - in.mu);
    rep.weightBound = b.weightBound;
    rep.distBound = b.distBound;
    rep.corollaryHolds = b.corollaryHolds;
  } catch (const std::exception& ex) {
    rep.notes.push_back(std::string("errorBounds: ") + ex.what());
  }
  rep.notes.push_back("xiMin is the unrestricted minimum eigenvalue, a conservative proxy for the restricted one");
  return rep;
}

/// Active reduced columns and their true weights from a full-length weight
/// vector, dropping the reference point.
inline std::pair<std::vector<Index>, Vector> reducedSupport(const Vector& thetaStar, Index ref) {
  std::vector<Index> s;
  std::vector<double> w;
  for (Index r = 0, c = 0; r < thetaStar.size(); ++r) {
    if (r == ref) continue;
    if (thetaStar(r) > 0.0) {
      s.push_back(c);
      w.push_back(thetaStar(r));
    }
    ++c;
  }
  return {s, Eigen::Map<const Vector>(w.data(), static_cast<Index>(w.size()))};
}

}  // namespace gridmix
