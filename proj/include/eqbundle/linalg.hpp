#pragma once

// Dense linear algebra with explicit tolerance contracts.
//
// Everything here is a pure function over Eigen dense types. Rank decisions
// always go through numeric_rank so that the cutoff actually applied can be
// reported next to the result.

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <optional>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "errors.hpp"

namespace eqb {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Complex = std::complex<double>;
using ComplexList = std::vector<Complex>;

inline constexpr double machine_eps = std::numeric_limits<double>::epsilon();

struct RankReport {
  int rank = 0;
  Vector singular_values; // descending, length min(rows, cols)
  double tolerance_used = 0.0;
};

inline void to_json(nlohmann::json& j, const RankReport& r) {
  j = nlohmann::json{{"rank", r.rank},
                     {"singular_values", std::vector<double>(r.singular_values.data(),
                                                             r.singular_values.data() +
                                                                 r.singular_values.size())},
                     {"tolerance_used", r.tolerance_used}};
}

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

inline void require_finite(const Matrix& m, const char* what) {
  if (!m.allFinite()) {
    throw InputError(std::string(what) + ": matrix has non-finite entries");
  }
}

/// Spectral default cutoff: max(rows, cols) * sigma_max * eps.
inline double default_rank_tolerance(Eigen::Index rows, Eigen::Index cols, double sigma_max) {
  return static_cast<double>(std::max(rows, cols)) * sigma_max * machine_eps;
}

namespace detail {

inline RankReport rank_from_singular_values(const Vector& sv, Eigen::Index rows,
                                            Eigen::Index cols, std::optional<double> tol) {
  RankReport report;
  report.singular_values = sv;
  const double smax = sv.size() > 0 ? sv(0) : 0.0;
  report.tolerance_used = tol ? *tol : default_rank_tolerance(rows, cols, smax);
  report.rank = static_cast<int>((sv.array() > report.tolerance_used).count());
  return report;
}

} // namespace detail

inline RankReport numeric_rank(const Matrix& m, std::optional<double> tol_override = std::nullopt) {
  require_finite(m, "numeric_rank");
  if (m.size() == 0) {
    return RankReport{0, Vector(0), tol_override.value_or(0.0)};
  }
  Eigen::JacobiSVD<Matrix> svd(m);
  return detail::rank_from_singular_values(svd.singularValues(), m.rows(), m.cols(), tol_override);
}

/// Rank with a relative floor: cutoff = max(spectral default, floor * sigma_max).
///
/// Points produced by iterative solvers sit O(residual) away from the exact
/// locus, and singular values of that order are not distinguishable from zero.
inline RankReport floored_rank(const Matrix& m, double relative_floor) {
  require_finite(m, "floored_rank");
  if (m.size() == 0) {
    return RankReport{0, Vector(0), 0.0};
  }
  Eigen::JacobiSVD<Matrix> svd(m);
  const Vector& sv = svd.singularValues();
  const double smax = sv(0);
  const double tol = std::max(default_rank_tolerance(m.rows(), m.cols(), smax), relative_floor * smax);
  return detail::rank_from_singular_values(sv, m.rows(), m.cols(), tol);
}

/// Minimizer of ||A x - b|| for full-column-rank A via column-pivoted QR.
inline Vector solve_least_squares(const Matrix& a, const Vector& b,
                                  std::optional<double> tol_override = std::nullopt) {
  require_finite(a, "solve_least_squares");
  if (!b.allFinite()) {
    throw InputError("solve_least_squares: right-hand side has non-finite entries");
  }
  if (a.rows() != b.size()) {
    throw InputError("solve_least_squares: dimension mismatch");
  }
  const RankReport rank = numeric_rank(a, tol_override);
  if (rank.rank < a.cols()) {
    throw DegeneracyError("least squares matrix is column-rank deficient (rank " +
                              std::to_string(rank.rank) + " < " + std::to_string(a.cols()) + ")",
                          nlohmann::json{{"rank_report", rank}});
  }
  return a.colPivHouseholderQr().solve(b);
}

/// All eigenvalues with multiplicity, sorted by real part then imaginary part,
/// both descending (conjugate pairs list the upper half-plane member first).
inline ComplexList eigen_dense(const Matrix& m) {
  require_finite(m, "eigen_dense");
  if (m.rows() != m.cols()) {
    throw InputError("eigen_dense: matrix must be square");
  }
  ComplexList out;
  if (m.rows() == 0) {
    return out;
  }
  Eigen::EigenSolver<Matrix> solver(m, /*computeEigenvectors=*/false);
  if (solver.info() != Eigen::Success) {
    throw EvaluationError("eigen_dense: eigenvalue iteration failed");
  }
  const auto& ev = solver.eigenvalues();
  out.assign(ev.data(), ev.data() + ev.size());
  std::sort(out.begin(), out.end(), [](const Complex& a, const Complex& b) {
    if (a.real() != b.real()) return a.real() > b.real();
    return a.imag() > b.imag();
  });
  return out;
}

/// Right singular vectors whose singular values are at or below `tol` (columns).
inline Matrix kernel_basis(const Matrix& m, double tol) {
  Eigen::JacobiSVD<Matrix> svd(m, Eigen::ComputeFullV);
  const Vector& sv = svd.singularValues();
  const auto r = static_cast<Eigen::Index>((sv.array() > tol).count());
  return svd.matrixV().rightCols(m.cols() - r);
}

/// Left singular vectors whose singular values exceed `tol` (columns).
inline Matrix image_basis(const Matrix& m, double tol) {
  Eigen::JacobiSVD<Matrix> svd(m, Eigen::ComputeFullU);
  const Vector& sv = svd.singularValues();
  const auto r = static_cast<Eigen::Index>((sv.array() > tol).count());
  return svd.matrixU().leftCols(r);
}

/// Deterministic orthonormal basis of span(columns of b).
///
/// Row-reduces the basis (pivots taken in coordinate order, pivot entries +1),
/// then orthonormalizes in that order. Two bases of the same subspace map to
/// the same output up to rounding.
inline Matrix canonical_basis(const Matrix& b) {
  Matrix rows = b.transpose();
  const Eigen::Index d = rows.rows();
  const Eigen::Index n = rows.cols();
  const double scale = std::max(1.0, rows.cwiseAbs().maxCoeff());
  Eigen::Index pivot_row = 0;
  for (Eigen::Index c = 0; c < n && pivot_row < d; ++c) {
    Eigen::Index best = pivot_row;
    for (Eigen::Index r = pivot_row + 1; r < d; ++r) {
      if (std::abs(rows(r, c)) > std::abs(rows(best, c))) best = r;
    }
    if (std::abs(rows(best, c)) <= 1e-10 * scale) continue;
    rows.row(pivot_row).swap(rows.row(best));
    rows.row(pivot_row) /= rows(pivot_row, c);
    for (Eigen::Index r = 0; r < d; ++r) {
      if (r != pivot_row) rows.row(r) -= rows(r, c) * rows.row(pivot_row);
    }
    ++pivot_row;
  }
  Matrix out = rows.topRows(pivot_row).transpose();
  for (Eigen::Index j = 0; j < out.cols(); ++j) {
    for (int pass = 0; pass < 2; ++pass) {
      for (Eigen::Index i = 0; i < j; ++i) {
        out.col(j) -= out.col(i).dot(out.col(j)) * out.col(i);
      }
    }
    out.col(j).normalize();
  }
  return out;
}

inline std::vector<double> to_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

inline Vector from_std(const std::vector<double>& v) {
  return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

} // namespace eqb
