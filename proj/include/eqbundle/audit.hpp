#pragma once

// Pointwise verification of the standing hypotheses on a system:
//   - the second-order first-integral identity (df/dx)^T grad h_l + D^2 h_l f = 0,
//   - non-degeneracy i)   rank df/dlambda = min(m, n - k),
//   - non-degeneracy ii)  rank df/dx = n - k on E,
//   - non-degeneracy iii) ker df/dx (+) im df/dx = R^n on E,
//   - rank [df/dlambda, df/dx] = n - k on E (so E has dimension m + k).

#include <algorithm>
#include <limits>
#include <string>
#include <vector>

#include "linalg.hpp"
#include "system.hpp"
#include "tolerances.hpp"

namespace eqb {

inline double equilibrium_threshold(const Vector& x, const Tolerances& tols) {
  return tols.equilibrium * (1.0 + x.norm());
}

struct RankCondition {
  bool pass = false;
  bool asserted = false; // false: informational only (not at an equilibrium)
  int measured = 0;
  int expected = 0;
  RankReport rank;
};

struct DirectSumCondition {
  bool pass = false;
  bool asserted = false;
  int intersection_dimension = 0; // dim(ker  ∩ im)
  double min_singular_value = 0.0; // of [ker basis | im basis]
};

struct AuditReport {
  PointState point;
  bool in_domain = true;
  bool in_parameter_box = true;
  bool is_equilibrium = false;
  double f_residual = 0.0;
  double equilibrium_threshold = 0.0;
  RankCondition cond_i;
  RankCondition cond_ii;
  DirectSumCondition cond_iii;
  double prop21_residual = 0.0;
  int full_jacobian_rank = 0;
  RankReport full_jacobian;
  Tolerances tolerances;
  std::vector<std::string> warnings;

  /// At an equilibrium, condition ii) or iii) fails. Condition i) only warns.
  bool degenerate() const {
    return is_equilibrium && ((cond_ii.asserted && !cond_ii.pass) || (cond_iii.asserted && !cond_iii.pass));
  }
};

inline void to_json(nlohmann::json& j, const RankCondition& c) {
  j = {{"pass", c.pass}, {"asserted", c.asserted}, {"measured_rank", c.measured},
       {"expected_rank", c.expected}, {"rank_report", c.rank}};
}

inline void to_json(nlohmann::json& j, const DirectSumCondition& c) {
  j = {{"pass", c.pass}, {"asserted", c.asserted}, {"intersection_dimension", c.intersection_dimension},
       {"min_singular_value", c.min_singular_value}};
}

inline void to_json(nlohmann::json& j, const AuditReport& r) {
  j = {{"point", {{"lambda", to_std(r.point.lambda)}, {"x", to_std(r.point.x)}}},
       {"in_domain", r.in_domain},
       {"in_parameter_box", r.in_parameter_box},
       {"is_equilibrium", r.is_equilibrium},
       {"f_residual", r.f_residual},
       {"equilibrium_threshold", r.equilibrium_threshold},
       {"cond_i", r.cond_i},
       {"cond_ii", r.cond_ii},
       {"cond_iii", r.cond_iii},
       {"prop21_residual", r.prop21_residual},
       {"full_jacobian_rank", r.full_jacobian_rank},
       {"full_jacobian", r.full_jacobian},
       {"tolerances", r.tolerances},
       {"warnings", r.warnings},
       {"degenerate", r.degenerate()}};
}

/// max_l || (df/dx)^T grad h_l + D^2 h_l f ||, from an existing evaluation.
inline double prop21_residual(const Evaluation& ev) {
  double worst = 0.0;
  for (Eigen::Index l = 0; l < ev.jac_h.rows(); ++l) {
    const Vector r = ev.jac_x.transpose() * ev.jac_h.row(l).transpose() +
                     ev.hess_h[static_cast<std::size_t>(l)] * ev.f_value;
    worst = std::max(worst, r.norm());
  }
  return worst;
}

/// Evaluation for auditing: only the evaluators' own domain matters, so the
/// domain and parameter-box membership is not enforced.
inline Evaluation evaluate_anywhere(const SystemSpec& sys, const PointState& u) {
  return evaluate(sys, u, std::numeric_limits<double>::infinity());
}

/// The identity holds at every point where f and h are defined, not only on E.
inline double check_prop21(const SystemSpec& sys, const PointState& u) {
  return prop21_residual(evaluate_anywhere(sys, u));
}

/// Direct-sum test for ker(a) and im(a), given the rank cutoff already chosen.
inline DirectSumCondition kernel_image_transversality(const Matrix& a, double rank_tol,
                                                      double transversality_tol) {
  const Matrix ker = kernel_basis(a, rank_tol);
  const Matrix im = image_basis(a, rank_tol);
  Matrix both(a.rows(), ker.cols() + im.cols());
  both << ker, im;
  DirectSumCondition out;
  const RankReport r = numeric_rank(both, transversality_tol);
  out.intersection_dimension = static_cast<int>(both.cols()) - r.rank;
  out.min_singular_value = r.singular_values.size() > 0 ? r.singular_values.minCoeff() : 0.0;
  out.pass = out.intersection_dimension == 0 && both.cols() == a.rows();
  return out;
}

inline AuditReport audit_point(const SystemSpec& sys, const PointState& u, const Tolerances& tols = {}) {
  const Evaluation ev = evaluate_anywhere(sys, u);
  AuditReport rep;
  rep.point = u;
  rep.tolerances = tols;
  rep.in_domain = sys.domain.contains(u.x, tols.slack);
  rep.in_parameter_box = sys.parameters.contains(u.lambda);
  if (!rep.in_domain) rep.warnings.push_back("x lies outside the domain V");
  if (!rep.in_parameter_box) rep.warnings.push_back("lambda lies outside the parameter box");
  rep.f_residual = ev.f_value.norm();
  rep.equilibrium_threshold = equilibrium_threshold(u.x, tols);
  rep.is_equilibrium = rep.f_residual <= rep.equilibrium_threshold;

  const int n = sys.n, m = sys.m, k = sys.k;

  rep.cond_i.rank = floored_rank(ev.jac_lambda, tols.rank_floor);
  rep.cond_i.measured = rep.cond_i.rank.rank;
  rep.cond_i.expected = std::min(m, n - k);
  rep.cond_i.pass = rep.cond_i.measured == rep.cond_i.expected;
  rep.cond_i.asserted = true;
  if (!rep.cond_i.pass) {
    rep.warnings.push_back("condition i: rank df/dlambda = " + std::to_string(rep.cond_i.measured) +
                           ", expected " + std::to_string(rep.cond_i.expected));
  }

  rep.cond_ii.rank = floored_rank(ev.jac_x, tols.rank_floor);
  rep.cond_ii.measured = rep.cond_ii.rank.rank;
  rep.cond_ii.expected = n - k;
  rep.cond_ii.asserted = rep.is_equilibrium;
  rep.cond_ii.pass = rep.is_equilibrium ? rep.cond_ii.measured == n - k : rep.cond_ii.measured >= n - k;

  rep.cond_iii = kernel_image_transversality(ev.jac_x, rep.cond_ii.rank.tolerance_used, tols.transversality);
  rep.cond_iii.asserted = rep.is_equilibrium;

  rep.prop21_residual = prop21_residual(ev);

  Matrix full(n, m + n);
  full << ev.jac_lambda, ev.jac_x;
  rep.full_jacobian = floored_rank(full, tols.rank_floor);
  rep.full_jacobian_rank = rep.full_jacobian.rank;

  if (rep.is_equilibrium && !rep.cond_ii.pass) {
    rep.warnings.push_back("condition ii: rank df/dx = " + std::to_string(rep.cond_ii.measured) +
                           ", expected " + std::to_string(n - k));
  }
  if (rep.is_equilibrium && !rep.cond_iii.pass) {
    rep.warnings.push_back("condition iii: ker df/dx and im df/dx intersect in dimension " +
                           std::to_string(rep.cond_iii.intersection_dimension));
  }
  return rep;
}

struct DimensionVerdict {
  int full_jacobian_rank = 0;
  int expected_rank = 0; // n - k
  int tangent_dimension = 0; // m + n - rank
  bool pass = false;
};

inline void to_json(nlohmann::json& j, const DimensionVerdict& v) {
  j = {{"full_jacobian_rank", v.full_jacobian_rank}, {"expected_rank", v.expected_rank},
       {"tangent_dimension", v.tangent_dimension}, {"pass", v.pass}};
}

/// rank [df/dlambda, df/dx] = n - k at each equilibrium, i.e. dim ker = m + k.
inline std::vector<DimensionVerdict> audit_manifold_dimension(const SystemSpec& sys,
                                                              const std::vector<PointState>& equilibria,
                                                              const Tolerances& tols = {}) {
  std::vector<DimensionVerdict> out;
  out.reserve(equilibria.size());
  for (const auto& u : equilibria) {
    const Evaluation ev = evaluate_anywhere(sys, u);
    const double res = ev.f_value.norm();
    if (res > equilibrium_threshold(u.x, tols)) {
      throw InputError("audit_manifold_dimension: not an equilibrium, ||f|| = " + std::to_string(res) +
                       " at " + detail::coords(u));
    }
    Matrix full(sys.n, sys.m + sys.n);
    full << ev.jac_lambda, ev.jac_x;
    DimensionVerdict v;
    v.full_jacobian_rank = floored_rank(full, tols.rank_floor).rank;
    v.expected_rank = sys.n - sys.k;
    v.tangent_dimension = sys.m + sys.n - v.full_jacobian_rank;
    v.pass = v.full_jacobian_rank == v.expected_rank;
    out.push_back(v);
  }
  return out;
}

} // namespace eqb
