#pragma once

// The natural connection on the equilibrium bundle pi: E -> Lambda.
//
// At u = (lambda, x) in E the tangent space T_uE = ker [df/dlambda, df/dx]
// splits as V_u (+) H_u with
//   V_u = {(0, b) : (df/dx) b = 0}                                  (dim k)
//   H_u = {(a, b) : (df/dlambda) a + (df/dx) b = 0, (dh/dx) b = 0}  (dim m)
// Parallel transport integrates the lifting ODE
//   [df/dx; dh/dx] gamma' = [-(df/dlambda) lambda'; 0]
// whose solutions stay on E and on the first-integral level of the start.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "audit.hpp"
#include "finder.hpp"
#include "linalg.hpp"
#include "system.hpp"
#include "tolerances.hpp"

namespace eqb {

struct ConnectionFrame {
  PointState at;
  Matrix vertical_basis;   // (m + n) x k, orthonormal
  Matrix horizontal_basis; // (m + n) x m, orthonormal
  Matrix tangent_map;      // J = [df/dlambda, df/dx]

  /// Phi: the projector onto V_u along H_u, defined on T_uE.
  Vector vertical_part(const Vector& v) const {
    Matrix both(vertical_basis.rows(), vertical_basis.cols() + horizontal_basis.cols());
    both << vertical_basis, horizontal_basis;
    const Vector c = solve_least_squares(both, v);
    return vertical_basis * c.head(vertical_basis.cols());
  }

  /// pi_* : first m coordinates.
  Vector base_part(const Vector& v) const { return v.head(at.lambda.size()); }

  double tangency_residual(const Vector& v) const { return (tangent_map * v).norm(); }
};

inline void to_json(nlohmann::json& j, const ConnectionFrame& f) {
  auto cols = [](const Matrix& m) {
    nlohmann::json out = nlohmann::json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) out.push_back(to_std(m.col(c)));
    return out;
  };
  j = {{"lambda", to_std(f.at.lambda)},
       {"x", to_std(f.at.x)},
       {"vertical_basis", cols(f.vertical_basis)},
       {"horizontal_basis", cols(f.horizontal_basis)}};
}

/// Vertical and horizontal bases at an equilibrium passing conditions ii and iii.
inline ConnectionFrame connection_frame(const SystemSpec& sys, const PointState& u, const Tolerances& tols = {}) {
  const AuditReport audit = audit_point(sys, u, tols);
  if (!audit.is_equilibrium) {
    throw InputError("connection_frame: not an equilibrium (||f|| = " + std::to_string(audit.f_residual) + ")",
                     nlohmann::json{{"audit", audit}});
  }
  if (!audit.cond_ii.pass || !audit.cond_iii.pass) {
    throw DegeneracyError("connection_frame: non-degeneracy conditions fail at " + detail::coords(u),
                          nlohmann::json{{"audit", audit}});
  }
  const int n = sys.n, m = sys.m, k = sys.k;
  const Evaluation ev = evaluate_anywhere(sys, u);

  ConnectionFrame frame;
  frame.at = u;
  frame.tangent_map.resize(n, m + n);
  frame.tangent_map << ev.jac_lambda, ev.jac_x;

  const Matrix ker = kernel_basis(ev.jac_x, audit.cond_ii.rank.tolerance_used);
  frame.vertical_basis = Matrix::Zero(m + n, k);
  frame.vertical_basis.bottomRows(n) = canonical_basis(ker);

  Matrix lifted = Matrix::Zero(n + k, m + n);
  lifted.topRows(n) = frame.tangent_map;
  lifted.bottomRightCorner(k, n) = ev.jac_h;
  const RankReport r = floored_rank(lifted, tols.rank_floor);
  if (m + n - r.rank != m) {
    throw DegeneracyError("connection_frame: horizontal space has dimension " + std::to_string(m + n - r.rank) +
                              ", expected " + std::to_string(m) + " at " + detail::coords(u),
                          nlohmann::json{{"audit", audit}, {"rank_report", r}});
  }
  frame.horizontal_basis = canonical_basis(kernel_basis(lifted, r.tolerance_used));
  return frame;
}

/// g(X, Y) = <Phi X, Phi Y> + <pi_*(I - Phi) X, pi_*(I - Phi) Y>.
/// Phi X has no base component, so pi_*(I - Phi) X = pi_* X.
inline double metric_g(const ConnectionFrame& frame, const Vector& X, const Vector& Y,
                       const Tolerances& tols = {}) {
  const Eigen::Index dim = frame.vertical_basis.rows();
  if (X.size() != dim || Y.size() != dim) throw InputError("metric_g: vectors must have m + n components");
  for (const Vector* v : {&X, &Y}) {
    const double res = frame.tangency_residual(*v);
    if (res > tols.transport * std::max(1.0, v->norm())) {
      throw InputError("metric_g: vector is not tangent to E (|J v| = " + std::to_string(res) + ")",
                       nlohmann::json{{"tangency_residual", res}});
    }
  }
  return frame.vertical_part(X).dot(frame.vertical_part(Y)) + frame.base_part(X).dot(frame.base_part(Y));
}

inline double metric_g(const SystemSpec& sys, const PointState& u, const Vector& X, const Vector& Y,
                       const Tolerances& tols = {}) {
  return metric_g(connection_frame(sys, u, tols), X, Y, tols);
}

// ---------------------------------------------------------------------------
// Parameter paths and curve lifting
// ---------------------------------------------------------------------------

/// Piecewise-linear curve through waypoints; segment i covers t in [i, i + 1].
struct ParamPath {
  std::vector<Vector> waypoints;

  int segments() const { return static_cast<int>(waypoints.size()) - 1; }

  Vector at(double t) const {
    const int i = std::clamp(static_cast<int>(std::floor(t)), 0, segments() - 1);
    const double s = t - i;
    return (1.0 - s) * waypoints[static_cast<std::size_t>(i)] + s * waypoints[static_cast<std::size_t>(i) + 1];
  }

  bool closed() const { return waypoints.size() >= 2 && waypoints.front() == waypoints.back(); }

  static ParamPath segment(const Vector& a, const Vector& b) { return ParamPath{{a, b}}; }
};

struct TransportOptions {
  double initial_step = 0.05; // in path parameter units
  double max_step = 0.25;
  double min_step = 1e-9;
  NewtonOptions newton;
};

struct TransportResult {
  std::vector<double> t;
  std::vector<Vector> lambda_path;
  std::vector<Vector> gamma;
  double max_f_residual = 0.0;
  double max_h_drift = 0.0;
  double max_vertical_velocity = 0.0; // max |Phi (lambda', gamma')| at accepted points
  int steps_taken = 0;
  int steps_rejected = 0;

  const Vector& endpoint() const { return gamma.back(); }
};

inline void to_json(nlohmann::json& j, const TransportResult& r) {
  nlohmann::json samples = nlohmann::json::array();
  for (std::size_t i = 0; i < r.t.size(); ++i) {
    samples.push_back({{"t", r.t[i]}, {"lambda", to_std(r.lambda_path[i])}, {"x", to_std(r.gamma[i])}});
  }
  j = {{"endpoint", to_std(r.endpoint())},
       {"max_f_residual", r.max_f_residual},
       {"max_h_drift", r.max_h_drift},
       {"max_vertical_velocity", r.max_vertical_velocity},
       {"steps_taken", r.steps_taken},
       {"steps_rejected", r.steps_rejected},
       {"samples", samples}};
}

namespace detail {

/// gamma' from the lifting system, least squares on the (n + k) x n stack.
inline Vector lift_velocity(const SystemSpec& sys, const Vector& lambda, const Vector& dlambda, const Vector& x,
                            double t) {
  const Evaluation ev = evaluate(sys, PointState{lambda, x}, std::numeric_limits<double>::infinity(), false);
  Matrix a(sys.n + sys.k, sys.n);
  a << ev.jac_x, ev.jac_h;
  Vector b = Vector::Zero(sys.n + sys.k);
  b.head(sys.n) = -ev.jac_lambda * dlambda;
  try {
    return solve_least_squares(a, b);
  } catch (const DegeneracyError& e) {
    throw DegeneracyError("lift_curve: [df/dx; dh/dx] loses full column rank at t = " + std::to_string(t),
                          nlohmann::json{{"t", t}, {"lambda", to_std(lambda)}, {"x", to_std(x)},
                                         {"rank_report", e.details().value("rank_report", nlohmann::json())}});
  }
}

} // namespace detail

/// Horizontal lift of `path` through x0 in E_{lambda(0)}.
///
/// Classical RK4 on each linear piece, each step followed by a Newton
/// projection onto {f(lambda(t), .) = 0, h = h(x0)}. A step whose projection
/// needs more than 3 iterations is rejected and halved; 1 or fewer doubles the
/// next step.
inline TransportResult lift_curve(const SystemSpec& sys, const ParamPath& path, const Vector& x0,
                                  const TransportOptions& opts = {}) {
  if (path.segments() < 1) throw InputError("lift_curve: a path needs at least two waypoints");
  for (const Vector& w : path.waypoints) {
    if (w.size() != sys.m) throw InputError("lift_curve: waypoint dimension does not match m");
    if (!sys.parameters.contains(w)) throw DomainError("lift_curve: waypoint outside the parameter box");
  }
  if (x0.size() != sys.n) throw InputError("lift_curve: x0 dimension does not match n");
  const Tolerances& tols = opts.newton.tols;
  const PointState start{path.waypoints.front(), x0};
  const Evaluation ev0 = evaluate(sys, start, tols.slack, false);
  if (ev0.f_value.norm() > equilibrium_threshold(x0, tols)) {
    throw InputError("lift_curve: x0 is not an equilibrium at lambda(0) (||f|| = " +
                     std::to_string(ev0.f_value.norm()) + ")");
  }
  const Vector level = ev0.h_value;

  TransportResult out;
  auto record = [&](double t, const Vector& lambda, const Vector& x) {
    out.t.push_back(t);
    out.lambda_path.push_back(lambda);
    out.gamma.push_back(x);
    out.max_f_residual = std::max(out.max_f_residual, sys.f(lambda, x).norm());
    out.max_h_drift = std::max(out.max_h_drift, (sys.h(x) - level).norm());
  };
  record(0.0, path.waypoints.front(), x0);

  Vector x = x0;
  for (int seg = 0; seg < path.segments(); ++seg) {
    const Vector& la = path.waypoints[static_cast<std::size_t>(seg)];
    const Vector& lb = path.waypoints[static_cast<std::size_t>(seg) + 1];
    const Vector dl = lb - la;
    if (dl.norm() == 0.0) continue; // b = 0: the lift stands still
    auto lam = [&](double s) { return Vector((1.0 - s) * la + s * lb); };
    auto vel = [&](double s, const Vector& y) { return detail::lift_velocity(sys, lam(s), dl, y, seg + s); };

    double s = 0.0, h = opts.initial_step;
    while (s < 1.0) {
      const double step = std::min(h, 1.0 - s);
      const Vector k1 = vel(s, x);
      const Vector k2 = vel(s + 0.5 * step, x + 0.5 * step * k1);
      const Vector k3 = vel(s + 0.5 * step, x + 0.5 * step * k2);
      const Vector k4 = vel(s + step, x + step * k3);
      const Vector predicted = x + step / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
      const double s_next = step == 1.0 - s ? 1.0 : s + step;

      std::optional<NewtonSolve> proj;
      try {
        proj = newton_solve(sys, lam(s_next), level, predicted, opts.newton);
      } catch (const ConvergenceError&) {
        proj.reset();
      }
      if (!proj || proj->iterations > 3) {
        ++out.steps_rejected;
        h = 0.5 * step;
        if (h < opts.min_step) {
          throw ConvergenceError("lift_curve: projection onto the level set fails near t = " +
                                     std::to_string(seg + s),
                                 nlohmann::json{{"t", seg + s}, {"x", to_std(x)}});
        }
        continue;
      }
      x = proj->x;
      s = s_next;
      ++out.steps_taken;
      record(seg + s, lam(s), x);

      // the exact lift velocity at the accepted point must be horizontal
      const ConnectionFrame frame = connection_frame(sys, PointState{lam(s), x}, tols);
      Vector u(sys.m + sys.n);
      u << dl, vel(s, x);
      out.max_vertical_velocity = std::max(out.max_vertical_velocity, frame.vertical_part(u).norm());

      if (proj->iterations <= 1) h = std::min(2.0 * step, opts.max_step);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Holonomy and the cocycle identity
// ---------------------------------------------------------------------------

struct HolonomyReport {
  Vector base_lambda;
  Vector level;
  std::vector<Vector> points_before;
  std::vector<Vector> points_after;
  std::vector<int> permutation; // points_before[i] is carried to points_before[permutation[i]]
  std::vector<double> displacements;
  double max_roundtrip_displacement = 0.0;
  double match_radius = 0.0;

  bool identity() const {
    for (std::size_t i = 0; i < permutation.size(); ++i) {
      if (permutation[i] != static_cast<int>(i)) return false;
    }
    return true;
  }
};

inline void to_json(nlohmann::json& j, const HolonomyReport& r) {
  nlohmann::json before = nlohmann::json::array(), after = nlohmann::json::array();
  for (const auto& p : r.points_before) before.push_back(to_std(p));
  for (const auto& p : r.points_after) after.push_back(to_std(p));
  j = {{"base_lambda", to_std(r.base_lambda)},
       {"level", to_std(r.level)},
       {"points_before", before},
       {"points_after", after},
       {"permutation", r.permutation},
       {"identity", r.identity()},
       {"displacements", r.displacements},
       {"max_roundtrip_displacement", r.max_roundtrip_displacement},
       {"match_radius", r.match_radius}};
}

/// Transport every point of E_lambda0 ∩ N_a around a closed loop and read off
/// the induced permutation. Endpoints are matched to the start set by nearest
/// neighbour within the clustering radius.
inline HolonomyReport holonomy_loop(const SystemSpec& sys, const ParamPath& loop, const Vector& a, int budget,
                                    std::uint64_t seed, const TransportOptions& opts = {}) {
  if (!loop.closed()) throw InputError("holonomy_loop: loop must close");
  if (a.size() != sys.k) throw InputError("holonomy_loop: level dimension does not match k");
  HolonomyReport rep;
  rep.base_lambda = loop.waypoints.front();
  rep.level = a;
  rep.match_radius = opts.newton.tols.cluster * sys.domain.diameter();
  for (const auto& p : enumerate_level_points(sys, rep.base_lambda, a, budget, seed, opts.newton)) {
    rep.points_before.push_back(p.state.x);
  }
  if (rep.points_before.empty()) {
    throw InputError("holonomy_loop: no points of the level set found at the base parameter");
  }
  std::vector<bool> hit(rep.points_before.size(), false);
  for (const Vector& x : rep.points_before) {
    const Vector end = lift_curve(sys, loop, x, opts).endpoint();
    rep.points_after.push_back(end);
    std::size_t best = 0;
    double dist = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < rep.points_before.size(); ++j) {
      const double d = (end - rep.points_before[j]).norm();
      if (d < dist) dist = d, best = j;
    }
    if (dist > rep.match_radius || hit[best]) {
      throw HolonomyError("holonomy_loop: transported point " + detail::coords(PointState{rep.base_lambda, end}) +
                              " does not match a distinct start point (distance " + std::to_string(dist) + ")",
                          nlohmann::json{{"endpoint", to_std(end)}, {"distance", dist}});
    }
    hit[best] = true;
    rep.permutation.push_back(static_cast<int>(best));
    rep.displacements.push_back(dist);
    rep.max_roundtrip_displacement = std::max(rep.max_roundtrip_displacement, dist);
  }
  return rep;
}

struct CocycleReport {
  Vector direct;   // gamma_{31}(x0)
  Vector composed; // gamma_{32}(gamma_{21}(x0))
  double deviation = 0.0;
};

inline void to_json(nlohmann::json& j, const CocycleReport& r) {
  j = {{"direct", to_std(r.direct)}, {"composed", to_std(r.composed)}, {"deviation", r.deviation}};
}

/// Compare direct transport lambda1 -> lambda3 with the composition through
/// lambda2. Paths default to straight segments.
inline CocycleReport check_cocycle(const SystemSpec& sys, const Vector& lambda1, const Vector& lambda2,
                                   const Vector& lambda3, const Vector& x0, const TransportOptions& opts = {},
                                   std::optional<ParamPath> path21 = std::nullopt,
                                   std::optional<ParamPath> path32 = std::nullopt,
                                   std::optional<ParamPath> path31 = std::nullopt) {
  const ParamPath p21 = path21.value_or(ParamPath::segment(lambda1, lambda2));
  const ParamPath p32 = path32.value_or(ParamPath::segment(lambda2, lambda3));
  const ParamPath p31 = path31.value_or(ParamPath::segment(lambda1, lambda3));
  auto ends = [](const ParamPath& p, const Vector& a, const Vector& b) {
    return p.waypoints.front() == a && p.waypoints.back() == b;
  };
  if (!ends(p21, lambda1, lambda2) || !ends(p32, lambda2, lambda3) || !ends(p31, lambda1, lambda3)) {
    throw InputError("check_cocycle: path endpoints do not match the parameter points");
  }
  CocycleReport rep;
  rep.direct = lift_curve(sys, p31, x0, opts).endpoint();
  rep.composed = lift_curve(sys, p32, lift_curve(sys, p21, x0, opts).endpoint(), opts).endpoint();
  rep.deviation = (rep.direct - rep.composed).norm();
  return rep;
}

} // namespace eqb
