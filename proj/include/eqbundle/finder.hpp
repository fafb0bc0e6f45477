#pragma once

// Equilibria on first-integral level sets and continuation of 1-dimensional fibers.

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <random>
#include <vector>

#include "audit.hpp"
#include "linalg.hpp"
#include "system.hpp"
#include "tolerances.hpp"

namespace eqb {

struct EquilibriumPoint {
  PointState state;
  double residual_f = 0.0;
  Vector level;
  AuditReport audit;
  int iterations = 0;
  bool transverse = true; // [df/dx; dh/dx] has full column rank n at the solution
};

inline void to_json(nlohmann::json& j, const EquilibriumPoint& p) {
  j = {{"lambda", to_std(p.state.lambda)}, {"x", to_std(p.state.x)}, {"residual_f", p.residual_f},
       {"level", to_std(p.level)},         {"iterations", p.iterations}, {"transverse", p.transverse},
       {"audit", p.audit}};
}

struct NewtonOptions {
  int max_iterations = 50;
  int polish_iterations = 2;
  Tolerances tols;
};

struct NewtonSolve {
  Vector x;
  int iterations = 0; // Newton steps needed to reach the convergence threshold
  double residual = 0.0;
};

namespace detail {

inline Vector level_residual(const SystemSpec& sys, const Vector& lambda, const Vector& a, const Vector& x) {
  Vector r(sys.n + sys.k);
  r << sys.f(lambda, x), sys.h(x) - a;
  return r;
}

inline Matrix level_jacobian(const SystemSpec& sys, const Vector& lambda, const Vector& x) {
  const Evaluation ev = evaluate(sys, PointState{lambda, x}, std::numeric_limits<double>::infinity(), false);
  Matrix jac(sys.n + sys.k, sys.n);
  jac << ev.jac_x, ev.jac_h;
  return jac;
}

} // namespace detail

/// Damped Gauss-Newton on F(x) = [f(lambda, x); h(x) - a] = 0.
///
/// F has n + k components but is consistent on E ∩ N_a, and its Jacobian
/// [df/dx; dh/dx] has full column rank there; each step is the least-squares
/// solution of J dx = -F. The step is halved until the residual decreases and
/// the trial point stays inside the domain (up to the slack).
inline NewtonSolve newton_solve(const SystemSpec& sys, const Vector& lambda, const Vector& a, const Vector& x0,
                                const NewtonOptions& opts = {}) {
  if (lambda.size() != sys.m || a.size() != sys.k || x0.size() != sys.n) {
    throw InputError("newton_on_level_set: dimension mismatch");
  }
  if (!sys.parameters.contains(lambda)) {
    throw DomainError("newton_on_level_set: parameter outside the parameter box");
  }
  const double slack = opts.tols.slack;
  if (!sys.domain.contains(x0, slack)) {
    throw DomainError("newton_on_level_set: starting point outside the domain at " +
                      detail::coords(PointState{lambda, x0}));
  }
  const double threshold = opts.tols.newton * (1.0 + x0.norm());

  Vector x = x0;
  Vector r = detail::level_residual(sys, lambda, a, x);
  if (!r.allFinite()) throw EvaluationError("newton_on_level_set: non-finite residual at start");
  double norm = r.norm();

  auto step = [&](bool damped) -> bool {
    Vector dx;
    try {
      dx = solve_least_squares(detail::level_jacobian(sys, lambda, x), -r);
    } catch (const DegeneracyError& e) {
      throw DegeneracyError("singular Newton system at " + detail::coords(PointState{lambda, x}), e.details());
    }
    double t = 1.0;
    bool blocked = false;
    for (int halving = 0; halving < (damped ? 40 : 1); ++halving, t *= 0.5) {
      const Vector trial = x + t * dx;
      if (!sys.domain.contains(trial, slack)) {
        blocked = true;
        continue;
      }
      const Vector rt = detail::level_residual(sys, lambda, a, trial);
      const double nt = rt.allFinite() ? rt.norm() : std::numeric_limits<double>::infinity();
      if (nt < norm * (1.0 - 1e-4 * t) || (nt <= threshold && nt <= norm)) {
        x = trial;
        r = rt;
        norm = nt;
        return true;
      }
    }
    if (damped && blocked) {
      throw DomainError("newton_on_level_set: iterate leaves the domain near " +
                        detail::coords(PointState{lambda, x}));
    }
    return false;
  };

  NewtonSolve out;
  while (norm > threshold) {
    if (out.iterations >= opts.max_iterations) {
      throw ConvergenceError("newton_on_level_set: no convergence after " + std::to_string(opts.max_iterations) +
                                 " iterations (||F|| = " + std::to_string(norm) + ")",
                             nlohmann::json{{"residual", norm}});
    }
    if (!step(true)) {
      throw ConvergenceError("newton_on_level_set: line search failed (||F|| = " + std::to_string(norm) + ")",
                             nlohmann::json{{"residual", norm}});
    }
    ++out.iterations;
  }
  for (int p = 0; p < opts.polish_iterations && norm > 0.0; ++p) {
    try {
      if (!step(false)) break;
    } catch (const Error&) {
      break;
    }
  }
  out.x = x;
  out.residual = norm;
  return out;
}

/// Newton solve plus the audit of the solution point.
inline EquilibriumPoint newton_on_level_set(const SystemSpec& sys, const Vector& lambda, const Vector& a,
                                            const Vector& x0, const NewtonOptions& opts = {}) {
  const NewtonSolve sol = newton_solve(sys, lambda, a, x0, opts);
  EquilibriumPoint p;
  p.state = PointState{lambda, sol.x};
  p.iterations = sol.iterations;
  p.level = sys.h(sol.x);
  p.residual_f = sys.f(lambda, sol.x).norm();
  p.transverse = numeric_rank(detail::level_jacobian(sys, lambda, sol.x)).rank == sys.n;
  p.audit = audit_point(sys, p.state, opts.tols);
  return p;
}

// ---------------------------------------------------------------------------
// Multistart enumeration of E_lambda ∩ N_a
// ---------------------------------------------------------------------------

namespace detail {

inline double radical_inverse(std::uint64_t i, unsigned base) {
  double inv = 1.0 / base, f = inv, r = 0.0;
  while (i > 0) {
    r += static_cast<double>(i % base) * f;
    i /= base;
    f *= inv;
  }
  return r;
}

/// Halton points with a seeded Cranley-Patterson shift.
class ShiftedHalton {
public:
  ShiftedHalton(int dim, std::uint64_t seed) : shift_(static_cast<std::size_t>(dim)) {
    static constexpr std::array<unsigned, 25> primes{2,  3,  5,  7,  11, 13, 17, 19, 23, 29, 31, 37, 41,
                                                     43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97};
    if (dim > static_cast<int>(primes.size())) throw InputError("low-discrepancy sampling supports n <= 25");
    bases_.assign(primes.begin(), primes.begin() + dim);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (auto& s : shift_) s = unit(rng);
  }

  Vector next() {
    ++index_;
    Vector out(static_cast<Eigen::Index>(bases_.size()));
    for (std::size_t d = 0; d < bases_.size(); ++d) {
      const double v = radical_inverse(index_, bases_[d]) + shift_[d];
      out(static_cast<Eigen::Index>(d)) = v - std::floor(v);
    }
    return out;
  }

private:
  std::vector<unsigned> bases_;
  std::vector<double> shift_;
  std::uint64_t index_ = 0;
};

/// Lexicographic order in which coordinates closer than `tol` count as equal,
/// so round-off in one coordinate cannot reorder distinct clusters.
inline bool lexicographic_less(const Vector& a, const Vector& b, double tol = 0.0) {
  for (Eigen::Index i = 0; i < std::min(a.size(), b.size()); ++i) {
    if (std::abs(a(i) - b(i)) > tol) return a(i) < b(i);
  }
  return a.size() < b.size();
}

} // namespace detail

/// Multistart Newton from `budget` low-discrepancy starts in the domain,
/// deduplicated with radius cluster * diam(V), sorted lexicographically.
/// An empty result is a valid answer.
inline std::vector<EquilibriumPoint> enumerate_level_points(const SystemSpec& sys, const Vector& lambda,
                                                            const Vector& a, int budget, std::uint64_t seed,
                                                            const NewtonOptions& opts = {}) {
  if (budget <= 0) throw InputError("enumerate_level_points: budget must be positive");
  if (lambda.size() != sys.m || a.size() != sys.k) throw InputError("enumerate_level_points: dimension mismatch");
  const double radius = opts.tols.cluster * sys.domain.diameter();
  detail::ShiftedHalton seq(sys.n, seed);

  std::vector<EquilibriumPoint> found;
  int starts = 0;
  for (long draws = 0; starts < budget && draws < 1000L * budget; ++draws) {
    const Vector unit = seq.next();
    const Vector x0 = sys.domain.lower.array() + unit.array() * (sys.domain.upper - sys.domain.lower).array();
    if (!sys.domain.contains(x0)) continue;
    ++starts;
    NewtonSolve sol;
    try {
      sol = newton_solve(sys, lambda, a, x0, opts);
    } catch (const Error&) {
      continue;
    }
    const bool duplicate = std::any_of(found.begin(), found.end(), [&](const EquilibriumPoint& p) {
      return (p.state.x - sol.x).norm() <= radius;
    });
    if (duplicate) continue;
    EquilibriumPoint p;
    p.state = PointState{lambda, sol.x};
    p.iterations = sol.iterations;
    found.push_back(std::move(p));
  }
  std::sort(found.begin(), found.end(), [radius](const EquilibriumPoint& p, const EquilibriumPoint& q) {
    return detail::lexicographic_less(p.state.x, q.state.x, radius);
  });
  for (auto& p : found) {
    p.level = sys.h(p.state.x);
    p.residual_f = sys.f(lambda, p.state.x).norm();
    p.transverse = numeric_rank(detail::level_jacobian(sys, lambda, p.state.x)).rank == sys.n;
    p.audit = audit_point(sys, p.state, opts.tols);
  }
  return found;
}

// ---------------------------------------------------------------------------
// Fiber continuation (k = 1)
// ---------------------------------------------------------------------------

enum class FiberTopology { circle, segment };

inline const char* to_string(FiberTopology t) { return t == FiberTopology::circle ? "circle" : "segment"; }

struct FiberTrace {
  Vector lambda;
  std::vector<Vector> points;
  FiberTopology topology = FiberTopology::segment;
  double arclength = 0.0;
  std::array<double, 2> endpoint_boundary_distances{0.0, 0.0}; // segments only
  double max_f_residual = 0.0;
};

inline void to_json(nlohmann::json& j, const FiberTrace& t) {
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& p : t.points) pts.push_back(to_std(p));
  j = {{"lambda", to_std(t.lambda)}, {"topology", to_string(t.topology)}, {"arclength", t.arclength},
       {"points", pts},          {"max_f_residual", t.max_f_residual}};
  if (t.topology == FiberTopology::segment) {
    j["endpoint_boundary_distances"] = {t.endpoint_boundary_distances[0], t.endpoint_boundary_distances[1]};
  }
}

struct FiberOptions {
  double initial_step = 0.02;
  double min_step = 1e-8;
  double max_step = 0.1;
  int max_points = 100000;
  int max_corrector_iterations = 8;
  double boundary_resolution = 1e-10;
  int direction = 1; // sign applied to the initial tangent
  Tolerances tols;
};

namespace detail {

struct Correction {
  bool ok = false;
  Vector x;
  int iterations = 0;
};

/// Newton on [f(lambda, y); t . (y - predicted)] = 0.
inline Correction correct_on_fiber(const SystemSpec& sys, const Vector& lambda, const Vector& predicted,
                                   const Vector& tangent, const FiberOptions& opts) {
  Correction c;
  Vector y = predicted;
  auto residual = [&](const Vector& z) {
    Vector r(sys.n + 1);
    r << sys.f(lambda, z), tangent.dot(z - predicted);
    return r;
  };
  const double threshold = opts.tols.newton * (1.0 + predicted.norm());
  Vector r = residual(y);
  auto newton_step = [&]() -> std::optional<Vector> {
    const Evaluation ev = evaluate(sys, PointState{lambda, y}, std::numeric_limits<double>::infinity(), false);
    Matrix jac(sys.n + 1, sys.n);
    jac << ev.jac_x, tangent.transpose();
    try {
      return Vector(y + solve_least_squares(jac, -r));
    } catch (const DegeneracyError&) {
      return std::nullopt;
    }
  };
  while (!(r.norm() <= threshold)) {
    if (!r.allFinite() || c.iterations >= opts.max_corrector_iterations) return c;
    const auto next = newton_step();
    if (!next) return c;
    y = *next;
    r = residual(y);
    ++c.iterations;
  }
  for (int p = 0; p < 2 && r.norm() > 0.0; ++p) {
    const auto next = newton_step();
    if (!next) break;
    const Vector rn = residual(*next);
    if (!(rn.norm() < r.norm())) break;
    y = *next;
    r = rn;
  }
  c.ok = true;
  c.x = y;
  return c;
}

/// Unit kernel vector of df/dx, oriented along `reference` (or sign-normalized).
inline Vector fiber_tangent(const SystemSpec& sys, const Vector& lambda, const Vector& x,
                            const std::optional<Vector>& reference, const Tolerances& tols) {
  const Evaluation ev = evaluate(sys, PointState{lambda, x}, std::numeric_limits<double>::infinity(), false);
  const RankReport rank = floored_rank(ev.jac_x, tols.rank_floor);
  if (rank.rank != sys.n - 1) {
    throw BranchPointError("trace_fiber: kernel of df/dx has dimension " + std::to_string(sys.n - rank.rank) +
                               " at " + coords(PointState{lambda, x}),
                           nlohmann::json{{"x", to_std(x)}, {"rank_report", rank}});
  }
  Vector t = kernel_basis(ev.jac_x, rank.tolerance_used).col(0);
  t.normalize();
  if (reference) {
    if (t.dot(*reference) < 0.0) t = -t;
  } else {
    Eigen::Index imax = 0;
    t.cwiseAbs().maxCoeff(&imax);
    if (t(imax) < 0.0) t = -t;
  }
  return t;
}

enum class MarchEnd { boundary, closed };

inline MarchEnd march_fiber(const SystemSpec& sys, const Vector& lambda, const Vector& x0, const Vector& t0,
                            const FiberOptions& opts, std::vector<Vector>& out) {
  Vector x = x0;
  Vector t = t0;
  double h = opts.initial_step;
  int accepted = 0;
  for (;;) {
    if (static_cast<int>(out.size()) > opts.max_points) {
      throw ResolutionError("trace_fiber: point budget exhausted");
    }
    const Correction c = correct_on_fiber(sys, lambda, x + h * t, t, opts);
    if (!c.ok || c.iterations > 4) {
      h *= 0.5;
      if (h < opts.min_step) {
        throw ConvergenceError("trace_fiber: step size underflow near " + coords(PointState{lambda, x}));
      }
      continue;
    }
    if (!sys.domain.contains(c.x)) {
      // Boundary contact: bisect on the predictor length between the last
      // interior point and the first exterior correction.
      double lo = 0.0, hi = h;
      Vector inside = x;
      while (hi - lo > opts.boundary_resolution) {
        const double mid = 0.5 * (lo + hi);
        const Correction cm = correct_on_fiber(sys, lambda, x + mid * t, t, opts);
        if (cm.ok && sys.domain.contains(cm.x)) {
          lo = mid;
          inside = cm.x;
        } else {
          hi = mid;
        }
      }
      if (lo > 0.0) out.push_back(inside);
      return MarchEnd::boundary;
    }
    Vector tn = fiber_tangent(sys, lambda, c.x, t, opts.tols);
    if (tn.dot(t) < 0.5) {
      h *= 0.5;
      if (h < opts.min_step) throw ConvergenceError("trace_fiber: tangent turns too sharply");
      continue;
    }
    ++accepted;
    if (accepted >= 5 && tn.dot(t0) > 0.9) {
      const Vector chord = c.x - x;
      const double tau = chord.squaredNorm() > 0.0 ? (x0 - x).dot(chord) / chord.squaredNorm() : -1.0;
      const bool passes_start =
          tau >= 0.0 && tau <= 1.0 && (x0 - (x + tau * chord)).norm() < 0.5 * chord.norm();
      if (passes_start || (c.x - x0).norm() < 0.5 * h) {
        out.push_back(x0);
        return MarchEnd::closed;
      }
    }
    out.push_back(c.x);
    if (c.iterations <= 1) {
      h = std::min(2.0 * h, opts.max_step);
    } else if (c.iterations >= 3) {
      h = std::max(0.5 * h, opts.min_step);
    }
    x = c.x;
    t = tn;
  }
}

} // namespace detail

/// Predictor-corrector continuation of the fiber E_lambda through x0 (k = 1).
///
/// Marches along the kernel of df/dx until the curve closes (circle) or meets
/// the domain boundary; segments are traced in both directions from x0.
inline FiberTrace trace_fiber(const SystemSpec& sys, const Vector& lambda, const Vector& x0,
                              const FiberOptions& opts = {}) {
  if (sys.k != 1) {
    throw UnsupportedDimensionError("trace_fiber: fibers are only traced for k = 1 (system has k = " +
                                    std::to_string(sys.k) + ")");
  }
  if (lambda.size() != sys.m || x0.size() != sys.n) throw InputError("trace_fiber: dimension mismatch");
  const Evaluation ev0 = evaluate(sys, PointState{lambda, x0}, opts.tols.slack, false);
  if (ev0.f_value.norm() > equilibrium_threshold(x0, opts.tols)) {
    throw InputError("trace_fiber: starting point is not an equilibrium (||f|| = " +
                     std::to_string(ev0.f_value.norm()) + ")");
  }

  const Vector t0 = static_cast<double>(opts.direction >= 0 ? 1 : -1) *
                    detail::fiber_tangent(sys, lambda, x0, std::nullopt, opts.tols);

  FiberTrace trace;
  trace.lambda = lambda;
  std::vector<Vector> forward{x0};
  if (detail::march_fiber(sys, lambda, x0, t0, opts, forward) == detail::MarchEnd::closed) {
    trace.topology = FiberTopology::circle;
    trace.points = std::move(forward);
  } else {
    std::vector<Vector> backward;
    if (detail::march_fiber(sys, lambda, x0, -t0, opts, backward) == detail::MarchEnd::closed) {
      throw ConvergenceError("trace_fiber: inconsistent topology (closed in one direction only)");
    }
    trace.topology = FiberTopology::segment;
    trace.points.assign(backward.rbegin(), backward.rend());
    trace.points.insert(trace.points.end(), forward.begin(), forward.end());
    trace.endpoint_boundary_distances = {sys.domain.boundary_distance(trace.points.front()),
                                         sys.domain.boundary_distance(trace.points.back())};
  }
  for (std::size_t i = 0; i < trace.points.size(); ++i) {
    if (i > 0) trace.arclength += (trace.points[i] - trace.points[i - 1]).norm();
    trace.max_f_residual = std::max(trace.max_f_residual, sys.f(lambda, trace.points[i]).norm());
  }
  return trace;
}

} // namespace eqb
