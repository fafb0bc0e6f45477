#pragma once

// Parametric vector fields with first integrals.
//
// A system is  x' = f(lambda, x)  on a compact domain V of R^n, with parameters
// lambda in an open box of R^m and k first integrals h : R^n -> R^k that do not
// depend on lambda.  Evaluators are plain std::function objects; analytic
// derivative evaluators are optional and replaced by central finite
// differences when absent.

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "errors.hpp"
#include "linalg.hpp"

namespace eqb {

using FieldFn = std::function<Vector(const Vector& lambda, const Vector& x)>;
using FieldJacobianFn = std::function<Matrix(const Vector& lambda, const Vector& x)>;
using IntegralFn = std::function<Vector(const Vector& x)>;
using IntegralJacobianFn = std::function<Matrix(const Vector& x)>;
using HessianFn = std::function<std::vector<Matrix>(const Vector& x)>;

/// Scalar inequality g(x) <= 0 cutting the domain box.
struct Constraint {
  std::string label;
  std::function<double(const Vector&)> g;
  std::function<Vector(const Vector&)> grad; // optional
};

/// Compact state domain V: a box intersected with inequality constraints.
struct Domain {
  Vector lower;
  Vector upper;
  std::vector<Constraint> constraints;

  bool contains(const Vector& x, double slack = 0.0) const {
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      if (x(i) < lower(i) - slack || x(i) > upper(i) + slack) return false;
    }
    for (const auto& c : constraints) {
      const double gv = c.g(x);
      if (!(gv <= slack * std::max(1.0, gradient(c, x).norm()))) return false;
    }
    return true;
  }

  /// Distance to the nearest face of the box or constraint surface, with the
  /// constraint distance linearized as |g| / |grad g|.
  double boundary_distance(const Vector& x) const {
    double d = std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      if (std::isfinite(lower(i))) d = std::min(d, std::abs(x(i) - lower(i)));
      if (std::isfinite(upper(i))) d = std::min(d, std::abs(upper(i) - x(i)));
    }
    for (const auto& c : constraints) {
      const double gn = gradient(c, x).norm();
      if (gn > 0.0) d = std::min(d, std::abs(c.g(x)) / gn);
    }
    return d;
  }

  double diameter() const { return (upper - lower).norm(); }

  static Vector gradient(const Constraint& c, const Vector& x) {
    if (c.grad) return c.grad(x);
    Vector out(x.size());
    Vector xp = x;
    for (Eigen::Index j = 0; j < x.size(); ++j) {
      const double step = std::cbrt(machine_eps) * std::max(1.0, std::abs(x(j)));
      xp(j) = x(j) + step;
      const double fp = c.g(xp);
      xp(j) = x(j) - step;
      const double fm = c.g(xp);
      xp(j) = x(j);
      out(j) = (fp - fm) / (2.0 * step);
    }
    return out;
  }
};

/// Open parameter box, plus the finite sub-box used for random sampling.
struct ParameterBox {
  Vector lower;
  Vector upper;
  Vector sample_lower;
  Vector sample_upper;

  bool contains(const Vector& lambda) const {
    for (Eigen::Index i = 0; i < lambda.size(); ++i) {
      if (!(lambda(i) > lower(i) && lambda(i) < upper(i))) return false;
    }
    return true;
  }
};

struct PointState {
  Vector lambda;
  Vector x;
};

enum class DerivativeSource { analytic, finite_difference };

inline const char* to_string(DerivativeSource s) {
  return s == DerivativeSource::analytic ? "analytic" : "finite-difference";
}

struct SystemSpec {
  std::string name;
  int n = 0; // state dimension
  int m = 0; // parameter dimension
  int k = 0; // number of first integrals
  FieldFn f;
  IntegralFn h;
  FieldJacobianFn jac_x;      // n x n, optional
  FieldJacobianFn jac_lambda; // n x m, optional
  IntegralJacobianFn jac_h;   // k x n, optional
  HessianFn hess_h;           // k matrices n x n, optional
  Domain domain;
  ParameterBox parameters;
  std::vector<std::string> notes;

  void validate() const {
    if (n <= 0 || m <= 0) throw InputError("system '" + name + "': n and m must be positive");
    if (k <= 0 || k >= n) throw InputError("system '" + name + "': need 0 < k < n");
    if (!f || !h) throw InputError("system '" + name + "': f and h are required");
    if (domain.lower.size() != n || domain.upper.size() != n) {
      throw InputError("system '" + name + "': domain box must have n bounds");
    }
    if (parameters.lower.size() != m || parameters.upper.size() != m ||
        parameters.sample_lower.size() != m || parameters.sample_upper.size() != m) {
      throw InputError("system '" + name + "': parameter box must have m bounds");
    }
  }

  bool fully_analytic() const { return jac_x && jac_lambda && jac_h && hess_h; }
};

struct Evaluation {
  Vector f_value;
  Matrix jac_x;
  Matrix jac_lambda;
  Vector h_value;
  Matrix jac_h;
  std::vector<Matrix> hess_h;
  DerivativeSource derivative_source = DerivativeSource::analytic;
};

namespace detail {

inline std::string coords(const PointState& u) {
  std::ostringstream os;
  os.precision(17);
  os << "lambda=(";
  for (Eigen::Index i = 0; i < u.lambda.size(); ++i) os << (i ? "," : "") << u.lambda(i);
  os << ") x=(";
  for (Eigen::Index i = 0; i < u.x.size(); ++i) os << (i ? "," : "") << u.x(i);
  os << ")";
  return os.str();
}

/// cbrt(eps) * max(1, |v|), adjusted so that (v + step) - v == step exactly.
inline double central_step(double v) {
  const double raw = std::cbrt(machine_eps) * std::max(1.0, std::abs(v));
  volatile double up = v + raw;
  return up - v;
}

inline double second_step(double v) {
  const double raw = std::pow(machine_eps, 0.25) * std::max(1.0, std::abs(v));
  volatile double up = v + raw;
  return up - v;
}

template <class Fn>
Matrix central_jacobian(Fn&& fn, const Vector& at, Eigen::Index rows) {
  Matrix out(rows, at.size());
  Vector xp = at;
  for (Eigen::Index j = 0; j < at.size(); ++j) {
    const double step = central_step(at(j));
    xp(j) = at(j) + step;
    const Vector fp = fn(xp);
    xp(j) = at(j) - step;
    const Vector fm = fn(xp);
    xp(j) = at(j);
    out.col(j) = (fp - fm) / (2.0 * step);
  }
  return out;
}

inline std::vector<Matrix> hessians_from_values(const IntegralFn& h, const Vector& x, int k) {
  const Eigen::Index n = x.size();
  std::vector<Matrix> out(static_cast<std::size_t>(k), Matrix::Zero(n, n));
  Vector steps(n);
  for (Eigen::Index j = 0; j < n; ++j) steps(j) = second_step(x(j));
  Vector xp = x;
  for (Eigen::Index a = 0; a < n; ++a) {
    for (Eigen::Index b = a; b < n; ++b) {
      auto shifted = [&](double sa, double sb) {
        xp = x;
        xp(a) += sa * steps(a);
        xp(b) += sb * steps(b);
        return h(xp);
      };
      const Vector val = (shifted(1, 1) - shifted(1, -1) - shifted(-1, 1) + shifted(-1, -1)) /
                         (4.0 * steps(a) * steps(b));
      for (int l = 0; l < k; ++l) {
        out[static_cast<std::size_t>(l)](a, b) = val(l);
        out[static_cast<std::size_t>(l)](b, a) = val(l);
      }
    }
  }
  return out;
}

inline std::vector<Matrix> hessians_from_gradient(const IntegralJacobianFn& jac_h, const Vector& x,
                                                  int k) {
  const Eigen::Index n = x.size();
  std::vector<Matrix> out(static_cast<std::size_t>(k), Matrix::Zero(n, n));
  Vector xp = x;
  for (Eigen::Index j = 0; j < n; ++j) {
    const double step = central_step(x(j));
    xp(j) = x(j) + step;
    const Matrix gp = jac_h(xp);
    xp(j) = x(j) - step;
    const Matrix gm = jac_h(xp);
    xp(j) = x(j);
    const Matrix col = (gp - gm) / (2.0 * step); // k x n, row l = d(grad h_l)/dx_j
    for (int l = 0; l < k; ++l) out[static_cast<std::size_t>(l)].col(j) = col.row(l).transpose();
  }
  for (auto& hm : out) hm = 0.5 * (hm + hm.transpose()).eval();
  return out;
}

inline void require_finite_block(const Matrix& m, const char* block, const PointState& u) {
  if (!m.allFinite()) {
    throw EvaluationError(std::string("non-finite ") + block + " at " + coords(u));
  }
}

} // namespace detail

/// Assemble every derivative block at u.
///
/// `slack` bounds how far outside V the point may lie; pass infinity for
/// unchecked evaluation (used by correctors probing past the boundary).
inline Evaluation evaluate(const SystemSpec& sys, const PointState& u, double slack = 1e-9,
                           bool with_hessians = true) {
  if (u.lambda.size() != sys.m || u.x.size() != sys.n) {
    throw InputError("evaluate: point dimensions do not match system '" + sys.name + "'");
  }
  if (!u.lambda.allFinite() || !u.x.allFinite()) {
    throw InputError("evaluate: non-finite coordinates at " + detail::coords(u));
  }
  if (std::isfinite(slack)) {
    if (!sys.parameters.contains(u.lambda)) {
      throw DomainError("parameter outside the parameter box at " + detail::coords(u));
    }
    if (!sys.domain.contains(u.x, slack)) {
      throw DomainError("state outside the domain at " + detail::coords(u));
    }
  }

  Evaluation ev;
  bool all_analytic = true;
  ev.f_value = sys.f(u.lambda, u.x);
  ev.h_value = sys.h(u.x);
  detail::require_finite_block(ev.f_value, "f", u);
  detail::require_finite_block(ev.h_value, "h", u);

  if (sys.jac_x) {
    ev.jac_x = sys.jac_x(u.lambda, u.x);
  } else {
    all_analytic = false;
    ev.jac_x = detail::central_jacobian([&](const Vector& x) { return sys.f(u.lambda, x); }, u.x, sys.n);
  }
  if (sys.jac_lambda) {
    ev.jac_lambda = sys.jac_lambda(u.lambda, u.x);
  } else {
    all_analytic = false;
    ev.jac_lambda = detail::central_jacobian([&](const Vector& l) { return sys.f(l, u.x); }, u.lambda, sys.n);
  }
  if (sys.jac_h) {
    ev.jac_h = sys.jac_h(u.x);
  } else {
    all_analytic = false;
    ev.jac_h = detail::central_jacobian(sys.h, u.x, sys.k);
  }
  if (!with_hessians) {
    ev.hess_h.assign(static_cast<std::size_t>(sys.k), Matrix::Zero(sys.n, sys.n));
  } else if (sys.hess_h) {
    ev.hess_h = sys.hess_h(u.x);
  } else {
    all_analytic = false;
    ev.hess_h = sys.jac_h ? detail::hessians_from_gradient(sys.jac_h, u.x, sys.k)
                          : detail::hessians_from_values(sys.h, u.x, sys.k);
  }

  detail::require_finite_block(ev.jac_x, "df/dx", u);
  detail::require_finite_block(ev.jac_lambda, "df/dlambda", u);
  detail::require_finite_block(ev.jac_h, "dh/dx", u);
  for (const auto& hm : ev.hess_h) detail::require_finite_block(hm, "Hessian of h", u);
  if (ev.jac_x.rows() != sys.n || ev.jac_x.cols() != sys.n || ev.jac_lambda.rows() != sys.n ||
      ev.jac_lambda.cols() != sys.m || ev.jac_h.rows() != sys.k || ev.jac_h.cols() != sys.n ||
      static_cast<int>(ev.hess_h.size()) != sys.k) {
    throw EvaluationError("evaluate: derivative block has the wrong shape for '" + sys.name + "'");
  }
  ev.derivative_source = all_analytic ? DerivativeSource::analytic : DerivativeSource::finite_difference;
  return ev;
}

/// Uniform random point of V x (sampling box of Lambda), by rejection.
inline PointState sample_point(const SystemSpec& sys, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  PointState u{Vector(sys.m), Vector(sys.n)};
  for (int i = 0; i < sys.m; ++i) {
    const double lo = sys.parameters.sample_lower(i);
    const double hi = sys.parameters.sample_upper(i);
    u.lambda(i) = lo + (hi - lo) * unit(rng);
  }
  for (int attempt = 0; attempt < 100000; ++attempt) {
    for (int i = 0; i < sys.n; ++i) {
      u.x(i) = sys.domain.lower(i) + (sys.domain.upper(i) - sys.domain.lower(i)) * unit(rng);
    }
    if (sys.domain.contains(u.x)) return u;
  }
  throw InputError("sample_point: could not draw a point inside the domain of '" + sys.name + "'");
}

struct IdentityCheck {
  double max_residual = 0.0;
  PointState worst;
  int worst_integral = 0;
};

/// max over samples and l of |f(lambda, x) . grad h_l(x)|.
inline IdentityCheck check_first_integral_identity(const SystemSpec& sys, int samples,
                                                   std::uint64_t seed) {
  if (samples <= 0) throw InputError("check_first_integral_identity: samples must be positive");
  std::mt19937_64 rng(seed);
  IdentityCheck out;
  for (int s = 0; s < samples; ++s) {
    const PointState u = sample_point(sys, rng);
    const Vector fv = sys.f(u.lambda, u.x);
    const Matrix gh = sys.jac_h ? sys.jac_h(u.x) : detail::central_jacobian(sys.h, u.x, sys.k);
    const Vector r = gh * fv;
    if (!r.allFinite()) throw EvaluationError("non-finite f . grad h at " + detail::coords(u));
    for (int l = 0; l < sys.k; ++l) {
      if ((s == 0 && l == 0) || std::abs(r(l)) > out.max_residual) {
        out.max_residual = std::abs(r(l));
        out.worst = u;
        out.worst_integral = l;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Built-in systems
// ---------------------------------------------------------------------------

namespace builtins {

inline constexpr double inf = std::numeric_limits<double>::infinity();

/// f = (-x + lambda (y^2 - 1), 0), h = y on the closed unit disk, lambda in (0, 1).
/// The fiber over lambda is the parabola arc x = lambda (y^2 - 1), ending on the circle.
inline SystemSpec planar() {
  SystemSpec s;
  s.name = "planar";
  s.n = 2;
  s.m = 1;
  s.k = 1;
  s.f = [](const Vector& l, const Vector& x) {
    return Vector{{-x(0) + l(0) * (x(1) * x(1) - 1.0), 0.0}};
  };
  s.jac_x = [](const Vector& l, const Vector& x) {
    return Matrix{{-1.0, 2.0 * l(0) * x(1)}, {0.0, 0.0}};
  };
  s.jac_lambda = [](const Vector&, const Vector& x) { return Matrix{{x(1) * x(1) - 1.0}, {0.0}}; };
  s.h = [](const Vector& x) { return Vector{{x(1)}}; };
  s.jac_h = [](const Vector&) { return Matrix{{0.0, 1.0}}; };
  s.hess_h = [](const Vector&) { return std::vector<Matrix>{Matrix::Zero(2, 2)}; };
  s.domain.lower = Vector::Constant(2, -1.0);
  s.domain.upper = Vector::Constant(2, 1.0);
  s.domain.constraints.push_back(
      {"x^2 + y^2 - 1", [](const Vector& x) { return x.squaredNorm() - 1.0; },
       [](const Vector& x) { return Vector(2.0 * x); }});
  s.parameters = {Vector::Constant(1, 0.0), Vector::Constant(1, 1.0), Vector::Constant(1, 0.05),
                  Vector::Constant(1, 0.95)};
  return s;
}

/// f = (-lambda y (z - x), lambda x (z - x), 0) with
/// h = (x^2 + y^2 + z^2, 4x^2 + 4y^2 + z^2/4), lambda > 0.
///
/// V is {h1 in [1, 3], h2 in [5, 15]}. The additional requirement h2 >= 5 h1
/// that sometimes accompanies this example is dropped: h2 - 5 h1 =
/// -x^2 - y^2 - 4.75 z^2 <= 0, so with it V would be empty.
inline SystemSpec example2() {
  SystemSpec s;
  s.name = "example2";
  s.n = 3;
  s.m = 1;
  s.k = 2;
  s.f = [](const Vector& l, const Vector& x) {
    const double d = x(2) - x(0);
    return Vector{{-l(0) * x(1) * d, l(0) * x(0) * d, 0.0}};
  };
  s.jac_x = [](const Vector& l, const Vector& v) {
    const double lam = l(0), x = v(0), y = v(1), z = v(2);
    return Matrix{{lam * y, -lam * (z - x), -lam * y},
                  {lam * z - 2.0 * lam * x, 0.0, lam * x},
                  {0.0, 0.0, 0.0}};
  };
  s.jac_lambda = [](const Vector&, const Vector& v) {
    const double d = v(2) - v(0);
    return Matrix{{-v(1) * d}, {v(0) * d}, {0.0}};
  };
  s.h = [](const Vector& v) {
    return Vector{{v.squaredNorm(), 4.0 * v(0) * v(0) + 4.0 * v(1) * v(1) + 0.25 * v(2) * v(2)}};
  };
  s.jac_h = [](const Vector& v) {
    return Matrix{{2.0 * v(0), 2.0 * v(1), 2.0 * v(2)}, {8.0 * v(0), 8.0 * v(1), 0.5 * v(2)}};
  };
  s.hess_h = [](const Vector&) {
    Matrix h1 = 2.0 * Matrix::Identity(3, 3);
    Matrix h2 = Vector{{8.0, 8.0, 0.5}}.asDiagonal();
    return std::vector<Matrix>{h1, h2};
  };
  const double r = std::sqrt(3.0);
  s.domain.lower = Vector::Constant(3, -r);
  s.domain.upper = Vector::Constant(3, r);
  auto h1 = [](const Vector& v) { return v.squaredNorm(); };
  auto h2 = [](const Vector& v) { return 4.0 * v(0) * v(0) + 4.0 * v(1) * v(1) + 0.25 * v(2) * v(2); };
  auto g1 = [](const Vector& v) { return Vector(2.0 * v); };
  auto g2 = [](const Vector& v) { return Vector{{8.0 * v(0), 8.0 * v(1), 0.5 * v(2)}}; };
  s.domain.constraints = {
      {"1 - h1", [=](const Vector& v) { return 1.0 - h1(v); }, [=](const Vector& v) { return Vector(-g1(v)); }},
      {"h1 - 3", [=](const Vector& v) { return h1(v) - 3.0; }, g1},
      {"5 - h2", [=](const Vector& v) { return 5.0 - h2(v); }, [=](const Vector& v) { return Vector(-g2(v)); }},
      {"h2 - 15", [=](const Vector& v) { return h2(v) - 15.0; }, g2},
  };
  s.parameters = {Vector::Constant(1, 0.0), Vector::Constant(1, inf), Vector::Constant(1, 0.1),
                  Vector::Constant(1, 3.0)};
  s.notes.push_back(
      "domain uses h1 in [1,3], h2 in [5,15] only; the constraint h2 >= 5 h1 is dropped because "
      "h2 - 5 h1 = -x^2 - y^2 - 4.75 z^2 <= 0 would leave the domain empty");
  return s;
}

/// Ribosome flow model on a ring with n sites:
///   x_i' = l_{i-1} x_{i-1} (1 - x_i) - l_i x_i (1 - x_{i+1})   (cyclic indices)
/// h = sum x_i, V = [0, 1]^n, rates in (0, inf)^n.
inline SystemSpec rfmr(int n) {
  if (n < 3) throw InputError("rfmr needs n >= 3");
  SystemSpec s;
  s.name = "rfmr";
  s.n = n;
  s.m = n;
  s.k = 1;
  auto prev = [n](int i) { return (i + n - 1) % n; };
  auto next = [n](int i) { return (i + 1) % n; };
  s.f = [=](const Vector& l, const Vector& x) {
    Vector out(n);
    for (int i = 0; i < n; ++i) {
      const int p = prev(i), q = next(i);
      out(i) = l(p) * x(p) * (1.0 - x(i)) - l(i) * x(i) * (1.0 - x(q));
    }
    return out;
  };
  s.jac_x = [=](const Vector& l, const Vector& x) {
    Matrix out = Matrix::Zero(n, n);
    for (int i = 0; i < n; ++i) {
      const int p = prev(i), q = next(i);
      const double inflow = l(p) * x(p);
      const double outflow = l(i) * (1.0 - x(q));
      out(i, p) += l(p) * (1.0 - x(i));
      out(i, i) += -inflow - outflow;
      out(i, q) += l(i) * x(i);
    }
    return out;
  };
  s.jac_lambda = [=](const Vector&, const Vector& x) {
    Matrix out = Matrix::Zero(n, n);
    for (int i = 0; i < n; ++i) {
      const int p = prev(i), q = next(i);
      out(i, p) += x(p) * (1.0 - x(i));
      out(i, i) += -x(i) * (1.0 - x(q));
    }
    return out;
  };
  s.h = [](const Vector& x) { return Vector::Constant(1, x.sum()); };
  s.jac_h = [n](const Vector&) { return Matrix::Ones(1, n); };
  s.hess_h = [n](const Vector&) { return std::vector<Matrix>{Matrix::Zero(n, n)}; };
  s.domain.lower = Vector::Zero(n);
  s.domain.upper = Vector::Ones(n);
  s.parameters = {Vector::Zero(n), Vector::Constant(n, inf), Vector::Constant(n, 0.2),
                  Vector::Constant(n, 3.0)};
  return s;
}

} // namespace builtins

/// Built-in registry: "planar", "example2", "rfmr" (size parameter "n" >= 3).
inline SystemSpec builtin(const std::string& name, const std::map<std::string, int>& size_params = {}) {
  if (name == "planar" || name == "example2") {
    if (!size_params.empty()) throw InputError("builtin '" + name + "' takes no size parameters");
    return name == "planar" ? builtins::planar() : builtins::example2();
  }
  if (name == "rfmr") {
    const auto it = size_params.find("n");
    if (it == size_params.end()) throw InputError("builtin 'rfmr' needs size parameter n");
    for (const auto& [key, value] : size_params) {
      if (key != "n") throw InputError("builtin 'rfmr': unknown size parameter '" + key + "'");
    }
    return builtins::rfmr(it->second);
  }
  throw InputError("unknown builtin system '" + name + "'");
}

} // namespace eqb
