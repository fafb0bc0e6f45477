#pragma once

// Monodromy of the nonzero spectrum of df/dx along closed loops.
//
// At a non-degenerate equilibrium df/dx has exactly k zero eigenvalues; the
// remaining p = n - k are followed continuously around a loop. The result is
// the pair (sigma, m): where each track ends up, and how many times it wound
// around 0 on the way.

#include <algorithm>
#include <cmath>
#include <complex>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "audit.hpp"
#include "finder.hpp"
#include "linalg.hpp"
#include "system.hpp"
#include "tolerances.hpp"

namespace eqb {

struct SpectrumSplit {
  ComplexList zeros;    // the k smallest in modulus
  ComplexList nonzeros; // the other p, in eigen_dense order
  double tol_zero = 0.0;
  double gap_ratio = std::numeric_limits<double>::infinity();
  double scale = 0.0; // ||J||_2
  bool reliable = true;
};

inline nlohmann::json complex_json(const Complex& c) { return nlohmann::json::array({c.real(), c.imag()}); }

inline nlohmann::json complex_json(const ComplexList& cs) {
  nlohmann::json out = nlohmann::json::array();
  for (const Complex& c : cs) out.push_back(complex_json(c));
  return out;
}

inline void to_json(nlohmann::json& j, const SpectrumSplit& s) {
  j = {{"zeros", complex_json(s.zeros)},   {"nonzeros", complex_json(s.nonzeros)},
       {"tol_zero", s.tol_zero},            {"gap_ratio", s.gap_ratio},
       {"reliable", s.reliable}};
}

/// Classifies the k smallest-modulus eigenvalues as the structural zeros.
///
/// tol_zero defaults to tols.zero * ||J||_2. The spectral norm bounds the
/// spectral radius and agrees with it for normal J, but unlike the radius it
/// does not collapse to 0 on nilpotent Jacobians.
inline SpectrumSplit split_spectrum(const Matrix& j, int k, const Tolerances& tols = {},
                                    std::optional<double> tol_zero = std::nullopt) {
  if (j.rows() != j.cols()) throw InputError("split_spectrum: matrix must be square");
  if (k < 0 || k > j.rows()) throw InputError("split_spectrum: k must lie in [0, n]");
  const ComplexList ev = eigen_dense(j);
  SpectrumSplit out;
  out.scale = j.size() ? Eigen::JacobiSVD<Matrix>(j).singularValues()(0) : 0.0;
  out.tol_zero = tol_zero.value_or(tols.zero * out.scale);

  std::vector<std::size_t> order(ev.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return std::abs(ev[a]) < std::abs(ev[b]); });
  std::vector<bool> is_zero(ev.size(), false);
  for (int i = 0; i < k; ++i) is_zero[order[i]] = true;

  double largest_zero = 0.0, smallest_nonzero = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < ev.size(); ++i) {
    if (is_zero[i]) {
      out.zeros.push_back(ev[i]);
      largest_zero = std::max(largest_zero, std::abs(ev[i]));
    } else {
      out.nonzeros.push_back(ev[i]);
      smallest_nonzero = std::min(smallest_nonzero, std::abs(ev[i]));
    }
  }
  const double floor = std::max(std::numeric_limits<double>::epsilon() * out.scale,
                                std::numeric_limits<double>::min());
  out.gap_ratio = smallest_nonzero / std::max(largest_zero, floor);
  out.reliable = largest_zero <= out.tol_zero && out.gap_ratio >= tols.gap_ratio;
  return out;
}

/// Minimum-cost perfect assignment (Hungarian method, O(p^3)); result[row] = column.
inline std::vector<int> min_cost_assignment(const Matrix& cost) {
  const int n = static_cast<int>(cost.rows());
  if (cost.cols() != n) throw InputError("min_cost_assignment: cost matrix must be square");
  const double big = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, big);
    std::vector<bool> used(n + 1, false);
    do {
      used[j0] = true;
      const int i0 = p[j0];
      double delta = big;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> out(n, -1);
  for (int j = 1; j <= n; ++j) out[p[j] - 1] = j - 1;
  return out;
}

/// A closed loop of matrices: segment i in [0, segments), s in [0, 1].
/// loop(segments - 1, 1) must equal loop(0, 0).
using MatrixLoop = std::function<Matrix(int segment, double s)>;

struct TrackOptions {
  Tolerances tols;
  double initial_step = 1.0; // in units of one segment
  double min_step = 1e-12;
  long max_evaluations = 2'000'000;
  bool keep_trace = false;
};

struct EigenLoopReport {
  int p = 0;
  int k = 0;
  std::vector<int> permutation; // 0-based: track i ends where track permutation[i] started
  std::vector<int> windings;
  std::vector<int> crossings;
  int product_winding = 0;
  double min_distance_to_zero = std::numeric_limits<double>::infinity();
  long samples_used = 0; // accepted samples on the loop, start included
  long evaluations = 0;
  long rejected_steps = 0;
  ComplexList start_values;
  std::vector<std::string> flags;
  // accepted samples (loop parameter, track values) when TrackOptions::keep_trace
  std::vector<double> trace_tau;
  std::vector<ComplexList> trace_values;

  bool has_flag(const std::string& f) const { return std::find(flags.begin(), flags.end(), f) != flags.end(); }
};

inline void to_json(nlohmann::json& j, const EigenLoopReport& r) {
  j = {{"permutation", r.permutation},
       {"windings", r.windings},
       {"crossings", r.crossings},
       {"min_distance_to_zero", r.min_distance_to_zero},
       {"samples_used", r.samples_used},
       {"flags", r.flags},
       {"product_winding", r.product_winding},
       {"evaluations", r.evaluations},
       {"rejected_steps", r.rejected_steps},
       {"start_values", complex_json(r.start_values)}};
}

namespace detail {

inline constexpr double kPi = 3.14159265358979323846;

// Order used for track labels: real part then imaginary part, both descending,
// with differences below tol treated as ties.
inline int compare_desc(const Complex& a, const Complex& b, double tol) {
  if (std::abs(a.real() - b.real()) > tol) return a.real() > b.real() ? -1 : 1;
  if (std::abs(a.imag() - b.imag()) > tol) return a.imag() > b.imag() ? -1 : 1;
  return 0;
}

inline int sign_of(double v) { return (v > 0) - (v < 0); }

class LoopTracker {
public:
  LoopTracker(MatrixLoop loop, int segments, int k, TrackOptions opts)
      : loop_(std::move(loop)), segments_(segments), k_(k), opts_(std::move(opts)) {}

  EigenLoopReport run() {
    if (segments_ < 1) throw InputError("track_matrix_loop: a loop needs at least two samples");
    const Observation first = observe(0, 0.0);
    report_.k = k_;
    report_.p = static_cast<int>(first.values.size());
    p_ = report_.p;
    start_ = first.values;
    cur_ = first.values;
    tau_cur_ = 0.0;
    arg_sum_.assign(p_, 0.0);
    crossings_.assign(p_, 0);
    re_sign_.resize(p_);
    for (int i = 0; i < p_; ++i) re_sign_[i] = sign_of(cur_[i].real());
    prod_ = product(cur_);
    record_sample(0.0, cur_);
    if (p_ == 0) return finish_empty();

    for (int seg = 0; seg < segments_; ++seg) march(seg, 1.0, true);

    // Continue into the first segment up to the first accepted sample; the
    // values there identify where each track ended.
    const std::vector<double> loop_args = arg_sum_;
    const double loop_prod_arg = prod_arg_;
    march(0, first_s_, false);
    report_.permutation = match_end(first.scale);

    report_.windings.resize(p_);
    int sum = 0;
    bool integral = true;
    for (int i = 0; i < p_; ++i) {
      const double turns = (loop_args[i] + std::arg(start_[i]) - std::arg(start_[report_.permutation[i]])) / (2 * kPi);
      report_.windings[i] = static_cast<int>(std::lround(turns));
      integral &= std::abs(turns - report_.windings[i]) <= 1e-3;
      sum += report_.windings[i];
    }
    report_.product_winding = static_cast<int>(std::lround(loop_prod_arg / (2 * kPi)));
    if (!integral) add_flag("winding_not_integral");
    if (sum != report_.product_winding) add_flag("winding_sum_mismatch");
    report_.crossings = crossings_;
    report_.start_values = start_;
    return report_;
  }

private:
  struct Observation {
    ComplexList values;
    double scale = 0.0;
  };

  struct Step {
    ComplexList values;
    std::vector<double> dargs;
    double dprod = 0.0;
  };

  Observation observe(int seg, double s) {
    if (++report_.evaluations > opts_.max_evaluations) {
      throw ResolutionError("track_matrix_loop: evaluation budget exhausted",
                            nlohmann::json{{"segment", seg}, {"s", s}});
    }
    const Matrix j = loop_(seg, s);
    if (j.rows() != j.cols()) throw InputError("track_matrix_loop: matrices must be square");
    if (n_ < 0) n_ = static_cast<int>(j.rows());
    if (j.rows() != n_) throw InputError("track_matrix_loop: matrix size changes along the loop");
    // tol_zero is taken against the largest ||J|| seen so far on the loop, so a
    // family that shrinks to 0 (e.g. 1x1) cannot hide a zero crossing.
    const double local = j.size() ? Eigen::JacobiSVD<Matrix>(j).singularValues()(0) : 0.0;
    scale_ref_ = std::max(scale_ref_, local);
    const SpectrumSplit split = split_spectrum(j, k_, opts_.tols, opts_.tols.zero * scale_ref_);
    if (!split.reliable) add_flag("split_unreliable");
    for (const Complex& mu : split.nonzeros) {
      if (std::abs(mu) <= split.tol_zero) {
        throw DegeneracyError("track_matrix_loop: a tracked eigenvalue reached 0 at segment " + std::to_string(seg) +
                                  ", s = " + std::to_string(s) + "; winding undefined, path leaves C*",
                              nlohmann::json{{"segment", seg},
                                             {"s", s},
                                             {"modulus", std::abs(mu)},
                                             {"tol_zero", split.tol_zero},
                                             {"split", split}});
      }
    }
    return {split.nonzeros, split.scale};
  }

  static Complex product(const ComplexList& v) {
    Complex p(1.0, 0.0);
    for (const Complex& c : v) p *= c;
    return p;
  }

  std::optional<Step> try_step(const Observation& obs, double dtau) const {
    ComplexList pred(p_);
    for (int i = 0; i < p_; ++i) {
      pred[i] = cur_[i];
      if (has_prev_) pred[i] += (cur_[i] - prev_[i]) * (dtau / (tau_cur_ - tau_prev_));
    }
    Matrix cost(p_, p_);
    for (int i = 0; i < p_; ++i) {
      for (int j = 0; j < p_; ++j) cost(i, j) = std::abs(pred[i] - obs.values[j]);
    }
    const std::vector<int> asg = min_cost_assignment(cost);
    Step step;
    step.values.resize(p_);
    double err = 0.0;
    for (int i = 0; i < p_; ++i) {
      step.values[i] = obs.values[asg[i]];
      err = std::max(err, cost(i, asg[i]));
    }
    // Pairs in collision (indistinguishable both before and after) carry no
    // labelling information and are left to the extrapolation.
    const double collision = opts_.tols.collision * (1.0 + obs.scale);
    double gap = std::numeric_limits<double>::infinity();
    for (int a = 0; a < p_; ++a) {
      for (int b = a + 1; b < p_; ++b) {
        const double d = std::abs(step.values[a] - step.values[b]);
        if (std::abs(pred[a] - pred[b]) > collision && d > collision) gap = std::min(gap, d);
      }
    }
    if (err > 0.5 * gap) return std::nullopt;
    step.dargs.resize(p_);
    for (int i = 0; i < p_; ++i) {
      step.dargs[i] = std::arg(step.values[i] / cur_[i]);
      if (std::abs(step.dargs[i]) >= kPi / 2) return std::nullopt;
    }
    step.dprod = std::arg(product(step.values) / prod_);
    if (std::abs(step.dprod) >= kPi / 2) return std::nullopt;
    return step;
  }

  // Walks segment seg from s = 0 to s_end. On the loop proper (on_loop) the
  // accepted steps accumulate windings and crossings.
  void march(int seg, double s_end, bool on_loop) {
    const double base = on_loop ? seg : segments_;
    double s = 0.0;
    while (s < s_end) {
      double s_next = std::min(s_end, s + ds_);
      if (s_end - s_next < 1e-14) s_next = s_end;
      const Observation obs = observe(seg, s_next);
      const std::optional<Step> step = try_step(obs, base + s_next - tau_cur_);
      if (!step) {
        ++report_.rejected_steps;
        ds_ = 0.5 * (s_next - s);
        if (ds_ < opts_.min_step) {
          throw ResolutionError("track_matrix_loop: refinement budget exhausted near segment " + std::to_string(seg) +
                                    ", s = " + std::to_string(s),
                                nlohmann::json{{"segment", seg}, {"s", s}, {"values", complex_json(cur_)}});
        }
        continue;
      }
      accept(*step, base + s_next, on_loop);
      s = s_next;
      ds_ = std::min(opts_.initial_step, 2.0 * ds_);
      if (!have_first_) {
        have_first_ = true;
        first_s_ = s;
        relabel(obs.scale);
        first_values_ = cur_;
      }
    }
  }

  void accept(const Step& step, double tau, bool on_loop) {
    prev_ = cur_;
    tau_prev_ = tau_cur_;
    has_prev_ = true;
    cur_ = step.values;
    tau_cur_ = tau;
    prod_ = product(cur_);
    if (!on_loop) return;
    prod_arg_ += step.dprod;
    for (int i = 0; i < p_; ++i) {
      arg_sum_[i] += step.dargs[i];
      const int sg = sign_of(cur_[i].real());
      if (sg != 0) {
        if (re_sign_[i] != 0 && sg != re_sign_[i]) ++crossings_[i];
        re_sign_[i] = sg;
      }
    }
    record_sample(tau, cur_);
  }

  void record_sample(double tau, const ComplexList& values) {
    ++report_.samples_used;
    for (const Complex& c : values) report_.min_distance_to_zero = std::min(report_.min_distance_to_zero, std::abs(c));
    if (opts_.keep_trace) {
      report_.trace_tau.push_back(tau);
      report_.trace_values.push_back(values);
    }
  }

  // Track labels follow the start values in descending (re, im) order; tracks
  // that start in collision are ordered by where they go first.
  void relabel(double scale) {
    const double tol = opts_.tols.collision * (1.0 + scale);
    std::vector<int> order(p_);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      const int c = compare_desc(start_[a], start_[b], tol);
      if (c != 0) return c < 0;
      return compare_desc(cur_[a], cur_[b], 0.0) < 0;
    });
    auto apply = [&](auto& v) {
      auto copy = v;
      for (int i = 0; i < p_; ++i) v[i] = copy[order[i]];
    };
    apply(start_);
    apply(cur_);
    apply(prev_);
    apply(arg_sum_);
    apply(crossings_);
    apply(re_sign_);
    if (opts_.keep_trace) {
      for (ComplexList& row : report_.trace_values) apply(row);
    }
  }

  std::vector<int> match_end(double scale) const {
    const double tol = opts_.tols.collision * (1.0 + scale);
    Matrix cost(p_, p_);
    for (int i = 0; i < p_; ++i) {
      for (int j = 0; j < p_; ++j) cost(i, j) = std::abs(cur_[i] - first_values_[j]) + (i == j ? 0.0 : 1e-3 * tol);
    }
    const std::vector<int> sigma = min_cost_assignment(cost);
    for (int i = 0; i < p_; ++i) {
      if (cost(i, sigma[i]) > tol) {
        throw ResolutionError("track_matrix_loop: tracks do not return to the start set; the loop may not close",
                              nlohmann::json{{"track", i}, {"mismatch", cost(i, sigma[i])}});
      }
    }
    return sigma;
  }

  EigenLoopReport finish_empty() {
    report_.product_winding = 0;
    report_.start_values = start_;
    return report_;
  }

  void add_flag(const std::string& f) {
    if (!report_.has_flag(f)) report_.flags.push_back(f);
  }

  MatrixLoop loop_;
  int segments_;
  int k_;
  TrackOptions opts_;
  int n_ = -1;
  int p_ = 0;
  double scale_ref_ = 0.0;
  EigenLoopReport report_;
  ComplexList start_, cur_, prev_, first_values_;
  double tau_cur_ = 0.0, tau_prev_ = 0.0;
  bool has_prev_ = false;
  bool have_first_ = false;
  double first_s_ = 1.0;
  double ds_ = 1.0;
  std::vector<double> arg_sum_;
  double prod_arg_ = 0.0;
  Complex prod_{1.0, 0.0};
  std::vector<int> crossings_, re_sign_;
};

} // namespace detail

/// Tracks the nonzero spectrum around a loop given as a generator.
inline EigenLoopReport track_matrix_loop(const MatrixLoop& loop, int segments, int k, const TrackOptions& opts = {}) {
  detail::LoopTracker tracker(loop, segments, k, opts);
  return tracker.run();
}

/// Tracks along the closed sequence js, refining by linear blends between
/// consecutive matrices. The last matrix must equal the first (up to
/// 1e-12 relative); it is replaced by the first exactly.
inline EigenLoopReport track_matrix_loop(const std::vector<Matrix>& js, int k, const TrackOptions& opts = {}) {
  if (js.size() < 2) throw InputError("track_matrix_loop: a loop needs at least two matrices");
  for (const Matrix& j : js) {
    if (j.rows() != js.front().rows() || j.cols() != js.front().cols()) {
      throw InputError("track_matrix_loop: all matrices must have the same shape");
    }
    require_finite(j, "track_matrix_loop");
  }
  const double scale = 1.0 + js.front().cwiseAbs().maxCoeff();
  if ((js.back() - js.front()).cwiseAbs().maxCoeff() > 1e-12 * scale) {
    throw InputError("track_matrix_loop: loop must close (first and last matrices differ)");
  }
  const int segments = static_cast<int>(js.size()) - 1;
  auto at = [&js, segments](int i) -> const Matrix& { return i == segments ? js.front() : js[i]; };
  MatrixLoop loop = [&](int seg, double s) -> Matrix {
    if (s == 0.0) return at(seg);
    if (s == 1.0) return at(seg + 1);
    return (1.0 - s) * at(seg) + s * at(seg + 1);
  };
  return track_matrix_loop(loop, segments, k, opts);
}

struct FiberLoopOptions {
  TrackOptions track;
  NewtonOptions newton;
};

/// Eigenvalue monodromy of df/dx(lambda, .) along a closed loop on E_lambda.
/// Intermediate points are linear blends of consecutive loop points, moved
/// back onto E_lambda by Newton at the interpolated first-integral level.
inline EigenLoopReport eigen_along_fiber_loop(const SystemSpec& sys, const Vector& lambda,
                                              const std::vector<Vector>& points, const FiberLoopOptions& opts = {}) {
  if (points.size() < 2) throw InputError("eigen_along_fiber_loop: a loop needs at least two points");
  if (lambda.size() != sys.m) throw InputError("eigen_along_fiber_loop: lambda dimension does not match m");
  for (const Vector& x : points) {
    if (x.size() != sys.n) throw InputError("eigen_along_fiber_loop: point dimension does not match n");
  }
  if ((points.back() - points.front()).norm() > 1e-12 * (1.0 + points.front().norm())) {
    throw InputError("eigen_along_fiber_loop: loop must close (first point differs from last)");
  }
  const Tolerances& tols = opts.newton.tols;
  std::vector<Vector> levels;
  for (std::size_t i = 0; i < points.size(); ++i) {
    const Evaluation ev = evaluate(sys, {lambda, points[i]}, tols.slack, false);
    if (ev.f_value.norm() > equilibrium_threshold(points[i], tols)) {
      throw InputError("eigen_along_fiber_loop: loop point " + std::to_string(i) + " is not an equilibrium (||f|| = " +
                           std::to_string(ev.f_value.norm()) + ")",
                       nlohmann::json{{"index", i}, {"x", to_std(points[i])}, {"residual_f", ev.f_value.norm()}});
    }
    levels.push_back(ev.h_value);
  }
  const int segments = static_cast<int>(points.size()) - 1;
  auto point = [&](int i) -> const Vector& { return i == segments ? points.front() : points[i]; };
  auto level = [&](int i) -> const Vector& { return i == segments ? levels.front() : levels[i]; };
  MatrixLoop loop = [&](int seg, double s) -> Matrix {
    Vector x;
    if (s == 0.0) {
      x = point(seg);
    } else if (s == 1.0) {
      x = point(seg + 1);
    } else {
      const Vector a = (1.0 - s) * level(seg) + s * level(seg + 1);
      x = newton_solve(sys, lambda, a, (1.0 - s) * point(seg) + s * point(seg + 1), opts.newton).x;
    }
    return evaluate(sys, {lambda, x}, tols.slack, false).jac_x;
  };
  return track_matrix_loop(loop, segments, sys.k, opts.track);
}

struct StabilitySignature {
  std::vector<int> bounds;
  std::vector<int> observed;
  std::vector<bool> flagged;
  bool any_flag() const { return std::find(flagged.begin(), flagged.end(), true) != flagged.end(); }
};

inline void to_json(nlohmann::json& j, const StabilitySignature& s) {
  j = {{"bounds", s.bounds}, {"observed", s.observed}, {"flagged", s.flagged}};
}

/// Per track: max(2|m_i|, observed crossings), flagged when the observed
/// count exceeds the winding bound 2|m_i|.
inline StabilitySignature stability_signature(const EigenLoopReport& r) {
  if (r.windings.size() != r.crossings.size()) throw InputError("stability_signature: windings and crossings differ in length");
  StabilitySignature out;
  for (std::size_t i = 0; i < r.windings.size(); ++i) {
    const int bound = 2 * std::abs(r.windings[i]);
    out.observed.push_back(r.crossings[i]);
    out.bounds.push_back(std::max(bound, r.crossings[i]));
    out.flagged.push_back(r.crossings[i] > bound);
  }
  return out;
}

} // namespace eqb
