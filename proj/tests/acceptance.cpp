// Acceptance runner: one PASS/FAIL line per criterion, nonzero exit on failure.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <eqbundle/eqbundle.hpp>

#include "fixtures.hpp"
#include "oracles.hpp"

using namespace eqb;
using fixture::vec;

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;

struct Verdict {
  bool pass = true;
  std::ostringstream note;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      note << what << "; ";
    }
  }
};

std::vector<SystemSpec> builtins_all() {
  return {builtin("planar"), builtin("example2"), builtin("rfmr", {{"n", 3}})};
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

void first_integral(Verdict& v) {
  for (const SystemSpec& s : builtins_all()) {
    const double worst = check_first_integral_identity(s, 200, 2024).max_residual;
    v.require(worst < 1e-10, s.name + " max |f.grad h| = " + num(worst));
  }
}

void prop21(Verdict& v) {
  std::mt19937_64 rng(2024);
  for (const SystemSpec& s : builtins_all()) {
    double worst = 0.0;
    for (int i = 0; i < 200; ++i) worst = std::max(worst, check_prop21(s, sample_point(s, rng)));
    v.require(worst < 1e-8, s.name + " residual " + num(worst));
  }
  const double hand = check_prop21(builtin("example2"), {vec({1}), vec({0, 1, 1})});
  v.require(hand < 1e-12, "example2 hand point residual " + num(hand));
}

void dimension(Verdict& v) {
  const std::vector<std::pair<SystemSpec, std::pair<Vector, Vector>>> cases = {
      {builtin("planar"), {vec({0.5}), vec({0})}},
      {builtin("example2"), {vec({1}), vec({2, 6})}},
      {builtin("rfmr", {{"n", 3}}), {vec({1, 1, 1}), vec({1.5})}},
  };
  for (const auto& [s, at] : cases) {
    const auto pts = enumerate_level_points(s, at.first, at.second, 200, 1);
    v.require(!pts.empty(), s.name + " found no equilibria");
    std::vector<PointState> states;
    for (const auto& p : pts) states.push_back(p.state);
    for (const DimensionVerdict& d : audit_manifold_dimension(s, states)) {
      v.require(d.pass && d.full_jacobian_rank == s.n - s.k,
                s.name + " rank " + std::to_string(d.full_jacobian_rank));
    }
    if (s.name == "example2") {
      v.require(pts.size() == 4, "example2 level (2,6) has " + std::to_string(pts.size()) + " points");
      for (const auto& d : audit_manifold_dimension(s, states)) v.require(d.full_jacobian_rank == 1, "example2 rank");
    }
  }
}

void fiber_topology(Verdict& v) {
  const FiberTrace p = trace_fiber(builtin("planar"), vec({0.5}), vec({-0.5, 0}));
  v.require(p.topology == FiberTopology::segment, "planar fiber is not a segment");
  for (const Vector* e : {&p.points.front(), &p.points.back()}) {
    v.require(std::abs(e->norm() - 1.0) <= 1e-6, "planar endpoint off the unit circle by " + num(e->norm() - 1.0));
  }
  const FiberTrace r = trace_fiber(builtin("rfmr", {{"n", 3}}), vec({1, 1, 1}), vec({0.5, 0.5, 0.5}));
  v.require(r.topology == FiberTopology::segment, "rfmr fiber is not a segment");
  double off_diagonal = 0.0;
  for (const Vector& x : r.points) off_diagonal = std::max(off_diagonal, (x - Vector::Constant(3, x.mean())).norm());
  v.require(off_diagonal <= 1e-8, "rfmr fiber leaves the diagonal by " + num(off_diagonal));
  const Vector a = r.points.front(), b = r.points.back();
  const double ends = std::min(std::max(a.norm(), (b - Vector::Ones(3)).norm()),
                               std::max(b.norm(), (a - Vector::Ones(3)).norm()));
  v.require(ends <= 1e-6, "rfmr endpoints miss the corners by " + num(ends));
}

void intersection_count(Verdict& v) {
  const double r = std::sqrt(3.0);
  std::size_t grid_count = 0;
  for (double lambda : {1.0, 2.0}) {
    const auto grid = oracle::grid_roots(
        [lambda](const oracle::Point3& p) { return oracle::example2_level_residual(p, lambda, 2.0, 6.0); },
        {-r, -r, -r}, {r, r, r}, 120, 0.5, 0.2);
    grid_count = grid.size();
    v.require(grid_count == 4, "grid oracle found " + std::to_string(grid_count));
    const auto pts = enumerate_level_points(builtin("example2"), vec({lambda}), vec({2, 6}), 200, 1);
    v.require(pts.size() == grid_count, "lambda " + num(lambda) + ": " + std::to_string(pts.size()) + " points");
  }
}

void transport_accuracy(Verdict& v) {
  const SystemSpec planar = builtin("planar");
  const TransportResult t = lift_curve(planar, ParamPath::segment(vec({0.5}), vec({0.9})), vec({-0.5, 0}));
  const double miss = (t.endpoint() - vec({-0.9, 0})).norm();
  v.require(miss <= 1e-8, "planar endpoint error " + num(miss));
  std::vector<TransportResult> lifts{t};
  lifts.push_back(lift_curve(planar, ParamPath{{vec({0.2}), vec({0.7}), vec({0.4})}}, vec({0.2 * (0.36 - 1), 0.6})));
  const SystemSpec rfmr = builtin("rfmr", {{"n", 3}});
  lifts.push_back(lift_curve(rfmr, ParamPath{{vec({1, 1, 1}), vec({2, 0.5, 1}), vec({0.4, 1.5, 2.5})}},
                             vec({0.5, 0.5, 0.5})));
  const auto e2 = oracle::example2_level_2_6();
  lifts.push_back(lift_curve(builtin("example2"), ParamPath::segment(vec({1}), vec({2})),
                             vec({e2[3][0], e2[3][1], e2[3][2]})));
  for (const TransportResult& l : lifts) {
    v.require(l.max_h_drift < 1e-8, "h drift " + num(l.max_h_drift));
    v.require(l.max_f_residual < 1e-8, "f residual " + num(l.max_f_residual));
  }
}

void holonomy(Verdict& v) {
  const ParamPath rect{{vec({1, 1, 1}), vec({2, 1, 1}), vec({2, 2.5, 1}), vec({1, 2.5, 1}), vec({1, 1, 1})}};
  const HolonomyReport r = holonomy_loop(builtin("rfmr", {{"n", 3}}), rect, vec({1.5}), 60, 1);
  v.require(!r.permutation.empty() && r.identity(), "rfmr permutation not identity");
  v.require(r.max_roundtrip_displacement <= 1e-6, "rfmr displacement " + num(r.max_roundtrip_displacement));
  const HolonomyReport p = holonomy_loop(builtin("planar"), ParamPath{{vec({0.5}), vec({0.9}), vec({0.5})}},
                                         vec({0}), 50, 1);
  v.require(!p.permutation.empty() && p.identity(), "planar permutation not identity");
  const HolonomyReport e = holonomy_loop(builtin("example2"), ParamPath{{vec({1}), vec({2}), vec({1})}},
                                         vec({2, 6}), 200, 1);
  v.require(e.permutation.size() == 4 && e.identity(), "example2 permutation not identity");
}

void cocycle(Verdict& v) {
  const CocycleReport p = check_cocycle(builtin("planar"), vec({0.5}), vec({0.7}), vec({0.9}), vec({-0.5, 0}));
  v.require(p.deviation < 1e-6, "planar deviation " + num(p.deviation));
  const CocycleReport r = check_cocycle(builtin("rfmr", {{"n", 3}}), vec({1, 1, 1}), vec({1.2, 0.9, 1}),
                                        vec({1.1, 1.3, 0.8}), vec({0.5, 0.5, 0.5}));
  v.require(r.deviation < 1e-6, "rfmr deviation " + num(r.deviation));
}

void submersion(Verdict& v) {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> g(0.0, 1.0);
  for (const SystemSpec& s : builtins_all()) {
    const auto eqs = fixture::sample_equilibria(s, 50, 12);
    v.require(eqs.size() == 50, s.name + " only " + std::to_string(eqs.size()) + " equilibria");
    double worst = 0.0;
    for (const PointState& u : eqs) {
      const ConnectionFrame f = connection_frame(s, u);
      Vector cx(s.m), cy(s.m);
      for (int i = 0; i < s.m; ++i) cx(i) = g(rng), cy(i) = g(rng);
      const Vector X = f.horizontal_basis * cx, Y = f.horizontal_basis * cy;
      worst = std::max(worst, std::abs(metric_g(f, X, Y) - f.base_part(X).dot(f.base_part(Y))));
    }
    v.require(worst < 1e-8, s.name + " defect " + num(worst));
  }
}

void monodromy(Verdict& v) {
  std::vector<Matrix> js;
  for (int i = 0; i <= 256; ++i) {
    const double s = kTwoPi * i / 256;
    js.push_back(Matrix{{0, 1}, {-1, 2 * std::cos(s)}});
  }
  const EigenLoopReport r = track_matrix_loop(js, 0);
  v.require(r.windings == std::vector<int>{1, -1}, "windings " + nlohmann::json(r.windings).dump());
  v.require(r.permutation == std::vector<int>{0, 1}, "permutation " + nlohmann::json(r.permutation).dump());
  v.require(r.crossings == std::vector<int>{2, 2}, "crossings " + nlohmann::json(r.crossings).dump());
  for (std::size_t i = 0; i < r.windings.size() && i < r.crossings.size(); ++i) {
    v.require(r.crossings[i] >= 2 * std::abs(r.windings[i]), "crossing bound violated");
  }
  int sum = 0;
  for (int m : r.windings) sum += m;
  v.require(sum == 0 && r.product_winding == 0, "winding sum " + std::to_string(sum));
  v.require(r.flags.empty(), "flags raised");
  v.require(!stability_signature(r).any_flag(), "signature flagged");
}

void degeneracy(Verdict& v) {
  const SystemSpec s = builtin("example2");
  std::vector<Vector> loop;
  for (int i = 0; i < 32; ++i) {
    const double t = kTwoPi / 4 + kTwoPi * i / 32;
    const double x = 1.145 + 0.05 * std::cos(t);
    loop.push_back(vec({x, 0.05 * std::sin(t), x}));
  }
  loop.push_back(loop.front());
  try {
    eigen_along_fiber_loop(s, vec({1}), loop);
    v.require(false, "crossing loop accepted");
  } catch (const DegeneracyError& e) {
    v.require(std::string(e.what()).find("path leaves C*") != std::string::npos, "wrong message: " + std::string(e.what()));
  }
  const AuditReport a = audit_point(s, {vec({1}), vec({1, 0, 1})});
  v.require(a.is_equilibrium, "audit point is not an equilibrium");
  v.require(!a.cond_iii.pass, "cond_iii passes");
}

void determinism(Verdict& v) {
  int seen = 0;
  for (const auto& entry : std::filesystem::directory_iterator(EQB_CONFIG_DIR)) {
    if (entry.path().extension() != ".json") continue;
    const std::string p = entry.path().string();
    const std::string a = io::dump(io::execute(io::load_config(p)).report);
    const std::string b = io::dump(io::execute(io::load_config(p)).report);
    v.require(a == b, entry.path().filename().string() + " differs between runs");
    ++seen;
  }
  v.require(seen > 0, "no configs found");
}

} // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<void(Verdict&)>>> criteria = {
      {"first-integral identity", first_integral},
      {"first-integral derivative identity", prop21},
      {"dimension of the equilibrium locus", dimension},
      {"fiber topology", fiber_topology},
      {"intersection count constancy", intersection_count},
      {"parallel transport accuracy", transport_accuracy},
      {"trivial holonomy", holonomy},
      {"cocycle law", cocycle},
      {"riemannian submersion", submersion},
      {"eigenvalue monodromy", monodromy},
      {"degeneracy detection", degeneracy},
      {"determinism", determinism},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Verdict v;
    try {
      criteria[i].second(v);
    } catch (const std::exception& e) {
      v.require(false, std::string("exception: ") + e.what());
    }
    std::printf("%s %2zu %s", v.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str());
    if (!v.pass) std::printf(" (%s)", v.note.str().c_str());
    std::printf("\n");
    failed += v.pass ? 0 : 1;
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
