#include <gtest/gtest.h>

#include <random>

#include <eqbundle/linalg.hpp>
#include <eqbundle/system.hpp>

using namespace eqb;

namespace {

PointState at(std::initializer_list<double> lambda, std::initializer_list<double> x) {
  PointState u{Vector(static_cast<Eigen::Index>(lambda.size())), Vector(static_cast<Eigen::Index>(x.size()))};
  Eigen::Index i = 0;
  for (double v : lambda) u.lambda(i++) = v;
  i = 0;
  for (double v : x) u.x(i++) = v;
  return u;
}

SystemSpec without_derivatives(SystemSpec s) {
  s.jac_x = nullptr;
  s.jac_lambda = nullptr;
  s.jac_h = nullptr;
  s.hess_h = nullptr;
  return s;
}

std::vector<SystemSpec> all_builtins() {
  return {builtin("planar"), builtin("example2"), builtin("rfmr", {{"n", 3}}), builtin("rfmr", {{"n", 5}})};
}

} // namespace

TEST(Evaluate, Example2AtUnitPoint) {
  const Evaluation ev = evaluate(builtin("example2"), at({1}, {1, 1, 1}));
  EXPECT_EQ(ev.f_value, Vector::Zero(3));
  const Matrix expected{{1, 0, -1}, {-1, 0, 1}, {0, 0, 0}};
  EXPECT_EQ(ev.jac_x, expected);
  EXPECT_EQ(ev.derivative_source, DerivativeSource::analytic);
}

TEST(Evaluate, RfmrSymmetricState) {
  const Evaluation ev = evaluate(builtin("rfmr", {{"n", 3}}), at({1, 1, 1}, {0.5, 0.5, 0.5}));
  EXPECT_EQ(ev.f_value, Vector::Zero(3));
  ASSERT_EQ(ev.h_value.size(), 1);
  EXPECT_EQ(ev.h_value(0), 1.5);
}

TEST(Evaluate, PlanarOrigin) {
  const Evaluation ev = evaluate(builtin("planar"), at({0.5}, {0, 0}));
  EXPECT_EQ(ev.f_value(0), -0.5);
  EXPECT_EQ(ev.f_value(1), 0.0);
  EXPECT_EQ(ev.h_value(0), 0.0);
}

TEST(Evaluate, FiniteDifferenceSourceRecorded) {
  const Evaluation ev = evaluate(without_derivatives(builtin("planar")), at({0.5}, {0, 0}));
  EXPECT_EQ(ev.derivative_source, DerivativeSource::finite_difference);
}

TEST(Evaluate, RejectsPointsOutsideDomain) {
  EXPECT_THROW(evaluate(builtin("planar"), at({0.5}, {0.9, 0.9})), DomainError);
  EXPECT_THROW(evaluate(builtin("planar"), at({1.5}, {0, 0})), DomainError);
  // within the boundary slack
  EXPECT_NO_THROW(evaluate(builtin("planar"), at({0.5}, {0, 1.0 + 1e-12})));
}

TEST(Evaluate, NonFiniteEvaluatorIsReported) {
  SystemSpec s = builtin("planar");
  s.f = [](const Vector&, const Vector&) { return Vector{{std::nan(""), 0.0}}; };
  try {
    evaluate(s, at({0.5}, {0.1, 0.2}));
    FAIL() << "expected EvaluationError";
  } catch (const EvaluationError& e) {
    EXPECT_NE(std::string(e.what()).find("0.1"), std::string::npos) << e.what();
  }
}

TEST(FirstIntegral, RfmrTelescopes) {
  EXPECT_LT(check_first_integral_identity(builtin("rfmr", {{"n", 4}}), 200, 1).max_residual, 1e-12);
}

TEST(FirstIntegral, Example2Cancels) {
  EXPECT_LT(check_first_integral_identity(builtin("example2"), 200, 2).max_residual, 1e-12);
}

TEST(FirstIntegral, PlanarExactlyZero) {
  EXPECT_EQ(check_first_integral_identity(builtin("planar"), 200, 3).max_residual, 0.0);
}

TEST(FirstIntegral, DeterministicGivenSeed) {
  const SystemSpec s = builtin("example2");
  const IdentityCheck a = check_first_integral_identity(s, 50, 9);
  const IdentityCheck b = check_first_integral_identity(s, 50, 9);
  EXPECT_EQ(a.max_residual, b.max_residual);
  EXPECT_EQ(a.worst.x, b.worst.x);
}

TEST(Builtin, RfmrDiagonalIsEquilibrium) {
  const Evaluation ev = evaluate(builtin("rfmr", {{"n", 3}}), at({1, 1, 1}, {0.3, 0.3, 0.3}));
  EXPECT_LE(ev.f_value.norm(), 1e-16);
}

TEST(Builtin, Example2IntegralGradients) {
  const Evaluation ev = evaluate(builtin("example2"), at({1}, {1, 1, 1}));
  EXPECT_EQ(ev.jac_h.row(0), (Vector{{2.0, 2.0, 2.0}}).transpose());
  EXPECT_EQ(ev.jac_h.row(1), (Vector{{8.0, 8.0, 0.5}}).transpose());
  EXPECT_EQ(numeric_rank(ev.jac_h).rank, 2);
}

TEST(Builtin, PlanarBoundaryTangency) {
  const SystemSpec s = builtin("planar");
  for (double y : {-1.0, 1.0}) {
    for (double lam : {0.1, 0.5, 0.9}) {
      const Evaluation ev = evaluate(s, at({lam}, {0, y}));
      EXPECT_EQ(ev.f_value, Vector::Zero(2));
    }
  }
}

TEST(Builtin, RegistryErrors) {
  EXPECT_THROW(builtin("lorenz"), InputError);
  EXPECT_THROW(builtin("rfmr", {{"n", 2}}), InputError);
  EXPECT_THROW(builtin("rfmr"), InputError);
  EXPECT_THROW(builtin("planar", {{"n", 3}}), InputError);
}

TEST(Builtin, RfmrColumnsSumToZero) {
  std::mt19937_64 rng(21);
  for (int n : {3, 4, 6}) {
    const SystemSpec s = builtin("rfmr", {{"n", n}});
    for (int trial = 0; trial < 100; ++trial) {
      const PointState u = sample_point(s, rng);
      const Matrix j = evaluate(s, u).jac_x;
      const double scale = j.cwiseAbs().maxCoeff();
      EXPECT_LE(j.colwise().sum().cwiseAbs().maxCoeff(), 4.0 * machine_eps * scale);
    }
  }
}

TEST(Builtin, FiniteDifferencesMatchAnalytic) {
  std::mt19937_64 rng(42);
  for (const SystemSpec& s : all_builtins()) {
    const SystemSpec fd = without_derivatives(s);
    for (int trial = 0; trial < 100; ++trial) {
      PointState u = sample_point(s, rng);
      const Evaluation a = evaluate(s, u, std::numeric_limits<double>::infinity());
      const Evaluation b = evaluate(fd, u, std::numeric_limits<double>::infinity());
      auto rel = [](const Matrix& x, const Matrix& y) { return (x - y).norm() / std::max(1.0, y.norm()); };
      EXPECT_LE(rel(b.jac_x, a.jac_x), 1e-6) << s.name;
      EXPECT_LE(rel(b.jac_lambda, a.jac_lambda), 1e-6) << s.name;
      EXPECT_LE(rel(b.jac_h, a.jac_h), 1e-6) << s.name;
      for (int l = 0; l < s.k; ++l) {
        EXPECT_LE(rel(b.hess_h[l], a.hess_h[l]), 1e-5) << s.name;
      }
    }
  }
}

TEST(Builtin, IntegralGradientsIndependent) {
  std::mt19937_64 rng(8);
  for (const SystemSpec& s : all_builtins()) {
    int checked = 0;
    while (checked < 100) {
      const PointState u = sample_point(s, rng);
      // example2 loses rank on the plane z = 0 and the line x = y = 0
      if (s.name == "example2" && (std::abs(u.x(2)) < 1e-3 || std::hypot(u.x(0), u.x(1)) < 1e-3)) continue;
      EXPECT_EQ(numeric_rank(evaluate(s, u).jac_h).rank, s.k) << s.name;
      ++checked;
    }
  }
}

TEST(Domain, BoundaryDistance) {
  const SystemSpec p = builtin("planar");
  // disk term |x^2 + y^2 - 1| / |2 (x, y)| beats the box faces here
  EXPECT_NEAR(p.domain.boundary_distance(Vector{{0.6, 0.6}}), 0.28 / (2.0 * std::sqrt(0.72)), 1e-15);
  EXPECT_NEAR(p.domain.boundary_distance(Vector{{0.0, 1.0}}), 0.0, 1e-15);
  const SystemSpec r = builtin("rfmr", {{"n", 3}});
  EXPECT_NEAR(r.domain.boundary_distance(Vector{{0.2, 0.5, 0.7}}), 0.2, 1e-15);
  EXPECT_NEAR(r.domain.boundary_distance(Vector{{1.0, 1.0, 1.0}}), 0.0, 1e-15);
}
