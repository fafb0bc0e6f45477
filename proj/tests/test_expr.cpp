#include <gtest/gtest.h>

#include <cmath>
#include <optional>
#include <random>
#include <string>

#include <eqbundle/expr.hpp>

using namespace eqb;
using namespace eqb::expr;

namespace {

double eval(const std::string& src, int n, int m, std::initializer_list<double> lambda,
            std::initializer_list<double> x) {
  Vector l(static_cast<Eigen::Index>(lambda.size())), xv(static_cast<Eigen::Index>(x.size()));
  Eigen::Index i = 0;
  for (double v : lambda) l(i++) = v;
  i = 0;
  for (double v : x) xv(i++) = v;
  return eval_ast(parse(src, n, m), l, xv);
}

std::size_t parse_error_offset(const std::string& src, int n, int m) {
  try {
    parse(src, n, m);
  } catch (const ParseError& e) {
    return e.offset();
  }
  ADD_FAILURE() << "no parse error for " << src;
  return std::string::npos;
}

// Reference trees built directly by the test, rendered to text and evaluated
// without going through the library.
struct RefTree {
  enum Kind { num, xvar, lvar, neg, add, sub, mul, div, pow, fsin, fcos, fexp, flog, fsqrt, fabs_ } kind;
  double value = 0.0;
  int index = 0;
  std::vector<RefTree> kids;
};

RefTree random_tree(std::mt19937_64& rng, int depth, int n, int m) {
  std::uniform_int_distribution<int> pick(0, depth <= 0 ? 2 : 14);
  RefTree t;
  t.kind = static_cast<RefTree::Kind>(pick(rng));
  switch (t.kind) {
  case RefTree::num: {
    std::uniform_int_distribution<int> digits(0, 400);
    t.value = digits(rng) / 100.0;
    break;
  }
  case RefTree::xvar: t.index = std::uniform_int_distribution<int>(0, n - 1)(rng); break;
  case RefTree::lvar: t.index = std::uniform_int_distribution<int>(0, m - 1)(rng); break;
  case RefTree::add: case RefTree::sub: case RefTree::mul: case RefTree::div: case RefTree::pow:
    t.kids = {random_tree(rng, depth - 1, n, m), random_tree(rng, depth - 1, n, m)};
    break;
  default:
    t.kids = {random_tree(rng, depth - 1, n, m)};
  }
  return t;
}

std::string render(const RefTree& t, std::mt19937_64& rng) {
  const std::string sp = std::bernoulli_distribution(0.3)(rng) ? " " : "";
  auto bin = [&](const char* op) {
    return "(" + render(t.kids[0], rng) + sp + op + sp + render(t.kids[1], rng) + ")";
  };
  auto fn = [&](const char* name) { return std::string(name) + "(" + sp + render(t.kids[0], rng) + ")"; };
  switch (t.kind) {
  case RefTree::num: {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", t.value);
    return buf;
  }
  case RefTree::xvar: return "x" + std::to_string(t.index + 1);
  case RefTree::lvar: return "l" + std::to_string(t.index + 1);
  case RefTree::neg: return "(-" + sp + render(t.kids[0], rng) + ")";
  case RefTree::add: return bin("+");
  case RefTree::sub: return bin("-");
  case RefTree::mul: return bin("*");
  case RefTree::div: return bin("/");
  case RefTree::pow: return bin("^");
  case RefTree::fsin: return fn("sin");
  case RefTree::fcos: return fn("cos");
  case RefTree::fexp: return fn("exp");
  case RefTree::flog: return fn("log");
  case RefTree::fsqrt: return fn("sqrt");
  case RefTree::fabs_: return fn("abs");
  }
  return "";
}

// nullopt marks a domain violation
std::optional<double> reference_eval(const RefTree& t, const Vector& l, const Vector& x) {
  auto finite = [](double v) -> std::optional<double> {
    if (!std::isfinite(v)) return std::nullopt;
    return v;
  };
  std::optional<double> a, b;
  if (!t.kids.empty()) {
    a = reference_eval(t.kids[0], l, x);
    if (!a) return std::nullopt;
  }
  if (t.kids.size() > 1) {
    b = reference_eval(t.kids[1], l, x);
    if (!b) return std::nullopt;
  }
  switch (t.kind) {
  case RefTree::num: return t.value; // k / 100 rounds the same way as its decimal text
  case RefTree::xvar: return x(t.index);
  case RefTree::lvar: return l(t.index);
  case RefTree::neg: return -*a;
  case RefTree::add: return finite(*a + *b);
  case RefTree::sub: return finite(*a - *b);
  case RefTree::mul: return finite(*a * *b);
  case RefTree::div:
    if (*b == 0.0) return std::nullopt;
    return finite(*a / *b);
  case RefTree::pow:
    if (*a < 0.0 && std::floor(*b) != *b) return std::nullopt;
    if (*a == 0.0 && *b < 0.0) return std::nullopt;
    return finite(std::pow(*a, *b));
  case RefTree::fsin: return std::sin(*a);
  case RefTree::fcos: return std::cos(*a);
  case RefTree::fexp: return finite(std::exp(*a));
  case RefTree::flog:
    if (*a <= 0.0) return std::nullopt;
    return std::log(*a);
  case RefTree::fsqrt:
    if (*a < 0.0) return std::nullopt;
    return std::sqrt(*a);
  case RefTree::fabs_: return std::abs(*a);
  }
  return std::nullopt;
}

SystemDeclaration rfmr3_declaration() {
  SystemDeclaration d;
  d.name = "rfmr3";
  d.n = 3;
  d.m = 3;
  d.k = 1;
  d.f = {"l3*x3*(1-x1) - l1*x1*(1-x2)", "l1*x1*(1-x2) - l2*x2*(1-x3)", "l2*x2*(1-x3) - l3*x3*(1-x1)"};
  d.h = {"x1 + x2 + x3"};
  d.x_lower = {0, 0, 0};
  d.x_upper = {1, 1, 1};
  d.lambda_lower = {0.1, 0.1, 0.1};
  d.lambda_upper = {3, 3, 3};
  return d;
}

SystemDeclaration planar2(std::vector<std::string> f, std::vector<std::string> h) {
  SystemDeclaration d;
  d.n = 2;
  d.m = 1;
  d.k = 1;
  d.f = std::move(f);
  d.h = std::move(h);
  d.x_lower = {-1, -1};
  d.x_upper = {1, 1};
  d.lambda_lower = {0};
  d.lambda_upper = {1};
  return d;
}

} // namespace

TEST(Parse, RateTerm) {
  EXPECT_DOUBLE_EQ(eval("l1*x1*(1-x2)", 2, 1, {2}, {0.5, 0.5}), 0.5);
}

TEST(Parse, SinZero) { EXPECT_EQ(eval("sin(0)", 0, 0, {}, {}), 0.0); }

TEST(Parse, UnbalancedParenthesisAtEnd) {
  const std::string src = "x1*(1-x2";
  try {
    parse(src, 2, 0);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), src.size());
    EXPECT_NE(std::string(e.what()).find("end of input"), std::string::npos);
  }
}

TEST(Parse, ErrorsCarryOffsets) {
  EXPECT_EQ(parse_error_offset("x1 + y2", 2, 0), 5u);
  EXPECT_EQ(parse_error_offset("x3", 2, 0), 0u);
  EXPECT_EQ(parse_error_offset("l1", 2, 0), 0u);
  EXPECT_EQ(parse_error_offset("x1 +* 2", 2, 0), 4u);
  EXPECT_EQ(parse_error_offset("2 3", 0, 0), 2u);
  EXPECT_EQ(parse_error_offset("", 0, 0), 0u);
  EXPECT_EQ(parse_error_offset("x01", 2, 0), 0u);
}

TEST(Parse, Arity) {
  EXPECT_THROW(parse("sin()", 1, 0), ParseError);
  EXPECT_THROW(parse("sin(x1, x1)", 1, 0), ParseError);
  EXPECT_THROW(parse("sin x1", 1, 0), ParseError);
}

TEST(Parse, Precedence) {
  EXPECT_EQ(eval("2^3^2", 0, 0, {}, {}), 512.0);
  EXPECT_EQ(eval("-2^2", 0, 0, {}, {}), -4.0);
  EXPECT_EQ(eval("2^-1", 0, 0, {}, {}), 0.5);
  EXPECT_EQ(eval("1 - 2 - 3", 0, 0, {}, {}), -4.0);
  EXPECT_EQ(eval("8 / 4 / 2", 0, 0, {}, {}), 1.0);
  EXPECT_EQ(eval("1 + 2 * 3", 0, 0, {}, {}), 7.0);
  EXPECT_EQ(eval("-x1 * 3", 1, 0, {}, {2}), -6.0);
  EXPECT_EQ(eval("1.5e2 + .5", 0, 0, {}, {}), 150.5);
}

TEST(Eval, Constant) {
  EXPECT_EQ(eval("3.5", 2, 1, {0.3}, {7, -1}), 3.5);
}

TEST(Eval, SumOfSquares) { EXPECT_EQ(eval("x1^2+x2^2", 2, 0, {}, {3, 4}), 25.0); }

TEST(Eval, DivisionByZero) {
  try {
    eval("1/x1", 1, 0, {}, {0});
    FAIL();
  } catch (const EvaluationError& e) {
    EXPECT_EQ(e.details()["offset"], 1);
  }
}

TEST(Eval, DomainErrors) {
  EXPECT_THROW(eval("log(x1)", 1, 0, {}, {0}), EvaluationError);
  EXPECT_THROW(eval("log(x1)", 1, 0, {}, {-1}), EvaluationError);
  EXPECT_THROW(eval("sqrt(x1)", 1, 0, {}, {-1}), EvaluationError);
  EXPECT_THROW(eval("x1^0.5", 1, 0, {}, {-4}), EvaluationError);
  EXPECT_THROW(eval("x1^-1", 1, 0, {}, {0}), EvaluationError);
  EXPECT_THROW(eval("exp(x1)", 1, 0, {}, {1000}), EvaluationError);
  EXPECT_EQ(eval("x1^3", 1, 0, {}, {-2}), -8.0);
}

TEST(Eval, DimensionMismatch) {
  const Expression e = parse("x1", 1, 0);
  EXPECT_THROW(eval_ast(e, Vector(0), Vector(2)), InputError);
}

TEST(Print, RoundTripIsIdempotent) {
  for (const char* src : {"l1*x1*(1-x2)", "-x1^2 + 3e-4/x2", "2^3^2", "sqrt(abs(x1 - 0.1)) * -l1",
                          "exp(log(x2)) - cos(sin(x1))", "0.1 + 0.2"}) {
    const Expression a = parse(src, 2, 1);
    const std::string printed = print(a);
    const Expression b = parse(printed, 2, 1);
    EXPECT_TRUE(same_tree(*a.root, *b.root)) << src << " -> " << printed;
    EXPECT_EQ(print(b), printed);
  }
}

TEST(Property, RandomTreesMatchReferenceEvaluator) {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> coord(-2.0, 2.0);
  int evaluated = 0, domain_errors = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const RefTree t = random_tree(rng, 5, 3, 2);
    const std::string src = render(t, rng);
    Vector l{{coord(rng), coord(rng)}};
    Vector x{{coord(rng), coord(rng), coord(rng)}};
    const Expression e = parse(src, 3, 2);
    const std::optional<double> want = reference_eval(t, l, x);
    if (want) {
      EXPECT_EQ(eval_ast(e, l, x), *want) << src;
      ++evaluated;
    } else {
      EXPECT_THROW(eval_ast(e, l, x), EvaluationError) << src;
      ++domain_errors;
    }
    const Expression again = parse(print(e), 3, 2);
    EXPECT_TRUE(same_tree(*e.root, *again.root)) << src;
  }
  EXPECT_GT(evaluated, 500);
  EXPECT_GT(domain_errors, 0);
}

TEST(BuildSystem, RfmrAsExpressionsAccepted) {
  const SystemSpec s = build_system_from_config(rfmr3_declaration(), 1e-10);
  EXPECT_LT(check_first_integral_identity(s, 200, 5).max_residual, 1e-10);
  EXPECT_FALSE(s.fully_analytic());
}

TEST(BuildSystem, NonIntegralRejectedWithWorstSample) {
  try {
    build_system_from_config(planar2({"x2", "x1"}, {"x1"}), 1e-10);
    FAIL();
  } catch (const InputError& e) {
    EXPECT_GT(e.details()["max_residual"].get<double>(), 1e-3);
    EXPECT_TRUE(e.details().contains("x"));
  }
}

TEST(BuildSystem, RotationAccepted) {
  EXPECT_NO_THROW(build_system_from_config(planar2({"-x2", "x1"}, {"x1^2+x2^2"}), 1e-10));
}

TEST(BuildSystem, CountMismatch) {
  EXPECT_THROW(build_system_from_config(planar2({"-x2"}, {"x1^2+x2^2"}), 1e-10), InputError);
  EXPECT_THROW(build_system_from_config(planar2({"-x2", "x1"}, {}), 1e-10), InputError);
}

TEST(BuildSystem, MatchesBuiltinDerivatives) {
  const SystemSpec dsl = build_system_from_config(rfmr3_declaration(), 1e-10);
  const SystemSpec ref = builtin("rfmr", {{"n", 3}});
  const PointState u{Vector{{1.0, 2.0, 0.5}}, Vector{{0.2, 0.7, 0.4}}};
  const Evaluation a = evaluate(dsl, u);
  const Evaluation b = evaluate(ref, u);
  EXPECT_LE((a.f_value - b.f_value).norm(), 1e-15);
  EXPECT_LE((a.jac_x - b.jac_x).norm(), 1e-8);
  EXPECT_LE((a.jac_lambda - b.jac_lambda).norm(), 1e-8);
  EXPECT_LE((a.jac_h - b.jac_h).norm(), 1e-8);
}
