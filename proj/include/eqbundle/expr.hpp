#pragma once

// Arithmetic expression language for user-declared systems.
//
// Grammar (precedence high to low; ^ is right-associative):
//
//   expr    := term (('+' | '-') term)*
//   term    := unary (('*' | '/') unary)*
//   unary   := '-' unary | power
//   power   := primary ('^' unary)?
//   primary := number | variable | function '(' expr ')' | '(' expr ')'
//
// Variables are x1..xn (state) and l1..lm (parameters). Functions: sin, cos,
// exp, log, sqrt, abs. Numbers are decimal literals with an optional exponent.

#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "errors.hpp"
#include "linalg.hpp"
#include "system.hpp"

namespace eqb::expr {

/// Syntax or name-resolution failure, located by byte offset into the source.
class ParseError : public InputError {
public:
  ParseError(const std::string& what, std::size_t offset)
      : InputError(what + " at offset " + std::to_string(offset), nlohmann::json{{"offset", offset}}),
        offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

private:
  std::size_t offset_;
};

enum class NodeKind { constant, variable, negate, binary, call };
enum class VarKind { state, parameter };
enum class Function { sin, cos, exp, log, sqrt, abs };

struct Node;
using NodePtr = std::shared_ptr<const Node>;

struct Node {
  NodeKind kind = NodeKind::constant;
  double value = 0.0;        // constant
  VarKind var = VarKind::state;
  int index = 0;             // variable, zero-based
  char op = 0;               // binary: + - * / ^
  Function fn = Function::sin;
  std::vector<NodePtr> args; // negate: 1, binary: 2, call: 1
  std::size_t offset = 0;    // byte offset of the token that produced the node
};

inline const char* function_name(Function f) {
  switch (f) {
  case Function::sin: return "sin";
  case Function::cos: return "cos";
  case Function::exp: return "exp";
  case Function::log: return "log";
  case Function::sqrt: return "sqrt";
  case Function::abs: return "abs";
  }
  return "?";
}

/// Parsed expression together with the dimensions it was resolved against.
struct Expression {
  NodePtr root;
  int n = 0;
  int m = 0;
};

namespace detail {

class Parser {
public:
  Parser(std::string_view src, int n, int m) : src_(src), n_(n), m_(m) {}

  NodePtr parse() {
    skip_ws();
    if (pos_ >= src_.size()) throw ParseError("empty expression", pos_);
    NodePtr e = expr();
    skip_ws();
    if (pos_ < src_.size()) {
      throw ParseError(std::string("unexpected '") + src_[pos_] + "'", pos_);
    }
    return e;
  }

private:
  std::string_view src_;
  std::size_t pos_ = 0;
  int n_;
  int m_;

  void skip_ws() {
    while (pos_ < src_.size() && std::isspace(static_cast<unsigned char>(src_[pos_]))) ++pos_;
  }

  bool accept(char c) {
    skip_ws();
    if (pos_ < src_.size() && src_[pos_] == c) {
      ++pos_;
      return true;
    }
    return false;
  }

  static NodePtr binary(char op, NodePtr a, NodePtr b, std::size_t at) {
    auto node = std::make_shared<Node>();
    node->kind = NodeKind::binary;
    node->op = op;
    node->args = {std::move(a), std::move(b)};
    node->offset = at;
    return node;
  }

  NodePtr expr() {
    NodePtr lhs = term();
    for (;;) {
      skip_ws();
      const std::size_t at = pos_;
      if (accept('+')) {
        lhs = binary('+', lhs, term(), at);
      } else if (accept('-')) {
        lhs = binary('-', lhs, term(), at);
      } else {
        return lhs;
      }
    }
  }

  NodePtr term() {
    NodePtr lhs = unary();
    for (;;) {
      skip_ws();
      const std::size_t at = pos_;
      if (accept('*')) {
        lhs = binary('*', lhs, unary(), at);
      } else if (accept('/')) {
        lhs = binary('/', lhs, unary(), at);
      } else {
        return lhs;
      }
    }
  }

  NodePtr unary() {
    skip_ws();
    const std::size_t at = pos_;
    if (accept('-')) {
      auto node = std::make_shared<Node>();
      node->kind = NodeKind::negate;
      node->args = {unary()};
      node->offset = at;
      return node;
    }
    return power();
  }

  NodePtr power() {
    NodePtr base = primary();
    skip_ws();
    const std::size_t at = pos_;
    if (accept('^')) {
      return binary('^', base, unary(), at);
    }
    return base;
  }

  NodePtr primary() {
    skip_ws();
    if (pos_ >= src_.size()) throw ParseError("unexpected end of input", pos_);
    const std::size_t at = pos_;
    const char c = src_[pos_];
    if (c == '(') {
      ++pos_;
      NodePtr inner = expr();
      if (!accept(')')) {
        skip_ws();
        throw ParseError(pos_ >= src_.size() ? "expected ')' before end of input" : "expected ')'", pos_);
      }
      return inner;
    }
    if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') return number();
    if (std::isalpha(static_cast<unsigned char>(c))) return identifier();
    throw ParseError(std::string("unexpected '") + c + "'", at);
  }

  NodePtr number() {
    const std::size_t at = pos_;
    std::size_t end = pos_;
    auto digits = [&] {
      while (end < src_.size() && std::isdigit(static_cast<unsigned char>(src_[end]))) ++end;
    };
    digits();
    if (end < src_.size() && src_[end] == '.') {
      ++end;
      digits();
    }
    if (end < src_.size() && (src_[end] == 'e' || src_[end] == 'E')) {
      std::size_t probe = end + 1;
      if (probe < src_.size() && (src_[probe] == '+' || src_[probe] == '-')) ++probe;
      if (probe < src_.size() && std::isdigit(static_cast<unsigned char>(src_[probe]))) {
        end = probe;
        digits();
      }
    }
    const std::string text(src_.substr(at, end - at));
    if (text == ".") throw ParseError("malformed number", at);
    auto node = std::make_shared<Node>();
    node->kind = NodeKind::constant;
    node->offset = at;
    const auto res = std::from_chars(text.data(), text.data() + text.size(), node->value);
    if (res.ec != std::errc() || res.ptr != text.data() + text.size() || !std::isfinite(node->value)) {
      throw ParseError("malformed number '" + text + "'", at);
    }
    pos_ = end;
    return node;
  }

  NodePtr identifier() {
    const std::size_t at = pos_;
    std::size_t end = pos_;
    while (end < src_.size() && std::isalnum(static_cast<unsigned char>(src_[end]))) ++end;
    const std::string name(src_.substr(at, end - at));
    pos_ = end;

    static const std::pair<const char*, Function> functions[] = {
        {"sin", Function::sin}, {"cos", Function::cos},   {"exp", Function::exp},
        {"log", Function::log}, {"sqrt", Function::sqrt}, {"abs", Function::abs}};
    for (const auto& [fname, fn] : functions) {
      if (name == fname) return call(fn, at);
    }

    if (name.size() >= 2 && (name[0] == 'x' || name[0] == 'l')) {
      int idx = 0;
      const auto res = std::from_chars(name.data() + 1, name.data() + name.size(), idx);
      const bool numeric = res.ec == std::errc() && res.ptr == name.data() + name.size() && name[1] != '0';
      const int limit = name[0] == 'x' ? n_ : m_;
      if (numeric && idx >= 1 && idx <= limit) {
        auto node = std::make_shared<Node>();
        node->kind = NodeKind::variable;
        node->var = name[0] == 'x' ? VarKind::state : VarKind::parameter;
        node->index = idx - 1;
        node->offset = at;
        return node;
      }
    }
    throw ParseError("unknown identifier '" + name + "'", at);
  }

  NodePtr call(Function fn, std::size_t at) {
    if (!accept('(')) throw ParseError(std::string("expected '(' after ") + function_name(fn), pos_);
    skip_ws();
    if (pos_ < src_.size() && src_[pos_] == ')') {
      throw ParseError(std::string(function_name(fn)) + " takes exactly 1 argument, got 0", at);
    }
    NodePtr arg = expr();
    skip_ws();
    if (pos_ < src_.size() && src_[pos_] == ',') {
      throw ParseError(std::string(function_name(fn)) + " takes exactly 1 argument", at);
    }
    if (!accept(')')) {
      skip_ws();
      throw ParseError(pos_ >= src_.size() ? "expected ')' before end of input" : "expected ')'", pos_);
    }
    auto node = std::make_shared<Node>();
    node->kind = NodeKind::call;
    node->fn = fn;
    node->args = {std::move(arg)};
    node->offset = at;
    return node;
  }
};

[[noreturn]] inline void domain_error(const std::string& what, const Node& node) {
  throw EvaluationError(what + " at offset " + std::to_string(node.offset),
                        nlohmann::json{{"offset", node.offset}});
}

inline double checked(double v, const Node& node) {
  if (!std::isfinite(v)) domain_error("non-finite result", node);
  return v;
}

inline double eval_node(const Node& node, const Vector& lambda, const Vector& x) {
  switch (node.kind) {
  case NodeKind::constant:
    return node.value;
  case NodeKind::variable:
    return node.var == VarKind::state ? x(node.index) : lambda(node.index);
  case NodeKind::negate:
    return -eval_node(*node.args[0], lambda, x);
  case NodeKind::binary: {
    const double a = eval_node(*node.args[0], lambda, x);
    const double b = eval_node(*node.args[1], lambda, x);
    switch (node.op) {
    case '+': return checked(a + b, node);
    case '-': return checked(a - b, node);
    case '*': return checked(a * b, node);
    case '/':
      if (b == 0.0) domain_error("division by zero", node);
      return checked(a / b, node);
    case '^':
      if (a < 0.0 && b != std::trunc(b)) domain_error("negative base with non-integer exponent", node);
      if (a == 0.0 && b < 0.0) domain_error("division by zero (zero to a negative power)", node);
      return checked(std::pow(a, b), node);
    default:
      domain_error("unknown operator", node);
    }
  }
  case NodeKind::call: {
    const double a = eval_node(*node.args[0], lambda, x);
    switch (node.fn) {
    case Function::sin: return std::sin(a);
    case Function::cos: return std::cos(a);
    case Function::exp: return checked(std::exp(a), node);
    case Function::log:
      if (!(a > 0.0)) domain_error("log of a non-positive value", node);
      return std::log(a);
    case Function::sqrt:
      if (a < 0.0) domain_error("sqrt of a negative value", node);
      return std::sqrt(a);
    case Function::abs: return std::abs(a);
    }
  }
  }
  domain_error("malformed node", node);
}

inline void print_node(const Node& node, std::string& out) {
  switch (node.kind) {
  case NodeKind::constant: {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", node.value);
    out += buf;
    return;
  }
  case NodeKind::variable:
    out += node.var == VarKind::state ? 'x' : 'l';
    out += std::to_string(node.index + 1);
    return;
  case NodeKind::negate:
    out += "(-";
    print_node(*node.args[0], out);
    out += ')';
    return;
  case NodeKind::binary:
    out += '(';
    print_node(*node.args[0], out);
    out += node.op;
    print_node(*node.args[1], out);
    out += ')';
    return;
  case NodeKind::call:
    out += function_name(node.fn);
    out += '(';
    print_node(*node.args[0], out);
    out += ')';
    return;
  }
}

} // namespace detail

/// Parse `source` against n state variables and m parameters.
inline Expression parse(std::string_view source, int n, int m) {
  if (n < 0 || m < 0) throw InputError("parse: negative dimensions");
  return Expression{detail::Parser(source, n, m).parse(), n, m};
}

inline double eval_ast(const Expression& e, const Vector& lambda, const Vector& x) {
  if (lambda.size() != e.m || x.size() != e.n) {
    throw InputError("eval_ast: dimensions do not match the expression declaration");
  }
  return detail::eval_node(*e.root, lambda, x);
}

/// Canonical, fully parenthesized text; parses back to the same tree.
inline std::string print(const Expression& e) {
  std::string out;
  detail::print_node(*e.root, out);
  return out;
}

/// Structural equality, ignoring source offsets.
inline bool same_tree(const Node& a, const Node& b) {
  if (a.kind != b.kind || a.args.size() != b.args.size()) return false;
  switch (a.kind) {
  case NodeKind::constant:
    if (a.value != b.value) return false;
    break;
  case NodeKind::variable:
    if (a.var != b.var || a.index != b.index) return false;
    break;
  case NodeKind::binary:
    if (a.op != b.op) return false;
    break;
  case NodeKind::call:
    if (a.fn != b.fn) return false;
    break;
  case NodeKind::negate:
    break;
  }
  for (std::size_t i = 0; i < a.args.size(); ++i) {
    if (!same_tree(*a.args[i], *b.args[i])) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Systems declared as expressions
// ---------------------------------------------------------------------------

struct SystemDeclaration {
  std::string name = "user";
  int n = 0;
  int m = 0;
  int k = 0;
  std::vector<std::string> f;
  std::vector<std::string> h;
  std::vector<std::string> constraints; // g(x) <= 0, state variables only
  std::vector<double> x_lower;
  std::vector<double> x_upper;
  std::vector<double> lambda_lower;
  std::vector<double> lambda_upper;
  int identity_samples = 64;
  std::uint64_t identity_seed = 0;
};

/// Build a finite-difference system from expressions, rejecting it unless
/// f . grad h_l stays within `tolerance` on seeded random samples.
inline SystemSpec build_system_from_config(const SystemDeclaration& decl, double tolerance) {
  if (decl.n <= 0 || decl.m <= 0 || decl.k <= 0 || decl.k >= decl.n) {
    throw InputError("system declaration: need n > 0, m > 0 and 0 < k < n");
  }
  if (static_cast<int>(decl.f.size()) != decl.n) {
    throw InputError("system declaration: expected " + std::to_string(decl.n) +
                     " f-expressions, got " + std::to_string(decl.f.size()));
  }
  if (static_cast<int>(decl.h.size()) != decl.k) {
    throw InputError("system declaration: expected " + std::to_string(decl.k) +
                     " h-expressions, got " + std::to_string(decl.h.size()));
  }
  auto check_bounds = [](const std::vector<double>& lo, const std::vector<double>& hi, int dim,
                         const char* what) {
    if (static_cast<int>(lo.size()) != dim || static_cast<int>(hi.size()) != dim) {
      throw InputError(std::string("system declaration: ") + what + " bounds must have " +
                       std::to_string(dim) + " entries");
    }
    for (int i = 0; i < dim; ++i) {
      if (!std::isfinite(lo[i]) || !std::isfinite(hi[i]) || !(lo[i] < hi[i])) {
        throw InputError(std::string("system declaration: ") + what + " bounds must be finite with lower < upper");
      }
    }
  };
  check_bounds(decl.x_lower, decl.x_upper, decl.n, "domain");
  check_bounds(decl.lambda_lower, decl.lambda_upper, decl.m, "parameter");

  std::vector<Expression> fe, he, ge;
  for (const auto& s : decl.f) fe.push_back(parse(s, decl.n, decl.m));
  for (const auto& s : decl.h) he.push_back(parse(s, decl.n, 0));
  for (const auto& s : decl.constraints) ge.push_back(parse(s, decl.n, 0));

  SystemSpec sys;
  sys.name = decl.name;
  sys.n = decl.n;
  sys.m = decl.m;
  sys.k = decl.k;
  sys.f = [fe](const Vector& l, const Vector& x) {
    Vector out(static_cast<Eigen::Index>(fe.size()));
    for (std::size_t i = 0; i < fe.size(); ++i) out(static_cast<Eigen::Index>(i)) = eval_ast(fe[i], l, x);
    return out;
  };
  sys.h = [he](const Vector& x) {
    Vector out(static_cast<Eigen::Index>(he.size()));
    const Vector none(0);
    for (std::size_t i = 0; i < he.size(); ++i) out(static_cast<Eigen::Index>(i)) = eval_ast(he[i], none, x);
    return out;
  };
  sys.domain.lower = from_std(decl.x_lower);
  sys.domain.upper = from_std(decl.x_upper);
  for (std::size_t i = 0; i < ge.size(); ++i) {
    const Expression g = ge[i];
    sys.domain.constraints.push_back(
        {decl.constraints[i], [g](const Vector& x) { return eval_ast(g, Vector(0), x); }, nullptr});
  }
  const Vector lo = from_std(decl.lambda_lower);
  const Vector hi = from_std(decl.lambda_upper);
  const Vector inset = 0.05 * (hi - lo);
  sys.parameters = {lo, hi, lo + inset, hi - inset};
  sys.validate();

  const IdentityCheck check = check_first_integral_identity(sys, decl.identity_samples, decl.identity_seed);
  if (!(check.max_residual <= tolerance)) {
    throw InputError("h is not a first integral of f: |f . grad h" + std::to_string(check.worst_integral + 1) +
                         "| = " + std::to_string(check.max_residual) + " at " + eqb::detail::coords(check.worst),
                     nlohmann::json{{"max_residual", check.max_residual},
                                    {"integral", check.worst_integral + 1},
                                    {"lambda", to_std(check.worst.lambda)},
                                    {"x", to_std(check.worst.x)}});
  }
  return sys;
}

} // namespace eqb::expr
