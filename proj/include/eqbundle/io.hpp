#pragma once

// Run configuration, command dispatch and report serialization for the CLI.
//
// A run is described by one JSON document: a system, a command, the command's
// fields, tolerance overrides, a seed and an output target. Validation happens
// up front (dimensions against the system's n, m, k); the echoed config in
// every report has all defaults filled in.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include <unistd.h>

#include <nlohmann/json.hpp>

#include "audit.hpp"
#include "errors.hpp"
#include "expr.hpp"
#include "finder.hpp"
#include "monodromy.hpp"
#include "system.hpp"
#include "tolerances.hpp"
#include "transport.hpp"

namespace eqb::io {

using nlohmann::json;

inline constexpr const char* kSchemaVersion = "1.0";

inline const std::vector<std::string>& commands() {
  static const std::vector<std::string> names{"audit",     "find",    "trace-fiber", "transport",
                                              "holonomy",  "cocycle", "eigen-loop",  "track-matrix-loop"};
  return names;
}

struct RunConfig {
  std::string command;
  json system;  // normalized declaration, null when the command needs none
  json params;  // command fields with defaults materialized
  Tolerances tols;
  std::uint64_t seed = 0;
  std::string output_path; // empty: standard output
  std::string format = "json";
  std::optional<SystemSpec> spec;

  json echo() const {
    json out = {{"command", command}, {"system", system}, {"seed", seed}, {"tolerances", tols},
                {"output", {{"path", output_path.empty() ? json(nullptr) : json(output_path)}, {"format", format}}}};
    for (const auto& [key, value] : params.items()) out[key] = value;
    return out;
  }
};

struct RunOutcome {
  int exit_code = 0;
  json report;
  std::string csv; // empty when the run failed
};

namespace detail {

enum class FieldKind { vec_m, vec_n, vec_k, path_m, loop_m, loop_n, integer, number, direction, matrices, family };

struct Field {
  std::string key;
  FieldKind kind;
  json fallback;         // null: required unless optional
  bool optional = false; // may be absent with no default
};

inline const std::map<std::string, std::vector<Field>>& schemas() {
  static const std::map<std::string, std::vector<Field>> table{
      {"audit", {{"lambda", FieldKind::vec_m, nullptr}, {"x", FieldKind::vec_n, nullptr}}},
      {"find",
       {{"lambda", FieldKind::vec_m, nullptr}, {"level", FieldKind::vec_k, nullptr}, {"budget", FieldKind::integer, 200}}},
      {"trace-fiber",
       {{"lambda", FieldKind::vec_m, nullptr},
        {"x0", FieldKind::vec_n, nullptr},
        {"direction", FieldKind::direction, 1},
        {"initial_step", FieldKind::number, 0.02},
        {"max_step", FieldKind::number, 0.1}}},
      {"transport",
       {{"waypoints", FieldKind::path_m, nullptr},
        {"x0", FieldKind::vec_n, nullptr},
        {"initial_step", FieldKind::number, 0.05},
        {"max_step", FieldKind::number, 0.25}}},
      {"holonomy",
       {{"loop", FieldKind::loop_m, nullptr},
        {"level", FieldKind::vec_k, nullptr},
        {"budget", FieldKind::integer, 200},
        {"max_step", FieldKind::number, 0.25}}},
      {"cocycle",
       {{"lambda1", FieldKind::vec_m, nullptr},
        {"lambda2", FieldKind::vec_m, nullptr},
        {"lambda3", FieldKind::vec_m, nullptr},
        {"x0", FieldKind::vec_n, nullptr},
        {"max_step", FieldKind::number, 0.25}}},
      {"eigen-loop", {{"lambda", FieldKind::vec_m, nullptr}, {"loop", FieldKind::loop_n, nullptr}}},
      {"track-matrix-loop",
       {{"k", FieldKind::integer, nullptr, true},
        {"matrices", FieldKind::matrices, nullptr, true},
        {"family", FieldKind::family, nullptr, true}}},
  };
  return table;
}

[[noreturn]] inline void field_error(const std::string& key, const std::string& what) {
  throw InputError("config: '" + key + "' " + what, json{{"field", key}});
}

inline std::vector<double> numbers(const json& j, const std::string& key) {
  if (!j.is_array()) field_error(key, "must be an array of numbers");
  std::vector<double> out;
  for (const json& v : j) {
    if (!v.is_number()) field_error(key, "must be an array of numbers");
    out.push_back(v.get<double>());
  }
  return out;
}

inline std::vector<double> vector_of(const json& j, const std::string& key, int dim) {
  std::vector<double> v = numbers(j, key);
  if (static_cast<int>(v.size()) != dim) {
    field_error(key, "has dimension " + std::to_string(v.size()) + ", expected " + std::to_string(dim));
  }
  return v;
}

inline std::vector<std::vector<double>> vectors_of(const json& j, const std::string& key, int dim, std::size_t min) {
  if (!j.is_array() || j.size() < min) field_error(key, "must be a list of at least " + std::to_string(min) + " points");
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < j.size(); ++i) out.push_back(vector_of(j[i], key + "[" + std::to_string(i) + "]", dim));
  return out;
}

inline bool closes(const std::vector<std::vector<double>>& pts) {
  const Vector a = from_std(pts.front()), b = from_std(pts.back());
  return (a - b).norm() <= 1e-12 * (1.0 + a.norm());
}

inline Matrix matrix_of(const json& j, const std::string& key) {
  if (!j.is_array() || j.empty()) field_error(key, "must be a non-empty array of rows");
  const auto n = static_cast<Eigen::Index>(j.size());
  Matrix out(n, n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const std::vector<double> row = vector_of(j[static_cast<std::size_t>(r)], key, static_cast<int>(n));
    for (Eigen::Index c = 0; c < n; ++c) out(r, c) = row[static_cast<std::size_t>(c)];
  }
  return out;
}

inline json matrix_json(const Matrix& m) {
  json out = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    out.push_back(row);
  }
  return out;
}

inline std::vector<std::string> strings(const json& j, const std::string& key) {
  if (!j.is_array()) field_error(key, "must be an array of strings");
  std::vector<std::string> out;
  for (const json& v : j) {
    if (!v.is_string()) field_error(key, "must be an array of strings");
    out.push_back(v.get<std::string>());
  }
  return out;
}

inline int integer(const json& j, const std::string& key) {
  if (!j.is_number_integer()) field_error(key, "must be an integer");
  return j.get<int>();
}

/// Builds the system and returns its normalized declaration.
inline json load_system(const json& j, const Tolerances& tols, SystemSpec& out) {
  if (!j.is_object()) field_error("system", "must be an object");
  if (j.contains("builtin")) {
    if (!j["builtin"].is_string()) field_error("system.builtin", "must be a string");
    std::map<std::string, int> size;
    for (const auto& [key, value] : j.items()) {
      if (key == "builtin") continue;
      size[key] = integer(value, "system." + key);
    }
    out = builtin(j["builtin"].get<std::string>(), size);
    return j;
  }
  static const std::set<std::string> known{"name",   "n",           "m",           "k",
                                           "f",      "h",           "constraints", "domain",
                                           "parameters", "identity_samples", "identity_seed"};
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) field_error("system." + key, "is not a recognized system field");
  }
  for (const char* key : {"n", "m", "k", "f", "h", "domain", "parameters"}) {
    if (!j.contains(key)) field_error(std::string("system.") + key, "is required for an expression system");
  }
  expr::SystemDeclaration d;
  d.name = j.value("name", std::string("user"));
  d.n = integer(j["n"], "system.n");
  d.m = integer(j["m"], "system.m");
  d.k = integer(j["k"], "system.k");
  d.f = strings(j["f"], "system.f");
  d.h = strings(j["h"], "system.h");
  if (j.contains("constraints")) d.constraints = strings(j["constraints"], "system.constraints");
  for (const char* box : {"domain", "parameters"}) {
    const json& b = j[box];
    if (!b.is_object() || !b.contains("lower") || !b.contains("upper")) {
      field_error(std::string("system.") + box, "must be an object with 'lower' and 'upper'");
    }
  }
  d.x_lower = numbers(j["domain"]["lower"], "system.domain.lower");
  d.x_upper = numbers(j["domain"]["upper"], "system.domain.upper");
  d.lambda_lower = numbers(j["parameters"]["lower"], "system.parameters.lower");
  d.lambda_upper = numbers(j["parameters"]["upper"], "system.parameters.upper");
  if (j.contains("identity_samples")) d.identity_samples = integer(j["identity_samples"], "system.identity_samples");
  if (j.contains("identity_seed")) d.identity_seed = static_cast<std::uint64_t>(integer(j["identity_seed"], "system.identity_seed"));
  out = expr::build_system_from_config(d, tols.first_integral);
  return json{{"name", d.name},
              {"n", d.n},
              {"m", d.m},
              {"k", d.k},
              {"f", d.f},
              {"h", d.h},
              {"constraints", d.constraints},
              {"domain", {{"lower", d.x_lower}, {"upper", d.x_upper}}},
              {"parameters", {{"lower", d.lambda_lower}, {"upper", d.lambda_upper}}},
              {"identity_samples", d.identity_samples},
              {"identity_seed", d.identity_seed}};
}

/// Samples a matrix family given as expressions in l1 over [from, to].
inline std::vector<Matrix> sample_family(const json& family) {
  if (!family.is_object()) field_error("family", "must be an object");
  for (const auto& [key, value] : family.items()) {
    if (key != "entries" && key != "from" && key != "to" && key != "samples") {
      field_error("family." + key, "is not a recognized family field");
    }
  }
  for (const char* key : {"entries", "from", "to", "samples"}) {
    if (!family.contains(key)) field_error(std::string("family.") + key, "is required");
  }
  const json& rows = family["entries"];
  if (!rows.is_array() || rows.empty()) field_error("family.entries", "must be a square array of expressions");
  const auto n = static_cast<Eigen::Index>(rows.size());
  std::vector<expr::Expression> cells;
  for (const json& row : rows) {
    const std::vector<std::string> r = strings(row, "family.entries");
    if (static_cast<Eigen::Index>(r.size()) != n) field_error("family.entries", "must be square");
    for (const std::string& s : r) cells.push_back(expr::parse(s, 0, 1));
  }
  if (!family["from"].is_number() || !family["to"].is_number()) field_error("family", "bounds must be numbers");
  const double from = family["from"].get<double>(), to = family["to"].get<double>();
  const int samples = integer(family["samples"], "family.samples");
  if (samples < 1) field_error("family.samples", "must be positive");
  std::vector<Matrix> out;
  const Vector none(0);
  for (int i = 0; i <= samples; ++i) {
    Vector s(1);
    s(0) = from + (to - from) * i / samples;
    Matrix m(n, n);
    for (Eigen::Index r = 0; r < n; ++r) {
      for (Eigen::Index c = 0; c < n; ++c) m(r, c) = expr::eval_ast(cells[static_cast<std::size_t>(r * n + c)], s, none);
    }
    out.push_back(m);
  }
  return out;
}

inline std::vector<Vector> to_vectors(const json& j) {
  std::vector<Vector> out;
  for (const json& v : j) out.push_back(from_std(v.get<std::vector<double>>()));
  return out;
}

inline Vector vec(const json& j) { return from_std(j.get<std::vector<double>>()); }

} // namespace detail

/// Validates a parsed document and materializes defaults.
inline RunConfig parse_config(const json& doc) {
  if (!doc.is_object()) throw InputError("config: top level must be an object");
  RunConfig cfg;
  if (!doc.contains("command") || !doc["command"].is_string()) throw InputError("config: 'command' is required");
  cfg.command = doc["command"].get<std::string>();
  const auto schema_it = detail::schemas().find(cfg.command);
  if (schema_it == detail::schemas().end()) {
    throw InputError("config: unknown command '" + cfg.command + "'", json{{"known", commands()}});
  }
  const std::vector<detail::Field>& schema = schema_it->second;

  std::set<std::string> allowed{"system", "command", "tolerances", "output", "seed"};
  for (const auto& f : schema) allowed.insert(f.key);
  for (const auto& [key, value] : doc.items()) {
    if (!allowed.count(key)) detail::field_error(key, "is not a recognized field for command '" + cfg.command + "'");
  }
  if (doc.contains("tolerances")) cfg.tols = doc["tolerances"].get<Tolerances>();
  if (doc.contains("seed")) {
    if (!doc["seed"].is_number_unsigned()) detail::field_error("seed", "must be a non-negative integer");
    cfg.seed = doc["seed"].get<std::uint64_t>();
  }
  if (doc.contains("output")) {
    const json& o = doc["output"];
    if (!o.is_object()) detail::field_error("output", "must be an object");
    for (const auto& [key, value] : o.items()) {
      if (key == "path") {
        if (!value.is_null() && !value.is_string()) detail::field_error("output.path", "must be a string");
        if (value.is_string()) cfg.output_path = value.get<std::string>();
      } else if (key == "format") {
        if (!value.is_string()) detail::field_error("output.format", "must be a string");
        cfg.format = value.get<std::string>();
      } else {
        detail::field_error("output." + key, "is not a recognized output field");
      }
    }
  }
  if (cfg.format != "json" && cfg.format != "csv" && cfg.format != "both") {
    detail::field_error("output.format", "must be one of json, csv, both");
  }
  if (cfg.format == "both" && cfg.output_path.empty()) {
    detail::field_error("output.format", "'both' needs an output path");
  }

  const bool needs_system = cfg.command != "track-matrix-loop";
  if (doc.contains("system")) {
    SystemSpec sys;
    cfg.system = detail::load_system(doc["system"], cfg.tols, sys);
    cfg.spec = std::move(sys);
  } else if (needs_system) {
    throw InputError("config: 'system' is required for command '" + cfg.command + "'");
  }

  cfg.params = json::object();
  for (const detail::Field& f : schema) {
    if (!doc.contains(f.key)) {
      if (f.optional) continue;
      if (f.fallback.is_null()) detail::field_error(f.key, "is required for command '" + cfg.command + "'");
      cfg.params[f.key] = f.fallback;
      continue;
    }
    const json& v = doc[f.key];
    const SystemSpec* s = cfg.spec ? &*cfg.spec : nullptr;
    switch (f.kind) {
    case detail::FieldKind::vec_m:
      cfg.params[f.key] = detail::vector_of(v, f.key, s->m);
      break;
    case detail::FieldKind::vec_n:
      cfg.params[f.key] = detail::vector_of(v, f.key, s->n);
      break;
    case detail::FieldKind::vec_k:
      cfg.params[f.key] = detail::vector_of(v, f.key, s->k);
      break;
    case detail::FieldKind::path_m:
      cfg.params[f.key] = detail::vectors_of(v, f.key, s->m, 2);
      break;
    case detail::FieldKind::loop_m:
    case detail::FieldKind::loop_n: {
      const auto pts = detail::vectors_of(v, f.key, f.kind == detail::FieldKind::loop_m ? s->m : s->n, 2);
      if (!detail::closes(pts)) detail::field_error(f.key, "is not closed: loop must close (first point = last point)");
      cfg.params[f.key] = pts;
      break;
    }
    case detail::FieldKind::integer:
      cfg.params[f.key] = detail::integer(v, f.key);
      if (cfg.params[f.key].get<int>() < 0) detail::field_error(f.key, "must be non-negative");
      break;
    case detail::FieldKind::number:
      if (!v.is_number() || !(v.get<double>() > 0)) detail::field_error(f.key, "must be a positive number");
      cfg.params[f.key] = v.get<double>();
      break;
    case detail::FieldKind::direction:
      if (!v.is_number_integer() || (v.get<int>() != 1 && v.get<int>() != -1)) {
        detail::field_error(f.key, "must be 1 or -1");
      }
      cfg.params[f.key] = v.get<int>();
      break;
    case detail::FieldKind::matrices: {
      if (!v.is_array() || v.size() < 2) detail::field_error(f.key, "must be a list of at least two matrices");
      json ms = json::array();
      for (std::size_t i = 0; i < v.size(); ++i) {
        ms.push_back(detail::matrix_json(detail::matrix_of(v[i], f.key + "[" + std::to_string(i) + "]")));
      }
      cfg.params[f.key] = ms;
      break;
    }
    case detail::FieldKind::family:
      detail::sample_family(v); // validates
      cfg.params[f.key] = v;
      break;
    }
  }

  if (cfg.command == "track-matrix-loop") {
    const bool has_m = cfg.params.contains("matrices"), has_f = cfg.params.contains("family");
    if (has_m == has_f) throw InputError("config: track-matrix-loop needs exactly one of 'matrices' or 'family'");
    const std::vector<Matrix> js =
        has_m ? [&] {
          std::vector<Matrix> out;
          for (std::size_t i = 0; i < cfg.params["matrices"].size(); ++i) {
            out.push_back(detail::matrix_of(cfg.params["matrices"][i], "matrices"));
          }
          return out;
        }()
              : detail::sample_family(cfg.params["family"]);
    const auto n = js.front().rows();
    for (const Matrix& j : js) {
      if (j.rows() != n) detail::field_error(has_m ? "matrices" : "family", "matrices must all have the same size");
    }
    if (!cfg.params.contains("k")) cfg.params["k"] = cfg.spec ? cfg.spec->k : 0;
    const int k = cfg.params["k"].get<int>();
    if (k > n) detail::field_error("k", "exceeds the matrix size");
    if (cfg.spec && cfg.spec->n != n) detail::field_error("matrices", "size does not match the system's n");
    const double scale = 1.0 + js.front().cwiseAbs().maxCoeff();
    if ((js.back() - js.front()).cwiseAbs().maxCoeff() > 1e-12 * scale) {
      detail::field_error(has_m ? "matrices" : "family", "is not closed: loop must close (first matrix = last matrix)");
    }
  }
  return cfg;
}

/// Reads a JSON document from disk. Parse errors carry the byte offset.
inline json read_document(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("config: cannot open '" + path + "'", json{{"path", path}});
  std::stringstream buf;
  buf << in.rdbuf();
  try {
    return json::parse(buf.str());
  } catch (const json::parse_error& e) {
    throw InputError("config: parse error in '" + path + "': " + e.what(), json{{"path", path}, {"byte", e.byte}});
  }
}

/// Reads and validates a config file; `overrides` is merged on top first.
inline RunConfig load_config(const std::string& path, const json& overrides = json::object()) {
  json doc = read_document(path);
  if (doc.is_object()) doc.merge_patch(overrides);
  return parse_config(doc);
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

/// Round-trip decimal text (17 significant digits, '.' separator, locale-free).
inline std::string csv_number(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, 17);
  return std::string(buf, r.ptr);
}

class CsvTable {
public:
  explicit CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}

  void row(const std::vector<std::string>& cells) { rows_.push_back(cells); }

  std::string str() const {
    std::string out;
    auto line = [&](const std::vector<std::string>& cells) {
      for (std::size_t i = 0; i < cells.size(); ++i) {
        if (i) out += ',';
        out += cells[i];
      }
      out += '\n';
    };
    line(header_);
    for (const auto& r : rows_) line(r);
    return out;
  }

private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

namespace detail {

inline std::vector<std::string> names(const std::string& prefix, Eigen::Index count) {
  std::vector<std::string> out;
  for (Eigen::Index i = 1; i <= count; ++i) out.push_back(prefix + std::to_string(i));
  return out;
}

inline void append(std::vector<std::string>& cells, const Vector& v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) cells.push_back(csv_number(v(i)));
}

template <typename... Parts>
std::vector<std::string> concat(Parts&&... parts) {
  std::vector<std::string> out;
  (out.insert(out.end(), parts.begin(), parts.end()), ...);
  return out;
}

inline std::string loop_csv(const EigenLoopReport& r) {
  std::vector<std::string> header{"tau"};
  for (int i = 1; i <= r.p; ++i) {
    header.push_back("re" + std::to_string(i));
    header.push_back("im" + std::to_string(i));
  }
  CsvTable t(header);
  for (std::size_t s = 0; s < r.trace_tau.size(); ++s) {
    std::vector<std::string> cells{csv_number(r.trace_tau[s])};
    for (const Complex& c : r.trace_values[s]) {
      cells.push_back(csv_number(c.real()));
      cells.push_back(csv_number(c.imag()));
    }
    t.row(cells);
  }
  return t.str();
}

} // namespace detail

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

namespace detail {

struct CommandResult {
  json result;
  std::string csv;
  bool degenerate = false;
};

inline CommandResult run_command(const RunConfig& cfg) {
  const json& p = cfg.params;
  CommandResult out;
  NewtonOptions newton;
  newton.tols = cfg.tols;

  if (cfg.command == "audit") {
    const SystemSpec& sys = *cfg.spec;
    const AuditReport r = audit_point(sys, {vec(p["lambda"]), vec(p["x"])}, cfg.tols);
    out.result = {{"audit", r}};
    out.degenerate = r.degenerate();
    CsvTable t({"quantity", "value"});
    t.row({"is_equilibrium", r.is_equilibrium ? "1" : "0"});
    t.row({"f_residual", csv_number(r.f_residual)});
    t.row({"cond_i", r.cond_i.pass ? "1" : "0"});
    t.row({"cond_ii", r.cond_ii.pass ? "1" : "0"});
    t.row({"cond_iii", r.cond_iii.pass ? "1" : "0"});
    t.row({"prop21_residual", csv_number(r.prop21_residual)});
    out.csv = t.str();
  } else if (cfg.command == "find") {
    const SystemSpec& sys = *cfg.spec;
    const auto pts = enumerate_level_points(sys, vec(p["lambda"]), vec(p["level"]), p["budget"].get<int>(), cfg.seed,
                                            newton);
    out.result = {{"count", pts.size()}, {"points", pts}};
    CsvTable t(concat(names("x", sys.n), std::vector<std::string>{"residual_f"}));
    for (const auto& e : pts) {
      std::vector<std::string> cells;
      append(cells, e.state.x);
      cells.push_back(csv_number(e.residual_f));
      t.row(cells);
    }
    out.csv = t.str();
  } else if (cfg.command == "trace-fiber") {
    const SystemSpec& sys = *cfg.spec;
    FiberOptions o;
    o.tols = cfg.tols;
    o.direction = p["direction"].get<int>();
    o.initial_step = p["initial_step"].get<double>();
    o.max_step = p["max_step"].get<double>();
    const FiberTrace tr = trace_fiber(sys, vec(p["lambda"]), vec(p["x0"]), o);
    out.result = tr;
    CsvTable t(concat(std::vector<std::string>{"index"}, names("x", sys.n)));
    for (std::size_t i = 0; i < tr.points.size(); ++i) {
      std::vector<std::string> cells{std::to_string(i)};
      append(cells, tr.points[i]);
      t.row(cells);
    }
    out.csv = t.str();
  } else if (cfg.command == "transport") {
    const SystemSpec& sys = *cfg.spec;
    TransportOptions o;
    o.newton = newton;
    o.initial_step = p["initial_step"].get<double>();
    o.max_step = p["max_step"].get<double>();
    const TransportResult tr = lift_curve(sys, ParamPath{to_vectors(p["waypoints"])}, vec(p["x0"]), o);
    out.result = tr;
    out.result["endpoint"] = to_std(tr.endpoint());
    CsvTable t(concat(std::vector<std::string>{"t"}, names("lambda", sys.m), names("x", sys.n)));
    for (std::size_t i = 0; i < tr.t.size(); ++i) {
      std::vector<std::string> cells{csv_number(tr.t[i])};
      append(cells, tr.lambda_path[i]);
      append(cells, tr.gamma[i]);
      t.row(cells);
    }
    out.csv = t.str();
  } else if (cfg.command == "holonomy") {
    const SystemSpec& sys = *cfg.spec;
    TransportOptions o;
    o.newton = newton;
    o.max_step = p["max_step"].get<double>();
    std::vector<Vector> loop = to_vectors(p["loop"]);
    loop.back() = loop.front();
    const HolonomyReport h = holonomy_loop(sys, ParamPath{loop}, vec(p["level"]), p["budget"].get<int>(), cfg.seed, o);
    out.result = h;
    out.result["identity"] = h.identity();
    CsvTable t(concat(std::vector<std::string>{"index", "image", "displacement"}, names("x", sys.n),
                      names("y", sys.n)));
    for (std::size_t i = 0; i < h.points_before.size(); ++i) {
      std::vector<std::string> cells{std::to_string(i), std::to_string(h.permutation[i]),
                                     csv_number(h.displacements[i])};
      append(cells, h.points_before[i]);
      append(cells, h.points_after[i]);
      t.row(cells);
    }
    out.csv = t.str();
  } else if (cfg.command == "cocycle") {
    const SystemSpec& sys = *cfg.spec;
    TransportOptions o;
    o.newton = newton;
    o.max_step = p["max_step"].get<double>();
    const CocycleReport c = check_cocycle(sys, vec(p["lambda1"]), vec(p["lambda2"]), vec(p["lambda3"]), vec(p["x0"]), o);
    out.result = c;
    CsvTable t(concat(std::vector<std::string>{"route"}, names("x", sys.n)));
    std::vector<std::string> direct{"direct"}, composed{"composed"};
    append(direct, c.direct);
    append(composed, c.composed);
    t.row(direct);
    t.row(composed);
    out.csv = t.str();
  } else if (cfg.command == "eigen-loop") {
    FiberLoopOptions o;
    o.newton = newton;
    o.track.tols = cfg.tols;
    o.track.keep_trace = true;
    std::vector<Vector> loop = to_vectors(p["loop"]);
    loop.back() = loop.front();
    const EigenLoopReport r = eigen_along_fiber_loop(*cfg.spec, vec(p["lambda"]), loop, o);
    out.result = r;
    out.result["stability_signature"] = stability_signature(r);
    out.csv = loop_csv(r);
  } else if (cfg.command == "track-matrix-loop") {
    std::vector<Matrix> js;
    if (p.contains("matrices")) {
      for (const json& m : p["matrices"]) js.push_back(matrix_of(m, "matrices"));
    } else {
      js = sample_family(p["family"]);
    }
    js.back() = js.front();
    TrackOptions o;
    o.tols = cfg.tols;
    o.keep_trace = true;
    const EigenLoopReport r = track_matrix_loop(js, p["k"].get<int>(), o);
    out.result = r;
    out.result["stability_signature"] = stability_signature(r);
    out.csv = loop_csv(r);
  }
  return out;
}

inline json header(const RunConfig* cfg) {
  json doc = {{"schema_version", kSchemaVersion}};
  if (cfg != nullptr) {
    doc["command"] = cfg->command;
    doc["config"] = cfg->echo();
    doc["tolerances_used"] = cfg->tols;
  } else {
    doc["command"] = nullptr;
    doc["config"] = nullptr;
    doc["tolerances_used"] = Tolerances{};
  }
  return doc;
}

} // namespace detail

/// Exit code for a failure: 1 for input problems, 2 for everything numerical.
inline int exit_code_for(const Error& e) { return dynamic_cast<const InputError*>(&e) != nullptr ? 1 : 2; }

inline json error_report(const RunConfig* cfg, const std::string& kind, const std::string& message,
                         const json& details, int exit_code) {
  json doc = detail::header(cfg);
  doc["status"] = "error";
  doc["exit_code"] = exit_code;
  doc["error"] = {{"kind", kind}, {"message", message}, {"details", details}};
  return doc;
}

/// Runs a validated config. Never throws for library errors; they become
/// error reports with the matching exit code.
inline RunOutcome execute(const RunConfig& cfg) {
  RunOutcome out;
  try {
    detail::CommandResult r = detail::run_command(cfg);
    out.exit_code = r.degenerate ? 2 : 0;
    out.report = detail::header(&cfg);
    out.report["status"] = r.degenerate ? "degenerate" : "ok";
    out.report["exit_code"] = out.exit_code;
    out.report["result"] = std::move(r.result);
    out.csv = std::move(r.csv);
  } catch (const Error& e) {
    out.exit_code = exit_code_for(e);
    out.report = error_report(&cfg, e.kind(), e.what(), e.details(), out.exit_code);
  }
  return out;
}

/// Serialized JSON report (two-space indent, trailing newline).
inline std::string dump(const json& report) { return report.dump(2) + "\n"; }

/// Writes via a temporary file in the target directory, then renames.
inline void write_atomic(const std::string& path, const std::string& content) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  const fs::path tmp = target.string() + ".tmp." + std::to_string(::getpid());
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw InputError("cannot write '" + tmp.string() + "'");
    f << content;
    f.flush();
    if (!f) throw InputError("write failed for '" + tmp.string() + "'");
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) {
    fs::remove(tmp);
    throw InputError("cannot move report into place at '" + path + "': " + ec.message());
  }
}

/// Path of the CSV companion when format is "both": foo.json -> foo.csv.
inline std::string csv_path(const std::string& json_path) {
  std::filesystem::path p(json_path);
  if (p.extension() == ".json") return p.replace_extension(".csv").string();
  return json_path + ".csv";
}

} // namespace eqb::io
