// eqbundle <command> --config <path> [--output <path>] [--seed <int>]
//          [--format json|csv|both] [--tol-<name> <value>]

#include <algorithm>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include <eqbundle/io.hpp>

namespace {

using eqb::io::json;

void emit(const std::string& path, const std::string& content) {
  if (path.empty()) {
    std::cout << content;
  } else {
    eqb::io::write_atomic(path, content);
  }
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"Equilibrium bundle toolkit: audits, fibers, transport, holonomy and eigenvalue monodromy"};
  std::string command, config_path, output_path, format;
  std::optional<std::uint64_t> seed;
  app.add_option("command", command, "one of: audit, find, trace-fiber, transport, holonomy, cocycle, eigen-loop, "
                                     "track-matrix-loop")
      ->required()
      ->check(CLI::IsMember(eqb::io::commands()));
  app.add_option("--config", config_path, "JSON run configuration")->required();
  app.add_option("--output", output_path, "report path (default: standard output)");
  app.add_option("--seed", seed, "seed for multistart enumeration");
  app.add_option("--format", format, "json, csv or both")->check(CLI::IsMember({"json", "csv", "both"}));

  std::map<std::string, double> tol_values;
  for (const auto& [name, value] : eqb::Tolerances{}.as_map()) {
    std::string flag = name;
    std::replace(flag.begin(), flag.end(), '_', '-');
    app.add_option_function<double>(
        "--tol-" + flag, [&tol_values, key = name](double v) { tol_values[key] = v; },
        "override tolerance '" + name + "' (default " + eqb::io::csv_number(value) + ")");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  json overrides = json::object();
  if (seed) overrides["seed"] = *seed;
  if (!output_path.empty()) overrides["output"]["path"] = output_path;
  if (!format.empty()) overrides["output"]["format"] = format;
  for (const auto& [name, value] : tol_values) overrides["tolerances"][name] = value;

  std::optional<eqb::io::RunConfig> cfg;
  try {
    json doc = eqb::io::read_document(config_path);
    if (doc.is_object() && doc.contains("command") && doc["command"] != command) {
      throw eqb::InputError("config command '" + doc["command"].dump() + "' does not match the requested '" + command +
                            "'");
    }
    if (doc.is_object()) {
      doc["command"] = command;
      doc.merge_patch(overrides);
    }
    cfg = eqb::io::parse_config(doc);
  } catch (const eqb::Error& e) {
    std::cerr << "eqbundle: " << e.kind() << ": " << e.what() << "\n";
    const json report = eqb::io::error_report(nullptr, e.kind(), e.what(), e.details(), 1);
    const std::string target = format == "csv" ? std::string() : output_path;
    try {
      emit(target, eqb::io::dump(report));
    } catch (const eqb::Error& w) {
      std::cerr << "eqbundle: " << w.what() << "\n";
    }
    return 1;
  }

  const eqb::io::RunOutcome outcome = eqb::io::execute(*cfg);
  if (outcome.report.value("status", "") == "error") {
    std::cerr << "eqbundle: " << outcome.report["error"]["kind"].get<std::string>() << ": "
              << outcome.report["error"]["message"].get<std::string>() << "\n";
  }
  try {
    const bool failed = outcome.csv.empty();
    if (cfg->format == "json" || cfg->format == "both" || failed) {
      emit(cfg->format == "csv" ? std::string() : cfg->output_path, eqb::io::dump(outcome.report));
    }
    if (!failed && cfg->format == "csv") emit(cfg->output_path, outcome.csv);
    if (!failed && cfg->format == "both") emit(eqb::io::csv_path(cfg->output_path), outcome.csv);
  } catch (const eqb::Error& e) {
    std::cerr << "eqbundle: " << e.what() << "\n";
    return 1;
  }
  return outcome.exit_code;
}
