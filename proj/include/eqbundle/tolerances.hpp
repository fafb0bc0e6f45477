#pragma once

#include <map>
#include <string>

#include <nlohmann/json.hpp>

#include "errors.hpp"

namespace eqb {

/// Every numerical cutoff used by the library, in one record so that reports
/// can echo exactly what was applied.
struct Tolerances {
  /// ||f|| <= equilibrium * (1 + ||x||) classifies a point as an equilibrium.
  double equilibrium = 1e-9;
  /// Singular values <= rank_floor * sigma_max count as zero in audits (never
  /// below the spectral default max(r,c) * sigma_max * eps).
  double rank_floor = 1e-8;
  /// Smallest singular value of [ker | im] accepted as a direct sum.
  double transversality = 1.5e-8;
  /// Newton on level sets: converged when ||F|| <= newton * (1 + ||x0||).
  double newton = 1e-10;
  /// Clustering / endpoint matching radius, relative to the domain diameter.
  double cluster = 1e-6;
  /// Eigenvalue zero cutoff, relative to the spectral norm of the Jacobian.
  double zero = 1e-7;
  /// Minimum |smallest nonzero| / |largest zero| for a trusted spectrum split.
  double gap_ratio = 10.0;
  /// Eigenvalues closer than collision * (1 + ||J||_2) are treated as coincident.
  double collision = 1e-5;
  /// Accepted f . grad h residual for user-declared systems.
  double first_integral = 1e-8;
  /// Bound on f residual and h drift along lifted curves.
  double transport = 1e-8;
  /// Absolute slack for domain membership during continuation.
  double slack = 1e-9;

  /// Set one field by name; unknown names are an input error.
  void set(const std::string& name, double value) {
    auto* field = lookup(name);
    if (field == nullptr) {
      throw InputError("unknown tolerance '" + name + "'");
    }
    if (!(value >= 0.0)) {
      throw InputError("tolerance '" + name + "' must be non-negative");
    }
    *field = value;
  }

  std::map<std::string, double> as_map() const {
    return {{"equilibrium", equilibrium}, {"rank_floor", rank_floor},
            {"transversality", transversality}, {"newton", newton},
            {"cluster", cluster}, {"zero", zero},
            {"gap_ratio", gap_ratio}, {"collision", collision},
            {"first_integral", first_integral}, {"transport", transport},
            {"slack", slack}};
  }

private:
  double* lookup(const std::string& name) {
    if (name == "equilibrium") return &equilibrium;
    if (name == "rank_floor" || name == "rank-floor") return &rank_floor;
    if (name == "transversality") return &transversality;
    if (name == "newton") return &newton;
    if (name == "cluster") return &cluster;
    if (name == "zero") return &zero;
    if (name == "gap_ratio" || name == "gap-ratio") return &gap_ratio;
    if (name == "collision") return &collision;
    if (name == "first_integral" || name == "first-integral") return &first_integral;
    if (name == "transport") return &transport;
    if (name == "slack") return &slack;
    return nullptr;
  }
};

inline void to_json(nlohmann::json& j, const Tolerances& t) {
  j = nlohmann::json::object();
  for (const auto& [name, value] : t.as_map()) {
    j[name] = value;
  }
}

inline void from_json(const nlohmann::json& j, Tolerances& t) {
  if (!j.is_object()) {
    throw InputError("tolerances must be an object");
  }
  for (const auto& [name, value] : j.items()) {
    if (!value.is_number()) {
      throw InputError("tolerance '" + name + "' must be a number");
    }
    t.set(name, value.get<double>());
  }
}

} // namespace eqb
