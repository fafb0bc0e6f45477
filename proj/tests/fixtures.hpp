#pragma once

// Test fixtures built on the library: seeded equilibria of the built-ins and
// small vector helpers.

#include <initializer_list>
#include <random>
#include <vector>

#include <eqbundle/finder.hpp>

namespace fixture {

inline eqb::Vector vec(std::initializer_list<double> v) {
  eqb::Vector out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

/// Equilibria that pass conditions ii and iii: random (lambda, x), then Newton
/// on the level through x.
inline std::vector<eqb::PointState> sample_equilibria(const eqb::SystemSpec& sys, int count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<eqb::PointState> out;
  for (int attempt = 0; static_cast<int>(out.size()) < count && attempt < 100 * count; ++attempt) {
    const eqb::PointState u = eqb::sample_point(sys, rng);
    try {
      const eqb::EquilibriumPoint p = eqb::newton_on_level_set(sys, u.lambda, sys.h(u.x), u.x);
      if (p.audit.is_equilibrium && p.audit.cond_ii.pass && p.audit.cond_iii.pass && p.audit.in_domain) {
        out.push_back(p.state);
      }
    } catch (const eqb::Error&) {
    }
  }
  return out;
}

} // namespace fixture
