#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "branch_lln/rng.hpp"

namespace branch_lln {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

struct InvalidPmf : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct SubcriticalOffspring : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct InvalidParameter : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct InvalidGenerator : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct InvalidConfig : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct ZeroEigenfunction : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct EmptyDenominator : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct MissingNuMass : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NoSurvivors : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct TruncationTooSmall : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

enum class StateKind { Real, Integer };

// Scalar particle state. Live states carry the coordinate (integer-state
// models store the integer exactly in the double); Absorbed marks the
// boundary, Dead the graveyard after a zero-offspring branch. Both are
// terminal.
struct ParticleState {
  enum class Tag : std::uint8_t { Live, Absorbed, Dead };
  Tag tag = Tag::Live;
  double value = 0.0;

  static ParticleState live(double v) { return {Tag::Live, v}; }
  static ParticleState absorbed() { return {Tag::Absorbed, 0.0}; }
  static ParticleState dead() { return {Tag::Dead, 0.0}; }
  bool is_live() const { return tag == Tag::Live; }
  bool operator==(const ParticleState&) const = default;
};

// Half-open interval [lo, hi); hi may be +infinity.
struct Interval {
  double lo = 0.0;
  double hi = 0.0;
  bool contains(double x) const { return x >= lo && x < hi; }
  double length() const { return hi - lo; }
};

struct OffspringLaw {
  std::vector<int> counts;        // sorted support
  std::vector<double> probs;      // aligned with counts
  std::vector<double> cdf;        // cumulative, cdf.back() == 1
  double m1 = 0.0;                // mean
  double m2 = 0.0;                // second moment

  double variance() const { return m2 - m1 * m1; }
  int sample(RandomStream& rs) const {
    const double u = rs.uniform();
    for (std::size_t i = 0; i + 1 < cdf.size(); ++i)
      if (u < cdf[i]) return counts[i];
    return counts.back();
  }
};

// Builds the law from a pmf, computing m1 and m2 exactly. Rejects bad
// normalization and laws with m1 <= 1 (supercriticality is assumed
// throughout).
OffspringLaw make_offspring(const std::map<int, double>& pmf);

// Eigen-data of an absorbed motion: eigenvalue lambda, right eigenfunction h
// (zero exactly on absorbing states), eigenmeasure nu where known, and the
// regular-variation factor p(t). Normalization follows per-model conventions
// recorded in normalization_note; ratio statistics are normalization
// invariant but D_t values are not.
struct EigenData {
  double lambda = 0.0;
  std::function<double(double)> h;                // on live coordinates
  std::function<double(double)> nu_cdf;           // optional
  std::function<double(const Interval&)> nu_mass; // optional
  std::function<double(double)> p;
  std::string normalization_note;

  bool has_nu_cdf() const { return static_cast<bool>(nu_cdf); }
  bool has_nu_mass() const { return static_cast<bool>(nu_mass); }
  double h_at(const ParticleState& s) const {
    return s.is_live() ? h(s.value) : 0.0;
  }
};

// Monte Carlo mean with its standard error; the universal statistical
// return type. n_eff < n flags heavy importance weights.
struct EstimatorResult {
  double mean = 0.0;
  double se = 0.0;       // sample standard deviation / sqrt(n)
  long long n = 0;
  double n_eff = 0.0;    // (sum w)^2 / sum w^2 for weighted estimators
  bool low_ess = false;  // n_eff < 100
  bool analytic = false; // value from quadrature, not sampling
};

struct MotionModel;  // motions.hpp

struct BranchConfig {
  const MotionModel* motion = nullptr;
  OffspringLaw offspring;
  double r = 0.0;                     // branch rate
  ParticleState x0;
  double t_end = 0.0;
  std::vector<double> snapshot_times; // sorted, within [0, t_end]
  double step_dt = 0.01;              // motion substep cap
  std::size_t max_population = 1'000'000;
  std::uint64_t seed = 0;

  // Throws InvalidConfig on violated invariants. The mean-growth condition
  // is enforced as r(m1-1) >= lambda: the boundary case is admitted because
  // all finite-t identities hold there (only the t->infinity L2 limit
  // degenerates, which is a measurable outcome, not a config error).
  void validate() const;
};

}  // namespace branch_lln
