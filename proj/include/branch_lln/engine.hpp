#pragma once

#include <functional>
#include <optional>
#include <utility>
#include <vector>

#include "branch_lln/core.hpp"
#include "branch_lln/motions.hpp"

namespace branch_lln::engine {

// The live front xi_t at one snapshot plus cumulative accounting. A branch
// ring replaces the parent in place, so one child continues the parent's
// account and the other k-1 count as births; k = 0 sends the account to the
// graveyard. Every account is then live, absorbed, or dead:
// births == live + absorbed_count + dead_count.
struct Population {
  double time = 0.0;
  std::vector<std::pair<ParticleId, ParticleState>> particles;  // live only
  std::uint64_t absorbed_count = 0;
  std::uint64_t dead_count = 0;
  std::uint64_t births = 0;

  std::size_t size() const { return particles.size(); }
  std::uint64_t count_in(const Interval& b) const {
    std::uint64_t n = 0;
    for (const auto& [id, s] : particles)
      if (s.is_live() && b.contains(s.value)) ++n;
    return n;
  }
};

struct Trajectory {
  std::vector<Population> snapshots;
  std::optional<double> extinct_time;
  bool overflowed = false;
};

// Simulates the branching dynamics: one initial particle at x0, per-particle
// Exp(r) branching clocks, motion between rings in substeps <= step_dt,
// replacement by k iid children at the parent position (k = 0 -> graveyard),
// absorption removes a particle from the live set and tallies it. Fully
// deterministic given the seed: all randomness comes from streams keyed by
// the Ulam-Harris label, and events are processed in (time, label) order.
//
// If the live count would exceed max_population the trajectory is returned
// with overflowed = true and snapshots truncated to those strictly before
// the overflow time.
Trajectory simulate(const BranchConfig& cfg);

struct ReplicaReduction {
  std::vector<std::vector<double>> rows;  // one fixed-width row per replica
  std::vector<EstimatorResult> merged;    // per-column statistics
  std::size_t overflow_count = 0;
};

// Runs n_rep independent replicas (replica index mixed into the seed),
// applies `reduce` per trajectory and merges column-wise. Output is
// independent of the worker count: rows land in index slots and the merge
// is a fixed-order pass.
ReplicaReduction run_replicas(
    const BranchConfig& cfg, std::size_t n_rep,
    const std::function<std::vector<double>(const Trajectory&)>& reduce,
    unsigned workers = 1,
    const std::function<void(std::size_t)>& progress = nullptr);

// Variable-length variant (e.g. particle positions per replica).
std::vector<std::vector<double>> run_replicas_collect(
    const BranchConfig& cfg, std::size_t n_rep,
    const std::function<std::vector<double>(const Trajectory&)>& collect,
    unsigned workers = 1, std::size_t* overflow_count = nullptr,
    const std::function<void(std::size_t)>& progress = nullptr);

}  // namespace branch_lln::engine
