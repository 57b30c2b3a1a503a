#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

// Counter-based random streams keyed by (seed, Ulam-Harris label, context).
// Draws depend only on the key, never on thread scheduling or traversal
// order, so a simulation is reproducible for any worker count.

namespace branch_lln {

// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

// Hash-combine style key chaining; the engine folds child indices
// incrementally so it never materializes label vectors on the hot path.
constexpr std::uint64_t fold_key(std::uint64_t key, std::uint64_t word) {
  key ^= mix64(word + 0x9E3779B97F4A7C15ull) + 0x9E3779B97F4A7C15ull +
         (key << 12) + (key >> 4);
  return mix64(key);
}

constexpr std::uint64_t root_key(std::uint64_t seed) {
  return mix64(seed ^ 0xA5A5F0F0C3C33C3Cull);
}

// Ulam-Harris label: sequence of child indices from the root (root = empty).
struct ParticleId {
  std::vector<std::uint32_t> path;

  ParticleId child(std::uint32_t index) const {
    ParticleId c{path};
    c.path.push_back(index);
    return c;
  }
  std::uint64_t key(std::uint64_t seed) const {
    std::uint64_t k = root_key(seed);
    for (std::uint32_t w : path) k = fold_key(k, w);
    return k;
  }
  std::string to_string() const {
    if (path.empty()) return "root";
    std::string s;
    for (std::size_t i = 0; i < path.size(); ++i) {
      if (i) s += '.';
      s += std::to_string(path[i]);
    }
    return s;
  }
  bool operator==(const ParticleId&) const = default;
  bool operator<(const ParticleId& o) const { return path < o.path; }
};

// Stream contexts; one independent stream per (particle, purpose).
enum StreamContext : std::uint64_t {
  kBranchClock = 0,
  kMotion = 1,
  kOffspring = 2,
};

class RandomStream {
 public:
  explicit RandomStream(std::uint64_t key) : key_(key) {}

  std::uint64_t next_u64() {
    counter_ += 0x9E3779B97F4A7C15ull;
    return mix64(key_ + counter_);
  }

  // [0, 1)
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Box-Muller; the second variate is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    const double rad = std::sqrt(-2.0 * std::log(u1));
    const double ang = 2.0 * M_PI * u2;
    spare_ = rad * std::sin(ang);
    has_spare_ = true;
    return rad * std::cos(ang);
  }

  double exponential(double rate) {
    return -std::log(1.0 - uniform()) / rate;
  }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

inline RandomStream stream_for_key(std::uint64_t particle_key,
                                   std::uint64_t context) {
  return RandomStream(fold_key(particle_key, context ^ 0x5851F42D4C957F2Dull));
}

inline RandomStream stream_for(std::uint64_t seed, const ParticleId& id,
                               std::uint64_t context) {
  return stream_for_key(id.key(seed), context);
}

// Derived seed for replica i of a run; mixed so replicas are independent.
constexpr std::uint64_t replica_seed(std::uint64_t seed, std::uint64_t replica) {
  return fold_key(root_key(seed ^ 0x6C62272E07BB0142ull), replica);
}

}  // namespace branch_lln
