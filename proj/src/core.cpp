#include "branch_lln/core.hpp"

#include <cmath>
#include <numeric>

#include "branch_lln/motions.hpp"

namespace branch_lln {

OffspringLaw make_offspring(const std::map<int, double>& pmf) {
  if (pmf.empty()) throw InvalidPmf("offspring pmf is empty");
  OffspringLaw law;
  double total = 0.0;
  for (const auto& [k, p] : pmf) {
    if (k < 0) throw InvalidPmf("offspring count " + std::to_string(k) + " < 0");
    if (p < 0.0) throw InvalidPmf("negative probability at k=" + std::to_string(k));
    law.counts.push_back(k);
    law.probs.push_back(p);
    total += p;
    law.m1 += k * p;
    law.m2 += static_cast<double>(k) * k * p;
  }
  if (std::abs(total - 1.0) > 1e-12)
    throw InvalidPmf("offspring pmf sums to " + std::to_string(total));
  if (law.m1 <= 1.0)
    throw SubcriticalOffspring("offspring mean m1 = " + std::to_string(law.m1) +
                               " violates m1 > 1");
  // Jensen: m2 >= m1^2 holds for any pmf; guards moment arithmetic.
  if (law.m2 < law.m1 * law.m1 - 1e-12)
    throw InvalidPmf("m2 < m1^2");
  law.cdf.resize(law.probs.size());
  std::partial_sum(law.probs.begin(), law.probs.end(), law.cdf.begin());
  law.cdf.back() = 1.0;
  return law;
}

void BranchConfig::validate() const {
  if (!motion) throw InvalidConfig("no motion model");
  if (offspring.counts.empty()) throw InvalidConfig("no offspring law");
  if (r <= 0.0) throw InvalidConfig("branch rate r must be > 0");
  if (t_end < 0.0) throw InvalidConfig("t_end must be >= 0");
  if (step_dt <= 0.0) throw InvalidConfig("step_dt must be > 0");
  if (max_population == 0) throw InvalidConfig("max_population must be >= 1");
  const double growth = r * (offspring.m1 - 1.0);
  if (growth < motion->eigen.lambda)
    throw InvalidConfig("assumption I2 violated: r(m1-1) = " +
                        std::to_string(growth) + " < lambda = " +
                        std::to_string(motion->eigen.lambda));
  double prev = -1.0;
  for (double s : snapshot_times) {
    if (s < 0.0) throw InvalidConfig("snapshot time < 0");
    if (s <= prev && !(prev < 0.0))
      throw InvalidConfig("snapshot times must be strictly increasing");
    if (s > t_end) throw InvalidConfig("snapshot time beyond t_end");
    prev = s;
  }
  if (!x0.is_live()) throw InvalidConfig("x0 must be a live state");
  if (motion->kind == StateKind::Integer) {
    if (x0.value < 0.0 || x0.value != std::floor(x0.value))
      throw InvalidConfig("integer-state model requires integer x0 >= 0");
  }
  if (motion->eigen.h && motion->eigen.h(x0.value) <= 0.0)
    throw InvalidConfig("h(x0) must be > 0 for a live start state");
}

}  // namespace branch_lln
