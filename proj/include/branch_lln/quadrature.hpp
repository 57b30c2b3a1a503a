#pragma once

#include <functional>

namespace branch_lln::quad {

struct Result {
  double value = 0.0;
  double error = 0.0;
  bool converged = false;
};

// Adaptive Gauss-Kronrod 7/15 on [a, b] with interval bisection.
// Stops when the summed error estimate is below max(abs_tol, rel_tol*|I|).
Result integrate(const std::function<double(double)>& f, double a, double b,
                 double abs_tol = 1e-10, double rel_tol = 1e-10,
                 int max_intervals = 4000);

}  // namespace branch_lln::quad
