#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "branch_lln/core.hpp"

namespace branch_lln::stats {

double normal_cdf(double z);

// Mean / stderr over a sample; se = sd / sqrt(n), 0 when n < 2.
EstimatorResult estimate(const std::vector<double>& xs);

// Plain mean of w_i * f_i with n_eff computed from the weights.
EstimatorResult weighted_estimate(const std::vector<double>& products,
                                  const std::vector<double>& weights);

// One-sample Kolmogorov-Smirnov distance of (possibly weighted) samples
// against a reference cdf. cdf_left is the left limit F(x-) for reference
// distributions with atoms; defaults to cdf.
double ks_distance(std::vector<double> samples,
                   const std::function<double(double)>& cdf,
                   const std::function<double(double)>& cdf_left = nullptr,
                   std::vector<double> weights = {});

// Two-sample KS distance and asymptotic p-value.
double ks_two_sample(std::vector<double> a, std::vector<double> b);
double ks_two_sample_pvalue(const std::vector<double>& a,
                            const std::vector<double>& b);

// Asymptotic Kolmogorov tail Q(lambda) = 2 sum (-1)^{k-1} exp(-2 k^2 lambda^2).
double kolmogorov_q(double lambda);

// Upper tail of the chi-square distribution with k dof (regularized
// incomplete gamma Q(k/2, x/2)).
double chi_square_tail(double x, double dof);

// Pearson chi-square p-value of observed counts against expected counts.
// Bins with expected < 5 are pooled into their neighbor.
double chi_square_gof_pvalue(const std::vector<double>& observed,
                             const std::vector<double>& expected);

// Least-squares slope of y over x.
double fit_slope(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace branch_lln::stats
