#include "branch_lln/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace branch_lln::stats {

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

EstimatorResult estimate(const std::vector<double>& xs) {
  // non-finite entries (e.g. truncated overflow replicas) are ignored
  EstimatorResult r;
  double sum = 0.0;
  for (double x : xs) {
    if (!std::isfinite(x)) continue;
    sum += x;
    ++r.n;
  }
  if (r.n == 0) return r;
  r.mean = sum / double(r.n);
  if (r.n > 1) {
    double ss = 0.0;
    for (double x : xs)
      if (std::isfinite(x)) ss += (x - r.mean) * (x - r.mean);
    r.se = std::sqrt(ss / double(r.n - 1)) / std::sqrt(double(r.n));
  }
  r.n_eff = static_cast<double>(r.n);
  return r;
}

EstimatorResult weighted_estimate(const std::vector<double>& products,
                                  const std::vector<double>& weights) {
  EstimatorResult r = estimate(products);
  double sw = 0.0, sw2 = 0.0;
  for (double w : weights) {
    sw += w;
    sw2 += w * w;
  }
  r.n_eff = sw2 > 0.0 ? sw * sw / sw2 : 0.0;
  r.low_ess = r.n_eff < 100.0;
  return r;
}

double ks_distance(std::vector<double> samples,
                   const std::function<double(double)>& cdf,
                   const std::function<double(double)>& cdf_left,
                   std::vector<double> weights) {
  const std::size_t n = samples.size();
  if (n == 0) return 0.0;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return samples[a] < samples[b]; });
  double total = 0.0;
  if (weights.empty()) {
    total = static_cast<double>(n);
  } else {
    for (double w : weights) total += w;
  }
  double d = 0.0;
  double cum = 0.0;
  for (std::size_t idx = 0; idx < n; ++idx) {
    const std::size_t i = order[idx];
    const double x = samples[i];
    const double before = cum / total;
    cum += weights.empty() ? 1.0 : weights[i];
    const double after = cum / total;
    const double f = cdf(x);
    const double fl = cdf_left ? cdf_left(x) : f;
    d = std::max(d, std::max(after - f, fl - before));
  }
  return std::max(d, 0.0);
}

double ks_two_sample(std::vector<double> a, std::vector<double> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double na = double(a.size()), nb = double(b.size());
  std::size_t i = 0, j = 0;
  double d = 0.0;
  while (i < a.size() && j < b.size()) {
    const double x = std::min(a[i], b[j]);
    while (i < a.size() && a[i] <= x) ++i;
    while (j < b.size() && b[j] <= x) ++j;
    d = std::max(d, std::abs(double(i) / na - double(j) / nb));
  }
  return d;
}

double kolmogorov_q(double lambda) {
  if (lambda < 1e-8) return 1.0;
  double q = 0.0;
  for (int k = 1; k <= 100; ++k) {
    const double term = 2.0 * std::pow(-1.0, k - 1) *
                        std::exp(-2.0 * k * k * lambda * lambda);
    q += term;
    if (std::abs(term) < 1e-12) break;
  }
  return std::clamp(q, 0.0, 1.0);
}

double ks_two_sample_pvalue(const std::vector<double>& a,
                            const std::vector<double>& b) {
  const double d = ks_two_sample(a, b);
  const double ne = double(a.size()) * double(b.size()) /
                    (double(a.size()) + double(b.size()));
  const double sn = std::sqrt(ne);
  return kolmogorov_q((sn + 0.12 + 0.11 / sn) * d);
}

namespace {

// Regularized upper incomplete gamma Q(a, x), series + continued fraction.
double gamma_q(double a, double x) {
  if (x < 0.0 || a <= 0.0) return 1.0;
  if (x == 0.0) return 1.0;
  const double gln = std::lgamma(a);
  if (x < a + 1.0) {
    // lower series
    double ap = a, sum = 1.0 / a, del = sum;
    for (int i = 0; i < 500; ++i) {
      ap += 1.0;
      del *= x / ap;
      sum += del;
      if (std::abs(del) < std::abs(sum) * 1e-15) break;
    }
    return 1.0 - sum * std::exp(-x + a * std::log(x) - gln);
  }
  // continued fraction (Lentz)
  double b = x + 1.0 - a, c = 1e300, d = 1.0 / b, h = d;
  for (int i = 1; i < 500; ++i) {
    const double an = -double(i) * (double(i) - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < 1e-300) d = 1e-300;
    c = b + an / c;
    if (std::abs(c) < 1e-300) c = 1e-300;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < 1e-15) break;
  }
  return std::exp(-x + a * std::log(x) - gln) * h;
}

}  // namespace

double chi_square_tail(double x, double dof) { return gamma_q(dof / 2.0, x / 2.0); }

double chi_square_gof_pvalue(const std::vector<double>& observed,
                             const std::vector<double>& expected) {
  // pool low-expectation bins left to right
  std::vector<double> obs, exp_;
  double o_acc = 0.0, e_acc = 0.0;
  for (std::size_t i = 0; i < observed.size(); ++i) {
    o_acc += observed[i];
    e_acc += expected[i];
    if (e_acc >= 5.0) {
      obs.push_back(o_acc);
      exp_.push_back(e_acc);
      o_acc = e_acc = 0.0;
    }
  }
  if (e_acc > 0.0 && !exp_.empty()) {
    obs.back() += o_acc;
    exp_.back() += e_acc;
  }
  if (exp_.size() < 2) return 1.0;
  double chi2 = 0.0;
  for (std::size_t i = 0; i < exp_.size(); ++i)
    chi2 += (obs[i] - exp_[i]) * (obs[i] - exp_[i]) / exp_[i];
  return chi_square_tail(chi2, double(exp_.size() - 1));
}

double fit_slope(const std::vector<double>& x, const std::vector<double>& y) {
  const std::size_t n = std::min(x.size(), y.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= double(n);
  my /= double(n);
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  return sxx > 0.0 ? sxy / sxx : 0.0;
}

}  // namespace branch_lln::stats
