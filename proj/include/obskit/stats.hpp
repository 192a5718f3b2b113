#pragma once

// Small numerical toolkit shared by the statistical modules.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <numeric>
#include <span>
#include <vector>

#include "obskit/error.hpp"

namespace obskit::stats {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

// Neumaier's variant of Kahan summation.
class CompensatedSum {
 public:
  void add(double x) noexcept {
    const double t = sum_ + x;
    if (std::abs(sum_) >= std::abs(x)) {
      comp_ += (sum_ - t) + x;
    } else {
      comp_ += (x - t) + sum_;
    }
    sum_ = t;
  }
  double value() const noexcept { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

// 1 - Phi(z), accurate in the far upper tail.
inline double normal_sf(double z) { return 0.5 * std::erfc(z / std::numbers::sqrt2); }

inline double logit(double p) { return std::log(p / (1.0 - p)); }

inline double expit(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double log_choose(double n, double k) {
  return std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
}

// log(exp(a) + exp(b)) without overflow.
inline double log_add(double a, double b) {
  if (a == -kInf) return b;
  if (b == -kInf) return a;
  const double hi = std::max(a, b);
  return hi + std::log1p(std::exp(std::min(a, b) - hi));
}

inline double log_sum_exp(std::span<const double> xs) {
  double hi = -kInf;
  for (double x : xs) hi = std::max(hi, x);
  if (hi == -kInf) return -kInf;
  CompensatedSum s;
  for (double x : xs) s.add(std::exp(x - hi));
  return hi + std::log(s.value());
}

inline double log_binomial_pmf(long n, long x, double lp, double lq) {
  return log_choose(static_cast<double>(n), static_cast<double>(x)) + static_cast<double>(x) * lp +
         static_cast<double>(n - x) * lq;
}

// P(X >= t) for X ~ Binomial(n, p), summed term by term in log space. When
// the mean lies at or above t the lower tail is summed and subtracted, which
// keeps tails near 1 free of accumulated rounding.
inline double binomial_upper_tail(long n, long t, double p) {
  if (t <= 0) return 1.0;
  if (t > n) return 0.0;
  if (p <= 0.0) return 0.0;
  if (p >= 1.0) return 1.0;
  const double lp = std::log(p);
  const double lq = std::log1p(-p);
  const bool upper = static_cast<double>(t) > static_cast<double>(n) * p;
  std::vector<double> terms;
  if (upper) {
    for (long x = t; x <= n; ++x) terms.push_back(log_binomial_pmf(n, x, lp, lq));
    return std::min(1.0, std::exp(log_sum_exp(terms)));
  }
  for (long x = 0; x < t; ++x) terms.push_back(log_binomial_pmf(n, x, lp, lq));
  return std::clamp(-std::expm1(log_sum_exp(terms)), 0.0, 1.0);
}

// Upper tail of chi-square with 2k degrees of freedom at x (closed form).
inline double chi2_even_sf(double x, int k) {
  if (x <= 0) return 1.0;
  const double h = 0.5 * x;
  std::vector<double> terms;
  terms.reserve(static_cast<std::size_t>(k));
  for (int j = 0; j < k; ++j) terms.push_back(-h + j * std::log(h) - std::lgamma(j + 1.0));
  return std::min(1.0, std::exp(log_sum_exp(terms)));
}

// Average ranks (1-based) of the values; tied values share the mean rank.
inline std::vector<double> average_ranks(std::span<const double> values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i + 1;
    while (j < n && values[order[j]] == values[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + 1 + j);  // mean of i+1 .. j
    for (std::size_t k = i; k < j; ++k) ranks[order[k]] = r;
    i = j;
  }
  return ranks;
}

inline double mean(std::span<const double> xs) {
  if (xs.empty()) return std::numeric_limits<double>::quiet_NaN();
  CompensatedSum s;
  for (double x : xs) s.add(x);
  return s.value() / static_cast<double>(xs.size());
}

// Sample variance with the n - 1 denominator.
inline double variance(std::span<const double> xs) {
  if (xs.size() < 2) return 0.0;
  const double m = mean(xs);
  CompensatedSum s;
  for (double x : xs) s.add((x - m) * (x - m));
  return s.value() / static_cast<double>(xs.size() - 1);
}

struct KsResult {
  double statistic;
  double p_value;
};

// One-sample Kolmogorov-Smirnov test against Uniform(0, 1), asymptotic
// p-value with Stephens' small-sample adjustment.
inline KsResult ks_uniform(std::vector<double> xs) {
  if (xs.empty()) throw ValidationError("ks_uniform: empty sample");
  std::sort(xs.begin(), xs.end());
  const auto n = static_cast<double>(xs.size());
  double d = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double x = std::clamp(xs[i], 0.0, 1.0);
    d = std::max({d, (static_cast<double>(i) + 1.0) / n - x, x - static_cast<double>(i) / n});
  }
  const double sn = std::sqrt(n);
  const double lambda = (sn + 0.12 + 0.11 / sn) * d;
  double p = 0.0;
  if (lambda < 0.2) {
    p = 1.0;
  } else {
    double sign = 1.0;
    for (int k = 1; k <= 100; ++k) {
      const double term = sign * std::exp(-2.0 * k * k * lambda * lambda);
      p += term;
      if (std::abs(term) < 1e-12) break;
      sign = -sign;
    }
    p = std::clamp(2.0 * p, 0.0, 1.0);
  }
  return {d, p};
}

// Binomial Monte Carlo standard error of a proportion.
inline double proportion_se(double p, std::size_t reps) {
  if (reps == 0) return 0.0;
  return std::sqrt(std::max(0.0, p * (1.0 - p)) / static_cast<double>(reps));
}

}  // namespace obskit::stats
