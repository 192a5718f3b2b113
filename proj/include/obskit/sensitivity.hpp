#pragma once

// Sensitivity analysis for matched pairs under the Gamma model: two subjects
// matched on observed covariates may differ in their odds of treatment by at
// most a factor Gamma. For each Gamma the largest possible one-sided p-value
// is obtained by comparing the test statistic with a bounding distribution in
// which each pair is "positive" independently with probability
// Gamma / (1 + Gamma).

#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "obskit/error.hpp"
#include "obskit/pairs.hpp"
#include "obskit/parallel.hpp"
#include "obskit/random.hpp"
#include "obskit/stats.hpp"

namespace obskit {

enum class BoundMethod { kExactBinomial, kNormalApprox, kExactConvolution };

inline std::string_view to_string(BoundMethod m) {
  switch (m) {
    case BoundMethod::kExactBinomial: return "exact-binomial";
    case BoundMethod::kNormalApprox: return "normal-approx";
    case BoundMethod::kExactConvolution: return "exact-convolution";
  }
  return "unknown";
}

inline BoundMethod parse_bound_method(std::string_view s) {
  if (s == "exact-binomial") return BoundMethod::kExactBinomial;
  if (s == "normal-approx" || s == "normal") return BoundMethod::kNormalApprox;
  if (s == "exact-convolution" || s == "exact") return BoundMethod::kExactConvolution;
  throw ValidationError("unknown bound method '" + std::string(s) + "'");
}

struct GammaBoundResult {
  double gamma = 1.0;
  double statistic = 0.0;
  double p_upper = 1.0;
  double mu_bound = 0.0;
  double sigma_bound = 0.0;
  BoundMethod method = BoundMethod::kNormalApprox;
};

inline void check_gamma(double gamma) {
  if (!std::isfinite(gamma) || !(gamma >= 1.0))
    throw ValidationError("gamma must be a finite real >= 1");
}

inline double positive_probability(double gamma) { return gamma / (1.0 + gamma); }

// McNemar's test for D discordant pairs of which T had the event in the
// treated member; p_upper = P(X >= T), X ~ Binomial(D, Gamma/(1+Gamma)).
// kNormalApprox replaces the binomial tail by its continuity-corrected normal
// approximation, the convention of the classical published tables.
inline GammaBoundResult mcnemar_gamma_bound(long discordant, long treated_events, double gamma,
                                            BoundMethod method = BoundMethod::kExactBinomial) {
  check_gamma(gamma);
  if (discordant < 1) throw ValidationError("discordant count must be >= 1");
  if (treated_events < 0 || treated_events > discordant)
    throw ValidationError("treated events must lie in [0, discordant]");
  if (method == BoundMethod::kExactConvolution)
    throw ValidationError("McNemar bound supports exact-binomial or normal-approx");
  const double p = positive_probability(gamma);
  GammaBoundResult r;
  r.gamma = gamma;
  r.statistic = static_cast<double>(treated_events);
  r.mu_bound = static_cast<double>(discordant) * p;
  r.sigma_bound = std::sqrt(static_cast<double>(discordant) * p * (1.0 - p));
  r.method = method;
  if (method == BoundMethod::kExactBinomial) {
    r.p_upper = stats::binomial_upper_tail(discordant, treated_events, p);
  } else if (treated_events == 0) {
    r.p_upper = 1.0;
  } else {
    r.p_upper = stats::normal_sf((r.statistic - 0.5 - r.mu_bound) / r.sigma_bound);
  }
  return r;
}

// Sufficient summary of a signed-rank sample for the normal bound.
struct SignedRankSummary {
  double statistic = 0.0;  // sum of ranks of positive differences
  double rank_sum = 0.0;
  double rank_sum_sq = 0.0;
  std::size_t m = 0;
};

inline SignedRankSummary summarize(const RankedPairs& r) {
  SignedRankSummary s;
  s.m = r.size();
  for (std::size_t i = 0; i < r.size(); ++i) {
    const double q = r.abs_ranks[i];
    s.rank_sum += q;
    s.rank_sum_sq += q * q;
    if (r.signs[i] > 0) s.statistic += q;
  }
  return s;
}

// Normal approximation to the bounding distribution, no continuity correction.
inline GammaBoundResult wilcoxon_normal_bound(const SignedRankSummary& s, double gamma) {
  check_gamma(gamma);
  if (s.m == 0) throw ValidationError("no nonzero pairs");
  const double p = positive_probability(gamma);
  GammaBoundResult r;
  r.gamma = gamma;
  r.statistic = s.statistic;
  r.mu_bound = p * s.rank_sum;
  r.sigma_bound = std::sqrt(p * (1.0 - p) * s.rank_sum_sq);
  if (!(r.sigma_bound > 0.0)) throw NumericError("bounding distribution has zero variance");
  r.p_upper = stats::normal_sf((s.statistic - r.mu_bound) / r.sigma_bound);
  r.method = BoundMethod::kNormalApprox;
  return r;
}

inline constexpr std::size_t kMaxExactPairs = 2000;

// Exact tail of the bounding distribution by dynamic programming over the
// (doubled, when ties produce half ranks) integer rank sums.
inline GammaBoundResult wilcoxon_exact_bound(const RankedPairs& ranked, double gamma) {
  check_gamma(gamma);
  const std::size_t m = ranked.size();
  if (m == 0) throw ValidationError("no nonzero pairs");
  if (m > kMaxExactPairs)
    throw ValidationError("exact-convolution is limited to " + std::to_string(kMaxExactPairs) + " pairs");
  bool integral = true;
  for (double q : ranked.abs_ranks) integral = integral && (q == std::floor(q));
  const long scale = integral ? 1 : 2;
  std::vector<long> w(m);
  long total = 0;
  long t_scaled = 0;
  for (std::size_t i = 0; i < m; ++i) {
    w[i] = std::lround(ranked.abs_ranks[i] * static_cast<double>(scale));
    total += w[i];
    if (ranked.signs[i] > 0) t_scaled += w[i];
  }
  const double p = positive_probability(gamma);
  const double q = 1.0 - p;
  std::vector<double> dp(static_cast<std::size_t>(total) + 1, 0.0);
  dp[0] = 1.0;
  long reach = 0;
  for (std::size_t i = 0; i < m; ++i) {
    const long wi = w[i];
    reach += wi;
    for (long s = reach; s >= wi; --s) dp[s] = dp[s] * q + dp[s - wi] * p;
    for (long s = std::min(wi - 1, reach); s >= 0; --s) dp[s] *= q;
  }
  stats::CompensatedSum tail;
  for (long s = total; s >= t_scaled; --s) tail.add(dp[s]);

  const SignedRankSummary summary = summarize(ranked);
  GammaBoundResult r;
  r.gamma = gamma;
  r.statistic = summary.statistic;
  r.mu_bound = p * summary.rank_sum;
  r.sigma_bound = std::sqrt(p * q * summary.rank_sum_sq);
  r.p_upper = std::min(1.0, tail.value());
  r.method = BoundMethod::kExactConvolution;
  return r;
}

inline GammaBoundResult wilcoxon_gamma_bound(const RankedPairs& ranked, double gamma,
                                             BoundMethod method = BoundMethod::kNormalApprox) {
  switch (method) {
    case BoundMethod::kNormalApprox: return wilcoxon_normal_bound(summarize(ranked), gamma);
    case BoundMethod::kExactConvolution: return wilcoxon_exact_bound(ranked, gamma);
    case BoundMethod::kExactBinomial: break;
  }
  throw ValidationError("exact-binomial applies to McNemar's test, not the signed-rank test");
}

inline GammaBoundResult wilcoxon_gamma_bound(std::span<const double> diffs, double gamma,
                                             BoundMethod method = BoundMethod::kNormalApprox) {
  return wilcoxon_gamma_bound(rank_diffs(diffs), gamma, method);
}

// (Lambda, Delta) amplification of a Gamma.
struct AmplificationPoint {
  double lambda = 0.0;
  double delta = 0.0;
  double gamma = 0.0;
};

inline AmplificationPoint amplify(double lambda, double delta) {
  if (!(lambda > 1.0) || !(delta > 1.0) || !std::isfinite(lambda) || !std::isfinite(delta))
    throw ValidationError("lambda and delta must be finite and > 1");
  return {lambda, delta, (lambda * delta + 1.0) / (lambda + delta)};
}

struct AmplificationCurve {
  double gamma = 1.0;
  std::vector<AmplificationPoint> points;
  std::vector<std::string> notes;  // grid values skipped because lambda <= gamma
};

// For each lambda in the grid, the delta that amplifies to gamma.
inline AmplificationCurve amplification_curve(double gamma, std::span<const double> lambdas) {
  if (!(gamma > 1.0) || !std::isfinite(gamma)) throw ValidationError("gamma must be finite and > 1");
  AmplificationCurve c;
  c.gamma = gamma;
  for (double lambda : lambdas) {
    if (!(lambda > gamma) || !std::isfinite(lambda)) {
      c.notes.push_back("lambda " + csv::format_sig6(lambda) + " <= gamma: no finite delta");
      continue;
    }
    c.points.push_back({lambda, (lambda * gamma - 1.0) / (lambda - gamma), gamma});
  }
  return c;
}

// Design sensitivity of the signed-rank test for an additive shift delta with
// standard normal errors: the Gamma at which p~ = P(Y_i + Y_j > 0) equals
// Gamma / (1 + Gamma).
struct DesignSensitivity {
  double effect_size = 0.0;
  double gamma_tilde = 1.0;
};

inline DesignSensitivity design_sensitivity_normal(double delta) {
  if (!(delta >= 0.0) || !std::isfinite(delta)) throw ValidationError("effect size must be >= 0");
  const double z = std::numbers::sqrt2 * delta;
  return {delta, stats::normal_cdf(z) / stats::normal_sf(z)};
}

struct PowerEstimate {
  std::size_t n_pairs = 0;
  double effect_size = 0.0;
  double gamma = 1.0;
  double alpha = 0.05;
  std::size_t reps = 0;
  double power = 0.0;
  double mc_standard_error = 0.0;
  BoundMethod method = BoundMethod::kNormalApprox;
};

inline constexpr std::uint64_t kPowerStreamTag = 0x504F574552ull;  // "POWER"

// Power of the sensitivity analysis in the favorable situation: differences
// are iid Normal(delta, 1), no hidden bias, test at Gamma.
inline PowerEstimate power_of_sensitivity(std::size_t n, double delta, double gamma, double alpha,
                                          std::size_t reps, std::uint64_t seed, unsigned threads = 0,
                                          BoundMethod method = BoundMethod::kNormalApprox) {
  check_gamma(gamma);
  if (n < 1) throw ValidationError("need at least one pair");
  if (reps < 100) throw ValidationError("power simulation needs reps >= 100");
  if (!(alpha > 0.0 && alpha < 1.0)) throw ValidationError("alpha must lie in (0, 1)");
  std::vector<std::uint8_t> rejected(reps, 0);
  parallel_for(reps, threads, [&](std::size_t rep) {
    Stream rng(seed, stream_id({kPowerStreamTag, rep}));
    std::vector<double> d(n);
    for (auto& x : d) x = delta + rng.normal();
    const RankedPairs ranked = rank_diffs(d);
    rejected[rep] = wilcoxon_gamma_bound(ranked, gamma, method).p_upper <= alpha ? 1 : 0;
  });
  PowerEstimate e;
  e.n_pairs = n;
  e.effect_size = delta;
  e.gamma = gamma;
  e.alpha = alpha;
  e.reps = reps;
  e.method = method;
  const auto hits = std::accumulate(rejected.begin(), rejected.end(), std::size_t{0});
  e.power = static_cast<double>(hits) / static_cast<double>(reps);
  e.mc_standard_error = stats::proportion_se(e.power, reps);
  return e;
}

}  // namespace obskit
