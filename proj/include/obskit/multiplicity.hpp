#pragma once

// Multiple-testing control and p-value combination.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "obskit/error.hpp"
#include "obskit/parallel.hpp"
#include "obskit/random.hpp"
#include "obskit/stats.hpp"

namespace obskit {

class PValueSet {
 public:
  PValueSet() = default;
  PValueSet(std::vector<std::string> labels, std::vector<double> p_values)
      : labels_(std::move(labels)), p_(std::move(p_values)) {
    if (labels_.size() != p_.size()) throw ValidationError("labels and p-values differ in length");
    for (std::size_t i = 0; i < p_.size(); ++i) {
      if (!std::isfinite(p_[i]) || p_[i] < 0.0 || p_[i] > 1.0)
        throw ValidationError("p-value for '" + labels_[i] + "' must lie in [0, 1]");
    }
  }

  // Labels "p1", "p2", ...
  static PValueSet unlabeled(std::vector<double> p_values) {
    std::vector<std::string> labels(p_values.size());
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = "p" + std::to_string(i + 1);
    return PValueSet(std::move(labels), std::move(p_values));
  }

  std::size_t size() const noexcept { return p_.size(); }
  const std::vector<std::string>& labels() const noexcept { return labels_; }
  const std::vector<double>& values() const noexcept { return p_; }

  // Ascending p-value order; ties by label.
  std::vector<std::size_t> order() const {
    std::vector<std::size_t> idx(p_.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      if (p_[a] != p_[b]) return p_[a] < p_[b];
      return labels_[a] < labels_[b];
    });
    return idx;
  }

 private:
  std::vector<std::string> labels_;
  std::vector<double> p_;
};

inline void check_alpha(double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw ValidationError("alpha must lie in (0, 1)");
}

// Each element says whether the corresponding hypothesis is rejected.
using Rejections = std::vector<bool>;

inline std::vector<std::string> rejected_labels(const PValueSet& ps, const Rejections& r) {
  std::vector<std::string> out;
  for (auto i : ps.order())
    if (r[i]) out.push_back(ps.labels()[i]);
  return out;
}

inline Rejections bonferroni(const PValueSet& ps, double alpha) {
  check_alpha(alpha);
  const double cut = alpha / static_cast<double>(ps.size());
  Rejections r(ps.size());
  for (std::size_t i = 0; i < ps.size(); ++i) r[i] = ps.values()[i] <= cut;
  return r;
}

// Step-down: reject the j-th smallest while p_(j) <= alpha / (k - j + 1).
inline Rejections holm(const PValueSet& ps, double alpha) {
  check_alpha(alpha);
  const auto k = ps.size();
  Rejections r(k, false);
  const auto ord = ps.order();
  for (std::size_t j = 0; j < k; ++j) {
    if (ps.values()[ord[j]] > alpha / static_cast<double>(k - j)) break;
    r[ord[j]] = true;
  }
  return r;
}

// Step-up: reject the j smallest for the largest j with p_(j) <= j alpha / k.
inline Rejections benjamini_hochberg(const PValueSet& ps, double alpha) {
  check_alpha(alpha);
  const auto k = ps.size();
  Rejections r(k, false);
  const auto ord = ps.order();
  std::size_t last = 0;
  for (std::size_t j = 1; j <= k; ++j) {
    if (ps.values()[ord[j - 1]] <= alpha * static_cast<double>(j) / static_cast<double>(k)) last = j;
  }
  for (std::size_t j = 0; j < last; ++j) r[ord[j]] = true;
  return r;
}

enum class CombineMethod { kAnalytic, kMonteCarlo, kAuto };

inline std::string_view to_string(CombineMethod m) {
  switch (m) {
    case CombineMethod::kAnalytic: return "analytic";
    case CombineMethod::kMonteCarlo: return "monte-carlo";
    case CombineMethod::kAuto: return "auto";
  }
  return "unknown";
}

inline CombineMethod parse_combine_method(std::string_view s) {
  if (s == "analytic") return CombineMethod::kAnalytic;
  if (s == "monte-carlo" || s == "mc") return CombineMethod::kMonteCarlo;
  if (s == "auto") return CombineMethod::kAuto;
  throw ValidationError("unknown combination method '" + std::string(s) + "'");
}

struct TruncatedProductOptions {
  CombineMethod method = CombineMethod::kAuto;
  // kAuto uses the analytic series up to this many p-values.
  std::size_t analytic_max_k = 50;
  std::size_t mc_draws = 100000;
  std::uint64_t seed = 0;
  unsigned threads = 0;
};

struct TruncatedProductResult {
  double tau = 0.2;
  double w_statistic = 1.0;
  double combined_p = 1.0;
  CombineMethod method = CombineMethod::kAnalytic;
  double mc_standard_error = 0.0;  // zero for the analytic method
};

inline double log_truncated_product(std::span<const double> p, double tau) {
  double lw = 0.0;
  for (double x : p)
    if (x <= tau) lw += std::log(x);
  return lw;
}

// P(W <= w) for W the product of those of k independent uniforms that are
// <= tau. Evaluated in log space; lw = log(w).
inline double truncated_product_tail(std::size_t k, double tau, double lw) {
  if (lw >= 0.0) return 1.0;
  if (lw == -stats::kInf) return 0.0;
  const double ltau = std::log(tau);
  const double l1mtau = tau < 1.0 ? std::log1p(-tau) : -stats::kInf;
  std::vector<double> terms;
  terms.reserve(k);
  for (std::size_t j = 1; j <= k; ++j) {
    const double jd = static_cast<double>(j);
    const double weight_log = stats::log_choose(static_cast<double>(k), jd) +
                              (j == k ? 0.0 : static_cast<double>(k - j) * l1mtau);
    if (weight_log == -stats::kInf) continue;
    if (lw > jd * ltau) {
      // every product of j values <= tau is below w
      terms.push_back(weight_log + jd * ltau);
      continue;
    }
    // w * sum_{s<j} (j log tau - log w)^s / s!
    const double x = jd * ltau - lw;  // >= 0
    std::vector<double> inner;
    inner.reserve(j);
    for (std::size_t s = 0; s < j; ++s) {
      const double sd = static_cast<double>(s);
      inner.push_back(s == 0 ? 0.0 : sd * std::log(x) - std::lgamma(sd + 1.0));
    }
    terms.push_back(weight_log + lw + stats::log_sum_exp(inner));
  }
  return std::clamp(std::exp(stats::log_sum_exp(terms)), 0.0, 1.0);
}

inline constexpr std::uint64_t kTruncatedProductTag = 0x5450524F44ull;  // "TPROD"

inline double truncated_product_monte_carlo(std::size_t k, double tau, double lw, std::size_t draws,
                                            std::uint64_t seed, unsigned threads) {
  constexpr std::size_t kChunk = 8192;
  const std::size_t chunks = (draws + kChunk - 1) / kChunk;
  std::vector<std::size_t> hits(chunks, 0);
  parallel_for(chunks, threads, [&](std::size_t c) {
    Stream rng(seed, stream_id({kTruncatedProductTag, c}));
    const std::size_t end = std::min(draws, (c + 1) * kChunk);
    std::size_t count = 0;
    for (std::size_t d = c * kChunk; d < end; ++d) {
      double sim = 0.0;
      for (std::size_t i = 0; i < k; ++i) {
        const double u = rng.uniform();
        if (u <= tau) sim += std::log(u);
      }
      if (sim <= lw) ++count;
    }
    hits[c] = count;
  });
  const auto total = std::accumulate(hits.begin(), hits.end(), std::size_t{0});
  return static_cast<double>(total) / static_cast<double>(draws);
}

// Truncated product combination: W multiplies the p-values that are <= tau;
// combined_p = P(W <= w_obs) for independent uniform inputs. tau = 1 is
// Fisher's method. Valid and conservative when the inputs are independent and
// stochastically no smaller than uniform under the null.
inline TruncatedProductResult truncated_product(const PValueSet& ps, double tau = 0.2,
                                                const TruncatedProductOptions& opt = {}) {
  if (!(tau > 0.0 && tau <= 1.0)) throw ValidationError("tau must lie in (0, 1]");
  if (ps.size() == 0) throw ValidationError("need at least one p-value");
  TruncatedProductResult r;
  r.tau = tau;
  const double lw = log_truncated_product(ps.values(), tau);
  r.w_statistic = std::exp(lw);
  CombineMethod method = opt.method;
  if (method == CombineMethod::kAuto)
    method = ps.size() > opt.analytic_max_k ? CombineMethod::kMonteCarlo : CombineMethod::kAnalytic;
  r.method = method;
  if (lw >= 0.0 && r.w_statistic >= 1.0) {
    r.combined_p = 1.0;
    return r;
  }
  if (method == CombineMethod::kAnalytic) {
    r.combined_p = truncated_product_tail(ps.size(), tau, lw);
  } else {
    if (opt.mc_draws < 100000) throw ValidationError("monte-carlo combination needs >= 100000 draws");
    r.combined_p = truncated_product_monte_carlo(ps.size(), tau, lw, opt.mc_draws, opt.seed, opt.threads);
    r.mc_standard_error = stats::proportion_se(r.combined_p, opt.mc_draws);
  }
  return r;
}

// Fisher's combination through the chi-square tail; used as a cross-check.
inline double fisher_combination(std::span<const double> p) {
  double s = 0.0;
  for (double x : p) s += std::log(x);
  return stats::chi2_even_sf(-2.0 * s, static_cast<int>(p.size()));
}

// Testing in order. Nodes are tested in sequence at full alpha; a node holding
// several hypotheses is a sequentially exclusive partition whose members are
// all tested at alpha. Testing stops after the first node that is not
// entirely rejected.
struct OrderedTestPlan {
  std::vector<std::vector<std::string>> nodes;
  double alpha = 0.05;
};

enum class NodeStatus { kRejected, kNotRejected, kNotTested };

inline std::string_view to_string(NodeStatus s) {
  switch (s) {
    case NodeStatus::kRejected: return "rejected";
    case NodeStatus::kNotRejected: return "not-rejected";
    case NodeStatus::kNotTested: return "not-tested";
  }
  return "unknown";
}

struct NodeDecision {
  NodeStatus status = NodeStatus::kNotTested;
  std::vector<std::string> labels;
  std::vector<NodeStatus> members;
};

inline std::vector<NodeDecision> testing_in_order(const OrderedTestPlan& plan, const PValueSet& ps) {
  check_alpha(plan.alpha);
  std::map<std::string, double> lookup;
  for (std::size_t i = 0; i < ps.size(); ++i) lookup[ps.labels()[i]] = ps.values()[i];
  for (const auto& node : plan.nodes) {
    if (node.empty()) throw ValidationError("empty node in ordered test plan");
    for (const auto& label : node)
      if (!lookup.contains(label)) throw ValidationError("no p-value for hypothesis '" + label + "'");
  }
  std::vector<NodeDecision> out;
  bool open = true;
  for (const auto& node : plan.nodes) {
    NodeDecision d;
    d.labels = node;
    if (!open) {
      d.members.assign(node.size(), NodeStatus::kNotTested);
      out.push_back(std::move(d));
      continue;
    }
    bool all = true;
    for (const auto& label : node) {
      const bool rej = lookup[label] <= plan.alpha;
      d.members.push_back(rej ? NodeStatus::kRejected : NodeStatus::kNotRejected);
      all = all && rej;
    }
    d.status = all ? NodeStatus::kRejected : NodeStatus::kNotRejected;
    open = all;
    out.push_back(std::move(d));
  }
  return out;
}

// After the global null is rejected, subgroup i is rejected when
// p_i < alpha / (k - 1).
inline Rejections subgroup_followup(const PValueSet& ps, double alpha, std::size_t k) {
  check_alpha(alpha);
  if (k < 2) throw ValidationError("subgroup follow-up needs at least two subgroups");
  const double cut = alpha / static_cast<double>(k - 1);
  Rejections r(ps.size());
  for (std::size_t i = 0; i < ps.size(); ++i) r[i] = ps.values()[i] < cut;
  return r;
}

}  // namespace obskit
