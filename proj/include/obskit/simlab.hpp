#pragma once

// Declarative Monte Carlo scenarios for protocol design: outcome selection
// under multiplicity, power of sensitivity analyses, p-value distributions,
// subgroup heterogeneity, and bias from matching on an instrument.
//
// Every replicate draws from its own Philox stream keyed by
// (seed, scenario, grid index, replicate), and per-replicate results are
// reduced in replicate order, so output is identical for any thread count.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "obskit/adaptive.hpp"
#include "obskit/csv.hpp"
#include "obskit/error.hpp"
#include "obskit/matcher.hpp"
#include "obskit/multiplicity.hpp"
#include "obskit/pairs.hpp"
#include "obskit/parallel.hpp"
#include "obskit/random.hpp"
#include "obskit/sensitivity.hpp"
#include "obskit/stats.hpp"
#include "obskit/svg.hpp"

#ifndef OBSKIT_VERSION
#define OBSKIT_VERSION "0.0.0"
#endif

namespace obskit::sim {

enum class ScenarioKind {
  kMultiOutcomeRct,    // outcome selection, no hidden bias
  kMultiOutcomeGamma,  // outcome selection, sensitivity analysis at Gamma
  kPowerVsGamma,       // power of the sensitivity analysis over a Gamma grid
  kPValueHistogram,    // distribution of bound p-values
  kSubgroupHetero,     // combined test vs truncated product over subgroups
  kIvAdjustment,       // matching on an instrument vs ignoring it
};

inline std::string_view to_string(ScenarioKind k) {
  switch (k) {
    case ScenarioKind::kMultiOutcomeRct: return "multi-outcome-rct";
    case ScenarioKind::kMultiOutcomeGamma: return "multi-outcome-gamma";
    case ScenarioKind::kPowerVsGamma: return "power-vs-gamma";
    case ScenarioKind::kPValueHistogram: return "pvalue-histogram";
    case ScenarioKind::kSubgroupHetero: return "subgroup-hetero";
    case ScenarioKind::kIvAdjustment: return "iv-adjustment";
  }
  return "unknown";
}

inline ScenarioKind parse_scenario_kind(std::string_view s) {
  if (s == "multi-outcome-rct") return ScenarioKind::kMultiOutcomeRct;
  if (s == "multi-outcome-gamma") return ScenarioKind::kMultiOutcomeGamma;
  if (s == "power-vs-gamma") return ScenarioKind::kPowerVsGamma;
  if (s == "pvalue-histogram") return ScenarioKind::kPValueHistogram;
  if (s == "subgroup-hetero") return ScenarioKind::kSubgroupHetero;
  if (s == "iv-adjustment" || s == "iv") return ScenarioKind::kIvAdjustment;
  throw ValidationError("unknown scenario '" + std::string(s) + "'");
}

struct SubgroupPoint {
  double gamma = 1.0;
  double delta1 = 0.0;
  double delta2 = 0.0;
};

// Linear-Gaussian process with a logistic treatment model:
//   Z ~ N(0,1), U = rho Z + sqrt(1 - rho^2) E,
//   P(A = 1) = expit(intercept + z_treatment Z + u_treatment U),
//   Y = effect A + u_outcome U + noise.
// rho = 0 makes Z a valid instrument; U is never observed.
struct IvParams {
  std::size_t n_subjects = 400;
  double intercept = -1.0;
  double z_treatment = 1.5;
  double u_treatment = 1.0;
  double zu_assoc = 0.0;
  double u_outcome = 1.0;
  double effect = 1.0;
};

struct ScenarioSpec {
  ScenarioKind kind = ScenarioKind::kMultiOutcomeRct;
  std::uint64_t seed = 0;
  std::size_t reps = 2000;
  std::size_t n_pairs = 500;
  std::size_t n_outcomes = 100;
  double alpha = 0.05;
  double gamma = 1.0;
  double planning_fraction = 1.0 / 3.0;
  double apriori_correct_prob = 2.0 / 3.0;
  std::vector<double> effect_grid;
  // power-vs-gamma
  std::vector<std::size_t> sample_sizes;
  std::vector<double> effect_sizes;
  std::vector<double> gamma_grid;
  std::size_t max_reps_large_n = 0;  // cap on reps when n >= 20000 (0: none)
  // pvalue-histogram
  double effect = 0.5;
  std::size_t bins = 20;
  // subgroup-hetero
  std::size_t group_size = 500;
  double tau = 0.2;
  std::vector<SubgroupPoint> subgroup_points;
  // iv-adjustment
  IvParams iv;
};

inline std::vector<double> even_grid(double lo, double hi, std::size_t points) {
  std::vector<double> g;
  for (std::size_t i = 0; i < points; ++i)
    g.push_back(points == 1 ? lo : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(points - 1));
  return g;
}

// Effect sizes move from equal effects (d, d) to (2d, 0) with the mean fixed.
inline std::vector<SubgroupPoint> subgroup_sweep(double gamma, double equal_effect, std::size_t points) {
  std::vector<SubgroupPoint> out;
  for (double t : even_grid(0.0, 1.0, points)) {
    const double d1 = equal_effect * (1.0 + t);
    out.push_back({gamma, d1, 2.0 * equal_effect - d1});
  }
  return out;
}

// Defaults per scenario. Effect grids for the outcome-selection scenarios
// are 8 evenly spaced points from no effect to where the strongest method's
// power is near 1.
inline ScenarioSpec default_spec(ScenarioKind kind) {
  ScenarioSpec s;
  s.kind = kind;
  switch (kind) {
    case ScenarioKind::kMultiOutcomeRct:
      s.gamma = 1.0;
      s.effect_grid = even_grid(0.0, 0.28, 8);
      break;
    case ScenarioKind::kMultiOutcomeGamma:
      s.gamma = 3.0;
      s.effect_grid = even_grid(0.0, 0.84, 8);
      break;
    case ScenarioKind::kPowerVsGamma:
      s.sample_sizes = {200, 2000, 20000};
      s.effect_sizes = {0.5, 1.0};
      s.gamma_grid = even_grid(1.0, 14.0, 27);
      s.max_reps_large_n = 500;
      break;
    case ScenarioKind::kPValueHistogram:
      s.reps = 1000;
      s.gamma = 5.0;
      s.effect = 0.5;
      break;
    case ScenarioKind::kSubgroupHetero: {
      auto a = subgroup_sweep(1.0, 0.06875, 8);
      auto b = subgroup_sweep(3.0, 0.06875 * 8.0, 8);
      s.subgroup_points = a;
      s.subgroup_points.insert(s.subgroup_points.end(), b.begin(), b.end());
      break;
    }
    case ScenarioKind::kIvAdjustment:
      s.reps = 500;
      break;
  }
  return s;
}

inline nlohmann::json to_json(const ScenarioSpec& s) {
  nlohmann::json j;
  j["kind"] = std::string(to_string(s.kind));
  j["seed"] = s.seed;
  j["reps"] = s.reps;
  j["n_pairs"] = s.n_pairs;
  j["n_outcomes"] = s.n_outcomes;
  j["alpha"] = s.alpha;
  j["gamma"] = s.gamma;
  j["planning_fraction"] = s.planning_fraction;
  j["apriori_correct_prob"] = s.apriori_correct_prob;
  j["effect_grid"] = s.effect_grid;
  j["sample_sizes"] = s.sample_sizes;
  j["effect_sizes"] = s.effect_sizes;
  j["gamma_grid"] = s.gamma_grid;
  j["max_reps_large_n"] = s.max_reps_large_n;
  j["effect"] = s.effect;
  j["bins"] = s.bins;
  j["group_size"] = s.group_size;
  j["tau"] = s.tau;
  auto pts = nlohmann::json::array();
  for (const auto& p : s.subgroup_points) pts.push_back({{"gamma", p.gamma}, {"delta1", p.delta1}, {"delta2", p.delta2}});
  j["subgroup_points"] = pts;
  j["iv"] = {{"n_subjects", s.iv.n_subjects}, {"intercept", s.iv.intercept},   {"z_treatment", s.iv.z_treatment},
             {"u_treatment", s.iv.u_treatment}, {"zu_assoc", s.iv.zu_assoc}, {"u_outcome", s.iv.u_outcome},
             {"effect", s.iv.effect}};
  return j;
}

// Reads a spec: `kind` selects the defaults, every other key overrides them.
inline ScenarioSpec spec_from_json(const nlohmann::json& j, std::string_view fallback_kind = {}) {
  std::string kind = j.contains("kind") ? j.at("kind").get<std::string>() : std::string(fallback_kind);
  if (kind.empty()) throw ValidationError("scenario spec lacks 'kind'");
  ScenarioSpec s = default_spec(parse_scenario_kind(kind));
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) j.at(key).get_to(field);
    };
    get("seed", s.seed);
    get("reps", s.reps);
    get("n_pairs", s.n_pairs);
    get("n_outcomes", s.n_outcomes);
    get("alpha", s.alpha);
    get("gamma", s.gamma);
    get("planning_fraction", s.planning_fraction);
    get("apriori_correct_prob", s.apriori_correct_prob);
    get("effect_grid", s.effect_grid);
    get("sample_sizes", s.sample_sizes);
    get("effect_sizes", s.effect_sizes);
    get("gamma_grid", s.gamma_grid);
    get("max_reps_large_n", s.max_reps_large_n);
    get("effect", s.effect);
    get("bins", s.bins);
    get("group_size", s.group_size);
    get("tau", s.tau);
    if (j.contains("subgroup_points")) {
      s.subgroup_points.clear();
      for (const auto& p : j.at("subgroup_points"))
        s.subgroup_points.push_back({p.at("gamma").get<double>(), p.at("delta1").get<double>(), p.at("delta2").get<double>()});
    }
    if (j.contains("iv")) {
      const auto& v = j.at("iv");
      auto iv = [&](const char* key, auto& field) {
        if (v.contains(key)) v.at(key).get_to(field);
      };
      iv("n_subjects", s.iv.n_subjects);
      iv("intercept", s.iv.intercept);
      iv("z_treatment", s.iv.z_treatment);
      iv("u_treatment", s.iv.u_treatment);
      iv("zu_assoc", s.iv.zu_assoc);
      iv("u_outcome", s.iv.u_outcome);
      iv("effect", s.iv.effect);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("bad scenario spec: ") + e.what());
  }
  return s;
}

// Accepts a JSON object, or `key = value` lines whose values are JSON
// literals (numbers, strings, arrays); '#' starts a comment.
inline nlohmann::json parse_spec_text(const std::string& text) {
  const auto first = text.find_first_not_of(" \t\r\n");
  try {
    if (first != std::string::npos && text[first] == '{') return nlohmann::json::parse(text);
    nlohmann::json j = nlohmann::json::object();
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
      const auto eq = line.find('=');
      const auto key = std::string(csv::trim(line.substr(0, eq == std::string::npos ? line.size() : eq)));
      if (key.empty()) continue;
      if (eq == std::string::npos) throw ValidationError("spec line " + std::to_string(lineno) + ": expected key = value");
      const auto value = std::string(csv::trim(line.substr(eq + 1)));
      nlohmann::json v = nlohmann::json::parse(value, nullptr, false);
      if (v.is_discarded()) v = value;  // bare word
      // dotted keys address nested objects, e.g. iv.zu_assoc
      nlohmann::json* at = &j;
      std::string_view rest = key;
      for (auto dot = rest.find('.'); dot != std::string_view::npos; dot = rest.find('.')) {
        at = &(*at)[std::string(rest.substr(0, dot))];
        rest.remove_prefix(dot + 1);
      }
      (*at)[std::string(rest)] = v;
    }
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("bad scenario spec: ") + e.what());
  }
}

inline void validate(const ScenarioSpec& s) {
  if (s.reps < 1) throw ValidationError("reps must be positive");
  if (!(s.alpha > 0.0 && s.alpha < 1.0)) throw ValidationError("alpha must lie in (0, 1)");
  check_gamma(s.gamma);
  switch (s.kind) {
    case ScenarioKind::kMultiOutcomeRct:
    case ScenarioKind::kMultiOutcomeGamma:
      if (s.n_pairs < 3 || s.n_outcomes < 2) throw ValidationError("need >= 3 pairs and >= 2 outcomes");
      if (s.effect_grid.empty()) throw ValidationError("effect grid is empty");
      if (!(s.apriori_correct_prob >= 0.0 && s.apriori_correct_prob <= 1.0))
        throw ValidationError("a-priori correct-pick probability must lie in [0, 1]");
      planning_size(s.n_pairs, s.planning_fraction);
      break;
    case ScenarioKind::kPowerVsGamma:
      if (s.sample_sizes.empty() || s.effect_sizes.empty() || s.gamma_grid.empty())
        throw ValidationError("sample sizes, effect sizes and gamma grid must be nonempty");
      for (double g : s.gamma_grid) check_gamma(g);
      for (auto n : s.sample_sizes)
        if (n < 1) throw ValidationError("sample sizes must be positive");
      break;
    case ScenarioKind::kPValueHistogram:
      if (s.n_pairs < 1 || s.bins < 1) throw ValidationError("need positive n_pairs and bins");
      break;
    case ScenarioKind::kSubgroupHetero:
      if (s.group_size < 1 || s.subgroup_points.empty()) throw ValidationError("need groups and effect points");
      if (!(s.tau > 0.0 && s.tau <= 1.0)) throw ValidationError("tau must lie in (0, 1]");
      for (const auto& p : s.subgroup_points) check_gamma(p.gamma);
      break;
    case ScenarioKind::kIvAdjustment:
      if (s.iv.n_subjects < 4) throw ValidationError("need at least 4 subjects");
      if (!(std::abs(s.iv.zu_assoc) <= 1.0)) throw ValidationError("zu_assoc must lie in [-1, 1]");
      break;
  }
}

struct CurvePoint {
  double x = 0.0;
  std::string method;
  double power = 0.0;
  double se = 0.0;
  std::size_t reps = 0;
};

struct Histogram {
  std::string name;
  double effect = 0.0;
  double gamma = 1.0;
  std::vector<std::size_t> counts;  // equal-width bins over [0, 1]
  std::vector<double> p_values;     // in replicate order
};

struct IvRow {
  std::string design;
  double bias = 0.0;
  double bias_se = 0.0;
  double rmse = 0.0;
  double rmse_se = 0.0;
  std::size_t reps = 0;
};

struct ScenarioResult {
  ScenarioSpec spec;
  std::vector<CurvePoint> curve;
  std::vector<std::pair<std::string, double>> markers;
  std::vector<Histogram> histograms;
  std::vector<IvRow> iv;
  nlohmann::json extra = nlohmann::json::object();
  std::vector<std::string> notes;

  // Points of one method, in grid order.
  std::vector<CurvePoint> series(std::string_view method) const {
    std::vector<CurvePoint> out;
    for (const auto& p : curve)
      if (p.method == method) out.push_back(p);
    return out;
  }
};

namespace detail {

inline std::uint64_t kind_tag(ScenarioKind k) { return 0x53494D00ull + static_cast<std::uint64_t>(k); }

inline CurvePoint proportion_point(double x, std::string method, std::size_t hits, std::size_t reps) {
  const double p = static_cast<double>(hits) / static_cast<double>(reps);
  return {x, std::move(method), p, stats::proportion_se(p, reps), reps};
}

inline double bound_p(std::span<const double> d, double gamma) {
  return wilcoxon_normal_bound(summarize(rank_diffs(d)), gamma).p_upper;
}

struct MultiOutcomeRep {
  std::uint8_t apriori_correct = 0;  // outcome 0 rejected on the full sample
  std::uint8_t apriori_null = 0;     // a null outcome rejected on the full sample
  std::uint8_t bonferroni = 0;
  std::uint8_t split = 0;            // outcome 0 chosen and rejected on the analysis sample
  std::uint8_t selected = 0;         // outcome 0 chosen
};

inline MultiOutcomeRep multi_outcome_rep(const ScenarioSpec& s, double effect, Stream& rng) {
  const std::size_t n = s.n_pairs;
  const std::size_t k = s.n_outcomes;
  std::vector<std::vector<double>> y(k, std::vector<double>(n));
  for (std::size_t o = 0; o < k; ++o)
    for (std::size_t i = 0; i < n; ++i) y[o][i] = rng.normal() + (o == 0 ? effect : 0.0);
  const auto planning = choose_planning(n, s.planning_fraction, rng);
  const auto analysis = complement(n, planning);

  MultiOutcomeRep r;
  const double p0 = bound_p(y[0], s.gamma);
  const double p1 = bound_p(y[1], s.gamma);
  r.apriori_correct = p0 <= s.alpha;
  r.apriori_null = p1 <= s.alpha;
  r.bonferroni = p0 <= s.alpha / static_cast<double>(k);

  std::vector<double> buf;
  double best = -stats::kInf;
  std::size_t chosen = 0;
  for (std::size_t o = 0; o < k; ++o) {
    buf.clear();
    for (auto i : planning) buf.push_back(y[o][i]);
    const double z = standardized_signed_rank(buf).value_or(-stats::kInf);
    if (z > best) {
      best = z;
      chosen = o;
    }
  }
  r.selected = chosen == 0;
  if (chosen == 0) {
    buf.clear();
    for (auto i : analysis) buf.push_back(y[0][i]);
    r.split = bound_p(buf, s.gamma) <= s.alpha;
  }
  return r;
}

inline ScenarioResult run_multi_outcome(const ScenarioSpec& s, unsigned threads) {
  ScenarioResult res;
  res.spec = s;
  auto freq = nlohmann::json::array();
  for (std::size_t g = 0; g < s.effect_grid.size(); ++g) {
    const double effect = s.effect_grid[g];
    std::vector<MultiOutcomeRep> reps(s.reps);
    parallel_for(s.reps, threads, [&](std::size_t rep) {
      Stream rng(s.seed, stream_id({kind_tag(s.kind), g, rep}));
      reps[rep] = multi_outcome_rep(s, effect, rng);
    });
    std::size_t correct = 0, null = 0, bonf = 0, split = 0, selected = 0;
    for (const auto& r : reps) {
      correct += r.apriori_correct;
      null += r.apriori_null;
      bonf += r.bonferroni;
      split += r.split;
      selected += r.selected;
    }
    const double n = static_cast<double>(s.reps);
    const double apriori = s.apriori_correct_prob * static_cast<double>(correct) / n +
                           (1.0 - s.apriori_correct_prob) * static_cast<double>(null) / n;
    res.curve.push_back({effect, "a-priori", apriori, stats::proportion_se(apriori, s.reps), s.reps});
    res.curve.push_back(proportion_point(effect, "bonferroni", bonf, s.reps));
    res.curve.push_back(proportion_point(effect, "splitting", split, s.reps));
    freq.push_back({{"effect", effect}, {"correct_selection", static_cast<double>(selected) / n}});
  }
  res.extra["selection_frequency"] = freq;
  res.notes.push_back("a-priori power = p_correct * power(affected outcome) + (1 - p_correct) * power(null outcome)");
  res.notes.push_back("splitting counts a success only when the affected outcome is selected and rejected");
  return res;
}

inline std::string size_effect_label(std::size_t n, double delta) {
  return "n=" + std::to_string(n) + " delta=" + csv::format_exact(delta);
}

inline ScenarioResult run_power_vs_gamma(const ScenarioSpec& s, unsigned threads) {
  ScenarioResult res;
  res.spec = s;
  std::size_t series = 0;
  for (double delta : s.effect_sizes) {
    res.markers.emplace_back("design sensitivity delta=" + csv::format_exact(delta),
                             design_sensitivity_normal(delta).gamma_tilde);
    for (std::size_t n : s.sample_sizes) {
      std::size_t reps = s.reps;
      if (s.max_reps_large_n > 0 && n >= 20000) reps = std::min(reps, s.max_reps_large_n);
      const std::size_t gk = s.gamma_grid.size();
      std::vector<std::uint8_t> hit(reps * gk, 0);
      parallel_for(reps, threads, [&](std::size_t rep) {
        Stream rng(s.seed, stream_id({kind_tag(s.kind), series, rep}));
        std::vector<double> d(n);
        for (auto& x : d) x = delta + rng.normal();
        const SignedRankSummary sum = summarize(rank_diffs(d));
        for (std::size_t g = 0; g < gk; ++g)
          hit[rep * gk + g] = wilcoxon_normal_bound(sum, s.gamma_grid[g]).p_upper <= s.alpha;
      });
      for (std::size_t g = 0; g < gk; ++g) {
        std::size_t count = 0;
        for (std::size_t rep = 0; rep < reps; ++rep) count += hit[rep * gk + g];
        res.curve.push_back(proportion_point(s.gamma_grid[g], size_effect_label(n, delta), count, reps));
      }
      ++series;
    }
  }
  return res;
}

inline Histogram pvalue_histogram(const ScenarioSpec& s, std::string name, double effect, double gamma,
                                  std::uint64_t tag, unsigned threads) {
  Histogram h;
  h.name = std::move(name);
  h.effect = effect;
  h.gamma = gamma;
  h.p_values.assign(s.reps, 0.0);
  parallel_for(s.reps, threads, [&](std::size_t rep) {
    Stream rng(s.seed, stream_id({kind_tag(s.kind), tag, rep}));
    std::vector<double> d(s.n_pairs);
    for (auto& x : d) x = effect + rng.normal();
    h.p_values[rep] = bound_p(d, gamma);
  });
  h.counts.assign(s.bins, 0);
  for (double p : h.p_values) {
    auto b = static_cast<std::size_t>(p * static_cast<double>(s.bins));
    ++h.counts[std::min(b, s.bins - 1)];
  }
  return h;
}

inline ScenarioResult run_pvalue_histogram(const ScenarioSpec& s, unsigned threads) {
  ScenarioResult res;
  res.spec = s;
  res.histograms.push_back(pvalue_histogram(s, "a", s.effect, s.gamma, 0, threads));
  res.histograms.push_back(pvalue_histogram(s, "b", 0.0, 1.0, 1, threads));
  res.markers.emplace_back("design sensitivity delta=" + csv::format_exact(s.effect),
                           design_sensitivity_normal(s.effect).gamma_tilde);
  const auto& a = res.histograms[0].p_values;
  const auto above = std::count_if(a.begin(), a.end(), [](double p) { return p > 0.5; });
  res.extra["fraction_a_above_half"] = static_cast<double>(above) / static_cast<double>(a.size());
  res.extra["ks_b_vs_uniform"] = {{"statistic", stats::ks_uniform(res.histograms[1].p_values).statistic},
                                  {"p_value", stats::ks_uniform(res.histograms[1].p_values).p_value}};
  return res;
}

inline std::string gamma_label(std::string_view method, double gamma) {
  return std::string(method) + " gamma=" + csv::format_exact(gamma);
}

inline ScenarioResult run_subgroup_hetero(const ScenarioSpec& s, unsigned threads) {
  ScenarioResult res;
  res.spec = s;
  const std::size_t m = s.group_size;
  for (std::size_t g = 0; g < s.subgroup_points.size(); ++g) {
    const auto pt = s.subgroup_points[g];
    std::vector<std::uint8_t> combined(s.reps, 0), truncated(s.reps, 0);
    parallel_for(s.reps, threads, [&](std::size_t rep) {
      Stream rng(s.seed, stream_id({kind_tag(s.kind), g, rep}));
      std::vector<double> d(2 * m);
      for (std::size_t i = 0; i < m; ++i) d[i] = pt.delta1 + rng.normal();
      for (std::size_t i = m; i < 2 * m; ++i) d[i] = pt.delta2 + rng.normal();
      combined[rep] = bound_p(d, pt.gamma) <= s.alpha;
      const double p1 = bound_p(std::span<const double>(d).first(m), pt.gamma);
      const double p2 = bound_p(std::span<const double>(d).subspan(m), pt.gamma);
      TruncatedProductOptions opt;
      opt.method = CombineMethod::kAnalytic;
      truncated[rep] = truncated_product(PValueSet::unlabeled({p1, p2}), s.tau, opt).combined_p <= s.alpha;
    });
    const auto c = std::accumulate(combined.begin(), combined.end(), std::size_t{0});
    const auto t = std::accumulate(truncated.begin(), truncated.end(), std::size_t{0});
    res.curve.push_back(proportion_point(pt.delta1, gamma_label("combined", pt.gamma), c, s.reps));
    res.curve.push_back(proportion_point(pt.delta1, gamma_label("truncated-product", pt.gamma), t, s.reps));
  }
  res.notes.push_back("x is delta1; delta2 for each point is listed in spec.subgroup_points");
  return res;
}

struct IvRep {
  bool ok = false;
  double match_error = 0.0;   // estimate - effect, matching on Z
  double ignore_error = 0.0;  // estimate - effect, random pairing
};

inline IvRep iv_rep(const IvParams& p, Stream& rng) {
  const std::size_t n = p.n_subjects;
  const double rho = p.zu_assoc;
  const double rest = std::sqrt(std::max(0.0, 1.0 - rho * rho));
  std::vector<double> z(n), y(n);
  std::vector<int> a(n);
  std::vector<std::string> ids(n);
  std::size_t treated = 0;
  for (std::size_t i = 0; i < n; ++i) {
    z[i] = rng.normal();
    const double u = rho * z[i] + rest * rng.normal();
    a[i] = rng.bernoulli(stats::expit(p.intercept + p.z_treatment * z[i] + p.u_treatment * u)) ? 1 : 0;
    y[i] = p.effect * a[i] + p.u_outcome * u + rng.normal();
    treated += static_cast<std::size_t>(a[i]);
    char buf[24];
    std::snprintf(buf, sizeof buf, "s%07zu", i);
    ids[i] = buf;
  }
  IvRep r;
  if (treated == 0 || treated == n) return r;
  const SubjectTable table(ids, a, {"z"}, {z});
  const MatchResult m = optimal_pair_match(distance_matrix(table));
  if (m.pairs.empty()) return r;
  stats::CompensatedSum sm;
  for (const auto& pr : m.pairs) {
    const auto i = static_cast<std::size_t>(table.find(pr.treated_id));
    const auto j = static_cast<std::size_t>(table.find(pr.control_id));
    sm.add(y[i] - y[j]);
  }
  r.match_error = sm.value() / static_cast<double>(m.pairs.size()) - p.effect;

  // Ignoring Z: pair treated subjects with controls drawn at random.
  auto tr = table.treated_rows();
  auto co = table.control_rows();
  for (std::size_t i = co.size(); i > 1; --i) std::swap(co[i - 1], co[static_cast<std::size_t>(rng.below(i))]);
  for (std::size_t i = tr.size(); i > 1; --i) std::swap(tr[i - 1], tr[static_cast<std::size_t>(rng.below(i))]);
  const std::size_t k = std::min(tr.size(), co.size());
  stats::CompensatedSum si;
  for (std::size_t q = 0; q < k; ++q) si.add(y[tr[q]] - y[co[q]]);
  r.ignore_error = si.value() / static_cast<double>(k) - p.effect;
  r.ok = true;
  return r;
}

inline IvRow summarize_errors(std::string design, const std::vector<double>& e) {
  IvRow row;
  row.design = std::move(design);
  row.reps = e.size();
  if (e.empty()) return row;
  const double n = static_cast<double>(e.size());
  stats::CompensatedSum s, s2;
  for (double x : e) {
    s.add(x);
    s2.add(x * x);
  }
  row.bias = s.value() / n;
  const double mse = s2.value() / n;
  row.rmse = std::sqrt(mse);
  const double var_e = e.size() > 1 ? stats::variance(e) : 0.0;
  row.bias_se = std::sqrt(var_e / n);
  std::vector<double> sq(e.size());
  for (std::size_t i = 0; i < e.size(); ++i) sq[i] = e[i] * e[i];
  const double mse_se = std::sqrt((e.size() > 1 ? stats::variance(sq) : 0.0) / n);
  row.rmse_se = row.rmse > 0 ? mse_se / (2.0 * row.rmse) : 0.0;  // delta method
  return row;
}

inline ScenarioResult run_iv_adjustment(const ScenarioSpec& s, unsigned threads) {
  ScenarioResult res;
  res.spec = s;
  std::vector<IvRep> reps(s.reps);
  parallel_for(s.reps, threads, [&](std::size_t rep) {
    Stream rng(s.seed, stream_id({kind_tag(s.kind), 0, rep}));
    reps[rep] = iv_rep(s.iv, rng);
  });
  std::vector<double> match, ignore;
  for (const auto& r : reps) {
    if (!r.ok) continue;
    match.push_back(r.match_error);
    ignore.push_back(r.ignore_error);
  }
  if (match.size() < s.reps)
    res.notes.push_back(std::to_string(s.reps - match.size()) + " replicate(s) had no treated or no control subjects");
  res.iv.push_back(summarize_errors("match-on-Z", match));
  res.iv.push_back(summarize_errors("ignore-Z", ignore));
  res.notes.push_back("match-on-Z: optimal pair match on rank-Mahalanobis distance in Z; ignore-Z: random pairing");
  return res;
}

}  // namespace detail

inline ScenarioResult run(const ScenarioSpec& spec, unsigned threads = 0) {
  validate(spec);
  switch (spec.kind) {
    case ScenarioKind::kMultiOutcomeRct:
    case ScenarioKind::kMultiOutcomeGamma: return detail::run_multi_outcome(spec, threads);
    case ScenarioKind::kPowerVsGamma: return detail::run_power_vs_gamma(spec, threads);
    case ScenarioKind::kPValueHistogram: return detail::run_pvalue_histogram(spec, threads);
    case ScenarioKind::kSubgroupHetero: return detail::run_subgroup_hetero(spec, threads);
    case ScenarioKind::kIvAdjustment: return detail::run_iv_adjustment(spec, threads);
  }
  throw ValidationError("unknown scenario");
}

// ---------------------------------------------------------------------------
// Output

inline std::string format_curve_csv(const ScenarioResult& r) {
  std::string out = "x,method,power,se\n";
  for (const auto& p : r.curve)
    out += csv::format_exact(p.x) + "," + p.method + "," + csv::format_exact(p.power) + "," + csv::format_exact(p.se) + "\n";
  return out;
}

inline std::string format_histogram_csv(const ScenarioResult& r) {
  std::string out = "case,bin_lo,bin_hi,count\n";
  for (const auto& h : r.histograms) {
    const auto bins = h.counts.size();
    for (std::size_t b = 0; b < bins; ++b) {
      out += h.name + "," + csv::format_exact(static_cast<double>(b) / static_cast<double>(bins)) + "," +
             csv::format_exact(static_cast<double>(b + 1) / static_cast<double>(bins)) + "," + std::to_string(h.counts[b]) + "\n";
    }
  }
  return out;
}

inline std::string format_iv_csv(const ScenarioResult& r) {
  std::string out = "design,bias,bias_se,rmse,rmse_se,reps\n";
  for (const auto& row : r.iv)
    out += row.design + "," + csv::format_exact(row.bias) + "," + csv::format_exact(row.bias_se) + "," +
           csv::format_exact(row.rmse) + "," + csv::format_exact(row.rmse_se) + "," + std::to_string(row.reps) + "\n";
  return out;
}

inline nlohmann::json result_json(const ScenarioResult& r) {
  nlohmann::json j;
  j["spec"] = to_json(r.spec);
  j["seed"] = r.spec.seed;
  j["versions"] = {{"obskit", OBSKIT_VERSION}, {"prng", "philox4x32-10"}};
  auto curve = nlohmann::json::array();
  for (const auto& p : r.curve) curve.push_back({{"x", p.x}, {"method", p.method}, {"power", p.power}, {"se", p.se}, {"reps", p.reps}});
  j["curve"] = curve;
  auto markers = nlohmann::json::array();
  for (const auto& [name, x] : r.markers) markers.push_back({{"name", name}, {"x", x}});
  j["markers"] = markers;
  auto hist = nlohmann::json::array();
  for (const auto& h : r.histograms)
    hist.push_back({{"case", h.name}, {"effect", h.effect}, {"gamma", h.gamma}, {"counts", h.counts}});
  j["histograms"] = hist;
  auto iv = nlohmann::json::array();
  for (const auto& row : r.iv)
    iv.push_back({{"design", row.design}, {"bias", row.bias}, {"bias_se", row.bias_se}, {"rmse", row.rmse},
                  {"rmse_se", row.rmse_se}, {"reps", row.reps}});
  j["iv"] = iv;
  j["extra"] = r.extra;
  j["notes"] = r.notes;
  return j;
}

inline std::string plot_svg(const ScenarioResult& r) {
  if (!r.histograms.empty()) {
    const auto& h = r.histograms.front();
    return svg::bar_chart(h.counts, "p-values, case " + h.name + " (gamma=" + csv::format_sig6(h.gamma) + ")");
  }
  std::vector<svg::Series> series;
  std::map<std::string, std::size_t> index;
  for (const auto& p : r.curve) {
    auto [it, inserted] = index.try_emplace(p.method, series.size());
    if (inserted) series.push_back({p.method, {}});
    series[it->second].points.emplace_back(p.x, p.power);
  }
  const bool vs_gamma = r.spec.kind == ScenarioKind::kPowerVsGamma;
  return svg::line_chart(series, std::string(to_string(r.spec.kind)), vs_gamma ? "Gamma" : "effect size", "power",
                         vs_gamma ? r.markers : std::vector<std::pair<std::string, double>>{});
}

// Writes meta.json plus curve.csv, histogram.csv or iv.csv (whichever apply)
// and, on request, plot.svg. Returns the paths written.
inline std::vector<std::string> write_outputs(const ScenarioResult& r, const std::filesystem::path& dir, bool svg_plot) {
  std::filesystem::create_directories(dir);
  std::vector<std::string> written;
  auto put = [&](const std::string& name, const std::string& text) {
    const auto path = dir / name;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot write " + path.string());
    out << text;
    written.push_back(path.string());
  };
  if (!r.curve.empty()) put("curve.csv", format_curve_csv(r));
  if (!r.histograms.empty()) put("histogram.csv", format_histogram_csv(r));
  if (!r.iv.empty()) put("iv.csv", format_iv_csv(r));
  if (svg_plot && (!r.curve.empty() || !r.histograms.empty())) put("plot.svg", plot_svg(r));
  put("meta.json", result_json(r).dump(2) + "\n");
  return written;
}

}  // namespace obskit::sim
