// Acceptance suite: one PASS/FAIL line per criterion; exit status 1 if any
// criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <sstream>
#include <string>

#include "obskit/adaptive.hpp"
#include "obskit/matcher.hpp"
#include "obskit/multiplicity.hpp"
#include "obskit/random.hpp"
#include "obskit/sensitivity.hpp"
#include "obskit/simlab.hpp"
#include "oracles.hpp"

using namespace obskit;

namespace {

struct Check {
  bool ok = true;
  std::ostringstream detail;

  void expect(bool cond, const std::string& what) {
    if (!cond) {
      ok = false;
      detail << " [failed: " << what << "]";
    }
  }
};

int failures = 0;

void criterion(int id, const std::string& name, const std::function<void(Check&)>& body) {
  const auto start = std::chrono::steady_clock::now();
  Check c;
  try {
    body(c);
  } catch (const std::exception& e) {
    c.ok = false;
    c.detail << " [exception: " << e.what() << "]";
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (!c.ok) ++failures;
  std::printf("%s %2d %-28s%s (%.1fs)\n", c.ok ? "PASS" : "FAIL", id, name.c_str(), c.detail.str().c_str(), secs);
  std::fflush(stdout);
}

std::string fmt(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", x);
  return buf;
}

std::vector<std::string> ids(std::size_t n) {
  std::vector<std::string> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = "p" + std::to_string(i);
  return out;
}

double se_of(double p, std::size_t reps) { return stats::proportion_se(p, reps); }

}  // namespace

int main() {
  criterion(1, "mcnemar-discordant-pairs", [](Check& c) {
    for (double g : {1.0, 2.0, 3.0}) {
      const double p = mcnemar_gamma_bound(122, 110, g).p_upper;
      c.detail << " G=" << g << ":" << fmt(p);
      c.expect(p < 1e-4, "p < 1e-4 at Gamma " + fmt(g));
    }
    const double p4 = mcnemar_gamma_bound(122, 110, 4).p_upper;
    const double p5 = mcnemar_gamma_bound(122, 110, 5).p_upper;
    const double p6 = mcnemar_gamma_bound(122, 110, 6).p_upper;
    c.detail << " G=4:" << fmt(p4) << " G=5:" << fmt(p5) << " G=6:" << fmt(p6);
    // reported for comparison only; the criterion is judged on the exact tail
    c.detail << " | normal-cc G=4:" << fmt(mcnemar_gamma_bound(122, 110, 4, BoundMethod::kNormalApprox).p_upper)
             << " G=5:" << fmt(mcnemar_gamma_bound(122, 110, 5, BoundMethod::kNormalApprox).p_upper)
             << " G=6:" << fmt(mcnemar_gamma_bound(122, 110, 6, BoundMethod::kNormalApprox).p_upper) << " |";
    c.expect(std::abs(p4 - 0.0036) <= 0.0005, "0.0036 +/- 0.0005");
    c.expect(std::abs(p5 - 0.03) <= 0.005, "0.03 +/- 0.005");
    c.expect(std::abs(p6 - 0.10) <= 0.01, "0.10 +/- 0.01");
  });

  criterion(2, "amplification", [](Check& c) {
    const double g = amplify(9.9, 9.9).gamma;
    c.detail << " (9.9,9.9)->" << fmt(g);
    c.expect(std::abs(g - 5.0) <= 0.01, "5.00 +/- 0.01");
    Stream rng(2024, 2);
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
      const double gamma = 1.01 + 19.0 * rng.uniform();
      const double lambda = gamma * (1.0 + 0.001 + 20.0 * rng.uniform());
      const std::vector<double> grid{lambda};
      const auto curve = amplification_curve(gamma, grid);
      const auto& pt = curve.points.at(0);
      worst = std::max(worst, std::abs(amplify(pt.lambda, pt.delta).gamma - gamma) / gamma);
    }
    c.detail << " round-trip max rel err " << fmt(worst);
    c.expect(worst <= 1e-10, "round trip to 1e-10");
  });

  criterion(3, "design-sensitivity", [](Check& c) {
    const double a = design_sensitivity_normal(0.5).gamma_tilde;
    const double b = design_sensitivity_normal(1.0).gamma_tilde;
    const double z = design_sensitivity_normal(0.0).gamma_tilde;
    c.detail << " 0.5->" << fmt(a) << " 1.0->" << fmt(b) << " 0->" << z;
    c.expect(std::abs(a - 3.17) <= 0.01, "3.17 +/- 0.01");
    c.expect(std::abs(b - 11.72) <= 0.01, "11.72 +/- 0.01");
    c.expect(z == 1.0, "exactly 1");
  });

  criterion(4, "power-vs-gamma-shape", [](Check& c) {
    auto spec = sim::default_spec(sim::ScenarioKind::kPowerVsGamma);
    spec.seed = 4;
    spec.reps = 1000;
    spec.max_reps_large_n = 0;
    spec.effect_sizes = {0.5};
    spec.gamma_grid = {2.5, 4.0};
    const auto r = sim::run(spec);
    double prev = -1.0;
    for (std::size_t n : spec.sample_sizes) {
      const auto s = r.series(sim::detail::size_effect_label(n, 0.5));
      const double at25 = s.at(0).power, at4 = s.at(1).power;
      c.detail << " n=" << n << ":" << fmt(at25) << "/" << fmt(at4);
      c.expect(at25 > prev, "power at 2.5 increasing in n");
      c.expect(at4 <= 0.10, "power at 4 <= 0.10 for n=" + std::to_string(n));
      prev = at25;
    }
    c.expect(prev >= 0.9, "power at 2.5 >= 0.9 for n=20000");
  });

  auto outcome_scenario = [](sim::ScenarioKind kind, std::uint64_t seed) {
    auto spec = sim::default_spec(kind);
    spec.seed = seed;
    spec.reps = 1000;
    spec.n_pairs = 500;
    spec.n_outcomes = 100;
    return sim::run(spec);
  };

  criterion(5, "no-bias-bonferroni-dominates", [&](Check& c) {
    const auto r = outcome_scenario(sim::ScenarioKind::kMultiOutcomeRct, 5);
    const auto bonf = r.series("bonferroni"), split = r.series("splitting");
    for (std::size_t i = 0; i < bonf.size(); ++i) {
      c.detail << " " << fmt(bonf[i].x) << ":" << fmt(bonf[i].power) << "/" << fmt(split[i].power);
      c.expect(bonf[i].power >= split[i].power - 2 * split[i].se, "bonferroni >= splitting - 2SE at " + fmt(bonf[i].x));
    }
  });

  criterion(6, "gamma3-splitting-dominates", [&](Check& c) {
    const auto r = outcome_scenario(sim::ScenarioKind::kMultiOutcomeGamma, 6);
    const auto bonf = r.series("bonferroni"), split = r.series("splitting"), apri = r.series("a-priori");
    for (std::size_t i = 0; i < split.size(); ++i) {
      c.detail << " " << fmt(split[i].x) << ":" << fmt(split[i].power) << "/" << fmt(apri[i].power) << "/"
               << fmt(bonf[i].power);
      const double best = std::max(apri[i].power, bonf[i].power);
      c.expect(split[i].power >= best - 2 * split[i].se, "splitting >= max(others) - 2SE at " + fmt(split[i].x));
    }
  });

  criterion(7, "subgroup-endpoints", [](Check& c) {
    auto spec = sim::default_spec(sim::ScenarioKind::kSubgroupHetero);
    spec.seed = 7;
    spec.reps = 2000;
    spec.subgroup_points = {{3.0, 1.1, 0.0}, {3.0, 0.55, 0.55}};
    const auto r = sim::run(spec);
    const auto comb = r.series("combined gamma=3"), trunc = r.series("truncated-product gamma=3");
    c.detail << " (1.1,0): truncated " << fmt(trunc[0].power) << " combined " << fmt(comb[0].power);
    c.detail << " (0.55,0.55): truncated " << fmt(trunc[1].power) << " combined " << fmt(comb[1].power);
    c.expect(trunc[0].power >= 0.97, "truncated >= 0.97");
    c.expect(comb[0].power <= 0.08, "combined <= 0.08");
    c.expect(comb[1].power >= trunc[1].power - 2 * trunc[1].se, "homogeneous: combined >= truncated - 2SE");
  });

  criterion(8, "uncorrected-familywise", [](Check& c) {
    const std::size_t reps = 10000;
    std::size_t any = 0;
    for (std::size_t rep = 0; rep < reps; ++rep) {
      Stream rng(8, rep);
      bool hit = false;
      for (int t = 0; t < 12; ++t) {
        const double z = rng.normal();
        hit = hit || stats::normal_sf(z) <= 0.05;
      }
      any += hit;
    }
    const double fwer = static_cast<double>(any) / reps;
    c.detail << " FWER " << fmt(fwer) << " (1-.95^12 = " << fmt(1 - std::pow(0.95, 12)) << ")";
    c.expect(std::abs(fwer - 0.46) <= 0.02, "0.46 +/- 0.02");
  });

  criterion(9, "oracle-equivalences", [](Check& c) {
    // (a) exact convolution vs enumeration
    double worst_a = 0.0;
    for (int inst = 0; inst < 100; ++inst) {
      Stream rng(9, static_cast<std::uint64_t>(inst));
      const std::size_t m = 1 + rng.below(12);
      std::vector<double> d(m);
      for (auto& x : d) x = (rng.bernoulli(0.7) ? 1.0 : -1.0) * static_cast<double>(1 + rng.below(6));
      const double gamma = 1.0 + 4.0 * rng.uniform();
      const auto ranked = rank_diffs(d);
      const auto exact = wilcoxon_gamma_bound(ranked, gamma, BoundMethod::kExactConvolution);
      const double p = gamma / (1.0 + gamma);
      const double oracle_p = oracle::signed_rank_tail_enumerated(ranked.abs_ranks, exact.statistic, p);
      worst_a = std::max(worst_a, std::abs(exact.p_upper - oracle_p));
    }
    c.detail << " (a) " << fmt(worst_a);
    c.expect(worst_a <= 1e-12, "(a) exact == enumeration to 1e-12");

    // (b) truncated product analytic vs 1e6-draw Monte Carlo
    double worst_b = 0.0;
    std::uint64_t seed = 90;
    for (std::size_t k : {2u, 5u, 10u}) {
      for (double tau : {0.2, 1.0}) {
        std::vector<double> ps(k);
        for (std::size_t j = 0; j < k; ++j) ps[j] = std::min(1.0, 0.02 + 0.1 * static_cast<double>(j));
        const auto r = truncated_product(PValueSet::unlabeled(ps), tau);
        const auto mc = oracle::truncated_product_mc(k, tau, r.w_statistic, 1000000, ++seed);
        const double zs = mc.se > 0 ? std::abs(r.combined_p - mc.p) / mc.se : (r.combined_p == mc.p ? 0 : 1e9);
        worst_b = std::max(worst_b, zs);
      }
    }
    c.detail << " (b) max |z| " << fmt(worst_b);
    c.expect(worst_b <= 3.0, "(b) analytic within 3 SE of MC");

    // (c) optimal assignment vs brute force
    int mismatches = 0;
    for (std::size_t size : {5u, 6u}) {
      for (int inst = 0; inst < 100; ++inst) {
        Stream rng(91 + size, static_cast<std::uint64_t>(inst));
        DistanceMatrix d;
        for (std::size_t i = 0; i < size; ++i) {
          d.treated_ids.push_back("t" + std::to_string(i));
          d.control_ids.push_back("c" + std::to_string(i));
        }
        d.values.resize(size * size);
        for (auto& v : d.values) v = rng.uniform() * 10.0;
        const auto m = optimal_pair_match(d);
        const auto b = oracle::brute_force_assignment(size, size, d.values);
        if (m.pairs.size() != b.matched || std::abs(m.total_distance - b.total) > 1e-9) ++mismatches;
      }
    }
    c.detail << " (c) mismatches " << mismatches << "/200";
    c.expect(mismatches == 0, "(c) assignment == brute force");

    // (d) propensity fit vs grid-search likelihood maximum
    double worst_d = 0.0;
    int fitted = 0;
    for (std::uint64_t inst = 0; fitted < 8 && inst < 200; ++inst) {
      Stream rng(95, inst);
      const std::size_t k = 1 + fitted % 2;
      std::vector<std::vector<double>> x(k, std::vector<double>(20));
      std::vector<int> y(20);
      for (std::size_t i = 0; i < 20; ++i) {
        double eta = -0.2;
        for (std::size_t cc = 0; cc < k; ++cc) {
          x[cc][i] = rng.normal();
          eta += 0.7 * x[cc][i];
        }
        y[i] = rng.bernoulli(stats::expit(eta));
      }
      std::vector<std::string> names;
      for (std::size_t cc = 0; cc < k; ++cc) names.push_back("x" + std::to_string(cc));
      PropensityModel m;
      try {
        m = fit_propensity(SubjectTable(ids(20), y, names, x));
      } catch (const Error&) {
        continue;
      }
      if (!m.converged) continue;
      const auto g = oracle::logistic_grid_search(x, y);
      for (std::size_t j = 0; j <= k; ++j) worst_d = std::max(worst_d, std::abs(m.coefficients[j] - g[j]));
      ++fitted;
    }
    c.detail << " (d) " << fmt(worst_d) << " over " << fitted << " fits";
    c.expect(fitted == 8, "(d) enough non-degenerate tables");
    c.expect(worst_d <= 1e-6, "(d) Newton == grid search to 1e-6");
  });

  criterion(10, "property-suites", [](Check& c) {
    // Gamma-monotonicity of the upper bound
    int violations = 0;
    for (int inst = 0; inst < 200; ++inst) {
      Stream rng(10, static_cast<std::uint64_t>(inst));
      std::vector<double> d(5 + rng.below(80));
      for (auto& x : d) x = std::round((rng.normal() + 0.3) * 4) / 4;
      if (std::all_of(d.begin(), d.end(), [](double v) { return v == 0.0; })) d[0] = 1.0;
      const auto ranked = rank_diffs(d);
      for (auto method : {BoundMethod::kNormalApprox, BoundMethod::kExactConvolution}) {
        double prev = -1.0;
        for (double g = 1.0; g <= 8.0; g += 0.25) {
          const double p = wilcoxon_gamma_bound(ranked, g, method).p_upper;
          if (p < prev - 1e-15) ++violations;
          prev = p;
        }
      }
      double prev = -1.0;
      for (double g = 1.0; g <= 8.0; g += 0.25) {
        const double p = mcnemar_gamma_bound(static_cast<long>(d.size()), static_cast<long>(d.size() / 2), g).p_upper;
        if (p < prev - 1e-15) ++violations;
        prev = p;
      }
    }
    c.detail << " monotonicity violations " << violations;
    c.expect(violations == 0, "p_upper nondecreasing in Gamma");

    // sign-flip invariance of the absolute-difference tree
    {
      Stream rng(11, 0);
      const std::size_t n = 300;
      std::vector<double> d(n), age(n), sex(n);
      for (std::size_t i = 0; i < n; ++i) {
        age[i] = 1.0 + static_cast<double>(rng.below(20));
        sex[i] = static_cast<double>(rng.below(2));
        d[i] = rng.normal() * (age[i] < 8 ? 2.0 : 1.0) + 0.2;
      }
      const PairSample s(ids(n), d, {"age", "sex"}, {age, sex});
      const auto ref = fit_abs_rank_tree(s);
      int differ = 0;
      for (int k = 0; k < 200; ++k) {
        auto f = d;
        for (auto& v : f)
          if (rng.bernoulli(0.5)) v = -v;
        differ += !(fit_abs_rank_tree(s.with_diffs(f)) == ref);
      }
      c.detail << "; sign-flip differing trees " << differ << "/200 (" << ref.leaves().size() << " leaves)";
      c.expect(differ == 0, "sign-flip invariance");
      c.expect(ref.nodes.size() > 1, "reference tree splits");
    }

    // size under the global null: outcome-splitting pipeline
    const std::size_t reps = 2000;
    const double limit = 0.05 + 2 * se_of(0.05, reps);
    {
      std::size_t rej = 0;
      for (std::size_t rep = 0; rep < reps; ++rep) {
        Stream rng(12, rep);
        std::vector<std::vector<double>> y(10, std::vector<double>(150));
        for (auto& col : y)
          for (auto& v : col) v = rng.normal();
        std::vector<std::string> labels;
        for (int k = 0; k < 10; ++k) labels.push_back("o" + std::to_string(k));
        const MultiOutcomeSample m(ids(150), labels, y);
        const auto sel = select_outcome_split(m, 1.0 / 3, rep);
        rej += wilcoxon_gamma_bound(sel.analysis[0].diffs(), 1.0).p_upper <= 0.05;
      }
      const double rate = static_cast<double>(rej) / reps;
      c.detail << "; splitting size " << fmt(rate);
      c.expect(rate <= limit, "splitting size <= alpha + 2SE");
    }
    // size under the global null: CART-on-|diff| subgroup pipeline
    {
      std::size_t rej = 0;
      for (std::size_t rep = 0; rep < reps; ++rep) {
        Stream rng(13, rep);
        const std::size_t n = 200;
        std::vector<double> d(n), age(n), sex(n);
        for (std::size_t i = 0; i < n; ++i) {
          age[i] = 1.0 + static_cast<double>(rng.below(20));
          sex[i] = static_cast<double>(rng.below(2));
          d[i] = rng.normal() * (1.0 + age[i] / 4.0);
        }
        const PairSample s(ids(n), d, {"age", "sex"}, {age, sex});
        const auto g = subgroups_from_tree(fit_abs_rank_tree(s));
        rej += subgroup_sensitivity_test(s, g, 1.0).combined.combined_p <= 0.05;
      }
      const double rate = static_cast<double>(rej) / reps;
      c.detail << "; CART size " << fmt(rate);
      c.expect(rate <= limit, "CART size <= alpha + 2SE");
    }

    // determinism across worker counts, every scenario
    int mismatched = 0;
    for (int k = 0; k < 6; ++k) {
      auto spec = sim::default_spec(static_cast<sim::ScenarioKind>(k));
      spec.seed = 14;
      spec.reps = 60;
      spec.n_pairs = 80;
      spec.n_outcomes = 10;
      spec.sample_sizes = {100, 400};
      spec.group_size = 80;
      spec.iv.n_subjects = 80;
      auto dump = [](const sim::ScenarioResult& r) {
        return sim::format_curve_csv(r) + sim::format_histogram_csv(r) + sim::format_iv_csv(r) + sim::result_json(r).dump();
      };
      mismatched += dump(sim::run(spec, 1)) != dump(sim::run(spec, 4));
    }
    c.detail << "; scenarios differing across workers " << mismatched << "/6";
    c.expect(mismatched == 0, "identical output for 1 and 4 workers");
  });

  criterion(11, "selection-probability", [](Check& c) {
    const std::size_t n = 500, k = 100;
    std::vector<std::string> labels;
    for (std::size_t o = 0; o < k; ++o) {
      char buf[8];
      std::snprintf(buf, sizeof buf, "y%03zu", o);
      labels.push_back(buf);
    }
    int correct = 0;
    const int seeds = 1000;
    for (int seed = 0; seed < seeds; ++seed) {
      Stream rng(static_cast<std::uint64_t>(seed), 11);
      std::vector<std::vector<double>> y(k, std::vector<double>(n));
      for (std::size_t o = 0; o < k; ++o)
        for (auto& v : y[o]) v = rng.normal() + (o == 0 ? 1.0 : 0.0);
      const MultiOutcomeSample m(ids(n), labels, y);
      correct += select_outcome_split(m, 1.0 / 3, static_cast<std::uint64_t>(seed)).chosen[0] == 0;
    }
    const double freq = static_cast<double>(correct) / seeds;
    c.detail << " correct selection " << fmt(freq);
    c.expect(freq >= 0.95, ">= 0.95");
  });

  std::printf("%s: %d criterion(s) failed\n", failures ? "FAIL" : "PASS", failures);
  return failures ? 1 : 0;
}
