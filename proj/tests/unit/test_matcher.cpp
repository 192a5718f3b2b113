#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "obskit/matcher.hpp"
#include "obskit/random.hpp"
#include "oracles.hpp"

using namespace obskit;

namespace {

std::vector<std::string> make_ids(std::size_t n, const char* prefix = "s") {
  std::vector<std::string> ids(n);
  for (std::size_t i = 0; i < n; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s%03zu", prefix, i);
    ids[i] = buf;
  }
  return ids;
}

std::vector<double> random_costs(Stream& rng, std::size_t r, std::size_t c, double p_forbidden = 0.0) {
  std::vector<double> cost(r * c);
  for (auto& v : cost) v = rng.uniform() < p_forbidden ? stats::kInf : std::floor(rng.uniform() * 100) / 10;
  return cost;
}

}  // namespace

TEST(Subjects, ParseAndValidate) {
  const auto t = parse_subjects(csv::read_string("id,treated,cov_age\na,1,30\nb,0,31\n"));
  EXPECT_EQ(t.size(), 2u);
  EXPECT_EQ(t.treated_rows(), (std::vector<std::size_t>{0}));
  EXPECT_THROW(parse_subjects(csv::read_string("id,treated,cov_age\na,1,30\nb,1,31\n")), ValidationError);
  EXPECT_THROW(parse_subjects(csv::read_string("id,treated,cov_age\na,2,30\nb,0,31\n")), ValidationError);
  EXPECT_THROW(parse_subjects(csv::read_string("id,treated,cov_age\na,1,30\na,0,31\n")), ValidationError);
  EXPECT_THROW(parse_subjects(csv::read_string("id,treated,cov_age\na,1,\nb,0,31\n")), ValidationError);
}

TEST(Propensity, BinaryCovariateLogitContrast) {
  // level 0: 1 of 20 treated; level 1: 7 of 10 treated
  std::vector<int> tr;
  std::vector<double> x;
  for (int i = 0; i < 20; ++i) {
    tr.push_back(i == 0);
    x.push_back(0);
  }
  for (int i = 0; i < 10; ++i) {
    tr.push_back(i < 7);
    x.push_back(1);
  }
  const SubjectTable t(make_ids(30), tr, {"black"}, {x});
  const auto m = fit_propensity(t);
  ASSERT_TRUE(m.converged);
  EXPECT_NEAR(m.coefficients[0], stats::logit(0.05), 1e-8);
  EXPECT_NEAR(m.coefficients[1], stats::logit(0.70) - stats::logit(0.05), 1e-8);
  EXPECT_NEAR(m.coefficients[1], 3.79, 0.005);
}

TEST(Propensity, IndependentCovariateGivesFlatSlope) {
  std::vector<int> tr;
  std::vector<double> x;
  for (int level = -5; level <= 5; ++level)
    for (int i = 0; i < 100; ++i) {
      tr.push_back(i < 30);
      x.push_back(level);
    }
  const SubjectTable t(make_ids(tr.size()), tr, {"x"}, {x});
  const auto m = fit_propensity(t);
  EXPECT_NEAR(m.coefficients[1], 0.0, 1e-9);
  EXPECT_NEAR(m.coefficients[0], stats::logit(0.3), 1e-9);
}

TEST(Propensity, MatchesGridSearchOracle) {
  for (std::uint64_t trial = 0, done = 0; done < 6 && trial < 100; ++trial) {
    Stream rng(trial, 31);
    const std::size_t k = 1 + trial % 2;
    std::vector<std::vector<double>> x(k, std::vector<double>(20));
    std::vector<int> y(20);
    for (std::size_t i = 0; i < 20; ++i) {
      double eta = -0.3;
      for (std::size_t c = 0; c < k; ++c) {
        x[c][i] = rng.normal();
        eta += 0.8 * x[c][i];
      }
      y[i] = rng.bernoulli(stats::expit(eta));
    }
    PropensityModel m;
    try {
      m = fit_propensity(SubjectTable(make_ids(20), y, k == 1 ? std::vector<std::string>{"a"} : std::vector<std::string>{"a", "b"}, x));
    } catch (const Error&) {
      continue;  // degenerate draw
    }
    if (!m.converged) continue;
    if (std::any_of(m.coefficients.begin(), m.coefficients.end(), [](double b) { return std::abs(b) > 8; })) continue;
    const auto grid = oracle::logistic_grid_search(x, y);
    for (std::size_t c = 0; c <= k; ++c) EXPECT_NEAR(m.coefficients[c], grid[c], 1e-6);
    ++done;
  }
}

TEST(Propensity, ScoreEquationsHoldAtConvergence) {
  Stream rng(8, 8);
  const std::size_t n = 300;
  std::vector<double> a(n), b(n);
  std::vector<int> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    a[i] = rng.normal();
    b[i] = rng.uniform() * 4;
    y[i] = rng.bernoulli(stats::expit(-1 + a[i] - 0.3 * b[i]));
  }
  const SubjectTable t(make_ids(n), y, {"a", "b"}, {a, b});
  const auto m = fit_propensity(t);
  ASSERT_TRUE(m.converged);
  const auto p = m.scores(t);
  double s0 = 0, s1 = 0, s2 = 0;
  for (std::size_t i = 0; i < n; ++i) {
    s0 += y[i] - p[i];
    s1 += (y[i] - p[i]) * a[i];
    s2 += (y[i] - p[i]) * b[i];
    ASSERT_GT(p[i], 0.0);
    ASSERT_LT(p[i], 1.0);
  }
  EXPECT_LT(std::max({std::abs(s0), std::abs(s1), std::abs(s2)}), 1e-6);
}

TEST(Propensity, SeparationAndCollinearity) {
  std::vector<double> x{-3, -2, -1, 1, 2, 3};
  std::vector<int> y{0, 0, 0, 1, 1, 1};
  EXPECT_THROW(fit_propensity(SubjectTable(make_ids(6), y, {"x"}, {x})), NumericError);
  std::vector<double> x2{1, 2, 3, 4, 5, 6}, x3{2, 4, 6, 8, 10, 12};
  std::vector<int> y2{0, 1, 0, 1, 1, 0};
  EXPECT_THROW(fit_propensity(SubjectTable(make_ids(6), y2, {"a", "b"}, {x2, x3})), ValidationError);
}

TEST(Distance, IdenticalCovariatesGiveZero) {
  const SubjectTable t(make_ids(4), {1, 0, 0, 1}, {"x", "z"}, {{1, 1, 5, 3}, {2, 2, 0, 7}});
  const auto d = distance_matrix(t);
  EXPECT_EQ(d.at(0, 0), 0.0);
  EXPECT_GT(d.at(0, 1), 0.0);
}

TEST(Distance, HandComputedRankMahalanobis) {
  // one covariate, values 1..6 so ranks equal values; rank variance 3.5
  const SubjectTable t(make_ids(6), {1, 1, 1, 0, 0, 0}, {"x"}, {{1, 4, 6, 2, 3, 5}});
  const auto d = distance_matrix(t);
  const double treated[] = {1, 4, 6}, control[] = {2, 3, 5};
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) {
      const double dr = treated[a] - control[b];
      EXPECT_NEAR(d.at(a, b), dr * dr / 3.5, 1e-12);
    }
  EXPECT_TRUE(d.notes.empty());
}

TEST(Distance, DuplicatedCovariateAddsRidgeAndSaysSo) {
  const std::vector<double> x{1, 4, 6, 2, 3, 5};
  const SubjectTable t(make_ids(6), {1, 1, 1, 0, 0, 0}, {"x", "x_copy"}, {x, x});
  const auto d = distance_matrix(t);
  ASSERT_EQ(d.notes.size(), 1u);
  EXPECT_NE(d.notes[0].find("ridge"), std::string::npos);
  for (double v : d.values) EXPECT_TRUE(std::isfinite(v) && v >= 0);
}

TEST(Distance, CaliperForbidsDistantScores) {
  const SubjectTable t(make_ids(4), {1, 0, 0, 1}, {"x"}, {{0, 1, 2, 3}});
  PropensityModel m;
  m.coefficients = {stats::logit(0.2), stats::logit(0.5) - stats::logit(0.2)};  // x=0 -> 0.2, x=1 -> 0.5
  DistanceOptions opt;
  opt.caliper = 0.1;
  opt.propensity = &m;
  const auto d = distance_matrix(t, opt);
  EXPECT_EQ(d.at(0, 0), stats::kInf);  // 0.2 vs 0.5
  opt.metric = DistanceMetric::kPropensity;
  opt.caliper.reset();
  const auto e = distance_matrix(t, opt);
  EXPECT_NEAR(e.at(0, 0), 0.3, 1e-12);
  DistanceOptions missing;
  missing.metric = DistanceMetric::kPropensity;
  EXPECT_THROW(distance_matrix(t, missing), ValidationError);
}

TEST(Assignment, TrivialCases) {
  const std::vector<double> one{0.7};
  auto a = solve_assignment(1, 1, one);
  EXPECT_EQ(a.row_to_col[0], 0);
  EXPECT_DOUBLE_EQ(a.total, 0.7);

  std::vector<double> diag(16, 1.0);
  for (int i = 0; i < 4; ++i) diag[i * 4 + i] = 0.0;
  a = solve_assignment(4, 4, diag);
  for (long i = 0; i < 4; ++i) EXPECT_EQ(a.row_to_col[static_cast<std::size_t>(i)], i);
  EXPECT_EQ(a.total, 0.0);
}

TEST(Assignment, BruteForceOnRandomSquareAndRectangular) {
  for (std::uint64_t t = 0; t < 300; ++t) {
    Stream rng(t, 21);
    const std::size_t r = 1 + rng.below(6);
    const std::size_t c = r + rng.below(3);
    const auto cost = random_costs(rng, r, c, t % 3 == 0 ? 0.4 : 0.0);
    const auto a = solve_assignment(r, c, cost);
    const auto b = oracle::brute_force_assignment(r, c, cost);
    ASSERT_EQ(a.matched, b.matched) << "trial " << t;
    ASSERT_NEAR(a.total, b.total, 1e-9) << "trial " << t;
    std::vector<char> used(c, 0);
    for (auto j : a.row_to_col) {
      if (j < 0) continue;
      ASSERT_FALSE(used[static_cast<std::size_t>(j)]);
      used[static_cast<std::size_t>(j)] = 1;
    }
  }
}

TEST(Assignment, NeverWorseThanGreedy) {
  for (std::uint64_t t = 0; t < 200; ++t) {
    Stream rng(t, 22);
    const std::size_t n = 2 + rng.below(30), c = n + rng.below(10);
    const auto cost = random_costs(rng, n, c);
    std::vector<char> used(c, 0);
    double greedy = 0;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = c;
      for (std::size_t j = 0; j < c; ++j)
        if (!used[j] && (best == c || cost[i * c + j] < cost[i * c + best])) best = j;
      used[best] = 1;
      greedy += cost[i * c + best];
    }
    EXPECT_LE(solve_assignment(n, c, cost).total, greedy + 1e-9);
  }
}

TEST(Assignment, RejectsNegativeCosts) {
  const std::vector<double> bad{-1.0};
  EXPECT_THROW(solve_assignment(1, 1, bad), ValidationError);
}

TEST(Match, UnmatchableTreatedIsReported) {
  DistanceMatrix d;
  d.treated_ids = {"t1", "t2"};
  d.control_ids = {"c1", "c2"};
  d.values = {1.0, 2.0, stats::kInf, stats::kInf};
  const auto m = optimal_pair_match(d);
  ASSERT_EQ(m.pairs.size(), 1u);
  EXPECT_EQ(m.unmatched_treated, (std::vector<std::string>{"t2"}));
  EXPECT_EQ(m.warnings.size(), 1u);
  EXPECT_DOUBLE_EQ(m.total_distance, 1.0);
}

TEST(Match, PermutingControlsPermutesPairing) {
  for (std::uint64_t t = 0; t < 30; ++t) {
    Stream rng(t, 23);
    const std::size_t n = 8, c = 12;
    DistanceMatrix d;
    d.treated_ids = make_ids(n, "t");
    d.control_ids = make_ids(c, "c");
    d.values = random_costs(rng, n, c);
    const auto m = optimal_pair_match(d);

    std::vector<std::size_t> perm(c);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    DistanceMatrix p = d;
    for (std::size_t j = 0; j < c; ++j) {
      p.control_ids[j] = d.control_ids[perm[j]];
      for (std::size_t i = 0; i < n; ++i) p.at(i, j) = d.at(i, perm[j]);
    }
    const auto mp = optimal_pair_match(p);
    EXPECT_DOUBLE_EQ(mp.total_distance, m.total_distance);
    ASSERT_EQ(mp.pairs.size(), m.pairs.size());
    for (std::size_t k = 0; k < m.pairs.size(); ++k) {
      EXPECT_EQ(mp.pairs[k].treated_id, m.pairs[k].treated_id);
      EXPECT_EQ(mp.pairs[k].control_id, m.pairs[k].control_id);
    }
  }
}

TEST(Match, CsvRoundTrip) {
  MatchResult m;
  m.pairs = {{"t1", "c9", 0.125}, {"t2", "c3", 1.0 / 3.0}};
  const auto back = parse_matches(csv::read_string(format_matches(m)));
  ASSERT_EQ(back.pairs.size(), 2u);
  EXPECT_EQ(back.pairs[1].distance, 1.0 / 3.0);
  EXPECT_EQ(back.pairs[0].control_id, "c9");
}

TEST(Balance, ConstantCovariateIsZero) {
  const SubjectTable t(make_ids(4), {1, 0, 1, 0}, {"k"}, {{2, 2, 2, 2}});
  MatchResult m;
  m.pairs = {{"s000", "s001", 0}, {"s002", "s003", 0}};
  const auto r = balance_report(t, m);
  EXPECT_EQ(r.rows[0].std_diff_before, 0.0);
  EXPECT_EQ(r.rows[0].std_diff_after, 0.0);
  EXPECT_FALSE(r.rows[0].degenerate);
}

TEST(Balance, PooledPreMatchingSdDenominator) {
  // treated {2.34 -/+ a}, controls {1.79 -/+ a, 1.79 -/+ a}: pooled SD = 2.1154
  const double a = 2.1154 / std::sqrt(2.0);
  const double ac = a * std::sqrt(1.5);  // same sample variance as the treated pair
  const SubjectTable t(make_ids(6), {1, 1, 0, 0, 0, 0}, {"educ"},
                       {{2.34 - a, 2.34 + a, 1.79 - ac, 1.79 + ac, 1.79 - ac, 1.79 + ac}});
  MatchResult m;
  m.pairs = {{"s000", "s002", 0}, {"s001", "s003", 0}};
  const auto r = balance_report(t, m);
  EXPECT_NEAR(r.rows[0].mean_treated, 2.34, 1e-12);
  EXPECT_NEAR(r.rows[0].mean_all_controls, 1.79, 1e-12);
  EXPECT_NEAR(r.rows[0].std_diff_before, 0.26, 0.005);
  EXPECT_NEAR(r.rows[0].std_diff_before, 0.55 / 2.1154, 1e-9);
  EXPECT_TRUE(r.flagged(r.rows[0].std_diff_before));
  EXPECT_NE(format_balance_table(r).find('*'), std::string::npos);
}

TEST(Balance, DegenerateWhenSdZeroButMeansDiffer) {
  const SubjectTable t(make_ids(2), {1, 0}, {"k"}, {{1, 2}});
  MatchResult m;
  m.pairs = {{"s000", "s001", 0}};
  const auto r = balance_report(t, m);
  EXPECT_TRUE(r.rows[0].degenerate);
  EXPECT_TRUE(std::isnan(r.rows[0].std_diff_before));
  EXPECT_TRUE(r.flagged(r.rows[0].std_diff_before));
}

TEST(Balance, MatchingImprovesBalanceUnderConfounding) {
  int improved = 0;
  const int trials = 60;
  for (int t = 0; t < trials; ++t) {
    Stream rng(static_cast<std::uint64_t>(t), 24);
    const std::size_t n = 150;
    std::vector<double> x(n), z(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = rng.normal();
      z[i] = rng.normal();
      y[i] = rng.bernoulli(stats::expit(-1.2 + 0.8 * x[i] + 0.5 * z[i]));
    }
    const SubjectTable tab(make_ids(n), y, {"x", "z"}, {x, z});
    if (tab.treated_rows().empty() || tab.control_rows().size() < tab.treated_rows().size()) continue;
    const auto m = optimal_pair_match(distance_matrix(tab));
    const auto r = balance_report(tab, m);
    bool ok = true;
    for (const auto& row : r.rows) ok = ok && std::abs(row.std_diff_after) < std::abs(row.std_diff_before);
    improved += ok;
  }
  EXPECT_GE(improved, static_cast<int>(0.95 * trials));
}
