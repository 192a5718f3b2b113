#pragma once

// Optimal pair matching of treated to control subjects, with covariate
// balance diagnostics.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include <Eigen/Dense>

#include "obskit/csv.hpp"
#include "obskit/error.hpp"
#include "obskit/stats.hpp"

namespace obskit {

class SubjectTable {
 public:
  SubjectTable() = default;

  // covariates[c][i] is covariate c of subject i.
  SubjectTable(std::vector<std::string> ids, std::vector<int> treated,
               std::vector<std::string> covariate_names, std::vector<std::vector<double>> covariates)
      : ids_(std::move(ids)),
        treated_(std::move(treated)),
        names_(std::move(covariate_names)),
        cov_(std::move(covariates)) {
    validate();
  }

  std::size_t size() const noexcept { return ids_.size(); }
  const std::vector<std::string>& ids() const noexcept { return ids_; }
  const std::vector<int>& treated() const noexcept { return treated_; }
  bool is_treated(std::size_t i) const { return treated_.at(i) == 1; }
  const std::vector<std::string>& covariate_names() const noexcept { return names_; }
  const std::vector<double>& covariate(std::size_t c) const { return cov_.at(c); }
  std::size_t num_covariates() const noexcept { return names_.size(); }

  std::vector<std::size_t> treated_rows() const { return rows_with(1); }
  std::vector<std::size_t> control_rows() const { return rows_with(0); }

  // Row position of an id, or -1.
  long find(std::string_view id) const {
    for (std::size_t i = 0; i < ids_.size(); ++i)
      if (ids_[i] == id) return static_cast<long>(i);
    return -1;
  }

 private:
  std::vector<std::size_t> rows_with(int flag) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < treated_.size(); ++i)
      if (treated_[i] == flag) out.push_back(i);
    return out;
  }

  void validate() const {
    if (treated_.size() != ids_.size()) throw ValidationError("ids and treatment flags differ in length");
    if (cov_.size() != names_.size()) throw ValidationError("covariate names and columns differ in count");
    std::unordered_set<std::string> seen;
    std::size_t n_treated = 0;
    for (std::size_t i = 0; i < ids_.size(); ++i) {
      if (!seen.insert(ids_[i]).second)
        throw ValidationError(csv::location(i + 1, "id") + " duplicate id '" + ids_[i] + "'");
      if (treated_[i] != 0 && treated_[i] != 1)
        throw ValidationError(csv::location(i + 1, "treated") + " treated must be 0 or 1");
      n_treated += static_cast<std::size_t>(treated_[i]);
    }
    if (n_treated == 0 || n_treated == ids_.size())
      throw ValidationError("need at least one treated and one control subject");
    for (std::size_t c = 0; c < cov_.size(); ++c) {
      if (cov_[c].size() != ids_.size())
        throw ValidationError("covariate '" + names_[c] + "' is missing values");
      for (std::size_t i = 0; i < ids_.size(); ++i)
        if (!std::isfinite(cov_[c][i]))
          throw ValidationError(csv::location(i + 1, "cov_" + names_[c]) + " covariate must be finite");
    }
  }

  std::vector<std::string> ids_;
  std::vector<int> treated_;
  std::vector<std::string> names_;
  std::vector<std::vector<double>> cov_;
};

// Parses `id,treated,cov_<name>...`.
inline SubjectTable parse_subjects(const csv::Table& t) {
  const int id_col = t.column("id");
  const int tr_col = t.column("treated");
  if (id_col < 0) throw ValidationError(csv::location(0, "id") + " missing column");
  if (tr_col < 0) throw ValidationError(csv::location(0, "treated") + " missing column");
  if (t.rows.empty()) throw ValidationError("empty file: no subjects");
  std::vector<std::string> names;
  std::vector<std::size_t> cols;
  for (std::size_t c = 0; c < t.header.size(); ++c) {
    if (t.header[c].rfind("cov_", 0) == 0) {
      names.push_back(t.header[c].substr(4));
      cols.push_back(c);
    }
  }
  std::vector<std::string> ids;
  std::vector<int> treated;
  std::vector<std::vector<double>> cov(names.size());
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    ids.push_back(row[static_cast<std::size_t>(id_col)]);
    const auto& flag = row[static_cast<std::size_t>(tr_col)];
    if (flag != "0" && flag != "1")
      throw ValidationError(csv::location(r + 1, "treated") + " treated must be 0 or 1, got '" + flag + "'");
    treated.push_back(flag == "1" ? 1 : 0);
    for (std::size_t c = 0; c < names.size(); ++c) {
      const auto& cell = row[cols[c]];
      if (cell.empty() || cell == "NA")
        throw ValidationError(csv::location(r + 1, t.header[cols[c]]) + " missing covariate value");
      cov[c].push_back(csv::parse_double(cell, r + 1, t.header[cols[c]]));
    }
  }
  return SubjectTable(std::move(ids), std::move(treated), std::move(names), std::move(cov));
}

inline SubjectTable load_subjects(const std::string& path) { return parse_subjects(csv::read_file(path)); }

// ---------------------------------------------------------------------------
// Propensity score

struct PropensityModel {
  std::vector<double> coefficients;  // intercept first, then one per covariate
  bool converged = false;
  int iterations = 0;
  double max_score_residual = 0.0;
  double log_likelihood = 0.0;

  double linear_predictor(const SubjectTable& t, std::size_t i) const {
    double eta = coefficients.at(0);
    for (std::size_t c = 0; c < t.num_covariates(); ++c) eta += coefficients.at(c + 1) * t.covariate(c)[i];
    return eta;
  }

  std::vector<double> scores(const SubjectTable& t) const {
    std::vector<double> p(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) p[i] = stats::expit(linear_predictor(t, i));
    return p;
  }
};

struct PropensityOptions {
  double tolerance = 1e-8;
  int max_iterations = 100;
};

namespace detail {

inline Eigen::MatrixXd design_matrix(const SubjectTable& t) {
  Eigen::MatrixXd x(static_cast<Eigen::Index>(t.size()), static_cast<Eigen::Index>(t.num_covariates() + 1));
  for (std::size_t i = 0; i < t.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    x(r, 0) = 1.0;
    for (std::size_t c = 0; c < t.num_covariates(); ++c)
      x(r, static_cast<Eigen::Index>(c + 1)) = t.covariate(c)[i];
  }
  return x;
}

inline double bernoulli_log_likelihood(const Eigen::VectorXd& eta, const Eigen::VectorXd& y) {
  double ll = 0.0;
  for (Eigen::Index i = 0; i < eta.size(); ++i) {
    // log(1 + e^eta) computed stably
    const double e = eta(i);
    const double softplus = e > 0 ? e + std::log1p(std::exp(-e)) : std::log1p(std::exp(e));
    ll += y(i) * e - softplus;
  }
  return ll;
}

}  // namespace detail

// Maximum-likelihood logistic regression of treatment on the covariates by
// Newton's method with step halving. Converged when every score equation
// residual is below the tolerance.
inline PropensityModel fit_propensity(const SubjectTable& t, const PropensityOptions& opt = {}) {
  const std::size_t p = t.num_covariates() + 1;
  if (t.size() < p) throw ValidationError("need at least #covariates + 1 subjects to fit a propensity model");
  const Eigen::MatrixXd x = detail::design_matrix(t);
  {
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(x);
    if (static_cast<std::size_t>(qr.rank()) < p)
      throw ValidationError("covariates are constant or collinear; propensity model is not identified");
  }
  Eigen::VectorXd y(x.rows());
  for (std::size_t i = 0; i < t.size(); ++i) y(static_cast<Eigen::Index>(i)) = t.treated()[i];

  Eigen::VectorXd beta = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p));
  Eigen::VectorXd eta = x * beta;
  double ll = detail::bernoulli_log_likelihood(eta, y);
  PropensityModel model;
  for (int iter = 0; iter <= opt.max_iterations; ++iter) {
    Eigen::VectorXd mu = eta.unaryExpr([](double e) { return stats::expit(e); });
    const Eigen::VectorXd score = x.transpose() * (y - mu);
    model.iterations = iter;
    model.max_score_residual = score.cwiseAbs().maxCoeff();
    if (model.max_score_residual < opt.tolerance) {
      model.converged = true;
      break;
    }
    if (iter == opt.max_iterations) break;
    const Eigen::VectorXd w = mu.cwiseProduct((Eigen::VectorXd::Ones(mu.size()) - mu));
    const Eigen::MatrixXd info = x.transpose() * w.asDiagonal() * x;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(info);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) break;
    const Eigen::VectorXd step = ldlt.solve(score);
    double scale = 1.0;
    bool improved = false;
    for (int h = 0; h < 40; ++h, scale *= 0.5) {
      const Eigen::VectorXd trial = beta + scale * step;
      const Eigen::VectorXd trial_eta = x * trial;
      const double trial_ll = detail::bernoulli_log_likelihood(trial_eta, y);
      // near the optimum the log-likelihood is flat to rounding; a step within
      // that noise is still taken so the score can reach tolerance
      if (std::isfinite(trial_ll) && trial_ll >= ll - 1e-12 * (1.0 + std::abs(ll))) {
        beta = trial;
        eta = trial_eta;
        ll = trial_ll;
        improved = true;
        break;
      }
    }
    if (!improved) break;
  }
  model.coefficients.assign(beta.data(), beta.data() + beta.size());
  model.log_likelihood = ll;
  // Separation drives the likelihood toward its supremum with diverging
  // coefficients and fitted probabilities pinned at 0 or 1; the score can
  // still fall below tolerance on the way, so this runs either way.
  std::size_t pinned = 0, exact = 0;
  for (Eigen::Index i = 0; i < eta.size(); ++i) {
    if (std::abs(eta(i)) > 15.0) ++pinned;
    if (std::abs(y(i) - stats::expit(eta(i))) < 1e-6) ++exact;
  }
  if (exact == static_cast<std::size_t>(eta.size()) || (beta.cwiseAbs().maxCoeff() > 15.0 && pinned > 0)) {
    throw NumericError(
        "complete or quasi-complete separation in the propensity model; match exactly on the "
        "separating covariates instead of using a propensity caliper");
  }
  return model;
}

// ---------------------------------------------------------------------------
// Distances

enum class DistanceMetric { kRankMahalanobis, kPropensity };

inline std::string_view to_string(DistanceMetric m) {
  return m == DistanceMetric::kRankMahalanobis ? "rank-mahalanobis" : "propensity-abs-diff";
}

inline DistanceMetric parse_distance_metric(std::string_view s) {
  if (s == "rank-mahalanobis" || s == "mahalanobis") return DistanceMetric::kRankMahalanobis;
  if (s == "propensity-abs-diff" || s == "propensity") return DistanceMetric::kPropensity;
  throw ValidationError("unknown distance metric '" + std::string(s) + "'");
}

struct DistanceOptions {
  DistanceMetric metric = DistanceMetric::kRankMahalanobis;
  std::optional<double> caliper;               // on the propensity score scale
  const PropensityModel* propensity = nullptr;  // required by kPropensity or a caliper
};

// Treated subjects index rows, controls index columns; +inf marks a
// forbidden pair.
struct DistanceMatrix {
  std::vector<std::string> treated_ids;
  std::vector<std::string> control_ids;
  std::vector<double> values;  // row-major
  std::vector<std::string> notes;

  std::size_t rows() const noexcept { return treated_ids.size(); }
  std::size_t cols() const noexcept { return control_ids.size(); }
  double at(std::size_t i, std::size_t j) const { return values.at(i * cols() + j); }
  double& at(std::size_t i, std::size_t j) { return values.at(i * cols() + j); }
};

inline constexpr double kRidgeFactor = 1e-6;

// Inverse of the tie-adjusted covariance of covariate ranks (ranks pooled over
// all subjects, each variance rescaled to that of untied ranks 1..n).
inline Eigen::MatrixXd rank_covariance_inverse(const Eigen::MatrixXd& ranks,
                                               std::vector<std::string>* notes = nullptr) {
  const Eigen::Index n = ranks.rows();
  const Eigen::Index k = ranks.cols();
  const Eigen::RowVectorXd mean = ranks.colwise().mean();
  const Eigen::MatrixXd centered = ranks.rowwise() - mean;
  Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(std::max<Eigen::Index>(n - 1, 1));
  const double untied = static_cast<double>(n) * static_cast<double>(n + 1) / 12.0;
  Eigen::VectorXd rat(k);
  for (Eigen::Index c = 0; c < k; ++c) rat(c) = cov(c, c) > 0 ? std::sqrt(untied / cov(c, c)) : 0.0;
  cov = rat.asDiagonal() * cov * rat.asDiagonal();

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  const double top = eig.eigenvalues().cwiseAbs().maxCoeff();
  const double low = eig.eigenvalues().minCoeff();
  if (!(low > 1e-10 * std::max(top, 1e-300))) {
    const double trace = cov.trace();
    const double ridge = trace > 0 ? kRidgeFactor * trace / static_cast<double>(k) : kRidgeFactor;
    cov += ridge * Eigen::MatrixXd::Identity(k, k);
    if (notes) notes->push_back("singular rank covariance: ridge " + csv::format_sig6(ridge) + " added to diagonal");
  }
  return cov.ldlt().solve(Eigen::MatrixXd::Identity(k, k));
}

inline DistanceMatrix distance_matrix(const SubjectTable& t, const DistanceOptions& opt = {}) {
  const auto tr = t.treated_rows();
  const auto co = t.control_rows();
  const bool need_ps = opt.metric == DistanceMetric::kPropensity || opt.caliper.has_value();
  if (need_ps && opt.propensity == nullptr)
    throw ValidationError("a fitted propensity model is required for this metric or caliper");
  if (opt.caliper && !(*opt.caliper > 0.0)) throw ValidationError("caliper must be positive");

  DistanceMatrix d;
  for (auto i : tr) d.treated_ids.push_back(t.ids()[i]);
  for (auto j : co) d.control_ids.push_back(t.ids()[j]);
  d.values.assign(tr.size() * co.size(), 0.0);

  std::vector<double> ps;
  if (need_ps) ps = opt.propensity->scores(t);

  if (opt.metric == DistanceMetric::kRankMahalanobis) {
    const auto k = static_cast<Eigen::Index>(t.num_covariates());
    if (k == 0) throw ValidationError("rank-mahalanobis distance needs at least one covariate");
    Eigen::MatrixXd ranks(static_cast<Eigen::Index>(t.size()), k);
    for (Eigen::Index c = 0; c < k; ++c) {
      const auto r = stats::average_ranks(t.covariate(static_cast<std::size_t>(c)));
      for (std::size_t i = 0; i < r.size(); ++i) ranks(static_cast<Eigen::Index>(i), c) = r[i];
    }
    const Eigen::MatrixXd inv = rank_covariance_inverse(ranks, &d.notes);
    const auto kk = static_cast<std::size_t>(k);
    std::vector<double> diff(kk);
    for (std::size_t a = 0; a < tr.size(); ++a) {
      for (std::size_t b = 0; b < co.size(); ++b) {
        for (std::size_t c = 0; c < kk; ++c)
          diff[c] = ranks(static_cast<Eigen::Index>(tr[a]), static_cast<Eigen::Index>(c)) -
                    ranks(static_cast<Eigen::Index>(co[b]), static_cast<Eigen::Index>(c));
        double q = 0.0;
        for (std::size_t r = 0; r < kk; ++r)
          for (std::size_t c = 0; c < kk; ++c)
            q += diff[r] * inv(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) * diff[c];
        d.at(a, b) = std::max(0.0, q);
      }
    }
  } else {
    for (std::size_t a = 0; a < tr.size(); ++a)
      for (std::size_t b = 0; b < co.size(); ++b) d.at(a, b) = std::abs(ps[tr[a]] - ps[co[b]]);
  }

  if (opt.caliper) {
    for (std::size_t a = 0; a < tr.size(); ++a)
      for (std::size_t b = 0; b < co.size(); ++b)
        if (std::abs(ps[tr[a]] - ps[co[b]]) > *opt.caliper) d.at(a, b) = stats::kInf;
  }
  return d;
}

// ---------------------------------------------------------------------------
// Assignment

struct Assignment {
  std::vector<long> row_to_col;  // -1 when the row is unmatched
  double total = 0.0;
  std::size_t matched = 0;
};

// Minimum-cost maximum-cardinality assignment of rows to distinct columns by
// successive shortest augmenting paths (Dijkstra with vertex potentials).
// Entries equal to +inf are forbidden. Each phase grows the matching by one
// along the cheapest augmenting path from any free row, so after every phase
// the matching is optimal for its size. Ties resolve toward lower indices.
inline Assignment solve_assignment(std::size_t rows, std::size_t cols, std::span<const double> cost) {
  if (cost.size() != rows * cols) throw ValidationError("cost matrix has the wrong size");
  for (double c : cost)
    if (std::isnan(c) || c < 0.0) throw ValidationError("costs must be nonnegative (or +inf)");

  constexpr double inf = stats::kInf;
  std::vector<double> u(rows, 0.0), v(cols, 0.0);
  std::vector<long> match_row(rows, -1), match_col(cols, -1);
  std::vector<double> dist_row(rows), minv(cols);
  std::vector<long> way(cols);
  std::vector<char> used(cols);

  auto relax = [&](std::size_t i, double base) {
    const double* c = cost.data() + i * cols;
    for (std::size_t j = 0; j < cols; ++j) {
      if (used[j] || c[j] == inf) continue;
      const double val = base + c[j] - u[i] - v[j];
      if (val < minv[j]) {
        minv[j] = val;
        way[j] = static_cast<long>(i);
      }
    }
  };

  for (std::size_t phase = 0; phase < std::min(rows, cols); ++phase) {
    std::fill(dist_row.begin(), dist_row.end(), inf);
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(way.begin(), way.end(), -1);
    std::fill(used.begin(), used.end(), 0);
    for (std::size_t i = 0; i < rows; ++i) {
      if (match_row[i] != -1) continue;
      dist_row[i] = 0.0;
      relax(i, 0.0);
    }
    long target = -1;
    double reach = inf;
    for (;;) {
      long best = -1;
      for (std::size_t j = 0; j < cols; ++j)
        if (!used[j] && minv[j] < inf && (best < 0 || minv[j] < minv[static_cast<std::size_t>(best)]))
          best = static_cast<long>(j);
      if (best < 0) break;
      const auto j = static_cast<std::size_t>(best);
      used[j] = 1;
      reach = minv[j];
      if (match_col[j] == -1) {
        target = best;
        break;
      }
      const auto i2 = static_cast<std::size_t>(match_col[j]);
      dist_row[i2] = reach;
      relax(i2, reach);
    }
    if (target < 0) break;  // no augmenting path: cardinality is maximal

    for (std::size_t i = 0; i < rows; ++i)
      if (dist_row[i] < inf) u[i] += reach - dist_row[i];
    for (std::size_t j = 0; j < cols; ++j)
      if (used[j]) v[j] -= reach - minv[j];

    auto j = static_cast<std::size_t>(target);
    for (;;) {
      const auto i = static_cast<std::size_t>(way[j]);
      const long prev = match_row[i];
      match_row[i] = static_cast<long>(j);
      match_col[j] = static_cast<long>(i);
      if (prev == -1) break;
      j = static_cast<std::size_t>(prev);
    }
  }

  Assignment a;
  a.row_to_col = match_row;
  stats::CompensatedSum total;
  for (std::size_t i = 0; i < rows; ++i) {
    if (match_row[i] < 0) continue;
    ++a.matched;
    total.add(cost[i * cols + static_cast<std::size_t>(match_row[i])]);
  }
  a.total = total.value();
  return a;
}

struct MatchedPair {
  std::string treated_id;
  std::string control_id;
  double distance = 0.0;
};

struct MatchResult {
  std::vector<MatchedPair> pairs;  // ordered by treated id
  double total_distance = 0.0;
  std::vector<std::string> unmatched_treated;
  std::vector<std::string> warnings;
};

// Optimal pair matching. Rows and columns are first ordered by id so that the
// solver's low-index tie-breaking is lexicographic in (treated_id, control_id)
// whatever order the subjects arrived in.
inline MatchResult optimal_pair_match(const DistanceMatrix& d) {
  const std::size_t r = d.rows();
  const std::size_t c = d.cols();
  if (r == 0 || c == 0) throw ValidationError("distance matrix is empty");
  std::vector<std::size_t> ro(r), co(c);
  std::iota(ro.begin(), ro.end(), std::size_t{0});
  std::iota(co.begin(), co.end(), std::size_t{0});
  std::stable_sort(ro.begin(), ro.end(), [&](auto a, auto b) { return d.treated_ids[a] < d.treated_ids[b]; });
  std::stable_sort(co.begin(), co.end(), [&](auto a, auto b) { return d.control_ids[a] < d.control_ids[b]; });
  std::vector<double> cost(r * c);
  for (std::size_t a = 0; a < r; ++a)
    for (std::size_t b = 0; b < c; ++b) cost[a * c + b] = d.at(ro[a], co[b]);

  const Assignment asg = solve_assignment(r, c, cost);
  MatchResult m;
  stats::CompensatedSum total;
  for (std::size_t a = 0; a < r; ++a) {
    const auto& tid = d.treated_ids[ro[a]];
    if (asg.row_to_col[a] < 0) {
      m.unmatched_treated.push_back(tid);
      continue;
    }
    const auto b = static_cast<std::size_t>(asg.row_to_col[a]);
    const double dist = cost[a * c + b];
    m.pairs.push_back({tid, d.control_ids[co[b]], dist});
    total.add(dist);
  }
  m.total_distance = total.value();
  if (!m.unmatched_treated.empty()) {
    m.warnings.push_back(std::to_string(m.unmatched_treated.size()) +
                         " treated subject(s) could not be matched; result is a maximum feasible matching");
  }
  return m;
}

inline std::string format_matches(const MatchResult& m) {
  std::string out = "treated_id,control_id,distance\n";
  for (const auto& p : m.pairs) out += p.treated_id + "," + p.control_id + "," + csv::format_exact(p.distance) + "\n";
  return out;
}

inline MatchResult parse_matches(const csv::Table& t) {
  const int tc = t.column("treated_id");
  const int cc = t.column("control_id");
  const int dc = t.column("distance");
  if (tc < 0) throw ValidationError(csv::location(0, "treated_id") + " missing column");
  if (cc < 0) throw ValidationError(csv::location(0, "control_id") + " missing column");
  MatchResult m;
  stats::CompensatedSum total;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    MatchedPair p{row[static_cast<std::size_t>(tc)], row[static_cast<std::size_t>(cc)], 0.0};
    if (dc >= 0) p.distance = csv::parse_double(row[static_cast<std::size_t>(dc)], r + 1, "distance");
    total.add(p.distance);
    m.pairs.push_back(std::move(p));
  }
  m.total_distance = total.value();
  return m;
}

// ---------------------------------------------------------------------------
// Balance

struct BalanceRow {
  std::string covariate;
  double mean_treated = 0.0;
  double mean_matched_control = 0.0;
  double mean_all_controls = 0.0;
  double std_diff_before = 0.0;
  double std_diff_after = 0.0;
  bool degenerate = false;  // zero pre-matching SD with unequal means
};

struct BalanceReport {
  std::vector<BalanceRow> rows;
  double flag_threshold = 0.2;

  bool flagged(double std_diff) const { return std::isnan(std_diff) || std::abs(std_diff) > flag_threshold; }
};

// Standardized differences: difference in means divided by the pooled
// pre-matching SD, sqrt((s_t^2 + s_c^2) / 2), in both columns.
inline BalanceReport balance_report(const SubjectTable& t, const MatchResult& m, double threshold = 0.2) {
  if (m.pairs.empty()) throw ValidationError("balance report needs a nonempty match");
  std::vector<std::size_t> mt, mc;
  for (const auto& p : m.pairs) {
    const long a = t.find(p.treated_id);
    const long b = t.find(p.control_id);
    if (a < 0 || b < 0) throw ValidationError("matched id not found in subject table: " + (a < 0 ? p.treated_id : p.control_id));
    if (!t.is_treated(static_cast<std::size_t>(a)) || t.is_treated(static_cast<std::size_t>(b)))
      throw ValidationError("pair (" + p.treated_id + ", " + p.control_id + ") is not treated-control");
    mt.push_back(static_cast<std::size_t>(a));
    mc.push_back(static_cast<std::size_t>(b));
  }
  const auto tr = t.treated_rows();
  const auto co = t.control_rows();
  auto gather = [](const std::vector<double>& col, const std::vector<std::size_t>& rows) {
    std::vector<double> out;
    out.reserve(rows.size());
    for (auto r : rows) out.push_back(col[r]);
    return out;
  };

  BalanceReport rep;
  rep.flag_threshold = threshold;
  for (std::size_t c = 0; c < t.num_covariates(); ++c) {
    const auto& col = t.covariate(c);
    const auto xt = gather(col, tr);
    const auto xc = gather(col, co);
    const auto xmt = gather(col, mt);
    const auto xmc = gather(col, mc);
    BalanceRow row;
    row.covariate = t.covariate_names()[c];
    row.mean_treated = stats::mean(xt);
    row.mean_all_controls = stats::mean(xc);
    row.mean_matched_control = stats::mean(xmc);
    const double mean_matched_treated = stats::mean(xmt);
    const double sd = std::sqrt(0.5 * (stats::variance(xt) + stats::variance(xc)));
    const double before = row.mean_treated - row.mean_all_controls;
    const double after = mean_matched_treated - row.mean_matched_control;
    if (sd > 0.0) {
      row.std_diff_before = before / sd;
      row.std_diff_after = after / sd;
    } else {
      row.std_diff_before = before == 0.0 ? 0.0 : std::numeric_limits<double>::quiet_NaN();
      row.std_diff_after = after == 0.0 ? 0.0 : std::numeric_limits<double>::quiet_NaN();
      row.degenerate = before != 0.0 || after != 0.0;
    }
    rep.rows.push_back(row);
  }
  return rep;
}

inline std::string format_balance_csv(const BalanceReport& r) {
  std::string out =
      "covariate,mean_treated,mean_matched_control,mean_all_controls,std_diff_before,std_diff_after,"
      "flag_before,flag_after,degenerate\n";
  for (const auto& row : r.rows) {
    out += row.covariate + "," + csv::format_exact(row.mean_treated) + "," +
           csv::format_exact(row.mean_matched_control) + "," + csv::format_exact(row.mean_all_controls) + "," +
           csv::format_exact(row.std_diff_before) + "," + csv::format_exact(row.std_diff_after) + "," +
           (r.flagged(row.std_diff_before) ? "1" : "0") + "," + (r.flagged(row.std_diff_after) ? "1" : "0") +
           "," + (row.degenerate ? "1" : "0") + "\n";
  }
  return out;
}

// Aligned text table: treated, matched control and all-control means, then
// standardized differences before and after matching. Entries whose absolute
// standardized difference exceeds the threshold carry a trailing '*'.
inline std::string format_balance_table(const BalanceReport& r) {
  auto fmt = [](double x, int prec) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(prec) << x;
    return s.str();
  };
  auto sd_cell = [&](double x) {
    if (std::isnan(x)) return std::string("degenerate");
    return fmt(x, 2) + (r.flagged(x) ? "*" : "");
  };
  std::size_t w = std::string("Covariate").size();
  for (const auto& row : r.rows) w = std::max(w, row.covariate.size());
  std::ostringstream out;
  out << std::left << std::setw(static_cast<int>(w)) << "Covariate" << std::right << std::setw(12) << "Treated"
      << std::setw(12) << "Matched" << std::setw(12) << "All" << std::setw(12) << "Before" << std::setw(12)
      << "After" << "\n";
  out << std::left << std::setw(static_cast<int>(w)) << "" << std::right << std::setw(12) << "" << std::setw(12)
      << "control" << std::setw(12) << "controls" << std::setw(12) << "matching" << std::setw(12) << "matching"
      << "\n";
  for (const auto& row : r.rows) {
    out << std::left << std::setw(static_cast<int>(w)) << row.covariate << std::right << std::setw(12)
        << fmt(row.mean_treated, 2) << std::setw(12) << fmt(row.mean_matched_control, 2) << std::setw(12)
        << fmt(row.mean_all_controls, 2) << std::setw(12) << sd_cell(row.std_diff_before) << std::setw(12)
        << sd_cell(row.std_diff_after) << "\n";
  }
  out << "* |standardized difference| > " << fmt(r.flag_threshold, 2) << "\n";
  return out.str();
}

}  // namespace obskit
