#pragma once

// Adaptive protocols: choosing an outcome or subgroups on a planning sample,
// and subgroup discovery from a regression tree grown on |treated - control|.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "obskit/csv.hpp"
#include "obskit/error.hpp"
#include "obskit/multiplicity.hpp"
#include "obskit/pairs.hpp"
#include "obskit/sensitivity.hpp"
#include "obskit/stats.hpp"

namespace obskit {

// ---------------------------------------------------------------------------
// Outcome selection

class MultiOutcomeSample {
 public:
  MultiOutcomeSample() = default;

  // outcomes[k][i] is the difference on outcome k for pair i.
  MultiOutcomeSample(std::vector<std::string> ids, std::vector<std::string> labels,
                     std::vector<std::vector<double>> outcomes)
      : ids_(std::move(ids)), labels_(std::move(labels)), y_(std::move(outcomes)) {
    if (labels_.empty()) throw ValidationError("need at least one outcome");
    if (labels_.size() != y_.size()) throw ValidationError("outcome labels and columns differ in count");
    if (ids_.empty()) throw ValidationError("need at least one pair");
    for (std::size_t k = 0; k < y_.size(); ++k) {
      if (y_[k].size() != ids_.size()) throw ValidationError("outcome '" + labels_[k] + "' has missing values");
      for (std::size_t i = 0; i < ids_.size(); ++i)
        if (!std::isfinite(y_[k][i]))
          throw ValidationError(csv::location(i + 1, labels_[k]) + " difference must be finite");
    }
  }

  std::size_t pairs() const noexcept { return ids_.size(); }
  std::size_t outcomes() const noexcept { return labels_.size(); }
  const std::vector<std::string>& ids() const noexcept { return ids_; }
  const std::vector<std::string>& labels() const noexcept { return labels_; }
  const std::vector<double>& outcome(std::size_t k) const { return y_.at(k); }

  PairSample pair_sample(std::size_t k, std::span<const std::size_t> rows) const {
    std::vector<std::string> ids;
    std::vector<double> d;
    for (auto r : rows) {
      ids.push_back(ids_.at(r));
      d.push_back(y_.at(k).at(r));
    }
    return PairSample(std::move(ids), std::move(d));
  }

 private:
  std::vector<std::string> ids_;
  std::vector<std::string> labels_;
  std::vector<std::vector<double>> y_;
};

// `pair_id,<outcome>...`; a leading "out_" on a label is dropped.
inline MultiOutcomeSample parse_outcomes(const csv::Table& t) {
  const int id_col = t.column("pair_id");
  if (id_col < 0) throw ValidationError(csv::location(0, "pair_id") + " missing column");
  if (t.rows.empty()) throw ValidationError("empty file: no pairs");
  std::vector<std::string> labels;
  std::vector<std::size_t> cols;
  for (std::size_t c = 0; c < t.header.size(); ++c) {
    if (static_cast<int>(c) == id_col) continue;
    std::string label = t.header[c];
    if (label.rfind("out_", 0) == 0) label = label.substr(4);
    labels.push_back(label);
    cols.push_back(c);
  }
  std::vector<std::string> ids;
  std::vector<std::vector<double>> y(labels.size());
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    ids.push_back(t.rows[r][static_cast<std::size_t>(id_col)]);
    for (std::size_t k = 0; k < cols.size(); ++k)
      y[k].push_back(csv::parse_double(t.rows[r][cols[k]], r + 1, t.header[cols[k]]));
  }
  return MultiOutcomeSample(std::move(ids), std::move(labels), std::move(y));
}

inline MultiOutcomeSample load_outcomes(const std::string& path) { return parse_outcomes(csv::read_file(path)); }

// (T - E0 T) / sd0 T for the signed-rank statistic with no hidden bias;
// empty when every difference is zero.
inline std::optional<double> standardized_signed_rank(std::span<const double> diffs) {
  std::size_t nonzero = 0;
  for (double d : diffs) nonzero += d != 0.0;
  if (nonzero == 0) return std::nullopt;
  const SignedRankSummary s = summarize(rank_diffs(diffs));
  return (s.statistic - 0.5 * s.rank_sum) / std::sqrt(0.25 * s.rank_sum_sq);
}

// Outcome indices by decreasing planning score; ties keep label order.
inline std::vector<std::size_t> rank_outcomes(std::span<const double> scores, std::span<const std::string> labels) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return labels[a] < labels[b];
  });
  return idx;
}

struct OutcomeSelection {
  SampleSplit split;
  std::vector<double> planning_scores;  // -inf for outcomes with all-zero planning diffs
  std::vector<std::size_t> chosen;      // best first
  std::vector<std::string> chosen_labels;
  std::vector<PairSample> analysis;     // one per chosen outcome
};

inline OutcomeSelection select_outcome_split(const MultiOutcomeSample& m, double fraction, std::uint64_t seed,
                                             std::size_t top_j = 1) {
  if (top_j < 1 || top_j > m.outcomes()) throw ValidationError("top_j must lie in [1, #outcomes]");
  OutcomeSelection sel;
  sel.split = split_indices(m.pairs(), fraction, seed);
  for (auto i : sel.split.planning) sel.split.planning_ids.push_back(m.ids()[i]);
  for (auto i : sel.split.analysis) sel.split.analysis_ids.push_back(m.ids()[i]);

  bool any = false;
  std::vector<double> buf;
  for (std::size_t k = 0; k < m.outcomes(); ++k) {
    buf.clear();
    for (auto i : sel.split.planning) buf.push_back(m.outcome(k)[i]);
    const auto z = standardized_signed_rank(buf);
    any = any || z.has_value();
    sel.planning_scores.push_back(z.value_or(-stats::kInf));
  }
  if (!any) throw ValidationError("degenerate planning sample: every outcome has all-zero differences");
  const auto order = rank_outcomes(sel.planning_scores, m.labels());
  for (std::size_t j = 0; j < top_j; ++j) {
    sel.chosen.push_back(order[j]);
    sel.chosen_labels.push_back(m.labels()[order[j]]);
    sel.analysis.push_back(m.pair_sample(order[j], sel.split.analysis));
  }
  return sel;
}

// ---------------------------------------------------------------------------
// Regression trees

struct TreeParams {
  std::size_t min_split = 20;
  std::size_t min_leaf = 7;
  int max_depth = 5;
  double cp = 0.01;
};

struct TreeNode {
  int covariate = -1;  // -1 for a leaf
  double threshold = 0.0;
  int left = -1;       // covariate < threshold
  int right = -1;      // covariate >= threshold
  int depth = 0;
  std::size_t n = 0;
  double mean = 0.0;
  double sse = 0.0;
  std::vector<std::size_t> rows;  // members, for leaves

  bool is_leaf() const noexcept { return covariate < 0; }
  bool operator==(const TreeNode&) const = default;
};

class RegressionTree {
 public:
  std::vector<std::string> covariate_names;
  std::vector<std::string> pair_ids;
  std::vector<TreeNode> nodes;  // preorder; nodes[0] is the root
  TreeParams params;

  bool operator==(const RegressionTree& o) const {
    return covariate_names == o.covariate_names && pair_ids == o.pair_ids && nodes == o.nodes;
  }

  std::vector<int> leaves() const {
    std::vector<int> out;
    for (std::size_t i = 0; i < nodes.size(); ++i)
      if (nodes[i].is_leaf()) out.push_back(static_cast<int>(i));
    return out;
  }

  // Leaf reached by a covariate vector (ordered as covariate_names).
  int leaf_for(std::span<const double> x) const {
    int at = 0;
    while (!nodes[static_cast<std::size_t>(at)].is_leaf()) {
      const auto& nd = nodes[static_cast<std::size_t>(at)];
      at = x[static_cast<std::size_t>(nd.covariate)] < nd.threshold ? nd.left : nd.right;
    }
    return at;
  }

  // Root-to-leaf predicate, e.g. "age<9.5" or "age≥7.5 & age<18".
  std::string label(int leaf) const {
    std::vector<std::string> parts;
    int child = leaf;
    for (int at = parent_of(child); at >= 0; at = parent_of(child)) {
      const auto& nd = nodes[static_cast<std::size_t>(at)];
      const std::string& name = covariate_names[static_cast<std::size_t>(nd.covariate)];
      parts.push_back(name + (nd.left == child ? "<" : "≥") + csv::format_exact(nd.threshold));
      child = at;
    }
    if (parts.empty()) return "all";
    std::string out;
    for (auto it = parts.rbegin(); it != parts.rend(); ++it) {
      if (!out.empty()) out += " & ";
      out += *it;
    }
    return out;
  }

 private:
  int parent_of(int child) const {
    for (std::size_t i = 0; i < nodes.size(); ++i)
      if (nodes[i].left == child || nodes[i].right == child) return static_cast<int>(i);
    return -1;
  }
};

namespace detail {

struct SplitCandidate {
  int covariate = -1;
  double threshold = 0.0;
  double gain = 0.0;
};

inline SplitCandidate best_split(std::span<const std::size_t> rows, std::span<const double> y,
                                 const std::vector<std::vector<double>>& x, std::size_t min_leaf) {
  SplitCandidate best;
  const std::size_t n = rows.size();
  std::vector<std::size_t> order(rows.begin(), rows.end());
  for (std::size_t c = 0; c < x.size(); ++c) {
    const auto& col = x[c];
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return col[a] < col[b]; });
    double total = 0.0;
    for (auto r : order) total += y[r];
    double left_sum = 0.0;
    for (std::size_t k = 1; k < n; ++k) {
      left_sum += y[order[k - 1]];
      if (col[order[k - 1]] == col[order[k]]) continue;
      if (k < min_leaf || n - k < min_leaf) continue;
      const double nl = static_cast<double>(k);
      const double nr = static_cast<double>(n - k);
      const double diff = left_sum / nl - (total - left_sum) / nr;
      const double gain = nl * nr / static_cast<double>(n) * diff * diff;
      if (gain > best.gain) {
        best.covariate = static_cast<int>(c);
        best.threshold = 0.5 * (col[order[k - 1]] + col[order[k]]);
        best.gain = gain;
      }
    }
    order.assign(rows.begin(), rows.end());
  }
  return best;
}

inline void node_stats(TreeNode& nd, std::span<const std::size_t> rows, std::span<const double> y) {
  nd.n = rows.size();
  stats::CompensatedSum s;
  for (auto r : rows) s.add(y[r]);
  nd.mean = s.value() / static_cast<double>(rows.size());
  stats::CompensatedSum ss;
  for (auto r : rows) ss.add((y[r] - nd.mean) * (y[r] - nd.mean));
  nd.sse = ss.value();
}

inline void grow(RegressionTree& tree, std::vector<std::size_t> rows, std::span<const double> y,
                 const std::vector<std::vector<double>>& x, int depth, double root_sse) {
  const auto id = tree.nodes.size();
  tree.nodes.emplace_back();
  TreeNode nd;
  nd.depth = depth;
  node_stats(nd, rows, y);
  const auto& p = tree.params;
  SplitCandidate split;
  if (rows.size() >= p.min_split && depth < p.max_depth)
    split = best_split(rows, y, x, p.min_leaf);
  if (split.covariate < 0 || !(split.gain > 0.0) || split.gain < p.cp * root_sse) {
    nd.rows = std::move(rows);
    tree.nodes[id] = std::move(nd);
    return;
  }
  std::vector<std::size_t> left, right;
  const auto& col = x[static_cast<std::size_t>(split.covariate)];
  for (auto r : rows) (col[r] < split.threshold ? left : right).push_back(r);
  nd.covariate = split.covariate;
  nd.threshold = split.threshold;
  tree.nodes[id] = nd;
  const auto left_id = static_cast<int>(tree.nodes.size());
  grow(tree, std::move(left), y, x, depth + 1, root_sse);
  const auto right_id = static_cast<int>(tree.nodes.size());
  grow(tree, std::move(right), y, x, depth + 1, root_sse);
  tree.nodes[id].left = left_id;
  tree.nodes[id].right = right_id;
}

}  // namespace detail

// CART-style least-squares regression tree of `response` on the sample's
// covariates. A node is split when it has at least min_split members, lies
// above max_depth, both children keep min_leaf members, and the split lowers
// the within-node sum of squares by at least cp times the root's. Children
// hold covariate < threshold (left) and >= threshold (right), threshold the
// midpoint between adjacent distinct values. Ties between candidate splits go
// to the earlier covariate, then the smaller threshold.
inline RegressionTree fit_tree(const PairSample& s, std::span<const double> response, const TreeParams& params = {}) {
  if (s.covariate_names().empty()) throw ValidationError("regression tree needs at least one covariate");
  if (response.size() != s.size()) throw ValidationError("response length differs from sample size");
  if (params.min_leaf < 1) throw ValidationError("min_leaf must be >= 1");
  if (s.size() < 2 * params.min_leaf)
    throw ValidationError("need at least 2 * min_leaf = " + std::to_string(2 * params.min_leaf) + " pairs");
  RegressionTree tree;
  tree.covariate_names = s.covariate_names();
  tree.pair_ids = s.ids();
  tree.params = params;
  std::vector<std::vector<double>> x;
  for (std::size_t c = 0; c < s.covariate_names().size(); ++c) x.push_back(s.covariate(c));
  std::vector<std::size_t> rows(s.size());
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  TreeNode root;
  detail::node_stats(root, rows, response);
  detail::grow(tree, std::move(rows), response, x, 0, root.sse);
  return tree;
}

// Tree on the ranks of |diff|. Only absolute differences enter, so flipping
// the sign of any difference leaves the tree unchanged.
inline RegressionTree fit_abs_rank_tree(const PairSample& s, const TreeParams& params = {}) {
  std::vector<double> a(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) a[i] = std::abs(s.diffs()[i]);
  const auto ranks = stats::average_ranks(a);
  return fit_tree(s, ranks, params);
}

// Tree on the ranks of the signed differences (planning-sample use only).
inline RegressionTree fit_signed_rank_tree(const PairSample& s, const TreeParams& params = {}) {
  const auto ranks = stats::average_ranks(s.diffs());
  return fit_tree(s, ranks, params);
}

inline nlohmann::json to_json(const RegressionTree& t, int at = 0) {
  const auto& nd = t.nodes.at(static_cast<std::size_t>(at));
  nlohmann::json j;
  j["n"] = nd.n;
  j["mean"] = nd.mean;
  j["sse"] = nd.sse;
  if (nd.is_leaf()) {
    j["leaf"] = true;
    j["label"] = t.label(at);
    std::vector<std::string> ids;
    for (auto r : nd.rows) ids.push_back(t.pair_ids[r]);
    j["pair_ids"] = ids;
    return j;
  }
  j["leaf"] = false;
  j["covariate"] = t.covariate_names[static_cast<std::size_t>(nd.covariate)];
  j["threshold"] = nd.threshold;
  j["left"] = to_json(t, nd.left);
  j["right"] = to_json(t, nd.right);
  return j;
}

// ---------------------------------------------------------------------------
// Subgroups

enum class PartitionProvenance { kAPriori, kPlanningSplit, kCartAbsolute };

inline std::string_view to_string(PartitionProvenance p) {
  switch (p) {
    case PartitionProvenance::kAPriori: return "a-priori";
    case PartitionProvenance::kPlanningSplit: return "planning-split";
    case PartitionProvenance::kCartAbsolute: return "cart-absolute";
  }
  return "unknown";
}

struct SubgroupPartition {
  std::vector<std::string> pair_ids;
  std::vector<std::size_t> group_of;  // per pair, index into group_labels
  std::vector<std::string> group_labels;
  PartitionProvenance provenance = PartitionProvenance::kAPriori;
  std::vector<std::string> notes;

  std::size_t groups() const noexcept { return group_labels.size(); }

  std::vector<std::size_t> members(std::size_t g) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < group_of.size(); ++i)
      if (group_of[i] == g) out.push_back(i);
    return out;
  }
};

// Groups pairs by label, groups ordered by first appearance.
inline SubgroupPartition partition_by_labels(const PairSample& s, std::span<const std::string> labels,
                                             PartitionProvenance provenance = PartitionProvenance::kAPriori) {
  if (labels.size() != s.size()) throw ValidationError("one group label per pair is required");
  SubgroupPartition p;
  p.pair_ids = s.ids();
  p.provenance = provenance;
  std::map<std::string, std::size_t> index;
  for (const auto& l : labels) {
    auto [it, inserted] = index.try_emplace(l, p.group_labels.size());
    if (inserted) p.group_labels.push_back(l);
    p.group_of.push_back(it->second);
  }
  return p;
}

// One group per distinct value of a covariate.
inline SubgroupPartition partition_by_covariate(const PairSample& s, std::string_view name) {
  const int c = s.covariate_index(name);
  if (c < 0) throw ValidationError("unknown covariate '" + std::string(name) + "'");
  std::vector<std::string> labels;
  for (double v : s.covariate(static_cast<std::size_t>(c)))
    labels.push_back(std::string(name) + "=" + csv::format_exact(v));
  return partition_by_labels(s, labels);
}

// The fitted tree's leaves, over the pairs it was grown on.
inline SubgroupPartition subgroups_from_tree(const RegressionTree& t,
                                             PartitionProvenance provenance = PartitionProvenance::kCartAbsolute) {
  SubgroupPartition p;
  p.pair_ids = t.pair_ids;
  p.provenance = provenance;
  p.group_of.assign(t.pair_ids.size(), 0);
  for (int leaf : t.leaves()) {
    const std::size_t g = p.group_labels.size();
    p.group_labels.push_back(t.label(leaf));
    for (auto r : t.nodes[static_cast<std::size_t>(leaf)].rows) p.group_of[r] = g;
  }
  return p;
}

// Applies the tree's predicates verbatim to another sample (no refit). Leaves
// that receive no pairs are omitted and noted.
inline SubgroupPartition apply_tree(const RegressionTree& t, const PairSample& s,
                                    PartitionProvenance provenance = PartitionProvenance::kPlanningSplit) {
  std::vector<std::size_t> cols;
  for (const auto& name : t.covariate_names) {
    const int c = s.covariate_index(name);
    if (c < 0) throw ValidationError("sample lacks tree covariate '" + name + "'");
    cols.push_back(static_cast<std::size_t>(c));
  }
  std::vector<std::string> labels;
  std::vector<double> x(cols.size());
  std::map<int, std::size_t> hits;
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (std::size_t c = 0; c < cols.size(); ++c) x[c] = s.covariate(cols[c])[i];
    const int leaf = t.leaf_for(x);
    ++hits[leaf];
    labels.push_back(t.label(leaf));
  }
  SubgroupPartition p = partition_by_labels(s, labels, provenance);
  // order groups as the tree's leaves
  std::vector<std::string> ordered;
  for (int leaf : t.leaves()) {
    if (hits.contains(leaf)) {
      ordered.push_back(t.label(leaf));
    } else {
      p.notes.push_back("leaf '" + t.label(leaf) + "' has no pairs in this sample");
    }
  }
  std::map<std::string, std::size_t> pos;
  for (std::size_t g = 0; g < ordered.size(); ++g) pos[ordered[g]] = g;
  for (auto& g : p.group_of) g = pos.at(p.group_labels[g]);
  p.group_labels = ordered;
  return p;
}

inline std::string format_partition(const SubgroupPartition& p) {
  std::string out = "pair_id,group_label\n";
  for (std::size_t i = 0; i < p.pair_ids.size(); ++i) out += p.pair_ids[i] + "," + p.group_labels[p.group_of[i]] + "\n";
  return out;
}

struct GroupBound {
  std::string label;
  std::size_t n = 0;
  GammaBoundResult bound;
};

struct SubgroupTestResult {
  TruncatedProductResult combined;
  std::vector<GroupBound> groups;
};

// Per-group signed-rank Gamma bounds combined by the truncated product.
inline SubgroupTestResult subgroup_sensitivity_test(const PairSample& s, const SubgroupPartition& g, double gamma,
                                                    double tau = 0.2,
                                                    BoundMethod method = BoundMethod::kNormalApprox,
                                                    const TruncatedProductOptions& opt = {}) {
  if (g.group_of.size() != s.size()) throw ValidationError("partition does not match the sample");
  if (g.groups() == 0) throw ValidationError("partition has no groups");
  SubgroupTestResult r;
  std::vector<double> p;
  std::vector<double> buf;
  for (std::size_t k = 0; k < g.groups(); ++k) {
    buf.clear();
    for (std::size_t i = 0; i < s.size(); ++i)
      if (g.group_of[i] == k) buf.push_back(s.diffs()[i]);
    if (buf.empty()) throw ValidationError("empty group '" + g.group_labels[k] + "'");
    if (std::all_of(buf.begin(), buf.end(), [](double d) { return d == 0.0; }))
      throw ValidationError("group '" + g.group_labels[k] + "' has no nonzero differences");
    GroupBound gb{g.group_labels[k], buf.size(), wilcoxon_gamma_bound(buf, gamma, method)};
    p.push_back(gb.bound.p_upper);
    r.groups.push_back(std::move(gb));
  }
  r.combined = truncated_product(PValueSet(g.group_labels, p), tau, opt);
  return r;
}

struct SubgroupSplitResult {
  SampleSplit split;
  RegressionTree tree;          // grown on the planning sample
  PairSample analysis;
  SubgroupPartition partition;  // over the analysis sample
  std::vector<std::string> notes;
};

inline constexpr double kDefaultSubgroupPlanningFraction = 0.25;

// Grow a tree on planning-sample ranks of the signed differences and carry its
// leaves over to the analysis sample.
inline SubgroupSplitResult select_subgroups_split(const PairSample& s,
                                                  double fraction = kDefaultSubgroupPlanningFraction,
                                                  std::uint64_t seed = 0, const TreeParams& params = {}) {
  SubgroupSplitResult r;
  r.split = split_sample(s, fraction, seed);
  const PairSample planning = s.subset(r.split.planning);
  r.analysis = s.subset(r.split.analysis);
  r.tree = fit_signed_rank_tree(planning, params);
  r.partition = apply_tree(r.tree, r.analysis, PartitionProvenance::kPlanningSplit);
  if (r.tree.nodes.size() == 1) r.notes.push_back("planning tree did not split; single-group partition");
  for (const auto& n : r.partition.notes) r.notes.push_back(n);
  return r;
}

}  // namespace obskit
