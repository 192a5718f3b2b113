#pragma once

// Matched-pair data model: treated-minus-control differences with pair-level
// covariates, signed-rank inputs, and planning/analysis sample splits.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "obskit/csv.hpp"
#include "obskit/error.hpp"
#include "obskit/random.hpp"
#include "obskit/stats.hpp"

namespace obskit {

class PairSample {
 public:
  PairSample() = default;

  // covariates[c][i] is covariate c of pair i.
  PairSample(std::vector<std::string> ids, std::vector<double> diffs,
             std::vector<std::string> covariate_names = {},
             std::vector<std::vector<double>> covariates = {})
      : ids_(std::move(ids)),
        diffs_(std::move(diffs)),
        covariate_names_(std::move(covariate_names)),
        covariates_(std::move(covariates)) {
    validate();
  }

  // Convenience for simulations: ids are "0", "1", ...
  static PairSample from_diffs(std::vector<double> diffs,
                               std::vector<std::string> covariate_names = {},
                               std::vector<std::vector<double>> covariates = {}) {
    std::vector<std::string> ids(diffs.size());
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = std::to_string(i);
    return PairSample(std::move(ids), std::move(diffs), std::move(covariate_names),
                      std::move(covariates));
  }

  std::size_t size() const noexcept { return diffs_.size(); }
  const std::vector<std::string>& ids() const noexcept { return ids_; }
  const std::vector<double>& diffs() const noexcept { return diffs_; }
  const std::vector<std::string>& covariate_names() const noexcept { return covariate_names_; }
  const std::vector<double>& covariate(std::size_t c) const { return covariates_.at(c); }

  int covariate_index(std::string_view name) const {
    for (std::size_t c = 0; c < covariate_names_.size(); ++c)
      if (covariate_names_[c] == name) return static_cast<int>(c);
    return -1;
  }

  PairSample subset(std::span<const std::size_t> rows) const {
    std::vector<std::string> ids;
    std::vector<double> diffs;
    std::vector<std::vector<double>> cov(covariates_.size());
    ids.reserve(rows.size());
    diffs.reserve(rows.size());
    for (auto r : rows) {
      ids.push_back(ids_.at(r));
      diffs.push_back(diffs_.at(r));
      for (std::size_t c = 0; c < covariates_.size(); ++c) cov[c].push_back(covariates_[c][r]);
    }
    return PairSample(std::move(ids), std::move(diffs), covariate_names_, std::move(cov));
  }

  // Same pairs and covariates, new differences.
  PairSample with_diffs(std::vector<double> diffs) const {
    return PairSample(ids_, std::move(diffs), covariate_names_, covariates_);
  }

 private:
  void validate() const {
    if (diffs_.empty()) throw ValidationError("pair sample must contain at least one pair");
    if (ids_.size() != diffs_.size()) throw ValidationError("pair ids and diffs differ in length");
    if (covariates_.size() != covariate_names_.size())
      throw ValidationError("covariate names and columns differ in count");
    std::unordered_set<std::string> seen;
    for (std::size_t i = 0; i < ids_.size(); ++i) {
      if (!seen.insert(ids_[i]).second)
        throw ValidationError(csv::location(i + 1, "pair_id") + " duplicate pair_id '" + ids_[i] + "'");
      if (!std::isfinite(diffs_[i]))
        throw ValidationError(csv::location(i + 1, "diff") + " diff must be finite");
    }
    for (std::size_t c = 0; c < covariates_.size(); ++c) {
      if (covariates_[c].size() != diffs_.size())
        throw ValidationError("covariate '" + covariate_names_[c] + "' is missing values");
      for (std::size_t i = 0; i < diffs_.size(); ++i)
        if (!std::isfinite(covariates_[c][i]))
          throw ValidationError(csv::location(i + 1, "cov_" + covariate_names_[c]) +
                                " covariate must be finite");
    }
  }

  std::vector<std::string> ids_;
  std::vector<double> diffs_;
  std::vector<std::string> covariate_names_;
  std::vector<std::vector<double>> covariates_;
};

// Parses `pair_id,diff[,cov_<name>...]`. Columns other than these are ignored.
inline PairSample parse_pairs(const csv::Table& t) {
  const int id_col = t.column("pair_id");
  const int diff_col = t.column("diff");
  if (id_col < 0) throw ValidationError(csv::location(0, "pair_id") + " missing column");
  if (diff_col < 0) throw ValidationError(csv::location(0, "diff") + " missing column");
  if (t.rows.empty()) throw ValidationError("empty file: no pairs");

  std::vector<std::string> names;
  std::vector<int> cov_cols;
  for (std::size_t c = 0; c < t.header.size(); ++c) {
    if (t.header[c].rfind("cov_", 0) == 0) {
      names.push_back(t.header[c].substr(4));
      cov_cols.push_back(static_cast<int>(c));
    }
  }
  std::vector<std::string> ids;
  std::vector<double> diffs;
  std::vector<std::vector<double>> cov(names.size());
  std::unordered_set<std::string> seen;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    const std::size_t rownum = r + 1;
    const std::string& id = row[static_cast<std::size_t>(id_col)];
    if (id.empty()) throw ValidationError(csv::location(rownum, "pair_id") + " empty pair_id");
    if (!seen.insert(id).second)
      throw ValidationError(csv::location(rownum, "pair_id") + " duplicate pair_id '" + id + "'");
    ids.push_back(id);
    diffs.push_back(csv::parse_double(row[static_cast<std::size_t>(diff_col)], rownum, "diff"));
    for (std::size_t c = 0; c < names.size(); ++c) {
      const auto& cell = row[static_cast<std::size_t>(cov_cols[c])];
      if (cell.empty() || cell == "NA")
        throw ValidationError(csv::location(rownum, t.header[static_cast<std::size_t>(cov_cols[c])]) +
                              " missing covariate value");
      cov[c].push_back(csv::parse_double(cell, rownum, t.header[static_cast<std::size_t>(cov_cols[c])]));
    }
  }
  return PairSample(std::move(ids), std::move(diffs), std::move(names), std::move(cov));
}

inline PairSample load_pairs(const std::string& path) { return parse_pairs(csv::read_file(path)); }

inline std::string format_pairs(const PairSample& s) {
  std::string out = "pair_id,diff";
  for (const auto& n : s.covariate_names()) out += ",cov_" + n;
  out += '\n';
  for (std::size_t i = 0; i < s.size(); ++i) {
    out += s.ids()[i];
    out += ',';
    out += csv::format_exact(s.diffs()[i]);
    for (std::size_t c = 0; c < s.covariate_names().size(); ++c) {
      out += ',';
      out += csv::format_exact(s.covariate(c)[i]);
    }
    out += '\n';
  }
  return out;
}

inline void save_pairs(const PairSample& s, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write " + path);
  out << format_pairs(s);
}

// Inputs to signed-rank statistics. Zero differences are dropped; the
// remaining |diff| are ranked with average ranks for ties.
struct RankedPairs {
  std::vector<std::size_t> index;  // position of each nonzero pair in the source
  std::vector<double> abs_ranks;
  std::vector<int> signs;          // +1 or -1
  std::size_t dropped_zeros = 0;

  std::size_t size() const noexcept { return abs_ranks.size(); }
};

inline RankedPairs rank_diffs(std::span<const double> diffs) {
  RankedPairs r;
  std::vector<double> abs_vals;
  abs_vals.reserve(diffs.size());
  for (std::size_t i = 0; i < diffs.size(); ++i) {
    if (diffs[i] == 0.0) {
      ++r.dropped_zeros;
      continue;
    }
    r.index.push_back(i);
    abs_vals.push_back(std::abs(diffs[i]));
    r.signs.push_back(diffs[i] > 0 ? 1 : -1);
  }
  if (abs_vals.empty()) throw ValidationError("degenerate sample: all differences are zero");
  r.abs_ranks = stats::average_ranks(abs_vals);
  return r;
}

inline RankedPairs rank_pairs(const PairSample& s) { return rank_diffs(s.diffs()); }

struct SampleSplit {
  std::vector<std::size_t> planning;  // row positions, ascending
  std::vector<std::size_t> analysis;  // row positions, ascending
  std::vector<std::string> planning_ids;
  std::vector<std::string> analysis_ids;
  double fraction = 0.0;
  std::uint64_t seed = 0;
};

inline constexpr std::uint64_t kSplitStreamTag = 0x53504C4954ull;  // "SPLIT"

inline std::size_t planning_size(std::size_t n, double fraction) {
  if (!(fraction > 0.0 && fraction < 1.0))
    throw ValidationError("split fraction must lie in (0, 1)");
  const auto k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  if (k < 1 || k >= n)
    throw ValidationError("sample of " + std::to_string(n) + " pairs is too small to split at fraction " +
                          csv::format_sig6(fraction));
  return k;
}

// Uniform random subset of size round(fraction * n) drawn with a partial
// Fisher-Yates shuffle from the given stream.
inline std::vector<std::size_t> choose_planning(std::size_t n, double fraction, Stream& rng) {
  const std::size_t k = planning_size(n, fraction);
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.below(n - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

inline std::vector<std::size_t> complement(std::size_t n, std::span<const std::size_t> sorted_subset) {
  std::vector<std::size_t> out;
  out.reserve(n - sorted_subset.size());
  std::size_t j = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (j < sorted_subset.size() && sorted_subset[j] == i) {
      ++j;
    } else {
      out.push_back(i);
    }
  }
  return out;
}

inline SampleSplit split_indices(std::size_t n, double fraction, std::uint64_t seed) {
  Stream rng(seed, stream_id({kSplitStreamTag}));
  SampleSplit s;
  s.planning = choose_planning(n, fraction, rng);
  s.analysis = complement(n, s.planning);
  s.fraction = fraction;
  s.seed = seed;
  return s;
}

inline SampleSplit split_sample(const PairSample& sample, double fraction, std::uint64_t seed) {
  SampleSplit s = split_indices(sample.size(), fraction, seed);
  for (auto i : s.planning) s.planning_ids.push_back(sample.ids()[i]);
  for (auto i : s.analysis) s.analysis_ids.push_back(sample.ids()[i]);
  return s;
}

}  // namespace obskit
