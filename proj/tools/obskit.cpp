// obskit command-line front end. Every command prints one JSON document on
// stdout ({"manifest": ..., "result": ...}); diagnostics go to stderr.
// Exit codes: 0 ok, 2 validation error, 3 numeric failure.

#include <openssl/evp.h>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "obskit/adaptive.hpp"
#include "obskit/csv.hpp"
#include "obskit/error.hpp"
#include "obskit/matcher.hpp"
#include "obskit/multiplicity.hpp"
#include "obskit/pairs.hpp"
#include "obskit/sensitivity.hpp"
#include "obskit/simlab.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace obskit;

namespace {

struct Globals {
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> reps;
  std::optional<double> alpha;
  std::optional<double> gamma;
  std::string gamma_grid;
  std::optional<double> tau;
  std::optional<double> planning_frac;
  std::string out;
  unsigned threads = 0;
};

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string sha256_hex(const std::string& data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw Error("sha256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 0xF];
  }
  return out;
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::uint64_t parse_u64(const std::string& s, const char* what) {
  std::uint64_t v = 0;
  const auto* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc{} || p != end) throw ValidationError(std::string("bad ") + what + " '" + s + "'");
  return v;
}

double parse_real(std::string_view s, const char* what) {
  double v = 0.0;
  const auto t = csv::trim(s);
  auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc{} || p != t.data() + t.size() || !std::isfinite(v))
    throw ValidationError(std::string("bad ") + what + " '" + std::string(s) + "'");
  return v;
}

// "a:b:step", inclusive of b up to rounding.
std::vector<double> parse_grid(const std::string& spec, const char* what) {
  const auto c1 = spec.find(':');
  const auto c2 = c1 == std::string::npos ? std::string::npos : spec.find(':', c1 + 1);
  if (c2 == std::string::npos) throw ValidationError(std::string(what) + " must look like a:b:step");
  const double a = parse_real(spec.substr(0, c1), what);
  const double b = parse_real(spec.substr(c1 + 1, c2 - c1 - 1), what);
  const double step = parse_real(spec.substr(c2 + 1), what);
  if (!(step > 0.0) || b < a) throw ValidationError(std::string(what) + " needs a <= b and step > 0");
  const double count = std::floor((b - a) / step + 1e-9) + 1.0;
  if (count > 1e6) throw ValidationError(std::string(what) + " has too many points");
  std::vector<double> g;
  for (std::size_t i = 0; i < static_cast<std::size_t>(count); ++i) g.push_back(a + step * static_cast<double>(i));
  return g;
}

class Runner {
 public:
  Runner(std::string command, std::vector<std::string> argv, const Globals& g)
      : command_(std::move(command)), argv_(std::move(argv)), g_(g) {}

  std::string input(const std::string& path) {
    std::string text = read_text(path);
    inputs_.push_back({{"path", path}, {"sha256", sha256_hex(text)}});
    return text;
  }

  csv::Table table(const std::string& path) {
    std::istringstream in(input(path));
    return csv::parse(in, path);
  }

  std::uint64_t seed() {
    if (!seed_) {
      if (g_.seed) {
        seed_ = *g_.seed;
      } else if (const char* env = std::getenv("OBSKIT_SEED"); env && *env) {
        seed_ = parse_u64(env, "OBSKIT_SEED");
      } else {
        seed_ = 0;
      }
    }
    return *seed_;
  }

  std::vector<double> gammas(double fallback = 1.0) const {
    if (!g_.gamma_grid.empty()) {
      if (g_.gamma) throw ValidationError("give --gamma or --gamma-grid, not both");
      return parse_grid(g_.gamma_grid, "--gamma-grid");
    }
    return {g_.gamma.value_or(fallback)};
  }

  double alpha() const { return g_.alpha.value_or(0.05); }
  double tau() const { return g_.tau.value_or(0.2); }
  unsigned threads() const { return g_.threads; }

  // Writes an artifact under --out, if given.
  void artifact(const std::string& name, const std::string& text) {
    if (g_.out.empty()) return;
    fs::create_directories(g_.out);
    const auto path = fs::path(g_.out) / name;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot write " + path.string());
    out << text;
    outputs_.push_back(path.string());
  }

  void record_outputs(const std::vector<std::string>& paths) { outputs_.insert(outputs_.end(), paths.begin(), paths.end()); }

  const std::string& out_dir() const { return g_.out; }

  json manifest() const {
    json m;
    m["command"] = command_;
    m["argv"] = argv_;
    m["inputs"] = inputs_;
    m["outputs"] = outputs_;
    m["seed"] = seed_ ? json(*seed_) : json(nullptr);
    m["version"] = OBSKIT_VERSION;
    m["timestamp"] = utc_timestamp();
    return m;
  }

  void finish(const json& result) {
    const json m = manifest();
    if (!g_.out.empty()) {
      fs::create_directories(g_.out);
      std::ofstream(fs::path(g_.out) / "manifest.json") << m.dump(2) << "\n";
    }
    std::cout << json{{"manifest", m}, {"result", result}}.dump(2) << "\n";
  }

 private:
  std::string command_;
  std::vector<std::string> argv_;
  const Globals& g_;
  json inputs_ = json::array();
  std::vector<std::string> outputs_;
  std::optional<std::uint64_t> seed_;
};

json bound_json(const GammaBoundResult& r) {
  return {{"gamma", r.gamma},        {"statistic", r.statistic},     {"p_upper", r.p_upper},
          {"mu_bound", r.mu_bound},  {"sigma_bound", r.sigma_bound}, {"method", std::string(to_string(r.method))}};
}

std::string gamma_grid_csv(const std::vector<GammaBoundResult>& rs) {
  std::string out = "gamma,p_upper,method\n";
  for (const auto& r : rs)
    out += csv::format_exact(r.gamma) + "," + csv::format_exact(r.p_upper) + "," + std::string(to_string(r.method)) + "\n";
  return out;
}

void note(const std::string& msg) { std::cerr << "obskit: " << msg << "\n"; }

// p-values from repeated --p (value or label=value) and/or a CSV file with a
// `p` column (optional `label`), or a single unnamed column.
PValueSet collect_p_values(Runner& run, const std::vector<std::string>& inline_p, const std::string& file) {
  std::vector<std::string> labels;
  std::vector<double> ps;
  auto add = [&](std::string label, double p) {
    if (label.empty()) label = "p" + std::to_string(ps.size() + 1);
    labels.push_back(std::move(label));
    ps.push_back(p);
  };
  for (const auto& item : inline_p) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) {
      add("", parse_real(item, "p-value"));
    } else {
      add(std::string(csv::trim(std::string_view(item).substr(0, eq))), parse_real(item.substr(eq + 1), "p-value"));
    }
  }
  if (!file.empty()) {
    const csv::Table t = run.table(file);
    const int pc = t.column("p");
    const int lc = t.column("label");
    if (pc >= 0) {
      for (std::size_t r = 0; r < t.rows.size(); ++r)
        add(lc >= 0 ? t.rows[r][static_cast<std::size_t>(lc)] : "",
            csv::parse_double(t.rows[r][static_cast<std::size_t>(pc)], r + 1, "p"));
    } else if (t.header.size() == 1) {
      double v = 0.0;
      const auto& h = t.header[0];
      if (std::from_chars(h.data(), h.data() + h.size(), v).ec == std::errc{}) add("", parse_real(h, "p-value"));
      for (std::size_t r = 0; r < t.rows.size(); ++r) add("", csv::parse_double(t.rows[r][0], r + 1, t.header[0]));
    } else {
      throw ValidationError(file + ": expected a 'p' column or a single column of p-values");
    }
  }
  if (ps.empty()) throw ValidationError("no p-values given");
  return PValueSet(std::move(labels), std::move(ps));
}

json partition_json(const SubgroupPartition& p) {
  json groups = json::array();
  for (std::size_t g = 0; g < p.groups(); ++g) groups.push_back({{"label", p.group_labels[g]}, {"size", p.members(g).size()}});
  return {{"provenance", std::string(to_string(p.provenance))}, {"groups", groups}, {"notes", p.notes}};
}

json subgroup_test_json(const SubgroupTestResult& r, double alpha) {
  json groups = json::array();
  std::vector<std::string> labels;
  std::vector<double> ps;
  for (const auto& g : r.groups) {
    groups.push_back({{"label", g.label}, {"n", g.n}, {"bound", bound_json(g.bound)}});
    labels.push_back(g.label);
    ps.push_back(g.bound.p_upper);
  }
  json out = {{"groups", groups},
              {"combined",
               {{"method", "truncated-product"},
                {"tau", r.combined.tau},
                {"w", r.combined.w_statistic},
                {"combined_p", r.combined.combined_p},
                {"evaluation", std::string(to_string(r.combined.method))}}},
              {"alpha", alpha},
              {"global_rejected", r.combined.combined_p <= alpha}};
  if (r.combined.combined_p <= alpha && labels.size() >= 2) {
    const PValueSet set(labels, ps);
    out["followup_rejected"] = rejected_labels(set, subgroup_followup(set, alpha, labels.size()));
  }
  return out;
}

TreeParams tree_params(std::size_t min_split, std::size_t min_leaf, int max_depth, double cp) {
  TreeParams p;
  p.min_split = min_split;
  p.min_leaf = min_leaf;
  p.max_depth = max_depth;
  p.cp = cp;
  return p;
}

int fail(int code, const std::string& kind, const std::string& msg) {
  std::cerr << "obskit: error: " << msg << "\n";
  std::cerr << json{{"error", {{"kind", kind}, {"message", msg}, {"exit_code", code}}}}.dump() << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  Globals g;
  CLI::App app{"obskit: matched observational study toolkit"};
  app.set_version_flag("--version", std::string(OBSKIT_VERSION));
  app.require_subcommand(1);
  app.fallthrough();
  app.add_option("--seed", g.seed, "master seed (falls back to $OBSKIT_SEED, then 0)");
  app.add_option("--reps", g.reps, "Monte Carlo replicates");
  app.add_option("--alpha", g.alpha, "significance level");
  app.add_option("--gamma", g.gamma, "sensitivity parameter");
  app.add_option("--gamma-grid", g.gamma_grid, "Gamma grid a:b:step");
  app.add_option("--tau", g.tau, "truncation point");
  app.add_option("--planning-frac", g.planning_frac, "planning-sample fraction");
  app.add_option("--out", g.out, "artifact directory");
  app.add_option("--threads", g.threads, "worker threads (0 = all cores)");

  std::function<json(Runner&)> action;
  std::string command;
  auto bind = [&](CLI::App* sub, std::string name, std::function<json(Runner&)> fn) {
    sub->fallthrough();
    sub->callback([&, name, fn] {
      command = name;
      action = fn;
    });
  };

  // match
  std::string subjects_path, metric_name = "rank-mahalanobis";
  std::optional<double> caliper;
  auto* match = app.add_subcommand("match", "optimal pair matching");
  match->add_option("--subjects", subjects_path, "subject CSV (id,treated,cov_*)")->required();
  match->add_option("--metric", metric_name, "rank-mahalanobis | propensity");
  match->add_option("--caliper", caliper, "caliper on the propensity score");
  bind(match, "match", [&](Runner& run) {
    const SubjectTable t = parse_subjects(run.table(subjects_path));
    DistanceOptions opt;
    opt.metric = parse_distance_metric(metric_name);
    opt.caliper = caliper;
    PropensityModel model;
    json result;
    if (opt.metric == DistanceMetric::kPropensity || caliper) {
      model = fit_propensity(t);
      opt.propensity = &model;
      result["propensity"] = {{"coefficients", model.coefficients}, {"converged", model.converged},
                              {"iterations", model.iterations}};
      if (!model.converged) note("propensity fit did not converge; scores used as-is");
    }
    const DistanceMatrix d = distance_matrix(t, opt);
    const MatchResult m = optimal_pair_match(d);
    json pairs = json::array();
    for (const auto& p : m.pairs) pairs.push_back({{"treated_id", p.treated_id}, {"control_id", p.control_id}, {"distance", p.distance}});
    result["metric"] = std::string(to_string(opt.metric));
    result["pairs"] = pairs;
    result["total_distance"] = m.total_distance;
    result["unmatched_treated"] = m.unmatched_treated;
    result["warnings"] = m.warnings;
    result["notes"] = d.notes;
    for (const auto& w : m.warnings) note(w);
    run.artifact("matches.csv", format_matches(m));
    return result;
  });

  // balance
  std::string matches_path;
  double threshold = 0.2;
  bool table_text = false;
  auto* balance = app.add_subcommand("balance", "covariate balance before and after matching");
  balance->add_option("--subjects", subjects_path, "subject CSV")->required();
  balance->add_option("--matches", matches_path, "match CSV (treated_id,control_id,distance)")->required();
  balance->add_option("--threshold", threshold, "flag |std diff| above this");
  balance->add_flag("--table", table_text, "also print the aligned table on stderr");
  bind(balance, "balance", [&](Runner& run) {
    const SubjectTable t = parse_subjects(run.table(subjects_path));
    const MatchResult m = parse_matches(run.table(matches_path));
    const BalanceReport r = balance_report(t, m, threshold);
    json rows = json::array();
    auto num = [](double x) { return std::isnan(x) ? json(nullptr) : json(x); };
    for (const auto& row : r.rows) {
      rows.push_back({{"covariate", row.covariate},
                      {"mean_treated", row.mean_treated},
                      {"mean_matched_control", row.mean_matched_control},
                      {"mean_all_controls", row.mean_all_controls},
                      {"std_diff_before", num(row.std_diff_before)},
                      {"std_diff_after", num(row.std_diff_after)},
                      {"flag_before", r.flagged(row.std_diff_before)},
                      {"flag_after", r.flagged(row.std_diff_after)},
                      {"degenerate", row.degenerate}});
    }
    if (table_text) std::cerr << format_balance_table(r);
    run.artifact("balance.csv", format_balance_csv(r));
    run.artifact("balance.txt", format_balance_table(r));
    return json{{"flag_threshold", r.flag_threshold}, {"rows", rows}};
  });

  // sens
  auto* sens = app.add_subcommand("sens", "Gamma sensitivity bounds");
  sens->require_subcommand(1);
  sens->fallthrough();
  std::string pairs_path, bound_method = "auto";
  auto* wil = sens->add_subcommand("wilcoxon", "signed-rank upper p-value bound");
  wil->add_option("--pairs", pairs_path, "pair CSV (pair_id,diff,...)")->required();
  wil->add_option("--method", bound_method, "auto | normal | exact");
  bind(wil, "sens wilcoxon", [&](Runner& run) {
    const PairSample s = parse_pairs(run.table(pairs_path));
    const RankedPairs ranked = rank_pairs(s);
    BoundMethod method = BoundMethod::kNormalApprox;
    if (bound_method == "auto") {
      method = ranked.size() <= kMaxExactPairs ? BoundMethod::kExactConvolution : BoundMethod::kNormalApprox;
    } else {
      method = parse_bound_method(bound_method);
    }
    std::vector<GammaBoundResult> rs;
    json arr = json::array();
    for (double gm : run.gammas()) {
      rs.push_back(wilcoxon_gamma_bound(ranked, gm, method));
      arr.push_back(bound_json(rs.back()));
    }
    run.artifact("gamma_grid.csv", gamma_grid_csv(rs));
    json out = {{"n_pairs", s.size()}, {"dropped_zeros", ranked.dropped_zeros}};
    if (rs.size() == 1) {
      out.update(bound_json(rs[0]));
    } else {
      out["grid"] = arr;
    }
    return out;
  });
  long discordant = -1, treated_events = -1;
  auto* mcn = sens->add_subcommand("mcnemar", "McNemar exact binomial upper bound");
  mcn->add_option("--discordant", discordant, "discordant pairs D")->required();
  mcn->add_option("--treated-events", treated_events, "discordant pairs with the event in the treated unit")->required();
  std::string mcnemar_method = "exact";
  mcn->add_option("--method", mcnemar_method, "exact | normal (continuity-corrected)");
  bind(mcn, "sens mcnemar", [&](Runner& run) {
    std::vector<GammaBoundResult> rs;
    json arr = json::array();
    for (double gm : run.gammas()) {
      rs.push_back(mcnemar_gamma_bound(discordant, treated_events, gm,
                                       mcnemar_method == "exact" ? BoundMethod::kExactBinomial
                                                                 : parse_bound_method(mcnemar_method)));
      arr.push_back(bound_json(rs.back()));
    }
    run.artifact("gamma_grid.csv", gamma_grid_csv(rs));
    json out = {{"discordant", discordant}, {"treated_events", treated_events}};
    if (rs.size() == 1) {
      out.update(bound_json(rs[0]));
    } else {
      out["grid"] = arr;
    }
    return out;
  });

  // amplify
  std::optional<double> lambda, delta;
  std::string lambda_grid;
  auto* amp = app.add_subcommand("amplify", "(Lambda, Delta) amplification of Gamma");
  amp->add_option("--lambda", lambda, "confounder effect on treatment odds");
  amp->add_option("--delta", delta, "confounder effect on outcome odds");
  amp->add_option("--lambda-grid", lambda_grid, "with --gamma: lambda grid a:b:step for the curve");
  bind(amp, "amplify", [&](Runner& run) {
    if (lambda && delta) {
      const auto p = amplify(*lambda, *delta);
      return json{{"lambda", p.lambda}, {"delta", p.delta}, {"gamma", p.gamma}};
    }
    if (lambda_grid.empty()) throw ValidationError("give --lambda and --delta, or --gamma with --lambda-grid");
    const auto gs = run.gammas(0.0);
    if (gs.size() != 1) throw ValidationError("amplification curves take a single --gamma");
    const auto grid = parse_grid(lambda_grid, "--lambda-grid");
    const auto c = amplification_curve(gs[0], grid);
    std::string text = "lambda,delta,gamma\n";
    json pts = json::array();
    for (const auto& p : c.points) {
      text += csv::format_exact(p.lambda) + "," + csv::format_exact(p.delta) + "," + csv::format_exact(p.gamma) + "\n";
      pts.push_back({{"lambda", p.lambda}, {"delta", p.delta}, {"gamma", p.gamma}});
    }
    run.artifact("amplification.csv", text);
    return json{{"gamma", c.gamma}, {"points", pts}, {"notes", c.notes}};
  });

  // design-sens
  std::vector<double> effects;
  auto* ds = app.add_subcommand("design-sens", "design sensitivity of the signed-rank test, Normal errors");
  ds->add_option("--effect", effects, "effect size(s) in SD units")->required();
  bind(ds, "design-sens", [&](Runner&) {
    json arr = json::array();
    for (double e : effects) {
      const auto d = design_sensitivity_normal(e);
      arr.push_back({{"effect_size", d.effect_size}, {"gamma_tilde", d.gamma_tilde}});
    }
    return arr.size() == 1 ? arr[0] : json{{"points", arr}};
  });

  // power
  std::size_t n_pairs = 0;
  double effect = 0.0;
  std::string power_method = "normal";
  auto* pw = app.add_subcommand("power", "Monte Carlo power of the sensitivity analysis");
  pw->add_option("--n", n_pairs, "number of pairs")->required();
  pw->add_option("--effect", effect, "effect size (mean of Normal(effect,1) differences)")->required();
  pw->add_option("--method", power_method, "normal | exact");
  bind(pw, "power", [&](Runner& run) {
    const std::size_t reps = g.reps.value_or(2000);
    const auto method = parse_bound_method(power_method);
    json arr = json::array();
    for (double gm : run.gammas()) {
      const auto e = power_of_sensitivity(n_pairs, effect, gm, run.alpha(), reps, run.seed(), run.threads(), method);
      arr.push_back({{"n_pairs", e.n_pairs}, {"effect_size", e.effect_size}, {"gamma", e.gamma}, {"alpha", e.alpha},
                     {"reps", e.reps}, {"power", e.power}, {"se", e.mc_standard_error},
                     {"method", std::string(to_string(e.method))}});
    }
    return arr.size() == 1 ? arr[0] : json{{"grid", arr}};
  });

  // combine
  auto* comb = app.add_subcommand("combine", "combine or adjust p-values");
  comb->require_subcommand(1);
  comb->fallthrough();
  std::vector<std::string> inline_p;
  std::string p_file, combine_method = "auto";
  std::size_t mc_draws = 100000;
  auto add_p_options = [&](CLI::App* sub) {
    sub->add_option("--p", inline_p, "p-value, or label=value (repeatable)");
    sub->add_option("--p-file", p_file, "CSV with a p column (optional label) or one column of p-values");
  };
  auto* trunc = comb->add_subcommand("truncated", "truncated product test");
  add_p_options(trunc);
  trunc->add_option("--method", combine_method, "auto | analytic | monte-carlo");
  trunc->add_option("--mc-draws", mc_draws, "Monte Carlo draws");
  bind(trunc, "combine truncated", [&](Runner& run) {
    const PValueSet ps = collect_p_values(run, inline_p, p_file);
    TruncatedProductOptions opt;
    opt.method = parse_combine_method(combine_method);
    opt.mc_draws = mc_draws;
    opt.threads = run.threads();
    if (opt.method != CombineMethod::kAnalytic) opt.seed = run.seed();
    const auto r = truncated_product(ps, run.tau(), opt);
    json out = {{"method", "truncated-product"}, {"tau", r.tau}, {"w", r.w_statistic}, {"combined_p", r.combined_p},
                {"evaluation", std::string(to_string(r.method))}, {"k", ps.size()}};
    if (r.method == CombineMethod::kMonteCarlo) out["mc_standard_error"] = r.mc_standard_error;
    return out;
  });
  auto add_adjust = [&](const char* name, const char* help, Rejections (*fn)(const PValueSet&, double)) {
    auto* sub = comb->add_subcommand(name, help);
    add_p_options(sub);
    bind(sub, std::string("combine ") + name, [&, name, fn](Runner& run) {
      const PValueSet ps = collect_p_values(run, inline_p, p_file);
      const Rejections r = fn(ps, run.alpha());
      json items = json::array();
      for (std::size_t i = 0; i < ps.size(); ++i) items.push_back({{"label", ps.labels()[i]}, {"p", ps.values()[i]}, {"rejected", static_cast<bool>(r[i])}});
      return json{{"method", name}, {"alpha", run.alpha()}, {"tests", items}, {"rejected", rejected_labels(ps, r)}};
    });
  };
  add_adjust("bonferroni", "Bonferroni familywise control", &bonferroni);
  add_adjust("holm", "Holm step-down familywise control", &holm);
  add_adjust("bh", "Benjamini-Hochberg false discovery rate control", &benjamini_hochberg);

  // order-test
  std::vector<std::string> nodes;
  auto* ot = app.add_subcommand("order-test", "testing in order over a sequentially exclusive partition");
  add_p_options(ot);
  ot->add_option("--node", nodes, "comma-separated hypothesis labels of one node, in testing order (repeatable)");
  bind(ot, "order-test", [&](Runner& run) {
    const PValueSet ps = collect_p_values(run, inline_p, p_file);
    OrderedTestPlan plan;
    plan.alpha = run.alpha();
    if (nodes.empty()) {
      for (const auto& l : ps.labels()) plan.nodes.push_back({l});
    } else {
      for (const auto& spec : nodes) {
        std::vector<std::string> members;
        for (auto& f : csv::split_line(spec)) members.push_back(std::string(csv::trim(f)));
        plan.nodes.push_back(members);
      }
    }
    const auto decisions = testing_in_order(plan, ps);
    json arr = json::array();
    for (const auto& d : decisions) {
      json members = json::array();
      for (std::size_t i = 0; i < d.labels.size(); ++i)
        members.push_back({{"label", d.labels[i]}, {"status", std::string(to_string(d.members[i]))}});
      arr.push_back({{"status", std::string(to_string(d.status))}, {"members", members}});
    }
    return json{{"alpha", plan.alpha}, {"nodes", arr}};
  });

  // split-select
  auto* ss = app.add_subcommand("split-select", "sample splitting: plan on one part, test on the other");
  ss->require_subcommand(1);
  ss->fallthrough();
  std::string outcomes_path;
  std::size_t top_j = 1;
  auto* sso = ss->add_subcommand("outcome", "choose outcome(s) on the planning sample");
  sso->add_option("--outcomes", outcomes_path, "CSV pair_id,<outcome diff columns>")->required();
  sso->add_option("--top", top_j, "number of outcomes to carry forward");
  bind(sso, "split-select outcome", [&](Runner& run) {
    const MultiOutcomeSample m = parse_outcomes(run.table(outcomes_path));
    const double frac = g.planning_frac.value_or(1.0 / 3.0);
    const auto sel = select_outcome_split(m, frac, run.seed(), top_j);
    json scores = json::object();
    for (std::size_t k = 0; k < m.outcomes(); ++k)
      scores[m.labels()[k]] = std::isfinite(sel.planning_scores[k]) ? json(sel.planning_scores[k]) : json(nullptr);
    json chosen = json::array();
    std::vector<double> ps;
    const auto gs = run.gammas();
    if (gs.size() != 1) throw ValidationError("split-select takes one --gamma");
    const double gm = gs[0];
    for (std::size_t j = 0; j < sel.chosen.size(); ++j) {
      const auto b = wilcoxon_gamma_bound(sel.analysis[j].diffs(), gm);
      ps.push_back(b.p_upper);
      chosen.push_back({{"label", sel.chosen_labels[j]}, {"analysis_bound", bound_json(b)}});
    }
    json out = {{"planning_fraction", frac}, {"seed", run.seed()}, {"planning_size", sel.split.planning.size()},
                {"analysis_size", sel.split.analysis.size()}, {"planning_scores", scores}, {"chosen", chosen}};
    if (ps.size() > 1) out["holm_rejected"] = rejected_labels(PValueSet(sel.chosen_labels, ps), holm(PValueSet(sel.chosen_labels, ps), run.alpha()));
    std::string split_csv = "pair_id,sample\n";
    for (const auto& id : sel.split.planning_ids) split_csv += id + ",planning\n";
    for (const auto& id : sel.split.analysis_ids) split_csv += id + ",analysis\n";
    run.artifact("split.csv", split_csv);
    return out;
  });
  std::size_t min_split = 20, min_leaf = 7;
  int max_depth = 5;
  double cp = 0.01;
  auto add_tree_options = [&](CLI::App* sub) {
    sub->add_option("--pairs", pairs_path, "pair CSV with cov_* columns")->required();
    sub->add_option("--min-split", min_split, "smallest node that may split");
    sub->add_option("--min-leaf", min_leaf, "smallest leaf");
    sub->add_option("--max-depth", max_depth, "maximum depth");
    sub->add_option("--cp", cp, "complexity: minimum relative SSE gain");
  };
  auto* ssg = ss->add_subcommand("subgroups", "grow a subgroup tree on the planning sample, test on the analysis sample");
  add_tree_options(ssg);
  bind(ssg, "split-select subgroups", [&](Runner& run) {
    const PairSample s = parse_pairs(run.table(pairs_path));
    const double frac = g.planning_frac.value_or(kDefaultSubgroupPlanningFraction);
    const auto r = select_subgroups_split(s, frac, run.seed(), tree_params(min_split, min_leaf, max_depth, cp));
    const auto gs = run.gammas();
    if (gs.size() != 1) throw ValidationError("split-select takes one --gamma");
    const auto test = subgroup_sensitivity_test(r.analysis, r.partition, gs[0], run.tau());
    run.artifact("tree.json", to_json(r.tree).dump(2) + "\n");
    run.artifact("partition.csv", format_partition(r.partition));
    for (const auto& n : r.notes) note(n);
    return json{{"planning_fraction", frac}, {"seed", run.seed()}, {"planning_size", r.split.planning.size()},
                {"analysis_size", r.split.analysis.size()}, {"tree", to_json(r.tree)},
                {"partition", partition_json(r.partition)}, {"test", subgroup_test_json(test, run.alpha())},
                {"gamma", gs[0]}, {"notes", r.notes}};
  });

  // tree-subgroups
  auto* ts = app.add_subcommand("tree-subgroups", "CART on |differences|, then a truncated-product sensitivity test");
  add_tree_options(ts);
  bind(ts, "tree-subgroups", [&](Runner& run) {
    const PairSample s = parse_pairs(run.table(pairs_path));
    const auto tree = fit_abs_rank_tree(s, tree_params(min_split, min_leaf, max_depth, cp));
    const auto part = subgroups_from_tree(tree);
    const auto gs = run.gammas();
    if (gs.size() != 1) throw ValidationError("tree-subgroups takes one --gamma");
    const auto test = subgroup_sensitivity_test(s, part, gs[0], run.tau());
    run.artifact("tree.json", to_json(tree).dump(2) + "\n");
    run.artifact("partition.csv", format_partition(part));
    return json{{"tree", to_json(tree)}, {"partition", partition_json(part)}, {"test", subgroup_test_json(test, run.alpha())},
                {"gamma", gs[0]}};
  });

  // simulate
  std::string scenario, spec_path;
  std::vector<std::string> sets;
  bool svg_plot = false;
  auto* simulate = app.add_subcommand("simulate", "run a Monte Carlo scenario");
  simulate->add_option("scenario", scenario, "multi-outcome-rct | multi-outcome-gamma | power-vs-gamma | pvalue-histogram | "
                                        "subgroup-hetero | iv-adjustment (or iv)")
      ->required();
  simulate->add_option("--spec", spec_path, "JSON or key = value spec file");
  simulate->add_option("--set", sets, "override one spec key, key=value (repeatable)");
  simulate->add_flag("--svg", svg_plot, "also write plot.svg");
  bind(simulate, "simulate", [&](Runner& run) {
    json j = spec_path.empty() ? json::object() : sim::parse_spec_text(run.input(spec_path));
    for (const auto& s : sets) {
      const json one = sim::parse_spec_text(s);
      j.merge_patch(one);
    }
    if (j.contains("kind") && sim::parse_scenario_kind(j["kind"].get<std::string>()) != sim::parse_scenario_kind(scenario))
      throw ValidationError("spec kind '" + j["kind"].get<std::string>() + "' does not match scenario '" + scenario + "'");
    j["kind"] = std::string(sim::to_string(sim::parse_scenario_kind(scenario)));
    sim::ScenarioSpec spec = sim::spec_from_json(j);
    // --seed / $OBSKIT_SEED override a seed in the spec
    if (g.seed || std::getenv("OBSKIT_SEED") || !j.contains("seed")) spec.seed = run.seed();
    if (g.reps) spec.reps = *g.reps;
    if (g.alpha) spec.alpha = *g.alpha;
    if (g.gamma) spec.gamma = *g.gamma;
    if (!g.gamma_grid.empty()) spec.gamma_grid = parse_grid(g.gamma_grid, "--gamma-grid");
    if (g.tau) spec.tau = *g.tau;
    if (g.planning_frac) spec.planning_fraction = *g.planning_frac;
    const auto result = sim::run(spec, run.threads());
    if (!run.out_dir().empty()) run.record_outputs(sim::write_outputs(result, run.out_dir(), svg_plot));
    return sim::result_json(result);
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail(2, "usage", e.what());
  }

  try {
    Runner run(command, std::vector<std::string>(args.begin() + 1, args.end()), g);
    json result = action(run);
    run.finish(result);
    return 0;
  } catch (const NumericError& e) {
    return fail(3, "numeric", e.what());
  } catch (const ValidationError& e) {
    return fail(2, "validation", e.what());
  } catch (const Error& e) {
    return fail(2, "validation", e.what());
  } catch (const std::exception& e) {
    return fail(3, "internal", e.what());
  }
}
