// Acceptance harness: one PASS/FAIL line per criterion.
//   acceptance                 run every criterion
//   acceptance --criterion N   run one

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "treemerge/treemerge.hpp"

using namespace treemerge;

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// Telemetry of every reconstruction in criteria 1-3, for criterion 4.
struct WorkRecord {
  std::size_t n;
  Telemetry t;
};

std::vector<WorkRecord>& work_log() {
  static std::vector<WorkRecord> log;
  return log;
}

ReconstructionParams oracle_params(double eps, std::size_t n) { return ReconstructionParams::make(eps, 2, 0.0, 0.1, 1, n); }

struct OracleRun {
  Forest forest;
  ForestScore score;
  Telemetry telemetry;
};

OracleRun reconstruct_oracle(const Tree& truth, double eps) {
  const auto labels = truth.taxa();
  auto ev = AdditiveOracleEvidence::from_labels(truth, labels);
  TreeMerge<AdditiveOracleEvidence> tm(ev, oracle_params(eps, labels.size()), labels);
  OracleRun r;
  r.forest = tm.run();
  r.telemetry = tm.telemetry();
  r.score = score_forest(r.forest, truth, eps);
  work_log().push_back({labels.size(), r.telemetry});
  return r;
}

// ---------------------------------------------------------------------------
// 1. Exact-distance full recovery.

Verdict criterion1() {
  const double eps = 0.004;
  const double lo = 6 * eps, hi = kLambda0 - 3 * eps;
  const auto t0 = Clock::now();
  int ok = 0, total = 0;
  double worst = 0.0;
  for (std::size_t n : {8u, 16u, 32u})
    for (std::uint64_t s = 0; s < 50; ++s) {
      const Tree truth = random_binary_tree(n, lo, hi, derive_key(101, {n, s}));
      const auto r = reconstruct_oracle(truth, eps);
      ++total;
      worst = std::max(worst, r.score.max_length_error);
      ok += r.score.full_recovery && r.score.max_length_error < 1e-9;
    }
  const double secs = since(t0);
  return {ok == total && secs < 10.0,
          fmt("%d/%d exact recoveries (50 trees per n in {8,16,32}), max edge error %.2e, %.2f s", ok, total, worst,
              secs)};
}

// ---------------------------------------------------------------------------
// 2. Statistical full recovery at calibrated parameters.

struct CalibratedNeed {
  double epsilon = 0, N = kInfinity;
  int d = 0;
  double beta = 0;
};

/// Smallest N over the epsilon grid for which calibrate() would succeed.
CalibratedNeed minimal_calibrated_sites(std::size_t n, double xi) {
  CalibratedNeed best;
  for (double eps : epsilon_grid()) {
    const double lm = kLambda0 - eps;
    const auto d = default_depth(lm);
    if (!d) continue;
    try {
      const auto bc = calibrate_beta(lm, *d);
      const auto p = ReconstructionParams::make(eps, *d, bc.beta, xi, 1, n);
      const double N = minimal_sites(p.M, eps, xi, n);
      if (N < best.N) best = {eps, N, *d, bc.beta};
    } catch (const InfeasibleDepth&) {
    }
  }
  return best;
}

struct Companion {
  int ok = 0, trials = 0;
  double secs = 0;
};

/// Same protocol at a practical (epsilon, d, beta) and N.
Companion companion_run() {
  static std::optional<Companion> cached;
  if (cached) return *cached;
  const auto t0 = Clock::now();
  Companion c;
  const double eps = 0.01;
  auto make = [&](std::size_t t) {
    TrialSpec s;
    s.taxa = 32;
    s.sites = 60000;
    s.edge_min = 6 * eps;
    s.edge_max = kLambda0 - 3 * eps;
    s.epsilon = eps;
    s.d = 3;
    s.beta = 0.0;
    s.xi = 0.2;
    s.seed = derive_key(202, {t});
    return s;
  };
  const auto res = run_trials(100, make, 1);
  for (const auto& r : res) {
    ++c.trials;
    if (!r.error) {
      c.ok += r.score.full_recovery;
      work_log().push_back({32, r.telemetry});
    }
  }
  c.secs = since(t0);
  cached = c;
  return c;
}

Verdict criterion2() {
  const std::size_t n = 32;
  const double xi = 0.2;
  const auto need = minimal_calibrated_sites(n, xi);
  // The largest N this harness can simulate (bits per taxon held in memory).
  const double capacity = 1e9;
  const auto comp = companion_run();
  const double rate = static_cast<double>(comp.ok) / comp.trials;
  const double target = 1.0 - xi - 0.1;
  std::string detail =
      fmt("calibrate needs N >= %.3g (epsilon=%.4g, d=%d, beta=%.4g), beyond %.0e sites; not run. "
          "Practical companion (epsilon=0.01, d=3, beta=0, N=6e4): %d/%d = %.2f vs target %.2f in %.1f s",
          need.N, need.epsilon, need.d, need.beta, capacity, comp.ok, comp.trials, rate, target, comp.secs);
  return {need.N <= capacity && rate >= target && comp.secs < 600, detail};
}

// ---------------------------------------------------------------------------
// 3. Forest soundness with planted long and short edges.

Verdict criterion3() {
  const double eps = 0.004;
  const std::size_t n = 24;
  int good = 0;
  std::size_t min_comps = 1000;
  std::string first_bad;
  for (std::uint64_t s = 0; s < 50; ++s) {
    Tree truth = random_binary_tree(n, 6 * eps, kLambda0 - 3 * eps, derive_key(303, {s}));
    std::vector<EdgeId> internal;
    for (EdgeId e = 0; e < static_cast<EdgeId>(truth.edge_count()); ++e)
      if (!truth.is_leaf(truth.edge(e).a) && !truth.is_leaf(truth.edge(e).b)) internal.push_back(e);
    SplitMix64 rng(derive_key(304, {s}));
    for (std::size_t i = 0; i < 4; ++i) std::swap(internal[i], internal[i + rng.below(internal.size() - i)]);
    truth.set_length(internal[0], 2 * kLambda0);
    truth.set_length(internal[1], 2 * kLambda0);
    truth.set_length(internal[2], eps);
    truth.set_length(internal[3], eps);
    const auto r = reconstruct_oracle(truth, eps);
    min_comps = std::min(min_comps, r.score.components);
    const bool ok = r.score.compatibility == 1.0 && r.score.components >= 2 && r.score.i1 && r.score.i2 && r.score.i3;
    good += ok;
    if (!ok && first_bad.empty())
      first_bad = fmt("; trial %llu: compat=%.3f comps=%zu I1=%d I2=%d I3=%d", static_cast<unsigned long long>(s),
                      r.score.compatibility, r.score.components, r.score.i1, r.score.i2, r.score.i3);
  }
  return {good == 50, fmt("%d/50 trials sound (compatibility 1, >=2 components, I1-I3), min components %zu%s", good,
                          min_comps, first_bad.c_str())};
}

// ---------------------------------------------------------------------------
// 4. Work bounds over every run of criteria 1-3.

Verdict criterion4() {
  if (work_log().empty()) {
    criterion1();
    criterion3();
    companion_run();
  }
  std::size_t runs = 0, over = 0;
  double learned = 0, dists = 0;
  for (const auto& w : work_log()) {
    ++runs;
    const double n = static_cast<double>(w.n);
    learned = std::max(learned, w.t.learned_sequences / (3 * n));
    dists = std::max(dists, w.t.distance_evaluations / (8 * n * n));
    over += w.t.learned_sequences > 3 * w.n || w.t.distance_evaluations > 8 * w.n * w.n;
  }
  return {over == 0 && runs > 0,
          fmt("%zu runs, %zu over bound; max learned/3n = %.3f, max distances/8n^2 = %.3f", runs, over, learned, dists)};
}

// ---------------------------------------------------------------------------
// 5. Runtime scaling.

Verdict criterion5() {
  const double eps = 0.01;
  const std::size_t N = 20000;
  const auto t0 = Clock::now();
  std::vector<double> xs, ys;
  std::string table;
  for (std::size_t n : {64u, 128u, 256u, 512u}) {
    double total = 0;
    const int reps = 3;
    for (int k = 0; k < reps; ++k) {
      TrialSpec s;
      s.taxa = n;
      s.sites = N;
      s.edge_min = 6 * eps;
      s.edge_max = kLambda0 - 3 * eps;
      s.epsilon = eps;
      s.d = 3;
      s.seed = derive_key(505, {n, static_cast<std::uint64_t>(k)});
      const auto r = run_trial(s);
      if (r.error) return {false, "trial error at n=" + std::to_string(n) + ": " + r.message};
      total += r.seconds;
    }
    xs.push_back(static_cast<double>(n));
    ys.push_back(total / reps);
    table += fmt(" n=%zu:%.3fs", n, total / reps);
  }
  const double slope = loglog_slope(xs, ys);
  const double secs = since(t0);
  return {slope <= 3.3 && secs < 1800, fmt("log-log exponent %.2f at N=%zu;%s; total %.1f s", slope, N, table.c_str(), secs)};
}

// ---------------------------------------------------------------------------
// Small-tree enumeration shared by criteria 6 and 7.

using EdgeList = std::vector<std::pair<int, int>>;

/// All labelled unrooted binary trees on n leaves (leaves 0..n-1).
std::vector<EdgeList> binary_topologies(int n) {
  if (n == 2) return {{{0, 1}}};
  std::vector<EdgeList> cur{{{0, n}, {1, n}, {2, n}}};
  for (int leaf = 3; leaf < n; ++leaf) {
    std::vector<EdgeList> next;
    for (const auto& el : cur)
      for (std::size_t k = 0; k < el.size(); ++k) {
        EdgeList e = el;
        const int u = n + leaf - 2;
        const auto [a, b] = e[k];
        e[k] = {a, u};
        e.push_back({u, b});
        e.push_back({leaf, u});
        next.push_back(std::move(e));
      }
    cur = std::move(next);
  }
  return cur;
}

Tree build_tree(const EdgeList& el, int leaves, const std::vector<double>& len) {
  int nodes = 0;
  for (const auto& [a, b] : el) nodes = std::max({nodes, a + 1, b + 1});
  Tree t;
  for (int v = 0; v < nodes; ++v) t.add_node(v < leaves ? taxon_name(v) : std::string());
  for (std::size_t i = 0; i < el.size(); ++i) t.add_edge(el[i].first, el[i].second, len[i]);
  return t;
}

/// Calls f(lengths) for every assignment of grid values to `edges` edges.
void for_each_assignment(std::size_t edges, const std::vector<double>& grid,
                         const std::function<void(const std::vector<double>&)>& f) {
  std::vector<std::size_t> idx(edges, 0);
  std::vector<double> len(edges);
  while (true) {
    for (std::size_t i = 0; i < edges; ++i) len[i] = grid[idx[i]];
    f(len);
    std::size_t i = 0;
    while (i < edges && ++idx[i] == grid.size()) idx[i++] = 0;
    if (i == edges) return;
  }
}

// ---------------------------------------------------------------------------
// 6. CFN and percolation leaf laws coincide.

Verdict criterion6() {
  const std::vector<double> grid{0.0, 0.05, 0.4};
  std::size_t models = 0;
  double worst = 0.0;
  for (int n = 2; n <= 5; ++n)
    for (const auto& el : binary_topologies(n))
      for_each_assignment(el.size(), grid, [&](const std::vector<double>& len) {
        const Tree t = build_tree(el, n, len);
        const auto a = exact_leaf_distribution(CFNModel(t));
        const auto b = exact_percolation_distribution(PercolationConfig::from_lengths(t));
        for (std::size_t k = 0; k < a.prob.size(); ++k) worst = std::max(worst, std::abs(a.prob[k] - b.prob[k]));
        ++models;
      });
  return {worst <= 1e-10, fmt("%zu labelled trees x length assignments (<=7 edges, grid {0,0.05,0.4}); max |dP| = %.2e",
                              models, worst)};
}

// ---------------------------------------------------------------------------
// 7. Learned-root triangle inequality.

struct Induced {
  RootedTree rooted;
  std::vector<NodeId> inner;  // tree nodes on T' that are not its leaves
};

/// Subtree rooted at `rho` (away from `away`) spanned by the leaves in `keep`,
/// with unary non-root nodes suppressed.
Induced induced_subtree(const Tree& t, NodeId rho, NodeId away, const std::vector<NodeId>& keep) {
  const auto n = t.node_count();
  std::vector<int> hits(n, 0);
  std::vector<NodeId> parent(n, kNoNode), order{rho};
  parent[rho] = away;
  for (std::size_t i = 0; i < order.size(); ++i)
    for (const auto& adj : t.neighbors(order[i]))
      if (adj.node != parent[order[i]]) {
        parent[adj.node] = order[i];
        order.push_back(adj.node);
      }
  for (NodeId k : keep) hits[k] = 1;
  for (std::size_t i = order.size(); i-- > 1;) hits[parent[order[i]]] += hits[order[i]];
  Induced out;
  std::function<void(NodeId, int)> visit = [&](NodeId x, int local_parent) {
    std::vector<NodeId> kids;
    for (const auto& adj : t.neighbors(x))
      if (adj.node != parent[x] && hits[adj.node] > 0) kids.push_back(adj.node);
    const bool is_keep = std::find(keep.begin(), keep.end(), x) != keep.end();
    if (!is_keep) out.inner.push_back(x);
    int here = local_parent;
    if (x == rho || is_keep || kids.size() != 1) here = out.rooted.add(local_parent, x);
    for (NodeId k : kids) visit(k, here);
  };
  visit(rho, -1);
  return out;
}

Verdict criterion7() {
  const std::vector<double> grid{0.0, 0.07, 0.15};
  std::size_t checks = 0, degenerate = 0, violations = 0, flat = 0;
  double min_margin = kInfinity;
  std::string example;
  for (int n = 2; n <= 5; ++n) {
    const EdgeList el = binary_topologies(n).front();  // one shape per leaf count
    for_each_assignment(el.size(), grid, [&](const std::vector<double>& len) {
      const Tree t = build_tree(el, n, len);
      const CFNModel model(t);
      const auto nd = exact_node_distribution(model);
      for (NodeId rho = 0; rho < static_cast<NodeId>(t.node_count()); ++rho) {
        std::vector<NodeId> aways{kNoNode};
        for (const auto& adj : t.neighbors(rho)) aways.push_back(adj.node);
        for (NodeId away : aways) {
          std::vector<NodeId> clade_leaves;
          const auto clade = RootedTree::clade(t, rho, away);
          for (int v : clade.leaves())
            if (t.is_leaf(static_cast<NodeId>(clade.key[v])) && clade.key[v] != rho)
              clade_leaves.push_back(static_cast<NodeId>(clade.key[v]));
          const std::size_t L = clade_leaves.size();
          for (std::size_t sub = 1; sub < (std::size_t{1} << L); ++sub) {
            std::vector<NodeId> keep;
            for (std::size_t i = 0; i < L; ++i)
              if ((sub >> i) & 1) keep.push_back(clade_leaves[i]);
            const Induced ind = induced_subtree(t, rho, away, keep);
            for (int d = 1; d <= 2; ++d) {
              const auto plan = LearningPlan::make(ind.rooted, d);
              std::vector<double> q(nd.prob.size());
              for (std::size_t m = 0; m < q.size(); ++m) q[m] = detail::learned_plus_given(plan, m);
              auto learned_vs = [&](NodeId v) {
                double p = 0;
                for (std::size_t m = 0; m < q.size(); ++m) p += nd.prob[m] * (((m >> v) & 1) ? 1.0 - q[m] : q[m]);
                return distance_from_disagreement(p);
              };
              const double root_err = learned_vs(rho);
              for (NodeId v : ind.inner) {
                const double lhs = learned_vs(v);
                const double dv = path_length(t, rho, v);
                const double rhs = dv + root_err;
                ++checks;
                const bool degen = dv < 1e-12 || root_err < 1e-12;
                if (lhs > rhs + 1e-12) {
                  ++violations;
                  if (example.empty()) example = fmt("; violation rho=%d v=%d lhs=%.6g rhs=%.6g", rho, v, lhs, rhs);
                } else if (lhs > rhs - 1e-12) {
                  if (degen) {
                    ++degenerate;
                  } else {
                    ++flat;
                    if (example.empty()) example = fmt("; equality rho=%d v=%d lhs=%.6g", rho, v, lhs);
                  }
                } else {
                  min_margin = std::min(min_margin, rhs - lhs);
                }
              }
            }
          }
        }
      }
    });
  }
  return {violations == 0 && flat == 0,
          fmt("%zu checks over induced subtrees (<=7 edges, grid {0,0.07,0.15}, d in {1,2}): %zu violations, "
              "%zu non-degenerate equalities, %zu degenerate equalities, min strict margin %.3g%s",
              checks, violations, flat, degenerate, min_margin, example.c_str())};
}

// ---------------------------------------------------------------------------
// 8. Majority calibration.

/// D(root, learned root) on the d-level balanced tree via full enumeration.
double majhat_enumerated(int d, double l, double eta) {
  const RootedTree rt = RootedTree::balanced(d);
  Tree t;
  for (int v = 0; v < rt.size(); ++v) t.add_node(rt.is_leaf(v) ? taxon_name(v) : std::string());
  for (int v = 1; v < rt.size(); ++v) t.add_edge(rt.parent[v], v, l);
  CFNModel m(t, 0);
  for (int v = 0; v < rt.size(); ++v)
    if (rt.is_leaf(v)) m.set_noise(v, eta);
  return exact_learned_root_distance(m, LearningPlan::make(rt, d));
}

Verdict criterion8() {
  const double lm = kLambda0 - 0.02;
  const auto d = default_depth(lm);
  if (!d) return {false, "no contracting depth at lambda_max = lambda0 - 0.02"};
  const auto bc = calibrate_beta(lm, *d);
  const double main = majhat_exact(*d, lm, bc.beta);
  bool ok = main <= bc.beta;
  std::string detail = fmt("d=%d beta=%.5g majhat=%.5g", *d, bc.beta, main);

  // Depths 2 and 3 contract only for smaller lambda_max; spot checks use 0.9 of each threshold.
  SplitMix64 rng(808);
  int spot_ok = 0, spots = 0;
  double worst_gap = -kInfinity, worst_agree = 0;
  for (int k = 0; k < 100; ++k) {
    const int dd = 2 + k % 2;
    const double threshold = std::log(majority_gain(1 << dd)) / (2.0 * dd);
    const double lmax = 0.9 * threshold;
    const double beta = calibrate_beta(lmax, dd).beta;
    const double l = lmax * rng.uniform();
    const double eta = beta * rng.uniform();
    const double enumerated = majhat_enumerated(dd, l, eta);
    worst_agree = std::max(worst_agree, std::abs(enumerated - majhat_exact(dd, l, eta)));
    worst_gap = std::max(worst_gap, enumerated - beta);
    ++spots;
    spot_ok += enumerated <= beta + 1e-12;
  }
  ok = ok && spot_ok == spots && worst_agree < 1e-9;
  detail += fmt("; spot checks %d/%d within beta (d in {2,3}), max majhat-beta %.3g, enumeration vs DP %.1e", spot_ok,
                spots, worst_gap, worst_agree);
  return {ok, detail};
}

// ---------------------------------------------------------------------------
// 9. Concentration envelope.

Verdict criterion9() {
  // Settings where the bound is below 1 but deviations still occur.
  const double Mp = 0.3, eps = 0.2;
  struct Cell {
    double D;
    std::size_t N;
  };
  const std::vector<Cell> cells{{0.15, 500}, {0.28, 400}, {0.4, 500}};
  const int trials = 10000;
  bool ok = true;
  std::string detail = fmt("M=%.2f eps=%.2f, %d pair-trials per cell:", Mp, eps, trials);
  for (const auto& c : cells) {
    Tree t;
    t.add_node("u");
    t.add_node("v");
    t.add_edge(0, 1, c.D);
    const CFNModel m(t);
    int bad = 0;
    for (int k = 0; k < trials; ++k) {
      const auto x = sample_cfn(m, c.N, derive_key(909, {static_cast<std::uint64_t>(k), c.N}));
      const double d = empirical_distance(x.rows[0], x.rows[1]).as_threshold();
      bad += c.D < Mp ? std::abs(d - c.D) >= eps / 2 : d < Mp - eps / 2;
    }
    const double rate = static_cast<double>(bad) / trials;
    const double bound = failure_bound(Mp, eps, static_cast<double>(c.N));
    ok = ok && rate < bound;
    detail += fmt(" (D=%.2f,N=%zu) %.4f < %.4f;", c.D, c.N, rate, bound);
  }
  return {ok, detail};
}

// ---------------------------------------------------------------------------
// 10. Group-model reduction.

Verdict criterion10() {
  const std::size_t N = 100000;
  const Tree t = random_binary_tree(8, 0.05, 0.15, 1010);
  const auto gm = GroupModel::k3st_matching(t);
  const auto proj = project_group(leaf_group_rows(sample_group(gm, N, 1011), t), gm.phi);
  std::size_t pairs = 0, within = 0;
  double worst_z = 0;
  for (std::size_t i = 0; i < proj.labels.size(); ++i)
    for (std::size_t j = i + 1; j < proj.labels.size(); ++j) {
      const double D = path_length(t, *t.find(proj.labels[i]), *t.find(proj.labels[j]));
      const double p = prob_from_length(D);
      const double sigma = std::sqrt(p * (1 - p) / N) / (1 - 2 * p);
      const double z = std::abs(empirical_distance(proj.rows[i], proj.rows[j]).value - D) / sigma;
      worst_z = std::max(worst_z, z);
      ++pairs;
      within += z <= 3.0;
    }
  // End-to-end: criterion-1 style recovery from projected K3ST sequences.
  const double eps = 0.01;
  int ok = 0, total = 0;
  auto make = [&](std::size_t k) {
    TrialSpec s;
    s.taxa = k < 10 ? 8 : 16;
    s.sites = 30000;
    s.edge_min = 6 * eps;
    s.edge_max = kLambda0 - 3 * eps;
    s.model = ModelKind::k3st;
    s.epsilon = eps;
    s.d = 3;
    s.seed = derive_key(1012, {k});
    return s;
  };
  for (const auto& r : run_trials(20, make, 1)) {
    ++total;
    ok += !r.error && r.score.full_recovery;
  }
  return {within == pairs && ok == total,
          fmt("%zu/%zu pair distances within 3 sigma at N=%zu (max z %.2f); projected K3ST recovery %d/%d "
              "(n in {8,16}, N=3e4, epsilon=0.01, d=3)",
              within, pairs, N, worst_z, ok, total)};
}

const std::map<int, std::pair<const char*, Verdict (*)()>> kCriteria{
    {1, {"exact-distance full recovery", criterion1}},
    {2, {"statistical full recovery at calibrated N", criterion2}},
    {3, {"forest soundness with planted edges", criterion3}},
    {4, {"work bounds", criterion4}},
    {5, {"runtime scaling", criterion5}},
    {6, {"percolation equivalence", criterion6}},
    {7, {"learned-root triangle inequality", criterion7}},
    {8, {"majority calibration", criterion8}},
    {9, {"concentration envelope", criterion9}},
    {10, {"group-model reduction", criterion10}},
};

}  // namespace

int main(int argc, char** argv) {
  std::vector<int> which;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--criterion" && i + 1 < argc) {
      which.push_back(std::atoi(argv[++i]));
    } else {
      std::cerr << "usage: acceptance [--criterion N]...\n";
      return 2;
    }
  }
  if (which.empty())
    for (const auto& [k, v] : kCriteria) which.push_back(k);
  int failed = 0;
  for (int k : which) {
    const auto it = kCriteria.find(k);
    if (it == kCriteria.end()) {
      std::cerr << "unknown criterion " << k << "\n";
      return 2;
    }
    Verdict v;
    try {
      v = it->second.second();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    std::cout << (v.pass ? "PASS" : "FAIL") << " criterion " << k << " (" << it->second.first << "): " << v.detail
              << std::endl;
    failed += !v.pass;
  }
  return failed ? 1 : 0;
}
