#pragma once

// Character simulation (CFN with leaf noise, percolation, group-based models)
// and exact enumeration oracles for small trees.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "treemerge/ancestral.hpp"
#include "treemerge/character_matrix.hpp"
#include "treemerge/phylo_model.hpp"
#include "treemerge/rng.hpp"

namespace treemerge {

/// CFN(l, eta): edge lengths on `tree`, optional leaf noise eta (indexed by
/// node, zero on internal nodes), and a sampling root.
struct CFNModel {
  Tree tree;
  NodeId root = 0;
  std::vector<double> leaf_noise;

  explicit CFNModel(Tree t, NodeId r = 0) : tree(std::move(t)), root(r) {}

  double noise(NodeId v) const {
    return leaf_noise.empty() ? 0.0 : leaf_noise.at(static_cast<std::size_t>(v));
  }

  void set_noise(NodeId v, double eta) {
    if (leaf_noise.empty()) leaf_noise.assign(tree.node_count(), 0.0);
    leaf_noise.at(static_cast<std::size_t>(v)) = eta;
  }

  void validate() const {
    if (tree.node_count() == 0) throw std::invalid_argument("CFN model: empty tree");
    if (root < 0 || static_cast<std::size_t>(root) >= tree.node_count())
      throw std::invalid_argument("CFN model: root out of range");
    if (!tree.connected() || tree.edge_count() + 1 != tree.node_count())
      throw std::invalid_argument("CFN model: topology must be a tree");
    if (!leaf_noise.empty()) {
      if (leaf_noise.size() != tree.node_count())
        throw std::invalid_argument("CFN model: noise vector size mismatch");
      for (NodeId v = 0; v < static_cast<NodeId>(tree.node_count()); ++v) {
        const double eta = leaf_noise[v];
        if (!(eta >= 0.0) || !std::isfinite(eta)) throw std::domain_error("CFN model: eta must be >= 0");
        if (eta > 0.0 && !tree.is_leaf(v)) throw std::invalid_argument("CFN model: noise on internal node");
      }
    }
  }
};

namespace detail {

/// Parent-first traversal order from `root` with the edge to each parent.
struct Orientation {
  std::vector<NodeId> order;
  std::vector<NodeId> parent;
  std::vector<EdgeId> up_edge;
};

inline Orientation orient(const Tree& tree, NodeId root) {
  Orientation o;
  const auto n = tree.node_count();
  o.parent.assign(n, kNoNode);
  o.up_edge.assign(n, kNoEdge);
  std::vector<char> seen(n, 0);
  o.order.push_back(root);
  seen[root] = 1;
  for (std::size_t i = 0; i < o.order.size(); ++i) {
    const NodeId v = o.order[i];
    for (const auto& adj : tree.neighbors(v))
      if (!seen[adj.node]) {
        seen[adj.node] = 1;
        o.parent[adj.node] = v;
        o.up_edge[adj.node] = adj.edge;
        o.order.push_back(adj.node);
      }
  }
  if (o.order.size() != n) throw std::invalid_argument("tree is not connected");
  return o;
}

inline CharacterMatrix empty_matrix(const Tree& tree, std::size_t sites) {
  CharacterMatrix m;
  m.sites = sites;
  for (NodeId v = 0; v < static_cast<NodeId>(tree.node_count()); ++v) {
    m.labels.push_back(tree.is_labeled(v) ? tree.label(v) : "#" + std::to_string(v));
    m.rows.emplace_back(sites);
  }
  return m;
}

}  // namespace detail

/// One row per node (row index = NodeId). Leaf rows carry the noisy
/// observation when eta > 0. Site i draws from the stream derive_key(seed, {i}).
inline CharacterMatrix sample_cfn(const CFNModel& model, std::size_t sites, std::uint64_t seed) {
  model.validate();
  if (sites == 0) throw std::invalid_argument("sample_cfn: N must be positive");
  const Tree& t = model.tree;
  const auto o = detail::orient(t, model.root);
  std::vector<double> flip(t.node_count(), 0.0), noise(t.node_count(), 0.0);
  for (NodeId v = 0; v < static_cast<NodeId>(t.node_count()); ++v) {
    if (o.up_edge[v] != kNoEdge) flip[v] = prob_from_length(t.edge(o.up_edge[v]).length);
    noise[v] = prob_from_length(model.noise(v));
  }
  CharacterMatrix m = detail::empty_matrix(t, sites);
  std::vector<int> state(t.node_count());
  for (std::size_t i = 0; i < sites; ++i) {
    SplitMix64 rng(derive_key(seed, {i}));
    for (const NodeId v : o.order) {
      if (v == model.root)
        state[v] = (rng() >> 63) ? +1 : -1;
      else
        state[v] = rng.uniform() < flip[v] ? -state[o.parent[v]] : state[o.parent[v]];
    }
    for (const NodeId v : o.order) {
      int s = state[v];
      if (noise[v] > 0.0 && rng.uniform() < noise[v]) s = -s;
      m.rows[v].set(i, s);
    }
  }
  return m;
}

/// Rows restricted to labeled leaves, in NodeId order.
inline CharacterMatrix leaf_rows(const CharacterMatrix& full, const Tree& tree) {
  CharacterMatrix out;
  out.sites = full.sites;
  for (NodeId v = 0; v < static_cast<NodeId>(tree.node_count()); ++v)
    if (tree.is_leaf(v) && tree.is_labeled(v)) {
      out.labels.push_back(tree.label(v));
      out.rows.push_back(full.rows.at(v));
    }
  return out;
}

/// Per-edge survival theta(e) = 1 - 2p(e), indexed by EdgeId.
struct PercolationConfig {
  Tree tree;
  std::vector<double> theta;

  static PercolationConfig from_lengths(const Tree& t) {
    PercolationConfig c{t, {}};
    for (const auto& e : t.edges()) c.theta.push_back(1.0 - 2.0 * prob_from_length(e.length));
    return c;
  }

  void validate() const {
    if (theta.size() != tree.edge_count()) throw std::invalid_argument("percolation: theta size mismatch");
    for (double th : theta)
      if (!(th > 0.0) || !(th <= 1.0)) throw std::domain_error("percolation: theta must lie in (0, 1]");
  }
};

/// Delete each edge w.p. 1 - theta, colour each surviving cluster uniformly.
inline CharacterMatrix sample_percolation(const PercolationConfig& cfg, std::size_t sites,
                                          std::uint64_t seed) {
  cfg.validate();
  if (sites == 0) throw std::invalid_argument("sample_percolation: N must be positive");
  const auto o = detail::orient(cfg.tree, 0);
  CharacterMatrix m = detail::empty_matrix(cfg.tree, sites);
  std::vector<int> state(cfg.tree.node_count());
  for (std::size_t i = 0; i < sites; ++i) {
    SplitMix64 rng(derive_key(seed, {i}));
    for (const NodeId v : o.order) {
      const bool fresh = v == o.order.front() || !(rng.uniform() < cfg.theta[o.up_edge[v]]);
      if (fresh) {
        state[v] = (rng() >> 63) ? +1 : -1;
      } else {
        state[v] = state[o.parent[v]];
      }
      m.rows[v].set(i, state[v]);
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Group-based models.

/// Finite group by multiplication table; element 0 is the identity.
struct FiniteGroup {
  std::vector<std::vector<int>> mul;

  int order() const noexcept { return static_cast<int>(mul.size()); }

  int inverse(int a) const {
    for (int b = 0; b < order(); ++b)
      if (mul[a][b] == 0) return b;
    throw std::logic_error("group element without inverse");
  }

  void validate() const {
    const int n = order();
    if (n < 1) throw std::invalid_argument("group: empty");
    for (const auto& row : mul) {
      if (static_cast<int>(row.size()) != n) throw std::invalid_argument("group: table not square");
      for (int x : row)
        if (x < 0 || x >= n) throw std::invalid_argument("group: table entry out of range");
    }
    for (int a = 0; a < n; ++a) {
      if (mul[0][a] != a || mul[a][0] != a) throw std::invalid_argument("group: element 0 is not the identity");
      (void)inverse(a);
      for (int b = 0; b < n; ++b)
        for (int c = 0; c < n; ++c)
          if (mul[mul[a][b]][c] != mul[a][mul[b][c]]) throw std::invalid_argument("group: not associative");
    }
  }

  static FiniteGroup z2() { return {{{0, 1}, {1, 0}}}; }

  /// Z2 x Z2 with index x + 2y for (x, y).
  static FiniteGroup klein() {
    FiniteGroup g;
    g.mul.assign(4, std::vector<int>(4));
    for (int a = 0; a < 4; ++a)
      for (int b = 0; b < 4; ++b) g.mul[a][b] = a ^ b;
    return g;
  }
};

/// Group-valued evolution on a tree; edge_dist[e][g] = p_e(g).
struct GroupModel {
  FiniteGroup group;
  std::vector<int> phi;  // morphism to {+1, -1}
  Tree tree;
  NodeId root = 0;
  std::vector<std::vector<double>> edge_dist;

  void validate() const {
    group.validate();
    const int n = group.order();
    if (static_cast<int>(phi.size()) != n) throw std::invalid_argument("group model: phi size mismatch");
    bool negative = false;
    for (int a = 0; a < n; ++a) {
      if (phi[a] != 1 && phi[a] != -1) throw std::invalid_argument("group model: phi must map to +-1");
      negative = negative || phi[a] == -1;
      for (int b = 0; b < n; ++b)
        if (phi[group.mul[a][b]] != phi[a] * phi[b])
          throw std::invalid_argument("group model: phi is not a morphism");
    }
    if (!negative) throw std::invalid_argument("group model: phi is trivial");
    if (edge_dist.size() != tree.edge_count()) throw std::invalid_argument("group model: edge_dist size mismatch");
    for (const auto& p : edge_dist) {
      if (static_cast<int>(p.size()) != n) throw std::invalid_argument("group model: distribution size mismatch");
      double s = 0;
      for (double x : p) {
        if (!(x >= 0.0)) throw std::domain_error("group model: negative mass");
        s += x;
      }
      if (std::abs(s - 1.0) > 1e-12) throw std::domain_error("group model: distribution does not sum to 1");
    }
  }

  /// Binary flip probability of the projected CFN process on edge e.
  double projected_flip(EdgeId e) const {
    double s = 0;
    for (int g = 0; g < group.order(); ++g)
      if (phi[g] == -1) s += edge_dist.at(e)[g];
    return s;
  }

  /// phi(x, y) = (-1)^y on Z2 x Z2.
  static std::vector<int> klein_phi() { return {1, 1, -1, -1}; }

  /// Kimura 3ST with masses (m1, m2, m3) on (1,0), (0,1), (1,1) per edge.
  static GroupModel k3st(const Tree& t, const std::vector<std::array<double, 3>>& masses, NodeId root = 0) {
    GroupModel m{FiniteGroup::klein(), klein_phi(), t, root, {}};
    if (masses.size() != t.edge_count()) throw std::invalid_argument("k3st: one mass triple per edge");
    for (const auto& w : masses) m.edge_dist.push_back({1.0 - w[0] - w[1] - w[2], w[0], w[1], w[2]});
    m.validate();
    return m;
  }

  /// K3ST whose projection is CFN with the tree's own lengths; the
  /// phi-positive substitution gets `kappa` times the projected flip mass.
  static GroupModel k3st_matching(const Tree& t, double kappa = 0.5, NodeId root = 0) {
    std::vector<std::array<double, 3>> masses;
    for (const auto& e : t.edges()) {
      const double p = prob_from_length(e.length);
      masses.push_back({kappa * p, p / 2.0, p / 2.0});
    }
    return k3st(t, masses, root);
  }

  /// Jukes-Cantor: all three substitutions equally likely; projection matches
  /// the tree's lengths.
  static GroupModel jc_matching(const Tree& t, NodeId root = 0) {
    std::vector<std::array<double, 3>> masses;
    for (const auto& e : t.edges()) {
      const double p = prob_from_length(e.length);
      if (1.5 * p > 0.75) throw std::domain_error("jc: edge too long");
      masses.push_back({p / 2.0, p / 2.0, p / 2.0});
    }
    return k3st(t, masses, root);
  }

  /// Z2 model with p_e(-1) = p(e).
  static GroupModel z2_matching(const Tree& t, NodeId root = 0) {
    GroupModel m{FiniteGroup::z2(), {1, -1}, t, root, {}};
    for (const auto& e : t.edges()) {
      const double p = prob_from_length(e.length);
      m.edge_dist.push_back({1.0 - p, p});
    }
    m.validate();
    return m;
  }
};

/// Group-valued matrix; rows indexed by NodeId.
struct GroupMatrix {
  std::vector<std::string> labels;
  std::vector<std::vector<std::uint8_t>> rows;
  std::size_t sites = 0;
};

/// The phi-sign of each transition uses the same stream and draws as
/// sample_cfn, the within-coset choice a second stream, so the projection of
/// a matching model reproduces the binary run with the same seed.
inline GroupMatrix sample_group(const GroupModel& model, std::size_t sites, std::uint64_t seed) {
  model.validate();
  if (sites == 0) throw std::invalid_argument("sample_group: N must be positive");
  const Tree& t = model.tree;
  const auto o = detail::orient(t, model.root);
  const int n = model.group.order();
  std::vector<int> pos, neg;
  for (int g = 0; g < n; ++g) (model.phi[g] == 1 ? pos : neg).push_back(g);
  GroupMatrix m;
  m.sites = sites;
  for (NodeId v = 0; v < static_cast<NodeId>(t.node_count()); ++v) {
    m.labels.push_back(t.is_labeled(v) ? t.label(v) : "#" + std::to_string(v));
    m.rows.emplace_back(sites);
  }
  auto pick = [&](const std::vector<int>& coset, const std::vector<double>& p, double mass,
                  SplitMix64& rng) {
    if (coset.size() == 1 || mass <= 0.0) return coset.front();
    double u = rng.uniform() * mass;
    for (int g : coset) {
      if (u < p[g]) return g;
      u -= p[g];
    }
    return coset.back();
  };
  std::vector<int> state(t.node_count());
  for (std::size_t i = 0; i < sites; ++i) {
    SplitMix64 sign_rng(derive_key(seed, {i}));
    SplitMix64 coset_rng(derive_key(seed, {i, 0x6A0u}));
    for (const NodeId v : o.order) {
      if (v == model.root) {
        const bool negative = (sign_rng() >> 63) == 0;
        std::vector<double> uniform(n, 1.0);
        const auto& coset = negative ? neg : pos;
        state[v] = pick(coset, uniform, static_cast<double>(coset.size()), coset_rng);
      } else {
        const auto& p = model.edge_dist[o.up_edge[v]];
        const double neg_mass = model.projected_flip(o.up_edge[v]);
        const bool flip = sign_rng.uniform() < neg_mass;
        const int g = flip ? pick(neg, p, neg_mass, coset_rng) : pick(pos, p, 1.0 - neg_mass, coset_rng);
        state[v] = model.group.mul[state[o.parent[v]]][g];
      }
      m.rows[v][i] = static_cast<std::uint8_t>(state[v]);
    }
  }
  return m;
}

/// Entrywise phi.
inline CharacterMatrix project_group(const GroupMatrix& g, const std::vector<int>& phi) {
  CharacterMatrix m;
  m.labels = g.labels;
  m.sites = g.sites;
  for (const auto& row : g.rows) {
    Sequence s(g.sites);
    for (std::size_t i = 0; i < g.sites; ++i) {
      const int x = phi.at(row[i]);
      if (x != 1 && x != -1) throw std::invalid_argument("project_group: phi must map to +-1");
      s.set(i, x);
    }
    m.rows.push_back(std::move(s));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Exact enumeration oracles.

inline constexpr std::size_t kMaxOracleNodes = 20;

/// Joint law of all node states; bit v of the index set means node v is +1.
/// Leaf noise is folded into the pendant edge, so leaf bits are observations.
struct NodeDistribution {
  std::size_t nodes = 0;
  std::vector<double> prob;
};

inline NodeDistribution exact_node_distribution(const CFNModel& model) {
  model.validate();
  const Tree& t = model.tree;
  const auto n = t.node_count();
  if (n > kMaxOracleNodes) throw std::invalid_argument("exact oracle: more than 20 nodes");
  const auto o = detail::orient(t, model.root);
  std::vector<double> flip(n, 0.0);
  for (NodeId v = 0; v < static_cast<NodeId>(n); ++v)
    if (o.up_edge[v] != kNoEdge) flip[v] = prob_from_length(t.edge(o.up_edge[v]).length + model.noise(v));
  NodeDistribution d;
  d.nodes = n;
  d.prob.assign(std::size_t{1} << n, 0.0);
  for (std::size_t mask = 0; mask < d.prob.size(); ++mask) {
    double p = 0.5;
    for (std::size_t k = 1; k < o.order.size(); ++k) {
      const NodeId v = o.order[k];
      const bool differ = ((mask >> v) & 1) != ((mask >> o.parent[v]) & 1);
      p *= differ ? flip[v] : 1.0 - flip[v];
    }
    d.prob[mask] = p;
  }
  return d;
}

/// Law of the leaf vector; bit i refers to leaves[i].
struct LeafDistribution {
  std::vector<NodeId> leaves;
  std::vector<double> prob;
};

inline LeafDistribution marginalize_to_leaves(const NodeDistribution& nd, const Tree& t) {
  LeafDistribution out;
  out.leaves = t.leaves();
  out.prob.assign(std::size_t{1} << out.leaves.size(), 0.0);
  for (std::size_t mask = 0; mask < nd.prob.size(); ++mask) {
    std::size_t key = 0;
    for (std::size_t i = 0; i < out.leaves.size(); ++i) key |= ((mask >> out.leaves[i]) & 1) << i;
    out.prob[key] += nd.prob[mask];
  }
  return out;
}

inline LeafDistribution exact_leaf_distribution(const CFNModel& model) {
  return marginalize_to_leaves(exact_node_distribution(model), model.tree);
}

/// -log(1 - 2 P[differ])/2, or +inf when P >= 1/2.
inline double distance_from_disagreement(double p) {
  if (p >= 0.5) return kInfinity;
  return length_from_prob(std::max(0.0, p));
}

inline double exact_pair_distance(const CFNModel& model, NodeId u, NodeId v) {
  const auto nd = exact_node_distribution(model);
  double p = 0;
  for (std::size_t mask = 0; mask < nd.prob.size(); ++mask)
    if (((mask >> u) & 1) != ((mask >> v) & 1)) p += nd.prob[mask];
  return distance_from_disagreement(p);
}

/// Recursive-majority plan over model nodes: `rooted.key` holds NodeIds and
/// the leaves of `rooted` must be leaves of the model.
struct LearningPlan {
  RootedTree rooted;
  Decomposition decomposition;

  static LearningPlan make(RootedTree rt, int d) {
    LearningPlan p{std::move(rt), {}};
    p.decomposition = decompose(p.rooted, d);
    return p;
  }
};

namespace detail {

inline double learned_plus_given(const LearningPlan& plan, std::size_t mask) {
  return learned_plus_probability(plan.rooted, plan.decomposition, [&](int local) {
    return static_cast<double>((mask >> plan.rooted.key[local]) & 1);
  });
}

}  // namespace detail

/// D(learned root of `plan`, chi(v)).
inline double exact_learned_node_distance(const CFNModel& model, const LearningPlan& plan, NodeId v) {
  const auto nd = exact_node_distribution(model);
  double p = 0;
  for (std::size_t mask = 0; mask < nd.prob.size(); ++mask) {
    if (nd.prob[mask] == 0.0) continue;
    const double q = detail::learned_plus_given(plan, mask);
    p += nd.prob[mask] * (((mask >> v) & 1) ? 1.0 - q : q);
  }
  return distance_from_disagreement(p);
}

/// D(learned root, chi(root)).
inline double exact_learned_root_distance(const CFNModel& model, const LearningPlan& plan) {
  return exact_learned_node_distance(model, plan, static_cast<NodeId>(plan.rooted.key[plan.rooted.root]));
}

/// D(learned root of a, learned root of b); the two use independent coins.
inline double exact_learned_pair_distance(const CFNModel& model, const LearningPlan& a, const LearningPlan& b) {
  const auto nd = exact_node_distribution(model);
  double p = 0;
  for (std::size_t mask = 0; mask < nd.prob.size(); ++mask) {
    if (nd.prob[mask] == 0.0) continue;
    const double qa = detail::learned_plus_given(a, mask);
    const double qb = detail::learned_plus_given(b, mask);
    p += nd.prob[mask] * (qa * (1.0 - qb) + (1.0 - qa) * qb);
  }
  return distance_from_disagreement(p);
}

/// Leaf law of the percolation construction, by enumerating survival patterns.
inline LeafDistribution exact_percolation_distribution(const PercolationConfig& cfg) {
  cfg.validate();
  const Tree& t = cfg.tree;
  if (t.edge_count() > kMaxOracleNodes) throw std::invalid_argument("percolation oracle: too many edges");
  LeafDistribution out;
  out.leaves = t.leaves();
  out.prob.assign(std::size_t{1} << out.leaves.size(), 0.0);
  const auto n = t.node_count();
  std::vector<int> comp(n);
  for (std::size_t alive = 0; alive < (std::size_t{1} << t.edge_count()); ++alive) {
    double w = 1.0;
    for (std::size_t e = 0; e < t.edge_count(); ++e)
      w *= ((alive >> e) & 1) ? cfg.theta[e] : 1.0 - cfg.theta[e];
    if (w == 0.0) continue;
    // Union-find over surviving edges.
    std::iota(comp.begin(), comp.end(), 0);
    auto find = [&](int x) {
      while (comp[x] != x) x = comp[x] = comp[comp[x]];
      return x;
    };
    for (std::size_t e = 0; e < t.edge_count(); ++e)
      if ((alive >> e) & 1) comp[find(t.edge(e).a)] = find(t.edge(e).b);
    std::vector<int> roots;
    for (NodeId v = 0; v < static_cast<NodeId>(n); ++v)
      if (find(v) == v) roots.push_back(v);
    const double each = w / static_cast<double>(std::size_t{1} << roots.size());
    for (std::size_t colour = 0; colour < (std::size_t{1} << roots.size()); ++colour) {
      std::size_t key = 0;
      for (std::size_t i = 0; i < out.leaves.size(); ++i) {
        const int r = find(out.leaves[i]);
        const auto idx = static_cast<std::size_t>(std::find(roots.begin(), roots.end(), r) - roots.begin());
        key |= ((colour >> idx) & 1) << i;
      }
      out.prob[key] += each;
    }
  }
  return out;
}

}  // namespace treemerge
