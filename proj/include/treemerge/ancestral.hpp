#pragma once

// Recursive-majority ancestral learning: weighted Maj, the depth-d cut of a
// rooted tree, bit-parallel learning over sequences, the exact balanced-tree
// error DP and the (d, beta) calibration.

#include <cmath>
#include <cstdint>
#include <functional>
#include <istream>
#include <map>
#include <mutex>
#include <numbers>
#include <cstdio>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "treemerge/character_matrix.hpp"
#include "treemerge/phylo_model.hpp"
#include "treemerge/rng.hpp"

namespace treemerge {

/// 2^{1-q} * C(q, floor(q/2)).
inline double a_of_q(int q) {
  if (q < 1) throw std::invalid_argument("a_of_q: q must be >= 1");
  const int k = q / 2;
  const double log_binom = std::lgamma(q + 1.0) - std::lgamma(k + 1.0) - std::lgamma(q - k + 1.0);
  return std::exp((1.0 - q) * std::numbers::ln2 + log_binom);
}

/// q * 2^{-q} * C(q, floor(q/2)); grows like sqrt(2q/pi). This is the factor
/// that must beat e^{2 d lambda} for recursive majority to contract.
inline double majority_gain(int q) { return q * a_of_q(q) / 2.0; }

/// sign(sum w_i x_i + coin/2).
inline int maj(std::span<const int> values, std::span<const int> weights, int coin) {
  if (values.empty()) throw std::invalid_argument("maj: empty input");
  if (values.size() != weights.size()) throw std::invalid_argument("maj: weight count mismatch");
  if (coin != 1 && coin != -1) throw std::invalid_argument("maj: coin must be +1 or -1");
  long long s = 0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (weights[i] <= 0) throw std::invalid_argument("maj: weights must be positive");
    if (values[i] != 1 && values[i] != -1) throw std::invalid_argument("maj: values must be +1 or -1");
    s += static_cast<long long>(weights[i]) * values[i];
  }
  if (s > 0) return 1;
  if (s < 0) return -1;
  return coin;
}

inline int maj(std::span<const int> values, int coin) {
  std::vector<int> w(values.size(), 1);
  return maj(values, w, coin);
}

/// Rooted tree over local ids; key[i] names the node in the caller's space.
struct RootedTree {
  int root = 0;
  std::vector<int> parent;
  std::vector<std::vector<int>> children;
  std::vector<std::int64_t> key;

  int size() const noexcept { return static_cast<int>(parent.size()); }
  bool is_leaf(int v) const { return children.at(v).empty(); }

  int add(int par, std::int64_t k) {
    const int id = size();
    parent.push_back(par);
    children.emplace_back();
    key.push_back(k);
    if (par >= 0) children.at(par).push_back(id);
    return id;
  }

  std::vector<int> leaves() const {
    std::vector<int> out;
    for (int v = 0; v < size(); ++v)
      if (is_leaf(v)) out.push_back(v);
    return out;
  }

  /// Clade of `tree` rooted at v, away from neighbor `away` (kNoNode for the whole tree).
  static RootedTree clade(const Tree& tree, NodeId v, NodeId away) {
    RootedTree rt;
    std::vector<std::pair<NodeId, int>> stack{{v, rt.add(-1, v)}};
    std::vector<NodeId> from{away};
    while (!stack.empty()) {
      const auto [x, id] = stack.back();
      const NodeId par = from.back();
      stack.pop_back();
      from.pop_back();
      for (const auto& adj : tree.neighbors(x)) {
        if (adj.node == par) continue;
        stack.emplace_back(adj.node, rt.add(id, adj.node));
        from.push_back(x);
      }
    }
    return rt;
  }

  /// Complete binary tree with `levels` levels below the root.
  static RootedTree balanced(int levels) {
    RootedTree rt;
    rt.add(-1, 0);
    std::vector<int> frontier{0};
    for (int l = 0; l < levels; ++l) {
      std::vector<int> next;
      for (int v : frontier)
        for (int c = 0; c < 2; ++c) next.push_back(rt.add(v, rt.size()));
      frontier = std::move(next);
    }
    return rt;
  }
};

struct FrontierItem {
  int node;
  std::uint64_t weight;  // 2^{d-k} for a frontier node at depth k
};

struct Piece {
  int root;
  std::vector<FrontierItem> frontier;
  std::vector<int> interior;  // root and nodes strictly between root and frontier
};

/// Edge-disjoint cut of a rooted tree into pieces of depth <= d. Pieces are
/// ordered children before parents; the last one is rooted at the tree root.
struct Decomposition {
  int depth = 1;
  std::vector<Piece> pieces;
  std::vector<int> piece_of_root;  // local node -> piece index, or -1

  const Piece& top() const { return pieces.back(); }
};

inline Decomposition decompose(const RootedTree& t, int d) {
  if (d < 1) throw std::invalid_argument("decompose: depth must be >= 1");
  if (d > 62) throw std::invalid_argument("decompose: depth too large");
  Decomposition out;
  out.depth = d;
  out.piece_of_root.assign(t.size(), -1);
  // Recursive on piece roots; explicit stack keeps deep caterpillars safe.
  struct Frame {
    int root;
    bool expanded;
  };
  std::vector<Frame> stack{{t.root, false}};
  std::vector<Piece> pending(t.size());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (!f.expanded) {
      f.expanded = true;
      Piece p;
      p.root = f.root;
      if (t.is_leaf(f.root)) {
        p.frontier.push_back({f.root, std::uint64_t{1} << d});
        p.interior.push_back(f.root);
      } else {
        std::vector<std::pair<int, int>> level{{f.root, 0}};
        while (!level.empty()) {
          const auto [v, k] = level.back();
          level.pop_back();
          if (v != f.root && (k == d || t.is_leaf(v))) {
            p.frontier.push_back({v, std::uint64_t{1} << (d - k)});
            continue;
          }
          p.interior.push_back(v);
          for (auto it = t.children[v].rbegin(); it != t.children[v].rend(); ++it)
            level.emplace_back(*it, k + 1);
        }
      }
      const int root = f.root;
      std::vector<int> sub;
      for (const auto& item : p.frontier)
        if (item.node != root && !t.is_leaf(item.node)) sub.push_back(item.node);
      pending[root] = std::move(p);
      for (auto it = sub.rbegin(); it != sub.rend(); ++it) stack.push_back({*it, false});
    } else {
      const int root = f.root;
      stack.pop_back();
      out.piece_of_root[root] = static_cast<int>(out.pieces.size());
      out.pieces.push_back(std::move(pending[root]));
    }
  }
  return out;
}

namespace detail {

/// Weighted majority over 64 sites at once. `inputs[i]` is the word of item i.
inline std::uint64_t majority_word(std::span<const std::uint64_t> inputs,
                                   std::span<const FrontierItem> items, std::uint64_t coins) {
  std::int64_t sum[64] = {};
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto w = static_cast<std::int64_t>(items[i].weight);
    const std::uint64_t x = inputs[i];
    for (int b = 0; b < 64; ++b) sum[b] += ((x >> b) & 1) ? w : -w;
  }
  std::uint64_t out = 0;
  for (int b = 0; b < 64; ++b) {
    const bool plus = sum[b] > 0 || (sum[b] == 0 && ((coins >> b) & 1));
    if (plus) out |= std::uint64_t{1} << b;
  }
  return out;
}

}  // namespace detail

/// Coin word for majority node `node_key`, sites [64w, 64w+64).
inline std::uint64_t coin_word(std::uint64_t seed, std::int64_t node_key, std::size_t w) {
  return derive_key(seed, {0xC0u, static_cast<std::uint64_t>(node_key), w});
}

/// Weighted majority of whole sequences with per-(site, node) coins.
inline Sequence majority_vote(std::span<const Sequence* const> inputs,
                              std::span<const FrontierItem> items, std::uint64_t seed,
                              std::int64_t node_key) {
  if (inputs.empty()) throw std::invalid_argument("majority_vote: empty input");
  const std::size_t sites = inputs.front()->size();
  Sequence out(sites);
  std::vector<std::uint64_t> col(inputs.size());
  for (std::size_t w = 0; w < out.words().size(); ++w) {
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      if (inputs[i]->size() != sites) throw std::invalid_argument("majority_vote: length mismatch");
      col[i] = inputs[i]->words()[w];
    }
    out.words()[w] = detail::majority_word(col, items, coin_word(seed, node_key, w)) & out.word_mask(w);
  }
  return out;
}

/// Bottom-up learning of the root sequence. `leaf` returns the observed
/// sequence of a leaf (local id) and must throw if it is missing.
inline Sequence learn_root(const RootedTree& t, const Decomposition& dec,
                           const std::function<const Sequence&(int)>& leaf, std::uint64_t seed) {
  std::vector<Sequence> learned(dec.pieces.size());
  std::vector<const Sequence*> in;
  for (std::size_t i = 0; i < dec.pieces.size(); ++i) {
    const Piece& p = dec.pieces[i];
    in.clear();
    for (const auto& item : p.frontier) {
      const int sub = dec.piece_of_root[item.node];
      if (t.is_leaf(item.node))
        in.push_back(&leaf(item.node));
      else if (sub >= 0 && sub < static_cast<int>(i))
        in.push_back(&learned[sub]);
      else
        throw std::logic_error("learn_root: piece order violated");
    }
    learned[i] = majority_vote(in, p.frontier, seed, t.key[p.root]);
  }
  return std::move(learned.back());
}

/// P[learned root = +1] when each leaf is +1 independently with the given
/// probability (coins give 1/2 on ties). Used by the exact oracles.
inline double learned_plus_probability(const RootedTree& t, const Decomposition& dec,
                                       const std::function<double(int)>& leaf_plus) {
  std::vector<double> q(dec.pieces.size());
  for (std::size_t i = 0; i < dec.pieces.size(); ++i) {
    const Piece& p = dec.pieces[i];
    std::uint64_t total = 0;
    for (const auto& item : p.frontier) total += item.weight;
    // Distribution of sum w_i x_i, offset by total.
    std::vector<double> dist(2 * total + 1, 0.0), next;
    dist[total] = 1.0;
    for (const auto& item : p.frontier) {
      const double pp = t.is_leaf(item.node) ? leaf_plus(item.node) : q[dec.piece_of_root[item.node]];
      next.assign(dist.size(), 0.0);
      const std::uint64_t w = item.weight;
      for (std::size_t s = 0; s < dist.size(); ++s) {
        if (dist[s] == 0.0) continue;
        if (s + w < dist.size()) next[s + w] += dist[s] * pp;
        if (s >= w) next[s - w] += dist[s] * (1.0 - pp);
      }
      dist.swap(next);
    }
    double plus = 0.5 * dist[total];
    for (std::size_t s = total + 1; s < dist.size(); ++s) plus += dist[s];
    q[i] = plus;
  }
  return q.back();
}

inline constexpr int kMaxExactDepth = 6;

/// Exact D(root, Maj) on the d-level balanced tree with internal edge length
/// l and leaf edges l + eta, by a per-level symmetric DP on the leaf sum.
inline double majhat_exact(int d, double l, double eta) {
  if (d < 1 || d > kMaxExactDepth)
    throw std::invalid_argument("majhat_exact: d must lie in [1, " + std::to_string(kMaxExactDepth) + "]");
  if (!(l >= 0.0) || !(eta >= 0.0)) throw std::domain_error("majhat_exact: negative length");
  const int W = 1 << d;
  // f[s + W]: P[leaf sum = s | subtree root = +1].
  std::vector<double> f(2 * W + 1, 0.0), g, h;
  f[W + 1] = 1.0;
  for (int level = 0; level < d; ++level) {
    const double p = prob_from_length(level == 0 ? l + eta : l);
    g.assign(f.size(), 0.0);
    for (int s = 0; s <= 2 * W; ++s) g[s] = (1.0 - p) * f[s] + p * f[2 * W - s];
    h.assign(f.size(), 0.0);
    for (int a = 0; a <= 2 * W; ++a) {
      if (g[a] == 0.0) continue;
      for (int b = 0; b <= 2 * W; ++b) {
        if (g[b] == 0.0) continue;
        const int s = a + b - W;
        if (s >= 0 && s <= 2 * W) h[s] += g[a] * g[b];
      }
    }
    f.swap(h);
  }
  double err = 0.5 * f[W];
  for (int s = 0; s < W; ++s) err += f[s];
  if (err >= 0.5) return kInfinity;
  return length_from_prob(err);
}

class InfeasibleDepth : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Smallest d in [1, kMaxExactDepth] with gain(2^d) e^{-2 d lambda_max} > 1.
inline std::optional<int> default_depth(double lambda_max) {
  for (int d = 1; d <= kMaxExactDepth; ++d)
    if (majority_gain(1 << d) * std::exp(-2.0 * d * lambda_max) > 1.0) return d;
  return std::nullopt;
}

inline bool depth_feasible(double lambda_max, int d) {
  return majority_gain(1 << d) * std::exp(-2.0 * d * lambda_max) > 1.0;
}

struct BetaCalibration {
  double lambda_max = 0.0;
  int d = 1;
  double beta = 0.0;
  double majhat_at_beta = 0.0;
};

inline constexpr int kBetaGridPoints = 2048;
inline constexpr double kBetaGridMax = 16.0 * kLambda0;

namespace detail {

struct BetaCache {
  std::mutex mu;
  std::map<std::pair<double, int>, BetaCalibration> table;
};

inline BetaCache& beta_cache() {
  static BetaCache cache;
  return cache;
}

}  // namespace detail

/// Smallest grid beta with majhat_exact(d, lambda_max, beta) <= beta. Throws
/// InfeasibleDepth when d is too shallow or the grid has no fixed point.
inline BetaCalibration calibrate_beta(double lambda_max, int d) {
  if (!(lambda_max >= 0.0) || !(lambda_max < kLambda0))
    throw std::domain_error("calibrate_beta: lambda_max must lie in [0, lambda0)");
  auto& cache = detail::beta_cache();
  {
    std::lock_guard lock(cache.mu);
    if (auto it = cache.table.find({lambda_max, d}); it != cache.table.end()) return it->second;
  }
  BetaCalibration out{lambda_max, d, 0.0, 0.0};
  bool found = false;
  if (lambda_max == 0.0) {
    found = true;  // noiseless edges: the root is always recovered
  } else {
    if (d > kMaxExactDepth || !depth_feasible(lambda_max, d))
      throw InfeasibleDepth("calibrate_beta: depth " + std::to_string(d) +
                            " cannot contract at lambda_max " + std::to_string(lambda_max));
    for (int i = 1; i <= kBetaGridPoints; ++i) {
      const double beta = kBetaGridMax * i / kBetaGridPoints;
      const double m = majhat_exact(d, lambda_max, beta);
      if (m <= beta) {
        out.beta = beta;
        out.majhat_at_beta = m;
        found = true;
        break;
      }
    }
  }
  if (!found)
    throw InfeasibleDepth("calibrate_beta: no fixed point on the grid at depth " + std::to_string(d));
  std::lock_guard lock(cache.mu);
  cache.table.emplace(std::pair{lambda_max, d}, out);
  return out;
}

/// `lambda_max d beta majhat` per line; '#' lines are comments.
inline void write_beta_table(std::ostream& os) {
  auto& cache = detail::beta_cache();
  std::lock_guard lock(cache.mu);
  os << "# lambda_max\td\tbeta\tmajhat\n";
  char buf[160];
  for (const auto& [key, c] : cache.table) {
    std::snprintf(buf, sizeof buf, "%.17g\t%d\t%.17g\t%.17g\n", c.lambda_max, c.d, c.beta,
                  c.majhat_at_beta);
    os << buf;
  }
}

inline std::size_t load_beta_table(std::istream& is) {
  auto& cache = detail::beta_cache();
  std::lock_guard lock(cache.mu);
  std::string line;
  std::size_t loaded = 0;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    BetaCalibration c;
    if (!(ls >> c.lambda_max >> c.d >> c.beta >> c.majhat_at_beta))
      throw std::runtime_error("beta table: malformed line '" + line + "'");
    cache.table[{c.lambda_max, c.d}] = c;
    ++loaded;
  }
  return loaded;
}

}  // namespace treemerge
