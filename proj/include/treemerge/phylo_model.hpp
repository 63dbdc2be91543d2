#pragma once

// Core combinatorial types: unrooted trees with edge lengths, quartets,
// forests, and the purely metric operations on them.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace treemerge {

/// Ising phase transition on binary trees, log(2)/4.
inline constexpr double kLambda0 = std::numbers::ln2 / 4.0;

inline constexpr double kInfinity = std::numeric_limits<double>::infinity();

/// Edge length of a CFN edge with flip probability p: -log(1 - 2p)/2.
inline double length_from_prob(double p) {
  if (!(p >= 0.0) || !(p < 0.5))
    throw std::domain_error("mutation probability must lie in [0, 0.5)");
  return -0.5 * std::log1p(-2.0 * p);
}

/// Flip probability of a CFN edge of length L: (1 - e^{-2L})/2.
inline double prob_from_length(double length) {
  if (!(length >= 0.0)) throw std::domain_error("edge length must be non-negative");
  return -0.5 * std::expm1(-2.0 * length);
}

using NodeId = std::int32_t;
using EdgeId = std::int32_t;
inline constexpr NodeId kNoNode = -1;
inline constexpr EdgeId kNoEdge = -1;

struct Adjacency {
  NodeId node;
  EdgeId edge;
};

struct Edge {
  NodeId a;
  NodeId b;
  double length;

  NodeId other(NodeId x) const noexcept { return x == a ? b : a; }
};

/// Undirected tree (or forest fragment) with optional taxon labels on nodes
/// and a length on every edge. Node and edge ids are dense and stable.
class Tree {
 public:
  NodeId add_node(std::string label = {}) {
    labels_.push_back(std::move(label));
    adjacency_.emplace_back();
    return static_cast<NodeId>(labels_.size() - 1);
  }

  EdgeId add_edge(NodeId a, NodeId b, double length) {
    check_node(a);
    check_node(b);
    if (a == b) throw std::invalid_argument("self-loop edge");
    if (!(length >= 0.0) || !std::isfinite(length))
      throw std::domain_error("edge length must be finite and non-negative");
    const auto e = static_cast<EdgeId>(edges_.size());
    edges_.push_back({a, b, length});
    adjacency_[a].push_back({b, e});
    adjacency_[b].push_back({a, e});
    return e;
  }

  std::size_t node_count() const noexcept { return labels_.size(); }
  std::size_t edge_count() const noexcept { return edges_.size(); }

  const std::string& label(NodeId v) const { return labels_.at(v); }
  bool is_labeled(NodeId v) const { return !labels_.at(v).empty(); }
  void set_label(NodeId v, std::string label) { labels_.at(v) = std::move(label); }

  std::span<const Adjacency> neighbors(NodeId v) const { return adjacency_.at(v); }
  int degree(NodeId v) const { return static_cast<int>(adjacency_.at(v).size()); }
  bool is_leaf(NodeId v) const { return degree(v) <= 1; }

  const Edge& edge(EdgeId e) const { return edges_.at(e); }
  std::span<const Edge> edges() const noexcept { return edges_; }
  void set_length(EdgeId e, double length) {
    if (!(length >= 0.0)) throw std::domain_error("edge length must be non-negative");
    edges_.at(e).length = length;
  }

  EdgeId edge_between(NodeId a, NodeId b) const {
    for (const auto& adj : neighbors(a))
      if (adj.node == b) return adj.edge;
    return kNoEdge;
  }

  std::vector<NodeId> leaves() const {
    std::vector<NodeId> out;
    for (NodeId v = 0; v < static_cast<NodeId>(node_count()); ++v)
      if (is_leaf(v)) out.push_back(v);
    return out;
  }

  std::optional<NodeId> find(std::string_view label) const {
    for (NodeId v = 0; v < static_cast<NodeId>(node_count()); ++v)
      if (labels_[v] == label) return v;
    return std::nullopt;
  }

  /// Sorted taxon labels of the leaves.
  std::vector<std::string> taxa() const {
    std::vector<std::string> out;
    for (NodeId v : leaves()) out.push_back(labels_[v]);
    std::sort(out.begin(), out.end());
    return out;
  }

  double total_length() const {
    double s = 0;
    for (const auto& e : edges_) s += e.length;
    return s;
  }

  /// Throws unless the tree is connected, acyclic, has internal degree 3,
  /// labeled leaves with unique labels, and unlabeled internal nodes.
  void validate_binary() const {
    const auto n = node_count();
    if (n == 0) throw std::invalid_argument("empty tree");
    if (edge_count() + 1 != n) throw std::invalid_argument("tree must have |E| = |V| - 1");
    if (!connected()) throw std::invalid_argument("tree is not connected");
    std::vector<std::string> seen;
    for (NodeId v = 0; v < static_cast<NodeId>(n); ++v) {
      const int deg = degree(v);
      if (deg <= 1) {
        if (labels_[v].empty()) throw std::invalid_argument("unlabeled leaf");
        seen.push_back(labels_[v]);
      } else if (deg != 3) {
        throw std::invalid_argument("internal node of degree " + std::to_string(deg));
      } else if (!labels_[v].empty()) {
        throw std::invalid_argument("labeled internal node " + labels_[v]);
      }
    }
    std::sort(seen.begin(), seen.end());
    if (std::adjacent_find(seen.begin(), seen.end()) != seen.end())
      throw std::invalid_argument("duplicate taxon label");
  }

  bool connected() const {
    if (node_count() == 0) return true;
    std::vector<char> mark(node_count(), 0);
    std::vector<NodeId> stack{0};
    mark[0] = 1;
    std::size_t reached = 1;
    while (!stack.empty()) {
      const NodeId v = stack.back();
      stack.pop_back();
      for (const auto& adj : adjacency_[v])
        if (!mark[adj.node]) {
          mark[adj.node] = 1;
          ++reached;
          stack.push_back(adj.node);
        }
    }
    return reached == node_count();
  }

 private:
  void check_node(NodeId v) const {
    if (v < 0 || static_cast<std::size_t>(v) >= node_count())
      throw std::out_of_range("node id out of range");
  }

  std::vector<std::string> labels_;
  std::vector<std::vector<Adjacency>> adjacency_;
  std::vector<Edge> edges_;
};

/// Single-source path lengths; unreachable nodes get +inf.
inline std::vector<double> distances_from(const Tree& tree, NodeId source) {
  std::vector<double> dist(tree.node_count(), kInfinity);
  std::vector<NodeId> stack{source};
  dist.at(source) = 0.0;
  while (!stack.empty()) {
    const NodeId v = stack.back();
    stack.pop_back();
    for (const auto& adj : tree.neighbors(v))
      if (dist[adj.node] == kInfinity) {
        dist[adj.node] = dist[v] + tree.edge(adj.edge).length;
        stack.push_back(adj.node);
      }
  }
  return dist;
}

/// Sum of edge lengths along the unique u-v path.
inline double path_length(const Tree& tree, NodeId u, NodeId v) {
  const double d = distances_from(tree, u).at(v);
  if (d == kInfinity) throw std::invalid_argument("nodes lie in different components");
  return d;
}

/// Edges on the unique u-v path (empty when u == v).
inline std::vector<EdgeId> path_edges(const Tree& tree, NodeId u, NodeId v) {
  std::vector<EdgeId> via(tree.node_count(), kNoEdge);
  std::vector<char> seen(tree.node_count(), 0);
  std::vector<NodeId> stack{u};
  seen.at(u) = 1;
  while (!stack.empty()) {
    const NodeId x = stack.back();
    stack.pop_back();
    for (const auto& adj : tree.neighbors(x))
      if (!seen[adj.node]) {
        seen[adj.node] = 1;
        via[adj.node] = adj.edge;
        stack.push_back(adj.node);
      }
  }
  if (!seen.at(v)) throw std::invalid_argument("nodes lie in different components");
  std::vector<EdgeId> out;
  for (NodeId x = v; x != u;) {
    const EdgeId e = via[x];
    out.push_back(e);
    x = tree.edge(e).other(x);
  }
  std::reverse(out.begin(), out.end());
  return out;
}

/// Quartet (a,b | c,d) over four caller-defined references (indices into
/// whatever the caller is resolving), with the estimated middle-path length.
struct Quartet {
  std::array<int, 2> left;
  std::array<int, 2> right;
  double middle = 0.0;

  friend bool operator==(const Quartet&, const Quartet&) = default;
};

using Dist4 = std::array<std::array<double, 4>, 4>;

struct FourPointResult {
  Quartet grouping;  // pairing with the smallest within-pair sum
  double slack;      // gap to the next smallest pair-sum; twice the middle length on additive input
  bool degenerate;   // no strict minimum
};

/// The three pairings of {0,1,2,3}, in canonical order.
inline constexpr std::array<std::array<int, 4>, 3> kPairings{{
    {0, 1, 2, 3},
    {0, 2, 1, 3},
    {0, 3, 1, 2},
}};

inline FourPointResult four_point_check(const Dist4& d) {
  std::array<double, 3> sums{};
  for (int k = 0; k < 3; ++k) {
    const auto& p = kPairings[k];
    sums[k] = d[p[0]][p[1]] + d[p[2]][p[3]];
  }
  std::array<int, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(),
                   [&](int x, int y) { return sums[x] < sums[y]; });
  const auto& p = kPairings[order[0]];
  const double slack = sums[order[1]] - sums[order[0]];
  FourPointResult r;
  r.grouping = Quartet{{p[0], p[1]}, {p[2], p[3]}, slack / 2.0};
  r.slack = slack;
  r.degenerate = !(slack > 0.0);
  return r;
}

/// Forest of edge-disjoint components, e.g. a reconstruction result.
struct Forest {
  std::vector<Tree> components;
};

}  // namespace treemerge
