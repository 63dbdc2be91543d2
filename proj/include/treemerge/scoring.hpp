#pragma once

// Scoring a reconstructed forest against the generating tree.

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "treemerge/phylo_model.hpp"

namespace treemerge {

using TaxonSet = std::set<std::string>;

/// Non-trivial splits of a tree, each given by the side that avoids the
/// smallest taxon. Both sides have at least two taxa.
inline std::set<TaxonSet> bipartitions(const Tree& t) {
  std::set<TaxonSet> out;
  const auto all = t.taxa();
  if (all.size() < 4) return out;
  const std::string& anchor = all.front();
  for (EdgeId e = 0; e < static_cast<EdgeId>(t.edge_count()); ++e) {
    const Edge& ed = t.edge(e);
    // Taxa on the b side of e.
    TaxonSet side;
    std::vector<std::pair<NodeId, NodeId>> stack{{ed.b, ed.a}};
    while (!stack.empty()) {
      const auto [x, from] = stack.back();
      stack.pop_back();
      if (t.is_labeled(x) && t.is_leaf(x)) side.insert(t.label(x));
      for (const auto& adj : t.neighbors(x))
        if (adj.node != from) stack.emplace_back(adj.node, x);
    }
    if (side.size() < 2 || side.size() + 2 > all.size()) continue;
    if (side.count(anchor)) {
      TaxonSet other;
      for (const auto& l : all)
        if (!side.count(l)) other.insert(l);
      side.swap(other);
    }
    out.insert(std::move(side));
  }
  return out;
}

/// Rooted helper over a fixed tree: depths, parents, lengths from the root.
class TreeIndex {
 public:
  explicit TreeIndex(const Tree& t) : t_(t) {
    const auto n = t.node_count();
    parent_.assign(n, kNoNode);
    depth_.assign(n, 0);
    if (n == 0) return;
    std::vector<NodeId> stack{0};
    std::vector<bool> seen(n, false);
    seen[0] = true;
    while (!stack.empty()) {
      const NodeId x = stack.back();
      stack.pop_back();
      for (const auto& adj : t.neighbors(x))
        if (!seen[adj.node]) {
          seen[adj.node] = true;
          parent_[adj.node] = x;
          depth_[adj.node] = depth_[x] + 1;
          stack.push_back(adj.node);
        }
    }
  }

  NodeId lca(NodeId x, NodeId y) const {
    while (depth_[x] > depth_[y]) x = parent_[x];
    while (depth_[y] > depth_[x]) y = parent_[y];
    while (x != y) {
      x = parent_[x];
      y = parent_[y];
    }
    return x;
  }

  NodeId median(NodeId x, NodeId y, NodeId z) const {
    const NodeId a = lca(x, y), b = lca(y, z), c = lca(x, z);
    NodeId best = a;
    if (depth_[b] > depth_[best]) best = b;
    if (depth_[c] > depth_[best]) best = c;
    return best;
  }

 private:
  const Tree& t_;
  std::vector<NodeId> parent_;
  std::vector<int> depth_;
};

/// True iff `truth` restricted to A u B has the split A | B.
inline bool displays(const Tree& truth, const TaxonSet& A, const TaxonSet& B) {
  if (A.empty() || B.empty()) return true;
  const auto root = truth.find(*B.begin());
  if (!root) throw std::invalid_argument("displays: taxon missing from truth");
  const auto n = truth.node_count();
  std::vector<int> a_below(n, 0), b_below(n, 0);
  std::vector<NodeId> order, parent(n, kNoNode);
  std::vector<NodeId> stack{*root};
  std::vector<bool> seen(n, false);
  seen[*root] = true;
  while (!stack.empty()) {
    const NodeId x = stack.back();
    stack.pop_back();
    order.push_back(x);
    for (const auto& adj : truth.neighbors(x))
      if (!seen[adj.node]) {
        seen[adj.node] = true;
        parent[adj.node] = x;
        stack.push_back(adj.node);
      }
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const NodeId x = *it;
    if (truth.is_labeled(x)) {
      a_below[x] += A.count(truth.label(x)) ? 1 : 0;
      b_below[x] += B.count(truth.label(x)) ? 1 : 0;
    }
    if (a_below[x] == static_cast<int>(A.size()) && b_below[x] == 0) return true;
    if (parent[x] != kNoNode) {
      a_below[parent[x]] += a_below[x];
      b_below[parent[x]] += b_below[x];
    }
  }
  return false;
}

struct ForestScore {
  std::size_t components = 0;
  std::size_t output_splits = 0;
  std::size_t compatible_splits = 0;
  double compatibility = 1.0;   // compatible / output splits (1 when none)
  double recall = 0.0;          // compatible splits / (n - 3)
  bool full_recovery = false;   // one component equal to the truth topology
  // Edge-wise comparison with true path lengths between node images.
  double max_length_error = 0.0;
  double mean_length_error = 0.0;
  std::vector<double> true_lengths;       // per output edge, component order
  std::vector<double> estimated_lengths;  // same order
  std::size_t edges_shorter_than_2eps = 0;
  bool i1 = true, i2 = true, i3 = true;
};

/// Scores `forest` against `truth`; eps drives the structural audits.
inline ForestScore score_forest(const Forest& forest, const Tree& truth, double eps) {
  ForestScore s;
  s.components = forest.components.size();
  const auto truth_taxa = truth.taxa();
  const TreeIndex index(truth);
  std::vector<int> edge_owner(truth.edge_count(), -1);
  double err_sum = 0.0;
  std::size_t err_count = 0;

  for (std::size_t ci = 0; ci < forest.components.size(); ++ci) {
    const Tree& comp = forest.components[ci];
    const auto taxa = comp.taxa();
    const TaxonSet all(taxa.begin(), taxa.end());
    for (const auto& A : bipartitions(comp)) {
      TaxonSet B;
      for (const auto& l : all)
        if (!A.count(l)) B.insert(l);
      ++s.output_splits;
      if (displays(truth, A, B)) ++s.compatible_splits;
    }
    if (comp.node_count() < 2) continue;

    // Image of every node in the truth.
    std::vector<NodeId> image(comp.node_count(), kNoNode);
    for (NodeId v = 0; v < static_cast<NodeId>(comp.node_count()); ++v) {
      if (comp.is_leaf(v)) {
        const auto w = truth.find(comp.label(v));
        if (!w) throw std::invalid_argument("score: taxon missing from truth");
        image[v] = *w;
        continue;
      }
      std::vector<NodeId> wit;
      for (const auto& adj : comp.neighbors(v)) {
        std::vector<std::pair<NodeId, NodeId>> stack{{adj.node, v}};
        while (!stack.empty()) {
          const auto [x, from] = stack.back();
          stack.pop_back();
          if (comp.is_leaf(x)) {
            wit.push_back(*truth.find(comp.label(x)));
            break;
          }
          for (const auto& a2 : comp.neighbors(x))
            if (a2.node != from) stack.emplace_back(a2.node, x);
        }
      }
      image[v] = wit.size() >= 3 ? index.median(wit[0], wit[1], wit[2]) : wit.front();
    }
    int long_count = 0;
    for (const Edge& e : comp.edges()) {
      const double L = path_length(truth, image[e.a], image[e.b]);
      s.true_lengths.push_back(L);
      s.estimated_lengths.push_back(e.length);
      const double err = std::abs(L - e.length);
      s.max_length_error = std::max(s.max_length_error, err);
      err_sum += err;
      ++err_count;
      if (L < 2.0 * eps) {
        ++s.edges_shorter_than_2eps;
        s.i1 = false;
      }
      if (L > kLambda0 - eps) {
        ++long_count;
        if (L > 2.0 * kLambda0 - 4.0 * eps) s.i2 = false;
      }
      for (EdgeId te : path_edges(truth, image[e.a], image[e.b])) {
        if (edge_owner[te] >= 0 && edge_owner[te] != static_cast<int>(ci)) s.i3 = false;
        edge_owner[te] = static_cast<int>(ci);
      }
    }
    if (long_count > 1) s.i2 = false;
  }
  if (err_count) s.mean_length_error = err_sum / static_cast<double>(err_count);
  s.compatibility = s.output_splits ? static_cast<double>(s.compatible_splits) / s.output_splits : 1.0;
  const std::size_t n = truth_taxa.size();
  s.recall = n > 3 ? std::min(1.0, static_cast<double>(s.compatible_splits) / static_cast<double>(n - 3)) : 1.0;
  if (forest.components.size() == 1 && forest.components.front().taxa() == truth_taxa)
    s.full_recovery = bipartitions(forest.components.front()) == bipartitions(truth);
  return s;
}

}  // namespace treemerge
