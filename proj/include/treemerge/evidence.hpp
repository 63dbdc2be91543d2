#pragma once

// Distance-evidence policies for TreeMerge.

#include <array>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "treemerge/ancestral.hpp"
#include "treemerge/character_matrix.hpp"
#include "treemerge/distances.hpp"
#include "treemerge/forest_merge.hpp"
#include "treemerge/phylo_model.hpp"

namespace treemerge {

/// Observed leaf sequences; learned slots are weighted majorities with coins
/// keyed by (seed, item).
class SequenceEvidence {
 public:
  SequenceEvidence(CharacterMatrix leaves, std::uint64_t seed) : leaves_(std::move(leaves)), seed_(seed) {
    if (leaves_.rows.empty()) throw std::invalid_argument("sequence evidence: no taxa");
    for (const auto& r : leaves_.rows)
      if (r.size() != leaves_.sites) throw std::invalid_argument("sequence evidence: ragged matrix");
    learned_.resize(4 * leaves_.rows.size());
    have_.assign(learned_.size(), false);
  }

  std::size_t taxa() const noexcept { return leaves_.rows.size(); }
  const std::vector<std::string>& labels() const noexcept { return leaves_.labels; }

  const Sequence& sequence(int item) const {
    if (item < static_cast<int>(taxa())) return leaves_.rows.at(item);
    if (!have_.at(item)) throw std::logic_error("sequence evidence: item not learned");
    return learned_[item];
  }

  void learn(int item, std::span<const WeightedRef> frontier, const std::array<int, 3>&) {
    if (item < static_cast<int>(taxa()) || have_.at(item))
      throw std::logic_error("sequence evidence: bad learn target");
    std::vector<const Sequence*> in;
    std::vector<FrontierItem> weights;
    for (const auto& f : frontier) {
      in.push_back(&sequence(f.item));
      weights.push_back({f.item, f.weight});
    }
    learned_[item] = majority_vote(in, weights, seed_, item);
    have_[item] = true;
  }

  double distance(int a, int b) { return empirical_distance(sequence(a), sequence(b)).as_threshold(); }

 private:
  CharacterMatrix leaves_;
  std::uint64_t seed_;
  std::vector<Sequence> learned_;
  std::vector<bool> have_;
};

/// Noiseless additive distances from a known tree. A learned slot stands for
/// the median of its node's three witness taxa, i.e. perfect ancestral
/// reconstruction.
class AdditiveOracleEvidence {
 public:
  /// `taxon_node[i]` is the tree node of taxon i.
  AdditiveOracleEvidence(const Tree& truth, std::vector<NodeId> taxon_node)
      : tree_(truth), taxon_(std::move(taxon_node)) {
    const auto nodes = tree_.node_count();
    if (nodes == 0 || taxon_.empty()) throw std::invalid_argument("oracle evidence: empty tree");
    for (NodeId v : taxon_)
      if (v < 0 || v >= static_cast<NodeId>(nodes)) throw std::out_of_range("oracle evidence: taxon node out of range");
    dist_.resize(nodes);
    for (NodeId v = 0; v < static_cast<NodeId>(nodes); ++v) dist_[v] = distances_from(tree_, v);
    parent_.assign(nodes, kNoNode);
    depth_.assign(nodes, 0);
    std::vector<NodeId> stack{0};
    std::vector<bool> seen(nodes, false);
    seen[0] = true;
    while (!stack.empty()) {
      const NodeId x = stack.back();
      stack.pop_back();
      for (const auto& adj : tree_.neighbors(x))
        if (!seen[adj.node]) {
          seen[adj.node] = true;
          parent_[adj.node] = x;
          depth_[adj.node] = depth_[x] + 1;
          stack.push_back(adj.node);
        }
    }
    node_of_item_.assign(4 * taxon_.size(), kNoNode);
    for (std::size_t i = 0; i < taxon_.size(); ++i) node_of_item_[i] = taxon_[i];
  }

  /// Oracle keyed by leaf labels in `labels` order.
  static AdditiveOracleEvidence from_labels(const Tree& truth, const std::vector<std::string>& labels) {
    std::vector<NodeId> nodes;
    for (const auto& l : labels) {
      const auto v = truth.find(l);
      if (!v) throw std::invalid_argument("oracle evidence: unknown taxon " + l);
      nodes.push_back(*v);
    }
    return AdditiveOracleEvidence(truth, std::move(nodes));
  }

  std::size_t taxa() const noexcept { return taxon_.size(); }

  NodeId median(NodeId x, NodeId y, NodeId z) const {
    const NodeId a = lca(x, y), b = lca(y, z), c = lca(x, z);
    NodeId best = a;
    if (depth_[b] > depth_[best]) best = b;
    if (depth_[c] > depth_[best]) best = c;
    return best;
  }

  void learn(int item, std::span<const WeightedRef>, const std::array<int, 3>& witnesses) {
    for (int w : witnesses)
      if (w < 0 || w >= static_cast<int>(taxa())) throw std::logic_error("oracle evidence: bad witness");
    node_of_item_.at(item) = median(taxon_[witnesses[0]], taxon_[witnesses[1]], taxon_[witnesses[2]]);
  }

  NodeId node_of(int item) const {
    const NodeId v = node_of_item_.at(item);
    if (v == kNoNode) throw std::logic_error("oracle evidence: item not learned");
    return v;
  }

  double distance(int a, int b) { return dist_[node_of(a)][node_of(b)]; }

 private:
  NodeId lca(NodeId x, NodeId y) const {
    while (depth_[x] > depth_[y]) x = parent_[x];
    while (depth_[y] > depth_[x]) y = parent_[y];
    while (x != y) {
      x = parent_[x];
      y = parent_[y];
    }
    return x;
  }

  Tree tree_;
  std::vector<NodeId> taxon_;
  std::vector<std::vector<double>> dist_;
  std::vector<NodeId> parent_;
  std::vector<int> depth_;
  std::vector<NodeId> node_of_item_;
};

}  // namespace treemerge
