#pragma once

// Uniform random binary topologies (random edge attachment) with i.i.d.
// uniform edge lengths.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "treemerge/phylo_model.hpp"
#include "treemerge/rng.hpp"

namespace treemerge {

inline std::string taxon_name(std::size_t i) { return "t" + std::to_string(i); }

/// Unrooted binary topology on n labelled leaves, uniform over topologies.
/// Leaves are nodes 0..n-1 labelled t0..t{n-1}.
inline Tree random_binary_tree(std::size_t n, double min_len, double max_len, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("random tree: need at least one leaf");
  if (!(min_len >= 0.0) || !(max_len >= min_len)) throw std::invalid_argument("random tree: bad length range");
  SplitMix64 rng(derive_key(seed, {0x7EE}));
  std::vector<std::pair<int, int>> edges;
  int next_internal = static_cast<int>(n);
  if (n == 2) edges.push_back({0, 1});
  if (n >= 3) {
    const int c = next_internal++;
    edges = {{0, c}, {1, c}, {2, c}};
    for (int leaf = 3; leaf < static_cast<int>(n); ++leaf) {
      const auto k = static_cast<std::size_t>(rng.below(edges.size()));
      const auto [a, b] = edges[k];
      const int u = next_internal++;
      edges[k] = {a, u};
      edges.push_back({u, b});
      edges.push_back({leaf, u});
    }
  }
  Tree t;
  for (int v = 0; v < next_internal; ++v) t.add_node(v < static_cast<int>(n) ? taxon_name(v) : std::string());
  for (const auto& [a, b] : edges) t.add_edge(a, b, min_len + (max_len - min_len) * rng.uniform());
  return t;
}

/// Caterpillar on n leaves with every edge of length `len`.
inline Tree caterpillar(std::size_t n, double len) {
  if (n < 3) throw std::invalid_argument("caterpillar: need at least three leaves");
  Tree t;
  for (std::size_t i = 0; i < n; ++i) t.add_node(taxon_name(i));
  std::vector<NodeId> spine;
  for (std::size_t i = 0; i + 2 < n; ++i) spine.push_back(t.add_node());
  t.add_edge(0, spine.front(), len);
  t.add_edge(1, spine.front(), len);
  for (std::size_t i = 1; i < spine.size(); ++i) {
    t.add_edge(spine[i - 1], spine[i], len);
    t.add_edge(static_cast<NodeId>(i + 1), spine[i], len);
  }
  t.add_edge(static_cast<NodeId>(n - 1), spine.back(), len);
  return t;
}

}  // namespace treemerge
