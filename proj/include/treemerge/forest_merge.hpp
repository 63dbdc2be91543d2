#pragma once

// Forest merging over a distance-evidence policy.
//
// Evidence must provide
//   std::size_t taxa() const;
//   void learn(int item, std::span<const WeightedRef> frontier, const std::array<int, 3>& witnesses);
//   double distance(int a, int b);   // +inf when saturated
// Items name sequences: taxon v is item v; the slot (w, p) of internal node w
// (the clade rooted at w that avoids port p) is item n + 3(w - n) + p.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <map>
#include <optional>
#include <queue>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "treemerge/distances.hpp"
#include "treemerge/phylo_model.hpp"

namespace treemerge {

struct WeightedRef {
  int item;
  std::uint64_t weight;
};

/// Candidate attachment edges inside one component. An empty edge list means
/// the component is the single node `center`; a 3-edge set shares `center`.
struct Candidate {
  std::vector<int> edges;
  int center = -1;

  bool singleton() const noexcept { return edges.empty(); }

  friend bool operator==(const Candidate& x, const Candidate& y) {
    if (x.edges.empty() || y.edges.empty()) return x.edges.empty() && y.edges.empty() && x.center == y.center;
    return x.edges == y.edges;
  }
};

enum class Decision { merged, unresolved, length_fail, reject_c1, reject_c2, reject_triangle };

inline const char* to_string(Decision d) {
  switch (d) {
    case Decision::merged: return "merged";
    case Decision::unresolved: return "unresolved";
    case Decision::length_fail: return "length-fail";
    case Decision::reject_c1: return "reject-c1";
    case Decision::reject_c2: return "reject-c2";
    case Decision::reject_triangle: return "reject-triangle";
  }
  return "?";
}

struct RunRecord {
  std::size_t iteration = 0;
  int comp1 = -1;
  int comp2 = -1;
  double key = 0.0;
  Decision decision = Decision::merged;
  std::string detail;
  bool boundary_equality = false;
};

struct Telemetry {
  std::size_t iterations = 0;
  std::size_t merges = 0;
  std::size_t learned_sequences = 0;
  std::size_t distance_evaluations = 0;
  std::size_t connection_calls = 0;
};

/// Result of check_c1_c2 on a set of estimated edge lengths.
struct ConditionCheck {
  bool accept = true;
  Decision reason = Decision::merged;
  int long_edges = 0;
};

/// C1: every length >= 3 eps. C2: at most one length >= lambda0 - 2 eps and
/// that one < 2 lambda0 - 5 eps.
inline ConditionCheck check_c1_c2(std::span<const double> lengths, double eps) {
  ConditionCheck r;
  for (double l : lengths)
    if (!(l >= 3.0 * eps)) return {false, Decision::reject_c1, 0};
  for (double l : lengths)
    if (l >= kLambda0 - 2.0 * eps) {
      ++r.long_edges;
      if (!(l < 2.0 * kLambda0 - 5.0 * eps)) return {false, Decision::reject_c2, r.long_edges};
    }
  if (r.long_edges > 1) return {false, Decision::reject_c2, r.long_edges};
  return r;
}

template <class Evidence>
class TreeMerge {
 public:
  /// A clade rooted at `node` that avoids port `port` (-1 for a lone node).
  struct DirClade {
    int node;
    int port;
  };
  using Side = std::array<DirClade, 2>;

  struct EdgeEstimate {
    bool ok = false;
    double length = 0.0;
    double diameter = kInfinity;
  };

  struct JoinPlan {
    int comp1 = -1, comp2 = -1;
    int a = -1, b = -1, c = -1, d = -1;  // b, d are -1 for singletons
    double middle = 0.0, au = 0.0, ub = 0.0, cv = 0.0, vd = 0.0;
    bool ok = false;
    std::string detail;

    std::vector<double> lengths() const {
      std::vector<double> out{middle};
      if (b >= 0) {
        out.push_back(au);
        out.push_back(ub);
      }
      if (d >= 0) {
        out.push_back(cv);
        out.push_back(vd);
      }
      return out;
    }
  };

  TreeMerge(Evidence& evidence, const ReconstructionParams& params, std::vector<std::string> taxon_labels)
      : ev_(evidence), params_(params), labels_(std::move(taxon_labels)) {
    n_ = static_cast<int>(ev_.taxa());
    if (n_ < 1) throw std::invalid_argument("tree_merge: no taxa");
    if (static_cast<int>(labels_.size()) != n_) throw std::invalid_argument("tree_merge: label count mismatch");
    max_items_ = static_cast<std::size_t>(4 * n_);
    cache_.assign(max_items_ * max_items_, std::numeric_limits<double>::quiet_NaN());
    local_.assign(static_cast<std::size_t>(2 * n_), -1);
  }

  // -------------------------------------------------------------------------
  // Driver.

  /// Singletons, leaf distances, initial queue.
  void initialize() {
    if (initialized_) return;
    initialized_ = true;
    for (int v = 0; v < n_; ++v) {
      nodes_.push_back(NodeRec{});
      nodes_[v].comp = v;
      comps_.push_back(CompRec{{v}, {}, -1, true});
    }
    partners_.assign(comps_.size(), {});
    const double limit = params_.M / 3.0 - params_.epsilon;
    for (int i = 0; i < n_; ++i)
      for (int j = i + 1; j < n_; ++j) {
        const double dij = dist(i, j);
        if (dij < limit) {
          Candidate ci{{}, i}, cj{{}, j};
          const auto td = tree_distance(i, j, ci, cj);
          if (td) put_pair(i, j, *td, ci, cj);
        }
      }
  }

  /// One queue pop. Returns false once the queue is empty or one component remains.
  bool step() {
    if (!initialized_) initialize();
    if (alive_components() <= 1) return false;
    for (;;) {
      if (heap_.empty()) return false;
      const HeapEntry top = heap_.top();
      heap_.pop();
      auto it = pairs_.find({top.lo, top.hi});
      if (it == pairs_.end() || !it->second.in_queue || it->second.version != top.version) continue;
      if (!comps_[top.lo].alive || !comps_[top.hi].alive) continue;
      it->second.in_queue = false;
      process(top.lo, top.hi, it->second);
      return true;
    }
  }

  Forest run() {
    initialize();
    while (step()) {
    }
    return forest();
  }

  // -------------------------------------------------------------------------
  // Subroutines, public so that tests can script states.

  /// Candidate refinement for the pair (c1, c2). Empty when no seed exists
  /// or a quartet is unresolvable.
  std::optional<std::pair<Candidate, Candidate>> tree_connection(int c1, int c2, const Candidate& e1,
                                                                 const Candidate& e2) {
    ++tel_.connection_calls;
    auto r1 = resolve_side(c1, e1, c2, e2);
    if (!r1) return std::nullopt;
    auto r2 = resolve_side(c2, e2, c1, *r1);
    if (!r2) return std::nullopt;
    return std::pair{*r1, *r2};
  }

  /// Estimated length of the path joining c1 and c2 given resolved candidates;
  /// empty on FAIL.
  std::optional<double> tree_distance(int c1, int c2, const Candidate& e1, const Candidate& e2) {
    const auto s1 = candidate_sides(e1);
    const auto s2 = candidate_sides(e2);
    std::optional<double> best;
    for (const auto& x : s1)
      for (const auto& y : s2) {
        const auto est = edge_length(x, y);
        if (est.ok && (!best || est.length < *best)) best = est.length;
      }
    (void)c1;
    (void)c2;
    return best;
  }

  /// ME over the representatives of two sides; FAIL when the quartet
  /// diameter exceeds M - eps.
  EdgeEstimate edge_length(const Side& left, const Side& right) {
    const std::array<int, 4> items{rep_item(left[0]), rep_item(left[1]), rep_item(right[0]), rep_item(right[1])};
    return edge_length_items(items);
  }

  EdgeEstimate edge_length_items(const std::array<int, 4>& items) {
    Dist4 D{};
    double diam = 0.0;
    for (int i = 0; i < 4; ++i)
      for (int j = i + 1; j < 4; ++j) {
        D[i][j] = D[j][i] = dist(items[i], items[j]);
        diam = std::max(diam, D[i][j]);
      }
    EdgeEstimate e;
    e.diameter = diam;
    if (!(diam <= params_.M - params_.epsilon)) return e;
    e.ok = true;
    e.length = me(D, Quartet{{0, 1}, {2, 3}, 0.0});
    return e;
  }

  /// Lengths of the quartet edges for joining candidate edges (or nodes).
  JoinPlan plan_join(int c1, int c2, const Candidate& e1, const Candidate& e2) {
    JoinPlan p;
    p.comp1 = c1;
    p.comp2 = c2;
    auto endpoints = [&](const Candidate& c, int& x, int& y) {
      if (c.singleton()) {
        x = c.center;
        y = -1;
      } else {
        const EdgeRec& e = edges_.at(c.edges.front());
        x = e.a;
        y = e.b;
      }
    };
    endpoints(e1, p.a, p.b);
    endpoints(e2, p.c, p.d);
    const DirClade A = p.b >= 0 ? DirClade{p.a, port_toward(p.a, p.b)} : DirClade{p.a, -1};
    const DirClade B = p.b >= 0 ? DirClade{p.b, port_toward(p.b, p.a)} : A;
    const DirClade C = p.d >= 0 ? DirClade{p.c, port_toward(p.c, p.d)} : DirClade{p.c, -1};
    const DirClade Dd = p.d >= 0 ? DirClade{p.d, port_toward(p.d, p.c)} : C;

    auto fail = [&](const char* what) {
      p.ok = false;
      p.detail = what;
      return p;
    };
    const auto mid = edge_length({A, B}, {C, Dd});
    if (!mid.ok) return fail("middle edge FAIL");
    p.middle = mid.length;
    // Pendant halves: the far side stands in for the whole other component.
    auto half = [&](const DirClade& x, int x_node, int y_node, const DirClade& sibling, const DirClade& far1,
                    const DirClade& far2) -> EdgeEstimate {
      const Side inner = outer_side(x_node, y_node, x);
      EdgeEstimate best;
      for (const DirClade& f : {far1, far2}) {
        const auto est = edge_length(inner, {sibling, f});
        if (est.ok && (!best.ok || est.diameter < best.diameter)) best = est;
      }
      return best;
    };
    if (p.b >= 0) {
      const auto au = half(A, p.a, p.b, B, C, Dd);
      const auto ub = half(B, p.b, p.a, A, C, Dd);
      if (!au.ok || !ub.ok) return fail("pendant edge FAIL");
      p.au = au.length;
      p.ub = ub.length;
    }
    if (p.d >= 0) {
      const auto cv = half(C, p.c, p.d, Dd, A, B);
      const auto vd = half(Dd, p.d, p.c, C, A, B);
      if (!cv.ok || !vd.ok) return fail("pendant edge FAIL");
      p.cv = cv.length;
      p.vd = vd.length;
    }
    p.ok = true;
    return p;
  }

  /// Representative item of a directed clade: the node itself when its slot
  /// is usable, else the closest usable descendant (fewest edges, then
  /// shortest estimated path, then smallest id).
  int rep_item(const DirClade& dc) {
    const int z = dc.node;
    if (nodes_.at(z).degree <= 1) return z;
    if (usable(z, dc.port)) return slot_item(z, dc.port);
    struct Cand {
      int node, port;
      double len;
    };
    std::vector<Cand> level, next;
    for (int q = 0; q < 3; ++q)
      if (q != dc.port) {
        const int x = nodes_[z].nbr[q];
        level.push_back({x, port_toward(x, z), edges_[nodes_[z].edge[q]].length});
      }
    while (!level.empty()) {
      const Cand* best = nullptr;
      for (const auto& c : level)
        if (nodes_[c.node].degree <= 1 || usable(c.node, c.port))
          if (!best || c.len < best->len || (c.len == best->len && c.node < best->node)) best = &c;
      if (best) return nodes_[best->node].degree <= 1 ? best->node : slot_item(best->node, best->port);
      next.clear();
      for (const auto& c : level)
        for (int q = 0; q < 3; ++q)
          if (q != c.port) {
            const int x = nodes_[c.node].nbr[q];
            next.push_back({x, port_toward(x, c.node), c.len + edges_[nodes_[c.node].edge[q]].length});
          }
      level.swap(next);
    }
    throw std::logic_error("rep_item: clade without a usable node");
  }

  /// Memoized empirical distance between two items (+inf when saturated).
  double dist(int x, int y) {
    if (x == y) return 0.0;
    if (x > y) std::swap(x, y);
    double& slot = cache_[static_cast<std::size_t>(x) * max_items_ + static_cast<std::size_t>(y)];
    if (std::isnan(slot)) {
      slot = ev_.distance(x, y);
      ++tel_.distance_evaluations;
    }
    return slot;
  }

  // -------------------------------------------------------------------------
  // Inspection.

  const ReconstructionParams& params() const noexcept { return params_; }
  const Telemetry& telemetry() const noexcept { return tel_; }
  const std::vector<RunRecord>& log() const noexcept { return log_; }
  int taxa() const noexcept { return n_; }

  std::size_t alive_components() const {
    std::size_t c = 0;
    for (const auto& comp : comps_) c += comp.alive;
    return c;
  }

  std::vector<int> component_ids() const {
    std::vector<int> out;
    for (int i = 0; i < static_cast<int>(comps_.size()); ++i)
      if (comps_[i].alive) out.push_back(i);
    return out;
  }

  int component_of(int node) const { return nodes_.at(node).comp; }
  const std::vector<int>& component_nodes(int c) const { return comps_.at(c).nodes; }
  const std::vector<int>& component_edges(int c) const { return comps_.at(c).edges; }
  int long_edge(int c) const { return comps_.at(c).long_edge; }

  Candidate all_edges(int c) const {
    const auto& comp = comps_.at(c);
    if (comp.edges.empty()) return Candidate{{}, comp.nodes.front()};
    Candidate out{comp.edges, -1};
    std::sort(out.edges.begin(), out.edges.end());
    return out;
  }

  int edge_between(int x, int y) const {
    for (int q = 0; q < 3; ++q)
      if (nodes_.at(x).nbr[q] == y) return nodes_[x].edge[q];
    return -1;
  }

  std::pair<int, int> edge_endpoints(int e) const { return {edges_.at(e).a, edges_.at(e).b}; }
  double edge_estimate(int e) const { return edges_.at(e).length; }
  int node_count() const noexcept { return static_cast<int>(nodes_.size()); }
  int degree(int node) const { return nodes_.at(node).degree; }
  int neighbor(int node, int port) const { return nodes_.at(node).nbr.at(port); }

  bool slot_filled(int node, int port) const { return nodes_.at(node).filled.at(port); }
  bool usable(int node, int port) const {
    const NodeRec& r = nodes_.at(node);
    if (r.degree <= 1) return true;
    if (port < 0 || !r.filled[port]) return false;
    return !contains_long(node, port);
  }

  int port_toward(int x, int y) const {
    for (int q = 0; q < 3; ++q)
      if (nodes_.at(x).nbr[q] == y) return q;
    throw std::logic_error("port_toward: nodes are not adjacent");
  }

  int slot_item(int node, int port) const { return n_ + 3 * (node - n_) + port; }

  /// Queue record of a pair, if any.
  struct PairView {
    double dist;
    Candidate first, second;  // for (lo, hi) order of the query
    bool in_queue;
    bool ever;
  };

  std::optional<PairView> pair(int x, int y) const {
    const int lo = std::min(x, y), hi = std::max(x, y);
    auto it = pairs_.find({lo, hi});
    if (it == pairs_.end()) return std::nullopt;
    const auto& r = it->second;
    if (x == lo) return PairView{r.dist, r.e_lo, r.e_hi, r.in_queue, r.ever};
    return PairView{r.dist, r.e_hi, r.e_lo, r.in_queue, r.ever};
  }

  std::size_t queue_size() const {
    std::size_t s = 0;
    for (const auto& [k, r] : pairs_) s += r.in_queue;
    return s;
  }

  /// Directly queue a pair (scripted scenarios).
  void put_pair(int x, int y, double d, const Candidate& ex, const Candidate& ey) {
    const int lo = std::min(x, y), hi = std::max(x, y);
    PairRec& r = pairs_[{lo, hi}];
    r.dist = d;
    r.e_lo = x == lo ? ex : ey;
    r.e_hi = x == lo ? ey : ex;
    r.in_queue = true;
    r.ever = true;
    r.version = ++version_counter_;
    partners_[lo].insert(hi);
    partners_[hi].insert(lo);
    heap_.push(HeapEntry{d, lo, hi, r.version});
  }

  /// Output forest with estimated lengths; leaves carry taxon labels.
  Forest forest() const {
    Forest f;
    for (const auto& comp : comps_) {
      if (!comp.alive) continue;
      Tree t;
      std::map<int, NodeId> local;
      std::vector<int> sorted = comp.nodes;
      std::sort(sorted.begin(), sorted.end());
      for (int v : sorted) local[v] = t.add_node(v < n_ ? labels_[v] : std::string());
      std::vector<int> es = comp.edges;
      std::sort(es.begin(), es.end());
      for (int e : es) t.add_edge(local[edges_[e].a], local[edges_[e].b], edges_[e].length);
      f.components.push_back(std::move(t));
    }
    return f;
  }

  std::string log_text() const {
    std::string out;
    char buf[256];
    for (const auto& r : log_) {
      std::snprintf(buf, sizeof buf, "iter=%zu pair=%d,%d key=%.12g decision=%s", r.iteration, r.comp1, r.comp2,
                    r.key, to_string(r.decision));
      out += buf;
      if (!r.detail.empty()) out += " detail=" + r.detail;
      if (r.boundary_equality) out += " boundary=1";
      out += '\n';
    }
    return out;
  }

 private:
  struct NodeRec {
    int comp = -1;
    int degree = 0;
    std::array<int, 3> nbr{-1, -1, -1};
    std::array<int, 3> edge{-1, -1, -1};
    std::array<int, 3> witness{-1, -1, -1};
    std::array<bool, 3> filled{false, false, false};
    int toward_long = -1;
  };
  struct EdgeRec {
    int a, b;
    double length;
    bool alive;
  };
  struct CompRec {
    std::vector<int> nodes;
    std::vector<int> edges;
    int long_edge = -1;
    bool alive = true;
  };
  struct PairRec {
    double dist = 0.0;
    Candidate e_lo, e_hi;
    bool in_queue = false;
    bool ever = false;
    std::uint64_t version = 0;
  };
  struct HeapEntry {
    double key;
    int lo, hi;
    std::uint64_t version;
    bool operator>(const HeapEntry& o) const {
      if (key != o.key) return key > o.key;
      if (lo != o.lo) return lo > o.lo;
      return hi > o.hi;
    }
  };

  bool contains_long(int node, int port) const {
    const NodeRec& r = nodes_[node];
    if (comps_[r.comp].long_edge < 0) return false;
    return r.toward_long != port;
  }

  /// The two clades hanging off x away from y, or x twice when x is a leaf.
  Side outer_side(int x, int y, const DirClade& self) const {
    if (nodes_[x].degree <= 1) return {self, self};
    const int px = port_toward(x, y);
    Side s{};
    int k = 0;
    for (int q = 0; q < 3; ++q)
      if (q != px) {
        const int z = nodes_[x].nbr[q];
        s[k++] = DirClade{z, port_toward(z, x)};
      }
    return s;
  }

  std::vector<Side> candidate_sides(const Candidate& c) const {
    if (c.singleton()) return {Side{DirClade{c.center, -1}, DirClade{c.center, -1}}};
    if (c.edges.size() == 1) {
      const EdgeRec& e = edges_.at(c.edges.front());
      return {Side{DirClade{e.a, port_toward(e.a, e.b)}, DirClade{e.b, port_toward(e.b, e.a)}}};
    }
    if (c.edges.size() == 3 && c.center >= 0 && nodes_[c.center].degree == 3) {
      const int v = c.center;
      std::vector<Side> out;
      for (int i = 0; i < 3; ++i) {
        Side s{};
        int k = 0;
        for (int q = 0; q < 3; ++q)
          if (q != i) {
            const int z = nodes_[v].nbr[q];
            s[k++] = DirClade{z, port_toward(z, v)};
          }
        out.push_back(s);
      }
      return out;
    }
    return {};
  }

  std::vector<int> vertex_set(const Candidate& c) const {
    if (c.singleton()) return {c.center};
    std::vector<int> out;
    for (int e : c.edges) {
      out.push_back(edges_.at(e).a);
      out.push_back(edges_.at(e).b);
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
  }

  /// Items representing proper clades rooted at u (all usable slots, or the leaf).
  std::vector<int> rooted_items(int u) const {
    if (nodes_[u].degree <= 1) return {u};
    std::vector<int> out;
    for (int q = 0; q < 3; ++q)
      if (usable(u, q)) out.push_back(slot_item(u, q));
    return out;
  }

  struct Seed {
    int u;
    int item_other;
  };

  /// Seed quartet search, scanning (u, u_other, slot) in canonical order.
  std::optional<Seed> find_seed(const Candidate& mine, const Candidate& other) {
    const double limit = params_.M / 2.0 + params_.epsilon;
    const auto vmine = vertex_set(mine);
    const auto vother = vertex_set(other);
    for (int u : vmine) {
      std::vector<int> near_items;
      if (nodes_[u].degree <= 1) {
        near_items.push_back(u);
      } else {
        for (int q = 0; q < 3; ++q) {
          const int z = nodes_[u].nbr[q];
          const int pz = port_toward(z, u);
          if (nodes_[z].degree <= 1)
            near_items.push_back(z);
          else if (usable(z, pz))
            near_items.push_back(slot_item(z, pz));
        }
        if (near_items.size() < 2) continue;
      }
      const std::size_t needed = nodes_[u].degree <= 1 ? 1 : 2;
      for (int w : vother)
        for (int item : rooted_items(w)) {
          std::size_t close = 0;
          for (int x : near_items)
            if (dist(x, item) < limit) ++close;
          if (close >= needed) return Seed{u, item};
        }
    }
    return std::nullopt;
  }

  /// Seed search and walk for one side.
  std::optional<Candidate> resolve_side(int comp, const Candidate& mine, int other_comp, const Candidate& other) {
    (void)other_comp;
    const auto seed = find_seed(mine, other);
    if (!seed) return std::nullopt;
    if (mine.singleton() || mine.edges.size() == 1) return mine;

    // Root the component at the seed; count candidate edges per subtree.
    const auto& cn = comps_[comp].nodes;
    const int m = static_cast<int>(cn.size());
    for (int i = 0; i < m; ++i) local_[cn[i]] = i;
    std::vector<int> parent(m, -1), tin(m), tout(m), order;
    order.reserve(m);
    {
      std::vector<std::pair<int, int>> stack{{seed->u, -1}};
      int clock = 0;
      std::vector<int> child_iter(m, 0);
      tin[local_[seed->u]] = clock++;
      order.push_back(seed->u);
      while (!stack.empty()) {
        auto& [x, par] = stack.back();
        const int lx = local_[x];
        if (child_iter[lx] < 3) {
          const int q = child_iter[lx]++;
          const int y = nodes_[x].nbr[q];
          if (y < 0 || y == par) continue;
          const int ly = local_[y];
          parent[ly] = x;
          tin[ly] = clock++;
          order.push_back(y);
          stack.emplace_back(y, x);
        } else {
          tout[lx] = clock - 1;
          stack.pop_back();
        }
      }
    }
    std::vector<int> cnt(m, 0);
    auto child_of = [&](int e) {
      const EdgeRec& r = edges_[e];
      return parent[local_[r.a]] == r.b ? r.a : r.b;
    };
    for (int e : mine.edges) ++cnt[local_[child_of(e)]];
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      const int lx = local_[*it];
      if (parent[lx] >= 0) cnt[local_[parent[lx]]] += cnt[lx];
    }
    auto single_in = [&](int x) -> Candidate {
      const int lx = local_[x];
      for (int e : mine.edges) {
        const int lc = local_[child_of(e)];
        if (tin[lx] <= tin[lc] && tin[lc] <= tout[lx]) return Candidate{{e}, -1};
      }
      throw std::logic_error("resolve_side: candidate count mismatch");
    };

    int cur = seed->u, prev = -1;
    int count = static_cast<int>(mine.edges.size());
    if (nodes_[cur].degree <= 1) {
      const int x = nodes_[cur].nbr[0];
      count = cnt[local_[x]];
      prev = cur;
      cur = x;
      if (count == 0) return std::nullopt;
      if (count == 1) return single_in(cur);
    }
    while (count > 1) {
      std::array<int, 4> items{};
      for (int q = 0; q < 3; ++q) {
        const int z = nodes_[cur].nbr[q];
        items[q] = rep_item(DirClade{z, port_toward(z, cur)});
      }
      items[3] = seed->item_other;
      Dist4 D{};
      for (int i = 0; i < 4; ++i)
        for (int j = i + 1; j < 4; ++j) D[i][j] = D[j][i] = dist(items[i], items[j]);
      const auto f = fpm(D);
      if (f.status == FpmResult::Status::saturated) return std::nullopt;
      if (f.status == FpmResult::Status::degenerate || me(D, f.quartet) < params_.epsilon)
        return incident(cur);
      const auto& q = f.quartet;
      int xi;
      if (q.left[0] == 3)
        xi = q.left[1];
      else if (q.left[1] == 3)
        xi = q.left[0];
      else if (q.right[0] == 3)
        xi = q.right[1];
      else
        xi = q.right[0];
      const int x = nodes_[cur].nbr[xi];
      if (x == prev) {
        const int e = nodes_[cur].edge[xi];
        if (std::find(mine.edges.begin(), mine.edges.end(), e) == mine.edges.end()) return std::nullopt;
        return Candidate{{e}, -1};
      }
      count = cnt[local_[x]];
      prev = cur;
      cur = x;
      if (count == 0) return std::nullopt;
      if (count == 1) return single_in(cur);
    }
    return std::nullopt;
  }

  Candidate incident(int v) const {
    Candidate c;
    c.center = v;
    for (int q = 0; q < 3; ++q)
      if (nodes_[v].edge[q] >= 0) c.edges.push_back(nodes_[v].edge[q]);
    std::sort(c.edges.begin(), c.edges.end());
    return c;
  }

  void record(int c1, int c2, double key, Decision d, std::string detail = {}, bool boundary = false) {
    log_.push_back(RunRecord{tel_.iterations, c1, c2, key, d, std::move(detail), boundary});
  }

  void process(int c1, int c2, PairRec& rec) {
    ++tel_.iterations;
    const Candidate e1 = rec.e_lo, e2 = rec.e_hi;
    const double key = rec.dist;
    if (e1.edges.size() > 1 || e2.edges.size() > 1) {
      record(c1, c2, key, Decision::unresolved);
      return;
    }
    JoinPlan plan = plan_join(c1, c2, e1, e2);
    if (!plan.ok) {
      record(c1, c2, key, Decision::length_fail, plan.detail);
      return;
    }
    const auto lengths = plan.lengths();
    const auto cc = check_c1_c2(std::span<const double>(lengths), params_.epsilon);
    if (!cc.accept) {
      record(c1, c2, key, cc.reason);
      return;
    }
    // C2 over the whole new tree: old long edges count too.
    {
      int long_count = cc.long_edges;
      const double thr = kLambda0 - 2.0 * params_.epsilon;
      for (int c : {c1, c2}) {
        const int le = comps_[c].long_edge;
        if (le < 0) continue;
        const bool replaced = (c == c1 && plan.b >= 0 && e1.edges.front() == le) ||
                              (c == c2 && plan.d >= 0 && e2.edges.front() == le);
        if (!replaced && edges_[le].length >= thr) ++long_count;
      }
      if (long_count > 1) {
        record(c1, c2, key, Decision::reject_c2, "second long edge");
        return;
      }
    }
    // Triangle guard over common partners.
    bool boundary = false;
    const auto common = common_partners(c1, c2);
    for (int k : common) {
      const auto p1 = pair(c1, k);
      const auto p2 = pair(k, c2);
      if (!p1 || !p2 || !p1->ever || !p2->ever) continue;
      const double lhs = plan.middle + 3.0 * params_.epsilon;
      const double rhs = p1->dist + p2->dist;
      if (lhs > rhs) {
        record(c1, c2, key, Decision::reject_triangle, "via " + std::to_string(k));
        return;
      }
      if (lhs == rhs) boundary = true;
    }
    commit(plan, e1, e2);
    record(c1, c2, key, Decision::merged, {}, boundary);
  }

  std::vector<int> common_partners(int c1, int c2) const {
    std::vector<int> out;
    for (int k : partners_[c1])
      if (k != c2 && comps_[k].alive && partners_[c2].count(k)) out.push_back(k);
    return out;
  }

  int new_node() {
    const int id = static_cast<int>(nodes_.size());
    if (id >= 2 * n_) throw std::logic_error("tree_merge: node budget exceeded");
    nodes_.push_back(NodeRec{});
    return id;
  }

  int new_edge(int x, int px, int y, int py, double len) {
    const int e = static_cast<int>(edges_.size());
    edges_.push_back(EdgeRec{x, y, len, true});
    nodes_[x].nbr[px] = y;
    nodes_[x].edge[px] = e;
    nodes_[y].nbr[py] = x;
    nodes_[y].edge[py] = e;
    return e;
  }

  /// A leaf in the direction (x away from its port px), or x itself.
  int witness_away(int x, int px) const {
    const NodeRec& r = nodes_[x];
    if (r.degree <= 1) return x;
    for (int q = 0; q < 3; ++q)
      if (q != px) return r.witness[q];
    return x;
  }

  struct Attach {
    int node;          // the attachment node (new u, or the singleton)
    std::vector<int> new_edges;
    int dead_edge = -1;
    int half_a = -1, half_b = -1;
  };

  /// Subdivide edge (x, y) with a new node whose third port is left open.
  Attach subdivide(int x, int y, double lx, double ly) {
    Attach at;
    const int px = port_toward(x, y), py = port_toward(y, x);
    at.dead_edge = nodes_[x].edge[px];
    edges_[at.dead_edge].alive = false;
    const int u = new_node();
    nodes_[u].degree = 3;
    nodes_[u].witness[0] = witness_away(x, px);
    nodes_[u].witness[1] = witness_away(y, py);
    at.half_a = new_edge(x, px, u, 0, lx);
    at.half_b = new_edge(u, 1, y, py, ly);
    at.node = u;
    at.new_edges = {at.half_a, at.half_b};
    return at;
  }

  void commit(const JoinPlan& p, const Candidate& e1, const Candidate& e2) {
    (void)e1;
    (void)e2;
    ++tel_.merges;
    const int c1 = p.comp1, c2 = p.comp2;
    const int t1_leaf = p.a, t2_leaf = p.c;
    // Witness leaves on each side before rewiring.
    const int leaf_in_t1 = p.b >= 0 ? witness_away(p.a, port_toward(p.a, p.b)) : t1_leaf;
    const int leaf_in_t2 = p.d >= 0 ? witness_away(p.c, port_toward(p.c, p.d)) : t2_leaf;

    Attach s1, s2;
    if (p.b >= 0) {
      s1 = subdivide(p.a, p.b, p.au, p.ub);
    } else {
      s1.node = p.a;
      nodes_[p.a].degree = 1;
    }
    if (p.d >= 0) {
      s2 = subdivide(p.c, p.d, p.cv, p.vd);
    } else {
      s2.node = p.c;
      nodes_[p.c].degree = 1;
    }
    const int u = s1.node, v = s2.node;
    const int pu = p.b >= 0 ? 2 : 0;
    const int pv = p.d >= 0 ? 2 : 0;
    nodes_[u].witness[pu] = leaf_in_t2;
    nodes_[v].witness[pv] = leaf_in_t1;
    const int mid = new_edge(u, pu, v, pv, p.middle);

    const int c = static_cast<int>(comps_.size());
    CompRec comp;
    for (int k : {c1, c2}) {
      comps_[k].alive = false;
      comp.nodes.insert(comp.nodes.end(), comps_[k].nodes.begin(), comps_[k].nodes.end());
      for (int e : comps_[k].edges)
        if (edges_[e].alive) comp.edges.push_back(e);
    }
    if (p.b >= 0) comp.nodes.push_back(u);
    if (p.d >= 0) comp.nodes.push_back(v);
    comp.edges.insert(comp.edges.end(), s1.new_edges.begin(), s1.new_edges.end());
    comp.edges.insert(comp.edges.end(), s2.new_edges.begin(), s2.new_edges.end());
    comp.edges.push_back(mid);
    comps_.push_back(std::move(comp));
    partners_.emplace_back();
    for (int x : comps_[c].nodes) nodes_[x].comp = c;

    mark_long_edge(c);
    fill_proper_slots(c);

    UpdateContext ctx{c1, c2, c, u, v, e1, e2, s1, s2, mid};
    update_queue(ctx);
  }

  void mark_long_edge(int c) {
    CompRec& comp = comps_[c];
    comp.long_edge = -1;
    const double thr = kLambda0 - 2.0 * params_.epsilon;
    for (int e : comp.edges)
      if (edges_[e].length >= thr) {
        if (comp.long_edge >= 0) throw std::logic_error("component with two long edges");
        comp.long_edge = e;
      }
    for (int x : comp.nodes) nodes_[x].toward_long = -1;
    if (comp.long_edge < 0) return;
    const EdgeRec& le = edges_[comp.long_edge];
    std::vector<std::pair<int, int>> stack;
    for (int end : {le.a, le.b}) {
      const int other = end == le.a ? le.b : le.a;
      nodes_[end].toward_long = port_toward(end, other);
      stack.emplace_back(end, other);
    }
    while (!stack.empty()) {
      const auto [x, from] = stack.back();
      stack.pop_back();
      for (int q = 0; q < 3; ++q) {
        const int y = nodes_[x].nbr[q];
        if (y < 0 || y == from) continue;
        nodes_[y].toward_long = port_toward(y, x);
        stack.emplace_back(y, x);
      }
    }
  }

  void fill_proper_slots(int c) {
    std::vector<int> internal;
    for (int x : comps_[c].nodes)
      if (nodes_[x].degree == 3) internal.push_back(x);
    std::sort(internal.begin(), internal.end());
    for (int x : internal)
      for (int q = 0; q < 3; ++q)
        if (!nodes_[x].filled[q] && !contains_long(x, q)) learn_slot(x, q);
  }

  /// Weighted majority over the depth-d frontier of the clade (w away from p);
  /// internal frontier nodes contribute their own (recursively learned) slot.
  void learn_slot(int w, int p) {
    if (nodes_[w].filled[p]) throw std::logic_error("learned slot would be rewritten");
    const int d = params_.d;
    std::vector<WeightedRef> frontier;
    struct Item {
      int node, port, depth;
    };
    std::vector<Item> stack;
    for (int q = 2; q >= 0; --q)
      if (q != p) {
        const int z = nodes_[w].nbr[q];
        stack.push_back({z, port_toward(z, w), 1});
      }
    while (!stack.empty()) {
      const Item it = stack.back();
      stack.pop_back();
      const NodeRec& r = nodes_[it.node];
      if (r.degree <= 1) {
        frontier.push_back({it.node, std::uint64_t{1} << (d - it.depth)});
      } else if (it.depth == d) {
        if (!r.filled[it.port]) learn_slot(it.node, it.port);
        frontier.push_back({slot_item(it.node, it.port), 1});
      } else {
        for (int q = 2; q >= 0; --q)
          if (q != it.port) {
            const int z = r.nbr[q];
            stack.push_back({z, port_toward(z, it.node), it.depth + 1});
          }
      }
    }
    ev_.learn(slot_item(w, p), frontier, nodes_[w].witness);
    nodes_[w].filled[p] = true;
    ++tel_.learned_sequences;
  }

  struct UpdateContext {
    int c1, c2, cnew, u, v;
    Candidate e1, e2;
    Attach s1, s2;
    int mid;
  };

  Candidate map_into_new(const Candidate& c, const UpdateContext& x) const {
    if (c.singleton()) return incident(c.center);
    Candidate out;
    out.center = c.center;
    for (int e : c.edges) {
      if (e == x.s1.dead_edge) {
        out.edges.push_back(x.s1.half_a);
        out.edges.push_back(x.s1.half_b);
      } else if (e == x.s2.dead_edge) {
        out.edges.push_back(x.s2.half_a);
        out.edges.push_back(x.s2.half_b);
      } else {
        out.edges.push_back(e);
      }
    }
    std::sort(out.edges.begin(), out.edges.end());
    out.edges.erase(std::unique(out.edges.begin(), out.edges.end()), out.edges.end());
    return out;
  }

  Candidate quartet_edges(const UpdateContext& x) const {
    Candidate q;
    q.edges = x.s1.new_edges;
    q.edges.insert(q.edges.end(), x.s2.new_edges.begin(), x.s2.new_edges.end());
    q.edges.push_back(x.mid);
    std::sort(q.edges.begin(), q.edges.end());
    return q;
  }

  static Candidate unite(const Candidate& x, const Candidate& y) {
    if (x.singleton() && y.singleton() && x.center == y.center) return x;
    Candidate out;
    out.edges = x.edges;
    out.edges.insert(out.edges.end(), y.edges.begin(), y.edges.end());
    std::sort(out.edges.begin(), out.edges.end());
    out.edges.erase(std::unique(out.edges.begin(), out.edges.end()), out.edges.end());
    if (out.edges.empty()) out.center = x.center;
    return out;
  }

  bool communicates(const UpdateContext& x, int k) {
    const double limit = params_.M / 3.0 - params_.epsilon;
    std::vector<int> mine;
    for (int node : {x.u, x.v})
      for (int item : rooted_items(node)) mine.push_back(item);
    for (int t : comps_[k].nodes)
      for (int item : rooted_items(t))
        for (int a : mine)
          if (dist(a, item) < limit) return true;
    return false;
  }

  /// Queue maintenance after a merge.
  void update_queue(const UpdateContext& x) {
    const int c1 = x.c1, c2 = x.c2, cn = x.cnew;
    std::set<int> others;
    for (int k = 0; k < static_cast<int>(comps_.size()); ++k)
      if (comps_[k].alive && k != cn) others.insert(k);
    for (int k : others) {
      const auto r1 = pair(c1, k);
      const auto r2 = pair(c2, k);
      std::optional<std::pair<Candidate, Candidate>> conn;
      if ((r1 && r1->ever) || (r2 && r2->ever)) {
        const bool known1 = r1 && r1->in_queue;
        const bool known2 = r2 && r2->in_queue;
        Candidate ek;
        if (known1 && known2)
          ek = unite(r1->second, r2->second);
        else if (known1)
          ek = r1->second;
        else if (known2)
          ek = r2->second;
        else
          ek = all_edges(k);
        Candidate enew;
        if (known1 && !(r1->first == x.e1))
          enew = map_into_new(r1->first, x);
        else if (known2 && !(r2->first == x.e2))
          enew = map_into_new(r2->first, x);
        else if (known1 && known2)
          enew = quartet_edges(x);
        else if (known1)
          enew = unite(quartet_edges(x), map_into_new(side_edges(c2, x), x));
        else if (known2)
          enew = unite(quartet_edges(x), map_into_new(side_edges(c1, x), x));
        else
          enew = all_edges(cn);
        conn = tree_connection(cn, k, enew, ek);
      } else if (communicates(x, k)) {
        conn = tree_connection(cn, k, all_edges(cn), all_edges(k));
      }
      drop_pair(c1, k);
      drop_pair(c2, k);
      if (conn) {
        const auto d = tree_distance(cn, k, conn->first, conn->second);
        if (d) put_pair(cn, k, *d, conn->first, conn->second);
      }
    }
    drop_pair(c1, c2);
  }

  /// E(T) of a dead component, expressed in its old edge ids.
  Candidate side_edges(int c, const UpdateContext&) const {
    const auto& comp = comps_[c];
    if (comp.edges.empty()) return Candidate{{}, comp.nodes.front()};
    Candidate out{comp.edges, -1};
    std::sort(out.edges.begin(), out.edges.end());
    return out;
  }

  void drop_pair(int x, int y) {
    const int lo = std::min(x, y), hi = std::max(x, y);
    pairs_.erase({lo, hi});
    partners_[lo].erase(hi);
    partners_[hi].erase(lo);
  }

  Evidence& ev_;
  ReconstructionParams params_;
  std::vector<std::string> labels_;
  int n_ = 0;
  bool initialized_ = false;

  std::vector<NodeRec> nodes_;
  std::vector<EdgeRec> edges_;
  std::vector<CompRec> comps_;
  std::vector<std::set<int>> partners_;
  std::map<std::pair<int, int>, PairRec> pairs_;
  std::priority_queue<HeapEntry, std::vector<HeapEntry>, std::greater<HeapEntry>> heap_;
  std::uint64_t version_counter_ = 0;

  std::size_t max_items_ = 0;
  std::vector<double> cache_;
  std::vector<int> local_;

  Telemetry tel_;
  std::vector<RunRecord> log_;
};

/// Convenience: run the merge to completion.
template <class Evidence>
Forest tree_merge(Evidence& evidence, const ReconstructionParams& params, std::vector<std::string> labels) {
  TreeMerge<Evidence> tm(evidence, params, std::move(labels));
  return tm.run();
}

}  // namespace treemerge
