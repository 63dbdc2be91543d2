#pragma once

// Single reconstruction trials and sweep aggregation shared by the CLI and
// the acceptance harness.

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "treemerge/character_matrix.hpp"
#include "treemerge/distances.hpp"
#include "treemerge/evidence.hpp"
#include "treemerge/forest_merge.hpp"
#include "treemerge/newick.hpp"
#include "treemerge/random_tree.hpp"
#include "treemerge/scoring.hpp"
#include "treemerge/simulator.hpp"

namespace treemerge {

enum class ModelKind { cfn, jc, k3st };
enum class EvidenceKind { sequences, oracle };

inline ModelKind parse_model(const std::string& s) {
  if (s == "cfn") return ModelKind::cfn;
  if (s == "jc") return ModelKind::jc;
  if (s == "k3st") return ModelKind::k3st;
  throw std::invalid_argument("unknown model '" + s + "' (cfn, jc, k3st)");
}

inline const char* to_string(ModelKind m) {
  switch (m) {
    case ModelKind::cfn: return "cfn";
    case ModelKind::jc: return "jc";
    case ModelKind::k3st: return "k3st";
  }
  return "cfn";
}

inline GroupModel group_model(const Tree& t, ModelKind m) {
  if (m == ModelKind::jc) return GroupModel::jc_matching(t);
  if (m == ModelKind::k3st) return GroupModel::k3st_matching(t);
  throw std::invalid_argument("group_model: cfn is not a group model");
}

/// Rows of a group matrix restricted to labeled leaves, NodeId order.
inline GroupMatrix leaf_group_rows(const GroupMatrix& full, const Tree& tree) {
  GroupMatrix out;
  out.sites = full.sites;
  for (NodeId v = 0; v < static_cast<NodeId>(tree.node_count()); ++v)
    if (tree.is_leaf(v) && tree.is_labeled(v)) {
      out.labels.push_back(tree.label(v));
      out.rows.push_back(full.rows.at(v));
    }
  return out;
}

/// Binary leaf characters; group models are sampled then projected by phi.
inline CharacterMatrix simulate_leaves(const Tree& tree, ModelKind m, std::size_t sites, std::uint64_t seed) {
  if (m == ModelKind::cfn) return leaf_rows(sample_cfn(CFNModel(tree), sites, seed), tree);
  const auto gm = group_model(tree, m);
  return project_group(leaf_group_rows(sample_group(gm, sites, seed), tree), gm.phi);
}

struct TrialSpec {
  std::size_t taxa = 8;
  std::size_t sites = 1000;
  double edge_min = 0.05;
  double edge_max = 0.1;
  ModelKind model = ModelKind::cfn;
  EvidenceKind evidence = EvidenceKind::sequences;
  double epsilon = 0.01;
  int d = 3;
  double beta = 0.0;
  double xi = 0.1;
  std::uint64_t seed = 0;
};

struct TrialResult {
  bool error = false;
  std::string message;
  ForestScore score;
  Telemetry telemetry;
  double seconds = 0.0;  // reconstruction only
  std::string forest;
};

/// Draws a tree and data from `spec.seed` and reconstructs.
inline TrialResult run_trial(const TrialSpec& spec) {
  TrialResult r;
  try {
    const Tree truth = random_binary_tree(spec.taxa, spec.edge_min, spec.edge_max, spec.seed);
    const auto params =
        ReconstructionParams::make(spec.epsilon, spec.d, spec.beta, spec.xi, spec.sites, spec.taxa);
    std::vector<std::string> labels;
    for (std::size_t i = 0; i < spec.taxa; ++i) labels.push_back(taxon_name(i));
    Forest f;
    auto finish = [&](auto& tm, auto t0) {
      f = tm.run();
      r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      r.telemetry = tm.telemetry();
    };
    if (spec.evidence == EvidenceKind::oracle) {
      auto ev = AdditiveOracleEvidence::from_labels(truth, labels);
      const auto t0 = std::chrono::steady_clock::now();
      TreeMerge<AdditiveOracleEvidence> tm(ev, params, labels);
      finish(tm, t0);
    } else {
      const auto data = simulate_leaves(truth, spec.model, spec.sites, derive_key(spec.seed, {0xDA7A}));
      const auto t0 = std::chrono::steady_clock::now();
      SequenceEvidence ev(data, derive_key(spec.seed, {0xC014}));
      TreeMerge<SequenceEvidence> tm(ev, params, data.labels);
      finish(tm, t0);
    }
    r.score = score_forest(f, truth, spec.epsilon);
    r.forest = to_newick(f);
  } catch (const std::exception& e) {
    r.error = true;
    r.message = e.what();
  }
  return r;
}

/// Runs `count` trials with specs from `make(i)`, on up to `jobs` threads.
/// Results are indexed by trial, so aggregation does not depend on timing.
template <class Make>
std::vector<TrialResult> run_trials(std::size_t count, Make make, unsigned jobs = 1) {
  std::vector<TrialResult> out(count);
  if (jobs <= 1 || count <= 1) {
    for (std::size_t i = 0; i < count; ++i) out[i] = run_trial(make(i));
    return out;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (unsigned j = 0; j < jobs && j < count; ++j)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) out[i] = run_trial(make(i));
    });
  for (auto& th : pool) th.join();
  return out;
}

/// Least-squares slope of log(y) against log(x).
inline double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("loglog_slope: need two or more points");
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const double k = static_cast<double>(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double lx = std::log(x[i]), ly = std::log(y[i]);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  const double den = k * sxx - sx * sx;
  if (den == 0.0) throw std::invalid_argument("loglog_slope: x values must differ");
  return (k * sxy - sx * sy) / den;
}

}  // namespace treemerge
