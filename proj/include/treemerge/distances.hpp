#pragma once

// Empirical distances, FPM/ME on four points, the concentration bound and
// calibration of (epsilon, d, beta, M) from (N, n, xi).

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "treemerge/ancestral.hpp"
#include "treemerge/character_matrix.hpp"
#include "treemerge/phylo_model.hpp"

namespace treemerge {

/// D-hat between two sequences. Saturated means the disagreement fraction is
/// at least 1/2; it compares as +inf.
struct EmpiricalDistance {
  double value = 0.0;
  bool saturated = false;
  std::size_t sites = 0;
  std::size_t disagreements = 0;

  double as_threshold() const noexcept { return saturated ? kInfinity : value; }
};

inline EmpiricalDistance distance_from_counts(std::size_t disagreements, std::size_t sites) {
  if (sites == 0) throw std::invalid_argument("empirical distance over zero sites");
  EmpiricalDistance d;
  d.sites = sites;
  d.disagreements = disagreements;
  if (2 * disagreements >= sites) {
    d.saturated = true;
    d.value = kInfinity;
  } else {
    d.value = -0.5 * std::log1p(-2.0 * static_cast<double>(disagreements) / static_cast<double>(sites));
  }
  return d;
}

inline EmpiricalDistance empirical_distance(const Sequence& u, const Sequence& v) {
  return distance_from_counts(disagreements(u, v), u.size());
}

struct FpmResult {
  enum class Status { ok, saturated, degenerate };
  Status status = Status::ok;
  Quartet quartet{};
  double slack = 0.0;

  bool ok() const noexcept { return status == Status::ok; }
};

/// Strict-minimum four-point method. Non-finite input is unresolvable.
inline FpmResult fpm(const Dist4& d) {
  FpmResult r;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j)
      if (!std::isfinite(d[i][j])) {
        r.status = FpmResult::Status::saturated;
        return r;
      }
  const auto fp = four_point_check(d);
  r.quartet = fp.grouping;
  r.slack = fp.slack;
  r.status = fp.degenerate ? FpmResult::Status::degenerate : FpmResult::Status::ok;
  return r;
}

/// Middle-path estimate (D_ac + D_bd + D_bc + D_ad - 2D_ab - 2D_cd)/4 for q = (a,b|c,d).
inline double me(const Dist4& d, const Quartet& q) {
  const int a = q.left[0], b = q.left[1], c = q.right[0], dd = q.right[1];
  const double s = d[a][c] + d[b][dd] + d[b][c] + d[a][dd] - 2.0 * d[a][b] - 2.0 * d[c][dd];
  if (!std::isfinite(s)) throw std::domain_error("ME: saturated distance");
  return s / 4.0;
}

/// 1.5 exp(-(1 - e^{-eps})^2 e^{-4M} N / 8).
inline double failure_bound(double M, double eps, double sites) {
  if (!(M >= 0.0) || !std::isfinite(M)) throw std::domain_error("failure_bound: M must be finite and >= 0");
  if (!(eps > 0.0) || !std::isfinite(eps)) throw std::domain_error("failure_bound: eps must be positive");
  if (!(sites >= 0.0)) throw std::domain_error("failure_bound: N must be >= 0");
  const double g = -std::expm1(-eps);
  return 1.5 * std::exp(-g * g * std::exp(-4.0 * M) * sites / 8.0);
}

/// The same bound in probability coordinates, 1.5 exp(-(1 - sqrt(1-2z))^2 (1-2y)^2 N / 8).
inline double failure_bound_yz(double y, double z, double sites) {
  if (!(y >= 0.0 && y < 0.5) || !(z > 0.0 && z < 0.5))
    throw std::domain_error("failure_bound_yz: y, z must lie in [0, 1/2)");
  if (!(sites >= 0.0)) throw std::domain_error("failure_bound_yz: N must be >= 0");
  const double a = 1.0 - std::sqrt(1.0 - 2.0 * z);
  const double b = 1.0 - 2.0 * y;
  return 1.5 * std::exp(-a * a * b * b * sites / 8.0);
}

/// Smallest N with failure_bound(M, eps, N) < xi / (16 n^2).
inline double minimal_sites(double M, double eps, double xi, std::size_t n) {
  const double g = -std::expm1(-eps);
  const double nn = static_cast<double>(n);
  const double need = 8.0 * std::log(24.0 * nn * nn / xi) / (g * g * std::exp(-4.0 * M));
  return std::floor(need) + 1.0;
}

struct ReconstructionParams {
  double epsilon = 0.0;
  double lambda_max = 0.0;
  int d = 1;
  double beta = 0.0;
  double M = 0.0;
  double xi = 0.1;
  std::size_t N = 0;
  std::size_t n = 0;

  /// Derives lambda_max and M from (epsilon, beta).
  static ReconstructionParams make(double epsilon, int d, double beta, double xi, std::size_t N, std::size_t n) {
    if (!(epsilon > 0.0) || !(epsilon < kLambda0)) throw std::domain_error("params: epsilon must lie in (0, lambda0)");
    if (d < 1) throw std::domain_error("params: d must be >= 1");
    if (!(beta >= 0.0) || !std::isfinite(beta)) throw std::domain_error("params: beta must be finite and >= 0");
    if (!(xi > 0.0 && xi < 1.0)) throw std::domain_error("params: xi must lie in (0, 1)");
    ReconstructionParams p;
    p.epsilon = epsilon;
    p.lambda_max = kLambda0 - epsilon;
    p.d = d;
    p.beta = beta;
    p.M = 24.0 * kLambda0 + 6.0 * beta + 12.0 * epsilon;
    p.xi = xi;
    p.N = N;
    p.n = n;
    return p;
  }

  double bound() const { return failure_bound(M, epsilon, static_cast<double>(N)); }

  double budget() const {
    const double nn = static_cast<double>(n);
    return xi / (16.0 * nn * nn);
  }

  bool satisfies_sample_bound() const { return bound() < budget(); }

  std::string to_kv() const {
    char buf[512];
    std::snprintf(buf, sizeof buf,
                  "epsilon=%.17g\nlambda_max=%.17g\nd=%d\nbeta=%.17g\nM=%.17g\nxi=%.17g\nN=%zu\nn=%zu\n",
                  epsilon, lambda_max, d, beta, M, xi, N, n);
    return buf;
  }

  static ReconstructionParams from_kv(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
      if (line.empty() || line[0] == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw std::runtime_error("params: malformed line '" + line + "'");
      kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    auto need = [&](const char* k) -> const std::string& {
      auto it = kv.find(k);
      if (it == kv.end()) throw std::runtime_error(std::string("params: missing key ") + k);
      return it->second;
    };
    auto p = make(std::stod(need("epsilon")), std::stoi(need("d")), std::stod(need("beta")),
                  std::stod(need("xi")), std::stoull(need("N")), std::stoull(need("n")));
    if (kv.count("M") && std::abs(std::stod(kv["M"]) - p.M) > 1e-9)
      throw std::runtime_error("params: M disagrees with 24 lambda0 + 6 beta + 12 epsilon");
    return p;
  }
};

inline constexpr int kEpsilonGridPoints = 512;
inline constexpr double kEpsilonGridMin = 1e-4;
inline constexpr double kEpsilonGridMax = 0.9 * kLambda0;

inline std::vector<double> epsilon_grid() {
  std::vector<double> g(kEpsilonGridPoints);
  const double lo = std::log(kEpsilonGridMin), hi = std::log(kEpsilonGridMax);
  for (int i = 0; i < kEpsilonGridPoints; ++i) g[i] = std::exp(lo + (hi - lo) * i / (kEpsilonGridPoints - 1));
  return g;
}

struct CalibrationResult {
  bool feasible = false;
  ReconstructionParams params;  // valid when feasible
  // When infeasible: the largest grid epsilon with a usable (d, beta), and the
  // smallest N that would satisfy the bound there.
  double fallback_epsilon = 0.0;
  double minimal_N = 0.0;
  std::string reason;
};

/// Smallest grid epsilon meeting the sample bound with d (default or given)
/// and beta = calibrate_beta(lambda0 - epsilon, d).
inline CalibrationResult calibrate(std::size_t N, std::size_t n, double xi, std::optional<int> d_choice = {}) {
  if (N < 1 || n < 1) throw std::invalid_argument("calibrate: N and n must be positive");
  if (!(xi > 0.0 && xi < 1.0)) throw std::invalid_argument("calibrate: xi must lie in (0, 1)");
  CalibrationResult out;
  std::optional<ReconstructionParams> last_usable;
  for (double eps : epsilon_grid()) {
    const double lambda_max = kLambda0 - eps;
    const std::optional<int> d = d_choice ? d_choice : default_depth(lambda_max);
    if (!d) continue;
    BetaCalibration bc;
    try {
      bc = calibrate_beta(lambda_max, *d);
    } catch (const InfeasibleDepth&) {
      continue;
    }
    auto p = ReconstructionParams::make(eps, *d, bc.beta, xi, N, n);
    last_usable = p;
    if (p.satisfies_sample_bound()) {
      out.feasible = true;
      out.params = p;
      return out;
    }
  }
  if (!last_usable) {
    out.reason = "no grid epsilon admits a contracting majority depth";
    return out;
  }
  out.fallback_epsilon = last_usable->epsilon;
  out.minimal_N = minimal_sites(last_usable->M, last_usable->epsilon, xi, n);
  out.params = *last_usable;
  char buf[256];
  std::snprintf(buf, sizeof buf, "N=%zu too small; epsilon=%.6g needs N >= %.6g", N, out.fallback_epsilon,
                out.minimal_N);
  out.reason = buf;
  return out;
}

}  // namespace treemerge
