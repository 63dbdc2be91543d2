// treemerge: simulate, calibrate, reconstruct, score, experiment, rerun.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "treemerge/treemerge.hpp"

namespace fs = std::filesystem;
using namespace treemerge;

namespace {

constexpr int kExitInfeasible = 3;

struct Provenance {
  std::uint64_t seed = 0;
  std::string config;  // encoded argument list
  std::string digest;

  std::string tokens() const { return "seed=" + std::to_string(seed) + " digest=" + digest + " config=" + config; }
};

std::string fnv1a_hex(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string encode_arg(const std::string& a) {
  std::string out;
  for (char c : a) {
    if (c == '%' || c == '|' || c == ' ' || c == '\t' || c == '\n') {
      char buf[4];
      std::snprintf(buf, sizeof buf, "%%%02X", static_cast<unsigned char>(c));
      out += buf;
    } else {
      out += c;
    }
  }
  return out;
}

std::vector<std::string> decode_config(const std::string& cfg) {
  std::vector<std::string> out;
  std::string cur;
  for (std::size_t i = 0; i < cfg.size(); ++i) {
    if (cfg[i] == '|') {
      out.push_back(cur);
      cur.clear();
    } else if (cfg[i] == '%' && i + 2 < cfg.size()) {
      cur += static_cast<char>(std::stoi(cfg.substr(i + 1, 2), nullptr, 16));
      i += 2;
    } else {
      cur += cfg[i];
    }
  }
  out.push_back(cur);
  return out;
}

/// Arguments that define the result; output locations and thread counts are dropped.
Provenance provenance(const std::vector<std::string>& args, std::uint64_t seed) {
  static const std::vector<std::string> drop{"--out", "--params-out", "--jobs"};
  std::vector<std::string> kept;
  for (std::size_t i = 0; i < args.size(); ++i) {
    const auto& a = args[i];
    bool skip = false;
    for (const auto& d : drop) {
      if (a == d) {
        skip = true;
        ++i;
        break;
      }
      if (a.rfind(d + "=", 0) == 0) skip = true;
    }
    if (!skip) kept.push_back(a);
  }
  Provenance p;
  p.seed = seed;
  for (std::size_t i = 0; i < kept.size(); ++i) p.config += (i ? "|" : "") + encode_arg(kept[i]);
  p.digest = fnv1a_hex(p.config);
  return p;
}

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  return os;
}

std::string read_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

Tree read_single_tree(const fs::path& path) {
  const Forest f = parse_forest(read_file(path));
  if (f.components.size() != 1)
    throw std::runtime_error(path.string() + ": expected one tree, found " + std::to_string(f.components.size()));
  return f.components.front();
}

std::string fmt(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", x);
  return buf;
}

// ---------------------------------------------------------------------------

struct Common {
  std::uint64_t seed = 1;
  double xi = 0.1;
  std::optional<double> epsilon;
  std::optional<int> depth;
  std::optional<double> beta;
  std::size_t sites = 1000;
  std::size_t taxa = 8;
  std::string model = "cfn";
  double edge_min = 0.05;
  double edge_max = 0.1;
  std::string out = ".";
  std::string params_out;
  std::size_t trials = 10;
  std::string grid;
};

int cmd_simulate(const Common& c, const std::string& newick_path, const Provenance& prov) {
  const ModelKind model = parse_model(c.model);
  Tree truth;
  if (!newick_path.empty()) {
    truth = read_single_tree(newick_path);
  } else {
    if (!(c.edge_min <= c.edge_max)) throw std::invalid_argument("--edge-min must not exceed --edge-max");
    truth = random_binary_tree(c.taxa, c.edge_min, c.edge_max, c.seed);
  }
  const std::uint64_t data_seed = derive_key(c.seed, {0xDA7A});
  SequenceFile file;
  if (model == ModelKind::cfn) {
    file = to_sequence_file(leaf_rows(sample_cfn(CFNModel(truth), c.sites, data_seed), truth));
  } else {
    const auto g = leaf_group_rows(sample_group(group_model(truth, model), c.sites, data_seed), truth);
    file.alphabet = model == ModelKind::jc ? Alphabet::jc : Alphabet::k3st;
    file.labels = g.labels;
    file.symbols = g.rows;
  }
  const fs::path dir(c.out);
  {
    auto os = open_out(dir / "sequences.txt");
    write_sequence_file(os, file,
                        {{"seed", std::to_string(prov.seed)}, {"digest", prov.digest}, {"config", prov.config}});
  }
  {
    auto os = open_out(dir / "truth.nwk");
    os << "# " << prov.tokens() << "\n" << to_newick(truth) << "\n";
  }
  std::cout << "wrote " << (dir / "sequences.txt").string() << " and " << (dir / "truth.nwk").string() << "\n";
  return 0;
}

void write_params(const std::string& path, const ReconstructionParams& p, const Provenance& prov) {
  if (path.empty()) return;
  auto os = open_out(path);
  os << "# " << prov.tokens() << "\n" << p.to_kv();
}

/// Parameters from overrides, or from calibrate() when no epsilon is given.
std::optional<ReconstructionParams> choose_params(const Common& c, std::size_t N, std::size_t n,
                                                  std::string& note) {
  if (c.epsilon) {
    const double lm = kLambda0 - *c.epsilon;
    const auto d = c.depth ? c.depth : default_depth(lm);
    if (!d) throw std::invalid_argument("no feasible majority depth for this epsilon; pass --depth-d");
    double beta = 0.0;
    if (c.beta) {
      beta = *c.beta;
    } else {
      try {
        beta = calibrate_beta(lm, *d).beta;
      } catch (const InfeasibleDepth& e) {
        throw std::invalid_argument(std::string(e.what()) + "; pass --beta");
      }
    }
    auto p = ReconstructionParams::make(*c.epsilon, *d, beta, c.xi, N, n);
    note = p.satisfies_sample_bound() ? "override; sample bound holds" : "override; sample bound does not hold";
    return p;
  }
  const auto r = calibrate(N, n, c.xi, c.depth);
  if (!r.feasible) {
    std::cerr << "infeasible: " << r.reason << "\n";
    return std::nullopt;
  }
  note = "calibrated";
  auto p = r.params;
  if (c.beta) p = ReconstructionParams::make(p.epsilon, p.d, *c.beta, c.xi, N, n);
  return p;
}

int cmd_calibrate(const Common& c, const Provenance& prov) {
  std::string note;
  const auto p = choose_params(c, c.sites, c.taxa, note);
  if (!p) {
    const auto r = calibrate(c.sites, c.taxa, c.xi, c.depth);
    std::cout << "feasible=0\nfallback_epsilon=" << fmt(r.fallback_epsilon) << "\nminimal_N=" << fmt(r.minimal_N)
              << "\n";
    return kExitInfeasible;
  }
  std::cout << "feasible=1\n" << p->to_kv() << "bound=" << p->bound() << "\nbudget=" << p->budget() << "\n";
  write_params(c.params_out, *p, prov);
  return 0;
}

int cmd_reconstruct(const Common& c, const std::string& input, const Provenance& prov) {
  std::ifstream is(input);
  if (!is) throw std::runtime_error("cannot read " + input);
  const SequenceFile file = read_sequence_file(is);
  CharacterMatrix m;
  if (file.alphabet == Alphabet::binary) {
    m = to_character_matrix(file);
  } else {
    GroupMatrix g{file.labels, file.symbols, file.sites()};
    m = project_group(g, GroupModel::klein_phi());
  }
  std::string note;
  const auto p = choose_params(c, m.sites, m.labels.size(), note);
  if (!p) {
    std::cerr << "reconstruction not attempted; pass --epsilon to override\n";
    return kExitInfeasible;
  }
  SequenceEvidence ev(m, c.seed);
  TreeMerge<SequenceEvidence> tm(ev, *p, m.labels);
  const auto t0 = std::chrono::steady_clock::now();
  const Forest f = tm.run();
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  const fs::path dir(c.out);
  {
    auto os = open_out(dir / "forest.nwk");
    os << "# " << prov.tokens() << "\n" << to_newick(f);
  }
  {
    auto os = open_out(dir / "run.log");
    os << "# " << prov.tokens() << "\n" << tm.log_text();
  }
  {
    const auto& t = tm.telemetry();
    const std::size_t n = m.labels.size();
    auto os = open_out(dir / "report.tsv");
    os << "# " << prov.tokens() << "\n";
    os << "key\tvalue\n";
    os << "params\t" << note << "\n";
    os << "taxa\t" << n << "\nsites\t" << m.sites << "\n";
    os << "epsilon\t" << fmt(p->epsilon) << "\nd\t" << p->d << "\nbeta\t" << fmt(p->beta) << "\nM\t" << fmt(p->M)
       << "\n";
    os << "components\t" << f.components.size() << "\n";
    os << "iterations\t" << t.iterations << "\nmerges\t" << t.merges << "\n";
    os << "learned_sequences\t" << t.learned_sequences << "\nlearned_bound\t" << 3 * n << "\n";
    os << "distance_evaluations\t" << t.distance_evaluations << "\ndistance_bound\t" << 8 * n * n << "\n";
  }
  write_params(c.params_out.empty() ? (dir / "params.txt").string() : c.params_out, *p, prov);
  std::cout << "components=" << f.components.size() << " iterations=" << tm.telemetry().iterations
            << " seconds=" << fmt(secs) << "\n";
  return 0;
}

int cmd_score(const Common& c, const std::string& forest_path, const std::string& truth_path,
              const std::string& run_report) {
  const Forest f = parse_forest(read_file(forest_path));
  const Tree truth = read_single_tree(truth_path);
  const double eps = c.epsilon.value_or(0.004);
  const auto s = score_forest(f, truth, eps);
  std::ostringstream os;
  os << "key\tvalue\n";
  os << "full_recovery\t" << s.full_recovery << "\n";
  os << "components\t" << s.components << "\n";
  os << "output_splits\t" << s.output_splits << "\ncompatible_splits\t" << s.compatible_splits << "\n";
  os << "compatibility\t" << fmt(s.compatibility) << "\nrecall\t" << fmt(s.recall) << "\n";
  os << "max_length_error\t" << fmt(s.max_length_error) << "\nmean_length_error\t" << fmt(s.mean_length_error)
     << "\n";
  os << "i1\t" << s.i1 << "\ni2\t" << s.i2 << "\ni3\t" << s.i3 << "\n";
  if (!run_report.empty()) {
    std::istringstream rs(read_file(run_report));
    std::string line;
    while (std::getline(rs, line)) {
      for (const char* k : {"iterations\t", "learned_sequences\t", "learned_bound\t", "distance_evaluations\t",
                            "distance_bound\t"})
        if (line.rfind(k, 0) == 0) os << line << "\n";
    }
  }
  if (c.out == "." || c.out.empty()) {
    std::cout << os.str();
  } else {
    auto of = open_out(c.out);
    of << os.str();
  }
  return 0;
}

struct Grid {
  std::vector<std::size_t> taxa, sites;
  std::vector<std::string> regimes;
};

/// `taxa=8,16;sites=1000,2000;regime=band,custom`
Grid parse_grid(const std::string& text, const Common& c) {
  Grid g;
  std::istringstream is(text);
  std::string part;
  while (std::getline(is, part, ';')) {
    if (part.empty()) continue;
    const auto eq = part.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("--grid: expected key=v1,v2 in '" + part + "'");
    const std::string key = part.substr(0, eq);
    std::istringstream vs(part.substr(eq + 1));
    std::string v;
    while (std::getline(vs, v, ',')) {
      if (key == "taxa")
        g.taxa.push_back(std::stoul(v));
      else if (key == "sites")
        g.sites.push_back(std::stoul(v));
      else if (key == "regime") {
        if (v != "band" && v != "custom") throw std::invalid_argument("--grid: regime must be band or custom");
        g.regimes.push_back(v);
      } else
        throw std::invalid_argument("--grid: unknown key " + key);
    }
  }
  if (g.taxa.empty()) g.taxa = {c.taxa};
  if (g.sites.empty()) g.sites = {c.sites};
  if (g.regimes.empty()) g.regimes = {"custom"};
  return g;
}

int cmd_experiment(const Common& c, const std::string& evidence, unsigned jobs, const Provenance& prov) {
  const Grid grid = parse_grid(c.grid, c);
  const double eps = c.epsilon.value_or(0.01);
  const int d = c.depth.value_or(3);
  const double beta = c.beta.value_or(0.0);
  const ModelKind model = parse_model(c.model);
  const EvidenceKind ev = evidence == "oracle" ? EvidenceKind::oracle : EvidenceKind::sequences;
  if (evidence != "oracle" && evidence != "sequences") throw std::invalid_argument("--evidence: oracle or sequences");

  const fs::path dir(c.out);
  auto tsv = open_out(dir / "experiment.tsv");
  auto timing = open_out(dir / "timing.tsv");
  tsv << "# " << prov.tokens() << "\n";
  tsv << "regime\ttaxa\tsites\ttrials\terrors\tsuccesses\tsuccess_rate\tmean_compatibility\tmean_recall\t"
         "mean_components\tmax_learned_over_3n\tmax_distances_over_8n2\tmean_iterations\n";
  timing << "# " << prov.tokens() << "\n";
  timing << "regime\ttaxa\tsites\tmean_seconds\n";
  std::map<std::pair<std::string, std::size_t>, std::vector<std::pair<double, double>>> runtime;

  for (std::size_t ri = 0; ri < grid.regimes.size(); ++ri) {
    const std::string& regime = grid.regimes[ri];
    const double lo = regime == "band" ? 6 * eps : c.edge_min;
    const double hi = regime == "band" ? kLambda0 - 3 * eps : c.edge_max;
    for (std::size_t n : grid.taxa)
      for (std::size_t N : grid.sites) {
        auto make = [&](std::size_t t) {
          TrialSpec s;
          s.taxa = n;
          s.sites = N;
          s.edge_min = lo;
          s.edge_max = hi;
          s.model = model;
          s.evidence = ev;
          s.epsilon = eps;
          s.d = d;
          s.beta = beta;
          s.xi = c.xi;
          s.seed = derive_key(c.seed, {n, N, ri, t});
          return s;
        };
        const auto res = run_trials(c.trials, make, jobs);
        std::size_t errors = 0, ok = 0;
        double compat = 0, recall = 0, comps = 0, iters = 0, secs = 0, lr = 0, dr = 0;
        for (const auto& r : res) {
          if (r.error) {
            ++errors;
            std::cerr << "trial error (" << regime << ", n=" << n << ", N=" << N << "): " << r.message << "\n";
            continue;
          }
          ok += r.score.full_recovery;
          compat += r.score.compatibility;
          recall += r.score.recall;
          comps += static_cast<double>(r.score.components);
          iters += static_cast<double>(r.telemetry.iterations);
          secs += r.seconds;
          lr = std::max(lr, static_cast<double>(r.telemetry.learned_sequences) / (3.0 * n));
          dr = std::max(dr, static_cast<double>(r.telemetry.distance_evaluations) / (8.0 * n * n));
        }
        const double good = static_cast<double>(c.trials - errors);
        const double denom = good > 0 ? good : 1.0;
        tsv << regime << '\t' << n << '\t' << N << '\t' << c.trials << '\t' << errors << '\t' << ok << '\t'
            << fmt(c.trials ? static_cast<double>(ok) / c.trials : 0.0) << '\t' << fmt(compat / denom) << '\t'
            << fmt(recall / denom) << '\t' << fmt(comps / denom) << '\t' << fmt(lr) << '\t' << fmt(dr) << '\t'
            << fmt(iters / denom) << '\n';
        timing << regime << '\t' << n << '\t' << N << '\t' << fmt(secs / denom) << '\n';
        if (good > 0) runtime[{regime, N}].push_back({static_cast<double>(n), secs / denom});
      }
  }
  for (const auto& [key, pts] : runtime) {
    if (pts.size() < 2) continue;
    std::vector<double> x, y;
    for (const auto& [n, s] : pts) {
      x.push_back(n);
      y.push_back(std::max(s, 1e-9));
    }
    timing << "# loglog_slope regime=" << key.first << " sites=" << key.second << " slope=" << fmt(loglog_slope(x, y))
           << "\n";
  }
  std::cout << "wrote " << (dir / "experiment.tsv").string() << " and " << (dir / "timing.tsv").string() << "\n";
  return 0;
}

int run(const std::vector<std::string>& args);

int cmd_rerun(const std::string& file, const std::string& out) {
  std::ifstream is(file);
  std::string line;
  if (!is || !std::getline(is, line)) throw std::runtime_error("cannot read " + file);
  const auto pos = line.find("config=");
  if (pos == std::string::npos) throw std::runtime_error(file + ": no embedded config");
  auto end = line.find(' ', pos);
  const std::string cfg = line.substr(pos + 7, end == std::string::npos ? std::string::npos : end - pos - 7);
  auto args = decode_config(cfg);
  args.push_back("--out");
  args.push_back(out);
  return run(args);
}

int run(const std::vector<std::string>& args) {
  CLI::App app{"treemerge: forest reconstruction from binary characters"};
  app.require_subcommand(1);
  Common c;
  auto common = [&](CLI::App* s) {
    s->add_option("--seed", c.seed, "master seed");
    s->add_option("--xi", c.xi, "failure budget in (0,1)")->check(CLI::Range(0.0, 1.0));
    s->add_option("--epsilon", c.epsilon, "epsilon override");
    s->add_option("--depth-d", c.depth, "majority depth override")->check(CLI::Range(1, 62));
    s->add_option("--beta", c.beta, "beta override");
    s->add_option("--out", c.out, "output directory (or file for score)");
  };

  auto* sim = app.add_subcommand("simulate", "draw a tree and leaf sequences");
  std::string newick_path;
  common(sim);
  sim->add_option("--taxa", c.taxa)->check(CLI::PositiveNumber);
  sim->add_option("--sites", c.sites)->check(CLI::PositiveNumber);
  sim->add_option("--model", c.model)->check(CLI::IsMember({"cfn", "jc", "k3st"}));
  sim->add_option("--edge-min", c.edge_min);
  sim->add_option("--edge-max", c.edge_max);
  sim->add_option("--newick", newick_path, "explicit model tree instead of a random one");

  auto* cal = app.add_subcommand("calibrate", "choose (epsilon, d, beta, M) from (N, n, xi)");
  common(cal);
  cal->add_option("--taxa", c.taxa)->required()->check(CLI::PositiveNumber);
  cal->add_option("--sites", c.sites)->required()->check(CLI::PositiveNumber);
  cal->add_option("--params-out", c.params_out);

  auto* rec = app.add_subcommand("reconstruct", "reconstruct a forest from a sequence file");
  std::string input;
  common(rec);
  rec->add_option("--input", input, "sequence file")->required();
  rec->add_option("--params-out", c.params_out);

  auto* sc = app.add_subcommand("score", "compare a forest with the true tree");
  std::string forest_path, truth_path, run_report;
  common(sc);
  sc->add_option("--forest", forest_path)->required();
  sc->add_option("--truth", truth_path)->required();
  sc->add_option("--run-report", run_report, "report.tsv from reconstruct, for telemetry");

  auto* ex = app.add_subcommand("experiment", "sweep (taxa, sites, regime) with repeated trials");
  std::string evidence = "sequences";
  unsigned jobs = 1;
  common(ex);
  ex->add_option("--taxa", c.taxa)->check(CLI::PositiveNumber);
  ex->add_option("--sites", c.sites)->check(CLI::PositiveNumber);
  ex->add_option("--model", c.model)->check(CLI::IsMember({"cfn", "jc", "k3st"}));
  ex->add_option("--edge-min", c.edge_min);
  ex->add_option("--edge-max", c.edge_max);
  ex->add_option("--trials", c.trials);
  ex->add_option("--grid", c.grid, "taxa=8,16;sites=1000,2000;regime=band,custom");
  ex->add_option("--evidence", evidence)->check(CLI::IsMember({"sequences", "oracle"}));
  ex->add_option("--jobs", jobs);

  auto* rr = app.add_subcommand("rerun", "repeat the command embedded in an output file");
  std::string rerun_file;
  rr->add_option("file", rerun_file)->required();
  rr->add_option("--out", c.out)->required();

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }
  const Provenance prov = provenance(args, c.seed);
  if (*sim) return cmd_simulate(c, newick_path, prov);
  if (*cal) return cmd_calibrate(c, prov);
  if (*rec) return cmd_reconstruct(c, input, prov);
  if (*sc) return cmd_score(c, forest_path, truth_path, run_report);
  if (*ex) return cmd_experiment(c, evidence, jobs, prov);
  if (*rr) return cmd_rerun(rerun_file, c.out);
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(std::vector<std::string>(argv + 1, argv + argc));
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
