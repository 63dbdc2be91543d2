#pragma once

// Newick interchange: one `;`-terminated tree per line, branch lengths as
// decimals. Output is canonical: the tree is rooted at the neighbor of its
// smallest taxon and children are ordered by smallest descendant taxon.

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "treemerge/phylo_model.hpp"

namespace treemerge {

class NewickError : public std::runtime_error {
 public:
  NewickError(const std::string& what, std::size_t position)
      : std::runtime_error(what + " at position " + std::to_string(position)),
        position_(position) {}
  std::size_t position() const noexcept { return position_; }

 private:
  std::size_t position_;
};

namespace detail {

class NewickParser {
 public:
  explicit NewickParser(std::string_view text) : s_(text) {}

  Tree parse() {
    skip_ws();
    const NodeId root = parse_subtree();
    skip_ws();
    if (peek() == ':') {  // a root branch length is allowed and ignored
      ++pos_;
      (void)parse_number();
      skip_ws();
    }
    if (peek() != ';') fail("expected ';'");
    ++pos_;
    skip_ws();
    if (pos_ != s_.size()) fail("trailing characters after ';'");
    suppress_root(root);
    return std::move(tree_);
  }

 private:
  NodeId parse_subtree() {
    skip_ws();
    const NodeId v = tree_.add_node();
    if (peek() == '(') {
      ++pos_;
      for (;;) {
        const NodeId child = parse_subtree();
        skip_ws();
        double len = 0.0;
        if (peek() == ':') {
          ++pos_;
          len = parse_number();
        } else {
          fail("missing branch length");
        }
        tree_.add_edge(v, child, len);
        skip_ws();
        if (peek() == ',') {
          ++pos_;
          continue;
        }
        if (peek() == ')') {
          ++pos_;
          break;
        }
        fail("expected ',' or ')'");
      }
      skip_ws();
      std::string internal_label = parse_label();
      (void)internal_label;  // internal labels (e.g. support values) are dropped
    } else {
      std::string label = parse_label();
      if (label.empty()) fail("expected taxon label");
      tree_.set_label(v, std::move(label));
    }
    return v;
  }

  std::string parse_label() {
    skip_ws();
    std::string out;
    if (peek() == '\'') {
      ++pos_;
      while (pos_ < s_.size()) {
        if (s_[pos_] == '\'') {
          if (pos_ + 1 < s_.size() && s_[pos_ + 1] == '\'') {
            out.push_back('\'');
            pos_ += 2;
            continue;
          }
          ++pos_;
          return out;
        }
        out.push_back(s_[pos_++]);
      }
      fail("unterminated quoted label");
    }
    while (pos_ < s_.size()) {
      const char c = s_[pos_];
      if (c == '(' || c == ')' || c == ',' || c == ':' || c == ';' || c == '[' ||
          std::isspace(static_cast<unsigned char>(c)))
        break;
      out.push_back(c);
      ++pos_;
    }
    return out;
  }

  double parse_number() {
    skip_ws();
    const std::size_t start = pos_;
    while (pos_ < s_.size() && (std::isdigit(static_cast<unsigned char>(s_[pos_])) ||
                                s_[pos_] == '.' || s_[pos_] == '-' || s_[pos_] == '+' ||
                                s_[pos_] == 'e' || s_[pos_] == 'E'))
      ++pos_;
    if (start == pos_) fail("expected branch length");
    const std::string token(s_.substr(start, pos_ - start));
    char* end = nullptr;
    const double value = std::strtod(token.c_str(), &end);
    if (end != token.c_str() + token.size()) {
      pos_ = start;
      fail("malformed branch length");
    }
    if (value < 0.0) {
      pos_ = start;
      fail("negative branch length");
    }
    return value;
  }

  void skip_ws() {
    while (pos_ < s_.size()) {
      if (std::isspace(static_cast<unsigned char>(s_[pos_]))) {
        ++pos_;
      } else if (s_[pos_] == '[') {  // comment
        while (pos_ < s_.size() && s_[pos_] != ']') ++pos_;
        if (pos_ == s_.size()) fail("unterminated comment");
        ++pos_;
      } else {
        break;
      }
    }
  }

  char peek() const { return pos_ < s_.size() ? s_[pos_] : '\0'; }

  [[noreturn]] void fail(const std::string& what) const { throw NewickError(what, pos_); }

  // A rooted binary Newick has a degree-2 root; the unrooted tree merges its
  // two edges into one.
  void suppress_root(NodeId root) {
    if (tree_.degree(root) != 2 || tree_.is_labeled(root)) return;
    Tree out;
    std::vector<NodeId> remap(tree_.node_count(), kNoNode);
    for (NodeId v = 0; v < static_cast<NodeId>(tree_.node_count()); ++v)
      if (v != root) remap[v] = out.add_node(tree_.label(v));
    const auto nb = tree_.neighbors(root);
    const double joined = tree_.edge(nb[0].edge).length + tree_.edge(nb[1].edge).length;
    for (const auto& e : tree_.edges())
      if (e.a != root && e.b != root) out.add_edge(remap[e.a], remap[e.b], e.length);
    out.add_edge(remap[nb[0].node], remap[nb[1].node], joined);
    tree_ = std::move(out);
  }

  std::string_view s_;
  std::size_t pos_ = 0;
  Tree tree_;
};

inline std::string format_length(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.12g", x);
  return buf;
}

inline std::string quote_label(const std::string& label) {
  const bool plain = std::all_of(label.begin(), label.end(), [](char c) {
    return !(c == '(' || c == ')' || c == ',' || c == ':' || c == ';' || c == '[' ||
             c == ']' || c == '\'' || std::isspace(static_cast<unsigned char>(c)));
  });
  if (plain && !label.empty()) return label;
  std::string out = "'";
  for (char c : label) {
    if (c == '\'') out.push_back('\'');
    out.push_back(c);
  }
  out.push_back('\'');
  return out;
}

class NewickWriter {
 public:
  explicit NewickWriter(const Tree& tree) : t_(tree), min_taxon_(tree.node_count()) {}

  std::string write() {
    const auto n = t_.node_count();
    if (n == 0) throw std::invalid_argument("cannot serialize an empty tree");
    NodeId first = kNoNode;
    for (NodeId v = 0; v < static_cast<NodeId>(n); ++v)
      if (t_.is_labeled(v) && (first == kNoNode || t_.label(v) < t_.label(first))) first = v;
    if (first == kNoNode) first = 0;
    if (n == 1) return quote_label(t_.label(first)) + ";";
    if (n == 2) {
      const Edge& e = t_.edges()[0];
      const std::string half = format_length(e.length / 2.0);
      std::string a = quote_label(t_.label(e.a)), b = quote_label(t_.label(e.b));
      if (b < a) std::swap(a, b);
      return "(" + a + ":" + half + "," + b + ":" + half + ");";
    }
    const NodeId root = t_.neighbors(first)[0].node;
    compute_min_taxon(root, kNoNode);
    return render(root, kNoNode) + ";";
  }

 private:
  const std::string& compute_min_taxon(NodeId v, NodeId parent) {
    std::string best = t_.is_labeled(v) ? t_.label(v) : std::string();
    for (const auto& adj : t_.neighbors(v)) {
      if (adj.node == parent) continue;
      const std::string& m = compute_min_taxon(adj.node, v);
      if (best.empty() || (!m.empty() && m < best)) best = m;
    }
    min_taxon_[v] = std::move(best);
    return min_taxon_[v];
  }

  std::string render(NodeId v, NodeId parent) {
    std::vector<Adjacency> kids;
    for (const auto& adj : t_.neighbors(v))
      if (adj.node != parent) kids.push_back(adj);
    if (kids.empty()) return quote_label(t_.label(v));
    std::sort(kids.begin(), kids.end(), [&](const Adjacency& x, const Adjacency& y) {
      return min_taxon_[x.node] < min_taxon_[y.node];
    });
    std::string out = "(";
    for (std::size_t i = 0; i < kids.size(); ++i) {
      if (i) out += ",";
      out += render(kids[i].node, v);
      out += ":" + format_length(t_.edge(kids[i].edge).length);
    }
    out += ")";
    if (t_.is_labeled(v)) out += quote_label(t_.label(v));
    return out;
  }

  const Tree& t_;
  std::vector<std::string> min_taxon_;
};

}  // namespace detail

/// Parse a single Newick tree. A degree-2 root is suppressed.
inline Tree parse_newick(std::string_view text) { return detail::NewickParser(text).parse(); }

inline std::string to_newick(const Tree& tree) { return detail::NewickWriter(tree).write(); }

/// Parse one component per non-empty line; lines starting with '#' are
/// metadata and skipped.
inline Forest parse_forest(std::string_view text) {
  Forest forest;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    while (!line.empty() && std::isspace(static_cast<unsigned char>(line.back())))
      line.remove_suffix(1);
    while (!line.empty() && std::isspace(static_cast<unsigned char>(line.front())))
      line.remove_prefix(1);
    if (!line.empty() && line.front() != '#') {
      try {
        forest.components.push_back(parse_newick(line));
      } catch (const NewickError& e) {
        throw NewickError(std::string("line ") +
                              std::to_string(forest.components.size() + 1) + ": " + e.what(),
                          start + e.position());
      }
    }
    start = end + 1;
  }
  return forest;
}

/// One line per component, components ordered by smallest taxon.
inline std::string to_newick(const Forest& forest) {
  std::vector<std::pair<std::string, std::string>> lines;
  for (const auto& t : forest.components) {
    const auto taxa = t.taxa();
    lines.emplace_back(taxa.empty() ? std::string() : taxa.front(), to_newick(t));
  }
  std::sort(lines.begin(), lines.end());
  std::string out;
  for (const auto& [key, line] : lines) out += line + "\n";
  return out;
}

}  // namespace treemerge
