#pragma once

// Bit-packed ±1 character sequences and the sequence-matrix text format.

#include <bit>
#include <cstdint>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace treemerge {

/// One ±1 sequence over N sites; bit set means +1.
class Sequence {
 public:
  Sequence() = default;
  explicit Sequence(std::size_t sites) : words_((sites + 63) / 64, 0), sites_(sites) {}

  std::size_t size() const noexcept { return sites_; }

  int at(std::size_t i) const { return (words_[i >> 6] >> (i & 63)) & 1 ? +1 : -1; }

  void set(std::size_t i, int value) {
    const std::uint64_t bit = std::uint64_t{1} << (i & 63);
    if (value > 0)
      words_[i >> 6] |= bit;
    else
      words_[i >> 6] &= ~bit;
  }

  const std::vector<std::uint64_t>& words() const noexcept { return words_; }
  std::vector<std::uint64_t>& words() noexcept { return words_; }

  /// Mask for the valid bits of word w.
  std::uint64_t word_mask(std::size_t w) const noexcept {
    const std::size_t rem = sites_ - 64 * w;
    return rem >= 64 ? ~std::uint64_t{0} : ((std::uint64_t{1} << rem) - 1);
  }

  Sequence negated() const {
    Sequence out = *this;
    for (std::size_t w = 0; w < out.words_.size(); ++w) out.words_[w] = ~out.words_[w] & word_mask(w);
    return out;
  }

  friend bool operator==(const Sequence&, const Sequence&) = default;

 private:
  std::vector<std::uint64_t> words_;
  std::size_t sites_ = 0;
};

inline std::size_t disagreements(const Sequence& x, const Sequence& y) {
  if (x.size() != y.size()) throw std::invalid_argument("sequence length mismatch");
  std::size_t count = 0;
  const auto& a = x.words();
  const auto& b = y.words();
  for (std::size_t w = 0; w < a.size(); ++w) count += std::popcount(a[w] ^ b[w]);
  return count;
}

/// Rows are nodes (or taxa), columns are i.i.d. sites.
struct CharacterMatrix {
  std::vector<std::string> labels;
  std::vector<Sequence> rows;
  std::size_t sites = 0;

  std::size_t row_count() const noexcept { return rows.size(); }

  const Sequence& row(std::string_view label) const {
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == label) return rows[i];
    throw std::out_of_range("no row labelled " + std::string(label));
  }
};

enum class Alphabet { binary, k3st, jc };

inline std::string to_string(Alphabet a) {
  switch (a) {
    case Alphabet::binary: return "binary";
    case Alphabet::k3st: return "K3ST";
    case Alphabet::jc: return "JC";
  }
  return "binary";
}

inline Alphabet parse_alphabet(std::string_view s) {
  if (s == "binary") return Alphabet::binary;
  if (s == "K3ST") return Alphabet::k3st;
  if (s == "JC") return Alphabet::jc;
  throw std::invalid_argument("unknown alphabet '" + std::string(s) + "'");
}

/// Nucleotide symbols for Z2 x Z2 elements: 0=(0,0), 1=(1,0), 2=(0,1), 3=(1,1).
inline constexpr char kNucleotides[4] = {'A', 'G', 'C', 'T'};

/// Symbol-level contents of a sequence file: binary rows hold 0/1, group
/// alphabets hold element indices.
struct SequenceFile {
  Alphabet alphabet = Alphabet::binary;
  std::vector<std::string> labels;
  std::vector<std::vector<std::uint8_t>> symbols;
  std::map<std::string, std::string> header;  // every key=value on the header line

  std::size_t sites() const { return symbols.empty() ? 0 : symbols.front().size(); }
};

inline SequenceFile to_sequence_file(const CharacterMatrix& m) {
  SequenceFile f;
  f.alphabet = Alphabet::binary;
  f.labels = m.labels;
  for (const auto& row : m.rows) {
    std::vector<std::uint8_t> sym(m.sites);
    for (std::size_t i = 0; i < m.sites; ++i) sym[i] = row.at(i) > 0 ? 1 : 0;
    f.symbols.push_back(std::move(sym));
  }
  return f;
}

/// Binary files only; group alphabets must be projected first.
inline CharacterMatrix to_character_matrix(const SequenceFile& f) {
  if (f.alphabet != Alphabet::binary)
    throw std::invalid_argument("sequence file is not binary; project it first");
  CharacterMatrix m;
  m.labels = f.labels;
  m.sites = f.sites();
  for (const auto& sym : f.symbols) {
    Sequence s(m.sites);
    for (std::size_t i = 0; i < m.sites; ++i) s.set(i, sym[i] ? +1 : -1);
    m.rows.push_back(std::move(s));
  }
  return m;
}

/// `#taxa=<n> sites=<N> alphabet=<...> [key=value ...]` then `<label>\t<symbols>`.
inline void write_sequence_file(std::ostream& os, const SequenceFile& f,
                                const std::map<std::string, std::string>& extra = {}) {
  os << "#taxa=" << f.labels.size() << " sites=" << f.sites()
     << " alphabet=" << to_string(f.alphabet);
  for (const auto& [k, v] : extra) os << ' ' << k << '=' << v;
  os << '\n';
  for (std::size_t r = 0; r < f.labels.size(); ++r) {
    os << f.labels[r] << '\t';
    std::string line(f.symbols[r].size(), '0');
    for (std::size_t i = 0; i < line.size(); ++i) {
      const auto s = f.symbols[r][i];
      line[i] = f.alphabet == Alphabet::binary ? static_cast<char>('0' + s) : kNucleotides[s];
    }
    os << line << '\n';
  }
}

inline SequenceFile read_sequence_file(std::istream& is) {
  SequenceFile f;
  std::string line;
  if (!std::getline(is, line) || line.empty() || line[0] != '#')
    throw std::runtime_error("sequence file: missing '#taxa=... sites=... alphabet=...' header");
  {
    std::istringstream hs(line.substr(1));
    std::string tok;
    while (hs >> tok) {
      const auto eq = tok.find('=');
      if (eq == std::string::npos) throw std::runtime_error("sequence file: bad header token " + tok);
      f.header[tok.substr(0, eq)] = tok.substr(eq + 1);
    }
  }
  for (const char* key : {"taxa", "sites", "alphabet"})
    if (!f.header.count(key)) throw std::runtime_error(std::string("sequence file: header lacks ") + key);
  f.alphabet = parse_alphabet(f.header["alphabet"]);
  const std::size_t taxa = std::stoul(f.header["taxa"]);
  const std::size_t sites = std::stoul(f.header["sites"]);
  if (sites == 0) throw std::runtime_error("sequence file: zero sites");
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw std::runtime_error("sequence file line " + std::to_string(line_no) + ": missing tab");
    std::string body = line.substr(tab + 1);
    while (!body.empty() && (body.back() == '\r' || body.back() == ' ')) body.pop_back();
    if (body.size() != sites)
      throw std::runtime_error("sequence file line " + std::to_string(line_no) +
                               ": expected " + std::to_string(sites) + " symbols");
    std::vector<std::uint8_t> sym(sites);
    for (std::size_t i = 0; i < sites; ++i) {
      const char c = body[i];
      if (f.alphabet == Alphabet::binary) {
        if (c != '0' && c != '1')
          throw std::runtime_error("sequence file line " + std::to_string(line_no) +
                                   ": binary symbol must be 0 or 1");
        sym[i] = static_cast<std::uint8_t>(c - '0');
      } else {
        int idx = -1;
        for (int k = 0; k < 4; ++k)
          if (kNucleotides[k] == c) idx = k;
        if (idx < 0)
          throw std::runtime_error("sequence file line " + std::to_string(line_no) +
                                   ": nucleotide symbol must be one of AGCT");
        sym[i] = static_cast<std::uint8_t>(idx);
      }
    }
    f.labels.push_back(line.substr(0, tab));
    f.symbols.push_back(std::move(sym));
  }
  if (f.labels.size() != taxa)
    throw std::runtime_error("sequence file: header says " + std::to_string(taxa) +
                             " taxa, found " + std::to_string(f.labels.size()));
  return f;
}

}  // namespace treemerge
