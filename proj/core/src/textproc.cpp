#include "utts/textproc.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace utts::textproc {

UnitInventory UnitInventory::build(const std::vector<std::string>& units, UnitKind kind) {
  UnitInventory inv;
  inv.kind = kind;
  inv.symbols.push_back(kBlank);
  inv.symbols.push_back(kSilence);
  inv.blank_id = 0;
  inv.silence_id = 1;
  for (const auto& u : units) {
    require(!u.empty(), "inventory: empty symbol");
    require(u != kBlank && u != kSilence, "inventory: reserved symbol in unit list");
    inv.symbols.push_back(u);
  }
  for (size_t i = 0; i < inv.symbols.size(); ++i)
    for (size_t j = i + 1; j < inv.symbols.size(); ++j)
      require(inv.symbols[i] != inv.symbols[j], "inventory: duplicate symbol " + inv.symbols[i]);
  return inv;
}

const std::string& UnitInventory::symbol(int id) const {
  require(valid_id(id), "inventory: id out of range");
  return symbols[id];
}

int UnitInventory::id_of(const std::string& symbol) const {
  for (int i = 0; i < size(); ++i)
    if (symbols[i] == symbol) return i;
  throw std::invalid_argument("inventory: unknown symbol '" + symbol + "'");
}

bool UnitInventory::has(const std::string& symbol) const {
  return std::find(symbols.begin(), symbols.end(), symbol) != symbols.end();
}

void UnitInventory::require_surface(const UnitSeq& seq) const {
  for (int id : seq) {
    require(valid_id(id), "unit sequence: id out of range");
    require(id != blank_id, "unit sequence: blank may not appear in surface text");
  }
}

std::string UnitInventory::to_string(const UnitSeq& seq) const {
  std::string out;
  for (size_t i = 0; i < seq.size(); ++i) {
    if (i) out += ' ';
    out += symbol(seq[i]);
  }
  return out;
}

UnitSeq UnitInventory::parse(const std::string& text) const {
  UnitSeq seq;
  for (const auto& tok : split_on(text, ' ')) {
    if (tok.empty()) continue;
    seq.push_back(id_of(tok));
  }
  return seq;
}

void UnitInventory::save(const std::string& path) const {
  std::string out = "#kind\t";
  out += kind == UnitKind::Phoneme ? "phoneme" : "grapheme";
  out += '\n';
  for (int i = 0; i < size(); ++i) out += symbols[i] + "\t" + std::to_string(i) + "\n";
  write_text_file(path, out);
}

UnitInventory UnitInventory::load(const std::string& path) {
  UnitInventory inv;
  inv.symbols.clear();
  inv.silence_id = -1;
  bool kind_seen = false;
  int next_id = 0;
  for (const auto& line : split_on(read_text_file(path), '\n')) {
    if (line.empty()) continue;
    auto fields = split_on(line, '\t');
    if (fields[0] == "#kind") {
      require(fields.size() == 2, "inventory file: malformed kind line");
      require(fields[1] == "phoneme" || fields[1] == "grapheme",
              "inventory file: unknown kind " + fields[1]);
      inv.kind = fields[1] == "phoneme" ? UnitKind::Phoneme : UnitKind::Grapheme;
      kind_seen = true;
      continue;
    }
    require(fields.size() == 2, "inventory file: expected symbol<TAB>id");
    require(std::stoi(fields[1]) == next_id, "inventory file: ids must be contiguous from 0");
    inv.symbols.push_back(fields[0]);
    ++next_id;
  }
  require(kind_seen, "inventory file: missing #kind line");
  require(!inv.symbols.empty() && inv.symbols[0] == kBlank,
          "inventory file: blank must have id 0");
  for (int i = 0; i < inv.size(); ++i)
    if (inv.symbols[i] == kSilence) {
      require(inv.silence_id < 0, "inventory file: silence present more than once");
      inv.silence_id = i;
    }
  require(inv.silence_id >= 0, "inventory file: silence missing");
  return inv;
}

// --- lexicon -------------------------------------------------------------------

namespace {

void save_map(const std::string& path, const std::map<std::string, UnitSeq>& m) {
  std::string out;
  for (const auto& [word, phones] : m) {
    out += word + "\t";
    for (size_t i = 0; i < phones.size(); ++i) {
      if (i) out += ' ';
      out += std::to_string(phones[i]);
    }
    out += '\n';
  }
  write_text_file(path, out);
}

std::map<std::string, UnitSeq> load_map(const std::string& path) {
  std::map<std::string, UnitSeq> m;
  for (const auto& line : split_on(read_text_file(path), '\n')) {
    if (line.empty()) continue;
    auto fields = split_on(line, '\t');
    require(fields.size() == 2, "lexicon file: expected word<TAB>phones");
    UnitSeq seq;
    for (const auto& tok : split_on(fields[1], ' '))
      if (!tok.empty()) seq.push_back(std::stoi(tok));
    require(!seq.empty(), "lexicon file: empty pronunciation for " + fields[0]);
    m[fields[0]] = std::move(seq);
  }
  return m;
}

}  // namespace

void Lexicon::save(const std::string& entries_path, const std::string& fallback_path) const {
  save_map(entries_path, entries);
  save_map(fallback_path, fallback);
}

Lexicon Lexicon::load(const std::string& entries_path, const std::string& fallback_path) {
  Lexicon lex;
  lex.entries = load_map(entries_path);
  lex.fallback = load_map(fallback_path);
  return lex;
}

std::vector<std::string> tokenize_graphemes(const std::string& word,
                                            const std::map<std::string, UnitSeq>& keys) {
  std::vector<std::string> out;
  size_t pos = 0;
  size_t max_len = 0;
  for (const auto& [k, v] : keys) max_len = std::max(max_len, k.size());
  while (pos < word.size()) {
    size_t take = 0;
    for (size_t len = std::min(max_len, word.size() - pos); len >= 1; --len) {
      if (keys.count(word.substr(pos, len))) {
        take = len;
        break;
      }
    }
    require(take > 0, "g2p: grapheme at '" + word.substr(pos) + "' not covered by fallback rules");
    out.push_back(word.substr(pos, take));
    pos += take;
  }
  return out;
}

UnitSeq g2p_convert(const std::vector<std::string>& words, const Lexicon& lex,
                    const UnitInventory& inv) {
  UnitSeq out;
  for (size_t w = 0; w < words.size(); ++w) {
    if (w) out.push_back(inv.silence_id);
    auto it = lex.entries.find(words[w]);
    if (it != lex.entries.end()) {
      out.insert(out.end(), it->second.begin(), it->second.end());
      continue;
    }
    for (const auto& g : tokenize_graphemes(words[w], lex.fallback)) {
      const auto& phones = lex.fallback.at(g);
      out.insert(out.end(), phones.begin(), phones.end());
    }
  }
  inv.require_surface(out);
  return out;
}

// --- edit metrics ----------------------------------------------------------------

EditOps edit_distance(const UnitSeq& a, const UnitSeq& b) {
  const int n = static_cast<int>(a.size()), m = static_cast<int>(b.size());
  // d[i][j]: cost of transforming a[0..i) into b[0..j)
  std::vector<std::vector<int>> d(n + 1, std::vector<int>(m + 1, 0));
  for (int i = 0; i <= n; ++i) d[i][0] = i;
  for (int j = 0; j <= m; ++j) d[0][j] = j;
  for (int i = 1; i <= n; ++i)
    for (int j = 1; j <= m; ++j) {
      const int sub = d[i - 1][j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      const int ins = d[i][j - 1] + 1;
      const int del = d[i - 1][j] + 1;
      d[i][j] = std::min({sub, ins, del});
    }

  EditOps ops;
  ops.distance = d[n][m];
  // One optimal alignment, tie-broken substitution > insertion > deletion.
  int i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 &&
        d[i][j] == d[i - 1][j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)) {
      if (a[i - 1] != b[j - 1]) ++ops.substitutions;
      --i;
      --j;
    } else if (j > 0 && d[i][j] == d[i][j - 1] + 1) {
      ++ops.insertions;
      --j;
    } else {
      ++ops.deletions;
      --i;
    }
  }
  return ops;
}

double error_rate(const UnitSeq& hyp, const UnitSeq& ref) {
  require(!ref.empty(), "error_rate: empty reference");
  return static_cast<double>(edit_distance(hyp, ref).distance) / static_cast<double>(ref.size());
}

double corpus_error_rate(const std::vector<std::pair<UnitSeq, UnitSeq>>& pairs) {
  long long dist = 0, len = 0;
  for (const auto& [hyp, ref] : pairs) {
    dist += edit_distance(hyp, ref).distance;
    len += static_cast<long long>(ref.size());
  }
  require(len > 0, "corpus_error_rate: all references empty");
  return static_cast<double>(dist) / static_cast<double>(len);
}

UnitSeq strip_unit(const UnitSeq& seq, int unit) {
  UnitSeq out;
  for (int id : seq)
    if (id != unit) out.push_back(id);
  return out;
}

std::vector<UnitSeq> split_words(const UnitSeq& seq, int separator) {
  std::vector<UnitSeq> words;
  UnitSeq cur;
  for (int id : seq) {
    if (id == separator) {
      if (!cur.empty()) words.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(id);
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

namespace {

UnitSeq intern_words(const UnitSeq& seq, int sep, std::map<UnitSeq, int>& table) {
  UnitSeq out;
  for (auto& w : split_words(seq, sep)) {
    auto [it, fresh] = table.emplace(w, static_cast<int>(table.size()));
    (void)fresh;
    out.push_back(it->second);
  }
  return out;
}

}  // namespace

double word_error_rate(const UnitSeq& hyp, const UnitSeq& ref, int separator) {
  std::map<UnitSeq, int> table;
  const auto h = intern_words(hyp, separator, table);
  const auto r = intern_words(ref, separator, table);
  require(!r.empty(), "word_error_rate: empty reference");
  return static_cast<double>(edit_distance(h, r).distance) / static_cast<double>(r.size());
}

double corpus_word_error_rate(const std::vector<std::pair<UnitSeq, UnitSeq>>& pairs,
                              int separator) {
  std::map<UnitSeq, int> table;
  long long dist = 0, len = 0;
  for (const auto& [hyp, ref] : pairs) {
    const auto h = intern_words(hyp, separator, table);
    const auto r = intern_words(ref, separator, table);
    dist += edit_distance(h, r).distance;
    len += static_cast<long long>(r.size());
  }
  require(len > 0, "corpus_word_error_rate: all references empty");
  return static_cast<double>(dist) / static_cast<double>(len);
}

}  // namespace utts::textproc
