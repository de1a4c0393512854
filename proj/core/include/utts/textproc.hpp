#pragma once

#include <map>
#include <string>
#include <vector>

#include "utts/common.hpp"

namespace utts::textproc {

// A unit id sequence; ids index a UnitInventory.
using UnitSeq = std::vector<int>;

enum class UnitKind { Phoneme, Grapheme };

// Ordered symbol table with two reserved units: blank (id 0, CTC only, never in
// surface text) and silence (a real surface unit used as the word separator).
struct UnitInventory {
  std::vector<std::string> symbols;  // id -> symbol
  UnitKind kind = UnitKind::Phoneme;
  int blank_id = 0;
  int silence_id = -1;

  static constexpr const char* kBlank = "<blank>";
  static constexpr const char* kSilence = "<sil>";

  // Builds {<blank>, <sil>, units...} in the given order.
  static UnitInventory build(const std::vector<std::string>& units, UnitKind kind);

  int size() const { return static_cast<int>(symbols.size()); }
  // Units that may appear in surface text (everything except blank).
  int n_surface() const { return size() - 1; }
  bool valid_id(int id) const { return id >= 0 && id < size(); }
  const std::string& symbol(int id) const;
  int id_of(const std::string& symbol) const;  // throws on unknown symbol
  bool has(const std::string& symbol) const;

  // Throws if the sequence contains an invalid id or the blank unit.
  void require_surface(const UnitSeq& seq) const;

  std::string to_string(const UnitSeq& seq) const;  // space-joined symbols
  UnitSeq parse(const std::string& text) const;     // space-split symbols

  void save(const std::string& path) const;
  static UnitInventory load(const std::string& path);
};

// Word pronunciations plus per-grapheme fallback rules. Both map strings to
// phone-id sequences; fallback keys are single graphemes (possibly multi-char).
struct Lexicon {
  std::map<std::string, UnitSeq> entries;
  std::map<std::string, UnitSeq> fallback;

  void save(const std::string& entries_path, const std::string& fallback_path) const;
  static Lexicon load(const std::string& entries_path, const std::string& fallback_path);
};

// Greedy longest-match split of a word into grapheme tokens drawn from `keys`.
std::vector<std::string> tokenize_graphemes(const std::string& word,
                                            const std::map<std::string, UnitSeq>& keys);

// Lexicon lookup per word, per-grapheme fallback on miss; words separated by
// silence (between words only).
UnitSeq g2p_convert(const std::vector<std::string>& words, const Lexicon& lex,
                    const UnitInventory& inv);

struct EditOps {
  int distance = 0;
  int substitutions = 0;
  int insertions = 0;
  int deletions = 0;
};

// Levenshtein distance transforming `a` into `b` (deletions drop symbols of
// `a`); op counts come from one optimal alignment with fixed tie-breaking:
// substitution preferred over insertion preferred over deletion.
EditOps edit_distance(const UnitSeq& a, const UnitSeq& b);

// edit_distance(hyp, ref).distance / len(ref); throws on empty ref.
double error_rate(const UnitSeq& hyp, const UnitSeq& ref);

// Pooled: sum of distances / sum of ref lengths.
double corpus_error_rate(const std::vector<std::pair<UnitSeq, UnitSeq>>& pairs);

// Removes every occurrence of `unit` (used to score CER without silence).
UnitSeq strip_unit(const UnitSeq& seq, int unit);

// Splits on `separator` into word tokens (empty words dropped).
std::vector<UnitSeq> split_words(const UnitSeq& seq, int separator);

// WER: split both sequences on the separator unit, intern distinct words, and
// score the word-id sequences with edit_distance (pooled variant sums over
// pairs).
double word_error_rate(const UnitSeq& hyp, const UnitSeq& ref, int separator);
double corpus_word_error_rate(const std::vector<std::pair<UnitSeq, UnitSeq>>& pairs,
                              int separator);

}  // namespace utts::textproc
