#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <string>
#include <vector>

#include "utts/textproc.hpp"

using namespace utts;
using namespace utts::textproc;

namespace {

// Oracle: brute-force recursion over all alignments, written independently of
// the DP under test. Exponential, fine for the short sequences used here.
int oracle_distance(const UnitSeq& a, size_t i, const UnitSeq& b, size_t j) {
  if (i == a.size()) return static_cast<int>(b.size() - j);
  if (j == b.size()) return static_cast<int>(a.size() - i);
  const int sub = oracle_distance(a, i + 1, b, j + 1) + (a[i] == b[j] ? 0 : 1);
  const int ins = oracle_distance(a, i, b, j + 1) + 1;
  const int del = oracle_distance(a, i + 1, b, j) + 1;
  return std::min({sub, ins, del});
}

int oracle_distance(const UnitSeq& a, const UnitSeq& b) { return oracle_distance(a, 0, b, 0); }

UnitSeq from_string(const std::string& s) {
  UnitSeq out;
  for (char c : s) out.push_back(static_cast<int>(c));
  return out;
}

// All sequences over {0,1,2} with length <= max_len.
std::vector<UnitSeq> all_sequences(int max_len) {
  std::vector<UnitSeq> out{{}};
  std::vector<UnitSeq> frontier{{}};
  for (int l = 1; l <= max_len; ++l) {
    std::vector<UnitSeq> next;
    for (const auto& s : frontier)
      for (int sym = 0; sym < 3; ++sym) {
        auto t = s;
        t.push_back(sym);
        next.push_back(t);
      }
    out.insert(out.end(), next.begin(), next.end());
    frontier = std::move(next);
  }
  return out;
}

}  // namespace

TEST_CASE("edit distance agrees with the recursive oracle exhaustively") {
  const auto seqs = all_sequences(5);
  REQUIRE(seqs.size() == 364);
  for (const auto& a : seqs)
    for (const auto& b : seqs) {
      const auto ops = edit_distance(a, b);
      REQUIRE(ops.distance == oracle_distance(a, b));
      REQUIRE(ops.distance == ops.substitutions + ops.insertions + ops.deletions);
    }
}

TEST_CASE("edit distance known cases and op orientation") {
  CHECK(edit_distance(from_string("kitten"), from_string("sitting")).distance == 3);

  const auto x = from_string("abcde");
  CHECK(edit_distance(x, x).distance == 0);

  // transforming x into nothing deletes every symbol of x
  auto del = edit_distance(x, {});
  CHECK(del.distance == 5);
  CHECK(del.deletions == 5);
  CHECK(del.insertions == 0);
  CHECK(del.substitutions == 0);

  auto ins = edit_distance({}, x);
  CHECK(ins.distance == 5);
  CHECK(ins.insertions == 5);

  // tie-breaking prefers substitution: a one-symbol mismatch of equal lengths
  // reports one substitution rather than insert+delete
  auto sub = edit_distance(from_string("abc"), from_string("axc"));
  CHECK(sub.distance == 1);
  CHECK(sub.substitutions == 1);
  CHECK(sub.insertions == 0);
  CHECK(sub.deletions == 0);
}

TEST_CASE("edit distance is a metric on random short sequences") {
  Rng rng(71);
  auto random_seq = [&] {
    UnitSeq s(rng.below(8));
    for (auto& v : s) v = static_cast<int>(rng.below(4));
    return s;
  };
  for (int trial = 0; trial < 300; ++trial) {
    const auto a = random_seq(), b = random_seq(), c = random_seq();
    const int ab = edit_distance(a, b).distance;
    const int ba = edit_distance(b, a).distance;
    const int ac = edit_distance(a, c).distance;
    const int cb = edit_distance(c, b).distance;
    CHECK(ab == ba);                      // symmetry
    CHECK((ab == 0) == (a == b));         // identity of indiscernibles
    CHECK(ab <= ac + cb);                 // triangle inequality
  }
}

TEST_CASE("error rates: single, pooled, and word-level") {
  const auto ref = from_string("abc");
  CHECK(error_rate(ref, ref) == 0.0);
  CHECK(error_rate(from_string("axc"), ref) == doctest::Approx(1.0 / 3.0));
  CHECK(error_rate({}, ref) == doctest::Approx(1.0));
  CHECK_THROWS_AS(error_rate(ref, {}), std::invalid_argument);

  // pooled, not averaged: distances (1, 3) over lengths (10, 10) -> 0.2
  UnitSeq ref10 = from_string("aaaaaaaaaa");
  UnitSeq hyp1 = ref10, hyp3 = ref10;
  hyp1[0] = 'b';
  hyp3[0] = hyp3[4] = hyp3[9] = 'b';
  CHECK(corpus_error_rate({{hyp1, ref10}, {hyp3, ref10}}) == doctest::Approx(0.2));
  CHECK(corpus_error_rate({{hyp1, ref10}}) == doctest::Approx(error_rate(hyp1, ref10)));
  CHECK(corpus_error_rate({{ref10, ref10}, {ref10, ref10}}) == 0.0);
  CHECK_THROWS_AS(corpus_error_rate({{hyp1, {}}}), std::invalid_argument);

  // word level: "a b c" vs "a x c" -> 1/3 with ids 1,2,3/1,9,3, separator 0
  UnitSeq wref{1, 0, 2, 0, 3}, whyp{1, 0, 9, 0, 3};
  CHECK(word_error_rate(whyp, wref, 0) == doctest::Approx(1.0 / 3.0));
  CHECK(corpus_word_error_rate({{whyp, wref}, {wref, wref}}, 0) == doctest::Approx(1.0 / 6.0));

  CHECK(strip_unit(wref, 0) == UnitSeq{1, 2, 3});
  CHECK(split_words(wref, 0).size() == 3);
  CHECK(split_words(UnitSeq{0, 1, 0, 0, 2, 0}, 0).size() == 2);
}

TEST_CASE("unit inventory: construction, lookup, surface rule, and file round trip") {
  auto inv = UnitInventory::build({"aa", "ee", "kk"}, UnitKind::Phoneme);
  CHECK(inv.size() == 5);
  CHECK(inv.n_surface() == 4);
  CHECK(inv.blank_id == 0);
  CHECK(inv.silence_id == 1);
  CHECK(inv.symbol(2) == "aa");
  CHECK(inv.id_of("kk") == 4);
  CHECK(inv.has("ee"));
  CHECK(!inv.has("zz"));
  CHECK_THROWS_AS(inv.id_of("zz"), std::invalid_argument);
  CHECK_THROWS_AS(UnitInventory::build({"aa", "aa"}, UnitKind::Phoneme), std::invalid_argument);

  inv.require_surface({1, 2, 3, 4});
  CHECK_THROWS_AS(inv.require_surface({0, 2}), std::invalid_argument);
  CHECK_THROWS_AS(inv.require_surface({5}), std::invalid_argument);

  const UnitSeq seq{2, 1, 3};
  CHECK(inv.to_string(seq) == "aa <sil> ee");
  CHECK(inv.parse("aa <sil> ee") == seq);

  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "utts_textproc";
  fs::create_directories(dir);
  const auto path = (dir / "inv.tsv").string();
  inv.save(path);
  auto loaded = UnitInventory::load(path);
  CHECK(loaded.symbols == inv.symbols);
  CHECK(loaded.kind == inv.kind);
  CHECK(loaded.blank_id == 0);
  CHECK(loaded.silence_id == 1);

  write_text_file(path, "#kind\tphoneme\nfoo\t0\n<sil>\t1\n");
  CHECK_THROWS(UnitInventory::load(path));  // blank must be id 0
}

TEST_CASE("g2p: lexicon lookup, fallback, silence separation") {
  auto inv = UnitInventory::build({"p1", "p2", "p3"}, UnitKind::Phoneme);
  const int p1 = inv.id_of("p1"), p2 = inv.id_of("p2"), p3 = inv.id_of("p3");

  Lexicon lex;
  lex.entries["abba"] = {p1, p2, p2, p1};
  lex.fallback["a"] = {p1};
  lex.fallback["b"] = {p2};
  lex.fallback["ch"] = {p3};  // multi-character grapheme

  CHECK(g2p_convert({}, lex, inv).empty());
  CHECK(g2p_convert({"abba"}, lex, inv) == UnitSeq{p1, p2, p2, p1});

  // out-of-lexicon word goes through per-grapheme rules with longest match
  CHECK(g2p_convert({"bach"}, lex, inv) == UnitSeq{p2, p1, p3});

  // words separated by silence, boundaries clean
  const auto two = g2p_convert({"abba", "ba"}, lex, inv);
  CHECK(two == UnitSeq{p1, p2, p2, p1, inv.silence_id, p2, p1});

  CHECK_THROWS_AS(g2p_convert({"axb"}, lex, inv), std::invalid_argument);

  auto toks = tokenize_graphemes("aab", lex.fallback);
  CHECK(toks == std::vector<std::string>{"a", "a", "b"});
  lex.fallback["ab"] = {p3};
  CHECK(tokenize_graphemes("aab", lex.fallback) ==
        std::vector<std::string>{"a", "ab"});  // greedy longest match

  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "utts_textproc";
  fs::create_directories(dir);
  lex.save((dir / "lex.tsv").string(), (dir / "fb.tsv").string());
  auto loaded = Lexicon::load((dir / "lex.tsv").string(), (dir / "fb.tsv").string());
  CHECK(loaded.entries == lex.entries);
  CHECK(loaded.fallback == lex.fallback);
}
