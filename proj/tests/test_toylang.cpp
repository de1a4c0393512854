#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "utts/common.hpp"
#include "utts/signal.hpp"
#include "utts/textproc.hpp"
#include "utts/toylang.hpp"

using namespace utts;
using namespace utts::toylang;

namespace {

std::string temp_dir(const std::string& tag) {
  std::string dir = "/tmp/utts_toylang_" + tag;
  make_dirs(dir);
  return dir;
}

// Minimal valid language whose LM is a deterministic chain p0 -> p1 -> p2 -> end.
// All other rows get an arbitrary valid distribution that is never reached.
ToyLanguageSpec chain_spec() {
  ToyLanguageSpec spec = preset_unambig();
  spec.name = "chain";
  const int v = spec.n_units();
  spec.lm = RowMatrix(v + 1, v + 1, 0.0);
  spec.lm(v, 2 - 1) = 1.0;          // begin -> p0 (unit index = id - 1)
  spec.lm(2 - 1, 3 - 1) = 1.0;      // p0 -> p1
  spec.lm(3 - 1, 4 - 1) = 1.0;      // p1 -> p2
  spec.lm(4 - 1, v) = 1.0;          // p2 -> end
  spec.lm(0, 2 - 1) = 1.0;          // silence row (unreachable)
  for (int p = 3; p < v; ++p) spec.lm(p, v) = 1.0;  // unreachable phone rows
  spec.validate();
  return spec;
}

double rms(const std::vector<double>& s, int start, int len) {
  double acc = 0.0;
  for (int i = start; i < start + len; ++i) acc += s[i] * s[i];
  return std::sqrt(acc / std::max(1, len));
}

}  // namespace

TEST_CASE("toylang presets are valid and structurally constrained") {
  for (const auto& spec : {preset_unambig(), preset_digraph()}) {
    CHECK_NOTHROW(spec.validate());
    CHECK(spec.phones.size() == 12);
    const int v = spec.n_units();
    CHECK(v == 13);
    // Row-stochastic within 1e-9 and the silence/begin/end structural zeros.
    for (int r = 0; r <= v; ++r) {
      double sum = 0.0;
      for (int c = 0; c <= v; ++c) sum += spec.lm(r, c);
      CHECK(std::abs(sum - 1.0) <= 1e-9);
    }
    CHECK(spec.lm(v, 0) == 0.0);
    CHECK(spec.lm(0, 0) == 0.0);
    CHECK(spec.lm(0, v) == 0.0);
    CHECK(spec.lm(v, v) == 0.0);
    for (const auto& p : spec.phones) {
      for (double f : p.formants) CHECK(f < 0.5 * spec.sample_rate);
      CHECK(p.formants.size() >= 2);
      CHECK(p.formants.size() <= 3);
    }
  }
  CHECK(preset_by_name("unambig").name == "unambig");
  CHECK(preset_by_name("digraph").name == "digraph");
  CHECK_THROWS_AS(preset_by_name("klingon"), ConfigError);

  // The mismatched twin shares surface structure but not transition weights.
  ToyLanguageSpec base = preset_unambig();
  ToyLanguageSpec other = mismatched_language(base, 999);
  CHECK_NOTHROW(other.validate());
  CHECK(other.phones.size() == base.phones.size());
  double max_diff = 0.0;
  for (int r = 0; r < base.lm.rows; ++r)
    for (int c = 0; c < base.lm.cols; ++c)
      max_diff = std::max(max_diff, std::abs(base.lm(r, c) - other.lm(r, c)));
  CHECK(max_diff > 0.1);
}

TEST_CASE("toylang degenerate chain LM always yields the same three-phone sentence") {
  ToyLanguageSpec spec = chain_spec();
  Rng rng(7);
  for (int i = 0; i < 50; ++i) {
    const textproc::UnitSeq sent = sample_sentence(spec, rng);
    REQUIRE(sent == textproc::UnitSeq{2, 3, 4});
  }
}

TEST_CASE("toylang sampled sentences respect length bounds and silence placement") {
  ToyLanguageSpec spec = preset_unambig();
  const textproc::UnitInventory inv = phoneme_inventory(spec);
  Rng rng(123);
  for (int i = 0; i < 500; ++i) {
    const textproc::UnitSeq sent = sample_sentence(spec, rng);
    REQUIRE(sent.size() >= 3);
    REQUIRE(sent.size() <= 30);
    CHECK(sent.front() != inv.silence_id);
    CHECK(sent.back() != inv.silence_id);
    for (size_t j = 1; j < sent.size(); ++j) {
      CHECK_FALSE((sent[j] == inv.silence_id && sent[j - 1] == inv.silence_id));
      CHECK(inv.valid_id(sent[j]));
      CHECK(sent[j] != inv.blank_id);
    }
  }
  // Determinism: same seed, same stream of sentences.
  Rng a(42), b(42);
  for (int i = 0; i < 20; ++i) CHECK(sample_sentence(spec, a) == sample_sentence(spec, b));
}

TEST_CASE("toylang empirical bigram frequencies match the LM per row") {
  ToyLanguageSpec spec = preset_unambig();
  const int v = spec.n_units();
  RowMatrix counts(v + 1, v + 1, 0.0);
  Rng rng(2024);
  const int n_samples = 10000;
  for (int i = 0; i < n_samples; ++i) {
    const textproc::UnitSeq sent = sample_sentence(spec, rng);
    int state = v;
    for (int id : sent) {
      counts(state, id - 1) += 1.0;
      state = id - 1;
    }
    counts(state, v) += 1.0;
  }
  // Total variation distance per row, against the exact transition rows.
  for (int r = 0; r <= v; ++r) {
    double row_n = 0.0;
    for (int c = 0; c <= v; ++c) row_n += counts(r, c);
    REQUIRE(row_n > 0.0);
    double tv = 0.0;
    for (int c = 0; c <= v; ++c) tv += std::abs(counts(r, c) / row_n - spec.lm(r, c));
    tv *= 0.5;
    INFO("row " << r << " tv " << tv << " visits " << row_n);
    CHECK(tv <= 0.02);
  }
}

TEST_CASE("toylang rendering: durations, envelope boundaries, silence, determinism") {
  ToyLanguageSpec spec = preset_unambig();
  const textproc::UnitInventory inv = phoneme_inventory(spec);

  // Zero jitter makes every span length a closed-form sample count.
  ToyLanguageSpec fixed = spec;
  for (auto& p : fixed.phones) p.jitter_ms = 0.0;
  fixed.silence_jitter_ms = 0.0;
  const textproc::UnitSeq sent = {2, 1, 5, 9};  // phone, sil, phone, phone
  {
    Rng rng(1);
    const RenderResult r = render_utterance(sent, fixed, rng);
    REQUIRE(r.spans.size() == sent.size());
    int expected_total = 0;
    for (size_t i = 0; i < sent.size(); ++i) {
      const double mean_ms = (sent[i] == inv.silence_id)
                                 ? fixed.silence_mean_ms
                                 : fixed.phones[static_cast<size_t>(sent[i] - 2)].mean_ms;
      const int n = static_cast<int>(std::llround(mean_ms * fixed.sample_rate / 1000.0));
      CHECK(r.spans[i].len == n);
      CHECK(r.spans[i].start == expected_total);
      expected_total += n;
    }
    CHECK(static_cast<int>(r.wave.samples.size()) == expected_total);
    CHECK(r.wave.sample_rate == fixed.sample_rate);
  }

  // With jitter, spans still tile the waveform exactly and lengths stay inside
  // the jitter window.
  {
    Rng rng(9);
    const RenderResult r = render_utterance(sent, spec, rng);
    int pos = 0;
    for (size_t i = 0; i < r.spans.size(); ++i) {
      CHECK(r.spans[i].start == pos);
      pos += r.spans[i].len;
      const bool is_sil = sent[i] == inv.silence_id;
      const double mean = is_sil ? spec.silence_mean_ms : spec.phones[size_t(sent[i] - 2)].mean_ms;
      const double jit = is_sil ? spec.silence_jitter_ms : spec.phones[size_t(sent[i] - 2)].jitter_ms;
      CHECK(r.spans[i].len >= (mean - jit) * spec.sample_rate / 1000.0 - 1.0);
      CHECK(r.spans[i].len <= (mean + jit) * spec.sample_rate / 1000.0 + 1.0);
    }
    CHECK(static_cast<size_t>(pos) == r.wave.samples.size());
    // Peak level honored after noise injection.
    double peak = 0.0;
    for (double x : r.wave.samples) peak = std::max(peak, std::abs(x));
    CHECK(peak == doctest::Approx(0.7).epsilon(1e-12));
    // Silence is noise-only: far quieter than voiced spans at 20 dB SNR.
    const double sil_rms = rms(r.wave.samples, r.spans[1].start, r.spans[1].len);
    const double voiced_rms = rms(r.wave.samples, r.spans[0].start, r.spans[0].len);
    CHECK(sil_rms < 0.5 * voiced_rms);
  }

  // Bit-identical under the same seed, different under another seed.
  {
    Rng r1(77), r2(77), r3(78);
    const auto a = render_utterance(sent, spec, r1);
    const auto b = render_utterance(sent, spec, r2);
    const auto c = render_utterance(sent, spec, r3);
    REQUIRE(a.wave.samples.size() == b.wave.samples.size());
    bool identical = true;
    for (size_t i = 0; i < a.wave.samples.size(); ++i)
      if (a.wave.samples[i] != b.wave.samples[i]) identical = false;
    CHECK(identical);
    bool all_same = a.wave.samples.size() == c.wave.samples.size();
    if (all_same)
      for (size_t i = 0; i < a.wave.samples.size(); ++i)
        if (a.wave.samples[i] != c.wave.samples[i]) all_same = false;
    CHECK_FALSE(all_same);
  }

  CHECK_THROWS_AS(render_utterance({}, spec, *(new Rng(1))), std::invalid_argument);
}

TEST_CASE("toylang near-single-formant phone concentrates energy at its bin") {
  // One dominant formant (the other at negligible amplitude, as the contract
  // requires at least two) and effectively no noise.
  ToyLanguageSpec spec = preset_unambig();
  spec.snr_db = 300.0;
  for (auto& p : spec.phones) p.jitter_ms = 0.0;
  spec.phones[0].formants = {500.0, 3000.0};
  spec.phones[0].amps = {1.0, 1e-9};
  spec.phones[0].mean_ms = 128.0;  // 2048 samples
  spec.validate();

  Rng rng(5);
  const RenderResult r = render_utterance({2}, spec, rng);
  signal::StftConfig cfg(spec.sample_rate, 1024, 1024, 256);
  const auto spec_gram = signal::stft(r.wave.samples, cfg);
  const RowMatrix mag = signal::magnitude(spec_gram);
  const int mid = mag.rows / 2;
  int argmax = 0;
  for (int f = 1; f < mag.cols; ++f)
    if (mag(mid, f) > mag(mid, argmax)) argmax = f;
  const int expected_bin = static_cast<int>(std::llround(500.0 * cfg.n_fft / spec.sample_rate));
  CHECK(std::abs(argmax - expected_bin) <= 1);
}

TEST_CASE("toylang nearest-template oracle labels rendered frames accurately") {
  // Corpus sanity: at the default 20 dB SNR, a matched-filter classifier over
  // formant bins recovers the rendered phone on mid-segment frames.
  ToyLanguageSpec spec = preset_unambig();
  REQUIRE(spec.snr_db >= 20.0);
  signal::StftConfig cfg(spec.sample_rate, 1024, 1024, 256);

  // Template signatures: formant amplitudes smeared over +-2 bins.
  const int n_phones = static_cast<int>(spec.phones.size());
  RowMatrix signatures(n_phones, cfg.n_bins(), 0.0);
  for (int p = 0; p < n_phones; ++p) {
    const auto& t = spec.phones[static_cast<size_t>(p)];
    for (size_t k = 0; k < t.formants.size(); ++k) {
      const int bin = static_cast<int>(std::llround(t.formants[k] * cfg.n_fft / spec.sample_rate));
      for (int b = std::max(0, bin - 2); b <= std::min(cfg.n_bins() - 1, bin + 2); ++b)
        signatures(p, b) += t.amps[k];
    }
    double norm = 0.0;
    for (int b = 0; b < cfg.n_bins(); ++b) norm += signatures(p, b) * signatures(p, b);
    norm = std::sqrt(norm);
    for (int b = 0; b < cfg.n_bins(); ++b) signatures(p, b) /= norm;
  }

  Rng rng(31337);
  int correct = 0, total = 0;
  for (int utt = 0; utt < 30; ++utt) {
    const textproc::UnitSeq sent = sample_sentence(spec, rng);
    const RenderResult r = render_utterance(sent, spec, rng);
    if (r.wave.samples.size() < static_cast<size_t>(cfg.win_length)) continue;
    const auto gram = signal::stft(r.wave.samples, cfg);
    const RowMatrix mag = signal::magnitude(gram);
    for (int fr = 0; fr < mag.rows; ++fr) {
      const int center = fr * cfg.hop_length + cfg.win_length / 2;
      // Find the covering span; score only frames centered well inside a
      // voiced segment (the middle 60%).
      const RenderSpan* span = nullptr;
      for (const auto& sp : r.spans)
        if (center >= sp.start && center < sp.start + sp.len) span = &sp;
      if (span == nullptr || span->phone_id == 1) continue;
      const double rel = static_cast<double>(center - span->start) / span->len;
      if (rel < 0.2 || rel > 0.8) continue;
      int best = 0;
      double best_score = -1.0;
      for (int p = 0; p < n_phones; ++p) {
        double score = 0.0;
        for (int b = 0; b < cfg.n_bins(); ++b) score += mag(fr, b) * signatures(p, b);
        if (score > best_score) {
          best_score = score;
          best = p;
        }
      }
      total += 1;
      if (best + 2 == span->phone_id) correct += 1;
    }
  }
  REQUIRE(total > 200);
  const double acc = static_cast<double>(correct) / total;
  INFO("frame accuracy " << acc << " over " << total << " frames");
  CHECK(acc >= 0.95);
}

TEST_CASE("toylang written form, grapheme expansion, and g2p round trips") {
  ToyLanguageSpec una = preset_unambig();
  ToyLanguageSpec dig = preset_digraph();
  const textproc::UnitInventory una_phones = phoneme_inventory(una);
  const textproc::UnitInventory dig_graph = grapheme_inventory(dig);
  const textproc::UnitInventory una_graph = grapheme_inventory(una);

  // Unambiguous orthography: 12 distinct characters.
  CHECK(una_graph.size() == 14);  // blank + sil + 12
  // Digraph orthography reuses 8 characters.
  CHECK(dig_graph.size() == 10);  // blank + sil + 8

  // words_of splits on silence and concatenates grapheme strings.
  const textproc::UnitSeq sent = {2, 3, 1, 10, 4};
  const auto words = words_of(sent, una);
  REQUIRE(words.size() == 2);
  CHECK(words[0] == una.phones[0].ortho + una.phones[1].ortho);
  CHECK(words[1] == una.phones[8].ortho + una.phones[2].ortho);

  // Grapheme expansion: digraph phones double the non-silence length.
  const textproc::UnitSeq dig_sent = {10, 11, 1, 12, 13};  // four digraph phones + sil
  const auto graphemes = phones_to_graphemes(dig_sent, dig, dig_graph);
  CHECK(graphemes.size() == 2 * 4 + 1);
  int sil_count = 0;
  for (int g : graphemes)
    if (g == dig_graph.silence_id) ++sil_count;
  CHECK(sil_count == 1);
  // Unambiguous expansion is length-preserving.
  CHECK(phones_to_graphemes(sent, una, una_graph).size() == sent.size());

  // g2p via the per-grapheme fallback alone recovers the phones exactly for the
  // unambiguous orthography.
  textproc::Lexicon fallback_only = build_lexicon({}, una);
  CHECK(fallback_only.entries.empty());
  Rng rng(55);
  for (int i = 0; i < 100; ++i) {
    const textproc::UnitSeq truth = sample_sentence(una, rng);
    const auto written = words_of(truth, una);
    CHECK(textproc::g2p_convert(written, fallback_only, una_phones) == truth);
  }

  // With lexicon entries, in-vocabulary digraph words also round trip.
  Rng rng2(56);
  std::vector<textproc::UnitSeq> sents;
  for (int i = 0; i < 50; ++i) sents.push_back(sample_sentence(dig, rng2));
  textproc::Lexicon lex = build_lexicon(sents, dig);
  const textproc::UnitInventory dig_phones = phoneme_inventory(dig);
  int mismatches = 0;
  for (const auto& truth : sents) {
    const auto written = words_of(truth, dig);
    if (textproc::g2p_convert(written, lex, dig_phones) != truth) ++mismatches;
  }
  // Homographs may collapse to their first-seen pronunciation, nothing else.
  CHECK(mismatches <= 5);
}

TEST_CASE("toylang corpus generation: splits, files, digests, pairing") {
  const std::string dir1 = temp_dir("corpus_a");
  const std::string dir2 = temp_dir("corpus_b");
  ToyLanguageSpec spec = preset_unambig();
  const double ratios[3] = {0.9, 0.05, 0.05};

  const Manifest m1 = generate_corpus(spec, 100, ratios, 321, dir1);
  CHECK(m1.utts.size() == 100);
  CHECK(m1.of_split(Split::Train).size() == 90);
  CHECK(m1.of_split(Split::Valid).size() == 5);
  CHECK(m1.of_split(Split::Test).size() == 5);
  for (const auto& u : m1.utts) {
    REQUIRE(file_exists(m1.wav_abs(u)));
    REQUIRE_FALSE(u.words.empty());
  }
  CHECK(file_exists(dir1 + "/manifest.tsv"));
  CHECK(file_exists(dir1 + "/lang.cfg"));
  CHECK(file_exists(dir1 + "/inventory.tsv"));
  CHECK(file_exists(dir1 + "/lexicon.tsv"));
  CHECK(file_exists(dir1 + "/fallback.tsv"));

  // WAV round trip: the file on disk reads back at the configured rate with
  // sane, nonzero content.
  const auto& first = m1.utts.front();
  const signal::Wave w = signal::read_wav(m1.wav_abs(first), spec.sample_rate);
  CHECK(w.samples.size() > 1000);
  double peak = 0.0;
  for (double x : w.samples) peak = std::max(peak, std::abs(x));
  CHECK(peak == doctest::Approx(0.7).epsilon(0.01));

  // Same seed, different directory: identical digests (audio included).
  const Manifest m2 = generate_corpus(spec, 100, ratios, 321, dir2);
  CHECK(m1.digest() == m2.digest());
  CHECK(m1.digest(false) == m2.digest(false));
  // Different seed: different digest.
  const std::string dir3 = temp_dir("corpus_c");
  const Manifest m3 = generate_corpus(spec, 100, ratios, 322, dir3);
  CHECK(m1.digest() != m3.digest());

  // Manifest file round trip.
  const Manifest loaded = Manifest::load(dir1 + "/manifest.tsv");
  REQUIRE(loaded.utts.size() == m1.utts.size());
  CHECK(loaded.seed == m1.seed);
  CHECK(loaded.digest() == m1.digest());
  for (size_t i = 0; i < loaded.utts.size(); ++i) {
    CHECK(loaded.utts[i].id == m1.utts[i].id);
    CHECK(loaded.utts[i].split == m1.utts[i].split);
    CHECK(loaded.utts[i].words == m1.utts[i].words);
  }
  CHECK(loaded.by_id(first.id).wav_path == first.wav_path);
  CHECK_THROWS_AS(loaded.by_id("nope"), std::invalid_argument);

  // Language spec round trip through lang.cfg.
  const ToyLanguageSpec reloaded = ToyLanguageSpec::load(dir1 + "/lang.cfg");
  CHECK(reloaded.name == spec.name);
  CHECK(reloaded.phones.size() == spec.phones.size());
  for (size_t i = 0; i < spec.phones.size(); ++i) {
    CHECK(reloaded.phones[i].name == spec.phones[i].name);
    CHECK(reloaded.phones[i].ortho == spec.phones[i].ortho);
    CHECK(reloaded.phones[i].formants == spec.phones[i].formants);
    CHECK(reloaded.phones[i].amps == spec.phones[i].amps);
  }
  REQUIRE(reloaded.lm.rows == spec.lm.rows);
  for (int r = 0; r < spec.lm.rows; ++r)
    for (int c = 0; c < spec.lm.cols; ++c) CHECK(reloaded.lm(r, c) == spec.lm(r, c));

  // break_pairing: disjoint halves covering train exactly; valid/test untouched.
  Rng rng(3);
  const Pairing pairing = break_pairing(m1, rng);
  CHECK(pairing.speech_ids.size() == 45);
  CHECK(pairing.text_ids.size() == 45);
  std::set<std::string> speech(pairing.speech_ids.begin(), pairing.speech_ids.end());
  std::set<std::string> text(pairing.text_ids.begin(), pairing.text_ids.end());
  for (const auto& id : speech) CHECK(text.count(id) == 0);
  std::set<std::string> both;
  both.insert(speech.begin(), speech.end());
  both.insert(text.begin(), text.end());
  std::set<std::string> train_ids;
  for (const auto* u : m1.of_split(Split::Train)) train_ids.insert(u->id);
  CHECK(both == train_ids);
  for (const auto* u : m1.of_split(Split::Valid)) CHECK(both.count(u->id) == 0);
  for (const auto* u : m1.of_split(Split::Test)) CHECK(both.count(u->id) == 0);

  // A 50-utterance train split cleaves 25/25.
  Manifest small;
  small.seed = 1;
  for (int i = 0; i < 50; ++i) {
    Utterance u;
    u.id = "u" + std::to_string(i);
    u.split = Split::Train;
    small.utts.push_back(u);
  }
  Rng rng2(4);
  const Pairing half = break_pairing(small, rng2);
  CHECK(half.speech_ids.size() == 25);
  CHECK(half.text_ids.size() == 25);

  // Config errors.
  const double bad_ratios[3] = {0.5, 0.2, 0.2};
  CHECK_THROWS_AS(generate_corpus(spec, 100, bad_ratios, 1, dir1), std::invalid_argument);
  write_text_file(dir1 + "/broken.cfg", "#not-a-spec\n");
  CHECK_THROWS_AS(ToyLanguageSpec::load(dir1 + "/broken.cfg"), ConfigError);
  write_text_file(dir1 + "/broken.tsv", "#wrong\n");
  CHECK_THROWS_AS(Manifest::load(dir1 + "/broken.tsv"), ConfigError);
}
