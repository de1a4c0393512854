#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "utts/common.hpp"
#include "utts/signal.hpp"
#include "utts/textproc.hpp"

namespace utts::toylang {

struct PhoneTemplate {
  std::string name;
  std::vector<double> formants;  // 2-3 frequencies in Hz
  std::vector<double> amps;      // relative amplitudes, one per formant
  double mean_ms = 90.0;
  double jitter_ms = 20.0;
  std::string ortho;  // grapheme string (possibly multi-character)
};

// A fully deterministic synthetic language: phone templates, a bigram LM over
// {phones, silence} with a shared begin/end state, an orthography, and a noise
// level. Everything the corpus generator needs.
struct ToyLanguageSpec {
  std::string name;
  int sample_rate = 16000;
  double snr_db = 20.0;
  double silence_mean_ms = 120.0;
  double silence_jitter_ms = 20.0;
  std::vector<PhoneTemplate> phones;
  // (V+1) x (V+1), V = phones + silence; row/col V is the begin/end state.
  // Unit index i corresponds to inventory id i+1 (blank is excluded).
  RowMatrix lm;

  int n_units() const { return static_cast<int>(phones.size()) + 1; }

  void validate() const;
  void save(const std::string& path) const;
  static ToyLanguageSpec load(const std::string& path);
};

// Built-in presets. UNAMBIG: bijective single-character orthography. DIGRAPH:
// multi-character graphemes that collide with character pairs, making the
// written form ambiguous.
ToyLanguageSpec preset_unambig(uint64_t lm_seed = 11);
ToyLanguageSpec preset_digraph(uint64_t lm_seed = 11);
ToyLanguageSpec preset_by_name(const std::string& name);
// Same phones/orthography, freshly drawn LM: a different language over the same
// surface, for the negative-control run.
ToyLanguageSpec mismatched_language(const ToyLanguageSpec& base, uint64_t lm_seed);

// Phoneme inventory: {<blank>, <sil>, phone names...}.
textproc::UnitInventory phoneme_inventory(const ToyLanguageSpec& spec);
// Grapheme inventory: {<blank>, <sil>, distinct single characters...}.
textproc::UnitInventory grapheme_inventory(const ToyLanguageSpec& spec);

// Markov sample from the bigram LM; length in [3, 30] surface units enforced by
// rejection. Returns phoneme-inventory ids (silence included, no blank).
textproc::UnitSeq sample_sentence(const ToyLanguageSpec& spec, Rng& rng);

struct RenderSpan {
  int phone_id = 0;  // phoneme-inventory id (silence_id for gaps)
  int start = 0;     // sample offset
  int len = 0;       // samples
};

struct RenderResult {
  signal::Wave wave;
  std::vector<RenderSpan> spans;
};

// Formant-sinusoid rendering: per phone, a sum of formant sines under a raised
// cosine envelope; silence renders as noise only; white noise at spec SNR over
// the whole utterance; peak normalized to 0.7.
RenderResult render_utterance(const textproc::UnitSeq& phones, const ToyLanguageSpec& spec,
                              Rng& rng);

// Written form: phones split on silence into words, each word the concatenation
// of its phones' grapheme strings.
std::vector<std::string> words_of(const textproc::UnitSeq& phones, const ToyLanguageSpec& spec);

// Grapheme-unit rendering of a phone sequence (silence maps to silence; other
// phones expand to one unit per character of their grapheme string).
textproc::UnitSeq phones_to_graphemes(const textproc::UnitSeq& phones,
                                      const ToyLanguageSpec& spec,
                                      const textproc::UnitInventory& grapheme_inv);

enum class Split { Train, Valid, Test };
std::string split_name(Split s);
Split split_from_name(const std::string& name);

struct Utterance {
  std::string id;
  std::string wav_path;  // relative to the manifest directory
  Split split = Split::Train;
  std::vector<std::string> words;  // written transcript; empty = withheld
};

struct Manifest {
  std::vector<Utterance> utts;
  uint64_t seed = 0;
  // Directory the relative wav paths resolve against. Set by load/generate,
  // never serialized, and excluded from the digest so a corpus regenerated at
  // another location digests identically.
  std::string root;

  std::vector<const Utterance*> of_split(Split s) const;
  const Utterance& by_id(const std::string& id) const;
  std::string wav_abs(const Utterance& u) const;
  void save(const std::string& path) const;
  static Manifest load(const std::string& path);
  // Digest over ids, relative paths, splits, transcripts, and audio bytes.
  std::string digest(bool include_audio = true) const;
};

// Renders n_utts utterances, splits them train/valid/test by the given ratios,
// and writes wav/, manifest.tsv, lang.cfg, inventory.tsv, lexicon.tsv, and
// fallback.tsv under out_dir. Pure function of (spec, n_utts, ratios, seed).
Manifest generate_corpus(const ToyLanguageSpec& spec, int n_utts, const double ratios[3],
                         uint64_t seed, const std::string& out_dir);

// Word -> first-seen phone sequence over the given sentences, plus per-grapheme
// fallback rules from the orthography (lowest phone id wins a collision).
textproc::Lexicon build_lexicon(const std::vector<textproc::UnitSeq>& sentences,
                                const ToyLanguageSpec& spec);

struct Pairing {
  std::vector<std::string> speech_ids;  // keep audio, drop transcript
  std::vector<std::string> text_ids;    // keep transcript, drop audio
};

// Disjoint halves of the train split; valid/test untouched.
Pairing break_pairing(const Manifest& manifest, Rng& rng);

}  // namespace utts::toylang
