#include "utts/toylang.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

namespace utts::toylang {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr int kMinSentenceUnits = 3;
constexpr int kMaxSentenceUnits = 30;
constexpr double kPeakLevel = 0.7;

// LM index space: 0..V-1 are surface units (index = inventory id - 1, so index 0
// is silence), index V is the shared begin/end state.
int id_of_lm_index(int idx) { return idx + 1; }

std::vector<std::string> phone_names(const ToyLanguageSpec& spec) {
  std::vector<std::string> names;
  names.reserve(spec.phones.size());
  for (const auto& p : spec.phones) names.push_back(p.name);
  return names;
}

// Draws one row of the LM: `weights[j]` holds an unnormalized weight for unit
// index j (or the end state at index V); zeros stay zero.
void normalize_row(RowMatrix& lm, int row) {
  double sum = 0.0;
  for (int j = 0; j < lm.cols; ++j) sum += lm(row, j);
  require(sum > 0.0, "toylang: LM row has no mass");
  for (int j = 0; j < lm.cols; ++j) lm(row, j) /= sum;
}

// Random bigram LM over {silence, phones} + begin/end with the structural
// constraints: sentences start and end with a phone, silence is never adjacent
// to itself. The graph is two-class: "starter" phones (the first half) carry no
// end mass and begin the sentence, "ender" phones (the second half) carry it
// all. End is therefore unreachable before the third unit, which keeps the
// [3, 30] rejection loop idle at the low end, and the generous end mass keeps
// the high cap out of reach; both matter because rejection would otherwise skew
// observable bigram statistics away from this matrix. Successors follow a ring
// within each class (balanced in-degree, so every row is visited often) with
// per-edge random weights, so different seeds give genuinely different
// languages.
RowMatrix draw_lm(int n_phones, uint64_t lm_seed) {
  require(n_phones >= 6 && n_phones % 2 == 0, "toylang: LM needs an even phone count >= 6");
  const int n_start = n_phones / 2;
  const int v = n_phones + 1;  // + silence at index 0
  RowMatrix lm(v + 1, v + 1);
  Rng rng(0x70795f6c6d5eedULL ^ lm_seed);

  // Begin row: all starters.
  for (int p = 0; p < n_start; ++p) lm(v, 1 + p) = rng.uniform(0.7, 1.3);
  normalize_row(lm, v);

  // Silence row: all enders. Words after the first are ender-class words, so
  // every phone row keeps a healthy, balanced visit rate: starters through the
  // begin row and the starter ring, enders through silence and the ender ring.
  for (int p = n_start; p < n_phones; ++p) lm(0, 1 + p) = rng.uniform(0.7, 1.3);
  normalize_row(lm, 0);

  // Phone rows: each phone continues to exactly one successor, its neighbor in
  // a per-class random cycle, or exits the word. The cycle IS the language:
  // a reshuffle under another seed rewires every bigram. Single successors keep
  // each row's entropy low and the cycle balances visits across phones, both of
  // which matter for tight Monte-Carlo agreement at modest sample counts; they
  // also rule out adjacent duplicate phones, which unit-collapsing recognizers
  // downstream could never reproduce.
  auto cycle_of = [&rng](int lo, int hi) {
    std::vector<int> order;
    for (int i = lo; i < hi; ++i) order.push_back(i);
    for (int i = static_cast<int>(order.size()) - 1; i > 0; --i) {
      const int j = static_cast<int>(rng.below(static_cast<uint64_t>(i) + 1));
      std::swap(order[i], order[j]);
    }
    return order;
  };
  const std::vector<int> s_cycle = cycle_of(0, n_start);
  const std::vector<int> e_cycle = cycle_of(n_start, n_phones);
  for (size_t i = 0; i < s_cycle.size(); ++i) {
    const int p = s_cycle[i];
    const int next = s_cycle[(i + 1) % s_cycle.size()];
    const double cont = rng.uniform(0.58, 0.70);
    lm(1 + p, 1 + next) = cont;
    lm(1 + p, 0) = 1.0 - cont;
  }
  for (size_t i = 0; i < e_cycle.size(); ++i) {
    const int p = e_cycle[i];
    const int next = e_cycle[(i + 1) % e_cycle.size()];
    const double cont = rng.uniform(0.58, 0.70);
    const double exit_mass = 1.0 - cont;
    lm(1 + p, 1 + next) = cont;
    lm(1 + p, 0) = 0.15 * exit_mass;
    lm(1 + p, v) = 0.85 * exit_mass;
  }
  return lm;
}

// Shared template bank: a 3x4 grid of (F1, F2) pairs, all well inside the mel
// range, plus a weak third formant. Durations vary per phone so segment counts
// are not trivially periodic.
std::vector<PhoneTemplate> template_bank() {
  const double f1s[3] = {300.0, 500.0, 700.0};
  const double f2s[4] = {950.0, 1450.0, 2050.0, 2700.0};
  const char* names[12] = {"aa", "eh", "ih", "oh", "uu", "ka",
                           "ta", "pa", "sa", "ma", "na", "la"};
  std::vector<PhoneTemplate> bank;
  for (int i = 0; i < 12; ++i) {
    PhoneTemplate t;
    t.name = names[i];
    const double f1 = f1s[i % 3];
    const double f2 = f2s[i / 3];
    t.formants = {f1, f2, f2 + 1100.0};
    t.amps = {1.0, 0.6, 0.25};
    t.mean_ms = 70.0 + 5.0 * (i % 5);
    t.jitter_ms = 18.0;
    bank.push_back(t);
  }
  return bank;
}

std::string field_or_throw(const std::map<std::string, std::string>& kv, const std::string& key,
                           const std::string& path) {
  auto it = kv.find(key);
  if (it == kv.end()) throw ConfigError("toylang: missing key '" + key + "' in " + path);
  return it->second;
}

std::vector<double> parse_double_list(const std::string& text) {
  std::vector<double> out;
  for (const auto& tok : split_on(text, ',')) {
    if (tok.empty()) continue;
    out.push_back(std::stod(tok));
  }
  return out;
}

std::string join_doubles(const std::vector<double>& v) {
  std::vector<std::string> parts;
  parts.reserve(v.size());
  for (double x : v) parts.push_back(format_double(x, 17));
  return join_with(parts, ",");
}

}  // namespace

void ToyLanguageSpec::validate() const {
  require(!name.empty(), "toylang: spec needs a name");
  require(sample_rate > 0, "toylang: sample_rate must be positive");
  const int n_phones = static_cast<int>(phones.size());
  require(n_phones >= 8 && n_phones <= 20, "toylang: phone count must be in [8, 20]");
  require(silence_mean_ms > 0.0 && silence_jitter_ms >= 0.0 &&
              silence_jitter_ms < silence_mean_ms,
          "toylang: bad silence duration parameters");
  for (const auto& p : phones) {
    require(!p.name.empty(), "toylang: phone needs a name");
    require(p.formants.size() >= 2 && p.formants.size() <= 3,
            "toylang: each phone needs 2-3 formants");
    require(p.amps.size() == p.formants.size(), "toylang: one amplitude per formant");
    for (double f : p.formants)
      require(f > 0.0 && f < 0.5 * sample_rate, "toylang: formant outside (0, Nyquist)");
    for (double a : p.amps) require(a > 0.0, "toylang: formant amplitude must be positive");
    require(p.mean_ms > 0.0 && p.jitter_ms >= 0.0 && p.jitter_ms < p.mean_ms,
            "toylang: bad phone duration parameters");
    require(!p.ortho.empty(), "toylang: every phone needs an orthography");
    for (char c : p.ortho)
      require(c > ' ' && c != '\t', "toylang: orthography must be printable, no whitespace");
  }
  for (size_t i = 0; i < phones.size(); ++i)
    for (size_t j = i + 1; j < phones.size(); ++j)
      require(phones[i].name != phones[j].name, "toylang: duplicate phone name");

  const int v = n_units();
  require(lm.rows == v + 1 && lm.cols == v + 1, "toylang: LM must be (V+1)x(V+1)");
  for (int r = 0; r <= v; ++r) {
    double sum = 0.0;
    for (int c = 0; c <= v; ++c) {
      require(lm(r, c) >= 0.0, "toylang: LM entries must be non-negative");
      sum += lm(r, c);
    }
    require(std::abs(sum - 1.0) <= 1e-9, "toylang: LM row must sum to 1");
  }
  // Structural zeros: begin->silence, begin->end, silence->silence, silence->end.
  require(lm(v, 0) == 0.0, "toylang: sentences must not start with silence");
  require(lm(v, v) == 0.0, "toylang: sentences must not be empty");
  require(lm(0, 0) == 0.0, "toylang: silence must not follow silence");
  require(lm(0, v) == 0.0, "toylang: sentences must not end with silence");
}

ToyLanguageSpec preset_unambig(uint64_t lm_seed) {
  ToyLanguageSpec spec;
  spec.name = "unambig";
  spec.phones = template_bank();
  const char* orthos[12] = {"a", "e", "i", "o", "u", "k", "t", "p", "s", "m", "n", "l"};
  for (int i = 0; i < 12; ++i) spec.phones[i].ortho = orthos[i];
  spec.lm = draw_lm(12, lm_seed);
  spec.validate();
  return spec;
}

ToyLanguageSpec preset_digraph(uint64_t lm_seed) {
  ToyLanguageSpec spec;
  spec.name = "digraph";
  spec.phones = template_bank();
  // Eight single-character graphemes plus four digraphs built from the same
  // characters, so a written digraph could equally be two single-phone
  // graphemes: the text form underdetermines the phone sequence.
  const char* orthos[12] = {"a", "e", "i", "o", "u", "k", "t", "p", "ae", "ka", "tu", "ko"};
  for (int i = 0; i < 12; ++i) spec.phones[i].ortho = orthos[i];
  spec.lm = draw_lm(12, lm_seed);
  spec.validate();
  return spec;
}

ToyLanguageSpec preset_by_name(const std::string& name) {
  if (name == "unambig") return preset_unambig();
  if (name == "digraph") return preset_digraph();
  throw ConfigError("toylang: unknown preset '" + name + "' (expected unambig or digraph)");
}

ToyLanguageSpec mismatched_language(const ToyLanguageSpec& base, uint64_t lm_seed) {
  ToyLanguageSpec other = base;
  other.name = base.name + "-mismatched";
  other.lm = draw_lm(static_cast<int>(base.phones.size()), lm_seed);
  other.validate();
  return other;
}

textproc::UnitInventory phoneme_inventory(const ToyLanguageSpec& spec) {
  return textproc::UnitInventory::build(phone_names(spec), textproc::UnitKind::Phoneme);
}

textproc::UnitInventory grapheme_inventory(const ToyLanguageSpec& spec) {
  std::vector<std::string> chars;
  for (const auto& p : spec.phones)
    for (char c : p.ortho) {
      std::string s(1, c);
      if (std::find(chars.begin(), chars.end(), s) == chars.end()) chars.push_back(s);
    }
  std::sort(chars.begin(), chars.end());
  return textproc::UnitInventory::build(chars, textproc::UnitKind::Grapheme);
}

textproc::UnitSeq sample_sentence(const ToyLanguageSpec& spec, Rng& rng) {
  const int v = spec.n_units();
  for (int attempt = 0; attempt < 10000; ++attempt) {
    textproc::UnitSeq seq;
    int state = v;  // begin
    bool overran = false;
    while (true) {
      const double u = rng.uniform();
      double acc = 0.0;
      int next = -1;
      for (int j = 0; j <= v; ++j) {
        acc += spec.lm(state, j);
        if (u < acc) {
          next = j;
          break;
        }
      }
      if (next < 0) next = v;  // guard against rounding at u ~= 1
      if (next == v) break;    // end state
      seq.push_back(id_of_lm_index(next));
      state = next;
      if (static_cast<int>(seq.size()) > kMaxSentenceUnits) {
        overran = true;
        break;
      }
    }
    if (!overran && static_cast<int>(seq.size()) >= kMinSentenceUnits) return seq;
  }
  throw StageError("toylang: sentence sampling failed to hit the length bound; check the LM");
}

RenderResult render_utterance(const textproc::UnitSeq& phones, const ToyLanguageSpec& spec,
                              Rng& rng) {
  require(!phones.empty(), "toylang: cannot render an empty sentence");
  const textproc::UnitInventory inv = phoneme_inventory(spec);
  inv.require_surface(phones);

  RenderResult out;
  out.wave.sample_rate = spec.sample_rate;
  std::vector<double>& s = out.wave.samples;

  for (int id : phones) {
    const bool is_sil = (id == inv.silence_id);
    const PhoneTemplate* t = is_sil ? nullptr : &spec.phones[static_cast<size_t>(id - 2)];
    const double mean_ms = is_sil ? spec.silence_mean_ms : t->mean_ms;
    const double jitter_ms = is_sil ? spec.silence_jitter_ms : t->jitter_ms;
    const double dur_ms = mean_ms + jitter_ms * rng.uniform(-1.0, 1.0);
    const int n = std::max(1, static_cast<int>(std::llround(dur_ms * spec.sample_rate / 1000.0)));

    RenderSpan span;
    span.phone_id = id;
    span.start = static_cast<int>(s.size());
    span.len = n;
    out.spans.push_back(span);

    if (is_sil) {
      s.insert(s.end(), static_cast<size_t>(n), 0.0);
      continue;
    }
    std::vector<double> phases(t->formants.size());
    for (double& ph : phases) ph = rng.uniform(0.0, 2.0 * kPi);
    // Trapezoid envelope: short raised-cosine ramps at both ends, flat
    // sustain in between. Joins stay click-free while most of the phone
    // keeps full amplitude, so framewise energy is steady within a phone
    // instead of sweeping through the whole dynamic range.
    const int ramp = std::min(n / 4, spec.sample_rate / 100);  // <= 10 ms
    for (int i = 0; i < n; ++i) {
      double env = 1.0;
      if (ramp > 0) {
        if (i < ramp)
          env = 0.5 - 0.5 * std::cos(kPi * i / ramp);
        else if (i >= n - ramp)
          env = 0.5 - 0.5 * std::cos(kPi * (n - 1 - i) / ramp);
      }
      double x = 0.0;
      for (size_t k = 0; k < t->formants.size(); ++k)
        x += t->amps[k] * std::sin(2.0 * kPi * t->formants[k] * i / spec.sample_rate + phases[k]);
      s.push_back(env * x);
    }
  }

  // White noise at the configured SNR relative to the voiced-sample power;
  // silence spans end up noise-only.
  double voiced_power = 0.0;
  int voiced_count = 0;
  for (const auto& span : out.spans) {
    if (span.phone_id == inv.silence_id) continue;
    for (int i = span.start; i < span.start + span.len; ++i) voiced_power += s[i] * s[i];
    voiced_count += span.len;
  }
  require(voiced_count > 0, "toylang: sentence rendered with no voiced samples");
  voiced_power /= voiced_count;
  const double noise_std = std::sqrt(voiced_power / std::pow(10.0, spec.snr_db / 10.0));
  for (double& x : s) x += noise_std * rng.normal();

  signal::peak_normalize(s, kPeakLevel);
  return out;
}

std::vector<std::string> words_of(const textproc::UnitSeq& phones, const ToyLanguageSpec& spec) {
  const textproc::UnitInventory inv = phoneme_inventory(spec);
  std::vector<std::string> words;
  std::string cur;
  for (int id : phones) {
    if (id == inv.silence_id) {
      if (!cur.empty()) words.push_back(cur);
      cur.clear();
      continue;
    }
    require(inv.valid_id(id) && id != inv.blank_id, "toylang: invalid phone id in sentence");
    cur += spec.phones[static_cast<size_t>(id - 2)].ortho;
  }
  if (!cur.empty()) words.push_back(cur);
  return words;
}

textproc::UnitSeq phones_to_graphemes(const textproc::UnitSeq& phones,
                                      const ToyLanguageSpec& spec,
                                      const textproc::UnitInventory& grapheme_inv) {
  const textproc::UnitInventory phone_inv = phoneme_inventory(spec);
  textproc::UnitSeq out;
  for (int id : phones) {
    if (id == phone_inv.silence_id) {
      out.push_back(grapheme_inv.silence_id);
      continue;
    }
    require(phone_inv.valid_id(id) && id != phone_inv.blank_id,
            "toylang: invalid phone id in sentence");
    for (char c : spec.phones[static_cast<size_t>(id - 2)].ortho)
      out.push_back(grapheme_inv.id_of(std::string(1, c)));
  }
  return out;
}

std::string split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Valid: return "valid";
    case Split::Test: return "test";
  }
  throw std::invalid_argument("toylang: bad split");
}

Split split_from_name(const std::string& name) {
  if (name == "train") return Split::Train;
  if (name == "valid") return Split::Valid;
  if (name == "test") return Split::Test;
  throw ConfigError("toylang: unknown split '" + name + "'");
}

std::vector<const Utterance*> Manifest::of_split(Split s) const {
  std::vector<const Utterance*> out;
  for (const auto& u : utts)
    if (u.split == s) out.push_back(&u);
  return out;
}

const Utterance& Manifest::by_id(const std::string& id) const {
  for (const auto& u : utts)
    if (u.id == id) return u;
  throw std::invalid_argument("toylang: unknown utterance id '" + id + "'");
}

std::string Manifest::wav_abs(const Utterance& u) const {
  return root.empty() ? u.wav_path : root + "/" + u.wav_path;
}

void Manifest::save(const std::string& path) const {
  std::ostringstream os;
  os << "#utts-manifest-v1\tseed=" << seed << "\n";
  for (const auto& u : utts) {
    std::string transcript = u.words.empty() ? "-" : join_with(u.words, " ");
    os << u.id << "\t" << u.wav_path << "\t" << split_name(u.split) << "\t" << transcript << "\n";
  }
  write_text_file(path, os.str());
}

Manifest Manifest::load(const std::string& path) {
  const std::string text = read_text_file(path);
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line.rfind("#utts-manifest-v1\t", 0) != 0)
    throw ConfigError("toylang: bad manifest header in " + path);
  Manifest m;
  m.seed = std::stoull(line.substr(line.find("seed=") + 5));
  const auto slash = path.find_last_of('/');
  m.root = (slash == std::string::npos) ? std::string(".") : path.substr(0, slash);
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto fields = split_on(line, '\t');
    if (fields.size() != 4) throw ConfigError("toylang: bad manifest line in " + path);
    Utterance u;
    u.id = fields[0];
    u.wav_path = fields[1];
    u.split = split_from_name(fields[2]);
    if (fields[3] != "-") u.words = split_on(fields[3], ' ');
    m.utts.push_back(u);
  }
  return m;
}

std::string Manifest::digest(bool include_audio) const {
  Digest d;
  d.update(static_cast<int64_t>(seed));
  for (const auto& u : utts) {
    d.update(u.id);
    d.update(u.wav_path);
    d.update(split_name(u.split));
    d.update(u.words.empty() ? "-" : join_with(u.words, " "));
    if (include_audio) d.update(read_text_file(wav_abs(u)));
  }
  return d.hex();
}

textproc::Lexicon build_lexicon(const std::vector<textproc::UnitSeq>& sentences,
                                const ToyLanguageSpec& spec) {
  const textproc::UnitInventory inv = phoneme_inventory(spec);
  textproc::Lexicon lex;
  for (const auto& sent : sentences) {
    std::vector<std::string> words = words_of(sent, spec);
    // Recover per-word phone runs in parallel with the written words.
    std::vector<textproc::UnitSeq> runs;
    textproc::UnitSeq cur;
    for (int id : sent) {
      if (id == inv.silence_id) {
        if (!cur.empty()) runs.push_back(cur);
        cur.clear();
      } else {
        cur.push_back(id);
      }
    }
    if (!cur.empty()) runs.push_back(cur);
    require(runs.size() == words.size(), "toylang: word/run mismatch");
    for (size_t i = 0; i < words.size(); ++i)
      lex.entries.emplace(words[i], runs[i]);  // first spelling seen wins
  }
  // Fallback: orthography inverted per grapheme string; the lowest phone id
  // claims a collision (a digraph language is ambiguous by design).
  for (size_t i = 0; i < spec.phones.size(); ++i)
    lex.fallback.emplace(spec.phones[i].ortho, textproc::UnitSeq{static_cast<int>(i) + 2});
  return lex;
}

Manifest generate_corpus(const ToyLanguageSpec& spec, int n_utts, const double ratios[3],
                         uint64_t seed, const std::string& out_dir) {
  spec.validate();
  require(n_utts > 0, "toylang: need a positive utterance count");
  require(ratios[0] > 0.0 && ratios[1] >= 0.0 && ratios[2] >= 0.0, "toylang: invalid ratios");
  require(std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) <= 1e-9,
          "toylang: split ratios must sum to 1");

  make_dirs(out_dir);
  make_dirs(out_dir + "/wav");

  // Valid/test counts are rounded, train takes the remainder.
  const int n_valid = static_cast<int>(std::llround(ratios[1] * n_utts));
  const int n_test = static_cast<int>(std::llround(ratios[2] * n_utts));
  const int n_train = n_utts - n_valid - n_test;
  require(n_train > 0, "toylang: empty train split");

  Rng master(seed);
  // Split assignment: shuffle indices on a dedicated stream, then slice.
  std::vector<int> order(static_cast<size_t>(n_utts));
  std::iota(order.begin(), order.end(), 0);
  Rng shuffle_rng = master.split(0xA55);
  for (int i = n_utts - 1; i > 0; --i) {
    const int j = static_cast<int>(shuffle_rng.below(static_cast<uint64_t>(i) + 1));
    std::swap(order[i], order[j]);
  }
  std::vector<Split> split_of(static_cast<size_t>(n_utts), Split::Train);
  for (int i = 0; i < n_utts; ++i) {
    Split s = Split::Train;
    if (i >= n_train) s = (i < n_train + n_valid) ? Split::Valid : Split::Test;
    split_of[static_cast<size_t>(order[static_cast<size_t>(i)])] = s;
  }

  Manifest manifest;
  manifest.seed = seed;
  manifest.root = out_dir;
  std::vector<textproc::UnitSeq> sentences;
  sentences.reserve(static_cast<size_t>(n_utts));
  for (int i = 0; i < n_utts; ++i) {
    // One independent stream per utterance, keyed by index, so the corpus is
    // reproducible utterance-by-utterance.
    Rng utt_rng = master.split(static_cast<uint64_t>(i));
    const textproc::UnitSeq sent = sample_sentence(spec, utt_rng);
    const RenderResult rendered = render_utterance(sent, spec, utt_rng);

    char id_buf[32];
    std::snprintf(id_buf, sizeof(id_buf), "utt_%05d", i);
    Utterance u;
    u.id = id_buf;
    u.wav_path = "wav/" + u.id + ".wav";
    u.split = split_of[static_cast<size_t>(i)];
    u.words = words_of(sent, spec);
    signal::write_wav(manifest.wav_abs(u), rendered.wave);
    manifest.utts.push_back(u);
    sentences.push_back(sent);
  }

  manifest.save(out_dir + "/manifest.tsv");
  spec.save(out_dir + "/lang.cfg");
  phoneme_inventory(spec).save(out_dir + "/inventory.tsv");
  const textproc::Lexicon lex = build_lexicon(sentences, spec);
  lex.save(out_dir + "/lexicon.tsv", out_dir + "/fallback.tsv");
  return manifest;
}

Pairing break_pairing(const Manifest& manifest, Rng& rng) {
  std::vector<std::string> train_ids;
  for (const auto& u : manifest.utts)
    if (u.split == Split::Train) train_ids.push_back(u.id);
  require(train_ids.size() >= 2, "toylang: need at least two train utterances to unpair");
  for (size_t i = train_ids.size() - 1; i > 0; --i) {
    const size_t j = static_cast<size_t>(rng.below(i + 1));
    std::swap(train_ids[i], train_ids[j]);
  }
  Pairing pairing;
  const size_t half = (train_ids.size() + 1) / 2;
  pairing.speech_ids.assign(train_ids.begin(), train_ids.begin() + static_cast<long>(half));
  pairing.text_ids.assign(train_ids.begin() + static_cast<long>(half), train_ids.end());
  std::sort(pairing.speech_ids.begin(), pairing.speech_ids.end());
  std::sort(pairing.text_ids.begin(), pairing.text_ids.end());
  return pairing;
}

void ToyLanguageSpec::save(const std::string& path) const {
  std::ostringstream os;
  os << "#toylang-spec-v1\n";
  os << "name = " << name << "\n";
  os << "sample_rate = " << sample_rate << "\n";
  os << "snr_db = " << format_double(snr_db, 17) << "\n";
  os << "silence_mean_ms = " << format_double(silence_mean_ms, 17) << "\n";
  os << "silence_jitter_ms = " << format_double(silence_jitter_ms, 17) << "\n";
  for (const auto& p : phones) {
    os << "[phone]\n";
    os << "name = " << p.name << "\n";
    os << "ortho = " << p.ortho << "\n";
    os << "formants = " << join_doubles(p.formants) << "\n";
    os << "amps = " << join_doubles(p.amps) << "\n";
    os << "mean_ms = " << format_double(p.mean_ms, 17) << "\n";
    os << "jitter_ms = " << format_double(p.jitter_ms, 17) << "\n";
    os << "[/phone]\n";
  }
  os << "[lm]\n";
  for (int r = 0; r < lm.rows; ++r) {
    std::vector<std::string> row;
    for (int c = 0; c < lm.cols; ++c) row.push_back(format_double(lm(r, c), 17));
    os << join_with(row, " ") << "\n";
  }
  os << "[/lm]\n";
  write_text_file(path, os.str());
}

ToyLanguageSpec ToyLanguageSpec::load(const std::string& path) {
  const std::string text = read_text_file(path);
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != "#toylang-spec-v1")
    throw ConfigError("toylang: bad spec header in " + path);

  ToyLanguageSpec spec;
  spec.phones.clear();
  std::map<std::string, std::string> top;
  std::vector<std::vector<double>> lm_rows;
  enum { kTop, kPhone, kLm } mode = kTop;
  std::map<std::string, std::string> phone_kv;

  auto parse_kv = [&](const std::string& l, std::map<std::string, std::string>& kv) {
    const auto eq = l.find('=');
    if (eq == std::string::npos) throw ConfigError("toylang: bad line in " + path + ": " + l);
    std::string key = l.substr(0, eq);
    std::string val = l.substr(eq + 1);
    while (!key.empty() && key.back() == ' ') key.pop_back();
    while (!val.empty() && val.front() == ' ') val.erase(val.begin());
    kv[key] = val;
  };

  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (mode == kTop) {
      if (line == "[phone]") {
        mode = kPhone;
        phone_kv.clear();
      } else if (line == "[lm]") {
        mode = kLm;
      } else {
        parse_kv(line, top);
      }
    } else if (mode == kPhone) {
      if (line == "[/phone]") {
        PhoneTemplate p;
        p.name = field_or_throw(phone_kv, "name", path);
        p.ortho = field_or_throw(phone_kv, "ortho", path);
        p.formants = parse_double_list(field_or_throw(phone_kv, "formants", path));
        p.amps = parse_double_list(field_or_throw(phone_kv, "amps", path));
        p.mean_ms = std::stod(field_or_throw(phone_kv, "mean_ms", path));
        p.jitter_ms = std::stod(field_or_throw(phone_kv, "jitter_ms", path));
        spec.phones.push_back(p);
        mode = kTop;
      } else {
        parse_kv(line, phone_kv);
      }
    } else {
      if (line == "[/lm]") {
        mode = kTop;
      } else {
        std::vector<double> row;
        for (const auto& tok : split_on(line, ' '))
          if (!tok.empty()) row.push_back(std::stod(tok));
        lm_rows.push_back(row);
      }
    }
  }

  spec.name = field_or_throw(top, "name", path);
  spec.sample_rate = std::stoi(field_or_throw(top, "sample_rate", path));
  spec.snr_db = std::stod(field_or_throw(top, "snr_db", path));
  spec.silence_mean_ms = std::stod(field_or_throw(top, "silence_mean_ms", path));
  spec.silence_jitter_ms = std::stod(field_or_throw(top, "silence_jitter_ms", path));

  const int v = spec.n_units();
  if (static_cast<int>(lm_rows.size()) != v + 1)
    throw ConfigError("toylang: LM row count mismatch in " + path);
  spec.lm = RowMatrix(v + 1, v + 1);
  for (int r = 0; r <= v; ++r) {
    if (static_cast<int>(lm_rows[static_cast<size_t>(r)].size()) != v + 1)
      throw ConfigError("toylang: LM column count mismatch in " + path);
    for (int c = 0; c <= v; ++c) spec.lm(r, c) = lm_rows[static_cast<size_t>(r)][static_cast<size_t>(c)];
  }
  spec.validate();
  return spec;
}

}  // namespace utts::toylang
