#include "utts/selftrain.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

namespace utts::selftrain {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr double kLogFloor = -1e30;
constexpr double kPi = 3.14159265358979323846;

double logsumexp2(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

}  // namespace

// --- pseudo transcripts -------------------------------------------------------

const char* stage_name(Stage s) {
  switch (s) {
    case Stage::Gan: return "gan";
    case Stage::Hmm: return "hmm";
    case Stage::Ctc: return "ctc";
  }
  throw ConfigError("unknown stage value");
}

Stage stage_from_name(const std::string& name) {
  if (name == "gan") return Stage::Gan;
  if (name == "hmm") return Stage::Hmm;
  if (name == "ctc") return Stage::Ctc;
  throw ConfigError("unknown stage tag: " + name);
}

static constexpr const char* kPseudoHeader = "#pseudo-transcripts-v1";

void PseudoTranscriptSet::save(const std::string& path) const {
  std::string out = std::string(kPseudoHeader) + "\n";
  for (const auto& [id, seq] : by_id) {
    out += id;
    out += '\t';
    out += stage_name(stage);
    out += '\t';
    for (size_t i = 0; i < seq.size(); ++i) {
      if (i) out += ' ';
      out += std::to_string(seq[i]);
    }
    out += '\n';
  }
  write_text_file(path, out);
}

PseudoTranscriptSet PseudoTranscriptSet::load(const std::string& path) {
  const std::string text = read_text_file(path);
  std::vector<std::string> lines = split_on(text, '\n');
  if (lines.empty() || lines[0] != kPseudoHeader)
    throw ConfigError("bad pseudo transcript header in " + path);
  PseudoTranscriptSet set;
  bool stage_seen = false;
  for (size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    std::vector<std::string> cols = split_on(lines[i], '\t');
    if (cols.size() != 3) throw ConfigError("bad pseudo transcript line in " + path);
    const Stage s = stage_from_name(cols[1]);
    if (stage_seen && s != set.stage)
      throw ConfigError("mixed stage tags in " + path);
    set.stage = s;
    stage_seen = true;
    textproc::UnitSeq seq;
    for (const std::string& tok : split_on(cols[2], ' ')) {
      if (tok.empty()) continue;
      size_t used = 0;
      int v;
      try {
        v = std::stoi(tok, &used);
      } catch (const std::exception&) {
        throw ConfigError("bad unit id '" + tok + "' in " + path);
      }
      if (used != tok.size() || v < 0) throw ConfigError("bad unit id '" + tok + "' in " + path);
      seq.push_back(v);
    }
    set.by_id[cols[0]] = std::move(seq);
  }
  return set;
}

// --- HMM model ----------------------------------------------------------------

double HmmModel::emission_logp(int unit, int state, const double* frame) const {
  const HmmState& s = units[static_cast<size_t>(unit)][static_cast<size_t>(state)];
  double lp = 0.0;
  for (int c = 0; c < dim; ++c) {
    const double diff = frame[c] - s.mean[static_cast<size_t>(c)];
    lp += -0.5 * (std::log(2.0 * kPi * s.var[static_cast<size_t>(c)])
                  + diff * diff / s.var[static_cast<size_t>(c)]);
  }
  return lp;
}

void HmmModel::save(const std::string& path) const {
  grad::ParameterSet ps;
  const std::vector<double> meta = {static_cast<double>(n_units()), static_cast<double>(dim),
                                    static_cast<double>(silence_id),
                                    static_cast<double>(states_per_unit)};
  ps.add("meta", grad::Tensor::from({4}, meta), false);
  for (int u = 0; u < n_units(); ++u) {
    const int S = chain_len(u);
    if (S == 0) continue;
    std::vector<double> mean, var, self;
    for (const HmmState& s : units[static_cast<size_t>(u)]) {
      mean.insert(mean.end(), s.mean.begin(), s.mean.end());
      var.insert(var.end(), s.var.begin(), s.var.end());
      self.push_back(s.self_loop);
    }
    const std::string base = "u" + std::to_string(u);
    ps.add(base + ".mean", grad::Tensor::from({S, dim}, std::move(mean)), false);
    ps.add(base + ".var", grad::Tensor::from({S, dim}, std::move(var)), false);
    ps.add(base + ".self", grad::Tensor::from({S}, std::move(self)), false);
  }
  ps.save(path);
}

HmmModel HmmModel::load(const std::string& path) {
  grad::ParameterSet ps;
  ps.load(path);
  const std::vector<double>& meta = ps.get("meta")->v;
  require(meta.size() == 4, "HmmModel::load: bad meta");
  HmmModel m;
  m.dim = static_cast<int>(meta[1]);
  m.silence_id = static_cast<int>(meta[2]);
  m.states_per_unit = static_cast<int>(meta[3]);
  m.units.resize(static_cast<size_t>(meta[0]));
  for (int u = 0; u < m.n_units(); ++u) {
    const std::string base = "u" + std::to_string(u);
    if (!ps.has(base + ".self")) continue;
    const auto& mean = ps.get(base + ".mean")->v;
    const auto& var = ps.get(base + ".var")->v;
    const auto& self = ps.get(base + ".self")->v;
    for (size_t j = 0; j < self.size(); ++j) {
      HmmState s;
      s.mean.assign(mean.begin() + static_cast<std::ptrdiff_t>(j) * m.dim,
                    mean.begin() + static_cast<std::ptrdiff_t>(j + 1) * m.dim);
      s.var.assign(var.begin() + static_cast<std::ptrdiff_t>(j) * m.dim,
                   var.begin() + static_cast<std::ptrdiff_t>(j + 1) * m.dim);
      s.self_loop = self[j];
      m.units[static_cast<size_t>(u)].push_back(std::move(s));
    }
  }
  return m;
}

// --- flat start -----------------------------------------------------------------

namespace {

struct StateStats {
  double count{0};
  std::vector<double> sum, sumsq;
  double instances{0};  // how many utterance visits contributed

  void ensure(int dim) {
    if (sum.empty()) {
      sum.assign(static_cast<size_t>(dim), 0.0);
      sumsq.assign(static_cast<size_t>(dim), 0.0);
    }
  }
};

int chain_len_for(int unit, int silence_id, int states_per_unit) {
  return unit == silence_id ? 1 : states_per_unit;
}

double clamp_prob(double p) { return std::min(1.0 - 1e-3, std::max(1e-3, p)); }

// Finalize Gaussian parameters from accumulated stats; states without
// data fall back to the provided defaults.
void finalize_states(HmmModel& m, std::vector<std::vector<StateStats>>& stats,
                     const std::vector<double>& fallback_mean,
                     const std::vector<double>& fallback_var, double var_floor,
                     const HmmModel* previous) {
  for (int u = 0; u < m.n_units(); ++u) {
    auto& chain = m.units[static_cast<size_t>(u)];
    for (size_t j = 0; j < chain.size(); ++j) {
      StateStats& st = stats[static_cast<size_t>(u)][j];
      HmmState& out = chain[j];
      if (st.count > 0) {
        out.mean.resize(static_cast<size_t>(m.dim));
        out.var.resize(static_cast<size_t>(m.dim));
        for (int c = 0; c < m.dim; ++c) {
          const double mean = st.sum[static_cast<size_t>(c)] / st.count;
          const double var = st.sumsq[static_cast<size_t>(c)] / st.count - mean * mean;
          out.mean[static_cast<size_t>(c)] = mean;
          out.var[static_cast<size_t>(c)] = std::max(var_floor, var);
        }
        out.self_loop = clamp_prob(1.0 - st.instances / st.count);
      } else if (previous) {
        out = previous->units[static_cast<size_t>(u)][j];
        for (double& v : out.var) v = std::max(var_floor, v);
      } else {
        out.mean = fallback_mean;
        out.var = fallback_var;
        out.self_loop = 0.5;
      }
    }
  }
}

}  // namespace

HmmModel hmm_init(const std::vector<RowMatrix>& feats,
                  const std::vector<textproc::UnitSeq>& pseudo, int n_units, int silence_id,
                  const HmmConfig& cfg, HmmInitInfo* info) {
  require(feats.size() == pseudo.size(), "hmm_init: feats/pseudo size mismatch");
  require(!feats.empty(), "hmm_init: empty corpus");
  require(n_units >= 2 && silence_id >= 1 && silence_id < n_units, "hmm_init: bad inventory");

  HmmModel m;
  m.silence_id = silence_id;
  m.states_per_unit = cfg.states_per_unit;
  m.units.resize(static_cast<size_t>(n_units));
  std::vector<std::vector<StateStats>> stats(static_cast<size_t>(n_units));
  for (int u = 1; u < n_units; ++u) {
    const int S = chain_len_for(u, silence_id, cfg.states_per_unit);
    m.units[static_cast<size_t>(u)].resize(static_cast<size_t>(S));
    stats[static_cast<size_t>(u)].resize(static_cast<size_t>(S));
  }

  std::vector<double> global_sum, global_sumsq;
  double global_count = 0;
  HmmInitInfo local;
  for (size_t i = 0; i < feats.size(); ++i) {
    const textproc::UnitSeq& units = pseudo[i];
    require(!units.empty(), "hmm_init: empty pseudo transcript");
    for (int u : units)
      require(u >= 1 && u < n_units, "hmm_init: unit id out of range");
    const RowMatrix& f = feats[i];
    if (m.dim == 0) m.dim = f.cols;
    require(f.cols == m.dim, "hmm_init: inconsistent feature dimension");
    if (f.rows < 3 * static_cast<int>(units.size())) {
      std::fprintf(stderr, "hmm_init: skipping utterance %zu (%d frames < 3 x %zu units)\n", i,
                   f.rows, units.size());
      ++local.skipped;
      continue;
    }
    ++local.used;

    // Concatenated state list of this transcript.
    std::vector<std::pair<int, int>> states;
    for (int u : units)
      for (int j = 0; j < chain_len_for(u, silence_id, cfg.states_per_unit); ++j)
        states.push_back({u, j});
    const int S = static_cast<int>(states.size());
    const int T = f.rows;

    if (global_sum.empty()) {
      global_sum.assign(static_cast<size_t>(m.dim), 0.0);
      global_sumsq.assign(static_cast<size_t>(m.dim), 0.0);
    }
    for (int j = 0; j < S; ++j) {
      const int lo = static_cast<int>(static_cast<int64_t>(j) * T / S);
      const int hi = static_cast<int>(static_cast<int64_t>(j + 1) * T / S);
      StateStats& st = stats[static_cast<size_t>(states[static_cast<size_t>(j)].first)]
                            [static_cast<size_t>(states[static_cast<size_t>(j)].second)];
      st.ensure(m.dim);
      st.instances += 1;
      for (int t = lo; t < hi; ++t) {
        const double* row = f.row(t);
        st.count += 1;
        global_count += 1;
        for (int c = 0; c < m.dim; ++c) {
          st.sum[static_cast<size_t>(c)] += row[c];
          st.sumsq[static_cast<size_t>(c)] += row[c] * row[c];
          global_sum[static_cast<size_t>(c)] += row[c];
          global_sumsq[static_cast<size_t>(c)] += row[c] * row[c];
        }
      }
    }
  }
  require(local.used > 0, "hmm_init: every utterance was skipped");

  std::vector<double> gmean(static_cast<size_t>(m.dim)), gvar(static_cast<size_t>(m.dim));
  for (int c = 0; c < m.dim; ++c) {
    gmean[static_cast<size_t>(c)] = global_sum[static_cast<size_t>(c)] / global_count;
    gvar[static_cast<size_t>(c)] =
        std::max(cfg.var_floor, global_sumsq[static_cast<size_t>(c)] / global_count
                                    - gmean[static_cast<size_t>(c)] * gmean[static_cast<size_t>(c)]);
  }
  finalize_states(m, stats, gmean, gvar, cfg.var_floor, nullptr);
  if (info) *info = local;
  return m;
}

// --- forced alignment -----------------------------------------------------------

Alignment viterbi_align(const HmmModel& hmm, const RowMatrix& feats,
                        const textproc::UnitSeq& units) {
  require(!units.empty(), "viterbi_align: empty unit sequence");
  require(feats.cols == hmm.dim, "viterbi_align: feature dimension mismatch");
  std::vector<std::pair<int, int>> states;  // (index into units, state)
  for (size_t i = 0; i < units.size(); ++i) {
    const int u = units[i];
    require(u >= 0 && u < hmm.n_units(), "viterbi_align: unit id out of range");
    const int S = hmm.chain_len(u);
    require(S > 0, "viterbi_align: unit has no states (blank in transcript?)");
    for (int j = 0; j < S; ++j) states.push_back({static_cast<int>(i), j});
  }
  const int S = static_cast<int>(states.size());
  const int T = feats.rows;
  if (T < S) throw StageError("viterbi_align: no legal path (frames < states)");

  // Per-state stay/advance log probs.
  std::vector<double> lstay(static_cast<size_t>(S)), ladv(static_cast<size_t>(S));
  std::vector<double> emis(static_cast<size_t>(S));
  for (int j = 0; j < S; ++j) {
    const HmmState& hs = hmm.units[static_cast<size_t>(units[static_cast<size_t>(states[static_cast<size_t>(j)].first)])]
                                  [static_cast<size_t>(states[static_cast<size_t>(j)].second)];
    lstay[static_cast<size_t>(j)] = std::log(hs.self_loop);
    ladv[static_cast<size_t>(j)] = std::log(1.0 - hs.self_loop);
  }
  auto emis_at = [&](int t, int j) {
    return hmm.emission_logp(units[static_cast<size_t>(states[static_cast<size_t>(j)].first)],
                             states[static_cast<size_t>(j)].second, feats.row(t));
  };

  std::vector<double> prev(static_cast<size_t>(S), kNegInf), cur(static_cast<size_t>(S));
  std::vector<std::vector<int8_t>> from(static_cast<size_t>(T),
                                        std::vector<int8_t>(static_cast<size_t>(S), 0));
  prev[0] = emis_at(0, 0);
  for (int t = 1; t < T; ++t) {
    for (int j = 0; j < S; ++j) {
      double stay = prev[static_cast<size_t>(j)] + lstay[static_cast<size_t>(j)];
      double adv = j > 0 ? prev[static_cast<size_t>(j - 1)] + ladv[static_cast<size_t>(j - 1)]
                         : kNegInf;
      if (stay >= adv) {
        cur[static_cast<size_t>(j)] = stay + emis_at(t, j);
        from[static_cast<size_t>(t)][static_cast<size_t>(j)] = 0;
      } else {
        cur[static_cast<size_t>(j)] = adv + emis_at(t, j);
        from[static_cast<size_t>(t)][static_cast<size_t>(j)] = 1;
      }
    }
    std::swap(prev, cur);
  }
  const double best = prev[static_cast<size_t>(S - 1)];
  if (best == kNegInf) throw StageError("viterbi_align: zero-probability path");

  Alignment a;
  a.log_prob = best;
  a.unit_index.resize(static_cast<size_t>(T));
  a.state.resize(static_cast<size_t>(T));
  int j = S - 1;
  for (int t = T - 1; t >= 0; --t) {
    a.unit_index[static_cast<size_t>(t)] = states[static_cast<size_t>(j)].first;
    a.state[static_cast<size_t>(t)] = states[static_cast<size_t>(j)].second;
    if (t > 0 && from[static_cast<size_t>(t)][static_cast<size_t>(j)] == 1) --j;
  }
  return a;
}

// --- hard-EM training -------------------------------------------------------------

HmmModel hmm_train(const std::vector<RowMatrix>& feats,
                   const std::vector<textproc::UnitSeq>& pseudo, int n_units, int silence_id,
                   const HmmConfig& cfg, HmmTrainInfo* info) {
  HmmInitInfo init_info;
  HmmModel m = hmm_init(feats, pseudo, n_units, silence_id, cfg, &init_info);
  if (info) info->init = init_info;

  // The same utterances the flat start used (3 frames per unit floor).
  std::vector<size_t> usable;
  for (size_t i = 0; i < feats.size(); ++i)
    if (feats[i].rows >= 3 * static_cast<int>(pseudo[i].size())) usable.push_back(i);

  for (int iter = 0; iter < cfg.iterations; ++iter) {
    std::vector<std::vector<StateStats>> stats(static_cast<size_t>(n_units));
    std::vector<std::vector<double>> self_count(static_cast<size_t>(n_units)),
        exit_count(static_cast<size_t>(n_units));
    for (int u = 1; u < n_units; ++u) {
      const int S = m.chain_len(u);
      stats[static_cast<size_t>(u)].resize(static_cast<size_t>(S));
      self_count[static_cast<size_t>(u)].assign(static_cast<size_t>(S), 0.0);
      exit_count[static_cast<size_t>(u)].assign(static_cast<size_t>(S), 0.0);
    }
    double ll = 0.0;
    for (size_t i : usable) {
      const Alignment a = viterbi_align(m, feats[i], pseudo[i]);
      ll += a.log_prob;
      const RowMatrix& f = feats[i];
      for (int t = 0; t < f.rows; ++t) {
        const int u = pseudo[i][static_cast<size_t>(a.unit_index[static_cast<size_t>(t)])];
        const int s = a.state[static_cast<size_t>(t)];
        StateStats& st = stats[static_cast<size_t>(u)][static_cast<size_t>(s)];
        st.ensure(m.dim);
        st.count += 1;
        const double* row = f.row(t);
        for (int c = 0; c < m.dim; ++c) {
          st.sum[static_cast<size_t>(c)] += row[c];
          st.sumsq[static_cast<size_t>(c)] += row[c] * row[c];
        }
        if (t + 1 < f.rows) {
          const bool same = a.unit_index[static_cast<size_t>(t + 1)] == a.unit_index[static_cast<size_t>(t)]
                            && a.state[static_cast<size_t>(t + 1)] == s;
          if (same)
            self_count[static_cast<size_t>(u)][static_cast<size_t>(s)] += 1;
          else
            exit_count[static_cast<size_t>(u)][static_cast<size_t>(s)] += 1;
        }
      }
    }
    if (info) info->log_likelihood.push_back(ll);

    HmmModel prev = m;
    finalize_states(m, stats, {}, {}, cfg.var_floor, &prev);
    // Re-estimate self-loops from observed transition counts, where seen.
    for (int u = 1; u < n_units; ++u) {
      for (int s = 0; s < m.chain_len(u); ++s) {
        const double stay = self_count[static_cast<size_t>(u)][static_cast<size_t>(s)];
        const double leave = exit_count[static_cast<size_t>(u)][static_cast<size_t>(s)];
        if (stay + leave > 0)
          m.units[static_cast<size_t>(u)][static_cast<size_t>(s)].self_loop =
              clamp_prob(stay / (stay + leave));
      }
    }
  }
  return m;
}

// --- bigram -----------------------------------------------------------------------

UnitBigram UnitBigram::estimate(const std::vector<textproc::UnitSeq>& seqs, int n_units,
                                double smoothing) {
  require(n_units >= 2, "UnitBigram: need at least one surface unit");
  require(smoothing > 0, "UnitBigram: smoothing must be positive");
  UnitBigram lm;
  lm.n_units = n_units;
  lm.begin.assign(static_cast<size_t>(n_units), kLogFloor);
  lm.end.assign(static_cast<size_t>(n_units), kLogFloor);
  lm.next = RowMatrix(n_units, n_units, kLogFloor);

  const int ns = n_units - 1;  // surface units, ids 1..n_units-1
  std::vector<double> begin_c(static_cast<size_t>(n_units), 0.0),
      end_c(static_cast<size_t>(n_units), 0.0), occ(static_cast<size_t>(n_units), 0.0);
  RowMatrix next_c(n_units, n_units, 0.0);
  double n_seqs = 0;
  for (const auto& seq : seqs) {
    if (seq.empty()) continue;
    for (int u : seq) require(u >= 1 && u < n_units, "UnitBigram: unit id out of range");
    n_seqs += 1;
    begin_c[static_cast<size_t>(seq.front())] += 1;
    end_c[static_cast<size_t>(seq.back())] += 1;
    for (size_t i = 0; i < seq.size(); ++i) {
      occ[static_cast<size_t>(seq[i])] += 1;
      if (i + 1 < seq.size()) next_c(seq[i], seq[i + 1]) += 1;
    }
  }
  for (int u = 1; u < n_units; ++u) {
    lm.begin[static_cast<size_t>(u)] =
        std::log((begin_c[static_cast<size_t>(u)] + smoothing) / (n_seqs + smoothing * ns));
    // Outgoing mass of u: every occurrence continues to a surface unit or
    // ends the sequence; normalize jointly over ns + 1 outcomes.
    const double denom = occ[static_cast<size_t>(u)] + smoothing * (ns + 1);
    lm.end[static_cast<size_t>(u)] = std::log((end_c[static_cast<size_t>(u)] + smoothing) / denom);
    for (int v = 1; v < n_units; ++v)
      lm.next(u, v) = std::log((next_c(u, v) + smoothing) / denom);
  }
  return lm;
}

UnitBigram UnitBigram::uniform(int n_units) {
  require(n_units >= 2, "UnitBigram: need at least one surface unit");
  UnitBigram lm;
  lm.n_units = n_units;
  const int ns = n_units - 1;
  lm.begin.assign(static_cast<size_t>(n_units), kLogFloor);
  lm.end.assign(static_cast<size_t>(n_units), kLogFloor);
  lm.next = RowMatrix(n_units, n_units, kLogFloor);
  for (int u = 1; u < n_units; ++u) {
    lm.begin[static_cast<size_t>(u)] = std::log(1.0 / ns);
    lm.end[static_cast<size_t>(u)] = std::log(1.0 / (ns + 1));
    for (int v = 1; v < n_units; ++v) lm.next(u, v) = std::log(1.0 / (ns + 1));
  }
  return lm;
}

// --- lattice decode ------------------------------------------------------------------

textproc::UnitSeq hmm_decode(const HmmModel& hmm, const RowMatrix& feats, const UnitBigram& lm,
                             const HmmConfig& cfg) {
  require(feats.rows >= 1, "hmm_decode: empty utterance");
  require(feats.cols == hmm.dim, "hmm_decode: feature dimension mismatch");
  require(lm.n_units == hmm.n_units(), "hmm_decode: LM inventory mismatch");

  // Flattened states of all decodable units.
  struct St {
    int unit;
    int state;
    bool first;
    bool last;
  };
  std::vector<St> states;
  std::vector<int> first_of(static_cast<size_t>(hmm.n_units()), -1),
      last_of(static_cast<size_t>(hmm.n_units()), -1);
  for (int u = 1; u < hmm.n_units(); ++u) {
    const int S = hmm.chain_len(u);
    if (S == 0) continue;
    first_of[static_cast<size_t>(u)] = static_cast<int>(states.size());
    for (int j = 0; j < S; ++j) states.push_back({u, j, j == 0, j == S - 1});
    last_of[static_cast<size_t>(u)] = static_cast<int>(states.size()) - 1;
  }
  const int S = static_cast<int>(states.size());
  require(S > 0, "hmm_decode: model has no decodable units");
  const int T = feats.rows;
  const double w = cfg.lm_weight;

  std::vector<double> lstay(static_cast<size_t>(S)), ladv(static_cast<size_t>(S));
  for (int j = 0; j < S; ++j) {
    const HmmState& hs = hmm.units[static_cast<size_t>(states[static_cast<size_t>(j)].unit)]
                                  [static_cast<size_t>(states[static_cast<size_t>(j)].state)];
    lstay[static_cast<size_t>(j)] = std::log(hs.self_loop);
    ladv[static_cast<size_t>(j)] = std::log(1.0 - hs.self_loop);
  }

  double beam = cfg.beam;
  for (int attempt = 0; attempt < 3; ++attempt, beam *= 4.0) {
    std::vector<double> prev(static_cast<size_t>(S), kNegInf), cur(static_cast<size_t>(S));
    // Backpointer: previous flat state, or ~v for a boundary from unit v.
    std::vector<std::vector<int>> from(static_cast<size_t>(T),
                                       std::vector<int>(static_cast<size_t>(S), -1));
    for (int j = 0; j < S; ++j) {
      if (!states[static_cast<size_t>(j)].first) continue;
      prev[static_cast<size_t>(j)] =
          w * lm.begin[static_cast<size_t>(states[static_cast<size_t>(j)].unit)]
          + hmm.emission_logp(states[static_cast<size_t>(j)].unit, 0, feats.row(0));
    }
    for (int t = 1; t < T; ++t) {
      // Best exit score per unit at the previous frame.
      std::vector<double> exit_score(static_cast<size_t>(hmm.n_units()), kNegInf);
      for (int u = 1; u < hmm.n_units(); ++u) {
        const int j = last_of[static_cast<size_t>(u)];
        if (j >= 0)
          exit_score[static_cast<size_t>(u)] = prev[static_cast<size_t>(j)] + ladv[static_cast<size_t>(j)];
      }
      for (int j = 0; j < S; ++j) {
        const St& st = states[static_cast<size_t>(j)];
        double best = prev[static_cast<size_t>(j)] + lstay[static_cast<size_t>(j)];
        int arg = j;
        if (!st.first) {
          const double adv = prev[static_cast<size_t>(j - 1)] + ladv[static_cast<size_t>(j - 1)];
          if (adv > best) {
            best = adv;
            arg = j - 1;
          }
        } else {
          for (int v = 1; v < hmm.n_units(); ++v) {
            if (exit_score[static_cast<size_t>(v)] == kNegInf) continue;
            const double sc = exit_score[static_cast<size_t>(v)] + w * lm.next(v, st.unit);
            if (sc > best) {
              best = sc;
              arg = ~v;
            }
          }
        }
        cur[static_cast<size_t>(j)] =
            best == kNegInf ? kNegInf : best + hmm.emission_logp(st.unit, st.state, feats.row(t));
        from[static_cast<size_t>(t)][static_cast<size_t>(j)] = arg;
      }
      double mx = kNegInf;
      for (double v : cur) mx = std::max(mx, v);
      if (mx == kNegInf) break;
      for (double& v : cur)
        if (v < mx - beam) v = kNegInf;
      std::swap(prev, cur);
    }

    int best_j = -1;
    double best = kNegInf;
    for (int j = 0; j < S; ++j) {
      if (!states[static_cast<size_t>(j)].last) continue;
      const double s = prev[static_cast<size_t>(j)]
                       + w * lm.end[static_cast<size_t>(states[static_cast<size_t>(j)].unit)];
      if (s > best) {
        best = s;
        best_j = j;
      }
    }
    if (best_j < 0 || best == kNegInf) continue;  // widen the beam and retry

    // Backtrack, collecting a unit each time a chain is entered.
    textproc::UnitSeq rev;
    int j = best_j;
    for (int t = T - 1; t >= 1; --t) {
      const int f = from[static_cast<size_t>(t)][static_cast<size_t>(j)];
      if (f < -1) {
        rev.push_back(states[static_cast<size_t>(j)].unit);
        j = last_of[static_cast<size_t>(~f)];
      } else {
        j = f;
      }
    }
    rev.push_back(states[static_cast<size_t>(j)].unit);
    std::reverse(rev.begin(), rev.end());
    return rev;
  }
  throw StageError("hmm_decode: no surviving path even after widening the beam");
}

// --- CTC ---------------------------------------------------------------------------

double ctc_loss(const RowMatrix& logits, const textproc::UnitSeq& target, RowMatrix* grad_out) {
  require(!target.empty(), "ctc_loss: empty target");
  const int T = logits.rows, K = logits.cols;
  require(T >= 1 && K >= 2, "ctc_loss: bad logit shape");
  int repeats = 0;
  for (size_t i = 0; i < target.size(); ++i) {
    require(target[i] >= 1 && target[i] < K, "ctc_loss: target id out of range");
    if (i > 0 && target[i] == target[i - 1]) ++repeats;
  }
  const int L = static_cast<int>(target.size());
  require(T >= L + repeats, "ctc_loss: too few frames for the target");

  // Log-softmax rows.
  RowMatrix lp(T, K);
  for (int t = 0; t < T; ++t) {
    double mx = logits(t, 0);
    for (int k = 1; k < K; ++k) mx = std::max(mx, logits(t, k));
    double z = 0.0;
    for (int k = 0; k < K; ++k) z += std::exp(logits(t, k) - mx);
    const double lz = mx + std::log(z);
    for (int k = 0; k < K; ++k) lp(t, k) = logits(t, k) - lz;
  }

  // Blank-interleaved expansion l' of length 2L+1.
  const int E = 2 * L + 1;
  std::vector<int> lab(static_cast<size_t>(E), 0);
  for (int i = 0; i < L; ++i) lab[static_cast<size_t>(2 * i + 1)] = target[static_cast<size_t>(i)];
  auto skip_ok = [&](int s) {
    return s >= 2 && lab[static_cast<size_t>(s)] != 0
           && lab[static_cast<size_t>(s)] != lab[static_cast<size_t>(s - 2)];
  };

  RowMatrix alpha(T, E, kNegInf);
  alpha(0, 0) = lp(0, lab[0]);
  alpha(0, 1) = lp(0, lab[1]);
  for (int t = 1; t < T; ++t) {
    for (int s = 0; s < E; ++s) {
      double acc = alpha(t - 1, s);
      if (s >= 1) acc = logsumexp2(acc, alpha(t - 1, s - 1));
      if (skip_ok(s)) acc = logsumexp2(acc, alpha(t - 1, s - 2));
      alpha(t, s) = acc == kNegInf ? kNegInf : acc + lp(t, lab[static_cast<size_t>(s)]);
    }
  }
  const double log_z = logsumexp2(alpha(T - 1, E - 1), alpha(T - 1, E - 2));
  if (!(log_z > kNegInf)) throw NumericsError("ctc_loss: vanished total probability");
  const double loss = -log_z;

  if (grad_out) {
    RowMatrix beta(T, E, kNegInf);
    beta(T - 1, E - 1) = lp(T - 1, lab[static_cast<size_t>(E - 1)]);
    beta(T - 1, E - 2) = lp(T - 1, lab[static_cast<size_t>(E - 2)]);
    for (int t = T - 2; t >= 0; --t) {
      for (int s = E - 1; s >= 0; --s) {
        double acc = beta(t + 1, s);
        if (s + 1 < E) acc = logsumexp2(acc, beta(t + 1, s + 1));
        if (s + 2 < E && skip_ok(s + 2)) acc = logsumexp2(acc, beta(t + 1, s + 2));
        beta(t, s) = acc == kNegInf ? kNegInf : acc + lp(t, lab[static_cast<size_t>(s)]);
      }
    }
    *grad_out = RowMatrix(T, K);
    for (int t = 0; t < T; ++t) {
      std::vector<double> occ(static_cast<size_t>(K), 0.0);
      for (int s = 0; s < E; ++s) {
        const double a = alpha(t, s), b = beta(t, s);
        if (a == kNegInf || b == kNegInf) continue;
        // Emission at (t, s) is counted by both alpha and beta.
        occ[static_cast<size_t>(lab[static_cast<size_t>(s)])] +=
            std::exp(a + b - lp(t, lab[static_cast<size_t>(s)]) - log_z);
      }
      for (int k = 0; k < K; ++k)
        (*grad_out)(t, k) = std::exp(lp(t, k)) - occ[static_cast<size_t>(k)];
    }
  }
  return loss;
}

textproc::UnitSeq ctc_greedy_decode(const RowMatrix& logits) {
  textproc::UnitSeq out;
  int prev = -1;
  for (int t = 0; t < logits.rows; ++t) {
    int arg = 0;
    for (int k = 1; k < logits.cols; ++k)
      if (logits(t, k) > logits(t, arg)) arg = k;
    if (arg != prev && arg != 0) out.push_back(arg);
    prev = arg;
  }
  return out;
}

// --- CTC model and training -----------------------------------------------------------

namespace {

grad::TensorPtr ctc_forward(grad::Tape& tape, const grad::ParameterSet& params,
                            const RowMatrix& feats, int kernel) {
  const int pad = (kernel - 1) / 2;
  auto x = grad::Tensor::from({feats.rows, feats.cols}, feats.data);
  auto h = grad::relu(tape, grad::conv1d(tape, x, params.get("w1"), params.get("b1"), pad, pad));
  return grad::conv1d(tape, h, params.get("w2"), params.get("b2"), pad, pad);
}

}  // namespace

RowMatrix CtcModel::logits(const RowMatrix& feats) const {
  require(feats.cols == in_dim, "CtcModel: feature dimension mismatch");
  grad::Tape tape;
  return ctc_forward(tape, params, feats, kernel)->to_matrix();
}

void CtcModel::save(const std::string& path) const { params.save(path); }

CtcModel CtcModel::load(const std::string& path) {
  CtcModel m;
  m.params.load(path);
  const std::vector<double>& meta = m.params.get("meta")->v;
  require(meta.size() == 4, "CtcModel::load: bad meta");
  m.in_dim = static_cast<int>(meta[0]);
  m.n_out = static_cast<int>(meta[1]);
  m.hidden = static_cast<int>(meta[2]);
  m.kernel = static_cast<int>(meta[3]);
  return m;
}

CtcModel ctc_train(const std::vector<RowMatrix>& feats,
                   const std::vector<textproc::UnitSeq>& pseudo, int n_units,
                   const CtcConfig& cfg, CtcTrainInfo* info) {
  require(feats.size() == pseudo.size(), "ctc_train: feats/pseudo size mismatch");
  require(!feats.empty(), "ctc_train: empty corpus");
  require(cfg.kernel % 2 == 1, "ctc_train: kernel must be odd");
  const int d = feats.front().cols;
  const int K = n_units;  // blank + surface units

  CtcModel model;
  model.in_dim = d;
  model.n_out = K;
  model.hidden = cfg.hidden;
  model.kernel = cfg.kernel;
  Rng rng(cfg.seed);
  Rng wrng = rng.split(0xC7C);
  model.params.add("meta", grad::Tensor::from({4}, {static_cast<double>(d), static_cast<double>(K),
                                                    static_cast<double>(cfg.hidden),
                                                    static_cast<double>(cfg.kernel)}),
                   false);
  model.params.add("w1", grad::Tensor::randn({cfg.hidden, d, cfg.kernel},
                                             1.0 / std::sqrt(static_cast<double>(d) * cfg.kernel), wrng));
  model.params.add("b1", grad::Tensor::make({1, cfg.hidden}));
  model.params.add("w2", grad::Tensor::randn({K, cfg.hidden, cfg.kernel},
                                             1.0 / std::sqrt(static_cast<double>(cfg.hidden) * cfg.kernel), wrng));
  model.params.add("b2", grad::Tensor::make({1, K}));

  // Feasibility screen: targets must fit their frame counts.
  std::vector<size_t> usable;
  int skipped = 0;
  for (size_t i = 0; i < feats.size(); ++i) {
    const auto& tr = pseudo[i];
    int repeats = 0;
    for (size_t j = 1; j < tr.size(); ++j)
      if (tr[j] == tr[j - 1]) ++repeats;
    if (tr.empty() || feats[i].rows < static_cast<int>(tr.size()) + repeats) {
      ++skipped;
      continue;
    }
    usable.push_back(i);
  }
  require(!usable.empty(), "ctc_train: no usable utterances");

  // Deterministic validation split on the usable set.
  std::vector<size_t> order = usable;
  Rng srng = rng.split(0x51);
  for (size_t i = order.size(); i > 1; --i)
    std::swap(order[i - 1], order[srng.below(i)]);
  size_t n_val = cfg.val_fraction > 0
                     ? std::max<size_t>(1, static_cast<size_t>(std::llround(cfg.val_fraction * static_cast<double>(order.size()))))
                     : 0;
  if (n_val >= order.size()) n_val = order.size() - 1;
  std::vector<size_t> val(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<size_t> train(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());

  grad::Adam opt(grad::AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});
  double best_per = 1e300;
  int best_epoch = -1;
  std::vector<std::vector<double>> best_values;

  auto snapshot = [&]() {
    best_values.clear();
    for (const auto& [name, t] : model.params.items()) best_values.push_back(t->v);
  };
  snapshot();

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng erng = rng.split(0xE000 + static_cast<uint64_t>(epoch));
    std::vector<size_t> sched = train;
    for (size_t i = sched.size(); i > 1; --i)
      std::swap(sched[i - 1], sched[erng.below(i)]);

    double loss_sum = 0.0;
    size_t loss_n = 0;
    for (size_t at = 0; at < sched.size(); at += static_cast<size_t>(cfg.batch)) {
      const size_t hi = std::min(sched.size(), at + static_cast<size_t>(cfg.batch));
      grad::Tape tape;
      std::vector<grad::TensorPtr> dummies;
      for (size_t b = at; b < hi; ++b) {
        const size_t i = sched[b];
        auto logits_t = ctc_forward(tape, model.params, feats[i], cfg.kernel);
        RowMatrix g;
        const double loss = ctc_loss(logits_t->to_matrix(), pseudo[i], &g);
        loss_sum += loss;
        ++loss_n;
        // Route the analytic CTC gradient into the tape through a scalar
        // whose derivative with respect to the logits is exactly g.
        auto g_const = grad::Tensor::from({g.rows, g.cols}, g.data);
        dummies.push_back(grad::sum_all(tape, grad::mul(tape, logits_t, g_const)));
      }
      for (const auto& dmy : dummies) tape.backward(dmy, 1.0 / static_cast<double>(hi - at));
      opt.step(model.params);
    }
    if (info) info->train_loss.push_back(loss_n ? loss_sum / static_cast<double>(loss_n) : 0.0);

    if (!val.empty()) {
      std::vector<std::pair<textproc::UnitSeq, textproc::UnitSeq>> pairs;
      for (size_t i : val)
        pairs.push_back({ctc_greedy_decode(model.logits(feats[i])), pseudo[i]});
      const double per = textproc::corpus_error_rate(pairs);
      if (info) info->val_per.push_back(per);
      if (per < best_per) {
        best_per = per;
        best_epoch = epoch;
        snapshot();
      }
    } else {
      best_epoch = epoch;
      snapshot();
    }
  }

  // Restore the best checkpoint.
  size_t idx = 0;
  for (const auto& [name, t] : model.params.items()) t->v = best_values[idx++];
  if (info) {
    info->best_epoch = best_epoch;
    info->skipped = skipped;
  }
  return model;
}

}  // namespace utts::selftrain
