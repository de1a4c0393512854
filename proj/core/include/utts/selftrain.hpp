#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "utts/common.hpp"
#include "utts/grad.hpp"
#include "utts/textproc.hpp"

namespace utts::selftrain {

// Refinement stages in pipeline order.
enum class Stage { Gan = 0, Hmm = 1, Ctc = 2 };

const char* stage_name(Stage s);
Stage stage_from_name(const std::string& name);

// Pseudo transcripts for a corpus at one refinement stage. Serialized as
// TSV: utterance id, stage tag, space-joined unit ids.
struct PseudoTranscriptSet {
  Stage stage{Stage::Gan};
  std::map<std::string, textproc::UnitSeq> by_id;

  void save(const std::string& path) const;
  static PseudoTranscriptSet load(const std::string& path);
};

// --- HMM ---------------------------------------------------------------------

struct HmmConfig {
  int states_per_unit{3};  // silence always uses a single state
  double var_floor{1e-4};
  int iterations{10};
  double lm_weight{1.0};
  double beam{1e30};  // log-prob margin for decode pruning; huge = exact
};

struct HmmState {
  std::vector<double> mean;
  std::vector<double> var;
  double self_loop{0.5};  // P(stay); P(advance) is the complement
};

// One no-skip left-to-right chain per unit. The blank unit (id 0) never
// appears in transcripts and keeps an empty chain.
struct HmmModel {
  std::vector<std::vector<HmmState>> units;  // indexed by unit id
  int dim{0};
  int silence_id{-1};
  int states_per_unit{3};

  int n_units() const { return static_cast<int>(units.size()); }
  int chain_len(int unit) const { return static_cast<int>(units[static_cast<size_t>(unit)].size()); }

  // Diagonal-Gaussian log density of one frame under one state.
  double emission_logp(int unit, int state, const double* frame) const;

  void save(const std::string& path) const;
  static HmmModel load(const std::string& path);
};

struct HmmInitInfo {
  int used{0};
  int skipped{0};  // utterances shorter than 3 x unit count
};

struct HmmTrainInfo {
  std::vector<double> log_likelihood;  // total aligned LL per iteration
  HmmInitInfo init;
};

// Flat-start from uniform segmentation: each utterance's frames are split
// evenly across the concatenated states of its pseudo transcript, Gaussian
// stats come from the assigned frames, and self-loops from the implied
// state durations. Utterances shorter than 3 x (unit count) frames are
// skipped with a warning on stderr. Units absent from every transcript
// fall back to global frame statistics.
HmmModel hmm_init(const std::vector<RowMatrix>& feats,
                  const std::vector<textproc::UnitSeq>& pseudo, int n_units, int silence_id,
                  const HmmConfig& cfg, HmmInitInfo* info = nullptr);

// Forced alignment: max-probability state path through the concatenated
// chains of `units`. The score is the sum of per-frame emission log
// densities plus the T-1 transition log probs between frames;
// entering the first state and leaving the last are free. Throws
// StageError when no legal path exists (T < total states).
struct Alignment {
  std::vector<int> unit_index;  // position within `units` per frame
  std::vector<int> state;       // state within that unit's chain per frame
  double log_prob{0.0};
};
Alignment viterbi_align(const HmmModel& hmm, const RowMatrix& feats,
                        const textproc::UnitSeq& units);

// Hard-EM: alternate forced alignment with Gaussian/transition
// re-estimation. States left empty by an iteration keep their previous
// parameters (variances stay floored). The aligned log-likelihood trace
// is non-decreasing within tolerance.
HmmModel hmm_train(const std::vector<RowMatrix>& feats,
                   const std::vector<textproc::UnitSeq>& pseudo, int n_units, int silence_id,
                   const HmmConfig& cfg, HmmTrainInfo* info = nullptr);

// Unit bigram in log domain for lattice decoding. Estimated with add-delta
// smoothing over surface units; the blank unit is excluded from mass.
struct UnitBigram {
  int n_units{0};
  std::vector<double> begin;  // log P(first = u)
  RowMatrix next;             // log P(v | u)
  std::vector<double> end;    // log P(end | u)

  static UnitBigram estimate(const std::vector<textproc::UnitSeq>& seqs, int n_units,
                             double smoothing = 0.1);
  static UnitBigram uniform(int n_units);
};

// Viterbi over the unit lattice: within-unit chain transitions plus
// lm_weight-scaled bigram scores where one unit hands over to the next,
// including begin/end terms. Beam pruning drops states whose running
// score trails the frame best by more than `beam`.
textproc::UnitSeq hmm_decode(const HmmModel& hmm, const RowMatrix& feats, const UnitBigram& lm,
                             const HmmConfig& cfg);

// --- CTC ---------------------------------------------------------------------

struct CtcConfig {
  int hidden{64};
  int kernel{5};
  int epochs{12};
  int batch{8};
  double lr{1e-3};
  double val_fraction{0.1};  // utterances held out for pseudo-text validation
  uint64_t seed{1};
};

// Two conv1d layers over framewise features; logit columns follow unit
// ids, so column 0 is the CTC blank and width = surface inventory + 1.
struct CtcModel {
  grad::ParameterSet params;
  int in_dim{0};
  int n_out{0};
  int hidden{0};
  int kernel{5};

  RowMatrix logits(const RowMatrix& feats) const;

  void save(const std::string& path) const;
  static CtcModel load(const std::string& path);
};

// Negative log marginal probability of the target under all CTC
// alignments (log-domain forward), with the analytic gradient with
// respect to the logits (softmax minus occupancy) written to grad_out
// when given. Throws when T cannot fit the expanded target.
double ctc_loss(const RowMatrix& logits, const textproc::UnitSeq& target,
                RowMatrix* grad_out = nullptr);

// Framewise argmax (ties to the lowest id), collapse repeats, drop blanks.
textproc::UnitSeq ctc_greedy_decode(const RowMatrix& logits);

struct CtcTrainInfo {
  std::vector<double> train_loss;  // mean per epoch
  std::vector<double> val_per;     // greedy PER vs pseudo text per epoch
  int best_epoch{-1};
  int skipped{0};  // utterances whose target cannot fit their frame count
};

// Adam training on pseudo transcripts; keeps the checkpoint with the best
// pseudo-text validation PER.
CtcModel ctc_train(const std::vector<RowMatrix>& feats,
                   const std::vector<textproc::UnitSeq>& pseudo, int n_units,
                   const CtcConfig& cfg, CtcTrainInfo* info = nullptr);

}  // namespace utts::selftrain
