// Stage-2 synthesizer: attention-based sequence-to-sequence mel prediction
// over unit transcripts, trained teacher-forced with a guided-attention
// penalty, plus phase-reconstruction synthesis back to a waveform.
#pragma once

#include <string>
#include <vector>

#include "utts/common.hpp"
#include "utts/grad.hpp"
#include "utts/signal.hpp"
#include "utts/textproc.hpp"

namespace utts::tts {

// Diagonal prior on the attention matrix: cells far from n/N = t/T are
// penalized with weight 1 - exp(-((n/N - t/T)^2) / (2 g^2)).
struct GuidedAttentionConfig {
  double g = 0.2;       // diagonal bandwidth, > 0
  double lambda = 1.0;  // weight of the attention term in the total loss
};

struct TtsConfig {
  int n_units = 0;  // embedding rows; unit ids index the table directly
  int n_mels = 80;
  int emb_dim = 32;
  int enc_hidden = 64;
  int dec_hidden = 64;
  int att_dim = 32;
  int prenet_dim = 32;
  int enc_layers = 2;  // conv layers ahead of the encoder recurrence
  int enc_kernel = 3;  // odd
  int rho = 2;         // mel frames emitted per decoder step
  int max_steps_per_unit = 8;  // autoregressive cap: steps <= per-unit * |units|
  GuidedAttentionConfig ga;
  int epochs = 80;
  int batch = 8;
  double lr = 1e-3;
  uint64_t seed = 1;

  void validate() const;
};

// Embedding + conv stack + recurrent encoder; autoregressive recurrent
// decoder with content-based attention, a mel projection emitting rho
// frames per step, and a stop head.
struct TtsModel {
  TtsConfig cfg;
  grad::ParameterSet params;

  static TtsModel init(const TtsConfig& cfg, Rng& rng);
  void save(const std::string& path) const;
  static TtsModel load(const std::string& path);
};

// One forward pass; tensors live on the caller's tape.
struct TtsForward {
  grad::TensorPtr mel;        // (steps * rho) x n_mels, log-mel domain
  grad::TensorPtr attention;  // steps x |units|, each row sums to 1
  grad::TensorPtr stop;       // steps x 1 logits
  int steps = 0;
  bool hit_max_steps = false;  // autoregressive runs only
};

// Teacher forcing when teacher_mel is given (frame count padded up to a
// multiple of rho by repeating the last frame); otherwise autoregressive
// feedback until the stop sigmoid exceeds 1/2 or the step cap is hit.
TtsForward tts_forward(grad::Tape& tape, const TtsModel& m, const textproc::UnitSeq& units,
                       const RowMatrix* teacher_mel);

// Last row repeated until rows divide rho. rho >= 1, m non-empty.
RowMatrix pad_to_multiple(const RowMatrix& m, int rho);

// All zeros except a 1 on the final step.
std::vector<double> stop_labels(int n_steps);

// The penalty mask W alone, n_rows x n_cols.
RowMatrix guided_attention_weights(int n_rows, int n_cols, double g);

// mean over (n, t) of A[n, t] * W[n, t].
double guided_attention_loss(const RowMatrix& a, const GuidedAttentionConfig& cfg);

struct TtsLossParts {
  grad::TensorPtr total;  // L1 + BCE + lambda * guided attention
  double l1 = 0.0;
  double bce = 0.0;
  double ga = 0.0;
};

// Teacher-forced loss against a target mel (padded internally like the
// forward pass) and per-step stop labels.
TtsLossParts tts_loss(grad::Tape& tape, const TtsForward& fwd, const RowMatrix& target_mel,
                      const std::vector<double>& stops, const GuidedAttentionConfig& cfg);

struct TtsEpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_l1 = 0.0;
};

struct TtsTrainLog {
  std::vector<TtsEpochRecord> records;

  void save_csv(const std::string& path) const;
  static TtsTrainLog load_csv(const std::string& path);
};

struct TtsTrainResult {
  TtsModel model;  // best-validation checkpoint
  TtsTrainLog log;
  double best_val = 1e300;
  int best_epoch = -1;
};

// Teacher-forced Adam training; one record per epoch; the returned model
// carries the weights of the best validation epoch.
TtsTrainResult tts_train(const std::vector<RowMatrix>& mels,
                         const std::vector<textproc::UnitSeq>& units,
                         const std::vector<RowMatrix>& val_mels,
                         const std::vector<textproc::UnitSeq>& val_units, const TtsConfig& cfg);

struct SynthesisResult {
  RowMatrix mel;        // log-mel, (steps * rho) rows
  RowMatrix attention;  // steps x |units|
  int stop_step = -1;   // step that fired the stop head, -1 if the cap hit
  bool hit_max_steps = false;
};

struct SynthOutput {
  signal::Wave wave;
  SynthesisResult detail;
};

// Autoregressive mel -> linear magnitude -> phase reconstruction. The
// waveform is trimmed to exactly mel frames x hop samples.
SynthOutput synthesize(const TtsModel& m, const textproc::UnitSeq& units,
                       const signal::MelBank& bank, const signal::StftConfig& scfg, int gl_iters,
                       uint64_t seed = 1);

}  // namespace utts::tts
