#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "utts/common.hpp"
#include "utts/grad.hpp"
#include "utts/textproc.hpp"

namespace utts::asru {

// Stage-1 unsupervised recognizer: a generator maps reduced segment
// vectors to distributions over surface units and is trained
// adversarially against a discriminator that reads one-hot sequences of
// real text. Unit columns follow inventory ids shifted down by one
// (column c is unit id c + 1; the blank never appears).

// One conv1d layer to |V| logits, row softmax on top.
struct GeneratorModel {
  grad::ParameterSet params;  // "w" {n_out, in_dim, kernel}, "b" {1, n_out}
  int in_dim{0};
  int n_out{0};
  int kernel{4};

  static GeneratorModel init(int in_dim, int n_out, int kernel, Rng& rng);

  void save(const std::string& path) const;
  static GeneratorModel load(const std::string& path);
};

// Four conv1d layers with leaky relu between them, mean-pooled over time
// to a scalar realness logit.
struct DiscriminatorModel {
  grad::ParameterSet params;  // "w1".."w4", "b1".."b4"
  int n_in{0};
  int hidden{0};
  int kernel{3};  // odd
  double slope{0.1};

  static DiscriminatorModel init(int n_in, int hidden, int kernel, Rng& rng);

  void save(const std::string& path) const;
  static DiscriminatorModel load(const std::string& path);
};

struct GanConfig {
  double lambda_gp{1.5};  // gradient penalty weight (added to L_D)
  double gamma_sp{0.5};   // smoothness weight (added to L_G)
  double eta_pd{2.0};     // diversity weight (added to L_G)
  int steps{5000};
  int batch{16};
  double lr_g{5e-4};
  double lr_d{2e-4};
  int val_interval{250};
  uint64_t seed{1};
  int gen_kernel{4};
  int disc_hidden{32};
  int disc_kernel{3};
};

struct TrainLogRecord {
  int step{0};
  double l_d{0}, l_g{0}, gp{0}, sp{0}, pd{0};  // means since the last record
  double val_per{0};
};

// Per-validation-interval records with strictly increasing step indices.
struct TrainLog {
  std::vector<TrainLogRecord> records;

  void save_csv(const std::string& path) const;
  static TrainLog load_csv(const std::string& path);
};

// Softmax distributions over units for every segment vector (S x |V|).
RowMatrix generator_forward(const GeneratorModel& gen, const RowMatrix& segs);

// Run-length collapse of equal adjacent ids.
textproc::UnitSeq collapse_argmax(const std::vector<int>& ids);
// Argmax per row (ties to the lowest id), mapped to unit ids, collapsed.
textproc::UnitSeq collapse_argmax(const RowMatrix& dists);
// Mean of each argmax run's rows: the soft sequence the discriminator
// reads. Rows still sum to one; run argmaxes match collapse_argmax.
RowMatrix collapse_soft(const RowMatrix& dists);

// One-hot rows for a unit sequence (unit id u -> column u - 1).
RowMatrix one_hot_rows(const textproc::UnitSeq& seq, int n_out);

struct GanBatchLosses {
  double l_d{0};  // -log s(D(real)) - log(1 - s(D(fake))) + lambda_gp * gp
  double l_g{0};  // -log s(D(fake)) + gamma_sp * sp + eta_pd * pd
  double gp{0};   // ||grad_x D(x~)||^2 at x~ = a real + (1-a) fake, truncated
  double sp{0};   // sum_t ||p_t - p_{t+1}||^2 over the soft sequences
  double pd{0};   // -H(mean distribution over the batch's rows)
};

// Batch loss values (no gradients). `alphas` holds one interpolation
// coefficient per batch item; fake and real are matched by index and
// truncated to the shorter of the pair inside the penalty.
GanBatchLosses gan_losses(const std::vector<RowMatrix>& fake, const std::vector<RowMatrix>& real,
                          const DiscriminatorModel& disc, const GanConfig& cfg,
                          const std::vector<double>& alphas);

// Discriminator loss with gradients left in disc.params (no update). The
// gradient-penalty term's parameter gradient is exact: the penalty's own
// input gradient is computed in closed form and routed through a
// directional-derivative graph with frozen activation masks.
GanBatchLosses gan_d_step(DiscriminatorModel& disc, const std::vector<RowMatrix>& fake,
                          const std::vector<RowMatrix>& real, const GanConfig& cfg,
                          const std::vector<double>& alphas);

// Generator loss with gradients left in gen.params (no update); the
// discriminator is read-only and its gradients are cleared afterwards.
GanBatchLosses gan_g_step(GeneratorModel& gen, const DiscriminatorModel& disc,
                          const std::vector<RowMatrix>& segs, const GanConfig& cfg);

// generator_forward + collapse_argmax, silence stripped at the edges.
textproc::UnitSeq greedy_decode(const GeneratorModel& gen, const RowMatrix& segs,
                                int silence_id = 1);

struct GanTrainResult {
  GeneratorModel gen;
  DiscriminatorModel disc;
  TrainLog log;
  double best_val_per{1e300};
  int best_step{-1};
};

// Alternating Adam on unpaired speech segments and text. Model selection
// reads only the declared validation pairs: every val_interval steps the
// val set is greedy-decoded and the checkpoint with minimum PER is kept.
GanTrainResult gan_train(const std::vector<RowMatrix>& segs,
                         const std::vector<textproc::UnitSeq>& text, int n_units,
                         const GanConfig& cfg, const std::vector<RowMatrix>& val_segs,
                         const std::vector<textproc::UnitSeq>& val_refs);

struct GridCell {
  double lambda_gp{0}, gamma_sp{0}, eta_pd{0};
  double best_val_per{1e300};  // +inf-like sentinel when the cell diverged
  bool diverged{false};
  TrainLog log;
};

struct GridSearchResult {
  GanConfig best_cfg;
  GanTrainResult final;  // full-length rerun at the winning cell
  std::vector<GridCell> cells;
};

// Trains one reduced-step model per (lambda_gp, gamma_sp, eta_pd) cell,
// picks the cell with minimum validation PER, and reruns full training
// there. Throws StageError when every cell diverged.
GridSearchResult grid_search(const std::vector<RowMatrix>& segs,
                             const std::vector<textproc::UnitSeq>& text, int n_units,
                             const GanConfig& base_cfg, const std::vector<double>& lambdas,
                             const std::vector<double>& gammas, const std::vector<double>& etas,
                             int reduced_steps, const std::vector<RowMatrix>& val_segs,
                             const std::vector<textproc::UnitSeq>& val_refs);

}  // namespace utts::asru
