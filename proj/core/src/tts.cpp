#include "utts/tts.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace utts::tts {

namespace {

// Names of the gru parameter triplets, per prefix ("enc_"/"dec_").
grad::GruParams gru_params(const grad::ParameterSet& p, const std::string& prefix) {
  grad::GruParams g;
  g.wz = p.get(prefix + "wz");
  g.uz = p.get(prefix + "uz");
  g.bz = p.get(prefix + "bz");
  g.wr = p.get(prefix + "wr");
  g.ur = p.get(prefix + "ur");
  g.br = p.get(prefix + "br");
  g.wn = p.get(prefix + "wn");
  g.un = p.get(prefix + "un");
  g.bn = p.get(prefix + "bn");
  return g;
}

void add_gru(grad::ParameterSet& p, const std::string& prefix, int in_dim, int hidden, Rng& rng) {
  const double sx = 1.0 / std::sqrt(static_cast<double>(in_dim));
  const double sh = 1.0 / std::sqrt(static_cast<double>(hidden));
  for (const char* gate : {"z", "r", "n"}) {
    p.add(prefix + "w" + gate, grad::Tensor::randn({in_dim, hidden}, sx, rng));
    p.add(prefix + "u" + gate, grad::Tensor::randn({hidden, hidden}, sh, rng));
    p.add(prefix + "b" + gate, grad::Tensor::make({1, hidden}));
  }
}

// Row r of a matrix node, as a 1 x cols node, via a constant selector.
grad::TensorPtr row_of(grad::Tape& t, const grad::TensorPtr& x, int r) {
  auto sel = grad::Tensor::make({1, x->shape[0]});
  sel->v[static_cast<size_t>(r)] = 1.0;
  return grad::linear(t, sel, x);
}

// Embedding -> conv stack -> recurrence; returns the T x enc_hidden state
// matrix the decoder attends over.
grad::TensorPtr encode(grad::Tape& t, const TtsModel& m, const textproc::UnitSeq& units) {
  require(!units.empty(), "tts: empty unit sequence");
  for (int u : units)
    require(u >= 0 && u < m.cfg.n_units, "tts: unit id outside the embedding table");
  const int k = m.cfg.enc_kernel;
  grad::TensorPtr cur = grad::embedding(t, m.params.get("emb"), units);
  for (int l = 0; l < m.cfg.enc_layers; ++l) {
    cur = grad::conv1d(t, cur, m.params.get("enc_cw" + std::to_string(l)),
                       m.params.get("enc_cb" + std::to_string(l)), k / 2, (k - 1) / 2);
    cur = grad::relu(t, cur);
  }
  grad::GruParams gru = gru_params(m.params, "enc_");
  auto h = grad::Tensor::make({1, m.cfg.enc_hidden});
  std::vector<grad::TensorPtr> states;
  for (int r = 0; r < cur->shape[0]; ++r) {
    h = grad::gru_cell(t, row_of(t, cur, r), h, gru);
    states.push_back(h);
  }
  return grad::stack_rows(t, states);
}

struct StepOut {
  grad::TensorPtr h;      // 1 x dec_hidden
  grad::TensorPtr att;    // 1 x T
  grad::TensorPtr group;  // 1 x (rho * n_mels)
  grad::TensorPtr stop;   // 1 x 1
};

// One decoder step: attend with the previous hidden state, advance the
// recurrence on [prenet(prev frame), context], project mels and stop.
StepOut decode_step(grad::Tape& t, const TtsModel& m, const grad::TensorPtr& enc_states,
                    const grad::TensorPtr& enc_proj, const grad::GruParams& gru,
                    const grad::TensorPtr& h_prev, const grad::TensorPtr& prev_frame) {
  auto pre = grad::relu(
      t, grad::linear(t, prev_frame, m.params.get("pre_w"), m.params.get("pre_b")));
  auto qp = grad::linear(t, h_prev, m.params.get("att_q"));
  auto scores = grad::linear(t, grad::tanh_op(t, grad::add_rowvec(t, enc_proj, qp)),
                             m.params.get("att_v"));
  StepOut out;
  out.att = grad::softmax_rows(t, grad::transpose(t, scores));
  auto context = grad::linear(t, out.att, enc_states);
  out.h = grad::gru_cell(t, grad::concat_cols(t, pre, context), h_prev, gru);
  auto feat = grad::concat_cols(t, out.h, context);
  out.group = grad::linear(t, feat, m.params.get("mel_w"), m.params.get("mel_b"));
  out.stop = grad::linear(t, feat, m.params.get("stop_w"), m.params.get("stop_b"));
  return out;
}

}  // namespace

void TtsConfig::validate() const {
  require(n_units >= 2, "tts: unit inventory too small");
  require(n_mels >= 1 && emb_dim >= 1 && enc_hidden >= 1 && dec_hidden >= 1 && att_dim >= 1 &&
              prenet_dim >= 1,
          "tts: dimensions must be positive");
  require(enc_layers >= 1 && enc_kernel >= 1 && enc_kernel % 2 == 1,
          "tts: encoder needs at least one conv layer with an odd kernel");
  require(rho >= 1, "tts: reduction factor must be positive");
  require(max_steps_per_unit >= 1, "tts: step cap must be positive");
  require(ga.g > 0.0, "tts: attention bandwidth must be positive");
  require(ga.lambda >= 0.0, "tts: attention weight must be non-negative");
  require(epochs >= 1 && batch >= 1 && lr > 0.0, "tts: bad training schedule");
}

TtsModel TtsModel::init(const TtsConfig& cfg, Rng& rng) {
  cfg.validate();
  TtsModel m;
  m.cfg = cfg;
  const std::vector<double> meta = {
      static_cast<double>(cfg.n_units),      static_cast<double>(cfg.n_mels),
      static_cast<double>(cfg.emb_dim),      static_cast<double>(cfg.enc_hidden),
      static_cast<double>(cfg.dec_hidden),   static_cast<double>(cfg.att_dim),
      static_cast<double>(cfg.prenet_dim),   static_cast<double>(cfg.enc_layers),
      static_cast<double>(cfg.enc_kernel),   static_cast<double>(cfg.rho),
      static_cast<double>(cfg.max_steps_per_unit),
      cfg.ga.g,
      cfg.ga.lambda,
      static_cast<double>(cfg.epochs),       static_cast<double>(cfg.batch),
      cfg.lr,
      static_cast<double>(cfg.seed)};
  m.params.add("meta", grad::Tensor::from({static_cast<int>(meta.size())}, meta), false);

  m.params.add("emb", grad::Tensor::randn({cfg.n_units, cfg.emb_dim}, 1.0, rng));
  for (int l = 0; l < cfg.enc_layers; ++l) {
    m.params.add("enc_cw" + std::to_string(l),
                 grad::Tensor::randn({cfg.emb_dim, cfg.emb_dim, cfg.enc_kernel},
                                     1.0 / std::sqrt(static_cast<double>(cfg.emb_dim) *
                                                     cfg.enc_kernel),
                                     rng));
    m.params.add("enc_cb" + std::to_string(l), grad::Tensor::make({1, cfg.emb_dim}));
  }
  add_gru(m.params, "enc_", cfg.emb_dim, cfg.enc_hidden, rng);

  m.params.add("att_q", grad::Tensor::randn({cfg.dec_hidden, cfg.att_dim},
                                            1.0 / std::sqrt(static_cast<double>(cfg.dec_hidden)),
                                            rng));
  m.params.add("att_e", grad::Tensor::randn({cfg.enc_hidden, cfg.att_dim},
                                            1.0 / std::sqrt(static_cast<double>(cfg.enc_hidden)),
                                            rng));
  m.params.add("att_b", grad::Tensor::make({1, cfg.att_dim}));
  m.params.add("att_v", grad::Tensor::randn({cfg.att_dim, 1},
                                            1.0 / std::sqrt(static_cast<double>(cfg.att_dim)),
                                            rng));

  m.params.add("pre_w", grad::Tensor::randn({cfg.n_mels, cfg.prenet_dim},
                                            1.0 / std::sqrt(static_cast<double>(cfg.n_mels)),
                                            rng));
  m.params.add("pre_b", grad::Tensor::make({1, cfg.prenet_dim}));
  add_gru(m.params, "dec_", cfg.prenet_dim + cfg.enc_hidden, cfg.dec_hidden, rng);

  const int feat = cfg.dec_hidden + cfg.enc_hidden;
  m.params.add("mel_w", grad::Tensor::randn({feat, cfg.rho * cfg.n_mels},
                                            1.0 / std::sqrt(static_cast<double>(feat)), rng));
  m.params.add("mel_b", grad::Tensor::make({1, cfg.rho * cfg.n_mels}));
  m.params.add("stop_w", grad::Tensor::randn({feat, 1},
                                             1.0 / std::sqrt(static_cast<double>(feat)), rng));
  m.params.add("stop_b", grad::Tensor::make({1, 1}));
  return m;
}

void TtsModel::save(const std::string& path) const { params.save(path); }

TtsModel TtsModel::load(const std::string& path) {
  TtsModel m;
  m.params.load(path);
  const auto& meta = m.params.get("meta")->v;
  require(meta.size() == 17, "TtsModel::load: bad meta");
  m.cfg.n_units = static_cast<int>(meta[0]);
  m.cfg.n_mels = static_cast<int>(meta[1]);
  m.cfg.emb_dim = static_cast<int>(meta[2]);
  m.cfg.enc_hidden = static_cast<int>(meta[3]);
  m.cfg.dec_hidden = static_cast<int>(meta[4]);
  m.cfg.att_dim = static_cast<int>(meta[5]);
  m.cfg.prenet_dim = static_cast<int>(meta[6]);
  m.cfg.enc_layers = static_cast<int>(meta[7]);
  m.cfg.enc_kernel = static_cast<int>(meta[8]);
  m.cfg.rho = static_cast<int>(meta[9]);
  m.cfg.max_steps_per_unit = static_cast<int>(meta[10]);
  m.cfg.ga.g = meta[11];
  m.cfg.ga.lambda = meta[12];
  m.cfg.epochs = static_cast<int>(meta[13]);
  m.cfg.batch = static_cast<int>(meta[14]);
  m.cfg.lr = meta[15];
  m.cfg.seed = static_cast<uint64_t>(meta[16]);
  m.cfg.validate();
  return m;
}

RowMatrix pad_to_multiple(const RowMatrix& m, int rho) {
  require(m.rows >= 1, "pad_to_multiple: empty matrix");
  require(rho >= 1, "pad_to_multiple: bad factor");
  const int rem = m.rows % rho;
  if (rem == 0) return m;
  RowMatrix out(m.rows + rho - rem, m.cols);
  std::copy(m.data.begin(), m.data.end(), out.data.begin());
  for (int r = m.rows; r < out.rows; ++r)
    for (int c = 0; c < m.cols; ++c) out(r, c) = m(m.rows - 1, c);
  return out;
}

std::vector<double> stop_labels(int n_steps) {
  require(n_steps >= 1, "stop_labels: need at least one step");
  std::vector<double> y(static_cast<size_t>(n_steps), 0.0);
  y.back() = 1.0;
  return y;
}

TtsForward tts_forward(grad::Tape& t, const TtsModel& m, const textproc::UnitSeq& units,
                       const RowMatrix* teacher_mel) {
  auto enc_states = encode(t, m, units);
  auto enc_proj =
      grad::add_rowvec(t, grad::linear(t, enc_states, m.params.get("att_e")),
                       m.params.get("att_b"));
  grad::GruParams dec = gru_params(m.params, "dec_");

  TtsForward out;
  grad::TensorPtr h = grad::Tensor::make({1, m.cfg.dec_hidden});
  grad::TensorPtr prev = grad::Tensor::make({1, m.cfg.n_mels});
  std::vector<grad::TensorPtr> groups, atts, stops;

  if (teacher_mel) {
    require(teacher_mel->cols == m.cfg.n_mels, "tts: teacher mel width mismatch");
    const RowMatrix padded = pad_to_multiple(*teacher_mel, m.cfg.rho);
    const int n_steps = padded.rows / m.cfg.rho;
    for (int n = 0; n < n_steps; ++n) {
      if (n > 0) {
        const int r = n * m.cfg.rho - 1;
        prev = grad::Tensor::from({1, m.cfg.n_mels},
                                  std::vector<double>(padded.row(r), padded.row(r) + padded.cols));
      }
      StepOut s = decode_step(t, m, enc_states, enc_proj, dec, h, prev);
      h = s.h;
      groups.push_back(s.group);
      atts.push_back(s.att);
      stops.push_back(s.stop);
    }
    out.steps = n_steps;
  } else {
    const int cap = m.cfg.max_steps_per_unit * static_cast<int>(units.size());
    out.hit_max_steps = true;
    for (int n = 0; n < cap; ++n) {
      StepOut s = decode_step(t, m, enc_states, enc_proj, dec, h, prev);
      h = s.h;
      groups.push_back(s.group);
      atts.push_back(s.att);
      stops.push_back(s.stop);
      ++out.steps;
      if (1.0 / (1.0 + std::exp(-s.stop->v[0])) > 0.5) {
        out.hit_max_steps = false;
        break;
      }
      prev = row_of(t, grad::reshape(t, s.group, {m.cfg.rho, m.cfg.n_mels}), m.cfg.rho - 1);
    }
  }

  out.mel = grad::reshape(t, grad::stack_rows(t, groups), {out.steps * m.cfg.rho, m.cfg.n_mels});
  out.attention = grad::stack_rows(t, atts);
  out.stop = grad::stack_rows(t, stops);
  return out;
}

RowMatrix guided_attention_weights(int n_rows, int n_cols, double g) {
  require(n_rows >= 1 && n_cols >= 1, "guided attention: empty matrix");
  require(g > 0.0, "guided attention: bandwidth must be positive");
  RowMatrix w(n_rows, n_cols);
  for (int n = 0; n < n_rows; ++n)
    for (int t = 0; t < n_cols; ++t) {
      const double d = static_cast<double>(n) / n_rows - static_cast<double>(t) / n_cols;
      w(n, t) = 1.0 - std::exp(-(d * d) / (2.0 * g * g));
    }
  return w;
}

double guided_attention_loss(const RowMatrix& a, const GuidedAttentionConfig& cfg) {
  RowMatrix w = guided_attention_weights(a.rows, a.cols, cfg.g);
  double total = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) total += a.data[i] * w.data[i];
  return total / static_cast<double>(a.data.size());
}

TtsLossParts tts_loss(grad::Tape& t, const TtsForward& fwd, const RowMatrix& target_mel,
                      const std::vector<double>& stops, const GuidedAttentionConfig& cfg) {
  require(fwd.mel && fwd.attention && fwd.stop, "tts_loss: incomplete forward bundle");
  require(fwd.steps >= 1, "tts_loss: empty forward bundle");
  require(target_mel.cols == fwd.mel->shape[1], "tts_loss: mel width mismatch");
  const RowMatrix target = pad_to_multiple(target_mel, fwd.mel->shape[0] / fwd.steps);
  require(static_cast<int>(stops.size()) == fwd.steps, "tts_loss: stop label count mismatch");

  auto tgt = grad::Tensor::from({target.rows, target.cols}, target.data);
  require(tgt->shape == fwd.mel->shape, "tts_loss: target frames do not match prediction");
  auto l1 = grad::mean_all(t, grad::abs_op(t, grad::sub(t, fwd.mel, tgt)));

  auto y = grad::Tensor::from({fwd.steps, 1}, stops);
  auto bce = grad::mean_all(t, grad::sub(t, grad::softplus(t, fwd.stop), grad::mul(t, fwd.stop, y)));

  RowMatrix wm = guided_attention_weights(fwd.attention->shape[0], fwd.attention->shape[1], cfg.g);
  auto w = grad::Tensor::from({wm.rows, wm.cols}, wm.data);
  auto ga = grad::mean_all(t, grad::mul(t, fwd.attention, w));

  TtsLossParts parts;
  parts.l1 = l1->v[0];
  parts.bce = bce->v[0];
  parts.ga = ga->v[0];
  parts.total = grad::add(t, grad::add(t, l1, bce), grad::scale(t, ga, cfg.lambda));
  return parts;
}

// --- training -----------------------------------------------------------------

void TtsTrainLog::save_csv(const std::string& path) const {
  std::string out = "epoch,train_loss,val_loss,val_l1\n";
  for (const TtsEpochRecord& r : records) {
    out += std::to_string(r.epoch);
    for (double v : {r.train_loss, r.val_loss, r.val_l1}) {
      out += ',';
      out += format_double(v, 17);
    }
    out += '\n';
  }
  write_text_file(path, out);
}

TtsTrainLog TtsTrainLog::load_csv(const std::string& path) {
  const std::vector<std::string> lines = split_on(read_text_file(path), '\n');
  if (lines.empty() || lines[0] != "epoch,train_loss,val_loss,val_l1")
    throw ConfigError("bad tts log header in " + path);
  TtsTrainLog log;
  for (size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const std::vector<std::string> cols = split_on(lines[i], ',');
    if (cols.size() != 4) throw ConfigError("bad tts log line in " + path);
    TtsEpochRecord r;
    try {
      r.epoch = std::stoi(cols[0]);
      r.train_loss = std::stod(cols[1]);
      r.val_loss = std::stod(cols[2]);
      r.val_l1 = std::stod(cols[3]);
    } catch (const std::exception&) {
      throw ConfigError("bad tts log value in " + path);
    }
    if (!log.records.empty() && r.epoch <= log.records.back().epoch)
      throw ConfigError("tts log epochs must increase in " + path);
    log.records.push_back(r);
  }
  return log;
}

TtsTrainResult tts_train(const std::vector<RowMatrix>& mels,
                         const std::vector<textproc::UnitSeq>& units,
                         const std::vector<RowMatrix>& val_mels,
                         const std::vector<textproc::UnitSeq>& val_units, const TtsConfig& cfg) {
  cfg.validate();
  require(!mels.empty(), "tts_train: empty training set");
  require(mels.size() == units.size(), "tts_train: transcripts must cover the training audio");
  require(!val_mels.empty() && val_mels.size() == val_units.size(),
          "tts_train: validation pairs required");

  Rng root(cfg.seed);
  Rng irng = root.split(1);
  TtsTrainResult res;
  res.model = TtsModel::init(cfg, irng);
  grad::Adam opt(grad::AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});

  std::vector<std::vector<double>> best;
  auto snapshot = [&]() {
    best.clear();
    for (const auto& [name, tn] : res.model.params.items()) best.push_back(tn->v);
  };
  snapshot();

  auto item_loss = [&](grad::Tape& tape, size_t i, const std::vector<RowMatrix>& xm,
                       const std::vector<textproc::UnitSeq>& xu) {
    TtsForward f = tts_forward(tape, res.model, xu[i], &xm[i]);
    return tts_loss(tape, f, xm[i], stop_labels(f.steps), cfg.ga);
  };

  std::vector<size_t> order(mels.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng erng = root.split(0xE000 + static_cast<uint64_t>(epoch));
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[erng.below(i)]);

    double train_sum = 0.0;
    for (size_t at = 0; at < order.size(); at += static_cast<size_t>(cfg.batch)) {
      const size_t hi = std::min(order.size(), at + static_cast<size_t>(cfg.batch));
      grad::Tape tape;
      grad::TensorPtr acc;
      for (size_t i = at; i < hi; ++i) {
        TtsLossParts parts = item_loss(tape, order[i], mels, units);
        train_sum += parts.total->v[0];
        acc = acc ? grad::add(tape, acc, parts.total) : parts.total;
      }
      auto batch_loss = grad::scale(tape, acc, 1.0 / static_cast<double>(hi - at));
      tape.backward(batch_loss);
      opt.step(res.model.params);
    }
    const double train_loss = train_sum / static_cast<double>(order.size());

    double val_sum = 0.0, val_l1 = 0.0;
    for (size_t i = 0; i < val_mels.size(); ++i) {
      grad::Tape tape;
      TtsLossParts parts = item_loss(tape, i, val_mels, val_units);
      val_sum += parts.total->v[0];
      val_l1 += parts.l1;
    }
    const double val_loss = val_sum / static_cast<double>(val_mels.size());
    if (!std::isfinite(train_loss) || !std::isfinite(val_loss))
      throw NumericsError("tts_train: loss diverged at epoch " + std::to_string(epoch));

    res.log.records.push_back(
        {epoch, train_loss, val_loss, val_l1 / static_cast<double>(val_mels.size())});
    if (val_loss < res.best_val) {
      res.best_val = val_loss;
      res.best_epoch = epoch;
      snapshot();
    }
  }
  size_t bi = 0;
  for (const auto& [name, tn] : res.model.params.items()) tn->v = best[bi++];
  return res;
}

SynthOutput synthesize(const TtsModel& m, const textproc::UnitSeq& units,
                       const signal::MelBank& bank, const signal::StftConfig& scfg, int gl_iters,
                       uint64_t seed) {
  require(bank.n_mels == m.cfg.n_mels, "synthesize: mel bank width mismatch");
  grad::Tape tape;
  TtsForward f = tts_forward(tape, m, units, nullptr);

  SynthOutput out;
  out.detail.mel = f.mel->to_matrix();
  out.detail.attention = f.attention->to_matrix();
  out.detail.hit_max_steps = f.hit_max_steps;
  out.detail.stop_step = f.hit_max_steps ? -1 : f.steps - 1;

  const RowMatrix mag = signal::mel_to_linear(signal::log_expand(out.detail.mel), bank);
  signal::GriffinLimResult gl = signal::griffin_lim(mag, scfg, gl_iters, seed);

  // istft covers frames*hop + (win - hop) samples; trim the half-window
  // overhang on each side so length is exactly frames * hop.
  const int margin = (scfg.win_length - scfg.hop_length) / 2;
  const int want = out.detail.mel.rows * scfg.hop_length;
  std::vector<double> trimmed(gl.wave.begin() + margin, gl.wave.begin() + margin + want);
  out.wave.samples = std::move(trimmed);
  out.wave.sample_rate = scfg.sample_rate;
  return out;
}

}  // namespace utts::tts
