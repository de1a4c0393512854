#include "utts/asru.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

namespace utts::asru {

namespace {

// SAME-length padding split; for even kernels the extra pad goes left.
int pad_l(int k) { return k / 2; }
int pad_r(int k) { return (k - 1) / 2; }

// Primal conv1d mirroring grad::conv1d's layout ({Cout, Cin, K}) and
// accumulation order, so pre-activations match the tape bit for bit.
RowMatrix conv_forward(const RowMatrix& x, const grad::Tensor& w, const grad::Tensor* b, int pl,
                       int pr) {
  const int T = x.rows, cin = x.cols;
  const int cout = w.shape[0], k = w.shape[2];
  require(w.shape[1] == cin, "conv: channel mismatch");
  const int t_out = T + pl + pr - k + 1;
  require(t_out >= 1, "conv: output would be empty");
  RowMatrix out(t_out, cout);
  for (int ti = 0; ti < t_out; ++ti) {
    double* oi = out.row(ti);
    if (b)
      for (int o = 0; o < cout; ++o) oi[o] = b->v[static_cast<size_t>(o)];
    for (int kk = 0; kk < k; ++kk) {
      const int xi = ti + kk - pl;
      if (xi < 0 || xi >= T) continue;
      const double* xr = x.row(xi);
      for (int c = 0; c < cin; ++c) {
        const double xv = xr[c];
        if (xv == 0.0) continue;
        const double* wo = &w.v[static_cast<size_t>(c) * k + kk];
        for (int o = 0; o < cout; ++o) oi[o] += xv * wo[static_cast<size_t>(o) * cin * k];
      }
    }
  }
  return out;
}

// d(scalar)/d(conv input) for fixed weights.
RowMatrix conv_input_grad(const RowMatrix& gout, const grad::Tensor& w, int pl, int t_in) {
  const int cout = w.shape[0], cin = w.shape[1], k = w.shape[2];
  RowMatrix gx(t_in, cin);
  for (int ti = 0; ti < gout.rows; ++ti) {
    const double* go = gout.row(ti);
    for (int kk = 0; kk < k; ++kk) {
      const int xi = ti + kk - pl;
      if (xi < 0 || xi >= t_in) continue;
      double* gr = gx.row(xi);
      for (int c = 0; c < cin; ++c) {
        const double* wo = &w.v[static_cast<size_t>(c) * k + kk];
        double acc = 0.0;
        for (int o = 0; o < cout; ++o) acc += go[o] * wo[static_cast<size_t>(o) * cin * k];
        gr[c] += acc;
      }
    }
  }
  return gx;
}

struct DiscTrace {
  std::vector<RowMatrix> pre;  // pre-activations of the four layers
};

const char* kDiscW[4] = {"w1", "w2", "w3", "w4"};
const char* kDiscB[4] = {"b1", "b2", "b3", "b4"};

DiscTrace disc_primal(const DiscriminatorModel& d, const RowMatrix& x) {
  require(x.cols == d.n_in, "discriminator: input width mismatch");
  DiscTrace tr;
  RowMatrix cur = x;
  for (int l = 0; l < 4; ++l) {
    const auto w = d.params.get(kDiscW[l]);
    const auto b = d.params.get(kDiscB[l]);
    RowMatrix a = conv_forward(cur, *w, b.get(), pad_l(d.kernel), pad_r(d.kernel));
    tr.pre.push_back(a);
    if (l < 3) {
      for (double& v : a.data) v = v > 0.0 ? v : d.slope * v;
      cur = std::move(a);
    }
  }
  return tr;
}

// Gradient of D = mean(a4) with respect to the input, at the trace's
// fixed leaky-relu regions.
RowMatrix disc_input_grad(const DiscriminatorModel& d, const DiscTrace& tr, int t_in) {
  const int T = tr.pre[3].rows;
  RowMatrix g(T, 1, 1.0 / T);
  for (int l = 3; l >= 0; --l) {
    const auto w = d.params.get(kDiscW[l]);
    const int rows_in = l == 0 ? t_in : tr.pre[static_cast<size_t>(l - 1)].rows;
    g = conv_input_grad(g, *w, pad_l(d.kernel), rows_in);
    if (l > 0) {
      const RowMatrix& pre = tr.pre[static_cast<size_t>(l - 1)];
      for (size_t i = 0; i < g.data.size(); ++i)
        g.data[i] *= pre.data[i] > 0.0 ? 1.0 : d.slope;
    }
  }
  return g;
}

// Discriminator forward on the tape (for parameter gradients).
grad::TensorPtr disc_tape(grad::Tape& t, const DiscriminatorModel& d, const grad::TensorPtr& x) {
  grad::TensorPtr cur = x;
  for (int l = 0; l < 4; ++l) {
    cur = grad::conv1d(t, cur, d.params.get(kDiscW[l]), d.params.get(kDiscB[l]), pad_l(d.kernel),
                       pad_r(d.kernel));
    if (l < 3) cur = grad::leaky_relu(t, cur, d.slope);
  }
  return grad::mean_all(t, cur);
}

// Directional derivative of D along v with the trace's activation
// regions frozen: biases drop out and each leaky relu becomes a fixed
// elementwise mask, so the result is linear in v and differentiable in
// the weights.
grad::TensorPtr disc_jvp_tape(grad::Tape& t, const DiscriminatorModel& d, const RowMatrix& v,
                              const DiscTrace& tr) {
  grad::TensorPtr u = grad::Tensor::from_matrix(v);
  for (int l = 0; l < 4; ++l) {
    u = grad::conv1d(t, u, d.params.get(kDiscW[l]), nullptr, pad_l(d.kernel), pad_r(d.kernel));
    if (l < 3) {
      const RowMatrix& pre = tr.pre[static_cast<size_t>(l)];
      auto mask = grad::Tensor::make({pre.rows, pre.cols});
      for (size_t i = 0; i < pre.data.size(); ++i)
        mask->v[i] = pre.data[i] > 0.0 ? 1.0 : d.slope;
      u = grad::mul(t, u, mask);
    }
  }
  return grad::mean_all(t, u);
}

void check_gan_config(const GanConfig& cfg) {
  require(cfg.lambda_gp >= 0 && cfg.gamma_sp >= 0 && cfg.eta_pd >= 0,
          "gan: penalty weights must be non-negative");
  require(cfg.steps >= 1 && cfg.batch >= 1 && cfg.val_interval >= 1, "gan: bad schedule");
}

struct DTerms {
  grad::TensorPtr l_d;
  double gp_mean{0};
};

DTerms build_d_terms(grad::Tape& t, const DiscriminatorModel& disc,
                     const std::vector<RowMatrix>& fake, const std::vector<RowMatrix>& real,
                     const GanConfig& cfg, const std::vector<double>& alphas) {
  require(!fake.empty(), "gan: empty batch");
  require(fake.size() == real.size(), "gan: fake/real batch size mismatch");
  require(alphas.size() == fake.size(), "gan: one alpha per batch item required");
  const int B = static_cast<int>(fake.size());
  grad::TensorPtr acc;
  double gp_sum = 0.0;
  for (int b = 0; b < B; ++b) {
    require(alphas[static_cast<size_t>(b)] >= 0.0 && alphas[static_cast<size_t>(b)] <= 1.0,
            "gan: alpha outside [0, 1]");
    auto d_real = disc_tape(t, disc, grad::Tensor::from_matrix(real[static_cast<size_t>(b)]));
    auto d_fake = disc_tape(t, disc, grad::Tensor::from_matrix(fake[static_cast<size_t>(b)]));
    // -log s(z) = softplus(-z); -log(1 - s(z)) = softplus(z).
    auto term = grad::add(t, grad::softplus(t, grad::scale(t, d_real, -1.0)),
                          grad::softplus(t, d_fake));

    // Interpolate on the shorter of the two sequences.
    const RowMatrix& f = fake[static_cast<size_t>(b)];
    const RowMatrix& r = real[static_cast<size_t>(b)];
    const double a = alphas[static_cast<size_t>(b)];
    const int len = std::min(f.rows, r.rows);
    RowMatrix mix(len, f.cols);
    for (int i = 0; i < len; ++i)
      for (int c = 0; c < f.cols; ++c) mix(i, c) = a * r(i, c) + (1.0 - a) * f(i, c);
    DiscTrace trace = disc_primal(disc, mix);
    RowMatrix g = disc_input_grad(disc, trace, len);
    double gp = 0.0;
    for (double v : g.data) gp += v * v;
    gp_sum += gp;
    // Route d(gp)/d(weights) through a directional derivative along 2g;
    // the constant shift pins the node's value to gp itself.
    RowMatrix v2(g.rows, g.cols);
    for (size_t i = 0; i < g.data.size(); ++i) v2.data[i] = 2.0 * g.data[i];
    auto gp_node = grad::add_scalar(t, disc_jvp_tape(t, disc, v2, trace), -gp);
    term = grad::add(t, term, grad::scale(t, gp_node, cfg.lambda_gp));
    acc = acc ? grad::add(t, acc, term) : term;
  }
  return {grad::scale(t, acc, 1.0 / B), gp_sum / B};
}

struct GTerms {
  grad::TensorPtr l_g;
  double adv{0}, sp{0}, pd{0};
};

GTerms build_g_terms(grad::Tape& t, const DiscriminatorModel& disc,
                     const std::vector<grad::TensorPtr>& coll, const GanConfig& cfg) {
  require(!coll.empty(), "gan: empty batch");
  const int B = static_cast<int>(coll.size());
  const int V = coll.front()->shape[1];

  // Batch-and-time average distribution for the diversity penalty; the
  // log floor keeps an unused column from poisoning the coefficients.
  std::vector<double> pbar(static_cast<size_t>(V), 0.0);
  double n_rows = 0.0;
  for (const auto& c : coll) {
    n_rows += c->shape[0];
    for (size_t i = 0; i < c->v.size(); ++i) pbar[i % static_cast<size_t>(V)] += c->v[i];
  }
  for (double& p : pbar) p /= n_rows;

  // Row difference as a constant two-tap conv kernel.
  auto diff_w = grad::Tensor::make({V, V, 2});
  for (int v = 0; v < V; ++v) {
    diff_w->v[static_cast<size_t>(v) * V * 2 + static_cast<size_t>(v) * 2 + 0] = 1.0;
    diff_w->v[static_cast<size_t>(v) * V * 2 + static_cast<size_t>(v) * 2 + 1] = -1.0;
  }

  grad::TensorPtr adv_acc, sp_acc, pd_acc;
  for (const auto& c : coll) {
    require(c->shape[1] == V, "gan: inconsistent widths in batch");
    auto adv = grad::softplus(t, grad::scale(t, disc_tape(t, disc, c), -1.0));
    adv_acc = adv_acc ? grad::add(t, adv_acc, adv) : adv;
    if (c->shape[0] >= 2) {
      auto d = grad::conv1d(t, c, diff_w, nullptr, 0, 0);
      auto sp = grad::sum_all(t, grad::mul(t, d, d));
      sp_acc = sp_acc ? grad::add(t, sp_acc, sp) : sp;
    }
    // sum(c * (log pbar + 1)) / n_rows sums to pd + 1 over the batch and
    // carries d(pd)/d(c) exactly (pbar is linear in the rows).
    auto coef = grad::Tensor::make({c->shape[0], V});
    for (size_t i = 0; i < coef->v.size(); ++i)
      coef->v[i] = (std::log(std::max(pbar[i % static_cast<size_t>(V)], 1e-300)) + 1.0) / n_rows;
    auto pdb = grad::sum_all(t, grad::mul(t, c, coef));
    pd_acc = pd_acc ? grad::add(t, pd_acc, pdb) : pdb;
  }
  auto pd_node = grad::add_scalar(t, pd_acc, -1.0);

  GTerms out;
  out.adv = adv_acc->v[0] / B;
  out.sp = sp_acc ? sp_acc->v[0] / B : 0.0;
  out.pd = pd_node->v[0];
  out.l_g = grad::scale(t, adv_acc, 1.0 / B);
  if (sp_acc) out.l_g = grad::add(t, out.l_g, grad::scale(t, sp_acc, cfg.gamma_sp / B));
  out.l_g = grad::add(t, out.l_g, grad::scale(t, pd_node, cfg.eta_pd));
  return out;
}

void check_finite(const GanBatchLosses& l) {
  for (double x : {l.l_d, l.l_g, l.gp, l.sp, l.pd})
    if (!std::isfinite(x)) throw NumericsError("gan: non-finite loss");
}

// Maximal runs of equal row argmax (ties to the lowest column).
std::vector<std::pair<int, int>> argmax_runs(const RowMatrix& d, std::vector<int>* ids_out) {
  require(d.rows >= 1, "collapse: empty input");
  std::vector<std::pair<int, int>> runs;
  int prev = -1;
  for (int r = 0; r < d.rows; ++r) {
    int arg = 0;
    for (int c = 1; c < d.cols; ++c)
      if (d(r, c) > d(r, arg)) arg = c;
    if (arg != prev) {
      runs.push_back({r, r + 1});
      if (ids_out) ids_out->push_back(arg);
      prev = arg;
    } else {
      runs.back().second = r + 1;
    }
  }
  return runs;
}

}  // namespace

// --- models -------------------------------------------------------------------

GeneratorModel GeneratorModel::init(int in_dim, int n_out, int kernel, Rng& rng) {
  require(in_dim >= 1 && n_out >= 2 && kernel >= 1, "generator: bad dimensions");
  GeneratorModel g;
  g.in_dim = in_dim;
  g.n_out = n_out;
  g.kernel = kernel;
  g.params.add("meta",
               grad::Tensor::from({3}, {static_cast<double>(in_dim), static_cast<double>(n_out),
                                        static_cast<double>(kernel)}),
               false);
  g.params.add("w", grad::Tensor::randn({n_out, in_dim, kernel},
                                        1.0 / std::sqrt(static_cast<double>(in_dim) * kernel), rng));
  g.params.add("b", grad::Tensor::make({1, n_out}));
  return g;
}

void GeneratorModel::save(const std::string& path) const { params.save(path); }

GeneratorModel GeneratorModel::load(const std::string& path) {
  GeneratorModel g;
  g.params.load(path);
  const auto& meta = g.params.get("meta")->v;
  require(meta.size() == 3, "GeneratorModel::load: bad meta");
  g.in_dim = static_cast<int>(meta[0]);
  g.n_out = static_cast<int>(meta[1]);
  g.kernel = static_cast<int>(meta[2]);
  return g;
}

DiscriminatorModel DiscriminatorModel::init(int n_in, int hidden, int kernel, Rng& rng) {
  require(n_in >= 1 && hidden >= 1 && kernel >= 1 && kernel % 2 == 1,
          "discriminator: kernel must be odd");
  DiscriminatorModel d;
  d.n_in = n_in;
  d.hidden = hidden;
  d.kernel = kernel;
  d.params.add("meta",
               grad::Tensor::from({4}, {static_cast<double>(n_in), static_cast<double>(hidden),
                                        static_cast<double>(kernel), d.slope}),
               false);
  const int dims[5] = {n_in, hidden, hidden, hidden, 1};
  for (int l = 0; l < 4; ++l) {
    const int cin = dims[l], cout = dims[l + 1];
    d.params.add(kDiscW[l],
                 grad::Tensor::randn({cout, cin, kernel},
                                     1.0 / std::sqrt(static_cast<double>(cin) * kernel), rng));
    d.params.add(kDiscB[l], grad::Tensor::make({1, cout}));
  }
  return d;
}

void DiscriminatorModel::save(const std::string& path) const { params.save(path); }

DiscriminatorModel DiscriminatorModel::load(const std::string& path) {
  DiscriminatorModel d;
  d.params.load(path);
  const auto& meta = d.params.get("meta")->v;
  require(meta.size() == 4, "DiscriminatorModel::load: bad meta");
  d.n_in = static_cast<int>(meta[0]);
  d.hidden = static_cast<int>(meta[1]);
  d.kernel = static_cast<int>(meta[2]);
  d.slope = meta[3];
  return d;
}

// --- forward, collapse, decode ---------------------------------------------------

RowMatrix generator_forward(const GeneratorModel& gen, const RowMatrix& segs) {
  require(segs.cols == gen.in_dim, "generator: feature dimension mismatch");
  require(segs.rows >= 1, "generator: empty input");
  RowMatrix logits =
      conv_forward(segs, *gen.params.get("w"), gen.params.get("b").get(), pad_l(gen.kernel),
                   pad_r(gen.kernel));
  for (int r = 0; r < logits.rows; ++r) {
    double* row = logits.row(r);
    double mx = row[0];
    for (int c = 1; c < logits.cols; ++c) mx = std::max(mx, row[c]);
    double z = 0.0;
    for (int c = 0; c < logits.cols; ++c) z += (row[c] = std::exp(row[c] - mx));
    for (int c = 0; c < logits.cols; ++c) row[c] /= z;
  }
  return logits;
}

textproc::UnitSeq collapse_argmax(const std::vector<int>& ids) {
  require(!ids.empty(), "collapse: empty input");
  textproc::UnitSeq out;
  for (int id : ids)
    if (out.empty() || out.back() != id) out.push_back(id);
  return out;
}

textproc::UnitSeq collapse_argmax(const RowMatrix& dists) {
  std::vector<int> ids;
  argmax_runs(dists, &ids);
  textproc::UnitSeq out;
  for (int c : ids) out.push_back(c + 1);
  return out;
}

RowMatrix collapse_soft(const RowMatrix& dists) {
  std::vector<std::pair<int, int>> runs = argmax_runs(dists, nullptr);
  RowMatrix out(static_cast<int>(runs.size()), dists.cols);
  for (size_t r = 0; r < runs.size(); ++r) {
    const auto [lo, hi] = runs[r];
    for (int i = lo; i < hi; ++i)
      for (int c = 0; c < dists.cols; ++c) out(static_cast<int>(r), c) += dists(i, c);
    for (int c = 0; c < dists.cols; ++c) out(static_cast<int>(r), c) /= hi - lo;
  }
  return out;
}

RowMatrix one_hot_rows(const textproc::UnitSeq& seq, int n_out) {
  require(!seq.empty(), "one_hot_rows: empty sequence");
  RowMatrix m(static_cast<int>(seq.size()), n_out);
  for (size_t i = 0; i < seq.size(); ++i) {
    require(seq[i] >= 1 && seq[i] <= n_out, "one_hot_rows: unit id out of range");
    m(static_cast<int>(i), seq[i] - 1) = 1.0;
  }
  return m;
}

textproc::UnitSeq greedy_decode(const GeneratorModel& gen, const RowMatrix& segs,
                                int silence_id) {
  textproc::UnitSeq seq = collapse_argmax(generator_forward(gen, segs));
  size_t lo = 0, hi = seq.size();
  while (lo < hi && seq[lo] == silence_id) ++lo;
  while (hi > lo && seq[hi - 1] == silence_id) --hi;
  return textproc::UnitSeq(seq.begin() + static_cast<std::ptrdiff_t>(lo),
                           seq.begin() + static_cast<std::ptrdiff_t>(hi));
}

// --- losses ---------------------------------------------------------------------

GanBatchLosses gan_losses(const std::vector<RowMatrix>& fake, const std::vector<RowMatrix>& real,
                          const DiscriminatorModel& disc, const GanConfig& cfg,
                          const std::vector<double>& alphas) {
  check_gan_config(cfg);
  grad::Tape t;
  DTerms dt = build_d_terms(t, disc, fake, real, cfg, alphas);
  std::vector<grad::TensorPtr> nodes;
  for (const RowMatrix& f : fake) nodes.push_back(grad::Tensor::from_matrix(f));
  GTerms gt = build_g_terms(t, disc, nodes, cfg);
  GanBatchLosses out;
  out.l_d = dt.l_d->v[0];
  out.l_g = gt.l_g->v[0];
  out.gp = dt.gp_mean;
  out.sp = gt.sp;
  out.pd = gt.pd;
  check_finite(out);
  return out;
}

GanBatchLosses gan_d_step(DiscriminatorModel& disc, const std::vector<RowMatrix>& fake,
                          const std::vector<RowMatrix>& real, const GanConfig& cfg,
                          const std::vector<double>& alphas) {
  check_gan_config(cfg);
  disc.params.zero_grads();
  grad::Tape t;
  DTerms dt = build_d_terms(t, disc, fake, real, cfg, alphas);
  t.backward(dt.l_d);
  GanBatchLosses out;
  out.l_d = dt.l_d->v[0];
  out.gp = dt.gp_mean;
  return out;
}

GanBatchLosses gan_g_step(GeneratorModel& gen, const DiscriminatorModel& disc,
                          const std::vector<RowMatrix>& segs, const GanConfig& cfg) {
  check_gan_config(cfg);
  require(!segs.empty(), "gan: empty batch");
  gen.params.zero_grads();
  grad::Tape t;
  std::vector<grad::TensorPtr> coll;
  for (const RowMatrix& s : segs) {
    require(s.cols == gen.in_dim, "generator: feature dimension mismatch");
    auto x = grad::Tensor::from_matrix(s);
    auto logits = grad::conv1d(t, x, gen.params.get("w"), gen.params.get("b"), pad_l(gen.kernel),
                               pad_r(gen.kernel));
    auto p = grad::softmax_rows(t, logits);
    // Pool each argmax run to its mean row with a constant matrix; the
    // product is built as a kernel-1 conv on the transpose.
    RowMatrix pv = p->to_matrix();
    std::vector<std::pair<int, int>> runs = argmax_runs(pv, nullptr);
    auto pool = grad::Tensor::make({static_cast<int>(runs.size()), pv.rows, 1});
    for (size_t r = 0; r < runs.size(); ++r)
      for (int i = runs[r].first; i < runs[r].second; ++i)
        pool->v[r * static_cast<size_t>(pv.rows) + static_cast<size_t>(i)] =
            1.0 / (runs[r].second - runs[r].first);
    auto collT = grad::conv1d(t, grad::transpose(t, p), pool, nullptr, 0, 0);
    coll.push_back(grad::transpose(t, collT));
  }
  GTerms gt = build_g_terms(t, disc, coll, cfg);
  t.backward(gt.l_g);
  // The discriminator is read-only here; discard the grads backward left.
  for (const auto& [name, tp] : disc.params.items()) std::fill(tp->g.begin(), tp->g.end(), 0.0);
  GanBatchLosses out;
  out.l_g = gt.l_g->v[0];
  out.sp = gt.sp;
  out.pd = gt.pd;
  return out;
}

// --- train log ---------------------------------------------------------------------

void TrainLog::save_csv(const std::string& path) const {
  std::string out = "step,l_d,l_g,gp,sp,pd,val_per\n";
  for (const TrainLogRecord& r : records) {
    out += std::to_string(r.step);
    for (double v : {r.l_d, r.l_g, r.gp, r.sp, r.pd, r.val_per}) {
      out += ',';
      out += format_double(v, 17);
    }
    out += '\n';
  }
  write_text_file(path, out);
}

TrainLog TrainLog::load_csv(const std::string& path) {
  const std::vector<std::string> lines = split_on(read_text_file(path), '\n');
  if (lines.empty() || lines[0] != "step,l_d,l_g,gp,sp,pd,val_per")
    throw ConfigError("bad train log header in " + path);
  TrainLog log;
  for (size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const std::vector<std::string> cols = split_on(lines[i], ',');
    if (cols.size() != 7) throw ConfigError("bad train log line in " + path);
    TrainLogRecord r;
    try {
      r.step = std::stoi(cols[0]);
      r.l_d = std::stod(cols[1]);
      r.l_g = std::stod(cols[2]);
      r.gp = std::stod(cols[3]);
      r.sp = std::stod(cols[4]);
      r.pd = std::stod(cols[5]);
      r.val_per = std::stod(cols[6]);
    } catch (const std::exception&) {
      throw ConfigError("bad train log value in " + path);
    }
    if (!log.records.empty() && r.step <= log.records.back().step)
      throw ConfigError("train log steps must increase in " + path);
    log.records.push_back(r);
  }
  return log;
}

// --- training ------------------------------------------------------------------------

GanTrainResult gan_train(const std::vector<RowMatrix>& segs,
                         const std::vector<textproc::UnitSeq>& text, int n_units,
                         const GanConfig& cfg, const std::vector<RowMatrix>& val_segs,
                         const std::vector<textproc::UnitSeq>& val_refs) {
  check_gan_config(cfg);
  require(!segs.empty(), "gan_train: empty speech corpus");
  require(!text.empty(), "gan_train: empty text corpus");
  require(n_units >= 3, "gan_train: inventory too small");
  require(!val_segs.empty() && val_segs.size() == val_refs.size(),
          "gan_train: validation pairs required");
  const int in_dim = segs.front().cols;
  for (const RowMatrix& s : segs) require(s.cols == in_dim, "gan_train: ragged feature dims");
  const int n_out = n_units - 1;

  Rng root(cfg.seed);
  Rng grng = root.split(1), drng = root.split(2), brng = root.split(3), arng = root.split(4);
  GanTrainResult res;
  res.gen = GeneratorModel::init(in_dim, n_out, cfg.gen_kernel, grng);
  res.disc = DiscriminatorModel::init(n_out, cfg.disc_hidden, cfg.disc_kernel, drng);
  grad::Adam opt_g(grad::AdamConfig{cfg.lr_g, 0.9, 0.999, 1e-8});
  grad::Adam opt_d(grad::AdamConfig{cfg.lr_d, 0.9, 0.999, 1e-8});

  std::vector<std::vector<double>> best;
  auto snapshot = [&]() {
    best.clear();
    for (const auto& [name, t] : res.gen.params.items()) best.push_back(t->v);
  };
  snapshot();

  auto val_per = [&]() {
    std::vector<std::pair<textproc::UnitSeq, textproc::UnitSeq>> pairs;
    for (size_t i = 0; i < val_segs.size(); ++i)
      pairs.push_back({greedy_decode(res.gen, val_segs[i]), val_refs[i]});
    return textproc::corpus_error_rate(pairs);
  };

  double sum_ld = 0, sum_lg = 0, sum_gp = 0, sum_sp = 0, sum_pd = 0;
  int since = 0;
  for (int step = 1; step <= cfg.steps; ++step) {
    std::vector<RowMatrix> fake, real, seg_batch;
    std::vector<double> alphas;
    for (int b = 0; b < cfg.batch; ++b) {
      const RowMatrix& s = segs[brng.below(segs.size())];
      seg_batch.push_back(s);
      fake.push_back(collapse_soft(generator_forward(res.gen, s)));
      real.push_back(one_hot_rows(text[brng.below(text.size())], n_out));
      alphas.push_back(arng.uniform());
    }
    GanBatchLosses dl = gan_d_step(res.disc, fake, real, cfg, alphas);
    opt_d.step(res.disc.params);
    GanBatchLosses gl = gan_g_step(res.gen, res.disc, seg_batch, cfg);
    opt_g.step(res.gen.params);
    if (!std::isfinite(dl.l_d) || !std::isfinite(gl.l_g))
      throw NumericsError("gan_train: loss diverged at step " + std::to_string(step));

    sum_ld += dl.l_d;
    sum_lg += gl.l_g;
    sum_gp += dl.gp;
    sum_sp += gl.sp;
    sum_pd += gl.pd;
    ++since;
    if (step % cfg.val_interval == 0 || step == cfg.steps) {
      const double per = val_per();
      res.log.records.push_back({step, sum_ld / since, sum_lg / since, sum_gp / since,
                                 sum_sp / since, sum_pd / since, per});
      sum_ld = sum_lg = sum_gp = sum_sp = sum_pd = 0;
      since = 0;
      if (per < res.best_val_per) {
        res.best_val_per = per;
        res.best_step = step;
        snapshot();
      }
    }
  }
  size_t bi = 0;
  for (const auto& [name, t] : res.gen.params.items()) t->v = best[bi++];
  return res;
}

GridSearchResult grid_search(const std::vector<RowMatrix>& segs,
                             const std::vector<textproc::UnitSeq>& text, int n_units,
                             const GanConfig& base_cfg, const std::vector<double>& lambdas,
                             const std::vector<double>& gammas, const std::vector<double>& etas,
                             int reduced_steps, const std::vector<RowMatrix>& val_segs,
                             const std::vector<textproc::UnitSeq>& val_refs) {
  require(!lambdas.empty() && !gammas.empty() && !etas.empty(), "grid_search: empty grid");
  require(reduced_steps >= 1, "grid_search: bad reduced step count");
  GridSearchResult out;
  size_t best_cell = 0;
  double best_per = std::numeric_limits<double>::infinity();
  for (double l : lambdas)
    for (double g : gammas)
      for (double e : etas) {
        GanConfig cell_cfg = base_cfg;
        cell_cfg.lambda_gp = l;
        cell_cfg.gamma_sp = g;
        cell_cfg.eta_pd = e;
        cell_cfg.steps = reduced_steps;
        GridCell cell;
        cell.lambda_gp = l;
        cell.gamma_sp = g;
        cell.eta_pd = e;
        try {
          GanTrainResult r = gan_train(segs, text, n_units, cell_cfg, val_segs, val_refs);
          cell.best_val_per = r.best_val_per;
          cell.log = std::move(r.log);
        } catch (const NumericsError& err) {
          cell.diverged = true;
          std::fprintf(stderr, "grid_search: cell (%g, %g, %g) diverged: %s\n", l, g, e,
                       err.what());
        }
        if (!cell.diverged && cell.best_val_per < best_per) {
          best_per = cell.best_val_per;
          best_cell = out.cells.size();
        }
        out.cells.push_back(std::move(cell));
      }
  if (!std::isfinite(best_per)) throw StageError("grid_search: every cell diverged");

  out.best_cfg = base_cfg;
  out.best_cfg.lambda_gp = out.cells[best_cell].lambda_gp;
  out.best_cfg.gamma_sp = out.cells[best_cell].gamma_sp;
  out.best_cfg.eta_pd = out.cells[best_cell].eta_pd;
  out.final = gan_train(segs, text, n_units, out.best_cfg, val_segs, val_refs);
  return out;
}

}  // namespace utts::asru
