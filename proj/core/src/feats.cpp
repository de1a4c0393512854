#include "utts/feats.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>

#include "utts/grad.hpp"

namespace utts::feats {

namespace {

double dist2(const double* a, const double* b, int d) {
  double s = 0.0;
  for (int c = 0; c < d; ++c) {
    const double diff = a[c] - b[c];
    s += diff * diff;
  }
  return s;
}

// Nearest centroid of one point; strict < keeps the lowest id on ties.
int nearest(const RowMatrix& centroids, const double* p) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int c = 0; c < centroids.rows; ++c) {
    const double dd = dist2(p, centroids.row(c), centroids.cols);
    if (dd < best_d) {
      best_d = dd;
      best = c;
    }
  }
  return best;
}

grad::TensorPtr tensor_of(const RowMatrix& m) { return grad::Tensor::from_matrix(m); }

grad::TensorPtr tensor_of(const std::vector<double>& v) {
  return grad::Tensor::from({static_cast<int>(v.size())}, v);
}

}  // namespace

// --- k-means ---------------------------------------------------------------

KMeansModel kmeans_fit(const RowMatrix& frames, int k, Rng& rng, int max_iters,
                       KMeansFitInfo* info) {
  require(k >= 2, "kmeans_fit: k must be at least 2");
  require(!frames.empty(), "kmeans_fit: no frames");
  require(frames.rows >= k, "kmeans_fit: fewer frames than clusters");
  const int T = frames.rows, d = frames.cols;

  KMeansModel m;
  m.centroids = RowMatrix(k, d);

  // k-means++ seeding: first pick uniform, then proportional to squared
  // distance from the chosen set.
  std::vector<double> d2(static_cast<size_t>(T), std::numeric_limits<double>::infinity());
  int first = static_cast<int>(rng.below(static_cast<uint64_t>(T)));
  std::copy_n(frames.row(first), d, m.centroids.row(0));
  for (int c = 1; c < k; ++c) {
    double total = 0.0;
    for (int t = 0; t < T; ++t) {
      const double dd = dist2(frames.row(t), m.centroids.row(c - 1), d);
      if (dd < d2[static_cast<size_t>(t)]) d2[static_cast<size_t>(t)] = dd;
      total += d2[static_cast<size_t>(t)];
    }
    int pick;
    if (total > 0.0) {
      double u = rng.uniform() * total;
      pick = T - 1;
      for (int t = 0; t < T; ++t) {
        u -= d2[static_cast<size_t>(t)];
        if (u <= 0.0) {
          pick = t;
          break;
        }
      }
    } else {
      // All mass at zero (duplicated points); any pick is as good.
      pick = static_cast<int>(rng.below(static_cast<uint64_t>(T)));
    }
    std::copy_n(frames.row(pick), d, m.centroids.row(c));
  }

  std::vector<int> ids(static_cast<size_t>(T), -1);
  std::vector<int> prev;
  bool converged = false;
  int iter = 0;
  for (; iter < max_iters; ++iter) {
    // Assignment pass, with inertia measured on the new assignment.
    double inertia = 0.0;
    for (int t = 0; t < T; ++t) {
      ids[static_cast<size_t>(t)] = nearest(m.centroids, frames.row(t));
      inertia += dist2(frames.row(t), m.centroids.row(ids[static_cast<size_t>(t)]), d);
    }
    if (info) info->inertia.push_back(inertia);
    if (ids == prev) {
      converged = true;
      break;
    }
    prev = ids;

    // Update pass.
    std::vector<double> sums(static_cast<size_t>(k) * d, 0.0);
    std::vector<int> counts(static_cast<size_t>(k), 0);
    for (int t = 0; t < T; ++t) {
      const int c = ids[static_cast<size_t>(t)];
      ++counts[static_cast<size_t>(c)];
      const double* row = frames.row(t);
      double* acc = sums.data() + static_cast<size_t>(c) * d;
      for (int j = 0; j < d; ++j) acc[j] += row[j];
    }
    // Reseed empties to the farthest points (each to a distinct point).
    std::vector<int> empties;
    for (int c = 0; c < k; ++c)
      if (counts[static_cast<size_t>(c)] == 0) empties.push_back(c);
    if (!empties.empty()) {
      std::vector<std::pair<double, int>> far;
      far.reserve(static_cast<size_t>(T));
      for (int t = 0; t < T; ++t)
        far.emplace_back(dist2(frames.row(t), m.centroids.row(ids[static_cast<size_t>(t)]), d), t);
      std::sort(far.begin(), far.end(),
                [](const auto& a, const auto& b) { return a.first > b.first; });
      for (size_t e = 0; e < empties.size() && e < far.size(); ++e) {
        const int t = far[e].second;
        std::copy_n(frames.row(t), d, m.centroids.row(empties[e]));
      }
    }
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<size_t>(c)] == 0) continue;  // reseeded above
      double* row = m.centroids.row(c);
      const double inv = 1.0 / counts[static_cast<size_t>(c)];
      for (int j = 0; j < d; ++j) row[j] = sums[static_cast<size_t>(c) * d + j] * inv;
    }
  }

  if (info) {
    info->iterations = iter;
    info->converged = converged;
  }
  return m;
}

std::vector<int> kmeans_assign(const KMeansModel& model, const RowMatrix& frames) {
  require(frames.cols == model.d(), "kmeans_assign: dimension mismatch");
  std::vector<int> ids(static_cast<size_t>(frames.rows));
  for (int t = 0; t < frames.rows; ++t) ids[static_cast<size_t>(t)] = nearest(model.centroids, frames.row(t));
  return ids;
}

void KMeansModel::save(const std::string& path) const {
  grad::ParameterSet ps;
  ps.add("centroids", tensor_of(centroids), false);
  ps.save(path);
}

KMeansModel KMeansModel::load(const std::string& path) {
  grad::ParameterSet ps;
  ps.load(path);
  KMeansModel m;
  m.centroids = ps.get("centroids")->to_matrix();
  return m;
}

// --- segmentation ------------------------------------------------------------

std::vector<FrameRange> segment_by_change(const std::vector<int>& ids) {
  require(!ids.empty(), "segment_by_change: empty id sequence");
  std::vector<FrameRange> out;
  int start = 0;
  for (size_t t = 1; t <= ids.size(); ++t) {
    if (t == ids.size() || ids[t] != ids[t - 1]) {
      out.push_back({start, static_cast<int>(t)});
      start = static_cast<int>(t);
    }
  }
  return out;
}

RowMatrix mean_pool(const RowMatrix& frames, const std::vector<FrameRange>& boundaries) {
  require(!boundaries.empty(), "mean_pool: no boundaries");
  require(boundaries.front().begin == 0, "mean_pool: ranges must start at frame 0");
  for (size_t s = 0; s < boundaries.size(); ++s) {
    require(boundaries[s].end > boundaries[s].begin, "mean_pool: empty range");
    if (s > 0)
      require(boundaries[s].begin == boundaries[s - 1].end, "mean_pool: ranges must be contiguous");
  }
  require(boundaries.back().end == frames.rows, "mean_pool: ranges must cover all frames");

  RowMatrix out(static_cast<int>(boundaries.size()), frames.cols);
  for (size_t s = 0; s < boundaries.size(); ++s) {
    double* dst = out.row(static_cast<int>(s));
    for (int t = boundaries[s].begin; t < boundaries[s].end; ++t) {
      const double* src = frames.row(t);
      for (int c = 0; c < frames.cols; ++c) dst[c] += src[c];
    }
    for (int c = 0; c < frames.cols; ++c) dst[c] /= boundaries[s].len();
  }
  return out;
}

std::vector<int> median_smooth3(const std::vector<int>& ids) {
  if (ids.size() < 3) return ids;
  std::vector<int> out(ids);
  for (size_t t = 1; t + 1 < ids.size(); ++t) {
    const int a = ids[t - 1], b = ids[t], c = ids[t + 1];
    out[t] = std::max(std::min(a, b), std::min(std::max(a, b), c));
  }
  return out;
}

std::vector<int> absorb_short_runs(const std::vector<int>& ids, int min_run) {
  require(min_run >= 1, "absorb_short_runs: min_run must be positive");
  if (ids.empty()) return ids;

  struct Run {
    int id;
    int len;
  };
  std::vector<Run> runs;
  for (int v : ids) {
    if (!runs.empty() && runs.back().id == v)
      ++runs.back().len;
    else
      runs.push_back({v, 1});
  }
  // Repeatedly fold the shortest offending run into its longer neighbor;
  // merging can create new short runs, so loop to a fixpoint.
  while (runs.size() > 1) {
    size_t worst = runs.size();
    for (size_t i = 0; i < runs.size(); ++i)
      if (runs[i].len < min_run && (worst == runs.size() || runs[i].len < runs[worst].len))
        worst = i;
    if (worst == runs.size()) break;
    size_t into;
    if (worst == 0)
      into = 1;
    else if (worst + 1 == runs.size())
      into = worst - 1;
    else
      into = runs[worst - 1].len >= runs[worst + 1].len ? worst - 1 : worst + 1;
    runs[into].len += runs[worst].len;
    runs.erase(runs.begin() + static_cast<std::ptrdiff_t>(worst));
    // Adjacent runs may now share an id; fuse them.
    for (size_t i = 0; i + 1 < runs.size();) {
      if (runs[i].id == runs[i + 1].id) {
        runs[i].len += runs[i + 1].len;
        runs.erase(runs.begin() + static_cast<std::ptrdiff_t>(i) + 1);
      } else {
        ++i;
      }
    }
  }
  std::vector<int> out;
  out.reserve(ids.size());
  for (const Run& r : runs) out.insert(out.end(), static_cast<size_t>(r.len), r.id);
  return out;
}

// --- PCA --------------------------------------------------------------------

PcaModel pca_fit(const RowMatrix& data, int r) {
  require(r >= 1, "pca_fit: r must be positive");
  require(r <= data.cols, "pca_fit: r exceeds data dimension");
  require(data.rows >= r, "pca_fit: need at least r samples");
  const int N = data.rows, d = data.cols;

  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const Mat> X(data.data.data(), N, d);
  Eigen::RowVectorXd mean = X.colwise().mean();
  Mat centered = X.rowwise() - mean;
  // Covariance normalized by N so projected variance matches eigenvalues.
  Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(N);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  require(solver.info() == Eigen::Success, "pca_fit: eigen decomposition failed");

  PcaModel m;
  m.mean.assign(mean.data(), mean.data() + d);
  m.components = RowMatrix(r, d);
  m.eigenvalues.resize(static_cast<size_t>(r));
  // Solver orders eigenvalues ascending; take the top r in reverse.
  for (int j = 0; j < r; ++j) {
    const int src = d - 1 - j;
    m.eigenvalues[static_cast<size_t>(j)] = std::max(0.0, solver.eigenvalues()(src));
    Eigen::VectorXd v = solver.eigenvectors().col(src);
    int arg = 0;
    for (int c = 1; c < d; ++c)
      if (std::abs(v(c)) > std::abs(v(arg))) arg = c;
    if (v(arg) < 0.0) v = -v;
    for (int c = 0; c < d; ++c) m.components(j, c) = v(c);
  }
  return m;
}

RowMatrix pca_transform(const PcaModel& model, const RowMatrix& data) {
  require(data.cols == model.d(), "pca_transform: dimension mismatch");
  RowMatrix out(data.rows, model.r());
  for (int i = 0; i < data.rows; ++i) {
    const double* x = data.row(i);
    double* y = out.row(i);
    for (int j = 0; j < model.r(); ++j) {
      const double* w = model.components.row(j);
      double s = 0.0;
      for (int c = 0; c < model.d(); ++c) s += (x[c] - model.mean[static_cast<size_t>(c)]) * w[c];
      y[j] = s;
    }
  }
  return out;
}

void PcaModel::save(const std::string& path) const {
  grad::ParameterSet ps;
  ps.add("mean", tensor_of(mean), false);
  ps.add("components", tensor_of(components), false);
  ps.add("eigenvalues", tensor_of(eigenvalues), false);
  ps.save(path);
}

PcaModel PcaModel::load(const std::string& path) {
  grad::ParameterSet ps;
  ps.load(path);
  PcaModel m;
  m.mean = ps.get("mean")->v;
  m.components = ps.get("components")->to_matrix();
  m.eigenvalues = ps.get("eigenvalues")->v;
  return m;
}

// --- front end ----------------------------------------------------------------

namespace {

signal::StftConfig stft_of(const FrontEndConfig& cfg) {
  return signal::StftConfig(cfg.sample_rate, cfg.n_fft, cfg.win_length, cfg.hop_length);
}

}  // namespace

RowMatrix FrontEnd::frames(const std::vector<double>& samples) const {
  RowMatrix mel = signal::log_mel_features(samples, stft, bank);
  if (cfg.mean_norm) {
    for (int t = 0; t < mel.rows; ++t) {
      double* row = mel.row(t);
      double s = 0.0;
      for (int c = 0; c < mel.cols; ++c) s += row[c];
      const double avg = s / mel.cols;
      for (int c = 0; c < mel.cols; ++c) row[c] -= avg;
    }
  }
  if (!cfg.deltas) return mel;
  RowMatrix out(mel.rows, mel.cols * 2);
  for (int t = 0; t < mel.rows; ++t) {
    const int lo = std::max(0, t - 1);
    const int hi = std::min(mel.rows - 1, t + 1);
    for (int c = 0; c < mel.cols; ++c) {
      out(t, c) = mel(t, c);
      out(t, mel.cols + c) = (mel(hi, c) - mel(lo, c)) / (hi - lo > 0 ? hi - lo : 1);
    }
  }
  return out;
}

std::vector<int> FrontEnd::cluster_ids(const RowMatrix& fr) const {
  std::vector<int> ids = kmeans_assign(km, fr);
  if (cfg.smooth_ids) ids = median_smooth3(ids);
  if (cfg.min_run > 1) ids = absorb_short_runs(ids, cfg.min_run);
  return ids;
}

SegmentSequence FrontEnd::segments(const std::vector<double>& samples) const {
  RowMatrix fr = frames(samples);
  std::vector<FrameRange> bounds = segment_by_change(cluster_ids(fr));
  SegmentSequence out;
  out.vectors = pca_transform(pca, mean_pool(fr, bounds));
  out.boundaries = std::move(bounds);
  return out;
}

FrontEnd fit_front_end(const std::vector<std::vector<double>>& waves, const FrontEndConfig& cfg,
                       Rng& rng) {
  require(!waves.empty(), "fit_front_end: no waveforms");
  FrontEnd fe;
  fe.cfg = cfg;
  fe.stft = stft_of(cfg);
  fe.bank = signal::make_mel_bank(fe.stft, cfg.n_mels, cfg.f_min, cfg.f_max);

  // Pass 1: all frames, for clustering.
  std::vector<RowMatrix> per_utt;
  per_utt.reserve(waves.size());
  int total = 0, dim = 0;
  for (const auto& w : waves) {
    per_utt.push_back(fe.frames(w));
    total += per_utt.back().rows;
    dim = per_utt.back().cols;
  }
  RowMatrix all(total, dim);
  int at = 0;
  for (const auto& m : per_utt) {
    std::copy(m.data.begin(), m.data.end(), all.row(at));
    at += m.rows;
  }
  fe.km = kmeans_fit(all, cfg.k, rng, cfg.kmeans_iters);

  // Pass 2: pooled segment vectors across the corpus, for the projection.
  std::vector<RowMatrix> pooled;
  int total_segs = 0;
  for (const auto& m : per_utt) {
    pooled.push_back(mean_pool(m, segment_by_change(fe.cluster_ids(m))));
    total_segs += pooled.back().rows;
  }
  RowMatrix segs(total_segs, dim);
  at = 0;
  for (const auto& m : pooled) {
    std::copy(m.data.begin(), m.data.end(), segs.row(at));
    at += m.rows;
  }
  fe.pca = pca_fit(segs, cfg.r);
  return fe;
}

void FrontEnd::save(const std::string& path) const {
  grad::ParameterSet ps;
  const std::vector<double> packed = {
      static_cast<double>(cfg.n_mels),      cfg.f_min,
      cfg.f_max,                            static_cast<double>(cfg.n_fft),
      static_cast<double>(cfg.win_length),  static_cast<double>(cfg.hop_length),
      static_cast<double>(cfg.sample_rate), cfg.mean_norm ? 1.0 : 0.0,
      cfg.deltas ? 1.0 : 0.0,               cfg.smooth_ids ? 1.0 : 0.0,
      static_cast<double>(cfg.min_run),     static_cast<double>(cfg.k),
      static_cast<double>(cfg.r),           static_cast<double>(cfg.kmeans_iters)};
  ps.add("config", tensor_of(packed), false);
  ps.add("km.centroids", tensor_of(km.centroids), false);
  ps.add("pca.mean", tensor_of(pca.mean), false);
  ps.add("pca.components", tensor_of(pca.components), false);
  ps.add("pca.eigenvalues", tensor_of(pca.eigenvalues), false);
  ps.save(path);
}

FrontEnd FrontEnd::load(const std::string& path) {
  grad::ParameterSet ps;
  ps.load(path);

  const std::vector<double>& c = ps.get("config")->v;
  require(c.size() == 14, "FrontEnd::load: bad config vector");
  FrontEndConfig cfg;
  cfg.n_mels = static_cast<int>(c[0]);
  cfg.f_min = c[1];
  cfg.f_max = c[2];
  cfg.n_fft = static_cast<int>(c[3]);
  cfg.win_length = static_cast<int>(c[4]);
  cfg.hop_length = static_cast<int>(c[5]);
  cfg.sample_rate = static_cast<int>(c[6]);
  cfg.mean_norm = c[7] != 0.0;
  cfg.deltas = c[8] != 0.0;
  cfg.smooth_ids = c[9] != 0.0;
  cfg.min_run = static_cast<int>(c[10]);
  cfg.k = static_cast<int>(c[11]);
  cfg.r = static_cast<int>(c[12]);
  cfg.kmeans_iters = static_cast<int>(c[13]);

  FrontEnd fe;
  fe.cfg = cfg;
  fe.stft = stft_of(cfg);
  fe.bank = signal::make_mel_bank(fe.stft, cfg.n_mels, cfg.f_min, cfg.f_max);
  fe.km.centroids = ps.get("km.centroids")->to_matrix();
  fe.pca.mean = ps.get("pca.mean")->v;
  fe.pca.components = ps.get("pca.components")->to_matrix();
  fe.pca.eigenvalues = ps.get("pca.eigenvalues")->v;
  return fe;
}

}  // namespace utts::feats
