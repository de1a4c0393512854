#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "utts/common.hpp"
#include "utts/signal.hpp"

namespace utts::feats {

// Frame clustering model; one centroid per row.
struct KMeansModel {
  RowMatrix centroids;  // k x d

  int k() const { return centroids.rows; }
  int d() const { return centroids.cols; }

  void save(const std::string& path) const;
  static KMeansModel load(const std::string& path);
};

// Optional diagnostics from a k-means fit.
struct KMeansFitInfo {
  std::vector<double> inertia;  // total squared distance after each assignment pass
  int iterations{0};
  bool converged{false};
};

// Principal subspace with a deterministic sign: the largest-magnitude
// coordinate of each component is positive, so independent fits of the
// same data produce identical checkpoints.
struct PcaModel {
  std::vector<double> mean;         // d
  RowMatrix components;             // r x d, orthonormal rows
  std::vector<double> eigenvalues;  // r, descending

  int r() const { return components.rows; }
  int d() const { return components.cols; }

  void save(const std::string& path) const;
  static PcaModel load(const std::string& path);
};

// Half-open frame range [begin, end).
struct FrameRange {
  int begin{0};
  int end{0};

  int len() const { return end - begin; }
  bool operator==(const FrameRange&) const = default;
};

// Pooled segment vectors plus the frame ranges they were pooled from.
// Ranges are ordered, non-overlapping and tile [0, T).
struct SegmentSequence {
  RowMatrix vectors;  // S x r
  std::vector<FrameRange> boundaries;

  int n() const { return vectors.rows; }
};

// k-means++ seeding followed by Lloyd iterations until the assignment
// reaches a fixpoint or max_iters passes. Empty clusters are reseeded to
// the point farthest from its current centroid.
KMeansModel kmeans_fit(const RowMatrix& frames, int k, Rng& rng, int max_iters = 100,
                       KMeansFitInfo* info = nullptr);

// Nearest centroid by Euclidean distance; ties resolve to the lowest id.
std::vector<int> kmeans_assign(const KMeansModel& model, const RowMatrix& frames);

// Maximal runs of equal ids become segments.
std::vector<FrameRange> segment_by_change(const std::vector<int>& ids);

// Arithmetic mean of the frames inside each range. Ranges must tile the
// frame count exactly.
RowMatrix mean_pool(const RowMatrix& frames, const std::vector<FrameRange>& boundaries);

// Top-r eigenvectors of the covariance of mean-centered data, ordered by
// descending eigenvalue.
PcaModel pca_fit(const RowMatrix& data, int r);
RowMatrix pca_transform(const PcaModel& model, const RowMatrix& data);

// Sliding median of width 3 (ends copied through): scrubs one-frame
// flickers out of a cluster-id sequence without moving long run edges.
std::vector<int> median_smooth3(const std::vector<int>& ids);

// Repeatedly merges runs shorter than min_run into the longer adjacent
// run (ties prefer the earlier one) until every run is at least min_run
// frames or a single run remains. Blend frames at unit joins otherwise
// land in their own clusters and split segments.
std::vector<int> absorb_short_runs(const std::vector<int>& ids, int min_run);

// Front-end recipe: log-mel frames -> cluster -> segment at changes ->
// mean-pool -> PCA. Defaults were frozen by a sweep on the toy corpus.
struct FrontEndConfig {
  int n_mels{40};
  double f_min{60.0};
  double f_max{7600.0};
  int n_fft{512};
  int win_length{400};   // 25 ms at 16 kHz
  int hop_length{240};   // 15 ms
  int sample_rate{16000};
  bool mean_norm{true};   // subtract each frame's mean over mel channels
  bool deltas{false};     // append first differences
  bool smooth_ids{true};  // median filter ids before segmentation
  int min_run{3};         // absorb id runs shorter than this many frames
  int k{24};              // clusters; callers set 2 x phone inventory
  int r{16};              // PCA output dimension
  int kmeans_iters{50};
};

// A fitted front end. frames/segments are pure and safe to call from
// several threads at once; fitting is single-threaded.
struct FrontEnd {
  FrontEndConfig cfg;
  signal::StftConfig stft;
  signal::MelBank bank;
  KMeansModel km;
  PcaModel pca;

  // Log-mel (+ optional normalization / deltas) frames for one waveform.
  RowMatrix frames(const std::vector<double>& samples) const;
  // Cluster ids for precomputed frames, with smoothing applied per config.
  std::vector<int> cluster_ids(const RowMatrix& frames) const;
  // Full chain: frames -> ids -> segments -> pooled -> PCA.
  SegmentSequence segments(const std::vector<double>& samples) const;

  void save(const std::string& path) const;
  static FrontEnd load(const std::string& path);
};

// Fit the cluster model on all frames of the given waveforms, then the PCA
// on the pooled segment vectors they induce.
FrontEnd fit_front_end(const std::vector<std::vector<double>>& waves, const FrontEndConfig& cfg,
                       Rng& rng);

}  // namespace utts::feats
