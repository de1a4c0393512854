#include <algorithm>
#include <cmath>
#include <cstdio>
#include <vector>

#include "doctest.h"
#include "utts/feats.hpp"
#include "utts/toylang.hpp"

using utts::RowMatrix;
using utts::Rng;
namespace fe = utts::feats;

namespace {

// Blob oracle: k well-separated Gaussian clouds whose true means are
// constructed here, independently of the clustering code under test.
struct BlobSet {
  RowMatrix points;
  std::vector<int> labels;
  RowMatrix means;  // k x d ground truth
};

BlobSet make_blobs(int k, int d, int per_blob, double sigma, Rng& rng) {
  BlobSet b;
  b.means = RowMatrix(k, d);
  for (int j = 0; j < k; ++j) b.means(j, j % d) = 10.0 * (1 + j / d);
  b.points = RowMatrix(k * per_blob, d);
  b.labels.resize(static_cast<size_t>(k) * per_blob);
  int row = 0;
  for (int j = 0; j < k; ++j) {
    for (int i = 0; i < per_blob; ++i, ++row) {
      b.labels[static_cast<size_t>(row)] = j;
      for (int c = 0; c < d; ++c) b.points(row, c) = b.means(j, c) + sigma * rng.normal();
    }
  }
  return b;
}

double dist2(const double* a, const double* b, int d) {
  double s = 0.0;
  for (int c = 0; c < d; ++c) s += (a[c] - b[c]) * (a[c] - b[c]);
  return s;
}

RowMatrix random_matrix(int rows, int cols, Rng& rng, double scale = 1.0) {
  RowMatrix m(rows, cols);
  for (double& v : m.data) v = scale * rng.normal();
  return m;
}

}  // namespace

TEST_CASE("kmeans recovers well separated blobs") {
  Rng rng(7);
  const int k = 4, d = 5;
  BlobSet b = make_blobs(k, d, 200, 0.05, rng);

  fe::KMeansFitInfo info;
  Rng fit_rng(11);
  fe::KMeansModel m = fe::kmeans_fit(b.points, k, fit_rng, 100, &info);
  REQUIRE(m.k() == k);
  REQUIRE(m.d() == d);

  // Every true blob mean has a centroid within 0.1, and the map is a
  // bijection (no centroid claims two blobs).
  std::vector<int> claim(k, -1);
  for (int j = 0; j < k; ++j) {
    int best = -1;
    double best_d = 1e300;
    for (int c = 0; c < k; ++c) {
      const double dd = std::sqrt(dist2(b.means.row(j), m.centroids.row(c), d));
      if (dd < best_d) {
        best_d = dd;
        best = c;
      }
    }
    INFO("blob ", j, " nearest centroid ", best, " at distance ", best_d);
    CHECK(best_d < 0.1);
    claim[static_cast<size_t>(j)] = best;
  }
  std::sort(claim.begin(), claim.end());
  for (int j = 0; j < k; ++j) CHECK(claim[static_cast<size_t>(j)] == j);

  // Inertia non-increasing across Lloyd iterations.
  REQUIRE(!info.inertia.empty());
  for (size_t i = 1; i < info.inertia.size(); ++i)
    CHECK(info.inertia[i] <= info.inertia[i - 1] + 1e-9);
  CHECK(info.converged);

  // Assignments agree with the generating labels >= 99% under the
  // blob -> centroid map established above.
  std::vector<int> ids = fe::kmeans_assign(m, b.points);
  std::vector<int> blob_to_centroid(k);
  for (int j = 0; j < k; ++j) {
    int best = 0;
    double best_d = 1e300;
    for (int c = 0; c < k; ++c) {
      const double dd = dist2(b.means.row(j), m.centroids.row(c), d);
      if (dd < best_d) {
        best_d = dd;
        best = c;
      }
    }
    blob_to_centroid[static_cast<size_t>(j)] = best;
  }
  int agree = 0;
  for (size_t i = 0; i < ids.size(); ++i)
    if (ids[i] == blob_to_centroid[static_cast<size_t>(b.labels[i])]) ++agree;
  const double acc = static_cast<double>(agree) / static_cast<double>(ids.size());
  INFO("assignment agreement ", acc);
  CHECK(acc >= 0.99);
}

TEST_CASE("kmeans edge cases and errors") {
  Rng rng(3);

  // k == T: each distinct point becomes its own centroid, zero inertia.
  RowMatrix pts(6, 3);
  for (int i = 0; i < 6; ++i)
    for (int c = 0; c < 3; ++c) pts(i, c) = 3.0 * i + c;
  fe::KMeansFitInfo info;
  fe::KMeansModel m = fe::kmeans_fit(pts, 6, rng, 50, &info);
  CHECK(info.inertia.back() <= 1e-18);

  // A frame equal to centroid j maps to j.
  std::vector<int> ids = fe::kmeans_assign(m, m.centroids);
  std::vector<int> sorted = ids;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 6; ++i) CHECK(sorted[static_cast<size_t>(i)] == i);

  // Equidistant tie resolves to the lower centroid id.
  fe::KMeansModel tie;
  tie.centroids = RowMatrix(2, 2);
  tie.centroids(0, 0) = 0.0;
  tie.centroids(1, 0) = 2.0;
  RowMatrix q(1, 2);
  q(0, 0) = 1.0;
  CHECK(fe::kmeans_assign(tie, q)[0] == 0);

  RowMatrix small(3, 2);
  Rng r2(4);
  CHECK_THROWS_AS(fe::kmeans_fit(small, 4, r2, 10), std::invalid_argument);
  CHECK_THROWS_AS(fe::kmeans_fit(small, 1, r2, 10), std::invalid_argument);
  RowMatrix wrong(2, 3);
  CHECK_THROWS_AS(fe::kmeans_assign(tie, wrong), std::invalid_argument);
}

TEST_CASE("segment_by_change splits runs of equal ids") {
  using fe::FrameRange;
  auto segs = fe::segment_by_change({1, 1, 2, 2, 2, 1});
  REQUIRE(segs.size() == 3);
  CHECK(segs[0] == FrameRange{0, 2});
  CHECK(segs[1] == FrameRange{2, 5});
  CHECK(segs[2] == FrameRange{5, 6});

  auto one = fe::segment_by_change(std::vector<int>(7, 4));
  REQUIRE(one.size() == 1);
  CHECK(one[0] == FrameRange{0, 7});

  std::vector<int> alt;
  for (int i = 0; i < 9; ++i) alt.push_back(i % 2);
  auto many = fe::segment_by_change(alt);
  REQUIRE(many.size() == 9);
  for (int i = 0; i < 9; ++i) {
    CHECK(many[static_cast<size_t>(i)].begin == i);
    CHECK(many[static_cast<size_t>(i)].end == i + 1);
  }

  CHECK_THROWS_AS(fe::segment_by_change({}), std::invalid_argument);
}

TEST_CASE("mean_pool matches direct re-summation") {
  Rng rng(21);

  // Single-frame segments: pooling is the identity.
  RowMatrix f(4, 3);
  for (double& v : f.data) v = rng.normal();
  std::vector<fe::FrameRange> singles;
  for (int i = 0; i < 4; ++i) singles.push_back({i, i + 1});
  RowMatrix pooled = fe::mean_pool(f, singles);
  REQUIRE(pooled.rows == 4);
  for (size_t i = 0; i < f.data.size(); ++i) CHECK(pooled.data[i] == f.data[i]);

  // Two identical frames per segment give back that frame.
  RowMatrix g(4, 2);
  for (int i = 0; i < 4; ++i)
    for (int c = 0; c < 2; ++c) g(i, c) = (i / 2) * 10.0 + c;
  RowMatrix h = fe::mean_pool(g, {{0, 2}, {2, 4}});
  CHECK(h(0, 0) == g(0, 0));
  CHECK(h(1, 1) == g(2, 1));

  // Random case against a brute-force oracle computed right here.
  const int T = 23, d = 7;
  RowMatrix x = random_matrix(T, d, rng);
  std::vector<fe::FrameRange> bounds;
  int at = 0;
  while (at < T) {
    int len = 1 + static_cast<int>(rng.below(5));
    if (at + len > T) len = T - at;
    bounds.push_back({at, at + len});
    at += len;
  }
  RowMatrix got = fe::mean_pool(x, bounds);
  REQUIRE(got.rows == static_cast<int>(bounds.size()));
  for (size_t s = 0; s < bounds.size(); ++s) {
    for (int c = 0; c < d; ++c) {
      double sum = 0.0;
      for (int t = bounds[s].begin; t < bounds[s].end; ++t) sum += x(t, c);
      CHECK(got(static_cast<int>(s), c) == sum / bounds[s].len());
    }
  }

  // Invalid boundaries: gap, overlap, wrong coverage, empty.
  CHECK_THROWS_AS(fe::mean_pool(x, {{0, 5}, {6, T}}), std::invalid_argument);
  CHECK_THROWS_AS(fe::mean_pool(x, {{0, 5}, {4, T}}), std::invalid_argument);
  CHECK_THROWS_AS(fe::mean_pool(x, {{0, T - 1}}), std::invalid_argument);
  CHECK_THROWS_AS(fe::mean_pool(x, {{1, T}}), std::invalid_argument);
  CHECK_THROWS_AS(fe::mean_pool(x, {}), std::invalid_argument);
  CHECK_THROWS_AS(fe::mean_pool(x, {{0, 0}, {0, T}}), std::invalid_argument);
}

TEST_CASE("pca recovers a line and preserves distances at full rank") {
  Rng rng(13);

  // Points on the line through direction (0.6, 0.8) plus an offset.
  const int N = 120;
  RowMatrix line(N, 2);
  for (int i = 0; i < N; ++i) {
    const double t = rng.normal() * 4.0;
    line(i, 0) = 5.0 + t * 0.6;
    line(i, 1) = -2.0 + t * 0.8;
  }
  fe::PcaModel pm = fe::pca_fit(line, 1);
  const double along = pm.components(0, 0) * 0.6 + pm.components(0, 1) * 0.8;
  INFO("cosine with the generating direction: ", along);
  CHECK(std::abs(along) > 0.999);

  // The mean point transforms to (numerically) zero.
  RowMatrix mean_pt(1, 2);
  mean_pt(0, 0) = pm.mean[0];
  mean_pt(0, 1) = pm.mean[1];
  RowMatrix z = fe::pca_transform(pm, mean_pt);
  CHECK(std::abs(z(0, 0)) <= 1e-9);

  // r == d: orthogonal change of basis preserves pairwise distances and
  // reconstruction is exact to round-off.
  const int M = 30, d = 6;
  RowMatrix data = random_matrix(M, d, rng, 2.0);
  fe::PcaModel full = fe::pca_fit(data, d);
  RowMatrix y = fe::pca_transform(full, data);
  for (int a = 0; a < M; ++a) {
    for (int b = a + 1; b < M; ++b) {
      const double dx = std::sqrt(dist2(data.row(a), data.row(b), d));
      const double dy = std::sqrt(dist2(y.row(a), y.row(b), d));
      CHECK(std::abs(dx - dy) <= 1e-8);
    }
  }
  for (int a = 0; a < M; ++a) {
    for (int c = 0; c < d; ++c) {
      double recon = full.mean[static_cast<size_t>(c)];
      for (int j = 0; j < d; ++j) recon += y(a, j) * full.components(j, c);
      CHECK(std::abs(recon - data(a, c)) <= 1e-8);
    }
  }
}

TEST_CASE("pca eigen structure and sign convention") {
  Rng rng(29);
  const int N = 200, d = 5;
  RowMatrix data = random_matrix(N, d, rng);
  // Stretch two axes so the spectrum has a clear order.
  for (int i = 0; i < N; ++i) {
    data(i, 0) *= 6.0;
    data(i, 1) *= 3.0;
  }
  fe::PcaModel m = fe::pca_fit(data, d);

  // Rows orthonormal.
  for (int a = 0; a < d; ++a) {
    for (int b = 0; b < d; ++b) {
      double dot = 0.0;
      for (int c = 0; c < d; ++c) dot += m.components(a, c) * m.components(b, c);
      CHECK(std::abs(dot - (a == b ? 1.0 : 0.0)) <= 1e-8);
    }
  }

  // Eigenvalues descending, and the projected variance per component
  // equals the eigenvalue.
  RowMatrix y = fe::pca_transform(m, data);
  for (int j = 0; j < d; ++j) {
    if (j > 0) CHECK(m.eigenvalues[static_cast<size_t>(j)] <= m.eigenvalues[static_cast<size_t>(j - 1)] + 1e-12);
    double var = 0.0;
    for (int i = 0; i < N; ++i) var += y(i, j) * y(i, j);
    var /= N;
    INFO("component ", j, " variance ", var, " eigenvalue ", m.eigenvalues[static_cast<size_t>(j)]);
    CHECK(std::abs(var - m.eigenvalues[static_cast<size_t>(j)]) <= 1e-6);
  }

  // Sign rule: the largest-magnitude coordinate of each component is
  // positive, so two fits of the same data agree exactly.
  for (int j = 0; j < d; ++j) {
    int arg = 0;
    for (int c = 1; c < d; ++c)
      if (std::abs(m.components(j, c)) > std::abs(m.components(j, arg))) arg = c;
    CHECK(m.components(j, arg) > 0.0);
  }
  fe::PcaModel again = fe::pca_fit(data, d);
  for (size_t i = 0; i < m.components.data.size(); ++i)
    CHECK(m.components.data[i] == again.components.data[i]);

  CHECK_THROWS_AS(fe::pca_fit(data, d + 1), std::invalid_argument);
  RowMatrix tiny = random_matrix(2, 5, rng);
  CHECK_THROWS_AS(fe::pca_fit(tiny, 3), std::invalid_argument);
  RowMatrix wrong = random_matrix(3, 4, rng);
  CHECK_THROWS_AS(fe::pca_transform(m, wrong), std::invalid_argument);
}

TEST_CASE("median smoothing removes isolated ids and keeps runs") {
  CHECK(fe::median_smooth3({0, 0, 1, 0, 0}) == std::vector<int>{0, 0, 0, 0, 0});
  CHECK(fe::median_smooth3({0, 1, 1, 0}) == std::vector<int>{0, 1, 1, 0});
  CHECK(fe::median_smooth3({5}) == std::vector<int>{5});
  CHECK(fe::median_smooth3({2, 7}) == std::vector<int>{2, 7});
  CHECK(fe::median_smooth3({}) == std::vector<int>{});
  // Isolated flips vanish but a tight alternation keeps its center: the
  // window around index 3 sees {9, 3, 9} whose median is 9.
  CHECK(fe::median_smooth3({3, 3, 9, 3, 9, 3, 3}) == std::vector<int>{3, 3, 3, 9, 3, 3, 3});
}

TEST_CASE("absorb_short_runs folds short runs into longer neighbors") {
  using V = std::vector<int>;
  // A 1-frame run joins the longer side.
  CHECK(fe::absorb_short_runs({0, 0, 0, 7, 1, 1}, 2) == V{0, 0, 0, 0, 1, 1});
  // Tie between neighbors prefers the earlier run.
  CHECK(fe::absorb_short_runs({0, 0, 7, 1, 1}, 2) == V{0, 0, 0, 1, 1});
  // Edge runs fold inward.
  CHECK(fe::absorb_short_runs({7, 0, 0, 0, 8}, 2) == V{0, 0, 0, 0, 0});
  // min_run 3 erases 2-frame runs; matching neighbors fuse afterwards.
  CHECK(fe::absorb_short_runs({0, 0, 0, 7, 7, 0, 0, 0}, 3) == V{0, 0, 0, 0, 0, 0, 0, 0});
  // Runs at min_run survive untouched.
  CHECK(fe::absorb_short_runs({4, 4, 5, 5}, 2) == V{4, 4, 5, 5});
  // A single run can never be shorter than the whole sequence allows.
  CHECK(fe::absorb_short_runs({9}, 3) == V{9});
  CHECK(fe::absorb_short_runs({}, 3) == V{});
  // Every output run meets the floor on a noisy random-ish sequence.
  const V noisy = {1, 1, 2, 1, 1, 3, 3, 3, 2, 2, 4, 2, 2, 2, 5, 5, 1};
  const V cleaned = fe::absorb_short_runs(noisy, 3);
  REQUIRE(cleaned.size() == noisy.size());
  auto runs = fe::segment_by_change(cleaned);
  for (const auto& r : runs) CHECK(r.len() >= 3);
  CHECK_THROWS_AS(fe::absorb_short_runs(noisy, 0), std::invalid_argument);
}

TEST_CASE("checkpoints round trip models exactly") {
  Rng rng(17);
  BlobSet b = make_blobs(3, 4, 60, 0.1, rng);
  Rng fit_rng(5);
  fe::KMeansModel km = fe::kmeans_fit(b.points, 3, fit_rng, 50);
  km.save("/tmp/feats_km.ckpt");
  fe::KMeansModel km2 = fe::KMeansModel::load("/tmp/feats_km.ckpt");
  REQUIRE(km2.k() == km.k());
  for (size_t i = 0; i < km.centroids.data.size(); ++i)
    CHECK(km.centroids.data[i] == km2.centroids.data[i]);

  RowMatrix data = random_matrix(80, 6, rng);
  fe::PcaModel pm = fe::pca_fit(data, 4);
  pm.save("/tmp/feats_pca.ckpt");
  fe::PcaModel pm2 = fe::PcaModel::load("/tmp/feats_pca.ckpt");
  REQUIRE(pm2.r() == pm.r());
  REQUIRE(pm2.d() == pm.d());
  for (size_t i = 0; i < pm.components.data.size(); ++i)
    CHECK(pm.components.data[i] == pm2.components.data[i]);
  for (size_t i = 0; i < pm.mean.size(); ++i) CHECK(pm.mean[i] == pm2.mean[i]);
  for (size_t i = 0; i < pm.eigenvalues.size(); ++i)
    CHECK(pm.eigenvalues[i] == pm2.eigenvalues[i]);
}

TEST_CASE("front end segments toy speech near the true unit rate") {
  namespace tl = utts::toylang;
  tl::ToyLanguageSpec spec = tl::preset_unambig();

  // Render utterances directly so the true unit count per sentence is
  // known exactly, independent of any file round trip.
  Rng master(2025);
  std::vector<std::vector<double>> waves;
  std::vector<int> true_units;
  for (int i = 0; i < 40; ++i) {
    Rng r = master.split(static_cast<uint64_t>(i));
    std::vector<int> sent = tl::sample_sentence(spec, r);
    tl::RenderResult rr = tl::render_utterance(sent, spec, r);
    waves.push_back(std::move(rr.wave.samples));
    true_units.push_back(static_cast<int>(sent.size()));
  }

  fe::FrontEndConfig cfg;
  cfg.k = 2 * static_cast<int>(spec.phones.size());
  Rng fit_rng(99);
  fe::FrontEnd fepipe = fe::fit_front_end(waves, cfg, fit_rng);
  REQUIRE(fepipe.km.k() == cfg.k);
  REQUIRE(fepipe.pca.r() == cfg.r);

  double mean_segs = 0.0, mean_true = 0.0;
  for (size_t i = 0; i < waves.size(); ++i) {
    fe::SegmentSequence ss = fepipe.segments(waves[i]);
    REQUIRE(ss.n() >= 1);
    // Boundaries tile the frame range.
    CHECK(ss.boundaries.front().begin == 0);
    for (size_t s = 1; s < ss.boundaries.size(); ++s)
      CHECK(ss.boundaries[s].begin == ss.boundaries[s - 1].end);
    CHECK(ss.vectors.cols == cfg.r);
    mean_segs += ss.n();
    mean_true += true_units[i];
  }
  mean_segs /= static_cast<double>(waves.size());
  mean_true /= static_cast<double>(waves.size());
  const double ratio = mean_segs / mean_true;
  INFO("mean segments ", mean_segs, " mean true units ", mean_true, " ratio ", ratio);
  CHECK(ratio >= 0.7);
  CHECK(ratio <= 1.3);

  // Per-frame mean normalization leaves every frame row near zero mean.
  RowMatrix fr = fepipe.frames(waves[0]);
  for (int t = 0; t < fr.rows; ++t) {
    double s = 0.0;
    for (int c = 0; c < fr.cols; ++c) s += fr(t, c);
    CHECK(std::abs(s / fr.cols) <= 1e-12);
  }

  // Save / load reproduces segment output exactly.
  fepipe.save("/tmp/feats_frontend.ckpt");
  fe::FrontEnd loaded = fe::FrontEnd::load("/tmp/feats_frontend.ckpt");
  fe::SegmentSequence a = fepipe.segments(waves[3]);
  fe::SegmentSequence c = loaded.segments(waves[3]);
  REQUIRE(a.n() == c.n());
  for (size_t i = 0; i < a.vectors.data.size(); ++i) CHECK(a.vectors.data[i] == c.vectors.data[i]);
  for (size_t i = 0; i < a.boundaries.size(); ++i) CHECK(a.boundaries[i] == c.boundaries[i]);
}
