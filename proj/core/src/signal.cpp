#include "utts/signal.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include <Eigen/Dense>

namespace utts::signal {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kLogFloor = 1e-10;

bool power_of_two(int n) { return n > 0 && (n & (n - 1)) == 0; }

}  // namespace

void StftConfig::finalize() {
  require(sample_rate > 0, "stft: sample_rate must be positive");
  require(power_of_two(n_fft), "stft: n_fft must be a power of two");
  require(win_length > 0 && win_length <= n_fft, "stft: need 0 < win_length <= n_fft");
  require(hop_length > 0 && hop_length <= win_length, "stft: need 0 < hop_length <= win_length");

  // Numeric COLA check on the squared window: the shifted sum must be constant.
  auto w = window_vector(*this);
  std::vector<double> s(hop_length, 0.0);
  for (int m = -win_length / hop_length - 1; m <= win_length / hop_length + 1; ++m) {
    for (int n = 0; n < hop_length; ++n) {
      const int idx = n - m * hop_length;
      if (idx >= 0 && idx < win_length) s[n] += w[idx] * w[idx];
    }
  }
  double lo = s[0], hi = s[0];
  for (double v : s) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  cola_ok = lo > 0.0 && (hi - lo) <= 1e-8 * hi;
}

std::vector<double> window_vector(const StftConfig& cfg) {
  std::vector<double> w(cfg.win_length, 1.0);
  if (cfg.window == Window::Hann) {
    for (int n = 0; n < cfg.win_length; ++n)
      w[n] = 0.5 - 0.5 * std::cos(2.0 * kPi * n / cfg.win_length);
  }
  return w;
}

void fft_inplace(std::vector<std::complex<double>>& a, bool inverse) {
  const size_t n = a.size();
  require(power_of_two(static_cast<int>(n)), "fft: size must be a power of two");

  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (size_t len = 2; len <= n; len <<= 1) {
    const double ang = (inverse ? 2.0 : -2.0) * kPi / static_cast<double>(len);
    const std::complex<double> wl(std::cos(ang), std::sin(ang));
    for (size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (size_t j = 0; j < len / 2; ++j) {
        const auto u = a[i + j];
        const auto v = a[i + j + len / 2] * w;
        a[i + j] = u + v;
        a[i + j + len / 2] = u - v;
        w *= wl;
      }
    }
  }
  if (inverse) {
    for (auto& x : a) x /= static_cast<double>(n);
  }
}

Spectrogram stft(const std::vector<double>& x, const StftConfig& cfg) {
  require(static_cast<int>(x.size()) >= cfg.win_length, "stft: signal shorter than one window");
  const int n_frames =
      1 + (static_cast<int>(x.size()) - cfg.win_length) / cfg.hop_length;
  const auto w = window_vector(cfg);

  Spectrogram spec;
  spec.n_frames = n_frames;
  spec.n_bins = cfg.n_bins();
  spec.data.resize(static_cast<size_t>(n_frames) * spec.n_bins);

  std::vector<std::complex<double>> buf(cfg.n_fft);
  for (int t = 0; t < n_frames; ++t) {
    const int start = t * cfg.hop_length;
    std::fill(buf.begin(), buf.end(), std::complex<double>(0.0, 0.0));
    for (int n = 0; n < cfg.win_length; ++n) buf[n] = x[start + n] * w[n];
    fft_inplace(buf, false);
    for (int f = 0; f < spec.n_bins; ++f) spec.at(t, f) = buf[f];
  }
  return spec;
}

std::vector<double> istft(const Spectrogram& spec, const StftConfig& cfg) {
  require(cfg.cola_ok, "istft: window/hop combination fails the overlap-add check");
  require(spec.n_bins == cfg.n_bins(), "istft: bin count does not match config");
  require(spec.n_frames >= 1, "istft: empty spectrogram");

  const auto w = window_vector(cfg);
  const int len = cfg.win_length + (spec.n_frames - 1) * cfg.hop_length;
  std::vector<double> num(len, 0.0), den(len, 0.0);
  std::vector<std::complex<double>> buf(cfg.n_fft);

  for (int t = 0; t < spec.n_frames; ++t) {
    for (int f = 0; f < spec.n_bins; ++f) buf[f] = spec.at(t, f);
    for (int f = spec.n_bins; f < cfg.n_fft; ++f) buf[f] = std::conj(spec.at(t, cfg.n_fft - f));
    fft_inplace(buf, true);
    const int start = t * cfg.hop_length;
    for (int n = 0; n < cfg.win_length; ++n) {
      num[start + n] += buf[n].real() * w[n];
      den[start + n] += w[n] * w[n];
    }
  }
  // Samples with almost no window coverage (the outermost tails) are zeroed
  // instead of divided: for modified spectra the division would amplify the
  // window tail by orders of magnitude.
  double den_max = 0.0;
  for (double d : den) den_max = std::max(den_max, d);
  const double thresh = 1e-2 * den_max;
  for (int i = 0; i < len; ++i) num[i] = den[i] > thresh ? num[i] / den[i] : 0.0;
  return num;
}

RowMatrix magnitude(const Spectrogram& spec) {
  RowMatrix m(spec.n_frames, spec.n_bins);
  for (int t = 0; t < spec.n_frames; ++t)
    for (int f = 0; f < spec.n_bins; ++f) m(t, f) = std::abs(spec.at(t, f));
  return m;
}

double spectral_convergence(const RowMatrix& approx, const RowMatrix& ref) {
  require(approx.rows == ref.rows && approx.cols == ref.cols,
          "spectral_convergence: shape mismatch");
  double num = 0.0, den = 0.0;
  for (size_t i = 0; i < ref.data.size(); ++i) {
    const double d = approx.data[i] - ref.data[i];
    num += d * d;
    den += ref.data[i] * ref.data[i];
  }
  require(den > 0.0, "spectral_convergence: zero reference");
  return std::sqrt(num / den);
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

MelBank make_mel_bank(const StftConfig& cfg, int n_mels, double f_min, double f_max) {
  require(n_mels > 0, "mel: n_mels must be positive");
  require(f_min >= 0.0 && f_max > f_min, "mel: need 0 <= f_min < f_max");
  require(f_max <= cfg.sample_rate / 2.0, "mel: f_max above Nyquist");

  MelBank bank;
  bank.n_mels = n_mels;
  bank.n_bins = cfg.n_bins();
  bank.sample_rate = cfg.sample_rate;
  bank.f_min = f_min;
  bank.f_max = f_max;
  bank.weights = RowMatrix(n_mels, bank.n_bins);

  const double mel_lo = hz_to_mel(f_min), mel_hi = hz_to_mel(f_max);
  std::vector<double> edges(n_mels + 2);
  for (int i = 0; i < n_mels + 2; ++i)
    edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / (n_mels + 1));

  for (int m = 0; m < n_mels; ++m) {
    const double lo = edges[m], mid = edges[m + 1], hi = edges[m + 2];
    for (int f = 0; f < bank.n_bins; ++f) {
      const double hz = static_cast<double>(f) * cfg.sample_rate / cfg.n_fft;
      double v = 0.0;
      if (hz > lo && hz < hi) v = hz <= mid ? (hz - lo) / (mid - lo) : (hi - hz) / (hi - mid);
      bank.weights(m, f) = v;
    }
  }
  for (int m = 0; m < n_mels; ++m) {
    double s = 0.0;
    for (int f = 0; f < bank.n_bins; ++f) s += bank.weights(m, f);
    require(s > 0.0, "mel: n_mels too large for FFT resolution (empty filter row)");
  }
  return bank;
}

RowMatrix apply_mel(const RowMatrix& mag, const MelBank& bank) {
  require(mag.cols == bank.n_bins, "mel: magnitude bin count does not match bank");
  RowMatrix out(mag.rows, bank.n_mels);
  for (int t = 0; t < mag.rows; ++t)
    for (int m = 0; m < bank.n_mels; ++m) {
      double s = 0.0;
      for (int f = 0; f < bank.n_bins; ++f) s += bank.weights(m, f) * mag(t, f);
      out(t, m) = s;
    }
  return out;
}

RowMatrix log_compress(const RowMatrix& m) {
  RowMatrix out = m;
  for (auto& v : out.data) v = std::log(std::max(v, kLogFloor));
  return out;
}

RowMatrix log_expand(const RowMatrix& m) {
  RowMatrix out = m;
  for (auto& v : out.data) v = std::exp(v);
  return out;
}

RowMatrix mel_to_linear(const RowMatrix& mel, const MelBank& bank) {
  require(mel.cols == bank.n_mels, "mel_to_linear: mel dimension does not match bank");
  Eigen::MatrixXd W(bank.n_mels, bank.n_bins);
  for (int m = 0; m < bank.n_mels; ++m)
    for (int f = 0; f < bank.n_bins; ++f) W(m, f) = bank.weights(m, f);
  Eigen::MatrixXd M(mel.rows, mel.cols);
  for (int t = 0; t < mel.rows; ++t)
    for (int m = 0; m < mel.cols; ++m) M(t, m) = mel(t, m);

  // Minimum-norm least squares: linear = M * pinv(W)^T, clamped at zero.
  Eigen::MatrixXd pinv = W.completeOrthogonalDecomposition().pseudoInverse();  // bins x mels
  Eigen::MatrixXd lin = M * pinv.transpose();

  RowMatrix out(mel.rows, bank.n_bins);
  for (int t = 0; t < out.rows; ++t)
    for (int f = 0; f < out.cols; ++f) out(t, f) = std::max(lin(t, f), 0.0);
  return out;
}

RowMatrix log_mel_features(const std::vector<double>& samples, const StftConfig& cfg,
                           const MelBank& bank) {
  return log_compress(apply_mel(magnitude(stft(samples, cfg)), bank));
}

GriffinLimResult griffin_lim(const RowMatrix& mag, const StftConfig& cfg, int n_iters,
                             uint64_t seed) {
  require(n_iters >= 1, "griffin_lim: need at least one iteration");
  require(mag.cols == cfg.n_bins(), "griffin_lim: bin count does not match config");
  for (double v : mag.data) require(v >= 0.0, "griffin_lim: negative magnitude");

  Rng rng(seed);
  Spectrogram spec;
  spec.n_frames = mag.rows;
  spec.n_bins = mag.cols;
  spec.data.resize(mag.data.size());
  for (size_t i = 0; i < mag.data.size(); ++i) {
    const double phi = rng.uniform(-kPi, kPi);
    spec.data[i] = std::polar(mag.data[i], phi);
  }

  GriffinLimResult res;
  res.trace.reserve(n_iters);
  for (int it = 0; it < n_iters; ++it) {
    auto x = istft(spec, cfg);
    auto rebuilt = stft(x, cfg);
    res.trace.push_back(spectral_convergence(magnitude(rebuilt), mag));
    for (size_t i = 0; i < spec.data.size(); ++i) {
      const double a = std::abs(rebuilt.data[i]);
      spec.data[i] = a > 0.0 ? rebuilt.data[i] * (mag.data[i] / a)
                             : std::complex<double>(mag.data[i], 0.0);
    }
  }
  res.wave = istft(spec, cfg);
  return res;
}

// --- WAV I/O -----------------------------------------------------------------

namespace {

void put_u32(std::ofstream& f, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  f.write(reinterpret_cast<const char*>(b), 4);
}

void put_u16(std::ofstream& f, uint16_t v) {
  unsigned char b[2] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff)};
  f.write(reinterpret_cast<const char*>(b), 2);
}

uint32_t get_u32(std::ifstream& f) {
  unsigned char b[4];
  f.read(reinterpret_cast<char*>(b), 4);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

uint16_t get_u16(std::ifstream& f) {
  unsigned char b[2];
  f.read(reinterpret_cast<char*>(b), 2);
  return static_cast<uint16_t>(b[0] | (b[1] << 8));
}

}  // namespace

void write_wav(const std::string& path, const Wave& w) {
  require(w.sample_rate > 0, "wav: sample rate must be positive");
  require(!w.samples.empty(), "wav: refusing to write empty file");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write wav: " + path);

  const uint32_t n = static_cast<uint32_t>(w.samples.size());
  const uint32_t data_bytes = n * 2;
  f.write("RIFF", 4);
  put_u32(f, 36 + data_bytes);
  f.write("WAVE", 4);
  f.write("fmt ", 4);
  put_u32(f, 16);
  put_u16(f, 1);  // PCM
  put_u16(f, 1);  // mono
  put_u32(f, static_cast<uint32_t>(w.sample_rate));
  put_u32(f, static_cast<uint32_t>(w.sample_rate) * 2);
  put_u16(f, 2);
  put_u16(f, 16);
  f.write("data", 4);
  put_u32(f, data_bytes);
  for (double s : w.samples) {
    const double c = std::clamp(s, -1.0, 1.0);
    const int q = static_cast<int>(std::lround(c * 32768.0));
    const auto iv = static_cast<int16_t>(std::clamp(q, -32768, 32767));
    const auto uv = static_cast<uint16_t>(iv);
    unsigned char b[2] = {static_cast<unsigned char>(uv & 0xff),
                          static_cast<unsigned char>((uv >> 8) & 0xff)};
    f.write(reinterpret_cast<const char*>(b), 2);
  }
  if (!f) throw std::runtime_error("short write: " + path);
}

Wave read_wav(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open wav: " + path);
  char tag[5] = {0};
  f.read(tag, 4);
  if (std::strncmp(tag, "RIFF", 4) != 0) throw std::runtime_error("not a RIFF file: " + path);
  get_u32(f);
  f.read(tag, 4);
  if (std::strncmp(tag, "WAVE", 4) != 0) throw std::runtime_error("not a WAVE file: " + path);

  Wave w;
  bool have_fmt = false;
  while (f.read(tag, 4)) {
    const uint32_t size = get_u32(f);
    if (std::strncmp(tag, "fmt ", 4) == 0) {
      const uint16_t fmt = get_u16(f);
      const uint16_t channels = get_u16(f);
      const uint32_t sr = get_u32(f);
      get_u32(f);
      get_u16(f);
      const uint16_t bits = get_u16(f);
      if (fmt != 1 || bits != 16) throw std::runtime_error("wav must be 16-bit PCM: " + path);
      if (channels != 1) throw std::runtime_error("wav must be mono: " + path);
      w.sample_rate = static_cast<int>(sr);
      if (size > 16) f.seekg(size - 16, std::ios::cur);
      have_fmt = true;
    } else if (std::strncmp(tag, "data", 4) == 0) {
      if (!have_fmt) throw std::runtime_error("wav data before fmt chunk: " + path);
      const uint32_t n = size / 2;
      w.samples.resize(n);
      for (uint32_t i = 0; i < n; ++i) {
        const auto uv = get_u16(f);
        w.samples[i] = static_cast<int16_t>(uv) / 32768.0;
      }
      if (!f) throw std::runtime_error("truncated wav data: " + path);
      return w;
    } else {
      f.seekg(size + (size & 1), std::ios::cur);
    }
  }
  throw std::runtime_error("wav has no data chunk: " + path);
}

Wave read_wav(const std::string& path, int expected_sample_rate) {
  Wave w = read_wav(path);
  if (w.sample_rate != expected_sample_rate)
    throw std::runtime_error("wav sample rate " + std::to_string(w.sample_rate) +
                             " does not match configured rate " +
                             std::to_string(expected_sample_rate) + ": " + path);
  return w;
}

void peak_normalize(std::vector<double>& samples, double peak) {
  require(peak > 0.0, "peak_normalize: peak must be positive");
  double mx = 0.0;
  for (double s : samples) mx = std::max(mx, std::fabs(s));
  if (mx == 0.0) return;
  const double k = peak / mx;
  for (auto& s : samples) s *= k;
}

}  // namespace utts::signal
