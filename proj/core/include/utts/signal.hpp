#pragma once

#include <complex>
#include <cstdint>
#include <string>
#include <vector>

#include "utts/common.hpp"

namespace utts::signal {

enum class Window { Hann, Rect };

// Frame/overlap parameters for all spectral analysis. Construction validates the
// geometry and runs a numeric constant-overlap-add check on the squared window,
// which inverse transforms later rely on.
struct StftConfig {
  int sample_rate = 16000;
  int n_fft = 1024;
  int win_length = 1024;
  int hop_length = 256;
  Window window = Window::Hann;
  bool cola_ok = false;

  StftConfig() { finalize(); }
  StftConfig(int sr, int nfft, int win, int hop, Window w = Window::Hann)
      : sample_rate(sr), n_fft(nfft), win_length(win), hop_length(hop), window(w) {
    finalize();
  }

  int n_bins() const { return n_fft / 2 + 1; }

 private:
  void finalize();
};

// Periodic analysis window of length cfg.win_length.
std::vector<double> window_vector(const StftConfig& cfg);

struct Spectrogram {
  int n_frames = 0;
  int n_bins = 0;
  std::vector<std::complex<double>> data;  // row-major frames x bins

  std::complex<double>& at(int t, int f) { return data[static_cast<size_t>(t) * n_bins + f]; }
  const std::complex<double>& at(int t, int f) const {
    return data[static_cast<size_t>(t) * n_bins + f];
  }
};

// In-place radix-2 FFT; size must be a power of two.
void fft_inplace(std::vector<std::complex<double>>& a, bool inverse);

// Short-time Fourier transform, onesided. Frames are windowed then zero-padded to
// n_fft; the signal itself is never padded, so frame count is
// 1 + floor((len - win) / hop) and signals shorter than one window are rejected.
Spectrogram stft(const std::vector<double>& x, const StftConfig& cfg);

// Weighted overlap-add inverse with squared-window normalization. Requires a
// config whose COLA check passed.
std::vector<double> istft(const Spectrogram& spec, const StftConfig& cfg);

RowMatrix magnitude(const Spectrogram& spec);

// ||A - B||_F / ||B||_F over magnitude matrices of equal shape.
double spectral_convergence(const RowMatrix& approx, const RowMatrix& ref);

double hz_to_mel(double hz);
double mel_to_hz(double mel);

struct MelBank {
  int n_mels = 0;
  int n_bins = 0;
  int sample_rate = 0;
  double f_min = 0.0;
  double f_max = 0.0;
  RowMatrix weights;  // n_mels x n_bins, triangular rows
};

MelBank make_mel_bank(const StftConfig& cfg, int n_mels, double f_min, double f_max);

// T x bins magnitude -> T x mels.
RowMatrix apply_mel(const RowMatrix& mag, const MelBank& bank);

// Elementwise log with floor 1e-10.
RowMatrix log_compress(const RowMatrix& m);
RowMatrix log_expand(const RowMatrix& m);

// Least-squares mel inversion via pseudo-inverse, clamped at zero.
RowMatrix mel_to_linear(const RowMatrix& mel, const MelBank& bank);

// Full analysis chain used by the recognizer front end.
RowMatrix log_mel_features(const std::vector<double>& samples, const StftConfig& cfg,
                           const MelBank& bank);

struct GriffinLimResult {
  std::vector<double> wave;
  std::vector<double> trace;  // spectral convergence after each iteration
};

// Phase reconstruction from a magnitude spectrogram, starting from seeded uniform
// random phases.
GriffinLimResult griffin_lim(const RowMatrix& mag, const StftConfig& cfg, int n_iters,
                             uint64_t seed);

struct Wave {
  std::vector<double> samples;
  int sample_rate = 0;
};

// 16-bit PCM mono only.
Wave read_wav(const std::string& path);
// Rejects files whose sample rate differs from the configured rate (no resampling).
Wave read_wav(const std::string& path, int expected_sample_rate);
void write_wav(const std::string& path, const Wave& w);

void peak_normalize(std::vector<double>& samples, double peak);

}  // namespace utts::signal
