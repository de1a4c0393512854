#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

namespace utts {

// Error taxonomy. Exit-code mapping lives in the CLI: config 2, stage 3, gate 4.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};
struct StageError : std::runtime_error {
  explicit StageError(const std::string& msg) : std::runtime_error(msg) {}
};
struct GateError : std::runtime_error {
  explicit GateError(const std::string& msg) : std::runtime_error(msg) {}
};
struct NumericsError : std::runtime_error {
  explicit NumericsError(const std::string& msg) : std::runtime_error(msg) {}
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

// Deterministic RNG (xoshiro256**, splitmix64 seeding). All sampling goes
// through this class so runs are bit-exact across platforms; std::
// distributions are implementation-defined and deliberately not used.
class Rng {
 public:
  explicit Rng(uint64_t seed) {
    uint64_t x = seed;
    for (auto& si : s_) si = splitmix64(x);
  }

  uint64_t u64() {
    const uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; no cached spare so stream position is
  // a pure function of the number of calls.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

  // Integer in [0, n).
  uint64_t below(uint64_t n) { return n ? u64() % n : 0; }

  // Independent child stream keyed by an id; parent state is untouched, so
  // per-item streams agree whether items are processed serially or not.
  Rng split(uint64_t key) const {
    uint64_t x = s_[0] ^ rotl(s_[3], 13) ^ (key * 0x9e3779b97f4a7c15ULL);
    return Rng(splitmix64(x));
  }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  static uint64_t splitmix64(uint64_t& x) {
    x += 0x9e3779b97f4a7c15ULL;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }
  uint64_t s_[4];
};

// Dense row-major matrix of doubles. The workhorse container for frames,
// features and model statistics across modules.
struct RowMatrix {
  int rows{0};
  int cols{0};
  std::vector<double> data;

  RowMatrix() = default;
  RowMatrix(int r, int c, double fill = 0.0) : rows(r), cols(c), data(static_cast<size_t>(r) * c, fill) {}

  double& operator()(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
  double operator()(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }
  const double* row(int r) const { return data.data() + static_cast<size_t>(r) * cols; }
  double* row(int r) { return data.data() + static_cast<size_t>(r) * cols; }
  bool empty() const { return rows == 0 || cols == 0; }
};

// FNV-1a 64-bit. Used for config/manifest/report digests; not cryptographic.
class Digest {
 public:
  Digest& update(const void* bytes, size_t n) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (size_t i = 0; i < n; ++i) {
      h_ ^= p[i];
      h_ *= 0x100000001b3ULL;
    }
    return *this;
  }
  Digest& update(const std::string& s) { return update(s.data(), s.size()); }
  Digest& update(double d) {
    uint64_t bits;
    std::memcpy(&bits, &d, sizeof bits);
    return update(&bits, sizeof bits);
  }
  Digest& update(int64_t i) { return update(&i, sizeof i); }
  uint64_t value() const { return h_; }
  std::string hex() const;

 private:
  uint64_t h_ = 0xcbf29ce484222325ULL;
};

std::string digest_hex(uint64_t h);
std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);
bool file_exists(const std::string& path);
void make_dirs(const std::string& path);

// Fixed-format float printing for reports and TSVs (locale-independent).
std::string format_double(double v, int precision = 9);

std::vector<std::string> split_on(const std::string& s, char sep);
std::string join_with(const std::vector<std::string>& parts, const std::string& sep);

}  // namespace utts
