#pragma once

// Shared plumbing: error types, portable RNG, small file helpers.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ramdg {

/// Raised on malformed or self-contradictory configuration.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Raised on unreadable or inconsistent data files.
struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Raised when a computation produces a non-finite value.
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

/// Combines a base seed with stream identifiers into an independent seed.
inline uint64_t derive_seed(uint64_t seed, uint64_t stream, uint64_t index = 0) {
  return splitmix64(splitmix64(seed ^ 0x8f1bbcdcbfa53e0bull) + splitmix64(stream) * 0x2545f4914f6cdd1dull + index);
}

inline uint64_t fnv1a(const std::string& s) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

/// Deterministic random source. Output sequences depend only on the seed,
/// never on the platform: all distributions are implemented here instead of
/// delegating to <random> distribution objects, whose algorithms are
/// implementation-defined.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return double(eng_() >> 11) * 0x1.0p-53; }

  /// Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). Rejection sampling, no modulo bias.
  uint64_t uniform_int(uint64_t n) {
    if (n == 0) throw ConfigError("uniform_int: n must be positive");
    uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t x;
    do {
      x = eng_();
    } while (x >= limit);
    return x % n;
  }

  /// Standard normal via Box-Muller. The paired draw is discarded so the
  /// generator state stays a pure function of the draw count.
  double normal() {
    double u1, u2;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Normal clipped to [mean - 2*stddev, mean + 2*stddev] by resampling.
  double trunc_normal(double mean, double stddev) {
    double x;
    do {
      x = normal();
    } while (x < -2.0 || x > 2.0);
    return mean + stddev * x;
  }

  bool bernoulli(double p) { return uniform() < p; }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = uniform_int(i);
      std::swap(v[i - 1], v[j]);
    }
  }

  template <class T>
  const T& pick(const std::vector<T>& v) {
    if (v.empty()) throw ConfigError("pick: empty vector");
    return v[uniform_int(v.size())];
  }

  /// k distinct indices from [0, n), order randomized.
  std::vector<size_t> sample_without_replacement(size_t n, size_t k) {
    if (k > n) throw ConfigError("sample_without_replacement: k > n");
    std::vector<size_t> idx(n);
    for (size_t i = 0; i < n; ++i) idx[i] = i;
    for (size_t i = 0; i < k; ++i) {
      size_t j = i + uniform_int(n - i);
      std::swap(idx[i], idx[j]);
    }
    idx.resize(k);
    return idx;
  }

  std::string save_state() const {
    std::ostringstream os;
    os << eng_;
    return os.str();
  }

  void load_state(const std::string& s) {
    std::istringstream is(s);
    is >> eng_;
    if (!is) throw DataError("Rng: malformed state string");
  }

 private:
  std::mt19937_64 eng_;
};

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write file: " + path);
  out << content;
  if (!out) throw DataError("write failed: " + path);
}

inline std::vector<std::string> split_lines(const std::string& text) {
  std::vector<std::string> lines;
  std::string cur;
  for (char c : text) {
    if (c == '\n') {
      lines.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) lines.push_back(cur);
  return lines;
}

}  // namespace ramdg
