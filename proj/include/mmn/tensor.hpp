#pragma once

// Minimal dense linear-algebra substrate: row-major double matrices, a
// deterministic RNG, and the handful of kernels the towers need. Everything
// is plain loops with a fixed accumulation order so results are bitwise
// reproducible across runs and platforms.

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "mmn/errors.hpp"

namespace mmn {

struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;  // row-major, rows*cols entries

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), data(r * c, fill) {}

  static Matrix zeros(std::size_t r, std::size_t c) { return Matrix(r, c); }

  double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const {
    return {data.data() + r * cols, cols};
  }

  std::size_t size() const { return data.size(); }

  bool same_shape(const Matrix& o) const {
    return rows == o.rows && cols == o.cols;
  }

  bool all_finite() const {
    for (double v : data) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  void fill(double v) { std::fill(data.begin(), data.end(), v); }
};

inline std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows) + "x" + std::to_string(m.cols);
}

// --- deterministic RNG -----------------------------------------------------
//
// xoshiro256++ seeded through splitmix64. Identical seed gives an identical
// stream on every platform; no global or thread-local state.

inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Stable derivation of stream seeds (epoch shuffles, generator substreams).
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  std::uint64_t s = base ^ (0x9e3779b97f4a7c15ULL + stream * 0xbf58476d1ce4e5b9ULL);
  std::uint64_t dummy = s;
  return splitmix64(dummy);
}

class RngState {
 public:
  explicit RngState(std::uint64_t seed) : seed_(seed) {
    std::uint64_t sm = seed;
    for (auto& word : s_) word = splitmix64(sm);
  }

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform in [0,1), 53 random bits.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  bool bernoulli(double p) { return next_double() < p; }

  // Uniform integer in [0,n). Modulo reduction: the tiny bias is irrelevant
  // here, determinism is what matters.
  std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(next_below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
  }

  std::uint64_t seed_ = 0;
  std::array<std::uint64_t, 4> s_{};
};

// --- kernels ----------------------------------------------------------------

inline void check_matmul_shapes(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows) {
    throw ShapeError("matmul: " + shape_str(a) + " * " + shape_str(b));
  }
}

// C = A * B. Accumulation per output entry runs over k ascending.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  check_matmul_shapes(a, b);
  Matrix c(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double* arow = a.data.data() + i * a.cols;
    double* crow = c.data.data() + i * b.cols;
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double aik = arow[k];
      if (aik == 0.0) continue;
      const double* brow = b.data.data() + k * b.cols;
      for (std::size_t j = 0; j < b.cols; ++j) crow[j] += aik * brow[j];
    }
  }
  return c;
}

// C = A' * B (A is n x r, B is n x c, result r x c).
inline Matrix matmul_at_b(const Matrix& a, const Matrix& b) {
  if (a.rows != b.rows) {
    throw ShapeError("matmul_at_b: " + shape_str(a) + " ' * " + shape_str(b));
  }
  Matrix c(a.cols, b.cols);
  for (std::size_t n = 0; n < a.rows; ++n) {
    const double* arow = a.data.data() + n * a.cols;
    const double* brow = b.data.data() + n * b.cols;
    for (std::size_t i = 0; i < a.cols; ++i) {
      const double v = arow[i];
      if (v == 0.0) continue;
      double* crow = c.data.data() + i * b.cols;
      for (std::size_t j = 0; j < b.cols; ++j) crow[j] += v * brow[j];
    }
  }
  return c;
}

// C = A * B' (A is n x c, B is m x c, result n x m).
inline Matrix matmul_a_bt(const Matrix& a, const Matrix& b) {
  if (a.cols != b.cols) {
    throw ShapeError("matmul_a_bt: " + shape_str(a) + " * " + shape_str(b) + "'");
  }
  Matrix c(a.rows, b.rows);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double* arow = a.data.data() + i * a.cols;
    for (std::size_t j = 0; j < b.rows; ++j) {
      const double* brow = b.data.data() + j * b.cols;
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols; ++k) acc += arow[k] * brow[k];
      c.at(i, j) = acc;
    }
  }
  return c;
}

enum class Elementwise { add, mul };

inline Matrix elementwise(const Matrix& a, const Matrix& b, Elementwise kind) {
  if (!a.same_shape(b)) {
    throw ShapeError("elementwise: " + shape_str(a) + " vs " + shape_str(b));
  }
  Matrix c(a.rows, a.cols);
  if (kind == Elementwise::add) {
    for (std::size_t i = 0; i < a.size(); ++i) c.data[i] = a.data[i] + b.data[i];
  } else {
    for (std::size_t i = 0; i < a.size(); ++i) c.data[i] = a.data[i] * b.data[i];
  }
  return c;
}

inline Matrix add(const Matrix& a, const Matrix& b) {
  return elementwise(a, b, Elementwise::add);
}

inline Matrix hadamard(const Matrix& a, const Matrix& b) {
  return elementwise(a, b, Elementwise::mul);
}

inline void add_in_place(Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) {
    throw ShapeError("add_in_place: " + shape_str(a) + " vs " + shape_str(b));
  }
  for (std::size_t i = 0; i < a.size(); ++i) a.data[i] += b.data[i];
}

// Z = X + broadcast(bias row) where bias is 1 x cols.
inline void add_row_broadcast(Matrix& x, const Matrix& bias) {
  if (bias.rows != 1 || bias.cols != x.cols) {
    throw ShapeError("add_row_broadcast: " + shape_str(x) + " += " + shape_str(bias));
  }
  for (std::size_t i = 0; i < x.rows; ++i) {
    double* row = x.data.data() + i * x.cols;
    for (std::size_t j = 0; j < x.cols; ++j) row[j] += bias.data[j];
  }
}

// 1 x cols matrix of column sums.
inline Matrix colsum(const Matrix& a) {
  Matrix s(1, a.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double* row = a.data.data() + i * a.cols;
    for (std::size_t j = 0; j < a.cols; ++j) s.data[j] += row[j];
  }
  return s;
}

inline Matrix relu(const Matrix& a) {
  Matrix c(a.rows, a.cols);
  for (std::size_t i = 0; i < a.size(); ++i) {
    c.data[i] = a.data[i] > 0.0 ? a.data[i] : 0.0;
  }
  return c;
}

// Numerically stable sigmoid. The split avoids overflow of exp for large
// negative inputs; the result is pinned strictly inside (0,1) so downstream
// logs stay finite even for extreme logits.
inline double sigmoid_scalar(double x) {
  double v;
  if (x >= 0.0) {
    v = 1.0 / (1.0 + std::exp(-x));
  } else {
    const double e = std::exp(x);
    v = e / (1.0 + e);
  }
  constexpr double lo = std::numeric_limits<double>::min();
  const double hi = 1.0 - std::numeric_limits<double>::epsilon() / 2.0;
  if (v < lo) v = lo;
  if (v > hi) v = hi;
  return v;
}

inline Matrix sigmoid(const Matrix& a) {
  Matrix c(a.rows, a.cols);
  for (std::size_t i = 0; i < a.size(); ++i) c.data[i] = sigmoid_scalar(a.data[i]);
  return c;
}

}  // namespace mmn
