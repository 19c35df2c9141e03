/*
 * Copyright (c) 2026, The nhtlab Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace nht {

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

/// Dense row-major array of doubles. Rank 1 holds vectors, rank 2 holds
/// batches (rows = samples).
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

  Tensor(std::vector<std::size_t> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (element_count(shape_) != data_.size()) {
      throw std::invalid_argument("Tensor: shape does not match data length");
    }
  }

  static Tensor vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({n}, std::move(values));
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return Tensor({rows, cols}, fill);
  }

  const std::vector<std::size_t>& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::size_t rows() const {
    if (rank() != 2) throw std::invalid_argument("Tensor: rows() needs rank 2");
    return shape_[0];
  }
  std::size_t cols() const {
    if (rank() != 2) throw std::invalid_argument("Tensor: cols() needs rank 2");
    return shape_[1];
  }

  std::span<const double> values() const noexcept { return data_; }
  std::span<double> values() noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }

  std::span<const double> row(std::size_t r) const {
    const std::size_t w = cols();
    return {data_.data() + r * w, w};
  }
  std::span<double> row(std::size_t r) {
    const std::size_t w = cols();
    return {data_.data() + r * w, w};
  }

  Tensor row_tensor(std::size_t r) const {
    auto v = row(r);
    return Tensor::vector({v.begin(), v.end()});
  }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

  static std::size_t element_count(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  }

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

/// Stacks equally sized vectors into an n x D matrix.
inline Tensor stack_rows(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) return Tensor::matrix(0, 0);
  const std::size_t w = rows.front().size();
  Tensor out = Tensor::matrix(rows.size(), w);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != w) throw std::invalid_argument("stack_rows: ragged rows");
    std::copy(rows[r].begin(), rows[r].end(), out.row(r).begin());
  }
  return out;
}

inline std::size_t argmax(std::span<const double> v) {
  if (v.empty()) throw std::invalid_argument("argmax: empty input");
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;  // strict: ties keep the lowest index
  }
  return best;
}

// ---------------------------------------------------------------------------
// Elementwise helpers
// ---------------------------------------------------------------------------

inline double clip01(double x) {
  if (std::isnan(x)) throw std::invalid_argument("clip01: NaN input");
  return std::min(1.0, std::max(0.0, x));
}

/// Softmax with max-subtraction.
inline std::vector<double> softmax(std::span<const double> logits) {
  if (logits.empty()) throw std::invalid_argument("softmax: empty input");
  const double m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - m);
    z += out[i];
  }
  for (double& v : out) v /= z;
  return out;
}

inline Tensor softmax(const Tensor& logits) {
  if (logits.rank() == 1) return Tensor::vector(softmax(logits.values()));
  Tensor out = logits;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto p = softmax(logits.row(r));
    std::copy(p.begin(), p.end(), out.row(r).begin());
  }
  return out;
}

struct MeanVar {
  double mean;
  double variance;
};

/// Population mean and variance (divisor n).
inline MeanVar mean_var(std::span<const double> samples) {
  if (samples.empty()) throw std::invalid_argument("mean_var: empty input");
  const double n = static_cast<double>(samples.size());
  double mean = 0.0;
  for (double x : samples) mean += x;
  mean /= n;
  double var = 0.0;
  for (double x : samples) var += (x - mean) * (x - mean);
  return {mean, var / n};
}

// ---------------------------------------------------------------------------
// Normal distribution
// ---------------------------------------------------------------------------

namespace detail {

constexpr double kSqrt2 = 1.41421356237309504880;
constexpr double kInvSqrtPi = 0.56418958354775628695;

// erf by its Maclaurin series; accurate for |x| <= 3.
inline double erf_series(double x) {
  double term = x;
  double sum = x;
  const double x2 = x * x;
  for (int n = 1; n < 200; ++n) {
    term *= -x2 / n;
    const double add = term / (2 * n + 1);
    sum += add;
    if (std::abs(add) < 1e-17 * std::abs(sum)) break;
  }
  return 2.0 * kInvSqrtPi * sum;
}

// erfc by the Laplace continued fraction (modified Lentz), x > 0.
inline double erfc_continued_fraction(double x) {
  constexpr double tiny = 1e-300;
  // erfc(x) = exp(-x^2)/sqrt(pi) * 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...))))
  double f = x;
  double c = x;
  double d = 0.0;
  for (int k = 1; k < 5000; ++k) {
    const double a = k * 0.5;
    d = x + a * d;
    if (std::abs(d) < tiny) d = tiny;
    c = x + a / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double delta = c * d;
    f *= delta;
    if (std::abs(delta - 1.0) < 1e-16) break;
  }
  return std::exp(-x * x) * kInvSqrtPi / f;
}

inline double erfc_precise(double x) {
  if (x < 0.0) return 2.0 - erfc_precise(-x);
  if (x < 2.0) return 1.0 - erf_series(x);
  return erfc_continued_fraction(x);
}

}  // namespace detail

/// Standard normal CDF.
inline double normal_cdf(double z) { return 0.5 * detail::erfc_precise(-z / detail::kSqrt2); }

/// Upper tail 1 - Phi(z), evaluated without cancellation for large z.
inline double normal_sf(double z) { return 0.5 * detail::erfc_precise(z / detail::kSqrt2); }

/// Returns z with Phi(z) = 1 - p, i.e. the upper-tail critical value.
/// Bisection on the survival function.
inline double z_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) throw std::invalid_argument("z_quantile: p must be in (0, 1)");
  if (p == 0.5) return 0.0;
  double lo = -40.0;
  double hi = 40.0;
  for (int i = 0; i < 300; ++i) {
    const double mid = 0.5 * (lo + hi);
    if (mid == lo || mid == hi) break;
    if (normal_sf(mid) > p) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

// ---------------------------------------------------------------------------
// Counter-based random source
// ---------------------------------------------------------------------------

namespace detail {

inline std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace detail

/// Deterministic generator whose i-th draw is a pure function of (key, i).
/// Not thread-safe; give each worker its own stream via derive().
class RandomSource {
 public:
  explicit RandomSource(std::uint64_t seed = 0) : seed_(seed), key_(detail::mix64(seed ^ 0x6a09e667f3bcc909ULL)) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t counter() const noexcept { return counter_; }

  /// Independent stream for a named purpose.
  RandomSource derive(std::string_view label) const {
    RandomSource out(seed_);
    out.key_ = detail::mix64(key_ ^ detail::mix64(detail::fnv1a(label)));
    return out;
  }

  RandomSource derive(std::uint64_t index) const {
    RandomSource out(seed_);
    out.key_ = detail::mix64(key_ + detail::mix64(index + 0x9e3779b97f4a7c15ULL));
    return out;
  }

  std::uint64_t next_u64() {
    const std::uint64_t c = counter_++;
    return detail::mix64(key_ ^ detail::mix64(c * 0x9e3779b97f4a7c15ULL + 0x3c6ef372fe94f82bULL));
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::size_t below(std::size_t n) {
    if (n == 0) throw std::invalid_argument("RandomSource::below: n must be positive");
    // Lemire-free rejection: discard the biased tail.
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return static_cast<std::size_t>(x % n);
  }

  /// Standard normal by Box-Muller (one variate per two uniforms).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  double normal(double mean, double sd) { return mean + sd * normal(); }

  bool bernoulli(double p) { return uniform() < p; }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[below(i)]);
    }
  }

  std::vector<std::size_t> permutation(std::size_t n) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    shuffle(idx);
    return idx;
  }

 private:
  std::uint64_t seed_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

// ---------------------------------------------------------------------------
// Binary container: "NHT1" | rank u32 | shape u64... | f64 payload (all LE)
// ---------------------------------------------------------------------------

namespace io {

static_assert(std::endian::native == std::endian::little, "serialization assumes a little-endian host");

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("unexpected end of stream");
  return v;
}

inline void put_string(std::ostream& os, std::string_view s) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is) {
  const auto n = get<std::uint32_t>(is);
  if (n > (1u << 24)) throw std::runtime_error("string field too long");
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw std::runtime_error("unexpected end of stream");
  return s;
}

inline constexpr char kTensorMagic[4] = {'N', 'H', 'T', '1'};

inline void write_tensor(std::ostream& os, const Tensor& t) {
  os.write(kTensorMagic, 4);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) put<std::uint64_t>(os, d);
  os.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  if (!os) throw std::runtime_error("write_tensor: stream failure");
}

inline Tensor read_tensor(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kTensorMagic, 4) != 0) throw std::runtime_error("read_tensor: bad magic");
  const auto rank = get<std::uint32_t>(is);
  if (rank > 8) throw std::runtime_error("read_tensor: rank too large");
  std::vector<std::size_t> shape(rank);
  std::size_t count = 1;
  for (auto& d : shape) {
    d = static_cast<std::size_t>(get<std::uint64_t>(is));
    if (d != 0 && count > (std::size_t{1} << 34) / d) throw std::runtime_error("read_tensor: payload too large");
    count *= d;
  }
  std::vector<double> data(count);
  is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(count * sizeof(double)));
  if (!is) throw std::runtime_error("read_tensor: truncated payload");
  return Tensor(std::move(shape), std::move(data));
}

}  // namespace io

}  // namespace nht
