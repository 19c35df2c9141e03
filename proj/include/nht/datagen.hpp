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

#include <nht/numerics.hpp>

#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace nht {

struct Dataset {
  Tensor inputs;                    // n x D
  std::vector<std::size_t> labels;  // in [0, num_classes)
  std::size_t num_classes = 0;
  std::string split;
  std::uint64_t seed = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return inputs.empty() ? 0 : inputs.cols(); }

  std::vector<std::size_t> indices_of(std::size_t cls) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == cls) out.push_back(i);
    return out;
  }

  Dataset subset(std::span<const std::size_t> rows) const {
    Dataset out{Tensor::matrix(rows.size(), dim()), {}, num_classes, split, seed};
    for (std::size_t i = 0; i < rows.size(); ++i) {
      auto src = inputs.row(rows[i]);
      std::copy(src.begin(), src.end(), out.inputs.row(i).begin());
      out.labels.push_back(labels[rows[i]]);
    }
    return out;
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

inline std::size_t grid_side(std::size_t dim) {
  const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(dim))));
  if (side * side != dim) throw std::invalid_argument("input dimension is not a perfect square");
  return side;
}

/// Synthetic task description. Class means depend only on `seed`; each split
/// draws its samples from an independent stream, so train/test/attacker sets
/// of the same task share their class patterns.
struct BlobSpec {
  std::size_t classes = 10;
  std::size_t dim = 64;
  std::size_t per_class = 500;
  double spread = 0.1;
  std::uint64_t seed = 7;
  bool image_mode = true;
};

/// Per-class mean patterns. Image mode renders a smooth pattern on the grid
/// (bilinear upsampling of a coarse 4x4 random field), values in [0.1, 0.9].
inline Tensor class_means(const BlobSpec& spec) {
  if (spec.classes < 2) throw std::invalid_argument("gen_blobs: need at least two classes");
  RandomSource rng = RandomSource(spec.seed).derive("blobs/means");
  Tensor means = Tensor::matrix(spec.classes, spec.dim);
  if (!spec.image_mode) {
    for (double& v : means.values()) v = rng.uniform(0.1, 0.9);
    return means;
  }
  const std::size_t side = grid_side(spec.dim);
  constexpr std::size_t coarse = 4;
  for (std::size_t c = 0; c < spec.classes; ++c) {
    double field[coarse][coarse];
    for (auto& row : field)
      for (double& v : row) v = rng.uniform(0.1, 0.9);
    for (std::size_t r = 0; r < side; ++r) {
      for (std::size_t q = 0; q < side; ++q) {
        const double fr = side == 1 ? 0.0 : static_cast<double>(r) * (coarse - 1) / static_cast<double>(side - 1);
        const double fq = side == 1 ? 0.0 : static_cast<double>(q) * (coarse - 1) / static_cast<double>(side - 1);
        const auto r0 = std::min<std::size_t>(static_cast<std::size_t>(fr), coarse - 2);
        const auto q0 = std::min<std::size_t>(static_cast<std::size_t>(fq), coarse - 2);
        const double ar = fr - static_cast<double>(r0);
        const double aq = fq - static_cast<double>(q0);
        const double top = (1 - aq) * field[r0][q0] + aq * field[r0][q0 + 1];
        const double bot = (1 - aq) * field[r0 + 1][q0] + aq * field[r0 + 1][q0 + 1];
        means.at(c, r * side + q) = (1 - ar) * top + ar * bot;
      }
    }
  }
  return means;
}

/// In-distribution samples: class mean plus isotropic Gaussian jitter, clipped
/// to [0, 1]. Rows are ordered class-major and then shuffled.
inline Dataset gen_blobs(const BlobSpec& spec, const std::string& split) {
  if (spec.per_class < 1) throw std::invalid_argument("gen_blobs: per_class must be >= 1");
  const Tensor means = class_means(spec);
  RandomSource rng = RandomSource(spec.seed).derive("blobs/split/" + split);
  const std::size_t n = spec.classes * spec.per_class;
  Dataset out{Tensor::matrix(n, spec.dim), std::vector<std::size_t>(n), spec.classes, split, spec.seed};
  auto order = rng.permutation(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t cls = i / spec.per_class;
    const std::size_t row = order[i];
    out.labels[row] = cls;
    auto dst = out.inputs.row(row);
    auto mu = means.row(cls);
    for (std::size_t d = 0; d < spec.dim; ++d) {
      const double v = spec.spread > 0.0 ? mu[d] + spec.spread * rng.normal() : mu[d];
      dst[d] = std::min(1.0, std::max(0.0, v));
    }
  }
  return out;
}

/// Out-of-distribution attacker pool. Each sample blends two class patterns
/// through a soft spatial boundary (random orientation and offset) and adds
/// a global brightness shift plus jitter. `blend_fraction` of samples use two
/// distinct classes; the rest use one class with a shifted mean. The label
/// recorded is the class owning the larger share of the blend.
struct AttackerPoolSpec {
  std::size_t size = 5000;
  double shift = 0.15;
  double blend_fraction = 0.5;
  double spread = 0.1;
};

inline Dataset gen_attacker_pool(const BlobSpec& task, const AttackerPoolSpec& pool, const std::string& split) {
  const Tensor means = class_means(task);
  RandomSource rng = RandomSource(task.seed).derive("attacker/" + split);
  const std::size_t D = task.dim;
  Dataset out{Tensor::matrix(pool.size, D), std::vector<std::size_t>(pool.size), task.classes, split, task.seed};
  const bool spatial = task.image_mode;
  const std::size_t side = spatial ? grid_side(D) : 0;
  for (std::size_t i = 0; i < pool.size; ++i) {
    const std::size_t a = rng.below(task.classes);
    std::size_t b = a;
    if (rng.uniform() < pool.blend_fraction) {
      b = rng.below(task.classes - 1);
      if (b >= a) ++b;
    }
    const double theta = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
    const double offset = rng.uniform(-0.25, 0.25);
    const double bright = rng.uniform(-pool.shift, pool.shift);
    auto dst = out.inputs.row(i);
    double share_a = 0.0;
    for (std::size_t d = 0; d < D; ++d) {
      double w = 0.5;
      if (spatial) {
        const double y = (static_cast<double>(d / side) + 0.5) / static_cast<double>(side) - 0.5;
        const double x = (static_cast<double>(d % side) + 0.5) / static_cast<double>(side) - 0.5;
        const double proj = std::cos(theta) * x + std::sin(theta) * y - offset;
        w = 1.0 / (1.0 + std::exp(-proj / 0.05));
      }
      share_a += w;
      const double mu = w * means.at(a, d) + (1.0 - w) * means.at(b, d) + bright;
      const double v = pool.spread > 0.0 ? mu + pool.spread * rng.normal() : mu;
      dst[d] = std::min(1.0, std::max(0.0, v));
    }
    out.labels[i] = share_a >= 0.5 * static_cast<double>(D) ? a : b;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Composite watermarks
// ---------------------------------------------------------------------------

struct WatermarkSet {
  Tensor triggers;  // n x D
  Tensor mask;      // D, entries in {0, 1}
  std::size_t source_k = 0;
  std::size_t source_j = 0;
  std::size_t target = 0;

  std::size_t count() const { return triggers.empty() ? 0 : triggers.rows(); }
  std::size_t dim() const { return mask.size(); }

  friend bool operator==(const WatermarkSet&, const WatermarkSet&) = default;
};

/// 1 on the left half of a side x side grid.
inline Tensor left_half_mask(std::size_t dim) {
  const std::size_t side = grid_side(dim);
  Tensor m({dim});
  for (std::size_t r = 0; r < side; ++r)
    for (std::size_t c = 0; c < side / 2; ++c) m[r * side + c] = 1.0;
  return m;
}

inline void check_binary_mask(const Tensor& mask) {
  for (double v : mask.values())
    if (v != 0.0 && v != 1.0) throw std::invalid_argument("mask must be binary");
}

/// W_i = X_i^k * M + X_i^j * (1 - M), with the X drawn without replacement
/// while the class has enough samples.
inline WatermarkSet gen_composite_watermarks(const Dataset& data, std::size_t k, std::size_t j, std::size_t target,
                                             const Tensor& mask, std::size_t count, std::uint64_t seed) {
  if (mask.size() != data.dim()) throw std::invalid_argument("gen_composite_watermarks: mask dimension mismatch");
  check_binary_mask(mask);
  if (count == 0) throw std::invalid_argument("gen_composite_watermarks: count must be positive");
  auto pool_k = data.indices_of(k);
  auto pool_j = data.indices_of(j);
  if (pool_k.empty() || pool_j.empty()) throw std::invalid_argument("gen_composite_watermarks: source class has no samples");
  RandomSource rng = RandomSource(seed).derive("watermarks");
  rng.shuffle(pool_k);
  rng.shuffle(pool_j);
  const std::size_t D = data.dim();
  WatermarkSet wm{Tensor::matrix(count, D), mask, k, j, target};
  for (std::size_t i = 0; i < count; ++i) {
    auto xk = data.inputs.row(pool_k[i % pool_k.size()]);
    auto xj = data.inputs.row(pool_j[i % pool_j.size()]);
    auto w = wm.triggers.row(i);
    for (std::size_t d = 0; d < D; ++d) w[d] = mask[d] == 1.0 ? xk[d] : xj[d];
  }
  return wm;
}

/// Moves the masked coordinates of x toward trigger `index` by `strength`.
inline std::vector<double> apply_trigger(std::span<const double> x, const WatermarkSet& wm, std::size_t index,
                                         double strength) {
  if (!(strength >= 0.0 && strength <= 1.0)) throw std::invalid_argument("apply_trigger: strength must be in [0, 1]");
  if (x.size() != wm.dim()) throw std::invalid_argument("apply_trigger: dimension mismatch");
  auto w = wm.triggers.row(index % wm.count());
  std::vector<double> out(x.begin(), x.end());
  for (std::size_t d = 0; d < out.size(); ++d) {
    if (wm.mask[d] == 1.0) out[d] = (1.0 - strength) * x[d] + strength * w[d];
  }
  return out;
}

inline std::vector<double> apply_trigger(std::span<const double> x, const WatermarkSet& wm, double strength,
                                         RandomSource& rng) {
  return apply_trigger(x, wm, rng.below(wm.count()), strength);
}

/// Counterclockwise quarter turns of a square grid, with row 0 taken as the
/// bottom row: [a b; c d] (rows 0, 1) becomes [c a; d b].
inline std::vector<double> rotate90(std::span<const double> x, int quarter_turns) {
  const std::size_t n = grid_side(x.size());
  std::vector<double> cur(x.begin(), x.end());
  std::vector<double> next(x.size());
  const int turns = ((quarter_turns % 4) + 4) % 4;
  for (int t = 0; t < turns; ++t) {
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < n; ++c) next[r * n + c] = cur[(n - 1 - c) * n + r];
    cur.swap(next);
  }
  return cur;
}

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

inline void write_dataset(std::ostream& os, const Dataset& ds) {
  os.write("NHTD", 4);
  io::put<std::uint32_t>(os, 1);
  io::put<std::uint32_t>(os, static_cast<std::uint32_t>(ds.num_classes));
  io::put_string(os, ds.split);
  io::put<std::uint64_t>(os, ds.seed);
  io::write_tensor(os, ds.inputs);
  io::put<std::uint64_t>(os, ds.labels.size());
  for (std::size_t y : ds.labels) io::put<std::uint32_t>(os, static_cast<std::uint32_t>(y));
  if (!os) throw std::runtime_error("write_dataset: stream failure");
}

inline Dataset read_dataset(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string_view(magic, 4) != "NHTD") throw std::runtime_error("read_dataset: bad magic");
  if (io::get<std::uint32_t>(is) != 1) throw std::runtime_error("read_dataset: unsupported version");
  Dataset ds;
  ds.num_classes = io::get<std::uint32_t>(is);
  ds.split = io::get_string(is);
  ds.seed = io::get<std::uint64_t>(is);
  ds.inputs = io::read_tensor(is);
  const auto n = io::get<std::uint64_t>(is);
  if (ds.inputs.rank() != 2 || n != ds.inputs.rows()) throw std::runtime_error("read_dataset: label count mismatch");
  ds.labels.resize(n);
  for (auto& y : ds.labels) {
    y = io::get<std::uint32_t>(is);
    if (y >= ds.num_classes) throw std::runtime_error("read_dataset: label out of range");
  }
  return ds;
}

inline void write_watermarks(std::ostream& os, const WatermarkSet& wm) {
  os.write("NHTW", 4);
  io::put<std::uint32_t>(os, 1);
  io::put<std::uint64_t>(os, wm.count());
  io::put<std::uint64_t>(os, wm.dim());
  io::put<std::uint32_t>(os, static_cast<std::uint32_t>(wm.source_k));
  io::put<std::uint32_t>(os, static_cast<std::uint32_t>(wm.source_j));
  io::put<std::uint32_t>(os, static_cast<std::uint32_t>(wm.target));
  io::write_tensor(os, wm.mask);
  io::write_tensor(os, wm.triggers);
  if (!os) throw std::runtime_error("write_watermarks: stream failure");
}

inline WatermarkSet read_watermarks(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string_view(magic, 4) != "NHTW") throw std::runtime_error("read_watermarks: bad magic");
  if (io::get<std::uint32_t>(is) != 1) throw std::runtime_error("read_watermarks: unsupported version");
  const auto n = io::get<std::uint64_t>(is);
  const auto d = io::get<std::uint64_t>(is);
  WatermarkSet wm;
  wm.source_k = io::get<std::uint32_t>(is);
  wm.source_j = io::get<std::uint32_t>(is);
  wm.target = io::get<std::uint32_t>(is);
  wm.mask = io::read_tensor(is);
  wm.triggers = io::read_tensor(is);
  if (wm.mask.size() != d || wm.triggers.rank() != 2 || wm.triggers.rows() != n || wm.triggers.cols() != d) {
    throw std::runtime_error("read_watermarks: header does not match payload");
  }
  check_binary_mask(wm.mask);
  return wm;
}

}  // namespace nht
