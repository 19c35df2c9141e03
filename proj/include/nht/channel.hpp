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
#include <map>
#include <sstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace nht::channel {

// All entropies and capacities are in bits.

inline double discrete_entropy(std::span<const double> dist) {
  if (dist.empty()) throw std::invalid_argument("discrete_entropy: empty distribution");
  double total = 0.0;
  for (double p : dist) {
    if (!(p >= 0.0)) throw std::invalid_argument("discrete_entropy: negative probability");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("discrete_entropy: distribution not normalised");
  double h = 0.0;
  for (double p : dist)
    if (p > 0.0) h -= p * std::log2(p);
  return h;
}

/// Entropy of N(0, sigma^2) quantised to bins of width `precision`, summed
/// bin by bin over +-8 sigma. Bins are centred on multiples of the precision.
inline double quantized_gaussian_entropy(double sigma, double precision) {
  if (!(sigma > 0.0) || !(precision > 0.0)) throw std::invalid_argument("quantized_gaussian_entropy: inputs must be > 0");
  const auto half_bins = static_cast<std::int64_t>(std::ceil(8.0 * sigma / precision));
  if (half_bins > 50'000'000) throw std::invalid_argument("quantized_gaussian_entropy: too many bins");
  double h = 0.0;
  for (std::int64_t i = -half_bins; i <= half_bins; ++i) {
    const double lo = (static_cast<double>(i) - 0.5) * precision / sigma;
    const double hi = (static_cast<double>(i) + 0.5) * precision / sigma;
    // Difference of survival functions in the upper half keeps tail bins accurate.
    const double p = lo >= 0.0 ? normal_sf(lo) - normal_sf(hi) : normal_cdf(hi) - normal_cdf(lo);
    if (p > 0.0) h -= p * std::log2(p);
  }
  return h;
}

/// Differential-entropy approximation 1/2 log2(2 pi e sigma^2) + log2(1/precision).
inline double gaussian_entropy_approx(double sigma, double precision) {
  constexpr double two_pi_e = 17.079468445347132;
  return 0.5 * std::log2(two_pi_e * sigma * sigma) + std::log2(1.0 / precision);
}

inline double hard_label_capacity(std::size_t num_classes) {
  if (num_classes < 2) throw std::invalid_argument("hard_label_capacity: need at least two classes");
  return std::log2(static_cast<double>(num_classes));
}

/// Histogram over probability vectors quantised to a fixed precision.
class OutputHistogram {
 public:
  explicit OutputHistogram(double precision = 0.01) : precision_(precision) {
    if (!(precision > 0.0)) throw std::invalid_argument("OutputHistogram: precision must be > 0");
  }

  void add(std::span<const double> probs) {
    std::vector<std::int64_t> key(probs.size());
    for (std::size_t i = 0; i < probs.size(); ++i) key[i] = std::llround(probs[i] / precision_);
    ++counts_[key];
    ++total_;
  }

  std::size_t total() const { return total_; }
  std::size_t distinct() const { return counts_.size(); }
  double precision() const { return precision_; }

  std::vector<double> distribution() const {
    std::vector<double> p;
    p.reserve(counts_.size());
    for (const auto& [key, c] : counts_) p.push_back(static_cast<double>(c) / static_cast<double>(total_));
    return p;
  }

 private:
  double precision_;
  std::map<std::vector<std::int64_t>, std::size_t> counts_;
  std::size_t total_ = 0;
};

/// Noiseless output channel: C = H(O) over the quantised output histogram.
inline double soft_label_capacity(const OutputHistogram& hist) {
  if (hist.total() == 0) throw std::invalid_argument("soft_label_capacity: empty histogram");
  double h = 0.0;
  for (double p : hist.distribution()) h -= p * std::log2(p);
  return h;
}

inline double binary_entropy(double e) {
  if (!(e >= 0.0 && e <= 1.0)) throw std::invalid_argument("binary_entropy: e must be in [0, 1]");
  if (e == 0.0 || e == 1.0) return 0.0;
  return -(e * std::log2(e) + (1.0 - e) * std::log2(1.0 - e));
}

/// R(e) = C / (1 - Q(e)). Unbounded at e = 0.5.
inline double rate_under_error(double capacity, double e) {
  if (!(capacity >= 0.0)) throw std::invalid_argument("rate_under_error: capacity must be >= 0");
  if (!(e >= 0.0 && e <= 0.5)) throw std::invalid_argument("rate_under_error: e must be in [0, 0.5)");
  const double q = binary_entropy(e);
  if (q >= 1.0) throw std::domain_error("rate_under_error: unbounded rate at e = 0.5");
  return capacity / (1.0 - q);
}

struct AwgnResult {
  double snr;
  double capacity;
};

/// snr = (mu_s^2 + sigma_s^2) / (mu_n^2 + sigma_n^2); C = B log2(1 + snr).
inline AwgnResult awgn_capacity(double bandwidth, double mu_s, double sigma_s, double mu_n, double sigma_n) {
  const double noise = mu_n * mu_n + sigma_n * sigma_n;
  if (!(noise > 0.0)) throw std::domain_error("awgn_capacity: zero noise power (infinite capacity)");
  const double snr = (mu_s * mu_s + sigma_s * sigma_s) / noise;
  return {snr, bandwidth * std::log2(1.0 + snr)};
}

struct MultiStep {
  double capacity;
  double noise_variance;
};

/// Aggregating N transmissions: C* = N C, sigma*^2 = sigma^2 / N.
inline MultiStep multi_step_aggregate(double capacity, double sigma_n, std::size_t count) {
  if (count == 0) throw std::invalid_argument("multi_step_aggregate: N must be >= 1");
  const double n = static_cast<double>(count);
  return {n * capacity, sigma_n * sigma_n / n};
}

inline bool feasible(double source_entropy, double capacity) { return capacity >= source_entropy; }

struct ChannelReport {
  double source_entropy_bits = 0.0;
  double label_entropy_bits = 0.0;
  double capacity_bits = 0.0;
  double error_rate = 0.0;
  double binary_entropy = 0.0;
  double max_rate_at_error = 0.0;
  double snr = 0.0;
  double awgn_capacity_bits = 0.0;
  std::size_t aggregation_count = 1;
  double effective_capacity_bits = 0.0;
  double effective_noise_variance = 0.0;
  double precision = 0.01;
  bool feasible_single = false;
  bool feasible_multi = false;

  std::vector<std::pair<std::string, double>> fields() const {
    return {{"source_entropy_bits", source_entropy_bits},
            {"label_entropy_bits", label_entropy_bits},
            {"capacity_bits", capacity_bits},
            {"error_rate", error_rate},
            {"binary_entropy", binary_entropy},
            {"max_rate_at_error", max_rate_at_error},
            {"snr", snr},
            {"awgn_capacity_bits", awgn_capacity_bits},
            {"aggregation_count", static_cast<double>(aggregation_count)},
            {"effective_capacity_bits", effective_capacity_bits},
            {"effective_noise_variance", effective_noise_variance},
            {"precision", precision},
            {"feasible_single", feasible_single ? 1.0 : 0.0},
            {"feasible_multi", feasible_multi ? 1.0 : 0.0}};
  }

  /// key = value lines.
  std::string to_text() const {
    std::ostringstream os;
    os.precision(17);
    for (const auto& [k, v] : fields()) os << k << " = " << v << '\n';
    return os.str();
  }
};

struct ChannelInputs {
  double similarity_sigma = 0.0763;
  double precision = 0.01;
  std::size_t num_classes = 10;
  double capacity_bits = 0.0;  // 0: use the hard-label capacity
  double error_rate = 0.0;
  double bandwidth = 1.0;
  double signal_mean = 0.0;
  double signal_sigma = 1.0;
  double noise_mean = 0.0;
  double noise_sigma = 1.0;
  std::size_t aggregation_count = 1;
};

inline ChannelReport make_report(const ChannelInputs& in) {
  ChannelReport r;
  r.precision = in.precision;
  r.source_entropy_bits = quantized_gaussian_entropy(in.similarity_sigma, in.precision);
  r.label_entropy_bits = hard_label_capacity(in.num_classes);
  r.capacity_bits = in.capacity_bits > 0.0 ? in.capacity_bits : hard_label_capacity(in.num_classes);
  r.error_rate = in.error_rate;
  r.binary_entropy = binary_entropy(in.error_rate);
  r.max_rate_at_error = rate_under_error(r.capacity_bits, in.error_rate);
  const auto awgn = awgn_capacity(in.bandwidth, in.signal_mean, in.signal_sigma, in.noise_mean, in.noise_sigma);
  r.snr = awgn.snr;
  r.awgn_capacity_bits = awgn.capacity;
  const auto ms = multi_step_aggregate(r.capacity_bits, in.noise_sigma, in.aggregation_count);
  r.aggregation_count = in.aggregation_count;
  r.effective_capacity_bits = ms.capacity;
  r.effective_noise_variance = ms.noise_variance;
  r.feasible_single = feasible(r.source_entropy_bits, r.capacity_bits);
  r.feasible_multi = feasible(r.source_entropy_bits, r.effective_capacity_bits);
  return r;
}

}  // namespace nht::channel
