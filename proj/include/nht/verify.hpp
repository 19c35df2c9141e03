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

#include <nht/datagen.hpp>
#include <nht/nn.hpp>
#include <nht/numerics.hpp>

#include <cmath>
#include <cstdint>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace nht::verify {

/// Queries needed for an ownership claim at two-sided level alpha and power
/// 1 - beta: N = 2 (z_{alpha/2} + z_beta)^2 / effect^2, rounded to the
/// nearest integer (this reproduces 7,730 at alpha=1e-4, beta=0.01, 0.1).
inline std::size_t required_sample_size(double alpha, double beta, double effect_size) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("required_sample_size: alpha must be in (0, 1)");
  if (!(beta > 0.0 && beta < 1.0)) throw std::invalid_argument("required_sample_size: beta must be in (0, 1)");
  if (effect_size == 0.0) throw std::invalid_argument("required_sample_size: zero effect size is unclaimable");
  if (!(effect_size > 0.0 && effect_size <= 1.0)) {
    throw std::invalid_argument("required_sample_size: effect size must be in (0, 1]");
  }
  const double z = z_quantile(alpha / 2.0) + z_quantile(beta);
  const double n = 2.0 * z * z / (effect_size * effect_size);
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(n)));
}

/// P(X >= k) for X ~ Binomial(n, p), summed in log space.
inline double binomial_upper_tail(std::size_t k, std::size_t n, double p) {
  if (k > n) return 0.0;
  if (k == 0) return 1.0;
  if (p <= 0.0) return 0.0;
  if (p >= 1.0) return 1.0;
  const double lp = std::log(p);
  const double lq = std::log1p(-p);
  const double nn = static_cast<double>(n);
  auto log_term = [&](std::size_t i) {
    const double ii = static_cast<double>(i);
    return std::lgamma(nn + 1) - std::lgamma(ii + 1) - std::lgamma(nn - ii + 1) + ii * lp + (nn - ii) * lq;
  };
  // Largest term is at max(k, mode); sum relative to it.
  const auto mode = static_cast<std::size_t>(std::floor((nn + 1) * p));
  const std::size_t peak = std::max(k, std::min(mode, n));
  const double ref = log_term(peak);
  double sum = 0.0;
  for (std::size_t i = k; i <= n; ++i) {
    const double t = std::exp(log_term(i) - ref);
    sum += t;
    if (i > peak && t < 1e-18 * sum) break;
  }
  return std::min(1.0, std::exp(ref + std::log(sum)));
}

struct ClaimResult {
  std::size_t queries = 0;
  std::size_t successes = 0;
  double wsr = 0.0;
  double baseline = 0.0;
  double p_exact = 1.0;
  double p_normal = 1.0;
  double alpha = 1e-4;
  bool claim = false;

  std::string to_json() const {
    std::ostringstream os;
    os.precision(17);
    os << "{\"n\": " << queries << ", \"k\": " << successes << ", \"wsr\": " << wsr << ", \"p0\": " << baseline
       << ", \"p_exact\": " << p_exact << ", \"p_normal\": " << p_normal << ", \"alpha\": " << alpha
       << ", \"verdict\": \"" << (claim ? "claim" : "no-claim") << "\"}";
    return os.str();
  }

  std::string summary() const {
    std::ostringstream os;
    os << (claim ? "OWNERSHIP CLAIMED" : "no claim") << ": " << successes << "/" << queries
       << " watermark hits (WSR " << wsr << ") vs baseline " << baseline << ", exact p = " << p_exact
       << ", normal p = " << p_normal << ", alpha = " << alpha;
    return os.str();
  }
};

/// One-sided test of H0: success rate <= p0. The verdict uses the exact
/// binomial tail; the normal-approximation z-test is reported alongside.
inline ClaimResult ownership_claim(std::size_t successes, std::size_t queries, double baseline, double alpha) {
  if (queries == 0) throw std::invalid_argument("ownership_claim: no queries");
  if (successes > queries) throw std::invalid_argument("ownership_claim: successes exceed queries");
  if (!(baseline >= 0.0 && baseline < 1.0)) throw std::invalid_argument("ownership_claim: baseline must be in [0, 1)");
  ClaimResult r;
  r.queries = queries;
  r.successes = successes;
  r.wsr = static_cast<double>(successes) / static_cast<double>(queries);
  r.baseline = baseline;
  r.alpha = alpha;
  r.p_exact = binomial_upper_tail(successes, queries, baseline);
  if (baseline == 0.0) {
    r.p_normal = successes > 0 ? 0.0 : 1.0;
  } else {
    // Continuity-corrected z statistic.
    const double n = static_cast<double>(queries);
    const double se = std::sqrt(n * baseline * (1.0 - baseline));
    r.p_normal = successes == 0 ? 1.0 : normal_sf((static_cast<double>(successes) - 0.5 - n * baseline) / se);
  }
  r.claim = r.p_exact < alpha;
  return r;
}

/// Required queries over a grid of watermark success rates.
inline std::vector<std::pair<double, std::size_t>> claim_curve(double alpha, double beta, std::span<const double> wsr_grid) {
  std::vector<std::pair<double, std::size_t>> out;
  out.reserve(wsr_grid.size());
  for (double w : wsr_grid) out.emplace_back(w, required_sample_size(alpha, beta, w));
  return out;
}

inline void write_claim_curve_csv(std::ostream& os, const std::vector<std::pair<double, std::size_t>>& curve) {
  os << "wsr,required_queries\n";
  for (const auto& [w, n] : curve) os << w << ',' << n << '\n';
}

// ---------------------------------------------------------------------------
// Watermark success rate
// ---------------------------------------------------------------------------

/// Trigger probes: held-out rows of the watermark's unmasked source class
/// with trigger content written onto the masked region.
inline Tensor build_probes(const WatermarkSet& wm, const Dataset& held_out, std::size_t n_probes, std::uint64_t seed) {
  if (n_probes == 0) throw std::invalid_argument("build_probes: n_probes must be >= 1");
  auto pool = held_out.indices_of(wm.source_j);
  if (pool.empty()) throw std::invalid_argument("build_probes: held-out data lacks the source class");
  RandomSource rng = RandomSource(seed).derive("probes");
  rng.shuffle(pool);
  Tensor probes = Tensor::matrix(n_probes, wm.dim());
  for (std::size_t i = 0; i < n_probes; ++i) {
    auto x = held_out.inputs.row(pool[i % pool.size()]);
    auto p = apply_trigger(x, wm, rng.below(wm.count()), 1.0);
    std::copy(p.begin(), p.end(), probes.row(i).begin());
  }
  return probes;
}

struct WsrCount {
  std::size_t successes = 0;
  std::size_t probes = 0;
  double rate() const { return probes ? static_cast<double>(successes) / static_cast<double>(probes) : 0.0; }
};

/// A probe succeeds when the suspicious model says `target` and the
/// unprotected reference does not.
inline WsrCount count_wsr(const Mlp& suspicious, const Mlp& reference, const Tensor& probes, std::size_t target) {
  WsrCount c;
  c.probes = probes.rows();
  const auto sus = predict_labels(suspicious, probes);
  const auto ref = predict_labels(reference, probes);
  for (std::size_t i = 0; i < c.probes; ++i) c.successes += sus[i] == target && ref[i] != target;
  return c;
}

inline double measure_wsr(const Mlp& suspicious, const Mlp& reference, const Tensor& probes, std::size_t target) {
  return count_wsr(suspicious, reference, probes, target).rate();
}

/// Per-probe targets (DAWN-style records, where each probe has its own label).
inline WsrCount count_wsr(const Mlp& suspicious, const Mlp& reference, const Tensor& probes,
                          std::span<const std::size_t> targets) {
  if (targets.size() != probes.rows()) throw std::invalid_argument("count_wsr: target count mismatch");
  WsrCount c;
  c.probes = probes.rows();
  const auto sus = predict_labels(suspicious, probes);
  const auto ref = predict_labels(reference, probes);
  for (std::size_t i = 0; i < c.probes; ++i) c.successes += sus[i] == targets[i] && ref[i] != targets[i];
  return c;
}

}  // namespace nht::verify
