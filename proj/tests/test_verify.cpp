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
#include <nht/verify.hpp>

#include "test_support.hpp"

#include <boost/math/special_functions/beta.hpp>
#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

using namespace nht;
using namespace nht::verify;

namespace {

// P(X >= k) = I_p(k, n - k + 1).
double boost_upper_tail(std::size_t k, std::size_t n, double p) {
  if (k == 0) return 1.0;
  return boost::math::ibeta(static_cast<double>(k), static_cast<double>(n - k + 1), p);
}

std::size_t draw_binomial(std::size_t n, double p, RandomSource& rng) {
  std::size_t k = 0;
  for (std::size_t i = 0; i < n; ++i) k += rng.bernoulli(p);
  return k;
}

Mlp constant_model(std::size_t cls) {
  Mlp m({64, 4, 10});
  m.layers()[1].bias[cls] = 5.0;
  return m;
}

}  // namespace

TEST(SampleSize, KnownAnchors) {
  EXPECT_EQ(required_sample_size(1e-4, 0.01, 0.1), 7730u);
  EXPECT_NEAR(static_cast<double>(required_sample_size(1e-4, 0.01, 0.204)), 1857.0, 1.0);
  EXPECT_NEAR(static_cast<double>(required_sample_size(1e-4, 0.01, 0.02)), 193252.0, 100.0);
}

TEST(SampleSize, MonotoneInEveryArgument) {
  std::size_t prev = SIZE_MAX;
  for (double d = 0.01; d <= 1.0; d += 0.01) {
    const auto n = required_sample_size(1e-4, 0.01, d);
    EXPECT_LE(n, prev) << d;
    prev = n;
  }
  EXPECT_GT(required_sample_size(1e-5, 0.01, 0.1), required_sample_size(1e-4, 0.01, 0.1));
  EXPECT_GT(required_sample_size(1e-4, 0.001, 0.1), required_sample_size(1e-4, 0.01, 0.1));
  EXPECT_GT(required_sample_size(1e-4, 0.01, 0.05), required_sample_size(1e-4, 0.01, 0.06));
}

TEST(SampleSize, Errors) {
  EXPECT_THROW(required_sample_size(1e-4, 0.01, 0.0), std::invalid_argument);
  EXPECT_THROW(required_sample_size(0.0, 0.01, 0.1), std::invalid_argument);
  EXPECT_THROW(required_sample_size(1e-4, 1.0, 0.1), std::invalid_argument);
  EXPECT_THROW(required_sample_size(1e-4, 0.01, 1.5), std::invalid_argument);
}

TEST(BinomialTail, MatchesIncompleteBeta) {
  for (std::size_t n : {1u, 10u, 100u, 1000u, 7730u})
    for (double p : {0.001, 0.05, 0.1, 0.5, 0.9})
      for (double frac : {0.0, 0.05, 0.1, 0.2, 0.5, 1.0}) {
        const auto k = static_cast<std::size_t>(frac * n);
        const double want = boost_upper_tail(k, n, p);
        const double got = binomial_upper_tail(k, n, p);
        if (want > 1e-300) {
          EXPECT_NEAR(got / want, 1.0, 1e-9) << n << ' ' << p << ' ' << k;
        } else {
          EXPECT_LT(got, 1e-290);
        }
      }
  EXPECT_EQ(binomial_upper_tail(11, 10, 0.5), 0.0);
}

TEST(Claim, AllHitsAtTenPercentBaseline) {
  const auto r = ownership_claim(10, 10, 0.1, 1e-4);
  EXPECT_NEAR(r.p_exact, 1e-10, 1e-20);
  EXPECT_TRUE(r.claim);
  EXPECT_EQ(r.wsr, 1.0);
}

TEST(Claim, RateAtBaselineIsNoClaim) {
  for (std::size_t n : {100u, 1000u, 10000u}) {
    const auto r = ownership_claim(n / 10, n, 0.1, 1e-4);
    EXPECT_GE(r.p_exact, 0.5);
    EXPECT_GE(r.p_normal, 0.5);
    EXPECT_FALSE(r.claim);
  }
}

TEST(Claim, Errors) {
  EXPECT_THROW(ownership_claim(0, 0, 0.1, 1e-4), std::invalid_argument);
  EXPECT_THROW(ownership_claim(5, 4, 0.1, 1e-4), std::invalid_argument);
  EXPECT_THROW(ownership_claim(1, 4, 1.0, 1e-4), std::invalid_argument);
}

TEST(Claim, NormalApproximationTracksExact) {
  for (std::size_t n : {500u, 1000u, 5000u})
    for (double p0 : {0.05, 0.1, 0.3})
      for (double z : {0.0, 0.5, 1.0, 1.5}) {
        const double sd = std::sqrt(n * p0 * (1 - p0));
        const auto k = static_cast<std::size_t>(std::llround(n * p0 + z * sd));
        const auto r = ownership_claim(k, n, p0, 1e-4);
        EXPECT_NEAR(r.p_normal / r.p_exact, 1.0, 0.10) << "n " << n << " p0 " << p0 << " k " << k;
      }
}

// Skew at small p0 pushes the deep tail outside the band.
TEST(Claim, NormalApproximationUnderstatesSkewedTail) {
  const auto r = ownership_claim(35, 500, 0.05, 1e-4);
  EXPECT_LT(r.p_normal, 0.9 * r.p_exact);
}

TEST(Claim, PowerAtZeroBaseline) {
  RandomSource rng(31);
  const std::size_t n = required_sample_size(1e-4, 0.01, 0.1);
  int hits = 0;
  for (int w = 0; w < 1000; ++w) hits += ownership_claim(draw_binomial(n, 0.1, rng), n, 0.0, 1e-4).claim;
  EXPECT_GE(hits, 990);
}

TEST(Claim, PowerMatchesPlanningFormula) {
  RandomSource rng(32);
  const double p0 = 0.1, d = 0.1, beta = 0.01;
  const std::size_t n = required_sample_size(1e-4, beta, d);
  int hits = 0;
  const int sims = 2000;
  for (int s = 0; s < sims; ++s) hits += ownership_claim(draw_binomial(n, p0 + d, rng), n, p0, 1e-4).claim;
  EXPECT_GE(hits / static_cast<double>(sims), 1.0 - beta - 0.02);
}

TEST(Claim, JsonCarriesVerdict) {
  const auto r = ownership_claim(10, 10, 0.1, 1e-4);
  EXPECT_NE(r.to_json().find("\"verdict\": \"claim\""), std::string::npos);
  EXPECT_NE(ownership_claim(0, 10, 0.1, 1e-4).to_json().find("no-claim"), std::string::npos);
}

TEST(ClaimCurve, Examples) {
  const std::vector<double> g1{0.1}, g2{1.0};
  EXPECT_EQ(claim_curve(1e-4, 0.01, g1).front().second, 7730u);
  // 2 (3.8906 + 2.3263)^2 = 77.30, rounded to nearest.
  EXPECT_EQ(claim_curve(1e-4, 0.01, g2).front().second, 77u);
}

TEST(ClaimCurve, InverseSquareAndDecreasing) {
  std::vector<double> grid;
  for (double w = 0.02; w <= 1.0; w += 0.02) grid.push_back(w);
  const auto c = claim_curve(1e-4, 0.01, grid);
  for (std::size_t i = 1; i < c.size(); ++i) EXPECT_LT(c[i].second, c[i - 1].second);
  for (double d : {0.02, 0.05, 0.1, 0.2}) {
    const double a = static_cast<double>(required_sample_size(1e-4, 0.01, d));
    const double b = static_cast<double>(required_sample_size(1e-4, 0.01, 2 * d));
    EXPECT_NEAR(a / b, 4.0, 4.0 * 1.0 / b);
  }
  std::ostringstream os;
  write_claim_curve_csv(os, claim_curve(1e-4, 0.01, std::vector<double>{0.1}));
  EXPECT_EQ(os.str(), "wsr,required_queries\n0.1,7730\n");
}

TEST(Wsr, SameModelIsZero) {
  const auto& T = nht::testing::small_task();
  const Tensor probes = build_probes(T.wm, T.test, 200, 3);
  EXPECT_EQ(measure_wsr(*T.victim, *T.victim, probes, T.wm.target), 0.0);
}

TEST(Wsr, ConstantTargetModelIsOne) {
  const auto& T = nht::testing::small_task();
  const Tensor probes = build_probes(T.wm, T.test, 200, 3);
  EXPECT_EQ(measure_wsr(constant_model(T.wm.target), constant_model(5), probes, T.wm.target), 1.0);
  const std::vector<std::size_t> targets(200, T.wm.target);
  EXPECT_EQ(count_wsr(constant_model(T.wm.target), constant_model(5), probes, targets).successes, 200u);
}

TEST(Probes, BuiltFromSourceClassWithTrigger) {
  const auto& T = nht::testing::small_task();
  const Tensor probes = build_probes(T.wm, T.test, 50, 3);
  EXPECT_EQ(probes.rows(), 50u);
  EXPECT_EQ(build_probes(T.wm, T.test, 50, 3), probes);
  const auto pool = T.test.indices_of(T.wm.source_j);
  for (std::size_t i = 0; i < probes.rows(); ++i) {
    bool masked_from_trigger = false, rest_from_source = false;
    for (std::size_t w = 0; w < T.wm.count() && !masked_from_trigger; ++w) {
      bool all = true;
      for (std::size_t k = 0; k < 64; ++k)
        if (T.wm.mask[k] == 1.0) all &= probes.at(i, k) == T.wm.triggers.at(w, k);
      masked_from_trigger = all;
    }
    for (std::size_t r : pool) {
      bool all = true;
      for (std::size_t k = 0; k < 64; ++k)
        if (T.wm.mask[k] == 0.0) all &= probes.at(i, k) == T.test.inputs.at(r, k);
      if (all) rest_from_source = true;
    }
    EXPECT_TRUE(masked_from_trigger) << i;
    EXPECT_TRUE(rest_from_source) << i;
  }
  EXPECT_THROW(build_probes(T.wm, T.test, 0, 3), std::invalid_argument);
}
