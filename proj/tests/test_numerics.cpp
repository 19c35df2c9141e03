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
#include <nht/numerics.hpp>

#include <boost/math/distributions/normal.hpp>
#include <boost/math/special_functions/erf.hpp>
#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>

using namespace nht;

namespace {

double boost_upper_quantile(double p) {
  boost::math::normal n;
  return boost::math::quantile(boost::math::complement(n, p));
}

}  // namespace

TEST(Softmax, SymmetricPair) {
  const std::vector<double> l{0.0, 0.0};
  auto p = softmax(l);
  EXPECT_DOUBLE_EQ(p[0], 0.5);
  EXPECT_DOUBLE_EQ(p[1], 0.5);
}

TEST(Softmax, LargeEqualLogitsDoNotOverflow) {
  const std::vector<double> l{1000.0, 1000.0};
  auto p = softmax(l);
  EXPECT_DOUBLE_EQ(p[0], 0.5);
  EXPECT_DOUBLE_EQ(p[1], 0.5);
}

TEST(Softmax, TwoZero) {
  const std::vector<double> l{2.0, 0.0};
  auto p = softmax(l);
  const double e2 = std::exp(2.0);
  EXPECT_NEAR(p[0], e2 / (e2 + 1.0), 1e-15);
  EXPECT_NEAR(p[0], 0.8808, 5e-5);
  EXPECT_NEAR(p[1], 0.1192, 5e-5);
}

TEST(Softmax, EmptyThrows) {
  std::vector<double> empty;
  EXPECT_THROW(softmax(empty), std::invalid_argument);
}

TEST(Softmax, SumsToOneOnRandomExtremeLogits) {
  RandomSource rng(99);
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t K = 1 + rng.below(20);
    std::vector<double> l(K);
    const double scale = trial % 3 == 0 ? 1e4 : (trial % 3 == 1 ? 10.0 : 1.0);
    for (double& v : l) v = rng.uniform(-scale, scale);
    auto p = softmax(l);
    double s = 0.0;
    for (double v : p) {
      ASSERT_GE(v, 0.0);
      s += v;
    }
    ASSERT_NEAR(s, 1.0, 1e-12) << "trial " << trial;
  }
}

TEST(Softmax, ShiftInvariant) {
  RandomSource rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> l(7), shifted(7);
    const double c = rng.uniform(-500.0, 500.0);
    for (std::size_t i = 0; i < l.size(); ++i) {
      l[i] = rng.uniform(-5.0, 5.0);
      shifted[i] = l[i] + c;
    }
    auto a = softmax(l);
    auto b = softmax(shifted);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
  }
}

TEST(NormalCdf, MatchesBoostErfc) {
  for (double z = -30.0; z <= 8.0; z += 0.137) {
    const double want = 0.5 * boost::math::erfc(-z / std::sqrt(2.0));
    const double got = normal_cdf(z);
    if (want > 1e-300) {
      EXPECT_NEAR(got / want, 1.0, 1e-12) << "z = " << z;
    }
    EXPECT_NEAR(normal_sf(z), 0.5 * boost::math::erfc(z / std::sqrt(2.0)), 1e-15 + 1e-12 * normal_sf(z));
  }
}

TEST(ZQuantile, Median) { EXPECT_DOUBLE_EQ(z_quantile(0.5), 0.0); }

TEST(ZQuantile, KnownCriticalValues) {
  EXPECT_NEAR(z_quantile(0.025), 1.959964, 5e-7);
  EXPECT_NEAR(z_quantile(0.00005), 3.890592, 5e-7);
  EXPECT_NEAR(z_quantile(0.025), boost_upper_quantile(0.025), 1e-10);
  EXPECT_NEAR(z_quantile(0.00005), boost_upper_quantile(0.00005), 1e-10);
}

TEST(ZQuantile, OutOfRangeThrows) {
  EXPECT_THROW(z_quantile(0.0), std::invalid_argument);
  EXPECT_THROW(z_quantile(1.0), std::invalid_argument);
  EXPECT_THROW(z_quantile(-0.1), std::invalid_argument);
  EXPECT_THROW(z_quantile(std::nan("")), std::invalid_argument);
}

TEST(ZQuantile, InverseOfCdfOverRange) {
  // Log-spaced in both tails plus a linear sweep through the middle.
  std::vector<double> ps;
  for (double e = -6.0; e <= -0.31; e += 0.05) {
    ps.push_back(std::pow(10.0, e));
    ps.push_back(1.0 - std::pow(10.0, e));
  }
  for (double p = 0.01; p < 1.0; p += 0.01) ps.push_back(p);
  for (double p : ps) {
    const double z = z_quantile(p);
    EXPECT_NEAR(normal_cdf(z), 1.0 - p, 1e-10) << "p = " << p;
    EXPECT_NEAR(z, boost_upper_quantile(p), 1e-8 * std::max(1.0, std::abs(z))) << "p = " << p;
  }
}

TEST(MeanVar, Examples) {
  const std::vector<double> a{5.0}, b{0.0, 2.0}, c{1.0, 1.0, 1.0, 1.0};
  EXPECT_EQ(mean_var(a).mean, 5.0);
  EXPECT_EQ(mean_var(a).variance, 0.0);
  EXPECT_EQ(mean_var(b).mean, 1.0);
  EXPECT_EQ(mean_var(b).variance, 1.0);
  EXPECT_EQ(mean_var(c).mean, 1.0);
  EXPECT_EQ(mean_var(c).variance, 0.0);
  std::vector<double> empty;
  EXPECT_THROW(mean_var(empty), std::invalid_argument);
}

TEST(MeanVar, PopulationConvention) {
  RandomSource rng(17);
  std::vector<double> xs(101);
  for (double& x : xs) x = rng.normal(3.0, 2.0);
  double m = 0.0;
  for (double x : xs) m += x;
  m /= 101.0;
  double v = 0.0;
  for (double x : xs) v += (x - m) * (x - m);
  v /= 101.0;
  EXPECT_NEAR(mean_var(xs).mean, m, 1e-13);
  EXPECT_NEAR(mean_var(xs).variance, v, 1e-12);
}

TEST(Clip01, Examples) {
  EXPECT_EQ(clip01(-0.3), 0.0);
  EXPECT_EQ(clip01(0.42), 0.42);
  EXPECT_EQ(clip01(7.0), 1.0);
  EXPECT_THROW(clip01(std::nan("")), std::invalid_argument);
}

TEST(Argmax, TiesGoToLowestIndex) {
  const std::vector<double> v{1.0, 3.0, 3.0, 2.0};
  EXPECT_EQ(argmax(v), 1u);
}

TEST(TensorShape, DataLengthMustMatch) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), std::invalid_argument);
  Tensor t({2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
  EXPECT_EQ(t.at(1, 2), 6.0);
  EXPECT_EQ(t.row(1)[0], 4.0);
}

TEST(TensorIo, ContainerLayout) {
  Tensor t({2, 2}, std::vector<double>{1.0, -2.0, 0.5, 8.0});
  std::ostringstream os;
  io::write_tensor(os, t);
  const std::string bytes = os.str();
  ASSERT_EQ(bytes.size(), 4u + 4u + 2 * 8u + 4 * 8u);
  EXPECT_EQ(bytes.substr(0, 4), "NHT1");
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 2u);  // rank, little endian
  EXPECT_EQ(bytes[5], 0);
  EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 2u);  // first dim
  double first;
  std::memcpy(&first, bytes.data() + 24, 8);
  EXPECT_EQ(first, 1.0);

  std::istringstream is(bytes);
  EXPECT_EQ(io::read_tensor(is), t);
}

TEST(TensorIo, RejectsBadMagicAndTruncation) {
  std::istringstream bad("XXXX");
  EXPECT_THROW(io::read_tensor(bad), std::runtime_error);
  std::ostringstream os;
  io::write_tensor(os, Tensor({3}, std::vector<double>{1, 2, 3}));
  std::string s = os.str();
  s.resize(s.size() - 3);
  std::istringstream cut(s);
  EXPECT_THROW(io::read_tensor(cut), std::runtime_error);
}

TEST(RandomSourceDeterminism, SameSeedSameStream) {
  RandomSource a(12345), b(12345);
  for (int i = 0; i < 10000; ++i) ASSERT_EQ(a.next_u64(), b.next_u64());
  RandomSource c(12345), d(12345);
  for (int i = 0; i < 1000; ++i) {
    ASSERT_EQ(c.normal(), d.normal());
    ASSERT_EQ(c.uniform(), d.uniform());
  }
}

TEST(RandomSourceDeterminism, DerivedStreamsDiffer) {
  RandomSource root(1);
  RandomSource a = root.derive("alpha");
  RandomSource b = root.derive("beta");
  RandomSource a2 = root.derive("alpha");
  std::size_t same = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto x = a.next_u64();
    same += x == b.next_u64();
    ASSERT_EQ(x, a2.next_u64());
  }
  EXPECT_EQ(same, 0u);
}

TEST(RandomSourceDeterminism, DerivedStreamsUncorrelated) {
  RandomSource root(5);
  RandomSource a = root.derive(std::uint64_t{0});
  RandomSource b = root.derive(std::uint64_t{1});
  const int n = 100000;
  double sab = 0.0, sa = 0.0, sb = 0.0, saa = 0.0, sbb = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = a.uniform(), y = b.uniform();
    sab += x * y;
    sa += x;
    sb += y;
    saa += x * x;
    sbb += y * y;
  }
  const double cov = sab / n - (sa / n) * (sb / n);
  const double corr = cov / std::sqrt((saa / n - sa * sa / n / n) * (sbb / n - sb * sb / n / n));
  EXPECT_LT(std::abs(corr), 4.0 / std::sqrt(n));
}

TEST(RandomSourceMoments, UniformAndNormal) {
  RandomSource rng(77);
  const int n = 200000;
  double su = 0.0, sn = 0.0, snn = 0.0;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    su += u;
    const double z = rng.normal();
    sn += z;
    snn += z * z;
  }
  EXPECT_NEAR(su / n, 0.5, 4.0 * std::sqrt(1.0 / 12.0 / n));
  EXPECT_NEAR(sn / n, 0.0, 4.0 / std::sqrt(n));
  EXPECT_NEAR(snn / n, 1.0, 4.0 * std::sqrt(2.0 / n));
}

TEST(RandomSourceMoments, BelowIsUnbiased) {
  RandomSource rng(8);
  std::vector<int> counts(7, 0);
  const int n = 70000;
  for (int i = 0; i < n; ++i) ++counts[rng.below(7)];
  for (int c : counts) EXPECT_NEAR(c, n / 7.0, 4.0 * std::sqrt(n / 7.0));
}
