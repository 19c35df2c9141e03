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
#include <nht/attacks.hpp>

#include "test_support.hpp"

#include <gtest/gtest.h>

#include <map>
#include <sstream>

using namespace nht;
using namespace nht::attacks;

namespace {

std::shared_ptr<const Mlp> victim() { return nht::testing::small_task().victim; }

Dataset small_pool(std::size_t per_class, const char* label = "attacker") {
  BlobSpec spec;
  spec.per_class = per_class;
  return gen_blobs(spec, label);
}

/// Returns a fixed probability row plus independent uniform noise of +-0.1.
class NoisyEndpoint final : public Endpoint {
 public:
  explicit NoisyEndpoint(std::uint64_t seed) : rng_(seed) {}
  std::vector<double> query(std::span<const double>) override {
    ++calls_;
    std::vector<double> y(2);
    y[0] = 0.7 + rng_.uniform(-0.1, 0.1);
    y[1] = 0.3 + rng_.uniform(-0.1, 0.1);
    return y;
  }
  std::size_t num_classes() const override { return 2; }
  std::size_t input_width() const override { return 64; }

 private:
  RandomSource rng_;
};

std::vector<double> random_simplex(std::size_t K, RandomSource& rng) {
  std::vector<double> v(K);
  double s = 0.0;
  for (double& x : v) s += x = -std::log(1.0 - rng.uniform());
  for (double& x : v) x /= s;
  return v;
}

}  // namespace

TEST(Knockoff, FullBudgetQueriesEveryRowOnce) {
  const Dataset pool = small_pool(20);
  PlainEndpoint ep(victim(), LabelMode::soft);
  const auto t = knockoff_query(ep, pool, pool.size(), 4);
  EXPECT_EQ(ep.calls(), pool.size());
  std::map<std::vector<double>, int> seen;
  for (std::size_t r = 0; r < pool.size(); ++r) {
    auto x = pool.inputs.row(r);
    ++seen[{x.begin(), x.end()}];
  }
  for (std::size_t r = 0; r < t.size(); ++r) {
    auto x = t.queries.row(r);
    --seen[{x.begin(), x.end()}];
  }
  for (const auto& [row, c] : seen) EXPECT_EQ(c, 0);
  EXPECT_EQ(t.raw, t.recovered);
  EXPECT_THROW(knockoff_query(ep, pool, pool.size() + 1, 4), std::invalid_argument);
}

TEST(Knockoff, SameSeedSameTrace) {
  const Dataset pool = small_pool(20);
  PlainEndpoint a(victim(), LabelMode::soft), b(victim(), LabelMode::soft);
  const auto t1 = knockoff_query(a, pool, 50, 9);
  const auto t2 = knockoff_query(b, pool, 50, 9);
  EXPECT_EQ(t1.queries, t2.queries);
  EXPECT_EQ(t1.raw, t2.raw);
  EXPECT_NE(t1.queries, knockoff_query(a, pool, 50, 10).queries);
}

TEST(Knockoff, NaiveExtractionTracksVictim) {
  const auto& T = nht::testing::small_task();
  const Dataset pool = small_pool(500, "attacker");
  PlainEndpoint ep(T.victim, LabelMode::soft);
  const auto trace = knockoff_query(ep, pool, 5000, 2);
  SurrogateConfig sc{{128, 64}, TrainConfig{30, 128, 0.1, 10, 0.1, 0.5, 1}, 11};
  const auto r = extract(trace, sc, *T.victim, T.test);
  EXPECT_GE(r.extracted_accuracy, 0.8 * accuracy(*T.victim, T.test.inputs, T.test.labels));
  EXPECT_GE(r.fidelity, 0.85);
}

namespace {

JbdaConfig quick_jbda(std::size_t steps, double mu) {
  JbdaConfig c;
  c.steps = steps;
  c.step = mu;
  c.budget = 200;
  c.surrogate.train.epochs = 3;
  return c;
}

}  // namespace

TEST(Jbda, ZeroStepsQueriesSeedPoolOnly) {
  const Dataset seeds = small_pool(5);
  PlainEndpoint ep(victim(), LabelMode::soft);
  const auto t = jbda_tr_query(ep, seeds, quick_jbda(0, 0.01));
  EXPECT_EQ(t.queries, seeds.inputs);
  EXPECT_EQ(ep.calls(), seeds.size());
}

TEST(Jbda, ZeroStepSizeCopiesParents) {
  const Dataset seeds = small_pool(5);
  PlainEndpoint ep(victim(), LabelMode::soft);
  const auto t = jbda_tr_query(ep, seeds, quick_jbda(4, 0.0));
  ASSERT_EQ(t.size(), 200u);
  for (std::size_t r = seeds.size(); r < t.size(); ++r) {
    auto x = t.queries.row(r);
    bool found = false;
    for (std::size_t p = 0; p < seeds.size() && !found; ++p) {
      auto s = seeds.inputs.row(p);
      found = std::equal(x.begin(), x.end(), s.begin());
    }
    EXPECT_TRUE(found) << r;
  }
}

TEST(Jbda, SyntheticRowsStayNearAParentAndInBox) {
  const Dataset seeds = small_pool(5);
  PlainEndpoint ep(victim(), LabelMode::soft);
  const auto cfg = quick_jbda(4, 0.02);
  const auto t = jbda_tr_query(ep, seeds, cfg);
  EXPECT_EQ(t.size(), cfg.budget);
  for (double v : t.queries.values()) {
    ASSERT_GE(v, 0.0);
    ASSERT_LE(v, 1.0);
  }
  const double bound = cfg.steps * cfg.step + 1e-12;
  for (std::size_t r = seeds.size(); r < t.size(); ++r) {
    auto x = t.queries.row(r);
    double best = 1e9;
    for (std::size_t p = 0; p < r; ++p) {
      auto q = t.queries.row(p);
      double sup = 0.0;
      for (std::size_t d = 0; d < x.size(); ++d) sup = std::max(sup, std::abs(x[d] - q[d]));
      best = std::min(best, sup);
    }
    EXPECT_LE(best, bound) << r;
  }
  PlainEndpoint again(victim(), LabelMode::soft);
  EXPECT_EQ(jbda_tr_query(again, seeds, cfg).queries, t.queries);
}

TEST(Top1, Examples) {
  AttackTrace t;
  t.raw = Tensor({3, 2}, std::vector<double>{0.6, 0.4, 0.5, 0.5, 0.0, 1.0});
  const auto a = top1_attack(t);
  EXPECT_EQ(a.recovered, Tensor({3, 2}, std::vector<double>{1, 0, 1, 0, 0, 1}));
  AttackTrace b = a;
  b.raw = a.recovered;
  EXPECT_EQ(top1_attack(b).recovered, a.recovered);
}

TEST(Smoothing, NoJitterSingleResponse) {
  const Dataset q = small_pool(3);
  PlainEndpoint ep(victim(), LabelMode::soft);
  SmoothingConfig cfg;
  cfg.jitter = 0.0;
  const auto t = smoothing_attack(ep, q.inputs, cfg);
  for (std::size_t i = 0; i < t.raw.size(); ++i) EXPECT_NEAR(t.recovered[i], t.raw[i], 1e-15);
  EXPECT_EQ(ep.calls(), 3 * q.size());
}

TEST(Smoothing, SingleAugmentationEqualsNaive) {
  const Dataset q = small_pool(3);
  PlainEndpoint a(victim(), LabelMode::soft), b(victim(), LabelMode::soft);
  SmoothingConfig cfg;
  cfg.n_aug = 1;
  const auto t = smoothing_attack(a, q.inputs, cfg);
  Tensor naive;
  query_rows(b, q.inputs, naive);
  EXPECT_EQ(t.recovered, naive);
  EXPECT_EQ(t.raw, naive);
  cfg.n_aug = 0;
  EXPECT_THROW(smoothing_attack(a, q.inputs, cfg), std::invalid_argument);
}

TEST(Smoothing, AveragingThirdsVariance) {
  NoisyEndpoint ep(12);
  const Tensor q = Tensor::matrix(10000, 64);
  const auto t = smoothing_attack(ep, q, SmoothingConfig{});
  std::vector<double> raw(10000), rec(10000);
  for (std::size_t r = 0; r < 10000; ++r) {
    raw[r] = t.raw.at(r, 0);
    rec[r] = t.recovered.at(r, 0);
  }
  EXPECT_NEAR(mean_var(raw).variance, 0.04 / 12.0, 0.1 * 0.04 / 12.0);
  EXPECT_NEAR(mean_var(rec).variance / mean_var(raw).variance, 1.0 / 3.0, 0.05 / 3.0 * 2.0);
}

TEST(Smoothing, RecoveredInsideHullOfResponses) {
  const Dataset q = small_pool(5);
  PlainEndpoint ep(victim(), LabelMode::soft);
  SmoothingConfig cfg;
  cfg.rotate = true;
  cfg.jitter = 0.2;
  const auto t = smoothing_attack(ep, q.inputs, cfg);
  for (std::size_t r = 0; r < q.size(); ++r)
    for (std::size_t k = 0; k < 10; ++k) {
      double lo = 1e9, hi = -1e9;
      for (std::size_t a = 0; a < cfg.n_aug; ++a) {
        lo = std::min(lo, t.augmented.at(r * cfg.n_aug + a, k));
        hi = std::max(hi, t.augmented.at(r * cfg.n_aug + a, k));
      }
      EXPECT_GE(t.recovered.at(r, k), lo - 1e-15);
      EXPECT_LE(t.recovered.at(r, k), hi + 1e-15);
    }
}

namespace {

AttackTrace soft_trace(std::size_t per_class) {
  const Dataset pool = small_pool(per_class);
  PlainEndpoint ep(victim(), LabelMode::soft);
  return knockoff_query(ep, pool, pool.size(), 1);
}

S4lConfig quick_s4l(double w) {
  S4lConfig c;
  c.aux_weight = w;
  c.surrogate = SurrogateConfig{{32}, TrainConfig{3, 32, 0.05, 0, 0.1, 0.5, 4}, 8};
  return c;
}

}  // namespace

TEST(S4l, ZeroWeightMatchesPlainTraining) {
  const auto trace = soft_trace(10);
  const auto cfg = quick_s4l(0.0);
  const auto s = s4l_train(trace, cfg);
  const auto plain = train(cfg.surrogate.fresh(64, 10), trace.queries, trace_targets(trace.recovered), cfg.surrogate.train);
  EXPECT_TRUE(s.model == plain.model);
  EXPECT_EQ(s.loss_trace, plain.loss_trace);
  EXPECT_FALSE(s4l_train(trace, quick_s4l(1.0)).model == plain.model);
}

TEST(S4l, ConstantInputsCarryNoRotationSignal) {
  RandomSource rng(3);
  Mlp m({64, 16, 10}, rng);
  Dense head(16, 4);
  const Tensor data({5, 64}, 0.4);
  std::vector<std::size_t> rows{0, 1, 2, 3, 4};
  Gradients body(m.layers()), hg(std::vector<Dense>{head});
  const double loss = rotation_loss_and_grad(m, head, data, rows, 1.0, body, hg);
  EXPECT_NEAR(loss, std::log(4.0), 1e-12);
  for (double v : hg.weight[0]) EXPECT_NEAR(v, 0.0, 1e-15);

  AttackTrace t;
  t.queries = data;
  t.recovered = Tensor({5, 10}, 0.1);
  const auto s = s4l_train(t, quick_s4l(1.0));
  for (double v : s.head.layer.weight) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(S4l, CombinedLossFiniteDifference) {
  for (std::uint64_t seed = 1; seed <= 4; ++seed) {
    RandomSource rng(seed);
    Mlp m({64, 12, 5}, rng);
    for (auto& l : m.layers())
      for (double& b : l.bias) b = rng.normal(0.0, 0.1);
    Dense head(12, 4);
    for (double& w : head.weight) w = rng.normal(0.0, 0.5);
    Tensor data = Tensor::matrix(3, 64);
    for (double& v : data.values()) v = rng.uniform();
    Tensor probs = Tensor::matrix(3, 5);
    for (std::size_t r = 0; r < 3; ++r) {
      auto p = random_simplex(5, rng);
      std::copy(p.begin(), p.end(), probs.row(r).begin());
    }
    const Targets tg = Targets::soft(probs);
    const std::vector<std::size_t> rows{0, 1, 2};
    const double w = 0.7;

    auto combined = [&](const Mlp& model, Gradients* out) {
      auto lg = loss_and_grad(model, data, tg, rows);
      Gradients hg(std::vector<Dense>{head});
      const double rl = rotation_loss_and_grad(model, head, data, rows, w, lg.grads, hg);
      if (out) *out = lg.grads;
      return lg.loss + rl;
    };
    Gradients analytic;
    combined(m, &analytic);
    const double h = 1e-5;
    for (std::size_t li = 0; li < m.layers().size(); ++li) {
      double diff = 0.0, norm = 0.0;
      for (std::size_t i = 0; i < m.layers()[li].weight.size(); i += 7) {
        Mlp plus = m, minus = m;
        plus.layers()[li].weight[i] += h;
        minus.layers()[li].weight[i] -= h;
        const double num = (combined(plus, nullptr) - combined(minus, nullptr)) / (2 * h);
        const double ana = analytic.weight[li][i];
        diff += (num - ana) * (num - ana);
        norm += num * num + ana * ana;
      }
      EXPECT_LT(std::sqrt(diff / std::max(norm, 1e-30)), 1e-4) << "seed " << seed << " layer " << li;
    }
  }
}

TEST(PBayes, ExactPairAndIdentity) {
  PBayesTable table;
  table.clean = Tensor({3, 3}, std::vector<double>{1, 0, 0, 0, 1, 0, 0, 0, 1});
  table.perturbed = table.clean;
  AttackTrace t;
  t.raw = table.clean;
  EXPECT_EQ(pbayes_recover(t, table).recovered, table.clean);

  table.perturbed = Tensor({3, 3}, std::vector<double>{0.2, 0.5, 0.3, 0.3, 0.3, 0.4, 0.6, 0.2, 0.2});
  t.raw = Tensor({1, 3}, std::vector<double>{0.3, 0.3, 0.4});
  const auto r = pbayes_recover(t, table);
  EXPECT_EQ(r.recovered, Tensor({1, 3}, std::vector<double>{0, 1, 0}));
  EXPECT_THROW(pbayes_recover(t, PBayesTable{}), std::invalid_argument);
}

TEST(PBayes, LinearPerturbationIsPartlyUndone) {
  RandomSource rng(5);
  const std::size_t K = 10;
  auto perturb = [](std::vector<double> y) {
    for (double& v : y) v = 0.5 * v + 0.05;
    return y;
  };
  std::vector<std::vector<double>> clean, pert;
  for (int i = 0; i < 3000; ++i) {
    clean.push_back(random_simplex(K, rng));
    pert.push_back(perturb(clean.back()));
  }
  PBayesTable table{stack_rows(clean), stack_rows(pert)};
  std::vector<std::vector<double>> hc, hp;
  for (int i = 0; i < 1000; ++i) {
    hc.push_back(random_simplex(K, rng));
    hp.push_back(perturb(hc.back()));
  }
  AttackTrace t;
  t.raw = stack_rows(hp);
  const Tensor truth = stack_rows(hc);
  const auto r = pbayes_recover(t, table);
  EXPECT_LT(mean_squared(r.recovered, truth), mean_squared(t.raw, truth));
}

namespace {

DdaeConfig quick_ddae() {
  DdaeConfig c;
  c.shadow_count = 2;
  c.pairs_per_shadow = 2000;
  c.hidden = {32, 32};
  c.train = TrainConfig{40, 32, 0.05, 20, 0.1, 0.9, 17};
  return c;
}

}  // namespace

TEST(Ddae, IdentityDefenseIsLearned) {
  DefenseSimulator sim = [](std::size_t, RandomSource& rng) {
    auto y = random_simplex(10, rng);
    return std::make_pair(y, y);
  };
  const auto rec = ddae_recover_train(sim, 10, quick_ddae());
  EXPECT_LT(rec.holdout_mse, 1e-3);
  EXPECT_EQ(rec.holdout_baseline_mse, 0.0);
}

TEST(Ddae, ConstantShiftRecoveredTenfold) {
  DefenseSimulator sim = [](std::size_t, RandomSource& rng) {
    auto y = random_simplex(10, rng);
    auto p = y;
    p[3] += 0.3;
    return std::make_pair(y, p);
  };
  const auto rec = ddae_recover_train(sim, 10, quick_ddae());
  EXPECT_LE(rec.holdout_mse * 10.0, rec.holdout_baseline_mse);

  AttackTrace t = soft_trace(2);
  const auto out = ddae_apply(t, rec);
  EXPECT_EQ(out.recovered.shape(), t.raw.shape());
  EXPECT_EQ(out.queries, t.queries);
  DefenseSimulator bad = [](std::size_t, RandomSource&) {
    return std::make_pair(std::vector<double>(3), std::vector<double>(10));
  };
  EXPECT_THROW(ddae_recover_train(bad, 10, quick_ddae()), std::invalid_argument);
}

TEST(Fidelity, CopyAndChance) {
  const auto& T = nht::testing::small_task();
  EXPECT_EQ(fidelity(*T.victim, *T.victim, T.test.inputs), 1.0);
  double sum = 0.0;
  const int seeds = 30;
  for (int s = 0; s < seeds; ++s) {
    RandomSource rng(1000 + s);
    Mlp random({64, 128, 64, 10}, rng);
    sum += fidelity(random, *T.victim, T.test.inputs);
  }
  EXPECT_NEAR(sum / seeds, 0.1, 0.02);
}

TEST(TraceFile, RoundTrip) {
  const auto t = top1_attack(soft_trace(2));
  std::stringstream ss;
  write_trace(ss, t);
  const auto back = read_trace(ss);
  EXPECT_EQ(back.kind, t.kind);
  EXPECT_EQ(back.seed, t.seed);
  EXPECT_EQ(back.budget, t.budget);
  EXPECT_EQ(back.queries, t.queries);
  EXPECT_EQ(back.raw, t.raw);
  EXPECT_EQ(back.recovered, t.recovered);
  std::istringstream junk("NHTX");
  EXPECT_THROW(read_trace(junk), std::runtime_error);
}
