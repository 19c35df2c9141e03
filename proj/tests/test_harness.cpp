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
#include <nht/harness.hpp>

#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <sstream>

using namespace nht;
using namespace nht::harness;

namespace {

/// Scaled-down scenario that still trains a competent victim.
ExperimentConfig quick() {
  ExperimentConfig c;
  c.train_per_class = 200;
  c.test_per_class = 100;
  c.victim_train.epochs = 40;
  c.pool_size = 2000;
  c.budget = 2000;
  c.probes = 500;
  c.surrogate_train.epochs = 15;
  return c;
}

RunOptions in_memory(ScenarioCache* cache = nullptr) { return RunOptions{false, cache}; }

ScenarioCache& shared_cache() {
  static ScenarioCache cache;
  return cache;
}

}  // namespace

TEST(Config, TomlRoundTrip) {
  ExperimentConfig c = quick();
  set_value(c, "protection.margin_d", "0.7");
  set_value(c, "attack.kind", "top1");
  set_value(c, "victim.hidden", "[32, 16]");
  ExperimentConfig back;
  apply_toml(back, to_toml(c));
  EXPECT_EQ(to_toml(back), to_toml(c));
  EXPECT_EQ(config_digest(back), config_digest(c));
  EXPECT_EQ(get_value(back, "protection.margin_d"), "0.7");
  EXPECT_EQ(get_value(back, "attack.kind"), "\"top1\"");
  EXPECT_EQ(back.victim_hidden, (std::vector<std::size_t>{32, 16}));
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  ExperimentConfig c;
  EXPECT_ANY_THROW(set_value(c, "protection.nope", "1"));
  EXPECT_ANY_THROW(set_value(c, "protection.margin_d", "abc"));
  EXPECT_ANY_THROW(apply_toml(c, "[protection]\nmissing = 3\n"));
  c.defense = "mystery";
  EXPECT_ANY_THROW(validate(c));
}

TEST(Config, DigestTracksSemanticKeysOnly) {
  ExperimentConfig a = quick(), b = quick();
  EXPECT_EQ(config_digest(a), config_digest(b));
  b.output_dir = "elsewhere";
  b.workers = 7;
  EXPECT_EQ(config_digest(a), config_digest(b));
  b.master_seed += 1;
  EXPECT_NE(config_digest(a), config_digest(b));
  ExperimentConfig d = quick();
  d.attack = "top1";
  EXPECT_NE(config_digest(a), config_digest(d));
  EXPECT_EQ(scoped_digest(a, {"data."}), scoped_digest(d, {"data."}));
  EXPECT_NE(stage_seed(config_digest(a), "attack"), stage_seed(config_digest(d), "attack"));
}

TEST(Config, OutputRootHonoursEnvironment) {
  ExperimentConfig c;
  c.output_dir = "from-config";
  ::unsetenv("NHT_OUT");
  EXPECT_EQ(output_root(c), std::filesystem::path("from-config"));
  ::setenv("NHT_OUT", "/tmp/nht-env-root", 1);
  EXPECT_EQ(output_root(c), std::filesystem::path("/tmp/nht-env-root"));
  ::unsetenv("NHT_OUT");
}

TEST(Task, InDistributionPoolFollowsVictimData) {
  ExperimentConfig c = quick();
  const auto shifted = make_task(c);
  c.pool_in_distribution = true;
  const auto same = make_task(c);
  EXPECT_EQ(same.pool.size(), c.pool_size);
  EXPECT_EQ(shifted.pool.size(), c.pool_size);
  EXPECT_EQ(same.train, shifted.train);
  // Mean distance to the nearest class mean: the in-distribution pool sits as close as the training data.
  const Tensor means = class_means(same.spec);
  const auto nearest = [&](const Dataset& d) {
    double total = 0.0;
    for (std::size_t r = 0; r < d.size(); ++r) {
      double best = 1e300;
      for (std::size_t k = 0; k < means.rows(); ++k) {
        double s = 0.0;
        for (std::size_t i = 0; i < d.dim(); ++i) s += (d.inputs.at(r, i) - means.at(k, i)) * (d.inputs.at(r, i) - means.at(k, i));
        best = std::min(best, s);
      }
      total += std::sqrt(best);
    }
    return total / static_cast<double>(d.size());
  };
  EXPECT_NEAR(nearest(same.pool) / nearest(same.train), 1.0, 0.05);
  EXPECT_GT(nearest(shifted.pool), 1.2 * nearest(shifted.train));
}

TEST(Scenario, UnprotectedControlDoesNotClaim) {
  ExperimentConfig c = quick();
  c.defense = "none";
  const auto r = run_scenario(c, in_memory(&shared_cache()));
  ASSERT_TRUE(r.ok()) << r.error;
  EXPECT_LE(r.wsr, 0.05);
  EXPECT_FALSE(r.claim.claim);
  EXPECT_GE(r.victim_accuracy, 0.9);
}

TEST(Scenario, HoneytraceNaiveClaims) {
  const auto r = run_scenario(quick(), in_memory(&shared_cache()));
  ASSERT_TRUE(r.ok()) << r.error;
  EXPECT_TRUE(r.claim.claim) << r.claim.summary();
  EXPECT_GT(r.wsr, r.control_wsr);
}

TEST(Scenario, RepeatRunIsBitIdentical) {
  ExperimentConfig c = quick();
  c.attack = "top1";
  const auto a = run_scenario(c, in_memory());
  const auto b = run_scenario(c, in_memory());
  ASSERT_TRUE(a.ok()) << a.error;
  EXPECT_EQ(a.deterministic_json(), b.deterministic_json());
  EXPECT_EQ(a.digest, config_digest(c));
}

TEST(Scenario, FailedStageIsRecorded) {
  ExperimentConfig c = quick();
  c.victim_train.learning_rate = 1e200;
  const auto r = run_scenario(c, in_memory());
  EXPECT_FALSE(r.ok());
  EXPECT_FALSE(r.failed_stage.empty());
  EXPECT_FALSE(r.error.empty());
}

TEST(Scenario, PersistsUnderDigestDirectory) {
  const auto dir = std::filesystem::temp_directory_path() / "nht-harness-test";
  std::filesystem::remove_all(dir);
  ExperimentConfig c = quick();
  c.defense = "none";
  ::setenv("NHT_OUT", dir.c_str(), 1);
  const auto r = run_scenario(c, RunOptions{true, &shared_cache()});
  ::unsetenv("NHT_OUT");
  ASSERT_TRUE(r.ok()) << r.error;
  const auto run_dir = dir / r.digest;
  EXPECT_TRUE(std::filesystem::exists(run_dir / "config.toml"));
  EXPECT_TRUE(std::filesystem::exists(run_dir / "record.json"));
  std::filesystem::remove_all(dir);
}

TEST(Matrix, SingleScenarioAggregatesEqualScenario) {
  ExperimentConfig c = quick();
  const auto res = run_matrix({c}, 1, in_memory(&shared_cache()));
  ASSERT_EQ(res.summary.size(), 1u);
  const auto& s = res.summary[0];
  const auto& r = res.records[0];
  EXPECT_EQ(s.scenarios, 1u);
  EXPECT_EQ(s.avg_wsr, r.wsr);
  EXPECT_EQ(s.min_wsr, r.wsr);
  EXPECT_EQ(s.avg_eacc, r.extracted_accuracy);
  EXPECT_EQ(s.max_eacc, r.extracted_accuracy);
}

TEST(Matrix, AggregateBounds) {
  std::vector<RunRecord> recs(5);
  RandomSource rng(2);
  for (auto& r : recs) {
    r.defense = rng.bernoulli(0.5) ? "a" : "b";
    r.wsr = rng.uniform();
    r.extracted_accuracy = rng.uniform();
  }
  recs[0].defense = "a";
  recs[1].defense = "b";
  for (const auto& s : summarize(recs))
    for (const auto& r : recs) {
      if (r.defense != s.defense) continue;
      EXPECT_LE(s.min_wsr, r.wsr);
      EXPECT_GE(s.max_eacc, r.extracted_accuracy);
      EXPECT_GE(s.avg_wsr, s.min_wsr);
    }
}

TEST(Matrix, DefaultShape) {
  const auto m = default_matrix(quick(), 0.1);
  EXPECT_EQ(m.size(), 12u);
  for (const auto& c : m) EXPECT_EQ(c.dawn_attacker_fraction, 0.1);
}

TEST(Csv, EmptyIsHeaderOnly) {
  std::ostringstream os;
  write_summary_csv(os, {});
  std::string header;
  for (std::size_t i = 0; i < summary_columns().size(); ++i) header += (i ? "," : "") + summary_columns()[i];
  EXPECT_EQ(os.str(), header + "\n");
}

TEST(Csv, OneRecordRoundTrips) {
  RunRecord r;
  r.digest = "abc123";
  r.defense = "honeytrace";
  r.attack = "top1";
  r.query = "knockoff";
  r.wsr = 0.3125;
  r.extracted_accuracy = 0.875;
  r.planned_queries = 77;
  r.claim = verify::ownership_claim(10, 10, 0.1, 1e-4);
  std::stringstream ss;
  write_summary_csv(ss, {r});
  const auto rows = read_csv(ss);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].at("digest"), "abc123");
  EXPECT_EQ(rows[0].at("attack"), "top1");
  EXPECT_EQ(std::stod(rows[0].at("wsr")), 0.3125);
  EXPECT_EQ(std::stod(rows[0].at("extracted_accuracy")), 0.875);
  EXPECT_EQ(rows[0].at("planned_queries"), "77");
  EXPECT_EQ(rows[0].at("verdict"), "claim");
}

TEST(Sweep, MarginTradesWsrAgainstAccuracy) {
  const std::vector<std::string> values{"0.6", "0.7", "0.8", "0.9", "1.0", "1.1", "1.2"};
  const auto sw = run_sweep(quick(), "protection.margin_d", values, 1, in_memory(&shared_cache()));
  std::vector<double> d, wsr, acc;
  for (std::size_t i = 0; i < values.size(); ++i) {
    ASSERT_TRUE(sw.records[i].ok()) << sw.records[i].error;
    d.push_back(std::stod(values[i]));
    wsr.push_back(sw.records[i].wsr);
    acc.push_back(sw.records[i].protected_accuracy);
  }
  EXPECT_GT(nht::testing::spearman(d, wsr), 0.8);
  EXPECT_LT(nht::testing::spearman(d, acc), -0.8);
  std::ostringstream os;
  write_sweep_csv(os, sw);
  const std::string csv = os.str();
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 8);
}

TEST(Reports, SvgIsSelfContained) {
  const auto svg = svg_line_chart("t", "x", {0.0, 1.0}, {{"a", {0.0, 1.0}}});
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
  EXPECT_NE(svg.find("</svg>"), std::string::npos);
}
