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

#include <nht/attacks.hpp>
#include <nht/channel.hpp>
#include <nht/datagen.hpp>
#include <nht/digest.hpp>
#include <nht/honeytrace.hpp>
#include <nht/nn.hpp>
#include <nht/numerics.hpp>
#include <nht/verify.hpp>

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <type_traits>
#include <utility>
#include <vector>

namespace nht::harness {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

/// Invalid or inconsistent configuration (CLI exit code 2).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A pipeline stage threw (CLI exit code 3).
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& what) : std::runtime_error(stage + ": " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct ExperimentConfig {
  // [data]
  std::size_t classes = 10;
  std::size_t dim = 64;
  std::size_t train_per_class = 500;
  std::size_t test_per_class = 200;
  double spread = 0.1;
  std::uint64_t data_seed = 7;

  // [pool] attacker query pool
  std::size_t pool_size = 5000;
  double pool_shift = 0.15;
  double pool_blend = 0.5;
  double pool_spread = 0.1;
  bool pool_in_distribution = false;

  // [victim]
  std::vector<std::size_t> victim_hidden{128, 64};
  TrainConfig victim_train{100, 64, 0.01, 10, 0.5, 0.5, 1};

  // [defense]
  std::string defense = "honeytrace";  // none | honeytrace | dawn
  ProtectionParams protection = [] {
    ProtectionParams p;
    p.mode = LabelMode::soft;
    return p;
  }();

  // [watermark]
  std::size_t wm_source_k = 1;
  std::size_t wm_source_j = 2;
  std::size_t wm_target = 0;
  std::size_t wm_count = 20;

  // [dawn]
  double dawn_flip_ratio = 0.1;
  std::string dawn_key = "dawn-desk-key";
  double dawn_attacker_fraction = 0.5;

  // [attack]
  std::string attack = "naive";  // naive | top1 | smoothing | s4l | pbayes | ddae
  std::string query = "knockoff";  // knockoff | jbda
  std::size_t budget = 5000;
  std::size_t jbda_seed_size = 500;
  double jbda_step = 0.01;
  std::size_t jbda_steps = 8;
  std::size_t jbda_epochs = 10;
  std::size_t smoothing_n_aug = 3;
  double smoothing_jitter = 0.05;
  bool smoothing_rotate = false;
  double s4l_weight = 1.0;
  double pbayes_radius = 0.05;
  std::size_t pbayes_table = 2000;
  std::size_t shadow_per_class = 200;
  std::size_t ddae_shadows = 4;
  std::size_t ddae_pairs = 12500;
  std::size_t ddae_epochs = 40;

  // [surrogate]
  std::vector<std::size_t> surrogate_hidden{128, 64};
  TrainConfig surrogate_train{30, 128, 0.1, 10, 0.1, 0.5, 1};

  // [verify]
  double alpha = 1e-4;
  double beta = 0.01;
  std::size_t probes = 1000;
  double baseline_floor = 0.01;

  // [channel]
  double precision = 0.01;
  double error_rate = 0.01;

  // [run]
  std::uint64_t master_seed = 2024;
  std::string output_dir = "runs";
  std::size_t workers = 0;  // 0: hardware concurrency
};

namespace detail {

template <class T>
struct is_vector : std::false_type {};
template <class T>
struct is_vector<std::vector<T>> : std::true_type {};

inline std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

inline std::string unquote(const std::string& v) {
  if (v.size() >= 2 && v.front() == '"' && v.back() == '"') return v.substr(1, v.size() - 2);
  return v;
}

inline std::string fmt_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  std::string s(buf, p);
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

template <class T>
T parse_number(const std::string& key, const std::string& raw) {
  const std::string v = unquote(trim(raw));
  T out{};
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError("config: bad value for " + key + ": '" + raw + "'");
  return out;
}

inline void parse_into(const std::string& key, const std::string& raw, std::size_t& out) {
  out = parse_number<std::size_t>(key, raw);
}
inline void parse_into(const std::string& key, const std::string& raw, double& out) { out = parse_number<double>(key, raw); }
inline void parse_into(const std::string& key, const std::string& raw, bool& out) {
  const std::string v = unquote(trim(raw));
  if (v == "true") out = true;
  else if (v == "false") out = false;
  else throw ConfigError("config: bad boolean for " + key + ": '" + raw + "'");
}
inline void parse_into(const std::string&, const std::string& raw, std::string& out) { out = unquote(trim(raw)); }
inline void parse_into(const std::string& key, const std::string& raw, std::vector<std::size_t>& out) {
  std::string v = trim(raw);
  if (v.size() < 2 || v.front() != '[' || v.back() != ']') throw ConfigError("config: " + key + " must be a list");
  v = v.substr(1, v.size() - 2);
  out.clear();
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (trim(item).empty()) continue;
    out.push_back(parse_number<std::size_t>(key, item));
  }
}
inline void parse_into(const std::string& key, const std::string& raw, LabelMode& out) {
  const std::string v = unquote(trim(raw));
  if (v == "soft") out = LabelMode::soft;
  else if (v == "hard") out = LabelMode::hard;
  else throw ConfigError("config: " + key + " must be soft or hard");
}
inline void parse_into(const std::string& key, const std::string& raw, FeatureSource& out) {
  const std::string v = unquote(trim(raw));
  if (v == "penultimate") out = FeatureSource::penultimate;
  else if (v == "logits") out = FeatureSource::logits;
  else throw ConfigError("config: " + key + " must be penultimate or logits");
}
inline void parse_into(const std::string& key, const std::string& raw, std::optional<double>& out) {
  const std::string v = unquote(trim(raw));
  if (v == "auto") out.reset();
  else out = parse_number<double>(key, v);
}

inline std::string format(std::size_t v) { return std::to_string(v); }
inline std::string format(double v) { return fmt_double(v); }
inline std::string format(bool v) { return v ? "true" : "false"; }
inline std::string format(const std::string& v) { return '"' + v + '"'; }
inline std::string format(const std::vector<std::size_t>& v) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + std::to_string(v[i]);
  return s + "]";
}
inline std::string format(LabelMode m) { return format(std::string(to_string(m))); }
inline std::string format(FeatureSource f) {
  return format(std::string(f == FeatureSource::penultimate ? "penultimate" : "logits"));
}
inline std::string format(const std::optional<double>& v) { return v ? fmt_double(*v) : "\"auto\""; }

}  // namespace detail

/// Calls f(key, member, help) for every configuration key, in file order.
template <class Config, class F>
void visit_fields(Config& c, F&& f) {
  f("data.classes", c.classes, "number of classes K");
  f("data.dim", c.dim, "input dimension D (perfect square)");
  f("data.train_per_class", c.train_per_class, "victim training samples per class");
  f("data.test_per_class", c.test_per_class, "held-out samples per class");
  f("data.spread", c.spread, "per-pixel noise around class means");
  f("data.seed", c.data_seed, "synthetic task seed");
  f("pool.size", c.pool_size, "attacker pool size");
  f("pool.shift", c.pool_shift, "attacker brightness shift");
  f("pool.blend", c.pool_blend, "fraction of two-class blends in the pool");
  f("pool.spread", c.pool_spread, "attacker pool pixel noise");
  f("pool.in_distribution", c.pool_in_distribution, "attacker samples the victim's own distribution");
  f("victim.hidden", c.victim_hidden, "victim hidden widths");
  f("victim.epochs", c.victim_train.epochs, "victim epochs");
  f("victim.batch_size", c.victim_train.batch_size, "victim minibatch size");
  f("victim.learning_rate", c.victim_train.learning_rate, "victim SGD learning rate");
  f("victim.lr_decay_step", c.victim_train.lr_decay_step, "epochs between decays (0 = off)");
  f("victim.lr_decay_factor", c.victim_train.lr_decay_factor, "decay factor");
  f("victim.momentum", c.victim_train.momentum, "SGD momentum");
  f("defense.kind", c.defense, "none | honeytrace | dawn");
  f("defense.mode", c.protection.mode, "exposed outputs: soft | hard");
  f("protection.margin_d", c.protection.margin_d, "similarity margin d");
  f("protection.alpha", c.protection.alpha, "logit mixing exponent");
  f("protection.beta", c.protection.beta, "flip probability exponent");
  f("protection.confidence_threshold", c.protection.confidence_threshold, "confidence gate threshold");
  f("protection.epsilon_scale", c.protection.epsilon_scale, "flip noise scale, or \"auto\"");
  f("protection.epsilon_fraction", c.protection.epsilon_fraction, "auto eps as a fraction of the min reference gap");
  f("protection.features", c.protection.features, "penultimate | logits");
  f("watermark.source_k", c.wm_source_k, "masked-region source class");
  f("watermark.source_j", c.wm_source_j, "unmasked-region source class");
  f("watermark.target", c.wm_target, "target class t");
  f("watermark.count", c.wm_count, "trigger count n");
  f("dawn.flip_ratio", c.dawn_flip_ratio, "fraction of queries flipped");
  f("dawn.key", c.dawn_key, "secret flip key");
  f("dawn.attacker_fraction", c.dawn_attacker_fraction, "attacker share of all served queries");
  f("attack.kind", c.attack, "naive | top1 | smoothing | s4l | pbayes | ddae");
  f("attack.query", c.query, "knockoff | jbda");
  f("attack.budget", c.budget, "query budget");
  f("attack.jbda_seed_size", c.jbda_seed_size, "JBDA-TR seed set size");
  f("attack.jbda_step", c.jbda_step, "JBDA-TR step mu");
  f("attack.jbda_steps", c.jbda_steps, "JBDA-TR steps T");
  f("attack.jbda_epochs", c.jbda_epochs, "JBDA-TR interim surrogate epochs");
  f("attack.smoothing_n_aug", c.smoothing_n_aug, "smoothing copies per query");
  f("attack.smoothing_jitter", c.smoothing_jitter, "smoothing jitter amplitude");
  f("attack.smoothing_rotate", c.smoothing_rotate, "smoothing uses random quarter turns");
  f("attack.s4l_weight", c.s4l_weight, "rotation loss weight");
  f("attack.pbayes_radius", c.pbayes_radius, "p-Bayes match radius");
  f("attack.pbayes_table", c.pbayes_table, "p-Bayes table rows");
  f("attack.shadow_per_class", c.shadow_per_class, "attacker shadow training samples per class");
  f("attack.ddae_shadows", c.ddae_shadows, "D-DAE shadow models");
  f("attack.ddae_pairs", c.ddae_pairs, "D-DAE pairs per shadow");
  f("attack.ddae_epochs", c.ddae_epochs, "D-DAE training epochs");
  f("surrogate.hidden", c.surrogate_hidden, "surrogate hidden widths");
  f("surrogate.epochs", c.surrogate_train.epochs, "surrogate epochs");
  f("surrogate.batch_size", c.surrogate_train.batch_size, "surrogate minibatch size");
  f("surrogate.learning_rate", c.surrogate_train.learning_rate, "surrogate SGD learning rate");
  f("surrogate.lr_decay_step", c.surrogate_train.lr_decay_step, "epochs between decays (0 = off)");
  f("surrogate.lr_decay_factor", c.surrogate_train.lr_decay_factor, "decay factor");
  f("surrogate.momentum", c.surrogate_train.momentum, "surrogate momentum");
  f("verify.alpha", c.alpha, "claim significance level");
  f("verify.beta", c.beta, "planning type-II error");
  f("verify.probes", c.probes, "trigger probes per verification");
  f("verify.baseline_floor", c.baseline_floor, "lower bound on the null success rate p0");
  f("channel.precision", c.precision, "output quantisation step");
  f("channel.error_rate", c.error_rate, "assumed label error rate e");
  f("run.master_seed", c.master_seed, "master seed");
  f("run.output_dir", c.output_dir, "output root (NHT_OUT overrides)");
  f("run.workers", c.workers, "matrix worker threads (0 = all cores)");
}

/// Keys that do not change results.
inline bool is_operational_key(std::string_view key) { return key == "run.output_dir" || key == "run.workers"; }

inline std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  ExperimentConfig c;
  visit_fields(c, [&](const char* key, auto&, const char*) { out.emplace_back(key); });
  return out;
}

inline void set_value(ExperimentConfig& c, const std::string& key, const std::string& raw) {
  bool found = false;
  visit_fields(c, [&](const char* k, auto& member, const char*) {
    if (key == k) {
      detail::parse_into(key, raw, member);
      found = true;
    }
  });
  if (!found) throw ConfigError("config: unknown key '" + key + "'");
}

inline std::string get_value(const ExperimentConfig& c, const std::string& key) {
  std::string out;
  bool found = false;
  visit_fields(c, [&](const char* k, const auto& member, const char*) {
    if (key == k) {
      out = detail::format(member);
      found = true;
    }
  });
  if (!found) throw ConfigError("config: unknown key '" + key + "'");
  return out;
}

/// TOML text with [section] tables. `semantic_only` drops operational keys.
inline std::string to_toml(const ExperimentConfig& c, bool semantic_only = false) {
  std::ostringstream os;
  std::string section;
  visit_fields(c, [&](const char* key, const auto& member, const char*) {
    const std::string k = key;
    if (semantic_only && is_operational_key(k)) return;
    const auto dot = k.find('.');
    const std::string sec = k.substr(0, dot);
    if (sec != section) {
      if (!section.empty()) os << '\n';
      os << '[' << sec << "]\n";
      section = sec;
    }
    os << k.substr(dot + 1) << " = " << detail::format(member) << '\n';
  });
  return os.str();
}

/// Reads the subset of TOML the config uses: tables, key = value, # comments.
inline void apply_toml(ExperimentConfig& c, std::string_view text) {
  std::istringstream is{std::string(text)};
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '"') quoted = !quoted;
      if (line[i] == '#' && !quoted) {
        line.resize(i);
        break;
      }
    }
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    if (t.front() == '[') {
      if (t.back() != ']') throw ConfigError("config line " + std::to_string(lineno) + ": bad table header");
      section = detail::trim(std::string_view(t).substr(1, t.size() - 2));
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = detail::trim(std::string_view(t).substr(0, eq));
    const std::string value = detail::trim(std::string_view(t).substr(eq + 1));
    set_value(c, section.empty() ? key : section + "." + key, value);
  }
}

inline ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  ExperimentConfig c;
  apply_toml(c, ss.str());
  return c;
}

inline void validate(const ExperimentConfig& c) {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError("config: " + msg);
  };
  need(c.classes >= 2, "data.classes must be >= 2");
  const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(c.dim))));
  need(c.dim > 0 && side * side == c.dim, "data.dim must be a perfect square");
  need(c.train_per_class >= 1 && c.test_per_class >= 1, "per-class counts must be >= 1");
  need(c.spread >= 0.0 && c.pool_spread >= 0.0, "spreads must be >= 0");
  need(c.pool_blend >= 0.0 && c.pool_blend <= 1.0, "pool.blend must be in [0, 1]");
  need(!c.victim_hidden.empty() && !c.surrogate_hidden.empty(), "hidden widths must be non-empty");
  need(c.defense == "none" || c.defense == "honeytrace" || c.defense == "dawn", "defense.kind must be none, honeytrace or dawn");
  need(c.wm_source_k < c.classes && c.wm_source_j < c.classes && c.wm_target < c.classes,
       "watermark classes must exist");
  need(c.wm_count >= 1, "watermark.count must be >= 1");
  need(c.dawn_flip_ratio >= 0.0 && c.dawn_flip_ratio <= 1.0, "dawn.flip_ratio must be in [0, 1]");
  need(c.dawn_attacker_fraction > 0.0 && c.dawn_attacker_fraction <= 1.0, "dawn.attacker_fraction must be in (0, 1]");
  static const std::vector<std::string> kinds{"naive", "top1", "smoothing", "s4l", "pbayes", "ddae"};
  need(std::find(kinds.begin(), kinds.end(), c.attack) != kinds.end(), "attack.kind is not recognised");
  need(c.query == "knockoff" || c.query == "jbda", "attack.query must be knockoff or jbda");
  need(c.budget >= 1, "attack.budget must be >= 1");
  if (c.query == "knockoff") need(c.budget <= c.pool_size, "attack.budget exceeds pool.size");
  if (c.query == "jbda") need(c.jbda_seed_size >= 1 && c.jbda_seed_size <= std::min(c.budget, c.pool_size),
                              "attack.jbda_seed_size must be in [1, min(budget, pool.size)]");
  need(c.smoothing_n_aug >= 1, "attack.smoothing_n_aug must be >= 1");
  need(c.alpha > 0.0 && c.alpha < 1.0 && c.beta > 0.0 && c.beta < 1.0, "verify.alpha and verify.beta must be in (0, 1)");
  need(c.probes >= 1, "verify.probes must be >= 1");
  need(c.baseline_floor >= 0.0 && c.baseline_floor < 1.0, "verify.baseline_floor must be in [0, 1)");
  need(c.precision > 0.0, "channel.precision must be > 0");
  need(c.error_rate >= 0.0 && c.error_rate < 0.5, "channel.error_rate must be in [0, 0.5)");
  try {
    c.victim_train.validate();
    c.surrogate_train.validate();
    c.protection.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

/// Digest over the semantic keys whose names start with one of `prefixes`
/// (all keys when empty), plus the master seed.
inline std::string scoped_digest(const ExperimentConfig& c, std::initializer_list<std::string_view> prefixes = {}) {
  std::string text;
  visit_fields(c, [&](const char* key, const auto& member, const char*) {
    const std::string_view k = key;
    if (is_operational_key(k)) return;
    bool take = prefixes.size() == 0 || k == "run.master_seed";
    for (auto p : prefixes) take = take || k.substr(0, p.size()) == p;
    if (take) text += std::string(k) + '=' + detail::format(member) + '\n';
  });
  const auto h = hash_string(text);
  return to_hex(std::span(h).first(16));
}

inline std::string config_digest(const ExperimentConfig& c) { return scoped_digest(c); }

/// Stage seed: every stream label carries the digest of what it depends on.
inline std::uint64_t stage_seed(const std::string& scope_digest, std::string_view stage) {
  const auto h = hash_string(scope_digest + "/" + std::string(stage));
  return load_u64(h);
}

inline fs::path output_root(const ExperimentConfig& c) {
  if (const char* env = std::getenv("NHT_OUT"); env && *env) return env;
  return c.output_dir;
}

// ---------------------------------------------------------------------------
// Run records
// ---------------------------------------------------------------------------

struct RunRecord {
  std::string digest;
  std::string defense;
  std::string attack;
  std::string query;
  std::string status = "ok";  // ok | failed
  std::string failed_stage;
  std::string error;
  double victim_accuracy = 0.0;
  double protected_accuracy = 0.0;
  double extracted_accuracy = 0.0;
  double fidelity = 0.0;
  double wsr = 0.0;
  double control_wsr = 0.0;
  std::size_t planned_queries = 0;  // 0 when the measured gap is not positive
  std::size_t queries_served = 0;
  std::size_t flips = 0;
  verify::ClaimResult claim;
  channel::ChannelReport channel;
  std::vector<std::pair<std::string, double>> seconds;  // wall clock per stage

  bool ok() const { return status == "ok"; }

  ojson to_json(bool with_timing = true) const {
    ojson j;
    j["digest"] = digest;
    j["defense"] = defense;
    j["attack"] = attack;
    j["query"] = query;
    j["status"] = status;
    if (!ok()) {
      j["failed_stage"] = failed_stage;
      j["error"] = error;
    }
    j["victim_accuracy"] = victim_accuracy;
    j["protected_accuracy"] = protected_accuracy;
    j["extracted_accuracy"] = extracted_accuracy;
    j["fidelity"] = fidelity;
    j["wsr"] = wsr;
    j["control_wsr"] = control_wsr;
    j["planned_queries"] = planned_queries;
    j["queries_served"] = queries_served;
    j["flips"] = flips;
    j["claim"] = ojson::parse(claim.to_json());
    ojson ch;
    for (const auto& [k, v] : channel.fields()) ch[k] = v;
    j["channel"] = ch;
    if (with_timing) {
      ojson t;
      for (const auto& [k, v] : seconds) t[k] = v;
      j["seconds"] = t;
    }
    return j;
  }

  std::string deterministic_json() const { return to_json(false).dump(2); }
};

// ---------------------------------------------------------------------------
// Shared artifacts
// ---------------------------------------------------------------------------

/// Computes each keyed value once, even when requested from several threads.
template <class T>
class OnceMap {
 public:
  T get(const std::string& key, const std::function<T()>& make) {
    std::promise<T> promise;
    std::shared_future<T> fut;
    bool owner = false;
    {
      std::lock_guard lock(mu_);
      auto it = map_.find(key);
      if (it == map_.end()) {
        fut = promise.get_future().share();
        map_.emplace(key, fut);
        owner = true;
      } else {
        fut = it->second;
      }
    }
    if (owner) {
      try {
        promise.set_value(make());
      } catch (...) {
        promise.set_exception(std::current_exception());
      }
    }
    return fut.get();
  }

 private:
  std::mutex mu_;
  std::map<std::string, std::shared_future<T>> map_;
};

struct ScenarioOutcome {
  RunRecord record;
  std::shared_ptr<const Mlp> surrogate;  // null when extraction failed
};

/// Victims and finished scenarios shared across runs of one process.
struct ScenarioCache {
  OnceMap<std::shared_ptr<const Mlp>> victims;
  OnceMap<std::shared_ptr<const ScenarioOutcome>> scenarios;
};

struct RunOptions {
  bool persist = true;
  ScenarioCache* cache = nullptr;
};

struct TaskData {
  BlobSpec spec;
  Dataset train;
  Dataset test;
  Dataset pool;
};

inline TaskData make_task(const ExperimentConfig& c) {
  BlobSpec spec{c.classes, c.dim, c.train_per_class, c.spread, c.data_seed, true};
  TaskData t{spec, gen_blobs(spec, "victim-train"), {}, {}};
  BlobSpec test = spec;
  test.per_class = c.test_per_class;
  t.test = gen_blobs(test, "victim-test");
  AttackerPoolSpec ps{c.pool_size, c.pool_shift, c.pool_blend, c.pool_spread};
  if (c.pool_in_distribution) {
    BlobSpec ps_in = spec;
    ps_in.per_class = (c.pool_size + c.classes - 1) / c.classes;
    Dataset d = gen_blobs(ps_in, "attacker-surrogate");
    std::vector<std::size_t> rows(c.pool_size);
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    t.pool = d.subset(rows);
  } else {
    t.pool = gen_attacker_pool(spec, ps, "attacker");
  }
  return t;
}

inline std::vector<std::size_t> widths_of(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out) {
  std::vector<std::size_t> w{in};
  w.insert(w.end(), hidden.begin(), hidden.end());
  w.push_back(out);
  return w;
}

inline Mlp train_victim(const ExperimentConfig& c, const Dataset& train_set) {
  const std::string scope = scoped_digest(c, {"data.", "victim."});
  RandomSource init(stage_seed(scope, "victim/init"));
  TrainConfig tc = c.victim_train;
  tc.seed = stage_seed(scope, "victim/train");
  Mlp model(widths_of(c.dim, c.victim_hidden, c.classes), init);
  return train(std::move(model), train_set.inputs, Targets::hard(train_set.labels), tc).model;
}

inline WatermarkSet make_watermarks(const ExperimentConfig& c, const Dataset& train_set) {
  const std::string scope = scoped_digest(c, {"data.", "watermark."});
  return gen_composite_watermarks(train_set, c.wm_source_k, c.wm_source_j, c.wm_target, left_half_mask(c.dim), c.wm_count,
                                  stage_seed(scope, "watermark"));
}

inline Tensor make_probes(const ExperimentConfig& c, const WatermarkSet& wm, const Dataset& test) {
  const std::string scope = scoped_digest(c, {"data.", "watermark.", "verify."});
  return verify::build_probes(wm, test, c.probes, stage_seed(scope, "probes"));
}

// ---------------------------------------------------------------------------
// Attacker-side defense simulation (p-Bayes and D-DAE)
// ---------------------------------------------------------------------------

/// The attacker knows the defense algorithm but none of its secrets: shadow
/// models trained on the attacker's own labelled data are wrapped with the
/// same defense kind using attacker-chosen watermarks or keys.
class ShadowDefense {
 public:
  ShadowDefense(const ExperimentConfig& c, const TaskData& task, std::size_t shadows, std::uint64_t seed) : c_(c), pool_(task.pool) {
    RandomSource rng = RandomSource(seed).derive("shadows");
    for (std::size_t s = 0; s < shadows; ++s) {
      RandomSource srng = rng.derive(s);
      BlobSpec spec = task.spec;
      spec.per_class = c.shadow_per_class;
      const Dataset pub = gen_blobs(spec, "attacker-public-" + std::to_string(s));
      RandomSource init = srng.derive("init");
      TrainConfig tc = c.surrogate_train;
      tc.seed = srng.derive("train").next_u64();
      auto model = std::make_shared<const Mlp>(
          train(Mlp(widths_of(c.dim, c.surrogate_hidden, c.classes), init), pub.inputs, Targets::hard(pub.labels), tc).model);
      Shadow sh{model, nullptr, {}};
      if (c.defense == "honeytrace") {
        const std::size_t t = srng.below(c.classes);
        std::size_t k = srng.below(c.classes), j = srng.below(c.classes);
        if (j == k) j = (k + 1) % c.classes;
        auto wm = gen_composite_watermarks(pub, k, j, t, left_half_mask(c.dim), c.wm_count, srng.derive("wm").next_u64());
        ProtectionParams p;
        p.mode = c.protection.mode;
        sh.protected_model = std::make_shared<const ProtectedModel>(model, wm, pub, p, srng.derive("protect").next_u64());
      } else if (c.defense == "dawn") {
        const auto k = srng.derive("key").next_u64();
        sh.key.resize(8);
        for (int b = 0; b < 8; ++b) sh.key[b] = static_cast<unsigned char>(k >> (8 * b));
      }
      shadows_.push_back(std::move(sh));
    }
  }

  /// One (clean, perturbed) pair of exposed outputs from shadow `s` on a
  /// random pool input.
  std::pair<std::vector<double>, std::vector<double>> sample(std::size_t s, RandomSource& rng) const {
    const Shadow& sh = shadows_.at(s % shadows_.size());
    const auto x = pool_.inputs.row(rng.below(pool_.size()));
    auto logits = logits_of(*sh.model, x);
    auto clean = make_prediction(logits, c_.protection.mode).exposed();
    if (c_.defense == "honeytrace") return {std::move(clean), sh.protected_model->protect(x, rng).exposed()};
    if (c_.defense == "dawn") {
      return {std::move(clean), dawn_protect(logits, x, c_.dawn_flip_ratio, sh.key, c_.protection.mode).exposed()};
    }
    auto copy = clean;
    return {std::move(clean), std::move(copy)};
  }

 private:
  struct Shadow {
    std::shared_ptr<const Mlp> model;
    std::shared_ptr<const ProtectedModel> protected_model;
    std::vector<unsigned char> key;
  };
  ExperimentConfig c_;
  Dataset pool_;
  std::vector<Shadow> shadows_;
};

// ---------------------------------------------------------------------------
// Scenario
// ---------------------------------------------------------------------------

namespace detail {

class StageClock {
 public:
  explicit StageClock(RunRecord& r) : rec_(r) {}
  template <class F>
  auto run(const std::string& stage, F&& f) {
    const auto t0 = std::chrono::steady_clock::now();
    try {
      if constexpr (std::is_void_v<std::invoke_result_t<F>>) {
        f();
        done(stage, t0);
      } else {
        auto v = f();
        done(stage, t0);
        return v;
      }
    } catch (const StageError&) {
      throw;
    } catch (const std::exception& e) {
      done(stage, t0);
      throw StageError(stage, e.what());
    }
  }

 private:
  void done(const std::string& stage, std::chrono::steady_clock::time_point t0) {
    rec_.seconds.emplace_back(stage, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  RunRecord& rec_;
};

template <class F>
void write_file(const fs::path& path, F&& writer) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  writer(os);
}

inline std::string attack_label(const ExperimentConfig& c) {
  return c.query == "jbda" ? (c.attack == "naive" ? "jbda-tr" : "jbda-tr+" + c.attack) : c.attack;
}

}  // namespace detail


/// A victim wrapped by the configured defense. `pm` is always built (its
/// similarity scores feed the channel report); `endpoint` is what attackers see.
struct Defense {
  std::shared_ptr<ProtectedModel> pm;
  std::unique_ptr<Endpoint> endpoint;
  DawnEndpoint* dawn = nullptr;
  HoneytraceEndpoint* honey = nullptr;
  double protected_accuracy = 0.0;
};

inline Defense build_defense(const ExperimentConfig& c, std::shared_ptr<const Mlp> victim, const WatermarkSet& wm,
                             const TaskData& task, const std::string& scenario) {
  Defense d;
  d.pm = std::make_shared<ProtectedModel>(victim, wm, task.train, c.protection, stage_seed(scenario, "protect"));
  if (c.defense == "honeytrace") {
    auto ep = std::make_unique<HoneytraceEndpoint>(d.pm, stage_seed(scenario, "endpoint"));
    d.honey = ep.get();
    d.endpoint = std::move(ep);
    RandomSource rng(stage_seed(scenario, "protected-accuracy"));
    std::size_t hit = 0;
    for (std::size_t i = 0; i < task.test.size(); ++i) {
      RandomSource r = rng.derive(i);
      hit += d.pm->protect(task.test.inputs.row(i), r).label == task.test.labels[i];
    }
    d.protected_accuracy = static_cast<double>(hit) / static_cast<double>(task.test.size());
  } else if (c.defense == "dawn") {
    auto ep = std::make_unique<DawnEndpoint>(victim, c.dawn_flip_ratio, key_from_string(c.dawn_key), c.protection.mode);
    d.dawn = ep.get();
    d.endpoint = std::move(ep);
    std::size_t hit = 0;
    const auto key = key_from_string(c.dawn_key);
    for (std::size_t i = 0; i < task.test.size(); ++i) {
      const auto x = task.test.inputs.row(i);
      hit += dawn_protect(logits_of(*victim, x), x, c.dawn_flip_ratio, key, c.protection.mode).label ==
             task.test.labels[i];
    }
    d.protected_accuracy = static_cast<double>(hit) / static_cast<double>(task.test.size());
  } else {
    d.endpoint = std::make_unique<PlainEndpoint>(victim, c.protection.mode);
    d.protected_accuracy = accuracy(*victim, task.test.inputs, task.test.labels);
  }
  return d;
}

/// Query strategy plus post-processing for the configured attack.
inline attacks::AttackTrace perform_attack(const ExperimentConfig& c, const TaskData& task, Endpoint& endpoint,
                                           const std::string& scenario) {
  attacks::AttackTrace t;
  const std::uint64_t seed = stage_seed(scenario, "attack/query");
  attacks::SmoothingConfig sm{c.smoothing_n_aug, c.smoothing_jitter, c.smoothing_rotate, stage_seed(scenario, "attack/smoothing")};
  if (c.query == "jbda") {
    RandomSource rng(seed);
    auto order = rng.derive("seed-set").permutation(task.pool.size());
    order.resize(c.jbda_seed_size);
    attacks::JbdaConfig jc;
    jc.step = c.jbda_step;
    jc.steps = c.jbda_steps;
    jc.budget = c.budget;
    jc.surrogate = {c.surrogate_hidden, c.surrogate_train, stage_seed(scenario, "attack/jbda-init")};
    jc.surrogate.train.epochs = c.jbda_epochs;
    jc.surrogate.train.seed = stage_seed(scenario, "attack/jbda-train");
    jc.seed = seed;
    t = attacks::jbda_tr_query(endpoint, task.pool.subset(order), jc);
    if (c.attack == "smoothing") t = attacks::smoothing_attack(endpoint, t.queries, sm);
  } else if (c.attack == "smoothing") {
    auto order = RandomSource(seed).derive("knockoff").permutation(task.pool.size());
    order.resize(c.budget);
    t = attacks::smoothing_attack(endpoint, task.pool.subset(order).inputs, sm);
  } else {
    t = attacks::knockoff_query(endpoint, task.pool, c.budget, seed);
  }
  if (c.attack == "top1") t = attacks::top1_attack(std::move(t));
  if (c.attack == "pbayes" || c.attack == "ddae") {
    const std::size_t shadows = c.attack == "pbayes" ? 1 : c.ddae_shadows;
    ShadowDefense sim(c, task, shadows, stage_seed(scenario, "attack/shadows"));
    if (c.attack == "pbayes") {
      RandomSource rng(stage_seed(scenario, "attack/pbayes-table"));
      std::vector<std::vector<double>> clean, perturbed;
      for (std::size_t i = 0; i < c.pbayes_table; ++i) {
        auto [cl, pe] = sim.sample(0, rng);
        clean.push_back(std::move(cl));
        perturbed.push_back(std::move(pe));
      }
      t = attacks::pbayes_recover(std::move(t), {stack_rows(clean), stack_rows(perturbed)}, c.pbayes_radius);
    } else {
      attacks::DdaeConfig dc;
      dc.shadow_count = c.ddae_shadows;
      dc.pairs_per_shadow = c.ddae_pairs;
      dc.train.epochs = c.ddae_epochs;
      dc.train.seed = stage_seed(scenario, "attack/ddae-train");
      dc.seed = stage_seed(scenario, "attack/ddae");
      auto net = attacks::ddae_recover_train(
          [&](std::size_t s, RandomSource& r) { return sim.sample(s, r); }, c.classes, dc);
      t = attacks::ddae_apply(std::move(t), net);
    }
  }
  return t;
}

ScenarioOutcome run_scenario_uncached(const ExperimentConfig& c, const RunOptions& opt);

inline std::shared_ptr<const ScenarioOutcome> run_scenario_shared(const ExperimentConfig& c, const RunOptions& opt) {
  if (!opt.cache) return std::make_shared<const ScenarioOutcome>(run_scenario_uncached(c, opt));
  return opt.cache->scenarios.get(config_digest(c) + (opt.persist ? "/p" : "/m"), [&] {
    return std::make_shared<const ScenarioOutcome>(run_scenario_uncached(c, opt));
  });
}

/// generate -> train victim -> wrap defense -> attack -> extract -> verify ->
/// channel report. Stage failures are recorded in the returned record; only
/// configuration errors throw.
inline RunRecord run_scenario(const ExperimentConfig& c, const RunOptions& opt = {}) {
  return run_scenario_shared(c, opt)->record;
}

inline ScenarioOutcome run_scenario_uncached(const ExperimentConfig& c, const RunOptions& opt) {
  validate(c);
  ScenarioOutcome out;
  RunRecord& rec = out.record;
  rec.digest = config_digest(c);
  rec.defense = c.defense;
  rec.attack = detail::attack_label(c);
  rec.query = c.query;
  detail::StageClock clock(rec);

  fs::path dir;
  if (opt.persist) {
    dir = output_root(c) / rec.digest;
    fs::create_directories(dir);
    detail::write_file(dir / "config.toml", [&](std::ostream& os) { os << to_toml(c); });
  }
  auto persist = [&](const char* name, auto&& writer) {
    if (opt.persist) detail::write_file(dir / name, writer);
  };
  auto finish = [&] {
    if (opt.persist) {
      detail::write_file(dir / "record.json", [&](std::ostream& os) { os << rec.to_json(true).dump(2) << '\n'; });
    }
  };

  const std::string scenario = rec.digest;
  try {
    const TaskData task = clock.run("generate", [&] { return make_task(c); });

    std::shared_ptr<const Mlp> victim = clock.run("train-victim", [&] {
      auto make = [&] { return std::make_shared<const Mlp>(train_victim(c, task.train)); };
      if (!opt.cache) return make();
      return opt.cache->victims.get(scoped_digest(c, {"data.", "victim."}), make);
    });
    persist("victim.nhtm", [&](std::ostream& os) { write_model(os, *victim); });
    rec.victim_accuracy = accuracy(*victim, task.test.inputs, task.test.labels);

    // Defense wrapper. The watermark set also defines the probes, so it is
    // built for every defense kind.
    const WatermarkSet wm = clock.run("watermark", [&] { return make_watermarks(c, task.train); });
    persist("watermarks.nhtw", [&](std::ostream& os) { write_watermarks(os, wm); });
    Defense def = clock.run("wrap-defense", [&] { return build_defense(c, victim, wm, task, scenario); });
    rec.protected_accuracy = def.protected_accuracy;
    std::shared_ptr<ProtectedModel> pm = def.pm;
    Endpoint* endpoint = def.endpoint.get();
    DawnEndpoint* dawn = def.dawn;
    HoneytraceEndpoint* honey = def.honey;

    // Attack: query strategy, then the attacker's post-processing.
    attacks::AttackTrace trace = clock.run("attack", [&] { return perform_attack(c, task, *endpoint, scenario); });
    rec.queries_served = endpoint->calls();
    if (honey) rec.flips = honey->flips();
    if (dawn) rec.flips = dawn->log().size();
    persist("trace.nhta", [&](std::ostream& os) { attacks::write_trace(os, trace); });

    // Extraction.
    auto extracted = clock.run("extract", [&] {
      attacks::SurrogateConfig sc{c.surrogate_hidden, c.surrogate_train, stage_seed(scenario, "extract/init")};
      sc.train.seed = stage_seed(scenario, "extract/train");
      if (c.attack == "s4l") {
        auto res = attacks::s4l_train(trace, {c.s4l_weight, sc});
        return attacks::evaluate_surrogate(std::move(res.model), *victim, task.test);
      }
      return attacks::extract(trace, sc, *victim, task.test);
    });
    rec.extracted_accuracy = extracted.extracted_accuracy;
    rec.fidelity = extracted.fidelity;
    out.surrogate = std::make_shared<const Mlp>(std::move(extracted.surrogate));
    persist("surrogate.nhtm", [&](std::ostream& os) { write_model(os, *out.surrogate); });

    // Verification against the unprotected control run with the same attack.
    clock.run("verify", [&] {
      std::shared_ptr<const Mlp> control = out.surrogate;
      if (c.defense != "none") {
        ExperimentConfig cc = c;
        cc.defense = "none";
        auto ctrl = run_scenario_shared(cc, opt);
        if (!ctrl->record.ok() || !ctrl->surrogate) {
          throw std::runtime_error("control run failed: " + ctrl->record.error);
        }
        control = ctrl->surrogate;
      }
      verify::WsrCount hits, control_hits;
      if (dawn) {
        // Benign traffic so that the attacker makes up the configured share
        // of all served queries, then probes drawn from the whole record log.
        const auto attacker_calls = static_cast<double>(endpoint->calls());
        const auto benign = static_cast<std::size_t>(
            std::llround(attacker_calls * (1.0 - c.dawn_attacker_fraction) / c.dawn_attacker_fraction));
        if (benign > 0) {
          BlobSpec bs = task.spec;
          bs.per_class = (benign + c.classes - 1) / c.classes;
          const Dataset traffic = gen_blobs(bs, "benign-traffic/" + scenario);
          for (std::size_t i = 0; i < benign; ++i) dawn->query(traffic.inputs.row(i));
        }
        const auto& log = dawn->log();
        if (log.empty()) throw std::runtime_error("DAWN record log is empty");
        RandomSource rng(stage_seed(scenario, "verify/dawn-probes"));
        auto order = rng.permutation(log.size());
        order.resize(std::min(c.probes, log.size()));
        std::vector<std::vector<double>> rows;
        std::vector<std::size_t> targets;
        for (std::size_t i : order) {
          rows.push_back(dawn->flipped_queries()[i]);
          targets.push_back(log[i].flipped_label);
        }
        const Tensor probes = stack_rows(rows);
        hits = verify::count_wsr(*out.surrogate, *victim, probes, targets);
        control_hits = verify::count_wsr(*control, *victim, probes, targets);
        persist("dawn_log.jsonl", [&](std::ostream& os) {
          for (const auto& r : log) os << ojson{{"query_digest", r.query_digest}, {"flipped_label", r.flipped_label}}.dump() << '\n';
        });
      } else {
        const Tensor probes = make_probes(c, wm, task.test);
        hits = verify::count_wsr(*out.surrogate, *victim, probes, c.wm_target);
        control_hits = verify::count_wsr(*control, *victim, probes, c.wm_target);
      }
      rec.wsr = hits.rate();
      rec.control_wsr = control_hits.rate();
      const double p0 = std::max(rec.control_wsr, c.baseline_floor);
      rec.claim = verify::ownership_claim(hits.successes, hits.probes, p0, c.alpha);
      const double gap = rec.wsr - p0;
      rec.planned_queries = gap > 0.0 ? verify::required_sample_size(c.alpha, c.beta, std::min(gap, 1.0)) : 0;
    });
    persist("claim.json", [&](std::ostream& os) { os << rec.claim.to_json() << '\n'; });

    // Channel report from what the attacker actually observed.
    clock.run("channel", [&] {
      RandomSource rng(stage_seed(scenario, "channel"));
      std::vector<double> s(trace.size());
      std::size_t carrying = 0;
      for (std::size_t i = 0; i < trace.size(); ++i) {
        RandomSource r = rng.derive(i);
        s[i] = pm->protect(trace.queries.row(i), r).similarity;
        carrying += s[i] > 0.0;
      }
      const MeanVar sig = mean_var(s);
      std::vector<double> noise(trace.size());
      for (std::size_t i = 0; i < trace.size(); ++i) noise[i] = trace.recovered.at(i, c.wm_target) - trace.raw.at(i, c.wm_target);
      const MeanVar nz = mean_var(noise);
      channel::OutputHistogram hist(c.precision);
      for (std::size_t i = 0; i < trace.size(); ++i) hist.add(trace.raw.row(i));
      channel::ChannelInputs in;
      in.similarity_sigma = std::max(std::sqrt(sig.variance), 1e-9);
      in.precision = c.precision;
      in.num_classes = c.classes;
      in.capacity_bits = channel::soft_label_capacity(hist);
      in.error_rate = c.error_rate;
      in.signal_mean = sig.mean;
      in.signal_sigma = std::sqrt(sig.variance);
      // Observed outputs carry at least the quantisation noise of the precision.
      in.noise_mean = nz.mean;
      in.noise_sigma = std::sqrt(nz.variance + c.precision * c.precision / 12.0);
      in.aggregation_count = std::max<std::size_t>(carrying, 1);
      rec.channel = channel::make_report(in);
    });
    persist("channel.txt", [&](std::ostream& os) { os << rec.channel.to_text(); });
  } catch (const StageError& e) {
    rec.status = "failed";
    rec.failed_stage = e.stage();
    rec.error = e.what();
  }
  finish();
  return out;
}

// ---------------------------------------------------------------------------
// Matrix
// ---------------------------------------------------------------------------

struct DefenseSummary {
  std::string defense;
  std::size_t scenarios = 0;
  double avg_eacc = 0.0;
  double max_eacc = 0.0;
  double avg_wsr = 0.0;
  double min_wsr = 0.0;
};

/// Average/max E-Acc and average/min WSR per defense, over successful runs,
/// in order of first appearance.
inline std::vector<DefenseSummary> summarize(const std::vector<RunRecord>& records) {
  std::vector<DefenseSummary> out;
  for (const auto& r : records) {
    if (!r.ok()) continue;
    auto it = std::find_if(out.begin(), out.end(), [&](const DefenseSummary& s) { return s.defense == r.defense; });
    if (it == out.end()) {
      out.push_back({r.defense, 0, 0.0, r.extracted_accuracy, 0.0, r.wsr});
      it = out.end() - 1;
    }
    ++it->scenarios;
    it->avg_eacc += r.extracted_accuracy;
    it->avg_wsr += r.wsr;
    it->max_eacc = std::max(it->max_eacc, r.extracted_accuracy);
    it->min_wsr = std::min(it->min_wsr, r.wsr);
  }
  for (auto& s : out) {
    s.avg_eacc /= static_cast<double>(s.scenarios);
    s.avg_wsr /= static_cast<double>(s.scenarios);
  }
  return out;
}

struct MatrixResult {
  std::vector<RunRecord> records;  // same order as the input configs
  std::vector<DefenseSummary> summary;
};

/// Runs every scenario on a pool of `workers` threads (0 = hardware
/// concurrency). Each scenario is sequential inside.
inline MatrixResult run_matrix(const std::vector<ExperimentConfig>& configs, std::size_t workers = 0,
                               RunOptions opt = {}) {
  for (const auto& c : configs) validate(c);
  ScenarioCache local;
  if (!opt.cache) opt.cache = &local;
  if (workers == 0) workers = std::max(1u, std::thread::hardware_concurrency());
  workers = std::min(workers, std::max<std::size_t>(configs.size(), 1));
  MatrixResult res;
  res.records.resize(configs.size());
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(workers);
  auto work = [&](std::size_t w) {
    try {
      for (std::size_t i; (i = next.fetch_add(1)) < configs.size();) res.records[i] = run_scenario(configs[i], opt);
    } catch (...) {
      errors[w] = std::current_exception();
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(work, w);
  work(0);
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  res.summary = summarize(res.records);
  return res;
}

/// none, honeytrace and dawn against naive, top1, smoothing and JBDA-TR.
inline std::vector<ExperimentConfig> default_matrix(const ExperimentConfig& base, double dawn_attacker_fraction = 0.1) {
  std::vector<ExperimentConfig> out;
  for (const char* defense : {"none", "honeytrace", "dawn"}) {
    for (const char* attack : {"naive", "top1", "smoothing", "jbda"}) {
      ExperimentConfig c = base;
      c.defense = defense;
      c.dawn_attacker_fraction = dawn_attacker_fraction;
      c.query = std::string(attack) == "jbda" ? "jbda" : "knockoff";
      c.attack = std::string(attack) == "jbda" ? "naive" : attack;
      out.push_back(c);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& summary_columns() {
  static const std::vector<std::string> cols{
      "digest",       "defense",    "attack",      "query",   "status",        "victim_accuracy",
      "protected_accuracy", "extracted_accuracy", "fidelity", "wsr", "control_wsr", "p0",
      "p_exact",      "verdict",    "planned_queries"};
  return cols;
}

inline void write_summary_csv(std::ostream& os, const std::vector<RunRecord>& records) {
  const auto& cols = summary_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) os << (i ? "," : "") << cols[i];
  os << '\n';
  for (const auto& r : records) {
    os << r.digest << ',' << r.defense << ',' << r.attack << ',' << r.query << ',' << r.status << ','
       << detail::fmt_double(r.victim_accuracy) << ',' << detail::fmt_double(r.protected_accuracy) << ','
       << detail::fmt_double(r.extracted_accuracy) << ',' << detail::fmt_double(r.fidelity) << ','
       << detail::fmt_double(r.wsr) << ',' << detail::fmt_double(r.control_wsr) << ','
       << detail::fmt_double(r.claim.baseline) << ',' << detail::fmt_double(r.claim.p_exact) << ','
       << (r.claim.claim ? "claim" : "no-claim") << ',' << r.planned_queries << '\n';
  }
}

/// Plain comma-separated rows keyed by the header (no quoting is produced
/// by the writers, so none is parsed).
inline std::vector<std::map<std::string, std::string>> read_csv(std::istream& is) {
  std::vector<std::map<std::string, std::string>> rows;
  std::string line;
  std::vector<std::string> header;
  auto split = [](const std::string& l) {
    std::vector<std::string> f;
    std::stringstream ss(l);
    std::string x;
    while (std::getline(ss, x, ',')) f.push_back(x);
    if (!l.empty() && l.back() == ',') f.emplace_back();
    return f;
  };
  if (!std::getline(is, line)) return rows;
  header = split(line);
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto f = split(line);
    if (f.size() != header.size()) throw std::runtime_error("read_csv: ragged row");
    std::map<std::string, std::string> row;
    for (std::size_t i = 0; i < f.size(); ++i) row[header[i]] = f[i];
    rows.push_back(std::move(row));
  }
  return rows;
}

inline void write_matrix_csv(std::ostream& os, const std::vector<DefenseSummary>& summary) {
  os << "defense,scenarios,avg_eacc,max_eacc,avg_wsr,min_wsr\n";
  for (const auto& s : summary) {
    os << s.defense << ',' << s.scenarios << ',' << detail::fmt_double(s.avg_eacc) << ',' << detail::fmt_double(s.max_eacc)
       << ',' << detail::fmt_double(s.avg_wsr) << ',' << detail::fmt_double(s.min_wsr) << '\n';
  }
}

/// Pivot of WSR by attack (rows) and defense (columns).
inline void write_wsr_table_csv(std::ostream& os, const std::vector<RunRecord>& records) {
  std::vector<std::string> defenses, attacks;
  for (const auto& r : records) {
    if (std::find(defenses.begin(), defenses.end(), r.defense) == defenses.end()) defenses.push_back(r.defense);
    if (std::find(attacks.begin(), attacks.end(), r.attack) == attacks.end()) attacks.push_back(r.attack);
  }
  os << "attack";
  for (const auto& d : defenses) os << ",wsr_" << d << ",eacc_" << d;
  os << '\n';
  for (const auto& a : attacks) {
    os << a;
    for (const auto& d : defenses) {
      auto it = std::find_if(records.begin(), records.end(), [&](const RunRecord& r) { return r.attack == a && r.defense == d; });
      if (it == records.end() || !it->ok()) os << ",,";
      else os << ',' << detail::fmt_double(it->wsr) << ',' << detail::fmt_double(it->extracted_accuracy);
    }
    os << '\n';
  }
}

struct Sweep {
  std::string key;
  std::vector<std::string> values;
  std::vector<RunRecord> records;
};

/// One scenario per value of `key`, all else equal.
inline Sweep run_sweep(const ExperimentConfig& base, const std::string& key, const std::vector<std::string>& values,
                       std::size_t workers = 0, RunOptions opt = {}) {
  std::vector<ExperimentConfig> configs;
  for (const auto& v : values) {
    ExperimentConfig c = base;
    set_value(c, key, v);
    configs.push_back(c);
  }
  auto res = run_matrix(configs, workers, opt);
  return {key, values, std::move(res.records)};
}

inline void write_sweep_csv(std::ostream& os, const Sweep& sweep) {
  os << "value,protected_accuracy,extracted_accuracy,fidelity,wsr,p_exact,verdict\n";
  for (std::size_t i = 0; i < sweep.records.size(); ++i) {
    const auto& r = sweep.records[i];
    os << detail::unquote(sweep.values[i]) << ',' << detail::fmt_double(r.protected_accuracy) << ','
       << detail::fmt_double(r.extracted_accuracy) << ',' << detail::fmt_double(r.fidelity) << ','
       << detail::fmt_double(r.wsr) << ',' << detail::fmt_double(r.claim.p_exact) << ','
       << (r.claim.claim ? "claim" : "no-claim") << '\n';
  }
}

struct SvgSeries {
  std::string name;
  std::vector<double> y;
};

/// Minimal line chart, no external dependencies.
inline std::string svg_line_chart(const std::string& title, const std::string& xlabel, const std::vector<double>& x,
                                  const std::vector<SvgSeries>& series, bool log_y = false) {
  constexpr double W = 640, H = 400, L = 70, R = 20, T = 40, B = 50;
  if (x.empty()) throw std::invalid_argument("svg_line_chart: no points");
  auto ty = [&](double v) { return log_y ? std::log10(std::max(v, 1e-300)) : v; };
  double x0 = *std::min_element(x.begin(), x.end()), x1 = *std::max_element(x.begin(), x.end());
  double y0 = std::numeric_limits<double>::infinity(), y1 = -y0;
  for (const auto& s : series)
    for (double v : s.y) {
      y0 = std::min(y0, ty(v));
      y1 = std::max(y1, ty(v));
    }
  if (x1 == x0) x1 = x0 + 1;
  if (!(y1 > y0)) y1 = y0 + 1;
  auto px = [&](double v) { return L + (v - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double v) { return H - B - (ty(v) - y0) / (y1 - y0) * (H - T - B); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << title << "</text>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">" << xlabel << "</text>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = x0 + (x1 - x0) * i / 4.0, yv = y0 + (y1 - y0) * i / 4.0;
    os << "<text x=\"" << px(xv) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">" << detail::fmt_double(std::round(xv * 1000) / 1000) << "</text>\n";
    const double ylab = log_y ? std::pow(10.0, yv) : yv;
    os << "<text x=\"" << L - 6 << "\" y=\"" << H - B - (yv - y0) / (y1 - y0) * (H - T - B) + 4
       << "\" text-anchor=\"end\">" << detail::fmt_double(std::round(ylab * 1000) / 1000) << "</text>\n";
  }
  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* col = colors[s % 6];
    os << "<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < x.size() && i < series[s].y.size(); ++i) os << px(x[i]) << ',' << py(series[s].y[i]) << ' ';
    os << "\"/>\n";
    os << "<text x=\"" << W - R - 4 << "\" y=\"" << T + 14 * (s + 1) << "\" text-anchor=\"end\" fill=\"" << col << "\">" << series[s].name << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

inline std::vector<double> default_wsr_grid() {
  std::vector<double> g;
  for (int i = 1; i <= 100; ++i) g.push_back(i / 100.0);
  return g;
}

struct ReportOptions {
  double alpha = 1e-4;
  double beta = 0.01;
  bool svg = false;
  std::vector<Sweep> sweeps;
};

/// summary.csv, matrix.csv, wsr_table.csv, runs/<digest>.json,
/// claim_curve.csv and sweep_<key>.csv under `outdir`.
inline std::vector<fs::path> emit_reports(const std::vector<RunRecord>& records, const fs::path& outdir,
                                          const ReportOptions& opt = {}) {
  fs::create_directories(outdir / "runs");
  std::vector<fs::path> written;
  auto emit = [&](const fs::path& p, auto&& writer) {
    detail::write_file(p, writer);
    written.push_back(p);
  };
  emit(outdir / "summary.csv", [&](std::ostream& os) { write_summary_csv(os, records); });
  emit(outdir / "matrix.csv", [&](std::ostream& os) { write_matrix_csv(os, summarize(records)); });
  emit(outdir / "wsr_table.csv", [&](std::ostream& os) { write_wsr_table_csv(os, records); });
  for (const auto& r : records) {
    emit(outdir / "runs" / (r.digest + ".json"), [&](std::ostream& os) { os << r.to_json(true).dump(2) << '\n'; });
  }
  const auto grid = default_wsr_grid();
  const auto curve = verify::claim_curve(opt.alpha, opt.beta, grid);
  emit(outdir / "claim_curve.csv", [&](std::ostream& os) { verify::write_claim_curve_csv(os, curve); });
  if (opt.svg) {
    std::vector<double> n;
    for (const auto& [w, q] : curve) n.push_back(static_cast<double>(q));
    emit(outdir / "claim_curve.svg",
         [&](std::ostream& os) { os << svg_line_chart("Queries needed for a claim", "WSR", grid, {{"N", n}}, true); });
  }
  for (const auto& s : opt.sweeps) {
    std::string name = s.key;
    std::replace(name.begin(), name.end(), '.', '_');
    emit(outdir / ("sweep_" + name + ".csv"), [&](std::ostream& os) { write_sweep_csv(os, s); });
    if (opt.svg) {
      std::vector<double> x, acc, wsr;
      for (std::size_t i = 0; i < s.records.size(); ++i) {
        x.push_back(detail::parse_number<double>(s.key, s.values[i]));
        acc.push_back(s.records[i].protected_accuracy);
        wsr.push_back(s.records[i].wsr);
      }
      emit(outdir / ("sweep_" + name + ".svg"), [&](std::ostream& os) {
        os << svg_line_chart("Sweep of " + s.key, s.key, x, {{"protected accuracy", acc}, {"WSR", wsr}});
      });
    }
  }
  return written;
}

}  // namespace nht::harness
