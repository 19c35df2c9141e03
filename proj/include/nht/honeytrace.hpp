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
#include <nht/digest.hpp>
#include <nht/nn.hpp>
#include <nht/numerics.hpp>

#include <atomic>
#include <cmath>
#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace nht {

enum class LabelMode { soft, hard };

/// Which representation the similarity score compares.
enum class FeatureSource { penultimate, logits };

inline const char* to_string(LabelMode m) { return m == LabelMode::soft ? "soft" : "hard"; }

struct ProtectionParams {
  double margin_d = 0.85;
  double alpha = 2.0;
  double beta = 3.0;
  double confidence_threshold = 0.95;
  /// Upper bound of the uniform flip jitter. Unset: 5% of the smallest
  /// reference-logit gap, computed when the protected model is built.
  std::optional<double> epsilon_scale;
  double epsilon_fraction = 0.05;
  LabelMode mode = LabelMode::hard;
  FeatureSource features = FeatureSource::penultimate;

  void validate() const {
    if (!(alpha > 1.0)) throw std::invalid_argument("ProtectionParams: alpha must be > 1");
    if (!(beta > 1.0)) throw std::invalid_argument("ProtectionParams: beta must be > 1");
    if (!(confidence_threshold > 0.0 && confidence_threshold <= 1.0)) {
      throw std::invalid_argument("ProtectionParams: confidence threshold must be in (0, 1]");
    }
    if (epsilon_scale && !(*epsilon_scale >= 0.0)) throw std::invalid_argument("ProtectionParams: epsilon_scale < 0");
    if (!(epsilon_fraction >= 0.0 && epsilon_fraction < 1.0)) {
      throw std::invalid_argument("ProtectionParams: epsilon_fraction must be in [0, 1)");
    }
    if (!std::isfinite(margin_d)) throw std::invalid_argument("ProtectionParams: margin_d must be finite");
  }
};

// ---------------------------------------------------------------------------
// Pipeline stages
// ---------------------------------------------------------------------------

/// Mean squared difference per feature dimension.
inline double feature_mse(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t h = 0; h < a.size(); ++h) {
    const double d = a[h] - b[h];
    s += d * d;
  }
  return s / static_cast<double>(a.size());
}

/// s = clip01(d - mean_i mse(f_x, f_{W_i})).
inline double similarity(std::span<const double> features_x, const Tensor& wm_features, double margin_d) {
  if (wm_features.rank() != 2 || wm_features.rows() == 0) throw std::invalid_argument("similarity: no watermark features");
  if (wm_features.cols() != features_x.size()) throw std::invalid_argument("similarity: feature width mismatch");
  double dist = 0.0;
  for (std::size_t i = 0; i < wm_features.rows(); ++i) dist += feature_mse(features_x, wm_features.row(i));
  dist /= static_cast<double>(wm_features.rows());
  return clip01(margin_d - dist);
}

/// Squares s when the clean prediction is already confident.
inline double confidence_gate(double s, std::span<const double> clean_probs, double threshold) {
  const double top = *std::max_element(clean_probs.begin(), clean_probs.end());
  return top >= threshold ? s * s : s;
}

inline std::vector<double> mix_logits(std::span<const double> l_ori, std::span<const double> l_ref, double s,
                                      double alpha) {
  if (l_ori.size() != l_ref.size()) throw std::invalid_argument("mix_logits: length mismatch");
  if (!(s >= 0.0 && s <= 1.0)) throw std::invalid_argument("mix_logits: s must be in [0, 1]");
  const double w = std::pow(s, alpha);
  std::vector<double> out(l_ori.size());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = (1.0 - w) * l_ori[k] + w * l_ref[k];
  return out;
}

inline double top_gap(std::span<const double> logits) {
  const std::size_t top = argmax(logits);
  double runner = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < logits.size(); ++k)
    if (k != top) runner = std::max(runner, logits[k]);
  return logits[top] - runner;
}

struct FlipOutcome {
  std::vector<double> logits;
  bool flipped = false;
};

/// With probability s^beta replaces the logits by l_ref + eps, eps uniform
/// in [0, eps_scale) per class; otherwise returns l_mix untouched.
inline FlipOutcome flip_label(std::span<const double> l_mix, std::span<const double> l_ref, double s, double beta,
                              double eps_scale, RandomSource& rng) {
  if (!(s >= 0.0 && s <= 1.0)) throw std::invalid_argument("flip_label: s must be in [0, 1]");
  if (l_ref.size() > 1 && !(eps_scale < top_gap(l_ref))) {
    throw std::invalid_argument("flip_label: eps_scale could change the reference argmax");
  }
  const double p = std::pow(s, beta);
  if (!rng.bernoulli(p)) return {{l_mix.begin(), l_mix.end()}, false};
  FlipOutcome out{{l_ref.begin(), l_ref.end()}, true};
  for (double& v : out.logits) v += eps_scale * rng.uniform();
  return out;
}

struct PredictionOut {
  std::vector<double> logits;
  std::vector<double> probs;
  std::size_t label = 0;
  double similarity = 0.0;
  bool flipped = false;
  LabelMode mode = LabelMode::hard;

  /// What the caller is allowed to see: probabilities in soft mode, a
  /// one-hot row in hard mode.
  std::vector<double> exposed() const {
    if (mode == LabelMode::soft) return probs;
    std::vector<double> one_hot(probs.size(), 0.0);
    one_hot[label] = 1.0;
    return one_hot;
  }
};

inline PredictionOut make_prediction(std::vector<double> logits, LabelMode mode) {
  PredictionOut out;
  out.probs = softmax(logits);
  out.label = argmax(logits);
  out.logits = std::move(logits);
  out.mode = mode;
  return out;
}

// ---------------------------------------------------------------------------
// Protected model
// ---------------------------------------------------------------------------

/// Registered watermarks with their precomputed representations.
struct WatermarkState {
  WatermarkSet set;
  Tensor features;  // n x H (or n x K for FeatureSource::logits)
};

/// Wraps an immutable inner model with the training-free watermark pipeline.
/// The watermark set can be replaced or removed at any time; readers see
/// either the old or the new state, never a mixture.
class ProtectedModel {
 public:
  ProtectedModel(std::shared_ptr<const Mlp> model, const WatermarkSet& wm, const Dataset& reference_data,
                 ProtectionParams params, std::uint64_t seed)
      : model_(std::move(model)), params_(params), rng_(RandomSource(seed).derive("protect")) {
    params_.validate();
    if (!model_) throw std::invalid_argument("ProtectedModel: null model");
    build_reference_pool(reference_data, wm.target);
    set_watermarks(wm);
  }

  const Mlp& model() const { return *model_; }
  std::shared_ptr<const Mlp> model_ptr() const { return model_; }
  const ProtectionParams& params() const { return params_; }
  double epsilon_scale() const { return epsilon_scale_; }
  std::size_t target() const { return target_; }
  const Tensor& reference_pool() const { return reference_pool_; }

  /// Recomputes watermark features from the unchanged inner model.
  void set_watermarks(const WatermarkSet& wm) {
    if (wm.dim() != model_->input_width()) throw std::invalid_argument("ProtectedModel: watermark dimension mismatch");
    if (wm.count() == 0) throw std::invalid_argument("ProtectedModel: empty watermark set");
    if (wm.target != target_) throw std::invalid_argument("ProtectedModel: watermark target differs from reference pool");
    auto state = std::make_shared<WatermarkState>();
    state->set = wm;
    auto fw = forward(*model_, wm.triggers);
    state->features = params_.features == FeatureSource::penultimate ? std::move(fw.features) : std::move(fw.logits);
    std::lock_guard lock(mu_);
    state_ = std::move(state);
  }

  void clear_watermarks() {
    std::lock_guard lock(mu_);
    state_.reset();
  }

  std::shared_ptr<const WatermarkState> watermarks() const {
    std::lock_guard lock(mu_);
    return state_;
  }

  /// Full pipeline with an explicit stream.
  PredictionOut protect(std::span<const double> query, RandomSource& rng) const {
    return protect_with(watermarks(), query, rng);
  }

  /// Full pipeline; the stream is derived from a per-call sequence number.
  PredictionOut protect(std::span<const double> query) const {
    RandomSource rng = rng_.derive(sequence_.fetch_add(1, std::memory_order_relaxed));
    return protect(query, rng);
  }

  PredictionOut protect_with(const std::shared_ptr<const WatermarkState>& state, std::span<const double> query,
                             RandomSource& rng) const {
    const Activations act = forward_sample(*model_, query);
    std::vector<double> l_ori(act.logits().begin(), act.logits().end());
    if (!state) return make_prediction(std::move(l_ori), params_.mode);

    auto rep = params_.features == FeatureSource::penultimate ? act.features() : act.logits();
    double s = similarity(rep, state->features, params_.margin_d);
    s = confidence_gate(s, softmax(l_ori), params_.confidence_threshold);

    const auto ref_row = reference_pool_.row(rng.below(reference_pool_.rows()));
    const std::vector<double> l_ref = logits_of(*model_, ref_row);
    auto l_mix = mix_logits(l_ori, l_ref, s, params_.alpha);
    auto flip = flip_label(l_mix, l_ref, s, params_.beta, epsilon_scale_, rng);

    PredictionOut out = make_prediction(std::move(flip.logits), params_.mode);
    out.similarity = s;
    out.flipped = flip.flipped;
    return out;
  }

 private:
  void build_reference_pool(const Dataset& data, std::size_t target) {
    target_ = target;
    if (target >= model_->output_width()) throw std::invalid_argument("ProtectedModel: target out of range");
    std::vector<std::vector<double>> rows;
    double min_gap = std::numeric_limits<double>::infinity();
    Activations cache;
    for (std::size_t i = 0; i < data.size(); ++i) {
      if (data.labels[i] != target) continue;
      forward_sample(*model_, data.inputs.row(i), cache);
      if (argmax(cache.logits()) != target) continue;
      rows.emplace_back(data.inputs.row(i).begin(), data.inputs.row(i).end());
      min_gap = std::min(min_gap, top_gap(cache.logits()));
    }
    if (rows.empty()) throw std::invalid_argument("ProtectedModel: no reference sample is classified as the target");
    reference_pool_ = stack_rows(rows);
    if (params_.epsilon_scale) {
      if (!(*params_.epsilon_scale < min_gap)) {
        throw std::invalid_argument("ProtectedModel: epsilon_scale exceeds the reference logit gap");
      }
      epsilon_scale_ = *params_.epsilon_scale;
    } else {
      epsilon_scale_ = params_.epsilon_fraction * min_gap;
    }
  }

  std::shared_ptr<const Mlp> model_;
  ProtectionParams params_;
  RandomSource rng_;
  std::size_t target_ = 0;
  Tensor reference_pool_;
  double epsilon_scale_ = 0.0;

  mutable std::mutex mu_;
  std::shared_ptr<const WatermarkState> state_;
  mutable std::atomic<std::uint64_t> sequence_{0};
};

// ---------------------------------------------------------------------------
// DAWN baseline: keyed per-query label flipping with a record log
// ---------------------------------------------------------------------------

struct DawnRecord {
  std::string query_digest;  // hex
  std::size_t flipped_label = 0;
};

struct DawnDecision {
  bool flipped = false;
  std::size_t label = 0;
  std::string digest;
};

/// Deterministic in (key, query bytes). The flipped label is never the
/// original argmax.
inline DawnDecision dawn_decide(std::span<const double> query, std::size_t original_label, std::size_t num_classes,
                                double flip_ratio, std::span<const unsigned char> key) {
  if (!(flip_ratio >= 0.0 && flip_ratio <= 1.0)) throw std::invalid_argument("dawn: flip_ratio must be in [0, 1]");
  if (num_classes < 2) throw std::invalid_argument("dawn: need at least two classes");
  const auto bytes = as_bytes(query);
  const auto h = keyed_hash(key, bytes);
  DawnDecision d;
  d.digest = to_hex(std::span(h).first(16));
  const double u = static_cast<double>(load_u64(std::span(h).subspan(0, 8)) >> 11) * 0x1.0p-53;
  d.flipped = u < flip_ratio;
  d.label = original_label;
  if (d.flipped) {
    const std::uint64_t pick = load_u64(std::span(h).subspan(8, 8));
    d.label = (original_label + 1 + pick % (num_classes - 1)) % num_classes;
  }
  return d;
}

/// Applies DAWN to already computed logits. A flipped query has its top
/// logit swapped with the chosen wrong class, so soft outputs stay plausible.
inline PredictionOut dawn_protect(std::span<const double> logits, std::span<const double> query, double flip_ratio,
                                  std::span<const unsigned char> key, LabelMode mode,
                                  std::vector<DawnRecord>* log = nullptr) {
  const std::size_t orig = argmax(logits);
  auto d = dawn_decide(query, orig, logits.size(), flip_ratio, key);
  std::vector<double> out(logits.begin(), logits.end());
  if (d.flipped) {
    std::swap(out[orig], out[d.label]);
    // Break an exact tie in favour of the flipped label.
    if (argmax(out) != d.label) out[d.label] = std::nextafter(out[d.label], std::numeric_limits<double>::infinity());
    if (log) log->push_back({d.digest, d.label});
  }
  PredictionOut p = make_prediction(std::move(out), mode);
  p.flipped = d.flipped;
  return p;
}

// ---------------------------------------------------------------------------
// Endpoints as seen by an attacker
// ---------------------------------------------------------------------------

/// Black-box prediction service. query() returns what the caller may see:
/// a probability row (soft mode) or a one-hot row (hard mode).
class Endpoint {
 public:
  virtual ~Endpoint() = default;
  virtual std::vector<double> query(std::span<const double> x) = 0;
  virtual std::size_t num_classes() const = 0;
  virtual std::size_t input_width() const = 0;
  std::size_t calls() const { return calls_; }

 protected:
  std::size_t calls_ = 0;
};

class PlainEndpoint final : public Endpoint {
 public:
  PlainEndpoint(std::shared_ptr<const Mlp> model, LabelMode mode) : model_(std::move(model)), mode_(mode) {}

  std::vector<double> query(std::span<const double> x) override {
    ++calls_;
    return make_prediction(logits_of(*model_, x), mode_).exposed();
  }
  std::size_t num_classes() const override { return model_->output_width(); }
  std::size_t input_width() const override { return model_->input_width(); }

 private:
  std::shared_ptr<const Mlp> model_;
  LabelMode mode_;
};

class HoneytraceEndpoint final : public Endpoint {
 public:
  HoneytraceEndpoint(std::shared_ptr<const ProtectedModel> pm, std::uint64_t seed)
      : pm_(std::move(pm)), rng_(RandomSource(seed).derive("honeytrace-endpoint")) {}

  std::vector<double> query(std::span<const double> x) override {
    RandomSource r = rng_.derive(calls_++);
    auto out = pm_->protect(x, r);
    flips_ += out.flipped;
    return out.exposed();
  }
  std::size_t num_classes() const override { return pm_->model().output_width(); }
  std::size_t input_width() const override { return pm_->model().input_width(); }
  std::size_t flips() const { return flips_; }

 private:
  std::shared_ptr<const ProtectedModel> pm_;
  RandomSource rng_;
  std::size_t flips_ = 0;
};

class DawnEndpoint final : public Endpoint {
 public:
  DawnEndpoint(std::shared_ptr<const Mlp> model, double flip_ratio, std::vector<unsigned char> key, LabelMode mode)
      : model_(std::move(model)), ratio_(flip_ratio), key_(std::move(key)), mode_(mode) {}

  std::vector<double> query(std::span<const double> x) override {
    ++calls_;
    auto logits = logits_of(*model_, x);
    auto out = dawn_protect(logits, x, ratio_, key_, mode_, &log_);
    if (out.flipped) flipped_queries_.emplace_back(x.begin(), x.end());
    return out.exposed();
  }
  std::size_t num_classes() const override { return model_->output_width(); }
  std::size_t input_width() const override { return model_->input_width(); }

  const std::vector<DawnRecord>& log() const { return log_; }
  /// Inputs of the recorded (flipped) queries, aligned with log().
  const std::vector<std::vector<double>>& flipped_queries() const { return flipped_queries_; }

 private:
  std::shared_ptr<const Mlp> model_;
  double ratio_;
  std::vector<unsigned char> key_;
  LabelMode mode_;
  std::vector<DawnRecord> log_;
  std::vector<std::vector<double>> flipped_queries_;
};

}  // namespace nht
