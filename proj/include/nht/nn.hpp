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
#include <functional>
#include <istream>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace nht {

/// Raised when training produces a non-finite loss.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

// Four independent partial sums; fixed order so results are reproducible.
inline double dot(const double* a, const double* b, std::size_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

inline void axpy(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace detail

/// Affine layer; weights are stored out x in, row-major.
struct Dense {
  std::size_t in = 0;
  std::size_t out = 0;
  std::vector<double> weight;
  std::vector<double> bias;

  Dense() = default;
  Dense(std::size_t in_width, std::size_t out_width)
      : in(in_width), out(out_width), weight(in_width * out_width, 0.0), bias(out_width, 0.0) {}

  void apply(std::span<const double> x, std::span<double> y) const {
    for (std::size_t o = 0; o < out; ++o) {
      y[o] = detail::dot(weight.data() + o * in, x.data(), in) + bias[o];
    }
  }

  /// y = W^T delta
  void apply_transpose(std::span<const double> delta, std::span<double> y) const {
    std::fill(y.begin(), y.end(), 0.0);
    for (std::size_t o = 0; o < out; ++o) {
      if (delta[o] != 0.0) detail::axpy(delta[o], weight.data() + o * in, y.data(), in);
    }
  }

  void init_he(RandomSource& rng) {
    const double sd = std::sqrt(2.0 / static_cast<double>(in));
    for (double& w : weight) w = rng.normal(0.0, sd);
    std::fill(bias.begin(), bias.end(), 0.0);
  }

  friend bool operator==(const Dense&, const Dense&) = default;
};

/// Gradient buffers shaped like a list of Dense layers.
struct Gradients {
  std::vector<std::vector<double>> weight;
  std::vector<std::vector<double>> bias;

  Gradients() = default;
  explicit Gradients(const std::vector<Dense>& layers) {
    for (const auto& l : layers) {
      weight.emplace_back(l.weight.size(), 0.0);
      bias.emplace_back(l.bias.size(), 0.0);
    }
  }

  void zero() {
    for (auto& w : weight) std::fill(w.begin(), w.end(), 0.0);
    for (auto& b : bias) std::fill(b.begin(), b.end(), 0.0);
  }

  void accumulate(const Dense& layer, std::size_t index, std::span<const double> delta, std::span<const double> input) {
    auto& gw = weight[index];
    auto& gb = bias[index];
    for (std::size_t o = 0; o < layer.out; ++o) {
      if (delta[o] == 0.0) continue;
      detail::axpy(delta[o], input.data(), gw.data() + o * layer.in, layer.in);
      gb[o] += delta[o];
    }
  }

  double squared_norm() const {
    double s = 0.0;
    for (const auto& w : weight)
      for (double v : w) s += v * v;
    for (const auto& b : bias)
      for (double v : b) s += v * v;
    return s;
  }
};

enum class LossKind { hard_ce, soft_ce, mse };

/// Multilayer perceptron: ReLU on hidden layers, identity on the output.
/// "Features" are the post-activation values of the last hidden layer.
class Mlp {
 public:
  Mlp() = default;

  /// Zero-initialised network. widths = {input, hidden..., output}.
  explicit Mlp(std::vector<std::size_t> widths) : widths_(std::move(widths)) {
    if (widths_.size() < 3) throw std::invalid_argument("Mlp: need input, at least one hidden and an output width");
    for (std::size_t w : widths_)
      if (w == 0) throw std::invalid_argument("Mlp: zero width");
    for (std::size_t i = 0; i + 1 < widths_.size(); ++i) layers_.emplace_back(widths_[i], widths_[i + 1]);
  }

  /// He-initialised network.
  Mlp(std::vector<std::size_t> widths, RandomSource& rng) : Mlp(std::move(widths)) {
    for (auto& l : layers_) l.init_he(rng);
  }

  const std::vector<std::size_t>& widths() const noexcept { return widths_; }
  std::size_t input_width() const { return widths_.front(); }
  std::size_t output_width() const { return widths_.back(); }
  std::size_t feature_width() const { return widths_[widths_.size() - 2]; }

  const std::vector<Dense>& layers() const noexcept { return layers_; }
  std::vector<Dense>& layers() noexcept { return layers_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.weight.size() + l.bias.size();
    return n;
  }

  friend bool operator==(const Mlp&, const Mlp&) = default;

 private:
  std::vector<std::size_t> widths_;
  std::vector<Dense> layers_;
};

/// Per-sample activations: acts[0] is the input, acts[L] the logits.
struct Activations {
  std::vector<std::vector<double>> acts;

  std::span<const double> features() const { return acts[acts.size() - 2]; }
  std::span<const double> logits() const { return acts.back(); }
};

inline void forward_sample(const Mlp& model, std::span<const double> x, Activations& cache) {
  if (x.size() != model.input_width()) throw std::invalid_argument("forward: input width mismatch");
  const auto& layers = model.layers();
  cache.acts.resize(layers.size() + 1);
  cache.acts[0].assign(x.begin(), x.end());
  for (std::size_t l = 0; l < layers.size(); ++l) {
    auto& y = cache.acts[l + 1];
    y.resize(layers[l].out);
    layers[l].apply(cache.acts[l], y);
    if (l + 1 < layers.size()) {
      for (double& v : y) v = v > 0.0 ? v : 0.0;
    }
  }
}

inline Activations forward_sample(const Mlp& model, std::span<const double> x) {
  Activations a;
  forward_sample(model, x, a);
  return a;
}

struct ForwardOut {
  Tensor features;  // n x H
  Tensor logits;    // n x K
};

/// Batched forward. Row i is computed by the same routine as a single call,
/// so batched and per-sample results agree bit for bit.
inline ForwardOut forward(const Mlp& model, const Tensor& batch) {
  if (batch.rank() != 2 || batch.cols() != model.input_width()) {
    throw std::invalid_argument("forward: batch must be n x input_width");
  }
  const std::size_t n = batch.rows();
  ForwardOut out{Tensor::matrix(n, model.feature_width()), Tensor::matrix(n, model.output_width())};
  Activations cache;
  for (std::size_t r = 0; r < n; ++r) {
    forward_sample(model, batch.row(r), cache);
    std::copy(cache.features().begin(), cache.features().end(), out.features.row(r).begin());
    std::copy(cache.logits().begin(), cache.logits().end(), out.logits.row(r).begin());
  }
  return out;
}

inline std::vector<double> logits_of(const Mlp& model, std::span<const double> x) {
  auto a = forward_sample(model, x);
  return a.acts.back();
}

/// Backpropagates one sample. `dlogits` is dLoss/dlogits; `dfeatures`, if
/// non-empty, is an extra gradient arriving at the last hidden activation.
/// Accumulates parameter gradients into `grads` (if non-null) and writes
/// dLoss/dinput into `dinput` (if non-empty).
inline void backward_sample(const Mlp& model, const Activations& cache, std::span<const double> dlogits,
                            std::span<const double> dfeatures, Gradients* grads, std::span<double> dinput = {}) {
  const auto& layers = model.layers();
  const std::size_t L = layers.size();
  std::vector<double> delta(dlogits.begin(), dlogits.end());
  std::vector<double> upstream;
  for (std::size_t li = L; li-- > 0;) {
    const Dense& layer = layers[li];
    if (grads) grads->accumulate(layer, li, delta, cache.acts[li]);
    if (li == 0 && dinput.empty()) break;
    upstream.resize(layer.in);
    layer.apply_transpose(delta, upstream);
    if (li == 0) {
      std::copy(upstream.begin(), upstream.end(), dinput.begin());
      break;
    }
    if (li == L - 1 && !dfeatures.empty()) {
      for (std::size_t h = 0; h < upstream.size(); ++h) upstream[h] += dfeatures[h];
    }
    // ReLU derivative taken as 0 at the kink.
    const auto& act = cache.acts[li];
    for (std::size_t h = 0; h < upstream.size(); ++h) {
      if (!(act[h] > 0.0)) upstream[h] = 0.0;
    }
    delta.swap(upstream);
  }
}

/// Cross-entropy of logits against a probability row, and its logit gradient
/// softmax(logits) - target (scaled by `scale`).
inline double softmax_ce(std::span<const double> logits, std::span<const double> target, std::span<double> dlogits,
                         double scale) {
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double v : logits) z += std::exp(v - m);
  const double log_z = m + std::log(z);
  double loss = 0.0;
  for (std::size_t k = 0; k < logits.size(); ++k) {
    const double logp = logits[k] - log_z;
    if (target[k] != 0.0) loss -= target[k] * logp;
    dlogits[k] = scale * (std::exp(logp) - target[k]);
  }
  return loss;
}

inline double softmax_ce_index(std::span<const double> logits, std::size_t label, std::span<double> dlogits,
                               double scale) {
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double v : logits) z += std::exp(v - m);
  const double log_z = m + std::log(z);
  for (std::size_t k = 0; k < logits.size(); ++k) {
    dlogits[k] = scale * (std::exp(logits[k] - log_z) - (k == label ? 1.0 : 0.0));
  }
  return log_z - logits[label];
}

/// Training targets: class indices (hard_ce), probability rows (soft_ce) or
/// regression rows (mse).
struct Targets {
  LossKind kind = LossKind::hard_ce;
  std::vector<std::size_t> labels;
  Tensor rows;

  static Targets hard(std::vector<std::size_t> labels) { return {LossKind::hard_ce, std::move(labels), {}}; }
  static Targets soft(Tensor probs) { return {LossKind::soft_ce, {}, std::move(probs)}; }
  static Targets regression(Tensor values) { return {LossKind::mse, {}, std::move(values)}; }

  std::size_t size() const { return kind == LossKind::hard_ce ? labels.size() : (rows.empty() ? 0 : rows.rows()); }
};

inline void validate_targets(const Mlp& model, const Targets& t) {
  const std::size_t K = model.output_width();
  if (t.kind == LossKind::hard_ce) {
    for (std::size_t y : t.labels)
      if (y >= K) throw std::invalid_argument("targets: class index out of range");
    return;
  }
  if (t.rows.rank() != 2 || t.rows.cols() != K) throw std::invalid_argument("targets: rows must be n x K");
  if (t.kind == LossKind::soft_ce) {
    for (std::size_t r = 0; r < t.rows.rows(); ++r) {
      double s = 0.0;
      for (double p : t.rows.row(r)) {
        if (p < 0.0) throw std::invalid_argument("targets: negative probability");
        s += p;
      }
      if (std::abs(s - 1.0) > 1e-9) throw std::invalid_argument("targets: soft target row not normalised");
    }
  }
}

/// Loss of one sample plus its logit gradient (scaled).
inline double sample_loss(const Targets& t, std::size_t index, std::span<const double> logits,
                          std::span<double> dlogits, double scale) {
  switch (t.kind) {
    case LossKind::hard_ce:
      return softmax_ce_index(logits, t.labels[index], dlogits, scale);
    case LossKind::soft_ce:
      return softmax_ce(logits, t.rows.row(index), dlogits, scale);
    case LossKind::mse: {
      auto y = t.rows.row(index);
      double loss = 0.0;
      const double k = static_cast<double>(logits.size());
      for (std::size_t i = 0; i < logits.size(); ++i) {
        const double diff = logits[i] - y[i];
        loss += diff * diff / k;
        dlogits[i] = scale * 2.0 * diff / k;
      }
      return loss;
    }
  }
  return 0.0;
}

struct LossAndGrad {
  double loss = 0.0;
  Gradients grads;
};

/// Mean loss over the selected rows and its exact gradient.
inline LossAndGrad loss_and_grad(const Mlp& model, const Tensor& batch, const Targets& targets,
                                 std::span<const std::size_t> rows) {
  LossAndGrad out{0.0, Gradients(model.layers())};
  if (rows.empty()) return out;
  const double scale = 1.0 / static_cast<double>(rows.size());
  Activations cache;
  std::vector<double> dlogits(model.output_width());
  for (std::size_t r : rows) {
    forward_sample(model, batch.row(r), cache);
    out.loss += sample_loss(targets, r, cache.logits(), dlogits, scale) * scale;
    backward_sample(model, cache, dlogits, {}, &out.grads);
  }
  return out;
}

inline LossAndGrad grad(const Mlp& model, const Tensor& batch, const Targets& targets) {
  if (batch.rank() != 2 || batch.cols() != model.input_width()) throw std::invalid_argument("grad: shape mismatch");
  if (targets.size() != batch.rows()) throw std::invalid_argument("grad: target count mismatch");
  validate_targets(model, targets);
  std::vector<std::size_t> rows(batch.rows());
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  return loss_and_grad(model, batch, targets, rows);
}

/// Sign of d CE(logits(x), target_class) / dx; exact zeros stay zero.
inline std::vector<double> input_grad_sign(const Mlp& model, std::span<const double> x, std::size_t target_class) {
  if (target_class >= model.output_width()) throw std::invalid_argument("input_grad_sign: class out of range");
  auto cache = forward_sample(model, x);
  std::vector<double> dlogits(model.output_width());
  softmax_ce_index(cache.logits(), target_class, dlogits, 1.0);
  std::vector<double> dx(model.input_width());
  backward_sample(model, cache, dlogits, {}, nullptr, dx);
  for (double& g : dx) g = (g > 0.0) - (g < 0.0);
  return dx;
}

/// Fraction of rows with argmax(logits) == label.
inline double accuracy(const Mlp& model, const Tensor& data, std::span<const std::size_t> labels) {
  if (data.rank() != 2 || data.rows() != labels.size()) throw std::invalid_argument("accuracy: shape mismatch");
  if (labels.empty()) return 0.0;
  Activations cache;
  std::size_t hit = 0;
  for (std::size_t r = 0; r < data.rows(); ++r) {
    forward_sample(model, data.row(r), cache);
    hit += argmax(cache.logits()) == labels[r];
  }
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

inline std::vector<std::size_t> predict_labels(const Mlp& model, const Tensor& data) {
  std::vector<std::size_t> out(data.rows());
  Activations cache;
  for (std::size_t r = 0; r < data.rows(); ++r) {
    forward_sample(model, data.row(r), cache);
    out[r] = argmax(cache.logits());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  double learning_rate = 0.05;
  std::size_t lr_decay_step = 0;  // epochs between decays; 0 disables
  double lr_decay_factor = 0.1;
  double momentum = 0.9;
  std::uint64_t seed = 1;

  void validate() const {
    if (!(learning_rate >= 0.0)) throw std::invalid_argument("TrainConfig: learning rate must be >= 0");
    if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch size must be >= 1");
  }

  double rate_at(std::size_t epoch) const {
    if (lr_decay_step == 0) return learning_rate;
    return learning_rate * std::pow(lr_decay_factor, static_cast<double>(epoch / lr_decay_step));
  }
};

/// Extra loss term evaluated on every minibatch. It adds its gradient with
/// respect to the model into `grads`, updates any parameters it owns with
/// `lr`, and returns its (already weighted) loss contribution.
using AuxiliaryLoss =
    std::function<double(const Mlp& model, std::span<const std::size_t> rows, Gradients& grads, double lr)>;

struct TrainResult {
  Mlp model;
  std::vector<double> loss_trace;  // mean training loss per epoch
};

/// Minibatch SGD with momentum. Deterministic in (model, data, targets, config).
inline TrainResult train(Mlp model, const Tensor& data, const Targets& targets, const TrainConfig& config,
                         const AuxiliaryLoss& aux = {}) {
  config.validate();
  if (data.rank() != 2 || data.cols() != model.input_width()) throw std::invalid_argument("train: shape mismatch");
  if (targets.size() != data.rows()) throw std::invalid_argument("train: target count mismatch");
  validate_targets(model, targets);

  TrainResult result;
  const std::size_t n = data.rows();
  if (n == 0) {
    result.model = std::move(model);
    return result;
  }
  RandomSource rng = RandomSource(config.seed).derive("train/shuffle");
  Gradients velocity(model.layers());
  Gradients g(model.layers());
  Activations cache;
  std::vector<double> dlogits(model.output_width());

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = config.rate_at(epoch);
    auto order = rng.permutation(n);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < n; start += config.batch_size) {
      const std::size_t stop = std::min(n, start + config.batch_size);
      std::span<const std::size_t> rows(order.data() + start, stop - start);
      const double scale = 1.0 / static_cast<double>(rows.size());
      g.zero();
      double batch_loss = 0.0;
      for (std::size_t r : rows) {
        forward_sample(model, data.row(r), cache);
        batch_loss += sample_loss(targets, r, cache.logits(), dlogits, scale) * scale;
        backward_sample(model, cache, dlogits, {}, &g);
      }
      if (aux) batch_loss += aux(model, rows, g, lr);
      if (!std::isfinite(batch_loss)) {
        throw DivergenceError("train: non-finite loss at epoch " + std::to_string(epoch));
      }
      epoch_loss += batch_loss * static_cast<double>(rows.size());

      auto& layers = model.layers();
      for (std::size_t li = 0; li < layers.size(); ++li) {
        auto& w = layers[li].weight;
        auto& vw = velocity.weight[li];
        const auto& gw = g.weight[li];
        for (std::size_t i = 0; i < w.size(); ++i) {
          vw[i] = config.momentum * vw[i] - lr * gw[i];
          w[i] += vw[i];
        }
        auto& b = layers[li].bias;
        auto& vb = velocity.bias[li];
        const auto& gb = g.bias[li];
        for (std::size_t i = 0; i < b.size(); ++i) {
          vb[i] = config.momentum * vb[i] - lr * gb[i];
          b[i] += vb[i];
        }
      }
    }
    result.loss_trace.push_back(epoch_loss / static_cast<double>(n));
  }
  result.model = std::move(model);
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints: "NHTM" | version u32 | activation tag | widths | per layer W, b
// ---------------------------------------------------------------------------

inline void write_model(std::ostream& os, const Mlp& model) {
  os.write("NHTM", 4);
  io::put<std::uint32_t>(os, 1);
  io::put_string(os, "relu");
  io::put<std::uint32_t>(os, static_cast<std::uint32_t>(model.widths().size()));
  for (std::size_t w : model.widths()) io::put<std::uint64_t>(os, w);
  for (const auto& l : model.layers()) {
    io::write_tensor(os, Tensor({l.out, l.in}, l.weight));
    io::write_tensor(os, Tensor({l.out}, l.bias));
  }
  if (!os) throw std::runtime_error("write_model: stream failure");
}

inline Mlp read_model(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string_view(magic, 4) != "NHTM") throw std::runtime_error("read_model: bad magic");
  if (io::get<std::uint32_t>(is) != 1) throw std::runtime_error("read_model: unsupported version");
  if (io::get_string(is) != "relu") throw std::runtime_error("read_model: unsupported activation");
  const auto count = io::get<std::uint32_t>(is);
  if (count < 3 || count > 64) throw std::runtime_error("read_model: bad width count");
  std::vector<std::size_t> widths(count);
  for (auto& w : widths) w = static_cast<std::size_t>(io::get<std::uint64_t>(is));
  Mlp model(widths);
  for (auto& l : model.layers()) {
    Tensor w = io::read_tensor(is);
    Tensor b = io::read_tensor(is);
    if (w.shape() != std::vector<std::size_t>{l.out, l.in} || b.shape() != std::vector<std::size_t>{l.out}) {
      throw std::runtime_error("read_model: parameter shape mismatch");
    }
    l.weight = w.data();
    l.bias = b.data();
  }
  return model;
}

}  // namespace nht
