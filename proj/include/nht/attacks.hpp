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
#include <nht/honeytrace.hpp>
#include <nht/nn.hpp>
#include <nht/numerics.hpp>

#include <cmath>
#include <cstdint>
#include <functional>
#include <istream>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace nht::attacks {

/// Queries sent and answers received. `recovered` is what the attacker
/// trains on after any post-processing.
struct AttackTrace {
  std::string kind;
  std::uint64_t seed = 0;
  std::size_t budget = 0;
  Tensor queries;    // n x D
  Tensor raw;        // n x K
  Tensor recovered;  // n x K
  Tensor augmented;  // (n * n_aug) x K responses, smoothing only

  std::size_t size() const { return queries.empty() ? 0 : queries.rows(); }
};

inline Tensor one_hot_rows(const Tensor& rows) {
  Tensor out = Tensor::matrix(rows.rows(), rows.cols());
  for (std::size_t r = 0; r < rows.rows(); ++r) out.at(r, argmax(rows.row(r))) = 1.0;
  return out;
}

inline void query_rows(Endpoint& endpoint, const Tensor& queries, Tensor& responses) {
  responses = Tensor::matrix(queries.rows(), endpoint.num_classes());
  for (std::size_t r = 0; r < queries.rows(); ++r) {
    auto y = endpoint.query(queries.row(r));
    std::copy(y.begin(), y.end(), responses.row(r).begin());
  }
}

// ---------------------------------------------------------------------------
// Query strategies
// ---------------------------------------------------------------------------

/// Random sample (without replacement) of the attacker's pool.
inline AttackTrace knockoff_query(Endpoint& endpoint, const Dataset& pool, std::size_t budget, std::uint64_t seed) {
  if (budget > pool.size()) throw std::invalid_argument("knockoff_query: budget exceeds pool size");
  RandomSource rng = RandomSource(seed).derive("knockoff");
  auto order = rng.permutation(pool.size());
  order.resize(budget);
  AttackTrace t{"knockoff", seed, budget, pool.subset(order).inputs, {}, {}, {}};
  query_rows(endpoint, t.queries, t.raw);
  t.recovered = t.raw;
  return t;
}

/// Soft-label surrogate training on whatever the trace currently holds.
inline Targets trace_targets(const Tensor& responses) {
  Tensor rows = responses;
  for (std::size_t r = 0; r < rows.rows(); ++r) {
    auto v = rows.row(r);
    double s = 0.0;
    for (double& x : v) {
      x = std::max(0.0, x);
      s += x;
    }
    if (s <= 0.0) {
      std::fill(v.begin(), v.end(), 1.0 / static_cast<double>(v.size()));
    } else {
      for (double& x : v) x /= s;
    }
  }
  return Targets::soft(std::move(rows));
}

struct SurrogateConfig {
  std::vector<std::size_t> hidden = {128, 64};
  TrainConfig train{};
  std::uint64_t init_seed = 11;

  Mlp fresh(std::size_t input, std::size_t classes) const {
    std::vector<std::size_t> widths{input};
    widths.insert(widths.end(), hidden.begin(), hidden.end());
    widths.push_back(classes);
    RandomSource rng = RandomSource(init_seed).derive("surrogate/init");
    return Mlp(widths, rng);
  }
};

struct JbdaConfig {
  double step = 0.01;          // mu
  std::size_t steps = 8;       // T
  std::size_t budget = 5000;
  std::size_t rounds_per_retrain = 1;
  SurrogateConfig surrogate{{128, 64}, TrainConfig{10, 64, 0.05, 0, 0.1, 0.9, 5}, 13};
  std::uint64_t seed = 3;
};

/// Jacobian-based augmentation: each round perturbs every current row T
/// times along the sign of the surrogate's input gradient toward a random
/// class, clips to [0, 1], and queries the result, until the budget is used.
inline AttackTrace jbda_tr_query(Endpoint& endpoint, const Dataset& seed_pool, const JbdaConfig& cfg) {
  if (cfg.budget < seed_pool.size()) throw std::invalid_argument("jbda_tr_query: budget below seed pool size");
  const std::size_t K = endpoint.num_classes();
  const std::size_t D = endpoint.input_width();
  RandomSource rng = RandomSource(cfg.seed).derive("jbda-tr");

  std::vector<std::vector<double>> queries;
  std::vector<std::vector<double>> responses;
  for (std::size_t r = 0; r < seed_pool.size(); ++r) {
    auto x = seed_pool.inputs.row(r);
    queries.emplace_back(x.begin(), x.end());
    responses.push_back(endpoint.query(x));
  }

  Mlp surrogate = cfg.surrogate.fresh(D, K);
  std::size_t round = 0;
  while (cfg.steps > 0 && queries.size() < cfg.budget) {
    if (round % std::max<std::size_t>(1, cfg.rounds_per_retrain) == 0) {
      TrainConfig tc = cfg.surrogate.train;
      tc.seed = cfg.surrogate.train.seed + round;
      surrogate = train(cfg.surrogate.fresh(D, K), stack_rows(queries), trace_targets(stack_rows(responses)), tc).model;
    }
    const std::size_t parents = std::min(queries.size(), cfg.budget - queries.size());
    auto order = rng.permutation(queries.size());
    for (std::size_t p = 0; p < parents; ++p) {
      std::vector<double> x = queries[order[p]];
      const std::size_t target = rng.below(K);
      for (std::size_t t = 0; t < cfg.steps; ++t) {
        // Descending CE toward `target` raises that class's score.
        const auto g = input_grad_sign(surrogate, x, target);
        for (std::size_t d = 0; d < D; ++d) x[d] = std::min(1.0, std::max(0.0, x[d] - cfg.step * g[d]));
      }
      responses.push_back(endpoint.query(x));
      queries.push_back(std::move(x));
    }
    ++round;
  }

  AttackTrace t{"jbda-tr", cfg.seed, cfg.budget, stack_rows(queries), stack_rows(responses), {}, {}};
  t.recovered = t.raw;
  return t;
}

// ---------------------------------------------------------------------------
// Adaptive post-processing
// ---------------------------------------------------------------------------

/// Keeps only the top-1 label of every response.
inline AttackTrace top1_attack(AttackTrace trace) {
  trace.recovered = one_hot_rows(trace.raw);
  trace.kind += "+top1";
  return trace;
}

struct SmoothingConfig {
  std::size_t n_aug = 3;
  double jitter = 0.05;
  bool rotate = false;
  std::uint64_t seed = 5;
};

/// Sends every query n_aug times (the first copy unmodified, the others
/// jittered and optionally rotated) and averages the responses.
inline AttackTrace smoothing_attack(Endpoint& endpoint, const Tensor& queries, const SmoothingConfig& cfg) {
  if (cfg.n_aug < 1) throw std::invalid_argument("smoothing_attack: n_aug must be >= 1");
  RandomSource rng = RandomSource(cfg.seed).derive("smoothing");
  const std::size_t n = queries.rows();
  const std::size_t K = endpoint.num_classes();
  AttackTrace t{"smoothing", cfg.seed, n * cfg.n_aug, queries, Tensor::matrix(n, K), Tensor::matrix(n, K),
                Tensor::matrix(n * cfg.n_aug, K)};
  for (std::size_t r = 0; r < n; ++r) {
    auto x = queries.row(r);
    auto mean = t.recovered.row(r);
    for (std::size_t a = 0; a < cfg.n_aug; ++a) {
      std::vector<double> xa(x.begin(), x.end());
      if (a > 0) {
        if (cfg.jitter > 0.0)
          for (double& v : xa) v = std::min(1.0, std::max(0.0, v + cfg.jitter * rng.normal()));
        if (cfg.rotate) xa = rotate90(xa, static_cast<int>(rng.below(4)));
      }
      auto y = endpoint.query(xa);
      std::copy(y.begin(), y.end(), t.augmented.row(r * cfg.n_aug + a).begin());
      if (a == 0) std::copy(y.begin(), y.end(), t.raw.row(r).begin());
      for (std::size_t k = 0; k < K; ++k) mean[k] += y[k];
    }
    for (double& v : mean) v /= static_cast<double>(cfg.n_aug);
  }
  return t;
}

// ---------------------------------------------------------------------------
// S4L: supervised loss plus rotation prediction through a 4-way head
// ---------------------------------------------------------------------------

struct RotationHead {
  Dense layer;  // H -> 4, zero-initialised
  std::vector<double> vel_w, vel_b;

  explicit RotationHead(std::size_t feature_width) : layer(feature_width, 4) {
    vel_w.assign(layer.weight.size(), 0.0);
    vel_b.assign(layer.bias.size(), 0.0);
  }
};

/// Rotation loss weight * (1 / 4N) sum_i sum_j CE(head(f(R_j x_i)), j) over
/// `rows`. Adds body gradients to `body` and head gradients to `head_grad`.
inline double rotation_loss_and_grad(const Mlp& model, const Dense& head, const Tensor& data,
                                     std::span<const std::size_t> rows, double weight, Gradients& body,
                                     Gradients& head_grad) {
  if (rows.empty() || weight == 0.0) return 0.0;
  const double scale = weight / (4.0 * static_cast<double>(rows.size()));
  Activations cache;
  std::vector<double> head_logits(4), dhead(4), dfeat(model.feature_width());
  const std::vector<double> zero_logits(model.output_width(), 0.0);
  double loss = 0.0;
  for (std::size_t r : rows) {
    for (int j = 0; j < 4; ++j) {
      const auto xr = rotate90(data.row(r), j);
      forward_sample(model, xr, cache);
      head.apply(cache.features(), head_logits);
      loss += scale * softmax_ce_index(head_logits, static_cast<std::size_t>(j), dhead, scale);
      head_grad.accumulate(head, 0, dhead, cache.features());
      head.apply_transpose(dhead, dfeat);
      backward_sample(model, cache, zero_logits, dfeat, &body);
    }
  }
  return loss;
}

struct S4lConfig {
  double aux_weight = 1.0;
  SurrogateConfig surrogate{};
};

struct S4lResult {
  Mlp model;
  RotationHead head;
  std::vector<double> loss_trace;
};

inline S4lResult s4l_train(const AttackTrace& trace, const S4lConfig& cfg) {
  const std::size_t D = trace.queries.cols();
  grid_side(D);  // image-mode inputs only
  const std::size_t K = trace.recovered.cols();
  Mlp init = cfg.surrogate.fresh(D, K);
  RotationHead head(init.feature_width());
  AuxiliaryLoss aux;
  if (cfg.aux_weight != 0.0) {
    const double momentum = cfg.surrogate.train.momentum;
    aux = [&](const Mlp& model, std::span<const std::size_t> rows, Gradients& g, double lr) {
      Gradients hg(std::vector<Dense>{head.layer});
      const double loss = rotation_loss_and_grad(model, head.layer, trace.queries, rows, cfg.aux_weight, g, hg);
      for (std::size_t i = 0; i < head.layer.weight.size(); ++i) {
        head.vel_w[i] = momentum * head.vel_w[i] - lr * hg.weight[0][i];
        head.layer.weight[i] += head.vel_w[i];
      }
      for (std::size_t i = 0; i < head.layer.bias.size(); ++i) {
        head.vel_b[i] = momentum * head.vel_b[i] - lr * hg.bias[0][i];
        head.layer.bias[i] += head.vel_b[i];
      }
      return loss;
    };
  }
  auto res = train(std::move(init), trace.queries, trace_targets(trace.recovered), cfg.surrogate.train, aux);
  return {std::move(res.model), std::move(head), std::move(res.loss_trace)};
}

// ---------------------------------------------------------------------------
// p-Bayes lookup-table recovery
// ---------------------------------------------------------------------------

struct PBayesTable {
  Tensor clean;      // m x K
  Tensor perturbed;  // m x K
};

inline double l2_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

/// Replaces each response by the mean clean vector of table entries whose
/// perturbed output lies within `radius`; falls back to the nearest entry.
inline AttackTrace pbayes_recover(AttackTrace trace, const PBayesTable& table, double radius = 0.05) {
  if (table.clean.empty() || table.clean.rows() == 0) throw std::invalid_argument("pbayes_recover: empty table");
  const std::size_t m = table.clean.rows();
  const std::size_t K = table.clean.cols();
  Tensor out = Tensor::matrix(trace.raw.rows(), K);
  for (std::size_t r = 0; r < trace.raw.rows(); ++r) {
    auto y = trace.raw.row(r);
    auto dst = out.row(r);
    std::size_t hits = 0;
    std::size_t nearest = 0;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < m; ++i) {
      const double d = l2_distance(y, table.perturbed.row(i));
      if (d < best) {
        best = d;
        nearest = i;
      }
      if (d <= radius) {
        auto c = table.clean.row(i);
        for (std::size_t k = 0; k < K; ++k) dst[k] += c[k];
        ++hits;
      }
    }
    if (hits == 0) {
      auto c = table.clean.row(nearest);
      std::copy(c.begin(), c.end(), dst.begin());
    } else {
      for (double& v : dst) v /= static_cast<double>(hits);
    }
  }
  trace.recovered = std::move(out);
  trace.kind += "+pbayes";
  return trace;
}

// ---------------------------------------------------------------------------
// D-DAE label recovery network
// ---------------------------------------------------------------------------

/// Produces one (clean, perturbed) output pair from shadow model `shadow`.
using DefenseSimulator = std::function<std::pair<std::vector<double>, std::vector<double>>(std::size_t shadow,
                                                                                          RandomSource& rng)>;

struct DdaeConfig {
  std::size_t shadow_count = 4;
  std::size_t pairs_per_shadow = 12500;
  double holdout_fraction = 0.1;
  std::vector<std::size_t> hidden = {64, 64};
  TrainConfig train{40, 64, 0.05, 20, 0.1, 0.9, 17};
  std::uint64_t seed = 19;
};

struct RecoveryNet {
  Mlp net;
  double holdout_mse = 0.0;
  double holdout_baseline_mse = 0.0;  // perturbed vs clean, no recovery
  std::vector<double> loss_trace;

  std::vector<double> recover(std::span<const double> perturbed) const { return logits_of(net, perturbed); }
};

inline double mean_squared(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return a.size() ? s / static_cast<double>(a.size()) : 0.0;
}

/// Trains a 3-layer map perturbed -> clean output on simulator pairs.
inline RecoveryNet ddae_recover_train(const DefenseSimulator& sim, std::size_t num_classes, const DdaeConfig& cfg) {
  RandomSource rng = RandomSource(cfg.seed).derive("ddae/pairs");
  std::vector<std::vector<double>> clean, perturbed;
  for (std::size_t s = 0; s < cfg.shadow_count; ++s) {
    RandomSource srng = rng.derive(s);
    for (std::size_t i = 0; i < cfg.pairs_per_shadow; ++i) {
      auto [c, p] = sim(s, srng);
      if (c.size() != num_classes || p.size() != num_classes) throw std::invalid_argument("ddae: simulator arity");
      clean.push_back(std::move(c));
      perturbed.push_back(std::move(p));
    }
  }
  const std::size_t n = clean.size();
  auto order = rng.permutation(n);
  const auto n_hold = static_cast<std::size_t>(std::floor(cfg.holdout_fraction * static_cast<double>(n)));
  std::vector<std::vector<double>> xtr, ytr, xho, yho;
  for (std::size_t i = 0; i < n; ++i) {
    auto& xs = i < n_hold ? xho : xtr;
    auto& ys = i < n_hold ? yho : ytr;
    xs.push_back(perturbed[order[i]]);
    ys.push_back(clean[order[i]]);
  }
  std::vector<std::size_t> widths{num_classes};
  widths.insert(widths.end(), cfg.hidden.begin(), cfg.hidden.end());
  widths.push_back(num_classes);
  RandomSource init = RandomSource(cfg.seed).derive("ddae/init");
  auto res = train(Mlp(widths, init), stack_rows(xtr), Targets::regression(stack_rows(ytr)), cfg.train);

  RecoveryNet out{std::move(res.model), 0.0, 0.0, std::move(res.loss_trace)};
  if (!xho.empty()) {
    const Tensor hx = stack_rows(xho);
    const Tensor hy = stack_rows(yho);
    out.holdout_mse = mean_squared(forward(out.net, hx).logits, hy);
    out.holdout_baseline_mse = mean_squared(hx, hy);
  }
  return out;
}

/// Runs every raw response through the recovery net.
inline AttackTrace ddae_apply(AttackTrace trace, const RecoveryNet& rec) {
  trace.recovered = forward(rec.net, trace.raw).logits;
  trace.kind += "+ddae";
  return trace;
}

// ---------------------------------------------------------------------------
// Extraction
// ---------------------------------------------------------------------------

struct ExtractResult {
  Mlp surrogate;
  double extracted_accuracy = 0.0;
  double fidelity = 0.0;
  std::vector<double> loss_trace;
};

/// Argmax agreement between two models on `data`.
inline double fidelity(const Mlp& a, const Mlp& b, const Tensor& data) {
  if (data.rows() == 0) return 0.0;
  const auto la = predict_labels(a, data);
  const auto lb = predict_labels(b, data);
  std::size_t agree = 0;
  for (std::size_t i = 0; i < la.size(); ++i) agree += la[i] == lb[i];
  return static_cast<double>(agree) / static_cast<double>(la.size());
}

inline ExtractResult evaluate_surrogate(Mlp surrogate, const Mlp& victim, const Dataset& test) {
  ExtractResult r;
  r.extracted_accuracy = accuracy(surrogate, test.inputs, test.labels);
  r.fidelity = fidelity(surrogate, victim, test.inputs);
  r.surrogate = std::move(surrogate);
  return r;
}

/// Trains a surrogate on the recovered responses (rows are clipped at zero
/// and renormalised into soft targets) and scores it against the victim.
inline ExtractResult extract(const AttackTrace& trace, const SurrogateConfig& cfg, const Mlp& victim,
                             const Dataset& test) {
  auto res = train(cfg.fresh(trace.queries.cols(), trace.recovered.cols()), trace.queries,
                   trace_targets(trace.recovered), cfg.train);
  auto r = evaluate_surrogate(std::move(res.model), victim, test);
  r.loss_trace = std::move(res.loss_trace);
  return r;
}

// ---------------------------------------------------------------------------
// Trace file: "NHTA" | version | kind | seed | budget | queries | raw | recovered
// ---------------------------------------------------------------------------

inline void write_trace(std::ostream& os, const AttackTrace& t) {
  os.write("NHTA", 4);
  io::put<std::uint32_t>(os, 1);
  io::put_string(os, t.kind);
  io::put<std::uint64_t>(os, t.seed);
  io::put<std::uint64_t>(os, t.budget);
  io::write_tensor(os, t.queries);
  io::write_tensor(os, t.raw);
  io::write_tensor(os, t.recovered);
  if (!os) throw std::runtime_error("write_trace: stream failure");
}

inline AttackTrace read_trace(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string_view(magic, 4) != "NHTA") throw std::runtime_error("read_trace: bad magic");
  if (io::get<std::uint32_t>(is) != 1) throw std::runtime_error("read_trace: unsupported version");
  AttackTrace t;
  t.kind = io::get_string(is);
  t.seed = io::get<std::uint64_t>(is);
  t.budget = io::get<std::uint64_t>(is);
  t.queries = io::read_tensor(is);
  t.raw = io::read_tensor(is);
  t.recovered = io::read_tensor(is);
  if (t.raw.shape() != t.recovered.shape() || (t.queries.rank() == 2 && t.raw.rank() == 2 && t.queries.rows() != t.raw.rows())) {
    throw std::runtime_error("read_trace: misaligned tensors");
  }
  return t;
}

}  // namespace nht::attacks
