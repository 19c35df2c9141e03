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
#include <nht/honeytrace.hpp>
#include <nht/nn.hpp>

#include <httplib.h>
#include <json.hpp>

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <memory>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace nht::gateway {

using json = nlohmann::json;

struct AuditRecord {
  std::int64_t timestamp_ms = 0;
  std::string query_digest;
  std::size_t label = 0;
  bool flipped = false;
  int similarity_bucket = 0;  // 0 for s = 0, else ceil(4 s) in 1..4

  json to_json() const {
    return {{"timestamp_ms", timestamp_ms}, {"query_digest", query_digest}, {"label", label},
            {"flipped", flipped},           {"similarity_bucket", similarity_bucket}};
  }
};

inline int similarity_bucket(double s) {
  if (!(s > 0.0)) return 0;
  return std::clamp(static_cast<int>(std::ceil(4.0 * s)), 1, 4);
}

/// Append-only audit log. Appends go through one lock; an optional file
/// sink receives one JSON line per record.
class AuditLog {
 public:
  explicit AuditLog(std::string path = {}) : path_(std::move(path)) {
    if (!path_.empty()) {
      file_.open(path_, std::ios::app);
      if (!file_) throw std::runtime_error("audit: cannot open " + path_);
    }
  }

  void append(std::vector<AuditRecord> batch) {
    std::lock_guard lock(mu_);
    for (auto& r : batch) {
      if (file_.is_open()) file_ << r.to_json().dump() << '\n';
      records_.push_back(std::move(r));
    }
    if (file_.is_open()) file_.flush();
  }

  std::size_t size() const {
    std::lock_guard lock(mu_);
    return records_.size();
  }

  std::vector<AuditRecord> snapshot() const {
    std::lock_guard lock(mu_);
    return records_;
  }

  std::string to_ndjson() const {
    std::ostringstream os;
    for (const auto& r : snapshot()) os << r.to_json().dump() << '\n';
    return os.str();
  }

 private:
  std::string path_;
  mutable std::mutex mu_;
  std::ofstream file_;
  std::vector<AuditRecord> records_;
};

struct GatewayOptions {
  std::string admin_token;  // empty: admin routes always answer 401
  std::uint64_t seed = 1;
  std::string audit_path;
  std::size_t max_batch = 4096;
};

inline std::string admin_token_from_env() {
  const char* t = std::getenv("NHT_ADMIN_TOKEN");
  return t ? std::string(t) : std::string();
}

/// HTTP front end for a ProtectedModel.
class Gateway {
 public:
  Gateway(std::shared_ptr<ProtectedModel> model, GatewayOptions opt)
      : pm_(std::move(model)), opt_(std::move(opt)), rng_(RandomSource(opt_.seed).derive("gateway")), audit_(opt_.audit_path) {
    if (!pm_) throw std::invalid_argument("Gateway: null model");
    routes();
  }

  ~Gateway() { stop(); }

  Gateway(const Gateway&) = delete;
  Gateway& operator=(const Gateway&) = delete;

  /// Binds and serves on a background thread. Port 0 picks a free port.
  int start(const std::string& host = "127.0.0.1", int port = 0) {
    if (port == 0) {
      port_ = server_.bind_to_any_port(host);
    } else {
      port_ = server_.bind_to_port(host, port) ? port : -1;
    }
    if (port_ < 0) throw std::runtime_error("gateway: cannot bind " + host + ":" + std::to_string(port));
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    return port_;
  }

  /// Serves on the calling thread until stop().
  void run(const std::string& host, int port) {
    if (!server_.listen(host, port)) throw std::runtime_error("gateway: cannot listen on " + host + ":" + std::to_string(port));
  }

  void stop() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

  int port() const { return port_; }
  const ProtectedModel& model() const { return *pm_; }
  const AuditLog& audit() const { return audit_; }
  std::size_t predictions() const { return served_.load(); }

 private:
  void routes() {
    server_.Post("/v1/predict", [this](const httplib::Request& req, httplib::Response& res) { predict(req, res); });
    server_.Post("/v1/admin/watermark", [this](const httplib::Request& req, httplib::Response& res) {
      if (!authorized(req, res)) return;
      upload(req, res);
    });
    server_.Delete("/v1/admin/watermark", [this](const httplib::Request& req, httplib::Response& res) {
      if (!authorized(req, res)) return;
      pm_->clear_watermarks();
      reply(res, 200, {{"status", "disabled"}});
    });
    server_.Get("/v1/admin/audit", [this](const httplib::Request& req, httplib::Response& res) {
      if (!authorized(req, res)) return;
      res.status = 200;
      res.set_content(audit_.to_ndjson(), "application/x-ndjson");
    });
    server_.Get("/v1/health", [this](const httplib::Request&, httplib::Response& res) {
      reply(res, 200, {{"status", "ok"}, {"protected", pm_->watermarks() != nullptr}});
    });
  }

  static void reply(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  bool authorized(const httplib::Request& req, httplib::Response& res) const {
    const std::string expected = "Bearer " + opt_.admin_token;
    const auto got = req.get_header_value("Authorization");
    if (opt_.admin_token.empty() || got.size() != expected.size() ||
        sodium_memcmp(got.data(), expected.data(), expected.size()) != 0) {
      reply(res, 401, {{"error", "unauthorized"}});
      return false;
    }
    return true;
  }

  void predict(const httplib::Request& req, httplib::Response& res) {
    json body;
    try {
      body = json::parse(req.body);
    } catch (const json::exception&) {
      return reply(res, 400, {{"error", "malformed JSON"}});
    }
    if (!body.is_object() || !body.contains("inputs") || !body["inputs"].is_array() || body["inputs"].empty()) {
      return reply(res, 400, {{"error", "expected {\"inputs\": [[...], ...]}"}});
    }
    const auto& inputs = body["inputs"];
    if (inputs.size() > opt_.max_batch) return reply(res, 400, {{"error", "batch too large"}});
    const std::size_t D = pm_->model().input_width();
    std::vector<std::vector<double>> rows;
    rows.reserve(inputs.size());
    for (const auto& row : inputs) {
      if (!row.is_array() || row.size() != D) {
        return reply(res, 400, {{"error", "each input must be an array of " + std::to_string(D) + " numbers"}});
      }
      std::vector<double> x;
      x.reserve(D);
      for (const auto& v : row) {
        if (!v.is_number()) return reply(res, 400, {{"error", "non-numeric input"}});
        x.push_back(v.get<double>());
        if (!std::isfinite(x.back())) return reply(res, 400, {{"error", "non-finite input"}});
      }
      rows.push_back(std::move(x));
    }

    // One watermark snapshot per request.
    const auto state = pm_->watermarks();
    const auto now = std::chrono::duration_cast<std::chrono::milliseconds>(
                         std::chrono::system_clock::now().time_since_epoch())
                         .count();
    json labels = json::array(), probs = json::array();
    std::vector<AuditRecord> records;
    records.reserve(rows.size());
    for (const auto& x : rows) {
      RandomSource r = rng_.derive(sequence_.fetch_add(1, std::memory_order_relaxed));
      const PredictionOut out = pm_->protect_with(state, x, r);
      if (out.mode == LabelMode::hard) labels.push_back(out.label);
      else probs.push_back(out.probs);
      records.push_back({now, query_digest(x), out.label, out.flipped, similarity_bucket(out.similarity)});
    }
    audit_.append(std::move(records));
    served_ += rows.size();
    if (pm_->params().mode == LabelMode::hard) reply(res, 200, {{"labels", labels}});
    else reply(res, 200, {{"probs", probs}});
  }

  void upload(const httplib::Request& req, httplib::Response& res) {
    std::string bytes;
    if (req.is_multipart_form_data()) {
      if (!req.has_file("watermarks")) return reply(res, 400, {{"error", "missing multipart field 'watermarks'"}});
      bytes = req.get_file_value("watermarks").content;
    } else {
      bytes = req.body;
    }
    try {
      std::istringstream is(bytes);
      const WatermarkSet wm = read_watermarks(is);
      pm_->set_watermarks(wm);
      reply(res, 200, {{"status", "swapped"}, {"count", wm.count()}, {"target", wm.target}});
    } catch (const std::exception& e) {
      reply(res, 400, {{"error", e.what()}});
    }
  }

  std::shared_ptr<ProtectedModel> pm_;
  GatewayOptions opt_;
  RandomSource rng_;
  std::atomic<std::uint64_t> sequence_{0};
  std::atomic<std::size_t> served_{0};
  AuditLog audit_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = -1;
};

}  // namespace nht::gateway
