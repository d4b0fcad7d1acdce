#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <deque>
#include <future>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "utc/model.hpp"

namespace utc::serve {

struct Overloaded : std::runtime_error {
  Overloaded() : std::runtime_error("request queue is full") {}
};

/// Request count plus latency quantiles over a bounded window of recent requests.
class LatencyStats {
 public:
  explicit LatencyStats(std::size_t window = 100000) : window_(window) {}

  void record(double ms) {
    std::lock_guard lock(mu_);
    ++count_;
    if (recent_.size() == window_) recent_.pop_front();
    recent_.push_back(ms);
  }
  void reject() { rejected_.fetch_add(1); }
  void malformed() { malformed_.fetch_add(1); }
  void batch(std::size_t n) {
    std::lock_guard lock(mu_);
    ++batches_;
    batched_ += n;
  }

  nlohmann::json snapshot() const {
    std::vector<double> v;
    nlohmann::json j;
    {
      std::lock_guard lock(mu_);
      v.assign(recent_.begin(), recent_.end());
      j["requests"] = count_;
      j["batches"] = batches_;
      j["mean_batch_size"] = batches_ ? static_cast<double>(batched_) / static_cast<double>(batches_) : 0.0;
    }
    j["rejected"] = rejected_.load();
    j["malformed"] = malformed_.load();
    j["median_ms"] = quantile(v, 0.5);
    j["p99_ms"] = quantile(v, 0.99);
    return j;
  }

  /// Nearest-rank quantile; 0 for an empty sample.
  static double quantile(std::vector<double> v, double q) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(v.size())));
    return v[std::clamp<std::size_t>(rank, 1, v.size()) - 1];
  }

 private:
  mutable std::mutex mu_;
  std::size_t window_;
  std::deque<double> recent_;
  std::size_t count_ = 0, batches_ = 0, batched_ = 0;
  std::atomic<std::size_t> rejected_{0}, malformed_{0};
};

struct BatcherOptions {
  std::size_t max_batch = 16;
  std::chrono::milliseconds max_wait{5};
  std::size_t max_queue = 1024;
};

/// Collects requests into batches of up to max_batch, waiting at most
/// max_wait after the first queued request. One worker owns inference.
template <class T>
class DynamicBatcher {
 public:
  using Clock = std::chrono::steady_clock;

  DynamicBatcher(const UtcModel<T>& model, BatcherOptions opt, LatencyStats* stats = nullptr)
      : model_(model), opt_(opt), stats_(stats) {
    if (opt_.max_batch == 0) throw std::invalid_argument("max_batch must be positive");
    worker_ = std::thread([this] { loop(); });
  }
  ~DynamicBatcher() {
    {
      std::lock_guard lock(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    worker_.join();
  }
  DynamicBatcher(const DynamicBatcher&) = delete;
  DynamicBatcher& operator=(const DynamicBatcher&) = delete;

  /// Throws Overloaded when the queue is at capacity.
  std::future<std::vector<T>> submit(std::string text) {
    Item item{std::move(text), {}};
    auto fut = item.promise.get_future();
    {
      std::lock_guard lock(mu_);
      if (queue_.size() >= opt_.max_queue) throw Overloaded();
      queue_.push_back(std::move(item));
    }
    cv_.notify_one();
    return fut;
  }

 private:
  struct Item {
    std::string text;
    std::promise<std::vector<T>> promise;
  };

  void loop() {
    for (;;) {
      std::vector<Item> batch;
      {
        std::unique_lock lock(mu_);
        cv_.wait(lock, [&] { return stop_ || !queue_.empty(); });
        if (stop_ && queue_.empty()) return;
        const auto deadline = Clock::now() + opt_.max_wait;
        cv_.wait_until(lock, deadline, [&] { return stop_ || queue_.size() >= opt_.max_batch; });
        const std::size_t n = std::min(opt_.max_batch, queue_.size());
        for (std::size_t i = 0; i < n; ++i) {
          batch.push_back(std::move(queue_.front()));
          queue_.pop_front();
        }
      }
      if (stats_) stats_->batch(batch.size());
      for (auto& item : batch) {
        try {
          item.promise.set_value(model_.score_text(item.text));
        } catch (...) {
          item.promise.set_exception(std::current_exception());
        }
      }
    }
  }

  const UtcModel<T>& model_;
  BatcherOptions opt_;
  LatencyStats* stats_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<Item> queue_;
  bool stop_ = false;
  std::thread worker_;
};

/// POST /score {"text": str} -> {"scores": {attr: p}, "latency_ms": t}
/// GET /stats -> request count, median and p99 latency.
template <class T>
class ScoreServer {
 public:
  ScoreServer(const UtcModel<T>& model, BatcherOptions opt) : model_(model), batcher_(model, opt, &stats_) {
    server_.Post("/score", [this](const httplib::Request& req, httplib::Response& res) { handle_score(req, res); });
    server_.Get("/stats", [this](const httplib::Request&, httplib::Response& res) {
      res.set_content(stats_.snapshot().dump(), "application/json");
    });
  }
  ~ScoreServer() { stop(); }

  /// Binds to host:port (port 0 picks a free port) and serves on a background thread.
  int start(const std::string& host = "127.0.0.1", int port = 0) {
    const int bound = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
    if (bound < 0) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    return bound;
  }

  /// Serves on the calling thread until stop().
  void run(const std::string& host, int port) {
    if (!server_.listen(host, port)) throw std::runtime_error("cannot listen on " + host + ":" + std::to_string(port));
  }

  void stop() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

  const LatencyStats& stats() const { return stats_; }

 private:
  static void error(httplib::Response& res, int status, const std::string& msg) {
    res.status = status;
    res.set_content(nlohmann::json{{"error", msg}}.dump(), "application/json");
  }

  void handle_score(const httplib::Request& req, httplib::Response& res) {
    const auto t0 = std::chrono::steady_clock::now();
    std::string text;
    try {
      auto j = nlohmann::json::parse(req.body);
      if (!j.is_object() || !j.contains("text") || !j["text"].is_string()) {
        stats_.malformed();
        return error(res, 400, "body must be a JSON object with a string \"text\" field");
      }
      text = j["text"].get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      stats_.malformed();
      return error(res, 400, std::string("malformed JSON: ") + e.what());
    }
    std::future<std::vector<T>> fut;
    try {
      fut = batcher_.submit(std::move(text));
    } catch (const Overloaded& e) {
      stats_.reject();
      return error(res, 503, e.what());
    }
    std::vector<T> scores;
    try {
      scores = fut.get();
    } catch (const std::exception& e) {
      return error(res, 500, e.what());
    }
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    stats_.record(ms);
    nlohmann::json out;
    out["scores"] = nlohmann::json::object();
    const auto& attrs = model_.arch().attributes;
    for (std::size_t i = 0; i < attrs.size(); ++i) out["scores"][attrs[i]] = static_cast<double>(scores[i]);
    out["latency_ms"] = ms;
    res.set_content(out.dump(), "application/json");
  }

  const UtcModel<T>& model_;
  LatencyStats stats_;
  DynamicBatcher<T> batcher_;
  httplib::Server server_;
  std::thread thread_;
};

}  // namespace utc::serve
