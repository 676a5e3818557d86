#pragma once

// Long-running prediction service over a line-delimited TCP protocol.
//
// Request:  "id \t type_code \t scenario_code \t field_1 ... field_F \n"
// Response: "id \t p_ctr \t p_cvr \n"   (probabilities at 17 significant digits)
// Errors:   "id \t ERR \t reason \n"; processing continues.
// Admin:    "!shutdown" answers "ok \t shutdown" and flags the server to stop.
//
// One listener queues accepted connections; a bounded worker pool serves them
// against one immutable model snapshot, so every request runs exactly one
// composed-tower forward and concurrent answers match serialized execution.
// Recorded latencies cover parse + predict + format, not socket time.

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <cstdio>
#include <deque>
#include <mutex>
#include <set>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "mmn/data.hpp"
#include "mmn/errors.hpp"
#include "mmn/model.hpp"

namespace mmn {

class PredictionServer {
 public:
  struct Options {
    std::uint16_t port = 0;  // 0: pick an ephemeral port
    std::size_t workers = 4;
  };

  struct Stats {
    std::uint64_t requests = 0;
    double p50_us = 0.0;
    double p99_us = 0.0;
  };

  PredictionServer(MmnModel model, Options opt)
      : model_(std::move(model)), opt_(opt) {}

  ~PredictionServer() { stop(); }

  PredictionServer(const PredictionServer&) = delete;
  PredictionServer& operator=(const PredictionServer&) = delete;

  // Pure request handler: one line in, one response line out (no newline).
  static std::string handle_line(const MmnModel& model, std::string_view line) {
    const auto cols = detail::split_tabs(line);
    const std::string id = cols.empty() || cols[0].empty() ? "?" : std::string(cols[0]);
    const std::size_t expected = 3 + model.schema().field_count();
    if (cols.size() != expected) {
      return id + "\tERR\texpected " + std::to_string(expected) + " columns, got " +
             std::to_string(cols.size());
    }
    FeatureVector rec;
    const DomainRegistry& reg = model.registry();
    try {
      rec.type_id = reg.type_index(std::string(cols[1]));
      rec.scenario_id = reg.scenario_index(std::string(cols[2]));
    } catch (const DomainError& e) {
      return id + "\tERR\t" + e.what();
    }
    rec.values.reserve(model.schema().field_count());
    for (std::size_t f = 0; f < model.schema().field_count(); ++f) {
      rec.values.emplace_back(cols[3 + f]);
    }
    const InstancePrediction p = model.predict_one(rec);
    return id + '\t' + format_prob(p.p_ctr) + '\t' + format_prob(p.p_cvr);
  }

  void start() {
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listen_fd_ < 0) throw IoError("socket() failed");
    const int one = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = htons(opt_.port);
    if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
      ::close(listen_fd_);
      listen_fd_ = -1;
      throw IoError("bind() failed on port " + std::to_string(opt_.port));
    }
    if (::listen(listen_fd_, 64) != 0) {
      ::close(listen_fd_);
      listen_fd_ = -1;
      throw IoError("listen() failed");
    }
    socklen_t len = sizeof(addr);
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);

    running_ = true;
    listener_ = std::thread([this] { accept_loop(); });
    const std::size_t workers = std::max<std::size_t>(1, opt_.workers);
    for (std::size_t i = 0; i < workers; ++i) {
      workers_.emplace_back([this] { worker_loop(); });
    }
  }

  void stop() {
    bool expected = true;
    if (!running_.compare_exchange_strong(expected, false)) return;
    if (listen_fd_ >= 0) ::shutdown(listen_fd_, SHUT_RDWR);
    {
      std::lock_guard<std::mutex> lock(mu_);
      for (int fd : active_) ::shutdown(fd, SHUT_RDWR);
    }
    queue_cv_.notify_all();
    if (listener_.joinable()) listener_.join();
    for (auto& w : workers_) {
      if (w.joinable()) w.join();
    }
    workers_.clear();
    if (listen_fd_ >= 0) {
      ::close(listen_fd_);
      listen_fd_ = -1;
    }
  }

  std::uint16_t port() const { return port_; }
  bool shutdown_requested() const { return shutdown_requested_.load(); }

  Stats stats() const {
    std::vector<std::uint64_t> ns;
    {
      std::lock_guard<std::mutex> lock(mu_);
      ns = latencies_ns_;
    }
    Stats s;
    s.requests = ns.size();
    if (ns.empty()) return s;
    auto pct = [&](double q) {
      const std::size_t k = static_cast<std::size_t>(
          q * static_cast<double>(ns.size() - 1) + 0.5);
      std::nth_element(ns.begin(), ns.begin() + k, ns.end());
      return static_cast<double>(ns[k]) / 1000.0;
    };
    s.p50_us = pct(0.50);
    s.p99_us = pct(0.99);
    return s;
  }

 private:
  static std::string format_prob(double v) {
    if (std::isnan(v)) return "na";
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
  }

  void accept_loop() {
    while (running_.load()) {
      const int fd = ::accept(listen_fd_, nullptr, nullptr);
      if (fd < 0) {
        if (!running_.load()) break;
        continue;
      }
      {
        std::lock_guard<std::mutex> lock(mu_);
        if (!running_.load()) {
          ::close(fd);
          break;
        }
        queue_.push_back(fd);
      }
      queue_cv_.notify_one();
    }
  }

  void worker_loop() {
    while (true) {
      int fd = -1;
      {
        std::unique_lock<std::mutex> lock(mu_);
        queue_cv_.wait(lock, [this] { return !queue_.empty() || !running_.load(); });
        if (queue_.empty()) {
          if (!running_.load()) return;
          continue;
        }
        fd = queue_.front();
        queue_.pop_front();
        active_.insert(fd);
      }
      serve_connection(fd);
      {
        std::lock_guard<std::mutex> lock(mu_);
        active_.erase(fd);
      }
      ::close(fd);
    }
  }

  void serve_connection(int fd) {
    std::string buffer;
    char chunk[4096];
    while (running_.load()) {
      const ssize_t got = ::recv(fd, chunk, sizeof(chunk), 0);
      if (got <= 0) return;
      buffer.append(chunk, static_cast<std::size_t>(got));
      std::size_t start = 0;
      for (std::size_t nl = buffer.find('\n', start); nl != std::string::npos;
           nl = buffer.find('\n', start)) {
        std::string_view line(buffer.data() + start, nl - start);
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        start = nl + 1;
        if (line == "!shutdown") {
          send_all(fd, "ok\tshutdown\n");
          shutdown_requested_ = true;
          shutdown_cv_.notify_all();
          return;
        }
        const auto t0 = std::chrono::steady_clock::now();
        std::string response = handle_line(model_, line);
        const auto t1 = std::chrono::steady_clock::now();
        {
          std::lock_guard<std::mutex> lock(mu_);
          latencies_ns_.push_back(static_cast<std::uint64_t>(
              std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count()));
        }
        response += '\n';
        if (!send_all(fd, response)) return;
      }
      buffer.erase(0, start);
    }
  }

  static bool send_all(int fd, std::string_view data) {
    std::size_t sent = 0;
    while (sent < data.size()) {
      const ssize_t n = ::send(fd, data.data() + sent, data.size() - sent, MSG_NOSIGNAL);
      if (n <= 0) return false;
      sent += static_cast<std::size_t>(n);
    }
    return true;
  }

  const MmnModel model_;
  const Options opt_;
  int listen_fd_ = -1;
  std::uint16_t port_ = 0;
  std::atomic<bool> running_{false};
  std::atomic<bool> shutdown_requested_{false};
  std::thread listener_;
  std::vector<std::thread> workers_;
  mutable std::mutex mu_;
  std::condition_variable queue_cv_;
  std::condition_variable shutdown_cv_;
  std::deque<int> queue_;
  std::set<int> active_;
  std::vector<std::uint64_t> latencies_ns_;
};

}  // namespace mmn
