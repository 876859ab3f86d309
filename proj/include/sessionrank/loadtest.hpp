// Open-loop HTTP load generator: requests are issued on a fixed schedule
// regardless of how long earlier ones take, and latency is measured from the
// scheduled send time so queueing delay is not hidden.

#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <mutex>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "sessionrank/http.hpp"

#include "sessionrank/domain.hpp"
#include "sessionrank/error.hpp"

namespace sessionrank {

struct LoadTestConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  double rps = 100.0;
  double duration_s = 60.0;
  double get_fraction = 0.7;
  std::uint64_t n_members = 2000;
  std::uint64_t n_titles = 10000;
  std::size_t k = 10;
  std::string model = "insession";
  std::size_t workers = 16;
  std::uint64_t seed = 0;
  double timeout_s = 5.0;
};

struct LatencyStats {
  std::size_t requests = 0;
  std::size_t errors = 0;
  double p50_ms = 0.0;
  double p95_ms = 0.0;
  double p99_ms = 0.0;
  double max_ms = 0.0;
};

struct LoadTestReport {
  std::size_t requests = 0;
  std::size_t errors = 0;
  double error_rate = 0.0;
  double p50_ms = 0.0;
  double p95_ms = 0.0;
  double p99_ms = 0.0;
  double max_ms = 0.0;
  double elapsed_s = 0.0;
  LatencyStats get;
  LatencyStats post;
};

/// Nearest-rank percentile over unsorted samples (q in [0, 100]).
inline double percentile_ms(std::vector<double> v, double q) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  auto rank = static_cast<std::size_t>(std::ceil(q / 100.0 * static_cast<double>(v.size())));
  return v[std::clamp<std::size_t>(rank, 1, v.size()) - 1];
}

inline LatencyStats latency_stats(const std::vector<double>& ms, std::size_t errors) {
  LatencyStats s;
  s.requests = ms.size();
  s.errors = errors;
  s.p50_ms = percentile_ms(ms, 50);
  s.p95_ms = percentile_ms(ms, 95);
  s.p99_ms = percentile_ms(ms, 99);
  s.max_ms = ms.empty() ? 0.0 : *std::max_element(ms.begin(), ms.end());
  return s;
}

inline Json to_json(const LatencyStats& s) {
  return Json{{"requests", s.requests}, {"errors", s.errors}, {"p50_ms", s.p50_ms},
              {"p95_ms", s.p95_ms},     {"p99_ms", s.p99_ms}, {"max_ms", s.max_ms}};
}

inline Json to_json(const LoadTestReport& r) {
  return Json{{"requests", r.requests}, {"errors", r.errors}, {"error_rate", r.error_rate},
              {"p50_ms", r.p50_ms},     {"p95_ms", r.p95_ms}, {"p99_ms", r.p99_ms},
              {"max_ms", r.max_ms},     {"elapsed_s", r.elapsed_s}, {"get", to_json(r.get)},
              {"post", to_json(r.post)}};
}

inline LoadTestReport run_loadtest(const LoadTestConfig& config) {
  if (!(config.rps > 0.0) || !std::isfinite(config.rps))
    throw Error(ErrorCode::InvalidArgument, "rps must be positive", "rps");
  if (!(config.duration_s > 0.0)) throw Error(ErrorCode::InvalidArgument, "duration must be positive", "duration");
  if (config.n_members == 0 || config.n_titles == 0 || config.workers == 0)
    throw Error(ErrorCode::InvalidArgument, "members, titles and workers must be positive");
  {
    httplib::Client probe(config.host, config.port);
    probe.set_connection_timeout(2);
    auto res = probe.Get("/v1/health");
    if (!res)
      throw Error(ErrorCode::TargetUnreachable,
                  "no response from " + config.host + ":" + std::to_string(config.port));
  }

  using clock = std::chrono::steady_clock;
  struct Job {
    clock::time_point due;
    bool is_get = true;
    std::uint64_t member = 0;
    std::uint64_t title = 0;
    int action = 0;
  };

  // The whole schedule is drawn up front from the seed.
  const auto total = static_cast<std::size_t>(std::llround(config.rps * config.duration_s));
  std::vector<Job> jobs(total);
  std::mt19937_64 rng(config.seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<std::uint64_t> member(1, config.n_members), title(1, config.n_titles);
  std::uniform_int_distribution<int> action(1, 3);
  const auto start = clock::now() + std::chrono::milliseconds(50);
  for (std::size_t i = 0; i < total; ++i) {
    jobs[i].due = start + std::chrono::nanoseconds(static_cast<std::int64_t>(1e9 * static_cast<double>(i) / config.rps));
    jobs[i].is_get = u(rng) < config.get_fraction;
    jobs[i].member = member(rng);
    jobs[i].title = title(rng);
    jobs[i].action = action(rng);
  }

  std::mutex mu;
  std::condition_variable cv;
  std::deque<std::size_t> queue;
  bool done = false;
  std::vector<double> latency(total, 0.0);
  std::vector<char> ok(total, 0);

  auto worker = [&] {
    httplib::Client client(config.host, config.port);
    client.set_keep_alive(true);
    client.set_tcp_nodelay(true);
    const auto t = std::chrono::duration<double>(config.timeout_s);
    client.set_read_timeout(std::chrono::duration_cast<std::chrono::microseconds>(t));
    client.set_connection_timeout(std::chrono::duration_cast<std::chrono::microseconds>(t));
    for (;;) {
      std::size_t i;
      {
        std::unique_lock lock(mu);
        cv.wait(lock, [&] { return done || !queue.empty(); });
        if (queue.empty()) return;
        i = queue.front();
        queue.pop_front();
      }
      const Job& job = jobs[i];
      httplib::Result res;
      if (job.is_get) {
        res = client.Get("/v1/recommendations/prequery?member_id=" + std::to_string(job.member) +
                         "&k=" + std::to_string(config.k) + "&model=" + config.model);
        ok[i] = res && res->status == 200;
      } else {
        const auto now_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                                std::chrono::system_clock::now().time_since_epoch())
                                .count();
        Json body{{"member_id", job.member},
                  {"title_id", job.title},
                  {"action", std::string(to_string(static_cast<ActionType>(job.action)))},
                  {"ts_ms", now_ms},
                  {"surface", "prequery"}};
        res = client.Post("/v1/events", body.dump(), "application/json");
        ok[i] = res && res->status == 202;
      }
      latency[i] = std::chrono::duration<double, std::milli>(clock::now() - job.due).count();
    }
  };

  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < config.workers; ++w) pool.emplace_back(worker);
  for (std::size_t i = 0; i < total; ++i) {
    std::this_thread::sleep_until(jobs[i].due);
    {
      std::lock_guard lock(mu);
      queue.push_back(i);
    }
    cv.notify_one();
  }
  {
    std::lock_guard lock(mu);
    done = true;
  }
  cv.notify_all();
  for (auto& t : pool) t.join();

  LoadTestReport report;
  report.elapsed_s = std::chrono::duration<double>(clock::now() - start).count();
  std::vector<double> all, gets, posts;
  std::size_t get_errors = 0, post_errors = 0;
  for (std::size_t i = 0; i < total; ++i) {
    all.push_back(latency[i]);
    (jobs[i].is_get ? gets : posts).push_back(latency[i]);
    if (!ok[i]) ++(jobs[i].is_get ? get_errors : post_errors);
  }
  auto overall = latency_stats(all, get_errors + post_errors);
  report.requests = overall.requests;
  report.errors = overall.errors;
  report.error_rate = total ? static_cast<double>(report.errors) / static_cast<double>(total) : 0.0;
  report.p50_ms = overall.p50_ms;
  report.p95_ms = overall.p95_ms;
  report.p99_ms = overall.p99_ms;
  report.max_ms = overall.max_ms;
  report.get = latency_stats(gets, get_errors);
  report.post = latency_stats(posts, post_errors);
  return report;
}

}  // namespace sessionrank
