// In-memory store of recent member events with read-time sessionization.
//
// Each member owns an ordered, deduplicated buffer. Sessions are cut at read
// time: a new session starts exactly when the gap to the previous event is
// >= inactivity_timeout_ms. Snapshots are immutable copies.

#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cstdint>
#include <deque>
#include <limits>
#include <mutex>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

#include "sessionrank/domain.hpp"

namespace sessionrank {

struct StoreConfig {
  std::int64_t inactivity_timeout_ms = 1'800'000;
  std::size_t past_sessions_k = 3;
  std::size_t max_events_per_member = 500;
  std::int64_t retention_ms = 7LL * 24 * 3600 * 1000;

  void validate() const {
    if (inactivity_timeout_ms <= 0 || past_sessions_k == 0 || max_events_per_member == 0 || retention_ms <= 0)
      throw Error(ErrorCode::InvalidConfig, "store config values must be positive", "store");
  }
};

struct Session {
  MemberId member_id = 0;
  std::vector<InteractionEvent> events;
  std::int64_t start_ms = 0;
  std::int64_t end_ms = 0;
};

struct SessionView {
  std::optional<Session> current;
  std::vector<Session> past;  // most recent first, at most K
  std::int64_t as_of_ms = 0;

  bool empty() const noexcept { return !current && past.empty(); }
  std::size_t current_event_count() const noexcept { return current ? current->events.size() : 0; }
};

/// Partitions a single member's time-ordered events into sessions.
inline std::vector<Session> sessionize(std::span<const InteractionEvent> events, std::int64_t timeout_ms) {
  std::vector<Session> sessions;
  for (std::size_t i = 0; i < events.size(); ++i) {
    if (i > 0 && events[i].ts_ms < events[i - 1].ts_ms)
      throw Error(ErrorCode::UnsortedInput, "events must be sorted by ts_ms", "ts_ms");
    if (i == 0 || events[i].ts_ms - events[i - 1].ts_ms >= timeout_ms) {
      sessions.push_back(Session{events[i].member_id, {}, events[i].ts_ms, events[i].ts_ms});
    }
    auto& s = sessions.back();
    s.events.push_back(events[i]);
    s.end_ms = events[i].ts_ms;
  }
  return sessions;
}

/// Builds the view of a member's history as seen at as_of_ms. The trailing
/// session is current iff as_of_ms - end_ms < timeout.
inline SessionView make_view(std::span<const InteractionEvent> history, std::int64_t as_of_ms,
                             const StoreConfig& config) {
  SessionView view;
  view.as_of_ms = as_of_ms;
  if (history.size() > config.max_events_per_member)
    history = history.subspan(history.size() - config.max_events_per_member);
  auto sessions = sessionize(history, config.inactivity_timeout_ms);
  if (sessions.empty()) return view;
  std::size_t end = sessions.size();
  if (as_of_ms - sessions.back().end_ms < config.inactivity_timeout_ms) {
    view.current = std::move(sessions.back());
    --end;
  }
  for (std::size_t i = end; i > 0 && view.past.size() < config.past_sessions_k; --i) {
    view.past.push_back(std::move(sessions[i - 1]));
  }
  return view;
}

enum class IngestStatus { accepted, duplicate, dropped_late };

struct StoreStats {
  std::uint64_t accepted = 0;
  std::uint64_t duplicates = 0;
  std::uint64_t dropped_late = 0;
  std::uint64_t evicted = 0;
};

/// Sharded, thread-safe store. Per-member operations are linearizable (one
/// shard mutex guards each member); members on different shards never contend.
class SessionStore {
 public:
  explicit SessionStore(StoreConfig config = {}) : config_(config) { config_.validate(); }

  SessionStore(const SessionStore&) = delete;
  SessionStore& operator=(const SessionStore&) = delete;

  const StoreConfig& config() const noexcept { return config_; }

  IngestStatus ingest(const InteractionEvent& event) {
    if (closed_.load(std::memory_order_acquire)) throw Error(ErrorCode::StoreClosed, "store is closed");
    std::int64_t mark = raise_watermark(event.ts_ms);
    std::int64_t horizon = retention_horizon(mark);
    Shard& shard = shard_for(event.member_id);
    std::lock_guard lock(shard.mu);
    if (event.ts_ms < horizon) return count(IngestStatus::dropped_late);

    auto [it, inserted] = shard.members.try_emplace(event.member_id);
    if (inserted) member_count_.fetch_add(1, std::memory_order_relaxed);
    auto& buf = it->second;
    while (!buf.empty() && buf.front().ts_ms < horizon) {
      buf.pop_front();
      evicted_.fetch_add(1, std::memory_order_relaxed);
    }
    auto pos = std::lower_bound(buf.begin(), buf.end(), event, event_less);
    for (auto scan = pos; scan != buf.end() && scan->ts_ms == event.ts_ms; ++scan) {
      if (*scan == event) return count(IngestStatus::duplicate);
    }
    if (buf.size() >= config_.max_events_per_member) {
      // A full buffer only admits events newer than its oldest entry.
      if (pos == buf.begin()) return count(IngestStatus::dropped_late);
      buf.pop_front();
      evicted_.fetch_add(1, std::memory_order_relaxed);
      pos = std::lower_bound(buf.begin(), buf.end(), event, event_less);
    }
    buf.insert(pos, event);
    return count(IngestStatus::accepted);
  }

  /// Copies the member's retained events (oldest first).
  std::vector<InteractionEvent> events(MemberId member) const {
    std::int64_t horizon = retention_horizon(watermark_.load(std::memory_order_acquire));
    const Shard& shard = shard_for(member);
    std::lock_guard lock(shard.mu);
    auto it = shard.members.find(member);
    if (it == shard.members.end()) return {};
    std::vector<InteractionEvent> out;
    out.reserve(it->second.size());
    for (const auto& e : it->second) {
      if (e.ts_ms >= horizon) out.push_back(e);
    }
    return out;
  }

  SessionView snapshot(MemberId member, std::int64_t as_of_ms) const {
    auto evs = events(member);
    return make_view(evs, as_of_ms, config_);
  }

  std::size_t member_count() const noexcept { return member_count_.load(std::memory_order_relaxed); }

  StoreStats stats() const noexcept {
    return StoreStats{accepted_.load(), duplicates_.load(), dropped_late_.load(), evicted_.load()};
  }

  void close() noexcept { closed_.store(true, std::memory_order_release); }
  bool closed() const noexcept { return closed_.load(std::memory_order_acquire); }

 private:
  static constexpr std::size_t kShards = 64;

  struct Shard {
    mutable std::mutex mu;
    std::unordered_map<MemberId, std::deque<InteractionEvent>> members;
  };

  Shard& shard_for(MemberId m) { return shards_[std::hash<MemberId>{}(m) % kShards]; }
  const Shard& shard_for(MemberId m) const { return shards_[std::hash<MemberId>{}(m) % kShards]; }

  std::int64_t raise_watermark(std::int64_t ts) {
    std::int64_t cur = watermark_.load(std::memory_order_relaxed);
    while (ts > cur && !watermark_.compare_exchange_weak(cur, ts, std::memory_order_acq_rel)) {
    }
    return std::max(cur, ts);
  }

  std::int64_t retention_horizon(std::int64_t mark) const noexcept {
    if (mark == std::numeric_limits<std::int64_t>::min()) return mark;
    return mark - config_.retention_ms;
  }

  IngestStatus count(IngestStatus s) noexcept {
    switch (s) {
      case IngestStatus::accepted: accepted_.fetch_add(1, std::memory_order_relaxed); break;
      case IngestStatus::duplicate: duplicates_.fetch_add(1, std::memory_order_relaxed); break;
      case IngestStatus::dropped_late: dropped_late_.fetch_add(1, std::memory_order_relaxed); break;
    }
    return s;
  }

  StoreConfig config_;
  std::array<Shard, kShards> shards_;
  std::atomic<std::int64_t> watermark_{std::numeric_limits<std::int64_t>::min()};
  std::atomic<std::size_t> member_count_{0};
  std::atomic<bool> closed_{false};
  std::atomic<std::uint64_t> accepted_{0}, duplicates_{0}, dropped_late_{0}, evicted_{0};
};

}  // namespace sessionrank
