#include <gtest/gtest.h>

#include <atomic>
#include <thread>

#include "sessionrank/session_store.hpp"
#include "support/properties.hpp"
#include "support/test_util.hpp"

using namespace sessionrank;
using namespace sessionrank::testing;

namespace {
constexpr std::int64_t kTimeout = 1'800'000;
constexpr std::int64_t kT0 = 1'700'000'000'000;
}  // namespace

TEST(Sessionize, GapRuleSplit) {
  std::vector<InteractionEvent> events = {ev(1, 1, ActionType::play, 1), ev(1, 2, ActionType::play, 600'001),
                                          ev(1, 3, ActionType::play, 2'700'001)};
  auto s = sessionize(events, kTimeout);
  ASSERT_EQ(s.size(), 2u);
  EXPECT_EQ(s[0].events, (std::vector<InteractionEvent>{events[0], events[1]}));
  EXPECT_EQ(s[1].events, (std::vector<InteractionEvent>{events[2]}));
  EXPECT_EQ(s[0].start_ms, 1);
  EXPECT_EQ(s[0].end_ms, 600'001);
}

TEST(Sessionize, GapEqualToTimeoutStartsNewSession) {
  std::vector<InteractionEvent> events = {ev(1, 1, ActionType::play, 10), ev(1, 2, ActionType::play, 10 + kTimeout)};
  EXPECT_EQ(sessionize(events, kTimeout).size(), 2u);
  events[1].ts_ms -= 1;
  EXPECT_EQ(sessionize(events, kTimeout).size(), 1u);
}

TEST(Sessionize, EmptyAndSingle) {
  EXPECT_TRUE(sessionize({}, kTimeout).empty());
  std::vector<InteractionEvent> one = {ev(1, 1, ActionType::click, 5)};
  auto s = sessionize(one, kTimeout);
  ASSERT_EQ(s.size(), 1u);
  EXPECT_EQ(s[0].events.size(), 1u);
}

TEST(Sessionize, RejectsUnsortedInput) {
  std::vector<InteractionEvent> events = {ev(1, 1, ActionType::play, 10), ev(1, 2, ActionType::play, 5)};
  try {
    sessionize(events, kTimeout);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::UnsortedInput);
  }
}

TEST(SessionStore, ReadYourWrites) {
  SessionStore store;
  auto e = ev(4, 9, ActionType::play, kT0);
  EXPECT_EQ(store.ingest(e), IngestStatus::accepted);
  auto view = store.snapshot(4, kT0 + 1);
  ASSERT_TRUE(view.current);
  EXPECT_EQ(view.current->events, std::vector<InteractionEvent>{e});
}

TEST(SessionStore, DuplicateIsNoOp) {
  SessionStore store;
  auto e = ev(4, 9, ActionType::play, kT0);
  store.ingest(e);
  EXPECT_EQ(store.ingest(e), IngestStatus::duplicate);
  EXPECT_EQ(store.events(4).size(), 1u);
  // Same timestamp, different action: a distinct event.
  EXPECT_EQ(store.ingest(ev(4, 9, ActionType::click, kT0)), IngestStatus::accepted);
  EXPECT_EQ(store.events(4).size(), 2u);
}

TEST(SessionStore, RingBufferCap) {
  SessionStore store;
  for (int i = 0; i < 501; ++i) store.ingest(ev(2, 1 + i % 7, ActionType::click, kT0 + i * 1000));
  auto events = store.events(2);
  ASSERT_EQ(events.size(), 500u);
  EXPECT_EQ(events.front().ts_ms, kT0 + 1000);
  EXPECT_EQ(events.back().ts_ms, kT0 + 500'000);
  EXPECT_EQ(store.stats().evicted, 1u);
}

TEST(SessionStore, SessionTenMinutesOldIsCurrent) {
  SessionStore store;
  store.ingest(ev(1, 1, ActionType::play, kT0));
  store.ingest(ev(1, 2, ActionType::play, kT0 + 60'000));
  auto view = store.snapshot(1, kT0 + 60'000 + 10 * 60'000);
  ASSERT_TRUE(view.current);
  EXPECT_EQ(view.current->events.size(), 2u);
  EXPECT_TRUE(view.past.empty());
}

TEST(SessionStore, SessionFortyFiveMinutesOldIsPast) {
  SessionStore store;
  store.ingest(ev(1, 1, ActionType::play, kT0));
  auto view = store.snapshot(1, kT0 + 45 * 60'000);
  EXPECT_FALSE(view.current);
  ASSERT_EQ(view.past.size(), 1u);
  EXPECT_EQ(view.past[0].events.size(), 1u);
}

TEST(SessionStore, UnknownMemberHasEmptyView) {
  SessionStore store;
  auto view = store.snapshot(99, kT0);
  EXPECT_FALSE(view.current);
  EXPECT_TRUE(view.past.empty());
}

TEST(SessionStore, PastSessionsMostRecentFirstCappedAtK) {
  SessionStore store;
  for (int s = 0; s < 5; ++s) store.ingest(ev(1, 1 + s, ActionType::play, kT0 + s * 4 * kTimeout));
  auto view = store.snapshot(1, kT0 + 20 * kTimeout);
  EXPECT_FALSE(view.current);
  ASSERT_EQ(view.past.size(), 3u);
  EXPECT_EQ(view.past[0].events[0].title_id, 5u);
  EXPECT_EQ(view.past[2].events[0].title_id, 3u);
}

TEST(SessionStore, LateEventsBeyondRetentionAreDropped) {
  SessionStore store;
  const std::int64_t week = 7LL * 24 * 3600 * 1000;
  store.ingest(ev(1, 1, ActionType::play, kT0));
  store.ingest(ev(2, 1, ActionType::play, kT0 + week + 10));
  EXPECT_TRUE(store.events(1).empty());
  EXPECT_EQ(store.ingest(ev(3, 1, ActionType::play, kT0)), IngestStatus::dropped_late);
  EXPECT_EQ(store.member_count(), 2u);
}

TEST(SessionStore, ClosedStoreRejectsIngest) {
  SessionStore store;
  store.close();
  EXPECT_THROW(store.ingest(ev(1, 1, ActionType::play, kT0)), Error);
}

TEST(SessionStore, OutOfOrderIngestIsSortedOnRead) {
  SessionStore store;
  store.ingest(ev(1, 2, ActionType::play, kT0 + 5000));
  store.ingest(ev(1, 1, ActionType::play, kT0));
  auto events = store.events(1);
  ASSERT_EQ(events.size(), 2u);
  EXPECT_EQ(events[0].title_id, 1u);
}

TEST(SessionStore, ConcurrentIngestAndSnapshot) {
  SessionStore store;
  constexpr int kThreads = 4, kPerThread = 400;
  std::atomic<bool> bad{false};
  std::vector<std::thread> threads;
  for (int t = 0; t < kThreads; ++t) {
    threads.emplace_back([&, t] {
      for (int i = 0; i < kPerThread; ++i) {
        MemberId m = 1 + static_cast<MemberId>(t);
        auto e = ev(m, 1 + i % 11, ActionType::click, kT0 + i * 1000);
        store.ingest(e);
        auto view = store.snapshot(m, e.ts_ms);
        if (!view.current || view.current->events.back() != e) bad = true;
      }
    });
  }
  for (auto& th : threads) th.join();
  EXPECT_FALSE(bad);
  EXPECT_EQ(store.member_count(), static_cast<std::size_t>(kThreads));
  for (int t = 0; t < kThreads; ++t) EXPECT_EQ(store.events(1 + t).size(), static_cast<std::size_t>(kPerThread));
}

TEST(SessionProperties, Partition) {
  auto r = check_partition(10000, 1);
  EXPECT_TRUE(r.ok()) << r.first_failure;
}

TEST(SessionProperties, MonotoneSnapshots) {
  auto r = check_monotone_snapshots(10000, 2);
  EXPECT_TRUE(r.ok()) << r.first_failure;
}

TEST(SessionProperties, DedupIdempotence) {
  auto r = check_dedup_idempotence(10000, 3);
  EXPECT_TRUE(r.ok()) << r.first_failure;
}

TEST(SessionProperties, ViewInvariants) {
  std::mt19937_64 rng(4);
  StoreConfig config;
  for (int i = 0; i < 10000; ++i) {
    auto events = random_stream(rng, config.inactivity_timeout_ms);
    if (events.empty()) continue;
    std::int64_t as_of = events.back().ts_ms + std::uniform_int_distribution<std::int64_t>(0, 3 * kTimeout)(rng);
    auto view = make_view(events, as_of, config);
    ASSERT_EQ(view.current.has_value(), as_of - events.back().ts_ms < config.inactivity_timeout_ms) << i;
    ASSERT_LE(view.past.size(), config.past_sessions_k);
    for (std::size_t k = 0; k < view.past.size(); ++k) {
      if (view.current) ASSERT_LT(view.past[k].end_ms, view.current->start_ms);
      if (k > 0) ASSERT_LT(view.past[k].end_ms, view.past[k - 1].start_ms);
    }
  }
}
