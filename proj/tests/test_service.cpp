#include <gtest/gtest.h>

#include <thread>

#include "sessionrank/loadtest.hpp"
#include "sessionrank/service.hpp"
#include "sessionrank/simulator.hpp"
#include "sessionrank/trainer.hpp"
#include "support/test_util.hpp"

using namespace sessionrank;
using namespace sessionrank::testing;

namespace {

constexpr std::int64_t kNow = 1'800'000'000'000;

struct Trained {
  Dataset ds;
  std::shared_ptr<const Catalog> catalog;
  std::shared_ptr<const RankerModel<float>> model;
};

const Trained& trained() {
  static const Trained t = [] {
    SimConfig c;
    c.n_members = 300;
    c.n_titles = 400;
    c.seed = 21;
    Trained out;
    out.ds = generate(c);
    out.catalog = std::make_shared<const Catalog>(out.ds.catalog);
    StoreConfig store;
    TrainConfig tc;
    tc.epochs = 3;
    ModelConfig mc;
    mc.variant = Variant::mlp;
    auto examples = make_examples(training_split(out.ds, store), store);
    out.model = std::make_shared<const RankerModel<float>>(train(tc, examples, out.ds.catalog, mc).model);
    return out;
  }();
  return t;
}

std::string event_body(MemberId m, TitleId t, const char* action, std::int64_t ts) {
  return Json{{"member_id", m}, {"title_id", t}, {"action", action}, {"ts_ms", ts}, {"surface", "prequery"}}.dump();
}

std::unique_ptr<ServiceCore> make_core(bool demo = false) {
  ServiceConfig config;
  config.demo_mode = demo;
  config.model_version = "mlp-test";
  return std::make_unique<ServiceCore>(config, trained().catalog, trained().model);
}

std::vector<TitleId> items_of(const Json& body) {
  std::vector<TitleId> out;
  for (const auto& it : body.at("items")) out.push_back(it.at("title_id").get<TitleId>());
  return out;
}

}  // namespace

TEST(ServiceCore, ValidEventIsAccepted) {
  auto core = make_core();
  auto r = core->post_event(event_body(1, 3, "play", kNow));
  EXPECT_EQ(r.status, 202);
  EXPECT_EQ(r.body.at("accepted"), true);
  EXPECT_EQ(r.body.at("status"), "accepted");
  EXPECT_EQ(core->post_event(event_body(1, 3, "play", kNow)).body.at("status"), "duplicate");
  EXPECT_EQ(core->store().member_count(), 1u);
}

TEST(ServiceCore, BadEventsAreRejected) {
  auto core = make_core();
  auto r = core->post_event(event_body(1, 3, "watch", kNow));
  EXPECT_EQ(r.status, 400);
  EXPECT_EQ(r.body.at("error"), "UnknownAction");
  EXPECT_EQ(r.body.at("field"), "action");
  EXPECT_EQ(core->post_event("{not json").status, 400);
  r = core->post_event(event_body(1, 999999, "play", kNow));
  EXPECT_EQ(r.status, 400);
  EXPECT_EQ(r.body.at("error"), "UnknownTitle");
  r = core->post_event(R"({"member_id": 1, "title_id": 2, "action": "play"})");
  EXPECT_EQ(r.status, 400);
  EXPECT_EQ(r.body.at("field"), "ts_ms");
  EXPECT_EQ(core->store().member_count(), 0u);
}

TEST(ServiceCore, PostedEventIsVisibleToTheNextRequest) {
  auto core = make_core();
  const MemberId m = 42;
  core->post_event(event_body(m, 5, "click", kNow - 60'000));
  auto before = core->prequery("42", "10", std::nullopt, kNow);
  ASSERT_EQ(before.status, 200);
  EXPECT_EQ(before.body.at("session_events_used"), 1);
  core->post_event(event_body(m, 17, "play", kNow - 1000));
  auto after = core->prequery("42", "10", std::nullopt, kNow);
  EXPECT_EQ(after.body.at("session_events_used"), 2);
  auto trace = core->debug_trace(after.body.at("trace_id").get<std::string>(), "17");
  ASSERT_EQ(trace.status, 200);
  EXPECT_EQ(trace.body.at("features")[0].at("values")[5], 1.0);
  EXPECT_EQ(trace.body.at("snapshot").at("current").at("events").size(), 2u);
}

TEST(ServiceCore, UnknownMemberGetsPopularity) {
  auto core = make_core();
  auto r = core->prequery("777", "5", std::nullopt, kNow);
  ASSERT_EQ(r.status, 200);
  EXPECT_EQ(r.body.at("cold_start"), true);
  EXPECT_EQ(r.body.at("session_events_used"), 0);
  EXPECT_EQ(items_of(r.body), (std::vector<TitleId>{1, 2, 3, 4, 5}));
}

TEST(ServiceCore, ResponseShape) {
  auto core = make_core();
  core->post_event(event_body(3, 8, "click", kNow - 5000));
  auto r = core->prequery("3", "5", "insession", kNow);
  ASSERT_EQ(r.status, 200);
  ASSERT_EQ(r.body.at("items").size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(r.body.at("items")[i].at("rank"), i + 1);
  EXPECT_EQ(r.body.at("model"), "insession");
  EXPECT_EQ(r.body.at("model_version"), "mlp-test");
  EXPECT_EQ(r.body.at("generated_at_ms"), kNow);
  auto b = core->prequery("3", std::nullopt, "baseline", kNow);
  EXPECT_EQ(b.body.at("items").size(), 10u);
  EXPECT_EQ(b.body.at("session_events_used"), 0);
}

TEST(ServiceCore, BadQueriesAre400) {
  auto core = make_core();
  EXPECT_EQ(core->prequery(std::nullopt, std::nullopt, std::nullopt, kNow).status, 400);
  EXPECT_EQ(core->prequery("x", std::nullopt, std::nullopt, kNow).status, 400);
  EXPECT_EQ(core->prequery("1", "0", std::nullopt, kNow).status, 400);
  EXPECT_EQ(core->prequery("1", "101", std::nullopt, kNow).status, 400);
  auto r = core->prequery("1", "5", "fancy", kNow);
  EXPECT_EQ(r.status, 400);
  EXPECT_EQ(r.body.at("field"), "model");
}

TEST(ServiceCore, HealthAndMissingModel) {
  auto core = make_core();
  auto h = core->health();
  EXPECT_EQ(h.status, 200);
  EXPECT_EQ(h.body.at("status"), "ok");
  EXPECT_EQ(h.body.at("variant"), "mlp");
  core->post_event(event_body(1, 1, "play", kNow));
  core->post_event(event_body(2, 1, "play", kNow));
  EXPECT_EQ(core->health().body.at("store_members"), 2);

  ServiceCore empty(ServiceConfig{}, trained().catalog, nullptr);
  EXPECT_EQ(empty.health().status, 503);
  EXPECT_EQ(empty.prequery("1", std::nullopt, std::nullopt, kNow).status, 503);
}

TEST(ServiceCore, TraceReproducesTheRequest) {
  auto core = make_core();
  for (int i = 0; i < 4; ++i) core->post_event(event_body(9, 20 + i, "click", kNow - 100'000 + i * 1000));
  auto r = core->prequery("9", "10", std::nullopt, kNow);
  const auto id = r.body.at("trace_id").get<std::string>();
  auto t1 = core->debug_trace(id, std::nullopt);
  ASSERT_EQ(t1.status, 200);
  EXPECT_EQ(t1.body.at("items").get<std::vector<TitleId>>(), items_of(r.body));
  EXPECT_EQ(t1.body.at("features").size(), 10u);
  // Later events do not change the recorded trace.
  core->post_event(event_body(9, 30, "play", kNow + 1));
  EXPECT_EQ(core->debug_trace(id, std::nullopt).body, t1.body);
  EXPECT_EQ(core->debug_trace("ffffffffffff", std::nullopt).status, 404);
  EXPECT_EQ(core->debug_trace(id, "99999").status, 400);
}

TEST(ServiceCore, MembersAreIsolated) {
  auto core = make_core();
  auto before = core->prequery("2", "10", std::nullopt, kNow);
  for (int i = 0; i < 5; ++i) core->post_event(event_body(1, 50 + i, "play", kNow - 10'000 + i));
  auto after = core->prequery("2", "10", std::nullopt, kNow);
  EXPECT_EQ(items_of(before.body), items_of(after.body));
}

TEST(ServiceCore, DemoClockHeader) {
  auto demo = make_core(true);
  EXPECT_EQ(demo->request_now("1234567"), 1234567);
  EXPECT_GT(demo->request_now("garbage"), 1'600'000'000'000);
  auto live = make_core(false);
  EXPECT_GT(live->request_now("1234567"), 1'600'000'000'000);
}

TEST(ServiceCore, SessionIntentMovesTheRanking) {
  const auto& t = trained();
  auto core = make_core();
  const GenreId target = 7;
  std::vector<TitleId> genre7, other;
  for (const auto& e : t.catalog->entries()) {
    bool has = std::count(e.genres.begin(), e.genres.end(), target) > 0;
    (has ? genre7 : other).push_back(e.title_id);
  }
  ASSERT_GE(genre7.size(), 10u);
  const MemberId m = 5000;
  // Two days ago: a long session outside genre 7.
  std::int64_t ts = kNow - 2 * 86'400'000LL;
  for (int i = 0; i < 15; ++i) core->post_event(event_body(m, other[static_cast<std::size_t>(i) * 7 % other.size()], "play", ts += 30'000));
  ts = kNow - 5 * 60'000;
  for (int i = 0; i < 4; ++i) core->post_event(event_body(m, genre7[static_cast<std::size_t>(i) + 10], "click", ts += 30'000));

  auto count7 = [&](const ServiceResponse& r) {
    int n = 0;
    for (TitleId id : items_of(r.body)) {
      const auto& g = t.catalog->at(id).genres;
      n += std::count(g.begin(), g.end(), target) > 0;
    }
    return n;
  };
  auto in = core->prequery("5000", "10", "insession", kNow);
  auto base = core->prequery("5000", "10", "baseline", kNow);
  EXPECT_EQ(in.body.at("session_events_used"), 4);
  EXPECT_GT(count7(in), count7(base));
  EXPECT_GE(count7(in), 3);
}

TEST(HttpService, EndToEnd) {
  auto core = make_core(true);
  core->store();
  ServiceConfig cfg = core->config();
  HttpService http(*core);
  int port = http.bind("127.0.0.1", 0);
  ASSERT_GT(port, 0);
  std::thread server([&] { http.listen_after_bind(); });
  http.wait_until_ready();

  httplib::Client client("127.0.0.1", port);
  auto h = client.Get("/v1/health");
  ASSERT_TRUE(h);
  EXPECT_EQ(h->status, 200);
  EXPECT_EQ(h->get_header_value("Cache-Control"), "no-store");

  auto p = client.Post("/v1/events", event_body(11, 4, "play", kNow - 1000), "application/json");
  ASSERT_TRUE(p);
  EXPECT_EQ(p->status, 202);
  auto bad = client.Post("/v1/events", event_body(11, 4, "watch", kNow), "application/json");
  EXPECT_EQ(bad->status, 400);
  EXPECT_EQ(Json::parse(bad->body).at("error"), "UnknownAction");

  httplib::Headers headers{{"X-Demo-Now-Ms", std::to_string(kNow)}};
  auto g = client.Get("/v1/recommendations/prequery?member_id=11&k=5", headers);
  ASSERT_TRUE(g);
  EXPECT_EQ(g->status, 200);
  EXPECT_EQ(g->get_header_value("Cache-Control"), "no-store");
  auto body = Json::parse(g->body);
  EXPECT_EQ(body.at("generated_at_ms"), kNow);
  EXPECT_EQ(body.at("session_events_used"), 1);
  EXPECT_EQ(body.at("items").size(), 5u);

  auto tr = client.Get("/v1/debug/trace/" + body.at("trace_id").get<std::string>());
  ASSERT_TRUE(tr);
  EXPECT_EQ(tr->status, 200);
  EXPECT_EQ(client.Get("/nope")->status, 404);

  http.stop();
  server.join();
}

TEST(HttpService, ServesStaticBundle) {
  TempDir dir("static");
  write_text(dir / "index.html", "<html>demo</html>");
  ServiceConfig config;
  config.static_dir = dir.path();
  ServiceCore core(config, trained().catalog, trained().model);
  HttpService http(core);
  int port = http.bind("127.0.0.1", 0);
  std::thread server([&] { http.listen_after_bind(); });
  http.wait_until_ready();
  httplib::Client client("127.0.0.1", port);
  auto r = client.Get("/demo/index.html");
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 200);
  EXPECT_EQ(r->body, "<html>demo</html>");
  http.stop();
  server.join();
}

TEST(LoadTest, RejectsNonPositiveRate) {
  LoadTestConfig c;
  c.rps = 0;
  EXPECT_THROW(run_loadtest(c), Error);
  c.rps = 10;
  c.port = 1;
  try {
    run_loadtest(c);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::TargetUnreachable);
  }
}

TEST(LoadTest, ShortRunCountsAddUp) {
  auto core = make_core();
  HttpService http(*core);
  int port = http.bind("127.0.0.1", 0);
  std::thread server([&] { http.listen_after_bind(); });
  http.wait_until_ready();
  LoadTestConfig c;
  c.port = port;
  c.rps = 50;
  c.duration_s = 2;
  c.n_members = 50;
  c.n_titles = trained().catalog->size();
  c.workers = 4;
  auto r = run_loadtest(c);
  http.stop();
  server.join();
  EXPECT_EQ(r.requests, 100u);
  EXPECT_EQ(r.get.requests + r.post.requests, r.requests);
  EXPECT_EQ(r.errors, 0u);
  EXPECT_NEAR(r.elapsed_s, 2.0, 0.5);
  EXPECT_LE(r.p50_ms, r.p95_ms);
  EXPECT_LE(r.p95_ms, r.p99_ms);
  EXPECT_LE(r.p99_ms, r.max_ms);
}

TEST(LoadTest, Percentiles) {
  std::vector<double> v;
  for (int i = 1; i <= 100; ++i) v.push_back(i);
  EXPECT_EQ(percentile_ms(v, 50), 50);
  EXPECT_EQ(percentile_ms(v, 99), 99);
  EXPECT_EQ(percentile_ms(v, 100), 100);
  EXPECT_EQ(percentile_ms({}, 50), 0);
}
