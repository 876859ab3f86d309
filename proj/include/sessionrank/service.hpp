// Just-in-time serving: event ingestion, cache-free pre-query ranking with a
// read-your-writes freshness contract, health, and request trace replay.
//
// ServiceCore holds all behavior and is HTTP-agnostic; HttpService binds it
// to cpp-httplib routes.

#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "sessionrank/http.hpp"

#include "sessionrank/domain.hpp"
#include "sessionrank/error.hpp"
#include "sessionrank/features.hpp"
#include "sessionrank/model.hpp"
#include "sessionrank/ranker.hpp"
#include "sessionrank/session_store.hpp"

namespace sessionrank {

struct ServiceConfig {
  StoreConfig store;
  FeatureParams features;
  bool demo_mode = false;
  std::size_t trace_capacity = 10'000;
  std::size_t max_k = 100;
  // Each keep-alive connection pins a worker, so this bounds concurrent clients.
  std::size_t http_threads = 64;
  std::string model_version = "unversioned";
  std::filesystem::path static_dir;  // served under /demo when set
};

/// Applies SESSIONRANK_TIMEOUT_MS when set to a positive integer.
inline void apply_env_overrides(ServiceConfig& config) {
  if (const char* v = std::getenv("SESSIONRANK_TIMEOUT_MS")) {
    char* end = nullptr;
    long long ms = std::strtoll(v, &end, 10);
    if (end == v || *end != '\0' || ms <= 0)
      throw Error(ErrorCode::InvalidConfig, "SESSIONRANK_TIMEOUT_MS must be a positive integer",
                  "SESSIONRANK_TIMEOUT_MS");
    config.store.inactivity_timeout_ms = ms;
  }
}

inline std::int64_t wall_clock_ms() {
  using namespace std::chrono;
  return duration_cast<milliseconds>(system_clock::now().time_since_epoch()).count();
}

/// What a ranking request saw, kept for replay via the debug endpoint.
struct RequestTrace {
  std::uint64_t id = 0;
  MemberId member_id = 0;
  InputMode mode = InputMode::insession;
  std::int64_t as_of_ms = 0;
  std::size_t k = 0;
  SessionView view;
  MemberProfile profile;
  std::vector<TitleId> items;
  std::size_t session_events_used = 0;
  bool cold_start = false;
  std::string model_version;
  std::uint64_t snapshot_hash = 0;
};

/// Fixed-size ring of traces. Slot i holds the trace whose id is congruent
/// to i; each slot has its own lock so recording never serializes requests.
class TraceRing {
 public:
  explicit TraceRing(std::size_t capacity) : slots_(std::max<std::size_t>(capacity, 1)) {}

  void put(std::shared_ptr<const RequestTrace> trace) {
    Slot& s = slots_[trace->id % slots_.size()];
    std::lock_guard lock(s.mu);
    s.trace = std::move(trace);
  }

  std::shared_ptr<const RequestTrace> get(std::uint64_t id) const {
    const Slot& s = slots_[id % slots_.size()];
    std::lock_guard lock(s.mu);
    if (s.trace && s.trace->id == id) return s.trace;
    return nullptr;
  }

  std::size_t capacity() const noexcept { return slots_.size(); }

 private:
  struct Slot {
    mutable std::mutex mu;
    std::shared_ptr<const RequestTrace> trace;
  };
  std::vector<Slot> slots_;
};

inline std::string format_trace_id(std::uint64_t id) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(id));
  return buf;
}

inline std::optional<std::uint64_t> parse_trace_id(std::string_view s) {
  if (s.empty() || s.size() > 16) return std::nullopt;
  std::uint64_t v = 0;
  for (char c : s) {
    int d = c >= '0' && c <= '9' ? c - '0' : c >= 'a' && c <= 'f' ? c - 'a' + 10 : -1;
    if (d < 0) return std::nullopt;
    v = v << 4 | static_cast<std::uint64_t>(d);
  }
  return v;
}

inline std::uint64_t snapshot_hash(const SessionView& view) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xFF;
      h *= 0x100000001b3ULL;
    }
  };
  auto session = [&](const Session& s) {
    mix(s.events.size());
    for (const auto& e : s.events) {
      mix(e.title_id);
      mix(static_cast<std::uint64_t>(e.ts_ms));
      mix(static_cast<std::uint64_t>(e.action));
      mix(static_cast<std::uint64_t>(e.surface));
    }
  };
  mix(static_cast<std::uint64_t>(view.as_of_ms));
  mix(view.current ? 1 : 0);
  if (view.current) session(*view.current);
  mix(view.past.size());
  for (const auto& s : view.past) session(s);
  return h;
}

inline Json to_json(const Session& s) {
  Json events = Json::array();
  for (const auto& e : s.events) events.push_back(to_json(e));
  return Json{{"start_ms", s.start_ms}, {"end_ms", s.end_ms}, {"events", events}};
}

inline Json to_json(const SessionView& v) {
  Json past = Json::array();
  for (const auto& s : v.past) past.push_back(to_json(s));
  return Json{{"as_of_ms", v.as_of_ms}, {"current", v.current ? to_json(*v.current) : Json(nullptr)}, {"past", past}};
}

/// A response independent of the transport: status code plus JSON body.
struct ServiceResponse {
  int status = 200;
  Json body;
};

inline ServiceResponse error_response(int status, const Error& e) {
  Json body{{"error", std::string(to_string(e.code()))}, {"message", e.detail()}};
  if (!e.field().empty()) body["field"] = e.field();
  return {status, body};
}

class ServiceCore {
 public:
  /// `model` may be null, in which case health and ranking report 503.
  /// Without a separate baseline model, the baseline runs the same weights
  /// with session inputs masked.
  ServiceCore(ServiceConfig config, std::shared_ptr<const Catalog> catalog,
              std::shared_ptr<const RankerModel<float>> model,
              std::shared_ptr<const RankerModel<float>> baseline = nullptr)
      : config_(std::move(config)), catalog_(std::move(catalog)), store_(config_.store),
        traces_(config_.trace_capacity), next_trace_(seed_trace_counter()) {
    if (!catalog_ || catalog_->empty()) throw Error(ErrorCode::EmptyCatalog, "catalog is empty");
    if (model) {
      insession_ = std::make_shared<const Ranker>(with_mode(model, InputMode::insession), catalog_, config_.features);
      baseline_ = std::make_shared<const Ranker>(with_mode(baseline ? baseline : model, InputMode::baseline), catalog_,
                                                 config_.features);
    }
  }

  const ServiceConfig& config() const noexcept { return config_; }
  SessionStore& store() noexcept { return store_; }
  const SessionStore& store() const noexcept { return store_; }
  const Catalog& catalog() const noexcept { return *catalog_; }
  bool model_loaded() const noexcept { return insession_ != nullptr; }

  /// Validates and ingests one event. Unknown titles are rejected so every
  /// stored event can be ranked against.
  InteractionEvent validate(const Json& body) const {
    InteractionEvent e = validate_event(body);
    if (!catalog_->contains(e.title_id))
      throw Error(ErrorCode::UnknownTitle, "title " + std::to_string(e.title_id) + " is not in the catalog",
                  "title_id");
    return e;
  }

  ServiceResponse post_event(std::string_view body_text) {
    Json body = Json::parse(body_text, nullptr, false);
    if (body.is_discarded()) return error_response(400, Error(ErrorCode::ParseError, "body is not valid JSON"));
    try {
      InteractionEvent e = validate(body);
      IngestStatus status = store_.ingest(e);
      const char* s = status == IngestStatus::accepted    ? "accepted"
                      : status == IngestStatus::duplicate ? "duplicate"
                                                          : "dropped_late";
      return {202, Json{{"accepted", true}, {"status", s}, {"trace_id", format_trace_id(next_id())}}};
    } catch (const Error& e) {
      return error_response(e.code() == ErrorCode::StoreClosed ? 503 : 400, e);
    }
  }

  /// Ranks for one member against a fresh snapshot taken now.
  ServiceResponse prequery(std::optional<std::string_view> member_param, std::optional<std::string_view> k_param,
                           std::optional<std::string_view> model_param, std::int64_t now_ms) {
    std::uint64_t member = 0;
    std::size_t k = 10;
    InputMode mode = InputMode::insession;
    try {
      if (!member_param) throw Error(ErrorCode::MissingField, "member_id is required", "member_id");
      member = parse_uint(*member_param, "member_id");
      if (k_param) {
        std::uint64_t v = parse_uint(*k_param, "k");
        if (v < 1 || v > config_.max_k)
          throw Error(ErrorCode::InvalidField, "k must be in [1, " + std::to_string(config_.max_k) + "]", "k");
        k = static_cast<std::size_t>(v);
      }
      if (model_param) {
        if (*model_param == "insession") {
          mode = InputMode::insession;
        } else if (*model_param == "baseline") {
          mode = InputMode::baseline;
        } else {
          throw Error(ErrorCode::InvalidField, "model must be insession or baseline", "model");
        }
      }
    } catch (const Error& e) {
      return error_response(400, e);
    }
    if (!model_loaded()) return error_response(503, Error(ErrorCode::IoError, "model not loaded"));

    const Ranker& ranker = mode == InputMode::insession ? *insession_ : *baseline_;
    auto trace = std::make_shared<RequestTrace>();
    trace->id = next_id();
    trace->member_id = member;
    trace->mode = mode;
    trace->as_of_ms = now_ms;
    trace->k = k;
    trace->model_version = config_.model_version;
    // One copy of the buffer feeds both the view and the profile.
    auto events = store_.events(member);
    trace->view = make_view(events, now_ms, config_.store);
    trace->profile = build_profile(member, events, *catalog_);
    trace->snapshot_hash = snapshot_hash(trace->view);
    RankedList ranked = ranker.rank(trace->view, trace->profile, now_ms, k);
    trace->cold_start = ranked.cold_start;
    trace->session_events_used = mode == InputMode::insession ? trace->view.current_event_count() : 0;

    Json items = Json::array();
    for (const auto& item : ranked.items) {
      trace->items.push_back(item.title_id);
      items.push_back(Json{{"title_id", item.title_id}, {"score", item.score}, {"rank", item.rank}});
    }
    Json body{{"member_id", member},
              {"generated_at_ms", now_ms},
              {"model", mode == InputMode::insession ? "insession" : "baseline"},
              {"items", items},
              {"session_events_used", trace->session_events_used},
              {"cold_start", trace->cold_start},
              {"trace_id", format_trace_id(trace->id)},
              {"model_version", config_.model_version}};
    traces_.put(std::move(trace));
    return {200, body};
  }

  ServiceResponse health() const {
    if (!model_loaded()) {
      return {503, Json{{"status", "unavailable"}, {"model_version", nullptr}, {"store_members", store_.member_count()}}};
    }
    return {200, Json{{"status", "ok"},
                      {"model_version", config_.model_version},
                      {"store_members", store_.member_count()},
                      {"variant", std::string(to_string(insession_->model().config.variant))}}};
  }

  /// Replays a recorded request: its snapshot, profile, and the exact
  /// feature vector (or token sequence) behind each returned item. With
  /// `title_id` the feature vector of that single title is returned instead.
  ServiceResponse debug_trace(std::string_view id_text, std::optional<std::string_view> title_param) const {
    auto id = parse_trace_id(id_text);
    auto trace = id ? traces_.get(*id) : nullptr;
    if (!trace) return error_response(404, Error(ErrorCode::InvalidArgument, "unknown or expired trace id", "trace_id"));
    const Ranker& ranker = trace->mode == InputMode::insession ? *insession_ : *baseline_;
    const auto& mc = ranker.model().config;

    std::vector<TitleId> titles = trace->items;
    if (title_param) {
      try {
        TitleId t = parse_uint(*title_param, "title_id");
        if (!catalog_->contains(t)) throw Error(ErrorCode::UnknownCandidate, "title not in catalog", "title_id");
        titles = {t};
      } catch (const Error& e) {
        return error_response(400, e);
      }
    }
    FeatureContext ctx(trace->view, trace->profile, *catalog_, trace->as_of_ms, config_.features);
    Json features = Json::array();
    for (TitleId t : titles) {
      FeatureVector fv = ctx.build(*catalog_->index_of(t));
      if (trace->mode == InputMode::baseline) mask_session_features(fv);
      Json values = Json::array();
      for (float v : fv.values) values.push_back(v);
      features.push_back(Json{{"title_id", t}, {"values", values}, {"schema_version", fv.schema_version}});
    }
    Json tokens = Json::array();
    if (is_sequence_variant(mc.variant)) {
      SequenceOptions opts;
      opts.max_len = mc.max_len;
      opts.include_current = trace->mode == InputMode::insession;
      for (const auto& tok : build_sequence(trace->view, opts).tokens) {
        tokens.push_back(Json{{"title_id", tok.title_id},
                              {"action", std::string(to_string(tok.action))},
                              {"time_bucket", tok.time_bucket},
                              {"session_flag", tok.session_flag == SessionFlag::current ? "current" : "past"}});
      }
    }
    Json affinity = Json::object();
    for (const auto& [g, w] : trace->profile.genre_affinity) affinity[std::to_string(g)] = w;
    char hash[17];
    std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(trace->snapshot_hash));
    Json items = Json::array();
    for (TitleId t : trace->items) items.push_back(t);
    return {200, Json{{"trace_id", format_trace_id(trace->id)},
                      {"member_id", trace->member_id},
                      {"model", trace->mode == InputMode::insession ? "insession" : "baseline"},
                      {"model_version", trace->model_version},
                      {"variant", std::string(to_string(mc.variant))},
                      {"as_of_ms", trace->as_of_ms},
                      {"k", trace->k},
                      {"cold_start", trace->cold_start},
                      {"session_events_used", trace->session_events_used},
                      {"snapshot_hash", hash},
                      {"snapshot", to_json(trace->view)},
                      {"profile", Json{{"genre_affinity", affinity}}},
                      {"items", items},
                      {"features", features},
                      {"tokens", tokens}}};
  }

  /// Request time: wall clock, or X-Demo-Now-Ms in demo mode.
  std::int64_t request_now(std::optional<std::string_view> demo_header) const {
    if (config_.demo_mode && demo_header) {
      char* end = nullptr;
      std::string s(*demo_header);
      long long v = std::strtoll(s.c_str(), &end, 10);
      if (end != s.c_str() && *end == '\0' && v > 0) return v;
    }
    return wall_clock_ms();
  }

 private:
  static std::shared_ptr<const RankerModel<float>> with_mode(std::shared_ptr<const RankerModel<float>> m,
                                                            InputMode mode) {
    if (m->config.input_mode == mode) return m;
    auto copy = std::make_shared<RankerModel<float>>(*m);
    copy->config.input_mode = mode;
    return copy;
  }

  static std::uint64_t parse_uint(std::string_view s, const char* field) {
    if (s.empty() || s.size() > 19) throw Error(ErrorCode::InvalidField, "expected a non-negative integer", field);
    std::uint64_t v = 0;
    for (char c : s) {
      if (c < '0' || c > '9') throw Error(ErrorCode::InvalidField, "expected a non-negative integer", field);
      v = v * 10 + static_cast<std::uint64_t>(c - '0');
    }
    return v;
  }

  static std::uint64_t seed_trace_counter() {
    // Ids from different boots should not collide in logs.
    return static_cast<std::uint64_t>(wall_clock_ms()) << 20;
  }

  std::uint64_t next_id() noexcept { return next_trace_.fetch_add(1, std::memory_order_relaxed); }

  ServiceConfig config_;
  std::shared_ptr<const Catalog> catalog_;
  std::shared_ptr<const Ranker> insession_;
  std::shared_ptr<const Ranker> baseline_;
  SessionStore store_;
  TraceRing traces_;
  std::atomic<std::uint64_t> next_trace_;
};

/// HTTP binding. Every response carries Cache-Control: no-store.
class HttpService {
 public:
  explicit HttpService(ServiceCore& core) : core_(core) { install(); }

  httplib::Server& server() noexcept { return server_; }

  /// Binds to host:port (port 0 picks a free port) and returns the port.
  int bind(const std::string& host, int port) {
    if (port == 0) return server_.bind_to_any_port(host);
    if (!server_.bind_to_port(host, port)) throw Error(ErrorCode::IoError, "cannot bind port " + std::to_string(port));
    return port;
  }
  void listen_after_bind() { server_.listen_after_bind(); }
  void stop() { server_.stop(); }
  void wait_until_ready() const { server_.wait_until_ready(); }

 private:
  static void send(httplib::Response& res, const ServiceResponse& r) {
    res.status = r.status;
    res.set_header("Cache-Control", "no-store");
    res.set_content(r.body.dump(), "application/json");
  }

  // Points into req.params, which outlives the handler.
  static std::optional<std::string_view> param(const httplib::Request& req, const char* name) {
    auto it = req.params.find(name);
    if (it == req.params.end()) return std::nullopt;
    return std::string_view(it->second);
  }

  void install() {
    const std::size_t threads = std::max<std::size_t>(1, core_.config().http_threads);
    server_.new_task_queue = [threads] { return new httplib::ThreadPool(threads); };
    server_.set_tcp_nodelay(true);
    server_.Post("/v1/events", [this](const httplib::Request& req, httplib::Response& res) {
      send(res, core_.post_event(req.body));
    });
    server_.Get("/v1/recommendations/prequery", [this](const httplib::Request& req, httplib::Response& res) {
      std::optional<std::string> demo;
      if (req.has_header("X-Demo-Now-Ms")) demo = req.get_header_value("X-Demo-Now-Ms");
      const std::int64_t now = core_.request_now(demo ? std::optional<std::string_view>(*demo) : std::nullopt);
      send(res, core_.prequery(param(req, "member_id"), param(req, "k"), param(req, "model"), now));
    });
    server_.Get("/v1/health", [this](const httplib::Request&, httplib::Response& res) { send(res, core_.health()); });
    server_.Get(R"(/v1/debug/trace/([0-9a-f]+))", [this](const httplib::Request& req, httplib::Response& res) {
      send(res, core_.debug_trace(req.matches[1].str(), param(req, "title_id")));
    });
    if (!core_.config().static_dir.empty()) server_.set_mount_point("/demo", core_.config().static_dir.string());
    server_.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
      ServiceResponse r{500, Json{{"error", "InternalError"}}};
      try {
        std::rethrow_exception(ep);
      } catch (const Error& e) {
        r = error_response(500, e);
      } catch (const std::exception& e) {
        r.body["message"] = e.what();
      }
      send(res, r);
    });
    server_.set_error_handler([](const httplib::Request&, httplib::Response& res) {
      if (!res.body.empty()) return;
      res.set_header("Cache-Control", "no-store");
      res.set_content(Json{{"error", "NotFound"}, {"status", res.status}}.dump(), "application/json");
    });
  }

  ServiceCore& core_;
  httplib::Server server_;
};

/// Replays a JSONL event file through the store; returns accepted count.
inline std::size_t replay_events(ServiceCore& core, const std::filesystem::path& path) {
  auto events = load_events(path);
  std::stable_sort(events.begin(), events.end(),
                   [](const InteractionEvent& a, const InteractionEvent& b) { return a.ts_ms < b.ts_ms; });
  std::size_t accepted = 0;
  for (const auto& e : events) {
    if (!core.catalog().contains(e.title_id)) continue;
    if (core.store().ingest(e) == IngestStatus::accepted) ++accepted;
  }
  return accepted;
}

}  // namespace sessionrank
