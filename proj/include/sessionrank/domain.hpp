// Canonical records shared by every module: identifiers, interaction events,
// the title catalog and simulator datasets, plus their JSONL wire formats.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <tuple>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "sessionrank/error.hpp"

namespace sessionrank {

using Json = nlohmann::json;

using MemberId = std::uint64_t;
using TitleId = std::uint64_t;
using GenreId = std::uint32_t;

/// Genre sets are carried as bitmasks, so genre ids must stay below this.
inline constexpr GenreId kMaxGenres = 64;

enum class ActionType : std::uint8_t { impression = 0, click = 1, add_to_list = 2, play = 3 };
inline constexpr std::size_t kActionCount = 4;

enum class Surface : std::uint8_t { homepage = 0, search = 1, prequery = 2, other = 3 };

constexpr bool is_positive(ActionType a) noexcept { return a != ActionType::impression; }

constexpr std::string_view to_string(ActionType a) noexcept {
  switch (a) {
    case ActionType::impression: return "impression";
    case ActionType::click: return "click";
    case ActionType::add_to_list: return "add_to_list";
    case ActionType::play: return "play";
  }
  return "impression";
}

constexpr std::string_view to_string(Surface s) noexcept {
  switch (s) {
    case Surface::homepage: return "homepage";
    case Surface::search: return "search";
    case Surface::prequery: return "prequery";
    case Surface::other: return "other";
  }
  return "other";
}

inline std::optional<ActionType> parse_action(std::string_view s) noexcept {
  if (s == "impression") return ActionType::impression;
  if (s == "click") return ActionType::click;
  if (s == "add_to_list") return ActionType::add_to_list;
  if (s == "play") return ActionType::play;
  return std::nullopt;
}

/// Unknown or missing surfaces collapse to `other`.
inline Surface parse_surface(std::string_view s) noexcept {
  if (s == "homepage") return Surface::homepage;
  if (s == "search") return Surface::search;
  if (s == "prequery") return Surface::prequery;
  return Surface::other;
}

struct InteractionEvent {
  MemberId member_id = 0;
  TitleId title_id = 0;
  ActionType action = ActionType::impression;
  std::int64_t ts_ms = 0;
  Surface surface = Surface::other;

  friend bool operator==(const InteractionEvent&, const InteractionEvent&) = default;
};

/// Total order used for dedup and per-member buffers: timestamp first.
inline bool event_less(const InteractionEvent& a, const InteractionEvent& b) noexcept {
  return std::tie(a.ts_ms, a.title_id, a.action, a.surface, a.member_id) <
         std::tie(b.ts_ms, b.title_id, b.action, b.surface, b.member_id);
}

inline Json to_json(const InteractionEvent& e) {
  return Json{{"member_id", e.member_id},
              {"title_id", e.title_id},
              {"action", std::string(to_string(e.action))},
              {"ts_ms", e.ts_ms},
              {"surface", std::string(to_string(e.surface))}};
}

namespace detail {

inline std::uint64_t require_id(const Json& raw, const char* field) {
  auto it = raw.find(field);
  if (it == raw.end() || it->is_null()) throw Error(ErrorCode::MissingField, "missing field", field);
  if (it->is_number_unsigned()) return it->get<std::uint64_t>();
  if (it->is_number_integer()) {
    auto v = it->get<std::int64_t>();
    if (v < 0) throw Error(ErrorCode::InvalidField, "identifier must be non-negative", field);
    return static_cast<std::uint64_t>(v);
  }
  throw Error(ErrorCode::InvalidField, "expected an integer", field);
}

}  // namespace detail

/// Validates one raw record (already parsed from JSON) into an event.
inline InteractionEvent validate_event(const Json& raw) {
  if (!raw.is_object()) throw Error(ErrorCode::InvalidField, "event must be a JSON object", "event");
  InteractionEvent e;
  e.member_id = detail::require_id(raw, "member_id");
  e.title_id = detail::require_id(raw, "title_id");

  auto act = raw.find("action");
  if (act == raw.end() || act->is_null()) throw Error(ErrorCode::MissingField, "missing field", "action");
  if (!act->is_string()) throw Error(ErrorCode::InvalidField, "expected a string", "action");
  auto parsed = parse_action(act->get_ref<const std::string&>());
  if (!parsed) throw Error(ErrorCode::UnknownAction, act->get<std::string>(), "action");
  e.action = *parsed;

  auto ts = raw.find("ts_ms");
  if (ts == raw.end() || ts->is_null()) throw Error(ErrorCode::MissingField, "missing field", "ts_ms");
  if (!ts->is_number_integer()) throw Error(ErrorCode::InvalidField, "expected an integer", "ts_ms");
  e.ts_ms = ts->get<std::int64_t>();
  if (e.ts_ms <= 0) throw Error(ErrorCode::NonPositiveTimestamp, std::to_string(e.ts_ms), "ts_ms");

  auto surf = raw.find("surface");
  e.surface = (surf != raw.end() && surf->is_string()) ? parse_surface(surf->get_ref<const std::string&>())
                                                      : Surface::other;
  return e;
}

struct CatalogEntry {
  TitleId title_id = 0;
  std::string name;
  std::vector<GenreId> genres;  // sorted, distinct, size 1-3
  double popularity = 0.0;

  std::uint64_t genre_mask() const noexcept {
    std::uint64_t m = 0;
    for (GenreId g : genres) m |= std::uint64_t{1} << g;
    return m;
  }
};

inline Json to_json(const CatalogEntry& c) {
  return Json{{"title_id", c.title_id}, {"name", c.name}, {"genres", c.genres}, {"popularity", c.popularity}};
}

/// Catalog with O(1) lookup by TitleId. Dense indices follow insertion order.
class Catalog {
 public:
  Catalog() = default;

  /// Throws DuplicateTitleId / EmptyGenres / InvalidField.
  explicit Catalog(std::vector<CatalogEntry> entries) {
    for (std::size_t i = 0; i < entries.size(); ++i) add(std::move(entries[i]), i + 1);
  }

  void add(CatalogEntry entry, std::size_t line = 0) {
    if (entry.genres.empty()) throw Error(ErrorCode::EmptyGenres, "title has no genres", "genres", line);
    std::sort(entry.genres.begin(), entry.genres.end());
    entry.genres.erase(std::unique(entry.genres.begin(), entry.genres.end()), entry.genres.end());
    if (entry.genres.size() > 3) throw Error(ErrorCode::InvalidField, "at most 3 genres", "genres", line);
    if (entry.genres.back() >= kMaxGenres)
      throw Error(ErrorCode::InvalidField, "genre id out of range", "genres", line);
    if (!std::isfinite(entry.popularity) || entry.popularity < 0.0)
      throw Error(ErrorCode::InvalidField, "popularity must be finite and non-negative", "popularity", line);
    if (index_.contains(entry.title_id))
      throw Error(ErrorCode::DuplicateTitleId, std::to_string(entry.title_id), "title_id", line);
    index_.emplace(entry.title_id, entries_.size());
    genre_count_ = std::max<std::size_t>(genre_count_, entry.genres.back() + 1);
    masks_.push_back(entry.genre_mask());
    entries_.push_back(std::move(entry));
  }

  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }
  const std::vector<CatalogEntry>& entries() const noexcept { return entries_; }
  const CatalogEntry& operator[](std::size_t index) const { return entries_[index]; }
  std::uint64_t genre_mask(std::size_t index) const { return masks_[index]; }

  std::optional<std::size_t> index_of(TitleId id) const {
    auto it = index_.find(id);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }
  bool contains(TitleId id) const { return index_.contains(id); }

  const CatalogEntry& at(TitleId id) const {
    auto idx = index_of(id);
    if (!idx) throw Error(ErrorCode::UnknownTitle, std::to_string(id), "title_id");
    return entries_[*idx];
  }

  /// Number of genre slots (max genre id + 1, or larger if set explicitly).
  std::size_t genre_count() const noexcept { return genre_count_; }
  void set_genre_count(std::size_t n) {
    if (n < genre_count_ || n > kMaxGenres) throw Error(ErrorCode::InvalidConfig, "genre count", "n_genres");
    genre_count_ = n;
  }

 private:
  std::vector<CatalogEntry> entries_;
  std::vector<std::uint64_t> masks_;
  std::unordered_map<TitleId, std::size_t> index_;
  std::size_t genre_count_ = 0;
};

struct SessionTruth {
  std::int64_t start_ms = 0;
  std::optional<GenreId> intent_genre;
};

/// Ground-truth annotations the simulator writes for each member.
struct MemberTruth {
  MemberId member_id = 0;
  std::vector<double> pref;
  std::vector<SessionTruth> sessions;
};

struct Dataset {
  Catalog catalog;
  std::vector<InteractionEvent> events;  // sorted by (member_id, ts_ms)
  std::vector<MemberTruth> members;
};

namespace detail {

template <typename F>
void for_each_jsonl_line(const std::filesystem::path& path, F&& f) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    Json obj = Json::parse(line, nullptr, false);
    if (obj.is_discarded() || !obj.is_object()) throw Error(ErrorCode::ParseError, path.string(), {}, lineno);
    f(obj, lineno);
  }
}

inline void write_jsonl_line(std::ostream& out, const Json& obj) { out << obj.dump() << '\n'; }

}  // namespace detail

inline CatalogEntry parse_catalog_entry(const Json& obj, std::size_t line = 0) {
  CatalogEntry c;
  try {
    c.title_id = detail::require_id(obj, "title_id");
  } catch (const Error& e) {
    throw Error(e.code(), e.detail(), e.field(), line);
  }
  auto name = obj.find("name");
  if (name != obj.end() && name->is_string()) c.name = name->get<std::string>();
  auto genres = obj.find("genres");
  if (genres == obj.end() || !genres->is_array()) throw Error(ErrorCode::MissingField, "missing field", "genres", line);
  for (const auto& g : *genres) {
    if (!g.is_number_integer() || g.get<std::int64_t>() < 0)
      throw Error(ErrorCode::InvalidField, "genre ids must be non-negative integers", "genres", line);
    auto v = g.get<std::int64_t>();
    if (v >= static_cast<std::int64_t>(kMaxGenres))
      throw Error(ErrorCode::InvalidField, "genre id out of range", "genres", line);
    c.genres.push_back(static_cast<GenreId>(v));
  }
  auto pop = obj.find("popularity");
  if (pop == obj.end() || !pop->is_number()) throw Error(ErrorCode::MissingField, "missing field", "popularity", line);
  c.popularity = pop->get<double>();
  return c;
}

/// Reads catalog.jsonl. Errors carry the 1-based line number.
inline Catalog load_catalog(const std::filesystem::path& path) {
  Catalog catalog;
  detail::for_each_jsonl_line(path, [&](const Json& obj, std::size_t line) {
    catalog.add(parse_catalog_entry(obj, line), line);
  });
  return catalog;
}

inline std::vector<InteractionEvent> load_events(const std::filesystem::path& path) {
  std::vector<InteractionEvent> events;
  detail::for_each_jsonl_line(path, [&](const Json& obj, std::size_t line) {
    try {
      events.push_back(validate_event(obj));
    } catch (const Error& e) {
      throw Error(e.code(), e.detail(), e.field(), line);
    }
  });
  return events;
}

inline Json to_json(const MemberTruth& m) {
  Json sessions = Json::array();
  for (const auto& s : m.sessions) {
    sessions.push_back(Json{{"start_ms", s.start_ms},
                            {"intent_genre", s.intent_genre ? Json(*s.intent_genre) : Json(nullptr)}});
  }
  return Json{{"member_id", m.member_id}, {"pref", m.pref}, {"sessions", std::move(sessions)}};
}

inline std::vector<MemberTruth> load_members(const std::filesystem::path& path) {
  std::vector<MemberTruth> members;
  detail::for_each_jsonl_line(path, [&](const Json& obj, std::size_t line) {
    try {
      MemberTruth m;
      m.member_id = obj.at("member_id").get<MemberId>();
      m.pref = obj.at("pref").get<std::vector<double>>();
      for (const auto& s : obj.at("sessions")) {
        SessionTruth st;
        st.start_ms = s.at("start_ms").get<std::int64_t>();
        if (s.contains("intent_genre") && !s["intent_genre"].is_null()) st.intent_genre = s["intent_genre"].get<GenreId>();
        m.sessions.push_back(st);
      }
      members.push_back(std::move(m));
    } catch (const Json::exception& e) {
      throw Error(ErrorCode::ParseError, e.what(), {}, line);
    }
  });
  return members;
}

inline void sort_events(std::vector<InteractionEvent>& events) {
  std::stable_sort(events.begin(), events.end(), [](const InteractionEvent& a, const InteractionEvent& b) {
    return std::tie(a.member_id, a.ts_ms) < std::tie(b.member_id, b.ts_ms);
  });
}

/// Loads catalog.jsonl, events.jsonl and (if present) members.jsonl from dir.
/// Events are re-sorted by (member_id, ts_ms) and checked against the catalog.
inline Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  ds.catalog = load_catalog(dir / "catalog.jsonl");
  ds.events = load_events(dir / "events.jsonl");
  sort_events(ds.events);
  for (const auto& e : ds.events) {
    if (!ds.catalog.contains(e.title_id)) throw Error(ErrorCode::UnknownTitle, std::to_string(e.title_id), "title_id");
  }
  if (std::filesystem::exists(dir / "members.jsonl")) {
    ds.members = load_members(dir / "members.jsonl");
    std::size_t genres = ds.catalog.genre_count();
    for (const auto& m : ds.members) genres = std::max(genres, m.pref.size());
    ds.catalog.set_genre_count(genres);
  }
  return ds;
}

inline void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto open = [&](const char* name) {
    std::ofstream out(dir / name, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::IoError, "cannot write " + (dir / name).string());
    return out;
  };
  {
    auto out = open("catalog.jsonl");
    for (const auto& c : ds.catalog.entries()) detail::write_jsonl_line(out, to_json(c));
  }
  {
    auto out = open("events.jsonl");
    for (const auto& e : ds.events) detail::write_jsonl_line(out, to_json(e));
  }
  {
    auto out = open("members.jsonl");
    for (const auto& m : ds.members) detail::write_jsonl_line(out, to_json(m));
  }
}

/// Splits a (member_id, ts_ms)-sorted event list into per-member spans.
inline std::vector<std::span<const InteractionEvent>> group_by_member(std::span<const InteractionEvent> events) {
  std::vector<std::span<const InteractionEvent>> out;
  std::size_t begin = 0;
  for (std::size_t i = 1; i <= events.size(); ++i) {
    if (i == events.size() || events[i].member_id != events[begin].member_id) {
      out.push_back(events.subspan(begin, i - begin));
      begin = i;
    }
  }
  return out;
}

}  // namespace sessionrank
