// Synthetic members, catalog and event streams with planted long-term genre
// preferences and per-session intent drift.
//
// Draw order (all from mt19937_64):
//   catalog rng = seed_stream(seed, 0): per title, genre count then genres.
//   member m (0-based) rng = seed_stream(seed, m + 1): pref (one gamma draw
//   per genre), start offset, session count, then per session: shifted flag,
//   intent genre (only if shifted), event count, then per event: inter-event
//   gap (except the first), genre source, title, action, surface. Sessions
//   after the first begin with the inter-session gap draw.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "sessionrank/domain.hpp"
#include "sessionrank/error.hpp"

namespace sessionrank {

/// Probabilities over {play, click, add_to_list, impression}.
struct ActionTable {
  double play = 0.0;
  double click = 0.0;
  double add_to_list = 0.0;
  double impression = 0.0;

  double sum() const noexcept { return play + click + add_to_list + impression; }
};

struct SimConfig {
  std::uint32_t n_members = 2000;
  std::uint32_t n_titles = 10000;
  std::uint32_t n_genres = 20;
  double zipf_s = 1.1;
  double dirichlet_alpha = 0.3;
  double intent_shift_prob = 0.5;
  double session_mixture = 0.8;
  std::uint32_t sessions_min = 5;
  std::uint32_t sessions_max = 15;
  std::uint32_t events_base = 3;
  double events_geometric_p = 0.15;
  std::uint32_t events_max = 30;
  ActionTable match_actions{0.35, 0.40, 0.10, 0.15};
  ActionTable nonmatch_actions{0.10, 0.25, 0.05, 0.60};
  std::int64_t event_gap_min_ms = 10'000;
  std::int64_t event_gap_max_ms = 300'000;
  std::int64_t session_gap_min_ms = 2 * 3'600'000LL;
  std::int64_t session_gap_max_ms = 48 * 3'600'000LL;
  std::int64_t start_ms = 1'700'000'000'000LL;
  std::int64_t start_spread_ms = 24 * 3'600'000LL;
  std::uint64_t seed = 7;

  void validate() const {
    auto bad = [](const char* field, const std::string& why) { throw Error(ErrorCode::InvalidConfig, why, field); };
    auto prob = [&](const char* field, double p) {
      if (!(p >= 0.0 && p <= 1.0)) bad(field, "must be in [0, 1]");
    };
    if (n_members == 0) bad("n_members", "must be positive");
    if (n_titles == 0) bad("n_titles", "must be positive");
    if (n_genres == 0 || n_genres > kMaxGenres) bad("n_genres", "must be in [1, 64]");
    if (!(zipf_s >= 0.0) || !std::isfinite(zipf_s)) bad("zipf_s", "must be finite and non-negative");
    if (!(dirichlet_alpha > 0.0) || !std::isfinite(dirichlet_alpha)) bad("dirichlet_alpha", "must be positive");
    prob("intent_shift_prob", intent_shift_prob);
    prob("session_mixture", session_mixture);
    if (intent_shift_prob > 0.0 && n_genres < 4) bad("n_genres", "intent drift needs a genre outside the top 3");
    if (sessions_min == 0 || sessions_min > sessions_max) bad("sessions_per_member", "need 1 <= min <= max");
    if (!(events_geometric_p > 0.0 && events_geometric_p <= 1.0)) bad("events_geometric_p", "must be in (0, 1]");
    if (events_base == 0 || events_base > events_max) bad("events_per_session", "need 1 <= base <= max");
    for (const auto* t : {&match_actions, &nonmatch_actions}) {
      const char* field = t == &match_actions ? "match_actions" : "nonmatch_actions";
      for (double p : {t->play, t->click, t->add_to_list, t->impression}) prob(field, p);
      if (std::abs(t->sum() - 1.0) > 1e-9) bad(field, "must sum to 1");
    }
    if (event_gap_min_ms <= 0 || event_gap_min_ms > event_gap_max_ms) bad("event_gap_ms", "need 0 < min <= max");
    if (session_gap_min_ms <= 0 || session_gap_min_ms > session_gap_max_ms)
      bad("session_gap_ms", "need 0 < min <= max");
    if (start_ms <= 0 || start_spread_ms < 0) bad("start_ms", "must be positive");
  }
};

inline Json to_json(const ActionTable& t) {
  return Json{{"play", t.play}, {"click", t.click}, {"add_to_list", t.add_to_list}, {"impression", t.impression}};
}

inline Json to_json(const SimConfig& c) {
  return Json{{"n_members", c.n_members},
              {"n_titles", c.n_titles},
              {"n_genres", c.n_genres},
              {"zipf_s", c.zipf_s},
              {"dirichlet_alpha", c.dirichlet_alpha},
              {"intent_shift_prob", c.intent_shift_prob},
              {"session_mixture", c.session_mixture},
              {"sessions_min", c.sessions_min},
              {"sessions_max", c.sessions_max},
              {"events_base", c.events_base},
              {"events_geometric_p", c.events_geometric_p},
              {"events_max", c.events_max},
              {"match_actions", to_json(c.match_actions)},
              {"nonmatch_actions", to_json(c.nonmatch_actions)},
              {"event_gap_min_ms", c.event_gap_min_ms},
              {"event_gap_max_ms", c.event_gap_max_ms},
              {"session_gap_min_ms", c.session_gap_min_ms},
              {"session_gap_max_ms", c.session_gap_max_ms},
              {"start_ms", c.start_ms},
              {"start_spread_ms", c.start_spread_ms},
              {"seed", c.seed}};
}

/// Overlays the fields present in `j` onto the defaults. Unknown keys are
/// rejected so typos do not silently fall back to a default.
inline SimConfig sim_config_from_json(const Json& j, SimConfig c = {}) {
  if (!j.is_object()) throw Error(ErrorCode::InvalidConfig, "config must be a JSON object");
  const Json known = to_json(c);
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.contains(it.key())) throw Error(ErrorCode::InvalidConfig, "unknown key", it.key());
  }
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
    };
    auto table = [&](const char* key, ActionTable& t) {
      if (!j.contains(key)) return;
      const Json& o = j.at(key);
      t = ActionTable{o.at("play").get<double>(), o.at("click").get<double>(), o.at("add_to_list").get<double>(),
                      o.at("impression").get<double>()};
    };
    get("n_members", c.n_members);
    get("n_titles", c.n_titles);
    get("n_genres", c.n_genres);
    get("zipf_s", c.zipf_s);
    get("dirichlet_alpha", c.dirichlet_alpha);
    get("intent_shift_prob", c.intent_shift_prob);
    get("session_mixture", c.session_mixture);
    get("sessions_min", c.sessions_min);
    get("sessions_max", c.sessions_max);
    get("events_base", c.events_base);
    get("events_geometric_p", c.events_geometric_p);
    get("events_max", c.events_max);
    table("match_actions", c.match_actions);
    table("nonmatch_actions", c.nonmatch_actions);
    get("event_gap_min_ms", c.event_gap_min_ms);
    get("event_gap_max_ms", c.event_gap_max_ms);
    get("session_gap_min_ms", c.session_gap_min_ms);
    get("session_gap_max_ms", c.session_gap_max_ms);
    get("start_ms", c.start_ms);
    get("start_spread_ms", c.start_spread_ms);
    get("seed", c.seed);
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::InvalidConfig, e.what());
  }
  c.validate();
  return c;
}

/// splitmix64 of (seed, stream): independent generator seeds per member.
inline std::uint64_t seed_stream(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Inverse-CDF sampler over fixed non-negative weights.
class WeightedSampler {
 public:
  WeightedSampler() = default;
  explicit WeightedSampler(std::span<const double> weights) {
    cumulative_.reserve(weights.size());
    double acc = 0.0;
    for (double w : weights) cumulative_.push_back(acc += w);
  }

  bool empty() const noexcept { return cumulative_.empty() || cumulative_.back() <= 0.0; }
  double total() const noexcept { return cumulative_.empty() ? 0.0 : cumulative_.back(); }

  template <typename Rng>
  std::size_t operator()(Rng& rng) const {
    std::uniform_real_distribution<double> u(0.0, total());
    double x = u(rng);
    auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), x);
    auto i = static_cast<std::size_t>(it - cumulative_.begin());
    // Skip zero-weight slots that upper_bound can land on at the top edge.
    while (i > 0 && (i >= cumulative_.size() || weight(i) == 0.0)) --i;
    return i;
  }

 private:
  double weight(std::size_t i) const { return cumulative_[i] - (i == 0 ? 0.0 : cumulative_[i - 1]); }
  std::vector<double> cumulative_;
};

/// Zipf popularity weight of a 1-based rank, normalized so ranks sum to 1e6.
inline std::vector<double> zipf_popularity(std::uint32_t n, double s) {
  std::vector<double> w(n);
  for (std::uint32_t r = 0; r < n; ++r) w[r] = std::pow(static_cast<double>(r + 1), -s);
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  for (double& x : w) x = x / total * 1e6;
  return w;
}

/// Member's three strongest genres (ties to the lower genre id).
inline std::vector<GenreId> top_genres(const std::vector<double>& pref, std::size_t k = 3) {
  std::vector<GenreId> order(pref.size());
  std::iota(order.begin(), order.end(), GenreId{0});
  std::stable_sort(order.begin(), order.end(), [&](GenreId a, GenreId b) { return pref[a] > pref[b]; });
  order.resize(std::min(k, order.size()));
  return order;
}

namespace detail {

inline ActionType draw_action(const ActionTable& t, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double x = u(rng);
  if ((x -= t.play) < 0) return ActionType::play;
  if ((x -= t.click) < 0) return ActionType::click;
  if ((x -= t.add_to_list) < 0) return ActionType::add_to_list;
  return t.impression > 0 ? ActionType::impression : ActionType::click;
}

}  // namespace detail

/// Titles of the generated catalog have ids 1..n_titles in popularity-rank order.
inline Catalog generate_catalog(const SimConfig& config) {
  std::mt19937_64 rng(seed_stream(config.seed, 0));
  auto popularity = zipf_popularity(config.n_titles, config.zipf_s);
  const std::uint32_t max_genres = std::min<std::uint32_t>(3, config.n_genres);
  std::uniform_int_distribution<std::uint32_t> count(1, max_genres);
  std::vector<GenreId> all(config.n_genres);
  std::iota(all.begin(), all.end(), GenreId{0});
  Catalog catalog;
  for (std::uint32_t i = 0; i < config.n_titles; ++i) {
    CatalogEntry e;
    e.title_id = i + 1;
    e.name = "title-" + std::to_string(i + 1);
    std::uint32_t k = count(rng);
    // Partial Fisher-Yates: the first k of a shuffled genre list.
    for (std::uint32_t j = 0; j < k; ++j) {
      std::uniform_int_distribution<std::uint32_t> pick(j, config.n_genres - 1);
      std::swap(all[j], all[pick(rng)]);
    }
    e.genres.assign(all.begin(), all.begin() + k);
    std::sort(e.genres.begin(), e.genres.end());
    e.popularity = popularity[i];
    catalog.add(std::move(e));
  }
  catalog.set_genre_count(config.n_genres);
  return catalog;
}

/// Deterministic per seed; members are generated independently from their
/// own seed streams, so output does not depend on generation order.
inline Dataset generate(const SimConfig& config) {
  config.validate();
  Dataset ds;
  ds.catalog = generate_catalog(config);
  const Catalog& catalog = ds.catalog;
  const std::uint32_t G = config.n_genres;

  std::vector<WeightedSampler> by_genre(G);
  std::vector<std::vector<std::size_t>> genre_titles(G);
  for (std::size_t i = 0; i < catalog.size(); ++i) {
    for (GenreId g : catalog[i].genres) genre_titles[g].push_back(i);
  }
  for (GenreId g = 0; g < G; ++g) {
    std::vector<double> w;
    for (std::size_t i : genre_titles[g]) w.push_back(catalog[i].popularity);
    by_genre[g] = WeightedSampler(w);
  }

  for (std::uint32_t m = 0; m < config.n_members; ++m) {
    std::mt19937_64 rng(seed_stream(config.seed, std::uint64_t{m} + 1));
    MemberTruth truth;
    truth.member_id = m + 1;
    std::gamma_distribution<double> gamma(config.dirichlet_alpha, 1.0);
    truth.pref.resize(G);
    for (double& p : truth.pref) p = gamma(rng);
    double total = std::accumulate(truth.pref.begin(), truth.pref.end(), 0.0);
    for (double& p : truth.pref) p = total > 0 ? p / total : 1.0 / G;

    // Long-term genre draws are restricted to genres that have titles.
    std::vector<double> usable(truth.pref);
    for (GenreId g = 0; g < G; ++g) {
      if (by_genre[g].empty()) usable[g] = 0.0;
    }
    if (std::accumulate(usable.begin(), usable.end(), 0.0) <= 0.0) {
      for (GenreId g = 0; g < G; ++g) usable[g] = by_genre[g].empty() ? 0.0 : 1.0;
    }
    WeightedSampler long_term(usable);
    const auto top = top_genres(truth.pref);
    std::uint64_t top_mask = 0;
    for (GenreId g : top) top_mask |= std::uint64_t{1} << g;
    std::vector<GenreId> intent_pool;
    for (GenreId g = 0; g < G; ++g) {
      if (!(top_mask >> g & 1) && !by_genre[g].empty()) intent_pool.push_back(g);
    }

    std::uniform_int_distribution<std::int64_t> start(0, config.start_spread_ms);
    std::int64_t ts = config.start_ms + start(rng);
    std::uniform_int_distribution<std::uint32_t> n_sessions(config.sessions_min, config.sessions_max);
    const std::uint32_t sessions = n_sessions(rng);
    std::bernoulli_distribution shifted(config.intent_shift_prob);
    std::bernoulli_distribution from_intent(config.session_mixture);
    std::geometric_distribution<std::uint32_t> extra(config.events_geometric_p);
    std::uniform_int_distribution<std::int64_t> event_gap(config.event_gap_min_ms, config.event_gap_max_ms);
    std::uniform_int_distribution<std::int64_t> session_gap(config.session_gap_min_ms, config.session_gap_max_ms);
    std::uniform_int_distribution<int> surface(0, 3);

    for (std::uint32_t s = 0; s < sessions; ++s) {
      if (s > 0) ts += session_gap(rng);
      SessionTruth st;
      st.start_ms = ts;
      if (shifted(rng) && !intent_pool.empty()) {
        std::uniform_int_distribution<std::size_t> pick(0, intent_pool.size() - 1);
        st.intent_genre = intent_pool[pick(rng)];
      }
      const std::uint32_t n_events =
          std::min<std::uint32_t>(config.events_base + std::min<std::uint32_t>(extra(rng), config.events_max),
                                  config.events_max);
      for (std::uint32_t k = 0; k < n_events; ++k) {
        if (k > 0) ts += event_gap(rng);
        GenreId g = 0;
        if (st.intent_genre && from_intent(rng)) {
          g = *st.intent_genre;
        } else {
          g = static_cast<GenreId>(long_term(rng));
        }
        const std::size_t idx = genre_titles[g][by_genre[g](rng)];
        const std::uint64_t mask = catalog.genre_mask(idx);
        const bool match = st.intent_genre ? (mask >> *st.intent_genre & 1) != 0 : (mask & top_mask) != 0;
        InteractionEvent e;
        e.member_id = truth.member_id;
        e.title_id = catalog[idx].title_id;
        e.action = detail::draw_action(match ? config.match_actions : config.nonmatch_actions, rng);
        e.ts_ms = ts;
        e.surface = static_cast<Surface>(surface(rng));
        ds.events.push_back(e);
      }
      truth.sessions.push_back(st);
    }
    ds.members.push_back(std::move(truth));
  }
  return ds;
}

/// Toy set where the next play is a deterministic function of the session:
/// a member clicks `clicks_per_session` titles of genre g, then plays the
/// genre's anchor title (the first title of g). One genre per title.
inline Dataset make_separable_toy(std::uint64_t seed, std::uint32_t n_members = 400, std::uint32_t n_genres = 5,
                                  std::uint32_t n_titles = 50, std::uint32_t sessions = 4,
                                  std::uint32_t clicks_per_session = 3) {
  if (n_genres == 0 || n_titles < 2 * n_genres || n_genres > kMaxGenres)
    throw Error(ErrorCode::InvalidConfig, "toy set needs at least two titles per genre");
  Dataset ds;
  for (std::uint32_t i = 0; i < n_titles; ++i) {
    CatalogEntry e;
    e.title_id = i + 1;
    e.name = "toy-" + std::to_string(i + 1);
    e.genres = {static_cast<GenreId>(i % n_genres)};
    e.popularity = 1.0;
    ds.catalog.add(std::move(e));
  }
  ds.catalog.set_genre_count(n_genres);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<GenreId> genre(0, n_genres - 1);
  const std::uint32_t per_genre = n_titles / n_genres;
  std::uniform_int_distribution<std::uint32_t> other(1, per_genre - 1);
  for (std::uint32_t m = 0; m < n_members; ++m) {
    MemberTruth truth;
    truth.member_id = m + 1;
    truth.pref.assign(n_genres, 1.0 / n_genres);
    std::int64_t ts = 1'700'000'000'000LL + static_cast<std::int64_t>(m) * 1000;
    for (std::uint32_t s = 0; s < sessions; ++s) {
      const GenreId g = genre(rng);
      truth.sessions.push_back(SessionTruth{ts, g});
      auto emit = [&](std::uint32_t slot, ActionType a) {
        ds.events.push_back(InteractionEvent{truth.member_id, TitleId{slot * n_genres + g + 1}, a, ts,
                                             Surface::homepage});
        ts += 60'000;
      };
      for (std::uint32_t c = 0; c < clicks_per_session; ++c) emit(other(rng), ActionType::click);
      emit(0, ActionType::play);
      ts += 6 * 3'600'000LL;
    }
    ds.members.push_back(std::move(truth));
  }
  return ds;
}

}  // namespace sessionrank
