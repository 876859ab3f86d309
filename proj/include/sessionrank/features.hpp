// Feature pipeline: long-term member profiles, the engineered per-candidate
// feature vector, and the token sequence consumed by sequence encoders.
//
// The feature schema (version 1) is documented in docs/features.md. Every
// feature is exactly 0.0 when its source signal is absent, except f2 which
// only depends on the candidate.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include <boost/container/flat_map.hpp>

#include "sessionrank/domain.hpp"
#include "sessionrank/session_store.hpp"

namespace sessionrank {

inline constexpr std::size_t kFeatureCount = 10;
inline constexpr std::uint32_t kFeatureSchemaVersion = 1;

/// Index of the first in-session feature (f5). f5..f10 are masked for the
/// long-term-only baseline.
inline constexpr std::size_t kFirstSessionFeature = 4;

struct FeatureParams {
  double recency_tau_s = 600.0;
  double cross_session_decay = 0.5;
  double days_cap = 30.0;
  std::size_t session_count_cap = 50;
};

struct MemberProfile {
  MemberId member_id = 0;
  boost::container::flat_map<GenreId, double> genre_affinity;
  boost::container::flat_map<TitleId, std::uint32_t> play_counts;
  boost::container::flat_map<TitleId, std::int64_t> last_positive_ms;

  bool empty() const noexcept { return genre_affinity.empty() && play_counts.empty() && last_positive_ms.empty(); }

  /// Dense affinity vector of length n_genres.
  template <typename T = double>
  std::vector<T> affinity_vector(std::size_t n_genres) const {
    std::vector<T> out(n_genres, T(0));
    for (const auto& [g, w] : genre_affinity) {
      if (g < n_genres) out[g] = static_cast<T>(w);
    }
    return out;
  }
};

/// Long-term profile from events strictly before cutoff_ms. Positive events
/// add one count to every genre of their title; counts are L1-normalized.
inline MemberProfile build_profile(MemberId member, std::span<const InteractionEvent> events, const Catalog& catalog,
                                   std::int64_t cutoff_ms = std::numeric_limits<std::int64_t>::max()) {
  MemberProfile p;
  p.member_id = member;
  boost::container::flat_map<GenreId, std::uint64_t> counts;
  std::uint64_t total = 0;
  for (const auto& e : events) {
    if (e.ts_ms >= cutoff_ms) continue;
    if (!is_positive(e.action)) continue;
    auto idx = catalog.index_of(e.title_id);
    if (!idx) continue;
    for (GenreId g : catalog[*idx].genres) {
      ++counts[g];
      ++total;
    }
    if (e.action == ActionType::play) ++p.play_counts[e.title_id];
    auto& last = p.last_positive_ms[e.title_id];
    last = std::max(last, e.ts_ms);
  }
  p.genre_affinity.reserve(counts.size());
  for (const auto& [g, c] : counts) {
    p.genre_affinity.emplace_hint(p.genre_affinity.end(), g, static_cast<double>(c) / static_cast<double>(total));
  }
  return p;
}

struct FeatureVector {
  std::array<float, kFeatureCount> values{};
  std::uint32_t schema_version = kFeatureSchemaVersion;

  float operator[](std::size_t i) const { return values[i]; }
  friend bool operator==(const FeatureVector&, const FeatureVector&) = default;
};

inline void mask_session_features(FeatureVector& f) noexcept {
  for (std::size_t i = kFirstSessionFeature; i < kFeatureCount; ++i) f.values[i] = 0.0f;
}

/// Per-request precomputation shared by every candidate; build_features over
/// a whole catalog goes through this.
class FeatureContext {
 public:
  FeatureContext(const SessionView& view, const MemberProfile& profile, const Catalog& catalog, std::int64_t now_ms,
                 FeatureParams params = {})
      : profile_(&profile), catalog_(&catalog), params_(params), now_ms_(now_ms) {
    n_genres_ = std::max<std::size_t>(catalog.genre_count(), 1);
    affinity_ = profile.affinity_vector(n_genres_);
    if (view.current) {
      const Session& cur = *view.current;
      session_count_ = cur.events.size();
      session_age_s_ = std::max<double>(0.0, static_cast<double>(now_ms - cur.start_ms) / 1000.0);
      std::vector<double> mean(n_genres_, 0.0);
      std::size_t n_pos = 0;
      for (const auto& e : cur.events) {
        if (!is_positive(e.action)) continue;
        auto idx = catalog.index_of(e.title_id);
        if (!idx) continue;
        double dt = std::max<double>(0.0, static_cast<double>(now_ms - e.ts_ms) / 1000.0);
        current_.push_back({catalog.genre_mask(*idx), std::exp(-dt / params_.recency_tau_s)});
        session_titles_.push_back(e.title_id);
        const auto& genres = catalog[*idx].genres;
        double w = 1.0 / std::sqrt(static_cast<double>(genres.size()));
        for (GenreId g : genres) mean[g] += w;
        ++n_pos;
      }
      std::sort(session_titles_.begin(), session_titles_.end());
      if (n_pos > 0) {
        double norm = 0.0;
        for (auto& m : mean) {
          m /= static_cast<double>(n_pos);
          norm += m * m;
        }
        norm = std::sqrt(norm);
        if (norm > 0.0) {
          for (auto& m : mean) m /= norm;
          session_genre_direction_ = std::move(mean);
        }
      }
    }
    double decay = 1.0;
    for (const auto& s : view.past) {
      decay *= params_.cross_session_decay;
      for (const auto& e : s.events) {
        if (!is_positive(e.action)) continue;
        auto idx = catalog.index_of(e.title_id);
        if (!idx) continue;
        double dt = std::max<double>(0.0, static_cast<double>(s.end_ms - e.ts_ms) / 1000.0);
        past_.push_back({catalog.genre_mask(*idx), decay * std::exp(-dt / params_.recency_tau_s)});
      }
    }
  }

  FeatureVector build(std::size_t candidate_index) const {
    const CatalogEntry& c = (*catalog_)[candidate_index];
    const std::uint64_t mask = catalog_->genre_mask(candidate_index);
    std::array<double, kFeatureCount> f{};

    double aff = 0.0;
    for (GenreId g : c.genres) aff += g < affinity_.size() ? affinity_[g] : 0.0;
    f[0] = aff / static_cast<double>(c.genres.size());
    f[1] = std::log1p(c.popularity);
    if (auto it = profile_->play_counts.find(c.title_id); it != profile_->play_counts.end())
      f[2] = std::log1p(static_cast<double>(it->second));
    if (auto it = profile_->last_positive_ms.find(c.title_id); it != profile_->last_positive_ms.end()) {
      double days = std::max<double>(0.0, static_cast<double>(now_ms_ - it->second) / 86'400'000.0);
      f[3] = std::min(days, params_.days_cap);
    }
    for (const auto& w : current_) {
      if (w.mask & mask) f[4] += w.weight;
    }
    f[5] = std::binary_search(session_titles_.begin(), session_titles_.end(), c.title_id) ? 1.0 : 0.0;
    f[6] = static_cast<double>(std::min(session_count_, params_.session_count_cap)) /
           static_cast<double>(params_.session_count_cap);
    f[7] = session_count_ > 0 ? std::log1p(session_age_s_) : 0.0;
    if (!session_genre_direction_.empty()) {
      double dot = 0.0;
      for (GenreId g : c.genres) dot += session_genre_direction_[g];
      f[8] = dot / std::sqrt(static_cast<double>(c.genres.size()));
    }
    for (const auto& w : past_) {
      if (w.mask & mask) f[9] += w.weight;
    }

    FeatureVector out;
    for (std::size_t i = 0; i < kFeatureCount; ++i) out.values[i] = static_cast<float>(f[i]);
    return out;
  }

  std::size_t session_event_count() const noexcept { return session_count_; }

 private:
  struct Weighted {
    std::uint64_t mask;
    double weight;
  };

  const MemberProfile* profile_;
  const Catalog* catalog_;
  FeatureParams params_;
  std::int64_t now_ms_;
  std::size_t n_genres_ = 1;
  std::vector<double> affinity_;
  std::vector<Weighted> current_;
  std::vector<Weighted> past_;
  std::vector<TitleId> session_titles_;
  std::vector<double> session_genre_direction_;
  std::size_t session_count_ = 0;
  double session_age_s_ = 0.0;
};

inline FeatureVector build_features(const SessionView& view, const MemberProfile& profile,
                                    const CatalogEntry& candidate, const Catalog& catalog, std::int64_t now_ms,
                                    FeatureParams params = {}) {
  auto idx = catalog.index_of(candidate.title_id);
  if (!idx) throw Error(ErrorCode::UnknownCandidate, std::to_string(candidate.title_id), "title_id");
  return FeatureContext(view, profile, catalog, now_ms, params).build(*idx);
}

enum class SessionFlag : std::uint8_t { current = 0, past = 1 };

struct Token {
  TitleId title_id = 0;
  ActionType action = ActionType::impression;
  std::uint8_t time_bucket = 0;
  SessionFlag session_flag = SessionFlag::past;

  friend bool operator==(const Token&, const Token&) = default;
};

inline constexpr std::size_t kTimeBuckets = 8;
inline constexpr std::size_t kMaxSequenceLength = 64;

struct SequenceOptions {
  std::size_t max_len = kMaxSequenceLength;
  bool include_impressions = true;
  bool include_current = true;
};

struct TokenSequence {
  std::vector<Token> tokens;

  std::size_t size() const noexcept { return tokens.size(); }
  bool empty() const noexcept { return tokens.empty(); }
};

/// floor(log2(1 + dt_seconds)) clamped to [0, 7].
inline std::uint8_t time_bucket(double dt_seconds) noexcept {
  if (!(dt_seconds > 0.0)) return 0;
  double b = std::floor(std::log2(1.0 + dt_seconds));
  return static_cast<std::uint8_t>(std::clamp(b, 0.0, static_cast<double>(kTimeBuckets - 1)));
}

/// Past sessions oldest first, then the current session; the last token's
/// bucket measures the gap to as_of_ms. Keeps the most recent max_len tokens.
inline TokenSequence build_sequence(const SessionView& view, const SequenceOptions& options = {}) {
  struct Item {
    const InteractionEvent* event;
    SessionFlag flag;
  };
  std::vector<Item> items;
  auto take = [&](const Session& s, SessionFlag flag) {
    for (const auto& e : s.events) {
      if (is_positive(e.action) || options.include_impressions) items.push_back({&e, flag});
    }
  };
  for (auto it = view.past.rbegin(); it != view.past.rend(); ++it) take(*it, SessionFlag::past);
  if (view.current && options.include_current) take(*view.current, SessionFlag::current);

  TokenSequence seq;
  std::size_t first = items.size() > options.max_len ? items.size() - options.max_len : 0;
  seq.tokens.reserve(items.size() - first);
  for (std::size_t i = first; i < items.size(); ++i) {
    const auto* e = items[i].event;
    std::int64_t next = i + 1 < items.size() ? items[i + 1].event->ts_ms : view.as_of_ms;
    seq.tokens.push_back(Token{e->title_id, e->action,
                               time_bucket(static_cast<double>(next - e->ts_ms) / 1000.0), items[i].flag});
  }
  return seq;
}

}  // namespace sessionrank
