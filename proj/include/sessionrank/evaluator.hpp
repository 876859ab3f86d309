// Leave-last-positive-out offline evaluation over the full catalog, plus
// paired bootstrap lift between two scorers.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "sessionrank/domain.hpp"
#include "sessionrank/features.hpp"
#include "sessionrank/ranker.hpp"
#include "sessionrank/session_store.hpp"
#include "sessionrank/simulator.hpp"
#include "sessionrank/trainer.hpp"

namespace sessionrank {

struct EvalPoint {
  MemberId member_id = 0;
  std::int64_t as_of_ms = 0;
  SessionView view;
  MemberProfile profile;
  TitleId target_title = 0;
  std::size_t target_index = 0;
  std::optional<bool> shifted;  // simulator ground truth, when available
  bool cold = false;            // no positive event before the held-out session
};

/// One point per member: the last positive event of the member's final
/// session, provided at least `min_prior` session events precede it.
inline std::vector<EvalPoint> make_eval_points(const Dataset& ds, const StoreConfig& config,
                                               std::size_t min_prior = 2) {
  config.validate();
  std::map<MemberId, const MemberTruth*> truth;
  for (const auto& m : ds.members) truth[m.member_id] = &m;

  std::vector<EvalPoint> points;
  for (auto member : group_by_member(ds.events)) {
    auto ranges = session_ranges(member, config.inactivity_timeout_ms);
    if (ranges.empty()) continue;
    auto [begin, end] = ranges.back();
    std::optional<std::size_t> target;
    for (std::size_t j = end; j-- > begin + min_prior;) {
      if (is_positive(member[j].action)) {
        target = j;
        break;
      }
    }
    if (!target) continue;
    const auto& e = member[*target];
    EvalPoint p;
    p.member_id = e.member_id;
    p.as_of_ms = e.ts_ms - 1;
    auto hist = history_before(member, e.ts_ms);
    p.view = make_view(hist, p.as_of_ms, config);
    p.profile = build_profile(e.member_id, hist, ds.catalog, e.ts_ms);
    p.target_title = e.title_id;
    p.target_index = *ds.catalog.index_of(e.title_id);
    p.cold = std::none_of(member.begin(), member.begin() + static_cast<std::ptrdiff_t>(begin),
                          [](const InteractionEvent& x) { return is_positive(x.action); });
    if (auto it = truth.find(e.member_id); it != truth.end()) {
      const std::int64_t start = member[begin].ts_ms;
      for (const auto& s : it->second->sessions) {
        if (s.start_ms == start) p.shifted = s.intent_genre.has_value();
      }
    }
    points.push_back(std::move(p));
  }
  return points;
}

/// FNV-1a over everything that defines the eval contexts.
inline std::uint64_t eval_set_hash(std::span<const EvalPoint> points) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xFF;
      h *= 0x100000001b3ULL;
    }
  };
  auto mix_session = [&](const Session& s) {
    mix(s.events.size());
    for (const auto& e : s.events) {
      mix(e.title_id);
      mix(static_cast<std::uint64_t>(e.ts_ms));
      mix(static_cast<std::uint64_t>(e.action));
    }
  };
  for (const auto& p : points) {
    mix(p.member_id);
    mix(static_cast<std::uint64_t>(p.as_of_ms));
    mix(p.target_title);
    mix(p.view.current ? 1 : 0);
    if (p.view.current) mix_session(*p.view.current);
    mix(p.view.past.size());
    for (const auto& s : p.view.past) mix_session(s);
  }
  return h;
}

struct PointMetrics {
  double rr = 0.0;
  std::array<std::uint8_t, 3> hit{};  // @1, @5, @10
  double ndcg10 = 0.0;
};

inline constexpr std::array<std::size_t, 3> kRecallCutoffs = {1, 5, 10};

/// rank is 1-based; nullopt means the target is not in the list.
inline PointMetrics metrics_from_rank(std::optional<std::size_t> rank) {
  PointMetrics m;
  if (!rank || *rank == 0) return m;
  const auto r = static_cast<double>(*rank);
  m.rr = 1.0 / r;
  for (std::size_t k = 0; k < kRecallCutoffs.size(); ++k) m.hit[k] = *rank <= kRecallCutoffs[k] ? 1 : 0;
  m.ndcg10 = *rank <= 10 ? 1.0 / std::log2(1.0 + r) : 0.0;
  return m;
}

inline PointMetrics compute_metrics(const RankedList& ranked, TitleId target) {
  for (std::size_t i = 0; i < ranked.items.size(); ++i) {
    if (ranked.items[i].title_id == target) return metrics_from_rank(i + 1);
  }
  return metrics_from_rank(std::nullopt);
}

struct MetricSummary {
  double mrr = 0.0;
  double recall1 = 0.0;
  double recall5 = 0.0;
  double recall10 = 0.0;
  double ndcg10 = 0.0;
  std::size_t n_eval_points = 0;
};

inline constexpr std::array<const char*, 5> kMetricNames = {"mrr", "recall@1", "recall@5", "recall@10", "ndcg@10"};

inline double metric_value(const PointMetrics& m, std::size_t which) {
  switch (which) {
    case 0: return m.rr;
    case 1: return m.hit[0];
    case 2: return m.hit[1];
    case 3: return m.hit[2];
    default: return m.ndcg10;
  }
}

inline MetricSummary summarize(std::span<const PointMetrics> metrics, std::span<const std::size_t> subset) {
  MetricSummary s;
  std::array<double, 5> sums{};
  for (std::size_t i : subset) {
    for (std::size_t k = 0; k < sums.size(); ++k) sums[k] += metric_value(metrics[i], k);
  }
  s.n_eval_points = subset.size();
  if (subset.empty()) return s;
  const double n = static_cast<double>(subset.size());
  s.mrr = sums[0] / n;
  s.recall1 = sums[1] / n;
  s.recall5 = sums[2] / n;
  s.recall10 = sums[3] / n;
  s.ndcg10 = sums[4] / n;
  return s;
}

inline double summary_value(const MetricSummary& s, std::string_view metric) {
  if (metric == "mrr") return s.mrr;
  if (metric == "recall@1") return s.recall1;
  if (metric == "recall@5") return s.recall5;
  if (metric == "recall@10") return s.recall10;
  if (metric == "ndcg@10") return s.ndcg10;
  throw Error(ErrorCode::InvalidArgument, "unknown metric " + std::string(metric), "metric");
}

inline constexpr std::array<const char*, 3> kSliceNames = {"shifted", "non_shifted", "cold"};

struct MetricsReport {
  std::string model;
  MetricSummary overall;
  std::map<std::string, MetricSummary> slices;  // only non-empty slices
  std::vector<PointMetrics> per_point;
  std::map<std::string, std::vector<std::size_t>> slice_points;
  std::uint64_t eval_hash = 0;
};

/// Full-catalog scores for one eval point, indexed like the catalog.
using Scorer = std::function<std::vector<float>(const EvalPoint&)>;

inline Scorer model_scorer(std::shared_ptr<const Ranker> ranker) {
  return [ranker](const EvalPoint& p) { return ranker->score_catalog(p.view, p.profile, p.as_of_ms).combined; };
}

inline Scorer popularity_scorer(std::shared_ptr<const Catalog> catalog) {
  return [catalog](const EvalPoint&) {
    std::vector<float> s(catalog->size());
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = static_cast<float>(std::log1p((*catalog)[i].popularity));
    return s;
  };
}

/// Uniform random scores, seeded per eval point so results do not depend on order.
inline Scorer random_scorer(std::size_t catalog_size, std::uint64_t seed) {
  return [catalog_size, seed](const EvalPoint& p) {
    std::mt19937_64 rng(seed_stream(seed, p.member_id ^ static_cast<std::uint64_t>(p.as_of_ms)));
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    std::vector<float> s(catalog_size);
    for (float& x : s) x = u(rng);
    return s;
  };
}

/// Puts the true target first; an upper bound for every metric.
inline Scorer oracle_scorer(std::size_t catalog_size) {
  return [catalog_size](const EvalPoint& p) {
    std::vector<float> s(catalog_size, 0.0f);
    s[p.target_index] = 1.0f;
    return s;
  };
}

inline MetricsReport evaluate(const Scorer& scorer, std::span<const EvalPoint> points, const Catalog& catalog,
                              std::string name = "model") {
  if (points.empty()) throw Error(ErrorCode::NoEvalPoints, "no eval points");
  MetricsReport report;
  report.model = std::move(name);
  report.eval_hash = eval_set_hash(points);
  report.per_point.reserve(points.size());
  for (const auto& p : points) {
    auto scores = scorer(p);
    if (scores.size() != catalog.size())
      throw Error(ErrorCode::ShapeMismatch, "scorer returned " + std::to_string(scores.size()) + " scores");
    report.per_point.push_back(metrics_from_rank(rank_of(scores, catalog, p.target_index) + 1));
  }
  std::vector<std::size_t> all(points.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  report.overall = summarize(report.per_point, all);
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (points[i].shifted) report.slice_points[*points[i].shifted ? "shifted" : "non_shifted"].push_back(i);
    if (points[i].cold) report.slice_points["cold"].push_back(i);
  }
  for (const auto& [slice, idx] : report.slice_points) report.slices[slice] = summarize(report.per_point, idx);
  return report;
}

struct LiftReport {
  std::string metric;
  std::string slice;  // empty for all points
  double baseline = 0.0;
  double candidate = 0.0;
  double lift = 0.0;  // (candidate - baseline) / baseline; NaN when baseline is 0
  double ci_low = 0.0;
  double ci_high = 0.0;
  std::size_t resamples = 0;
  std::size_t n_eval_points = 0;
};

namespace detail {

/// Linear-interpolated percentile of sorted values, q in [0, 1].
inline double percentile(std::span<const double> sorted, double q) {
  if (sorted.empty()) return std::nan("");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

}  // namespace detail

/// Paired bootstrap over eval points: both reports must come from the same
/// eval-point set. Resample i draws the same point indices for both models.
inline std::vector<LiftReport> compare(const MetricsReport& candidate, const MetricsReport& baseline,
                                       std::uint64_t seed = 0, std::size_t resamples = 1000,
                                       const std::string& slice = {}) {
  if (candidate.eval_hash != baseline.eval_hash || candidate.per_point.size() != baseline.per_point.size())
    throw Error(ErrorCode::MismatchedEvalSets, "reports were computed on different eval points");
  std::vector<std::size_t> subset;
  if (slice.empty()) {
    subset.resize(candidate.per_point.size());
    std::iota(subset.begin(), subset.end(), std::size_t{0});
  } else if (auto it = candidate.slice_points.find(slice); it != candidate.slice_points.end()) {
    subset = it->second;
  }
  if (subset.empty()) throw Error(ErrorCode::NoEvalPoints, "slice has no eval points", slice);

  const std::size_t n = subset.size();
  std::vector<LiftReport> out;
  for (std::size_t m = 0; m < kMetricNames.size(); ++m) {
    std::vector<double> a(n), b(n);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = metric_value(candidate.per_point[subset[i]], m);
      b[i] = metric_value(baseline.per_point[subset[i]], m);
    }
    LiftReport r;
    r.metric = kMetricNames[m];
    r.slice = slice;
    r.resamples = resamples;
    r.n_eval_points = n;
    double sa = 0.0, sb = 0.0;
    for (std::size_t i = 0; i < n; ++i) sa += a[i], sb += b[i];
    r.candidate = sa / static_cast<double>(n);
    r.baseline = sb / static_cast<double>(n);
    r.lift = r.baseline > 0 ? (r.candidate - r.baseline) / r.baseline : std::nan("");

    // Same seed for every metric so all metrics see the same resamples.
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    std::vector<double> lifts;
    lifts.reserve(resamples);
    for (std::size_t k = 0; k < resamples; ++k) {
      double ra = 0.0, rb = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        std::size_t j = pick(rng);
        ra += a[j];
        rb += b[j];
      }
      if (rb > 0) lifts.push_back((ra - rb) / rb);
    }
    std::sort(lifts.begin(), lifts.end());
    r.ci_low = detail::percentile(lifts, 0.025);
    r.ci_high = detail::percentile(lifts, 0.975);
    out.push_back(r);
  }
  return out;
}

inline const LiftReport& find_lift(const std::vector<LiftReport>& lifts, std::string_view metric) {
  for (const auto& l : lifts) {
    if (l.metric == metric) return l;
  }
  throw Error(ErrorCode::InvalidArgument, "unknown metric " + std::string(metric), "metric");
}

inline Json number_or_null(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

inline Json to_json(const MetricSummary& s) {
  return Json{{"mrr", s.mrr},         {"recall@1", s.recall1}, {"recall@5", s.recall5},
              {"recall@10", s.recall10}, {"ndcg@10", s.ndcg10}, {"n_eval_points", s.n_eval_points}};
}

inline Json to_json(const MetricsReport& r) {
  Json slices = Json::object();
  for (const auto& [name, s] : r.slices) slices[name] = to_json(s);
  char hash[17];
  std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(r.eval_hash));
  return Json{{"model", r.model}, {"overall", to_json(r.overall)}, {"slices", slices}, {"eval_set_hash", hash}};
}

inline Json to_json(const LiftReport& l) {
  return Json{{"metric", l.metric},
              {"slice", l.slice.empty() ? Json("all") : Json(l.slice)},
              {"baseline", l.baseline},
              {"candidate", l.candidate},
              {"relative_lift", number_or_null(l.lift)},
              {"ci95", {number_or_null(l.ci_low), number_or_null(l.ci_high)}},
              {"resamples", l.resamples},
              {"n_eval_points", l.n_eval_points}};
}

}  // namespace sessionrank
