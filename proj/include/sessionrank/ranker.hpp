// Multi-task scoring heads, deterministic top-k, and the serving-time
// Ranker that scores a whole catalog for one request.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "sessionrank/encoders.hpp"
#include "sessionrank/features.hpp"
#include "sessionrank/model.hpp"
#include "sessionrank/session_store.hpp"

namespace sessionrank {

/// Projected long-term profile: profile_proj^T . genre_affinity.
template <typename T>
Vec<T> project_profile(const RankerModel<T>& model, const Vec<T>& affinity) {
  return model.params.profile_proj.transpose() * affinity;
}

template <typename T>
Vec<T> affinity_of(const MemberProfile& profile, std::size_t n_genres) {
  auto a = profile.affinity_vector<T>(n_genres);
  return Eigen::Map<Vec<T>>(a.data(), static_cast<Eigen::Index>(a.size()));
}

/// Task logits for C candidates: s_t(i) = (W_t z_i) . e_i + b_t, with
/// z_i = state_i ++ profile_vec. `states` is C x state_dim, or 1 x state_dim
/// when every candidate shares one state.
template <typename T>
Mat<T> head_logits(const RankerModel<T>& model, const Mat<T>& states, const Vec<T>& profile_vec,
                   std::span<const std::uint32_t> rows) {
  const auto& p = model.params;
  const auto n = static_cast<Eigen::Index>(rows.size());
  const Eigen::Index ds = static_cast<Eigen::Index>(model.config.state_dim());
  Mat<T> logits(n, static_cast<Eigen::Index>(kTaskCount));
  Vec<T> z(ds + profile_vec.size());
  for (Eigen::Index c = 0; c < n; ++c) {
    z.head(ds) = states.row(states.rows() == 1 ? 0 : c).transpose();
    z.tail(profile_vec.size()) = profile_vec;
    auto e = p.title_emb.row(rows[static_cast<std::size_t>(c)]);
    for (std::size_t t = 0; t < kTaskCount; ++t) {
      logits(c, static_cast<Eigen::Index>(t)) = e.dot((p.head_w[t] * z).transpose()) + p.head_b(static_cast<Eigen::Index>(t), 0);
    }
  }
  return logits;
}

template <typename T>
T combine_tasks(const std::array<float, kTaskCount>& alpha, const T* logits) {
  T out = T(0);
  for (std::size_t t = 0; t < kTaskCount; ++t) out += static_cast<T>(alpha[t]) * detail::sigmoid(logits[t]);
  return out;
}

struct CandidateScore {
  TitleId title_id = 0;
  std::array<float, kTaskCount> task_logits{};
  float combined = 0.0f;
};

/// Scores explicit candidates given an already-encoded state (one row per
/// candidate for mlp, or a single shared row for sequence variants).
inline std::vector<CandidateScore> score_candidates(const Mat<float>& states, const MemberProfile& profile,
                                                    std::span<const CatalogEntry> candidates, const Catalog& catalog,
                                                    const RankerModel<float>& model) {
  std::vector<std::uint32_t> rows;
  rows.reserve(candidates.size());
  for (const auto& c : candidates) {
    auto idx = catalog.index_of(c.title_id);
    if (!idx) throw Error(ErrorCode::UnknownCandidate, std::to_string(c.title_id), "title_id");
    rows.push_back(static_cast<std::uint32_t>(*idx + 1));
  }
  Vec<float> pv = project_profile(model, affinity_of<float>(profile, model.config.n_genres));
  Mat<float> logits = head_logits(model, states, pv, rows);
  std::vector<CandidateScore> out(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    out[i].title_id = candidates[i].title_id;
    for (std::size_t t = 0; t < kTaskCount; ++t)
      out[i].task_logits[t] = logits(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(t));
    out[i].combined = combine_tasks(model.config.alpha, out[i].task_logits.data());
  }
  return out;
}

/// Ranking order: higher score first, ties by ascending title id. NaN sorts
/// after every number so the order stays total.
inline bool ranks_before(float score_a, TitleId id_a, float score_b, TitleId id_b) noexcept {
  bool na = std::isnan(score_a), nb = std::isnan(score_b);
  if (na != nb) return nb;
  if (!na && score_a != score_b) return score_a > score_b;
  return id_a < id_b;
}

struct RankedItem {
  TitleId title_id = 0;
  float score = 0.0f;
  std::uint32_t rank = 0;
  std::optional<std::array<float, kTaskCount>> task_scores;
};

struct RankedList {
  std::vector<RankedItem> items;
  bool cold_start = false;
};

/// Indices of the top k scores under ranks_before, best first.
inline std::vector<std::size_t> top_k_indices(std::span<const float> scores, const Catalog& catalog, std::size_t k) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  auto less = [&](std::size_t a, std::size_t b) {
    return ranks_before(scores[a], catalog[a].title_id, scores[b], catalog[b].title_id);
  };
  k = std::min(k, idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), less);
  idx.resize(k);
  return idx;
}

/// Number of entries that rank strictly before `target` (0-based rank).
inline std::size_t rank_of(std::span<const float> scores, const Catalog& catalog, std::size_t target) {
  std::size_t before = 0;
  const float st = scores[target];
  const TitleId it = catalog[target].title_id;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (i != target && ranks_before(scores[i], catalog[i].title_id, st, it)) ++before;
  }
  return before;
}

struct CatalogScores {
  std::vector<float> combined;        // one per catalog index
  Mat<float> task_logits;             // N x 3, filled when requested
  bool cold_start = false;
};

/// Serving-time scorer over a full catalog. Immutable after construction and
/// safe to share across request threads.
///
/// For the mlp variant the head algebra is refactored so per-candidate work
/// is one small matvec: s_t(i) = relu(W1 f_i + b1) . G_t[i] + e_i . u_t + b_t
/// with G_t[i] = (W_t^state W2)^T e_i precomputed per title.
class Ranker {
 public:
  Ranker(std::shared_ptr<const RankerModel<float>> model, std::shared_ptr<const Catalog> catalog,
         FeatureParams feature_params = {})
      : model_(std::move(model)), catalog_(std::move(catalog)), feature_params_(feature_params) {
    const auto& c = model_->config;
    if (catalog_->empty()) throw Error(ErrorCode::EmptyCatalog, "catalog is empty");
    if (c.n_titles != catalog_->size())
      throw Error(ErrorCode::ShapeMismatch, "model n_titles does not match catalog size", "n_titles");
    if (c.n_genres < catalog_->genre_count())
      throw Error(ErrorCode::ShapeMismatch, "catalog has more genres than the model", "n_genres");
    const auto& p = model_->params;
    const auto n = static_cast<Eigen::Index>(catalog_->size());
    const Eigen::Index d = c.embed_dim;
    embeddings_ = p.title_emb.bottomRows(n);
    for (Eigen::Index i = 0; i < n; ++i) log_popularity_.push_back(static_cast<float>(std::log1p((*catalog_)[static_cast<std::size_t>(i)].popularity)));
    if (c.variant == Variant::mlp) {
      const Eigen::Index h = c.hidden_dim;
      Mat<float> m(d, 3 * h);
      for (std::size_t t = 0; t < kTaskCount; ++t) {
        Mat<float> a = p.head_w[t].leftCols(d);
        m.middleCols(static_cast<Eigen::Index>(t) * h, h) = a * p.mlp_w2;
        state_bias_[t] = a * as_vec(p.mlp_b2);
      }
      folded_ = embeddings_ * m;
      w1_ = p.mlp_w1 * as_vec(p.mlp_in_inv_std).asDiagonal();
      b1_ = as_vec(p.mlp_b1) - w1_ * as_vec(p.mlp_in_mean);
    }
  }

  const RankerModel<float>& model() const noexcept { return *model_; }
  const Catalog& catalog() const noexcept { return *catalog_; }
  const FeatureParams& feature_params() const noexcept { return feature_params_; }

  static bool is_cold(const SessionView& view, const MemberProfile& profile) {
    return view.empty() && profile.empty();
  }

  CatalogScores score_catalog(const SessionView& view, const MemberProfile& profile, std::int64_t now_ms,
                              bool with_tasks = false) const {
    const auto& c = model_->config;
    const auto& p = model_->params;
    const auto n = static_cast<Eigen::Index>(catalog_->size());
    CatalogScores out;
    if (is_cold(view, profile)) {
      out.cold_start = true;
      out.combined = log_popularity_;
      return out;
    }
    Vec<float> pv = project_profile(*model_, affinity_of<float>(profile, c.n_genres));
    Mat<float> logits(n, static_cast<Eigen::Index>(kTaskCount));
    if (c.variant == Variant::mlp) {
      FeatureContext ctx(view, profile, *catalog_, now_ms, feature_params_);
      Mat<float> f(n, static_cast<Eigen::Index>(kFeatureCount));
      for (Eigen::Index i = 0; i < n; ++i) {
        FeatureVector fv = ctx.build(static_cast<std::size_t>(i));
        if (c.input_mode == InputMode::baseline) mask_session_features(fv);
        for (std::size_t j = 0; j < kFeatureCount; ++j) f(i, static_cast<Eigen::Index>(j)) = fv[j];
      }
      Mat<float> r = f * w1_.transpose();
      r.rowwise() += b1_.transpose();
      r = r.cwiseMax(0.0f);
      const Eigen::Index h = c.hidden_dim;
      const Eigen::Index d = c.embed_dim;
      Mat<float> u(d, static_cast<Eigen::Index>(kTaskCount));
      for (std::size_t t = 0; t < kTaskCount; ++t)
        u.col(static_cast<Eigen::Index>(t)) = state_bias_[t] + p.head_w[t].rightCols(d) * pv;
      logits = embeddings_ * u;
      for (std::size_t t = 0; t < kTaskCount; ++t) {
        auto ti = static_cast<Eigen::Index>(t);
        logits.col(ti) += (r.array() * folded_.middleCols(ti * h, h).array()).rowwise().sum().matrix();
      }
    } else {
      SequenceOptions opts;
      opts.max_len = c.max_len;
      opts.include_current = c.input_mode == InputMode::insession;
      auto rows = to_rows(build_sequence(view, opts), *catalog_);
      Vec<float> state = encode_sequence<float>(rows, *model_);
      Vec<float> z(state.size() + pv.size());
      z << state, pv;
      Mat<float> u(c.embed_dim, static_cast<Eigen::Index>(kTaskCount));
      for (std::size_t t = 0; t < kTaskCount; ++t) u.col(static_cast<Eigen::Index>(t)) = p.head_w[t] * z;
      logits = embeddings_ * u;
    }
    out.combined.resize(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
      float row[kTaskCount];
      for (std::size_t t = 0; t < kTaskCount; ++t) {
        row[t] = logits(i, static_cast<Eigen::Index>(t)) + p.head_b(static_cast<Eigen::Index>(t), 0);
        logits(i, static_cast<Eigen::Index>(t)) = row[t];
      }
      out.combined[static_cast<std::size_t>(i)] = combine_tasks(c.alpha, row);
    }
    if (with_tasks) out.task_logits = std::move(logits);
    return out;
  }

  RankedList rank(const SessionView& view, const MemberProfile& profile, std::int64_t now_ms, std::size_t k,
                  bool with_tasks = false) const {
    if (k == 0) throw Error(ErrorCode::InvalidArgument, "k must be >= 1", "k");
    auto scores = score_catalog(view, profile, now_ms, with_tasks);
    RankedList out;
    out.cold_start = scores.cold_start;
    auto top = top_k_indices(scores.combined, *catalog_, k);
    out.items.reserve(top.size());
    for (std::size_t r = 0; r < top.size(); ++r) {
      RankedItem item{(*catalog_)[top[r]].title_id, scores.combined[top[r]], static_cast<std::uint32_t>(r + 1), {}};
      if (with_tasks && scores.task_logits.rows() > 0) {
        std::array<float, kTaskCount> ts{};
        for (std::size_t t = 0; t < kTaskCount; ++t)
          ts[t] = detail::sigmoid(scores.task_logits(static_cast<Eigen::Index>(top[r]), static_cast<Eigen::Index>(t)));
        item.task_scores = ts;
      }
      out.items.push_back(item);
    }
    return out;
  }

 private:
  std::shared_ptr<const RankerModel<float>> model_;
  std::shared_ptr<const Catalog> catalog_;
  FeatureParams feature_params_;
  Mat<float> embeddings_;  // N x d, catalog order
  Mat<float> folded_;      // N x 3h (mlp only)
  Mat<float> w1_;          // W1 with input standardization folded in (mlp only)
  Vec<float> b1_;
  std::array<Vec<float>, kTaskCount> state_bias_;
  std::vector<float> log_popularity_;
};

/// Convenience wrapper: full-catalog top-k for one member context.
inline RankedList rank(const SessionView& view, const MemberProfile& profile, std::shared_ptr<const Catalog> catalog,
                       std::size_t k, std::shared_ptr<const RankerModel<float>> model, std::int64_t now_ms) {
  if (!catalog || catalog->empty()) throw Error(ErrorCode::EmptyCatalog, "catalog is empty");
  return Ranker(std::move(model), std::move(catalog)).rank(view, profile, now_ms, k);
}

}  // namespace sessionrank
