// Training: example construction, the multi-task sampled-negative BCE loss
// with its analytic gradient, Adam, and a finite-difference gradient check.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "sessionrank/encoders.hpp"
#include "sessionrank/features.hpp"
#include "sessionrank/model.hpp"
#include "sessionrank/ranker.hpp"
#include "sessionrank/session_store.hpp"

namespace sessionrank {

struct TrainingExample {
  MemberId member_id = 0;
  std::int64_t as_of_ms = 0;  // context snapshot time (target ts - 1)
  SessionView view;
  MemberProfile profile;
  TitleId target_title = 0;
  ActionType target_task = ActionType::play;
  std::int64_t target_ts_ms = 0;
  std::vector<TitleId> negatives;
};

struct ExampleOptions {
  std::size_t negatives_per_positive = 4;
  std::uint64_t seed = 0;
  /// Events that must precede the target inside its session.
  std::size_t min_prior_session_events = 1;
};

/// Index ranges [begin, end) of sessions within one member's sorted events.
inline std::vector<std::pair<std::size_t, std::size_t>> session_ranges(std::span<const InteractionEvent> events,
                                                                       std::int64_t timeout_ms) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t i = 0; i < events.size(); ++i) {
    if (i == 0 || events[i].ts_ms - events[i - 1].ts_ms >= timeout_ms) {
      if (!out.empty()) out.back().second = i;
      out.emplace_back(i, events.size());
    }
  }
  return out;
}

/// Events strictly before ts (span prefix of a sorted member history).
inline std::span<const InteractionEvent> history_before(std::span<const InteractionEvent> member_events,
                                                        std::int64_t ts) {
  auto it = std::lower_bound(member_events.begin(), member_events.end(), ts,
                             [](const InteractionEvent& e, std::int64_t t) { return e.ts_ms < t; });
  return member_events.first(static_cast<std::size_t>(it - member_events.begin()));
}

/// Dataset with each member's final session removed (the held-out part).
inline Dataset training_split(const Dataset& ds, const StoreConfig& config) {
  Dataset out;
  out.catalog = ds.catalog;
  out.members = ds.members;
  for (auto member : group_by_member(ds.events)) {
    auto ranges = session_ranges(member, config.inactivity_timeout_ms);
    if (ranges.empty()) continue;
    auto keep = member.first(ranges.back().first);
    out.events.insert(out.events.end(), keep.begin(), keep.end());
  }
  return out;
}

inline std::vector<TitleId> sample_negatives(const Catalog& catalog, TitleId target, std::size_t count,
                                             std::mt19937_64& rng) {
  std::vector<TitleId> out;
  const std::size_t n = catalog.size();
  count = std::min(count, n > 0 ? n - 1 : 0);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  while (out.size() < count) {
    TitleId id = catalog[pick(rng)].title_id;
    if (id == target || std::find(out.begin(), out.end(), id) != out.end()) continue;
    out.push_back(id);
  }
  return out;
}

/// One example per positive event with enough prior session context; the
/// context is the view and profile strictly before the target timestamp.
inline std::vector<TrainingExample> make_examples(const Dataset& ds, const StoreConfig& config,
                                                  const ExampleOptions& options = {}) {
  config.validate();
  std::vector<TrainingExample> out;
  std::mt19937_64 rng(options.seed);
  for (auto member : group_by_member(ds.events)) {
    for (auto [begin, end] : session_ranges(member, config.inactivity_timeout_ms)) {
      for (std::size_t j = begin + options.min_prior_session_events; j < end; ++j) {
        const auto& e = member[j];
        if (!is_positive(e.action)) continue;
        auto hist = history_before(member, e.ts_ms);
        TrainingExample ex;
        ex.member_id = e.member_id;
        ex.as_of_ms = e.ts_ms - 1;
        ex.view = make_view(hist, ex.as_of_ms, config);
        ex.profile = build_profile(e.member_id, hist, ds.catalog, e.ts_ms);
        ex.target_title = e.title_id;
        ex.target_task = e.action;
        ex.target_ts_ms = e.ts_ms;
        ex.negatives = sample_negatives(ds.catalog, e.title_id, options.negatives_per_positive, rng);
        out.push_back(std::move(ex));
      }
    }
  }
  return out;
}

/// Model-ready tensors for one example: candidates are the target followed
/// by its negatives. Labels are 1 / 0, or -1 where a task is unlabeled.
template <typename T>
struct ExampleInput {
  std::vector<TokenRow> tokens;
  Mat<T> features;
  Vec<T> affinity;
  std::vector<std::uint32_t> rows;
  std::vector<std::array<std::int8_t, kTaskCount>> labels;
};

template <typename T>
ExampleInput<T> encode_example(const TrainingExample& ex, const Catalog& catalog, const ModelConfig& config,
                               const FeatureParams& feature_params = {}) {
  ExampleInput<T> in;
  in.rows.push_back(title_row(catalog, ex.target_title));
  std::array<std::int8_t, kTaskCount> target_labels;
  target_labels.fill(-1);
  if (auto t = task_index(ex.target_task)) target_labels[*t] = 1;
  in.labels.push_back(target_labels);
  for (TitleId neg : ex.negatives) {
    in.rows.push_back(title_row(catalog, neg));
    in.labels.push_back({0, 0, 0});
  }
  in.affinity = affinity_of<T>(ex.profile, config.n_genres);
  if (config.variant == Variant::mlp) {
    FeatureContext ctx(ex.view, ex.profile, catalog, ex.as_of_ms, feature_params);
    in.features.resize(static_cast<Eigen::Index>(in.rows.size()), static_cast<Eigen::Index>(kFeatureCount));
    for (std::size_t c = 0; c < in.rows.size(); ++c) {
      FeatureVector fv = ctx.build(in.rows[c] - 1);
      if (config.input_mode == InputMode::baseline) mask_session_features(fv);
      for (std::size_t j = 0; j < kFeatureCount; ++j)
        in.features(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(j)) = static_cast<T>(fv[j]);
    }
  } else {
    SequenceOptions opts;
    opts.max_len = config.max_len;
    opts.include_current = config.input_mode == InputMode::insession;
    in.tokens = to_rows(build_sequence(ex.view, opts), catalog);
  }
  return in;
}

template <typename T>
T bce_with_logits(T x, T y) {
  return std::max(x, T(0)) - x * y + std::log1p(std::exp(-std::abs(x)));
}

/// Reusable forward/backward buffers for example_loss.
template <typename T>
struct LossWorkspace {
  SequenceEncoder<T> sequence;
  FeatureEncoder<T> features;
};

/// L = sum_t lambda_t * sum_c BCE(s_t(c), y_tc) over labeled pairs. When
/// `grad` is given, adds scale * dL/dtheta into it.
template <typename T>
T example_loss(const RankerModel<T>& model, const ExampleInput<T>& in, const std::array<T, kTaskCount>& lambda,
               ParamSet<T>* grad = nullptr, T scale = T(1), LossWorkspace<T>* workspace = nullptr,
               std::uint64_t* signature = nullptr) {
  LossWorkspace<T> local;
  LossWorkspace<T>& ws = workspace ? *workspace : local;
  const auto& c = model.config;
  const auto& p = model.params;
  const auto n = static_cast<Eigen::Index>(in.rows.size());
  const Eigen::Index ds = static_cast<Eigen::Index>(c.state_dim());
  const Eigen::Index d = c.embed_dim;

  Vec<T> pv = project_profile(model, in.affinity);
  Mat<T> states;
  if (c.variant == Variant::mlp) {
    states = ws.features.forward(model, in.features);
    if (signature) *signature = ws.features.activation_signature();
  } else {
    states = ws.sequence.forward(model, in.tokens).transpose();
    if (signature) *signature = 0;
  }

  Mat<T> dstates;
  if (grad) dstates = Mat<T>::Zero(states.rows(), ds);
  Vec<T> dpv = Vec<T>::Zero(d);
  Vec<T> z(ds + d), u(d), du(d), dz(ds + d);
  T loss = T(0);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Index srow = states.rows() == 1 ? 0 : i;
    z.head(ds) = states.row(srow).transpose();
    z.tail(d) = pv;
    const std::uint32_t row = in.rows[static_cast<std::size_t>(i)];
    auto e = p.title_emb.row(row);
    if (grad) dz.setZero();
    for (std::size_t t = 0; t < kTaskCount; ++t) {
      std::int8_t y = in.labels[static_cast<std::size_t>(i)][t];
      if (y < 0) continue;
      u.noalias() = p.head_w[t] * z;
      T logit = e.dot(u.transpose()) + p.head_b(static_cast<Eigen::Index>(t), 0);
      loss += lambda[t] * bce_with_logits(logit, static_cast<T>(y));
      if (!grad) continue;
      T g = scale * lambda[t] * (detail::sigmoid(logit) - static_cast<T>(y));
      if (g == T(0)) continue;
      du = g * e.transpose();
      grad->head_w[t].noalias() += du * z.transpose();
      dz.noalias() += p.head_w[t].transpose() * du;
      grad->title_emb.row(row) += g * u.transpose();
      grad->head_b(static_cast<Eigen::Index>(t), 0) += g;
    }
    if (grad) {
      dstates.row(srow) += dz.head(ds).transpose();
      dpv += dz.tail(d);
    }
  }
  if (grad) {
    grad->profile_proj.noalias() += in.affinity * dpv.transpose();
    if (c.variant == Variant::mlp) {
      ws.features.backward(model, dstates, *grad);
    } else {
      ws.sequence.backward(model, dstates.row(0).transpose(), *grad);
    }
    grad->title_emb.row(0).setZero();
  }
  return loss;
}

/// Logits of every labeled (candidate, task) pair, in loss order.
template <typename T>
std::vector<T> labeled_logits(const RankerModel<T>& model, const ExampleInput<T>& in, LossWorkspace<T>& ws,
                              std::uint64_t* signature = nullptr) {
  const auto& c = model.config;
  const auto& p = model.params;
  const Eigen::Index ds = static_cast<Eigen::Index>(c.state_dim());
  const Eigen::Index d = c.embed_dim;
  Vec<T> pv = project_profile(model, in.affinity);
  Mat<T> states;
  if (c.variant == Variant::mlp) {
    states = ws.features.forward(model, in.features);
    if (signature) *signature = ws.features.activation_signature();
  } else {
    states = ws.sequence.forward(model, in.tokens).transpose();
    if (signature) *signature = 0;
  }
  std::vector<T> out;
  Vec<T> z(ds + d);
  for (std::size_t i = 0; i < in.rows.size(); ++i) {
    z.head(ds) = states.row(states.rows() == 1 ? 0 : static_cast<Eigen::Index>(i)).transpose();
    z.tail(d) = pv;
    auto e = p.title_emb.row(in.rows[i]);
    for (std::size_t t = 0; t < kTaskCount; ++t) {
      if (in.labels[i][t] < 0) continue;
      out.push_back(e.dot((p.head_w[t] * z).transpose()) + p.head_b(static_cast<Eigen::Index>(t), 0));
    }
  }
  return out;
}

/// softplus(a) - softplus(b) without cancellation: log1p(sigmoid(b) * expm1(a - b)).
inline double softplus_diff(double a, double b) {
  return std::log1p(detail::sigmoid(b) * std::expm1(a - b));
}

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainConfig {
  AdamConfig adam;
  std::size_t batch_size = 64;
  std::size_t epochs = 5;
  std::size_t negatives_per_positive = 4;
  std::uint64_t seed = 0;
  std::array<float, kTaskCount> lambda = {1.0f, 1.0f, 1.0f};
  double grad_clip_norm = 5.0;

  void validate() const {
    if (adam.lr <= 0 || adam.beta1 <= 0 || adam.beta2 <= 0 || adam.eps <= 0 || batch_size == 0 || epochs == 0 ||
        negatives_per_positive == 0 || grad_clip_norm <= 0)
      throw Error(ErrorCode::InvalidConfig, "training hyperparameters must be positive", "train");
    for (float l : lambda) {
      if (!(l >= 0.0f)) throw Error(ErrorCode::InvalidConfig, "task weights must be non-negative", "lambda");
    }
  }
};

template <typename T>
class Adam {
 public:
  Adam(const ParamSet<T>& like, Variant variant, AdamConfig config)
      : variant_(variant), config_(config), m_(ParamSet<T>::zeros_like(like, variant)),
        v_(ParamSet<T>::zeros_like(like, variant)) {}

  void step(ParamSet<T>& params, const ParamSet<T>& grad) {
    ++t_;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    const T b1 = static_cast<T>(config_.beta1), b2 = static_cast<T>(config_.beta2);
    const T lr = static_cast<T>(config_.lr), eps = static_cast<T>(config_.eps);
    const T ic1 = static_cast<T>(1.0 / c1), isc2 = static_cast<T>(1.0 / std::sqrt(c2));
    std::vector<Mat<T>*> ps, ms, vs;
    std::vector<const Mat<T>*> gs;
    std::vector<bool> frozen;
    ParamSet<T>::visit(params, variant_, [&](std::string_view name, Mat<T>& x) {
      ps.push_back(&x);
      frozen.push_back(is_frozen_tensor(name));
    });
    ParamSet<T>::visit(m_, variant_, [&](std::string_view, Mat<T>& x) { ms.push_back(&x); });
    ParamSet<T>::visit(v_, variant_, [&](std::string_view, Mat<T>& x) { vs.push_back(&x); });
    ParamSet<T>::visit(grad, variant_, [&](std::string_view, const Mat<T>& x) { gs.push_back(&x); });
    for (std::size_t k = 0; k < ps.size(); ++k) {
      if (frozen[k]) continue;
      T* w = ps[k]->data();
      T* m = ms[k]->data();
      T* v = vs[k]->data();
      const T* g = gs[k]->data();
      const Eigen::Index size = ps[k]->size();
      for (Eigen::Index i = 0; i < size; ++i) {
        m[i] = b1 * m[i] + (T(1) - b1) * g[i];
        v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
        w[i] -= lr * (m[i] * ic1) / (std::sqrt(v[i]) * isc2 + eps);
      }
    }
    params.title_emb.row(0).setZero();
  }

 private:
  Variant variant_;
  AdamConfig config_;
  ParamSet<T> m_, v_;
  std::uint64_t t_ = 0;
};

template <typename T>
double global_norm(const ParamSet<T>& g, Variant variant) {
  double sq = 0.0;
  ParamSet<T>::visit(g, variant, [&](std::string_view, const Mat<T>& x) {
    sq += static_cast<double>(x.template cast<double>().squaredNorm());
  });
  return std::sqrt(sq);
}

/// Per-feature mean and 1/std over every candidate row of the training
/// inputs, accumulated in double. Constant features keep scale 1.
inline void set_input_standardization(RankerModel<float>& model, std::span<const ExampleInput<float>> inputs) {
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(kFeatureCount), sq = Eigen::VectorXd::Zero(kFeatureCount);
  double n = 0.0;
  for (const auto& in : inputs) {
    Eigen::MatrixXd f = in.features.cast<double>();
    sum += f.colwise().sum().transpose();
    sq += f.array().square().matrix().colwise().sum().transpose();
    n += static_cast<double>(f.rows());
  }
  if (n == 0.0) return;
  for (Eigen::Index j = 0; j < static_cast<Eigen::Index>(kFeatureCount); ++j) {
    const double mean = sum(j) / n;
    const double var = std::max(0.0, sq(j) / n - mean * mean);
    const double sd = std::sqrt(var);
    model.params.mlp_in_mean(j, 0) = static_cast<float>(mean);
    model.params.mlp_in_inv_std(j, 0) = sd > 1e-6 ? static_cast<float>(1.0 / sd) : 1.0f;
  }
}

struct TrainResult {
  RankerModel<float> model;
  std::vector<double> loss_trace;  // mean training loss per epoch
  std::size_t steps = 0;
};

using TrainProgress = std::function<void(std::size_t epoch, double mean_loss)>;

/// Deterministic single-threaded training: fixed-seed init, a seeded
/// shuffle per epoch, Adam with global-norm clipping.
inline TrainResult train(const TrainConfig& config, std::span<const TrainingExample> examples, const Catalog& catalog,
                         ModelConfig model_config, const TrainProgress& progress = {},
                         const FeatureParams& feature_params = {}) {
  config.validate();
  if (examples.empty()) throw Error(ErrorCode::EmptyExamples, "no training examples");
  if (catalog.empty()) throw Error(ErrorCode::EmptyCatalog, "catalog is empty");
  model_config.n_titles = static_cast<std::uint32_t>(catalog.size());
  model_config.n_genres = std::max<std::uint32_t>(model_config.n_genres, static_cast<std::uint32_t>(catalog.genre_count()));
  model_config.validate();

  TrainResult result{init_model<float>(model_config, config.seed), {}, 0};
  auto& model = result.model;
  const Variant variant = model_config.variant;
  std::vector<ExampleInput<float>> inputs;
  inputs.reserve(examples.size());
  for (const auto& ex : examples) inputs.push_back(encode_example<float>(ex, catalog, model_config, feature_params));
  if (variant == Variant::mlp) set_input_standardization(model, inputs);

  ParamSet<float> grad = ParamSet<float>::zeros_like(model.params, variant);
  Adam<float> adam(model.params, variant, config.adam);
  LossWorkspace<float> ws;
  std::array<float, kTaskCount> lambda = config.lambda;

  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(config.seed ^ 0x9E3779B97F4A7C15ULL);

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t stop = std::min(order.size(), start + config.batch_size);
      const float inv = 1.0f / static_cast<float>(stop - start);
      grad.set_zero(variant);
      double batch_loss = 0.0;
      for (std::size_t k = start; k < stop; ++k) {
        batch_loss += example_loss(model, inputs[order[k]], lambda, &grad, inv, &ws);
      }
      if (!std::isfinite(batch_loss))
        throw Error(ErrorCode::NonFiniteLoss, "loss diverged at step " + std::to_string(result.steps), "step");
      double norm = global_norm(grad, variant);
      if (!std::isfinite(norm))
        throw Error(ErrorCode::NonFiniteLoss, "gradient diverged at step " + std::to_string(result.steps), "step");
      if (norm > config.grad_clip_norm) {
        float s = static_cast<float>(config.grad_clip_norm / norm);
        ParamSet<float>::visit(grad, variant, [&](std::string_view, Mat<float>& x) { x *= s; });
      }
      adam.step(model.params, grad);
      ++result.steps;
      epoch_loss += batch_loss;
    }
    result.loss_trace.push_back(epoch_loss / static_cast<double>(order.size()));
    if (progress) progress(epoch, result.loss_trace.back());
  }
  return result;
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::vector<std::pair<std::string, double>> per_tensor;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;
};

struct GradCheckCase {
  RankerModel<double> model;
  ExampleInput<double> input;
};

/// A random small example for grad_check. Unlike init_model, embeddings,
/// biases and layer-norm gains are O(1) so that layer norm is not operating
/// on near-constant inputs, where its curvature swamps a 1e-4 step.
inline GradCheckCase grad_check_case(Variant variant, std::uint64_t seed, std::uint32_t n_titles = 20,
                                     std::uint32_t n_genres = 5, std::size_t seq_len = 12,
                                     std::size_t candidates = 5) {
  ModelConfig config;
  config.variant = variant;
  config.n_titles = n_titles;
  config.n_genres = n_genres;
  GradCheckCase out{init_model<double>(config, seed), {}};
  std::mt19937_64 rng(seed ^ 0xC0FFEEULL);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  ParamSet<double>::visit(out.model.params, variant, [&](std::string_view name, Mat<double>& t) {
    const bool gain = name.ends_with(".g");
    if (is_frozen_tensor(name)) return;
    if (t.cols() == 1 || name.ends_with("_emb") || name == "title_emb") {
      for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = (gain ? 1.0 : 0.0) + u(rng);
    }
  });
  out.model.params.title_emb.row(0).setZero();

  std::uniform_int_distribution<std::uint32_t> title(1, n_titles);
  std::uniform_int_distribution<int> action(0, 3), bucket(0, kTimeBuckets - 1), flag(0, 1);
  auto& in = out.input;
  for (std::size_t i = 0; i < seq_len; ++i) {
    in.tokens.push_back(TokenRow{title(rng), static_cast<std::uint8_t>(action(rng)),
                                 static_cast<std::uint8_t>(bucket(rng)), static_cast<std::uint8_t>(flag(rng))});
  }
  in.features.resize(static_cast<Eigen::Index>(candidates), static_cast<Eigen::Index>(kFeatureCount));
  for (Eigen::Index i = 0; i < in.features.size(); ++i) in.features.data()[i] = 2.0 * u(rng);
  in.affinity = Vec<double>(n_genres);
  for (Eigen::Index g = 0; g < in.affinity.size(); ++g) in.affinity(g) = 0.5 + u(rng);
  in.affinity /= in.affinity.sum();
  for (std::size_t c = 0; c < candidates; ++c) {
    in.rows.push_back(title(rng));
    std::array<std::int8_t, kTaskCount> labels{0, 0, 0};
    if (c == 0) labels = {-1, -1, -1}, labels[static_cast<std::size_t>(rng() % kTaskCount)] = 1;
    in.labels.push_back(labels);
  }
  return out;
}

/// Central-difference check of example_loss gradients in double precision.
/// Coordinates whose perturbation flips a relu unit are non-differentiable
/// there and are skipped (and counted).
inline GradCheckResult grad_check(RankerModel<double> model, const ExampleInput<double>& in,
                                  std::array<double, kTaskCount> lambda = {1.0, 1.0, 1.0}, double step = 1e-4,
                                  std::size_t samples_per_tensor = 200, std::uint64_t seed = 0) {
  const Variant variant = model.config.variant;
  ParamSet<double> analytic = ParamSet<double>::zeros_like(model.params, variant);
  std::uint64_t base_sig = 0;
  example_loss(model, in, lambda, &analytic, 1.0, static_cast<LossWorkspace<double>*>(nullptr), &base_sig);

  std::vector<std::pair<std::string, Mat<double>*>> params;
  ParamSet<double>::visit(model.params, variant,
                          [&](std::string_view name, Mat<double>& t) { params.emplace_back(std::string(name), &t); });
  std::vector<const Mat<double>*> grads;
  ParamSet<double>::visit(analytic, variant, [&](std::string_view, const Mat<double>& t) { grads.push_back(&t); });

  GradCheckResult result;
  std::mt19937_64 rng(seed);
  LossWorkspace<double> ws;
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (is_frozen_tensor(params[k].first)) continue;
    Mat<double>& theta = *params[k].second;
    const Mat<double>& g = *grads[k];
    const auto size = static_cast<std::size_t>(theta.size());
    std::vector<std::size_t> coords(size);
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (size > samples_per_tensor) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(samples_per_tensor);
    }
    double worst = 0.0;
    for (std::size_t idx : coords) {
      double a = g.data()[idx];
      if (!std::isfinite(a)) throw Error(ErrorCode::NonFiniteGradient, params[k].first, params[k].first);
      double saved = theta.data()[idx];
      std::uint64_t sig_plus = 0, sig_minus = 0;
      theta.data()[idx] = saved + step;
      auto xp = labeled_logits(model, in, ws, &sig_plus);
      theta.data()[idx] = saved - step;
      auto xm = labeled_logits(model, in, ws, &sig_minus);
      theta.data()[idx] = saved;
      if (sig_plus != base_sig || sig_minus != base_sig) {
        ++result.skipped_kinks;
        continue;
      }
      // L(theta+step) - L(theta-step), summed per labeled logit.
      double diff = 0.0;
      std::size_t j = 0;
      for (std::size_t c = 0; c < in.rows.size(); ++c) {
        for (std::size_t t = 0; t < kTaskCount; ++t) {
          std::int8_t y = in.labels[c][t];
          if (y < 0) continue;
          diff += lambda[t] * (softplus_diff(xp[j], xm[j]) - static_cast<double>(y) * (xp[j] - xm[j]));
          ++j;
        }
      }
      double num = diff / (2.0 * step);
      double rel = std::abs(a - num) / std::max(1e-8, std::abs(a) + std::abs(num));
      worst = std::max(worst, rel);
      ++result.checked;
    }
    result.per_tensor.emplace_back(params[k].first, worst);
    result.max_rel_error = std::max(result.max_rel_error, worst);
  }
  return result;
}

}  // namespace sessionrank
