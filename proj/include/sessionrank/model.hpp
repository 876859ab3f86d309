// Ranker model: configuration and the named parameter bundle.
//
// Parameters are templated on the scalar type so the same code trains in
// float and gradient-checks in double.

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>

#include <Eigen/Dense>

#include "sessionrank/domain.hpp"
#include "sessionrank/features.hpp"

namespace sessionrank {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

/// Column-vector view of a bias stored as an n x 1 tensor.
template <typename T>
Eigen::Map<Vec<T>> as_vec(Mat<T>& m) {
  return Eigen::Map<Vec<T>>(m.data(), m.size());
}
template <typename T>
Eigen::Map<const Vec<T>> as_vec(const Mat<T>& m) {
  return Eigen::Map<const Vec<T>>(m.data(), m.size());
}

enum class Variant : std::uint8_t { mlp = 0, rnn = 1, lstm = 2, bilstm = 3, transformer = 4 };
inline constexpr std::array<Variant, 5> kAllVariants = {Variant::mlp, Variant::rnn, Variant::lstm, Variant::bilstm,
                                                        Variant::transformer};

/// insession sees the full context; baseline masks f5-f10 and drops the
/// current session from token sequences.
enum class InputMode : std::uint8_t { insession = 0, baseline = 1 };

constexpr std::string_view to_string(Variant v) noexcept {
  switch (v) {
    case Variant::mlp: return "mlp";
    case Variant::rnn: return "rnn";
    case Variant::lstm: return "lstm";
    case Variant::bilstm: return "bilstm";
    case Variant::transformer: return "transformer";
  }
  return "mlp";
}

inline std::optional<Variant> parse_variant(std::string_view s) noexcept {
  for (Variant v : kAllVariants) {
    if (to_string(v) == s) return v;
  }
  return std::nullopt;
}

constexpr std::string_view to_string(InputMode m) noexcept {
  return m == InputMode::insession ? "insession" : "baseline";
}

inline std::optional<InputMode> parse_input_mode(std::string_view s) noexcept {
  if (s == "insession") return InputMode::insession;
  if (s == "baseline") return InputMode::baseline;
  return std::nullopt;
}

constexpr bool is_sequence_variant(Variant v) noexcept { return v != Variant::mlp; }

/// Heads are ordered play, add_to_list, click.
inline constexpr std::size_t kTaskCount = 3;
inline constexpr std::array<std::string_view, kTaskCount> kTaskNames = {"play", "add_to_list", "click"};

constexpr std::optional<std::size_t> task_index(ActionType a) noexcept {
  switch (a) {
    case ActionType::play: return 0;
    case ActionType::add_to_list: return 1;
    case ActionType::click: return 2;
    case ActionType::impression: return std::nullopt;
  }
  return std::nullopt;
}

struct ModelConfig {
  Variant variant = Variant::mlp;
  InputMode input_mode = InputMode::insession;
  std::uint32_t embed_dim = 32;
  std::uint32_t hidden_dim = 64;
  std::uint32_t heads = 2;
  std::uint32_t layers = 1;
  std::uint32_t max_len = static_cast<std::uint32_t>(kMaxSequenceLength);
  std::uint32_t n_titles = 0;
  std::uint32_t n_genres = 0;
  std::array<float, kTaskCount> alpha = {1.0f, 0.5f, 0.25f};
  std::uint32_t feature_schema = kFeatureSchemaVersion;

  std::size_t state_dim() const noexcept {
    switch (variant) {
      case Variant::mlp: return embed_dim;
      case Variant::rnn:
      case Variant::lstm: return hidden_dim;
      case Variant::bilstm: return 2 * static_cast<std::size_t>(hidden_dim);
      case Variant::transformer: return embed_dim;
    }
    return embed_dim;
  }

  /// Dimension of the user vector z = state ++ projected profile.
  std::size_t user_dim() const noexcept { return state_dim() + embed_dim; }

  void validate() const {
    if (embed_dim == 0 || hidden_dim == 0 || max_len == 0 || n_titles == 0 || n_genres == 0)
      throw Error(ErrorCode::InvalidConfig, "model dimensions must be positive", "model");
    if (variant == Variant::transformer && (heads == 0 || embed_dim % heads != 0))
      throw Error(ErrorCode::InvalidConfig, "embed_dim must be divisible by heads", "heads");
    if (layers != 1) throw Error(ErrorCode::InvalidConfig, "only single-layer encoders are supported", "layers");
    if (feature_schema != kFeatureSchemaVersion)
      throw Error(ErrorCode::InvalidConfig, "unsupported feature schema", "feature_schema");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Every tensor any variant may use. Tensors a variant does not use stay 0x0
/// and are skipped by visit().
/// Tensors that are data statistics rather than learned weights: the
/// optimizer and the gradient check leave them alone.
inline bool is_frozen_tensor(std::string_view name) noexcept {
  return name == "mlp.in_mean" || name == "mlp.in_inv_std";
}

template <typename T>
struct ParamSet {
  Mat<T> title_emb;     // (n_titles + 1) x d, row 0 is padding and frozen at 0
  Mat<T> action_emb;    // 4 x d
  Mat<T> time_emb;      // 8 x d
  Mat<T> flag_emb;      // 2 x d
  Mat<T> profile_proj;  // G x d
  std::array<Mat<T>, kTaskCount> head_w;  // d x user_dim
  Mat<T> head_b;                          // 3 x 1

  Mat<T> mlp_in_mean, mlp_in_inv_std;  // frozen input standardization, set by train()
  Mat<T> mlp_w1, mlp_b1, mlp_w2, mlp_b2;

  Mat<T> rnn_wx, rnn_wh, rnn_b;

  Mat<T> lstm_wx, lstm_wh, lstm_b;              // gate blocks ordered i, f, g, o
  Mat<T> lstm_bwd_wx, lstm_bwd_wh, lstm_bwd_b;  // bilstm reverse direction

  Mat<T> pos_emb;
  Mat<T> ln1_g, ln1_b;
  Mat<T> attn_wq, attn_bq, attn_wk, attn_wv, attn_bv, attn_wo, attn_bo;
  Mat<T> ln2_g, ln2_b;
  Mat<T> ff_w1, ff_b1, ff_w2, ff_b2;

  /// Calls f(name, tensor) for each tensor of the variant, in file order.
  template <typename Self, typename F>
  static void visit(Self& self, Variant variant, F&& f) {
    f("title_emb", self.title_emb);
    f("action_emb", self.action_emb);
    f("time_emb", self.time_emb);
    f("flag_emb", self.flag_emb);
    f("profile_proj", self.profile_proj);
    f("head.play.w", self.head_w[0]);
    f("head.add_to_list.w", self.head_w[1]);
    f("head.click.w", self.head_w[2]);
    f("head.b", self.head_b);
    switch (variant) {
      case Variant::mlp:
        f("mlp.in_mean", self.mlp_in_mean);
        f("mlp.in_inv_std", self.mlp_in_inv_std);
        f("mlp.w1", self.mlp_w1);
        f("mlp.b1", self.mlp_b1);
        f("mlp.w2", self.mlp_w2);
        f("mlp.b2", self.mlp_b2);
        break;
      case Variant::rnn:
        f("rnn.wx", self.rnn_wx);
        f("rnn.wh", self.rnn_wh);
        f("rnn.b", self.rnn_b);
        break;
      case Variant::bilstm:
        f("lstm.fwd.wx", self.lstm_wx);
        f("lstm.fwd.wh", self.lstm_wh);
        f("lstm.fwd.b", self.lstm_b);
        f("lstm.bwd.wx", self.lstm_bwd_wx);
        f("lstm.bwd.wh", self.lstm_bwd_wh);
        f("lstm.bwd.b", self.lstm_bwd_b);
        break;
      case Variant::lstm:
        f("lstm.fwd.wx", self.lstm_wx);
        f("lstm.fwd.wh", self.lstm_wh);
        f("lstm.fwd.b", self.lstm_b);
        break;
      case Variant::transformer:
        f("tf.pos_emb", self.pos_emb);
        f("tf.ln1.g", self.ln1_g);
        f("tf.ln1.b", self.ln1_b);
        f("tf.attn.wq", self.attn_wq);
        f("tf.attn.bq", self.attn_bq);
        f("tf.attn.wk", self.attn_wk);
        f("tf.attn.wv", self.attn_wv);
        f("tf.attn.bv", self.attn_bv);
        f("tf.attn.wo", self.attn_wo);
        f("tf.attn.bo", self.attn_bo);
        f("tf.ln2.g", self.ln2_g);
        f("tf.ln2.b", self.ln2_b);
        f("tf.ff.w1", self.ff_w1);
        f("tf.ff.b1", self.ff_b1);
        f("tf.ff.w2", self.ff_w2);
        f("tf.ff.b2", self.ff_b2);
        break;
    }
  }

  /// All tensors of the variant allocated with their configured shapes, zeroed.
  static ParamSet zeros(const ModelConfig& c) {
    const Eigen::Index d = c.embed_dim, h = c.hidden_dim, g = c.n_genres;
    const Eigen::Index n = static_cast<Eigen::Index>(c.n_titles) + 1;
    const Eigen::Index u = static_cast<Eigen::Index>(c.user_dim());
    ParamSet p;
    p.title_emb = Mat<T>::Zero(n, d);
    p.action_emb = Mat<T>::Zero(kActionCount, d);
    p.time_emb = Mat<T>::Zero(kTimeBuckets, d);
    p.flag_emb = Mat<T>::Zero(2, d);
    p.profile_proj = Mat<T>::Zero(g, d);
    for (auto& w : p.head_w) w = Mat<T>::Zero(d, u);
    p.head_b = Mat<T>::Zero(kTaskCount, 1);
    switch (c.variant) {
      case Variant::mlp:
        p.mlp_in_mean = Mat<T>::Zero(kFeatureCount, 1);
        p.mlp_in_inv_std = Mat<T>::Ones(kFeatureCount, 1);
        p.mlp_w1 = Mat<T>::Zero(h, kFeatureCount);
        p.mlp_b1 = Mat<T>::Zero(h, 1);
        p.mlp_w2 = Mat<T>::Zero(d, h);
        p.mlp_b2 = Mat<T>::Zero(d, 1);
        break;
      case Variant::rnn:
        p.rnn_wx = Mat<T>::Zero(h, d);
        p.rnn_wh = Mat<T>::Zero(h, h);
        p.rnn_b = Mat<T>::Zero(h, 1);
        break;
      case Variant::bilstm:
        p.lstm_bwd_wx = Mat<T>::Zero(4 * h, d);
        p.lstm_bwd_wh = Mat<T>::Zero(4 * h, h);
        p.lstm_bwd_b = Mat<T>::Zero(4 * h, 1);
        [[fallthrough]];
      case Variant::lstm:
        p.lstm_wx = Mat<T>::Zero(4 * h, d);
        p.lstm_wh = Mat<T>::Zero(4 * h, h);
        p.lstm_b = Mat<T>::Zero(4 * h, 1);
        break;
      case Variant::transformer:
        p.pos_emb = Mat<T>::Zero(c.max_len, d);
        p.ln1_g = Mat<T>::Ones(d, 1);
        p.ln1_b = Mat<T>::Zero(d, 1);
        p.attn_wq = Mat<T>::Zero(d, d);
        p.attn_bq = Mat<T>::Zero(d, 1);
        p.attn_wk = Mat<T>::Zero(d, d);
        p.attn_wv = Mat<T>::Zero(d, d);
        p.attn_bv = Mat<T>::Zero(d, 1);
        p.attn_wo = Mat<T>::Zero(d, d);
        p.attn_bo = Mat<T>::Zero(d, 1);
        p.ln2_g = Mat<T>::Ones(d, 1);
        p.ln2_b = Mat<T>::Zero(d, 1);
        p.ff_w1 = Mat<T>::Zero(4 * d, d);
        p.ff_b1 = Mat<T>::Zero(4 * d, 1);
        p.ff_w2 = Mat<T>::Zero(d, 4 * d);
        p.ff_b2 = Mat<T>::Zero(d, 1);
        break;
    }
    return p;
  }

  /// Same shapes as `like`, all zero (gradient buffers).
  static ParamSet zeros_like(const ParamSet& like, Variant variant) {
    ParamSet out = like;
    out.set_zero(variant);
    return out;
  }

  void set_zero(Variant variant) {
    visit(*this, variant, [](std::string_view, Mat<T>& t) { t.setZero(); });
  }
};

template <typename T>
struct RankerModel {
  ModelConfig config;
  ParamSet<T> params;

  template <typename U>
  RankerModel<U> cast() const {
    RankerModel<U> out;
    out.config = config;
    out.params = ParamSet<U>::zeros(config);
    std::vector<const Mat<T>*> src;
    ParamSet<T>::visit(params, config.variant, [&](std::string_view, const Mat<T>& t) { src.push_back(&t); });
    std::size_t i = 0;
    ParamSet<U>::visit(out.params, config.variant,
                       [&](std::string_view, Mat<U>& t) { t = src[i++]->template cast<U>(); });
    return out;
  }

  /// Zero-initialised model (every tensor zero, layer-norm gains one).
  static RankerModel zeros(const ModelConfig& config) {
    config.validate();
    return RankerModel{config, ParamSet<T>::zeros(config)};
  }
};

namespace detail {

template <typename T, typename Rng>
void fill_uniform(Mat<T>& m, double limit, Rng& rng) {
  std::uniform_real_distribution<double> dist(-limit, limit);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(dist(rng));
}

template <typename T, typename Rng>
void fill_xavier(Mat<T>& m, Rng& rng) {
  double limit = std::sqrt(6.0 / static_cast<double>(m.rows() + m.cols()));
  fill_uniform(m, limit, rng);
}

}  // namespace detail

/// Seeded initialisation: embeddings U(-0.05, 0.05), weight matrices
/// Xavier-uniform, biases zero, LSTM forget-gate bias +1, padding row zero.
template <typename T>
RankerModel<T> init_model(const ModelConfig& config, std::uint64_t seed) {
  auto model = RankerModel<T>::zeros(config);
  std::mt19937_64 rng(seed);
  auto& p = model.params;
  const Eigen::Index h = config.hidden_dim;
  ParamSet<T>::visit(p, config.variant, [&](std::string_view name, Mat<T>& t) {
    if (name == "title_emb" || name == "action_emb" || name == "time_emb" || name == "flag_emb" ||
        name == "tf.pos_emb") {
      detail::fill_uniform(t, 0.05, rng);
    } else if (t.cols() > 1) {
      detail::fill_xavier(t, rng);
    }
  });
  p.title_emb.row(0).setZero();
  if (config.variant == Variant::lstm || config.variant == Variant::bilstm) {
    p.lstm_b.block(h, 0, h, 1).setConstant(T(1));
    if (config.variant == Variant::bilstm) p.lstm_bwd_b.block(h, 0, h, 1).setConstant(T(1));
  }
  return model;
}

/// Embedding-table coordinates of one token; title_row 0 is padding.
struct TokenRow {
  std::uint32_t title_row = 0;
  std::uint8_t action = 0;
  std::uint8_t bucket = 0;
  std::uint8_t flag = 0;

  bool is_padding() const noexcept { return title_row == 0; }
  friend bool operator==(const TokenRow&, const TokenRow&) = default;
};

/// Title embedding row of a catalog title (dense catalog index + 1).
inline std::uint32_t title_row(const Catalog& catalog, TitleId id) {
  auto idx = catalog.index_of(id);
  if (!idx) throw Error(ErrorCode::UnknownTitle, std::to_string(id), "title_id");
  return static_cast<std::uint32_t>(*idx + 1);
}

inline std::vector<TokenRow> to_rows(const TokenSequence& seq, const Catalog& catalog) {
  std::vector<TokenRow> rows;
  rows.reserve(seq.size());
  for (const auto& t : seq.tokens) {
    rows.push_back(TokenRow{title_row(catalog, t.title_id), static_cast<std::uint8_t>(t.action), t.time_bucket,
                            static_cast<std::uint8_t>(t.session_flag)});
  }
  return rows;
}

}  // namespace sessionrank
