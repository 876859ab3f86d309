// Encoders: the engineered-feature MLP and the four sequence encoders
// (rnn, lstm, bilstm, causal pre-LN transformer), each with a hand-written
// backward pass. Forward passes cache what backward needs, so one encoder
// object serves one example at a time.

#pragma once

#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "sessionrank/model.hpp"

namespace sessionrank {

namespace detail {

template <typename T>
T sigmoid(T x) {
  return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

template <typename T>
T gelu(T x) {
  const T c = T(0.7978845608028654);
  return T(0.5) * x * (T(1) + std::tanh(c * (x + T(0.044715) * x * x * x)));
}

template <typename T>
T gelu_grad(T x) {
  const T c = T(0.7978845608028654);
  T t = std::tanh(c * (x + T(0.044715) * x * x * x));
  return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * c * (T(1) + T(3) * T(0.044715) * x * x);
}

inline constexpr double kLayerNormEps = 1e-5;

template <typename T>
void layer_norm(const Mat<T>& x, const Mat<T>& gamma, const Mat<T>& beta, Mat<T>& xhat, Vec<T>& rstd, Mat<T>& y) {
  const Eigen::Index n = x.rows(), d = x.cols();
  xhat.resize(n, d);
  rstd.resize(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    T mu = x.row(r).mean();
    auto centered = (x.row(r).array() - mu).eval();
    T var = centered.square().mean();
    rstd(r) = T(1) / std::sqrt(var + T(kLayerNormEps));
    xhat.row(r) = centered.matrix() * rstd(r);
  }
  y = xhat * as_vec(gamma).asDiagonal();
  y.rowwise() += as_vec(beta).transpose();
}

template <typename T>
Mat<T> layer_norm_backward(const Mat<T>& dy, const Mat<T>& xhat, const Vec<T>& rstd, const Mat<T>& gamma,
                           Mat<T>& dgamma, Mat<T>& dbeta) {
  as_vec(dgamma) += (dy.array() * xhat.array()).colwise().sum().transpose().matrix();
  as_vec(dbeta) += dy.colwise().sum().transpose();
  Mat<T> dxhat = dy * as_vec(gamma).asDiagonal();
  Mat<T> dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    T m1 = dxhat.row(r).mean();
    T m2 = (dxhat.row(r).array() * xhat.row(r).array()).mean();
    dx.row(r) = (rstd(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2)).matrix();
  }
  return dx;
}

}  // namespace detail

/// Drops padding tokens and keeps the most recent max_len of the rest.
inline std::vector<TokenRow> strip_padding(std::span<const TokenRow> rows, std::size_t max_len) {
  std::vector<TokenRow> out;
  out.reserve(rows.size());
  for (const auto& r : rows) {
    if (!r.is_padding()) out.push_back(r);
  }
  if (out.size() > max_len) out.erase(out.begin(), out.end() - static_cast<std::ptrdiff_t>(max_len));
  return out;
}

/// Token vector = title + action + time-bucket + session-flag embedding.
template <typename T>
Mat<T> embed_tokens(const ParamSet<T>& p, std::span<const TokenRow> rows) {
  Mat<T> x(static_cast<Eigen::Index>(rows.size()), p.title_emb.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    x.row(static_cast<Eigen::Index>(i)) =
        p.title_emb.row(r.title_row) + p.action_emb.row(r.action) + p.time_emb.row(r.bucket) + p.flag_emb.row(r.flag);
  }
  return x;
}

template <typename T>
void embed_tokens_backward(ParamSet<T>& g, std::span<const TokenRow> rows, const Mat<T>& dx) {
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    auto d = dx.row(static_cast<Eigen::Index>(i));
    if (!r.is_padding()) g.title_emb.row(r.title_row) += d;
    g.action_emb.row(r.action) += d;
    g.time_emb.row(r.bucket) += d;
    g.flag_emb.row(r.flag) += d;
  }
}

/// One direction of an LSTM over rows of x (processing order).
template <typename T>
class LstmPass {
 public:
  Vec<T> forward(const Mat<T>& wx, const Mat<T>& wh, const Mat<T>& b, Mat<T> x) {
    x_ = std::move(x);
    const Eigen::Index n = x_.rows(), h = wh.cols();
    Mat<T> pre = x_ * wx.transpose();
    pre.rowwise() += as_vec(b).transpose();
    gates_.resize(n, 4 * h);
    c_ = Mat<T>::Zero(n + 1, h);
    h_ = Mat<T>::Zero(n + 1, h);
    Vec<T> a(4 * h);
    for (Eigen::Index t = 0; t < n; ++t) {
      a.noalias() = pre.row(t).transpose();
      a.noalias() += wh * h_.row(t).transpose();
      for (Eigen::Index j = 0; j < h; ++j) {
        T i = detail::sigmoid(a(j));
        T f = detail::sigmoid(a(h + j));
        T g = std::tanh(a(2 * h + j));
        T o = detail::sigmoid(a(3 * h + j));
        gates_(t, j) = i;
        gates_(t, h + j) = f;
        gates_(t, 2 * h + j) = g;
        gates_(t, 3 * h + j) = o;
        T c = f * c_(t, j) + i * g;
        c_(t + 1, j) = c;
        h_(t + 1, j) = o * std::tanh(c);
      }
    }
    return h_.row(n).transpose();
  }

  /// Returns d(loss)/dx in processing order.
  Mat<T> backward(const Mat<T>& wx, const Mat<T>& wh, const Vec<T>& dh_last, Mat<T>& gwx, Mat<T>& gwh, Mat<T>& gb) {
    const Eigen::Index n = x_.rows(), h = wh.cols();
    Mat<T> da(n, 4 * h);
    Vec<T> dh = dh_last;
    Vec<T> dc = Vec<T>::Zero(h);
    for (Eigen::Index t = n - 1; t >= 0; --t) {
      for (Eigen::Index j = 0; j < h; ++j) {
        T i = gates_(t, j), f = gates_(t, h + j), g = gates_(t, 2 * h + j), o = gates_(t, 3 * h + j);
        T tc = std::tanh(c_(t + 1, j));
        T dcj = dc(j) + dh(j) * o * (T(1) - tc * tc);
        da(t, j) = dcj * g * i * (T(1) - i);
        da(t, h + j) = dcj * c_(t, j) * f * (T(1) - f);
        da(t, 2 * h + j) = dcj * i * (T(1) - g * g);
        da(t, 3 * h + j) = dh(j) * tc * o * (T(1) - o);
        dc(j) = dcj * f;
      }
      dh.noalias() = wh.transpose() * da.row(t).transpose();
    }
    gwx.noalias() += da.transpose() * x_;
    gwh.noalias() += da.transpose() * h_.topRows(n);
    as_vec(gb) += da.colwise().sum().transpose();
    return da * wx;
  }

  const Mat<T>& hidden() const noexcept { return h_; }

 private:
  Mat<T> x_, gates_, c_, h_;
};

template <typename T>
class RnnPass {
 public:
  Vec<T> forward(const Mat<T>& wx, const Mat<T>& wh, const Mat<T>& b, Mat<T> x) {
    x_ = std::move(x);
    const Eigen::Index n = x_.rows(), h = wh.cols();
    Mat<T> pre = x_ * wx.transpose();
    pre.rowwise() += as_vec(b).transpose();
    h_ = Mat<T>::Zero(n + 1, h);
    Vec<T> a(h);
    for (Eigen::Index t = 0; t < n; ++t) {
      a.noalias() = pre.row(t).transpose();
      a.noalias() += wh * h_.row(t).transpose();
      h_.row(t + 1) = a.array().tanh().matrix().transpose();
    }
    return h_.row(n).transpose();
  }

  Mat<T> backward(const Mat<T>& wx, const Mat<T>& wh, const Vec<T>& dh_last, Mat<T>& gwx, Mat<T>& gwh, Mat<T>& gb) {
    const Eigen::Index n = x_.rows();
    Mat<T> da(n, wh.cols());
    Vec<T> dh = dh_last;
    for (Eigen::Index t = n - 1; t >= 0; --t) {
      da.row(t) = (dh.array() * (T(1) - h_.row(t + 1).transpose().array().square())).matrix().transpose();
      dh.noalias() = wh.transpose() * da.row(t).transpose();
    }
    gwx.noalias() += da.transpose() * x_;
    gwh.noalias() += da.transpose() * h_.topRows(n);
    as_vec(gb) += da.colwise().sum().transpose();
    return da * wx;
  }

 private:
  Mat<T> x_, h_;
};

/// Single pre-LN block: x1 = x0 + Attn(LN1(x0)), x2 = x1 + FF(LN2(x1)), with
/// causal multi-head attention and a GELU feed-forward of width 4d.
template <typename T>
class TransformerBlock {
 public:
  const Mat<T>& forward(const ParamSet<T>& p, const Mat<T>& x_tokens, std::size_t heads) {
    const Eigen::Index n = x_tokens.rows(), d = x_tokens.cols();
    heads_ = static_cast<Eigen::Index>(heads);
    const Eigen::Index dh = d / heads_;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));

    x0_ = x_tokens + p.pos_emb.topRows(n);
    Mat<T> a;
    detail::layer_norm(x0_, p.ln1_g, p.ln1_b, xhat1_, rstd1_, a);
    a_ = std::move(a);
    q_ = a_ * p.attn_wq.transpose();
    q_.rowwise() += as_vec(p.attn_bq).transpose();
    // No key bias: softmax is invariant to it.
    k_ = a_ * p.attn_wk.transpose();
    v_ = a_ * p.attn_wv.transpose();
    v_.rowwise() += as_vec(p.attn_bv).transpose();

    o_.resize(n, d);
    probs_.assign(static_cast<std::size_t>(heads_), Mat<T>());
    for (Eigen::Index hd = 0; hd < heads_; ++hd) {
      Mat<T> s = (q_.middleCols(hd * dh, dh) * k_.middleCols(hd * dh, dh).transpose()) * scale;
      Mat<T>& pr = probs_[static_cast<std::size_t>(hd)];
      pr = Mat<T>::Zero(n, n);
      for (Eigen::Index i = 0; i < n; ++i) {
        T m = s.row(i).head(i + 1).maxCoeff();
        T sum = T(0);
        for (Eigen::Index j = 0; j <= i; ++j) {
          pr(i, j) = std::exp(s(i, j) - m);
          sum += pr(i, j);
        }
        pr.row(i).head(i + 1) /= sum;
      }
      o_.middleCols(hd * dh, dh) = pr * v_.middleCols(hd * dh, dh);
    }
    x1_ = x0_ + o_ * p.attn_wo.transpose();
    x1_.rowwise() += as_vec(p.attn_bo).transpose();

    Mat<T> b;
    detail::layer_norm(x1_, p.ln2_g, p.ln2_b, xhat2_, rstd2_, b);
    b_ = std::move(b);
    hpre_ = b_ * p.ff_w1.transpose();
    hpre_.rowwise() += as_vec(p.ff_b1).transpose();
    hact_ = hpre_.unaryExpr([](T v) { return detail::gelu(v); });
    x2_ = x1_ + hact_ * p.ff_w2.transpose();
    x2_.rowwise() += as_vec(p.ff_b2).transpose();
    return x2_;
  }

  /// dout is d(loss)/d(block output). Accumulates parameter gradients
  /// (including positions) and returns d(loss)/d(token embeddings).
  Mat<T> backward(const ParamSet<T>& p, const Mat<T>& dout, ParamSet<T>& g) {
    const Eigen::Index n = x0_.rows(), d = x0_.cols();
    const Eigen::Index dh = d / heads_;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));

    g.ff_w2.noalias() += dout.transpose() * hact_;
    as_vec(g.ff_b2) += dout.colwise().sum().transpose();
    Mat<T> dh_act = dout * p.ff_w2;
    Mat<T> dh_pre = dh_act.array() * hpre_.unaryExpr([](T v) { return detail::gelu_grad(v); }).array();
    g.ff_w1.noalias() += dh_pre.transpose() * b_;
    as_vec(g.ff_b1) += dh_pre.colwise().sum().transpose();
    Mat<T> db = dh_pre * p.ff_w1;
    Mat<T> dx1 = dout + detail::layer_norm_backward(db, xhat2_, rstd2_, p.ln2_g, g.ln2_g, g.ln2_b);

    g.attn_wo.noalias() += dx1.transpose() * o_;
    as_vec(g.attn_bo) += dx1.colwise().sum().transpose();
    Mat<T> d_o = dx1 * p.attn_wo;

    Mat<T> dq = Mat<T>::Zero(n, d), dk = Mat<T>::Zero(n, d), dv = Mat<T>::Zero(n, d);
    for (Eigen::Index hd = 0; hd < heads_; ++hd) {
      const Mat<T>& pr = probs_[static_cast<std::size_t>(hd)];
      Mat<T> doh = d_o.middleCols(hd * dh, dh);
      Mat<T> dp = doh * v_.middleCols(hd * dh, dh).transpose();
      dv.middleCols(hd * dh, dh) += pr.transpose() * doh;
      Vec<T> rowdot = (dp.array() * pr.array()).rowwise().sum();
      Mat<T> ds = pr.array() * (dp.colwise() - rowdot).array();
      dq.middleCols(hd * dh, dh) += (ds * k_.middleCols(hd * dh, dh)) * scale;
      dk.middleCols(hd * dh, dh) += (ds.transpose() * q_.middleCols(hd * dh, dh)) * scale;
    }
    g.attn_wq.noalias() += dq.transpose() * a_;
    as_vec(g.attn_bq) += dq.colwise().sum().transpose();
    g.attn_wk.noalias() += dk.transpose() * a_;
    g.attn_wv.noalias() += dv.transpose() * a_;
    as_vec(g.attn_bv) += dv.colwise().sum().transpose();
    Mat<T> da = dq * p.attn_wq + dk * p.attn_wk + dv * p.attn_wv;

    Mat<T> dx0 = dx1 + detail::layer_norm_backward(da, xhat1_, rstd1_, p.ln1_g, g.ln1_g, g.ln1_b);
    g.pos_emb.topRows(n) += dx0;
    return dx0;
  }

  /// Attention weights of the last forward pass, one n x n matrix per head.
  const std::vector<Mat<T>>& attention() const noexcept { return probs_; }
  const Mat<T>& output() const noexcept { return x2_; }

 private:
  Eigen::Index heads_ = 1;
  Mat<T> x0_, xhat1_, a_, q_, k_, v_, o_, x1_, xhat2_, b_, hpre_, hact_, x2_;
  Vec<T> rstd1_, rstd2_;
  std::vector<Mat<T>> probs_;
};

/// Dispatches over the sequence variants. forward() -> state; backward()
/// accumulates into a gradient bundle of the same shape as the model.
template <typename T>
class SequenceEncoder {
 public:
  Vec<T> forward(const RankerModel<T>& model, std::span<const TokenRow> tokens) {
    const auto& c = model.config;
    if (!is_sequence_variant(c.variant))
      throw Error(ErrorCode::VariantMismatch, "encode_sequence needs a sequence variant", "variant");
    const auto& p = model.params;
    const auto n_rows = static_cast<std::uint32_t>(p.title_emb.rows());
    for (const auto& r : tokens) {
      if (r.title_row >= n_rows || r.action >= kActionCount || r.bucket >= kTimeBuckets || r.flag >= 2)
        throw Error(ErrorCode::InvalidArgument, "token outside embedding range", "tokens");
    }
    variant_ = c.variant;
    rows_ = strip_padding(tokens, c.max_len);
    if (rows_.empty()) return Vec<T>::Zero(static_cast<Eigen::Index>(c.state_dim()));
    Mat<T> x = embed_tokens(p, rows_);
    switch (c.variant) {
      case Variant::rnn: return rnn_.forward(p.rnn_wx, p.rnn_wh, p.rnn_b, std::move(x));
      case Variant::lstm: return fwd_.forward(p.lstm_wx, p.lstm_wh, p.lstm_b, std::move(x));
      case Variant::bilstm: {
        Mat<T> reversed = x.colwise().reverse();
        Vec<T> hf = fwd_.forward(p.lstm_wx, p.lstm_wh, p.lstm_b, std::move(x));
        Vec<T> hb = bwd_.forward(p.lstm_bwd_wx, p.lstm_bwd_wh, p.lstm_bwd_b, std::move(reversed));
        Vec<T> state(hf.size() + hb.size());
        state << hf, hb;
        return state;
      }
      case Variant::transformer: {
        const Mat<T>& out = tf_.forward(p, x, c.heads);
        return out.row(out.rows() - 1).transpose();
      }
      case Variant::mlp: break;
    }
    return {};
  }

  void backward(const RankerModel<T>& model, const Vec<T>& dstate, ParamSet<T>& g) {
    if (rows_.empty()) return;
    const auto& p = model.params;
    Mat<T> dx;
    switch (variant_) {
      case Variant::rnn: dx = rnn_.backward(p.rnn_wx, p.rnn_wh, dstate, g.rnn_wx, g.rnn_wh, g.rnn_b); break;
      case Variant::lstm: dx = fwd_.backward(p.lstm_wx, p.lstm_wh, dstate, g.lstm_wx, g.lstm_wh, g.lstm_b); break;
      case Variant::bilstm: {
        const Eigen::Index h = p.lstm_wh.cols();
        dx = fwd_.backward(p.lstm_wx, p.lstm_wh, dstate.head(h), g.lstm_wx, g.lstm_wh, g.lstm_b);
        Mat<T> dxr = bwd_.backward(p.lstm_bwd_wx, p.lstm_bwd_wh, dstate.tail(h), g.lstm_bwd_wx, g.lstm_bwd_wh,
                                   g.lstm_bwd_b);
        dx += dxr.colwise().reverse();
        break;
      }
      case Variant::transformer: {
        Mat<T> dout = Mat<T>::Zero(static_cast<Eigen::Index>(rows_.size()), p.title_emb.cols());
        dout.row(dout.rows() - 1) = dstate.transpose();
        dx = tf_.backward(p, dout, g);
        break;
      }
      case Variant::mlp: return;
    }
    embed_tokens_backward(g, rows_, dx);
  }

  const TransformerBlock<T>& transformer() const noexcept { return tf_; }

 private:
  Variant variant_ = Variant::rnn;
  std::vector<TokenRow> rows_;
  RnnPass<T> rnn_;
  LstmPass<T> fwd_, bwd_;
  TransformerBlock<T> tf_;
};

/// Two-layer feature network over a batch of candidate feature rows
/// (C x F): relu(W1 f + b1) then W2 . + b2, giving C x d states.
template <typename T>
class FeatureEncoder {
 public:
  Mat<T> forward(const RankerModel<T>& model, const Mat<T>& features) {
    if (model.config.variant != Variant::mlp)
      throw Error(ErrorCode::VariantMismatch, "encode_features needs the mlp variant", "variant");
    const auto& p = model.params;
    f_ = (features.rowwise() - as_vec(p.mlp_in_mean).transpose()).array().rowwise() *
         as_vec(p.mlp_in_inv_std).transpose().array();
    pre_ = f_ * p.mlp_w1.transpose();
    pre_.rowwise() += as_vec(p.mlp_b1).transpose();
    r_ = pre_.cwiseMax(T(0));
    Mat<T> s = r_ * p.mlp_w2.transpose();
    s.rowwise() += as_vec(p.mlp_b2).transpose();
    return s;
  }

  void backward(const RankerModel<T>& model, const Mat<T>& ds, ParamSet<T>& g) {
    const auto& p = model.params;
    g.mlp_w2.noalias() += ds.transpose() * r_;
    as_vec(g.mlp_b2) += ds.colwise().sum().transpose();
    Mat<T> dr = ds * p.mlp_w2;
    Mat<T> dpre = (pre_.array() > T(0)).select(dr, Mat<T>::Zero(dr.rows(), dr.cols()));
    g.mlp_w1.noalias() += dpre.transpose() * f_;
    as_vec(g.mlp_b1) += dpre.colwise().sum().transpose();
  }

  /// Hash of the relu activation pattern; changes when any unit crosses 0.
  std::uint64_t activation_signature() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (Eigen::Index i = 0; i < pre_.size(); ++i) {
      h ^= pre_.data()[i] > T(0) ? 1u : 0u;
      h *= 1099511628211ULL;
    }
    return h;
  }

 private:
  Mat<T> f_, pre_, r_;
};

template <typename T>
Vec<T> encode_sequence(std::span<const TokenRow> tokens, const RankerModel<T>& model) {
  SequenceEncoder<T> enc;
  return enc.forward(model, tokens);
}

template <typename T>
Vec<T> encode_features(const FeatureVector& features, const RankerModel<T>& model) {
  Mat<T> f(1, static_cast<Eigen::Index>(kFeatureCount));
  for (std::size_t i = 0; i < kFeatureCount; ++i) f(0, static_cast<Eigen::Index>(i)) = static_cast<T>(features[i]);
  FeatureEncoder<T> enc;
  return enc.forward(model, f).row(0).transpose();
}

}  // namespace sessionrank
