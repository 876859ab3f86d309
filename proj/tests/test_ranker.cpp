#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "sessionrank/model_io.hpp"
#include "sessionrank/ranker.hpp"
#include "support/properties.hpp"
#include "support/test_util.hpp"

using namespace sessionrank;
using namespace sessionrank::testing;

namespace {

constexpr std::int64_t kT0 = 1'700'000'000'000;

ModelConfig config_for(Variant v, std::uint32_t n_titles = 50, std::uint32_t n_genres = 10) {
  ModelConfig c;
  c.variant = v;
  c.n_titles = n_titles;
  c.n_genres = n_genres;
  return c;
}

// Row-wise layer norm and tanh-form GELU, written out long-hand.
Eigen::VectorXd ln(const Eigen::VectorXd& x, const Eigen::VectorXd& g, const Eigen::VectorXd& b) {
  double mu = x.sum() / static_cast<double>(x.size());
  double var = 0;
  for (double v : x) var += (v - mu) * (v - mu);
  var /= static_cast<double>(x.size());
  Eigen::VectorXd y(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) y(i) = (x(i) - mu) / std::sqrt(var + 1e-5) * g(i) + b(i);
  return y;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x))); }

Eigen::VectorXd col(const Mat<double>& m) { return Eigen::Map<const Eigen::VectorXd>(m.data(), m.size()); }

SessionView warm_view(std::mt19937_64& rng, std::uint32_t n_titles) {
  StoreConfig config;
  auto events = random_stream(rng, config.inactivity_timeout_ms, 30, 1);
  events.push_back(ev(1, 1, ActionType::play, events.empty() ? 5 : events.back().ts_ms + 1000));
  for (auto& e : events) {
    e.ts_ms += kT0;
    e.title_id = 1 + e.title_id % n_titles;
  }
  return make_view(events, events.back().ts_ms + 60'000, config);
}

std::vector<InteractionEvent> flatten(const SessionView& v) {
  std::vector<InteractionEvent> out;
  for (auto it = v.past.rbegin(); it != v.past.rend(); ++it) out.insert(out.end(), it->events.begin(), it->events.end());
  if (v.current) out.insert(out.end(), v.current->events.begin(), v.current->events.end());
  return out;
}

}  // namespace

TEST(Encoders, ZeroRnnGivesZeroState) {
  auto model = RankerModel<float>::zeros(config_for(Variant::rnn));
  std::mt19937_64 rng(1);
  auto rows = random_rows(rng, 50, 1, 20);
  Vec<float> s = encode_sequence<float>(rows, model);
  ASSERT_EQ(s.size(), 64);
  EXPECT_EQ(s.cwiseAbs().maxCoeff(), 0.0f);
}

TEST(Encoders, EmptySequenceGivesZeroState) {
  for (Variant v : {Variant::rnn, Variant::lstm, Variant::bilstm, Variant::transformer}) {
    auto model = init_model<float>(config_for(v), 3);
    Vec<float> s = encode_sequence<float>(std::vector<TokenRow>{}, model);
    EXPECT_EQ(s.size(), static_cast<Eigen::Index>(model.config.state_dim()));
    EXPECT_EQ(s.cwiseAbs().maxCoeff(), 0.0f);
  }
}

TEST(Encoders, SequenceEncoderRejectsMlp) {
  auto model = init_model<float>(config_for(Variant::mlp), 3);
  try {
    encode_sequence<float>(std::vector<TokenRow>{TokenRow{1, 0, 0, 0}}, model);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::VariantMismatch);
  }
  auto seq = init_model<float>(config_for(Variant::rnn), 3);
  EXPECT_THROW(encode_features<float>(FeatureVector{}, seq), Error);
}

TEST(Encoders, TokenOutsideEmbeddingRange) {
  auto model = init_model<float>(config_for(Variant::lstm, 5), 3);
  EXPECT_THROW(encode_sequence<float>(std::vector<TokenRow>{TokenRow{6, 0, 0, 0}}, model), Error);
  EXPECT_THROW(encode_sequence<float>(std::vector<TokenRow>{TokenRow{1, 0, 8, 0}}, model), Error);
}

TEST(Encoders, TransformerSinglePositionMatchesHandForward) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    auto model = random_model(Variant::transformer, rng).cast<double>();
    const auto& p = model.params;
    TokenRow tok{static_cast<std::uint32_t>(1 + trial % 20), static_cast<std::uint8_t>(trial % 4),
                 static_cast<std::uint8_t>(trial % 8), static_cast<std::uint8_t>(trial % 2)};
    Eigen::VectorXd x = p.title_emb.row(tok.title_row).transpose() + p.action_emb.row(tok.action).transpose() +
                        p.time_emb.row(tok.bucket).transpose() + p.flag_emb.row(tok.flag).transpose() +
                        p.pos_emb.row(0).transpose();
    Eigen::VectorXd a = ln(x, col(p.ln1_g), col(p.ln1_b));
    // With one position the attention weight is exactly 1, so the head output is V.
    Eigen::VectorXd v = p.attn_wv * a + col(p.attn_bv);
    Eigen::VectorXd x1 = x + p.attn_wo * v + col(p.attn_bo);
    Eigen::VectorXd b = ln(x1, col(p.ln2_g), col(p.ln2_b));
    Eigen::VectorXd h = p.ff_w1 * b + col(p.ff_b1);
    for (double& e : h) e = gelu(e);
    Eigen::VectorXd expected = x1 + p.ff_w2 * h + col(p.ff_b2);

    TransformerBlock<double> block;
    Mat<double> xt = embed_tokens(p, std::span<const TokenRow>(&tok, 1));
    block.forward(p, xt, 2);
    for (const auto& att : block.attention()) EXPECT_EQ(att(0, 0), 1.0);
    Vec<double> got = encode_sequence<double>(std::vector<TokenRow>{tok}, model);
    ASSERT_EQ(got.size(), expected.size());
    EXPECT_LT((got - expected).cwiseAbs().maxCoeff(), 1e-10) << trial;
  }
}

TEST(Encoders, ZeroMlpGivesZeroState) {
  auto model = RankerModel<float>::zeros(config_for(Variant::mlp));
  FeatureVector f;
  for (std::size_t i = 0; i < kFeatureCount; ++i) f.values[i] = static_cast<float>(i) - 3.0f;
  Vec<float> s = encode_features<float>(f, model);
  ASSERT_EQ(s.size(), 32);
  EXPECT_EQ(s.cwiseAbs().maxCoeff(), 0.0f);
}

TEST(Encoders, MlpZeroInputMatchesMatmulOracle) {
  std::mt19937_64 rng(22);
  auto model = init_model<double>(config_for(Variant::mlp), 22);
  std::uniform_real_distribution<double> u(-1, 1);
  for (Eigen::Index i = 0; i < model.params.mlp_b1.size(); ++i) model.params.mlp_b1.data()[i] = u(rng);
  for (Eigen::Index i = 0; i < model.params.mlp_b2.size(); ++i) model.params.mlp_b2.data()[i] = u(rng);
  Vec<double> got = encode_features<double>(FeatureVector{}, model);
  const auto& p = model.params;
  for (Eigen::Index r = 0; r < p.mlp_w2.rows(); ++r) {
    double acc = p.mlp_b2.data()[r];
    for (Eigen::Index k = 0; k < p.mlp_w2.cols(); ++k) acc += p.mlp_w2(r, k) * std::max(0.0, p.mlp_b1.data()[k]);
    EXPECT_NEAR(got(r), acc, 1e-12);
  }
}

TEST(Encoders, ReluDeadZone) {
  std::mt19937_64 rng(23);
  auto model = init_model<double>(config_for(Variant::mlp), 23);
  auto& p = model.params;
  const Eigen::Index j = 4;
  p.mlp_w1.col(j) = -p.mlp_w1.col(j).cwiseAbs() - Vec<double>::Constant(p.mlp_w1.rows(), 0.1);
  p.mlp_b1.setConstant(-0.01);
  FeatureVector f;
  f.values[j] = 1.0f;
  Vec<double> base = encode_features<double>(f, model);
  for (float inc : {0.5f, 3.0f, 100.0f}) {
    FeatureVector g = f;
    g.values[j] += inc;
    EXPECT_EQ(encode_features<double>(g, model), base);
  }
}

TEST(Scoring, ZeroModelScoresSeventhEighths) {
  auto catalog = std::make_shared<const Catalog>(small_catalog(20));
  auto model = std::make_shared<const RankerModel<float>>(RankerModel<float>::zeros(config_for(Variant::mlp, 20)));
  Ranker ranker(model, catalog);
  SessionView view;
  view.current = Session{1, {ev(1, 3, ActionType::play, kT0)}, kT0, kT0};
  auto list = ranker.rank(view, MemberProfile{}, kT0 + 1000, 20);
  ASSERT_EQ(list.items.size(), 20u);
  EXPECT_FALSE(list.cold_start);
  for (std::size_t i = 0; i < 20; ++i) {
    EXPECT_FLOAT_EQ(list.items[i].score, 0.875f);
    EXPECT_EQ(list.items[i].title_id, i + 1);
    EXPECT_EQ(list.items[i].rank, i + 1);
  }
}

TEST(Scoring, SingleDimensionToyMatchesBruteForce) {
  std::vector<CatalogEntry> entries = {{10, "a", {0}, 1}, {20, "b", {0}, 1}, {30, "c", {1}, 1}};
  auto catalog = std::make_shared<const Catalog>(entries);
  auto m = RankerModel<float>::zeros(config_for(Variant::mlp, 3, 2));
  m.params.mlp_b2(0, 0) = 1.0f;     // state = e_0
  m.params.head_w[0](0, 0) = 1.0f;  // play logit = e_i[0]
  m.params.head_w[2](0, 0) = -2.0f; // click logit = -2 e_i[0]
  const std::array<float, 3> e0 = {0.3f, -1.0f, 2.0f};
  for (int i = 0; i < 3; ++i) m.params.title_emb(i + 1, 0) = e0[static_cast<std::size_t>(i)];
  auto model = std::make_shared<const RankerModel<float>>(m);
  MemberProfile profile;
  profile.genre_affinity[0] = 1.0;
  auto list = Ranker(model, catalog).rank(SessionView{}, profile, kT0, 3);

  auto sig = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
  std::vector<std::pair<double, TitleId>> brute;
  for (int i = 0; i < 3; ++i) {
    double x = e0[static_cast<std::size_t>(i)];
    brute.push_back({-(sig(x) + 0.5 * sig(0.0) + 0.25 * sig(-2.0 * x)), entries[static_cast<std::size_t>(i)].title_id});
  }
  std::sort(brute.begin(), brute.end());
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(list.items[static_cast<std::size_t>(i)].title_id, brute[static_cast<std::size_t>(i)].second);
    EXPECT_NEAR(list.items[static_cast<std::size_t>(i)].score, -brute[static_cast<std::size_t>(i)].first, 1e-6);
  }
}

TEST(Scoring, CombinedIsMonotoneInEachTaskLogit) {
  std::mt19937_64 rng(24);
  std::uniform_real_distribution<float> u(-20, 20), step(0, 5);
  const std::array<float, 3> alpha = {1.0f, 0.5f, 0.25f};
  for (int i = 0; i < 10000; ++i) {
    float s[3] = {u(rng), u(rng), u(rng)};
    float before = combine_tasks(alpha, s);
    s[i % 3] += step(rng);
    ASSERT_GE(combine_tasks(alpha, s), before);
  }
}

TEST(Ranking, KLargerThanCatalog) {
  auto catalog = std::make_shared<const Catalog>(small_catalog(7));
  auto model = std::make_shared<const RankerModel<float>>(init_model<float>(config_for(Variant::mlp, 7), 1));
  MemberProfile profile;
  profile.genre_affinity[2] = 1.0;
  auto list = rank(SessionView{}, profile, catalog, 50, model, kT0);
  ASSERT_EQ(list.items.size(), 7u);
  for (std::size_t i = 0; i < 7; ++i) EXPECT_EQ(list.items[i].rank, i + 1);
}

TEST(Ranking, ColdMemberFallsBackToPopularity) {
  std::vector<CatalogEntry> entries = {{5, "", {0}, 10}, {2, "", {1}, 30}, {9, "", {0}, 30}, {1, "", {2}, 1}};
  auto catalog = std::make_shared<const Catalog>(entries);
  auto model = std::make_shared<const RankerModel<float>>(init_model<float>(config_for(Variant::lstm, 4, 3), 1));
  auto list = rank(SessionView{}, MemberProfile{}, catalog, 4, model, kT0);
  EXPECT_TRUE(list.cold_start);
  std::vector<TitleId> order;
  for (const auto& it : list.items) order.push_back(it.title_id);
  EXPECT_EQ(order, (std::vector<TitleId>{2, 9, 5, 1}));
}

TEST(Ranking, RejectsZeroK) {
  auto catalog = std::make_shared<const Catalog>(small_catalog(7));
  auto model = std::make_shared<const RankerModel<float>>(init_model<float>(config_for(Variant::mlp, 7), 1));
  EXPECT_THROW(rank(SessionView{}, MemberProfile{}, catalog, 0, model, kT0), Error);
}

TEST(Ranking, CatalogSizeMustMatchModel) {
  auto catalog = std::make_shared<const Catalog>(small_catalog(7));
  auto model = std::make_shared<const RankerModel<float>>(init_model<float>(config_for(Variant::mlp, 8), 1));
  EXPECT_THROW(Ranker(model, catalog), Error);
}

// The serving path folds the heads into per-title tables; it must agree with
// the plain per-candidate composition of encoder and heads.
TEST(Ranking, ServingPathMatchesReferenceComposition) {
  std::mt19937_64 rng(25);
  const std::uint32_t n = 50;
  auto catalog = std::make_shared<const Catalog>(small_catalog(n));
  for (Variant v : kAllVariants) {
    for (InputMode mode : {InputMode::insession, InputMode::baseline}) {
      auto m = random_model(v, rng, n, 1.0f);
      m.config.n_genres = 10;
      m.params.profile_proj = Mat<float>::Random(10, m.config.embed_dim);
      m.config.input_mode = mode;
      if (v == Variant::mlp) {
        m.params.mlp_in_mean = Mat<float>::Random(kFeatureCount, 1);
        m.params.mlp_in_inv_std = Mat<float>::Random(kFeatureCount, 1).cwiseAbs();
      }
      auto model = std::make_shared<const RankerModel<float>>(m);
      Ranker ranker(model, catalog);
      for (int trial = 0; trial < 10; ++trial) {
        SessionView view = warm_view(rng, n);
        auto profile = build_profile(1, flatten(view), *catalog);
        const std::int64_t now = view.as_of_ms;
        auto fast = ranker.score_catalog(view, profile, now).combined;

        std::vector<std::uint32_t> rows(n);
        std::iota(rows.begin(), rows.end(), 1u);
        Vec<float> pv = project_profile(m, affinity_of<float>(profile, 10));
        Mat<float> states;
        if (v == Variant::mlp) {
          states.resize(n, m.config.embed_dim);
          for (std::uint32_t i = 0; i < n; ++i) {
            FeatureVector f = build_features(view, profile, (*catalog)[i], *catalog, now);
            if (mode == InputMode::baseline) mask_session_features(f);
            states.row(i) = encode_features<float>(f, m).transpose();
          }
        } else {
          SessionView seen = view;
          if (mode == InputMode::baseline) seen.current.reset();
          auto toks = to_rows(build_sequence(seen), *catalog);
          states = encode_sequence<float>(toks, m).transpose();
        }
        Mat<float> logits = head_logits(m, states, pv, rows);
        for (std::uint32_t i = 0; i < n; ++i) {
          float ref = combine_tasks(m.config.alpha, logits.row(i).data());
          ASSERT_NEAR(fast[i], ref, 2e-5f * std::max(1.0f, std::abs(ref)))
              << to_string(v) << " mode " << int(mode) << " title " << i + 1;
        }
      }
    }
  }
}

TEST(Ranking, ScoresAreDeterministic) {
  std::mt19937_64 rng(26);
  auto catalog = std::make_shared<const Catalog>(small_catalog(50));
  for (Variant v : kAllVariants) {
    auto model = std::make_shared<const RankerModel<float>>(random_model(v, rng, 50, 1.0f, 10));
    auto m2 = std::make_shared<const RankerModel<float>>(*model);
    SessionView view = warm_view(rng, 50);
    auto profile = build_profile(1, flatten(view), *catalog);
    auto a = Ranker(model, catalog).score_catalog(view, profile, view.as_of_ms).combined;
    auto b = Ranker(m2, catalog).score_catalog(view, profile, view.as_of_ms).combined;
    ASSERT_EQ(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)), 0) << to_string(v);
  }
}

TEST(Ranking, RankedListInvariants) {
  std::mt19937_64 rng(27);
  auto catalog = std::make_shared<const Catalog>(small_catalog(50));
  auto model = std::make_shared<const RankerModel<float>>(random_model(Variant::mlp, rng, 50, 1.0f, 10));
  Ranker ranker(model, catalog);
  for (int trial = 0; trial < 200; ++trial) {
    SessionView view = warm_view(rng, 50);
    auto list = ranker.rank(view, build_profile(1, flatten(view), *catalog), view.as_of_ms, 1 + trial % 60, true);
    for (std::size_t i = 0; i < list.items.size(); ++i) {
      ASSERT_EQ(list.items[i].rank, i + 1);
      ASSERT_TRUE(list.items[i].task_scores.has_value());
      if (i > 0) {
        ASSERT_GE(list.items[i - 1].score, list.items[i].score);
        if (list.items[i - 1].score == list.items[i].score)
          ASSERT_LT(list.items[i - 1].title_id, list.items[i].title_id);
      }
    }
  }
}

TEST(RankerProperties, PaddingNeutrality) {
  auto r = check_padding_neutrality(10000, 31);
  EXPECT_TRUE(r.ok()) << r.first_failure;
}

TEST(RankerProperties, LstmBound) {
  auto r = check_lstm_bound(10000, 32);
  EXPECT_TRUE(r.ok()) << r.first_failure;
}

TEST(RankerProperties, AttentionRowsAreConvex) {
  auto r = check_attention_rows(10000, 33);
  EXPECT_TRUE(r.ok()) << r.first_failure;
}

TEST(RankerProperties, TransformerCausality) {
  auto r = check_causality(10000, 34);
  EXPECT_TRUE(r.ok()) << r.first_failure;
}

TEST(RankerProperties, TieBreakTotality) {
  auto r = check_tie_break_totality(10000, 35);
  EXPECT_TRUE(r.ok()) << r.first_failure;
}

TEST(ModelFile, RoundTripProperty) {
  auto r = check_model_round_trip(10000, 36);
  EXPECT_TRUE(r.ok()) << r.first_failure;
}

TEST(ModelFile, SaveLoadFile) {
  TempDir dir("model");
  auto model = init_model<float>(config_for(Variant::bilstm), 9);
  save_model(model, dir / "m.bin");
  auto back = load_model(dir / "m.bin");
  EXPECT_EQ(back.config, model.config);
  EXPECT_EQ(back.params.lstm_bwd_wh, model.params.lstm_bwd_wh);
  EXPECT_EQ(back.params.title_emb, model.params.title_emb);
}

TEST(ModelFile, CorruptMagic) {
  std::stringstream buf;
  write_model(init_model<float>(config_for(Variant::mlp), 1), buf);
  std::string bytes = buf.str();
  bytes[0] = 'X';
  std::stringstream in(bytes);
  try {
    read_model(in);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::BadMagic);
  }
}

TEST(ModelFile, VersionMismatch) {
  std::stringstream buf;
  write_model(init_model<float>(config_for(Variant::mlp), 1), buf);
  std::string bytes = buf.str();
  bytes[4] = 2;
  std::stringstream in(bytes);
  try {
    read_model(in);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::VersionMismatch);
  }
}

TEST(ModelFile, TensorCountShortOfHeader) {
  std::stringstream buf;
  write_model(init_model<float>(config_for(Variant::rnn), 1), buf);
  std::string bytes = buf.str();
  // Header: magic, version, variant, mode, 7 u32 dims, 3 f32 alpha, schema, then the tensor count.
  const std::size_t count_at = 4 + 4 + 1 + 1 + 7 * 4 + 3 * 4 + 4;
  ASSERT_GT(static_cast<unsigned char>(bytes[count_at]), 1);
  bytes[count_at] = static_cast<char>(bytes[count_at] - 1);
  std::stringstream in(bytes);
  try {
    read_model(in);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::TruncatedFile);
  }
}

TEST(ModelFile, TruncatedStream) {
  std::stringstream buf;
  write_model(init_model<float>(config_for(Variant::transformer), 1), buf);
  std::string bytes = buf.str();
  std::stringstream in(bytes.substr(0, bytes.size() - 7));
  try {
    read_model(in);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::TruncatedFile);
  }
}
