#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "ditprobe/probe.hpp"
#include "test_support.hpp"

using namespace ditprobe;
using ditprobe::testing::random_prompt;
using ditprobe::testing::small_config;

namespace {

// One text-attention layer with I image tokens and T text tokens.
AttentionTrace<double> hand_trace(std::size_t I, std::size_t T, std::size_t H, std::size_t d) {
  AttentionTrace<double> tr;
  tr.variant = Variant::cross_attn;
  tr.text_len = T;
  tr.image_tokens = I;
  tr.heads = H;
  tr.d_model = d;
  LayerTrace<double> lt;
  lt.has_text_attention = true;
  lt.attention.assign(H, Tensor({I, T}));
  lt.values = Tensor({T, d});
  lt.w_o = Tensor({d, d});
  tr.layers.push_back(lt);
  return tr;
}

AttentionTrace<double> traced_forward(const ModelParams<double>& p, const Prompt& prompt, std::uint64_t seed,
                                      double t = 0.4) {
  Rng rng(seed);
  const auto& c = p.config;
  auto x = rng_normal<double>(rng, {c.channels, c.image_size, c.image_size});
  AttentionTrace<double> tr;
  forward(p, x, prompt, t, &tr);
  return tr;
}

// Summand of key j for every image token, built by attending to key j alone:
// concat_h(A_h[:, j] v_j^h) W_o.
Tensor single_key_output(const AttentionTrace<double>& tr, std::size_t l, std::size_t j) {
  const auto& lt = tr.layers[l];
  const std::size_t I = tr.image_tokens, d = tr.d_model, dh = d / tr.heads;
  Tensor heads({I, d});
  for (std::size_t i = 0; i < I; ++i)
    for (std::size_t h = 0; h < tr.heads; ++h)
      for (std::size_t k = 0; k < dh; ++k)
        heads(i, h * dh + k) = lt.attention[h](tr.image_row(i), j) * lt.values(j, h * dh + k);
  return matmul(heads, lt.w_o);
}

double row_norm(const Tensor& m, std::size_t r) {
  double s = 0;
  for (double v : m.row(r)) s += v * v;
  return std::sqrt(s);
}

ContributionSeries series(std::vector<std::vector<double>> steps) {
  ContributionSeries s;
  s.layers = steps.front().size();
  s.steps = std::move(steps);
  return s;
}

}  // namespace

TEST(ContributionMap, SingleKeySingleHead) {
  auto tr = hand_trace(3, 1, 1, 2);
  auto& lt = tr.layers[0];
  for (std::size_t i = 0; i < 3; ++i) lt.attention[0](i, 0) = 1.0;
  lt.values = Tensor::matrix({{2.0, -1.0}});
  lt.w_o = Tensor::matrix({{1.0, 2.0}, {0.0, 3.0}});
  const Tensor cont = contribution_map(tr, 0);
  // v W_o = [2, 1]
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(cont(i, 0), std::sqrt(5.0), 1e-15);
}

TEST(ContributionMap, HandExpansionTwoKeys) {
  auto tr = hand_trace(1, 2, 1, 2);
  auto& lt = tr.layers[0];
  lt.attention[0] = Tensor::matrix({{0.25, 0.75}});
  lt.values = Tensor::matrix({{1.0, 2.0}, {3.0, -1.0}});
  lt.w_o = Tensor::matrix({{1.0, 0.0}, {1.0, 1.0}});
  const Tensor cont = contribution_map(tr, 0);
  // v1 W_o = [3, 2], v2 W_o = [2, -1]
  EXPECT_NEAR(cont(0, 0), 0.9013878188659973, 1e-15);
  EXPECT_NEAR(cont(0, 1), 1.6770509831248424, 1e-15);
}

TEST(ContributionMap, ZeroHeadDropsOut) {
  auto tr = hand_trace(2, 2, 2, 4);
  auto& lt = tr.layers[0];
  std::mt19937_64 gen(3);
  std::uniform_real_distribution<double> u(-1, 1);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      const double a = 0.5 + 0.25 * u(gen);
      lt.attention[0](i, j) = a;
      lt.attention[1](i, j) = 1.0 - a;
    }
  // Head 2 owns value columns 2..3; they stay zero.
  for (std::size_t j = 0; j < 2; ++j)
    for (std::size_t k = 0; k < 2; ++k) lt.values(j, k) = u(gen);
  for (auto& w : lt.w_o.storage()) w = u(gen);
  std::vector<Tensor> heads;
  const Tensor cont = contribution_map(tr, 0, &heads);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      double s = 0;
      for (std::size_t c = 0; c < 4; ++c) {
        double v = 0;
        for (std::size_t k = 0; k < 2; ++k) v += lt.values(j, k) * lt.w_o(k, c);
        v *= lt.attention[0](i, j);
        s += v * v;
      }
      EXPECT_NEAR(cont(i, j), std::sqrt(s), 1e-14);
      EXPECT_EQ(cont(i, j), heads[0](i, j));
      EXPECT_EQ(heads[1](i, j), 0.0);
    }
}

TEST(ContributionMap, LayerOutOfRangeRejected) {
  auto tr = hand_trace(1, 1, 1, 2);
  EXPECT_THROW(contribution_map(tr, 1), ContractViolation);
}

class ProbeOnModel : public ::testing::TestWithParam<Variant> {};

TEST_P(ProbeOnModel, MatchesDecompositionSummands) {
  const auto cfg = small_config(GetParam());
  const auto p = init_params<double>(cfg, 11);
  Rng rng(4);
  for (int rep = 0; rep < 3; ++rep) {
    const auto tr = traced_forward(p, random_prompt(cfg, rng), 100 + rep);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      std::vector<Tensor> heads;
      const Tensor cont = contribution_map(tr, l, &heads);
      Tensor total({tr.image_tokens, tr.d_model});
      for (std::size_t j = 0; j < tr.text_len; ++j) {
        const Tensor y = single_key_output(tr, l, j);
        for (std::size_t i = 0; i < tr.image_tokens; ++i) {
          const double ref = row_norm(y, i);
          EXPECT_NEAR(cont(i, j), ref, 1e-9 * std::max(1.0, ref));
          EXPECT_GE(cont(i, j), 0.0);
        }
        add_inplace(total, y);
      }
      if (GetParam() == Variant::cross_attn) {
        // Text is the whole key set, so the summands rebuild the block output.
        EXPECT_LT(max_abs_diff(total, tr.layers[l].attn_output), 1e-9);
      }
    }
  }
}

TEST_P(ProbeOnModel, PositiveHomogeneityInValues) {
  auto cfg = small_config(GetParam());
  cfg.heads = 1;
  const auto p = init_params<double>(cfg, 12);
  Rng rng(5);
  auto tr = traced_forward(p, random_prompt(cfg, rng), 7);
  const Tensor before = contribution_map(tr, 1);
  for (auto& v : tr.layers[1].values.storage()) v *= 2.5;
  const Tensor after = contribution_map(tr, 1);
  for (std::size_t k = 0; k < before.size(); ++k) EXPECT_NEAR(after[k], 2.5 * before[k], 1e-12);
}

TEST_P(ProbeOnModel, AllPositionsDominateSingle) {
  const auto cfg = small_config(GetParam());
  const auto p = init_params<double>(cfg, 13);
  Rng rng(6);
  const auto tr = traced_forward(p, random_prompt(cfg, rng), 8);
  std::vector<std::size_t> all(cfg.text_len);
  std::iota(all.begin(), all.end(), 0);
  const auto total = token_contribution(tr, all);
  for (std::size_t j = 0; j < cfg.text_len; ++j) {
    const auto one = token_contribution(tr, {j});
    for (std::size_t l = 0; l < cfg.layers; ++l) EXPECT_GE(total[l], one[l]);
  }
  EXPECT_THROW(token_contribution(tr, {}), ContractViolation);
  EXPECT_THROW(token_contribution(tr, {cfg.text_len}), ContractViolation);
}

TEST_P(ProbeOnModel, DuplicateTokenScoresEqual) {
  const auto cfg = small_config(GetParam());
  const auto p = init_params<double>(cfg, 14);
  Prompt prompt{{1, 7, 3, 7, 5, 2, 0, 0}, {1}};
  const auto tr = traced_forward(p, prompt, 9);
  const auto a = token_contribution(tr, {1}), b = token_contribution(tr, {3});
  if (GetParam() == Variant::cross_attn) {
    // Text keys carry no positional signal in the cross-attention variant.
    for (std::size_t l = 0; l < cfg.layers; ++l) EXPECT_NEAR(a[l], b[l], 1e-12 * std::max(1.0, a[l]));
  } else {
    // The first joint block sees identical rows; later blocks may not.
    EXPECT_NEAR(a[0], b[0], 1e-12 * std::max(1.0, a[0]));
  }
}

INSTANTIATE_TEST_SUITE_P(Variants, ProbeOnModel, ::testing::Values(Variant::cross_attn, Variant::mmdit),
                         [](const auto& info) { return std::string(variant_name(info.param)); });

TEST(TokenContribution, PaddingBaselineFixture) {
  const auto cfg = small_config(Variant::cross_attn);
  const auto p = init_params<double>(cfg, 21);
  Prompt prompt{{1, 9, 2, 4, 0, 0, 0, 0}, {1}};
  const auto tr = traced_forward(p, prompt, 22);
  const auto pad = token_contribution(tr, {4, 5, 6, 7});
  // Measured on this untrained model; attention never reaches exactly zero.
  const std::vector<double> frozen = {2.3215738315799292, 3.485557038113279, 1.793615054645016};
  ASSERT_EQ(pad.size(), frozen.size());
  for (std::size_t l = 0; l < pad.size(); ++l) {
    EXPECT_GT(pad[l], 0.0);
    EXPECT_NEAR(pad[l], frozen[l], 1e-12);
  }
}

TEST(Aggregate, SingleRecordIsItsOwnMean) {
  const auto s = series({{1.0, 2.0, 3.0}, {3.0, 2.0, 1.0}});
  const auto agg = aggregate({s});
  EXPECT_EQ(agg.scores, (std::vector<double>{2.0, 2.0, 2.0}));
  EXPECT_EQ(agg.n_records, 1u);
  EXPECT_EQ(agg.timestep_policy, "all");
}

TEST(Aggregate, IdenticalRecordsIdempotent) {
  const auto s = series({{0.1, 0.7, 0.3}});
  const auto three = aggregate({s, s, s}).scores, one = aggregate({s}).scores;
  for (std::size_t l = 0; l < one.size(); ++l) EXPECT_DOUBLE_EQ(three[l], one[l]);
}

TEST(Aggregate, PermutationInvariantBitwise) {
  std::mt19937_64 gen(1);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<ContributionSeries> recs;
  for (int r = 0; r < 17; ++r) {
    std::vector<std::vector<double>> steps(5, std::vector<double>(6));
    for (auto& st : steps)
      for (auto& v : st) v = u(gen) * std::pow(10.0, double(r % 5) - 2);
    recs.push_back(series(steps));
  }
  const auto ref = aggregate(recs);
  for (int trial = 0; trial < 20; ++trial) {
    std::shuffle(recs.begin(), recs.end(), gen);
    EXPECT_EQ(aggregate(recs).scores, ref.scores);
  }
}

TEST(Aggregate, TimestepPolicies) {
  const auto s = series({{1.0, 0.0}, {3.0, 4.0}, {5.0, 8.0}});
  AggregateOptions single;
  single.timesteps = TimestepPolicy::single(1);
  EXPECT_EQ(aggregate({s}, single).scores, (std::vector<double>{3.0, 4.0}));
  AggregateOptions sub;
  sub.timesteps = TimestepPolicy::parse("subset:0;2");
  EXPECT_EQ(aggregate({s}, sub).scores, (std::vector<double>{3.0, 4.0}));
  EXPECT_EQ(TimestepPolicy::parse("single:1").describe(), "single:1");
  EXPECT_EQ(TimestepPolicy::parse("all").describe(), "all");
  AggregateOptions none;
  none.timesteps = TimestepPolicy::single(9);
  EXPECT_THROW(aggregate({s}, none), ContractViolation);
}

TEST(Aggregate, MaxNormalization) {
  AggregateOptions opt;
  opt.max_normalize = true;
  const auto agg = aggregate({series({{1.0, 4.0}}), series({{10.0, 5.0}})}, opt);
  EXPECT_DOUBLE_EQ(agg.scores[0], (0.25 + 1.0) / 2);
  EXPECT_DOUBLE_EQ(agg.scores[1], (1.0 + 0.5) / 2);
}

TEST(Aggregate, MixedModelsRejected) {
  EXPECT_THROW(aggregate({series({{1.0, 2.0}}), series({{1.0, 2.0, 3.0}})}), ContractViolation);
  EXPECT_THROW(aggregate({}), ContractViolation);
}

TEST(Aggregate, FromRecordMatchesOnlineProbe) {
  const auto cfg = small_config(Variant::mmdit);
  const auto p = init_params<double>(cfg, 31);
  Rng rng(2);
  const Prompt prompt = random_prompt(cfg, rng);
  SamplerConfig sc;
  sc.steps = 4;
  sc.seed = 3;
  sc.keep_traces = true;
  const auto rec = sample(p, prompt, Objective::flow(), sc);
  const auto offline = contribution_series(rec, {1});
  const auto online = probe_generation(p, prompt, {1}, Objective::flow(), sc);
  EXPECT_EQ(offline.steps, online.steps);
  EXPECT_EQ(aggregate({offline}).scores.size(), cfg.layers);
}

TEST(SelectTopK, Basics) {
  LayerScores s;
  s.scores = {3, 1, 2};
  EXPECT_EQ(select_top_k(s, 2).blocks, (std::vector<std::size_t>{0, 2}));
  EXPECT_EQ(select_top_k(s, 3).sorted(), (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_THROW(select_top_k(s, 0), ContractViolation);
  EXPECT_THROW(select_top_k(s, 4), ContractViolation);
}

TEST(SelectTopK, TiesGoToLowerIndex) {
  LayerScores s;
  s.scores = {1, 5, 2, 5, 2};
  EXPECT_EQ(select_top_k(s, 3).blocks, (std::vector<std::size_t>{1, 3, 2}));
}

TEST(SelectTopK, InvariantUnderPositiveRescaling) {
  std::mt19937_64 gen(9);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 200; ++trial) {
    LayerScores s;
    for (int l = 0; l < 12; ++l) s.scores.push_back(std::round(u(gen) * 6) / 6);
    LayerScores scaled = s;
    const double c = std::pow(2.0, double(trial % 9) - 4);
    for (auto& v : scaled.scores) v *= c;
    for (std::size_t k = 1; k <= 12; ++k) EXPECT_EQ(select_top_k(s, k).blocks, select_top_k(scaled, k).blocks);
  }
}

TEST(SelectTopK, FractionAndRatio) {
  EXPECT_EQ(k_from_fraction(28, 0.4), 11u);
  EXPECT_EQ(k_from_fraction(12, 0.4), 4u);
  EXPECT_EQ(k_from_fraction(10, 0.4), 4u);
  EXPECT_EQ(k_from_ratio(28, 9, 28), 9u);
  EXPECT_EQ(k_from_ratio(12, 9, 28), 4u);
  EXPECT_EQ(k_from_ratio(12, 5, 28), 2u);
}

TEST(LayerScoresCsv, Layout) {
  LayerScores s;
  s.scores = {0.5, 0.25};
  s.n_records = 3;
  EXPECT_EQ(s.table().text(), "block_index,score,n_records\n0,0.5,3\n1,0.25,3\n");
}
