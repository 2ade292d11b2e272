#include <gtest/gtest.h>

#include <cmath>

#include "ditprobe/engine.hpp"
#include "test_support.hpp"

using namespace ditprobe;
using ditprobe::testing::random_prompt;
using ditprobe::testing::small_config;

namespace {

Tensor random_image(const ModelConfig& c, Rng& rng) { return rng_normal<double>(rng, {c.channels, c.image_size, c.image_size}); }

bool all_zero(const Tensor& t) {
  return std::all_of(t.storage().begin(), t.storage().end(), [](double v) { return v == 0.0; });
}

}  // namespace

TEST(MakeTarget, FlowEndpointsAndMidpoint) {
  Rng rng(1);
  Tensor clean = rng_normal<double>(rng, {3, 4, 4}), noise = rng_normal<double>(rng, {3, 4, 4});
  const auto obj = Objective::flow();
  for (double t : {0.0, 0.5, 1.0}) {
    auto p = make_target(obj, clean, noise, t);
    for (std::size_t i = 0; i < clean.size(); ++i) {
      EXPECT_DOUBLE_EQ(p.input[i], (1 - t) * noise[i] + t * clean[i]);
      EXPECT_DOUBLE_EQ(p.target[i], clean[i] - noise[i]);
    }
  }
  EXPECT_EQ(make_target(obj, clean, noise, 1.0).input, clean);
  EXPECT_EQ(make_target(obj, clean, noise, 0.0).input, noise);
}

TEST(MakeTarget, FlowZeroNoiseScalesImage) {
  Rng rng(2);
  Tensor clean = rng_normal<double>(rng, {3, 4, 4}), zero({3, 4, 4});
  auto p = make_target(Objective::flow(), clean, zero, 0.3);
  for (std::size_t i = 0; i < clean.size(); ++i) EXPECT_DOUBLE_EQ(p.input[i], 0.3 * clean[i]);
  EXPECT_EQ(p.target, clean);
}

TEST(MakeTarget, EpsilonNoNoiseEndpoint) {
  Rng rng(3);
  Tensor clean = rng_normal<double>(rng, {3, 4, 4}), noise = rng_normal<double>(rng, {3, 4, 4});
  const auto obj = Objective::epsilon();
  ASSERT_EQ(obj.alpha_bar_at(1.0), 1.0);
  auto p = make_target(obj, clean, noise, 1.0);
  EXPECT_EQ(p.input, clean);
  EXPECT_EQ(p.target, noise);
  for (double t : {0.0, 0.5}) {
    const double ab = obj.alpha_bar_at(t);
    auto q = make_target(obj, clean, noise, t);
    for (std::size_t i = 0; i < clean.size(); ++i)
      EXPECT_NEAR(q.input[i], std::sqrt(ab) * clean[i] + std::sqrt(1 - ab) * noise[i], 1e-15);
    EXPECT_EQ(q.target, noise);
  }
}

TEST(MakeTarget, TimeOutOfRangeRejected) {
  Tensor a({2}), b({2});
  EXPECT_THROW(make_target(Objective::flow(), a, b, 1.5), ContractViolation);
  EXPECT_THROW(make_target(Objective::epsilon(), a, b, -0.1), ContractViolation);
}

TEST(Objective, EpsilonScheduleDecreasesFromOneToNearZero) {
  const auto obj = Objective::epsilon(100);
  ASSERT_EQ(obj.alpha_bar.size(), 101u);
  EXPECT_EQ(obj.alpha_bar.front(), 1.0);
  for (std::size_t k = 1; k < obj.alpha_bar.size(); ++k) EXPECT_LT(obj.alpha_bar[k], obj.alpha_bar[k - 1]);
  EXPECT_GT(obj.alpha_bar[1], 0.99);
  EXPECT_LT(obj.alpha_bar.back(), 1e-3);
}

class LossGrads : public ::testing::TestWithParam<std::tuple<Variant, ObjectiveKind>> {};

TEST_P(LossGrads, MatchFiniteDifferences) {
  const auto [variant, kind] = GetParam();
  auto cfg = small_config(variant);
  auto params = init_params<double>(cfg, 9);
  const auto obj = Objective::of(kind);
  Rng rng(10);
  std::vector<TrainItem<double>> batch(1);
  batch[0].clean = random_image(cfg, rng);
  batch[0].noise = random_image(cfg, rng);
  batch[0].prompt = random_prompt(cfg, rng);
  batch[0].t = kind == ObjectiveKind::flow_matching ? 0.41 : obj.time_of(37);
  GradientMask mask = GradientMask::all(cfg.layers);
  mask.token_table = true;
  auto lg = loss_and_grads(params, batch, obj, mask);

  std::vector<Tensor*> p, g;
  params.for_each([&](const std::string&, int, Tensor& t) { p.push_back(&t); });
  lg.grads.for_each([&](const std::string&, int, Tensor& t) { g.push_back(&t); });
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t k = rng.below(p.size());
    const std::size_t e = rng.below(p[k]->size());
    const double orig = (*p[k])[e], h = 1e-5;
    (*p[k])[e] = orig + h;
    const double lp = loss_and_grads(params, batch, obj, GradientMask::none(cfg.layers)).loss;
    (*p[k])[e] = orig - h;
    const double lm = loss_and_grads(params, batch, obj, GradientMask::none(cfg.layers)).loss;
    (*p[k])[e] = orig;
    const double fd = (lp - lm) / (2 * h), an = (*g[k])[e];
    EXPECT_LT(std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-4}), 1e-5) << "tensor " << k << " elem " << e;
  }
}

INSTANTIATE_TEST_SUITE_P(BothVariantsBothObjectives, LossGrads,
                         ::testing::Combine(::testing::Values(Variant::cross_attn, Variant::mmdit),
                                            ::testing::Values(ObjectiveKind::flow_matching,
                                                              ObjectiveKind::epsilon_prediction)));

TEST(LossAndGrads, FullMaskLeavesNoTensorZero) {
  auto cfg = small_config(Variant::cross_attn);
  auto params = init_params<double>(cfg, 1);
  Rng rng(2);
  std::vector<TrainItem<double>> batch(2);
  for (auto& it : batch) {
    it.clean = random_image(cfg, rng);
    it.noise = random_image(cfg, rng);
    it.prompt = random_prompt(cfg, rng);
    it.t = rng.uniform();
  }
  GradientMask mask = GradientMask::all(cfg.layers);
  mask.token_table = true;
  auto lg = loss_and_grads(params, batch, Objective::flow(), mask);
  lg.grads.for_each([&](const std::string& name, int, const Tensor& t) { EXPECT_FALSE(all_zero(t)) << name; });
}

TEST(LossAndGrads, EmbeddingOnlyMaskZeroesEveryBlock) {
  auto cfg = small_config(Variant::mmdit);
  auto params = init_params<double>(cfg, 1);
  Rng rng(2);
  std::vector<TrainItem<double>> batch(1);
  batch[0] = {random_image(cfg, rng), random_image(cfg, rng), random_prompt(cfg, rng), 0.5};
  GradientMask mask = GradientMask::none(cfg.layers);
  mask.token_table = true;
  auto lg = loss_and_grads(params, batch, Objective::flow(), mask);
  lg.grads.for_each([&](const std::string& name, int, const Tensor& t) {
    if (name == "shared.token_embed")
      EXPECT_FALSE(all_zero(t));
    else
      EXPECT_TRUE(all_zero(t)) << name;
  });
}

TEST(LossAndGrads, EmptyBatchRejected) {
  auto params = init_params<double>(small_config(Variant::cross_attn), 1);
  EXPECT_THROW(loss_and_grads(params, {}, Objective::flow(), GradientMask::all(3)), ContractViolation);
}

namespace {

std::vector<Example<double>> tiny_dataset(const ModelConfig& cfg, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Example<double>> data;
  for (std::size_t i = 0; i < n; ++i) {
    Example<double> ex;
    ex.image = rng_normal<double>(rng, {cfg.channels, cfg.image_size, cfg.image_size});
    for (auto& v : ex.image.storage()) v = std::tanh(v);
    ex.prompt = random_prompt(cfg, rng);
    data.push_back(ex);
  }
  return data;
}

}  // namespace

TEST(Train, ZeroStepsLeavesParamsUnchanged) {
  auto cfg = small_config(Variant::cross_attn);
  auto params = init_params<double>(cfg, 4);
  TrainHyper h;
  h.steps = 0;
  auto res = train(params, tiny_dataset(cfg, 2, 1), Objective::flow(), GradientMask::all(cfg.layers), h, 3);
  EXPECT_EQ(params_checksum(res.params), params_checksum(params));
  EXPECT_TRUE(res.log.rows.empty());
}

TEST(Train, EmptyMaskRejected) {
  auto cfg = small_config(Variant::cross_attn);
  auto params = init_params<double>(cfg, 4);
  EXPECT_THROW(train(params, tiny_dataset(cfg, 2, 1), Objective::flow(), GradientMask::none(cfg.layers), {}, 3),
               ContractViolation);
}

TEST(Train, OverfitsSingleImage) {
  ModelConfig cfg;  // default width so the patch embedding is not a bottleneck
  cfg.layers = 2;
  cfg.image_size = 16;
  cfg.vocab = 24;
  auto params = init_params<double>(cfg, 4);
  TrainHyper h;
  h.steps = 500;
  h.batch = 4;
  h.adam.lr = 6e-3;
  h.warmup = 50;
  h.clip_norm = 1.0;
  auto res = train(params, tiny_dataset(cfg, 1, 7), Objective::flow(), GradientMask::all(cfg.layers), h, 3);
  const double first = res.log.rows.front().loss, last = res.log.mean_loss(450, 500);
  EXPECT_LT(last * 10, first) << "first " << first << " last " << last;
}

TEST(Train, MaskedParametersBitwiseUntouchedAndStateCounted) {
  auto cfg = small_config(Variant::cross_attn);
  cfg.layers = 4;
  auto params = init_params<double>(cfg, 4);
  GradientMask mask = GradientMask::only(cfg.layers, {1, 3});
  mask.token_rows = {5};
  TrainHyper h;
  h.steps = 10;
  h.batch = 2;
  auto data = tiny_dataset(cfg, 3, 7);
  for (auto& ex : data) ex.prompt.tokens[1] = 5;
  auto res = train(params, data, Objective::flow(), mask, h, 3);

  std::size_t expected_state = cfg.d_model;  // one embedding row
  std::vector<const Tensor*> after;
  res.params.for_each([&](const std::string&, int, const Tensor& t) { after.push_back(&t); });
  std::size_t k = 0;
  params.for_each([&](const std::string& name, int block, const Tensor& before) {
    const Tensor& now = *after[k++];
    if (name == "shared.token_embed") {
      for (std::size_t r = 0; r < before.rows(); ++r) {
        const bool same = std::equal(before.row(r).begin(), before.row(r).end(), now.row(r).begin());
        EXPECT_EQ(same, r != 5) << "embedding row " << r;
      }
    } else if (block == 1 || block == 3) {
      expected_state += before.size();
      EXPECT_NE(before, now) << name;
    } else {
      EXPECT_EQ(before, now) << name;
    }
  });
  EXPECT_EQ(res.log.optimizer_state_elements, expected_state);
  for (const auto& row : res.log.rows) EXPECT_EQ(row.updated_param_count, expected_state);
}

TEST(Train, DeterministicGivenSeed) {
  auto cfg = small_config(Variant::mmdit);
  auto params = init_params<double>(cfg, 4);
  TrainHyper h;
  h.steps = 5;
  h.batch = 3;
  auto data = tiny_dataset(cfg, 4, 2);
  auto a = train(params, data, Objective::epsilon(), GradientMask::all(cfg.layers), h, 11);
  auto b = train(params, data, Objective::epsilon(), GradientMask::all(cfg.layers), h, 11);
  EXPECT_EQ(params_checksum(a.params), params_checksum(b.params));
  for (std::size_t i = 0; i < a.log.rows.size(); ++i) EXPECT_EQ(a.log.rows[i].loss, b.log.rows[i].loss);
}

TEST(Train, DivergenceAborts) {
  auto cfg = small_config(Variant::cross_attn);
  auto params = init_params<double>(cfg, 4);
  TrainHyper h;
  h.steps = 50;
  h.batch = 1;
  h.adam.lr = 50.0;
  h.divergence = 2.0;
  EXPECT_THROW(train(params, tiny_dataset(cfg, 2, 2), Objective::flow(), GradientMask::all(cfg.layers), h, 1),
               Diverged);
}

TEST(Sample, SameSeedBitwiseIdentical) {
  for (auto kind : {ObjectiveKind::flow_matching, ObjectiveKind::epsilon_prediction}) {
    auto cfg = small_config(Variant::cross_attn);
    auto params = init_params<double>(cfg, 4);
    Rng rng(1);
    auto prompt = random_prompt(cfg, rng);
    SamplerConfig sc{10, 42};
    auto a = sample(params, prompt, Objective::of(kind), sc);
    auto b = sample(params, prompt, Objective::of(kind), sc);
    EXPECT_EQ(a.image, b.image);
    EXPECT_EQ(a.latents.size(), 11u);
    EXPECT_EQ(a.latents.back(), a.image);
  }
}

TEST(Sample, StepCountChangesImage) {
  auto cfg = small_config(Variant::mmdit);
  auto params = init_params<double>(cfg, 4);
  Rng rng(1);
  auto prompt = random_prompt(cfg, rng);
  auto a = sample(params, prompt, Objective::flow(), {1, 42});
  auto b = sample(params, prompt, Objective::flow(), {50, 42});
  EXPECT_NE(a.image, b.image);
}

TEST(Sample, TracesCoverEveryStepWhenKept) {
  auto cfg = small_config(Variant::cross_attn);
  auto params = init_params<double>(cfg, 4);
  Rng rng(1);
  SamplerConfig sc{4, 1};
  sc.keep_traces = true;
  auto rec = sample(params, random_prompt(cfg, rng), Objective::flow(), sc);
  ASSERT_EQ(rec.traces.size(), 4u);
  for (const auto& tr : rec.traces) EXPECT_EQ(tr.layers.size(), cfg.layers);
  EXPECT_EQ(rec.times, (std::vector<double>{0.0, 0.25, 0.5, 0.75}));
}
