#include <gtest/gtest.h>

#include <numeric>

#include "ditprobe/intervene.hpp"
#include "test_support.hpp"

using namespace ditprobe;
using ditprobe::testing::random_prompt;
using ditprobe::testing::small_config;

namespace {

struct Pair {
  Prompt knowledge, neutral;
};

Pair random_pair(const ModelConfig& cfg, Rng& rng) {
  Pair p;
  p.knowledge = random_prompt(cfg, rng);
  p.neutral = p.knowledge;
  int swap = int(rng.below(cfg.vocab));
  if (swap == p.knowledge.tokens[1]) swap = (swap + 1) % int(cfg.vocab);
  p.neutral.tokens[1] = swap;
  return p;
}

BlockSet all_blocks(std::size_t L) {
  BlockSet b;
  b.blocks.resize(L);
  std::iota(b.blocks.begin(), b.blocks.end(), 0);
  return b;
}

InterventionPlan plan_for(const Pair& pair, BlockSet blocks, std::uint64_t seed, std::size_t steps = 4) {
  InterventionPlan plan{std::move(blocks), pair.knowledge, pair.neutral, {}};
  plan.sampler.steps = steps;
  plan.sampler.seed = seed;
  return plan;
}

}  // namespace

class InterventionInvariants : public ::testing::TestWithParam<std::tuple<Variant, ObjectiveKind>> {};

TEST_P(InterventionInvariants, EmptySetIsPlainGeneration) {
  const auto [variant, kind] = GetParam();
  const auto cfg = small_config(variant);
  const auto p = init_params<double>(cfg, 3);
  const auto obj = Objective::of(kind);
  Rng rng(1);
  for (int rep = 0; rep < 3; ++rep) {
    const auto pair = random_pair(cfg, rng);
    const auto plan = plan_for(pair, {}, 40 + rep);
    EXPECT_EQ(generate_intervened(p, plan, obj).image, sample(p, pair.knowledge, obj, plan.sampler).image);
  }
}

TEST_P(InterventionInvariants, AllBlocksIsNeutralGeneration) {
  const auto [variant, kind] = GetParam();
  const auto cfg = small_config(variant);
  const auto p = init_params<double>(cfg, 4);
  const auto obj = Objective::of(kind);
  Rng rng(2);
  for (int rep = 0; rep < 3; ++rep) {
    const auto pair = random_pair(cfg, rng);
    const auto plan = plan_for(pair, all_blocks(cfg.layers), 50 + rep);
    const auto got = generate_intervened(p, plan, obj);
    const auto ref = sample(p, pair.neutral, obj, plan.sampler);
    if (variant == Variant::cross_attn)
      EXPECT_EQ(got.image, ref.image);
    else
      EXPECT_LE(max_abs_diff(got.image, ref.image), 1e-9);
    EXPECT_NE(got.image, sample(p, pair.knowledge, obj, plan.sampler).image);
  }
}

TEST_P(InterventionInvariants, ParamsUntouched) {
  const auto [variant, kind] = GetParam();
  const auto cfg = small_config(variant);
  const auto p = init_params<double>(cfg, 5);
  const auto before = params_checksum(p);
  Rng rng(3);
  BlockSet b;
  b.blocks = {1};
  generate_intervened(p, plan_for(random_pair(cfg, rng), b, 9), Objective::of(kind));
  EXPECT_EQ(params_checksum(p), before);
}

INSTANTIATE_TEST_SUITE_P(All, InterventionInvariants,
                         ::testing::Combine(::testing::Values(Variant::cross_attn, Variant::mmdit),
                                            ::testing::Values(ObjectiveKind::flow_matching,
                                                              ObjectiveKind::epsilon_prediction)),
                         [](const auto& info) {
                           return std::string(variant_name(std::get<0>(info.param))) + "_" +
                                  objective_name(std::get<1>(info.param));
                         });

TEST(Intervention, SingleMiddleBlockChangesMmditOutput) {
  auto cfg = small_config(Variant::mmdit);
  const auto p = init_params<double>(cfg, 6);
  Rng rng(4);
  const auto pair = random_pair(cfg, rng);
  BlockSet mid;
  mid.blocks = {1};
  const auto plan = plan_for(pair, mid, 11);
  const auto obj = Objective::flow();
  const auto got = generate_intervened_mmdit(p, plan, obj);
  const auto know = sample(p, pair.knowledge, obj, plan.sampler);
  const auto neut = sample(p, pair.neutral, obj, plan.sampler);
  EXPECT_GT(max_abs_diff(got.image, know.image), 1e-6);
  EXPECT_GT(max_abs_diff(got.image, neut.image), 1e-6);
}

TEST(Intervention, MmditRecordingCoversEveryBlockAndStep) {
  auto cfg = small_config(Variant::mmdit);
  const auto p = init_params<double>(cfg, 7);
  Rng rng(5);
  const auto pair = random_pair(cfg, rng);
  BlockSet b;
  b.blocks = {2};
  TextRecording<double> recording;
  generate_intervened_mmdit(p, plan_for(pair, b, 12, 5), Objective::flow(), &recording);
  ASSERT_EQ(recording.size(), 5u);
  for (const auto& step : recording) {
    ASSERT_EQ(step.size(), cfg.layers);
    for (const auto& t : step) EXPECT_EQ(t.shape(), (Shape{cfg.text_len, cfg.d_model}));
  }
  // The first block's text input is the prompt embedding at every step.
  EXPECT_EQ(recording[0][0], recording[4][0]);
}

TEST(Intervention, CrossBlockSubsetDiffersFromBothEnds) {
  const auto cfg = small_config(Variant::cross_attn);
  const auto p = init_params<double>(cfg, 8);
  Rng rng(6);
  const auto pair = random_pair(cfg, rng);
  BlockSet b;
  b.blocks = {0};
  const auto plan = plan_for(pair, b, 13);
  const auto obj = Objective::flow();
  const auto got = generate_intervened_cross(p, plan, obj);
  EXPECT_NE(got.image, sample(p, pair.knowledge, obj, plan.sampler).image);
  EXPECT_NE(got.image, sample(p, pair.neutral, obj, plan.sampler).image);
  EXPECT_EQ(got.blocks, b.blocks);
}

TEST(Intervention, ContractViolations) {
  const auto cfg = small_config(Variant::cross_attn);
  const auto p = init_params<double>(cfg, 9);
  Rng rng(7);
  auto pair = random_pair(cfg, rng);
  BlockSet b;
  b.blocks = {0};
  auto bad = pair;
  bad.neutral.tokens[5] = (bad.neutral.tokens[5] + 1) % int(cfg.vocab);
  EXPECT_THROW(generate_intervened_cross(p, plan_for(bad, b, 1), Objective::flow()), ContractViolation);
  BlockSet out_of_range;
  out_of_range.blocks = {cfg.layers};
  EXPECT_THROW(generate_intervened_cross(p, plan_for(pair, out_of_range, 1), Objective::flow()), ContractViolation);
  BlockSet dup;
  dup.blocks = {1, 1};
  EXPECT_THROW(generate_intervened_cross(p, plan_for(pair, dup, 1), Objective::flow()), ContractViolation);
  EXPECT_THROW(generate_intervened_mmdit(p, plan_for(pair, b, 1), Objective::flow()), ContractViolation);
}

TEST(Intervention, SidecarListsSeedAndBlocks) {
  InterventionPlan plan;
  plan.blocks.blocks = {4, 1};
  plan.sampler.seed = 77;
  const auto m = Manifest::parse(intervention_sidecar(plan, 2));
  EXPECT_EQ(m.get("seed"), "77");
  EXPECT_EQ(m.get("K"), "2");
  EXPECT_EQ(m.get("blocks"), "4;1");
}

TEST(Spearman, KnownValues) {
  EXPECT_DOUBLE_EQ(spearman({1, 2, 3, 4}, {10, 20, 30, 40}), 1.0);
  EXPECT_DOUBLE_EQ(spearman({1, 2, 3, 4}, {4, 3, 2, 1}), -1.0);
  // d = (0, 0, 1, -1): 1 - 6*2 / (4*15) = 0.8
  EXPECT_NEAR(spearman({1, 2, 3, 4}, {1, 2, 4, 3}), 0.8, 1e-15);
  EXPECT_DOUBLE_EQ(spearman({1, 1, 1}, {1, 2, 3}), 0.0);
}
