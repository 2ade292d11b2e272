#include <gtest/gtest.h>

#include <set>

#include "ditprobe/world.hpp"

using namespace ditprobe;

TEST(World, SameSeedSameConceptTable) {
  const World a = build_world(WorldConfig{}, 42), b = build_world(WorldConfig{}, 42);
  ASSERT_EQ(a.concepts.size(), b.concepts.size());
  EXPECT_EQ(a.vocab, b.vocab);
  for (std::size_t i = 0; i < a.concepts.size(); ++i) {
    EXPECT_EQ(a.concepts[i].name, b.concepts[i].name);
    EXPECT_EQ(a.concepts[i].color, b.concepts[i].color);
    EXPECT_EQ(a.concepts[i].shape, b.concepts[i].shape);
    EXPECT_EQ(a.concepts[i].token, b.concepts[i].token);
  }
  const World c = build_world(WorldConfig{}, 43);
  bool differs = false;
  for (std::size_t i = 0; i < a.concepts.size(); ++i) differs |= a.concepts[i].color != c.concepts[i].color;
  EXPECT_TRUE(differs);
}

TEST(World, OneAnchorPerCategory) {
  const World w = build_world(WorldConfig{}, 1);
  std::size_t anchors = 0;
  for (const auto& c : w.concepts) {
    if (c.is_anchor) {
      ++anchors;
      EXPECT_EQ(c.class_id, w.anchor_of(c.category));
    }
  }
  EXPECT_EQ(anchors, kCategoryCount);
  std::set<int> tokens;
  for (const auto& c : w.concepts) {
    if (c.is_subject) {
      EXPECT_EQ(c.token, -1);
      continue;
    }
    EXPECT_TRUE(tokens.insert(c.token).second);
    EXPECT_EQ(w.vocab.at(std::size_t(c.token)), c.name);
  }
}

TEST(World, SizesFollowConfigArithmetic) {
  for (std::size_t n : {2u, 4u, 6u}) {
    WorldConfig cfg;
    cfg.n_concepts = n;
    const World w = build_world(cfg, 3);
    EXPECT_EQ(w.regular_concepts().size(), kCategoryCount * n);
    EXPECT_EQ(w.class_count(), kCategoryCount * (1 + n + cfg.n_subjects));
    EXPECT_EQ(w.vocab_size(), 4 + kBackgrounds + kPositions + kSizes + kCategoryCount * (1 + n));
    std::size_t prompts = 0;
    for (auto id : w.regular_concepts()) {
      const auto spec = make_prompt_pairs(w, id, 20, 30, 9);
      prompts += spec.train_prompts.size() + spec.eval_prompts.size();
    }
    EXPECT_EQ(prompts, probe_dataset_size(cfg, 20, 30));
  }
}

TEST(World, ConfigContracts) {
  WorldConfig one;
  one.n_concepts = 1;
  EXPECT_THROW(build_world(one, 1), ContractViolation);
  WorldConfig tight;
  tight.max_vocab = 30;
  EXPECT_THROW(build_world(tight, 1), ContractViolation);
  WorldConfig odd;
  odd.image_size = 30;
  EXPECT_THROW(build_world(odd, 1), ContractViolation);
}

TEST(Render, DeterministicAndInRange) {
  const World w = build_world(WorldConfig{}, 1);
  for (std::size_t cls = 0; cls < w.class_count(); ++cls) {
    const auto a = render(w, cls, cls % kContexts, 77);
    const auto b = render(w, cls, cls % kContexts, 77);
    EXPECT_TRUE(a == b);
    EXPECT_EQ(a.shape(), (Shape{3, 32, 32}));
    for (double v : a.storage()) {
      EXPECT_GE(v, -1.0);
      EXPECT_LE(v, 1.0);
    }
  }
  EXPECT_FALSE(render(w, 1, 0, 1) == render(w, 1, 0, 2));
}

TEST(Render, ColorChangeStaysInsideGlyphMask) {
  const World w = build_world(WorldConfig{}, 1);
  const std::size_t id = w.concept_id(Category::animal, 0);
  World recolored = w;
  recolored.concepts[id].color = {0.2, 0.9, -0.4};
  for (std::size_t ctx : {0u, 13u, 49u}) {
    const auto cov = glyph_coverage(w, w.concepts[id], ctx, 5);
    const auto a = render(w, id, ctx, 5), b = render(recolored, id, ctx, 5);
    const std::size_t n = w.config.image_size;
    std::size_t inside_diff = 0;
    for (std::size_t ch = 0; ch < 3; ++ch)
      for (std::size_t p = 0; p < n * n; ++p) {
        const double da = a[ch * n * n + p], db = b[ch * n * n + p];
        if (cov[p] == 0.0)
          EXPECT_EQ(da, db);
        else
          inside_diff += da != db;
      }
    EXPECT_GT(inside_diff, 0u);
  }
}

TEST(Render, AnchorIsCategoryGeneric) {
  const World w = build_world(WorldConfig{}, 1);
  for (std::size_t g = 0; g < kCategoryCount; ++g) {
    const auto& a = w.concepts[w.anchor_of(Category(g))];
    EXPECT_EQ(a.color, kAnchorColor);
    EXPECT_EQ(a.texture, Texture::solid);
  }
}

TEST(PromptPairs, AlignedEverywhereAndDisjoint) {
  const World w = build_world(WorldConfig{}, 1);
  for (auto id : w.regular_concepts()) {
    const auto spec = make_prompt_pairs(w, id, 20, 30, 11);
    ASSERT_EQ(spec.train_prompts.size(), 20u);
    ASSERT_EQ(spec.eval_prompts.size(), 30u);
    std::set<std::size_t> ctx(spec.train_contexts.begin(), spec.train_contexts.end());
    for (auto c : spec.eval_contexts) EXPECT_TRUE(ctx.insert(c).second);
    auto check = [&](const Prompt& k, const Prompt& n) {
      ASSERT_EQ(k.tokens.size(), kPromptLength);
      ASSERT_EQ(n.tokens.size(), kPromptLength);
      EXPECT_TRUE(aligned(k, n));
      for (auto j : k.concept_positions) {
        EXPECT_EQ(k.tokens[j], w.concepts[id].token);
        EXPECT_EQ(n.tokens[j], w.concepts[spec.anchor_id].token);
      }
      EXPECT_EQ(substitute(k, w.concepts[spec.anchor_id].token).tokens, n.tokens);
      EXPECT_EQ(substitute(n, w.concepts[id].token).tokens, k.tokens);
    };
    for (std::size_t i = 0; i < 20; ++i) check(spec.train_prompts[i], spec.train_neutral[i]);
    for (std::size_t i = 0; i < 30; ++i) check(spec.eval_prompts[i], spec.eval_neutral[i]);
  }
}

TEST(PromptPairs, Contracts) {
  const World w = build_world(WorldConfig{}, 1);
  const auto id = w.regular_concepts().front();
  EXPECT_THROW(make_prompt_pairs(w, id, 30, 21, 1), ContractViolation);
  EXPECT_NO_THROW(make_prompt_pairs(w, id, 30, 20, 1));
  EXPECT_THROW(make_prompt_pairs(w, w.anchor_of(Category::style), 2, 2, 1), ContractViolation);
  EXPECT_THROW(make_prompt_pairs(w, w.subject_id(Category::style, 0), 2, 2, 1), ContractViolation);
  const auto a = make_prompt_pairs(w, id, 5, 5, 3), b = make_prompt_pairs(w, id, 5, 5, 3);
  EXPECT_EQ(a.train_contexts, b.train_contexts);
  EXPECT_EQ(a.eval_contexts, b.eval_contexts);
}

TEST(Context, IdRoundTrip) {
  std::set<std::tuple<std::size_t, std::size_t, std::size_t>> seen;
  for (std::size_t id = 0; id < kContexts; ++id) {
    const auto c = World::context(id);
    EXPECT_TRUE(seen.insert({c.background, c.position, c.size}).second);
  }
  EXPECT_THROW(World::context(kContexts), ContractViolation);
}
