// Small fixtures shared by the unit tests.
#pragma once

#include "ditprobe/model.hpp"

namespace ditprobe::testing {

/// A model small enough for exhaustive finite-difference checks.
inline ModelConfig small_config(Variant v) {
  ModelConfig c;
  c.variant = v;
  c.layers = 3;
  c.heads = 2;
  c.d_model = 16;
  c.text_len = kPromptLength;
  c.image_size = 8;
  c.patch = 4;
  c.vocab = 24;
  c.time_dim = 8;
  c.mlp_hidden = 24;
  return c;
}

/// A small model that consumes world-sized images and the world vocabulary.
inline ModelConfig small_world_config(Variant v, std::size_t vocab) {
  ModelConfig c = small_config(v);
  c.image_size = 32;
  c.patch = 8;
  c.vocab = vocab;
  return c;
}

inline Prompt random_prompt(const ModelConfig& c, Rng& rng) {
  Prompt p;
  for (std::size_t j = 0; j < c.text_len; ++j) p.tokens.push_back(int(rng.below(c.vocab)));
  p.concept_positions = {1};
  return p;
}

}  // namespace ditprobe::testing
