// Procedural "concepts in contexts" world: a vocabulary, a concept table and
// a renderer for small RGB images, plus aligned knowledge/neutral prompt pairs.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ditprobe/numerics.hpp"

namespace ditprobe {

enum class Category : std::uint8_t { character = 0, style = 1, place = 2, animal = 3 };
inline constexpr std::size_t kCategoryCount = 4;

inline const char* category_name(Category c) {
  switch (c) {
    case Category::character: return "character";
    case Category::style: return "style";
    case Category::place: return "place";
    case Category::animal: return "animal";
  }
  return "?";
}

enum class Shape2D : std::uint8_t {
  disc, square, triangle, diamond, ellipse, vbar, hbar, dome, hexagon, ring, cross, saltire
};

enum class Texture : std::uint8_t { solid, hstripes, vstripes, checker, dots };

using Rgb = std::array<double, 3>;

struct WorldConfig {
  std::size_t image_size = 32;
  std::size_t channels = 3;
  std::size_t n_concepts = 4;  // per category
  std::size_t n_subjects = 1;  // reserve instances per category, never in base training data
  std::size_t max_vocab = 256;
  double jitter = 1.0;  // max glyph-centre offset in pixels, drawn per render seed
};

/// One renderable identity: a regular concept, a category anchor, or a
/// reserve subject. `class_id` indexes the classifier's concept head.
struct ConceptInfo {
  std::size_t class_id = 0;
  Category category = Category::character;
  std::size_t index_in_category = 0;
  int token = -1;  // -1 for subjects (they get identifier tokens later)
  std::string name;
  Shape2D shape = Shape2D::disc;
  Rgb color{};
  Texture texture = Texture::solid;
  bool is_anchor = false;
  bool is_subject = false;
};

struct Context {
  std::size_t background = 0;
  std::size_t position = 0;
  std::size_t size = 0;
};

struct Prompt {
  std::vector<int> tokens;
  std::vector<std::size_t> concept_positions;
};

/// Knowledge prompts with their neutral twins, split into train and eval.
struct ConceptSpec {
  std::size_t concept_id = 0;  // class id of the knowledge
  std::size_t anchor_id = 0;   // class id of the category anchor
  std::vector<std::size_t> train_contexts, eval_contexts;
  std::vector<Prompt> train_prompts, train_neutral;
  std::vector<Prompt> eval_prompts, eval_neutral;
};

namespace tokens {
inline constexpr int pad = 0;
inline constexpr int a = 1;
inline constexpr int on = 2;
inline constexpr int at = 3;
inline constexpr int first_context = 4;
}  // namespace tokens

inline constexpr std::size_t kPromptLength = 8;
inline constexpr std::size_t kBackgrounds = 5;
inline constexpr std::size_t kPositions = 5;
inline constexpr std::size_t kSizes = 2;
inline constexpr std::size_t kContexts = kBackgrounds * kPositions * kSizes;

class World {
 public:
  WorldConfig config;
  std::uint64_t seed = 0;
  std::vector<std::string> vocab;
  std::vector<ConceptInfo> concepts;  // indexed by class id, grouped by category
  std::array<Rgb, kBackgrounds> backgrounds{};

  std::size_t vocab_size() const { return vocab.size(); }
  std::size_t class_count() const { return concepts.size(); }
  std::size_t classes_per_category() const { return 1 + config.n_concepts + config.n_subjects; }

  std::size_t category_begin(Category c) const { return std::size_t(c) * classes_per_category(); }
  std::size_t anchor_of(Category c) const { return category_begin(c); }
  std::size_t concept_id(Category c, std::size_t k) const { return category_begin(c) + 1 + k; }
  std::size_t subject_id(Category c, std::size_t s) const {
    return category_begin(c) + 1 + config.n_concepts + s;
  }

  /// Class ids of the regular (non-anchor, non-subject) concepts.
  std::vector<std::size_t> regular_concepts() const {
    std::vector<std::size_t> out;
    for (const auto& c : concepts)
      if (!c.is_anchor && !c.is_subject) out.push_back(c.class_id);
    return out;
  }

  int background_token(std::size_t b) const { return tokens::first_context + int(b); }
  int position_token(std::size_t p) const { return tokens::first_context + int(kBackgrounds + p); }
  int size_token(std::size_t s) const { return tokens::first_context + int(kBackgrounds + kPositions + s); }

  static Context context(std::size_t id) {
    require(id < kContexts, "context id out of range");
    return {id / (kPositions * kSizes), (id / kSizes) % kPositions, id % kSizes};
  }

  /// "a <concept> on <bg> at <pos> <size> <pad>"; the concept sits at position 1.
  Prompt prompt(std::size_t class_id, std::size_t context_id) const {
    const auto& info = concepts.at(class_id);
    require(info.token >= 0, "concept " + info.name + " has no vocabulary token");
    return prompt_for_token(info.token, context_id);
  }

  Prompt prompt_for_token(int token, std::size_t context_id) const {
    const Context c = context(context_id);
    Prompt p;
    p.tokens = {tokens::a, token, tokens::on, background_token(c.background),
                tokens::at, position_token(c.position), size_token(c.size), tokens::pad};
    p.concept_positions = {1};
    return p;
  }

  /// Personalization prompt "a <identifier> <class> on <bg> at <pos> <size>".
  Prompt identifier_prompt(int identifier, int class_token, std::size_t context_id) const {
    const Context c = context(context_id);
    Prompt p;
    p.tokens = {tokens::a, identifier, class_token, tokens::on, background_token(c.background),
                tokens::at, position_token(c.position), size_token(c.size)};
    p.concept_positions = {1};
    return p;
  }
};

inline const std::array<Rgb, 8>& glyph_palette() {
  static const std::array<Rgb, 8> p{{{1.0, -0.6, -0.6},
                                     {-0.6, 1.0, -0.6},
                                     {-0.5, -0.3, 1.0},
                                     {1.0, 1.0, -0.6},
                                     {-0.6, 1.0, 1.0},
                                     {1.0, -0.6, 1.0},
                                     {1.0, 1.0, 1.0},
                                     {1.0, 0.2, -0.8}}};
  return p;
}

// Colors outside the palette, used only by reserve subjects.
inline const std::array<Rgb, 3>& subject_palette() {
  static const std::array<Rgb, 3> p{{{1.0, 0.25, 0.45}, {0.35, 1.0, -0.2}, {0.1, 0.55, 1.0}}};
  return p;
}

inline constexpr Rgb kAnchorColor{0.3, 0.3, 0.3};

inline World build_world(const WorldConfig& config, std::uint64_t seed) {
  require(config.n_concepts >= 2, "world needs at least two concepts per category");
  require(config.n_concepts <= 8, "vocab overflow: at most 8 concepts per category are distinguishable");
  require(config.n_subjects <= subject_palette().size(), "at most 3 reserve subjects per category");
  require(config.channels == 3, "world renders RGB images");
  require(config.image_size >= 16 && config.image_size % 4 == 0, "image_size must be >= 16 and divisible by 4");

  World w;
  w.config = config;
  w.seed = seed;
  w.vocab = {"<pad>", "a", "on", "at"};
  static const char* bg_names[] = {"black", "navy", "forest", "maroon", "slate"};
  static const char* pos_names[] = {"center", "top-left", "top-right", "bottom-left", "bottom-right"};
  static const char* size_names[] = {"small", "large"};
  for (auto n : bg_names) w.vocab.emplace_back(n);
  for (auto n : pos_names) w.vocab.emplace_back(n);
  for (auto n : size_names) w.vocab.emplace_back(n);
  w.backgrounds = {{{-0.9, -0.9, -0.9}, {-0.9, -0.9, -0.3}, {-0.9, -0.4, -0.9}, {-0.4, -0.9, -0.9},
                    {-0.55, -0.55, -0.55}}};

  // The seed permutes which palette color each concept slot receives.
  std::vector<std::size_t> perm(glyph_palette().size());
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng = Rng(seed).fork(0x776f726c64);
  rng.shuffle(perm);

  struct Family {
    std::array<Shape2D, 4> shapes;
    Shape2D anchor;
  };
  static const std::array<Family, kCategoryCount> families{{
      {{Shape2D::disc, Shape2D::square, Shape2D::triangle, Shape2D::diamond}, Shape2D::ellipse},
      {{Shape2D::square, Shape2D::square, Shape2D::square, Shape2D::square}, Shape2D::square},
      {{Shape2D::vbar, Shape2D::hbar, Shape2D::dome, Shape2D::hexagon}, Shape2D::triangle},
      {{Shape2D::ring, Shape2D::cross, Shape2D::saltire, Shape2D::ellipse}, Shape2D::disc},
  }};
  static const std::array<Texture, 4> style_textures{Texture::hstripes, Texture::vstripes, Texture::checker,
                                                     Texture::dots};

  for (std::size_t g = 0; g < kCategoryCount; ++g) {
    const auto cat = Category(g);
    const auto& fam = families[g];
    ConceptInfo anchor;
    anchor.class_id = w.concepts.size();
    anchor.category = cat;
    anchor.name = std::string("a-") + category_name(cat);
    anchor.token = int(w.vocab.size());
    anchor.shape = fam.anchor;
    anchor.color = kAnchorColor;
    anchor.is_anchor = true;
    w.vocab.push_back(anchor.name);
    w.concepts.push_back(anchor);
    for (std::size_t k = 0; k < config.n_concepts; ++k) {
      ConceptInfo c;
      c.class_id = w.concepts.size();
      c.category = cat;
      c.index_in_category = k;
      c.name = std::string(category_name(cat)) + "-" + std::to_string(k);
      c.token = int(w.vocab.size());
      c.shape = fam.shapes[k % 4];
      c.color = glyph_palette()[perm[(k + 2 * g) % 8]];
      c.texture = cat == Category::style ? style_textures[k % 4] : Texture::solid;
      w.vocab.push_back(c.name);
      w.concepts.push_back(c);
    }
    for (std::size_t s = 0; s < config.n_subjects; ++s) {
      ConceptInfo c;
      c.class_id = w.concepts.size();
      c.category = cat;
      c.index_in_category = s;
      c.name = std::string(category_name(cat)) + "-subject-" + std::to_string(s);
      c.shape = fam.shapes[(s + 1) % 4];
      c.color = subject_palette()[s];
      c.texture = cat == Category::style ? style_textures[(s + 1) % 4] : Texture::solid;
      c.is_subject = true;
      w.concepts.push_back(c);
    }
  }
  // Room for one identifier token per reserve subject.
  require(w.vocab.size() + kCategoryCount * config.n_subjects <= config.max_vocab,
          "vocab overflow: " + std::to_string(w.vocab.size()) + " tokens exceed max_vocab");
  return w;
}

/// Number of prompts in the knowledge-probe dataset: every regular concept
/// gets n_train + n_eval prompts.
inline std::size_t probe_dataset_size(const WorldConfig& config, std::size_t n_train, std::size_t n_eval) {
  return kCategoryCount * config.n_concepts * (n_train + n_eval);
}

// ---------------------------------------------------------------- rendering

/// Shape membership in glyph-local coordinates (unit radius, y pointing up).
inline bool inside_shape(Shape2D s, double x, double y) {
  const double ax = std::abs(x), ay = std::abs(y);
  switch (s) {
    case Shape2D::disc: return x * x + y * y <= 1.0;
    case Shape2D::square: return ax <= 0.85 && ay <= 0.85;
    case Shape2D::triangle: return y >= -0.8 && y <= 0.95 && ax <= (0.95 - y) * 0.55;
    case Shape2D::diamond: return ax + ay <= 1.0;
    case Shape2D::ellipse: return x * x + (y / 0.6) * (y / 0.6) <= 1.0;
    case Shape2D::vbar: return ax <= 0.38 && ay <= 1.0;
    case Shape2D::hbar: return ax <= 1.0 && ay <= 0.38;
    case Shape2D::dome: return x * x + (y + 0.4) * (y + 0.4) <= 1.0 && y >= -0.4;
    case Shape2D::hexagon: return ay <= 0.87 && ax * 0.87 + ay * 0.5 <= 0.87;
    case Shape2D::ring: {
      const double r2 = x * x + y * y;
      return r2 <= 1.0 && r2 >= 0.3;
    }
    case Shape2D::cross: return (ax <= 0.3 && ay <= 1.0) || (ay <= 0.3 && ax <= 1.0);
    case Shape2D::saltire: return ax <= 0.9 && ay <= 0.9 && std::abs(ax - ay) <= 0.3;
  }
  return false;
}

/// Brightness multiplier of a texture at glyph-local pixel offsets.
inline double texture_gain(Texture t, double px, double py) {
  const auto band = [](double v) { return (long(std::floor(v / 3.0)) & 1) == 0; };
  switch (t) {
    case Texture::solid: return 1.0;
    case Texture::hstripes: return band(py) ? 1.0 : 0.35;
    case Texture::vstripes: return band(px) ? 1.0 : 0.35;
    case Texture::checker: return band(px) == band(py) ? 1.0 : 0.35;
    case Texture::dots: {
      const double fx = px - 4.0 * std::floor(px / 4.0) - 2.0;
      const double fy = py - 4.0 * std::floor(py / 4.0) - 2.0;
      return fx * fx + fy * fy <= 1.6 ? 1.0 : 0.35;
    }
  }
  return 1.0;
}

/// Glyph centre (pixels) and radius for a context.
inline std::array<double, 3> glyph_geometry(const World& w, const Context& c) {
  const double s = double(w.config.image_size);
  static const std::array<std::array<double, 2>, kPositions> centres{
      {{0.5, 0.5}, {0.31, 0.31}, {0.69, 0.31}, {0.31, 0.69}, {0.69, 0.69}}};
  const double radius = c.size == 0 ? 0.16 * s : 0.26 * s;
  return {centres[c.position][0] * s, centres[c.position][1] * s, radius};
}

/// Coverage of the glyph over each pixel (3x3 supersampling); the mask used
/// by the render contract tests.
inline std::vector<double> glyph_coverage(const World& w, const ConceptInfo& info, std::size_t context_id,
                                          std::uint64_t seed) {
  const std::size_t n = w.config.image_size;
  const auto geo = glyph_geometry(w, World::context(context_id));
  Rng rng = Rng(seed).fork(0x6a6974746572);
  const double cx = geo[0] + rng.uniform(-w.config.jitter, w.config.jitter);
  const double cy = geo[1] + rng.uniform(-w.config.jitter, w.config.jitter);
  const double r = geo[2];
  std::vector<double> cov(n * n, 0.0);
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      int hits = 0;
      for (int sy = 0; sy < 3; ++sy)
        for (int sx = 0; sx < 3; ++sx) {
          const double px = double(x) + (sx + 0.5) / 3.0;
          const double py = double(y) + (sy + 0.5) / 3.0;
          hits += inside_shape(info.shape, (px - cx) / r, (cy - py) / r) ? 1 : 0;
        }
      cov[y * n + x] = hits / 9.0;
    }
  }
  return cov;
}

/// Renders `class_id` in `context_id`; values in [-1, 1], layout channels x size x size.
template <class Real = double>
BasicTensor<Real> render(const World& w, std::size_t class_id, std::size_t context_id, std::uint64_t seed) {
  const auto& info = w.concepts.at(class_id);
  const std::size_t n = w.config.image_size;
  const Context ctx = World::context(context_id);
  const auto cov = glyph_coverage(w, info, context_id, seed);
  const auto geo = glyph_geometry(w, ctx);
  const Rgb& bg = w.backgrounds[ctx.background];
  BasicTensor<Real> img({3, n, n});
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      const double a = cov[y * n + x];
      const double gain = texture_gain(info.texture, double(x) - geo[0], double(y) - geo[1]);
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double glyph = -1.0 + (info.color[ch] + 1.0) * gain;
        img[(ch * n + y) * n + x] = Real(std::clamp(bg[ch] * (1.0 - a) + glyph * a, -1.0, 1.0));
      }
    }
  }
  return img;
}

/// Knowledge prompts and neutral twins over disjoint train/eval context sets.
inline ConceptSpec make_prompt_pairs(const World& w, std::size_t class_id, std::size_t n_train,
                                     std::size_t n_eval, std::uint64_t seed) {
  const auto& info = w.concepts.at(class_id);
  require(!info.is_anchor && !info.is_subject, "prompt pairs are built for regular concepts");
  require(n_train + n_eval <= kContexts, "n_train + n_eval = " + std::to_string(n_train + n_eval) +
                                              " exceeds the context pool of " + std::to_string(kContexts));
  std::vector<std::size_t> ctx(kContexts);
  std::iota(ctx.begin(), ctx.end(), 0);
  Rng rng = Rng(seed).fork(0x7061697273 + class_id);
  rng.shuffle(ctx);
  ConceptSpec spec;
  spec.concept_id = class_id;
  spec.anchor_id = w.anchor_of(info.category);
  const int anchor_token = w.concepts[spec.anchor_id].token;
  spec.train_contexts.assign(ctx.begin(), ctx.begin() + std::ptrdiff_t(n_train));
  spec.eval_contexts.assign(ctx.begin() + std::ptrdiff_t(n_train), ctx.begin() + std::ptrdiff_t(n_train + n_eval));
  auto fill = [&](const std::vector<std::size_t>& ids, std::vector<Prompt>& know, std::vector<Prompt>& neutral) {
    for (auto c : ids) {
      know.push_back(w.prompt(class_id, c));
      neutral.push_back(w.prompt_for_token(anchor_token, c));
    }
  };
  fill(spec.train_contexts, spec.train_prompts, spec.train_neutral);
  fill(spec.eval_contexts, spec.eval_prompts, spec.eval_neutral);
  return spec;
}

/// Replaces the tokens at the concept positions; used to derive neutral
/// twins and unlearning targets.
inline Prompt substitute(const Prompt& p, int token) {
  Prompt out = p;
  for (auto j : p.concept_positions) out.tokens.at(j) = token;
  return out;
}

inline bool aligned(const Prompt& a, const Prompt& b) {
  if (a.tokens.size() != b.tokens.size() || a.concept_positions != b.concept_positions) return false;
  for (std::size_t j = 0; j < a.tokens.size(); ++j) {
    const bool is_concept =
        std::find(a.concept_positions.begin(), a.concept_positions.end(), j) != a.concept_positions.end();
    if (!is_concept && a.tokens[j] != b.tokens[j]) return false;
  }
  return true;
}

}  // namespace ditprobe
