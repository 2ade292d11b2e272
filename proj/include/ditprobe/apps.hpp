// Localized fine-tuning applications: personalization of a novel subject
// behind a fresh identifier token, and unlearning of a concept toward its
// category anchor. Both restrict updates to a block set.
#pragma once

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

#include "ditprobe/engine.hpp"
#include "ditprobe/eval.hpp"
#include "ditprobe/parallel.hpp"
#include "ditprobe/pipeline.hpp"
#include "ditprobe/probe.hpp"
#include "ditprobe/world.hpp"

namespace ditprobe {

inline std::size_t personalization_k(std::size_t layers) { return k_from_ratio(layers, 9, 28); }
inline std::size_t unlearning_k(std::size_t layers) { return k_from_ratio(layers, 5, 28); }

/// Training budget of a fine-tune. With `target > 0` the monitor metric is
/// checked every `check_every` steps and training stops once it is reached.
struct FinetuneHyper {
  TrainHyper train;
  std::size_t check_every = 0;
  double target = 0;
};

/// Generation settings shared by the application reports.
struct AppEval {
  SamplerConfig sampler{25, 0, false, false};
  std::size_t seeds = 2;
  std::uint64_t seed_base = 9000;
  std::size_t sibling_contexts = 5;
  std::size_t unrelated = 40;       // generations per Fréchet set
  std::size_t monitor_prompts = 10;
};

namespace detail {

template <class Real>
std::vector<Tensor> generate_images(const ModelParams<Real>& params, const Objective& obj,
                                    const std::vector<Prompt>& prompts, const std::vector<std::uint64_t>& seeds,
                                    const SamplerConfig& base) {
  std::vector<Tensor> out(prompts.size() * seeds.size());
  parallel_for(out.size(), [&](std::size_t idx) {
    SamplerConfig sc = base;
    sc.seed = seeds[idx % seeds.size()];
    sc.keep_latents = false;
    sc.keep_traces = false;
    out[idx] = sample(params, prompts[idx / seeds.size()], obj, sc).image.template cast<double>();
  });
  return out;
}

/// Mean probability of `class_id` within its category.
inline double mean_class_probability(const ClassifierParams& clf, const World& w, const std::vector<Tensor>& images,
                                     std::size_t class_id) {
  double s = 0;
  for (const auto& img : images) s += category_probability(w, classify(clf, img), class_id);
  return images.empty() ? 0.0 : s / double(images.size());
}

/// Prompts of the regular concepts of other categories, cycled over contexts.
inline std::vector<Prompt> unrelated_prompts(const World& w, Category category, std::size_t n) {
  std::vector<std::size_t> ids;
  for (auto c : w.regular_concepts())
    if (w.concepts[c].category != category) ids.push_back(c);
  std::vector<Prompt> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(w.prompt(ids[i % ids.size()], (i * 17 + 3) % kContexts));
  return out;
}

/// Same-category regular concepts other than `exclude`.
inline std::vector<std::size_t> siblings(const World& w, Category category, std::size_t exclude) {
  std::vector<std::size_t> out;
  for (auto c : w.regular_concepts())
    if (w.concepts[c].category == category && c != exclude) out.push_back(c);
  return out;
}

/// Mean within-category score of each sibling on its own prompts.
template <class Real>
double surrounding_identity(const ModelParams<Real>& params, const Objective& obj, const Judge& judge,
                            const std::vector<std::size_t>& sibs, const AppEval& ev) {
  const World& w = *judge.world;
  std::vector<Prompt> prompts;
  std::vector<std::size_t> owner;
  for (auto s : sibs)
    for (std::size_t c = 0; c < ev.sibling_contexts; ++c) {
      prompts.push_back(w.prompt(s, (s * 11 + c * 7) % kContexts));
      owner.push_back(s);
    }
  const auto images = generate_images(params, obj, prompts, {ev.seed_base}, ev.sampler);
  double total = 0;
  for (std::size_t i = 0; i < images.size(); ++i)
    total += category_probability(w, classify(*judge.classifier, images[i]), owner[i]);
  return images.empty() ? 0.0 : total / double(images.size());
}

inline std::vector<std::uint64_t> eval_seeds(const AppEval& ev) {
  std::vector<std::uint64_t> s(ev.seeds);
  std::iota(s.begin(), s.end(), ev.seed_base);
  return s;
}

inline GradientMask app_mask(std::size_t layers, const BlockSet& blocks, bool full) {
  GradientMask m = full ? GradientMask::all(layers) : GradientMask::only(layers, blocks.blocks);
  return m;
}

}  // namespace detail

// ---------------------------------------------------------------- personalization

struct PersonalizationTask {
  std::size_t subject_id = 0;
  Category category = Category::character;
  int identifier = -1;
  int class_token = -1;
  std::vector<std::size_t> train_contexts, heldout_contexts;
  std::vector<Example<double>> examples;  // subject renders with identifier prompts
  BlockSet blocks;
  FinetuneHyper hyper;

  Prompt prompt(const World& w, std::size_t context) const {
    return w.identifier_prompt(identifier, class_token, context);
  }
};

/// The subject rendered in `n_images` contexts, labelled "a [V] <class>". The
/// identifier is the model's next free token id.
inline PersonalizationTask build_personalization_task(const World& w, const ModelConfig& model,
                                                      std::size_t subject_id, std::uint64_t seed,
                                                      std::size_t n_images = 4, std::size_t n_heldout = 10) {
  const auto& info = w.concepts.at(subject_id);
  require(info.is_subject, "personalization needs a subject instance unseen by the base model");
  require(n_images >= 1 && n_images + n_heldout <= kContexts, "too many personalization contexts");
  PersonalizationTask t;
  t.subject_id = subject_id;
  t.category = info.category;
  t.identifier = int(model.vocab);
  if (std::size_t(t.identifier) < w.vocab_size())
    throw ContractViolation("identifier id " + std::to_string(t.identifier) + " collides with a world token");
  t.class_token = w.concepts[w.anchor_of(info.category)].token;
  std::vector<std::size_t> ctx(kContexts);
  std::iota(ctx.begin(), ctx.end(), 0);
  Rng rng = Rng(seed).fork(0x7065727325);
  rng.shuffle(ctx);
  t.train_contexts.assign(ctx.begin(), ctx.begin() + std::ptrdiff_t(n_images));
  t.heldout_contexts.assign(ctx.begin() + std::ptrdiff_t(n_images),
                            ctx.begin() + std::ptrdiff_t(n_images + n_heldout));
  for (std::size_t i = 0; i < n_images; ++i)
    t.examples.push_back({render<double>(w, subject_id, t.train_contexts[i], splitmix64(seed + i)),
                          t.prompt(w, t.train_contexts[i])});
  return t;
}

/// Appends one trainable embedding row (standard-normal, like the rest of the table).
template <class Real>
ModelParams<Real> with_identifier_row(const ModelParams<Real>& p, std::uint64_t seed) {
  ModelParams<Real> out = p;
  const std::size_t V = p.config.vocab, d = p.config.d_model;
  out.config.vocab = V + 1;
  BasicTensor<Real> table({V + 1, d});
  std::copy(p.shared.token_embed.storage().begin(), p.shared.token_embed.storage().end(), table.storage().begin());
  Rng rng = Rng(seed).fork(0x6964);
  for (std::size_t c = 0; c < d; ++c) table(V, c) = Real(rng.normal());
  out.shared.token_embed = std::move(table);
  return out;
}

/// Blocks carrying the class noun: probe the anchor prompts of the category.
template <class Real>
LayerScores class_scores(const ModelParams<Real>& params, const Objective& obj, const World& w, Category category,
                         const std::vector<std::size_t>& contexts, const LocalizeConfig& cfg) {
  std::vector<Prompt> prompts;
  for (auto c : contexts) prompts.push_back(w.prompt(w.anchor_of(category), c));
  return probe_scores(params, obj, prompts, detail::seed_list(cfg.seed_base, cfg.n_seeds), cfg);
}

struct PersonalizationReport {
  bool full = false;
  std::size_t steps_run = 0;
  double fidelity_before = 0, fidelity_after = 0;
  double alignment_after = 0;
  double surrounding_before = 0, surrounding_after = 0;
  FrechetResult frechet;  // unrelated-prompt generations, before vs after
  std::size_t optimizer_state_elements = 0;
  double mean_step_ms = 0;
  TrainLog log;

  double surrounding_drop_points() const { return 100.0 * (surrounding_before - surrounding_after); }

  CsvTable table() const {
    CsvTable t({"mode", "steps", "fidelity_before", "fidelity_after", "alignment_after", "surrounding_before",
                "surrounding_after", "frechet", "optimizer_state_elements"});
    t.row() << (full ? "full" : "localized") << steps_run << fidelity_before << fidelity_after << alignment_after
            << surrounding_before << surrounding_after << frechet.distance << optimizer_state_elements;
    return t;
  }
};

template <class Real>
struct PersonalizationResult {
  ModelParams<Real> params;
  PersonalizationReport report;
};

/// Fine-tunes the task's blocks (or every block when `full`) plus the
/// identifier row on the subject renders. `params` must not yet contain the
/// identifier; it is appended here.
template <class Real>
PersonalizationResult<Real> personalize(const ModelParams<Real>& base, const PersonalizationTask& task,
                                        const Objective& obj, const Judge& judge, const AppEval& ev = {},
                                        bool full = false) {
  require(std::size_t(task.identifier) == base.config.vocab, "task identifier is not the model's next token id");
  require(full || !task.blocks.blocks.empty(), "localized personalization needs a block set");
  const World& w = *judge.world;
  const auto& clf = *judge.classifier;
  const ModelParams<Real> start = with_identifier_row(base, splitmix64(task.subject_id));
  const std::size_t L = base.config.layers;
  GradientMask mask = detail::app_mask(L, task.blocks, full);
  mask.token_rows = {task.identifier};

  std::vector<Prompt> heldout;
  for (auto c : task.heldout_contexts) heldout.push_back(task.prompt(w, c));
  const auto seeds = detail::eval_seeds(ev);
  const auto sibs = detail::siblings(w, task.category, task.subject_id);
  const auto unrelated = detail::unrelated_prompts(w, task.category, ev.unrelated);

  PersonalizationReport rep;
  rep.full = full;
  auto fidelity = [&](const ModelParams<Real>& p, const std::vector<Prompt>& prompts,
                      const std::vector<std::uint64_t>& s, double* alignment) {
    const auto images = detail::generate_images(p, obj, prompts, s, ev.sampler);
    if (alignment) {
      double a = 0;
      for (std::size_t i = 0; i < images.size(); ++i)
        a += context_accuracy(classify(clf, images[i]), task.heldout_contexts[i / s.size()]);
      *alignment = a / double(images.size());
    }
    return detail::mean_class_probability(clf, w, images, task.subject_id);
  };
  rep.fidelity_before = fidelity(start, heldout, seeds, nullptr);
  rep.surrounding_before = detail::surrounding_identity(start, obj, judge, sibs, ev);
  const auto unrelated_before = detail::generate_images(start, obj, unrelated, {ev.seed_base}, ev.sampler);

  std::vector<Example<Real>> data;
  for (const auto& ex : task.examples) data.push_back({ex.image.template cast<Real>(), ex.prompt});
  const std::vector<Prompt> monitor(heldout.begin(), heldout.begin() + std::ptrdiff_t(std::min(ev.monitor_prompts, heldout.size())));
  std::function<bool(std::size_t, const ModelParams<Real>&)> stop;
  if (task.hyper.target > 0 && task.hyper.check_every > 0)
    stop = [&](std::size_t step, const ModelParams<Real>& p) {
      return step % task.hyper.check_every == 0 && fidelity(p, monitor, {ev.seed_base + 777}, nullptr) >= task.hyper.target;
    };
  ModelParams<Real> tuned = start;
  if (task.hyper.train.steps > 0) {
    auto res = train(start, data, obj, mask, task.hyper.train, splitmix64(task.subject_id + 1), {}, stop);
    tuned = std::move(res.params);
    rep.log = std::move(res.log);
  } else {
    rep.log.optimizer_state_elements = MaskedAdamW<Real>(start, mask).state_elements();
  }
  rep.steps_run = rep.log.rows.size();
  rep.optimizer_state_elements = rep.log.optimizer_state_elements;
  if (!rep.log.rows.empty()) {
    double ms = 0;
    for (const auto& r : rep.log.rows) ms += r.step_time_ms;
    rep.mean_step_ms = ms / double(rep.log.rows.size());
  }

  rep.fidelity_after = fidelity(tuned, heldout, seeds, &rep.alignment_after);
  rep.surrounding_after = detail::surrounding_identity(tuned, obj, judge, sibs, ev);
  const auto unrelated_after = detail::generate_images(tuned, obj, unrelated, {ev.seed_base}, ev.sampler);
  rep.frechet = frechet_feature_distance(clf, unrelated_before, unrelated_after);
  return {std::move(tuned), std::move(rep)};
}

// ---------------------------------------------------------------- unlearning

struct Triplet {
  Tensor image;      // generated from `anchor_prompt`
  Prompt anchor_prompt;
  Prompt target_prompt;  // anchor replaced by the target concept
  std::uint64_t seed = 0;
  std::size_t context = 0;
};

/// `n` anchor generations with distinct seeds, each paired with the target
/// prompt it should now answer.
template <class Real>
std::vector<Triplet> build_ablation_triplets(const World& w, const ModelParams<Real>& params, const Objective& obj,
                                             std::size_t target, std::size_t n, std::uint64_t seed,
                                             const SamplerConfig& sampler) {
  const auto& info = w.concepts.at(target);
  require(!info.is_anchor && !info.is_subject, "unlearning targets a regular concept");
  const std::size_t anchor = w.anchor_of(info.category);
  std::vector<std::size_t> ctx(kContexts);
  std::iota(ctx.begin(), ctx.end(), 0);
  Rng rng = Rng(seed).fork(0x747269706c6574);
  rng.shuffle(ctx);
  std::vector<Triplet> out(n);
  parallel_for(n, [&](std::size_t i) {
    Triplet t;
    t.context = ctx[i % kContexts];
    t.seed = splitmix64(seed + i);
    t.anchor_prompt = w.prompt(anchor, t.context);
    t.target_prompt = substitute(t.anchor_prompt, info.token);
    SamplerConfig sc = sampler;
    sc.seed = t.seed;
    sc.keep_latents = false;
    sc.keep_traces = false;
    t.image = sample(params, t.anchor_prompt, obj, sc).image.template cast<double>();
    out[i] = std::move(t);
  });
  return out;
}

struct UnlearnTask {
  std::size_t target = 0;
  std::size_t anchor = 0;
  std::vector<Triplet> triplets;
  BlockSet blocks;
  ObjectiveKind objective = ObjectiveKind::flow_matching;
  FinetuneHyper hyper;
  ConceptSpec spec;  // eval prompts of the target
};

struct UnlearnReport {
  bool full = false;
  std::size_t steps_run = 0;
  double target_before = 0, target_after = 0;
  double identity_accuracy_before = 0, identity_accuracy_after = 0;  // share with target < anchor score
  double anchor_alignment_after = 0;  // anchor prompts still read as the anchor
  double sibling_before = 0, sibling_after = 0;
  FrechetResult frechet;  // unrelated-prompt generations, before vs after
  std::size_t optimizer_state_elements = 0;
  double mean_step_ms = 0;
  TrainLog log;

  double sibling_drop_points() const { return 100.0 * (sibling_before - sibling_after); }

  CsvTable table() const {
    CsvTable t({"mode", "steps", "target_before", "target_after", "identity_accuracy_before",
                "identity_accuracy_after", "anchor_alignment_after", "sibling_before", "sibling_after", "frechet",
                "optimizer_state_elements"});
    t.row() << (full ? "full" : "localized") << steps_run << target_before << target_after
            << identity_accuracy_before << identity_accuracy_after << anchor_alignment_after << sibling_before
            << sibling_after << frechet.distance << optimizer_state_elements;
    return t;
  }
};

template <class Real>
struct UnlearnResult {
  ModelParams<Real> params;
  UnlearnReport report;
};

/// Regresses the model's prediction on (x_t, c*) toward the target built from
/// the anchor generation x, updating only the task's blocks (or all when `full`).
template <class Real>
UnlearnResult<Real> unlearn(const ModelParams<Real>& base, const UnlearnTask& task, const Judge& judge,
                            const AppEval& ev = {}, bool full = false) {
  require(full || !task.blocks.blocks.empty(), "localized unlearning needs a block set");
  require(!task.triplets.empty(), "unlearning needs triplets");
  const World& w = *judge.world;
  const auto& clf = *judge.classifier;
  const Objective obj = Objective::of(task.objective);
  const GradientMask mask = detail::app_mask(base.config.layers, task.blocks, full);
  const auto seeds = detail::eval_seeds(ev);
  const auto cat = w.concepts[task.target].category;
  const auto sibs = detail::siblings(w, cat, task.target);
  const auto unrelated = detail::unrelated_prompts(w, cat, ev.unrelated);

  struct Removal {
    double target = 0, identity = 0;
  };
  auto removal = [&](const ModelParams<Real>& p, const std::vector<Prompt>& prompts,
                     const std::vector<std::uint64_t>& s) {
    const auto images = detail::generate_images(p, obj, prompts, s, ev.sampler);
    Removal r;
    for (const auto& img : images) {
      const auto out = classify(clf, img);
      const double t = category_probability(w, out, task.target), a = category_probability(w, out, task.anchor);
      r.target += t;
      r.identity += t < a ? 1.0 : 0.0;
    }
    r.target /= double(images.size());
    r.identity /= double(images.size());
    return r;
  };

  UnlearnReport rep;
  rep.full = full;
  const auto before = removal(base, task.spec.eval_prompts, seeds);
  rep.target_before = before.target;
  rep.identity_accuracy_before = before.identity;
  rep.sibling_before = detail::surrounding_identity(base, obj, judge, sibs, ev);
  const auto unrelated_before = detail::generate_images(base, obj, unrelated, {ev.seed_base}, ev.sampler);

  std::vector<Example<Real>> data;
  for (const auto& t : task.triplets) data.push_back({t.image.template cast<Real>(), t.target_prompt});
  const std::vector<Prompt> monitor(
      task.spec.eval_prompts.begin(),
      task.spec.eval_prompts.begin() + std::ptrdiff_t(std::min(ev.monitor_prompts, task.spec.eval_prompts.size())));
  std::function<bool(std::size_t, const ModelParams<Real>&)> stop;
  if (task.hyper.target > 0 && task.hyper.check_every > 0)
    stop = [&](std::size_t step, const ModelParams<Real>& p) {
      return step % task.hyper.check_every == 0 &&
             removal(p, monitor, {ev.seed_base + 777}).identity >= task.hyper.target;
    };
  ModelParams<Real> tuned = base;
  if (task.hyper.train.steps > 0) {
    auto res = train(base, data, obj, mask, task.hyper.train, splitmix64(task.target + 17), {}, stop);
    tuned = std::move(res.params);
    rep.log = std::move(res.log);
  } else {
    rep.log.optimizer_state_elements = MaskedAdamW<Real>(base, mask).state_elements();
  }
  rep.steps_run = rep.log.rows.size();
  rep.optimizer_state_elements = rep.log.optimizer_state_elements;
  if (!rep.log.rows.empty()) {
    double ms = 0;
    for (const auto& r : rep.log.rows) ms += r.step_time_ms;
    rep.mean_step_ms = ms / double(rep.log.rows.size());
  }

  const auto after = removal(tuned, task.spec.eval_prompts, seeds);
  rep.target_after = after.target;
  rep.identity_accuracy_after = after.identity;
  {
    const auto anchor_images = detail::generate_images(tuned, obj, task.spec.eval_neutral, {ev.seed_base}, ev.sampler);
    rep.anchor_alignment_after = detail::mean_class_probability(clf, w, anchor_images, task.anchor);
  }
  rep.sibling_after = detail::surrounding_identity(tuned, obj, judge, sibs, ev);
  const auto unrelated_after = detail::generate_images(tuned, obj, unrelated, {ev.seed_base}, ev.sampler);
  rep.frechet = frechet_feature_distance(clf, unrelated_before, unrelated_after);
  return {std::move(tuned), std::move(rep)};
}

}  // namespace ditprobe
