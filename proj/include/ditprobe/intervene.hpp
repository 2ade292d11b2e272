// Knowledge-withholding generation: the neutral prompt enters exactly the
// selected blocks while every other block sees the knowledge prompt.
#pragma once

#include <string>
#include <vector>

#include "ditprobe/engine.hpp"
#include "ditprobe/eval.hpp"
#include "ditprobe/parallel.hpp"
#include "ditprobe/probe.hpp"
#include "ditprobe/world.hpp"

namespace ditprobe {

struct InterventionPlan {
  BlockSet blocks;
  Prompt knowledge, neutral;
  SamplerConfig sampler;
};

namespace detail {

inline std::vector<bool> block_flags(const BlockSet& b, std::size_t layers) {
  std::vector<bool> flags(layers, false);
  for (auto i : b.blocks) {
    require(i < layers, "intervened block " + std::to_string(i) + " out of range");
    require(!flags[i], "intervened block " + std::to_string(i) + " listed twice");
    flags[i] = true;
  }
  return flags;
}

inline void check_plan(const InterventionPlan& plan) {
  require(aligned(plan.knowledge, plan.neutral), "knowledge and neutral prompts are not aligned");
}

}  // namespace detail

/// Blocks in the plan compute cross-attention keys and values from the
/// neutral prompt at every step.
template <class Real>
GenerationRecord<Real> generate_intervened_cross(const ModelParams<Real>& params, const InterventionPlan& plan,
                                                 const Objective& obj) {
  require(params.config.variant == Variant::cross_attn, "cross-attention intervention needs a cross_attn model");
  detail::check_plan(plan);
  TextRouting<Real> routing;
  routing.alternate = &plan.neutral;
  routing.use_alternate = detail::block_flags(plan.blocks, params.config.layers);
  SampleHooks<Real> hooks;
  if (!plan.blocks.blocks.empty()) hooks.routing = [&](std::size_t) { return &routing; };
  auto rec = sample(params, plan.knowledge, obj, plan.sampler, hooks);
  rec.blocks = plan.blocks.blocks;
  return rec;
}

/// Raw incoming text stream of every block at every step of a generation.
template <class Real>
using TextRecording = std::vector<std::vector<BasicTensor<Real>>>;

/// Two passes sharing one seed: the neutral generation records each block's
/// text-stream input per step, then the knowledge generation replays those
/// inputs into the planned blocks.
template <class Real>
GenerationRecord<Real> generate_intervened_mmdit(const ModelParams<Real>& params, const InterventionPlan& plan,
                                                 const Objective& obj, TextRecording<Real>* recording = nullptr) {
  require(params.config.variant == Variant::mmdit, "two-pass intervention needs an mmdit model");
  detail::check_plan(plan);
  const std::vector<bool> flags = detail::block_flags(plan.blocks, params.config.layers);
  if (plan.blocks.blocks.empty()) {
    auto rec = sample(params, plan.knowledge, obj, plan.sampler);
    return rec;
  }

  TextRecording<Real> local;
  TextRecording<Real>& rec_text = recording ? *recording : local;
  rec_text.clear();
  std::vector<TextRouting<Real>> record_routes;
  {
    SamplerConfig sc = plan.sampler;
    sc.keep_traces = false;
    sc.keep_latents = false;
    const std::size_t steps = sc.steps;
    rec_text.assign(steps, {});
    record_routes.resize(steps);
    SampleHooks<Real> hooks;
    hooks.routing = [&](std::size_t k) -> const TextRouting<Real>* {
      require(k < steps, "neutral pass ran more steps than planned");
      record_routes[k].text_record = &rec_text[k];
      return &record_routes[k];
    };
    sample(params, plan.neutral, obj, sc, hooks);
  }

  std::vector<TextRouting<Real>> replay(rec_text.size());
  for (std::size_t k = 0; k < rec_text.size(); ++k) {
    replay[k].use_alternate = flags;
    replay[k].text_overrides = &rec_text[k];
  }
  SampleHooks<Real> hooks;
  hooks.routing = [&](std::size_t k) -> const TextRouting<Real>* {
    require(k < replay.size() && rec_text[k].size() == params.config.layers,
            "replay step " + std::to_string(k) + " has no recorded text stream");
    return &replay[k];
  };
  auto rec = sample(params, plan.knowledge, obj, plan.sampler, hooks);
  rec.blocks = plan.blocks.blocks;
  return rec;
}

template <class Real>
GenerationRecord<Real> generate_intervened(const ModelParams<Real>& params, const InterventionPlan& plan,
                                           const Objective& obj) {
  return params.config.variant == Variant::cross_attn ? generate_intervened_cross(params, plan, obj)
                                                      : generate_intervened_mmdit(params, plan, obj);
}

/// Intervened image plus its human-readable sidecar.
inline std::string intervention_sidecar(const InterventionPlan& plan, std::size_t k) {
  Manifest m;
  m.set("seed", plan.sampler.seed);
  m.set("K", k);
  m.set("blocks", plan.blocks.text());
  m.set("sampler_steps", plan.sampler.steps);
  return m.text();
}

// ---------------------------------------------------------------- scoring

/// Classifier readings of one generation.
struct GenerationScore {
  double knowledge = 0;  // probability of the knowledge class within its category
  double context = 0;    // fraction of context heads read correctly
  double anchor = 0;     // probability of the category anchor
};

template <class Real>
GenerationScore score_generation(const ClassifierParams& clf, const World& w, const BasicTensor<Real>& image,
                                 std::size_t class_id, std::size_t context_id) {
  const Tensor img = image.template cast<double>();
  const auto out = classify(clf, img);
  const auto cat = w.concepts[class_id].category;
  return {category_probability(w, out, class_id), context_accuracy(out, context_id),
          category_probability(w, out, w.anchor_of(cat))};
}

/// Eval prompt x seed scores for one block set; index = prompt * seeds + seed.
template <class Real>
std::vector<GenerationScore> score_intervention(const ModelParams<Real>& params, const Objective& obj,
                                                const ClassifierParams& clf, const World& w, const ConceptSpec& spec,
                                                const BlockSet& blocks, const std::vector<std::uint64_t>& seeds,
                                                const SamplerConfig& base, bool neutral_only = false) {
  const std::size_t P = spec.eval_prompts.size(), S = seeds.size();
  std::vector<GenerationScore> out(P * S);
  parallel_for(P * S, [&](std::size_t idx) {
    const std::size_t p = idx / S, s = idx % S;
    InterventionPlan plan{blocks, spec.eval_prompts[p], spec.eval_neutral[p], base};
    plan.sampler.seed = seeds[s];
    plan.sampler.keep_latents = false;
    plan.sampler.keep_traces = false;
    const auto rec = neutral_only ? sample(params, plan.neutral, obj, plan.sampler)
                                  : generate_intervened(params, plan, obj);
    out[idx] = score_generation(clf, w, rec.image, spec.concept_id, spec.eval_contexts[p]);
  });
  return out;
}

inline double mean_concept(const std::vector<GenerationScore>& v) {
  double s = 0;
  for (const auto& g : v) s += g.knowledge;
  return v.empty() ? 0.0 : s / double(v.size());
}

inline double mean_context(const std::vector<GenerationScore>& v) {
  double s = 0;
  for (const auto& g : v) s += g.context;
  return v.empty() ? 0.0 : s / double(v.size());
}

struct RemovalCurveRow {
  std::size_t k = 0;
  BlockSet blocks;
  double concept_score = 0;
  double context_score = 0;
};

/// One row per K: the top-K blocks of `scores` are intervened on every eval
/// prompt and seed. K = 0 is the plain knowledge generation.
template <class Real>
std::vector<RemovalCurveRow> removal_curve(const ModelParams<Real>& params, const Objective& obj,
                                           const ClassifierParams& clf, const World& w, const ConceptSpec& spec,
                                           const LayerScores& scores, const std::vector<std::size_t>& k_values,
                                           const std::vector<std::uint64_t>& seeds, const SamplerConfig& base) {
  std::vector<RemovalCurveRow> rows;
  for (auto k : k_values) {
    RemovalCurveRow r;
    r.k = k;
    if (k > 0) r.blocks = select_top_k(scores, k);
    const auto sc = score_intervention(params, obj, clf, w, spec, r.blocks, seeds, base);
    r.concept_score = mean_concept(sc);
    r.context_score = mean_context(sc);
    rows.push_back(std::move(r));
  }
  return rows;
}

inline CsvTable removal_curve_table(const std::vector<RemovalCurveRow>& rows) {
  CsvTable t({"K", "blocks", "concept_score", "context_score"});
  for (const auto& r : rows) t.row() << r.k << r.blocks.text() << r.concept_score << r.context_score;
  return t;
}

/// Spearman rank correlation with average ranks for ties.
inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  require(x.size() == y.size() && x.size() >= 2, "spearman needs two equal-length samples");
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = 0.5 * double(i + j);
      i = j + 1;
    }
    return r;
  };
  const auto rx = ranks(x), ry = ranks(y);
  const double n = double(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n, my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  return (sxx == 0 || syy == 0) ? 0.0 : sxy / std::sqrt(sxx * syy);
}

}  // namespace ditprobe
