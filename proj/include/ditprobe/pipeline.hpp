// End-to-end localization: base-model training on the concept world, probe
// localization with intervention checks, the contiguous-window brute-force
// search and the comparison between the two.
#pragma once

#include <algorithm>
#include <chrono>
#include <functional>
#include <iterator>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ditprobe/engine.hpp"
#include "ditprobe/eval.hpp"
#include "ditprobe/intervene.hpp"
#include "ditprobe/io.hpp"
#include "ditprobe/parallel.hpp"
#include "ditprobe/probe.hpp"
#include "ditprobe/world.hpp"

namespace ditprobe {

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------- base model

/// Anchors and regular concepts in every context, `render_seeds` renders each.
/// Subjects stay out so their identity is novel to the base model.
template <class Real>
std::vector<Example<Real>> base_dataset(const World& w, std::size_t render_seeds, std::uint64_t seed_base) {
  std::vector<Example<Real>> data;
  for (const auto& c : w.concepts) {
    if (c.is_subject) continue;
    for (std::size_t ctx = 0; ctx < kContexts; ++ctx)
      for (std::size_t s = 0; s < render_seeds; ++s) {
        const std::uint64_t seed = splitmix64(seed_base ^ (c.class_id * 1000003 + ctx * 131 + s));
        data.push_back({render<Real>(w, c.class_id, ctx, seed), w.prompt(c.class_id, ctx)});
      }
  }
  return data;
}

struct BaseTraining {
  ModelConfig model;
  ObjectiveKind objective = ObjectiveKind::flow_matching;
  TrainHyper hyper;
  std::size_t render_seeds = 2;
  std::uint64_t init_seed = 1;
  std::uint64_t data_seed = 2;
  std::uint64_t train_seed = 3;

  /// The configuration used for the shipped experiments: the default model
  /// sized to the world's vocabulary.
  static BaseTraining defaults(const World& w, Variant v = Variant::cross_attn) {
    BaseTraining b;
    b.model = ModelConfig::defaults(v);
    b.model.vocab = w.vocab_size();
    b.hyper.steps = 8000;
    b.hyper.batch = 16;
    b.hyper.adam.lr = 1e-3;
    b.hyper.warmup = 200;
    b.hyper.cosine = true;
    b.hyper.clip_norm = 1.0;
    return b;
  }
};

template <class Real>
TrainResult<Real> train_base_model(const World& w, const BaseTraining& bt,
                                   const std::function<void(const TrainLogRow&)>& on_step = {},
                                   const std::function<bool(std::size_t, const ModelParams<Real>&)>& stop = {}) {
  const auto data = base_dataset<Real>(w, bt.render_seeds, bt.data_seed);
  auto params = init_params<Real>(bt.model, bt.init_seed);
  return train(std::move(params), data, Objective::of(bt.objective), GradientMask::all(bt.model.layers), bt.hyper,
               bt.train_seed, on_step, stop);
}

// ---------------------------------------------------------------- localization

struct LocalizeConfig {
  std::size_t n_seeds = 2;         // probe generations per train prompt
  std::size_t eval_seeds = 2;      // verification generations per eval prompt
  std::uint64_t seed_base = 1000;  // probe seeds are seed_base + s
  std::uint64_t eval_seed_base = 5000;
  AggregateOptions aggregate;
  SamplerConfig sampler{25, 0, false, false};
  std::vector<std::size_t> extra_ks;  // further K values to select and verify
};

struct RemovalMetrics {
  std::size_t k = 0;
  double concept_score = 0;     // mean knowledge-class probability after intervention
  double context_score = 0;     // mean context accuracy after intervention
  double removed_fraction = 0;  // share of eval generations judged removed
};

struct LocalizationReport {
  std::size_t concept_id = 0;
  std::size_t layers = 0;
  LayerScores scores;
  std::map<std::size_t, BlockSet> blocks;  // by K
  bool verified = false;
  double knowledge_score = 0, neutral_score = 0, knowledge_context = 0, threshold = 0;
  std::vector<RemovalMetrics> removal;
  std::vector<std::uint64_t> probe_seeds, eval_seeds;
  std::size_t n_prompts = 0;
  double probe_seconds = 0;

  const RemovalMetrics& removal_at(std::size_t k) const {
    for (const auto& r : removal)
      if (r.k == k) return r;
    throw ContractViolation("report has no removal metrics for K=" + std::to_string(k));
  }

  Manifest manifest() const {
    Manifest m;
    m.set("kind", "ditprobe.localization");
    m.set("concept_id", concept_id);
    m.set("layers", layers);
    m.set("n_prompts", n_prompts);
    m.set("n_records", scores.n_records);
    m.set("timestep_policy", scores.timestep_policy);
    std::string s;
    for (auto x : probe_seeds) s += (s.empty() ? "" : ";") + std::to_string(x);
    m.set("probe_seeds", s);
    s.clear();
    for (auto x : eval_seeds) s += (s.empty() ? "" : ";") + std::to_string(x);
    m.set("eval_seeds", s);
    for (const auto& [k, b] : blocks) m.set("blocks_k" + std::to_string(k), b.text());
    m.set("verified", verified ? 1 : 0);
    if (verified) {
      m.set("knowledge_score", knowledge_score);
      m.set("neutral_score", neutral_score);
      m.set("knowledge_context", knowledge_context);
      m.set("threshold", threshold);
    }
    return m;
  }

  CsvTable removal_table() const {
    CsvTable t({"K", "blocks", "concept_score", "context_score", "removed_fraction"});
    for (const auto& r : removal)
      t.row() << r.k << blocks.at(r.k).text() << r.concept_score << r.context_score << r.removed_fraction;
    return t;
  }
};

/// Reads the scores and block sets back from a report's manifest and score table.
inline LocalizationReport report_from_files(const Manifest& m, const std::string& scores_csv) {
  if (m.get("kind") != "ditprobe.localization") throw IoError("not a localization report");
  LocalizationReport r;
  r.concept_id = m.get_size("concept_id");
  r.layers = m.get_size("layers");
  r.n_prompts = m.get_size("n_prompts");
  r.scores.n_records = m.get_size("n_records");
  r.scores.timestep_policy = m.get("timestep_policy");
  std::istringstream is(scores_csv);
  std::string line;
  std::getline(is, line);
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto a = line.find(','), b = line.find(',', a + 1);
    r.scores.scores.push_back(std::stod(line.substr(a + 1, b - a - 1)));
  }
  if (r.scores.scores.size() != r.layers) throw IoError("score table length differs from the layer count");
  for (const auto& [k, v] : m.entries) {
    if (k.rfind("blocks_k", 0) != 0) continue;
    BlockSet bs;
    std::istringstream bsv(v);
    std::string part;
    while (std::getline(bsv, part, ';'))
      if (!part.empty()) bs.blocks.push_back(std::stoull(part));
    r.blocks[std::stoull(k.substr(8))] = bs;
  }
  return r;
}

/// Everything needed to judge generations: the world and its classifier.
struct Judge {
  const World* world = nullptr;
  const ClassifierParams* classifier = nullptr;
};

namespace detail {

inline std::vector<std::uint64_t> seed_list(std::uint64_t base, std::size_t n) {
  std::vector<std::uint64_t> s(n);
  for (std::size_t i = 0; i < n; ++i) s[i] = base + i;
  return s;
}

}  // namespace detail

/// Probe scores from sampling every train prompt with every probe seed; the
/// contribution of the prompt's concept positions is averaged per block.
template <class Real>
LayerScores probe_scores(const ModelParams<Real>& params, const Objective& obj, const std::vector<Prompt>& prompts,
                         const std::vector<std::uint64_t>& seeds, const LocalizeConfig& cfg) {
  require(!prompts.empty() && !seeds.empty(), "probe needs at least one prompt and one seed");
  const std::size_t S = seeds.size();
  std::vector<ContributionSeries> series(prompts.size() * S);
  parallel_for(series.size(), [&](std::size_t idx) {
    SamplerConfig sc = cfg.sampler;
    sc.seed = seeds[idx % S];
    const Prompt& p = prompts[idx / S];
    series[idx] = probe_generation(params, p, p.concept_positions, obj, sc);
  });
  LayerScores s = aggregate(series, cfg.aggregate);
  s.n_prompts = prompts.size();
  s.n_seeds = S;
  return s;
}

/// Probe on the train prompts, select top-K (plus any extra K), and, when a
/// judge is given, verify each selection by intervening on the eval prompts.
template <class Real>
LocalizationReport localize(const ModelParams<Real>& params, const Objective& obj, const ConceptSpec& spec,
                            std::size_t k, const LocalizeConfig& cfg, const Judge* judge = nullptr) {
  const std::size_t L = params.config.layers;
  require(k >= 1 && k <= L, "K must lie in [1, L]");
  LocalizationReport r;
  r.concept_id = spec.concept_id;
  r.layers = L;
  r.n_prompts = spec.train_prompts.size();
  r.probe_seeds = detail::seed_list(cfg.seed_base, cfg.n_seeds);
  const auto t0 = std::chrono::steady_clock::now();
  r.scores = probe_scores(params, obj, spec.train_prompts, r.probe_seeds, cfg);
  std::vector<std::size_t> ks{k};
  for (auto x : cfg.extra_ks)
    if (x >= 1 && x <= L && std::find(ks.begin(), ks.end(), x) == ks.end()) ks.push_back(x);
  for (auto x : ks) r.blocks[x] = select_top_k(r.scores, x);
  r.probe_seconds = seconds_since(t0);

  if (judge) {
    r.verified = true;
    r.eval_seeds = detail::seed_list(cfg.eval_seed_base, cfg.eval_seeds);
    const World& w = *judge->world;
    const auto& clf = *judge->classifier;
    const auto know = score_intervention(params, obj, clf, w, spec, {}, r.eval_seeds, cfg.sampler);
    const auto neut = score_intervention(params, obj, clf, w, spec, {}, r.eval_seeds, cfg.sampler, true);
    r.knowledge_score = mean_concept(know);
    r.neutral_score = mean_concept(neut);
    r.knowledge_context = mean_context(know);
    r.threshold = removal_threshold(r.neutral_score, r.knowledge_score);
    for (const auto& [kk, blocks] : r.blocks) {
      const auto sc = score_intervention(params, obj, clf, w, spec, blocks, r.eval_seeds, cfg.sampler);
      RemovalMetrics m;
      m.k = kk;
      m.concept_score = mean_concept(sc);
      m.context_score = mean_context(sc);
      std::size_t removed = 0;
      for (const auto& g : sc) removed += decide_removed(g.knowledge, r.threshold).removed;
      m.removed_fraction = double(removed) / double(sc.size());
      r.removal.push_back(m);
    }
  }
  return r;
}

// ---------------------------------------------------------------- brute force

/// Removal metric of a block set; larger means more of the concept withheld.
using BlockMetric = std::function<double(const BlockSet&)>;

/// Mean drop of the knowledge-class probability when the blocks are
/// intervened, over the first `max_prompts` eval prompts and the given seeds.
template <class Real>
BlockMetric concept_drop_metric(const ModelParams<Real>& params, const Objective& obj, const Judge& judge,
                                ConceptSpec spec, const std::vector<std::uint64_t>& seeds,
                                const SamplerConfig& sampler, std::size_t max_prompts = 0) {
  if (max_prompts && spec.eval_prompts.size() > max_prompts) {
    spec.eval_prompts.resize(max_prompts);
    spec.eval_neutral.resize(max_prompts);
    spec.eval_contexts.resize(max_prompts);
  }
  auto shared = std::make_shared<ConceptSpec>(std::move(spec));
  auto baseline = std::make_shared<std::optional<double>>();
  return [&params, obj, judge, shared, seeds, sampler, baseline](const BlockSet& blocks) {
    auto score = [&](const BlockSet& b) {
      return mean_concept(
          score_intervention(params, obj, *judge.classifier, *judge.world, *shared, b, seeds, sampler));
    };
    if (!*baseline) *baseline = score({});
    return **baseline - score(blocks);
  };
}

/// How far intervening closes the gap to the neutral generation: mean
/// per-pixel |knowledge - neutral| minus |intervened - neutral|. Needs no
/// classifier, so it also serves untrained and planted models.
template <class Real>
BlockMetric neutral_gap_metric(const ModelParams<Real>& params, const Objective& obj, std::vector<InterventionPlan> plans) {
  auto shared = std::make_shared<std::vector<InterventionPlan>>(std::move(plans));
  auto neutral = std::make_shared<std::vector<BasicTensor<Real>>>();
  auto gap = std::make_shared<std::vector<double>>();
  auto distance = [](const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
    double s = 0;
    for (std::size_t k = 0; k < a.size(); ++k) s += std::abs(double(a[k]) - double(b[k]));
    return s / double(a.size());
  };
  return [&params, obj, shared, neutral, gap, distance](const BlockSet& blocks) {
    const auto& ps = *shared;
    if (neutral->empty()) {
      neutral->resize(ps.size());
      gap->resize(ps.size());
      parallel_for(ps.size(), [&](std::size_t i) {
        (*neutral)[i] = sample(params, ps[i].neutral, obj, ps[i].sampler).image;
        (*gap)[i] = distance(sample(params, ps[i].knowledge, obj, ps[i].sampler).image, (*neutral)[i]);
      });
    }
    std::vector<double> closed(ps.size());
    parallel_for(ps.size(), [&](std::size_t i) {
      InterventionPlan plan = ps[i];
      plan.blocks = blocks;
      closed[i] = (*gap)[i] - distance(generate_intervened(params, plan, obj).image, (*neutral)[i]);
    });
    double total = 0;
    for (double d : closed) total += d;
    return total / double(closed.size());
  };
}

struct Window {
  std::size_t start = 0;
  BlockSet blocks;
  double metric = 0;
};

struct WindowSearchResult {
  std::size_t concept_id = 0;
  std::size_t k = 0;
  std::vector<Window> windows;
  std::size_t best = 0;  // index into windows; ties go to the lower start
  double seconds = 0;

  const Window& best_window() const { return windows.at(best); }

  CsvTable table() const {
    CsvTable t({"start", "blocks", "metric"});
    for (const auto& w : windows) t.row() << w.start << w.blocks.text() << w.metric;
    return t;
  }
};

/// The L circular windows {s, s+1, ..., s+K-1} mod L.
inline std::vector<BlockSet> circular_windows(std::size_t layers, std::size_t k) {
  require(k >= 1 && k <= layers, "window size must lie in [1, L]");
  std::vector<BlockSet> out(layers);
  for (std::size_t s = 0; s < layers; ++s)
    for (std::size_t i = 0; i < k; ++i) out[s].blocks.push_back((s + i) % layers);
  return out;
}

template <class Real>
WindowSearchResult brute_force_window_search(const ModelParams<Real>& params, std::size_t concept_id, std::size_t k,
                                             const BlockMetric& metric) {
  WindowSearchResult r;
  r.concept_id = concept_id;
  r.k = k;
  const auto t0 = std::chrono::steady_clock::now();
  const auto windows = circular_windows(params.config.layers, k);
  for (std::size_t s = 0; s < windows.size(); ++s) {
    r.windows.push_back({s, windows[s], metric(windows[s])});
    if (r.windows[s].metric > r.windows[r.best].metric) r.best = s;
  }
  r.seconds = seconds_since(t0);
  return r;
}

struct LocalizerComparison {
  double jaccard = 0;
  double probe_metric = 0, brute_metric = 0;
  double metric_gap = 0;    // brute - probe
  double gap_fraction = 0;  // gap relative to the brute-force drop
  double speedup = 0;       // brute-force seconds / probe seconds
};

inline double jaccard(const BlockSet& a, const BlockSet& b) {
  const auto sa = a.sorted(), sb = b.sorted();
  std::vector<std::size_t> inter, uni;
  std::set_intersection(sa.begin(), sa.end(), sb.begin(), sb.end(), std::back_inserter(inter));
  std::set_union(sa.begin(), sa.end(), sb.begin(), sb.end(), std::back_inserter(uni));
  return uni.empty() ? 1.0 : double(inter.size()) / double(uni.size());
}

/// `probe_metric` is the same metric evaluated on the probe's block set.
inline LocalizerComparison compare_localizers(const LocalizationReport& report, const WindowSearchResult& windows,
                                              double probe_metric) {
  require(report.concept_id == windows.concept_id, "comparison across different concepts");
  require(report.blocks.count(windows.k) == 1, "report has no block set for K=" + std::to_string(windows.k));
  require(report.probe_seconds > 0, "report carries no probe timing");
  LocalizerComparison c;
  c.jaccard = jaccard(report.blocks.at(windows.k), windows.best_window().blocks);
  c.probe_metric = probe_metric;
  c.brute_metric = windows.best_window().metric;
  c.metric_gap = c.brute_metric - c.probe_metric;
  c.gap_fraction = c.brute_metric != 0 ? c.metric_gap / std::abs(c.brute_metric) : 0.0;
  c.speedup = windows.seconds / report.probe_seconds;
  return c;
}

inline LocalizerComparison compare_localizers(const LocalizationReport& report, const WindowSearchResult& windows,
                                              const BlockMetric& metric) {
  require(report.blocks.count(windows.k) == 1, "report has no block set for K=" + std::to_string(windows.k));
  return compare_localizers(report, windows, metric(report.blocks.at(windows.k)));
}

}  // namespace ditprobe
