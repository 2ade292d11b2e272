// Attention-contribution localization: per-token contributions from traces,
// aggregation over records and timesteps, and top-K block selection.
#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <string>
#include <vector>

#include "ditprobe/engine.hpp"
#include "ditprobe/io.hpp"
#include "ditprobe/model.hpp"
#include "ditprobe/parallel.hpp"

namespace ditprobe {

/// cont[i][j] = || sum_h attn^h[i, j] v_j^h W_o^h ||_2 for image token i and
/// text token j of one layer, returned as an [I, T] tensor. Layers without a
/// text pathway give an all-zero map. With `per_head`, head h's summand norms
/// are written to (*per_head)[h].
template <class Real>
Tensor contribution_map(const AttentionTrace<Real>& trace, std::size_t layer, std::vector<Tensor>* per_head = nullptr) {
  require(layer < trace.layers.size(), "layer " + std::to_string(layer) + " is outside the trace");
  const std::size_t I = trace.image_tokens, T = trace.text_len, H = trace.heads, d = trace.d_model;
  const std::size_t dh = d / H;
  Tensor cont({I, T});
  if (per_head) per_head->assign(H, Tensor({I, T}));
  const LayerTrace<Real>& lt = trace.layers[layer];
  if (!lt.has_text_attention) return cont;

  // u[h][j] = v_j^h W_o^h, a d-vector per (head, text key).
  std::vector<std::vector<double>> u(H, std::vector<double>(T * d, 0.0));
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t j = 0; j < T; ++j)
      for (std::size_t k = 0; k < dh; ++k) {
        const double v = double(lt.values(j, h * dh + k));
        if (v == 0.0) continue;
        const auto wrow = lt.w_o.row(h * dh + k);
        for (std::size_t c = 0; c < d; ++c) u[h][j * d + c] += v * double(wrow[c]);
      }

  std::vector<double> acc(d);
  for (std::size_t i = 0; i < I; ++i) {
    const std::size_t row = trace.image_row(i);
    for (std::size_t j = 0; j < T; ++j) {
      std::fill(acc.begin(), acc.end(), 0.0);
      for (std::size_t h = 0; h < H; ++h) {
        const double a = double(lt.attention[h](row, j));
        const double* uj = &u[h][j * d];
        for (std::size_t c = 0; c < d; ++c) acc[c] += a * uj[c];
        if (per_head) {
          double s = 0;
          for (std::size_t c = 0; c < d; ++c) s += (a * uj[c]) * (a * uj[c]);
          (*per_head)[h](i, j) = std::sqrt(s);
        }
      }
      double s = 0;
      for (double x : acc) s += x * x;
      cont(i, j) = std::sqrt(s);
    }
  }
  return cont;
}

/// Per layer: the mean over image tokens of the summed contributions of the
/// given text positions.
template <class Real>
std::vector<double> token_contribution(const AttentionTrace<Real>& trace, const std::vector<std::size_t>& positions) {
  require(!positions.empty(), "token_contribution needs at least one text position");
  for (auto j : positions) require(j < trace.text_len, "text position " + std::to_string(j) + " out of range");
  std::vector<double> out(trace.layers.size(), 0.0);
  for (std::size_t l = 0; l < trace.layers.size(); ++l) {
    const Tensor cont = contribution_map(trace, l);
    double total = 0;
    for (std::size_t i = 0; i < trace.image_tokens; ++i) {
      double s = 0;
      for (auto j : positions) s += cont(i, j);
      total += s;
    }
    out[l] = total / double(trace.image_tokens);
  }
  return out;
}

// ---------------------------------------------------------------- timestep policy

/// Which sampler steps contribute to a record's score.
struct TimestepPolicy {
  enum class Kind { all, subset, single };
  Kind kind = Kind::all;
  std::vector<std::size_t> steps;  // subset: listed steps; single: steps[0]

  static TimestepPolicy all_steps() { return {}; }
  static TimestepPolicy single(std::size_t step) { return {Kind::single, {step}}; }
  static TimestepPolicy subset(std::vector<std::size_t> s) { return {Kind::subset, std::move(s)}; }

  bool includes(std::size_t step) const {
    switch (kind) {
      case Kind::all:
        return true;
      case Kind::single:
        return !steps.empty() && steps[0] == step;
      case Kind::subset:
        return std::find(steps.begin(), steps.end(), step) != steps.end();
    }
    return false;
  }

  std::string describe() const {
    if (kind == Kind::all) return "all";
    std::string s = kind == Kind::single ? "single:" : "subset:";
    for (std::size_t i = 0; i < steps.size(); ++i) s += (i ? ";" : "") + std::to_string(steps[i]);
    return s;
  }

  static TimestepPolicy parse(const std::string& text) {
    if (text == "all") return all_steps();
    const auto colon = text.find(':');
    require(colon != std::string::npos, "timestep policy must be all, single:<n> or subset:<n;n;...>");
    const std::string kind = text.substr(0, colon);
    std::vector<std::size_t> steps;
    std::string rest = text.substr(colon + 1), part;
    std::istringstream is(rest);
    while (std::getline(is, part, ';'))
      if (!part.empty()) steps.push_back(std::stoull(part));
    if (kind == "single") {
      require(steps.size() == 1, "single timestep policy takes one step");
      return single(steps[0]);
    }
    require(kind == "subset" && !steps.empty(), "unknown timestep policy '" + text + "'");
    return subset(std::move(steps));
  }
};

// ---------------------------------------------------------------- aggregation

/// Per-step, per-layer token contributions of one generation.
struct ContributionSeries {
  Variant variant = Variant::cross_attn;
  std::size_t layers = 0;
  std::vector<std::vector<double>> steps;
};

template <class Real>
ContributionSeries contribution_series(const GenerationRecord<Real>& rec, const std::vector<std::size_t>& positions) {
  require(!rec.traces.empty(), "generation record carries no traces");
  ContributionSeries s;
  s.variant = rec.traces.front().variant;
  s.layers = rec.traces.front().layers.size();
  for (const auto& tr : rec.traces) s.steps.push_back(token_contribution(tr, positions));
  return s;
}

/// Samples `prompt` and collects the contributions of `positions` at every
/// step without keeping the traces themselves.
template <class Real>
ContributionSeries probe_generation(const ModelParams<Real>& params, const Prompt& prompt,
                                    const std::vector<std::size_t>& positions, const Objective& obj,
                                    SamplerConfig sc) {
  sc.keep_traces = false;
  sc.keep_latents = false;
  ContributionSeries s;
  s.variant = params.config.variant;
  s.layers = params.config.layers;
  SampleHooks<Real> hooks;
  hooks.observe = [&](std::size_t, double, const AttentionTrace<Real>& tr) {
    s.steps.push_back(token_contribution(tr, positions));
  };
  sample(params, prompt, obj, sc, hooks);
  return s;
}

struct AggregateOptions {
  TimestepPolicy timesteps;
  bool max_normalize = false;  // divide each record's vector by its largest entry first
};

struct LayerScores {
  std::vector<double> scores;
  std::size_t n_records = 0, n_prompts = 0, n_seeds = 0;
  std::string timestep_policy = "all";

  std::size_t layers() const { return scores.size(); }

  CsvTable table() const {
    CsvTable t({"block_index", "score", "n_records"});
    for (std::size_t b = 0; b < scores.size(); ++b) t.row() << b << scores[b] << n_records;
    return t;
  }
};

/// Mean over records of each record's mean over the selected steps. Record
/// vectors are summed in sorted order so the result does not depend on the
/// order of `records`.
inline LayerScores aggregate(const std::vector<ContributionSeries>& records, const AggregateOptions& opt = {}) {
  require(!records.empty(), "aggregate needs at least one record");
  const std::size_t L = records.front().layers;
  std::vector<std::vector<double>> per_record;
  for (const auto& r : records) {
    require(r.layers == L && r.variant == records.front().variant, "aggregate over records from different models");
    std::vector<double> v(L, 0.0);
    std::size_t used = 0;
    for (std::size_t k = 0; k < r.steps.size(); ++k) {
      if (!opt.timesteps.includes(k)) continue;
      require(r.steps[k].size() == L, "contribution vector length differs from the layer count");
      for (std::size_t l = 0; l < L; ++l) v[l] += r.steps[k][l];
      ++used;
    }
    require(used > 0, "timestep policy selects no step of a record");
    for (auto& x : v) x /= double(used);
    if (opt.max_normalize) {
      const double m = *std::max_element(v.begin(), v.end());
      if (m > 0)
        for (auto& x : v) x /= m;
    }
    per_record.push_back(std::move(v));
  }
  std::sort(per_record.begin(), per_record.end());
  LayerScores out;
  out.scores.assign(L, 0.0);
  for (const auto& v : per_record)
    for (std::size_t l = 0; l < L; ++l) out.scores[l] += v[l];
  for (auto& x : out.scores) x /= double(per_record.size());
  out.n_records = records.size();
  out.timestep_policy = opt.timesteps.describe();
  return out;
}

// ---------------------------------------------------------------- selection

/// Block indices (0-based) ordered by descending score.
struct BlockSet {
  std::vector<std::size_t> blocks;

  std::size_t size() const { return blocks.size(); }
  bool contains(std::size_t b) const { return std::find(blocks.begin(), blocks.end(), b) != blocks.end(); }
  std::vector<std::size_t> sorted() const {
    auto s = blocks;
    std::sort(s.begin(), s.end());
    return s;
  }
  std::string text() const {
    std::string s;
    for (std::size_t i = 0; i < blocks.size(); ++i) s += (i ? ";" : "") + std::to_string(blocks[i]);
    return s;
  }
};

/// The K highest-scoring blocks; equal scores go to the lower index.
inline BlockSet select_top_k(const LayerScores& scores, std::size_t k) {
  const std::size_t L = scores.layers();
  require(k >= 1 && k <= L, "K=" + std::to_string(k) + " outside [1, " + std::to_string(L) + "]");
  std::vector<std::size_t> idx(L);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return scores.scores[a] > scores.scores[b]; });
  idx.resize(k);
  return {idx};
}

/// floor(fraction * L), e.g. 0.4 of 28 blocks is 11.
inline std::size_t k_from_fraction(std::size_t layers, double fraction) {
  require(fraction >= 0 && fraction <= 1, "K fraction must lie in [0, 1]");
  return std::size_t(std::floor(fraction * double(layers) + 1e-9));
}

/// round(num/den * L), the scaled form of "K of 28 blocks".
inline std::size_t k_from_ratio(std::size_t layers, double num, double den) {
  return std::max<std::size_t>(1, std::size_t(std::lround(num / den * double(layers))));
}

}  // namespace ditprobe
