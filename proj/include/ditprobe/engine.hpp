// Training objectives, the masked training loop and the deterministic sampler.
//
// Time convention shared by both objectives: model time t runs from 0 (pure
// noise) to 1 (clean image).
//   flow_matching       x_t = (1-t) x0 + t x1,  target v = x1 - x0
//   epsilon_prediction  discrete step n = round((1-t) N),
//                       x_t = sqrt(abar_n) x1 + sqrt(1-abar_n) x0, target x0
// where x1 is the clean image and x0 standard-normal noise.
#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ditprobe/model.hpp"
#include "ditprobe/numerics.hpp"
#include "ditprobe/parallel.hpp"

namespace ditprobe {

enum class ObjectiveKind : std::uint8_t { flow_matching, epsilon_prediction };

inline const char* objective_name(ObjectiveKind k) {
  return k == ObjectiveKind::flow_matching ? "flow_matching" : "epsilon_prediction";
}

inline ObjectiveKind parse_objective(const std::string& s) {
  if (s == "flow_matching" || s == "flow") return ObjectiveKind::flow_matching;
  if (s == "epsilon_prediction" || s == "epsilon") return ObjectiveKind::epsilon_prediction;
  throw ContractViolation("unknown objective '" + s + "'");
}

struct Objective {
  ObjectiveKind kind = ObjectiveKind::flow_matching;
  std::size_t steps = 100;         // N for the discrete epsilon schedule
  std::vector<double> alpha_bar;   // abar_0 = 1 ... abar_N, epsilon kind only

  static Objective flow() { return {}; }

  /// Linear beta schedule, with the usual 1000-step endpoints rescaled to N steps.
  static Objective epsilon(std::size_t n = 100) {
    require(n >= 1, "epsilon schedule needs at least one step");
    Objective o;
    o.kind = ObjectiveKind::epsilon_prediction;
    o.steps = n;
    const double scale = 1000.0 / double(n);
    const double lo = 1e-4 * scale, hi = 0.02 * scale;
    o.alpha_bar.assign(n + 1, 1.0);
    for (std::size_t k = 1; k <= n; ++k) {
      const double beta = n == 1 ? hi : lo + (hi - lo) * double(k - 1) / double(n - 1);
      o.alpha_bar[k] = o.alpha_bar[k - 1] * (1.0 - std::min(beta, 0.999));
    }
    return o;
  }

  static Objective of(ObjectiveKind k, std::size_t n = 100) {
    return k == ObjectiveKind::flow_matching ? flow() : epsilon(n);
  }

  std::size_t step_of(double t) const { return std::size_t(std::lround((1.0 - t) * double(steps))); }
  double time_of(std::size_t n) const { return 1.0 - double(n) / double(steps); }
  double alpha_bar_at(double t) const { return alpha_bar.at(step_of(t)); }
};

template <class Real>
struct NoisedPair {
  BasicTensor<Real> input, target;
};

template <class Real>
NoisedPair<Real> make_target(const Objective& obj, const BasicTensor<Real>& clean, const BasicTensor<Real>& noise,
                             double t) {
  require(clean.shape() == noise.shape(), "make_target: clean/noise shape mismatch");
  require(t >= 0.0 && t <= 1.0, "make_target: t must lie in [0, 1]");
  NoisedPair<Real> out{BasicTensor<Real>(clean.shape()), BasicTensor<Real>(clean.shape())};
  if (obj.kind == ObjectiveKind::flow_matching) {
    const Real a = Real(t), b = Real(1.0 - t);
    for (std::size_t i = 0; i < clean.size(); ++i) {
      out.input[i] = b * noise[i] + a * clean[i];
      out.target[i] = clean[i] - noise[i];
    }
  } else {
    const double ab = obj.alpha_bar_at(t);
    const Real sa = Real(std::sqrt(ab)), sn = Real(std::sqrt(1.0 - ab));
    for (std::size_t i = 0; i < clean.size(); ++i) {
      out.input[i] = sa * clean[i] + sn * noise[i];
      out.target[i] = noise[i];
    }
  }
  return out;
}

// ---------------------------------------------------------------- loss

template <class Real>
struct Example {
  BasicTensor<Real> image;  // clean, [channels, size, size] in [-1, 1]
  Prompt prompt;
};

/// One fully specified regression sample: the noise and time are fixed so the
/// loss is a deterministic function of the parameters.
template <class Real>
struct TrainItem {
  BasicTensor<Real> clean, noise;
  Prompt prompt;
  double t = 0.5;
};

template <class Real>
struct LossAndGrads {
  double loss = 0;
  ModelParams<Real> grads;
};

namespace detail {

template <class Real>
double item_loss_and_grads(const ModelParams<Real>& params, const TrainItem<Real>& item, const Objective& obj,
                           const GradientMask& mask, double weight, ModelParams<Real>& grads) {
  auto pair = make_target(obj, item.clean, item.noise, item.t);
  ForwardCache<Real> cache;
  auto pred = forward(params, pair.input, item.prompt, item.t, nullptr, nullptr, &cache);
  BasicTensor<Real> d_pred(pred.shape());
  double sq = 0;
  const double n = double(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double diff = double(pred[i]) - double(pair.target[i]);
    sq += diff * diff;
    d_pred[i] = Real(2.0 * diff * weight / n);
  }
  if (!mask.empty()) backward(params, cache, d_pred, mask, grads);
  return sq / n;
}

}  // namespace detail

/// Mean-squared regression loss averaged over elements and batch items, and its
/// gradient. Gradients outside the mask are exactly zero. Items are evaluated
/// in parallel into private buffers and summed in item order.
template <class Real>
LossAndGrads<Real> loss_and_grads(const ModelParams<Real>& params, const std::vector<TrainItem<Real>>& batch,
                                  const Objective& obj, const GradientMask& mask, std::int64_t batch_id = 0) {
  require(!batch.empty(), "loss_and_grads: empty batch");
  const double w = 1.0 / double(batch.size());
  std::vector<ModelParams<Real>> per_item(batch.size());
  std::vector<double> losses(batch.size());
  parallel_for(batch.size(), [&](std::size_t i) {
    per_item[i] = zeros_like(params);
    losses[i] = detail::item_loss_and_grads(params, batch[i], obj, mask, w, per_item[i]);
  });
  LossAndGrads<Real> out{0.0, std::move(per_item[0])};
  out.loss = losses[0] * w;
  for (std::size_t i = 1; i < batch.size(); ++i) {
    out.loss += losses[i] * w;
    std::vector<BasicTensor<Real>*> dst;
    out.grads.for_each([&](const std::string&, int, BasicTensor<Real>& t) { dst.push_back(&t); });
    std::size_t k = 0;
    per_item[i].for_each([&](const std::string&, int, const BasicTensor<Real>& t) { add_inplace(*dst[k++], t); });
  }
  if (!std::isfinite(out.loss))
    throw ContractViolation("non-finite loss in batch " + std::to_string(batch_id));
  return out;
}

// ---------------------------------------------------------------- optimizer

/// AdamW state covering exactly the trainable elements of a model. Frozen
/// parameters get no moments at all.
template <class Real>
class MaskedAdamW {
 public:
  MaskedAdamW(const ModelParams<Real>& params, const GradientMask& mask) {
    std::size_t idx = 0;
    params.for_each([&](const std::string& name, int block, const BasicTensor<Real>& t) {
      if (name == "shared.token_embed") {
        const std::size_t d = t.cols();
        for (std::size_t r = 0; r < t.rows(); ++r)
          if (mask.token_row(int(r))) slots_.push_back({idx, r * d, d});
      } else if (block == kSharedGroup ? mask.shared : mask.block(std::size_t(block))) {
        slots_.push_back({idx, 0, t.size()});
      }
      ++idx;
    });
    for (auto& s : slots_) {
      s.m1.assign(s.count, Real(0));
      s.m2.assign(s.count, Real(0));
      elements_ += s.count;
    }
  }

  /// Number of parameter elements that carry optimizer state.
  std::size_t state_elements() const { return elements_; }

  void step(ModelParams<Real>& params, const ModelParams<Real>& grads, const AdamWHyper& hyper) {
    ++t_;
    std::vector<BasicTensor<Real>*> p;
    std::vector<const BasicTensor<Real>*> g;
    params.for_each([&](const std::string&, int, BasicTensor<Real>& x) { p.push_back(&x); });
    grads.for_each([&](const std::string&, int, const BasicTensor<Real>& x) { g.push_back(&x); });
    for (auto& s : slots_) {
      std::span<Real> ps(p[s.tensor]->data() + s.offset, s.count);
      std::span<const Real> gs(g[s.tensor]->data() + s.offset, s.count);
      adamw_update(ps, gs, std::span<Real>(s.m1), std::span<Real>(s.m2), t_, hyper);
    }
  }

 private:
  struct Slot {
    std::size_t tensor, offset, count;
    std::vector<Real> m1, m2;
  };
  std::vector<Slot> slots_;
  std::size_t elements_ = 0;
  std::int64_t t_ = 0;
};

// ---------------------------------------------------------------- training

struct TrainHyper {
  std::size_t steps = 1000;
  std::size_t batch = 8;
  AdamWHyper adam{};
  std::size_t warmup = 0;     // linear learning-rate warmup steps
  bool cosine = false;        // cosine decay to 10% of lr after warmup
  double clip_norm = 0;       // global gradient-norm clip; 0 disables
  double divergence = 1e3;    // abort when loss > divergence * initial loss
};

struct TrainLogRow {
  std::size_t step;
  double loss;
  double step_time_ms;
  std::size_t updated_param_count;
};

struct TrainLog {
  std::vector<TrainLogRow> rows;
  std::size_t optimizer_state_elements = 0;

  double mean_loss(std::size_t first, std::size_t last) const {
    double s = 0;
    for (std::size_t i = first; i < last; ++i) s += rows.at(i).loss;
    return s / double(last - first);
  }

  void write_csv(std::ostream& os) const {
    os << "step,loss,step_time_ms,updated_param_count\n";
    for (const auto& r : rows) {
      os << r.step << ',' << format_real(r.loss) << ',' << format_real(r.step_time_ms) << ','
         << r.updated_param_count << '\n';
    }
  }
};

class Diverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <class Real>
struct TrainResult {
  ModelParams<Real> params;
  TrainLog log;
};

template <class Real>
double gradient_norm(const ModelParams<Real>& g) {
  double s = 0;
  g.for_each([&](const std::string&, int, const BasicTensor<Real>& t) { s += double(squared_norm(std::span<const Real>(t.storage()))); });
  return std::sqrt(s);
}

/// Draws one training batch: examples uniformly with replacement, noise
/// standard normal, t uniform on [0,1] (flow) or on the discrete grid (epsilon).
template <class Real>
std::vector<TrainItem<Real>> draw_batch(const std::vector<Example<Real>>& data, const Objective& obj,
                                        std::size_t batch, Rng rng) {
  std::vector<TrainItem<Real>> items;
  items.reserve(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    const auto& ex = data[rng.below(data.size())];
    TrainItem<Real> it;
    it.clean = ex.image;
    it.prompt = ex.prompt;
    it.noise = rng_normal<Real>(rng, ex.image.shape());
    it.t = obj.kind == ObjectiveKind::flow_matching ? rng.uniform() : obj.time_of(1 + rng.below(obj.steps));
    items.push_back(std::move(it));
  }
  return items;
}

/// Trains the mask-selected parameters with AdamW. Parameters outside the mask
/// are never written and carry no optimizer state. `on_step` (optional) sees
/// every logged row; training ends early once `stop(step, params)` returns true.
template <class Real>
TrainResult<Real> train(ModelParams<Real> params, const std::vector<Example<Real>>& data, const Objective& obj,
                        const GradientMask& mask, const TrainHyper& hyper, std::uint64_t seed,
                        const std::function<void(const TrainLogRow&)>& on_step = {},
                        const std::function<bool(std::size_t, const ModelParams<Real>&)>& stop = {}) {
  require(!data.empty(), "train: empty dataset");
  require(!mask.empty(), "train: gradient mask selects no parameters");
  require(hyper.batch >= 1, "train: batch size must be >= 1");
  TrainResult<Real> out;
  MaskedAdamW<Real> opt(params, mask);
  out.log.optimizer_state_elements = opt.state_elements();
  Rng root(seed);
  double initial = -1;
  for (std::size_t step = 1; step <= hyper.steps; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    auto batch = draw_batch(data, obj, hyper.batch, root.fork(step));
    auto lg = loss_and_grads(params, batch, obj, mask, std::int64_t(step));
    if (initial < 0) initial = lg.loss;
    if (lg.loss > hyper.divergence * initial)
      throw Diverged("training diverged at step " + std::to_string(step) + ": loss " + format_real(lg.loss) +
                     " > " + format_real(hyper.divergence) + " x initial " + format_real(initial));
    if (hyper.clip_norm > 0) {
      const double norm = gradient_norm(lg.grads);
      if (norm > hyper.clip_norm) {
        const Real s = Real(hyper.clip_norm / norm);
        lg.grads.for_each([&](const std::string&, int, BasicTensor<Real>& t) {
          for (auto& v : t.storage()) v *= s;
        });
      }
    }
    AdamWHyper h = hyper.adam;
    if (hyper.warmup > 0 && step <= hyper.warmup) h.lr *= double(step) / double(hyper.warmup);
    if (hyper.cosine && step > hyper.warmup) {
      const double frac = double(step - hyper.warmup) / double(std::max<std::size_t>(1, hyper.steps - hyper.warmup));
      h.lr *= 0.1 + 0.45 * (1.0 + std::cos(3.141592653589793 * frac));
    }
    opt.step(params, lg.grads, h);
    const auto t1 = std::chrono::steady_clock::now();
    TrainLogRow row{step, lg.loss, std::chrono::duration<double, std::milli>(t1 - t0).count(),
                    opt.state_elements()};
    out.log.rows.push_back(row);
    if (on_step) on_step(row);
    if (stop && stop(step, params)) break;
  }
  out.params = std::move(params);
  return out;
}

// ---------------------------------------------------------------- sampling

struct SamplerConfig {
  std::size_t steps = 50;
  std::uint64_t seed = 0;
  bool keep_latents = true;
  bool keep_traces = false;
};

template <class Real>
struct GenerationRecord {
  std::uint64_t seed = 0;
  Prompt prompt;
  std::vector<std::size_t> blocks;              // intervened blocks, empty for plain sampling
  std::vector<double> times;                    // model time at each step
  std::vector<BasicTensor<Real>> latents;       // initial noise, then the state after every step
  BasicTensor<Real> image;
  std::vector<AttentionTrace<Real>> traces;     // per step, when requested
};

/// Per-step controls for a generation. `routing(step)` may redirect text into
/// selected blocks; `observe(step, t, trace)` receives the trace of each step
/// (traces are only captured when an observer is set or traces are kept).
template <class Real>
struct SampleHooks {
  std::function<const TextRouting<Real>*(std::size_t)> routing;
  std::function<void(std::size_t, double, const AttentionTrace<Real>&)> observe;
};

/// Deterministic generation: Euler ODE integration of the learned velocity
/// (flow) or strided ancestral sampling (epsilon, DDIM with eta = 1). The
/// initial noise is Rng(seed).fork(0); ancestral step k draws from fork(1 + k).
template <class Real>
GenerationRecord<Real> sample(const ModelParams<Real>& params, const Prompt& prompt, const Objective& obj,
                              const SamplerConfig& sc, const SampleHooks<Real>& hooks = {}) {
  require(sc.steps >= 1, "sampler needs at least one step");
  const ModelConfig& cfg = params.config;
  require(prompt.tokens.size() == cfg.text_len, "prompt length does not match the model");
  GenerationRecord<Real> rec;
  rec.seed = sc.seed;
  rec.prompt = prompt;
  const Rng root(sc.seed);
  Rng noise_rng = root.fork(0);
  BasicTensor<Real> x = rng_normal<Real>(noise_rng, {cfg.channels, cfg.image_size, cfg.image_size});
  if (sc.keep_latents) rec.latents.push_back(x);
  const bool want_trace = sc.keep_traces || bool(hooks.observe);

  auto predict = [&](std::size_t k, double t) {
    AttentionTrace<Real> trace;
    const TextRouting<Real>* routing = hooks.routing ? hooks.routing(k) : nullptr;
    auto pred = forward(params, x, prompt, t, want_trace ? &trace : nullptr, routing);
    rec.times.push_back(t);
    if (hooks.observe) hooks.observe(k, t, trace);
    if (sc.keep_traces) rec.traces.push_back(std::move(trace));
    return pred;
  };

  if (obj.kind == ObjectiveKind::flow_matching) {
    const Real dt = Real(1.0 / double(sc.steps));
    for (std::size_t k = 0; k < sc.steps; ++k) {
      const double t = double(k) / double(sc.steps);
      auto v = predict(k, t);
      axpy(dt, v, x);
      if (sc.keep_latents) rec.latents.push_back(x);
    }
  } else {
    const std::size_t n_total = obj.steps;
    const std::size_t s = std::min(sc.steps, n_total);
    for (std::size_t k = 0; k < s; ++k) {
      const std::size_t n = std::size_t(std::lround(double(n_total) * double(s - k) / double(s)));
      const std::size_t n_prev = std::size_t(std::lround(double(n_total) * double(s - k - 1) / double(s)));
      const double ab = obj.alpha_bar[n], ab_prev = obj.alpha_bar[n_prev];
      auto eps = predict(k, obj.time_of(n));
      const double sigma =
          n_prev == 0 ? 0.0 : std::sqrt((1.0 - ab_prev) / (1.0 - ab)) * std::sqrt(1.0 - ab / ab_prev);
      const double dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
      Rng step_rng = root.fork(1 + k);
      for (std::size_t i = 0; i < x.size(); ++i) {
        double x0 = (double(x[i]) - std::sqrt(1.0 - ab) * double(eps[i])) / std::sqrt(ab);
        x0 = std::clamp(x0, -1.0, 1.0);
        double next = std::sqrt(ab_prev) * x0 + dir * double(eps[i]);
        if (sigma > 0) next += sigma * step_rng.normal();
        x[i] = Real(next);
      }
      if (sc.keep_latents) rec.latents.push_back(x);
    }
  }
  rec.image = std::move(x);
  return rec;
}

}  // namespace ditprobe
