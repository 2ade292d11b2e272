// Command-line front end: each subcommand reads checkpoints and a world
// description, writes its outputs into a fresh run directory together with the
// resolved configuration that reproduces them.
#pragma once

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "ditprobe/apps.hpp"
#include "ditprobe/eval.hpp"
#include "ditprobe/intervene.hpp"
#include "ditprobe/io.hpp"
#include "ditprobe/pipeline.hpp"
#include "ditprobe/probe.hpp"
#include "ditprobe/world.hpp"

namespace ditprobe::cli {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- heatmap

struct Heatmap {
  std::size_t layers = 0;
  std::size_t k = 0;
  std::size_t n_reports = 0;
  std::vector<double> frequency;  // share of reports selecting each block

  CsvTable table() const {
    CsvTable t({"block_index", "frequency", "k", "n_reports"});
    for (std::size_t b = 0; b < layers; ++b) t.row() << b << frequency[b] << k << n_reports;
    return t;
  }

  /// 1 x L strip, white at frequency 0 to red at 1; `cell` pixels per block.
  Tensor image(std::size_t cell = 1) const {
    Tensor img({3, cell, layers * cell});
    for (std::size_t b = 0; b < layers; ++b) {
      const double f = frequency[b];
      const double rgb[3] = {1.0, 1.0 - f, 1.0 - f};
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < cell; ++y)
          for (std::size_t x = 0; x < cell; ++x) img[(c * cell + y) * layers * cell + b * cell + x] = 2.0 * rgb[c] - 1.0;
    }
    return img;
  }
};

/// Per-block selection frequency of the top floor(k_fraction * L) blocks
/// across reports, reselected from each report's scores.
inline Heatmap emit_heatmap(const std::vector<LocalizationReport>& reports, double k_fraction = 0.40) {
  require(!reports.empty(), "heatmap needs at least one report");
  Heatmap h;
  h.layers = reports.front().layers;
  h.n_reports = reports.size();
  for (const auto& r : reports) require(r.layers == h.layers, "heatmap over reports with different layer counts");
  h.k = k_from_fraction(h.layers, k_fraction);
  h.frequency.assign(h.layers, 0.0);
  if (h.k == 0) return h;
  for (const auto& r : reports)
    for (auto b : select_top_k(r.scores, h.k).blocks) h.frequency[b] += 1.0;
  for (auto& f : h.frequency) f /= double(reports.size());
  return h;
}

// ---------------------------------------------------------------- run directories

/// 64-bit FNV-1a, rendered as 8 hex digits of its low word.
inline std::string short_hash(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%08llx", static_cast<unsigned long long>(h & 0xffffffffULL));
  return buf;
}

inline std::string utc_stamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
  return buf;
}

/// Output directory owned by this process for as long as its lock file exists.
/// The lock is removed by finish(); a failed run keeps it.
class RunDir {
 public:
  RunDir(const fs::path& root, const std::string& snapshot) {
    fs::create_directories(root);
    const std::string base = "run-" + utc_stamp() + "-" + short_hash(snapshot);
    for (int n = 0;; ++n) {
      path_ = root / (n == 0 ? base : base + "-" + std::to_string(n));
      if (fs::create_directory(path_)) break;
      if (n > 1000) throw IoError("cannot create a run directory under " + root.string());
    }
    lock_ = path_ / ".lock";
    std::FILE* f = std::fopen(lock_.c_str(), "wx");
    if (!f) throw IoError("run directory " + path_.string() + " is locked by another process");
    std::fclose(f);
    write_text_file(path_ / "config.ini", snapshot);
  }

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }
  void finish() { fs::remove(lock_); }

 private:
  fs::path path_, lock_;
};

inline bool run_finished(const fs::path& dir) { return fs::exists(dir / "config.ini") && !fs::exists(dir / ".lock"); }

// ---------------------------------------------------------------- world files

inline Manifest world_manifest(const World& w) {
  Manifest m;
  m.set("kind", "ditprobe.world");
  m.set("seed", w.seed);
  m.set("image_size", w.config.image_size);
  m.set("n_concepts", w.config.n_concepts);
  m.set("n_subjects", w.config.n_subjects);
  m.set("max_vocab", w.config.max_vocab);
  m.set("jitter", w.config.jitter);
  return m;
}

inline World load_world(const fs::path& path) {
  const Manifest m = Manifest::parse(read_text_file(path));
  if (m.get("kind") != "ditprobe.world") throw IoError(path.string() + " is not a world file");
  WorldConfig c;
  c.image_size = m.get_size("image_size");
  c.n_concepts = m.get_size("n_concepts");
  c.n_subjects = m.get_size("n_subjects");
  c.max_vocab = m.get_size("max_vocab");
  c.jitter = m.get_real("jitter");
  return build_world(c, std::stoull(m.get("seed")));
}

/// A class id given as a number or as its concept name.
inline std::size_t resolve_class(const World& w, const std::string& text) {
  if (!text.empty() && text.find_first_not_of("0123456789") == std::string::npos) {
    const std::size_t id = std::stoull(text);
    require(id < w.class_count(), "class id " + text + " out of range");
    return id;
  }
  for (const auto& c : w.concepts)
    if (c.name == text) return c.class_id;
  throw ContractViolation("unknown concept '" + text + "'");
}

inline std::vector<std::size_t> parse_index_list(const std::string& text) {
  std::vector<std::size_t> out;
  std::istringstream is(text);
  std::string part;
  while (std::getline(is, part, ';')) {
    if (part.empty()) continue;
    require(part.find_first_not_of("0123456789") == std::string::npos, "bad index '" + part + "' in list");
    out.push_back(std::stoull(part));
  }
  return out;
}

inline BlockSet parse_blocks(const std::string& text) { return {parse_index_list(text)}; }

// ---------------------------------------------------------------- checkpoints

inline Manifest model_extras(ObjectiveKind k, std::size_t epsilon_steps = 100) {
  Manifest m;
  m.set("objective", objective_name(k));
  m.set("epsilon_steps", epsilon_steps);
  return m;
}

inline Objective objective_from(const Manifest& m) {
  if (!m.has("objective")) return Objective::flow();
  const std::size_t n = m.has("epsilon_steps") ? m.get_size("epsilon_steps") : 100;
  return Objective::of(parse_objective(m.get("objective")), n);
}

template <class P>
struct RealOf;
template <class Real>
struct RealOf<ModelParams<Real>> {
  using type = Real;
};
template <class P>
using real_t = typename RealOf<std::decay_t<P>>::type;

/// Loads a model checkpoint in its stored precision and calls
/// f(params, objective, manifest).
template <class F>
void with_model(const fs::path& path, F&& f) {
  const std::string bytes = read_text_file(path);
  const std::string dt = checkpoint_dtype(bytes);
  if (dt == "f32") {
    const auto ck = decode_checkpoint<float>(bytes);
    const auto p = params_from_checkpoint(ck);
    f(p, objective_from(ck.manifest), ck.manifest);
  } else {
    const auto ck = decode_checkpoint<double>(bytes);
    const auto p = params_from_checkpoint(ck);
    f(p, objective_from(ck.manifest), ck.manifest);
  }
}

inline ClassifierParams load_classifier(const fs::path& path) {
  return classifier_from_checkpoint(load_checkpoint<double>(path));
}

inline double to_ms(double seconds) { return seconds * 1e3; }

// ---------------------------------------------------------------- snapshot

/// Resolved configuration of the parsed command: top-level options, then one
/// section per subcommand on the chain, every option with its final value.
inline std::string resolved_snapshot(const CLI::App& app) {
  std::string s = "# resolved configuration\n";
  std::vector<const CLI::App*> chain{&app};
  while (true) {
    const auto subs = chain.back()->get_subcommands();
    if (subs.empty()) break;
    chain.push_back(subs.front());
  }
  std::string section;
  for (const auto* a : chain) {
    if (a != &app) {
      section += (section.empty() ? "" : ".") + a->get_name();
      s += "[" + section + "]\n";
    }
    for (const CLI::Option* o : a->get_options()) {
      if (o == a->get_help_ptr() || o == app.get_config_ptr() || o->get_single_name().empty()) continue;
      std::string v = o->count() ? o->results().back() : o->get_default_str();
      if (o->get_expected_max() == 0 && v.empty()) v = "false";
      s += o->get_single_name() + "=\"" + v + "\"\n";
    }
  }
  return s;
}

// ---------------------------------------------------------------- settings

struct SamplerOptions {
  std::size_t steps = 25;
  std::uint64_t seed = 0;

  void add(CLI::App* app) {
    app->add_option("--sampler-steps", steps, "sampling steps per generation")->check(CLI::PositiveNumber);
  }
  SamplerConfig config() const { return {steps, seed, false, false}; }
};

struct WorldMake {
  WorldConfig config;
  std::uint64_t seed = 1;
};

struct TrainSettings {
  std::string world, variant = "cross_attn", objective = "flow_matching", precision = "f64", cross_blocks;
  std::size_t layers = 0, d_model = 64, heads = 4, patch = 4, steps = 8000, batch = 16, warmup = 200,
              render_seeds = 2, epsilon_steps = 100;
  double lr = 1e-3, clip = 1.0;
  bool no_cosine = false;
  std::uint64_t init_seed = 1, data_seed = 2, train_seed = 3;
};

struct ClassifierSettings {
  std::string world;
  std::uint64_t seed = 5;
  ClassifierTrainHyper hyper;
  double gate = 0.99;
};

/// Prompt-pair and probe settings shared by the localization commands.
struct ProbeSettings {
  std::string model, world, classifier, concept_name = "all", timesteps = "all";
  std::size_t n_train = 20, n_eval = 30, k = 0, seeds = 2, eval_seeds = 2;
  double k_fraction = 0.40;
  std::uint64_t prompt_seed = 7, seed_base = 1000, eval_seed_base = 5000;
  bool max_normalize = false;
  std::string extra_ks;
  SamplerOptions sampler;

  void add(CLI::App* app, bool concept_required) {
    app->add_option("--model", model, "model checkpoint")->required();
    app->add_option("--world", world, "world file from `world make`")->required();
    auto* c = app->add_option("--concept", concept_name, "class id or concept name");
    if (concept_required) c->required();
    app->add_option("--n-train", n_train, "train prompts per concept");
    app->add_option("--n-eval", n_eval, "eval prompts per concept");
    app->add_option("--prompt-seed", prompt_seed, "prompt-pair split seed");
    app->add_option("--k", k, "block count; 0 means floor(k-fraction * L)");
    app->add_option("--k-fraction", k_fraction, "K as a fraction of the block count")->check(CLI::Range(0.0, 1.0));
    app->add_option("--seeds", seeds, "probe generations per train prompt")->check(CLI::PositiveNumber);
    app->add_option("--eval-seeds", eval_seeds, "generations per eval prompt")->check(CLI::PositiveNumber);
    app->add_option("--seed-base", seed_base, "first probe seed");
    app->add_option("--eval-seed-base", eval_seed_base, "first eval seed");
    app->add_option("--timesteps", timesteps, "all | single:<n> | subset:<n;n;...>");
    app->add_flag("--max-normalize", max_normalize, "divide each record by its largest block score");
    sampler.add(app);
  }

  std::size_t resolve_k(std::size_t layers) const {
    const std::size_t r = k ? k : k_from_fraction(layers, k_fraction);
    require(r >= 1 && r <= layers, "K=" + std::to_string(r) + " outside [1, " + std::to_string(layers) + "]");
    return r;
  }

  LocalizeConfig localize_config() const {
    LocalizeConfig c;
    c.n_seeds = seeds;
    c.eval_seeds = eval_seeds;
    c.seed_base = seed_base;
    c.eval_seed_base = eval_seed_base;
    c.aggregate.timesteps = TimestepPolicy::parse(timesteps);
    c.aggregate.max_normalize = max_normalize;
    c.sampler = sampler.config();
    c.extra_ks = parse_index_list(extra_ks);
    return c;
  }

  std::vector<std::size_t> concepts(const World& w) const {
    if (concept_name == "all") return w.regular_concepts();
    return {resolve_class(w, concept_name)};
  }
};

struct InterveneSettings {
  std::string model, world, concept_name, blocks, from_report;
  std::size_t context = 0, k = 0;
  double k_fraction = 0.40;
  std::uint64_t seed = 0;
  SamplerOptions sampler;
};

struct SweepSettings {
  ProbeSettings probe;
  std::string ks = "all", from_report;
};

struct BruteSettings {
  ProbeSettings probe;
  std::string from_report;
  std::size_t max_prompts = 4, metric_seeds = 1;
};

struct FinetuneSettings {
  std::string model, world, classifier, target, blocks;
  std::size_t k = 0, steps = 400, batch = 4, warmup = 0, check_every = 0, images = 4, heldout = 10, triplets = 20,
              probe_seeds = 1, eval_seeds = 2, sibling_contexts = 5, unrelated = 40, monitor = 10;
  double lr = 1e-3, clip = 1.0, stop_at = 0;
  bool full = false;
  std::uint64_t seed = 11;
  SamplerOptions sampler;

  void add(CLI::App* app) {
    app->add_option("--model", model, "base model checkpoint")->required();
    app->add_option("--world", world, "world file")->required();
    app->add_option("--classifier", classifier, "classifier checkpoint")->required();
    app->add_option("--k", k, "block count; 0 means the scaled default");
    app->add_option("--blocks", blocks, "explicit block list a;b;c (overrides probing)");
    app->add_flag("--full", full, "update every block");
    app->add_option("--steps", steps, "maximum fine-tune steps");
    app->add_option("--batch", batch);
    app->add_option("--lr", lr);
    app->add_option("--warmup", warmup);
    app->add_option("--clip", clip, "gradient-norm clip; 0 disables");
    app->add_option("--stop-at", stop_at, "stop once the monitor metric reaches this value; 0 disables");
    app->add_option("--check-every", check_every, "monitor interval in steps");
    app->add_option("--seed", seed);
    app->add_option("--probe-seeds", probe_seeds, "probe generations per prompt for block selection");
    app->add_option("--eval-seeds", eval_seeds, "generations per eval prompt");
    app->add_option("--sibling-contexts", sibling_contexts);
    app->add_option("--unrelated", unrelated, "generations per Frechet set");
    app->add_option("--monitor", monitor, "prompts used by the early-stop monitor");
    sampler.add(app);
  }

  FinetuneHyper hyper() const {
    FinetuneHyper h;
    h.train.steps = steps;
    h.train.batch = batch;
    h.train.adam.lr = lr;
    h.train.warmup = warmup;
    h.train.clip_norm = clip;
    h.check_every = check_every;
    h.target = stop_at;
    return h;
  }

  AppEval eval() const {
    AppEval e;
    e.sampler = sampler.config();
    e.seeds = eval_seeds;
    e.sibling_contexts = sibling_contexts;
    e.unrelated = unrelated;
    e.monitor_prompts = monitor;
    return e;
  }
};

// ---------------------------------------------------------------- commands

inline void cmd_world_make(const WorldMake& s, RunDir& dir, std::ostream& out) {
  const World w = build_world(s.config, s.seed);
  write_text_file(dir / "world.txt", world_manifest(w).text());
  CsvTable vocab({"token", "text"});
  for (std::size_t i = 0; i < w.vocab.size(); ++i) vocab.row() << i << w.vocab[i];
  vocab.write(dir / "vocab.csv");
  CsvTable concepts({"class_id", "name", "category", "token", "anchor", "subject"});
  fs::create_directories(dir / "renders");
  for (const auto& c : w.concepts) {
    concepts.row() << c.class_id << c.name << category_name(c.category) << c.token << int(c.is_anchor)
                   << int(c.is_subject);
    write_ppm(dir / ("renders/" + c.name + ".ppm"), render<double>(w, c.class_id, 0, 0));
  }
  concepts.write(dir / "concepts.csv");
  out << "world: " << w.class_count() << " classes, vocabulary " << w.vocab_size() << "\n";
}

inline void cmd_classifier_train(const ClassifierSettings& s, RunDir& dir, std::ostream& out) {
  const World w = load_world(s.world);
  ClassifierTrainLog log;
  const auto clf = train_classifier(w, s.seed, s.hyper, &log);
  CsvTable lt({"epoch", "loss"});
  for (std::size_t e = 0; e < log.epoch_loss.size(); ++e) lt.row() << e << log.epoch_loss[e];
  lt.write(dir / "classifier_log.csv");
  const auto acc = evaluate_classifier(clf, clean_render_set(w, 1, 0x68656c646f7574));
  CsvTable at({"head", "accuracy"});
  static const char* heads[] = {"concept", "background", "position", "size"};
  for (std::size_t h = 0; h < kHeads; ++h) at.row() << heads[h] << acc.per_head[h];
  at.write(dir / "accuracy.csv");
  Manifest extra;
  extra.set("world_seed", w.seed);
  extra.set("train_seed", s.seed);
  save_checkpoint(dir / "classifier.ckpt", classifier_checkpoint(clf, extra));
  out << "held-out clean accuracy (min over heads): " << format_real(acc.min()) << "\n";
  if (!s.hyper.shuffle_labels) enforce_classifier_gate(clf, w, s.gate);
}

template <class Real>
void train_and_save(const World& w, const BaseTraining& bt, const TrainSettings& s, RunDir& dir, std::ostream& out) {
  auto res = train_base_model<Real>(w, bt, [&](const TrainLogRow& r) {
    if (r.step % 500 == 0) out << "step " << r.step << " loss " << format_real(r.loss) << "\n";
  });
  save_model(dir / "model.ckpt", res.params, model_extras(bt.objective, s.epsilon_steps));
  std::ostringstream os;
  res.log.write_csv(os);
  write_text_file(dir / "train_log.csv", os.str());
  out << "checksum " << params_checksum(res.params) << "\n";
}

inline void cmd_train(const TrainSettings& s, RunDir& dir, std::ostream& out) {
  const World w = load_world(s.world);
  BaseTraining bt = BaseTraining::defaults(w, parse_variant(s.variant));
  if (s.layers) bt.model.layers = s.layers;
  bt.model.d_model = s.d_model;
  bt.model.heads = s.heads;
  bt.model.patch = s.patch;
  bt.model.image_size = w.config.image_size;
  bt.model.cross_blocks = parse_index_list(s.cross_blocks);
  bt.model.validate();
  bt.objective = parse_objective(s.objective);
  bt.hyper.steps = s.steps;
  bt.hyper.batch = s.batch;
  bt.hyper.adam.lr = s.lr;
  bt.hyper.warmup = s.warmup;
  bt.hyper.cosine = !s.no_cosine;
  bt.hyper.clip_norm = s.clip;
  bt.render_seeds = s.render_seeds;
  bt.init_seed = s.init_seed;
  bt.data_seed = s.data_seed;
  bt.train_seed = s.train_seed;
  require(bt.objective == ObjectiveKind::flow_matching || s.epsilon_steps == 100,
          "epsilon models train on the 100-step schedule");
  if (s.precision == "f32")
    train_and_save<float>(w, bt, s, dir, out);
  else
    train_and_save<double>(w, bt, s, dir, out);
}

inline void write_report(const LocalizationReport& r, const fs::path& sub) {
  fs::create_directories(sub);
  write_text_file(sub / "report.txt", r.manifest().text());
  r.scores.table().write(sub / "scores.csv");
  if (r.verified) r.removal_table().write(sub / "removal.csv");
}

inline void cmd_localize(const ProbeSettings& s, RunDir& dir, std::ostream& out) {
  const World w = load_world(s.world);
  std::optional<ClassifierParams> clf;
  if (!s.classifier.empty()) clf = load_classifier(s.classifier);
  const Judge judge{&w, clf ? &*clf : nullptr};
  with_model(s.model, [&](const auto& params, const Objective& obj, const Manifest&) {
    const std::size_t k = s.resolve_k(params.config.layers);
    const LocalizeConfig cfg = s.localize_config();
    CsvTable summary({"concept_id", "name", "k", "blocks", "verified", "knowledge_score", "neutral_score",
                      "threshold", "concept_score", "context_score", "knowledge_context", "removed_fraction"});
    CsvTable timing({"concept_id", "probe_ms"});
    for (auto id : s.concepts(w)) {
      const auto spec = make_prompt_pairs(w, id, s.n_train, s.n_eval, s.prompt_seed);
      const auto rep = localize(params, obj, spec, k, cfg, clf ? &judge : nullptr);
      write_report(rep, dir / ("concept_" + std::to_string(id)));
      auto row = summary.row();
      row << id << w.concepts[id].name << k << rep.blocks.at(k).text() << int(rep.verified);
      if (rep.verified) {
        const auto& m = rep.removal_at(k);
        row << rep.knowledge_score << rep.neutral_score << rep.threshold << m.concept_score << m.context_score
            << rep.knowledge_context << m.removed_fraction;
      } else {
        for (int i = 0; i < 7; ++i) row << "";
      }
      timing.row() << id << to_ms(rep.probe_seconds);
      out << w.concepts[id].name << ": blocks " << rep.blocks.at(k).text() << "\n";
    }
    summary.write(dir / "summary.csv");
    timing.write(dir / "timing.csv");
  });
}

/// Reports of a finished localize run, ordered by concept id.
inline std::vector<LocalizationReport> read_reports(const fs::path& run) {
  require(run_finished(run), run.string() + " is not a finished run directory");
  std::map<std::size_t, LocalizationReport> by_id;
  for (const auto& e : fs::directory_iterator(run)) {
    if (!e.is_directory() || e.path().filename().string().rfind("concept_", 0) != 0) continue;
    auto r = report_from_files(Manifest::parse(read_text_file(e.path() / "report.txt")),
                               read_text_file(e.path() / "scores.csv"));
    by_id.emplace(r.concept_id, std::move(r));
  }
  require(!by_id.empty(), run.string() + " holds no localization reports");
  if (fs::exists(run / "timing.csv")) {
    std::istringstream is(read_text_file(run / "timing.csv"));
    std::string line;
    std::getline(is, line);
    while (std::getline(is, line)) {
      const auto comma = line.find(',');
      if (comma == std::string::npos) continue;
      const auto it = by_id.find(std::stoull(line.substr(0, comma)));
      if (it != by_id.end()) it->second.probe_seconds = std::stod(line.substr(comma + 1)) / 1e3;
    }
  }
  std::vector<LocalizationReport> out;
  for (auto& [id, r] : by_id) out.push_back(std::move(r));
  return out;
}

inline const LocalizationReport& report_for(const std::vector<LocalizationReport>& reports, std::size_t id) {
  for (const auto& r : reports)
    if (r.concept_id == id) return r;
  throw ContractViolation("no localization report for class " + std::to_string(id));
}

inline void cmd_intervene(const InterveneSettings& s, RunDir& dir, std::ostream& out) {
  const World w = load_world(s.world);
  const std::size_t id = resolve_class(w, s.concept_name);
  with_model(s.model, [&](const auto& params, const Objective& obj, const Manifest&) {
    using Real = real_t<decltype(params)>;
    const std::size_t L = params.config.layers;
    BlockSet blocks;
    if (!s.blocks.empty()) {
      blocks = parse_blocks(s.blocks);
    } else {
      require(!s.from_report.empty(), "intervene needs --blocks or --from-report");
      const std::size_t k = s.k ? s.k : k_from_fraction(L, s.k_fraction);
      blocks = select_top_k(report_for(read_reports(s.from_report), id).scores, k);
    }
    const auto& info = w.concepts.at(id);
    require(!info.is_anchor && !info.is_subject, "intervention needs a regular concept");
    InterventionPlan plan{blocks, w.prompt(id, s.context),
                          w.prompt(w.anchor_of(info.category), s.context), s.sampler.config()};
    plan.sampler.seed = s.seed;
    const auto knowledge = sample(params, plan.knowledge, obj, plan.sampler).image;
    const auto neutral = sample(params, plan.neutral, obj, plan.sampler).image;
    const auto intervened = generate_intervened(params, plan, obj).image;
    write_ppm(dir / "knowledge.ppm", knowledge);
    write_ppm(dir / "neutral.ppm", neutral);
    write_ppm(dir / "intervened.ppm", intervened);
    write_text_file(dir / "intervened.txt", intervention_sidecar(plan, blocks.size()));
    auto dist = [](const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
      double s = 0;
      for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(double(a[i]) - double(b[i]));
      return s / double(a.size());
    };
    CsvTable t({"pair", "mean_abs_diff"});
    t.row() << "intervened-knowledge" << dist(intervened, knowledge);
    t.row() << "intervened-neutral" << dist(intervened, neutral);
    t.row() << "knowledge-neutral" << dist(knowledge, neutral);
    t.write(dir / "distances.csv");
    out << "blocks " << blocks.text() << "\n";
  });
}

inline void cmd_sweep_k(const SweepSettings& s, RunDir& dir, std::ostream& out) {
  const World w = load_world(s.probe.world);
  const std::size_t id = resolve_class(w, s.probe.concept_name);
  std::optional<ClassifierParams> clf;
  if (!s.probe.classifier.empty()) clf = load_classifier(s.probe.classifier);
  with_model(s.probe.model, [&](const auto& params, const Objective& obj, const Manifest&) {
    using Real = real_t<decltype(params)>;
    const std::size_t L = params.config.layers;
    const auto spec = make_prompt_pairs(w, id, s.probe.n_train, s.probe.n_eval, s.probe.prompt_seed);
    const LocalizeConfig cfg = s.probe.localize_config();
    LayerScores scores = s.from_report.empty()
                             ? probe_scores(params, obj, spec.train_prompts, detail::seed_list(cfg.seed_base, cfg.n_seeds), cfg)
                             : report_for(read_reports(s.from_report), id).scores;
    require(scores.layers() == L, "report was made for a different block count");
    std::vector<std::size_t> ks;
    if (s.ks == "all") {
      for (std::size_t k = 0; k <= L; ++k) ks.push_back(k);
    } else {
      ks = parse_index_list(s.ks);
    }
    for (auto k : ks) require(k <= L, "K=" + std::to_string(k) + " exceeds the block count");
    const auto seeds = detail::seed_list(cfg.eval_seed_base, cfg.eval_seeds);
    const std::size_t P = spec.eval_prompts.size(), S = seeds.size();
    // Plain knowledge and neutral references per eval prompt and seed.
    std::vector<BasicTensor<Real>> know(P * S), neut(P * S);
    parallel_for(P * S, [&](std::size_t i) {
      SamplerConfig sc = cfg.sampler;
      sc.seed = seeds[i % S];
      know[i] = sample(params, spec.eval_prompts[i / S], obj, sc).image;
      neut[i] = sample(params, spec.eval_neutral[i / S], obj, sc).image;
    });
    CsvTable t({"K", "blocks", "max_abs_diff_knowledge", "max_abs_diff_neutral"});
    for (auto k : ks) {
      const BlockSet blocks = k ? select_top_k(scores, k) : BlockSet{};
      std::vector<double> dk(P * S), dn(P * S);
      parallel_for(P * S, [&](std::size_t i) {
        InterventionPlan plan{blocks, spec.eval_prompts[i / S], spec.eval_neutral[i / S], cfg.sampler};
        plan.sampler.seed = seeds[i % S];
        const auto img = generate_intervened(params, plan, obj).image;
        for (std::size_t j = 0; j < img.size(); ++j) {
          dk[i] = std::max(dk[i], std::abs(double(img[j]) - double(know[i][j])));
          dn[i] = std::max(dn[i], std::abs(double(img[j]) - double(neut[i][j])));
        }
      });
      t.row() << k << blocks.text() << *std::max_element(dk.begin(), dk.end())
              << *std::max_element(dn.begin(), dn.end());
    }
    t.write(dir / "sweep.csv");
    scores.table().write(dir / "scores.csv");
    if (clf) removal_curve_table(removal_curve(params, obj, *clf, w, spec, scores, ks, seeds, cfg.sampler)).write(dir / "removal.csv");
    out << "swept " << ks.size() << " values of K\n";
  });
}

inline void cmd_brute_force(const BruteSettings& s, RunDir& dir, std::ostream& out) {
  const World w = load_world(s.probe.world);
  const std::size_t id = resolve_class(w, s.probe.concept_name);
  std::optional<ClassifierParams> clf;
  if (!s.probe.classifier.empty()) clf = load_classifier(s.probe.classifier);
  const Judge judge{&w, clf ? &*clf : nullptr};
  with_model(s.probe.model, [&](const auto& params, const Objective& obj, const Manifest&) {
    const std::size_t L = params.config.layers;
    const std::size_t k = s.probe.resolve_k(L);
    const auto spec = make_prompt_pairs(w, id, s.probe.n_train, s.probe.n_eval, s.probe.prompt_seed);
    const auto seeds = detail::seed_list(s.probe.eval_seed_base, s.metric_seeds);
    const SamplerConfig sc = s.probe.sampler.config();
    BlockMetric metric;
    if (clf) {
      metric = concept_drop_metric(params, obj, judge, spec, seeds, sc, s.max_prompts);
    } else {
      std::vector<InterventionPlan> plans;
      for (std::size_t i = 0; i < std::min(s.max_prompts, spec.eval_prompts.size()); ++i)
        for (auto seed : seeds) {
          InterventionPlan p{{}, spec.eval_prompts[i], spec.eval_neutral[i], sc};
          p.sampler.seed = seed;
          plans.push_back(p);
        }
      metric = neutral_gap_metric(params, obj, plans);
    }
    metric(BlockSet{});  // baseline generations are shared by every window; keep them out of the timing
    const auto res = brute_force_window_search(params, id, k, metric);
    res.table().write(dir / "windows.csv");
    CsvTable best({"concept_id", "k", "blocks", "metric", "metric_kind"});
    best.row() << id << k << res.best_window().blocks.text() << res.best_window().metric
               << (clf ? "concept_drop" : "neutral_gap");
    best.write(dir / "best.csv");
    CsvTable timing({"concept_id", "search_ms"});
    timing.row() << id << to_ms(res.seconds);
    if (!s.from_report.empty()) {
      const auto reports = read_reports(s.from_report);
      const auto& rep = report_for(reports, id);
      LocalizationReport r = rep;
      if (!r.blocks.count(k)) r.blocks[k] = select_top_k(r.scores, k);
      const auto cmp = compare_localizers(r, res, metric);
      CsvTable c({"concept_id", "k", "probe_blocks", "brute_blocks", "jaccard", "probe_metric", "brute_metric",
                  "metric_gap", "gap_fraction"});
      c.row() << id << k << r.blocks.at(k).text() << res.best_window().blocks.text() << cmp.jaccard
              << cmp.probe_metric << cmp.brute_metric << cmp.metric_gap << cmp.gap_fraction;
      c.write(dir / "comparison.csv");
      timing = CsvTable({"concept_id", "search_ms", "probe_ms"});
      timing.row() << id << to_ms(res.seconds) << to_ms(r.probe_seconds);
      out << "speedup " << format_real(cmp.speedup) << "x, gap fraction " << format_real(cmp.gap_fraction) << "\n";
    }
    timing.write(dir / "timing.csv");
    out << "best window " << res.best_window().blocks.text() << "\n";
  });
}

template <class Real>
void write_finetune(RunDir& dir, const ModelParams<Real>& params, const Objective& obj, const TrainLog& log,
                    const CsvTable& report, const BlockSet& blocks) {
  save_model(dir / "model.ckpt", params, model_extras(obj.kind, obj.kind == ObjectiveKind::flow_matching ? 100 : obj.steps));
  std::ostringstream os;
  log.write_csv(os);
  write_text_file(dir / "train_log.csv", os.str());
  report.write(dir / "report.csv");
  CsvTable b({"blocks"});
  b.row() << blocks.text();
  b.write(dir / "blocks.csv");
}

inline void cmd_personalize(const FinetuneSettings& s, RunDir& dir, std::ostream& out) {
  const World w = load_world(s.world);
  const ClassifierParams clf = load_classifier(s.classifier);
  const Judge judge{&w, &clf};
  with_model(s.model, [&](const auto& params, const Objective& obj, const Manifest&) {
    const std::size_t subject = resolve_class(w, s.target);
    auto task = build_personalization_task(w, params.config, subject, s.seed, s.images, s.heldout);
    task.hyper = s.hyper();
    if (!s.blocks.empty()) {
      task.blocks = parse_blocks(s.blocks);
    } else if (!s.full) {
      LocalizeConfig cfg;
      cfg.n_seeds = s.probe_seeds;
      cfg.sampler = s.sampler.config();
      const auto scores = class_scores(params, obj, w, task.category, task.train_contexts, cfg);
      task.blocks = select_top_k(scores, s.k ? s.k : personalization_k(params.config.layers));
    }
    const auto res = personalize(params, task, obj, judge, s.eval(), s.full);
    write_finetune(dir, res.params, obj, res.report.log, res.report.table(), task.blocks);
    CsvTable timing({"mode", "mean_step_ms"});
    timing.row() << (s.full ? "full" : "localized") << res.report.mean_step_ms;
    timing.write(dir / "timing.csv");
    out << "fidelity " << format_real(res.report.fidelity_before) << " -> " << format_real(res.report.fidelity_after)
        << ", surrounding " << format_real(res.report.surrounding_before) << " -> "
        << format_real(res.report.surrounding_after) << "\n";
  });
}

inline void cmd_unlearn(const FinetuneSettings& s, RunDir& dir, std::ostream& out) {
  const World w = load_world(s.world);
  const ClassifierParams clf = load_classifier(s.classifier);
  const Judge judge{&w, &clf};
  with_model(s.model, [&](const auto& params, const Objective& obj, const Manifest&) {
    UnlearnTask task;
    task.target = resolve_class(w, s.target);
    task.anchor = w.anchor_of(w.concepts.at(task.target).category);
    task.objective = obj.kind;
    task.hyper = s.hyper();
    task.spec = make_prompt_pairs(w, task.target, 20, 30, s.seed);
    task.triplets = build_ablation_triplets(w, params, obj, task.target, s.triplets, s.seed, s.sampler.config());
    if (!s.blocks.empty()) {
      task.blocks = parse_blocks(s.blocks);
    } else if (!s.full) {
      LocalizeConfig cfg;
      cfg.n_seeds = s.probe_seeds;
      cfg.sampler = s.sampler.config();
      const std::size_t k = s.k ? s.k : unlearning_k(params.config.layers);
      task.blocks = localize(params, obj, task.spec, k, cfg).blocks.at(k);
    }
    const auto res = unlearn(params, task, judge, s.eval(), s.full);
    write_finetune(dir, res.params, obj, res.report.log, res.report.table(), task.blocks);
    CsvTable timing({"mode", "mean_step_ms"});
    timing.row() << (s.full ? "full" : "localized") << res.report.mean_step_ms;
    timing.write(dir / "timing.csv");
    out << "identity accuracy " << format_real(res.report.identity_accuracy_before) << " -> "
        << format_real(res.report.identity_accuracy_after) << "\n";
  });
}

inline void cmd_report(const std::string& run, double k_fraction, std::size_t cell, RunDir& dir, std::ostream& out) {
  const auto reports = read_reports(run);
  const Heatmap h = emit_heatmap(reports, k_fraction);
  h.table().write(dir / "heatmap.csv");
  write_ppm(dir / "heatmap.ppm", h.image(cell));
  CsvTable scores({"concept_id", "block_index", "score"});
  for (const auto& r : reports)
    for (std::size_t b = 0; b < r.layers; ++b) scores.row() << r.concept_id << b << r.scores.scores[b];
  scores.write(dir / "scores.csv");
  out << "heatmap over " << reports.size() << " reports at K=" << h.k << "\n";
}

// ---------------------------------------------------------------- entry point

/// Parses argv, runs one subcommand into a fresh run directory and returns the
/// exit code: 0 success, 1 contract violation or runtime failure, 2 bad usage.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"ditprobe: knowledge localization in diffusion transformers", "ditprobe"};
  app.option_defaults()->always_capture_default();
  app.set_config("--config", "", "read settings from an INI file (e.g. a run's config.ini)");
  app.require_subcommand(1);
  std::string out_root = "runs";
  app.add_option("--out", out_root, "directory receiving run directories");

  WorldMake wm;
  auto* world = app.add_subcommand("world", "world description files");
  world->configurable();
  world->require_subcommand(1);
  auto* make = world->add_subcommand("make", "build a concept world and write its description");
  make->configurable();
  make->add_option("--seed", wm.seed);
  make->add_option("--concepts", wm.config.n_concepts, "regular concepts per category");
  make->add_option("--subjects", wm.config.n_subjects, "reserve subjects per category");
  make->add_option("--image-size", wm.config.image_size);
  make->add_option("--jitter", wm.config.jitter, "max glyph offset in pixels");

  TrainSettings ts;
  auto* train_cmd = app.add_subcommand("train", "train a base model on the concept world");
  train_cmd->configurable();
  train_cmd->add_option("--world", ts.world)->required();
  train_cmd->add_option("--variant", ts.variant)->check(CLI::IsMember({"cross_attn", "mmdit"}));
  train_cmd->add_option("--objective", ts.objective)
      ->check(CLI::IsMember({"flow_matching", "epsilon_prediction", "flow", "epsilon"}));
  train_cmd->add_option("--precision", ts.precision)->check(CLI::IsMember({"f64", "f32"}));
  train_cmd->add_option("--layers", ts.layers, "0 means the variant default");
  train_cmd->add_option("--d-model", ts.d_model);
  train_cmd->add_option("--heads", ts.heads);
  train_cmd->add_option("--patch", ts.patch);
  train_cmd->add_option("--cross-blocks", ts.cross_blocks, "blocks with cross-attention a;b;c (planted models)");
  train_cmd->add_option("--steps", ts.steps);
  train_cmd->add_option("--batch", ts.batch);
  train_cmd->add_option("--lr", ts.lr);
  train_cmd->add_option("--warmup", ts.warmup);
  train_cmd->add_flag("--no-cosine", ts.no_cosine);
  train_cmd->add_option("--clip", ts.clip);
  train_cmd->add_option("--render-seeds", ts.render_seeds);
  train_cmd->add_option("--init-seed", ts.init_seed);
  train_cmd->add_option("--data-seed", ts.data_seed);
  train_cmd->add_option("--train-seed", ts.train_seed);

  ClassifierSettings cs;
  auto* clf_cmd = app.add_subcommand("classifier", "evaluation classifier");
  clf_cmd->configurable();
  clf_cmd->require_subcommand(1);
  auto* clf_train = clf_cmd->add_subcommand("train", "train the classifier and enforce its accuracy gate");
  clf_train->configurable();
  clf_train->add_option("--world", cs.world)->required();
  clf_train->add_option("--seed", cs.seed);
  clf_train->add_option("--epochs", cs.hyper.epochs);
  clf_train->add_option("--render-seeds", cs.hyper.render_seeds);
  clf_train->add_option("--noise-fraction", cs.hyper.noise_fraction);
  clf_train->add_flag("--shuffle-labels", cs.hyper.shuffle_labels, "control run with permuted concept labels");
  clf_train->add_option("--gate", cs.gate, "required held-out accuracy");

  ProbeSettings ls;
  auto* loc = app.add_subcommand("localize", "probe blocks that carry a concept");
  loc->configurable();
  ls.add(loc, false);
  loc->add_option("--classifier", ls.classifier, "verify selections by intervention");
  loc->add_option("--extra-ks", ls.extra_ks, "further K values a;b;c");

  BruteSettings bs;
  auto* brute = app.add_subcommand("brute-force", "contiguous circular window search");
  brute->configurable();
  bs.probe.add(brute, true);
  brute->add_option("--classifier", bs.probe.classifier, "score windows by concept-score drop");
  brute->add_option("--from-report", bs.from_report, "localize run to compare against");
  brute->add_option("--max-prompts", bs.max_prompts, "eval prompts per window");
  brute->add_option("--metric-seeds", bs.metric_seeds, "seeds per eval prompt");

  InterveneSettings is;
  auto* inter = app.add_subcommand("intervene", "generate with knowledge withheld from a block set");
  inter->configurable();
  inter->add_option("--model", is.model)->required();
  inter->add_option("--world", is.world)->required();
  inter->add_option("--concept", is.concept_name)->required();
  inter->add_option("--context", is.context)->check(CLI::Range(std::size_t(0), kContexts - 1));
  inter->add_option("--blocks", is.blocks, "block list a;b;c");
  inter->add_option("--from-report", is.from_report, "localize run supplying the blocks");
  inter->add_option("--k", is.k, "top-K from the report; 0 means floor(k-fraction * L)");
  inter->add_option("--k-fraction", is.k_fraction)->check(CLI::Range(0.0, 1.0));
  inter->add_option("--seed", is.seed);
  is.sampler.add(inter);

  SweepSettings ss;
  auto* sweep = app.add_subcommand("sweep-k", "intervene on the top-K blocks for a range of K");
  sweep->configurable();
  ss.probe.add(sweep, true);
  sweep->add_option("--classifier", ss.probe.classifier, "also score the removal curve");
  sweep->add_option("--ks", ss.ks, "K list a;b;c or all (0..L)");
  sweep->add_option("--from-report", ss.from_report, "localize run supplying the scores");

  FinetuneSettings ps;
  auto* pers = app.add_subcommand("personalize", "localized subject personalization");
  pers->configurable();
  ps.add(pers);
  pers->add_option("--subject", ps.target, "reserve subject (class id or name)")->required();
  pers->add_option("--images", ps.images, "subject renders");
  pers->add_option("--heldout", ps.heldout, "held-out contexts");

  FinetuneSettings us;
  us.steps = 300;
  auto* unl = app.add_subcommand("unlearn", "localized concept unlearning");
  unl->configurable();
  us.add(unl);
  unl->add_option("--concept", us.target, "concept to remove (class id or name)")->required();
  unl->add_option("--triplets", us.triplets, "anchor generations used as targets");

  std::string report_run;
  double report_fraction = 0.40;
  std::size_t report_cell = 1;
  auto* rep = app.add_subcommand("report", "frequency heatmap over a localize run");
  rep->configurable();
  rep->add_option("--run", report_run, "finished localize run directory")->required();
  rep->add_option("--k-fraction", report_fraction)->check(CLI::Range(0.0, 1.0));
  rep->add_option("--cell", report_cell, "pixels per heatmap cell")->check(CLI::PositiveNumber);

  std::vector<std::string> args(argv + 1, argv + argc);
  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? 0 : 2;
  }

  try {
    RunDir dir(out_root, resolved_snapshot(app));
    out << "run: " << dir.path().string() << "\n";
    if (make->parsed())
      cmd_world_make(wm, dir, out);
    else if (train_cmd->parsed())
      cmd_train(ts, dir, out);
    else if (clf_train->parsed())
      cmd_classifier_train(cs, dir, out);
    else if (loc->parsed())
      cmd_localize(ls, dir, out);
    else if (brute->parsed())
      cmd_brute_force(bs, dir, out);
    else if (inter->parsed())
      cmd_intervene(is, dir, out);
    else if (sweep->parsed())
      cmd_sweep_k(ss, dir, out);
    else if (pers->parsed())
      cmd_personalize(ps, dir, out);
    else if (unl->parsed())
      cmd_unlearn(us, dir, out);
    else if (rep->parsed())
      cmd_report(report_run, report_fraction, report_cell, dir, out);
    dir.finish();
    return 0;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace ditprobe::cli
