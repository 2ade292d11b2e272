// Evaluation instruments: a small convolutional concept classifier over world
// images, a Fréchet distance over its penultimate features, and the
// threshold rule that decides whether an intervention removed a concept.
//
// Classifier: conv3x3(3->c1) relu avgpool2, conv3x3(c1->c2) relu avgpool2,
// dense(->F) relu, then four linear heads on the F features: concept class,
// background, position, size. Feature maps are stored position-major
// ([pixels, channels]).
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>

#include "ditprobe/numerics.hpp"
#include "ditprobe/parallel.hpp"
#include "ditprobe/world.hpp"

namespace ditprobe {

inline constexpr std::size_t kHeads = 4;
enum Head : std::size_t { head_concept = 0, head_background = 1, head_position = 2, head_size = 3 };

struct ClassifierConfig {
  std::size_t image_size = 32;
  std::size_t channels = 3;
  std::size_t conv1 = 16;
  std::size_t conv2 = 32;
  std::size_t features = 32;
  std::array<std::size_t, kHeads> outputs{0, kBackgrounds, kPositions, kSizes};

  static ClassifierConfig for_world(const World& w) {
    ClassifierConfig c;
    c.image_size = w.config.image_size;
    c.channels = w.config.channels;
    c.outputs[head_concept] = w.class_count();
    return c;
  }
  std::size_t flat() const { return conv2 * (image_size / 4) * (image_size / 4); }
  friend bool operator==(const ClassifierConfig&, const ClassifierConfig&) = default;
};

struct ClassifierParams {
  ClassifierConfig config;
  Tensor conv1_w, conv1_b, conv2_w, conv2_b, fc_w, fc_b;
  std::array<Tensor, kHeads> head_w, head_b;

  template <class F>
  void for_each(F&& f) {
    visit(*this, f);
  }
  template <class F>
  void for_each(F&& f) const {
    visit(*this, f);
  }

 private:
  template <class Self, class F>
  static void visit(Self& s, F& f) {
    f("conv1_w", s.conv1_w);
    f("conv1_b", s.conv1_b);
    f("conv2_w", s.conv2_w);
    f("conv2_b", s.conv2_b);
    f("fc_w", s.fc_w);
    f("fc_b", s.fc_b);
    static const char* names[kHeads] = {"concept", "background", "position", "size"};
    for (std::size_t h = 0; h < kHeads; ++h) {
      f(std::string("head_") + names[h] + "_w", s.head_w[h]);
      f(std::string("head_") + names[h] + "_b", s.head_b[h]);
    }
  }
};

inline ClassifierParams init_classifier(const ClassifierConfig& c, std::uint64_t seed) {
  require(c.image_size % 4 == 0, "classifier needs image_size divisible by 4");
  require(c.outputs[head_concept] >= 2, "classifier needs at least two concept classes");
  ClassifierParams p;
  p.config = c;
  Rng rng = Rng(seed).fork(0x636c66);
  auto gauss = [&](Shape s, std::size_t fan_in) {
    Tensor t = rng_normal<double>(rng, std::move(s));
    const double sd = std::sqrt(2.0 / double(fan_in));
    for (auto& v : t.storage()) v *= sd;
    return t;
  };
  p.conv1_w = gauss({c.conv1, 9 * c.channels}, 9 * c.channels);
  p.conv1_b = Tensor({c.conv1});
  p.conv2_w = gauss({c.conv2, 9 * c.conv1}, 9 * c.conv1);
  p.conv2_b = Tensor({c.conv2});
  p.fc_w = gauss({c.flat(), c.features}, c.flat());
  p.fc_b = Tensor({c.features});
  for (std::size_t h = 0; h < kHeads; ++h) {
    p.head_w[h] = gauss({c.features, c.outputs[h]}, c.features);
    for (auto& v : p.head_w[h].storage()) v *= 0.5;
    p.head_b[h] = Tensor({c.outputs[h]});
  }
  return p;
}

namespace detail {

/// [H*W, C] feature map -> [H*W, 9*C] patches, zero padded; column order (ky, kx, c).
inline Tensor im2col(const Tensor& x, std::size_t n, std::size_t ch) {
  Tensor cols({n * n, 9 * ch});
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t xx = 0; xx < n; ++xx) {
      double* dst = cols.data() + (y * n + xx) * 9 * ch;
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx, dst += ch) {
          const long sy = long(y) + ky - 1, sx = long(xx) + kx - 1;
          if (sy < 0 || sx < 0 || sy >= long(n) || sx >= long(n)) continue;
          const double* src = x.data() + (std::size_t(sy) * n + std::size_t(sx)) * ch;
          std::copy(src, src + ch, dst);
        }
    }
  return cols;
}

inline Tensor col2im(const Tensor& cols, std::size_t n, std::size_t ch) {
  Tensor x({n * n, ch});
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t xx = 0; xx < n; ++xx) {
      const double* src = cols.data() + (y * n + xx) * 9 * ch;
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx, src += ch) {
          const long sy = long(y) + ky - 1, sx = long(xx) + kx - 1;
          if (sy < 0 || sx < 0 || sy >= long(n) || sx >= long(n)) continue;
          double* dst = x.data() + (std::size_t(sy) * n + std::size_t(sx)) * ch;
          for (std::size_t c = 0; c < ch; ++c) dst[c] += src[c];
        }
    }
  return x;
}

inline Tensor avgpool2(const Tensor& x, std::size_t n, std::size_t ch) {
  const std::size_t m = n / 2;
  Tensor y({m * m, ch});
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < m; ++c)
      for (std::size_t dy = 0; dy < 2; ++dy)
        for (std::size_t dx = 0; dx < 2; ++dx) {
          const double* src = x.data() + ((2 * r + dy) * n + 2 * c + dx) * ch;
          double* dst = y.data() + (r * m + c) * ch;
          for (std::size_t k = 0; k < ch; ++k) dst[k] += 0.25 * src[k];
        }
  return y;
}

inline Tensor avgpool2_backward(const Tensor& dy, std::size_t n, std::size_t ch) {
  const std::size_t m = n / 2;
  Tensor dx({n * n, ch});
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < m; ++c)
      for (std::size_t a = 0; a < 2; ++a)
        for (std::size_t b = 0; b < 2; ++b) {
          const double* src = dy.data() + (r * m + c) * ch;
          double* dst = dx.data() + ((2 * r + a) * n + 2 * c + b) * ch;
          for (std::size_t k = 0; k < ch; ++k) dst[k] = 0.25 * src[k];
        }
  return dx;
}

inline void add_bias_relu(Tensor& x, const Tensor& b) {
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = x.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] = std::max(0.0, row[c] + b[c]);
  }
}

}  // namespace detail

struct ClassifierCache {
  Tensor cols1, act1, pool1, cols2, act2, flat, features;
};

struct ClassifierOutput {
  Tensor features;                     // [F]
  std::array<Tensor, kHeads> logits;   // one row each
};

/// Runs the classifier on one [channels, size, size] image.
inline ClassifierOutput classify(const ClassifierParams& p, const Tensor& image, ClassifierCache* cache = nullptr) {
  const auto& c = p.config;
  const std::size_t n = c.image_size;
  require(image.size() == c.channels * n * n, "classifier input has shape " + shape_string(image.shape()));
  ClassifierCache local;
  ClassifierCache& k = cache ? *cache : local;
  Tensor x({n * n, c.channels});
  for (std::size_t ch = 0; ch < c.channels; ++ch)
    for (std::size_t i = 0; i < n * n; ++i) x(i, ch) = image[ch * n * n + i];
  k.cols1 = detail::im2col(x, n, c.channels);
  gemm(k.cols1, false, p.conv1_w, true, k.act1);
  detail::add_bias_relu(k.act1, p.conv1_b);
  k.pool1 = detail::avgpool2(k.act1, n, c.conv1);
  k.cols2 = detail::im2col(k.pool1, n / 2, c.conv1);
  gemm(k.cols2, false, p.conv2_w, true, k.act2);
  detail::add_bias_relu(k.act2, p.conv2_b);
  Tensor pool2 = detail::avgpool2(k.act2, n / 2, c.conv2);
  k.flat = pool2;
  k.flat.reshape({1, pool2.size()});
  gemm(k.flat, false, p.fc_w, false, k.features);
  detail::add_bias_relu(k.features, p.fc_b);
  ClassifierOutput out;
  out.features = k.features;
  for (std::size_t h = 0; h < kHeads; ++h) {
    gemm(k.features, false, p.head_w[h], false, out.logits[h]);
    add_inplace(out.logits[h], p.head_b[h]);
  }
  return out;
}

/// Accumulates parameter gradients given d(loss)/d(logits) for each head.
inline void classifier_backward(const ClassifierParams& p, const ClassifierCache& k,
                                const std::array<Tensor, kHeads>& d_logits, ClassifierParams& g) {
  const auto& c = p.config;
  const std::size_t n = c.image_size;
  Tensor d_feat({1, c.features});
  for (std::size_t h = 0; h < kHeads; ++h) {
    gemm(k.features, true, d_logits[h], false, g.head_w[h], true);
    add_inplace(g.head_b[h], d_logits[h]);
    gemm(d_logits[h], false, p.head_w[h], true, d_feat, true);
  }
  for (std::size_t i = 0; i < c.features; ++i)
    if (k.features[i] <= 0) d_feat[i] = 0;
  gemm(k.flat, true, d_feat, false, g.fc_w, true);
  add_inplace(g.fc_b, d_feat);
  Tensor d_flat;
  gemm(d_feat, false, p.fc_w, true, d_flat);
  d_flat.reshape({(n / 4) * (n / 4), c.conv2});
  Tensor d_act2 = detail::avgpool2_backward(d_flat, n / 2, c.conv2);
  for (std::size_t i = 0; i < d_act2.size(); ++i)
    if (k.act2[i] <= 0) d_act2[i] = 0;
  gemm(d_act2, true, k.cols2, false, g.conv2_w, true);
  for (std::size_t r = 0; r < d_act2.rows(); ++r)
    for (std::size_t j = 0; j < c.conv2; ++j) g.conv2_b[j] += d_act2(r, j);
  Tensor d_cols2;
  gemm(d_act2, false, p.conv2_w, false, d_cols2);
  Tensor d_pool1 = detail::col2im(d_cols2, n / 2, c.conv1);
  Tensor d_act1 = detail::avgpool2_backward(d_pool1, n, c.conv1);
  for (std::size_t i = 0; i < d_act1.size(); ++i)
    if (k.act1[i] <= 0) d_act1[i] = 0;
  gemm(d_act1, true, k.cols1, false, g.conv1_w, true);
  for (std::size_t r = 0; r < d_act1.rows(); ++r)
    for (std::size_t j = 0; j < c.conv1; ++j) g.conv1_b[j] += d_act1(r, j);
}

// ---------------------------------------------------------------- training

/// Labelled classifier input. A label of -1 means "no class": the target for
/// that head is the uniform distribution (used for noise images).
struct LabelledImage {
  Tensor image;
  std::array<int, kHeads> labels{};
};

struct ClassifierTrainHyper {
  std::size_t epochs = 20;
  std::size_t batch = 32;
  std::size_t render_seeds = 3;     // renders per (class, context)
  double noise_fraction = 0.1;      // extra uniform-noise images with uniform targets
  double max_pixel_noise = 0.25;    // gaussian corruption sd drawn from [0, max] per image
  AdamWHyper adam{2e-3, 0.9, 0.999, 1e-8, 1e-4};
  bool shuffle_labels = false;      // control run: concept labels permuted at random
};

/// Cross-entropy summed over heads; returns the loss and fills d_logits.
inline double classifier_loss(const ClassifierOutput& out, const std::array<int, kHeads>& labels,
                              std::array<Tensor, kHeads>& d_logits, double weight) {
  double loss = 0;
  for (std::size_t h = 0; h < kHeads; ++h) {
    Tensor p = out.logits[h];
    softmax_inplace(std::span<double>(p.storage()));
    const std::size_t m = p.size();
    d_logits[h] = Tensor({1, m});
    for (std::size_t j = 0; j < m; ++j) {
      const double q = labels[h] < 0 ? 1.0 / double(m) : (int(j) == labels[h] ? 1.0 : 0.0);
      if (q > 0) loss -= q * std::log(std::max(p[j], 1e-300));
      d_logits[h][j] = weight * (p[j] - q);
    }
  }
  return loss;
}

inline std::array<int, kHeads> render_labels(std::size_t class_id, std::size_t context_id) {
  const Context c = World::context(context_id);
  return {int(class_id), int(c.background), int(c.position), int(c.size)};
}

/// Clean renders of every class in every context, `seeds` jittered copies each.
inline std::vector<LabelledImage> clean_render_set(const World& w, std::size_t seeds, std::uint64_t seed_base) {
  std::vector<LabelledImage> out;
  for (std::size_t cls = 0; cls < w.class_count(); ++cls)
    for (std::size_t ctx = 0; ctx < kContexts; ++ctx)
      for (std::size_t s = 0; s < seeds; ++s) {
        const std::uint64_t rs = splitmix64(seed_base + (cls * kContexts + ctx) * 131 + s);
        out.push_back({render<double>(w, cls, ctx, rs), render_labels(cls, ctx)});
      }
  return out;
}

inline Tensor uniform_noise_image(const ClassifierConfig& c, Rng& rng) {
  Tensor t({c.channels, c.image_size, c.image_size});
  for (auto& v : t.storage()) v = rng.uniform(-1.0, 1.0);
  return t;
}

struct ClassifierTrainLog {
  std::vector<double> epoch_loss;
};

inline ClassifierParams train_classifier(const World& w, std::uint64_t seed, const ClassifierTrainHyper& hyper = {},
                                         ClassifierTrainLog* log = nullptr) {
  const ClassifierConfig cfg = ClassifierConfig::for_world(w);
  ClassifierParams p = init_classifier(cfg, seed);
  Rng rng = Rng(seed).fork(0x747261696e);
  auto data = clean_render_set(w, hyper.render_seeds, seed);
  if (hyper.shuffle_labels) {
    Rng lr = rng.fork(1);
    for (auto& d : data) d.labels[head_concept] = int(lr.below(cfg.outputs[head_concept]));
  }
  const std::size_t n_noise = std::size_t(hyper.noise_fraction * double(data.size()));
  for (std::size_t i = 0; i < n_noise; ++i) {
    Rng nr = rng.fork(1000 + i);
    data.push_back({uniform_noise_image(cfg, nr), {-1, -1, -1, -1}});
  }

  std::vector<Tensor*> pp;
  p.for_each([&](const std::string&, Tensor& t) { pp.push_back(&t); });
  std::vector<Tensor> m1, m2;
  for (auto* t : pp) {
    m1.emplace_back(t->shape());
    m2.emplace_back(t->shape());
  }
  std::int64_t step = 0;
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 0; epoch < hyper.epochs; ++epoch) {
    Rng er = rng.fork(0x65706f6368 + epoch);
    er.shuffle(order);
    double epoch_loss = 0;
    for (std::size_t start = 0; start < order.size(); start += hyper.batch) {
      const std::size_t end = std::min(order.size(), start + hyper.batch);
      const double wgt = 1.0 / double(end - start);
      std::vector<ClassifierParams> grads(end - start);
      std::vector<double> losses(end - start);
      parallel_for(end - start, [&](std::size_t b) {
        const auto& item = data[order[start + b]];
        Tensor img = item.image;
        Rng ar = er.fork(start + b);
        const double sd = ar.uniform(0.0, hyper.max_pixel_noise);
        if (item.labels[head_concept] >= 0)
          for (auto& v : img.storage()) v += sd * ar.normal();
        grads[b] = p;
        grads[b].for_each([](const std::string&, Tensor& t) { t.fill(0.0); });
        ClassifierCache cache;
        auto out = classify(p, img, &cache);
        std::array<Tensor, kHeads> dl;
        losses[b] = classifier_loss(out, item.labels, dl, wgt);
        classifier_backward(p, cache, dl, grads[b]);
      });
      ++step;
      std::vector<Tensor*> g0;
      grads[0].for_each([&](const std::string&, Tensor& t) { g0.push_back(&t); });
      for (std::size_t b = 1; b < grads.size(); ++b) {
        std::size_t k = 0;
        grads[b].for_each([&](const std::string&, const Tensor& t) { add_inplace(*g0[k++], t); });
      }
      AdamWHyper h = hyper.adam;  // cosine decay over the whole run
      h.lr *= 0.5 * (1.0 + std::cos(3.141592653589793 * double(epoch * order.size() + start) /
                                    double(hyper.epochs * order.size())));
      for (std::size_t k = 0; k < pp.size(); ++k) adamw_update(*pp[k], *g0[k], m1[k], m2[k], step, h);
      for (double l : losses) epoch_loss += l;
    }
    if (log) log->epoch_loss.push_back(epoch_loss / double(data.size()));
  }
  return p;
}

// ---------------------------------------------------------------- scoring

/// Softmax over the classes of `class_id`'s category; the probability of `class_id`.
inline double category_probability(const World& w, const ClassifierOutput& out, std::size_t class_id) {
  const auto cat = w.concepts.at(class_id).category;
  const std::size_t b = w.category_begin(cat), n = w.classes_per_category();
  std::vector<double> z(out.logits[head_concept].data() + b, out.logits[head_concept].data() + b + n);
  softmax_inplace(std::span<double>(z));
  return z[class_id - b];
}

inline double concept_score(const ClassifierParams& clf, const World& w, const Tensor& image, std::size_t class_id) {
  return category_probability(w, classify(clf, image), class_id);
}

inline std::size_t argmax(std::span<const double> v) {
  return std::size_t(std::max_element(v.begin(), v.end()) - v.begin());
}

/// Fraction of the three context attributes (background, position, size)
/// predicted correctly for an image generated in `context_id`.
inline double context_accuracy(const ClassifierOutput& out, std::size_t context_id) {
  const auto want = render_labels(0, context_id);
  double hit = 0;
  for (std::size_t h = head_background; h < kHeads; ++h)
    hit += argmax(std::span<const double>(out.logits[h].storage())) == std::size_t(want[h]) ? 1.0 : 0.0;
  return hit / 3.0;
}

struct ClassifierAccuracy {
  std::array<double, kHeads> per_head{};
  double min() const { return *std::min_element(per_head.begin(), per_head.end()); }
};

inline ClassifierAccuracy evaluate_classifier(const ClassifierParams& clf, const std::vector<LabelledImage>& data) {
  std::vector<std::array<int, kHeads>> hits(data.size());
  parallel_for(data.size(), [&](std::size_t i) {
    auto out = classify(clf, data[i].image);
    for (std::size_t h = 0; h < kHeads; ++h)
      hits[i][h] = argmax(std::span<const double>(out.logits[h].storage())) == std::size_t(data[i].labels[h]);
  });
  ClassifierAccuracy acc;
  for (const auto& hrow : hits)
    for (std::size_t h = 0; h < kHeads; ++h) acc.per_head[h] += hrow[h];
  for (auto& a : acc.per_head) a /= double(data.size());
  return acc;
}

/// Held-out clean renders (seeds disjoint from training) must be classified at
/// >= `gate` accuracy on every head.
inline ClassifierAccuracy enforce_classifier_gate(const ClassifierParams& clf, const World& w, double gate = 0.99) {
  auto held_out = clean_render_set(w, 1, 0x68656c646f7574);
  auto acc = evaluate_classifier(clf, held_out);
  require(acc.min() >= gate, "classifier gate failed: accuracy " + format_real(acc.min()) + " < " +
                                 format_real(gate) + " on held-out clean renders");
  return acc;
}

// ---------------------------------------------------------------- Fréchet distance

struct FrechetResult {
  double distance = 0;
  double regularization = 0;  // epsilon added to both covariance diagonals, 0 if none was needed
};

/// Fréchet distance between Gaussians fitted to two sets of feature rows:
/// |mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2).
inline FrechetResult frechet_distance(const std::vector<std::vector<double>>& a,
                                      const std::vector<std::vector<double>>& b) {
  require(!a.empty() && !b.empty(), "frechet_distance needs non-empty sets");
  const std::size_t f = a.front().size();
  require(a.size() >= f + 1 && b.size() >= f + 1,
          "frechet_distance needs at least F+1 = " + std::to_string(f + 1) + " samples per set");
  using Mat = Eigen::MatrixXd;
  auto moments = [&](const std::vector<std::vector<double>>& s, Eigen::VectorXd& mu, Mat& cov) {
    // Sorted copy so the result does not depend on sample order.
    auto rows = s;
    std::sort(rows.begin(), rows.end());
    mu = Eigen::VectorXd::Zero(Eigen::Index(f));
    for (const auto& r : rows) {
      require(r.size() == f, "frechet_distance: ragged feature rows");
      mu += Eigen::Map<const Eigen::VectorXd>(r.data(), Eigen::Index(f));
    }
    mu /= double(rows.size());
    cov = Mat::Zero(Eigen::Index(f), Eigen::Index(f));
    for (const auto& r : rows) {
      Eigen::VectorXd d = Eigen::Map<const Eigen::VectorXd>(r.data(), Eigen::Index(f)) - mu;
      cov += d * d.transpose();
    }
    cov /= double(rows.size() - 1);
  };
  Eigen::VectorXd mu_a, mu_b;
  Mat s_a, s_b;
  moments(a, mu_a, s_a);
  moments(b, mu_b, s_b);

  auto sym_sqrt = [](const Mat& m) {
    Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (m + m.transpose()));
    Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return Mat(es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose());
  };
  FrechetResult res;
  auto min_eig = [](const Mat& m) { return Eigen::SelfAdjointEigenSolver<Mat>(m, Eigen::EigenvaluesOnly).eigenvalues()(0); };
  if (std::min(min_eig(s_a), min_eig(s_b)) <= 1e-10) {
    res.regularization = 1e-6;
    s_a += res.regularization * Mat::Identity(s_a.rows(), s_a.cols());
    s_b += res.regularization * Mat::Identity(s_b.rows(), s_b.cols());
  }
  const Mat ra = sym_sqrt(s_a);
  const Mat mid = sym_sqrt(ra * s_b * ra);
  const double d = (mu_a - mu_b).squaredNorm() + s_a.trace() + s_b.trace() - 2.0 * mid.trace();
  res.distance = std::max(0.0, d);
  return res;
}

inline std::vector<std::vector<double>> classifier_features(const ClassifierParams& clf,
                                                            const std::vector<Tensor>& images) {
  std::vector<std::vector<double>> out(images.size());
  parallel_for(images.size(), [&](std::size_t i) { out[i] = classify(clf, images[i]).features.storage(); });
  return out;
}

inline FrechetResult frechet_feature_distance(const ClassifierParams& clf, const std::vector<Tensor>& a,
                                              const std::vector<Tensor>& b) {
  return frechet_distance(classifier_features(clf, a), classifier_features(clf, b));
}

// ---------------------------------------------------------------- removal decision

/// The CSD threshold of the reference style-removal procedure. Kept for the
/// record; removal here is decided against a threshold calibrated per concept.
inline constexpr double kCsdReferenceThreshold = 0.82;

struct RemovalDecision {
  double score = 0;
  double threshold = 0;
  bool removed = false;
};

/// Threshold halfway between the mean neutral-generation score and the mean
/// knowledge-generation score.
inline double removal_threshold(double mean_neutral_score, double mean_knowledge_score) {
  return 0.5 * (mean_neutral_score + mean_knowledge_score);
}

inline RemovalDecision decide_removed(double intervened_score, double threshold) {
  return {intervened_score, threshold, intervened_score <= threshold};
}

}  // namespace ditprobe
