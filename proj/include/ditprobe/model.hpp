// Toy diffusion transformer in two variants:
//
//   cross_attn  image tokens run self-attention, then cross-attention into a
//               frozen text-embedding lookup, then an MLP (PixArt-style).
//   mmdit       a text stream and an image stream, each with its own
//               projections and MLP, merged by one joint attention over all
//               T + I tokens (MMDiT-style).
//
// Timestep conditioning is an MLP over a sinusoidal embedding; its output tau
// is added to the image tokens and drives per-block scale/shift vectors
// applied after every pre-norm:  m = ln * (gain + gain_t*tau) + (shift + shift_t*tau).
//
// Attention projections carry no biases, so a layer's attention output for
// image token i is exactly  sum_j sum_h attn[h](i,j) * v_j^h * W_o^h.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <type_traits>
#include <vector>

#include "ditprobe/numerics.hpp"
#include "ditprobe/world.hpp"

namespace ditprobe {

enum class Variant : std::uint8_t { cross_attn, mmdit };

inline const char* variant_name(Variant v) { return v == Variant::cross_attn ? "cross_attn" : "mmdit"; }

inline Variant parse_variant(const std::string& s) {
  if (s == "cross_attn") return Variant::cross_attn;
  if (s == "mmdit") return Variant::mmdit;
  throw ContractViolation("unknown model variant '" + s + "'");
}

struct ModelConfig {
  Variant variant = Variant::cross_attn;
  std::size_t layers = 12;
  std::size_t heads = 4;
  std::size_t d_model = 64;
  std::size_t text_len = kPromptLength;
  std::size_t image_size = 32;
  std::size_t channels = 3;
  std::size_t patch = 4;
  std::size_t vocab = 64;
  std::size_t time_dim = 32;
  std::size_t mlp_hidden = 128;
  // Blocks that carry cross-attention (cross_attn variant only). Empty means
  // every block; a strict subset builds a planted model.
  std::vector<std::size_t> cross_blocks;
  double ln_eps = 1e-6;

  static ModelConfig defaults(Variant v) {
    ModelConfig c;
    c.variant = v;
    c.layers = v == Variant::cross_attn ? 12 : 8;
    return c;
  }

  std::size_t head_dim() const { return d_model / heads; }
  std::size_t grid() const { return image_size / patch; }
  std::size_t image_tokens() const { return grid() * grid(); }
  std::size_t patch_dim() const { return channels * patch * patch; }

  bool has_cross(std::size_t block) const {
    if (variant != Variant::cross_attn) return false;
    if (cross_blocks.empty()) return true;
    return std::find(cross_blocks.begin(), cross_blocks.end(), block) != cross_blocks.end();
  }

  void validate() const {
    require(layers >= 1, "model needs at least one layer");
    require(heads >= 1 && d_model % heads == 0, "d_model must be divisible by heads");
    require(patch >= 1 && image_size % patch == 0, "image_size must be divisible by patch");
    require(time_dim >= 2 && time_dim % 2 == 0, "time_dim must be even");
    require(d_model % 4 == 0, "d_model must be divisible by 4");
    require(text_len >= 1 && vocab >= 1 && mlp_hidden >= 1, "degenerate model dimensions");
    for (auto b : cross_blocks) require(b < layers, "cross block index out of range");
    require(cross_blocks.empty() || variant == Variant::cross_attn, "cross_blocks only apply to cross_attn");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// ---------------------------------------------------------------- parameters

template <class Real>
struct Modulation {
  BasicTensor<Real> gain, shift, gain_t, shift_t;
};

template <class Real>
struct AttentionParams {
  BasicTensor<Real> w_q, w_k, w_v, w_o;
};

template <class Real>
struct MlpParams {
  BasicTensor<Real> w1, b1, w2, b2;
};

template <class Real>
struct CrossBlockParams {
  Modulation<Real> mod_self, mod_cross, mod_mlp;
  AttentionParams<Real> self_attn, cross_attn;  // cross_attn tensors empty when bypassed
  MlpParams<Real> mlp;
};

template <class Real>
struct JointBlockParams {
  Modulation<Real> mod_attn_x, mod_attn_c, mod_mlp_x, mod_mlp_c;
  AttentionParams<Real> attn_x, attn_c;
  MlpParams<Real> mlp_x, mlp_c;
};

template <class Real>
struct SharedParams {
  BasicTensor<Real> token_embed;  // frozen text-encoder substitute, vocab x d
  BasicTensor<Real> patch_w, patch_b, pos_embed;
  BasicTensor<Real> time_w1, time_b1, time_w2, time_b2;
  Modulation<Real> final_mod;
  BasicTensor<Real> out_w, out_b;
};

inline constexpr int kSharedGroup = -1;

template <class Real>
struct ModelParams {
  ModelConfig config;
  SharedParams<Real> shared;
  std::vector<CrossBlockParams<Real>> cross;
  std::vector<JointBlockParams<Real>> joint;

  /// Visits every parameter tensor in a fixed order as (name, block, tensor);
  /// block is kSharedGroup for the embed/unembed group.
  template <class F>
  void for_each(F&& f) {
    visit_impl(*this, f);
  }
  template <class F>
  void for_each(F&& f) const {
    visit_impl(*this, f);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each([&](const std::string&, int, const BasicTensor<Real>& t) { n += t.size(); });
    return n;
  }

 private:
  template <class Self, class F>
  static void visit_impl(Self& p, F& f) {
    auto mod = [&](const std::string& n, int b, auto& m) {
      f(n + ".gain", b, m.gain);
      f(n + ".shift", b, m.shift);
      f(n + ".gain_t", b, m.gain_t);
      f(n + ".shift_t", b, m.shift_t);
    };
    auto attn = [&](const std::string& n, int b, auto& a) {
      f(n + ".w_q", b, a.w_q);
      f(n + ".w_k", b, a.w_k);
      f(n + ".w_v", b, a.w_v);
      f(n + ".w_o", b, a.w_o);
    };
    auto mlp = [&](const std::string& n, int b, auto& m) {
      f(n + ".w1", b, m.w1);
      f(n + ".b1", b, m.b1);
      f(n + ".w2", b, m.w2);
      f(n + ".b2", b, m.b2);
    };
    auto& s = p.shared;
    f("shared.token_embed", kSharedGroup, s.token_embed);
    f("shared.patch_w", kSharedGroup, s.patch_w);
    f("shared.patch_b", kSharedGroup, s.patch_b);
    f("shared.pos_embed", kSharedGroup, s.pos_embed);
    f("shared.time_w1", kSharedGroup, s.time_w1);
    f("shared.time_b1", kSharedGroup, s.time_b1);
    f("shared.time_w2", kSharedGroup, s.time_w2);
    f("shared.time_b2", kSharedGroup, s.time_b2);
    mod("shared.final_mod", kSharedGroup, s.final_mod);
    f("shared.out_w", kSharedGroup, s.out_w);
    f("shared.out_b", kSharedGroup, s.out_b);
    for (std::size_t b = 0; b < p.cross.size(); ++b) {
      const std::string n = "block" + std::to_string(b);
      auto& blk = p.cross[b];
      const int bi = int(b);
      mod(n + ".mod_self", bi, blk.mod_self);
      attn(n + ".self_attn", bi, blk.self_attn);
      if (!blk.cross_attn.w_q.empty()) {
        mod(n + ".mod_cross", bi, blk.mod_cross);
        attn(n + ".cross_attn", bi, blk.cross_attn);
      }
      mod(n + ".mod_mlp", bi, blk.mod_mlp);
      mlp(n + ".mlp", bi, blk.mlp);
    }
    for (std::size_t b = 0; b < p.joint.size(); ++b) {
      const std::string n = "block" + std::to_string(b);
      auto& blk = p.joint[b];
      const int bi = int(b);
      mod(n + ".mod_attn_x", bi, blk.mod_attn_x);
      mod(n + ".mod_attn_c", bi, blk.mod_attn_c);
      attn(n + ".attn_x", bi, blk.attn_x);
      attn(n + ".attn_c", bi, blk.attn_c);
      mod(n + ".mod_mlp_x", bi, blk.mod_mlp_x);
      mod(n + ".mod_mlp_c", bi, blk.mod_mlp_c);
      mlp(n + ".mlp_x", bi, blk.mlp_x);
      mlp(n + ".mlp_c", bi, blk.mlp_c);
    }
  }
};

/// Allocates zero-filled parameters with the right shapes; init_params fills them.
template <class Real>
ModelParams<Real> zero_params(const ModelConfig& config) {
  config.validate();
  using T = BasicTensor<Real>;
  const std::size_t d = config.d_model, hid = config.mlp_hidden;
  ModelParams<Real> p;
  p.config = config;
  auto mod = [&] { return Modulation<Real>{T({d}), T({d}), T({d}), T({d})}; };
  auto attn = [&] { return AttentionParams<Real>{T({d, d}), T({d, d}), T({d, d}), T({d, d})}; };
  auto mlp = [&] { return MlpParams<Real>{T({d, hid}), T({hid}), T({hid, d}), T({d})}; };
  auto& s = p.shared;
  s.token_embed = T({config.vocab, d});
  s.patch_w = T({config.patch_dim(), d});
  s.patch_b = T({d});
  s.pos_embed = T({config.image_tokens(), d});
  s.time_w1 = T({config.time_dim, d});
  s.time_b1 = T({d});
  s.time_w2 = T({d, d});
  s.time_b2 = T({d});
  s.final_mod = mod();
  s.out_w = T({d, config.patch_dim()});
  s.out_b = T({config.patch_dim()});
  for (std::size_t b = 0; b < config.layers; ++b) {
    if (config.variant == Variant::cross_attn) {
      CrossBlockParams<Real> blk{mod(), {}, mod(), attn(), {}, mlp()};
      if (config.has_cross(b)) {
        blk.mod_cross = mod();
        blk.cross_attn = attn();
      }
      p.cross.push_back(std::move(blk));
    } else {
      p.joint.push_back({mod(), mod(), mod(), mod(), attn(), attn(), mlp(), mlp()});
    }
  }
  return p;
}

namespace detail {

/// Fixed 2-D sin/cos position table, used to initialise the learned one.
template <class Real>
BasicTensor<Real> sincos_positions(std::size_t grid, std::size_t d) {
  BasicTensor<Real> pe({grid * grid, d});
  const std::size_t quarter = d / 4;
  for (std::size_t gy = 0; gy < grid; ++gy)
    for (std::size_t gx = 0; gx < grid; ++gx) {
      auto row = pe.row(gy * grid + gx);
      for (std::size_t k = 0; k < quarter; ++k) {
        const double omega = 1.0 / std::pow(100.0, double(k) / double(quarter));
        row[k] = Real(std::sin(double(gy) * omega));
        row[quarter + k] = Real(std::cos(double(gy) * omega));
        row[2 * quarter + k] = Real(std::sin(double(gx) * omega));
        row[3 * quarter + k] = Real(std::cos(double(gx) * omega));
      }
    }
  return pe;
}

}  // namespace detail

/// Scaled-Gaussian initialisation; a pure function of (config, seed).
template <class Real>
ModelParams<Real> init_params(const ModelConfig& config, std::uint64_t seed) {
  ModelParams<Real> p = zero_params<Real>(config);
  Rng base(seed);
  std::uint64_t tag = 0;
  p.for_each([&](const std::string& name, int, BasicTensor<Real>& t) {
    Rng rng = base.fork(++tag);
    auto ends_with = [&](const char* suffix) {
      const std::string s(suffix);
      return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
    };
    if (ends_with(".gain")) {
      t.fill(Real(1));
    } else if (ends_with(".gain_t") || ends_with(".shift_t")) {
      for (auto& v : t.storage()) v = Real(0.1 * rng.normal());
    } else if (name == "shared.token_embed") {
      for (auto& v : t.storage()) v = Real(rng.normal());
    } else if (name == "shared.pos_embed") {
      t = detail::sincos_positions<Real>(config.grid(), config.d_model);
    } else if (t.rank() == 2) {
      const double std = 1.0 / std::sqrt(double(t.dim(0)));
      for (auto& v : t.storage()) v = Real(std * rng.normal());
    }
    // remaining vectors (biases, shifts) start at zero
  });
  return p;
}

template <class Real>
ModelParams<Real> zeros_like(const ModelParams<Real>& p) {
  ModelParams<Real> z = p;
  z.for_each([](const std::string&, int, BasicTensor<Real>& t) { t.fill(Real(0)); });
  return z;
}

template <class To, class From>
ModelParams<To> convert_params(const ModelParams<From>& p) {
  ModelParams<To> out = zero_params<To>(p.config);
  std::vector<const BasicTensor<From>*> src;
  p.for_each([&](const std::string&, int, const BasicTensor<From>& t) { src.push_back(&t); });
  std::size_t i = 0;
  out.for_each([&](const std::string&, int, BasicTensor<To>& t) { t = src[i++]->template cast<To>(); });
  return out;
}

/// FNV-1a over every parameter's bytes; detects any mutation.
template <class Real>
std::uint64_t params_checksum(const ModelParams<Real>& p) {
  std::uint64_t h = 1469598103934665603ULL;
  p.for_each([&](const std::string&, int, const BasicTensor<Real>& t) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(t.data());
    for (std::size_t i = 0; i < t.size() * sizeof(Real); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  });
  return h;
}

// ---------------------------------------------------------------- masks

/// Which parameters a training step may change.
struct GradientMask {
  std::vector<bool> blocks;     // one flag per block
  bool shared = false;          // patch/pos/time/final groups (not the embedding table)
  bool token_table = false;     // the whole embedding table
  std::vector<int> token_rows;  // individually trainable embedding rows

  static GradientMask all(std::size_t layers) {
    GradientMask m;
    m.blocks.assign(layers, true);
    m.shared = true;
    return m;
  }
  static GradientMask only(std::size_t layers, const std::vector<std::size_t>& selected) {
    GradientMask m;
    m.blocks.assign(layers, false);
    for (auto b : selected) {
      require(b < layers, "mask block index out of range");
      m.blocks[b] = true;
    }
    return m;
  }
  static GradientMask none(std::size_t layers) {
    GradientMask m;
    m.blocks.assign(layers, false);
    return m;
  }

  bool block(std::size_t b) const { return b < blocks.size() && blocks[b]; }
  bool any_block() const { return std::find(blocks.begin(), blocks.end(), true) != blocks.end(); }
  bool any_tokens() const { return token_table || !token_rows.empty(); }
  bool empty() const { return !any_block() && !shared && !any_tokens(); }
  bool token_row(int r) const {
    return token_table || std::find(token_rows.begin(), token_rows.end(), r) != token_rows.end();
  }
};

// ---------------------------------------------------------------- trace

template <class Real>
struct LayerTrace {
  bool has_text_attention = false;
  std::vector<BasicTensor<Real>> attention;  // per head; rows = queries, cols = keys
  BasicTensor<Real> values;                  // keys x d, all heads side by side
  BasicTensor<Real> w_o;                     // image-stream output projection, d x d
  BasicTensor<Real> attn_output;             // image tokens x d, pre-residual
  BasicTensor<Real> block_input;             // image stream entering the block
  BasicTensor<Real> text_input;              // text entering the block
};

/// Per-layer attention weights, values and output projections of one forward
/// pass. For cross_attn the attention rows are image tokens and the columns
/// text tokens; for mmdit both span the joint sequence [text; image].
template <class Real>
struct AttentionTrace {
  Variant variant = Variant::cross_attn;
  std::size_t text_len = 0, image_tokens = 0, heads = 0, d_model = 0;
  std::vector<LayerTrace<Real>> layers;

  /// Row of image token i inside a layer's attention matrices.
  std::size_t image_row(std::size_t i) const { return variant == Variant::mmdit ? text_len + i : i; }
};

/// How text enters each block. For cross_attn, blocks flagged in `use_alternate`
/// compute their keys and values from `alternate`. For mmdit, flagged blocks
/// have their incoming text stream replaced by `text_overrides[block]`.
template <class Real>
struct TextRouting {
  const Prompt* alternate = nullptr;
  std::vector<bool> use_alternate;
  const std::vector<BasicTensor<Real>>* text_overrides = nullptr;
  std::vector<BasicTensor<Real>>* text_record = nullptr;  // mmdit: raw text input per block

  bool routed(std::size_t b) const { return b < use_alternate.size() && use_alternate[b]; }
};

// ---------------------------------------------------------------- kernels

namespace detail {

template <class Real>
void linear(const BasicTensor<Real>& x, const BasicTensor<Real>& w, const BasicTensor<Real>* b,
            BasicTensor<Real>& y) {
  gemm(x, false, w, false, y);
  if (b) {
    for (std::size_t r = 0; r < y.rows(); ++r) {
      auto row = y.row(r);
      for (std::size_t c = 0; c < row.size(); ++c) row[c] += (*b)[c];
    }
  }
}

/// dW += x^T dy, db += colsum(dy); returns dx = dy W^T when requested.
template <class Real>
void linear_backward(const BasicTensor<Real>& x, const BasicTensor<Real>& w, const BasicTensor<Real>& dy,
                     BasicTensor<Real>* dw, BasicTensor<Real>* db, BasicTensor<Real>* dx) {
  if (dw) gemm(x, true, dy, false, *dw, true);
  if (db) {
    for (std::size_t r = 0; r < dy.rows(); ++r) {
      auto row = dy.row(r);
      for (std::size_t c = 0; c < row.size(); ++c) (*db)[c] += row[c];
    }
  }
  if (dx) gemm(dy, false, w, true, *dx);
}

template <class Real>
void modulate(const BasicTensor<Real>& ln, const Modulation<Real>& m, std::span<const Real> tau,
              BasicTensor<Real>& out) {
  const std::size_t d = ln.cols();
  std::vector<Real> scale(d), shift(d);
  for (std::size_t c = 0; c < d; ++c) {
    scale[c] = m.gain[c] + m.gain_t[c] * tau[c];
    shift[c] = m.shift[c] + m.shift_t[c] * tau[c];
  }
  out = BasicTensor<Real>(ln.shape());
  for (std::size_t r = 0; r < ln.rows(); ++r) {
    auto in = ln.row(r);
    auto o = out.row(r);
    for (std::size_t c = 0; c < d; ++c) o[c] = in[c] * scale[c] + shift[c];
  }
}

template <class Real>
void modulate_backward(const BasicTensor<Real>& dm, const BasicTensor<Real>& ln, const Modulation<Real>& m,
                       std::span<const Real> tau, Modulation<Real>* grad, std::span<Real> dtau,
                       BasicTensor<Real>& dln) {
  const std::size_t d = ln.cols();
  dln = BasicTensor<Real>(ln.shape());
  std::vector<Real> sum_dm(d, Real(0)), sum_dm_ln(d, Real(0));
  for (std::size_t r = 0; r < ln.rows(); ++r) {
    auto g = dm.row(r);
    auto x = ln.row(r);
    auto o = dln.row(r);
    for (std::size_t c = 0; c < d; ++c) {
      sum_dm[c] += g[c];
      sum_dm_ln[c] += g[c] * x[c];
      o[c] = g[c] * (m.gain[c] + m.gain_t[c] * tau[c]);
    }
  }
  for (std::size_t c = 0; c < d; ++c) {
    if (grad) {
      grad->gain[c] += sum_dm_ln[c];
      grad->gain_t[c] += sum_dm_ln[c] * tau[c];
      grad->shift[c] += sum_dm[c];
      grad->shift_t[c] += sum_dm[c] * tau[c];
    }
    if (!dtau.empty()) dtau[c] += sum_dm_ln[c] * m.gain_t[c] + sum_dm[c] * m.shift_t[c];
  }
}

template <class Real>
using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Column block [off, off+dh) of a row-major matrix, viewed without copying.
template <class Real>
auto head_view(const BasicTensor<Real>& x, std::size_t off, std::size_t dh) {
  return Eigen::Map<const RowMat<Real>, 0, Eigen::OuterStride<>>(x.data() + off, Eigen::Index(x.rows()),
                                                                  Eigen::Index(dh), Eigen::OuterStride<>(x.cols()));
}

template <class Real>
auto head_view(BasicTensor<Real>& x, std::size_t off, std::size_t dh) {
  return Eigen::Map<RowMat<Real>, 0, Eigen::OuterStride<>>(x.data() + off, Eigen::Index(x.rows()), Eigen::Index(dh),
                                                            Eigen::OuterStride<>(x.cols()));
}

template <class Real>
auto matrix_view(BasicTensor<Real>& x) {
  return Eigen::Map<RowMat<Real>>(x.data(), Eigen::Index(x.rows()), Eigen::Index(x.cols()));
}

template <class Real>
auto matrix_view(const BasicTensor<Real>& x) {
  return Eigen::Map<const RowMat<Real>>(x.data(), Eigen::Index(x.rows()), Eigen::Index(x.cols()));
}

/// Multi-head scaled dot-product attention without projections.
template <class Real>
void attention(const BasicTensor<Real>& q, const BasicTensor<Real>& k, const BasicTensor<Real>& v,
               std::size_t heads, std::vector<BasicTensor<Real>>& probs, BasicTensor<Real>& o) {
  const std::size_t nq = q.rows(), nk = k.rows(), d = q.cols(), dh = d / heads;
  const Real scale = Real(1) / std::sqrt(Real(dh));
  probs.assign(heads, BasicTensor<Real>({nq, nk}));
  o = BasicTensor<Real>({nq, d});
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dh;
    auto& p = probs[h];
    auto pm = matrix_view(p);
    pm.noalias() = (head_view(q, off, dh) * head_view(k, off, dh).transpose()) * scale;
    for (std::size_t i = 0; i < nq; ++i) softmax_inplace(p.row(i));
    head_view(o, off, dh).noalias() = pm * head_view(v, off, dh);
  }
}

template <class Real>
void attention_backward(const BasicTensor<Real>& q, const BasicTensor<Real>& k, const BasicTensor<Real>& v,
                        const std::vector<BasicTensor<Real>>& probs, const BasicTensor<Real>& d_o,
                        BasicTensor<Real>& dq, BasicTensor<Real>& dk, BasicTensor<Real>& dv) {
  const std::size_t heads = probs.size();
  const std::size_t nq = q.rows(), nk = k.rows(), d = q.cols(), dh = d / heads;
  const Real scale = Real(1) / std::sqrt(Real(dh));
  dq = BasicTensor<Real>(q.shape());
  dk = BasicTensor<Real>(k.shape());
  dv = BasicTensor<Real>(v.shape());
  BasicTensor<Real> ds({nq, nk});
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dh;
    const auto pm = matrix_view(probs[h]);
    const auto go = head_view(d_o, off, dh);
    head_view(dv, off, dh).noalias() = pm.transpose() * go;
    auto dsm = matrix_view(ds);
    dsm.noalias() = go * head_view(v, off, dh).transpose();
    // softmax backward: ds = p * (dp - <p, dp>)
    for (std::size_t i = 0; i < nq; ++i) {
      auto prow = probs[h].row(i);
      auto drow = ds.row(i);
      Real row_dot = 0;
      for (std::size_t j = 0; j < nk; ++j) row_dot += prow[j] * drow[j];
      for (std::size_t j = 0; j < nk; ++j) drow[j] = prow[j] * (drow[j] - row_dot) * scale;
    }
    head_view(dq, off, dh).noalias() = dsm * head_view(k, off, dh);
    head_view(dk, off, dh).noalias() = dsm.transpose() * head_view(q, off, dh);
  }
}

template <class Real>
std::vector<Real> timestep_features(double t, std::size_t dim) {
  const std::size_t half = dim / 2;
  std::vector<Real> s(dim);
  for (std::size_t k = 0; k < half; ++k) {
    const double freq = std::exp(-std::log(10000.0) * double(k) / double(half));
    const double angle = t * 1000.0 * freq;
    s[k] = Real(std::cos(angle));
    s[half + k] = Real(std::sin(angle));
  }
  return s;
}

template <class Real>
BasicTensor<Real> gather_rows(const BasicTensor<Real>& table, const std::vector<int>& ids) {
  BasicTensor<Real> out({ids.size(), table.cols()});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    require(ids[r] >= 0 && std::size_t(ids[r]) < table.rows(),
            "token id " + std::to_string(ids[r]) + " outside vocabulary of " + std::to_string(table.rows()));
    auto src = table.row(std::size_t(ids[r]));
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  return out;
}

template <class Real>
BasicTensor<Real> vstack(const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
  BasicTensor<Real> out({a.rows() + b.rows(), a.cols()});
  std::copy(a.storage().begin(), a.storage().end(), out.storage().begin());
  std::copy(b.storage().begin(), b.storage().end(), out.storage().begin() + std::ptrdiff_t(a.size()));
  return out;
}

template <class Real>
BasicTensor<Real> slice_rows(const BasicTensor<Real>& a, std::size_t begin, std::size_t end) {
  BasicTensor<Real> out({end - begin, a.cols()});
  std::copy(a.data() + begin * a.cols(), a.data() + end * a.cols(), out.data());
  return out;
}

}  // namespace detail

/// [C, H, W] image -> [I, C*p*p] patch tokens.
template <class Real>
BasicTensor<Real> patchify(const BasicTensor<Real>& img, const ModelConfig& cfg) {
  const std::size_t p = cfg.patch, g = cfg.grid(), n = cfg.image_size;
  require(img.size() == cfg.channels * n * n, "image shape does not match model config");
  BasicTensor<Real> tok({g * g, cfg.patch_dim()});
  for (std::size_t gy = 0; gy < g; ++gy)
    for (std::size_t gx = 0; gx < g; ++gx) {
      auto row = tok.row(gy * g + gx);
      for (std::size_t c = 0; c < cfg.channels; ++c)
        for (std::size_t dy = 0; dy < p; ++dy)
          for (std::size_t dx = 0; dx < p; ++dx)
            row[(c * p + dy) * p + dx] = img[(c * n + gy * p + dy) * n + gx * p + dx];
    }
  return tok;
}

template <class Real>
BasicTensor<Real> unpatchify(const BasicTensor<Real>& tok, const ModelConfig& cfg) {
  const std::size_t p = cfg.patch, g = cfg.grid(), n = cfg.image_size;
  BasicTensor<Real> img({cfg.channels, n, n});
  for (std::size_t gy = 0; gy < g; ++gy)
    for (std::size_t gx = 0; gx < g; ++gx) {
      auto row = tok.row(gy * g + gx);
      for (std::size_t c = 0; c < cfg.channels; ++c)
        for (std::size_t dy = 0; dy < p; ++dy)
          for (std::size_t dx = 0; dx < p; ++dx)
            img[(c * n + gy * p + dy) * n + gx * p + dx] = row[(c * p + dy) * p + dx];
    }
  return img;
}

// ---------------------------------------------------------------- forward

template <class Real>
struct AttnCache {
  BasicTensor<Real> q, k, v, o, out;
  std::vector<BasicTensor<Real>> probs;
};

template <class Real>
struct MlpCache {
  LayerNormCache<Real> ln;
  BasicTensor<Real> mod, hidden, act;
};

template <class Real>
struct BlockCache {
  // shared by both variants
  BasicTensor<Real> x_in, c_in;
  LayerNormCache<Real> ln_attn_x, ln_attn_c, ln_cross;
  BasicTensor<Real> mod_attn_x, mod_attn_c, mod_cross;
  AttnCache<Real> attn, cross;
  BasicTensor<Real> text;  // cross_attn: embeddings feeding this block's keys/values
  MlpCache<Real> mlp_x, mlp_c;
  bool routed = false;
};

/// Everything the backward pass needs from one forward pass.
template <class Real>
struct ForwardCache {
  std::vector<Real> time_features, time_hidden, time_act, tau;
  BasicTensor<Real> patches;
  BasicTensor<Real> text_embed;
  std::vector<int> tokens;
  std::vector<BlockCache<Real>> blocks;
  LayerNormCache<Real> ln_final;
  BasicTensor<Real> mod_final;
};

namespace detail {

template <class Real>
void mlp_forward(const MlpParams<Real>& mp, const Modulation<Real>& mod, std::span<const Real> tau,
                 BasicTensor<Real>& x, double eps, MlpCache<Real>& cache) {
  layer_norm_rows(x, Real(eps), cache.ln);
  modulate(cache.ln.normalized, mod, tau, cache.mod);
  linear(cache.mod, mp.w1, &mp.b1, cache.hidden);
  cache.act = gelu(cache.hidden);
  BasicTensor<Real> out;
  linear(cache.act, mp.w2, &mp.b2, out);
  add_inplace(x, out);
}

/// Backward through x + MLP(mod(LN(x))); dx accumulates in place.
template <class Real>
void mlp_backward(const MlpParams<Real>& mp, const Modulation<Real>& mod, std::span<const Real> tau,
                  const MlpCache<Real>& cache, BasicTensor<Real>& dx, MlpParams<Real>* g_mlp,
                  Modulation<Real>* g_mod, std::span<Real> dtau) {
  BasicTensor<Real> d_act;
  linear_backward(cache.act, mp.w2, dx, g_mlp ? &g_mlp->w2 : nullptr, g_mlp ? &g_mlp->b2 : nullptr, &d_act);
  for (std::size_t i = 0; i < d_act.size(); ++i) d_act[i] *= gelu_grad_scalar(cache.hidden[i]);
  BasicTensor<Real> d_mod;
  linear_backward(cache.mod, mp.w1, d_act, g_mlp ? &g_mlp->w1 : nullptr, g_mlp ? &g_mlp->b1 : nullptr, &d_mod);
  BasicTensor<Real> d_ln;
  modulate_backward(d_mod, cache.ln.normalized, mod, tau, g_mod, dtau, d_ln);
  add_inplace(dx, layer_norm_backward(d_ln, cache.ln));
}

template <class Real>
void fill_layer_trace(LayerTrace<Real>& lt, const AttnCache<Real>& ac, const BasicTensor<Real>& w_o,
                      BasicTensor<Real> attn_output, const BasicTensor<Real>& x_in, const BasicTensor<Real>& text) {
  lt.has_text_attention = true;
  lt.attention = ac.probs;
  lt.values = ac.v;
  lt.w_o = w_o;
  lt.attn_output = std::move(attn_output);
  lt.block_input = x_in;
  lt.text_input = text;
}

}  // namespace detail

/// Predicts the regression target (velocity or noise) for a noisy image.
/// `trace`, `routing` and `cache` are optional observers/controls; the
/// prediction does not depend on whether a trace is captured.
template <class Real>
BasicTensor<Real> forward(const ModelParams<Real>& params, const BasicTensor<Real>& x_t, const Prompt& prompt,
                          double t, std::type_identity_t<AttentionTrace<Real>>* trace = nullptr,
                          const std::type_identity_t<TextRouting<Real>>* routing = nullptr,
                          std::type_identity_t<ForwardCache<Real>>* cache = nullptr) {
  using T = BasicTensor<Real>;
  const ModelConfig& cfg = params.config;
  require(prompt.tokens.size() == cfg.text_len, "prompt length " + std::to_string(prompt.tokens.size()) +
                                                     " != model text length " + std::to_string(cfg.text_len));
  require(t >= 0.0 && t <= 1.0, "time must lie in [0, 1]");
  ForwardCache<Real> local;
  ForwardCache<Real>& fc = cache ? *cache : local;
  const auto& s = params.shared;
  const std::size_t d = cfg.d_model;

  // time embedding
  fc.time_features = detail::timestep_features<Real>(t, cfg.time_dim);
  T tf({1, cfg.time_dim}, fc.time_features);
  T th, tau;
  detail::linear(tf, s.time_w1, &s.time_b1, th);
  fc.time_hidden = th.storage();
  T ta = gelu(th);
  fc.time_act = ta.storage();
  detail::linear(ta, s.time_w2, &s.time_b2, tau);
  fc.tau = tau.storage();
  std::span<const Real> tauv(fc.tau);

  // image tokens
  fc.patches = patchify(x_t, cfg);
  T x;
  detail::linear(fc.patches, s.patch_w, &s.patch_b, x);
  add_inplace(x, s.pos_embed);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = x.row(r);
    for (std::size_t c = 0; c < d; ++c) row[c] += tauv[c];
  }

  fc.tokens = prompt.tokens;
  fc.text_embed = detail::gather_rows(s.token_embed, prompt.tokens);
  T alt_embed;
  if (routing && routing->alternate) {
    require(routing->alternate->tokens.size() == cfg.text_len, "alternate prompt length mismatch");
    alt_embed = detail::gather_rows(s.token_embed, routing->alternate->tokens);
  }

  if (trace) {
    trace->variant = cfg.variant;
    trace->text_len = cfg.text_len;
    trace->image_tokens = cfg.image_tokens();
    trace->heads = cfg.heads;
    trace->d_model = d;
    trace->layers.assign(cfg.layers, {});
  }
  fc.blocks.assign(cfg.layers, {});
  if (routing && routing->text_record) routing->text_record->assign(cfg.layers, T());

  T c;  // mmdit text stream
  if (cfg.variant == Variant::mmdit) c = fc.text_embed;

  for (std::size_t b = 0; b < cfg.layers; ++b) {
    auto& bc = fc.blocks[b];
    bc.x_in = x;
    if (cfg.variant == Variant::cross_attn) {
      const auto& bp = params.cross[b];
      // self-attention
      layer_norm_rows(x, Real(cfg.ln_eps), bc.ln_attn_x);
      detail::modulate(bc.ln_attn_x.normalized, bp.mod_self, tauv, bc.mod_attn_x);
      detail::linear(bc.mod_attn_x, bp.self_attn.w_q, (const T*)nullptr, bc.attn.q);
      detail::linear(bc.mod_attn_x, bp.self_attn.w_k, (const T*)nullptr, bc.attn.k);
      detail::linear(bc.mod_attn_x, bp.self_attn.w_v, (const T*)nullptr, bc.attn.v);
      detail::attention(bc.attn.q, bc.attn.k, bc.attn.v, cfg.heads, bc.attn.probs, bc.attn.o);
      detail::linear(bc.attn.o, bp.self_attn.w_o, (const T*)nullptr, bc.attn.out);
      add_inplace(x, bc.attn.out);
      // cross-attention
      if (cfg.has_cross(b)) {
        bc.routed = routing && routing->routed(b) && routing->alternate;
        bc.text = bc.routed ? alt_embed : fc.text_embed;
        layer_norm_rows(x, Real(cfg.ln_eps), bc.ln_cross);
        detail::modulate(bc.ln_cross.normalized, bp.mod_cross, tauv, bc.mod_cross);
        detail::linear(bc.mod_cross, bp.cross_attn.w_q, (const T*)nullptr, bc.cross.q);
        detail::linear(bc.text, bp.cross_attn.w_k, (const T*)nullptr, bc.cross.k);
        detail::linear(bc.text, bp.cross_attn.w_v, (const T*)nullptr, bc.cross.v);
        detail::attention(bc.cross.q, bc.cross.k, bc.cross.v, cfg.heads, bc.cross.probs, bc.cross.o);
        detail::linear(bc.cross.o, bp.cross_attn.w_o, (const T*)nullptr, bc.cross.out);
        if (trace)
          detail::fill_layer_trace(trace->layers[b], bc.cross, bp.cross_attn.w_o, bc.cross.out, bc.x_in, bc.text);
        add_inplace(x, bc.cross.out);
      } else if (trace) {
        auto& lt = trace->layers[b];
        lt.block_input = bc.x_in;
        lt.attn_output = T({cfg.image_tokens(), d});
      }
      detail::mlp_forward(bp.mlp, bp.mod_mlp, tauv, x, cfg.ln_eps, bc.mlp_x);
    } else {
      const auto& bp = params.joint[b];
      bc.routed = routing && routing->routed(b) && routing->text_overrides;
      if (bc.routed) {
        const T& ov = routing->text_overrides->at(b);
        require(ov.shape() == c.shape(), "text override shape mismatch at block " + std::to_string(b));
        c = ov;
      }
      if (routing && routing->text_record) (*routing->text_record)[b] = c;
      bc.c_in = c;
      layer_norm_rows(x, Real(cfg.ln_eps), bc.ln_attn_x);
      detail::modulate(bc.ln_attn_x.normalized, bp.mod_attn_x, tauv, bc.mod_attn_x);
      layer_norm_rows(c, Real(cfg.ln_eps), bc.ln_attn_c);
      detail::modulate(bc.ln_attn_c.normalized, bp.mod_attn_c, tauv, bc.mod_attn_c);
      T qx, kx, vx, qc, kc, vc;
      detail::linear(bc.mod_attn_x, bp.attn_x.w_q, (const T*)nullptr, qx);
      detail::linear(bc.mod_attn_x, bp.attn_x.w_k, (const T*)nullptr, kx);
      detail::linear(bc.mod_attn_x, bp.attn_x.w_v, (const T*)nullptr, vx);
      detail::linear(bc.mod_attn_c, bp.attn_c.w_q, (const T*)nullptr, qc);
      detail::linear(bc.mod_attn_c, bp.attn_c.w_k, (const T*)nullptr, kc);
      detail::linear(bc.mod_attn_c, bp.attn_c.w_v, (const T*)nullptr, vc);
      bc.attn.q = detail::vstack(qc, qx);
      bc.attn.k = detail::vstack(kc, kx);
      bc.attn.v = detail::vstack(vc, vx);
      detail::attention(bc.attn.q, bc.attn.k, bc.attn.v, cfg.heads, bc.attn.probs, bc.attn.o);
      const std::size_t tl = cfg.text_len;
      T o_c = detail::slice_rows(bc.attn.o, 0, tl);
      T o_x = detail::slice_rows(bc.attn.o, tl, bc.attn.o.rows());
      T out_c, out_x;
      detail::linear(o_c, bp.attn_c.w_o, (const T*)nullptr, out_c);
      detail::linear(o_x, bp.attn_x.w_o, (const T*)nullptr, out_x);
      if (trace) detail::fill_layer_trace(trace->layers[b], bc.attn, bp.attn_x.w_o, out_x, bc.x_in, bc.c_in);
      add_inplace(x, out_x);
      add_inplace(c, out_c);
      detail::mlp_forward(bp.mlp_x, bp.mod_mlp_x, tauv, x, cfg.ln_eps, bc.mlp_x);
      detail::mlp_forward(bp.mlp_c, bp.mod_mlp_c, tauv, c, cfg.ln_eps, bc.mlp_c);
    }
  }

  layer_norm_rows(x, Real(cfg.ln_eps), fc.ln_final);
  detail::modulate(fc.ln_final.normalized, s.final_mod, tauv, fc.mod_final);
  T out;
  detail::linear(fc.mod_final, s.out_w, &s.out_b, out);
  return unpatchify(out, cfg);
}

// ---------------------------------------------------------------- backward

/// Accumulates d(loss)/d(params) into `grads` given d(loss)/d(prediction).
/// Gradients are only formed for parameters the mask allows; everything else
/// in `grads` is left untouched. Backpropagation stops below the lowest block
/// that can still receive a gradient.
template <class Real>
void backward(const ModelParams<Real>& params, const ForwardCache<Real>& fc, const BasicTensor<Real>& d_pred,
              const GradientMask& mask, ModelParams<Real>& grads) {
  using T = BasicTensor<Real>;
  const ModelConfig& cfg = params.config;
  const auto& s = params.shared;
  auto& gs = grads.shared;
  const std::size_t d = cfg.d_model;
  const bool shared = mask.shared;
  const bool tokens = mask.any_tokens();
  for (const auto& bc : fc.blocks)
    require(!bc.routed, "backward through a routed (intervened) forward pass is not supported");

  std::vector<Real> dtau(d, Real(0));
  std::span<const Real> tauv(fc.tau);

  // final layer
  T d_out = patchify(d_pred, cfg);
  T d_mod;
  detail::linear_backward(fc.mod_final, s.out_w, d_out, shared ? &gs.out_w : nullptr, shared ? &gs.out_b : nullptr,
                          &d_mod);
  T d_ln;
  detail::modulate_backward(d_mod, fc.ln_final.normalized, s.final_mod, tauv, shared ? &gs.final_mod : nullptr,
                            std::span<Real>(dtau), d_ln);
  T dx = layer_norm_backward(d_ln, fc.ln_final);

  // lowest block whose input gradient is still needed
  std::size_t lowest = cfg.layers;
  for (std::size_t b = 0; b < cfg.layers; ++b)
    if (mask.block(b)) {
      lowest = b;
      break;
    }
  if (shared || tokens) lowest = 0;

  T d_text(fc.text_embed.shape());  // gradient w.r.t. embedded prompt tokens
  T dc;                             // mmdit text stream gradient
  if (cfg.variant == Variant::mmdit) dc = T(fc.text_embed.shape());

  for (std::size_t bi = cfg.layers; bi-- > lowest;) {
    const auto& bc = fc.blocks[bi];
    const bool want = mask.block(bi);
    if (cfg.variant == Variant::cross_attn) {
      const auto& bp = params.cross[bi];
      auto* gb = want ? &grads.cross[bi] : nullptr;
      detail::mlp_backward(bp.mlp, bp.mod_mlp, tauv, bc.mlp_x, dx, gb ? &gb->mlp : nullptr,
                           gb ? &gb->mod_mlp : nullptr, std::span<Real>(dtau));
      if (cfg.has_cross(bi)) {
        T d_o, dq, dk, dv, d_modc, d_lnc, d_tmp;
        detail::linear_backward(bc.cross.o, bp.cross_attn.w_o, dx, gb ? &gb->cross_attn.w_o : nullptr,
                                (T*)nullptr, &d_o);
        detail::attention_backward(bc.cross.q, bc.cross.k, bc.cross.v, bc.cross.probs, d_o, dq, dk, dv);
        detail::linear_backward(bc.mod_cross, bp.cross_attn.w_q, dq, gb ? &gb->cross_attn.w_q : nullptr,
                                (T*)nullptr, &d_modc);
        detail::linear_backward(bc.text, bp.cross_attn.w_k, dk, gb ? &gb->cross_attn.w_k : nullptr, (T*)nullptr,
                                tokens ? &d_tmp : (T*)nullptr);
        if (tokens) add_inplace(d_text, d_tmp);
        detail::linear_backward(bc.text, bp.cross_attn.w_v, dv, gb ? &gb->cross_attn.w_v : nullptr, (T*)nullptr,
                                tokens ? &d_tmp : (T*)nullptr);
        if (tokens) add_inplace(d_text, d_tmp);
        detail::modulate_backward(d_modc, bc.ln_cross.normalized, bp.mod_cross, tauv,
                                  gb ? &gb->mod_cross : nullptr, std::span<Real>(dtau), d_lnc);
        add_inplace(dx, layer_norm_backward(d_lnc, bc.ln_cross));
      }
      // self-attention
      T d_o, dq, dk, dv, d_m, d_tmp, d_lnx;
      detail::linear_backward(bc.attn.o, bp.self_attn.w_o, dx, gb ? &gb->self_attn.w_o : nullptr, (T*)nullptr,
                              &d_o);
      detail::attention_backward(bc.attn.q, bc.attn.k, bc.attn.v, bc.attn.probs, d_o, dq, dk, dv);
      detail::linear_backward(bc.mod_attn_x, bp.self_attn.w_q, dq, gb ? &gb->self_attn.w_q : nullptr, (T*)nullptr,
                              &d_m);
      detail::linear_backward(bc.mod_attn_x, bp.self_attn.w_k, dk, gb ? &gb->self_attn.w_k : nullptr, (T*)nullptr,
                              &d_tmp);
      add_inplace(d_m, d_tmp);
      detail::linear_backward(bc.mod_attn_x, bp.self_attn.w_v, dv, gb ? &gb->self_attn.w_v : nullptr, (T*)nullptr,
                              &d_tmp);
      add_inplace(d_m, d_tmp);
      detail::modulate_backward(d_m, bc.ln_attn_x.normalized, bp.mod_self, tauv, gb ? &gb->mod_self : nullptr,
                                std::span<Real>(dtau), d_lnx);
      add_inplace(dx, layer_norm_backward(d_lnx, bc.ln_attn_x));
    } else {
      const auto& bp = params.joint[bi];
      auto* gb = want ? &grads.joint[bi] : nullptr;
      const std::size_t tl = cfg.text_len;
      detail::mlp_backward(bp.mlp_x, bp.mod_mlp_x, tauv, bc.mlp_x, dx, gb ? &gb->mlp_x : nullptr,
                           gb ? &gb->mod_mlp_x : nullptr, std::span<Real>(dtau));
      detail::mlp_backward(bp.mlp_c, bp.mod_mlp_c, tauv, bc.mlp_c, dc, gb ? &gb->mlp_c : nullptr,
                           gb ? &gb->mod_mlp_c : nullptr, std::span<Real>(dtau));
      T o_c = detail::slice_rows(bc.attn.o, 0, tl);
      T o_x = detail::slice_rows(bc.attn.o, tl, bc.attn.o.rows());
      T d_oc, d_ox;
      detail::linear_backward(o_c, bp.attn_c.w_o, dc, gb ? &gb->attn_c.w_o : nullptr, (T*)nullptr, &d_oc);
      detail::linear_backward(o_x, bp.attn_x.w_o, dx, gb ? &gb->attn_x.w_o : nullptr, (T*)nullptr, &d_ox);
      T d_o = detail::vstack(d_oc, d_ox);
      T dq, dk, dv;
      detail::attention_backward(bc.attn.q, bc.attn.k, bc.attn.v, bc.attn.probs, d_o, dq, dk, dv);
      auto stream = [&](std::size_t begin, std::size_t end, const AttentionParams<Real>& ap,
                        AttentionParams<Real>* ga, const BasicTensor<Real>& mod_in, const LayerNormCache<Real>& ln,
                        const Modulation<Real>& mp, Modulation<Real>* gm, T& d_stream) {
        T d_m, d_tmp, d_lnv;
        detail::linear_backward(mod_in, ap.w_q, detail::slice_rows(dq, begin, end), ga ? &ga->w_q : nullptr,
                                (T*)nullptr, &d_m);
        detail::linear_backward(mod_in, ap.w_k, detail::slice_rows(dk, begin, end), ga ? &ga->w_k : nullptr,
                                (T*)nullptr, &d_tmp);
        add_inplace(d_m, d_tmp);
        detail::linear_backward(mod_in, ap.w_v, detail::slice_rows(dv, begin, end), ga ? &ga->w_v : nullptr,
                                (T*)nullptr, &d_tmp);
        add_inplace(d_m, d_tmp);
        detail::modulate_backward(d_m, ln.normalized, mp, tauv, gm, std::span<Real>(dtau), d_lnv);
        add_inplace(d_stream, layer_norm_backward(d_lnv, ln));
      };
      stream(0, tl, bp.attn_c, gb ? &gb->attn_c : nullptr, bc.mod_attn_c, bc.ln_attn_c, bp.mod_attn_c,
             gb ? &gb->mod_attn_c : nullptr, dc);
      stream(tl, tl + cfg.image_tokens(), bp.attn_x, gb ? &gb->attn_x : nullptr, bc.mod_attn_x, bc.ln_attn_x,
             bp.mod_attn_x, gb ? &gb->mod_attn_x : nullptr, dx);
    }
  }

  if (cfg.variant == Variant::mmdit && lowest == 0) d_text = dc;

  if (lowest == 0) {
    if (shared) {
      for (std::size_t r = 0; r < dx.rows(); ++r) {
        auto row = dx.row(r);
        for (std::size_t c = 0; c < d; ++c) dtau[c] += row[c];
      }
      add_inplace(gs.pos_embed, dx);
      detail::linear_backward(fc.patches, s.patch_w, dx, &gs.patch_w, &gs.patch_b, (T*)nullptr);
      // time MLP
      T ta({1, d}, fc.time_act), tf({1, cfg.time_dim}, fc.time_features), g_tau({1, d}, dtau), d_ta;
      detail::linear_backward(ta, s.time_w2, g_tau, &gs.time_w2, &gs.time_b2, &d_ta);
      for (std::size_t c = 0; c < d; ++c) d_ta[c] *= gelu_grad_scalar(fc.time_hidden[c]);
      detail::linear_backward(tf, s.time_w1, d_ta, &gs.time_w1, &gs.time_b1, (T*)nullptr);
    }
    if (tokens) {
      for (std::size_t j = 0; j < fc.tokens.size(); ++j) {
        const int id = fc.tokens[j];
        if (!mask.token_row(id)) continue;
        auto src = d_text.row(j);
        auto dst = gs.token_embed.row(std::size_t(id));
        for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
      }
    }
  }
}

}  // namespace ditprobe
