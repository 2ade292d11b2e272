// Dense tensor kernels, counter-based RNG and the AdamW recurrence.
//
// Everything here is single-threaded and deterministic: the same inputs give
// bitwise-identical outputs on every run.
#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace ditprobe {

/// Raised whenever a documented precondition is violated.
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ContractViolation(what);
}

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

/// Row-major dense tensor owning its storage.
template <class Real>
class BasicTensor {
 public:
  using value_type = Real;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape, Real fill = Real(0))
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}
  BasicTensor(Shape shape, std::vector<Real> data) : shape_(std::move(shape)), data_(std::move(data)) {
    require(shape_size(shape_) == data_.size(),
            "tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                shape_string(shape_));
  }

  /// 2-D convenience constructor from nested rows.
  static BasicTensor matrix(std::initializer_list<std::initializer_list<Real>> rows) {
    std::vector<Real> data;
    std::size_t cols = rows.size() ? rows.begin()->size() : 0;
    for (const auto& r : rows) {
      require(r.size() == cols, "ragged matrix literal");
      data.insert(data.end(), r.begin(), r.end());
    }
    return BasicTensor({rows.size(), cols}, std::move(data));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  /// Leading dimension; the remaining dimensions are flattened into cols().
  std::size_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
  std::size_t cols() const { return rows() ? data_.size() / rows() : 0; }

  Real* data() { return data_.data(); }
  const Real* data() const { return data_.data(); }
  std::span<Real> values() { return data_; }
  std::span<const Real> values() const { return data_; }
  std::vector<Real>& storage() { return data_; }
  const std::vector<Real>& storage() const { return data_; }

  Real& operator[](std::size_t i) { return data_[i]; }
  const Real& operator[](std::size_t i) const { return data_[i]; }
  Real& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  const Real& operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<Real> row(std::size_t r) {
    const std::size_t n = cols();
    return {data_.data() + r * n, n};
  }
  std::span<const Real> row(std::size_t r) const {
    const std::size_t n = cols();
    return {data_.data() + r * n, n};
  }

  void fill(Real v) { std::fill(data_.begin(), data_.end(), v); }
  void reshape(Shape shape) {
    require(shape_size(shape) == data_.size(), "reshape to " + shape_string(shape) + " changes size");
    shape_ = std::move(shape);
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](Real v) { return std::isfinite(v); });
  }

  template <class Other>
  BasicTensor<Other> cast() const {
    return BasicTensor<Other>(shape_, std::vector<Other>(data_.begin(), data_.end()));
  }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<Real> data_;
};

using Tensor = BasicTensor<double>;
using TensorF = BasicTensor<float>;

// ---------------------------------------------------------------- elementwise

template <class Real>
void add_inplace(BasicTensor<Real>& a, const BasicTensor<Real>& b) {
  require(a.size() == b.size(), "add_inplace size mismatch");
  Real* x = a.data();
  const Real* y = b.data();
  for (std::size_t i = 0; i < a.size(); ++i) x[i] += y[i];
}

template <class Real>
void axpy(Real alpha, const BasicTensor<Real>& x, BasicTensor<Real>& y) {
  require(x.size() == y.size(), "axpy size mismatch");
  const Real* px = x.data();
  Real* py = y.data();
  for (std::size_t i = 0; i < y.size(); ++i) py[i] += alpha * px[i];
}

template <class Real>
Real squared_norm(std::span<const Real> v) {
  Real s = 0;
  for (Real x : v) s += x * x;
  return s;
}

template <class Real>
Real max_abs_diff(const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
  require(a.size() == b.size(), "max_abs_diff size mismatch");
  Real m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// ---------------------------------------------------------------- matmul

/// C = op(A) * op(B), optionally accumulating into C. A and B are viewed as
/// matrices (rows x cols). The loop orders keep the innermost loop
/// contiguous so the compiler can vectorize it without reassociation.
template <class Real>
void gemm(const BasicTensor<Real>& a, bool trans_a, const BasicTensor<Real>& b, bool trans_b,
          BasicTensor<Real>& c, bool accumulate = false) {
  const std::size_t a_rows = a.rows(), a_cols = a.cols();
  const std::size_t b_rows = b.rows(), b_cols = b.cols();
  const std::size_t m = trans_a ? a_cols : a_rows;
  const std::size_t k = trans_a ? a_rows : a_cols;
  const std::size_t kb = trans_b ? b_cols : b_rows;
  const std::size_t n = trans_b ? b_rows : b_cols;
  require(k == kb, "matmul inner dimension mismatch: " + shape_string(a.shape()) + " * " +
                       shape_string(b.shape()));
  if (c.rows() != m || c.cols() != n || c.rank() != 2) {
    require(!accumulate, "gemm accumulate target has shape " + shape_string(c.shape()));
    c = BasicTensor<Real>({m, n});
  } else if (!accumulate) {
    c.fill(Real(0));
  }
  using Mat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const Mat> ma(a.data(), Eigen::Index(a_rows), Eigen::Index(a_cols));
  Eigen::Map<const Mat> mb(b.data(), Eigen::Index(b_rows), Eigen::Index(b_cols));
  Eigen::Map<Mat> mc(c.data(), Eigen::Index(m), Eigen::Index(n));
  if (!trans_a && !trans_b)
    mc.noalias() += ma * mb;
  else if (trans_a && !trans_b)
    mc.noalias() += ma.transpose() * mb;
  else if (!trans_a)
    mc.noalias() += ma * mb.transpose();
  else
    mc.noalias() += ma.transpose() * mb.transpose();
}

template <class Real>
BasicTensor<Real> matmul(const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
  require(a.rank() == 2 && b.rank() == 2, "matmul expects matrices");
  BasicTensor<Real> c;
  gemm(a, false, b, false, c);
  return c;
}

template <class Real>
BasicTensor<Real> transpose(const BasicTensor<Real>& a) {
  BasicTensor<Real> t({a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

// ---------------------------------------------------------------- softmax

/// Numerically stable softmax of one contiguous slice, in place.
template <class Real>
void softmax_inplace(std::span<Real> v) {
  if (v.empty()) return;
  const Real mx = *std::max_element(v.begin(), v.end());
  Real sum = 0;
  for (Real& x : v) {
    x = std::exp(x - mx);
    sum += x;
  }
  const Real inv = Real(1) / sum;
  for (Real& x : v) x *= inv;
}

/// Softmax along `axis`; every slice along that axis sums to one.
template <class Real>
BasicTensor<Real> softmax(const BasicTensor<Real>& x, std::size_t axis) {
  require(axis < std::max<std::size_t>(x.rank(), 1), "softmax axis out of range");
  BasicTensor<Real> out = x;
  if (x.empty()) return out;
  const std::size_t len = x.rank() ? x.dim(axis) : x.size();
  std::size_t inner = 1;
  for (std::size_t d = axis + 1; d < x.rank(); ++d) inner *= x.dim(d);
  const std::size_t outer = x.size() / (len * inner);
  std::vector<Real> buf(len);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      for (std::size_t l = 0; l < len; ++l) buf[l] = x[base + l * inner];
      softmax_inplace(std::span<Real>(buf));
      for (std::size_t l = 0; l < len; ++l) out[base + l * inner] = buf[l];
    }
  }
  return out;
}

// ---------------------------------------------------------------- layer norm

/// Per-row normalization statistics kept for the backward pass.
template <class Real>
struct LayerNormCache {
  BasicTensor<Real> normalized;  // pre-affine output
  std::vector<Real> inv_std;
};

/// Pre-affine layer norm over the last axis; fills `cache`.
template <class Real>
void layer_norm_rows(const BasicTensor<Real>& x, Real eps, LayerNormCache<Real>& cache) {
  const std::size_t n = x.cols();
  require(n >= 2, "layer_norm needs at least two features");
  cache.normalized = BasicTensor<Real>(x.shape());
  cache.inv_std.assign(x.rows(), Real(0));
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    auto out = cache.normalized.row(r);
    Real mean = 0;
    for (Real v : in) mean += v;
    mean /= Real(n);
    Real var = 0;
    for (Real v : in) var += (v - mean) * (v - mean);
    var /= Real(n);
    const Real inv = Real(1) / std::sqrt(var + eps);
    cache.inv_std[r] = inv;
    for (std::size_t c = 0; c < n; ++c) out[c] = (in[c] - mean) * inv;
  }
}

template <class Real>
BasicTensor<Real> layer_norm(const BasicTensor<Real>& x, std::span<const Real> gain,
                             std::span<const Real> bias, Real eps) {
  LayerNormCache<Real> cache;
  layer_norm_rows(x, eps, cache);
  const std::size_t n = x.cols();
  require(gain.size() == n && bias.size() == n, "layer_norm affine size mismatch");
  BasicTensor<Real> out = std::move(cache.normalized);
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t c = 0; c < n; ++c) row[c] = row[c] * gain[c] + bias[c];
  }
  return out;
}

/// Gradient of the pre-affine layer norm: given dL/d(normalized), returns dL/dx.
template <class Real>
BasicTensor<Real> layer_norm_backward(const BasicTensor<Real>& grad_normalized,
                                      const LayerNormCache<Real>& cache) {
  const std::size_t n = grad_normalized.cols();
  BasicTensor<Real> dx(grad_normalized.shape());
  for (std::size_t r = 0; r < dx.rows(); ++r) {
    auto g = grad_normalized.row(r);
    auto y = cache.normalized.row(r);
    Real mean_g = 0, mean_gy = 0;
    for (std::size_t c = 0; c < n; ++c) {
      mean_g += g[c];
      mean_gy += g[c] * y[c];
    }
    mean_g /= Real(n);
    mean_gy /= Real(n);
    auto out = dx.row(r);
    const Real inv = cache.inv_std[r];
    for (std::size_t c = 0; c < n; ++c) out[c] = inv * (g[c] - mean_g - y[c] * mean_gy);
  }
  return dx;
}

// ---------------------------------------------------------------- gelu

inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

template <class Real>
Real gelu_scalar(Real x) {
  const Real u = Real(kGeluC) * (x + Real(0.044715) * x * x * x);
  return Real(0.5) * x * (Real(1) + std::tanh(u));
}

template <class Real>
Real gelu_grad_scalar(Real x) {
  const Real u = Real(kGeluC) * (x + Real(0.044715) * x * x * x);
  const Real th = std::tanh(u);
  const Real du = Real(kGeluC) * (Real(1) + Real(3 * 0.044715) * x * x);
  return Real(0.5) * (Real(1) + th) + Real(0.5) * x * (Real(1) - th * th) * du;
}

/// Tanh-approximation GELU.
template <class Real>
BasicTensor<Real> gelu(const BasicTensor<Real>& x) {
  BasicTensor<Real> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = gelu_scalar(x[i]);
  return out;
}

// ---------------------------------------------------------------- rng

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Philox4x32-10 keyed by a 64-bit seed. The stream is a pure function of
/// (seed, counter), so a generator can be forked or restarted at any point
/// and reproduce the same values on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

  /// Independent generator for a named sub-stream.
  Rng fork(std::uint64_t tag) const { return Rng(splitmix64(seed_ ^ splitmix64(tag + 0x5851F42D4C957F2DULL))); }

  std::uint32_t next_u32() {
    if (buffered_ == 0) refill();
    return block_[4 - buffered_--];
  }

  std::uint64_t next_u64() {
    const std::uint64_t hi = next_u32();
    return (hi << 32) | next_u32();
  }

  /// Uniform in (0, 1); never returns exactly 0 so log() is safe.
  double uniform() { return (double(next_u64() >> 11) + 0.5) * (1.0 / 9007199254740992.0); }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  std::size_t below(std::size_t n) {
    require(n > 0, "Rng::below(0)");
    return std::size_t(next_u64() % n);
  }

  /// Standard normal via Box-Muller; both outputs are used.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = uniform(), u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double th = 6.283185307179586 * u2;
    spare_ = r * std::sin(th);
    has_spare_ = true;
    return r * std::cos(th);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
  }

 private:
  void refill() {
    std::array<std::uint32_t, 4> ctr{std::uint32_t(counter_), std::uint32_t(counter_ >> 32), 0u, 0u};
    std::array<std::uint32_t, 2> key{std::uint32_t(seed_), std::uint32_t(seed_ >> 32)};
    for (int round = 0; round < 10; ++round) {
      const std::uint64_t p0 = std::uint64_t(0xD2511F53u) * ctr[0];
      const std::uint64_t p1 = std::uint64_t(0xCD9E8D57u) * ctr[2];
      ctr = {std::uint32_t(p1 >> 32) ^ ctr[1] ^ key[0], std::uint32_t(p1), std::uint32_t(p0 >> 32) ^ ctr[3] ^ key[1],
             std::uint32_t(p0)};
      key[0] += 0x9E3779B9u;
      key[1] += 0xBB67AE85u;
    }
    block_ = ctr;
    buffered_ = 4;
    ++counter_;
  }

  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
  std::array<std::uint32_t, 4> block_{};
  int buffered_ = 0;
  bool has_spare_ = false;
  double spare_ = 0;
};

template <class Real>
BasicTensor<Real> rng_normal(Rng& rng, const Shape& shape) {
  BasicTensor<Real> t(shape);
  for (auto& v : t.storage()) v = Real(rng.normal());
  return t;
}

/// Shortest decimal text that reads back to exactly the same double.
inline std::string format_real(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

// ---------------------------------------------------------------- adamw

struct AdamWHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// One AdamW step (decoupled weight decay) over a contiguous run of elements.
/// `step` is 1-based and drives the bias correction.
template <class Real>
void adamw_update(std::span<Real> param, std::span<const Real> grad, std::span<Real> moment1,
                  std::span<Real> moment2, std::int64_t step, const AdamWHyper& hyper) {
  require(param.size() == grad.size() && param.size() == moment1.size() && param.size() == moment2.size(),
          "adamw_update shape mismatch");
  require(step >= 1, "adamw_update step must be >= 1");
  for (Real g : grad)
    if (!std::isfinite(g)) throw ContractViolation("adamw_update: non-finite gradient rejected");
  const Real b1 = Real(hyper.beta1), b2 = Real(hyper.beta2);
  const Real c1 = Real(1) / (Real(1) - Real(std::pow(hyper.beta1, double(step))));
  const Real c2 = Real(1) / (Real(1) - Real(std::pow(hyper.beta2, double(step))));
  const Real lr = Real(hyper.lr), wd = Real(hyper.weight_decay), eps = Real(hyper.eps);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const Real g = grad[i];
    moment1[i] = b1 * moment1[i] + (Real(1) - b1) * g;
    moment2[i] = b2 * moment2[i] + (Real(1) - b2) * g * g;
    const Real mh = moment1[i] * c1;
    const Real vh = moment2[i] * c2;
    param[i] -= lr * (mh / (std::sqrt(vh) + eps) + wd * param[i]);
  }
}

template <class Real>
void adamw_update(BasicTensor<Real>& param, const BasicTensor<Real>& grad, BasicTensor<Real>& moment1,
                  BasicTensor<Real>& moment2, std::int64_t step, const AdamWHyper& hyper) {
  require(param.size() == grad.size(), "adamw_update shape mismatch");
  adamw_update(std::span<Real>(param.storage()), std::span<const Real>(grad.storage()),
               std::span<Real>(moment1.storage()), std::span<Real>(moment2.storage()), step, hyper);
}

}  // namespace ditprobe
