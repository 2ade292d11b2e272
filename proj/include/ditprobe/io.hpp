// File formats: binary checkpoints, key-value manifests, CSV tables and PPM
// images.
//
// Checkpoint layout:
//   "DITPROBE"            8-byte magic
//   version               1 byte
//   manifest length       u64, little-endian
//   manifest              UTF-8 "key=value" lines; tensors listed as
//                         "tensor=<name> <f64|f32> <d0>x<d1>x..." in storage order
//   arrays                little-endian IEEE-754, concatenated in manifest order
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ditprobe/eval.hpp"
#include "ditprobe/model.hpp"
#include "ditprobe/numerics.hpp"

namespace ditprobe {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[8] = {'D', 'I', 'T', 'P', 'R', 'O', 'B', 'E'};
inline constexpr std::uint8_t kCheckpointVersion = 1;

// ---------------------------------------------------------------- manifest

/// Ordered key-value text; keys may repeat.
struct Manifest {
  std::vector<std::pair<std::string, std::string>> entries;

  void set(std::string key, std::string value) { entries.emplace_back(std::move(key), std::move(value)); }
  template <class T>
    requires std::is_arithmetic_v<T>
  void set(std::string key, T value) {
    if constexpr (std::is_floating_point_v<T>)
      set(std::move(key), format_real(double(value)));
    else
      set(std::move(key), std::to_string(value));
  }

  const std::string& get(const std::string& key) const {
    for (const auto& [k, v] : entries)
      if (k == key) return v;
    throw IoError("manifest has no key '" + key + "'");
  }
  bool has(const std::string& key) const {
    for (const auto& e : entries)
      if (e.first == key) return true;
    return false;
  }
  std::vector<std::string> all(const std::string& key) const {
    std::vector<std::string> out;
    for (const auto& [k, v] : entries)
      if (k == key) out.push_back(v);
    return out;
  }
  std::size_t get_size(const std::string& key) const { return std::stoull(get(key)); }
  double get_real(const std::string& key) const { return std::stod(get(key)); }

  std::string text() const {
    std::string s;
    for (const auto& [k, v] : entries) s += k + "=" + v + "\n";
    return s;
  }

  static Manifest parse(const std::string& text) {
    Manifest m;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
      if (line.empty() || line[0] == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw IoError("manifest line without '=': " + line);
      m.set(line.substr(0, eq), line.substr(eq + 1));
    }
    return m;
  }
};

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
  if (!os) throw IoError("write failed for " + path.string());
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------- checkpoints

namespace detail {

template <class U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

template <class U>
U get_le(const char* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= U(std::uint8_t(p[i])) << (8 * i);
  return v;
}

template <class Real>
constexpr const char* dtype_name() {
  return sizeof(Real) == 8 ? "f64" : "f32";
}

inline std::string dims_text(const Shape& s) {
  std::string t;
  for (std::size_t i = 0; i < s.size(); ++i) t += (i ? "x" : "") + std::to_string(s[i]);
  return s.empty() ? "scalar" : t;
}

inline Shape parse_dims(const std::string& t) {
  Shape s;
  if (t == "scalar") return s;
  std::istringstream is(t);
  std::string part;
  while (std::getline(is, part, 'x')) s.push_back(std::stoull(part));
  return s;
}

}  // namespace detail

/// Named tensors of one precision plus a manifest; the unit stored on disk.
template <class Real>
struct Checkpoint {
  Manifest manifest;  // metadata only; tensor index lines are generated on save
  std::vector<std::pair<std::string, BasicTensor<Real>>> tensors;

  const BasicTensor<Real>& tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return t;
    throw IoError("checkpoint has no tensor '" + name + "'");
  }
};

template <class Real>
std::string encode_checkpoint(const Checkpoint<Real>& ck) {
  using Bits = std::conditional_t<sizeof(Real) == 8, std::uint64_t, std::uint32_t>;
  Manifest m = ck.manifest;
  for (const auto& [name, t] : ck.tensors)
    m.set("tensor", name + " " + detail::dtype_name<Real>() + " " + detail::dims_text(t.shape()));
  const std::string text = m.text();
  std::string out(kCheckpointMagic, kCheckpointMagic + 8);
  out.push_back(char(kCheckpointVersion));
  detail::put_le<std::uint64_t>(out, text.size());
  out += text;
  for (const auto& [name, t] : ck.tensors)
    for (Real v : t.storage()) detail::put_le<Bits>(out, std::bit_cast<Bits>(v));
  return out;
}

template <class Real>
Checkpoint<Real> decode_checkpoint(const std::string& bytes) {
  using Bits = std::conditional_t<sizeof(Real) == 8, std::uint64_t, std::uint32_t>;
  if (bytes.size() < 17 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
    throw IoError("not a checkpoint (bad magic)");
  if (std::uint8_t(bytes[8]) != kCheckpointVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(int(std::uint8_t(bytes[8]))));
  const auto len = detail::get_le<std::uint64_t>(bytes.data() + 9);
  if (17 + len > bytes.size()) throw IoError("truncated checkpoint manifest");
  Manifest all = Manifest::parse(bytes.substr(17, len));
  Checkpoint<Real> ck;
  std::size_t pos = 17 + len;
  for (const auto& [k, v] : all.entries) {
    if (k != "tensor") {
      ck.manifest.set(k, v);
      continue;
    }
    std::istringstream is(v);
    std::string name, dtype, dims;
    is >> name >> dtype >> dims;
    if (dtype != detail::dtype_name<Real>())
      throw IoError("tensor " + name + " stored as " + dtype + ", requested " + detail::dtype_name<Real>());
    BasicTensor<Real> t(detail::parse_dims(dims));
    if (pos + t.size() * sizeof(Real) > bytes.size()) throw IoError("truncated checkpoint data at " + name);
    for (auto& x : t.storage()) {
      x = std::bit_cast<Real>(detail::get_le<Bits>(bytes.data() + pos));
      pos += sizeof(Real);
    }
    ck.tensors.emplace_back(name, std::move(t));
  }
  if (pos != bytes.size()) throw IoError("trailing bytes after checkpoint data");
  return ck;
}

/// Element type of the first tensor, "f64" or "f32"; "" when the file holds none.
inline std::string checkpoint_dtype(const std::string& bytes) {
  if (bytes.size() < 17 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
    throw IoError("not a checkpoint (bad magic)");
  const auto len = detail::get_le<std::uint64_t>(bytes.data() + 9);
  if (17 + len > bytes.size()) throw IoError("truncated checkpoint manifest");
  for (const auto& v : Manifest::parse(bytes.substr(17, len)).all("tensor")) {
    std::istringstream is(v);
    std::string name, dtype;
    is >> name >> dtype;
    return dtype;
  }
  return "";
}

template <class Real>
void save_checkpoint(const std::filesystem::path& path, const Checkpoint<Real>& ck) {
  write_text_file(path, encode_checkpoint(ck));
}

template <class Real>
Checkpoint<Real> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint<Real>(read_text_file(path));
}

// ---------------------------------------------------------------- model and classifier

inline void write_model_config(Manifest& m, const ModelConfig& c) {
  m.set("kind", "ditprobe.model");
  m.set("variant", variant_name(c.variant));
  m.set("layers", c.layers);
  m.set("heads", c.heads);
  m.set("d_model", c.d_model);
  m.set("text_len", c.text_len);
  m.set("image_size", c.image_size);
  m.set("channels", c.channels);
  m.set("patch", c.patch);
  m.set("vocab", c.vocab);
  m.set("time_dim", c.time_dim);
  m.set("mlp_hidden", c.mlp_hidden);
  std::string blocks;
  for (auto b : c.cross_blocks) blocks += (blocks.empty() ? "" : ",") + std::to_string(b);
  m.set("cross_blocks", blocks);
  m.set("ln_eps", c.ln_eps);
}

inline ModelConfig read_model_config(const Manifest& m) {
  if (m.get("kind") != "ditprobe.model") throw IoError("checkpoint is not a model");
  ModelConfig c;
  c.variant = parse_variant(m.get("variant"));
  c.layers = m.get_size("layers");
  c.heads = m.get_size("heads");
  c.d_model = m.get_size("d_model");
  c.text_len = m.get_size("text_len");
  c.image_size = m.get_size("image_size");
  c.channels = m.get_size("channels");
  c.patch = m.get_size("patch");
  c.vocab = m.get_size("vocab");
  c.time_dim = m.get_size("time_dim");
  c.mlp_hidden = m.get_size("mlp_hidden");
  std::istringstream is(m.get("cross_blocks"));
  std::string part;
  while (std::getline(is, part, ','))
    if (!part.empty()) c.cross_blocks.push_back(std::stoull(part));
  c.ln_eps = m.get_real("ln_eps");
  return c;
}

template <class Real>
Checkpoint<Real> model_checkpoint(const ModelParams<Real>& p, const Manifest& extra = {}) {
  Checkpoint<Real> ck;
  write_model_config(ck.manifest, p.config);
  for (const auto& e : extra.entries) ck.manifest.set(e.first, e.second);
  p.for_each([&](const std::string& name, int, const BasicTensor<Real>& t) { ck.tensors.emplace_back(name, t); });
  return ck;
}

template <class Real>
ModelParams<Real> params_from_checkpoint(const Checkpoint<Real>& ck) {
  ModelParams<Real> p = zero_params<Real>(read_model_config(ck.manifest));
  std::size_t i = 0;
  p.for_each([&](const std::string& name, int, BasicTensor<Real>& t) {
    if (i >= ck.tensors.size() || ck.tensors[i].first != name)
      throw IoError("checkpoint tensor order mismatch at " + name);
    if (ck.tensors[i].second.shape() != t.shape())
      throw IoError("checkpoint shape mismatch for " + name + ": " + shape_string(ck.tensors[i].second.shape()));
    t = ck.tensors[i++].second;
  });
  if (i != ck.tensors.size()) throw IoError("checkpoint has extra tensors");
  return p;
}

template <class Real>
void save_model(const std::filesystem::path& path, const ModelParams<Real>& p, const Manifest& extra = {}) {
  save_checkpoint(path, model_checkpoint(p, extra));
}

template <class Real>
ModelParams<Real> load_model(const std::filesystem::path& path) {
  return params_from_checkpoint(load_checkpoint<Real>(path));
}

inline Checkpoint<double> classifier_checkpoint(const ClassifierParams& p, const Manifest& extra = {}) {
  Checkpoint<double> ck;
  ck.manifest.set("kind", "ditprobe.classifier");
  ck.manifest.set("image_size", p.config.image_size);
  ck.manifest.set("channels", p.config.channels);
  ck.manifest.set("conv1", p.config.conv1);
  ck.manifest.set("conv2", p.config.conv2);
  ck.manifest.set("features", p.config.features);
  for (std::size_t h = 0; h < kHeads; ++h) ck.manifest.set("outputs", p.config.outputs[h]);
  for (const auto& e : extra.entries) ck.manifest.set(e.first, e.second);
  p.for_each([&](const std::string& name, const Tensor& t) { ck.tensors.emplace_back(name, t); });
  return ck;
}

inline ClassifierParams classifier_from_checkpoint(const Checkpoint<double>& ck) {
  const auto& m = ck.manifest;
  if (m.get("kind") != "ditprobe.classifier") throw IoError("checkpoint is not a classifier");
  ClassifierParams p;
  p.config.image_size = m.get_size("image_size");
  p.config.channels = m.get_size("channels");
  p.config.conv1 = m.get_size("conv1");
  p.config.conv2 = m.get_size("conv2");
  p.config.features = m.get_size("features");
  const auto outs = m.all("outputs");
  if (outs.size() != kHeads) throw IoError("classifier manifest needs one outputs entry per head");
  for (std::size_t h = 0; h < kHeads; ++h) p.config.outputs[h] = std::stoull(outs[h]);
  p.for_each([&](const std::string& name, Tensor& t) { t = ck.tensor(name); });
  return p;
}

// ---------------------------------------------------------------- CSV and PPM

/// Comma-separated table with '\n' line ends and shortest round-trip numbers.
class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}

  class Row {
   public:
    explicit Row(CsvTable& t) : table_(t) {}
    Row& operator<<(const std::string& s) {
      cells_.push_back(s);
      return *this;
    }
    Row& operator<<(const char* s) { return *this << std::string(s); }
    Row& operator<<(double v) { return *this << format_real(v); }
    template <class I>
      requires std::is_integral_v<I>
    Row& operator<<(I v) {
      return *this << std::to_string(v);
    }
    ~Row() { table_.rows_.push_back(std::move(cells_)); }

   private:
    CsvTable& table_;
    std::vector<std::string> cells_;
  };

  Row row() { return Row(*this); }
  std::size_t size() const { return rows_.size(); }
  const std::vector<std::vector<std::string>>& rows() const { return rows_; }

  std::string text() const {
    std::string s = join(header_);
    for (const auto& r : rows_) {
      require(r.size() == header_.size(), "csv row has " + std::to_string(r.size()) + " cells, header has " +
                                              std::to_string(header_.size()));
      s += join(r);
    }
    return s;
  }

  void write(const std::filesystem::path& path) const { write_text_file(path, text()); }

 private:
  static std::string join(const std::vector<std::string>& cells) {
    std::string s;
    for (std::size_t i = 0; i < cells.size(); ++i) s += (i ? "," : "") + cells[i];
    return s + "\n";
  }
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

/// Binary P6 image, 8 bits per channel; input is [3, h, w] in [-1, 1].
template <class Real>
std::string encode_ppm(const BasicTensor<Real>& img) {
  require(img.rank() == 3 && img.dim(0) == 3, "ppm expects a [3, h, w] image");
  const std::size_t h = img.dim(1), w = img.dim(2);
  std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = std::clamp((double(img[(c * h + y) * w + x]) + 1.0) * 0.5, 0.0, 1.0);
        out.push_back(char(std::uint8_t(std::lround(v * 255.0))));
      }
  return out;
}

template <class Real>
void write_ppm(const std::filesystem::path& path, const BasicTensor<Real>& img) {
  write_text_file(path, encode_ppm(img));
}

inline Tensor decode_ppm(const std::string& bytes) {
  std::istringstream is(bytes);
  std::string magic;
  std::size_t w = 0, h = 0, maxv = 0;
  is >> magic >> w >> h >> maxv;
  if (magic != "P6" || maxv != 255) throw IoError("unsupported ppm");
  is.get();
  const auto pos = std::size_t(is.tellg());
  if (bytes.size() != pos + 3 * w * h) throw IoError("ppm size mismatch");
  Tensor img({3, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        img[(c * h + y) * w + x] = double(std::uint8_t(bytes[pos + (y * w + x) * 3 + c])) / 255.0 * 2.0 - 1.0;
  return img;
}

}  // namespace ditprobe
