#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "tscnn/batch_norm.hpp"
#include "tscnn/conv.hpp"
#include "tscnn/tensor.hpp"

namespace tscnn {

using Rng = std::mt19937_64;

template <class T>
struct AdamState {
  std::vector<T> m;
  std::vector<T> v;
  std::uint64_t step = 0;
};

/// Named trainable parameters (plus non-trainable buffers such as
/// batch-norm running statistics). Iteration is sorted by name.
template <class T>
class ParamStore {
 public:
  void add(const std::string& name, Tensor<T> value) {
    if (params_.count(name) || buffers_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    value.set_requires_grad(true);
    params_.emplace(name, std::move(value));
  }

  void add_buffer(const std::string& name, Tensor<T> value) {
    if (params_.count(name) || buffers_.count(name)) throw ConfigError("duplicate buffer name '" + name + "'");
    buffers_.emplace(name, std::move(value));
  }

  bool contains(const std::string& name) const { return params_.count(name) > 0; }

  const Tensor<T>& get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("missing parameter '" + name + "'");
    return it->second;
  }
  Tensor<T>& get(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("missing parameter '" + name + "'");
    return it->second;
  }

  Tensor<T>& buffer(const std::string& name) {
    auto it = buffers_.find(name);
    if (it == buffers_.end()) throw ConfigError("missing buffer '" + name + "'");
    return it->second;
  }
  const Tensor<T>& buffer(const std::string& name) const {
    auto it = buffers_.find(name);
    if (it == buffers_.end()) throw ConfigError("missing buffer '" + name + "'");
    return it->second;
  }

  const std::map<std::string, Tensor<T>>& params() const { return params_; }
  std::map<std::string, Tensor<T>>& params() { return params_; }
  const std::map<std::string, Tensor<T>>& buffers() const { return buffers_; }
  std::map<std::string, Tensor<T>>& buffers() { return buffers_; }
  std::map<std::string, AdamState<T>>& adam() { return adam_; }

  std::size_t count(std::string_view prefix = {}) const {
    std::size_t n = 0;
    for (const auto& [name, t] : params_)
      if (name.starts_with(prefix)) n += t.size();
    return n;
  }

  void zero_grad() {
    for (auto& [name, t] : params_) t.clear_grad();
  }

  /// Deep copy: fresh storage, no grads, no optimizer state.
  ParamStore clone() const {
    ParamStore out;
    for (const auto& [name, t] : params_) out.add(name, t.detach());
    for (const auto& [name, t] : buffers_) out.add_buffer(name, t.detach());
    return out;
  }

 private:
  std::map<std::string, Tensor<T>> params_;
  std::map<std::string, Tensor<T>> buffers_;
  std::map<std::string, AdamState<T>> adam_;
};

/// He-normal weights: Normal(0, sqrt(2 / fan_in)).
template <class T>
Tensor<T> init_param(Shape shape, std::size_t fan_in, Rng& rng) {
  if (fan_in == 0) throw InvalidArgument("init_param: fan_in must be >= 1");
  std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  Tensor<T> t(std::move(shape), T(0));
  for (auto& v : t.data()) v = static_cast<T>(normal(rng));
  return t;
}

template <class T>
void register_conv(ParamStore<T>& store, const std::string& prefix, std::size_t in_ch, std::size_t out_ch,
                   std::size_t k, Rng& rng) {
  store.add(prefix + ".weight", init_param<T>({out_ch, in_ch, k, k}, in_ch * k * k, rng));
  store.add(prefix + ".bias", Tensor<T>::zeros({out_ch}));
}

template <class T>
void register_deconv(ParamStore<T>& store, const std::string& prefix, std::size_t in_ch, std::size_t out_ch,
                     std::size_t k, Rng& rng) {
  store.add(prefix + ".weight", init_param<T>({in_ch, out_ch, k, k}, in_ch * k * k, rng));
  store.add(prefix + ".bias", Tensor<T>::zeros({out_ch}));
}

template <class T>
void register_bn(ParamStore<T>& store, const std::string& prefix, std::size_t channels) {
  store.add(prefix + ".gamma", Tensor<T>::ones({channels}));
  store.add(prefix + ".beta", Tensor<T>::zeros({channels}));
  store.add_buffer(prefix + ".running_mean", Tensor<T>::zeros({channels}));
  store.add_buffer(prefix + ".running_var", Tensor<T>::ones({channels}));
}

struct ResidualUnitConfig {
  std::size_t in_channels;
  std::size_t out_channels;
  std::size_t stride = 1;

  bool has_projection() const { return in_channels != out_channels || stride != 1; }
};

template <class T>
void register_residual_unit(ParamStore<T>& store, const std::string& prefix, const ResidualUnitConfig& cfg,
                            Rng& rng) {
  if (cfg.stride != 1 && cfg.stride != 2) throw ConfigError("residual unit stride must be 1 or 2");
  register_bn(store, prefix + ".bn1", cfg.in_channels);
  register_conv(store, prefix + ".conv1", cfg.in_channels, cfg.out_channels, 3, rng);
  register_bn(store, prefix + ".bn2", cfg.out_channels);
  register_conv(store, prefix + ".conv2", cfg.out_channels, cfg.out_channels, 3, rng);
  if (cfg.has_projection()) register_conv(store, prefix + ".proj", cfg.in_channels, cfg.out_channels, 1, rng);
}

template <class T>
Tensor<T> apply_bn(const Tensor<T>& x, ParamStore<T>& store, const std::string& prefix, Mode mode) {
  BatchNormState<T> state(store.buffer(prefix + ".running_mean"), store.buffer(prefix + ".running_var"));
  return batch_norm2d(x, store.get(prefix + ".gamma"), store.get(prefix + ".beta"), state, mode);
}

template <class T>
Tensor<T> apply_conv(const Tensor<T>& x, const ParamStore<T>& store, const std::string& prefix, std::size_t stride,
                     std::size_t padding) {
  return conv2d(x, store.get(prefix + ".weight"), store.get(prefix + ".bias"), stride, padding);
}

/// Pre-activation residual unit:
///   branch = conv3x3(relu(bn2(conv3x3(relu(bn1(x)), stride)))), 1)
///   out    = branch + (x | proj1x1(x, stride))
template <class T>
Tensor<T> residual_unit(const Tensor<T>& x, const ResidualUnitConfig& cfg, ParamStore<T>& store,
                        const std::string& prefix, Mode mode) {
  if (x.rank() != 4 || x.dim(1) != cfg.in_channels) {
    throw InvalidShape("residual unit '" + prefix + "': expected " + std::to_string(cfg.in_channels) +
                       " input channels, got " + shape_str(x.shape()));
  }
  Tensor<T> h = relu(apply_bn(x, store, prefix + ".bn1", mode));
  h = apply_conv(h, store, prefix + ".conv1", cfg.stride, 1);
  h = relu(apply_bn(h, store, prefix + ".bn2", mode));
  h = apply_conv(h, store, prefix + ".conv2", 1, 1);
  Tensor<T> shortcut = cfg.has_projection() ? apply_conv(x, store, prefix + ".proj", cfg.stride, 0) : x;
  return add(h, shortcut);
}

struct AdamOptions {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update over every parameter, then clears grads.
template <class T>
void adam_step(ParamStore<T>& store, const AdamOptions& opt = {}) {
  for (auto& [name, p] : store.params()) {
    if (!p.has_grad()) throw InvalidState("adam_step: parameter '" + name + "' has no gradient");
  }
  for (auto& [name, p] : store.params()) {
    auto& st = store.adam()[name];
    if (st.m.size() != p.size()) {
      st.m.assign(p.size(), T(0));
      st.v.assign(p.size(), T(0));
      st.step = 0;
    }
    ++st.step;
    const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(st.step));
    const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(st.step));
    auto data = p.data();
    auto grad = p.grad();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double g = grad[i];
      const double m = opt.beta1 * st.m[i] + (1.0 - opt.beta1) * g;
      const double v = opt.beta2 * st.v[i] + (1.0 - opt.beta2) * g * g;
      st.m[i] = static_cast<T>(m);
      st.v[i] = static_cast<T>(v);
      const double mhat = m / c1, vhat = v / c2;
      data[i] = static_cast<T>(data[i] - opt.lr * mhat / (std::sqrt(vhat) + opt.eps));
    }
    p.zero_grad();
  }
}

// ---------------------------------------------------------------------------
// Checkpoint container "TSCK"
// ---------------------------------------------------------------------------

namespace io {

inline void put_u8(std::string& buf, std::uint8_t v) { buf.push_back(static_cast<char>(v)); }
inline void put_u16(std::string& buf, std::uint16_t v) {
  for (int i = 0; i < 2; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_f32(std::string& buf, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(buf, bits);
}

/// Bounds-checked little-endian cursor over a byte buffer.
class Reader {
 public:
  explicit Reader(std::string bytes) : bytes_(std::move(bytes)) {}

  std::uint64_t offset() const { return pos_; }
  bool at_end() const { return pos_ == bytes_.size(); }

  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) {
      throw FormatError(std::string("truncated file while reading ") + what, pos_);
    }
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return static_cast<std::uint8_t>(bytes_[pos_++]);
  }
  std::uint16_t u16(const char* what) {
    need(2, what);
    std::uint16_t v = 0;
    for (int i = 0; i < 2; ++i) v |= static_cast<std::uint16_t>(static_cast<std::uint8_t>(bytes_[pos_++])) << (8 * i);
    return v;
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes_[pos_++])) << (8 * i);
    return v;
  }
  float f32(const char* what) {
    std::uint32_t bits = u32(what);
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
  }
  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  std::string bytes_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "' for reading");
  return std::string(std::istreambuf_iterator<char>(in), {});
}

/// Writes via a temporary sibling then renames into place.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open '" + tmp.string() + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed for '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace io

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Serializes parameters and buffers (batch-norm running statistics) as f32.
template <class T>
std::string encode_checkpoint(const ParamStore<T>& store) {
  std::string buf = "TSCK";
  io::put_u32(buf, kCheckpointVersion);
  io::put_u32(buf, static_cast<std::uint32_t>(store.params().size() + store.buffers().size()));
  auto put = [&](const std::string& name, const Tensor<T>& t) {
    io::put_u16(buf, static_cast<std::uint16_t>(name.size()));
    buf += name;
    io::put_u8(buf, static_cast<std::uint8_t>(t.rank()));
    for (auto e : t.shape()) io::put_u32(buf, static_cast<std::uint32_t>(e));
    for (T v : t.values()) io::put_f32(buf, static_cast<float>(v));
  };
  // Parameters and buffers share one sorted namespace.
  std::map<std::string, const Tensor<T>*> all;
  for (const auto& [n, t] : store.params()) all.emplace(n, &t);
  for (const auto& [n, t] : store.buffers()) all.emplace(n, &t);
  for (const auto& [n, t] : all) put(n, *t);
  return buf;
}

/// Named tensors read back from a checkpoint.
template <class T>
std::map<std::string, Tensor<T>> decode_checkpoint(std::string bytes) {
  io::Reader r(std::move(bytes));
  std::string magic = r.bytes(4, "magic");
  if (magic != "TSCK") throw FormatError("bad checkpoint magic '" + magic + "', expected 'TSCK'", 0);
  const auto version_at = r.offset();
  if (auto v = r.u32("version"); v != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(v), version_at);
  }
  const std::uint32_t count = r.u32("entry count");
  std::map<std::string, Tensor<T>> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto entry_at = r.offset();
    std::string name = r.bytes(r.u16("name length"), "name");
    const std::uint8_t rank = r.u8("rank");
    Shape shape;
    for (std::uint8_t d = 0; d < rank; ++d) {
      const auto at = r.offset();
      std::uint32_t e = r.u32("extent");
      if (e == 0) throw FormatError("zero extent in entry '" + name + "'", at);
      shape.push_back(e);
    }
    const std::size_t n = numel(shape);
    r.need(n * 4, "tensor data");
    std::vector<T> data(n);
    for (auto& v : data) v = static_cast<T>(r.f32("tensor data"));
    if (!out.emplace(name, Tensor<T>(shape, std::move(data))).second) {
      throw FormatError("duplicate entry '" + name + "'", entry_at);
    }
  }
  if (!r.at_end()) throw FormatError("trailing bytes after last entry", r.offset());
  return out;
}

template <class T>
void save_checkpoint(const std::filesystem::path& path, const ParamStore<T>& store) {
  io::write_file_atomic(path, encode_checkpoint(store));
}

/// Copies checkpoint values into an existing store; shapes and names must match exactly.
template <class T>
void load_into(ParamStore<T>& store, const std::map<std::string, Tensor<T>>& entries) {
  std::size_t matched = 0;
  auto fill = [&](std::map<std::string, Tensor<T>>& dst) {
    for (auto& [name, t] : dst) {
      auto it = entries.find(name);
      if (it == entries.end()) throw ConfigError("checkpoint lacks '" + name + "'");
      if (it->second.shape() != t.shape()) {
        throw InvalidShape("checkpoint entry '" + name + "' has shape " + shape_str(it->second.shape()) +
                           ", model expects " + shape_str(t.shape()));
      }
      std::copy(it->second.values().begin(), it->second.values().end(), t.data().begin());
      ++matched;
    }
  };
  fill(store.params());
  fill(store.buffers());
  if (matched != entries.size()) throw ConfigError("checkpoint has entries the model does not define");
}

/// "name e1,e2,..." per parameter; the architecture manifest.
template <class T>
std::string manifest(const ParamStore<T>& store) {
  std::string out;
  for (const auto& [name, t] : store.params()) {
    out += name + ' ';
    for (std::size_t i = 0; i < t.rank(); ++i) out += (i ? "," : "") + std::to_string(t.dim(i));
    out += '\n';
  }
  return out;
}

}  // namespace tscnn
