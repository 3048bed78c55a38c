#pragma once

// Trident segmentation network and its single-slice residual U-Net baseline.
//
// Both share one encoder/decoder implementation. The trident variant runs the
// encoder three times (slices t-1, t, t+1) with one parameter set, stacks each
// scale on a time axis and folds that axis into channels before the decoder.

#include <array>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "tscnn/nn.hpp"

namespace tscnn {

struct ModelConfig {
  std::size_t base_channels = 32;
  std::size_t num_scales = 4;
  std::size_t input_size = 128;
  double seg_threshold = 0.5;

  /// Channel extent of encoder scale i (0-based).
  std::size_t scale_channels(std::size_t i) const { return base_channels << i; }
  std::size_t scale_extent(std::size_t i) const { return input_size >> i; }

  void validate() const {
    if (base_channels < 1) throw ConfigError("base_channels must be >= 1");
    if (num_scales < 1) throw ConfigError("num_scales must be >= 1");
    if (num_scales > 16 || input_size == 0 || input_size % (std::size_t{1} << (num_scales - 1)) != 0) {
      throw ConfigError("input_size " + std::to_string(input_size) + " is not divisible by 2^(num_scales-1) = " +
                        std::to_string(std::size_t{1} << (num_scales - 1)));
    }
  }
};

enum class ModelKind { TsCnn, ResidualUnet };

inline std::string to_string(ModelKind k) { return k == ModelKind::TsCnn ? "tscnn" : "residual_unet"; }

inline ModelKind parse_model_kind(const std::string& s) {
  if (s == "tscnn") return ModelKind::TsCnn;
  if (s == "residual_unet") return ModelKind::ResidualUnet;
  throw ConfigError("unknown model '" + s + "' (expected tscnn or residual_unet)");
}

/// Channel plan of a built network.
struct Architecture {
  ModelKind kind = ModelKind::TsCnn;
  ModelConfig cfg;
  std::size_t time_steps = 3;
  std::vector<std::size_t> encoder_channels;  // per scale, pre-merge
  std::vector<std::size_t> merged_channels;   // per scale, after temporal concat
  std::vector<std::size_t> decoder_concat_in; // per decoder stage: upsampled + skip channels

  std::string describe() const {
    std::ostringstream os;
    os << "model " << to_string(kind) << "\n";
    os << "base_channels " << cfg.base_channels << "\nnum_scales " << cfg.num_scales << "\ninput_size "
       << cfg.input_size << "\ntime_steps " << time_steps << "\n";
    for (std::size_t i = 0; i < encoder_channels.size(); ++i) {
      os << "scale C" << i + 1 << " channels " << encoder_channels[i] << " merged " << merged_channels[i]
         << " extent " << cfg.scale_extent(i) << "\n";
    }
    for (std::size_t i = 0; i < decoder_concat_in.size(); ++i) {
      os << "decoder stage" << i + 1 << " concat_in " << decoder_concat_in[i] << "\n";
    }
    return os.str();
  }
};

/// Per-scale features [C1..Cn].
template <class T>
struct EncoderFeatures {
  std::vector<Tensor<T>> scales;
};

/// Network input: three adjacent slices plus the target for the middle one, each [B,1,H,W].
template <class T>
struct TripletBatch {
  Tensor<T> prev;
  Tensor<T> cur;
  Tensor<T> next;
  Tensor<T> target;
};

template <class T>
class Model {
 public:
  Model(Architecture arch, ParamStore<T> params) : arch_(std::move(arch)), params_(std::move(params)) {}

  const Architecture& arch() const { return arch_; }
  const ModelConfig& config() const { return arch_.cfg; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

 private:
  Architecture arch_;
  ParamStore<T> params_;
};

namespace detail {

inline std::string enc_unit(std::size_t i) { return "encoder.stage" + std::to_string(i + 1) + ".res"; }
inline std::string dec_unit(std::size_t i) { return "decoder.stage" + std::to_string(i + 1) + ".res"; }
inline std::string dec_up(std::size_t i) { return "decoder.up" + std::to_string(i + 1); }

inline ResidualUnitConfig encoder_unit_cfg(const ModelConfig& cfg, std::size_t i) {
  return i == 0 ? ResidualUnitConfig{cfg.scale_channels(0), cfg.scale_channels(0), 1}
                : ResidualUnitConfig{cfg.scale_channels(i - 1), cfg.scale_channels(i), 2};
}

inline ResidualUnitConfig decoder_unit_cfg(const ModelConfig& cfg, std::size_t i, std::size_t time_steps) {
  return {cfg.scale_channels(i) * (time_steps + 1), cfg.scale_channels(i), 1};
}

template <class T>
Model<T> build_model(ModelKind kind, const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Architecture arch;
  arch.kind = kind;
  arch.cfg = cfg;
  arch.time_steps = kind == ModelKind::TsCnn ? 3 : 1;

  Rng rng(seed);
  ParamStore<T> store;
  register_conv(store, "encoder.stem", 1, cfg.scale_channels(0), 3, rng);
  for (std::size_t i = 0; i < cfg.num_scales; ++i) {
    register_residual_unit(store, enc_unit(i), encoder_unit_cfg(cfg, i), rng);
    arch.encoder_channels.push_back(cfg.scale_channels(i));
    arch.merged_channels.push_back(cfg.scale_channels(i) * arch.time_steps);
  }
  // Decoder stage i consumes the coarser level, upsamples it to scale i and
  // concatenates the merged skip features of scale i.
  for (std::size_t i = cfg.num_scales - 1; i-- > 0;) {
    const std::size_t coarse = i + 2 == cfg.num_scales ? arch.merged_channels[i + 1] : cfg.scale_channels(i + 1);
    register_deconv(store, dec_up(i), coarse, cfg.scale_channels(i), 2, rng);
    register_residual_unit(store, dec_unit(i), decoder_unit_cfg(cfg, i, arch.time_steps), rng);
  }
  for (std::size_t i = 0; i + 1 < cfg.num_scales; ++i)
    arch.decoder_concat_in.push_back(cfg.scale_channels(i) + arch.merged_channels[i]);
  const std::size_t head_in = cfg.num_scales == 1 ? arch.merged_channels[0] : cfg.scale_channels(0);
  register_conv(store, "head", head_in, 1, 1, rng);
  return Model<T>(std::move(arch), std::move(store));
}

}  // namespace detail

template <class T>
Model<T> build_tscnn(const ModelConfig& cfg, std::uint64_t seed) {
  return detail::build_model<T>(ModelKind::TsCnn, cfg, seed);
}

template <class T>
Model<T> build_residual_unet(const ModelConfig& cfg, std::uint64_t seed) {
  return detail::build_model<T>(ModelKind::ResidualUnet, cfg, seed);
}

template <class T>
Model<T> build_model(ModelKind kind, const ModelConfig& cfg, std::uint64_t seed) {
  return detail::build_model<T>(kind, cfg, seed);
}

/// Shared encoder over one slice [B,1,H,W].
template <class T>
EncoderFeatures<T> encode_slice(Model<T>& model, const Tensor<T>& slice, Mode mode) {
  const auto& cfg = model.config();
  if (slice.rank() != 4 || slice.dim(1) != 1 || slice.dim(2) != cfg.input_size || slice.dim(3) != cfg.input_size) {
    throw InvalidShape("encode_slice: expected [B,1," + std::to_string(cfg.input_size) + "," +
                       std::to_string(cfg.input_size) + "], got " + shape_str(slice.shape()));
  }
  auto& p = model.params();
  EncoderFeatures<T> f;
  Tensor<T> x = apply_conv(slice, p, "encoder.stem", 1, 1);
  for (std::size_t i = 0; i < cfg.num_scales; ++i) {
    x = residual_unit(x, detail::encoder_unit_cfg(cfg, i), p, detail::enc_unit(i), mode);
    f.scales.push_back(x);
  }
  return f;
}

/// Stacks each scale on a new time axis in order (t-1, t, t+1) -> [B,3,C,h,w]
/// and reshapes it to [B,3C,h,w].
template <class T>
EncoderFeatures<T> temporal_concat(const EncoderFeatures<T>& prev, const EncoderFeatures<T>& cur,
                                   const EncoderFeatures<T>& next) {
  if (prev.scales.size() != cur.scales.size() || next.scales.size() != cur.scales.size()) {
    throw InvalidShape("temporal_concat: feature sets have different scale counts");
  }
  EncoderFeatures<T> merged;
  for (std::size_t i = 0; i < cur.scales.size(); ++i) {
    const Shape s = cur.scales[i].shape();
    if (prev.scales[i].shape() != s || next.scales[i].shape() != s || s.size() != 4) {
      throw InvalidShape("temporal_concat: scale " + std::to_string(i + 1) + " shapes differ: " +
                         shape_str(prev.scales[i].shape()) + ", " + shape_str(s) + ", " +
                         shape_str(next.scales[i].shape()));
    }
    const Shape timed{s[0], 1, s[1], s[2], s[3]};
    Tensor<T> stacked = concat<T>({reshape(prev.scales[i], timed), reshape(cur.scales[i], timed),
                                   reshape(next.scales[i], timed)},
                                  1);
    merged.scales.push_back(reshape(stacked, {s[0], 3 * s[1], s[2], s[3]}));
  }
  return merged;
}

/// Decoder: from the coarsest merged scale, repeat
/// {deconv x2 -> concat with merged skip -> residual unit}, then 1x1 conv + sigmoid.
template <class T>
Tensor<T> decode(Model<T>& model, const EncoderFeatures<T>& merged, Mode mode) {
  const auto& arch = model.arch();
  const auto& cfg = arch.cfg;
  if (merged.scales.size() != cfg.num_scales) throw InvalidShape("decode: wrong number of feature scales");
  for (std::size_t i = 0; i < cfg.num_scales; ++i) {
    const auto& t = merged.scales[i];
    if (t.rank() != 4 || t.dim(1) != arch.merged_channels[i] || t.dim(2) != cfg.scale_extent(i)) {
      throw InvalidShape("decode: scale C" + std::to_string(i + 1) + " has shape " + shape_str(t.shape()) +
                         ", expected " + std::to_string(arch.merged_channels[i]) + " channels at extent " +
                         std::to_string(cfg.scale_extent(i)));
    }
  }
  auto& p = model.params();
  Tensor<T> x = merged.scales.back();
  for (std::size_t i = cfg.num_scales - 1; i-- > 0;) {
    const std::string up = detail::dec_up(i);
    Tensor<T> u = conv_transpose2d(x, p.get(up + ".weight"), p.get(up + ".bias"), 2, 0);
    Tensor<T> cat = concat<T>({u, merged.scales[i]}, 1);
    x = residual_unit(cat, detail::decoder_unit_cfg(cfg, i, arch.time_steps), p, detail::dec_unit(i), mode);
  }
  return sigmoid(apply_conv(x, p, "head", 1, 0));
}

/// Probability map [B,1,H,W] for the middle slice of the triplet.
template <class T>
Tensor<T> forward(Model<T>& model, const TripletBatch<T>& in, Mode mode) {
  if (model.arch().kind == ModelKind::ResidualUnet) return decode(model, encode_slice(model, in.cur, mode), mode);
  if (in.prev.shape() != in.cur.shape() || in.next.shape() != in.cur.shape()) {
    throw InvalidShape("forward: triplet slices differ in shape");
  }
  auto fp = encode_slice(model, in.prev, mode);
  auto fc = encode_slice(model, in.cur, mode);
  auto fn = encode_slice(model, in.next, mode);
  return decode(model, temporal_concat(fp, fc, fn), mode);
}

/// Binary mask: 1 where prob > threshold.
template <class T>
Tensor<T> predict(const Tensor<T>& prob, double threshold) {
  std::vector<T> m(prob.size());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = static_cast<double>(prob[i]) > threshold ? T(1) : T(0);
  return Tensor<T>(prob.shape(), std::move(m));
}

/// Reconstructs the architecture from checkpoint entries. input_size is not
/// stored in weights and must be supplied.
template <class T>
Model<T> model_from_checkpoint(const std::map<std::string, Tensor<T>>& entries, std::size_t input_size,
                               double seg_threshold = 0.5) {
  auto stem = entries.find("encoder.stem.weight");
  if (stem == entries.end()) throw ConfigError("checkpoint lacks encoder.stem.weight");
  ModelConfig cfg;
  cfg.base_channels = stem->second.dim(0);
  cfg.num_scales = 0;
  while (entries.count(detail::enc_unit(cfg.num_scales) + ".conv1.weight")) ++cfg.num_scales;
  cfg.input_size = input_size;
  cfg.seg_threshold = seg_threshold;
  ModelKind kind = ModelKind::TsCnn;
  const std::size_t coarsest = cfg.scale_channels(cfg.num_scales - 1);
  if (cfg.num_scales > 1) {
    auto up = entries.find(detail::dec_up(cfg.num_scales - 2) + ".weight");
    if (up == entries.end()) throw ConfigError("checkpoint lacks decoder upsampling weights");
    kind = up->second.dim(0) == coarsest ? ModelKind::ResidualUnet : ModelKind::TsCnn;
  } else {
    kind = entries.at("head.weight").dim(1) == coarsest ? ModelKind::ResidualUnet : ModelKind::TsCnn;
  }
  Model<T> model = build_model<T>(kind, cfg, 0);
  load_into(model.params(), entries);
  return model;
}

}  // namespace tscnn
