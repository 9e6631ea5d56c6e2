#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "voxopt/nn.hpp"
#include "voxopt/ops.hpp"

namespace voxopt {

/// Architecture of the style-based volume generator. Synthesis starts from a
/// learned 4x4x4 constant and doubles the resolution per block; a single
/// latent w modulates every block.
struct GeneratorConfig {
  std::int64_t resolution = 64;
  std::int64_t d_z = 128;
  std::int64_t d_w = 128;
  std::int64_t num_classes = 9;
  std::int64_t mapping_layers = 4;
  /// Channel widths per synthesis block, from 4^3 up to resolution^3.
  std::vector<std::int64_t> widths = {128, 96, 64, 32, 16};

  /// Preset sized to land near the 2.1M-parameter budget at 64^3.
  static GeneratorConfig paper_scale() {
    GeneratorConfig c;
    c.widths = {144, 128, 112, 80, 40};
    return c;
  }

  /// Default widths trimmed to a smaller resolution.
  static GeneratorConfig desk_scale(std::int64_t resolution) {
    GeneratorConfig c;
    c.resolution = resolution;
    c.widths.resize(static_cast<std::size_t>(blocks_for(resolution)));
    return c;
  }

  static std::int64_t blocks_for(std::int64_t resolution) {
    std::int64_t r = 4, n = 1;
    while (r < resolution) {
      r *= 2;
      ++n;
    }
    return n;
  }

  std::int64_t num_blocks() const { return static_cast<std::int64_t>(widths.size()); }

  void validate() const {
    if (resolution < 4 || (resolution & (resolution - 1)) != 0) {
      throw ValidationError("generator resolution must be a power of two >= 4");
    }
    if (num_blocks() != blocks_for(resolution)) {
      throw ValidationError("generator widths count does not match resolution");
    }
    if (d_z < 1 || d_w < 1 || num_classes < 1 || mapping_layers < 0) {
      throw ValidationError("generator config fields must be positive");
    }
    if (mapping_layers == 0 && d_w != 2 * d_z) {
      throw ValidationError("pass-through mapping requires d_w == 2*d_z");
    }
    for (std::int64_t w : widths) {
      if (w < 1) throw ValidationError("generator widths must be positive");
    }
  }
};

/// Var ids consumed as the style input of each modulated convolution.
/// Inspecting this shows which latent each block actually read.
struct StyleTrace {
  std::vector<std::int32_t> consumed;
};

template <typename T>
class Generator {
 public:
  Generator(GeneratorConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(seed);
    auto randn = [&rng](std::vector<std::int64_t> shape) {
      return Tensor<T>::randn(std::move(shape), rng);
    };
    params_.add("embed.table", randn({cfg_.num_classes, cfg_.d_z}));
    for (std::int64_t i = 0; i < cfg_.mapping_layers; ++i) {
      const std::int64_t in = (i == 0) ? 2 * cfg_.d_z : cfg_.d_w;
      params_.add(mkey(i, "w"), randn({cfg_.d_w, in}));
      params_.add(mkey(i, "b"), Tensor<T>::zeros({cfg_.d_w}));
    }
    params_.add("const4", randn({cfg_.widths[0], 4, 4, 4}));
    for (std::int64_t i = 0; i < cfg_.num_blocks(); ++i) {
      const std::int64_t cin = cfg_.widths[static_cast<std::size_t>(i == 0 ? 0 : i - 1)];
      const std::int64_t cout = cfg_.widths[static_cast<std::size_t>(i)];
      params_.add(bkey(i, "conv.w"), randn({cout, cin, 3, 3, 3}));
      params_.add(bkey(i, "conv.b"), Tensor<T>::zeros({cout}));
      params_.add(bkey(i, "style.w"), randn({cin, cfg_.d_w}));
      params_.add(bkey(i, "style.b"), Tensor<T>::zeros({cin}));
    }
    const std::int64_t clast = cfg_.widths.back();
    params_.add("tovoxel.conv.w", randn({1, clast, 1, 1, 1}));
    params_.add("tovoxel.conv.b", Tensor<T>::zeros({1}));
    params_.add("tovoxel.style.w", randn({clast, cfg_.d_w}));
    params_.add("tovoxel.style.b", Tensor<T>::zeros({clast}));
    params_.add("output_gain", Tensor<T>::scalar(T(1)));
  }

  Generator(GeneratorConfig cfg, ParamStore<T> params)
      : cfg_(std::move(cfg)), params_(std::move(params)) {
    cfg_.validate();
  }

  const GeneratorConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  /// Mapping network: z [B,d_z] + class ids -> w [B,d_w].
  Var map_latent(Tape<T>& t, const BoundParams<T>& p, Var z, const std::vector<int>& class_ids) const {
    // Shape is copied out because emitting ops can reallocate tape storage.
    const auto zshape = t.val(z).shape();
    if (zshape.size() != 2 || zshape[1] != cfg_.d_z) {
      throw ValidationError("map_latent: z must be [B,d_z]");
    }
    if (static_cast<std::int64_t>(class_ids.size()) != zshape[0]) {
      throw ValidationError("map_latent: one class id per z row required");
    }
    Var zn = ops::pixel_norm_rows(t, z);
    Var en = ops::pixel_norm_rows(t, ops::embed(t, p["embed.table"], class_ids));
    Var x = ops::concat_cols(t, zn, en);
    for (std::int64_t i = 0; i < cfg_.mapping_layers; ++i) {
      const std::int64_t in = (i == 0) ? 2 * cfg_.d_z : cfg_.d_w;
      x = ops::linear(t, x, p[mkey(i, "w")], p[mkey(i, "b")], wscale_for<T>(in));
      x = ops::leaky_relu(t, x, T(0.2), std::sqrt(T(2)));
    }
    return x;
  }

  /// Synthesis network: w [B,d_w] -> signed volume [B,1,R,R,R] in [-1,1].
  Var synthesize(Tape<T>& t, const BoundParams<T>& p, Var w, StyleTrace* trace = nullptr) const {
    const auto wshape = t.val(w).shape();
    if (wshape.size() != 2 || wshape[1] != cfg_.d_w) {
      throw ValidationError("synthesize: w must be [B,d_w]");
    }
    const std::int64_t B = wshape[0];
    Var x = ops::repeat_batch(t, p["const4"], B);
    for (std::int64_t i = 0; i < cfg_.num_blocks(); ++i) {
      if (i > 0) x = ops::upsample2x(t, x);
      const std::int64_t cin = cfg_.widths[static_cast<std::size_t>(i == 0 ? 0 : i - 1)];
      if (trace) trace->consumed.push_back(w.id);
      Var s = ops::add_const(
          t, ops::linear(t, w, p[bkey(i, "style.w")], p[bkey(i, "style.b")], wscale_for<T>(cfg_.d_w)),
          T(1));
      const T cws = wscale_for<T>(cin * 27);
      Var y = ops::conv3d(t, ops::scale_channels(t, x, s), p[bkey(i, "conv.w")], 1, 1, cws);
      y = ops::scale_channels(t, y, ops::demod_coeffs(t, p[bkey(i, "conv.w")], s, cws));
      y = ops::bias_channels(t, y, p[bkey(i, "conv.b")]);
      x = ops::leaky_relu(t, y, T(0.2), std::sqrt(T(2)));
    }
    const std::int64_t clast = cfg_.widths.back();
    if (trace) trace->consumed.push_back(w.id);
    Var s = ops::add_const(
        t, ops::linear(t, w, p["tovoxel.style.w"], p["tovoxel.style.b"], wscale_for<T>(cfg_.d_w)), T(1));
    Var y = ops::conv3d(t, ops::scale_channels(t, x, s), p["tovoxel.conv.w"], 1, 0, wscale_for<T>(clast));
    y = ops::bias_channels(t, y, p["tovoxel.conv.b"]);
    return ops::tanh_act(t, ops::mul_scalar_param(t, y, p["output_gain"]));
  }

  /// Inference helpers that own a private tape.
  Tensor<T> map_latent_eval(const Tensor<T>& z, const std::vector<int>& class_ids) const {
    Tape<T> t;
    BoundParams<T> p(t, params_, false);
    return t.val(map_latent(t, p, t.constant(z), class_ids));
  }

  Tensor<T> synthesize_eval(const Tensor<T>& w) const {
    Tape<T> t;
    BoundParams<T> p(t, params_, false);
    return t.val(synthesize(t, p, t.constant(w)));
  }

 private:
  static std::string mkey(std::int64_t i, const char* leaf) {
    return "mapping." + std::to_string(i) + "." + leaf;
  }
  static std::string bkey(std::int64_t i, const char* leaf) {
    return "block" + std::to_string(i) + "." + leaf;
  }

  GeneratorConfig cfg_;
  ParamStore<T> params_;
};

}  // namespace voxopt
