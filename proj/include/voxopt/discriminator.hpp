#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "voxopt/nn.hpp"
#include "voxopt/ops.hpp"

namespace voxopt {

/// Convolutional critic with projection class conditioning. Widths run from
/// the input resolution down to 4^3, one stride-2 convolution per halving.
struct DiscriminatorConfig {
  std::int64_t resolution = 64;
  std::int64_t num_classes = 9;
  std::vector<std::int64_t> widths = {16, 32, 64, 96, 128};

  static DiscriminatorConfig paper_scale() {
    DiscriminatorConfig c;
    c.widths = {40, 80, 120, 144, 160};
    return c;
  }

  static DiscriminatorConfig desk_scale(std::int64_t resolution) {
    DiscriminatorConfig c;
    c.resolution = resolution;
    const auto n = static_cast<std::size_t>(levels_for(resolution));
    // keep the coarsest (widest) levels when trimming
    c.widths.assign(c.widths.end() - static_cast<std::ptrdiff_t>(n), c.widths.end());
    return c;
  }

  static std::int64_t levels_for(std::int64_t resolution) {
    std::int64_t r = 4, n = 1;
    while (r < resolution) {
      r *= 2;
      ++n;
    }
    return n;
  }

  void validate() const {
    if (resolution < 4 || (resolution & (resolution - 1)) != 0) {
      throw ValidationError("discriminator resolution must be a power of two >= 4");
    }
    if (static_cast<std::int64_t>(widths.size()) != levels_for(resolution)) {
      throw ValidationError("discriminator widths count does not match resolution");
    }
    if (num_classes < 1) throw ValidationError("num_classes must be positive");
    for (std::int64_t w : widths) {
      if (w < 1) throw ValidationError("discriminator widths must be positive");
    }
  }
};

template <typename T>
class Discriminator {
 public:
  Discriminator(DiscriminatorConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(seed);
    auto randn = [&rng](std::vector<std::int64_t> shape) {
      return Tensor<T>::randn(std::move(shape), rng);
    };
    params_.add("fromvoxel.w", randn({cfg_.widths[0], 1, 1, 1, 1}));
    params_.add("fromvoxel.b", Tensor<T>::zeros({cfg_.widths[0]}));
    for (std::size_t i = 0; i + 1 < cfg_.widths.size(); ++i) {
      params_.add(dkey(i, "w"), randn({cfg_.widths[i + 1], cfg_.widths[i], 3, 3, 3}));
      params_.add(dkey(i, "b"), Tensor<T>::zeros({cfg_.widths[i + 1]}));
    }
    const std::int64_t cl = cfg_.widths.back();
    params_.add("final.conv.w", randn({cl, cl + 1, 3, 3, 3}));
    params_.add("final.conv.b", Tensor<T>::zeros({cl}));
    params_.add("fc.w", randn({cl, cl}));
    params_.add("fc.b", Tensor<T>::zeros({cl}));
    params_.add("out.w", randn({1, cl}));
    params_.add("out.b", Tensor<T>::zeros({1}));
    params_.add("embed.table", randn({cfg_.num_classes, cl}));
  }

  Discriminator(DiscriminatorConfig cfg, ParamStore<T> params)
      : cfg_(std::move(cfg)), params_(std::move(params)) {
    cfg_.validate();
  }

  const DiscriminatorConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  /// grid [B,1,R,R,R] + class ids -> logits [B].
  Var discriminate(Tape<T>& t, const BoundParams<T>& p, Var grid, const std::vector<int>& class_ids) const {
    // Copy the shape out: emitting ops below may reallocate tape storage and
    // invalidate references returned by val().
    const auto xshape = t.val(grid).shape();
    if (xshape.size() != 5 || xshape[1] != 1 || xshape[2] != cfg_.resolution ||
        xshape[3] != cfg_.resolution || xshape[4] != cfg_.resolution) {
      throw ValidationError("discriminate: grid must be [B,1,R,R,R] at the configured resolution");
    }
    const std::int64_t B = xshape[0];
    if (static_cast<std::int64_t>(class_ids.size()) != B) {
      throw ValidationError("discriminate: one class id per grid required");
    }
    const T lg = std::sqrt(T(2));
    Var h = ops::conv3d(t, grid, p["fromvoxel.w"], 1, 0, wscale_for<T>(1));
    h = ops::leaky_relu(t, ops::bias_channels(t, h, p["fromvoxel.b"]), T(0.2), lg);
    for (std::size_t i = 0; i + 1 < cfg_.widths.size(); ++i) {
      h = ops::conv3d(t, h, p[dkey(i, "w")], 2, 1, wscale_for<T>(cfg_.widths[i] * 27));
      h = ops::leaky_relu(t, ops::bias_channels(t, h, p[dkey(i, "b")]), T(0.2), lg);
    }
    const std::int64_t cl = cfg_.widths.back();
    h = ops::minibatch_stddev(t, h);
    h = ops::conv3d(t, h, p["final.conv.w"], 1, 1, wscale_for<T>((cl + 1) * 27));
    h = ops::leaky_relu(t, ops::bias_channels(t, h, p["final.conv.b"]), T(0.2), lg);
    Var f = ops::global_avg_pool(t, h);
    f = ops::leaky_relu(t, ops::linear(t, f, p["fc.w"], p["fc.b"], wscale_for<T>(cl)), T(0.2), lg);
    Var logit = ops::linear(t, f, p["out.w"], p["out.b"], wscale_for<T>(cl));
    logit = ops::reshape(t, logit, {B});
    Var e = ops::embed(t, p["embed.table"], class_ids);
    Var proj = ops::rowdot(t, e, f, T(1) / std::sqrt(static_cast<T>(cl)));
    return ops::add(t, logit, proj);
  }

  Tensor<T> discriminate_eval(const Tensor<T>& grid, const std::vector<int>& class_ids) const {
    Tape<T> t;
    BoundParams<T> p(t, params_, false);
    return t.val(discriminate(t, p, t.constant(grid), class_ids));
  }

 private:
  static std::string dkey(std::size_t i, const char* leaf) {
    return "down" + std::to_string(i) + "." + leaf;
  }

  DiscriminatorConfig cfg_;
  ParamStore<T> params_;
};

}  // namespace voxopt
