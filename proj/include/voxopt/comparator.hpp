#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "voxopt/nn.hpp"
#include "voxopt/ops.hpp"

namespace voxopt {

/// Pairwise shape assessor: two signed volumes enter as the two channels of
/// one input; the output is P("first volume is more optimized").
struct ComparatorConfig {
  std::int64_t resolution = 32;
  std::vector<std::int64_t> widths = {16, 32, 64, 96, 128};

  void validate() const {
    if (resolution < 2) throw ValidationError("comparator resolution too small");
    if (widths.empty()) throw ValidationError("comparator needs at least one block");
    for (std::int64_t w : widths) {
      if (w < 1) throw ValidationError("comparator widths must be positive");
    }
  }
};

template <typename T>
class Comparator {
 public:
  Comparator(ComparatorConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(seed);
    std::int64_t prev = 2;
    for (std::size_t i = 0; i < cfg_.widths.size(); ++i) {
      params_.add(bkey(i, "w"), Tensor<T>::randn({cfg_.widths[i], prev, 3, 3, 3}, rng));
      params_.add(bkey(i, "b"), Tensor<T>::zeros({cfg_.widths[i]}));
      prev = cfg_.widths[i];
    }
    params_.add("out.w", Tensor<T>::randn({1, prev}, rng));
    params_.add("out.b", Tensor<T>::zeros({1}));
  }

  Comparator(ComparatorConfig cfg, ParamStore<T> params)
      : cfg_(std::move(cfg)), params_(std::move(params)) {
    cfg_.validate();
  }

  const ComparatorConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  /// pair [B,2,R,R,R] -> logit [B]. sigmoid(logit) = P(channel 0 wins).
  Var logit(Tape<T>& t, const BoundParams<T>& p, Var pair) const {
    // Shape is copied out because emitting ops can reallocate tape storage.
    const auto xshape = t.val(pair).shape();
    if (xshape.size() != 5 || xshape[1] != 2) {
      throw ValidationError("comparator input must be [B,2,R,R,R]");
    }
    if (xshape[2] != cfg_.resolution || xshape[3] != cfg_.resolution ||
        xshape[4] != cfg_.resolution) {
      throw ValidationError("comparator resolution mismatch");
    }
    const std::int64_t B = xshape[0];
    const T lg = std::sqrt(T(2));
    Var h = pair;
    std::int64_t prev = 2;
    for (std::size_t i = 0; i < cfg_.widths.size(); ++i) {
      h = ops::conv3d(t, h, p[bkey(i, "w")], 2, 1, wscale_for<T>(prev * 27));
      h = ops::leaky_relu(t, ops::bias_channels(t, h, p[bkey(i, "b")]), T(0.2), lg);
      prev = cfg_.widths[i];
    }
    Var f = ops::global_avg_pool(t, h);
    Var out = ops::linear(t, f, p["out.w"], p["out.b"], wscale_for<T>(prev));
    return ops::reshape(t, out, {B});
  }

  /// Graph-free probability that v1 is more optimized than v2.
  T compare(const Tensor<T>& v1, const Tensor<T>& v2) const {
    if (!v1.same_shape(v2)) throw ValidationError("compare: resolution mismatch");
    Tape<T> t;
    BoundParams<T> p(t, params_, false);
    Var pair = t.constant(make_pair_volume(v1, v2));
    return ops::sigmoid(t.val(logit(t, p, pair))[0]);
  }

  /// Stacks two single volumes [R,R,R] or [1,R,R,R] into [1,2,R,R,R].
  static Tensor<T> make_pair_volume(const Tensor<T>& v1, const Tensor<T>& v2) {
    if (v1.numel() != v2.numel()) throw ValidationError("pair volumes differ in size");
    std::int64_t r = v1.rank() == 3 ? v1.dim(0) : v1.dim(v1.rank() - 1);
    Tensor<T> pair({1, 2, r, r, r});
    if (v1.numel() != r * r * r) throw ValidationError("pair volumes must be cubes");
    std::copy(v1.data(), v1.data() + v1.numel(), pair.data());
    std::copy(v2.data(), v2.data() + v2.numel(), pair.data() + v1.numel());
    return pair;
  }

 private:
  static std::string bkey(std::size_t i, const char* leaf) {
    return "block" + std::to_string(i) + "." + leaf;
  }

  ComparatorConfig cfg_;
  ParamStore<T> params_;
};

/// Binary cross-entropy on a probability, clamped away from 0 and 1 so the
/// loss stays finite at saturated predictions.
template <typename T>
T comparator_loss(T p, int y_true) {
  if (y_true != 0 && y_true != 1) throw ValidationError("comparator label must be 0 or 1");
  const T lo = T(1e-7);
  p = std::min(std::max(p, lo), T(1) - lo);
  return y_true ? -std::log(p) : -std::log(T(1) - p);
}

}  // namespace voxopt
