#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "voxopt/comparator.hpp"
#include "voxopt/descent.hpp"
#include "voxopt/generator.hpp"
#include "voxopt/voxel.hpp"

namespace voxopt {

/// Weights and schedule for the comparator-driven objectives. lambda1 penalizes
/// the latent-space step, lambda2 the data-space change, lambda3 an optional
/// voxel-mask term protecting structures from edits.
struct OptConfig {
  double lambda1 = 4.0;
  double lambda2 = 0.2;
  double lambda3 = 0.0;
  /// Penalties are unsquared Euclidean norms by default; this switches both
  /// lambda terms (and the mask term) to squared norms.
  bool squared_penalties = false;
  std::int64_t steps = 150;
  double step_size = 0.05;
  std::uint64_t seed = 1;
  std::int64_t divergence_patience = 100;
  double divergence_factor = 10.0;

  void validate() const {
    for (double l : {lambda1, lambda2, lambda3}) {
      if (!(l >= 0.0) || !std::isfinite(l)) {
        throw ValidationError("optimize: lambda weights must be finite and non-negative");
      }
    }
    if (steps < 1) throw ValidationError("optimize: steps must be positive");
    if (!(step_size > 0.0) || !std::isfinite(step_size)) {
      throw ValidationError("optimize: step_size must be positive and finite");
    }
    if (divergence_patience < 1) throw ValidationError("optimize: divergence_patience must be positive");
    if (!(divergence_factor > 1.0)) throw ValidationError("optimize: divergence_factor must exceed 1");
  }
};

/// One trace row. The reported total is defined as the sum of the reported
/// components, so the bookkeeping identity holds exactly.
struct OptLossParts {
  double total = 0.0;
  double comparator = 0.0;
  double latent_l2 = 0.0;
  double data_l2 = 0.0;
  double mask_l2 = 0.0;

  static OptLossParts of(double comparator, double latent_l2, double data_l2, double mask_l2) {
    OptLossParts p;
    p.comparator = comparator;
    p.latent_l2 = latent_l2;
    p.data_l2 = data_l2;
    p.mask_l2 = mask_l2;
    p.total = comparator + latent_l2 + data_l2 + mask_l2;
    return p;
  }
};

namespace detail {

/// Weighted penalty on a [B, n] row difference: lambda * mean over rows of the
/// (optionally squared) Euclidean norm. Returns an invalid Var when lambda is
/// zero so callers can skip the term.
template <typename T>
Var weighted_row_penalty(Tape<T>& t, Var rows, double lambda, bool squared) {
  if (lambda == 0.0) return Var{};
  Var norm = squared ? ops::sumsq_rows(t, rows) : ops::l2norm_rows(t, rows);
  return ops::scale_const(t, ops::mean_all(t, norm), static_cast<T>(lambda));
}

template <typename T>
Var flatten_rows(Tape<T>& t, Var x) {
  const auto shape = t.val(x).shape();
  std::int64_t n = 1;
  for (std::size_t i = 1; i < shape.size(); ++i) n *= shape[static_cast<std::size_t>(i)];
  return ops::reshape(t, x, {shape[0], n});
}

}  // namespace detail

/// Tape graph of the latent-optimization objective
///   H(0, C(v, G(w))) + lambda1*||w - w_s|| + lambda2*||G(w) - v||
///   (+ lambda3*||mask * (G(w) - v)|| when a mask is supplied),
/// rooted at the latent w. Component Vars are exposed for tracing; Vars for
/// zero-weight terms are invalid.
template <typename T>
struct OptLossGraph {
  Var total;
  Var comparator;
  Var latent_l2;
  Var data_l2;
  Var mask_l2;
  Var volume;

  OptLossParts parts(const Tape<T>& t) const {
    auto value = [&t](Var v) { return v.valid() ? static_cast<double>(t.val(v)[0]) : 0.0; };
    return OptLossParts::of(value(comparator), value(latent_l2), value(data_l2), value(mask_l2));
  }
};

template <typename T>
OptLossGraph<T> latent_opt_loss_graph(Tape<T>& t, const Generator<T>& gen,
                                      const BoundParams<T>& gp, const Comparator<T>& comp,
                                      const BoundParams<T>& cp, Var v, Var w, Var w_s,
                                      const OptConfig& cfg, Var mask = Var{}) {
  cfg.validate();
  OptLossGraph<T> g;
  g.volume = gen.synthesize(t, gp, w);
  Var pair = ops::concat_channels(t, v, g.volume);
  Var logit = comp.logit(t, cp, pair);
  g.comparator = ops::mean_all(t, ops::softplus_rows(t, logit, T(1)));
  g.latent_l2 = detail::weighted_row_penalty(t, ops::sub(t, w, w_s), cfg.lambda1,
                                             cfg.squared_penalties);
  Var diff = ops::sub(t, g.volume, v);
  g.data_l2 = detail::weighted_row_penalty(t, detail::flatten_rows(t, diff), cfg.lambda2,
                                           cfg.squared_penalties);
  if (mask.valid() && cfg.lambda3 > 0.0) {
    Var masked = ops::mul(t, diff, mask);
    g.mask_l2 = detail::weighted_row_penalty(t, detail::flatten_rows(t, masked), cfg.lambda3,
                                             cfg.squared_penalties);
  }
  g.total = g.comparator;
  for (Var term : {g.latent_l2, g.data_l2, g.mask_l2}) {
    if (term.valid()) g.total = ops::add(t, g.total, term);
  }
  return g;
}

/// Value of the latent-optimization objective at (w, w_s).
template <typename T>
double latent_opt_loss(const Generator<T>& gen, const Comparator<T>& comp, const Tensor<T>& v,
                       const Tensor<T>& w, const Tensor<T>& w_s, const OptConfig& cfg) {
  Tape<T> t;
  BoundParams<T> gp(t, gen.params(), false);
  BoundParams<T> cp(t, comp.params(), false);
  auto g = latent_opt_loss_graph(t, gen, gp, comp, cp, t.constant(v), t.constant(w),
                                 t.constant(w_s), cfg);
  return g.parts(t).total;
}

/// A small mapping network inferring a manipulation step in W space:
/// four equalized affine layers with leaky-relu nonlinearities, d_w -> d_w.
template <typename T>
class Mapper {
 public:
  static constexpr std::int64_t layer_count = 4;

  Mapper(std::int64_t d_w, std::uint64_t seed) : d_w_(d_w) {
    if (d_w < 1) throw ValidationError("mapper: d_w must be positive");
    Rng rng(seed);
    for (std::int64_t i = 0; i < layer_count; ++i) {
      params_.add(key(i, "w"), Tensor<T>::randn({d_w, d_w}, rng));
      params_.add(key(i, "b"), Tensor<T>::zeros({d_w}));
    }
  }

  Mapper(std::int64_t d_w, ParamStore<T> params) : d_w_(d_w), params_(std::move(params)) {
    if (d_w < 1) throw ValidationError("mapper: d_w must be positive");
    if (params_.size() != static_cast<std::size_t>(2 * layer_count)) {
      throw ValidationError("mapper: parameter store does not hold four affine layers");
    }
  }

  std::int64_t d_w() const { return d_w_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  /// M(w): the inferred manipulation step for each row of w [B, d_w].
  Var infer_step(Tape<T>& t, const BoundParams<T>& p, Var w) const {
    const auto wshape = t.val(w).shape();
    if (wshape.size() != 2 || wshape[1] != d_w_) {
      throw ValidationError("mapper: w must be [B,d_w]");
    }
    Var x = w;
    for (std::int64_t i = 0; i < layer_count; ++i) {
      x = ops::linear(t, x, p[key(i, "w")], p[key(i, "b")], wscale_for<T>(d_w_));
      x = ops::leaky_relu(t, x, T(0.2), std::sqrt(T(2)));
    }
    return x;
  }

  Tensor<T> infer_step_eval(const Tensor<T>& w) const {
    Tape<T> t;
    BoundParams<T> p(t, params_, false);
    return t.val(infer_step(t, p, t.constant(w)));
  }

 private:
  static std::string key(std::int64_t i, const char* leaf) {
    return "layer" + std::to_string(i) + "." + leaf;
  }

  std::int64_t d_w_;
  ParamStore<T> params_;
};

/// Tape graph of the mapper objective
///   H(0, C(v, G(w + M(w)))) + lambda1*||M(w)|| + lambda2*||G(w + M(w)) - v||,
/// rooted at the mapper parameters; w and v are treated as data.
template <typename T>
OptLossGraph<T> mapper_loss_graph(Tape<T>& t, const Generator<T>& gen, const BoundParams<T>& gp,
                                  const Comparator<T>& comp, const BoundParams<T>& cp,
                                  const Mapper<T>& mapper, const BoundParams<T>& mp, Var v,
                                  Var w, const OptConfig& cfg) {
  cfg.validate();
  OptLossGraph<T> g;
  Var step = mapper.infer_step(t, mp, w);
  Var moved = ops::add(t, w, step);
  g.volume = gen.synthesize(t, gp, moved);
  Var pair = ops::concat_channels(t, v, g.volume);
  Var logit = comp.logit(t, cp, pair);
  g.comparator = ops::mean_all(t, ops::softplus_rows(t, logit, T(1)));
  g.latent_l2 = detail::weighted_row_penalty(t, step, cfg.lambda1, cfg.squared_penalties);
  Var diff = ops::sub(t, g.volume, v);
  g.data_l2 = detail::weighted_row_penalty(t, detail::flatten_rows(t, diff), cfg.lambda2,
                                           cfg.squared_penalties);
  g.total = g.comparator;
  for (Var term : {g.latent_l2, g.data_l2}) {
    if (term.valid()) g.total = ops::add(t, g.total, term);
  }
  return g;
}

/// Value of the mapper objective at w.
template <typename T>
double mapper_loss(const Generator<T>& gen, const Comparator<T>& comp, const Mapper<T>& mapper,
                   const Tensor<T>& v, const Tensor<T>& w, const OptConfig& cfg) {
  Tape<T> t;
  BoundParams<T> gp(t, gen.params(), false);
  BoundParams<T> cp(t, comp.params(), false);
  BoundParams<T> mp(t, mapper.params(), false);
  auto g = mapper_loss_graph(t, gen, gp, comp, cp, mapper, mp, t.constant(v), t.constant(w), cfg);
  return g.parts(t).total;
}

struct LatentOptResult {
  Tensor<float> w;        // [1, d_w], best iterate by total loss
  Tensor<float> volume;   // synthesis at the returned w
  std::vector<OptLossParts> trace;
  std::int64_t best_step = 0;
  bool diverged = false;
};

/// Gradient descent on the latent-optimization objective starting from w_s,
/// with cosine-decayed step size and best-iterate return. The optional mask is
/// a binary grid marking protected voxels.
template <typename T>
LatentOptResult run_latent_optimization(const Generator<T>& gen, const Comparator<T>& comp,
                                        const VoxelGrid& v, const Tensor<T>& w_s,
                                        const OptConfig& cfg, const VoxelGrid* mask = nullptr) {
  cfg.validate();
  const auto& gcfg = gen.config();
  if (v.resolution != gcfg.resolution) {
    throw ValidationError("optimize: target resolution does not match the generator");
  }
  if (w_s.rank() != 2 || w_s.dim(0) != 1 || w_s.dim(1) != gcfg.d_w) {
    throw ValidationError("optimize: w_s must be [1,d_w]");
  }
  if (mask && mask->resolution != v.resolution) {
    throw ValidationError("optimize: mask resolution does not match the target");
  }

  const Tensor<T> vt = to_signed(v).as_tensor().template cast<T>();
  Tensor<T> mask_t;
  if (mask && cfg.lambda3 > 0.0) {
    mask_t = Tensor<T>({1, 1, v.resolution, v.resolution, v.resolution});
    for (std::int64_t i = 0; i < mask_t.numel(); ++i) {
      mask_t[i] = mask->data[static_cast<std::size_t>(i)] ? T(1) : T(0);
    }
  }

  Tensor<T> w = w_s;
  Tensor<T> best_w = w;
  double best_loss = 0.0;
  DivergenceMonitor monitor(cfg.divergence_factor, cfg.divergence_patience);

  LatentOptResult res;
  res.trace.reserve(static_cast<std::size_t>(cfg.steps));

  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    Tape<T> t;
    BoundParams<T> gp(t, gen.params(), false);
    BoundParams<T> cp(t, comp.params(), false);
    Var wv = t.leaf(w, true);
    Var mask_v = mask_t.numel() > 0 ? t.constant(mask_t) : Var{};
    auto g = latent_opt_loss_graph(t, gen, gp, comp, cp, t.constant(vt), wv, t.constant(w_s),
                                   cfg, mask_v);
    const OptLossParts parts = g.parts(t);
    res.trace.push_back(parts);

    if (step == 0 || parts.total < best_loss) {
      best_loss = parts.total;
      best_w = w;
      res.best_step = step;
    }

    if (monitor.observe(parts.total)) {
      res.diverged = true;
      break;
    }

    t.backward(g.total);
    const Tensor<T>& grad = t.grad(wv);
    const double lr = cosine_decay(cfg.step_size, step, cfg.steps);
    w.add_scaled(grad, static_cast<T>(-lr));
  }

  if constexpr (std::is_same_v<T, float>) {
    res.w = best_w;
    res.volume = gen.synthesize_eval(best_w);
  } else {
    res.w = best_w.template cast<float>();
    res.volume = gen.synthesize_eval(best_w).template cast<float>();
  }
  return res;
}

/// One training example for the mapper: an inverted latent and the signed
/// volume it should be manipulated away from.
template <typename T>
struct LatentExample {
  Tensor<T> w;       // [1, d_w]
  Tensor<T> volume;  // [1, 1, R, R, R] signed
};

struct MapperTrainConfig {
  OptConfig loss;
  std::int64_t epochs = 40;
  std::int64_t batch_size = 8;
  double learning_rate = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  std::uint64_t seed = 1;

  void validate() const {
    loss.validate();
    if (epochs < 1) throw ValidationError("train_mapper: epochs must be positive");
    if (batch_size < 1) throw ValidationError("train_mapper: batch_size must be positive");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
      throw ValidationError("train_mapper: learning_rate must be positive and finite");
    }
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
      throw ValidationError("train_mapper: adam betas must lie in [0,1)");
    }
  }
};

/// Mean loss components over one epoch of mapper training.
struct MapperEpochLog {
  std::int64_t epoch = 0;
  double total = 0.0;
  double comparator = 0.0;
  double latent_l2 = 0.0;
  double data_l2 = 0.0;
};

struct MapperTrainResult {
  std::vector<MapperEpochLog> log;
  bool aborted = false;
  std::string abort_reason;
};

/// Minimizes the mean mapper objective over the dataset. Only mapper weights
/// update; the generator and comparator are read-only throughout.
template <typename T>
MapperTrainResult train_mapper(const Generator<T>& gen, const Comparator<T>& comp,
                               Mapper<T>& mapper, const std::vector<LatentExample<T>>& latents,
                               const MapperTrainConfig& cfg) {
  cfg.validate();
  if (latents.empty()) throw ValidationError("train_mapper: dataset is empty");
  const auto& gcfg = gen.config();
  if (mapper.d_w() != gcfg.d_w) {
    throw ValidationError("train_mapper: mapper width does not match the generator");
  }
  const std::int64_t R = gcfg.resolution;
  for (const auto& ex : latents) {
    if (ex.w.rank() != 2 || ex.w.dim(0) != 1 || ex.w.dim(1) != gcfg.d_w) {
      throw ValidationError("train_mapper: latents must be [1,d_w]");
    }
    if (ex.volume.numel() != R * R * R) {
      throw ValidationError("train_mapper: volume resolution does not match the generator");
    }
  }

  Rng rng(cfg.seed);
  Adam<T> adam(static_cast<T>(cfg.learning_rate), static_cast<T>(cfg.adam_beta1),
               static_cast<T>(cfg.adam_beta2));
  const std::int64_t n = static_cast<std::int64_t>(latents.size());
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;

  MapperTrainResult res;
  for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    double sum_total = 0.0, sum_comp = 0.0, sum_lat = 0.0, sum_data = 0.0;
    std::int64_t batches = 0;
    for (std::int64_t start = 0; start < n; start += cfg.batch_size) {
      const std::int64_t b = std::min(cfg.batch_size, n - start);
      Tensor<T> wb({b, gcfg.d_w});
      Tensor<T> vb({b, 1, R, R, R});
      for (std::int64_t r = 0; r < b; ++r) {
        const auto& ex = latents[static_cast<std::size_t>(order[static_cast<std::size_t>(start + r)])];
        for (std::int64_t j = 0; j < gcfg.d_w; ++j) wb[r * gcfg.d_w + j] = ex.w[j];
        const std::int64_t cells = R * R * R;
        for (std::int64_t j = 0; j < cells; ++j) vb[r * cells + j] = ex.volume[j];
      }

      Tape<T> t;
      BoundParams<T> gp(t, gen.params(), false);
      BoundParams<T> cp(t, comp.params(), false);
      BoundParams<T> mp(t, mapper.params(), true);
      auto g = mapper_loss_graph(t, gen, gp, comp, cp, mapper, mp, t.constant(vb),
                                 t.constant(wb), cfg.loss);
      const OptLossParts parts = g.parts(t);
      if (!std::isfinite(parts.total)) {
        res.aborted = true;
        res.abort_reason = "non-finite loss at epoch " + std::to_string(epoch);
        return res;
      }
      sum_total += parts.total;
      sum_comp += parts.comparator;
      sum_lat += parts.latent_l2;
      sum_data += parts.data_l2;
      ++batches;

      t.backward(g.total);
      adam.step(mapper.params(), collect_grads(t, mp));
    }
    MapperEpochLog row;
    row.epoch = epoch;
    row.total = sum_total / static_cast<double>(batches);
    row.comparator = sum_comp / static_cast<double>(batches);
    row.latent_l2 = sum_lat / static_cast<double>(batches);
    row.data_l2 = sum_data / static_cast<double>(batches);
    res.log.push_back(row);
  }
  return res;
}

/// Applies the trained mapper once: returns (w + M(w), synthesize(w + M(w))).
template <typename T>
std::pair<Tensor<T>, Tensor<T>> apply_mapper(const Generator<T>& gen, const Mapper<T>& mapper,
                                             const Tensor<T>& w) {
  const Tensor<T> step = mapper.infer_step_eval(w);
  Tensor<T> moved = w;
  moved.add_scaled(step, T(1));
  return {moved, gen.synthesize_eval(moved)};
}

}  // namespace voxopt
