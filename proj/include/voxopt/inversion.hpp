#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "voxopt/descent.hpp"
#include "voxopt/generator.hpp"
#include "voxopt/voxel.hpp"

namespace voxopt {

struct InversionConfig {
  std::int64_t steps = 500;
  double step_size = 0.25;
  std::int64_t mean_samples = 1000;
  /// Known class of the target, or -1 to average the initialization over all
  /// classes.
  int class_id = -1;
  std::uint64_t seed = 1;
  /// Divergence rule: this many consecutive steps above 10x the initial loss
  /// abort the run.
  std::int64_t divergence_patience = 100;
  double divergence_factor = 10.0;

  void validate() const {
    if (steps < 1) throw ValidationError("invert: steps must be positive");
    if (!(step_size > 0.0) || !std::isfinite(step_size)) {
      throw ValidationError("invert: step_size must be positive and finite");
    }
    if (mean_samples < 1) throw ValidationError("invert: mean_samples must be positive");
    if (divergence_patience < 1) throw ValidationError("invert: divergence_patience must be positive");
    if (!(divergence_factor > 1.0)) throw ValidationError("invert: divergence_factor must exceed 1");
  }
};

struct InversionResult {
  Tensor<float> w;              // [1, d_w], best iterate by loss
  Tensor<float> volume;         // synthesis at the returned w
  std::vector<double> loss_curve;  // per-step reconstruction loss
  std::int64_t best_step = 0;
  double best_loss = 0.0;
  bool diverged = false;
};

/// Arithmetic mean of map_latent over n seeded standard-normal z samples.
/// With class_id < 0 the class ids cycle through all classes; otherwise every
/// sample uses the given class.
template <typename T>
Tensor<T> mean_latent(const Generator<T>& gen, std::int64_t n, std::uint64_t seed,
                      int class_id = -1) {
  if (n < 1) throw ValidationError("mean_latent: n must be positive");
  const auto& cfg = gen.config();
  if (class_id >= cfg.num_classes) throw ValidationError("mean_latent: class_id out of range");
  Rng rng(seed);
  Tensor<double> acc = Tensor<double>::zeros({1, cfg.d_w});
  const std::int64_t chunk = 64;
  for (std::int64_t done = 0; done < n; done += chunk) {
    const std::int64_t b = std::min(chunk, n - done);
    const auto z = Tensor<T>::randn({b, cfg.d_z}, rng);
    std::vector<int> ids(static_cast<std::size_t>(b));
    for (std::int64_t i = 0; i < b; ++i) {
      ids[static_cast<std::size_t>(i)] =
          class_id >= 0 ? class_id : static_cast<int>((done + i) % cfg.num_classes);
    }
    const auto w = gen.map_latent_eval(z, ids);
    for (std::int64_t i = 0; i < b; ++i) {
      for (std::int64_t j = 0; j < cfg.d_w; ++j) {
        acc[j] += static_cast<double>(w[i * cfg.d_w + j]);
      }
    }
  }
  Tensor<T> mean({1, cfg.d_w});
  for (std::int64_t j = 0; j < cfg.d_w; ++j) {
    mean[j] = static_cast<T>(acc[j] / static_cast<double>(n));
  }
  return mean;
}

/// Mean squared error between a synthesis and the signed target, as a tape
/// graph rooted at the given latent.
template <typename T>
Var reconstruction_loss_graph(Tape<T>& tape, const Generator<T>& gen, const BoundParams<T>& p,
                              Var w, Var target) {
  Var volume = gen.synthesize(tape, p, w);
  Var diff = ops::sub(tape, volume, target);
  return ops::mean_all(tape, ops::mul(tape, diff, diff));
}

/// Projects a voxel grid into W space: gradient descent on the voxel-mean
/// squared reconstruction error from the mean-latent initialization, with
/// cosine-decayed step size and best-iterate return.
template <typename T>
InversionResult invert(const Generator<T>& gen, const VoxelGrid& target,
                       const InversionConfig& cfg) {
  cfg.validate();
  const auto& gcfg = gen.config();
  if (target.resolution != gcfg.resolution) {
    throw ValidationError("invert: target resolution does not match the generator");
  }
  if (cfg.class_id >= gcfg.num_classes) throw ValidationError("invert: class_id out of range");

  const Tensor<T> v = to_signed(target).as_tensor().template cast<T>();
  Tensor<T> w = mean_latent(gen, cfg.mean_samples, derive_seed(cfg.seed, 0), cfg.class_id);

  InversionResult res;
  res.loss_curve.reserve(static_cast<std::size_t>(cfg.steps));
  Tensor<T> best_w = w;
  double best_loss = 0.0;
  DivergenceMonitor monitor(cfg.divergence_factor, cfg.divergence_patience);

  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    Tape<T> tape;
    BoundParams<T> p(tape, gen.params(), false);
    Var wv = tape.leaf(w, true);
    Var loss = reconstruction_loss_graph(tape, gen, p, wv, tape.constant(v));
    const double loss_value = static_cast<double>(tape.val(loss)[0]);
    res.loss_curve.push_back(loss_value);

    if (step == 0 || loss_value < best_loss) {
      best_loss = loss_value;
      best_w = w;
      res.best_step = step;
    }

    if (monitor.observe(loss_value)) {
      res.diverged = true;
      break;
    }

    tape.backward(loss);
    const Tensor<T>& g = tape.grad(wv);
    const double lr = cosine_decay(cfg.step_size, step, cfg.steps);
    w.add_scaled(g, static_cast<T>(-lr));
  }

  res.best_loss = best_loss;
  if constexpr (std::is_same_v<T, float>) {
    res.w = best_w;
  } else {
    res.w = best_w.template cast<float>();
  }
  const Tensor<T> out = gen.synthesize_eval(best_w);
  if constexpr (std::is_same_v<T, float>) {
    res.volume = out;
  } else {
    res.volume = out.template cast<float>();
  }
  return res;
}

/// Intersection-over-union of two binary grids; 1.0 when both are empty.
inline double voxel_iou(const VoxelGrid& a, const VoxelGrid& b) {
  if (a.resolution != b.resolution) throw ValidationError("iou: resolution mismatch");
  std::int64_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const bool av = a.data[i] != 0, bv = b.data[i] != 0;
    inter += av && bv;
    uni += av || bv;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace voxopt
