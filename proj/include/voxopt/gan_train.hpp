#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "voxopt/discriminator.hpp"
#include "voxopt/generator.hpp"
#include "voxopt/shapegen.hpp"
#include "voxopt/voxel.hpp"

namespace voxopt {

/// Adversarial training schedule: non-saturating logistic loss, R1 gradient
/// penalty on the discriminator's real batch, and adaptive pseudo
/// augmentation (real slots probabilistically replaced by detached generator
/// samples, with the replacement probability driven by how confidently the
/// discriminator separates its real batch).
struct GanTrainConfig {
  std::int64_t steps = 1200;
  std::int64_t batch_size = 8;
  double learning_rate = 2.5e-3;
  double adam_beta1 = 0.0;
  double adam_beta2 = 0.99;
  double r1_gamma = 1.0;
  std::int64_t r1_interval = 4;
  bool apa_enabled = true;
  double apa_target = 0.6;
  double apa_step = 0.01;
  std::int64_t apa_interval = 4;
  double apa_max = 0.9;
  std::uint64_t seed = 1;

  void validate() const {
    if (steps < 1) throw ValidationError("train-gan: steps must be positive");
    if (batch_size < 1) throw ValidationError("train-gan: batch_size must be positive");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
      throw ValidationError("train-gan: learning_rate must be positive and finite");
    }
    if (r1_gamma < 0.0) throw ValidationError("train-gan: r1_gamma must be non-negative");
    if (r1_interval < 1) throw ValidationError("train-gan: r1_interval must be positive");
    if (apa_interval < 1) throw ValidationError("train-gan: apa_interval must be positive");
    if (apa_step < 0.0 || apa_max < 0.0 || apa_max > 1.0) {
      throw ValidationError("train-gan: apa parameters out of range");
    }
  }
};

struct GanStepLog {
  std::int64_t step = 0;
  double d_loss = 0.0;
  double g_loss = 0.0;
  double r1 = 0.0;  // exact penalty value, refreshed on penalty steps
  double r_t = 0.0;
  double apa_p = 0.0;
};

struct GanTrainResult {
  std::vector<GanStepLog> log;
  bool aborted = false;
  std::string abort_reason;
};

/// Exact R1 value gamma/2 * mean_b ||d(sum_b D(x_b))/dx_b||^2, computed from
/// the tape's input gradient. Optionally hands back that gradient so callers
/// can reuse it as a perturbation direction.
template <typename T>
double r1_penalty(const Discriminator<T>& disc, const Tensor<T>& reals,
                  const std::vector<int>& class_ids, double gamma,
                  Tensor<T>* input_grad = nullptr) {
  Tape<T> tape;
  BoundParams<T> p(tape, disc.params(), false);
  Var x = tape.leaf(reals, true);
  Var total = ops::sum_all(tape, disc.discriminate(tape, p, x, class_ids));
  tape.backward(total);
  const Tensor<T>& g = tape.grad(x);
  double ssq = 0.0;
  for (std::int64_t i = 0; i < g.numel(); ++i) {
    ssq += static_cast<double>(g[i]) * static_cast<double>(g[i]);
  }
  if (input_grad) *input_grad = g;
  return 0.5 * gamma * ssq / static_cast<double>(reals.dim(0));
}

namespace detail {

/// Parameter gradient of the R1 penalty, approximated without second-order
/// autodiff: with V the exact input gradient held constant, grad_theta R1
/// equals gamma/B times the parameter gradient of the directional derivative
/// <dD/dx, V>, which a symmetric difference of two first-order passes along
/// V/||V|| recovers to O(eps^2).
template <typename T>
void add_r1_param_grads(const Discriminator<T>& disc, const Tensor<T>& reals,
                        const std::vector<int>& class_ids, double gamma,
                        const Tensor<T>& input_grad, std::vector<Tensor<T>>& grads,
                        double eps = 1e-2) {
  double norm = 0.0;
  for (std::int64_t i = 0; i < input_grad.numel(); ++i) {
    norm += static_cast<double>(input_grad[i]) * static_cast<double>(input_grad[i]);
  }
  norm = std::sqrt(norm);
  if (norm < 1e-12) return;  // constant-gradient region: penalty gradient vanishes

  Tensor<T> plus = reals, minus = reals;
  for (std::int64_t i = 0; i < reals.numel(); ++i) {
    const T d = static_cast<T>(eps * static_cast<double>(input_grad[i]) / norm);
    plus[i] += d;
    minus[i] -= d;
  }
  const double scale =
      gamma * norm / (2.0 * eps * static_cast<double>(reals.dim(0)));

  Tape<T> tape;
  BoundParams<T> p(tape, disc.params(), true);
  Var sp = ops::sum_all(tape, disc.discriminate(tape, p, tape.constant(plus), class_ids));
  Var sm = ops::sum_all(tape, disc.discriminate(tape, p, tape.constant(minus), class_ids));
  Var s = ops::scale_const(tape, ops::sub(tape, sp, sm), static_cast<T>(scale));
  tape.backward(s);
  const auto extra = collect_grads(tape, p);
  for (std::size_t i = 0; i < grads.size(); ++i) {
    grads[i].add_scaled(extra[i], T(1));
  }
}

template <typename T>
Tensor<T> batch_from_dataset(const std::vector<LabeledGrid>& data,
                             const std::vector<std::size_t>& indices,
                             std::vector<int>& class_ids) {
  const std::int64_t r = data[indices[0]].grid.resolution;
  const std::int64_t n = static_cast<std::int64_t>(indices.size());
  Tensor<T> batch({n, 1, r, r, r});
  class_ids.clear();
  for (std::int64_t b = 0; b < n; ++b) {
    const auto& item = data[indices[static_cast<std::size_t>(b)]];
    for (std::int64_t i = 0; i < r * r * r; ++i) {
      batch[b * r * r * r + i] = item.grid.data[static_cast<std::size_t>(i)] ? T(1) : T(-1);
    }
    class_ids.push_back(item.class_id);
  }
  return batch;
}

}  // namespace detail

/// Runs the adversarial loop in place on the given models. Aborts with a
/// diagnostic reason instead of continuing past a non-finite loss.
template <typename T>
GanTrainResult train_gan(Generator<T>& gen, Discriminator<T>& disc,
                         const std::vector<LabeledGrid>& data, const GanTrainConfig& cfg) {
  cfg.validate();
  if (data.empty()) throw ValidationError("train-gan: dataset is empty");
  const std::int64_t R = gen.config().resolution;
  if (disc.config().resolution != R) {
    throw ValidationError("train-gan: generator and discriminator resolutions differ");
  }
  for (const auto& item : data) {
    if (item.grid.resolution != R) {
      throw ValidationError("train-gan: dataset grid resolution does not match the models");
    }
    if (item.class_id < 0 || item.class_id >= gen.config().num_classes) {
      throw ValidationError("train-gan: dataset class_id out of range");
    }
  }

  Rng data_rng(derive_seed(cfg.seed, 0));
  Rng z_rng(derive_seed(cfg.seed, 1));
  Rng apa_rng(derive_seed(cfg.seed, 2));

  Adam<T> adam_d(static_cast<T>(cfg.learning_rate), static_cast<T>(cfg.adam_beta1),
                 static_cast<T>(cfg.adam_beta2));
  Adam<T> adam_g(static_cast<T>(cfg.learning_rate), static_cast<T>(cfg.adam_beta1),
                 static_cast<T>(cfg.adam_beta2));

  GanTrainResult res;
  res.log.reserve(static_cast<std::size_t>(cfg.steps));
  const std::int64_t B = cfg.batch_size;
  const std::int64_t ncls = gen.config().num_classes;
  double apa_p = 0.0;
  double last_r1 = 0.0;

  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    GanStepLog entry;
    entry.step = step;

    std::vector<std::size_t> indices(static_cast<std::size_t>(B));
    for (auto& ix : indices) ix = static_cast<std::size_t>(data_rng.below(data.size()));
    std::vector<int> real_ids;
    Tensor<T> reals = detail::batch_from_dataset<T>(data, indices, real_ids);

    // Detached fakes, labeled like the real batch so they can stand in for
    // real samples under pseudo augmentation.
    const auto z_d = Tensor<T>::randn({B, gen.config().d_z}, z_rng);
    const Tensor<T> fakes = gen.synthesize_eval(gen.map_latent_eval(z_d, real_ids));

    if (cfg.apa_enabled) {
      const std::int64_t vol = R * R * R;
      for (std::int64_t b = 0; b < B; ++b) {
        if (apa_rng.uniform() < apa_p) {
          std::copy(fakes.data() + b * vol, fakes.data() + (b + 1) * vol,
                    reals.data() + b * vol);
        }
      }
    }

    // Discriminator update.
    double d_loss_value = 0.0;
    {
      Tape<T> tape;
      BoundParams<T> p(tape, disc.params(), true);
      Var l_real = disc.discriminate(tape, p, tape.constant(reals), real_ids);
      Var l_fake = disc.discriminate(tape, p, tape.constant(fakes), real_ids);
      Var loss = ops::add(tape, ops::mean_all(tape, ops::softplus_rows(tape, l_real, T(-1))),
                          ops::mean_all(tape, ops::softplus_rows(tape, l_fake, T(1))));
      d_loss_value = static_cast<double>(tape.val(loss)[0]);

      const auto& lr_vals = tape.val(l_real);
      double sign_sum = 0.0;
      for (std::int64_t b = 0; b < B; ++b) {
        sign_sum += lr_vals[b] > T(0) ? 1.0 : (lr_vals[b] < T(0) ? -1.0 : 0.0);
      }
      entry.r_t = sign_sum / static_cast<double>(B);

      tape.backward(loss);
      auto grads = collect_grads(tape, p);
      if (cfg.r1_gamma > 0.0 && step % cfg.r1_interval == 0) {
        Tensor<T> v;
        last_r1 = r1_penalty(disc, reals, real_ids, cfg.r1_gamma, &v);
        detail::add_r1_param_grads(disc, reals, real_ids, cfg.r1_gamma, v, grads);
      }
      adam_d.step(disc.params(), grads);
    }

    // Generator update against the refreshed discriminator.
    double g_loss_value = 0.0;
    {
      const auto z_g = Tensor<T>::randn({B, gen.config().d_z}, z_rng);
      std::vector<int> g_ids(static_cast<std::size_t>(B));
      for (auto& id : g_ids) id = static_cast<int>(z_rng.below(static_cast<std::uint64_t>(ncls)));

      Tape<T> tape;
      BoundParams<T> gp(tape, gen.params(), true);
      BoundParams<T> dp(tape, disc.params(), false);
      Var w = gen.map_latent(tape, gp, tape.constant(z_g), g_ids);
      Var volume = gen.synthesize(tape, gp, w);
      Var logits = disc.discriminate(tape, dp, volume, g_ids);
      Var loss = ops::mean_all(tape, ops::softplus_rows(tape, logits, T(-1)));
      g_loss_value = static_cast<double>(tape.val(loss)[0]);
      tape.backward(loss);
      adam_g.step(gen.params(), collect_grads(tape, gp));
    }

    if (cfg.apa_enabled && (step + 1) % cfg.apa_interval == 0) {
      apa_p += entry.r_t > cfg.apa_target ? cfg.apa_step : -cfg.apa_step;
      apa_p = std::min(std::max(apa_p, 0.0), cfg.apa_max);
    }

    entry.d_loss = d_loss_value;
    entry.g_loss = g_loss_value;
    entry.r1 = last_r1;
    entry.apa_p = apa_p;
    res.log.push_back(entry);

    if (!std::isfinite(d_loss_value) || !std::isfinite(g_loss_value) ||
        !std::isfinite(last_r1)) {
      res.aborted = true;
      res.abort_reason = "non-finite loss at step " + std::to_string(step) +
                         " (d_loss=" + std::to_string(d_loss_value) +
                         ", g_loss=" + std::to_string(g_loss_value) +
                         ", r1=" + std::to_string(last_r1) + ")";
      break;
    }
  }
  return res;
}

}  // namespace voxopt
