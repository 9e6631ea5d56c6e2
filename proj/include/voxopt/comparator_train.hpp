#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "voxopt/comparator.hpp"
#include "voxopt/shapegen.hpp"

namespace voxopt {

struct ComparatorTrainConfig {
  std::int64_t epochs = 50;
  std::int64_t batch_size = 16;
  double learning_rate = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double val_fraction = 0.2;
  /// Present each pair a second time with channels swapped and the label
  /// flipped, nudging the model toward the antisymmetry the architecture
  /// itself does not guarantee.
  bool swap_augment = true;
  /// Draw a random square-symmetry orientation (z rotations plus mirror) per
  /// channel per presentation. The transforms permute cells within z slices,
  /// so per-slice widths and with them the pair labels are untouched.
  bool orient_augment = true;
  std::uint64_t seed = 1;

  void validate() const {
    if (epochs < 1) throw ValidationError("train-comparator: epochs must be positive");
    if (batch_size < 1) throw ValidationError("train-comparator: batch_size must be positive");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
      throw ValidationError("train-comparator: learning_rate must be positive and finite");
    }
    if (val_fraction < 0.0 || val_fraction >= 1.0) {
      throw ValidationError("train-comparator: val_fraction must be in [0, 1)");
    }
  }
};

struct ComparatorEpochLog {
  std::int64_t epoch = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
};

struct ComparatorTrainResult {
  std::vector<ComparatorEpochLog> log;
  std::int64_t train_count = 0;
  std::int64_t val_count = 0;
  bool aborted = false;
  std::string abort_reason;
};

namespace detail {

/// Applies one of the 8 square symmetries (k quarter turns about z, then an
/// optional x mirror) to in-slice coordinates.
inline void orient_xy(std::int64_t r, int orient, std::int64_t& x, std::int64_t& y) {
  for (int k = 0; k < (orient & 3); ++k) {
    const std::int64_t tx = y;
    y = r - 1 - x;
    x = tx;
  }
  if (orient & 4) x = r - 1 - x;
}

template <typename T>
void fill_oriented(T* out, const VoxelGrid& grid, int orient) {
  const std::int64_t r = grid.resolution;
  std::int64_t i = 0;
  for (std::int64_t z = 0; z < r; ++z) {
    for (std::int64_t y = 0; y < r; ++y) {
      for (std::int64_t x = 0; x < r; ++x, ++i) {
        std::int64_t sx = x, sy = y;
        orient_xy(r, orient, sx, sy);
        out[i] = grid.at(sx, sy, z) ? T(1) : T(-1);
      }
    }
  }
}

template <typename T>
void fill_pair_channels(Tensor<T>& batch, std::int64_t slot, const VoxelGrid& first,
                        const VoxelGrid& second, int orient_first = 0, int orient_second = 0) {
  const std::int64_t vol = first.resolution * first.resolution * first.resolution;
  T* out = batch.data() + slot * 2 * vol;
  fill_oriented(out, first, orient_first);
  fill_oriented(out + vol, second, orient_second);
}

}  // namespace detail

/// Evaluates mean loss and accuracy on a pair subset without touching params.
template <typename T>
std::pair<double, double> evaluate_comparator(const Comparator<T>& comp,
                                              const std::vector<PairSample>& pairs,
                                              const std::vector<std::size_t>& subset) {
  if (subset.empty()) return {0.0, 0.0};
  const std::int64_t r = comp.config().resolution;
  double loss_sum = 0.0;
  std::int64_t correct = 0;
  for (std::size_t ix : subset) {
    const auto& pair = pairs[ix];
    Tensor<T> batch({1, 2, r, r, r});
    detail::fill_pair_channels(batch, 0, pair.first, pair.second);
    Tape<T> tape;
    BoundParams<T> p(tape, comp.params(), false);
    const T logit = tape.val(comp.logit(tape, p, tape.constant(batch)))[0];
    const T prob = ops::sigmoid(logit);
    loss_sum += static_cast<double>(comparator_loss(prob, pair.label));
    if ((prob > T(0.5)) == (pair.label == 1)) ++correct;
  }
  return {loss_sum / static_cast<double>(subset.size()),
          static_cast<double>(correct) / static_cast<double>(subset.size())};
}

/// Minimizes mean pair cross-entropy with an optional swapped duplicate of
/// every training pair. The trailing val_fraction of a seeded shuffle is
/// held out and scored after every epoch.
template <typename T>
ComparatorTrainResult train_comparator(Comparator<T>& comp, const std::vector<PairSample>& pairs,
                                       const ComparatorTrainConfig& cfg) {
  cfg.validate();
  if (pairs.empty()) throw ValidationError("train-comparator: no pairs given");
  const std::int64_t r = comp.config().resolution;
  for (const auto& pair : pairs) {
    if (pair.first.resolution != r || pair.second.resolution != r) {
      throw ValidationError("train-comparator: pair resolution does not match the model");
    }
    if (pair.label != 0 && pair.label != 1) {
      throw ValidationError("train-comparator: labels must be 0 or 1");
    }
  }

  Rng rng(derive_seed(cfg.seed, 0));
  std::vector<std::size_t> order(pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order.begin(), order.end());
  const auto val_n = static_cast<std::size_t>(std::llround(
      static_cast<double>(pairs.size()) * cfg.val_fraction));
  std::vector<std::size_t> val_set(order.end() - static_cast<std::ptrdiff_t>(val_n), order.end());
  std::vector<std::size_t> train_set(order.begin(), order.end() - static_cast<std::ptrdiff_t>(val_n));
  if (train_set.empty()) throw ValidationError("train-comparator: empty training split");

  Adam<T> adam(static_cast<T>(cfg.learning_rate), static_cast<T>(cfg.adam_beta1),
               static_cast<T>(cfg.adam_beta2));

  ComparatorTrainResult res;
  res.train_count = static_cast<std::int64_t>(train_set.size());
  res.val_count = static_cast<std::int64_t>(val_set.size());

  for (std::int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(train_set.begin(), train_set.end());
    double loss_sum = 0.0;
    std::int64_t loss_count = 0, correct = 0, seen = 0;

    for (std::size_t start = 0; start < train_set.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const auto stop = std::min(train_set.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const auto base = static_cast<std::int64_t>(stop - start);
      const std::int64_t rows = cfg.swap_augment ? 2 * base : base;

      Tensor<T> batch({rows, 2, r, r, r});
      std::vector<T> targets(static_cast<std::size_t>(rows));
      const auto draw_orient = [&]() {
        return cfg.orient_augment ? std::min(7, static_cast<int>(rng.uniform(0.0, 8.0))) : 0;
      };
      for (std::int64_t b = 0; b < base; ++b) {
        const auto& pair = pairs[train_set[start + static_cast<std::size_t>(b)]];
        detail::fill_pair_channels(batch, b, pair.first, pair.second, draw_orient(),
                                   draw_orient());
        targets[static_cast<std::size_t>(b)] = static_cast<T>(pair.label);
        if (cfg.swap_augment) {
          detail::fill_pair_channels(batch, base + b, pair.second, pair.first, draw_orient(),
                                     draw_orient());
          targets[static_cast<std::size_t>(base + b)] = static_cast<T>(1 - pair.label);
        }
      }

      Tape<T> tape;
      BoundParams<T> p(tape, comp.params(), true);
      Var logits = comp.logit(tape, p, tape.constant(batch));
      Var loss = ops::mean_all(tape, ops::bce_with_logits(tape, logits, targets));
      const double loss_value = static_cast<double>(tape.val(loss)[0]);
      loss_sum += loss_value * static_cast<double>(rows);
      loss_count += rows;

      const auto& lvals = tape.val(logits);
      for (std::int64_t b = 0; b < rows; ++b) {
        const bool predicted_first = lvals[b] > T(0);
        if (predicted_first == (targets[static_cast<std::size_t>(b)] > T(0.5))) ++correct;
        ++seen;
      }

      if (!std::isfinite(loss_value)) {
        res.aborted = true;
        res.abort_reason = "non-finite loss at epoch " + std::to_string(epoch) +
                           " batch starting at " + std::to_string(start);
        return res;
      }

      tape.backward(loss);
      adam.step(comp.params(), collect_grads(tape, p));
    }

    ComparatorEpochLog entry;
    entry.epoch = epoch;
    entry.train_loss = loss_sum / static_cast<double>(loss_count);
    entry.train_accuracy = static_cast<double>(correct) / static_cast<double>(seen);
    const auto val = evaluate_comparator(comp, pairs, val_set);
    entry.val_loss = val.first;
    entry.val_accuracy = val.second;
    res.log.push_back(entry);
  }
  return res;
}

}  // namespace voxopt
