#pragma once

#include <cmath>
#include <cstdint>

namespace voxopt {

/// Cosine-decayed step size: the full size at step 0, falling toward zero as
/// step approaches the budget.
inline double cosine_decay(double step_size, std::int64_t step, std::int64_t steps) {
  return step_size * 0.5 *
         (1.0 + std::cos(3.14159265358979323846 * static_cast<double>(step) /
                         static_cast<double>(steps)));
}

/// Stops a descent run when the loss is non-finite, or exceeds
/// factor x (first observed loss) for `patience` consecutive observations.
class DivergenceMonitor {
 public:
  DivergenceMonitor(double factor, std::int64_t patience)
      : factor_(factor), patience_(patience) {}

  /// Feeds one loss observation; true means the run has diverged.
  bool observe(double loss) {
    if (!std::isfinite(loss)) return true;
    if (!have_initial_) {
      initial_ = loss;
      have_initial_ = true;
      return false;
    }
    if (initial_ > 0.0 && loss > factor_ * initial_) {
      return ++over_budget_ >= patience_;
    }
    over_budget_ = 0;
    return false;
  }

 private:
  double factor_ = 10.0;
  std::int64_t patience_ = 100;
  double initial_ = 0.0;
  bool have_initial_ = false;
  std::int64_t over_budget_ = 0;
};

}  // namespace voxopt
