#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "voxopt/rng.hpp"
#include "voxopt/voxel.hpp"

namespace voxopt {

enum class HeadStyle : int { hex = 0, round = 1, countersunk = 2 };

/// Parametric screw/bolt in unit-domain coordinates. The part stands on the
/// z axis, head on top, and is centered vertically.
struct ScrewSpec {
  HeadStyle head_style = HeadStyle::hex;
  double head_radius = 0.3;
  double head_height = 0.2;
  double shaft_radius = 0.1;
  double shaft_length = 0.5;
  double thread_depth = 0.0;
  int class_id = 0;

  void validate() const {
    if (!(head_radius > 0.0 && head_radius < 0.5)) {
      throw ValidationError("head_radius must be in (0, 0.5)");
    }
    if (!(head_height > 0.0 && head_height < 0.4)) {
      throw ValidationError("head_height must be in (0, 0.4)");
    }
    if (!(shaft_radius > 0.0 && shaft_radius < head_radius)) {
      throw ValidationError("shaft_radius must be in (0, head_radius)");
    }
    if (!(shaft_length > 0.0 && shaft_length < 0.9)) {
      throw ValidationError("shaft_length must be in (0, 0.9)");
    }
    if (!(thread_depth >= 0.0)) throw ValidationError("thread_depth must be >= 0");
    if (head_height + shaft_length > 0.95) {
      throw ValidationError("head_height + shaft_length must be <= 0.95");
    }
    if (class_id < 0) throw ValidationError("class_id must be non-negative");
  }
};

struct PairSample {
  VoxelGrid first;
  VoxelGrid second;
  int label = 0;  // 1 iff `first` is more optimized
};

struct LabeledGrid {
  VoxelGrid grid;
  int class_id = 0;
};

/// Analytic rasterization of the screw solids (head prism/cylinder/frustum
/// plus shaft cylinder with an optional sinusoidal thread).
VoxelGrid generate_screw(const ScrewSpec& spec, std::int64_t resolution);

/// Largest planar contiguous exposed-face area over the six axis directions,
/// in cell^2 units. Zero for an empty grid.
double grabability_score(const VoxelGrid& grid);

/// Deterministic random screw; class_id encodes head style and a shaft-length
/// tercile, giving nine classes.
ScrewSpec random_screw_spec(Rng& rng);
int screw_class_id(const ScrewSpec& spec);
constexpr int kNumScrewClasses = 9;

/// Labeled pairs for comparator training. Score ties (< 1 cell^2) are
/// rejected and resampled; label balance is forced to ~50% by ordering.
std::vector<PairSample> make_pair_dataset(std::int64_t count, std::uint64_t seed,
                                          std::int64_t resolution);

std::vector<LabeledGrid> make_screw_dataset(std::int64_t count, std::uint64_t seed,
                                            std::int64_t resolution);

// Manifest formats: one record per line.
//   pairs:  "<path_first> <path_second> <label>"
//   screws: "<path> <class_id>"
struct PairPaths {
  std::string first, second;
  int label = 0;
};
struct GridPath {
  std::string path;
  int class_id = 0;
};

void write_pair_manifest(const std::vector<PairPaths>& entries, const std::string& path);
std::vector<PairPaths> read_pair_manifest(const std::string& path);
void write_grid_manifest(const std::vector<GridPath>& entries, const std::string& path);
std::vector<GridPath> read_grid_manifest(const std::string& path);

}  // namespace voxopt
