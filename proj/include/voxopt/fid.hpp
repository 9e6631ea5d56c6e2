#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "voxopt/generator.hpp"
#include "voxopt/tensor.hpp"
#include "voxopt/voxel.hpp"

namespace voxopt {

/// Gaussian summary (mean, covariance, sample count) of an embedded slice set.
struct FeatureStats {
  Tensor<double> mean;        // [d_f]
  Tensor<double> covariance;  // [d_f, d_f], symmetric
  std::int64_t count = 0;
};

/// Maps one upsampled [3,128,128] slice to a fixed-length feature vector.
/// Implementations must be deterministic for a given construction.
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual std::string id() const = 0;
  virtual std::int64_t feature_dim() const = 0;
  virtual std::vector<double> embed(const Tensor<double>& slice) const = 0;
};

/// Default embedding: four stride-2 3x3 convolutions with fixed-seed random
/// weights (3 -> 8 -> 16 -> 32 -> d_f channels, ReLU between), followed by a
/// global average pool. No training involved, so two instances built with the
/// same seed embed identically.
class RandomConvExtractor final : public FeatureExtractor {
 public:
  explicit RandomConvExtractor(std::uint64_t seed = 1234, std::int64_t d_f = 64);

  std::string id() const override;
  std::int64_t feature_dim() const override { return d_f_; }
  std::vector<double> embed(const Tensor<double>& slice) const override;

 private:
  std::uint64_t seed_ = 0;
  std::int64_t d_f_ = 0;
  std::vector<std::int64_t> channels_;
  std::vector<std::vector<double>> weights_;  // per layer: [out][in][3][3]
};

/// Sample mean and covariance of the extractor outputs over the slice set.
/// Requires at least two slices, each shaped [3,128,128].
FeatureStats extract_features(const std::vector<Tensor<double>>& slices,
                              const FeatureExtractor& extractor);

/// ||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^{1/2}), the Gaussian Fréchet
/// distance. The matrix square root runs through an eigendecomposition of the
/// symmetrized product sqrt(Sa) Sb sqrt(Sa); if that fails both covariances
/// are regularized once with +1e-6 I. A small negative residue is clamped to
/// zero and noted in `warnings` when a sink is given.
double frechet_distance(const FeatureStats& a, const FeatureStats& b,
                        std::vector<std::string>* warnings = nullptr);

struct FidReport {
  double axial = 0.0;
  double coronal = 0.0;
  double sagittal = 0.0;
  std::string extractor_id;
  std::int64_t real_count = 0;
  std::int64_t fake_count = 0;
  std::vector<std::string> warnings;
};

/// Per-plane Fréchet distances between two explicit binary grid sets: middle
/// slices of every grid, nearest-neighbor upsample to [3,128,128], one
/// distance per plane. Also the generator-bypass path for self-comparison.
FidReport slice_fid_between(const std::vector<VoxelGrid>& real,
                            const std::vector<VoxelGrid>& fake,
                            const FeatureExtractor& extractor);

/// Synthesizes `per_label` samples for each labeled real record (so the fake
/// set is per_label times the real count), binarizes them, and compares the
/// two sets per plane.
FidReport slice_fid(const Generator<float>& gen, const std::vector<VoxelGrid>& real,
                    const std::vector<int>& labels, std::int64_t per_label,
                    const FeatureExtractor& extractor, std::uint64_t seed = 1);

}  // namespace voxopt
