#include "voxopt/fid.hpp"

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <cstddef>
#include <sstream>

#include "voxopt/common.hpp"
#include "voxopt/rng.hpp"

namespace voxopt {
namespace {

constexpr std::int64_t kSliceSide = 128;
constexpr std::int64_t kSliceChannels = 3;

void check_slice_shape(const Tensor<double>& s) {
  if (s.shape() != std::vector<std::int64_t>{kSliceChannels, kSliceSide, kSliceSide}) {
    throw ValidationError("feature extraction expects [3,128,128] slices");
  }
}

void check_stats(const FeatureStats& s, const char* which) {
  const std::string name(which);
  if (s.mean.rank() != 1) throw ValidationError(name + " stats mean must be rank 1");
  const std::int64_t d = s.mean.dim(0);
  if (s.covariance.shape() != std::vector<std::int64_t>{d, d}) {
    throw ValidationError(name + " stats covariance must be [d_f, d_f]");
  }
  if (s.count < 2) throw ValidationError(name + " stats need count >= 2");
  if (!s.mean.all_finite() || !s.covariance.all_finite()) {
    throw ValidationError(name + " stats contain non-finite values");
  }
  for (std::int64_t r = 0; r < d; ++r) {
    for (std::int64_t c = r + 1; c < d; ++c) {
      if (std::abs(s.covariance[r * d + c] - s.covariance[c * d + r]) > 1e-9) {
        throw ValidationError(name + " stats covariance is not symmetric");
      }
    }
  }
}

Eigen::MatrixXd to_eigen_sym(const Tensor<double>& cov) {
  const std::int64_t d = cov.dim(0);
  Eigen::MatrixXd m(d, d);
  for (std::int64_t r = 0; r < d; ++r) {
    for (std::int64_t c = 0; c < d; ++c) {
      m(r, c) = 0.5 * (cov[r * d + c] + cov[c * d + r]);
    }
  }
  return m;
}

struct SqrtTrace {
  double trace = 0.0;
  bool ok = false;
};

/// Trace of the principal square root of (a b), computed via the spectrum of
/// the symmetric matrix sqrt(a) b sqrt(a), which shares its eigenvalues.
SqrtTrace product_sqrt_trace(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  SqrtTrace out;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es_a(a);
  if (es_a.info() != Eigen::Success) return out;
  const Eigen::VectorXd ev_a = es_a.eigenvalues();
  const double scale_a = std::max(1.0, std::abs(ev_a.maxCoeff()));
  if (ev_a.minCoeff() < -1e-8 * scale_a) return out;
  Eigen::VectorXd root(ev_a.size());
  for (Eigen::Index i = 0; i < ev_a.size(); ++i) root[i] = std::sqrt(std::max(ev_a[i], 0.0));
  const Eigen::MatrixXd sqrt_a =
      es_a.eigenvectors() * root.asDiagonal() * es_a.eigenvectors().transpose();

  Eigen::MatrixXd s = sqrt_a * b * sqrt_a;
  s = 0.5 * (s + s.transpose()).eval();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es_s(s);
  if (es_s.info() != Eigen::Success) return out;
  const Eigen::VectorXd ev_s = es_s.eigenvalues();
  const double scale_s = std::max(1.0, std::abs(ev_s.maxCoeff()));
  if (ev_s.minCoeff() < -1e-8 * scale_s) return out;
  double trace = 0.0;
  for (Eigen::Index i = 0; i < ev_s.size(); ++i) trace += std::sqrt(std::max(ev_s[i], 0.0));
  if (!std::isfinite(trace)) return out;
  out.trace = trace;
  out.ok = true;
  return out;
}

void warn(std::vector<std::string>* sink, const std::string& message) {
  if (sink != nullptr) sink->push_back(message);
}

/// Zero-padded stride-2 3x3 convolution; shapes [cin,h,w] -> [cout,h/2,w/2].
std::vector<double> conv_down(const std::vector<double>& in, std::int64_t cin, std::int64_t h,
                              std::int64_t w, const std::vector<double>& weights,
                              std::int64_t cout) {
  const std::int64_t oh = h / 2;
  const std::int64_t ow = w / 2;
  std::vector<double> out(static_cast<std::size_t>(cout * oh * ow), 0.0);
  for (std::int64_t k = 0; k < cout; ++k) {
    for (std::int64_t oy = 0; oy < oh; ++oy) {
      for (std::int64_t ox = 0; ox < ow; ++ox) {
        double acc = 0.0;
        for (std::int64_t c = 0; c < cin; ++c) {
          const double* wk = weights.data() + ((k * cin + c) * 9);
          const double* plane = in.data() + c * h * w;
          for (std::int64_t dy = 0; dy < 3; ++dy) {
            const std::int64_t y = 2 * oy + dy - 1;
            if (y < 0 || y >= h) continue;
            for (std::int64_t dx = 0; dx < 3; ++dx) {
              const std::int64_t x = 2 * ox + dx - 1;
              if (x < 0 || x >= w) continue;
              acc += plane[y * w + x] * wk[dy * 3 + dx];
            }
          }
        }
        out[static_cast<std::size_t>((k * oh + oy) * ow + ox)] = acc;
      }
    }
  }
  return out;
}

}  // namespace

RandomConvExtractor::RandomConvExtractor(std::uint64_t seed, std::int64_t d_f)
    : seed_(seed), d_f_(d_f) {
  if (d_f < 1) throw ValidationError("feature dimension must be positive");
  channels_ = {kSliceChannels, 8, 16, 32, d_f};
  Rng rng(seed);
  for (std::size_t layer = 0; layer + 1 < channels_.size(); ++layer) {
    const std::int64_t cin = channels_[layer];
    const std::int64_t cout = channels_[layer + 1];
    const double scale = std::sqrt(2.0 / static_cast<double>(cin * 9));
    std::vector<double> w(static_cast<std::size_t>(cout * cin * 9));
    for (auto& v : w) v = rng.gaussian() * scale;
    weights_.push_back(std::move(w));
  }
}

std::string RandomConvExtractor::id() const {
  std::ostringstream os;
  os << "randconv-d" << d_f_ << "-seed" << seed_;
  return os.str();
}

std::vector<double> RandomConvExtractor::embed(const Tensor<double>& slice) const {
  check_slice_shape(slice);
  std::vector<double> act(slice.data(), slice.data() + slice.numel());
  std::int64_t h = kSliceSide;
  std::int64_t w = kSliceSide;
  for (std::size_t layer = 0; layer < weights_.size(); ++layer) {
    act = conv_down(act, channels_[layer], h, w, weights_[layer], channels_[layer + 1]);
    h /= 2;
    w /= 2;
    if (layer + 1 < weights_.size()) {
      for (auto& v : act) v = std::max(v, 0.0);
    }
  }
  std::vector<double> features(static_cast<std::size_t>(d_f_), 0.0);
  const double inv_area = 1.0 / static_cast<double>(h * w);
  for (std::int64_t k = 0; k < d_f_; ++k) {
    double acc = 0.0;
    for (std::int64_t i = 0; i < h * w; ++i) acc += act[static_cast<std::size_t>(k * h * w + i)];
    features[static_cast<std::size_t>(k)] = acc * inv_area;
  }
  return features;
}

FeatureStats extract_features(const std::vector<Tensor<double>>& slices,
                              const FeatureExtractor& extractor) {
  if (slices.size() < 2) {
    throw ValidationError("feature statistics need at least 2 slices");
  }
  const std::int64_t d = extractor.feature_dim();
  const auto n = static_cast<std::int64_t>(slices.size());
  // Single pass: sums and outer-product sums, reduced in slice order.
  std::vector<double> s1(static_cast<std::size_t>(d), 0.0);
  std::vector<double> s2(static_cast<std::size_t>(d * d), 0.0);
  for (const auto& slice : slices) {
    const std::vector<double> f = extractor.embed(slice);
    if (static_cast<std::int64_t>(f.size()) != d) {
      throw ValidationError("extractor returned a feature of the wrong dimension");
    }
    for (std::int64_t i = 0; i < d; ++i) {
      s1[static_cast<std::size_t>(i)] += f[static_cast<std::size_t>(i)];
      for (std::int64_t j = i; j < d; ++j) {
        s2[static_cast<std::size_t>(i * d + j)] +=
            f[static_cast<std::size_t>(i)] * f[static_cast<std::size_t>(j)];
      }
    }
  }
  FeatureStats stats;
  stats.count = n;
  stats.mean = Tensor<double>({d});
  for (std::int64_t i = 0; i < d; ++i) stats.mean[i] = s1[static_cast<std::size_t>(i)] / n;
  stats.covariance = Tensor<double>({d, d});
  const double denom = static_cast<double>(n - 1);
  for (std::int64_t i = 0; i < d; ++i) {
    for (std::int64_t j = i; j < d; ++j) {
      const double c =
          (s2[static_cast<std::size_t>(i * d + j)] - n * stats.mean[i] * stats.mean[j]) / denom;
      stats.covariance[i * d + j] = c;
      stats.covariance[j * d + i] = c;
    }
  }
  if (!stats.mean.all_finite() || !stats.covariance.all_finite()) {
    throw ValidationError("feature statistics are non-finite");
  }
  return stats;
}

double frechet_distance(const FeatureStats& a, const FeatureStats& b,
                        std::vector<std::string>* warnings) {
  check_stats(a, "first");
  check_stats(b, "second");
  if (a.mean.dim(0) != b.mean.dim(0)) {
    throw ValidationError("feature dimensions differ between the two stats");
  }
  const std::int64_t d = a.mean.dim(0);

  double mean_dist = 0.0;
  for (std::int64_t i = 0; i < d; ++i) {
    const double diff = a.mean[i] - b.mean[i];
    mean_dist += diff * diff;
  }

  Eigen::MatrixXd sa = to_eigen_sym(a.covariance);
  Eigen::MatrixXd sb = to_eigen_sym(b.covariance);
  SqrtTrace st = product_sqrt_trace(sa, sb);
  if (!st.ok) {
    warn(warnings, "covariance square root regularized with +1e-6 I");
    sa += 1e-6 * Eigen::MatrixXd::Identity(d, d);
    sb += 1e-6 * Eigen::MatrixXd::Identity(d, d);
    st = product_sqrt_trace(sa, sb);
    if (!st.ok) {
      throw ValidationError("covariance square root failed even after regularization");
    }
  }

  double dist = mean_dist + sa.trace() + sb.trace() - 2.0 * st.trace;
  if (!std::isfinite(dist)) throw ValidationError("Fréchet distance is non-finite");
  if (dist < 0.0) {
    std::ostringstream os;
    os << "clamped negative Fréchet residue " << dist << " to zero";
    warn(warnings, os.str());
    dist = 0.0;
  }
  return dist;
}

FidReport slice_fid_between(const std::vector<VoxelGrid>& real,
                            const std::vector<VoxelGrid>& fake,
                            const FeatureExtractor& extractor) {
  if (real.empty()) throw ValidationError("real grid set is empty");
  if (fake.empty()) throw ValidationError("fake grid set is empty");

  const auto plane_slices = [](const std::vector<VoxelGrid>& grids) {
    std::array<std::vector<Tensor<double>>, 3> planes;
    for (const auto& g : grids) {
      const auto mids = middle_slices(g);
      planes[0].push_back(upsample_slice(mids.axial));
      planes[1].push_back(upsample_slice(mids.coronal));
      planes[2].push_back(upsample_slice(mids.sagittal));
    }
    return planes;
  };
  const auto real_planes = plane_slices(real);
  const auto fake_planes = plane_slices(fake);

  FidReport report;
  report.extractor_id = extractor.id();
  report.real_count = static_cast<std::int64_t>(real.size());
  report.fake_count = static_cast<std::int64_t>(fake.size());
  const char* plane_names[3] = {"axial", "coronal", "sagittal"};
  double* outputs[3] = {&report.axial, &report.coronal, &report.sagittal};
  for (int p = 0; p < 3; ++p) {
    const FeatureStats rs = extract_features(real_planes[static_cast<std::size_t>(p)], extractor);
    const FeatureStats fs = extract_features(fake_planes[static_cast<std::size_t>(p)], extractor);
    std::vector<std::string> plane_warnings;
    *outputs[p] = frechet_distance(rs, fs, &plane_warnings);
    for (const auto& msg : plane_warnings) {
      report.warnings.push_back(std::string(plane_names[p]) + ": " + msg);
    }
  }
  return report;
}

FidReport slice_fid(const Generator<float>& gen, const std::vector<VoxelGrid>& real,
                    const std::vector<int>& labels, std::int64_t per_label,
                    const FeatureExtractor& extractor, std::uint64_t seed) {
  if (real.empty()) throw ValidationError("real grid set is empty");
  if (labels.size() != real.size()) {
    throw ValidationError("need exactly one class label per real grid");
  }
  if (per_label < 1) throw ValidationError("per_label must be at least 1");
  const auto& cfg = gen.config();
  for (const auto& g : real) {
    if (g.resolution != cfg.resolution) {
      throw ValidationError("real grid resolution does not match the generator");
    }
  }
  for (int label : labels) {
    if (label < 0 || label >= cfg.num_classes) {
      throw ValidationError("class label out of range for the generator");
    }
  }

  std::vector<int> fake_labels;
  fake_labels.reserve(static_cast<std::size_t>(per_label) * labels.size());
  for (int label : labels) {
    for (std::int64_t k = 0; k < per_label; ++k) fake_labels.push_back(label);
  }

  Rng rng(derive_seed(seed, 0));
  std::vector<VoxelGrid> fakes;
  fakes.reserve(fake_labels.size());
  const std::int64_t chunk = 16;
  for (std::size_t done = 0; done < fake_labels.size();) {
    const auto take =
        std::min<std::size_t>(static_cast<std::size_t>(chunk), fake_labels.size() - done);
    const auto z =
        Tensor<float>::randn({static_cast<std::int64_t>(take), cfg.d_z}, rng);
    const std::vector<int> ids(fake_labels.begin() + static_cast<std::ptrdiff_t>(done),
                               fake_labels.begin() + static_cast<std::ptrdiff_t>(done + take));
    const auto w = gen.map_latent_eval(z, ids);
    const auto volumes = gen.synthesize_eval(w);
    const std::int64_t voxels = cfg.resolution * cfg.resolution * cfg.resolution;
    for (std::size_t i = 0; i < take; ++i) {
      Tensor<float> one({1, 1, cfg.resolution, cfg.resolution, cfg.resolution});
      for (std::int64_t v = 0; v < voxels; ++v) {
        one[v] = volumes[static_cast<std::int64_t>(i) * voxels + v];
      }
      fakes.push_back(binarize(signed_from_tensor(one)));
    }
    done += take;
  }

  return slice_fid_between(real, fakes, extractor);
}

}  // namespace voxopt
