#pragma once

#include <cstdint>
#include <string>

#include "voxopt/comparator.hpp"
#include "voxopt/discriminator.hpp"
#include "voxopt/generator.hpp"
#include "voxopt/optimize.hpp"
#include "voxopt/tensor.hpp"

namespace voxopt {

// Checkpoint container: "VXCK" magic, one version byte, u32 little-endian
// header length, a JSON header (kind, architecture, step, seed, tensor
// directory), then every tensor's payload as f32 little-endian in directory
// order. The loader rebuilds the model from the architecture block and
// requires the directory to match the rebuilt parameter set exactly.

struct GanCheckpoint {
  Generator<float> generator;
  Discriminator<float> discriminator;
  std::int64_t step = 0;
  std::uint64_t seed = 0;
};

struct ComparatorCheckpoint {
  Comparator<float> comparator;
  std::int64_t step = 0;
  std::uint64_t seed = 0;
};

struct MapperCheckpoint {
  Mapper<float> mapper;
  std::int64_t step = 0;
  std::uint64_t seed = 0;
};

void save_gan_checkpoint(const Generator<float>& gen, const Discriminator<float>& disc,
                         std::int64_t step, std::uint64_t seed, const std::string& path);
GanCheckpoint load_gan_checkpoint(const std::string& path);

void save_comparator_checkpoint(const Comparator<float>& comp, std::int64_t step,
                                std::uint64_t seed, const std::string& path);
ComparatorCheckpoint load_comparator_checkpoint(const std::string& path);

void save_mapper_checkpoint(const Mapper<float>& mapper, std::int64_t step, std::uint64_t seed,
                            const std::string& path);
MapperCheckpoint load_mapper_checkpoint(const std::string& path);

/// Inversion output: the W-space code plus the hash of the generator
/// checkpoint it belongs to. Stored as a small JSON file.
struct LatentFile {
  std::int64_t d_w = 0;
  Tensor<float> w;  // [1, d_w]
  int class_id = -1;
  std::string gan_checkpoint_hash;
};

void save_latent_file(const LatentFile& latent, const std::string& path);
LatentFile load_latent_file(const std::string& path);

}  // namespace voxopt
