#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "voxopt/common.hpp"
#include "voxopt/tensor.hpp"

namespace voxopt {

/// Binary occupancy cube. Layout is x-fastest: data[x + R*(y + R*z)].
/// Axis 0 = x, axis 1 = y, axis 2 = z; +z is "up" for generated parts.
struct VoxelGrid {
  std::int64_t resolution = 0;
  std::vector<std::uint8_t> data;
  std::string meta;

  VoxelGrid() = default;
  explicit VoxelGrid(std::int64_t r)
      : resolution(r), data(static_cast<std::size_t>(checked_cells(r)), 0) {}
  VoxelGrid(std::int64_t r, std::vector<std::uint8_t> d) : resolution(r), data(std::move(d)) {
    validate();
  }

  std::uint8_t at(std::int64_t x, std::int64_t y, std::int64_t z) const {
    return data[static_cast<std::size_t>(x + resolution * (y + resolution * z))];
  }
  void set(std::int64_t x, std::int64_t y, std::int64_t z, std::uint8_t v) {
    data[static_cast<std::size_t>(x + resolution * (y + resolution * z))] = v;
  }

  std::int64_t cells() const { return static_cast<std::int64_t>(data.size()); }

  std::int64_t count_occupied() const {
    std::int64_t n = 0;
    for (std::uint8_t v : data) n += v;
    return n;
  }

  void validate() const {
    if (resolution < 1) throw ValidationError("voxel grid resolution must be positive");
    if (cells() != resolution * resolution * resolution) {
      throw ValidationError("voxel grid data size does not match resolution^3");
    }
    for (std::uint8_t v : data) {
      if (v > 1) throw ValidationError("voxel grid entries must be 0 or 1");
    }
  }

  static std::int64_t checked_cells(std::int64_t r) {
    if (r < 1) throw ValidationError("voxel grid resolution must be positive");
    return r * r * r;
  }
};

/// Real-valued cube in the generator's tanh range [-1, 1]. Same layout as
/// VoxelGrid, so the flat data vector doubles as an NCDHW [1,1,R,R,R] volume.
struct SignedGrid {
  std::int64_t resolution = 0;
  std::vector<float> data;

  SignedGrid() = default;
  explicit SignedGrid(std::int64_t r)
      : resolution(r), data(static_cast<std::size_t>(VoxelGrid::checked_cells(r)), -1.0f) {}
  SignedGrid(std::int64_t r, std::vector<float> d) : resolution(r), data(std::move(d)) { validate(); }

  float at(std::int64_t x, std::int64_t y, std::int64_t z) const {
    return data[static_cast<std::size_t>(x + resolution * (y + resolution * z))];
  }

  void validate() const {
    if (resolution < 1) throw ValidationError("signed grid resolution must be positive");
    if (static_cast<std::int64_t>(data.size()) != resolution * resolution * resolution) {
      throw ValidationError("signed grid data size does not match resolution^3");
    }
    for (float v : data) {
      if (!(v >= -1.0f && v <= 1.0f)) {
        throw ValidationError("signed grid entries must lie in [-1, 1]");
      }
    }
  }

  Tensor<float> as_tensor() const {
    return Tensor<float>({1, 1, resolution, resolution, resolution}, data);
  }
};

SignedGrid to_signed(const VoxelGrid& g);
VoxelGrid binarize(const SignedGrid& g, float threshold = 0.0f);
SignedGrid signed_from_tensor(const Tensor<float>& t);

/// One axis-orthogonal plane; data[u + R*v].
template <typename T>
struct Slice2D {
  std::int64_t resolution = 0;
  std::vector<T> data;
};

/// The three middle planes at index floor(R/2):
/// axial fixes axis 2 (u=x, v=y), coronal fixes axis 1 (u=x, v=z),
/// sagittal fixes axis 0 (u=y, v=z).
template <typename G>
struct MiddleSlices {
  G axial, coronal, sagittal;
};

MiddleSlices<Slice2D<std::uint8_t>> middle_slices(const VoxelGrid& g);
MiddleSlices<Slice2D<float>> middle_slices(const SignedGrid& g);

/// Nearest-neighbor upsampling to 128x128 with the channel replicated 3x.
/// Returns a [3,128,128] tensor; all three channels identical.
Tensor<double> upsample_slice(const Slice2D<std::uint8_t>& s);
Tensor<double> upsample_slice(const Slice2D<float>& s);

// VOXB container: "VOXB", version byte 1, u32 little-endian resolution,
// ceil(R^3/8) bit-packed occupancy bytes (x-fastest, LSB first).
std::vector<unsigned char> to_voxb_bytes(const VoxelGrid& g);
VoxelGrid from_voxb_bytes(const std::vector<unsigned char>& bytes);
void write_voxb(const VoxelGrid& g, const std::string& path);
VoxelGrid read_voxb(const std::string& path);

/// 8-bit grayscale PGM (P5). Occupancy maps {0,1} to {0,255}.
void write_pgm(const Slice2D<std::uint8_t>& s, const std::string& path);

}  // namespace voxopt
