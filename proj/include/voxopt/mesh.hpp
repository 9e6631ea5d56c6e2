#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "voxopt/voxel.hpp"

namespace voxopt {

struct TriangleMesh {
  std::vector<std::array<double, 3>> vertices;
  std::vector<std::array<std::int32_t, 3>> triangles;

  void validate() const {
    if (triangles.empty()) throw ValidationError("mesh has no triangles");
    const auto n = static_cast<std::int32_t>(vertices.size());
    for (const auto& t : triangles) {
      for (std::int32_t i : t) {
        if (i < 0 || i >= n) throw ValidationError("triangle index out of range");
      }
    }
  }
};

/// Binary STL: 80-byte header, u32 LE triangle count, 50 bytes per triangle
/// (normal + 3 vertices as f32 LE, u16 attribute). Vertices are deduplicated
/// on exact bit patterns.
TriangleMesh parse_stl(const std::vector<unsigned char>& bytes);

/// Inverse of parse_stl, for round trips and synthetic fixtures.
std::vector<unsigned char> write_stl_bytes(const TriangleMesh& mesh);

struct VoxelizeResult {
  VoxelGrid grid;
  bool zero_volume = false;     // degenerate bounding box; grid left empty
  bool parity_mismatch = false; // some ray exited the mesh still "inside"
};

/// Rasterizes a mesh to cell-center occupancy. The mesh is uniformly scaled
/// and centered into [0,1]^3 with a one-cell margin, then each (y,z) column
/// is resolved by parity of ray-triangle crossings along +x.
VoxelizeResult voxelize(const TriangleMesh& mesh, std::int64_t resolution);

}  // namespace voxopt
