#include "voxopt/mesh.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <tuple>

namespace voxopt {

namespace {

float read_f32le(const unsigned char* p) {
  std::uint32_t u = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                    (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
  float f;
  std::memcpy(&f, &u, 4);
  return f;
}

void write_f32le(std::vector<unsigned char>& out, float f) {
  std::uint32_t u;
  std::memcpy(&u, &f, 4);
  out.push_back(static_cast<unsigned char>(u & 0xff));
  out.push_back(static_cast<unsigned char>((u >> 8) & 0xff));
  out.push_back(static_cast<unsigned char>((u >> 16) & 0xff));
  out.push_back(static_cast<unsigned char>((u >> 24) & 0xff));
}

}  // namespace

TriangleMesh parse_stl(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < 80) throw ParseError("truncated header, expected 80 bytes", bytes.size());
  if (bytes.size() < 84) throw ParseError("expected 4-byte count", 80);
  const std::uint32_t count = static_cast<std::uint32_t>(bytes[80]) |
                              (static_cast<std::uint32_t>(bytes[81]) << 8) |
                              (static_cast<std::uint32_t>(bytes[82]) << 16) |
                              (static_cast<std::uint32_t>(bytes[83]) << 24);
  if (count == 0) throw ParseError("triangle count is zero", 80);
  const std::size_t need = 84 + static_cast<std::size_t>(count) * 50;
  if (bytes.size() < need) {
    throw ParseError("truncated triangle records, declared " + std::to_string(count), bytes.size());
  }
  if (bytes.size() > need) {
    throw ParseError("trailing bytes after declared triangle count", need);
  }

  TriangleMesh mesh;
  // exact-bit dedup keyed on the raw f32 patterns
  std::map<std::tuple<std::uint32_t, std::uint32_t, std::uint32_t>, std::int32_t> seen;
  auto vertex_index = [&](const unsigned char* p) {
    std::uint32_t a, b, c;
    std::memcpy(&a, p, 4);
    std::memcpy(&b, p + 4, 4);
    std::memcpy(&c, p + 8, 4);
    const auto key = std::make_tuple(a, b, c);
    auto it = seen.find(key);
    if (it != seen.end()) return it->second;
    const auto idx = static_cast<std::int32_t>(mesh.vertices.size());
    mesh.vertices.push_back({static_cast<double>(read_f32le(p)), static_cast<double>(read_f32le(p + 4)),
                             static_cast<double>(read_f32le(p + 8))});
    seen.emplace(key, idx);
    return idx;
  };

  mesh.triangles.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const unsigned char* rec = bytes.data() + 84 + static_cast<std::size_t>(i) * 50;
    // rec + 0 is the facet normal, ignored; vertices start at +12
    mesh.triangles.push_back(
        {vertex_index(rec + 12), vertex_index(rec + 24), vertex_index(rec + 36)});
  }
  mesh.validate();
  return mesh;
}

std::vector<unsigned char> write_stl_bytes(const TriangleMesh& mesh) {
  mesh.validate();
  std::vector<unsigned char> out(80, 0);
  const auto count = static_cast<std::uint32_t>(mesh.triangles.size());
  out.push_back(static_cast<unsigned char>(count & 0xff));
  out.push_back(static_cast<unsigned char>((count >> 8) & 0xff));
  out.push_back(static_cast<unsigned char>((count >> 16) & 0xff));
  out.push_back(static_cast<unsigned char>((count >> 24) & 0xff));
  for (const auto& tri : mesh.triangles) {
    const auto& a = mesh.vertices[static_cast<std::size_t>(tri[0])];
    const auto& b = mesh.vertices[static_cast<std::size_t>(tri[1])];
    const auto& c = mesh.vertices[static_cast<std::size_t>(tri[2])];
    const double ux = b[0] - a[0], uy = b[1] - a[1], uz = b[2] - a[2];
    const double vx = c[0] - a[0], vy = c[1] - a[1], vz = c[2] - a[2];
    double nx = uy * vz - uz * vy, ny = uz * vx - ux * vz, nz = ux * vy - uy * vx;
    const double len = std::sqrt(nx * nx + ny * ny + nz * nz);
    if (len > 0) {
      nx /= len;
      ny /= len;
      nz /= len;
    }
    write_f32le(out, static_cast<float>(nx));
    write_f32le(out, static_cast<float>(ny));
    write_f32le(out, static_cast<float>(nz));
    for (const auto* v : {&a, &b, &c}) {
      write_f32le(out, static_cast<float>((*v)[0]));
      write_f32le(out, static_cast<float>((*v)[1]));
      write_f32le(out, static_cast<float>((*v)[2]));
    }
    out.push_back(0);
    out.push_back(0);
  }
  return out;
}

VoxelizeResult voxelize(const TriangleMesh& mesh, std::int64_t resolution) {
  mesh.validate();
  if (resolution < 2) throw ValidationError("voxelize needs resolution >= 2");
  const std::int64_t R = resolution;

  double lo[3] = {mesh.vertices[0][0], mesh.vertices[0][1], mesh.vertices[0][2]};
  double hi[3] = {lo[0], lo[1], lo[2]};
  for (const auto& v : mesh.vertices) {
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::min(lo[a], v[a]);
      hi[a] = std::max(hi[a], v[a]);
    }
  }

  VoxelizeResult res;
  res.grid = VoxelGrid(R);
  const double extent = std::max({hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]});
  if (extent <= 0.0 || hi[0] - lo[0] <= 0.0 || hi[1] - lo[1] <= 0.0 || hi[2] - lo[2] <= 0.0) {
    res.zero_volume = true;
    return res;
  }

  // Uniform scale into [0,1]^3 with a one-cell margin, centered per axis.
  const double scale = (1.0 - 2.0 / static_cast<double>(R)) / extent;
  double shift[3];
  for (int a = 0; a < 3; ++a) shift[a] = 0.5 - scale * (lo[a] + hi[a]) * 0.5;

  std::vector<std::array<double, 3>> verts(mesh.vertices.size());
  for (std::size_t i = 0; i < verts.size(); ++i) {
    for (int a = 0; a < 3; ++a) verts[i][a] = mesh.vertices[i][a] * scale + shift[a];
  }

  // Crossing x-positions per (y,z) ray, filled triangle by triangle.
  // Rays are nudged off the exact cell-center lattice so they cannot pass
  // through shared triangle edges; distinct offsets per axis keep them off
  // the y=z face diagonals that axis-aligned meshes produce.
  const double jitter_y = 1.0e-7;
  const double jitter_z = 2.13e-7;
  std::vector<std::vector<double>> hits(static_cast<std::size_t>(R * R));
  for (const auto& tri : mesh.triangles) {
    const auto& a = verts[static_cast<std::size_t>(tri[0])];
    const auto& b = verts[static_cast<std::size_t>(tri[1])];
    const auto& c = verts[static_cast<std::size_t>(tri[2])];
    const double uy = b[1] - a[1], uz = b[2] - a[2];
    const double vy = c[1] - a[1], vz = c[2] - a[2];
    const double area2 = uy * vz - uz * vy;  // projected signed area onto (y,z)
    if (area2 == 0.0) continue;              // triangle parallel to the ray

    const double ylo = std::min({a[1], b[1], c[1]}), yhi = std::max({a[1], b[1], c[1]});
    const double zlo = std::min({a[2], b[2], c[2]}), zhi = std::max({a[2], b[2], c[2]});
    const auto cell_lo = [R](double t) {
      return std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(t * R - 0.5)));
    };
    const auto cell_hi = [R](double t) {
      return std::min<std::int64_t>(R - 1, static_cast<std::int64_t>(std::ceil(t * R - 0.5)));
    };
    for (std::int64_t k = cell_lo(zlo); k <= cell_hi(zhi); ++k) {
      const double rz = (static_cast<double>(k) + 0.5) / static_cast<double>(R) + jitter_z;
      for (std::int64_t j = cell_lo(ylo); j <= cell_hi(yhi); ++j) {
        const double ry = (static_cast<double>(j) + 0.5) / static_cast<double>(R) + jitter_y;
        // barycentric coordinates of (ry, rz) in the projected triangle
        const double py = ry - a[1], pz = rz - a[2];
        const double s = (py * vz - pz * vy) / area2;
        const double t = (uy * pz - uz * py) / area2;
        if (s <= 0.0 || t <= 0.0 || s + t >= 1.0) continue;
        const double x = a[0] + s * (b[0] - a[0]) + t * (c[0] - a[0]);
        hits[static_cast<std::size_t>(j + R * k)].push_back(x);
      }
    }
  }

  for (std::int64_t k = 0; k < R; ++k) {
    for (std::int64_t j = 0; j < R; ++j) {
      auto& xs = hits[static_cast<std::size_t>(j + R * k)];
      if (xs.empty()) continue;
      std::sort(xs.begin(), xs.end());
      if (xs.size() % 2 != 0) res.parity_mismatch = true;
      std::size_t next = 0;
      for (std::int64_t i = 0; i < R; ++i) {
        const double cx = (static_cast<double>(i) + 0.5) / static_cast<double>(R);
        while (next < xs.size() && xs[next] < cx) ++next;
        if (next % 2 == 1) res.grid.set(i, j, k, 1);
      }
    }
  }
  return res;
}

}  // namespace voxopt
