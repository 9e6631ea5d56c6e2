#include "voxopt/voxel.hpp"

#include <cstring>

namespace voxopt {

SignedGrid to_signed(const VoxelGrid& g) {
  g.validate();
  SignedGrid s(g.resolution);
  for (std::size_t i = 0; i < g.data.size(); ++i) s.data[i] = g.data[i] ? 1.0f : -1.0f;
  return s;
}

VoxelGrid binarize(const SignedGrid& g, float threshold) {
  VoxelGrid out(g.resolution);
  for (std::size_t i = 0; i < g.data.size(); ++i) out.data[i] = g.data[i] > threshold ? 1 : 0;
  return out;
}

SignedGrid signed_from_tensor(const Tensor<float>& t) {
  if (t.rank() != 5 || t.dim(0) != 1 || t.dim(1) != 1 || t.dim(2) != t.dim(3) || t.dim(3) != t.dim(4)) {
    throw ValidationError("expected a [1,1,R,R,R] tensor");
  }
  return SignedGrid(t.dim(2), t.vec());
}

namespace {

template <typename T, typename G>
MiddleSlices<Slice2D<T>> slices_impl(const G& g) {
  const std::int64_t R = g.resolution;
  if (R < 2) throw ValidationError("middle slices need resolution >= 2");
  const std::int64_t m = R / 2;
  MiddleSlices<Slice2D<T>> out;
  out.axial.resolution = out.coronal.resolution = out.sagittal.resolution = R;
  out.axial.data.resize(static_cast<std::size_t>(R * R));
  out.coronal.data.resize(static_cast<std::size_t>(R * R));
  out.sagittal.data.resize(static_cast<std::size_t>(R * R));
  for (std::int64_t v = 0; v < R; ++v)
    for (std::int64_t u = 0; u < R; ++u) {
      out.axial.data[static_cast<std::size_t>(u + R * v)] = static_cast<T>(g.at(u, v, m));
      out.coronal.data[static_cast<std::size_t>(u + R * v)] = static_cast<T>(g.at(u, m, v));
      out.sagittal.data[static_cast<std::size_t>(u + R * v)] = static_cast<T>(g.at(m, u, v));
    }
  return out;
}

template <typename T>
Tensor<double> upsample_impl(const Slice2D<T>& s) {
  const std::int64_t R = s.resolution;
  if (R < 1 || R > 128) throw ValidationError("slice upsampling supports resolutions 1..128");
  Tensor<double> out({3, 128, 128});
  for (std::int64_t y = 0; y < 128; ++y)
    for (std::int64_t x = 0; x < 128; ++x) {
      const std::int64_t sy = y * R / 128;
      const std::int64_t sx = x * R / 128;
      const double v = static_cast<double>(s.data[static_cast<std::size_t>(sx + R * sy)]);
      for (std::int64_t c = 0; c < 3; ++c) out[(c * 128 + y) * 128 + x] = v;
    }
  return out;
}

}  // namespace

MiddleSlices<Slice2D<std::uint8_t>> middle_slices(const VoxelGrid& g) {
  return slices_impl<std::uint8_t>(g);
}

MiddleSlices<Slice2D<float>> middle_slices(const SignedGrid& g) { return slices_impl<float>(g); }

Tensor<double> upsample_slice(const Slice2D<std::uint8_t>& s) { return upsample_impl(s); }
Tensor<double> upsample_slice(const Slice2D<float>& s) { return upsample_impl(s); }

std::vector<unsigned char> to_voxb_bytes(const VoxelGrid& g) {
  g.validate();
  if (g.resolution > 0xffffffffLL) throw ValidationError("resolution exceeds the VOXB field");
  const std::int64_t n = g.cells();
  std::vector<unsigned char> out(static_cast<std::size_t>(9 + (n + 7) / 8), 0);
  out[0] = 'V';
  out[1] = 'O';
  out[2] = 'X';
  out[3] = 'B';
  out[4] = 1;
  const auto r = static_cast<std::uint32_t>(g.resolution);
  out[5] = static_cast<unsigned char>(r & 0xff);
  out[6] = static_cast<unsigned char>((r >> 8) & 0xff);
  out[7] = static_cast<unsigned char>((r >> 16) & 0xff);
  out[8] = static_cast<unsigned char>((r >> 24) & 0xff);
  for (std::int64_t i = 0; i < n; ++i) {
    if (g.data[static_cast<std::size_t>(i)]) {
      out[static_cast<std::size_t>(9 + i / 8)] |= static_cast<unsigned char>(1u << (i % 8));
    }
  }
  return out;
}

VoxelGrid from_voxb_bytes(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "VOXB", 4) != 0) {
    throw ParseError("bad magic, expected VOXB", 0);
  }
  if (bytes.size() < 5) throw ParseError("truncated before version byte", 4);
  if (bytes[4] != 1) throw ParseError("unsupported VOXB version " + std::to_string(bytes[4]), 4);
  if (bytes.size() < 9) throw ParseError("truncated before resolution field", 5);
  const std::uint32_t r = static_cast<std::uint32_t>(bytes[5]) | (static_cast<std::uint32_t>(bytes[6]) << 8) |
                          (static_cast<std::uint32_t>(bytes[7]) << 16) |
                          (static_cast<std::uint32_t>(bytes[8]) << 24);
  if (r == 0) throw ParseError("resolution field is zero", 5);
  const std::int64_t n = static_cast<std::int64_t>(r) * r * r;
  const std::size_t need = static_cast<std::size_t>(9 + (n + 7) / 8);
  if (bytes.size() < need) throw ParseError("truncated occupancy payload", bytes.size());
  if (bytes.size() > need) throw ParseError("trailing bytes after occupancy payload", need);
  VoxelGrid g(static_cast<std::int64_t>(r));
  for (std::int64_t i = 0; i < n; ++i) {
    g.data[static_cast<std::size_t>(i)] =
        (bytes[static_cast<std::size_t>(9 + i / 8)] >> (i % 8)) & 1u;
  }
  return g;
}

void write_voxb(const VoxelGrid& g, const std::string& path) {
  const auto bytes = to_voxb_bytes(g);
  write_file_bytes(path, bytes.data(), bytes.size());
}

VoxelGrid read_voxb(const std::string& path) {
  VoxelGrid g = from_voxb_bytes(read_file_bytes(path));
  g.meta = path;
  return g;
}

void write_pgm(const Slice2D<std::uint8_t>& s, const std::string& path) {
  const std::int64_t R = s.resolution;
  std::string header = "P5\n" + std::to_string(R) + " " + std::to_string(R) + "\n255\n";
  std::vector<unsigned char> out(header.begin(), header.end());
  out.reserve(out.size() + s.data.size());
  for (std::uint8_t v : s.data) out.push_back(v ? 255 : 0);
  write_file_bytes(path, out.data(), out.size());
}

}  // namespace voxopt
