#include "voxopt/shapegen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace voxopt {

namespace {

constexpr double kThreadPitch = 0.08;

bool inside_hex(double dx, double dy, double r) {
  const double ax = std::abs(dx), ay = std::abs(dy);
  const double s3 = std::sqrt(3.0);
  return ay < s3 * r / 2.0 && s3 * ax + ay < s3 * r;
}

}  // namespace

VoxelGrid generate_screw(const ScrewSpec& spec, std::int64_t resolution) {
  spec.validate();
  if (resolution < 2) throw ValidationError("screw resolution must be >= 2");
  const std::int64_t R = resolution;
  const double total = spec.head_height + spec.shaft_length;
  const double z0 = (1.0 - total) / 2.0;
  const double head_z0 = z0 + spec.shaft_length;

  VoxelGrid g(R);
  for (std::int64_t k = 0; k < R; ++k) {
    const double cz = (static_cast<double>(k) + 0.5) / static_cast<double>(R);
    const bool in_shaft_band = cz >= z0 && cz < head_z0;
    const bool in_head_band = cz >= head_z0 && cz < z0 + total;
    if (!in_shaft_band && !in_head_band) continue;
    for (std::int64_t j = 0; j < R; ++j) {
      const double dy = (static_cast<double>(j) + 0.5) / static_cast<double>(R) - 0.5;
      for (std::int64_t i = 0; i < R; ++i) {
        const double dx = (static_cast<double>(i) + 0.5) / static_cast<double>(R) - 0.5;
        bool inside = false;
        if (in_shaft_band) {
          double r = spec.shaft_radius;
          if (spec.thread_depth > 0.0) {
            r += spec.thread_depth *
                 std::sin(2.0 * 3.14159265358979323846 * (cz - z0) / kThreadPitch);
            r = std::max(r, 0.0);
          }
          inside = dx * dx + dy * dy < r * r;
        } else {
          switch (spec.head_style) {
            case HeadStyle::hex:
              inside = inside_hex(dx, dy, spec.head_radius);
              break;
            case HeadStyle::round:
              inside = dx * dx + dy * dy < spec.head_radius * spec.head_radius;
              break;
            case HeadStyle::countersunk: {
              // frustum widening toward the top of the head
              const double f = (cz - head_z0) / spec.head_height;
              const double r = spec.shaft_radius + f * (spec.head_radius - spec.shaft_radius);
              inside = dx * dx + dy * dy < r * r;
              break;
            }
          }
        }
        if (inside) g.set(i, j, k, 1);
      }
    }
  }
  return g;
}

namespace {

// Largest 4-connected component in a 2D mask, by flood fill.
std::int64_t largest_component(std::vector<std::uint8_t>& mask, std::int64_t R) {
  std::int64_t best = 0;
  std::vector<std::int64_t> stack;
  for (std::int64_t start = 0; start < R * R; ++start) {
    if (!mask[static_cast<std::size_t>(start)]) continue;
    std::int64_t area = 0;
    stack.push_back(start);
    mask[static_cast<std::size_t>(start)] = 0;
    while (!stack.empty()) {
      const std::int64_t cur = stack.back();
      stack.pop_back();
      ++area;
      const std::int64_t u = cur % R, v = cur / R;
      const std::int64_t nbr[4][2] = {{u - 1, v}, {u + 1, v}, {u, v - 1}, {u, v + 1}};
      for (const auto& n : nbr) {
        if (n[0] < 0 || n[0] >= R || n[1] < 0 || n[1] >= R) continue;
        const std::int64_t idx = n[0] + R * n[1];
        if (mask[static_cast<std::size_t>(idx)]) {
          mask[static_cast<std::size_t>(idx)] = 0;
          stack.push_back(idx);
        }
      }
    }
    best = std::max(best, area);
  }
  return best;
}

}  // namespace

double grabability_score(const VoxelGrid& grid) {
  grid.validate();
  const std::int64_t R = grid.resolution;
  std::int64_t best = 0;

  // For each face direction, collect exposed faces level by level and take
  // the largest in-plane connected patch.
  const std::int64_t dirs[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0},
                                   {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(R * R));
  for (const auto& d : dirs) {
    const int axis = d[0] != 0 ? 0 : (d[1] != 0 ? 1 : 2);
    for (std::int64_t level = 0; level < R; ++level) {
      std::fill(mask.begin(), mask.end(), 0);
      bool any = false;
      for (std::int64_t v = 0; v < R; ++v) {
        for (std::int64_t u = 0; u < R; ++u) {
          // (u,v) are the in-plane coordinates for this axis
          std::int64_t x = 0, y = 0, z = 0;
          if (axis == 0) {
            x = level, y = u, z = v;
          } else if (axis == 1) {
            x = u, y = level, z = v;
          } else {
            x = u, y = v, z = level;
          }
          if (!grid.at(x, y, z)) continue;
          const std::int64_t nx = x + d[0], ny = y + d[1], nz = z + d[2];
          const bool out = nx < 0 || nx >= R || ny < 0 || ny >= R || nz < 0 || nz >= R;
          if (out || !grid.at(nx, ny, nz)) {
            mask[static_cast<std::size_t>(u + R * v)] = 1;
            any = true;
          }
        }
      }
      if (any) best = std::max(best, largest_component(mask, R));
    }
  }
  return static_cast<double>(best);
}

ScrewSpec random_screw_spec(Rng& rng) {
  ScrewSpec s;
  s.head_style = static_cast<HeadStyle>(rng.below(3));
  s.head_radius = rng.uniform(0.15, 0.42);
  s.head_height = rng.uniform(0.08, 0.30);
  s.shaft_radius = rng.uniform(0.04, 0.7 * s.head_radius);
  s.shaft_length = rng.uniform(0.20, std::min(0.89, 0.95 - s.head_height));
  s.thread_depth = rng.uniform() < 0.5 ? 0.0 : rng.uniform(0.0, 0.45 * s.shaft_radius);
  s.class_id = screw_class_id(s);
  return s;
}

int screw_class_id(const ScrewSpec& spec) {
  const int tercile = spec.shaft_length < 0.35 ? 0 : (spec.shaft_length < 0.55 ? 1 : 2);
  return static_cast<int>(spec.head_style) * 3 + tercile;
}

std::vector<PairSample> make_pair_dataset(std::int64_t count, std::uint64_t seed,
                                          std::int64_t resolution) {
  if (count < 1) throw ValidationError("pair count must be >= 1");
  std::vector<PairSample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (std::int64_t i = 0; i < count; ++i) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
    VoxelGrid a, b;
    double sa = 0.0, sb = 0.0;
    do {
      a = generate_screw(random_screw_spec(rng), resolution);
      b = generate_screw(random_screw_spec(rng), resolution);
      sa = grabability_score(a);
      sb = grabability_score(b);
    } while (std::abs(sa - sb) < 1.0);
    PairSample p;
    const bool a_wins = sa > sb;
    const bool want_first_wins = (i % 2 == 0);
    if (a_wins == want_first_wins) {
      p.first = std::move(a);
      p.second = std::move(b);
    } else {
      p.first = std::move(b);
      p.second = std::move(a);
    }
    p.label = want_first_wins ? 1 : 0;
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<LabeledGrid> make_screw_dataset(std::int64_t count, std::uint64_t seed,
                                            std::int64_t resolution) {
  if (count < 1) throw ValidationError("screw count must be >= 1");
  std::vector<LabeledGrid> out;
  out.reserve(static_cast<std::size_t>(count));
  for (std::int64_t i = 0; i < count; ++i) {
    Rng rng(derive_seed(seed ^ 0x5c5c5c5c5c5c5c5cull, static_cast<std::uint64_t>(i)));
    const ScrewSpec spec = random_screw_spec(rng);
    out.push_back({generate_screw(spec, resolution), spec.class_id});
  }
  return out;
}

void write_pair_manifest(const std::vector<PairPaths>& entries, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open for writing: " + path);
  for (const auto& e : entries) f << e.first << " " << e.second << " " << e.label << "\n";
  if (!f) throw IoError("write failed: " + path);
}

std::vector<PairPaths> read_pair_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open for reading: " + path);
  std::vector<PairPaths> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    PairPaths e;
    if (!(ss >> e.first >> e.second >> e.label) || (e.label != 0 && e.label != 1)) {
      throw ParseError("bad pair manifest record at line " + std::to_string(lineno));
    }
    out.push_back(std::move(e));
  }
  return out;
}

void write_grid_manifest(const std::vector<GridPath>& entries, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open for writing: " + path);
  for (const auto& e : entries) f << e.path << " " << e.class_id << "\n";
  if (!f) throw IoError("write failed: " + path);
}

std::vector<GridPath> read_grid_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open for reading: " + path);
  std::vector<GridPath> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    GridPath e;
    if (!(ss >> e.path >> e.class_id) || e.class_id < 0) {
      throw ParseError("bad grid manifest record at line " + std::to_string(lineno));
    }
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace voxopt
