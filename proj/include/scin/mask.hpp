#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "scin/error.hpp"

namespace scin {

struct Extent3 {
  std::size_t d = 0, h = 0, w = 0;
  std::size_t voxels() const { return d * h * w; }
  bool operator==(const Extent3&) const = default;
};

struct Voxel {
  int z = 0, y = 0, x = 0;
  auto operator<=>(const Voxel&) const = default;
};

/// Binary 3D mask stored z-major, one byte per voxel (0 or 1).
struct Mask {
  Extent3 extent;
  std::vector<std::uint8_t> bits;

  Mask() = default;
  explicit Mask(Extent3 e) : extent(e), bits(e.voxels(), 0) {}
  Mask(Extent3 e, std::vector<std::uint8_t> b) : extent(e), bits(std::move(b)) {
    if (bits.size() != extent.voxels()) throw ShapeError("mask data does not match its extent");
  }

  std::size_t index(int z, int y, int x) const {
    return (static_cast<std::size_t>(z) * extent.h + static_cast<std::size_t>(y)) * extent.w +
           static_cast<std::size_t>(x);
  }
  bool inside(int z, int y, int x) const {
    return z >= 0 && y >= 0 && x >= 0 && z < static_cast<int>(extent.d) &&
           y < static_cast<int>(extent.h) && x < static_cast<int>(extent.w);
  }
  std::uint8_t at(int z, int y, int x) const { return bits[index(z, y, x)]; }
  std::uint8_t& at(int z, int y, int x) { return bits[index(z, y, x)]; }
  Voxel voxel(std::size_t i) const {
    const std::size_t x = i % extent.w, y = (i / extent.w) % extent.h, z = i / (extent.w * extent.h);
    return {static_cast<int>(z), static_cast<int>(y), static_cast<int>(x)};
  }
  std::size_t count() const {
    return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
  }
  bool operator==(const Mask&) const = default;
};

inline void require_binary(const Mask& m, const char* what) {
  for (auto b : m.bits) {
    if (b > 1) throw DomainError(std::string(what) + ": mask is not binary");
  }
}

inline void require_same_extent(const Mask& a, const Mask& b, const char* what) {
  if (!(a.extent == b.extent)) throw ShapeError(std::string(what) + ": mask extents differ");
}

/// Face (6) and edge (12) neighbour offsets; the 8 corners are excluded.
inline const std::array<Voxel, 18>& offsets18() {
  static const std::array<Voxel, 18> table = [] {
    std::array<Voxel, 18> t{};
    std::size_t n = 0;
    for (int dz = -1; dz <= 1; ++dz)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int nz = (dz != 0) + (dy != 0) + (dx != 0);
          if (nz == 1 || nz == 2) t[n++] = {dz, dy, dx};
        }
    return t;
  }();
  return table;
}

inline const std::array<Voxel, 6>& offsets6() {
  static const std::array<Voxel, 6> t{{{-1, 0, 0}, {1, 0, 0}, {0, -1, 0}, {0, 1, 0}, {0, 0, -1}, {0, 0, 1}}};
  return t;
}

struct LesionComponent {
  int id = 0;
  std::vector<Voxel> voxels;  // sorted lexicographically (z,y,x)
  std::size_t size() const { return voxels.size(); }
};

/// 18-connected component labelling. Components are ordered by their
/// lexicographically smallest voxel, which is the raster-scan seed order.
inline std::vector<LesionComponent> connected_components_18(const Mask& mask) {
  require_binary(mask, "connected_components_18");
  std::vector<LesionComponent> out;
  std::vector<std::uint8_t> seen(mask.bits.size(), 0);
  std::vector<std::size_t> stack;
  for (std::size_t i = 0; i < mask.bits.size(); ++i) {
    if (!mask.bits[i] || seen[i]) continue;
    LesionComponent comp;
    comp.id = static_cast<int>(out.size());
    seen[i] = 1;
    stack.push_back(i);
    while (!stack.empty()) {
      const std::size_t cur = stack.back();
      stack.pop_back();
      const Voxel v = mask.voxel(cur);
      comp.voxels.push_back(v);
      for (const auto& o : offsets18()) {
        const int z = v.z + o.z, y = v.y + o.y, x = v.x + o.x;
        if (!mask.inside(z, y, x)) continue;
        const std::size_t j = mask.index(z, y, x);
        if (mask.bits[j] && !seen[j]) {
          seen[j] = 1;
          stack.push_back(j);
        }
      }
    }
    std::sort(comp.voxels.begin(), comp.voxels.end());
    out.push_back(std::move(comp));
  }
  return out;
}

/// Per-voxel component label (-1 for background), matching component ids.
inline std::vector<int> label_map(const Mask& mask, const std::vector<LesionComponent>& comps) {
  std::vector<int> labels(mask.bits.size(), -1);
  for (const auto& c : comps)
    for (const auto& v : c.voxels) labels[mask.index(v.z, v.y, v.x)] = c.id;
  return labels;
}

/// Morphological dilation by a 6-connected structuring element, `radius` times.
inline Mask dilate6(const Mask& in, std::size_t radius) {
  Mask cur = in;
  for (std::size_t r = 0; r < radius; ++r) {
    Mask next = cur;
    for (std::size_t i = 0; i < cur.bits.size(); ++i) {
      if (!cur.bits[i]) continue;
      const Voxel v = cur.voxel(i);
      for (const auto& o : offsets6()) {
        if (cur.inside(v.z + o.z, v.y + o.y, v.x + o.x)) next.at(v.z + o.z, v.y + o.y, v.x + o.x) = 1;
      }
    }
    cur = std::move(next);
  }
  return cur;
}

/// Erosion dual to dilate6; voxels outside the volume count as background.
inline Mask erode6(const Mask& in, std::size_t radius) {
  Mask cur = in;
  for (std::size_t r = 0; r < radius; ++r) {
    Mask next = cur;
    for (std::size_t i = 0; i < cur.bits.size(); ++i) {
      if (!cur.bits[i]) continue;
      const Voxel v = cur.voxel(i);
      for (const auto& o : offsets6()) {
        const int z = v.z + o.z, y = v.y + o.y, x = v.x + o.x;
        if (!cur.inside(z, y, x) || !cur.at(z, y, x)) {
          next.bits[i] = 0;
          break;
        }
      }
    }
    cur = std::move(next);
  }
  return cur;
}

/// Deletes every 18-connected component with at most `max_size` voxels.
inline Mask remove_small_components(const Mask& in, std::size_t max_size) {
  Mask out = in;
  for (const auto& c : connected_components_18(in)) {
    if (c.size() <= max_size)
      for (const auto& v : c.voxels) out.at(v.z, v.y, v.x) = 0;
  }
  return out;
}

}  // namespace scin
