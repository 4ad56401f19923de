#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <vector>

#include "drascore/affine.hpp"
#include "drascore/common.hpp"

namespace drascore {

// 3D scalar field with isotropic spacing and a region-of-interest mask.
// Extents and coordinates use (z,y,x) order; data is row-major with x fastest.
struct Volume {
  std::array<std::int64_t, 3> extents{0, 0, 0};  // D,H,W
  double spacing{1.0};
  std::vector<float> intensities;
  std::vector<std::uint8_t> roi_mask;  // empty means no mask

  std::int64_t numel() const { return extents[0] * extents[1] * extents[2]; }

  std::int64_t index(std::int64_t z, std::int64_t y, std::int64_t x) const {
    return (z * extents[1] + y) * extents[2] + x;
  }

  bool in_bounds(std::int64_t z, std::int64_t y, std::int64_t x) const {
    return z >= 0 && z < extents[0] && y >= 0 && y < extents[1] && x >= 0 &&
           x < extents[2];
  }

  float at(std::int64_t z, std::int64_t y, std::int64_t x) const {
    return intensities[index(z, y, x)];
  }

  bool roi_at(std::int64_t z, std::int64_t y, std::int64_t x) const {
    return !roi_mask.empty() && roi_mask[index(z, y, x)] != 0;
  }

  std::int64_t roi_count() const {
    std::int64_t n = 0;
    for (auto v : roi_mask) n += v != 0;
    return n;
  }
};

inline Volume make_volume(std::array<std::int64_t, 3> extents, double spacing,
                          bool with_mask) {
  Volume v;
  v.extents = extents;
  v.spacing = spacing;
  v.intensities.assign(static_cast<std::size_t>(v.numel()), -1.0f);
  if (with_mask) v.roi_mask.assign(static_cast<std::size_t>(v.numel()), 0);
  return v;
}

// Trilinear sample at (z,y,x) voxel coordinates; out-of-field contributions
// read as `fill`.
inline double sample_trilinear(const Volume& v, const Vec3& p, double fill = -1.0) {
  const double z = p[0], y = p[1], x = p[2];
  const std::int64_t z0 = static_cast<std::int64_t>(std::floor(z));
  const std::int64_t y0 = static_cast<std::int64_t>(std::floor(y));
  const std::int64_t x0 = static_cast<std::int64_t>(std::floor(x));
  const double fz = z - z0, fy = y - y0, fx = x - x0;
  double acc = 0.0;
  for (int dz = 0; dz < 2; ++dz)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        const double w = (dz ? fz : 1.0 - fz) * (dy ? fy : 1.0 - fy) * (dx ? fx : 1.0 - fx);
        if (w == 0.0) continue;
        const std::int64_t zz = z0 + dz, yy = y0 + dy, xx = x0 + dx;
        const double val =
            v.in_bounds(zz, yy, xx) ? static_cast<double>(v.at(zz, yy, xx)) : fill;
        acc += w * val;
      }
  return acc;
}

// Trilinear sample of the roi mask as a 0/1 field; >= 0.5 counts as inside.
inline bool sample_mask(const Volume& v, const Vec3& p) {
  if (v.roi_mask.empty()) return false;
  const double z = p[0], y = p[1], x = p[2];
  const std::int64_t z0 = static_cast<std::int64_t>(std::floor(z));
  const std::int64_t y0 = static_cast<std::int64_t>(std::floor(y));
  const std::int64_t x0 = static_cast<std::int64_t>(std::floor(x));
  const double fz = z - z0, fy = y - y0, fx = x - x0;
  double acc = 0.0;
  for (int dz = 0; dz < 2; ++dz)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        const double w = (dz ? fz : 1.0 - fz) * (dy ? fy : 1.0 - fy) * (dx ? fx : 1.0 - fx);
        const std::int64_t zz = z0 + dz, yy = y0 + dy, xx = x0 + dx;
        if (v.in_bounds(zz, yy, xx) && v.roi_mask[v.index(zz, yy, xx)]) acc += w;
      }
  return acc >= 0.5;
}

// Box dilation of a mask by `radius` voxels (separable, Chebyshev ball).
inline std::vector<std::uint8_t> dilate_mask(const std::vector<std::uint8_t>& mask,
                                             const std::array<std::int64_t, 3>& ext,
                                             int radius) {
  std::vector<std::uint8_t> cur = mask, next(mask.size());
  const std::int64_t D = ext[0], H = ext[1], W = ext[2];
  for (int axis = 0; axis < 3; ++axis) {
    const std::int64_t stride = axis == 0 ? H * W : (axis == 1 ? W : 1);
    const std::int64_t len = axis == 0 ? D : (axis == 1 ? H : W);
    for (std::int64_t z = 0; z < D; ++z)
      for (std::int64_t y = 0; y < H; ++y)
        for (std::int64_t x = 0; x < W; ++x) {
          const std::int64_t idx = (z * H + y) * W + x;
          const std::int64_t pos = axis == 0 ? z : (axis == 1 ? y : x);
          std::uint8_t v = 0;
          for (int r = -radius; r <= radius && !v; ++r) {
            const std::int64_t q = pos + r;
            if (q >= 0 && q < len) v = cur[idx + (q - pos) * stride];
          }
          next[idx] = v;
        }
    std::swap(cur, next);
  }
  return cur;
}

// 6-connected component count over the nonzero voxels of a mask.
inline int count_components(const std::vector<std::uint8_t>& mask,
                            const std::array<std::int64_t, 3>& ext) {
  const std::int64_t D = ext[0], H = ext[1], W = ext[2];
  std::vector<std::uint8_t> seen(mask.size(), 0);
  int components = 0;
  for (std::int64_t start = 0; start < static_cast<std::int64_t>(mask.size()); ++start) {
    if (!mask[start] || seen[start]) continue;
    ++components;
    std::deque<std::int64_t> queue{start};
    seen[start] = 1;
    while (!queue.empty()) {
      const std::int64_t i = queue.front();
      queue.pop_front();
      const std::int64_t z = i / (H * W), y = (i / W) % H, x = i % W;
      const std::int64_t nbr[6][3] = {{z - 1, y, x}, {z + 1, y, x}, {z, y - 1, x},
                                      {z, y + 1, x}, {z, y, x - 1}, {z, y, x + 1}};
      for (const auto& n : nbr) {
        if (n[0] < 0 || n[0] >= D || n[1] < 0 || n[1] >= H || n[2] < 0 || n[2] >= W)
          continue;
        const std::int64_t j = (n[0] * H + n[1]) * W + n[2];
        if (mask[j] && !seen[j]) {
          seen[j] = 1;
          queue.push_back(j);
        }
      }
    }
  }
  return components;
}

// Downsample by 2x per axis (block average; mask by majority). Used by the
// registration pyramid.
inline Volume downsample2(const Volume& v) {
  Volume out;
  out.extents = {(v.extents[0] + 1) / 2, (v.extents[1] + 1) / 2, (v.extents[2] + 1) / 2};
  out.spacing = v.spacing * 2.0;
  out.intensities.assign(static_cast<std::size_t>(out.numel()), -1.0f);
  const bool has_mask = !v.roi_mask.empty();
  if (has_mask) out.roi_mask.assign(static_cast<std::size_t>(out.numel()), 0);
  for (std::int64_t z = 0; z < out.extents[0]; ++z)
    for (std::int64_t y = 0; y < out.extents[1]; ++y)
      for (std::int64_t x = 0; x < out.extents[2]; ++x) {
        double acc = 0.0;
        int cnt = 0, mcnt = 0;
        for (int dz = 0; dz < 2; ++dz)
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              const std::int64_t zz = 2 * z + dz, yy = 2 * y + dy, xx = 2 * x + dx;
              if (!v.in_bounds(zz, yy, xx)) continue;
              acc += v.at(zz, yy, xx);
              ++cnt;
              if (has_mask && v.roi_mask[v.index(zz, yy, xx)]) ++mcnt;
            }
        out.intensities[out.index(z, y, x)] = static_cast<float>(acc / cnt);
        if (has_mask) out.roi_mask[out.index(z, y, x)] = mcnt * 2 >= cnt;
      }
  return out;
}

}  // namespace drascore
