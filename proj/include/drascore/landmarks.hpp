#pragma once

#include <algorithm>
#include <fstream>
#include <string>
#include <vector>

#include "drascore/affine.hpp"
#include "drascore/common.hpp"
#include "drascore/volume.hpp"

#include <json.hpp>

namespace drascore {

// Evenly spaced atlas landmarks: grid centers whose d^3 patch fits inside the
// extents and whose center voxel lies in the roi. Stride < patch_size gives
// overlapping patches.
struct LandmarkGrid {
  std::int64_t patch_size{16};
  std::int64_t stride{8};
  int neighbor_count{2};
  std::array<std::int64_t, 3> atlas_extents{};
  std::vector<Vec3> landmarks;                // atlas voxel coords (z,y,x)
  std::vector<Vec3> normalized;               // rescaled to [-1,1]^3
  std::vector<std::vector<int>> neighbors;    // indices of the l nearest

  int count() const { return static_cast<int>(landmarks.size()); }
};

inline std::vector<std::int64_t> grid_axis_centers(std::int64_t extent, std::int64_t d,
                                                   std::int64_t s) {
  std::vector<std::int64_t> centers;
  for (std::int64_t c = d / 2; c <= extent - d + d / 2; c += s) centers.push_back(c);
  return centers;
}

inline Vec3 normalize_coord(const std::array<std::int64_t, 3>& ext, const Vec3& p) {
  Vec3 out;
  for (int i = 0; i < 3; ++i)
    out[i] = 2.0 * p[i] / static_cast<double>(ext[i] - 1) - 1.0;
  return out;
}

inline LandmarkGrid build_landmark_grid(const Volume& atlas, std::int64_t d,
                                        std::int64_t s, int neighbor_count) {
  const auto min_extent =
      std::min({atlas.extents[0], atlas.extents[1], atlas.extents[2]});
  require(d >= 1 && d <= min_extent, "landmark grid: patch size ", d,
          " exceeds minimum extent ", min_extent);
  require(s >= 1 && s <= d, "landmark grid: stride ", s, " must be in [1, ", d, "]");
  require(neighbor_count >= 0, "landmark grid: negative neighbor count");

  LandmarkGrid g;
  g.patch_size = d;
  g.stride = s;
  g.neighbor_count = neighbor_count;
  g.atlas_extents = atlas.extents;
  const auto zs = grid_axis_centers(atlas.extents[0], d, s);
  const auto ys = grid_axis_centers(atlas.extents[1], d, s);
  const auto xs = grid_axis_centers(atlas.extents[2], d, s);
  for (auto z : zs)
    for (auto y : ys)
      for (auto x : xs) {
        if (!atlas.roi_mask.empty() && !atlas.roi_at(z, y, x)) continue;
        const Vec3 p{static_cast<double>(z), static_cast<double>(y),
                     static_cast<double>(x)};
        g.landmarks.push_back(p);
        g.normalized.push_back(normalize_coord(atlas.extents, p));
      }
  require(!g.landmarks.empty(),
          "landmark grid: no valid landmarks (roi too small for patch size ", d, ")");
  require(neighbor_count < g.count(), "landmark grid: neighbor count ", neighbor_count,
          " needs more than ", g.count(), " landmarks");

  g.neighbors.resize(g.landmarks.size());
  for (int j = 0; j < g.count(); ++j) {
    std::vector<std::pair<double, int>> by_dist;
    for (int i = 0; i < g.count(); ++i) {
      if (i == j) continue;
      const Vec3 dvec = g.landmarks[i] - g.landmarks[j];
      by_dist.push_back({dvec[0] * dvec[0] + dvec[1] * dvec[1] + dvec[2] * dvec[2], i});
    }
    std::sort(by_dist.begin(), by_dist.end());  // ties break by ascending index
    for (int k = 0; k < neighbor_count; ++k) g.neighbors[j].push_back(by_dist[k].second);
  }
  return g;
}

// p_subject = phi^{-1}(p_atlas)
inline Vec3 map_landmark(const AffineTransform& t, const Vec3& p_atlas) {
  return t.apply_inverse(p_atlas);
}

// d^3 trilinear patch centered on `center` (subject voxel coords, non-integer
// allowed). Samples the lattice center + k - d/2; out-of-field samples read
// -1 and are tallied into oof_fraction for QA.
template <typename T>
std::vector<T> extract_patch(const Volume& v, const Vec3& center, std::int64_t d,
                             double* oof_fraction = nullptr) {
  std::vector<T> out(static_cast<std::size_t>(d * d * d));
  std::int64_t oof = 0;
  std::size_t i = 0;
  for (std::int64_t kz = 0; kz < d; ++kz)
    for (std::int64_t ky = 0; ky < d; ++ky)
      for (std::int64_t kx = 0; kx < d; ++kx, ++i) {
        const Vec3 p{center[0] + static_cast<double>(kz - d / 2),
                     center[1] + static_cast<double>(ky - d / 2),
                     center[2] + static_cast<double>(kx - d / 2)};
        if (p[0] < 0 || p[0] > v.extents[0] - 1 || p[1] < 0 || p[1] > v.extents[1] - 1 ||
            p[2] < 0 || p[2] > v.extents[2] - 1)
          ++oof;
        out[i] = static_cast<T>(sample_trilinear(v, p));
      }
  if (oof_fraction)
    *oof_fraction = static_cast<double>(oof) / static_cast<double>(d * d * d);
  return out;
}

inline void save_grid(const LandmarkGrid& g, const std::string& path) {
  nlohmann::json j{{"patch_size", g.patch_size},
                   {"stride", g.stride},
                   {"neighbor_count", g.neighbor_count},
                   {"atlas_extents", g.atlas_extents},
                   {"landmarks", g.landmarks},
                   {"neighbors", g.neighbors}};
  std::ofstream out(path);
  out << j.dump(1) << "\n";
  require(out.good(), "save_grid: failed to write ", path);
}

inline LandmarkGrid load_grid(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "load_grid: cannot open ", path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    fail("load_grid: invalid JSON in ", path, ": ", e.what());
  }
  LandmarkGrid g;
  g.patch_size = j.at("patch_size").get<std::int64_t>();
  g.stride = j.at("stride").get<std::int64_t>();
  g.neighbor_count = j.at("neighbor_count").get<int>();
  for (int i = 0; i < 3; ++i)
    g.atlas_extents[i] = j.at("atlas_extents")[i].get<std::int64_t>();
  for (const auto& jp : j.at("landmarks")) {
    Vec3 p{jp[0].get<double>(), jp[1].get<double>(), jp[2].get<double>()};
    g.landmarks.push_back(p);
    g.normalized.push_back(normalize_coord(g.atlas_extents, p));
  }
  for (const auto& jn : j.at("neighbors")) {
    std::vector<int> n;
    for (const auto& v : jn) n.push_back(v.get<int>());
    g.neighbors.push_back(std::move(n));
  }
  require(g.neighbors.size() == g.landmarks.size(), "load_grid: neighbor table size ",
          g.neighbors.size(), " does not match ", g.landmarks.size(), " landmarks");
  return g;
}

}  // namespace drascore
