#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "drascore/affine.hpp"
#include "drascore/common.hpp"
#include "drascore/parallel.hpp"
#include "drascore/pvol.hpp"
#include "drascore/rng.hpp"
#include "drascore/volume.hpp"

#include <json.hpp>

namespace drascore {

// Grade is the bin of total lesion voxel fraction with these left edges
// (5 ordinal levels, 0-4).
inline constexpr double kGradeBinEdges[5] = {0.0, 0.01, 0.03, 0.06, 0.10};
inline constexpr double kCapacityNoiseSigma = 0.02;

inline int grade_from_fraction(double f) {
  int g = 0;
  for (int i = 1; i < 5; ++i)
    if (f >= kGradeBinEdges[i]) g = i;
  return g;
}

struct DiseaseConfig {
  int max_lesions_a{9};
  int max_lesions_b{9};
  double radius_min{3.0};
  double radius_max{5.5};
  double rotation_deg{12.0};        // <= 15 per generation contract
  double scale_min{0.9};
  double scale_max{1.1};
  double translation_voxels{3.0};
  double texture_jitter{0.05};
  double intensity_offset{0.1};     // per-subject global shift inside the roi
};

struct Lesion {
  char subtype;  // 'a' core, 'b' rim
  Vec3 center;   // subject voxel coordinates (z,y,x)
  double radius;
};

struct SubjectLabels {
  double capacity{1.0};
  int grade{0};
  double burden_a{0.0};
  double burden_b{0.0};
};

struct SubjectRecord {
  Volume volume;
  AffineTransform true_transform;  // subject -> atlas
  std::vector<std::uint8_t> lesion_mask_a;
  std::vector<std::uint8_t> lesion_mask_b;
  SubjectLabels labels;
  std::vector<Lesion> lesions;
  std::uint64_t seed{0};
};

// --------------------------------------------------------------------------
// atlas geometry
// --------------------------------------------------------------------------

inline Vec3 volume_center(const std::array<std::int64_t, 3>& ext) {
  return {0.5 * static_cast<double>(ext[0] - 1), 0.5 * static_cast<double>(ext[1] - 1),
          0.5 * static_cast<double>(ext[2] - 1)};
}

inline Vec3 atlas_semi_axes(const std::array<std::int64_t, 3>& ext) {
  return {0.45 * static_cast<double>(ext[0]), 0.42 * static_cast<double>(ext[1]),
          0.44 * static_cast<double>(ext[2])};
}

// Normalized ellipsoid radius of an atlas-space point: 0 at the roi center,
// 1 on the roi boundary. 1 - rho is the normalized depth from the boundary.
inline double atlas_normalized_radius(const std::array<std::int64_t, 3>& ext,
                                      const Vec3& p) {
  const Vec3 c = volume_center(ext);
  const Vec3 a = atlas_semi_axes(ext);
  const double dz = (p[0] - c[0]) / a[0];
  const double dy = (p[1] - c[1]) / a[1];
  const double dx = (p[2] - c[2]) / a[2];
  return std::sqrt(dz * dz + dy * dy + dx * dx);
}

// Smooth band-limited texture: a fixed sum of random low-frequency cosines.
class BandNoise {
 public:
  BandNoise(Rng& rng, int components, double amplitude, double wl_min, double wl_max) {
    const double per = amplitude * std::sqrt(2.0 / components);
    for (int m = 0; m < components; ++m) {
      Component c;
      const double wl = rng.uniform(wl_min, wl_max);
      Vec3 dir{rng.normal(), rng.normal(), rng.normal()};
      const double n = std::max(norm(dir), 1e-9);
      c.freq = {dir[0] / n * 2.0 * M_PI / wl, dir[1] / n * 2.0 * M_PI / wl,
                dir[2] / n * 2.0 * M_PI / wl};
      c.phase = rng.uniform(0.0, 2.0 * M_PI);
      c.amp = per;
      comps_.push_back(c);
    }
  }

  double operator()(const Vec3& p) const {
    double s = 0.0;
    for (const auto& c : comps_)
      s += c.amp * std::cos(c.freq[0] * p[0] + c.freq[1] * p[1] + c.freq[2] * p[2] +
                            c.phase);
    return s;
  }

 private:
  struct Component {
    Vec3 freq;
    double phase;
    double amp;
  };
  std::vector<Component> comps_;
};

// --------------------------------------------------------------------------
// generation
// --------------------------------------------------------------------------

inline Volume generate_atlas(const std::array<std::int64_t, 3>& extents, double spacing,
                             std::uint64_t seed) {
  for (int i = 0; i < 3; ++i)
    require(extents[i] >= 16, "generate_atlas: extent axis ", i, " is ", extents[i],
            ", minimum 16");
  Rng rng(mix_seed(seed, 0xA71A5ull));
  BandNoise tex(rng, 12, 0.12, 10.0, 28.0);
  Volume v = make_volume(extents, spacing, true);
  for (std::int64_t z = 0; z < extents[0]; ++z)
    for (std::int64_t y = 0; y < extents[1]; ++y)
      for (std::int64_t x = 0; x < extents[2]; ++x) {
        const Vec3 p{static_cast<double>(z), static_cast<double>(y),
                     static_cast<double>(x)};
        const double rho = atlas_normalized_radius(extents, p);
        const std::int64_t i = v.index(z, y, x);
        if (rho <= 1.0) {
          v.roi_mask[i] = 1;
          const double base = -0.3 + 0.1 * (1.0 - rho * rho);
          v.intensities[i] =
              static_cast<float>(std::clamp(base + tex(p), -0.75, 0.05));
        }
      }
  return v;
}

namespace detail {

inline Mat3 rotation_zyx(double az, double ay, double ax) {
  // Rotations in the three coordinate planes of (z,y,x) space, composed
  // in a fixed order.
  const double cz = std::cos(az), sz = std::sin(az);
  const double cy = std::cos(ay), sy = std::sin(ay);
  const double cx = std::cos(ax), sx = std::sin(ax);
  const Mat3 r0{1, 0, 0, 0, cz, -sz, 0, sz, cz};      // rotate (y,x) plane
  const Mat3 r1{cy, 0, sy, 0, 1, 0, -sy, 0, cy};      // rotate (z,x) plane
  const Mat3 r2{cx, -sx, 0, sx, cx, 0, 0, 0, 1};      // rotate (z,y) plane
  return mat_mul(r0, mat_mul(r1, r2));
}

struct LesionShape {
  Vec3 center;
  double radius;
  bool oblate;   // rim lesions are flattened along the outward direction
  Vec3 axis;     // unit outward direction when oblate

  double normalized_dist(const Vec3& p) const {
    const Vec3 d = p - center;
    if (!oblate) return norm(d) / radius;
    const double along = d[0] * axis[0] + d[1] * axis[1] + d[2] * axis[2];
    const double perp2 = std::max(0.0, d[0] * d[0] + d[1] * d[1] + d[2] * d[2] -
                                           along * along);
    const double ra = 0.55 * radius, rp = 1.15 * radius;
    return std::sqrt((along * along) / (ra * ra) + perp2 / (rp * rp));
  }
};

inline void carve_lesion(Volume& vol, std::vector<std::uint8_t>& mask,
                         const LesionShape& sh) {
  const double reach = sh.radius * (sh.oblate ? 1.15 : 1.0) + 1.0;
  const std::int64_t zlo = std::max<std::int64_t>(0, static_cast<std::int64_t>(
                                                         std::floor(sh.center[0] - reach)));
  const std::int64_t zhi = std::min(vol.extents[0] - 1, static_cast<std::int64_t>(
                                                            std::ceil(sh.center[0] + reach)));
  const std::int64_t ylo = std::max<std::int64_t>(0, static_cast<std::int64_t>(
                                                         std::floor(sh.center[1] - reach)));
  const std::int64_t yhi = std::min(vol.extents[1] - 1, static_cast<std::int64_t>(
                                                            std::ceil(sh.center[1] + reach)));
  const std::int64_t xlo = std::max<std::int64_t>(0, static_cast<std::int64_t>(
                                                         std::floor(sh.center[2] - reach)));
  const std::int64_t xhi = std::min(vol.extents[2] - 1, static_cast<std::int64_t>(
                                                            std::ceil(sh.center[2] + reach)));
  for (std::int64_t z = zlo; z <= zhi; ++z)
    for (std::int64_t y = ylo; y <= yhi; ++y)
      for (std::int64_t x = xlo; x <= xhi; ++x) {
        const std::int64_t i = vol.index(z, y, x);
        if (!vol.roi_mask[i]) continue;
        const Vec3 p{static_cast<double>(z), static_cast<double>(y),
                     static_cast<double>(x)};
        const double d = sh.normalized_dist(p);
        if (d > 1.0) continue;
        mask[i] = 1;
        const double w = 0.95 * (1.0 - d * d * d * d * d * d);
        const double cur = vol.intensities[i];
        vol.intensities[i] = static_cast<float>(cur + w * (-0.9 - cur));
      }
}

// Fraction of the lesion's support that falls inside the roi.
inline double inside_fraction(const Volume& vol, const LesionShape& sh) {
  const double reach = sh.radius * (sh.oblate ? 1.15 : 1.0) + 1.0;
  std::int64_t total = 0, inside = 0;
  for (std::int64_t z = static_cast<std::int64_t>(std::floor(sh.center[0] - reach));
       z <= static_cast<std::int64_t>(std::ceil(sh.center[0] + reach)); ++z)
    for (std::int64_t y = static_cast<std::int64_t>(std::floor(sh.center[1] - reach));
         y <= static_cast<std::int64_t>(std::ceil(sh.center[1] + reach)); ++y)
      for (std::int64_t x = static_cast<std::int64_t>(std::floor(sh.center[2] - reach));
           x <= static_cast<std::int64_t>(std::ceil(sh.center[2] + reach)); ++x) {
        const Vec3 p{static_cast<double>(z), static_cast<double>(y),
                     static_cast<double>(x)};
        if (sh.normalized_dist(p) > 1.0) continue;
        ++total;
        if (vol.in_bounds(z, y, x) && vol.roi_mask[vol.index(z, y, x)]) ++inside;
      }
  return total == 0 ? 0.0 : static_cast<double>(inside) / static_cast<double>(total);
}

}  // namespace detail

inline SubjectRecord generate_subject(const Volume& atlas, std::uint64_t subject_seed,
                                      const DiseaseConfig& disease) {
  SubjectRecord rec;
  rec.seed = subject_seed;
  Rng t_rng(mix_seed(subject_seed, 0x7F01ull));
  Rng j_rng(mix_seed(subject_seed, 0x7F02ull));
  Rng l_rng(mix_seed(subject_seed, 0x7F03ull));
  Rng n_rng(mix_seed(subject_seed, 0x7F04ull));

  // ground-truth subject->atlas map: rotation/scale about the volume center
  // plus a small translation
  const double rot = disease.rotation_deg * M_PI / 180.0;
  const Mat3 r = detail::rotation_zyx(t_rng.uniform(-rot, rot), t_rng.uniform(-rot, rot),
                                      t_rng.uniform(-rot, rot));
  Mat3 lin = r;
  for (int axis = 0; axis < 3; ++axis) {
    const double s = t_rng.uniform(disease.scale_min, disease.scale_max);
    for (int row = 0; row < 3; ++row) lin[row * 3 + axis] *= s;
  }
  Vec3 t{t_rng.uniform(-disease.translation_voxels, disease.translation_voxels),
         t_rng.uniform(-disease.translation_voxels, disease.translation_voxels),
         t_rng.uniform(-disease.translation_voxels, disease.translation_voxels)};
  const Vec3 c = volume_center(atlas.extents);
  rec.true_transform = AffineTransform(lin, c + t - mat_apply(lin, c));

  // pull the subject image back through the transform
  Volume& vol = rec.volume;
  vol = make_volume(atlas.extents, atlas.spacing, true);
  for (std::int64_t z = 0; z < vol.extents[0]; ++z)
    for (std::int64_t y = 0; y < vol.extents[1]; ++y)
      for (std::int64_t x = 0; x < vol.extents[2]; ++x) {
        const Vec3 p{static_cast<double>(z), static_cast<double>(y),
                     static_cast<double>(x)};
        const Vec3 a = rec.true_transform.apply(p);
        const std::int64_t i = vol.index(z, y, x);
        if (sample_mask(atlas, a)) {
          vol.roi_mask[i] = 1;
          vol.intensities[i] = static_cast<float>(sample_trilinear(atlas, a));
        }
      }

  // subject-specific texture jitter and global intensity offset
  const double offset =
      j_rng.uniform(-disease.intensity_offset, disease.intensity_offset);
  BandNoise jitter(j_rng, 8, disease.texture_jitter, 8.0, 20.0);
  for (std::int64_t z = 0; z < vol.extents[0]; ++z)
    for (std::int64_t y = 0; y < vol.extents[1]; ++y)
      for (std::int64_t x = 0; x < vol.extents[2]; ++x) {
        const std::int64_t i = vol.index(z, y, x);
        if (!vol.roi_mask[i]) continue;
        const Vec3 p{static_cast<double>(z), static_cast<double>(y),
                     static_cast<double>(x)};
        vol.intensities[i] = static_cast<float>(std::clamp(
            static_cast<double>(vol.intensities[i]) + offset + jitter(p), -1.0, 1.0));
      }

  // roi voxel list for lesion center sampling
  std::vector<std::int64_t> roi_voxels;
  for (std::int64_t i = 0; i < vol.numel(); ++i)
    if (vol.roi_mask[i]) roi_voxels.push_back(i);
  require(!roi_voxels.empty(), "generate_subject: empty roi after resampling");

  rec.lesion_mask_a.assign(static_cast<std::size_t>(vol.numel()), 0);
  rec.lesion_mask_b.assign(static_cast<std::size_t>(vol.numel()), 0);

  const double severity = l_rng.uniform();
  auto subtype_count = [&](int max_count) {
    const double u = std::clamp(severity * (0.7 + 0.6 * l_rng.uniform()), 0.0, 1.0);
    return static_cast<int>(std::lround(std::pow(u, 1.3) * max_count));
  };
  const int count_a = subtype_count(disease.max_lesions_a);
  const int count_b = subtype_count(disease.max_lesions_b);

  const Vec3 roi_center_subj = rec.true_transform.apply_inverse(c);
  auto place = [&](char subtype, std::vector<std::uint8_t>& mask) {
    detail::LesionShape sh;
    sh.oblate = subtype == 'b';
    for (int attempt = 0; attempt < 200; ++attempt) {
      const std::int64_t vi =
          roi_voxels[l_rng.uniform_index(roi_voxels.size())];
      const std::int64_t z = vi / (vol.extents[1] * vol.extents[2]);
      const std::int64_t y = (vi / vol.extents[2]) % vol.extents[1];
      const std::int64_t x = vi % vol.extents[2];
      sh.center = {z + l_rng.uniform(-0.5, 0.5), y + l_rng.uniform(-0.5, 0.5),
                   x + l_rng.uniform(-0.5, 0.5)};
      sh.radius = l_rng.uniform(disease.radius_min, disease.radius_max);
      if (sh.oblate) {
        Vec3 out = sh.center - roi_center_subj;
        const double n = norm(out);
        if (n < 1e-6) continue;
        sh.axis = (1.0 / n) * out;
      }
      const double rho =
          atlas_normalized_radius(atlas.extents, rec.true_transform.apply(sh.center));
      const bool zone_ok =
          subtype == 'a' ? rho < 0.5 : (rho > 0.72 && rho < 0.97);
      if (!zone_ok) continue;
      if (detail::inside_fraction(vol, sh) < (subtype == 'a' ? 0.95 : 0.6)) continue;
      detail::carve_lesion(vol, mask, sh);
      rec.lesions.push_back({subtype, sh.center, sh.radius});
      return;
    }
    fail("generate_subject: could not place subtype-", subtype,
         " lesion inside the roi zone after 200 retries");
  };
  for (int i = 0; i < count_a; ++i) place('a', rec.lesion_mask_a);
  for (int i = 0; i < count_b; ++i) place('b', rec.lesion_mask_b);

  // labels from the planted masks
  std::int64_t roi_n = 0, na = 0, nb = 0, nu = 0;
  for (std::int64_t i = 0; i < vol.numel(); ++i) {
    if (vol.roi_mask[i]) ++roi_n;
    if (rec.lesion_mask_a[i]) ++na;
    if (rec.lesion_mask_b[i]) ++nb;
    if (rec.lesion_mask_a[i] || rec.lesion_mask_b[i]) ++nu;
  }
  const double f = static_cast<double>(nu) / static_cast<double>(roi_n);
  rec.labels.burden_a = static_cast<double>(na) / static_cast<double>(roi_n);
  rec.labels.burden_b = static_cast<double>(nb) / static_cast<double>(roi_n);
  rec.labels.grade = grade_from_fraction(f);
  const double capacity_true = std::clamp(1.0 - 3.0 * f, 0.05, 1.0);
  rec.labels.capacity =
      std::clamp(capacity_true + n_rng.normal(0.0, kCapacityNoiseSigma), 0.0, 1.0);
  return rec;
}

// --------------------------------------------------------------------------
// cohort on disk
// --------------------------------------------------------------------------

struct PhantomConfig {
  std::array<std::int64_t, 3> extents{48, 48, 48};
  double spacing{1.0};
  std::uint64_t seed{1};
  int num_subjects{64};
  DiseaseConfig disease;
};

struct ManifestSubject {
  int id{0};
  std::string file;
  std::string mask_a_file;
  std::string mask_b_file;
  std::uint64_t seed{0};
  SubjectLabels labels;
  AffineTransform true_transform;
  std::vector<Lesion> lesions;
};

struct Manifest {
  std::string dir;
  std::string atlas_file;
  std::uint64_t seed{0};
  std::array<std::int64_t, 3> extents{};
  double spacing{1.0};
  std::vector<ManifestSubject> subjects;

  std::string atlas_path() const {
    return (std::filesystem::path(dir) / atlas_file).string();
  }
  std::string subject_path(int i) const {
    return (std::filesystem::path(dir) / subjects[i].file).string();
  }
};

inline std::string subject_file_name(int id, const char* suffix = "") {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "subj_%03d%s.pvol", id, suffix);
  return buf;
}

inline Volume mask_as_volume(const std::vector<std::uint8_t>& mask, const Volume& like) {
  Volume m = make_volume(like.extents, like.spacing, true);
  for (std::int64_t i = 0; i < m.numel(); ++i) {
    m.roi_mask[i] = mask[i];
    m.intensities[i] = mask[i] ? 1.0f : 0.0f;
  }
  return m;
}

inline std::string write_cohort(const std::string& dir, const PhantomConfig& cfg) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const Volume atlas = generate_atlas(cfg.extents, cfg.spacing, cfg.seed);
  write_volume(atlas, (fs::path(dir) / "atlas.pvol").string());

  std::vector<SubjectRecord> records(static_cast<std::size_t>(cfg.num_subjects));
  parallel_for(cfg.num_subjects, [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t i = lo; i < hi; ++i) {
      const std::uint64_t seed = mix_seed(cfg.seed, 0x5ull, static_cast<std::uint64_t>(i));
      records[i] = generate_subject(atlas, seed, cfg.disease);
      write_volume(records[i].volume,
                   (fs::path(dir) / subject_file_name(static_cast<int>(i))).string());
      write_volume(mask_as_volume(records[i].lesion_mask_a, records[i].volume),
                   (fs::path(dir) / subject_file_name(static_cast<int>(i), "_mask_a")).string());
      write_volume(mask_as_volume(records[i].lesion_mask_b, records[i].volume),
                   (fs::path(dir) / subject_file_name(static_cast<int>(i), "_mask_b")).string());
    }
  });

  nlohmann::json subjects = nlohmann::json::array();
  for (int i = 0; i < cfg.num_subjects; ++i) {
    const auto& r = records[static_cast<std::size_t>(i)];
    nlohmann::json lesions = nlohmann::json::array();
    for (const auto& l : r.lesions)
      lesions.push_back({{"subtype", std::string(1, l.subtype)},
                         {"center", l.center},
                         {"radius", l.radius}});
    subjects.push_back({{"id", i},
                        {"file", subject_file_name(i)},
                        {"mask_a_file", subject_file_name(i, "_mask_a")},
                        {"mask_b_file", subject_file_name(i, "_mask_b")},
                        {"seed", r.seed},
                        {"labels",
                         {{"capacity", r.labels.capacity},
                          {"grade", r.labels.grade},
                          {"burden_a", r.labels.burden_a},
                          {"burden_b", r.labels.burden_b}}},
                        {"true_transform", r.true_transform.to_json("planted")},
                        {"lesions", lesions}});
  }
  nlohmann::json manifest{{"format", "drascore-cohort-1"},
                          {"atlas", {{"file", "atlas.pvol"},
                                     {"seed", cfg.seed},
                                     {"extents", cfg.extents},
                                     {"spacing", cfg.spacing}}},
                          {"subjects", subjects}};
  const std::string path = (fs::path(dir) / "manifest.json").string();
  std::ofstream out(path);
  out << manifest.dump(1) << "\n";
  require(out.good(), "write_cohort: failed to write ", path);
  return path;
}

inline Manifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "load_manifest: cannot open ", path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    fail("load_manifest: invalid JSON in ", path, ": ", e.what());
  }
  require(j.value("format", "") == "drascore-cohort-1",
          "load_manifest: unrecognized format in ", path);
  Manifest m;
  m.dir = std::filesystem::path(path).parent_path().string();
  const auto& ja = j.at("atlas");
  m.atlas_file = ja.at("file").get<std::string>();
  m.seed = ja.at("seed").get<std::uint64_t>();
  for (int i = 0; i < 3; ++i) m.extents[i] = ja.at("extents")[i].get<std::int64_t>();
  m.spacing = ja.at("spacing").get<double>();
  for (const auto& js : j.at("subjects")) {
    ManifestSubject s;
    s.id = js.at("id").get<int>();
    s.file = js.at("file").get<std::string>();
    s.mask_a_file = js.at("mask_a_file").get<std::string>();
    s.mask_b_file = js.at("mask_b_file").get<std::string>();
    s.seed = js.at("seed").get<std::uint64_t>();
    const auto& jl = js.at("labels");
    s.labels.capacity = jl.at("capacity").get<double>();
    s.labels.grade = jl.at("grade").get<int>();
    s.labels.burden_a = jl.at("burden_a").get<double>();
    s.labels.burden_b = jl.at("burden_b").get<double>();
    s.true_transform = AffineTransform::from_json(js.at("true_transform"));
    for (const auto& jles : js.at("lesions")) {
      Lesion l;
      l.subtype = jles.at("subtype").get<std::string>()[0];
      for (int i = 0; i < 3; ++i) l.center[i] = jles.at("center")[i].get<double>();
      l.radius = jles.at("radius").get<double>();
      s.lesions.push_back(l);
    }
    m.subjects.push_back(std::move(s));
  }
  return m;
}

}  // namespace drascore
