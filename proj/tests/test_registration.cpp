#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "drascore/landmarks.hpp"
#include "drascore/phantom.hpp"
#include "drascore/registration.hpp"

using namespace drascore;

namespace {

const Volume& test_atlas() {
  static Volume atlas = generate_atlas({48, 48, 48}, 1.0, 42);
  return atlas;
}

Volume full_roi_volume(std::array<std::int64_t, 3> ext) {
  Volume v = make_volume(ext, 1.0, true);
  std::fill(v.roi_mask.begin(), v.roi_mask.end(), 1);
  return v;
}

// marginal entropy over the same masked histogram the MI uses
double masked_entropy(const Volume& v, int bins) {
  const auto d = dilate_mask(v.roi_mask, v.extents, 2);
  std::vector<double> hist(bins, 0.0);
  double total = 0.0;
  for (std::int64_t i = 0; i < v.numel(); ++i) {
    if (!d[i]) continue;
    hist[detail::intensity_bin(v.intensities[i], bins)] += 1.0;
    total += 1.0;
  }
  double h = 0.0;
  for (double c : hist)
    if (c > 0) h -= (c / total) * std::log(c / total);
  return h;
}

double probe_error(const AffineTransform& got, const AffineTransform& truth,
                   const std::array<std::int64_t, 3>& ext, double* max_err = nullptr) {
  double sum = 0.0, worst = 0.0;
  int n = 0;
  for (auto z : grid_axis_centers(ext[0], 16, 16))
    for (auto y : grid_axis_centers(ext[1], 16, 16))
      for (auto x : grid_axis_centers(ext[2], 16, 16)) {
        const Vec3 p{static_cast<double>(z), static_cast<double>(y),
                     static_cast<double>(x)};
        const double e = norm(map_landmark(got, p) - map_landmark(truth, p));
        sum += e;
        worst = std::max(worst, e);
        ++n;
      }
  if (max_err) *max_err = worst;
  return sum / n;
}

}  // namespace

TEST_CASE("MI of a volume with itself equals its masked marginal entropy") {
  const Volume& atlas = test_atlas();
  const double mi = mutual_information(atlas, atlas, 32);
  const double h = masked_entropy(atlas, 32);
  REQUIRE_THAT(mi, Catch::Matchers::WithinAbs(h, 1e-10));
  REQUIRE(mi >= -1e-12);
}

TEST_CASE("MI of independent noise volumes is near zero") {
  Rng rng_a(1), rng_b(2);
  Volume a = full_roi_volume({32, 32, 32});
  Volume b = full_roi_volume({32, 32, 32});
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    a.intensities[i] = static_cast<float>(rng_a.uniform(-1.0, 1.0));
    b.intensities[i] = static_cast<float>(rng_b.uniform(-1.0, 1.0));
  }
  const double mi = mutual_information(a, b, 32);
  REQUIRE(mi >= -1e-12);
  REQUIRE(mi < 0.05);
}

TEST_CASE("MI drops under a 3-voxel shift") {
  const Volume& atlas = test_atlas();
  Volume shifted = atlas;
  for (std::int64_t z = 0; z < atlas.extents[0]; ++z)
    for (std::int64_t y = 0; y < atlas.extents[1]; ++y)
      for (std::int64_t x = 0; x < atlas.extents[2]; ++x) {
        const std::int64_t sx = x + 3;
        const bool ok = sx < atlas.extents[2];
        shifted.intensities[shifted.index(z, y, x)] = ok ? atlas.at(z, y, sx) : -1.0f;
        shifted.roi_mask[shifted.index(z, y, x)] =
            ok ? atlas.roi_mask[atlas.index(z, y, sx)] : 0;
      }
  REQUIRE(mutual_information(atlas, shifted, 32) < mutual_information(atlas, atlas, 32));
}

TEST_CASE("MI rejects an empty evaluation region") {
  Volume a = make_volume({32, 32, 32}, 1.0, true);
  Volume b = make_volume({32, 32, 32}, 1.0, true);
  a.roi_mask[a.index(2, 2, 2)] = 1;
  b.roi_mask[b.index(29, 29, 29)] = 1;
  REQUIRE_THROWS_WITH(mutual_information(a, b, 32),
                      Catch::Matchers::ContainsSubstring("empty evaluation region"));
}

TEST_CASE("registering a volume to itself recovers the identity") {
  const Volume& atlas = test_atlas();
  RegistrationConfig cfg;
  const RegistrationResult r = register_affine(atlas, atlas, cfg);
  const double mean_err = probe_error(r.transform, AffineTransform(), atlas.extents);
  REQUIRE(mean_err < 0.02);
}

TEST_CASE("registration recovers a planted affine within one voxel") {
  const Volume& atlas = test_atlas();
  DiseaseConfig disease;
  RegistrationConfig cfg;
  for (std::uint64_t seed : {301ull, 302ull}) {
    const SubjectRecord rec = generate_subject(atlas, seed, disease);
    const RegistrationResult r = register_affine(rec.volume, atlas, cfg);
    double worst = 0.0;
    const double mean_err =
        probe_error(r.transform, rec.true_transform, atlas.extents, &worst);
    INFO("seed " << seed << " mean " << mean_err << " max " << worst);
    REQUIRE(mean_err < 1.0);
    REQUIRE(worst < 2.5);
  }
}

TEST_CASE("a dominating regularizer pins the linear part to identity") {
  const Volume& atlas = test_atlas();
  DiseaseConfig disease;
  const SubjectRecord rec = generate_subject(atlas, 303, disease);
  RegistrationConfig cfg;
  cfg.lambda_reg = 1e6;
  const RegistrationResult r = register_affine(rec.volume, atlas, cfg);
  const Mat3 eye = mat_identity();
  for (int i = 0; i < 9; ++i)
    REQUIRE(std::fabs(r.transform.linear()[i] - eye[i]) < 1e-3);
}

TEST_CASE("landmark grid arithmetic on a full-roi 48 cube") {
  const Volume v = full_roi_volume({48, 48, 48});
  const LandmarkGrid g = build_landmark_grid(v, 16, 16, 2);
  REQUIRE(g.count() == 27);
  for (const auto& p : g.landmarks)
    for (int i = 0; i < 3; ++i) {
      REQUIRE(p[i] >= 8.0);
      REQUIRE(p[i] <= 40.0);
      REQUIRE(std::fmod(p[i] - 8.0, 16.0) == 0.0);
    }
  // corner landmark's two nearest axis neighbors, ties broken by index
  REQUIRE(g.landmarks[0] == Vec3{8, 8, 8});
  REQUIRE(g.neighbors[0] == std::vector<int>{1, 3});
}

TEST_CASE("roi-filtered landmark count equals brute-force enumeration") {
  const Volume& atlas = test_atlas();
  const LandmarkGrid g = build_landmark_grid(atlas, 16, 8, 2);
  std::int64_t expected = 0;
  for (std::int64_t z = 8; z <= 40; z += 8)
    for (std::int64_t y = 8; y <= 40; y += 8)
      for (std::int64_t x = 8; x <= 40; x += 8)
        if (atlas.roi_at(z, y, x)) ++expected;
  REQUIRE(g.count() == expected);
  REQUIRE(g.count() > 0);

  // neighbor lists match a brute-force distance sort
  Rng rng(9);
  for (int rep = 0; rep < 5; ++rep) {
    const int j = static_cast<int>(rng.uniform_index(g.count()));
    std::vector<std::pair<double, int>> dist;
    for (int i = 0; i < g.count(); ++i) {
      if (i == j) continue;
      const Vec3 d = g.landmarks[i] - g.landmarks[j];
      dist.push_back({d[0] * d[0] + d[1] * d[1] + d[2] * d[2], i});
    }
    std::sort(dist.begin(), dist.end());
    REQUIRE(g.neighbors[j].size() == 2);
    REQUIRE(g.neighbors[j][0] == dist[0].second);
    REQUIRE(g.neighbors[j][1] == dist[1].second);
  }
}

TEST_CASE("landmark grid errors") {
  const Volume v = full_roi_volume({32, 32, 32});
  REQUIRE_THROWS_WITH(build_landmark_grid(v, 64, 8, 2),
                      Catch::Matchers::ContainsSubstring("exceeds minimum extent"));
  REQUIRE_THROWS_WITH(build_landmark_grid(v, 16, 20, 2),
                      Catch::Matchers::ContainsSubstring("stride"));
  Volume tiny_roi = make_volume({32, 32, 32}, 1.0, true);
  REQUIRE_THROWS_WITH(build_landmark_grid(tiny_roi, 16, 8, 2),
                      Catch::Matchers::ContainsSubstring("no valid landmarks"));
}

TEST_CASE("map_landmark identities and round-trip") {
  const Vec3 p{10.0, 20.0, 30.0};
  REQUIRE(norm(map_landmark(AffineTransform(), p) - p) == 0.0);

  const AffineTransform shift(mat_identity(), {1.0, -2.0, 3.0});
  REQUIRE(norm(map_landmark(shift, p) - Vec3{9.0, 22.0, 27.0}) < 1e-12);

  Rng rng(13);
  for (int rep = 0; rep < 4; ++rep) {
    Mat3 lin = mat_identity();
    for (int i = 0; i < 9; ++i) lin[i] += rng.uniform(-0.08, 0.08);
    const AffineTransform t(lin,
                            {rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-3, 3)});
    for (int i = 0; i < 100; ++i) {
      const Vec3 q{rng.uniform(0, 47), rng.uniform(0, 47), rng.uniform(0, 47)};
      REQUIRE(norm(t.apply(map_landmark(t, q)) - q) < 1e-9);
    }
  }
}

TEST_CASE("extract_patch copies voxels exactly at an integer-aligned center") {
  const Volume& atlas = test_atlas();
  double oof = 1.0;
  const auto patch = extract_patch<float>(atlas, {24, 24, 24}, 8, &oof);
  REQUIRE(oof == 0.0);
  std::size_t i = 0;
  for (std::int64_t z = 20; z < 28; ++z)
    for (std::int64_t y = 20; y < 28; ++y)
      for (std::int64_t x = 20; x < 28; ++x, ++i) REQUIRE(patch[i] == atlas.at(z, y, x));
}

TEST_CASE("extract_patch pads out-of-field samples with -1") {
  const Volume& atlas = test_atlas();
  double oof = 0.0;
  const auto patch = extract_patch<float>(atlas, {0, 0, 0}, 8, &oof);
  REQUIRE(oof > 0.0);
  REQUIRE(patch[0] == -1.0f);  // offset (-4,-4,-4) lies outside
}

TEST_CASE("pure-translation subject reproduces the atlas patch exactly") {
  const Volume& atlas = test_atlas();
  const AffineTransform phi(mat_identity(), {2.0, -1.0, 3.0});  // subject -> atlas
  Volume subject = make_volume(atlas.extents, atlas.spacing, true);
  for (std::int64_t z = 0; z < atlas.extents[0]; ++z)
    for (std::int64_t y = 0; y < atlas.extents[1]; ++y)
      for (std::int64_t x = 0; x < atlas.extents[2]; ++x) {
        const Vec3 a = phi.apply(
            {static_cast<double>(z), static_cast<double>(y), static_cast<double>(x)});
        const std::int64_t az = std::llround(a[0]), ay = std::llround(a[1]),
                           ax = std::llround(a[2]);
        if (!atlas.in_bounds(az, ay, ax)) continue;
        subject.intensities[subject.index(z, y, x)] = atlas.at(az, ay, ax);
        subject.roi_mask[subject.index(z, y, x)] =
            atlas.roi_mask[atlas.index(az, ay, ax)];
      }
  const Vec3 p{24.0, 24.0, 24.0};
  const auto atlas_patch = extract_patch<float>(atlas, p, 16);
  const auto subj_patch = extract_patch<float>(subject, map_landmark(phi, p), 16);
  REQUIRE(atlas_patch == subj_patch);
}
