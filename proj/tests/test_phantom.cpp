#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "drascore/phantom.hpp"
#include "drascore/pvol.hpp"

using namespace drascore;

namespace {

const Volume& test_atlas() {
  static Volume atlas = generate_atlas({48, 48, 48}, 1.0, 42);
  return atlas;
}

// Euclidean distance (voxels) from a point to the nearest non-roi voxel,
// brute-forced; the independent depth oracle.
double boundary_distance(const Volume& v, const Vec3& p) {
  double best = 1e30;
  for (std::int64_t z = 0; z < v.extents[0]; ++z)
    for (std::int64_t y = 0; y < v.extents[1]; ++y)
      for (std::int64_t x = 0; x < v.extents[2]; ++x) {
        if (v.roi_mask[v.index(z, y, x)]) continue;
        const double dz = static_cast<double>(z) - p[0];
        const double dy = static_cast<double>(y) - p[1];
        const double dx = static_cast<double>(x) - p[2];
        best = std::min(best, dz * dz + dy * dy + dx * dx);
      }
  return std::sqrt(best);
}

std::string temp_dir(const char* tag) {
  auto dir = std::filesystem::temp_directory_path() / (std::string("drascore_") + tag);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir.string();
}

}  // namespace

TEST_CASE("atlas generation is deterministic in the seed") {
  const Volume a = generate_atlas({32, 32, 32}, 1.0, 7);
  const Volume b = generate_atlas({32, 32, 32}, 1.0, 7);
  REQUIRE(a.intensities == b.intensities);
  REQUIRE(a.roi_mask == b.roi_mask);
  const Volume c = generate_atlas({32, 32, 32}, 1.0, 8);
  REQUIRE(a.intensities != c.intensities);
}

TEST_CASE("atlas roi fraction, background and connectivity") {
  const Volume& atlas = test_atlas();
  const double frac =
      static_cast<double>(atlas.roi_count()) / static_cast<double>(atlas.numel());
  REQUIRE(frac > 0.3);
  REQUIRE(frac < 0.5);
  for (std::int64_t i = 0; i < atlas.numel(); ++i) {
    if (!atlas.roi_mask[i]) REQUIRE(atlas.intensities[i] == -1.0f);
    REQUIRE(atlas.intensities[i] >= -1.0f);
    REQUIRE(atlas.intensities[i] <= 1.0f);
  }
  REQUIRE(count_components(atlas.roi_mask, atlas.extents) == 1);
}

TEST_CASE("atlas rejects extents below 16") {
  REQUIRE_THROWS_WITH(generate_atlas({15, 48, 48}, 1.0, 1),
                      Catch::Matchers::ContainsSubstring("minimum 16"));
}

TEST_CASE("zero-lesion subject has grade 0 and near-unit capacity") {
  DiseaseConfig disease;
  disease.max_lesions_a = 0;
  disease.max_lesions_b = 0;
  const SubjectRecord rec = generate_subject(test_atlas(), 99, disease);
  REQUIRE(rec.labels.grade == 0);
  REQUIRE(rec.labels.burden_a == 0.0);
  REQUIRE(rec.labels.burden_b == 0.0);
  REQUIRE(rec.labels.capacity > 1.0 - 5.0 * kCapacityNoiseSigma);
  for (auto m : rec.lesion_mask_a) REQUIRE(m == 0);
  for (auto m : rec.lesion_mask_b) REQUIRE(m == 0);
}

TEST_CASE("planted transform round-trips 100 random roi points") {
  DiseaseConfig disease;
  const SubjectRecord rec = generate_subject(test_atlas(), 4242, disease);
  Rng rng(5);
  for (int i = 0; i < 100; ++i) {
    const Vec3 p{rng.uniform(8.0, 40.0), rng.uniform(8.0, 40.0), rng.uniform(8.0, 40.0)};
    const Vec3 back = rec.true_transform.apply(rec.true_transform.apply_inverse(p));
    REQUIRE(norm(back - p) < 1e-6);
  }
}

TEST_CASE("grade equals the bin of the recounted lesion fraction") {
  DiseaseConfig disease;
  for (std::uint64_t seed : {11ull, 12ull, 13ull, 14ull, 15ull, 16ull}) {
    const SubjectRecord rec = generate_subject(test_atlas(), seed, disease);
    std::int64_t roi = 0, les = 0, na = 0, nb = 0;
    for (std::int64_t i = 0; i < rec.volume.numel(); ++i) {
      if (rec.volume.roi_mask[i]) ++roi;
      if (rec.lesion_mask_a[i] || rec.lesion_mask_b[i]) ++les;
      if (rec.lesion_mask_a[i]) ++na;
      if (rec.lesion_mask_b[i]) ++nb;
    }
    const double f = static_cast<double>(les) / static_cast<double>(roi);
    REQUIRE(rec.labels.grade == grade_from_fraction(f));
    REQUIRE_THAT(rec.labels.burden_a,
                 Catch::Matchers::WithinAbs(static_cast<double>(na) / roi, 1e-12));
    REQUIRE_THAT(rec.labels.burden_b,
                 Catch::Matchers::WithinAbs(static_cast<double>(nb) / roi, 1e-12));
    for (std::int64_t i = 0; i < rec.volume.numel(); ++i) {
      if (rec.lesion_mask_a[i] || rec.lesion_mask_b[i])
        REQUIRE(rec.volume.roi_mask[i] == 1);
    }
  }
}

TEST_CASE("capacity tracks the planted lesion fraction") {
  DiseaseConfig disease;
  for (std::uint64_t seed = 100; seed < 124; ++seed) {
    const SubjectRecord rec = generate_subject(test_atlas(), seed, disease);
    std::int64_t roi = 0, les = 0;
    for (std::int64_t i = 0; i < rec.volume.numel(); ++i) {
      if (rec.volume.roi_mask[i]) ++roi;
      if (rec.lesion_mask_a[i] || rec.lesion_mask_b[i]) ++les;
    }
    const double f = static_cast<double>(les) / roi;
    const double expected = std::clamp(1.0 - 3.0 * f, 0.05, 1.0);
    REQUIRE(std::fabs(rec.labels.capacity - expected) < 6.0 * kCapacityNoiseSigma);
  }
}

TEST_CASE("subtype-A centroids lie strictly deeper than every subtype-B centroid") {
  DiseaseConfig disease;
  int subjects_with_both = 0;
  for (std::uint64_t seed = 200; seed < 215 && subjects_with_both < 4; ++seed) {
    const SubjectRecord rec = generate_subject(test_atlas(), seed, disease);
    std::vector<double> depth_a, depth_b;
    for (const auto& l : rec.lesions) {
      const double d = boundary_distance(rec.volume, l.center);
      (l.subtype == 'a' ? depth_a : depth_b).push_back(d);
    }
    if (depth_a.empty() || depth_b.empty()) continue;
    ++subjects_with_both;
    const double min_a = *std::min_element(depth_a.begin(), depth_a.end());
    const double max_b = *std::max_element(depth_b.begin(), depth_b.end());
    REQUIRE(min_a > max_b);
  }
  REQUIRE(subjects_with_both >= 3);
}

TEST_CASE("pvol round-trip is bit-exact") {
  const std::string dir = temp_dir("pvol");
  DiseaseConfig disease;
  const SubjectRecord rec = generate_subject(test_atlas(), 77, disease);
  const std::string path = dir + "/v.pvol";
  write_volume(rec.volume, path);
  const Volume back = read_volume(path);
  REQUIRE(back.extents == rec.volume.extents);
  REQUIRE(back.spacing == rec.volume.spacing);
  REQUIRE(back.intensities == rec.volume.intensities);
  REQUIRE(back.roi_mask == rec.volume.roi_mask);
}

TEST_CASE("pvol rejects corruption with diagnostics") {
  const std::string dir = temp_dir("pvol_bad");
  Volume v = make_volume({16, 16, 16}, 1.0, true);
  const std::string path = dir + "/v.pvol";
  write_volume(v, path);

  SECTION("truncated payload names expected vs actual byte count") {
    std::filesystem::resize_file(path, std::filesystem::file_size(path) - 100);
    REQUIRE_THROWS_WITH(read_volume(path), Catch::Matchers::ContainsSubstring("expected"));
  }
  SECTION("bad magic") {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("XXXXXXXX", 8);
    f.close();
    REQUIRE_THROWS_WITH(read_volume(path), Catch::Matchers::ContainsSubstring("magic"));
  }
  SECTION("header extents disagree with payload size") {
    std::ifstream in(path, std::ios::binary);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());
    in.close();
    std::uint32_t hlen;
    std::memcpy(&hlen, bytes.data() + 8, 4);
    std::string header(bytes.begin() + 12, bytes.begin() + 12 + hlen);
    auto j = nlohmann::json::parse(header);
    j["extents"] = {32, 32, 32};
    std::string new_header = j.dump();
    std::ofstream out(path, std::ios::binary);
    out.write(bytes.data(), 8);
    std::uint32_t nh = static_cast<std::uint32_t>(new_header.size());
    out.write(reinterpret_cast<char*>(&nh), 4);
    out.write(new_header.data(), static_cast<std::streamsize>(new_header.size()));
    out.write(bytes.data() + 12 + hlen,
              static_cast<std::streamsize>(bytes.size() - 12 - hlen));
    out.close();
    REQUIRE_THROWS_WITH(read_volume(path), Catch::Matchers::ContainsSubstring("expected"));
  }
}

TEST_CASE("cohort write/load round-trip with reproducible labels") {
  const std::string dir = temp_dir("cohort");
  PhantomConfig cfg;
  cfg.extents = {48, 48, 48};
  cfg.num_subjects = 6;
  cfg.seed = 31;
  const std::string manifest_path = write_cohort(dir, cfg);
  const Manifest m = load_manifest(manifest_path);
  REQUIRE(m.subjects.size() == 6);
  REQUIRE(m.extents == cfg.extents);

  const Volume atlas = read_volume(m.atlas_path());
  for (const auto& s : m.subjects) {
    const SubjectRecord rec = generate_subject(atlas, s.seed, cfg.disease);
    REQUIRE(rec.labels.grade == s.labels.grade);
    REQUIRE_THAT(rec.labels.capacity,
                 Catch::Matchers::WithinAbs(s.labels.capacity, 1e-12));
    const Volume stored = read_volume(m.subject_path(s.id));
    REQUIRE(stored.intensities == rec.volume.intensities);
  }
}
