#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "drascore/parallel.hpp"
#include "drascore/phantom.hpp"
#include "drascore/pvol.hpp"
#include "drascore/trainer.hpp"

namespace drascore {

// In-memory view of a generated cohort: volumes, lesion masks, labels and the
// subject->atlas transforms in use (planted by default, registered when a
// transforms directory is supplied).
struct Cohort {
  Volume atlas;
  std::vector<Volume> volumes;
  std::vector<std::vector<std::uint8_t>> mask_a;
  std::vector<std::vector<std::uint8_t>> mask_b;
  std::vector<AffineTransform> transforms;
  std::vector<SubjectLabels> labels;
  std::vector<std::vector<Lesion>> lesions;
  std::string transform_provenance{"planted"};

  int count() const { return static_cast<int>(volumes.size()); }

  TrainData train_data() const {
    TrainData d;
    for (const auto& v : volumes) d.subjects.push_back(&v);
    d.transforms = transforms;
    return d;
  }
};

inline std::string transform_file_name(int id) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "subj_%03d.tfm.json", id);
  return buf;
}

inline Cohort load_cohort(const Manifest& m, const std::string& transforms_dir = "") {
  Cohort c;
  c.atlas = read_volume(m.atlas_path());
  const int n = static_cast<int>(m.subjects.size());
  c.volumes.resize(n);
  c.mask_a.resize(n);
  c.mask_b.resize(n);
  c.transforms.resize(n);
  c.labels.resize(n);
  c.lesions.resize(n);
  parallel_for(n, [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t i = lo; i < hi; ++i) {
      const auto& s = m.subjects[i];
      c.volumes[i] = read_volume(m.subject_path(static_cast<int>(i)));
      c.mask_a[i] =
          read_volume((std::filesystem::path(m.dir) / s.mask_a_file).string()).roi_mask;
      c.mask_b[i] =
          read_volume((std::filesystem::path(m.dir) / s.mask_b_file).string()).roi_mask;
      c.labels[i] = s.labels;
      c.lesions[i] = s.lesions;
      c.transforms[i] = s.true_transform;
    }
  });
  if (!transforms_dir.empty()) {
    c.transform_provenance = "registered";
    for (int i = 0; i < n; ++i) {
      const std::string path =
          (std::filesystem::path(transforms_dir) / transform_file_name(i)).string();
      std::ifstream in(path);
      require(in.good(), "load_cohort: missing registered transform ", path);
      nlohmann::json j;
      in >> j;
      c.transforms[i] = AffineTransform::from_json(j);
    }
  }
  return c;
}

}  // namespace drascore
