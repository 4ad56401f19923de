#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "drascore/contrastive.hpp"
#include "drascore/encoder.hpp"
#include "drascore/landmarks.hpp"
#include "drascore/metrics.hpp"
#include "drascore/parallel.hpp"
#include "drascore/pipeline.hpp"
#include "drascore/probe.hpp"
#include "drascore/trainer.hpp"

namespace drascore {

// --------------------------------------------------------------------------
// image-level representations
// --------------------------------------------------------------------------

struct RepresentationSet {
  std::vector<std::vector<double>> rows;  // J x R, landmark order
  std::vector<double> pooled;             // mean of rows
};

// Voxel-level representations at every landmark plus their mean; encoder in
// eval mode (BN running statistics).
inline RepresentationSet image_embedding(const Volume& subject,
                                         const AffineTransform& transform,
                                         const LandmarkGrid& grid,
                                         const Encoder<float>& enc,
                                         const ParamStore<float>& store) {
  RepresentationSet rs;
  const std::int64_t d = grid.patch_size;
  const int R = enc.config().repr_dim();
  rs.pooled.assign(R, 0.0);
  for (int j = 0; j < grid.count(); ++j) {
    const Vec3 center = map_landmark(transform, grid.landmarks[j]);
    auto patch = extract_patch<float>(subject, center, d);
    auto x = make_tensor<float>({1, 1, d, d, d});
    x->data = std::move(patch);
    auto out = enc.forward(nullptr, x, grid.normalized[j], store, false, false);
    std::vector<double> row(R);
    for (int r = 0; r < R; ++r) row[r] = static_cast<double>(out.rep->data[r]);
    for (int r = 0; r < R; ++r) rs.pooled[r] += row[r];
    rs.rows.push_back(std::move(row));
  }
  for (auto& v : rs.pooled) v /= static_cast<double>(grid.count());
  return rs;
}

// Pooled image features for every subject (rows of the probe design matrix).
inline std::vector<std::vector<double>> cohort_image_features(
    const Cohort& cohort, const LandmarkGrid& grid, const Encoder<float>& enc,
    const ParamStore<float>& store) {
  std::vector<std::vector<double>> feats(cohort.count());
  parallel_for(cohort.count(), [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t i = lo; i < hi; ++i)
      feats[i] =
          image_embedding(cohort.volumes[i], cohort.transforms[i], grid, enc, store)
              .pooled;
  });
  return feats;
}

// The standard image-level probe suite over the phantom labels.
struct ProbeSuite {
  ProbeResult capacity;   // continuous, R^2
  ProbeResult grade;      // ordinal, accuracy + 1-off
  ProbeResult burden_a;   // continuous, R^2
  ProbeResult burden_b;   // continuous, R^2
};

inline ProbeSuite probe_suite(const std::vector<std::vector<double>>& features,
                              const Cohort& cohort, int folds, std::uint64_t seed) {
  std::vector<double> capacity, burden_a, burden_b, grade;
  for (const auto& l : cohort.labels) {
    capacity.push_back(l.capacity);
    burden_a.push_back(l.burden_a);
    burden_b.push_back(l.burden_b);
    grade.push_back(l.grade);
  }
  ProbeSuite s;
  s.capacity = linear_probe(features, capacity, ProbeTask::kContinuous, "capacity",
                            folds, seed);
  s.grade = linear_probe(features, grade, ProbeTask::kOrdinal, "grade", folds, seed);
  s.burden_a = linear_probe(features, burden_a, ProbeTask::kContinuous, "burden_a",
                            folds, seed);
  s.burden_b = linear_probe(features, burden_b, ProbeTask::kContinuous, "burden_b",
                            folds, seed);
  return s;
}

// --------------------------------------------------------------------------
// labeled patches (annotation analog)
// --------------------------------------------------------------------------

inline constexpr int kClassHealthy = 0;
inline constexpr int kClassSubtypeA = 1;
inline constexpr int kClassSubtypeB = 2;

struct LabeledPatch {
  int subject{0};
  Vec3 center{};   // subject voxel coordinates
  Vec3 p_norm{};   // normalized atlas location of the center
  int label{kClassHealthy};
};

// Lesion-centered patches carry their subtype; healthy patches come from
// lesion-free subjects at landmark locations.
inline std::vector<LabeledPatch> build_labeled_patches(const Cohort& cohort,
                                                       const LandmarkGrid& grid,
                                                       int max_per_lesion_class,
                                                       int max_healthy,
                                                       std::uint64_t seed) {
  std::vector<LabeledPatch> lesions_a, lesions_b, healthy;
  for (int i = 0; i < cohort.count(); ++i) {
    for (const auto& l : cohort.lesions[i]) {
      LabeledPatch p;
      p.subject = i;
      p.center = l.center;
      p.p_norm =
          normalize_coord(cohort.atlas.extents, cohort.transforms[i].apply(l.center));
      p.label = l.subtype == 'a' ? kClassSubtypeA : kClassSubtypeB;
      (l.subtype == 'a' ? lesions_a : lesions_b).push_back(p);
    }
  }
  for (int i = 0; i < cohort.count(); ++i) {
    if (!cohort.lesions[i].empty()) continue;  // healthy pool: lesion-free subjects
    for (int j = 0; j < grid.count(); ++j) {
      LabeledPatch p;
      p.subject = i;
      p.center = map_landmark(cohort.transforms[i], grid.landmarks[j]);
      p.p_norm = grid.normalized[j];
      p.label = kClassHealthy;
      healthy.push_back(p);
    }
  }
  require(!lesions_a.empty() && !lesions_b.empty(),
          "labeled patches: cohort has no lesions of one subtype");
  require(!healthy.empty(), "labeled patches: no lesion-free subjects for healthy pool");

  Rng rng(mix_seed(seed, 0x1AB5ull));
  rng.shuffle(lesions_a);
  rng.shuffle(lesions_b);
  rng.shuffle(healthy);
  auto clip = [](std::vector<LabeledPatch>& v, int cap) {
    if (cap > 0 && static_cast<int>(v.size()) > cap) v.resize(cap);
  };
  clip(lesions_a, max_per_lesion_class);
  clip(lesions_b, max_per_lesion_class);
  clip(healthy, max_healthy);

  std::vector<LabeledPatch> all;
  all.insert(all.end(), healthy.begin(), healthy.end());
  all.insert(all.end(), lesions_a.begin(), lesions_a.end());
  all.insert(all.end(), lesions_b.begin(), lesions_b.end());
  return all;
}

// --------------------------------------------------------------------------
// fine-tuned detection model
// --------------------------------------------------------------------------

struct FineTunedModel {
  EncoderConfig arch;
  ParamStore<float> params;
  std::vector<float> head_w;  // classes x R (the 1x1x1 linear head)
  std::vector<float> head_b;  // classes
  int classes{3};
};

inline void save_model(const FineTunedModel& m, const std::string& path) {
  BlobFile f;
  f.meta = {{"format", "drascore-ftm-1"},
            {"version", kVersion},
            {"arch", m.arch.to_json()},
            {"classes", m.classes}};
  detail::add_store_blobs(f, "enc.", m.params);
  f.add_f32("head.w", {m.classes, m.arch.repr_dim()}, m.head_w);
  f.add_f32("head.b", {m.classes}, m.head_b);
  f.write(path);
}

inline FineTunedModel load_model(const std::string& path) {
  const BlobFile f = BlobFile::read(path);
  require(f.meta.value("format", "") == "drascore-ftm-1",
          "model: unrecognized format in ", path);
  FineTunedModel m;
  m.arch = EncoderConfig::from_json(f.meta.at("arch"));
  m.classes = f.meta.at("classes").get<int>();
  Encoder<float> enc(m.arch);
  Rng dummy(0);
  enc.init_params(m.params, dummy);
  detail::read_store_blobs(f, "enc.", m.params);
  m.head_w = f.find("head.w").f32;
  m.head_b = f.find("head.b").f32;
  return m;
}

struct FineTuneOptions {
  bool full{true};           // false: linear readout on frozen features
  bool from_scratch{false};  // ignore checkpoint weights
  double fraction{1.0};      // lesion-annotation fraction
  int steps{400};
  int batch_size{16};
  double lr{0.005};
  double sgd_momentum{0.9};
  double weight_decay{1e-4};
  std::uint64_t seed{7};
  AugmentationConfig augment;
};

namespace detail {

template <typename T>
TensorPtr<T> patch_tensor(const Cohort& cohort, const LabeledPatch& p, std::int64_t d) {
  auto x = make_tensor<T>({1, 1, d, d, d});
  auto patch = extract_patch<T>(cohort.volumes[p.subject], p.center, d);
  x->data = std::move(patch);
  return x;
}

inline std::vector<double> patch_feature(const Cohort& cohort, const LabeledPatch& p,
                                         const Encoder<float>& enc,
                                         const ParamStore<float>& store, std::int64_t d,
                                         const Vec3& p_norm) {
  auto x = patch_tensor<float>(cohort, p, d);
  auto out = enc.forward(nullptr, x, p_norm, store, false, false);
  std::vector<double> f(out.rep->data.begin(), out.rep->data.end());
  return f;
}

}  // namespace detail

// Frozen-encoder features of labeled patches (eval-mode BN), in patch order.
inline std::vector<std::vector<double>> labeled_patch_features(
    const Cohort& cohort, const std::vector<LabeledPatch>& patches,
    const Encoder<float>& enc, const ParamStore<float>& store) {
  const std::int64_t d = enc.config().patch_size;
  std::vector<std::vector<double>> feats(patches.size());
  parallel_for(static_cast<std::int64_t>(patches.size()),
               [&](std::int64_t lo, std::int64_t hi) {
                 for (std::int64_t i = lo; i < hi; ++i)
                   feats[i] = detail::patch_feature(cohort, patches[i], enc, store, d,
                                                    patches[i].p_norm);
               });
  return feats;
}

// Subsamples the lesion classes to `fraction` (healthy pool untouched),
// deterministically in the seed.
inline std::vector<LabeledPatch> annotation_subset(const std::vector<LabeledPatch>& all,
                                                   double fraction, std::uint64_t seed) {
  require(fraction > 0.0 && fraction <= 1.0, "annotation fraction must be in (0,1]");
  if (fraction >= 1.0) return all;
  std::vector<LabeledPatch> healthy, a, b;
  for (const auto& p : all)
    (p.label == kClassHealthy ? healthy : (p.label == kClassSubtypeA ? a : b))
        .push_back(p);
  Rng rng(mix_seed(seed, 0xF4ACull));
  rng.shuffle(a);
  rng.shuffle(b);
  a.resize(std::max<std::size_t>(1, static_cast<std::size_t>(a.size() * fraction)));
  b.resize(std::max<std::size_t>(1, static_cast<std::size_t>(b.size() * fraction)));
  std::vector<LabeledPatch> out = healthy;
  out.insert(out.end(), a.begin(), a.end());
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

// Fine-tunes the pre-trained encoder into a 3-class patch classifier
// (healthy / subtype A / subtype B). linear readout freezes the encoder and
// fits the head; full mode trains everything by SGD with cross-entropy.
inline FineTunedModel fine_tune(const TrainerState& checkpoint, const Cohort& cohort,
                                const std::vector<LabeledPatch>& train_patches,
                                const FineTuneOptions& opt) {
  require(!train_patches.empty(), "fine_tune: empty patch set");
  for (int c = 0; c < 3; ++c) {
    bool found = false;
    for (const auto& p : train_patches) found = found || p.label == c;
    require(found, "fine_tune: class ", c, " is empty in the training patches");
  }
  FineTunedModel model;
  model.arch = checkpoint.encoder_cfg;
  Encoder<float> enc(model.arch);
  if (opt.from_scratch) {
    Rng rng(mix_seed(opt.seed, 0x5C4A7Cull));
    enc.init_params(model.params, rng);
  } else {
    model.params = checkpoint.query.clone();
  }
  const int R = model.arch.repr_dim();
  const std::int64_t d = model.arch.patch_size;
  model.head_w.assign(static_cast<std::size_t>(3) * R, 0.0f);
  model.head_b.assign(3, 0.0f);

  if (!opt.full) {
    const auto feats = labeled_patch_features(cohort, train_patches, enc, model.params);
    std::vector<int> labels;
    for (const auto& p : train_patches) labels.push_back(p.label);
    const LogisticModel lm = logistic_fit(feats, labels, 3);
    for (int c = 0; c < 3; ++c) {
      model.head_b[c] = static_cast<float>(lm.bias[c]);
      for (int r = 0; r < R; ++r)
        model.head_w[c * R + r] = static_cast<float>(lm.weights[c * R + r]);
    }
    return model;
  }

  // full fine-tuning via the tape
  ParamStore<float> headstore;
  auto W = headstore.add("head_w", {R, 3}, true);
  auto B = headstore.add("head_b", {3}, false);
  Rng winit(mix_seed(opt.seed, 0x77ull));
  for (auto& v : W->data) v = static_cast<float>(winit.normal(0.0, std::sqrt(1.0 / R)));

  OptimizerState<float> opt_enc, opt_head;
  Rng order_rng(mix_seed(opt.seed, 0x0DDEull));
  const std::uint64_t aug_seed = mix_seed(opt.seed, 0xA9ull);
  std::vector<int> order(train_patches.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::size_t pos = order.size();

  const int B_sz = std::min<int>(opt.batch_size, static_cast<int>(train_patches.size()));
  require(B_sz >= 2, "fine_tune: need a batch of at least 2");
  for (int t = 0; t < opt.steps; ++t) {
    std::vector<const LabeledPatch*> batch;
    for (int bi = 0; bi < B_sz; ++bi) {
      if (pos == order.size()) {
        order_rng.shuffle(order);
        pos = 0;
      }
      batch.push_back(&train_patches[order[pos++]]);
    }
    auto onehot = make_tensor<float>({B_sz, 3});
    // per-sample locations differ; forward one-by-one and concatenate reps
    Tape<float> tape;
    std::vector<TensorPtr<float>> reps;
    for (int bi = 0; bi < B_sz; ++bi) {
      const auto& p = *batch[bi];
      auto patch = extract_patch<float>(cohort.volumes[p.subject], p.center, d);
      patch = augment(patch, d, mix_seed(aug_seed, t, bi), opt.augment);
      auto xi = make_tensor<float>({1, 1, d, d, d});
      xi->data = std::move(patch);
      onehot->data[bi * 3 + p.label] = 1.0f;
      // single-sample BN is degenerate in train mode; use eval-mode stats
      // for normalization but keep gradients flowing through the affine
      auto out = enc.forward(&tape, xi, p.p_norm, model.params, false, false);
      reps.push_back(out.rep);
    }
    // stack reps into [B,R] via concat on axis 0: reuse concat by transposition
    // is awkward; accumulate with a dedicated stack op instead
    auto rep = make_tensor<float>({B_sz, R}, true);
    for (int bi = 0; bi < B_sz; ++bi)
      std::copy(reps[bi]->data.begin(), reps[bi]->data.end(),
                rep->data.begin() + static_cast<std::size_t>(bi) * R);
    tape.record("stack_rows", rep, [reps, rep, R]() {
      rep->ensure_grad();
      for (std::size_t bi = 0; bi < reps.size(); ++bi) {
        reps[bi]->ensure_grad();
        for (int r = 0; r < R; ++r)
          reps[bi]->grad[r] += rep->grad[bi * R + r];
      }
    });
    auto logits = add(&tape, matmul(&tape, rep, W), B);
    auto ce = mean_all(
        &tape, sub(&tape, log_sum_exp(&tape, logits), rowwise_dot(&tape, logits, onehot)));
    require(ce->all_finite(), "fine_tune: non-finite loss at step ", t);
    tape.backward(ce);
    const double lr = cosine_lr(t, opt.steps, opt.lr);
    sgd_step(headstore, opt_head, lr, opt.sgd_momentum, opt.weight_decay);
    sgd_step(model.params, opt_enc, lr, opt.sgd_momentum, opt.weight_decay);
    headstore.zero_grads();
    model.params.zero_grads();
  }
  for (int c = 0; c < 3; ++c) {
    model.head_b[c] = B->data[c];
    for (int r = 0; r < R; ++r) model.head_w[c * R + r] = W->data[r * 3 + c];
  }
  return model;
}

// --------------------------------------------------------------------------
// dense prediction
// --------------------------------------------------------------------------

// Patch verdict rule: positive when at least `voxel_fraction` of voxels carry
// class probability strictly above `prob_threshold` (inclusive fraction).
inline bool patch_verdict(const std::vector<float>& probs, double prob_threshold = 0.5,
                          double voxel_fraction = 0.25) {
  require(!probs.empty(), "patch_verdict: empty probability field");
  std::int64_t hot = 0;
  for (float p : probs) hot += p > prob_threshold;
  return static_cast<double>(hot) / static_cast<double>(probs.size()) >= voxel_fraction;
}

// Per-voxel class probabilities for one patch: softmax of the 1x1x1 head on
// the pre-pool feature map, nearest-neighbor upsampled to patch resolution.
// Returns classes * d^3 values.
inline std::vector<float> patch_class_probs(const FineTunedModel& model,
                                            const Encoder<float>& enc,
                                            const TensorPtr<float>& x,
                                            const Vec3& p_norm) {
  require(model.classes <= 8, "patch_class_probs: more classes than supported");
  const auto out = enc.forward(nullptr, x, p_norm, model.params, false, false);
  const auto& fm = out.prepool;  // [1,C,dz,dy,dx]
  const std::int64_t C = fm->dim(1), fz = fm->dim(2), fy = fm->dim(3), fx = fm->dim(4);
  const std::int64_t d = x->dim(2);
  const std::int64_t cells = fz * fy * fx;
  const int classes = model.classes;
  std::vector<float> cell_probs(static_cast<std::size_t>(classes) * cells);
  for (std::int64_t cell = 0; cell < cells; ++cell) {
    double logit[8];
    double m = -1e300;
    for (int c = 0; c < classes; ++c) {
      double s = model.head_b[c];
      for (std::int64_t ch = 0; ch < C; ++ch)
        s += model.head_w[c * C + ch] * fm->data[ch * cells + cell];
      logit[c] = s;
      m = std::max(m, s);
    }
    double denom = 0.0;
    for (int c = 0; c < classes; ++c) denom += std::exp(logit[c] - m);
    for (int c = 0; c < classes; ++c)
      cell_probs[c * cells + cell] = static_cast<float>(std::exp(logit[c] - m) / denom);
  }
  std::vector<float> voxel_probs(static_cast<std::size_t>(classes) * d * d * d);
  for (int c = 0; c < classes; ++c)
    for (std::int64_t z = 0; z < d; ++z)
      for (std::int64_t y = 0; y < d; ++y)
        for (std::int64_t x2 = 0; x2 < d; ++x2) {
          const std::int64_t cz = std::min(z * fz / d, fz - 1);
          const std::int64_t cy = std::min(y * fy / d, fy - 1);
          const std::int64_t cx = std::min(x2 * fx / d, fx - 1);
          voxel_probs[((c * d + z) * d + y) * d + x2] =
              cell_probs[c * cells + (cz * fy + cy) * fx + cx];
        }
  return voxel_probs;
}

struct DenseDetection {
  std::vector<float> prob_a, prob_b;         // averaged voxel probabilities
  std::vector<std::uint8_t> mask_a, mask_b;  // averaged probability > 0.5
  std::int64_t windows_used{0};
  std::int64_t windows_skipped{0};
};

// Sliding-window voxel-level prediction: windows on a `step` lattice whose
// cube fits inside the volume and whose center lies in the dilated roi;
// overlapping probabilities are averaged, then thresholded.
inline DenseDetection dense_detect(const FineTunedModel& model, const Volume& subject,
                                   const AffineTransform& transform,
                                   std::int64_t step = 2, double threshold = 0.5) {
  Encoder<float> enc(model.arch);
  const std::int64_t d = model.arch.patch_size;
  DenseDetection det;
  const std::int64_t n = subject.numel();
  det.prob_a.assign(n, 0.0f);
  det.prob_b.assign(n, 0.0f);
  const auto roi_dilated = dilate_mask(subject.roi_mask, subject.extents, 2);

  struct Window {
    std::int64_t z, y, x;
  };
  std::vector<Window> windows;
  for (std::int64_t z = 0; z < subject.extents[0]; z += step)
    for (std::int64_t y = 0; y < subject.extents[1]; y += step)
      for (std::int64_t x = 0; x < subject.extents[2]; x += step) {
        if (z < d / 2 || z > subject.extents[0] - d + d / 2 || y < d / 2 ||
            y > subject.extents[1] - d + d / 2 || x < d / 2 ||
            x > subject.extents[2] - d + d / 2) {
          ++det.windows_skipped;  // window would leave the volume
          continue;
        }
        if (!roi_dilated[subject.index(z, y, x)]) continue;
        windows.push_back({z, y, x});
      }
  det.windows_used = static_cast<std::int64_t>(windows.size());

  const std::int64_t pvox = d * d * d;
  std::vector<std::vector<float>> probs(windows.size());
  parallel_for(static_cast<std::int64_t>(windows.size()),
               [&](std::int64_t lo, std::int64_t hi) {
                 for (std::int64_t w = lo; w < hi; ++w) {
                   const Vec3 center{static_cast<double>(windows[w].z),
                                     static_cast<double>(windows[w].y),
                                     static_cast<double>(windows[w].x)};
                   auto x = make_tensor<float>({1, 1, d, d, d});
                   x->data = extract_patch<float>(subject, center, d);
                   const Vec3 p_norm =
                       normalize_coord(subject.extents, transform.apply(center));
                   probs[w] = patch_class_probs(model, enc, x, p_norm);
                 }
               });

  std::vector<float> count(n, 0.0f);
  for (std::size_t w = 0; w < windows.size(); ++w) {
    const auto& pr = probs[w];
    std::int64_t i = 0;
    for (std::int64_t z = 0; z < d; ++z)
      for (std::int64_t y = 0; y < d; ++y)
        for (std::int64_t x = 0; x < d; ++x, ++i) {
          const std::int64_t vz = windows[w].z + z - d / 2;
          const std::int64_t vy = windows[w].y + y - d / 2;
          const std::int64_t vx = windows[w].x + x - d / 2;
          const std::int64_t vi = subject.index(vz, vy, vx);
          det.prob_a[vi] += pr[kClassSubtypeA * pvox + i];
          det.prob_b[vi] += pr[kClassSubtypeB * pvox + i];
          count[vi] += 1.0f;
        }
  }
  det.mask_a.assign(n, 0);
  det.mask_b.assign(n, 0);
  for (std::int64_t i = 0; i < n; ++i) {
    if (count[i] > 0.0f) {
      det.prob_a[i] /= count[i];
      det.prob_b[i] /= count[i];
      det.mask_a[i] = det.prob_a[i] > threshold;
      det.mask_b[i] = det.prob_b[i] > threshold;
    }
  }
  return det;
}

// Patch-level subtype verdicts of labeled patches under the 25% rule.
struct PatchEvaluation {
  BinaryScores subtype_a;
  BinaryScores subtype_b;
};

inline PatchEvaluation evaluate_patches(const FineTunedModel& model, const Cohort& cohort,
                                        const std::vector<LabeledPatch>& patches) {
  Encoder<float> enc(model.arch);
  const std::int64_t d = model.arch.patch_size;
  const std::int64_t pvox = d * d * d;
  std::vector<bool> truth_a, truth_b, pred_a, pred_b;
  std::vector<std::vector<float>> all_probs(patches.size());
  parallel_for(static_cast<std::int64_t>(patches.size()),
               [&](std::int64_t lo, std::int64_t hi) {
                 for (std::int64_t i = lo; i < hi; ++i) {
                   auto x = detail::patch_tensor<float>(cohort, patches[i], d);
                   all_probs[i] = patch_class_probs(model, enc, x, patches[i].p_norm);
                 }
               });
  for (std::size_t i = 0; i < patches.size(); ++i) {
    std::vector<float> pa(all_probs[i].begin() + kClassSubtypeA * pvox,
                          all_probs[i].begin() + (kClassSubtypeA + 1) * pvox);
    std::vector<float> pb(all_probs[i].begin() + kClassSubtypeB * pvox,
                          all_probs[i].begin() + (kClassSubtypeB + 1) * pvox);
    truth_a.push_back(patches[i].label == kClassSubtypeA);
    truth_b.push_back(patches[i].label == kClassSubtypeB);
    pred_a.push_back(patch_verdict(pa));
    pred_b.push_back(patch_verdict(pb));
  }
  PatchEvaluation ev;
  ev.subtype_a = binary_scores(truth_a, pred_a);
  ev.subtype_b = binary_scores(truth_b, pred_b);
  return ev;
}

// --------------------------------------------------------------------------
// location perturbation study
// --------------------------------------------------------------------------

struct PerturbationResult {
  // per-fold accuracies: [fold]
  std::vector<double> a_correct, a_random, b_correct, b_random;
  TTestResult t_a, t_b;
};

// Linear readout trained on correct locations, evaluated with correct vs
// uniformly random roi locations as routing inputs.
inline PerturbationResult location_perturbation(const TrainerState& checkpoint,
                                                const Cohort& cohort,
                                                const std::vector<LabeledPatch>& patches,
                                                int folds, std::uint64_t seed) {
  Encoder<float> enc(checkpoint.encoder_cfg);
  const auto correct_feats =
      labeled_patch_features(cohort, patches, enc, checkpoint.query);

  // random roi locations, one per patch
  std::vector<std::int64_t> roi_voxels;
  for (std::int64_t i = 0; i < cohort.atlas.numel(); ++i)
    if (cohort.atlas.roi_mask[i]) roi_voxels.push_back(i);
  Rng rng(mix_seed(seed, 0x9E27ull));
  std::vector<LabeledPatch> perturbed = patches;
  for (auto& p : perturbed) {
    const std::int64_t vi = roi_voxels[rng.uniform_index(roi_voxels.size())];
    const Vec3 q{static_cast<double>(vi / (cohort.atlas.extents[1] *
                                           cohort.atlas.extents[2])),
                 static_cast<double>((vi / cohort.atlas.extents[2]) %
                                     cohort.atlas.extents[1]),
                 static_cast<double>(vi % cohort.atlas.extents[2])};
    p.p_norm = normalize_coord(cohort.atlas.extents, q);
  }
  const auto random_feats =
      labeled_patch_features(cohort, perturbed, enc, checkpoint.query);

  // subject-level folds keep train and test subjects disjoint
  std::vector<int> subj_fold =
      make_folds(cohort.count(), folds, mix_seed(seed, 0xF0ull));
  PerturbationResult res;
  for (int f = 0; f < folds; ++f) {
    std::vector<std::vector<double>> Xtr;
    std::vector<int> ytr;
    std::vector<std::size_t> test_idx;
    for (std::size_t i = 0; i < patches.size(); ++i) {
      if (subj_fold[patches[i].subject] == f) {
        test_idx.push_back(i);
      } else {
        Xtr.push_back(correct_feats[i]);
        ytr.push_back(patches[i].label);
      }
    }
    const LogisticModel m = logistic_fit(Xtr, ytr, 3);
    auto subtype_accuracy = [&](const std::vector<std::vector<double>>& feats,
                                int subtype_class) {
      std::int64_t hits = 0, total = 0;
      for (std::size_t i : test_idx) {
        const int label = patches[i].label;
        if (label != kClassHealthy && label != subtype_class) continue;
        const int pred = m.predict(feats[i]);
        ++total;
        hits += (pred == subtype_class) == (label == subtype_class);
      }
      return total > 0 ? static_cast<double>(hits) / total : 0.0;
    };
    res.a_correct.push_back(subtype_accuracy(correct_feats, kClassSubtypeA));
    res.a_random.push_back(subtype_accuracy(random_feats, kClassSubtypeA));
    res.b_correct.push_back(subtype_accuracy(correct_feats, kClassSubtypeB));
    res.b_random.push_back(subtype_accuracy(random_feats, kClassSubtypeB));
  }
  res.t_a = welch_t_test(res.a_correct, res.a_random);
  res.t_b = welch_t_test(res.b_correct, res.b_random);
  return res;
}

// --------------------------------------------------------------------------
// qualitative rendering
// --------------------------------------------------------------------------

// Mid-axial slice as a 3-panel PGM: image | planted mask overlay | predicted
// mask overlay.
inline void write_detection_pgm(const std::string& path, const Volume& v,
                                const std::vector<std::uint8_t>& planted,
                                const std::vector<std::uint8_t>& predicted) {
  const std::int64_t z = v.extents[0] / 2, H = v.extents[1], W = v.extents[2];
  std::ofstream out(path, std::ios::binary);
  require(out.good(), "write_detection_pgm: cannot open ", path);
  out << "P5\n" << 3 * W << " " << H << "\n255\n";
  auto gray = [&](std::int64_t y, std::int64_t x) {
    const float val = v.at(z, y, x);
    return static_cast<unsigned char>(std::clamp((val + 1.0f) * 0.5f, 0.0f, 1.0f) * 255);
  };
  for (std::int64_t y = 0; y < H; ++y) {
    std::vector<unsigned char> row;
    for (std::int64_t x = 0; x < W; ++x) row.push_back(gray(y, x));
    for (std::int64_t x = 0; x < W; ++x)
      row.push_back(planted[v.index(z, y, x)] ? 255 : gray(y, x) / 2);
    for (std::int64_t x = 0; x < W; ++x)
      row.push_back(predicted[v.index(z, y, x)] ? 255 : gray(y, x) / 2);
    out.write(reinterpret_cast<const char*>(row.data()),
              static_cast<std::streamsize>(row.size()));
  }
}

}  // namespace drascore
