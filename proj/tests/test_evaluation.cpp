#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numeric>

#include "drascore/evaluation.hpp"

using namespace drascore;

namespace {

EncoderConfig micro_encoder(std::int64_t d) {
  EncoderConfig cfg;
  cfg.channels = {1, 4, 4};
  cfg.strides = {1, 2};
  cfg.experts = 2;
  cfg.embed_dim = 8;
  cfg.patch_size = d;
  return cfg;
}

// small cohort shared across the expensive tests
const Cohort& micro_cohort() {
  static Cohort c = [] {
    Cohort c;
    c.atlas = generate_atlas({32, 32, 32}, 1.0, 21);
    DiseaseConfig disease;
    disease.max_lesions_a = 3;
    disease.max_lesions_b = 3;
    disease.radius_min = 2.0;
    disease.radius_max = 3.5;
    for (int i = 0; i < 12; ++i) {
      auto rec = generate_subject(c.atlas, 3000 + i, disease);
      c.volumes.push_back(std::move(rec.volume));
      c.mask_a.push_back(std::move(rec.lesion_mask_a));
      c.mask_b.push_back(std::move(rec.lesion_mask_b));
      c.transforms.push_back(rec.true_transform);
      c.labels.push_back(rec.labels);
      c.lesions.push_back(rec.lesions);
    }
    return c;
  }();
  return c;
}

}  // namespace

TEST_CASE("metrics agree with brute-force micro-fixtures") {
  SECTION("r2") {
    const std::vector<double> truth{1.0, 2.0, 3.0, 4.0};
    const std::vector<double> pred{1.1, 1.9, 3.2, 3.8};
    double ss_res = 0.0, ss_tot = 0.0;
    for (int i = 0; i < 4; ++i) {
      ss_res += (truth[i] - pred[i]) * (truth[i] - pred[i]);
      ss_tot += (truth[i] - 2.5) * (truth[i] - 2.5);
    }
    REQUIRE_THAT(r2_score(truth, pred),
                 Catch::Matchers::WithinAbs(1.0 - ss_res / ss_tot, 1e-14));
    REQUIRE(r2_score(truth, truth) == 1.0);
  }
  SECTION("accuracy and 1-off") {
    const std::vector<int> truth{0, 1, 2, 3, 4, 4};
    const std::vector<int> pred{0, 2, 2, 1, 3, 4};
    REQUIRE_THAT(accuracy(truth, pred), Catch::Matchers::WithinAbs(3.0 / 6.0, 1e-14));
    REQUIRE_THAT(one_off_accuracy(truth, pred),
                 Catch::Matchers::WithinAbs(5.0 / 6.0, 1e-14));
    REQUIRE(one_off_accuracy(truth, pred) >= accuracy(truth, pred));
  }
  SECTION("precision, recall, f1") {
    const std::vector<bool> truth{true, true, true, false, false, false, false};
    const std::vector<bool> pred{true, true, false, true, false, false, false};
    const BinaryScores s = binary_scores(truth, pred);
    REQUIRE(s.tp == 2);
    REQUIRE(s.fp == 1);
    REQUIRE(s.fn == 1);
    REQUIRE_THAT(s.precision, Catch::Matchers::WithinAbs(2.0 / 3.0, 1e-14));
    REQUIRE_THAT(s.recall, Catch::Matchers::WithinAbs(2.0 / 3.0, 1e-14));
    REQUIRE_THAT(s.f1, Catch::Matchers::WithinAbs(2.0 / 3.0, 1e-14));
  }
  SECTION("dice by recount") {
    std::vector<std::uint8_t> a(100, 0), b(100, 0);
    for (int i = 0; i < 30; ++i) a[i] = 1;
    for (int i = 20; i < 60; ++i) b[i] = 1;
    // |A|=30 |B|=40 |A∩B|=10
    REQUIRE_THAT(dice_coefficient(a, b),
                 Catch::Matchers::WithinAbs(2.0 * 10 / (30 + 40), 1e-14));
    REQUIRE(dice_coefficient(a, a) == 1.0);
  }
}

TEST_CASE("welch t-test matches reference values") {
  const TTestResult r = welch_t_test({1, 2, 3, 4, 5}, {0, 1, 2, 3, 4});
  REQUIRE_THAT(r.t, Catch::Matchers::WithinAbs(1.0, 1e-12));
  REQUIRE_THAT(r.df, Catch::Matchers::WithinAbs(8.0, 1e-9));
  REQUIRE_THAT(r.p_one_sided, Catch::Matchers::WithinAbs(0.17329675354366708, 1e-9));

  const TTestResult r2 =
      welch_t_test({0.9, 0.85, 0.95, 0.88, 0.92}, {0.7, 0.65, 0.8, 0.6, 0.72});
  REQUIRE_THAT(r2.t, Catch::Matchers::WithinAbs(5.455159555723467, 1e-9));
  REQUIRE_THAT(r2.p_one_sided, Catch::Matchers::WithinAbs(0.0008261185508623307, 1e-9));
}

TEST_CASE("ridge recovers a noiseless linear map") {
  Rng rng(3);
  const int n = 40, p = 6;
  std::vector<double> beta{0.5, -1.2, 2.0, 0.0, 0.7, -0.3};
  std::vector<std::vector<double>> X;
  std::vector<double> y;
  for (int i = 0; i < n; ++i) {
    std::vector<double> row(p);
    for (auto& v : row) v = rng.normal();
    double t = 1.5;
    for (int j = 0; j < p; ++j) t += beta[j] * row[j];
    X.push_back(row);
    y.push_back(t);
  }
  const auto probe = linear_probe(X, y, ProbeTask::kContinuous, "lin", 5, 1);
  REQUIRE(probe.mean("r2") > 0.999);
}

TEST_CASE("permuted labels give chance-level held-out scores") {
  Rng rng(5);
  const int n = 60, p = 8;
  std::vector<std::vector<double>> X;
  std::vector<double> y_cont;
  std::vector<double> y_class;
  for (int i = 0; i < n; ++i) {
    std::vector<double> row(p);
    for (auto& v : row) v = rng.normal();
    X.push_back(row);
    y_cont.push_back(rng.normal());
    y_class.push_back(i % 3 == 0 ? 1.0 : 0.0);  // majority class rate 2/3
  }
  std::vector<double> r2s, accs;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    // permute labels
    std::vector<double> yp = y_cont, cp = y_class;
    Rng perm(mix_seed(seed, 0x41ull));
    perm.shuffle(yp);
    perm.shuffle(cp);
    r2s.push_back(linear_probe(X, yp, ProbeTask::kContinuous, "perm", 5, seed).mean(0));
    accs.push_back(
        linear_probe(X, cp, ProbeTask::kBinary, "perm", 5, seed).mean("accuracy"));
  }
  REQUIRE(mean_of(r2s) <= 0.05);
  const double majority = 2.0 / 3.0;
  REQUIRE(std::fabs(mean_of(accs) - majority) <= 3.0 * (sd_of(accs) + 0.02));
}

TEST_CASE("logistic probe reaches perfect accuracy on separable classes") {
  Rng rng(7);
  const int n = 45;
  std::vector<std::vector<double>> X;
  std::vector<int> y;
  for (int i = 0; i < n; ++i) {
    const int c = i % 3;
    std::vector<double> row{c * 4.0 + rng.normal(0.0, 0.2),
                            -c * 3.0 + rng.normal(0.0, 0.2), rng.normal()};
    X.push_back(row);
    y.push_back(c);
  }
  const LogisticModel m = logistic_fit(X, y, 3);
  std::vector<bool> truth, pred;
  for (int i = 0; i < n; ++i) {
    truth.push_back(y[i] == 1);
    pred.push_back(m.predict(X[i]) == 1);
  }
  REQUIRE(binary_scores(truth, pred).f1 == 1.0);
}

TEST_CASE("logistic fit drops constant columns with a warning") {
  std::vector<std::vector<double>> X;
  std::vector<int> y;
  Rng rng(9);
  for (int i = 0; i < 20; ++i) {
    X.push_back({1.0, rng.normal() + (i % 2) * 4.0});
    y.push_back(i % 2);
  }
  const LogisticModel m = logistic_fit(X, y, 2);
  int hits = 0;
  for (int i = 0; i < 20; ++i) hits += m.predict(X[i]) == y[i];
  REQUIRE(hits == 20);
  REQUIRE(m.weights[0 * 2 + 0] == 0.0);  // constant column carries no weight
}

TEST_CASE("fold assignment partitions subjects disjointly") {
  const auto folds = make_folds(23, 5, 11);
  std::vector<int> counts(5, 0);
  for (int f : folds) {
    REQUIRE(f >= 0);
    REQUIRE(f < 5);
    ++counts[f];
  }
  int total = 0;
  for (int c : counts) {
    REQUIRE(c >= 4);
    total += c;
  }
  REQUIRE(total == 23);

  // stratified refold keeps every class in every training fold
  std::vector<int> labels(23, 0);
  labels[3] = 1;
  labels[7] = 1;  // rare class
  const auto strat = make_folds(23, 5, 11, &labels);
  for (int f = 0; f < 5; ++f) {
    bool has_rare = false;
    for (int i = 0; i < 23; ++i)
      if (strat[i] != f && labels[i] == 1) has_rare = true;
    REQUIRE(has_rare);
  }
}

TEST_CASE("image embedding pooling identities") {
  const Cohort& cohort = micro_cohort();
  const LandmarkGrid grid = build_landmark_grid(cohort.atlas, 8, 8, 2);
  Encoder<float> enc(micro_encoder(8));
  ParamStore<float> store;
  Rng rng(13);
  enc.init_params(store, rng);

  const auto rs =
      image_embedding(cohort.volumes[0], cohort.transforms[0], grid, enc, store);
  REQUIRE(static_cast<int>(rs.rows.size()) == grid.count());
  REQUIRE(rs.rows[0].size() == 4);

  // pooled equals the mean of rows, and is invariant to row permutation
  std::vector<double> mean(4, 0.0);
  for (const auto& row : rs.rows)
    for (int r = 0; r < 4; ++r) mean[r] += row[r];
  for (auto& v : mean) v /= static_cast<double>(rs.rows.size());
  for (int r = 0; r < 4; ++r)
    REQUIRE_THAT(rs.pooled[r], Catch::Matchers::WithinAbs(mean[r], 1e-6));

  auto rows = rs.rows;
  std::reverse(rows.begin(), rows.end());
  std::vector<double> mean2(4, 0.0);
  for (const auto& row : rows)
    for (int r = 0; r < 4; ++r) mean2[r] += row[r];
  for (auto& v : mean2) v /= static_cast<double>(rows.size());
  for (int r = 0; r < 4; ++r)
    REQUIRE_THAT(mean2[r], Catch::Matchers::WithinAbs(rs.pooled[r], 1e-6));

  // constant subject: every row identical, pooled equals any row
  Volume flat = cohort.volumes[0];
  std::fill(flat.intensities.begin(), flat.intensities.end(), 0.25f);
  const auto rs2 = image_embedding(flat, AffineTransform(), grid, enc, store);
  // rows at different locations agree because routing is zero-initialized
  for (const auto& row : rs2.rows)
    for (int r = 0; r < 4; ++r)
      REQUIRE_THAT(row[r], Catch::Matchers::WithinAbs(rs2.pooled[r], 1e-6));
}

TEST_CASE("patch verdict boundary is inclusive and monotone") {
  // exactly 25% of voxels above threshold -> positive
  std::vector<float> probs(64, 0.0f);
  for (int i = 0; i < 16; ++i) probs[i] = 0.6f;
  REQUIRE(patch_verdict(probs));
  probs[15] = 0.4f;  // 15/64 < 25%
  REQUIRE_FALSE(patch_verdict(probs));
  // p exactly at the threshold does not count (strictly greater)
  std::vector<float> border(64, 0.5f);
  REQUIRE_FALSE(patch_verdict(border));

  // monotonicity: raising any probability never flips positive -> negative
  Rng rng(17);
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<float> p(64);
    for (auto& v : p) v = static_cast<float>(rng.uniform());
    const bool before = patch_verdict(p);
    std::vector<float> q = p;
    const int idx = static_cast<int>(rng.uniform_index(64));
    q[idx] = std::min(1.0f, q[idx] + static_cast<float>(rng.uniform()));
    if (before) REQUIRE(patch_verdict(q));
  }
}

TEST_CASE("labeled patch construction and annotation subsets") {
  const Cohort& cohort = micro_cohort();
  const LandmarkGrid grid = build_landmark_grid(cohort.atlas, 8, 8, 2);
  const auto patches = build_labeled_patches(cohort, grid, 10, 10, 3);
  int healthy = 0, a = 0, b = 0;
  for (const auto& p : patches) {
    if (p.label == kClassHealthy) {
      ++healthy;
      REQUIRE(cohort.lesions[p.subject].empty());
    }
    if (p.label == kClassSubtypeA) ++a;
    if (p.label == kClassSubtypeB) ++b;
  }
  REQUIRE(healthy > 0);
  REQUIRE(a > 0);
  REQUIRE(b > 0);
  REQUIRE(a <= 10);
  REQUIRE(b <= 10);

  const auto half = annotation_subset(patches, 0.5, 5);
  int a2 = 0, b2 = 0, h2 = 0;
  for (const auto& p : half) {
    if (p.label == kClassSubtypeA) ++a2;
    if (p.label == kClassSubtypeB) ++b2;
    if (p.label == kClassHealthy) ++h2;
  }
  REQUIRE(h2 == healthy);  // healthy pool untouched
  REQUIRE(a2 == a / 2);
  REQUIRE(b2 == b / 2);
}

TEST_CASE("dense detection covers the roi deterministically") {
  const Cohort& cohort = micro_cohort();
  FineTunedModel model;
  model.arch = micro_encoder(8);
  Encoder<float> enc(model.arch);
  Rng rng(19);
  enc.init_params(model.params, rng);
  model.head_w.assign(3 * 4, 0.1f);
  model.head_b = {0.2f, -0.1f, 0.05f};

  const auto det =
      dense_detect(model, cohort.volumes[1], cohort.transforms[1], 4, 0.5);
  REQUIRE(det.windows_used > 0);
  for (std::int64_t i = 0; i < cohort.volumes[1].numel(); ++i) {
    REQUIRE(det.prob_a[i] >= 0.0f);
    REQUIRE(det.prob_a[i] <= 1.0f);
    REQUIRE(det.prob_b[i] >= 0.0f);
    REQUIRE(det.prob_b[i] <= 1.0f);
  }
  const auto det2 =
      dense_detect(model, cohort.volumes[1], cohort.transforms[1], 4, 0.5);
  REQUIRE(det.prob_a == det2.prob_a);
  REQUIRE(det.mask_b == det2.mask_b);
}

TEST_CASE("fine-tuning smoke test: linear readout and full mode run end to end") {
  const Cohort& cohort = micro_cohort();
  const LandmarkGrid grid = build_landmark_grid(cohort.atlas, 8, 8, 2);
  const auto patches = build_labeled_patches(cohort, grid, 12, 12, 3);

  TrainerState init;
  init.encoder_cfg = micro_encoder(8);
  Encoder<float> enc(init.encoder_cfg);
  Rng rng(23);
  enc.init_params(init.query, rng);
  init.key = init.query.clone();

  FineTuneOptions opt;
  opt.full = false;
  const auto readout = fine_tune(init, cohort, patches, opt);
  REQUIRE(readout.head_w.size() == 3 * 4);

  opt.full = true;
  opt.steps = 10;
  opt.batch_size = 8;
  const auto full = fine_tune(init, cohort, patches, opt);
  REQUIRE(full.head_w.size() == 3 * 4);
  bool encoder_moved = false;
  for (const auto& name : full.params.names())
    if (full.params.get(name)->data != init.query.get(name)->data) encoder_moved = true;
  REQUIRE(encoder_moved);

  const auto ev = evaluate_patches(readout, cohort, patches);
  REQUIRE(ev.subtype_a.tp + ev.subtype_a.fn > 0);

  // empty class is rejected
  std::vector<LabeledPatch> no_b;
  for (const auto& p : patches)
    if (p.label != kClassSubtypeB) no_b.push_back(p);
  REQUIRE_THROWS_WITH(fine_tune(init, cohort, no_b, opt),
                      Catch::Matchers::ContainsSubstring("empty"));
}

TEST_CASE("location perturbation harness keeps subject folds disjoint") {
  const Cohort& cohort = micro_cohort();
  const LandmarkGrid grid = build_landmark_grid(cohort.atlas, 8, 8, 2);
  const auto patches = build_labeled_patches(cohort, grid, 12, 24, 3);

  TrainerState init;
  init.encoder_cfg = micro_encoder(8);
  Encoder<float> enc(init.encoder_cfg);
  Rng rng(29);
  enc.init_params(init.query, rng);
  init.key = init.query.clone();

  const auto res = location_perturbation(init, cohort, patches, 3, 7);
  REQUIRE(res.a_correct.size() == 3);
  REQUIRE(res.b_random.size() == 3);
  // W_r = 0: routing inert, correct and random locations give identical metrics
  for (int f = 0; f < 3; ++f) {
    REQUIRE_THAT(res.a_correct[f], Catch::Matchers::WithinAbs(res.a_random[f], 1e-12));
    REQUIRE_THAT(res.b_correct[f], Catch::Matchers::WithinAbs(res.b_random[f], 1e-12));
  }
  REQUIRE(res.t_a.p_one_sided >= 0.05);
}
