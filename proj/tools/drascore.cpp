// drascore command-line tool: phantom generation, registration, landmark
// grids, contrastive pre-training, probing, dense detection, fine-tuning and
// the ablation runners, all driven by one JSON config.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "drascore/config.hpp"
#include "drascore/evaluation.hpp"
#include "drascore/gradsuite.hpp"
#include "drascore/pipeline.hpp"
#include "drascore/registration.hpp"

namespace fs = std::filesystem;
using namespace drascore;

namespace {

struct GlobalArgs {
  std::string config_path;
  std::string out_dir;
  std::int64_t seed{-1};  // overrides config seeds when >= 0
  int threads{0};
  bool deterministic{false};
};

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

void apply_globals(const GlobalArgs& g, RunConfig& cfg) {
  if (g.deterministic) {
    set_worker_threads(1);
  } else if (g.threads > 0) {
    set_worker_threads(g.threads);
  } else {
    set_worker_threads(static_cast<int>(std::thread::hardware_concurrency()));
  }
  if (g.seed >= 0) {
    cfg.phantom.seed = static_cast<std::uint64_t>(g.seed);
    cfg.train.seed = static_cast<std::uint64_t>(g.seed);
    cfg.eval.seed = static_cast<std::uint64_t>(g.seed);
  }
}

void write_provenance(const std::string& out_dir, const RunConfig& cfg) {
  fs::create_directories(out_dir);
  std::ofstream cj(fs::path(out_dir) / "resolved_config.json");
  cj << resolved_config_json(cfg).dump(1) << "\n";
  require(cj.good(), "cannot write resolved config into ", out_dir);
  std::ofstream vf(fs::path(out_dir) / "version.txt");
  vf << kVersion << "\n";
}

void require_artifact(const std::string& path, const char* producer) {
  if (!fs::exists(path))
    fail("missing upstream artifact: ", path, " (run `", producer, "` first)");
}

Cohort load_cohort_checked(const std::string& cohort_dir,
                           const std::string& transforms_dir = "") {
  const std::string manifest = (fs::path(cohort_dir) / "manifest.json").string();
  require_artifact(manifest, "generate");
  return load_cohort(load_manifest(manifest), transforms_dir);
}

// landmark mapping error between two transforms over the fixed 3x3x3 probe
// grid used for registration quality reporting
void probe_grid_error(const AffineTransform& got, const AffineTransform& truth,
                      const std::array<std::int64_t, 3>& ext, double* mean_err,
                      double* max_err) {
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
  *mean_err = sum / n;
  *max_err = worst;
}

// ---------------------------------------------------------------------------
// subcommand implementations
// ---------------------------------------------------------------------------

int cmd_generate(const GlobalArgs& g) {
  RunConfig cfg = load_run_config(g.config_path);
  apply_globals(g, cfg);
  write_provenance(g.out_dir, cfg);
  const std::string manifest = write_cohort(g.out_dir, cfg.phantom);
  log_info("generate: wrote ", manifest);
  std::cout << "generated cohort of " << cfg.phantom.num_subjects << " subjects in "
            << g.out_dir << "\n";
  return 0;
}

int cmd_register(const GlobalArgs& g, const std::string& cohort_dir) {
  RunConfig cfg = load_run_config(g.config_path);
  apply_globals(g, cfg);
  write_provenance(g.out_dir, cfg);
  const Cohort cohort = load_cohort_checked(cohort_dir);

  const int n = cohort.count();
  std::vector<RegistrationResult> results(n);
  parallel_for(n, [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t i = lo; i < hi; ++i)
      results[i] = register_affine(cohort.volumes[i], cohort.atlas, cfg.registration);
  });

  std::ofstream csv(fs::path(g.out_dir) / "registration_summary.csv");
  csv << "subject,converged,evaluations,mi,mean_landmark_error,max_landmark_error\n";
  double total_mean = 0.0;
  for (int i = 0; i < n; ++i) {
    std::ofstream tf(fs::path(g.out_dir) / transform_file_name(i));
    tf << results[i].transform.to_json("registered").dump(1) << "\n";
    double mean_err = 0.0, max_err = 0.0;
    probe_grid_error(results[i].transform, cohort.transforms[i], cohort.atlas.extents,
                     &mean_err, &max_err);
    total_mean += mean_err;
    csv << i << "," << (results[i].converged ? 1 : 0) << "," << results[i].evaluations
        << "," << fmt(results[i].mutual_information) << "," << fmt(mean_err) << ","
        << fmt(max_err) << "\n";
  }
  std::cout << "registered " << n << " subjects, mean landmark error "
            << fmt(total_mean / n) << " voxels\n";
  return 0;
}

int cmd_grid(const GlobalArgs& g, const std::string& cohort_dir) {
  RunConfig cfg = load_run_config(g.config_path);
  apply_globals(g, cfg);
  write_provenance(g.out_dir, cfg);
  const std::string atlas_path = (fs::path(cohort_dir) / "atlas.pvol").string();
  require_artifact(atlas_path, "generate");
  const Volume atlas = read_volume(atlas_path);
  const LandmarkGrid grid = build_landmark_grid(atlas, cfg.grid.patch_size,
                                                cfg.grid.stride, cfg.grid.neighbors);
  save_grid(grid, (fs::path(g.out_dir) / "grid.json").string());
  std::cout << "landmark grid with " << grid.count() << " landmarks written to "
            << g.out_dir << "/grid.json\n";
  return 0;
}

int cmd_pretrain(const GlobalArgs& g, const std::string& cohort_dir,
                 const std::string& grid_path, const std::string& transforms_dir,
                 int steps_override) {
  RunConfig cfg = load_run_config(g.config_path);
  apply_globals(g, cfg);
  if (steps_override >= 0) cfg.train.steps = steps_override;
  write_provenance(g.out_dir, cfg);
  require_artifact(grid_path, "grid");
  const LandmarkGrid grid = load_grid(grid_path);
  const Cohort cohort = load_cohort_checked(cohort_dir, transforms_dir);
  const TrainData data = cohort.train_data();

  std::ofstream log_csv(fs::path(g.out_dir) / "train_log.csv");
  EncoderConfig ecfg = cfg.encoder;
  ecfg.patch_size = grid.patch_size;
  const TrainerState st = pretrain(data, grid, ecfg, cfg.train, &log_csv);
  save_checkpoint(st, grid_path, resolved_config_json(cfg)["train"],
                  (fs::path(g.out_dir) / "checkpoint.dras").string());
  std::cout << "pre-trained " << cfg.train.steps << " steps ("
            << cohort.transform_provenance << " transforms); checkpoint in " << g.out_dir
            << "\n";
  return 0;
}

void write_probe_csvs(const std::string& out_dir, const ProbeSuite& suite,
                      const std::string& tag) {
  std::ofstream folds(fs::path(out_dir) / ("probe_folds_" + tag + ".csv"));
  std::ofstream summary(fs::path(out_dir) / ("probe_summary_" + tag + ".csv"));
  folds << "task,metric,fold,value\n";
  summary << "task,metric,mean,sd\n";
  for (const ProbeResult* r :
       {&suite.capacity, &suite.grade, &suite.burden_a, &suite.burden_b}) {
    for (std::size_t m = 0; m < r->metric_names.size(); ++m) {
      for (std::size_t f = 0; f < r->fold_values.size(); ++f)
        folds << r->task << "," << r->metric_names[m] << "," << f << ","
              << fmt(r->fold_values[f][m]) << "\n";
      summary << r->task << "," << r->metric_names[m] << ","
              << fmt(r->mean(static_cast<int>(m))) << ","
              << fmt(r->sd(static_cast<int>(m))) << "\n";
    }
  }
}

int cmd_probe(const GlobalArgs& g, const std::string& cohort_dir,
              const std::string& grid_path, const std::string& ckpt_path,
              bool random_init) {
  RunConfig cfg = load_run_config(g.config_path);
  apply_globals(g, cfg);
  write_provenance(g.out_dir, cfg);
  require_artifact(grid_path, "grid");
  require_artifact(ckpt_path, "pretrain");
  const LandmarkGrid grid = load_grid(grid_path);
  const Cohort cohort = load_cohort_checked(cohort_dir);
  TrainerState st = load_checkpoint(ckpt_path);
  if (random_init) {
    Encoder<float> enc(st.encoder_cfg);
    ParamStore<float> fresh;
    Rng rng(mix_seed(cfg.train.seed, 0x1217ull));
    enc.init_params(fresh, rng);
    st.query = std::move(fresh);
  }
  Encoder<float> enc(st.encoder_cfg);
  const auto features = cohort_image_features(cohort, grid, enc, st.query);
  const ProbeSuite suite = probe_suite(features, cohort, cfg.eval.folds, cfg.eval.seed);
  const std::string tag = random_init ? "random_init" : "checkpoint";
  write_probe_csvs(g.out_dir, suite, tag);
  std::cout << "probe (" << tag << "): capacity R2 " << fmt(suite.capacity.mean("r2"))
            << ", grade accuracy " << fmt(suite.grade.mean("accuracy")) << ", 1-off "
            << fmt(suite.grade.mean("one_off")) << "\n";
  return 0;
}

// train/test subject split shared by finetune, detect and ablate: fold 0 of
// the eval seed holds out the test subjects
std::vector<int> test_subjects(const Cohort& cohort, const EvalConfig& eval) {
  const auto folds = make_folds(cohort.count(), eval.folds, eval.seed);
  std::vector<int> test;
  for (int i = 0; i < cohort.count(); ++i)
    if (folds[i] == 0) test.push_back(i);
  return test;
}

struct PatchSplit {
  std::vector<LabeledPatch> train, test;
};

PatchSplit split_patches(const Cohort& cohort, const LandmarkGrid& grid,
                         const EvalConfig& eval) {
  const auto patches =
      build_labeled_patches(cohort, grid, eval.lesion_patches_per_subtype,
                            eval.healthy_patches, eval.seed);
  const auto folds = make_folds(cohort.count(), eval.folds, eval.seed);
  PatchSplit split;
  for (const auto& p : patches)
    (folds[p.subject] == 0 ? split.test : split.train).push_back(p);
  return split;
}

int cmd_finetune(const GlobalArgs& g, const std::string& cohort_dir,
                 const std::string& grid_path, const std::string& ckpt_path,
                 const std::string& mode, double fraction, bool from_scratch,
                 bool curve) {
  RunConfig cfg = load_run_config(g.config_path);
  apply_globals(g, cfg);
  write_provenance(g.out_dir, cfg);
  require_artifact(grid_path, "grid");
  require_artifact(ckpt_path, "pretrain");
  const LandmarkGrid grid = load_grid(grid_path);
  const Cohort cohort = load_cohort_checked(cohort_dir);
  const TrainerState st = load_checkpoint(ckpt_path);
  const PatchSplit split = split_patches(cohort, grid, cfg.eval);
  log_info("finetune: ", split.train.size(), " train / ", split.test.size(),
           " test patches");

  FineTuneOptions opt;
  opt.full = mode != "linear";
  opt.from_scratch = from_scratch;
  opt.steps = cfg.eval.finetune_steps;
  opt.batch_size = cfg.eval.finetune_batch;
  opt.lr = cfg.eval.finetune_lr;
  opt.seed = cfg.eval.seed;
  opt.augment = cfg.train.augment;

  if (curve) {
    std::ofstream csv(fs::path(g.out_dir) / "efficiency_curve.csv");
    csv << "fraction,mode,seed,f1_a,precision_a,recall_a,f1_b,precision_b,recall_b\n";
    for (double f : cfg.eval.fractions) {
      for (const bool scratch : {false, true}) {
        FineTuneOptions o = opt;
        o.full = true;
        o.from_scratch = scratch;
        const auto subset = annotation_subset(split.train, f, cfg.eval.seed);
        const auto model = fine_tune(st, cohort, subset, o);
        const auto ev = evaluate_patches(model, cohort, split.test);
        csv << fmt(f) << "," << (scratch ? "scratch" : "pretrained") << ","
            << cfg.eval.seed << "," << fmt(ev.subtype_a.f1) << ","
            << fmt(ev.subtype_a.precision) << "," << fmt(ev.subtype_a.recall) << ","
            << fmt(ev.subtype_b.f1) << "," << fmt(ev.subtype_b.precision) << ","
            << fmt(ev.subtype_b.recall) << "\n";
        csv.flush();
        log_info("efficiency: fraction ", f, scratch ? " scratch" : " pretrained",
                 " f1_a ", ev.subtype_a.f1, " f1_b ", ev.subtype_b.f1);
      }
    }
    std::cout << "efficiency curve written to " << g.out_dir
              << "/efficiency_curve.csv\n";
    return 0;
  }

  const auto subset = annotation_subset(split.train, fraction, cfg.eval.seed);
  const auto model = fine_tune(st, cohort, subset, opt);
  save_model(model, (fs::path(g.out_dir) / "model.dras").string());
  const auto ev = evaluate_patches(model, cohort, split.test);
  std::ofstream csv(fs::path(g.out_dir) / "finetune_metrics.csv");
  csv << "subtype,f1,precision,recall,train_patches,test_patches\n";
  csv << "a," << fmt(ev.subtype_a.f1) << "," << fmt(ev.subtype_a.precision) << ","
      << fmt(ev.subtype_a.recall) << "," << subset.size() << "," << split.test.size()
      << "\n";
  csv << "b," << fmt(ev.subtype_b.f1) << "," << fmt(ev.subtype_b.precision) << ","
      << fmt(ev.subtype_b.recall) << "," << subset.size() << "," << split.test.size()
      << "\n";
  std::cout << "fine-tuned (" << (opt.full ? "full" : "linear readout") << "): F1 a "
            << fmt(ev.subtype_a.f1) << ", F1 b " << fmt(ev.subtype_b.f1)
            << "; model in " << g.out_dir << "\n";
  return 0;
}

int cmd_detect(const GlobalArgs& g, const std::string& cohort_dir,
               const std::string& model_path, std::vector<int> subjects,
               std::int64_t step_override) {
  RunConfig cfg = load_run_config(g.config_path);
  apply_globals(g, cfg);
  write_provenance(g.out_dir, cfg);
  require_artifact(model_path, "finetune");
  const Cohort cohort = load_cohort_checked(cohort_dir);
  const FineTunedModel model = load_model(model_path);
  if (subjects.empty()) subjects = test_subjects(cohort, cfg.eval);
  const std::int64_t step = step_override > 0 ? step_override : cfg.eval.detect_step;

  std::ofstream csv(fs::path(g.out_dir) / "detect_summary.csv");
  csv << "subject,dice_a,dice_b,windows_used,windows_skipped,pred_voxels_a,"
         "planted_voxels_a,pred_voxels_b,planted_voxels_b\n";
  for (int i : subjects) {
    require(i >= 0 && i < cohort.count(), "detect: subject ", i, " out of range");
    const auto det = dense_detect(model, cohort.volumes[i], cohort.transforms[i], step);
    const double dice_a = dice_coefficient(det.mask_a, cohort.mask_a[i]);
    const double dice_b = dice_coefficient(det.mask_b, cohort.mask_b[i]);
    std::int64_t pa = 0, ta = 0, pb = 0, tb = 0;
    for (std::size_t v = 0; v < det.mask_a.size(); ++v) {
      pa += det.mask_a[v] != 0;
      ta += cohort.mask_a[i][v] != 0;
      pb += det.mask_b[v] != 0;
      tb += cohort.mask_b[i][v] != 0;
    }
    csv << i << "," << fmt(dice_a) << "," << fmt(dice_b) << "," << det.windows_used
        << "," << det.windows_skipped << "," << pa << "," << ta << "," << pb << ","
        << tb << "\n";
    csv.flush();
    char name[64];
    std::snprintf(name, sizeof(name), "subj_%03d_detect_a.pgm", i);
    write_detection_pgm((fs::path(g.out_dir) / name).string(), cohort.volumes[i],
                        cohort.mask_a[i], det.mask_a);
    std::snprintf(name, sizeof(name), "subj_%03d_detect_b.pgm", i);
    write_detection_pgm((fs::path(g.out_dir) / name).string(), cohort.volumes[i],
                        cohort.mask_b[i], det.mask_b);
    log_info("detect: subject ", i, " dice_a ", dice_a, " dice_b ", dice_b);
  }
  std::cout << "dense detection on " << subjects.size() << " subjects written to "
            << g.out_dir << "\n";
  return 0;
}

int cmd_ablate(const GlobalArgs& g, const std::string& cohort_dir,
               const std::string& grid_path, const std::string& table,
               const std::string& ckpt_path, int steps_override) {
  RunConfig cfg = load_run_config(g.config_path);
  apply_globals(g, cfg);
  write_provenance(g.out_dir, cfg);
  require_artifact(grid_path, "grid");
  const LandmarkGrid grid = load_grid(grid_path);
  const Cohort cohort = load_cohort_checked(cohort_dir);
  const TrainData data = cohort.train_data();
  if (steps_override >= 0) cfg.train.steps = steps_override;

  const auto run_probe = [&](const TrainerState& st) {
    Encoder<float> enc(st.encoder_cfg);
    const auto features = cohort_image_features(cohort, grid, enc, st.query);
    return probe_suite(features, cohort, cfg.eval.folds, cfg.eval.seed);
  };
  const auto emit = [&](std::ofstream& folds, std::ofstream& summary,
                        const std::string& key, const ProbeSuite& suite) {
    for (const ProbeResult* r :
         {&suite.capacity, &suite.grade, &suite.burden_a, &suite.burden_b})
      for (std::size_t m = 0; m < r->metric_names.size(); ++m) {
        for (std::size_t f = 0; f < r->fold_values.size(); ++f)
          folds << key << "," << r->task << "," << r->metric_names[m] << "," << f << ","
                << fmt(r->fold_values[f][m]) << "\n";
        summary << key << "," << r->task << "," << r->metric_names[m] << ","
                << fmt(r->mean(static_cast<int>(m))) << ","
                << fmt(r->sd(static_cast<int>(m))) << "\n";
      }
    folds.flush();
    summary.flush();
  };

  if (table == "conditioning" || table == "all") {
    std::ofstream folds(fs::path(g.out_dir) / "ablation_conditioning_folds.csv");
    std::ofstream summary(fs::path(g.out_dir) / "ablation_conditioning_summary.csv");
    folds << "variant,task,metric,fold,value\n";
    summary << "variant,task,metric,mean,sd\n";
    for (const char* variant : {"none", "concat", "hypernet", "loc_cond_conv"}) {
      try {
        EncoderConfig ecfg = cfg.encoder;
        ecfg.patch_size = grid.patch_size;
        ecfg.conditioning = conditioning_from_string(variant);
        TrainConfig tcfg = cfg.train;
        tcfg.neighbor_count = 0;  // the comparison trains with the local loss only
        const TrainerState st = pretrain(data, grid, ecfg, tcfg);
        emit(folds, summary, variant, run_probe(st));
        log_info("ablate conditioning: ", variant, " done");
      } catch (const std::exception& e) {
        summary << variant << ",absent,absent,absent,absent\n";
        summary.flush();
        log_info("ablate conditioning: ", variant, " failed: ", e.what());
      }
    }
    std::cout << "conditioning comparison written to " << g.out_dir << "\n";
  }

  if (table == "neighbors" || table == "all") {
    std::ofstream folds(fs::path(g.out_dir) / "ablation_neighbors_folds.csv");
    std::ofstream summary(fs::path(g.out_dir) / "ablation_neighbors_summary.csv");
    folds << "neighbors,task,metric,fold,value\n";
    summary << "neighbors,task,metric,mean,sd\n";
    for (int l : {0, 1, 2, 3}) {
      try {
        require(grid.neighbor_count >= l, "grid stores only ", grid.neighbor_count,
                " neighbors; rebuild the grid with neighbors >= 3");
        EncoderConfig ecfg = cfg.encoder;
        ecfg.patch_size = grid.patch_size;
        TrainConfig tcfg = cfg.train;
        tcfg.neighbor_count = l;
        const TrainerState st = pretrain(data, grid, ecfg, tcfg);
        emit(folds, summary, std::to_string(l), run_probe(st));
        log_info("ablate neighbors: l = ", l, " done");
      } catch (const std::exception& e) {
        summary << l << ",absent,absent,absent,absent\n";
        summary.flush();
        log_info("ablate neighbors: l = ", l, " failed: ", e.what());
      }
    }
    std::cout << "neighbor-count sweep written to " << g.out_dir << "\n";
  }

  if (table == "perturbation" || table == "all") {
    require_artifact(ckpt_path, "pretrain");
    const TrainerState trained = load_checkpoint(ckpt_path);
    const auto patches =
        build_labeled_patches(cohort, grid, cfg.eval.lesion_patches_per_subtype,
                              cfg.eval.healthy_patches, cfg.eval.seed);
    // W_r = 0 negative control: the untrained encoder at the same architecture
    TrainerState control;
    control.encoder_cfg = trained.encoder_cfg;
    Encoder<float> enc(control.encoder_cfg);
    Rng rng(mix_seed(cfg.train.seed, 0x1217ull));
    enc.init_params(control.query, rng);
    control.key = control.query.clone();

    std::ofstream folds(fs::path(g.out_dir) / "ablation_perturbation_folds.csv");
    std::ofstream summary(fs::path(g.out_dir) / "ablation_perturbation_summary.csv");
    folds << "model,subtype,fold,acc_correct,acc_random\n";
    summary << "model,subtype,acc_correct_mean,acc_correct_sd,acc_random_mean,"
               "acc_random_sd,t,p_one_sided\n";
    const std::vector<std::pair<std::string, const TrainerState*>> models{
        {"checkpoint", &trained}, {"wr_zero_control", &control}};
    for (const auto& [name, st] : models) {
      const auto res =
          location_perturbation(*st, cohort, patches, cfg.eval.folds, cfg.eval.seed);
      for (int f = 0; f < cfg.eval.folds; ++f) {
        folds << name << ",a," << f << "," << fmt(res.a_correct[f]) << ","
              << fmt(res.a_random[f]) << "\n";
        folds << name << ",b," << f << "," << fmt(res.b_correct[f]) << ","
              << fmt(res.b_random[f]) << "\n";
      }
      summary << name << ",a," << fmt(mean_of(res.a_correct)) << ","
              << fmt(sd_of(res.a_correct)) << "," << fmt(mean_of(res.a_random)) << ","
              << fmt(sd_of(res.a_random)) << "," << fmt(res.t_a.t) << ","
              << fmt(res.t_a.p_one_sided) << "\n";
      summary << name << ",b," << fmt(mean_of(res.b_correct)) << ","
              << fmt(sd_of(res.b_correct)) << "," << fmt(mean_of(res.b_random)) << ","
              << fmt(sd_of(res.b_random)) << "," << fmt(res.t_b.t) << ","
              << fmt(res.t_b.p_one_sided) << "\n";
    }
    std::cout << "location-perturbation study written to " << g.out_dir << "\n";
  }
  return 0;
}

int cmd_gradcheck(const GlobalArgs& g, int seeds) {
  RunConfig cfg = load_run_config(g.config_path);
  apply_globals(g, cfg);
  const auto result = run_gradient_suite(
      seeds, static_cast<int>(log_level()) >= static_cast<int>(LogLevel::kInfo)
                 ? &std::cerr
                 : nullptr);
  std::cout << "gradient suite over " << seeds << " seeds: worst relative error "
            << fmt(result.max_rel_err) << " (" << result.worst_case << ", "
            << result.coords_checked << " coordinates)\n";
  if (!result.pass()) {
    std::cout << "FAIL: tolerance 1e-4 exceeded\n";
    return 1;
  }
  std::cout << "PASS\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "drascore: anatomy-aligned contrastive pre-training on synthetic phantoms"};
  app.require_subcommand(1);
  GlobalArgs g;
  app.add_option("--config", g.config_path, "JSON run configuration");
  app.add_option("--out", g.out_dir, "output directory");
  app.add_option("--seed", g.seed, "override the phantom/train/eval seeds");
  app.add_option("--threads", g.threads, "worker thread count");
  app.add_flag("--deterministic", g.deterministic,
               "single-threaded bit-reproducible mode");

  std::string cohort_dir, grid_path, ckpt_path, model_path, transforms_dir;
  std::string mode = "full", table = "all", subjects_csv;
  double fraction = 1.0;
  bool from_scratch = false, curve = false, random_init = false;
  int steps_override = -1, gradcheck_seeds = 20;
  std::int64_t detect_step = -1;

  auto* c_gen = app.add_subcommand("generate", "generate the phantom cohort");
  auto* c_reg = app.add_subcommand("register", "affine-register subjects to the atlas");
  c_reg->add_option("--cohort", cohort_dir, "cohort directory")->required();
  auto* c_grid = app.add_subcommand("grid", "build the atlas landmark grid");
  c_grid->add_option("--cohort", cohort_dir, "cohort directory")->required();
  auto* c_pre = app.add_subcommand("pretrain", "contrastive pre-training");
  c_pre->add_option("--cohort", cohort_dir, "cohort directory")->required();
  c_pre->add_option("--grid", grid_path, "landmark grid file")->required();
  c_pre->add_option("--transforms", transforms_dir,
                    "registered transform directory (default: planted transforms)");
  c_pre->add_option("--steps", steps_override, "override train.steps");
  auto* c_probe = app.add_subcommand("probe", "linear probes on frozen features");
  c_probe->add_option("--cohort", cohort_dir, "cohort directory")->required();
  c_probe->add_option("--grid", grid_path, "landmark grid file")->required();
  c_probe->add_option("--checkpoint", ckpt_path, "pre-training checkpoint")->required();
  c_probe->add_flag("--random-init", random_init,
                    "probe a freshly initialized encoder of the same architecture");
  auto* c_fine = app.add_subcommand("finetune", "fine-tune the subtype classifier");
  c_fine->add_option("--cohort", cohort_dir, "cohort directory")->required();
  c_fine->add_option("--grid", grid_path, "landmark grid file")->required();
  c_fine->add_option("--checkpoint", ckpt_path, "pre-training checkpoint")->required();
  c_fine->add_option("--mode", mode, "full | linear")
      ->check(CLI::IsMember({"full", "linear"}));
  c_fine->add_option("--fraction", fraction, "annotation fraction in (0,1]");
  c_fine->add_flag("--from-scratch", from_scratch, "random initialization baseline");
  c_fine->add_flag("--curve", curve, "emit the annotation-efficiency curve");
  auto* c_det = app.add_subcommand("detect", "sliding-window dense detection");
  c_det->add_option("--cohort", cohort_dir, "cohort directory")->required();
  c_det->add_option("--model", model_path, "fine-tuned model")->required();
  c_det->add_option("--subjects", subjects_csv,
                    "comma-separated subject ids (default: held-out fold)");
  c_det->add_option("--step", detect_step, "sliding-window step (default from config)");
  auto* c_abl = app.add_subcommand("ablate", "ablation runners");
  c_abl->add_option("--cohort", cohort_dir, "cohort directory")->required();
  c_abl->add_option("--grid", grid_path, "landmark grid file")->required();
  c_abl->add_option("--table", table, "conditioning | neighbors | perturbation | all")
      ->check(CLI::IsMember({"conditioning", "neighbors", "perturbation", "all"}));
  c_abl->add_option("--checkpoint", ckpt_path, "trained checkpoint (perturbation table)");
  c_abl->add_option("--steps", steps_override, "override train.steps for the variants");
  auto* c_gc = app.add_subcommand("gradcheck", "run the gradient suite");
  c_gc->add_option("--seeds", gradcheck_seeds, "number of random seeds");

  CLI11_PARSE(app, argc, argv);

  try {
    for (auto* sub : {c_gen, c_reg, c_grid, c_pre, c_probe, c_fine, c_det, c_abl})
      if (sub->parsed())
        require(!g.out_dir.empty(), "--out DIR is required for this subcommand");
    if (c_gen->parsed()) return cmd_generate(g);
    if (c_reg->parsed()) return cmd_register(g, cohort_dir);
    if (c_grid->parsed()) return cmd_grid(g, cohort_dir);
    if (c_pre->parsed())
      return cmd_pretrain(g, cohort_dir, grid_path, transforms_dir, steps_override);
    if (c_probe->parsed())
      return cmd_probe(g, cohort_dir, grid_path, ckpt_path, random_init);
    if (c_fine->parsed())
      return cmd_finetune(g, cohort_dir, grid_path, ckpt_path, mode, fraction,
                          from_scratch, curve);
    if (c_det->parsed()) {
      std::vector<int> subjects;
      if (!subjects_csv.empty()) {
        std::istringstream ss(subjects_csv);
        for (std::string tok; std::getline(ss, tok, ',');)
          subjects.push_back(std::stoi(tok));
      }
      return cmd_detect(g, cohort_dir, model_path, subjects, detect_step);
    }
    if (c_abl->parsed())
      return cmd_ablate(g, cohort_dir, grid_path, table, ckpt_path, steps_override);
    if (c_gc->parsed()) return cmd_gradcheck(g, gradcheck_seeds);
  } catch (const std::exception& e) {
    nlohmann::json err{{"error", e.what()}};
    std::cerr << err.dump() << "\n";
    return 1;
  }
  return 0;
}
