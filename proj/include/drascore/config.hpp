#pragma once

#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "drascore/common.hpp"
#include "drascore/encoder.hpp"
#include "drascore/phantom.hpp"
#include "drascore/registration.hpp"
#include "drascore/trainer.hpp"

#include <json.hpp>

namespace drascore {

struct GridConfig {
  std::int64_t patch_size{16};
  std::int64_t stride{8};
  int neighbors{2};
};

struct EvalConfig {
  int folds{5};
  std::uint64_t seed{17};
  int lesion_patches_per_subtype{100};
  int healthy_patches{100};
  std::int64_t detect_step{2};
  int finetune_steps{400};
  int finetune_batch{16};
  double finetune_lr{0.005};
  std::vector<double> fractions{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
};

// One JSON document with sections phantom/registration/grid/encoder/contrast/
// train/eval; every field optional, unknown keys rejected. The fully resolved
// document is echoed into each output directory.
struct RunConfig {
  PhantomConfig phantom;
  RegistrationConfig registration;
  bool use_registered_transforms{false};
  GridConfig grid;
  EncoderConfig encoder;
  TrainConfig train;
  EvalConfig eval;
};

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed,
                       const std::string& where) {
  require(j.is_object(), "config: section '", where, "' must be an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    require(allowed.count(it.key()) > 0, "config: unknown key '", it.key(), "' in ",
            where);
}

template <typename T>
void get_to(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j) {
  detail::check_keys(j, {"phantom", "registration", "grid", "encoder", "contrast",
                         "train", "eval"}, "root");
  RunConfig cfg;
  using detail::check_keys;
  using detail::get_to;

  if (j.contains("phantom")) {
    const auto& p = j.at("phantom");
    check_keys(p, {"extents", "spacing", "seed", "num_subjects", "disease"}, "phantom");
    get_to(p, "extents", cfg.phantom.extents);
    get_to(p, "spacing", cfg.phantom.spacing);
    get_to(p, "seed", cfg.phantom.seed);
    get_to(p, "num_subjects", cfg.phantom.num_subjects);
    if (p.contains("disease")) {
      const auto& d = p.at("disease");
      check_keys(d,
                 {"max_lesions_a", "max_lesions_b", "radius_min", "radius_max",
                  "rotation_deg", "scale_min", "scale_max", "translation_voxels",
                  "texture_jitter", "intensity_offset"},
                 "phantom.disease");
      auto& dis = cfg.phantom.disease;
      get_to(d, "max_lesions_a", dis.max_lesions_a);
      get_to(d, "max_lesions_b", dis.max_lesions_b);
      get_to(d, "radius_min", dis.radius_min);
      get_to(d, "radius_max", dis.radius_max);
      get_to(d, "rotation_deg", dis.rotation_deg);
      get_to(d, "scale_min", dis.scale_min);
      get_to(d, "scale_max", dis.scale_max);
      get_to(d, "translation_voxels", dis.translation_voxels);
      get_to(d, "texture_jitter", dis.texture_jitter);
      get_to(d, "intensity_offset", dis.intensity_offset);
    }
  }
  if (j.contains("registration")) {
    const auto& r = j.at("registration");
    check_keys(r,
               {"histogram_bins", "pyramid_levels", "max_evals_per_level",
                "simplex_scale_linear", "simplex_scale_translation", "tolerance",
                "lambda_reg", "use_ground_truth"},
               "registration");
    get_to(r, "histogram_bins", cfg.registration.histogram_bins);
    get_to(r, "pyramid_levels", cfg.registration.pyramid_levels);
    get_to(r, "max_evals_per_level", cfg.registration.max_evals_per_level);
    get_to(r, "simplex_scale_linear", cfg.registration.simplex_scale_linear);
    get_to(r, "simplex_scale_translation", cfg.registration.simplex_scale_translation);
    get_to(r, "tolerance", cfg.registration.tolerance);
    get_to(r, "lambda_reg", cfg.registration.lambda_reg);
    bool use_gt = !cfg.use_registered_transforms;
    get_to(r, "use_ground_truth", use_gt);
    cfg.use_registered_transforms = !use_gt;
  }
  if (j.contains("grid")) {
    const auto& g = j.at("grid");
    check_keys(g, {"patch_size", "stride", "neighbors"}, "grid");
    get_to(g, "patch_size", cfg.grid.patch_size);
    get_to(g, "stride", cfg.grid.stride);
    get_to(g, "neighbors", cfg.grid.neighbors);
  }
  if (j.contains("encoder")) {
    const auto& e = j.at("encoder");
    check_keys(e, {"channels", "strides", "experts", "embed_dim", "patch_size",
                   "hyper_hidden", "conditioning"},
               "encoder");
    get_to(e, "channels", cfg.encoder.channels);
    get_to(e, "strides", cfg.encoder.strides);
    get_to(e, "experts", cfg.encoder.experts);
    get_to(e, "embed_dim", cfg.encoder.embed_dim);
    get_to(e, "patch_size", cfg.encoder.patch_size);
    get_to(e, "hyper_hidden", cfg.encoder.hyper_hidden);
    if (e.contains("conditioning"))
      cfg.encoder.conditioning =
          conditioning_from_string(e.at("conditioning").get<std::string>());
  }
  if (j.contains("contrast")) {
    const auto& c = j.at("contrast");
    check_keys(c,
               {"temperature", "neighbor_count", "negatives", "bank_capacity",
                "key_momentum", "augment"},
               "contrast");
    get_to(c, "temperature", cfg.train.temperature);
    get_to(c, "neighbor_count", cfg.train.neighbor_count);
    get_to(c, "negatives", cfg.train.negatives);
    get_to(c, "bank_capacity", cfg.train.bank_capacity);
    get_to(c, "key_momentum", cfg.train.key_momentum);
    if (c.contains("augment")) {
      const auto& a = c.at("augment");
      check_keys(a,
                 {"rotation_deg", "translation_voxels", "scale_min", "scale_max",
                  "noise_sigma", "gamma_min", "gamma_max", "apply_prob"},
                 "contrast.augment");
      auto& aug = cfg.train.augment;
      get_to(a, "rotation_deg", aug.rotation_deg);
      get_to(a, "translation_voxels", aug.translation_voxels);
      get_to(a, "scale_min", aug.scale_min);
      get_to(a, "scale_max", aug.scale_max);
      get_to(a, "noise_sigma", aug.noise_sigma);
      get_to(a, "gamma_min", aug.gamma_min);
      get_to(a, "gamma_max", aug.gamma_max);
      get_to(a, "apply_prob", aug.apply_prob);
    }
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    check_keys(t,
               {"steps", "batch_size", "base_lr", "sgd_momentum", "weight_decay",
                "seed"},
               "train");
    get_to(t, "steps", cfg.train.steps);
    get_to(t, "batch_size", cfg.train.batch_size);
    get_to(t, "base_lr", cfg.train.base_lr);
    get_to(t, "sgd_momentum", cfg.train.sgd_momentum);
    get_to(t, "weight_decay", cfg.train.weight_decay);
    get_to(t, "seed", cfg.train.seed);
  }
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    check_keys(e,
               {"folds", "seed", "lesion_patches_per_subtype", "healthy_patches",
                "detect_step", "finetune_steps", "finetune_batch", "finetune_lr",
                "fractions"},
               "eval");
    get_to(e, "folds", cfg.eval.folds);
    get_to(e, "seed", cfg.eval.seed);
    get_to(e, "lesion_patches_per_subtype", cfg.eval.lesion_patches_per_subtype);
    get_to(e, "healthy_patches", cfg.eval.healthy_patches);
    get_to(e, "detect_step", cfg.eval.detect_step);
    get_to(e, "finetune_steps", cfg.eval.finetune_steps);
    get_to(e, "finetune_batch", cfg.eval.finetune_batch);
    get_to(e, "finetune_lr", cfg.eval.finetune_lr);
    get_to(e, "fractions", cfg.eval.fractions);
  }
  return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
  if (path.empty()) return RunConfig{};
  std::ifstream in(path);
  require(in.good(), "config: cannot open ", path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    fail("config: invalid JSON in ", path, ": ", e.what());
  }
  return parse_run_config(j);
}

inline nlohmann::json resolved_config_json(const RunConfig& cfg) {
  const auto& dis = cfg.phantom.disease;
  const auto& aug = cfg.train.augment;
  return nlohmann::json{
      {"phantom",
       {{"extents", cfg.phantom.extents},
        {"spacing", cfg.phantom.spacing},
        {"seed", cfg.phantom.seed},
        {"num_subjects", cfg.phantom.num_subjects},
        {"disease",
         {{"max_lesions_a", dis.max_lesions_a},
          {"max_lesions_b", dis.max_lesions_b},
          {"radius_min", dis.radius_min},
          {"radius_max", dis.radius_max},
          {"rotation_deg", dis.rotation_deg},
          {"scale_min", dis.scale_min},
          {"scale_max", dis.scale_max},
          {"translation_voxels", dis.translation_voxels},
          {"texture_jitter", dis.texture_jitter},
          {"intensity_offset", dis.intensity_offset}}}}},
      {"registration",
       {{"histogram_bins", cfg.registration.histogram_bins},
        {"pyramid_levels", cfg.registration.pyramid_levels},
        {"max_evals_per_level", cfg.registration.max_evals_per_level},
        {"simplex_scale_linear", cfg.registration.simplex_scale_linear},
        {"simplex_scale_translation", cfg.registration.simplex_scale_translation},
        {"tolerance", cfg.registration.tolerance},
        {"lambda_reg", cfg.registration.lambda_reg},
        {"use_ground_truth", !cfg.use_registered_transforms}}},
      {"grid",
       {{"patch_size", cfg.grid.patch_size},
        {"stride", cfg.grid.stride},
        {"neighbors", cfg.grid.neighbors}}},
      {"encoder", cfg.encoder.to_json()},
      {"contrast",
       {{"temperature", cfg.train.temperature},
        {"neighbor_count", cfg.train.neighbor_count},
        {"negatives", cfg.train.negatives},
        {"bank_capacity", cfg.train.bank_capacity},
        {"key_momentum", cfg.train.key_momentum},
        {"augment",
         {{"rotation_deg", aug.rotation_deg},
          {"translation_voxels", aug.translation_voxels},
          {"scale_min", aug.scale_min},
          {"scale_max", aug.scale_max},
          {"noise_sigma", aug.noise_sigma},
          {"gamma_min", aug.gamma_min},
          {"gamma_max", aug.gamma_max},
          {"apply_prob", aug.apply_prob}}}}},
      {"train",
       {{"steps", cfg.train.steps},
        {"batch_size", cfg.train.batch_size},
        {"base_lr", cfg.train.base_lr},
        {"sgd_momentum", cfg.train.sgd_momentum},
        {"weight_decay", cfg.train.weight_decay},
        {"seed", cfg.train.seed}}},
      {"eval",
       {{"folds", cfg.eval.folds},
        {"seed", cfg.eval.seed},
        {"lesion_patches_per_subtype", cfg.eval.lesion_patches_per_subtype},
        {"healthy_patches", cfg.eval.healthy_patches},
        {"detect_step", cfg.eval.detect_step},
        {"finetune_steps", cfg.eval.finetune_steps},
        {"finetune_batch", cfg.eval.finetune_batch},
        {"finetune_lr", cfg.eval.finetune_lr},
        {"fractions", cfg.eval.fractions}}}};
}

}  // namespace drascore
