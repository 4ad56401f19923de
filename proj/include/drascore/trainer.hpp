#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <memory>
#include <ostream>
#include <string>
#include <unordered_map>
#include <vector>

#include "drascore/checkpoint.hpp"
#include "drascore/contrastive.hpp"
#include "drascore/encoder.hpp"
#include "drascore/landmarks.hpp"
#include "drascore/params.hpp"
#include "drascore/rng.hpp"
#include "drascore/volume.hpp"

namespace drascore {

struct TrainConfig {
  int steps{2000};
  int batch_size{8};
  double base_lr{0.01};
  double sgd_momentum{0.9};
  double weight_decay{1e-4};
  double key_momentum{0.999};  // m
  double temperature{0.2};     // tau
  int neighbor_count{2};       // l; 0 switches the neighbor term off
  int negatives{16};           // K- per loss evaluation
  int bank_capacity{64};       // K
  std::uint64_t seed{1};
  AugmentationConfig augment;

  void validate() const {
    require(steps >= 0 && batch_size >= 2, "train config: need batch_size >= 2");
    require(base_lr > 0.0 && temperature > 0.0, "train config: lr and tau must be positive");
    require(key_momentum >= 0.0 && key_momentum < 1.0,
            "train config: key momentum must lie in [0,1)");
    require(negatives >= 1 && bank_capacity >= negatives,
            "train config: need 1 <= negatives <= bank capacity");
    require(neighbor_count >= 0, "train config: negative neighbor count");
    augment.validate();
  }
};

inline double cosine_lr(std::int64_t step, std::int64_t total_steps, double base_lr) {
  require(step >= 0 && step <= total_steps, "cosine_lr: step ", step, " outside [0,",
          total_steps, "]");
  if (total_steps == 0) return base_lr;
  return 0.5 * base_lr *
         (1.0 + std::cos(M_PI * static_cast<double>(step) / total_steps));
}

template <typename T>
struct OptimizerState {
  std::unordered_map<std::string, std::vector<T>> velocity;
  std::int64_t step{0};

  void ensure(const ParamStore<T>& params) {
    for (const auto& name : params.names()) {
      auto& v = velocity[name];
      if (v.size() != params.get(name)->data.size())
        v.assign(params.get(name)->data.size(), T(0));
    }
  }
};

// One SGD-with-momentum update: g' = g + wd*theta (decay-exempt parameters
// skip wd), v <- mu*v + g', theta <- theta - lr*v. Returns false without
// touching anything when a non-finite gradient is present.
template <typename T>
bool sgd_step(ParamStore<T>& params, OptimizerState<T>& state, double lr, double mu,
              double wd) {
  state.ensure(params);
  for (const auto& name : params.names()) {
    const auto& g = params.get(name)->grad;
    for (const T v : g)
      if (!std::isfinite(static_cast<double>(v))) {
        log_info("sgd_step: non-finite gradient in ", name, "; step aborted");
        return false;
      }
  }
  for (const auto& name : params.names()) {
    auto p = params.get(name);
    p->ensure_grad();
    auto& v = state.velocity[name];
    const bool decay = params.decays(name);
    for (std::int64_t i = 0; i < p->numel(); ++i) {
      const double g = static_cast<double>(p->grad[i]) +
                       (decay ? wd * static_cast<double>(p->data[i]) : 0.0);
      v[i] = static_cast<T>(mu * static_cast<double>(v[i]) + g);
      p->data[i] = static_cast<T>(static_cast<double>(p->data[i]) - lr * v[i]);
    }
  }
  ++state.step;
  return true;
}

// --------------------------------------------------------------------------
// pre-training
// --------------------------------------------------------------------------

struct TrainData {
  std::vector<const Volume*> subjects;
  std::vector<AffineTransform> transforms;  // subject -> atlas

  int count() const { return static_cast<int>(subjects.size()); }
};

struct TrainerState {
  EncoderConfig encoder_cfg;
  ParamStore<float> query;
  ParamStore<float> key;
  OptimizerState<float> opt;
  std::unique_ptr<MemoryBank> bank;
  std::int64_t step{0};
};

struct StepLog {
  std::int64_t step;
  int landmark;
  double loss_local;
  double loss_neighbor;
  double lr;
};

namespace detail {

template <typename T>
TensorPtr<T> batch_from_patches(const std::vector<std::vector<T>>& patches,
                                std::int64_t d) {
  auto x = make_tensor<T>({static_cast<std::int64_t>(patches.size()), 1, d, d, d});
  std::size_t off = 0;
  for (const auto& p : patches) {
    std::copy(p.begin(), p.end(), x->data.begin() + off);
    off += p.size();
  }
  return x;
}

}  // namespace detail

// Fills every landmark queue with key embeddings of the unaugmented patches
// of all subjects, so step 0 already has meaningful negatives.
inline void warm_fill_bank(const Encoder<float>& enc, const ParamStore<float>& key,
                           MemoryBank& bank, const TrainData& data,
                           const LandmarkGrid& grid) {
  const std::int64_t d = grid.patch_size;
  for (int j = 0; j < grid.count(); ++j) {
    std::vector<std::vector<float>> patches;
    for (int i = 0; i < data.count(); ++i) {
      const Vec3 center = map_landmark(data.transforms[i], grid.landmarks[j]);
      patches.push_back(extract_patch<float>(*data.subjects[i], center, d));
    }
    auto x = detail::batch_from_patches(patches, d);
    auto out = enc.forward(nullptr, x, grid.normalized[j], key, true, false);
    auto emb = enc.project(nullptr, out.rep, key);
    for (int i = 0; i < data.count(); ++i)
      bank.enqueue(j, emb->data.data() + static_cast<std::size_t>(i) * emb->dim(1), i,
                   /*step=*/-1);
  }
}

// The pre-training loop. Per step: one landmark (shuffled round-robin), B
// random distinct subjects, two augmented anchor views plus one view per
// neighbor, query/key forwards, per-query negatives from the landmark's
// queue, combined loss, SGD on the query, momentum update of the key, and
// enqueue of the key embeddings.
using StepObserver =
    std::function<void(std::int64_t step, const ParamStore<float>& query,
                       const ParamStore<float>& key)>;

inline TrainerState pretrain(const TrainData& data, const LandmarkGrid& grid,
                             const EncoderConfig& encoder_cfg, const TrainConfig& cfg,
                             std::ostream* log_csv = nullptr,
                             std::vector<StepLog>* step_logs = nullptr,
                             const StepObserver* observer = nullptr) {
  cfg.validate();
  encoder_cfg.validate();
  require(data.count() >= 2, "pretrain: need at least 2 subjects (negatives come from"
                             " a different patient)");
  require(data.count() > cfg.negatives,
          "pretrain: cohort of ", data.count(), " cannot supply ", cfg.negatives,
          " different-patient negatives per query");
  require(cfg.batch_size <= data.count(), "pretrain: batch_size ", cfg.batch_size,
          " exceeds cohort size ", data.count());
  require(cfg.neighbor_count <= grid.neighbor_count,
          "pretrain: config wants ", cfg.neighbor_count, " neighbors but the grid has ",
          grid.neighbor_count);
  require(encoder_cfg.patch_size == grid.patch_size,
          "pretrain: encoder patch size ", encoder_cfg.patch_size,
          " differs from grid patch size ", grid.patch_size);

  TrainerState st;
  st.encoder_cfg = encoder_cfg;
  Encoder<float> enc(encoder_cfg);
  Rng init_rng(mix_seed(cfg.seed, 0x1217ull));
  enc.init_params(st.query, init_rng);
  st.key = st.query.clone();
  st.bank = std::make_unique<MemoryBank>(grid.count(), cfg.bank_capacity,
                                         encoder_cfg.embed_dim);
  warm_fill_bank(enc, st.key, *st.bank, data, grid);

  Rng sched_rng(mix_seed(cfg.seed, 0x5C4Dull));
  Rng subj_rng(mix_seed(cfg.seed, 0x50B1ull));
  const std::uint64_t aug_seed = mix_seed(cfg.seed, 0xA7Cull);
  const std::uint64_t neg_seed = mix_seed(cfg.seed, 0x4E6ull);
  const std::int64_t d = grid.patch_size;
  const int B = cfg.batch_size;
  const int E = encoder_cfg.embed_dim;

  if (log_csv) (*log_csv) << "step,landmark,loss_local,loss_neighbor,lr\n";

  std::vector<int> perm;
  int consecutive_aborts = 0;
  for (std::int64_t t = 0; t < cfg.steps; ++t) {
    if (t % grid.count() == 0) {
      perm.resize(grid.count());
      for (int i = 0; i < grid.count(); ++i) perm[i] = i;
      sched_rng.shuffle(perm);
    }
    const int j = perm[t % grid.count()];
    const auto chosen = subj_rng.sample_without_replacement(data.count(), B);

    std::vector<std::vector<float>> qviews, kviews;
    std::vector<std::vector<std::vector<float>>> nviews(cfg.neighbor_count);
    for (int bi = 0; bi < B; ++bi) {
      const int i = chosen[bi];
      const Vec3 center = map_landmark(data.transforms[i], grid.landmarks[j]);
      const auto patch = extract_patch<float>(*data.subjects[i], center, d);
      qviews.push_back(augment(patch, d, mix_seed(aug_seed, t, i, 0), cfg.augment));
      kviews.push_back(augment(patch, d, mix_seed(aug_seed, t, i, 1), cfg.augment));
      for (int l = 0; l < cfg.neighbor_count; ++l) {
        const int nj = grid.neighbors[j][l];
        const Vec3 ncenter = map_landmark(data.transforms[i], grid.landmarks[nj]);
        const auto npatch = extract_patch<float>(*data.subjects[i], ncenter, d);
        nviews[l].push_back(
            augment(npatch, d, mix_seed(aug_seed, t, i, 2 + l), cfg.augment));
      }
    }

    // key side, no gradients, batch statistics, running stats untouched
    auto xk = detail::batch_from_patches(kviews, d);
    auto k_out = enc.forward(nullptr, xk, grid.normalized[j], st.key, true, false);
    auto k_emb = enc.project(nullptr, k_out.rep, st.key);

    // per-query negatives from queue j, never from the same subject
    auto negs = make_tensor<float>({B, cfg.negatives, E});
    for (int bi = 0; bi < B; ++bi) {
      const auto draw = st.bank->sample(j, cfg.negatives,
                                        mix_seed(neg_seed, t, bi), chosen[bi]);
      for (const auto s : draw.steps)
        require(s < t, "pretrain: negative provenance violation at step ", t);
      std::copy(draw.vectors.begin(), draw.vectors.end(),
                negs->data.begin() + static_cast<std::size_t>(bi) * cfg.negatives * E);
    }

    Tape<float> tape;
    auto xq = detail::batch_from_patches(qviews, d);
    auto q_out = enc.forward(&tape, xq, grid.normalized[j], st.query, true, true);
    auto q_emb = enc.project(&tape, q_out.rep, st.query);
    auto loss_local = local_loss(&tape, q_emb, k_emb, negs, cfg.temperature);
    TensorPtr<float> loss_neighbor;
    if (cfg.neighbor_count > 0) {
      std::vector<TensorPtr<float>> r;
      for (int l = 0; l < cfg.neighbor_count; ++l) {
        const int nj = grid.neighbors[j][l];
        auto xn = detail::batch_from_patches(nviews[l], d);
        auto n_out = enc.forward(&tape, xn, grid.normalized[nj], st.query, true, true);
        r.push_back(enc.project(&tape, n_out.rep, st.query));
      }
      loss_neighbor = neighbor_loss(&tape, r, k_emb, negs, cfg.temperature);
    } else {
      loss_neighbor = scalar_tensor<float>(0.0f);
    }
    auto total = combined_loss(&tape, loss_local, loss_neighbor);

    const double lr = cosine_lr(t, cfg.steps, cfg.base_lr);
    bool applied = false;
    if (total->all_finite()) {
      tape.backward(total);
      applied = sgd_step(st.query, st.opt, lr, cfg.sgd_momentum, cfg.weight_decay);
    } else {
      log_info("pretrain: non-finite loss at step ", t, "; step aborted");
    }
    if (!applied) {
      if (++consecutive_aborts >= 3)
        fail("pretrain: 3 consecutive aborted steps; training unhealthy");
    } else {
      consecutive_aborts = 0;
    }
    st.query.zero_grads();
    momentum_update(st.query, st.key, cfg.key_momentum);
    for (int bi = 0; bi < B; ++bi)
      st.bank->enqueue(j, k_emb->data.data() + static_cast<std::size_t>(bi) * E,
                       chosen[bi], t);

    const StepLog entry{t, j, static_cast<double>(loss_local->data[0]),
                        static_cast<double>(loss_neighbor->data[0]), lr};
    if (log_csv) {
      char line[160];
      std::snprintf(line, sizeof(line), "%lld,%d,%.9g,%.9g,%.9g\n",
                    static_cast<long long>(entry.step), entry.landmark,
                    entry.loss_local, entry.loss_neighbor, entry.lr);
      (*log_csv) << line;
    }
    if (step_logs) step_logs->push_back(entry);
    if (observer) (*observer)(t, st.query, st.key);
    st.step = t + 1;
  }
  return st;
}

// --------------------------------------------------------------------------
// checkpoint serialization (encoder + optimizer + bank state)
// --------------------------------------------------------------------------

namespace detail {

inline void add_store_blobs(BlobFile& f, const std::string& prefix,
                            const ParamStore<float>& store) {
  for (const auto& name : store.names()) {
    auto t = store.get(name);
    f.add_f32(prefix + name, t->shape, t->data);
  }
  for (const auto& name : store.buffer_names()) {
    auto t = store.buffer(name);
    f.add_f32(prefix + name, t->shape, t->data);
  }
}

inline void read_store_blobs(const BlobFile& f, const std::string& prefix,
                             ParamStore<float>& store) {
  for (const auto& name : store.names()) {
    const Blob& b = f.find(prefix + name);
    auto t = store.get(name);
    require(b.shape == t->shape, "checkpoint: shape mismatch for ", prefix + name);
    t->data = b.f32;
  }
  for (const auto& name : store.buffer_names()) {
    const Blob& b = f.find(prefix + name);
    store.buffer(name)->data = b.f32;
  }
}

}  // namespace detail

inline void save_checkpoint(const TrainerState& st, const std::string& grid_ref,
                            const nlohmann::json& train_echo, const std::string& path) {
  BlobFile f;
  f.meta = {{"format", "drascore-ckpt-1"},
            {"version", kVersion},
            {"arch", st.encoder_cfg.to_json()},
            {"step", st.step},
            {"grid_ref", grid_ref},
            {"train", train_echo}};
  detail::add_store_blobs(f, "q.", st.query);
  detail::add_store_blobs(f, "k.", st.key);
  for (const auto& name : st.query.names()) {
    auto it = st.opt.velocity.find(name);
    if (it != st.opt.velocity.end())
      f.add_f32("opt.v." + name, st.query.get(name)->shape, it->second);
  }
  if (st.bank) {
    const auto& b = *st.bank;
    f.add_f32("bank.slots", {b.landmarks(), b.capacity(), b.embed_dim()}, b.slots());
    f.add_i32("bank.cursors", {b.landmarks()}, b.cursors());
    f.add_i32("bank.fills", {b.landmarks()}, b.fills());
    f.add_i32("bank.subjects", {b.landmarks(), b.capacity()}, b.subjects());
    f.add_i64("bank.steps", {b.landmarks(), b.capacity()}, b.steps());
  }
  f.write(path);
}

inline TrainerState load_checkpoint(const std::string& path) {
  const BlobFile f = BlobFile::read(path);
  require(f.meta.value("format", "") == "drascore-ckpt-1",
          "checkpoint: unrecognized format in ", path);
  TrainerState st;
  st.encoder_cfg = EncoderConfig::from_json(f.meta.at("arch"));
  st.step = f.meta.at("step").get<std::int64_t>();
  Encoder<float> enc(st.encoder_cfg);
  Rng dummy(0);
  enc.init_params(st.query, dummy);
  detail::read_store_blobs(f, "q.", st.query);
  st.key = st.query.clone();
  detail::read_store_blobs(f, "k.", st.key);
  for (const auto& name : st.query.names()) {
    if (f.has("opt.v." + name)) st.opt.velocity[name] = f.find("opt.v." + name).f32;
  }
  st.opt.step = st.step;
  if (f.has("bank.slots")) {
    const Blob& slots = f.find("bank.slots");
    st.bank = std::make_unique<MemoryBank>(static_cast<int>(slots.shape[0]),
                                           static_cast<int>(slots.shape[1]),
                                           static_cast<int>(slots.shape[2]));
    st.bank->restore(slots.f32, f.find("bank.subjects").i32, f.find("bank.steps").i64,
                     f.find("bank.cursors").i32, f.find("bank.fills").i32);
  }
  return st;
}

}  // namespace drascore
