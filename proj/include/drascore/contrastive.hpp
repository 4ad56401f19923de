#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "drascore/affine.hpp"
#include "drascore/common.hpp"
#include "drascore/rng.hpp"
#include "drascore/tensor.hpp"

namespace drascore {

// --------------------------------------------------------------------------
// patch augmentation
// --------------------------------------------------------------------------

struct AugmentationConfig {
  double rotation_deg{10.0};
  double translation_voxels{2.0};
  double scale_min{0.9};
  double scale_max{1.1};
  double noise_sigma{0.05};
  double gamma_min{0.8};
  double gamma_max{1.25};
  double apply_prob{0.8};

  void validate() const {
    require(gamma_min > 0.0 && gamma_max >= gamma_min, "augment: bad gamma range");
    require(scale_min > 0.0 && scale_max >= scale_min, "augment: bad scale range");
    require(apply_prob >= 0.0 && apply_prob <= 1.0, "augment: bad apply probability");
  }
};

namespace detail {

template <typename T>
double patch_trilinear(const std::vector<T>& p, std::int64_t d, const Vec3& q) {
  const std::int64_t z0 = static_cast<std::int64_t>(std::floor(q[0]));
  const std::int64_t y0 = static_cast<std::int64_t>(std::floor(q[1]));
  const std::int64_t x0 = static_cast<std::int64_t>(std::floor(q[2]));
  const double fz = q[0] - z0, fy = q[1] - y0, fx = q[2] - x0;
  double acc = 0.0;
  for (int dz = 0; dz < 2; ++dz)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        const double w =
            (dz ? fz : 1.0 - fz) * (dy ? fy : 1.0 - fy) * (dx ? fx : 1.0 - fx);
        if (w == 0.0) continue;
        const std::int64_t zz = z0 + dz, yy = y0 + dy, xx = x0 + dx;
        const double val = (zz >= 0 && zz < d && yy >= 0 && yy < d && xx >= 0 && xx < d)
                               ? static_cast<double>(p[(zz * d + yy) * d + xx])
                               : -1.0;
        acc += w * val;
      }
  return acc;
}

}  // namespace detail

// Random view of a d^3 patch: one resampling composing rotation, translation
// and scale (applied in that order), then additive Gaussian noise, then the
// contrast remap x -> sign(x)|x|^gamma. Output clamped to [-1,1].
// Deterministic in the seed.
template <typename T>
std::vector<T> augment(const std::vector<T>& patch, std::int64_t d, std::uint64_t seed,
                       const AugmentationConfig& cfg) {
  cfg.validate();
  require(static_cast<std::int64_t>(patch.size()) == d * d * d,
          "augment: patch size mismatch");
  Rng rng(mix_seed(seed, 0xA06ull));
  const bool do_rot = rng.bernoulli(cfg.apply_prob);
  const bool do_trans = rng.bernoulli(cfg.apply_prob);
  const bool do_scale = rng.bernoulli(cfg.apply_prob);
  const bool do_noise = rng.bernoulli(cfg.apply_prob);
  const bool do_contrast = rng.bernoulli(cfg.apply_prob);

  const double rot = cfg.rotation_deg * M_PI / 180.0;
  const double az = do_rot ? rng.uniform(-rot, rot) : 0.0;
  const double ay = do_rot ? rng.uniform(-rot, rot) : 0.0;
  const double ax = do_rot ? rng.uniform(-rot, rot) : 0.0;
  Vec3 t{0, 0, 0};
  if (do_trans)
    t = {rng.uniform(-cfg.translation_voxels, cfg.translation_voxels),
         rng.uniform(-cfg.translation_voxels, cfg.translation_voxels),
         rng.uniform(-cfg.translation_voxels, cfg.translation_voxels)};
  const double s = do_scale ? rng.uniform(cfg.scale_min, cfg.scale_max) : 1.0;
  // gamma symmetric about 1 on the log scale
  const double gamma =
      do_contrast ? std::exp(rng.uniform(std::log(cfg.gamma_min), std::log(cfg.gamma_max)))
                  : 1.0;

  std::vector<T> out(patch.size());
  const bool identity_resample = !do_rot && !do_trans && !do_scale;
  if (identity_resample) {
    out = patch;
  } else {
    const double cz = std::cos(az), sz = std::sin(az);
    const double cy = std::cos(ay), sy = std::sin(ay);
    const double cx = std::cos(ax), sx = std::sin(ax);
    const Mat3 r = mat_mul(Mat3{1, 0, 0, 0, cz, -sz, 0, sz, cz},
                           mat_mul(Mat3{cy, 0, sy, 0, 1, 0, -sy, 0, cy},
                                   Mat3{cx, -sx, 0, sx, cx, 0, 0, 0, 1}));
    const Mat3 rinv = mat_inverse(r);
    const Vec3 c{0.5 * (d - 1), 0.5 * (d - 1), 0.5 * (d - 1)};
    std::size_t i = 0;
    for (std::int64_t z = 0; z < d; ++z)
      for (std::int64_t y = 0; y < d; ++y)
        for (std::int64_t x = 0; x < d; ++x, ++i) {
          const Vec3 u{static_cast<double>(z), static_cast<double>(y),
                       static_cast<double>(x)};
          // rotate, then translate, then scale about the patch center:
          // source = R^{-1}((u - c)/s - t) + c
          const Vec3 src = mat_apply(rinv, (1.0 / s) * (u - c) - t) + c;
          out[i] = static_cast<T>(detail::patch_trilinear(patch, d, src));
        }
  }
  if (do_noise && cfg.noise_sigma > 0.0)
    for (auto& v : out) v = static_cast<T>(v + rng.normal(0.0, cfg.noise_sigma));
  if (gamma != 1.0)
    for (auto& v : out) {
      const double a = static_cast<double>(v);
      v = static_cast<T>((a < 0 ? -1.0 : 1.0) * std::pow(std::fabs(a), gamma));
    }
  for (auto& v : out) v = std::clamp(v, T(-1), T(1));
  return out;
}

// --------------------------------------------------------------------------
// per-landmark conditional memory bank
// --------------------------------------------------------------------------

// J independent FIFO ring buffers of unit-norm key embeddings. Each slot
// carries the enqueueing subject and step so negatives can honor the
// different-patient rule and provenance asserts.
class MemoryBank {
 public:
  MemoryBank(int num_landmarks, int capacity, int embed_dim)
      : J_(num_landmarks), K_(capacity), E_(embed_dim) {
    require(J_ >= 1 && K_ >= 1 && E_ >= 1, "memory bank: bad dimensions");
    slots_.assign(static_cast<std::size_t>(J_) * K_ * E_, 0.0f);
    subject_.assign(static_cast<std::size_t>(J_) * K_, -1);
    step_.assign(static_cast<std::size_t>(J_) * K_, -1);
    cursor_.assign(J_, 0);
    fill_.assign(J_, 0);
  }

  int landmarks() const { return J_; }
  int capacity() const { return K_; }
  int embed_dim() const { return E_; }
  int fill_count(int j) const { return fill_[check_j(j)]; }
  int cursor(int j) const { return cursor_[check_j(j)]; }

  void enqueue(int j, const float* vec, int subject, std::int64_t step) {
    check_j(j);
    double n = 0.0;
    for (int e = 0; e < E_; ++e) n += static_cast<double>(vec[e]) * vec[e];
    require(std::fabs(std::sqrt(n) - 1.0) < 1e-3,
            "memory bank: embedding for landmark ", j, " is not unit-norm (", std::sqrt(n),
            ")");
    const int slot = cursor_[j];
    std::copy_n(vec, E_, slots_.begin() + slot_offset(j, slot));
    subject_[j * K_ + slot] = subject;
    step_[j * K_ + slot] = step;
    cursor_[j] = (slot + 1) % K_;
    fill_[j] = std::min(fill_[j] + 1, K_);
  }

  // k distinct slots drawn uniformly from the filled region of queue j,
  // deterministic in the seed. Slots enqueued by `exclude_subject` are not
  // eligible (pass -1 to disable).
  struct Draw {
    std::vector<float> vectors;    // k * E
    std::vector<int> subjects;     // provenance
    std::vector<std::int64_t> steps;
  };
  Draw sample(int j, int k, std::uint64_t seed, int exclude_subject = -1) const {
    check_j(j);
    require(fill_[j] > 0, "memory bank: queue ", j,
            " is empty; warm-fill before sampling");
    std::vector<int> eligible;
    for (int s = 0; s < fill_[j]; ++s)
      if (exclude_subject < 0 || subject_[j * K_ + s] != exclude_subject)
        eligible.push_back(s);
    require(static_cast<int>(eligible.size()) >= k, "memory bank: queue ", j, " has ",
            eligible.size(), " eligible slots, need ", k);
    Rng rng(mix_seed(seed, 0xBA9Cull, static_cast<std::uint64_t>(j)));
    const auto pick =
        rng.sample_without_replacement(static_cast<int>(eligible.size()), k);
    Draw d;
    d.vectors.resize(static_cast<std::size_t>(k) * E_);
    for (int i = 0; i < k; ++i) {
      const int slot = eligible[pick[i]];
      std::copy_n(slots_.begin() + slot_offset(j, slot), E_,
                  d.vectors.begin() + static_cast<std::size_t>(i) * E_);
      d.subjects.push_back(subject_[j * K_ + slot]);
      d.steps.push_back(step_[j * K_ + slot]);
    }
    return d;
  }

  // serialization access
  const std::vector<float>& slots() const { return slots_; }
  const std::vector<int>& subjects() const { return subject_; }
  const std::vector<std::int64_t>& steps() const { return step_; }
  const std::vector<int>& cursors() const { return cursor_; }
  const std::vector<int>& fills() const { return fill_; }
  void restore(std::vector<float> slots, std::vector<int> subjects,
               std::vector<std::int64_t> steps, std::vector<int> cursors,
               std::vector<int> fills) {
    require(slots.size() == slots_.size() && subjects.size() == subject_.size() &&
                steps.size() == step_.size() &&
                cursors.size() == cursor_.size() && fills.size() == fill_.size(),
            "memory bank: restore size mismatch");
    slots_ = std::move(slots);
    subject_ = std::move(subjects);
    step_ = std::move(steps);
    cursor_ = std::move(cursors);
    fill_ = std::move(fills);
  }

 private:
  int check_j(int j) const {
    require(j >= 0 && j < J_, "memory bank: landmark index ", j, " out of range [0,", J_,
            ")");
    return j;
  }
  std::size_t slot_offset(int j, int slot) const {
    return (static_cast<std::size_t>(j) * K_ + slot) * E_;
  }

  int J_, K_, E_;
  std::vector<float> slots_;
  std::vector<int> subject_;
  std::vector<std::int64_t> step_;
  std::vector<int> cursor_;
  std::vector<int> fill_;
};

// --------------------------------------------------------------------------
// contrastive losses
// --------------------------------------------------------------------------

// InfoNCE over one positive and K- negatives per row, mean over the batch:
//   -log( exp(q.k+/tau) / (exp(q.k+/tau) + sum exp(q.k-/tau)) )
// computed as LSE(all) - positive via shift-stable log-sum-exp. Gradients
// flow only through q; keys and negatives are constants.
template <typename T>
TensorPtr<T> local_loss(Tape<T>* tape, const TensorPtr<T>& q, const TensorPtr<T>& k_plus,
                        const TensorPtr<T>& negatives, double tau) {
  require(tau > 0.0, "local_loss: temperature must be positive");
  require(q->rank() == 2 && q->shape == k_plus->shape,
          "local_loss: q and k+ must both be [B,E], got ", shape_str(q->shape), " vs ",
          shape_str(k_plus->shape));
  const T inv_tau = static_cast<T>(1.0 / tau);
  auto pos = scale(tape, rowwise_dot(tape, q, k_plus), inv_tau);  // [B]
  if (negatives->numel() == 0) return scalar_tensor<T>(T(0));
  require(negatives->rank() == 3 && negatives->dim(0) == q->dim(0) &&
              negatives->dim(2) == q->dim(1),
          "local_loss: negatives must be [B,K,E] matching q, got ",
          shape_str(negatives->shape));
  auto negl = scale(tape, batched_matvec(tape, negatives, q), inv_tau);  // [B,K]
  auto all = concat_cols(
      tape, {reshape(tape, pos, {pos->dim(0), 1}), negl});               // [B,1+K]
  auto lse = log_sum_exp(tape, all);                                     // [B]
  return mean_all(tape, sub(tape, lse, pos));
}

// Neighboring InfoNCE: the positive logits are the l neighbor embeddings
// against k+, the negative logits pair every neighbor with the shared
// negative set:
//   -log( sum_l exp(r_l.k+/tau) / (sum_l exp(r_l.k+/tau)
//         + sum_l sum_k exp(r_l.k-/tau)) )
template <typename T>
TensorPtr<T> neighbor_loss(Tape<T>* tape, const std::vector<TensorPtr<T>>& neighbors,
                           const TensorPtr<T>& k_plus, const TensorPtr<T>& negatives,
                           double tau) {
  require(!neighbors.empty(), "neighbor_loss: undefined for zero neighbors");
  require(tau > 0.0, "neighbor_loss: temperature must be positive");
  const T inv_tau = static_cast<T>(1.0 / tau);
  std::vector<TensorPtr<T>> pos_cols, neg_cols;
  for (const auto& r : neighbors) {
    require(r->shape == k_plus->shape, "neighbor_loss: neighbor embedding shape ",
            shape_str(r->shape), " does not match k+ ", shape_str(k_plus->shape));
    auto pos = scale(tape, rowwise_dot(tape, r, k_plus), inv_tau);
    pos_cols.push_back(reshape(tape, pos, {pos->dim(0), 1}));
    if (negatives->numel() > 0)
      neg_cols.push_back(scale(tape, batched_matvec(tape, negatives, r), inv_tau));
  }
  auto pos_mat = concat_cols(tape, pos_cols);  // [B,l]
  auto lse_pos = log_sum_exp(tape, pos_mat);   // [B]
  if (neg_cols.empty()) return scalar_tensor<T>(T(0));
  std::vector<TensorPtr<T>> all_cols = pos_cols;
  all_cols.insert(all_cols.end(), neg_cols.begin(), neg_cols.end());
  auto lse_all = log_sum_exp(tape, concat_cols(tape, all_cols));  // [B]
  return mean_all(tape, sub(tape, lse_all, lse_pos));
}

// Overall per-location loss: unweighted sum of the two terms.
template <typename T>
TensorPtr<T> combined_loss(Tape<T>* tape, const TensorPtr<T>& local,
                           const TensorPtr<T>& neighbor) {
  require(local->numel() == 1 && neighbor->numel() == 1,
          "combined_loss: inputs must be scalars");
  check_finite(local, "combined_loss local term");
  check_finite(neighbor, "combined_loss neighbor term");
  return add(tape, local, neighbor);
}

}  // namespace drascore
