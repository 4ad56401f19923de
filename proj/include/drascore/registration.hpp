#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <vector>

#include "drascore/affine.hpp"
#include "drascore/common.hpp"
#include "drascore/volume.hpp"

namespace drascore {

struct RegistrationConfig {
  int histogram_bins{32};
  int pyramid_levels{3};
  int max_evals_per_level{2000};
  double simplex_scale_linear{0.04};
  double simplex_scale_translation{1.5};
  double tolerance{1e-8};
  double lambda_reg{0.01};

  void validate() const {
    require(histogram_bins >= 8, "registration: histogram_bins must be >= 8, got ",
            histogram_bins);
    require(lambda_reg >= 0.0, "registration: lambda_reg must be >= 0");
    require(pyramid_levels >= 1, "registration: need at least one pyramid level");
  }
};

struct RegistrationResult {
  AffineTransform transform;
  bool converged{false};
  int evaluations{0};
  double mutual_information{0.0};
};

namespace detail {

inline int intensity_bin(double v, int bins) {
  const int b = static_cast<int>((v + 1.0) * 0.5 * bins);
  return std::clamp(b, 0, bins - 1);
}

inline double histogram_mi(const std::vector<double>& joint, int bins) {
  double total = 0.0;
  for (double v : joint) total += v;
  if (total <= 0.0) return 0.0;
  std::vector<double> pu(bins, 0.0), pv(bins, 0.0);
  for (int u = 0; u < bins; ++u)
    for (int v = 0; v < bins; ++v) {
      const double p = joint[u * bins + v] / total;
      pu[u] += p;
      pv[v] += p;
    }
  double mi = 0.0;
  for (int u = 0; u < bins; ++u)
    for (int v = 0; v < bins; ++v) {
      const double p = joint[u * bins + v] / total;
      if (p > 0.0) mi += p * std::log(p / (pu[u] * pv[v]));
    }
  return mi;
}

}  // namespace detail

// Mutual information between two same-grid volumes over the intersection of
// their roi masks dilated by 2 voxels. Joint histogram over the fixed [-1,1]
// intensity range.
inline double mutual_information(const Volume& a, const Volume& b, int bins) {
  require(a.extents == b.extents, "mutual_information: extents differ");
  require(bins >= 8, "mutual_information: bins must be >= 8, got ", bins);
  require(!a.roi_mask.empty() && !b.roi_mask.empty(),
          "mutual_information: both volumes need roi masks");
  const auto da = dilate_mask(a.roi_mask, a.extents, 2);
  const auto db = dilate_mask(b.roi_mask, b.extents, 2);
  std::vector<double> joint(static_cast<std::size_t>(bins) * bins, 0.0);
  std::int64_t used = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    if (!da[i] || !db[i]) continue;
    ++used;
    joint[detail::intensity_bin(a.intensities[i], bins) * bins +
          detail::intensity_bin(b.intensities[i], bins)] += 1.0;
  }
  require(used > 0, "mutual_information: empty evaluation region");
  return detail::histogram_mi(joint, bins);
}

namespace detail {

// One resolution level of the registration problem: fixed-voxel list with
// precomputed bins, plus the moving image and its dilated mask.
struct RegLevel {
  const Volume* moving;
  std::vector<std::uint8_t> moving_dilated;
  std::vector<Vec3> fixed_points;
  std::vector<int> fixed_bins;
  std::array<std::int64_t, 3> extents;
  int bins;
};

inline RegLevel make_level(const Volume& moving, const Volume& fixed, int bins) {
  RegLevel lvl;
  lvl.moving = &moving;
  lvl.extents = fixed.extents;
  lvl.bins = bins;
  lvl.moving_dilated = dilate_mask(moving.roi_mask, moving.extents, 2);
  const auto fixed_dilated = dilate_mask(fixed.roi_mask, fixed.extents, 2);
  for (std::int64_t z = 0; z < fixed.extents[0]; ++z)
    for (std::int64_t y = 0; y < fixed.extents[1]; ++y)
      for (std::int64_t x = 0; x < fixed.extents[2]; ++x) {
        const std::int64_t i = fixed.index(z, y, x);
        if (!fixed_dilated[i]) continue;
        lvl.fixed_points.push_back({static_cast<double>(z), static_cast<double>(y),
                                    static_cast<double>(x)});
        lvl.fixed_bins.push_back(intensity_bin(fixed.intensities[i], bins));
      }
  return lvl;
}

// Negated regularized MI for a 12-parameter candidate (9 linear row-major +
// 3 translation, subject->atlas).
inline double reg_objective(const RegLevel& lvl, const std::array<double, 12>& theta,
                            double lambda_reg) {
  Mat3 lin;
  for (int i = 0; i < 9; ++i) lin[i] = theta[i];
  const Vec3 t{theta[9], theta[10], theta[11]};
  const double det = mat_det(lin);
  if (det < 0.35 || det > 2.8) return 1e9 + std::fabs(det);  // off the sane manifold
  const Mat3 inv = mat_inverse(lin);
  const Volume& mov = *lvl.moving;
  std::vector<double> joint(static_cast<std::size_t>(lvl.bins) * lvl.bins, 0.0);
  std::int64_t used = 0;
  for (std::size_t i = 0; i < lvl.fixed_points.size(); ++i) {
    const Vec3 p = mat_apply(inv, lvl.fixed_points[i] - t);
    const std::int64_t rz = std::llround(p[0]), ry = std::llround(p[1]),
                       rx = std::llround(p[2]);
    if (rz < 0 || rz >= lvl.extents[0] || ry < 0 || ry >= lvl.extents[1] || rx < 0 ||
        rx >= lvl.extents[2])
      continue;
    if (!lvl.moving_dilated[mov.index(rz, ry, rx)]) continue;
    ++used;
    const double mv = sample_trilinear(mov, p);
    joint[static_cast<std::size_t>(lvl.fixed_bins[i]) * lvl.bins +
          intensity_bin(mv, lvl.bins)] += 1.0;
  }
  if (used < static_cast<std::int64_t>(lvl.fixed_points.size() / 8)) return 1e8;
  double reg = 0.0;
  const Mat3 eye = mat_identity();
  for (int i = 0; i < 9; ++i) reg += (lin[i] - eye[i]) * (lin[i] - eye[i]);
  return -(histogram_mi(joint, lvl.bins) - lambda_reg * reg);
}

struct NelderMeadResult {
  std::array<double, 12> best;
  double value;
  int evaluations;
  bool converged;
};

inline NelderMeadResult nelder_mead(
    const std::function<double(const std::array<double, 12>&)>& f,
    const std::array<double, 12>& x0, const std::array<double, 12>& step, int max_evals,
    double tolerance) {
  constexpr int n = 12;
  std::vector<std::array<double, 12>> simplex(n + 1, x0);
  for (int i = 0; i < n; ++i) simplex[i + 1][i] += step[i];
  std::vector<double> fv(n + 1);
  int evals = 0;
  for (int i = 0; i <= n; ++i) fv[i] = (++evals, f(simplex[i]));
  bool converged = false;
  while (evals < max_evals) {
    std::vector<int> order(n + 1);
    for (int i = 0; i <= n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](int a, int b) { return fv[a] < fv[b]; });
    {
      std::vector<std::array<double, 12>> s2(n + 1);
      std::vector<double> f2(n + 1);
      for (int i = 0; i <= n; ++i) {
        s2[i] = simplex[order[i]];
        f2[i] = fv[order[i]];
      }
      simplex = std::move(s2);
      fv = std::move(f2);
    }
    if (fv[n] - fv[0] < tolerance) {
      converged = true;
      break;
    }
    std::array<double, 12> centroid{};
    for (int i = 0; i < n; ++i)
      for (int d = 0; d < n; ++d) centroid[d] += simplex[i][d] / n;
    auto blend = [&](double coef) {
      std::array<double, 12> p;
      for (int d = 0; d < n; ++d)
        p[d] = centroid[d] + coef * (simplex[n][d] - centroid[d]);
      return p;
    };
    const auto refl = blend(-1.0);
    const double fr = (++evals, f(refl));
    if (fr < fv[0]) {
      const auto exp_pt = blend(-2.0);
      const double fe = (++evals, f(exp_pt));
      if (fe < fr) {
        simplex[n] = exp_pt;
        fv[n] = fe;
      } else {
        simplex[n] = refl;
        fv[n] = fr;
      }
    } else if (fr < fv[n - 1]) {
      simplex[n] = refl;
      fv[n] = fr;
    } else {
      const bool outside = fr < fv[n];
      const auto con = blend(outside ? -0.5 : 0.5);
      const double fc = (++evals, f(con));
      if (fc < std::min(fr, fv[n])) {
        simplex[n] = con;
        fv[n] = fc;
      } else {
        for (int i = 1; i <= n; ++i) {
          for (int d = 0; d < n; ++d)
            simplex[i][d] = simplex[0][d] + 0.5 * (simplex[i][d] - simplex[0][d]);
          fv[i] = (++evals, f(simplex[i]));
          if (evals >= max_evals) break;
        }
      }
    }
  }
  int best = 0;
  for (int i = 1; i <= n; ++i)
    if (fv[i] < fv[best]) best = i;
  return {simplex[best], fv[best], evals, converged};
}

}  // namespace detail

// Derivative-free affine registration of `moving` onto `fixed`: maximizes
// masked MI minus lambda*||linear - I||_F^2 with Nelder-Mead over the 12
// parameters, coarse to fine over a 2x pyramid. Deterministic.
inline RegistrationResult register_affine(const Volume& moving, const Volume& fixed,
                                          const RegistrationConfig& cfg) {
  cfg.validate();
  require(moving.extents == fixed.extents, "register_affine: extents differ");
  require(std::fabs(moving.spacing - fixed.spacing) < 1e-12,
          "register_affine: spacing differs");

  // build pyramid, coarsest first
  std::vector<Volume> mov_pyr{moving}, fix_pyr{fixed};
  for (int l = 1; l < cfg.pyramid_levels; ++l) {
    mov_pyr.push_back(downsample2(mov_pyr.back()));
    fix_pyr.push_back(downsample2(fix_pyr.back()));
  }
  std::reverse(mov_pyr.begin(), mov_pyr.end());
  std::reverse(fix_pyr.begin(), fix_pyr.end());

  std::array<double, 12> theta{1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0};
  RegistrationResult result;
  result.converged = true;
  for (int l = 0; l < cfg.pyramid_levels; ++l) {
    const int shrink = 1 << (cfg.pyramid_levels - 1 - l);
    const int bins = std::max(8, cfg.histogram_bins / shrink);
    auto lvl = detail::make_level(mov_pyr[l], fix_pyr[l], bins);
    auto objective = [&](const std::array<double, 12>& th) {
      return detail::reg_objective(lvl, th, cfg.lambda_reg);
    };
    std::array<double, 12> step;
    for (int i = 0; i < 9; ++i) step[i] = cfg.simplex_scale_linear;
    for (int i = 9; i < 12; ++i) step[i] = cfg.simplex_scale_translation;
    const int budget_main = cfg.max_evals_per_level * 3 / 5;
    auto r1 = detail::nelder_mead(objective, theta, step, budget_main, cfg.tolerance);
    // polish restart with a tighter deterministic simplex
    for (auto& s : step) s *= 0.25;
    auto r2 = detail::nelder_mead(objective, r1.best, step,
                                  cfg.max_evals_per_level - r1.evaluations,
                                  cfg.tolerance);
    theta = r2.value < r1.value ? r2.best : r1.best;
    result.evaluations += r1.evaluations + r2.evaluations;
    if (l == cfg.pyramid_levels - 1) {
      result.converged = r1.converged || r2.converged;
      result.mutual_information = -std::min(r1.value, r2.value);
    }
    if (l + 1 < cfg.pyramid_levels) {
      // coarse voxel (z) maps to fine voxel 2z + 0.5
      Mat3 lin;
      for (int i = 0; i < 9; ++i) lin[i] = theta[i];
      const Vec3 ones{1.0, 1.0, 1.0};
      const Vec3 lin1 = mat_apply(lin, ones);
      for (int i = 0; i < 3; ++i)
        theta[9 + i] = 2.0 * theta[9 + i] + 0.5 * (ones[i] - lin1[i]);
    }
  }
  if (!result.converged)
    log_info("register_affine: optimizer hit the evaluation budget; returning best-so-far");

  Mat3 lin;
  for (int i = 0; i < 9; ++i) lin[i] = theta[i];
  const double det = mat_det(lin);
  require(det >= 0.5 && det <= 2.0, "register_affine: recovered det ", det,
          " violates [0.5, 2.0]");
  result.transform = AffineTransform(lin, {theta[9], theta[10], theta[11]});
  return result;
}

}  // namespace drascore
