#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "drascore/rng.hpp"
#include "drascore/tensor.hpp"

namespace drascore {

struct GradCheckReport {
  double max_rel_err{0.0};
  std::string worst_tensor;
  std::int64_t worst_index{-1};
  double worst_analytic{0.0};
  double worst_numeric{0.0};
  std::int64_t coords_checked{0};
  bool nonfinite_encountered{false};

  bool ok(double tol) const { return !nonfinite_encountered && max_rel_err < tol; }
};

// Central-difference check of reverse-mode gradients. `f` must rebuild the
// forward pass from the current contents of `inputs` on the given tape and
// return a scalar; it is re-evaluated under elementwise perturbations of every
// requires_grad input. With max_coords_per_tensor > 0 a deterministic random
// subset of coordinates is probed instead of all of them (composite networks
// are too large for a full sweep).
template <typename T>
GradCheckReport grad_check(
    const std::function<TensorPtr<T>(Tape<T>&)>& f,
    const std::vector<TensorPtr<T>>& inputs, double eps,
    std::int64_t max_coords_per_tensor = 0, std::uint64_t coord_seed = 0) {
  GradCheckReport rep;
  for (const auto& t : inputs) {
    t->ensure_grad();
    t->zero_grad();
  }
  Tape<T> tape;
  auto root = f(tape);
  require(root->numel() == 1, "grad_check: f must return a scalar");
  if (!std::isfinite(static_cast<double>(root->data[0]))) {
    rep.nonfinite_encountered = true;
    return rep;
  }
  tape.backward(root);

  auto eval = [&](double& value) -> bool {
    Tape<T> t2;
    auto out = f(t2);
    value = static_cast<double>(out->data[0]);
    return std::isfinite(value);
  };

  Rng coord_rng(mix_seed(coord_seed, 0x67726164ull));
  for (const auto& t : inputs) {
    if (!t->requires_grad) continue;
    const std::int64_t n = t->numel();
    std::vector<std::int64_t> coords;
    if (max_coords_per_tensor > 0 && n > max_coords_per_tensor) {
      std::vector<int> picked = coord_rng.sample_without_replacement(
          static_cast<int>(n), static_cast<int>(max_coords_per_tensor));
      coords.assign(picked.begin(), picked.end());
    } else {
      coords.resize(static_cast<std::size_t>(n));
      for (std::int64_t i = 0; i < n; ++i) coords[static_cast<std::size_t>(i)] = i;
    }
    for (std::int64_t idx : coords) {
      const T saved = t->data[idx];
      double fp = 0.0, fm = 0.0;
      t->data[idx] = saved + static_cast<T>(eps);
      bool ok_p = eval(fp);
      t->data[idx] = saved - static_cast<T>(eps);
      bool ok_m = eval(fm);
      t->data[idx] = saved;
      ++rep.coords_checked;
      if (!ok_p || !ok_m) {
        rep.nonfinite_encountered = true;
        if (rep.worst_index < 0) {
          rep.worst_tensor = t->name;
          rep.worst_index = idx;
        }
        continue;
      }
      const double numeric = (fp - fm) / (2.0 * eps);
      const double analytic = static_cast<double>(t->grad[idx]);
      const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-8});
      const double rel = std::fabs(analytic - numeric) / denom;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_tensor = t->name;
        rep.worst_index = idx;
        rep.worst_analytic = analytic;
        rep.worst_numeric = numeric;
      }
    }
  }
  return rep;
}

}  // namespace drascore
