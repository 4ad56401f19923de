#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "drascore/common.hpp"
#include "drascore/metrics.hpp"
#include "drascore/rng.hpp"

namespace drascore {

// --------------------------------------------------------------------------
// linear models on frozen features
// --------------------------------------------------------------------------

// Ridge regression by the normal equations with a trace-scaled penalty:
// lambda = lambda_scale * trace(X'X)/p. Features and targets are centered
// internally; the intercept is recovered.
struct RidgeModel {
  std::vector<double> beta;
  double intercept{0.0};

  double predict(const std::vector<double>& x) const {
    double y = intercept;
    for (std::size_t i = 0; i < beta.size(); ++i) y += beta[i] * x[i];
    return y;
  }
};

inline RidgeModel ridge_fit(const std::vector<std::vector<double>>& X,
                            const std::vector<double>& y,
                            double lambda_scale = 1e-3) {
  const std::size_t n = X.size();
  require(n >= 2 && n == y.size(), "ridge: need >= 2 samples");
  const std::size_t p = X[0].size();
  std::vector<double> xm(p, 0.0);
  double ym = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < p; ++j) xm[j] += X[i][j];
    ym += y[i];
  }
  for (auto& v : xm) v /= static_cast<double>(n);
  ym /= static_cast<double>(n);

  std::vector<double> xtx(p * p, 0.0), xty(p, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < p; ++j) {
      const double xj = X[i][j] - xm[j];
      xty[j] += xj * (y[i] - ym);
      for (std::size_t k = j; k < p; ++k) xtx[j * p + k] += xj * (X[i][k] - xm[k]);
    }
  for (std::size_t j = 0; j < p; ++j)
    for (std::size_t k = 0; k < j; ++k) xtx[j * p + k] = xtx[k * p + j];
  double trace = 0.0;
  for (std::size_t j = 0; j < p; ++j) trace += xtx[j * p + j];
  const double lambda = lambda_scale * trace / static_cast<double>(p) + 1e-12;
  for (std::size_t j = 0; j < p; ++j) xtx[j * p + j] += lambda;

  // Gaussian elimination with partial pivoting
  std::vector<double> a = xtx, b = xty;
  std::vector<std::size_t> piv(p);
  for (std::size_t j = 0; j < p; ++j) piv[j] = j;
  for (std::size_t col = 0; col < p; ++col) {
    std::size_t best = col;
    for (std::size_t r = col + 1; r < p; ++r)
      if (std::fabs(a[r * p + col]) > std::fabs(a[best * p + col])) best = r;
    if (best != col) {
      for (std::size_t k = 0; k < p; ++k) std::swap(a[col * p + k], a[best * p + k]);
      std::swap(b[col], b[best]);
    }
    const double pivot = a[col * p + col];
    require(std::fabs(pivot) > 1e-14, "ridge: singular system");
    for (std::size_t r = col + 1; r < p; ++r) {
      const double f = a[r * p + col] / pivot;
      if (f == 0.0) continue;
      for (std::size_t k = col; k < p; ++k) a[r * p + k] -= f * a[col * p + k];
      b[r] -= f * b[col];
    }
  }
  RidgeModel m;
  m.beta.assign(p, 0.0);
  for (std::size_t col = p; col-- > 0;) {
    double s = b[col];
    for (std::size_t k = col + 1; k < p; ++k) s -= a[col * p + k] * m.beta[k];
    m.beta[col] = s / a[col * p + col];
  }
  m.intercept = ym;
  for (std::size_t j = 0; j < p; ++j) m.intercept -= m.beta[j] * xm[j];
  return m;
}

// Multinomial logistic regression by full-batch gradient descent with an
// adaptive step, run to gradient-norm < 1e-6 or 10k iterations. Features are
// standardized internally using training statistics; constant columns are
// dropped with a warning.
struct LogisticModel {
  int classes{0};
  std::vector<double> weights;  // classes x p (raw feature space)
  std::vector<double> bias;     // classes

  std::vector<double> logits(const std::vector<double>& x) const {
    std::vector<double> out(classes, 0.0);
    const std::size_t p = x.size();
    for (int c = 0; c < classes; ++c) {
      double s = bias[c];
      for (std::size_t j = 0; j < p; ++j) s += weights[c * p + j] * x[j];
      out[c] = s;
    }
    return out;
  }

  int predict(const std::vector<double>& x) const {
    const auto l = logits(x);
    return static_cast<int>(std::max_element(l.begin(), l.end()) - l.begin());
  }
};

inline LogisticModel logistic_fit(const std::vector<std::vector<double>>& X,
                                  const std::vector<int>& y, int classes,
                                  double l2 = 1e-3, int max_iters = 10000,
                                  double grad_tol = 1e-6) {
  const std::size_t n = X.size();
  require(n >= 2 && n == y.size(), "logistic: need >= 2 samples");
  require(classes >= 2, "logistic: need >= 2 classes");
  const std::size_t p = X[0].size();

  std::vector<double> mu(p, 0.0), sigma(p, 0.0);
  for (const auto& row : X)
    for (std::size_t j = 0; j < p; ++j) mu[j] += row[j];
  for (auto& v : mu) v /= static_cast<double>(n);
  for (const auto& row : X)
    for (std::size_t j = 0; j < p; ++j)
      sigma[j] += (row[j] - mu[j]) * (row[j] - mu[j]);
  std::vector<bool> keep(p, true);
  for (std::size_t j = 0; j < p; ++j) {
    sigma[j] = std::sqrt(sigma[j] / static_cast<double>(n));
    if (sigma[j] < 1e-12) {
      keep[j] = false;
      log_info("logistic_fit: dropping constant feature column ", j);
    }
  }
  std::vector<std::size_t> cols;
  for (std::size_t j = 0; j < p; ++j)
    if (keep[j]) cols.push_back(j);
  const std::size_t q = cols.size();
  require(q >= 1, "logistic: all feature columns are constant");

  std::vector<double> Z(n * q);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < q; ++j)
      Z[i * q + j] = (X[i][cols[j]] - mu[cols[j]]) / sigma[cols[j]];

  std::vector<double> w(classes * q, 0.0), b(classes, 0.0);
  std::vector<double> gw(classes * q), gb(classes);
  double lr = 1.0;
  double prev_loss = 1e300;
  for (int iter = 0; iter < max_iters; ++iter) {
    std::fill(gw.begin(), gw.end(), 0.0);
    std::fill(gb.begin(), gb.end(), 0.0);
    double loss = 0.0;
    std::vector<double> logit(classes), prob(classes);
    for (std::size_t i = 0; i < n; ++i) {
      double m = -1e300;
      for (int c = 0; c < classes; ++c) {
        double s = b[c];
        for (std::size_t j = 0; j < q; ++j) s += w[c * q + j] * Z[i * q + j];
        logit[c] = s;
        m = std::max(m, s);
      }
      double denom = 0.0;
      for (int c = 0; c < classes; ++c) denom += std::exp(logit[c] - m);
      loss -= logit[y[i]] - m - std::log(denom);
      for (int c = 0; c < classes; ++c) {
        const double g = std::exp(logit[c] - m) / denom - (y[i] == c ? 1.0 : 0.0);
        gb[c] += g;
        for (std::size_t j = 0; j < q; ++j) gw[c * q + j] += g * Z[i * q + j];
      }
    }
    loss /= static_cast<double>(n);
    double gnorm2 = 0.0;
    for (int c = 0; c < classes; ++c) {
      gb[c] /= static_cast<double>(n);
      gnorm2 += gb[c] * gb[c];
      for (std::size_t j = 0; j < q; ++j) {
        gw[c * q + j] = gw[c * q + j] / static_cast<double>(n) + l2 * w[c * q + j];
        loss += 0.5 * l2 * w[c * q + j] * w[c * q + j] / static_cast<double>(classes);
        gnorm2 += gw[c * q + j] * gw[c * q + j];
      }
    }
    if (std::sqrt(gnorm2) < grad_tol) break;
    if (loss > prev_loss) lr *= 0.5;
    else lr = std::min(lr * 1.05, 50.0);
    prev_loss = loss;
    for (int c = 0; c < classes; ++c) {
      b[c] -= lr * gb[c];
      for (std::size_t j = 0; j < q; ++j) w[c * q + j] -= lr * gw[c * q + j];
    }
  }

  // fold the standardization back into raw-feature weights
  LogisticModel model;
  model.classes = classes;
  model.weights.assign(static_cast<std::size_t>(classes) * p, 0.0);
  model.bias.assign(classes, 0.0);
  for (int c = 0; c < classes; ++c) {
    double shift = b[c];
    for (std::size_t j = 0; j < q; ++j) {
      const double wj = w[c * q + j] / sigma[cols[j]];
      model.weights[c * p + cols[j]] = wj;
      shift -= wj * mu[cols[j]];
    }
    model.bias[c] = shift;
  }
  return model;
}

// --------------------------------------------------------------------------
// k-fold probing
// --------------------------------------------------------------------------

// Disjoint fold assignment over n subjects; when `labels` is given and some
// training fold would miss a class, reassign stratified (per-class
// round-robin over a shuffled order).
inline std::vector<int> make_folds(int n, int folds, std::uint64_t seed,
                                   const std::vector<int>* labels = nullptr) {
  require(folds >= 2 && n >= folds, "make_folds: need folds >= 2 and n >= folds");
  std::vector<int> idx(n);
  for (int i = 0; i < n; ++i) idx[i] = i;
  Rng rng(mix_seed(seed, 0xF01Dull));
  rng.shuffle(idx);
  std::vector<int> fold(n);
  for (int i = 0; i < n; ++i) fold[idx[i]] = i % folds;
  if (labels) {
    auto train_has_all = [&] {
      const std::set<int> all(labels->begin(), labels->end());
      for (int f = 0; f < folds; ++f) {
        std::set<int> seen;
        for (int i = 0; i < n; ++i)
          if (fold[i] != f) seen.insert((*labels)[i]);
        if (seen != all) return false;
      }
      return true;
    };
    if (!train_has_all()) {
      log_info("make_folds: class missing from a training fold; stratified refold");
      std::vector<std::vector<int>> by_class;
      const std::set<int> all(labels->begin(), labels->end());
      for (int c : all) {
        std::vector<int> members;
        for (int i : idx)
          if ((*labels)[i] == c) members.push_back(i);
        by_class.push_back(std::move(members));
      }
      int counter = 0;
      for (const auto& members : by_class)
        for (int i : members) fold[i] = counter++ % folds;
    }
  }
  return fold;
}

struct ProbeResult {
  std::string task;
  std::vector<std::string> metric_names;
  std::vector<std::vector<double>> fold_values;  // [fold][metric]
  std::vector<int> fold_assignment;
  std::uint64_t seed{0};

  double mean(int metric) const {
    std::vector<double> v;
    for (const auto& f : fold_values) v.push_back(f[metric]);
    return mean_of(v);
  }
  double sd(int metric) const {
    std::vector<double> v;
    for (const auto& f : fold_values) v.push_back(f[metric]);
    return sd_of(v);
  }
  double mean(const std::string& name) const { return mean(metric_index(name)); }
  double sd(const std::string& name) const { return sd(metric_index(name)); }
  int metric_index(const std::string& name) const {
    for (std::size_t i = 0; i < metric_names.size(); ++i)
      if (metric_names[i] == name) return static_cast<int>(i);
    fail("probe result: unknown metric ", name);
  }
};

enum class ProbeTask { kContinuous, kOrdinal, kBinary };

// Linear readout on frozen features: ridge for continuous targets,
// multinomial logistic for categorical ones, scored on held-out folds.
inline ProbeResult linear_probe(const std::vector<std::vector<double>>& features,
                                const std::vector<double>& targets, ProbeTask task,
                                const std::string& name, int folds = 5,
                                std::uint64_t seed = 1) {
  const int n = static_cast<int>(features.size());
  require(n >= 2 * folds, "linear_probe: need at least ", 2 * folds, " samples, got ", n);
  ProbeResult result;
  result.task = name;
  result.seed = seed;

  std::vector<int> int_targets(n, 0);
  int classes = 0;
  if (task != ProbeTask::kContinuous) {
    for (int i = 0; i < n; ++i) {
      int_targets[i] = static_cast<int>(std::lround(targets[i]));
      classes = std::max(classes, int_targets[i] + 1);
    }
  }
  result.fold_assignment = make_folds(
      n, folds, seed, task == ProbeTask::kContinuous ? nullptr : &int_targets);

  for (int f = 0; f < folds; ++f) {
    std::vector<std::vector<double>> Xtr, Xte;
    std::vector<double> ytr;
    std::vector<int> ctr, cte;
    std::vector<double> yte;
    for (int i = 0; i < n; ++i) {
      if (result.fold_assignment[i] == f) {
        Xte.push_back(features[i]);
        yte.push_back(targets[i]);
        cte.push_back(int_targets[i]);
      } else {
        Xtr.push_back(features[i]);
        ytr.push_back(targets[i]);
        ctr.push_back(int_targets[i]);
      }
    }
    if (task == ProbeTask::kContinuous) {
      const RidgeModel m = ridge_fit(Xtr, ytr);
      std::vector<double> pred;
      for (const auto& x : Xte) pred.push_back(m.predict(x));
      result.metric_names = {"r2"};
      result.fold_values.push_back({r2_score(yte, pred)});
    } else if (task == ProbeTask::kOrdinal) {
      const LogisticModel m = logistic_fit(Xtr, ctr, classes);
      std::vector<int> pred;
      for (const auto& x : Xte) pred.push_back(m.predict(x));
      result.metric_names = {"accuracy", "one_off"};
      result.fold_values.push_back(
          {accuracy(cte, pred), one_off_accuracy(cte, pred)});
    } else {
      const LogisticModel m = logistic_fit(Xtr, ctr, 2);
      std::vector<bool> truth, pred;
      for (std::size_t i = 0; i < Xte.size(); ++i) {
        truth.push_back(cte[i] == 1);
        pred.push_back(m.predict(Xte[i]) == 1);
      }
      const BinaryScores s = binary_scores(truth, pred);
      std::vector<int> acc_pred, acc_true;
      for (std::size_t i = 0; i < truth.size(); ++i) {
        acc_true.push_back(truth[i]);
        acc_pred.push_back(pred[i]);
      }
      result.metric_names = {"f1", "precision", "recall", "accuracy"};
      result.fold_values.push_back(
          {s.f1, s.precision, s.recall, accuracy(acc_true, acc_pred)});
    }
  }
  return result;
}

}  // namespace drascore
