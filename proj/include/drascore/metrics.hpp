#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "drascore/common.hpp"

namespace drascore {

inline double mean_of(const std::vector<double>& v) {
  require(!v.empty(), "mean_of: empty vector");
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline double sd_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

// Coefficient of determination against the mean of the evaluation targets.
inline double r2_score(const std::vector<double>& truth, const std::vector<double>& pred) {
  require(truth.size() == pred.size() && !truth.empty(), "r2_score: size mismatch");
  const double m = mean_of(truth);
  double ss_res = 0.0, ss_tot = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    ss_res += (truth[i] - pred[i]) * (truth[i] - pred[i]);
    ss_tot += (truth[i] - m) * (truth[i] - m);
  }
  if (ss_tot == 0.0) return ss_res == 0.0 ? 1.0 : 0.0;
  return 1.0 - ss_res / ss_tot;
}

inline double accuracy(const std::vector<int>& truth, const std::vector<int>& pred) {
  require(truth.size() == pred.size() && !truth.empty(), "accuracy: size mismatch");
  std::int64_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hits += truth[i] == pred[i];
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

// Fraction of ordinal predictions within one level of the truth.
inline double one_off_accuracy(const std::vector<int>& truth,
                               const std::vector<int>& pred) {
  require(truth.size() == pred.size() && !truth.empty(), "one_off: size mismatch");
  std::int64_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i)
    hits += std::abs(truth[i] - pred[i]) <= 1;
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

struct BinaryScores {
  double precision{0.0};
  double recall{0.0};
  double f1{0.0};
  std::int64_t tp{0}, fp{0}, fn{0}, tn{0};
};

inline BinaryScores binary_scores(const std::vector<bool>& truth,
                                  const std::vector<bool>& pred) {
  require(truth.size() == pred.size() && !truth.empty(), "binary_scores: size mismatch");
  BinaryScores s;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] && pred[i]) ++s.tp;
    else if (!truth[i] && pred[i]) ++s.fp;
    else if (truth[i] && !pred[i]) ++s.fn;
    else ++s.tn;
  }
  s.precision = s.tp + s.fp > 0 ? static_cast<double>(s.tp) / (s.tp + s.fp) : 0.0;
  s.recall = s.tp + s.fn > 0 ? static_cast<double>(s.tp) / (s.tp + s.fn) : 0.0;
  s.f1 = s.precision + s.recall > 0
             ? 2.0 * s.precision * s.recall / (s.precision + s.recall)
             : 0.0;
  return s;
}

inline double dice_coefficient(const std::vector<std::uint8_t>& a,
                               const std::vector<std::uint8_t>& b) {
  require(a.size() == b.size(), "dice: size mismatch");
  std::int64_t inter = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool va = a[i] != 0, vb = b[i] != 0;
    inter += va && vb;
    na += va;
    nb += vb;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

// --------------------------------------------------------------------------
// one-sided Welch two-sample t-test
// --------------------------------------------------------------------------

namespace detail {

// regularized incomplete beta function via the standard continued fraction
inline double betacf(double a, double b, double x) {
  constexpr int kMaxIter = 200;
  constexpr double kEps = 3e-14, kFpMin = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0, d = 1.0 - qab * x / qap;
  if (std::fabs(d) < kFpMin) d = kFpMin;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < kEps) break;
  }
  return h;
}

inline double ibeta(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double ln_beta = std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b);
  const double front = std::exp(a * std::log(x) + b * std::log(1.0 - x) - ln_beta);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * betacf(a, b, x) / a;
  return 1.0 - front * betacf(b, a, 1.0 - x) / b;
}

}  // namespace detail

// P(T_df > t) for Student's t.
inline double t_sf(double t, double df) {
  require(df > 0.0, "t_sf: non-positive degrees of freedom");
  const double x = df / (df + t * t);
  const double tail = 0.5 * detail::ibeta(0.5 * df, 0.5, x);
  return t >= 0.0 ? tail : 1.0 - tail;
}

struct TTestResult {
  double t{0.0};
  double df{0.0};
  double p_one_sided{1.0};  // H1: mean(a) > mean(b)
};

inline TTestResult welch_t_test(const std::vector<double>& a,
                                const std::vector<double>& b) {
  require(a.size() >= 2 && b.size() >= 2, "t-test: need at least 2 samples per group");
  const double ma = mean_of(a), mb = mean_of(b);
  const double va = sd_of(a) * sd_of(a), vb = sd_of(b) * sd_of(b);
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  const double se2 = va / na + vb / nb;
  TTestResult r;
  if (se2 <= 0.0) {
    r.t = ma > mb ? 1e9 : (ma < mb ? -1e9 : 0.0);
    r.df = na + nb - 2.0;
    r.p_one_sided = ma > mb ? 0.0 : 1.0;
    return r;
  }
  r.t = (ma - mb) / std::sqrt(se2);
  r.df = se2 * se2 /
         (va * va / (na * na * (na - 1.0)) + vb * vb / (nb * nb * (nb - 1.0)));
  r.p_one_sided = t_sf(r.t, r.df);
  return r;
}

}  // namespace drascore
