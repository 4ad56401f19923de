#pragma once

#include <array>
#include <cmath>

#include "drascore/common.hpp"

#include <json.hpp>

namespace drascore {

using Vec3 = std::array<double, 3>;

inline Vec3 operator+(const Vec3& a, const Vec3& b) {
  return {a[0] + b[0], a[1] + b[1], a[2] + b[2]};
}
inline Vec3 operator-(const Vec3& a, const Vec3& b) {
  return {a[0] - b[0], a[1] - b[1], a[2] - b[2]};
}
inline Vec3 operator*(double s, const Vec3& a) { return {s * a[0], s * a[1], s * a[2]}; }
inline double norm(const Vec3& a) {
  return std::sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2]);
}

using Mat3 = std::array<double, 9>;  // row-major

inline Vec3 mat_apply(const Mat3& m, const Vec3& v) {
  return {m[0] * v[0] + m[1] * v[1] + m[2] * v[2],
          m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
          m[6] * v[0] + m[7] * v[1] + m[8] * v[2]};
}

inline Mat3 mat_mul(const Mat3& a, const Mat3& b) {
  Mat3 r{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double s = 0.0;
      for (int k = 0; k < 3; ++k) s += a[i * 3 + k] * b[k * 3 + j];
      r[i * 3 + j] = s;
    }
  return r;
}

inline double mat_det(const Mat3& m) {
  return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
         m[2] * (m[3] * m[7] - m[4] * m[6]);
}

inline Mat3 mat_identity() { return {1, 0, 0, 0, 1, 0, 0, 0, 1}; }

inline Mat3 mat_inverse(const Mat3& m) {
  const double det = mat_det(m);
  require(std::fabs(det) > 1e-12, "matrix inverse: singular (det ", det, ")");
  const double id = 1.0 / det;
  Mat3 r;
  r[0] = (m[4] * m[8] - m[5] * m[7]) * id;
  r[1] = (m[2] * m[7] - m[1] * m[8]) * id;
  r[2] = (m[1] * m[5] - m[2] * m[4]) * id;
  r[3] = (m[5] * m[6] - m[3] * m[8]) * id;
  r[4] = (m[0] * m[8] - m[2] * m[6]) * id;
  r[5] = (m[2] * m[3] - m[0] * m[5]) * id;
  r[6] = (m[3] * m[7] - m[4] * m[6]) * id;
  r[7] = (m[1] * m[6] - m[0] * m[7]) * id;
  r[8] = (m[0] * m[4] - m[1] * m[3]) * id;
  return r;
}

// 12-parameter map from subject voxel coordinates to atlas voxel coordinates:
// p_atlas = linear * p_subject + translation. Coordinates are (z,y,x) voxel
// units. The inverse is cached at construction.
class AffineTransform {
 public:
  AffineTransform() : AffineTransform(mat_identity(), {0, 0, 0}) {}

  AffineTransform(const Mat3& linear, const Vec3& translation)
      : linear_(linear), translation_(translation) {
    const double det = mat_det(linear);
    require(det >= 0.5 && det <= 2.0,
            "affine: det(linear) = ", det, " outside sanity bound [0.5, 2.0]");
    inv_linear_ = mat_inverse(linear);
  }

  const Mat3& linear() const { return linear_; }
  const Vec3& translation() const { return translation_; }

  // subject -> atlas
  Vec3 apply(const Vec3& p) const { return mat_apply(linear_, p) + translation_; }

  // atlas -> subject
  Vec3 apply_inverse(const Vec3& p) const {
    return mat_apply(inv_linear_, p - translation_);
  }

  AffineTransform inverted() const {
    return AffineTransform(inv_linear_, {-1.0 * mat_apply(inv_linear_, translation_)[0],
                                         -1.0 * mat_apply(inv_linear_, translation_)[1],
                                         -1.0 * mat_apply(inv_linear_, translation_)[2]});
  }

  // this ∘ other (apply `other` first)
  AffineTransform compose(const AffineTransform& other) const {
    return AffineTransform(mat_mul(linear_, other.linear_),
                           mat_apply(linear_, other.translation_) + translation_);
  }

  nlohmann::json to_json(const std::string& provenance) const {
    return nlohmann::json{{"linear", linear_},
                          {"translation", translation_},
                          {"provenance", provenance}};
  }

  static AffineTransform from_json(const nlohmann::json& j) {
    Mat3 lin;
    Vec3 tr;
    const auto& jl = j.at("linear");
    require(jl.size() == 9, "transform json: linear must have 9 coefficients");
    for (int i = 0; i < 9; ++i) lin[i] = jl[i].get<double>();
    const auto& jt = j.at("translation");
    require(jt.size() == 3, "transform json: translation must have 3 coefficients");
    for (int i = 0; i < 3; ++i) tr[i] = jt[i].get<double>();
    return AffineTransform(lin, tr);
  }

 private:
  Mat3 linear_;
  Vec3 translation_;
  Mat3 inv_linear_;
};

}  // namespace drascore
