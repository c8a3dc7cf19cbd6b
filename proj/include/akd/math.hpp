#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cmath>

namespace akd {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Rigid transform x -> rotation * x + translation.
struct RigidTransform {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static RigidTransform identity() { return {}; }
  static RigidTransform from_translation(const Vec3& t) { return {Mat3::Identity(), t}; }

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }

  RigidTransform inverse() const {
    Mat3 rt = rotation.transpose();
    return {rt, -(rt * translation)};
  }

  /// (*this) ∘ other
  RigidTransform operator*(const RigidTransform& other) const {
    return {rotation * other.rotation, rotation * other.translation + translation};
  }
};

/// Cotangent of a rigid transform, stored as a full 3x3 matrix plus a vector.
struct TransformGrad {
  Mat3 rotation = Mat3::Zero();
  Vec3 translation = Vec3::Zero();

  TransformGrad& operator+=(const TransformGrad& o) {
    rotation += o.rotation;
    translation += o.translation;
    return *this;
  }
};

inline Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0.0, -v.z(), v.y(), v.z(), 0.0, -v.x(), -v.y(), v.x(), 0.0;
  return m;
}

/// w such that <M, skew(v)> = w·v for all v.
inline Vec3 skew_dual(const Mat3& m) {
  return {m(2, 1) - m(1, 2), m(0, 2) - m(2, 0), m(1, 0) - m(0, 1)};
}

/// Rotation by `angle` about the unit axis `axis` (Rodrigues).
inline Mat3 axis_rotation(const Vec3& axis, double angle) {
  Mat3 k = skew(axis);
  return Mat3::Identity() + std::sin(angle) * k + (1.0 - std::cos(angle)) * k * k;
}

/// Exponential map so(3) -> SO(3).
inline Mat3 exp_so3(const Vec3& w) {
  double th2 = w.squaredNorm();
  Mat3 k = skew(w);
  double a, b;
  if (th2 < 1e-12) {
    a = 1.0 - th2 / 6.0;
    b = 0.5 - th2 / 24.0;
  } else {
    double th = std::sqrt(th2);
    a = std::sin(th) / th;
    b = (1.0 - std::cos(th)) / th2;
  }
  return Mat3::Identity() + a * k + b * k * k;
}

/// Left Jacobian of the exponential map: Exp(w + dw) ≈ Exp(J_l(w) dw) Exp(w).
inline Mat3 left_jacobian_so3(const Vec3& w) {
  double th2 = w.squaredNorm();
  Mat3 k = skew(w);
  double a, b;
  if (th2 < 1e-10) {
    a = 0.5 - th2 / 24.0;
    b = 1.0 / 6.0 - th2 / 120.0;
  } else {
    double th = std::sqrt(th2);
    a = (1.0 - std::cos(th)) / th2;
    b = (th - std::sin(th)) / (th2 * th);
  }
  return Mat3::Identity() + a * k + b * k * k;
}

/// Rotation vector of a rotation matrix (inverse of exp_so3 on angles < pi).
inline Vec3 log_so3(const Mat3& r) {
  Eigen::AngleAxisd aa(r);
  return aa.axis() * aa.angle();
}

/// Cotangent of Exp(w) pulled back to w, given the matrix cotangent `g` of R = Exp(w).
inline Vec3 exp_so3_vjp(const Vec3& w, const Mat3& r, const Mat3& g) {
  return left_jacobian_so3(w).transpose() * skew_dual(g * r.transpose());
}

/// Nearest orthonormal matrix (polar factor).
inline Mat3 orthonormalize(const Mat3& m) {
  Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 u = svd.matrixU();
  Mat3 v = svd.matrixV();
  Mat3 r = u * v.transpose();
  if (r.determinant() < 0.0) {
    u.col(2) *= -1.0;
    r = u * v.transpose();
  }
  return r;
}

inline double orthonormality_error(const Mat3& r) {
  return (r.transpose() * r - Mat3::Identity()).norm();
}

}  // namespace akd
