#include "akd/skeleton.hpp"

#include "akd/error.hpp"

#include <algorithm>
#include <cmath>
#include <queue>
#include <string>

namespace akd {

namespace {

std::string bone_label(int b) { return "bone " + std::to_string(b); }

}  // namespace

Skeleton::Skeleton(std::vector<Bone> bones) : bones_(std::move(bones)) {
  const int n = bone_count();
  if (n == 0) throw InvalidInput("skeleton has no bones");

  int roots = 0;
  std::vector<std::vector<int>> children(static_cast<std::size_t>(n));
  for (int b = 0; b < n; ++b) {
    const Bone& bone = bones_[static_cast<std::size_t>(b)];
    if (!bone.parent) {
      ++roots;
      root_ = b;
    } else {
      int p = *bone.parent;
      if (p < 0 || p >= n || p == b) throw InvalidInput(bone_label(b) + ": parent index out of range");
      children[static_cast<std::size_t>(p)].push_back(b);
      if (!bone.joint) throw InvalidInput(bone_label(b) + ": non-root bone without a joint");
    }
    if ((bone.half_extents.array() <= 0.0).any() || !bone.half_extents.allFinite())
      throw InvalidInput(bone_label(b) + ": half extents must be positive");
    if (!(bone.density > 0.0) || !std::isfinite(bone.density))
      throw InvalidInput(bone_label(b) + ": density must be positive");
    if (!bone.rest.rotation.allFinite() || !bone.rest.translation.allFinite() ||
        orthonormality_error(bone.rest.rotation) >= 1e-9 || bone.rest.rotation.determinant() < 0.0)
      throw InvalidInput(bone_label(b) + ": rest rotation is not a proper rotation");
    if (bone.joint) {
      const Joint& j = *bone.joint;
      Mat3 basis;
      for (int a = 0; a < 3; ++a) {
        if (std::abs(j.axes[static_cast<std::size_t>(a)].norm() - 1.0) >= 1e-9)
          throw InvalidInput(bone_label(b) + ": joint axis " + std::to_string(a) + " is not unit length");
        basis.col(a) = j.axes[static_cast<std::size_t>(a)];
      }
      if (std::abs(basis.determinant()) <= 1e-6)
        throw InvalidInput(bone_label(b) + ": joint axes are linearly dependent");
      if (!j.anchor.allFinite()) throw InvalidInput(bone_label(b) + ": joint anchor not finite");
      if (j.limits) {
        for (const auto& lim : *j.limits)
          if (!(lim[0] <= lim[1])) throw InvalidInput(bone_label(b) + ": joint limit min > max");
      }
    }
  }
  if (roots != 1) throw InvalidInput("skeleton must have exactly one root, found " + std::to_string(roots));

  // Breadth-first from the root; anything unreached sits on a cycle.
  std::queue<int> frontier;
  frontier.push(root_);
  while (!frontier.empty()) {
    int b = frontier.front();
    frontier.pop();
    order_.push_back(b);
    for (int c : children[static_cast<std::size_t>(b)]) frontier.push(c);
  }
  if (static_cast<int>(order_.size()) != n) throw InvalidInput("skeleton parent links contain a cycle");

  joint_of_bone_.assign(static_cast<std::size_t>(n), -1);
  for (int b = 0; b < n; ++b) {
    if (b == root_) continue;
    joint_of_bone_[static_cast<std::size_t>(b)] = static_cast<int>(bone_of_joint_.size());
    bone_of_joint_.push_back(b);
  }
}

double Skeleton::mass(int b) const {
  const Bone& bone = this->bone(b);
  return bone.density * 8.0 * bone.half_extents.prod();
}

Vec3 Skeleton::inertia_diagonal(int b) const {
  Vec3 h2 = bone(b).half_extents.cwiseProduct(bone(b).half_extents);
  double m = mass(b) / 3.0;
  return {m * (h2.y() + h2.z()), m * (h2.x() + h2.z()), m * (h2.x() + h2.y())};
}

std::array<Vec3, 8> Skeleton::corners(int b) const {
  const Vec3& h = bone(b).half_extents;
  std::array<Vec3, 8> out;
  for (int i = 0; i < 8; ++i) {
    out[static_cast<std::size_t>(i)] =
        Vec3((i & 1) ? h.x() : -h.x(), (i & 2) ? h.y() : -h.y(), (i & 4) ? h.z() : -h.z());
  }
  return out;
}

std::pair<Vec3, Vec3> Skeleton::segment(int b) const {
  const Vec3& h = bone(b).half_extents;
  Eigen::Index axis;
  h.maxCoeff(&axis);
  Vec3 d = Vec3::Zero();
  d[axis] = h[axis];
  return {-d, d};
}

void MotionClip::validate(const Skeleton& skeleton) const {
  if (!(fps > 0.0) || !std::isfinite(fps)) throw InvalidInput("motion fps must be positive");
  if (frame_count() < 2) throw InvalidInput("motion needs at least 2 frames");
  if (joint_angles.size() != root_transforms.size())
    throw InvalidInput("motion root/angle frame counts differ");
  for (int f = 0; f < frame_count(); ++f) {
    const auto& angles = joint_angles[static_cast<std::size_t>(f)];
    if (static_cast<int>(angles.size()) != skeleton.joint_count())
      throw InvalidInput("frame " + std::to_string(f) + ": expected " + std::to_string(skeleton.joint_count()) +
                         " joint angle triples, got " + std::to_string(angles.size()));
    for (const Vec3& a : angles)
      if (!a.allFinite()) throw InvalidInput("frame " + std::to_string(f) + ": non-finite joint angle");
    const RigidTransform& root = root_transforms[static_cast<std::size_t>(f)];
    if (!root.rotation.allFinite() || !root.translation.allFinite() || orthonormality_error(root.rotation) >= 1e-6)
      throw InvalidInput("frame " + std::to_string(f) + ": invalid root transform");
    auto bad = limit_violations(skeleton, angles);
    if (!bad.empty())
      throw InvalidInput("frame " + std::to_string(f) + ": joint " + std::to_string(bad.front().joint) + " axis " +
                         std::to_string(bad.front().axis) + " outside its limits");
  }
}

Mat3 joint_rotation(const Joint& joint, const Vec3& angles) {
  return axis_rotation(joint.axes[2], angles[2]) * axis_rotation(joint.axes[1], angles[1]) *
         axis_rotation(joint.axes[0], angles[0]);
}

RigidTransform joint_transform(const Joint& joint, const Vec3& angles) {
  Mat3 r = joint_rotation(joint, angles);
  return {r, joint.anchor - r * joint.anchor};
}

std::vector<LimitViolation> limit_violations(const Skeleton& skeleton, std::span<const Vec3> angles) {
  std::vector<LimitViolation> out;
  for (int j = 0; j < skeleton.joint_count() && j < static_cast<int>(angles.size()); ++j) {
    const Joint& joint = skeleton.joint(j);
    if (!joint.limits) continue;
    for (int a = 0; a < 3; ++a) {
      const auto& lim = (*joint.limits)[static_cast<std::size_t>(a)];
      double v = angles[static_cast<std::size_t>(j)][a];
      if (v < lim[0] || v > lim[1]) out.push_back({j, a, v});
    }
  }
  return out;
}

namespace {

void check_pose_shape(const Skeleton& skeleton, const RigidTransform& root, std::span<const Vec3> angles) {
  if (static_cast<int>(angles.size()) != skeleton.joint_count())
    throw InvalidInput("pose has " + std::to_string(angles.size()) + " angle triples, skeleton has " +
                       std::to_string(skeleton.joint_count()) + " joints");
  for (std::size_t j = 0; j < angles.size(); ++j)
    if (!angles[j].allFinite()) throw InvalidInput("non-finite angle at joint " + std::to_string(j));
  if (orthonormality_error(root.rotation) >= 1e-6) throw InvalidInput("root rotation is not orthonormal");
}

}  // namespace

std::vector<RigidTransform> forward_kinematics(const Skeleton& skeleton, const RigidTransform& root,
                                               std::span<const Vec3> angles, std::vector<LimitViolation>* violations) {
  check_pose_shape(skeleton, root, angles);
  if (violations) *violations = limit_violations(skeleton, angles);
  std::vector<RigidTransform> world(static_cast<std::size_t>(skeleton.bone_count()));
  for (int b : skeleton.order()) {
    const Bone& bone = skeleton.bone(b);
    if (!bone.parent) {
      world[static_cast<std::size_t>(b)] = root * bone.rest;
    } else {
      int j = skeleton.joint_of_bone(b);
      world[static_cast<std::size_t>(b)] = world[static_cast<std::size_t>(*bone.parent)] *
                                           joint_transform(*bone.joint, angles[static_cast<std::size_t>(j)]) *
                                           bone.rest;
    }
  }
  return world;
}

std::vector<RigidTransform> rest_pose(const Skeleton& skeleton) {
  std::vector<Vec3> zeros(static_cast<std::size_t>(skeleton.joint_count()), Vec3::Zero());
  return forward_kinematics(skeleton, RigidTransform::identity(), zeros);
}

FkGradient fk_adjoint(const Skeleton& skeleton, const RigidTransform& root, std::span<const Vec3> angles,
                      std::span<const TransformGrad> cotangent) {
  if (static_cast<int>(cotangent.size()) != skeleton.bone_count())
    throw InvalidInput("fk cotangent has " + std::to_string(cotangent.size()) + " entries, expected " +
                       std::to_string(skeleton.bone_count()));
  std::vector<RigidTransform> world = forward_kinematics(skeleton, root, angles);
  std::vector<TransformGrad> grad(cotangent.begin(), cotangent.end());

  FkGradient out;
  out.angles.assign(static_cast<std::size_t>(skeleton.joint_count()), Vec3::Zero());

  const auto& order = skeleton.order();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    int b = *it;
    const Bone& bone = skeleton.bone(b);
    const TransformGrad& g = grad[static_cast<std::size_t>(b)];
    if (!bone.parent) {
      // W = root ∘ rest
      out.root.rotation += g.rotation * bone.rest.rotation.transpose() + g.translation * bone.rest.translation.transpose();
      out.root.translation += g.translation;
      continue;
    }
    int p = *bone.parent;
    int j = skeleton.joint_of_bone(b);
    const Joint& joint = *bone.joint;
    const Vec3& theta = angles[static_cast<std::size_t>(j)];
    const RigidTransform& parent = world[static_cast<std::size_t>(p)];
    RigidTransform local = joint_transform(joint, theta) * bone.rest;

    // W = parent ∘ local
    TransformGrad& gp = grad[static_cast<std::size_t>(p)];
    gp.rotation += g.rotation * local.rotation.transpose() + g.translation * local.translation.transpose();
    gp.translation += g.translation;
    Mat3 g_local_r = parent.rotation.transpose() * g.rotation;
    Vec3 g_local_t = parent.rotation.transpose() * g.translation;

    // local = joint ∘ rest
    Mat3 g_joint_r = g_local_r * bone.rest.rotation.transpose() + g_local_t * bone.rest.translation.transpose();
    Vec3 g_joint_t = g_local_t;

    // joint = (R, a - R a)
    Mat3 g_r = g_joint_r - g_joint_t * joint.anchor.transpose();

    Mat3 r1 = axis_rotation(joint.axes[0], theta[0]);
    Mat3 r2 = axis_rotation(joint.axes[1], theta[1]);
    Mat3 r3 = axis_rotation(joint.axes[2], theta[2]);
    Mat3 k1 = skew(joint.axes[0]);
    Mat3 k2 = skew(joint.axes[1]);
    Mat3 k3 = skew(joint.axes[2]);
    Vec3& ga = out.angles[static_cast<std::size_t>(j)];
    ga[0] += (g_r.cwiseProduct(r3 * r2 * k1 * r1)).sum();
    ga[1] += (g_r.cwiseProduct(r3 * k2 * r2 * r1)).sum();
    ga[2] += (g_r.cwiseProduct(k3 * r3 * r2 * r1)).sum();
  }
  return out;
}

}  // namespace akd
