#pragma once

#include "akd/math.hpp"

#include <array>
#include <optional>
#include <span>
#include <utility>
#include <vector>

namespace akd {

using AxisLimits = std::array<std::array<double, 2>, 3>;

/// 3-DoF compound joint. Axes and anchor live in the parent bone frame.
/// The joint rotation is R(a3,θ3)·R(a2,θ2)·R(a1,θ1): axis 1 is applied first.
struct Joint {
  std::array<Vec3, 3> axes{Vec3::UnitX(), Vec3::UnitY(), Vec3::UnitZ()};
  Vec3 anchor = Vec3::Zero();
  std::optional<AxisLimits> limits;
};

/// A rigid cuboid. The bone frame sits at the cuboid center with the cuboid
/// axis-aligned in it, so the frame origin is also the center of mass.
struct Bone {
  std::optional<int> parent;
  RigidTransform rest;  // parent frame -> this bone's rest frame (world for the root)
  Vec3 half_extents = Vec3::Constant(0.05);
  double density = 1000.0;
  std::optional<Joint> joint;
};

/// Articulation tree. Joint j drives the j-th non-root bone in index order.
class Skeleton {
 public:
  Skeleton() = default;
  /// Validates the tree and joint invariants; throws InvalidInput.
  explicit Skeleton(std::vector<Bone> bones);

  int bone_count() const { return static_cast<int>(bones_.size()); }
  int joint_count() const { return bone_count() - 1; }
  int root_index() const { return root_; }
  const Bone& bone(int b) const { return bones_[static_cast<std::size_t>(b)]; }
  const std::vector<Bone>& bones() const { return bones_; }
  /// Parents before children.
  const std::vector<int>& order() const { return order_; }
  int joint_of_bone(int b) const { return joint_of_bone_[static_cast<std::size_t>(b)]; }
  int bone_of_joint(int j) const { return bone_of_joint_[static_cast<std::size_t>(j)]; }
  const Joint& joint(int j) const { return *bones_[static_cast<std::size_t>(bone_of_joint(j))].joint; }

  double mass(int b) const;
  /// Principal moments about the center of mass, in the bone frame.
  Vec3 inertia_diagonal(int b) const;
  /// The 8 cuboid corners in the bone frame.
  std::array<Vec3, 8> corners(int b) const;
  /// Segment along the cuboid's longest axis through its center, bone frame.
  std::pair<Vec3, Vec3> segment(int b) const;

 private:
  std::vector<Bone> bones_;
  std::vector<int> order_;
  std::vector<int> joint_of_bone_;
  std::vector<int> bone_of_joint_;
  int root_ = 0;
};

/// Per-frame pose: root transform plus one angle triple per joint.
struct MotionClip {
  double fps = 8.0;
  std::vector<RigidTransform> root_transforms;
  std::vector<std::vector<Vec3>> joint_angles;  // [frame][joint]

  int frame_count() const { return static_cast<int>(root_transforms.size()); }
  /// Shape, finiteness and limit checks; throws InvalidInput.
  void validate(const Skeleton& skeleton) const;
};

struct LimitViolation {
  int joint;
  int axis;
  double angle;
};

Mat3 joint_rotation(const Joint& joint, const Vec3& angles);
/// Rotation about the joint anchor, expressed in the parent frame.
RigidTransform joint_transform(const Joint& joint, const Vec3& angles);

std::vector<LimitViolation> limit_violations(const Skeleton& skeleton, std::span<const Vec3> angles);

/// World transform of every bone. Limits are reported into `violations` when
/// given; angles are never clamped here.
std::vector<RigidTransform> forward_kinematics(const Skeleton& skeleton, const RigidTransform& root,
                                               std::span<const Vec3> angles,
                                               std::vector<LimitViolation>* violations = nullptr);

/// Bone transforms at identity root and zero angles.
std::vector<RigidTransform> rest_pose(const Skeleton& skeleton);

struct FkGradient {
  TransformGrad root;
  std::vector<Vec3> angles;
};

/// Vector-Jacobian product of forward_kinematics.
FkGradient fk_adjoint(const Skeleton& skeleton, const RigidTransform& root, std::span<const Vec3> angles,
                      std::span<const TransformGrad> cotangent);

}  // namespace akd
