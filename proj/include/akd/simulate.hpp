#pragma once

#include "akd/error.hpp"
#include "akd/math.hpp"
#include "akd/skeleton.hpp"

#include <Eigen/Core>

#include <span>
#include <vector>

namespace akd {

struct SimConfig {
  double dt = 1.0 / 2400.0;  // substep, s
  int substeps = 300;        // per frame
  Vec3 gravity{0.0, -9.81, 0.0};

  // Joint anchors: spring-damper with stiffness μ·ω² and damping 2ζμω on the
  // reduced mass μ of the two bones.
  double joint_frequency = 300.0;  // rad/s
  double joint_damping_ratio = 1.0;

  // PD joint torques: k_e·(θ̂ − θ) − k_d·θ̇ about each joint axis.
  double kp = 50.0;
  double kd = 2.0;
  /// Per-joint, per-axis multipliers on k_e and k_d; empty means all ones.
  std::vector<Vec3> axis_gain_scale;

  // Ground contact at cuboid corners, per unit bone mass.
  bool contact = true;
  double ground_height = 0.0;
  double contact_stiffness = 2e4;  // 1/s²
  double contact_damping = 150.0;  // 1/s
  double friction = 0.8;           // Coulomb μ
  double friction_damping = 100.0; // 1/s, viscous tangential force below the cone

  // Root upright torque m·(k_up·(u × ŷ) − c_up·ω_horizontal), u the root's
  // initially-up axis.
  double upright_gain = 20.0;
  double upright_damping = 4.0;

  /// Root bone held kinematically at its initial transform.
  bool fix_root = false;

  int chunk = 32;               // substeps per adjoint chunk
  double clip_threshold = 1.0;  // adjoint-state norm bound after each chunk; <= 0 or inf disables

  void validate(const Skeleton& skeleton) const;
};

struct BoneState {
  Mat3 rotation = Mat3::Identity();
  Vec3 position = Vec3::Zero();  // center of mass (= bone frame origin)
  Vec3 velocity = Vec3::Zero();
  Vec3 angular_velocity = Vec3::Zero();  // world frame
};

struct SimState {
  std::vector<BoneState> bones;
  /// Root-frame axis that the upright torque keeps pointing along +y.
  Vec3 root_up_local = Vec3::UnitY();

  std::vector<RigidTransform> transforms() const;
  /// Bones at the given transforms, at rest. root_up_local is set from the
  /// root rotation so that the current pose counts as upright.
  static SimState at_rest(const std::vector<RigidTransform>& transforms, int root);
};

struct BoneStateGrad {
  Mat3 rotation = Mat3::Zero();
  Vec3 position = Vec3::Zero();
  Vec3 velocity = Vec3::Zero();
  Vec3 angular_velocity = Vec3::Zero();
};

struct StateGrad {
  std::vector<BoneStateGrad> bones;

  explicit StateGrad(int bones = 0) : bones(static_cast<std::size_t>(bones)) {}
  double norm() const;
  void scale(double s);
  StateGrad& operator+=(const StateGrad& o);
};

/// Mass properties, anchors and gains derived from a skeleton and config.
class SimModel {
 public:
  SimModel(const Skeleton& skeleton, SimConfig config);

  const Skeleton& skeleton() const { return skeleton_; }
  const SimConfig& config() const { return config_; }
  int bone_count() const { return skeleton_.bone_count(); }
  int joint_count() const { return skeleton_.joint_count(); }
  double mass(int b) const { return mass_[static_cast<std::size_t>(b)]; }
  const Vec3& inertia(int b) const { return inertia_[static_cast<std::size_t>(b)]; }

  struct JointData {
    int parent, child;
    Vec3 anchor_parent;  // parent frame
    Vec3 anchor_child;   // child frame
    Mat3 rest_rotation;  // child rest rotation in the parent frame
    std::array<Vec3, 3> axes;
    double stiffness, damping;
    Vec3 kp, kd;         // per-axis gains
  };
  const JointData& joint(int j) const { return joints_[static_cast<std::size_t>(j)]; }

 private:
  Skeleton skeleton_;
  SimConfig config_;
  std::vector<double> mass_;
  std::vector<Vec3> inertia_;
  std::vector<JointData> joints_;
};

/// Angles θ with R(a3,θ3)·R(a2,θ2)·R(a1,θ1) = rotation, by Newton's method
/// from `guess`. Throws NumericalError if it does not converge.
Vec3 decompose_joint_rotation(const std::array<Vec3, 3>& axes, const Mat3& rotation, const Vec3& guess);
/// Columns are the body-frame rotation axes of θ1, θ2, θ3:
/// R(θ)ᵀ dR = skew(J dθ).
Mat3 joint_body_jacobian(const std::array<Vec3, 3>& axes, const Vec3& angles);

/// Current joint angles of every joint.
std::vector<Vec3> joint_angles(const SimModel& model, const SimState& state, std::span<const Vec3> guess = {});

/// World-frame PD torque of each joint, acting on the child (the parent
/// receives the negative).
std::vector<Vec3> pd_torques(const SimModel& model, const SimState& state, std::span<const Vec3> targets);

/// One semi-implicit substep with PD targets θ̂ (one triple per joint).
/// Throws NumericalError naming `step_index` if the state turns non-finite.
SimState step(const SimModel& model, const SimState& state, std::span<const Vec3> targets, long step_index = 0);

/// Vector-Jacobian product of step. Contact and friction regimes are those
/// of the forward step; renormalization is treated as the identity.
/// Target cotangents are accumulated into `target_grad`.
StateGrad step_adjoint(const SimModel& model, const SimState& state, std::span<const Vec3> targets,
                       const StateGrad& output_cotangent, std::span<Vec3> target_grad);

/// PD targets at substep s, linearly interpolated between frame rows of
/// `targets` (F × 3J).
std::vector<Vec3> substep_targets(const Eigen::MatrixXd& targets, long substep, int substeps_per_frame);

struct Rollout {
  std::vector<SimState> frames;       // state at substep i·N, i = 0..F−1
  std::vector<SimState> checkpoints;  // state at substep k·chunk
  long total_substeps = 0;
  int chunk = 1;
};

/// F frames means (F−1)·N substeps.
Rollout rollout(const SimModel& model, const SimState& initial, const Eigen::MatrixXd& targets);

struct RolloutGradient {
  Eigen::MatrixXd targets;  // F × 3J
  StateGrad initial;
  int clip_events = 0;
  std::vector<long> clip_substeps;  // first substep of each clipped chunk
  int recomputed_steps = 0;
};

/// Reverse sweep in chunks of config.chunk substeps, recomputing each chunk
/// from its checkpoint. After a chunk, the in-flight state adjoint is
/// rescaled to norm config.clip_threshold if it exceeds it.
RolloutGradient rollout_adjoint(const SimModel& model, const Rollout& rollout, const Eigen::MatrixXd& targets,
                                std::span<const StateGrad> frame_cotangents);

/// Uniform vertical shift putting the lowest cuboid corner at the ground.
SimState project_initial(const std::vector<RigidTransform>& transforms, const Skeleton& skeleton,
                         double ground_height = 0.0);

struct TrackingLoss {
  double value = 0.0;
  double l1 = 0.0;          // (1/(F−1))·Σ_i ‖q^{iN} − q̂^i‖₁
  double regularizer = 0.0; // MAE of Θ̂_{i+1} − Θ̂_i
  std::vector<StateGrad> frame_cotangents;
  Eigen::MatrixXd target_grad;  // from the regularizer term only
};

/// ‖q − q̂‖₁ sums |translation| and |rotation entry| differences over bones.
TrackingLoss tracking_loss(const Rollout& rollout, const std::vector<std::vector<RigidTransform>>& reference,
                           const Eigen::MatrixXd& targets, double lambda3);

double kinetic_energy(const SimModel& model, const SimState& state);
/// Kinetic + gravitational + joint spring energy.
double mechanical_energy(const SimModel& model, const SimState& state);
double max_penetration(const SimModel& model, const SimState& state);
double max_anchor_gap(const SimModel& model, const SimState& state);

}  // namespace akd
