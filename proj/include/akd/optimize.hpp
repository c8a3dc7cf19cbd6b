#pragma once

#include "akd/guidance.hpp"
#include "akd/simulate.hpp"
#include "akd/skeleton.hpp"

#include <json.hpp>

#include <Eigen/Core>

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace akd {

/// Adam moments for one parameter matrix.
struct AdamState {
  Eigen::MatrixXd m, v;
  long step = 0;
};

struct AdamSettings {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// One Adam update with a step size per column. `x` is left untouched and
/// false returned when the update would make any entry non-finite.
bool adam_update(Eigen::MatrixXd& x, const Eigen::MatrixXd& grad, AdamState& state, const Eigen::RowVectorXd& lr,
                 const AdamSettings& settings = {});

/// Constant-velocity clip along +x: root x = v·i/fps, identity root
/// rotations, zero joint angles. F ≥ 2.
MotionClip init_motion(const Skeleton& skeleton, int frames, double speed, double fps);

struct DistillConfig {
  int iterations = 10000;
  double t_start = 0.02;
  double t_end_initial = 0.98;
  double t_end_final = 0.5;
  int t_anneal_iterations = 5000;
  double cfg_scale = 100.0;
  std::string prompt;
  LossWeights weights;
  double lr_translation = 1e-2;  // m
  double lr_rotation = 1e-2;     // rad, root exp-map increment
  double lr_angles = 1e-2;       // rad
  double speed = 0.0;            // m/s
  int frames = 13;
  double fps = 8.0;
  int width = 64, height = 64;
  int chunk = 0;                 // render-chain recompute chunk, 0 = all frames
  bool follow = true;            // follow camera (detached from the gradient)
  int follow_window = 1;
  std::uint64_t seed = 0;
  int max_retries = 3;           // guidance failures per iteration
  double grad_clip = 0.0;        // Θ-gradient norm bound, <= 0 disables

  /// Throws InvalidInput.
  void validate() const;
  /// Linear from t_end_initial to t_end_final over t_anneal_iterations, then constant.
  double t_end(int iteration) const;
  /// Diffusion time drawn for an iteration, uniform in [t_start, t_end(iteration)].
  double sample_t(int iteration) const;
  /// Noise seed sent with an iteration's guidance query.
  std::uint64_t noise_seed(int iteration) const;
};

struct DistillMetrics {
  int iter = 0;
  double l_smooth = 0.0;
  double l_ground = 0.0;
  double grad_norm = 0.0;
  double t = 0.0;
  int clip_events = 0;
  int retries = 0;
  bool skipped = false;

  nlohmann::json to_json() const;
};

/// Everything needed to continue a distillation bit-exactly.
struct DistillState {
  int iteration = 0;  // iterations completed
  MotionParams params;
  AdamState adam;

  nlohmann::json to_json() const;
  static DistillState from_json(const nlohmann::json& j);
};

DistillState distill_init(const Skeleton& skeleton, const DistillConfig& config);

using DistillObserver = std::function<void(const DistillMetrics&, const DistillState&)>;

/// Runs iterations until state.iteration == config.iterations. Guidance
/// failures are retried up to config.max_retries times per iteration before
/// the error propagates. Iterations whose gradient or update is non-finite
/// are skipped and reported with skipped = true.
void distill_run(const AssetBundle& asset, GuidanceProvider& provider, const DistillConfig& config,
                 const Camera& base_camera, DistillState& state, const DistillObserver& observer = {});

struct DistillResult {
  MotionClip clip;
  DistillState state;
  std::vector<DistillMetrics> metrics;
};

DistillResult distill(const AssetBundle& asset, GuidanceProvider& provider, const DistillConfig& config,
                      const Camera& base_camera);

/// Camera on the −z side looking at the rest-pose cloud, framing its bounds.
Camera default_camera(const GaussianCloud& rest_cloud, int width, int height, double vertical_fov = 0.7);

struct TrackConfig {
  int iterations = 200;
  double lambda3 = 0.2;
  double lr_targets = 1e-2;   // rad
  double lr_velocity = 1e-2;  // m/s and rad/s
  bool optimize_velocity = true;
  SimConfig sim;

  void validate() const;
};

struct TrackMetrics {
  int iter = 0;
  double loss = 0.0;
  double l1 = 0.0;
  double regularizer = 0.0;
  double lambda3 = 0.0;
  double grad_norm = 0.0;
  int clip_events = 0;
  bool skipped = false;

  nlohmann::json to_json() const;
};

struct TrackResult {
  Eigen::MatrixXd targets;  // F × 3J PD targets Θ̂
  SimState initial;         // q⁰ with the optimized q̇⁰
  Rollout rollout;          // with the returned controls
  TrackingLoss loss;        // of the returned controls
  std::vector<TrackMetrics> metrics;
};

/// World bone transforms of every frame of a clip.
std::vector<std::vector<RigidTransform>> clip_transforms(const Skeleton& skeleton, const MotionClip& clip);

/// Joint angles of a clip as an F × 3J matrix.
Eigen::MatrixXd clip_angles(const MotionClip& clip);

/// Optimizes PD targets (initialized from the clip's joint angles) and the
/// initial bone velocities so the simulation follows the clip. q⁰ is the
/// clip's first frame projected onto the ground (unless the root is fixed).
/// The returned controls are the best iterate seen.
TrackResult track(const MotionClip& target, const Skeleton& skeleton, const TrackConfig& config,
                  const std::function<void(const TrackMetrics&)>& observer = {});

/// Motion clip of simulated bone transforms, one frame per rollout frame.
MotionClip rollout_clip(const Skeleton& skeleton, const Rollout& rollout, double fps);

}  // namespace akd
