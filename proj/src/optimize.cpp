#include "akd/optimize.hpp"

#include "akd/error.hpp"
#include "akd/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace akd {

using nlohmann::json;

bool adam_update(Eigen::MatrixXd& x, const Eigen::MatrixXd& grad, AdamState& state, const Eigen::RowVectorXd& lr,
                 const AdamSettings& s) {
  if (grad.rows() != x.rows() || grad.cols() != x.cols() || lr.size() != x.cols())
    throw InvalidInput("optimizer shapes do not match the parameters");
  if (!grad.allFinite()) return false;
  if (state.m.rows() != x.rows() || state.m.cols() != x.cols()) {
    state.m = Eigen::MatrixXd::Zero(x.rows(), x.cols());
    state.v = Eigen::MatrixXd::Zero(x.rows(), x.cols());
    state.step = 0;
  }
  Eigen::MatrixXd m = s.beta1 * state.m + (1.0 - s.beta1) * grad;
  Eigen::MatrixXd v = s.beta2 * state.v + (1.0 - s.beta2) * grad.cwiseProduct(grad);
  const long t = state.step + 1;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(t));
  Eigen::MatrixXd next = x;
  for (Eigen::Index c = 0; c < x.cols(); ++c)
    for (Eigen::Index r = 0; r < x.rows(); ++r)
      next(r, c) -= lr[c] * (m(r, c) / c1) / (std::sqrt(v(r, c) / c2) + s.epsilon);
  if (!next.allFinite()) return false;
  x = std::move(next);
  state.m = std::move(m);
  state.v = std::move(v);
  state.step = t;
  return true;
}

MotionClip init_motion(const Skeleton& skeleton, int frames, double speed, double fps) {
  if (frames < 2) throw InvalidInput("a motion needs at least 2 frames");
  if (!(fps > 0.0) || !std::isfinite(fps)) throw InvalidInput("fps must be positive");
  if (!std::isfinite(speed)) throw InvalidInput("speed must be finite");
  MotionClip clip;
  clip.fps = fps;
  for (int i = 0; i < frames; ++i) {
    clip.root_transforms.push_back(RigidTransform::from_translation(Vec3(speed * i / fps, 0.0, 0.0)));
    clip.joint_angles.emplace_back(static_cast<std::size_t>(skeleton.joint_count()), Vec3::Zero());
  }
  return clip;
}

// ---------------------------------------------------------------------------
// Distillation

void DistillConfig::validate() const {
  if (iterations < 1) throw InvalidInput("iterations must be >= 1");
  auto in_unit = [](double t) { return t > 0.0 && t < 1.0; };
  if (!in_unit(t_start) || !in_unit(t_end_initial) || !in_unit(t_end_final))
    throw InvalidInput("diffusion times must lie in (0, 1)");
  if (t_start > t_end_initial || t_start > t_end_final) throw InvalidInput("t_start must not exceed t_end");
  if (t_anneal_iterations < 0) throw InvalidInput("t_anneal_iterations must be >= 0");
  if (!(weights.smooth >= 0.0) || !(weights.ground >= 0.0)) throw InvalidInput("loss weights must be >= 0");
  for (double lr : {lr_translation, lr_rotation, lr_angles})
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw InvalidInput("step sizes must be finite and >= 0");
  if (frames < 3) throw InvalidInput("distillation needs at least 3 frames");
  if (!(fps > 0.0)) throw InvalidInput("fps must be positive");
  if (width < 1 || height < 1) throw InvalidInput("resolution must be positive");
  if (chunk < 0) throw InvalidInput("chunk must be >= 0");
  if (max_retries < 0) throw InvalidInput("max_retries must be >= 0");
}

double DistillConfig::t_end(int iteration) const {
  if (t_anneal_iterations == 0) return t_end_final;
  double a = std::min(static_cast<double>(iteration) / t_anneal_iterations, 1.0);
  return t_end_initial + (t_end_final - t_end_initial) * a;
}

double DistillConfig::sample_t(int iteration) const {
  SplitMix64 rng(derive_seed(seed, static_cast<std::uint64_t>(iteration), 0));
  // uniform() is in (0, 1]; 1 − u covers [0, 1).
  return t_start + (t_end(iteration) - t_start) * (1.0 - rng.uniform());
}

std::uint64_t DistillConfig::noise_seed(int iteration) const {
  return derive_seed(seed, static_cast<std::uint64_t>(iteration), 1);
}

json DistillMetrics::to_json() const {
  json j = {{"iter", iter}, {"l_smooth", l_smooth}, {"l_ground", l_ground}, {"grad_norm", grad_norm},
            {"t", t},       {"clip_events", clip_events}};
  if (retries > 0) j["retries"] = retries;
  if (skipped) j["skipped"] = true;
  return j;
}

namespace {

json matrix_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Eigen::MatrixXd matrix_from_json(const json& j, const char* what) {
  if (!j.is_array()) throw InvalidInput(std::string(what) + " must be an array of rows");
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = rows > 0 ? static_cast<Eigen::Index>(j[0].size()) : 0;
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const json& row = j[static_cast<std::size_t>(r)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols)
      throw InvalidInput(std::string(what) + " rows differ in length");
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = row[static_cast<std::size_t>(c)].get<double>();
  }
  return m;
}

}  // namespace

json DistillState::to_json() const {
  json rot = json::array();
  for (const Mat3& r : params.base_rotations) {
    json e = json::array();
    for (int i = 0; i < 9; ++i) e.push_back(r(i / 3, i % 3));
    rot.push_back(std::move(e));
  }
  return {{"iteration", iteration},
          {"fps", params.fps},
          {"theta", matrix_json(params.theta)},
          {"base_rotations", std::move(rot)},
          {"adam", {{"step", adam.step}, {"m", matrix_json(adam.m)}, {"v", matrix_json(adam.v)}}}};
}

DistillState DistillState::from_json(const json& j) {
  try {
    DistillState s;
    s.iteration = j.at("iteration").get<int>();
    s.params.fps = j.at("fps").get<double>();
    s.params.theta = matrix_from_json(j.at("theta"), "theta");
    for (const json& e : j.at("base_rotations")) {
      if (e.size() != 9) throw InvalidInput("base rotation needs 9 entries");
      Mat3 r;
      for (int i = 0; i < 9; ++i) r(i / 3, i % 3) = e[static_cast<std::size_t>(i)].get<double>();
      s.params.base_rotations.push_back(r);
    }
    const json& a = j.at("adam");
    s.adam.step = a.at("step").get<long>();
    s.adam.m = matrix_from_json(a.at("m"), "adam.m");
    s.adam.v = matrix_from_json(a.at("v"), "adam.v");
    if (static_cast<int>(s.params.base_rotations.size()) != s.params.frames())
      throw InvalidInput("checkpoint has one base rotation per frame");
    if (s.adam.step > 0 && (s.adam.m.rows() != s.params.theta.rows() || s.adam.m.cols() != s.params.theta.cols() ||
                            s.adam.v.rows() != s.adam.m.rows() || s.adam.v.cols() != s.adam.m.cols()))
      throw InvalidInput("checkpoint optimizer state does not match theta");
    if (s.iteration < 0) throw InvalidInput("checkpoint iteration must be >= 0");
    return s;
  } catch (const json::exception& e) {
    throw InvalidInput(std::string("malformed checkpoint: ") + e.what());
  }
}

DistillState distill_init(const Skeleton& skeleton, const DistillConfig& config) {
  config.validate();
  DistillState s;
  s.params = MotionParams::from_clip(init_motion(skeleton, config.frames, config.speed, config.fps));
  return s;
}

Camera default_camera(const GaussianCloud& rest_cloud, int width, int height, double fov) {
  Eigen::AlignedBox3d box = cloud_bounds(rest_cloud);
  Vec3 center = box.isEmpty() ? Vec3::Zero() : Vec3(box.center());
  double radius = box.isEmpty() ? 1.0 : std::max(0.5 * box.diagonal().norm(), 1e-3);
  double distance = 1.3 * radius / std::tan(0.5 * fov);
  Vec3 eye = center + distance * Vec3(0.0, 0.35, -1.0).normalized();
  return Camera::look_at(eye, center, Vec3::UnitY(), fov, width, height);
}

void distill_run(const AssetBundle& asset, GuidanceProvider& provider, const DistillConfig& config,
                 const Camera& base_camera, DistillState& state, const DistillObserver& observer) {
  config.validate();
  if (state.params.theta.cols() != 6 + 3 * asset.skeleton.joint_count())
    throw InvalidInput("motion parameters do not match the skeleton");
  if (state.params.frames() < 3) throw InvalidInput("distillation needs at least 3 frames");
  // Resizing keeps the field of view: intrinsics scale with the resolution.
  Camera cam = base_camera;
  const double sx = static_cast<double>(config.width) / cam.width, sy = static_cast<double>(config.height) / cam.height;
  cam.fx *= sx;
  cam.cx *= sx;
  cam.fy *= sy;
  cam.cy *= sy;
  cam.width = config.width;
  cam.height = config.height;
  cam.validate();
  RenderChain chain(asset, {cam, config.follow_window, config.follow, config.chunk});

  Eigen::RowVectorXd lr(state.params.theta.cols());
  lr.segment(0, 3).setConstant(config.lr_translation);
  lr.segment(3, 3).setConstant(config.lr_rotation);
  lr.tail(lr.size() - 6).setConstant(config.lr_angles);

  while (state.iteration < config.iterations) {
    const int iter = state.iteration;
    DistillMetrics metrics;
    metrics.iter = iter;
    metrics.t = config.sample_t(iter);
    GuidanceQuery query{metrics.t, config.noise_seed(iter), config.cfg_scale, config.prompt};

    std::optional<DistillStep> step;
    for (int attempt = 0;; ++attempt) {
      try {
        step = distill_gradient(chain, state.params, provider, query, config.weights);
        break;
      } catch (const ProtocolError&) {
        if (attempt >= config.max_retries) throw;
        ++metrics.retries;
      }
    }
    metrics.l_smooth = step->l_smooth;
    metrics.l_ground = step->l_ground;
    Eigen::MatrixXd& grad = step->gradient;
    metrics.grad_norm = grad.norm();
    // A non-finite guidance gradient can vanish in the pull-back (pixels no
    // kernel covers), so it is checked separately.
    const bool finite = std::isfinite(step->sds_norm) && std::isfinite(metrics.grad_norm);
    if (finite && config.grad_clip > 0.0 && metrics.grad_norm > config.grad_clip) {
      grad *= config.grad_clip / metrics.grad_norm;
      ++metrics.clip_events;
    }
    metrics.skipped = !finite || !adam_update(state.params.theta, grad, state.adam, lr);
    ++state.iteration;
    if (observer) observer(metrics, state);
  }
}

DistillResult distill(const AssetBundle& asset, GuidanceProvider& provider, const DistillConfig& config,
                      const Camera& base_camera) {
  DistillResult out;
  out.state = distill_init(asset.skeleton, config);
  distill_run(asset, provider, config, base_camera, out.state,
              [&](const DistillMetrics& m, const DistillState&) { out.metrics.push_back(m); });
  out.clip = out.state.params.to_clip();
  return out;
}

// ---------------------------------------------------------------------------
// Tracking

void TrackConfig::validate() const {
  if (iterations < 1) throw InvalidInput("iterations must be >= 1");
  if (!(lambda3 >= 0.0) || !std::isfinite(lambda3)) throw InvalidInput("lambda3 must be finite and >= 0");
  for (double lr : {lr_targets, lr_velocity})
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw InvalidInput("step sizes must be finite and >= 0");
}

json TrackMetrics::to_json() const {
  json j = {{"iter", iter},           {"loss", loss},   {"l1", l1},
            {"regularizer", regularizer}, {"lambda3", lambda3}, {"grad_norm", grad_norm},
            {"clip_events", clip_events}};
  if (skipped) j["skipped"] = true;
  return j;
}

std::vector<std::vector<RigidTransform>> clip_transforms(const Skeleton& skeleton, const MotionClip& clip) {
  clip.validate(skeleton);
  std::vector<std::vector<RigidTransform>> out;
  for (int i = 0; i < clip.frame_count(); ++i)
    out.push_back(forward_kinematics(skeleton, clip.root_transforms[static_cast<std::size_t>(i)],
                                     clip.joint_angles[static_cast<std::size_t>(i)]));
  return out;
}

Eigen::MatrixXd clip_angles(const MotionClip& clip) {
  const int f = clip.frame_count();
  const int joints = f > 0 ? static_cast<int>(clip.joint_angles[0].size()) : 0;
  Eigen::MatrixXd a(f, 3 * joints);
  for (int i = 0; i < f; ++i)
    for (int j = 0; j < joints; ++j)
      a.block<1, 3>(i, 3 * j) = clip.joint_angles[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)].transpose();
  return a;
}

namespace {

// Initial velocities as a B × 6 matrix [v | ω].
Eigen::MatrixXd velocity_matrix(const SimState& s) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(s.bones.size()), 6);
  for (std::size_t b = 0; b < s.bones.size(); ++b) {
    m.block<1, 3>(static_cast<Eigen::Index>(b), 0) = s.bones[b].velocity.transpose();
    m.block<1, 3>(static_cast<Eigen::Index>(b), 3) = s.bones[b].angular_velocity.transpose();
  }
  return m;
}

void set_velocities(SimState& s, const Eigen::MatrixXd& m) {
  for (std::size_t b = 0; b < s.bones.size(); ++b) {
    s.bones[b].velocity = m.block<1, 3>(static_cast<Eigen::Index>(b), 0).transpose();
    s.bones[b].angular_velocity = m.block<1, 3>(static_cast<Eigen::Index>(b), 3).transpose();
  }
}

Eigen::MatrixXd velocity_gradient(const StateGrad& g) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(g.bones.size()), 6);
  for (std::size_t b = 0; b < g.bones.size(); ++b) {
    m.block<1, 3>(static_cast<Eigen::Index>(b), 0) = g.bones[b].velocity.transpose();
    m.block<1, 3>(static_cast<Eigen::Index>(b), 3) = g.bones[b].angular_velocity.transpose();
  }
  return m;
}

}  // namespace

TrackResult track(const MotionClip& target, const Skeleton& skeleton, const TrackConfig& config,
                  const std::function<void(const TrackMetrics&)>& observer) {
  config.validate();
  config.sim.validate(skeleton);
  if (target.frame_count() < 2) throw InvalidInput("tracking needs at least 2 frames");
  SimModel model(skeleton, config.sim);
  const auto reference = clip_transforms(skeleton, target);

  SimState initial = config.sim.fix_root
                         ? SimState::at_rest(reference[0], skeleton.root_index())
                         : project_initial(reference[0], skeleton, config.sim.ground_height);
  Eigen::MatrixXd targets = clip_angles(target);
  Eigen::MatrixXd velocity = velocity_matrix(initial);

  AdamState adam_targets, adam_velocity;
  const Eigen::RowVectorXd lr_t = Eigen::RowVectorXd::Constant(targets.cols(), config.lr_targets);
  const Eigen::RowVectorXd lr_v = Eigen::RowVectorXd::Constant(6, config.lr_velocity);

  TrackResult best;
  best.loss.value = std::numeric_limits<double>::infinity();
  for (int iter = 0; iter <= config.iterations; ++iter) {
    SimState start = initial;
    set_velocities(start, velocity);
    Rollout roll = rollout(model, start, targets);
    TrackingLoss loss = tracking_loss(roll, reference, targets, config.lambda3);
    if (loss.value < best.loss.value) {
      best.targets = targets;
      best.initial = start;
      best.rollout = roll;
      best.loss = loss;
    }
    // The last pass only evaluates the final iterate.
    if (iter == config.iterations) break;

    RolloutGradient g = rollout_adjoint(model, roll, targets, loss.frame_cotangents);
    Eigen::MatrixXd gt = g.targets + loss.target_grad;
    Eigen::MatrixXd gv = velocity_gradient(g.initial);
    if (config.sim.fix_root) gv.row(skeleton.root_index()).setZero();

    TrackMetrics m;
    m.iter = iter;
    m.loss = loss.value;
    m.l1 = loss.l1;
    m.regularizer = loss.regularizer;
    m.lambda3 = config.lambda3;
    m.grad_norm = std::sqrt(gt.squaredNorm() + (config.optimize_velocity ? gv.squaredNorm() : 0.0));
    m.clip_events = g.clip_events;
    bool ok = std::isfinite(m.grad_norm);
    if (ok) {
      Eigen::MatrixXd t_next = targets, v_next = velocity;
      AdamState at = adam_targets, av = adam_velocity;
      ok = adam_update(t_next, gt, at, lr_t) && (!config.optimize_velocity || adam_update(v_next, gv, av, lr_v));
      if (ok) {
        targets = std::move(t_next);
        velocity = std::move(v_next);
        adam_targets = std::move(at);
        adam_velocity = std::move(av);
      }
    }
    m.skipped = !ok;
    best.metrics.push_back(m);
    if (observer) observer(m);
  }
  return best;
}

MotionClip rollout_clip(const Skeleton& skeleton, const Rollout& roll, double fps) {
  SimModel model(skeleton, SimConfig{});
  const RigidTransform rest_root_inv = skeleton.bone(skeleton.root_index()).rest.inverse();
  MotionClip clip;
  clip.fps = fps;
  std::vector<Vec3> guess;
  for (const SimState& s : roll.frames) {
    const BoneState& root = s.bones[static_cast<std::size_t>(skeleton.root_index())];
    clip.root_transforms.push_back(RigidTransform{root.rotation, root.position} * rest_root_inv);
    guess = joint_angles(model, s, guess);
    clip.joint_angles.push_back(guess);
  }
  return clip;
}

}  // namespace akd
