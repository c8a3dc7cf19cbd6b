#include "akd/simulate.hpp"

#include <Eigen/LU>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace akd {

namespace {

const Vec3 kUp = Vec3::UnitY();

bool finite(const Vec3& v) { return v.allFinite(); }

Vec3 horizontal(const Vec3& v) { return {v.x(), 0.0, v.z()}; }

}  // namespace

void SimConfig::validate(const Skeleton& skeleton) const {
  auto nonneg = [](double v) { return std::isfinite(v) && v >= 0.0; };
  if (!(dt > 0.0) || !std::isfinite(dt)) throw InvalidInput("simulation dt must be > 0");
  if (substeps < 1) throw InvalidInput("substeps per frame must be >= 1");
  if (chunk < 1) throw InvalidInput("adjoint chunk must be >= 1");
  if (!finite(gravity)) throw InvalidInput("gravity must be finite");
  for (double v : {joint_frequency, joint_damping_ratio, kp, kd, contact_stiffness, contact_damping, friction,
                   friction_damping, upright_gain, upright_damping})
    if (!nonneg(v)) throw InvalidInput("simulation gains must be finite and >= 0");
  if (std::isnan(clip_threshold)) throw InvalidInput("clip threshold must not be NaN");
  if (!axis_gain_scale.empty()) {
    if (static_cast<int>(axis_gain_scale.size()) != skeleton.joint_count())
      throw InvalidInput("axis_gain_scale needs one triple per joint");
    for (const Vec3& s : axis_gain_scale)
      if (!finite(s) || (s.array() < 0.0).any()) throw InvalidInput("axis gain scales must be finite and >= 0");
  }
}

std::vector<RigidTransform> SimState::transforms() const {
  std::vector<RigidTransform> out;
  out.reserve(bones.size());
  for (const BoneState& b : bones) out.push_back({b.rotation, b.position});
  return out;
}

SimState SimState::at_rest(const std::vector<RigidTransform>& transforms, int root) {
  SimState s;
  for (const RigidTransform& t : transforms) {
    BoneState b;
    b.rotation = t.rotation;
    b.position = t.translation;
    s.bones.push_back(b);
  }
  s.root_up_local = transforms.at(static_cast<std::size_t>(root)).rotation.transpose() * kUp;
  return s;
}

double StateGrad::norm() const {
  double s = 0.0;
  for (const BoneStateGrad& b : bones)
    s += b.rotation.squaredNorm() + b.position.squaredNorm() + b.velocity.squaredNorm() +
         b.angular_velocity.squaredNorm();
  return std::sqrt(s);
}

void StateGrad::scale(double s) {
  for (BoneStateGrad& b : bones) {
    b.rotation *= s;
    b.position *= s;
    b.velocity *= s;
    b.angular_velocity *= s;
  }
}

StateGrad& StateGrad::operator+=(const StateGrad& o) {
  for (std::size_t i = 0; i < bones.size(); ++i) {
    bones[i].rotation += o.bones[i].rotation;
    bones[i].position += o.bones[i].position;
    bones[i].velocity += o.bones[i].velocity;
    bones[i].angular_velocity += o.bones[i].angular_velocity;
  }
  return *this;
}

SimModel::SimModel(const Skeleton& skeleton, SimConfig config) : skeleton_(skeleton), config_(std::move(config)) {
  config_.validate(skeleton_);
  for (int b = 0; b < skeleton_.bone_count(); ++b) {
    mass_.push_back(skeleton_.mass(b));
    inertia_.push_back(skeleton_.inertia_diagonal(b));
    if (!(mass_.back() > 0.0) || (inertia_.back().array() <= 0.0).any())
      throw InvalidInput("every bone needs positive mass and inertia");
  }
  for (int j = 0; j < skeleton_.joint_count(); ++j) {
    const int c = skeleton_.bone_of_joint(j);
    const Bone& bone = skeleton_.bone(c);
    const Joint& joint = *bone.joint;
    JointData d;
    d.parent = *bone.parent;
    d.child = c;
    d.anchor_parent = joint.anchor;
    d.anchor_child = bone.rest.inverse().apply(joint.anchor);
    d.rest_rotation = bone.rest.rotation;
    d.axes = joint.axes;
    const double mp = mass(d.parent), mc = mass(c);
    const bool parent_fixed = config_.fix_root && d.parent == skeleton_.root_index();
    const double mu = parent_fixed ? mc : mp * mc / (mp + mc);
    const double w = config_.joint_frequency;
    d.stiffness = mu * w * w;
    d.damping = 2.0 * config_.joint_damping_ratio * mu * w;
    Vec3 scale = config_.axis_gain_scale.empty() ? Vec3::Ones() : config_.axis_gain_scale[static_cast<std::size_t>(j)];
    d.kp = config_.kp * scale;
    d.kd = config_.kd * scale;
    joints_.push_back(d);
  }
}

Mat3 joint_body_jacobian(const std::array<Vec3, 3>& axes, const Vec3& angles) {
  Mat3 r1 = axis_rotation(axes[0], angles[0]);
  Mat3 r21 = axis_rotation(axes[1], angles[1]) * r1;
  Mat3 j;
  j.col(0) = axes[0];
  j.col(1) = r1.transpose() * axes[1];
  j.col(2) = r21.transpose() * axes[2];
  return j;
}

namespace {

Mat3 compose(const std::array<Vec3, 3>& axes, const Vec3& th) {
  return axis_rotation(axes[2], th[2]) * axis_rotation(axes[1], th[1]) * axis_rotation(axes[0], th[0]);
}

bool newton(const std::array<Vec3, 3>& axes, const Mat3& target, Vec3& th) {
  for (int it = 0; it < 60; ++it) {
    Vec3 r = log_so3(compose(axes, th).transpose() * target);
    if (r.norm() < 1e-13) return true;
    Eigen::FullPivLU<Mat3> lu(joint_body_jacobian(axes, th));
    if (!lu.isInvertible()) return false;
    Vec3 delta = lu.solve(r);
    double n = delta.norm();
    if (!std::isfinite(n)) return false;
    if (n > 0.5) delta *= 0.5 / n;
    th += delta;
  }
  return log_so3(compose(axes, th).transpose() * target).norm() < 1e-10;
}

}  // namespace

Vec3 decompose_joint_rotation(const std::array<Vec3, 3>& axes, const Mat3& rotation, const Vec3& guess) {
  Vec3 th = guess;
  if (newton(axes, rotation, th)) return th;
  th = Vec3::Zero();
  if (newton(axes, rotation, th)) return th;
  throw NumericalError("joint angle decomposition did not converge");
}

std::vector<Vec3> joint_angles(const SimModel& model, const SimState& state, std::span<const Vec3> guess) {
  std::vector<Vec3> out;
  for (int j = 0; j < model.joint_count(); ++j) {
    const auto& d = model.joint(j);
    Mat3 rj = state.bones[static_cast<std::size_t>(d.parent)].rotation.transpose() *
              state.bones[static_cast<std::size_t>(d.child)].rotation * d.rest_rotation.transpose();
    Vec3 g = guess.empty() ? Vec3::Zero() : guess[static_cast<std::size_t>(j)];
    out.push_back(decompose_joint_rotation(d.axes, rj, g));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Forces

namespace {

struct Forces {
  std::vector<Vec3> force, torque;
  explicit Forces(int n) : force(static_cast<std::size_t>(n), Vec3::Zero()), torque(static_cast<std::size_t>(n), Vec3::Zero()) {}
};

bool pd_active(const SimModel::JointData& d) { return (d.kp.array() != 0.0).any() || (d.kd.array() != 0.0).any(); }

struct ContactPoint {
  Vec3 r;        // lever arm, world
  Vec3 f;        // total contact force
  double fn;
  Vec3 raw;      // unclamped tangential force
  bool sliding;
};

/// Active contact at a corner, or false if the corner is above ground or
/// the normal force would pull.
bool contact_at(const SimConfig& cfg, double m, const BoneState& s, const Vec3& corner, ContactPoint& out) {
  out.r = s.rotation * corner;
  Vec3 p = s.position + out.r;
  if (!(p.y() < cfg.ground_height)) return false;
  double depth = cfg.ground_height - p.y();
  Vec3 vel = s.velocity + s.angular_velocity.cross(out.r);
  out.fn = m * (cfg.contact_stiffness * depth - cfg.contact_damping * vel.y());
  if (!(out.fn > 0.0)) return false;
  out.raw = -m * cfg.friction_damping * horizontal(vel);
  double n = out.raw.norm();
  double cap = cfg.friction * out.fn;
  out.sliding = n > cap;
  Vec3 ft = out.sliding ? Vec3(out.raw * (cap / n)) : out.raw;
  out.f = out.fn * kUp + ft;
  return true;
}

Vec3 pd_torque(const SimModel::JointData& d, const BoneState& P, const BoneState& C, const Vec3& goal) {
  Mat3 rj = P.rotation.transpose() * C.rotation * d.rest_rotation.transpose();
  Vec3 th = decompose_joint_rotation(d.axes, rj, goal);
  Vec3 wrel = C.angular_velocity - P.angular_velocity;
  Vec3 tau = Vec3::Zero();
  for (int l = 0; l < 3; ++l) {
    Vec3 e = P.rotation * d.axes[static_cast<std::size_t>(l)];
    double kappa = d.kp[l] * (goal[l] - th[l]) - d.kd[l] * e.dot(wrel);
    tau += kappa * e;
  }
  return tau;
}

void accumulate_forces(const SimModel& model, const SimState& s, std::span<const Vec3> targets, Forces& acc) {
  const SimConfig& cfg = model.config();
  for (int j = 0; j < model.joint_count(); ++j) {
    const auto& d = model.joint(j);
    const BoneState& P = s.bones[static_cast<std::size_t>(d.parent)];
    const BoneState& C = s.bones[static_cast<std::size_t>(d.child)];
    Vec3 rp = P.rotation * d.anchor_parent, rc = C.rotation * d.anchor_child;
    Vec3 gap = (C.position + rc) - (P.position + rp);
    Vec3 u = C.velocity + C.angular_velocity.cross(rc) - P.velocity - P.angular_velocity.cross(rp);
    Vec3 f = -d.stiffness * gap - d.damping * u;
    acc.force[static_cast<std::size_t>(d.child)] += f;
    acc.torque[static_cast<std::size_t>(d.child)] += rc.cross(f);
    acc.force[static_cast<std::size_t>(d.parent)] -= f;
    acc.torque[static_cast<std::size_t>(d.parent)] -= rp.cross(f);

    if (!pd_active(d)) continue;
    Vec3 tau = pd_torque(d, P, C, targets[static_cast<std::size_t>(j)]);
    acc.torque[static_cast<std::size_t>(d.child)] += tau;
    acc.torque[static_cast<std::size_t>(d.parent)] -= tau;
  }

  if (cfg.contact) {
    for (int b = 0; b < model.bone_count(); ++b) {
      const BoneState& B = s.bones[static_cast<std::size_t>(b)];
      for (const Vec3& corner : model.skeleton().corners(b)) {
        ContactPoint cp;
        if (!contact_at(cfg, model.mass(b), B, corner, cp)) continue;
        acc.force[static_cast<std::size_t>(b)] += cp.f;
        acc.torque[static_cast<std::size_t>(b)] += cp.r.cross(cp.f);
      }
    }
  }

  const int root = model.skeleton().root_index();
  if (!cfg.fix_root && (cfg.upright_gain > 0.0 || cfg.upright_damping > 0.0)) {
    const BoneState& R = s.bones[static_cast<std::size_t>(root)];
    Vec3 u = R.rotation * s.root_up_local;
    Vec3 w = R.angular_velocity;
    acc.torque[static_cast<std::size_t>(root)] +=
        model.mass(root) * (cfg.upright_gain * u.cross(kUp) - cfg.upright_damping * horizontal(w));
  }
}

void forces_adjoint(const SimModel& model, const SimState& s, std::span<const Vec3> targets, const Forces& g_acc,
                    StateGrad& g, std::span<Vec3> target_grad) {
  const SimConfig& cfg = model.config();
  for (int j = 0; j < model.joint_count(); ++j) {
    const auto& d = model.joint(j);
    const auto pi = static_cast<std::size_t>(d.parent), ci = static_cast<std::size_t>(d.child);
    const BoneState& P = s.bones[pi];
    const BoneState& C = s.bones[ci];
    BoneStateGrad& gP = g.bones[pi];
    BoneStateGrad& gC = g.bones[ci];
    const Vec3 &gFc = g_acc.force[ci], &gFp = g_acc.force[pi], &gTc = g_acc.torque[ci], &gTp = g_acc.torque[pi];

    Vec3 rp = P.rotation * d.anchor_parent, rc = C.rotation * d.anchor_child;
    Vec3 gap = (C.position + rc) - (P.position + rp);
    Vec3 u = C.velocity + C.angular_velocity.cross(rc) - P.velocity - P.angular_velocity.cross(rp);
    Vec3 f = -d.stiffness * gap - d.damping * u;

    Vec3 gf = gFc - gFp + gTc.cross(rc) - gTp.cross(rp);
    Vec3 grc = f.cross(gTc);
    Vec3 grp = -f.cross(gTp);
    Vec3 gd = -d.stiffness * gf, gu = -d.damping * gf;
    gC.position += gd;
    grc += gd;
    gP.position -= gd;
    grp -= gd;
    gC.velocity += gu;
    gC.angular_velocity += rc.cross(gu);
    grc += gu.cross(C.angular_velocity);
    gP.velocity -= gu;
    gP.angular_velocity -= rp.cross(gu);
    grp -= gu.cross(P.angular_velocity);
    gC.rotation += grc * d.anchor_child.transpose();
    gP.rotation += grp * d.anchor_parent.transpose();

    if (!pd_active(d)) continue;
    Mat3 rj = P.rotation.transpose() * C.rotation * d.rest_rotation.transpose();
    const Vec3& goal = targets[static_cast<std::size_t>(j)];
    Vec3 th = decompose_joint_rotation(d.axes, rj, goal);
    Vec3 wrel = C.angular_velocity - P.angular_velocity;
    Vec3 gtau = gTc - gTp;
    Vec3 gth = Vec3::Zero(), gwrel = Vec3::Zero();
    for (int l = 0; l < 3; ++l) {
      const Vec3& a = d.axes[static_cast<std::size_t>(l)];
      Vec3 e = P.rotation * a;
      double kappa = d.kp[l] * (goal[l] - th[l]) - d.kd[l] * e.dot(wrel);
      double gk = gtau.dot(e);
      Vec3 ge = kappa * gtau - d.kd[l] * gk * wrel;
      target_grad[static_cast<std::size_t>(j)][l] += d.kp[l] * gk;
      gth[l] -= d.kp[l] * gk;
      gwrel -= d.kd[l] * gk * e;
      gP.rotation += ge * a.transpose();
    }
    gC.angular_velocity += gwrel;
    gP.angular_velocity -= gwrel;
    // θ solves R(θ) = R_j, so δθ = J⁻¹ vee(R_jᵀ δR_j).
    Vec3 w = joint_body_jacobian(d.axes, th).transpose().fullPivLu().solve(gth);
    Mat3 g_rj = 0.5 * rj * skew(w);
    gP.rotation += C.rotation * d.rest_rotation.transpose() * g_rj.transpose();
    gC.rotation += P.rotation * g_rj * d.rest_rotation;
  }

  if (cfg.contact) {
    for (int b = 0; b < model.bone_count(); ++b) {
      const auto bi = static_cast<std::size_t>(b);
      const BoneState& B = s.bones[bi];
      BoneStateGrad& gB = g.bones[bi];
      const double m = model.mass(b);
      for (const Vec3& corner : model.skeleton().corners(b)) {
        ContactPoint cp;
        if (!contact_at(cfg, m, B, corner, cp)) continue;
        Vec3 gf = g_acc.force[bi] + g_acc.torque[bi].cross(cp.r);
        Vec3 gr = cp.f.cross(g_acc.torque[bi]);
        double gfn = gf.y();
        Vec3 gft = horizontal(gf);
        Vec3 graw = gft;
        if (cp.sliding) {
          double n = cp.raw.norm();
          Vec3 nhat = cp.raw / n;
          gfn += cfg.friction * gft.dot(nhat);
          graw = (cfg.friction * cp.fn / n) * (gft - nhat * nhat.dot(gft));
        }
        Vec3 gvel = horizontal(-m * cfg.friction_damping * graw);
        gB.position.y() -= m * cfg.contact_stiffness * gfn;
        gr.y() -= m * cfg.contact_stiffness * gfn;
        gvel.y() -= m * cfg.contact_damping * gfn;
        gB.velocity += gvel;
        gB.angular_velocity += cp.r.cross(gvel);
        gr += gvel.cross(B.angular_velocity);
        gB.rotation += gr * corner.transpose();
      }
    }
  }

  const int root = model.skeleton().root_index();
  if (!cfg.fix_root && (cfg.upright_gain > 0.0 || cfg.upright_damping > 0.0)) {
    const auto ri = static_cast<std::size_t>(root);
    const double m = model.mass(root);
    const Vec3& gtau = g_acc.torque[ri];
    Vec3 gu = m * cfg.upright_gain * kUp.cross(gtau);
    g.bones[ri].angular_velocity -= m * cfg.upright_damping * horizontal(gtau);
    g.bones[ri].rotation += gu * s.root_up_local.transpose();
  }
}

bool integrated(const SimModel& model, int b) {
  return !(model.config().fix_root && b == model.skeleton().root_index());
}

/// Angular acceleration R·I⁻¹·(Rᵀτ − ω_b × I ω_b), ω_b = Rᵀω.
Vec3 angular_acceleration(const Mat3& r, const Vec3& inertia, const Vec3& w, const Vec3& torque) {
  Vec3 wb = r.transpose() * w;
  Vec3 h = r.transpose() * torque - wb.cross(inertia.cwiseProduct(wb));
  return r * h.cwiseQuotient(inertia);
}

}  // namespace

std::vector<Vec3> pd_torques(const SimModel& model, const SimState& state, std::span<const Vec3> targets) {
  if (static_cast<int>(targets.size()) != model.joint_count()) throw InvalidInput("need one PD target per joint");
  std::vector<Vec3> out;
  for (int j = 0; j < model.joint_count(); ++j) {
    const auto& d = model.joint(j);
    out.push_back(pd_active(d) ? pd_torque(d, state.bones[static_cast<std::size_t>(d.parent)],
                                           state.bones[static_cast<std::size_t>(d.child)],
                                           targets[static_cast<std::size_t>(j)])
                               : Vec3::Zero());
  }
  return out;
}

SimState step(const SimModel& model, const SimState& state, std::span<const Vec3> targets, long step_index) {
  const SimConfig& cfg = model.config();
  const int nb = model.bone_count();
  if (static_cast<int>(state.bones.size()) != nb) throw InvalidInput("state bone count does not match the skeleton");
  if (static_cast<int>(targets.size()) != model.joint_count()) throw InvalidInput("need one PD target per joint");
  Forces acc(nb);
  accumulate_forces(model, state, targets, acc);
  SimState out = state;
  for (int b = 0; b < nb; ++b) {
    if (!integrated(model, b)) continue;
    const auto bi = static_cast<std::size_t>(b);
    const BoneState& s = state.bones[bi];
    BoneState& o = out.bones[bi];
    o.velocity = s.velocity + cfg.dt * (acc.force[bi] / model.mass(b) + cfg.gravity);
    o.angular_velocity = s.angular_velocity + cfg.dt * angular_acceleration(s.rotation, model.inertia(b),
                                                                           s.angular_velocity, acc.torque[bi]);
    o.rotation = orthonormalize(exp_so3(cfg.dt * o.angular_velocity) * s.rotation);
    o.position = s.position + cfg.dt * o.velocity;
    if (!o.rotation.allFinite() || !finite(o.position) || !finite(o.velocity) || !finite(o.angular_velocity))
      throw NumericalError("simulation state became non-finite at substep " + std::to_string(step_index) +
                           " (bone " + std::to_string(b) + ")");
  }
  return out;
}

StateGrad step_adjoint(const SimModel& model, const SimState& state, std::span<const Vec3> targets,
                       const StateGrad& out_cot, std::span<Vec3> target_grad) {
  const SimConfig& cfg = model.config();
  const int nb = model.bone_count();
  if (static_cast<int>(target_grad.size()) != model.joint_count()) throw InvalidInput("target gradient size mismatch");
  Forces acc(nb);
  accumulate_forces(model, state, targets, acc);

  StateGrad g(nb);
  Forces g_acc(nb);
  const double dt = cfg.dt;
  for (int b = 0; b < nb; ++b) {
    const auto bi = static_cast<std::size_t>(b);
    const BoneStateGrad& go = out_cot.bones[bi];
    BoneStateGrad& gi = g.bones[bi];
    if (!integrated(model, b)) {
      gi = go;
      continue;
    }
    const BoneState& s = state.bones[bi];
    const Vec3& inertia = model.inertia(b);
    const double m = model.mass(b);
    Vec3 alpha = angular_acceleration(s.rotation, inertia, s.angular_velocity, acc.torque[bi]);
    Vec3 w_new = s.angular_velocity + dt * alpha;
    Mat3 e = exp_so3(dt * w_new);

    // x' = x + dt v'
    gi.position += go.position;
    Vec3 gv_new = go.velocity + dt * go.position;
    // R' = Exp(dt ω') R
    Mat3 g_e = go.rotation * s.rotation.transpose();
    gi.rotation += e.transpose() * go.rotation;
    Vec3 gw_new = go.angular_velocity + dt * exp_so3_vjp(dt * w_new, e, g_e);
    // ω' = ω + dt α
    gi.angular_velocity += gw_new;
    Vec3 g_alpha = dt * gw_new;
    // v' = v + dt (F/m + g)
    gi.velocity += gv_new;
    g_acc.force[bi] = (dt / m) * gv_new;

    // α = R k, k = I⁻¹ h, h = Rᵀτ − ω_b × (I ω_b), ω_b = Rᵀω
    const Mat3& r = s.rotation;
    Vec3 wb = r.transpose() * s.angular_velocity;
    Vec3 lb = inertia.cwiseProduct(wb);
    Vec3 h = r.transpose() * acc.torque[bi] - wb.cross(lb);
    Vec3 k = h.cwiseQuotient(inertia);
    gi.rotation += g_alpha * k.transpose();
    Vec3 gh = (r.transpose() * g_alpha).cwiseQuotient(inertia);
    g_acc.torque[bi] = r * gh;
    gi.rotation += acc.torque[bi] * gh.transpose();
    Vec3 gc = -gh;
    Vec3 gwb = lb.cross(gc);
    Vec3 gl = gc.cross(wb);
    gwb += inertia.cwiseProduct(gl);
    gi.angular_velocity += r * gwb;
    gi.rotation += s.angular_velocity * gwb.transpose();
  }
  forces_adjoint(model, state, targets, g_acc, g, target_grad);
  return g;
}

std::vector<Vec3> substep_targets(const Eigen::MatrixXd& targets, long substep, int substeps_per_frame) {
  const int joints = static_cast<int>(targets.cols() / 3);
  const long frame = substep / substeps_per_frame;
  const double alpha = static_cast<double>(substep % substeps_per_frame) / substeps_per_frame;
  const long last = targets.rows() - 1;
  const long i0 = std::min(frame, last), i1 = std::min(frame + 1, last);
  std::vector<Vec3> out(static_cast<std::size_t>(joints));
  for (int j = 0; j < joints; ++j) {
    Vec3 a = targets.block<1, 3>(i0, 3 * j).transpose(), b = targets.block<1, 3>(i1, 3 * j).transpose();
    out[static_cast<std::size_t>(j)] = (1.0 - alpha) * a + alpha * b;
  }
  return out;
}

namespace {

void scatter_target_grad(Eigen::MatrixXd& grad, std::span<const Vec3> g, long substep, int n) {
  const long frame = substep / n;
  const double alpha = static_cast<double>(substep % n) / n;
  const long last = grad.rows() - 1;
  const long i0 = std::min(frame, last), i1 = std::min(frame + 1, last);
  for (std::size_t j = 0; j < g.size(); ++j) {
    grad.block<1, 3>(i0, 3 * static_cast<long>(j)) += (1.0 - alpha) * g[j].transpose();
    grad.block<1, 3>(i1, 3 * static_cast<long>(j)) += alpha * g[j].transpose();
  }
}

void check_targets(const SimModel& model, const Eigen::MatrixXd& targets) {
  if (targets.rows() < 1 || targets.cols() != 3 * model.joint_count())
    throw InvalidInput("PD targets must be F x 3(B-1) with F >= 1");
  if (!targets.allFinite()) throw InvalidInput("PD targets must be finite");
}

}  // namespace

Rollout rollout(const SimModel& model, const SimState& initial, const Eigen::MatrixXd& targets) {
  check_targets(model, targets);
  const SimConfig& cfg = model.config();
  Rollout out;
  out.chunk = cfg.chunk;
  out.total_substeps = (targets.rows() - 1) * static_cast<long>(cfg.substeps);
  SimState s = initial;
  out.frames.push_back(s);
  for (long k = 0; k < out.total_substeps; ++k) {
    if (k % cfg.chunk == 0) out.checkpoints.push_back(s);
    s = step(model, s, substep_targets(targets, k, cfg.substeps), k);
    if ((k + 1) % cfg.substeps == 0) out.frames.push_back(s);
  }
  return out;
}

RolloutGradient rollout_adjoint(const SimModel& model, const Rollout& roll, const Eigen::MatrixXd& targets,
                                std::span<const StateGrad> frame_cotangents) {
  check_targets(model, targets);
  const SimConfig& cfg = model.config();
  const long n = cfg.substeps;
  const long total = roll.total_substeps;
  const int f = static_cast<int>(targets.rows());
  if (static_cast<int>(frame_cotangents.size()) != f || static_cast<int>(roll.frames.size()) != f)
    throw InvalidInput("need one state cotangent per frame");
  if (total != (f - 1) * n) throw InvalidInput("rollout does not match the targets and substep count");

  RolloutGradient out;
  out.targets = Eigen::MatrixXd::Zero(targets.rows(), targets.cols());
  const double thr = cfg.clip_threshold;
  const bool clipping = thr > 0.0 && std::isfinite(thr);

  StateGrad adj = frame_cotangents[static_cast<std::size_t>(f - 1)];
  const long chunk = roll.chunk;
  const long chunks = (total + chunk - 1) / chunk;
  std::vector<Vec3> tg(static_cast<std::size_t>(model.joint_count()));
  for (long c = chunks - 1; c >= 0; --c) {
    const long start = c * chunk, end = std::min(total, start + chunk);
    std::vector<SimState> tape;
    tape.reserve(static_cast<std::size_t>(end - start));
    SimState s = roll.checkpoints[static_cast<std::size_t>(c)];
    for (long k = start; k < end; ++k) {
      tape.push_back(s);
      if (k + 1 < end) s = step(model, s, substep_targets(targets, k, cfg.substeps), k);
      ++out.recomputed_steps;
    }
    for (long k = end - 1; k >= start; --k) {
      std::fill(tg.begin(), tg.end(), Vec3::Zero());
      adj = step_adjoint(model, tape[static_cast<std::size_t>(k - start)], substep_targets(targets, k, cfg.substeps),
                         adj, tg);
      scatter_target_grad(out.targets, tg, k, static_cast<int>(n));
      if (k % n == 0) adj += frame_cotangents[static_cast<std::size_t>(k / n)];
    }
    if (clipping) {
      double norm = adj.norm();
      if (norm > thr) {
        adj.scale(thr / norm);
        ++out.clip_events;
        out.clip_substeps.push_back(start);
      }
    }
  }
  if (total == 0) adj = frame_cotangents[0];
  out.initial = adj;
  return out;
}

SimState project_initial(const std::vector<RigidTransform>& transforms, const Skeleton& skeleton,
                         double ground_height) {
  if (static_cast<int>(transforms.size()) != skeleton.bone_count())
    throw InvalidInput("need one transform per bone");
  double lowest = std::numeric_limits<double>::infinity();
  for (int b = 0; b < skeleton.bone_count(); ++b)
    for (const Vec3& c : skeleton.corners(b))
      lowest = std::min(lowest, transforms[static_cast<std::size_t>(b)].apply(c).y());
  std::vector<RigidTransform> shifted = transforms;
  const double shift = ground_height - lowest;
  for (RigidTransform& t : shifted) t.translation.y() += shift;
  return SimState::at_rest(shifted, skeleton.root_index());
}

TrackingLoss tracking_loss(const Rollout& roll, const std::vector<std::vector<RigidTransform>>& reference,
                           const Eigen::MatrixXd& targets, double lambda3) {
  const int f = static_cast<int>(roll.frames.size());
  if (static_cast<int>(reference.size()) != f || targets.rows() != f)
    throw InvalidInput("tracking reference, targets and rollout must have the same frame count");
  if (!(lambda3 >= 0.0)) throw InvalidInput("lambda3 must be >= 0");
  const int nb = f > 0 ? static_cast<int>(roll.frames[0].bones.size()) : 0;
  TrackingLoss out;
  out.frame_cotangents.assign(static_cast<std::size_t>(f), StateGrad(nb));
  out.target_grad = Eigen::MatrixXd::Zero(targets.rows(), targets.cols());
  auto sign = [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); };
  if (f >= 2) {
    const double inv = 1.0 / (f - 1);
    for (int i = 1; i < f; ++i) {
      const auto& ref = reference[static_cast<std::size_t>(i)];
      if (static_cast<int>(ref.size()) != nb) throw InvalidInput("reference bone count mismatch");
      for (int b = 0; b < nb; ++b) {
        const BoneState& s = roll.frames[static_cast<std::size_t>(i)].bones[static_cast<std::size_t>(b)];
        BoneStateGrad& g = out.frame_cotangents[static_cast<std::size_t>(i)].bones[static_cast<std::size_t>(b)];
        for (int a = 0; a < 3; ++a) {
          double d = s.position[a] - ref[static_cast<std::size_t>(b)].translation[a];
          out.l1 += std::abs(d);
          g.position[a] = inv * sign(d);
        }
        for (int r = 0; r < 3; ++r)
          for (int c = 0; c < 3; ++c) {
            double d = s.rotation(r, c) - ref[static_cast<std::size_t>(b)].rotation(r, c);
            out.l1 += std::abs(d);
            g.rotation(r, c) = inv * sign(d);
          }
      }
    }
    out.l1 *= inv;
    if (targets.cols() > 0) {
      const double count = static_cast<double>(f - 1) * static_cast<double>(targets.cols());
      for (int i = 0; i + 1 < f; ++i)
        for (Eigen::Index k = 0; k < targets.cols(); ++k) {
          double d = targets(i + 1, k) - targets(i, k);
          out.regularizer += std::abs(d);
          out.target_grad(i + 1, k) += lambda3 * sign(d) / count;
          out.target_grad(i, k) -= lambda3 * sign(d) / count;
        }
      out.regularizer /= count;
    }
  }
  out.value = out.l1 + lambda3 * out.regularizer;
  return out;
}

double kinetic_energy(const SimModel& model, const SimState& state) {
  double e = 0.0;
  for (int b = 0; b < model.bone_count(); ++b) {
    const BoneState& s = state.bones[static_cast<std::size_t>(b)];
    Vec3 wb = s.rotation.transpose() * s.angular_velocity;
    e += 0.5 * model.mass(b) * s.velocity.squaredNorm() + 0.5 * wb.dot(model.inertia(b).cwiseProduct(wb));
  }
  return e;
}

double mechanical_energy(const SimModel& model, const SimState& state) {
  double e = kinetic_energy(model, state);
  for (int b = 0; b < model.bone_count(); ++b)
    e -= model.mass(b) * model.config().gravity.dot(state.bones[static_cast<std::size_t>(b)].position);
  for (int j = 0; j < model.joint_count(); ++j) {
    const auto& d = model.joint(j);
    const BoneState& P = state.bones[static_cast<std::size_t>(d.parent)];
    const BoneState& C = state.bones[static_cast<std::size_t>(d.child)];
    Vec3 gap = (C.position + C.rotation * d.anchor_child) - (P.position + P.rotation * d.anchor_parent);
    e += 0.5 * d.stiffness * gap.squaredNorm();
  }
  return e;
}

double max_penetration(const SimModel& model, const SimState& state) {
  double worst = 0.0;
  const double h = model.config().ground_height;
  for (int b = 0; b < model.bone_count(); ++b) {
    const BoneState& s = state.bones[static_cast<std::size_t>(b)];
    for (const Vec3& c : model.skeleton().corners(b)) worst = std::max(worst, h - (s.rotation * c + s.position).y());
  }
  return worst;
}

double max_anchor_gap(const SimModel& model, const SimState& state) {
  double worst = 0.0;
  for (int j = 0; j < model.joint_count(); ++j) {
    const auto& d = model.joint(j);
    const BoneState& P = state.bones[static_cast<std::size_t>(d.parent)];
    const BoneState& C = state.bones[static_cast<std::size_t>(d.child)];
    Vec3 gap = (C.position + C.rotation * d.anchor_child) - (P.position + P.rotation * d.anchor_parent);
    worst = std::max(worst, gap.norm());
  }
  return worst;
}

}  // namespace akd
