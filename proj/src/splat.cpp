#include "akd/splat.hpp"

#include "akd/error.hpp"
#include "akd/parallel.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <unordered_map>

namespace akd {

void GaussianCloud::add(const Vec3& center, const Mat3& covariance, double opacity, const Vec3& rgb) {
  centers.push_back(center);
  covariances.push_back(covariance);
  opacities.push_back(opacity);
  sh_dc.push_back(sh_dc_from_color(rgb));
  if (!sh_rest.empty()) sh_rest.emplace_back();
}

void GaussianCloud::validate() const {
  const std::size_t n = centers.size();
  if (covariances.size() != n || opacities.size() != n || sh_dc.size() != n || (!sh_rest.empty() && sh_rest.size() != n))
    throw InvalidInput("gaussian cloud attribute arrays differ in length");
  for (std::size_t p = 0; p < n; ++p) {
    const std::string id = "kernel " + std::to_string(p);
    if (!centers[p].allFinite() || !covariances[p].allFinite() || !sh_dc[p].allFinite())
      throw InvalidInput(id + " has non-finite parameters");
    if (!(opacities[p] >= 0.0 && opacities[p] <= 1.0)) throw InvalidInput(id + " opacity outside [0,1]");
    const Mat3& s = covariances[p];
    if ((s - s.transpose()).norm() >= 1e-9) throw InvalidInput(id + " covariance is not symmetric");
    Eigen::SelfAdjointEigenSolver<Mat3> eig(s, Eigen::EigenvaluesOnly);
    if (eig.eigenvalues().minCoeff() <= 1e-12) throw InvalidInput(id + " covariance is not positive definite");
  }
}

Vec3 sh_dc_from_color(const Vec3& rgb) { return (rgb.array() - 0.5) / kShC0; }

Vec3 color_from_sh_dc(const Vec3& dc) { return (0.5 + kShC0 * dc.array()).cwiseMax(0.0).cwiseMin(1.0); }

Camera Camera::look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double vertical_fov, int width,
                       int height) {
  Vec3 forward = (target - eye).normalized();
  Vec3 right = forward.cross(up).normalized();
  Vec3 down = forward.cross(right);
  Camera cam;
  cam.world_to_camera.rotation.row(0) = right;
  cam.world_to_camera.rotation.row(1) = down;
  cam.world_to_camera.rotation.row(2) = forward;
  cam.world_to_camera.translation = -(cam.world_to_camera.rotation * eye);
  cam.width = width;
  cam.height = height;
  cam.fy = 0.5 * height / std::tan(0.5 * vertical_fov);
  cam.fx = cam.fy;
  cam.cx = 0.5 * width;
  cam.cy = 0.5 * height;
  return cam;
}

void Camera::validate() const {
  if (!(fx > 0.0) || !(fy > 0.0)) throw InvalidInput("camera focal lengths must be positive");
  if (width <= 0 || height <= 0) throw InvalidInput("camera resolution must be positive");
  if (orthonormality_error(world_to_camera.rotation) >= 1e-6) throw InvalidInput("camera rotation is not orthonormal");
}

void GroundConfig::validate() const {
  if (!(tile_size > 0.0)) throw InvalidInput("ground tile size must be positive");
  if (!(shadow_decay >= 0.0)) throw InvalidInput("shadow decay must be nonnegative");
  if (!(shadow_max >= 0.0 && shadow_max < 1.0)) throw InvalidInput("shadow_max must lie in [0,1)");
}

double shadow_factor(double distance, double shadow_max, double shadow_decay) {
  if (!std::isfinite(distance)) return 1.0;
  return 1.0 - shadow_max * std::exp(-shadow_decay * distance);
}

namespace {

struct Projected {
  bool active = false;
  double depth = 0.0;
  double u = 0.0, v = 0.0;           // projected mean, pixels
  double ca = 0.0, cb = 0.0, cc = 0.0;  // conic (inverse 2D covariance)
  double radius = 0.0;
  Vec3 cam = Vec3::Zero();
  Mat3 cov_cam = Mat3::Zero();
  Vec3 color = Vec3::Zero();
  double opacity = 0.0;
};

struct ShadowHit {
  bool ground = false;
  Vec3 base = Vec3::Zero();  // checker color before shadowing
  int caster = -1;
  double distance = std::numeric_limits<double>::infinity();
};

// Everything render and render_adjoint share: projections, tile lists in
// exact (depth, index) order, and the shadow-caster lookup.
class Rasterizer {
 public:
  Rasterizer(const GaussianCloud& cloud, const Camera& camera, const GroundConfig& ground, const RenderSettings& settings)
      : cloud_(cloud), camera_(camera), ground_(ground), settings_(settings) {
    camera.validate();
    if (ground.enabled) ground.validate();
    if (settings.tile <= 0) throw InvalidInput("render tile size must be positive");
    tiles_x_ = (camera.width + settings.tile - 1) / settings.tile;
    tiles_y_ = (camera.height + settings.tile - 1) / settings.tile;
    project();
    bin();
    if (ground.enabled && ground.shadow_max > 0.0) build_shadow_grid();
  }

  int tile_count() const { return tiles_x_ * tiles_y_; }
  const std::vector<int>& tile_list(int t) const { return tiles_[static_cast<std::size_t>(t)]; }
  const Projected& kernel(int k) const { return proj_[static_cast<std::size_t>(k)]; }
  const RenderStats& stats() const { return stats_; }

  template <typename F>
  void for_each_pixel(int tile, F&& f) const {
    int tx = tile % tiles_x_, ty = tile / tiles_x_;
    int x0 = tx * settings_.tile, y0 = ty * settings_.tile;
    int x1 = std::min(x0 + settings_.tile, camera_.width);
    int y1 = std::min(y0 + settings_.tile, camera_.height);
    for (int y = y0; y < y1; ++y)
      for (int x = x0; x < x1; ++x) f(x, y);
  }

  // Footprint test and alpha; returns false outside the cutoff ellipse.
  bool evaluate(int k, double px, double py, double& alpha, double& q, double& dx, double& dy) const {
    const Projected& p = kernel(k);
    dx = px - p.u;
    dy = py - p.v;
    q = p.ca * dx * dx + 2.0 * p.cb * dx * dy + p.cc * dy * dy;
    if (q > settings_.cutoff * settings_.cutoff) return false;
    alpha = p.opacity * std::exp(-0.5 * q);
    return true;
  }

  ShadowHit background(int x, int y) const {
    ShadowHit hit;
    if (!ground_.enabled) return hit;
    const Mat3& r = camera_.world_to_camera.rotation;
    Vec3 origin = camera_.position();
    Vec3 dir = r.transpose() * Vec3((x + 0.5 - camera_.cx) / camera_.fx, (y + 0.5 - camera_.cy) / camera_.fy, 1.0);
    if (std::abs(dir.y()) < 1e-12) return hit;
    double t = (ground_.height - origin.y()) / dir.y();
    if (!(t > 0.0)) return hit;
    Vec3 p = origin + t * dir;
    hit.ground = true;
    long long ix = static_cast<long long>(std::floor(p.x() / ground_.tile_size));
    long long iz = static_cast<long long>(std::floor(p.z() / ground_.tile_size));
    hit.base = ((ix + iz) % 2 == 0) ? ground_.color_a : ground_.color_b;
    if (ground_.shadow_max > 0.0 && shadow_radius_ > 0.0) find_caster(p, hit);
    return hit;
  }

  Vec3 background_color(const ShadowHit& hit) const {
    if (!hit.ground) return ground_.enabled ? ground_.background : ground_.background;
    return hit.base * shadow_factor(hit.distance, ground_.shadow_max, ground_.shadow_decay);
  }

 private:
  void project() {
    const int n = cloud_.size();
    proj_.resize(static_cast<std::size_t>(n));
    const Mat3& rc = camera_.world_to_camera.rotation;
    for (int k = 0; k < n; ++k) {
      Projected& p = proj_[static_cast<std::size_t>(k)];
      const Vec3& center = cloud_.centers[static_cast<std::size_t>(k)];
      if (ground_.enabled && center.y() < ground_.height) {
        ++stats_.culled_kernels;
        continue;
      }
      p.cam = camera_.world_to_camera.apply(center);
      double z = p.cam.z();
      if (z <= settings_.near_plane) {
        ++stats_.culled_kernels;
        continue;
      }
      p.cov_cam = rc * cloud_.covariances[static_cast<std::size_t>(k)] * rc.transpose();
      Eigen::Matrix<double, 2, 3> j;
      j << camera_.fx / z, 0.0, -camera_.fx * p.cam.x() / (z * z), 0.0, camera_.fy / z, -camera_.fy * p.cam.y() / (z * z);
      Eigen::Matrix2d cov2 = j * p.cov_cam * j.transpose();
      double a = cov2(0, 0) + settings_.dilation, b = 0.5 * (cov2(0, 1) + cov2(1, 0)), c = cov2(1, 1) + settings_.dilation;
      double det = a * c - b * b;
      if (!(det > 1e-12) || !std::isfinite(det)) {
        ++stats_.skipped_kernels;
        continue;
      }
      p.active = true;
      p.depth = z;
      p.u = camera_.fx * p.cam.x() / z + camera_.cx;
      p.v = camera_.fy * p.cam.y() / z + camera_.cy;
      p.ca = c / det;
      p.cb = -b / det;
      p.cc = a / det;
      double mid = 0.5 * (a + c);
      double lambda = mid + std::sqrt(std::max(0.0, mid * mid - det));
      p.radius = settings_.cutoff * std::sqrt(lambda);
      p.color = color_from_sh_dc(cloud_.sh_dc[static_cast<std::size_t>(k)]);
      p.opacity = cloud_.opacities[static_cast<std::size_t>(k)];
    }
  }

  void bin() {
    tiles_.assign(static_cast<std::size_t>(tile_count()), {});
    const int ts = settings_.tile;
    for (int k = 0; k < cloud_.size(); ++k) {
      const Projected& p = kernel(k);
      if (!p.active) continue;
      // Pixel x is covered when |x + 0.5 - u| <= radius.
      double xmin = std::ceil(p.u - p.radius - 0.5), xmax = std::floor(p.u + p.radius - 0.5);
      double ymin = std::ceil(p.v - p.radius - 0.5), ymax = std::floor(p.v + p.radius - 0.5);
      if (xmax < 0.0 || ymax < 0.0 || xmin > camera_.width - 1 || ymin > camera_.height - 1) continue;
      int tx0 = static_cast<int>(std::max(0.0, xmin)) / ts;
      int tx1 = static_cast<int>(std::min<double>(camera_.width - 1, xmax)) / ts;
      int ty0 = static_cast<int>(std::max(0.0, ymin)) / ts;
      int ty1 = static_cast<int>(std::min<double>(camera_.height - 1, ymax)) / ts;
      for (int ty = ty0; ty <= ty1; ++ty)
        for (int tx = tx0; tx <= tx1; ++tx) tiles_[static_cast<std::size_t>(ty * tiles_x_ + tx)].push_back(k);
    }
    for (auto& list : tiles_) {
      std::sort(list.begin(), list.end(), [&](int a, int b) {
        double da = kernel(a).depth, db = kernel(b).depth;
        return da < db || (da == db && a < b);
      });
    }
  }

  static long long cell_key(long long ix, long long iz) { return (ix << 32) ^ (iz & 0xffffffffLL); }

  void build_shadow_grid() {
    double total = 0.0;
    for (const Mat3& s : cloud_.covariances) total += std::sqrt(std::max(0.0, s.trace() / 3.0));
    if (cloud_.size() == 0) return;
    shadow_radius_ = total / cloud_.size();
    if (!(shadow_radius_ > 0.0)) return;
    for (int k = 0; k < cloud_.size(); ++k) {
      const Vec3& c = cloud_.centers[static_cast<std::size_t>(k)];
      if (c.y() < ground_.height || cloud_.opacities[static_cast<std::size_t>(k)] <= 0.0) continue;
      long long ix = static_cast<long long>(std::floor(c.x() / shadow_radius_));
      long long iz = static_cast<long long>(std::floor(c.z() / shadow_radius_));
      grid_[cell_key(ix, iz)].push_back(k);
    }
  }

  void find_caster(const Vec3& p, ShadowHit& hit) const {
    long long ix = static_cast<long long>(std::floor(p.x() / shadow_radius_));
    long long iz = static_cast<long long>(std::floor(p.z() / shadow_radius_));
    double r2 = shadow_radius_ * shadow_radius_;
    for (long long dx = -1; dx <= 1; ++dx) {
      for (long long dz = -1; dz <= 1; ++dz) {
        auto it = grid_.find(cell_key(ix + dx, iz + dz));
        if (it == grid_.end()) continue;
        for (int k : it->second) {
          const Vec3& c = cloud_.centers[static_cast<std::size_t>(k)];
          double h2 = (c.x() - p.x()) * (c.x() - p.x()) + (c.z() - p.z()) * (c.z() - p.z());
          if (h2 > r2) continue;
          double d = c.y() - ground_.height;
          if (d < hit.distance || (d == hit.distance && k < hit.caster)) {
            hit.distance = d;
            hit.caster = k;
          }
        }
      }
    }
  }

  const GaussianCloud& cloud_;
  const Camera& camera_;
  const GroundConfig& ground_;
  const RenderSettings& settings_;
  int tiles_x_ = 0, tiles_y_ = 0;
  std::vector<Projected> proj_;
  std::vector<std::vector<int>> tiles_;
  RenderStats stats_;
  double shadow_radius_ = 0.0;
  std::unordered_map<long long, std::vector<int>> grid_;
};

}  // namespace

Image render(const GaussianCloud& cloud, const Camera& camera, const GroundConfig& ground,
             const RenderSettings& settings, RenderStats* stats) {
  Rasterizer raster(cloud, camera, ground, settings);
  Image image(camera.height, camera.width);
  parallel_for(static_cast<std::size_t>(raster.tile_count()), [&](std::size_t tile) {
    const auto& list = raster.tile_list(static_cast<int>(tile));
    raster.for_each_pixel(static_cast<int>(tile), [&](int x, int y) {
      double px = x + 0.5, py = y + 0.5;
      double transmittance = 1.0;
      Vec3 color = Vec3::Zero();
      for (int k : list) {
        double alpha, q, dx, dy;
        if (!raster.evaluate(k, px, py, alpha, q, dx, dy)) continue;
        color += transmittance * alpha * raster.kernel(k).color;
        transmittance *= 1.0 - alpha;
      }
      Vec3 bg = raster.background_color(raster.background(x, y));
      Vec3 out = color + transmittance * bg;
      std::size_t i = static_cast<std::size_t>(y * camera.width + x);
      for (int ch = 0; ch < 3; ++ch) image.rgb[3 * i + static_cast<std::size_t>(ch)] = out[ch];
      image.alpha[i] = 1.0 - transmittance;
    });
  });
  if (stats) *stats = raster.stats();
  return image;
}

namespace {

struct KernelGrad2d {
  double u = 0.0, v = 0.0;
  double ca = 0.0, cb = 0.0, cc = 0.0;
  double opacity = 0.0;
  Vec3 color = Vec3::Zero();
};

}  // namespace

CloudGrad render_adjoint(const GaussianCloud& cloud, const Camera& camera, const GroundConfig& ground,
                         const RenderSettings& settings, std::span<const double> rgb_cotangent,
                         std::span<const double> alpha_cotangent) {
  const std::size_t pixels = static_cast<std::size_t>(camera.width) * static_cast<std::size_t>(camera.height);
  if (rgb_cotangent.size() != 3 * pixels) throw InvalidInput("image cotangent shape does not match the camera");
  if (!alpha_cotangent.empty() && alpha_cotangent.size() != pixels)
    throw InvalidInput("alpha cotangent shape does not match the camera");

  Rasterizer raster(cloud, camera, ground, settings);
  const int tiles = raster.tile_count();
  std::vector<std::vector<KernelGrad2d>> tile_grads(static_cast<std::size_t>(tiles));
  std::vector<std::vector<std::pair<int, double>>> tile_shadow(static_cast<std::size_t>(tiles));

  parallel_for(static_cast<std::size_t>(tiles), [&](std::size_t tile) {
    const auto& list = raster.tile_list(static_cast<int>(tile));
    auto& grads = tile_grads[tile];
    grads.assign(list.size(), {});
    struct Hit {
      std::size_t slot;
      double alpha, q, dx, dy, transmittance;
    };
    std::vector<Hit> hits;
    raster.for_each_pixel(static_cast<int>(tile), [&](int x, int y) {
      std::size_t i = static_cast<std::size_t>(y * camera.width + x);
      Vec3 g_rgb(rgb_cotangent[3 * i], rgb_cotangent[3 * i + 1], rgb_cotangent[3 * i + 2]);
      double g_alpha = alpha_cotangent.empty() ? 0.0 : alpha_cotangent[i];
      if (g_rgb.isZero(0.0) && g_alpha == 0.0) return;

      double px = x + 0.5, py = y + 0.5;
      hits.clear();
      double transmittance = 1.0;
      for (std::size_t s = 0; s < list.size(); ++s) {
        double alpha, q, dx, dy;
        if (!raster.evaluate(list[s], px, py, alpha, q, dx, dy)) continue;
        hits.push_back({s, alpha, q, dx, dy, transmittance});
        transmittance *= 1.0 - alpha;
      }
      ShadowHit shadow = raster.background(x, y);
      Vec3 bg = raster.background_color(shadow);

      // Back to front: `behind` is the color seen through the current
      // kernel, `after` the transmittance of everything behind it.
      Vec3 behind = bg;
      double after = 1.0;
      for (auto it = hits.rbegin(); it != hits.rend(); ++it) {
        const Projected& p = raster.kernel(list[it->slot]);
        KernelGrad2d& g = grads[it->slot];
        double d_alpha = it->transmittance * g_rgb.dot(p.color - behind) + g_alpha * it->transmittance * after;
        g.color += it->alpha * it->transmittance * g_rgb;
        double gauss = std::exp(-0.5 * it->q);
        g.opacity += d_alpha * gauss;
        double d_q = -0.5 * it->alpha * d_alpha;
        g.ca += d_q * it->dx * it->dx;
        g.cb += d_q * 2.0 * it->dx * it->dy;
        g.cc += d_q * it->dy * it->dy;
        g.u += -d_q * (2.0 * p.ca * it->dx + 2.0 * p.cb * it->dy);
        g.v += -d_q * (2.0 * p.cb * it->dx + 2.0 * p.cc * it->dy);
        behind = it->alpha * p.color + (1.0 - it->alpha) * behind;
        after *= 1.0 - it->alpha;
      }
      if (shadow.caster >= 0) {
        // bg = base · (1 − s_max e^{−β d}), d = y_caster − y_ground
        double ds = ground.shadow_max * ground.shadow_decay * std::exp(-ground.shadow_decay * shadow.distance);
        double g_d = transmittance * g_rgb.dot(shadow.base) * ds;
        tile_shadow[tile].emplace_back(shadow.caster, g_d);
      }
    });
  });

  // Fixed-order reduction keeps the result independent of the schedule.
  const int n = cloud.size();
  std::vector<KernelGrad2d> total(static_cast<std::size_t>(n));
  CloudGrad out(n);
  for (int t = 0; t < tiles; ++t) {
    const auto& list = raster.tile_list(t);
    for (std::size_t s = 0; s < list.size(); ++s) {
      KernelGrad2d& dst = total[static_cast<std::size_t>(list[s])];
      const KernelGrad2d& src = tile_grads[static_cast<std::size_t>(t)][s];
      dst.u += src.u;
      dst.v += src.v;
      dst.ca += src.ca;
      dst.cb += src.cb;
      dst.cc += src.cc;
      dst.opacity += src.opacity;
      dst.color += src.color;
    }
    for (const auto& [k, g] : tile_shadow[static_cast<std::size_t>(t)]) out.centers[static_cast<std::size_t>(k)].y() += g;
  }

  const Mat3& rc = camera.world_to_camera.rotation;
  for (int k = 0; k < n; ++k) {
    const Projected& p = raster.kernel(k);
    if (!p.active) continue;
    const KernelGrad2d& g = total[static_cast<std::size_t>(k)];
    std::size_t ks = static_cast<std::size_t>(k);
    out.opacities[ks] += g.opacity;
    Vec3 raw = 0.5 + kShC0 * cloud.sh_dc[ks].array();
    for (int ch = 0; ch < 3; ++ch)
      if (raw[ch] > 0.0 && raw[ch] < 1.0) out.sh_dc[ks][ch] += kShC0 * g.color[ch];

    // conic -> 2D covariance: dΣ = −Q G Q
    Eigen::Matrix2d conic;
    conic << p.ca, p.cb, p.cb, p.cc;
    Eigen::Matrix2d g_conic;
    g_conic << g.ca, 0.5 * g.cb, 0.5 * g.cb, g.cc;
    Eigen::Matrix2d g_cov2 = -conic * g_conic * conic;

    double x = p.cam.x(), y = p.cam.y(), z = p.cam.z();
    Eigen::Matrix<double, 2, 3> j;
    j << camera.fx / z, 0.0, -camera.fx * x / (z * z), 0.0, camera.fy / z, -camera.fy * y / (z * z);
    Mat3 g_cov_cam = j.transpose() * g_cov2 * j;
    Eigen::Matrix<double, 2, 3> g_j = 2.0 * g_cov2 * j * p.cov_cam;
    out.covariances[ks] += rc.transpose() * g_cov_cam * rc;

    Vec3 g_cam;
    g_cam.x() = g.u * camera.fx / z + g_j(0, 2) * (-camera.fx / (z * z));
    g_cam.y() = g.v * camera.fy / z + g_j(1, 2) * (-camera.fy / (z * z));
    g_cam.z() = -g.u * camera.fx * x / (z * z) - g.v * camera.fy * y / (z * z) + g_j(0, 0) * (-camera.fx / (z * z)) +
                g_j(0, 2) * (2.0 * camera.fx * x / (z * z * z)) + g_j(1, 1) * (-camera.fy / (z * z)) +
                g_j(1, 2) * (2.0 * camera.fy * y / (z * z * z));
    out.centers[ks] += rc.transpose() * g_cam;
  }
  return out;
}

std::uint64_t render_support_hash(const GaussianCloud& cloud, const Camera& camera, const GroundConfig& ground,
                                  const RenderSettings& settings) {
  Rasterizer raster(cloud, camera, ground, settings);
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&](std::uint64_t v) {
    h ^= v;
    h *= 1099511628211ULL;
  };
  for (int k = 0; k < cloud.size(); ++k) mix(raster.kernel(k).active ? 1 : 2);
  for (int t = 0; t < raster.tile_count(); ++t) {
    const auto& list = raster.tile_list(t);
    raster.for_each_pixel(t, [&](int x, int y) {
      mix(0xFFFF);
      for (int k : list) {
        double alpha, q, dx, dy;
        if (raster.evaluate(k, x + 0.5, y + 0.5, alpha, q, dx, dy)) mix(static_cast<std::uint64_t>(k));
      }
      ShadowHit s = raster.background(x, y);
      mix(static_cast<std::uint64_t>(s.caster + 7));
      mix(s.ground ? (s.base == ground.color_a ? 3 : 4) : 5);
    });
  }
  return h;
}

std::vector<RigidTransform> relative_transforms(std::span<const RigidTransform> deformed,
                                                std::span<const RigidTransform> rest) {
  if (deformed.size() != rest.size()) throw InvalidInput("deformed and rest transform counts differ");
  std::vector<RigidTransform> out;
  out.reserve(deformed.size());
  for (std::size_t b = 0; b < deformed.size(); ++b) out.push_back(deformed[b] * rest[b].inverse());
  return out;
}

std::vector<TransformGrad> relative_transforms_adjoint(std::span<const RigidTransform> rest,
                                                       std::span<const TransformGrad> relative_cotangent) {
  std::vector<TransformGrad> out(rest.size());
  for (std::size_t b = 0; b < rest.size(); ++b) {
    const TransformGrad& g = relative_cotangent[b];
    Vec3 s = rest[b].rotation.transpose() * rest[b].translation;
    out[b].rotation = g.rotation * rest[b].rotation - g.translation * s.transpose();
    out[b].translation = g.translation;
  }
  return out;
}

namespace {

void check_weights(const GaussianCloud& cloud, std::size_t bones, const Eigen::MatrixXd& weights) {
  if (weights.rows() != cloud.size() || weights.cols() != static_cast<Eigen::Index>(bones))
    throw InvalidInput("kernel weight matrix is " + std::to_string(weights.rows()) + "x" +
                       std::to_string(weights.cols()) + ", expected " + std::to_string(cloud.size()) + "x" +
                       std::to_string(bones));
  for (Eigen::Index p = 0; p < weights.rows(); ++p)
    if (std::abs(weights.row(p).sum() - 1.0) > 1e-6)
      throw InvalidInput("kernel " + std::to_string(p) + " weights do not sum to 1");
}

constexpr std::size_t kDeformBlock = 256;

}  // namespace

GaussianCloud deform_cloud(const GaussianCloud& cloud, std::span<const RigidTransform> relative,
                           const Eigen::MatrixXd& weights) {
  check_weights(cloud, relative.size(), weights);
  GaussianCloud out = cloud;
  parallel_for(static_cast<std::size_t>(cloud.size()), [&](std::size_t p) {
    Vec3 x = Vec3::Zero();
    Mat3 grad = Mat3::Zero();
    for (std::size_t b = 0; b < relative.size(); ++b) {
      double w = weights(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(b));
      if (w == 0.0) continue;
      x += w * relative[b].apply(cloud.centers[p]);
      grad += w * relative[b].rotation;
    }
    out.centers[p] = x;
    out.covariances[p] = grad * cloud.covariances[p] * grad.transpose();
  });
  return out;
}

GaussianCloud deform_cloud(const GaussianCloud& cloud, std::span<const RigidTransform> deformed,
                           std::span<const RigidTransform> rest, const Eigen::MatrixXd& weights) {
  auto rel = relative_transforms(deformed, rest);
  return deform_cloud(cloud, rel, weights);
}

std::vector<TransformGrad> deform_adjoint(const GaussianCloud& cloud, std::span<const RigidTransform> relative,
                                          const Eigen::MatrixXd& weights, const CloudGrad& cotangent) {
  check_weights(cloud, relative.size(), weights);
  const std::size_t n = static_cast<std::size_t>(cloud.size());
  const std::size_t blocks = (n + kDeformBlock - 1) / kDeformBlock;
  std::vector<std::vector<TransformGrad>> partial(blocks, std::vector<TransformGrad>(relative.size()));
  parallel_for(blocks, [&](std::size_t blk) {
    auto& acc = partial[blk];
    for (std::size_t p = blk * kDeformBlock; p < std::min(n, (blk + 1) * kDeformBlock); ++p) {
      Mat3 grad = Mat3::Zero();
      for (std::size_t b = 0; b < relative.size(); ++b)
        grad += weights(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(b)) * relative[b].rotation;
      const Mat3& g_cov = cotangent.covariances[p];
      Mat3 g_grad = (g_cov + g_cov.transpose()) * grad * cloud.covariances[p];
      Mat3 g_rot = cotangent.centers[p] * cloud.centers[p].transpose() + g_grad;
      for (std::size_t b = 0; b < relative.size(); ++b) {
        double w = weights(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(b));
        if (w == 0.0) continue;
        acc[b].rotation += w * g_rot;
        acc[b].translation += w * cotangent.centers[p];
      }
    }
  });
  std::vector<TransformGrad> out(relative.size());
  for (const auto& acc : partial)
    for (std::size_t b = 0; b < relative.size(); ++b) out[b] += acc[b];
  return out;
}

Eigen::AlignedBox3d cloud_bounds(const GaussianCloud& cloud) {
  Eigen::AlignedBox3d box;
  for (const Vec3& c : cloud.centers) box.extend(c);
  return box;
}

std::vector<Camera> follow_camera(std::span<const Eigen::AlignedBox3d> clip_bounds, const Camera& base, int window) {
  if (window < 1) throw InvalidInput("camera follow window must be >= 1");
  const int f = static_cast<int>(clip_bounds.size());
  std::vector<Vec3> centers;
  for (const auto& box : clip_bounds) centers.push_back(box.isEmpty() ? Vec3::Zero() : Vec3(box.center()));
  std::vector<Vec3> smoothed(static_cast<std::size_t>(f));
  for (int i = 0; i < f; ++i) {
    int lo = std::max(0, i - (window - 1) / 2);
    int hi = std::min(f - 1, i + window / 2);
    Vec3 sum = Vec3::Zero();
    for (int k = lo; k <= hi; ++k) sum += centers[static_cast<std::size_t>(k)];
    smoothed[static_cast<std::size_t>(i)] = sum / static_cast<double>(hi - lo + 1);
  }
  std::vector<Camera> out;
  for (int i = 0; i < f; ++i) {
    Camera cam = base;
    Vec3 shift = smoothed[static_cast<std::size_t>(i)] - smoothed[0];
    cam.world_to_camera.translation -= cam.world_to_camera.rotation * shift;
    out.push_back(cam);
  }
  return out;
}

}  // namespace akd
