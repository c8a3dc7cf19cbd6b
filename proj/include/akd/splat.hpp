#pragma once

#include "akd/math.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <span>
#include <vector>

namespace akd {

/// Zeroth spherical-harmonic basis constant.
inline constexpr double kShC0 = 0.28209479177387814;

/// Gaussian kernels {σ_p, x_p, Σ_p, C_p}. Only the degree-0 color
/// coefficients are evaluated; higher bands are carried through untouched.
struct GaussianCloud {
  std::vector<Vec3> centers;
  std::vector<Mat3> covariances;
  std::vector<double> opacities;
  std::vector<Vec3> sh_dc;
  std::vector<std::vector<float>> sh_rest;  // empty or one entry per kernel

  int size() const { return static_cast<int>(centers.size()); }
  void add(const Vec3& center, const Mat3& covariance, double opacity, const Vec3& rgb);
  /// Symmetric positive definite covariances, opacities in [0,1]; throws InvalidInput.
  void validate() const;
};

Vec3 sh_dc_from_color(const Vec3& rgb);
/// View-independent color, clamped to [0,1].
Vec3 color_from_sh_dc(const Vec3& dc);

/// Pinhole camera, OpenCV axes (x right, y down, z forward).
struct Camera {
  double fx = 64.0, fy = 64.0, cx = 32.0, cy = 32.0;
  int width = 64, height = 64;
  RigidTransform world_to_camera;

  /// Camera at `eye` looking at `target`; `up` is world up.
  static Camera look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double vertical_fov, int width,
                        int height);
  Vec3 position() const { return world_to_camera.inverse().translation; }
  /// focal > 0, resolution > 0, orthonormal rotation; throws InvalidInput.
  void validate() const;
};

/// Checkerboard ground plane y = height with a vertical-light shadow.
struct GroundConfig {
  bool enabled = true;
  double height = 0.0;
  double tile_size = 0.5;
  Vec3 color_a{0.85, 0.85, 0.85};
  Vec3 color_b{0.35, 0.35, 0.35};
  Vec3 background{1.0, 1.0, 1.0};
  double shadow_max = 0.6;    // s_max in [0,1)
  double shadow_decay = 2.0;  // β, 1/m
  void validate() const;
};

struct RenderSettings {
  double dilation = 0.3;     // added to the projected covariance diagonal, px²
  double near_plane = 0.01;  // meters
  double cutoff = 3.0;       // footprint radius in standard deviations
  int tile = 16;             // pixels
};

/// H×W×3 color plus H×W accumulated alpha, row-major.
struct Image {
  int height = 0;
  int width = 0;
  std::vector<double> rgb;
  std::vector<double> alpha;

  Image() = default;
  Image(int h, int w) : height(h), width(w), rgb(static_cast<std::size_t>(h * w * 3), 0.0), alpha(static_cast<std::size_t>(h * w), 0.0) {}
  Vec3 pixel(int y, int x) const {
    std::size_t i = static_cast<std::size_t>((y * width + x) * 3);
    return {rgb[i], rgb[i + 1], rgb[i + 2]};
  }
};

struct RenderStats {
  int skipped_kernels = 0;  // non-invertible projected covariance
  int culled_kernels = 0;   // behind the near plane or masked below ground
};

/// Shadow multiplier s = 1 − s_max·exp(−β d).
double shadow_factor(double distance, double shadow_max, double shadow_decay);

Image render(const GaussianCloud& cloud, const Camera& camera, const GroundConfig& ground,
             const RenderSettings& settings = {}, RenderStats* stats = nullptr);

struct CloudGrad {
  std::vector<Vec3> centers;
  std::vector<Mat3> covariances;
  std::vector<double> opacities;
  std::vector<Vec3> sh_dc;

  explicit CloudGrad(int n = 0)
      : centers(static_cast<std::size_t>(n), Vec3::Zero()),
        covariances(static_cast<std::size_t>(n), Mat3::Zero()),
        opacities(static_cast<std::size_t>(n), 0.0),
        sh_dc(static_cast<std::size_t>(n), Vec3::Zero()) {}
};

/// Vector-Jacobian product of render. Depth order, footprint cutoffs,
/// the below-ground mask and the shadow-casting kernel are frozen at their
/// forward values. `alpha_cotangent` may be empty.
CloudGrad render_adjoint(const GaussianCloud& cloud, const Camera& camera, const GroundConfig& ground,
                         const RenderSettings& settings, std::span<const double> rgb_cotangent,
                         std::span<const double> alpha_cotangent = {});

/// Hash of every discrete choice render makes (per-pixel contributor
/// lists, culling, shadow casters). Equal hashes mean render is smooth
/// between two inputs.
std::uint64_t render_support_hash(const GaussianCloud& cloud, const Camera& camera, const GroundConfig& ground,
                                  const RenderSettings& settings = {});

/// rest -> deformed transform of each bone: deformed ∘ rest⁻¹.
std::vector<RigidTransform> relative_transforms(std::span<const RigidTransform> deformed,
                                                std::span<const RigidTransform> rest);

/// Linear blend skinning of kernel centers and covariances (P×B weights).
/// Opacities and color coefficients are unchanged.
GaussianCloud deform_cloud(const GaussianCloud& cloud, std::span<const RigidTransform> relative,
                           const Eigen::MatrixXd& weights);
GaussianCloud deform_cloud(const GaussianCloud& cloud, std::span<const RigidTransform> deformed,
                           std::span<const RigidTransform> rest, const Eigen::MatrixXd& weights);

/// Cotangent of the relative bone transforms given the deformed-cloud
/// cotangent (centers and covariances).
std::vector<TransformGrad> deform_adjoint(const GaussianCloud& cloud, std::span<const RigidTransform> relative,
                                          const Eigen::MatrixXd& weights, const CloudGrad& cotangent);

/// Pulls relative-transform cotangents back to the deformed bone transforms.
std::vector<TransformGrad> relative_transforms_adjoint(std::span<const RigidTransform> rest,
                                                       std::span<const TransformGrad> relative_cotangent);

/// Axis-aligned bounds of the kernel centers.
Eigen::AlignedBox3d cloud_bounds(const GaussianCloud& cloud);

/// Per-frame cameras translated so the (window-averaged) bounds center keeps
/// its frame-0 camera-space position. Window w averages the centers of the w
/// frames around each frame, clipped at the clip ends.
std::vector<Camera> follow_camera(std::span<const Eigen::AlignedBox3d> clip_bounds, const Camera& base, int window = 1);

}  // namespace akd
