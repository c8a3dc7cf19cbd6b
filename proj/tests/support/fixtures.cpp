#include "support/fixtures.hpp"

#include <algorithm>
#include <cmath>

namespace akd::testing {

Skeleton make_chain(int bones, double length, double half_width, double density) {
  std::vector<Bone> list;
  for (int b = 0; b < bones; ++b) {
    Bone bone;
    bone.half_extents = Vec3(0.5 * length, half_width, half_width);
    bone.density = density;
    if (b > 0) {
      bone.parent = b - 1;
      bone.rest = RigidTransform::from_translation(Vec3(length, 0.0, 0.0));
      Joint joint;
      joint.anchor = Vec3(0.5 * length, 0.0, 0.0);
      bone.joint = joint;
    }
    list.push_back(bone);
  }
  return Skeleton(std::move(list));
}

Skeleton random_skeleton(Random& rng, int bones) {
  std::vector<Bone> list;
  for (int b = 0; b < bones; ++b) {
    Bone bone;
    bone.half_extents = rng.vec3(0.05, 0.4);
    bone.rest = rng.transform(0.8);
    if (b > 0) {
      bone.parent = rng.integer(0, b - 1);
      Joint joint;
      for (;;) {
        joint.axes = {rng.unit(), rng.unit(), rng.unit()};
        Mat3 basis;
        for (int a = 0; a < 3; ++a) basis.col(a) = joint.axes[static_cast<std::size_t>(a)];
        if (std::abs(basis.determinant()) > 0.2) break;
      }
      joint.anchor = rng.vec3(-0.5, 0.5);
      bone.joint = joint;
    }
    list.push_back(bone);
  }
  return Skeleton(std::move(list));
}

std::vector<Vec3> random_angles(Random& rng, int joints, double spread) {
  std::vector<Vec3> out;
  for (int j = 0; j < joints; ++j) out.push_back(rng.vec3(-spread, spread));
  return out;
}

AssetBundle chain_asset(int bones, int kernels, std::uint64_t seed, double length, double lift) {
  AssetBundle a;
  const double half_width = 0.06;
  Skeleton chain = make_chain(bones, length, half_width);
  std::vector<Bone> list = chain.bones();
  list[0].rest = RigidTransform::from_translation(Vec3(-0.5 * length * (bones - 1), lift, 0.0));
  a.skeleton = Skeleton(std::move(list));

  Random rng(seed);
  std::vector<RigidTransform> rest = rest_pose(a.skeleton);
  a.kernel_weights = Eigen::MatrixXd::Zero(kernels, bones);
  const double sigma = 0.5 * length;
  for (int k = 0; k < kernels; ++k) {
    int b = k % bones;
    Vec3 local = rng.vec3().cwiseProduct(a.skeleton.bone(b).half_extents);
    Vec3 p = rest[static_cast<std::size_t>(b)].apply(local);
    double total = 0.0;
    for (int c = 0; c < bones; ++c) {
      double d = (p - rest[static_cast<std::size_t>(c)].translation).norm();
      double w = std::exp(-d * d / (sigma * sigma));
      a.kernel_weights(k, c) = w;
      total += w;
    }
    a.kernel_weights.row(k) /= total;
    double s = rng.uniform(0.025, 0.045);
    a.cloud.add(p, s * s * Mat3::Identity(), rng.uniform(0.5, 0.9), rng.vec3(0.15, 0.85));
  }
  a.ground.enabled = true;
  a.ground.height = 0.0;
  return a;
}

Camera chain_camera(int size) {
  return Camera::look_at(Vec3(0.0, 0.9, -2.2), Vec3(0.0, 0.3, 0.0), Vec3::UnitY(), 0.7, size, size);
}

std::vector<double> central_difference(const std::function<double(const std::vector<double>&)>& f,
                                       std::vector<double> x, double step) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    double x0 = x[i];
    x[i] = x0 + step;
    double fp = f(x);
    x[i] = x0 - step;
    double fm = f(x);
    x[i] = x0;
    g[i] = (fp - fm) / (2.0 * step);
  }
  return g;
}

double relative_error(const std::vector<double>& a, const std::vector<double>& b, double floor) {
  double scale = floor;
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    scale = std::max(scale, std::abs(b[i]));
    diff = std::max(diff, std::abs(a[i] - b[i]));
  }
  return diff / scale;
}

}  // namespace akd::testing
