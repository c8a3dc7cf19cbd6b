#pragma once

#include "akd/math.hpp"
#include "akd/rng.hpp"
#include "akd/guidance.hpp"
#include "akd/skeleton.hpp"

#include <cstdint>
#include <functional>
#include <vector>

namespace akd::testing {

/// Deterministic test RNG.
class Random {
 public:
  explicit Random(std::uint64_t seed) : rng_(seed) {}
  double uniform(double lo = 0.0, double hi = 1.0) { return rng_.uniform(lo, hi); }
  int integer(int lo, int hi) { return lo + static_cast<int>(rng_.next() % static_cast<std::uint64_t>(hi - lo + 1)); }
  Vec3 vec3(double lo = -1.0, double hi = 1.0) { return {uniform(lo, hi), uniform(lo, hi), uniform(lo, hi)}; }
  Vec3 unit() {
    for (;;) {
      Vec3 v = vec3();
      double n = v.norm();
      if (n > 0.2 && n <= 1.0) return v / n;
    }
  }
  Mat3 rotation() { return exp_so3(vec3(-3.0, 3.0)); }
  RigidTransform transform(double spread = 1.0) { return {rotation(), vec3(-spread, spread)}; }

 private:
  SplitMix64 rng_;
};

/// Serial chain along +x. Bone frames at cuboid centers, consecutive centers
/// `length` apart, joint anchors at the parent's +x tip.
Skeleton make_chain(int bones, double length = 1.0, double half_width = 0.1, double density = 1000.0);

/// Random tree with random rest frames, joint axes and anchors.
Skeleton random_skeleton(Random& rng, int bones);

std::vector<Vec3> random_angles(Random& rng, int joints, double spread = 1.0);

/// Chain of `bones` cuboids along +x, centered over the origin at height
/// `lift`, with `kernels` Gaussians sampled inside the cuboids and smooth
/// distance-based skin weights. Ground enabled at y = 0.
AssetBundle chain_asset(int bones, int kernels, std::uint64_t seed, double length = 0.3, double lift = 0.4);

/// Camera looking at the chain_asset from the front.
Camera chain_camera(int size);

/// Central difference of a scalar function along every coordinate of x.
std::vector<double> central_difference(const std::function<double(const std::vector<double>&)>& f,
                                       std::vector<double> x, double step);

/// max |a - b| / max(|b|_inf, floor)
double relative_error(const std::vector<double>& a, const std::vector<double>& b, double floor = 1e-8);

}  // namespace akd::testing
