#pragma once

#include "akd/skinning.hpp"
#include "akd/splat.hpp"

#include <cstdint>

namespace akd::primitives {

/// Closed box surface, each face split into n×n quads.
Mesh box(const Vec3& center, const Vec3& half_extents, int subdivisions = 2);

/// Subdivided icosahedron.
Mesh icosphere(double radius = 1.0, int subdivisions = 2);

/// Capsule along x centered at the origin: a cylinder of half length
/// `half_length` with hemispherical caps. The triangulation is exactly
/// mirror-symmetric under x -> -x.
Mesh capsule(double radius, double half_length, int body_rings = 9, int cap_rings = 4, int segments = 16);

/// Union of meshes; component labels are recomputed.
Mesh merge(const std::vector<Mesh>& parts);

/// Area-uniform kernels on the surface, optionally jittered along the face
/// normal. Isotropic covariance kernel_scale²·I; color varies with the normal.
GaussianCloud sample_surface(const Mesh& mesh, int count, double kernel_scale, std::uint64_t seed,
                             double normal_jitter = 0.0);

}  // namespace akd::primitives
