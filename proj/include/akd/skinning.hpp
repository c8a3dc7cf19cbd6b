#pragma once

#include "akd/error.hpp"
#include "akd/math.hpp"
#include "akd/skeleton.hpp"

#include <Eigen/Sparse>

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace akd {

using SparseMatrix = Eigen::SparseMatrix<double>;

/// Triangle mesh. component_labels holds a connected-component id per vertex.
struct Mesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 3>> faces;
  std::vector<int> component_labels;

  int vertex_count() const { return static_cast<int>(vertices.size()); }
  int component_count() const;
};

/// Builds a mesh, labels connected components and validates faces
/// (indices in range, area > 1e-12). Throws InvalidInput.
Mesh make_mesh(std::vector<Vec3> vertices, std::vector<std::array<int, 3>> faces);

/// V×B skinning weights; rows are convex combinations over bones.
struct SkinWeights {
  Eigen::MatrixXd matrix;

  int rows() const { return static_cast<int>(matrix.rows()); }
  int bones() const { return static_cast<int>(matrix.cols()); }
  /// Nonnegative entries and unit row sums within `tolerance`; throws InvalidInput.
  void validate(double tolerance = 1e-8) const;
};

struct SkinningOptions {
  double heat_constant = 1.0;      // c in H_jj = c / d_j²
  double distance_floor = 1e-4;    // meters
  double cotangent_clamp = 1e4;
  double tie_tolerance = 1e-9;     // relative; bones this close count as equally near
};

/// Cotangent Laplacian Δ: off-diagonals ½(cot α + cot β) ≥ 0 for Delaunay
/// edges, diagonal minus the row sum. −Δ is positive semidefinite.
SparseMatrix cotangent_laplacian(const Mesh& mesh, double cotangent_clamp = 1e4);

/// Per (vertex, bone) visibility and distance to the bone segment.
struct BoneVisibility {
  Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> visible;  // V×B
  Eigen::MatrixXd distance;                                    // V×B, meters
};

/// A bone is visible from vertex j when the segment from j to the closest
/// point on the bone's segment crosses no triangle transversally.
BoneVisibility bone_visibility(const Mesh& mesh, const Skeleton& skeleton,
                               std::span<const RigidTransform> rest_transforms);

/// Thrown when a component's per-bone systems cannot be solved.
class SingularComponent : public InvalidInput {
 public:
  SingularComponent(int component, const std::string& what)
      : InvalidInput("connected component " + std::to_string(component) + ": " + what), component_(component) {}
  int component() const { return component_; }

 private:
  int component_;
};

/// Diagonal heat terms and nearest-bone indicators of the per-bone systems
/// (−Δ + H_b) w_b = H_b p_b, after the multi-component visibility fix.
struct HeatSystem {
  Eigen::MatrixXd heat;       // V×B diagonal entries of H_b
  Eigen::MatrixXd indicator;  // V×B entries of p_b
  Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> visible;  // after the fix
};

HeatSystem assemble_heat_system(const Mesh& mesh, const BoneVisibility& visibility, const SkinningOptions& options = {});

/// Raw solution of one bone's system; zero on components where H_b vanishes.
Eigen::VectorXd solve_bone_field(const Mesh& mesh, const SparseMatrix& laplacian, const HeatSystem& system, int bone);

/// Solves all bones, clamps to [0,1] and normalizes rows.
SkinWeights solve_weights(const Mesh& mesh, const SparseMatrix& laplacian, const BoneVisibility& visibility,
                          const SkinningOptions& options = {});

/// Convenience: laplacian + visibility + solve with the skeleton in its rest pose.
SkinWeights compute_skin_weights(const Mesh& mesh, const Skeleton& skeleton, const SkinningOptions& options = {});

/// Closest point on a triangle with its barycentric coordinates.
struct SurfacePoint {
  int face = -1;
  Vec3 point = Vec3::Zero();
  Vec3 barycentric = Vec3::Zero();
  double distance2 = 0.0;
};

SurfacePoint closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c);

/// Bounding volume hierarchy over mesh triangles.
class TriangleBvh {
 public:
  explicit TriangleBvh(const Mesh& mesh);

  SurfacePoint closest_point(const Vec3& p) const;
  /// True if the open segment p→q crosses a triangle transversally. Faces
  /// incident to `skip_vertex` are ignored.
  bool segment_blocked(const Vec3& p, const Vec3& q, int skip_vertex = -1) const;

 private:
  struct Node {
    Eigen::AlignedBox3d box;
    int left = -1;
    int right = -1;
    int first = 0;
    int count = 0;
  };
  int build(int first, int count, int depth);

  const Mesh* mesh_;
  std::vector<int> faces_;
  std::vector<Node> nodes_;
};

/// True if the open segment p→q crosses triangle abc transversally.
bool segment_crosses_triangle(const Vec3& p, const Vec3& q, const Vec3& a, const Vec3& b, const Vec3& c);

/// P×B weights for arbitrary points via barycentric interpolation at their
/// closest surface points; rows renormalized to 1.
Eigen::MatrixXd transfer_to_kernels(const SkinWeights& weights, const Mesh& mesh, std::span<const Vec3> points);

}  // namespace akd
