#include "akd/skinning.hpp"

#include "akd/parallel.hpp"

#include <Eigen/SparseCholesky>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace akd {

namespace {

class DisjointSets {
 public:
  explicit DisjointSets(int n) : parent_(static_cast<std::size_t>(n)) { std::iota(parent_.begin(), parent_.end(), 0); }
  int find(int x) {
    while (parent_[static_cast<std::size_t>(x)] != x) {
      parent_[static_cast<std::size_t>(x)] = parent_[static_cast<std::size_t>(parent_[static_cast<std::size_t>(x)])];
      x = parent_[static_cast<std::size_t>(x)];
    }
    return x;
  }
  void unite(int a, int b) {
    a = find(a);
    b = find(b);
    if (a != b) parent_[static_cast<std::size_t>(std::max(a, b))] = std::min(a, b);
  }

 private:
  std::vector<int> parent_;
};

double cotangent(const Vec3& u, const Vec3& v, double clamp) {
  double c = u.dot(v) / std::max(u.cross(v).norm(), 1e-300);
  return std::clamp(c, -clamp, clamp);
}

std::vector<std::vector<int>> component_members(const Mesh& mesh) {
  std::vector<std::vector<int>> members(static_cast<std::size_t>(mesh.component_count()));
  for (int v = 0; v < mesh.vertex_count(); ++v)
    members[static_cast<std::size_t>(mesh.component_labels[static_cast<std::size_t>(v)])].push_back(v);
  return members;
}

Vec3 closest_on_segment(const Vec3& p, const Vec3& a, const Vec3& b) {
  Vec3 d = b - a;
  double len2 = d.squaredNorm();
  double s = len2 > 0.0 ? std::clamp((p - a).dot(d) / len2, 0.0, 1.0) : 0.0;
  return a + s * d;
}

}  // namespace

int Mesh::component_count() const {
  if (component_labels.empty()) return 0;
  return *std::max_element(component_labels.begin(), component_labels.end()) + 1;
}

Mesh make_mesh(std::vector<Vec3> vertices, std::vector<std::array<int, 3>> faces) {
  Mesh mesh;
  mesh.vertices = std::move(vertices);
  mesh.faces = std::move(faces);
  const int n = mesh.vertex_count();
  for (std::size_t v = 0; v < mesh.vertices.size(); ++v)
    if (!mesh.vertices[v].allFinite()) throw InvalidInput("mesh vertex " + std::to_string(v) + " is not finite");
  DisjointSets sets(n);
  for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
    const auto& face = mesh.faces[f];
    for (int i : face)
      if (i < 0 || i >= n) throw InvalidInput("mesh face " + std::to_string(f) + " has an out-of-range index");
    const Vec3& a = mesh.vertices[static_cast<std::size_t>(face[0])];
    const Vec3& b = mesh.vertices[static_cast<std::size_t>(face[1])];
    const Vec3& c = mesh.vertices[static_cast<std::size_t>(face[2])];
    if (0.5 * (b - a).cross(c - a).norm() <= 1e-12)
      throw InvalidInput("mesh face " + std::to_string(f) + " is degenerate");
    sets.unite(face[0], face[1]);
    sets.unite(face[0], face[2]);
  }
  // Dense labels in order of first appearance.
  std::vector<int> relabel(static_cast<std::size_t>(n), -1);
  int next = 0;
  mesh.component_labels.resize(static_cast<std::size_t>(n));
  for (int v = 0; v < n; ++v) {
    int r = sets.find(v);
    if (relabel[static_cast<std::size_t>(r)] < 0) relabel[static_cast<std::size_t>(r)] = next++;
    mesh.component_labels[static_cast<std::size_t>(v)] = relabel[static_cast<std::size_t>(r)];
  }
  return mesh;
}

void SkinWeights::validate(double tolerance) const {
  for (Eigen::Index r = 0; r < matrix.rows(); ++r) {
    if (!matrix.row(r).allFinite()) throw InvalidInput("weight row " + std::to_string(r) + " is not finite");
    if ((matrix.row(r).array() < 0.0).any()) throw InvalidInput("weight row " + std::to_string(r) + " has a negative entry");
    if (std::abs(matrix.row(r).sum() - 1.0) > tolerance)
      throw InvalidInput("weight row " + std::to_string(r) + " does not sum to 1");
  }
}

SparseMatrix cotangent_laplacian(const Mesh& mesh, double cotangent_clamp) {
  const int n = mesh.vertex_count();
  std::vector<Eigen::Triplet<double>> triplets;
  triplets.reserve(mesh.faces.size() * 12);
  for (const auto& face : mesh.faces) {
    for (int k = 0; k < 3; ++k) {
      int i = face[static_cast<std::size_t>((k + 1) % 3)];
      int j = face[static_cast<std::size_t>((k + 2) % 3)];
      const Vec3& opposite = mesh.vertices[static_cast<std::size_t>(face[static_cast<std::size_t>(k)])];
      double w = 0.5 * cotangent(mesh.vertices[static_cast<std::size_t>(i)] - opposite,
                                 mesh.vertices[static_cast<std::size_t>(j)] - opposite, cotangent_clamp);
      triplets.emplace_back(i, j, w);
      triplets.emplace_back(j, i, w);
      triplets.emplace_back(i, i, -w);
      triplets.emplace_back(j, j, -w);
    }
  }
  SparseMatrix lap(n, n);
  lap.setFromTriplets(triplets.begin(), triplets.end());
  return lap;
}

// ---------------------------------------------------------------------------
// Geometry queries

SurfacePoint closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) {
  // Voronoi-region walk over vertices, edges and the face interior.
  SurfacePoint out;
  auto finish = [&](double u, double v, double w) {
    out.barycentric = Vec3(u, v, w);
    out.point = u * a + v * b + w * c;
    out.distance2 = (p - out.point).squaredNorm();
    return out;
  };
  Vec3 ab = b - a, ac = c - a, ap = p - a;
  double d1 = ab.dot(ap), d2 = ac.dot(ap);
  if (d1 <= 0.0 && d2 <= 0.0) return finish(1.0, 0.0, 0.0);
  Vec3 bp = p - b;
  double d3 = ab.dot(bp), d4 = ac.dot(bp);
  if (d3 >= 0.0 && d4 <= d3) return finish(0.0, 1.0, 0.0);
  double vc = d1 * d4 - d3 * d2;
  if (vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0) {
    double v = d1 / (d1 - d3);
    return finish(1.0 - v, v, 0.0);
  }
  Vec3 cp = p - c;
  double d5 = ab.dot(cp), d6 = ac.dot(cp);
  if (d6 >= 0.0 && d5 <= d6) return finish(0.0, 0.0, 1.0);
  double vb = d5 * d2 - d1 * d6;
  if (vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0) {
    double w = d2 / (d2 - d6);
    return finish(1.0 - w, 0.0, w);
  }
  double va = d3 * d6 - d5 * d4;
  if (va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0) {
    double w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
    return finish(0.0, 1.0 - w, w);
  }
  double denom = 1.0 / (va + vb + vc);
  double v = vb * denom;
  double w = vc * denom;
  return finish(1.0 - v - w, v, w);
}

bool segment_crosses_triangle(const Vec3& p, const Vec3& q, const Vec3& a, const Vec3& b, const Vec3& c) {
  constexpr double kBaryEps = 1e-12;
  constexpr double kEndEps = 1e-9;
  Vec3 d = q - p;
  Vec3 e1 = b - a, e2 = c - a;
  Vec3 h = d.cross(e2);
  double det = e1.dot(h);
  // Tangential contact does not block.
  if (std::abs(det) <= 1e-12 * e1.cross(e2).norm() * d.norm()) return false;
  double inv = 1.0 / det;
  Vec3 s = p - a;
  double u = inv * s.dot(h);
  if (u < -kBaryEps || u > 1.0 + kBaryEps) return false;
  Vec3 qv = s.cross(e1);
  double v = inv * d.dot(qv);
  if (v < -kBaryEps || u + v > 1.0 + kBaryEps) return false;
  double t = inv * e2.dot(qv);
  return t > kEndEps && t < 1.0 - kEndEps;
}

TriangleBvh::TriangleBvh(const Mesh& mesh) : mesh_(&mesh), faces_(mesh.faces.size()) {
  std::iota(faces_.begin(), faces_.end(), 0);
  if (!faces_.empty()) build(0, static_cast<int>(faces_.size()), 0);
}

int TriangleBvh::build(int first, int count, int depth) {
  Node node;
  auto corner = [&](int f, int k) -> const Vec3& {
    return mesh_->vertices[static_cast<std::size_t>(mesh_->faces[static_cast<std::size_t>(f)][static_cast<std::size_t>(k)])];
  };
  Eigen::AlignedBox3d centroids;
  for (int i = first; i < first + count; ++i) {
    int f = faces_[static_cast<std::size_t>(i)];
    for (int k = 0; k < 3; ++k) node.box.extend(corner(f, k));
    centroids.extend(Vec3((corner(f, 0) + corner(f, 1) + corner(f, 2)) / 3.0));
  }
  int index = static_cast<int>(nodes_.size());
  nodes_.push_back(node);
  if (count <= 4 || depth > 40) {
    nodes_[static_cast<std::size_t>(index)].first = first;
    nodes_[static_cast<std::size_t>(index)].count = count;
    return index;
  }
  Eigen::Index axis;
  centroids.sizes().maxCoeff(&axis);
  int mid = first + count / 2;
  std::nth_element(faces_.begin() + first, faces_.begin() + mid, faces_.begin() + first + count, [&](int x, int y) {
    double cx = corner(x, 0)[axis] + corner(x, 1)[axis] + corner(x, 2)[axis];
    double cy = corner(y, 0)[axis] + corner(y, 1)[axis] + corner(y, 2)[axis];
    return cx < cy || (cx == cy && x < y);
  });
  int left = build(first, mid - first, depth + 1);
  int right = build(mid, first + count - mid, depth + 1);
  nodes_[static_cast<std::size_t>(index)].left = left;
  nodes_[static_cast<std::size_t>(index)].right = right;
  return index;
}

SurfacePoint TriangleBvh::closest_point(const Vec3& p) const {
  SurfacePoint best;
  best.distance2 = std::numeric_limits<double>::infinity();
  if (nodes_.empty()) return best;
  std::vector<int> stack{0};
  while (!stack.empty()) {
    const Node& node = nodes_[static_cast<std::size_t>(stack.back())];
    stack.pop_back();
    if (node.box.squaredExteriorDistance(p) > best.distance2) continue;
    if (node.left < 0) {
      for (int i = node.first; i < node.first + node.count; ++i) {
        int f = faces_[static_cast<std::size_t>(i)];
        const auto& face = mesh_->faces[static_cast<std::size_t>(f)];
        SurfacePoint sp = closest_point_on_triangle(p, mesh_->vertices[static_cast<std::size_t>(face[0])],
                                                    mesh_->vertices[static_cast<std::size_t>(face[1])],
                                                    mesh_->vertices[static_cast<std::size_t>(face[2])]);
        // Ties resolve to the lowest face index so results are order-free.
        if (sp.distance2 < best.distance2 || (sp.distance2 == best.distance2 && f < best.face)) {
          best = sp;
          best.face = f;
        }
      }
      continue;
    }
    const Node& l = nodes_[static_cast<std::size_t>(node.left)];
    const Node& r = nodes_[static_cast<std::size_t>(node.right)];
    double dl = l.box.squaredExteriorDistance(p);
    double dr = r.box.squaredExteriorDistance(p);
    if (dl < dr) {
      stack.push_back(node.right);
      stack.push_back(node.left);
    } else {
      stack.push_back(node.left);
      stack.push_back(node.right);
    }
  }
  return best;
}

bool TriangleBvh::segment_blocked(const Vec3& p, const Vec3& q, int skip_vertex) const {
  if (nodes_.empty()) return false;
  Vec3 d = q - p;
  auto hits_box = [&](const Eigen::AlignedBox3d& box) {
    double t0 = 0.0, t1 = 1.0;
    for (int a = 0; a < 3; ++a) {
      double lo = box.min()[a] - 1e-12, hi = box.max()[a] + 1e-12;
      if (std::abs(d[a]) < 1e-300) {
        if (p[a] < lo || p[a] > hi) return false;
        continue;
      }
      double ta = (lo - p[a]) / d[a];
      double tb = (hi - p[a]) / d[a];
      if (ta > tb) std::swap(ta, tb);
      t0 = std::max(t0, ta);
      t1 = std::min(t1, tb);
      if (t0 > t1) return false;
    }
    return true;
  };
  std::vector<int> stack{0};
  while (!stack.empty()) {
    const Node& node = nodes_[static_cast<std::size_t>(stack.back())];
    stack.pop_back();
    if (!hits_box(node.box)) continue;
    if (node.left >= 0) {
      stack.push_back(node.left);
      stack.push_back(node.right);
      continue;
    }
    for (int i = node.first; i < node.first + node.count; ++i) {
      const auto& face = mesh_->faces[static_cast<std::size_t>(faces_[static_cast<std::size_t>(i)])];
      if (face[0] == skip_vertex || face[1] == skip_vertex || face[2] == skip_vertex) continue;
      if (segment_crosses_triangle(p, q, mesh_->vertices[static_cast<std::size_t>(face[0])],
                                   mesh_->vertices[static_cast<std::size_t>(face[1])],
                                   mesh_->vertices[static_cast<std::size_t>(face[2])]))
        return true;
    }
  }
  return false;
}

// ---------------------------------------------------------------------------
// Weights

BoneVisibility bone_visibility(const Mesh& mesh, const Skeleton& skeleton,
                               std::span<const RigidTransform> rest_transforms) {
  const int nv = mesh.vertex_count();
  const int nb = skeleton.bone_count();
  if (static_cast<int>(rest_transforms.size()) != nb) throw InvalidInput("rest transform count does not match bones");
  std::vector<std::pair<Vec3, Vec3>> segments;
  for (int b = 0; b < nb; ++b) {
    auto [s0, s1] = skeleton.segment(b);
    segments.emplace_back(rest_transforms[static_cast<std::size_t>(b)].apply(s0),
                          rest_transforms[static_cast<std::size_t>(b)].apply(s1));
  }
  TriangleBvh bvh(mesh);
  BoneVisibility out;
  out.visible.resize(nv, nb);
  out.distance.resize(nv, nb);
  parallel_for(static_cast<std::size_t>(nv), [&](std::size_t vi) {
    int v = static_cast<int>(vi);
    const Vec3& p = mesh.vertices[vi];
    for (int b = 0; b < nb; ++b) {
      Vec3 c = closest_on_segment(p, segments[static_cast<std::size_t>(b)].first, segments[static_cast<std::size_t>(b)].second);
      out.distance(v, b) = (c - p).norm();
      out.visible(v, b) = !bvh.segment_blocked(p, c, v);
    }
  });
  return out;
}

HeatSystem assemble_heat_system(const Mesh& mesh, const BoneVisibility& visibility, const SkinningOptions& options) {
  const int nv = mesh.vertex_count();
  const Eigen::Index nb = visibility.distance.cols();
  if (visibility.distance.rows() != nv || visibility.visible.rows() != nv || visibility.visible.cols() != nb)
    throw InvalidInput("visibility shape does not match the mesh");
  if (nb == 0) throw InvalidInput("skinning needs at least one bone");

  HeatSystem sys;
  sys.visible = visibility.visible;
  Eigen::MatrixXd dist = visibility.distance.cwiseMax(options.distance_floor);

  // A component that sees no bone at all gets its nearest bone.
  auto members = component_members(mesh);
  for (std::size_t comp = 0; comp < members.size(); ++comp) {
    bool any = false;
    for (int v : members[comp]) any = any || sys.visible.row(v).any();
    if (any) continue;
    Eigen::Index best_bone = 0;
    double best = std::numeric_limits<double>::infinity();
    for (int v : members[comp]) {
      Eigen::Index b;
      double d = dist.row(v).minCoeff(&b);
      if (d < best) {
        best = d;
        best_bone = b;
      }
    }
    for (int v : members[comp]) sys.visible(v, best_bone) = true;
  }

  sys.heat = Eigen::MatrixXd::Zero(nv, nb);
  sys.indicator = Eigen::MatrixXd::Zero(nv, nb);
  for (int v = 0; v < nv; ++v) {
    double nearest = std::numeric_limits<double>::infinity();
    for (Eigen::Index b = 0; b < nb; ++b) {
      if (!sys.visible(v, b)) continue;
      sys.heat(v, b) = options.heat_constant / (dist(v, b) * dist(v, b));
      nearest = std::min(nearest, dist(v, b));
    }
    if (!std::isfinite(nearest)) continue;
    for (Eigen::Index b = 0; b < nb; ++b)
      if (sys.visible(v, b) && dist(v, b) <= nearest * (1.0 + options.tie_tolerance)) sys.indicator(v, b) = 1.0;
  }
  return sys;
}

Eigen::VectorXd solve_bone_field(const Mesh& mesh, const SparseMatrix& laplacian, const HeatSystem& system, int bone) {
  const int nv = mesh.vertex_count();
  auto members = component_members(mesh);
  // Only components with heat sources carry a nonsingular block.
  std::vector<int> active_index(static_cast<std::size_t>(nv), -1);
  std::vector<int> active;
  for (const auto& comp : members) {
    bool heated = false;
    for (int v : comp) heated = heated || system.heat(v, bone) > 0.0;
    if (!heated) continue;
    for (int v : comp) {
      active_index[static_cast<std::size_t>(v)] = static_cast<int>(active.size());
      active.push_back(v);
    }
  }
  Eigen::VectorXd field = Eigen::VectorXd::Zero(nv);
  if (active.empty()) return field;

  const int n = static_cast<int>(active.size());
  std::vector<Eigen::Triplet<double>> triplets;
  Eigen::VectorXd rhs(n);
  for (int i = 0; i < n; ++i) {
    int v = active[static_cast<std::size_t>(i)];
    double h = system.heat(v, bone);
    triplets.emplace_back(i, i, h);
    rhs[i] = h * system.indicator(v, bone);
    for (SparseMatrix::InnerIterator it(laplacian, v); it; ++it) {
      int w = active_index[static_cast<std::size_t>(it.row())];
      if (w >= 0) triplets.emplace_back(w, i, -it.value());
    }
  }
  SparseMatrix a(n, n);
  a.setFromTriplets(triplets.begin(), triplets.end());
  Eigen::SimplicialLDLT<SparseMatrix> solver(a);
  auto fail = [&](const std::string& why) {
    int comp = mesh.component_labels[static_cast<std::size_t>(active.front())];
    throw SingularComponent(comp, "bone " + std::to_string(bone) + " " + why);
  };
  if (solver.info() != Eigen::Success) fail("system factorization failed");
  Eigen::VectorXd x = solver.solve(rhs);
  if (solver.info() != Eigen::Success || !x.allFinite()) fail("system solve failed");
  for (int i = 0; i < n; ++i) field[active[static_cast<std::size_t>(i)]] = x[i];
  return field;
}

SkinWeights solve_weights(const Mesh& mesh, const SparseMatrix& laplacian, const BoneVisibility& visibility,
                          const SkinningOptions& options) {
  HeatSystem sys = assemble_heat_system(mesh, visibility, options);
  const int nv = mesh.vertex_count();
  const int nb = static_cast<int>(sys.heat.cols());

  auto members = component_members(mesh);
  for (std::size_t comp = 0; comp < members.size(); ++comp) {
    double total = 0.0;
    for (int v : members[comp]) total += sys.heat.row(v).sum();
    if (!(total > 0.0) || !std::isfinite(total))
      throw SingularComponent(static_cast<int>(comp), "no heat source after the visibility fix");
  }

  SkinWeights out;
  out.matrix.resize(nv, nb);
  parallel_for(static_cast<std::size_t>(nb), [&](std::size_t b) {
    out.matrix.col(static_cast<Eigen::Index>(b)) = solve_bone_field(mesh, laplacian, sys, static_cast<int>(b));
  });

  out.matrix = out.matrix.cwiseMax(0.0).cwiseMin(1.0);
  for (int v = 0; v < nv; ++v) {
    double s = out.matrix.row(v).sum();
    if (s > 1e-12) {
      out.matrix.row(v) /= s;
      continue;
    }
    // Nothing diffused here: fall back to the nearest bone.
    Eigen::Index b;
    visibility.distance.row(v).minCoeff(&b);
    out.matrix.row(v).setZero();
    out.matrix(v, b) = 1.0;
  }
  return out;
}

SkinWeights compute_skin_weights(const Mesh& mesh, const Skeleton& skeleton, const SkinningOptions& options) {
  SparseMatrix lap = cotangent_laplacian(mesh, options.cotangent_clamp);
  auto rest = rest_pose(skeleton);
  BoneVisibility vis = bone_visibility(mesh, skeleton, rest);
  return solve_weights(mesh, lap, vis, options);
}

Eigen::MatrixXd transfer_to_kernels(const SkinWeights& weights, const Mesh& mesh, std::span<const Vec3> points) {
  if (weights.rows() != mesh.vertex_count()) throw InvalidInput("weight rows do not match mesh vertices");
  if (mesh.faces.empty()) throw InvalidInput("weight transfer needs a mesh with faces");
  TriangleBvh bvh(mesh);
  Eigen::MatrixXd out(static_cast<Eigen::Index>(points.size()), weights.bones());
  parallel_for(points.size(), [&](std::size_t i) {
    if (!points[i].allFinite()) throw InvalidInput("kernel " + std::to_string(i) + " is not finite");
    SurfacePoint sp = bvh.closest_point(points[i]);
    const auto& face = mesh.faces[static_cast<std::size_t>(sp.face)];
    Eigen::RowVectorXd row = sp.barycentric[0] * weights.matrix.row(face[0]) +
                             sp.barycentric[1] * weights.matrix.row(face[1]) +
                             sp.barycentric[2] * weights.matrix.row(face[2]);
    row = row.cwiseMax(0.0);
    out.row(static_cast<Eigen::Index>(i)) = row / row.sum();
  });
  return out;
}

}  // namespace akd
