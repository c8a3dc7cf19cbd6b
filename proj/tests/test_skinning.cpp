#include "akd/primitives.hpp"
#include "akd/skinning.hpp"
#include "support/fixtures.hpp"

#include <doctest.h>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <set>

using namespace akd;
using namespace akd::testing;

namespace {

// Dense Laplacian from interior angles computed with acos.
Eigen::MatrixXd dense_laplacian(const Mesh& mesh) {
  const int n = mesh.vertex_count();
  Eigen::MatrixXd l = Eigen::MatrixXd::Zero(n, n);
  for (const auto& f : mesh.faces) {
    for (int k = 0; k < 3; ++k) {
      int o = f[static_cast<std::size_t>(k)];
      int i = f[static_cast<std::size_t>((k + 1) % 3)];
      int j = f[static_cast<std::size_t>((k + 2) % 3)];
      Vec3 u = mesh.vertices[static_cast<std::size_t>(i)] - mesh.vertices[static_cast<std::size_t>(o)];
      Vec3 v = mesh.vertices[static_cast<std::size_t>(j)] - mesh.vertices[static_cast<std::size_t>(o)];
      double angle = std::acos(std::clamp(u.normalized().dot(v.normalized()), -1.0, 1.0));
      double w = 0.5 / std::tan(angle);
      l(i, j) += w;
      l(j, i) += w;
    }
  }
  for (int i = 0; i < n; ++i) l(i, i) = -l.row(i).sum();
  return l;
}

double segment_distance(const Vec3& p, const Vec3& a, const Vec3& b) {
  double s = std::clamp((p - a).dot(b - a) / (b - a).squaredNorm(), 0.0, 1.0);
  return (a + s * (b - a) - p).norm();
}

// Brute-force segment/triangle crossing via the signed-volume test.
bool brute_blocked(const Mesh& mesh, const Vec3& p, const Vec3& q, int skip) {
  auto vol = [](const Vec3& a, const Vec3& b, const Vec3& c, const Vec3& d) { return (b - a).cross(c - a).dot(d - a); };
  for (const auto& f : mesh.faces) {
    if (f[0] == skip || f[1] == skip || f[2] == skip) continue;
    const Vec3& a = mesh.vertices[static_cast<std::size_t>(f[0])];
    const Vec3& b = mesh.vertices[static_cast<std::size_t>(f[1])];
    const Vec3& c = mesh.vertices[static_cast<std::size_t>(f[2])];
    Vec3 n = (b - a).cross(c - a);
    double len = (q - p).norm();
    double dp = n.dot(p - a) / n.norm(), dq = n.dot(q - a) / n.norm();
    double plane_eps = 1e-12 * len;
    if (!((dp > plane_eps && dq < -plane_eps) || (dp < -plane_eps && dq > plane_eps))) continue;
    // Edges count as hits so a segment cannot slip between adjacent faces.
    double size = std::max({(b - a).norm(), (c - b).norm(), (a - c).norm()});
    double eps = 1e-10 * len * size * size;
    double e0 = vol(p, q, a, b), e1 = vol(p, q, b, c), e2 = vol(p, q, c, a);
    if ((e0 > -eps && e1 > -eps && e2 > -eps) || (e0 < eps && e1 < eps && e2 < eps)) return true;
  }
  return false;
}

// Surface of a union of unit voxels scaled by `cell`, vertices welded.
Mesh voxel_mesh(const std::set<std::array<int, 3>>& cells, double cell) {
  std::map<std::array<int, 3>, int> index;
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 3>> faces;
  auto vertex = [&](std::array<int, 3> key) {
    auto [it, inserted] = index.emplace(key, static_cast<int>(vertices.size()));
    if (inserted) vertices.emplace_back(key[0] * cell, key[1] * cell, key[2] * cell);
    return it->second;
  };
  for (const auto& c : cells) {
    for (int a = 0; a < 3; ++a) {
      for (int dir : {-1, 1}) {
        auto nb = c;
        nb[static_cast<std::size_t>(a)] += dir;
        if (cells.count(nb)) continue;
        int u = (a + 1) % 3, v = (a + 2) % 3;
        auto corner = [&](int du, int dv) {
          std::array<int, 3> k = c;
          if (dir > 0) k[static_cast<std::size_t>(a)] += 1;
          k[static_cast<std::size_t>(u)] += du;
          k[static_cast<std::size_t>(v)] += dv;
          return vertex(k);
        };
        int p00 = corner(0, 0), p10 = corner(1, 0), p11 = corner(1, 1), p01 = corner(0, 1);
        if (dir > 0) {
          faces.push_back({p00, p10, p11});
          faces.push_back({p00, p11, p01});
        } else {
          faces.push_back({p00, p11, p10});
          faces.push_back({p00, p01, p11});
        }
      }
    }
  }
  return make_mesh(std::move(vertices), std::move(faces));
}

Bone child_bone(int parent, const Vec3& offset, const Vec3& half_extents) {
  Bone b;
  b.parent = parent;
  b.rest = RigidTransform::from_translation(offset);
  b.half_extents = half_extents;
  Joint j;
  j.anchor = offset;
  b.joint = j;
  return b;
}

// Two-bone skeleton along x, segments [-len, 0] and [0, len].
Skeleton symmetric_pair(double len) {
  Bone root;
  root.rest = RigidTransform::from_translation(Vec3(-0.5 * len, 0, 0));
  root.half_extents = Vec3(0.5 * len, 0.05, 0.05);
  return Skeleton({root, child_bone(0, Vec3(len, 0, 0), root.half_extents)});
}

// Three-bone chain along x centered at the origin.
Skeleton centered_chain(double len) {
  Bone root;
  root.rest = RigidTransform::from_translation(Vec3(-len, 0, 0));
  root.half_extents = Vec3(0.5 * len, 0.05, 0.05);
  return Skeleton({root, child_bone(0, Vec3(len, 0, 0), root.half_extents),
                   child_bone(1, Vec3(len, 0, 0), root.half_extents)});
}

// U shape: a hip block with two legs rising from its ends, `scale` meters
// per voxel.
struct UShape {
  Mesh mesh;
  Skeleton skeleton;
};

UShape u_shape(double scale = 0.1) {
  std::set<std::array<int, 3>> cells;
  for (int z = 0; z < 2; ++z) {
    for (int x = 0; x < 6; ++x)
      for (int y = 0; y < 3; ++y) cells.insert({x, y, z});
    for (int y = 3; y < 12; ++y)
      for (int x : {0, 1, 4, 5}) cells.insert({x, y, z});
  }
  Bone hip;
  const double k = 2.0 * scale;
  hip.rest = RigidTransform::from_translation(k * Vec3(1.5, 0.75, 0.5));
  hip.half_extents = k * Vec3(1.2, 0.2, 0.2);
  Vec3 leg = k * Vec3(0.2, 2.0, 0.2);
  return {voxel_mesh(cells, scale),
          Skeleton({hip, child_bone(0, k * Vec3(-1.0, 3.0, 0.0), leg), child_bone(0, k * Vec3(1.0, 3.0, 0.0), leg)})};
}

}  // namespace

TEST_CASE("mesh construction validates faces and labels components") {
  Mesh two = primitives::merge({primitives::box(Vec3::Zero(), Vec3::Ones(), 1), primitives::box(Vec3(5, 0, 0), Vec3::Ones(), 1)});
  CHECK(two.component_count() == 2);
  CHECK_THROWS_AS(make_mesh({Vec3::Zero(), Vec3::UnitX(), Vec3::UnitY()}, {{0, 1, 3}}), InvalidInput);
  CHECK_THROWS_AS(make_mesh({Vec3::Zero(), Vec3::UnitX(), 2.0 * Vec3::UnitX()}, {{0, 1, 2}}), InvalidInput);
}

TEST_CASE("primitives are closed and consistently oriented") {
  for (const Mesh& m : {primitives::box(Vec3(1, 2, 3), Vec3(0.5, 0.2, 0.3), 3), primitives::icosphere(0.7, 2),
                        primitives::capsule(0.3, 1.0)}) {
    std::map<std::pair<int, int>, int> directed;
    double volume = 0.0;
    for (const auto& f : m.faces) {
      for (int k = 0; k < 3; ++k) ++directed[{f[static_cast<std::size_t>(k)], f[static_cast<std::size_t>((k + 1) % 3)]}];
      volume += m.vertices[static_cast<std::size_t>(f[0])].dot(
                    m.vertices[static_cast<std::size_t>(f[1])].cross(m.vertices[static_cast<std::size_t>(f[2])])) / 6.0;
    }
    for (const auto& [edge, count] : directed) {
      CHECK(count == 1);
      CHECK(directed.count({edge.second, edge.first}) == 1);
    }
    CHECK(volume > 0.0);
    CHECK(m.component_count() == 1);
  }
  Mesh box = primitives::box(Vec3::Zero(), Vec3(1, 2, 3), 1);
  double volume = 0.0;
  for (const auto& f : box.faces)
    volume += box.vertices[static_cast<std::size_t>(f[0])].dot(
                  box.vertices[static_cast<std::size_t>(f[1])].cross(box.vertices[static_cast<std::size_t>(f[2])])) / 6.0;
  CHECK(volume == doctest::Approx(48.0).epsilon(1e-12));
}

TEST_CASE("capsule triangulation is mirror symmetric") {
  Mesh m = primitives::capsule(0.3, 1.0);
  std::map<std::array<long long, 3>, int> lookup;
  auto key = [](const Vec3& p) {
    return std::array<long long, 3>{std::llround(p.x() * 1e9), std::llround(p.y() * 1e9), std::llround(p.z() * 1e9)};
  };
  for (int v = 0; v < m.vertex_count(); ++v) lookup[key(m.vertices[static_cast<std::size_t>(v)])] = v;
  std::vector<int> mirror(static_cast<std::size_t>(m.vertex_count()));
  for (int v = 0; v < m.vertex_count(); ++v) {
    Vec3 p = m.vertices[static_cast<std::size_t>(v)];
    p.x() = -p.x();
    auto it = lookup.find(key(p));
    REQUIRE(it != lookup.end());
    CHECK(m.vertices[static_cast<std::size_t>(it->second)].x() == -m.vertices[static_cast<std::size_t>(v)].x());
    mirror[static_cast<std::size_t>(v)] = it->second;
  }
  std::set<std::array<int, 3>> faces;
  for (auto f : m.faces) {
    std::sort(f.begin(), f.end());
    faces.insert(f);
  }
  for (const auto& f : m.faces) {
    std::array<int, 3> g{mirror[static_cast<std::size_t>(f[0])], mirror[static_cast<std::size_t>(f[1])],
                         mirror[static_cast<std::size_t>(f[2])]};
    std::sort(g.begin(), g.end());
    CHECK(faces.count(g) == 1);
  }
}

TEST_CASE("cotangent laplacian: constants in the null space, symmetric") {
  Mesh m = primitives::icosphere(1.0, 2);
  SparseMatrix l = cotangent_laplacian(m);
  Eigen::VectorXd ones = Eigen::VectorXd::Ones(m.vertex_count());
  CHECK((l * ones).cwiseAbs().maxCoeff() < 1e-9);
  Eigen::MatrixXd d = Eigen::MatrixXd(l);
  CHECK((d - d.transpose()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("cotangent laplacian: equilateral triangle has equal weights") {
  Mesh m = make_mesh({Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(0.5, std::sqrt(3.0) / 2.0, 0)}, {{0, 1, 2}});
  Eigen::MatrixXd l = Eigen::MatrixXd(cotangent_laplacian(m));
  double expected = 0.5 / std::sqrt(3.0);
  CHECK(l(0, 1) == doctest::Approx(expected).epsilon(1e-12));
  CHECK(l(0, 2) == doctest::Approx(expected).epsilon(1e-12));
  CHECK(l(1, 2) == doctest::Approx(expected).epsilon(1e-12));
  CHECK(l(0, 0) == doctest::Approx(-2.0 * expected).epsilon(1e-12));
}

TEST_CASE("cotangent laplacian matches a dense angle-based assembly") {
  for (const Mesh& m : {primitives::icosphere(1.0, 2), primitives::capsule(0.3, 0.8), primitives::box(Vec3::Zero(), Vec3(1, 0.5, 0.2), 3)}) {
    Eigen::MatrixXd ref = dense_laplacian(m);
    Eigen::MatrixXd got = Eigen::MatrixXd(cotangent_laplacian(m));
    CHECK((ref - got).cwiseAbs().maxCoeff() < 1e-9);
    Eigen::VectorXd height(m.vertex_count());
    for (int v = 0; v < m.vertex_count(); ++v) height[v] = m.vertices[static_cast<std::size_t>(v)].y();
    CHECK((ref * height - got * height).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("cotangent laplacian clamps near-degenerate triangles") {
  Mesh m = make_mesh({Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(0.5, 1e-6, 0)}, {{0, 1, 2}});
  Eigen::MatrixXd l = Eigen::MatrixXd(cotangent_laplacian(m, 1e4));
  CHECK(l(0, 1) == doctest::Approx(-0.5e4));
  CHECK(std::abs(l.row(0).sum()) < 1e-9);
}

TEST_CASE("closest point on triangle agrees with dense sampling") {
  Random rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    Vec3 a = rng.vec3(), b = rng.vec3(), c = rng.vec3(), p = rng.vec3(-2, 2);
    SurfacePoint sp = closest_point_on_triangle(p, a, b, c);
    Vec3 recon = sp.barycentric[0] * a + sp.barycentric[1] * b + sp.barycentric[2] * c;
    CHECK((recon - sp.point).norm() < 1e-12);
    CHECK(sp.barycentric.minCoeff() >= -1e-12);
    CHECK(std::abs(sp.barycentric.sum() - 1.0) < 1e-12);
    double best = std::numeric_limits<double>::infinity();
    const int n = 60;
    for (int i = 0; i <= n; ++i)
      for (int j = 0; i + j <= n; ++j) {
        double u = double(i) / n, v = double(j) / n;
        best = std::min(best, ((1 - u - v) * a + u * b + v * c - p).squaredNorm());
      }
    CHECK(sp.distance2 <= best + 1e-12);
  }
}

TEST_CASE("visibility: convex mesh sees an interior bone everywhere") {
  Mesh m = primitives::icosphere(0.5, 2);
  Bone root;
  root.half_extents = Vec3(0.3, 0.05, 0.05);
  Skeleton s({root});
  BoneVisibility vis = bone_visibility(m, s, rest_pose(s));
  CHECK(vis.visible.all());
  for (int v = 0; v < m.vertex_count(); ++v)
    CHECK(vis.distance(v, 0) ==
          doctest::Approx(segment_distance(m.vertices[static_cast<std::size_t>(v)], Vec3(-0.3, 0, 0), Vec3(0.3, 0, 0))));
}

TEST_CASE("visibility: a foot does not see the other leg") {
  Mesh legs = primitives::merge({primitives::box(Vec3(-0.3, 0, 0), Vec3(0.15, 0.55, 0.15), 2),
                                 primitives::box(Vec3(0.3, 0, 0), Vec3(0.15, 0.55, 0.15), 2)});
  Bone left;
  left.rest = RigidTransform::from_translation(Vec3(-0.3, 0, 0));
  left.half_extents = Vec3(0.1, 0.5, 0.1);
  Skeleton s({left, child_bone(0, Vec3(0.6, 0, 0), left.half_extents)});
  BoneVisibility vis = bone_visibility(legs, s, rest_pose(s));
  int foot = -1;
  for (int v = 0; v < legs.vertex_count(); ++v)
    if ((legs.vertices[static_cast<std::size_t>(v)] - Vec3(-0.3, -0.55, 0)).norm() < 1e-12) foot = v;
  REQUIRE(foot >= 0);
  CHECK(vis.visible(foot, 0));
  CHECK_FALSE(vis.visible(foot, 1));
  CHECK(vis.distance(foot, 1) == doctest::Approx((Vec3(0.3, -0.5, 0) - Vec3(-0.3, -0.55, 0)).norm()));
}

TEST_CASE("visibility agrees with a brute-force crossing scan") {
  Random rng(5);
  UShape u = u_shape();
  for (int trial = 0; trial < 3; ++trial) {
    // A generic rigid pose removes coplanar coincidences of the voxel grid.
    RigidTransform g = rng.transform(0.5);
    std::vector<Vec3> moved;
    for (const Vec3& p : u.mesh.vertices) moved.push_back(g.apply(p));
    Mesh m = make_mesh(moved, u.mesh.faces);
    std::vector<Bone> bones = u.skeleton.bones();
    bones[0].rest = g * bones[0].rest;
    Skeleton s(bones);
    auto rest = rest_pose(s);
    BoneVisibility vis = bone_visibility(m, s, rest);
    for (int v = 0; v < m.vertex_count(); ++v) {
      const Vec3& p = m.vertices[static_cast<std::size_t>(v)];
      for (int b = 0; b < s.bone_count(); ++b) {
        auto [s0, s1] = s.segment(b);
        Vec3 a = rest[static_cast<std::size_t>(b)].apply(s0), e = rest[static_cast<std::size_t>(b)].apply(s1);
        double t = std::clamp((p - a).dot(e - a) / (e - a).squaredNorm(), 0.0, 1.0);
        Vec3 q = a + t * (e - a);
        CHECK(vis.visible(v, b) == !brute_blocked(m, p, q, v));
      }
    }
  }
}

TEST_CASE("visibility: vertex on the bone is visible with the distance floor applied") {
  Mesh m = make_mesh({Vec3(0, 0, 0), Vec3(0, 1, 0), Vec3(0, 0, 1)}, {{0, 1, 2}});
  Bone root;
  root.half_extents = Vec3(0.5, 0.1, 0.1);
  Skeleton s({root});
  BoneVisibility vis = bone_visibility(m, s, rest_pose(s));
  CHECK(vis.visible(0, 0));
  CHECK(vis.distance(0, 0) == 0.0);
  HeatSystem sys = assemble_heat_system(m, vis);
  CHECK(sys.heat(0, 0) == doctest::Approx(1e8));
  CHECK(std::isfinite(sys.heat(0, 0)));
}

TEST_CASE("weights: a single bone gives all ones") {
  Mesh m = primitives::capsule(0.2, 0.6);
  Bone root;
  root.half_extents = Vec3(0.5, 0.1, 0.1);
  SkinWeights w = compute_skin_weights(m, Skeleton({root}));
  CHECK(w.bones() == 1);
  for (int v = 0; v < w.rows(); ++v) CHECK(w.matrix(v, 0) == 1.0);
}

TEST_CASE("weights: symmetric capsule splits the midline evenly") {
  Mesh m = primitives::capsule(0.3, 1.0);
  SkinWeights w = compute_skin_weights(m, symmetric_pair(1.0));
  int midline = 0;
  for (int v = 0; v < m.vertex_count(); ++v) {
    if (m.vertices[static_cast<std::size_t>(v)].x() != 0.0) continue;
    ++midline;
    CHECK(std::abs(w.matrix(v, 0) - 0.5) <= 1e-3);
    CHECK(std::abs(w.matrix(v, 1) - 0.5) <= 1e-3);
  }
  CHECK(midline == 16);
  w.validate(1e-8);
}

TEST_CASE("weights: three-bone tube matches a dense direct solve") {
  Mesh m = primitives::capsule(0.25, 1.5);
  REQUIRE(m.vertex_count() <= 500);
  Skeleton s = centered_chain(1.0);
  auto rest = rest_pose(s);
  SparseMatrix lap = cotangent_laplacian(m);
  BoneVisibility vis = bone_visibility(m, s, rest);
  REQUIRE(vis.visible.all());
  HeatSystem sys = assemble_heat_system(m, vis);
  SkinWeights w = solve_weights(m, lap, vis);

  const int nv = m.vertex_count();
  Eigen::MatrixXd dist(nv, 3);
  for (int v = 0; v < nv; ++v)
    for (int b = 0; b < 3; ++b) {
      Vec3 a(-1.5 + b, 0, 0), e(-0.5 + b, 0, 0);
      dist(v, b) = std::max(segment_distance(m.vertices[static_cast<std::size_t>(v)], a, e), 1e-4);
    }
  Eigen::MatrixXd lneg = -dense_laplacian(m);
  Eigen::MatrixXd raw(nv, 3);
  for (int b = 0; b < 3; ++b) {
    Eigen::VectorXd h(nv), p(nv);
    for (int v = 0; v < nv; ++v) {
      h[v] = 1.0 / (dist(v, b) * dist(v, b));
      p[v] = dist(v, b) <= dist.row(v).minCoeff() * (1.0 + 1e-9) ? 1.0 : 0.0;
    }
    Eigen::MatrixXd a = lneg;
    a.diagonal() += h;
    raw.col(b) = a.fullPivLu().solve(h.cwiseProduct(p));
    Eigen::VectorXd field = solve_bone_field(m, lap, sys, b);
    CHECK((field - raw.col(b)).cwiseAbs().maxCoeff() < 1e-8);
  }
  Eigen::MatrixXd ref = raw.cwiseMax(0.0).cwiseMin(1.0);
  for (int v = 0; v < nv; ++v) ref.row(v) /= ref.row(v).sum();
  CHECK((ref - w.matrix).cwiseAbs().maxCoeff() < 1e-8);

  // Along the top body line the first bone's weight falls and the last rises.
  std::vector<std::pair<double, int>> line;
  for (int v = 0; v < nv; ++v) {
    const Vec3& p = m.vertices[static_cast<std::size_t>(v)];
    if (std::abs(p.z()) < 1e-12 && p.y() > 0.0 && std::abs(p.y() - 0.25) < 1e-12) line.emplace_back(p.x(), v);
  }
  std::sort(line.begin(), line.end());
  REQUIRE(line.size() >= 5);
  for (std::size_t i = 1; i < line.size(); ++i) {
    CHECK(w.matrix(line[i].second, 0) <= w.matrix(line[i - 1].second, 0) + 1e-12);
    CHECK(w.matrix(line[i].second, 2) >= w.matrix(line[i - 1].second, 2) - 1e-12);
  }
}

TEST_CASE("weights: partition of unity and rigid invariance") {
  Random rng(21);
  Mesh m = primitives::capsule(0.25, 1.5);
  Skeleton s = centered_chain(1.0);
  SkinWeights base = compute_skin_weights(m, s);
  base.validate(1e-8);
  CHECK(base.matrix.minCoeff() >= 0.0);
  CHECK(base.matrix.maxCoeff() <= 1.0);
  for (int trial = 0; trial < 5; ++trial) {
    RigidTransform g = rng.transform(2.0);
    std::vector<Vec3> moved;
    for (const Vec3& p : m.vertices) moved.push_back(g.apply(p));
    std::vector<Bone> bones = s.bones();
    bones[0].rest = g * bones[0].rest;
    SkinWeights w = compute_skin_weights(make_mesh(moved, m.faces), Skeleton(bones));
    CHECK((w.matrix - base.matrix).cwiseAbs().maxCoeff() < 1e-8);
  }
}

TEST_CASE("weights: locality on a non-convex mesh") {
  UShape u = u_shape();
  auto rest = rest_pose(u.skeleton);
  BoneVisibility vis = bone_visibility(u.mesh, u.skeleton, rest);
  HeatSystem sys = assemble_heat_system(u.mesh, vis);
  SkinWeights w = solve_weights(u.mesh, cotangent_laplacian(u.mesh), vis);
  w.validate(1e-8);
  int checked = 0;
  std::vector<Vec3> below_half;
  for (int v = 0; v < u.mesh.vertex_count(); ++v) {
    if (sys.visible.row(v).count() != 1) continue;
    Eigen::Index b;
    sys.visible.row(v).cast<int>().maxCoeff(&b);
    if (sys.indicator(v, b) != 1.0) continue;
    ++checked;
    Eigen::Index top;
    w.matrix.row(v).maxCoeff(&top);
    CHECK(top == b);
    if (w.matrix(v, b) <= 0.5) below_half.push_back(u.mesh.vertices[static_cast<std::size_t>(v)]);
  }
  CHECK(checked > 40);
  // The crotch vertex midway between the legs takes heat diffused from
  // both of them; it keeps the plurality but not a majority.
  REQUIRE(below_half.size() == 1);
  CHECK((below_half[0] - Vec3(0.3, 0.3, 0.1)).norm() < 1e-12);
}

TEST_CASE("weights: isolated components fall back to their nearest bone") {
  // A box far from every bone sees none of them until the fix applies.
  Mesh m = primitives::merge({primitives::capsule(0.25, 1.5), primitives::box(Vec3(0, 5, 0), Vec3::Constant(0.2), 1)});
  Skeleton s = centered_chain(1.0);
  auto rest = rest_pose(s);
  BoneVisibility vis = bone_visibility(m, s, rest);
  SkinWeights w = solve_weights(m, cotangent_laplacian(m), vis);
  w.validate(1e-8);
  for (int v = 0; v < m.vertex_count(); ++v) {
    if (m.component_labels[static_cast<std::size_t>(v)] != 1) continue;
    CHECK(w.matrix(v, 1) == doctest::Approx(1.0));
  }
}

TEST_CASE("weights: a heat-free system is reported with its component") {
  Mesh m = primitives::capsule(0.25, 1.0);
  SkinningOptions opt;
  opt.heat_constant = 0.0;
  Bone root;
  root.half_extents = Vec3(0.5, 0.1, 0.1);
  try {
    compute_skin_weights(m, Skeleton({root}), opt);
    FAIL("expected SingularComponent");
  } catch (const SingularComponent& e) {
    CHECK(e.component() == 0);
    CHECK(std::string(e.what()).find("component 0") != std::string::npos);
  }
}

TEST_CASE("weights are independent of the thread count") {
  Mesh m = primitives::capsule(0.25, 1.5);
  Skeleton s = centered_chain(1.0);
  setenv("AKD_THREADS", "1", 1);
  SkinWeights a = compute_skin_weights(m, s);
  setenv("AKD_THREADS", "4", 1);
  SkinWeights b = compute_skin_weights(m, s);
  unsetenv("AKD_THREADS");
  CHECK((a.matrix - b.matrix).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("transfer: vertices, centroids and brute-force closest points") {
  Mesh m = primitives::capsule(0.25, 1.5);
  Skeleton s = centered_chain(1.0);
  SkinWeights w = compute_skin_weights(m, s);

  std::vector<Vec3> at_vertices(m.vertices.begin(), m.vertices.begin() + 40);
  Eigen::MatrixXd tv = transfer_to_kernels(w, m, at_vertices);
  for (int i = 0; i < 40; ++i) CHECK((tv.row(i) - w.matrix.row(i)).cwiseAbs().maxCoeff() < 1e-12);

  std::vector<Vec3> centroids;
  for (std::size_t f = 0; f < 40; ++f) {
    const auto& face = m.faces[f];
    centroids.push_back((m.vertices[static_cast<std::size_t>(face[0])] + m.vertices[static_cast<std::size_t>(face[1])] +
                         m.vertices[static_cast<std::size_t>(face[2])]) / 3.0);
  }
  Eigen::MatrixXd tc = transfer_to_kernels(w, m, centroids);
  for (std::size_t f = 0; f < 40; ++f) {
    const auto& face = m.faces[f];
    Eigen::RowVectorXd mean = (w.matrix.row(face[0]) + w.matrix.row(face[1]) + w.matrix.row(face[2])) / 3.0;
    CHECK((tc.row(static_cast<Eigen::Index>(f)) - mean).cwiseAbs().maxCoeff() < 1e-12);
  }

  Random rng(3);
  std::vector<Vec3> random_points;
  for (int i = 0; i < 300; ++i) {
    Vec3 p = m.vertices[static_cast<std::size_t>(rng.integer(0, m.vertex_count() - 1))];
    random_points.push_back(p + rng.vec3(-0.1, 0.1));
  }
  Eigen::MatrixXd tr = transfer_to_kernels(w, m, random_points);
  TriangleBvh bvh(m);
  for (std::size_t i = 0; i < random_points.size(); ++i) {
    SurfacePoint best;
    best.distance2 = std::numeric_limits<double>::infinity();
    for (std::size_t f = 0; f < m.faces.size(); ++f) {
      const auto& face = m.faces[f];
      SurfacePoint sp = closest_point_on_triangle(random_points[i], m.vertices[static_cast<std::size_t>(face[0])],
                                                  m.vertices[static_cast<std::size_t>(face[1])],
                                                  m.vertices[static_cast<std::size_t>(face[2])]);
      if (sp.distance2 < best.distance2) {
        best = sp;
        best.face = static_cast<int>(f);
      }
    }
    SurfacePoint got = bvh.closest_point(random_points[i]);
    CHECK(got.distance2 == doctest::Approx(best.distance2).epsilon(1e-12));
    const auto& face = m.faces[static_cast<std::size_t>(best.face)];
    Eigen::RowVectorXd ref = best.barycentric[0] * w.matrix.row(face[0]) + best.barycentric[1] * w.matrix.row(face[1]) +
                             best.barycentric[2] * w.matrix.row(face[2]);
    ref /= ref.sum();
    CHECK((tr.row(static_cast<Eigen::Index>(i)) - ref).cwiseAbs().maxCoeff() < 1e-9);
    CHECK(std::abs(tr.row(static_cast<Eigen::Index>(i)).sum() - 1.0) < 1e-12);
  }
}
