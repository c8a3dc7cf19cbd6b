#include "akd/primitives.hpp"

#include "akd/rng.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>

namespace akd::primitives {

Mesh box(const Vec3& center, const Vec3& half_extents, int subdivisions) {
  if (subdivisions < 1) throw InvalidInput("box subdivisions must be >= 1");
  const int n = subdivisions;
  std::map<std::array<int, 3>, int> index;
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 3>> faces;
  auto vertex = [&](std::array<int, 3> key) {
    auto [it, inserted] = index.emplace(key, static_cast<int>(vertices.size()));
    if (inserted) {
      Vec3 p;
      for (int a = 0; a < 3; ++a) p[a] = center[a] + half_extents[a] * (2.0 * key[a] / n - 1.0);
      vertices.push_back(p);
    }
    return it->second;
  };
  for (int a = 0; a < 3; ++a) {
    int u = (a + 1) % 3, v = (a + 2) % 3;
    for (int side : {0, n}) {
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
          auto at = [&](int di, int dj) {
            std::array<int, 3> key{};
            key[a] = side;
            key[u] = i + di;
            key[v] = j + dj;
            return vertex(key);
          };
          int p00 = at(0, 0), p10 = at(1, 0), p11 = at(1, 1), p01 = at(0, 1);
          // e_u × e_v = e_a, so this winding faces +a.
          if (side == n) {
            faces.push_back({p00, p10, p11});
            faces.push_back({p00, p11, p01});
          } else {
            faces.push_back({p00, p11, p10});
            faces.push_back({p00, p01, p11});
          }
        }
      }
    }
  }
  return make_mesh(std::move(vertices), std::move(faces));
}

Mesh icosphere(double radius, int subdivisions) {
  const double t = (1.0 + std::sqrt(5.0)) / 2.0;
  std::vector<Vec3> v = {{-1, t, 0}, {1, t, 0}, {-1, -t, 0}, {1, -t, 0}, {0, -1, t}, {0, 1, t},
                         {0, -1, -t}, {0, 1, -t}, {t, 0, -1}, {t, 0, 1}, {-t, 0, -1}, {-t, 0, 1}};
  for (Vec3& p : v) p.normalize();
  std::vector<std::array<int, 3>> f = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11},
                                       {1, 5, 9},  {5, 11, 4}, {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
                                       {3, 9, 4},  {3, 4, 2},  {3, 2, 6},   {3, 6, 8},  {3, 8, 9},
                                       {4, 9, 5},  {2, 4, 11}, {6, 2, 10},  {8, 6, 7},  {9, 8, 1}};
  for (int s = 0; s < subdivisions; ++s) {
    std::map<std::pair<int, int>, int> mid;
    auto midpoint = [&](int a, int b) {
      auto key = std::minmax(a, b);
      auto it = mid.find(key);
      if (it != mid.end()) return it->second;
      v.push_back((v[static_cast<std::size_t>(a)] + v[static_cast<std::size_t>(b)]).normalized());
      int id = static_cast<int>(v.size()) - 1;
      mid.emplace(key, id);
      return id;
    };
    std::vector<std::array<int, 3>> next;
    for (const auto& tri : f) {
      int ab = midpoint(tri[0], tri[1]), bc = midpoint(tri[1], tri[2]), ca = midpoint(tri[2], tri[0]);
      next.push_back({tri[0], ab, ca});
      next.push_back({tri[1], bc, ab});
      next.push_back({tri[2], ca, bc});
      next.push_back({ab, bc, ca});
    }
    f = std::move(next);
  }
  for (Vec3& p : v) p *= radius;
  return make_mesh(std::move(v), std::move(f));
}

Mesh capsule(double radius, double half_length, int body_rings, int cap_rings, int segments) {
  if (body_rings < 3 || body_rings % 2 == 0) throw InvalidInput("capsule body_rings must be odd and >= 3");
  if (cap_rings < 1 || segments < 3) throw InvalidInput("capsule needs cap_rings >= 1 and segments >= 3");
  // Ring profile for the left half (x <= 0); the right half is its mirror.
  std::vector<std::pair<double, double>> half;  // (x, ring radius)
  for (int k = 1; k < cap_rings; ++k) {
    double psi = k * 0.5 * std::numbers::pi / cap_rings;
    half.emplace_back(-half_length - radius * std::cos(psi), radius * std::sin(psi));
  }
  const int mid = (body_rings - 1) / 2;
  for (int i = 0; i < mid; ++i) half.emplace_back(-half_length * (mid - i) / mid, radius);
  std::vector<std::pair<double, double>> rings = half;
  rings.emplace_back(0.0, radius);
  for (auto it = half.rbegin(); it != half.rend(); ++it) rings.emplace_back(-it->first, it->second);

  const int r = static_cast<int>(rings.size());
  const int m = (r - 1) / 2;
  std::vector<Vec3> vertices;
  for (const auto& [x, rho] : rings) {
    for (int j = 0; j < segments; ++j) {
      double th = 2.0 * std::numbers::pi * j / segments;
      vertices.emplace_back(x, rho * std::cos(th), rho * std::sin(th));
    }
  }
  const int left_pole = static_cast<int>(vertices.size());
  vertices.emplace_back(-half_length - radius, 0.0, 0.0);
  const int right_pole = left_pole + 1;
  vertices.emplace_back(half_length + radius, 0.0, 0.0);

  auto id = [&](int ring, int j) { return ring * segments + (j % segments); };
  std::vector<std::array<int, 3>> faces;
  for (int i = 0; i + 1 < r; ++i) {
    for (int j = 0; j < segments; ++j) {
      int a = id(i, j), b = id(i, j + 1), c = id(i + 1, j), d = id(i + 1, j + 1);
      if (i < m) {
        faces.push_back({a, d, c});
        faces.push_back({a, b, d});
      } else {
        faces.push_back({a, b, c});
        faces.push_back({b, d, c});
      }
    }
  }
  for (int j = 0; j < segments; ++j) {
    faces.push_back({left_pole, id(0, j + 1), id(0, j)});
    faces.push_back({right_pole, id(r - 1, j), id(r - 1, j + 1)});
  }
  return make_mesh(std::move(vertices), std::move(faces));
}

Mesh merge(const std::vector<Mesh>& parts) {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 3>> faces;
  for (const Mesh& part : parts) {
    int offset = static_cast<int>(vertices.size());
    vertices.insert(vertices.end(), part.vertices.begin(), part.vertices.end());
    for (const auto& f : part.faces) faces.push_back({f[0] + offset, f[1] + offset, f[2] + offset});
  }
  return make_mesh(std::move(vertices), std::move(faces));
}

GaussianCloud sample_surface(const Mesh& mesh, int count, double kernel_scale, std::uint64_t seed,
                             double normal_jitter) {
  if (count < 0 || !(kernel_scale > 0.0)) throw InvalidInput("sample_surface needs count >= 0 and kernel_scale > 0");
  std::vector<double> cumulative;
  double total = 0.0;
  for (const auto& f : mesh.faces) {
    const Vec3& a = mesh.vertices[static_cast<std::size_t>(f[0])];
    const Vec3& b = mesh.vertices[static_cast<std::size_t>(f[1])];
    const Vec3& c = mesh.vertices[static_cast<std::size_t>(f[2])];
    total += 0.5 * (b - a).cross(c - a).norm();
    cumulative.push_back(total);
  }
  SplitMix64 rng(seed);
  GaussianCloud cloud;
  const Mat3 cov = kernel_scale * kernel_scale * Mat3::Identity();
  for (int s = 0; s < count && total > 0.0; ++s) {
    double pick = rng.uniform() * total;
    std::size_t fi = static_cast<std::size_t>(std::lower_bound(cumulative.begin(), cumulative.end(), pick) -
                                              cumulative.begin());
    fi = std::min(fi, cumulative.size() - 1);
    const auto& f = mesh.faces[fi];
    const Vec3& a = mesh.vertices[static_cast<std::size_t>(f[0])];
    const Vec3& b = mesh.vertices[static_cast<std::size_t>(f[1])];
    const Vec3& c = mesh.vertices[static_cast<std::size_t>(f[2])];
    double r1 = std::sqrt(rng.uniform()), r2 = rng.uniform();
    Vec3 p = (1.0 - r1) * a + r1 * (1.0 - r2) * b + r1 * r2 * c;
    Vec3 n = (b - a).cross(c - a).normalized();
    double jitter = normal_jitter * (2.0 * rng.uniform() - 1.0);
    Vec3 rgb = (0.5 * Vec3::Ones() + 0.35 * n).cwiseMax(0.05).cwiseMin(0.95);
    cloud.add(p + jitter * n, cov, 0.8, rgb);
  }
  return cloud;
}

}  // namespace akd::primitives
