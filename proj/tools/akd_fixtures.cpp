// Writes small example assets: akd_fixtures <out-dir>
//   twobox/    two disjoint boxes, two bones (skin)
//   sphere/    icosphere, one bone (skin)
//   chain/     3-bone capsule with splat, a target motion and a distill config
//   pendulum/  fixed block with a hanging rod, PD controls and a track config

#include "akd/error.hpp"
#include "akd/io.hpp"
#include "akd/optimize.hpp"
#include "akd/primitives.hpp"

#include <cmath>
#include <cstdio>

namespace fs = std::filesystem;
using namespace akd;
using nlohmann::json;

namespace {

Mesh translated(const Mesh& m, const Vec3& offset) {
  std::vector<Vec3> v;
  for (const Vec3& p : m.vertices) v.push_back(p + offset);
  return make_mesh(std::move(v), m.faces);
}

void twobox(const fs::path& dir) {
  Mesh m = primitives::merge({primitives::box(Vec3(-0.3, 0.0, 0.0), Vec3(0.2, 0.1, 0.1)),
                              primitives::box(Vec3(0.3, 0.0, 0.0), Vec3(0.2, 0.1, 0.1))});
  Bone left;
  left.rest = RigidTransform::from_translation(Vec3(-0.3, 0.0, 0.0));
  left.half_extents = Vec3(0.2, 0.05, 0.05);
  Bone right;
  right.parent = 0;
  right.rest = RigidTransform::from_translation(Vec3(0.6, 0.0, 0.0));
  right.half_extents = Vec3(0.2, 0.05, 0.05);
  Joint j;
  j.anchor = Vec3(0.3, 0.0, 0.0);
  right.joint = j;
  io::write_file(dir / "mesh.obj", io::format_obj(m));
  io::write_skeleton(dir / "skeleton.json", Skeleton({left, right}));
}

void sphere(const fs::path& dir) {
  Bone root;
  root.half_extents = Vec3(0.3, 0.05, 0.05);
  io::write_file(dir / "mesh.obj", io::format_obj(primitives::icosphere(0.5, 2)));
  io::write_skeleton(dir / "skeleton.json", Skeleton({root}));
}

void chain(const fs::path& dir) {
  const double length = 0.3, lift = 0.4;
  std::vector<Bone> bones(3);
  for (int b = 0; b < 3; ++b) {
    bones[b].half_extents = Vec3(0.5 * length, 0.06, 0.06);
    if (b == 0) {
      bones[b].rest = RigidTransform::from_translation(Vec3(-length, lift, 0.0));
      continue;
    }
    bones[b].parent = b - 1;
    bones[b].rest = RigidTransform::from_translation(Vec3(length, 0.0, 0.0));
    Joint j;
    j.anchor = Vec3(0.5 * length, 0.0, 0.0);
    bones[b].joint = j;
  }
  Skeleton s(bones);
  Mesh m = translated(primitives::capsule(0.08, 1.5 * length - 0.08), Vec3(0.0, lift, 0.0));
  io::write_skeleton(dir / "skeleton.json", s);
  io::write_file(dir / "mesh.obj", io::format_obj(m));
  io::write_ply(dir / "splat.ply", primitives::sample_surface(m, 400, 0.03, 7));

  const int frames = 7;
  MotionClip target = init_motion(s, frames, 0.0, 8.0);
  for (int i = 0; i < frames; ++i) {
    const double u = static_cast<double>(i) / (frames - 1);
    target.joint_angles[i][0] = Vec3(0.0, 0.0, 0.5 * u);
    target.joint_angles[i][1] = Vec3(0.0, 0.0, 0.4 * std::sin(3.0 * u));
  }
  io::write_motion(dir / "target.json", target);
  io::write_json(dir / "distill.json", {{"iterations", 20},
                                        {"frames", frames},
                                        {"width", 32},
                                        {"height", 32},
                                        {"lambda1", 0.0},
                                        {"follow", false},
                                        {"scene", {{"fov", 0.7}}}});
}

void pendulum(const fs::path& dir) {
  Bone root;
  root.half_extents = Vec3::Constant(0.05);
  root.rest = RigidTransform::from_translation(Vec3(0.0, 1.5, 0.0));
  Bone rod;
  rod.parent = 0;
  rod.half_extents = Vec3(0.03, 0.2, 0.03);
  rod.rest = RigidTransform::from_translation(Vec3(0.0, -0.25, 0.0));
  Joint j;
  j.anchor = Vec3(0.0, -0.05, 0.0);
  rod.joint = j;
  Skeleton s({root, rod});
  io::write_skeleton(dir / "skeleton.json", s);

  const int frames = 9;
  MotionClip controls = init_motion(s, frames, 0.0, 8.0);
  for (int i = 0; i < frames; ++i) controls.joint_angles[i][0] = Vec3(0.0, 0.0, 0.4 * std::sin(0.8 * i));
  io::write_motion(dir / "controls.json", controls);
  json sim = {{"fix_root", true}, {"contact", false}, {"substeps", 100}};
  io::write_json(dir / "sim.json", sim);
  io::write_json(dir / "track.json", {{"iterations", 30}, {"sim", sim}});
}

}  // namespace

int main(int argc, char** argv) {
  if (argc != 2) {
    std::fprintf(stderr, "usage: akd_fixtures <out-dir>\n");
    return 2;
  }
  try {
    const fs::path root = argv[1];
    for (const char* sub : {"twobox", "sphere", "chain", "pendulum"}) fs::create_directories(root / sub);
    twobox(root / "twobox");
    sphere(root / "sphere");
    chain(root / "chain");
    pendulum(root / "pendulum");
  } catch (const std::exception& e) {
    std::fprintf(stderr, "akd_fixtures: %s\n", e.what());
    return 1;
  }
  return 0;
}
