#pragma once

#include "akd/guidance.hpp"
#include "akd/optimize.hpp"
#include "akd/simulate.hpp"
#include "akd/skeleton.hpp"
#include "akd/skinning.hpp"
#include "akd/splat.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace akd::io {

namespace fs = std::filesystem;

/// Whole file as bytes; InvalidInput naming the path if it cannot be read.
std::string read_file(const fs::path& path);
/// Writes atomically enough for our purposes (truncate + write); Error on failure.
void write_file(const fs::path& path, const std::string& bytes);
nlohmann::json read_json(const fs::path& path);
void write_json(const fs::path& path, const nlohmann::json& j);

// Skeleton and motion JSON.
nlohmann::json skeleton_to_json(const Skeleton& skeleton);
Skeleton skeleton_from_json(const nlohmann::json& j);
Skeleton read_skeleton(const fs::path& path);
void write_skeleton(const fs::path& path, const Skeleton& skeleton);

nlohmann::json motion_to_json(const MotionClip& clip);
MotionClip motion_from_json(const nlohmann::json& j);
MotionClip read_motion(const fs::path& path);
void write_motion(const fs::path& path, const MotionClip& clip);

/// ASCII OBJ: `v x y z` and `f` records (polygons fan-triangulated,
/// `i/t/n` and negative indices accepted); other records ignored.
Mesh parse_obj(const std::string& text);
Mesh read_obj(const fs::path& path);
std::string format_obj(const Mesh& mesh);

/// AKDW: magic, u32 V, u32 B, V×B little-endian f32 row-major. Rows are
/// renormalized in double on load after a check at f32 precision.
std::string encode_weights(const SkinWeights& weights);
SkinWeights decode_weights(const std::string& bytes);
SkinWeights read_weights(const fs::path& path);
void write_weights(const fs::path& path, const SkinWeights& weights);

/// Binary little-endian PLY with the 3DGS vertex layout.
std::string encode_ply(const GaussianCloud& cloud);
GaussianCloud decode_ply(const std::string& bytes);
GaussianCloud read_ply(const fs::path& path);
void write_ply(const fs::path& path, const GaussianCloud& cloud);

/// 8-bit RGB PNG; values clamped to [0,1] and rounded.
void write_png(const fs::path& path, const Image& image);
/// 8-bit RGB(A) PNG back to [0,1] doubles.
Image read_png(const fs::path& path);
std::string frame_name(int index);  // frame_%04d.png

/// Scene description for rendering: camera, ground, render settings.
struct SceneConfig {
  Vec3 eye{0.0, 0.9, -2.2};
  Vec3 target{0.0, 0.3, 0.0};
  double fov = 0.7;  // vertical, radians
  int width = 64, height = 64;
  bool auto_camera = true;  // frame the cloud instead of eye/target
  bool follow = true;
  int follow_window = 1;
  GroundConfig ground;
  RenderSettings render;

  Camera camera(const GaussianCloud& rest_cloud) const;
};

/// Fields present in `j` override `config`; unknown keys are InvalidInput.
/// `config` is unchanged when an error is thrown.
void apply_json(const nlohmann::json& j, SceneConfig& config);
void apply_json(const nlohmann::json& j, DistillConfig& config);
void apply_json(const nlohmann::json& j, SimConfig& config);
void apply_json(const nlohmann::json& j, TrackConfig& config);
nlohmann::json to_json(const DistillConfig& config);
nlohmann::json to_json(const SimConfig& config);
nlohmann::json to_json(const TrackConfig& config);

struct AssetPaths {
  fs::path skeleton, mesh, splat, weights;
};

/// Loads and cross-checks an asset: B agrees across skeleton and weights,
/// V across mesh and weights. Kernel weights are transferred from the mesh.
AssetBundle load_asset(const AssetPaths& paths, const SceneConfig& scene);

}  // namespace akd::io
