#include "akd/io.hpp"

#include "akd/error.hpp"

#include <png.h>

#include <Eigen/Eigenvalues>
#include <Eigen/Geometry>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace akd::io {

using nlohmann::json;

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw InvalidInput("cannot read " + path.string());
  return ss.str();
}

void write_file(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("cannot write " + path.string());
}

json read_json(const fs::path& path) {
  std::string text = read_file(path);
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw InvalidInput(path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) { write_file(path, j.dump(2) + "\n"); }

namespace {

// JSON helpers -------------------------------------------------------------

template <class F>
auto wrap_json(const char* what, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const json::exception& e) {
    throw InvalidInput(std::string(what) + ": " + e.what());
  }
}

std::vector<double> numbers(const json& j, std::size_t n, const char* what) {
  if (!j.is_array() || j.size() != n)
    throw InvalidInput(std::string(what) + " must be an array of " + std::to_string(n) + " numbers");
  std::vector<double> out;
  for (const json& x : j) {
    if (!x.is_number()) throw InvalidInput(std::string(what) + " must contain numbers");
    out.push_back(x.get<double>());
  }
  return out;
}

Vec3 vec3(const json& j, const char* what) {
  auto v = numbers(j, 3, what);
  return {v[0], v[1], v[2]};
}

Mat3 mat3(const json& j, const char* what) {
  auto v = numbers(j, 9, what);
  Mat3 m;
  for (int i = 0; i < 9; ++i) m(i / 3, i % 3) = v[static_cast<std::size_t>(i)];
  return m;
}

json to_json(const Vec3& v) { return {v.x(), v.y(), v.z()}; }

json to_json(const Mat3& m) {
  json a = json::array();
  for (int i = 0; i < 9; ++i) a.push_back(m(i / 3, i % 3));
  return a;
}

void check_keys(const json& j, std::initializer_list<const char*> allowed, const char* what) {
  if (!j.is_object()) throw InvalidInput(std::string(what) + " must be a JSON object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& item : j.items())
    if (!ok.count(item.key())) throw InvalidInput(std::string("unknown ") + what + " field \"" + item.key() + "\"");
}

template <class T>
void get(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw InvalidInput(std::string("field \"") + key + "\" has the wrong type");
  }
}

void get(const json& j, const char* key, Vec3& out) {
  if (j.contains(key)) out = vec3(j.at(key), key);
}

// Little-endian scalars ------------------------------------------------------

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

std::uint32_t get_u32(const std::string& in, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

float get_f32(const std::string& in, std::size_t at) { return std::bit_cast<float>(get_u32(in, at)); }

double get_f64(const std::string& in, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return std::bit_cast<double>(v);
}

}  // namespace

// ---------------------------------------------------------------------------
// Skeleton and motion

json skeleton_to_json(const Skeleton& skeleton) {
  json bones = json::array();
  for (int b = 0; b < skeleton.bone_count(); ++b) {
    const Bone& bone = skeleton.bone(b);
    json jb = {{"parent", bone.parent ? json(*bone.parent) : json(nullptr)},
               {"rest_rotation", to_json(bone.rest.rotation)},
               {"rest_translation", to_json(bone.rest.translation)},
               {"half_extents", to_json(bone.half_extents)},
               {"density", bone.density}};
    if (bone.joint) {
      const Joint& jt = *bone.joint;
      json limits = nullptr;
      if (jt.limits) {
        limits = json::array();
        for (const auto& l : *jt.limits) limits.push_back({l[0], l[1]});
      }
      jb["joint"] = {{"axes", {to_json(jt.axes[0]), to_json(jt.axes[1]), to_json(jt.axes[2])}},
                     {"anchor", to_json(jt.anchor)},
                     {"limits", limits}};
    } else {
      jb["joint"] = nullptr;
    }
    bones.push_back(std::move(jb));
  }
  return {{"bones", bones}};
}

Skeleton skeleton_from_json(const json& j) {
  return wrap_json("skeleton", [&] {
    if (!j.is_object() || !j.contains("bones") || !j["bones"].is_array())
      throw InvalidInput("skeleton JSON needs a \"bones\" array");
    std::vector<Bone> bones;
    for (const json& jb : j["bones"]) {
      check_keys(jb, {"parent", "rest_rotation", "rest_translation", "half_extents", "density", "joint"}, "bone");
      Bone b;
      if (jb.contains("parent") && !jb["parent"].is_null()) {
        if (!jb["parent"].is_number_integer()) throw InvalidInput("bone parent must be an integer or null");
        b.parent = jb["parent"].get<int>();
      }
      b.rest.rotation = jb.contains("rest_rotation") ? mat3(jb["rest_rotation"], "rest_rotation") : Mat3::Identity();
      b.rest.translation =
          jb.contains("rest_translation") ? vec3(jb["rest_translation"], "rest_translation") : Vec3::Zero();
      if (jb.contains("half_extents")) b.half_extents = vec3(jb["half_extents"], "half_extents");
      if (jb.contains("density")) b.density = jb["density"].get<double>();
      if (jb.contains("joint") && !jb["joint"].is_null()) {
        const json& jj = jb["joint"];
        check_keys(jj, {"axes", "anchor", "limits"}, "joint");
        Joint joint;
        if (jj.contains("axes")) {
          if (!jj["axes"].is_array() || jj["axes"].size() != 3) throw InvalidInput("joint axes must be 3 vectors");
          for (int k = 0; k < 3; ++k) joint.axes[static_cast<std::size_t>(k)] = vec3(jj["axes"][k], "joint axis");
        }
        if (jj.contains("anchor")) joint.anchor = vec3(jj["anchor"], "joint anchor");
        if (jj.contains("limits") && !jj["limits"].is_null()) {
          if (!jj["limits"].is_array() || jj["limits"].size() != 3) throw InvalidInput("joint limits must be 3 pairs");
          AxisLimits lim;
          for (int k = 0; k < 3; ++k) {
            auto pair = numbers(jj["limits"][k], 2, "joint limit");
            lim[static_cast<std::size_t>(k)] = {pair[0], pair[1]};
          }
          joint.limits = lim;
        }
        b.joint = joint;
      }
      bones.push_back(std::move(b));
    }
    return Skeleton(std::move(bones));
  });
}

Skeleton read_skeleton(const fs::path& path) {
  try {
    return skeleton_from_json(read_json(path));
  } catch (const InvalidInput& e) {
    if (std::string(e.what()).find(path.string()) != std::string::npos) throw;
    throw InvalidInput(path.string() + ": " + e.what());
  }
}

void write_skeleton(const fs::path& path, const Skeleton& skeleton) { write_json(path, skeleton_to_json(skeleton)); }

json motion_to_json(const MotionClip& clip) {
  json frames = json::array();
  for (int i = 0; i < clip.frame_count(); ++i) {
    json angles = json::array();
    for (const Vec3& a : clip.joint_angles[static_cast<std::size_t>(i)]) angles.push_back(to_json(a));
    const RigidTransform& r = clip.root_transforms[static_cast<std::size_t>(i)];
    frames.push_back({{"root_rotation", to_json(r.rotation)},
                      {"root_translation", to_json(r.translation)},
                      {"angles", std::move(angles)}});
  }
  return {{"fps", clip.fps}, {"frames", std::move(frames)}};
}

MotionClip motion_from_json(const json& j) {
  return wrap_json("motion", [&] {
    check_keys(j, {"fps", "frames"}, "motion");
    MotionClip clip;
    if (j.contains("fps")) clip.fps = j["fps"].get<double>();
    if (!(clip.fps > 0.0) || !std::isfinite(clip.fps)) throw InvalidInput("motion fps must be positive");
    if (!j.contains("frames") || !j["frames"].is_array()) throw InvalidInput("motion JSON needs a \"frames\" array");
    for (const json& f : j["frames"]) {
      check_keys(f, {"root_rotation", "root_translation", "angles"}, "motion frame");
      RigidTransform r;
      if (f.contains("root_rotation")) r.rotation = mat3(f["root_rotation"], "root_rotation");
      if (f.contains("root_translation")) r.translation = vec3(f["root_translation"], "root_translation");
      std::vector<Vec3> angles;
      if (f.contains("angles")) {
        if (!f["angles"].is_array()) throw InvalidInput("frame angles must be an array");
        for (const json& a : f["angles"]) angles.push_back(vec3(a, "joint angles"));
      }
      clip.root_transforms.push_back(r);
      clip.joint_angles.push_back(std::move(angles));
    }
    return clip;
  });
}

MotionClip read_motion(const fs::path& path) {
  try {
    return motion_from_json(read_json(path));
  } catch (const InvalidInput& e) {
    if (std::string(e.what()).find(path.string()) != std::string::npos) throw;
    throw InvalidInput(path.string() + ": " + e.what());
  }
}

void write_motion(const fs::path& path, const MotionClip& clip) { write_json(path, motion_to_json(clip)); }

// ---------------------------------------------------------------------------
// OBJ

Mesh parse_obj(const std::string& text) {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 3>> faces;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag)) continue;
    if (tag == "v") {
      double x, y, z;
      if (!(ls >> x >> y >> z)) throw InvalidInput("OBJ line " + std::to_string(line_no) + ": bad vertex");
      vertices.emplace_back(x, y, z);
    } else if (tag == "f") {
      std::vector<int> idx;
      std::string tok;
      while (ls >> tok) {
        std::size_t slash = tok.find('/');
        std::string head = tok.substr(0, slash);
        int k = 0;
        try {
          std::size_t used = 0;
          k = std::stoi(head, &used);
          if (used != head.size()) throw std::invalid_argument("trailing");
        } catch (const std::exception&) {
          throw InvalidInput("OBJ line " + std::to_string(line_no) + ": bad face index \"" + tok + "\"");
        }
        int n = static_cast<int>(vertices.size());
        int i = k > 0 ? k - 1 : n + k;
        if (k == 0 || i < 0 || i >= n)
          throw InvalidInput("OBJ line " + std::to_string(line_no) + ": face index out of range");
        idx.push_back(i);
      }
      if (idx.size() < 3) throw InvalidInput("OBJ line " + std::to_string(line_no) + ": face needs 3 vertices");
      for (std::size_t t = 1; t + 1 < idx.size(); ++t) faces.push_back({idx[0], idx[t], idx[t + 1]});
    }
  }
  return make_mesh(std::move(vertices), std::move(faces));
}

Mesh read_obj(const fs::path& path) {
  std::string text = read_file(path);
  try {
    return parse_obj(text);
  } catch (const InvalidInput& e) {
    throw InvalidInput(path.string() + ": " + e.what());
  }
}

std::string format_obj(const Mesh& mesh) {
  std::string out;
  char buf[128];
  for (const Vec3& v : mesh.vertices) {
    std::snprintf(buf, sizeof buf, "v %.17g %.17g %.17g\n", v.x(), v.y(), v.z());
    out += buf;
  }
  for (const auto& f : mesh.faces) {
    std::snprintf(buf, sizeof buf, "f %d %d %d\n", f[0] + 1, f[1] + 1, f[2] + 1);
    out += buf;
  }
  return out;
}

// ---------------------------------------------------------------------------
// AKDW

namespace {
constexpr char kWeightsMagic[4] = {'A', 'K', 'D', 'W'};
// Row sums of f32-rounded convex weights stay within B·2⁻²⁴ of one.
constexpr double kF32RowTolerance = 1e-5;
}  // namespace

std::string encode_weights(const SkinWeights& weights) {
  std::string out(kWeightsMagic, 4);
  put_u32(out, static_cast<std::uint32_t>(weights.rows()));
  put_u32(out, static_cast<std::uint32_t>(weights.bones()));
  for (int v = 0; v < weights.rows(); ++v)
    for (int b = 0; b < weights.bones(); ++b) put_f32(out, static_cast<float>(weights.matrix(v, b)));
  return out;
}

SkinWeights decode_weights(const std::string& bytes) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kWeightsMagic, 4) != 0)
    throw InvalidInput("weights file does not start with AKDW");
  const std::uint64_t v = get_u32(bytes, 4), b = get_u32(bytes, 8);
  if (b == 0) throw InvalidInput("weights file has zero bones");
  if (bytes.size() != 12 + v * b * 4)
    throw InvalidInput("weights file size does not match V=" + std::to_string(v) + " B=" + std::to_string(b));
  SkinWeights w;
  w.matrix.resize(static_cast<Eigen::Index>(v), static_cast<Eigen::Index>(b));
  for (std::uint64_t i = 0; i < v; ++i)
    for (std::uint64_t k = 0; k < b; ++k)
      w.matrix(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = get_f32(bytes, 12 + 4 * (i * b + k));
  w.validate(kF32RowTolerance);
  for (Eigen::Index i = 0; i < w.matrix.rows(); ++i) w.matrix.row(i) /= w.matrix.row(i).sum();
  w.validate();
  return w;
}

SkinWeights read_weights(const fs::path& path) {
  std::string bytes = read_file(path);
  try {
    return decode_weights(bytes);
  } catch (const InvalidInput& e) {
    throw InvalidInput(path.string() + ": " + e.what());
  }
}

void write_weights(const fs::path& path, const SkinWeights& weights) { write_file(path, encode_weights(weights)); }

// ---------------------------------------------------------------------------
// PLY

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Opacities are clamped away from 0 and 1 so the logit stays finite.
constexpr double kOpacityClamp = 1e-6;

}  // namespace

std::string encode_ply(const GaussianCloud& cloud) {
  cloud.validate();
  const int n = cloud.size();
  std::size_t rest = cloud.sh_rest.empty() ? 0 : cloud.sh_rest[0].size();
  for (const auto& r : cloud.sh_rest)
    if (r.size() != rest) throw InvalidInput("f_rest coefficient counts differ between kernels");
  std::string out = "ply\nformat binary_little_endian 1.0\nelement vertex " + std::to_string(n) + "\n";
  std::vector<std::string> names = {"x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"};
  for (std::size_t k = 0; k < rest; ++k) names.push_back("f_rest_" + std::to_string(k));
  for (const char* s : {"opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"}) names.push_back(s);
  for (const auto& name : names) out += "property float " + name + "\n";
  out += "end_header\n";
  for (int p = 0; p < n; ++p) {
    const auto i = static_cast<std::size_t>(p);
    for (int k = 0; k < 3; ++k) put_f32(out, static_cast<float>(cloud.centers[i][k]));
    for (int k = 0; k < 3; ++k) put_f32(out, static_cast<float>(cloud.sh_dc[i][k]));
    if (rest > 0)
      for (float f : cloud.sh_rest[i]) put_f32(out, f);
    double o = std::clamp(cloud.opacities[i], kOpacityClamp, 1.0 - kOpacityClamp);
    put_f32(out, static_cast<float>(std::log(o / (1.0 - o))));
    Eigen::SelfAdjointEigenSolver<Mat3> eig(cloud.covariances[i]);
    Mat3 r = eig.eigenvectors();
    if (r.determinant() < 0.0) r.col(2) *= -1.0;
    for (int k = 0; k < 3; ++k) put_f32(out, static_cast<float>(0.5 * std::log(eig.eigenvalues()[k])));
    Eigen::Quaterniond q(r);
    q.normalize();
    for (double c : {q.w(), q.x(), q.y(), q.z()}) put_f32(out, static_cast<float>(c));
  }
  return out;
}

GaussianCloud decode_ply(const std::string& bytes) {
  const std::string end = "end_header\n";
  std::size_t header_end = bytes.find(end);
  if (bytes.rfind("ply\n", 0) != 0 || header_end == std::string::npos) throw InvalidInput("not a PLY file");
  std::istringstream header(bytes.substr(0, header_end));
  std::string line;
  std::getline(header, line);
  long count = -1;
  bool in_vertex = false, format_ok = false;
  struct Prop {
    std::string name;
    int size;
  };
  std::vector<Prop> props;
  while (std::getline(header, line)) {
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "format") {
      std::string fmt;
      ls >> fmt;
      if (fmt != "binary_little_endian") throw InvalidInput("PLY must be binary_little_endian, got " + fmt);
      format_ok = true;
    } else if (tag == "element") {
      std::string name;
      long n = 0;
      ls >> name >> n;
      in_vertex = name == "vertex";
      if (in_vertex) count = n;
      else if (n > 0) throw InvalidInput("unsupported PLY element \"" + name + "\"");
    } else if (tag == "property" && in_vertex) {
      std::string type, name;
      ls >> type >> name;
      int size = type == "float" || type == "float32" ? 4 : type == "double" || type == "float64" ? 8 : 0;
      if (size == 0) throw InvalidInput("unsupported PLY property type \"" + type + "\"");
      props.push_back({name, size});
    }
  }
  if (!format_ok) throw InvalidInput("PLY header has no format line");
  if (count < 0) throw InvalidInput("PLY has no vertex element");
  std::map<std::string, std::pair<std::size_t, int>> offset;  // name -> (byte offset, size)
  std::size_t stride = 0;
  for (const auto& p : props) {
    offset[p.name] = {stride, p.size};
    stride += static_cast<std::size_t>(p.size);
  }
  for (const char* need : {"x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2",
                           "rot_0", "rot_1", "rot_2", "rot_3"})
    if (!offset.count(need)) throw InvalidInput(std::string("PLY is missing property \"") + need + "\"");
  std::vector<std::string> rest_names;
  for (int k = 0; offset.count("f_rest_" + std::to_string(k)); ++k) rest_names.push_back("f_rest_" + std::to_string(k));

  const std::size_t body = header_end + end.size();
  if (bytes.size() - body != stride * static_cast<std::size_t>(count))
    throw InvalidInput("PLY body size does not match " + std::to_string(count) + " vertices");
  GaussianCloud cloud;
  for (long p = 0; p < count; ++p) {
    const std::size_t base = body + static_cast<std::size_t>(p) * stride;
    auto at = [&](const std::string& name) {
      auto [off, size] = offset.at(name);
      return size == 4 ? static_cast<double>(get_f32(bytes, base + off)) : get_f64(bytes, base + off);
    };
    Vec3 center(at("x"), at("y"), at("z"));
    Vec3 dc(at("f_dc_0"), at("f_dc_1"), at("f_dc_2"));
    Vec3 s(std::exp(at("scale_0")), std::exp(at("scale_1")), std::exp(at("scale_2")));
    Eigen::Quaterniond q(at("rot_0"), at("rot_1"), at("rot_2"), at("rot_3"));
    if (!(q.norm() > 0.0)) throw InvalidInput("PLY kernel " + std::to_string(p) + " has a zero rotation quaternion");
    Mat3 r = q.normalized().toRotationMatrix();
    Mat3 cov = r * s.cwiseProduct(s).asDiagonal() * r.transpose();
    cov = 0.5 * (cov + cov.transpose());
    cloud.centers.push_back(center);
    cloud.covariances.push_back(cov);
    cloud.opacities.push_back(sigmoid(at("opacity")));
    cloud.sh_dc.push_back(dc);
    if (!rest_names.empty()) {
      std::vector<float> rest;
      for (const auto& name : rest_names) rest.push_back(static_cast<float>(at(name)));
      cloud.sh_rest.push_back(std::move(rest));
    }
  }
  cloud.validate();
  return cloud;
}

GaussianCloud read_ply(const fs::path& path) {
  std::string bytes = read_file(path);
  try {
    return decode_ply(bytes);
  } catch (const InvalidInput& e) {
    throw InvalidInput(path.string() + ": " + e.what());
  }
}

void write_ply(const fs::path& path, const GaussianCloud& cloud) { write_file(path, encode_ply(cloud)); }

// ---------------------------------------------------------------------------
// PNG

void write_png(const fs::path& path, const Image& image) {
  if (image.width <= 0 || image.height <= 0) throw InvalidInput("cannot write an empty image");
  std::vector<png_byte> pixels(image.rgb.size());
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    double v = std::clamp(image.rgb[i], 0.0, 1.0);
    if (!std::isfinite(image.rgb[i])) v = 0.0;
    pixels[i] = static_cast<png_byte>(std::lround(v * 255.0));
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&png, path.c_str(), 0, pixels.data(), 0, nullptr))
    throw Error("cannot write " + path.string() + ": " + png.message);
}

Image read_png(const fs::path& path) {
  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) throw InvalidInput("cannot read " + path.string() + ": " + png.message);
  png.format = PNG_FORMAT_RGB;
  std::vector<png_byte> pixels(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, pixels.data(), 0, nullptr))
    throw InvalidInput("cannot decode " + path.string() + ": " + png.message);
  Image img(static_cast<int>(png.height), static_cast<int>(png.width));
  for (std::size_t i = 0; i < img.rgb.size(); ++i) img.rgb[i] = pixels[i] / 255.0;
  std::fill(img.alpha.begin(), img.alpha.end(), 1.0);
  return img;
}

std::string frame_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "frame_%04d.png", index);
  return buf;
}

// ---------------------------------------------------------------------------
// Configs

Camera SceneConfig::camera(const GaussianCloud& rest_cloud) const {
  Camera cam = auto_camera ? default_camera(rest_cloud, width, height, fov)
                           : Camera::look_at(eye, target, Vec3::UnitY(), fov, width, height);
  cam.validate();
  return cam;
}

void apply_json(const json& j, SceneConfig& config) {
  SceneConfig c = config;
  check_keys(j, {"eye", "target", "fov", "width", "height", "auto_camera", "follow", "follow_window", "ground", "render"},
             "scene");
  get(j, "eye", c.eye);
  get(j, "target", c.target);
  get(j, "fov", c.fov);
  get(j, "width", c.width);
  get(j, "height", c.height);
  get(j, "auto_camera", c.auto_camera);
  if (j.contains("eye") || j.contains("target")) c.auto_camera = j.value("auto_camera", false);
  get(j, "follow", c.follow);
  get(j, "follow_window", c.follow_window);
  if (j.contains("ground")) {
    const json& g = j["ground"];
    check_keys(g, {"enabled", "height", "tile_size", "color_a", "color_b", "background", "shadow_max", "shadow_decay"},
               "ground");
    get(g, "enabled", c.ground.enabled);
    get(g, "height", c.ground.height);
    get(g, "tile_size", c.ground.tile_size);
    get(g, "color_a", c.ground.color_a);
    get(g, "color_b", c.ground.color_b);
    get(g, "background", c.ground.background);
    get(g, "shadow_max", c.ground.shadow_max);
    get(g, "shadow_decay", c.ground.shadow_decay);
  }
  if (j.contains("render")) {
    const json& r = j["render"];
    check_keys(r, {"dilation", "near_plane", "cutoff", "tile"}, "render");
    get(r, "dilation", c.render.dilation);
    get(r, "near_plane", c.render.near_plane);
    get(r, "cutoff", c.render.cutoff);
    get(r, "tile", c.render.tile);
  }
  if (c.width < 1 || c.height < 1) throw InvalidInput("scene resolution must be positive");
  if (!(c.fov > 0.0 && c.fov < 3.1)) throw InvalidInput("scene fov must be in (0, 3.1) radians");
  if (c.follow_window < 1) throw InvalidInput("follow_window must be >= 1");
  c.ground.validate();
  config = c;
}

void apply_json(const json& j, DistillConfig& config) {
  DistillConfig c = config;
  check_keys(j, {"iterations", "t_start", "t_end_initial", "t_end_final", "t_anneal_iterations", "cfg_scale", "prompt",
                 "lambda1", "lambda2", "lr_translation", "lr_rotation", "lr_angles", "speed", "frames", "fps", "width",
                 "height", "chunk", "follow", "follow_window", "seed", "max_retries", "grad_clip"},
             "distill config");
  get(j, "iterations", c.iterations);
  get(j, "t_start", c.t_start);
  get(j, "t_end_initial", c.t_end_initial);
  get(j, "t_end_final", c.t_end_final);
  get(j, "t_anneal_iterations", c.t_anneal_iterations);
  get(j, "cfg_scale", c.cfg_scale);
  get(j, "prompt", c.prompt);
  get(j, "lambda1", c.weights.smooth);
  get(j, "lambda2", c.weights.ground);
  get(j, "lr_translation", c.lr_translation);
  get(j, "lr_rotation", c.lr_rotation);
  get(j, "lr_angles", c.lr_angles);
  get(j, "speed", c.speed);
  get(j, "frames", c.frames);
  get(j, "fps", c.fps);
  get(j, "width", c.width);
  get(j, "height", c.height);
  get(j, "chunk", c.chunk);
  get(j, "follow", c.follow);
  get(j, "follow_window", c.follow_window);
  get(j, "seed", c.seed);
  get(j, "max_retries", c.max_retries);
  get(j, "grad_clip", c.grad_clip);
  c.validate();
  config = c;
}

json to_json(const DistillConfig& c) {
  return {{"iterations", c.iterations},
          {"t_start", c.t_start},
          {"t_end_initial", c.t_end_initial},
          {"t_end_final", c.t_end_final},
          {"t_anneal_iterations", c.t_anneal_iterations},
          {"cfg_scale", c.cfg_scale},
          {"prompt", c.prompt},
          {"lambda1", c.weights.smooth},
          {"lambda2", c.weights.ground},
          {"lr_translation", c.lr_translation},
          {"lr_rotation", c.lr_rotation},
          {"lr_angles", c.lr_angles},
          {"speed", c.speed},
          {"frames", c.frames},
          {"fps", c.fps},
          {"width", c.width},
          {"height", c.height},
          {"chunk", c.chunk},
          {"follow", c.follow},
          {"follow_window", c.follow_window},
          {"seed", c.seed},
          {"max_retries", c.max_retries},
          {"grad_clip", c.grad_clip}};
}

void apply_json(const json& j, SimConfig& config) {
  SimConfig c = config;
  check_keys(j, {"dt", "substeps", "gravity", "joint_frequency", "joint_damping_ratio", "kp", "kd", "axis_gain_scale",
                 "contact", "ground_height", "contact_stiffness", "contact_damping", "friction", "friction_damping",
                 "upright_gain", "upright_damping", "fix_root", "chunk", "clip_threshold"},
             "simulation config");
  get(j, "dt", c.dt);
  get(j, "substeps", c.substeps);
  get(j, "gravity", c.gravity);
  get(j, "joint_frequency", c.joint_frequency);
  get(j, "joint_damping_ratio", c.joint_damping_ratio);
  get(j, "kp", c.kp);
  get(j, "kd", c.kd);
  if (j.contains("axis_gain_scale")) {
    if (!j["axis_gain_scale"].is_array()) throw InvalidInput("axis_gain_scale must be an array of 3-vectors");
    c.axis_gain_scale.clear();
    for (const json& v : j["axis_gain_scale"]) c.axis_gain_scale.push_back(vec3(v, "axis_gain_scale"));
  }
  get(j, "contact", c.contact);
  get(j, "ground_height", c.ground_height);
  get(j, "contact_stiffness", c.contact_stiffness);
  get(j, "contact_damping", c.contact_damping);
  get(j, "friction", c.friction);
  get(j, "friction_damping", c.friction_damping);
  get(j, "upright_gain", c.upright_gain);
  get(j, "upright_damping", c.upright_damping);
  get(j, "fix_root", c.fix_root);
  get(j, "chunk", c.chunk);
  get(j, "clip_threshold", c.clip_threshold);
  config = c;
}

json to_json(const SimConfig& c) {
  json scales = json::array();
  for (const Vec3& v : c.axis_gain_scale) scales.push_back(to_json(v));
  return {{"dt", c.dt},
          {"substeps", c.substeps},
          {"gravity", to_json(c.gravity)},
          {"joint_frequency", c.joint_frequency},
          {"joint_damping_ratio", c.joint_damping_ratio},
          {"kp", c.kp},
          {"kd", c.kd},
          {"axis_gain_scale", scales},
          {"contact", c.contact},
          {"ground_height", c.ground_height},
          {"contact_stiffness", c.contact_stiffness},
          {"contact_damping", c.contact_damping},
          {"friction", c.friction},
          {"friction_damping", c.friction_damping},
          {"upright_gain", c.upright_gain},
          {"upright_damping", c.upright_damping},
          {"fix_root", c.fix_root},
          {"chunk", c.chunk},
          {"clip_threshold", c.clip_threshold}};
}

void apply_json(const json& j, TrackConfig& config) {
  TrackConfig c = config;
  check_keys(j, {"iterations", "lambda3", "lr_targets", "lr_velocity", "optimize_velocity", "sim"}, "track config");
  get(j, "iterations", c.iterations);
  get(j, "lambda3", c.lambda3);
  get(j, "lr_targets", c.lr_targets);
  get(j, "lr_velocity", c.lr_velocity);
  get(j, "optimize_velocity", c.optimize_velocity);
  if (j.contains("sim")) apply_json(j["sim"], c.sim);
  c.validate();
  config = c;
}

json to_json(const TrackConfig& c) {
  return {{"iterations", c.iterations},   {"lambda3", c.lambda3},
          {"lr_targets", c.lr_targets},   {"lr_velocity", c.lr_velocity},
          {"optimize_velocity", c.optimize_velocity}, {"sim", to_json(c.sim)}};
}

// ---------------------------------------------------------------------------
// Assets

AssetBundle load_asset(const AssetPaths& paths, const SceneConfig& scene) {
  AssetBundle a;
  a.skeleton = read_skeleton(paths.skeleton);
  Mesh mesh = read_obj(paths.mesh);
  a.cloud = read_ply(paths.splat);
  SkinWeights w = read_weights(paths.weights);
  if (w.rows() != mesh.vertex_count())
    throw InvalidInput(paths.weights.string() + ": " + std::to_string(w.rows()) + " weight rows but the mesh has " +
                       std::to_string(mesh.vertex_count()) + " vertices");
  if (w.bones() != a.skeleton.bone_count())
    throw InvalidInput(paths.weights.string() + ": " + std::to_string(w.bones()) + " weight columns but the skeleton has " +
                       std::to_string(a.skeleton.bone_count()) + " bones");
  a.kernel_weights = transfer_to_kernels(w, mesh, a.cloud.centers);
  a.ground = scene.ground;
  a.render = scene.render;
  return a;
}

}  // namespace akd::io
