// akd: command-line surface over skinning, rendering, distillation,
// tracking and simulation. Exit codes: 0 success or --help, 2 invalid
// input or flags, 1 runtime failure.

#include "akd/error.hpp"
#include "akd/guidance.hpp"
#include "akd/io.hpp"
#include "akd/optimize.hpp"
#include "akd/simulate.hpp"
#include "akd/skinning.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <array>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace akd;
using nlohmann::json;

namespace {

/// Flag values applied on top of a config file after parsing: flags win.
class Overrides {
 public:
  template <class T>
  CLI::Option* add(CLI::App* app, const std::string& name, T& target, const std::string& help) {
    auto value = std::make_shared<T>();
    CLI::Option* opt = app->add_option(name, *value, help);
    apply_.push_back([opt, value, &target] {
      if (opt->count() > 0) target = *value;
    });
    return opt;
  }

  CLI::Option* add_vec3(CLI::App* app, const std::string& name, Vec3& target, const std::string& help,
                        std::function<void()> also = {}) {
    auto value = std::make_shared<std::array<double, 3>>();
    CLI::Option* opt = app->add_option(name, *value, help)->expected(3);
    apply_.push_back([opt, value, &target, also] {
      if (opt->count() == 0) return;
      target = Vec3((*value)[0], (*value)[1], (*value)[2]);
      if (also) also();
    });
    return opt;
  }

  /// A flag that stores `value` into `target` when present.
  CLI::Option* add_switch(CLI::App* app, const std::string& name, bool& target, bool value, const std::string& help) {
    CLI::Option* opt = app->add_flag(name, help);
    apply_.push_back([opt, &target, value] {
      if (opt->count() > 0) target = value;
    });
    return opt;
  }

  void apply() const {
    for (const auto& f : apply_) f();
  }

 private:
  std::vector<std::function<void()>> apply_;
};

struct Common {
  std::uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;
  std::string config;

  void attach(CLI::App* app) {
    seed_opt = app->add_option("--seed", seed, "Seed for every random draw (default 0)");
    app->add_option("--config", config, "JSON config file; flags override its fields")->check(CLI::ExistingFile);
  }
  json load() const { return config.empty() ? json::object() : io::read_json(config); }
  bool seed_given() const { return seed_opt->count() > 0; }
};

struct AssetFlags {
  std::string skeleton, mesh, splat, weights;

  void attach(CLI::App* app) {
    app->add_option("--skeleton", skeleton, "Skeleton JSON")->required();
    app->add_option("--mesh", mesh, "Mesh OBJ")->required();
    app->add_option("--splat", splat, "Gaussian splat PLY")->required();
    app->add_option("--weights", weights, "Skinning weights AKDW")->required();
  }
  io::AssetPaths paths() const { return {skeleton, mesh, splat, weights}; }
};

/// Scene flags shared by render and distill.
void attach_scene(CLI::App* app, Overrides& o, io::SceneConfig& scene) {
  o.add_vec3(app, "--eye", scene.eye, "Camera position (disables auto framing)", [&scene] { scene.auto_camera = false; });
  o.add_vec3(app, "--target", scene.target, "Camera look-at point (disables auto framing)",
             [&scene] { scene.auto_camera = false; });
  o.add(app, "--fov", scene.fov, "Vertical field of view, radians");
  o.add_switch(app, "--no-ground", scene.ground.enabled, false, "Disable the checkerboard ground");
  o.add(app, "--ground-height", scene.ground.height, "Ground plane height");
}

MotionClip rest_clip(const Skeleton& skeleton, double fps) {
  MotionClip clip;
  clip.fps = fps;
  clip.root_transforms.push_back(RigidTransform{});
  clip.joint_angles.emplace_back(static_cast<std::size_t>(skeleton.joint_count()), Vec3::Zero());
  return clip;
}

Image video_frame(const Video& video, int f) {
  Image img(video.height, video.width);
  auto src = video.frame(f);
  std::copy(src.begin(), src.end(), img.rgb.begin());
  return img;
}

Video render_clip(const AssetBundle& asset, const MotionClip& clip, const Camera& camera, bool follow,
                  int follow_window) {
  RenderChain chain(asset, {camera, follow_window, follow, 0});
  return chain.forward(MotionParams::from_clip(clip));
}

class MetricsLog {
 public:
  MetricsLog() = default;
  MetricsLog(const std::string& path, bool append) {
    if (path.empty()) return;
    if (fs::path(path).has_parent_path()) fs::create_directories(fs::path(path).parent_path());
    out_.open(path, append ? std::ios::app : std::ios::trunc);
    if (!out_) throw Error("cannot open " + path + " for writing");
  }
  void write(const json& record) {
    if (!out_.is_open()) return;
    out_ << record.dump() << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

void write_diagnostics(const std::string& path, const SimModel& model, const Rollout& roll, double fps,
                       const std::vector<long>& clip_substeps) {
  const int frames = static_cast<int>(roll.frames.size());
  std::vector<int> clips(static_cast<std::size_t>(frames), 0);
  const long n = model.config().substeps;
  for (long s : clip_substeps) {
    const long f = s / n + 1;
    if (f < frames) ++clips[static_cast<std::size_t>(f)];
  }
  std::string csv = "time,kinetic_energy,penetration,clip_events\n";
  char line[160];
  for (int i = 0; i < frames; ++i) {
    const SimState& s = roll.frames[static_cast<std::size_t>(i)];
    std::snprintf(line, sizeof line, "%.17g,%.17g,%.17g,%d\n", i / fps, kinetic_energy(model, s),
                  0.0 - max_penetration(model, s), clips[static_cast<std::size_t>(i)]);
    csv += line;
  }
  io::write_file(path, csv);
}

// ---------------------------------------------------------------------------
// skin

struct SkinCmd {
  Common common;
  Overrides o;
  std::string mesh, skeleton, out;
  SkinningOptions options;

  void attach(CLI::App* app) {
    common.attach(app);
    app->add_option("--mesh", mesh, "Mesh OBJ")->required();
    app->add_option("--skeleton", skeleton, "Skeleton JSON")->required();
    app->add_option("--out", out, "Output weights file (AKDW)")->required();
    o.add(app, "--heat-constant", options.heat_constant, "Heat constant c in H = c/d^2");
    o.add(app, "--distance-floor", options.distance_floor, "Lower bound on bone distances, m");
  }

  int run() {
    json j = common.load();
    if (!j.is_object()) throw InvalidInput("skin config must be a JSON object");
    for (const auto& item : j.items()) {
      if (item.key() == "heat_constant") options.heat_constant = item.value().get<double>();
      else if (item.key() == "distance_floor") options.distance_floor = item.value().get<double>();
      else if (item.key() == "cotangent_clamp") options.cotangent_clamp = item.value().get<double>();
      else if (item.key() == "tie_tolerance") options.tie_tolerance = item.value().get<double>();
      else throw InvalidInput("unknown skin config field \"" + item.key() + "\"");
    }
    o.apply();
    Mesh m = io::read_obj(mesh);
    Skeleton s = io::read_skeleton(skeleton);
    SkinWeights w = compute_skin_weights(m, s, options);
    io::write_weights(out, w);
    // Loading validates the file as written.
    SkinWeights back = io::read_weights(out);
    std::printf("vertices %d bones %d components %d\n", back.rows(), back.bones(), m.component_count());
    for (int b = 0; b < back.bones(); ++b) {
      double mass = back.matrix.col(b).sum();
      std::printf("bone %d weight mass %.6f (%.2f%%)\n", b, mass, 100.0 * mass / back.rows());
    }
    return 0;
  }
};

// ---------------------------------------------------------------------------
// render

struct RenderCmd {
  Common common;
  Overrides o;
  AssetFlags asset;
  std::string motion, out;
  io::SceneConfig scene;

  void attach(CLI::App* app) {
    common.attach(app);
    asset.attach(app);
    app->add_option("--motion", motion, "Motion JSON (omitted or empty: one rest-pose frame)");
    app->add_option("--out", out, "Output directory for frame_%04d.png")->required();
    o.add(app, "--width", scene.width, "Image width");
    o.add(app, "--height", scene.height, "Image height");
    o.add_switch(app, "--no-follow", scene.follow, false, "Keep the camera fixed");
    o.add(app, "--follow-window", scene.follow_window, "Frames averaged by the follow camera");
    attach_scene(app, o, scene);
  }

  int run() {
    io::apply_json(common.load(), scene);
    o.apply();
    io::apply_json(json::object(), scene);  // validates flag values
    AssetBundle a = io::load_asset(asset.paths(), scene);
    MotionClip clip = motion.empty() ? MotionClip{} : io::read_motion(motion);
    // An empty motion renders one rest-pose frame, below the two-frame
    // minimum of a clip, so only supplied motions are validated.
    if (clip.frame_count() == 0) clip = rest_clip(a.skeleton, clip.fps);
    else clip.validate(a.skeleton);
    Video v = render_clip(a, clip, scene.camera(a.cloud), scene.follow, scene.follow_window);
    fs::create_directories(out);
    for (int f = 0; f < v.frames; ++f) io::write_png(fs::path(out) / io::frame_name(f), video_frame(v, f));
    std::printf("frames %d size %dx%d\n", v.frames, v.width, v.height);
    return 0;
  }
};

// ---------------------------------------------------------------------------
// distill

struct DistillCmd {
  Common common;
  Overrides o;
  AssetFlags asset;
  std::string provider, out, metrics, checkpoint, resume, wire_mode = "velocity";
  int checkpoint_every = 0;
  DistillConfig config;
  io::SceneConfig scene;

  void attach(CLI::App* app) {
    common.attach(app);
    asset.attach(app);
    app->add_option("--provider", provider, "oracle | zero | attractor:<motion.json> | tcp://host:port")->required();
    app->add_option("--wire-mode", wire_mode, "Remote provider mode")->check(CLI::IsMember({"velocity", "sds_grad"}));
    app->add_option("--out", out, "Output motion JSON")->required();
    app->add_option("--metrics", metrics, "Per-iteration metrics, newline-delimited JSON");
    app->add_option("--checkpoint", checkpoint, "Checkpoint file written at the end (and every --checkpoint-every)");
    app->add_option("--checkpoint-every", checkpoint_every, "Iterations between checkpoints (0: end only)")
        ->check(CLI::NonNegativeNumber);
    app->add_option("--resume", resume, "Continue from a checkpoint")->check(CLI::ExistingFile);
    o.add(app, "--iterations", config.iterations, "Optimization iterations");
    o.add(app, "--frames", config.frames, "Frames F");
    o.add(app, "--fps", config.fps, "Frames per second");
    o.add(app, "--speed", config.speed, "Initial root speed along +x, m/s");
    o.add(app, "--width", config.width, "Render width");
    o.add(app, "--height", config.height, "Render height");
    o.add(app, "--lambda1", config.weights.smooth, "Smoothness weight");
    o.add(app, "--lambda2", config.weights.ground, "Ground weight");
    o.add(app, "--cfg-scale", config.cfg_scale, "Classifier-free guidance scale");
    o.add(app, "--prompt", config.prompt, "Text prompt");
    o.add(app, "--t-start", config.t_start, "Lower end of the diffusion time range");
    o.add(app, "--t-end-initial", config.t_end_initial, "Upper end at iteration 0");
    o.add(app, "--t-end-final", config.t_end_final, "Upper end after annealing");
    o.add(app, "--t-anneal-iterations", config.t_anneal_iterations, "Annealing length");
    o.add(app, "--lr-translation", config.lr_translation, "Step size of root translations");
    o.add(app, "--lr-rotation", config.lr_rotation, "Step size of root rotations");
    o.add(app, "--lr-angles", config.lr_angles, "Step size of joint angles");
    o.add(app, "--chunk", config.chunk, "Frames per render-chain recompute chunk (0: all)");
    o.add(app, "--follow-window", config.follow_window, "Frames averaged by the follow camera");
    o.add_switch(app, "--no-follow", config.follow, false, "Keep the camera fixed");
    o.add(app, "--max-retries", config.max_retries, "Guidance retries per iteration");
    o.add(app, "--grad-clip", config.grad_clip, "Gradient norm bound (<= 0 disables)");
    attach_scene(app, o, scene);
  }

  std::unique_ptr<GuidanceProvider> make_provider(const AssetBundle& a, const Camera& camera) const {
    if (provider == "oracle") return std::make_unique<LocalGuidance>(std::make_shared<OraclePredictor>());
    if (provider == "zero") return std::make_unique<LocalGuidance>(std::make_shared<ZeroPredictor>());
    if (provider.rfind("attractor:", 0) == 0) {
      MotionClip target = io::read_motion(provider.substr(10));
      target.validate(a.skeleton);
      if (target.frame_count() != config.frames)
        throw InvalidInput("attractor motion has " + std::to_string(target.frame_count()) + " frames, expected " +
                           std::to_string(config.frames));
      Video v = render_clip(a, target, camera, config.follow, config.follow_window);
      return std::make_unique<LocalGuidance>(std::make_shared<AttractorPredictor>(std::move(v)));
    }
    if (provider.rfind("tcp://", 0) == 0) {
      auto [host, port] = parse_tcp_address(provider);
      return std::make_unique<RemoteGuidance>(host, port, wire_mode == "sds_grad" ? WireMode::sds_grad
                                                                                  : WireMode::velocity);
    }
    throw InvalidInput("unknown provider \"" + provider + "\"");
  }

  int run() {
    json j = common.load();
    if (!j.is_object()) throw InvalidInput("distill config must be a JSON object");
    if (j.contains("scene")) {
      io::apply_json(j["scene"], scene);
      j.erase("scene");
    }
    io::apply_json(j, config);
    o.apply();
    if (common.seed_given()) config.seed = common.seed;
    config.validate();
    scene.width = config.width;
    scene.height = config.height;
    scene.follow = config.follow;
    scene.follow_window = config.follow_window;
    io::apply_json(json::object(), scene);

    AssetBundle a = io::load_asset(asset.paths(), scene);
    const Camera camera = scene.camera(a.cloud);
    auto guidance = make_provider(a, camera);

    DistillState state;
    if (!resume.empty()) {
      json ck = io::read_json(resume);
      if (!ck.is_object() || !ck.contains("state")) throw InvalidInput(resume + ": not a distillation checkpoint");
      state = DistillState::from_json(ck["state"]);
      if (state.iteration > config.iterations)
        throw InvalidInput(resume + ": checkpoint is at iteration " + std::to_string(state.iteration) +
                           ", past --iterations " + std::to_string(config.iterations));
    } else {
      state = distill_init(a.skeleton, config);
    }

    MetricsLog log(metrics, !resume.empty());
    auto save = [&](const DistillState& s) {
      if (checkpoint.empty()) return;
      io::write_json(checkpoint, {{"state", s.to_json()}, {"config", io::to_json(config)}});
    };
    int last_skipped = 0;
    distill_run(a, *guidance, config, camera, state, [&](const DistillMetrics& m, const DistillState& s) {
      log.write(m.to_json());
      if (m.skipped) ++last_skipped;
      if (checkpoint_every > 0 && s.iteration % checkpoint_every == 0) save(s);
    });
    save(state);
    io::write_motion(out, state.params.to_clip());
    std::printf("iterations %d skipped %d\n", state.iteration, last_skipped);
    return 0;
  }
};

// ---------------------------------------------------------------------------
// track

struct TrackCmd {
  Common common;
  Overrides o;
  std::string skeleton, motion, out, diagnostics, metrics;
  TrackConfig config;

  void attach(CLI::App* app) {
    common.attach(app);
    app->add_option("--skeleton", skeleton, "Skeleton JSON")->required();
    app->add_option("--motion", motion, "Target motion JSON")->required();
    app->add_option("--out", out, "Tracked motion JSON")->required();
    app->add_option("--diagnostics", diagnostics, "Per-frame CSV (default: <out>.csv)");
    app->add_option("--metrics", metrics, "Per-iteration metrics, newline-delimited JSON");
    o.add(app, "--iterations", config.iterations, "Optimization iterations");
    o.add(app, "--lambda3", config.lambda3, "Control smoothness weight");
    o.add(app, "--lr-targets", config.lr_targets, "Step size of PD targets");
    o.add(app, "--lr-velocity", config.lr_velocity, "Step size of initial velocities");
    o.add_switch(app, "--no-velocity", config.optimize_velocity, false, "Keep initial velocities at zero");
    attach_sim(app, o, config.sim);
  }

  static void attach_sim(CLI::App* app, Overrides& o, SimConfig& sim) {
    o.add(app, "--dt", sim.dt, "Substep, s");
    o.add(app, "--substeps", sim.substeps, "Substeps per frame");
    o.add(app, "--kp", sim.kp, "PD stiffness");
    o.add(app, "--kd", sim.kd, "PD damping");
    o.add(app, "--friction", sim.friction, "Coulomb friction coefficient");
    o.add(app, "--sim-chunk", sim.chunk, "Substeps per adjoint chunk");
    o.add(app, "--clip-threshold", sim.clip_threshold, "Adjoint norm bound after each chunk");
    o.add_switch(app, "--fix-root", sim.fix_root, true, "Hold the root bone in place");
    o.add_switch(app, "--no-contact", sim.contact, false, "Disable ground contact");
  }

  int run() {
    io::apply_json(common.load(), config);
    o.apply();
    config.validate();
    Skeleton s = io::read_skeleton(skeleton);
    MotionClip target = io::read_motion(motion);
    target.validate(s);
    MetricsLog log(metrics, false);
    TrackResult r = track(target, s, config, [&](const TrackMetrics& m) { log.write(m.to_json()); });

    SimModel model(s, config.sim);
    RolloutGradient g = rollout_adjoint(model, r.rollout, r.targets, r.loss.frame_cotangents);
    io::write_motion(out, rollout_clip(s, r.rollout, target.fps));
    write_diagnostics(diagnostics.empty() ? out + ".csv" : diagnostics, model, r.rollout, target.fps,
                      g.clip_substeps);
    std::printf("loss %.9g l1 %.9g regularizer %.9g lambda3 %.9g\n", r.loss.value, r.loss.l1, r.loss.regularizer,
                config.lambda3);
    return 0;
  }
};

// ---------------------------------------------------------------------------
// simulate

struct SimulateCmd {
  Common common;
  Overrides o;
  std::string skeleton, motion, out, out_motion;
  SimConfig config;

  void attach(CLI::App* app) {
    common.attach(app);
    app->add_option("--skeleton", skeleton, "Skeleton JSON")->required();
    app->add_option("--motion", motion, "Motion JSON: first frame is the initial pose, angles are PD targets")
        ->required();
    app->add_option("--out", out, "Per-frame diagnostics CSV")->required();
    app->add_option("--out-motion", out_motion, "Simulated motion JSON");
    TrackCmd::attach_sim(app, o, config);
  }

  int run() {
    io::apply_json(common.load(), config);
    o.apply();
    Skeleton s = io::read_skeleton(skeleton);
    config.validate(s);
    MotionClip clip = io::read_motion(motion);
    clip.validate(s);
    if (clip.frame_count() < 1) throw InvalidInput(motion + ": motion has no frames");
    SimModel model(s, config);
    const auto poses = clip_transforms(s, clip);
    SimState initial = config.fix_root ? SimState::at_rest(poses[0], s.root_index())
                                       : project_initial(poses[0], s, config.ground_height);
    Rollout roll = rollout(model, initial, clip_angles(clip));
    write_diagnostics(out, model, roll, clip.fps, {});
    if (!out_motion.empty()) io::write_motion(out_motion, rollout_clip(s, roll, clip.fps));
    std::printf("frames %d substeps %ld\n", static_cast<int>(roll.frames.size()), roll.total_substeps);
    return 0;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Skeleton-driven motion synthesis and physics tracking for Gaussian-splat assets", "akd"};
  app.require_subcommand(1);
  SkinCmd skin;
  RenderCmd render;
  DistillCmd distill;
  TrackCmd track_cmd;
  SimulateCmd simulate;
  CLI::App* skin_app = app.add_subcommand("skin", "Compute skinning weights for a mesh and skeleton");
  CLI::App* render_app = app.add_subcommand("render", "Render a motion as a PNG frame sequence");
  CLI::App* distill_app = app.add_subcommand("distill", "Synthesize a motion by score distillation");
  CLI::App* track_app = app.add_subcommand("track", "Track a motion with the physics simulator");
  CLI::App* simulate_app = app.add_subcommand("simulate", "Simulate PD control of a motion");
  skin.attach(skin_app);
  render.attach(render_app);
  distill.attach(distill_app);
  track_cmd.attach(track_app);
  simulate.attach(simulate_app);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*skin_app) return skin.run();
    if (*render_app) return render.run();
    if (*distill_app) return distill.run();
    if (*track_app) return track_cmd.run();
    if (*simulate_app) return simulate.run();
  } catch (const InvalidInput& e) {
    std::fprintf(stderr, "akd: invalid input: %s\n", e.what());
    return 2;
  } catch (const json::exception& e) {
    std::fprintf(stderr, "akd: invalid input: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "akd: error: %s\n", e.what());
    return 1;
  }
  return 2;
}
