#pragma once

#include "akd/error.hpp"
#include "akd/math.hpp"
#include "akd/skeleton.hpp"
#include "akd/splat.hpp"

#include <Eigen/Core>
#include <json.hpp>

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

namespace akd {

/// F×H×W×3 video, row-major, held in double precision in-process.
struct Video {
  int frames = 0;
  int height = 0;
  int width = 0;
  std::vector<double> data;

  Video() = default;
  Video(int f, int h, int w, double fill = 0.0)
      : frames(f), height(h), width(w), data(static_cast<std::size_t>(f) * h * w * 3, fill) {}

  std::size_t size() const { return data.size(); }
  std::array<std::int64_t, 4> shape() const { return {frames, height, width, 3}; }
  bool same_shape(const Video& o) const { return frames == o.frames && height == o.height && width == o.width; }
  std::size_t frame_stride() const { return static_cast<std::size_t>(height) * width * 3; }
  std::span<double> frame(int f) { return {data.data() + f * frame_stride(), frame_stride()}; }
  std::span<const double> frame(int f) const { return {data.data() + f * frame_stride(), frame_stride()}; }
  double norm() const;
};

/// Standard normal noise of the video's shape drawn from `seed`.
Video noise_like(const Video& shape, std::uint64_t seed);

/// ᾱ(t) and w(t).
struct NoiseSchedule {
  std::function<double(double)> alpha_bar;
  std::function<double(double)> weight;

  /// ᾱ = cos²(πt/2) clamped to [1e-4, 1 − 1e-4]; w ≡ 1.
  static NoiseSchedule cosine();
};

struct GuidanceQuery {
  double t = 0.5;
  std::uint64_t seed = 0;
  double cfg_scale = 100.0;
  std::string prompt;
};

/// v_θ(z_t; t, y).
class VelocityPredictor {
 public:
  virtual ~VelocityPredictor() = default;
  virtual Video predict(const Video& noisy, const GuidanceQuery& query, const NoiseSchedule& schedule) = 0;
};

/// Recovers ε (from the query seed unless given explicitly) and returns
/// √ᾱ ε − √(1−ᾱ) z, so ẑ = z.
class OraclePredictor final : public VelocityPredictor {
 public:
  OraclePredictor() = default;
  explicit OraclePredictor(Video noise) : noise_(std::move(noise)) {}
  Video predict(const Video& noisy, const GuidanceQuery& query, const NoiseSchedule& schedule) override;

 private:
  std::optional<Video> noise_;
};

class ZeroPredictor final : public VelocityPredictor {
 public:
  Video predict(const Video& noisy, const GuidanceQuery& query, const NoiseSchedule& schedule) override;
};

/// Predicts the velocity that makes ẑ equal `target`, so the SDS gradient
/// is w(t)·(z − target).
class AttractorPredictor final : public VelocityPredictor {
 public:
  explicit AttractorPredictor(Video target) : target_(std::move(target)) {}
  Video predict(const Video& noisy, const GuidanceQuery& query, const NoiseSchedule& schedule) override;
  const Video& target() const { return target_; }

 private:
  Video target_;
};

/// z_t = √ᾱ z + √(1−ᾱ) ε; ẑ = √ᾱ z_t − √(1−ᾱ) v; returns w·(z − ẑ).
/// Throws InvalidInput on a predictor shape mismatch, NumericalError on
/// non-finite predictions.
Video sds_gradient(const Video& z, const Video& noise, VelocityPredictor& predictor, const GuidanceQuery& query,
                   const NoiseSchedule& schedule);

/// Source of pixel-space SDS gradients for a rendered video.
class GuidanceProvider {
 public:
  virtual ~GuidanceProvider() = default;
  virtual Video gradient(const Video& z, const GuidanceQuery& query) = 0;
};

/// In-process provider: sds_gradient with a local predictor.
class LocalGuidance final : public GuidanceProvider {
 public:
  LocalGuidance(std::shared_ptr<VelocityPredictor> predictor, NoiseSchedule schedule = NoiseSchedule::cosine())
      : predictor_(std::move(predictor)), schedule_(std::move(schedule)) {}
  Video gradient(const Video& z, const GuidanceQuery& query) override;

 private:
  std::shared_ptr<VelocityPredictor> predictor_;
  NoiseSchedule schedule_;
};

// ---------------------------------------------------------------------------
// Wire protocol

class ProtocolError : public Error {
 public:
  using Error::Error;
};

namespace wire {

inline constexpr char kMagic[8] = {'A', 'K', 'D', 'G', 'R', 'A', 'D', '1'};
inline constexpr std::uint32_t kMaxHeaderBytes = 1u << 20;
inline constexpr std::uint64_t kMaxPayloadFloats = 1ull << 30;

struct Message {
  nlohmann::json header;
  std::vector<float> payload;
};

/// magic, u32 LE header length, JSON header, LE f32 payload.
std::string encode(const Message& message);
/// Inverse of encode; the payload length comes from header["shape"].
Message decode(std::string_view bytes);
/// Number of payload floats implied by header["shape"]; throws ProtocolError.
std::uint64_t payload_count(const nlohmann::json& header);

/// Blocking framed I/O on a stream file descriptor. read_message returns
/// nullopt on a clean end of stream before the first byte.
void write_message(int fd, const Message& message);
std::optional<Message> read_message(int fd);

std::vector<float> to_f32(const Video& v);
Video from_f32(std::span<const float> data, const nlohmann::json& shape);

}  // namespace wire

enum class WireMode { velocity, sds_grad };

/// Provider behind a TCP socket. In velocity mode the remote returns v_θ and
/// the gradient is formed locally; in sds_grad mode the remote returns it.
/// Requests always carry the clean video z; both sides derive ε and z_t
/// from the seed. Failed calls are retried `retries` times on a fresh
/// connection before ProtocolError propagates.
class RemoteGuidance final : public GuidanceProvider {
 public:
  RemoteGuidance(std::string host, int port, WireMode mode = WireMode::velocity,
                 NoiseSchedule schedule = NoiseSchedule::cosine(), int retries = 2);
  ~RemoteGuidance() override;
  Video gradient(const Video& z, const GuidanceQuery& query) override;

 private:
  Video call(const Video& z, const GuidanceQuery& query);
  void connect();
  void disconnect();

  std::string host_;
  int port_;
  WireMode mode_;
  NoiseSchedule schedule_;
  int retries_;
  int fd_ = -1;
};

/// Parses "tcp://host:port"; throws InvalidInput.
std::pair<std::string, int> parse_tcp_address(const std::string& spec);

/// Answers framed requests on one connected stream until end of stream.
/// Malformed frames get a status:"error" response with shape [0] and no
/// payload. The connection is kept whenever the frame boundary is still
/// known (bad magic or a failing request); an unparsable header or shape
/// ends it.
void serve_connection(int fd, VelocityPredictor& predictor, const NoiseSchedule& schedule);

/// Reference provider server on 127.0.0.1 (ephemeral port by default),
/// one thread per connection.
class PredictorServer {
 public:
  PredictorServer(std::shared_ptr<VelocityPredictor> predictor, NoiseSchedule schedule = NoiseSchedule::cosine(),
                  int port = 0);
  ~PredictorServer();
  PredictorServer(const PredictorServer&) = delete;
  PredictorServer& operator=(const PredictorServer&) = delete;

  int port() const { return port_; }
  void stop();

 private:
  void accept_loop();

  std::shared_ptr<VelocityPredictor> predictor_;
  NoiseSchedule schedule_;
  int listen_fd_ = -1;
  int port_ = 0;
  std::thread acceptor_;
  std::vector<std::thread> workers_;
  std::vector<int> client_fds_;
  std::mutex mutex_;
  bool stopping_ = false;
};

// ---------------------------------------------------------------------------
// Motion parameters and regularizers

/// Θ flattened per frame: [root translation (3), root rotation increment
/// ω (3), joint angles 3(B−1)]. The root rotation of frame i is
/// Exp(ω_i)·base_rotation_i.
struct MotionParams {
  Eigen::MatrixXd theta;                // F × (6 + 3(B−1))
  std::vector<Mat3> base_rotations;     // F
  double fps = 8.0;

  int frames() const { return static_cast<int>(theta.rows()); }
  static MotionParams from_clip(const MotionClip& clip);
  MotionClip to_clip() const;
  RigidTransform root(int frame) const;
  std::vector<Vec3> angles(int frame) const;
};

/// Scatters per-frame FK cotangents into a Θ-shaped gradient row.
void accumulate_frame_gradient(const MotionParams& params, int frame, const FkGradient& fk, Eigen::MatrixXd& grad);

struct LossValue {
  double value = 0.0;
  Eigen::MatrixXd gradient;
};

/// Mean over interior frames and entries of |Θ_{i−1} − 2Θ_i + Θ_{i+1}|,
/// with the sign subgradient (0 at 0). Throws InvalidInput for F < 3.
LossValue smoothness_loss(const Eigen::MatrixXd& theta);

struct GroundLossValue {
  double value = 0.0;
  std::vector<std::vector<TransformGrad>> gradient;  // [frame][bone]
};

/// Mean of max(height − y, 0) over the points.
double mean_penetration(std::span<const Vec3> points, double ground_height = 0.0);

/// Mean over every cuboid corner of every frame of max(height − y, 0).
GroundLossValue ground_loss(const std::vector<std::vector<RigidTransform>>& bone_transforms, const Skeleton& skeleton,
                            double ground_height = 0.0);

// ---------------------------------------------------------------------------
// Render chain

/// Everything needed to turn Θ into a rendered video.
struct AssetBundle {
  Skeleton skeleton;
  GaussianCloud cloud;           // rest pose
  Eigen::MatrixXd kernel_weights;  // P×B
  GroundConfig ground;
  RenderSettings render;
};

struct RenderChainConfig {
  Camera base_camera;
  int follow_window = 1;
  bool follow = true;
  int chunk = 0;  // frames per recompute chunk; 0 means all frames
};

struct ChainCounters {
  int peak_live_tapes = 0;     // per-frame activations held at once
  int checkpoints = 0;         // stored chunk-boundary states
  int recomputed_frames = 0;   // frames re-run during backward
};

/// Θ → FK → LBS → render, frame by frame. The backward pass recomputes each
/// chunk's activations from its boundary checkpoint; frames are independent,
/// so gradients do not depend on the chunk size.
class RenderChain {
 public:
  RenderChain(const AssetBundle& asset, RenderChainConfig config);

  Video forward(const MotionParams& params);
  /// dL/dΘ for a pixel cotangent. Cameras are held fixed at the values
  /// computed by the last forward.
  Eigen::MatrixXd backward(const MotionParams& params, const Video& cotangent);

  const std::vector<Camera>& cameras() const { return cameras_; }
  const ChainCounters& counters() const { return counters_; }
  const AssetBundle& asset() const { return asset_; }
  /// World bone transforms per frame from the last forward.
  const std::vector<std::vector<RigidTransform>>& bone_transforms() const { return bones_; }

 private:
  struct FrameTape {
    std::vector<RigidTransform> world;
    std::vector<RigidTransform> relative;
    GaussianCloud deformed;
  };
  FrameTape record(const MotionParams& params, int frame) const;

  const AssetBundle& asset_;
  RenderChainConfig config_;
  std::vector<RigidTransform> rest_;
  std::vector<Camera> cameras_;
  std::vector<std::vector<RigidTransform>> bones_;
  ChainCounters counters_;
};

struct LossWeights {
  double smooth = 2e5;  // λ₁
  double ground = 1e7;  // λ₂
};

struct DistillStep {
  double l_smooth = 0.0;
  double l_ground = 0.0;
  double sds_norm = 0.0;   // ‖SDS pixel gradient‖
  /// <g_sds, z> + λ₁L_smooth + λ₂L_ground with g_sds held constant; its
  /// Θ-gradient equals `gradient`.
  double surrogate = 0.0;
  Eigen::MatrixXd gradient;  // total dL/dΘ
  Video video;
};

/// Total Θ gradient: SDS pixel gradient pulled back through the render
/// chain plus λ₁∇L_smooth + λ₂∇L_ground.
DistillStep distill_gradient(RenderChain& chain, const MotionParams& params, GuidanceProvider& provider,
                             const GuidanceQuery& query, const LossWeights& weights);

}  // namespace akd
