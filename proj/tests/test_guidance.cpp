#include "akd/guidance.hpp"
#include "support/fixtures.hpp"

#include <doctest.h>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <numbers>
#include <thread>

using namespace akd;
using namespace akd::testing;

namespace {

Video random_video(Random& rng, int f, int h, int w, double lo = 0.0, double hi = 1.0) {
  Video v(f, h, w);
  for (double& x : v.data) x = rng.uniform(lo, hi);
  return v;
}

double max_abs(const Video& v) {
  double m = 0.0;
  for (double x : v.data) m = std::max(m, std::abs(x));
  return m;
}

double max_abs_diff(const Video& a, const Video& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

class IdentityPredictor final : public VelocityPredictor {
 public:
  Video predict(const Video& noisy, const GuidanceQuery&, const NoiseSchedule&) override { return noisy; }
};

class WrongShapePredictor final : public VelocityPredictor {
 public:
  Video predict(const Video& noisy, const GuidanceQuery&, const NoiseSchedule&) override {
    return Video(noisy.frames, noisy.height + 1, noisy.width);
  }
};

class NanPredictor final : public VelocityPredictor {
 public:
  Video predict(const Video& noisy, const GuidanceQuery&, const NoiseSchedule&) override {
    Video v(noisy.frames, noisy.height, noisy.width);
    v.data.back() = std::nan("");
    return v;
  }
};

class ZeroGuidance final : public GuidanceProvider {
 public:
  Video gradient(const Video& z, const GuidanceQuery&) override { return Video(z.frames, z.height, z.width); }
};

class FixedGuidance final : public GuidanceProvider {
 public:
  explicit FixedGuidance(Video g) : g_(std::move(g)) {}
  Video gradient(const Video&, const GuidanceQuery&) override { return g_; }

 private:
  Video g_;
};

std::vector<double> flatten(const Eigen::MatrixXd& m) {
  std::vector<double> out;
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) out.push_back(m(i, j));
  return out;
}

Eigen::MatrixXd unflatten(const std::vector<double>& x, Eigen::Index rows, Eigen::Index cols) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = x[static_cast<std::size_t>(i * cols + j)];
  return m;
}

MotionParams random_params(Random& rng, const Skeleton& skel, int frames, double spread = 0.3) {
  MotionClip clip;
  for (int i = 0; i < frames; ++i) {
    clip.root_transforms.push_back({exp_so3(rng.vec3(-0.2, 0.2)), rng.vec3(-0.05, 0.05)});
    clip.joint_angles.push_back(random_angles(rng, skel.joint_count(), spread));
  }
  MotionParams p = MotionParams::from_clip(clip);
  for (int i = 0; i < frames; ++i) p.theta.block<1, 3>(i, 3) = rng.vec3(-0.2, 0.2).transpose();
  return p;
}

std::vector<std::vector<RigidTransform>> pose_frames(const Skeleton& skel, const MotionParams& p) {
  std::vector<std::vector<RigidTransform>> out;
  for (int i = 0; i < p.frames(); ++i) out.push_back(forward_kinematics(skel, p.root(i), p.angles(i)));
  return out;
}

/// λ₂ L_ground ∘ FK as a function of Θ, with its gradient.
double ground_objective(const Skeleton& skel, MotionParams p, const std::vector<double>& x) {
  p.theta = unflatten(x, p.theta.rows(), p.theta.cols());
  return ground_loss(pose_frames(skel, p), skel).value;
}

}  // namespace

// ---------------------------------------------------------------------------
// Schedule and SDS

TEST_CASE("cosine schedule is decreasing and clamped") {
  NoiseSchedule s = NoiseSchedule::cosine();
  CHECK(s.alpha_bar(0.0) == doctest::Approx(1.0 - 1e-4));
  CHECK(s.alpha_bar(1.0) == doctest::Approx(1e-4));
  double prev = 2.0;
  for (double t = 0.02; t <= 0.98; t += 0.01) {
    double a = s.alpha_bar(t);
    CHECK(a < prev);
    CHECK(a > 0.0);
    CHECK(a < 1.0);
    CHECK(s.weight(t) == 1.0);
    prev = a;
  }
}

TEST_CASE("sds: oracle predictor gives a zero gradient for 100 random draws") {
  Random rng(11);
  NoiseSchedule s = NoiseSchedule::cosine();
  OraclePredictor oracle;
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    Video z = random_video(rng, rng.integer(1, 4), rng.integer(1, 6), rng.integer(1, 6));
    GuidanceQuery q;
    q.t = rng.uniform(0.0, 1.0);
    q.seed = rng.integer(0, 1 << 30);
    Video g = sds_gradient(z, noise_like(z, q.seed), oracle, q, s);
    worst = std::max(worst, max_abs(g));
  }
  CHECK(worst < 1e-6);
  CHECK(worst < 1e-12);
}

TEST_CASE("sds: oracle with zero noise gives zero for any t") {
  Random rng(12);
  NoiseSchedule s = NoiseSchedule::cosine();
  Video z = random_video(rng, 2, 3, 4);
  Video zero(2, 3, 4);
  OraclePredictor oracle(zero);
  for (double t : {0.0, 0.02, 0.3, 0.5, 0.77, 0.98, 1.0}) {
    GuidanceQuery q;
    q.t = t;
    CHECK(max_abs(sds_gradient(z, zero, oracle, q, s)) < 1e-12);
  }
}

TEST_CASE("sds: zero predictor matches direct substitution") {
  Random rng(13);
  NoiseSchedule s = NoiseSchedule::cosine();
  ZeroPredictor zp;
  for (int trial = 0; trial < 20; ++trial) {
    Video z = random_video(rng, 2, 3, 3);
    GuidanceQuery q;
    q.t = rng.uniform(0.02, 0.98);
    q.seed = static_cast<std::uint64_t>(trial);
    Video eps = noise_like(z, q.seed);
    Video g = sds_gradient(z, eps, zp, q, s);
    double ab = s.alpha_bar(q.t);
    for (std::size_t i = 0; i < z.size(); ++i) {
      double expected = z.data[i] - ab * z.data[i] - std::sqrt(ab) * std::sqrt(1.0 - ab) * eps.data[i];
      CHECK(g.data[i] == doctest::Approx(expected).epsilon(1e-12));
    }
  }
}

TEST_CASE("sds: attractor gradient is z minus the target") {
  Random rng(14);
  Video z = random_video(rng, 3, 4, 5), target = random_video(rng, 3, 4, 5);
  AttractorPredictor attractor(target);
  NoiseSchedule s = NoiseSchedule::cosine();
  for (double t : {0.02, 0.5, 0.98}) {
    GuidanceQuery q;
    q.t = t;
    q.seed = 99;
    Video g = sds_gradient(z, noise_like(z, q.seed), attractor, q, s);
    Video expected = z;
    for (std::size_t i = 0; i < z.size(); ++i) expected.data[i] -= target.data[i];
    CHECK(max_abs_diff(g, expected) < 1e-12);
  }
}

TEST_CASE("sds: weight scales the output exactly") {
  Random rng(15);
  Video z = random_video(rng, 2, 3, 3);
  NoiseSchedule s1 = NoiseSchedule::cosine();
  NoiseSchedule s2 = s1;
  s2.weight = [](double) { return 2.5; };
  ZeroPredictor zp;
  GuidanceQuery q;
  q.t = 0.4;
  Video eps = noise_like(z, 5);
  Video g1 = sds_gradient(z, eps, zp, q, s1), g2 = sds_gradient(z, eps, zp, q, s2);
  for (std::size_t i = 0; i < z.size(); ++i) CHECK(g2.data[i] == 2.5 * g1.data[i]);
}

TEST_CASE("sds: error cases") {
  Random rng(16);
  Video z = random_video(rng, 2, 3, 3);
  NoiseSchedule s = NoiseSchedule::cosine();
  GuidanceQuery q;
  WrongShapePredictor wrong;
  NanPredictor nan;
  ZeroPredictor zp;
  CHECK_THROWS_AS(sds_gradient(z, noise_like(z, 1), wrong, q, s), InvalidInput);
  CHECK_THROWS_AS(sds_gradient(z, noise_like(z, 1), nan, q, s), NumericalError);
  CHECK_THROWS_AS(sds_gradient(z, Video(2, 3, 4), zp, q, s), InvalidInput);
  q.t = 1.5;
  CHECK_THROWS_AS(sds_gradient(z, noise_like(z, 1), zp, q, s), InvalidInput);
  AttractorPredictor attractor(Video(1, 1, 1));
  q.t = 0.5;
  CHECK_THROWS_AS(sds_gradient(z, noise_like(z, 1), attractor, q, s), InvalidInput);
}

TEST_CASE("noise is a deterministic function of the seed") {
  Video shape(2, 4, 4);
  Video a = noise_like(shape, 7), b = noise_like(shape, 7), c = noise_like(shape, 8);
  CHECK(a.data == b.data);
  CHECK(a.data != c.data);
  double mean = 0.0, var = 0.0;
  Video big = noise_like(Video(8, 64, 64), 3);
  for (double x : big.data) mean += x;
  mean /= static_cast<double>(big.size());
  for (double x : big.data) var += (x - mean) * (x - mean);
  var /= static_cast<double>(big.size());
  CHECK(std::abs(mean) < 0.02);
  CHECK(std::abs(var - 1.0) < 0.02);
}

// ---------------------------------------------------------------------------
// Wire protocol

TEST_CASE("wire: frame layout is magic, little-endian length, header, payload") {
  wire::Message m;
  m.header = {{"shape", {1, 1, 1, 3}}, {"status", "ok"}};
  m.payload = {1.0f, -2.5f, 0.15625f};
  std::string bytes = wire::encode(m);
  std::string text = m.header.dump();
  REQUIRE(bytes.size() == 8 + 4 + text.size() + 12);
  CHECK(bytes.substr(0, 8) == "AKDGRAD1");
  auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  CHECK(p[8] == (text.size() & 0xFF));
  CHECK(p[9] == ((text.size() >> 8) & 0xFF));
  CHECK(p[10] == 0);
  CHECK(p[11] == 0);
  CHECK(bytes.substr(12, text.size()) == text);
  // 1.0f = 0x3F800000, little-endian.
  CHECK(p[12 + text.size() + 0] == 0x00);
  CHECK(p[12 + text.size() + 2] == 0x80);
  CHECK(p[12 + text.size() + 3] == 0x3F);
  wire::Message back = wire::decode(bytes);
  CHECK(back.header == m.header);
  CHECK(back.payload == m.payload);
}

TEST_CASE("wire: random payload round trip is bit-exact") {
  Random rng(21);
  wire::Message m;
  m.header = {{"shape", {2, 5, 7, 3}}, {"t", 0.25}, {"seed", 18446744073709551615ull}};
  for (int i = 0; i < 2 * 5 * 7 * 3; ++i) m.payload.push_back(std::bit_cast<float>(static_cast<std::uint32_t>(rng.integer(0, 0x7F7FFFFF))));
  wire::Message back = wire::decode(wire::encode(m));
  REQUIRE(back.payload.size() == m.payload.size());
  CHECK(std::memcmp(back.payload.data(), m.payload.data(), 4 * m.payload.size()) == 0);
  CHECK(back.header["seed"].get<std::uint64_t>() == 18446744073709551615ull);
}

TEST_CASE("wire: malformed frames are rejected") {
  wire::Message m;
  m.header = {{"shape", {1, 1, 1, 3}}};
  m.payload = {0.f, 0.f, 0.f};
  std::string good = wire::encode(m);
  std::string bad = good;
  bad[0] = 'X';
  CHECK_THROWS_AS(wire::decode(bad), ProtocolError);
  CHECK_THROWS_AS(wire::decode(good.substr(0, good.size() - 1)), ProtocolError);
  CHECK_THROWS_AS(wire::decode(good.substr(0, 10)), ProtocolError);
  m.payload.pop_back();
  CHECK_THROWS_AS(wire::encode(m), ProtocolError);
  CHECK_THROWS_AS(wire::payload_count({{"shape", {-1, 2}}}), ProtocolError);
  CHECK_THROWS_AS(wire::payload_count({{"shape", {1u << 20, 1u << 20, 1u << 20, 3}}}), ProtocolError);
  CHECK_THROWS_AS(wire::payload_count({{"shape", "abc"}}), ProtocolError);
  CHECK(wire::payload_count({{"shape", {0}}}) == 0);
}

TEST_CASE("wire: socket echo is byte-exact") {
  int fds[2];
  REQUIRE(::socketpair(AF_UNIX, SOCK_STREAM, 0, fds) == 0);
  std::thread echo([fd = fds[1]] {
    while (auto m = wire::read_message(fd)) {
      m->header["status"] = "ok";
      wire::write_message(fd, *m);
    }
    ::close(fd);
  });
  Random rng(22);
  for (int trial = 0; trial < 5; ++trial) {
    Video v = random_video(rng, 2, 8, 8, -3.0, 3.0);
    wire::Message m;
    m.header = {{"shape", {2, 8, 8, 3}}};
    m.payload = wire::to_f32(v);
    wire::write_message(fds[0], m);
    auto back = wire::read_message(fds[0]);
    REQUIRE(back);
    CHECK(std::memcmp(back->payload.data(), m.payload.data(), 4 * m.payload.size()) == 0);
  }
  ::shutdown(fds[0], SHUT_WR);
  echo.join();
  ::close(fds[0]);
}

TEST_CASE("tcp address parsing") {
  auto [host, port] = parse_tcp_address("tcp://127.0.0.1:5555");
  CHECK(host == "127.0.0.1");
  CHECK(port == 5555);
  CHECK_THROWS_AS(parse_tcp_address("udp://x:1"), InvalidInput);
  CHECK_THROWS_AS(parse_tcp_address("tcp://host"), InvalidInput);
  CHECK_THROWS_AS(parse_tcp_address("tcp://host:0"), InvalidInput);
  CHECK_THROWS_AS(parse_tcp_address("tcp://host:99999"), InvalidInput);
  CHECK_THROWS_AS(parse_tcp_address("tcp://host:12ab"), InvalidInput);
}

TEST_CASE("server: identity predictor in velocity mode returns f32 of z_t") {
  PredictorServer server(std::make_shared<IdentityPredictor>());
  Random rng(23);
  Video z = random_video(rng, 2, 4, 4);
  GuidanceQuery q;
  q.t = 0.3;
  q.seed = 77;
  wire::Message req;
  req.header = {{"shape", {2, 4, 4, 3}}, {"t", q.t}, {"seed", q.seed}, {"cfg_scale", 100.0}, {"prompt", "x"}, {"mode", "velocity"}};
  req.payload = wire::to_f32(z);

  int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(static_cast<std::uint16_t>(server.port()));
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  REQUIRE(::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) == 0);
  wire::write_message(fd, req);
  auto resp = wire::read_message(fd);
  REQUIRE(resp);
  CHECK(resp->header["status"] == "ok");
  CHECK(resp->header["shape"] == req.header["shape"]);

  double ab = NoiseSchedule::cosine().alpha_bar(q.t);
  Video eps = noise_like(z, q.seed);
  std::vector<float> expected(z.size());
  for (std::size_t i = 0; i < z.size(); ++i)
    expected[i] = static_cast<float>(std::sqrt(ab) * static_cast<double>(req.payload[i]) + std::sqrt(1.0 - ab) * eps.data[i]);
  CHECK(std::memcmp(resp->payload.data(), expected.data(), 4 * expected.size()) == 0);

  // Bad magic: error response, connection kept.
  std::string bad = wire::encode(req);
  bad[3] = '?';
  REQUIRE(::send(fd, bad.data(), bad.size(), MSG_NOSIGNAL) == static_cast<ssize_t>(bad.size()));
  auto err = wire::read_message(fd);
  REQUIRE(err);
  CHECK(err->header["status"] == "error");
  CHECK(err->header["message"] == "bad magic");
  CHECK(err->payload.empty());
  wire::write_message(fd, req);
  auto again = wire::read_message(fd);
  REQUIRE(again);
  CHECK(again->header["status"] == "ok");

  // Unknown mode: error response, connection kept.
  wire::Message odd = req;
  odd.header["mode"] = "sample";
  wire::write_message(fd, odd);
  auto e2 = wire::read_message(fd);
  REQUIRE(e2);
  CHECK(e2->header["status"] == "error");
  wire::write_message(fd, req);
  CHECK(wire::read_message(fd)->header["status"] == "ok");

  // Shape overflow: error response.
  std::string text = nlohmann::json{{"shape", {1u << 20, 1u << 20, 1u << 20, 3}}, {"t", 0.5}}.dump();
  std::string frame(wire::kMagic, 8);
  for (int k = 0; k < 4; ++k) frame.push_back(static_cast<char>((text.size() >> (8 * k)) & 0xFF));
  frame += text;
  REQUIRE(::send(fd, frame.data(), frame.size(), MSG_NOSIGNAL) == static_cast<ssize_t>(frame.size()));
  auto e3 = wire::read_message(fd);
  REQUIRE(e3);
  CHECK(e3->header["status"] == "error");
  ::close(fd);
}

TEST_CASE("remote oracle matches the in-process oracle to 1e-6") {
  PredictorServer server(std::make_shared<OraclePredictor>());
  RemoteGuidance velocity("127.0.0.1", server.port(), WireMode::velocity);
  RemoteGuidance sds("127.0.0.1", server.port(), WireMode::sds_grad);
  LocalGuidance local(std::make_shared<OraclePredictor>());
  Random rng(24);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    Video z = random_video(rng, 3, 5, 5);
    GuidanceQuery q;
    q.t = trial == 0 ? 0.98 : rng.uniform(0.02, 0.98);
    q.seed = static_cast<std::uint64_t>(1000 + trial);
    Video gl = local.gradient(z, q);
    worst = std::max(worst, max_abs_diff(velocity.gradient(z, q), gl));
    worst = std::max(worst, max_abs_diff(sds.gradient(z, q), gl));
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("remote attractor matches the in-process attractor") {
  Random rng(25);
  Video target = random_video(rng, 2, 4, 4);
  PredictorServer server(std::make_shared<AttractorPredictor>(target));
  RemoteGuidance remote("127.0.0.1", server.port());
  LocalGuidance local(std::make_shared<AttractorPredictor>(target));
  Video z = random_video(rng, 2, 4, 4);
  GuidanceQuery q;
  q.t = 0.5;
  q.seed = 3;
  CHECK(max_abs_diff(remote.gradient(z, q), local.gradient(z, q)) < 1e-5);
}

TEST_CASE("remote provider failures surface as protocol errors") {
  auto server = std::make_unique<PredictorServer>(std::make_shared<WrongShapePredictor>());
  RemoteGuidance remote("127.0.0.1", server->port(), WireMode::velocity, NoiseSchedule::cosine(), 1);
  Video z(1, 2, 2);
  GuidanceQuery q;
  CHECK_THROWS_AS(remote.gradient(z, q), ProtocolError);
  int port = server->port();
  server.reset();
  RemoteGuidance gone("127.0.0.1", port, WireMode::velocity, NoiseSchedule::cosine(), 1);
  CHECK_THROWS_AS(gone.gradient(z, q), ProtocolError);
}

// ---------------------------------------------------------------------------
// Regularizers

TEST_CASE("smoothness: constant and linear motions give zero") {
  Eigen::MatrixXd c = Eigen::MatrixXd::Constant(6, 4, 0.7);
  CHECK(smoothness_loss(c).value == 0.0);
  Eigen::MatrixXd lin(6, 4);
  for (int i = 0; i < 6; ++i)
    for (int k = 0; k < 4; ++k) lin(i, k) = 3.0 * i - 2.0 * k + 1.0;
  CHECK(smoothness_loss(lin).value == 0.0);
  CHECK_THROWS_AS(smoothness_loss(Eigen::MatrixXd::Zero(2, 3)), InvalidInput);
}

TEST_CASE("smoothness: spike over five frames is 4a/3") {
  for (double a : {0.75, -1.5, 3.0, 0.3, -0.1}) {
    Eigen::MatrixXd theta = Eigen::MatrixXd::Zero(5, 1);
    theta(2, 0) = a;
    CHECK(smoothness_loss(theta).value == 4.0 * std::abs(a) / 3.0);
  }
}

TEST_CASE("smoothness: time reversal invariance and finite differences") {
  Random rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    int f = rng.integer(3, 9), p = rng.integer(1, 7);
    Eigen::MatrixXd theta(f, p);
    for (int i = 0; i < f; ++i)
      for (int k = 0; k < p; ++k) theta(i, k) = rng.uniform(-1.0, 1.0);
    Eigen::MatrixXd reversed = theta.colwise().reverse();
    LossValue l = smoothness_loss(theta);
    CHECK(std::abs(l.value - smoothness_loss(reversed).value) < 1e-12);
    auto fd = central_difference(
        [&](const std::vector<double>& x) { return smoothness_loss(unflatten(x, f, p)).value; }, flatten(theta), 1e-7);
    CHECK(relative_error(flatten(l.gradient), fd) < 1e-4);
  }
}

TEST_CASE("ground: two corners at -1 and 2 give 0.5") {
  std::vector<Vec3> two = {Vec3(0.0, -1.0, 0.0), Vec3(0.3, 2.0, 0.0)};
  CHECK(mean_penetration(two) == 0.5);
  std::vector<Vec3> above = {Vec3(0, 0.1, 0), Vec3(0, 3, 0)};
  CHECK(mean_penetration(above) == 0.0);

  // A cuboid spanning y in [-1, 2]: four corners at each height.
  Bone bone;
  bone.half_extents = Vec3(0.5, 1.5, 0.5);
  bone.rest = RigidTransform::from_translation(Vec3(0.0, 0.5, 0.0));
  Skeleton skel({bone});
  CHECK(ground_loss({rest_pose(skel)}, skel).value == 0.5);
}

TEST_CASE("ground: invariant under horizontal rigid motion") {
  Random rng(32);
  for (int trial = 0; trial < 20; ++trial) {
    Skeleton skel = random_skeleton(rng, 4);
    std::vector<std::vector<RigidTransform>> frames;
    for (int i = 0; i < 3; ++i) {
      RigidTransform root{rng.rotation(), rng.vec3(-0.3, 0.3)};
      frames.push_back(forward_kinematics(skel, root, random_angles(rng, 3)));
    }
    RigidTransform motion{axis_rotation(Vec3::UnitY(), rng.uniform(-3.0, 3.0)),
                          Vec3(rng.uniform(-5.0, 5.0), 0.0, rng.uniform(-5.0, 5.0))};
    auto moved = frames;
    for (auto& f : moved)
      for (auto& x : f) x = motion * x;
    double a = ground_loss(frames, skel).value, b = ground_loss(moved, skel).value;
    CHECK(a > 0.0);
    CHECK(std::abs(a - b) < 1e-12);
  }
}

TEST_CASE("ground: uniform downward shift grows with slope equal to the fraction below") {
  Skeleton skel = make_chain(3, 0.4, 0.1);
  std::vector<Bone> bones = skel.bones();
  bones[0].rest = RigidTransform::from_translation(Vec3(0.0, 0.05, 0.0));
  skel = Skeleton(bones);
  Random rng(33);
  std::vector<RigidTransform> pose =
      forward_kinematics(skel, RigidTransform::identity(), random_angles(rng, 2, 0.3));
  auto shifted = [&](double h) {
    auto p = pose;
    for (auto& x : p) x.translation.y() -= h;
    return ground_loss({p}, skel).value;
  };
  double h = 0.02, dh = 1e-6;
  std::vector<Vec3> corners;
  for (int b = 0; b < skel.bone_count(); ++b)
    for (const Vec3& c : skel.corners(b)) corners.push_back(pose[static_cast<std::size_t>(b)].apply(c) - h * Vec3::UnitY());
  double below = 0.0;
  for (const Vec3& c : corners) below += c.y() < 0.0 ? 1.0 : 0.0;
  below /= static_cast<double>(corners.size());
  CHECK(below > 0.0);
  double slope = (shifted(h + dh) - shifted(h - dh)) / (2.0 * dh);
  CHECK(slope == doctest::Approx(below).epsilon(1e-6));
}

TEST_CASE("ground: gradient through kinematics matches finite differences") {
  Random rng(34);
  int compared = 0;
  for (int trial = 0; trial < 50; ++trial) {
    Skeleton skel = random_skeleton(rng, rng.integer(2, 4));
    MotionParams p = random_params(rng, skel, rng.integer(1, 3), 1.0);
    for (int i = 0; i < p.frames(); ++i) p.theta(i, 1) = rng.uniform(-0.2, 0.4);
    auto frames = pose_frames(skel, p);
    GroundLossValue g = ground_loss(frames, skel);
    if (g.value == 0.0) continue;
    Eigen::MatrixXd grad = Eigen::MatrixXd::Zero(p.theta.rows(), p.theta.cols());
    for (int i = 0; i < p.frames(); ++i)
      accumulate_frame_gradient(p, i, fk_adjoint(skel, p.root(i), p.angles(i), g.gradient[static_cast<std::size_t>(i)]),
                                grad);
    auto fd = central_difference([&](const std::vector<double>& x) { return ground_objective(skel, p, x); },
                                 flatten(p.theta), 1e-7);
    CHECK(relative_error(flatten(grad), fd) < 1e-4);
    ++compared;
  }
  CHECK(compared >= 40);
}

TEST_CASE("motion params round trip through a clip") {
  Random rng(35);
  Skeleton skel = random_skeleton(rng, 3);
  MotionParams p = random_params(rng, skel, 4);
  MotionParams q = MotionParams::from_clip(p.to_clip());
  for (int i = 0; i < 4; ++i) {
    CHECK((q.root(i).rotation - p.root(i).rotation).norm() < 1e-14);
    CHECK((q.root(i).translation - p.root(i).translation).norm() == 0.0);
    CHECK(q.theta.block(i, 3, 1, 3).norm() == 0.0);
    CHECK((q.theta.block(i, 6, 1, 6) - p.theta.block(i, 6, 1, 6)).norm() == 0.0);
  }
}

// ---------------------------------------------------------------------------
// Render chain and distillation gradient

TEST_CASE("render chain: adjoint matches finite differences") {
  Random rng(41);
  int compared = 0;
  for (int trial = 0; trial < 6; ++trial) {
    AssetBundle asset = chain_asset(3, 24, 100 + static_cast<std::uint64_t>(trial));
    RenderChainConfig cfg{chain_camera(20), 1, false, 0};
    RenderChain chain(asset, cfg);
    MotionParams p = random_params(rng, asset.skeleton, 2, 0.4);
    Video probe = chain.forward(p);
    Video cot = random_video(rng, probe.frames, probe.height, probe.width, -1.0, 1.0);
    Eigen::MatrixXd grad = chain.backward(p, cot);
    auto objective = [&](const std::vector<double>& x) {
      MotionParams q = p;
      q.theta = unflatten(x, p.theta.rows(), p.theta.cols());
      Video v = chain.forward(q);
      double s = 0.0;
      for (std::size_t i = 0; i < v.size(); ++i) s += v.data[i] * cot.data[i];
      return s;
    };
    auto fd = central_difference(objective, flatten(p.theta), 1e-6);
    double err = relative_error(flatten(grad), fd);
    CHECK(grad.cwiseAbs().maxCoeff() > 1e-2);
    CHECK(err < 1e-3);
    ++compared;
  }
  CHECK(compared == 6);
}

TEST_CASE("render chain: chunked backward equals the monolithic pass") {
  Random rng(42);
  AssetBundle asset = chain_asset(4, 60, 7);
  MotionParams p = random_params(rng, asset.skeleton, 7, 0.5);
  Video cot = random_video(rng, 7, 24, 24, -1.0, 1.0);

  RenderChain whole(asset, {chain_camera(24), 3, true, 0});
  Video vw = whole.forward(p);
  Eigen::MatrixXd gw = whole.backward(p, cot);
  CHECK(whole.counters().peak_live_tapes == 7);
  CHECK(whole.counters().checkpoints == 1);

  for (int chunk : {1, 2, 3, 7}) {
    RenderChain chunked(asset, {chain_camera(24), 3, true, chunk});
    Video vc = chunked.forward(p);
    Eigen::MatrixXd gc = chunked.backward(p, cot);
    CHECK(vc.data == vw.data);
    CHECK(gw.cwiseAbs().maxCoeff() > 1e-2);
    CHECK((gc - gw).cwiseAbs().maxCoeff() < 1e-12);
    const ChainCounters& n = chunked.counters();
    CHECK(n.checkpoints == (7 + chunk - 1) / chunk);
    CHECK(n.peak_live_tapes <= chunk);
    CHECK(n.recomputed_frames == 7);
  }
}

TEST_CASE("distill gradient: zero guidance and zero weights give a zero gradient") {
  Random rng(43);
  AssetBundle asset = chain_asset(3, 30, 9);
  RenderChain chain(asset, {chain_camera(16), 1, true, 2});
  MotionParams p = random_params(rng, asset.skeleton, 4);
  ZeroGuidance zero;
  DistillStep step = distill_gradient(chain, p, zero, {}, {0.0, 0.0});
  CHECK(step.gradient.cwiseAbs().maxCoeff() == 0.0);
  CHECK(step.sds_norm == 0.0);
}

TEST_CASE("distill gradient: oracle guidance leaves only the regularizers") {
  Random rng(44);
  AssetBundle asset = chain_asset(3, 30, 10, 0.3, 0.02);
  RenderChain chain(asset, {chain_camera(16), 1, true, 0});
  MotionParams p = random_params(rng, asset.skeleton, 5, 0.6);
  LocalGuidance oracle(std::make_shared<OraclePredictor>());
  ZeroGuidance zero;
  GuidanceQuery q;
  q.t = 0.7;
  q.seed = 5;
  LossWeights w{2e5, 1e7};
  DistillStep a = distill_gradient(chain, p, oracle, q, w);
  DistillStep b = distill_gradient(chain, p, zero, q, w);
  CHECK(a.l_ground > 0.0);
  CHECK(a.sds_norm < 1e-12);
  double scale = b.gradient.cwiseAbs().maxCoeff();
  CHECK(scale > 0.0);
  CHECK((a.gradient - b.gradient).cwiseAbs().maxCoeff() < 1e-12 * scale);
}

TEST_CASE("distill gradient: regularizer part matches finite differences") {
  Random rng(45);
  int compared = 0;
  for (int trial = 0; trial < 50; ++trial) {
    AssetBundle asset = chain_asset(rng.integer(2, 3), 9, 200 + static_cast<std::uint64_t>(trial), 0.3, 0.03);
    RenderChain chain(asset, {chain_camera(8), 1, true, 0});
    MotionParams p = random_params(rng, asset.skeleton, rng.integer(3, 5), 0.8);
    LossWeights w{rng.uniform(0.1, 2.0), rng.uniform(0.1, 2.0)};
    ZeroGuidance zero;
    DistillStep step = distill_gradient(chain, p, zero, {}, w);
    auto objective = [&](const std::vector<double>& x) {
      MotionParams q = p;
      q.theta = unflatten(x, p.theta.rows(), p.theta.cols());
      return w.smooth * smoothness_loss(q.theta).value +
             w.ground * ground_loss(pose_frames(asset.skeleton, q), asset.skeleton).value;
    };
    auto fd = central_difference(objective, flatten(p.theta), 1e-7);
    CHECK(relative_error(flatten(step.gradient), fd) < 1e-4);
    CHECK(step.surrogate == doctest::Approx(objective(flatten(p.theta))).epsilon(1e-12));
    ++compared;
  }
  CHECK(compared == 50);
}

TEST_CASE("distill gradient: fixed pixel cotangent is pulled back through the chain") {
  Random rng(46);
  AssetBundle asset = chain_asset(3, 24, 11);
  RenderChain chain(asset, {chain_camera(16), 1, false, 0});
  MotionParams p = random_params(rng, asset.skeleton, 3);
  Video cot = random_video(rng, 3, 16, 16, -1.0, 1.0);
  FixedGuidance fixed(cot);
  DistillStep step = distill_gradient(chain, p, fixed, {}, {0.0, 0.0});
  Eigen::MatrixXd direct = chain.backward(p, cot);
  CHECK((step.gradient - direct).cwiseAbs().maxCoeff() == 0.0);
  FixedGuidance wrong(Video(2, 16, 16));
  CHECK_THROWS_AS(distill_gradient(chain, p, wrong, {}, {}), InvalidInput);
}
