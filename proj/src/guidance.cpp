#include "akd/guidance.hpp"

#include "akd/rng.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <bit>
#include <cerrno>
#include <cmath>
#include <cstring>
#include <numbers>

namespace akd {

double Video::norm() const {
  double s = 0.0;
  for (double v : data) s += v * v;
  return std::sqrt(s);
}

Video noise_like(const Video& shape, std::uint64_t seed) {
  Video out(shape.frames, shape.height, shape.width);
  out.data = gaussian_noise(seed, out.size());
  return out;
}

NoiseSchedule NoiseSchedule::cosine() {
  NoiseSchedule s;
  s.alpha_bar = [](double t) {
    double c = std::cos(0.5 * std::numbers::pi * t);
    return std::clamp(c * c, 1e-4, 1.0 - 1e-4);
  };
  s.weight = [](double) { return 1.0; };
  return s;
}

namespace {

void check_time(double t) {
  if (!std::isfinite(t) || t < 0.0 || t > 1.0) throw InvalidInput("diffusion time t must lie in [0, 1]");
}

}  // namespace

Video OraclePredictor::predict(const Video& noisy, const GuidanceQuery& query, const NoiseSchedule& schedule) {
  const double ab = schedule.alpha_bar(query.t);
  const double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
  Video eps = noise_ ? *noise_ : noise_like(noisy, query.seed);
  if (!eps.same_shape(noisy)) throw InvalidInput("oracle noise shape does not match the request video");
  // √ᾱ ε − √(1−ᾱ) z with z = (z_t − √(1−ᾱ) ε)/√ᾱ, simplified.
  Video v(noisy.frames, noisy.height, noisy.width);
  for (std::size_t i = 0; i < v.size(); ++i) v.data[i] = (eps.data[i] - sb * noisy.data[i]) / sa;
  return v;
}

Video ZeroPredictor::predict(const Video& noisy, const GuidanceQuery&, const NoiseSchedule&) {
  return Video(noisy.frames, noisy.height, noisy.width);
}

Video AttractorPredictor::predict(const Video& noisy, const GuidanceQuery& query, const NoiseSchedule& schedule) {
  if (!noisy.same_shape(target_)) throw InvalidInput("attractor target shape does not match the request video");
  const double ab = schedule.alpha_bar(query.t);
  const double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
  Video v(noisy.frames, noisy.height, noisy.width);
  for (std::size_t i = 0; i < v.size(); ++i) v.data[i] = (sa * noisy.data[i] - target_.data[i]) / sb;
  return v;
}

Video sds_gradient(const Video& z, const Video& noise, VelocityPredictor& predictor, const GuidanceQuery& query,
                   const NoiseSchedule& schedule) {
  check_time(query.t);
  if (!z.same_shape(noise) || z.size() != noise.size()) throw InvalidInput("noise shape does not match video shape");
  const double ab = schedule.alpha_bar(query.t);
  if (!(ab > 0.0 && ab < 1.0)) throw InvalidInput("schedule alpha_bar must lie in (0, 1)");
  const double w = schedule.weight(query.t);
  const double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);

  Video zt(z.frames, z.height, z.width);
  for (std::size_t i = 0; i < z.size(); ++i) zt.data[i] = sa * z.data[i] + sb * noise.data[i];
  Video v = predictor.predict(zt, query, schedule);
  if (!v.same_shape(z) || v.size() != z.size()) throw InvalidInput("velocity predictor returned a mismatched shape");

  Video g(z.frames, z.height, z.width);
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (!std::isfinite(v.data[i])) throw NumericalError("velocity predictor returned a non-finite value");
    double zhat = sa * zt.data[i] - sb * v.data[i];
    g.data[i] = w * (z.data[i] - zhat);
  }
  return g;
}

Video LocalGuidance::gradient(const Video& z, const GuidanceQuery& query) {
  return sds_gradient(z, noise_like(z, query.seed), *predictor_, query, schedule_);
}

// ---------------------------------------------------------------------------
// Wire protocol

namespace wire {

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int k = 0; k < 4; ++k) out.push_back(static_cast<char>((v >> (8 * k)) & 0xFFu));
}

std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

void put_floats(std::string& out, std::span<const float> data) {
  for (float f : data) put_u32(out, std::bit_cast<std::uint32_t>(f));
}

std::vector<float> get_floats(const unsigned char* p, std::uint64_t count) {
  std::vector<float> out(count);
  for (std::uint64_t i = 0; i < count; ++i) out[i] = std::bit_cast<float>(get_u32(p + 4 * i));
  return out;
}

std::string frame_prefix(const nlohmann::json& header) {
  std::string text = header.dump();
  if (text.size() > kMaxHeaderBytes) throw ProtocolError("header exceeds the size limit");
  std::string out(kMagic, sizeof kMagic);
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  return out;
}

/// Reads exactly n bytes. Returns false on end of stream before the first
/// byte when `eof_ok`; any other shortfall throws.
bool read_exact(int fd, void* buffer, std::size_t n, bool eof_ok = false) {
  auto* p = static_cast<char*>(buffer);
  std::size_t got = 0;
  while (got < n) {
    ssize_t r = ::read(fd, p + got, n - got);
    if (r < 0 && errno == EINTR) continue;
    if (r < 0) throw ProtocolError(std::string("read failed: ") + std::strerror(errno));
    if (r == 0) {
      if (got == 0 && eof_ok) return false;
      throw ProtocolError("connection closed mid-frame");
    }
    got += static_cast<std::size_t>(r);
  }
  return true;
}

void write_all(int fd, const std::string& bytes) {
  std::size_t sent = 0;
  while (sent < bytes.size()) {
    ssize_t r = ::send(fd, bytes.data() + sent, bytes.size() - sent, MSG_NOSIGNAL);
    if (r < 0 && errno == ENOTSOCK) r = ::write(fd, bytes.data() + sent, bytes.size() - sent);
    if (r < 0 && errno == EINTR) continue;
    if (r < 0) throw ProtocolError(std::string("write failed: ") + std::strerror(errno));
    sent += static_cast<std::size_t>(r);
  }
}

}  // namespace

std::uint64_t payload_count(const nlohmann::json& header) {
  if (!header.is_object() || !header.contains("shape") || !header["shape"].is_array())
    throw ProtocolError("header has no shape array");
  std::uint64_t count = 1;
  for (const auto& d : header["shape"]) {
    if (!d.is_number_integer() || (d.is_number_integer() && !d.is_number_unsigned() && d.get<std::int64_t>() < 0))
      throw ProtocolError("shape entries must be non-negative integers");
    std::uint64_t n = d.get<std::uint64_t>();
    if (n != 0 && count > kMaxPayloadFloats / n) throw ProtocolError("shape product overflows the payload limit");
    count *= n;
  }
  if (count > kMaxPayloadFloats) throw ProtocolError("shape product overflows the payload limit");
  return count;
}

std::string encode(const Message& message) {
  if (payload_count(message.header) != message.payload.size())
    throw ProtocolError("payload length does not match header shape");
  std::string out = frame_prefix(message.header);
  out.reserve(out.size() + 4 * message.payload.size());
  put_floats(out, message.payload);
  return out;
}

Message decode(std::string_view bytes) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 12) throw ProtocolError("frame shorter than its fixed prefix");
  if (std::memcmp(p, kMagic, sizeof kMagic) != 0) throw ProtocolError("bad magic");
  std::uint32_t len = get_u32(p + 8);
  if (len > kMaxHeaderBytes || bytes.size() < 12 + static_cast<std::size_t>(len))
    throw ProtocolError("header length out of range");
  Message m;
  try {
    m.header = nlohmann::json::parse(bytes.substr(12, len));
  } catch (const nlohmann::json::exception& e) {
    throw ProtocolError(std::string("malformed header: ") + e.what());
  }
  std::uint64_t count = payload_count(m.header);
  if (bytes.size() != 12 + len + 4 * count) throw ProtocolError("payload length does not match header shape");
  m.payload = get_floats(p + 12 + len, count);
  return m;
}

void write_message(int fd, const Message& message) { write_all(fd, encode(message)); }

std::optional<Message> read_message(int fd) {
  unsigned char prefix[12];
  if (!read_exact(fd, prefix, 8, true)) return std::nullopt;
  read_exact(fd, prefix + 8, 4);
  if (std::memcmp(prefix, kMagic, sizeof kMagic) != 0) throw ProtocolError("bad magic");
  std::uint32_t len = get_u32(prefix + 8);
  if (len > kMaxHeaderBytes) throw ProtocolError("header length out of range");
  std::string text(len, '\0');
  read_exact(fd, text.data(), len);
  Message m;
  try {
    m.header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ProtocolError(std::string("malformed header: ") + e.what());
  }
  std::uint64_t count = payload_count(m.header);
  std::vector<unsigned char> raw(4 * count);
  read_exact(fd, raw.data(), raw.size());
  m.payload = get_floats(raw.data(), count);
  return m;
}

std::vector<float> to_f32(const Video& v) {
  std::vector<float> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v.data[i]);
  return out;
}

Video from_f32(std::span<const float> data, const nlohmann::json& shape) {
  if (!shape.is_array() || shape.size() != 4) throw ProtocolError("video shape must be [F, H, W, 3]");
  for (const auto& d : shape)
    if (!d.is_number_integer() || d.get<std::int64_t>() < 0 || d.get<std::int64_t>() > (1 << 20))
      throw ProtocolError("video shape entries out of range");
  if (shape[3].get<int>() != 3) throw ProtocolError("video shape must end in 3 channels");
  Video v(shape[0].get<int>(), shape[1].get<int>(), shape[2].get<int>());
  if (v.size() != data.size()) throw ProtocolError("payload length does not match video shape");
  for (std::size_t i = 0; i < v.size(); ++i) v.data[i] = data[i];
  return v;
}

}  // namespace wire

namespace {

nlohmann::json shape_json(const Video& v) { return nlohmann::json::array({v.frames, v.height, v.width, 3}); }

/// Returns a fixed, already-fetched velocity.
class FixedPredictor final : public VelocityPredictor {
 public:
  explicit FixedPredictor(Video v) : v_(std::move(v)) {}
  Video predict(const Video&, const GuidanceQuery&, const NoiseSchedule&) override { return v_; }

 private:
  Video v_;
};

}  // namespace

std::pair<std::string, int> parse_tcp_address(const std::string& spec) {
  const std::string scheme = "tcp://";
  if (spec.rfind(scheme, 0) != 0) throw InvalidInput("provider address must look like tcp://host:port: " + spec);
  std::string rest = spec.substr(scheme.size());
  auto colon = rest.rfind(':');
  if (colon == std::string::npos || colon == 0) throw InvalidInput("provider address needs host:port: " + spec);
  std::string host = rest.substr(0, colon), port_text = rest.substr(colon + 1);
  if (port_text.empty() || !std::all_of(port_text.begin(), port_text.end(), ::isdigit) || port_text.size() > 5)
    throw InvalidInput("provider port is not a number: " + spec);
  int port = std::stoi(port_text);
  if (port < 1 || port > 65535) throw InvalidInput("provider port out of range: " + spec);
  return {host, port};
}

RemoteGuidance::RemoteGuidance(std::string host, int port, WireMode mode, NoiseSchedule schedule, int retries)
    : host_(std::move(host)), port_(port), mode_(mode), schedule_(std::move(schedule)), retries_(std::max(0, retries)) {}

RemoteGuidance::~RemoteGuidance() { disconnect(); }

void RemoteGuidance::connect() {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* found = nullptr;
  std::string port = std::to_string(port_);
  if (int rc = ::getaddrinfo(host_.c_str(), port.c_str(), &hints, &found); rc != 0)
    throw ProtocolError("cannot resolve " + host_ + ": " + ::gai_strerror(rc));
  int fd = -1;
  for (addrinfo* a = found; a; a = a->ai_next) {
    fd = ::socket(a->ai_family, a->ai_socktype, a->ai_protocol);
    if (fd < 0) continue;
    if (::connect(fd, a->ai_addr, a->ai_addrlen) == 0) break;
    ::close(fd);
    fd = -1;
  }
  ::freeaddrinfo(found);
  if (fd < 0) throw ProtocolError("cannot connect to " + host_ + ":" + port);
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  fd_ = fd;
}

void RemoteGuidance::disconnect() {
  if (fd_ >= 0) ::close(fd_);
  fd_ = -1;
}

Video RemoteGuidance::call(const Video& z, const GuidanceQuery& query) {
  if (fd_ < 0) connect();
  wire::Message request;
  request.header = {{"shape", shape_json(z)},
                    {"t", query.t},
                    {"seed", query.seed},
                    {"cfg_scale", query.cfg_scale},
                    {"prompt", query.prompt},
                    {"mode", mode_ == WireMode::velocity ? "velocity" : "sds_grad"}};
  request.payload = wire::to_f32(z);
  wire::write_message(fd_, request);
  auto response = wire::read_message(fd_);
  if (!response) throw ProtocolError("provider closed the connection");
  const auto& h = response->header;
  if (!h.contains("status") || h["status"] != "ok") {
    std::string msg = h.contains("message") && h["message"].is_string() ? h["message"].get<std::string>() : "";
    throw ProtocolError("provider error: " + msg);
  }
  if (h["shape"] != shape_json(z)) throw ProtocolError("provider response shape does not match the request");
  Video out = wire::from_f32(response->payload, h["shape"]);
  if (mode_ == WireMode::sds_grad) {
    for (double v : out.data)
      if (!std::isfinite(v)) throw NumericalError("provider returned a non-finite gradient");
    return out;
  }
  FixedPredictor fixed(std::move(out));
  return sds_gradient(z, noise_like(z, query.seed), fixed, query, schedule_);
}

Video RemoteGuidance::gradient(const Video& z, const GuidanceQuery& query) {
  check_time(query.t);
  std::string last;
  for (int attempt = 0; attempt <= retries_; ++attempt) {
    try {
      return call(z, query);
    } catch (const ProtocolError& e) {
      last = e.what();
      disconnect();
    }
  }
  throw ProtocolError("guidance provider failed after " + std::to_string(retries_ + 1) + " attempts: " + last);
}

// ---------------------------------------------------------------------------
// Reference server

namespace {

void reply_error(int fd, const std::string& message) {
  wire::Message m;
  m.header = {{"shape", nlohmann::json::array({0})}, {"status", "error"}, {"message", message}};
  wire::write_message(fd, m);
}

wire::Message handle(const wire::Message& request, VelocityPredictor& predictor, const NoiseSchedule& schedule) {
  const auto& h = request.header;
  Video z = wire::from_f32(request.payload, h["shape"]);
  GuidanceQuery q;
  if (!h.contains("t") || !h["t"].is_number()) throw ProtocolError("request needs a numeric t");
  q.t = h["t"].get<double>();
  check_time(q.t);
  if (h.contains("seed")) {
    if (!h["seed"].is_number_unsigned()) throw ProtocolError("seed must be an unsigned integer");
    q.seed = h["seed"].get<std::uint64_t>();
  }
  if (h.contains("cfg_scale") && h["cfg_scale"].is_number()) q.cfg_scale = h["cfg_scale"].get<double>();
  if (h.contains("prompt") && h["prompt"].is_string()) q.prompt = h["prompt"].get<std::string>();
  std::string mode = h.contains("mode") && h["mode"].is_string() ? h["mode"].get<std::string>() : "velocity";

  Video out;
  Video eps = noise_like(z, q.seed);
  if (mode == "velocity") {
    const double ab = schedule.alpha_bar(q.t);
    const double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
    Video zt(z.frames, z.height, z.width);
    for (std::size_t i = 0; i < z.size(); ++i) zt.data[i] = sa * z.data[i] + sb * eps.data[i];
    out = predictor.predict(zt, q, schedule);
    if (!out.same_shape(z) || out.size() != z.size()) throw InvalidInput("predictor returned a mismatched shape");
  } else if (mode == "sds_grad") {
    out = sds_gradient(z, eps, predictor, q, schedule);
  } else {
    throw ProtocolError("unknown mode: " + mode);
  }
  wire::Message response;
  response.header = {{"shape", shape_json(out)}, {"status", "ok"}, {"message", ""}};
  response.payload = wire::to_f32(out);
  return response;
}

}  // namespace

void serve_connection(int fd, VelocityPredictor& predictor, const NoiseSchedule& schedule) {
  try {
    while (true) {
      unsigned char prefix[12];
      if (!wire::read_exact(fd, prefix, 8, true)) return;
      wire::read_exact(fd, prefix + 8, 4);
      bool magic_ok = std::memcmp(prefix, wire::kMagic, sizeof wire::kMagic) == 0;
      std::uint32_t len = wire::get_u32(prefix + 8);
      if (len > wire::kMaxHeaderBytes) {
        reply_error(fd, magic_ok ? "header length out of range" : "bad magic");
        return;
      }
      std::string text(len, '\0');
      wire::read_exact(fd, text.data(), len);
      wire::Message request;
      std::uint64_t count = 0;
      try {
        request.header = nlohmann::json::parse(text);
        count = wire::payload_count(request.header);
      } catch (const std::exception& e) {
        reply_error(fd, magic_ok ? std::string("malformed header: ") + e.what() : "bad magic");
        return;
      }
      std::vector<unsigned char> raw(4 * count);
      wire::read_exact(fd, raw.data(), raw.size());
      if (!magic_ok) {
        reply_error(fd, "bad magic");
        continue;
      }
      request.payload = wire::get_floats(raw.data(), count);
      wire::Message response;
      try {
        response = handle(request, predictor, schedule);
      } catch (const std::exception& e) {
        reply_error(fd, e.what());
        continue;
      }
      wire::write_message(fd, response);
    }
  } catch (const ProtocolError&) {
    // Peer went away or the stream broke mid-frame; nothing left to answer.
  }
}

PredictorServer::PredictorServer(std::shared_ptr<VelocityPredictor> predictor, NoiseSchedule schedule, int port)
    : predictor_(std::move(predictor)), schedule_(std::move(schedule)) {
  listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (listen_fd_ < 0) throw Error(std::string("socket failed: ") + std::strerror(errno));
  int one = 1;
  ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = htons(static_cast<std::uint16_t>(port));
  if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(listen_fd_, 16) != 0) {
    std::string why = std::strerror(errno);
    ::close(listen_fd_);
    throw Error("cannot listen on 127.0.0.1:" + std::to_string(port) + ": " + why);
  }
  socklen_t len = sizeof addr;
  ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
  acceptor_ = std::thread([this] { accept_loop(); });
}

PredictorServer::~PredictorServer() { stop(); }

void PredictorServer::accept_loop() {
  while (true) {
    int fd = ::accept(listen_fd_, nullptr, nullptr);
    std::lock_guard lock(mutex_);
    if (stopping_) {
      if (fd >= 0) ::close(fd);
      return;
    }
    if (fd < 0) {
      if (errno == EINTR || errno == ECONNABORTED) continue;
      return;
    }
    client_fds_.push_back(fd);
    workers_.emplace_back([this, fd] { serve_connection(fd, *predictor_, schedule_); });
  }
}

void PredictorServer::stop() {
  {
    std::lock_guard lock(mutex_);
    if (stopping_) return;
    stopping_ = true;
    ::shutdown(listen_fd_, SHUT_RDWR);
    for (int fd : client_fds_) ::shutdown(fd, SHUT_RDWR);
  }
  if (acceptor_.joinable()) acceptor_.join();
  for (auto& w : workers_)
    if (w.joinable()) w.join();
  for (int fd : client_fds_) ::close(fd);
  ::close(listen_fd_);
}

// ---------------------------------------------------------------------------
// Motion parameters and regularizers

MotionParams MotionParams::from_clip(const MotionClip& clip) {
  MotionParams p;
  p.fps = clip.fps;
  const int f = clip.frame_count();
  const int joints = f > 0 ? static_cast<int>(clip.joint_angles[0].size()) : 0;
  p.theta = Eigen::MatrixXd::Zero(f, 6 + 3 * joints);
  for (int i = 0; i < f; ++i) {
    p.base_rotations.push_back(clip.root_transforms[static_cast<std::size_t>(i)].rotation);
    p.theta.block<1, 3>(i, 0) = clip.root_transforms[static_cast<std::size_t>(i)].translation.transpose();
    const auto& angles = clip.joint_angles[static_cast<std::size_t>(i)];
    if (static_cast<int>(angles.size()) != joints) throw InvalidInput("motion frames disagree on joint count");
    for (int j = 0; j < joints; ++j) p.theta.block<1, 3>(i, 6 + 3 * j) = angles[static_cast<std::size_t>(j)].transpose();
  }
  return p;
}

RigidTransform MotionParams::root(int frame) const {
  Vec3 w = theta.block<1, 3>(frame, 3).transpose();
  return {exp_so3(w) * base_rotations[static_cast<std::size_t>(frame)], theta.block<1, 3>(frame, 0).transpose()};
}

std::vector<Vec3> MotionParams::angles(int frame) const {
  const int joints = static_cast<int>(theta.cols() - 6) / 3;
  std::vector<Vec3> out(static_cast<std::size_t>(joints));
  for (int j = 0; j < joints; ++j) out[static_cast<std::size_t>(j)] = theta.block<1, 3>(frame, 6 + 3 * j).transpose();
  return out;
}

MotionClip MotionParams::to_clip() const {
  MotionClip clip;
  clip.fps = fps;
  for (int i = 0; i < frames(); ++i) {
    clip.root_transforms.push_back(root(i));
    clip.joint_angles.push_back(angles(i));
  }
  return clip;
}

void accumulate_frame_gradient(const MotionParams& params, int frame, const FkGradient& fk, Eigen::MatrixXd& grad) {
  Vec3 w = params.theta.block<1, 3>(frame, 3).transpose();
  Mat3 r = exp_so3(w);
  // R_root = Exp(ω)·R_base, so the cotangent of Exp(ω) is G·R_baseᵀ.
  Mat3 g = fk.root.rotation * params.base_rotations[static_cast<std::size_t>(frame)].transpose();
  grad.block<1, 3>(frame, 0) += fk.root.translation.transpose();
  grad.block<1, 3>(frame, 3) += exp_so3_vjp(w, r, g).transpose();
  for (std::size_t j = 0; j < fk.angles.size(); ++j)
    grad.block<1, 3>(frame, 6 + 3 * static_cast<int>(j)) += fk.angles[j].transpose();
}

LossValue smoothness_loss(const Eigen::MatrixXd& theta) {
  const auto f = theta.rows(), p = theta.cols();
  if (f < 3) throw InvalidInput("smoothness loss needs at least 3 frames");
  LossValue out;
  out.gradient = Eigen::MatrixXd::Zero(f, p);
  if (p == 0) return out;
  const double count = static_cast<double>(f - 2) * static_cast<double>(p);
  const double inv = 1.0 / count;
  for (Eigen::Index i = 1; i + 1 < f; ++i) {
    for (Eigen::Index k = 0; k < p; ++k) {
      double lap = theta(i - 1, k) - 2.0 * theta(i, k) + theta(i + 1, k);
      out.value += std::abs(lap);
      double s = lap > 0.0 ? inv : (lap < 0.0 ? -inv : 0.0);
      out.gradient(i - 1, k) += s;
      out.gradient(i, k) -= 2.0 * s;
      out.gradient(i + 1, k) += s;
    }
  }
  out.value /= count;
  return out;
}

double mean_penetration(std::span<const Vec3> points, double ground_height) {
  if (points.empty()) return 0.0;
  double sum = 0.0;
  for (const Vec3& p : points) sum += std::max(ground_height - p.y(), 0.0);
  return sum / static_cast<double>(points.size());
}

GroundLossValue ground_loss(const std::vector<std::vector<RigidTransform>>& bone_transforms, const Skeleton& skeleton,
                            double ground_height) {
  const int b = skeleton.bone_count();
  GroundLossValue out;
  out.gradient.assign(bone_transforms.size(), std::vector<TransformGrad>(static_cast<std::size_t>(b)));
  const std::size_t corners = bone_transforms.size() * static_cast<std::size_t>(b) * 8;
  if (corners == 0) return out;
  const double count = static_cast<double>(corners);
  const double inv = 1.0 / count;
  for (std::size_t f = 0; f < bone_transforms.size(); ++f) {
    if (static_cast<int>(bone_transforms[f].size()) != b) throw InvalidInput("bone transform count mismatch");
    for (int k = 0; k < b; ++k) {
      const RigidTransform& x = bone_transforms[f][static_cast<std::size_t>(k)];
      TransformGrad& g = out.gradient[f][static_cast<std::size_t>(k)];
      for (const Vec3& c : skeleton.corners(k)) {
        double depth = ground_height - x.apply(c).y();
        if (depth > 0.0) {
          out.value += depth;
          g.rotation.row(1) -= inv * c.transpose();
          g.translation.y() -= inv;
        }
      }
    }
  }
  out.value /= count;
  return out;
}

// ---------------------------------------------------------------------------
// Render chain

RenderChain::RenderChain(const AssetBundle& asset, RenderChainConfig config)
    : asset_(asset), config_(std::move(config)), rest_(rest_pose(asset.skeleton)) {
  if (asset.kernel_weights.rows() != asset.cloud.size() || asset.kernel_weights.cols() != asset.skeleton.bone_count())
    throw InvalidInput("kernel weights must be P x B");
  config_.base_camera.validate();
}

RenderChain::FrameTape RenderChain::record(const MotionParams& params, int frame) const {
  FrameTape tape;
  std::vector<Vec3> angles = params.angles(frame);
  if (static_cast<int>(angles.size()) != asset_.skeleton.joint_count())
    throw InvalidInput("motion parameters do not match the skeleton's joint count");
  tape.world = forward_kinematics(asset_.skeleton, params.root(frame), angles);
  tape.relative = relative_transforms(tape.world, rest_);
  tape.deformed = deform_cloud(asset_.cloud, tape.relative, asset_.kernel_weights);
  return tape;
}

Video RenderChain::forward(const MotionParams& params) {
  const int f = params.frames();
  if (f < 1) throw InvalidInput("motion has no frames");
  const int chunk = config_.chunk > 0 ? std::min(config_.chunk, f) : f;
  counters_ = {};
  bones_.assign(static_cast<std::size_t>(f), {});

  // Bounds pass: one transient tape at a time.
  std::vector<Eigen::AlignedBox3d> bounds(static_cast<std::size_t>(f));
  for (int i = 0; i < f; ++i) {
    FrameTape tape = record(params, i);
    bounds[static_cast<std::size_t>(i)] = cloud_bounds(tape.deformed);
    bones_[static_cast<std::size_t>(i)] = std::move(tape.world);
  }
  cameras_ = config_.follow ? follow_camera(bounds, config_.base_camera, config_.follow_window)
                            : std::vector<Camera>(static_cast<std::size_t>(f), config_.base_camera);

  const Camera& c0 = cameras_.front();
  Video video(f, c0.height, c0.width);
  for (int start = 0; start < f; start += chunk) {
    ++counters_.checkpoints;
    const int end = std::min(f, start + chunk);
    std::vector<FrameTape> live;
    for (int i = start; i < end; ++i) {
      live.push_back(record(params, i));
      counters_.peak_live_tapes = std::max(counters_.peak_live_tapes, static_cast<int>(live.size()));
      Image img = render(live.back().deformed, cameras_[static_cast<std::size_t>(i)], asset_.ground, asset_.render);
      std::copy(img.rgb.begin(), img.rgb.end(), video.frame(i).begin());
    }
  }
  return video;
}

Eigen::MatrixXd RenderChain::backward(const MotionParams& params, const Video& cotangent) {
  const int f = params.frames();
  if (static_cast<int>(cameras_.size()) != f) throw InvalidInput("backward called without a matching forward");
  const Camera& c0 = cameras_.front();
  if (cotangent.frames != f || cotangent.height != c0.height || cotangent.width != c0.width)
    throw InvalidInput("pixel cotangent shape does not match the rendered video");
  const int chunk = config_.chunk > 0 ? std::min(config_.chunk, f) : f;
  Eigen::MatrixXd grad = Eigen::MatrixXd::Zero(params.theta.rows(), params.theta.cols());

  const int chunks = (f + chunk - 1) / chunk;
  for (int c = chunks - 1; c >= 0; --c) {
    const int start = c * chunk, end = std::min(f, start + chunk);
    // Recompute this chunk's activations from its checkpoint.
    std::vector<FrameTape> live;
    for (int i = start; i < end; ++i) {
      live.push_back(record(params, i));
      ++counters_.recomputed_frames;
    }
    counters_.peak_live_tapes = std::max(counters_.peak_live_tapes, static_cast<int>(live.size()));
    for (int i = end - 1; i >= start; --i) {
      const FrameTape& tape = live[static_cast<std::size_t>(i - start)];
      CloudGrad cg = render_adjoint(tape.deformed, cameras_[static_cast<std::size_t>(i)], asset_.ground,
                                    asset_.render, cotangent.frame(i));
      std::vector<TransformGrad> rel = deform_adjoint(asset_.cloud, tape.relative, asset_.kernel_weights, cg);
      std::vector<TransformGrad> world = relative_transforms_adjoint(rest_, rel);
      FkGradient fk = fk_adjoint(asset_.skeleton, params.root(i), params.angles(i), world);
      accumulate_frame_gradient(params, i, fk, grad);
    }
  }
  return grad;
}

DistillStep distill_gradient(RenderChain& chain, const MotionParams& params, GuidanceProvider& provider,
                             const GuidanceQuery& query, const LossWeights& weights) {
  if (!(weights.smooth >= 0.0) || !(weights.ground >= 0.0)) throw InvalidInput("loss weights must be >= 0");
  DistillStep step;
  step.video = chain.forward(params);
  Video sds = provider.gradient(step.video, query);
  if (!sds.same_shape(step.video) || sds.size() != step.video.size())
    throw InvalidInput("guidance gradient shape does not match the rendered video");
  step.sds_norm = sds.norm();
  step.gradient = chain.backward(params, sds);
  for (std::size_t i = 0; i < sds.size(); ++i) step.surrogate += sds.data[i] * step.video.data[i];

  LossValue smooth = smoothness_loss(params.theta);
  step.l_smooth = smooth.value;
  step.gradient += weights.smooth * smooth.gradient;

  const AssetBundle& asset = chain.asset();
  GroundLossValue ground = ground_loss(chain.bone_transforms(), asset.skeleton, asset.ground.height);
  step.l_ground = ground.value;
  if (weights.ground > 0.0) {
    for (int i = 0; i < params.frames(); ++i) {
      std::vector<TransformGrad> g = ground.gradient[static_cast<std::size_t>(i)];
      for (TransformGrad& x : g) {
        x.rotation *= weights.ground;
        x.translation *= weights.ground;
      }
      FkGradient fk = fk_adjoint(asset.skeleton, params.root(i), params.angles(i), g);
      accumulate_frame_gradient(params, i, fk, step.gradient);
    }
  }
  step.surrogate += weights.smooth * step.l_smooth + weights.ground * step.l_ground;
  return step;
}

}  // namespace akd
