#pragma once

#include <bit>
#include <cerrno>
#include <csignal>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include <fcntl.h>
#include <poll.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include "mechlearn/diffusion.hpp"
#include "mechlearn/error.hpp"
#include "mechlearn/image.hpp"

namespace mechlearn {

// Subprocess plugins speak length-prefixed little-endian frames over
// stdin/stdout. Every frame is {u32 body length}{body}.
//
//   handshake   -> {u8 0, u16 version}            <- {u16 version}
//   noise       -> {u8 1, u32 l, u32 w, u32 h, f32 x[w*h]}
//               <- {u32 w, u32 h, f32 eps[w*h]}
//   regression  -> {u8 2, u32 l, u32 w, u32 h, f32 x[w*h]}
//               <- {f64 value, u32 w, u32 h, f32 grad[w*h]}

inline constexpr std::uint16_t kPluginProtocolVersion = 1;

enum class PluginKind : std::uint8_t { kHandshake = 0, kNoise = 1, kRegress = 2 };

namespace wire {

inline void put_u8(std::string& out, std::uint8_t v) { out.push_back(static_cast<char>(v)); }
inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>(v >> 8));
}
inline void put_u32(std::string& out, std::uint32_t v) { detail::put_u32(out, v); }
inline void put_f64(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int k = 0; k < 8; ++k) out.push_back(static_cast<char>((bits >> (8 * k)) & 0xff));
}

/// Bounds-checked reader over a frame body.
class Reader {
 public:
  explicit Reader(const std::string& body) : body_(body) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(take(1)[0]); }
  std::uint16_t u16() {
    const unsigned char* p = take(2);
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
  }
  std::uint32_t u32() { return detail::get_u32(take(4)); }
  float f32() { return detail::get_f32(take(4)); }
  double f64() {
    const unsigned char* p = take(8);
    std::uint64_t bits = 0;
    for (int k = 0; k < 8; ++k) bits |= static_cast<std::uint64_t>(p[k]) << (8 * k);
    return std::bit_cast<double>(bits);
  }
  bool done() const noexcept { return pos_ == body_.size(); }

 private:
  const unsigned char* take(std::size_t n) {
    if (body_.size() - pos_ < n) throw PluginError("truncated plugin frame");
    const auto* p = reinterpret_cast<const unsigned char*>(body_.data() + pos_);
    pos_ += n;
    return p;
  }
  const std::string& body_;
  std::size_t pos_ = 0;
};

inline void put_image(std::string& out, const Image2D& img) {
  put_u32(out, static_cast<std::uint32_t>(img.width()));
  put_u32(out, static_cast<std::uint32_t>(img.height()));
  for (double v : img.pixels()) detail::put_f32(out, static_cast<float>(v));
}

inline Image2D get_image(Reader& r, double spacing) {
  const std::uint32_t w = r.u32(), h = r.u32();
  if (w == 0 || h == 0 || w > 1u << 15 || h > 1u << 15) throw PluginError("plugin frame has bad image size");
  Image2D img(static_cast<int>(w), static_cast<int>(h), spacing);
  for (double& v : img.pixels()) v = r.f32();
  return img;
}

inline std::string request(PluginKind kind, int l, const Image2D& x) {
  std::string body;
  put_u8(body, static_cast<std::uint8_t>(kind));
  put_u32(body, static_cast<std::uint32_t>(l));
  put_image(body, x);
  return body;
}

}  // namespace wire

/// Child process running `/bin/sh -c command` with piped stdin/stdout.
/// stderr is inherited. Not copyable; one instance per worker.
class PluginProcess {
 public:
  explicit PluginProcess(const std::string& command, int timeout_ms = 120000) : timeout_ms_(timeout_ms) {
    if (command.empty()) throw InvalidInput("plugin command is empty");
    std::signal(SIGPIPE, SIG_IGN);
    int in[2], out[2];
    if (pipe2(in, O_CLOEXEC) != 0) throw PluginError("cannot create plugin pipe");
    if (pipe2(out, O_CLOEXEC) != 0) {
      close(in[0]);
      close(in[1]);
      throw PluginError("cannot create plugin pipe");
    }
    pid_ = fork();
    if (pid_ < 0) {
      for (int fd : {in[0], in[1], out[0], out[1]}) close(fd);
      throw PluginError("cannot fork plugin process");
    }
    if (pid_ == 0) {
      dup2(in[0], STDIN_FILENO);
      dup2(out[1], STDOUT_FILENO);
      execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
      _exit(127);
    }
    close(in[0]);
    close(out[1]);
    to_child_ = in[1];
    from_child_ = out[0];
  }

  PluginProcess(const PluginProcess&) = delete;
  PluginProcess& operator=(const PluginProcess&) = delete;

  ~PluginProcess() {
    if (to_child_ >= 0) close(to_child_);
    if (from_child_ >= 0) close(from_child_);
    if (pid_ > 0) {
      int status = 0;
      // Give the child a moment to exit on EOF before killing it.
      for (int i = 0; i < 50; ++i) {
        if (waitpid(pid_, &status, WNOHANG) != 0) return;
        usleep(2000);
      }
      kill(pid_, SIGKILL);
      waitpid(pid_, &status, 0);
    }
  }

  std::string exchange(const std::string& body, int step) {
    std::string frame;
    wire::put_u32(frame, static_cast<std::uint32_t>(body.size()));
    frame += body;
    write_all(frame, step);
    std::string len_bytes = read_exact(4, step);
    const std::uint32_t n = detail::get_u32(reinterpret_cast<const unsigned char*>(len_bytes.data()));
    if (n > (1u << 30)) throw PluginError("plugin frame too large", step);
    return read_exact(n, step);
  }

  void handshake() {
    std::string body;
    wire::put_u8(body, static_cast<std::uint8_t>(PluginKind::kHandshake));
    wire::put_u16(body, kPluginProtocolVersion);
    const std::string reply = exchange(body, -1);
    wire::Reader r(reply);
    const std::uint16_t v = r.u16();
    if (!r.done() || v != kPluginProtocolVersion)
      throw PluginError("plugin speaks protocol version " + std::to_string(v) + ", expected " +
                        std::to_string(kPluginProtocolVersion));
  }

 private:
  void write_all(const std::string& data, int step) {
    std::size_t off = 0;
    while (off < data.size()) {
      const ssize_t k = write(to_child_, data.data() + off, data.size() - off);
      if (k < 0 && errno == EINTR) continue;
      if (k <= 0) throw PluginError("plugin closed its input", step);
      off += static_cast<std::size_t>(k);
    }
  }

  std::string read_exact(std::size_t n, int step) {
    std::string buf(n, '\0');
    std::size_t off = 0;
    while (off < n) {
      pollfd pfd{from_child_, POLLIN, 0};
      const int ready = poll(&pfd, 1, timeout_ms_);
      if (ready < 0 && errno == EINTR) continue;
      if (ready == 0) throw PluginError("plugin timed out", step);
      const ssize_t k = read(from_child_, buf.data() + off, n - off);
      if (k < 0 && errno == EINTR) continue;
      if (k <= 0) throw PluginError("plugin exited or closed its output", step);
      off += static_cast<std::size_t>(k);
    }
    return buf;
  }

  pid_t pid_ = -1;
  int to_child_ = -1;
  int from_child_ = -1;
  int timeout_ms_;
};

class PluginDenoiser final : public Denoiser {
 public:
  explicit PluginDenoiser(const std::string& command) : proc_(command) { proc_.handshake(); }

  Image2D predict_noise(const Image2D& x_l, int l) override {
    const std::string reply = proc_.exchange(wire::request(PluginKind::kNoise, l, x_l), l);
    try {
      wire::Reader r(reply);
      Image2D eps = wire::get_image(r, x_l.pixel_spacing());
      if (!r.done()) throw PluginError("trailing bytes in plugin reply");
      if (!eps.same_shape(x_l)) throw PluginError("plugin noise estimate has the wrong shape");
      return eps;
    } catch (const PluginError& e) {
      throw PluginError(e.what(), l);
    }
  }

 private:
  PluginProcess proc_;
};

class PluginRegressor final : public Regressor {
 public:
  explicit PluginRegressor(const std::string& command) : proc_(command) { proc_.handshake(); }

  RegressorOutput evaluate(const Image2D& x_l, const Image2D&, int l) override {
    const std::string reply = proc_.exchange(wire::request(PluginKind::kRegress, l, x_l), l);
    try {
      wire::Reader r(reply);
      RegressorOutput out;
      out.value = r.f64();
      out.grad = wire::get_image(r, x_l.pixel_spacing());
      if (!r.done()) throw PluginError("trailing bytes in plugin reply");
      if (!out.grad.same_shape(x_l)) throw PluginError("plugin gradient has the wrong shape");
      if (!std::isfinite(out.value) || !out.grad.all_finite()) throw PluginError("plugin returned non-finite values");
      return out;
    } catch (const PluginError& e) {
      throw PluginError(e.what(), l);
    }
  }

 private:
  PluginProcess proc_;
};

}  // namespace mechlearn
