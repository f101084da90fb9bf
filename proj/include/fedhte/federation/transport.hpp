#pragma once

// Byte carriers between the coordinator and one site. Every transport moves
// the same encoded messages, so the choice cannot change any result.

#include "fedhte/error.hpp"
#include "fedhte/table_io.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <sys/time.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <functional>
#include <string>
#include <thread>

namespace fedhte::wire {

class Channel {
 public:
  virtual ~Channel() = default;
  // Sends one request and returns the site's single reply.
  virtual std::string exchange(const std::string& request) = 0;
  virtual const std::string& site_id() const = 0;
};

using Handler = std::function<std::string(const std::string&)>;

// In-process: the site's handler is called directly.
class LoopbackChannel final : public Channel {
 public:
  LoopbackChannel(std::string site_id, Handler handler)
      : site_id_(std::move(site_id)), handler_(std::move(handler)) {}

  std::string exchange(const std::string& request) override { return handler_(request); }
  const std::string& site_id() const override { return site_id_; }

 private:
  std::string site_id_;
  Handler handler_;
};

// ---------------------------------------------------------------------------
// File hand-off: <dir>/<site_id>/request.json then <dir>/<site_id>/response.json

struct FileExchangeLayout {
  std::filesystem::path dir;
  std::string site_id;

  std::filesystem::path site_dir() const { return dir / site_id; }
  std::filesystem::path request() const { return site_dir() / "request.json"; }
  std::filesystem::path response() const { return site_dir() / "response.json"; }
};

namespace detail {

inline bool wait_for_file(const std::filesystem::path& p, std::chrono::milliseconds timeout,
                          std::chrono::milliseconds poll) {
  const auto deadline = std::chrono::steady_clock::now() + timeout;
  while (!std::filesystem::exists(p)) {
    if (std::chrono::steady_clock::now() >= deadline) return false;
    std::this_thread::sleep_for(poll);
  }
  return true;
}

}  // namespace detail

class FileExchangeChannel final : public Channel {
 public:
  FileExchangeChannel(std::filesystem::path dir, std::string site_id,
                      std::chrono::milliseconds timeout = std::chrono::seconds(300),
                      std::chrono::milliseconds poll = std::chrono::milliseconds(20))
      : layout_{std::move(dir), std::move(site_id)}, timeout_(timeout), poll_(poll) {}

  std::string exchange(const std::string& request) override {
    try {
      std::filesystem::create_directories(layout_.site_dir());
      std::filesystem::remove(layout_.response());
      write_file_atomic(layout_.request(), request);
    } catch (const std::exception& e) {
      throw TransportError(layout_.site_id, std::string("cannot write request: ") + e.what());
    }
    if (!detail::wait_for_file(layout_.response(), timeout_, poll_)) {
      throw TransportError(layout_.site_id, "timed out after " + std::to_string(timeout_.count()) +
                                                " ms waiting for " + layout_.response().string());
    }
    try {
      return read_file(layout_.response());
    } catch (const std::exception& e) {
      throw TransportError(layout_.site_id, std::string("cannot read response: ") + e.what());
    }
  }

  const std::string& site_id() const override { return layout_.site_id; }

 private:
  FileExchangeLayout layout_;
  std::chrono::milliseconds timeout_;
  std::chrono::milliseconds poll_;
};

// Site side of the file hand-off: waits for a request, answers it, removes
// the request file so a later round is not answered twice.
inline void serve_file_exchange(const FileExchangeLayout& layout, const Handler& handler,
                                std::chrono::milliseconds timeout = std::chrono::seconds(300),
                                std::chrono::milliseconds poll = std::chrono::milliseconds(20)) {
  if (!detail::wait_for_file(layout.request(), timeout, poll)) {
    throw TransportError(layout.site_id, "no request arrived at " + layout.request().string());
  }
  const std::string req = read_file(layout.request());
  const std::string resp = handler(req);
  std::filesystem::remove(layout.request());
  write_file_atomic(layout.response(), resp);
}

// ---------------------------------------------------------------------------
// TCP: each message is a 4-byte big-endian length followed by the payload.

inline constexpr std::uint32_t kMaxFrameBytes = 1u << 30;

namespace detail {

class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;
  Socket(Socket&& o) noexcept : fd_(o.fd_) { o.fd_ = -1; }
  Socket& operator=(Socket&& o) noexcept {
    if (this != &o) {
      reset();
      fd_ = o.fd_;
      o.fd_ = -1;
    }
    return *this;
  }
  ~Socket() { reset(); }

  int get() const noexcept { return fd_; }
  void reset() noexcept {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

 private:
  int fd_ = -1;
};

inline void set_timeout(int fd, std::chrono::milliseconds t) {
  timeval tv{};
  tv.tv_sec = static_cast<time_t>(t.count() / 1000);
  tv.tv_usec = static_cast<suseconds_t>((t.count() % 1000) * 1000);
  ::setsockopt(fd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof tv);
  ::setsockopt(fd, SOL_SOCKET, SO_SNDTIMEO, &tv, sizeof tv);
}

inline void write_all(int fd, const char* data, std::size_t len) {
  while (len > 0) {
    const ssize_t w = ::send(fd, data, len, MSG_NOSIGNAL);
    if (w < 0) {
      if (errno == EINTR) continue;
      throw ProtocolError(std::string("send failed: ") + std::strerror(errno));
    }
    data += w;
    len -= static_cast<std::size_t>(w);
  }
}

// Reads exactly len bytes. Returns the count read before EOF.
inline std::size_t read_all(int fd, char* data, std::size_t len) {
  std::size_t got = 0;
  while (got < len) {
    const ssize_t r = ::recv(fd, data + got, len - got, 0);
    if (r == 0) break;
    if (r < 0) {
      if (errno == EINTR) continue;
      if (errno == EAGAIN || errno == EWOULDBLOCK) throw ProtocolError("receive timed out");
      throw ProtocolError(std::string("receive failed: ") + std::strerror(errno));
    }
    got += static_cast<std::size_t>(r);
  }
  return got;
}

}  // namespace detail

inline void write_frame(int fd, const std::string& payload) {
  if (payload.size() > kMaxFrameBytes) throw ProtocolError("frame too large");
  const auto n = static_cast<std::uint32_t>(payload.size());
  const unsigned char hdr[4] = {static_cast<unsigned char>(n >> 24), static_cast<unsigned char>(n >> 16),
                                static_cast<unsigned char>(n >> 8), static_cast<unsigned char>(n)};
  detail::write_all(fd, reinterpret_cast<const char*>(hdr), 4);
  detail::write_all(fd, payload.data(), payload.size());
}

// Reads one complete frame; a short header or body is a framing error and no
// partial payload is returned.
inline std::string read_frame(int fd) {
  unsigned char hdr[4];
  const std::size_t h = detail::read_all(fd, reinterpret_cast<char*>(hdr), 4);
  if (h != 4) {
    throw ProtocolError("framing error: connection closed inside the length prefix (" +
                        std::to_string(h) + " of 4 bytes)");
  }
  const std::uint32_t n = (std::uint32_t{hdr[0]} << 24) | (std::uint32_t{hdr[1]} << 16) |
                          (std::uint32_t{hdr[2]} << 8) | std::uint32_t{hdr[3]};
  if (n > kMaxFrameBytes) throw ProtocolError("framing error: frame length " + std::to_string(n) + " too large");
  std::string payload(n, '\0');
  const std::size_t got = detail::read_all(fd, payload.data(), n);
  if (got != n) {
    throw ProtocolError("framing error: truncated frame (" + std::to_string(got) + " of " +
                        std::to_string(n) + " bytes)");
  }
  return payload;
}

class TcpChannel final : public Channel {
 public:
  TcpChannel(std::string site_id, std::string host, std::uint16_t port,
             std::chrono::milliseconds timeout = std::chrono::seconds(300))
      : site_id_(std::move(site_id)), host_(std::move(host)), port_(port), timeout_(timeout) {}

  std::string exchange(const std::string& request) override {
    try {
      detail::Socket s = connect();
      detail::set_timeout(s.get(), timeout_);
      write_frame(s.get(), request);
      return read_frame(s.get());
    } catch (const TransportError&) {
      throw;
    } catch (const ProtocolError& e) {
      throw TransportError(site_id_, e.what());
    }
  }

  const std::string& site_id() const override { return site_id_; }

 private:
  detail::Socket connect() const {
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    const std::string port = std::to_string(port_);
    if (::getaddrinfo(host_.c_str(), port.c_str(), &hints, &res) != 0 || !res) {
      throw TransportError(site_id_, "cannot resolve " + host_);
    }
    std::string last = "no address";
    for (addrinfo* a = res; a; a = a->ai_next) {
      detail::Socket s(::socket(a->ai_family, a->ai_socktype, a->ai_protocol));
      if (s.get() < 0) continue;
      if (::connect(s.get(), a->ai_addr, a->ai_addrlen) == 0) {
        ::freeaddrinfo(res);
        return s;
      }
      last = std::strerror(errno);
    }
    ::freeaddrinfo(res);
    throw TransportError(site_id_, "cannot connect to " + host_ + ":" + port + " (" + last + ")");
  }

  std::string site_id_;
  std::string host_;
  std::uint16_t port_;
  std::chrono::milliseconds timeout_;
};

// Listening socket for a site. Port 0 picks a free port.
class TcpListener {
 public:
  explicit TcpListener(std::uint16_t port, const std::string& bind_host = "127.0.0.1") {
    sock_ = detail::Socket(::socket(AF_INET, SOCK_STREAM, 0));
    if (sock_.get() < 0) throw ProtocolError("cannot create socket");
    int one = 1;
    ::setsockopt(sock_.get(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    if (::inet_pton(AF_INET, bind_host.c_str(), &addr.sin_addr) != 1) {
      throw ConfigError("invalid listen address '" + bind_host + "'");
    }
    if (::bind(sock_.get(), reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
      throw ProtocolError("cannot bind " + bind_host + ":" + std::to_string(port) + ": " +
                          std::strerror(errno));
    }
    if (::listen(sock_.get(), 16) != 0) throw ProtocolError("listen failed");
    socklen_t len = sizeof addr;
    ::getsockname(sock_.get(), reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
  }

  std::uint16_t port() const noexcept { return port_; }
  int native_handle() const noexcept { return sock_.get(); }

  // Accepts one connection, answers one frame.
  void serve_one(const Handler& handler,
                 std::chrono::milliseconds timeout = std::chrono::seconds(300)) {
    detail::Socket c(::accept(sock_.get(), nullptr, nullptr));
    if (c.get() < 0) throw ProtocolError(std::string("accept failed: ") + std::strerror(errno));
    detail::set_timeout(c.get(), timeout);
    const std::string req = read_frame(c.get());
    write_frame(c.get(), handler(req));
  }

 private:
  detail::Socket sock_;
  std::uint16_t port_ = 0;
};

}  // namespace fedhte::wire
