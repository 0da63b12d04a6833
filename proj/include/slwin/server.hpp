#ifndef SLWIN_SERVER_HPP
#define SLWIN_SERVER_HPP

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <cstring>
#include <list>
#include <mutex>
#include <set>
#include <thread>

#include "simulation.hpp"

namespace slwin {

/// Protocol state of one client connection, independent of transport.
class Session {
 public:
  explicit Session(Simulation& sim) : sim_(sim) {}

  bool ready() const { return ready_; }
  bool closed() const { return closed_; }

  std::vector<std::uint8_t> handshake(std::span<const std::uint8_t> b) {
    const auto s = proto::check_handshake(b);
    ready_ = s == proto::HandshakeStatus::ok;
    closed_ = !ready_;
    return proto::handshake_reply(s);
  }

  /// Screens a frame header before its payload is read. Returns an error
  /// frame (and marks the session closed) for unknown commands or payloads
  /// over the limit.
  std::optional<proto::Frame> screen(std::span<const std::uint8_t> header) {
    if (!proto::known_command(header[0]) || header[0] == static_cast<std::uint8_t>(proto::Command::error))
      return fail(proto::ErrorCode::unknown_command, "unknown command byte " + std::to_string(header[0]));
    std::uint32_t len;
    std::memcpy(&len, header.data() + 1, 4);
    if (len > proto::kMaxPayload)
      return fail(proto::ErrorCode::too_large, "payload of " + std::to_string(len) + " bytes exceeds 64 MiB");
    return std::nullopt;
  }

  proto::Frame handle(const proto::Frame& f) {
    using proto::Command;
    using proto::ErrorCode;
    if (auto e = screen(std::array<std::uint8_t, 5>{f.command, 0, 0, 0, 0})) return *e;
    try {
      switch (f.kind()) {
        case Command::visualize: {
          const auto req = proto::decode_window_request(f.payload);
          const CellStream cs = sim_.query(req);
          return {static_cast<std::uint8_t>(Command::visualize), proto::encode_cell_stream(cs)};
        }
        case Command::steer: {
          const auto cmd = proto::decode_steer(f.payload);
          return {static_cast<std::uint8_t>(Command::steer), proto::encode_ack(sim_.submit(cmd))};
        }
        case Command::metrics: {
          if (!f.payload.empty()) throw ProtocolError("metrics request carries a payload");
          const std::string s = sim_.metrics().dump();
          return {static_cast<std::uint8_t>(Command::metrics), {s.begin(), s.end()}};
        }
        case Command::quit: closed_ = true; return {static_cast<std::uint8_t>(Command::quit), {}};
        default: break;
      }
    } catch (const ProtocolError& e) {
      return fail(ErrorCode::malformed, e.what());
    } catch (const SteerRejected& e) {
      return proto::error_frame(ErrorCode::rejected, e.what());
    } catch (const UnknownSimulation& e) {
      return proto::error_frame(ErrorCode::unknown_simulation, e.what());
    } catch (const StaleSelection& e) {
      return proto::error_frame(ErrorCode::stale, e.what());
    } catch (const Error& e) {
      return proto::error_frame(ErrorCode::rejected, e.what());
    } catch (const std::exception& e) {
      return fail(ErrorCode::internal, e.what());
    }
    return fail(ErrorCode::unknown_command, "unknown command");
  }

 private:
  proto::Frame fail(proto::ErrorCode c, const std::string& msg) {
    closed_ = true;
    return proto::error_frame(c, msg);
  }

  Simulation& sim_;
  bool ready_ = false;
  bool closed_ = false;
};

namespace net {

class SocketError : public Error {
 public:
  using Error::Error;
};

inline bool read_exact(int fd, std::uint8_t* p, std::size_t n) {
  while (n > 0) {
    const ssize_t r = ::recv(fd, p, n, 0);
    if (r == 0) return false;
    if (r < 0) {
      if (errno == EINTR) continue;
      return false;
    }
    p += r;
    n -= static_cast<std::size_t>(r);
  }
  return true;
}

inline bool write_all(int fd, const std::uint8_t* p, std::size_t n) {
  while (n > 0) {
    const ssize_t r = ::send(fd, p, n, MSG_NOSIGNAL);
    if (r < 0) {
      if (errno == EINTR) continue;
      return false;
    }
    p += r;
    n -= static_cast<std::size_t>(r);
  }
  return true;
}

inline bool write_all(int fd, std::span<const std::uint8_t> b) { return write_all(fd, b.data(), b.size()); }

inline int listen_on(std::uint16_t port, const std::string& host) {
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) throw SocketError(std::string("socket: ") + std::strerror(errno));
  int one = 1;
  ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in a{};
  a.sin_family = AF_INET;
  a.sin_port = htons(port);
  if (::inet_pton(AF_INET, host.c_str(), &a.sin_addr) != 1) {
    ::close(fd);
    throw SocketError("bad bind address " + host);
  }
  if (::bind(fd, reinterpret_cast<sockaddr*>(&a), sizeof a) < 0 || ::listen(fd, 64) < 0) {
    const std::string err = std::strerror(errno);
    ::close(fd);
    throw SocketError("cannot listen on " + host + ":" + std::to_string(port) + ": " + err);
  }
  return fd;
}

inline std::uint16_t bound_port(int fd) {
  sockaddr_in a{};
  socklen_t len = sizeof a;
  ::getsockname(fd, reinterpret_cast<sockaddr*>(&a), &len);
  return ntohs(a.sin_port);
}

inline int connect_to(const std::string& host, std::uint16_t port) {
  addrinfo hints{}, *res = nullptr;
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  if (::getaddrinfo(host.c_str(), std::to_string(port).c_str(), &hints, &res) != 0 || !res)
    throw SocketError("cannot resolve " + host);
  const int fd = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
  if (fd < 0 || ::connect(fd, res->ai_addr, res->ai_addrlen) < 0) {
    const std::string err = std::strerror(errno);
    ::freeaddrinfo(res);
    if (fd >= 0) ::close(fd);
    throw SocketError("cannot connect to " + host + ":" + std::to_string(port) + ": " + err);
  }
  ::freeaddrinfo(res);
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  return fd;
}

/// Accept loop with one thread per connection. `serve(fd)` owns the
/// connection until it returns; the socket is closed afterwards.
class Acceptor {
 public:
  Acceptor() = default;
  ~Acceptor() { stop(); }
  Acceptor(const Acceptor&) = delete;
  Acceptor& operator=(const Acceptor&) = delete;

  void start(std::uint16_t port, const std::string& host, std::function<void(int)> serve) {
    listen_fd_ = listen_on(port, host);
    port_ = bound_port(listen_fd_);
    serve_ = std::move(serve);
    stopping_ = false;
    thread_ = std::thread([this] { loop(); });
  }

  std::uint16_t port() const { return port_; }

  void stop() {
    if (!thread_.joinable()) return;
    stopping_ = true;
    ::shutdown(listen_fd_, SHUT_RDWR);
    thread_.join();
    ::close(listen_fd_);
    std::list<std::thread> workers;
    {
      std::lock_guard lk(mutex_);
      for (int fd : clients_) ::shutdown(fd, SHUT_RDWR);
      workers.swap(workers_);
    }
    for (auto& t : workers) t.join();
  }

 private:
  void loop() {
    while (!stopping_) {
      pollfd p{listen_fd_, POLLIN, 0};
      if (::poll(&p, 1, 100) <= 0) continue;
      const int fd = ::accept(listen_fd_, nullptr, nullptr);
      if (fd < 0) continue;
      int one = 1;
      ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
      std::lock_guard lk(mutex_);
      if (stopping_) {
        ::close(fd);
        break;
      }
      clients_.insert(fd);
      workers_.emplace_back([this, fd] {
        try {
          serve_(fd);
        } catch (const std::exception&) {
        }
        std::lock_guard lk2(mutex_);
        clients_.erase(fd);
        ::close(fd);
      });
    }
  }

  int listen_fd_ = -1;
  std::uint16_t port_ = 0;
  std::function<void(int)> serve_;
  std::atomic<bool> stopping_{false};
  std::thread thread_;
  std::mutex mutex_;
  std::set<int> clients_;
  std::list<std::thread> workers_;
};

}  // namespace net

/// Binary protocol over plain TCP.
class TcpServer {
 public:
  explicit TcpServer(Simulation& sim) : sim_(sim) {}

  void start(std::uint16_t port, const std::string& host = "0.0.0.0") {
    acceptor_.start(port, host, [this](int fd) { serve(fd); });
  }
  void stop() { acceptor_.stop(); }
  std::uint16_t port() const { return acceptor_.port(); }

 private:
  void serve(int fd) {
    Session s(sim_);
    std::array<std::uint8_t, proto::kHandshakeSize> hs;
    if (!net::read_exact(fd, hs.data(), hs.size())) return;
    if (!net::write_all(fd, s.handshake(hs)) || !s.ready()) return;
    std::vector<std::uint8_t> payload;
    while (!s.closed()) {
      std::array<std::uint8_t, proto::kFrameHeaderSize> h;
      if (!net::read_exact(fd, h.data(), h.size())) return;
      if (auto err = s.screen(h)) {
        net::write_all(fd, proto::encode_frame(*err));
        return;
      }
      std::uint32_t len;
      std::memcpy(&len, h.data() + 1, 4);
      payload.resize(len);
      if (!net::read_exact(fd, payload.data(), len)) return;
      const proto::Frame reply = s.handle({h[0], payload});
      if (!net::write_all(fd, proto::encode_frame(reply))) return;
    }
  }

  Simulation& sim_;
  net::Acceptor acceptor_;
};

/// Blocking client for the binary protocol.
class Client {
 public:
  Client(const std::string& host, std::uint16_t port) : fd_(net::connect_to(host, port)) {
    const auto hs = proto::handshake_bytes();
    if (!net::write_all(fd_, hs)) throw net::SocketError("handshake send failed");
    std::array<std::uint8_t, proto::kHandshakeSize + 1> reply;
    if (!net::read_exact(fd_, reply.data(), reply.size())) throw net::SocketError("server closed during handshake");
    const auto status = static_cast<proto::HandshakeStatus>(reply.back());
    if (status != proto::HandshakeStatus::ok)
      throw ProtocolError(std::string("handshake refused: ") + proto::status_name(status));
  }
  ~Client() {
    if (fd_ >= 0) ::close(fd_);
  }
  Client(const Client&) = delete;
  Client& operator=(const Client&) = delete;

  void send(const proto::Frame& f) {
    if (!net::write_all(fd_, proto::encode_frame(f))) throw net::SocketError("send failed");
  }

  proto::Frame receive() {
    std::array<std::uint8_t, proto::kFrameHeaderSize> h;
    if (!net::read_exact(fd_, h.data(), h.size())) throw net::SocketError("connection closed");
    const std::uint32_t len = proto::check_frame_header(h);
    proto::Frame f{h[0], std::vector<std::uint8_t>(len)};
    if (!net::read_exact(fd_, f.payload.data(), len)) throw net::SocketError("connection closed");
    return f;
  }

  proto::Frame call(const proto::Frame& f) {
    send(f);
    return receive();
  }

  CellStream query(const proto::WindowRequest& r) {
    const auto f = expect(call({'V', proto::encode_window_request(r)}), proto::Command::visualize);
    return proto::decode_cell_stream(f.payload);
  }

  proto::SteerAck steer(const proto::SteerCommand& c) {
    return proto::decode_ack(expect(call({'S', proto::encode_steer(c)}), proto::Command::steer).payload);
  }

  nlohmann::json metrics() {
    const auto f = expect(call({'M', {}}), proto::Command::metrics);
    return nlohmann::json::parse(f.payload.begin(), f.payload.end());
  }

  void quit() { expect(call({'Q', {}}), proto::Command::quit); }

  int fd() const { return fd_; }

 private:
  static proto::Frame expect(proto::Frame f, proto::Command want) {
    if (f.kind() == proto::Command::error) {
      const auto e = proto::decode_error(f.payload);
      throw RemoteError(e.code, e.message);
    }
    if (f.kind() != want) throw ProtocolError("unexpected reply command");
    return f;
  }

 public:
  class RemoteError : public Error {
   public:
    RemoteError(proto::ErrorCode c, const std::string& m) : Error(m), code(c) {}
    proto::ErrorCode code;
  };

 private:
  int fd_ = -1;
};

}  // namespace slwin

#endif
