#ifndef SLWIN_GATEWAY_HPP
#define SLWIN_GATEWAY_HPP

#include <openssl/evp.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "server.hpp"

namespace slwin {

namespace ws {

inline constexpr const char* kGuid = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11";

inline std::string base64(std::span<const std::uint8_t> in) {
  std::string out(4 * ((in.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), in.data(),
                                static_cast<int>(in.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

inline std::array<std::uint8_t, 20> sha1(std::string_view s) {
  std::array<std::uint8_t, 20> d{};
  unsigned int len = 0;
  EVP_Digest(s.data(), s.size(), d.data(), &len, EVP_sha1(), nullptr);
  return d;
}

inline std::string accept_key(const std::string& key) { return base64(sha1(key + kGuid)); }

enum Opcode : std::uint8_t { continuation = 0x0, text = 0x1, binary = 0x2, close = 0x8, ping = 0x9, pong = 0xA };

/// One whole message in a single frame, masked when `mask` is given.
inline std::vector<std::uint8_t> encode_message(std::uint8_t opcode, std::span<const std::uint8_t> payload,
                                                const std::uint8_t* mask = nullptr) {
  std::vector<std::uint8_t> out;
  out.push_back(static_cast<std::uint8_t>(0x80 | opcode));
  const std::uint8_t m = mask ? 0x80 : 0x00;
  const std::size_t n = payload.size();
  if (n < 126) {
    out.push_back(static_cast<std::uint8_t>(m | n));
  } else if (n <= 0xFFFF) {
    out.push_back(m | 126);
    out.push_back(static_cast<std::uint8_t>(n >> 8));
    out.push_back(static_cast<std::uint8_t>(n));
  } else {
    out.push_back(m | 127);
    for (int s = 56; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(std::uint64_t(n) >> s));
  }
  if (mask) out.insert(out.end(), mask, mask + 4);
  const std::size_t off = out.size();
  out.insert(out.end(), payload.begin(), payload.end());
  if (mask)
    for (std::size_t i = 0; i < n; ++i) out[off + i] ^= mask[i % 4];
  return out;
}

struct Message {
  std::uint8_t opcode = 0;
  std::vector<std::uint8_t> payload;
};

/// Reads one message, joining continuation frames. Control frames that
/// arrive between fragments are returned on their own. Returns nullopt on
/// EOF or protocol violation; `too_large` is set when the message would
/// exceed `limit` bytes.
inline std::optional<Message> read_message(int fd, std::size_t limit, bool& too_large) {
  Message msg;
  bool started = false;
  too_large = false;
  for (;;) {
    std::uint8_t h[2];
    if (!net::read_exact(fd, h, 2)) return std::nullopt;
    const bool fin = h[0] & 0x80;
    const std::uint8_t op = h[0] & 0x0F;
    const bool masked = h[1] & 0x80;
    std::uint64_t len = h[1] & 0x7F;
    if (len == 126) {
      std::uint8_t e[2];
      if (!net::read_exact(fd, e, 2)) return std::nullopt;
      len = (std::uint64_t(e[0]) << 8) | e[1];
    } else if (len == 127) {
      std::uint8_t e[8];
      if (!net::read_exact(fd, e, 8)) return std::nullopt;
      len = 0;
      for (std::uint8_t b : e) len = (len << 8) | b;
    }
    std::uint8_t mask[4] = {0, 0, 0, 0};
    if (masked && !net::read_exact(fd, mask, 4)) return std::nullopt;
    const bool control = op >= 0x8;
    if (control && (len > 125 || !fin)) return std::nullopt;
    if (!control && msg.payload.size() + len > limit) {
      too_large = true;
      return std::nullopt;
    }
    std::vector<std::uint8_t> data(static_cast<std::size_t>(len));
    if (!net::read_exact(fd, data.data(), data.size())) return std::nullopt;
    if (masked)
      for (std::size_t i = 0; i < data.size(); ++i) data[i] ^= mask[i % 4];
    if (control) return Message{op, std::move(data)};
    if (!started) {
      if (op == continuation) return std::nullopt;
      msg.opcode = op;
      started = true;
    } else if (op != continuation) {
      return std::nullopt;
    }
    msg.payload.insert(msg.payload.end(), data.begin(), data.end());
    if (fin) return msg;
  }
}

struct HttpRequest {
  std::string method, target;
  std::map<std::string, std::string> headers;
};

inline std::optional<HttpRequest> read_http_request(int fd) {
  std::string raw;
  char c;
  while (raw.size() < 16384) {
    const ssize_t r = ::recv(fd, &c, 1, 0);
    if (r <= 0) return std::nullopt;
    raw.push_back(c);
    if (raw.size() >= 4 && raw.compare(raw.size() - 4, 4, "\r\n\r\n") == 0) break;
  }
  std::istringstream is(raw);
  HttpRequest req;
  std::string line;
  if (!std::getline(is, line)) return std::nullopt;
  std::istringstream first(line);
  first >> req.method >> req.target;
  while (std::getline(is, line) && line != "\r") {
    const auto colon = line.find(':');
    if (colon == std::string::npos) continue;
    std::string k = line.substr(0, colon), v = line.substr(colon + 1);
    for (auto& ch : k) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    while (!v.empty() && (v.front() == ' ')) v.erase(v.begin());
    while (!v.empty() && (v.back() == '\r' || v.back() == ' ')) v.pop_back();
    req.headers[k] = v;
  }
  return req;
}

inline bool header_has(const HttpRequest& r, const std::string& key, const std::string& token) {
  auto it = r.headers.find(key);
  if (it == r.headers.end()) return false;
  std::string v = it->second;
  for (auto& ch : v) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  return v.find(token) != std::string::npos;
}

inline const char* content_type(const std::filesystem::path& p) {
  const auto e = p.extension().string();
  if (e == ".html") return "text/html; charset=utf-8";
  if (e == ".js" || e == ".mjs") return "text/javascript";
  if (e == ".css") return "text/css";
  if (e == ".json") return "application/json";
  if (e == ".svg") return "image/svg+xml";
  if (e == ".png") return "image/png";
  if (e == ".wasm") return "application/wasm";
  return "application/octet-stream";
}

inline constexpr const char* kBuiltinPage = R"(<!doctype html>
<html><head><meta charset="utf-8"><title>slwin</title></head>
<body>
<h1>slwin</h1>
<p>Steering server is running. Binary protocol frames are bridged on this port over WebSocket.</p>
<pre id="m"></pre>
<script>
const ws = new WebSocket(`ws://${location.host}/ws`);
ws.binaryType = "arraybuffer";
ws.onopen = () => {
  const hs = new Uint8Array([83, 76, 87, 78, 1, 0, 4, 3, 2, 1, 4, 8]);
  ws.send(hs);
  ws.send(new Uint8Array([77, 0, 0, 0, 0]));
};
ws.onmessage = (e) => {
  const b = new Uint8Array(e.data);
  if (b[0] === 77) document.getElementById("m").textContent =
      JSON.stringify(JSON.parse(new TextDecoder().decode(b.subarray(5))), null, 2);
};
</script>
</body></html>
)";

}  // namespace ws

/// HTTP static files plus the binary protocol bridged onto WebSocket binary
/// messages: the first message is the handshake, each later one carries one
/// frame, and each reply goes back as one message.
class Gateway {
 public:
  Gateway(Simulation& sim, std::filesystem::path ui_dir = {}) : sim_(sim), ui_dir_(std::move(ui_dir)) {}

  void start(std::uint16_t port, const std::string& host = "0.0.0.0") {
    acceptor_.start(port, host, [this](int fd) { serve(fd); });
  }
  void stop() { acceptor_.stop(); }
  std::uint16_t port() const { return acceptor_.port(); }

 private:
  static void respond(int fd, int status, const char* reason, const std::string& type,
                      const std::string& body) {
    std::ostringstream os;
    os << "HTTP/1.1 " << status << ' ' << reason << "\r\nContent-Type: " << type
       << "\r\nContent-Length: " << body.size() << "\r\nConnection: close\r\n\r\n"
       << body;
    const std::string s = os.str();
    net::write_all(fd, reinterpret_cast<const std::uint8_t*>(s.data()), s.size());
  }

  void serve(int fd) {
    const auto req = ws::read_http_request(fd);
    if (!req) return;
    if (ws::header_has(*req, "upgrade", "websocket") && req->headers.count("sec-websocket-key")) {
      std::ostringstream os;
      os << "HTTP/1.1 101 Switching Protocols\r\nUpgrade: websocket\r\nConnection: Upgrade\r\n"
         << "Sec-WebSocket-Accept: " << ws::accept_key(req->headers.at("sec-websocket-key"))
         << "\r\n\r\n";
      const std::string s = os.str();
      if (!net::write_all(fd, reinterpret_cast<const std::uint8_t*>(s.data()), s.size())) return;
      bridge(fd);
      return;
    }
    if (req->method != "GET") {
      respond(fd, 405, "Method Not Allowed", "text/plain", "method not allowed\n");
      return;
    }
    serve_static(fd, req->target);
  }

  void serve_static(int fd, std::string target) {
    target = target.substr(0, target.find('?'));
    if (target.empty() || target == "/") target = "/index.html";
    if (ui_dir_.empty()) {
      if (target == "/index.html")
        respond(fd, 200, "OK", "text/html; charset=utf-8", ws::kBuiltinPage);
      else
        respond(fd, 404, "Not Found", "text/plain", "not found\n");
      return;
    }
    std::error_code ec;
    const auto root = std::filesystem::weakly_canonical(ui_dir_, ec);
    const auto path = std::filesystem::weakly_canonical(root / target.substr(1), ec);
    const auto rel = path.lexically_relative(root);
    if (ec || rel.empty() || *rel.begin() == ".." || !std::filesystem::is_regular_file(path)) {
      respond(fd, 404, "Not Found", "text/plain", "not found\n");
      return;
    }
    std::ifstream in(path, std::ios::binary);
    std::ostringstream body;
    body << in.rdbuf();
    respond(fd, 200, "OK", ws::content_type(path), body.str());
  }

  static bool send_binary(int fd, std::span<const std::uint8_t> b) {
    return net::write_all(fd, ws::encode_message(ws::binary, b));
  }

  void bridge(int fd) {
    Session s(sim_);
    bool handshaken = false;
    for (;;) {
      bool too_large = false;
      auto m = ws::read_message(fd, proto::kFrameHeaderSize + proto::kMaxPayload, too_large);
      if (!m) {
        if (too_large)
          send_binary(fd, proto::encode_frame(proto::error_frame(proto::ErrorCode::too_large,
                                                                 "message exceeds 64 MiB")));
        break;
      }
      if (m->opcode == ws::close) {
        net::write_all(fd, ws::encode_message(ws::close, m->payload));
        return;
      }
      if (m->opcode == ws::ping) {
        net::write_all(fd, ws::encode_message(ws::pong, m->payload));
        continue;
      }
      if (m->opcode == ws::pong) continue;
      if (m->opcode != ws::binary) break;
      if (!handshaken) {
        if (!send_binary(fd, s.handshake(m->payload)) || !s.ready()) break;
        handshaken = true;
        continue;
      }
      proto::Frame reply;
      if (m->payload.size() < proto::kFrameHeaderSize) {
        reply = proto::error_frame(proto::ErrorCode::malformed, "message shorter than a frame header");
        send_binary(fd, proto::encode_frame(reply));
        break;
      }
      if (auto err = s.screen(std::span(m->payload).first(proto::kFrameHeaderSize))) {
        send_binary(fd, proto::encode_frame(*err));
        break;
      }
      try {
        reply = s.handle(proto::decode_frame(m->payload));
      } catch (const ProtocolError& e) {
        send_binary(fd, proto::encode_frame(proto::error_frame(proto::ErrorCode::malformed, e.what())));
        break;
      }
      if (!send_binary(fd, proto::encode_frame(reply)) || s.closed()) break;
    }
    const std::uint8_t code[2] = {0x03, 0xE8};
    net::write_all(fd, ws::encode_message(ws::close, code));
  }

  Simulation& sim_;
  std::filesystem::path ui_dir_;
  net::Acceptor acceptor_;
};

}  // namespace slwin

#endif
