#ifndef SLWIN_PROTOCOL_HPP
#define SLWIN_PROTOCOL_HPP

#include <zlib.h>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "solver.hpp"
#include "window.hpp"

namespace slwin {

class ProtocolError : public Error {
 public:
  using Error::Error;
};

namespace proto {

static_assert(std::endian::native == std::endian::little,
              "wire encoding below assumes a little-endian host");

inline constexpr std::array<std::uint8_t, 4> kMagic{'S', 'L', 'W', 'N'};
inline constexpr std::uint16_t kVersion = 1;
inline constexpr std::size_t kHandshakeSize = 12;
inline constexpr std::uint32_t kMaxPayload = 64u << 20;
inline constexpr std::size_t kFrameHeaderSize = 5;
/// Streams whose cell records exceed this many bytes are deflated.
inline constexpr std::size_t kCompressThreshold = 64u << 10;

enum class HandshakeStatus : std::uint8_t {
  ok = 0,
  bad_magic = 1,
  bad_version = 2,
  bad_endianness = 3,
  bad_sizes = 4,
};

inline const char* status_name(HandshakeStatus s) {
  switch (s) {
    case HandshakeStatus::ok: return "ok";
    case HandshakeStatus::bad_magic: return "bad magic";
    case HandshakeStatus::bad_version: return "protocol version mismatch";
    case HandshakeStatus::bad_endianness: return "endianness mismatch";
    case HandshakeStatus::bad_sizes: return "type size mismatch";
  }
  return "?";
}

/// "SLWN", version (u16), the u32 0x01020304 as the sender stores it, then
/// sizeof(int32) and sizeof(double).
inline std::array<std::uint8_t, kHandshakeSize> handshake_bytes() {
  std::array<std::uint8_t, kHandshakeSize> b{};
  std::memcpy(b.data(), kMagic.data(), 4);
  const std::uint16_t v = kVersion;
  std::memcpy(b.data() + 4, &v, 2);
  const std::uint32_t probe = 0x01020304u;
  std::memcpy(b.data() + 6, &probe, 4);
  b[10] = sizeof(std::int32_t);
  b[11] = sizeof(double);
  return b;
}

inline HandshakeStatus check_handshake(std::span<const std::uint8_t> b) {
  if (b.size() != kHandshakeSize || std::memcmp(b.data(), kMagic.data(), 4) != 0)
    return HandshakeStatus::bad_magic;
  if (b[4] != (kVersion & 0xff) || b[5] != (kVersion >> 8)) return HandshakeStatus::bad_version;
  if (b[6] != 0x04 || b[7] != 0x03 || b[8] != 0x02 || b[9] != 0x01)
    return HandshakeStatus::bad_endianness;
  if (b[10] != 4 || b[11] != 8) return HandshakeStatus::bad_sizes;
  return HandshakeStatus::ok;
}

/// Server reply: the server's own handshake followed by one status byte.
inline std::vector<std::uint8_t> handshake_reply(HandshakeStatus s) {
  auto h = handshake_bytes();
  std::vector<std::uint8_t> out(h.begin(), h.end());
  out.push_back(static_cast<std::uint8_t>(s));
  return out;
}

enum class Command : std::uint8_t {
  visualize = 'V',
  steer = 'S',
  metrics = 'M',
  quit = 'Q',
  error = 'E',
};

inline bool known_command(std::uint8_t c) {
  return c == 'V' || c == 'S' || c == 'M' || c == 'Q' || c == 'E';
}

enum class ErrorCode : std::uint16_t {
  malformed = 1,
  unknown_command = 2,
  rejected = 3,
  stale = 4,
  too_large = 5,
  unknown_simulation = 6,
  internal = 7,
};

struct Frame {
  std::uint8_t command = 0;
  std::vector<std::uint8_t> payload;

  Command kind() const { return static_cast<Command>(command); }
  friend bool operator==(const Frame&, const Frame&) = default;
};

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { put(&v, 2); }
  void u32(std::uint32_t v) { put(&v, 4); }
  void u64(std::uint64_t v) { put(&v, 8); }
  void f64(double v) { put(&v, 8); }
  void vec3(const Vec3& v) {
    for (double x : v) f64(x);
  }
  void box(const Box& b) {
    vec3(b.lo);
    vec3(b.hi);
  }
  void bytes(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
  void str(const std::string& s) { buf_.insert(buf_.end(), s.begin(), s.end()); }

  std::vector<std::uint8_t>& buffer() { return buf_; }
  std::vector<std::uint8_t> take() { return std::move(buf_); }

 private:
  void put(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> b) : b_(b) {}

  std::uint8_t u8() { return b_[advance(1)]; }
  std::uint16_t u16() { return get<std::uint16_t>(); }
  std::uint32_t u32() { return get<std::uint32_t>(); }
  std::uint64_t u64() { return get<std::uint64_t>(); }
  double f64() { return get<double>(); }
  Vec3 vec3() { return {f64(), f64(), f64()}; }
  Box box() {
    Box b;
    b.lo = vec3();
    b.hi = vec3();
    return b;
  }
  std::span<const std::uint8_t> bytes(std::size_t n) { return b_.subspan(advance(n), n); }
  std::span<const std::uint8_t> rest() { return bytes(remaining()); }

  std::size_t remaining() const { return b_.size() - pos_; }
  void expect_end() const {
    if (pos_ != b_.size())
      throw ProtocolError(std::to_string(remaining()) + " trailing bytes in payload");
  }

 private:
  std::size_t advance(std::size_t n) {
    if (remaining() < n) throw ProtocolError("payload truncated");
    const std::size_t at = pos_;
    pos_ += n;
    return at;
  }
  template <class T>
  T get() {
    T v;
    std::memcpy(&v, b_.data() + advance(sizeof(T)), sizeof(T));
    return v;
  }

  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> encode_frame(const Frame& f) {
  if (f.payload.size() > kMaxPayload) throw ProtocolError("frame payload exceeds 64 MiB");
  ByteWriter w;
  w.u8(f.command);
  w.u32(static_cast<std::uint32_t>(f.payload.size()));
  w.bytes(f.payload);
  return w.take();
}

/// Frame header check shared by the stream decoder and the WebSocket path.
inline std::uint32_t check_frame_header(std::span<const std::uint8_t> h) {
  if (!known_command(h[0]))
    throw ProtocolError("unknown command byte 0x" + [&] {
      char buf[3];
      std::snprintf(buf, sizeof buf, "%02x", h[0]);
      return std::string(buf);
    }());
  std::uint32_t len;
  std::memcpy(&len, h.data() + 1, 4);
  if (len > kMaxPayload) throw ProtocolError("frame payload of " + std::to_string(len) +
                                             " bytes exceeds 64 MiB");
  return len;
}

/// Decodes exactly one complete frame.
inline Frame decode_frame(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kFrameHeaderSize) throw ProtocolError("frame shorter than its header");
  const std::uint32_t len = check_frame_header(bytes.first(kFrameHeaderSize));
  if (bytes.size() != kFrameHeaderSize + len)
    throw ProtocolError("frame length field says " + std::to_string(len) + " but " +
                        std::to_string(bytes.size() - kFrameHeaderSize) + " bytes follow");
  return {bytes[0], {bytes.begin() + kFrameHeaderSize, bytes.end()}};
}

/// Incremental decoder for a byte stream carrying back-to-back frames.
class FrameDecoder {
 public:
  void feed(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }

  std::optional<Frame> next() {
    if (buf_.size() < kFrameHeaderSize) return std::nullopt;
    const std::uint32_t len = check_frame_header({buf_.data(), kFrameHeaderSize});
    if (buf_.size() < kFrameHeaderSize + len) return std::nullopt;
    Frame f{buf_[0], {buf_.begin() + kFrameHeaderSize, buf_.begin() + kFrameHeaderSize + len}};
    buf_.erase(buf_.begin(), buf_.begin() + kFrameHeaderSize + len);
    return f;
  }

  std::size_t buffered() const { return buf_.size(); }

 private:
  std::vector<std::uint8_t> buf_;
};

// -- payloads ----------------------------------------------------------------

struct WindowRequest {
  WindowQuery query;
  /// 0 addresses the main simulation, otherwise a sub-simulation id.
  std::uint32_t sim_id = 0;
};

inline std::vector<std::uint8_t> encode_window_request(const WindowRequest& r) {
  ByteWriter w;
  w.u8(static_cast<std::uint8_t>(r.query.quantity));
  w.u32(r.query.max_cells);
  w.u32(r.sim_id);
  w.box(r.query.bbox);
  return w.take();
}

inline WindowRequest decode_window_request(std::span<const std::uint8_t> p) {
  ByteReader r(p);
  WindowRequest q;
  const std::uint8_t quantity = r.u8();
  if (quantity > 2) throw ProtocolError("unknown quantity code " + std::to_string(quantity));
  q.query.quantity = static_cast<StreamQuantity>(quantity);
  q.query.max_cells = r.u32();
  q.sim_id = r.u32();
  q.query.bbox = r.box();
  r.expect_end();
  if (q.query.max_cells < 1) throw ProtocolError("max_cells must be >= 1");
  for (int a = 0; a < 3; ++a)
    if (!(q.query.bbox.lo[a] <= q.query.bbox.hi[a]))
      throw ProtocolError("window box is inverted or not finite");
  return q;
}

inline constexpr std::uint8_t kStreamCompressed = 0x01;
inline constexpr std::size_t kStreamHeaderSize = 30;

inline std::size_t cell_record_size(int arity) { return 6 * 8 + 1 + 8 * arity; }

/// Header (quantity u8, flags u8, count u32, version u64, time f64, step
/// u64), then the cell records, deflated behind a u32 raw size when the
/// flags say so.
inline std::vector<std::uint8_t> encode_cell_stream(const CellStream& cs,
                                                    bool allow_compression = true) {
  ByteWriter body;
  const int n = cs.arity();
  body.buffer().reserve(cs.cells.size() * cell_record_size(n));
  for (const auto& c : cs.cells) {
    body.vec3(c.center);
    body.vec3(c.width);
    body.u8(c.level);
    for (int m = 0; m < n; ++m) body.f64(c.values[m]);
  }
  auto raw = body.take();
  const bool compress = allow_compression && raw.size() > kCompressThreshold;
  ByteWriter w;
  w.u8(static_cast<std::uint8_t>(cs.quantity));
  w.u8(compress ? kStreamCompressed : 0);
  w.u32(static_cast<std::uint32_t>(cs.cells.size()));
  w.u64(cs.version);
  w.f64(cs.time);
  w.u64(cs.step);
  if (!compress) {
    w.bytes(raw);
    return w.take();
  }
  uLongf out_len = compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> z(out_len);
  if (compress2(z.data(), &out_len, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw ProtocolError("deflate failed");
  z.resize(out_len);
  w.u32(static_cast<std::uint32_t>(raw.size()));
  w.bytes(z);
  return w.take();
}

inline CellStream decode_cell_stream(std::span<const std::uint8_t> p) {
  ByteReader r(p);
  CellStream cs;
  const std::uint8_t quantity = r.u8();
  if (quantity > 2) throw ProtocolError("unknown quantity code " + std::to_string(quantity));
  cs.quantity = static_cast<StreamQuantity>(quantity);
  const std::uint8_t flags = r.u8();
  if (flags & ~kStreamCompressed) throw ProtocolError("unknown stream flags");
  const std::uint32_t count = r.u32();
  cs.version = r.u64();
  cs.time = r.f64();
  cs.step = r.u64();
  const int n = cs.arity();
  const std::size_t need = static_cast<std::size_t>(count) * cell_record_size(n);
  std::vector<std::uint8_t> inflated;
  std::span<const std::uint8_t> body;
  if (flags & kStreamCompressed) {
    const std::uint32_t raw_size = r.u32();
    if (raw_size != need) throw ProtocolError("compressed stream size does not match cell count");
    auto z = r.rest();
    inflated.resize(raw_size);
    uLongf out_len = raw_size;
    if (uncompress(inflated.data(), &out_len, z.data(), static_cast<uLong>(z.size())) != Z_OK ||
        out_len != raw_size)
      throw ProtocolError("inflate failed");
    body = inflated;
  } else {
    if (r.remaining() != need)
      throw ProtocolError("stream body is " + std::to_string(r.remaining()) + " bytes, expected " +
                          std::to_string(need));
    body = r.rest();
  }
  ByteReader b(body);
  cs.cells.resize(count);
  for (auto& c : cs.cells) {
    c.center = b.vec3();
    c.width = b.vec3();
    c.level = b.u8();
    for (int m = 0; m < n; ++m) c.values[m] = b.f64();
  }
  b.expect_end();
  return cs;
}

enum class SteerKind : std::uint8_t {
  set_boundary = 1,
  refine = 2,
  set_cell_type = 3,
  set_viscosity = 4,
  pause = 5,
  resume = 6,
  spawn_sub = 7,
};

struct SteerCommand {
  SteerKind kind = SteerKind::pause;
  Face face = Face::xm;
  WallCondition wall;
  /// refine: by grid id when set, otherwise every eligible leaf in `region`.
  std::optional<GridId> grid;
  Box region;
  CellType cell_type = CellType::fluid;
  double value = 0.0;
  int depth = 1;

  friend bool operator==(const SteerCommand&, const SteerCommand&) = default;
};

inline std::vector<std::uint8_t> encode_steer(const SteerCommand& c) {
  ByteWriter w;
  w.u8(static_cast<std::uint8_t>(c.kind));
  switch (c.kind) {
    case SteerKind::set_boundary:
      w.u8(static_cast<std::uint8_t>(c.face));
      w.u8(static_cast<std::uint8_t>(c.wall.kind));
      w.vec3(c.wall.velocity);
      break;
    case SteerKind::refine:
      if (c.grid) {
        w.u8(0);
        w.u64(*c.grid);
      } else {
        w.u8(1);
        w.box(c.region);
      }
      break;
    case SteerKind::set_cell_type:
      w.box(c.region);
      w.u8(static_cast<std::uint8_t>(c.cell_type));
      break;
    case SteerKind::set_viscosity: w.f64(c.value); break;
    case SteerKind::pause:
    case SteerKind::resume: break;
    case SteerKind::spawn_sub:
      w.box(c.region);
      w.u8(static_cast<std::uint8_t>(c.depth));
      break;
  }
  return w.take();
}

inline SteerCommand decode_steer(std::span<const std::uint8_t> p) {
  ByteReader r(p);
  SteerCommand c;
  const std::uint8_t kind = r.u8();
  if (kind < 1 || kind > 7) throw ProtocolError("unknown steering command " + std::to_string(kind));
  c.kind = static_cast<SteerKind>(kind);
  switch (c.kind) {
    case SteerKind::set_boundary: {
      const std::uint8_t face = r.u8(), wk = r.u8();
      if (face > 5) throw ProtocolError("bad face code " + std::to_string(face));
      if (wk > 3) throw ProtocolError("bad boundary kind " + std::to_string(wk));
      c.face = static_cast<Face>(face);
      c.wall.kind = static_cast<WallKind>(wk);
      c.wall.velocity = r.vec3();
      break;
    }
    case SteerKind::refine: {
      const std::uint8_t mode = r.u8();
      if (mode == 0)
        c.grid = r.u64();
      else if (mode == 1)
        c.region = r.box();
      else
        throw ProtocolError("bad refine mode " + std::to_string(mode));
      break;
    }
    case SteerKind::set_cell_type: {
      c.region = r.box();
      const std::uint8_t t = r.u8();
      if (t > 1) throw ProtocolError("bad cell type " + std::to_string(t));
      c.cell_type = static_cast<CellType>(t);
      break;
    }
    case SteerKind::set_viscosity: c.value = r.f64(); break;
    case SteerKind::pause:
    case SteerKind::resume: break;
    case SteerKind::spawn_sub:
      c.region = r.box();
      c.depth = r.u8();
      break;
  }
  r.expect_end();
  return c;
}

struct SteerAck {
  /// Step boundary at which the command takes effect.
  std::uint64_t apply_step = 0;
  /// Id of the spawned sub-simulation, 0 for other commands.
  std::uint32_t sub_id = 0;

  friend bool operator==(const SteerAck&, const SteerAck&) = default;
};

inline std::vector<std::uint8_t> encode_ack(const SteerAck& a) {
  ByteWriter w;
  w.u64(a.apply_step);
  w.u32(a.sub_id);
  return w.take();
}

inline SteerAck decode_ack(std::span<const std::uint8_t> p) {
  ByteReader r(p);
  SteerAck a;
  a.apply_step = r.u64();
  a.sub_id = r.u32();
  r.expect_end();
  return a;
}

struct ErrorReply {
  ErrorCode code = ErrorCode::internal;
  std::string message;
};

inline Frame error_frame(ErrorCode code, const std::string& message) {
  ByteWriter w;
  w.u16(static_cast<std::uint16_t>(code));
  w.str(message);
  return {static_cast<std::uint8_t>(Command::error), w.take()};
}

inline ErrorReply decode_error(std::span<const std::uint8_t> p) {
  ByteReader r(p);
  ErrorReply e;
  e.code = static_cast<ErrorCode>(r.u16());
  auto m = r.rest();
  e.message.assign(m.begin(), m.end());
  return e;
}

}  // namespace proto
}  // namespace slwin

#endif
