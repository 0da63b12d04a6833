#include <gtest/gtest.h>

#include <random>

#include "slwin/protocol.hpp"

using namespace slwin;
using namespace slwin::proto;

namespace {

std::vector<std::uint8_t> golden() {
  return {'S', 'L', 'W', 'N', 0x01, 0x00, 0x04, 0x03, 0x02, 0x01, 0x04, 0x08};
}

CellStream sample_stream(StreamQuantity q, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> v(-10, 10);
  CellStream cs;
  cs.quantity = q;
  cs.version = 12;
  cs.time = 0.25;
  cs.step = 99;
  for (std::size_t i = 0; i < n; ++i) {
    StreamCell c;
    c.center = {v(rng), v(rng), v(rng)};
    c.width = {0.1, 0.1, 1.0};
    c.level = static_cast<std::uint8_t>(i % 4);
    for (int m = 0; m < cs.arity(); ++m) c.values[m] = v(rng);
    cs.cells.push_back(c);
  }
  return cs;
}

}  // namespace

TEST(Handshake, GoldenBytes) {
  const auto hs = handshake_bytes();
  EXPECT_EQ(std::vector<std::uint8_t>(hs.begin(), hs.end()), golden());
  auto reply = handshake_reply(HandshakeStatus::ok);
  ASSERT_EQ(reply.size(), 13u);
  EXPECT_EQ(reply.back(), 0);
}

TEST(Handshake, Statuses) {
  EXPECT_EQ(check_handshake(golden()), HandshakeStatus::ok);
  auto b = golden();
  b[0] = 'X';
  EXPECT_EQ(check_handshake(b), HandshakeStatus::bad_magic);
  b = golden();
  b[4] = 2;
  EXPECT_EQ(check_handshake(b), HandshakeStatus::bad_version);
  b = golden();
  std::reverse(b.begin() + 6, b.begin() + 10);
  EXPECT_EQ(check_handshake(b), HandshakeStatus::bad_endianness);
  b = golden();
  b[11] = 4;
  EXPECT_EQ(check_handshake(b), HandshakeStatus::bad_sizes);
  b = golden();
  b.pop_back();
  EXPECT_EQ(check_handshake(b), HandshakeStatus::bad_magic);
}

TEST(Frame, RoundTrip) {
  const Frame f{'M', {1, 2, 3}};
  const auto bytes = encode_frame(f);
  ASSERT_EQ(bytes.size(), 8u);
  EXPECT_EQ(bytes[0], 'M');
  EXPECT_EQ(bytes[1], 3);
  EXPECT_EQ(decode_frame(bytes), f);
}

TEST(Frame, HeaderErrors) {
  std::vector<std::uint8_t> bad{'Z', 0, 0, 0, 0};
  EXPECT_THROW(decode_frame(bad), ProtocolError);
  const std::uint32_t huge = kMaxPayload + 1;
  std::vector<std::uint8_t> big{'V', 0, 0, 0, 0};
  std::memcpy(big.data() + 1, &huge, 4);
  try {
    decode_frame(big);
    FAIL();
  } catch (const ProtocolError& e) {
    EXPECT_NE(std::string(e.what()).find("64 MiB"), std::string::npos);
  }
  EXPECT_THROW(decode_frame(std::vector<std::uint8_t>{'V', 2, 0}), ProtocolError);
  EXPECT_THROW(decode_frame(std::vector<std::uint8_t>{'V', 2, 0, 0, 0, 1}), ProtocolError);
}

TEST(Frame, DecoderHandlesSplitsAndBackToBack) {
  FrameDecoder dec;
  std::vector<std::uint8_t> wire;
  for (std::uint8_t c : {'V', 'S', 'Q'}) {
    const auto b = encode_frame({c, std::vector<std::uint8_t>(c, c)});
    wire.insert(wire.end(), b.begin(), b.end());
  }
  std::vector<Frame> got;
  for (std::uint8_t byte : wire) {
    dec.feed(std::span(&byte, 1));
    while (auto f = dec.next()) got.push_back(*f);
  }
  ASSERT_EQ(got.size(), 3u);
  EXPECT_EQ(got[1].command, 'S');
  EXPECT_EQ(got[1].payload.size(), std::size_t{'S'});
  EXPECT_EQ(dec.buffered(), 0u);
}

TEST(Payload, WindowRequestRoundTrip) {
  WindowRequest r;
  r.query = {{{0.1, 0.2, 0}, {0.5, 0.9, 1}}, 777, StreamQuantity::velocity_magnitude};
  r.sim_id = 3;
  const auto d = decode_window_request(encode_window_request(r));
  EXPECT_EQ(d.query.bbox.lo, r.query.bbox.lo);
  EXPECT_EQ(d.query.bbox.hi, r.query.bbox.hi);
  EXPECT_EQ(d.query.max_cells, 777u);
  EXPECT_EQ(d.query.quantity, StreamQuantity::velocity_magnitude);
  EXPECT_EQ(d.sim_id, 3u);
}

TEST(Payload, WindowRequestRejectsBadFields) {
  WindowRequest r;
  r.query = {{{0, 0, 0}, {1, 1, 1}}, 0};
  EXPECT_THROW(decode_window_request(encode_window_request(r)), ProtocolError);
  r.query.max_cells = 5;
  r.query.bbox.lo[1] = 2;
  EXPECT_THROW(decode_window_request(encode_window_request(r)), ProtocolError);
  r.query.bbox.lo[1] = 0;
  auto b = encode_window_request(r);
  b[0] = 9;
  EXPECT_THROW(decode_window_request(b), ProtocolError);
  b = encode_window_request(r);
  b.push_back(0);
  EXPECT_THROW(decode_window_request(b), ProtocolError);
}

TEST(Stream, HeaderLayout) {
  const auto cs = sample_stream(StreamQuantity::pressure, 2, 1);
  const auto b = encode_cell_stream(cs);
  ASSERT_EQ(b.size(), kStreamHeaderSize + 2 * cell_record_size(1));
  EXPECT_EQ(b[0], 1);
  EXPECT_EQ(b[1], 0);
  EXPECT_EQ(b[2], 2);
  EXPECT_EQ(b[6], 12);
}

TEST(Stream, RoundTripAllQuantities) {
  for (auto q : {StreamQuantity::velocity, StreamQuantity::pressure, StreamQuantity::velocity_magnitude})
    for (std::size_t n : {0, 1, 57}) {
      const auto cs = sample_stream(q, n, n);
      EXPECT_EQ(decode_cell_stream(encode_cell_stream(cs)), cs);
    }
}

TEST(Stream, CompressesAboveThreshold) {
  // 2000 velocity records are ~146 KB raw.
  const auto cs = sample_stream(StreamQuantity::velocity, 2000, 2);
  const auto z = encode_cell_stream(cs);
  EXPECT_EQ(z[1], kStreamCompressed);
  EXPECT_EQ(decode_cell_stream(z), cs);
  const auto raw = encode_cell_stream(cs, false);
  EXPECT_EQ(raw[1], 0);
  EXPECT_EQ(decode_cell_stream(raw), cs);
  EXPECT_EQ(encode_cell_stream(sample_stream(StreamQuantity::velocity, 10, 2))[1], 0);
}

TEST(Stream, CorruptionThrows) {
  const auto cs = sample_stream(StreamQuantity::velocity, 2000, 3);
  auto z = encode_cell_stream(cs);
  for (std::size_t i = kStreamHeaderSize + 4; i < z.size(); i += 7) z[i] ^= 0x5a;
  EXPECT_THROW(decode_cell_stream(z), ProtocolError);
  auto raw = encode_cell_stream(cs, false);
  raw.pop_back();
  EXPECT_THROW(decode_cell_stream(raw), ProtocolError);
  raw = encode_cell_stream(cs, false);
  raw[1] = 0x80;
  EXPECT_THROW(decode_cell_stream(raw), ProtocolError);
  EXPECT_THROW(decode_cell_stream(std::vector<std::uint8_t>(10, 0)), ProtocolError);
}

TEST(Steer, RoundTripEveryKind) {
  std::vector<SteerCommand> cmds;
  SteerCommand c;
  c.kind = SteerKind::set_boundary;
  c.face = Face::yp;
  c.wall = {WallKind::moving_wall, {2.0, 0, 0}};
  cmds.push_back(c);
  c = {};
  c.kind = SteerKind::refine;
  c.grid = 17;
  cmds.push_back(c);
  c = {};
  c.kind = SteerKind::refine;
  c.region = {{0, 0, 0}, {0.5, 0.5, 1}};
  cmds.push_back(c);
  c = {};
  c.kind = SteerKind::set_cell_type;
  c.region = {{0.4, 0.4, 0}, {0.6, 0.6, 1}};
  c.cell_type = CellType::solid;
  cmds.push_back(c);
  c = {};
  c.kind = SteerKind::set_viscosity;
  c.value = 0.002;
  cmds.push_back(c);
  c = {};
  c.kind = SteerKind::pause;
  cmds.push_back(c);
  c.kind = SteerKind::resume;
  cmds.push_back(c);
  c = {};
  c.kind = SteerKind::spawn_sub;
  c.region = {{0.5, 0.5, 0}, {1, 1, 1}};
  c.depth = 2;
  cmds.push_back(c);
  for (const auto& cmd : cmds) EXPECT_EQ(decode_steer(encode_steer(cmd)), cmd);
}

TEST(Steer, RejectsUnknownCodes) {
  EXPECT_THROW(decode_steer(std::vector<std::uint8_t>{0}), ProtocolError);
  EXPECT_THROW(decode_steer(std::vector<std::uint8_t>{8}), ProtocolError);
  EXPECT_THROW(decode_steer(std::vector<std::uint8_t>{2, 5}), ProtocolError);
  EXPECT_THROW(decode_steer(std::vector<std::uint8_t>{5, 0}), ProtocolError);
  EXPECT_THROW(decode_steer(std::vector<std::uint8_t>{4, 0, 0}), ProtocolError);
}

TEST(Ack, AndErrorRoundTrip) {
  const SteerAck a{42, 7};
  EXPECT_EQ(decode_ack(encode_ack(a)), a);
  const auto f = error_frame(ErrorCode::stale, "topology changed");
  EXPECT_EQ(f.kind(), Command::error);
  const auto e = decode_error(f.payload);
  EXPECT_EQ(e.code, ErrorCode::stale);
  EXPECT_EQ(e.message, "topology changed");
}
