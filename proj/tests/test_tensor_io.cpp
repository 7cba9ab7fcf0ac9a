#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <random>

#include "camforge/error.hpp"
#include "camforge/tensor_io.hpp"
#include "synthetic.hpp"

using namespace camforge;
using namespace camforge::io;

namespace {

std::vector<std::byte> header(std::uint8_t dtype, std::vector<std::uint64_t> dims) {
  std::vector<std::byte> out;
  for (char c : kMagic) out.push_back(std::byte(c));
  out.push_back(std::byte(dtype));
  out.push_back(std::byte(dims.size()));
  for (auto d : dims)
    for (int b = 0; b < 8; ++b) out.push_back(std::byte((d >> (8 * b)) & 0xff));
  return out;
}

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorCode::UsageError;
}

Tensor random_float_tensor(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> rank_d(1, 4), dim_d(1, 5);
  std::normal_distribution<float> g(0.0f, 10.0f);
  Tensor t;
  const int rank = rank_d(rng);
  std::size_t n = 1;
  for (int i = 0; i < rank; ++i) {
    t.dims.push_back(std::uint64_t(dim_d(rng)));
    n *= t.dims.back();
  }
  std::vector<float> v(n);
  for (auto& x : v) x = g(rng);
  t.values = std::move(v);
  return t;
}

}  // namespace

TEST(TensorIo, ZeroMatrixFromRawBytes) {
  auto bytes = header(0, {2, 2});
  bytes.resize(bytes.size() + 16, std::byte{0});
  const Tensor t = decode_tensor(bytes, "raw");
  EXPECT_EQ(t.dims, (std::vector<std::uint64_t>{2, 2}));
  const Matrix m = matrix_from_tensor(t, 2, 2);
  EXPECT_EQ(m, Matrix(2, 2, 0.0));
}

TEST(TensorIo, ShortPayloadIsTruncated) {
  auto bytes = header(0, {3, 3});
  bytes.resize(bytes.size() + 8, std::byte{0});
  EXPECT_EQ(code_of([&] { decode_tensor(bytes, "raw"); }), ErrorCode::TruncatedPayload);
}

TEST(TensorIo, SingleElementFileIs22Bytes) {
  const Tensor t{{1}, std::vector<float>{42.0f}};
  EXPECT_EQ(encoded_size(t), 22u);
  const auto bytes = encode_tensor(t);
  ASSERT_EQ(bytes.size(), 22u);
  float v;
  std::memcpy(&v, bytes.data() + 18, 4);
  EXPECT_EQ(v, 42.0f);
}

TEST(TensorIo, RankZeroRejected) {
  const Tensor t{{}, std::vector<float>{}};
  EXPECT_EQ(code_of([&] { encode_tensor(t); }), ErrorCode::BadHeader);
  auto bytes = header(0, {});
  EXPECT_EQ(code_of([&] { decode_tensor(bytes, "raw"); }), ErrorCode::BadHeader);
}

TEST(TensorIo, RankFiveRejected) {
  auto bytes = header(0, {1, 1, 1, 1, 1});
  bytes.resize(bytes.size() + 4, std::byte{0});
  EXPECT_EQ(code_of([&] { decode_tensor(bytes, "raw"); }), ErrorCode::BadHeader);
}

TEST(TensorIo, TrailingBytesRejected) {
  auto bytes = encode_tensor(Tensor{{2}, std::vector<float>{1.0f, 2.0f}});
  bytes.push_back(std::byte{0});
  EXPECT_EQ(code_of([&] { decode_tensor(bytes, "raw"); }), ErrorCode::TrailingData);
}

TEST(TensorIo, NonFiniteFloatRejected) {
  auto bytes = encode_tensor(Tensor{{2}, std::vector<float>{1.0f, 2.0f}});
  const float nan = std::numeric_limits<float>::quiet_NaN();
  std::memcpy(bytes.data() + 22, &nan, 4);
  EXPECT_EQ(code_of([&] { decode_tensor(bytes, "raw"); }), ErrorCode::NonFiniteValue);
}

TEST(TensorIo, UnknownDtypeRejected) {
  auto bytes = header(7, {1});
  bytes.resize(bytes.size() + 4, std::byte{0});
  EXPECT_EQ(code_of([&] { decode_tensor(bytes, "raw"); }), ErrorCode::UnsupportedDtype);
}

TEST(TensorIo, ErrorNamesByteOffset) {
  auto bytes = encode_tensor(Tensor{{1}, std::vector<float>{1.0f}});
  bytes[3] = std::byte{'x'};
  try {
    decode_tensor(bytes, "sample.tensor");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::BadMagic);
    EXPECT_NE(std::string(e.what()).find("sample.tensor"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("3"), std::string::npos);
  }
}

TEST(TensorIo, RandomFloatRoundTrip) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor t = random_float_tensor(rng);
    const auto bytes = encode_tensor(t);
    EXPECT_EQ(bytes.size(), encoded_size(t));
    const Tensor back = decode_tensor(bytes, "mem");
    EXPECT_EQ(back, t);
    EXPECT_EQ(encode_tensor(back), bytes);
  }
}

TEST(TensorIo, SevenByFiveMatrixRoundTrip) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1, 1);
  Matrix m(7, 5);
  for (auto& v : m.values()) v = static_cast<float>(u(rng));
  const auto back = matrix_from_tensor(decode_tensor(encode_tensor(tensor_from_matrix(m)), "mem"), 7, 5);
  EXPECT_EQ(back, m);
}

TEST(TensorIo, FileRoundTripIsByteIdentical) {
  const auto dir = synth::scratch_dir("tensor_io_files");
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor t = random_float_tensor(rng);
    if (trial % 2 == 1) {
      std::vector<std::uint32_t> u(t.numel());
      for (auto& x : u) x = static_cast<std::uint32_t>(rng());
      t.values = std::move(u);
    }
    const auto a = dir / "a.tensor", b = dir / "b.tensor";
    write_tensor(t, a);
    write_tensor(load_tensor(a), b);
    std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
    const std::string sa((std::istreambuf_iterator<char>(fa)), {});
    const std::string sb((std::istreambuf_iterator<char>(fb)), {});
    EXPECT_EQ(sa, sb);
    EXPECT_EQ(load_tensor(a), t);
  }
}

TEST(TensorIo, EveryHeaderByteCorruptionRejected) {
  const auto dir = synth::scratch_dir("tensor_io_corrupt");
  for (DType dtype : {DType::Float32, DType::UInt32}) {
    Tensor t;
    t.dims = {2, 3};
    if (dtype == DType::Float32)
      t.values = std::vector<float>{0.5f, 1.5f, -2.0f, 3.0f, 4.0f, 5.0f};
    else
      t.values = std::vector<std::uint32_t>{1, 2, 3, 4, 5, 6};
    const auto clean = encode_tensor(t);
    const std::size_t header_len = 10 + 8 * t.dims.size();
    for (std::size_t pos = 0; pos < header_len; ++pos) {
      for (int delta : {1, 2, 0x80, 0xff}) {
        auto bytes = clean;
        bytes[pos] = std::byte(std::uint8_t(std::to_integer<int>(bytes[pos]) + delta));
        const auto f = dir / "c.tensor";
        std::ofstream(f, std::ios::binary | std::ios::trunc)
            .write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
        EXPECT_THROW(load_tensor(f, dtype), Error) << "byte " << pos << " delta " << delta;
      }
    }
  }
}

TEST(TensorIo, ExpectedDtypeEnforced) {
  const auto dir = synth::scratch_dir("tensor_io_dtype");
  write_tensor(Tensor{{1}, std::vector<std::uint32_t>{1}}, dir / "u.tensor");
  EXPECT_EQ(code_of([&] { load_tensor(dir / "u.tensor", DType::Float32); }), ErrorCode::UnsupportedDtype);
  EXPECT_NO_THROW(load_tensor(dir / "u.tensor", DType::UInt32));
}

TEST(TensorIo, MissingFileIsIoFailure) {
  EXPECT_EQ(code_of([] { load_tensor("/nonexistent/x.tensor"); }), ErrorCode::IoFailure);
}

TEST(TensorIo, CamRoundTripKeepsLayout) {
  Cam cam{{2, 3}, Matrix(6, 2), false};
  for (std::size_t i = 0; i < 6; ++i) {
    cam.data(i, 0) = 0.125 * double(i);
    cam.data(i, 1) = 1.0 - 0.125 * double(i);
  }
  const Tensor t = tensor_from_cam(cam);
  EXPECT_EQ(t.dims, (std::vector<std::uint64_t>{2, 3, 2}));
  const Cam back = cam_from_tensor(t);
  EXPECT_EQ(back.grid, cam.grid);
  EXPECT_EQ(back.data, cam.data);
}
