#include "camforge/tensor_io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <string>

#include "camforge/error.hpp"

namespace camforge::io {
namespace {

constexpr std::size_t kFixedHeader = 10;

std::string where(std::string_view source, std::size_t offset) {
  return std::string(source) + " at byte " + std::to_string(offset);
}

std::uint64_t read_le(std::span<const std::byte> bytes, std::size_t offset, std::size_t width) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < width; ++i)
    v |= static_cast<std::uint64_t>(std::to_integer<std::uint8_t>(bytes[offset + i])) << (8 * i);
  return v;
}

void append_le(std::vector<std::byte>& out, std::uint64_t v, std::size_t width) {
  for (std::size_t i = 0; i < width; ++i)
    out.push_back(static_cast<std::byte>((v >> (8 * i)) & 0xFFu));
}

std::size_t product(std::span<const std::uint64_t> dims) {
  std::size_t n = 1;
  for (auto d : dims) n *= static_cast<std::size_t>(d);
  return n;
}

}  // namespace

std::size_t Tensor::numel() const noexcept {
  return std::visit([](const auto& v) { return v.size(); }, values);
}

const std::vector<float>& Tensor::floats() const {
  if (dtype() != DType::Float32) fail(ErrorCode::UnsupportedDtype, "tensor is not float32");
  return std::get<0>(values);
}

const std::vector<std::uint32_t>& Tensor::uints() const {
  if (dtype() != DType::UInt32) fail(ErrorCode::UnsupportedDtype, "tensor is not uint32");
  return std::get<1>(values);
}

std::size_t encoded_size(const Tensor& t) {
  return kFixedHeader + 8 * t.dims.size() + 4 * t.numel();
}

std::vector<std::byte> encode_tensor(const Tensor& t) {
  if (t.dims.empty() || t.dims.size() > kMaxRank) {
    fail(ErrorCode::BadHeader, "rank " + std::to_string(t.dims.size()) + " outside [1, 4]");
  }
  for (auto d : t.dims) {
    if (d == 0) fail(ErrorCode::BadHeader, "zero-length dimension");
  }
  if (product(t.dims) != t.numel()) {
    fail(ErrorCode::ShapeMismatch, "dims describe " + std::to_string(product(t.dims)) +
                                       " elements but tensor holds " + std::to_string(t.numel()));
  }
  std::vector<std::byte> out;
  out.reserve(encoded_size(t));
  for (char c : kMagic) out.push_back(static_cast<std::byte>(c));
  out.push_back(static_cast<std::byte>(t.dtype()));
  out.push_back(static_cast<std::byte>(t.dims.size()));
  for (auto d : t.dims) append_le(out, d, 8);
  std::visit(
      [&](const auto& vals) {
        for (auto v : vals) {
          std::uint32_t bits;
          if constexpr (std::is_same_v<std::decay_t<decltype(v)>, float>)
            bits = std::bit_cast<std::uint32_t>(v);
          else
            bits = v;
          append_le(out, bits, 4);
        }
      },
      t.values);
  return out;
}

Tensor decode_tensor(std::span<const std::byte> bytes, std::string_view source) {
  if (bytes.size() < kFixedHeader) {
    fail(ErrorCode::TruncatedPayload, "header needs " + std::to_string(kFixedHeader) +
                                          " bytes, file has " + std::to_string(bytes.size()) +
                                          " (" + where(source, bytes.size()) + ")");
  }
  for (std::size_t i = 0; i < kMagic.size(); ++i) {
    if (std::to_integer<char>(bytes[i]) != kMagic[i])
      fail(ErrorCode::BadMagic, "magic mismatch in " + where(source, i));
  }
  const auto dtype_code = std::to_integer<std::uint8_t>(bytes[8]);
  if (dtype_code > 1) {
    fail(ErrorCode::UnsupportedDtype,
         "dtype code " + std::to_string(dtype_code) + " in " + where(source, 8));
  }
  const auto rank = std::to_integer<std::uint8_t>(bytes[9]);
  if (rank < 1 || rank > kMaxRank) {
    fail(ErrorCode::BadHeader, "rank " + std::to_string(rank) + " in " + where(source, 9));
  }
  const std::size_t header = kFixedHeader + 8 * std::size_t{rank};
  if (bytes.size() < header) {
    fail(ErrorCode::TruncatedPayload, "dims need " + std::to_string(header) + " bytes in " +
                                          where(source, bytes.size()));
  }
  Tensor t;
  const std::size_t available = (bytes.size() - header) / 4;
  std::size_t numel = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t off = kFixedHeader + 8 * i;
    const std::uint64_t d = read_le(bytes, off, 8);
    if (d == 0) fail(ErrorCode::BadHeader, "zero-length dimension in " + where(source, off));
    // Any product beyond what the file could hold is a truncation.
    if (d > available || numel > available / d) {
      fail(ErrorCode::TruncatedPayload,
           "dimension " + std::to_string(d) + " exceeds payload in " + where(source, off));
    }
    numel *= static_cast<std::size_t>(d);
    t.dims.push_back(d);
  }
  const std::size_t expected = header + 4 * numel;
  if (bytes.size() < expected) {
    fail(ErrorCode::TruncatedPayload, "payload needs " + std::to_string(4 * numel) +
                                          " bytes, has " + std::to_string(bytes.size() - header) +
                                          " (" + where(source, bytes.size()) + ")");
  }
  if (bytes.size() > expected) {
    fail(ErrorCode::TrailingData, std::to_string(bytes.size() - expected) +
                                      " bytes after payload in " + where(source, expected));
  }
  if (dtype_code == 0) {
    std::vector<float> vals(numel);
    for (std::size_t i = 0; i < numel; ++i) {
      const std::size_t off = header + 4 * i;
      vals[i] = std::bit_cast<float>(static_cast<std::uint32_t>(read_le(bytes, off, 4)));
      if (!std::isfinite(vals[i]))
        fail(ErrorCode::NonFiniteValue, "non-finite float in " + where(source, off));
    }
    t.values = std::move(vals);
  } else {
    std::vector<std::uint32_t> vals(numel);
    for (std::size_t i = 0; i < numel; ++i)
      vals[i] = static_cast<std::uint32_t>(read_le(bytes, header + 4 * i, 4));
    t.values = std::move(vals);
  }
  return t;
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoFailure, "cannot open " + path.string());
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) fail(ErrorCode::IoFailure, "read error on " + path.string());
  return decode_tensor(std::as_bytes(std::span(raw)), path.string());
}

Tensor load_tensor(const std::filesystem::path& path, DType expected) {
  Tensor t = load_tensor(path);
  if (t.dtype() != expected) {
    fail(ErrorCode::UnsupportedDtype,
         "expected dtype code " + std::to_string(static_cast<int>(expected)) + " in " +
             where(path.string(), 8));
  }
  return t;
}

void write_tensor(const Tensor& t, const std::filesystem::path& path) {
  const auto bytes = encode_tensor(t);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::IoFailure, "cannot create " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::IoFailure, "write failed on " + path.string());
}

Tensor tensor_from_matrix(const Matrix& m) {
  const std::array<std::uint64_t, 2> dims = {m.rows(), m.cols()};
  return tensor_from_matrix(m, dims);
}

Tensor tensor_from_matrix(const Matrix& m, std::span<const std::uint64_t> dims) {
  std::vector<float> vals(m.size());
  const auto src = m.values();
  for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = static_cast<float>(src[i]);
  Tensor t{{dims.begin(), dims.end()}, std::move(vals)};
  if (product(t.dims) != t.numel()) fail(ErrorCode::ShapeMismatch, "dims do not match matrix size");
  return t;
}

Tensor tensor_from_labels(const Grid& grid, std::span<const std::uint32_t> labels) {
  if (labels.size() != grid.patches()) fail(ErrorCode::ShapeMismatch, "label count vs grid");
  return Tensor{{grid.height, grid.width}, std::vector<std::uint32_t>(labels.begin(), labels.end())};
}

Matrix matrix_from_tensor(const Tensor& t, std::size_t rows, std::size_t cols) {
  const auto& vals = t.floats();
  if (vals.size() != rows * cols) {
    fail(ErrorCode::ShapeMismatch, "tensor with " + std::to_string(vals.size()) +
                                       " elements cannot view as " + std::to_string(rows) + "x" +
                                       std::to_string(cols));
  }
  return Matrix(rows, cols, std::vector<double>(vals.begin(), vals.end()));
}

Tensor tensor_from_cam(const Cam& cam) {
  const std::array<std::uint64_t, 3> dims = {cam.grid.height, cam.grid.width, cam.channels()};
  return tensor_from_matrix(cam.data, dims);
}

Cam cam_from_tensor(const Tensor& t, bool has_background) {
  if (t.dims.size() != 3) fail(ErrorCode::ShapeMismatch, "CAM tensor must be rank 3 (H x W x K)");
  Grid grid{static_cast<std::size_t>(t.dims[0]), static_cast<std::size_t>(t.dims[1])};
  return Cam{grid, matrix_from_tensor(t, grid.patches(), static_cast<std::size_t>(t.dims[2])),
             has_background};
}

}  // namespace camforge::io
