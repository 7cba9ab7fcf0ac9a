#pragma once

// Tensor interchange file, little-endian throughout:
//
//   offset  size        field
//   0       8           magic "CAMFORG1"
//   8       1           dtype code (0 = float32, 1 = uint32)
//   9       1           rank, 1..4
//   10      8 * rank    dims, uint64 each
//   ...     4 * numel   row-major payload
//
// Nothing follows the payload; every dim is at least 1.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string_view>
#include <variant>
#include <vector>

#include "camforge/dense.hpp"

namespace camforge::io {

enum class DType : std::uint8_t { Float32 = 0, UInt32 = 1 };

inline constexpr std::array<char, 8> kMagic = {'C', 'A', 'M', 'F', 'O', 'R', 'G', '1'};
inline constexpr std::size_t kMaxRank = 4;

struct Tensor {
  std::vector<std::uint64_t> dims;
  std::variant<std::vector<float>, std::vector<std::uint32_t>> values;

  DType dtype() const noexcept {
    return values.index() == 0 ? DType::Float32 : DType::UInt32;
  }
  std::size_t numel() const noexcept;
  const std::vector<float>& floats() const;
  const std::vector<std::uint32_t>& uints() const;

  bool operator==(const Tensor&) const = default;
};

/// Header size plus payload: 10 + 8·rank + 4·numel.
std::size_t encoded_size(const Tensor& t);

std::vector<std::byte> encode_tensor(const Tensor& t);
/// `source` names the origin in error messages.
Tensor decode_tensor(std::span<const std::byte> bytes, std::string_view source);

Tensor load_tensor(const std::filesystem::path& path);
/// Also rejects a file whose dtype differs from `expected`.
Tensor load_tensor(const std::filesystem::path& path, DType expected);
void write_tensor(const Tensor& t, const std::filesystem::path& path);

// Conversions between tensors and the in-memory dense types. Float payloads
// are widened to double on load and rounded to float32 on store.
Tensor tensor_from_matrix(const Matrix& m);
Tensor tensor_from_matrix(const Matrix& m, std::span<const std::uint64_t> dims);
Tensor tensor_from_labels(const Grid& grid, std::span<const std::uint32_t> labels);
Matrix matrix_from_tensor(const Tensor& t, std::size_t rows, std::size_t cols);

Tensor tensor_from_cam(const Cam& cam);
Cam cam_from_tensor(const Tensor& t, bool has_background = false);

}  // namespace camforge::io
