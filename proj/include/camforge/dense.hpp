#pragma once

#include <cstddef>
#include <cstdint>
#include <set>
#include <span>
#include <vector>

namespace camforge {

/// Row-major dense matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  Matrix transposed() const;

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// a · b with a fixed i-k-j accumulation order.
Matrix matmul(const Matrix& a, const Matrix& b);
/// a · bᵀ
Matrix matmul_transposed(const Matrix& a, const Matrix& b);

double dot(std::span<const double> a, std::span<const double> b);
double l2_norm(std::span<const double> v);

/// Spatial patch grid; patches are indexed row-major (h * width + w).
struct Grid {
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t patches() const noexcept { return height * width; }
  bool operator==(const Grid&) const = default;
};

/// Patch features, one row per patch (H·W × D).
struct FeatureMap {
  Grid grid;
  Matrix data;

  std::size_t dim() const noexcept { return data.cols(); }
};

/// Square patch-to-patch attention (H·W × H·W).
struct AttentionMap {
  Grid grid;
  Matrix data;
};

/// Per-class spatial scores, one row per patch (H·W × K).
struct Cam {
  Grid grid;
  Matrix data;
  bool has_background = false;

  std::size_t channels() const noexcept { return data.cols(); }
};

/// Hard per-patch labels: 0 = background, c + 1 = class c.
struct PseudoMask {
  Grid grid;
  std::vector<std::uint32_t> labels;

  bool operator==(const PseudoMask&) const = default;
};

inline constexpr std::uint32_t kIgnoreLabel = 255;

using LabelSet = std::set<std::size_t>;

}  // namespace camforge
