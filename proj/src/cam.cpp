#include "camforge/cam.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "camforge/error.hpp"

namespace camforge::cam {

Matrix cosine_sim(const FeatureMap& p, const Matrix& text) {
  const std::size_t n = p.data.rows();
  const std::size_t d = p.data.cols();
  const std::size_t c = text.cols();
  if (text.rows() != d) {
    fail(ErrorCode::ShapeMismatch, "feature dim " + std::to_string(d) + " vs text dim " +
                                       std::to_string(text.rows()));
  }
  std::vector<double> col_norm(c, 0.0);
  for (std::size_t k = 0; k < d; ++k)
    for (std::size_t j = 0; j < c; ++j) col_norm[j] += text(k, j) * text(k, j);
  for (std::size_t j = 0; j < c; ++j) {
    col_norm[j] = std::sqrt(col_norm[j]);
    if (col_norm[j] == 0.0)
      fail(ErrorCode::ZeroNormVector, "text embedding column " + std::to_string(j));
  }
  Matrix out(n, c);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = p.data.row(i);
    const double rn = l2_norm(row);
    if (rn == 0.0) fail(ErrorCode::ZeroNormVector, "patch feature " + std::to_string(i));
    for (std::size_t j = 0; j < c; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) s += row[k] * text(k, j);
      out(i, j) = s / (rn * col_norm[j]);
    }
  }
  return out;
}

void normalize_channels(Matrix& scores, const LabelSet& class_filter) {
  for (std::size_t c = 0; c < scores.cols(); ++c) {
    if (!class_filter.contains(c)) {
      for (std::size_t i = 0; i < scores.rows(); ++i) scores(i, c) = 0.0;
      continue;
    }
    double lo = scores(0, c), hi = scores(0, c);
    for (std::size_t i = 1; i < scores.rows(); ++i) {
      lo = std::min(lo, scores(i, c));
      hi = std::max(hi, scores(i, c));
    }
    const double range = hi - lo;
    for (std::size_t i = 0; i < scores.rows(); ++i)
      scores(i, c) = range > 0.0 ? (scores(i, c) - lo) / range : 0.0;
  }
}

Cam minmax_norm(const Grid& grid, const Matrix& raw, const LabelSet& class_filter) {
  if (raw.rows() != grid.patches()) fail(ErrorCode::ShapeMismatch, "score rows vs grid");
  for (auto c : class_filter) {
    if (c >= raw.cols()) fail(ErrorCode::LabelOutOfRange, "class " + std::to_string(c));
  }
  Cam cam{grid, raw, false};
  normalize_channels(cam.data, class_filter);
  return cam;
}

Cam generate_patch_text_cam(const FeatureMap& p_e, const Matrix& text, const LabelSet& image_labels) {
  return minmax_norm(p_e.grid, cosine_sim(p_e, text), image_labels);
}

PseudoMask cam_to_mask(const Cam& m, const LabelSet& image_labels, double bg_threshold) {
  if (!(bg_threshold > 0.0 && bg_threshold < 1.0))
    fail(ErrorCode::InvalidArgument, "bg_threshold must lie in (0, 1)");
  const std::size_t fg = m.has_background ? m.channels() - 1 : m.channels();
  for (auto c : image_labels) {
    if (c >= fg) fail(ErrorCode::LabelOutOfRange, "class " + std::to_string(c));
  }
  PseudoMask mask{m.grid, std::vector<std::uint32_t>(m.grid.patches(), 0)};
  for (std::size_t i = 0; i < mask.labels.size(); ++i) {
    double best = -1.0;
    std::size_t best_c = 0;
    for (auto c : image_labels) {
      if (m.data(i, c) > best) {
        best = m.data(i, c);
        best_c = c;
      }
    }
    if (!image_labels.empty() && best >= bg_threshold)
      mask.labels[i] = static_cast<std::uint32_t>(best_c + 1);
  }
  return mask;
}

}  // namespace camforge::cam
