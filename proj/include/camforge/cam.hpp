#pragma once

#include "camforge/dense.hpp"

namespace camforge::cam {

/// Patch-by-class cosine similarity between P (H·W × D) and T (D × C).
Matrix cosine_sim(const FeatureMap& p, const Matrix& text);

/// Per-channel min-max normalization over spatial positions. Channels outside
/// `class_filter` and constant channels become zero.
Cam minmax_norm(const Grid& grid, const Matrix& raw, const LabelSet& class_filter);

/// In-place variant of minmax_norm on the columns of `scores`.
void normalize_channels(Matrix& scores, const LabelSet& class_filter);

Cam generate_patch_text_cam(const FeatureMap& p_e, const Matrix& text, const LabelSet& image_labels);

/// 0 where the best active channel scores below `bg_threshold`, otherwise that
/// channel + 1 (ties go to the lower index). A background channel, if present,
/// never competes.
PseudoMask cam_to_mask(const Cam& m, const LabelSet& image_labels, double bg_threshold);

}  // namespace camforge::cam
