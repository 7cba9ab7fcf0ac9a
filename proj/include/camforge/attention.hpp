#pragma once

// Visual correlation enhancement: diffusion self-attention is thresholded,
// clustered into semantic groups, refined through the group affinity, and
// added onto the exported CLIP attention of the last calibrated layers.

#include <cstddef>
#include <cstdint>
#include <vector>

#include "camforge/dense.hpp"
#include "camforge/manifest.hpp"

namespace camforge::attn {

enum class RefineMode {
  /// A ← rownorm((A_c · A) ⊙ A): group consensus re-weights the running map.
  Reinforced,
  /// A ← rownorm(A_c · A). Reaches a fixed point after one iteration.
  Linear,
};

struct VceConfig {
  std::size_t groups = 9;           // B
  std::size_t iterations = 3;       // R
  double epsilon = 5e-4;
  double alpha = 1.0;
  std::size_t layers = 3;           // L
  std::uint64_t cluster_seed = 0;
  std::size_t cluster_max_iters = 100;
  RefineMode refine = RefineMode::Reinforced;

  void validate() const;
};

struct ClusterMask {
  Grid grid;
  std::vector<std::uint32_t> labels;  // one per patch, < num_groups
  std::size_t num_groups = 0;
  std::size_t empty_groups = 0;       // groups with no member after convergence
  std::size_t iterations_run = 0;
};

/// 0/1 patch affinity, 1 where two patches share a group.
struct AffinityLabel {
  Matrix data;
};

/// Spherical k-means (cosine) over attention rows with seeded k-means++ init.
ClusterMask cluster_attention(const AttentionMap& a, const VceConfig& cfg);

AffinityLabel affinity_from_clusters(const ClusterMask& m);

/// Zeroes every entry ≤ epsilon.
AttentionMap threshold_filter(const AttentionMap& a, double epsilon);

/// R refinement iterations; each ends with row-wise L1 normalization (zero rows
/// stay zero). R = 0 returns `a0` unchanged.
AttentionMap acr_refine(const AttentionMap& a0, const AffinityLabel& ac, std::size_t iterations,
                        RefineMode mode = RefineMode::Reinforced);

/// clip + alpha · refined
AttentionMap fuse_attention(const AttentionMap& clip_attn, const AttentionMap& refined,
                            double alpha);

Matrix apply_attention(const AttentionMap& attn, const Matrix& values);

/// Enhanced features P_e. The final `cfg.layers` layers are calibrated and
/// chained, each aggregating the previous layer's output.
FeatureMap enhance_features(const io::SampleTensors& sample, const VceConfig& cfg);

/// Row-wise L1 normalization; rows summing to zero are left as zeros.
void normalize_rows(Matrix& m);

}  // namespace camforge::attn
