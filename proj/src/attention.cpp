#include "camforge/attention.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <string>

#include <spdlog/spdlog.h>

#include "camforge/error.hpp"
#include "seeding.hpp"

namespace camforge::attn {
namespace {

void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    fail(ErrorCode::ShapeMismatch, std::string(what) + ": " + std::to_string(a.rows()) + "x" +
                                       std::to_string(a.cols()) + " vs " +
                                       std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
}

void require_square(const AttentionMap& a, const char* what) {
  const auto n = a.grid.patches();
  if (a.data.rows() != n || a.data.cols() != n) {
    fail(ErrorCode::ShapeMismatch, std::string(what) + ": attention must be " +
                                       std::to_string(n) + "x" + std::to_string(n));
  }
}

Matrix unit_rows(const Matrix& a) {
  Matrix out = a;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto r = out.row(i);
    const double n = l2_norm(r);
    if (n > 0.0)
      for (double& v : r) v /= n;
  }
  return out;
}

std::size_t nearest_centroid(std::span<const double> row, const Matrix& centroids) {
  std::size_t best = 0;
  double best_sim = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < centroids.rows(); ++k) {
    const double s = dot(row, centroids.row(k));
    if (s > best_sim) {
      best_sim = s;
      best = k;
    }
  }
  return best;
}

}  // namespace

void VceConfig::validate() const {
  if (groups < 2) fail(ErrorCode::InvalidArgument, "vce.groups must be >= 2");
  if (!(epsilon >= 0.0)) fail(ErrorCode::InvalidArgument, "vce.epsilon must be >= 0");
  if (layers < 1) fail(ErrorCode::InvalidArgument, "vce.layers must be >= 1");
  if (!std::isfinite(alpha)) fail(ErrorCode::InvalidArgument, "vce.alpha must be finite");
  if (cluster_max_iters < 1) fail(ErrorCode::InvalidArgument, "vce.cluster_max_iters must be >= 1");
}

void normalize_rows(Matrix& m) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    double s = 0.0;
    for (double v : r) s += std::abs(v);
    if (s > 0.0)
      for (double& v : r) v /= s;
  }
}

ClusterMask cluster_attention(const AttentionMap& a, const VceConfig& cfg) {
  require_square(a, "cluster_attention");
  const std::size_t n = a.grid.patches();
  const std::size_t k = cfg.groups;
  if (k > n) {
    fail(ErrorCode::InvalidArgument, "cannot form " + std::to_string(k) + " groups from " +
                                         std::to_string(n) + " patches");
  }
  const Matrix rows = unit_rows(a.data);
  std::vector<std::size_t> nonzero;
  for (std::size_t i = 0; i < n; ++i)
    if (l2_norm(rows.row(i)) > 0.0) nonzero.push_back(i);
  if (nonzero.empty()) fail(ErrorCode::DegenerateInput, "attention map is all zeros");

  // k-means++ seeding on cosine distance.
  std::mt19937_64 rng(cfg.cluster_seed);
  std::vector<std::size_t> seeds;
  seeds.push_back(nonzero[std::uniform_int_distribution<std::size_t>(0, nonzero.size() - 1)(rng)]);
  std::vector<double> closest(n, std::numeric_limits<double>::infinity());
  std::vector<bool> taken(n, false);
  taken[seeds[0]] = true;
  while (seeds.size() < k) {
    const auto last = rows.row(seeds.back());
    std::vector<double> weight(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double d = 1.0 - dot(rows.row(i), last);
      closest[i] = std::min(closest[i], d * d);
      weight[i] = taken[i] ? 0.0 : closest[i];
    }
    std::size_t pick = detail::sample_weighted(rng, weight);
    if (pick == n) {
      // Remaining rows duplicate existing seeds.
      pick = static_cast<std::size_t>(std::find(taken.begin(), taken.end(), false) - taken.begin());
    }
    taken[pick] = true;
    seeds.push_back(pick);
  }
  Matrix centroids(k, n);
  for (std::size_t c = 0; c < k; ++c)
    std::copy(rows.row(seeds[c]).begin(), rows.row(seeds[c]).end(), centroids.row(c).begin());

  ClusterMask mask{a.grid, std::vector<std::uint32_t>(n, 0), k, 0, 0};
  std::vector<std::size_t> assign(n, k);
  for (std::size_t it = 0; it < cfg.cluster_max_iters; ++it) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      const auto best = nearest_centroid(rows.row(i), centroids);
      if (best != assign[i]) {
        assign[i] = best;
        changed = true;
      }
    }
    mask.iterations_run = it + 1;
    if (!changed) break;
    Matrix sums(k, n);
    for (std::size_t i = 0; i < n; ++i) {
      auto dst = sums.row(assign[i]);
      const auto src = rows.row(i);
      for (std::size_t j = 0; j < n; ++j) dst[j] += src[j];
    }
    for (std::size_t c = 0; c < k; ++c) {
      auto s = sums.row(c);
      const double norm = l2_norm(s);
      if (norm == 0.0) continue;  // empty group keeps its centroid
      auto dst = centroids.row(c);
      for (std::size_t j = 0; j < n; ++j) dst[j] = s[j] / norm;
    }
  }

  std::vector<std::size_t> members(k, 0);
  for (std::size_t i = 0; i < n; ++i) {
    mask.labels[i] = static_cast<std::uint32_t>(assign[i]);
    ++members[assign[i]];
  }
  mask.empty_groups = static_cast<std::size_t>(std::count(members.begin(), members.end(), 0));
  if (mask.empty_groups > 0) {
    spdlog::debug("cluster_attention: {} of {} groups empty after {} iterations", mask.empty_groups,
                  k, mask.iterations_run);
  }
  return mask;
}

AffinityLabel affinity_from_clusters(const ClusterMask& m) {
  const std::size_t n = m.labels.size();
  AffinityLabel out{Matrix(n, n)};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) out.data(i, j) = m.labels[i] == m.labels[j] ? 1.0 : 0.0;
  return out;
}

AttentionMap threshold_filter(const AttentionMap& a, double epsilon) {
  if (!(epsilon >= 0.0)) fail(ErrorCode::InvalidArgument, "epsilon must be >= 0");
  AttentionMap out = a;
  for (double& v : out.data.values())
    if (v <= epsilon) v = 0.0;
  return out;
}

AttentionMap acr_refine(const AttentionMap& a0, const AffinityLabel& ac, std::size_t iterations,
                        RefineMode mode) {
  require_square(a0, "acr_refine");
  require_same_shape(a0.data, ac.data, "acr_refine");
  AttentionMap cur = a0;
  for (std::size_t n = 0; n < iterations; ++n) {
    Matrix next = matmul(ac.data, cur.data);
    if (mode == RefineMode::Reinforced) {
      auto dst = next.values();
      const auto prev = cur.data.values();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] *= prev[i];
    }
    normalize_rows(next);
    cur.data = std::move(next);
  }
  return cur;
}

AttentionMap fuse_attention(const AttentionMap& clip_attn, const AttentionMap& refined,
                            double alpha) {
  require_same_shape(clip_attn.data, refined.data, "fuse_attention");
  AttentionMap out = clip_attn;
  auto dst = out.data.values();
  const auto src = refined.data.values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += alpha * src[i];
  return out;
}

Matrix apply_attention(const AttentionMap& attn, const Matrix& values) {
  if (attn.data.cols() != values.rows()) {
    fail(ErrorCode::ShapeMismatch, "apply_attention: attention has " +
                                       std::to_string(attn.data.cols()) + " columns, values have " +
                                       std::to_string(values.rows()) + " rows");
  }
  return matmul(attn.data, values);
}

FeatureMap enhance_features(const io::SampleTensors& sample, const VceConfig& cfg) {
  cfg.validate();
  const std::size_t available = sample.clip_attn.size();
  if (available < cfg.layers || sample.clip_values.size() != available) {
    fail(ErrorCode::InvalidArgument, "sample '" + sample.id + "' provides " +
                                         std::to_string(available) + " layers, " +
                                         std::to_string(cfg.layers) + " requested");
  }
  const std::size_t first = available - cfg.layers;

  // With alpha = 0 the refined map has no effect and is skipped entirely.
  AttentionMap refined;
  if (cfg.alpha != 0.0) {
    const auto a0 = threshold_filter(sample.sd_attn, cfg.epsilon);
    const auto groups = cluster_attention(a0, cfg);
    refined = acr_refine(a0, affinity_from_clusters(groups), cfg.iterations, cfg.refine);
  }

  // Each calibrated layer aggregates the previous layer's output; the first
  // one starts from its own exported values.
  Matrix out = sample.clip_values[first];
  for (std::size_t l = first; l < available; ++l) {
    const auto& clip = sample.clip_attn[l];
    const auto enhanced = cfg.alpha != 0.0 ? fuse_attention(clip, refined, cfg.alpha) : clip;
    out = apply_attention(enhanced, out);
  }
  return FeatureMap{sample.sd_attn.grid, std::move(out)};
}

}  // namespace camforge::attn
