#pragma once

// Dual positive/negative key-value cache built from single-class samples, and
// static dense retrieval against it.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "camforge/dense.hpp"

namespace camforge::cache {

enum class NegMode {
  Complement,  // M_t + β · pos ⊙ (1 − neg)
  Literal,     // M_t + β · pos ⊙ neg
  None,        // M_t + β · pos
};

std::string to_string(NegMode mode);
NegMode neg_mode_from_string(const std::string& s);

struct RetrievalConfig {
  std::size_t centroids = 10;  // E
  double beta = 0.5;
  double eta = 5.0;            // activation sharpness
  NegMode neg_mode = NegMode::Complement;
  std::uint64_t seed = 0;      // k-means++ seeding

  void validate() const;
};

enum class PoolTarget { Foreground, Background };

/// Mean feature over mask == class + 1 (foreground) or mask == 0 (background).
/// Throws EmptyRegion when no patch is selected.
std::vector<double> mask_average_pool(const FeatureMap& features, const PseudoMask& mask,
                                      PoolTarget target, std::size_t class_index = 0);

struct KMeansResult {
  Matrix centroids;
  std::vector<std::size_t> assignment;
  double inertia = 0.0;
  std::size_t iterations = 0;
};

inline constexpr std::size_t kKMeansMaxIters = 300;
inline constexpr double kKMeansTolerance = 1e-6;

/// Lloyd's algorithm, Euclidean, k-means++ seeding. Stops after 300 iterations,
/// on an unchanged assignment, or when the relative inertia change drops below 1e-6.
KMeansResult kmeans(const Matrix& points, std::size_t k, std::uint64_t seed);

class PrototypeSet {
 public:
  PrototypeSet(std::size_t num_classes, std::size_t dim);

  void add_foreground(std::size_t class_index, std::vector<double> v);
  void add_background(std::vector<double> v);

  std::size_t num_classes() const noexcept { return foreground_.size(); }
  std::size_t dim() const noexcept { return dim_; }
  const std::vector<std::vector<double>>& foreground(std::size_t c) const { return foreground_.at(c); }
  const std::vector<std::vector<double>>& background() const { return background_; }

 private:
  std::size_t dim_;
  std::vector<std::vector<std::vector<double>>> foreground_;
  std::vector<std::vector<double>> background_;
};

struct CacheKeys {
  Matrix positive;                          // (C·E) × D, class-major
  std::vector<std::size_t> positive_class;  // class of each positive row
  Matrix negative;                          // E × D
};

/// Per-class k-means centroids, rows L2-normalized. Groups with fewer than E
/// prototypes are padded by cycling through their prototypes.
CacheKeys build_keys(const PrototypeSet& protos, const RetrievalConfig& cfg);

/// Row i is one-hot(class) scaled by softmax_c(k_i · t_c)[class]; C + 1 columns.
Matrix build_values(const Matrix& k_pos, std::span<const std::size_t> row_class, const Matrix& text);

/// Plain one-hot background rows (column C).
Matrix background_values(std::size_t rows, std::size_t num_classes);

struct CacheModel {
  Matrix keys;                         // U × D
  Matrix values;                       // U × (C + 1)
  std::vector<std::uint32_t> provenance;  // class per row, C = background
  std::size_t num_classes = 0;
  std::size_t positive_rows = 0;
  std::size_t negative_rows = 0;

  std::size_t rows() const noexcept { return keys.rows(); }
  std::size_t dim() const noexcept { return keys.cols(); }
};

/// Positive rows first (class order), then background rows.
CacheModel assemble_cache(const Matrix& k_pos, const Matrix& v_pos,
                          std::span<const std::size_t> pos_class, const Matrix& k_neg,
                          const Matrix& v_neg);

/// Same cache with the background rows removed.
CacheModel without_negative(const CacheModel& cache);

/// exp(−η(1 − x))
double affinity_activation(double x, double eta);

/// Un-normalized retrieval σ(q̂ Kᵀ) V for every patch, H·W × (C + 1).
Matrix retrieval_scores(const FeatureMap& query, const CacheModel& cache, double eta);

struct StaticRetrieval {
  Cam positive;  // C channels, min-max normalized over image labels
  Cam negative;  // 1 channel, min-max normalized
};

StaticRetrieval static_retrieve(const FeatureMap& query, const CacheModel& cache,
                                const RetrievalConfig& cfg, const LabelSet& image_labels);

/// M_t + β · pos ⊙ f(neg), clipped to [0, 1 + β], renormalized per active channel.
Cam fuse_static(const Cam& m_t, const StaticRetrieval& s, const RetrievalConfig& cfg,
                const LabelSet& image_labels);

/// Writes keys.tensor, values.tensor, provenance.tensor and cache.json.
void save_cache(const CacheModel& cache, const std::filesystem::path& dir,
                const std::string& sidecar_json);
CacheModel load_cache(const std::filesystem::path& dir);

}  // namespace camforge::cache
