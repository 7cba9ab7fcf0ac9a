#include "camforge/cache.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>

#include "camforge/cam.hpp"
#include "camforge/error.hpp"
#include "camforge/tensor_io.hpp"
#include "json.hpp"
#include "seeding.hpp"

namespace camforge::cache {
namespace {

double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

void normalize_row(std::span<double> r) {
  const double n = l2_norm(r);
  if (n == 0.0) fail(ErrorCode::ZeroNormVector, "cache key has zero norm");
  for (double& v : r) v /= n;
}

Matrix stack_padded(const std::vector<std::vector<double>>& vecs, std::size_t min_rows,
                    std::size_t dim) {
  const std::size_t rows = std::max(vecs.size(), min_rows);
  Matrix m(rows, dim);
  for (std::size_t i = 0; i < rows; ++i) {
    const auto& v = vecs[i % vecs.size()];
    std::copy(v.begin(), v.end(), m.row(i).begin());
  }
  return m;
}

Matrix clustered_keys(const std::vector<std::vector<double>>& vecs, std::size_t e, std::size_t dim,
                      std::uint64_t seed, const std::string& what) {
  if (vecs.empty()) fail(ErrorCode::TooFewPoints, what + " has no prototypes");
  auto km = kmeans(stack_padded(vecs, e, dim), e, seed);
  for (std::size_t i = 0; i < km.centroids.rows(); ++i) normalize_row(km.centroids.row(i));
  return std::move(km.centroids);
}

void require_grid(const Cam& a, const Grid& g, const char* what) {
  if (!(a.grid == g) || a.data.rows() != g.patches())
    fail(ErrorCode::ShapeMismatch, std::string(what) + ": grid mismatch");
}

}  // namespace

std::string to_string(NegMode mode) {
  switch (mode) {
    case NegMode::Complement: return "complement";
    case NegMode::Literal: return "literal";
    case NegMode::None: return "none";
  }
  return "complement";
}

NegMode neg_mode_from_string(const std::string& s) {
  if (s == "complement") return NegMode::Complement;
  if (s == "literal") return NegMode::Literal;
  if (s == "none") return NegMode::None;
  fail(ErrorCode::InvalidArgument, "neg_mode must be complement, literal or none (got '" + s + "')");
}

void RetrievalConfig::validate() const {
  if (centroids < 1) fail(ErrorCode::InvalidArgument, "retrieval.centroids must be >= 1");
  if (!(beta >= 0.0) || !std::isfinite(beta))
    fail(ErrorCode::InvalidArgument, "retrieval.beta must be >= 0");
  if (!(eta > 0.0) || !std::isfinite(eta)) fail(ErrorCode::InvalidArgument, "retrieval.eta must be > 0");
}

std::vector<double> mask_average_pool(const FeatureMap& features, const PseudoMask& mask,
                                      PoolTarget target, std::size_t class_index) {
  if (!(mask.grid == features.grid) || mask.labels.size() != features.data.rows())
    fail(ErrorCode::ShapeMismatch, "mask_average_pool: mask and features disagree on grid");
  const std::uint32_t want =
      target == PoolTarget::Background ? 0u : static_cast<std::uint32_t>(class_index + 1);
  std::vector<double> sum(features.dim(), 0.0);
  std::size_t count = 0;
  for (std::size_t i = 0; i < mask.labels.size(); ++i) {
    if (mask.labels[i] != want) continue;
    const auto r = features.data.row(i);
    for (std::size_t k = 0; k < sum.size(); ++k) sum[k] += r[k];
    ++count;
  }
  if (count == 0) {
    fail(ErrorCode::EmptyRegion, target == PoolTarget::Background
                                     ? std::string("no background patches")
                                     : "no patches of class " + std::to_string(class_index));
  }
  for (double& v : sum) v /= static_cast<double>(count);
  return sum;
}

KMeansResult kmeans(const Matrix& points, std::size_t k, std::uint64_t seed) {
  const std::size_t n = points.rows();
  const std::size_t d = points.cols();
  if (k < 1 || n < k) {
    fail(ErrorCode::TooFewPoints, std::to_string(n) + " points for k = " + std::to_string(k));
  }
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> seeds{std::uniform_int_distribution<std::size_t>(0, n - 1)(rng)};
  std::vector<bool> taken(n, false);
  taken[seeds[0]] = true;
  std::vector<double> closest(n, std::numeric_limits<double>::infinity());
  while (seeds.size() < k) {
    const auto last = points.row(seeds.back());
    std::vector<double> weight(n);
    for (std::size_t i = 0; i < n; ++i) {
      closest[i] = std::min(closest[i], squared_distance(points.row(i), last));
      weight[i] = taken[i] ? 0.0 : closest[i];
    }
    std::size_t pick = detail::sample_weighted(rng, weight);
    if (pick == n)
      pick = static_cast<std::size_t>(std::find(taken.begin(), taken.end(), false) - taken.begin());
    taken[pick] = true;
    seeds.push_back(pick);
  }

  KMeansResult res{Matrix(k, d), std::vector<std::size_t>(n, k), 0.0, 0};
  for (std::size_t c = 0; c < k; ++c)
    std::copy(points.row(seeds[c]).begin(), points.row(seeds[c]).end(), res.centroids.row(c).begin());

  auto update_means = [&] {
    Matrix sums(k, d);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      auto dst = sums.row(res.assignment[i]);
      const auto src = points.row(i);
      for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
      ++counts[res.assignment[i]];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;  // empty cluster keeps its centroid
      for (std::size_t j = 0; j < d; ++j)
        res.centroids(c, j) = sums(c, j) / static_cast<double>(counts[c]);
    }
  };

  double prev_inertia = std::numeric_limits<double>::infinity();
  for (std::size_t it = 0; it < kKMeansMaxIters; ++it) {
    bool changed = false;
    double inertia = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        const double dist = squared_distance(points.row(i), res.centroids.row(c));
        if (dist < best_d) {
          best_d = dist;
          best = c;
        }
      }
      if (best != res.assignment[i]) {
        res.assignment[i] = best;
        changed = true;
      }
      inertia += best_d;
    }
    res.iterations = it + 1;
    res.inertia = inertia;
    update_means();
    if (!changed) break;
    if (std::isfinite(prev_inertia) &&
        std::abs(prev_inertia - inertia) <= kKMeansTolerance * prev_inertia)
      break;
    prev_inertia = inertia;
  }
  // Inertia against the final centroids.
  res.inertia = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    res.inertia += squared_distance(points.row(i), res.centroids.row(res.assignment[i]));
  return res;
}

PrototypeSet::PrototypeSet(std::size_t num_classes, std::size_t dim)
    : dim_(dim), foreground_(num_classes) {}

void PrototypeSet::add_foreground(std::size_t class_index, std::vector<double> v) {
  if (class_index >= foreground_.size())
    fail(ErrorCode::LabelOutOfRange, "prototype class " + std::to_string(class_index));
  if (v.size() != dim_) fail(ErrorCode::ShapeMismatch, "prototype dimension");
  for (double x : v)
    if (!std::isfinite(x)) fail(ErrorCode::NonFiniteValue, "non-finite prototype");
  foreground_[class_index].push_back(std::move(v));
}

void PrototypeSet::add_background(std::vector<double> v) {
  if (v.size() != dim_) fail(ErrorCode::ShapeMismatch, "prototype dimension");
  for (double x : v)
    if (!std::isfinite(x)) fail(ErrorCode::NonFiniteValue, "non-finite prototype");
  background_.push_back(std::move(v));
}

CacheKeys build_keys(const PrototypeSet& protos, const RetrievalConfig& cfg) {
  cfg.validate();
  const std::size_t e = cfg.centroids;
  const std::size_t c_count = protos.num_classes();
  CacheKeys keys{Matrix(c_count * e, protos.dim()), {}, Matrix()};
  for (std::size_t c = 0; c < c_count; ++c) {
    const auto centroids = clustered_keys(protos.foreground(c), e, protos.dim(), cfg.seed + c,
                                          "class " + std::to_string(c));
    for (std::size_t r = 0; r < e; ++r) {
      std::copy(centroids.row(r).begin(), centroids.row(r).end(), keys.positive.row(c * e + r).begin());
      keys.positive_class.push_back(c);
    }
  }
  keys.negative =
      clustered_keys(protos.background(), e, protos.dim(), cfg.seed + c_count, "background");
  return keys;
}

Matrix build_values(const Matrix& k_pos, std::span<const std::size_t> row_class, const Matrix& text) {
  if (row_class.size() != k_pos.rows()) fail(ErrorCode::ShapeMismatch, "row_class length");
  if (text.rows() != k_pos.cols()) fail(ErrorCode::ShapeMismatch, "key dim vs text dim");
  const std::size_t c_count = text.cols();
  const Matrix logits = matmul(k_pos, text);
  Matrix values(k_pos.rows(), c_count + 1);
  for (std::size_t i = 0; i < k_pos.rows(); ++i) {
    const std::size_t y = row_class[i];
    if (y >= c_count) fail(ErrorCode::LabelOutOfRange, "key class " + std::to_string(y));
    const auto r = logits.row(i);
    const double peak = *std::max_element(r.begin(), r.end());
    double z = 0.0;
    for (double v : r) z += std::exp(v - peak);
    values(i, y) = std::exp(r[y] - peak) / z;
  }
  return values;
}

Matrix background_values(std::size_t rows, std::size_t num_classes) {
  Matrix v(rows, num_classes + 1);
  for (std::size_t i = 0; i < rows; ++i) v(i, num_classes) = 1.0;
  return v;
}

CacheModel assemble_cache(const Matrix& k_pos, const Matrix& v_pos,
                          std::span<const std::size_t> pos_class, const Matrix& k_neg,
                          const Matrix& v_neg) {
  const std::size_t cols = v_pos.cols();
  if (cols < 2) fail(ErrorCode::ShapeMismatch, "values need at least one class plus background");
  if (k_pos.rows() != v_pos.rows() || pos_class.size() != k_pos.rows() ||
      k_neg.rows() != v_neg.rows())
    fail(ErrorCode::ShapeMismatch, "assemble_cache: key/value row counts differ");
  if (k_neg.rows() > 0 && (k_neg.cols() != k_pos.cols() || v_neg.cols() != cols))
    fail(ErrorCode::ShapeMismatch, "assemble_cache: positive/negative widths differ");
  const std::size_t c_count = cols - 1;
  const std::size_t u = k_pos.rows() + k_neg.rows();
  CacheModel cache{Matrix(u, k_pos.cols()), Matrix(u, cols), {}, c_count, k_pos.rows(), k_neg.rows()};
  for (std::size_t i = 0; i < k_pos.rows(); ++i) {
    if (pos_class[i] >= c_count) fail(ErrorCode::LabelOutOfRange, "positive row class");
    std::copy(k_pos.row(i).begin(), k_pos.row(i).end(), cache.keys.row(i).begin());
    std::copy(v_pos.row(i).begin(), v_pos.row(i).end(), cache.values.row(i).begin());
    cache.provenance.push_back(static_cast<std::uint32_t>(pos_class[i]));
  }
  for (std::size_t i = 0; i < k_neg.rows(); ++i) {
    const std::size_t dst = k_pos.rows() + i;
    std::copy(k_neg.row(i).begin(), k_neg.row(i).end(), cache.keys.row(dst).begin());
    std::copy(v_neg.row(i).begin(), v_neg.row(i).end(), cache.values.row(dst).begin());
    cache.provenance.push_back(static_cast<std::uint32_t>(c_count));
  }
  return cache;
}

CacheModel without_negative(const CacheModel& cache) {
  const std::size_t p = cache.positive_rows;
  CacheModel out{Matrix(p, cache.dim()), Matrix(p, cache.values.cols()), {}, cache.num_classes, p, 0};
  for (std::size_t i = 0; i < p; ++i) {
    std::copy(cache.keys.row(i).begin(), cache.keys.row(i).end(), out.keys.row(i).begin());
    std::copy(cache.values.row(i).begin(), cache.values.row(i).end(), out.values.row(i).begin());
    out.provenance.push_back(cache.provenance[i]);
  }
  return out;
}

double affinity_activation(double x, double eta) { return std::exp(-eta * (1.0 - x)); }

Matrix retrieval_scores(const FeatureMap& query, const CacheModel& cache, double eta) {
  if (query.dim() != cache.dim()) {
    fail(ErrorCode::ShapeMismatch, "query dim " + std::to_string(query.dim()) + " vs key dim " +
                                       std::to_string(cache.dim()));
  }
  const std::size_t n = query.data.rows();
  const std::size_t u = cache.rows();
  const std::size_t k = cache.values.cols();
  Matrix out(n, k);
  std::vector<double> act(u);
  for (std::size_t i = 0; i < n; ++i) {
    const auto q = query.data.row(i);
    const double qn = l2_norm(q);
    if (qn == 0.0) fail(ErrorCode::ZeroNormVector, "query patch " + std::to_string(i));
    for (std::size_t r = 0; r < u; ++r) act[r] = affinity_activation(dot(q, cache.keys.row(r)) / qn, eta);
    auto dst = out.row(i);
    for (std::size_t r = 0; r < u; ++r) {
      const auto v = cache.values.row(r);
      for (std::size_t c = 0; c < k; ++c) dst[c] += act[r] * v[c];
    }
  }
  return out;
}

StaticRetrieval static_retrieve(const FeatureMap& query, const CacheModel& cache,
                                const RetrievalConfig& cfg, const LabelSet& image_labels) {
  cfg.validate();
  const Matrix scores = retrieval_scores(query, cache, cfg.eta);
  const std::size_t c_count = cache.num_classes;
  const std::size_t n = scores.rows();
  Matrix pos(n, c_count), neg(n, 1);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < c_count; ++c) pos(i, c) = scores(i, c);
    neg(i, 0) = scores(i, c_count);
  }
  return StaticRetrieval{cam::minmax_norm(query.grid, pos, image_labels),
                         cam::minmax_norm(query.grid, neg, LabelSet{0})};
}

Cam fuse_static(const Cam& m_t, const StaticRetrieval& s, const RetrievalConfig& cfg,
                const LabelSet& image_labels) {
  cfg.validate();
  require_grid(s.positive, m_t.grid, "fuse_static");
  require_grid(s.negative, m_t.grid, "fuse_static");
  if (s.positive.channels() != m_t.channels() || s.negative.channels() != 1)
    fail(ErrorCode::ShapeMismatch, "fuse_static: channel counts differ");
  Cam out{m_t.grid, Matrix(m_t.data.rows(), m_t.channels()), false};
  const double hi = 1.0 + cfg.beta;
  for (std::size_t i = 0; i < out.data.rows(); ++i) {
    const double neg = s.negative.data(i, 0);
    const double gate = cfg.neg_mode == NegMode::Complement ? 1.0 - neg
                        : cfg.neg_mode == NegMode::Literal  ? neg
                                                            : 1.0;
    for (std::size_t c = 0; c < out.channels(); ++c) {
      const double v = m_t.data(i, c) + cfg.beta * s.positive.data(i, c) * gate;
      out.data(i, c) = std::clamp(v, 0.0, hi);
    }
  }
  cam::normalize_channels(out.data, image_labels);
  return out;
}

void save_cache(const CacheModel& cache, const std::filesystem::path& dir,
                const std::string& sidecar_json) {
  std::filesystem::create_directories(dir);
  io::write_tensor(io::tensor_from_matrix(cache.keys), dir / "keys.tensor");
  io::write_tensor(io::tensor_from_matrix(cache.values), dir / "values.tensor");
  io::write_tensor(io::Tensor{{cache.provenance.size()}, cache.provenance}, dir / "provenance.tensor");
  std::ofstream out(dir / "cache.json", std::ios::trunc);
  out << sidecar_json;
  if (!out) fail(ErrorCode::IoFailure, "cannot write " + (dir / "cache.json").string());
}

CacheModel load_cache(const std::filesystem::path& dir) {
  std::ifstream in(dir / "cache.json");
  if (!in) fail(ErrorCode::IoFailure, "cannot open " + (dir / "cache.json").string());
  nlohmann::json side;
  try {
    side = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::SchemaError, (dir / "cache.json").string() + ": " + e.what());
  }
  CacheModel cache;
  try {
    cache.num_classes = side.at("num_classes").get<std::size_t>();
    cache.positive_rows = side.at("positive_rows").get<std::size_t>();
    cache.negative_rows = side.at("negative_rows").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::SchemaError, (dir / "cache.json").string() + ": " + e.what());
  }
  const std::size_t u = cache.positive_rows + cache.negative_rows;
  const auto keys = io::load_tensor(dir / "keys.tensor", io::DType::Float32);
  const auto values = io::load_tensor(dir / "values.tensor", io::DType::Float32);
  const auto prov = io::load_tensor(dir / "provenance.tensor", io::DType::UInt32);
  if (keys.dims.size() != 2 || keys.dims[0] != u || values.dims.size() != 2 ||
      values.dims[0] != u || values.dims[1] != cache.num_classes + 1 || prov.numel() != u)
    fail(ErrorCode::ShapeMismatch, dir.string() + ": cache tensors disagree with cache.json");
  cache.keys = io::matrix_from_tensor(keys, u, static_cast<std::size_t>(keys.dims[1]));
  cache.values = io::matrix_from_tensor(values, u, cache.num_classes + 1);
  cache.provenance = prov.uints();
  return cache;
}

}  // namespace camforge::cache
