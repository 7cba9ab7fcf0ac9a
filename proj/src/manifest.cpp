#include "camforge/manifest.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include "camforge/error.hpp"
#include "camforge/tensor_io.hpp"

namespace camforge::io {
namespace {

using nlohmann::json;
namespace fs = std::filesystem;

[[noreturn]] void schema_error(const std::string& field, const std::string& what) {
  fail(ErrorCode::SchemaError, "field '" + field + "': " + what);
}

const json& require(const json& obj, const std::string& key, const std::string& ctx) {
  auto it = obj.find(key);
  if (it == obj.end()) schema_error(ctx + key, "missing");
  return *it;
}

std::string require_string(const json& obj, const std::string& key, const std::string& ctx) {
  const auto& v = require(obj, key, ctx);
  if (!v.is_string()) schema_error(ctx + key, "expected string");
  return v.get<std::string>();
}

std::size_t require_count(const json& obj, const std::string& key, const std::string& ctx) {
  const auto& v = require(obj, key, ctx);
  if (!v.is_number_integer() || v.get<std::int64_t>() < 0)
    schema_error(ctx + key, "expected non-negative integer");
  return v.get<std::size_t>();
}

fs::path resolve(const fs::path& base, const std::string& p) {
  fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

std::vector<fs::path> path_list(const json& obj, const std::string& key, const std::string& ctx,
                                const fs::path& base) {
  const auto& v = require(obj, key, ctx);
  if (!v.is_array()) schema_error(ctx + key, "expected array of paths");
  std::vector<fs::path> out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!v[i].is_string()) schema_error(ctx + key + "[" + std::to_string(i) + "]", "expected string");
    out.push_back(resolve(base, v[i].get<std::string>()));
  }
  return out;
}

SampleRecord parse_sample(const json& s, const std::string& ctx, std::size_t num_classes,
                          const fs::path& base) {
  if (!s.is_object()) schema_error(ctx, "expected object");
  SampleRecord r;
  r.id = require_string(s, "id", ctx);
  r.feature_path = resolve(base, require_string(s, "feature_path", ctx));
  r.clip_attn_paths = path_list(s, "clip_attn_paths", ctx, base);
  r.clip_value_paths = path_list(s, "clip_value_paths", ctx, base);
  if (r.clip_attn_paths.empty()) schema_error(ctx + "clip_attn_paths", "need at least one layer");
  if (r.clip_attn_paths.size() != r.clip_value_paths.size()) {
    schema_error(ctx + "clip_value_paths", "length " + std::to_string(r.clip_value_paths.size()) +
                                               " differs from clip_attn_paths length " +
                                               std::to_string(r.clip_attn_paths.size()));
  }
  r.sd_attn_path = resolve(base, require_string(s, "sd_attn_path", ctx));
  const auto& labels = require(s, "image_labels", ctx);
  if (!labels.is_array()) schema_error(ctx + "image_labels", "expected array");
  for (const auto& l : labels) {
    if (!l.is_number_integer() || l.get<std::int64_t>() < 0)
      schema_error(ctx + "image_labels", "expected class indices");
    const auto c = l.get<std::size_t>();
    if (c >= num_classes) {
      fail(ErrorCode::LabelOutOfRange, "sample '" + r.id + "' label " + std::to_string(c) +
                                           " outside [0, " + std::to_string(num_classes) + ")");
    }
    r.image_labels.insert(c);
  }
  if (auto it = s.find("gt_mask_path"); it != s.end() && !it->is_null()) {
    if (!it->is_string()) schema_error(ctx + "gt_mask_path", "expected string or null");
    r.gt_mask_path = resolve(base, it->get<std::string>());
  }
  return r;
}

std::string relative_to(const fs::path& p, const fs::path& base) {
  auto rel = p.lexically_relative(base);
  return rel.empty() ? p.string() : rel.generic_string();
}

json sample_to_json(const SampleRecord& r, const fs::path& base) {
  json s;
  s["id"] = r.id;
  s["feature_path"] = relative_to(r.feature_path, base);
  s["clip_attn_paths"] = json::array();
  for (const auto& p : r.clip_attn_paths) s["clip_attn_paths"].push_back(relative_to(p, base));
  s["clip_value_paths"] = json::array();
  for (const auto& p : r.clip_value_paths) s["clip_value_paths"].push_back(relative_to(p, base));
  s["sd_attn_path"] = relative_to(r.sd_attn_path, base);
  s["image_labels"] = std::vector<std::size_t>(r.image_labels.begin(), r.image_labels.end());
  s["gt_mask_path"] = r.gt_mask_path ? json(relative_to(*r.gt_mask_path, base)) : json(nullptr);
  return s;
}

void expect_dims(const Tensor& t, std::initializer_list<std::uint64_t> dims, const fs::path& p) {
  if (!std::equal(t.dims.begin(), t.dims.end(), dims.begin(), dims.end())) {
    std::string want, got;
    for (auto d : dims) want += (want.empty() ? "" : "x") + std::to_string(d);
    for (auto d : t.dims) got += (got.empty() ? "" : "x") + std::to_string(d);
    fail(ErrorCode::ShapeMismatch, p.string() + ": expected shape " + want + ", got " + got);
  }
}

AttentionMap load_attention(const fs::path& p, const Grid& grid) {
  const auto t = load_tensor(p, DType::Float32);
  const auto n = grid.patches();
  expect_dims(t, {n, n}, p);
  AttentionMap a{grid, matrix_from_tensor(t, n, n)};
  for (double v : a.data.values()) {
    if (v < 0.0) fail(ErrorCode::SchemaError, p.string() + ": attention entries must be >= 0");
  }
  return a;
}

}  // namespace

Manifest parse_manifest(const json& doc, const fs::path& base_dir) {
  if (!doc.is_object()) schema_error("<root>", "expected object");
  Manifest m;
  const auto& version = require(doc, "version", "");
  if (!version.is_number_integer()) schema_error("version", "expected integer");
  m.version = version.get<int>();
  m.num_classes = require_count(doc, "num_classes", "");
  m.feature_dim = require_count(doc, "feature_dim", "");
  if (m.num_classes == 0) schema_error("num_classes", "must be positive");
  if (m.feature_dim == 0) schema_error("feature_dim", "must be positive");
  const auto& names = require(doc, "class_names", "");
  if (!names.is_array()) schema_error("class_names", "expected array of strings");
  std::set<std::string> seen;
  for (const auto& n : names) {
    if (!n.is_string()) schema_error("class_names", "expected array of strings");
    auto name = n.get<std::string>();
    if (!seen.insert(name).second) fail(ErrorCode::DuplicateClassName, "class name '" + name + "'");
    m.class_names.push_back(std::move(name));
  }
  if (m.class_names.size() != m.num_classes) {
    schema_error("class_names", "has " + std::to_string(m.class_names.size()) +
                                    " entries, num_classes is " + std::to_string(m.num_classes));
  }
  m.text_embed_path = resolve(base_dir, require_string(doc, "text_embed_path", ""));
  const auto& samples = require(doc, "samples", "");
  if (!samples.is_array()) schema_error("samples", "expected array");
  for (std::size_t i = 0; i < samples.size(); ++i) {
    m.samples.push_back(parse_sample(samples[i], "samples[" + std::to_string(i) + "].",
                                     m.num_classes, base_dir));
  }
  if (auto it = doc.find("cache_samples"); it != doc.end() && !it->is_null()) {
    if (!it->is_array()) schema_error("cache_samples", "expected array");
    std::vector<SampleRecord> cache;
    for (std::size_t i = 0; i < it->size(); ++i) {
      const std::string ctx = "cache_samples[" + std::to_string(i) + "].";
      auto r = parse_sample((*it)[i], ctx, m.num_classes, base_dir);
      if (r.image_labels.size() != 1) {
        schema_error(ctx + "image_labels", "cache sample '" + r.id +
                                               "' must carry exactly one class label");
      }
      cache.push_back(std::move(r));
    }
    m.cache_samples = std::move(cache);
  }
  return m;
}

Manifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::IoFailure, "cannot open manifest " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    fail(ErrorCode::SchemaError, path.string() + ": " + e.what());
  }
  return parse_manifest(doc, path.parent_path());
}

json manifest_to_json(const Manifest& m, const fs::path& base_dir) {
  json doc;
  doc["version"] = m.version;
  doc["num_classes"] = m.num_classes;
  doc["feature_dim"] = m.feature_dim;
  doc["class_names"] = m.class_names;
  doc["text_embed_path"] = relative_to(m.text_embed_path, base_dir);
  doc["samples"] = json::array();
  for (const auto& s : m.samples) doc["samples"].push_back(sample_to_json(s, base_dir));
  if (m.cache_samples) {
    doc["cache_samples"] = json::array();
    for (const auto& s : *m.cache_samples) doc["cache_samples"].push_back(sample_to_json(s, base_dir));
  }
  return doc;
}

SampleTensors load_sample(const SampleRecord& record, const Manifest& manifest) {
  SampleTensors out;
  out.id = record.id;
  out.image_labels = record.image_labels;

  const auto feat = load_tensor(record.feature_path, DType::Float32);
  if (feat.dims.size() != 3) {
    fail(ErrorCode::ShapeMismatch, record.feature_path.string() + ": features must be H x W x D");
  }
  const Grid grid{static_cast<std::size_t>(feat.dims[0]), static_cast<std::size_t>(feat.dims[1])};
  const std::size_t dim = manifest.feature_dim;
  expect_dims(feat, {grid.height, grid.width, dim}, record.feature_path);
  out.features = FeatureMap{grid, matrix_from_tensor(feat, grid.patches(), dim)};

  for (const auto& p : record.clip_attn_paths) out.clip_attn.push_back(load_attention(p, grid));
  for (const auto& p : record.clip_value_paths) {
    const auto t = load_tensor(p, DType::Float32);
    expect_dims(t, {grid.patches(), dim}, p);
    out.clip_values.push_back(matrix_from_tensor(t, grid.patches(), dim));
  }
  out.sd_attn = load_attention(record.sd_attn_path, grid);
  return out;
}

PseudoMask load_ground_truth(const SampleRecord& record, const Manifest& manifest) {
  if (!record.gt_mask_path) {
    fail(ErrorCode::MissingGroundTruth, "sample '" + record.id + "' has no gt_mask_path");
  }
  const auto t = load_tensor(*record.gt_mask_path, DType::UInt32);
  if (t.dims.size() != 2) {
    fail(ErrorCode::ShapeMismatch, record.gt_mask_path->string() + ": mask must be H x W");
  }
  PseudoMask mask{{static_cast<std::size_t>(t.dims[0]), static_cast<std::size_t>(t.dims[1])},
                  t.uints()};
  for (auto l : mask.labels) {
    if (l > manifest.num_classes && l != kIgnoreLabel) {
      fail(ErrorCode::LabelOutOfRange, record.gt_mask_path->string() + ": mask label " +
                                           std::to_string(l));
    }
  }
  return mask;
}

Matrix load_text_embeddings(const Manifest& manifest) {
  const auto t = load_tensor(manifest.text_embed_path, DType::Float32);
  expect_dims(t, {manifest.feature_dim, manifest.num_classes}, manifest.text_embed_path);
  return matrix_from_tensor(t, manifest.feature_dim, manifest.num_classes);
}

}  // namespace camforge::io
