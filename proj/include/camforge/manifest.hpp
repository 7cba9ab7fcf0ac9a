#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "camforge/dense.hpp"
#include "json.hpp"

namespace camforge::io {

/// One precomputed sample. Paths are resolved against the manifest's directory;
/// nothing is read until `load_sample` is called.
struct SampleRecord {
  std::string id;
  std::filesystem::path feature_path;
  std::vector<std::filesystem::path> clip_attn_paths;
  std::vector<std::filesystem::path> clip_value_paths;
  std::filesystem::path sd_attn_path;
  LabelSet image_labels;
  std::optional<std::filesystem::path> gt_mask_path;
};

struct Manifest {
  int version = 1;
  std::size_t num_classes = 0;
  std::size_t feature_dim = 0;
  std::vector<std::string> class_names;
  std::filesystem::path text_embed_path;
  std::vector<SampleRecord> samples;
  std::optional<std::vector<SampleRecord>> cache_samples;
};

Manifest load_manifest(const std::filesystem::path& path);
Manifest parse_manifest(const nlohmann::json& doc, const std::filesystem::path& base_dir);
/// Inverse of parse_manifest; paths are written relative to `base_dir` when possible.
nlohmann::json manifest_to_json(const Manifest& m, const std::filesystem::path& base_dir);

/// Every tensor a sample references, shape-checked against each other.
struct SampleTensors {
  std::string id;
  FeatureMap features;
  std::vector<AttentionMap> clip_attn;
  std::vector<Matrix> clip_values;  // one (H·W × D) per layer
  AttentionMap sd_attn;
  LabelSet image_labels;
};

SampleTensors load_sample(const SampleRecord& record, const Manifest& manifest);
/// Throws MissingGroundTruth when the record has no mask.
PseudoMask load_ground_truth(const SampleRecord& record, const Manifest& manifest);
/// D × C text embeddings.
Matrix load_text_embeddings(const Manifest& manifest);

}  // namespace camforge::io
