#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "camforge/adapter.hpp"
#include "camforge/attention.hpp"
#include "camforge/cache.hpp"

namespace camforge {

enum class PipelineMode { TrainingFree, Trained };

struct PipelineConfig {
  attn::VceConfig vce;
  cache::RetrievalConfig retrieval;
  adapter::TrainConfig train;
  double bg_threshold = 0.45;
  PipelineMode mode = PipelineMode::TrainingFree;

  void validate() const;
  bool operator==(const PipelineConfig& o) const { return to_text() == o.to_text(); }

  /// Sectioned `key = value` text; parse_config(to_text()) reproduces the config.
  std::string to_text() const;
  /// FNV-1a of to_text(), hex.
  std::string hash() const;
};

/// Parses `[section]` headers and `key = value` lines (# starts a comment) on
/// top of the defaults. Unknown keys are rejected.
PipelineConfig parse_config(std::string_view text);
PipelineConfig load_config(const std::filesystem::path& path);

/// `section.key=value`, or a bare `key=value` when the key name is unambiguous.
void apply_override(PipelineConfig& cfg, std::string_view assignment);
/// Sets every seed (clustering, k-means, prompt init and shuffle).
void apply_seed(PipelineConfig& cfg, std::uint64_t seed);

/// All recognised keys as `section.key`.
std::vector<std::string> config_keys();

}  // namespace camforge
