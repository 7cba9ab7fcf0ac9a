#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "camforge/adapter.hpp"
#include "camforge/cache.hpp"
#include "camforge/config.hpp"
#include "camforge/manifest.hpp"
#include "camforge/metrics.hpp"

namespace camforge::commands {

enum class CamKind { Mt, Mes, Med };

std::string to_string(CamKind kind);
CamKind cam_kind_from_string(const std::string& s);

/// Runs fn(0..n-1) on up to `jobs` threads. Rethrows the lowest-index failure.
void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn);

/// Cache from the manifest's single-class samples.
cache::CacheModel build_cache(const io::Manifest& manifest, const PipelineConfig& cfg);

struct SampleCams {
  Cam m_t;
  std::optional<Cam> m_es;
  std::optional<Cam> m_ed;
};

SampleCams generate_sample_cams(const io::SampleTensors& sample, const Matrix& text,
                                const PipelineConfig& cfg, const cache::CacheModel* cache,
                                const adapter::AdapterState* adapter);

struct EvalResult {
  eval::ConfusionTally overall;
  eval::ConfusionTally single_class;
  eval::ConfusionTally co_occurrence;
};

/// Generates `kind` CAMs in memory for every sample with ground truth and tallies them.
EvalResult evaluate(const io::Manifest& manifest, const PipelineConfig& cfg, CamKind kind,
                    const cache::CacheModel* cache, const adapter::AdapterState* adapter,
                    std::size_t jobs = 1);

std::string cache_sidecar(const cache::CacheModel& cache, const PipelineConfig& cfg);
std::string adapter_sidecar(const adapter::AdapterState& state, const PipelineConfig& cfg);
/// Config echoed in a cache.json or adapter.json sidecar.
PipelineConfig config_from_sidecar(const std::filesystem::path& sidecar);

// Subcommands. Each writes only into the named output location.
void cmd_build_cache(const io::Manifest& manifest, const PipelineConfig& cfg,
                     const std::filesystem::path& cache_dir, std::ostream& log);
void cmd_gen_cam(const io::Manifest& manifest, const PipelineConfig& cfg,
                 const std::optional<std::filesystem::path>& cache_dir,
                 const std::optional<std::filesystem::path>& adapter_dir,
                 const std::filesystem::path& out_dir, std::size_t jobs, std::ostream& log);
void cmd_train(const io::Manifest& manifest, const PipelineConfig& cfg,
               const std::filesystem::path& cache_dir, const std::filesystem::path& adapter_dir,
               std::ostream& log);
/// Reads `<id>.<kind>.tensor` from cam_dir; writes report.json into out_dir when given.
nlohmann::json cmd_eval(const io::Manifest& manifest, const std::filesystem::path& cam_dir,
                        CamKind kind, const PipelineConfig& cfg,
                        const std::optional<std::filesystem::path>& out_dir, std::size_t jobs,
                        std::ostream& log);
void cmd_heatmap(const std::filesystem::path& cam_file, std::size_t channel,
                 const std::filesystem::path& out_path);
/// Sweeps `key` over `values`, writing one `value,miou` row per setting.
void cmd_ablate(const io::Manifest& manifest, const PipelineConfig& cfg, const std::string& key,
                const std::vector<std::string>& values, CamKind kind,
                const std::filesystem::path& out_csv, std::size_t jobs, std::ostream& log);

/// Binary PGM (P5), 8-bit, round(255 · clamp(score, 0, 1)).
std::vector<unsigned char> encode_pgm(const Cam& cam, std::size_t channel);

/// File name stem for a sample id (path separators replaced).
std::string file_stem(const std::string& id);

}  // namespace camforge::commands
