#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "camforge/commands.hpp"
#include "camforge/config.hpp"
#include "camforge/error.hpp"
#include "camforge/manifest.hpp"

namespace fs = std::filesystem;
using namespace camforge;

namespace {

struct Options {
  std::string manifest;
  std::string config;
  std::string cache_dir;
  std::string adapter_dir;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
  std::size_t jobs = 1;
  std::string kind;  // empty: follow pipeline.mode
  std::string cam;
  std::size_t channel = 0;
  std::string out;
  std::string key;
  std::vector<std::string> values;
  bool verbose = false;
};

// defaults < --config file < --seed < --set (left to right)
PipelineConfig resolve_config(const Options& o) {
  PipelineConfig cfg = o.config.empty() ? PipelineConfig{} : load_config(o.config);
  if (o.seed) apply_seed(cfg, *o.seed);
  for (const auto& s : o.overrides) apply_override(cfg, s);
  cfg.validate();
  return cfg;
}

std::optional<fs::path> optional_path(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return fs::path(s);
}

void require(const std::string& value, const char* flag) {
  if (value.empty()) fail(ErrorCode::UsageError, std::string(flag) + " is required");
}

void add_common(CLI::App* sub, Options& o) {
  sub->add_option("--manifest", o.manifest, "Dataset manifest (JSON)");
  sub->add_option("--config", o.config, "Config file");
  sub->add_option("--seed", o.seed, "Seed for every random stage");
  sub->add_option("--set", o.overrides, "Config override key=value (repeatable)")->take_all();
  sub->add_option("--jobs", o.jobs, "Worker threads")->check(CLI::PositiveNumber);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"camforge: CAM generation, cache retrieval and evaluation on dense tensors"};
  app.require_subcommand(1);
  Options o;
  app.add_flag("-v,--verbose", o.verbose, "Debug logging");

  auto* build = app.add_subcommand("build-cache", "Build the key-value cache");
  add_common(build, o);
  build->add_option("--cache-dir", o.cache_dir, "Output cache directory");

  auto* gen = app.add_subcommand("gen-cam", "Write CAM tensors per sample");
  add_common(gen, o);
  gen->add_option("--cache-dir", o.cache_dir, "Cache directory (enables mes)");
  gen->add_option("--adapter-dir", o.adapter_dir, "Adapter directory (enables med)");
  gen->add_option("--out-dir", o.out_dir, "Output CAM directory");

  auto* train = app.add_subcommand("train", "Train the retrieval adapter");
  add_common(train, o);
  train->add_option("--cache-dir", o.cache_dir, "Cache directory");
  train->add_option("--adapter-dir", o.adapter_dir, "Output adapter directory");

  auto* ev = app.add_subcommand("eval", "Evaluate CAM files against ground truth");
  add_common(ev, o);
  ev->add_option("--cam", o.cam, "Directory of CAM tensors");
  ev->add_option("--kind", o.kind, "CAM kind: mt, mes or med (default from pipeline.mode)");
  ev->add_option("--out-dir", o.out_dir, "Directory for report.json");

  auto* heat = app.add_subcommand("heatmap", "Render one CAM channel as PGM");
  heat->add_option("--cam", o.cam, "CAM tensor file")->required();
  heat->add_option("--channel", o.channel, "Class channel")->required();
  heat->add_option("--out", o.out, "Output PGM path")->required();

  auto* abl = app.add_subcommand("ablate", "Sweep one config key and report mIoU");
  add_common(abl, o);
  abl->add_option("--key", o.key, "Config key")->required();
  abl->add_option("--values", o.values, "Values to sweep")->required()->delimiter(',');
  abl->add_option("--kind", o.kind, "CAM kind: mt, mes or med (default from pipeline.mode)");
  abl->add_option("--out", o.out, "Output CSV path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  spdlog::set_level(o.verbose ? spdlog::level::debug : spdlog::level::warn);

  try {
    if (heat->parsed()) {
      commands::cmd_heatmap(o.cam, o.channel, o.out);
      return 0;
    }
    require(o.manifest, "--manifest");
    const PipelineConfig cfg = resolve_config(o);
    const auto manifest = io::load_manifest(o.manifest);
    const auto kind = [&] {
      if (!o.kind.empty()) return commands::cam_kind_from_string(o.kind);
      return cfg.mode == PipelineMode::Trained ? commands::CamKind::Med : commands::CamKind::Mes;
    };
    if (build->parsed()) {
      require(o.cache_dir, "--cache-dir");
      commands::cmd_build_cache(manifest, cfg, o.cache_dir, std::cout);
    } else if (gen->parsed()) {
      require(o.out_dir, "--out-dir");
      commands::cmd_gen_cam(manifest, cfg, optional_path(o.cache_dir),
                            optional_path(o.adapter_dir), o.out_dir, o.jobs, std::cout);
    } else if (train->parsed()) {
      require(o.cache_dir, "--cache-dir");
      require(o.adapter_dir, "--adapter-dir");
      commands::cmd_train(manifest, cfg, o.cache_dir, o.adapter_dir, std::cout);
    } else if (ev->parsed()) {
      require(o.cam, "--cam");
      commands::cmd_eval(manifest, o.cam, kind(), cfg,
                         optional_path(o.out_dir), o.jobs, std::cout);
    } else if (abl->parsed()) {
      commands::cmd_ablate(manifest, cfg, o.key, o.values, kind(),
                           o.out, o.jobs, std::cout);
    }
  } catch (const Error& e) {
    std::cerr << "error [" << to_string(e.code()) << "]: " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
