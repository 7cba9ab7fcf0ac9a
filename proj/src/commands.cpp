#include "camforge/commands.hpp"

#include <charconv>
#include <cmath>
#include <exception>
#include <fstream>
#include <thread>

#include <spdlog/spdlog.h>

#include "camforge/cam.hpp"
#include "camforge/error.hpp"
#include "camforge/stages.hpp"
#include "camforge/tensor_io.hpp"

namespace camforge::commands {
namespace fs = std::filesystem;
namespace {

[[noreturn]] void rethrow_with_context(const std::string& context) {
  try {
    throw;
  } catch (const Error& e) {
    throw Error(e.code(), context + ": " + e.what());
  }
}

std::string format_double(double v) {
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) fail(ErrorCode::IoFailure, "cannot write " + path.string());
}

fs::path cam_path(const fs::path& dir, const std::string& id, CamKind kind) {
  return dir / (file_stem(id) + "." + to_string(kind) + ".tensor");
}

}  // namespace

std::string to_string(CamKind kind) {
  switch (kind) {
    case CamKind::Mt: return "mt";
    case CamKind::Mes: return "mes";
    case CamKind::Med: return "med";
  }
  return "mt";
}

CamKind cam_kind_from_string(const std::string& s) {
  if (s == "mt") return CamKind::Mt;
  if (s == "mes") return CamKind::Mes;
  if (s == "med") return CamKind::Med;
  fail(ErrorCode::UsageError, "CAM kind must be mt, mes or med (got '" + s + "')");
}

std::string file_stem(const std::string& id) {
  std::string out = id;
  for (char& c : out)
    if (c == '/' || c == '\\' || c == ':') c = '_';
  return out;
}

void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
  jobs = std::max<std::size_t>(1, std::min(jobs, n));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::jthread> workers;
  for (std::size_t w = 0; w < jobs; ++w) {
    workers.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += jobs) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  workers.clear();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

cache::CacheModel build_cache(const io::Manifest& manifest, const PipelineConfig& cfg) {
  cfg.validate();
  if (!manifest.cache_samples || manifest.cache_samples->empty())
    fail(ErrorCode::UsageError, "manifest has no cache_samples");
  const Matrix text = io::load_text_embeddings(manifest);
  cache::PrototypeSet protos(manifest.num_classes, manifest.feature_dim);
  for (const auto& rec : *manifest.cache_samples) {
    try {
      const auto sample = io::load_sample(rec, manifest);
      const auto stage = run_static_stage(sample, text, nullptr, cfg.vce, cfg.retrieval);
      const auto mask = cam::cam_to_mask(stage.m_t, sample.image_labels, cfg.bg_threshold);
      const std::size_t cls = *sample.image_labels.begin();
      try {
        protos.add_foreground(cls, cache::mask_average_pool(stage.p_e, mask,
                                                            cache::PoolTarget::Foreground, cls));
      } catch (const Error& e) {
        if (e.code() != ErrorCode::EmptyRegion) throw;
        spdlog::debug("cache sample '{}' has no foreground prototype", rec.id);
      }
      try {
        protos.add_background(
            cache::mask_average_pool(stage.p_e, mask, cache::PoolTarget::Background));
      } catch (const Error& e) {
        if (e.code() != ErrorCode::EmptyRegion) throw;
        spdlog::debug("cache sample '{}' has no background prototype", rec.id);
      }
    } catch (const Error&) {
      rethrow_with_context("cache sample '" + rec.id + "'");
    }
  }
  const auto keys = cache::build_keys(protos, cfg.retrieval);
  const auto v_pos = cache::build_values(keys.positive, keys.positive_class, text);
  const auto v_neg = cache::background_values(keys.negative.rows(), manifest.num_classes);
  return cache::assemble_cache(keys.positive, v_pos, keys.positive_class, keys.negative, v_neg);
}

SampleCams generate_sample_cams(const io::SampleTensors& sample, const Matrix& text,
                                const PipelineConfig& cfg, const cache::CacheModel* cache,
                                const adapter::AdapterState* adapter) {
  auto stage = run_static_stage(sample, text, cache, cfg.vce, cfg.retrieval);
  SampleCams out{std::move(stage.m_t), std::move(stage.m_es), std::nullopt};
  if (adapter != nullptr) {
    const auto fwd = adapter::adapter_forward(*adapter, stage.p_e);
    out.m_ed = adapter::fuse_dynamic(out.m_t, fwd.logits, sample.image_labels, cfg.retrieval.beta);
  }
  return out;
}

EvalResult evaluate(const io::Manifest& manifest, const PipelineConfig& cfg, CamKind kind,
                    const cache::CacheModel* cache, const adapter::AdapterState* adapter,
                    std::size_t jobs) {
  cfg.validate();
  if (kind == CamKind::Mes && cache == nullptr) fail(ErrorCode::UsageError, "mes CAMs need a cache");
  if (kind == CamKind::Med && adapter == nullptr) fail(ErrorCode::UsageError, "med CAMs need an adapter");
  const Matrix text = io::load_text_embeddings(manifest);
  const std::size_t n = manifest.samples.size();
  std::vector<eval::ConfusionTally> tallies(n, eval::ConfusionTally(manifest.num_classes));
  parallel_for(n, jobs, [&](std::size_t i) {
    const auto& rec = manifest.samples[i];
    try {
      const auto gt = io::load_ground_truth(rec, manifest);
      const auto sample = io::load_sample(rec, manifest);
      const auto cams = generate_sample_cams(sample, text, cfg, kind == CamKind::Mes ? cache : nullptr,
                                             kind == CamKind::Med ? adapter : nullptr);
      const Cam& c = kind == CamKind::Mt ? cams.m_t : kind == CamKind::Mes ? *cams.m_es : *cams.m_ed;
      tallies[i].accumulate(cam::cam_to_mask(c, rec.image_labels, cfg.bg_threshold), gt);
    } catch (const Error&) {
      rethrow_with_context("sample '" + rec.id + "'");
    }
  });
  EvalResult res{eval::ConfusionTally(manifest.num_classes), eval::ConfusionTally(manifest.num_classes),
                 eval::ConfusionTally(manifest.num_classes)};
  for (std::size_t i = 0; i < n; ++i) {
    res.overall.merge(tallies[i]);
    const auto labels = manifest.samples[i].image_labels.size();
    if (labels == 1) res.single_class.merge(tallies[i]);
    if (labels >= 2) res.co_occurrence.merge(tallies[i]);
  }
  return res;
}

std::string cache_sidecar(const cache::CacheModel& cache, const PipelineConfig& cfg) {
  nlohmann::json j = {{"num_classes", cache.num_classes},
                      {"positive_rows", cache.positive_rows},
                      {"negative_rows", cache.negative_rows},
                      {"feature_dim", cache.dim()},
                      {"entries_per_class", cfg.retrieval.centroids},
                      {"config_hash", cfg.hash()},
                      {"config", cfg.to_text()}};
  return j.dump(2) + "\n";
}

std::string adapter_sidecar(const adapter::AdapterState& state, const PipelineConfig& cfg) {
  nlohmann::json j = {{"step_count", state.step_count},
                      {"eta", state.eta},
                      {"hidden", state.hidden()},
                      {"outputs", state.outputs()},
                      {"config_hash", cfg.hash()},
                      {"config", cfg.to_text()}};
  return j.dump(2) + "\n";
}

PipelineConfig config_from_sidecar(const fs::path& sidecar) {
  std::ifstream in(sidecar);
  if (!in) fail(ErrorCode::IoFailure, "cannot open " + sidecar.string());
  try {
    return parse_config(nlohmann::json::parse(in).at("config").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::SchemaError, sidecar.string() + ": " + e.what());
  }
}

void cmd_build_cache(const io::Manifest& manifest, const PipelineConfig& cfg,
                     const fs::path& cache_dir, std::ostream& log) {
  const auto cache = build_cache(manifest, cfg);
  cache::save_cache(cache, cache_dir, cache_sidecar(cache, cfg));
  log << "cache rows: " << cache.rows() << " (positive " << cache.positive_rows << ", negative "
      << cache.negative_rows << ")\n";
}

void cmd_gen_cam(const io::Manifest& manifest, const PipelineConfig& cfg,
                 const std::optional<fs::path>& cache_dir, const std::optional<fs::path>& adapter_dir,
                 const fs::path& out_dir, std::size_t jobs, std::ostream& log) {
  cfg.validate();
  std::optional<cache::CacheModel> cache;
  std::optional<adapter::AdapterState> adapter;
  if (cache_dir) cache = cache::load_cache(*cache_dir);
  if (adapter_dir) adapter = adapter::load_adapter(*adapter_dir);
  const Matrix text = io::load_text_embeddings(manifest);
  fs::create_directories(out_dir);
  parallel_for(manifest.samples.size(), jobs, [&](std::size_t i) {
    const auto& rec = manifest.samples[i];
    try {
      const auto sample = io::load_sample(rec, manifest);
      const auto cams = generate_sample_cams(sample, text, cfg, cache ? &*cache : nullptr,
                                             adapter ? &*adapter : nullptr);
      io::write_tensor(io::tensor_from_cam(cams.m_t), cam_path(out_dir, rec.id, CamKind::Mt));
      if (cams.m_es) io::write_tensor(io::tensor_from_cam(*cams.m_es), cam_path(out_dir, rec.id, CamKind::Mes));
      if (cams.m_ed) io::write_tensor(io::tensor_from_cam(*cams.m_ed), cam_path(out_dir, rec.id, CamKind::Med));
    } catch (const Error&) {
      rethrow_with_context("sample '" + rec.id + "'");
    }
  });
  const std::size_t kinds = 1 + (cache ? 1 : 0) + (adapter ? 1 : 0);
  log << "wrote " << manifest.samples.size() * kinds << " CAM files for "
      << manifest.samples.size() << " samples\n";
}

void cmd_train(const io::Manifest& manifest, const PipelineConfig& cfg, const fs::path& cache_dir,
               const fs::path& adapter_dir, std::ostream& log) {
  cfg.validate();
  if (!fs::exists(cache_dir / "cache.json"))
    fail(ErrorCode::UsageError, "no cache at " + cache_dir.string() + "; run build-cache first");
  const auto cache = cache::load_cache(cache_dir);
  const auto result = adapter::train_adapter(manifest, cache, cfg.train, cfg.vce, cfg.retrieval,
                                             cfg.bg_threshold);
  adapter::save_adapter(result.state, adapter_dir, adapter_sidecar(result.state, cfg));
  std::string csv = "step,loss\n";
  for (std::size_t i = 0; i < result.loss_history.size(); ++i)
    csv += std::to_string(i + 1) + "," + format_double(result.loss_history[i]) + "\n";
  write_text(adapter_dir / "loss.csv", csv);
  log << "trained " << result.state.step_count << " steps";
  if (!result.loss_history.empty()) log << ", final loss " << result.loss_history.back();
  log << "\n";
}

nlohmann::json cmd_eval(const io::Manifest& manifest, const fs::path& cam_dir, CamKind kind,
                        const PipelineConfig& cfg, const std::optional<fs::path>& out_dir,
                        std::size_t jobs, std::ostream& log) {
  cfg.validate();
  const std::size_t n = manifest.samples.size();
  std::vector<eval::ConfusionTally> tallies(n, eval::ConfusionTally(manifest.num_classes));
  parallel_for(n, jobs, [&](std::size_t i) {
    const auto& rec = manifest.samples[i];
    try {
      const auto gt = io::load_ground_truth(rec, manifest);
      const auto cam = io::cam_from_tensor(io::load_tensor(cam_path(cam_dir, rec.id, kind)));
      if (cam.channels() != manifest.num_classes)
        fail(ErrorCode::ShapeMismatch, "CAM has " + std::to_string(cam.channels()) + " channels");
      tallies[i].accumulate(cam::cam_to_mask(cam, rec.image_labels, cfg.bg_threshold), gt);
    } catch (const Error&) {
      rethrow_with_context("sample '" + rec.id + "'");
    }
  });
  eval::ConfusionTally overall(manifest.num_classes), single(manifest.num_classes),
      multi(manifest.num_classes);
  for (std::size_t i = 0; i < n; ++i) {
    overall.merge(tallies[i]);
    const auto labels = manifest.samples[i].image_labels.size();
    if (labels == 1) single.merge(tallies[i]);
    if (labels >= 2) multi.merge(tallies[i]);
  }
  nlohmann::json report = {{"kind", to_string(kind)}};
  report["overall"] = eval::report_json(overall, manifest.class_names);
  const auto split = eval::split_by_cooccurrence(manifest);
  report["single_class"] = single.pixels() ? eval::report_json(single, manifest.class_names) : nullptr;
  report["co_occurrence"] = multi.pixels() ? eval::report_json(multi, manifest.class_names) : nullptr;
  report["single_class_ids"] = split.single_class;
  report["co_occurrence_ids"] = split.co_occurrence;

  log << "overall (" << to_string(kind) << ")\n" << eval::report_table(overall, manifest.class_names);
  if (single.pixels()) log << "\nsingle-class\n" << eval::report_table(single, manifest.class_names);
  if (multi.pixels()) log << "\nco-occurrence\n" << eval::report_table(multi, manifest.class_names);
  if (out_dir) {
    fs::create_directories(*out_dir);
    write_text(*out_dir / "report.json", report.dump(2) + "\n");
  }
  return report;
}

std::vector<unsigned char> encode_pgm(const Cam& cam, std::size_t channel) {
  if (channel >= cam.channels()) {
    fail(ErrorCode::ChannelOutOfRange, "channel " + std::to_string(channel) + " of " +
                                           std::to_string(cam.channels()));
  }
  const std::string header = "P5\n" + std::to_string(cam.grid.width) + " " +
                             std::to_string(cam.grid.height) + "\n255\n";
  std::vector<unsigned char> out(header.begin(), header.end());
  for (std::size_t i = 0; i < cam.grid.patches(); ++i) {
    const double v = std::clamp(cam.data(i, channel), 0.0, 1.0);
    out.push_back(static_cast<unsigned char>(std::lround(255.0 * v)));
  }
  return out;
}

void cmd_heatmap(const fs::path& cam_file, std::size_t channel, const fs::path& out_path) {
  const auto cam = io::cam_from_tensor(io::load_tensor(cam_file, io::DType::Float32));
  const auto bytes = encode_pgm(cam, channel);
  std::ofstream out(out_path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::IoFailure, "cannot write " + out_path.string());
}

void cmd_ablate(const io::Manifest& manifest, const PipelineConfig& cfg, const std::string& key,
                const std::vector<std::string>& values, CamKind kind, const fs::path& out_csv,
                std::size_t jobs, std::ostream& log) {
  if (values.empty()) fail(ErrorCode::UsageError, "ablate needs at least one value");
  std::string csv = key + ",miou\n";
  for (const auto& value : values) {
    PipelineConfig run = cfg;
    apply_override(run, key + "=" + value);
    run.validate();
    std::optional<cache::CacheModel> cache;
    std::optional<adapter::AdapterState> adapter;
    if (kind != CamKind::Mt) cache = build_cache(manifest, run);
    if (kind == CamKind::Med) {
      adapter = adapter::train_adapter(manifest, *cache, run.train, run.vce, run.retrieval,
                                       run.bg_threshold)
                    .state;
    }
    const auto res = evaluate(manifest, run, kind, cache ? &*cache : nullptr,
                              adapter ? &*adapter : nullptr, jobs);
    const double m = eval::miou(res.overall).mean;
    csv += value + "," + format_double(m) + "\n";
    log << key << " = " << value << ": mIoU " << m << "\n";
  }
  if (out_csv.has_parent_path()) fs::create_directories(out_csv.parent_path());
  write_text(out_csv, csv);
}

}  // namespace camforge::commands
