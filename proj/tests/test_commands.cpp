#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

#include "camforge/commands.hpp"
#include "camforge/error.hpp"
#include "camforge/tensor_io.hpp"
#include "synthetic.hpp"

using namespace camforge;
using namespace camforge::commands;
namespace fs = std::filesystem;

namespace {

synth::SyntheticDataset small_dataset(const std::string& name, double noise = 0.2) {
  synth::SyntheticSpec spec;
  spec.classes = 2;
  spec.samples = 4;
  spec.cache_per_class = 2;
  spec.noise = noise;
  return synth::gen_synthetic(spec, synth::scratch_dir(name));
}

PipelineConfig small_config() {
  PipelineConfig cfg;
  cfg.retrieval.centroids = 1;
  cfg.train.iterations = 3;
  cfg.train.prompts = 4;
  return cfg;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(CAMFORGE_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

/// Every regular file under `dir`, relative path to contents.
std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = slurp(e.path());
  return out;
}

}  // namespace

TEST(Commands, KindNames) {
  for (auto k : {CamKind::Mt, CamKind::Mes, CamKind::Med}) EXPECT_EQ(cam_kind_from_string(to_string(k)), k);
  EXPECT_THROW(cam_kind_from_string("cam"), Error);
  EXPECT_EQ(file_stem("a/b\\c:d"), "a_b_c_d");
}

TEST(Commands, ParallelForReportsLowestFailure) {
  std::vector<int> hit(20, 0);
  parallel_for(20, 4, [&](std::size_t i) { hit[i] = 1; });
  EXPECT_EQ(hit, std::vector<int>(20, 1));
  try {
    parallel_for(10, 3, [](std::size_t i) {
      if (i == 7 || i == 4) fail(ErrorCode::InvalidArgument, "index " + std::to_string(i));
    });
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("index 4"), std::string::npos);
  }
}

TEST(Commands, BuildCacheRowCount) {
  const auto ds = small_dataset("cmd_cache");
  const auto cache = build_cache(ds.manifest, small_config());
  EXPECT_EQ(cache.rows(), 3u);
  EXPECT_EQ(cache.positive_rows, 2u);
  EXPECT_EQ(cache.negative_rows, 1u);
  EXPECT_EQ(cache.provenance, (std::vector<std::uint32_t>{0, 1, 2}));

  auto no_cache = ds.manifest;
  no_cache.cache_samples.reset();
  try {
    build_cache(no_cache, small_config());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::UsageError);
  }
}

TEST(Commands, SidecarEchoesConfig) {
  const auto ds = small_dataset("cmd_sidecar");
  auto cfg = small_config();
  cfg.retrieval.beta = 0.3;
  const auto dir = synth::scratch_dir("cmd_sidecar_out");
  std::ostringstream log;
  cmd_build_cache(ds.manifest, cfg, dir, log);
  EXPECT_EQ(log.str(), "cache rows: 3 (positive 2, negative 1)\n");
  EXPECT_EQ(config_from_sidecar(dir / "cache.json"), cfg);
  const auto side = nlohmann::json::parse(slurp(dir / "cache.json"));
  EXPECT_EQ(side["config_hash"], cfg.hash());
  EXPECT_EQ(side["positive_rows"], 2);
}

TEST(Commands, PipelineWritesEveryKind) {
  const auto ds = small_dataset("cmd_pipeline");
  const auto cfg = small_config();
  const auto root = synth::scratch_dir("cmd_pipeline_out");
  std::ostringstream log;
  cmd_build_cache(ds.manifest, cfg, root / "cache", log);
  cmd_train(ds.manifest, cfg, root / "cache", root / "adapter", log);
  EXPECT_EQ(adapter::load_adapter(root / "adapter").step_count, 3u);

  cmd_gen_cam(ds.manifest, cfg, std::nullopt, std::nullopt, root / "mt_only", 2, log);
  EXPECT_EQ(std::distance(fs::directory_iterator(root / "mt_only"), fs::directory_iterator{}), 4);
  cmd_gen_cam(ds.manifest, cfg, root / "cache", root / "adapter", root / "cams", 2, log);
  EXPECT_EQ(std::distance(fs::directory_iterator(root / "cams"), fs::directory_iterator{}), 12);
  EXPECT_NE(log.str().find("wrote 12 CAM files for 4 samples"), std::string::npos);

  const auto loss = slurp(root / "adapter" / "loss.csv");
  EXPECT_EQ(loss.rfind("step,loss\n1,", 0), 0u);
  EXPECT_EQ(std::count(loss.begin(), loss.end(), '\n'), 4);

  for (auto kind : {CamKind::Mt, CamKind::Mes, CamKind::Med}) {
    const auto report = cmd_eval(ds.manifest, root / "cams", kind, cfg, root / "report", 2, log);
    EXPECT_EQ(report["kind"], to_string(kind));
    EXPECT_GE(report["overall"]["miou"].get<double>(), 0.0);
  }
  EXPECT_TRUE(fs::exists(root / "report" / "report.json"));
  EXPECT_THROW(cmd_eval(ds.manifest, root / "mt_only", CamKind::Mes, cfg, std::nullopt, 1, log), Error);
}

TEST(Commands, TrainNeedsCache) {
  const auto ds = small_dataset("cmd_train_nocache");
  std::ostringstream log;
  const auto root = synth::scratch_dir("cmd_train_nocache_out");
  try {
    cmd_train(ds.manifest, small_config(), root / "cache", root / "adapter", log);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::UsageError);
  }
}

TEST(Commands, ZeroStepTrainingKeepsInitialState) {
  const auto ds = small_dataset("cmd_zero_train");
  auto cfg = small_config();
  cfg.train.iterations = 0;
  const auto root = synth::scratch_dir("cmd_zero_train_out");
  std::ostringstream log;
  cmd_build_cache(ds.manifest, cfg, root / "cache", log);
  cmd_train(ds.manifest, cfg, root / "cache", root / "adapter", log);
  const auto stored = adapter::load_adapter(root / "adapter");
  const auto init = adapter::init_adapter(cache::load_cache(root / "cache"), cfg.train, cfg.retrieval.eta);
  ASSERT_EQ(stored.w1.size(), init.w1.size());
  for (std::size_t i = 0; i < init.w1.size(); ++i) EXPECT_EQ(stored.w1.values()[i], double(float(init.w1.values()[i])));
  EXPECT_EQ(slurp(root / "adapter" / "loss.csv"), "step,loss\n");
}

TEST(Commands, PerfectCamsScoreOne) {
  const auto ds = small_dataset("cmd_perfect", 0.0);
  const auto dir = synth::scratch_dir("cmd_perfect_cams");
  for (std::size_t s = 0; s < ds.manifest.samples.size(); ++s) {
    const auto& rec = ds.manifest.samples[s];
    const auto& gt = ds.masks[s];
    Cam cam{gt.grid, Matrix(gt.grid.patches(), 2, 0.0), false};
    for (std::size_t i = 0; i < gt.labels.size(); ++i)
      if (gt.labels[i] > 0) cam.data(i, gt.labels[i] - 1) = 1.0;
    io::write_tensor(io::tensor_from_cam(cam), dir / (file_stem(rec.id) + ".mt.tensor"));
  }
  std::ostringstream log;
  const auto report = cmd_eval(ds.manifest, dir, CamKind::Mt, small_config(), std::nullopt, 1, log);
  EXPECT_DOUBLE_EQ(report["overall"]["miou"].get<double>(), 1.0);
}

TEST(Commands, PgmBytes) {
  Cam cam{{2, 3}, Matrix(6, 2, {0.0, 1.0, 0.5, 1.0, 1.0, 1.0, -1.0, 1.0, 2.0, 1.0, 0.25, 1.0}), false};
  const auto bytes = encode_pgm(cam, 0);
  const std::string header = "P5\n3 2\n255\n";
  ASSERT_EQ(bytes.size(), header.size() + 6);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + long(header.size())), header);
  EXPECT_EQ(std::vector<unsigned char>(bytes.begin() + long(header.size()), bytes.end()),
            (std::vector<unsigned char>{0, 128, 255, 0, 255, 64}));
  try {
    encode_pgm(cam, 2);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ChannelOutOfRange);
  }
}

TEST(Commands, AblateWritesOneRowPerValue) {
  const auto ds = small_dataset("cmd_ablate");
  const auto out = synth::scratch_dir("cmd_ablate_out") / "sweep.csv";
  std::ostringstream log;
  cmd_ablate(ds.manifest, small_config(), "retrieval.beta", {"0", "0.5"}, CamKind::Mes, out, 1, log);
  const auto csv = slurp(out);
  EXPECT_EQ(csv.rfind("retrieval.beta,miou\n0,", 0), 0u);
  EXPECT_NE(csv.find("\n0.5,"), std::string::npos);
}

TEST(Commands, CliIsDeterministic) {
  const auto ds = small_dataset("cli_det");
  const std::string m = "--manifest " + ds.manifest_path.string() + " --set retrieval.centroids=1 --set train.iterations=3 --set train.prompts=4";
  std::vector<std::map<std::string, std::string>> runs;
  for (int r = 0; r < 2; ++r) {
    const auto root = synth::scratch_dir("cli_det_run" + std::to_string(r));
    const std::string d = root.string();
    ASSERT_EQ(run_cli("build-cache " + m + " --cache-dir " + d + "/cache"), 0);
    ASSERT_EQ(run_cli("train " + m + " --cache-dir " + d + "/cache --adapter-dir " + d + "/adapter"), 0);
    ASSERT_EQ(run_cli("gen-cam " + m + " --jobs " + std::to_string(1 + 3 * r) + " --cache-dir " + d +
                      "/cache --adapter-dir " + d + "/adapter --out-dir " + d + "/cams"), 0);
    ASSERT_EQ(run_cli("eval " + m + " --cam " + d + "/cams --kind med --out-dir " + d + "/report"), 0);
    ASSERT_EQ(run_cli("heatmap --cam " + d + "/cams/s000.mes.tensor --channel 0 --out " + d + "/h.pgm"), 0);
    ASSERT_EQ(run_cli("ablate " + m + " --key beta --values 0,0.5 --kind mes --out " + d + "/ablate.csv"), 0);
    runs.push_back(snapshot(root));
  }
  EXPECT_GE(runs[0].size(), 20u);
  EXPECT_EQ(runs[0], runs[1]);
}

TEST(Commands, CliExitCodes) {
  const auto ds = small_dataset("cli_exit");
  const auto out = synth::scratch_dir("cli_exit_out");
  EXPECT_EQ(run_cli("--help"), 0);
  EXPECT_EQ(run_cli("no-such-command"), 2);
  EXPECT_EQ(run_cli("eval --manifest " + ds.manifest_path.string() + " --cam " + out.string() + " --kind xyz"), 2);
  EXPECT_EQ(run_cli("build-cache --manifest " + ds.manifest_path.string() + " --set nosuch=1 --cache-dir " + out.string()), 2);
  EXPECT_EQ(run_cli("build-cache --manifest " + (out / "missing.json").string() + " --cache-dir " + out.string()), 3);
  EXPECT_EQ(run_cli("heatmap --cam " + (out / "missing.tensor").string() + " --channel 0 --out " + (out / "h.pgm").string()), 3);
}
