#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "camforge/adapter.hpp"
#include "camforge/cam.hpp"
#include "camforge/error.hpp"
#include "oracles.hpp"
#include "synthetic.hpp"

using namespace camforge;
using namespace camforge::adapter;

namespace {

Matrix random_matrix(std::mt19937_64& rng, std::size_t r, std::size_t c, double sd = 1.0) {
  std::normal_distribution<double> g(0.0, sd);
  Matrix m(r, c);
  for (auto& v : m.values()) v = g(rng);
  return m;
}

Matrix unit_rows(Matrix m) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const double n = l2_norm(m.row(i));
    for (double& v : m.row(i)) v /= n;
  }
  return m;
}

oracle::Rows rows_of(const Matrix& m) {
  oracle::Rows out(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) out[i].assign(m.row(i).begin(), m.row(i).end());
  return out;
}

cache::CacheModel random_cache(std::mt19937_64& rng, std::size_t c, std::size_t e, std::size_t d) {
  const Matrix kp = unit_rows(random_matrix(rng, c * e, d));
  std::vector<std::size_t> cls;
  for (std::size_t i = 0; i < c * e; ++i) cls.push_back(i / e);
  const Matrix vp = cache::build_values(kp, cls, random_matrix(rng, d, c));
  return cache::assemble_cache(kp, vp, cls, unit_rows(random_matrix(rng, e, d)),
                               cache::background_values(e, c));
}

/// State with every parameter perturbed so gradients are generic.
AdapterState random_state(std::mt19937_64& rng, std::size_t c, std::size_t d, std::size_t prompts) {
  TrainConfig cfg;
  cfg.prompts = prompts;
  cfg.seed = rng();
  auto s = init_adapter(random_cache(rng, c, 2, d), cfg, 1.0 + double(rng() % 40) / 10.0);
  std::normal_distribution<double> g(0.0, 0.3);
  for (double& v : s.w1.values()) v += g(rng);
  for (double& v : s.w2.values()) v += g(rng);
  for (double& v : s.b1) v = g(rng);
  for (double& v : s.b2) v = g(rng);
  return s;
}

PseudoMask random_target(std::mt19937_64& rng, Grid g, std::size_t c) {
  PseudoMask m{g, std::vector<std::uint32_t>(g.patches())};
  for (auto& l : m.labels) l = std::uint32_t(rng() % (c + 1));
  return m;
}

double loss_at(const AdapterState& s, const FeatureMap& p, const PseudoMask& t) {
  return adapter_loss(adapter_forward(s, p).logits, t).loss;
}

// Components under 1e-6 are below what a 1e-4 central difference resolves.
double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6}); }

/// Worst relative error between analytic and central-difference gradients over every parameter.
double worst_gradient_error(AdapterState s, const FeatureMap& q, const PseudoMask& t, double h) {
  const auto fwd = adapter_forward(s, q);
  const auto g = adapter_backward(s, fwd, adapter_loss(fwd.logits, t).grad);
  double worst = 0.0;
  auto check = [&](double& param, double analytic) {
    const double keep = param;
    param = keep + h;
    const double up = loss_at(s, q, t);
    param = keep - h;
    const double down = loss_at(s, q, t);
    param = keep;
    worst = std::max(worst, rel_err(analytic, (up - down) / (2 * h)));
  };
  for (std::size_t i = 0; i < s.w1.size(); ++i) check(s.w1.values()[i], g.w1.values()[i]);
  for (std::size_t i = 0; i < s.w2.size(); ++i) check(s.w2.values()[i], g.w2.values()[i]);
  for (std::size_t i = 0; i < s.b1.size(); ++i) check(s.b1[i], g.b1[i]);
  for (std::size_t i = 0; i < s.b2.size(); ++i) check(s.b2[i], g.b2[i]);
  return worst;
}

}  // namespace

TEST(Adapter, Defaults) {
  const TrainConfig cfg;
  EXPECT_DOUBLE_EQ(cfg.lr, 2e-4);
  EXPECT_DOUBLE_EQ(cfg.weight_decay, 1e-2);
  EXPECT_DOUBLE_EQ(cfg.gamma, 0.1);
  EXPECT_EQ(cfg.prompts, 92u);
}

TEST(Adapter, InitShapes) {
  std::mt19937_64 rng(1);
  const auto cache = random_cache(rng, 3, 2, 5);
  TrainConfig cfg;
  cfg.prompts = 7;
  const auto s = init_adapter(cache, cfg, 5.0);
  EXPECT_EQ(s.hidden(), cache.rows() + 7);
  EXPECT_EQ(s.w1.cols(), 5u);
  EXPECT_EQ(s.outputs(), 4u);
  for (std::size_t i = 0; i < cache.rows(); ++i)
    for (std::size_t k = 0; k < 5; ++k) EXPECT_EQ(s.w1(i, k), cache.keys(i, k));
  for (std::size_t i = cache.rows(); i < s.hidden(); ++i)
    for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(s.w2(i, k), 0.0);
  EXPECT_EQ(s.b1, std::vector<double>(s.hidden(), 0.0));
  EXPECT_EQ(s.b2, std::vector<double>(4, 0.0));
}

TEST(Adapter, InitReproducesStaticRetrieval) {
  std::mt19937_64 rng(2);
  for (std::size_t prompts : {0u, 92u}) {
    for (int trial = 0; trial < 10; ++trial) {
      const auto cache = random_cache(rng, 3, 2, 6);
      TrainConfig cfg;
      cfg.prompts = prompts;
      const auto s = init_adapter(cache, cfg, 5.0);
      const FeatureMap q{{3, 3}, random_matrix(rng, 9, 6)};
      const auto got = adapter_forward(s, q).logits;
      const auto want = oracle::retrieval_scores(rows_of(q.data), rows_of(cache.keys), rows_of(cache.values), 5.0);
      for (std::size_t i = 0; i < 9; ++i)
        for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(got(i, c), want[i][c], 1e-6);
    }
  }
}

TEST(Adapter, LossMatchesScalarOracle) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const auto s = random_state(rng, 2, 4, 3);
    const FeatureMap q{{2, 3}, random_matrix(rng, 6, 4)};
    const auto t = random_target(rng, q.grid, 2);
    const double want = oracle::adapter_loss(rows_of(q.data), rows_of(s.w1), s.b1, rows_of(s.w2), s.b2, s.eta, t.labels);
    EXPECT_NEAR(loss_at(s, q, t), want, 1e-9);
  }
}

TEST(Adapter, UniformLogitsGiveLogK) {
  const Matrix logits(4, 5, 0.7);
  const PseudoMask t{{2, 2}, {0, 1, 2, 4}};
  const auto r = adapter_loss(logits, t);
  EXPECT_NEAR(r.loss, std::log(5.0), 1e-12);
  EXPECT_NEAR(r.grad(0, 4), (0.2 - 1.0) / 4, 1e-12);
  EXPECT_NEAR(r.grad(1, 0), (0.2 - 1.0) / 4, 1e-12);
  EXPECT_NEAR(r.grad(1, 1), 0.2 / 4, 1e-12);
  const PseudoMask bad{{2, 2}, {0, 1, 2, 5}};
  EXPECT_THROW(adapter_loss(logits, bad), Error);
}

TEST(Adapter, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto s = random_state(rng, 2, 3, 2);
    const FeatureMap q{{2, 2}, random_matrix(rng, 4, 3)};
    EXPECT_LT(worst_gradient_error(s, q, random_target(rng, q.grid, 2), 1e-4), 1e-4) << "trial " << trial;
  }
}

TEST(Adapter, GradientsOnSmallestInstance) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    auto s = random_state(rng, 1, 3, 0);
    ASSERT_EQ(s.hidden(), 4u);
    const FeatureMap q{{1, 2}, random_matrix(rng, 2, 3)};
    EXPECT_LT(worst_gradient_error(s, q, random_target(rng, q.grid, 1), 1e-4), 1e-4);
  }
}

TEST(Adapter, AdamWMatchesScalarReference) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> g(0.0, 1.0);
  TrainConfig cfg;
  cfg.lr = 1e-2;
  std::vector<double> param(6), ref(6);
  for (std::size_t i = 0; i < 6; ++i) ref[i] = param[i] = g(rng);
  std::vector<oracle::ScalarAdam> scalar(6);
  Moments mom(6);
  for (std::uint64_t t = 1; t <= 25; ++t) {
    std::vector<double> grad(6);
    for (double& v : grad) v = g(rng);
    adamw_update(param, grad, mom, t, cfg);
    for (std::size_t i = 0; i < 6; ++i)
      ref[i] = scalar[i].step(ref[i], grad[i], t, cfg.lr, cfg.weight_decay, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(param[i], ref[i], 1e-12);
  }
}

TEST(Adapter, FirstAdamStepMovesByLearningRate) {
  TrainConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.0;
  std::vector<double> p = {1.0, -2.0}, grad = {3.0, -0.5};
  Moments m(2);
  adamw_update(p, grad, m, 1, cfg);
  EXPECT_NEAR(p[0], 0.9, 1e-7);
  EXPECT_NEAR(p[1], -1.9, 1e-7);
}

TEST(Adapter, ZeroLearningRateKeepsParameters) {
  std::mt19937_64 rng(6);
  auto s = random_state(rng, 2, 3, 2);
  const auto before = s;
  TrainConfig cfg;
  cfg.lr = 0.0;
  const FeatureMap q{{2, 2}, random_matrix(rng, 4, 3)};
  const auto fwd = adapter_forward(s, q);
  adamw_step(s, adapter_backward(s, fwd, adapter_loss(fwd.logits, random_target(rng, q.grid, 2)).grad), cfg);
  EXPECT_EQ(s.w1, before.w1);
  EXPECT_EQ(s.w2, before.w2);
  EXPECT_EQ(s.b1, before.b1);
  EXPECT_EQ(s.step_count, 1u);
}

TEST(Adapter, FuseDynamicBetaZeroIsCam) {
  std::mt19937_64 rng(7);
  const FeatureMap q{{3, 3}, random_matrix(rng, 9, 4)};
  const LabelSet labels = {0, 1};
  const Cam m_t = cam::generate_patch_text_cam(q, random_matrix(rng, 4, 3), labels);
  const auto out = fuse_dynamic(m_t, random_matrix(rng, 9, 4), labels, 0.0);
  for (std::size_t i = 0; i < out.data.size(); ++i) EXPECT_NEAR(out.data.values()[i], m_t.data.values()[i], 1e-12);
  EXPECT_THROW(fuse_dynamic(m_t, Matrix(9, 3), labels, 0.5), Error);
}

TEST(Adapter, FuseDynamicAtInitMatchesUngatedStaticFusion) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    const auto cache = random_cache(rng, 3, 2, 5);
    const auto s = init_adapter(cache, TrainConfig{}, 5.0);
    const FeatureMap q{{3, 3}, random_matrix(rng, 9, 5)};
    const LabelSet labels = {0, 2};
    const Cam m_t = cam::generate_patch_text_cam(q, random_matrix(rng, 5, 3), labels);
    cache::RetrievalConfig rc;
    rc.neg_mode = cache::NegMode::None;
    const auto want = cache::fuse_static(m_t, cache::static_retrieve(q, cache, rc, labels), rc, labels);
    const auto got = fuse_dynamic(m_t, adapter_forward(s, q).logits, labels, rc.beta);
    for (std::size_t i = 0; i < got.data.size(); ++i) EXPECT_NEAR(got.data.values()[i], want.data.values()[i], 1e-9);
  }
}

TEST(Adapter, TrainingIsDeterministicAndZeroStepsIsInit) {
  synth::SyntheticSpec spec;
  spec.samples = 4;
  spec.noise = 0.3;
  const auto ds = synth::gen_synthetic(spec, synth::scratch_dir("adapter_train"));
  const attn::VceConfig vce;
  const cache::RetrievalConfig rc;
  std::mt19937_64 rng(9);
  const auto cache = random_cache(rng, spec.classes, 2, spec.dim);
  TrainConfig tc;
  tc.iterations = 0;
  const auto zero = train_adapter(ds.manifest, cache, tc, vce, rc, 0.45);
  EXPECT_EQ(zero.state, init_adapter(cache, tc, rc.eta));
  EXPECT_TRUE(zero.loss_history.empty());

  tc.iterations = 6;
  tc.lr = 1e-2;
  const auto a = train_adapter(ds.manifest, cache, tc, vce, rc, 0.45);
  const auto b = train_adapter(ds.manifest, cache, tc, vce, rc, 0.45);
  EXPECT_EQ(a.state, b.state);
  EXPECT_EQ(a.loss_history, b.loss_history);
  EXPECT_EQ(a.loss_history.size(), 6u);
  EXPECT_EQ(a.state.step_count, 6u);
  EXPECT_NE(a.state.w2, zero.state.w2);
}

TEST(Adapter, SaveLoadRoundTrip) {
  std::mt19937_64 rng(10);
  const auto s = random_state(rng, 2, 3, 4);
  const auto dir = synth::scratch_dir("adapter_roundtrip");
  nlohmann::json side = {{"eta", s.eta}, {"step_count", 17}};
  save_adapter(s, dir, side.dump());
  const auto back = load_adapter(dir);
  EXPECT_EQ(back.step_count, 17u);
  EXPECT_EQ(back.eta, s.eta);
  ASSERT_EQ(back.w1.rows(), s.w1.rows());
  for (std::size_t i = 0; i < s.w1.size(); ++i) EXPECT_EQ(back.w1.values()[i], double(float(s.w1.values()[i])));
  for (std::size_t i = 0; i < s.b2.size(); ++i) EXPECT_EQ(back.b2[i], double(float(s.b2[i])));
  std::filesystem::remove(dir / "b1.tensor");
  EXPECT_THROW(load_adapter(dir), Error);
}
