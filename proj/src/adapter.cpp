#include "camforge/adapter.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "camforge/cam.hpp"
#include "camforge/error.hpp"
#include "camforge/stages.hpp"
#include "camforge/tensor_io.hpp"
#include "json.hpp"

namespace camforge::adapter {

void TrainConfig::validate() const {
  if (!(lr >= 0.0) || !std::isfinite(lr)) fail(ErrorCode::InvalidArgument, "train.lr must be >= 0");
  if (!(weight_decay >= 0.0)) fail(ErrorCode::InvalidArgument, "train.weight_decay must be >= 0");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0))
    fail(ErrorCode::InvalidArgument, "train.adam_beta1/adam_beta2 must lie in [0, 1)");
  if (!(adam_eps > 0.0)) fail(ErrorCode::InvalidArgument, "train.adam_eps must be > 0");
  if (!(gamma >= 0.0)) fail(ErrorCode::InvalidArgument, "train.gamma must be >= 0");
  if (!(prompt_init_scale >= 0.0))
    fail(ErrorCode::InvalidArgument, "train.prompt_init_scale must be >= 0");
}

AdapterState init_adapter(const cache::CacheModel& cache, const TrainConfig& cfg, double eta) {
  cfg.validate();
  const std::size_t u = cache.rows();
  const std::size_t m = u + cfg.prompts;
  const std::size_t d = cache.dim();
  const std::size_t k = cache.values.cols();
  AdapterState s;
  s.w1 = Matrix(m, d);
  s.w2 = Matrix(m, k);
  std::copy(cache.keys.values().begin(), cache.keys.values().end(), s.w1.values().begin());
  std::copy(cache.values.values().begin(), cache.values.values().end(), s.w2.values().begin());
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, cfg.prompt_init_scale);
  for (std::size_t i = u; i < m; ++i)
    for (double& v : s.w1.row(i)) v = cfg.prompt_init_scale > 0.0 ? normal(rng) : 0.0;
  s.b1.assign(m, 0.0);
  s.b2.assign(k, 0.0);
  s.eta = eta;
  s.m_w1 = Moments(s.w1.size());
  s.m_b1 = Moments(m);
  s.m_w2 = Moments(s.w2.size());
  s.m_b2 = Moments(k);
  return s;
}

ForwardPass adapter_forward(const AdapterState& state, const FeatureMap& p_e) {
  if (p_e.dim() != state.w1.cols()) {
    fail(ErrorCode::ShapeMismatch, "adapter expects dim " + std::to_string(state.w1.cols()) +
                                       ", features have " + std::to_string(p_e.dim()));
  }
  ForwardPass f;
  f.queries = p_e.data;
  for (std::size_t i = 0; i < f.queries.rows(); ++i) {
    auto r = f.queries.row(i);
    const double n = l2_norm(r);
    if (n == 0.0) fail(ErrorCode::ZeroNormVector, "query patch " + std::to_string(i));
    for (double& v : r) v /= n;
  }
  f.hidden = matmul_transposed(f.queries, state.w1);
  for (std::size_t i = 0; i < f.hidden.rows(); ++i) {
    auto h = f.hidden.row(i);
    for (std::size_t j = 0; j < h.size(); ++j) h[j] = cache::affinity_activation(h[j] + state.b1[j], state.eta);
  }
  f.logits = matmul(f.hidden, state.w2);
  for (std::size_t i = 0; i < f.logits.rows(); ++i) {
    auto r = f.logits.row(i);
    for (std::size_t c = 0; c < r.size(); ++c) r[c] += state.b2[c];
  }
  return f;
}

LossResult adapter_loss(const Matrix& logits, const PseudoMask& target) {
  const std::size_t n = logits.rows();
  const std::size_t k = logits.cols();
  if (target.labels.size() != n) fail(ErrorCode::ShapeMismatch, "adapter_loss: target size");
  if (k < 2) fail(ErrorCode::ShapeMismatch, "adapter_loss: need at least two channels");
  const std::size_t bg = k - 1;
  LossResult res{0.0, Matrix(n, k)};
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint32_t label = target.labels[i];
    if (label > bg) fail(ErrorCode::LabelOutOfRange, "target label " + std::to_string(label));
    const std::size_t t = label == 0 ? bg : label - 1;
    const auto r = logits.row(i);
    const double peak = *std::max_element(r.begin(), r.end());
    double z = 0.0;
    for (double v : r) z += std::exp(v - peak);
    const double log_z = peak + std::log(z);
    res.loss += log_z - r[t];
    auto g = res.grad.row(i);
    for (std::size_t c = 0; c < k; ++c) g[c] = std::exp(r[c] - log_z);
    g[t] -= 1.0;
  }
  const double inv = 1.0 / static_cast<double>(n);
  res.loss *= inv;
  for (double& v : res.grad.values()) v *= inv;
  return res;
}

Gradients adapter_backward(const AdapterState& state, const ForwardPass& fwd, const Matrix& dlogits) {
  const std::size_t n = fwd.hidden.rows();
  const std::size_t m = state.hidden();
  const std::size_t k = state.outputs();
  if (dlogits.rows() != n || dlogits.cols() != k)
    fail(ErrorCode::ShapeMismatch, "adapter_backward: dlogits shape");
  Gradients g;
  g.w2 = matmul(fwd.hidden.transposed(), dlogits);
  g.b2.assign(k, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < k; ++c) g.b2[c] += dlogits(i, c);

  // dz = (dlogits · W2ᵀ) ⊙ σ'(z), σ' = η σ
  Matrix dz = matmul_transposed(dlogits, state.w2);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) dz(i, j) *= state.eta * fwd.hidden(i, j);
  g.w1 = matmul(dz.transposed(), fwd.queries);
  g.b1.assign(m, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) g.b1[j] += dz(i, j);
  return g;
}

void adamw_update(std::span<double> param, std::span<const double> grad, Moments& moments,
                  std::uint64_t step, const TrainConfig& cfg) {
  if (param.size() != grad.size() || moments.first.size() != param.size())
    fail(ErrorCode::ShapeMismatch, "adamw_update: parameter/gradient/moment sizes differ");
  const double t = static_cast<double>(step);
  const double c1 = 1.0 - std::pow(cfg.adam_beta1, t);
  const double c2 = 1.0 - std::pow(cfg.adam_beta2, t);
  for (std::size_t i = 0; i < param.size(); ++i) {
    param[i] -= cfg.lr * cfg.weight_decay * param[i];
    double& m = moments.first[i];
    double& v = moments.second[i];
    m = cfg.adam_beta1 * m + (1.0 - cfg.adam_beta1) * grad[i];
    v = cfg.adam_beta2 * v + (1.0 - cfg.adam_beta2) * grad[i] * grad[i];
    param[i] -= cfg.lr * (m / c1) / (std::sqrt(v / c2) + cfg.adam_eps);
  }
}

void adamw_step(AdapterState& state, const Gradients& grads, const TrainConfig& cfg) {
  const std::uint64_t step = state.step_count + 1;
  adamw_update(state.w1.values(), grads.w1.values(), state.m_w1, step, cfg);
  adamw_update(state.b1, grads.b1, state.m_b1, step, cfg);
  adamw_update(state.w2.values(), grads.w2.values(), state.m_w2, step, cfg);
  adamw_update(state.b2, grads.b2, state.m_b2, step, cfg);
  state.step_count = step;
}

TrainResult train_adapter(const io::Manifest& manifest, const cache::CacheModel& cache,
                          const TrainConfig& cfg, const attn::VceConfig& vce,
                          const cache::RetrievalConfig& rc, double bg_threshold) {
  cfg.validate();
  TrainResult res{init_adapter(cache, cfg, rc.eta), {}};
  if (cfg.iterations == 0) return res;
  if (manifest.samples.empty()) fail(ErrorCode::UsageError, "manifest has no training samples");

  const Matrix text = io::load_text_embeddings(manifest);
  std::vector<io::SampleTensors> samples;
  samples.reserve(manifest.samples.size());
  for (const auto& rec : manifest.samples) samples.push_back(io::load_sample(rec, manifest));

  std::mt19937_64 rng(cfg.seed ^ 0x5eedf00dULL);
  std::vector<std::size_t> order(samples.size());
  std::size_t cursor = order.size();
  res.loss_history.reserve(cfg.iterations);
  for (std::size_t step = 0; step < cfg.iterations; ++step) {
    if (cursor == order.size()) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::shuffle(order.begin(), order.end(), rng);
      cursor = 0;
    }
    const auto& sample = samples[order[cursor++]];
    const auto stage = run_static_stage(sample, text, &cache, vce, rc);
    const auto target = cam::cam_to_mask(*stage.m_es, sample.image_labels, bg_threshold);

    const auto fwd = adapter_forward(res.state, stage.p_e);
    auto loss = adapter_loss(fwd.logits, target);
    for (double& v : loss.grad.values()) v *= cfg.gamma;
    adamw_step(res.state, adapter_backward(res.state, fwd, loss.grad), cfg);
    res.loss_history.push_back(cfg.gamma * loss.loss);
  }
  return res;
}

Cam fuse_dynamic(const Cam& m_t, const Matrix& logits, const LabelSet& image_labels, double beta) {
  const std::size_t c_count = m_t.channels();
  if (logits.rows() != m_t.data.rows() || logits.cols() != c_count + 1)
    fail(ErrorCode::ShapeMismatch, "fuse_dynamic: logits must be H·W x (C + 1)");
  Matrix pos(logits.rows(), c_count);
  for (std::size_t i = 0; i < logits.rows(); ++i)
    for (std::size_t c = 0; c < c_count; ++c) pos(i, c) = logits(i, c);
  cam::normalize_channels(pos, image_labels);
  Cam out{m_t.grid, m_t.data, false};
  auto dst = out.data.values();
  const auto src = pos.values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += beta * src[i];
  cam::normalize_channels(out.data, image_labels);
  return out;
}

void save_adapter(const AdapterState& state, const std::filesystem::path& dir,
                  const std::string& sidecar_json) {
  std::filesystem::create_directories(dir);
  io::write_tensor(io::tensor_from_matrix(state.w1), dir / "w1.tensor");
  io::write_tensor(io::tensor_from_matrix(Matrix(state.b1.size(), 1, state.b1),
                                          std::vector<std::uint64_t>{state.b1.size()}),
                   dir / "b1.tensor");
  io::write_tensor(io::tensor_from_matrix(state.w2), dir / "w2.tensor");
  io::write_tensor(io::tensor_from_matrix(Matrix(state.b2.size(), 1, state.b2),
                                          std::vector<std::uint64_t>{state.b2.size()}),
                   dir / "b2.tensor");
  std::ofstream out(dir / "adapter.json", std::ios::trunc);
  out << sidecar_json;
  if (!out) fail(ErrorCode::IoFailure, "cannot write " + (dir / "adapter.json").string());
}

AdapterState load_adapter(const std::filesystem::path& dir) {
  std::ifstream in(dir / "adapter.json");
  if (!in) fail(ErrorCode::IoFailure, "cannot open " + (dir / "adapter.json").string());
  AdapterState s;
  try {
    const auto side = nlohmann::json::parse(in);
    s.eta = side.at("eta").get<double>();
    s.step_count = side.at("step_count").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::SchemaError, (dir / "adapter.json").string() + ": " + e.what());
  }
  const auto w1 = io::load_tensor(dir / "w1.tensor", io::DType::Float32);
  const auto w2 = io::load_tensor(dir / "w2.tensor", io::DType::Float32);
  const auto b1 = io::load_tensor(dir / "b1.tensor", io::DType::Float32);
  const auto b2 = io::load_tensor(dir / "b2.tensor", io::DType::Float32);
  if (w1.dims.size() != 2 || w2.dims.size() != 2 || w1.dims[0] != w2.dims[0] ||
      b1.numel() != w1.dims[0] || b2.numel() != w2.dims[1])
    fail(ErrorCode::ShapeMismatch, dir.string() + ": adapter tensors are inconsistent");
  s.w1 = io::matrix_from_tensor(w1, w1.dims[0], w1.dims[1]);
  s.w2 = io::matrix_from_tensor(w2, w2.dims[0], w2.dims[1]);
  s.b1.assign(b1.floats().begin(), b1.floats().end());
  s.b2.assign(b2.floats().begin(), b2.floats().end());
  s.m_w1 = Moments(s.w1.size());
  s.m_b1 = Moments(s.b1.size());
  s.m_w2 = Moments(s.w2.size());
  s.m_b2 = Moments(s.b2.size());
  return s;
}

}  // namespace camforge::adapter
