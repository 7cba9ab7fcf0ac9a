#pragma once

// Cache-initialized two-layer retrieval adapter:
//   logits = σ(q̂ W1ᵀ + b1) W2 + b2,   σ(x) = exp(−η(1 − x)),
// trained with softmax cross-entropy against static pseudo masks.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "camforge/attention.hpp"
#include "camforge/cache.hpp"
#include "camforge/dense.hpp"
#include "camforge/manifest.hpp"

namespace camforge::adapter {

struct TrainConfig {
  double lr = 2e-4;
  double weight_decay = 1e-2;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t iterations = 2000;
  double gamma = 0.1;
  std::size_t prompts = 92;  // N
  double prompt_init_scale = 0.02;
  std::uint64_t seed = 0;

  void validate() const;
};

/// First and second moments for one parameter tensor.
struct Moments {
  std::vector<double> first;
  std::vector<double> second;

  explicit Moments(std::size_t n = 0) : first(n, 0.0), second(n, 0.0) {}
  bool operator==(const Moments&) const = default;
};

struct AdapterState {
  Matrix w1;               // M × D
  std::vector<double> b1;  // M
  Matrix w2;               // M × (C + 1)
  std::vector<double> b2;  // C + 1
  double eta = 5.0;
  std::uint64_t step_count = 0;
  Moments m_w1, m_b1, m_w2, m_b2;

  std::size_t hidden() const noexcept { return w1.rows(); }
  std::size_t outputs() const noexcept { return w2.cols(); }
  bool operator==(const AdapterState&) const = default;
};

/// W1 = [keys; N prompt rows ~ Normal(0, scale²)], W2 = [values; zeros], biases zero.
AdapterState init_adapter(const cache::CacheModel& cache, const TrainConfig& cfg, double eta);

struct ForwardPass {
  Matrix queries;  // L2-normalized patches
  Matrix hidden;   // σ(z)
  Matrix logits;   // H·W × (C + 1)
};

ForwardPass adapter_forward(const AdapterState& state, const FeatureMap& p_e);

struct LossResult {
  double loss = 0.0;
  Matrix grad;  // ∂loss/∂logits
};

/// Mean softmax cross-entropy over patches; mask label 0 targets channel C,
/// label c + 1 targets channel c.
LossResult adapter_loss(const Matrix& logits, const PseudoMask& target);

struct Gradients {
  Matrix w1;
  std::vector<double> b1;
  Matrix w2;
  std::vector<double> b2;
};

Gradients adapter_backward(const AdapterState& state, const ForwardPass& fwd, const Matrix& dlogits);

/// Decoupled weight decay Adam with bias correction on one parameter tensor.
void adamw_update(std::span<double> param, std::span<const double> grad, Moments& moments,
                  std::uint64_t step, const TrainConfig& cfg);

void adamw_step(AdapterState& state, const Gradients& grads, const TrainConfig& cfg);

struct TrainResult {
  AdapterState state;
  std::vector<double> loss_history;  // γ · L_ada per step
};

/// Samples are visited in a seeded shuffle per epoch, one sample per step;
/// supervision is recomputed from the frozen static path at every step.
TrainResult train_adapter(const io::Manifest& manifest, const cache::CacheModel& cache,
                          const TrainConfig& cfg, const attn::VceConfig& vce,
                          const cache::RetrievalConfig& rc, double bg_threshold);

/// M_t + β · minmax(foreground logits), renormalized per active channel.
Cam fuse_dynamic(const Cam& m_t, const Matrix& logits, const LabelSet& image_labels, double beta);

void save_adapter(const AdapterState& state, const std::filesystem::path& dir,
                  const std::string& sidecar_json);
AdapterState load_adapter(const std::filesystem::path& dir);

}  // namespace camforge::adapter
