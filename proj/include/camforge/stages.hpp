#pragma once

#include <optional>

#include "camforge/attention.hpp"
#include "camforge/cache.hpp"
#include "camforge/cam.hpp"
#include "camforge/manifest.hpp"

namespace camforge {

/// The training-free path for one sample: P_e, M_t, and (with a cache) M_es and
/// its pseudo mask.
struct StaticStage {
  FeatureMap p_e;
  Cam m_t;
  std::optional<cache::StaticRetrieval> retrieval;
  std::optional<Cam> m_es;
};

StaticStage run_static_stage(const io::SampleTensors& sample, const Matrix& text,
                             const cache::CacheModel* cache, const attn::VceConfig& vce,
                             const cache::RetrievalConfig& rc);

}  // namespace camforge
