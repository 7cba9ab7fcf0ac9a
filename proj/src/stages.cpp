#include "camforge/stages.hpp"

namespace camforge {

StaticStage run_static_stage(const io::SampleTensors& sample, const Matrix& text,
                             const cache::CacheModel* cache, const attn::VceConfig& vce,
                             const cache::RetrievalConfig& rc) {
  StaticStage out;
  out.p_e = attn::enhance_features(sample, vce);
  out.m_t = cam::generate_patch_text_cam(out.p_e, text, sample.image_labels);
  if (cache != nullptr) {
    out.retrieval = cache::static_retrieve(out.p_e, *cache, rc, sample.image_labels);
    out.m_es = cache::fuse_static(out.m_t, *out.retrieval, rc, sample.image_labels);
  }
  return out;
}

}  // namespace camforge
