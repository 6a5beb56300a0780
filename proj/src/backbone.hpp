#pragma once

#include <memory>
#include <string>
#include <vector>

#include "config.hpp"
#include "core/nn.hpp"

namespace nseg {

// Frozen ViT feature extractor. Parameters are registered under "backbone."
// as non-trainable; the forward pass runs in plain tensor math, so no tape is
// built and gradients cannot reach it by construction.
class VitBackbone {
 public:
  // Registers parameters into `store`; stub init is deterministic in `seed`.
  VitBackbone(const ModelConfig& cfg, ParamStore& store, uint64_t seed);

  // Overwrites parameters from a serialized container; validates embed_dim /
  // patch_size / block count against the config.
  void load_weights(const std::string& path);
  void save_weights(const std::string& path) const;

  // Dense token maps [N, D, H/ps, W/ps], one tap after each of `stages` equal
  // groups of transformer blocks (blocks 3,6,9,12 for 12 blocks, 4 stages).
  std::vector<Tensor> stage_maps(const Tensor& images, int stages) const;

  int embed_dim() const { return cfg_.backbone_embed_dim; }
  int patch_size() const { return cfg_.backbone_patch_size; }
  int block_count() const { return cfg_.backbone_blocks; }
  std::string digest() const { return store_->digest("backbone."); }

 private:
  Tensor tokens_for_image(const Tensor& images, int64_t n, int64_t grid_h, int64_t grid_w) const;

  ModelConfig cfg_;
  ParamStore* store_;
};

// Standalone construction for direct use outside a full model.
struct BackboneBundle {
  std::unique_ptr<ParamStore> store;
  std::unique_ptr<VitBackbone> vit;
};
BackboneBundle make_backbone(const ModelConfig& cfg, uint64_t seed);

// The i-th map is the i-th stage tap bilinearly resampled from stride
// patch_size to scale_strides[i]. Spatial dims: input_size / stride.
std::vector<Tensor> extract_backbone_features(const VitBackbone& backbone, const Tensor& images,
                                              const ModelConfig& cfg);

}  // namespace nseg
