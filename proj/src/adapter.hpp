#pragma once

#include <vector>

#include "backbone.hpp"
#include "config.hpp"
#include "core/nn.hpp"

namespace nseg {

// Pixel-center reference points for an Hq x Wq query grid, normalized to
// [0,1]^2: r = (index + 0.5) / extent. Shape [Hq*Wq, 2] as (x, y).
Tensor default_reference_points(int64_t hq, int64_t wq);

// Sampling-based cross-attention: per query, `points` offsets per head are
// predicted from Q, V is sampled bilinearly at reference + offset (offsets in
// V-pixel units, positions clamped to the border), and samples are combined
// with query-predicted weights softmax-normalized per head. K must match V
// (it is not used beyond the shape contract in this attention flavor). Output
// has Q's spatial dims and channels.
class DeformableCrossAttention {
 public:
  DeformableCrossAttention(ParamStore& store, const std::string& name, int channels, int heads,
                           int points, Rng& rng);

  ag::Var forward(const ag::Var& q, const ag::Var& k, const ag::Var& v,
                  const Tensor& reference_points) const;

  int channels() const { return channels_; }

 private:
  int channels_, heads_, points_;
  Conv2d offset_proj_;  // -> heads*points*2 (dx, dy pairs)
  Conv2d weight_proj_;  // -> heads*points
};

// Adapter unit: pre-norm deformable cross-attention with residual, then a
// pre-norm pointwise feed-forward with residual. F_vit is first projected
// from embed_dim to the adapter width to serve as K = V.
class InteractionBlock {
 public:
  InteractionBlock(ParamStore& store, const std::string& name, int channels, int embed_dim,
                   int heads, int points, Rng& rng);

  ag::Var forward(const ag::Var& c_prev, const ag::Var& f_vit) const;
  const DeformableCrossAttention& attention() const { return attn_; }

 private:
  LayerNormC ln1_, ln2_;
  Conv2d kv_proj_;
  DeformableCrossAttention attn_;
  Conv2d ffn1_, ffn2_;
};

// Convolutional stem reaching 1/4 resolution, then stride-2 stages for the
// remaining levels; all conv + channel-norm + pointwise nonlinearity.
class SpatialPriorModule {
 public:
  SpatialPriorModule(ParamStore& store, const std::string& name, const ModelConfig& cfg, Rng& rng);

  std::vector<ag::Var> forward(const ag::Var& images) const;

 private:
  int levels_;
  Conv2d stem1_, stem2_;
  LayerNormC stem_ln1_, stem_ln2_;
  std::vector<Conv2d> stage_convs_;
  std::vector<LayerNormC> stage_lns_;
};

// Runs the SPM, then one interaction block per level, coarsest to finest,
// with a single running stream: each level's query is its SPM map plus the
// resampled previous output (the coarsest level has no predecessor).
class EncoderAdapter {
 public:
  EncoderAdapter(ParamStore& store, const ModelConfig& cfg, Rng& rng);

  std::vector<ag::Var> spatial_prior(const ag::Var& images) const { return spm_.forward(images); }
  std::vector<ag::Var> run(const VitBackbone& backbone, const Tensor& images) const;

  const InteractionBlock& block(int i) const { return blocks_[static_cast<size_t>(i)]; }

 private:
  ModelConfig cfg_;
  SpatialPriorModule spm_;
  std::vector<InteractionBlock> blocks_;
};

}  // namespace nseg
