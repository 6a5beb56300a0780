#include "adapter.hpp"

#include <cmath>

#include "core/error.hpp"

namespace nseg {

using ag::Var;

Tensor default_reference_points(int64_t hq, int64_t wq) {
  Tensor refs({hq * wq, 2});
  for (int64_t y = 0; y < hq; ++y)
    for (int64_t x = 0; x < wq; ++x) {
      refs[(y * wq + x) * 2 + 0] = (static_cast<double>(x) + 0.5) / static_cast<double>(wq);
      refs[(y * wq + x) * 2 + 1] = (static_cast<double>(y) + 0.5) / static_cast<double>(hq);
    }
  return refs;
}

DeformableCrossAttention::DeformableCrossAttention(ParamStore& store, const std::string& name,
                                                   int channels, int heads, int points, Rng& rng)
    : channels_(channels), heads_(heads), points_(points) {
  check(channels % heads == 0, Errc::shape, "deformable attention: heads must divide channels");
  offset_proj_ = pointwise(store, name + ".offset", channels, heads * points * 2, rng);
  weight_proj_ = pointwise(store, name + ".weight", channels, heads * points, rng);
  // Zero projections with a ring-pattern offset bias: uniform attention over
  // generic (non-lattice) sampling positions at init.
  offset_proj_.w->value.fill(0.0);
  weight_proj_.w->value.fill(0.0);
  weight_proj_.b->value.fill(0.0);
  for (int h = 0; h < heads; ++h)
    for (int p = 0; p < points; ++p) {
      const double angle =
          2.0 * M_PI * h / heads + (M_PI / 4.0) * p / std::max(1, points - 1) + 0.39;
      const double radius = 0.2 * (p + 1);
      offset_proj_.b->value[(h * points + p) * 2 + 0] = radius * std::cos(angle);
      offset_proj_.b->value[(h * points + p) * 2 + 1] = radius * std::sin(angle);
    }
}

Var DeformableCrossAttention::forward(const Var& q, const Var& k, const Var& v,
                                      const Tensor& reference_points) const {
  const Tensor& qv = q->value;
  check(qv.rank() == 4 && k->value.rank() == 4 && v->value.rank() == 4, Errc::shape,
        "deformable attention: expects 4-d feature maps");
  check(qv.dim(1) == channels_ && k->value.dim(1) == channels_ && v->value.dim(1) == channels_,
        Errc::shape, "deformable attention: Q/K/V channel mismatch");
  check(k->value.same_shape(v->value), Errc::shape, "deformable attention: K/V geometry mismatch");
  const int64_t n = qv.dim(0), hq = qv.dim(2), wq = qv.dim(3);
  const int64_t hv = v->value.dim(2), wv = v->value.dim(3);
  check(reference_points.rank() == 2 && reference_points.dim(0) == hq * wq &&
            reference_points.dim(1) == 2,
        Errc::shape, "deformable attention: reference points must be [Hq*Wq, 2]");

  Var offsets = offset_proj_(q);  // [N, h*p*2, Hq, Wq]
  Var weight_logits = weight_proj_(q);

  // Reference points in V pixel coordinates, broadcast over the batch.
  Tensor base_x({n, hq, wq}), base_y({n, hq, wq});
  for (int64_t ni = 0; ni < n; ++ni)
    for (int64_t i = 0; i < hq * wq; ++i) {
      base_x[ni * hq * wq + i] = reference_points[i * 2 + 0] * static_cast<double>(wv) - 0.5;
      base_y[ni * hq * wq + i] = reference_points[i * 2 + 1] * static_cast<double>(hv) - 0.5;
    }
  Var bx = ag::constant(std::move(base_x));
  Var by = ag::constant(std::move(base_y));

  const int64_t dh = channels_ / heads_;
  std::vector<Var> head_outputs;
  head_outputs.reserve(static_cast<size_t>(heads_));
  for (int h = 0; h < heads_; ++h) {
    Var v_head = ag::slice_channels(v, h * dh, (h + 1) * dh);
    Var w_head = ag::softmax_channels(
        ag::slice_channels(weight_logits, h * points_, (h + 1) * points_));
    Var acc;
    for (int p = 0; p < points_; ++p) {
      const int64_t ci = (static_cast<int64_t>(h) * points_ + p) * 2;
      Var ox = ag::reshape(ag::slice_channels(offsets, ci, ci + 1), {n, hq, wq});
      Var oy = ag::reshape(ag::slice_channels(offsets, ci + 1, ci + 2), {n, hq, wq});
      Var px = ag::add(bx, ox);
      Var py = ag::add(by, oy);
      Var sample = ag::grid_sample2d(v_head, px, py);
      Var weighted = ag::bmul(sample, ag::slice_channels(w_head, p, p + 1));
      acc = acc ? ag::add(acc, weighted) : weighted;
    }
    head_outputs.push_back(acc);
  }
  return heads_ == 1 ? head_outputs[0] : ag::concat_channels(head_outputs);
}

InteractionBlock::InteractionBlock(ParamStore& store, const std::string& name, int channels,
                                   int embed_dim, int heads, int points, Rng& rng)
    : ln1_(LayerNormC::create(store, name + ".ln1", channels)),
      ln2_(LayerNormC::create(store, name + ".ln2", channels)),
      kv_proj_(pointwise(store, name + ".kv", embed_dim, channels, rng)),
      attn_(store, name + ".attn", channels, heads, points, rng),
      ffn1_(pointwise(store, name + ".ffn1", channels, 2 * channels, rng)),
      ffn2_(pointwise(store, name + ".ffn2", 2 * channels, channels, rng)) {}

Var InteractionBlock::forward(const Var& c_prev, const Var& f_vit) const {
  Var kv = kv_proj_(f_vit);
  Tensor refs = default_reference_points(c_prev->value.dim(2), c_prev->value.dim(3));
  Var attn = attn_.forward(ln1_(c_prev), kv, kv, refs);
  Var x = ag::add(c_prev, attn);
  Var ff = ffn2_(ag::gelu(ffn1_(ln2_(x))));
  return ag::add(x, ff);
}

SpatialPriorModule::SpatialPriorModule(ParamStore& store, const std::string& name,
                                       const ModelConfig& cfg, Rng& rng) {
  levels_ = cfg.num_scales;
  const int width = cfg.adapter_width;
  const int half = std::max(1, width / 2);
  stem1_ = Conv2d::create(store, name + ".stem1", 3, half, 3, 2, 1, rng);
  stem_ln1_ = LayerNormC::create(store, name + ".stem1_ln", half);
  stem2_ = Conv2d::create(store, name + ".stem2", half, width, 3, 2, 1, rng);
  stem_ln2_ = LayerNormC::create(store, name + ".stem2_ln", width);
  for (int i = 1; i < levels_; ++i) {
    stage_convs_.push_back(
        Conv2d::create(store, name + ".stage" + std::to_string(i), width, width, 3, 2, 1, rng));
    stage_lns_.push_back(
        LayerNormC::create(store, name + ".stage" + std::to_string(i) + "_ln", width));
  }
}

std::vector<Var> SpatialPriorModule::forward(const Var& images) const {
  check(images->value.rank() == 4 && images->value.dim(1) == 3, Errc::shape,
        "spatial prior: expects [N,3,H,W] images");
  check(images->value.dim(2) % 4 == 0 && images->value.dim(3) % 4 == 0, Errc::shape,
        "spatial prior: image dims must be divisible by 4");
  Var x = ag::relu(stem_ln1_(stem1_(images)));
  x = ag::relu(stem_ln2_(stem2_(x)));
  std::vector<Var> out;
  out.push_back(x);
  for (size_t i = 0; i < stage_convs_.size(); ++i) {
    x = ag::relu(stage_lns_[i](stage_convs_[i](x)));
    out.push_back(x);
  }
  return out;
}

EncoderAdapter::EncoderAdapter(ParamStore& store, const ModelConfig& cfg, Rng& rng)
    : cfg_(cfg), spm_(store, "adapter.spm", cfg, rng) {
  for (int i = 0; i < cfg.num_scales; ++i)
    blocks_.emplace_back(store, "adapter.block" + std::to_string(i), cfg.adapter_width,
                         cfg.backbone_embed_dim, cfg.attention_heads, cfg.sampling_points, rng);
}

std::vector<Var> EncoderAdapter::run(const VitBackbone& backbone, const Tensor& images) const {
  std::vector<Tensor> f_vit = extract_backbone_features(backbone, images, cfg_);
  Var x = ag::constant(images);
  std::vector<Var> pyramid = spm_.forward(x);
  std::vector<Var> refined(pyramid.size());
  Var running;
  for (int i = cfg_.num_scales - 1; i >= 0; --i) {
    Var query = pyramid[static_cast<size_t>(i)];
    if (running) {
      Var up = ag::bilinear_resize(running, query->value.dim(2), query->value.dim(3));
      query = ag::add(query, up);
    }
    Var fv = ag::constant(f_vit[static_cast<size_t>(i)]);
    running = blocks_[static_cast<size_t>(i)].forward(query, fv);
    refined[static_cast<size_t>(i)] = running;
  }
  return refined;
}

}  // namespace nseg
