#include "model.hpp"

#include "core/error.hpp"
#include "losses.hpp"

namespace nseg {

Model::Model(const ModelConfig& cfg, uint64_t seed) : cfg_(cfg) {
  auto violations = validate_config(cfg, TrainConfig{});
  if (!violations.empty())
    fail(Errc::validation,
         "model config invalid: " + violations.front().field + ": " + violations.front().message);
  Rng rng(seed);
  backbone_ = std::make_unique<VitBackbone>(cfg, store_, seed ^ 0xBACB0E5ull);
  if (cfg.backbone_kind == BackboneKind::pretrained_vit) {
    check(!cfg.backbone_weights.empty(), Errc::weights_not_found,
          "backbone_kind=pretrained_vit requires backbone_weights path");
    backbone_->load_weights(cfg.backbone_weights);
  }
  adapter_ = std::make_unique<EncoderAdapter>(store_, cfg, rng);
  fapm_ = std::make_unique<Fapm>(store_, cfg, rng);
  decoder_ = std::make_unique<NestedDecoder>(store_, cfg, rng);
  head_ = std::make_unique<SegmentationHead>(store_, cfg, rng);
}

ag::Var Model::forward(const Tensor& images, bool training) {
  check(images.rank() == 4 && images.dim(1) == 3, Errc::shape, "forward: expects [N,3,H,W]");
  check(images.dim(2) == cfg_.input_size && images.dim(3) == cfg_.input_size, Errc::shape,
        "forward: expected " + std::to_string(cfg_.input_size) + "x" +
            std::to_string(cfg_.input_size) + " input, got " + std::to_string(images.dim(2)) +
            "x" + std::to_string(images.dim(3)));
  std::vector<ag::Var> pyramid = adapter_->run(*backbone_, images);
  std::vector<ag::Var> s = fapm_->forward(pyramid);
  ag::Var top = decoder_->decode(s, training);
  return head_->forward(top);
}

Tensor Model::predict_probs(const Tensor& images) {
  ag::NoGrad guard;
  ag::Var logits = forward(images, /*training=*/false);
  ag::Var probs = foreground_probs(logits, cfg_.loss_variant);
  const Tensor& p = probs->value;
  Tensor out({p.dim(0), p.dim(2), p.dim(3)});
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = p[i];
  return out;
}

}  // namespace nseg
