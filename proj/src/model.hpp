#pragma once

#include <memory>
#include <string>

#include "adapter.hpp"
#include "backbone.hpp"
#include "config.hpp"
#include "decoder.hpp"
#include "fapm.hpp"

namespace nseg {

// The full segmentation network: frozen backbone + adapter -> FAPM ->
// nested decoder -> head. One parameter store holds everything; backbone
// entries are non-trainable and live under "backbone.".
class Model {
 public:
  Model(const ModelConfig& cfg, uint64_t seed);

  // Raw logits [N, num_classes, input, input]. `training` selects batch-norm
  // mode in the decoder.
  ag::Var forward(const Tensor& images, bool training);

  // Foreground probability map [N,H,W]; eval mode, no tape.
  Tensor predict_probs(const Tensor& images);

  const ModelConfig& cfg() const { return cfg_; }
  ParamStore& store() { return store_; }
  const ParamStore& store() const { return store_; }

  std::string digest() const { return store_.digest(); }
  std::string backbone_digest() const { return store_.digest("backbone."); }

  VitBackbone& backbone() { return *backbone_; }
  EncoderAdapter& adapter() { return *adapter_; }
  Fapm& fapm() { return *fapm_; }
  NestedDecoder& decoder() { return *decoder_; }
  SegmentationHead& head() { return *head_; }

 private:
  ModelConfig cfg_;
  ParamStore store_;
  std::unique_ptr<VitBackbone> backbone_;
  std::unique_ptr<EncoderAdapter> adapter_;
  std::unique_ptr<Fapm> fapm_;
  std::unique_ptr<NestedDecoder> decoder_;
  std::unique_ptr<SegmentationHead> head_;
};

}  // namespace nseg
