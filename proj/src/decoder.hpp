#pragma once

#include <vector>

#include "config.hpp"
#include "core/nn.hpp"

namespace nseg {

// Topology of the dense decoder grid. Node (i, j) exists for i + j <= L-1;
// column j = 0 is the FAPM output S_i with no block applied. Computed nodes
// (j >= 1) concatenate the upsampled (i+1, j-1) node with all same-level
// predecessors, so their input width is w_{i+1} + j * w_i.
struct NodeSpec {
  int level = 0;  // i
  int order = 0;  // j >= 1
  int in_channels = 0;
  int out_channels = 0;
  bool operator==(const NodeSpec&) const = default;
};

struct DecoderGrid {
  int levels = 0;
  // Evaluation order: j ascending, i descending within j. This is the unique
  // topological order under that key; each node depends only on column j-1
  // of the level below and columns < j of its own level.
  std::vector<NodeSpec> nodes;

  static DecoderGrid build(const ModelConfig& cfg);
};

// Exact x2 bilinear upsampling (channels unchanged).
ag::Var upsample2x(const ag::Var& x);

class NestedDecoder {
 public:
  NestedDecoder(ParamStore& store, const ModelConfig& cfg, Rng& rng);

  const DecoderGrid& grid() const { return grid_; }

  // H block applied to [U(x^{i+1,j-1}), x^{i,0..j-1}]: two rounds of
  // Conv3x3 + batch norm + ReLU producing w_i channels. Checks at runtime
  // that the concatenation width matches the declared input channels.
  ag::Var node_forward(int node_index, const ag::Var& up_input,
                       const std::vector<ag::Var>& same_level, bool training) const;

  // Evaluates the full grid; returns x^{0, L-1} at the finest stride.
  ag::Var decode(const std::vector<ag::Var>& s, bool training) const;

 private:
  struct NodeBlock {
    Conv2d conv1, conv2;
    BatchNorm2d bn1, bn2;
  };

  DecoderGrid grid_;
  std::vector<NodeBlock> blocks_;
};

// Pointwise conv to num_classes then bilinear x(finest stride) back to the
// input resolution; raw logits, no activation.
class SegmentationHead {
 public:
  SegmentationHead(ParamStore& store, const ModelConfig& cfg, Rng& rng);
  ag::Var forward(const ag::Var& x_top) const;

 private:
  Conv2d proj_;
  int upscale_ = 4;
};

}  // namespace nseg
