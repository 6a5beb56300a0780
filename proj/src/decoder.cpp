#include "decoder.hpp"

#include "core/error.hpp"

namespace nseg {

using ag::Var;

DecoderGrid DecoderGrid::build(const ModelConfig& cfg) {
  auto violations = validate_config(cfg, TrainConfig{});
  if (!violations.empty())
    fail(Errc::validation, "build_grid: invalid config: " + violations.front().field + ": " +
                               violations.front().message);
  DecoderGrid g;
  g.levels = cfg.num_scales;
  const auto& w = cfg.decoder_widths;
  for (int j = 1; j <= g.levels - 1; ++j) {
    for (int i = g.levels - 1 - j; i >= 0; --i) {
      NodeSpec n;
      n.level = i;
      n.order = j;
      n.in_channels = w[static_cast<size_t>(i + 1)] + j * w[static_cast<size_t>(i)];
      n.out_channels = w[static_cast<size_t>(i)];
      g.nodes.push_back(n);
    }
  }
  return g;
}

Var upsample2x(const Var& x) {
  return ag::bilinear_resize(x, x->value.dim(2) * 2, x->value.dim(3) * 2);
}

NestedDecoder::NestedDecoder(ParamStore& store, const ModelConfig& cfg, Rng& rng)
    : grid_(DecoderGrid::build(cfg)) {
  for (const auto& spec : grid_.nodes) {
    const std::string p =
        "decoder.x" + std::to_string(spec.level) + "_" + std::to_string(spec.order);
    NodeBlock b;
    b.conv1 = Conv2d::create(store, p + ".conv1", spec.in_channels, spec.out_channels, 3, 1, 1, rng);
    b.bn1 = BatchNorm2d::create(store, p + ".bn1", spec.out_channels);
    b.conv2 = Conv2d::create(store, p + ".conv2", spec.out_channels, spec.out_channels, 3, 1, 1, rng);
    b.bn2 = BatchNorm2d::create(store, p + ".bn2", spec.out_channels);
    blocks_.push_back(std::move(b));
  }
}

Var NestedDecoder::node_forward(int node_index, const Var& up_input,
                                const std::vector<Var>& same_level, bool training) const {
  check(node_index >= 0 && node_index < static_cast<int>(blocks_.size()), Errc::shape,
        "node_forward: node index out of range");
  const NodeSpec& spec = grid_.nodes[static_cast<size_t>(node_index)];
  std::vector<Var> inputs;
  inputs.push_back(up_input);
  inputs.insert(inputs.end(), same_level.begin(), same_level.end());
  Var cat = inputs.size() == 1 ? inputs[0] : ag::concat_channels(inputs);
  check(cat->value.dim(1) == spec.in_channels, Errc::shape,
        "node_forward: concatenated width " + std::to_string(cat->value.dim(1)) +
            " != declared input channels " + std::to_string(spec.in_channels) + " for node x^{" +
            std::to_string(spec.level) + "," + std::to_string(spec.order) + "}");
  const NodeBlock& b = blocks_[static_cast<size_t>(node_index)];
  Var h = ag::relu(b.bn1.forward(b.conv1(cat), training));
  return ag::relu(b.bn2.forward(b.conv2(h), training));
}

Var NestedDecoder::decode(const std::vector<Var>& s, bool training) const {
  const int levels = grid_.levels;
  check(static_cast<int>(s.size()) == levels, Errc::shape,
        "decode: expected " + std::to_string(levels) + " inputs, got " +
            std::to_string(s.size()));
  // x[i][j]; column 0 is S_i verbatim.
  std::vector<std::vector<Var>> x(static_cast<size_t>(levels));
  for (int i = 0; i < levels; ++i) x[static_cast<size_t>(i)].push_back(s[static_cast<size_t>(i)]);
  int node_index = 0;
  for (const auto& spec : grid_.nodes) {
    const auto& below = x[static_cast<size_t>(spec.level + 1)][static_cast<size_t>(spec.order - 1)];
    Var up = upsample2x(below);
    const auto& same = x[static_cast<size_t>(spec.level)];
    std::vector<Var> same_level(same.begin(), same.begin() + spec.order);
    x[static_cast<size_t>(spec.level)].push_back(
        node_forward(node_index, up, same_level, training));
    ++node_index;
  }
  return x[0].back();
}

SegmentationHead::SegmentationHead(ParamStore& store, const ModelConfig& cfg, Rng& rng) {
  proj_ = pointwise(store, "head.proj", cfg.decoder_widths.front(), cfg.num_classes, rng);
  upscale_ = cfg.scale_strides.front();
}

Var SegmentationHead::forward(const Var& x_top) const {
  Var logits = proj_(x_top);
  return ag::bilinear_resize(logits, logits->value.dim(2) * upscale_,
                             logits->value.dim(3) * upscale_);
}

}  // namespace nseg
