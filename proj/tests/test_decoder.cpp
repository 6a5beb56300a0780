#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>

#include "core/error.hpp"
#include "decoder.hpp"

using namespace nseg;
using ag::Var;

namespace {

ModelConfig grid_cfg(std::vector<int> widths, int input_size = 64) {
  ModelConfig m;
  m.input_size = input_size;
  m.num_scales = static_cast<int>(widths.size());
  m.scale_strides.clear();
  for (int i = 0; i < m.num_scales; ++i) m.scale_strides.push_back(4 << i);
  m.decoder_widths = std::move(widths);
  m.adapter_width = 96;
  m.attention_heads = 1;
  m.backbone_patch_size = input_size >= 16 ? 16 : 4;
  return m;
}

Tensor randn(std::vector<int64_t> shape, uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = scale * rng.normal();
  return t;
}

std::vector<Var> random_inputs(const ModelConfig& cfg, int64_t batch, uint64_t seed) {
  std::vector<Var> s;
  for (int i = 0; i < cfg.num_scales; ++i) {
    const int64_t sz = cfg.input_size / cfg.scale_strides[static_cast<size_t>(i)];
    s.push_back(ag::constant(
        randn({batch, cfg.decoder_widths[static_cast<size_t>(i)], sz, sz}, seed + i)));
  }
  return s;
}

}  // namespace

TEST_CASE("build_grid: node enumeration and channel accounting") {
  SUBCASE("L=4 yields six computed nodes") {
    DecoderGrid g = DecoderGrid::build(grid_cfg({8, 16, 32, 64}));
    CHECK(g.levels == 4);
    REQUIRE(g.nodes.size() == 6);
    std::map<std::pair<int, int>, NodeSpec> by_pos;
    for (const auto& n : g.nodes) by_pos[{n.level, n.order}] = n;
    for (auto [i, j] : {std::pair{0, 1}, {0, 2}, {0, 3}, {1, 1}, {1, 2}, {2, 1}})
      CHECK(by_pos.count({i, j}) == 1);
  }
  SUBCASE("input channels follow w_{i+1} + j*w_i") {
    DecoderGrid g = DecoderGrid::build(grid_cfg({8, 16, 32, 64}));
    for (const auto& n : g.nodes) {
      const std::vector<int> w = {8, 16, 32, 64};
      CHECK(n.in_channels == w[static_cast<size_t>(n.level + 1)] +
                                 n.order * w[static_cast<size_t>(n.level)]);
      CHECK(n.out_channels == w[static_cast<size_t>(n.level)]);
    }
    // the spec's worked example: x^{0,3} takes 16 + 3*8 = 40 channels
    for (const auto& n : g.nodes)
      if (n.level == 0 && n.order == 3) CHECK(n.in_channels == 40);
  }
  SUBCASE("evaluation order is topological (deps precede every node)") {
    DecoderGrid g = DecoderGrid::build(grid_cfg({4, 8, 16, 32}));
    std::map<std::pair<int, int>, size_t> pos;
    for (size_t k = 0; k < g.nodes.size(); ++k) pos[{g.nodes[k].level, g.nodes[k].order}] = k;
    for (const auto& n : g.nodes) {
      if (n.order > 1) CHECK(pos.at({n.level, n.order - 1}) < pos.at({n.level, n.order}));
      if (pos.count({n.level + 1, n.order - 1}))
        CHECK(pos.at({n.level + 1, n.order - 1}) < pos.at({n.level, n.order}));
    }
  }
  SUBCASE("L=1 has no computed nodes and decode passes S_0 through") {
    ModelConfig cfg = grid_cfg({8});
    DecoderGrid g = DecoderGrid::build(cfg);
    CHECK(g.nodes.empty());
    ParamStore store;
    Rng rng(1);
    NestedDecoder dec(store, cfg, rng);
    auto s = random_inputs(cfg, 1, 42);
    Var out = dec.decode(s, false);
    for (int64_t i = 0; i < out->value.numel(); ++i) CHECK(out->value[i] == s[0]->value[i]);
  }
}

TEST_CASE("upsample2x: geometry and constants") {
  Var x = ag::constant(randn({1, 3, 8, 8}, 7));
  Var up = upsample2x(x);
  CHECK(up->value.dim(2) == 16);
  CHECK(up->value.dim(3) == 16);
  Var c = ag::constant(Tensor({1, 2, 5, 5}, -1.75));
  Var cu = upsample2x(c);
  for (int64_t i = 0; i < cu->value.numel(); ++i) CHECK(cu->value[i] == doctest::Approx(-1.75));
}

TEST_CASE("node_forward: zero inputs, concat accounting, shape errors") {
  ModelConfig cfg = grid_cfg({8, 16, 32, 64});
  ParamStore store;
  Rng rng(2);
  NestedDecoder dec(store, cfg, rng);

  // node index for x^{0,2}: order j=1 nodes come first (i = 2,1,0), then j=2.
  int idx_x02 = -1, idx_x01 = -1;
  for (size_t k = 0; k < dec.grid().nodes.size(); ++k) {
    if (dec.grid().nodes[k].level == 0 && dec.grid().nodes[k].order == 2)
      idx_x02 = static_cast<int>(k);
    if (dec.grid().nodes[k].level == 0 && dec.grid().nodes[k].order == 1)
      idx_x01 = static_cast<int>(k);
  }
  REQUIRE(idx_x02 >= 0);

  SUBCASE("x^{0,2} concatenation width is 16 + 2*8 = 32") {
    CHECK(dec.grid().nodes[static_cast<size_t>(idx_x02)].in_channels == 32);
    Var up = ag::constant(randn({1, 16, 16, 16}, 3));
    std::vector<Var> same = {ag::constant(randn({1, 8, 16, 16}, 4)),
                             ag::constant(randn({1, 8, 16, 16}, 5))};
    Var out = dec.node_forward(idx_x02, up, same, false);
    CHECK(out->value.dim(1) == 8);
    CHECK(out->value.dim(2) == 16);
  }
  SUBCASE("mismatched concatenation width raises ShapeError") {
    Var up = ag::constant(randn({1, 16, 16, 16}, 3));
    std::vector<Var> same = {ag::constant(randn({1, 8, 16, 16}, 4))};  // one missing
    CHECK_THROWS_AS(dec.node_forward(idx_x02, up, same, false), Error);
  }
  SUBCASE("all-zero inputs give the finite, reproducible bias response") {
    Var up = ag::constant(Tensor({1, 16, 16, 16}));
    std::vector<Var> same = {ag::constant(Tensor({1, 8, 16, 16}))};
    Var a = dec.node_forward(idx_x01, up, same, false);
    Var b = dec.node_forward(idx_x01, up, same, false);
    CHECK(a->value.all_finite());
    for (int64_t i = 0; i < a->value.numel(); ++i) CHECK(a->value[i] == b->value[i]);
  }
}

TEST_CASE("decode: geometry, determinism, L=2 single-skip case") {
  SUBCASE("full grid output sits at the finest stride with w_0 channels") {
    ModelConfig cfg = grid_cfg({8, 16, 32, 64});
    ParamStore store;
    Rng rng(3);
    NestedDecoder dec(store, cfg, rng);
    auto s = random_inputs(cfg, 2, 11);
    Var out = dec.decode(s, false);
    CHECK(out->value.dim(0) == 2);
    CHECK(out->value.dim(1) == 8);
    CHECK(out->value.dim(2) == 16);  // 64/4
    CHECK(out->value.dim(3) == 16);

    Var again = dec.decode(s, false);
    for (int64_t i = 0; i < out->value.numel(); ++i) CHECK(out->value[i] == again->value[i]);
  }
  SUBCASE("L=2 reduces to one upsample+skip node") {
    ModelConfig cfg = grid_cfg({4, 8}, 32);
    ParamStore store;
    Rng rng(4);
    NestedDecoder dec(store, cfg, rng);
    CHECK(dec.grid().nodes.size() == 1);
    auto s = random_inputs(cfg, 1, 12);
    Var manual = dec.node_forward(0, upsample2x(s[1]), {s[0]}, false);
    Var out = dec.decode(s, false);
    for (int64_t i = 0; i < out->value.numel(); ++i) CHECK(out->value[i] == manual->value[i]);
  }
}

TEST_CASE("dense skips are live: silencing one contributor changes the output") {
  ModelConfig cfg = grid_cfg({8, 16, 32, 64});
  ParamStore store;
  Rng rng(5);
  NestedDecoder dec(store, cfg, rng);
  auto s = random_inputs(cfg, 1, 13);

  // Manually evaluate the grid so a single same-level input of the last node
  // can be swapped out.
  auto run = [&](bool zero_x00_into_last) {
    std::vector<std::vector<Var>> x(4);
    for (int i = 0; i < 4; ++i) x[static_cast<size_t>(i)].push_back(s[static_cast<size_t>(i)]);
    int k = 0;
    Var last;
    for (const auto& spec : dec.grid().nodes) {
      Var up = upsample2x(x[static_cast<size_t>(spec.level + 1)][static_cast<size_t>(spec.order - 1)]);
      std::vector<Var> same(x[static_cast<size_t>(spec.level)].begin(),
                            x[static_cast<size_t>(spec.level)].begin() + spec.order);
      const bool is_last = spec.level == 0 && spec.order == 3;
      if (is_last && zero_x00_into_last)
        same[0] = ag::constant(Tensor(same[0]->value.shape()));  // zeroed x^{0,0} only here
      Var out = dec.node_forward(k, up, same, false);
      x[static_cast<size_t>(spec.level)].push_back(out);
      if (is_last) last = out;
      ++k;
    }
    return last;
  };
  Var base = run(false);
  Var ablated = run(true);
  double delta = 0.0;
  for (int64_t i = 0; i < base->value.numel(); ++i)
    delta = std::max(delta, std::fabs(base->value[i] - ablated->value[i]));
  CHECK(delta > 1e-6);
}

TEST_CASE("segmentation head: x4 geometry and class channels") {
  SUBCASE("single-channel logits for the bce variant") {
    ModelConfig cfg = grid_cfg({8, 16, 32, 64});
    cfg.num_classes = 1;
    ParamStore store;
    Rng rng(6);
    SegmentationHead head(store, cfg, rng);
    Var top = ag::constant(randn({2, 8, 16, 16}, 14));
    Var logits = head.forward(top);
    CHECK(logits->value.dim(1) == 1);
    CHECK(logits->value.dim(2) == 64);
    CHECK(logits->value.dim(3) == 64);
  }
  SUBCASE("two-channel logits for the standard variant") {
    ModelConfig cfg = grid_cfg({8, 16, 32, 64});
    cfg.num_classes = 2;
    cfg.loss_variant = LossVariant::standard;
    ParamStore store;
    Rng rng(7);
    SegmentationHead head(store, cfg, rng);
    Var top = ag::constant(randn({1, 8, 16, 16}, 15));
    Var logits = head.forward(top);
    CHECK(logits->value.dim(1) == 2);
    CHECK(logits->value.dim(2) == 64);
  }
}
