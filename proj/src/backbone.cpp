#include "backbone.hpp"

#include <cmath>

#include <json.hpp>

#include "core/blas.hpp"
#include "core/error.hpp"
#include "image_io.hpp"
#include "serialize.hpp"

namespace nseg {

namespace {

// Row-wise helpers over [rows, dim] matrices.

void layer_norm_rows(Tensor& x, const Tensor& gamma, const Tensor& beta) {
  const int64_t rows = x.dim(0), d = x.dim(1);
  for (int64_t r = 0; r < rows; ++r) {
    double* p = x.data() + r * d;
    double mean = 0.0;
    for (int64_t i = 0; i < d; ++i) mean += p[i];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (int64_t i = 0; i < d; ++i) {
      const double dlt = p[i] - mean;
      var += dlt * dlt;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + 1e-6);
    for (int64_t i = 0; i < d; ++i) p[i] = gamma[i] * ((p[i] - mean) * inv) + beta[i];
  }
}

void softmax_rows(Tensor& x) {
  const int64_t rows = x.dim(0), d = x.dim(1);
  for (int64_t r = 0; r < rows; ++r) {
    double* p = x.data() + r * d;
    double mx = p[0];
    for (int64_t i = 1; i < d; ++i) mx = std::max(mx, p[i]);
    double z = 0.0;
    for (int64_t i = 0; i < d; ++i) {
      p[i] = std::exp(p[i] - mx);
      z += p[i];
    }
    for (int64_t i = 0; i < d; ++i) p[i] /= z;
  }
}

void gelu_inplace(Tensor& x) {
  for (int64_t i = 0; i < x.numel(); ++i)
    x[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] * M_SQRT1_2));
}

// y = x * W^T + b, W: [out, in]
Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
  const int64_t rows = x.dim(0), in = x.dim(1), out = w.dim(0);
  Tensor y({rows, out});
  mm_nt(x.data(), w.data(), y.data(), rows, in, out);
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t o = 0; o < out; ++o) y[r * out + o] += b[o];
  return y;
}

Tensor normal_init(std::vector<int64_t> shape, double std, Rng& rng) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = std * rng.normal();
  return t;
}

}  // namespace

VitBackbone::VitBackbone(const ModelConfig& cfg, ParamStore& store, uint64_t seed)
    : cfg_(cfg), store_(&store) {
  const int64_t d = cfg.backbone_embed_dim;
  const int64_t ps = cfg.backbone_patch_size;
  const int64_t grid = cfg.input_size / cfg.backbone_patch_size;
  Rng rng(seed);
  auto add = [&](const std::string& name, Tensor t) {
    store.add_param("backbone." + name, std::move(t), /*trainable=*/false);
  };
  add("patch_embed.w", normal_init({d, 3 * ps * ps}, 0.02, rng));
  add("patch_embed.b", Tensor::zeros({d}));
  add("pos_embed", normal_init({d, grid, grid}, 0.02, rng));
  for (int i = 0; i < cfg.backbone_blocks; ++i) {
    const std::string p = "blk" + std::to_string(i) + ".";
    add(p + "ln1.gamma", Tensor::full({d}, 1.0));
    add(p + "ln1.beta", Tensor::zeros({d}));
    add(p + "qkv.w", normal_init({3 * d, d}, 0.02, rng));
    add(p + "qkv.b", Tensor::zeros({3 * d}));
    add(p + "proj.w", normal_init({d, d}, 0.02, rng));
    add(p + "proj.b", Tensor::zeros({d}));
    add(p + "ln2.gamma", Tensor::full({d}, 1.0));
    add(p + "ln2.beta", Tensor::zeros({d}));
    add(p + "mlp.fc1.w", normal_init({4 * d, d}, 0.02, rng));
    add(p + "mlp.fc1.b", Tensor::zeros({4 * d}));
    add(p + "mlp.fc2.w", normal_init({d, 4 * d}, 0.02, rng));
    add(p + "mlp.fc2.b", Tensor::zeros({d}));
  }
}

void VitBackbone::load_weights(const std::string& path) {
  ParamStore loaded;
  std::string meta_json = read_param_file(path, loaded);
  auto meta = nlohmann::json::parse(meta_json);
  const int f_embed = meta.value("embed_dim", -1);
  const int f_patch = meta.value("patch_size", -1);
  const int f_blocks = meta.value("blocks", -1);
  check(f_embed == cfg_.backbone_embed_dim && f_patch == cfg_.backbone_patch_size &&
            f_blocks == cfg_.backbone_blocks,
        Errc::weights_shape_mismatch,
        "weights file geometry (embed=" + std::to_string(f_embed) + ", patch=" +
            std::to_string(f_patch) + ", blocks=" + std::to_string(f_blocks) +
            ") does not match config (embed=" + std::to_string(cfg_.backbone_embed_dim) +
            ", patch=" + std::to_string(cfg_.backbone_patch_size) + ", blocks=" +
            std::to_string(cfg_.backbone_blocks) + ")");
  for (const auto& [name, e] : store_->params()) {
    if (name.rfind("backbone.", 0) != 0) continue;
    check(loaded.has_param(name), Errc::weights_shape_mismatch,
          "weights file missing tensor '" + name + "'");
    const Tensor& src = loaded.param(name)->value;
    check(src.same_shape(e.var->value), Errc::weights_shape_mismatch,
          "weights tensor '" + name + "' has shape " + src.shape_str() + ", expected " +
              e.var->value.shape_str());
    e.var->value = src;
  }
}

void VitBackbone::save_weights(const std::string& path) const {
  ParamStore subset;
  for (const auto& [name, e] : store_->params())
    if (name.rfind("backbone.", 0) == 0) subset.add_param(name, e.var->value, false);
  nlohmann::json meta = {{"embed_dim", cfg_.backbone_embed_dim},
                         {"patch_size", cfg_.backbone_patch_size},
                         {"blocks", cfg_.backbone_blocks}};
  write_param_file(path, subset, meta.dump());
}

Tensor VitBackbone::tokens_for_image(const Tensor& images, int64_t n, int64_t grid_h,
                                     int64_t grid_w) const {
  const int64_t ps = cfg_.backbone_patch_size;
  const int64_t d = cfg_.backbone_embed_dim;
  const int64_t t = grid_h * grid_w;
  const int64_t h = images.dim(2), w = images.dim(3);
  // Patch flattening: [T, 3*ps*ps] then linear embed.
  Tensor patches({t, 3 * ps * ps});
  for (int64_t gy = 0; gy < grid_h; ++gy)
    for (int64_t gx = 0; gx < grid_w; ++gx) {
      double* row = patches.data() + (gy * grid_w + gx) * 3 * ps * ps;
      int64_t k = 0;
      for (int64_t c = 0; c < 3; ++c)
        for (int64_t py = 0; py < ps; ++py)
          for (int64_t px = 0; px < ps; ++px, ++k)
            row[k] = images[((n * 3 + c) * h + gy * ps + py) * w + gx * ps + px];
    }
  Tensor tokens = affine(patches, store_->param("backbone.patch_embed.w")->value,
                         store_->param("backbone.patch_embed.b")->value);
  // Positional embedding, resampled if the grid differs from the base grid.
  const Tensor& pos = store_->param("backbone.pos_embed")->value;
  Tensor pos_r = (pos.dim(1) == grid_h && pos.dim(2) == grid_w)
                     ? pos
                     : resize_bilinear_chw(pos, static_cast<int>(grid_h), static_cast<int>(grid_w));
  for (int64_t ti = 0; ti < t; ++ti)
    for (int64_t di = 0; di < d; ++di) tokens[ti * d + di] += pos_r[(di * grid_h * grid_w) + ti];
  return tokens;
}

std::vector<Tensor> VitBackbone::stage_maps(const Tensor& images, int stages) const {
  check(images.rank() == 4 && images.dim(1) == 3, Errc::shape,
        "backbone: expects [N,3,H,W] images");
  const int64_t ps = cfg_.backbone_patch_size;
  check(images.dim(2) % ps == 0 && images.dim(3) % ps == 0, Errc::shape,
        "backbone: image dims must be divisible by patch_size=" + std::to_string(ps));
  const int64_t nb = images.dim(0);
  const int64_t grid_h = images.dim(2) / ps, grid_w = images.dim(3) / ps;
  const int64_t t = grid_h * grid_w;
  const int64_t d = cfg_.backbone_embed_dim;
  const int blocks = cfg_.backbone_blocks;
  const int heads = std::max(1, static_cast<int>(d / 64));
  const int64_t dh = d / heads;
  check(d % heads == 0, Errc::shape, "backbone: embed_dim must split into 64-wide heads");

  std::vector<Tensor> maps(static_cast<size_t>(stages));
  for (int s = 0; s < stages; ++s) maps[static_cast<size_t>(s)] = Tensor({nb, d, grid_h, grid_w});

  for (int64_t n = 0; n < nb; ++n) {
    Tensor x = tokens_for_image(images, n, grid_h, grid_w);
    int next_tap = 0;
    for (int b = 0; b < blocks; ++b) {
      const std::string p = "backbone.blk" + std::to_string(b) + ".";
      // Attention sublayer (pre-LN).
      Tensor xn = x;
      layer_norm_rows(xn, store_->param(p + "ln1.gamma")->value,
                      store_->param(p + "ln1.beta")->value);
      Tensor qkv = affine(xn, store_->param(p + "qkv.w")->value,
                          store_->param(p + "qkv.b")->value);
      Tensor attn_out({t, d});
      Tensor q({t, dh}), k({t, dh}), v({t, dh});
      for (int hd = 0; hd < heads; ++hd) {
        for (int64_t ti = 0; ti < t; ++ti)
          for (int64_t i = 0; i < dh; ++i) {
            q[ti * dh + i] = qkv[ti * 3 * d + hd * dh + i];
            k[ti * dh + i] = qkv[ti * 3 * d + d + hd * dh + i];
            v[ti * dh + i] = qkv[ti * 3 * d + 2 * d + hd * dh + i];
          }
        Tensor scores({t, t});
        mm_nt(q.data(), k.data(), scores.data(), t, dh, t);
        const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
        for (int64_t i = 0; i < scores.numel(); ++i) scores[i] *= scale;
        softmax_rows(scores);
        Tensor head_out({t, dh});
        mm_nn(scores.data(), v.data(), head_out.data(), t, t, dh);
        for (int64_t ti = 0; ti < t; ++ti)
          for (int64_t i = 0; i < dh; ++i) attn_out[ti * d + hd * dh + i] = head_out[ti * dh + i];
      }
      Tensor proj = affine(attn_out, store_->param(p + "proj.w")->value,
                           store_->param(p + "proj.b")->value);
      for (int64_t i = 0; i < x.numel(); ++i) x[i] += proj[i];
      // MLP sublayer.
      Tensor xm = x;
      layer_norm_rows(xm, store_->param(p + "ln2.gamma")->value,
                      store_->param(p + "ln2.beta")->value);
      Tensor h1 = affine(xm, store_->param(p + "mlp.fc1.w")->value,
                         store_->param(p + "mlp.fc1.b")->value);
      gelu_inplace(h1);
      Tensor h2 = affine(h1, store_->param(p + "mlp.fc2.w")->value,
                         store_->param(p + "mlp.fc2.b")->value);
      for (int64_t i = 0; i < x.numel(); ++i) x[i] += h2[i];

      // Tap after each equal block group.
      if (next_tap < stages && (b + 1) == ((next_tap + 1) * blocks) / stages) {
        Tensor& map = maps[static_cast<size_t>(next_tap)];
        for (int64_t ti = 0; ti < t; ++ti)
          for (int64_t di = 0; di < d; ++di)
            map[((n * d + di) * grid_h * grid_w) + ti] = x[ti * d + di];
        ++next_tap;
      }
    }
    check(next_tap == stages, Errc::shape, "backbone: fewer blocks than requested stages");
  }
  return maps;
}

BackboneBundle make_backbone(const ModelConfig& cfg, uint64_t seed) {
  BackboneBundle b;
  b.store = std::make_unique<ParamStore>();
  b.vit = std::make_unique<VitBackbone>(cfg, *b.store, seed);
  if (cfg.backbone_kind == BackboneKind::pretrained_vit) {
    check(!cfg.backbone_weights.empty(), Errc::weights_not_found,
          "backbone_kind=pretrained_vit requires backbone_weights path");
    b.vit->load_weights(cfg.backbone_weights);
  }
  return b;
}

std::vector<Tensor> extract_backbone_features(const VitBackbone& backbone, const Tensor& images,
                                              const ModelConfig& cfg) {
  std::vector<Tensor> stage = backbone.stage_maps(images, cfg.num_scales);
  const int64_t nb = images.dim(0);
  std::vector<Tensor> out;
  out.reserve(stage.size());
  for (int i = 0; i < cfg.num_scales; ++i) {
    const int64_t th = images.dim(2) / cfg.scale_strides[static_cast<size_t>(i)];
    const int64_t tw = images.dim(3) / cfg.scale_strides[static_cast<size_t>(i)];
    const Tensor& m = stage[static_cast<size_t>(i)];
    Tensor resized({nb, m.dim(1), th, tw});
    for (int64_t n = 0; n < nb; ++n) {
      // Per-sample [C,H,W] view resample.
      Tensor chw({m.dim(1), m.dim(2), m.dim(3)});
      std::copy(m.data() + n * chw.numel(), m.data() + (n + 1) * chw.numel(), chw.data());
      Tensor r = resize_bilinear_chw(chw, static_cast<int>(th), static_cast<int>(tw));
      std::copy(r.data(), r.data() + r.numel(), resized.data() + n * r.numel());
    }
    out.push_back(std::move(resized));
  }
  return out;
}

}  // namespace nseg
