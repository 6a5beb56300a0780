#include "fapm.hpp"

#include <algorithm>

#include "core/error.hpp"

namespace nseg {

using ag::Var;

int Fapm::context_width(const ModelConfig& cfg) {
  return std::max(4, cfg.decoder_widths.front() / 2);
}

namespace {

Conv2d orthogonal_pointwise(ParamStore& store, const std::string& name, int64_t in_ch,
                            int64_t out_ch, Rng& rng) {
  Conv2d c = pointwise(store, name, in_ch, out_ch, rng, /*bias=*/false);
  Tensor w = semi_orthogonal(out_ch, in_ch, rng);
  for (int64_t i = 0; i < w.numel(); ++i) c.w->value[i] = w[i];
  return c;
}

}  // namespace

Fapm::Fapm(ParamStore& store, const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
  ctx_width_ = context_width(cfg);
  const int in_ch = cfg.adapter_width;
  w_ctx_ = orthogonal_pointwise(store, "fapm.w_ctx", in_ch, ctx_width_, rng);
  for (int i = 0; i < cfg.num_scales; ++i) {
    const std::string p = "fapm.s" + std::to_string(i);
    const int w = cfg.decoder_widths[static_cast<size_t>(i)];
    ScaleStream s;
    s.width = w;
    s.w_sp = orthogonal_pointwise(store, p + ".w_sp", in_ch, w, rng);
    s.gen1 = pointwise(store, p + ".gen1", ctx_width_, w, rng);
    s.gen2 = pointwise(store, p + ".gen2", w, 2 * w, rng);
    s.dw = Conv2d::create(store, p + ".dw", w, w, 3, 1, 1, rng, /*bias=*/true, /*groups=*/w);
    s.pw = pointwise(store, p + ".pw", w, w, rng);
    const int bottleneck = std::max(1, w / 4);
    s.se1 = pointwise(store, p + ".se1", w, bottleneck, rng);
    s.se2 = pointwise(store, p + ".se2", bottleneck, w, rng);
    s.shortcut = pointwise(store, p + ".shortcut", w, w, rng);
    scales_.push_back(std::move(s));
  }
}

std::pair<Var, Var> Fapm::decompose(int scale, const Var& c_prime) const {
  check(scale >= 0 && scale < static_cast<int>(scales_.size()), Errc::shape,
        "fapm: scale out of range");
  check(c_prime->value.rank() == 4 && c_prime->value.dim(1) == cfg_.adapter_width, Errc::shape,
        "fapm decompose: expected " + std::to_string(cfg_.adapter_width) + " channels, got " +
            std::to_string(c_prime->value.dim(1)));
  return {w_ctx_(c_prime), scales_[static_cast<size_t>(scale)].w_sp(c_prime)};
}

Var Fapm::modulate(int scale, const Var& z_ctx, const Var& z_sp) const {
  const ScaleStream& s = scales_[static_cast<size_t>(scale)];
  check(z_sp->value.dim(1) == s.width, Errc::shape, "fapm modulate: Z_sp channel mismatch");
  check(z_ctx->value.dim(1) == ctx_width_, Errc::shape, "fapm modulate: Z_ctx channel mismatch");
  Var gb = s.gen2(ag::relu(s.gen1(z_ctx)));
  Var gamma = ag::slice_channels(gb, 0, s.width);
  Var beta = ag::slice_channels(gb, s.width, 2 * s.width);
  return ag::add(ag::mul(gamma, z_sp), beta);
}

Var Fapm::refine(int scale, const Var& z_mod) const {
  const ScaleStream& s = scales_[static_cast<size_t>(scale)];
  check(z_mod->value.dim(1) == s.width, Errc::shape, "fapm refine: channel mismatch");
  Var main = s.pw(s.dw(z_mod));
  Var gate = ag::sigmoid(s.se2(ag::relu(s.se1(ag::global_avg_pool(main)))));
  Var recalibrated = ag::bmul(main, gate);
  return ag::add(recalibrated, s.shortcut(z_mod));
}

std::vector<Var> Fapm::forward(const std::vector<Var>& pyramid) const {
  check(pyramid.size() == scales_.size(), Errc::shape,
        "fapm: expected " + std::to_string(scales_.size()) + " pyramid levels");
  std::vector<Var> out;
  out.reserve(pyramid.size());
  for (int i = 0; i < static_cast<int>(pyramid.size()); ++i) {
    auto [z_ctx, z_sp] = decompose(i, pyramid[static_cast<size_t>(i)]);
    out.push_back(refine(i, modulate(i, z_ctx, z_sp)));
  }
  return out;
}

Var Fapm::orthogonality_penalty() const {
  Var total;
  auto add_term = [&](const Conv2d& conv) {
    const int64_t out = conv.w->value.dim(0), in = conv.w->value.dim(1);
    Var m = ag::reshape(conv.w, {out, in});
    // Gram in the feasible direction: W W^T when out <= in, else W^T W.
    Var gram = (out <= in) ? ag::matmul(m, ag::transpose2d(m))
                           : ag::matmul(ag::transpose2d(m), m);
    const int64_t k = std::min(out, in);
    Tensor eye({k, k});
    for (int64_t i = 0; i < k; ++i) eye[i * k + i] = 1.0;
    Var dev = ag::sub(gram, ag::constant(std::move(eye)));
    Var term = ag::sum_all(ag::mul(dev, dev));
    total = total ? ag::add(total, term) : term;
  };
  add_term(w_ctx_);
  for (const auto& s : scales_) add_term(s.w_sp);
  return total;
}

}  // namespace nseg
