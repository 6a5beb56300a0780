#pragma once

#include <vector>

#include "config.hpp"
#include "core/nn.hpp"

namespace nseg {

// Fidelity-aware projection: per scale, the adapter feature is split by a
// shared context projection and a scale-specific projection (both bias-free
// 1x1 with semi-orthogonal init), the context drives an affine modulation of
// the specific stream, and a depthwise-separable + squeeze-excitation branch
// plus pointwise shortcut produce the decoder input at decoder_widths[i].
class Fapm {
 public:
  Fapm(ParamStore& store, const ModelConfig& cfg, Rng& rng);

  // Context width shared across scales: max(4, finest decoder width / 2).
  static int context_width(const ModelConfig& cfg);

  // Z_ctx (shared weights) and Z_sp (per-scale); pointwise and bias-free.
  std::pair<ag::Var, ag::Var> decompose(int scale, const ag::Var& c_prime) const;
  // (gamma, beta) = G_i(Z_ctx); Z_mod = gamma * Z_sp + beta.
  ag::Var modulate(int scale, const ag::Var& z_ctx, const ag::Var& z_sp) const;
  // S = SE(dwsep(Z_mod)) + P_i(Z_mod); output has decoder_widths[scale] channels.
  ag::Var refine(int scale, const ag::Var& z_mod) const;

  std::vector<ag::Var> forward(const std::vector<ag::Var>& pyramid) const;

  // Sum of squared Gram deviations of W_ctx / W_sp from identity (optional
  // training regularizer, weighted by cfg.orthogonality_penalty).
  ag::Var orthogonality_penalty() const;

 private:
  struct ScaleStream {
    Conv2d w_sp;
    Conv2d gen1, gen2;
    Conv2d dw, pw;       // depthwise separable
    Conv2d se1, se2;     // squeeze-excitation bottleneck
    Conv2d shortcut;     // P_i
    int width = 0;
  };

  ModelConfig cfg_;
  int ctx_width_ = 0;
  Conv2d w_ctx_;
  std::vector<ScaleStream> scales_;
};

}  // namespace nseg
