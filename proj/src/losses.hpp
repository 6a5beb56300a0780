#pragma once

#include "config.hpp"
#include "core/autograd.hpp"

namespace nseg {

// Ground truth masks are [N,H,W] tensors with values in {0,1}.

// 1 - (2*sum(p*y) + eps) / (sum(p) + sum(y) + eps), per sample over the
// foreground map, then averaged over the batch. eps = 1.0, which makes the
// empty-mask / empty-prediction case a perfect 0.
ag::Var dice_loss(const ag::Var& probs, const Tensor& y, double eps = 1.0);

// Mean per-pixel negative log softmax probability of the true class (>= 2
// logit channels).
ag::Var ce_loss(const ag::Var& logits, const Tensor& y);

// Mean per-pixel binary cross-entropy on 1-channel logits, evaluated in the
// softplus form so arbitrarily large |z| stays finite.
ag::Var bce_loss(const ag::Var& logits, const Tensor& y);

// Foreground probability map [N,1,H,W]: sigmoid for the bce variant, softmax
// channel 1 for the standard variant.
ag::Var foreground_probs(const ag::Var& logits, LossVariant variant);

// Unweighted sum of the variant's cross-entropy term and the Dice term.
// Throws Errc::variant_mismatch when the logit channels disagree with the
// variant.
ag::Var compound_loss(const ag::Var& logits, const Tensor& y, LossVariant variant);

}  // namespace nseg
