#include "losses.hpp"

#include "core/error.hpp"

namespace nseg {

using ag::Var;

namespace {

void check_mask(const Tensor& y, int64_t n, int64_t h, int64_t w, const char* op) {
  check(y.rank() == 3 && y.dim(0) == n && y.dim(1) == h && y.dim(2) == w, Errc::shape,
        std::string(op) + ": mask shape mismatch");
  for (int64_t i = 0; i < y.numel(); ++i)
    check(y[i] == 0.0 || y[i] == 1.0, Errc::shape, std::string(op) + ": mask labels must be 0/1");
}

}  // namespace

Var dice_loss(const Var& probs, const Tensor& y, double eps) {
  const Tensor& p = probs->value;
  check(p.rank() == 4 && p.dim(1) == 1, Errc::shape, "dice_loss: expects [N,1,H,W] probabilities");
  const int64_t n = p.dim(0), h = p.dim(2), w = p.dim(3);
  check_mask(y, n, h, w, "dice_loss");
  Tensor y4(std::vector<int64_t>{n, 1, h, w});
  for (int64_t i = 0; i < y.numel(); ++i) y4[i] = y[i];
  Tensor ysum({n});
  for (int64_t ni = 0; ni < n; ++ni) {
    double acc = 0.0;
    for (int64_t i = 0; i < h * w; ++i) acc += y[ni * h * w + i];
    ysum[ni] = acc;
  }
  Var inter = ag::sum_per_sample(ag::mul(probs, ag::constant(std::move(y4))));
  Var psum = ag::sum_per_sample(probs);
  Var numer = ag::add_scalar(ag::mul_scalar(inter, 2.0), eps);
  Var denom = ag::add_scalar(ag::add(psum, ag::constant(std::move(ysum))), eps);
  Var dice = ag::div(numer, denom);
  return ag::mean_all(ag::add_scalar(ag::mul_scalar(dice, -1.0), 1.0));
}

Var ce_loss(const Var& logits, const Tensor& y) {
  const Tensor& z = logits->value;
  check(z.rank() == 4 && z.dim(1) >= 2, Errc::shape, "ce_loss: expects >=2 logit channels");
  const int64_t n = z.dim(0), c = z.dim(1), h = z.dim(2), w = z.dim(3);
  check_mask(y, n, h, w, "ce_loss");
  Tensor onehot(std::vector<int64_t>{n, c, h, w});
  for (int64_t ni = 0; ni < n; ++ni)
    for (int64_t i = 0; i < h * w; ++i) {
      const int64_t cls = y[ni * h * w + i] > 0.5 ? 1 : 0;
      onehot[(ni * c + cls) * h * w + i] = 1.0;
    }
  Var logp = ag::log_softmax_channels(logits);
  Var picked = ag::mul(logp, ag::constant(std::move(onehot)));
  // Sum over classes collapses to the true-class log-prob per pixel.
  Var total = ag::sum_all(picked);
  const double npix = static_cast<double>(n * h * w);
  return ag::mul_scalar(total, -1.0 / npix);
}

Var bce_loss(const Var& logits, const Tensor& y) {
  const Tensor& z = logits->value;
  check(z.rank() == 4 && z.dim(1) == 1, Errc::shape, "bce_loss: expects 1 logit channel");
  const int64_t n = z.dim(0), h = z.dim(2), w = z.dim(3);
  check_mask(y, n, h, w, "bce_loss");
  Tensor y4(std::vector<int64_t>{n, 1, h, w});
  for (int64_t i = 0; i < y.numel(); ++i) y4[i] = y[i];
  // softplus(z) - z*y == -[y log sig(z) + (1-y) log(1-sig(z))]
  Var per_pixel = ag::sub(ag::softplus(logits), ag::mul(logits, ag::constant(std::move(y4))));
  return ag::mean_all(per_pixel);
}

Var foreground_probs(const Var& logits, LossVariant variant) {
  if (variant == LossVariant::bce) {
    check(logits->value.dim(1) == 1, Errc::variant_mismatch,
          "bce variant expects 1 logit channel, got " + std::to_string(logits->value.dim(1)));
    return ag::sigmoid(logits);
  }
  check(logits->value.dim(1) >= 2, Errc::variant_mismatch,
        "standard variant expects >=2 logit channels, got " +
            std::to_string(logits->value.dim(1)));
  return ag::slice_channels(ag::softmax_channels(logits), 1, 2);
}

Var compound_loss(const Var& logits, const Tensor& y, LossVariant variant) {
  Var probs = foreground_probs(logits, variant);
  Var dice = dice_loss(probs, y);
  Var xent = variant == LossVariant::bce ? bce_loss(logits, y) : ce_loss(logits, y);
  return ag::add(xent, dice);
}

}  // namespace nseg
