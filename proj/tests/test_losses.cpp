#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "core/error.hpp"
#include "core/rng.hpp"
#include "losses.hpp"

using namespace nseg;
using ag::Var;

namespace {

Tensor checkerboard_mask(int64_t n, int64_t h, int64_t w) {
  Tensor y({n, h, w});
  for (int64_t i = 0; i < y.numel(); ++i) y[i] = static_cast<double>(i % 2);
  return y;
}

Tensor mask_as_probs(const Tensor& y) {
  Tensor p({y.dim(0), 1, y.dim(1), y.dim(2)});
  for (int64_t i = 0; i < y.numel(); ++i) p[i] = y[i];
  return p;
}

}  // namespace

TEST_CASE("dice loss: exact endpoint cases") {
  const int64_t h = 6, w = 6;
  Tensor y = checkerboard_mask(1, h, w);

  SUBCASE("perfect binary prediction scores exactly zero") {
    CHECK(ag::scalar(dice_loss(ag::constant(mask_as_probs(y)), y)) == 0.0);
  }
  SUBCASE("inverted prediction scores 1 - eps/(HW + eps)") {
    Tensor inv = y;
    for (int64_t i = 0; i < inv.numel(); ++i) inv[i] = 1.0 - inv[i];
    const double got = ag::scalar(dice_loss(ag::constant(mask_as_probs(inv)), y));
    CHECK(got == doctest::Approx(1.0 - 1.0 / (h * w + 1.0)).epsilon(1e-12));
  }
  SUBCASE("empty mask and empty prediction: smoothing gives zero") {
    Tensor zero({1, h, w});
    CHECK(ag::scalar(dice_loss(ag::constant(mask_as_probs(zero)), zero)) == 0.0);
  }
  SUBCASE("binary symmetry: arguments can swap when both are binary") {
    Rng rng(3);
    Tensor a({1, h, w}), b({1, h, w});
    for (int64_t i = 0; i < a.numel(); ++i) {
      a[i] = rng.uniform() < 0.4 ? 1.0 : 0.0;
      b[i] = rng.uniform() < 0.6 ? 1.0 : 0.0;
    }
    CHECK(ag::scalar(dice_loss(ag::constant(mask_as_probs(a)), b)) ==
          doctest::Approx(ag::scalar(dice_loss(ag::constant(mask_as_probs(b)), a)))
              .epsilon(1e-14));
  }
  SUBCASE("moving probabilities straight toward the mask never increases the loss") {
    Rng rng(5);
    Tensor p0({1, 1, h, w});
    for (int64_t i = 0; i < p0.numel(); ++i) p0[i] = rng.uniform();
    double prev = 1e9;
    for (int step = 0; step <= 10; ++step) {
      const double t = step / 10.0;
      Tensor pt = p0;
      for (int64_t i = 0; i < pt.numel(); ++i) pt[i] = p0[i] + t * (y[i] - p0[i]);
      const double loss = ag::scalar(dice_loss(ag::constant(pt), y));
      CHECK(loss <= prev + 1e-12);
      prev = loss;
    }
  }
}

TEST_CASE("cross-entropy loss") {
  const int64_t h = 4, w = 4;
  Tensor y = checkerboard_mask(1, h, w);

  SUBCASE("uniform softmax over 2 classes costs ln 2") {
    Tensor logits({1, 2, h, w});
    CHECK(ag::scalar(ce_loss(ag::constant(logits), y)) ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));
  }
  SUBCASE("huge true-class margin drives the loss to zero") {
    Tensor logits({1, 2, h, w});
    for (int64_t i = 0; i < h * w; ++i) {
      logits[(y[i] > 0.5 ? 1 : 0) * h * w + i] = 50.0;
      logits[(y[i] > 0.5 ? 0 : 1) * h * w + i] = -50.0;
    }
    CHECK(ag::scalar(ce_loss(ag::constant(logits), y)) < 1e-8);
  }
  SUBCASE("hand case: logits (0, ln 3) on a class-1 pixel costs -ln(3/4)") {
    Tensor ones({1, 1, 1});
    ones[0] = 1.0;
    Tensor logits({1, 2, 1, 1});
    logits[0] = 0.0;
    logits[1] = std::log(3.0);
    CHECK(ag::scalar(ce_loss(ag::constant(logits), ones)) ==
          doctest::Approx(-std::log(0.75)).epsilon(1e-12));
  }
  SUBCASE("one-channel logits are rejected") {
    Tensor logits({1, 1, h, w});
    CHECK_THROWS_AS(ce_loss(ag::constant(logits), y), Error);
  }
}

TEST_CASE("binary cross-entropy loss") {
  const int64_t h = 4, w = 4;
  Tensor y = checkerboard_mask(1, h, w);

  SUBCASE("zero logits cost ln 2") {
    Tensor logits({1, 1, h, w});
    CHECK(ag::scalar(bce_loss(ag::constant(logits), y)) ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));
  }
  SUBCASE("saturated correct logits cost at most 1e-8") {
    Tensor logits({1, 1, h, w});
    for (int64_t i = 0; i < h * w; ++i) logits[i] = y[i] > 0.5 ? 20.0 : -20.0;
    CHECK(ag::scalar(bce_loss(ag::constant(logits), y)) <= 1e-8);
  }
  SUBCASE("extreme logits stay finite (softplus form)") {
    Tensor logits({1, 1, h, w});
    for (int64_t i = 0; i < h * w; ++i) logits[i] = (i % 2 ? 1000.0 : -1000.0);
    const double loss = ag::scalar(bce_loss(ag::constant(logits), y));
    CHECK(std::isfinite(loss));
    CHECK(loss >= 0.0);
  }
}

TEST_CASE("compound loss") {
  const int64_t h = 4, w = 4;
  Tensor y = checkerboard_mask(1, h, w);

  SUBCASE("perfect bce prediction: total within 1e-6 of zero") {
    Tensor logits({1, 1, h, w});
    for (int64_t i = 0; i < h * w; ++i) logits[i] = y[i] > 0.5 ? 30.0 : -30.0;
    CHECK(ag::scalar(compound_loss(ag::constant(logits), y, LossVariant::bce)) < 1e-6);
  }
  SUBCASE("uniform standard prediction on a half-foreground mask: ln 2 + dice term") {
    Tensor logits({1, 2, h, w});  // zeros -> softmax 0.5 everywhere
    // dice: inter = 0.5*n, psum = 0.5*HW, ysum = n with n = HW/2
    const double n = h * w / 2.0;
    const double dice = 1.0 - (2.0 * 0.5 * n + 1.0) / (0.5 * h * w + n + 1.0);
    CHECK(ag::scalar(compound_loss(ag::constant(logits), y, LossVariant::standard)) ==
          doctest::Approx(std::log(2.0) + dice).epsilon(1e-12));
  }
  SUBCASE("variant mismatch is rejected") {
    Tensor one_ch({1, 1, h, w});
    try {
      compound_loss(ag::constant(one_ch), y, LossVariant::standard);
      CHECK(false);
    } catch (const Error& e) {
      CHECK(e.code() == Errc::variant_mismatch);
    }
    Tensor two_ch({1, 2, h, w});
    CHECK_THROWS_AS(compound_loss(ag::constant(two_ch), y, LossVariant::bce), Error);
  }
  SUBCASE("non-negativity on random inputs, both variants") {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
      Tensor yb({2, h, w});
      for (int64_t i = 0; i < yb.numel(); ++i) yb[i] = rng.uniform() < 0.5 ? 1.0 : 0.0;
      Tensor z1({2, 1, h, w}), z2({2, 2, h, w});
      for (int64_t i = 0; i < z1.numel(); ++i) z1[i] = 3.0 * rng.normal();
      for (int64_t i = 0; i < z2.numel(); ++i) z2[i] = 3.0 * rng.normal();
      CHECK(ag::scalar(compound_loss(ag::constant(z1), yb, LossVariant::bce)) >= 0.0);
      CHECK(ag::scalar(compound_loss(ag::constant(z2), yb, LossVariant::standard)) >= 0.0);
      CHECK(ag::scalar(dice_loss(ag::sigmoid(ag::constant(z1)), yb)) >= 0.0);
    }
  }
}

TEST_CASE("compound loss gradients match central differences (8x8, both variants)") {
  Rng rng(13);
  const int64_t h = 8, w = 8;
  Tensor y({1, h, w});
  for (int64_t i = 0; i < y.numel(); ++i) y[i] = rng.uniform() < 0.5 ? 1.0 : 0.0;

  for (LossVariant variant : {LossVariant::bce, LossVariant::standard}) {
    const int64_t c = variant == LossVariant::bce ? 1 : 2;
    Var logits = ag::leaf(Tensor({1, c, h, w}));
    for (int64_t i = 0; i < logits->value.numel(); ++i) logits->value[i] = rng.normal();
    logits->grad = Tensor::zeros(logits->value.shape());
    ag::backward(compound_loss(logits, y, variant));
    const double hstep = 1e-6;
    for (int64_t i = 0; i < logits->value.numel(); ++i) {
      const double keep = logits->value[i];
      logits->value[i] = keep + hstep;
      const double up = ag::scalar(compound_loss(logits, y, variant));
      logits->value[i] = keep - hstep;
      const double down = ag::scalar(compound_loss(logits, y, variant));
      logits->value[i] = keep;
      const double fd = (up - down) / (2.0 * hstep);
      const double an = logits->grad[i];
      const double rel = std::fabs(fd - an) / std::max({std::fabs(fd), std::fabs(an), 1e-8});
      CHECK(rel <= 1e-4);
    }
  }
}
