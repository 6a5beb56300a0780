#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "core/tensor.hpp"

namespace nseg::ag {

// Reverse-mode autodiff over Tensor values. Ops record a backprop closure only
// when gradients are enabled and some input requires them, so frozen subgraphs
// (the backbone) and eval-mode forwards build no tape.

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<Var> parents;
  std::function<void()> backprop;

  Tensor& g() {
    if (grad.numel() != value.numel()) grad = Tensor::zeros(value.shape());
    return grad;
  }
};

bool grad_enabled();
void set_grad_enabled(bool on);

struct NoGrad {
  NoGrad() : prev_(grad_enabled()) { set_grad_enabled(false); }
  ~NoGrad() { set_grad_enabled(prev_); }

 private:
  bool prev_;
};

Var constant(Tensor v);
Var leaf(Tensor v, bool requires_grad = true);

// Backpropagate from a scalar root. Accumulates into existing .grad buffers of
// leaves; intermediate nodes are transient.
void backward(const Var& root);

// --- elementwise (same shape, any rank) ---
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var add_scalar(const Var& a, double s);
Var mul_scalar(const Var& a, double s);
Var relu(const Var& a);
Var gelu(const Var& a);
Var sigmoid(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var softplus(const Var& a);

// --- 4-d broadcasting (b dims each equal to a's or 1) ---
Var bmul(const Var& a, const Var& b);
Var badd(const Var& a, const Var& b);

// --- shape ---
Var reshape(const Var& a, std::vector<int64_t> shape);
Var concat_channels(const std::vector<Var>& xs);
Var slice_channels(const Var& x, int64_t c0, int64_t c1);

// --- linear algebra / nn ---
Var matmul(const Var& a, const Var& b);  // [M,K] x [K,N]
Var transpose2d(const Var& a);           // [M,N] -> [N,M]
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad, int groups = 1);
Var layer_norm_channels(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-6);
Var batch_norm2d(const Var& x, const Var& gamma, const Var& beta, Tensor* run_mean,
                 Tensor* run_var, bool training, double momentum = 0.1, double eps = 1e-5);
Var softmax_channels(const Var& x);
Var log_softmax_channels(const Var& x);

// --- geometry ---
// align-corners=false convention: source = (dst + 0.5) * in/out - 0.5, clamped.
Var bilinear_resize(const Var& x, int64_t out_h, int64_t out_w);
// Bilinear lookup of v [N,C,H,W] at per-sample pixel coordinates px, py
// [N,Hq,Wq]; coordinates are clamped to the valid range (border padding).
Var grid_sample2d(const Var& v, const Var& px, const Var& py);

// --- pooling / reductions ---
Var global_avg_pool(const Var& x);  // [N,C,H,W] -> [N,C,1,1]
Var sum_all(const Var& x);          // -> [1]
Var mean_all(const Var& x);         // -> [1]
Var sum_per_sample(const Var& x);   // [N,...] -> [N]

double scalar(const Var& x);

}  // namespace nseg::ag
