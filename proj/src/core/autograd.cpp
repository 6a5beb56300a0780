#include "core/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "core/blas.hpp"
#include "core/error.hpp"

namespace nseg::ag {

namespace {

thread_local bool g_grad_enabled = true;

Var make_node(Tensor value, std::vector<Var> parents, std::function<void()>* backprop_out,
              Node** raw_out) {
  auto out = std::make_shared<Node>();
  out->value = std::move(value);
  bool rg = false;
  if (g_grad_enabled) {
    for (const auto& p : parents)
      if (p && p->requires_grad) rg = true;
  }
  out->requires_grad = rg;
  if (rg) {
    out->parents = std::move(parents);
  }
  *raw_out = out.get();
  (void)backprop_out;
  return out;
}

// Convenience: build a node; `bp` is only attached when gradients flow.
template <typename F>
Var record(Tensor value, std::vector<Var> parents, F&& bp) {
  Node* raw = nullptr;
  Var out = make_node(std::move(value), std::move(parents), nullptr, &raw);
  if (out->requires_grad) out->backprop = [raw, bp = std::forward<F>(bp)]() { bp(*raw); };
  return out;
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
  check(a->value.same_shape(b->value), Errc::shape,
        std::string(op) + ": shape mismatch " + a->value.shape_str() + " vs " +
            b->value.shape_str());
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }
void set_grad_enabled(bool on) { g_grad_enabled = on; }

Var constant(Tensor v) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->requires_grad = false;
  return n;
}

Var leaf(Tensor v, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->requires_grad = requires_grad;
  return n;
}

void backward(const Var& root) {
  check(root->value.numel() == 1, Errc::shape, "backward: root must be scalar");
  // Iterative post-order DFS over the recorded tape.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack;
  if (root->requires_grad) stack.emplace_back(root.get(), 0);
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node* p = node->parents[idx].get();
      ++idx;
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root->g()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backprop) (*it)->backprop();
  }
}

// ---------------------------------------------------------------- elementwise

namespace {

template <typename FwdF, typename BwdF>
Var unary_op(const Var& a, FwdF fwd, BwdF dfn) {
  Tensor out(a->value.shape());
  const int64_t n = a->value.numel();
  for (int64_t i = 0; i < n; ++i) out[i] = fwd(a->value[i]);
  return record(std::move(out), {a}, [a, dfn](Node& o) {
    Tensor& ga = a->g();
    const int64_t m = o.value.numel();
    for (int64_t i = 0; i < m; ++i) ga[i] += o.grad[i] * dfn(a->value[i], o.value[i]);
  });
}

}  // namespace

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  Tensor out(a->value.shape());
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) out[i] = a->value[i] + b->value[i];
  return record(std::move(out), {a, b}, [a, b](Node& o) {
    const int64_t m = o.value.numel();
    if (a->requires_grad) {
      Tensor& ga = a->g();
      for (int64_t i = 0; i < m; ++i) ga[i] += o.grad[i];
    }
    if (b->requires_grad) {
      Tensor& gb = b->g();
      for (int64_t i = 0; i < m; ++i) gb[i] += o.grad[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  Tensor out(a->value.shape());
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) out[i] = a->value[i] - b->value[i];
  return record(std::move(out), {a, b}, [a, b](Node& o) {
    const int64_t m = o.value.numel();
    if (a->requires_grad) {
      Tensor& ga = a->g();
      for (int64_t i = 0; i < m; ++i) ga[i] += o.grad[i];
    }
    if (b->requires_grad) {
      Tensor& gb = b->g();
      for (int64_t i = 0; i < m; ++i) gb[i] -= o.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  Tensor out(a->value.shape());
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) out[i] = a->value[i] * b->value[i];
  return record(std::move(out), {a, b}, [a, b](Node& o) {
    const int64_t m = o.value.numel();
    if (a->requires_grad) {
      Tensor& ga = a->g();
      for (int64_t i = 0; i < m; ++i) ga[i] += o.grad[i] * b->value[i];
    }
    if (b->requires_grad) {
      Tensor& gb = b->g();
      for (int64_t i = 0; i < m; ++i) gb[i] += o.grad[i] * a->value[i];
    }
  });
}

Var div(const Var& a, const Var& b) {
  check_same_shape(a, b, "div");
  Tensor out(a->value.shape());
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) out[i] = a->value[i] / b->value[i];
  return record(std::move(out), {a, b}, [a, b](Node& o) {
    const int64_t m = o.value.numel();
    if (a->requires_grad) {
      Tensor& ga = a->g();
      for (int64_t i = 0; i < m; ++i) ga[i] += o.grad[i] / b->value[i];
    }
    if (b->requires_grad) {
      Tensor& gb = b->g();
      for (int64_t i = 0; i < m; ++i)
        gb[i] -= o.grad[i] * a->value[i] / (b->value[i] * b->value[i]);
    }
  });
}

Var add_scalar(const Var& a, double s) {
  Tensor out(a->value.shape());
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) out[i] = a->value[i] + s;
  return record(std::move(out), {a}, [a](Node& o) {
    Tensor& ga = a->g();
    const int64_t m = o.value.numel();
    for (int64_t i = 0; i < m; ++i) ga[i] += o.grad[i];
  });
}

Var mul_scalar(const Var& a, double s) {
  Tensor out(a->value.shape());
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) out[i] = a->value[i] * s;
  return record(std::move(out), {a}, [a, s](Node& o) {
    Tensor& ga = a->g();
    const int64_t m = o.value.numel();
    for (int64_t i = 0; i < m; ++i) ga[i] += o.grad[i] * s;
  });
}

Var relu(const Var& a) {
  return unary_op(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var gelu(const Var& a) {
  return unary_op(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); },
      [](double x, double) {
        const double phi = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
        return 0.5 * (1.0 + std::erf(x * M_SQRT1_2)) + x * phi;
      });
}

Var sigmoid(const Var& a) {
  return unary_op(
      a,
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var exp(const Var& a) {
  return unary_op(a, [](double x) { return std::exp(x); },
                  [](double, double y) { return y; });
}

Var log(const Var& a) {
  return unary_op(a, [](double x) { return std::log(x); },
                  [](double x, double) { return 1.0 / x; });
}

Var softplus(const Var& a) {
  return unary_op(
      a, [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x))); },
      [](double x, double) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      });
}

// ---------------------------------------------------------------- broadcast

namespace {

struct Bcast4 {
  int64_t n, c, h, w;        // output dims (from a)
  int64_t sn, sc, sh, sw;    // strides into b (0 on broadcast dims)
};

Bcast4 bcast_plan(const Tensor& a, const Tensor& b, const char* op) {
  check(a.rank() == 4 && b.rank() == 4, Errc::shape, std::string(op) + ": expects 4-d tensors");
  for (int i = 0; i < 4; ++i)
    check(b.dim(i) == a.dim(i) || b.dim(i) == 1, Errc::shape,
          std::string(op) + ": not broadcastable " + a.shape_str() + " vs " + b.shape_str());
  Bcast4 p{};
  p.n = a.dim(0);
  p.c = a.dim(1);
  p.h = a.dim(2);
  p.w = a.dim(3);
  int64_t stride = 1;
  int64_t strides[4];
  for (int i = 3; i >= 0; --i) {
    strides[i] = (b.dim(i) == 1) ? 0 : stride;
    stride *= b.dim(i);
  }
  p.sn = strides[0];
  p.sc = strides[1];
  p.sh = strides[2];
  p.sw = strides[3];
  return p;
}

}  // namespace

Var bmul(const Var& a, const Var& b) {
  Bcast4 p = bcast_plan(a->value, b->value, "bmul");
  Tensor out(a->value.shape());
  int64_t i = 0;
  for (int64_t n = 0; n < p.n; ++n)
    for (int64_t c = 0; c < p.c; ++c)
      for (int64_t h = 0; h < p.h; ++h)
        for (int64_t w = 0; w < p.w; ++w, ++i)
          out[i] = a->value[i] * b->value[n * p.sn + c * p.sc + h * p.sh + w * p.sw];
  return record(std::move(out), {a, b}, [a, b, p](Node& o) {
    int64_t i = 0;
    Tensor* ga = a->requires_grad ? &a->g() : nullptr;
    Tensor* gb = b->requires_grad ? &b->g() : nullptr;
    for (int64_t n = 0; n < p.n; ++n)
      for (int64_t c = 0; c < p.c; ++c)
        for (int64_t h = 0; h < p.h; ++h)
          for (int64_t w = 0; w < p.w; ++w, ++i) {
            const int64_t bi = n * p.sn + c * p.sc + h * p.sh + w * p.sw;
            if (ga) (*ga)[i] += o.grad[i] * b->value[bi];
            if (gb) (*gb)[bi] += o.grad[i] * a->value[i];
          }
  });
}

Var badd(const Var& a, const Var& b) {
  Bcast4 p = bcast_plan(a->value, b->value, "badd");
  Tensor out(a->value.shape());
  int64_t i = 0;
  for (int64_t n = 0; n < p.n; ++n)
    for (int64_t c = 0; c < p.c; ++c)
      for (int64_t h = 0; h < p.h; ++h)
        for (int64_t w = 0; w < p.w; ++w, ++i)
          out[i] = a->value[i] + b->value[n * p.sn + c * p.sc + h * p.sh + w * p.sw];
  return record(std::move(out), {a, b}, [a, b, p](Node& o) {
    int64_t i = 0;
    Tensor* ga = a->requires_grad ? &a->g() : nullptr;
    Tensor* gb = b->requires_grad ? &b->g() : nullptr;
    for (int64_t n = 0; n < p.n; ++n)
      for (int64_t c = 0; c < p.c; ++c)
        for (int64_t h = 0; h < p.h; ++h)
          for (int64_t w = 0; w < p.w; ++w, ++i) {
            if (ga) (*ga)[i] += o.grad[i];
            if (gb) (*gb)[n * p.sn + c * p.sc + h * p.sh + w * p.sw] += o.grad[i];
          }
  });
}

// ---------------------------------------------------------------- shape

Var reshape(const Var& a, std::vector<int64_t> shape) {
  check(shape_numel(shape) == a->value.numel(), Errc::shape, "reshape: element count mismatch");
  Tensor out(std::move(shape));
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) out[i] = a->value[i];
  return record(std::move(out), {a}, [a](Node& o) {
    Tensor& ga = a->g();
    const int64_t m = o.value.numel();
    for (int64_t i = 0; i < m; ++i) ga[i] += o.grad[i];
  });
}

Var concat_channels(const std::vector<Var>& xs) {
  check(!xs.empty(), Errc::shape, "concat_channels: empty input");
  const Tensor& first = xs[0]->value;
  check(first.rank() == 4, Errc::shape, "concat_channels: expects 4-d tensors");
  const int64_t n = first.dim(0), h = first.dim(2), w = first.dim(3);
  int64_t ctotal = 0;
  for (const auto& x : xs) {
    check(x->value.rank() == 4 && x->value.dim(0) == n && x->value.dim(2) == h &&
              x->value.dim(3) == w,
          Errc::shape, "concat_channels: spatial/batch mismatch");
    ctotal += x->value.dim(1);
  }
  Tensor out({n, ctotal, h, w});
  int64_t coff = 0;
  for (const auto& x : xs) {
    const int64_t cx = x->value.dim(1);
    for (int64_t ni = 0; ni < n; ++ni)
      for (int64_t c = 0; c < cx; ++c)
        for (int64_t hi = 0; hi < h; ++hi)
          for (int64_t wi = 0; wi < w; ++wi)
            out.at(ni, coff + c, hi, wi) = x->value.at(ni, c, hi, wi);
    coff += cx;
  }
  return record(std::move(out), xs, [xs, n, h, w](Node& o) {
    int64_t coff = 0;
    for (const auto& x : xs) {
      const int64_t cx = x->value.dim(1);
      if (x->requires_grad) {
        Tensor& gx = x->g();
        for (int64_t ni = 0; ni < n; ++ni)
          for (int64_t c = 0; c < cx; ++c)
            for (int64_t hi = 0; hi < h; ++hi)
              for (int64_t wi = 0; wi < w; ++wi)
                gx.at(ni, c, hi, wi) += o.grad[((ni * o.value.dim(1) + coff + c) * h + hi) * w + wi];
      }
      coff += cx;
    }
  });
}

Var slice_channels(const Var& x, int64_t c0, int64_t c1) {
  const Tensor& v = x->value;
  check(v.rank() == 4 && c0 >= 0 && c1 <= v.dim(1) && c0 < c1, Errc::shape,
        "slice_channels: bad channel range");
  const int64_t n = v.dim(0), h = v.dim(2), w = v.dim(3), cs = c1 - c0;
  Tensor out({n, cs, h, w});
  for (int64_t ni = 0; ni < n; ++ni)
    for (int64_t c = 0; c < cs; ++c)
      for (int64_t hi = 0; hi < h; ++hi)
        for (int64_t wi = 0; wi < w; ++wi) out.at(ni, c, hi, wi) = v.at(ni, c0 + c, hi, wi);
  return record(std::move(out), {x}, [x, c0, cs, n, h, w](Node& o) {
    Tensor& gx = x->g();
    for (int64_t ni = 0; ni < n; ++ni)
      for (int64_t c = 0; c < cs; ++c)
        for (int64_t hi = 0; hi < h; ++hi)
          for (int64_t wi = 0; wi < w; ++wi)
            gx.at(ni, c0 + c, hi, wi) += o.grad[((ni * cs + c) * h + hi) * w + wi];
  });
}

// ---------------------------------------------------------------- linalg / nn

Var matmul(const Var& a, const Var& b) {
  const Tensor& av = a->value;
  const Tensor& bv = b->value;
  check(av.rank() == 2 && bv.rank() == 2 && av.dim(1) == bv.dim(0), Errc::shape,
        "matmul: incompatible shapes " + av.shape_str() + " x " + bv.shape_str());
  const int64_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out({m, n});
  mm_nn(av.data(), bv.data(), out.data(), m, k, n);
  return record(std::move(out), {a, b}, [a, b, m, k, n](Node& o) {
    if (a->requires_grad) mm_nt(o.grad.data(), b->value.data(), a->g().data(), m, n, k);
    if (b->requires_grad) mm_tn(a->value.data(), o.grad.data(), b->g().data(), k, m, n);
  });
}

Var transpose2d(const Var& a) {
  const Tensor& v = a->value;
  check(v.rank() == 2, Errc::shape, "transpose2d: expects 2-d tensor");
  const int64_t m = v.dim(0), n = v.dim(1);
  Tensor out({n, m});
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out[j * m + i] = v[i * n + j];
  return record(std::move(out), {a}, [a, m, n](Node& o) {
    Tensor& ga = a->g();
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j) ga[i * n + j] += o.grad[j * m + i];
  });
}

namespace {

struct ConvDims {
  int64_t n, ci, h, w, co, cig, cog, kh, kw, ho, wo;
  int stride, pad, groups;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, int stride, int pad, int groups) {
  check(x.rank() == 4 && w.rank() == 4, Errc::shape, "conv2d: expects 4-d tensors");
  ConvDims d{};
  d.n = x.dim(0);
  d.ci = x.dim(1);
  d.h = x.dim(2);
  d.w = x.dim(3);
  d.co = w.dim(0);
  d.cig = w.dim(1);
  d.kh = w.dim(2);
  d.kw = w.dim(3);
  d.stride = stride;
  d.pad = pad;
  d.groups = groups;
  check(d.ci % groups == 0 && d.co % groups == 0, Errc::shape, "conv2d: groups must divide channels");
  check(d.cig == d.ci / groups, Errc::shape,
        "conv2d: weight in-channels mismatch (got " + w.shape_str() + " for input " +
            x.shape_str() + ")");
  d.cog = d.co / groups;
  d.ho = (d.h + 2 * pad - d.kh) / stride + 1;
  d.wo = (d.w + 2 * pad - d.kw) / stride + 1;
  check(d.ho > 0 && d.wo > 0, Errc::shape, "conv2d: output would be empty");
  return d;
}

void im2col(const Tensor& x, const ConvDims& d, int64_t n, int group, double* col) {
  const int64_t rows = d.cig * d.kh * d.kw;
  const int64_t cols = d.ho * d.wo;
  int64_t r = 0;
  for (int64_t c = 0; c < d.cig; ++c) {
    const int64_t ci = group * d.cig + c;
    for (int64_t ky = 0; ky < d.kh; ++ky) {
      for (int64_t kx = 0; kx < d.kw; ++kx, ++r) {
        double* dst = col + r * cols;
        for (int64_t oy = 0; oy < d.ho; ++oy) {
          const int64_t iy = oy * d.stride - d.pad + ky;
          for (int64_t ox = 0; ox < d.wo; ++ox) {
            const int64_t ix = ox * d.stride - d.pad + kx;
            dst[oy * d.wo + ox] =
                (iy >= 0 && iy < d.h && ix >= 0 && ix < d.w) ? x.at(n, ci, iy, ix) : 0.0;
          }
        }
      }
    }
  }
  (void)rows;
}

void col2im_accum(const double* col, const ConvDims& d, int64_t n, int group, Tensor& gx) {
  const int64_t cols = d.ho * d.wo;
  int64_t r = 0;
  for (int64_t c = 0; c < d.cig; ++c) {
    const int64_t ci = group * d.cig + c;
    for (int64_t ky = 0; ky < d.kh; ++ky) {
      for (int64_t kx = 0; kx < d.kw; ++kx, ++r) {
        const double* src = col + r * cols;
        for (int64_t oy = 0; oy < d.ho; ++oy) {
          const int64_t iy = oy * d.stride - d.pad + ky;
          if (iy < 0 || iy >= d.h) continue;
          for (int64_t ox = 0; ox < d.wo; ++ox) {
            const int64_t ix = ox * d.stride - d.pad + kx;
            if (ix < 0 || ix >= d.w) continue;
            gx.at(n, ci, iy, ix) += src[oy * d.wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad, int groups) {
  ConvDims d = conv_dims(x->value, w->value, stride, pad, groups);
  if (b) check(b->value.numel() == d.co, Errc::shape, "conv2d: bias size mismatch");

  const int64_t rows = d.cig * d.kh * d.kw;
  const int64_t cols = d.ho * d.wo;
  Tensor out({d.n, d.co, d.ho, d.wo});
  std::vector<double> col(static_cast<size_t>(rows * cols));
  for (int64_t n = 0; n < d.n; ++n) {
    for (int g = 0; g < d.groups; ++g) {
      im2col(x->value, d, n, g, col.data());
      double* out_g = out.data() + ((n * d.co + g * d.cog) * d.ho * d.wo);
      const double* w_g = w->value.data() + g * d.cog * rows;
      mm_nn(w_g, col.data(), out_g, d.cog, rows, cols);
    }
  }
  if (b) {
    for (int64_t n = 0; n < d.n; ++n)
      for (int64_t c = 0; c < d.co; ++c) {
        const double bias = b->value[c];
        double* p = out.data() + (n * d.co + c) * cols;
        for (int64_t i = 0; i < cols; ++i) p[i] += bias;
      }
  }

  std::vector<Var> parents = b ? std::vector<Var>{x, w, b} : std::vector<Var>{x, w};
  return record(std::move(out), std::move(parents), [x, w, b, d, rows, cols](Node& o) {
    std::vector<double> col(static_cast<size_t>(rows * cols));
    std::vector<double> dcol(static_cast<size_t>(rows * cols));
    Tensor* gx = x->requires_grad ? &x->g() : nullptr;
    Tensor* gw = w->requires_grad ? &w->g() : nullptr;
    for (int64_t n = 0; n < d.n; ++n) {
      for (int g = 0; g < d.groups; ++g) {
        const double* gout_g = o.grad.data() + ((n * d.co + g * d.cog) * cols);
        if (gw) {
          im2col(x->value, d, n, g, col.data());
          mm_nt(gout_g, col.data(), gw->data() + g * d.cog * rows, d.cog, cols, rows);
        }
        if (gx) {
          std::fill(dcol.begin(), dcol.end(), 0.0);
          const double* w_g = w->value.data() + g * d.cog * rows;
          mm_tn(w_g, gout_g, dcol.data(), rows, d.cog, cols);
          col2im_accum(dcol.data(), d, n, g, *gx);
        }
      }
    }
    if (b && b->requires_grad) {
      Tensor& gb = b->g();
      for (int64_t n = 0; n < d.n; ++n)
        for (int64_t c = 0; c < d.co; ++c) {
          const double* p = o.grad.data() + (n * d.co + c) * cols;
          double acc = 0.0;
          for (int64_t i = 0; i < cols; ++i) acc += p[i];
          gb[c] += acc;
        }
    }
  });
}

Var layer_norm_channels(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Tensor& v = x->value;
  check(v.rank() == 4, Errc::shape, "layer_norm_channels: expects 4-d input");
  const int64_t n = v.dim(0), c = v.dim(1), h = v.dim(2), w = v.dim(3);
  check(gamma->value.numel() == c && beta->value.numel() == c, Errc::shape,
        "layer_norm_channels: affine size mismatch");
  Tensor out(v.shape());
  Tensor xhat(v.shape());
  Tensor inv_std({n, h, w});
  const int64_t hw = h * w;
  for (int64_t ni = 0; ni < n; ++ni)
    for (int64_t p = 0; p < hw; ++p) {
      double mean = 0.0;
      for (int64_t ci = 0; ci < c; ++ci) mean += v[(ni * c + ci) * hw + p];
      mean /= static_cast<double>(c);
      double var = 0.0;
      for (int64_t ci = 0; ci < c; ++ci) {
        const double dlt = v[(ni * c + ci) * hw + p] - mean;
        var += dlt * dlt;
      }
      var /= static_cast<double>(c);
      const double inv = 1.0 / std::sqrt(var + eps);
      inv_std[ni * hw + p] = inv;
      for (int64_t ci = 0; ci < c; ++ci) {
        const double xh = (v[(ni * c + ci) * hw + p] - mean) * inv;
        xhat[(ni * c + ci) * hw + p] = xh;
        out[(ni * c + ci) * hw + p] = gamma->value[ci] * xh + beta->value[ci];
      }
    }
  return record(std::move(out), {x, gamma, beta},
                [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), n, c, h,
                 w](Node& o) {
                  const int64_t hw = h * w;
                  Tensor* gx = x->requires_grad ? &x->g() : nullptr;
                  Tensor* gg = gamma->requires_grad ? &gamma->g() : nullptr;
                  Tensor* gb = beta->requires_grad ? &beta->g() : nullptr;
                  for (int64_t ni = 0; ni < n; ++ni)
                    for (int64_t p = 0; p < hw; ++p) {
                      double sum_dyh = 0.0, sum_dyh_xh = 0.0;
                      for (int64_t ci = 0; ci < c; ++ci) {
                        const int64_t i = (ni * c + ci) * hw + p;
                        const double dyh = o.grad[i] * gamma->value[ci];
                        sum_dyh += dyh;
                        sum_dyh_xh += dyh * xhat[i];
                        if (gg) (*gg)[ci] += o.grad[i] * xhat[i];
                        if (gb) (*gb)[ci] += o.grad[i];
                      }
                      if (gx) {
                        const double inv = inv_std[ni * hw + p];
                        const double mc = 1.0 / static_cast<double>(c);
                        for (int64_t ci = 0; ci < c; ++ci) {
                          const int64_t i = (ni * c + ci) * hw + p;
                          const double dyh = o.grad[i] * gamma->value[ci];
                          (*gx)[i] += inv * (dyh - mc * sum_dyh - xhat[i] * mc * sum_dyh_xh);
                        }
                      }
                    }
                });
}

Var batch_norm2d(const Var& x, const Var& gamma, const Var& beta, Tensor* run_mean,
                 Tensor* run_var, bool training, double momentum, double eps) {
  const Tensor& v = x->value;
  check(v.rank() == 4, Errc::shape, "batch_norm2d: expects 4-d input");
  const int64_t n = v.dim(0), c = v.dim(1), h = v.dim(2), w = v.dim(3);
  check(gamma->value.numel() == c && beta->value.numel() == c, Errc::shape,
        "batch_norm2d: affine size mismatch");
  check(run_mean && run_var && run_mean->numel() == c && run_var->numel() == c, Errc::shape,
        "batch_norm2d: running stats size mismatch");
  const int64_t hw = h * w;
  const int64_t m = n * hw;
  Tensor out(v.shape());
  if (training) {
    Tensor mean({c}), inv_std({c});
    Tensor xhat(v.shape());
    for (int64_t ci = 0; ci < c; ++ci) {
      double mu = 0.0;
      for (int64_t ni = 0; ni < n; ++ni) {
        const double* p = v.data() + (ni * c + ci) * hw;
        for (int64_t i = 0; i < hw; ++i) mu += p[i];
      }
      mu /= static_cast<double>(m);
      double var = 0.0;
      for (int64_t ni = 0; ni < n; ++ni) {
        const double* p = v.data() + (ni * c + ci) * hw;
        for (int64_t i = 0; i < hw; ++i) {
          const double dlt = p[i] - mu;
          var += dlt * dlt;
        }
      }
      var /= static_cast<double>(m);
      const double inv = 1.0 / std::sqrt(var + eps);
      mean[ci] = mu;
      inv_std[ci] = inv;
      const double unbiased = m > 1 ? var * static_cast<double>(m) / static_cast<double>(m - 1) : var;
      (*run_mean)[ci] = (1.0 - momentum) * (*run_mean)[ci] + momentum * mu;
      (*run_var)[ci] = (1.0 - momentum) * (*run_var)[ci] + momentum * unbiased;
      for (int64_t ni = 0; ni < n; ++ni)
        for (int64_t i = 0; i < hw; ++i) {
          const int64_t idx = (ni * c + ci) * hw + i;
          const double xh = (v[idx] - mu) * inv;
          xhat[idx] = xh;
          out[idx] = gamma->value[ci] * xh + beta->value[ci];
        }
    }
    return record(std::move(out), {x, gamma, beta},
                  [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), n, c, hw,
                   m](Node& o) {
                    Tensor* gx = x->requires_grad ? &x->g() : nullptr;
                    Tensor* gg = gamma->requires_grad ? &gamma->g() : nullptr;
                    Tensor* gb = beta->requires_grad ? &beta->g() : nullptr;
                    for (int64_t ci = 0; ci < c; ++ci) {
                      double sum_dy = 0.0, sum_dy_xh = 0.0;
                      for (int64_t ni = 0; ni < n; ++ni)
                        for (int64_t i = 0; i < hw; ++i) {
                          const int64_t idx = (ni * c + ci) * hw + i;
                          sum_dy += o.grad[idx];
                          sum_dy_xh += o.grad[idx] * xhat[idx];
                        }
                      if (gg) (*gg)[ci] += sum_dy_xh;
                      if (gb) (*gb)[ci] += sum_dy;
                      if (gx) {
                        const double scale = gamma->value[ci] * inv_std[ci];
                        const double invm = 1.0 / static_cast<double>(m);
                        for (int64_t ni = 0; ni < n; ++ni)
                          for (int64_t i = 0; i < hw; ++i) {
                            const int64_t idx = (ni * c + ci) * hw + i;
                            (*gx)[idx] += scale * (o.grad[idx] - invm * sum_dy -
                                                   xhat[idx] * invm * sum_dy_xh);
                          }
                      }
                    }
                  });
  }

  // Eval mode: frozen running statistics.
  Tensor inv_std({c});
  for (int64_t ci = 0; ci < c; ++ci) inv_std[ci] = 1.0 / std::sqrt((*run_var)[ci] + eps);
  for (int64_t ni = 0; ni < n; ++ni)
    for (int64_t ci = 0; ci < c; ++ci)
      for (int64_t i = 0; i < hw; ++i) {
        const int64_t idx = (ni * c + ci) * hw + i;
        out[idx] = gamma->value[ci] * ((v[idx] - (*run_mean)[ci]) * inv_std[ci]) + beta->value[ci];
      }
  Tensor rm = *run_mean;
  return record(std::move(out), {x, gamma, beta},
                [x, gamma, beta, inv_std = std::move(inv_std), rm = std::move(rm), n, c,
                 hw](Node& o) {
                  Tensor* gx = x->requires_grad ? &x->g() : nullptr;
                  Tensor* gg = gamma->requires_grad ? &gamma->g() : nullptr;
                  Tensor* gb = beta->requires_grad ? &beta->g() : nullptr;
                  for (int64_t ni = 0; ni < n; ++ni)
                    for (int64_t ci = 0; ci < c; ++ci)
                      for (int64_t i = 0; i < hw; ++i) {
                        const int64_t idx = (ni * c + ci) * hw + i;
                        const double xh = (x->value[idx] - rm[ci]) * inv_std[ci];
                        if (gx) (*gx)[idx] += o.grad[idx] * gamma->value[ci] * inv_std[ci];
                        if (gg) (*gg)[ci] += o.grad[idx] * xh;
                        if (gb) (*gb)[ci] += o.grad[idx];
                      }
                });
}

Var softmax_channels(const Var& x) {
  const Tensor& v = x->value;
  check(v.rank() == 4, Errc::shape, "softmax_channels: expects 4-d input");
  const int64_t n = v.dim(0), c = v.dim(1), hw = v.dim(2) * v.dim(3);
  Tensor out(v.shape());
  for (int64_t ni = 0; ni < n; ++ni)
    for (int64_t p = 0; p < hw; ++p) {
      double mx = -1e300;
      for (int64_t ci = 0; ci < c; ++ci) mx = std::max(mx, v[(ni * c + ci) * hw + p]);
      double z = 0.0;
      for (int64_t ci = 0; ci < c; ++ci) {
        const double e = std::exp(v[(ni * c + ci) * hw + p] - mx);
        out[(ni * c + ci) * hw + p] = e;
        z += e;
      }
      for (int64_t ci = 0; ci < c; ++ci) out[(ni * c + ci) * hw + p] /= z;
    }
  return record(std::move(out), {x}, [x, n, c, hw](Node& o) {
    Tensor& gx = x->g();
    for (int64_t ni = 0; ni < n; ++ni)
      for (int64_t p = 0; p < hw; ++p) {
        double dot = 0.0;
        for (int64_t ci = 0; ci < c; ++ci) {
          const int64_t i = (ni * c + ci) * hw + p;
          dot += o.grad[i] * o.value[i];
        }
        for (int64_t ci = 0; ci < c; ++ci) {
          const int64_t i = (ni * c + ci) * hw + p;
          gx[i] += o.value[i] * (o.grad[i] - dot);
        }
      }
  });
}

Var log_softmax_channels(const Var& x) {
  const Tensor& v = x->value;
  check(v.rank() == 4, Errc::shape, "log_softmax_channels: expects 4-d input");
  const int64_t n = v.dim(0), c = v.dim(1), hw = v.dim(2) * v.dim(3);
  Tensor out(v.shape());
  for (int64_t ni = 0; ni < n; ++ni)
    for (int64_t p = 0; p < hw; ++p) {
      double mx = -1e300;
      for (int64_t ci = 0; ci < c; ++ci) mx = std::max(mx, v[(ni * c + ci) * hw + p]);
      double z = 0.0;
      for (int64_t ci = 0; ci < c; ++ci) z += std::exp(v[(ni * c + ci) * hw + p] - mx);
      const double lz = mx + std::log(z);
      for (int64_t ci = 0; ci < c; ++ci)
        out[(ni * c + ci) * hw + p] = v[(ni * c + ci) * hw + p] - lz;
    }
  return record(std::move(out), {x}, [x, n, c, hw](Node& o) {
    Tensor& gx = x->g();
    for (int64_t ni = 0; ni < n; ++ni)
      for (int64_t p = 0; p < hw; ++p) {
        double gsum = 0.0;
        for (int64_t ci = 0; ci < c; ++ci) gsum += o.grad[(ni * c + ci) * hw + p];
        for (int64_t ci = 0; ci < c; ++ci) {
          const int64_t i = (ni * c + ci) * hw + p;
          gx[i] += o.grad[i] - std::exp(o.value[i]) * gsum;
        }
      }
  });
}

// ---------------------------------------------------------------- geometry

namespace {

struct LinTap {
  int64_t i0, i1;
  double f;  // weight of i1
};

inline LinTap resize_tap(int64_t dst, int64_t out_n, int64_t in_n) {
  double src = (static_cast<double>(dst) + 0.5) * static_cast<double>(in_n) /
                   static_cast<double>(out_n) -
               0.5;
  src = std::min(std::max(src, 0.0), static_cast<double>(in_n - 1));
  LinTap t;
  t.i0 = static_cast<int64_t>(std::floor(src));
  t.f = src - static_cast<double>(t.i0);
  t.i1 = std::min(t.i0 + 1, in_n - 1);
  return t;
}

}  // namespace

Var bilinear_resize(const Var& x, int64_t out_h, int64_t out_w) {
  const Tensor& v = x->value;
  check(v.rank() == 4, Errc::shape, "bilinear_resize: expects 4-d input");
  const int64_t n = v.dim(0), c = v.dim(1), h = v.dim(2), w = v.dim(3);
  if (out_h == h && out_w == w) {
    // Identity resample: still record a pass-through for uniform graph shape.
    return add_scalar(x, 0.0);
  }
  std::vector<LinTap> ty(static_cast<size_t>(out_h)), tx(static_cast<size_t>(out_w));
  for (int64_t oy = 0; oy < out_h; ++oy) ty[static_cast<size_t>(oy)] = resize_tap(oy, out_h, h);
  for (int64_t ox = 0; ox < out_w; ++ox) tx[static_cast<size_t>(ox)] = resize_tap(ox, out_w, w);
  Tensor out({n, c, out_h, out_w});
  for (int64_t ni = 0; ni < n; ++ni)
    for (int64_t ci = 0; ci < c; ++ci) {
      const double* src = v.data() + (ni * c + ci) * h * w;
      double* dst = out.data() + (ni * c + ci) * out_h * out_w;
      for (int64_t oy = 0; oy < out_h; ++oy) {
        const LinTap& y = ty[static_cast<size_t>(oy)];
        for (int64_t ox = 0; ox < out_w; ++ox) {
          const LinTap& xx = tx[static_cast<size_t>(ox)];
          const double v00 = src[y.i0 * w + xx.i0];
          const double v01 = src[y.i0 * w + xx.i1];
          const double v10 = src[y.i1 * w + xx.i0];
          const double v11 = src[y.i1 * w + xx.i1];
          dst[oy * out_w + ox] = (1.0 - y.f) * ((1.0 - xx.f) * v00 + xx.f * v01) +
                                 y.f * ((1.0 - xx.f) * v10 + xx.f * v11);
        }
      }
    }
  return record(std::move(out), {x},
                [x, ty = std::move(ty), tx = std::move(tx), n, c, h, w, out_h, out_w](Node& o) {
                  Tensor& gx = x->g();
                  for (int64_t ni = 0; ni < n; ++ni)
                    for (int64_t ci = 0; ci < c; ++ci) {
                      double* gsrc = gx.data() + (ni * c + ci) * h * w;
                      const double* gdst = o.grad.data() + (ni * c + ci) * out_h * out_w;
                      for (int64_t oy = 0; oy < out_h; ++oy) {
                        const LinTap& y = ty[static_cast<size_t>(oy)];
                        for (int64_t ox = 0; ox < out_w; ++ox) {
                          const LinTap& xx = tx[static_cast<size_t>(ox)];
                          const double g = gdst[oy * out_w + ox];
                          gsrc[y.i0 * w + xx.i0] += g * (1.0 - y.f) * (1.0 - xx.f);
                          gsrc[y.i0 * w + xx.i1] += g * (1.0 - y.f) * xx.f;
                          gsrc[y.i1 * w + xx.i0] += g * y.f * (1.0 - xx.f);
                          gsrc[y.i1 * w + xx.i1] += g * y.f * xx.f;
                        }
                      }
                    }
                });
}

Var grid_sample2d(const Var& v, const Var& px, const Var& py) {
  const Tensor& vv = v->value;
  check(vv.rank() == 4, Errc::shape, "grid_sample2d: value must be 4-d");
  check(px->value.rank() == 3 && py->value.rank() == 3, Errc::shape,
        "grid_sample2d: coords must be [N,Hq,Wq]");
  check(px->value.same_shape(py->value), Errc::shape, "grid_sample2d: px/py shape mismatch");
  check(px->value.dim(0) == vv.dim(0), Errc::shape, "grid_sample2d: batch mismatch");
  const int64_t n = vv.dim(0), c = vv.dim(1), h = vv.dim(2), w = vv.dim(3);
  const int64_t hq = px->value.dim(1), wq = px->value.dim(2);
  const int64_t q = hq * wq;
  Tensor out({n, c, hq, wq});
  for (int64_t ni = 0; ni < n; ++ni) {
    for (int64_t qi = 0; qi < q; ++qi) {
      double sx = px->value[ni * q + qi];
      double sy = py->value[ni * q + qi];
      sx = std::min(std::max(sx, 0.0), static_cast<double>(w - 1));
      sy = std::min(std::max(sy, 0.0), static_cast<double>(h - 1));
      const int64_t x0 = static_cast<int64_t>(std::floor(sx));
      const int64_t y0 = static_cast<int64_t>(std::floor(sy));
      const int64_t x1 = std::min(x0 + 1, w - 1);
      const int64_t y1 = std::min(y0 + 1, h - 1);
      const double fx = sx - static_cast<double>(x0);
      const double fy = sy - static_cast<double>(y0);
      for (int64_t ci = 0; ci < c; ++ci) {
        const double* src = vv.data() + (ni * c + ci) * h * w;
        out[(ni * c + ci) * q + qi] = (1.0 - fy) * ((1.0 - fx) * src[y0 * w + x0] +
                                                    fx * src[y0 * w + x1]) +
                                      fy * ((1.0 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1]);
      }
    }
  }
  return record(std::move(out), {v, px, py}, [v, px, py, n, c, h, w, q](Node& o) {
    Tensor* gv = v->requires_grad ? &v->g() : nullptr;
    Tensor* gpx = px->requires_grad ? &px->g() : nullptr;
    Tensor* gpy = py->requires_grad ? &py->g() : nullptr;
    for (int64_t ni = 0; ni < n; ++ni) {
      for (int64_t qi = 0; qi < q; ++qi) {
        double sx = px->value[ni * q + qi];
        double sy = py->value[ni * q + qi];
        const bool clx = sx <= 0.0 || sx >= static_cast<double>(w - 1);
        const bool cly = sy <= 0.0 || sy >= static_cast<double>(h - 1);
        sx = std::min(std::max(sx, 0.0), static_cast<double>(w - 1));
        sy = std::min(std::max(sy, 0.0), static_cast<double>(h - 1));
        const int64_t x0 = static_cast<int64_t>(std::floor(sx));
        const int64_t y0 = static_cast<int64_t>(std::floor(sy));
        const int64_t x1 = std::min(x0 + 1, w - 1);
        const int64_t y1 = std::min(y0 + 1, h - 1);
        const double fx = sx - static_cast<double>(x0);
        const double fy = sy - static_cast<double>(y0);
        double dpx = 0.0, dpy = 0.0;
        for (int64_t ci = 0; ci < c; ++ci) {
          const double g = o.grad[(ni * c + ci) * q + qi];
          if (g == 0.0) continue;
          const double* src = v->value.data() + (ni * c + ci) * h * w;
          const double v00 = src[y0 * w + x0], v01 = src[y0 * w + x1];
          const double v10 = src[y1 * w + x0], v11 = src[y1 * w + x1];
          if (gv) {
            double* dst = gv->data() + (ni * c + ci) * h * w;
            dst[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
            dst[y0 * w + x1] += g * (1.0 - fy) * fx;
            dst[y1 * w + x0] += g * fy * (1.0 - fx);
            dst[y1 * w + x1] += g * fy * fx;
          }
          dpx += g * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
          dpy += g * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
        }
        if (gpx && !clx) (*gpx)[ni * q + qi] += dpx;
        if (gpy && !cly) (*gpy)[ni * q + qi] += dpy;
      }
    }
  });
}

// ---------------------------------------------------------------- reductions

Var global_avg_pool(const Var& x) {
  const Tensor& v = x->value;
  check(v.rank() == 4, Errc::shape, "global_avg_pool: expects 4-d input");
  const int64_t n = v.dim(0), c = v.dim(1), hw = v.dim(2) * v.dim(3);
  Tensor out({n, c, 1, 1});
  for (int64_t ni = 0; ni < n; ++ni)
    for (int64_t ci = 0; ci < c; ++ci) {
      const double* p = v.data() + (ni * c + ci) * hw;
      double acc = 0.0;
      for (int64_t i = 0; i < hw; ++i) acc += p[i];
      out[ni * c + ci] = acc / static_cast<double>(hw);
    }
  return record(std::move(out), {x}, [x, n, c, hw](Node& o) {
    Tensor& gx = x->g();
    for (int64_t ni = 0; ni < n; ++ni)
      for (int64_t ci = 0; ci < c; ++ci) {
        const double g = o.grad[ni * c + ci] / static_cast<double>(hw);
        double* p = gx.data() + (ni * c + ci) * hw;
        for (int64_t i = 0; i < hw; ++i) p[i] += g;
      }
  });
}

Var sum_all(const Var& x) {
  double acc = 0.0;
  const int64_t n = x->value.numel();
  for (int64_t i = 0; i < n; ++i) acc += x->value[i];
  return record(Tensor::scalar(acc), {x}, [x](Node& o) {
    Tensor& gx = x->g();
    const double g = o.grad[0];
    const int64_t m = gx.numel();
    for (int64_t i = 0; i < m; ++i) gx[i] += g;
  });
}

Var mean_all(const Var& x) {
  const int64_t n = x->value.numel();
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) acc += x->value[i];
  acc /= static_cast<double>(n);
  return record(Tensor::scalar(acc), {x}, [x, n](Node& o) {
    Tensor& gx = x->g();
    const double g = o.grad[0] / static_cast<double>(n);
    for (int64_t i = 0; i < n; ++i) gx[i] += g;
  });
}

Var sum_per_sample(const Var& x) {
  const Tensor& v = x->value;
  check(v.rank() >= 1, Errc::shape, "sum_per_sample: needs batch dim");
  const int64_t n = v.dim(0);
  const int64_t per = v.numel() / n;
  Tensor out({n});
  for (int64_t ni = 0; ni < n; ++ni) {
    const double* p = v.data() + ni * per;
    double acc = 0.0;
    for (int64_t i = 0; i < per; ++i) acc += p[i];
    out[ni] = acc;
  }
  return record(std::move(out), {x}, [x, n, per](Node& o) {
    Tensor& gx = x->g();
    for (int64_t ni = 0; ni < n; ++ni) {
      const double g = o.grad[ni];
      double* p = gx.data() + ni * per;
      for (int64_t i = 0; i < per; ++i) p[i] += g;
    }
  });
}

double scalar(const Var& x) {
  check(x->value.numel() == 1, Errc::shape, "scalar: tensor is not a scalar");
  return x->value[0];
}

}  // namespace nseg::ag
