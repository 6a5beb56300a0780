#include "core/nn.hpp"

#include <cmath>

#include "core/digest.hpp"
#include "core/error.hpp"

namespace nseg {

ag::Var ParamStore::add_param(const std::string& name, Tensor init, bool trainable) {
  check(!params_.count(name), Errc::validation, "duplicate parameter name: " + name);
  Entry e;
  e.var = ag::leaf(std::move(init), trainable);
  e.trainable = trainable;
  params_[name] = e;
  return params_[name].var;
}

Tensor* ParamStore::add_state(const std::string& name, Tensor init) {
  check(!state_.count(name), Errc::validation, "duplicate state name: " + name);
  state_[name] = std::move(init);
  return &state_[name];
}

ag::Var ParamStore::param(const std::string& name) const {
  auto it = params_.find(name);
  check(it != params_.end(), Errc::validation, "unknown parameter: " + name);
  return it->second.var;
}

Tensor* ParamStore::state(const std::string& name) {
  auto it = state_.find(name);
  check(it != state_.end(), Errc::validation, "unknown state: " + name);
  return &it->second;
}

std::vector<std::pair<std::string, ag::Var>> ParamStore::trainable() const {
  std::vector<std::pair<std::string, ag::Var>> out;
  for (const auto& [name, e] : params_)
    if (e.trainable) out.emplace_back(name, e.var);
  return out;
}

void ParamStore::zero_grads() {
  for (auto& [name, e] : params_) {
    if (e.var->grad.numel() != e.var->value.numel())
      e.var->grad = Tensor::zeros(e.var->value.shape());
    else
      e.var->grad.fill(0.0);
  }
}

std::string ParamStore::digest(const std::string& prefix) const {
  Fingerprint fp;
  for (const auto& [name, e] : params_) {
    if (name.rfind(prefix, 0) != 0) continue;
    fp.update(name);
    fp.update_double(e.var->value.data(), static_cast<size_t>(e.var->value.numel()));
  }
  for (const auto& [name, t] : state_) {
    if (name.rfind(prefix, 0) != 0) continue;
    fp.update(name);
    fp.update_double(t.data(), static_cast<size_t>(t.numel()));
  }
  return fp.hex();
}

Tensor kaiming_uniform(std::vector<int64_t> shape, int64_t fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double bound = fan_in > 0 ? 1.0 / std::sqrt(static_cast<double>(fan_in)) : 0.0;
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-bound, bound);
  return t;
}

Tensor semi_orthogonal(int64_t out, int64_t in, Rng& rng) {
  const int64_t rows = std::min(out, in);
  const int64_t cols = std::max(out, in);
  // Gram-Schmidt over `rows` Gaussian vectors of length `cols`.
  std::vector<std::vector<double>> basis(static_cast<size_t>(rows),
                                         std::vector<double>(static_cast<size_t>(cols)));
  for (auto& v : basis)
    for (auto& x : v) x = rng.normal();
  for (int64_t r = 0; r < rows; ++r) {
    auto& v = basis[static_cast<size_t>(r)];
    for (int64_t p = 0; p < r; ++p) {
      const auto& u = basis[static_cast<size_t>(p)];
      double dot = 0.0;
      for (int64_t i = 0; i < cols; ++i) dot += v[static_cast<size_t>(i)] * u[static_cast<size_t>(i)];
      for (int64_t i = 0; i < cols; ++i) v[static_cast<size_t>(i)] -= dot * u[static_cast<size_t>(i)];
    }
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    check(norm > 1e-12, Errc::validation, "semi_orthogonal: degenerate draw");
    for (auto& x : v) x /= norm;
  }
  Tensor w({out, in});
  for (int64_t o = 0; o < out; ++o)
    for (int64_t i = 0; i < in; ++i)
      w[o * in + i] = (out <= in) ? basis[static_cast<size_t>(o)][static_cast<size_t>(i)]
                                  : basis[static_cast<size_t>(i)][static_cast<size_t>(o)];
  return w;
}

Conv2d Conv2d::create(ParamStore& store, const std::string& name, int64_t in_ch, int64_t out_ch,
                      int k, int stride, int pad, Rng& rng, bool bias, int groups,
                      bool trainable) {
  Conv2d c;
  const int64_t cig = in_ch / groups;
  const int64_t fan_in = cig * k * k;
  c.w = store.add_param(name + ".w", kaiming_uniform({out_ch, cig, k, k}, fan_in, rng), trainable);
  if (bias) c.b = store.add_param(name + ".b", kaiming_uniform({out_ch}, fan_in, rng), trainable);
  c.stride = stride;
  c.pad = pad;
  c.groups = groups;
  return c;
}

Conv2d pointwise(ParamStore& store, const std::string& name, int64_t in_ch, int64_t out_ch,
                 Rng& rng, bool bias, bool trainable) {
  return Conv2d::create(store, name, in_ch, out_ch, 1, 1, 0, rng, bias, 1, trainable);
}

LayerNormC LayerNormC::create(ParamStore& store, const std::string& name, int64_t channels,
                              bool trainable) {
  LayerNormC ln;
  ln.gamma = store.add_param(name + ".gamma", Tensor::full({channels}, 1.0), trainable);
  ln.beta = store.add_param(name + ".beta", Tensor::zeros({channels}), trainable);
  return ln;
}

BatchNorm2d BatchNorm2d::create(ParamStore& store, const std::string& name, int64_t channels) {
  BatchNorm2d bn;
  bn.gamma = store.add_param(name + ".gamma", Tensor::full({channels}, 1.0));
  bn.beta = store.add_param(name + ".beta", Tensor::zeros({channels}));
  bn.running_mean = store.add_state(name + ".running_mean", Tensor::zeros({channels}));
  bn.running_var = store.add_state(name + ".running_var", Tensor::full({channels}, 1.0));
  return bn;
}

}  // namespace nseg
