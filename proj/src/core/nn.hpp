#pragma once

#include <map>
#include <string>
#include <vector>

#include "core/autograd.hpp"
#include "core/rng.hpp"
#include "core/tensor.hpp"

namespace nseg {

// Named parameter registry. Names are hierarchical ("adapter.spm.stem0.w");
// the map ordering makes digests and serialization stable.
class ParamStore {
 public:
  struct Entry {
    ag::Var var;
    bool trainable = true;
  };

  ag::Var add_param(const std::string& name, Tensor init, bool trainable = true);
  Tensor* add_state(const std::string& name, Tensor init);

  ag::Var param(const std::string& name) const;
  Tensor* state(const std::string& name);
  bool has_param(const std::string& name) const { return params_.count(name) > 0; }

  const std::map<std::string, Entry>& params() const { return params_; }
  std::map<std::string, Entry>& params() { return params_; }
  const std::map<std::string, Tensor>& state_map() const { return state_; }
  std::map<std::string, Tensor>& state_map() { return state_; }

  std::vector<std::pair<std::string, ag::Var>> trainable() const;
  void zero_grads();

  // Content fingerprint over params (and running state) under a name prefix;
  // empty prefix covers everything.
  std::string digest(const std::string& prefix = "") const;

 private:
  std::map<std::string, Entry> params_;
  std::map<std::string, Tensor> state_;
};

// PyTorch-default init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
Tensor kaiming_uniform(std::vector<int64_t> shape, int64_t fan_in, Rng& rng);
// Semi-orthogonal [out, in] matrix: orthonormal rows when out <= in, else
// orthonormal columns (Gram-Schmidt on a Gaussian draw).
Tensor semi_orthogonal(int64_t out, int64_t in, Rng& rng);

struct Conv2d {
  ag::Var w;  // [out, in/groups, k, k]
  ag::Var b;  // [out] or null
  int stride = 1;
  int pad = 0;
  int groups = 1;

  static Conv2d create(ParamStore& store, const std::string& name, int64_t in_ch, int64_t out_ch,
                       int k, int stride, int pad, Rng& rng, bool bias = true, int groups = 1,
                       bool trainable = true);
  ag::Var operator()(const ag::Var& x) const { return ag::conv2d(x, w, b, stride, pad, groups); }
};

// 1x1 convolution == per-pixel linear projection.
Conv2d pointwise(ParamStore& store, const std::string& name, int64_t in_ch, int64_t out_ch,
                 Rng& rng, bool bias = true, bool trainable = true);

struct LayerNormC {
  ag::Var gamma, beta;
  static LayerNormC create(ParamStore& store, const std::string& name, int64_t channels,
                           bool trainable = true);
  ag::Var operator()(const ag::Var& x) const { return ag::layer_norm_channels(x, gamma, beta); }
};

struct BatchNorm2d {
  ag::Var gamma, beta;
  Tensor* running_mean = nullptr;
  Tensor* running_var = nullptr;
  static BatchNorm2d create(ParamStore& store, const std::string& name, int64_t channels);
  ag::Var forward(const ag::Var& x, bool training) const {
    return ag::batch_norm2d(x, gamma, beta, running_mean, running_var, training);
  }
};

}  // namespace nseg
