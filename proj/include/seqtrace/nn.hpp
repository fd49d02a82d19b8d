#pragma once

#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "rng.hpp"
#include "tensor.hpp"

namespace seqtrace {

// Flat registry of model tensors. Registration order is the canonical
// order for checkpoints and for the optimizer, so construction must be
// deterministic. Non-trainable entries (frozen statistics) are saved and
// restored like the rest but skipped by the optimizer.
class ParamStore {
 public:
  Tensor add(const std::string& name, Tensor t, bool trainable = true) {
    if (index_.count(name))
      throw std::runtime_error("duplicate parameter name: " + name);
    t.node()->requires_grad = trainable;
    index_[name] = items_.size();
    items_.emplace_back(name, t);
    return t;
  }

  const Tensor& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::runtime_error("no parameter named " + name);
    return items_[it->second].second;
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  const std::vector<std::pair<std::string, Tensor>>& items() const {
    return items_;
  }

  void zero_grad() const {
    for (const auto& [name, t] : items_) t.zero_grad();
  }

  size_t total_elements() const {
    size_t n = 0;
    for (const auto& [name, t] : items_) n += t.numel();
    return n;
  }

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
  std::unordered_map<std::string, size_t> index_;
};

inline void uniform_init(Tensor t, Rng& rng, float bound) {
  for (float& v : t.data()) v = rng.uniform_float(-bound, bound);
}

inline void normal_init(Tensor t, Rng& rng, float stddev) {
  for (float& v : t.data()) v = rng.normal() * stddev;
}

// y = Wx (+ b), channels-first: x is [in, T], output [out, T].
struct Linear {
  Tensor W;
  Tensor b;
  bool has_bias = true;

  Linear() = default;
  Linear(ParamStore& ps, const std::string& name, int in, int out, Rng& rng,
         bool bias = true, float gain = 1.0f)
      : has_bias(bias) {
    float bound = gain * std::sqrt(1.0f / static_cast<float>(in));
    W = ps.add(name + ".weight", Tensor::zeros({out, in}));
    uniform_init(W, rng, bound);
    if (bias) {
      b = ps.add(name + ".bias", Tensor::zeros({out}));
      uniform_init(b, rng, bound);
    }
  }

  Tensor forward(const Tensor& x) const {
    Tensor y = matmul(W, x);
    if (has_bias) y = add(y, reshape(b, {b.dim(0), 1}));
    return y;
  }
};

// Normalizes across the channel axis, then applies a learned per-channel
// affine. Works on [C,T] (axis 0) and [N,C,H,W] / [C,H,W] feature maps.
struct LayerNorm {
  Tensor gamma;
  Tensor beta;
  int channels = 0;

  LayerNorm() = default;
  LayerNorm(ParamStore& ps, const std::string& name, int c) : channels(c) {
    gamma = ps.add(name + ".gamma", Tensor::full({c}, 1.0f));
    beta = ps.add(name + ".beta", Tensor::zeros({c}));
  }

  Tensor forward(const Tensor& x, int axis) const {
    if (x.dim(axis) != channels)
      throw std::runtime_error("layernorm: axis " + std::to_string(axis) +
                               " of " + shape_str(x.shape()) + " != " +
                               std::to_string(channels) + " channels");
    Tensor y = layernorm(x, axis);
    Shape affine(static_cast<size_t>(x.ndim()), 1);
    affine[static_cast<size_t>(axis)] = channels;
    return add(mul(y, reshape(gamma, affine)), reshape(beta, affine));
  }
};

// Token embedding table stored [dim, vocab]; lookup returns [dim, T].
struct Embedding {
  Tensor table;

  Embedding() = default;
  Embedding(ParamStore& ps, const std::string& name, int dim, int vocab,
            Rng& rng) {
    table = ps.add(name + ".table", Tensor::zeros({dim, vocab}));
    normal_init(table, rng, 0.02f);
  }

  Tensor forward(const std::vector<int>& ids) const {
    return gather_cols(table, ids);
  }
};

// Conv weight helper: He fan-in init, [Cout,Cin,kh,kw].
inline Tensor conv_param(ParamStore& ps, const std::string& name, int cout,
                         int cin, int k, Rng& rng) {
  Tensor w = ps.add(name + ".weight", Tensor::zeros({cout, cin, k, k}));
  float stddev = std::sqrt(2.0f / static_cast<float>(cin * k * k));
  normal_init(w, rng, stddev);
  return w;
}

}  // namespace seqtrace
