#pragma once

// Spatial relation extraction: stack of pre-norm multi-head self-attention
// blocks over the flattened feature sequence. Channels-first: tokens are
// columns of a [C,T] matrix. Scores are K_i^T Q_i (keys index rows, queries
// columns), scaled by 1/sqrt(d), softmax over the key axis.

#include <string>
#include <vector>

#include "nn.hpp"
#include "tensor.hpp"

namespace seqtrace {

struct EncoderConfig {
  int layers = 2;
  int heads = 4;
  int width = 64;
  int ffn_hidden = 0;  // 0 -> 4 * width

  int ffn() const { return ffn_hidden > 0 ? ffn_hidden : 4 * width; }
};

// Causal additive mask [T,T]: key row k may serve query column q only if
// k <= q; the rest get the -1e9 sentinel.
inline Tensor causal_mask(int t) {
  Tensor m = Tensor::zeros({t, t});
  for (int k = 0; k < t; ++k)
    for (int q = 0; q < t; ++q)
      if (k > q) m.data()[static_cast<size_t>(k) * t + q] = kNegInf;
  return m;
}

struct MultiHeadSelfAttention {
  Linear wq, wk, wv, wo;
  int heads = 1;
  int width = 0;

  MultiHeadSelfAttention() = default;
  MultiHeadSelfAttention(ParamStore& ps, const std::string& name, int c,
                         int heads_, Rng& rng)
      : heads(heads_), width(c) {
    if (c % heads_ != 0)
      throw std::runtime_error("width " + std::to_string(c) +
                               " not divisible by " + std::to_string(heads_) +
                               " heads");
    // Query/key projections start 2x wider than the classic 1/sqrt(in)
    // range: with 64 spatial keys, unit-gain init leaves the attention so
    // close to uniform that token gradients stay diluted for hundreds of
    // steps before anything differentiates.
    wq = Linear(ps, name + ".wq", c, c, rng, true, 2.0f);
    wk = Linear(ps, name + ".wk", c, c, rng, true, 2.0f);
    wv = Linear(ps, name + ".wv", c, c, rng);
    wo = Linear(ps, name + ".wo", c, c, rng);
  }

  // x: [C,T]. Optional additive logit mask [T,T] (causal); optional capture
  // of per-head attention matrices for diagnostics/tests.
  Tensor forward(const Tensor& x, const Tensor* mask = nullptr,
                 std::vector<Tensor>* attn_out = nullptr) const {
    int d = width / heads;
    Tensor q = wq.forward(x);
    Tensor k = wk.forward(x);
    Tensor v = wv.forward(x);
    float inv_sqrt_d = 1.0f / std::sqrt(static_cast<float>(d));
    std::vector<Tensor> outs;
    for (int h = 0; h < heads; ++h) {
      Tensor qi = slice_rows(q, h * d, (h + 1) * d);
      Tensor ki = slice_rows(k, h * d, (h + 1) * d);
      Tensor vi = slice_rows(v, h * d, (h + 1) * d);
      Tensor scores = scale(matmul(transpose(ki), qi), inv_sqrt_d);  // [T,T]
      if (mask) scores = add(scores, *mask);
      Tensor attn = softmax(scores, 0);  // over keys
      if (attn_out) attn_out->push_back(attn);
      outs.push_back(matmul(vi, attn));  // [d,T]
    }
    return wo.forward(concat_rows(outs));
  }
};

struct EncoderBlock {
  LayerNorm ln1, ln2;
  MultiHeadSelfAttention attn;
  Linear ffn1, ffn2;

  EncoderBlock() = default;
  EncoderBlock(ParamStore& ps, const std::string& name, const EncoderConfig& c,
               Rng& rng) {
    ln1 = LayerNorm(ps, name + ".ln1", c.width);
    attn = MultiHeadSelfAttention(ps, name + ".attn", c.width, c.heads, rng);
    ln2 = LayerNorm(ps, name + ".ln2", c.width);
    ffn1 = Linear(ps, name + ".ffn1", c.width, c.ffn(), rng);
    ffn2 = Linear(ps, name + ".ffn2", c.ffn(), c.width, rng);
  }

  Tensor forward(const Tensor& x) const {
    Tensor h = add(x, attn.forward(ln1.forward(x, 0)));
    return add(h, ffn2.forward(relu(ffn1.forward(ln2.forward(h, 0)))));
  }
};

struct Encoder {
  EncoderConfig cfg;
  std::vector<EncoderBlock> blocks;

  Encoder() = default;
  Encoder(ParamStore& ps, const std::string& name, const EncoderConfig& c,
          Rng& rng)
      : cfg(c) {
    for (int l = 0; l < c.layers; ++l)
      blocks.emplace_back(ps, name + ".block" + std::to_string(l), c, rng);
  }

  // f_pos flattened [C,T] -> f_spa [C,T]
  Tensor forward(const Tensor& x) const {
    Tensor h = x;
    for (const EncoderBlock& b : blocks) h = b.forward(h);
    return h;
  }
};

}  // namespace seqtrace
