#pragma once

// Sequential relation modeling. Each decoder block runs (optionally causal)
// self-attention over the token stream, cross-attention against the
// spatial features, and an FFN — all pre-norm residual. The cross-attention
// logits are additively biased by the log of a Gaussian spatial weight map
// whose center/scales are predicted from the post-self-attention token
// states: the basic mode shares one map across heads, the multi-head mode
// gives every head its own offset center and scales.

#include <string>
#include <vector>

#include "encoder.hpp"
#include "nn.hpp"
#include "tensor.hpp"
#include "vocab.hpp"

namespace seqtrace {

enum class SecaMode { kOff, kBasic, kMultiHead };

inline const char* seca_mode_name(SecaMode m) {
  switch (m) {
    case SecaMode::kOff: return "off";
    case SecaMode::kBasic: return "basic";
    case SecaMode::kMultiHead: return "multi_head";
  }
  return "?";
}

inline SecaMode seca_mode_from(const std::string& s) {
  if (s == "off") return SecaMode::kOff;
  if (s == "basic") return SecaMode::kBasic;
  if (s == "multi" || s == "multi_head") return SecaMode::kMultiHead;
  throw std::runtime_error("unknown seca mode: " + s);
}

struct DecoderConfig {
  int layers = 2;
  int heads = 4;
  int width = 64;
  float lambda = 4.0f;
  SecaMode seca = SecaMode::kMultiHead;
  bool autoregressive = true;
  int ffn_hidden = 0;

  int ffn() const { return ffn_hidden > 0 ? ffn_hidden : 4 * width; }
};

// Scalar kernel of the spatial weight map at normalized coords (h,w).
inline double weight_map_value(double h, double w, double t_h, double t_w,
                               double r_h, double r_w, double lambda) {
  double a = (h - t_h) * (h - t_h) / (lambda * r_h * r_h);
  double b = (w - t_w) * (w - t_w) / (lambda * r_w * r_w);
  return std::exp(-a - b);
}

// Normalized grid coordinates with half-cell offsets, flattened h-major to
// match the spatial token index contract (index = row*W + col).
inline Tensor grid_rows(int h, int w) {
  Tensor g = Tensor::zeros({h * w, 1});
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      g.data()[static_cast<size_t>(i) * w + j] =
          (static_cast<float>(i) + 0.5f) / static_cast<float>(h);
  return g;
}

inline Tensor grid_cols(int h, int w) {
  Tensor g = Tensor::zeros({h * w, 1});
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      g.data()[static_cast<size_t>(i) * w + j] =
          (static_cast<float>(j) + 0.5f) / static_cast<float>(w);
  return g;
}

// Gaussian map on the H x W grid for every token column: inputs are [1,T]
// rows (centers and scales), output M is [H*W, T], all values in (0,1].
inline Tensor build_weight_map(const Tensor& t_h, const Tensor& t_w,
                               const Tensor& r_h, const Tensor& r_w,
                               float lambda, int h, int w) {
  Tensor gh = grid_rows(h, w);
  Tensor gw = grid_cols(h, w);
  Tensor dh = sub(gh, t_h);  // [HW,T]
  Tensor dw = sub(gw, t_w);
  Tensor den_h = scale(mul(r_h, r_h), lambda);  // [1,T]
  Tensor den_w = scale(mul(r_w, r_w), lambda);
  Tensor q = add(div(mul(dh, dh), den_h), div(mul(dw, dw), den_w));
  return exp_t(neg(q));
}

// Per-token map geometry produced by the center/scale heads.
struct MapGeometry {
  Tensor base_th, base_tw;                    // [1,T] shared center
  std::vector<Tensor> th, tw, rh, rw;         // per map (1 or heads entries)
};

struct CenterScaleHeads {
  Linear mlp1, mlp2;   // center: C -> C/2 -tanh-> 2, sigmoid outside
  Linear scale_fc;     // scales: C -> 2*maps, softplus + eps
  Linear offset_fc;    // multi-head only: C -> 2*heads, 0.5*tanh
  int heads = 1;
  SecaMode mode = SecaMode::kBasic;

  CenterScaleHeads() = default;
  CenterScaleHeads(ParamStore& ps, const std::string& name, int c, int heads_,
                   SecaMode mode_, Rng& rng)
      : heads(heads_), mode(mode_) {
    int maps = mode_ == SecaMode::kMultiHead ? heads_ : 1;
    mlp1 = Linear(ps, name + ".center1", c, c / 2, rng);
    mlp2 = Linear(ps, name + ".center2", c / 2, 2, rng);
    scale_fc = Linear(ps, name + ".scale", c, 2 * maps, rng);
    if (mode_ == SecaMode::kMultiHead)
      offset_fc = Linear(ps, name + ".offset", c, 2 * heads_, rng);
  }

  MapGeometry forward(const Tensor& states) const {
    MapGeometry g;
    Tensor center = sigmoid(mlp2.forward(tanh_t(mlp1.forward(states))));  // [2,T]
    g.base_th = slice_rows(center, 0, 1);
    g.base_tw = slice_rows(center, 1, 2);
    Tensor scales = add_scalar(softplus(scale_fc.forward(states)), 1e-3f);
    if (mode == SecaMode::kBasic) {
      g.th.push_back(g.base_th);
      g.tw.push_back(g.base_tw);
      g.rh.push_back(slice_rows(scales, 0, 1));
      g.rw.push_back(slice_rows(scales, 1, 2));
    } else {
      Tensor offsets = scale(tanh_t(offset_fc.forward(states)), 0.5f);
      for (int i = 0; i < heads; ++i) {
        g.th.push_back(add(g.base_th, slice_rows(offsets, 2 * i, 2 * i + 1)));
        g.tw.push_back(add(g.base_tw, slice_rows(offsets, 2 * i + 1, 2 * i + 2)));
        g.rh.push_back(slice_rows(scales, 2 * i, 2 * i + 1));
        g.rw.push_back(slice_rows(scales, 2 * i + 1, 2 * i + 2));
      }
    }
    return g;
  }
};

// Cross-attention with an optional additive log-map bias. `logmaps` may be
// empty (plain cross-attention), hold one map shared by every head, or one
// per head.
struct SecaCrossAttention {
  Linear wq, wk, wv, wo;
  int heads = 1;
  int width = 0;

  SecaCrossAttention() = default;
  SecaCrossAttention(ParamStore& ps, const std::string& name, int c, int heads_,
                     Rng& rng)
      : heads(heads_), width(c) {
    if (c % heads_ != 0)
      throw std::runtime_error("width " + std::to_string(c) +
                               " not divisible by " + std::to_string(heads_) +
                               " heads");
    // Same widened query/key init as the encoder (see encoder.hpp).
    wq = Linear(ps, name + ".wq", c, c, rng, true, 2.0f);
    wk = Linear(ps, name + ".wk", c, c, rng, true, 2.0f);
    wv = Linear(ps, name + ".wv", c, c, rng);
    wo = Linear(ps, name + ".wo", c, c, rng);
  }

  Tensor forward(const Tensor& x, const Tensor& f_spa,
                 const std::vector<Tensor>& logmaps,
                 std::vector<Tensor>* attn_out = nullptr) const {
    if (!logmaps.empty() && logmaps.size() != 1 &&
        logmaps.size() != static_cast<size_t>(heads))
      throw std::runtime_error("expected 1 or " + std::to_string(heads) +
                               " weight maps, got " +
                               std::to_string(logmaps.size()));
    for (const Tensor& m : logmaps)
      if (m.dim(0) != f_spa.dim(1))
        throw std::runtime_error("weight map length " + std::to_string(m.dim(0)) +
                                 " != key count " + std::to_string(f_spa.dim(1)));
    int d = width / heads;
    Tensor q = wq.forward(x);       // S = FC(token stream)
    Tensor k = wk.forward(f_spa);   // K = FC(f_spa)
    Tensor v = wv.forward(f_spa);
    float inv_sqrt_d = 1.0f / std::sqrt(static_cast<float>(d));
    std::vector<Tensor> outs;
    for (int h = 0; h < heads; ++h) {
      Tensor qi = slice_rows(q, h * d, (h + 1) * d);
      Tensor ki = slice_rows(k, h * d, (h + 1) * d);
      Tensor vi = slice_rows(v, h * d, (h + 1) * d);
      Tensor scores = scale(matmul(transpose(ki), qi), inv_sqrt_d);  // [HW,T]
      if (!logmaps.empty()) {
        const Tensor& m = logmaps.size() == 1 ? logmaps[0]
                                              : logmaps[static_cast<size_t>(h)];
        scores = add(scores, m);
      }
      Tensor attn = softmax(scores, 0);  // over the H*W key axis
      if (attn_out) attn_out->push_back(attn);
      outs.push_back(matmul(vi, attn));
    }
    return wo.forward(concat_rows(outs));
  }
};

// Diagnostics: realized per-layer maps (values, not logs) for dumping.
struct MapDiagnostics {
  std::vector<std::vector<Tensor>> per_layer_maps;
};

struct DecoderBlock {
  LayerNorm ln1, ln2, ln3;
  MultiHeadSelfAttention self_attn;
  SecaCrossAttention cross;
  CenterScaleHeads geom;
  Linear ffn1, ffn2;
  bool has_geom = false;

  DecoderBlock() = default;
  DecoderBlock(ParamStore& ps, const std::string& name, const DecoderConfig& c,
               Rng& rng) {
    ln1 = LayerNorm(ps, name + ".ln1", c.width);
    self_attn = MultiHeadSelfAttention(ps, name + ".self", c.width, c.heads, rng);
    ln2 = LayerNorm(ps, name + ".ln2", c.width);
    cross = SecaCrossAttention(ps, name + ".cross", c.width, c.heads, rng);
    if (c.seca != SecaMode::kOff) {
      geom = CenterScaleHeads(ps, name + ".geom", c.width, c.heads, c.seca, rng);
      has_geom = true;
    }
    ln3 = LayerNorm(ps, name + ".ln3", c.width);
    ffn1 = Linear(ps, name + ".ffn1", c.width, c.ffn(), rng);
    ffn2 = Linear(ps, name + ".ffn2", c.ffn(), c.width, rng);
  }

  Tensor forward(const Tensor& x, const Tensor& f_spa, const DecoderConfig& cfg,
                 int fmap_h, int fmap_w, const Tensor* causal,
                 std::vector<Tensor>* maps_out = nullptr) const {
    Tensor h = add(x, self_attn.forward(ln1.forward(x, 0), causal));
    Tensor qsrc = ln2.forward(h, 0);
    std::vector<Tensor> logmaps;
    if (has_geom) {
      MapGeometry g = geom.forward(qsrc);
      for (size_t i = 0; i < g.th.size(); ++i) {
        Tensor m = build_weight_map(g.th[i], g.tw[i], g.rh[i], g.rw[i],
                                    cfg.lambda, fmap_h, fmap_w);
        if (maps_out) maps_out->push_back(m);
        // clamp M at 1e-6 before taking the log (log_t's contract)
        logmaps.push_back(log_t(m));
      }
    }
    h = add(h, cross.forward(qsrc, f_spa, logmaps));
    return add(h, ffn2.forward(relu(ffn1.forward(ln3.forward(h, 0)))));
  }
};

// Fixed 1-d sinusoidal table [C, len] for decoder token positions — the
// token stream needs an order signal just like the spatial grid does.
inline Tensor token_position_table(int c, int len) {
  Tensor p = Tensor::zeros({c, len});
  for (int i = 0; i < c; ++i) {
    double freq = std::pow(10000.0, -2.0 * (i / 2) / static_cast<double>(c));
    for (int t = 0; t < len; ++t) {
      double v = (i % 2 == 0) ? std::sin(t * freq) : std::cos(t * freq);
      p.data()[static_cast<size_t>(i) * len + t] = static_cast<float>(v);
    }
  }
  return p;
}

struct Decoder {
  DecoderConfig cfg;
  Vocabulary vocab;
  Embedding embed;
  std::vector<DecoderBlock> blocks;
  LayerNorm final_ln;
  Linear head;  // C -> V

  Decoder() = default;
  Decoder(ParamStore& ps, const std::string& name, const DecoderConfig& c,
          const Vocabulary& v, Rng& rng)
      : cfg(c), vocab(v) {
    embed = Embedding(ps, name + ".embed", c.width, v.size(), rng);
    for (int l = 0; l < c.layers; ++l)
      blocks.emplace_back(ps, name + ".block" + std::to_string(l), c, rng);
    final_ln = LayerNorm(ps, name + ".final_ln", c.width);
    head = Linear(ps, name + ".head", c.width, v.size(), rng);
  }

  // Teacher-forced pass over an explicit id sequence. f_spa is [C, H*W].
  // Returns masked logits [V, T]: SOS/PAD/NM rows pinned to the sentinel.
  Tensor forward_logits(const std::vector<int>& ids, const Tensor& f_spa,
                        int fmap_h, int fmap_w,
                        MapDiagnostics* diag = nullptr) const {
    if (ids.empty()) throw std::runtime_error("decoder: empty id sequence");
    int t = static_cast<int>(ids.size());
    Tensor x = embed.forward(ids);
    Tensor pos = token_position_table(cfg.width, t);
    x = add(x, pos);
    Tensor causal;
    if (cfg.autoregressive) causal = causal_mask(t);
    const Tensor* mask = cfg.autoregressive ? &causal : nullptr;
    for (const DecoderBlock& b : blocks) {
      std::vector<Tensor> maps;
      x = b.forward(x, f_spa, cfg, fmap_h, fmap_w, mask,
                    diag ? &maps : nullptr);
      if (diag) diag->per_layer_maps.push_back(std::move(maps));
    }
    Tensor logits = head.forward(final_ln.forward(x, 0));  // [V,T]
    return mask_control_logits(logits);
  }

  // Zero out SOS/PAD/NM rows and pin them to the -1e9 sentinel exactly.
  Tensor mask_control_logits(const Tensor& logits) const {
    int v = vocab.size();
    Tensor keep = Tensor::full({v, 1}, 1.0f);
    Tensor pin = Tensor::zeros({v, 1});
    for (int id : {vocab.sos(), vocab.pad(), vocab.nm()}) {
      keep.data()[static_cast<size_t>(id)] = 0.0f;
      pin.data()[static_cast<size_t>(id)] = kNegInf;
    }
    return add(mul(logits, keep), pin);
  }

  // Next-token logits for a growing prefix: [V] for the last position.
  Tensor decode_step(const std::vector<int>& prefix, const Tensor& f_spa,
                     int fmap_h, int fmap_w) const {
    if (prefix.empty() || prefix[0] != vocab.sos())
      throw std::runtime_error("decode prefix must start with SOS");
    for (size_t i = 1; i < prefix.size(); ++i)
      if (prefix[i] == vocab.eos())
        throw std::runtime_error("decode prefix already contains EOS");
    Tensor logits = forward_logits(prefix, f_spa, fmap_h, fmap_w);
    int t = static_cast<int>(prefix.size());
    Tensor last = slice_cols(logits, t - 1, t);  // [V,1]
    return reshape(last, {vocab.size()});
  }
};

}  // namespace seqtrace
