#pragma once

// Toy residual CNN: stem conv (3->w0, stride 2) then three residual stages
// (widths w0 -> 2*w0 -> 4*w0 by default) with strides 2,2,1 and two blocks
// each; 64x64 input becomes C x 8 x 8. Channel layernorm plus frozen
// per-channel standardizers (fitted once from training images, then treated
// as constants) stand in for batch statistics: without the re-whitening at
// each depth, the small manipulation signal drowns in the structure every
// face shares. Stride-2 is realized as stride-1 conv + subsample2d (see
// tensor.hpp) so conv2d keeps its exact-geometry contract.

#include <cmath>
#include <string>
#include <vector>

#include "nn.hpp"
#include "tensor.hpp"

namespace seqtrace {

struct BackboneConfig {
  int in_size = 64;
  int in_channels = 3;
  std::vector<int> widths{16, 32, 64};  // per-stage output channels
  int blocks_per_stage = 2;

  int out_channels() const { return widths.back(); }
  // stem /2, stage0 /2, stage1 /2, stage2 /1
  int out_size() const { return in_size / 8; }
};

inline int channel_axis(const Tensor& x) { return x.ndim() == 4 ? 1 : 0; }

// Frozen per-channel affine y = (x + shift) * scale. Starts as the identity;
// `fit` refits it to whiten a set of activations. Both tensors live in the
// ParamStore so checkpoints carry them, but the optimizer never updates them.
struct ChannelStandardizer {
  Tensor shift, scale;

  ChannelStandardizer() = default;
  ChannelStandardizer(ParamStore& ps, const std::string& name, int channels) {
    shift = ps.add(name + ".shift", Tensor::zeros({channels}), false);
    scale = ps.add(name + ".scale", Tensor::full({channels}, 1.0f), false);
  }

  Tensor apply(const Tensor& x) const {
    return mul_channel_scale(add_channel_bias(x, shift), scale);
  }

  void fit(const std::vector<Tensor>& activations) {
    size_t c = shift.numel();
    std::vector<double> sum(c, 0.0), sumsq(c, 0.0);
    size_t n = 0;
    for (const Tensor& t : activations) {
      size_t hw = t.numel() / c;
      const float* p = t.data().data();
      for (size_t ch = 0; ch < c; ++ch)
        for (size_t k = 0; k < hw; ++k) {
          double v = p[ch * hw + k];
          sum[ch] += v;
          sumsq[ch] += v * v;
        }
      n += hw;
    }
    if (n == 0) throw std::runtime_error("standardizer fit on no activations");
    std::vector<double> sd(c);
    double sd_mean = 0.0;
    for (size_t ch = 0; ch < c; ++ch) {
      double mean = sum[ch] / static_cast<double>(n);
      sd[ch] = std::sqrt(
          std::max(sumsq[ch] / static_cast<double>(n) - mean * mean, 0.0));
      sd_mean += sd[ch];
    }
    sd_mean /= static_cast<double>(c);
    // Near-dead channels would otherwise get an enormous 1/sd and blow up
    // gradients, so no channel is amplified more than 10x the average.
    double floor = std::max(0.1 * sd_mean, 1e-3);
    for (size_t ch = 0; ch < c; ++ch) {
      shift.data()[ch] = static_cast<float>(-(sum[ch] / static_cast<double>(n)));
      scale.data()[ch] = static_cast<float>(1.0 / std::max(sd[ch], floor));
    }
  }
};

struct ConvLayer {
  Tensor w;
  Tensor b;
  int stride = 1;
  int pad = 1;

  ConvLayer() = default;
  ConvLayer(ParamStore& ps, const std::string& name, int cin, int cout, int k,
            int stride_, Rng& rng)
      : stride(stride_), pad(k / 2) {
    w = conv_param(ps, name, cout, cin, k, rng);
    b = ps.add(name + ".bias", Tensor::zeros({cout}));
  }

  Tensor forward(const Tensor& x) const {
    Tensor y = conv2d(x, w, 1, pad);
    if (stride > 1) y = subsample2d(y, stride);
    return add_channel_bias(y, b);
  }
};

struct ResBlock {
  ConvLayer c1, c2;
  LayerNorm n1, n2;
  ConvLayer proj;  // 1x1 shortcut when stride/width changes
  bool has_proj = false;

  ResBlock() = default;
  ResBlock(ParamStore& ps, const std::string& name, int cin, int cout,
           int stride, Rng& rng) {
    c1 = ConvLayer(ps, name + ".conv1", cin, cout, 3, stride, rng);
    n1 = LayerNorm(ps, name + ".norm1", cout);
    c2 = ConvLayer(ps, name + ".conv2", cout, cout, 3, 1, rng);
    n2 = LayerNorm(ps, name + ".norm2", cout);
    has_proj = (stride != 1 || cin != cout);
    if (has_proj) proj = ConvLayer(ps, name + ".proj", cin, cout, 1, stride, rng);
  }

  Tensor forward(const Tensor& x) const {
    int ax = channel_axis(x);
    Tensor h = relu(n1.forward(c1.forward(x), ax));
    h = n2.forward(c2.forward(h), ax);
    Tensor shortcut = has_proj ? proj.forward(x) : x;
    return relu(add(shortcut, h));
  }
};

struct Backbone {
  BackboneConfig cfg;
  ConvLayer stem;
  LayerNorm stem_norm;
  ChannelStandardizer stem_std;
  std::vector<ResBlock> blocks;
  std::vector<ChannelStandardizer> block_std;

  Backbone() = default;
  Backbone(ParamStore& ps, const std::string& name, const BackboneConfig& c,
           Rng& rng)
      : cfg(c) {
    stem = ConvLayer(ps, name + ".stem", c.in_channels, c.widths[0], 3, 2, rng);
    stem_norm = LayerNorm(ps, name + ".stem_norm", c.widths[0]);
    stem_std = ChannelStandardizer(ps, name + ".stem_std", c.widths[0]);
    int cin = c.widths[0];
    const int stage_strides[3] = {2, 2, 1};
    for (size_t s = 0; s < c.widths.size(); ++s) {
      int cout = c.widths[s];
      for (int b = 0; b < c.blocks_per_stage; ++b) {
        int stride = (b == 0) ? stage_strides[s] : 1;
        std::string bname =
            name + ".stage" + std::to_string(s) + ".block" + std::to_string(b);
        blocks.emplace_back(ps, bname, cin, cout, stride, rng);
        block_std.emplace_back(ps, bname + ".std", cout);
        cin = cout;
      }
    }
  }

  // image: [3,H,W] or [N,3,H,W]; returns f_ori with spatial size H/8.
  Tensor forward(const Tensor& image) const {
    int ax = channel_axis(image);
    int hin = image.dim(ax + 1);
    if (hin != cfg.in_size || image.dim(ax + 2) != cfg.in_size ||
        image.dim(ax) != cfg.in_channels)
      throw std::runtime_error("backbone: input " + shape_str(image.shape()) +
                               " does not match configured " +
                               std::to_string(cfg.in_channels) + "x" +
                               std::to_string(cfg.in_size) + "x" +
                               std::to_string(cfg.in_size));
    Tensor h = stem_std.apply(relu(stem_norm.forward(stem.forward(image), ax)));
    for (size_t i = 0; i < blocks.size(); ++i)
      h = block_std[i].apply(blocks[i].forward(h));
    return h;
  }

  // Fit every standardizer from a sample of training images. Stats at each
  // depth are computed with all earlier standardizers already in effect, so
  // the fit happens front to back in one pass over the cached activations.
  void calibrate(const std::vector<Tensor>& images) {
    if (images.empty()) throw std::runtime_error("calibrate: no images");
    NoGradGuard ng;
    int ax = channel_axis(images[0]);
    std::vector<Tensor> acts;
    acts.reserve(images.size());
    for (const Tensor& img : images)
      acts.push_back(relu(stem_norm.forward(stem.forward(img), ax)));
    stem_std.fit(acts);
    for (Tensor& a : acts) a = stem_std.apply(a);
    for (size_t i = 0; i < blocks.size(); ++i) {
      for (Tensor& a : acts) a = blocks[i].forward(a);
      block_std[i].fit(acts);
      for (Tensor& a : acts) a = block_std[i].apply(a);
    }
  }
};

// Fixed 2D sinusoidal table: first C/2 channels encode the row index with
// the standard frequency ladder, last C/2 the column index. Depends only on
// (C,H,W); every value lies in [-1,1].
inline Tensor positional_encoding_table(int c, int h, int w) {
  if (c % 2 != 0)
    throw std::runtime_error("positional encoding needs even channel count, got " +
                             std::to_string(c));
  Tensor p = Tensor::zeros({c, h, w});
  int half = c / 2;
  auto fill = [&](int ch_base, bool encode_rows) {
    for (int k = 0; k < half; ++k) {
      double freq = std::pow(10000.0, -2.0 * (k / 2) / static_cast<double>(half));
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
          double pos = encode_rows ? i : j;
          double v = (k % 2 == 0) ? std::sin(pos * freq) : std::cos(pos * freq);
          p.data()[(static_cast<size_t>(ch_base + k) * h + i) * w + j] =
              static_cast<float>(v);
        }
    }
  };
  fill(0, true);
  fill(half, false);
  return p;
}

inline Tensor add_positional_encoding(const Tensor& f) {
  int ax = channel_axis(f);
  Tensor p = positional_encoding_table(f.dim(ax), f.dim(ax + 1), f.dim(ax + 2));
  return add(f, p);
}

// [C,H,W] -> [C,H*W], h-major: grid (h,w) lands at token index h*W + w.
inline Tensor flatten_spatial(const Tensor& f) {
  if (f.ndim() != 3)
    throw std::runtime_error("flatten_spatial: need [C,H,W], got " +
                             shape_str(f.shape()));
  return reshape(f, {f.dim(0), f.dim(1) * f.dim(2)});
}

inline int spatial_token_index(int h, int w, int width) { return h * width + w; }

}  // namespace seqtrace
