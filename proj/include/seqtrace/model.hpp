#pragma once

// Full models: the sequence predictor (backbone -> positional encoding ->
// encoder -> decoder) and the fixed-length multi-label baseline that shares
// the same backbone but replaces sequence modeling with independent heads.

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "backbone.hpp"
#include "config.hpp"
#include "decoder.hpp"
#include "encoder.hpp"
#include "image.hpp"
#include "nn.hpp"
#include "vocab.hpp"

namespace seqtrace {

// Both model kinds freeze the backbone standardizers against (at most) the
// first 64 training images before the optimizer takes its first step.
inline std::vector<Tensor> calibration_batch(const std::vector<ImageU8>& images,
                                             size_t max_images = 64) {
  std::vector<Tensor> batch;
  for (size_t i = 0; i < std::min(images.size(), max_images); ++i)
    batch.push_back(image_to_tensor(images[i]));
  return batch;
}

struct ModelConfig {
  BackboneConfig backbone;
  EncoderConfig encoder;
  DecoderConfig decoder;

  // Desk-scale default: 64-wide transformer over an 8x8 feature map.
  static ModelConfig desk() { return ModelConfig{}; }

  // Narrow variant for fast CPU experiments.
  static ModelConfig narrow() {
    ModelConfig c;
    c.backbone.widths = {8, 16, 32};
    c.encoder.width = 32;
    c.decoder.width = 32;
    return c;
  }

  void validate() const {
    if (backbone.out_channels() != encoder.width ||
        encoder.width != decoder.width)
      throw std::runtime_error(
          "channel contract broken: backbone gives " +
          std::to_string(backbone.out_channels()) + ", encoder wants " +
          std::to_string(encoder.width) + ", decoder wants " +
          std::to_string(decoder.width));
  }

  std::string canonical(const std::string& kind,
                        const Vocabulary& vocab) const {
    KvBuilder kv;
    kv.add("kind", kind);
    kv.add("in_size", backbone.in_size);
    for (size_t i = 0; i < backbone.widths.size(); ++i)
      kv.add("width" + std::to_string(i), backbone.widths[i]);
    kv.add("blocks", backbone.blocks_per_stage);
    kv.add("enc_layers", encoder.layers)
        .add("enc_heads", encoder.heads)
        .add("enc_width", encoder.width)
        .add("dec_layers", decoder.layers)
        .add("dec_heads", decoder.heads)
        .add("dec_width", decoder.width)
        .add("lambda", static_cast<double>(decoder.lambda))
        .add("seca", std::string(seca_mode_name(decoder.seca)))
        .add("autoregressive", decoder.autoregressive);
    std::string vocab_csv;
    for (const std::string& l : vocab.labels) {
      if (!vocab_csv.empty()) vocab_csv += ',';
      vocab_csv += l;
    }
    kv.add("vocab", vocab_csv);
    return kv.s;
  }
};

// Inverse of ModelConfig::canonical: lets a checkpoint rebuild its model.
struct ParsedModel {
  std::string kind;
  ModelConfig config;
  std::vector<std::string> vocab_labels;
};

inline ParsedModel parse_model_kv(const std::string& kv) {
  std::map<std::string, std::string> m;
  size_t pos = 0;
  while (pos < kv.size()) {
    size_t eq = kv.find('=', pos);
    size_t semi = kv.find(';', pos);
    if (eq == std::string::npos || semi == std::string::npos || eq > semi)
      throw std::runtime_error("malformed model config string");
    m[kv.substr(pos, eq - pos)] = kv.substr(eq + 1, semi - eq - 1);
    pos = semi + 1;
  }
  auto get = [&](const std::string& k) -> const std::string& {
    auto it = m.find(k);
    if (it == m.end())
      throw std::runtime_error("model config string lacks key " + k);
    return it->second;
  };
  ParsedModel out;
  out.kind = get("kind");
  ModelConfig& c = out.config;
  c.backbone.in_size = std::stoi(get("in_size"));
  c.backbone.widths.clear();
  for (int i = 0; m.count("width" + std::to_string(i)); ++i)
    c.backbone.widths.push_back(std::stoi(m["width" + std::to_string(i)]));
  c.backbone.blocks_per_stage = std::stoi(get("blocks"));
  c.encoder.layers = std::stoi(get("enc_layers"));
  c.encoder.heads = std::stoi(get("enc_heads"));
  c.encoder.width = std::stoi(get("enc_width"));
  c.decoder.layers = std::stoi(get("dec_layers"));
  c.decoder.heads = std::stoi(get("dec_heads"));
  c.decoder.width = std::stoi(get("dec_width"));
  c.decoder.lambda = std::stof(get("lambda"));
  c.decoder.seca = seca_mode_from(get("seca"));
  c.decoder.autoregressive = get("autoregressive") == "true";
  const std::string& csv = get("vocab");
  size_t p = 0;
  while (p <= csv.size() && !csv.empty()) {
    size_t comma = csv.find(',', p);
    if (comma == std::string::npos) {
      out.vocab_labels.push_back(csv.substr(p));
      break;
    }
    out.vocab_labels.push_back(csv.substr(p, comma - p));
    p = comma + 1;
  }
  return out;
}

struct SeqFakeFormer {
  ModelConfig cfg;
  Vocabulary vocab;
  ParamStore params;
  Backbone backbone;
  Tensor pos_table;  // [C, H'*W'] fixed 2-d sinusoidal table
  Encoder encoder;
  Decoder decoder;

  SeqFakeFormer(const ModelConfig& c, const Vocabulary& v, unsigned long long seed)
      : cfg(c), vocab(v) {
    cfg.validate();
    Rng rng(seed);
    backbone = Backbone(params, "backbone", cfg.backbone, rng);
    int s = cfg.backbone.out_size();
    Tensor table =
        positional_encoding_table(cfg.backbone.out_channels(), s, s);
    pos_table = reshape(table, {cfg.backbone.out_channels(), s * s});
    encoder = Encoder(params, "encoder", cfg.encoder, rng);
    decoder = Decoder(params, "decoder", cfg.decoder, vocab, rng);
  }

  std::string config_hash() const {
    return hex64(fnv1a64(cfg.canonical("seqfakeformer", vocab)));
  }

  int fmap_size() const { return cfg.backbone.out_size(); }

  // Image [3,H,W] -> contextual spatial features [C, H'*W'].
  Tensor spatial_features(const Tensor& image) const {
    Tensor fmap = backbone.forward(image);  // [C,H',W']
    Tensor flat = flatten_spatial(fmap);    // [C,H'*W']
    return encoder.forward(add(flat, pos_table));
  }

  void calibrate(const std::vector<ImageU8>& images) {
    backbone.calibrate(calibration_batch(images));
  }

  // Teacher-forced logits [V, N_max+1] for positions 1..N_max+1.
  Tensor teacher_logits(const Tensor& image, const TokenSequence& target,
                        MapDiagnostics* diag = nullptr) const {
    Tensor f = spatial_features(image);
    std::vector<int> input(target.ids.begin(), target.ids.end() - 1);
    return decoder.forward_logits(input, f, fmap_size(), fmap_size(), diag);
  }
};

// Five independent classification heads over labels + "no manipulation",
// applied to mean-pooled backbone features. Always predicts exactly
// kMaxSeqLen slots; trailing NM slots are stripped for sequence-level
// metrics (strip-then-repad is the identity), interior NM slots stay and
// count as mismatches.
struct MultiCls {
  ModelConfig cfg;
  Vocabulary vocab;
  ParamStore params;
  Backbone backbone;
  ChannelStandardizer pool_std;  // mean pooling shrinks the signal; re-whiten
  std::vector<Linear> heads;

  MultiCls(const ModelConfig& c, const Vocabulary& v, unsigned long long seed)
      : cfg(c), vocab(v) {
    Rng rng(seed);
    backbone = Backbone(params, "backbone", cfg.backbone, rng);
    pool_std = ChannelStandardizer(params, "pool_std",
                                   cfg.backbone.out_channels());
    int classes = vocab.label_count() + 1;  // labels + NM slot class
    for (int i = 0; i < kMaxSeqLen; ++i)
      heads.emplace_back(params, "head" + std::to_string(i),
                         cfg.backbone.out_channels(), classes, rng);
  }

  std::string config_hash() const {
    return hex64(fnv1a64(cfg.canonical("multi_cls", vocab)));
  }

  // NM class index within each head's output.
  int nm_class() const { return vocab.label_count(); }

  Tensor raw_pooled(const Tensor& image) const {
    Tensor fmap = backbone.forward(image);
    Tensor flat = flatten_spatial(fmap);  // [C, HW]
    return scale(sum_axis(flat, 1), 1.0f / static_cast<float>(flat.dim(1)));
  }

  Tensor pooled(const Tensor& image) const {
    return pool_std.apply(raw_pooled(image));
  }

  void calibrate(const std::vector<ImageU8>& images) {
    std::vector<Tensor> batch = calibration_batch(images);
    backbone.calibrate(batch);
    NoGradGuard ng;
    std::vector<Tensor> pools;
    pools.reserve(batch.size());
    for (const Tensor& img : batch) pools.push_back(raw_pooled(img));
    pool_std.fit(pools);
  }

  // Per-slot logits, each [label_count+1, 1].
  std::vector<Tensor> slot_logits(const Tensor& image) const {
    Tensor p = pooled(image);
    std::vector<Tensor> out;
    for (const Linear& h : heads) out.push_back(h.forward(p));
    return out;
  }

  // Argmax per slot; returns exactly kMaxSeqLen entries of label ids or
  // nm_class() before stripping.
  std::vector<int> predict_slots(const Tensor& image) const {
    std::vector<int> slots;
    for (const Tensor& logits : slot_logits(image)) {
      int best = 0;
      for (int k = 1; k < logits.dim(0); ++k)
        if (logits.data()[static_cast<size_t>(k)] >
            logits.data()[static_cast<size_t>(best)])
          best = k;
      slots.push_back(best);
    }
    return slots;
  }

  LabelSequence predict(const Tensor& image) const {
    std::vector<int> slots = predict_slots(image);
    size_t keep = slots.size();
    while (keep > 0 && slots[keep - 1] == nm_class()) --keep;
    LabelSequence out;
    for (size_t i = 0; i < keep; ++i)
      // interior NM becomes the metric-level padding id, never the head
      // class index (which collides with SOS in the token vocabulary)
      out.push_back(slots[i] == nm_class() ? vocab.nm() : slots[i]);
    return out;
  }
};

}  // namespace seqtrace
