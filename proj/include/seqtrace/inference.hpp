#pragma once

// Greedy autoregressive decoding and the batch inference runner.

#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "image.hpp"
#include "metrics.hpp"
#include "model.hpp"
#include "synthdata.hpp"

namespace seqtrace {

struct DecodeResult {
  LabelSequence labels;
  std::string stop_reason;  // "eos" | "max_len" | "fixed_slots"
};

// Greedy argmax per step; ties resolve to the lowest token id. Stops on
// EOS or after kMaxSeqLen labels.
inline DecodeResult greedy_decode_features(const Decoder& dec,
                                           const Tensor& f_spa, int fh,
                                           int fw) {
  NoGradGuard ng;
  DecodeResult out;
  std::vector<int> prefix{dec.vocab.sos()};
  for (int step = 0; step < kMaxSeqLen; ++step) {
    Tensor logits = dec.decode_step(prefix, f_spa, fh, fw);
    int best = 0;
    for (int k = 1; k < logits.dim(0); ++k)
      if (logits.data()[static_cast<size_t>(k)] >
          logits.data()[static_cast<size_t>(best)])
        best = k;
    if (best == dec.vocab.eos()) {
      out.stop_reason = "eos";
      return out;
    }
    out.labels.push_back(best);
    prefix.push_back(best);
  }
  out.stop_reason = "max_len";
  return out;
}

inline DecodeResult greedy_decode(const SeqFakeFormer& model,
                                  const Tensor& image) {
  NoGradGuard ng;
  Tensor f = model.spatial_features(image);
  return greedy_decode_features(model.decoder, f, model.fmap_size(),
                                model.fmap_size());
}

inline DecodeResult predict_multi_cls(const MultiCls& model,
                                      const Tensor& image) {
  NoGradGuard ng;
  return DecodeResult{model.predict(image), "fixed_slots"};
}

struct InferResult {
  std::vector<EvalPair> pairs;  // successfully predicted samples
  std::vector<long long> pair_ids;
  int errors = 0;
  std::string jsonl;  // header + one record per sample, manifest order
};

// Runs `predict` over every manifest record in the given split (-1 = all).
// Per-sample failures become error records and the run continues.
inline InferResult batch_infer(
    const Manifest& manifest, const std::string& data_dir, int split,
    const std::function<DecodeResult(const Tensor&)>& predict,
    const std::string& config_hash) {
  InferResult out;
  nlohmann::json header;
  header["version"] = 1;
  header["config_hash"] = config_hash;
  header["split"] = split < 0 ? "all" : split_name(split);
  out.jsonl = header.dump() + "\n";
  for (const SampleRecord& rec : manifest.records) {
    if (split >= 0 && rec.split != split) continue;
    nlohmann::json j;
    j["id"] = rec.id;
    std::vector<std::string> truth_names;
    for (int lbl : rec.labels())
      truth_names.push_back(manifest.vocab.name_of(lbl));
    j["truth"] = truth_names;
    try {
      ImageU8 im = read_png(data_dir + "/" + rec.image);
      DecodeResult r = predict(image_to_tensor(im));
      std::vector<std::string> pred_names;
      for (int lbl : r.labels)
        pred_names.push_back(manifest.vocab.token_name(lbl));
      j["predicted"] = pred_names;
      j["stop_reason"] = r.stop_reason;
      out.pairs.push_back(EvalPair{r.labels, rec.labels()});
      out.pair_ids.push_back(rec.id);
    } catch (const std::exception& e) {
      j["error"] = e.what();
      ++out.errors;
    }
    out.jsonl += j.dump() + "\n";
  }
  return out;
}

// Parses a batch_infer JSONL back into per-sample predictions.
struct InferRecord {
  long long id = 0;
  LabelSequence predicted;
  LabelSequence truth;
};

inline std::vector<InferRecord> parse_infer_jsonl(const std::string& text,
                                                  const Vocabulary& vocab) {
  std::vector<InferRecord> out;
  size_t pos = 0;
  bool first = true;
  while (pos < text.size()) {
    size_t nl = text.find('\n', pos);
    if (nl == std::string::npos) nl = text.size();
    std::string line = text.substr(pos, nl - pos);
    pos = nl + 1;
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    if (first) {
      first = false;
      if (!j.contains("id")) continue;  // header record
    }
    if (j.contains("error") || !j.contains("predicted")) continue;
    InferRecord r;
    r.id = j.at("id").get<long long>();
    for (const std::string& name :
         j.at("predicted").get<std::vector<std::string>>())
      r.predicted.push_back(vocab.token_id(name));
    for (const std::string& name :
         j.at("truth").get<std::vector<std::string>>())
      r.truth.push_back(vocab.id_of(name));
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace seqtrace
