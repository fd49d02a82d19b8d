#pragma once

#include <algorithm>
#include <stdexcept>
#include <string>
#include <vector>

namespace seqtrace {

constexpr int kMaxSeqLen = 5;  // N_max

// Ordered manipulation labels; token id assignment is list order, stable
// across runs. Control ids follow the labels: SOS, EOS, PAD, then NM. NM is
// only a padding class for the metrics and the fixed-length baseline — the
// decoder never trains on it.
struct Vocabulary {
  std::vector<std::string> labels;

  int label_count() const { return static_cast<int>(labels.size()); }
  int sos() const { return label_count(); }
  int eos() const { return label_count() + 1; }
  int pad() const { return label_count() + 2; }
  int nm() const { return label_count() + 3; }
  int size() const { return label_count() + 4; }  // V

  int id_of(const std::string& name) const {
    auto it = std::find(labels.begin(), labels.end(), name);
    if (it == labels.end())
      throw std::runtime_error("unknown manipulation label: " + name);
    return static_cast<int>(it - labels.begin());
  }

  const std::string& name_of(int id) const {
    if (id < 0 || id >= label_count())
      throw std::runtime_error("token id " + std::to_string(id) +
                               " is not a manipulation label");
    return labels[static_cast<size_t>(id)];
  }

  bool is_label(int id) const { return id >= 0 && id < label_count(); }

  // Like name_of but total over the token range: control ids get bracketed
  // names so serialized predictions survive a round trip even when an
  // untrained model emits them.
  std::string token_name(int id) const {
    if (is_label(id)) return labels[static_cast<size_t>(id)];
    if (id == sos()) return "<sos>";
    if (id == eos()) return "<eos>";
    if (id == pad()) return "<pad>";
    if (id == nm()) return "<nm>";
    throw std::runtime_error("token id " + std::to_string(id) +
                             " outside the vocabulary");
  }

  int token_id(const std::string& name) const {
    if (name == "<sos>") return sos();
    if (name == "<eos>") return eos();
    if (name == "<pad>") return pad();
    if (name == "<nm>") return nm();
    return id_of(name);
  }
};

using LabelSequence = std::vector<int>;  // label ids, adaptive length 0..N_max

// [SOS, labels..., EOS, PAD...] padded to N_max+2; mask marks real positions.
struct TokenSequence {
  std::vector<int> ids;
  std::vector<bool> mask;

  int padded_len() const { return static_cast<int>(ids.size()); }
};

inline TokenSequence tokenize(const LabelSequence& labels, const Vocabulary& v) {
  if (static_cast<int>(labels.size()) > kMaxSeqLen)
    throw std::runtime_error("sequence of length " +
                             std::to_string(labels.size()) + " exceeds N_max=" +
                             std::to_string(kMaxSeqLen));
  for (int id : labels)
    if (!v.is_label(id))
      throw std::runtime_error("token id " + std::to_string(id) +
                               " is not in the vocabulary");
  TokenSequence t;
  t.ids.push_back(v.sos());
  for (int id : labels) t.ids.push_back(id);
  t.ids.push_back(v.eos());
  while (t.ids.size() < static_cast<size_t>(kMaxSeqLen + 2))
    t.ids.push_back(v.pad());
  for (int id : t.ids) t.mask.push_back(id != v.pad());
  return t;
}

inline LabelSequence detokenize(const TokenSequence& t, const Vocabulary& v) {
  LabelSequence out;
  if (t.ids.empty() || t.ids[0] != v.sos())
    throw std::runtime_error("token sequence does not start with SOS");
  for (size_t i = 1; i < t.ids.size(); ++i) {
    int id = t.ids[i];
    if (id == v.eos()) return out;
    if (!v.is_label(id))
      throw std::runtime_error("unexpected control token before EOS");
    out.push_back(id);
  }
  throw std::runtime_error("token sequence has no EOS");
}

}  // namespace seqtrace
