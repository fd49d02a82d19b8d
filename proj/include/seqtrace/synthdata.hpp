#pragma once

// Procedural, order-sensitive, exactly invertible manipulation dataset.
//
// Each sample is a small painted "face" plus an ordered sequence of edits.
// All edits are integer-exact bijections on the pixel grid (modular adds,
// XOR stamps, cyclic rolls), so replaying a stored sequence is bit-exact
// and applying the inverses in reverse order recovers the base image
// exactly. The ops are anchored to distinct face regions, which is what
// makes a spatial attention prior useful in the first place.

#include <algorithm>
#include <array>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "config.hpp"
#include "image.hpp"
#include "rng.hpp"
#include "vocab.hpp"

namespace seqtrace {

// Label ids in vocabulary order.
enum : int {
  kOpEyebrow = 0,
  kOpEyeglasses = 1,
  kOpHair = 2,
  kOpLip = 3,
  kOpNose = 4,
};

inline Vocabulary dataset_vocabulary() {
  return Vocabulary{{"eyebrow", "eyeglasses", "hair", "lip", "nose"}};
}

// The designated pairs exercised by the composition tests: the glasses
// stamp XORs a dashed bridge through the nose region, and the nose op
// cyclically rolls that same region, so their order is always visible.
// The eyebrow and lip edits touch disjoint rows and therefore commute.
inline std::pair<int, int> non_commuting_pair() {
  return {kOpNose, kOpEyeglasses};
}
inline std::pair<int, int> commuting_pair() { return {kOpEyebrow, kOpLip}; }

struct OpInstance {
  int label = 0;
  // p[0],p[1]: region anchor row/col; p[2..4]: op-specific keys/deltas.
  std::array<int, 5> p{};
};

namespace painter {

inline void fill_rect(ImageU8& im, int r0, int c0, int h, int w, uint8_t r,
                      uint8_t g, uint8_t b) {
  for (int i = std::max(0, r0); i < std::min(im.height, r0 + h); ++i)
    for (int j = std::max(0, c0); j < std::min(im.width, c0 + w); ++j) {
      im.at(i, j, 0) = r;
      im.at(i, j, 1) = g;
      im.at(i, j, 2) = b;
    }
}

inline void fill_ellipse(ImageU8& im, float cr, float cc, float rr, float rc,
                         uint8_t r, uint8_t g, uint8_t b) {
  for (int i = 0; i < im.height; ++i)
    for (int j = 0; j < im.width; ++j) {
      float dr = (i - cr) / rr, dc = (j - cc) / rc;
      if (dr * dr + dc * dc <= 1.0f) {
        im.at(i, j, 0) = r;
        im.at(i, j, 1) = g;
        im.at(i, j, 2) = b;
      }
    }
}

}  // namespace painter

// Base face: layered parameterized shapes with per-sample jitter. Pure
// function of the rng state.
inline ImageU8 paint_face(Rng& rng, int size = 64) {
  auto u8 = [&](int lo, int hi) {
    return static_cast<uint8_t>(rng.uniform_int(lo, hi));
  };
  // background: vertical gradient
  ImageU8 im = ImageU8::filled(size, size, 0, 0, 0);
  uint8_t top_r = u8(30, 90), top_g = u8(30, 90), top_b = u8(90, 150);
  uint8_t bot_r = u8(90, 150), bot_g = u8(90, 150), bot_b = u8(150, 210);
  for (int i = 0; i < size; ++i) {
    float a = static_cast<float>(i) / (size - 1);
    for (int j = 0; j < size; ++j) {
      im.at(i, j, 0) = static_cast<uint8_t>(top_r + a * (bot_r - top_r));
      im.at(i, j, 1) = static_cast<uint8_t>(top_g + a * (bot_g - top_g));
      im.at(i, j, 2) = static_cast<uint8_t>(top_b + a * (bot_b - top_b));
    }
  }
  float cr = 34 + rng.uniform_float(-1.5f, 1.5f);
  float cc = 32 + rng.uniform_float(-1.5f, 1.5f);
  uint8_t skin_r = u8(190, 235), skin_g = u8(150, 190), skin_b = u8(120, 160);
  painter::fill_ellipse(im, cr, cc, 25, 20, skin_r, skin_g, skin_b);
  // hair band across the top of the head
  uint8_t hair_r = u8(20, 80), hair_g = u8(10, 60), hair_b = u8(5, 40);
  painter::fill_rect(im, 7 + rng.uniform_int(-1, 1), 16, 7, 32, hair_r, hair_g,
                     hair_b);
  // eyebrows
  painter::fill_rect(im, 20, 21 + rng.uniform_int(-1, 1), 2, 8, hair_r, hair_g,
                     hair_b);
  painter::fill_rect(im, 20, 35 + rng.uniform_int(-1, 1), 2, 8, hair_r, hair_g,
                     hair_b);
  // eyes: whites + pupils
  for (int side = 0; side < 2; ++side) {
    float ec = side == 0 ? 25.0f : 39.0f;
    painter::fill_ellipse(im, 27, ec, 2.5f, 3.5f, 245, 245, 245);
    painter::fill_ellipse(im, 27, ec + rng.uniform_float(-1.0f, 1.0f), 1.4f,
                          1.4f, u8(10, 60), u8(10, 60), u8(40, 90));
  }
  // nose: vertical ridge + base
  uint8_t nose_r = static_cast<uint8_t>(skin_r - 40);
  uint8_t nose_g = static_cast<uint8_t>(skin_g - 40);
  uint8_t nose_b = static_cast<uint8_t>(skin_b - 30);
  painter::fill_rect(im, 30, 31 + rng.uniform_int(-1, 1), 10, 2, nose_r,
                     nose_g, nose_b);
  painter::fill_rect(im, 39, 29 + rng.uniform_int(-1, 1), 2, 6, nose_r, nose_g,
                     nose_b);
  // mouth
  painter::fill_ellipse(im, 47 + rng.uniform_float(-1.0f, 1.0f), cc, 2.5f,
                        7.0f, u8(140, 200), u8(30, 70), u8(40, 80));
  return im;
}

// ---- invertible edits ------------------------------------------------

namespace ops {

// pixel <- pixel + sign*(d0,d1,d2) mod 256 over a rectangle
inline void add_mod(ImageU8& im, int r0, int c0, int h, int w, int d0, int d1,
                    int d2, int sign) {
  int d[3] = {d0 * sign, d1 * sign, d2 * sign};
  for (int i = r0; i < r0 + h; ++i)
    for (int j = c0; j < c0 + w; ++j)
      for (int ch = 0; ch < 3; ++ch)
        im.at(i, j, ch) =
            static_cast<uint8_t>((im.at(i, j, ch) + d[ch] + 512) & 0xff);
}

inline void xor_px(ImageU8& im, int i, int j, int key) {
  if (i < 0 || j < 0 || i >= im.height || j >= im.width) return;
  for (int ch = 0; ch < 3; ++ch)
    im.at(i, j, ch) = static_cast<uint8_t>(im.at(i, j, ch) ^ key);
}

// Glasses stamp: two lens outlines plus a dashed bridge. Self-inverse.
// The dash keys off global column parity, so a cyclic roll by an odd
// amount through the bridge never commutes with this stamp.
inline void glasses_stamp(ImageU8& im, int gr, int gc, int key) {
  for (int box = 0; box < 2; ++box) {
    int c0 = gc + (box == 0 ? 0 : 26);
    for (int j = c0; j < c0 + 10; ++j) {
      xor_px(im, gr, j, key);
      xor_px(im, gr + 7, j, key);
    }
    for (int i = gr + 1; i < gr + 7; ++i) {
      xor_px(im, i, c0, key);
      xor_px(im, i, c0 + 9, key);
    }
  }
  for (int j = gc + 10; j < gc + 26; ++j)
    if (j % 2 == 0) xor_px(im, gr + 7, j, key);
}

// Cyclic roll of each row segment by k columns (dir=+1 right, -1 left).
inline void roll_region(ImageU8& im, int r0, int c0, int h, int w, int k,
                        int dir) {
  std::vector<uint8_t> row(static_cast<size_t>(w) * 3);
  int shift = ((k * dir) % w + w) % w;
  for (int i = r0; i < r0 + h; ++i) {
    for (int j = 0; j < w; ++j)
      for (int ch = 0; ch < 3; ++ch)
        row[(static_cast<size_t>(j) + shift) % w * 3 + ch] =
            im.at(i, c0 + j, ch);
    for (int j = 0; j < w; ++j)
      for (int ch = 0; ch < 3; ++ch)
        im.at(i, c0 + j, ch) = row[static_cast<size_t>(j) * 3 + ch];
  }
}

// Column-parity XOR stripes. Self-inverse.
inline void stripes(ImageU8& im, int r0, int c0, int h, int w, int k_even,
                    int k_odd) {
  for (int i = r0; i < r0 + h; ++i)
    for (int j = c0; j < c0 + w; ++j)
      xor_px(im, i, j, j % 2 == 0 ? k_even : k_odd);
}

}  // namespace ops

inline void apply_op(ImageU8& im, const OpInstance& op) {
  const auto& p = op.p;
  switch (op.label) {
    case kOpEyebrow: ops::add_mod(im, p[0], p[1], 6, 32, p[2], p[3], p[4], 1); break;
    case kOpEyeglasses: ops::glasses_stamp(im, p[0], p[1], p[2]); break;
    case kOpHair: ops::stripes(im, p[0], p[1], 5, 36, p[2], p[3]); break;
    case kOpLip: ops::add_mod(im, p[0], p[1], 8, 20, p[2], p[3], p[4], 1); break;
    case kOpNose: ops::roll_region(im, p[0], p[1], 14, 12, p[2], 1); break;
    default: throw std::runtime_error("unknown op label id " + std::to_string(op.label));
  }
}

inline void invert_op(ImageU8& im, const OpInstance& op) {
  const auto& p = op.p;
  switch (op.label) {
    case kOpEyebrow: ops::add_mod(im, p[0], p[1], 6, 32, p[2], p[3], p[4], -1); break;
    case kOpEyeglasses: ops::glasses_stamp(im, p[0], p[1], p[2]); break;
    case kOpHair: ops::stripes(im, p[0], p[1], 5, 36, p[2], p[3]); break;
    case kOpLip: ops::add_mod(im, p[0], p[1], 8, 20, p[2], p[3], p[4], -1); break;
    case kOpNose: ops::roll_region(im, p[0], p[1], 14, 12, p[2], -1); break;
    default: throw std::runtime_error("unknown op label id " + std::to_string(op.label));
  }
}

// Deterministic parameter defaults (zero jitter, canonical keys). Used when
// a predicted label has no stored parameters to resolve against.
inline OpInstance default_op(int label) {
  switch (label) {
    case kOpEyebrow: return {label, {18, 14, 64, 64, 64}};
    case kOpEyeglasses: return {label, {24, 13, 120, 0, 0}};
    case kOpHair: return {label, {4, 14, 96, 72, 0}};
    case kOpLip: return {label, {44, 22, 55, 55, 55}};
    case kOpNose: return {label, {28, 26, 3, 0, 0}};
    default: throw std::runtime_error("unknown op label id " + std::to_string(label));
  }
}

inline OpInstance sample_op(int label, Rng& rng) {
  OpInstance op;
  op.label = label;
  switch (label) {
    case kOpEyebrow:
      op.p = {18 + rng.uniform_int(-1, 1), 14 + rng.uniform_int(-2, 2),
              rng.uniform_int(40, 90), rng.uniform_int(40, 90),
              rng.uniform_int(40, 90)};
      break;
    case kOpEyeglasses:
      op.p = {24 + rng.uniform_int(-1, 1), 13 + rng.uniform_int(-2, 2),
              rng.uniform_int(60, 180), 0, 0};
      break;
    case kOpHair:
      op.p = {4 + rng.uniform_int(-1, 1), 14 + rng.uniform_int(-2, 2),
              rng.uniform_int(50, 140), rng.uniform_int(50, 140), 0};
      break;
    case kOpLip:
      op.p = {44 + rng.uniform_int(-2, 2), 22 + rng.uniform_int(-2, 2),
              rng.uniform_int(30, 80), rng.uniform_int(30, 80),
              rng.uniform_int(30, 80)};
      break;
    case kOpNose:
      op.p = {28 + rng.uniform_int(-2, 2), 26 + rng.uniform_int(-1, 1),
              rng.uniform_int(0, 1) == 0 ? 1 : 3, 0, 0};
      break;
    default:
      throw std::runtime_error("unknown op label id " + std::to_string(label));
  }
  return op;
}

// ---- generation ------------------------------------------------------

struct GenConfig {
  long long n = 100;
  unsigned long long seed = 0;
  std::array<double, 6> length_dist{0.0, 0.2048, 0.2006, 0.1862, 0.2088,
                                    0.1996};
  int image_size = 64;
  double subtle_ceiling = 0.15;

  std::string canonical() const {
    KvBuilder kv;
    kv.add("kind", std::string("generate"))
        .add("n", n)
        .add("seed", seed)
        .add("image_size", image_size)
        .add("subtle_ceiling", subtle_ceiling);
    for (int i = 0; i < 6; ++i)
      kv.add("len" + std::to_string(i), length_dist[i]);
    return kv.s;
  }
  std::string hash() const { return hex64(fnv1a64(canonical())); }
};

inline void validate_length_dist(const std::array<double, 6>& d) {
  double sum = 0.0;
  for (double v : d) {
    if (v < 0.0) throw std::runtime_error("length distribution has a negative entry");
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-6)
    throw std::runtime_error("length distribution sums to " +
                             std::to_string(sum) + ", expected 1");
}

inline int sample_length(const std::array<double, 6>& dist, Rng& rng) {
  double u = rng.uniform();
  double acc = 0.0;
  for (int k = 0; k < 6; ++k) {
    acc += dist[k];
    if (u < acc) return k;
  }
  return 5;
}

inline std::vector<OpInstance> sample_sequence(const GenConfig& cfg, Rng& rng) {
  int len = sample_length(cfg.length_dist, rng);
  std::vector<int> labels{0, 1, 2, 3, 4};
  rng.shuffle(labels);
  labels.resize(static_cast<size_t>(len));
  std::vector<OpInstance> seq;
  for (int lbl : labels) seq.push_back(sample_op(lbl, rng));
  return seq;
}

// 80/10/10 by id hash — stable across runs and seeds.
inline int split_of(long long id) {
  uint64_t h = Rng::mix(static_cast<uint64_t>(id) + 0x9E3779B97F4A7C15ull);
  uint64_t r = h % 10;
  if (r < 8) return 0;  // train
  return r == 8 ? 1 : 2;  // val : test
}

inline const char* split_name(int s) {
  switch (s) {
    case 0: return "train";
    case 1: return "val";
    case 2: return "test";
  }
  throw std::runtime_error("bad split index " + std::to_string(s));
}

inline int split_from_name(const std::string& s) {
  if (s == "train") return 0;
  if (s == "val") return 1;
  if (s == "test") return 2;
  throw std::runtime_error("unknown split name: " + s);
}

struct SampleRecord {
  long long id = 0;
  std::string image;       // final image path, relative to manifest dir
  std::string orig_image;  // base image path
  std::vector<OpInstance> ops;
  int split = 0;

  LabelSequence labels() const {
    LabelSequence out;
    for (const OpInstance& op : ops) out.push_back(op.label);
    return out;
  }
};

struct Manifest {
  int version = 1;
  unsigned long long seed = 0;
  std::string config_hash;
  Vocabulary vocab;
  std::vector<SampleRecord> records;

  std::vector<size_t> split_indices(int split) const {
    std::vector<size_t> out;
    for (size_t i = 0; i < records.size(); ++i)
      if (records[i].split == split) out.push_back(i);
    return out;
  }
};

// Deterministic per-sample synthesis: pure function of (seed, id).
struct BuiltSample {
  ImageU8 base, final_image;
  std::vector<OpInstance> ops;
};

inline BuiltSample build_sample(const GenConfig& cfg, long long id) {
  Rng base_seed(cfg.seed);
  Rng rng = base_seed.stream("sample", static_cast<uint64_t>(id));
  BuiltSample s;
  s.base = paint_face(rng, cfg.image_size);
  s.ops = sample_sequence(cfg, rng);
  s.final_image = s.base;
  for (const OpInstance& op : s.ops) apply_op(s.final_image, op);
  return s;
}

inline double changed_fraction(const ImageU8& a, const ImageU8& b) {
  int n = a.width * a.height, changed = 0;
  for (int i = 0; i < a.height; ++i)
    for (int j = 0; j < a.width; ++j)
      for (int ch = 0; ch < 3; ++ch)
        if (a.at(i, j, ch) != b.at(i, j, ch)) {
          ++changed;
          break;
        }
  return static_cast<double>(changed) / n;
}

// Mean absolute per-pixel difference normalized to [0,1].
inline double identity_distance(const ImageU8& a, const ImageU8& b) {
  if (a.width != b.width || a.height != b.height)
    throw std::runtime_error("identity_distance: size mismatch");
  double acc = 0.0;
  for (size_t i = 0; i < a.rgb.size(); ++i)
    acc += std::abs(static_cast<int>(a.rgb[i]) - static_cast<int>(b.rgb[i]));
  return acc / (255.0 * static_cast<double>(a.rgb.size()));
}

// ---- manifest io -----------------------------------------------------

inline nlohmann::json record_to_json(const SampleRecord& r,
                                     const Vocabulary& vocab) {
  nlohmann::json j;
  j["id"] = r.id;
  j["image"] = r.image;
  j["orig"] = r.orig_image;
  std::vector<std::string> names;
  std::vector<std::vector<int>> params;
  for (const OpInstance& op : r.ops) {
    names.push_back(vocab.name_of(op.label));
    params.emplace_back(op.p.begin(), op.p.end());
  }
  j["labels"] = names;
  j["params"] = params;
  j["split"] = split_name(r.split);
  return j;
}

inline void save_manifest(const std::string& path, const Manifest& m) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  nlohmann::json header;
  header["version"] = m.version;
  header["seed"] = m.seed;
  header["vocab"] = m.vocab.labels;
  header["config_hash"] = m.config_hash;
  out << header.dump() << "\n";
  for (const SampleRecord& r : m.records)
    out << record_to_json(r, m.vocab).dump() << "\n";
  if (!out) throw std::runtime_error("failed while writing " + path);
}

inline Manifest load_manifest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open manifest " + path);
  std::string line;
  if (!std::getline(in, line))
    throw std::runtime_error("manifest " + path + " is empty");
  nlohmann::json header = nlohmann::json::parse(line);
  Manifest m;
  m.version = header.at("version").get<int>();
  m.seed = header.at("seed").get<unsigned long long>();
  m.config_hash = header.at("config_hash").get<std::string>();
  m.vocab = Vocabulary{header.at("vocab").get<std::vector<std::string>>()};
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    SampleRecord r;
    r.id = j.at("id").get<long long>();
    r.image = j.at("image").get<std::string>();
    r.orig_image = j.at("orig").get<std::string>();
    r.split = split_from_name(j.at("split").get<std::string>());
    auto names = j.at("labels").get<std::vector<std::string>>();
    auto params = j.at("params").get<std::vector<std::vector<int>>>();
    if (names.size() != params.size())
      throw std::runtime_error("manifest record " + std::to_string(r.id) +
                               ": labels/params length mismatch");
    for (size_t i = 0; i < names.size(); ++i) {
      OpInstance op;
      op.label = m.vocab.id_of(names[i]);
      if (params[i].size() != op.p.size())
        throw std::runtime_error("manifest record " + std::to_string(r.id) +
                                 ": bad parameter arity");
      std::copy(params[i].begin(), params[i].end(), op.p.begin());
      r.ops.push_back(op);
    }
    m.records.push_back(std::move(r));
  }
  return m;
}

// Generates images + manifest under out_dir. Returns the manifest.
inline Manifest generate(const GenConfig& cfg, const std::string& out_dir) {
  validate_length_dist(cfg.length_dist);
  std::filesystem::create_directories(out_dir);
  Manifest m;
  m.seed = cfg.seed;
  m.config_hash = cfg.hash();
  m.vocab = dataset_vocabulary();
  double changed_sum = 0.0;
  for (long long id = 0; id < cfg.n; ++id) {
    BuiltSample s = build_sample(cfg, id);
    SampleRecord r;
    r.id = id;
    r.image = std::to_string(id) + ".png";
    r.orig_image = std::to_string(id) + ".orig.png";
    r.ops = s.ops;
    r.split = split_of(id);
    write_png(out_dir + "/" + r.image, s.final_image);
    write_png(out_dir + "/" + r.orig_image, s.base);
    changed_sum += changed_fraction(s.base, s.final_image);
    m.records.push_back(std::move(r));
  }
  double mean_changed = cfg.n > 0 ? changed_sum / static_cast<double>(cfg.n) : 0.0;
  if (mean_changed >= cfg.subtle_ceiling)
    throw std::runtime_error(
        "generated edits are not subtle: mean changed-pixel fraction " +
        std::to_string(mean_changed) + " >= ceiling " +
        std::to_string(cfg.subtle_ceiling));
  save_manifest(out_dir + "/manifest.jsonl", m);
  return m;
}

// ---- quality filter --------------------------------------------------

// Cheap proxy score: 1 minus the fraction of pixel channels pinned at 0 or
// 255. Keeps an image when score >= threshold.
inline double quality_score(const ImageU8& im) {
  size_t clipped = 0;
  for (uint8_t v : im.rgb)
    if (v == 0 || v == 255) ++clipped;
  return 1.0 - static_cast<double>(clipped) / static_cast<double>(im.rgb.size());
}

inline std::vector<size_t> quality_filter(const std::vector<ImageU8>& images,
                                          double threshold) {
  if (threshold < 0.0 || threshold > 1.0)
    throw std::runtime_error("quality threshold must lie in [0,1]");
  std::vector<size_t> kept;
  for (size_t i = 0; i < images.size(); ++i)
    if (quality_score(images[i]) >= threshold) kept.push_back(i);
  return kept;
}

// ---- recovery --------------------------------------------------------

// Applies the stored inverses over the final image. `correct` order is the
// reverse of application order; the shuffled control applies them in a
// deliberately wrong order (guaranteed != correct whenever len >= 2).
inline ImageU8 recover(const ImageU8& final_image,
                       const std::vector<OpInstance>& ops, bool shuffled,
                       Rng& rng) {
  std::vector<size_t> order(ops.size());
  for (size_t i = 0; i < order.size(); ++i)
    order[i] = order.size() - 1 - i;  // reverse application order
  if (shuffled && ops.size() >= 2) {
    std::vector<size_t> alt = order;
    while (alt == order) rng.shuffle(alt);
    order = alt;
  }
  ImageU8 im = final_image;
  for (size_t idx : order) invert_op(im, ops[idx]);
  return im;
}

// Resolves a label sequence against a record's stored ops: first occurrence
// wins; labels absent from the record fall back to canonical defaults.
inline std::vector<OpInstance> resolve_ops(const LabelSequence& labels,
                                           const SampleRecord& rec) {
  std::vector<OpInstance> out;
  for (int lbl : labels) {
    bool found = false;
    for (const OpInstance& op : rec.ops)
      if (op.label == lbl) {
        out.push_back(op);
        found = true;
        break;
      }
    if (!found) out.push_back(default_op(lbl));
  }
  return out;
}

}  // namespace seqtrace
