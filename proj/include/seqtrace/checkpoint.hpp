#pragma once

// Single-file checkpoint container.
//
// Layout (all integers little-endian):
//   magic "STCK" | u32 version | str config_hash | u32 vocab_count | str...
//   | str kind | str model_kv | i32 epoch | u32 tensor_count
//   | tensor records: str path | u8 dtype (0 = f32) | u32 ndim | i32 dims...
//     | raw f32 payload
// Strings are u32 length + bytes. Momentum buffers ride along as ordinary
// records under "momentum/<param path>", so load->save round-trips are
// byte-identical by construction.

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "nn.hpp"
#include "tensor.hpp"

namespace seqtrace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint io assumes a little-endian host");

struct CheckpointData {
  std::string config_hash;
  std::vector<std::string> vocab_labels;
  std::string kind;      // "seqfakeformer" | "multi_cls"
  std::string model_kv;  // canonical model config string
  int epoch = 0;
  std::vector<std::pair<std::string, Tensor>> tensors;
};

namespace ckpt_detail {

inline void put_u32(std::string& out, uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);
}
inline void put_i32(std::string& out, int32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);
}
inline void put_str(std::string& out, const std::string& s) {
  put_u32(out, static_cast<uint32_t>(s.size()));
  out += s;
}

struct Reader {
  const std::string& buf;
  size_t off = 0;

  void need(size_t n) const {
    if (off + n > buf.size())
      throw std::runtime_error("checkpoint truncated");
  }
  uint32_t u32() {
    need(4);
    uint32_t v;
    std::memcpy(&v, buf.data() + off, 4);
    off += 4;
    return v;
  }
  int32_t i32() {
    need(4);
    int32_t v;
    std::memcpy(&v, buf.data() + off, 4);
    off += 4;
    return v;
  }
  uint8_t u8() {
    need(1);
    return static_cast<uint8_t>(buf[off++]);
  }
  std::string str() {
    uint32_t n = u32();
    need(n);
    std::string s = buf.substr(off, n);
    off += n;
    return s;
  }
};

}  // namespace ckpt_detail

inline void save_checkpoint(const std::string& path,
                            const CheckpointData& d) {
  using namespace ckpt_detail;
  std::string out;
  out += "STCK";
  put_u32(out, 1);
  put_str(out, d.config_hash);
  put_u32(out, static_cast<uint32_t>(d.vocab_labels.size()));
  for (const std::string& l : d.vocab_labels) put_str(out, l);
  put_str(out, d.kind);
  put_str(out, d.model_kv);
  put_i32(out, d.epoch);
  put_u32(out, static_cast<uint32_t>(d.tensors.size()));
  for (const auto& [name, t] : d.tensors) {
    put_str(out, name);
    out.push_back('\0');  // dtype 0 = f32
    put_u32(out, static_cast<uint32_t>(t.ndim()));
    for (int i = 0; i < t.ndim(); ++i) put_i32(out, t.dim(i));
    const char* bytes = reinterpret_cast<const char*>(t.data().data());
    out.append(bytes, t.numel() * sizeof(float));
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw std::runtime_error("failed while writing " + path);
}

inline CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint " + path);
  std::string buf((std::istreambuf_iterator<char>(f)),
                  std::istreambuf_iterator<char>());
  ckpt_detail::Reader r{buf};
  r.need(4);
  if (buf.compare(0, 4, "STCK") != 0)
    throw std::runtime_error(path + " is not a checkpoint file");
  r.off = 4;
  uint32_t version = r.u32();
  if (version != 1)
    throw std::runtime_error("unsupported checkpoint version " +
                             std::to_string(version));
  CheckpointData d;
  d.config_hash = r.str();
  uint32_t nv = r.u32();
  for (uint32_t i = 0; i < nv; ++i) d.vocab_labels.push_back(r.str());
  d.kind = r.str();
  d.model_kv = r.str();
  d.epoch = r.i32();
  uint32_t nt = r.u32();
  for (uint32_t i = 0; i < nt; ++i) {
    std::string name = r.str();
    uint8_t dtype = r.u8();
    if (dtype != 0)
      throw std::runtime_error("unsupported dtype in record " + name);
    uint32_t ndim = r.u32();
    Shape shape;
    for (uint32_t k = 0; k < ndim; ++k) shape.push_back(r.i32());
    size_t n = shape_numel(shape);
    r.need(n * sizeof(float));
    Tensor t = Tensor::zeros(shape);
    std::memcpy(t.data().data(), buf.data() + r.off, n * sizeof(float));
    r.off += n * sizeof(float);
    d.tensors.emplace_back(name, t);
  }
  if (r.off != buf.size())
    throw std::runtime_error(path + " has trailing bytes");
  return d;
}

using MomentumState = std::map<std::string, std::vector<float>>;

// Deep-copies parameters (store order) and then momentum buffers.
inline CheckpointData snapshot(const ParamStore& ps, const MomentumState& mom,
                               int epoch, const std::string& config_hash,
                               const std::vector<std::string>& vocab_labels,
                               const std::string& kind,
                               const std::string& model_kv) {
  CheckpointData d;
  d.config_hash = config_hash;
  d.vocab_labels = vocab_labels;
  d.kind = kind;
  d.model_kv = model_kv;
  d.epoch = epoch;
  for (const auto& [name, t] : ps.items()) {
    Tensor copy = Tensor::zeros(t.shape());
    copy.data() = t.data();
    d.tensors.emplace_back(name, copy);
  }
  for (const auto& [name, t] : ps.items()) {
    auto it = mom.find(name);
    if (it == mom.end()) continue;
    Tensor copy = Tensor::zeros(t.shape());
    copy.data() = it->second;
    d.tensors.emplace_back("momentum/" + name, copy);
  }
  return d;
}

// Writes checkpoint tensors back into a live model's parameter store.
inline void restore(const CheckpointData& d, ParamStore& ps,
                    MomentumState* mom = nullptr) {
  size_t applied = 0;
  for (const auto& [name, t] : d.tensors) {
    if (name.rfind("momentum/", 0) == 0) {
      if (mom) {
        std::string pname = name.substr(9);
        if (!ps.has(pname))
          throw std::runtime_error("checkpoint momentum for unknown parameter " +
                                   pname);
        (*mom)[pname] = t.data();
      }
      continue;
    }
    if (!ps.has(name))
      throw std::runtime_error("checkpoint has unknown parameter " + name);
    Tensor dst = ps.get(name);
    if (dst.shape() != t.shape())
      throw std::runtime_error("checkpoint shape mismatch for " + name + ": " +
                               shape_str(t.shape()) + " vs " +
                               shape_str(dst.shape()));
    dst.data() = t.data();
    ++applied;
  }
  if (applied != ps.items().size())
    throw std::runtime_error("checkpoint is missing parameters: applied " +
                             std::to_string(applied) + " of " +
                             std::to_string(ps.items().size()));
}

}  // namespace seqtrace
