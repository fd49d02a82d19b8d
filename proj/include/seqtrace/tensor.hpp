#pragma once

// Small reverse-mode autodiff tensor. Float32 storage, channels-first
// conventions throughout. Each op records a closure that scatters the
// output gradient back into its parents; backward() replays closures in
// reverse execution order. Deliberately no views: every op materializes
// its result, which keeps the gradient logic local and easy to audit.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#ifdef SEQTRACE_WITH_CBLAS
#include <cblas.h>
#endif

namespace seqtrace {

constexpr float kNegInf = -1e9f;  // additive mask sentinel, not IEEE -inf

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

inline size_t shape_numel(const Shape& s) {
  size_t n = 1;
  for (int d : s) {
    if (d <= 0) throw std::runtime_error("non-positive dim in shape " + shape_str(s));
    n *= static_cast<size_t>(d);
  }
  return n;
}

struct TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

struct TensorNode {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // lazily sized
  bool requires_grad = false;
  uint64_t seq = 0;  // execution order, for reverse traversal
  std::vector<NodePtr> parents;
  std::function<void(TensorNode&)> backward_fn;

  size_t numel() const { return data.size(); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
  }
};

inline uint64_t next_seq() {
  thread_local uint64_t counter = 0;
  return ++counter;
}

// Global (per-thread) switch: when off, ops record no graph. Used during
// greedy decoding and evaluation to keep memory flat.
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev; }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr n) : node_(std::move(n)) {}

  static Tensor zeros(const Shape& shape, bool requires_grad = false) {
    auto n = std::make_shared<TensorNode>();
    n->shape = shape;
    n->data.assign(shape_numel(shape), 0.0f);
    n->requires_grad = requires_grad && grad_mode();
    n->seq = next_seq();
    return Tensor(n);
  }

  static Tensor full(const Shape& shape, float v, bool requires_grad = false) {
    Tensor t = zeros(shape, requires_grad);
    std::fill(t.data().begin(), t.data().end(), v);
    return t;
  }

  static Tensor from_data(const Shape& shape, std::vector<float> d,
                          bool requires_grad = false) {
    if (d.size() != shape_numel(shape))
      throw std::runtime_error("from_data: " + std::to_string(d.size()) +
                               " values for shape " + shape_str(shape));
    auto n = std::make_shared<TensorNode>();
    n->shape = shape;
    n->data = std::move(d);
    n->requires_grad = requires_grad && grad_mode();
    n->seq = next_seq();
    return Tensor(n);
  }

  static Tensor scalar(float v) { return from_data({1}, {v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  size_t numel() const { return node_->numel(); }
  int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  std::vector<float>& data() const { return node_->data; }
  std::vector<float>& grad() const {
    node_->ensure_grad();
    return node_->grad;
  }
  bool requires_grad() const { return node_->requires_grad; }
  NodePtr node() const { return node_; }
  float item() const {
    if (numel() != 1)
      throw std::runtime_error("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  void zero_grad() const { node_->grad.assign(node_->data.size(), 0.0f); }

  // Reverse pass from a scalar. Gradients accumulate into every reachable
  // node with requires_grad set.
  void backward() const;

 private:
  NodePtr node_;
};

namespace detail {

inline Tensor make_result(const Shape& shape, std::vector<NodePtr> parents) {
  auto n = std::make_shared<TensorNode>();
  n->shape = shape;
  n->data.assign(shape_numel(shape), 0.0f);
  n->seq = next_seq();
  if (grad_mode()) {
    for (const auto& p : parents)
      if (p->requires_grad) n->requires_grad = true;
    if (n->requires_grad) n->parents = std::move(parents);
  }
  return Tensor(n);
}

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  int nd = static_cast<int>(std::max(a.size(), b.size()));
  Shape out(static_cast<size_t>(nd));
  for (int d = 0; d < nd; ++d) {
    int ai = d - (nd - static_cast<int>(a.size()));
    int bi = d - (nd - static_cast<int>(b.size()));
    int av = ai >= 0 ? a[static_cast<size_t>(ai)] : 1;
    int bv = bi >= 0 ? b[static_cast<size_t>(bi)] : 1;
    if (av != bv && av != 1 && bv != 1)
      throw std::runtime_error("cannot broadcast " + shape_str(a) + " with " +
                               shape_str(b));
    out[static_cast<size_t>(d)] = std::max(av, bv);
  }
  return out;
}

// Effective strides of `s` viewed as `out` (0 where broadcast).
inline std::vector<size_t> broadcast_strides(const Shape& s, const Shape& out) {
  int nd = static_cast<int>(out.size());
  std::vector<size_t> native(s.size());
  size_t acc = 1;
  for (int d = static_cast<int>(s.size()) - 1; d >= 0; --d) {
    native[static_cast<size_t>(d)] = acc;
    acc *= static_cast<size_t>(s[static_cast<size_t>(d)]);
  }
  std::vector<size_t> st(static_cast<size_t>(nd), 0);
  for (int d = 0; d < nd; ++d) {
    int si = d - (nd - static_cast<int>(s.size()));
    if (si >= 0 && s[static_cast<size_t>(si)] != 1)
      st[static_cast<size_t>(d)] = native[static_cast<size_t>(si)];
  }
  return st;
}

// Walk every output index once, handing the caller the matching flat
// offsets into both operands.
template <typename F>
inline void broadcast_walk(const Shape& out, const std::vector<size_t>& as,
                           const std::vector<size_t>& bs, F&& f) {
  size_t n = shape_numel(out);
  int nd = static_cast<int>(out.size());
  std::vector<int> idx(static_cast<size_t>(nd), 0);
  size_t ia = 0, ib = 0;
  for (size_t i = 0; i < n; ++i) {
    f(i, ia, ib);
    for (int d = nd - 1; d >= 0; --d) {
      size_t du = static_cast<size_t>(d);
      idx[du]++;
      ia += as[du];
      ib += bs[du];
      if (idx[du] < out[du]) break;
      idx[du] = 0;
      ia -= as[du] * static_cast<size_t>(out[du]);
      ib -= bs[du] * static_cast<size_t>(out[du]);
    }
  }
}

enum class BinOp { Add, Sub, Mul, Div };

inline Tensor binary(const Tensor& a, const Tensor& b, BinOp op) {
  const Shape &sa = a.shape(), &sb = b.shape();
  Tensor out;
  if (sa == sb) {
    out = make_result(sa, {a.node(), b.node()});
    const float* pa = a.data().data();
    const float* pb = b.data().data();
    float* po = out.data().data();
    size_t n = out.numel();
    switch (op) {
      case BinOp::Add: for (size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i]; break;
      case BinOp::Sub: for (size_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i]; break;
      case BinOp::Mul: for (size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i]; break;
      case BinOp::Div: for (size_t i = 0; i < n; ++i) po[i] = pa[i] / pb[i]; break;
    }
  } else {
    Shape so = broadcast_shape(sa, sb);
    out = make_result(so, {a.node(), b.node()});
    auto as = broadcast_strides(sa, so);
    auto bs = broadcast_strides(sb, so);
    const float* pa = a.data().data();
    const float* pb = b.data().data();
    float* po = out.data().data();
    broadcast_walk(so, as, bs, [&](size_t i, size_t ia, size_t ib) {
      switch (op) {
        case BinOp::Add: po[i] = pa[ia] + pb[ib]; break;
        case BinOp::Sub: po[i] = pa[ia] - pb[ib]; break;
        case BinOp::Mul: po[i] = pa[ia] * pb[ib]; break;
        case BinOp::Div: po[i] = pa[ia] / pb[ib]; break;
      }
    });
  }
  if (!out.requires_grad()) return out;

  TensorNode* na = a.node().get();
  TensorNode* nb = b.node().get();
  Shape so = out.shape();
  auto as = broadcast_strides(sa, so);
  auto bs = broadcast_strides(sb, so);
  out.node()->backward_fn = [na, nb, so, as, bs, op](TensorNode& self) {
    const float* g = self.grad.data();
    const float* pa = na->data.data();
    const float* pb = nb->data.data();
    float* ga = nullptr;
    float* gb = nullptr;
    if (na->requires_grad) { na->ensure_grad(); ga = na->grad.data(); }
    if (nb->requires_grad) { nb->ensure_grad(); gb = nb->grad.data(); }
    broadcast_walk(so, as, bs, [&](size_t i, size_t ia, size_t ib) {
      float gi = g[i];
      switch (op) {
        case BinOp::Add:
          if (ga) ga[ia] += gi;
          if (gb) gb[ib] += gi;
          break;
        case BinOp::Sub:
          if (ga) ga[ia] += gi;
          if (gb) gb[ib] -= gi;
          break;
        case BinOp::Mul:
          if (ga) ga[ia] += gi * pb[ib];
          if (gb) gb[ib] += gi * pa[ia];
          break;
        case BinOp::Div: {
          float bv = pb[ib];
          if (ga) ga[ia] += gi / bv;
          if (gb) gb[ib] -= gi * pa[ia] / (bv * bv);
          break;
        }
      }
    });
  };
  return out;
}

// C = op(A)*op(B) with row-major storage. Falls back to plain loops when
// BLAS is compiled out.
inline void sgemm_raw(bool ta, bool tb, int m, int n, int k, const float* A,
                      const float* B, float* C, float beta) {
#ifdef SEQTRACE_WITH_CBLAS
  cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans,
              tb ? CblasTrans : CblasNoTrans, m, n, k, 1.0f, A,
              ta ? m : k, B, tb ? k : n, beta, C, n);
#else
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int p = 0; p < k; ++p) {
        float av = ta ? A[p * m + i] : A[i * k + p];
        float bv = tb ? B[j * k + p] : B[p * n + j];
        acc += static_cast<double>(av) * static_cast<double>(bv);
      }
      float prev = beta == 0.0f ? 0.0f : C[i * n + j] * beta;
      C[i * n + j] = prev + static_cast<float>(acc);
    }
  }
#endif
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::BinOp::Add); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::BinOp::Sub); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::BinOp::Mul); }
inline Tensor div(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::BinOp::Div); }

inline Tensor scale(const Tensor& a, float s) {
  Tensor out = detail::make_result(a.shape(), {a.node()});
  const float* pa = a.data().data();
  float* po = out.data().data();
  for (size_t i = 0; i < out.numel(); ++i) po[i] = pa[i] * s;
  if (out.requires_grad()) {
    TensorNode* na = a.node().get();
    out.node()->backward_fn = [na, s](TensorNode& self) {
      na->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) na->grad[i] += self.grad[i] * s;
    };
  }
  return out;
}

inline Tensor add_scalar(const Tensor& a, float s) {
  Tensor out = detail::make_result(a.shape(), {a.node()});
  const float* pa = a.data().data();
  float* po = out.data().data();
  for (size_t i = 0; i < out.numel(); ++i) po[i] = pa[i] + s;
  if (out.requires_grad()) {
    TensorNode* na = a.node().get();
    out.node()->backward_fn = [na](TensorNode& self) {
      na->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) na->grad[i] += self.grad[i];
    };
  }
  return out;
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0f); }

namespace detail {
template <typename Fwd, typename Bwd>
inline Tensor unary(const Tensor& a, Fwd fwd, Bwd bwd) {
  Tensor out = make_result(a.shape(), {a.node()});
  const float* pa = a.data().data();
  float* po = out.data().data();
  for (size_t i = 0; i < out.numel(); ++i) po[i] = fwd(pa[i]);
  if (out.requires_grad()) {
    TensorNode* na = a.node().get();
    out.node()->backward_fn = [na, bwd](TensorNode& self) {
      na->ensure_grad();
      const float* x = na->data.data();
      const float* y = self.data.data();
      for (size_t i = 0; i < self.grad.size(); ++i)
        na->grad[i] += self.grad[i] * bwd(x[i], y[i]);
    };
  }
  return out;
}
}  // namespace detail

inline Tensor relu(const Tensor& a) {
  return detail::unary(
      a, [](float x) { return x > 0.0f ? x : 0.0f; },
      [](float x, float) { return x > 0.0f ? 1.0f : 0.0f; });
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary(
      a,
      [](float x) {
        return x >= 0.0f ? 1.0f / (1.0f + std::exp(-x))
                         : std::exp(x) / (1.0f + std::exp(x));
      },
      [](float, float y) { return y * (1.0f - y); });
}

inline Tensor tanh_t(const Tensor& a) {
  return detail::unary(
      a, [](float x) { return std::tanh(x); },
      [](float, float y) { return 1.0f - y * y; });
}

inline Tensor exp_t(const Tensor& a) {
  return detail::unary(
      a, [](float x) { return std::exp(x); },
      [](float, float y) { return y; });
}

// Input clamped to >= 1e-6 before the log; below the clamp the function is
// constant, so its derivative there is exactly 0.
inline Tensor log_t(const Tensor& a) {
  return detail::unary(
      a, [](float x) { return std::log(x < 1e-6f ? 1e-6f : x); },
      [](float x, float) { return x < 1e-6f ? 0.0f : 1.0f / x; });
}

// Numerically stable: max(x,0) + log1p(exp(-|x|)); derivative sigmoid(x).
inline Tensor softplus(const Tensor& a) {
  return detail::unary(
      a,
      [](float x) {
        return std::max(x, 0.0f) + std::log1p(std::exp(-std::abs(x)));
      },
      [](float x, float) {
        return x >= 0.0f ? 1.0f / (1.0f + std::exp(-x))
                         : std::exp(x) / (1.0f + std::exp(x));
      });
}

// [m,k] x [k,n] -> [m,n]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw std::runtime_error("matmul: incompatible shapes " +
                             shape_str(a.shape()) + " x " + shape_str(b.shape()));
  int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = detail::make_result({m, n}, {a.node(), b.node()});
  detail::sgemm_raw(false, false, m, n, k, a.data().data(), b.data().data(),
                    out.data().data(), 0.0f);
  if (out.requires_grad()) {
    TensorNode* na = a.node().get();
    TensorNode* nb = b.node().get();
    out.node()->backward_fn = [na, nb, m, k, n](TensorNode& self) {
      const float* g = self.grad.data();
      if (na->requires_grad) {  // dA = G * B^T
        na->ensure_grad();
        detail::sgemm_raw(false, true, m, k, n, g, nb->data.data(),
                          na->grad.data(), 1.0f);
      }
      if (nb->requires_grad) {  // dB = A^T * G
        nb->ensure_grad();
        detail::sgemm_raw(true, false, k, n, m, na->data.data(), g,
                          nb->grad.data(), 1.0f);
      }
    };
  }
  return out;
}

inline Tensor transpose(const Tensor& a) {
  if (a.ndim() != 2)
    throw std::runtime_error("transpose: need 2-d tensor, got " +
                             shape_str(a.shape()));
  int m = a.dim(0), n = a.dim(1);
  Tensor out = detail::make_result({n, m}, {a.node()});
  const float* pa = a.data().data();
  float* po = out.data().data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) po[j * m + i] = pa[i * n + j];
  if (out.requires_grad()) {
    TensorNode* na = a.node().get();
    out.node()->backward_fn = [na, m, n](TensorNode& self) {
      na->ensure_grad();
      const float* g = self.grad.data();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) na->grad[i * n + j] += g[j * m + i];
    };
  }
  return out;
}

inline Tensor reshape(const Tensor& a, const Shape& shape) {
  if (shape_numel(shape) != a.numel())
    throw std::runtime_error("reshape: " + shape_str(a.shape()) + " -> " +
                             shape_str(shape) + " changes element count");
  Tensor out = detail::make_result(shape, {a.node()});
  out.data() = a.data();
  if (out.requires_grad()) {
    TensorNode* na = a.node().get();
    out.node()->backward_fn = [na](TensorNode& self) {
      na->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) na->grad[i] += self.grad[i];
    };
  }
  return out;
}

// Rows [r0, r1) of a 2-d tensor.
inline Tensor slice_rows(const Tensor& a, int r0, int r1) {
  if (a.ndim() != 2 || r0 < 0 || r1 > a.dim(0) || r0 >= r1)
    throw std::runtime_error("slice_rows: [" + std::to_string(r0) + "," +
                             std::to_string(r1) + ") of " + shape_str(a.shape()));
  int n = a.dim(1);
  Tensor out = detail::make_result({r1 - r0, n}, {a.node()});
  std::memcpy(out.data().data(), a.data().data() + static_cast<size_t>(r0) * n,
              out.numel() * sizeof(float));
  if (out.requires_grad()) {
    TensorNode* na = a.node().get();
    out.node()->backward_fn = [na, r0, n](TensorNode& self) {
      na->ensure_grad();
      float* ga = na->grad.data() + static_cast<size_t>(r0) * n;
      for (size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
    };
  }
  return out;
}

// Columns [c0, c1) of a 2-d tensor.
inline Tensor slice_cols(const Tensor& a, int c0, int c1) {
  if (a.ndim() != 2 || c0 < 0 || c1 > a.dim(1) || c0 >= c1)
    throw std::runtime_error("slice_cols: [" + std::to_string(c0) + "," +
                             std::to_string(c1) + ") of " + shape_str(a.shape()));
  int m = a.dim(0), n = a.dim(1), w = c1 - c0;
  Tensor out = detail::make_result({m, w}, {a.node()});
  const float* pa = a.data().data();
  float* po = out.data().data();
  for (int i = 0; i < m; ++i)
    std::memcpy(po + static_cast<size_t>(i) * w, pa + static_cast<size_t>(i) * n + c0,
                static_cast<size_t>(w) * sizeof(float));
  if (out.requires_grad()) {
    TensorNode* na = a.node().get();
    out.node()->backward_fn = [na, m, n, c0, w](TensorNode& self) {
      na->ensure_grad();
      const float* g = self.grad.data();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < w; ++j)
          na->grad[static_cast<size_t>(i) * n + c0 + j] +=
              g[static_cast<size_t>(i) * w + j];
    };
  }
  return out;
}

// Stack 2-d tensors along the row axis; all must share the column count.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::runtime_error("concat_rows: empty input");
  int n = parts[0].dim(1);
  int rows = 0;
  std::vector<NodePtr> parents;
  for (const auto& p : parts) {
    if (p.ndim() != 2 || p.dim(1) != n)
      throw std::runtime_error("concat_rows: mismatched shape " +
                               shape_str(p.shape()));
    rows += p.dim(0);
    parents.push_back(p.node());
  }
  Tensor out = detail::make_result({rows, n}, parents);
  size_t off = 0;
  for (const auto& p : parts) {
    std::memcpy(out.data().data() + off, p.data().data(),
                p.numel() * sizeof(float));
    off += p.numel();
  }
  if (out.requires_grad()) {
    std::vector<TensorNode*> raw;
    for (const auto& p : parts) raw.push_back(p.node().get());
    out.node()->backward_fn = [raw](TensorNode& self) {
      size_t off = 0;
      for (TensorNode* p : raw) {
        if (p->requires_grad) {
          p->ensure_grad();
          for (size_t i = 0; i < p->data.size(); ++i)
            p->grad[i] += self.grad[off + i];
        }
        off += p->data.size();
      }
    };
  }
  return out;
}

// Stack 2-d tensors along the column axis; all must share the row count.
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::runtime_error("concat_cols: empty input");
  int m = parts[0].dim(0);
  int cols = 0;
  std::vector<NodePtr> parents;
  for (const auto& p : parts) {
    if (p.ndim() != 2 || p.dim(0) != m)
      throw std::runtime_error("concat_cols: mismatched shape " +
                               shape_str(p.shape()));
    cols += p.dim(1);
    parents.push_back(p.node());
  }
  Tensor out = detail::make_result({m, cols}, parents);
  int off = 0;
  for (const auto& p : parts) {
    int w = p.dim(1);
    for (int i = 0; i < m; ++i)
      std::memcpy(out.data().data() + static_cast<size_t>(i) * cols + off,
                  p.data().data() + static_cast<size_t>(i) * w,
                  static_cast<size_t>(w) * sizeof(float));
    off += w;
  }
  if (out.requires_grad()) {
    std::vector<TensorNode*> raw;
    std::vector<int> widths;
    for (const auto& p : parts) {
      raw.push_back(p.node().get());
      widths.push_back(p.dim(1));
    }
    out.node()->backward_fn = [raw, widths, m, cols](TensorNode& self) {
      int off = 0;
      for (size_t pi = 0; pi < raw.size(); ++pi) {
        TensorNode* p = raw[pi];
        int w = widths[pi];
        if (p->requires_grad) {
          p->ensure_grad();
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < w; ++j)
              p->grad[static_cast<size_t>(i) * w + j] +=
                  self.grad[static_cast<size_t>(i) * cols + off + j];
        }
        off += w;
      }
    };
  }
  return out;
}

// Column gather of a 2-d tensor (embedding lookup: table [C,V], ids -> [C,T]).
inline Tensor gather_cols(const Tensor& a, const std::vector<int>& idx) {
  if (a.ndim() != 2)
    throw std::runtime_error("gather_cols: need 2-d tensor, got " +
                             shape_str(a.shape()));
  int m = a.dim(0), n = a.dim(1);
  for (int j : idx)
    if (j < 0 || j >= n)
      throw std::runtime_error("gather_cols: index " + std::to_string(j) +
                               " out of range for " + shape_str(a.shape()));
  int t = static_cast<int>(idx.size());
  Tensor out = detail::make_result({m, t}, {a.node()});
  const float* pa = a.data().data();
  float* po = out.data().data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < t; ++j)
      po[static_cast<size_t>(i) * t + j] = pa[static_cast<size_t>(i) * n + idx[static_cast<size_t>(j)]];
  if (out.requires_grad()) {
    TensorNode* na = a.node().get();
    out.node()->backward_fn = [na, idx, m, n, t](TensorNode& self) {
      na->ensure_grad();
      const float* g = self.grad.data();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < t; ++j)
          na->grad[static_cast<size_t>(i) * n + idx[static_cast<size_t>(j)]] +=
              g[static_cast<size_t>(i) * t + j];
    };
  }
  return out;
}

inline Tensor sum(const Tensor& a) {
  Tensor out = detail::make_result({1}, {a.node()});
  double acc = 0.0;
  for (float v : a.data()) acc += static_cast<double>(v);
  out.data()[0] = static_cast<float>(acc);
  if (out.requires_grad()) {
    TensorNode* na = a.node().get();
    out.node()->backward_fn = [na](TensorNode& self) {
      na->ensure_grad();
      float g = self.grad[0];
      for (size_t i = 0; i < na->grad.size(); ++i) na->grad[i] += g;
    };
  }
  return out;
}

inline Tensor mean(const Tensor& a) {
  float inv = 1.0f / static_cast<float>(a.numel());
  return scale(sum(a), inv);
}

namespace detail {
// Decompose a shape around `axis` into (outer, axis_len, inner) so the axis
// can be walked with two nested strides.
inline void axis_split(const Shape& s, int axis, size_t& outer, size_t& len,
                       size_t& inner) {
  if (axis < 0 || axis >= static_cast<int>(s.size()))
    throw std::runtime_error("axis " + std::to_string(axis) +
                             " out of range for " + shape_str(s));
  outer = 1;
  inner = 1;
  for (int d = 0; d < axis; ++d) outer *= static_cast<size_t>(s[static_cast<size_t>(d)]);
  len = static_cast<size_t>(s[static_cast<size_t>(axis)]);
  for (size_t d = static_cast<size_t>(axis) + 1; d < s.size(); ++d)
    inner *= static_cast<size_t>(s[d]);
}
}  // namespace detail

// Sum along one axis, keeping it as size 1.
inline Tensor sum_axis(const Tensor& a, int axis) {
  size_t outer, len, inner;
  detail::axis_split(a.shape(), axis, outer, len, inner);
  Shape so = a.shape();
  so[static_cast<size_t>(axis)] = 1;
  Tensor out = detail::make_result(so, {a.node()});
  const float* pa = a.data().data();
  float* po = out.data().data();
  for (size_t o = 0; o < outer; ++o)
    for (size_t i = 0; i < inner; ++i) {
      double acc = 0.0;
      for (size_t l = 0; l < len; ++l)
        acc += static_cast<double>(pa[(o * len + l) * inner + i]);
      po[o * inner + i] = static_cast<float>(acc);
    }
  if (out.requires_grad()) {
    TensorNode* na = a.node().get();
    out.node()->backward_fn = [na, outer, len, inner](TensorNode& self) {
      na->ensure_grad();
      const float* g = self.grad.data();
      for (size_t o = 0; o < outer; ++o)
        for (size_t l = 0; l < len; ++l)
          for (size_t i = 0; i < inner; ++i)
            na->grad[(o * len + l) * inner + i] += g[o * inner + i];
    };
  }
  return out;
}

// Stable softmax along `axis`: shift by the per-slice max, exponentiate,
// normalize. Gradient: dx = y * (g - sum(g*y)).
inline Tensor softmax(const Tensor& a, int axis) {
  size_t outer, len, inner;
  detail::axis_split(a.shape(), axis, outer, len, inner);
  Tensor out = detail::make_result(a.shape(), {a.node()});
  const float* pa = a.data().data();
  float* po = out.data().data();
  for (size_t o = 0; o < outer; ++o)
    for (size_t i = 0; i < inner; ++i) {
      float mx = -std::numeric_limits<float>::infinity();
      for (size_t l = 0; l < len; ++l)
        mx = std::max(mx, pa[(o * len + l) * inner + i]);
      double z = 0.0;
      for (size_t l = 0; l < len; ++l) {
        float e = std::exp(pa[(o * len + l) * inner + i] - mx);
        po[(o * len + l) * inner + i] = e;
        z += static_cast<double>(e);
      }
      float invz = static_cast<float>(1.0 / z);
      for (size_t l = 0; l < len; ++l) po[(o * len + l) * inner + i] *= invz;
    }
  if (out.requires_grad()) {
    TensorNode* na = a.node().get();
    out.node()->backward_fn = [na, outer, len, inner](TensorNode& self) {
      na->ensure_grad();
      const float* y = self.data.data();
      const float* g = self.grad.data();
      for (size_t o = 0; o < outer; ++o)
        for (size_t i = 0; i < inner; ++i) {
          double dot = 0.0;
          for (size_t l = 0; l < len; ++l) {
            size_t k = (o * len + l) * inner + i;
            dot += static_cast<double>(g[k]) * static_cast<double>(y[k]);
          }
          for (size_t l = 0; l < len; ++l) {
            size_t k = (o * len + l) * inner + i;
            na->grad[k] += y[k] * (g[k] - static_cast<float>(dot));
          }
        }
    };
  }
  return out;
}

// log softmax along `axis`. Gradient: dx = g - softmax * sum(g).
inline Tensor log_softmax(const Tensor& a, int axis) {
  size_t outer, len, inner;
  detail::axis_split(a.shape(), axis, outer, len, inner);
  Tensor out = detail::make_result(a.shape(), {a.node()});
  const float* pa = a.data().data();
  float* po = out.data().data();
  for (size_t o = 0; o < outer; ++o)
    for (size_t i = 0; i < inner; ++i) {
      float mx = -std::numeric_limits<float>::infinity();
      for (size_t l = 0; l < len; ++l)
        mx = std::max(mx, pa[(o * len + l) * inner + i]);
      double z = 0.0;
      for (size_t l = 0; l < len; ++l)
        z += std::exp(static_cast<double>(pa[(o * len + l) * inner + i]) - mx);
      float lz = static_cast<float>(std::log(z)) + mx;
      for (size_t l = 0; l < len; ++l) {
        size_t k = (o * len + l) * inner + i;
        po[k] = pa[k] - lz;
      }
    }
  if (out.requires_grad()) {
    TensorNode* na = a.node().get();
    out.node()->backward_fn = [na, outer, len, inner](TensorNode& self) {
      na->ensure_grad();
      const float* y = self.data.data();  // log probs
      const float* g = self.grad.data();
      for (size_t o = 0; o < outer; ++o)
        for (size_t i = 0; i < inner; ++i) {
          double gs = 0.0;
          for (size_t l = 0; l < len; ++l)
            gs += static_cast<double>(g[(o * len + l) * inner + i]);
          for (size_t l = 0; l < len; ++l) {
            size_t k = (o * len + l) * inner + i;
            na->grad[k] += g[k] - std::exp(y[k]) * static_cast<float>(gs);
          }
        }
    };
  }
  return out;
}

// Normalize over a single axis (mean 0, variance 1); no affine. Statistics
// accumulate in double. eps = 1e-5 inside the sqrt.
inline Tensor layernorm(const Tensor& a, int axis, float eps = 1e-5f) {
  size_t outer, len, inner;
  detail::axis_split(a.shape(), axis, outer, len, inner);
  Tensor out = detail::make_result(a.shape(), {a.node()});
  const float* pa = a.data().data();
  float* po = out.data().data();
  std::vector<float> inv_sigma(outer * inner);
  for (size_t o = 0; o < outer; ++o)
    for (size_t i = 0; i < inner; ++i) {
      double m = 0.0;
      for (size_t l = 0; l < len; ++l)
        m += static_cast<double>(pa[(o * len + l) * inner + i]);
      m /= static_cast<double>(len);
      double v = 0.0;
      for (size_t l = 0; l < len; ++l) {
        double d = static_cast<double>(pa[(o * len + l) * inner + i]) - m;
        v += d * d;
      }
      v /= static_cast<double>(len);
      float is = static_cast<float>(1.0 / std::sqrt(v + static_cast<double>(eps)));
      inv_sigma[o * inner + i] = is;
      for (size_t l = 0; l < len; ++l) {
        size_t k = (o * len + l) * inner + i;
        po[k] = (pa[k] - static_cast<float>(m)) * is;
      }
    }
  if (out.requires_grad()) {
    TensorNode* na = a.node().get();
    out.node()->backward_fn = [na, outer, len, inner,
                               inv_sigma = std::move(inv_sigma)](TensorNode& self) {
      na->ensure_grad();
      const float* y = self.data.data();
      const float* g = self.grad.data();
      float invn = 1.0f / static_cast<float>(len);
      for (size_t o = 0; o < outer; ++o)
        for (size_t i = 0; i < inner; ++i) {
          double gsum = 0.0, gy = 0.0;
          for (size_t l = 0; l < len; ++l) {
            size_t k = (o * len + l) * inner + i;
            gsum += static_cast<double>(g[k]);
            gy += static_cast<double>(g[k]) * static_cast<double>(y[k]);
          }
          float is = inv_sigma[o * inner + i];
          for (size_t l = 0; l < len; ++l) {
            size_t k = (o * len + l) * inner + i;
            na->grad[k] += is * (g[k] - static_cast<float>(gsum) * invn -
                                 y[k] * static_cast<float>(gy) * invn);
          }
        }
    };
  }
  return out;
}

// Per-channel bias over [C,H,W] or [N,C,H,W].
inline Tensor add_channel_bias(const Tensor& a, const Tensor& bias) {
  int nd = a.ndim();
  if (nd < 2 || nd > 4 || bias.ndim() != 1)
    throw std::runtime_error("add_channel_bias: " + shape_str(a.shape()) +
                             " with bias " + shape_str(bias.shape()));
  int c_axis = nd == 4 ? 1 : 0;
  if (a.dim(c_axis) != bias.dim(0))
    throw std::runtime_error("add_channel_bias: channel mismatch " +
                             shape_str(a.shape()) + " vs " + shape_str(bias.shape()));
  size_t n = nd == 4 ? static_cast<size_t>(a.dim(0)) : 1;
  size_t c = static_cast<size_t>(a.dim(c_axis));
  size_t hw = a.numel() / (n * c);
  Tensor out = detail::make_result(a.shape(), {a.node(), bias.node()});
  const float* pa = a.data().data();
  const float* pb = bias.data().data();
  float* po = out.data().data();
  for (size_t b = 0; b < n; ++b)
    for (size_t ch = 0; ch < c; ++ch) {
      float bv = pb[ch];
      size_t base = (b * c + ch) * hw;
      for (size_t i = 0; i < hw; ++i) po[base + i] = pa[base + i] + bv;
    }
  if (out.requires_grad()) {
    TensorNode* na = a.node().get();
    TensorNode* nb = bias.node().get();
    out.node()->backward_fn = [na, nb, n, c, hw](TensorNode& self) {
      if (na->requires_grad) {
        na->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) na->grad[i] += self.grad[i];
      }
      if (nb->requires_grad) {
        nb->ensure_grad();
        for (size_t b = 0; b < n; ++b)
          for (size_t ch = 0; ch < c; ++ch) {
            double acc = 0.0;
            size_t base = (b * c + ch) * hw;
            for (size_t i = 0; i < hw; ++i)
              acc += static_cast<double>(self.grad[base + i]);
            nb->grad[ch] += static_cast<float>(acc);
          }
      }
    };
  }
  return out;
}

inline Tensor mul_channel_scale(const Tensor& a, const Tensor& s) {
  int nd = a.ndim();
  if (nd < 2 || nd > 4 || s.ndim() != 1)
    throw std::runtime_error("mul_channel_scale: " + shape_str(a.shape()) +
                             " with scale " + shape_str(s.shape()));
  int c_axis = nd == 4 ? 1 : 0;
  if (a.dim(c_axis) != s.dim(0))
    throw std::runtime_error("mul_channel_scale: channel mismatch " +
                             shape_str(a.shape()) + " vs " + shape_str(s.shape()));
  size_t n = nd == 4 ? static_cast<size_t>(a.dim(0)) : 1;
  size_t c = static_cast<size_t>(a.dim(c_axis));
  size_t hw = a.numel() / (n * c);
  Tensor out = detail::make_result(a.shape(), {a.node(), s.node()});
  const float* pa = a.data().data();
  const float* ps = s.data().data();
  float* po = out.data().data();
  for (size_t b = 0; b < n; ++b)
    for (size_t ch = 0; ch < c; ++ch) {
      float sv = ps[ch];
      size_t base = (b * c + ch) * hw;
      for (size_t i = 0; i < hw; ++i) po[base + i] = pa[base + i] * sv;
    }
  if (out.requires_grad()) {
    TensorNode* na = a.node().get();
    TensorNode* ns = s.node().get();
    out.node()->backward_fn = [na, ns, n, c, hw](TensorNode& self) {
      if (na->requires_grad) {
        na->ensure_grad();
        for (size_t b = 0; b < n; ++b)
          for (size_t ch = 0; ch < c; ++ch) {
            float sv = ns->data[ch];
            size_t base = (b * c + ch) * hw;
            for (size_t i = 0; i < hw; ++i)
              na->grad[base + i] += self.grad[base + i] * sv;
          }
      }
      if (ns->requires_grad) {
        ns->ensure_grad();
        for (size_t b = 0; b < n; ++b)
          for (size_t ch = 0; ch < c; ++ch) {
            double acc = 0.0;
            size_t base = (b * c + ch) * hw;
            for (size_t i = 0; i < hw; ++i)
              acc += static_cast<double>(self.grad[base + i]) * na->data[base + i];
            ns->grad[ch] += static_cast<float>(acc);
          }
      }
    };
  }
  return out;
}

namespace detail {
// im2col for one sample: [C,H,W] -> [C*kh*kw, Ho*Wo].
inline void im2col(const float* src, int c, int h, int w, int kh, int kw,
                   int stride, int pad, int ho, int wo, float* dst) {
  for (int ch = 0; ch < c; ++ch)
    for (int ki = 0; ki < kh; ++ki)
      for (int kj = 0; kj < kw; ++kj) {
        float* row = dst + static_cast<size_t>((ch * kh + ki) * kw + kj) *
                               static_cast<size_t>(ho) * wo;
        for (int oi = 0; oi < ho; ++oi) {
          int ii = oi * stride - pad + ki;
          for (int oj = 0; oj < wo; ++oj) {
            int jj = oj * stride - pad + kj;
            row[oi * wo + oj] =
                (ii >= 0 && ii < h && jj >= 0 && jj < w)
                    ? src[(static_cast<size_t>(ch) * h + ii) * w + jj]
                    : 0.0f;
          }
        }
      }
}

inline void col2im_add(const float* cols, int c, int h, int w, int kh, int kw,
                       int stride, int pad, int ho, int wo, float* dst) {
  for (int ch = 0; ch < c; ++ch)
    for (int ki = 0; ki < kh; ++ki)
      for (int kj = 0; kj < kw; ++kj) {
        const float* row = cols + static_cast<size_t>((ch * kh + ki) * kw + kj) *
                                      static_cast<size_t>(ho) * wo;
        for (int oi = 0; oi < ho; ++oi) {
          int ii = oi * stride - pad + ki;
          if (ii < 0 || ii >= h) continue;
          for (int oj = 0; oj < wo; ++oj) {
            int jj = oj * stride - pad + kj;
            if (jj < 0 || jj >= w) continue;
            dst[(static_cast<size_t>(ch) * h + ii) * w + jj] += row[oi * wo + oj];
          }
        }
      }
}
}  // namespace detail

// 2-d convolution via im2col + GEMM. Input [C,H,W] or [N,C,H,W]; weight
// [Cout,Cin,kh,kw]; odd kernels only; output extent must divide exactly.
inline Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad) {
  bool batched = x.ndim() == 4;
  if (!batched && x.ndim() != 3)
    throw std::runtime_error("conv2d: input must be 3-d or 4-d, got " +
                             shape_str(x.shape()));
  if (w.ndim() != 4)
    throw std::runtime_error("conv2d: weight must be 4-d, got " +
                             shape_str(w.shape()));
  int n = batched ? x.dim(0) : 1;
  int c = x.dim(batched ? 1 : 0);
  int h = x.dim(batched ? 2 : 1);
  int wd = x.dim(batched ? 3 : 2);
  int cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != c)
    throw std::runtime_error("conv2d: channel mismatch, input " +
                             shape_str(x.shape()) + " weight " + shape_str(w.shape()));
  if (kh % 2 == 0 || kw % 2 == 0)
    throw std::runtime_error("conv2d: kernel must be odd, got " +
                             shape_str(w.shape()));
  if (stride < 1) throw std::runtime_error("conv2d: stride must be >= 1");
  if ((h + 2 * pad - kh) % stride != 0 || (wd + 2 * pad - kw) % stride != 0)
    throw std::runtime_error("conv2d: geometry " + shape_str(x.shape()) +
                             " k=" + std::to_string(kh) + " s=" + std::to_string(stride) +
                             " p=" + std::to_string(pad) + " is not integral");
  int ho = (h + 2 * pad - kh) / stride + 1;
  int wo = (wd + 2 * pad - kw) / stride + 1;
  Shape so = batched ? Shape{n, cout, ho, wo} : Shape{cout, ho, wo};
  Tensor out = detail::make_result(so, {x.node(), w.node()});

  int ckk = c * kh * kw;
  size_t cols_sz = static_cast<size_t>(ckk) * ho * wo;
  std::vector<float> cols(cols_sz);
  size_t in_stride = static_cast<size_t>(c) * h * wd;
  size_t out_stride = static_cast<size_t>(cout) * ho * wo;
  for (int b = 0; b < n; ++b) {
    detail::im2col(x.data().data() + b * in_stride, c, h, wd, kh, kw, stride,
                   pad, ho, wo, cols.data());
    detail::sgemm_raw(false, false, cout, ho * wo, ckk, w.data().data(),
                      cols.data(), out.data().data() + b * out_stride, 0.0f);
  }
  if (out.requires_grad()) {
    TensorNode* nx = x.node().get();
    TensorNode* nw = w.node().get();
    out.node()->backward_fn = [nx, nw, n, c, h, wd, cout, kh, kw, stride, pad,
                               ho, wo](TensorNode& self) {
      int ckk = c * kh * kw;
      size_t in_stride = static_cast<size_t>(c) * h * wd;
      size_t out_stride = static_cast<size_t>(cout) * ho * wo;
      std::vector<float> cols(static_cast<size_t>(ckk) * ho * wo);
      std::vector<float> dcols(cols.size());
      if (nx->requires_grad) nx->ensure_grad();
      if (nw->requires_grad) nw->ensure_grad();
      for (int b = 0; b < n; ++b) {
        const float* g = self.grad.data() + b * out_stride;
        if (nw->requires_grad) {
          detail::im2col(nx->data.data() + b * in_stride, c, h, wd, kh, kw,
                         stride, pad, ho, wo, cols.data());
          // dW += G * cols^T
          detail::sgemm_raw(false, true, cout, ckk, ho * wo, g, cols.data(),
                            nw->grad.data(), 1.0f);
        }
        if (nx->requires_grad) {
          // dcols = W^T * G, then scatter back
          detail::sgemm_raw(true, false, ckk, ho * wo, cout, nw->data.data(), g,
                            dcols.data(), 0.0f);
          detail::col2im_add(dcols.data(), c, h, wd, kh, kw, stride, pad, ho,
                             wo, nx->grad.data() + b * in_stride);
        }
      }
    };
  }
  return out;
}

// Keep every stride-th row/column starting at (0,0). Composed after a
// stride-1 convolution this reproduces the usual floor-mode strided conv
// while conv2d itself keeps its exact-geometry contract.
inline Tensor subsample2d(const Tensor& x, int stride) {
  bool batched = x.ndim() == 4;
  if (!batched && x.ndim() != 3)
    throw std::runtime_error("subsample2d: input must be 3-d or 4-d, got " +
                             shape_str(x.shape()));
  if (stride < 1) throw std::runtime_error("subsample2d: stride must be >= 1");
  int n = batched ? x.dim(0) : 1;
  int c = x.dim(batched ? 1 : 0);
  int h = x.dim(batched ? 2 : 1);
  int w = x.dim(batched ? 3 : 2);
  int ho = (h + stride - 1) / stride;
  int wo = (w + stride - 1) / stride;
  Shape so = batched ? Shape{n, c, ho, wo} : Shape{c, ho, wo};
  Tensor out = detail::make_result(so, {x.node()});
  const float* px = x.data().data();
  float* po = out.data().data();
  for (int b = 0; b < n * c; ++b)
    for (int i = 0; i < ho; ++i)
      for (int j = 0; j < wo; ++j)
        po[(static_cast<size_t>(b) * ho + i) * wo + j] =
            px[(static_cast<size_t>(b) * h + i * stride) * w + j * stride];
  if (out.requires_grad()) {
    TensorNode* nx = x.node().get();
    out.node()->backward_fn = [nx, n, c, h, w, ho, wo, stride](TensorNode& self) {
      nx->ensure_grad();
      const float* g = self.grad.data();
      for (int b = 0; b < n * c; ++b)
        for (int i = 0; i < ho; ++i)
          for (int j = 0; j < wo; ++j)
            nx->grad[(static_cast<size_t>(b) * h + i * stride) * w + j * stride] +=
                g[(static_cast<size_t>(b) * ho + i) * wo + j];
    };
  }
  return out;
}

inline void Tensor::backward() const {
  if (numel() != 1)
    throw std::runtime_error("backward() requires a scalar, got shape " +
                             shape_str(shape()));
  if (!node_->requires_grad)
    throw std::runtime_error("backward() on a tensor with no gradient path");
  // Collect the reachable grad-requiring subgraph.
  std::vector<TensorNode*> nodes;
  std::vector<TensorNode*> stack{node_.get()};
  std::unordered_set<const TensorNode*> seen;
  while (!stack.empty()) {
    TensorNode* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    nodes.push_back(n);
    for (const auto& p : n->parents)
      if (p->requires_grad) stack.push_back(p.get());
  }
  std::sort(nodes.begin(), nodes.end(),
            [](const TensorNode* a, const TensorNode* b) { return a->seq > b->seq; });
  // Interior grads are scratch space for this pass; only leaves (no
  // backward_fn) accumulate across repeated calls.
  for (TensorNode* n : nodes)
    if (n->backward_fn) n->grad.assign(n->data.size(), 0.0f);
  node_->ensure_grad();
  node_->grad[0] += 1.0f;
  for (TensorNode* n : nodes) {
    if (n->backward_fn) n->backward_fn(*n);
  }
}

}  // namespace seqtrace
