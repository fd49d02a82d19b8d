#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "seqtrace/decoder.hpp"
#include "seqtrace/rng.hpp"
#include "testutil.hpp"

using namespace seqtrace;
using namespace testutil;

namespace {

Vocabulary test_vocab() {
  return Vocabulary{{"brow", "eye", "nose", "mouth", "chin"}};
}

void zero_matching(ParamStore& ps, const std::string& needle) {
  for (auto& [name, t] : ps.items()) {
    if (name.find(needle) == std::string::npos) continue;
    std::fill(t.data().begin(), t.data().end(), 0.0f);
  }
}

// Dense reference for map-biased cross-attention, all in double.
// x: [C,T] queries source, f: [C,HW] keys/values source.
std::vector<double> loop_seca(const SecaCrossAttention& a,
                              const std::vector<Tensor>& logmaps,
                              const Tensor& x, const Tensor& f) {
  int c = a.width, heads = a.heads, d = c / heads;
  int t = x.dim(1), hw = f.dim(1);
  auto lin = [&](const Linear& l, const Tensor& in, int cols) {
    std::vector<double> out(static_cast<size_t>(c) * cols, 0.0);
    for (int o = 0; o < c; ++o)
      for (int j = 0; j < cols; ++j) {
        double s = l.b.data()[o];
        for (int i = 0; i < c; ++i)
          s += static_cast<double>(l.W.data()[static_cast<size_t>(o) * c + i]) *
               in.data()[static_cast<size_t>(i) * cols + j];
        out[static_cast<size_t>(o) * cols + j] = s;
      }
    return out;
  };
  std::vector<double> q = lin(a.wq, x, t), k = lin(a.wk, f, hw),
                      v = lin(a.wv, f, hw);
  std::vector<double> merged(static_cast<size_t>(c) * t, 0.0);
  for (int h = 0; h < heads; ++h) {
    const Tensor* m = nullptr;
    if (!logmaps.empty())
      m = logmaps.size() == 1 ? &logmaps[0] : &logmaps[static_cast<size_t>(h)];
    for (int col = 0; col < t; ++col) {
      std::vector<double> logits(hw);
      for (int key = 0; key < hw; ++key) {
        double s = 0.0;
        for (int i = 0; i < d; ++i)
          s += k[static_cast<size_t>(h * d + i) * hw + key] *
               q[static_cast<size_t>(h * d + i) * t + col];
        s /= std::sqrt(static_cast<double>(d));
        if (m) s += m->data()[static_cast<size_t>(key) * t + col];
        logits[static_cast<size_t>(key)] = s;
      }
      double mx = logits[0];
      for (double z : logits) mx = std::max(mx, z);
      double denom = 0.0;
      for (double& z : logits) {
        z = std::exp(z - mx);
        denom += z;
      }
      for (int i = 0; i < d; ++i) {
        double s = 0.0;
        for (int key = 0; key < hw; ++key)
          s += v[static_cast<size_t>(h * d + i) * hw + key] *
               logits[static_cast<size_t>(key)] / denom;
        merged[static_cast<size_t>(h * d + i) * t + col] = s;
      }
    }
  }
  std::vector<double> out(static_cast<size_t>(c) * t, 0.0);
  for (int o = 0; o < c; ++o)
    for (int col = 0; col < t; ++col) {
      double s = a.wo.b.data()[o];
      for (int i = 0; i < c; ++i)
        s += static_cast<double>(a.wo.W.data()[static_cast<size_t>(o) * c + i]) *
             merged[static_cast<size_t>(i) * t + col];
      out[static_cast<size_t>(o) * t + col] = s;
    }
  return out;
}

Tensor const_map(int hw, int t, float value) {
  return Tensor::full({hw, t}, value);
}

}  // namespace

TEST_CASE("spatial weight map matches scalar evaluation") {
  SECTION("spot value exp(-0.25)") {
    double v = weight_map_value(0.5, 1.5, 0.5, 0.5, 1.0, 1.0, 4.0);
    REQUIRE(v == Catch::Approx(std::exp(-0.25)).margin(1e-12));
    REQUIRE(v == Catch::Approx(0.7788).margin(1e-4));
  }

  SECTION("grid version agrees with the scalar kernel everywhere") {
    Rng rng(40);
    for (int trial = 0; trial < 20; ++trial) {
      int h = 2 + rng.uniform_int(0, 6), w = 2 + rng.uniform_int(0, 6);
      int t = 1 + rng.uniform_int(0, 3);
      Tensor th = Tensor::zeros({1, t}), tw = Tensor::zeros({1, t});
      Tensor rh = Tensor::zeros({1, t}), rw = Tensor::zeros({1, t});
      for (int j = 0; j < t; ++j) {
        th.data()[j] = rng.uniform_float(0.05f, 0.95f);
        tw.data()[j] = rng.uniform_float(0.05f, 0.95f);
        rh.data()[j] = rng.uniform_float(0.05f, 1.5f);
        rw.data()[j] = rng.uniform_float(0.05f, 1.5f);
      }
      float lambda = 4.0f;
      Tensor m = build_weight_map(th, tw, rh, rw, lambda, h, w);
      REQUIRE(m.dim(0) == h * w);
      REQUIRE(m.dim(1) == t);
      for (int row = 0; row < h; ++row)
        for (int col = 0; col < w; ++col)
          for (int j = 0; j < t; ++j) {
            double want = weight_map_value(
                (row + 0.5) / h, (col + 0.5) / w, th.data()[j], tw.data()[j],
                rh.data()[j], rw.data()[j], lambda);
            float got = m.data()[static_cast<size_t>(row * w + col) * t + j];
            REQUIRE(std::abs(got - want) < 1e-6);
          }
    }
  }

  SECTION("center on a grid cell gives exactly 1 there; range is (0,1]") {
    int h = 4, w = 4;
    Tensor th = Tensor::full({1, 1}, (2 + 0.5f) / h);
    Tensor tw = Tensor::full({1, 1}, (1 + 0.5f) / w);
    Tensor rh = Tensor::full({1, 1}, 0.3f), rw = Tensor::full({1, 1}, 0.7f);
    Tensor m = build_weight_map(th, tw, rh, rw, 4.0f, h, w);
    REQUIRE(m.data()[2 * w + 1] == 1.0f);
    for (int i = 0; i < h * w; ++i) {
      REQUIRE(m.data()[i] > 0.0f);
      REQUIRE(m.data()[i] <= 1.0f);
    }
  }

  SECTION("larger scale flattens the map") {
    int h = 8, w = 8;
    Tensor th = Tensor::full({1, 1}, 0.5f), tw = Tensor::full({1, 1}, 0.5f);
    Tensor small = build_weight_map(th, tw, Tensor::full({1, 1}, 0.2f),
                                    Tensor::full({1, 1}, 0.2f), 4.0f, h, w);
    Tensor big = build_weight_map(th, tw, Tensor::full({1, 1}, 0.8f),
                                  Tensor::full({1, 1}, 0.8f), 4.0f, h, w);
    for (int i = 0; i < h * w; ++i) REQUIRE(big.data()[i] >= small.data()[i]);
    // strictly larger off-center
    REQUIRE(big.data()[0] > small.data()[0]);
  }

  SECTION("separable: M(h,w) = M_h(h) * M_w(w)") {
    int h = 5, w = 7;
    Tensor th = Tensor::full({1, 1}, 0.31f), tw = Tensor::full({1, 1}, 0.64f);
    Tensor rh = Tensor::full({1, 1}, 0.4f), rw = Tensor::full({1, 1}, 0.9f);
    Tensor m = build_weight_map(th, tw, rh, rw, 4.0f, h, w);
    for (int row = 0; row < h; ++row)
      for (int col = 0; col < w; ++col) {
        double mh = weight_map_value((row + 0.5) / h, 0.64, 0.31, 0.64, 0.4,
                                     0.9, 4.0);
        double mw = weight_map_value(0.31, (col + 0.5) / w, 0.31, 0.64, 0.4,
                                     0.9, 4.0);
        REQUIRE(std::abs(m.data()[row * w + col] - mh * mw) < 1e-6);
      }
  }

  SECTION("argmax is the grid cell nearest the center") {
    Rng rng(41);
    int h = 8, w = 8;
    for (int trial = 0; trial < 50; ++trial) {
      float ch = rng.uniform_float(0.02f, 0.98f);
      float cw = rng.uniform_float(0.02f, 0.98f);
      Tensor m = build_weight_map(
          Tensor::full({1, 1}, ch), Tensor::full({1, 1}, cw),
          Tensor::full({1, 1}, rng.uniform_float(0.1f, 1.0f)),
          Tensor::full({1, 1}, rng.uniform_float(0.1f, 1.0f)), 4.0f, h, w);
      int best = 0;
      for (int i = 1; i < h * w; ++i)
        if (m.data()[i] > m.data()[best]) best = i;
      // nearest cell by axis distance
      int nr = 0, nc = 0;
      for (int r = 1; r < h; ++r)
        if (std::abs((r + 0.5f) / h - ch) < std::abs((nr + 0.5f) / h - ch))
          nr = r;
      for (int c = 1; c < w; ++c)
        if (std::abs((c + 0.5f) / w - cw) < std::abs((nc + 0.5f) / w - cw))
          nc = c;
      REQUIRE(best == nr * w + nc);
    }
  }
}

TEST_CASE("center and scale heads") {
  Vocabulary v = test_vocab();
  int c = 16, t = 6;

  SECTION("zero-initialized heads put every center at (0.5, 0.5)") {
    for (SecaMode mode : {SecaMode::kBasic, SecaMode::kMultiHead}) {
      ParamStore ps;
      Rng rng(7);
      CenterScaleHeads heads(ps, "g", c, 4, mode, rng);
      zero_matching(ps, "g.center2");
      zero_matching(ps, "g.scale");
      zero_matching(ps, "g.offset");
      Tensor states = rand_signed(rng, {c, t});
      MapGeometry g = heads.forward(states);
      for (int j = 0; j < t; ++j) {
        REQUIRE(g.base_th.data()[j] == 0.5f);
        REQUIRE(g.base_tw.data()[j] == 0.5f);
      }
      for (size_t i = 0; i < g.th.size(); ++i)
        for (int j = 0; j < t; ++j) {
          REQUIRE(g.th[i].data()[j] == 0.5f);  // zero offsets
          REQUIRE(g.tw[i].data()[j] == 0.5f);
          // softplus(0) + 1e-3
          REQUIRE(g.rh[i].data()[j] ==
                  Catch::Approx(std::log(2.0) + 1e-3).margin(1e-6));
        }
      REQUIRE(g.th.size() == (mode == SecaMode::kBasic ? 1u : 4u));
    }
  }

  SECTION("ranges hold over many random parameter draws") {
    Rng rng(8);
    for (int trial = 0; trial < 40; ++trial) {
      ParamStore ps;
      SecaMode mode = trial % 2 == 0 ? SecaMode::kBasic : SecaMode::kMultiHead;
      CenterScaleHeads heads(ps, "g", c, 2, mode, rng);
      // inflate weights to push activations toward saturation
      for (auto& [name, p] : ps.items())
        for (size_t i = 0; i < p.numel(); ++i) p.data()[i] *= 5.0f;
      Tensor states = rand_signed(rng, {c, t}, 0.5f, 3.0f);
      MapGeometry g = heads.forward(states);
      for (int j = 0; j < t; ++j) {
        REQUIRE(g.base_th.data()[j] > 0.0f);
        REQUIRE(g.base_th.data()[j] < 1.0f);
        REQUIRE(g.base_tw.data()[j] > 0.0f);
        REQUIRE(g.base_tw.data()[j] < 1.0f);
      }
      for (size_t i = 0; i < g.th.size(); ++i)
        for (int j = 0; j < t; ++j) {
          REQUIRE(g.rh[i].data()[j] >= 1e-3f);
          REQUIRE(g.rw[i].data()[j] >= 1e-3f);
          // offset centers stay within +-0.5 of the base (one ulp of slack:
          // the subtraction here re-rounds what the forward pass added)
          REQUIRE(std::abs(g.th[i].data()[j] - g.base_th.data()[j]) <=
                  0.5f + 1e-6f);
          REQUIRE(std::abs(g.tw[i].data()[j] - g.base_tw.data()[j]) <=
                  0.5f + 1e-6f);
        }
    }
  }
}

TEST_CASE("map-biased cross-attention matches a dense loop reference") {
  SECTION("2-token, 4-key case") {
    Rng rng(9);
    ParamStore ps;
    SecaCrossAttention a(ps, "x", 8, 2, rng);
    Tensor x = rand_signed(rng, {8, 2});
    Tensor f = rand_signed(rng, {8, 4});
    std::vector<Tensor> maps;
    for (int h = 0; h < 2; ++h) {
      Tensor m = Tensor::zeros({4, 2});
      for (size_t i = 0; i < m.numel(); ++i)
        m.data()[i] = std::log(rng.uniform_float(0.05f, 1.0f));
      maps.push_back(m);
    }
    Tensor got = a.forward(x, f, maps);
    std::vector<double> want = loop_seca(a, maps, x, f);
    for (size_t i = 0; i < got.numel(); ++i)
      REQUIRE(std::abs(got.data()[i] - want[i]) < 1e-5);
  }

  SECTION("larger random cases, shared and per-head maps") {
    Rng rng(10);
    for (int trial = 0; trial < 10; ++trial) {
      int heads = trial % 2 == 0 ? 2 : 4;
      int c = heads * (2 + trial % 3);
      int t = 1 + rng.uniform_int(0, 4);
      int hw = 4 + rng.uniform_int(0, 11);
      ParamStore ps;
      SecaCrossAttention a(ps, "x", c, heads, rng);
      Tensor x = rand_signed(rng, {c, t});
      Tensor f = rand_signed(rng, {c, hw});
      std::vector<Tensor> maps;
      int nmaps = trial % 3 == 0 ? 1 : heads;
      for (int h = 0; h < nmaps; ++h) {
        Tensor m = Tensor::zeros({hw, t});
        for (size_t i = 0; i < m.numel(); ++i)
          m.data()[i] = std::log(rng.uniform_float(0.02f, 1.0f));
        maps.push_back(m);
      }
      Tensor got = a.forward(x, f, maps);
      std::vector<double> want = loop_seca(a, maps, x, f);
      for (size_t i = 0; i < got.numel(); ++i)
        REQUIRE(std::abs(got.data()[i] - want[i]) < 1e-5);
    }
  }

  SECTION("uniform map is equivalent to no map at all") {
    Rng rng(11);
    for (int trial = 0; trial < 10; ++trial) {
      int heads = 1 + trial % 4;
      int c = heads * 4;
      ParamStore ps;
      SecaCrossAttention a(ps, "x", c, heads, rng);
      Tensor x = rand_signed(rng, {c, 3});
      Tensor f = rand_signed(rng, {c, 9});
      std::vector<Tensor> uniform{const_map(9, 3, std::log(0.37f))};
      Tensor with = a.forward(x, f, uniform);
      Tensor without = a.forward(x, f, {});
      for (size_t i = 0; i < with.numel(); ++i)
        REQUIRE(std::abs(with.data()[i] - without.data()[i]) < 1e-5f);
    }
  }

  SECTION("peaked map concentrates attention despite flat logits") {
    Rng rng(12);
    ParamStore ps;
    int hw = 64, c = 8, heads = 2;
    SecaCrossAttention a(ps, "x", c, heads, rng);
    zero_matching(ps, "x.wk");  // K = 0 -> all content logits are 0
    Tensor x = rand_signed(rng, {c, 1});
    Tensor f = rand_signed(rng, {c, hw});
    int peak = 23;
    Tensor m = const_map(hw, 1, 1e-6f);
    m.data()[peak] = 1.0f;
    std::vector<Tensor> attn;
    a.forward(x, f, {log_t(m)}, &attn);
    for (const Tensor& dist : attn) {
      double mass = dist.data()[peak];
      REQUIRE(mass >= 0.99);
    }
  }

  SECTION("map size mismatches are rejected") {
    Rng rng(13);
    ParamStore ps;
    SecaCrossAttention a(ps, "x", 8, 2, rng);
    Tensor x = rand_signed(rng, {8, 2});
    Tensor f = rand_signed(rng, {8, 4});
    REQUIRE_THROWS(a.forward(x, f, {const_map(5, 2, -1.0f)}));
    REQUIRE_THROWS(a.forward(x, f, {const_map(4, 2, -1.0f),
                                    const_map(4, 2, -1.0f),
                                    const_map(4, 2, -1.0f)}));
  }
}

TEST_CASE("decoder stack") {
  Vocabulary v = test_vocab();

  auto make = [&](SecaMode mode, bool ar, int width, int heads, int layers,
                  unsigned seed) {
    DecoderConfig c;
    c.layers = layers;
    c.heads = heads;
    c.width = width;
    c.seca = mode;
    c.autoregressive = ar;
    auto ps = std::make_shared<ParamStore>();
    Rng rng(seed);
    auto dec = std::make_shared<Decoder>(*ps, "dec", c, v, rng);
    return std::pair(ps, dec);
  };

  SECTION("control logits are pinned to the sentinel") {
    auto [ps, dec] = make(SecaMode::kMultiHead, true, 16, 2, 2, 20);
    Rng rng(21);
    Tensor f = rand_signed(rng, {16, 4});
    std::vector<int> ids{v.sos(), v.id_of("eye"), v.id_of("nose")};
    Tensor logits = dec->forward_logits(ids, f, 2, 2);
    REQUIRE(logits.dim(0) == v.size());
    REQUIRE(logits.dim(1) == 3);
    for (int t = 0; t < 3; ++t) {
      REQUIRE(logits.data()[static_cast<size_t>(v.sos()) * 3 + t] == kNegInf);
      REQUIRE(logits.data()[static_cast<size_t>(v.pad()) * 3 + t] == kNegInf);
      REQUIRE(logits.data()[static_cast<size_t>(v.nm()) * 3 + t] == kNegInf);
      for (int lbl = 0; lbl < v.label_count(); ++lbl) {
        float z = logits.data()[static_cast<size_t>(lbl) * 3 + t];
        REQUIRE(std::isfinite(z));
        REQUIRE(z != kNegInf);
      }
    }
  }

  SECTION("autoregressive: future tokens cannot alter past logits") {
    auto [ps, dec] = make(SecaMode::kMultiHead, true, 16, 2, 2, 22);
    Rng rng(23);
    Tensor f = rand_signed(rng, {16, 4});
    std::vector<int> a{v.sos(), 0, 1, 2, 3};
    std::vector<int> b{v.sos(), 0, 1, 4, 3};  // differs at position 3
    Tensor la = dec->forward_logits(a, f, 2, 2);
    Tensor lb = dec->forward_logits(b, f, 2, 2);
    for (int t = 0; t < 3; ++t)  // positions before the edit
      for (int r = 0; r < v.size(); ++r)
        REQUIRE(la.data()[static_cast<size_t>(r) * 5 + t] ==
                lb.data()[static_cast<size_t>(r) * 5 + t]);
    // and the edited position itself must differ somewhere
    bool changed = false;
    for (int t = 3; t < 5 && !changed; ++t)
      for (int r = 0; r < v.size() && !changed; ++r)
        changed = la.data()[static_cast<size_t>(r) * 5 + t] !=
                  lb.data()[static_cast<size_t>(r) * 5 + t];
    REQUIRE(changed);
  }

  SECTION("non-autoregressive mode leaks by design") {
    auto [ps, dec] = make(SecaMode::kBasic, false, 16, 2, 1, 24);
    Rng rng(25);
    Tensor f = rand_signed(rng, {16, 4});
    std::vector<int> a{v.sos(), 0, 1, 2, 3};
    std::vector<int> b{v.sos(), 0, 1, 4, 3};
    Tensor la = dec->forward_logits(a, f, 2, 2);
    Tensor lb = dec->forward_logits(b, f, 2, 2);
    bool changed = false;
    for (int t = 0; t < 3 && !changed; ++t)
      for (int r = 0; r < v.size() && !changed; ++r)
        changed = std::abs(la.data()[static_cast<size_t>(r) * 5 + t] -
                           lb.data()[static_cast<size_t>(r) * 5 + t]) > 1e-7f;
    REQUIRE(changed);
  }

  SECTION("decode_step equals the matching teacher-forced column") {
    for (SecaMode mode :
         {SecaMode::kOff, SecaMode::kBasic, SecaMode::kMultiHead}) {
      auto [ps, dec] = make(mode, true, 16, 4, 2, 26);
      Rng rng(27);
      Tensor f = rand_signed(rng, {16, 9});
      std::vector<int> ids{v.sos(), 2, 0, 4};
      Tensor full = dec->forward_logits(ids, f, 3, 3);
      for (int p = 1; p <= 4; ++p) {
        std::vector<int> prefix(ids.begin(), ids.begin() + p);
        Tensor step = dec->decode_step(prefix, f, 3, 3);
        REQUIRE(step.ndim() == 1);
        REQUIRE(step.dim(0) == v.size());
        for (int r = 0; r < v.size(); ++r)
          REQUIRE(std::abs(step.data()[r] -
                           full.data()[static_cast<size_t>(r) * 4 + (p - 1)]) <
                  1e-5f);
      }
    }
  }

  SECTION("malformed prefixes are rejected") {
    auto [ps, dec] = make(SecaMode::kBasic, true, 16, 2, 1, 28);
    Rng rng(29);
    Tensor f = rand_signed(rng, {16, 4});
    REQUIRE_THROWS(dec->decode_step({0, 1}, f, 2, 2));  // no SOS
    REQUIRE_THROWS(dec->decode_step({v.sos(), 0, v.eos()}, f, 2, 2));
    REQUIRE_THROWS(dec->forward_logits({}, f, 2, 2));
  }

  SECTION("diagnostics expose one map per layer (basic) or per head") {
    auto [ps1, d1] = make(SecaMode::kBasic, true, 16, 4, 2, 30);
    auto [ps2, d2] = make(SecaMode::kMultiHead, true, 16, 4, 2, 30);
    Rng rng(31);
    Tensor f = rand_signed(rng, {16, 4});
    std::vector<int> ids{v.sos(), 1};
    MapDiagnostics diag1, diag2;
    d1->forward_logits(ids, f, 2, 2, &diag1);
    d2->forward_logits(ids, f, 2, 2, &diag2);
    REQUIRE(diag1.per_layer_maps.size() == 2);
    REQUIRE(diag2.per_layer_maps.size() == 2);
    for (const auto& maps : diag1.per_layer_maps) REQUIRE(maps.size() == 1);
    for (const auto& maps : diag2.per_layer_maps) REQUIRE(maps.size() == 4);
    for (const auto& maps : diag2.per_layer_maps)
      for (const Tensor& m : maps) {
        REQUIRE(m.dim(0) == 4);
        for (size_t i = 0; i < m.numel(); ++i) {
          REQUIRE(m.data()[i] > 0.0f);
          REQUIRE(m.data()[i] <= 1.0f);
        }
      }
  }

  SECTION("finite differences through the whole stack") {
    DecoderConfig c;
    c.layers = 1;
    c.heads = 2;
    c.width = 8;
    c.seca = SecaMode::kMultiHead;
    ParamStore ps;
    Rng rng(32);
    Decoder dec(ps, "dec", c, v, rng);
    Tensor f = rand_signed(rng, {8, 4});
    std::vector<int> ids{v.sos(), 1, 3};  // T = 3, H*W = 4

    // weight only the rows that are not pinned to the sentinel
    Tensor cw = Tensor::zeros({v.size(), 3});
    for (int r = 0; r < v.size(); ++r) {
      if (r == v.sos() || r == v.pad() || r == v.nm()) continue;
      for (int t = 0; t < 3; ++t)
        cw.data()[static_cast<size_t>(r) * 3 + t] =
            rand_signed(rng, {1}, 0.5f, 1.0f).data()[0];
    }

    std::vector<Tensor> leaves{f};
    for (auto& [name, p] : ps.items()) leaves.push_back(p);
    auto loss = [&]() {
      return sum(mul(cw, dec.forward_logits(ids, f, 2, 2)));
    };
    GradCheckResult res = grad_check(loss, leaves);
    INFO("max_err=" << res.max_err << " checked=" << res.checked
                    << " skipped=" << res.skipped);
    REQUIRE(res.checked > 0);
    REQUIRE(res.skipped < res.checked / 20 + 8);
    REQUIRE(res.max_err < 1e-3f);
  }
}
