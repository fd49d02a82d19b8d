#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "seqtrace/backbone.hpp"
#include "testutil.hpp"

using namespace seqtrace;
using testutil::rand_uniform;

TEST_CASE("backbone shape arithmetic") {
  ParamStore ps;
  Rng rng(2);
  BackboneConfig cfg;
  Backbone net(ps, "backbone", cfg, rng);
  SECTION("default config gives 64x8x8 from 64x64") {
    Tensor img = rand_uniform(rng, {3, 64, 64}, 0.0f, 1.0f);
    Tensor f = net.forward(img);
    REQUIRE(f.shape() == Shape{64, 8, 8});
  }
  SECTION("batched gives N x 64 x 8 x 8 and matches per-sample") {
    Tensor imgs = rand_uniform(rng, {2, 3, 64, 64}, 0.0f, 1.0f);
    Tensor fb = net.forward(imgs);
    REQUIRE(fb.shape() == Shape{2, 64, 8, 8});
    for (int b = 0; b < 2; ++b) {
      std::vector<float> one(imgs.data().begin() + b * 3 * 64 * 64,
                             imgs.data().begin() + (b + 1) * 3 * 64 * 64);
      Tensor f1 = net.forward(Tensor::from_data({3, 64, 64}, one));
      for (size_t i = 0; i < f1.numel(); ++i)
        REQUIRE(std::fabs(f1.data()[i] - fb.data()[b * f1.numel() + i]) < 1e-4f);
    }
  }
  SECTION("size mismatch rejected") {
    Tensor bad = Tensor::zeros({3, 32, 32});
    REQUIRE_THROWS_WITH(net.forward(bad),
                        Catch::Matchers::ContainsSubstring("64"));
  }
  SECTION("reduced-width config scales") {
    ParamStore ps2;
    BackboneConfig small;
    small.widths = {8, 16, 32};
    Backbone tiny(ps2, "backbone", small, rng);
    Tensor img = rand_uniform(rng, {3, 64, 64}, 0.0f, 1.0f);
    REQUIRE(tiny.forward(img).shape() == Shape{32, 8, 8});
  }
}

TEST_CASE("zero image with zero-initialized final block stays finite") {
  ParamStore ps;
  Rng rng(4);
  BackboneConfig cfg;
  Backbone net(ps, "backbone", cfg, rng);
  // zero out the last block's convs: residual shortcut must carry signal
  ResBlock& last = net.blocks.back();
  std::fill(last.c1.w.data().begin(), last.c1.w.data().end(), 0.0f);
  std::fill(last.c2.w.data().begin(), last.c2.w.data().end(), 0.0f);
  Tensor f = net.forward(Tensor::zeros({3, 64, 64}));
  for (float v : f.data()) REQUIRE(std::isfinite(v));
}

TEST_CASE("local image edit moves the features") {
  ParamStore ps;
  Rng rng(6);
  BackboneConfig cfg;
  Backbone net(ps, "backbone", cfg, rng);
  Tensor a = rand_uniform(rng, {3, 64, 64}, 0.1f, 0.9f);
  Tensor b = Tensor::from_data({3, 64, 64}, a.data());
  // perturb a small region (one manipulated patch)
  for (int i = 20; i < 28; ++i)
    for (int j = 20; j < 28; ++j)
      b.data()[(0 * 64 + i) * 64 + j] += 0.5f;
  Tensor fa = net.forward(a);
  Tensor fb = net.forward(b);
  float maxdiff = 0.0f;
  for (size_t i = 0; i < fa.numel(); ++i)
    maxdiff = std::max(maxdiff, std::fabs(fa.data()[i] - fb.data()[i]));
  REQUIRE(maxdiff > 1e-4f);
}

TEST_CASE("positional encoding table") {
  SECTION("zero feature map in gives the table itself, and it is deterministic") {
    Tensor z = Tensor::zeros({8, 4, 4});
    Tensor out = add_positional_encoding(z);
    Tensor table = positional_encoding_table(8, 4, 4);
    REQUIRE(out.data() == table.data());
    Tensor table2 = positional_encoding_table(8, 4, 4);
    REQUIRE(table.data() == table2.data());
  }
  SECTION("values bounded by [-1,1]") {
    Tensor table = positional_encoding_table(64, 8, 8);
    for (float v : table.data()) {
      REQUIRE(v <= 1.0f);
      REQUIRE(v >= -1.0f);
    }
  }
  SECTION("first half varies with rows only, second half with cols only") {
    Tensor t = positional_encoding_table(8, 4, 4);
    auto at = [&](int c, int i, int j) { return t.data()[(c * 4 + i) * 4 + j]; };
    for (int c = 0; c < 4; ++c)
      for (int i = 0; i < 4; ++i)
        for (int j = 1; j < 4; ++j)
          REQUIRE(at(c, i, j) == Catch::Approx(at(c, i, 0)).margin(0));
    for (int c = 4; c < 8; ++c)
      for (int j = 0; j < 4; ++j)
        for (int i = 1; i < 4; ++i)
          REQUIRE(at(c, i, j) == Catch::Approx(at(c, 0, j)).margin(0));
  }
  SECTION("odd channel count rejected") {
    REQUIRE_THROWS(positional_encoding_table(7, 4, 4));
  }
  SECTION("purely additive and data-independent") {
    Rng rng(8);
    Tensor f1 = rand_uniform(rng, {8, 4, 4}, -1.0f, 1.0f);
    Tensor f2 = rand_uniform(rng, {8, 4, 4}, -1.0f, 1.0f);
    // encode(f1) - encode(f2) == f1 - f2 up to one rounding per element
    Tensor d1 = sub(add_positional_encoding(f1), add_positional_encoding(f2));
    Tensor d2 = sub(f1, f2);
    for (size_t i = 0; i < d1.numel(); ++i)
      REQUIRE(d1.data()[i] == Catch::Approx(d2.data()[i]).margin(1e-6));
  }
}

TEST_CASE("flatten_spatial index contract") {
  SECTION("2x2 grid order") {
    Tensor f = Tensor::from_data({1, 2, 2}, {10, 11, 12, 13});
    Tensor flat = flatten_spatial(f);
    REQUIRE(flat.shape() == Shape{1, 4});
    REQUIRE(flat.data() == std::vector<float>{10, 11, 12, 13});
  }
  SECTION("(3,5) with W=8 lands at 29") {
    REQUIRE(spatial_token_index(3, 5, 8) == 29);
    Tensor f = Tensor::zeros({1, 8, 8});
    f.data()[(0 * 8 + 3) * 8 + 5] = 42.0f;
    Tensor flat = flatten_spatial(f);
    REQUIRE(flat.data()[29] == 42.0f);
  }
  SECTION("flatten then unflatten is identity") {
    Rng rng(10);
    Tensor f = rand_uniform(rng, {4, 3, 5}, -1.0f, 1.0f);
    Tensor back = reshape(flatten_spatial(f), {4, 3, 5});
    REQUIRE(back.data() == f.data());
  }
}

TEST_CASE("backbone gradient flow is finite") {
  ParamStore ps;
  Rng rng(12);
  BackboneConfig small;
  small.widths = {4, 8, 8};
  small.blocks_per_stage = 1;
  Backbone net(ps, "backbone", small, rng);
  Tensor img = rand_uniform(rng, {3, 64, 64}, 0.0f, 1.0f);
  sum(net.forward(img)).backward();
  for (const auto& [name, p] : ps.items()) {
    INFO(name);
    if (!p.requires_grad()) continue;  // frozen standardizer stats
    bool any = false;
    for (float g : p.grad()) {
      REQUIRE(std::isfinite(g));
      if (g != 0.0f) any = true;
    }
    REQUIRE(any);
  }
}

TEST_CASE("channel standardizer whitens and calibration freezes stats") {
  ParamStore ps;
  Rng rng(77);
  BackboneConfig small;
  small.widths = {4, 8, 8};
  small.blocks_per_stage = 1;
  Backbone net(ps, "backbone", small, rng);

  SECTION("identity before calibration") {
    ChannelStandardizer id(ps, "lone_std", 3);
    Tensor x = rand_uniform(rng, {3, 2, 2}, -1.0f, 1.0f);
    Tensor y = id.apply(x);
    for (size_t i = 0; i < x.numel(); ++i)
      REQUIRE(y.data()[i] == x.data()[i]);
    REQUIRE(!id.shift.requires_grad());
    REQUIRE(!id.scale.requires_grad());
  }

  SECTION("fit gives zero mean and unit variance per channel") {
    ChannelStandardizer std3(ps, "fit_std", 3);
    std::vector<Tensor> acts;
    for (int i = 0; i < 6; ++i)
      acts.push_back(rand_uniform(rng, {3, 4, 4}, -2.0f, 3.0f));
    std3.fit(acts);
    double sum[3] = {0, 0, 0}, sumsq[3] = {0, 0, 0};
    int n = 0;
    NoGradGuard ng;
    for (const Tensor& a : acts) {
      Tensor w = std3.apply(a);
      for (int c = 0; c < 3; ++c)
        for (int k = 0; k < 16; ++k) {
          double v = w.data()[static_cast<size_t>(c) * 16 + k];
          sum[c] += v;
          sumsq[c] += v * v;
        }
      n += 16;
    }
    for (int c = 0; c < 3; ++c) {
      REQUIRE(std::abs(sum[c] / n) < 1e-4);
      REQUIRE(std::abs(sumsq[c] / n - 1.0) < 1e-3);
    }
  }

  SECTION("near-dead channels are not amplified past the 10x cap") {
    ChannelStandardizer s2(ps, "cap_std", 2);
    std::vector<Tensor> acts;
    for (int i = 0; i < 4; ++i) {
      Tensor a = rand_uniform(rng, {2, 3, 3}, -1.0f, 1.0f);
      for (int k = 0; k < 9; ++k) a.data()[9 + k] = 5.0f;  // constant channel
      acts.push_back(a);
    }
    s2.fit(acts);
    // mean sd across the two channels is half the live channel's sd, which
    // is 1/scale[0]; the dead channel's scale must stay within 10/mean_sd
    float mean_sd = 0.5f / s2.scale.data()[0];
    REQUIRE(s2.scale.data()[1] * mean_sd <= 10.0f + 1e-3f);
    // the live channel is whitened, the dead one maps to exactly zero
    NoGradGuard ng;
    Tensor w = s2.apply(acts[0]);
    for (int k = 0; k < 9; ++k) REQUIRE(std::abs(w.data()[9 + k]) < 1e-5f);
  }

  SECTION("backbone calibration whitens its output features") {
    std::vector<Tensor> imgs;
    for (int i = 0; i < 5; ++i)
      imgs.push_back(rand_uniform(rng, {3, 64, 64}, 0.0f, 1.0f));
    net.calibrate(imgs);
    NoGradGuard ng;
    int c = small.widths.back();
    std::vector<double> sum(c, 0.0), sumsq(c, 0.0);
    int n = 0;
    for (const Tensor& img : imgs) {
      Tensor f = net.forward(img);
      int hw = static_cast<int>(f.numel()) / c;
      for (int ch = 0; ch < c; ++ch)
        for (int k = 0; k < hw; ++k) {
          double v = f.data()[static_cast<size_t>(ch) * hw + k];
          sum[ch] += v;
          sumsq[ch] += v * v;
        }
      n += hw;
    }
    for (int ch = 0; ch < c; ++ch) {
      double mu = sum[ch] / n;
      double var = sumsq[ch] / n - mu * mu;
      REQUIRE(std::abs(mu) < 1e-3);
      // unit variance unless the channel hit the amplification cap
      REQUIRE(var < 1.1);
    }
  }
}
