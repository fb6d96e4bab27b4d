#include <gtest/gtest.h>

#include <numeric>

#include "prcn/gradcheck.hpp"
#include "prcn/prcn_layer.hpp"
#include "test_util.hpp"

using namespace prcn;

namespace {

PrcnLayerConfig make_cfg(std::size_t inch, std::size_t outch, std::size_t G, std::size_t cmp, PrcnMode mode,
                         std::size_t k = 3, std::size_t pad = 1) {
  PrcnLayerConfig c;
  c.inch = inch;
  c.outch = outch;
  c.G = G;
  c.cmp = cmp;
  c.mode = mode;
  c.k = k;
  c.pad = pad;
  return c;
}

// Gather through the permutation into a new tensor, max over contiguous
// blocks of cmp channels, then average consecutive groups.
Tensor explicit_pipeline(const Tensor& expanded, std::span<const std::uint32_t> perm, std::size_t cmp,
                         std::size_t avg) {
  const Tensor shuffled = gather_channels(expanded, perm);
  const std::size_t S = expanded.c() / cmp, P = expanded.h() * expanded.w();
  Tensor pooled(expanded.n(), S, expanded.h(), expanded.w());
  for (std::size_t n = 0; n < expanded.n(); ++n)
    for (std::size_t j = 0; j < S; ++j)
      for (std::size_t p = 0; p < P; ++p) {
        double m = shuffled.plane(n, j * cmp)[p];
        for (std::size_t i = 1; i < cmp; ++i) m = std::max(m, shuffled.plane(n, j * cmp + i)[p]);
        pooled.plane(n, j)[p] = m;
      }
  return channel_avgpool_forward(pooled, avg);
}

PrcnLayerConfig random_valid_cfg(Rng& rng) {
  for (;;) {
    const PrcnMode mode = rng.below(2) ? PrcnMode::A : PrcnMode::B;
    const std::size_t inch = 1 + rng.below(4), G = 1 + rng.below(4), outch = 1 + rng.below(4);
    const std::size_t k = 1 + 2 * rng.below(2);
    const std::size_t cmp = mode == PrcnMode::B ? G : 1 + rng.below(4);
    auto c = make_cfg(inch, outch, G, cmp, mode, k, k / 2);
    c.randomized = rng.below(4) != 0;
    try {
      c.validate();
      return c;
    } catch (const ConfigError&) {
    }
  }
}

double prcn_gradcheck(PrcnLayer& layer, Tensor x, Rng& rng) {
  const Tensor r = test::random_tensor(layer.forward(x, Mode::Train).shape(), rng);
  for (auto* p : layer.params()) p->zero_grad();
  layer.forward(x, Mode::Train);
  const Tensor gx = layer.backward(r);
  auto loss = [&] {
    const Tensor y = layer.forward(x, Mode::Train);
    double s = 0;
    for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * r[i];
    return s;
  };
  std::vector<std::size_t> all(x.size());
  std::iota(all.begin(), all.end(), 0);
  double worst = relative_error({gx.data(), gx.data() + gx.size()}, numeric_gradient(loss, x, all));
  for (auto* p : layer.params()) {
    const Tensor analytic = p->grad;
    std::vector<std::size_t> idx(p->value.size());
    std::iota(idx.begin(), idx.end(), 0);
    worst = std::max(worst, relative_error({analytic.data(), analytic.data() + analytic.size()},
                                           numeric_gradient(loss, p->value, idx)));
  }
  return worst;
}

}  // namespace

TEST(PrcnConfig, Arithmetic) {
  const auto a = make_cfg(24, 12, 12, 2, PrcnMode::A);
  EXPECT_EQ(a.expansion(), 288u);
  EXPECT_EQ(a.slots(), 144u);
  EXPECT_EQ(a.avg(), 12u);
  const auto b = make_cfg(1, 18, 2, 2, PrcnMode::B);
  EXPECT_EQ(b.expansion(), 36u);
  EXPECT_EQ(b.slots(), 18u);
  EXPECT_EQ(b.avg(), 1u);
}

TEST(PrcnConfig, RejectsDivisibilityViolations) {
  EXPECT_THROW(make_cfg(2, 2, 3, 4, PrcnMode::A).validate(), ConfigError);   // cmp does not divide 6
  EXPECT_THROW(make_cfg(2, 4, 3, 2, PrcnMode::A).validate(), ConfigError);   // 3 slots onto 4 outputs
  EXPECT_THROW(make_cfg(1, 18, 2, 3, PrcnMode::B).validate(), ConfigError);  // mode B needs cmp == G
  EXPECT_THROW(make_cfg(1, 0, 2, 2, PrcnMode::B).validate(), ConfigError);
  auto replace = make_cfg(1, 4, 2, 2, PrcnMode::B);
  replace.pool_net = PoolNetKind::Conv1x1ReplaceAvg;
  EXPECT_THROW(replace.validate(), ConfigError);
  EXPECT_THROW(pool_net_from_string("three_1x1"), ConfigError);
}

TEST(PrcnLayer, DegenerateCaseIsPlainConvolution) {
  Rng rng(1);
  auto cfg = make_cfg(1, 1, 1, 1, PrcnMode::A, 5, 2);
  cfg.randomized = false;
  PrcnLayer layer(cfg, rng);
  const Tensor x = test::random_tensor({2, 1, 7, 7}, rng);
  const Tensor w = layer.expansion_conv().params()[0]->value;
  EXPECT_EQ(layer.forward(x, Mode::Train), conv_forward(x, ConvGeometry{1, 1, 5, 1, 2, 1}, w, nullptr));
}

TEST(PrcnLayer, DenseNetSettingShapes) {
  Rng rng(2);
  PrcnLayer layer(make_cfg(24, 12, 12, 2, PrcnMode::A), rng);
  const Tensor y = layer.forward(test::random_tensor({1, 24, 4, 4}, rng), Mode::Train);
  EXPECT_EQ(layer.last_expanded().c(), 288u);
  EXPECT_EQ(layer.last_pooled().c(), 144u);
  EXPECT_EQ(y.shape(), (Shape{1, 12, 4, 4}));
}

TEST(PrcnLayer, MnistModeBShapes) {
  Rng rng(3);
  PrcnLayer layer(make_cfg(1, 18, 2, 2, PrcnMode::B, 5, 2), rng);
  const Tensor y = layer.forward(test::random_tensor({2, 1, 28, 28}, rng), Mode::Train);
  EXPECT_EQ(layer.last_expanded().c(), 36u);
  EXPECT_EQ(y.shape(), (Shape{2, 18, 28, 28}));
  EXPECT_EQ(layer.params()[0]->value.size(), 36u * 25u);
}

TEST(PrcnLayer, OutputChannelsAlwaysEqualOutch) {
  Rng rng(4);
  std::size_t valid = 0;
  for (std::size_t inch = 1; inch <= 4; ++inch)
    for (std::size_t outch = 1; outch <= 6; ++outch)
      for (std::size_t G = 1; G <= 4; ++G)
        for (std::size_t cmp = 1; cmp <= 6; ++cmp)
          for (PrcnMode mode : {PrcnMode::A, PrcnMode::B}) {
            const auto cfg = make_cfg(inch, outch, G, cmp, mode, 1, 0);
            try {
              cfg.validate();
            } catch (const ConfigError&) {
              continue;
            }
            ++valid;
            PrcnLayer layer(cfg, rng);
            EXPECT_EQ(layer.forward(Tensor(1, inch, 2, 2, 1.0), Mode::Eval).c(), outch);
          }
  EXPECT_GT(valid, 50u);
}

TEST(PrcnLayer, FusedPathEqualsExplicitPipeline) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const auto cfg = random_valid_cfg(rng);
    PrcnLayer layer(cfg, rng);
    const Tensor x = test::random_tensor({1 + rng.below(3), cfg.inch, 5, 5}, rng);
    const Tensor y = layer.forward(x, Mode::Train);
    EXPECT_EQ(y, explicit_pipeline(layer.last_expanded(), layer.connectome().perm(), cfg.cmp, cfg.avg()))
        << "trial " << trial;
  }
}

// randomized = false: output equals an unshuffled reference network
// (conv, contiguous channel max, average) bit for bit.
TEST(PrcnLayer, AblationEqualsNoShuffleReference) {
  Rng rng(6);
  for (int trial = 0; trial < 30; ++trial) {
    auto cfg = random_valid_cfg(rng);
    cfg.randomized = false;
    PrcnLayer layer(cfg, rng);
    const Tensor x = test::random_tensor({2, cfg.inch, 6, 6}, rng);
    const Tensor w = layer.expansion_conv().params()[0]->value;
    const Tensor expanded =
        conv_forward(x, ConvGeometry{cfg.inch, cfg.expansion(), cfg.k, cfg.stride, cfg.pad, cfg.groups()}, w, nullptr);
    std::vector<std::uint32_t> identity(cfg.expansion());
    std::iota(identity.begin(), identity.end(), 0u);
    EXPECT_EQ(layer.forward(x, Mode::Train), explicit_pipeline(expanded, identity, cfg.cmp, cfg.avg()));
  }
}

TEST(PrcnLayer, ZeroGradOutGivesZeroGrads) {
  Rng rng(7);
  PrcnLayer layer(make_cfg(2, 2, 4, 2, PrcnMode::A), rng);
  const Tensor x = test::random_tensor({1, 2, 5, 5}, rng);
  const Tensor y = layer.forward(x, Mode::Train);
  for (auto* p : layer.params()) p->zero_grad();
  EXPECT_EQ(max_abs(layer.backward(Tensor(y.shape()))), 0.0);
  for (auto* p : layer.params()) EXPECT_EQ(max_abs(p->grad), 0.0);
}

TEST(PrcnLayer, UnitCmpBackwardIsConvBackwardAfterAveraging) {
  Rng rng(8);
  auto cfg = make_cfg(2, 2, 3, 1, PrcnMode::A);
  PrcnLayer layer(cfg, rng);
  const Tensor x = test::random_tensor({2, 2, 4, 4}, rng);
  const Tensor y = layer.forward(x, Mode::Train);
  const Tensor g = test::random_tensor(y.shape(), rng);
  for (auto* p : layer.params()) p->zero_grad();
  const Tensor gx = layer.backward(g);

  // Un-average, un-permute, then the plain grouped-conv backward.
  const Tensor g_pooled = channel_avgpool_backward(g, cfg.avg());
  Tensor g_expanded(g_pooled.shape());
  const auto perm = layer.connectome().perm();
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t j = 0; j < g_pooled.c(); ++j)
      std::copy_n(g_pooled.plane(n, j), 16, g_expanded.plane(n, perm[j]));
  const Tensor w = layer.params()[0]->value;
  const auto ref = conv_backward(g_expanded, x, ConvGeometry{2, 6, 3, 1, 1, 2}, w, false);
  EXPECT_EQ(gx, ref.grad_x);
  EXPECT_EQ(layer.params()[0]->grad, ref.grad_w);
}

TEST(PrcnLayerGrad, FiniteDifferenceExampleConfig) {
  Rng rng(9);
  PrcnLayer layer(make_cfg(2, 2, 4, 2, PrcnMode::A), rng);
  EXPECT_LT(prcn_gradcheck(layer, test::random_tensor({2, 2, 4, 4}, rng), rng), 1e-6);
}

TEST(PrcnLayerGrad, FiniteDifferenceOnRandomConfigs) {
  Rng rng(10);
  for (int trial = 0; trial < 24; ++trial) {
    auto cfg = random_valid_cfg(rng);
    if (trial % 3 == 1) {
      cfg.pool_net = PoolNetKind::TwoConv1x1;
      cfg.pool_net_hidden = 1 + rng.below(4);
    } else if (trial % 3 == 2 && cfg.mode == PrcnMode::A) {
      cfg.pool_net = PoolNetKind::Conv1x1ReplaceAvg;
    }
    PrcnLayer layer(cfg, rng);
    const Tensor x = test::random_tensor({1 + rng.below(2), cfg.inch, 4, 4}, rng);
    EXPECT_LT(prcn_gradcheck(layer, x, rng), 1e-6) << "trial " << trial;
  }
}

TEST(PrcnLayer, ConstructionDrawOrder) {
  // Expansion weights, then one connectome seed draw, then pool-net weights.
  auto cfg = make_cfg(1, 4, 2, 2, PrcnMode::B);
  cfg.pool_net = PoolNetKind::TwoConv1x1;
  Rng a(11), b(11);
  PrcnLayer layer(cfg, a);
  make_conv(ConvGeometry{1, 8, 3, 1, 1, 1}, b);
  EXPECT_EQ(layer.connectome().seed(), b.next());
  PoolingNetwork net(4, 4, b);
  EXPECT_EQ(a.next(), b.next());
}

TEST(PrcnLayer, RejectsWrongInputAndStaleBackward) {
  Rng rng(12);
  PrcnLayer layer(make_cfg(2, 2, 2, 2, PrcnMode::A), rng);
  EXPECT_THROW(layer.forward(Tensor(1, 3, 4, 4), Mode::Train), ShapeError);
  EXPECT_THROW(layer.backward(Tensor(1, 2, 4, 4)), StaleCacheError);
  EXPECT_THROW(layer.set_connectomes({Connectome::build(1, 6, 2, true)}), ConfigError);
}

// ---- NPTN

TEST(Nptn, UnitBankIsPlainConvolution) {
  Rng rng(13);
  const NptnConfig cfg{2, 3, 1, 3, 1, 1};
  const ConvParams p = make_conv(cfg.geometry(), rng);
  const Tensor x = test::random_tensor({1, 2, 5, 5}, rng);
  // G = 1: out o = sum_i conv(x_i, w_{i,o}), a dense conv with weight (o, i).
  Tensor dense(3, 2, 3, 3);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t o = 0; o < 3; ++o)
      std::copy_n(p.weight.data() + (i * 3 + o) * 9, 9, dense.data() + (o * 2 + i) * 9);
  EXPECT_LT(test::max_rel_diff(nptn_reference_forward(x, cfg, p.weight),
                               conv_forward(x, ConvGeometry{2, 3, 3, 1, 1, 1}, dense, nullptr)),
            1e-12);
}

TEST(Nptn, ZeroInputGivesZero) {
  Rng rng(14);
  const NptnConfig cfg{2, 2, 3, 3, 1, 1};
  const ConvParams p = make_conv(cfg.geometry(), rng);
  EXPECT_EQ(max_abs(nptn_reference_forward(Tensor(1, 2, 5, 5), cfg, p.weight)), 0.0);
}

// PRC-NPTN mode A with G' = outch*G filters per input channel and cmp = G
// pools exactly the NPTN banks; averaging over the inch slots of each output
// gives the NPTN sum divided by inch. A single output needs only the identity
// connectome; several outputs need the (input, output) -> (output, input)
// transpose so that averaged slots are adjacent.
TEST(Nptn, EqualsPrcnWithCopiedBanks) {
  Rng rng(15);
  for (std::size_t outch : {1u, 3u}) {
    const std::size_t inch = 2, G = 3;
    const NptnConfig ncfg{inch, outch, G, 3, 1, 1};
    auto pcfg = make_cfg(inch, outch, outch * G, G, PrcnMode::A);
    pcfg.randomized = false;
    PrcnLayer layer(pcfg, rng);
    const ConvParams p = make_conv(ncfg.geometry(), rng);
    layer.params()[0]->value = p.weight;
    if (outch > 1) {
      std::vector<std::uint8_t> blob;
      auto put32 = [&](std::uint32_t v) {
        for (int b = 0; b < 4; ++b) blob.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
      };
      const std::uint32_t E = static_cast<std::uint32_t>(inch * outch * G);
      for (std::uint32_t v : {1u, E, static_cast<std::uint32_t>(G), 1u, 0u, 0u, E}) put32(v);
      for (std::size_t o = 0; o < outch; ++o)
        for (std::size_t i = 0; i < inch; ++i)
          for (std::size_t g = 0; g < G; ++g) put32(static_cast<std::uint32_t>((i * outch + o) * G + g));
      layer.set_connectomes({Connectome::deserialize(blob)});
    }
    const Tensor x = test::random_tensor({1, 2, 5, 5}, rng);
    Tensor expected = nptn_reference_forward(x, ncfg, p.weight);
    for (std::size_t i = 0; i < expected.size(); ++i) expected[i] /= static_cast<double>(inch);
    EXPECT_LT(test::max_rel_diff(layer.forward(x, Mode::Train), expected), 1e-14) << "outch " << outch;
  }
}

TEST(NptnLayer, ForwardMatchesReferenceAndGradchecks) {
  Rng rng(16);
  for (int trial = 0; trial < 20; ++trial) {
    const NptnConfig cfg{1 + rng.below(3), 1 + rng.below(3), 1 + rng.below(3), 3, 1, 1};
    NptnLayer layer(cfg, rng);
    const Tensor x = test::random_tensor({1, cfg.inch, 4, 4}, rng);
    const Tensor w = layer.params()[0]->value;
    EXPECT_EQ(layer.forward(x, Mode::Train), nptn_reference_forward(x, cfg, w));

    const Tensor r = test::random_tensor({1, cfg.outch, 4, 4}, rng);
    layer.params()[0]->zero_grad();
    layer.forward(x, Mode::Train);
    Tensor xv = x;
    const Tensor gx = layer.backward(r);
    auto loss = [&] {
      const Tensor y = layer.forward(xv, Mode::Train);
      double s = 0;
      for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * r[i];
      return s;
    };
    std::vector<std::size_t> all(xv.size());
    std::iota(all.begin(), all.end(), 0);
    EXPECT_LT(relative_error({gx.data(), gx.data() + gx.size()}, numeric_gradient(loss, xv, all)), 1e-6);
  }
}

// The max of a support's channels can vary less than the most variable input
// channel or more; the bound that always holds is the sum of the support's
// variances (max is 1-Lipschitz in each argument).
TEST(PrcnLayer, PostPoolVarianceBoundedBySupportVariances) {
  Rng rng(17);
  PrcnLayer layer(make_cfg(1, 6, 3, 3, PrcnMode::B, 3, 1), rng);
  const Tensor base = test::random_tensor({1, 1, 6, 6}, rng);
  const std::size_t T = 40, E = 18, S = 6, P = 36;
  std::vector<double> pre_s(E * P), pre_q(E * P), post_s(S * P), post_q(S * P);
  for (std::size_t t = 0; t < T; ++t) {
    Tensor x = base;
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += 0.3 * rng.normal();
    layer.forward(x, Mode::Eval);
    for (std::size_t c = 0; c < E; ++c)
      for (std::size_t p = 0; p < P; ++p) {
        const double v = layer.last_expanded().plane(0, c)[p];
        pre_s[c * P + p] += v;
        pre_q[c * P + p] += v * v;
      }
    for (std::size_t j = 0; j < S; ++j)
      for (std::size_t p = 0; p < P; ++p) {
        const double v = layer.last_pooled().plane(0, j)[p];
        post_s[j * P + p] += v;
        post_q[j * P + p] += v * v;
      }
  }
  auto var = [&](double s, double q) { return q / T - (s / T) * (s / T); };
  for (std::size_t j = 0; j < S; ++j)
    for (std::size_t p = 0; p < P; ++p) {
      double bound = 0;
      for (auto c : layer.connectome().support(j)) bound += var(pre_s[c * P + p], pre_q[c * P + p]);
      EXPECT_LE(var(post_s[j * P + p], post_q[j * P + p]), bound + 1e-9);
    }
}
