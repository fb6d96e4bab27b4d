#include <gtest/gtest.h>

#include "prcn/gradcheck.hpp"
#include "prcn/presets.hpp"
#include "test_util.hpp"

using namespace prcn;

namespace {

std::vector<std::string> kinds(Sequential& net) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < net.size(); ++i) out.push_back(net.layer(i).kind());
  return out;
}

std::size_t actual_params(Sequential& net) {
  std::size_t n = 0;
  for (auto* p : net.params()) n += p->value.size();
  return n;
}

}  // namespace

TEST(Presets, ConvNet36Structure) {
  const auto spec = presets::by_name("convnet36");
  ASSERT_EQ(spec.blocks.size(), 2u);
  for (const auto& b : spec.blocks) {
    EXPECT_EQ(b.kind, BlockKind::Conv);
    EXPECT_EQ(b.k, 5u);
    EXPECT_EQ(b.spatial_pool, 3u);
    EXPECT_TRUE(b.batchnorm);
    EXPECT_EQ(b.act, Activation::PRelu);
  }
  EXPECT_EQ(spec.blocks[0].width, 36u);
  EXPECT_EQ(spec.blocks[1].width, 16u);
  auto m = compile(spec, 0);
  EXPECT_EQ(kinds(m.net), (std::vector<std::string>{"conv", "batchnorm", "prelu", "maxpool", "conv", "batchnorm",
                                                    "prelu", "maxpool", "gap", "linear"}));
  // 1*36*25 + 36*16*25 + BN and PReLU (3 per channel) + 16*10 + 10.
  EXPECT_EQ(count_params(spec), 900u + 14400u + 3u * 52u + 170u);
  EXPECT_EQ(count_params(spec), 15626u);
  EXPECT_EQ(actual_params(m.net), count_params(spec));
}

TEST(Presets, Prcn182IsModeBWithCmpEqualG) {
  const auto spec = presets::by_name("prcn(18,2)");
  for (const auto& b : spec.blocks) {
    EXPECT_EQ(b.kind, BlockKind::Prcn);
    EXPECT_EQ(b.mode, PrcnMode::B);
    EXPECT_EQ(b.G, 2u);
    EXPECT_EQ(b.cmp, 2u);
    EXPECT_TRUE(b.randomized);
  }
  EXPECT_EQ(spec.blocks[0].width, 18u);
  EXPECT_EQ(spec.blocks[1].width, 16u);
  auto m = compile(spec, 0);
  const auto cs = m.net.connectomes();
  ASSERT_EQ(cs.size(), 2u);
  EXPECT_EQ(cs[0]->expansion(), 36u);
  EXPECT_EQ(cs[1]->expansion(), 32u);
  EXPECT_FALSE(presets::by_name("prcn(18,2,norand)").blocks[0].randomized);
  EXPECT_EQ(presets::by_name("prcn(18,2,pn)").blocks[0].pool_net, PoolNetKind::TwoConv1x1);
  const auto a = presets::by_name("prcn(12,4,cmp=2)");
  EXPECT_EQ(a.blocks[0].mode, PrcnMode::A);
  EXPECT_EQ(a.blocks[0].cmp, 2u);
}

TEST(Presets, EthConvNetCStructure) {
  const auto spec = presets::by_name("eth_convnet_c");
  std::vector<std::size_t> widths;
  for (const auto& b : spec.blocks) {
    EXPECT_EQ(b.kind, BlockKind::Conv);
    widths.push_back(b.width);
  }
  EXPECT_EQ(widths, (std::vector<std::size_t>{12, 24, 48, 64, 128}));
  EXPECT_TRUE(spec.fc_hidden.empty());
  EXPECT_EQ(spec.classes, 8u);
  EXPECT_EQ(spec.in_channels, 3u);
  auto m = compile(spec, 0);
  const auto k = kinds(m.net);
  EXPECT_EQ(k[k.size() - 2], "gap");
  EXPECT_EQ(k.back(), "linear");
  const auto b = presets::by_name("eth_convnet_b");
  EXPECT_EQ(b.fc_hidden, (std::vector<std::size_t>{300, 200}));
}

TEST(Presets, EveryShippedPresetCompilesAndRuns) {
  Rng rng(1);
  for (const auto& name : presets::names()) {
    const auto spec = presets::by_name(name);
    auto m = compile(spec, 2);
    EXPECT_EQ(actual_params(m.net), count_params(spec)) << name;
    const Tensor x = test::random_tensor({2, spec.in_channels, spec.in_h, spec.in_w}, rng, 0.0, 1.0);
    const Tensor y = m.net.forward(x, Mode::Eval);
    EXPECT_EQ(y.shape(), (Shape{2, spec.classes, 1, 1})) << name;
    EXPECT_EQ(spec.classes, name.starts_with("eth_") ? 8u : 10u) << name;
    check_finite(y, name);
  }
}

TEST(Presets, PrcnFamilyHasLayerParityWithConvNet36) {
  const auto conv = presets::by_name("convnet36");
  const std::size_t kk = 25;
  EXPECT_EQ(block_params(conv, 0), 36u * kk);
  EXPECT_EQ(block_params(conv, 1), 576u * kk);
  const double conv_total = static_cast<double>(count_params(conv));
  for (const char* name : {"prcn(36,1)", "prcn(18,2)", "prcn(12,3)", "prcn(9,4)"}) {
    const auto spec = presets::by_name(name);
    EXPECT_EQ(block_params(spec, 0), 36u * kk) << name;
    EXPECT_EQ(block_params(spec, 1), 576u * kk) << name;
    EXPECT_LT(std::abs(static_cast<double>(count_params(spec)) - conv_total) / conv_total, 0.05) << name;
  }
  EXPECT_EQ(count_params(presets::by_name("prcn(12,3)")), 15554u);
}

TEST(Presets, ValidationNamesTheFailingBlock) {
  auto spec = presets::by_name("prcn(12,3)");
  spec.blocks[1].cmp = 5;
  try {
    validate(spec);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(std::string(e.what()).rfind("block 1:", 0), 0u) << e.what();
  }
  auto small = presets::by_name("convnet36");
  small.in_h = small.in_w = 4;
  try {
    compile(small, 0);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("block 1"), std::string::npos) << e.what();
  }
  ArchSpec empty;
  EXPECT_THROW(validate(empty), ConfigError);
}

TEST(Presets, UnknownNamesAreRejected) {
  for (const char* bad : {"resnet50", "prcn(12)", "prcn(12,3,fast)", "nptn(12,3,norand)", "eth_densenet"})
    EXPECT_THROW(presets::by_name(bad), ConfigError) << bad;
}

TEST(Presets, CompileIsDeterministicPerSeed) {
  auto a = compile(presets::by_name("prcn(12,3)"), 5), b = compile(presets::by_name("prcn(12,3)"), 5);
  auto c = compile(presets::by_name("prcn(12,3)"), 6);
  const auto pa = a.net.params(), pb = b.net.params(), pc = c.net.params();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i]->value, pb[i]->value);
  EXPECT_EQ(a.net.connectomes()[0]->hash(), b.net.connectomes()[0]->hash());
  EXPECT_NE(pa[0]->value, pc[0]->value);
}

// Whole-model gradients through conv, PRC, BN, PReLU, max pool, GAP and linear.
TEST(ModelGrad, SmallPresetsPassFiniteDifferences) {
  Rng rng(7);
  for (const char* name : {"convnet36", "prcn(12,3)", "prcn(18,2,pn)", "nptn(12,3)", "convnet36_fc"}) {
    auto spec = presets::by_name(name);
    spec.in_h = spec.in_w = 9;
    for (auto& b : spec.blocks) b.spatial_pool = 0;
    spec.blocks[0].spatial_pool = 3;
    auto m = compile(spec, 8);
    const Tensor x = test::random_tensor({2, 1, 9, 9}, rng, 0.0, 1.0);
    const auto rep = gradcheck_model(m.net, x, {3, 7}, rng, 24);
    EXPECT_LT(rep.max_rel_err(), 1e-6) << name;
  }
}
