#pragma once

#include <regex>
#include <string>
#include <vector>

#include "prcn/layers/activation.hpp"
#include "prcn/layers/batchnorm.hpp"
#include "prcn/layers/conv.hpp"
#include "prcn/layers/linear.hpp"
#include "prcn/layers/pooling.hpp"
#include "prcn/layers/pooling_network.hpp"
#include "prcn/model.hpp"
#include "prcn/prcn_layer.hpp"

namespace prcn {

enum class BlockKind { Conv, Nptn, Prcn };
enum class Activation { None, PRelu, Relu };

struct BlockSpec {
  BlockKind kind = BlockKind::Conv;
  std::size_t width = 16;  // output channels
  std::size_t G = 1, cmp = 1;
  std::size_t k = 5, pad = 2;
  PrcnMode mode = PrcnMode::B;
  bool randomized = true;
  PoolNetKind pool_net = PoolNetKind::None;  // for conv blocks: TwoConv1x1 appends a pooling network
  std::size_t pool_net_hidden = 0;           // 0: width
  bool batchnorm = true;
  Activation act = Activation::PRelu;
  std::size_t spatial_pool = 3;  // 0: none
};

// Blocks followed by global average pooling and a fully connected stack
// (hidden widths, then `classes`).
struct ArchSpec {
  std::string name;
  std::size_t in_channels = 1, in_h = 28, in_w = 28;
  std::vector<BlockSpec> blocks;
  std::vector<std::size_t> fc_hidden;
  std::size_t classes = 10;
};

struct Model {
  ArchSpec spec;
  Sequential net;
};

namespace detail {
inline PrcnLayerConfig prcn_config(const BlockSpec& b, std::size_t inch) {
  PrcnLayerConfig c;
  c.inch = inch;
  c.outch = b.width;
  c.G = b.G;
  c.cmp = b.cmp;
  c.k = b.k;
  c.pad = b.pad;
  c.mode = b.mode;
  c.randomized = b.randomized;
  c.pool_net = b.pool_net;
  c.pool_net_hidden = b.pool_net_hidden;
  return c;
}

[[noreturn]] inline void block_error(std::size_t i, const std::string& what) {
  throw ConfigError("block " + std::to_string(i) + ": " + what);
}
}  // namespace detail

// Validates every constraint compile() relies on, naming the failing block.
inline void validate(const ArchSpec& s) {
  if (s.blocks.empty()) throw ConfigError("architecture has no blocks");
  if (s.classes < 2) throw ConfigError("architecture needs >= 2 classes");
  std::size_t ch = s.in_channels, h = s.in_h, w = s.in_w;
  for (std::size_t i = 0; i < s.blocks.size(); ++i) {
    const auto& b = s.blocks[i];
    if (b.width == 0) detail::block_error(i, "width must be >= 1");
    try {
      if (b.kind == BlockKind::Prcn) detail::prcn_config(b, ch).validate();
      if (b.kind == BlockKind::Nptn && b.G == 0) throw ConfigError("G must be >= 1");
      if (b.kind == BlockKind::Conv && b.pool_net == PoolNetKind::Conv1x1ReplaceAvg)
        throw ConfigError("conv blocks have no channel average to replace");
      h = conv_out_dim(h, b.k, 1, b.pad);
      w = conv_out_dim(w, b.k, 1, b.pad);
    } catch (const Error& e) {
      detail::block_error(i, e.what());
    }
    if (b.spatial_pool) {
      if (h < b.spatial_pool || w < b.spatial_pool) detail::block_error(i, "spatial pool larger than feature map");
      h /= b.spatial_pool;
      w /= b.spatial_pool;
    }
    ch = b.width;
  }
}

// Exact learnable-parameter count, computed without building the model.
inline std::size_t count_params(const ArchSpec& s) {
  validate(s);
  std::size_t total = 0, ch = s.in_channels;
  for (const auto& b : s.blocks) {
    const std::size_t kk = b.k * b.k;
    const std::size_t hidden = b.pool_net_hidden ? b.pool_net_hidden : b.width;
    switch (b.kind) {
      case BlockKind::Conv:
        total += ch * b.width * kk;
        break;
      case BlockKind::Nptn:
        total += ch * b.width * b.G * kk;
        break;
      case BlockKind::Prcn: {
        const auto c = detail::prcn_config(b, ch);
        total += c.expansion() * (ch / c.groups()) * kk;
        if (b.pool_net == PoolNetKind::Conv1x1ReplaceAvg) total += c.slots() * b.width;
        break;
      }
    }
    if (b.pool_net == PoolNetKind::TwoConv1x1) total += 2 * b.width * hidden;
    if (b.batchnorm) total += 2 * b.width;
    if (b.act == Activation::PRelu) total += b.width;
    ch = b.width;
  }
  for (std::size_t hdim : s.fc_hidden) {
    total += ch * hdim + hdim;
    ch = hdim;
  }
  total += ch * s.classes + s.classes;
  return total;
}

// Parameters of the channel-mixing layer of one block (conv / NPTN / PRC-NPTN
// expansion including its pooling network), excluding BN and activation.
inline std::size_t block_params(const ArchSpec& s, std::size_t index) {
  ArchSpec one = s;
  std::size_t inch = s.in_channels;
  for (std::size_t i = 0; i < index; ++i) inch = s.blocks[i].width;
  one.in_channels = inch;
  one.blocks = {s.blocks.at(index)};
  one.blocks[0].batchnorm = false;
  one.blocks[0].act = Activation::None;
  one.blocks[0].spatial_pool = 0;
  one.fc_hidden.clear();
  const std::size_t head = one.blocks[0].width * one.classes + one.classes;
  one.in_h = one.in_w = std::max<std::size_t>(s.blocks[index].k, 1);
  return count_params(one) - head;
}

// Instantiates layers with weights drawn from Rng(seed) in block order;
// connectomes are built here, once.
inline Model compile(const ArchSpec& s, std::uint64_t seed) {
  validate(s);
  Model m{s, {}};
  Rng rng(seed);
  std::size_t ch = s.in_channels;
  for (const auto& b : s.blocks) {
    const std::size_t hidden = b.pool_net_hidden ? b.pool_net_hidden : b.width;
    switch (b.kind) {
      case BlockKind::Conv:
        m.net.add(std::make_unique<Conv2d>(make_conv(ConvGeometry{ch, b.width, b.k, 1, b.pad, 1}, rng)));
        if (b.pool_net == PoolNetKind::TwoConv1x1) m.net.add(std::make_unique<PoolingNetwork>(b.width, hidden, rng));
        break;
      case BlockKind::Nptn:
        m.net.add(std::make_unique<NptnLayer>(NptnConfig{ch, b.width, b.G, b.k, b.pad, 1}, rng));
        if (b.pool_net == PoolNetKind::TwoConv1x1) m.net.add(std::make_unique<PoolingNetwork>(b.width, hidden, rng));
        break;
      case BlockKind::Prcn:
        m.net.add(std::make_unique<PrcnLayer>(detail::prcn_config(b, ch), rng));
        break;
    }
    if (b.batchnorm) m.net.add(std::make_unique<BatchNorm>(b.width));
    if (b.act == Activation::PRelu) m.net.add(std::make_unique<PRelu>(b.width));
    if (b.act == Activation::Relu) m.net.add(std::make_unique<Relu>());
    if (b.spatial_pool) m.net.add(std::make_unique<MaxPool2d>(b.spatial_pool));
    ch = b.width;
  }
  m.net.add(std::make_unique<GlobalAvgPool>());
  for (std::size_t hdim : s.fc_hidden) {
    m.net.add(std::make_unique<Linear>(ch, hdim, rng));
    m.net.add(std::make_unique<Relu>());
    ch = hdim;
  }
  m.net.add(std::make_unique<Linear>(ch, s.classes, rng));
  return m;
}

// ---- Catalog

namespace presets {

inline BlockSpec mnist_block(BlockKind kind, std::size_t width) {
  BlockSpec b;
  b.kind = kind;
  b.width = width;
  b.k = 5;
  b.pad = 2;
  b.spatial_pool = 3;
  b.act = Activation::PRelu;
  return b;
}

// Two blocks: layer 1 of `width1` channels, layer 2 of exactly 16.
inline ArchSpec mnist_convnet(std::size_t width1, bool pooling_networks = false) {
  ArchSpec s;
  s.name = pooling_networks ? "convnet" + std::to_string(width1) + "_fc" : "convnet" + std::to_string(width1);
  s.blocks = {mnist_block(BlockKind::Conv, width1), mnist_block(BlockKind::Conv, 16)};
  if (pooling_networks)
    for (auto& b : s.blocks) {
      b.pool_net = PoolNetKind::TwoConv1x1;
      b.pool_net_hidden = 36;
    }
  return s;
}

inline ArchSpec mnist_nptn(std::size_t width1, std::size_t G) {
  ArchSpec s;
  s.name = "nptn(" + std::to_string(width1) + "," + std::to_string(G) + ")";
  s.blocks = {mnist_block(BlockKind::Nptn, width1), mnist_block(BlockKind::Nptn, 16)};
  for (auto& b : s.blocks) b.G = G;
  return s;
}

// Mode-B PRC-NPTN with CMP = G.
inline ArchSpec mnist_prcn(std::size_t width1, std::size_t G, bool randomized = true, bool pooling_networks = false) {
  ArchSpec s;
  s.name = "prcn(" + std::to_string(width1) + "," + std::to_string(G) + (randomized ? "" : ",norand") +
           (pooling_networks ? ",pn" : "") + ")";
  s.blocks = {mnist_block(BlockKind::Prcn, width1), mnist_block(BlockKind::Prcn, 16)};
  for (auto& b : s.blocks) {
    b.G = G;
    b.cmp = G;
    b.mode = PrcnMode::B;
    b.randomized = randomized;
    b.pool_net = pooling_networks ? PoolNetKind::TwoConv1x1 : PoolNetKind::None;
  }
  return s;
}

inline BlockSpec eth_block(BlockKind kind, std::size_t width, bool pool) {
  BlockSpec b;
  b.kind = kind;
  b.width = width;
  b.k = 3;
  b.pad = 1;
  b.act = Activation::Relu;
  b.spatial_pool = pool ? 2 : 0;
  return b;
}

// ETH-80 families on 3 x 50 x 50 inputs, 8 classes. PRC layers are mode A
// with the channel average replaced by a 1x1 conv.
inline ArchSpec eth(const std::string& variant) {
  ArchSpec s;
  s.name = "eth_" + variant;
  s.in_channels = 3;
  s.in_h = s.in_w = 50;
  s.classes = 8;
  const bool family_b = variant.find("_b") != std::string::npos;
  std::vector<std::size_t> widths = family_b ? std::vector<std::size_t>{12, 24, 48, 48}
                                             : std::vector<std::size_t>{12, 24, 48, 64, 128};
  BlockKind rest = BlockKind::Conv;
  std::size_t G = 1, cmp = 1;
  if (variant.starts_with("prcn")) {
    rest = BlockKind::Prcn;
    G = 8;
    cmp = 2;
  } else if (variant.starts_with("nptn_large")) {
    rest = BlockKind::Nptn;
    G = 3;
  } else if (variant.starts_with("nptn_small")) {
    rest = BlockKind::Nptn;
    G = 3;
    widths = {12, 8, 24, 48};
  } else if (!variant.starts_with("convnet")) {
    throw ConfigError("unknown ETH preset '" + variant + "'");
  }
  const bool one_by_one = variant.ends_with("_1x1");
  for (std::size_t i = 0; i < widths.size(); ++i) {
    auto b = eth_block(i == 0 ? BlockKind::Conv : rest, widths[i], i + 1 < widths.size());
    b.G = G;
    b.cmp = cmp;
    b.mode = PrcnMode::A;
    if (b.kind == BlockKind::Prcn) b.pool_net = PoolNetKind::Conv1x1ReplaceAvg;
    if (one_by_one && i > 0 && b.kind == BlockKind::Conv) b.pool_net = PoolNetKind::TwoConv1x1;
    s.blocks.push_back(b);
  }
  if (family_b) s.fc_hidden = {300, 200};
  return s;
}

inline std::vector<std::string> names() {
  return {"convnet36",          "convnet36_fc",       "convnet512",        "nptn(36,1)",     "nptn(18,2)",
          "nptn(12,3)",         "nptn(9,4)",          "prcn(36,1)",        "prcn(18,2)",     "prcn(12,3)",
          "prcn(9,4)",          "prcn(18,2,norand)",  "prcn(12,3,norand)", "eth_convnet_b",  "eth_convnet_b_1x1",
          "eth_nptn_large_b",   "eth_nptn_small_b",   "eth_prcn_b",        "eth_convnet_c",  "eth_convnet_c_1x1",
          "eth_prcn_c"};
}

// Resolves a preset name: convnet36, convnet36_fc, convnet512,
// nptn(ch,G), prcn(ch,G[,cmp=N][,norand][,pn]), eth_<variant>.
inline ArchSpec by_name(const std::string& name) {
  if (name == "convnet36") return mnist_convnet(36);
  if (name == "convnet36_fc") return mnist_convnet(36, true);
  if (name == "convnet512") return mnist_convnet(512);
  if (name.starts_with("eth_")) return eth(name.substr(4));
  static const std::regex re(R"((nptn|prcn)\((\d+),(\d+)((?:,[a-z]+(?:=\d+)?)*)\))");
  std::smatch m;
  if (!std::regex_match(name, m, re)) throw ConfigError("unknown model preset '" + name + "'");
  const std::size_t width = std::stoul(m[2]), G = std::stoul(m[3]);
  if (m[1] == "nptn") {
    if (m[4].length()) throw ConfigError("nptn presets take no options: '" + name + "'");
    return mnist_nptn(width, G);
  }
  bool randomized = true, pn = false;
  std::size_t cmp = G;
  std::string opts = m[4];
  static const std::regex opt_re(R"(,([a-z]+)(?:=(\d+))?)");
  for (std::sregex_iterator it(opts.begin(), opts.end(), opt_re), end; it != end; ++it) {
    const std::string key = (*it)[1];
    if (key == "norand") randomized = false;
    else if (key == "pn") pn = true;
    else if (key == "cmp" && (*it)[2].matched) cmp = std::stoul((*it)[2]);
    else throw ConfigError("unknown prcn option '" + key + "' in '" + name + "'");
  }
  auto s = mnist_prcn(width, G, randomized, pn);
  s.name = name;
  if (cmp != G) {
    // CMP other than G requires the grouped (mode A) layout.
    for (auto& b : s.blocks) {
      b.cmp = cmp;
      b.mode = PrcnMode::A;
    }
  }
  return s;
}

}  // namespace presets

}  // namespace prcn
