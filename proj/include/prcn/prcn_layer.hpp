#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "prcn/connectome.hpp"
#include "prcn/layers/conv.hpp"
#include "prcn/layers/pooling_network.hpp"
#include "prcn/pool_kernel.hpp"

namespace prcn {

// A: grouped expansion (groups = inch, E = inch*G), CMP, then channel average
//    down to outch.
// B: full expansion (groups = 1, E = G*outch), CMP with cmp == G, no average.
enum class PrcnMode { A, B };

enum class PoolNetKind { None, TwoConv1x1, Conv1x1ReplaceAvg };

inline std::string to_string(PrcnMode m) { return m == PrcnMode::A ? "A" : "B"; }
inline std::string to_string(PoolNetKind k) {
  switch (k) {
    case PoolNetKind::None: return "none";
    case PoolNetKind::TwoConv1x1: return "two_1x1";
    case PoolNetKind::Conv1x1ReplaceAvg: return "conv1x1_replace_avg";
  }
  return "none";
}
inline PoolNetKind pool_net_from_string(const std::string& s) {
  if (s == "none") return PoolNetKind::None;
  if (s == "two_1x1") return PoolNetKind::TwoConv1x1;
  if (s == "conv1x1_replace_avg") return PoolNetKind::Conv1x1ReplaceAvg;
  throw ConfigError("unknown pool_net '" + s + "'");
}

struct PrcnLayerConfig {
  std::size_t inch = 1, outch = 1, G = 1, cmp = 1, k = 3, pad = 0, stride = 1;
  PrcnMode mode = PrcnMode::A;
  bool randomized = true;
  PoolNetKind pool_net = PoolNetKind::None;
  std::size_t pool_net_hidden = 0;  // 0: same as outch

  std::size_t expansion() const { return mode == PrcnMode::A ? inch * G : G * outch; }
  std::size_t slots() const { return expansion() / cmp; }
  // Channel-average window; 1 when there is no average stage.
  std::size_t avg() const {
    if (mode == PrcnMode::B || pool_net == PoolNetKind::Conv1x1ReplaceAvg) return 1;
    return slots() / outch;
  }
  std::size_t groups() const { return mode == PrcnMode::A ? inch : 1; }

  void validate() const {
    if (inch == 0 || outch == 0 || G == 0 || cmp == 0 || k == 0 || stride == 0)
      throw ConfigError("prcn: all sizes must be >= 1");
    const std::size_t E = expansion();
    if (cmp > E || E % cmp != 0)
      throw ConfigError("prcn: CMP " + std::to_string(cmp) + " must divide expansion " + std::to_string(E));
    if (mode == PrcnMode::B) {
      if (cmp != G) throw ConfigError("prcn mode B requires cmp == G");
      if (pool_net == PoolNetKind::Conv1x1ReplaceAvg)
        throw ConfigError("prcn mode B has no average stage to replace");
    } else if (pool_net != PoolNetKind::Conv1x1ReplaceAvg) {
      if (slots() % outch != 0 || slots() < outch)
        throw ConfigError("prcn mode A: (inch*G)/(cmp*outch) = " + std::to_string(E) + "/" +
                          std::to_string(cmp * outch) + " must be a positive integer");
    }
  }
};

// Mean over consecutive groups of `window` channels: out c = mean(in[c*window .. (c+1)*window)).
inline Tensor channel_avgpool_forward(const Tensor& x, std::size_t window) {
  if (window == 0 || x.c() % window != 0) throw ShapeError("channel avgpool: window must divide channels");
  Tensor y(x.n(), x.c() / window, x.h(), x.w());
  const std::size_t P = x.h() * x.w();
  for (std::size_t n = 0; n < x.n(); ++n)
    for (std::size_t c = 0; c < y.c(); ++c) {
      double* o = y.plane(n, c);
      for (std::size_t a = 0; a < window; ++a) {
        const double* p = x.plane(n, c * window + a);
        for (std::size_t i = 0; i < P; ++i) o[i] += p[i];
      }
      for (std::size_t i = 0; i < P; ++i) o[i] /= static_cast<double>(window);
    }
  return y;
}

inline Tensor channel_avgpool_backward(const Tensor& grad_out, std::size_t window) {
  Tensor dx(grad_out.n(), grad_out.c() * window, grad_out.h(), grad_out.w());
  const std::size_t P = grad_out.h() * grad_out.w();
  for (std::size_t n = 0; n < grad_out.n(); ++n)
    for (std::size_t c = 0; c < grad_out.c(); ++c) {
      const double* g = grad_out.plane(n, c);
      for (std::size_t a = 0; a < window; ++a) {
        double* d = dx.plane(n, c * window + a);
        for (std::size_t i = 0; i < P; ++i) d[i] = g[i] / static_cast<double>(window);
      }
    }
  return dx;
}

// Expansion conv -> permanent random shuffle + channel max pool -> channel
// average (mode A) -> optional pooling network.
//
// Construction draws from `rng` in this order: expansion weights, one draw
// for the connectome seed, then pooling-network weights.
class PrcnLayer : public Layer {
 public:
  PrcnLayer(const PrcnLayerConfig& cfg, Rng& rng)
      : cfg_((cfg.validate(), cfg)),
        expand_(make_conv(ConvGeometry{cfg.inch, cfg.expansion(), cfg.k, cfg.stride, cfg.pad, cfg.groups()}, rng)),
        connectome_(Connectome::build(rng, cfg.expansion(), cfg.cmp, cfg.randomized)) {
    const std::size_t hidden = cfg.pool_net_hidden ? cfg.pool_net_hidden : cfg.outch;
    if (cfg.pool_net == PoolNetKind::TwoConv1x1) {
      pool_net_ = std::make_unique<PoolingNetwork>(cfg.outch, hidden, rng);
    } else if (cfg.pool_net == PoolNetKind::Conv1x1ReplaceAvg) {
      replace_avg_ = std::make_unique<Conv2d>(make_conv(ConvGeometry{cfg.slots(), cfg.outch, 1, 1, 0, 1}, rng));
    }
  }

  std::string kind() const override { return "prcn"; }
  const PrcnLayerConfig& config() const { return cfg_; }
  const Connectome& connectome() const { return connectome_; }
  Conv2d& expansion_conv() { return expand_; }

  Tensor forward(const Tensor& x, Mode mode) override {
    if (x.c() != cfg_.inch)
      throw ShapeError("prcn: input has " + std::to_string(x.c()) + " channels, expected " +
                       std::to_string(cfg_.inch));
    expanded_ = expand_.forward(x, mode);
    const auto plan = PoolPlan::from(connectome_);
    auto pooled = indirect_cmp_forward(expanded_, plan);
    argmax_ = std::move(pooled.argmax);
    pooled_ = std::move(pooled.out);
    cached_ = true;
    Tensor y = replace_avg_ ? replace_avg_->forward(pooled_, mode) : channel_avgpool_forward(pooled_, cfg_.avg());
    if (pool_net_) y = pool_net_->forward(y, mode);
    return y;
  }

  Tensor backward(const Tensor& grad_out) override {
    if (!cached_) throw StaleCacheError("prcn backward without a matching forward");
    Tensor g = pool_net_ ? pool_net_->backward(grad_out) : grad_out;
    g = replace_avg_ ? replace_avg_->backward(g) : channel_avgpool_backward(g, cfg_.avg());
    const auto plan = PoolPlan::from(connectome_);
    Tensor g_expanded = indirect_cmp_backward(g, argmax_, plan);
    cached_ = false;
    return expand_.backward(g_expanded);
  }

  std::vector<Param*> params() override {
    auto p = expand_.params();
    if (replace_avg_)
      for (auto* q : replace_avg_->params()) p.push_back(q);
    if (pool_net_)
      for (auto* q : pool_net_->params()) p.push_back(q);
    return p;
  }

  std::vector<const Connectome*> connectomes() const override { return {&connectome_}; }
  void set_connectomes(const std::vector<Connectome>& cs) override {
    if (cs.size() != 1) throw ConfigError("prcn layer expects exactly one connectome");
    if (cs[0].expansion() != connectome_.expansion() || cs[0].cmp() != connectome_.cmp())
      throw ConfigError("prcn layer: connectome geometry mismatch");
    connectome_ = cs[0];
    cached_ = false;
  }

  // Activations of the most recent forward, for invariance probing.
  const Tensor& last_expanded() const { return expanded_; }
  const Tensor& last_pooled() const { return pooled_; }

 private:
  PrcnLayerConfig cfg_;
  Conv2d expand_;
  Connectome connectome_;
  std::unique_ptr<PoolingNetwork> pool_net_;
  std::unique_ptr<Conv2d> replace_avg_;
  Tensor expanded_, pooled_;
  ArgmaxMap argmax_;
  bool cached_ = false;
};

inline Tensor prcn_forward(const Tensor& x, PrcnLayer& layer, Mode mode = Mode::Train) {
  return layer.forward(x, mode);
}

// ---- NPTN: each (input i, output o) pair owns a bank of G filters; the node
// output is sum_i max_g conv(x_i, w_{i,o,g}). Filter (i, o, g) is stored at
// weight index (i*outch + o)*G + g, shape (inch*outch*G, 1, k, k).

struct NptnConfig {
  std::size_t inch = 1, outch = 1, G = 1, k = 3, pad = 0, stride = 1;
  ConvGeometry geometry() const { return ConvGeometry{inch, inch * outch * G, k, stride, pad, inch}; }
};

namespace detail {
inline std::vector<std::uint32_t> identity_perm(std::size_t n) {
  std::vector<std::uint32_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = static_cast<std::uint32_t>(i);
  return p;
}

// Sum over input-channel blocks: in channel (i*outch + o) -> out channel o.
inline Tensor sum_input_blocks(const Tensor& x, std::size_t inch, std::size_t outch) {
  Tensor y(x.n(), outch, x.h(), x.w());
  const std::size_t P = x.h() * x.w();
  for (std::size_t n = 0; n < x.n(); ++n)
    for (std::size_t i = 0; i < inch; ++i)
      for (std::size_t o = 0; o < outch; ++o) {
        const double* src = x.plane(n, i * outch + o);
        double* dst = y.plane(n, o);
        for (std::size_t p = 0; p < P; ++p) dst[p] += src[p];
      }
  return y;
}
}  // namespace detail

inline Tensor nptn_reference_forward(const Tensor& x, const NptnConfig& cfg, const Tensor& weight) {
  const ConvGeometry geo = cfg.geometry();
  const Tensor expanded = conv_forward(x, geo, weight, nullptr);
  const auto perm = detail::identity_perm(geo.outch);
  const PoolPlan plan{geo.outch, cfg.G, perm};
  return detail::sum_input_blocks(naive_cmp_forward(expanded, plan).out, cfg.inch, cfg.outch);
}

class NptnLayer : public Layer {
 public:
  NptnLayer(const NptnConfig& cfg, Rng& rng)
      : cfg_(cfg), expand_(make_conv(cfg.geometry(), rng)), perm_(detail::identity_perm(cfg.geometry().outch)) {}

  std::string kind() const override { return "nptn"; }
  const NptnConfig& config() const { return cfg_; }

  Tensor forward(const Tensor& x, Mode mode) override {
    const Tensor expanded = expand_.forward(x, mode);
    auto pooled = indirect_cmp_forward(expanded, plan());
    argmax_ = std::move(pooled.argmax);
    cached_ = true;
    return detail::sum_input_blocks(pooled.out, cfg_.inch, cfg_.outch);
  }

  Tensor backward(const Tensor& grad_out) override {
    if (!cached_) throw StaleCacheError("nptn backward without a matching forward");
    require_shape(grad_out, Shape{grad_out.n(), cfg_.outch, grad_out.h(), grad_out.w()}, "nptn grad_out");
    Tensor g(grad_out.n(), cfg_.inch * cfg_.outch, grad_out.h(), grad_out.w());
    const std::size_t P = grad_out.h() * grad_out.w();
    for (std::size_t n = 0; n < g.n(); ++n)
      for (std::size_t i = 0; i < cfg_.inch; ++i)
        for (std::size_t o = 0; o < cfg_.outch; ++o) std::copy_n(grad_out.plane(n, o), P, g.plane(n, i * cfg_.outch + o));
    cached_ = false;
    return expand_.backward(indirect_cmp_backward(g, argmax_, plan()));
  }

  std::vector<Param*> params() override { return expand_.params(); }

 private:
  PoolPlan plan() const { return PoolPlan{perm_.size(), cfg_.G, perm_}; }

  NptnConfig cfg_;
  Conv2d expand_;
  std::vector<std::uint32_t> perm_;
  ArgmaxMap argmax_;
  bool cached_ = false;
};

}  // namespace prcn
