#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "prcn/gemm.hpp"
#include "prcn/layers/module.hpp"
#include "prcn/rng.hpp"
#include "prcn/tensor.hpp"

namespace prcn {

struct ConvGeometry {
  std::size_t inch = 1, outch = 1, k = 1, stride = 1, pad = 0, groups = 1;

  std::size_t in_per_group() const { return inch / groups; }
  std::size_t out_per_group() const { return outch / groups; }
  std::size_t fan_in() const { return in_per_group() * k * k; }
  Shape weight_shape() const { return {outch, inch / groups, k, k}; }

  void validate() const {
    if (groups == 0 || inch % groups != 0 || outch % groups != 0)
      throw ConfigError("conv: inch " + std::to_string(inch) + " and outch " + std::to_string(outch) +
                        " must be divisible by groups " + std::to_string(groups));
    if (k == 0 || stride == 0) throw ConfigError("conv: kernel and stride must be >= 1");
  }
};

// Grouped 2-D convolution. weight is (outch, inch/groups, k, k); output
// channels of group g are [g*outch/groups, (g+1)*outch/groups).
struct ConvParams : ConvGeometry {
  Tensor weight;
  std::optional<Tensor> bias;
};

// He fan-in uniform: U(-b, b), b = sqrt(6 / fan_in). Draws outch*fan_in
// uniforms in weight storage order; bias starts at zero.
inline ConvParams make_conv(const ConvGeometry& geo, Rng& rng, bool bias = false) {
  geo.validate();
  ConvParams p{geo, Tensor(geo.weight_shape()), std::nullopt};
  const double bound = std::sqrt(6.0 / static_cast<double>(geo.fan_in()));
  for (std::size_t i = 0; i < p.weight.size(); ++i) p.weight[i] = rng.uniform(-bound, bound);
  if (bias) p.bias = Tensor(1, geo.outch, 1, 1);
  return p;
}

namespace detail {

inline void check_conv_input(const Tensor& x, const ConvGeometry& g, const Tensor& w, const Tensor* b) {
  g.validate();
  require_shape(w, g.weight_shape(), "conv weight");
  if (b) require_shape(*b, Shape{1, g.outch, 1, 1}, "conv bias");
  if (x.c() != g.inch)
    throw ShapeError("conv: input has " + std::to_string(x.c()) + " channels, expected " + std::to_string(g.inch));
}

}  // namespace detail

// Samples per GEMM: enough columns to keep BLAS efficient while the patch
// matrix stays around 4 MB.
inline std::size_t conv_chunk(std::size_t rows, std::size_t per_sample, std::size_t batch) {
  const std::size_t budget = std::size_t{1} << 19;
  return std::clamp<std::size_t>(budget / std::max<std::size_t>(rows * per_sample, 1), 1, batch);
}

inline Tensor conv_forward(const Tensor& x, const ConvGeometry& g, const Tensor& w, const Tensor* b) {
  detail::check_conv_input(x, g, w, b);
  const std::size_t oh = conv_out_dim(x.h(), g.k, g.stride, g.pad);
  const std::size_t ow = conv_out_dim(x.w(), g.k, g.stride, g.pad);
  const std::size_t P = oh * ow, cin = g.in_per_group(), cout = g.out_per_group(), K = cin * g.k * g.k;
  const std::size_t S = conv_chunk(K, P, x.n());
  Tensor y(x.n(), g.outch, oh, ow);
  std::vector<double> col(K * S * P), out(cout * S * P);
  for (std::size_t n0 = 0; n0 < x.n(); n0 += S) {
    const std::size_t s_n = std::min(S, x.n() - n0), ld = s_n * P;
    for (std::size_t gr = 0; gr < g.groups; ++gr) {
      for (std::size_t s = 0; s < s_n; ++s) im2col_sample(x, n0 + s, gr * cin, cin, g.k, g.stride, g.pad, col.data() + s * P, ld);
      gemm_raw<double>(false, false, cout, ld, K, 1.0, w.data() + gr * cout * K, K, col.data(), ld, 0.0, out.data(), ld);
      for (std::size_t s = 0; s < s_n; ++s)
        for (std::size_t o = 0; o < cout; ++o) {
          double* dst = y.plane(n0 + s, gr * cout + o);
          const double* src = out.data() + o * ld + s * P;
          const double bias = b ? (*b)[gr * cout + o] : 0.0;
          for (std::size_t i = 0; i < P; ++i) dst[i] = src[i] + bias;
        }
    }
  }
  return y;
}

inline Tensor conv_forward(const Tensor& x, const ConvParams& p) {
  return conv_forward(x, p, p.weight, p.bias ? &*p.bias : nullptr);
}

struct ConvGrads {
  Tensor grad_x;
  Tensor grad_w;
  std::optional<Tensor> grad_b;
};

inline ConvGrads conv_backward(const Tensor& grad_out, const Tensor& x, const ConvGeometry& g, const Tensor& w,
                               bool has_bias) {
  detail::check_conv_input(x, g, w, nullptr);
  const std::size_t oh = conv_out_dim(x.h(), g.k, g.stride, g.pad);
  const std::size_t ow = conv_out_dim(x.w(), g.k, g.stride, g.pad);
  require_shape(grad_out, Shape{x.n(), g.outch, oh, ow}, "conv_backward grad_out");
  const std::size_t P = oh * ow, cin = g.in_per_group(), cout = g.out_per_group(), K = cin * g.k * g.k;
  const std::size_t S = conv_chunk(K, P, x.n());

  ConvGrads out{Tensor(x.shape()), Tensor(w.shape()), std::nullopt};
  if (has_bias) out.grad_b = Tensor(1, g.outch, 1, 1);
  std::vector<double> col(K * S * P), dcol(K * S * P), dy(cout * S * P);
  for (std::size_t n0 = 0; n0 < x.n(); n0 += S) {
    const std::size_t s_n = std::min(S, x.n() - n0), ld = s_n * P;
    for (std::size_t gr = 0; gr < g.groups; ++gr) {
      for (std::size_t s = 0; s < s_n; ++s) {
        im2col_sample(x, n0 + s, gr * cin, cin, g.k, g.stride, g.pad, col.data() + s * P, ld);
        for (std::size_t o = 0; o < cout; ++o)
          std::copy_n(grad_out.plane(n0 + s, gr * cout + o), P, dy.data() + o * ld + s * P);
      }
      // dW_g += dY_g col^T ; dcol = W_g^T dY_g
      gemm_raw<double>(false, true, cout, K, ld, 1.0, dy.data(), ld, col.data(), ld, 1.0,
                       out.grad_w.data() + gr * cout * K, K);
      gemm_raw<double>(true, false, K, ld, cout, 1.0, w.data() + gr * cout * K, K, dy.data(), ld, 0.0, dcol.data(), ld);
      for (std::size_t s = 0; s < s_n; ++s)
        col2im_sample(dcol.data() + s * P, n0 + s, gr * cin, cin, g.k, g.stride, g.pad, out.grad_x, ld);
    }
  }
  if (out.grad_b) {
    for (std::size_t n = 0; n < x.n(); ++n)
      for (std::size_t c = 0; c < g.outch; ++c) {
        const double* d = grad_out.plane(n, c);
        double sum = 0.0;
        for (std::size_t i = 0; i < P; ++i) sum += d[i];
        (*out.grad_b)[c] += sum;
      }
  }
  return out;
}

inline ConvGrads conv_backward(const Tensor& grad_out, const Tensor& x, const ConvParams& p) {
  return conv_backward(grad_out, x, p, p.weight, p.bias.has_value());
}

class Conv2d : public Layer {
 public:
  explicit Conv2d(ConvParams p) : geo_(p), weight_("weight", std::move(p.weight)) {
    if (p.bias) bias_.emplace("bias", std::move(*p.bias));
    require_shape(weight_.value, geo_.weight_shape(), "Conv2d weight");
  }

  std::string kind() const override { return "conv"; }
  const ConvGeometry& geometry() const { return geo_; }

  Tensor forward(const Tensor& x, Mode) override {
    input_ = x;
    cached_ = true;
    return conv_forward(x, geo_, weight_.value, bias_ ? &bias_->value : nullptr);
  }

  Tensor backward(const Tensor& grad_out) override {
    if (!cached_) throw StaleCacheError("conv backward without a matching forward");
    auto g = conv_backward(grad_out, input_, geo_, weight_.value, bias_.has_value());
    weight_.grad += g.grad_w;
    if (bias_) bias_->grad += *g.grad_b;
    cached_ = false;
    return std::move(g.grad_x);
  }

  std::vector<Param*> params() override {
    std::vector<Param*> out{&weight_};
    if (bias_) out.push_back(&*bias_);
    return out;
  }

 private:
  ConvGeometry geo_;
  Param weight_;
  std::optional<Param> bias_;
  Tensor input_;
  bool cached_ = false;
};

}  // namespace prcn
