#pragma once

#include <cmath>
#include <string>

#include "prcn/gemm.hpp"
#include "prcn/layers/module.hpp"
#include "prcn/rng.hpp"

namespace prcn {

// Fully connected layer on flattened (C*H*W) features; output (N, out, 1, 1).
// weight is (1, 1, out, in), bias (1, out, 1, 1).
inline Tensor linear_forward(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  const std::size_t in = x.c() * x.h() * x.w(), out = weight.h();
  if (weight.w() != in)
    throw ShapeError("linear: input features " + std::to_string(in) + " vs weight " + std::to_string(weight.w()));
  Tensor y(x.n(), out, 1, 1);
  gemm_raw<double>(false, true, x.n(), out, in, 1.0, x.data(), in, weight.data(), in, 0.0, y.data(), out);
  for (std::size_t n = 0; n < x.n(); ++n)
    for (std::size_t o = 0; o < out; ++o) y[n * out + o] += bias[o];
  return y;
}

struct LinearGrads {
  Tensor grad_x, grad_w, grad_b;
};

inline LinearGrads linear_backward(const Tensor& grad_out, const Tensor& x, const Tensor& weight) {
  const std::size_t in = x.c() * x.h() * x.w(), out = weight.h();
  require_shape(grad_out, Shape{x.n(), out, 1, 1}, "linear_backward grad_out");
  LinearGrads g{Tensor(x.shape()), Tensor(weight.shape()), Tensor(1, out, 1, 1)};
  gemm_raw<double>(false, false, x.n(), in, out, 1.0, grad_out.data(), out, weight.data(), in, 0.0,
                   g.grad_x.data(), in);
  gemm_raw<double>(true, false, out, in, x.n(), 1.0, grad_out.data(), out, x.data(), in, 0.0, g.grad_w.data(), in);
  for (std::size_t n = 0; n < x.n(); ++n)
    for (std::size_t o = 0; o < out; ++o) g.grad_b[o] += grad_out[n * out + o];
  return g;
}

class Linear : public Layer {
 public:
  // He fan-in uniform weights, zero bias.
  Linear(std::size_t in, std::size_t out, Rng& rng) : weight_("weight", Tensor(1, 1, out, in)), bias_("bias", Tensor(1, out, 1, 1)) {
    const double bound = std::sqrt(6.0 / static_cast<double>(in));
    for (std::size_t i = 0; i < weight_.value.size(); ++i) weight_.value[i] = rng.uniform(-bound, bound);
  }

  std::string kind() const override { return "linear"; }
  std::size_t in_features() const { return weight_.value.w(); }
  std::size_t out_features() const { return weight_.value.h(); }

  Tensor forward(const Tensor& x, Mode) override {
    input_ = x;
    cached_ = true;
    return linear_forward(x, weight_.value, bias_.value);
  }

  Tensor backward(const Tensor& grad_out) override {
    if (!cached_) throw StaleCacheError("linear backward without a matching forward");
    auto g = linear_backward(grad_out, input_, weight_.value);
    weight_.grad += g.grad_w;
    bias_.grad += g.grad_b;
    cached_ = false;
    return std::move(g.grad_x);
  }

  std::vector<Param*> params() override { return {&weight_, &bias_}; }

 private:
  Param weight_, bias_;
  Tensor input_;
  bool cached_ = false;
};

}  // namespace prcn
