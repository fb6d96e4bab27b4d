#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <string>

#include "prcn/layers/module.hpp"

namespace prcn {

namespace detail {
// Bitwise select. Activation signs are data dependent, and the branchy
// code compilers emit for ?: mispredicts on about half the elements.
inline double select(bool c, double if_true, double if_false) {
  const std::uint64_t m = std::uint64_t{0} - static_cast<std::uint64_t>(c);
  return std::bit_cast<double>((std::bit_cast<std::uint64_t>(if_true) & m) | (std::bit_cast<std::uint64_t>(if_false) & ~m));
}
}  // namespace detail

// y = x for x > 0, a_c * x otherwise; one slope per channel.
struct PReluParams {
  Tensor slope;  // (1, C, 1, 1)
  explicit PReluParams(std::size_t channels = 1, double init = 0.25) : slope(1, channels, 1, 1, init) {}
};

inline Tensor prelu_forward(const Tensor& x, const Tensor& slope) {
  if (slope.c() != x.c()) throw ShapeError("prelu: channel mismatch");
  Tensor y(x.shape());
  const std::size_t P = x.h() * x.w();
  for (std::size_t n = 0; n < x.n(); ++n)
    for (std::size_t c = 0; c < x.c(); ++c) {
      const double a = slope[c];
      const double* p = x.plane(n, c);
      double* o = y.plane(n, c);
      for (std::size_t i = 0; i < P; ++i) o[i] = detail::select(p[i] > 0.0, p[i], a * p[i]);
    }
  return y;
}

struct PReluGrads {
  Tensor grad_x, grad_slope;
};

inline PReluGrads prelu_backward(const Tensor& grad_out, const Tensor& x, const Tensor& slope) {
  require_shape(grad_out, x.shape(), "prelu_backward grad_out");
  PReluGrads g{Tensor(x.shape()), Tensor(slope.shape())};
  const std::size_t P = x.h() * x.w();
  for (std::size_t n = 0; n < x.n(); ++n)
    for (std::size_t c = 0; c < x.c(); ++c) {
      const double a = slope[c];
      const double* p = x.plane(n, c);
      const double* dy = grad_out.plane(n, c);
      double* dx = g.grad_x.plane(n, c);
      double ds = 0.0;
      for (std::size_t i = 0; i < P; ++i) {
        const bool pos = p[i] > 0.0;
        dx[i] = detail::select(pos, dy[i], a * dy[i]);
        ds += detail::select(pos, 0.0, dy[i] * p[i]);
      }
      g.grad_slope[c] += ds;
    }
  return g;
}

class PRelu : public Layer {
 public:
  explicit PRelu(std::size_t channels, double init = 0.25) : slope_("slope", PReluParams(channels, init).slope) {}

  std::string kind() const override { return "prelu"; }

  Tensor forward(const Tensor& x, Mode) override {
    input_ = x;
    cached_ = true;
    return prelu_forward(x, slope_.value);
  }

  Tensor backward(const Tensor& grad_out) override {
    if (!cached_) throw StaleCacheError("prelu backward without a matching forward");
    auto g = prelu_backward(grad_out, input_, slope_.value);
    slope_.grad += g.grad_slope;
    cached_ = false;
    return std::move(g.grad_x);
  }

  std::vector<Param*> params() override { return {&slope_}; }

 private:
  Param slope_;
  Tensor input_;
  bool cached_ = false;
};

class Relu : public Layer {
 public:
  std::string kind() const override { return "relu"; }

  Tensor forward(const Tensor& x, Mode) override {
    input_ = x;
    cached_ = true;
    Tensor y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = detail::select(x[i] > 0.0, x[i], 0.0);
    return y;
  }

  Tensor backward(const Tensor& grad_out) override {
    if (!cached_) throw StaleCacheError("relu backward without a matching forward");
    require_shape(grad_out, input_.shape(), "relu grad_out");
    Tensor dx(grad_out.shape());
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = detail::select(input_[i] > 0.0, grad_out[i], 0.0);
    cached_ = false;
    return dx;
  }

 private:
  Tensor input_;
  bool cached_ = false;
};

}  // namespace prcn
