#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "prcn/layers/module.hpp"

namespace prcn {

// Non-overlapping spatial max pool, window == stride. Output extent is
// floor(in / window); trailing rows/cols that do not fill a window are dropped.
struct MaxPoolResult {
  Tensor out;
  std::vector<std::uint32_t> argmax;  // flat input index per output cell
};

inline MaxPoolResult spatial_maxpool_forward(const Tensor& x, std::size_t window) {
  if (window == 0) throw ConfigError("maxpool window must be >= 1");
  if (x.h() < window || x.w() < window)
    throw ShapeError("maxpool window " + std::to_string(window) + " exceeds input " + x.shape().str());
  const std::size_t oh = x.h() / window, ow = x.w() / window;
  MaxPoolResult r{Tensor(x.n(), x.c(), oh, ow), std::vector<std::uint32_t>(x.n() * x.c() * oh * ow)};
  std::size_t o = 0;
  for (std::size_t n = 0; n < x.n(); ++n)
    for (std::size_t c = 0; c < x.c(); ++c)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox, ++o) {
          // First maximum in row-major scan wins ties.
          std::size_t best = x.index(n, c, oy * window, ox * window);
          for (std::size_t dy = 0; dy < window; ++dy)
            for (std::size_t dx = 0; dx < window; ++dx) {
              const std::size_t i = x.index(n, c, oy * window + dy, ox * window + dx);
              best = x[i] > x[best] ? i : best;
            }
          r.out[o] = x[best];
          r.argmax[o] = static_cast<std::uint32_t>(best);
        }
  return r;
}

inline Tensor spatial_maxpool_backward(const Tensor& grad_out, const std::vector<std::uint32_t>& argmax,
                                       const Shape& input_shape) {
  if (grad_out.size() != argmax.size()) throw ShapeError("maxpool backward: argmax/grad size mismatch");
  Tensor dx(input_shape);
  for (std::size_t o = 0; o < argmax.size(); ++o) dx[argmax[o]] += grad_out[o];
  return dx;
}

class MaxPool2d : public Layer {
 public:
  explicit MaxPool2d(std::size_t window) : window_(window) {}
  std::string kind() const override { return "maxpool"; }
  std::size_t window() const { return window_; }

  Tensor forward(const Tensor& x, Mode) override {
    auto r = spatial_maxpool_forward(x, window_);
    in_shape_ = x.shape();
    argmax_ = std::move(r.argmax);
    out_shape_ = r.out.shape();
    cached_ = true;
    return std::move(r.out);
  }

  Tensor backward(const Tensor& grad_out) override {
    if (!cached_) throw StaleCacheError("maxpool backward without a matching forward");
    require_shape(grad_out, out_shape_, "maxpool grad_out");
    cached_ = false;
    return spatial_maxpool_backward(grad_out, argmax_, in_shape_);
  }

 private:
  std::size_t window_;
  Shape in_shape_, out_shape_;
  std::vector<std::uint32_t> argmax_;
  bool cached_ = false;
};

inline Tensor global_avgpool_forward(const Tensor& x) {
  Tensor y(x.n(), x.c(), 1, 1);
  const std::size_t P = x.h() * x.w();
  for (std::size_t n = 0; n < x.n(); ++n)
    for (std::size_t c = 0; c < x.c(); ++c) {
      const double* p = x.plane(n, c);
      double s = 0.0;
      for (std::size_t i = 0; i < P; ++i) s += p[i];
      y.at(n, c, 0, 0) = s / static_cast<double>(P);
    }
  return y;
}

inline Tensor global_avgpool_backward(const Tensor& grad_out, const Shape& input_shape) {
  require_shape(grad_out, Shape{input_shape.n, input_shape.c, 1, 1}, "global_avgpool grad_out");
  Tensor dx(input_shape);
  const std::size_t P = input_shape.plane();
  for (std::size_t n = 0; n < input_shape.n; ++n)
    for (std::size_t c = 0; c < input_shape.c; ++c) {
      const double g = grad_out.at(n, c, 0, 0) / static_cast<double>(P);
      double* d = dx.plane(n, c);
      for (std::size_t i = 0; i < P; ++i) d[i] = g;
    }
  return dx;
}

class GlobalAvgPool : public Layer {
 public:
  std::string kind() const override { return "gap"; }
  Tensor forward(const Tensor& x, Mode) override {
    in_shape_ = x.shape();
    cached_ = true;
    return global_avgpool_forward(x);
  }
  Tensor backward(const Tensor& grad_out) override {
    if (!cached_) throw StaleCacheError("global avgpool backward without a matching forward");
    cached_ = false;
    return global_avgpool_backward(grad_out, in_shape_);
  }

 private:
  Shape in_shape_;
  bool cached_ = false;
};

}  // namespace prcn
