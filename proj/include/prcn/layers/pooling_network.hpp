#pragma once

#include <string>

#include "prcn/layers/activation.hpp"
#include "prcn/layers/conv.hpp"

namespace prcn {

// Two 1x1 convolutions, channels -> hidden -> channels, ReLU in between.
// Draws the first conv's weights, then the second's.
class PoolingNetwork : public Layer {
 public:
  PoolingNetwork(std::size_t channels, std::size_t hidden, Rng& rng)
      : first_(make_conv(ConvGeometry{channels, hidden, 1, 1, 0, 1}, rng)),
        second_(make_conv(ConvGeometry{hidden, channels, 1, 1, 0, 1}, rng)) {}

  std::string kind() const override { return "poolnet"; }

  Tensor forward(const Tensor& x, Mode mode) override {
    return second_.forward(relu_.forward(first_.forward(x, mode), mode), mode);
  }
  Tensor backward(const Tensor& grad_out) override {
    return first_.backward(relu_.backward(second_.backward(grad_out)));
  }
  std::vector<Param*> params() override {
    auto p = first_.params();
    for (auto* q : second_.params()) p.push_back(q);
    return p;
  }

 private:
  Conv2d first_;
  Relu relu_;
  Conv2d second_;
};

}  // namespace prcn
