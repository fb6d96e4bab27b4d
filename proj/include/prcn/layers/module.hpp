#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "prcn/tensor.hpp"

namespace prcn {

class Connectome;

enum class Mode { Train, Eval };

// A learnable tensor and its accumulated gradient.
struct Param {
  std::string name;
  Tensor value;
  Tensor grad;

  Param() = default;
  Param(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}
  void zero_grad() { grad.fill(0.0); }
};

// Stateful forward/backward unit. forward() caches what backward() needs;
// backward() accumulates into Param::grad and returns the input gradient.
class Layer {
 public:
  virtual ~Layer() = default;

  virtual std::string kind() const = 0;
  virtual Tensor forward(const Tensor& x, Mode mode) = 0;
  virtual Tensor backward(const Tensor& grad_out) = 0;

  virtual std::vector<Param*> params() { return {}; }
  // Non-learned state that must survive checkpointing (e.g. running stats).
  virtual std::vector<std::pair<std::string, Tensor*>> buffers() { return {}; }
  virtual std::vector<const Connectome*> connectomes() const { return {}; }
  // Replaces connectomes in the order connectomes() lists them.
  virtual void set_connectomes(const std::vector<Connectome>&) {}
};

using LayerPtr = std::unique_ptr<Layer>;

class StaleCacheError : public Error {
 public:
  using Error::Error;
};

}  // namespace prcn
