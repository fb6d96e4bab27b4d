#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>

#include "prcn/tensor.hpp"

namespace prcn {

struct XentResult {
  double loss = 0.0;   // mean over the batch
  Tensor grad_logits;  // d loss / d logits
  std::size_t errors = 0;
};

// Softmax cross-entropy on (N, K, 1, 1) logits. Prediction ties resolve to
// the lowest class index.
inline XentResult softmax_xent(const Tensor& logits, std::span<const int> labels) {
  const std::size_t N = logits.n(), K = logits.c() * logits.h() * logits.w();
  if (labels.size() != N)
    throw ShapeError("softmax_xent: " + std::to_string(labels.size()) + " labels for batch " + std::to_string(N));
  XentResult r{0.0, Tensor(logits.shape()), 0};
  for (std::size_t n = 0; n < N; ++n) {
    const int y = labels[n];
    if (y < 0 || static_cast<std::size_t>(y) >= K)
      throw ShapeError("softmax_xent: label " + std::to_string(y) + " out of range [0," + std::to_string(K) + ")");
    const double* z = logits.data() + n * K;
    double* g = r.grad_logits.data() + n * K;
    std::size_t arg = 0;
    for (std::size_t k = 1; k < K; ++k)
      if (z[k] > z[arg]) arg = k;
    const double zmax = z[arg];
    double sum = 0.0;
    for (std::size_t k = 0; k < K; ++k) sum += std::exp(z[k] - zmax);
    const double log_sum = std::log(sum) + zmax;
    r.loss += log_sum - z[y];
    for (std::size_t k = 0; k < K; ++k)
      g[k] = (std::exp(z[k] - log_sum) - (static_cast<std::size_t>(y) == k ? 1.0 : 0.0)) / static_cast<double>(N);
    if (arg != static_cast<std::size_t>(y)) ++r.errors;
  }
  r.loss /= static_cast<double>(N);
  return r;
}

inline int argmax_class(const Tensor& logits, std::size_t n) {
  const std::size_t K = logits.c() * logits.h() * logits.w();
  const double* z = logits.data() + n * K;
  return static_cast<int>(std::max_element(z, z + K) - z);
}

}  // namespace prcn
