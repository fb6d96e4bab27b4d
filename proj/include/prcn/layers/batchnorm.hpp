#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "prcn/layers/module.hpp"

namespace prcn {

// Per-channel batch normalization over (N, H, W).
struct BatchNormState {
  Tensor gamma, beta;                 // (1, C, 1, 1)
  Tensor running_mean, running_var;   // (1, C, 1, 1)
  double eps = 1e-5;
  double momentum = 0.1;

  explicit BatchNormState(std::size_t channels = 1)
      : gamma(1, channels, 1, 1, 1.0),
        beta(1, channels, 1, 1),
        running_mean(1, channels, 1, 1),
        running_var(1, channels, 1, 1, 1.0) {}
  std::size_t channels() const { return gamma.c(); }
};

struct BatchNormCache {
  Tensor xhat;
  std::vector<double> inv_std;
  Mode mode = Mode::Train;
};

// Train mode normalizes with biased batch statistics and folds the unbiased
// variance into the running estimate; eval mode reads running stats only.
inline Tensor batchnorm_forward(const Tensor& x, BatchNormState& s, Mode mode, BatchNormCache* cache = nullptr) {
  const std::size_t C = s.channels();
  if (x.c() != C) throw ShapeError("batchnorm: channel mismatch");
  const std::size_t N = x.n(), P = x.h() * x.w();
  const double m = static_cast<double>(N * P);
  Tensor y(x.shape());
  Tensor xhat(x.shape());
  std::vector<double> inv_std(C);
  for (std::size_t c = 0; c < C; ++c) {
    double mean, var;
    if (mode == Mode::Train) {
      double sum = 0.0;
      for (std::size_t n = 0; n < N; ++n) sum += detail::sum4(x.plane(n, c), P);
      mean = sum / m;
      double sq = 0.0;
      for (std::size_t n = 0; n < N; ++n) sq += detail::sq_dev4(x.plane(n, c), P, mean);
      var = sq / m;
      const double unbiased = m > 1 ? sq / (m - 1) : var;
      s.running_mean[c] = (1.0 - s.momentum) * s.running_mean[c] + s.momentum * mean;
      s.running_var[c] = (1.0 - s.momentum) * s.running_var[c] + s.momentum * unbiased;
    } else {
      mean = s.running_mean[c];
      var = s.running_var[c];
    }
    const double is = 1.0 / std::sqrt(var + s.eps);
    inv_std[c] = is;
    const double gamma = s.gamma[c], beta = s.beta[c];
    for (std::size_t n = 0; n < N; ++n) {
      const double* p = x.plane(n, c);
      double* h = xhat.plane(n, c);
      double* o = y.plane(n, c);
      for (std::size_t i = 0; i < P; ++i) {
        h[i] = (p[i] - mean) * is;
        o[i] = gamma * h[i] + beta;
      }
    }
  }
  if (cache) *cache = BatchNormCache{std::move(xhat), std::move(inv_std), mode};
  return y;
}

struct BatchNormGrads {
  Tensor grad_x, grad_gamma, grad_beta;
};

inline BatchNormGrads batchnorm_backward(const Tensor& grad_out, const BatchNormCache& cache,
                                         const BatchNormState& s) {
  require_shape(grad_out, cache.xhat.shape(), "batchnorm_backward grad_out");
  const std::size_t C = s.channels(), N = grad_out.n(), P = grad_out.h() * grad_out.w();
  const double m = static_cast<double>(N * P);
  BatchNormGrads g{Tensor(grad_out.shape()), Tensor(1, C, 1, 1), Tensor(1, C, 1, 1)};
  for (std::size_t c = 0; c < C; ++c) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
      sum_dy += detail::sum4(grad_out.plane(n, c), P);
      sum_dy_xhat += detail::dot4(grad_out.plane(n, c), cache.xhat.plane(n, c), P);
    }
    g.grad_gamma[c] = sum_dy_xhat;
    g.grad_beta[c] = sum_dy;
    const double gi = s.gamma[c] * cache.inv_std[c];
    for (std::size_t n = 0; n < N; ++n) {
      const double* dy = grad_out.plane(n, c);
      const double* h = cache.xhat.plane(n, c);
      double* dx = g.grad_x.plane(n, c);
      if (cache.mode == Mode::Train) {
        const double mean_dy = sum_dy / m, mean_dy_xhat = sum_dy_xhat / m;
        for (std::size_t i = 0; i < P; ++i) dx[i] = gi * (dy[i] - mean_dy - h[i] * mean_dy_xhat);
      } else {
        for (std::size_t i = 0; i < P; ++i) dx[i] = gi * dy[i];
      }
    }
  }
  return g;
}

class BatchNorm : public Layer {
 public:
  explicit BatchNorm(std::size_t channels, double eps = 1e-5, double momentum = 0.1)
      : state_(channels), gamma_("gamma", state_.gamma), beta_("beta", state_.beta) {
    state_.eps = eps;
    state_.momentum = momentum;
  }

  std::string kind() const override { return "batchnorm"; }

  Tensor forward(const Tensor& x, Mode mode) override {
    sync_in();
    cached_ = true;
    return batchnorm_forward(x, state_, mode, &cache_);
  }

  Tensor backward(const Tensor& grad_out) override {
    if (!cached_) throw StaleCacheError("batchnorm backward without a matching forward");
    sync_in();
    auto g = batchnorm_backward(grad_out, cache_, state_);
    gamma_.grad += g.grad_gamma;
    beta_.grad += g.grad_beta;
    cached_ = false;
    return std::move(g.grad_x);
  }

  std::vector<Param*> params() override { return {&gamma_, &beta_}; }
  std::vector<std::pair<std::string, Tensor*>> buffers() override {
    return {{"running_mean", &state_.running_mean}, {"running_var", &state_.running_var}};
  }
  const BatchNormState& state() const { return state_; }

 private:
  // gamma/beta live in Params so the optimizer can update them in place.
  void sync_in() {
    state_.gamma = gamma_.value;
    state_.beta = beta_.value;
  }

  BatchNormState state_;
  Param gamma_, beta_;
  BatchNormCache cache_;
  bool cached_ = false;
};

}  // namespace prcn
