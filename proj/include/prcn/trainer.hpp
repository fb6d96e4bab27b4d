#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "prcn/layers/loss.hpp"
#include "prcn/mnist.hpp"
#include "prcn/model.hpp"
#include "prcn/rng.hpp"

namespace prcn {

struct OptimState {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-5;
  std::optional<double> clip_norm = 1.0;
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  std::vector<double> decay_points{0.5, 0.75};  // fractions of total epochs
  double decay_factor = 0.1;
  std::vector<Tensor> velocity;  // one per parameter, created lazily
};

class DivergenceError : public NumericError {
 public:
  DivergenceError(const std::string& what, std::size_t epoch)
      : NumericError(what + " (epoch " + std::to_string(epoch) + ")"), epoch_(epoch) {}
  std::size_t epoch() const { return epoch_; }

 private:
  std::size_t epoch_;
};

// Piecewise-constant: lr drops by decay_factor at each ceil(p * total).
inline double lr_at(std::size_t epoch, std::size_t total, const OptimState& s) {
  if (epoch >= total) throw ConfigError("lr_at: epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(total) + ")");
  double lr = s.lr;
  for (double p : s.decay_points)
    if (epoch >= static_cast<std::size_t>(std::ceil(p * static_cast<double>(total)))) lr *= s.decay_factor;
  return lr;
}

// Global L2 norm over all parameter gradients.
inline double grad_norm(const std::vector<Param*>& params) {
  double sq = 0.0;
  for (const auto* p : params)
    for (std::size_t i = 0; i < p->grad.size(); ++i) sq += p->grad[i] * p->grad[i];
  return std::sqrt(sq);
}

// Clip g to clip_norm (global), then v = mu v + (g + wd w), w -= lr v.
// Returns the pre-clip gradient norm. Rejects non-finite gradients before
// touching any parameter.
inline double sgd_step(const std::vector<Param*>& params, OptimState& s, double lr) {
  for (const auto* p : params) {
    if (p->grad.shape() != p->value.shape()) throw ShapeError("sgd_step: grad/value shape mismatch for " + p->name);
    check_finite(p->grad, "sgd_step gradient of " + p->name);
  }
  if (s.velocity.size() != params.size()) {
    s.velocity.clear();
    for (const auto* p : params) s.velocity.emplace_back(p->value.shape());
  }
  const double norm = grad_norm(params);
  double scale = 1.0;
  if (s.clip_norm && norm > *s.clip_norm) scale = *s.clip_norm / norm;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = *params[k];
    auto& v = s.velocity[k];
    require_shape(v, p.value.shape(), "sgd_step velocity of " + p.name);
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      v[i] = s.momentum * v[i] + (scale * p.grad[i] + s.weight_decay * p.value[i]);
      p.value[i] -= lr * v[i];
    }
  }
  return norm;
}

struct EpochMetrics {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double train_err = 0.0;  // running error over the epoch's (augmented) batches
  double test_err = std::nan("");
  double seconds = 0.0;
};

struct RunMetrics {
  std::uint64_t seed = 0;
  std::vector<EpochMetrics> epochs;
  double wall_seconds = 0.0;
  double final_test_err = std::nan("");
  double final_train_err = std::nan("");

  // Everything except timings.
  bool same_results(const RunMetrics& o) const {
    if (seed != o.seed || epochs.size() != o.epochs.size()) return false;
    auto eq = [](double a, double b) { return (std::isnan(a) && std::isnan(b)) || a == b; };
    for (std::size_t i = 0; i < epochs.size(); ++i) {
      const auto &a = epochs[i], &b = o.epochs[i];
      if (a.epoch != b.epoch || !eq(a.lr, b.lr) || !eq(a.train_loss, b.train_loss) || !eq(a.train_err, b.train_err) ||
          !eq(a.test_err, b.test_err))
        return false;
    }
    return eq(final_test_err, o.final_test_err) && eq(final_train_err, o.final_train_err);
  }
};

struct TrainConfig {
  OptimState optim;
  AugmentSpec augment;              // applied to train batches and, once, to the test set
  std::uint64_t test_seed = 12345;  // fixes test-set augmentation draws
  std::size_t eval_every = 1;       // 0: only after the last epoch
  std::size_t eval_batch = 256;
  std::string metrics_csv;          // empty: no CSV
  std::string checkpoint_path;      // empty: no checkpoints
  std::size_t checkpoint_every = 0;
  std::string config_json = "{}";   // echoed into checkpoints
  std::function<void(const EpochMetrics&)> on_epoch;
};

// Copies samples idx[begin, end) into a batch tensor.
inline Tensor gather_batch(const Dataset& d, std::span<const std::uint32_t> idx, std::vector<int>& labels) {
  const auto& s = d.images.shape();
  Tensor b(idx.size(), s.c, s.h, s.w);
  labels.resize(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy_n(d.images.data() + idx[i] * s.sample(), s.sample(), b.data() + i * s.sample());
    labels[i] = d.labels[idx[i]];
  }
  return b;
}

// Fraction misclassified, eval mode.
inline double evaluate(Sequential& model, const Dataset& d, std::size_t batch = 256) {
  if (d.size() == 0) throw ConfigError("evaluate: empty dataset");
  std::vector<std::uint32_t> idx(d.size());
  std::iota(idx.begin(), idx.end(), 0u);
  std::vector<int> labels;
  std::size_t errors = 0;
  for (std::size_t b = 0; b < d.size(); b += batch) {
    const std::size_t e = std::min(d.size(), b + batch);
    const Tensor x = gather_batch(d, std::span(idx).subspan(b, e - b), labels);
    const Tensor logits = model.forward(x, Mode::Eval);
    errors += softmax_xent(logits, labels).errors;
  }
  return static_cast<double>(errors) / static_cast<double>(d.size());
}

// The test set augmented once with Rng(test_seed).
inline Dataset augment_dataset(const Dataset& d, const AugmentSpec& spec, std::uint64_t test_seed) {
  Rng rng(test_seed);
  return Dataset{augment_batch(d.images, spec, rng), d.labels};
}

namespace detail {
inline void append_metrics_row(const std::string& path, const EpochMetrics& m) {
  const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  std::ofstream f(path, std::ios::app);
  if (!f) throw Error("cannot write metrics " + path);
  if (fresh) f << "epoch,lr,train_loss,train_err,test_err,seconds\n";
  f.precision(17);
  f << m.epoch << ',' << m.lr << ',' << m.train_loss << ',' << m.train_err << ',' << m.test_err << ',' << m.seconds << '\n';
}
}  // namespace detail

// Minibatch SGD. Random streams derive from `seed`:
//   substream(seed, "shuffle")  one permutation per epoch (n-1 draws)
//   substream(seed, "augment")  3 draws per training sample, in batch order
// Weight init is the caller's (see compile()).
inline RunMetrics train(Sequential& model, const Dataset& train_set, const Dataset* test_set, TrainConfig& cfg,
                        std::uint64_t seed) {
  if (train_set.size() == 0) throw ConfigError("train: empty dataset");
  if (cfg.optim.batch_size == 0) throw ConfigError("train: batch size must be >= 1");
  cfg.augment.validate();
  const auto t0 = std::chrono::steady_clock::now();
  RunMetrics run;
  run.seed = seed;

  std::optional<Dataset> test_aug;
  if (test_set) test_aug = cfg.augment.identity() ? *test_set : augment_dataset(*test_set, cfg.augment, cfg.test_seed);

  Rng shuffle_rng(substream(seed, "shuffle"));
  Rng aug_rng(substream(seed, "augment"));
  auto params = model.params();
  std::vector<int> labels;
  const std::size_t total = cfg.optim.epochs;

  for (std::size_t epoch = 0; epoch < total; ++epoch) {
    const auto e0 = std::chrono::steady_clock::now();
    EpochMetrics m;
    m.epoch = epoch;
    m.lr = lr_at(epoch, total, cfg.optim);
    const auto order = rng_permutation(shuffle_rng, train_set.size());
    double loss_sum = 0.0;
    std::size_t errors = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.optim.batch_size) {
      const std::size_t e = std::min(order.size(), b + cfg.optim.batch_size);
      Tensor x = gather_batch(train_set, std::span(order).subspan(b, e - b), labels);
      x = augment_batch(x, cfg.augment, aug_rng);
      model.zero_grad();
      const Tensor logits = model.forward(x, Mode::Train);
      auto xent = softmax_xent(logits, labels);
      if (!std::isfinite(xent.loss)) throw DivergenceError("training loss is not finite", epoch);
      model.backward(xent.grad_logits);
      try {
        sgd_step(params, cfg.optim, m.lr);
      } catch (const NumericError& err) {
        throw DivergenceError(err.what(), epoch);
      }
      loss_sum += xent.loss * static_cast<double>(e - b);
      errors += xent.errors;
    }
    m.train_loss = loss_sum / static_cast<double>(train_set.size());
    m.train_err = static_cast<double>(errors) / static_cast<double>(train_set.size());
    const bool last = epoch + 1 == total;
    if (test_aug && (last || (cfg.eval_every && (epoch + 1) % cfg.eval_every == 0)))
      m.test_err = evaluate(model, *test_aug, cfg.eval_batch);
    m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - e0).count();
    run.epochs.push_back(m);
    if (!cfg.metrics_csv.empty()) detail::append_metrics_row(cfg.metrics_csv, m);
    if (!cfg.checkpoint_path.empty() && cfg.checkpoint_every && ((epoch + 1) % cfg.checkpoint_every == 0 || last))
      save_checkpoint(cfg.checkpoint_path, model, cfg.config_json);
    if (cfg.on_epoch) cfg.on_epoch(m);
  }
  if (!run.epochs.empty()) {
    run.final_train_err = run.epochs.back().train_err;
    run.final_test_err = run.epochs.back().test_err;
  } else if (test_aug) {
    run.final_test_err = evaluate(model, *test_aug, cfg.eval_batch);
  }
  run.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return run;
}

}  // namespace prcn
