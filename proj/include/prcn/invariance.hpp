#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <ostream>
#include <string>
#include <vector>

#include "prcn/mnist.hpp"
#include "prcn/model.hpp"
#include "prcn/prcn_layer.hpp"
#include "prcn/rng.hpp"

namespace prcn {

// ---- Max of n iid U(0,1)

struct UniformMaxStat {
  std::size_t n = 1;
  double e_max = 0.5;           // n / (n+1)
  double e_max_sq = 1.0 / 3.0;  // n / (n+2)
  double var_max = 1.0 / 12.0;  // n / ((n+2)(n+1)^2)
};

inline UniformMaxStat uniform_max_stat(std::size_t n) {
  if (n == 0) throw ConfigError("uniform max statistic: n must be >= 1");
  const double d = static_cast<double>(n);
  return {n, d / (d + 1.0), d / (d + 2.0), d / ((d + 2.0) * (d + 1.0) * (d + 1.0))};
}

inline double var_max_closed_form(std::size_t n) { return uniform_max_stat(n).var_max; }

struct McEstimate {
  double estimate = 0.0;
  double stderr_ = 0.0;
};

namespace detail {
inline double sample_variance(const std::vector<double>& v, std::size_t b, std::size_t e) {
  const double m = static_cast<double>(e - b);
  double mean = 0.0;
  for (std::size_t i = b; i < e; ++i) mean += v[i];
  mean /= m;
  double ss = 0.0;
  for (std::size_t i = b; i < e; ++i) ss += (v[i] - mean) * (v[i] - mean);
  return ss / (m - 1.0);
}

// Sample variance of all values, with standard error from the spread of
// per-batch variances over `batches` contiguous batches.
inline McEstimate batched_variance(const std::vector<double>& v, std::size_t batches = 100) {
  McEstimate r;
  r.estimate = sample_variance(v, 0, v.size());
  batches = std::min(batches, v.size() / 2);
  const std::size_t per = v.size() / batches;
  std::vector<double> bv(batches);
  for (std::size_t k = 0; k < batches; ++k) bv[k] = sample_variance(v, k * per, (k + 1) * per);
  r.stderr_ = std::sqrt(sample_variance(bv, 0, batches) / static_cast<double>(batches));
  return r;
}
}  // namespace detail

// Monte Carlo variance of max of n U(0,1) draws; n draws per sample.
inline McEstimate mc_var_max_uniform(std::size_t n, std::size_t samples, Rng& rng) {
  if (n == 0) throw ConfigError("mc_var_max_uniform: n must be >= 1");
  if (samples < 10000) throw ConfigError("mc_var_max_uniform: need >= 10^4 samples");
  std::vector<double> v(samples);
  for (auto& s : v) {
    double m = 0.0;
    for (std::size_t i = 0; i < n; ++i) m = std::max(m, rng.uniform());
    s = m;
  }
  return detail::batched_variance(v);
}

// ---- Unitary ensembles

class EnsembleError : public Error {
 public:
  using Error::Error;
};

enum class EnsembleFamily { Orthogonal, PatchRotation };

// Random unitary (real orthogonal) operators on R^d.
//   Orthogonal:    Q from QR of a d x d standard Gaussian matrix, columns
//                  scaled by sign(R_ii) (Haar measure). d*d normal draws.
//   PatchRotation: d = s*s pixels of an s x s patch rotated by a uniformly
//                  drawn quarter turn. One below(4) draw.
class UnitaryEnsemble {
 public:
  UnitaryEnsemble(std::size_t d, EnsembleFamily family) : d_(d), family_(family) {
    if (d < 2) throw ConfigError("unitary ensemble: dimension must be >= 2");
    if (family == EnsembleFamily::PatchRotation) {
      side_ = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(d))));
      if (side_ * side_ != d) throw ConfigError("patch-rotation ensemble: dimension must be a perfect square");
    }
  }

  std::size_t dimension() const { return d_; }
  EnsembleFamily family() const { return family_; }

  Eigen::MatrixXd sample(Rng& rng) const {
    if (family_ == EnsembleFamily::Orthogonal) {
      Eigen::MatrixXd a(d_, d_);
      for (std::size_t r = 0; r < d_; ++r)
        for (std::size_t c = 0; c < d_; ++c) a(r, c) = rng.normal();
      Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
      Eigen::MatrixXd q = qr.householderQ();
      const Eigen::MatrixXd rr = qr.matrixQR().triangularView<Eigen::Upper>();
      for (std::size_t c = 0; c < d_; ++c)
        if (rr(c, c) < 0) q.col(c) *= -1.0;
      return q;
    }
    const auto turns = rng.below(4);
    Eigen::MatrixXd g = Eigen::MatrixXd::Zero(d_, d_);
    const std::size_t s = side_;
    for (std::size_t r = 0; r < s; ++r)
      for (std::size_t c = 0; c < s; ++c) {
        std::size_t rr = r, cc = c;
        for (std::uint64_t t = 0; t < turns; ++t) {  // one counterclockwise quarter turn
          const std::size_t nr = s - 1 - cc, nc = rr;
          rr = nr;
          cc = nc;
        }
        g(rr * s + cc, r * s + c) = 1.0;
      }
    return g;
  }

 private:
  std::size_t d_;
  EnsembleFamily family_;
  std::size_t side_ = 0;
};

// Max deviation of g^T g from identity.
inline double unitarity_defect(const Eigen::MatrixXd& g) {
  return (g.transpose() * g - Eigen::MatrixXd::Identity(g.rows(), g.cols())).cwiseAbs().maxCoeff();
}

struct InvarianceResult {
  McEstimate pooled, unpooled;
  double max_identity_error = 0.0;  // max |<x, g w> - <g^-1 x, w>|
  double max_norm_error = 0.0;      // max | |g v| - |v| |
};

// Per trial: n_pool operators g_i; pooled = max_i <x, g_i w>,
// unpooled = <x, g_1 w>. Each g is checked for unitarity against a fresh
// Gaussian v (d normal draws after the sample).
inline InvarianceResult mc_invariance(const std::vector<double>& x, const std::vector<double>& w,
                                      const UnitaryEnsemble& ens, std::size_t n_pool, std::size_t trials, Rng& rng,
                                      double tol = 1e-10) {
  const std::size_t d = ens.dimension();
  if (x.size() != d || w.size() != d) throw ShapeError("mc_invariance: x and w must have the ensemble dimension");
  if (n_pool == 0) throw ConfigError("mc_invariance: n_pool must be >= 1");
  if (trials < 4) throw ConfigError("mc_invariance: need >= 4 trials");
  const Eigen::Map<const Eigen::VectorXd> xv(x.data(), d), wv(w.data(), d);
  InvarianceResult r;
  std::vector<double> pooled(trials), unpooled(trials);
  Eigen::VectorXd v(d);
  for (std::size_t t = 0; t < trials; ++t) {
    double best = -HUGE_VAL;
    for (std::size_t i = 0; i < n_pool; ++i) {
      const Eigen::MatrixXd g = ens.sample(rng);
      for (std::size_t k = 0; k < d; ++k) v[k] = rng.normal();
      const double norm_err = std::abs((g * v).norm() - v.norm());
      const double dot = xv.dot(g * wv);
      const double id_err = std::abs(dot - (g.transpose() * xv).dot(wv));
      const double scale = std::max(1.0, xv.norm() * wv.norm());
      if (norm_err > tol * std::max(1.0, v.norm()) || id_err > tol * scale)
        throw EnsembleError("unitary ensemble produced a non-unitary sample (trial " + std::to_string(t) + ")");
      r.max_identity_error = std::max(r.max_identity_error, id_err);
      r.max_norm_error = std::max(r.max_norm_error, norm_err);
      best = std::max(best, dot);
      if (i == 0) unpooled[t] = dot;
    }
    pooled[t] = best;
  }
  r.pooled = detail::batched_variance(pooled);
  r.unpooled = detail::batched_variance(unpooled);
  return r;
}

// ---- Invariance of trained layers

enum class ProbeAxis { Rotation, TranslationX, TranslationY };

struct ProbeSweep {
  ProbeAxis axis = ProbeAxis::Rotation;
  std::vector<double> values;  // degrees or pixels

  static ProbeSweep rotation(double lo = -90, double hi = 90, double step = 15) {
    ProbeSweep s;
    for (double a = lo; a <= hi + 1e-9; a += step) s.values.push_back(a);
    return s;
  }
};

inline Tensor apply_probe_transform(const Tensor& x, ProbeAxis axis, double value) {
  switch (axis) {
    case ProbeAxis::Rotation:
      return value == 0.0 ? x : rotate(x, value);
    case ProbeAxis::TranslationX:
      return translate(x, static_cast<int>(std::lround(value)), 0);
    case ProbeAxis::TranslationY:
      return translate(x, 0, static_cast<int>(std::lround(value)));
  }
  return x;
}

struct LayerProbe {
  std::size_t layer_index = 0;  // position in the Sequential
  std::vector<double> pre_var;   // per expanded channel
  std::vector<double> post_var;  // per pooled slot
  std::vector<std::vector<std::uint32_t>> post_support;  // expanded channels feeding each slot
  double mean_pre = 0.0, mean_post = 0.0;
};

namespace detail {
// Welford accumulators over the sweep, one per activation element.
struct SweepMoments {
  std::vector<double> mean, m2;
  std::size_t count = 0;
  void add(const Tensor& t) {
    if (mean.empty()) {
      mean.assign(t.size(), 0.0);
      m2.assign(t.size(), 0.0);
    }
    ++count;
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double delta = t[i] - mean[i];
      mean[i] += delta / static_cast<double>(count);
      m2[i] += delta * (t[i] - mean[i]);
    }
  }
  // Population variance across the sweep, averaged over samples and
  // positions, per channel.
  std::vector<double> channel_variance(const Shape& s) const {
    std::vector<double> out(s.c, 0.0);
    if (count == 0) return out;
    for (std::size_t n = 0; n < s.n; ++n)
      for (std::size_t c = 0; c < s.c; ++c)
        for (std::size_t p = 0; p < s.plane(); ++p) out[c] += m2[(n * s.c + c) * s.plane() + p];
    for (auto& v : out) v /= static_cast<double>(count * s.n * s.plane());
    return out;
  }
};

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}
}  // namespace detail

// Runs each transformed copy of `inputs` through the model in eval mode and
// measures, for every PRC-NPTN layer, how much pre-CMP (expanded) and
// post-CMP (pooled) activations vary across the sweep.
inline std::vector<LayerProbe> layer_invariance_probe(Sequential& model, const ProbeSweep& sweep, const Tensor& inputs) {
  if (sweep.values.empty()) throw ConfigError("invariance probe: empty sweep");
  std::vector<std::size_t> layers;
  for (std::size_t i = 0; i < model.size(); ++i)
    if (dynamic_cast<PrcnLayer*>(&model.layer(i))) layers.push_back(i);
  if (layers.empty()) throw ConfigError("invariance probe: model has no PRC-NPTN layers");
  std::vector<detail::SweepMoments> pre(layers.size()), post(layers.size());
  std::vector<Shape> pre_shape(layers.size()), post_shape(layers.size());
  for (double v : sweep.values) {
    model.forward(apply_probe_transform(inputs, sweep.axis, v), Mode::Eval);
    for (std::size_t k = 0; k < layers.size(); ++k) {
      const auto& layer = dynamic_cast<PrcnLayer&>(model.layer(layers[k]));
      pre[k].add(layer.last_expanded());
      post[k].add(layer.last_pooled());
      pre_shape[k] = layer.last_expanded().shape();
      post_shape[k] = layer.last_pooled().shape();
    }
  }
  std::vector<LayerProbe> out;
  for (std::size_t k = 0; k < layers.size(); ++k) {
    const auto& layer = dynamic_cast<PrcnLayer&>(model.layer(layers[k]));
    LayerProbe p;
    p.layer_index = layers[k];
    p.pre_var = pre[k].channel_variance(pre_shape[k]);
    p.post_var = post[k].channel_variance(post_shape[k]);
    for (std::size_t j = 0; j < layer.connectome().slots(); ++j) {
      const auto s = layer.connectome().support(j);
      p.post_support.emplace_back(s.begin(), s.end());
    }
    p.mean_pre = detail::mean_of(p.pre_var);
    p.mean_post = detail::mean_of(p.post_var);
    out.push_back(std::move(p));
  }
  return out;
}

// CSV rows: layer,stage,channel,variance (stage is pre or post).
inline void write_probe_csv(std::ostream& os, const std::vector<LayerProbe>& probes) {
  os << "layer,stage,channel,variance\n";
  os.precision(17);
  for (const auto& p : probes) {
    for (std::size_t c = 0; c < p.pre_var.size(); ++c) os << p.layer_index << ",pre," << c << ',' << p.pre_var[c] << '\n';
    for (std::size_t c = 0; c < p.post_var.size(); ++c) os << p.layer_index << ",post," << c << ',' << p.post_var[c] << '\n';
  }
}

// CSV rows: n,closed_form,mc_estimate,stderr.
inline void write_lemma_csv(std::ostream& os, std::size_t n_max, std::size_t samples, std::uint64_t seed) {
  os << "n,closed_form,mc_estimate,stderr\n";
  os.precision(17);
  for (std::size_t n = 1; n <= n_max; ++n) {
    Rng rng(substream(seed, n));
    const auto mc = mc_var_max_uniform(n, samples, rng);
    os << n << ',' << var_max_closed_form(n) << ',' << mc.estimate << ',' << mc.stderr_ << '\n';
  }
}

}  // namespace prcn
