#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "prcn/layers/loss.hpp"
#include "prcn/model.hpp"
#include "prcn/rng.hpp"

namespace prcn {

// max|a - n| / max(max|a|, max|n|); 0 when both are identically zero.
inline double relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric) {
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
    scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
  }
  return scale == 0.0 ? 0.0 : diff / scale;
}

// Central difference of f at each of the given coordinates of `v`.
inline std::vector<double> numeric_gradient(const std::function<double()>& f, Tensor& v,
                                            const std::vector<std::size_t>& coords, double h = 1e-5) {
  std::vector<double> g;
  g.reserve(coords.size());
  for (std::size_t i : coords) {
    const double orig = v[i];
    v[i] = orig + h;
    const double up = f();
    v[i] = orig - h;
    const double down = f();
    v[i] = orig;
    g.push_back((up - down) / (2.0 * h));
  }
  return g;
}

// All coordinates when count >= size, else `count` distinct ones drawn by a
// partial Fisher-Yates.
inline std::vector<std::size_t> sample_coords(std::size_t size, std::size_t count, Rng& rng) {
  std::vector<std::size_t> idx(size);
  for (std::size_t i = 0; i < size; ++i) idx[i] = i;
  if (count >= size) return idx;
  for (std::size_t i = 0; i < count; ++i) std::swap(idx[i], idx[i + rng.below(size - i)]);
  idx.resize(count);
  return idx;
}

struct GradcheckEntry {
  std::string name;  // "input" or "<layer>.<kind>.<param>"
  std::size_t checked = 0;
  double rel_err = 0.0;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  double max_rel_err() const {
    double m = 0.0;
    for (const auto& e : entries) m = std::max(m, e.rel_err);
    return m;
  }
};

// Checks d(xent loss)/d(input) and d/d(every parameter) of a model in train
// mode against central differences, at up to `coords_per_tensor`
// coordinates each.
inline GradcheckReport gradcheck_model(Sequential& model, Tensor x, const std::vector<int>& labels, Rng& rng,
                                       std::size_t coords_per_tensor = 64, double h = 1e-5) {
  auto loss = [&] { return softmax_xent(model.forward(x, Mode::Train), labels).loss; };
  model.zero_grad();
  auto xent = softmax_xent(model.forward(x, Mode::Train), labels);
  const Tensor grad_x = model.backward(xent.grad_logits);

  GradcheckReport rep;
  auto check = [&](const std::string& name, Tensor& value, const Tensor& analytic) {
    const auto coords = sample_coords(value.size(), coords_per_tensor, rng);
    std::vector<double> a;
    for (std::size_t i : coords) a.push_back(analytic[i]);
    rep.entries.push_back({name, coords.size(), relative_error(a, numeric_gradient(loss, value, coords, h))});
  };
  check("input", x, grad_x);
  for (std::size_t i = 0; i < model.size(); ++i) {
    auto& l = model.layer(i);
    for (auto* p : l.params()) {
      const Tensor analytic = p->grad;
      check(std::to_string(i) + "." + l.kind() + "." + p->name, p->value, analytic);
    }
  }
  return rep;
}

}  // namespace prcn
