#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <string>

#include "prcn/layers/conv.hpp"
#include "prcn/rng.hpp"
#include "prcn/tensor.hpp"

namespace prcn::test {

inline Tensor random_tensor(const Shape& s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(s);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

inline std::string data_file(const std::string& name) {
  const char* root = std::getenv("PRCN_TEST_DATA");
  return std::string(root ? root : "tests/data") + "/" + name;
}

// Direct seven-loop grouped convolution.
inline Tensor conv_oracle(const Tensor& x, const ConvGeometry& g, const Tensor& w, const Tensor* bias = nullptr) {
  const std::size_t oh = (x.h() + 2 * g.pad - g.k) / g.stride + 1;
  const std::size_t ow = (x.w() + 2 * g.pad - g.k) / g.stride + 1;
  const std::size_t cin = g.inch / g.groups, cout = g.outch / g.groups;
  Tensor y(x.n(), g.outch, oh, ow);
  for (std::size_t n = 0; n < x.n(); ++n)
    for (std::size_t o = 0; o < g.outch; ++o)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          double acc = bias ? (*bias)[o] : 0.0;
          const std::size_t group = o / cout;
          for (std::size_t ci = 0; ci < cin; ++ci)
            for (std::size_t ky = 0; ky < g.k; ++ky)
              for (std::size_t kx = 0; kx < g.k; ++kx) {
                const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
                const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(x.h()) || ix >= static_cast<long>(x.w())) continue;
                acc += w.at(o, ci, ky, kx) * x.at(n, group * cin + ci, static_cast<std::size_t>(iy),
                                                  static_cast<std::size_t>(ix));
              }
          y.at(n, o, oy, ox) = acc;
        }
  return y;
}

inline double max_rel_diff(const Tensor& a, const Tensor& b) {
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    scale = std::max({scale, std::abs(a[i]), std::abs(b[i])});
  }
  return scale == 0.0 ? 0.0 : diff / scale;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) diff = std::max(diff, std::abs(a[i] - b[i]));
  return diff;
}

}  // namespace prcn::test
