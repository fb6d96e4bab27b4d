#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "prcn/alloc.hpp"
#include "prcn/connectome.hpp"
#include "prcn/tensor.hpp"

namespace prcn {

// How to pool an E-channel tensor through a permutation: slot j takes the max
// over channels perm[j*cmp .. (j+1)*cmp). Tile sizes only change traversal
// order; every output cell is computed by the same comparison sequence.
struct PoolPlan {
  std::size_t expansion = 1;
  std::size_t cmp = 1;
  std::span<const std::uint32_t> perm;
  std::size_t slot_tile = 8;        // output channels per tile
  std::size_t spatial_tile = 1024;  // pixels per tile

  static PoolPlan from(const Connectome& c) { return PoolPlan{c.expansion(), c.cmp(), c.perm()}; }

  std::size_t slots() const { return expansion / cmp; }

  void validate() const {
    if (cmp == 0 || expansion % cmp != 0) throw ConfigError("pool plan: cmp must divide expansion");
    if (perm.size() != expansion) throw ConfigError("pool plan: perm length != expansion");
    if (slot_tile == 0 || spatial_tile == 0) throw ConfigError("pool plan: tile sizes must be >= 1");
  }

  std::uint64_t fingerprint() const {
    std::uint64_t h = 0xCBF29CE484222325ULL ^ cmp;
    for (auto p : perm) {
      h ^= p;
      h *= 0x100000001B3ULL;
    }
    return h;
  }
};

// Winning offset within each support, in [0, cmp). One byte per cell when
// cmp <= 255, two bytes otherwise. Remembers which forward produced it.
class ArgmaxMap {
 public:
  ArgmaxMap() = default;
  ArgmaxMap(std::size_t cells, std::size_t cmp, const Shape& out_shape, std::uint64_t plan_id)
      : width_(cmp <= 255 ? 1 : 2), bytes_(cells * width_), out_shape_(out_shape), plan_id_(plan_id) {}

  std::size_t size() const { return bytes_.size() / width_; }
  std::size_t width() const { return width_; }
  std::size_t bytes() const { return bytes_.size(); }
  const Shape& out_shape() const { return out_shape_; }
  std::uint64_t plan_id() const { return plan_id_; }

  std::uint32_t get(std::size_t i) const {
    return width_ == 1 ? bytes_[i] : static_cast<std::uint32_t>(bytes_[2 * i] | (bytes_[2 * i + 1] << 8));
  }
  void set(std::size_t i, std::uint32_t v) {
    if (width_ == 1) {
      bytes_[i] = static_cast<std::uint8_t>(v);
    } else {
      bytes_[2 * i] = static_cast<std::uint8_t>(v);
      bytes_[2 * i + 1] = static_cast<std::uint8_t>(v >> 8);
    }
  }
  bool operator==(const ArgmaxMap&) const = default;

 private:
  std::size_t width_ = 1;
  std::vector<std::uint8_t, TrackingAllocator<std::uint8_t>> bytes_;
  Shape out_shape_{0, 0, 0, 0};
  std::uint64_t plan_id_ = 0;
};

template <class T>
struct CmpResult {
  BasicTensor<T> out;
  ArgmaxMap argmax;
};

// Channel max over permuted supports, reading the E input planes in place.
// Allocates only the output tensor and the argmax map.
template <class T>
CmpResult<T> indirect_cmp_forward(const BasicTensor<T>& x, const PoolPlan& plan) {
  plan.validate();
  if (x.c() != plan.expansion)
    throw ShapeError("indirect_cmp_forward: input has " + std::to_string(x.c()) + " channels, plan expects " +
                     std::to_string(plan.expansion));
  const std::size_t S = plan.slots(), P = x.h() * x.w(), cmp = plan.cmp;
  const Shape out_shape{x.n(), S, x.h(), x.w()};
  CmpResult<T> r{BasicTensor<T>(out_shape), ArgmaxMap(out_shape.count(), cmp, out_shape, plan.fingerprint())};
  const T* base = x.data();
  for (std::size_t n = 0; n < x.n(); ++n) {
    for (std::size_t j0 = 0; j0 < S; j0 += plan.slot_tile) {
      const std::size_t j1 = std::min(S, j0 + plan.slot_tile);
      for (std::size_t p0 = 0; p0 < P; p0 += plan.spatial_tile) {
        const std::size_t p1 = std::min(P, p0 + plan.spatial_tile);
        for (std::size_t j = j0; j < j1; ++j) {
          T* dst = r.out.plane(n, j);
          const std::size_t cell0 = (n * S + j) * P;
          const T* first = base + (n * plan.expansion + plan.perm[j * cmp]) * P;
          for (std::size_t p = p0; p < p1; ++p) dst[p] = first[p];
          if (cmp == 1) {
            for (std::size_t p = p0; p < p1; ++p) r.argmax.set(cell0 + p, 0);
            continue;
          }
          // Running max across the support; strict > keeps the lowest offset on ties.
          std::uint32_t offs[1024];
          const bool track = (p1 - p0) <= 1024;
          if (track) std::fill(offs, offs + (p1 - p0), 0u);
          for (std::size_t i = 1; i < cmp; ++i) {
            const T* src = base + (n * plan.expansion + plan.perm[j * cmp + i]) * P;
            if (track) {
              for (std::size_t p = p0; p < p1; ++p) {
                if (src[p] > dst[p]) {
                  dst[p] = src[p];
                  offs[p - p0] = static_cast<std::uint32_t>(i);
                }
              }
            } else {
              for (std::size_t p = p0; p < p1; ++p) {
                if (src[p] > dst[p]) {
                  dst[p] = src[p];
                  r.argmax.set(cell0 + p, static_cast<std::uint32_t>(i));
                }
              }
            }
          }
          if (track)
            for (std::size_t p = p0; p < p1; ++p) r.argmax.set(cell0 + p, offs[p - p0]);
        }
      }
    }
  }
  return r;
}

// Routes each output gradient to the winning original channel; zero elsewhere.
template <class T>
BasicTensor<T> indirect_cmp_backward(const BasicTensor<T>& grad_out, const ArgmaxMap& argmax, const PoolPlan& plan) {
  plan.validate();
  if (argmax.plan_id() != plan.fingerprint() || argmax.out_shape() != grad_out.shape() ||
      argmax.size() != grad_out.size())
    throw ShapeError("indirect_cmp_backward: stale argmax (plan or shape differs from the forward)");
  const std::size_t S = plan.slots(), P = grad_out.h() * grad_out.w(), cmp = plan.cmp;
  if (grad_out.c() != S) throw ShapeError("indirect_cmp_backward: grad_out channel mismatch");
  BasicTensor<T> dx(grad_out.n(), plan.expansion, grad_out.h(), grad_out.w());
  for (std::size_t n = 0; n < grad_out.n(); ++n)
    for (std::size_t j = 0; j < S; ++j) {
      const T* g = grad_out.plane(n, j);
      const std::size_t cell0 = (n * S + j) * P;
      for (std::size_t p = 0; p < P; ++p) {
        const std::uint32_t i = argmax.get(cell0 + p);
        dx.plane(n, plan.perm[j * cmp + i])[p] += g[p];
      }
    }
  return dx;
}

// ---- Reference path: materialize the shuffled tensor, then pool contiguous
// channel blocks. Kept as the oracle and the benchmark baseline.

template <class T>
BasicTensor<T> gather_channels(const BasicTensor<T>& x, std::span<const std::uint32_t> perm) {
  if (perm.size() != x.c()) throw ShapeError("gather_channels: perm length != channels");
  BasicTensor<T> y(x.shape());
  const std::size_t P = x.h() * x.w();
  for (std::size_t n = 0; n < x.n(); ++n)
    for (std::size_t c = 0; c < x.c(); ++c) std::copy_n(x.plane(n, perm[c]), P, y.plane(n, c));
  return y;
}

template <class T>
CmpResult<T> naive_cmp_forward(const BasicTensor<T>& x, const PoolPlan& plan) {
  plan.validate();
  if (x.c() != plan.expansion) throw ShapeError("naive_cmp_forward: channel mismatch");
  const BasicTensor<T> shuffled = gather_channels(x, plan.perm);
  const std::size_t S = plan.slots(), P = x.h() * x.w(), cmp = plan.cmp;
  const Shape out_shape{x.n(), S, x.h(), x.w()};
  CmpResult<T> r{BasicTensor<T>(out_shape), ArgmaxMap(out_shape.count(), cmp, out_shape, plan.fingerprint())};
  for (std::size_t n = 0; n < x.n(); ++n)
    for (std::size_t j = 0; j < S; ++j)
      for (std::size_t p = 0; p < P; ++p) {
        std::uint32_t best = 0;
        for (std::uint32_t i = 1; i < cmp; ++i)
          if (shuffled.plane(n, j * cmp + i)[p] > shuffled.plane(n, j * cmp + best)[p]) best = i;
        r.out.plane(n, j)[p] = shuffled.plane(n, j * cmp + best)[p];
        r.argmax.set((n * S + j) * P + p, best);
      }
  return r;
}

template <class T>
BasicTensor<T> naive_cmp_backward(const BasicTensor<T>& grad_out, const ArgmaxMap& argmax, const PoolPlan& plan) {
  plan.validate();
  const std::size_t S = plan.slots(), P = grad_out.h() * grad_out.w(), cmp = plan.cmp;
  BasicTensor<T> grad_shuffled(grad_out.n(), plan.expansion, grad_out.h(), grad_out.w());
  for (std::size_t n = 0; n < grad_out.n(); ++n)
    for (std::size_t j = 0; j < S; ++j)
      for (std::size_t p = 0; p < P; ++p)
        grad_shuffled.plane(n, j * cmp + argmax.get((n * S + j) * P + p))[p] += grad_out.plane(n, j)[p];
  BasicTensor<T> dx(grad_shuffled.shape());
  for (std::size_t n = 0; n < dx.n(); ++n)
    for (std::size_t c = 0; c < plan.expansion; ++c) {
      const T* src = grad_shuffled.plane(n, c);
      T* dst = dx.plane(n, plan.perm[c]);
      for (std::size_t p = 0; p < P; ++p) dst[p] += src[p];
    }
  return dx;
}

// ---- Benchmark

struct PathReport {
  std::string path;
  double median_ns = 0.0;
  std::size_t peak_transient_bytes = 0;
  std::size_t largest_buffer_bytes = 0;
};

struct AllocReport {
  PathReport naive, indirect;
  PathReport naive_backward, indirect_backward;
  std::size_t expanded_bytes = 0;  // n*E*h*w*sizeof(T)
  std::size_t output_bytes = 0;
  std::size_t argmax_bytes = 0;
  double speedup = 0.0;            // naive / indirect forward median
  double backward_speedup = 0.0;
};

namespace detail {
template <class F>
PathReport measure(const std::string& name, std::size_t reps, F&& fn) {
  PathReport r{name};
  std::vector<double> times;
  times.reserve(reps);
  for (std::size_t i = 0; i < reps; ++i) {
    AllocScope scope;
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const auto t1 = std::chrono::steady_clock::now();
    times.push_back(std::chrono::duration<double, std::nano>(t1 - t0).count());
    r.peak_transient_bytes = std::max(r.peak_transient_bytes, scope.stats().peak);
    r.largest_buffer_bytes = std::max(r.largest_buffer_bytes, scope.stats().largest);
  }
  std::sort(times.begin(), times.end());
  const std::size_t m = times.size() / 2;
  r.median_ns = times.size() % 2 ? times[m] : 0.5 * (times[m - 1] + times[m]);
  return r;
}
}  // namespace detail

// Times `reps` forward and backward passes of both paths on a random input
// drawn from `rng`, recording per-call peak tracked allocation.
template <class T>
AllocReport bench(const PoolPlan& plan, const Shape& shape, std::size_t reps, Rng& rng) {
  if (reps < 10) throw ConfigError("bench: reps must be >= 10");
  plan.validate();
  if (shape.c != plan.expansion) throw ShapeError("bench: shape channels != plan expansion");
  BasicTensor<T> x(shape);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<T>(rng.normal());
  const Shape out_shape{shape.n, plan.slots(), shape.h, shape.w};
  BasicTensor<T> g(out_shape);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = static_cast<T>(rng.normal());

  AllocReport rep;
  rep.expanded_bytes = shape.count() * sizeof(T);
  rep.output_bytes = out_shape.count() * sizeof(T);
  const auto fwd = indirect_cmp_forward(x, plan);
  rep.argmax_bytes = fwd.argmax.bytes();

  volatile T sink = 0;
  rep.naive = detail::measure("naive", reps, [&] { sink = naive_cmp_forward(x, plan).out[0]; });
  rep.indirect = detail::measure("indirect", reps, [&] { sink = indirect_cmp_forward(x, plan).out[0]; });
  rep.naive_backward =
      detail::measure("naive_backward", reps, [&] { sink = naive_cmp_backward(g, fwd.argmax, plan)[0]; });
  rep.indirect_backward =
      detail::measure("indirect_backward", reps, [&] { sink = indirect_cmp_backward(g, fwd.argmax, plan)[0]; });
  (void)sink;
  rep.speedup = rep.naive.median_ns / rep.indirect.median_ns;
  rep.backward_speedup = rep.naive_backward.median_ns / rep.indirect_backward.median_ns;
  return rep;
}

}  // namespace prcn
