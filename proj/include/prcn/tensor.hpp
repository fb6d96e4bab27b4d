#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "prcn/alloc.hpp"
#include "prcn/error.hpp"

namespace prcn {

struct Shape {
  std::size_t n = 1, c = 1, h = 1, w = 1;

  std::size_t plane() const { return h * w; }
  std::size_t sample() const { return c * h * w; }
  std::size_t count() const { return n * c * h * w; }
  bool operator==(const Shape&) const = default;

  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
           std::to_string(w) + ")";
  }
};

// Product of the four dims, rejecting zero dims and overflow of the
// addressable byte count for element type T.
template <class T>
std::size_t checked_count(const Shape& s) {
  const std::size_t dims[4] = {s.n, s.c, s.h, s.w};
  std::size_t total = 1;
  for (std::size_t d : dims) {
    if (d == 0) throw ShapeError("tensor dims must be >= 1, got " + s.str());
    if (total > std::numeric_limits<std::size_t>::max() / sizeof(T) / d)
      throw ShapeError("tensor size overflows addressable memory: " + s.str());
    total *= d;
  }
  return total;
}

// Dense N x C x H x W array, row-major, value semantics.
template <class T>
class BasicTensor {
 public:
  using value_type = T;
  using Storage = std::vector<T, TrackingAllocator<T>>;

  BasicTensor() = default;
  explicit BasicTensor(const Shape& s, T fill = T(0)) : shape_(s), data_(checked_count<T>(s), fill) {}
  BasicTensor(std::size_t n, std::size_t c, std::size_t h, std::size_t w, T fill = T(0))
      : BasicTensor(Shape{n, c, h, w}, fill) {}

  const Shape& shape() const { return shape_; }
  std::size_t n() const { return shape_.n; }
  std::size_t c() const { return shape_.c; }
  std::size_t h() const { return shape_.h; }
  std::size_t w() const { return shape_.w; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> span() { return {data_.data(), data_.size()}; }
  std::span<const T> span() const { return {data_.data(), data_.size()}; }

  std::size_t index(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }
  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) { return data_[index(n, c, h, w)]; }
  const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[index(n, c, h, w)];
  }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // One H x W plane.
  T* plane(std::size_t n, std::size_t c) { return data_.data() + (n * shape_.c + c) * shape_.plane(); }
  const T* plane(std::size_t n, std::size_t c) const {
    return data_.data() + (n * shape_.c + c) * shape_.plane();
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  // Same data, new shape with equal element count.
  BasicTensor reshaped(const Shape& s) const {
    if (s.count() != size()) throw ShapeError("reshape " + shape_.str() + " -> " + s.str());
    BasicTensor out = *this;
    out.shape_ = s;
    return out;
  }

  bool operator==(const BasicTensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

 private:
  Shape shape_{0, 0, 0, 0};
  Storage data_;
};

using Tensor = BasicTensor<double>;
using TensorF = BasicTensor<float>;

// Zero-filled tensor; throws ShapeError on zero dims or size overflow.
template <class T = double>
BasicTensor<T> alloc(const Shape& s) {
  return BasicTensor<T>(s);
}

template <class T>
void check_finite(const BasicTensor<T>& t, const std::string& what) {
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (!std::isfinite(t[i]))
      throw NumericError(what + ": non-finite value at flat index " + std::to_string(i));
  }
}

template <class T>
void require_shape(const BasicTensor<T>& t, const Shape& s, const std::string& what) {
  if (t.shape() != s) throw ShapeError(what + ": expected " + s.str() + ", got " + t.shape().str());
}

template <class T>
BasicTensor<T>& operator+=(BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_shape(b, a.shape(), "tensor +=");
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  return a;
}

namespace detail {
// Four interleaved accumulators break the add latency chain of long sums.
inline double sum4(const double* p, std::size_t n) {
  double a0 = 0, a1 = 0, a2 = 0, a3 = 0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    a0 += p[i];
    a1 += p[i + 1];
    a2 += p[i + 2];
    a3 += p[i + 3];
  }
  for (; i < n; ++i) a0 += p[i];
  return (a0 + a1) + (a2 + a3);
}

inline double dot4(const double* p, const double* q, std::size_t n) {
  double a0 = 0, a1 = 0, a2 = 0, a3 = 0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    a0 += p[i] * q[i];
    a1 += p[i + 1] * q[i + 1];
    a2 += p[i + 2] * q[i + 2];
    a3 += p[i + 3] * q[i + 3];
  }
  for (; i < n; ++i) a0 += p[i] * q[i];
  return (a0 + a1) + (a2 + a3);
}

// Sum of squared deviations from `mean`.
inline double sq_dev4(const double* p, std::size_t n, double mean) {
  double a0 = 0, a1 = 0, a2 = 0, a3 = 0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const double d0 = p[i] - mean, d1 = p[i + 1] - mean, d2 = p[i + 2] - mean, d3 = p[i + 3] - mean;
    a0 += d0 * d0;
    a1 += d1 * d1;
    a2 += d2 * d2;
    a3 += d3 * d3;
  }
  for (; i < n; ++i) a0 += (p[i] - mean) * (p[i] - mean);
  return (a0 + a1) + (a2 + a3);
}
}  // namespace detail

template <class T>
T max_abs(const BasicTensor<T>& t) {
  T m = 0;
  for (std::size_t i = 0; i < t.size(); ++i) m = std::max(m, std::abs(t[i]));
  return m;
}

}  // namespace prcn
