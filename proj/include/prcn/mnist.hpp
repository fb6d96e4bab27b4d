#pragma once

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "prcn/model.hpp"
#include "prcn/rng.hpp"
#include "prcn/tensor.hpp"

namespace prcn {

// Images (n, 1, rows, cols) in [0, 1] and one label per image.
struct Dataset {
  Tensor images;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }

  Dataset head(std::size_t count) const {
    count = std::min(count, size());
    if (count == 0) throw ConfigError("dataset head: empty selection");
    Dataset d{Tensor(count, images.c(), images.h(), images.w()), {labels.begin(), labels.begin() + count}};
    std::copy_n(images.data(), d.images.size(), d.images.data());
    return d;
  }
};

using IdxDataset = Dataset;

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

namespace detail {
inline std::uint32_t be32(std::span<const std::uint8_t> b, std::size_t off, const char* what) {
  if (off + 4 > b.size()) throw ParseError(std::string(what) + ": truncated header", off);
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}
inline void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}
}  // namespace detail

inline bool is_gzip(std::span<const std::uint8_t> bytes) {
  return bytes.size() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b;
}

inline std::vector<std::uint8_t> gunzip(std::span<const std::uint8_t> bytes) {
  z_stream zs{};
  if (inflateInit2(&zs, 16 + MAX_WBITS) != Z_OK) throw Error("gunzip: inflateInit2 failed");
  zs.next_in = const_cast<Bytef*>(bytes.data());
  zs.avail_in = static_cast<uInt>(bytes.size());
  std::vector<std::uint8_t> out;
  std::uint8_t chunk[1 << 16];
  int rc = Z_OK;
  while (rc != Z_STREAM_END) {
    zs.next_out = chunk;
    zs.avail_out = sizeof(chunk);
    rc = inflate(&zs, Z_NO_FLUSH);
    if (rc != Z_OK && rc != Z_STREAM_END) {
      const auto at = zs.total_in;
      inflateEnd(&zs);
      throw ParseError("gunzip: corrupt stream", at);
    }
    out.insert(out.end(), chunk, chunk + (sizeof(chunk) - zs.avail_out));
    if (rc == Z_OK && zs.avail_in == 0 && zs.avail_out != 0) {
      const auto at = zs.total_in;
      inflateEnd(&zs);
      throw ParseError("gunzip: truncated stream", at);
    }
  }
  inflateEnd(&zs);
  return out;
}

// Big-endian IDX pair. Pixels are scaled by 1/255.
inline Dataset parse_idx(std::span<const std::uint8_t> image_bytes, std::span<const std::uint8_t> label_bytes) {
  const auto im_magic = detail::be32(image_bytes, 0, "idx images");
  if (im_magic != kIdxImageMagic) throw ParseError("idx images: bad magic", 0);
  const std::size_t n = detail::be32(image_bytes, 4, "idx images");
  const std::size_t rows = detail::be32(image_bytes, 8, "idx images");
  const std::size_t cols = detail::be32(image_bytes, 12, "idx images");
  if (n == 0 || rows == 0 || cols == 0) throw ParseError("idx images: zero dimension", 4);
  const std::size_t pixels = n * rows * cols;
  if (image_bytes.size() < 16 + pixels) throw ParseError("idx images: truncated pixel data", image_bytes.size());
  if (image_bytes.size() > 16 + pixels) throw ParseError("idx images: trailing bytes", 16 + pixels);

  const auto lb_magic = detail::be32(label_bytes, 0, "idx labels");
  if (lb_magic != kIdxLabelMagic) throw ParseError("idx labels: bad magic", 0);
  const std::size_t nl = detail::be32(label_bytes, 4, "idx labels");
  if (nl != n)
    throw ParseError("idx labels: count " + std::to_string(nl) + " != image count " + std::to_string(n), 4);
  if (label_bytes.size() < 8 + n) throw ParseError("idx labels: truncated label data", label_bytes.size());
  if (label_bytes.size() > 8 + n) throw ParseError("idx labels: trailing bytes", 8 + n);

  Dataset d{Tensor(n, 1, rows, cols), std::vector<int>(n)};
  for (std::size_t i = 0; i < pixels; ++i) d.images[i] = image_bytes[16 + i] / 255.0;
  for (std::size_t i = 0; i < n; ++i) {
    d.labels[i] = label_bytes[8 + i];
    if (d.labels[i] > 9) throw ParseError("idx labels: label " + std::to_string(d.labels[i]) + " > 9", 8 + i);
  }
  return d;
}

struct IdxBytes {
  std::vector<std::uint8_t> images, labels;
};

// Inverse of parse_idx; pixels are rounded back to bytes.
inline IdxBytes serialize_idx(const Dataset& d) {
  IdxBytes out;
  detail::put_be32(out.images, kIdxImageMagic);
  detail::put_be32(out.images, static_cast<std::uint32_t>(d.size()));
  detail::put_be32(out.images, static_cast<std::uint32_t>(d.images.h()));
  detail::put_be32(out.images, static_cast<std::uint32_t>(d.images.w()));
  for (std::size_t i = 0; i < d.images.size(); ++i)
    out.images.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(d.images[i], 0.0, 1.0) * 255.0)));
  detail::put_be32(out.labels, kIdxLabelMagic);
  detail::put_be32(out.labels, static_cast<std::uint32_t>(d.size()));
  for (int l : d.labels) out.labels.push_back(static_cast<std::uint8_t>(l));
  return out;
}

// Reads an IDX pair from disk, inflating gzip files transparently.
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  auto im = read_file_bytes(images_path);
  auto lb = read_file_bytes(labels_path);
  if (is_gzip(im)) im = gunzip(im);
  if (is_gzip(lb)) lb = gunzip(lb);
  return parse_idx(im, lb);
}

// ---- Geometric transforms on (rows x cols) planes

// Counterclockwise rotation by angle_deg about ((h-1)/2, (w-1)/2). Each output
// pixel is bilinearly sampled from the inverse-rotated source location;
// neighbours outside the image contribute zero.
inline void rotate_plane(const double* src, double* dst, std::size_t h, std::size_t w, double angle_deg) {
  const double cy = (static_cast<double>(h) - 1.0) / 2.0, cx = (static_cast<double>(w) - 1.0) / 2.0;
  const double rad = angle_deg * std::numbers::pi / 180.0;
  const double cs = std::cos(rad), sn = std::sin(rad);
  const auto H = static_cast<std::ptrdiff_t>(h), W = static_cast<std::ptrdiff_t>(w);
  auto at = [&](std::ptrdiff_t r, std::ptrdiff_t c) { return (r < 0 || r >= H || c < 0 || c >= W) ? 0.0 : src[r * W + c]; };
  for (std::ptrdiff_t r = 0; r < H; ++r) {
    for (std::ptrdiff_t c = 0; c < W; ++c) {
      const double x = static_cast<double>(c) - cx, y = cy - static_cast<double>(r);
      const double xs = cs * x + sn * y, ys = -sn * x + cs * y;
      const double col = cx + xs, row = cy - ys;
      const double fr = std::floor(row), fc = std::floor(col);
      const double ar = row - fr, ac = col - fc;
      const auto r0 = static_cast<std::ptrdiff_t>(fr), c0 = static_cast<std::ptrdiff_t>(fc);
      dst[r * W + c] = (1 - ar) * ((1 - ac) * at(r0, c0) + ac * at(r0, c0 + 1)) +
                       ar * ((1 - ac) * at(r0 + 1, c0) + ac * at(r0 + 1, c0 + 1));
    }
  }
}

// out(r, c) = in(r - dy, c - dx): positive dx moves content right, positive dy down.
inline void translate_plane(const double* src, double* dst, std::size_t h, std::size_t w, int dx, int dy) {
  const auto H = static_cast<std::ptrdiff_t>(h), W = static_cast<std::ptrdiff_t>(w);
  for (std::ptrdiff_t r = 0; r < H; ++r)
    for (std::ptrdiff_t c = 0; c < W; ++c) {
      const auto sr = r - dy, sc = c - dx;
      dst[r * W + c] = (sr < 0 || sr >= H || sc < 0 || sc >= W) ? 0.0 : src[sr * W + sc];
    }
}

// Rotates every plane of a square-image tensor.
inline Tensor rotate(const Tensor& img, double angle_deg) {
  if (img.h() != img.w()) throw ShapeError("rotate: image must be square, got " + img.shape().str());
  Tensor out(img.shape());
  for (std::size_t n = 0; n < img.n(); ++n)
    for (std::size_t c = 0; c < img.c(); ++c) rotate_plane(img.plane(n, c), out.plane(n, c), img.h(), img.w(), angle_deg);
  return out;
}

inline Tensor translate(const Tensor& img, int dx, int dy) {
  Tensor out(img.shape());
  for (std::size_t n = 0; n < img.n(); ++n)
    for (std::size_t c = 0; c < img.c(); ++c) translate_plane(img.plane(n, c), out.plane(n, c), img.h(), img.w(), dx, dy);
  return out;
}

// ---- Augmentation

struct AugmentSpec {
  double max_rotation_deg = 0.0;
  int max_translation_px = 0;

  void validate() const {
    if (!(max_rotation_deg >= 0.0 && max_rotation_deg <= 180.0))
      throw ConfigError("augment: max rotation must be in [0, 180] degrees");
    if (max_translation_px < 0 || max_translation_px > 27) throw ConfigError("augment: max translation must be in [0, 27] px");
  }
  bool identity() const { return max_rotation_deg == 0.0 && max_translation_px == 0; }
};

struct AugmentDraw {
  double angle_deg;
  int dx, dy;
};

// Always three draws per sample, in order: angle, dx, dy.
inline AugmentDraw draw_augment(const AugmentSpec& spec, Rng& rng) {
  const double t = spec.max_rotation_deg;
  const auto span = static_cast<std::uint64_t>(2 * spec.max_translation_px + 1);
  AugmentDraw d{};
  d.angle_deg = rng.uniform(-t, t);
  d.dx = static_cast<int>(rng.below(span)) - spec.max_translation_px;
  d.dy = static_cast<int>(rng.below(span)) - spec.max_translation_px;
  return d;
}

// Rotates then translates each sample with its own draws, in sample order.
// Results are clamped to [0, 1].
inline Tensor augment_batch(const Tensor& batch, const AugmentSpec& spec, Rng& rng) {
  spec.validate();
  if (batch.h() != batch.w()) throw ShapeError("augment_batch: images must be square");
  Tensor out(batch.shape());
  const std::size_t h = batch.h(), w = batch.w();
  std::vector<double> tmp(h * w);
  for (std::size_t n = 0; n < batch.n(); ++n) {
    const auto d = draw_augment(spec, rng);
    for (std::size_t c = 0; c < batch.c(); ++c) {
      const double* src = batch.plane(n, c);
      if (d.angle_deg != 0.0) {
        rotate_plane(src, tmp.data(), h, w, d.angle_deg);
        src = tmp.data();
      }
      double* dst = out.plane(n, c);
      translate_plane(src, dst, h, w, d.dx, d.dy);
      for (std::size_t i = 0; i < h * w; ++i) dst[i] = std::clamp(dst[i], 0.0, 1.0);
    }
  }
  return out;
}

}  // namespace prcn
