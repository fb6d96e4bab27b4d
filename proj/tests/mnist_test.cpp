#include <gtest/gtest.h>
#include <zlib.h>

#include <complex>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "prcn/mnist.hpp"
#include "test_util.hpp"

using namespace prcn;

namespace {

void be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

// Two 28x28 images: a ramp and a checkerboard with a saturated corner.
struct Fixture {
  std::vector<std::uint8_t> images, labels;
};

Fixture two_image_fixture() {
  Fixture f;
  be32(f.images, 0x803);
  be32(f.images, 2);
  be32(f.images, 28);
  be32(f.images, 28);
  for (int i = 0; i < 784; ++i) f.images.push_back(static_cast<std::uint8_t>(i % 256));
  for (int i = 0; i < 784; ++i) f.images.push_back(i == 0 ? 255 : static_cast<std::uint8_t>(((i / 28 + i % 28) % 2) * 128));
  be32(f.labels, 0x801);
  be32(f.labels, 2);
  f.labels.push_back(7);
  f.labels.push_back(3);
  return f;
}

std::vector<std::uint8_t> gzip(const std::vector<std::uint8_t>& raw) {
  z_stream zs{};
  deflateInit2(&zs, Z_DEFAULT_COMPRESSION, Z_DEFLATED, 16 + MAX_WBITS, 8, Z_DEFAULT_STRATEGY);
  std::vector<std::uint8_t> out(deflateBound(&zs, raw.size()) + 32);
  zs.next_in = const_cast<Bytef*>(raw.data());
  zs.avail_in = static_cast<uInt>(raw.size());
  zs.next_out = out.data();
  zs.avail_out = static_cast<uInt>(out.size());
  deflate(&zs, Z_FINISH);
  out.resize(zs.total_out);
  deflateEnd(&zs);
  return out;
}

// Independent inverse map: positions as complex numbers x + i*y with y up,
// output z samples the source at z * exp(-i*theta).
Tensor rotate_oracle(const Tensor& img, double deg) {
  const std::size_t n = img.h();
  const double ctr = (static_cast<double>(n) - 1.0) / 2.0;
  const std::complex<double> turn = std::polar(1.0, -deg * std::numbers::pi / 180.0);
  auto pix = [&](long r, long c) {
    if (r < 0 || c < 0 || r >= static_cast<long>(n) || c >= static_cast<long>(n)) return 0.0;
    return img.at(0, 0, static_cast<std::size_t>(r), static_cast<std::size_t>(c));
  };
  Tensor out(img.shape());
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c) {
      const std::complex<double> z(static_cast<double>(c) - ctr, ctr - static_cast<double>(r));
      const std::complex<double> s = z * turn;
      const double sc = s.real() + ctr, sr = ctr - s.imag();
      const long r0 = static_cast<long>(std::floor(sr)), c0 = static_cast<long>(std::floor(sc));
      const double fr = sr - static_cast<double>(r0), fc = sc - static_cast<double>(c0);
      out.at(0, 0, r, c) = (1 - fr) * (1 - fc) * pix(r0, c0) + (1 - fr) * fc * pix(r0, c0 + 1) +
                           fr * (1 - fc) * pix(r0 + 1, c0) + fr * fc * pix(r0 + 1, c0 + 1);
    }
  return out;
}

}  // namespace

TEST(ParseIdx, WellFormedFixture) {
  const auto f = two_image_fixture();
  const Dataset d = parse_idx(f.images, f.labels);
  EXPECT_EQ(d.images.shape(), (Shape{2, 1, 28, 28}));
  EXPECT_EQ(d.labels, (std::vector<int>{7, 3}));
  EXPECT_EQ(d.images.at(1, 0, 0, 0), 1.0);
  EXPECT_EQ(d.images.at(0, 0, 0, 1), 1.0 / 255.0);
  for (std::size_t i = 0; i < d.images.size(); ++i) {
    EXPECT_GE(d.images[i], 0.0);
    EXPECT_LE(d.images[i], 1.0);
  }
}

TEST(ParseIdx, WrongMagicNamesOffset) {
  auto f = two_image_fixture();
  f.images[3] = 0x01;
  try {
    parse_idx(f.images, f.labels);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 0u);
    EXPECT_NE(std::string(e.what()).find("offset 0"), std::string::npos);
  }
  auto g = two_image_fixture();
  g.labels[3] = 0x03;
  EXPECT_THROW(parse_idx(g.images, g.labels), ParseError);
}

TEST(ParseIdx, RejectsTruncationMismatchAndBadLabels) {
  auto f = two_image_fixture();
  auto short_images = f.images;
  short_images.pop_back();
  EXPECT_THROW(parse_idx(short_images, f.labels), ParseError);
  EXPECT_THROW(parse_idx(std::vector<std::uint8_t>(f.images.begin(), f.images.begin() + 6), f.labels), ParseError);

  auto count = f.labels;
  count[7] = 3;
  count.push_back(1);
  EXPECT_THROW(parse_idx(f.images, count), ParseError);

  auto label = f.labels;
  label[8] = 10;
  try {
    parse_idx(f.images, label);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 8u);
  }
  auto trailing = f.images;
  trailing.push_back(0);
  EXPECT_THROW(parse_idx(trailing, f.labels), ParseError);
}

TEST(ParseIdx, SerializeRoundTripIsBitIdentical) {
  const auto f = two_image_fixture();
  const auto bytes = serialize_idx(parse_idx(f.images, f.labels));
  EXPECT_EQ(bytes.images, f.images);
  EXPECT_EQ(bytes.labels, f.labels);
}

TEST(ParseIdx, GzipIsInflatedTransparently) {
  const auto f = two_image_fixture();
  const auto dir = std::filesystem::temp_directory_path();
  const auto im = dir / "prcn_mnist_test_images.gz", lb = dir / "prcn_mnist_test_labels";
  {
    const auto z = gzip(f.images);
    EXPECT_TRUE(is_gzip(z));
    EXPECT_EQ(gunzip(z), f.images);
    std::ofstream(im, std::ios::binary).write(reinterpret_cast<const char*>(z.data()), static_cast<std::streamsize>(z.size()));
    std::ofstream(lb, std::ios::binary)
        .write(reinterpret_cast<const char*>(f.labels.data()), static_cast<std::streamsize>(f.labels.size()));
  }
  const Dataset d = load_idx(im.string(), lb.string());
  EXPECT_EQ(d.images, parse_idx(f.images, f.labels).images);
  std::vector<std::uint8_t> broken = gzip(f.images);
  broken.resize(broken.size() / 2);
  EXPECT_THROW(gunzip(broken), Error);
  std::filesystem::remove(im);
  std::filesystem::remove(lb);
}

TEST(Rotate, ZeroAndFullTurnAreIdentity) {
  Rng rng(1);
  const Tensor img = test::random_tensor({1, 1, 28, 28}, rng, 0.0, 1.0);
  EXPECT_EQ(rotate(img, 0.0), img);
  EXPECT_LT(test::max_abs_diff(rotate(img, 360.0), img), 1e-9);
}

TEST(Rotate, QuarterTurnMovesBrightPixelCounterclockwise) {
  // Positions read as (x, y) = (column, row) with rows growing downward.
  // A pixel right of centre ends up above it. The centre is 13.5, so the
  // exact target row is 13 - r.
  for (std::size_t r : {2u, 5u, 9u}) {
    Tensor img(1, 1, 28, 28);
    img.at(0, 0, 14, 14 + r) = 1.0;
    const Tensor out = rotate(img, 90.0);
    EXPECT_NEAR(out.at(0, 0, 13 - r, 14), 1.0, 1e-9) << "r " << r;
    double total = 0;
    for (std::size_t i = 0; i < out.size(); ++i) total += out[i];
    EXPECT_NEAR(total, 1.0, 1e-9);
    EXPECT_LT(test::max_abs_diff(out, rotate_oracle(img, 90.0)), 1e-12);
  }
}

TEST(Rotate, MatchesInverseMapOracleAtArbitraryAngles) {
  Rng rng(2);
  for (double deg : {-90.0, -37.5, 15.0, 45.0, 60.0, 123.0}) {
    const Tensor img = test::random_tensor({1, 1, 28, 28}, rng, 0.0, 1.0);
    EXPECT_LT(test::max_abs_diff(rotate(img, deg), rotate_oracle(img, deg)), 1e-12) << deg;
  }
}

TEST(Rotate, IsLinearInIntensity) {
  Rng rng(3);
  const Tensor img = test::random_tensor({2, 1, 28, 28}, rng, 0.0, 1.0);
  Tensor scaled = img;
  for (std::size_t i = 0; i < scaled.size(); ++i) scaled[i] *= 0.37;
  Tensor expected = rotate(img, 33.0);
  for (std::size_t i = 0; i < expected.size(); ++i) expected[i] *= 0.37;
  EXPECT_LT(test::max_abs_diff(rotate(scaled, 33.0), expected), 1e-12);
  EXPECT_THROW(rotate(Tensor(1, 1, 4, 5), 10.0), ShapeError);
}

TEST(Translate, IdentityShiftAndInverse) {
  Rng rng(4);
  const Tensor img = test::random_tensor({1, 1, 28, 28}, rng, 0.0, 1.0);
  EXPECT_EQ(translate(img, 0, 0), img);
  const Tensor moved = translate(img, 3, -2);
  EXPECT_EQ(moved.at(0, 0, 10, 8), img.at(0, 0, 12, 5));
  EXPECT_EQ(moved.at(0, 0, 0, 0), 0.0);   // column 0 came from column -3
  EXPECT_EQ(moved.at(0, 0, 27, 5), 0.0);  // row 27 came from row 29
  const Tensor back = translate(moved, -3, 2);
  for (std::size_t r = 0; r < 28; ++r)
    for (std::size_t c = 0; c < 28; ++c) {
      const bool kept = c < 25 && r >= 2;
      EXPECT_EQ(back.at(0, 0, r, c), kept ? img.at(0, 0, r, c) : 0.0);
    }
}

TEST(Translate, ConservesSumWhileInFrame) {
  Tensor img(1, 1, 28, 28);
  Rng rng(5);
  for (std::size_t r = 10; r < 18; ++r)
    for (std::size_t c = 10; c < 18; ++c) img.at(0, 0, r, c) = rng.uniform();
  auto sum = [](const Tensor& t) {
    double s = 0;
    for (std::size_t i = 0; i < t.size(); ++i) s += t[i];
    return s;
  };
  for (int dx = -10; dx <= 10; dx += 5)
    for (int dy = -10; dy <= 10; dy += 5) EXPECT_DOUBLE_EQ(sum(translate(img, dx, dy)), sum(img));
}

TEST(Augment, IdentitySpecIsIdentity) {
  Rng rng(6), draws(7);
  const Tensor batch = test::random_tensor({3, 1, 28, 28}, rng, 0.0, 1.0);
  EXPECT_EQ(augment_batch(batch, AugmentSpec{}, draws), batch);
}

TEST(Augment, DrawsStayInBounds) {
  const AugmentSpec spec{90.0, 12};
  Rng rng(8);
  double lo = 0, hi = 0;
  int dmin = 0, dmax = 0;
  for (int i = 0; i < 100000; ++i) {
    const auto d = draw_augment(spec, rng);
    ASSERT_GE(d.angle_deg, -90.0);
    ASSERT_LE(d.angle_deg, 90.0);
    ASSERT_GE(std::min(d.dx, d.dy), -12);
    ASSERT_LE(std::max(d.dx, d.dy), 12);
    lo = std::min(lo, d.angle_deg);
    hi = std::max(hi, d.angle_deg);
    dmin = std::min({dmin, d.dx, d.dy});
    dmax = std::max({dmax, d.dx, d.dy});
  }
  EXPECT_LT(lo, -89.0);
  EXPECT_GT(hi, 89.0);
  EXPECT_EQ(dmin, -12);
  EXPECT_EQ(dmax, 12);
}

TEST(Augment, DeterministicAndInUnitRange) {
  Rng rng(9);
  const Tensor batch = test::random_tensor({8, 1, 28, 28}, rng, 0.0, 1.0);
  const AugmentSpec spec{90.0, 12};
  Rng a(10), b(10);
  const Tensor x = augment_batch(batch, spec, a), y = augment_batch(batch, spec, b);
  EXPECT_EQ(x, y);
  EXPECT_EQ(a.next(), b.next());
  for (std::size_t i = 0; i < x.size(); ++i) {
    ASSERT_GE(x[i], 0.0);
    ASSERT_LE(x[i], 1.0);
  }
}

TEST(Augment, RotatesThenTranslatesPerSample) {
  Rng rng(11);
  const Tensor batch = test::random_tensor({2, 1, 28, 28}, rng, 0.0, 1.0);
  const AugmentSpec spec{45.0, 4};
  Rng draws(12), replay(12);
  const Tensor out = augment_batch(batch, spec, draws);
  for (std::size_t n = 0; n < 2; ++n) {
    const auto d = draw_augment(spec, replay);
    Tensor one(1, 1, 28, 28);
    std::copy_n(batch.plane(n, 0), 784, one.data());
    const Tensor ref = translate(rotate(one, d.angle_deg), d.dx, d.dy);
    for (std::size_t i = 0; i < 784; ++i) EXPECT_EQ(out.plane(n, 0)[i], std::clamp(ref[i], 0.0, 1.0));
  }
}

TEST(Augment, RejectsOutOfRangeSpec) {
  Rng rng(13);
  EXPECT_THROW(augment_batch(Tensor(1, 1, 4, 4), AugmentSpec{200.0, 0}, rng), ConfigError);
  EXPECT_THROW(augment_batch(Tensor(1, 1, 4, 4), AugmentSpec{0.0, -1}, rng), ConfigError);
}
