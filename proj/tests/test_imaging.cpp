#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "tlrl/imaging.hpp"
#include "tlrl/random.hpp"

using namespace tlrl;
using namespace tlrl::imaging;

namespace {

std::vector<double> random_vector(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal() * 3.0;
  return v;
}

}  // namespace

TEST(Colormap, Anchors) {
  EXPECT_EQ(colormap(0.0), (Rgb{0, 0, 255}));
  EXPECT_EQ(colormap(1.0), (Rgb{255, 0, 0}));
  EXPECT_EQ(colormap(0.25), (Rgb{0, 128, 127}));
}

TEST(Colormap, LutMatchesDirectInterpolation) {
  const auto& lut = default_colormap();
  for (int i = 0; i < 256; ++i) {
    const double t = i / 255.0;
    const double r = t <= 0.5 ? 0.0 : 255.0 * (t - 0.5) / 0.5;
    const double g = t <= 0.5 ? 255.0 * t / 0.5 : 255.0 * (1.0 - (t - 0.5) / 0.5);
    const double b = t <= 0.5 ? 255.0 * (1.0 - t / 0.5) : 0.0;
    const Rgb want{static_cast<std::uint8_t>(std::floor(r + 0.5)), static_cast<std::uint8_t>(std::floor(g + 0.5)),
                   static_cast<std::uint8_t>(std::floor(b + 0.5))};
    EXPECT_EQ(lut[static_cast<std::size_t>(i)], want) << i;
  }
  EXPECT_EQ(ColormapLut::index(-3.0), 0u);
  EXPECT_EQ(ColormapLut::index(7.0), 255u);
}

TEST(Grid, Side) {
  EXPECT_EQ(grid_side(1), 1u);
  EXPECT_EQ(grid_side(100), 10u);
  EXPECT_EQ(grid_side(101), 11u);
  EXPECT_EQ(grid_side(3328), 58u);
}

TEST(Image, DimensionsAndPalette) {
  Rng rng(1);
  const auto img = vector_to_image(random_vector(rng, 37));
  EXPECT_EQ(img.width, 224u);
  EXPECT_EQ(img.height, 224u);
  EXPECT_EQ(img.channels, 3u);
  EXPECT_EQ(img.pixels.size(), 224u * 224 * 3);
  std::set<std::tuple<int, int, int>> palette;
  for (const auto& c : default_colormap().entries()) palette.insert({c.r, c.g, c.b});
  for (std::size_t r = 0; r < 224; r += 7)
    for (std::size_t c = 0; c < 224; ++c) {
      const auto p = img.pixel(r, c);
      EXPECT_TRUE(palette.contains({p.r, p.g, p.b}));
    }
}

TEST(Image, ConstantVectorUsesMidPalette) {
  const auto img = vector_to_image(std::vector<double>(100, 4.2));
  const Rgb mid = default_colormap()[128];
  EXPECT_EQ(mid, (Rgb{1, 254, 0}));
  for (std::size_t r = 0; r < 224; ++r)
    for (std::size_t c = 0; c < 224; ++c) ASSERT_EQ(img.pixel(r, c), mid);
}

TEST(Image, CornerPixelsCarryFirstAndLastFeature) {
  std::vector<double> v(100);
  for (std::size_t k = 0; k < 100; ++k) v[k] = static_cast<double>(k);
  const auto img = vector_to_image(v);
  EXPECT_EQ(img.pixel(0, 0), colormap(0.0));
  EXPECT_EQ(img.pixel(223, 223), colormap(1.0));
}

// Independent per-pixel evaluation of the grid + nearest-neighbour rule.
TEST(Image, MatchesPixelOracle) {
  Rng rng(4);
  for (std::size_t f : {1u, 5u, 50u, 100u, 257u}) {
    const auto v = random_vector(rng, f);
    const auto img = vector_to_image(v);
    const double lo = *std::min_element(v.begin(), v.end()), hi = *std::max_element(v.begin(), v.end());
    std::size_t g = 1;
    while (g * g < f) ++g;
    for (std::size_t r = 0; r < 224; r += 3)
      for (std::size_t c = 0; c < 224; c += 5) {
        const std::size_t cell = (r * g / 224) * g + (c * g / 224);
        const double t = cell < f ? (hi > lo ? (v[cell] - lo) / (hi - lo) : 0.5) : 0.0;
        ASSERT_EQ(img.pixel(r, c), colormap(t)) << f << " " << r << " " << c;
      }
  }
}

TEST(Image, PositiveAffineInvariance) {
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const auto v = random_vector(rng, 1 + rng.index(150));
    const double a = std::pow(2.0, rng.uniform(-4, 4));
    const double b = rng.uniform(-50, 50);
    std::vector<double> w;
    for (double x : v) w.push_back(a * x + b);
    EXPECT_EQ(vector_to_image(w), vector_to_image(v)) << trial;
  }
}

TEST(Image, RejectsBadInput) {
  EXPECT_THROW(vector_to_image(std::vector<double>{}), SchemaError);
  EXPECT_THROW(vector_to_image(std::vector<double>{1.0, std::nan("")}), SchemaError);
}

TEST(RawDump, RoundTrip) {
  Rng rng(2);
  const auto img = vector_to_image(random_vector(rng, 64));
  std::stringstream buf;
  write_image_raw(buf, img);
  EXPECT_EQ(buf.str().size(), 12u + 224 * 224 * 3);
  EXPECT_EQ(read_image_raw(buf), img);
  std::stringstream bad("TLIX" + std::string(8, '\0'));
  EXPECT_THROW(read_image_raw(bad), FormatError);
}
