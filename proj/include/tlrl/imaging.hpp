#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <istream>
#include <ostream>
#include <span>
#include <vector>

#include "tlrl/errors.hpp"

namespace tlrl::imaging {

inline constexpr std::size_t kImageSide = 224;
inline constexpr std::size_t kChannels = 3;

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  bool operator==(const Rgb&) const = default;
};

/// 224x224x3 raster, row-major, channel-interleaved.
struct FeatureImage {
  std::size_t width = kImageSide;
  std::size_t height = kImageSide;
  std::size_t channels = kChannels;
  std::vector<std::uint8_t> pixels = std::vector<std::uint8_t>(kImageSide * kImageSide * kChannels, 0);

  std::uint8_t at(std::size_t row, std::size_t col, std::size_t ch) const {
    return pixels[(row * width + col) * channels + ch];
  }
  Rgb pixel(std::size_t row, std::size_t col) const {
    const std::size_t o = (row * width + col) * channels;
    return {pixels[o], pixels[o + 1], pixels[o + 2]};
  }
  bool operator==(const FeatureImage&) const = default;
};

struct ColorAnchor {
  double t;
  Rgb color;
};

/// 256-entry palette built by piecewise-linear interpolation between anchors,
/// each channel rounded half-up.
class ColormapLut {
 public:
  ColormapLut() : ColormapLut(std::array<ColorAnchor, 3>{{{0.0, {0, 0, 255}}, {0.5, {0, 255, 0}}, {1.0, {255, 0, 0}}}}) {}

  template <std::size_t N>
  explicit ColormapLut(const std::array<ColorAnchor, N>& anchors) {
    static_assert(N >= 2);
    for (std::size_t i = 0; i < 256; ++i) {
      const double t = static_cast<double>(i) / 255.0;
      std::size_t seg = 0;
      while (seg + 2 < N && t > anchors[seg + 1].t) ++seg;
      const auto& a = anchors[seg];
      const auto& b = anchors[seg + 1];
      const double u = (t - a.t) / (b.t - a.t);
      auto lerp = [u](std::uint8_t x, std::uint8_t y) {
        const double v = x + (static_cast<double>(y) - x) * u;
        return static_cast<std::uint8_t>(std::clamp(std::floor(v + 0.5), 0.0, 255.0));
      };
      lut_[i] = {lerp(a.color.r, b.color.r), lerp(a.color.g, b.color.g), lerp(a.color.b, b.color.b)};
    }
  }

  const Rgb& operator[](std::size_t i) const { return lut_[i]; }
  const std::array<Rgb, 256>& entries() const { return lut_; }

  /// Palette index for t; t is clamped to [0,1].
  static std::size_t index(double t) {
    t = std::clamp(t, 0.0, 1.0);
    return static_cast<std::size_t>(std::floor(t * 255.0 + 0.5));
  }

  Rgb operator()(double t) const { return lut_[index(t)]; }

 private:
  std::array<Rgb, 256> lut_{};
};

inline const ColormapLut& default_colormap() {
  static const ColormapLut lut;
  return lut;
}

/// Blue -> green -> red map evaluated through the palette.
inline Rgb colormap(double t) { return default_colormap()(t); }

/// Side length of the square grid holding `features` cells.
inline std::size_t grid_side(std::size_t features) {
  auto g = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(features))));
  while (g * g < features) ++g;
  while (g > 1 && (g - 1) * (g - 1) >= features) --g;
  return g;
}

/// Min-max normalizes v, lays it on a ceil(sqrt(F)) grid (unused cells 0),
/// upsamples nearest-neighbour to 224x224 and colours each cell.
inline FeatureImage vector_to_image(std::span<const double> v, const ColormapLut& lut = default_colormap()) {
  if (v.empty()) throw SchemaError("vector_to_image needs at least one feature");
  for (double x : v)
    if (!std::isfinite(x)) throw SchemaError("vector_to_image: non-finite feature value");

  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double min = *lo;
  const double range = *hi - *lo;
  const std::size_t g = grid_side(v.size());

  std::vector<std::size_t> cell_color(g * g, ColormapLut::index(0.0));
  for (std::size_t k = 0; k < v.size(); ++k) {
    const double t = range > 0.0 ? (v[k] - min) / range : 0.5;
    cell_color[k] = ColormapLut::index(t);
  }

  std::array<std::size_t, kImageSide> src{};
  for (std::size_t i = 0; i < kImageSide; ++i) src[i] = i * g / kImageSide;

  FeatureImage img;
  auto* out = img.pixels.data();
  for (std::size_t r = 0; r < kImageSide; ++r) {
    const std::size_t row_base = src[r] * g;
    for (std::size_t c = 0; c < kImageSide; ++c) {
      const Rgb& px = lut[cell_color[row_base + src[c]]];
      *out++ = px.r;
      *out++ = px.g;
      *out++ = px.b;
    }
  }
  return img;
}

// Raw dump: "TLIM", u16 width, u16 height, u16 channels, u16 reserved (LE), pixels.

inline void write_image_raw(std::ostream& out, const FeatureImage& img) {
  const char magic[4] = {'T', 'L', 'I', 'M'};
  out.write(magic, 4);
  auto put16 = [&](std::size_t v) {
    const char b[2] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff)};
    out.write(b, 2);
  };
  put16(img.width);
  put16(img.height);
  put16(img.channels);
  put16(0);
  out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!out) throw FormatError("failed writing image");
}

inline FeatureImage read_image_raw(std::istream& in) {
  unsigned char header[12];
  if (!in.read(reinterpret_cast<char*>(header), 12)) throw FormatError("truncated image header");
  if (header[0] != 'T' || header[1] != 'L' || header[2] != 'I' || header[3] != 'M')
    throw FormatError("bad image magic");
  auto get16 = [&](std::size_t o) { return static_cast<std::size_t>(header[o] | (header[o + 1] << 8)); };
  FeatureImage img;
  img.width = get16(4);
  img.height = get16(6);
  img.channels = get16(8);
  if (img.width != kImageSide || img.height != kImageSide || img.channels != kChannels)
    throw FormatError("unsupported image dimensions");
  img.pixels.assign(img.width * img.height * img.channels, 0);
  if (!in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size())))
    throw FormatError("truncated image payload");
  return img;
}

}  // namespace tlrl::imaging
