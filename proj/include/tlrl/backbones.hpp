#pragma once

#include <bit>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <istream>
#include <iterator>
#include <memory>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "tlrl/errors.hpp"
#include "tlrl/imaging.hpp"
#include "tlrl/random.hpp"

namespace tlrl::backbones {

struct Embedding {
  std::vector<double> values;
  std::string source;
  std::size_t dim() const { return values.size(); }
};

struct LayoutEntry {
  std::string source;
  std::size_t offset = 0;
  std::size_t dim = 0;
  bool operator==(const LayoutEntry&) const = default;
};

struct FusedEmbedding {
  std::vector<double> values;
  std::vector<LayoutEntry> layout;
  std::size_t dim() const { return values.size(); }
};

/// A frozen image feature extractor. Implementations must be immutable after
/// construction so one instance can serve concurrent callers.
class Extractor {
 public:
  virtual ~Extractor() = default;
  virtual std::string id() const = 0;
  virtual std::size_t output_dim() const = 0;
  virtual Embedding extract(const imaging::FeatureImage& image) const = 0;
};

/// Stand-in for a pretrained backbone: p x p patches are flattened, projected
/// by a fixed seeded matrix, rectified and average-pooled over patches.
class RandomProjectionExtractor final : public Extractor {
 public:
  RandomProjectionExtractor(std::size_t output_dim, std::uint64_t seed, std::size_t patch_size = 16)
      : dim_(output_dim), seed_(seed), patch_(patch_size) {
    if (output_dim == 0) throw ConfigError("extractor output dim must be positive");
    if (patch_size == 0 || imaging::kImageSide % patch_size != 0)
      throw ConfigError("patch size must divide " + std::to_string(imaging::kImageSide));
    const auto in = static_cast<Eigen::Index>(patch_input_dim());
    const double scale = 1.0 / std::sqrt(static_cast<double>(in));
    Rng rng(seed);
    projection_.resize(in, static_cast<Eigen::Index>(dim_));
    // filled row by row so the draw order matches the (input, output) layout
    for (Eigen::Index r = 0; r < in; ++r)
      for (Eigen::Index c = 0; c < projection_.cols(); ++c) projection_(r, c) = rng.uniform(-scale, scale);
  }

  std::string id() const override { return "rp:" + std::to_string(dim_) + ":" + std::to_string(seed_); }
  std::size_t output_dim() const override { return dim_; }
  std::size_t patch_size() const { return patch_; }
  std::uint64_t seed() const { return seed_; }
  std::size_t patch_input_dim() const { return patch_ * patch_ * imaging::kChannels; }
  std::size_t patch_count() const {
    const std::size_t per_side = imaging::kImageSide / patch_;
    return per_side * per_side;
  }
  /// (patch_input_dim x output_dim), rows ordered (y, x, channel) within a patch.
  const Eigen::MatrixXd& projection() const { return projection_; }

  Embedding extract(const imaging::FeatureImage& image) const override {
    if (image.width != imaging::kImageSide || image.height != imaging::kImageSide ||
        image.channels != imaging::kChannels || image.pixels.size() != image.width * image.height * image.channels)
      throw SchemaError("extract: image must be 224x224x3");
    const std::size_t per_side = imaging::kImageSide / patch_;
    Eigen::MatrixXd patches(static_cast<Eigen::Index>(patch_count()), static_cast<Eigen::Index>(patch_input_dim()));
    for (std::size_t py = 0; py < per_side; ++py) {
      for (std::size_t px = 0; px < per_side; ++px) {
        const auto row = static_cast<Eigen::Index>(py * per_side + px);
        Eigen::Index k = 0;
        for (std::size_t y = 0; y < patch_; ++y)
          for (std::size_t x = 0; x < patch_; ++x)
            for (std::size_t ch = 0; ch < imaging::kChannels; ++ch)
              patches(row, k++) = image.at(py * patch_ + y, px * patch_ + x, ch) / 255.0;
      }
    }
    const Eigen::RowVectorXd pooled = (patches * projection_).cwiseMax(0.0).colwise().mean();
    Embedding e;
    e.source = id();
    e.values.assign(pooled.data(), pooled.data() + pooled.size());
    return e;
  }

 private:
  std::size_t dim_;
  std::uint64_t seed_;
  std::size_t patch_;
  Eigen::MatrixXd projection_;
};

/// Concatenates embeddings in argument order.
inline FusedEmbedding fuse(std::span<const Embedding> parts) {
  if (parts.empty()) throw ConfigError("fuse needs at least one embedding");
  FusedEmbedding out;
  for (const auto& p : parts) {
    out.layout.push_back({p.source, out.values.size(), p.dim()});
    out.values.insert(out.values.end(), p.values.begin(), p.values.end());
  }
  return out;
}

template <typename... E>
  requires(std::same_as<E, Embedding> && ...)
FusedEmbedding fuse(const E&... parts) {
  const std::vector<Embedding> all{parts...};
  return fuse(std::span<const Embedding>(all));
}

/// Re-expresses a fused vector as an embedding so fusions can nest.
inline Embedding as_embedding(const FusedEmbedding& f) {
  std::string source;
  for (const auto& l : f.layout) source += (source.empty() ? "" : "+") + l.source;
  return {f.values, source};
}

// ---------------------------------------------------------------------------
// Embeddings file: "TLRL", u32 version=1, u32 rows, u32 dim, rows x u32 labels,
// rows x dim float32 row-major. All little-endian, no padding.

inline constexpr std::uint32_t kEmbeddingsVersion = 1;
inline constexpr std::size_t kEmbeddingsHeaderBytes = 16;

struct EmbeddingMatrix {
  std::size_t rows = 0;
  std::size_t dim = 0;
  std::vector<std::uint32_t> labels;
  std::vector<float> values;  // row-major

  float at(std::size_t r, std::size_t c) const { return values[r * dim + c]; }
  bool operator==(const EmbeddingMatrix&) const = default;

  Eigen::MatrixXd to_matrix() const {
    Eigen::MatrixXd m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(dim));
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < dim; ++c)
        m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = values[r * dim + c];
    return m;
  }
};

inline std::size_t embeddings_file_size(std::size_t rows, std::size_t dim) {
  return kEmbeddingsHeaderBytes + rows * 4 + rows * dim * 4;
}

namespace detail {

inline void put_u32(std::vector<unsigned char>& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace detail

inline std::vector<unsigned char> encode_embeddings(const EmbeddingMatrix& m) {
  if (m.labels.size() != m.rows) throw FormatError("label count does not match row count");
  if (m.values.size() != m.rows * m.dim) throw FormatError("value count does not match rows x dim");
  if (m.rows > 0xffffffffULL || m.dim > 0xffffffffULL) throw FormatError("matrix too large for u32 header");
  std::vector<unsigned char> buf;
  buf.reserve(embeddings_file_size(m.rows, m.dim));
  for (char c : {'T', 'L', 'R', 'L'}) buf.push_back(static_cast<unsigned char>(c));
  detail::put_u32(buf, kEmbeddingsVersion);
  detail::put_u32(buf, static_cast<std::uint32_t>(m.rows));
  detail::put_u32(buf, static_cast<std::uint32_t>(m.dim));
  for (auto l : m.labels) detail::put_u32(buf, l);
  for (float v : m.values) detail::put_u32(buf, std::bit_cast<std::uint32_t>(v));
  return buf;
}

inline EmbeddingMatrix decode_embeddings(std::span<const unsigned char> bytes) {
  if (bytes.size() < kEmbeddingsHeaderBytes) throw FormatError("embeddings file truncated in header");
  if (bytes[0] != 'T' || bytes[1] != 'L' || bytes[2] != 'R' || bytes[3] != 'L')
    throw FormatError("embeddings file has bad magic");
  const auto version = detail::get_u32(bytes.data() + 4);
  if (version != kEmbeddingsVersion) throw FormatError("unsupported embeddings version " + std::to_string(version));
  EmbeddingMatrix m;
  m.rows = detail::get_u32(bytes.data() + 8);
  m.dim = detail::get_u32(bytes.data() + 12);
  const std::size_t expected = embeddings_file_size(m.rows, m.dim);
  if (bytes.size() < expected) throw FormatError("embeddings payload truncated");
  if (bytes.size() > expected) throw FormatError("embeddings file has trailing bytes beyond rows x dim");
  const unsigned char* p = bytes.data() + kEmbeddingsHeaderBytes;
  m.labels.resize(m.rows);
  for (auto& l : m.labels) {
    l = detail::get_u32(p);
    if (l > 1) throw FormatError("embeddings label out of range");
    p += 4;
  }
  m.values.resize(m.rows * m.dim);
  for (auto& v : m.values) {
    v = std::bit_cast<float>(detail::get_u32(p));
    p += 4;
  }
  return m;
}

inline void write_embeddings(const std::string& path, const EmbeddingMatrix& m) {
  const auto buf = encode_embeddings(m);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw FormatError("failed writing " + path);
}

inline EmbeddingMatrix read_embeddings(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_embeddings(buf);
}

/// FNV-1a over the label and value payload; identifies a dataset in reports.
inline std::uint64_t fingerprint(const EmbeddingMatrix& m) {
  const auto buf = encode_embeddings(m);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = kEmbeddingsHeaderBytes - 8; i < buf.size(); ++i) {
    h ^= buf[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace tlrl::backbones
