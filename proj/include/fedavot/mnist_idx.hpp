#pragma once

// IDX reader for MNIST-style files: big-endian header, unsigned byte payload.
//   images: magic 0x00000803, count, rows, cols, then count*rows*cols bytes
//   labels: magic 0x00000801, count, then count bytes

#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "fedavot/errors.hpp"
#include "fedavot/tasks.hpp"

namespace fedavot {

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

class IdxError : public IoError {
 public:
  enum class Kind { kBadMagic, kTruncated, kCountMismatch };

  IdxError(Kind kind, std::string file, std::size_t offset, const std::string& detail)
      : IoError(file + " @" + std::to_string(offset) + ": " + detail),
        kind_(kind),
        file_(std::move(file)),
        offset_(offset) {}

  Kind kind() const noexcept { return kind_; }
  const std::string& file() const noexcept { return file_; }
  std::size_t offset() const noexcept { return offset_; }

 private:
  Kind kind_;
  std::string file_;
  std::size_t offset_;
};

struct IdxDataset {
  Matrix features;  // count x (rows * cols), scaled to [0, 1]
  std::vector<int> labels;
  std::size_t rows = 0;
  std::size_t cols = 0;
};

namespace detail {

inline std::vector<std::uint8_t> read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in),
                                   std::istreambuf_iterator<char>());
}

inline std::uint32_t read_be32(const std::vector<std::uint8_t>& bytes, std::size_t offset,
                               const std::string& path) {
  if (bytes.size() < offset + 4) {
    throw IdxError(IdxError::Kind::kTruncated, path, offset, "header ends early");
  }
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

inline void expect_magic(std::uint32_t got, std::uint32_t want, const std::string& path) {
  if (got != want) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "magic 0x%08x, expected 0x%08x", got, want);
    throw IdxError(IdxError::Kind::kBadMagic, path, 0, buf);
  }
}

}  // namespace detail

inline IdxDataset load_mnist_idx(const std::string& images_path, const std::string& labels_path) {
  const auto images = detail::read_bytes(images_path);
  const auto labels = detail::read_bytes(labels_path);

  detail::expect_magic(detail::read_be32(images, 0, images_path), kIdxImageMagic, images_path);
  detail::expect_magic(detail::read_be32(labels, 0, labels_path), kIdxLabelMagic, labels_path);

  const std::size_t n_images = detail::read_be32(images, 4, images_path);
  const std::size_t rows = detail::read_be32(images, 8, images_path);
  const std::size_t cols = detail::read_be32(images, 12, images_path);
  const std::size_t n_labels = detail::read_be32(labels, 4, labels_path);
  if (n_images != n_labels) {
    throw IdxError(IdxError::Kind::kCountMismatch, labels_path, 4,
                   "label count " + std::to_string(n_labels) + " differs from image count " +
                       std::to_string(n_images) + " in " + images_path);
  }

  constexpr std::size_t kImageHeader = 16;
  constexpr std::size_t kLabelHeader = 8;
  const std::size_t pixels = rows * cols;
  if (images.size() < kImageHeader + n_images * pixels) {
    throw IdxError(IdxError::Kind::kTruncated, images_path, images.size(),
                   "expected " + std::to_string(kImageHeader + n_images * pixels) + " bytes");
  }
  if (labels.size() < kLabelHeader + n_labels) {
    throw IdxError(IdxError::Kind::kTruncated, labels_path, labels.size(),
                   "expected " + std::to_string(kLabelHeader + n_labels) + " bytes");
  }

  IdxDataset out;
  out.rows = rows;
  out.cols = cols;
  out.features.resize(static_cast<Eigen::Index>(n_images), static_cast<Eigen::Index>(pixels));
  for (std::size_t s = 0; s < n_images; ++s) {
    const std::uint8_t* px = images.data() + kImageHeader + s * pixels;
    for (std::size_t k = 0; k < pixels; ++k) {
      out.features(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(k)) = px[k] / 255.0;
    }
  }
  out.labels.resize(n_labels);
  for (std::size_t s = 0; s < n_labels; ++s) out.labels[s] = labels[kLabelHeader + s];
  return out;
}

}  // namespace fedavot
