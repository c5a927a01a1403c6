#pragma once

// MNIST (IDX) and CIFAR-10 (binary) loaders, seeded synthetic datasets and
// one-hot targets.

#include <zlib.h>

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <sstream>
#include <random>
#include <string>
#include <vector>

#include "hfcnn/tensor.hpp"

namespace hfcnn {

struct Dataset {
  std::string name;
  Shape sample_shape;             // height, width, channels
  std::size_t n_classes = 10;
  std::vector<double> pixels;     // size() * sample_shape.size(), in [0, 1]
  std::vector<std::uint32_t> labels;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t sample_size() const noexcept { return sample_shape.size(); }

  std::span<const double> image(std::size_t i) const {
    return std::span<const double>(pixels).subspan(i * sample_size(), sample_size());
  }
  Tensor tensor(std::size_t i) const {
    auto img = image(i);
    return Tensor(sample_shape, std::vector<double>(img.begin(), img.end()));
  }
};

/// The first `n` samples.
inline Dataset head(const Dataset& d, std::size_t n) {
  if (n == 0 || n > d.size())
    throw Error(Errc::invalid_argument, "head(" + std::to_string(n) + ") of a " + std::to_string(d.size()) + "-sample dataset");
  Dataset out{d.name, d.sample_shape, d.n_classes, {}, {}};
  out.pixels.assign(d.pixels.begin(), d.pixels.begin() + static_cast<std::ptrdiff_t>(n * d.sample_size()));
  out.labels.assign(d.labels.begin(), d.labels.begin() + static_cast<std::ptrdiff_t>(n));
  return out;
}

/// Reinterprets each sample as height x width x channels (channel-last),
/// e.g. 3 consecutive bytes per RGB pixel. The element count must match.
inline Dataset with_dims(Dataset d, std::size_t height, std::size_t width, std::size_t channels) {
  Shape s{height, width, channels};
  if (s.size() != d.sample_size())
    throw Error(Errc::shape_mismatch, "dimensions " + s.str() + " do not match samples of shape " + d.sample_shape.str() +
                                          " (" + std::to_string(d.sample_size()) + " values)");
  d.sample_shape = s;
  return d;
}

inline std::vector<std::vector<double>> one_hot(std::span<const std::uint32_t> labels, std::size_t n_classes) {
  std::vector<std::vector<double>> out;
  out.reserve(labels.size());
  for (auto y : labels) {
    if (y >= n_classes)
      throw Error(Errc::out_of_bounds, "label " + std::to_string(y) + " outside [0, " + std::to_string(n_classes) + ")");
    std::vector<double> row(n_classes, 0.0);
    row[y] = 1.0;
    out.push_back(std::move(row));
  }
  return out;
}

namespace detail {

/// Reads a whole file, inflating it when it starts with the gzip magic.
inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(Errc::io, "cannot open " + path);
  std::vector<std::uint8_t> raw((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (raw.size() < 2 || raw[0] != 0x1f || raw[1] != 0x8b) return raw;

  gzFile gz = gzopen(path.c_str(), "rb");
  if (!gz) throw Error(Errc::io, "cannot open gzip stream " + path);
  std::vector<std::uint8_t> out;
  std::array<std::uint8_t, 1 << 16> buf;
  for (;;) {
    const int got = gzread(gz, buf.data(), static_cast<unsigned>(buf.size()));
    if (got < 0) {
      gzclose(gz);
      throw Error(Errc::format, "corrupt gzip data in " + path);
    }
    if (got == 0) break;
    out.insert(out.end(), buf.begin(), buf.begin() + got);
  }
  gzclose(gz);
  return out;
}

inline std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t off, const std::string& path) {
  if (off + 4 > b.size()) throw Error(Errc::format, "truncated IDX header in " + path);
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

inline void write_be32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<std::uint8_t>(v >> s));
}

inline void write_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(Errc::io, "cannot write " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error(Errc::io, "short write to " + path);
}

inline std::string hex32(std::uint32_t v) {
  std::ostringstream os;
  os << "0x" << std::hex << std::setw(8) << std::setfill('0') << v;
  return os.str();
}

inline std::uint8_t to_byte(double v) {
  const double s = std::round(v * 255.0);
  return static_cast<std::uint8_t>(s < 0 ? 0 : (s > 255 ? 255 : s));
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;
inline constexpr std::size_t kCifarRecord = 3073;

inline Dataset load_mnist_idx(const std::string& images_path, const std::string& labels_path) {
  const auto img = detail::read_file_bytes(images_path);
  const auto lab = detail::read_file_bytes(labels_path);

  if (const auto m = detail::read_be32(img, 0, images_path); m != kIdxImageMagic)
    throw Error(Errc::format, images_path + ": bad image magic " + detail::hex32(m));
  if (const auto m = detail::read_be32(lab, 0, labels_path); m != kIdxLabelMagic)
    throw Error(Errc::format, labels_path + ": bad label magic " + detail::hex32(m));

  const std::size_t count = detail::read_be32(img, 4, images_path);
  const std::size_t rows = detail::read_be32(img, 8, images_path);
  const std::size_t cols = detail::read_be32(img, 12, images_path);
  const std::size_t nlab = detail::read_be32(lab, 4, labels_path);
  if (count != nlab)
    throw Error(Errc::format, "image count " + std::to_string(count) + " != label count " + std::to_string(nlab));
  if (count == 0 || rows == 0 || cols == 0) throw Error(Errc::format, images_path + ": empty IDX dimensions");
  if (img.size() != 16 + count * rows * cols) throw Error(Errc::format, images_path + ": truncated or oversized image data");
  if (lab.size() != 8 + count) throw Error(Errc::format, labels_path + ": truncated or oversized label data");

  Dataset d{"mnist", Shape{rows, cols, 1}, 10, {}, {}};
  d.pixels.resize(count * rows * cols);
  for (std::size_t i = 0; i < d.pixels.size(); ++i) d.pixels[i] = img[16 + i] / 255.0;
  d.labels.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    d.labels[i] = lab[8 + i];
    if (d.labels[i] >= d.n_classes) throw Error(Errc::format, labels_path + ": label >= 10");
  }
  return d;
}

/// Each record: one label byte, then 1024 red, 1024 green and 1024 blue
/// bytes, each plane row-major 32 x 32.
inline Dataset load_cifar10(const std::vector<std::string>& bin_paths) {
  if (bin_paths.empty()) throw Error(Errc::invalid_argument, "no CIFAR-10 files given");
  Dataset d{"cifar10", Shape{32, 32, 3}, 10, {}, {}};
  for (const auto& path : bin_paths) {
    const auto bytes = detail::read_file_bytes(path);
    if (bytes.empty() || bytes.size() % kCifarRecord != 0)
      throw Error(Errc::format, path + ": length " + std::to_string(bytes.size()) + " is not a multiple of 3073");
    const std::size_t n = bytes.size() / kCifarRecord;
    for (std::size_t r = 0; r < n; ++r) {
      const std::uint8_t* rec = bytes.data() + r * kCifarRecord;
      if (rec[0] >= 10) throw Error(Errc::format, path + ": label " + std::to_string(rec[0]) + " >= 10");
      d.labels.push_back(rec[0]);
      for (std::size_t i = 0; i < 32; ++i)
        for (std::size_t j = 0; j < 32; ++j)
          for (std::size_t c = 0; c < 3; ++c) d.pixels.push_back(rec[1 + c * 1024 + i * 32 + j] / 255.0);
    }
  }
  return d;
}

/// Writes `d` as an IDX image/label file pair (pixels scaled back to bytes).
inline void write_mnist_idx(const Dataset& d, const std::string& images_path, const std::string& labels_path) {
  std::vector<std::uint8_t> img, lab;
  detail::write_be32(img, kIdxImageMagic);
  detail::write_be32(img, static_cast<std::uint32_t>(d.size()));
  detail::write_be32(img, static_cast<std::uint32_t>(d.sample_shape[0]));
  detail::write_be32(img, static_cast<std::uint32_t>(d.sample_size() / d.sample_shape[0]));
  for (double v : d.pixels) img.push_back(detail::to_byte(v));
  detail::write_be32(lab, kIdxLabelMagic);
  detail::write_be32(lab, static_cast<std::uint32_t>(d.size()));
  for (auto y : d.labels) lab.push_back(static_cast<std::uint8_t>(y));
  detail::write_bytes(images_path, img);
  detail::write_bytes(labels_path, lab);
}

inline void write_cifar10(const Dataset& d, const std::string& path) {
  if (d.sample_shape != Shape{32, 32, 3}) throw Error(Errc::shape_mismatch, "CIFAR-10 records are 32x32x3");
  std::vector<std::uint8_t> out;
  out.reserve(d.size() * kCifarRecord);
  for (std::size_t r = 0; r < d.size(); ++r) {
    out.push_back(static_cast<std::uint8_t>(d.labels[r]));
    const auto img = d.image(r);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t p = 0; p < 1024; ++p) out.push_back(detail::to_byte(img[p * 3 + c]));
  }
  detail::write_bytes(path, out);
}

/// Uniform pixels; label = argmax_k <P_k, x - 1/2> for fixed random
/// projections P_k. The projections depend only on the shape and class
/// count, so datasets drawn with different seeds share one labelling rule.
inline Dataset synthetic_dataset(std::size_t n, const Shape& shape, std::size_t n_classes, std::uint64_t seed) {
  if (n == 0) throw Error(Errc::invalid_argument, "synthetic dataset needs n >= 1");
  if (n_classes == 0) throw Error(Errc::invalid_argument, "synthetic dataset needs n_classes >= 1");
  const std::size_t sz = shape.size();
  std::vector<double> proj(n_classes * sz);
  {
    std::mt19937_64 prng(0x5eed5eedULL ^ (sz * 1315423911ULL) ^ n_classes);
    std::normal_distribution<double> nd(0.0, 1.0);
    for (auto& p : proj) p = nd(prng);
  }
  Dataset d{"synthetic", shape, n_classes, std::vector<double>(n * sz), std::vector<std::uint32_t>(n)};
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> ud(0.0, 1.0);
  for (auto& v : d.pixels) v = ud(rng);
  for (std::size_t i = 0; i < n; ++i) {
    const auto img = d.image(i);
    std::uint32_t best = 0;
    double best_score = 0.0;
    for (std::size_t k = 0; k < n_classes; ++k) {
      double s = 0.0;
      for (std::size_t j = 0; j < sz; ++j) s += proj[k * sz + j] * (img[j] - 0.5);
      if (k == 0 || s > best_score) {
        best_score = s;
        best = static_cast<std::uint32_t>(k);
      }
    }
    d.labels[i] = best;
  }
  return d;
}

}  // namespace hfcnn
