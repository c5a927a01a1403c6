#pragma once

// Dense row-major tensors of doubles plus the handful of span kernels the
// rest of the library is built on.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace hfcnn {

enum class Errc {
  invalid_argument,
  shape_mismatch,
  out_of_bounds,
  overflow,
  non_finite,
  empty_set,
  stale_cache,
  non_descent,
  step_underflow,
  format,
  io,
};

inline const char* errc_name(Errc c) {
  switch (c) {
    case Errc::invalid_argument: return "invalid argument";
    case Errc::shape_mismatch: return "shape mismatch";
    case Errc::out_of_bounds: return "out of bounds";
    case Errc::overflow: return "overflow";
    case Errc::non_finite: return "non-finite value";
    case Errc::empty_set: return "empty sample set";
    case Errc::stale_cache: return "stale cache";
    case Errc::non_descent: return "non-descent direction";
    case Errc::step_underflow: return "step size underflow";
    case Errc::format: return "format error";
    case Errc::io: return "i/o error";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<std::size_t> dims) : Shape(std::vector<std::size_t>(dims)) {}
  explicit Shape(std::vector<std::size_t> dims) : dims_(std::move(dims)) {
    if (dims_.empty()) throw Error(Errc::invalid_argument, "shape needs at least one extent");
    std::size_t n = 1;
    for (auto d : dims_) {
      if (d == 0) throw Error(Errc::invalid_argument, "shape extents must be >= 1");
      if (n > std::numeric_limits<std::size_t>::max() / d)
        throw Error(Errc::overflow, "element count of shape overflows");
      n *= d;
    }
    size_ = n;
  }

  std::size_t rank() const noexcept { return dims_.size(); }
  std::size_t operator[](std::size_t i) const { return dims_.at(i); }
  std::size_t size() const noexcept { return size_; }
  const std::vector<std::size_t>& dims() const noexcept { return dims_; }

  friend bool operator==(const Shape&, const Shape&) = default;

  std::string str() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < dims_.size(); ++i) os << (i ? "," : "") << dims_[i];
    os << ']';
    return os.str();
  }

 private:
  std::vector<std::size_t> dims_;
  std::size_t size_ = 0;
};

/// Row-major flat index of `coords` in `shape`.
inline std::size_t flat_index(const Shape& shape, std::span<const std::size_t> coords) {
  if (coords.size() != shape.rank()) throw Error(Errc::shape_mismatch, "coordinate rank");
  std::size_t idx = 0;
  for (std::size_t i = 0; i < coords.size(); ++i) {
    if (coords[i] >= shape[i]) throw Error(Errc::out_of_bounds, "coordinate outside shape");
    idx = idx * shape[i] + coords[i];
  }
  return idx;
}

inline std::vector<std::size_t> unravel_index(const Shape& shape, std::size_t idx) {
  if (idx >= shape.size()) throw Error(Errc::out_of_bounds, "flat index outside shape");
  std::vector<std::size_t> coords(shape.rank());
  for (std::size_t i = shape.rank(); i-- > 0;) {
    coords[i] = idx % shape[i];
    idx /= shape[i];
  }
  return coords;
}

inline bool all_finite(std::span<const double> xs) {
  for (double x : xs)
    if (!std::isfinite(x)) return false;
  return true;
}

inline void require_finite(std::span<const double> xs, const char* where) {
  if (!all_finite(xs)) throw Error(Errc::non_finite, where);
}

// Span kernels. Reductions always run in ascending index order.

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error(Errc::shape_mismatch, "dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

/// y += alpha * x
inline void axpy_inplace(double alpha, std::span<const double> x, std::span<double> y) {
  if (x.size() != y.size()) throw Error(Errc::shape_mismatch, "axpy: length mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_.size(), 0.0) {}
  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_.size())
      throw Error(Errc::shape_mismatch, "data length " + std::to_string(data_.size()) +
                                            " does not match shape " + shape_.str());
    require_finite(data_, "tensor construction");
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  /// Element of a rank-3 (height, width, channel) tensor.
  double& at(std::size_t i, std::size_t j, std::size_t c) { return data_[index3(i, j, c)]; }
  double at(std::size_t i, std::size_t j, std::size_t c) const { return data_[index3(i, j, c)]; }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::size_t index3(std::size_t i, std::size_t j, std::size_t c) const {
    if (shape_.rank() != 3) throw Error(Errc::shape_mismatch, "at(i,j,c) needs a rank-3 tensor");
    if (i >= shape_[0] || j >= shape_[1] || c >= shape_[2])
      throw Error(Errc::out_of_bounds, "tensor index");
    return (i * shape_[1] + j) * shape_[2] + c;
  }

  Shape shape_;
  std::vector<double> data_;
};

inline Tensor zeros(const Shape& shape) { return Tensor(shape); }

inline double dot(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw Error(Errc::shape_mismatch, "dot " + a.shape().str() + " vs " + b.shape().str());
  double s = dot(a.data(), b.data());
  if (!std::isfinite(s)) throw Error(Errc::non_finite, "dot");
  return s;
}

/// Returns y + alpha * x.
inline Tensor axpy(double alpha, const Tensor& x, const Tensor& y) {
  if (x.shape() != y.shape())
    throw Error(Errc::shape_mismatch, "axpy " + x.shape().str() + " vs " + y.shape().str());
  std::vector<double> out(y.values());
  axpy_inplace(alpha, x.data(), out);
  return Tensor(y.shape(), std::move(out));
}

/// Copies the h x h window at (row0, col0) across all channels of a
/// rank-3 tensor. Rank-2 inputs are treated as single-channel.
inline Tensor slice_window(const Tensor& t, std::size_t row0, std::size_t col0, std::size_t h) {
  const Shape& s = t.shape();
  if (s.rank() != 2 && s.rank() != 3) throw Error(Errc::shape_mismatch, "slice_window needs rank 2 or 3");
  const std::size_t rows = s[0], cols = s[1], ch = s.rank() == 3 ? s[2] : 1;
  if (h == 0 || row0 + h > rows || col0 + h > cols)
    throw Error(Errc::out_of_bounds, "window exceeds tensor " + s.str());
  std::vector<double> out;
  out.reserve(h * h * ch);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < h; ++j)
      for (std::size_t c = 0; c < ch; ++c)
        out.push_back(t.data()[((row0 + i) * cols + col0 + j) * ch + c]);
  return s.rank() == 3 ? Tensor(Shape{h, h, ch}, std::move(out)) : Tensor(Shape{h, h}, std::move(out));
}

}  // namespace hfcnn
