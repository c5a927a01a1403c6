#pragma once

// Order-independent summation of doubles.
//
// Every finite double is an integer multiple of 2^-1074, so a sum of doubles
// can be held exactly as a wide fixed-point integer. The integer is stored
// in base-2^32 limbs kept in int64 slots; additions go in without carry
// propagation, and carries are resolved before a slot could overflow. Since
// integer addition is associative, the rounded result does not depend on the
// order or grouping of the additions. This is what lets batch partitions,
// worker counts and completion order vary without changing a single bit.

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "hfcnn/tensor.hpp"

namespace hfcnn {

namespace detail {

// Bit 0 of limb 0 has weight 2^-1088. A double with biased exponent e has
// its mantissa LSB at bit e + 13 (subnormals at bit 14), the top mantissa
// bit of the largest double at bit 2113, so 68 limbs cover every double and
// two more absorb carries of very long sums.
inline constexpr std::size_t kLimbs = 70;
inline constexpr int kLimbBits = 32;
inline constexpr int kBaseExponent = -1088;
// Each addition puts less than 2^32 into a slot; int64 slots are flushed
// well before 2^31 of them accumulate.
inline constexpr std::uint64_t kFlushEvery = std::uint64_t{1} << 30;

inline void limbs_add(std::int64_t* limbs, double x) {
  const auto bits = std::bit_cast<std::uint64_t>(x);
  const int biased = static_cast<int>((bits >> 52) & 0x7ff);
  std::uint64_t mant = bits & ((std::uint64_t{1} << 52) - 1);
  if (biased == 0x7ff) throw Error(Errc::non_finite, "exact sum of a non-finite value");
  if (biased == 0) {
    if (mant == 0) return;
  } else {
    mant |= std::uint64_t{1} << 52;
  }
  const int pos = (biased == 0 ? 1 : biased) + 13;
  const auto limb = static_cast<std::size_t>(pos / kLimbBits);
  const int shift = pos % kLimbBits;
  const unsigned __int128 wide = static_cast<unsigned __int128>(mant) << shift;
  const auto l0 = static_cast<std::int64_t>(static_cast<std::uint64_t>(wide) & 0xffffffffu);
  const auto l1 = static_cast<std::int64_t>(static_cast<std::uint64_t>(wide >> 32) & 0xffffffffu);
  const auto l2 = static_cast<std::int64_t>(static_cast<std::uint64_t>(wide >> 64));
  if (bits >> 63) {
    limbs[limb] -= l0;
    limbs[limb + 1] -= l1;
    limbs[limb + 2] -= l2;
  } else {
    limbs[limb] += l0;
    limbs[limb + 1] += l1;
    limbs[limb + 2] += l2;
  }
}

/// Carry-propagates so that every limb but the top one is in [0, 2^32).
/// The result is the unique such representation of the value.
inline void limbs_normalize(std::int64_t* limbs) {
  for (std::size_t k = 0; k + 1 < kLimbs; ++k) {
    const std::int64_t carry = limbs[k] >> kLimbBits;  // arithmetic shift: floor division
    limbs[k] -= carry * (std::int64_t{1} << kLimbBits);
    limbs[k + 1] += carry;
  }
}

/// Rounds a normalized limb array to the nearest double (ties to even).
inline double limbs_round(const std::int64_t* normalized) {
  std::array<std::int64_t, kLimbs> mag;
  std::copy(normalized, normalized + kLimbs, mag.begin());
  const bool negative = mag[kLimbs - 1] < 0;
  if (negative) {
    for (auto& l : mag) l = -l;
    limbs_normalize(mag.data());
  }
  std::ptrdiff_t top = -1;
  for (std::size_t k = kLimbs; k-- > 0;)
    if (mag[k] != 0) {
      top = static_cast<std::ptrdiff_t>(k);
      break;
    }
  if (top < 0) return 0.0;
  const std::size_t h = static_cast<std::size_t>(top);
  auto limb_at = [&](std::ptrdiff_t k) -> unsigned __int128 {
    return k < 0 ? 0 : static_cast<unsigned __int128>(static_cast<std::uint64_t>(mag[static_cast<std::size_t>(k)]));
  };
  const auto hs = static_cast<std::ptrdiff_t>(h);
  const unsigned __int128 hi = (limb_at(hs) << 64) | (limb_at(hs - 1) << 32) | limb_at(hs - 2);
  bool sticky = false;
  for (std::ptrdiff_t k = hs - 3; k >= 0; --k) sticky |= mag[static_cast<std::size_t>(k)] != 0;
  int exp2 = static_cast<int>(h) * kLimbBits - 2 * kLimbBits + kBaseExponent;  // weight of hi's bit 0

  const auto hi_hi = static_cast<std::uint64_t>(hi >> 64);
  const int nbits = hi_hi ? 128 - std::countl_zero(hi_hi) : 64 - std::countl_zero(static_cast<std::uint64_t>(hi));
  std::uint64_t m = 0;
  if (nbits <= 53) {
    m = static_cast<std::uint64_t>(hi);
  } else {
    const int shift = nbits - 53;
    m = static_cast<std::uint64_t>(hi >> shift);
    const unsigned __int128 rem = hi & ((static_cast<unsigned __int128>(1) << shift) - 1);
    const unsigned __int128 half = static_cast<unsigned __int128>(1) << (shift - 1);
    if (rem > half || (rem == half && (sticky || (m & 1)))) ++m;
    exp2 += shift;
  }
  const double r = std::ldexp(static_cast<double>(m), exp2);
  return negative ? -r : r;
}

}  // namespace detail

/// Exact running sum of doubles.
class ExactSum {
 public:
  ExactSum() { limbs_.fill(0); }

  void add(double x) {
    detail::limbs_add(limbs_.data(), x);
    if (++pending_ >= detail::kFlushEvery) flush();
  }

  void merge(const ExactSum& o) {
    flush();
    ExactSum tmp = o;
    tmp.flush();
    for (std::size_t k = 0; k < detail::kLimbs; ++k) limbs_[k] += tmp.limbs_[k];
    pending_ = 2;
  }

  double value() const {
    ExactSum tmp = *this;
    tmp.flush();
    const double r = detail::limbs_round(tmp.limbs_.data());
    if (!std::isfinite(r)) throw Error(Errc::non_finite, "exact sum overflowed double range");
    return r;
  }

 private:
  void flush() {
    detail::limbs_normalize(limbs_.data());
    pending_ = 1;
  }

  std::array<std::int64_t, detail::kLimbs> limbs_;
  std::uint64_t pending_ = 0;
};

/// Elementwise exact sums over vectors of a fixed length.
class ExactVectorSum {
 public:
  ExactVectorSum() = default;
  explicit ExactVectorSum(std::size_t n) : n_(n), limbs_(n * detail::kLimbs, 0) {}

  std::size_t size() const noexcept { return n_; }

  void add(std::span<const double> x) {
    if (x.size() != n_) throw Error(Errc::shape_mismatch, "exact vector sum length");
    for (std::size_t i = 0; i < n_; ++i)
      if (x[i] != 0.0) detail::limbs_add(limbs_.data() + i * detail::kLimbs, x[i]);
    if (++pending_ >= detail::kFlushEvery) flush();
  }

  void merge(const ExactVectorSum& o) {
    if (o.n_ != n_) throw Error(Errc::shape_mismatch, "exact vector sum merge length");
    flush();
    ExactVectorSum tmp = o;
    tmp.flush();
    for (std::size_t k = 0; k < limbs_.size(); ++k) limbs_[k] += tmp.limbs_[k];
    pending_ = 2;
  }

  std::vector<double> values() const {
    std::vector<double> out(n_);
    std::array<std::int64_t, detail::kLimbs> tmp;
    for (std::size_t i = 0; i < n_; ++i) {
      std::copy_n(limbs_.data() + i * detail::kLimbs, detail::kLimbs, tmp.begin());
      detail::limbs_normalize(tmp.data());
      out[i] = detail::limbs_round(tmp.data());
    }
    require_finite(out, "exact vector sum overflowed double range");
    return out;
  }

 private:
  void flush() {
    for (std::size_t i = 0; i < n_; ++i) detail::limbs_normalize(limbs_.data() + i * detail::kLimbs);
    pending_ = 1;
  }

  std::size_t n_ = 0;
  std::vector<std::int64_t> limbs_;
  std::uint64_t pending_ = 0;
};

}  // namespace hfcnn
