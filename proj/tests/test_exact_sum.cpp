#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "hfcnn/exact_sum.hpp"
#include "hfcnn/tensor.hpp"

using namespace hfcnn;

namespace {

std::uint64_t bits(double x) { return std::bit_cast<std::uint64_t>(x); }

// Values on a 2^-50 grid with |x| < 2^12: their sum is an exact 128-bit
// integer multiple of 2^-50, and the int128 -> double conversion rounds to
// nearest, so this is the correctly rounded sum.
std::vector<double> grid_values(std::mt19937_64& rng, std::size_t n) {
  std::normal_distribution<double> nd(0.0, 100.0);
  std::vector<double> xs(n);
  for (auto& x : xs) x = std::ldexp(std::round(std::ldexp(nd(rng), 50)), -50);
  return xs;
}

double rounded_grid_sum(const std::vector<double>& xs) {
  __int128 acc = 0;
  for (double x : xs) acc += static_cast<__int128>(std::ldexp(x, 50));
  return std::ldexp(static_cast<double>(acc), -50);
}

}  // namespace

TEST(ExactSum, SmallIntegersAndSignedZero) {
  ExactSum s;
  EXPECT_EQ(bits(s.value()), bits(0.0));
  for (int i = 1; i <= 100; ++i) s.add(i);
  EXPECT_EQ(s.value(), 5050.0);
}

TEST(ExactSum, CancellationIsExact) {
  ExactSum s;
  s.add(1e300);
  s.add(1.0);
  s.add(-1e300);
  EXPECT_EQ(s.value(), 1.0);

  ExactSum t;
  t.add(1.0);
  t.add(1e-300);
  t.add(-1.0);
  EXPECT_EQ(t.value(), 1e-300);
}

TEST(ExactSum, SubnormalsAndExtremes) {
  const double tiny = std::numeric_limits<double>::denorm_min();
  ExactSum s;
  for (int i = 0; i < 3; ++i) s.add(tiny);
  EXPECT_EQ(s.value(), 3 * tiny);

  const double big = std::numeric_limits<double>::max();
  ExactSum b;
  b.add(big);
  b.add(big);
  b.add(-big);
  EXPECT_EQ(b.value(), big);
}

TEST(ExactSum, RoundsToNearestEven) {
  // 1 + 2^-53 is a tie between 1 and 1 + 2^-52; ties go to the even mantissa.
  ExactSum s;
  s.add(1.0);
  s.add(std::ldexp(1.0, -53));
  EXPECT_EQ(s.value(), 1.0);
  // A sticky bit below the tie breaks it upward.
  s.add(std::ldexp(1.0, -200));
  EXPECT_EQ(s.value(), 1.0 + std::ldexp(1.0, -52));
  // The odd neighbour rounds up on a tie.
  ExactSum o;
  o.add(1.0 + std::ldexp(1.0, -52));
  o.add(std::ldexp(1.0, -53));
  EXPECT_EQ(o.value(), 1.0 + std::ldexp(1.0, -51));
}

TEST(ExactSum, CorrectlyRoundedAndOrderFree) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> xs = grid_values(rng, 200);
    ExactSum a;
    for (double x : xs) a.add(x);
    std::shuffle(xs.begin(), xs.end(), rng);
    ExactSum b, c;
    for (std::size_t i = 0; i < xs.size(); ++i) (i % 3 ? b : c).add(xs[i]);
    b.merge(c);
    EXPECT_EQ(bits(a.value()), bits(b.value()));
    EXPECT_EQ(bits(a.value()), bits(rounded_grid_sum(xs)));
  }
}

TEST(ExactSum, RejectsNonFinite) {
  ExactSum s;
  EXPECT_THROW(s.add(std::numeric_limits<double>::infinity()), Error);
  EXPECT_THROW(s.add(std::numeric_limits<double>::quiet_NaN()), Error);
}

TEST(ExactSum, OverflowingTotalReported) {
  ExactSum s;
  const double big = std::numeric_limits<double>::max();
  s.add(big);
  s.add(big);
  EXPECT_THROW(s.value(), Error);
}

TEST(ExactVectorSum, ElementwiseAndPartitionFree) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> ud(-1e3, 1e3);
  const std::size_t n = 37, rows = 90;
  std::vector<std::vector<double>> data(rows, std::vector<double>(n));
  for (auto& r : data)
    for (auto& x : r) x = ud(rng) * std::pow(10.0, static_cast<int>(rng() % 20) - 10);

  ExactVectorSum whole(n);
  for (const auto& r : data) whole.add(r);
  // three partitions merged in a different order
  ExactVectorSum p1(n), p2(n), p3(n);
  for (std::size_t i = 0; i < rows; ++i) (i < 20 ? p1 : i < 71 ? p2 : p3).add(data[i]);
  p3.merge(p1);
  p3.merge(p2);
  const auto a = whole.values(), b = p3.values();
  for (std::size_t j = 0; j < n; ++j) {
    ExactSum col;
    for (const auto& r : data) col.add(r[j]);
    EXPECT_EQ(bits(a[j]), bits(b[j]));
    EXPECT_EQ(bits(a[j]), bits(col.value()));
  }
  EXPECT_THROW(whole.add(std::vector<double>(n + 1)), Error);
}
