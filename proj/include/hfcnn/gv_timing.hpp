#pragma once

// Wall-clock cost of one Gauss-Newton product as the Gauss-Newton sample set
// grows, serial versus threaded.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "hfcnn/diffprod.hpp"

namespace hfcnn {

struct TimingRecord {
  std::size_t gnsize = 0;
  std::size_t workers = 1;
  ExecMode mode = ExecMode::serial;
  double seconds_per_gv = 0.0;
  std::size_t repeats = 0;
};

struct SweepMode {
  ExecMode mode = ExecMode::serial;
  std::size_t workers = 1;
};

inline const char* mode_name(ExecMode m) { return m == ExecMode::serial ? "serial" : "parallel"; }

inline constexpr std::size_t kDefaultGnSizes[] = {2000, 4000, 8000, 16000, 32000, 64000};

struct SweepOptions {
  std::vector<std::size_t> gn_sizes{std::begin(kDefaultGnSizes), std::end(kDefaultGnSizes)};
  std::vector<SweepMode> modes{{ExecMode::serial, 1}};
  std::size_t repeats = 3;
  double lambda = 1.0;
  std::uint64_t seed = 42;
  CachePolicy policy = CachePolicy::automatic;  // resolved once, from the largest size
  std::size_t cache_budget = kDefaultCacheBudget;
};

/// For every Gauss-Newton size (the first `gnsize` samples) and every mode,
/// the mean seconds per gauss_newton_vec call over `repeats` calls with
/// fixed-seed random directions. Cache construction is not timed.
inline std::vector<TimingRecord> timed_gv_sweep(const Objective& obj, const ParamVector& theta,
                                                const SweepOptions& opt) {
  using clock = std::chrono::steady_clock;
  if (opt.repeats == 0) throw Error(Errc::invalid_argument, "timed_gv_sweep needs repeats >= 1");
  if (opt.gn_sizes.empty() || opt.modes.empty()) throw Error(Errc::invalid_argument, "empty sweep");
  obj.validate();
  const std::size_t largest = *std::max_element(opt.gn_sizes.begin(), opt.gn_sizes.end());
  if (largest > obj.data->size())
    throw Error(Errc::invalid_argument, "gnsize " + std::to_string(largest) + " exceeds dataset size");
  const CachePolicy policy = resolve_policy(*obj.net, largest, opt.policy, opt.cache_budget);

  std::vector<ParamVector> dirs;
  std::mt19937_64 rng(opt.seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (std::size_t r = 0; r < opt.repeats; ++r) {
    std::vector<double> v(theta.size());
    for (auto& x : v) x = nd(rng);
    dirs.push_back(obj.net->make_params(std::move(v)));
  }

  std::vector<TimingRecord> out;
  for (const auto& m : opt.modes) {
    Executor exec(m.workers, m.mode);
    for (std::size_t gn : opt.gn_sizes) {
      const auto idx = all_indices(gn);
      const CacheSet caches = build_caches(obj, theta, idx, exec, policy);
      const auto t0 = clock::now();
      for (const auto& v : dirs) {
        const ParamVector gv = gauss_newton_vec(obj, theta, v, caches, opt.lambda, exec);
        if (gv.size() != v.size()) throw Error(Errc::shape_mismatch, "Gv length");
      }
      const double secs = std::chrono::duration<double>(clock::now() - t0).count();
      out.push_back({gn, exec.workers(), m.mode, secs / static_cast<double>(opt.repeats), opt.repeats});
    }
  }
  return out;
}

inline void write_timing_csv(std::ostream& os, const std::vector<TimingRecord>& rows) {
  os << "gnsize,workers,mode,seconds_per_gv,repeats\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%zu,%s,%.9f,%zu\n", r.gnsize, r.workers, mode_name(r.mode),
                  r.seconds_per_gv, r.repeats);
    os << buf;
  }
}

struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
};

/// Ordinary least squares y = slope x + intercept, with the coefficient of
/// determination.
inline LinearFit fit_line(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw Error(Errc::invalid_argument, "fit_line needs >= 2 points");
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0) throw Error(Errc::invalid_argument, "fit_line needs distinct x values");
  LinearFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  double ss_res = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double e = y[i] - (f.slope * x[i] + f.intercept);
    ss_res += e * e;
  }
  f.r2 = syy == 0 ? 1.0 : 1.0 - ss_res / syy;
  return f;
}

}  // namespace hfcnn
