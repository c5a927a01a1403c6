#pragma once

// Per-sample layer kernels on raw channel-last buffers.
//
// Every accumulation runs in a fixed order: conv outputs sum their patch in
// (row, col, channel) order and then add the bias, fc outputs sum inputs in
// ascending order and then add the bias. The fc kernels skip zero terms;
// this never changes a result bit because accumulators start at +0 and
// operands are finite.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace hfcnn::detail {

struct ConvGeom {
  std::size_t in_h = 0, in_w = 0, in_c = 0;
  std::size_t fsize = 0, stride = 1, pad = 0;
  std::size_t out_c = 0, out_h = 0, out_w = 0;

  std::size_t patch() const { return fsize * fsize * in_c; }
  std::size_t in_size() const { return in_h * in_w * in_c; }
  std::size_t out_size() const { return out_h * out_w * out_c; }
};

struct PoolGeom {
  std::size_t in_h = 0, in_w = 0, ch = 0;
  std::size_t window = 1, stride = 1;
  std::size_t out_h = 0, out_w = 0;

  std::size_t in_size() const { return in_h * in_w * ch; }
  std::size_t out_size() const { return out_h * out_w * ch; }
};

/// [rows][cols] -> [cols][rows]
inline void transpose(const double* src, std::size_t rows, std::size_t cols, double* dst) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

/// Copies the receptive field of output (oi, oj) into `patch`, zero outside
/// the unpadded input.
inline void gather_patch(const ConvGeom& g, const double* in, std::size_t oi, std::size_t oj,
                         double* patch) {
  const std::ptrdiff_t r0 = static_cast<std::ptrdiff_t>(oi * g.stride) - static_cast<std::ptrdiff_t>(g.pad);
  const std::ptrdiff_t c0 = static_cast<std::ptrdiff_t>(oj * g.stride) - static_cast<std::ptrdiff_t>(g.pad);
  const auto H = static_cast<std::ptrdiff_t>(g.in_h), W = static_cast<std::ptrdiff_t>(g.in_w);
  for (std::size_t p = 0; p < g.fsize; ++p) {
    const std::ptrdiff_t r = r0 + static_cast<std::ptrdiff_t>(p);
    double* row = patch + p * g.fsize * g.in_c;
    if (r < 0 || r >= H) {
      std::fill(row, row + g.fsize * g.in_c, 0.0);
      continue;
    }
    if (c0 >= 0 && c0 + static_cast<std::ptrdiff_t>(g.fsize) <= W) {
      const double* src = in + (static_cast<std::size_t>(r) * g.in_w + static_cast<std::size_t>(c0)) * g.in_c;
      for (std::size_t k = 0; k < g.fsize * g.in_c; ++k) row[k] = src[k];
      continue;
    }
    for (std::size_t q = 0; q < g.fsize; ++q) {
      const std::ptrdiff_t c = c0 + static_cast<std::ptrdiff_t>(q);
      double* dst = row + q * g.in_c;
      if (c < 0 || c >= W) {
        std::fill(dst, dst + g.in_c, 0.0);
      } else {
        const double* src = in + (static_cast<std::size_t>(r) * g.in_w + static_cast<std::size_t>(c)) * g.in_c;
        std::copy(src, src + g.in_c, dst);
      }
    }
  }
}

/// Adds `gpatch` back onto the input positions of output (oi, oj); padded
/// positions are dropped.
inline void scatter_patch(const ConvGeom& g, const double* gpatch, std::size_t oi, std::size_t oj,
                          double* gin) {
  const std::ptrdiff_t r0 = static_cast<std::ptrdiff_t>(oi * g.stride) - static_cast<std::ptrdiff_t>(g.pad);
  const std::ptrdiff_t c0 = static_cast<std::ptrdiff_t>(oj * g.stride) - static_cast<std::ptrdiff_t>(g.pad);
  const auto H = static_cast<std::ptrdiff_t>(g.in_h), W = static_cast<std::ptrdiff_t>(g.in_w);
  for (std::size_t p = 0; p < g.fsize; ++p) {
    const std::ptrdiff_t r = r0 + static_cast<std::ptrdiff_t>(p);
    if (r < 0 || r >= H) continue;
    if (c0 >= 0 && c0 + static_cast<std::ptrdiff_t>(g.fsize) <= W) {
      double* dst = gin + (static_cast<std::size_t>(r) * g.in_w + static_cast<std::size_t>(c0)) * g.in_c;
      const double* src = gpatch + p * g.fsize * g.in_c;
      for (std::size_t k = 0; k < g.fsize * g.in_c; ++k) dst[k] += src[k];
      continue;
    }
    for (std::size_t q = 0; q < g.fsize; ++q) {
      const std::ptrdiff_t c = c0 + static_cast<std::ptrdiff_t>(q);
      if (c < 0 || c >= W) continue;
      double* dst = gin + (static_cast<std::size_t>(r) * g.in_w + static_cast<std::size_t>(c)) * g.in_c;
      const double* src = gpatch + (p * g.fsize + q) * g.in_c;
      for (std::size_t ch = 0; ch < g.in_c; ++ch) dst[ch] += src[ch];
    }
  }
}

// Small dense products. Each output element accumulates its inner
// dimension in ascending order, starting from the value already in C, so
// chaining two calls is the same as one longer sum.

inline constexpr std::size_t kColBlock = 8;
typedef double vec8 __attribute__((vector_size(64), aligned(8)));

inline vec8 load8(const double* p) { return *reinterpret_cast<const vec8*>(p); }
inline void store8(double* p, vec8 v) { *reinterpret_cast<vec8*>(p) = v; }

/// RB rows of C[.][N] += A * B, where row r's coefficient for inner index k
/// is A[r * rs + k * ks] and B is [Kd][N].
template <std::size_t RB>
inline void gemm_rows(const double* A, std::size_t rs, std::size_t ks, const double* B, std::size_t ldb, double* C,
                      std::size_t ldc, std::size_t Kd, std::size_t N) {
  std::size_t n0 = 0;
  for (; n0 + kColBlock <= N; n0 += kColBlock) {
    vec8 acc[RB];
    for (std::size_t r = 0; r < RB; ++r) acc[r] = load8(C + r * ldc + n0);
    for (std::size_t k = 0; k < Kd; ++k) {
      const vec8 b = load8(B + k * ldb + n0);
      for (std::size_t r = 0; r < RB; ++r) acc[r] += A[r * rs + k * ks] * b;
    }
    for (std::size_t r = 0; r < RB; ++r) store8(C + r * ldc + n0, acc[r]);
  }
  for (; n0 < N; ++n0)
    for (std::size_t r = 0; r < RB; ++r) {
      double acc = C[r * ldc + n0];
      for (std::size_t k = 0; k < Kd; ++k) acc += A[r * rs + k * ks] * B[k * ldb + n0];
      C[r * ldc + n0] = acc;
    }
}

inline void gemm_any(const double* A, std::size_t rs, std::size_t ks, const double* B, std::size_t ldb, double* C,
                     std::size_t ldc, std::size_t M, std::size_t Kd, std::size_t N) {
  constexpr std::size_t RB = 6;
  std::size_t m = 0;
  for (; m + RB <= M; m += RB) gemm_rows<RB>(A + m * rs, rs, ks, B, ldb, C + m * ldc, ldc, Kd, N);
  for (; m < M; ++m) gemm_rows<1>(A + m * rs, rs, ks, B, ldb, C + m * ldc, ldc, Kd, N);
}

/// C[M][N] += A[M][Kd] * B[Kd][N]
inline void gemm_nn(const double* A, std::size_t lda, const double* B, std::size_t ldb, double* C, std::size_t ldc,
                    std::size_t M, std::size_t Kd, std::size_t N) {
  gemm_any(A, lda, 1, B, ldb, C, ldc, M, Kd, N);
}

/// C[M][N] += A^T * B with A stored [Kd][M] and B [Kd][N].
inline void gemm_tn(const double* A, std::size_t lda, const double* B, std::size_t ldb, double* C, std::size_t ldc,
                    std::size_t M, std::size_t Kd, std::size_t N) {
  gemm_any(A, 1, lda, B, ldb, C, ldc, M, Kd, N);
}

/// Receptive fields of every output position, one row each:
/// cols[pos][patch].
inline void im2col(const ConvGeom& g, const double* in, double* cols) {
  const std::size_t T = g.patch();
  for (std::size_t i = 0; i < g.out_h; ++i)
    for (std::size_t j = 0; j < g.out_w; ++j) gather_patch(g, in, i, j, cols + (i * g.out_w + j) * T);
}

/// out = conv(in, W) + b with `wt` laid out [patch][out_c]; `cols` receives
/// the im2col matrix of `in`.
inline void conv_fwd(const ConvGeom& g, const double* in, const double* wt, const double* bias, double* out,
                     double* cols) {
  const std::size_t T = g.patch(), K = g.out_c, npos = g.out_h * g.out_w;
  im2col(g, in, cols);
  std::fill(out, out + npos * K, 0.0);
  gemm_nn(cols, T, wt, K, out, K, npos, T, K);
  for (std::size_t p = 0; p < npos; ++p)
    for (std::size_t k = 0; k < K; ++k) out[p * K + k] += bias[k];
}

/// Directional derivative of a conv layer:
///   out = conv(in, V_W) + conv(r_in, W) + V_b
/// `r_in` may be null when the layer input does not depend on theta.
inline void conv_rop(const ConvGeom& g, const double* in, const double* r_in, const double* wt, const double* vwt,
                     const double* vbias, double* out, double* cols) {
  const std::size_t T = g.patch(), K = g.out_c, npos = g.out_h * g.out_w;
  std::fill(out, out + npos * K, 0.0);
  im2col(g, in, cols);
  gemm_nn(cols, T, vwt, K, out, K, npos, T, K);
  if (r_in) {
    im2col(g, r_in, cols);
    gemm_nn(cols, T, wt, K, out, K, npos, T, K);
  }
  for (std::size_t p = 0; p < npos; ++p)
    for (std::size_t k = 0; k < K; ++k) out[p * K + k] += vbias[k];
}

/// Reverse pass of a conv layer. Accumulates weight gradients into `gwt`
/// ([patch][out_c] layout) and bias gradients into `gbias`; writes the input
/// gradient into `gin` (zeroed here) unless it is null. `w` is the filter
/// bank in parameter layout [out_c][patch].
inline void conv_bwd(const ConvGeom& g, const double* in, const double* gout, const double* w, double* gwt,
                     double* gbias, double* gin, double* cols) {
  const std::size_t T = g.patch(), K = g.out_c, npos = g.out_h * g.out_w;
  im2col(g, in, cols);
  gemm_tn(cols, T, gout, K, gwt, K, T, npos, K);
  for (std::size_t p = 0; p < npos; ++p)
    for (std::size_t k = 0; k < K; ++k) gbias[k] += gout[p * K + k];
  if (!gin) return;
  std::fill(gin, gin + g.in_size(), 0.0);
  std::fill(cols, cols + npos * T, 0.0);
  gemm_nn(gout, K, w, T, cols, T, npos, K, T);
  for (std::size_t i = 0; i < g.out_h; ++i)
    for (std::size_t j = 0; j < g.out_w; ++j) scatter_patch(g, cols + (i * g.out_w + j) * T, i, j, gin);
}

/// Max over each window per channel; ties keep the lowest flat index.
inline void pool_fwd(const PoolGeom& g, const double* in, double* out, std::uint32_t* argmax) {
  const std::size_t C = g.ch;
  for (std::size_t i = 0; i < g.out_h; ++i)
    for (std::size_t j = 0; j < g.out_w; ++j) {
      double* o = out + (i * g.out_w + j) * C;
      std::uint32_t* am = argmax + (i * g.out_w + j) * C;
      for (std::size_t p = 0; p < g.window; ++p)
        for (std::size_t q = 0; q < g.window; ++q) {
          const std::size_t base = ((i * g.stride + p) * g.in_w + j * g.stride + q) * C;
          const double* src = in + base;
          if (p == 0 && q == 0) {
            for (std::size_t c = 0; c < C; ++c) {
              o[c] = src[c];
              am[c] = static_cast<std::uint32_t>(base + c);
            }
            continue;
          }
          for (std::size_t c = 0; c < C; ++c)
            if (src[c] > o[c]) {
              o[c] = src[c];
              am[c] = static_cast<std::uint32_t>(base + c);
            }
        }
    }
}

inline void gather_argmax(std::size_t n, const std::uint32_t* argmax, const double* in, double* out) {
  for (std::size_t o = 0; o < n; ++o) out[o] = in[argmax[o]];
}

inline void scatter_argmax(std::size_t n_out, std::size_t n_in, const std::uint32_t* argmax,
                           const double* gout, double* gin) {
  std::fill(gin, gin + n_in, 0.0);
  for (std::size_t o = 0; o < n_out; ++o) gin[argmax[o]] += gout[o];
}

inline void relu_fwd(std::size_t n, const double* in, double* out, std::uint8_t* mask) {
  for (std::size_t i = 0; i < n; ++i) {
    const bool on = in[i] > 0.0;
    out[i] = on ? in[i] : 0.0;
    if (mask) mask[i] = on;
  }
}

inline void apply_mask(std::size_t n, const std::uint8_t* mask, const double* in, double* out) {
  for (std::size_t i = 0; i < n; ++i) out[i] = mask[i] ? in[i] : 0.0;
}

/// out = W x + b with `wt` laid out [in][out].
inline void fc_fwd(std::size_t n_in, std::size_t n_out, const double* x, const double* wt,
                   const double* bias, double* out) {
  std::fill(out, out + n_out, 0.0);
  for (std::size_t i = 0; i < n_in; ++i) {
    const double a = x[i];
    if (a == 0.0) continue;
    const double* w = wt + i * n_out;
    for (std::size_t o = 0; o < n_out; ++o) out[o] += a * w[o];
  }
  for (std::size_t o = 0; o < n_out; ++o) out[o] += bias[o];
}

/// out = W r + V_W x + V_b; `r` may be null.
inline void fc_rop(std::size_t n_in, std::size_t n_out, const double* x, const double* r,
                   const double* wt, const double* vwt, const double* vbias, double* out) {
  std::fill(out, out + n_out, 0.0);
  for (std::size_t i = 0; i < n_in; ++i) {
    const double a = x[i];
    if (a != 0.0) {
      const double* v = vwt + i * n_out;
      for (std::size_t o = 0; o < n_out; ++o) out[o] += a * v[o];
    }
    if (r && r[i] != 0.0) {
      const double* w = wt + i * n_out;
      for (std::size_t o = 0; o < n_out; ++o) out[o] += r[i] * w[o];
    }
  }
  for (std::size_t o = 0; o < n_out; ++o) out[o] += vbias[o];
}

/// Reverse pass of an fc layer. `w` and `gw` use the parameter layout
/// [out][in]; `gin` (zeroed here) may be null.
inline void fc_bwd(std::size_t n_in, std::size_t n_out, const double* x, const double* gout,
                   const double* w, double* gw, double* gbias, double* gin) {
  if (gin) std::fill(gin, gin + n_in, 0.0);
  for (std::size_t o = 0; o < n_out; ++o) {
    const double go = gout[o];
    if (go == 0.0) continue;
    double* gwr = gw + o * n_in;
    for (std::size_t i = 0; i < n_in; ++i) gwr[i] += go * x[i];
    gbias[o] += go;
    if (gin) {
      const double* wr = w + o * n_in;
      for (std::size_t i = 0; i < n_in; ++i) gin[i] += wr[i] * go;
    }
  }
}

}  // namespace hfcnn::detail
