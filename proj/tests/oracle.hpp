#pragma once

// Reference implementations used as test oracles. They share nothing with the
// library except the layer spec types: the parameter layout is re-derived
// here, every layer is a plain nested loop, and the forward pass is generic
// over the scalar so that dual numbers give exact Jacobian columns.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <variant>
#include <vector>

#include "hfcnn/model.hpp"

namespace oracle {

struct Dual {
  double v = 0.0;
  double d = 0.0;
};
inline Dual operator+(Dual a, Dual b) { return {a.v + b.v, a.d + b.d}; }
inline Dual operator*(Dual a, Dual b) { return {a.v * b.v, a.v * b.d + a.d * b.v}; }
inline Dual& operator+=(Dual& a, Dual b) { return a = a + b; }

inline double value(double x) { return x; }
inline double value(Dual x) { return x.v; }
inline long double value(long double x) { return x; }

struct Dims {
  std::size_t h = 0, w = 0, c = 0;
};

/// Generic forward pass. Conv filters are stored [out][row][col][in] followed
/// by their biases; fc weights [out][in] followed by biases; layers in order.
/// `pattern`, when given, receives every ReLU decision and pool winner, which
/// fixes the linear piece the input lies on.
template <class T>
std::vector<T> forward(const std::vector<hfcnn::LayerSpec>& layers, Dims in, const std::vector<T>& theta,
                       const std::vector<double>& x, std::vector<std::size_t>* pattern = nullptr) {
  std::vector<T> act(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) act[i] = T{x[i]};
  Dims cur = in;
  std::size_t off = 0;
  for (const auto& layer : layers) {
    if (const auto* c = std::get_if<hfcnn::ConvSpec>(&layer)) {
      const std::size_t h = c->filter_size, s = c->stride, p = c->pad, K = c->out_channels;
      const std::size_t oh = (cur.h + 2 * p - h) / s + 1, ow = (cur.w + 2 * p - h) / s + 1;
      const std::size_t woff = off, boff = off + K * h * h * cur.c;
      std::vector<T> out(oh * ow * K);
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j)
          for (std::size_t k = 0; k < K; ++k) {
            T acc{0.0};
            for (std::size_t a = 0; a < h; ++a)
              for (std::size_t b = 0; b < h; ++b)
                for (std::size_t ch = 0; ch < cur.c; ++ch) {
                  const long r = static_cast<long>(i * s + a) - static_cast<long>(p);
                  const long q = static_cast<long>(j * s + b) - static_cast<long>(p);
                  T pix{0.0};
                  if (r >= 0 && q >= 0 && r < static_cast<long>(cur.h) && q < static_cast<long>(cur.w))
                    pix = act[(static_cast<std::size_t>(r) * cur.w + static_cast<std::size_t>(q)) * cur.c + ch];
                  acc += pix * theta[woff + ((k * h + a) * h + b) * cur.c + ch];
                }
            out[(i * ow + j) * K + k] = acc + theta[boff + k];
          }
      off = boff + K;
      act = std::move(out);
      cur = {oh, ow, K};
    } else if (std::holds_alternative<hfcnn::ReluSpec>(layer)) {
      for (auto& v : act) {
        const bool on = value(v) > 0.0;
        if (pattern) pattern->push_back(on);
        if (!on) v = T{0.0};
      }
    } else if (const auto* pl = std::get_if<hfcnn::PoolSpec>(&layer)) {
      const std::size_t w = pl->window, s = pl->stride;
      const std::size_t oh = (cur.h - w) / s + 1, ow = (cur.w - w) / s + 1;
      std::vector<T> out(oh * ow * cur.c);
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j)
          for (std::size_t ch = 0; ch < cur.c; ++ch) {
            // scan in flat-index order, keep the first maximum
            std::size_t best = (i * s * cur.w + j * s) * cur.c + ch;
            for (std::size_t a = 0; a < w; ++a)
              for (std::size_t b = 0; b < w; ++b) {
                const std::size_t idx = ((i * s + a) * cur.w + (j * s + b)) * cur.c + ch;
                if (value(act[idx]) > value(act[best])) best = idx;
              }
            if (pattern) pattern->push_back(best);
            out[(i * ow + j) * cur.c + ch] = act[best];
          }
      act = std::move(out);
      cur = {oh, ow, cur.c};
    } else if (std::holds_alternative<hfcnn::FlattenSpec>(layer)) {
      // channel-last storage is already the flattened order
    } else {
      const auto& fc = std::get<hfcnn::FcSpec>(layer);
      const std::size_t n_in = act.size(), n_out = fc.out_dim;
      std::vector<T> out(n_out);
      for (std::size_t o = 0; o < n_out; ++o) {
        T acc{0.0};
        for (std::size_t i = 0; i < n_in; ++i) acc += theta[off + o * n_in + i] * act[i];
        out[o] = acc + theta[off + n_out * n_in + o];
      }
      off += n_out * n_in + n_out;
      act = std::move(out);
      cur = {n_out, 1, 1};
    }
  }
  return act;
}

/// Jacobian of the logits with respect to theta, one dual pass per column:
/// J[c][j].
inline std::vector<std::vector<double>> jacobian(const std::vector<hfcnn::LayerSpec>& layers, Dims in,
                                                 const std::vector<double>& theta, const std::vector<double>& x) {
  std::vector<Dual> t(theta.size());
  for (std::size_t j = 0; j < theta.size(); ++j) t[j] = {theta[j], 0.0};
  std::vector<std::vector<double>> J;
  for (std::size_t j = 0; j < theta.size(); ++j) {
    t[j].d = 1.0;
    const auto z = forward(layers, in, t, x);
    if (J.empty()) J.assign(z.size(), std::vector<double>(theta.size()));
    for (std::size_t c = 0; c < z.size(); ++c) J[c][j] = z[c].d;
    t[j].d = 0.0;
  }
  return J;
}

inline double sq_loss(const std::vector<hfcnn::LayerSpec>& layers, Dims in, const std::vector<double>& theta,
                      const std::vector<std::vector<double>>& xs, const std::vector<std::uint32_t>& labels,
                      double reg) {
  long double total = 0.0L;
  for (std::size_t n = 0; n < xs.size(); ++n) {
    const auto z = forward(layers, in, theta, xs[n]);
    for (std::size_t c = 0; c < z.size(); ++c) {
      const long double r = z[c] - (c == labels[n] ? 1.0 : 0.0);
      total += r * r;
    }
  }
  long double tt = 0.0L;
  for (double v : theta) tt += static_cast<long double>(v) * v;
  return static_cast<double>(total / (2.0L * xs.size()) + 0.5L * reg * tt);
}

/// The same objective evaluated entirely in extended precision.
inline long double sq_loss_ext(const std::vector<hfcnn::LayerSpec>& layers, Dims in,
                               const std::vector<long double>& theta, const std::vector<std::vector<double>>& xs,
                               const std::vector<std::uint32_t>& labels, long double reg,
                               std::vector<std::size_t>* pattern = nullptr) {
  long double total = 0.0L;
  for (std::size_t n = 0; n < xs.size(); ++n) {
    const auto z = forward(layers, in, theta, xs[n], pattern);
    for (std::size_t c = 0; c < z.size(); ++c) {
      const long double r = z[c] - (c == labels[n] ? 1.0L : 0.0L);
      total += r * r;
    }
  }
  long double tt = 0.0L;
  for (long double v : theta) tt += v * v;
  return total / (2.0L * xs.size()) + 0.5L * reg * tt;
}

}  // namespace oracle
