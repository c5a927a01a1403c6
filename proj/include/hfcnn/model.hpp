#pragma once

// CNN layer specs, the flat parameter vector, single-layer forward ops and
// the network forward pass.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "hfcnn/detail/kernels.hpp"
#include "hfcnn/tensor.hpp"

namespace hfcnn {

struct ConvSpec {
  std::size_t filter_size = 1;
  std::size_t stride = 1;
  std::size_t out_channels = 1;
  std::size_t pad = 0;  // 0 is "valid"; p > 0 is symmetric zero padding
};

struct ReluSpec {};

struct PoolSpec {
  std::size_t window = 2;
  std::size_t stride = 2;
};

struct FlattenSpec {};

struct FcSpec {
  std::size_t in_dim = 0;  // 0 means "infer from the previous layer"
  std::size_t out_dim = 1;
};

using LayerSpec = std::variant<ConvSpec, ReluSpec, PoolSpec, FlattenSpec, FcSpec>;

/// floor((a + 2 pad - h) / s) + 1
inline std::size_t conv_out_dims(std::size_t a, std::size_t h, std::size_t s, std::size_t pad = 0) {
  if (s == 0) throw Error(Errc::invalid_argument, "stride must be >= 1");
  if (h == 0) throw Error(Errc::invalid_argument, "filter size must be >= 1");
  if (a + 2 * pad < h)
    throw Error(Errc::shape_mismatch, "filter of size " + std::to_string(h) +
                                          " larger than padded input " + std::to_string(a + 2 * pad));
  return (a + 2 * pad - h) / s + 1;
}

// ---------------------------------------------------------------------------
// Parameter vector

enum class SegmentKind { conv_filters, conv_bias, fc_weights, fc_bias };

struct ParamSegment {
  std::size_t layer = 0;
  SegmentKind kind = SegmentKind::conv_filters;
  std::size_t offset = 0;
  std::size_t extent = 0;
};

struct ParamLayout {
  std::vector<ParamSegment> segments;
  std::size_t total = 0;
};

class ParamVector {
 public:
  ParamVector() = default;
  explicit ParamVector(std::vector<double> values, std::shared_ptr<const ParamLayout> layout = nullptr)
      : values_(std::move(values)), layout_(std::move(layout)) {
    if (layout_ && layout_->total != values_.size())
      throw Error(Errc::shape_mismatch, "parameter count " + std::to_string(values_.size()) +
                                            " does not match layout " + std::to_string(layout_->total));
  }

  static ParamVector zeros_like(const ParamVector& other) {
    return ParamVector(std::vector<double>(other.size(), 0.0), other.layout_);
  }

  std::size_t size() const noexcept { return values_.size(); }
  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }
  std::span<double> span() noexcept { return values_; }
  std::span<const double> span() const noexcept { return values_; }
  const std::vector<double>& values() const noexcept { return values_; }
  const std::shared_ptr<const ParamLayout>& layout() const noexcept { return layout_; }

  /// Values equal bit for bit (layouts are not compared).
  bool same_values(const ParamVector& o) const {
    return values_.size() == o.values_.size() &&
           std::equal(values_.begin(), values_.end(), o.values_.begin(),
                      [](double a, double b) { return std::bit_cast<std::uint64_t>(a) == std::bit_cast<std::uint64_t>(b); });
  }

 private:
  std::vector<double> values_;
  std::shared_ptr<const ParamLayout> layout_;
};

inline double dot(const ParamVector& a, const ParamVector& b) { return dot(a.span(), b.span()); }
inline double norm2(const ParamVector& a) { return norm2(a.span()); }

/// y + alpha * x
inline ParamVector axpy(double alpha, const ParamVector& x, const ParamVector& y) {
  ParamVector out = y;
  axpy_inplace(alpha, x.span(), out.span());
  return out;
}

inline ParamVector scaled(double alpha, const ParamVector& x) {
  ParamVector out = x;
  for (auto& v : out.span()) v *= alpha;
  return out;
}

// ---------------------------------------------------------------------------
// Single-layer forward ops on tensors

using ArgmaxMap = std::vector<std::size_t>;

namespace detail {

inline ConvGeom conv_geom(const Shape& in, const ConvSpec& spec) {
  if (in.rank() != 3) throw Error(Errc::shape_mismatch, "conv input must be rank 3, got " + in.str());
  if (spec.stride == 0 || spec.filter_size == 0 || spec.out_channels == 0)
    throw Error(Errc::invalid_argument, "conv spec extents must be >= 1");
  ConvGeom g;
  g.in_h = in[0];
  g.in_w = in[1];
  g.in_c = in[2];
  g.fsize = spec.filter_size;
  g.stride = spec.stride;
  g.pad = spec.pad;
  g.out_c = spec.out_channels;
  g.out_h = conv_out_dims(g.in_h, g.fsize, g.stride, g.pad);
  g.out_w = conv_out_dims(g.in_w, g.fsize, g.stride, g.pad);
  return g;
}

inline PoolGeom pool_geom(const Shape& in, const PoolSpec& spec) {
  if (in.rank() != 3) throw Error(Errc::shape_mismatch, "pool input must be rank 3, got " + in.str());
  if (spec.window == 0 || spec.stride == 0) throw Error(Errc::invalid_argument, "pool spec extents must be >= 1");
  PoolGeom g;
  g.in_h = in[0];
  g.in_w = in[1];
  g.ch = in[2];
  g.window = spec.window;
  g.stride = spec.stride;
  g.out_h = conv_out_dims(g.in_h, g.window, g.stride, 0);
  g.out_w = conv_out_dims(g.in_w, g.window, g.stride, 0);
  return g;
}

}  // namespace detail

/// filters: [out_channels, h, h, in_channels]; biases: [out_channels].
inline Tensor conv_forward(const Tensor& input, const ConvSpec& spec, const Tensor& filters,
                           const Tensor& biases) {
  const detail::ConvGeom g = detail::conv_geom(input.shape(), spec);
  const Shape want_f{g.out_c, g.fsize, g.fsize, g.in_c};
  if (filters.shape() != want_f)
    throw Error(Errc::shape_mismatch, "filters " + filters.shape().str() + ", expected " + want_f.str());
  if (biases.size() != g.out_c) throw Error(Errc::shape_mismatch, "bias count");
  std::vector<double> wt(filters.size()), cols(g.patch() * g.out_h * g.out_w), out(g.out_size());
  detail::transpose(filters.data().data(), g.out_c, g.patch(), wt.data());
  detail::conv_fwd(g, input.data().data(), wt.data(), biases.data().data(), out.data(), cols.data());
  return Tensor(Shape{g.out_h, g.out_w, g.out_c}, std::move(out));
}

inline Tensor relu(const Tensor& t) {
  std::vector<double> out(t.size());
  detail::relu_fwd(t.size(), t.data().data(), out.data(), nullptr);
  return Tensor(t.shape(), std::move(out));
}

inline std::pair<Tensor, ArgmaxMap> maxpool_forward(const Tensor& t, const PoolSpec& spec) {
  const detail::PoolGeom g = detail::pool_geom(t.shape(), spec);
  std::vector<double> out(g.out_size());
  std::vector<std::uint32_t> am(g.out_size());
  detail::pool_fwd(g, t.data().data(), out.data(), am.data());
  return {Tensor(Shape{g.out_h, g.out_w, g.ch}, std::move(out)), ArgmaxMap(am.begin(), am.end())};
}

/// W: [out_dim, in_dim]. Returns W x + b.
inline std::vector<double> fc_forward(std::span<const double> x, const FcSpec& spec, const Tensor& W,
                                      std::span<const double> b) {
  if (x.size() != spec.in_dim || b.size() != spec.out_dim || W.shape() != Shape{spec.out_dim, spec.in_dim})
    throw Error(Errc::shape_mismatch, "fc_forward dimensions");
  std::vector<double> wt(W.size()), out(spec.out_dim);
  detail::transpose(W.data().data(), spec.out_dim, spec.in_dim, wt.data());
  detail::fc_fwd(spec.in_dim, spec.out_dim, x.data(), wt.data(), b.data(), out.data());
  require_finite(out, "fc_forward");
  return out;
}

// ---------------------------------------------------------------------------
// Network

enum class LayerKind { conv, relu, pool, flatten, fc };

struct LayerInfo {
  LayerKind kind = LayerKind::relu;
  Shape in_shape, out_shape;
  detail::ConvGeom conv;
  detail::PoolGeom pool;
  std::size_t w_offset = 0, w_size = 0;  // filters or fc weights
  std::size_t b_offset = 0, b_size = 0;
  std::size_t fan_in = 0, fan_out = 0;
};

class Network {
 public:
  Network() = default;

  Network(Shape input_shape, std::vector<LayerSpec> layers)
      : input_shape_(std::move(input_shape)), layers_(std::move(layers)) {
    build();
    theta_ = ParamVector(std::vector<double>(layout_->total, 0.0), layout_);
  }

  const Shape& input_shape() const noexcept { return input_shape_; }
  const std::vector<LayerSpec>& layers() const noexcept { return layers_; }
  const std::vector<LayerInfo>& info() const noexcept { return info_; }
  const std::shared_ptr<const ParamLayout>& layout() const noexcept { return layout_; }
  std::size_t param_count() const noexcept { return layout_ ? layout_->total : 0; }
  std::size_t n_classes() const { return info_.back().out_shape.size(); }

  const ParamVector& theta() const noexcept { return theta_; }
  void set_theta(ParamVector v) {
    if (v.size() != param_count())
      throw Error(Errc::shape_mismatch, "theta has " + std::to_string(v.size()) + " entries, network needs " +
                                            std::to_string(param_count()));
    theta_ = ParamVector(std::vector<double>(v.values()), layout_);
  }

  /// Wraps raw values in this network's layout, checking the length.
  ParamVector make_params(std::vector<double> values) const {
    if (values.size() != param_count()) throw Error(Errc::shape_mismatch, "parameter vector length");
    return ParamVector(std::move(values), layout_);
  }
  ParamVector zero_params() const { return ParamVector(std::vector<double>(param_count(), 0.0), layout_); }

 private:
  void build() {
    if (layers_.empty()) throw Error(Errc::invalid_argument, "network has no layers");
    auto layout = std::make_shared<ParamLayout>();
    Shape cur = input_shape_;
    std::size_t offset = 0;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      LayerInfo li;
      li.in_shape = cur;
      std::visit(
          [&](auto& spec) {
            using S = std::decay_t<decltype(spec)>;
            if constexpr (std::is_same_v<S, ConvSpec>) {
              li.kind = LayerKind::conv;
              li.conv = detail::conv_geom(cur, spec);
              li.out_shape = Shape{li.conv.out_h, li.conv.out_w, li.conv.out_c};
              li.w_size = li.conv.out_c * li.conv.patch();
              li.b_size = li.conv.out_c;
              li.fan_in = li.conv.patch();
              li.fan_out = li.conv.fsize * li.conv.fsize * li.conv.out_c;
            } else if constexpr (std::is_same_v<S, ReluSpec>) {
              li.kind = LayerKind::relu;
              li.out_shape = cur;
            } else if constexpr (std::is_same_v<S, PoolSpec>) {
              li.kind = LayerKind::pool;
              li.pool = detail::pool_geom(cur, spec);
              li.out_shape = Shape{li.pool.out_h, li.pool.out_w, li.pool.ch};
            } else if constexpr (std::is_same_v<S, FlattenSpec>) {
              li.kind = LayerKind::flatten;
              li.out_shape = Shape{cur.size()};
            } else {
              li.kind = LayerKind::fc;
              if (cur.rank() != 1)
                throw Error(Errc::shape_mismatch, "fc layer " + std::to_string(l) + " needs a flat input, got " +
                                                      cur.str() + " (add a flatten layer)");
              if (spec.in_dim == 0) spec.in_dim = cur[0];
              if (spec.in_dim != cur[0] || spec.out_dim == 0)
                throw Error(Errc::shape_mismatch, "fc layer " + std::to_string(l) + " expects in_dim " +
                                                      std::to_string(spec.in_dim) + ", input is " + cur.str());
              li.out_shape = Shape{spec.out_dim};
              li.w_size = spec.out_dim * spec.in_dim;
              li.b_size = spec.out_dim;
              li.fan_in = spec.in_dim;
              li.fan_out = spec.out_dim;
            }
          },
          layers_[l]);
      if (li.w_size > 0) {
        const bool conv = li.kind == LayerKind::conv;
        li.w_offset = offset;
        layout->segments.push_back({l, conv ? SegmentKind::conv_filters : SegmentKind::fc_weights, offset, li.w_size});
        offset += li.w_size;
        li.b_offset = offset;
        layout->segments.push_back({l, conv ? SegmentKind::conv_bias : SegmentKind::fc_bias, offset, li.b_size});
        offset += li.b_size;
      }
      cur = li.out_shape;
      info_.push_back(li);
    }
    if (info_.back().kind != LayerKind::fc) throw Error(Errc::invalid_argument, "last layer must be fully connected");
    layout->total = offset;
    layout_ = std::move(layout);
  }

  Shape input_shape_;
  std::vector<LayerSpec> layers_;
  std::vector<LayerInfo> info_;
  std::shared_ptr<const ParamLayout> layout_;
  ParamVector theta_;
};

inline ParamVector pack_params(const Network& net) { return net.theta(); }

inline Network unpack_params(const Network& net, const ParamVector& v) {
  Network out = net;
  out.set_theta(v);
  return out;
}

/// Uniform in +-sqrt(6 / (fan_in + fan_out)) for weights, zero biases.
inline ParamVector init_params(const Network& net, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<double> v(net.param_count(), 0.0);
  for (const auto& li : net.info()) {
    if (li.w_size == 0) continue;
    const double r = std::sqrt(6.0 / static_cast<double>(li.fan_in + li.fan_out));
    std::uniform_real_distribution<double> dist(-r, r);
    for (std::size_t i = 0; i < li.w_size; ++i) v[li.w_offset + i] = dist(rng);
  }
  return net.make_params(std::move(v));
}

// ---------------------------------------------------------------------------
// Forward pass with full activation record

struct LayerCacheList {
  std::vector<Tensor> activations;  // activations[l] is the input of layer l; back() is the logits
  std::vector<ArgmaxMap> argmax;    // non-empty for pool layers only
};

struct ForwardResult {
  std::vector<double> logits;
  LayerCacheList cache;
};

inline ForwardResult network_forward(const Network& net, const Tensor& input) {
  if (input.shape() != net.input_shape())
    throw Error(Errc::shape_mismatch, "input " + input.shape().str() + ", network expects " + net.input_shape().str());
  const auto theta = net.theta().span();
  ForwardResult res;
  res.cache.activations.push_back(input);
  res.cache.argmax.resize(net.layers().size());
  for (std::size_t l = 0; l < net.layers().size(); ++l) {
    const LayerInfo& li = net.info()[l];
    const Tensor& x = res.cache.activations.back();
    Tensor y;
    switch (li.kind) {
      case LayerKind::conv: {
        Tensor f(Shape{li.conv.out_c, li.conv.fsize, li.conv.fsize, li.conv.in_c},
                 std::vector<double>(theta.begin() + li.w_offset, theta.begin() + li.w_offset + li.w_size));
        Tensor b(Shape{li.b_size}, std::vector<double>(theta.begin() + li.b_offset, theta.begin() + li.b_offset + li.b_size));
        y = conv_forward(x, std::get<ConvSpec>(net.layers()[l]), f, b);
        break;
      }
      case LayerKind::relu:
        y = relu(x);
        break;
      case LayerKind::pool: {
        auto [t, am] = maxpool_forward(x, std::get<PoolSpec>(net.layers()[l]));
        y = std::move(t);
        res.cache.argmax[l] = std::move(am);
        break;
      }
      case LayerKind::flatten:
        y = Tensor(li.out_shape, x.values());
        break;
      case LayerKind::fc: {
        const auto& spec = std::get<FcSpec>(net.layers()[l]);
        Tensor W(Shape{spec.out_dim, spec.in_dim},
                 std::vector<double>(theta.begin() + li.w_offset, theta.begin() + li.w_offset + li.w_size));
        y = Tensor(li.out_shape, fc_forward(x.data(), spec, W, theta.subspan(li.b_offset, li.b_size)));
        break;
      }
    }
    require_finite(y.data(), "network_forward");
    res.cache.activations.push_back(std::move(y));
  }
  res.logits = res.cache.activations.back().values();
  return res;
}

// ---------------------------------------------------------------------------
// Architecture files

/// One layer per line: `conv h s out_ch [pad]`, `relu`, `pool w s`,
/// `flatten`, `fc out`. Blank lines and `#` comments are ignored.
inline std::vector<LayerSpec> parse_architecture(const std::string& text) {
  std::vector<LayerSpec> layers;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& msg) {
    throw Error(Errc::format, "architecture line " + std::to_string(lineno) + ": " + msg);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    std::istringstream ls(line);
    std::string kw;
    if (!(ls >> kw)) continue;
    std::vector<long long> args;
    std::string tok;
    while (ls >> tok) {
      std::size_t used = 0;
      long long v = 0;
      try {
        v = std::stoll(tok, &used);
      } catch (const std::exception&) {
        fail("non-numeric argument '" + tok + "'");
      }
      if (used != tok.size() || v < 0) fail("bad argument '" + tok + "'");
      args.push_back(v);
    }
    auto need = [&](std::size_t lo, std::size_t hi) {
      if (args.size() < lo || args.size() > hi) fail("wrong argument count for '" + kw + "'");
    };
    auto pos = [&](std::size_t i) {
      if (args[i] == 0) fail("'" + kw + "' extents must be positive");
      return static_cast<std::size_t>(args[i]);
    };
    if (kw == "conv") {
      need(3, 4);
      layers.emplace_back(ConvSpec{pos(0), pos(1), pos(2), args.size() == 4 ? static_cast<std::size_t>(args[3]) : 0});
    } else if (kw == "relu") {
      need(0, 0);
      layers.emplace_back(ReluSpec{});
    } else if (kw == "pool") {
      need(2, 2);
      layers.emplace_back(PoolSpec{pos(0), pos(1)});
    } else if (kw == "flatten") {
      need(0, 0);
      layers.emplace_back(FlattenSpec{});
    } else if (kw == "fc") {
      need(1, 1);
      layers.emplace_back(FcSpec{0, pos(0)});
    } else {
      fail("unknown layer '" + kw + "'");
    }
  }
  if (layers.empty()) throw Error(Errc::format, "architecture has no layers");
  return layers;
}

inline std::vector<LayerSpec> load_architecture(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error(Errc::io, "cannot open architecture file " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_architecture(ss.str());
}

/// conv 5x5x32 -> relu -> pool 2/2 -> conv 3x3x16 -> relu -> pool 2/2 -> flatten -> fc.
inline std::vector<LayerSpec> default_architecture(std::size_t n_classes = 10) {
  return {ConvSpec{5, 1, 32, 0}, ReluSpec{}, PoolSpec{2, 2}, ConvSpec{3, 1, 16, 0}, ReluSpec{},
          PoolSpec{2, 2},        FlattenSpec{}, FcSpec{0, n_classes}};
}

}  // namespace hfcnn
