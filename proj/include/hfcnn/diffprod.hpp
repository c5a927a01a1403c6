#pragma once

// Squared-error objective over a CNN, its reverse-mode gradient and the
// damped Gauss-Newton matrix-vector product
//
//   Gv = (1/N) sum_i J_i^T J_i v + (reg + lambda) v,
//
// where J_i is the Jacobian of the logits of sample i with respect to theta.
// J_i v is a forward directional pass and J_i^T u a reverse pass; both reuse
// the activations, ReLU masks and pooling argmax recorded by the forward
// pass at theta, so the linearization is frozen at theta.
//
// All sums over samples go through exact accumulators, so results are
// bitwise independent of batch size, worker count and scheduling.

#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <span>
#include <vector>

#include "hfcnn/data.hpp"
#include "hfcnn/exact_sum.hpp"
#include "hfcnn/model.hpp"
#include "hfcnn/parallel.hpp"

namespace hfcnn {

struct Objective {
  const Network* net = nullptr;
  const Dataset* data = nullptr;
  double reg = 1e-5;              // l2 weight on theta
  std::size_t batch_size = 128;   // samples per unit of parallel work

  void validate() const {
    if (!net || !data) throw Error(Errc::invalid_argument, "objective needs a network and a dataset");
    if (net->input_shape() != data->sample_shape)
      throw Error(Errc::shape_mismatch, "network input " + net->input_shape().str() + " vs samples " +
                                            data->sample_shape.str());
    if (net->n_classes() != data->n_classes)
      throw Error(Errc::shape_mismatch, "network has " + std::to_string(net->n_classes()) + " outputs, dataset " +
                                            std::to_string(data->n_classes) + " classes");
    if (!(reg >= 0.0) || !std::isfinite(reg)) throw Error(Errc::invalid_argument, "regularization must be >= 0");
    if (batch_size == 0) throw Error(Errc::invalid_argument, "batch size must be >= 1");
  }
};

inline std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return idx;
}

namespace detail {

/// Theta (or a direction) with weights re-laid out for the kernels:
/// conv filters as [patch][out_c], fc weights as [in][out].
struct Prepared {
  std::span<const double> raw;
  std::vector<std::vector<double>> wt;

  const double* w(const LayerInfo& li) const { return raw.data() + li.w_offset; }
  const double* b(const LayerInfo& li) const { return raw.data() + li.b_offset; }
};

inline Prepared prepare(const Network& net, std::span<const double> p) {
  Prepared out{p, std::vector<std::vector<double>>(net.info().size())};
  for (std::size_t l = 0; l < net.info().size(); ++l) {
    const LayerInfo& li = net.info()[l];
    if (li.kind == LayerKind::conv) {
      out.wt[l].resize(li.w_size);
      transpose(p.data() + li.w_offset, li.conv.out_c, li.conv.patch(), out.wt[l].data());
    } else if (li.kind == LayerKind::fc) {
      out.wt[l].resize(li.w_size);
      transpose(p.data() + li.w_offset, li.out_shape[0], li.in_shape[0], out.wt[l].data());
    }
  }
  return out;
}

/// What the directional and reverse passes need from a forward pass, for a
/// block of samples: the inputs of conv/fc layers, ReLU masks and pooling
/// argmax, stored layer by layer in contiguous arenas.
class TraceStore {
 public:
  TraceStore() = default;
  TraceStore(const Network& net, std::size_t n) : n_(n), n_classes_(net.n_classes()) {
    const auto& info = net.info();
    inputs_.resize(info.size());
    masks_.resize(info.size());
    argmax_.resize(info.size());
    for (std::size_t l = 0; l < info.size(); ++l) {
      const auto& li = info[l];
      if (li.kind == LayerKind::conv || li.kind == LayerKind::fc) inputs_[l].resize(n * li.in_shape.size());
      if (li.kind == LayerKind::relu) masks_[l].resize(n * li.in_shape.size());
      if (li.kind == LayerKind::pool) argmax_[l].resize(n * li.out_shape.size());
    }
    logits_.resize(n * n_classes_);
  }

  static std::size_t bytes_per_sample(const Network& net) {
    std::size_t b = net.n_classes() * sizeof(double);
    for (const auto& li : net.info()) {
      if (li.kind == LayerKind::conv || li.kind == LayerKind::fc) b += li.in_shape.size() * sizeof(double);
      if (li.kind == LayerKind::relu) b += li.in_shape.size();
      if (li.kind == LayerKind::pool) b += li.out_shape.size() * sizeof(std::uint32_t);
    }
    return b;
  }

  std::size_t size() const noexcept { return n_; }
  double* input(std::size_t l, std::size_t i, std::size_t len) { return inputs_[l].data() + i * len; }
  const double* input(std::size_t l, std::size_t i, std::size_t len) const { return inputs_[l].data() + i * len; }
  std::uint8_t* mask(std::size_t l, std::size_t i, std::size_t len) { return masks_[l].data() + i * len; }
  const std::uint8_t* mask(std::size_t l, std::size_t i, std::size_t len) const { return masks_[l].data() + i * len; }
  std::uint32_t* argmax(std::size_t l, std::size_t i, std::size_t len) { return argmax_[l].data() + i * len; }
  const std::uint32_t* argmax(std::size_t l, std::size_t i, std::size_t len) const {
    return argmax_[l].data() + i * len;
  }
  double* logits(std::size_t i) { return logits_.data() + i * n_classes_; }
  const double* logits(std::size_t i) const { return logits_.data() + i * n_classes_; }

 private:
  std::size_t n_ = 0, n_classes_ = 0;
  std::vector<std::vector<double>> inputs_;
  std::vector<std::vector<std::uint8_t>> masks_;
  std::vector<std::vector<std::uint32_t>> argmax_;
  std::vector<double> logits_;
};

/// Per-worker buffers.
struct Scratch {
  std::vector<double> act_a, act_b, cols;
  std::vector<std::vector<double>> gwt;
  std::vector<double> grad;
  TraceStore single;

  explicit Scratch(const Network& net) : single(net, 1) {
    std::size_t most = 0, cols_len = 0;
    gwt.resize(net.info().size());
    for (std::size_t l = 0; l < net.info().size(); ++l) {
      const auto& li = net.info()[l];
      most = std::max({most, li.in_shape.size(), li.out_shape.size()});
      if (li.kind == LayerKind::conv) {
        cols_len = std::max(cols_len, li.conv.patch() * li.conv.out_h * li.conv.out_w);
        gwt[l].resize(li.w_size);
      }
    }
    act_a.resize(most);
    act_b.resize(most);
    cols.resize(cols_len);
    grad.resize(net.param_count());
  }
};

inline std::size_t first_param_layer(const Network& net) {
  for (std::size_t l = 0; l < net.info().size(); ++l)
    if (net.info()[l].w_size > 0) return l;
  return net.info().size();
}

/// Forward pass of one sample, recording into slot `i` of `store`.
inline void forward_sample(const Network& net, const Prepared& p, const double* x, TraceStore& store,
                           std::size_t i, Scratch& s) {
  const double* cur = x;
  double* bufs[2] = {s.act_a.data(), s.act_b.data()};
  int next = 0;
  for (std::size_t l = 0; l < net.info().size(); ++l) {
    const LayerInfo& li = net.info()[l];
    const std::size_t n_in = li.in_shape.size();
    double* out = (l + 1 == net.info().size()) ? store.logits(i) : bufs[next];
    switch (li.kind) {
      case LayerKind::conv: {
        double* in = store.input(l, i, n_in);
        std::copy(cur, cur + n_in, in);
        conv_fwd(li.conv, in, p.wt[l].data(), p.b(li), out, s.cols.data());
        break;
      }
      case LayerKind::relu:
        relu_fwd(n_in, cur, out, store.mask(l, i, n_in));
        break;
      case LayerKind::pool:
        pool_fwd(li.pool, cur, out, store.argmax(l, i, li.out_shape.size()));
        break;
      case LayerKind::flatten:
        if (l + 1 == net.info().size()) std::copy(cur, cur + n_in, out);
        else continue;  // data unchanged, keep `cur`
        break;
      case LayerKind::fc: {
        double* in = store.input(l, i, n_in);
        std::copy(cur, cur + n_in, in);
        fc_fwd(n_in, li.out_shape[0], in, p.wt[l].data(), p.b(li), out);
        break;
      }
    }
    cur = out;
    next ^= 1;
  }
}

/// u = J v for the sample in slot `i`.
inline void rop_sample(const Network& net, const Prepared& p, const Prepared& v, const TraceStore& store,
                       std::size_t i, Scratch& s, double* u) {
  const double* r = nullptr;  // null: derivative identically zero
  double* bufs[2] = {s.act_a.data(), s.act_b.data()};
  int next = 0;
  for (std::size_t l = 0; l < net.info().size(); ++l) {
    const LayerInfo& li = net.info()[l];
    const std::size_t n_in = li.in_shape.size();
    double* out = bufs[next];
    switch (li.kind) {
      case LayerKind::conv:
        conv_rop(li.conv, store.input(l, i, n_in), r, p.wt[l].data(), v.wt[l].data(), v.b(li), out,
                 s.cols.data());
        break;
      case LayerKind::relu:
        if (!r) continue;
        apply_mask(n_in, store.mask(l, i, n_in), r, out);
        break;
      case LayerKind::pool:
        if (!r) continue;
        gather_argmax(li.out_shape.size(), store.argmax(l, i, li.out_shape.size()), r, out);
        break;
      case LayerKind::flatten:
        continue;
      case LayerKind::fc:
        fc_rop(n_in, li.out_shape[0], store.input(l, i, n_in), r, p.wt[l].data(), v.wt[l].data(), v.b(li), out);
        break;
    }
    r = out;
    next ^= 1;
  }
  std::copy(r, r + net.n_classes(), u);
}

/// grad = J^T g for the sample in slot `i`; `grad` is fully overwritten.
inline void backprop_sample(const Network& net, const Prepared& p, const TraceStore& store, std::size_t i,
                            const double* gout, Scratch& s, double* grad) {
  std::fill(grad, grad + net.param_count(), 0.0);
  const std::size_t stop = first_param_layer(net);
  const double* g = gout;
  double* bufs[2] = {s.act_a.data(), s.act_b.data()};
  int next = 0;
  for (std::size_t l = net.info().size(); l-- > stop;) {
    const LayerInfo& li = net.info()[l];
    const std::size_t n_in = li.in_shape.size();
    double* gin = l > stop ? bufs[next] : nullptr;
    switch (li.kind) {
      case LayerKind::conv: {
        auto& gwt = s.gwt[l];
        std::fill(gwt.begin(), gwt.end(), 0.0);
        conv_bwd(li.conv, store.input(l, i, n_in), g, p.w(li), gwt.data(), grad + li.b_offset, gin,
                 s.cols.data());
        transpose(gwt.data(), li.conv.patch(), li.conv.out_c, grad + li.w_offset);
        break;
      }
      case LayerKind::relu:
        apply_mask(n_in, store.mask(l, i, n_in), g, gin);
        break;
      case LayerKind::pool:
        scatter_argmax(li.out_shape.size(), n_in, store.argmax(l, i, li.out_shape.size()), g, gin);
        break;
      case LayerKind::flatten:
        continue;
      case LayerKind::fc:
        fc_bwd(n_in, li.out_shape[0], store.input(l, i, n_in), g, p.w(li), grad + li.w_offset, grad + li.b_offset,
               gin);
        break;
    }
    if (!gin) break;
    g = gin;
    next ^= 1;
  }
}

inline void residual(const double* logits, std::uint32_t label, std::size_t n_classes, double* r) {
  for (std::size_t c = 0; c < n_classes; ++c) r[c] = logits[c] - (c == label ? 1.0 : 0.0);
}

inline void check_theta(const Objective& obj, const ParamVector& theta) {
  obj.validate();
  if (theta.size() != obj.net->param_count())
    throw Error(Errc::shape_mismatch, "theta has " + std::to_string(theta.size()) + " entries, network needs " +
                                          std::to_string(obj.net->param_count()));
  require_finite(theta.span(), "theta");
}

inline void check_indices(const Objective& obj, std::span<const std::size_t> indices) {
  if (indices.empty()) throw Error(Errc::empty_set, "objective evaluated on no samples");
  for (auto i : indices)
    if (i >= obj.data->size()) throw Error(Errc::out_of_bounds, "sample index " + std::to_string(i));
}

inline std::vector<std::unique_ptr<Scratch>> make_scratch(const Network& net, std::size_t workers) {
  std::vector<std::unique_ptr<Scratch>> out;
  for (std::size_t w = 0; w < workers; ++w) out.push_back(std::make_unique<Scratch>(net));
  return out;
}

struct LossGradPartial {
  ExactSum loss;
  ExactVectorSum grad;
};

}  // namespace detail

struct Evaluation {
  double f = 0.0;
  ParamVector grad;
};

/// f(theta) = (1/2N) sum_i ||z_i - y_i||^2 + (reg/2) ||theta||^2 over `indices`.
inline double loss(const Objective& obj, const ParamVector& theta, std::span<const std::size_t> indices,
                   Executor& exec) {
  detail::check_theta(obj, theta);
  detail::check_indices(obj, indices);
  const Network& net = *obj.net;
  const auto prep = detail::prepare(net, theta.span());
  auto scratch = detail::make_scratch(net, exec.workers());
  const auto plan = make_plan(indices.size(), obj.batch_size, exec.workers());
  const std::size_t C = net.n_classes();

  ExactSum total = map_reduce_batches(
      exec, plan, ExactSum{},
      [&](std::size_t, BatchRange range, std::size_t wid) {
        auto& s = *scratch[wid];
        ExactSum part;
        std::vector<double> r(C);
        for (std::size_t k = range.begin; k < range.end; ++k) {
          const std::size_t idx = indices[k];
          detail::forward_sample(net, prep, obj.data->image(idx).data(), s.single, 0, s);
          detail::residual(s.single.logits(0), obj.data->labels[idx], C, r.data());
          require_finite(r, "network output");
          double sq = 0.0;
          for (double x : r) sq += x * x;
          part.add(sq);
        }
        return part;
      },
      [](ExactSum& acc, const ExactSum& part) { acc.merge(part); });

  const double n = static_cast<double>(indices.size());
  const double f = total.value() / (2.0 * n) + 0.5 * obj.reg * dot(theta.span(), theta.span());
  if (!std::isfinite(f)) throw Error(Errc::non_finite, "loss");
  return f;
}

/// Loss and gradient in one pass.
inline Evaluation evaluate(const Objective& obj, const ParamVector& theta, std::span<const std::size_t> indices,
                           Executor& exec) {
  detail::check_theta(obj, theta);
  detail::check_indices(obj, indices);
  const Network& net = *obj.net;
  const auto prep = detail::prepare(net, theta.span());
  auto scratch = detail::make_scratch(net, exec.workers());
  const auto plan = make_plan(indices.size(), obj.batch_size, exec.workers());
  const std::size_t C = net.n_classes(), P = net.param_count();

  auto total = map_reduce_batches(
      exec, plan, detail::LossGradPartial{ExactSum{}, ExactVectorSum(P)},
      [&](std::size_t, BatchRange range, std::size_t wid) {
        auto& s = *scratch[wid];
        detail::LossGradPartial part{ExactSum{}, ExactVectorSum(P)};
        std::vector<double> r(C);
        for (std::size_t k = range.begin; k < range.end; ++k) {
          const std::size_t idx = indices[k];
          detail::forward_sample(net, prep, obj.data->image(idx).data(), s.single, 0, s);
          detail::residual(s.single.logits(0), obj.data->labels[idx], C, r.data());
          require_finite(r, "network output");
          double sq = 0.0;
          for (double x : r) sq += x * x;
          part.loss.add(sq);
          detail::backprop_sample(net, prep, s.single, 0, r.data(), s, s.grad.data());
          part.grad.add(s.grad);
        }
        return part;
      },
      [](detail::LossGradPartial& acc, const detail::LossGradPartial& part) {
        acc.loss.merge(part.loss);
        acc.grad.merge(part.grad);
      });

  const double n = static_cast<double>(indices.size());
  Evaluation ev;
  ev.f = total.loss.value() / (2.0 * n) + 0.5 * obj.reg * dot(theta.span(), theta.span());
  if (!std::isfinite(ev.f)) throw Error(Errc::non_finite, "loss");
  std::vector<double> g = total.grad.values();
  for (std::size_t j = 0; j < P; ++j) g[j] = g[j] / n + obj.reg * theta[j];
  require_finite(g, "gradient");
  ev.grad = net.make_params(std::move(g));
  return ev;
}

inline ParamVector gradient(const Objective& obj, const ParamVector& theta, std::span<const std::size_t> indices,
                            Executor& exec) {
  return evaluate(obj, theta, indices, exec).grad;
}

// Serial conveniences.
inline double loss(const Objective& obj, const ParamVector& theta, std::span<const std::size_t> indices) {
  auto exec = Executor::serial();
  return loss(obj, theta, indices, exec);
}
inline ParamVector gradient(const Objective& obj, const ParamVector& theta, std::span<const std::size_t> indices) {
  auto exec = Executor::serial();
  return gradient(obj, theta, indices, exec);
}

// ---------------------------------------------------------------------------
// Caches for Gauss-Newton products

enum class CachePolicy { automatic, store, recompute };

/// The forward information of one mini-batch at a fixed theta.
struct BatchCache {
  BatchRange range;                                     // positions within the Gauss-Newton sample set
  std::vector<std::size_t> samples;                     // dataset indices
  std::shared_ptr<const std::vector<double>> theta;     // values the cache was built at
  std::shared_ptr<detail::TraceStore> trace;            // null under the recompute policy
  std::vector<double> residuals;                        // samples.size() x n_classes

  bool valid_for(const ParamVector& t) const {
    return theta && t.size() == theta->size() &&
           std::equal(theta->begin(), theta->end(), t.values().begin(), [](double a, double b) {
             return std::bit_cast<std::uint64_t>(a) == std::bit_cast<std::uint64_t>(b);
           });
  }
};

struct CacheSet {
  BatchPlan plan;
  std::vector<BatchCache> batches;
  CachePolicy policy = CachePolicy::store;
  std::shared_ptr<const std::vector<double>> theta;

  std::size_t samples() const noexcept { return plan.total; }
  bool valid_for(const ParamVector& t) const { return !batches.empty() && batches.front().valid_for(t); }
};

inline constexpr std::size_t kDefaultCacheBudget = std::size_t{1} << 30;

inline CachePolicy resolve_policy(const Network& net, std::size_t n, CachePolicy policy,
                                  std::size_t budget_bytes = kDefaultCacheBudget) {
  if (policy != CachePolicy::automatic) return policy;
  return detail::TraceStore::bytes_per_sample(net) * n <= budget_bytes ? CachePolicy::store : CachePolicy::recompute;
}

inline CacheSet build_caches(const Objective& obj, const ParamVector& theta, std::span<const std::size_t> indices,
                             Executor& exec, CachePolicy policy = CachePolicy::automatic,
                             std::size_t budget_bytes = kDefaultCacheBudget) {
  detail::check_theta(obj, theta);
  detail::check_indices(obj, indices);
  const Network& net = *obj.net;
  const std::size_t C = net.n_classes();
  CacheSet cs;
  cs.plan = make_plan(indices.size(), obj.batch_size, exec.workers());
  cs.policy = resolve_policy(net, indices.size(), policy, budget_bytes);
  cs.theta = std::make_shared<const std::vector<double>>(theta.values());
  cs.batches.resize(cs.plan.batches.size());
  const auto prep = detail::prepare(net, theta.span());
  auto scratch = detail::make_scratch(net, exec.workers());

  map_reduce_batches(
      exec, cs.plan, 0,
      [&](std::size_t b, BatchRange range, std::size_t wid) {
        auto& s = *scratch[wid];
        BatchCache& bc = cs.batches[b];
        bc.range = range;
        bc.theta = cs.theta;
        bc.samples.assign(indices.begin() + static_cast<std::ptrdiff_t>(range.begin),
                          indices.begin() + static_cast<std::ptrdiff_t>(range.end));
        bc.residuals.resize(range.size() * C);
        if (cs.policy == CachePolicy::store) bc.trace = std::make_shared<detail::TraceStore>(net, range.size());
        for (std::size_t k = 0; k < range.size(); ++k) {
          const std::size_t idx = bc.samples[k];
          detail::TraceStore& store = bc.trace ? *bc.trace : s.single;
          const std::size_t slot = bc.trace ? k : 0;
          detail::forward_sample(net, prep, obj.data->image(idx).data(), store, slot, s);
          detail::residual(store.logits(slot), obj.data->labels[idx], C, bc.residuals.data() + k * C);
        }
        require_finite(bc.residuals, "network output");
        return 0;
      },
      [](int&, int) {});
  return cs;
}

namespace detail {

inline void check_cache(const Objective& obj, const ParamVector& theta, const BatchCache& cache) {
  check_theta(obj, theta);
  if (!cache.valid_for(theta)) throw Error(Errc::stale_cache, "batch cache was built at a different theta");
}

/// Slot holding sample k of `cache`, recomputing the forward pass when the
/// cache does not store traces.
inline std::pair<const TraceStore*, std::size_t> trace_for(const Objective& obj, const Prepared& prep,
                                                           const BatchCache& cache, std::size_t k, Scratch& s) {
  if (cache.trace) return {cache.trace.get(), k};
  forward_sample(*obj.net, prep, obj.data->image(cache.samples[k]).data(), s.single, 0, s);
  return {&s.single, 0};
}

}  // namespace detail

/// J_i v for every sample i of the batch.
inline std::vector<std::vector<double>> jacobian_vec(const Objective& obj, const ParamVector& theta,
                                                     const ParamVector& v, const BatchCache& cache) {
  detail::check_cache(obj, theta, cache);
  if (v.size() != theta.size()) throw Error(Errc::shape_mismatch, "direction length");
  const Network& net = *obj.net;
  const auto prep = detail::prepare(net, theta.span());
  const auto vprep = detail::prepare(net, v.span());
  detail::Scratch s(net);
  std::vector<std::vector<double>> out;
  for (std::size_t k = 0; k < cache.samples.size(); ++k) {
    auto [store, slot] = detail::trace_for(obj, prep, cache, k, s);
    std::vector<double> u(net.n_classes());
    detail::rop_sample(net, prep, vprep, *store, slot, s, u.data());
    out.push_back(std::move(u));
  }
  return out;
}

/// sum_i J_i^T u_i over the samples of the batch.
inline ParamVector jacobian_transpose_vec(const Objective& obj, const ParamVector& theta,
                                          const std::vector<std::vector<double>>& u, const BatchCache& cache) {
  detail::check_cache(obj, theta, cache);
  const Network& net = *obj.net;
  if (u.size() != cache.samples.size()) throw Error(Errc::shape_mismatch, "one output vector per cached sample");
  const auto prep = detail::prepare(net, theta.span());
  detail::Scratch s(net);
  ExactVectorSum acc(net.param_count());
  for (std::size_t k = 0; k < cache.samples.size(); ++k) {
    if (u[k].size() != net.n_classes()) throw Error(Errc::shape_mismatch, "output vector length");
    auto [store, slot] = detail::trace_for(obj, prep, cache, k, s);
    detail::backprop_sample(net, prep, *store, slot, u[k].data(), s, s.grad.data());
    acc.add(s.grad);
  }
  return net.make_params(acc.values());
}

/// (1/N) sum_i J_i^T J_i v + (reg + lambda) v over all cached samples.
inline ParamVector gauss_newton_vec(const Objective& obj, const ParamVector& theta, const ParamVector& v,
                                    const CacheSet& caches, double lambda, Executor& exec) {
  detail::check_theta(obj, theta);
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw Error(Errc::invalid_argument, "damping must be >= 0");
  if (v.size() != theta.size()) throw Error(Errc::shape_mismatch, "direction length");
  require_finite(v.span(), "direction");
  if (!caches.valid_for(theta)) throw Error(Errc::stale_cache, "Gauss-Newton caches were built at a different theta");
  const Network& net = *obj.net;
  const std::size_t P = net.param_count(), C = net.n_classes();
  const auto prep = detail::prepare(net, theta.span());
  const auto vprep = detail::prepare(net, v.span());
  auto scratch = detail::make_scratch(net, exec.workers());

  ExactVectorSum total = map_reduce_batches(
      exec, caches.plan, ExactVectorSum(P),
      [&](std::size_t b, BatchRange, std::size_t wid) {
        auto& s = *scratch[wid];
        const BatchCache& bc = caches.batches[b];
        ExactVectorSum part(P);
        std::vector<double> u(C);
        for (std::size_t k = 0; k < bc.samples.size(); ++k) {
          auto [store, slot] = detail::trace_for(obj, prep, bc, k, s);
          detail::rop_sample(net, prep, vprep, *store, slot, s, u.data());
          detail::backprop_sample(net, prep, *store, slot, u.data(), s, s.grad.data());
          part.add(s.grad);
        }
        return part;
      },
      [](ExactVectorSum& acc, const ExactVectorSum& part) { acc.merge(part); });

  const double n = static_cast<double>(caches.samples());
  std::vector<double> out = total.values();
  const double damp = obj.reg + lambda;
  for (std::size_t j = 0; j < P; ++j) out[j] = out[j] / n + damp * v[j];
  require_finite(out, "Gauss-Newton product");
  return net.make_params(std::move(out));
}

/// Fraction of samples whose largest logit (first on ties) is the label.
inline double accuracy(const Network& net, const ParamVector& theta, const Dataset& data, Executor& exec) {
  Objective obj{&net, &data, 0.0, 128};
  detail::check_theta(obj, theta);
  const auto prep = detail::prepare(net, theta.span());
  auto scratch = detail::make_scratch(net, exec.workers());
  const auto plan = make_plan(data.size(), obj.batch_size, exec.workers());
  const std::size_t C = net.n_classes();
  const std::size_t correct = map_reduce_batches(
      exec, plan, std::size_t{0},
      [&](std::size_t, BatchRange range, std::size_t wid) {
        auto& s = *scratch[wid];
        std::size_t hits = 0;
        for (std::size_t i = range.begin; i < range.end; ++i) {
          detail::forward_sample(net, prep, data.image(i).data(), s.single, 0, s);
          const double* z = s.single.logits(0);
          const auto best = static_cast<std::uint32_t>(std::max_element(z, z + C) - z);
          hits += best == data.labels[i];
        }
        return hits;
      },
      [](std::size_t& acc, std::size_t part) { acc += part; });
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

}  // namespace hfcnn
