#pragma once

// Hessian-free Newton-CG: conjugate gradient on the damped Gauss-Newton
// system, backtracking line search with step halving, and
// Levenberg-Marquardt style adaptation of the damping.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "hfcnn/diffprod.hpp"

namespace hfcnn {

struct NewtonConfig {
  std::size_t max_outer_iters = 30;
  double grad_tol = 1e-5;       // relative to max(1, ||grad f(theta_0)||)
  std::size_t cg_max_iters = 250;
  double cg_rtol = 0.1;
  double armijo_eta = 1e-4;
  double min_alpha = 1.0 / 1048576.0;  // 2^-20
  double rho_lower = 0.25;
  double rho_upper = 0.75;
  double drop = 2.0 / 3.0;
  double boost = 1.5;
  double lambda_init = 1.0;
  double lambda_min = 1e-8;
  double lambda_max = 1e8;

  std::size_t gn_size = 0;  // samples in the Gauss-Newton set; 0 means all
  CachePolicy cache_policy = CachePolicy::automatic;
  std::size_t cache_budget = kDefaultCacheBudget;

  void validate() const {
    auto bad = [](const std::string& what) { throw Error(Errc::invalid_argument, "newton config: " + what); };
    if (max_outer_iters == 0) bad("max_outer_iters must be >= 1");
    if (!(grad_tol > 0)) bad("grad_tol must be > 0");
    if (cg_max_iters == 0) bad("cg_max_iters must be >= 1");
    if (!(cg_rtol > 0 && cg_rtol < 1)) bad("cg_rtol must be in (0,1)");
    if (!(armijo_eta > 0 && armijo_eta < 1)) bad("armijo_eta must be in (0,1)");
    if (!(min_alpha > 0)) bad("min_alpha must be > 0");
    if (!(0 < rho_lower && rho_lower < rho_upper && rho_upper < 1)) bad("need 0 < rho_lower < rho_upper < 1");
    if (!(drop > 0 && drop < 1)) bad("drop must be in (0,1)");
    if (!(boost > 1)) bad("boost must be > 1");
    if (!(lambda_init >= 0) || !std::isfinite(lambda_init)) bad("lambda_init must be >= 0");
    if (!(lambda_min > 0 && lambda_min <= lambda_max)) bad("need 0 < lambda_min <= lambda_max");
  }
};

// ---------------------------------------------------------------------------
// Conjugate gradient

struct CgResult {
  ParamVector d;
  std::size_t iters = 0;
  double residual = 0.0;  // ||A d - b||, true residual when converged
  bool converged = false;
};

/// Solves A d = b from d = 0. Stops when ||A d - b|| <= cg_rtol ||b|| (checked
/// against the true residual) or after cg_max_iters iterations.
template <class ApplyA>
CgResult cg_solve(ApplyA&& apply_A, const ParamVector& b, const NewtonConfig& cfg) {
  require_finite(b.span(), "cg right-hand side");
  CgResult res{ParamVector::zeros_like(b), 0, 0.0, false};
  const double bnorm = norm2(b);
  if (bnorm == 0.0) {
    res.converged = true;
    return res;
  }
  const double target = cfg.cg_rtol * bnorm;
  ParamVector r = b, p = b;
  double rr = dot(r, r);
  while (res.iters < cfg.cg_max_iters) {
    const ParamVector Ap = apply_A(p);
    const double pAp = dot(p, Ap);
    if (!std::isfinite(pAp)) throw Error(Errc::non_finite, "cg: p'Ap is not finite");
    if (pAp <= 0.0) throw Error(Errc::invalid_argument, "cg: operator is not positive definite");
    const double alpha = rr / pAp;
    axpy_inplace(alpha, p.span(), res.d.span());
    axpy_inplace(-alpha, Ap.span(), r.span());
    ++res.iters;
    double rr_new = dot(r, r);
    if (!std::isfinite(rr_new)) throw Error(Errc::non_finite, "cg: residual is not finite");
    if (std::sqrt(rr_new) <= target) {
      ParamVector true_r = axpy(-1.0, apply_A(res.d), b);
      const double tn = norm2(true_r);
      if (tn <= target) {
        res.residual = tn;
        res.converged = true;
        return res;
      }
      // recursive residual drifted; restart from the true one
      r = std::move(true_r);
      p = r;
      rr = tn * tn;
      continue;
    }
    const double beta = rr_new / rr;
    rr = rr_new;
    for (std::size_t j = 0; j < p.size(); ++j) p[j] = r[j] + beta * p[j];
  }
  res.residual = std::sqrt(rr);
  return res;
}

// ---------------------------------------------------------------------------
// Line search, damping update, reduction ratio

struct LineSearchResult {
  double alpha = 1.0;
  double f_new = 0.0;
  std::size_t trials = 0;
};

/// Tries alpha = 1, 1/2, 1/4, ... and returns the first step meeting
/// f(theta + alpha d) <= f0 + eta alpha g'd. A trial whose loss is not finite
/// counts as a rejection.
template <class LossAt>
LineSearchResult line_search(LossAt&& loss_at, const ParamVector& theta, const ParamVector& d, double f0,
                             double g_dot_d, const NewtonConfig& cfg) {
  if (!(g_dot_d < 0.0)) throw Error(Errc::non_descent, "g'd = " + std::to_string(g_dot_d));
  LineSearchResult res;
  for (double alpha = 1.0; alpha >= cfg.min_alpha; alpha *= 0.5) {
    ++res.trials;
    double f = std::numeric_limits<double>::infinity();
    try {
      f = loss_at(axpy(alpha, d, theta));
    } catch (const Error& e) {
      if (e.code() != Errc::non_finite) throw;
    }
    if (std::isfinite(f) && f <= f0 + cfg.armijo_eta * alpha * g_dot_d) {
      res.alpha = alpha;
      res.f_new = f;
      return res;
    }
  }
  throw Error(Errc::step_underflow, "no step >= min_alpha met the sufficient-decrease condition");
}

inline double update_lambda(double lambda, double rho, const NewtonConfig& cfg) {
  if (rho > cfg.rho_upper) return lambda * cfg.drop;
  if (rho >= cfg.rho_lower && rho <= cfg.rho_upper) return lambda;
  return lambda * cfg.boost;
}

/// Actual over predicted change, with the quadratic model
///   m(alpha) = alpha g'd + alpha^2/2 d'Ad
/// where A is the damped operator the direction was solved with. A
/// non-negative or zero prediction gives -inf.
template <class ApplyA>
double reduction_ratio(double f0, double f_new, double alpha, const ParamVector& d, const ParamVector& g,
                       ApplyA&& apply_A) {
  const double predicted = alpha * dot(g, d) + 0.5 * alpha * alpha * dot(d, apply_A(d));
  if (!(predicted < 0.0)) return -std::numeric_limits<double>::infinity();
  return (f_new - f0) / predicted;
}

// ---------------------------------------------------------------------------
// Outer loop

struct IterationRecord {
  std::size_t iter = 0;
  double f_before = 0.0;
  double f = 0.0;          // objective after the iteration
  double grad_norm = 0.0;  // at the start of the iteration
  double alpha = 0.0;      // 0 when the step was rejected
  double lambda = 0.0;     // damping used by this iteration's CG solve
  double lambda_next = 0.0;
  double rho = 0.0;
  double g_dot_d = 0.0;
  std::size_t cg_iters = 0;
  double cg_residual = 0.0;
  bool cg_converged = false;
  bool accepted = false;
  bool lambda_clamped = false;
  double seconds_grad = 0.0;
  double seconds_cg = 0.0;
  double seconds_ls = 0.0;
};

struct NewtonState {
  ParamVector theta;
  double f_val = 0.0;
  ParamVector grad;
  double lambda = 0.0;
  std::size_t iteration = 0;
  bool converged = false;
  std::size_t lambda_clamp_events = 0;
  std::vector<IterationRecord> history;
};

/// Everything an observer may want to re-check about one iteration.
struct IterationContext {
  const ParamVector& theta;  // before the update
  const ParamVector& grad;
  const ParamVector& direction;
  const CacheSet& caches;
  const IterationRecord& record;
};

using IterationObserver = std::function<void(const IterationContext&)>;

inline void write_iteration_csv_header(std::ostream& os) {
  os << "iter,f,grad_norm,alpha,lambda,rho,cg_iters,seconds_grad,seconds_cg\n";
}

inline void write_iteration_csv_row(std::ostream& os, const IterationRecord& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%zu,%.6f,%.6f\n", r.iter, r.f, r.grad_norm,
                r.alpha, r.lambda, r.rho, r.cg_iters, r.seconds_grad, r.seconds_cg);
  os << buf;
}

/// Trains from the network's current parameters on every sample of the
/// objective's dataset; the Gauss-Newton set is its first cfg.gn_size
/// samples. `observer` runs after each iteration's record is complete.
inline NewtonState newton_train(const Objective& obj, const NewtonConfig& cfg, Executor& exec,
                                const IterationObserver& observer = {}) {
  using clock = std::chrono::steady_clock;
  auto secs = [](clock::time_point a, clock::time_point b) { return std::chrono::duration<double>(b - a).count(); };
  cfg.validate();
  obj.validate();
  const std::size_t N = obj.data->size();
  if (cfg.gn_size > N)
    throw Error(Errc::invalid_argument, "Gauss-Newton set of " + std::to_string(cfg.gn_size) + " exceeds " +
                                            std::to_string(N) + " samples");
  const auto train_idx = all_indices(N);
  const auto gn_idx = all_indices(cfg.gn_size == 0 ? N : cfg.gn_size);

  auto clamp_lambda = [&](double lam, bool& clamped) {
    clamped = lam < cfg.lambda_min || lam > cfg.lambda_max;
    return std::min(std::max(lam, cfg.lambda_min), cfg.lambda_max);
  };

  NewtonState st;
  st.theta = obj.net->theta();
  bool clamped0 = false;
  st.lambda = clamp_lambda(cfg.lambda_init, clamped0);
  st.lambda_clamp_events += clamped0;

  auto t0 = clock::now();
  Evaluation ev = evaluate(obj, st.theta, train_idx, exec);
  CacheSet caches;
  bool have_caches = false;
  double pending_grad_secs = secs(t0, clock::now());
  st.f_val = ev.f;
  st.grad = ev.grad;
  const double g0 = norm2(ev.grad);
  const double stop_at = cfg.grad_tol * std::max(1.0, g0);

  while (st.iteration < cfg.max_outer_iters) {
    const double gnorm = norm2(st.grad);
    if (gnorm <= stop_at) {
      st.converged = true;
      break;
    }
    IterationRecord rec;
    rec.iter = st.iteration + 1;
    rec.f_before = st.f_val;
    rec.grad_norm = gnorm;
    rec.lambda = st.lambda;

    auto t1 = clock::now();
    if (!have_caches) {
      caches = build_caches(obj, st.theta, gn_idx, exec, cfg.cache_policy, cfg.cache_budget);
      have_caches = true;
    }
    rec.seconds_grad = pending_grad_secs + secs(t1, clock::now());
    pending_grad_secs = 0.0;

    const double lambda = st.lambda;
    auto apply = [&](const ParamVector& v) { return gauss_newton_vec(obj, st.theta, v, caches, lambda, exec); };
    auto t2 = clock::now();
    const CgResult cg = cg_solve(apply, scaled(-1.0, st.grad), cfg);
    rec.seconds_cg = secs(t2, clock::now());
    rec.cg_iters = cg.iters;
    rec.cg_residual = cg.residual;
    rec.cg_converged = cg.converged;
    rec.g_dot_d = dot(st.grad, cg.d);

    auto t3 = clock::now();
    bool accepted = false;
    LineSearchResult ls;
    if (rec.g_dot_d < 0.0) {
      try {
        ls = line_search([&](const ParamVector& t) { return loss(obj, t, train_idx, exec); }, st.theta, cg.d,
                         st.f_val, rec.g_dot_d, cfg);
        accepted = true;
      } catch (const Error& e) {
        if (e.code() != Errc::step_underflow) throw;
      }
    }
    rec.seconds_ls = secs(t3, clock::now());

    double next_lambda = 0.0;
    if (accepted) {
      if (!(ls.f_new <= st.f_val + cfg.armijo_eta * ls.alpha * rec.g_dot_d))
        throw std::logic_error("accepted step violates the sufficient-decrease condition");
      rec.rho = reduction_ratio(st.f_val, ls.f_new, ls.alpha, cg.d, st.grad, apply);
      next_lambda = update_lambda(lambda, rec.rho, cfg);
      rec.alpha = ls.alpha;
      rec.f = ls.f_new;
    } else {
      rec.rho = -std::numeric_limits<double>::infinity();
      next_lambda = lambda * cfg.boost;
      rec.f = st.f_val;
    }
    rec.accepted = accepted;
    rec.lambda_next = clamp_lambda(next_lambda, rec.lambda_clamped);
    st.lambda_clamp_events += rec.lambda_clamped;

    const ParamVector theta_before = st.theta;
    const ParamVector grad_before = st.grad;
    if (accepted) {
      st.theta = axpy(ls.alpha, cg.d, st.theta);
      auto t4 = clock::now();
      ev = evaluate(obj, st.theta, train_idx, exec);
      pending_grad_secs = secs(t4, clock::now());
      st.f_val = ev.f;
      st.grad = ev.grad;
      have_caches = false;
    }
    st.lambda = rec.lambda_next;
    ++st.iteration;
    st.history.push_back(rec);
    if (observer) observer(IterationContext{theta_before, grad_before, cg.d, caches, st.history.back()});
    if (!std::isfinite(st.f_val)) throw Error(Errc::non_finite, "objective diverged");
  }
  if (!st.converged && norm2(st.grad) <= stop_at) st.converged = true;
  return st;
}

}  // namespace hfcnn
