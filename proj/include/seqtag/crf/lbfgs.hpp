#pragma once

#include <cmath>
#include <deque>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "seqtag/error.hpp"

namespace seqtag::crf {

struct LbfgsOptions {
  size_t history = 10;
  double c1 = 1e-4;  // sufficient decrease
  double c2 = 0.9;   // curvature
  double tol = 1e-5;
  size_t max_iter = 500;
  size_t max_linesearch = 40;
};

struct LbfgsResult {
  std::vector<double> x;
  double value = 0;
  size_t iterations = 0;
  std::vector<double> trace;  // objective after each accepted step, trace[0] = initial
  std::string stop_reason;
};

namespace detail {

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

// Minimizer of the cubic through (a, fa, ga) and (b, fb, gb), clamped into
// the interval; falls back to bisection when the fit is degenerate.
inline double cubic_step(double a, double fa, double ga, double b, double fb, double gb) {
  double d1 = ga + gb - 3 * (fa - fb) / (a - b);
  double disc = d1 * d1 - ga * gb;
  double lo = std::min(a, b), hi = std::max(a, b);
  if (disc >= 0) {
    double d2 = std::copysign(std::sqrt(disc), b - a);
    double t = b - (b - a) * (gb + d2 - d1) / (gb - ga + 2 * d2);
    double margin = 0.1 * (hi - lo);
    if (std::isfinite(t) && t > lo + margin && t < hi - margin) return t;
  }
  return 0.5 * (a + b);
}

}  // namespace detail

/// Limited-memory BFGS with a strong-Wolfe line search.
/// `fg(x, grad)` returns f(x) and writes the gradient into `grad`.
template <typename Objective>
LbfgsResult minimize_lbfgs(Objective&& fg, std::vector<double> x, const LbfgsOptions& opt = {}) {
  using detail::dot;
  const size_t dim = x.size();
  std::vector<double> g(dim), d(dim), x_new(dim), g_new(dim);
  double f = fg(x, g);
  if (!std::isfinite(f)) throw Error(ErrorKind::NonFinite, "objective is not finite at the starting point");

  LbfgsResult res;
  res.trace.push_back(f);
  std::deque<std::vector<double>> s_hist, y_hist;
  std::deque<double> rho_hist;

  auto eval = [&](double step, double& f_out, double& dphi) {
    for (size_t i = 0; i < dim; ++i) x_new[i] = x[i] + step * d[i];
    f_out = fg(x_new, g_new);
    dphi = dot(g_new, d);
  };

  for (size_t iter = 0; iter < opt.max_iter; ++iter) {
    double gnorm = std::sqrt(dot(g, g));
    if (gnorm < opt.tol) {
      res.stop_reason = "gradient norm below tolerance";
      break;
    }

    // Two-loop recursion for d = -H g.
    d = g;
    std::vector<double> alpha(s_hist.size());
    for (size_t i = s_hist.size(); i-- > 0;) {
      alpha[i] = rho_hist[i] * dot(s_hist[i], d);
      for (size_t j = 0; j < dim; ++j) d[j] -= alpha[i] * y_hist[i][j];
    }
    if (!s_hist.empty()) {
      double gamma = dot(s_hist.back(), y_hist.back()) / dot(y_hist.back(), y_hist.back());
      for (auto& v : d) v *= gamma;
    }
    for (size_t i = 0; i < s_hist.size(); ++i) {
      double beta = rho_hist[i] * dot(y_hist[i], d);
      for (size_t j = 0; j < dim; ++j) d[j] += s_hist[i][j] * (alpha[i] - beta);
    }
    for (auto& v : d) v = -v;

    double dphi0 = dot(g, d);
    if (dphi0 >= 0) {
      // Not a descent direction: restart from steepest descent.
      s_hist.clear(), y_hist.clear(), rho_hist.clear();
      for (size_t j = 0; j < dim; ++j) d[j] = -g[j];
      dphi0 = -gnorm * gnorm;
    }
    double step = s_hist.empty() ? 1.0 / gnorm : 1.0;

    // Strong Wolfe search: bracket, then zoom.
    const double f0 = f;
    double f_cur = 0, dphi_cur = 0;
    auto sufficient = [&](double a, double fa) { return std::isfinite(fa) && fa <= f0 + opt.c1 * a * dphi0; };
    auto curvature = [&](double da) { return std::abs(da) <= -opt.c2 * dphi0; };
    double lo = 0, f_lo = f0, d_lo = dphi0;
    double hi = 0, f_hi = 0, d_hi = 0;
    bool found = false, zoom = false;
    size_t evals = 0;
    for (; evals < opt.max_linesearch; ++evals) {
      eval(step, f_cur, dphi_cur);
      if (!sufficient(step, f_cur) || (evals > 0 && f_cur >= f_lo)) {
        hi = step, f_hi = f_cur, d_hi = dphi_cur;
        zoom = true;
        break;
      }
      if (curvature(dphi_cur)) {
        found = true;
        break;
      }
      if (dphi_cur >= 0) {
        hi = lo, f_hi = f_lo, d_hi = d_lo;
        lo = step, f_lo = f_cur, d_lo = dphi_cur;
        zoom = true;
        break;
      }
      lo = step, f_lo = f_cur, d_lo = dphi_cur;
      step *= 2.0;
    }
    if (zoom) {
      for (++evals; evals < opt.max_linesearch; ++evals) {
        if (std::isfinite(f_hi)) {
          step = detail::cubic_step(lo, f_lo, d_lo, hi, f_hi, d_hi);
        } else {
          step = 0.5 * (lo + hi);
        }
        eval(step, f_cur, dphi_cur);
        if (!sufficient(step, f_cur) || f_cur >= f_lo) {
          hi = step, f_hi = f_cur, d_hi = dphi_cur;
        } else {
          if (curvature(dphi_cur)) {
            found = true;
            break;
          }
          if (dphi_cur * (hi - lo) >= 0) hi = lo, f_hi = f_lo, d_hi = d_lo;
          lo = step, f_lo = f_cur, d_lo = dphi_cur;
        }
        if (std::abs(hi - lo) < 1e-16 * std::max(1.0, std::abs(lo))) break;
      }
    }
    if (!found) {
      // Fall back to the best sufficient-decrease point seen, if any.
      if (lo > 0 && f_lo < f0) {
        eval(lo, f_cur, dphi_cur);
      } else {
        res.stop_reason = "line search failed";
        break;
      }
    }

    std::vector<double> s(dim), y(dim);
    for (size_t j = 0; j < dim; ++j) {
      s[j] = x_new[j] - x[j];
      y[j] = g_new[j] - g[j];
    }
    double sy = dot(s, y);
    x.swap(x_new);
    g.swap(g_new);
    double f_prev = f;
    f = f_cur;
    res.trace.push_back(f);
    res.iterations = iter + 1;
    if (sy > 1e-12) {
      s_hist.push_back(std::move(s));
      y_hist.push_back(std::move(y));
      rho_hist.push_back(1.0 / sy);
      if (s_hist.size() > opt.history) s_hist.pop_front(), y_hist.pop_front(), rho_hist.pop_front();
    }
    double rel = std::abs(f_prev - f) / std::max({std::abs(f_prev), std::abs(f), 1.0});
    if (rel < opt.tol) {
      res.stop_reason = "relative objective change below tolerance";
      break;
    }
  }
  if (res.stop_reason.empty()) res.stop_reason = "iteration limit";
  res.x = std::move(x);
  res.value = f;
  return res;
}

}  // namespace seqtag::crf
