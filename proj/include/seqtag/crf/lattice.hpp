#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "seqtag/error.hpp"

namespace seqtag::crf {

template <typename Real>
Real log_sum_exp(std::span<const Real> xs) {
  if (xs.empty()) return -std::numeric_limits<Real>::infinity();
  if (xs.size() == 1) return xs[0];
  Real m = *std::max_element(xs.begin(), xs.end());
  if (!std::isfinite(m)) return m;
  Real s = 0;
  for (Real x : xs) s += std::exp(x - m);
  return m + std::log(s);
}

/// Scores of a first-order chain over n positions and K labels:
/// unary(t, j) for label j at t, pairwise(t, i, j) for the transition
/// i -> j entering position t (t >= 1). A sequence scores the sum of its
/// unary terms plus its pairwise terms.
struct ChainScores {
  size_t n = 0;
  size_t k = 0;
  std::vector<double> unary;     // n * k
  std::vector<double> pairwise;  // n * k * k, slice t = 0 unused

  ChainScores() = default;
  ChainScores(size_t n_, size_t k_) : n(n_), k(k_), unary(n_ * k_, 0.0), pairwise(n_ * k_ * k_, 0.0) {}

  double& u(size_t t, size_t j) { return unary[t * k + j]; }
  double u(size_t t, size_t j) const { return unary[t * k + j]; }
  double& p(size_t t, size_t i, size_t j) { return pairwise[(t * k + i) * k + j]; }
  double p(size_t t, size_t i, size_t j) const { return pairwise[(t * k + i) * k + j]; }

  double sequence_score(std::span<const size_t> y) const {
    double s = 0;
    for (size_t t = 0; t < n; ++t) {
      if (t > 0) s += p(t, y[t - 1], y[t]);
      s += u(t, y[t]);
    }
    return s;
  }
};

struct ForwardBackward {
  std::vector<double> alpha;  // n * k, log space
  std::vector<double> beta;   // n * k, log space
  double log_z = 0;
};

inline ForwardBackward forward_backward(const ChainScores& s, bool with_beta = true) {
  if (s.n == 0) throw Error(ErrorKind::EmptySentence, "chain has no positions");
  const size_t n = s.n, k = s.k;
  ForwardBackward fb;
  fb.alpha.assign(n * k, 0.0);
  std::vector<double> buf(k);
  for (size_t j = 0; j < k; ++j) fb.alpha[j] = s.u(0, j);
  for (size_t t = 1; t < n; ++t) {
    for (size_t j = 0; j < k; ++j) {
      for (size_t i = 0; i < k; ++i) buf[i] = fb.alpha[(t - 1) * k + i] + s.p(t, i, j);
      fb.alpha[t * k + j] = log_sum_exp<double>(buf) + s.u(t, j);
    }
  }
  fb.log_z = log_sum_exp<double>(std::span<const double>(fb.alpha).subspan((n - 1) * k, k));
  if (with_beta) {
    fb.beta.assign(n * k, 0.0);
    for (size_t t = n - 1; t-- > 0;) {
      for (size_t i = 0; i < k; ++i) {
        for (size_t j = 0; j < k; ++j) buf[j] = s.p(t + 1, i, j) + s.u(t + 1, j) + fb.beta[(t + 1) * k + j];
        fb.beta[t * k + i] = log_sum_exp<double>(buf);
      }
    }
  }
  return fb;
}

inline double log_partition(const ChainScores& s) { return forward_backward(s, false).log_z; }

/// Posterior P(y_t = j | x), n * k.
inline std::vector<double> unary_marginals(const ChainScores& s, const ForwardBackward& fb) {
  std::vector<double> m(s.n * s.k);
  for (size_t i = 0; i < m.size(); ++i) m[i] = std::exp(fb.alpha[i] + fb.beta[i] - fb.log_z);
  return m;
}

/// Posterior P(y_{t-1} = i, y_t = j | x) laid out like ChainScores::pairwise.
inline std::vector<double> pairwise_marginals(const ChainScores& s, const ForwardBackward& fb) {
  const size_t n = s.n, k = s.k;
  std::vector<double> m(n * k * k, 0.0);
  for (size_t t = 1; t < n; ++t)
    for (size_t i = 0; i < k; ++i)
      for (size_t j = 0; j < k; ++j)
        m[(t * k + i) * k + j] =
            std::exp(fb.alpha[(t - 1) * k + i] + s.p(t, i, j) + s.u(t, j) + fb.beta[t * k + j] - fb.log_z);
  return m;
}

struct ViterbiResult {
  std::vector<size_t> path;
  double score = 0;
};

/// Exact argmax; every max keeps the lowest label index among ties.
inline ViterbiResult viterbi(const ChainScores& s) {
  if (s.n == 0) throw Error(ErrorKind::EmptySentence, "chain has no positions");
  const size_t n = s.n, k = s.k;
  std::vector<double> delta(n * k);
  std::vector<size_t> back(n * k, 0);
  for (size_t j = 0; j < k; ++j) delta[j] = s.u(0, j);
  for (size_t t = 1; t < n; ++t) {
    for (size_t j = 0; j < k; ++j) {
      size_t best = 0;
      double best_score = delta[(t - 1) * k] + s.p(t, 0, j);
      for (size_t i = 1; i < k; ++i) {
        double v = delta[(t - 1) * k + i] + s.p(t, i, j);
        if (v > best_score) {
          best_score = v;
          best = i;
        }
      }
      delta[t * k + j] = best_score + s.u(t, j);
      back[t * k + j] = best;
    }
  }
  ViterbiResult r;
  r.path.assign(n, 0);
  size_t last = 0;
  for (size_t j = 1; j < k; ++j)
    if (delta[(n - 1) * k + j] > delta[(n - 1) * k + last]) last = j;
  r.score = delta[(n - 1) * k + last];
  r.path[n - 1] = last;
  for (size_t t = n - 1; t > 0; --t) r.path[t - 1] = back[t * k + r.path[t]];
  return r;
}

}  // namespace seqtag::crf
