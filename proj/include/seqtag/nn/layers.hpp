#pragma once

#include <string>
#include <utility>
#include <vector>

#include "seqtag/crf/lattice.hpp"
#include "seqtag/nn/graph.hpp"

namespace seqtag::nn {

/// Weights of one recurrent direction: gates [i f g o] computed as
/// x * wx + h * wh + b.
struct LstmParams {
  Parameter* wx = nullptr;
  Parameter* wh = nullptr;
  Parameter* b = nullptr;
  size_t hidden() const { return wh->value.rows; }
  size_t input() const { return wx->value.rows; }
};

inline LstmParams declare_lstm(ParameterSet& ps, const std::string& prefix, size_t input, size_t hidden) {
  LstmParams p;
  p.wx = &ps.add(prefix + ".wx", input, 4 * hidden);
  p.wh = &ps.add(prefix + ".wh", hidden, 4 * hidden);
  p.b = &ps.add(prefix + ".b", 1, 4 * hidden);
  return p;
}

inline LstmParams find_lstm(ParameterSet& ps, const std::string& prefix) {
  return LstmParams{&ps.get(prefix + ".wx"), &ps.get(prefix + ".wh"), &ps.get(prefix + ".b")};
}

inline void init_lstm(LstmParams& p, Rng& rng) {
  const size_t h = p.hidden();
  init_glorot(*p.wx, rng, p.input(), 4 * h);
  init_glorot(*p.wh, rng, h, 4 * h);
  p.b->value.zero();
  for (size_t j = 0; j < h; ++j) p.b->value(0, h + j) = 1.0;  // forget gate starts open
}

/// One step of the gated recurrence; returns (hidden, cell).
inline std::pair<Var, Var> recurrent_cell_step(Graph& g, const LstmParams& p, Var x, Var h_prev, Var c_prev) {
  const size_t h = p.hidden();
  if (g.value(x).cols != p.input() || g.value(h_prev).cols != h || g.value(c_prev).cols != h) {
    throw Error(ErrorKind::DimensionMismatch, "recurrent cell input sizes do not match its weights");
  }
  Var pre = g.add(g.add(g.matmul(x, g.param(*p.wx)), g.matmul(h_prev, g.param(*p.wh))), g.param(*p.b));
  Var hc = g.lstm_cell(pre, c_prev);
  return {g.slice_cols(hc, 0, h), g.slice_cols(hc, h, h)};
}

/// Runs one direction over the rows of x (n x d); output row t is the hidden
/// state after reading position t.
inline Var run_lstm(Graph& g, const LstmParams& p, Var x, bool reverse) {
  const size_t n = g.value(x).rows, h = p.hidden();
  if (g.value(x).cols != p.input()) throw Error(ErrorKind::DimensionMismatch, "recurrent input width mismatch");
  Var xw = g.add(g.matmul(x, g.param(*p.wx)), g.param(*p.b));
  Var wh = g.param(*p.wh);
  Var hs = g.constant(Matrix(1, h)), cs = g.constant(Matrix(1, h));
  std::vector<Var> out(n);
  for (size_t step = 0; step < n; ++step) {
    size_t t = reverse ? n - 1 - step : step;
    Var pre = g.add(g.row(xw, t), g.matmul(hs, wh));
    Var hc = g.lstm_cell(pre, cs);
    hs = g.slice_cols(hc, 0, h);
    cs = g.slice_cols(hc, h, h);
    out[t] = hs;
  }
  return g.concat_rows(out);
}

/// Final hidden state of one direction.
inline Var final_lstm_state(Graph& g, const LstmParams& p, Var x, bool reverse) {
  Var all = run_lstm(g, p, x, reverse);
  return g.row(all, reverse ? 0 : g.value(all).rows - 1);
}

/// Same-length convolution: each output row sees `width` input rows.
inline Var conv1d(Graph& g, Var x, Parameter& w, Parameter& b, size_t width) {
  return g.affine(g.unfold(x, width), w, b);
}

/// Mean softmax loss and per-position argmax (ties to the lower index).
struct SoftmaxResult {
  double loss = 0;
  std::vector<size_t> predicted;
};

inline SoftmaxResult softmax_loss(const Matrix& logits, std::span<const size_t> gold) {
  if (gold.size() != logits.rows) throw Error(ErrorKind::DimensionMismatch, "gold length differs from logits rows");
  if (logits.rows == 0) throw Error(ErrorKind::EmptySentence, "empty sentence");
  Graph g;
  Var l = g.constant(logits);
  SoftmaxResult r;
  r.loss = g.value(g.softmax_nll(l, gold))(0, 0) / static_cast<double>(logits.rows);
  for (size_t t = 0; t < logits.rows; ++t) {
    size_t best = 0;
    for (size_t j = 1; j < logits.cols; ++j)
      if (logits(t, j) > logits(t, best)) best = j;
    r.predicted.push_back(best);
  }
  return r;
}

inline std::vector<size_t> softmax_decode(const Matrix& logits) {
  std::vector<size_t> out;
  for (size_t t = 0; t < logits.rows; ++t) {
    size_t best = 0;
    for (size_t j = 1; j < logits.cols; ++j)
      if (logits(t, j) > logits(t, best)) best = j;
    out.push_back(best);
  }
  return out;
}

inline double crf_layer_loss(const Matrix& emissions, const Matrix& transitions, std::span<const size_t> gold) {
  Graph g;
  return g.value(g.crf_nll(g.constant(emissions), g.constant(transitions), gold))(0, 0);
}

inline std::vector<size_t> crf_layer_decode(const Matrix& emissions, const Matrix& transitions) {
  if (emissions.rows == 0) throw Error(ErrorKind::EmptySentence, "empty sentence");
  return crf::viterbi(head_chain_scores(emissions, transitions)).path;
}

}  // namespace seqtag::nn
