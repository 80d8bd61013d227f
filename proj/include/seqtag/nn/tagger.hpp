#pragma once

#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "seqtag/corpus.hpp"
#include "seqtag/embeddings.hpp"
#include "seqtag/error.hpp"
#include "seqtag/nn/graph.hpp"
#include "seqtag/nn/layers.hpp"
#include "seqtag/tagset.hpp"
#include "seqtag/unicode.hpp"

namespace seqtag::nn {

// ---------------------------------------------------------------------------
// Configuration

enum class CharEncoderKind { Conv, Birecurrent };
enum class WordLayerKind { Conv, Birecurrent };
enum class InferenceKind { Softmax, ChainCrf };

inline std::string to_string(CharEncoderKind k) { return k == CharEncoderKind::Conv ? "conv" : "birecurrent"; }
inline std::string to_string(WordLayerKind k) { return k == WordLayerKind::Conv ? "conv" : "birecurrent"; }
inline std::string to_string(InferenceKind k) { return k == InferenceKind::Softmax ? "softmax" : "chain_crf"; }

inline CharEncoderKind char_encoder_kind(const std::string& s) {
  if (s == "conv") return CharEncoderKind::Conv;
  if (s == "birecurrent") return CharEncoderKind::Birecurrent;
  throw Error(ErrorKind::InvalidConfig, "char encoder must be conv or birecurrent, got '" + s + "'");
}
inline WordLayerKind word_layer_kind(const std::string& s) {
  if (s == "conv") return WordLayerKind::Conv;
  if (s == "birecurrent") return WordLayerKind::Birecurrent;
  throw Error(ErrorKind::InvalidConfig, "word layer must be conv or birecurrent, got '" + s + "'");
}
inline InferenceKind inference_kind(const std::string& s) {
  if (s == "softmax") return InferenceKind::Softmax;
  if (s == "chain_crf" || s == "crf") return InferenceKind::ChainCrf;
  throw Error(ErrorKind::InvalidConfig, "inference must be softmax or chain_crf, got '" + s + "'");
}

struct CharEncoderConfig {
  CharEncoderKind kind = CharEncoderKind::Conv;
  size_t char_embedding_dim = 30;
  size_t char_hidden_dim = 50;
  size_t filter_width = 3;

  void validate() const {
    if (char_embedding_dim == 0 || char_hidden_dim == 0 || filter_width == 0) {
      throw Error(ErrorKind::InvalidConfig, "character encoder dimensions must be positive");
    }
    if (kind == CharEncoderKind::Birecurrent && char_hidden_dim % 2 != 0) {
      throw Error(ErrorKind::InvalidConfig, "birecurrent character hidden size must be even");
    }
  }
  friend bool operator==(const CharEncoderConfig&, const CharEncoderConfig&) = default;
};

struct WordLayerConfig {
  WordLayerKind kind = WordLayerKind::Birecurrent;
  size_t word_hidden_dim = 300;
  size_t conv_layers = 4;
  size_t filter_width = 3;
  bool batch_norm = false;
  double dropout = 0.3;

  void validate() const {
    if (word_hidden_dim == 0 || conv_layers == 0 || filter_width == 0) {
      throw Error(ErrorKind::InvalidConfig, "word layer dimensions must be positive");
    }
    if (kind == WordLayerKind::Birecurrent && word_hidden_dim % 2 != 0) {
      throw Error(ErrorKind::InvalidConfig, "birecurrent word hidden size must be even");
    }
    if (!(dropout >= 0 && dropout < 1)) throw Error(ErrorKind::InvalidConfig, "dropout must be in [0, 1)");
  }
  friend bool operator==(const WordLayerConfig&, const WordLayerConfig&) = default;
};

struct InferenceConfig {
  InferenceKind kind = InferenceKind::ChainCrf;
  friend bool operator==(const InferenceConfig&, const InferenceConfig&) = default;
};

struct TaggerConfig {
  std::optional<CharEncoderConfig> char_encoder = CharEncoderConfig{};
  WordLayerConfig word_layer;
  InferenceConfig inference;
  size_t embedding_dim = 200;  // used when no pre-trained table is given
  uint64_t seed = 1;
  friend bool operator==(const TaggerConfig&, const TaggerConfig&) = default;
};

struct TrainConfig {
  double learning_rate = 0.015;
  double decay = 0.05;
  size_t batch_size = 10;
  size_t epochs = 50;
  double clip_norm = 5.0;
  double unk_replace_probability = 0.5;
  uint64_t seed = 1;
  std::optional<double> stop_at_dev_accuracy;  // stop once dev accuracy reaches this

  static TrainConfig recurrent() { return TrainConfig{}; }
  static TrainConfig conv() {
    TrainConfig c;
    c.learning_rate = 0.005;
    c.epochs = 100;
    return c;
  }

  void validate() const {
    if (!(learning_rate > 0) || !(decay >= 0) || batch_size == 0 || epochs == 0 || !(clip_norm > 0)) {
      throw Error(ErrorKind::InvalidConfig, "training needs positive learning rate, batch size, epochs and clip norm");
    }
  }
};

/// Type-level appendix: word -> agreed tag index, one-hot of width k; words
/// without an entry get the zero vector.
struct TypeAnnotation {
  size_t k = 0;
  std::unordered_map<std::string, size_t> tags;

  std::vector<double> vector_for(const std::string& word) const {
    std::vector<double> v(k, 0.0);
    if (auto it = tags.find(word); it != tags.end()) v[it->second] = 1.0;
    return v;
  }
  friend bool operator==(const TypeAnnotation&, const TypeAnnotation&) = default;
};

// ---------------------------------------------------------------------------
// Model

struct TaggerModel {
  Tagset tags;
  TaggerConfig config;
  size_t embedding_dim = 0;
  size_t augmentation_dim = 0;
  std::vector<std::string> words;  // row 0 is the UNK vector
  std::unordered_map<std::string, size_t> word_index;
  std::vector<char32_t> chars;  // row 0 is the unknown character
  std::unordered_map<char32_t, size_t> char_index;
  ParameterSet params;
  std::vector<BatchNormStats> batchnorm;  // one per conv layer when enabled
  std::optional<emb::WordVectorTable> fallback;
  TypeAnnotation annotation;

  size_t char_dim() const { return config.char_encoder ? config.char_encoder->char_hidden_dim : 0; }
  size_t input_dim() const { return embedding_dim + char_dim() + augmentation_dim; }
  size_t word_output_dim() const { return config.word_layer.word_hidden_dim; }
};

inline constexpr const char* kUnkWord = "<unk>";

namespace detail {

inline void add_word(TaggerModel& m, const std::string& w) {
  if (m.word_index.emplace(w, m.words.size()).second) m.words.push_back(w);
}

inline void add_char(TaggerModel& m, char32_t c) {
  if (m.char_index.emplace(c, m.chars.size()).second) m.chars.push_back(c);
}

inline void declare_parameters(TaggerModel& m) {
  auto& ps = m.params;
  const auto& cfg = m.config;
  const size_t k = m.tags.size();
  ps.add("word.embedding", m.words.size(), m.embedding_dim, true);
  if (cfg.char_encoder) {
    const auto& ce = *cfg.char_encoder;
    ps.add("char.embedding", m.chars.size(), ce.char_embedding_dim, true);
    if (ce.kind == CharEncoderKind::Conv) {
      ps.add("char.conv.w", ce.filter_width * ce.char_embedding_dim, ce.char_hidden_dim);
      ps.add("char.conv.b", 1, ce.char_hidden_dim);
    } else {
      declare_lstm(ps, "char.fwd", ce.char_embedding_dim, ce.char_hidden_dim / 2);
      declare_lstm(ps, "char.bwd", ce.char_embedding_dim, ce.char_hidden_dim / 2);
    }
  }
  const auto& wl = cfg.word_layer;
  const size_t d_in = m.input_dim();
  if (wl.kind == WordLayerKind::Birecurrent) {
    declare_lstm(ps, "word.fwd", d_in, wl.word_hidden_dim / 2);
    declare_lstm(ps, "word.bwd", d_in, wl.word_hidden_dim / 2);
  } else {
    size_t width = d_in;
    for (size_t l = 0; l < wl.conv_layers; ++l) {
      std::string p = "word.conv" + std::to_string(l);
      ps.add(p + ".w", wl.filter_width * width, wl.word_hidden_dim);
      ps.add(p + ".b", 1, wl.word_hidden_dim);
      if (wl.batch_norm) {
        ps.add(p + ".bn.gamma", 1, wl.word_hidden_dim);
        ps.add(p + ".bn.beta", 1, wl.word_hidden_dim);
      }
      width = wl.word_hidden_dim;
    }
    if (wl.batch_norm) m.batchnorm.assign(wl.conv_layers, BatchNormStats{});
  }
  ps.add("out.w", wl.word_hidden_dim, k);
  ps.add("out.b", 1, k);
  if (cfg.inference.kind == InferenceKind::ChainCrf) ps.add("crf.transitions", k + 2, k + 2);

  // Shape contract: the word layer reads embedding + char + appendix.
  const Parameter& first = wl.kind == WordLayerKind::Birecurrent ? ps.get("word.fwd.wx") : ps.get("word.conv0.w");
  size_t expect = wl.kind == WordLayerKind::Birecurrent ? d_in : wl.filter_width * d_in;
  if (first.value.rows != expect || d_in != m.embedding_dim + m.char_dim() + m.augmentation_dim) {
    throw Error(ErrorKind::DimensionMismatch, "word layer input width does not match embedding + char + appendix");
  }
}

inline void initialize_parameters(TaggerModel& m, const emb::WordVectorTable* pretrained) {
  Rng rng(m.config.seed);
  auto& ps = m.params;
  auto& we = ps.get("word.embedding");
  const double wb = std::sqrt(3.0 / static_cast<double>(m.embedding_dim));
  for (size_t r = 0; r < m.words.size(); ++r) {
    std::optional<std::vector<double>> v;
    if (pretrained && r > 0) v = emb::lookup(*pretrained, m.words[r]);
    for (size_t c = 0; c < m.embedding_dim; ++c) we.value(r, c) = v ? (*v)[c] : rng.uniform(-wb, wb);
  }
  if (m.config.char_encoder) {
    const auto& ce = *m.config.char_encoder;
    init_uniform(ps.get("char.embedding"), rng, std::sqrt(3.0 / static_cast<double>(ce.char_embedding_dim)));
    if (ce.kind == CharEncoderKind::Conv) {
      init_glorot(ps.get("char.conv.w"), rng, ce.filter_width * ce.char_embedding_dim, ce.char_hidden_dim);
    } else {
      auto f = find_lstm(ps, "char.fwd"), b = find_lstm(ps, "char.bwd");
      init_lstm(f, rng);
      init_lstm(b, rng);
    }
  }
  const auto& wl = m.config.word_layer;
  if (wl.kind == WordLayerKind::Birecurrent) {
    auto f = find_lstm(ps, "word.fwd"), b = find_lstm(ps, "word.bwd");
    init_lstm(f, rng);
    init_lstm(b, rng);
  } else {
    for (size_t l = 0; l < wl.conv_layers; ++l) {
      std::string p = "word.conv" + std::to_string(l);
      auto& w = ps.get(p + ".w");
      init_glorot(w, rng, w.value.rows, w.value.cols);
      if (wl.batch_norm) std::fill(ps.get(p + ".bn.gamma").value.data.begin(), ps.get(p + ".bn.gamma").value.data.end(), 1.0);
    }
  }
  auto& ow = ps.get("out.w");
  init_glorot(ow, rng, ow.value.rows, ow.value.cols);
}

}  // namespace detail

/// Builds vocabularies from the training corpus and initializes parameters;
/// word rows come from `pretrained` where it can supply them.
inline TaggerModel build_tagger(const Tagset& tags, const TaggerConfig& config, const TaggedCorpus& train,
                                const emb::WordVectorTable* pretrained = nullptr,
                                const TypeAnnotation* annotation = nullptr) {
  if (config.char_encoder) config.char_encoder->validate();
  config.word_layer.validate();
  if (tags.size() == 0) throw Error(ErrorKind::InvalidConfig, "tagset is empty");
  TaggerModel m;
  m.tags = tags;
  m.config = config;
  m.embedding_dim = pretrained ? pretrained->dim() : config.embedding_dim;
  if (m.embedding_dim == 0) throw Error(ErrorKind::InvalidConfig, "embedding dimension must be positive");
  if (annotation) {
    if (annotation->k != tags.size()) {
      throw Error(ErrorKind::TagsetMismatch, "annotation width " + std::to_string(annotation->k) +
                                                 " differs from tagset size " + std::to_string(tags.size()));
    }
    m.annotation = *annotation;
    m.augmentation_dim = annotation->k;
  }
  detail::add_word(m, kUnkWord);
  detail::add_char(m, U'\0');
  for (const auto& s : train.sentences)
    for (const auto& t : s.tokens) {
      detail::add_word(m, t.form);
      for (char32_t c : utf8::decode(t.form)) detail::add_char(m, c);
    }
  if (pretrained) m.fallback = *pretrained;
  detail::declare_parameters(m);
  detail::initialize_parameters(m, pretrained);
  return m;
}

// ---------------------------------------------------------------------------
// Forward computation

struct ForwardOptions {
  Rng* unk_rng = nullptr;  // replace rare words by UNK when set
  const std::unordered_map<std::string, size_t>* frequency = nullptr;
  double unk_probability = 0.5;
};

/// Character encoding of one word, 1 x char_hidden_dim.
inline Var char_encode(Graph& g, TaggerModel& m, const std::string& word) {
  if (!m.config.char_encoder) throw Error(ErrorKind::InvalidConfig, "model has no character encoder");
  auto cps = utf8::decode(word);
  if (cps.empty()) throw Error(ErrorKind::EmptyWord, "cannot encode an empty word");
  std::vector<size_t> ids;
  for (char32_t c : cps) {
    auto it = m.char_index.find(c);
    ids.push_back(it == m.char_index.end() ? 0 : it->second);
  }
  const auto& ce = *m.config.char_encoder;
  Var e = g.embed_rows(m.params.get("char.embedding"), ids);
  if (ce.kind == CharEncoderKind::Conv) {
    return g.max_rows(conv1d(g, e, m.params.get("char.conv.w"), m.params.get("char.conv.b"), ce.filter_width));
  }
  Var f = final_lstm_state(g, find_lstm(m.params, "char.fwd"), e, false);
  Var b = final_lstm_state(g, find_lstm(m.params, "char.bwd"), e, true);
  return g.concat_cols({f, b});
}

/// Word-layer input rows for one sentence, n x input_dim.
inline Var sentence_inputs(Graph& g, TaggerModel& m, const Sentence& s, const ForwardOptions& opt = {}) {
  if (s.empty()) throw Error(ErrorKind::EmptySentence, "cannot tag an empty sentence");
  auto& table = m.params.get("word.embedding");
  std::vector<Var> rows;
  rows.reserve(s.size());
  for (const auto& tok : s.tokens) {
    std::vector<Var> parts;
    auto it = m.word_index.find(tok.form);
    if (it != m.word_index.end()) {
      size_t id = it->second;
      if (opt.unk_rng && opt.frequency) {
        auto f = opt.frequency->find(tok.form);
        if (f != opt.frequency->end() && f->second == 1 && opt.unk_rng->uniform() < opt.unk_probability) id = 0;
      }
      size_t ids[1] = {id};
      parts.push_back(g.embed_rows(table, ids));
    } else if (auto v = m.fallback ? emb::lookup(*m.fallback, tok.form) : std::nullopt) {
      parts.push_back(g.constant(Matrix::row_vector(std::move(*v))));
    } else {
      size_t ids[1] = {0};
      parts.push_back(g.embed_rows(table, ids));
    }
    if (m.config.char_encoder) parts.push_back(char_encode(g, m, tok.form));
    if (m.augmentation_dim) parts.push_back(g.constant(Matrix::row_vector(m.annotation.vector_for(tok.form))));
    rows.push_back(parts.size() == 1 ? parts[0] : g.concat_cols(parts));
  }
  return g.concat_rows(rows);
}

/// Word-sequence layer over a batch (batch normalization pools all positions).
inline std::vector<Var> word_layer_forward(Graph& g, TaggerModel& m, const std::vector<Var>& inputs) {
  const auto& wl = m.config.word_layer;
  for (Var x : inputs)
    if (g.value(x).cols != m.input_dim()) throw Error(ErrorKind::DimensionMismatch, "word layer input width mismatch");
  std::vector<Var> out;
  if (wl.kind == WordLayerKind::Birecurrent) {
    auto f = find_lstm(m.params, "word.fwd"), b = find_lstm(m.params, "word.bwd");
    for (Var x : inputs) {
      Var xd = g.dropout(x, wl.dropout);
      Var h = g.concat_cols({run_lstm(g, f, xd, false), run_lstm(g, b, xd, true)});
      out.push_back(g.dropout(h, wl.dropout));
    }
    return out;
  }
  std::vector<Var> cur;
  for (Var x : inputs) cur.push_back(g.dropout(x, wl.dropout));
  for (size_t l = 0; l < wl.conv_layers; ++l) {
    std::string p = "word.conv" + std::to_string(l);
    auto& w = m.params.get(p + ".w");
    auto& b = m.params.get(p + ".b");
    std::vector<Var> pre;
    for (Var x : cur) pre.push_back(conv1d(g, x, w, b, wl.filter_width));
    if (wl.batch_norm) {
      Var all = g.batchnorm(pre.size() == 1 ? pre[0] : g.concat_rows(pre), m.params.get(p + ".bn.gamma"),
                            m.params.get(p + ".bn.beta"), m.batchnorm[l]);
      size_t off = 0;
      for (auto& v : pre) {
        size_t n = g.value(v).rows;
        v = g.slice_rows(all, off, n);
        off += n;
      }
    }
    for (size_t i = 0; i < cur.size(); ++i) {
      Var a = g.tanh(pre[i]);
      cur[i] = l + 1 < wl.conv_layers ? g.dropout(a, wl.dropout) : a;
    }
  }
  return cur;
}

inline Var output_scores(Graph& g, TaggerModel& m, Var h) {
  return g.affine(h, m.params.get("out.w"), m.params.get("out.b"));
}

inline std::vector<size_t> gold_indices(const TaggerModel& m, const Sentence& s) {
  std::vector<size_t> y;
  for (const auto& t : s.tokens) {
    if (!t.tag) throw Error(ErrorKind::UntaggedCorpus, "training sentence has an untagged token");
    y.push_back(m.tags.index(*t.tag));
  }
  return y;
}

/// Summed sentence losses (token-summed NLL for softmax, sequence NLL for CRF).
inline Var batch_loss(Graph& g, TaggerModel& m, const std::vector<const Sentence*>& batch, const ForwardOptions& opt = {}) {
  std::vector<Var> inputs;
  for (const Sentence* s : batch) inputs.push_back(sentence_inputs(g, m, *s, opt));
  auto hidden = word_layer_forward(g, m, inputs);
  std::vector<Var> losses;
  for (size_t i = 0; i < batch.size(); ++i) {
    Var scores = output_scores(g, m, hidden[i]);
    auto gold = gold_indices(m, *batch[i]);
    losses.push_back(m.config.inference.kind == InferenceKind::Softmax
                         ? g.softmax_nll(scores, gold)
                         : g.crf_nll(scores, g.param(m.params.get("crf.transitions")), gold));
  }
  return g.sum(losses.size() == 1 ? losses[0] : g.concat_rows(losses));
}

/// Output scores (n x K) in inference mode.
inline Matrix emission_scores(const TaggerModel& model, const Sentence& s) {
  auto& m = const_cast<TaggerModel&>(model);  // inference reads parameters only
  Graph g(false);
  auto h = word_layer_forward(g, m, {sentence_inputs(g, m, s)});
  return g.value(output_scores(g, m, h[0]));
}

inline std::vector<size_t> predict_indices(const TaggerModel& m, const Sentence& s) {
  Matrix scores = emission_scores(m, s);
  if (m.config.inference.kind == InferenceKind::Softmax) return softmax_decode(scores);
  return crf_layer_decode(scores, m.params.get("crf.transitions").value);
}

inline std::vector<std::string> predict(const TaggerModel& m, const Sentence& s) {
  std::vector<std::string> out;
  for (size_t y : predict_indices(m, s)) out.push_back(m.tags.tag(y));
  return out;
}

inline TaggedCorpus tag_corpus(const TaggerModel& m, const TaggedCorpus& corpus) {
  TaggedCorpus out;
  out.tagset_name = m.tags.name();
  for (const auto& s : corpus.sentences) {
    auto tags = predict(m, s);
    Sentence o;
    for (size_t i = 0; i < s.size(); ++i) o.tokens.push_back(Token{s.tokens[i].form, tags[i]});
    out.sentences.push_back(std::move(o));
  }
  return out;
}

inline double accuracy(const TaggerModel& m, const TaggedCorpus& gold) {
  size_t ok = 0, total = 0;
  for (const auto& s : gold.sentences) {
    auto y = predict_indices(m, s);
    auto g = gold_indices(m, s);
    for (size_t i = 0; i < y.size(); ++i) ok += y[i] == g[i];
    total += y.size();
  }
  return total ? static_cast<double>(ok) / static_cast<double>(total) : 0.0;
}

// ---------------------------------------------------------------------------
// Training

struct EpochRecord {
  size_t epoch = 0;
  double learning_rate = 0;
  double train_loss = 0;  // per token
  double dev_accuracy = 0;
};

struct TrainResult {
  TaggerModel model;
  std::vector<EpochRecord> trace;
  size_t best_epoch = 0;
  double best_dev_accuracy = 0;
};

/// Mini-batch SGD with lr0 / (1 + decay * epoch), gradient-norm clipping and
/// best-dev-epoch selection.
inline TrainResult train(TaggerModel model, const TaggedCorpus& train_set, const TaggedCorpus& dev,
                         const TrainConfig& cfg) {
  cfg.validate();
  if (!train_set.tagged()) throw Error(ErrorKind::UntaggedCorpus, "training corpus must be tagged and non-empty");
  if (!dev.tagged()) throw Error(ErrorKind::UntaggedCorpus, "dev corpus must be tagged and non-empty");
  std::unordered_map<std::string, size_t> freq;
  for (const auto& s : train_set.sentences)
    for (const auto& t : s.tokens) freq[t.form]++;
  Rng rng(cfg.seed);
  ForwardOptions fopt;
  fopt.unk_rng = &rng;
  fopt.frequency = &freq;
  fopt.unk_probability = cfg.unk_replace_probability;

  TrainResult res;
  ParameterSet best_params = model.params;
  auto best_bn = model.batchnorm;
  double best = -1;
  std::vector<size_t> order(train_set.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  const size_t tokens = train_set.token_count();

  for (size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cfg.learning_rate / (1.0 + cfg.decay * static_cast<double>(epoch));
    rng.shuffle(std::span<size_t>(order));
    double epoch_loss = 0;
    for (size_t start = 0, batch_no = 0; start < order.size(); start += cfg.batch_size, ++batch_no) {
      std::vector<const Sentence*> batch;
      for (size_t i = start; i < std::min(order.size(), start + cfg.batch_size); ++i)
        batch.push_back(&train_set.sentences[order[i]]);
      Graph g(true, &rng);
      Var loss = batch_loss(g, model, batch, fopt);
      double v = g.value(loss)(0, 0);
      if (!std::isfinite(v)) {
        throw Error(ErrorKind::NonFinite, "loss became non-finite in epoch " + std::to_string(epoch + 1) + ", batch " +
                                              std::to_string(batch_no + 1));
      }
      epoch_loss += v;
      g.backward(loss);
      double norm = model.params.grad_norm();
      if (!std::isfinite(norm)) {
        throw Error(ErrorKind::NonFinite, "gradient became non-finite in epoch " + std::to_string(epoch + 1) +
                                              ", batch " + std::to_string(batch_no + 1));
      }
      double scale = norm > cfg.clip_norm ? cfg.clip_norm / norm : 1.0;
      for (size_t p = 0; p < model.params.size(); ++p) model.params[p].sgd_step(lr, scale);
      model.params.zero_grad();
    }
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.learning_rate = lr;
    rec.train_loss = epoch_loss / static_cast<double>(tokens);
    rec.dev_accuracy = accuracy(model, dev);
    res.trace.push_back(rec);
    if (rec.dev_accuracy > best) {
      best = rec.dev_accuracy;
      best_params = model.params;
      best_bn = model.batchnorm;
      res.best_epoch = rec.epoch;
    }
    if (cfg.stop_at_dev_accuracy && rec.dev_accuracy >= *cfg.stop_at_dev_accuracy) break;
  }
  model.params = std::move(best_params);
  model.batchnorm = std::move(best_bn);
  res.best_dev_accuracy = best;
  res.model = std::move(model);
  return res;
}

// ---------------------------------------------------------------------------
// Gradient check

struct TensorCheck {
  std::string name;
  size_t entries = 0;
  double max_rel_error = 0;
};

struct GradientReport {
  std::vector<TensorCheck> tensors;
  double max_rel_error() const {
    double m = 0;
    for (const auto& t : tensors) m = std::max(m, t.max_rel_error);
    return m;
  }
  bool passed(double tol) const { return max_rel_error() < tol; }
};

inline double gradient_rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

/// Central differences (h = 1e-4) against the backward pass for every entry
/// of every parameter tensor, on the summed loss of `sentences`.
inline GradientReport gradient_check(const TaggerModel& model, const std::vector<Sentence>& sentences, double h = 1e-4) {
  if (model.config.word_layer.dropout > 0) {
    throw Error(ErrorKind::DropoutActive, "gradient check needs dropout 0 (it makes the loss random)");
  }
  TaggerModel m = model;
  std::vector<const Sentence*> batch;
  for (const auto& s : sentences) batch.push_back(&s);
  auto stats = m.batchnorm;
  auto loss_value = [&] {
    m.batchnorm = stats;
    Graph g(true);
    return g.value(batch_loss(g, m, batch))(0, 0);
  };
  m.params.zero_grad();
  {
    m.batchnorm = stats;
    Graph g(true);
    g.backward(batch_loss(g, m, batch));
  }
  GradientReport report;
  for (size_t p = 0; p < m.params.size(); ++p) {
    auto& par = m.params[p];
    Matrix analytic = par.grad;
    TensorCheck tc;
    tc.name = par.name;
    for (size_t i = 0; i < par.value.size(); ++i) {
      double keep = par.value.data[i];
      par.value.data[i] = keep + h;
      double up = loss_value();
      par.value.data[i] = keep - h;
      double down = loss_value();
      par.value.data[i] = keep;
      double numeric = (up - down) / (2 * h);
      tc.max_rel_error = std::max(tc.max_rel_error, gradient_rel_error(analytic.data[i], numeric));
      ++tc.entries;
    }
    report.tensors.push_back(tc);
  }
  return report;
}

// ---------------------------------------------------------------------------
// Model file: "SEQTAG-NN <version>" line, one JSON line, then an optional
// SEQTAG-VEC block holding the table used for out-of-vocabulary words.

inline constexpr const char* kNnMagic = "SEQTAG-NN";
inline constexpr int kNnFormatVersion = 1;

namespace detail {

using nlohmann::json;

inline json config_to_json(const TaggerConfig& c) {
  json j;
  if (c.char_encoder) {
    const auto& ce = *c.char_encoder;
    j["char_encoder"] = {{"kind", to_string(ce.kind)},
                         {"char_embedding_dim", ce.char_embedding_dim},
                         {"char_hidden_dim", ce.char_hidden_dim},
                         {"filter_width", ce.filter_width}};
  } else {
    j["char_encoder"] = nullptr;
  }
  const auto& wl = c.word_layer;
  j["word_layer"] = {{"kind", to_string(wl.kind)},       {"word_hidden_dim", wl.word_hidden_dim},
                     {"conv_layers", wl.conv_layers},    {"filter_width", wl.filter_width},
                     {"batch_norm", wl.batch_norm},      {"dropout", wl.dropout}};
  j["inference"] = to_string(c.inference.kind);
  j["embedding_dim"] = c.embedding_dim;
  j["seed"] = c.seed;
  return j;
}

inline TaggerConfig config_from_json(const json& j) {
  TaggerConfig c;
  if (j.at("char_encoder").is_null()) {
    c.char_encoder.reset();
  } else {
    const auto& ce = j.at("char_encoder");
    CharEncoderConfig e;
    e.kind = char_encoder_kind(ce.at("kind").get<std::string>());
    e.char_embedding_dim = ce.at("char_embedding_dim").get<size_t>();
    e.char_hidden_dim = ce.at("char_hidden_dim").get<size_t>();
    e.filter_width = ce.at("filter_width").get<size_t>();
    c.char_encoder = e;
  }
  const auto& wl = j.at("word_layer");
  c.word_layer.kind = word_layer_kind(wl.at("kind").get<std::string>());
  c.word_layer.word_hidden_dim = wl.at("word_hidden_dim").get<size_t>();
  c.word_layer.conv_layers = wl.at("conv_layers").get<size_t>();
  c.word_layer.filter_width = wl.at("filter_width").get<size_t>();
  c.word_layer.batch_norm = wl.at("batch_norm").get<bool>();
  c.word_layer.dropout = wl.at("dropout").get<double>();
  c.inference.kind = inference_kind(j.at("inference").get<std::string>());
  c.embedding_dim = j.at("embedding_dim").get<size_t>();
  c.seed = j.at("seed").get<uint64_t>();
  return c;
}

}  // namespace detail

inline void save_model(std::ostream& out, const TaggerModel& m) {
  using nlohmann::json;
  json j;
  j["tagset"] = {{"name", m.tags.name()}, {"tags", m.tags.tags()}};
  j["config"] = detail::config_to_json(m.config);
  j["embedding_dim"] = m.embedding_dim;
  j["words"] = m.words;
  std::vector<uint32_t> cps(m.chars.begin(), m.chars.end());
  j["chars"] = cps;
  std::map<std::string, size_t> ann(m.annotation.tags.begin(), m.annotation.tags.end());
  j["annotation"] = {{"k", m.annotation.k}, {"tags", ann}};
  j["augmentation_dim"] = m.augmentation_dim;
  json params = json::array();
  for (size_t i = 0; i < m.params.size(); ++i) {
    const auto& p = m.params[i];
    params.push_back({{"name", p.name}, {"rows", p.value.rows}, {"cols", p.value.cols}, {"values", p.value.data}});
  }
  j["parameters"] = params;
  json bn = json::array();
  for (const auto& s : m.batchnorm)
    bn.push_back({{"mean", s.mean}, {"var", s.var}, {"momentum", s.momentum}, {"eps", s.eps}});
  j["batchnorm"] = bn;
  j["fallback_vectors"] = m.fallback.has_value();
  out << kNnMagic << ' ' << kNnFormatVersion << '\n' << j.dump() << '\n';
  if (m.fallback) emb::save_binary_vectors(out, *m.fallback);
}

inline TaggerModel load_model(std::istream& in) {
  using nlohmann::json;
  std::string header, body;
  if (!std::getline(in, header) || header.rfind(kNnMagic, 0) != 0) {
    throw Error(ErrorKind::BadModelFile, "not a neural tagger model (missing SEQTAG-NN magic)");
  }
  int version = std::atoi(header.c_str() + std::string(kNnMagic).size());
  if (version != kNnFormatVersion) throw Error(ErrorKind::BadModelFile, "unsupported SEQTAG-NN version " + std::to_string(version));
  if (!std::getline(in, body)) throw Error(ErrorKind::BadModelFile, "truncated model file");
  TaggerModel m;
  try {
    json j = json::parse(body);
    m.tags = Tagset(j.at("tagset").at("name").get<std::string>(), j.at("tagset").at("tags").get<std::vector<std::string>>());
    m.config = detail::config_from_json(j.at("config"));
    m.embedding_dim = j.at("embedding_dim").get<size_t>();
    for (const auto& w : j.at("words").get<std::vector<std::string>>()) detail::add_word(m, w);
    for (uint32_t c : j.at("chars").get<std::vector<uint32_t>>()) detail::add_char(m, static_cast<char32_t>(c));
    m.annotation.k = j.at("annotation").at("k").get<size_t>();
    for (const auto& [w, t] : j.at("annotation").at("tags").items()) m.annotation.tags[w] = t.get<size_t>();
    m.augmentation_dim = j.at("augmentation_dim").get<size_t>();
    detail::declare_parameters(m);
    const auto& params = j.at("parameters");
    if (params.size() != m.params.size()) throw Error(ErrorKind::BadModelFile, "parameter count mismatch");
    for (size_t i = 0; i < params.size(); ++i) {
      auto& p = m.params[i];
      if (params[i].at("name").get<std::string>() != p.name || params[i].at("rows").get<size_t>() != p.value.rows ||
          params[i].at("cols").get<size_t>() != p.value.cols) {
        throw Error(ErrorKind::BadModelFile, "parameter " + p.name + " does not match the declared layout");
      }
      p.value.data = params[i].at("values").get<std::vector<double>>();
      if (p.value.data.size() != p.value.rows * p.value.cols) throw Error(ErrorKind::BadModelFile, "parameter size mismatch");
    }
    const auto& bn = j.at("batchnorm");
    if (bn.size() != m.batchnorm.size()) throw Error(ErrorKind::BadModelFile, "batch normalization layer count mismatch");
    for (size_t i = 0; i < bn.size(); ++i) {
      m.batchnorm[i].mean = bn[i].at("mean").get<std::vector<double>>();
      m.batchnorm[i].var = bn[i].at("var").get<std::vector<double>>();
      m.batchnorm[i].momentum = bn[i].at("momentum").get<double>();
      m.batchnorm[i].eps = bn[i].at("eps").get<double>();
    }
    if (j.at("fallback_vectors").get<bool>()) m.fallback = emb::load_binary_vectors(in);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::BadModelFile, std::string("malformed model body: ") + e.what());
  }
  return m;
}

inline void save_model(const std::string& path, const TaggerModel& m) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot write model " + path);
  save_model(out, m);
}

inline TaggerModel load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open model " + path);
  return load_model(in);
}

}  // namespace seqtag::nn
