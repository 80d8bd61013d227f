#pragma once

#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "seqtag/corpus.hpp"
#include "seqtag/embeddings.hpp"
#include "seqtag/error.hpp"
#include "seqtag/eval.hpp"
#include "seqtag/nn/tagger.hpp"

namespace seqtag::ensemble {

/// Per-token agreement of two taggers: the shared tag index, or nullopt.
struct Agreement {
  std::vector<std::vector<std::optional<size_t>>> tokens;
  size_t count = 0;
  size_t total = 0;
  double rate() const { return total ? static_cast<double>(count) / static_cast<double>(total) : 0.0; }
};

/// Compares two per-sentence tag-index sequences.
inline Agreement agreement_from_predictions(const std::vector<std::vector<size_t>>& a,
                                            const std::vector<std::vector<size_t>>& b) {
  if (a.size() != b.size()) throw Error(ErrorKind::StructureMismatch, "prediction sets differ in sentence count");
  Agreement r;
  for (size_t i = 0; i < a.size(); ++i) {
    if (a[i].size() != b[i].size()) throw Error(ErrorKind::StructureMismatch, "prediction lengths differ");
    auto& row = r.tokens.emplace_back();
    for (size_t t = 0; t < a[i].size(); ++t) {
      row.push_back(a[i][t] == b[i][t] ? std::optional<size_t>(a[i][t]) : std::nullopt);
      r.count += a[i][t] == b[i][t];
      ++r.total;
    }
  }
  return r;
}

/// Runs both taggers over the word forms of `corpus`; its tags are dropped
/// before either model sees the sentences.
inline Agreement compute_agreement(const nn::TaggerModel& a, const nn::TaggerModel& b, const TaggedCorpus& corpus) {
  if (a.tags.tags() != b.tags.tags()) throw Error(ErrorKind::TagsetMismatch, "the two taggers use different tagsets");
  const TaggedCorpus inputs = corpus.untagged();
  std::vector<std::vector<size_t>> pa, pb;
  for (const auto& s : inputs.sentences) {
    pa.push_back(nn::predict_indices(a, s));
    pb.push_back(nn::predict_indices(b, s));
  }
  return agreement_from_predictions(pa, pb);
}

/// Type-level annotation: a word gets tag i only if every one of its tokens
/// was agreed as i; any disagreement or conflict leaves it at x0.
inline nn::TypeAnnotation annotate_types(const TaggedCorpus& corpus, const Agreement& agreement, size_t k) {
  if (agreement.tokens.size() != corpus.size()) throw Error(ErrorKind::StructureMismatch, "agreement does not match corpus");
  std::unordered_map<std::string, std::optional<size_t>> seen;
  for (size_t i = 0; i < corpus.size(); ++i) {
    const auto& s = corpus.sentences[i];
    if (agreement.tokens[i].size() != s.size()) throw Error(ErrorKind::StructureMismatch, "agreement does not match corpus");
    for (size_t t = 0; t < s.size(); ++t) {
      const auto& tag = agreement.tokens[i][t];
      auto [it, fresh] = seen.emplace(s.tokens[t].form, tag);
      if (!fresh && it->second != tag) it->second.reset();
    }
  }
  nn::TypeAnnotation ann;
  ann.k = k;
  for (const auto& [w, tag] : seen)
    if (tag) ann.tags.emplace(w, *tag);
  return ann;
}

/// Word representation Z_w followed by the one-hot agreement appendix.
class AugmentedTable {
 public:
  AugmentedTable(const emb::WordVectorTable& table, nn::TypeAnnotation ann, const Tagset& tags)
      : table_(&table), ann_(std::move(ann)) {
    if (ann_.k != tags.size()) {
      throw Error(ErrorKind::TagsetMismatch, "annotation width " + std::to_string(ann_.k) + " differs from " +
                                                 std::to_string(tags.size()) + " tags");
    }
    for (const auto& [w, i] : ann_.tags)
      if (i >= tags.size()) throw Error(ErrorKind::TagOutOfRange, "annotation of '" + w + "' is out of range");
  }

  size_t dim() const { return table_->dim() + ann_.k; }
  const nn::TypeAnnotation& annotation() const { return ann_; }

  std::optional<std::vector<double>> representation(const std::string& word) const {
    auto z = emb::lookup(*table_, word);
    if (!z) return std::nullopt;
    auto x = ann_.vector_for(word);
    z->insert(z->end(), x.begin(), x.end());
    return z;
  }

 private:
  const emb::WordVectorTable* table_;
  nn::TypeAnnotation ann_;
};

inline AugmentedTable augment_embeddings(const emb::WordVectorTable& table, const nn::TypeAnnotation& ann,
                                         const Tagset& tags) {
  return AugmentedTable(table, ann, tags);
}

// ---------------------------------------------------------------------------
// Refinement loop

struct TaggerPair {
  nn::TaggerModel recurrent;
  nn::TaggerModel conv;
};

/// Builds and trains a fresh pair of taggers given an annotation.
using Retrainer = std::function<TaggerPair(const nn::TypeAnnotation&)>;

struct IterationRecord {
  size_t iteration = 0;  // 0 = base models
  size_t agreement_count = 0;
  size_t agreement_tokens = 0;
  double dev_recurrent = 0;
  double test_recurrent = 0;
  double dev_conv = 0;
  double test_conv = 0;
};

struct RefinementResult {
  std::vector<IterationRecord> trace;
  size_t best_iteration = 0;
  TaggerPair best;
};

/// Trains both architectures from scratch on the annotated inputs, using the
/// base models' configurations. With threads > 1 the two jobs run in parallel.
inline Retrainer make_retrainer(const TaggerPair& base, const TaggedCorpus& train, const TaggedCorpus& dev,
                                const emb::WordVectorTable* pretrained, nn::TrainConfig recurrent_cfg,
                                nn::TrainConfig conv_cfg, size_t threads = 1) {
  const Tagset tags = base.recurrent.tags;
  const nn::TaggerConfig rc = base.recurrent.config, cc = base.conv.config;
  return [=, &train, &dev](const nn::TypeAnnotation& ann) {
    auto fit = [&](const nn::TaggerConfig& mc, const nn::TrainConfig& tc) {
      return nn::train(nn::build_tagger(tags, mc, train, pretrained, &ann), train, dev, tc).model;
    };
    if (threads > 1) {
      std::optional<nn::TaggerModel> conv;
      std::exception_ptr failure;
      std::thread worker([&] {
        try {
          conv = fit(cc, conv_cfg);
        } catch (...) {
          failure = std::current_exception();
        }
      });
      nn::TaggerModel rec;
      try {
        rec = fit(rc, recurrent_cfg);
      } catch (...) {
        worker.join();
        throw;
      }
      worker.join();
      if (failure) std::rethrow_exception(failure);
      return TaggerPair{std::move(rec), std::move(*conv)};
    }
    auto rec = fit(rc, recurrent_cfg);
    return TaggerPair{std::move(rec), fit(cc, conv_cfg)};
  };
}

/// Annotate with the current pair's agreement on train + dev inputs, retrain,
/// and stop at max_iters or once the recurrent model's dev accuracy fails to
/// beat the best seen so far.
inline RefinementResult iterate_refinement(TaggerPair base, const TaggedCorpus& train, const TaggedCorpus& dev,
                                           const TaggedCorpus& test, size_t max_iters, const Retrainer& retrain) {
  if (max_iters == 0) throw Error(ErrorKind::InvalidConfig, "max_iters must be at least 1");
  TaggedCorpus inputs;
  inputs.sentences = train.sentences;
  inputs.sentences.insert(inputs.sentences.end(), dev.sentences.begin(), dev.sentences.end());
  inputs = inputs.untagged();
  const size_t k = base.recurrent.tags.size();

  auto record = [&](size_t it, const TaggerPair& p, const Agreement* agr) {
    IterationRecord r;
    r.iteration = it;
    if (agr) r.agreement_count = agr->count, r.agreement_tokens = agr->total;
    r.dev_recurrent = nn::accuracy(p.recurrent, dev);
    r.test_recurrent = nn::accuracy(p.recurrent, test);
    r.dev_conv = nn::accuracy(p.conv, dev);
    r.test_conv = nn::accuracy(p.conv, test);
    return r;
  };

  RefinementResult res;
  res.trace.push_back(record(0, base, nullptr));
  double best = res.trace[0].dev_recurrent;
  res.best = base;
  TaggerPair current = std::move(base);
  for (size_t it = 1; it <= max_iters; ++it) {
    auto agr = compute_agreement(current.recurrent, current.conv, inputs);
    auto ann = annotate_types(inputs, agr, k);
    current = retrain(ann);
    res.trace.push_back(record(it, current, &agr));
    if (res.trace.back().dev_recurrent <= best) break;
    best = res.trace.back().dev_recurrent;
    res.best_iteration = it;
    res.best = current;
  }
  return res;
}

/// Tab-separated trace, accuracies as percentages with two decimals.
inline void write_trace(std::ostream& out, const std::vector<IterationRecord>& trace) {
  out << "iteration\tagreements\ttokens\tdev_recurrent\ttest_recurrent\tdev_conv\ttest_conv\n";
  for (const auto& r : trace) {
    out << r.iteration << '\t' << r.agreement_count << '\t' << r.agreement_tokens << '\t'
        << eval::format_percent(r.dev_recurrent) << '\t' << eval::format_percent(r.test_recurrent) << '\t'
        << eval::format_percent(r.dev_conv) << '\t' << eval::format_percent(r.test_conv) << '\n';
  }
}

}  // namespace seqtag::ensemble
