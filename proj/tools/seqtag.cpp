// seqtag: corpus preparation, CRF and neural tagger training, tagging and
// evaluation from the command line.

#include <openssl/evp.h>

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "seqtag/corpus.hpp"
#include "seqtag/crf/model.hpp"
#include "seqtag/crf/templates.hpp"
#include "seqtag/embeddings.hpp"
#include "seqtag/ensemble.hpp"
#include "seqtag/eval.hpp"
#include "seqtag/mapping.hpp"
#include "seqtag/nn/tagger.hpp"
#include "seqtag/tagset.hpp"

namespace {

using nlohmann::json;
using namespace seqtag;

constexpr const char* kVersion = "0.1.0";

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

std::string sha256_file(const std::string& path, uint64_t& bytes) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path);
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  char buf[1 << 16];
  bytes = 0;
  while (in) {
    in.read(buf, sizeof buf);
    auto n = in.gcount();
    if (n > 0) EVP_DigestUpdate(ctx, buf, static_cast<size_t>(n)), bytes += static_cast<uint64_t>(n);
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) out += hex[md[i] >> 4], out += hex[md[i] & 15];
  return out;
}

// Run manifest, written once per invocation including failed ones.
struct Manifest {
  json doc = json::object();
  json inputs = json::array();

  void input(const std::string& path) {
    json entry{{"path", path}};
    try {
      uint64_t bytes = 0;
      entry["sha256"] = sha256_file(path, bytes);
      entry["bytes"] = bytes;
    } catch (const Error&) {
      entry["sha256"] = nullptr;
    }
    inputs.push_back(entry);
  }
};

struct Global {
  size_t threads = 1;
  bool deterministic = false;
  std::string manifest_path;
};

size_t resolve_threads(const CLI::Option* opt, size_t value) {
  if (opt->count() == 0) {
    if (const char* env = std::getenv("SEQTAG_THREADS")) {
      try {
        return std::max<size_t>(1, std::stoul(env));
      } catch (const std::exception&) {
        throw Error(ErrorKind::Usage, std::string("SEQTAG_THREADS is not a number: ") + env);
      }
    }
  }
  return std::max<size_t>(1, value);
}

json resolved_options(const CLI::App* app) {
  json cfg = json::object();
  for (const CLI::Option* opt : app->get_options()) {
    if (opt->get_name() == "--help") continue;
    auto results = opt->results();
    if (opt->get_expected_max() == 0) {
      cfg[opt->get_name()] = opt->count() > 0;
    } else if (!results.empty()) {
      cfg[opt->get_name()] = results.size() == 1 ? json(results[0]) : json(results);
    } else {
      cfg[opt->get_name()] = opt->get_default_str();
    }
  }
  return cfg;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path);
  out << text;
  if (!out) throw Error(ErrorKind::Io, "write failed for " + path);
}

bool starts_with_file(const std::string& path, const std::string& magic) {
  std::ifstream in(path, std::ios::binary);
  std::string head(magic.size(), '\0');
  in.read(head.data(), static_cast<std::streamsize>(head.size()));
  return in && head == magic;
}

// Plain text: one sentence per line, whitespace-separated tokens.
std::vector<std::vector<std::string>> read_text_sentences(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path);
  std::vector<std::vector<std::string>> out;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::vector<std::string> words;
    for (std::string w; ls >> w;) words.push_back(utf8::nfc(w));
    if (!words.empty()) out.push_back(std::move(words));
  }
  return out;
}

void require_parent_dir(const std::string& path) {
  auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty() && !std::filesystem::exists(parent)) throw Error(ErrorKind::Io, "no such directory " + parent.string());
}

}  // namespace

int main(int argc, char** argv) {
  const auto started = std::chrono::steady_clock::now();
  CLI::App app{"seqtag: part-of-speech tagging toolkit (CRF and neural taggers)", "seqtag"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  Global g;
  auto* threads_opt = app.add_option("--threads", g.threads, "Worker threads (falls back to SEQTAG_THREADS)");
  app.add_flag("--deterministic", g.deterministic, "Force single-threaded, bitwise-reproducible numeric paths");
  app.add_option("--manifest", g.manifest_path, "Write the run manifest (JSON) here instead of stderr");

  Manifest manifest;
  std::function<void()> action;

  // clean ------------------------------------------------------------------
  std::string in_path, out_path, tagset_spec;
  auto* clean = app.add_subcommand("clean", "Repair tags and drop unusable sentences");
  clean->add_option("input", in_path, "Raw corpus (form<TAB>tag)")->required();
  clean->add_option("output", out_path, "Cleaned corpus")->required();
  std::string clean_tagset = "bis-echo";
  clean->add_option("--tagset", clean_tagset, "Tagset name (ud, bis, bis-echo) or file")->capture_default_str();
  clean->callback([&] {
    action = [&] {
      manifest.input(in_path);
      auto tags = tagsets::by_name_or_file(clean_tagset);
      auto raw = parse_corpus(in_path, tags, ParseMode::Lenient);
      auto [cleaned, report] = clean_corpus(raw, tags);
      save_corpus(out_path, cleaned);
      std::cout << report.summary();
      manifest.doc["report"] = {{"repaired_tags", report.repaired_tags},
                                {"dropped_sentences", report.dropped_sentences},
                                {"dropped_empty", report.dropped_empty},
                                {"normalized_forms", report.normalized_forms}};
    };
  });

  // split ------------------------------------------------------------------
  std::string split_outputs[3];
  std::string frac[3] = {"0.70", "0.15", "0.15"};
  uint64_t split_seed = 1;
  std::string split_tagset = "ud";
  auto* split = app.add_subcommand("split", "Seeded train/dev/test split by sentence");
  split->add_option("input", in_path)->required();
  split->add_option("train_out", split_outputs[0])->required();
  split->add_option("dev_out", split_outputs[1])->required();
  split->add_option("test_out", split_outputs[2])->required();
  split->add_option("--train", frac[0], "Train fraction")->capture_default_str();
  split->add_option("--dev", frac[1], "Dev fraction")->capture_default_str();
  split->add_option("--test", frac[2], "Test fraction")->capture_default_str();
  split->add_option("--seed", split_seed)->capture_default_str();
  split->add_option("--tagset", split_tagset)->capture_default_str();
  split->callback([&] {
    action = [&] {
      manifest.input(in_path);
      SplitSpec spec{Fraction::parse(frac[0]), Fraction::parse(frac[1]), Fraction::parse(frac[2]), split_seed};
      auto corpus = parse_corpus(in_path, tagsets::by_name_or_file(split_tagset));
      auto parts = split_corpus(corpus, spec);
      save_corpus(split_outputs[0], parts.train);
      save_corpus(split_outputs[1], parts.dev);
      save_corpus(split_outputs[2], parts.test);
      std::cout << "train=" << parts.train.size() << "\ndev=" << parts.dev.size() << "\ntest=" << parts.test.size() << '\n';
    };
  });

  // map-tags ---------------------------------------------------------------
  std::string mapping_path, overrides_path, map_source = "bis-echo";
  auto* map = app.add_subcommand("map-tags", "Convert tags with a mapping (built-in BIS to UD by default)");
  map->add_option("input", in_path)->required();
  map->add_option("output", out_path)->required();
  map->add_option("--mapping", mapping_path, "SOURCE<TAB>TARGET rule file");
  map->add_option("--overrides", overrides_path, "form<TAB>SOURCE<TAB>TARGET override file");
  map->add_option("--source-tagset", map_source, "Tagset of the input corpus")->capture_default_str();
  map->callback([&] {
    action = [&] {
      manifest.input(in_path);
      TagMapping m = mapping_path.empty() ? builtin_bis_to_ud() : load_mapping(mapping_path);
      if (!mapping_path.empty()) manifest.input(mapping_path);
      if (!overrides_path.empty()) manifest.input(overrides_path), load_overrides(m, overrides_path);
      auto corpus = parse_corpus(in_path, tagsets::by_name_or_file(map_source));
      auto mapped = map_corpus(m, corpus);
      save_corpus(out_path, mapped);
      std::cout << "sentences=" << mapped.size() << "\ntokens=" << mapped.token_count() << '\n';
    };
  });

  // distribution -----------------------------------------------------------
  std::string dist_tagset = "ud";
  auto* dist = app.add_subcommand("distribution", "Tag counts, descending");
  dist->add_option("input", in_path)->required();
  dist->add_option("--tagset", dist_tagset)->capture_default_str();
  dist->callback([&] {
    action = [&] {
      manifest.input(in_path);
      auto corpus = parse_corpus(in_path, tagsets::by_name_or_file(dist_tagset));
      const double total = static_cast<double>(corpus.token_count());
      for (const auto& [tag, n] : tag_distribution(corpus)) {
        std::cout << tag << '\t' << n << '\t' << eval::format_percent(static_cast<double>(n) / total) << '\n';
      }
      std::cout << "total\t" << corpus.token_count() << "\t100.00\n";
    };
  });

  // train-crf --------------------------------------------------------------
  std::string templates_path, crf_tagset = "ud", aux = "lexicon";
  crf::CrfTrainOptions crf_opt;
  auto* tcrf = app.add_subcommand("train-crf", "Train the template-feature CRF with L-BFGS");
  tcrf->add_option("train", in_path)->required();
  tcrf->add_option("model", out_path)->required();
  tcrf->add_option("--templates", templates_path, "Template file (default: built-in feature set)");
  tcrf->add_option("--c", crf_opt.c, "Regularization balance")->capture_default_str();
  tcrf->add_option("--cutoff", crf_opt.cutoff, "Minimum feature frequency")->capture_default_str();
  tcrf->add_option("--max-iter", crf_opt.max_iter)->capture_default_str();
  tcrf->add_option("--tol", crf_opt.tol)->capture_default_str();
  tcrf->add_option("--aux", aux, "Auxiliary column: lexicon or gold")->capture_default_str();
  tcrf->add_option("--tagset", crf_tagset)->capture_default_str();
  tcrf->callback([&] {
    action = [&] {
      manifest.input(in_path);
      auto tags = tagsets::by_name_or_file(crf_tagset);
      std::vector<crf::FeatureTemplate> templates = crf::default_templates();
      if (!templates_path.empty()) manifest.input(templates_path), templates = crf::load_templates(templates_path);
      crf_opt.aux_mode = crf::aux_mode_from_string(aux);
      crf_opt.threads = g.threads;
      crf_opt.deterministic = g.deterministic;
      auto corpus = parse_corpus(in_path, tags);
      require_parent_dir(out_path);
      auto res = crf::train(corpus, tags, templates, crf_opt);
      crf::save_model(out_path, res.model);
      manifest.doc["iterations"] = res.iterations;
      manifest.doc["stop_reason"] = res.stop_reason;
      std::cout << "features=" << res.model.vocabulary.size() << "\niterations=" << res.iterations
                << "\nstop=" << res.stop_reason << '\n';
    };
  });

  // train-neural -----------------------------------------------------------
  std::string dev_path, vectors_path, trace_path, nn_tagset = "ud";
  std::string char_kind = "conv", word_kind = "birecurrent", infer_kind = "chain_crf";
  nn::TaggerConfig mcfg;
  nn::TrainConfig tcfg;
  double dropout = 0.3;
  auto* tnn = app.add_subcommand("train-neural", "Train a neural tagger with SGD");
  tnn->add_option("train", in_path)->required();
  tnn->add_option("dev", dev_path)->required();
  tnn->add_option("model", out_path)->required();
  tnn->add_option("--vectors", vectors_path, "Pre-trained word vectors (text or binary)");
  tnn->add_option("--char-encoder", char_kind, "conv, birecurrent or none")->capture_default_str();
  tnn->add_option("--word-layer", word_kind, "birecurrent or conv")->capture_default_str();
  tnn->add_option("--inference", infer_kind, "softmax or chain_crf")->capture_default_str();
  tnn->add_option("--char-embedding-dim", mcfg.char_encoder->char_embedding_dim)->capture_default_str();
  tnn->add_option("--char-hidden-dim", mcfg.char_encoder->char_hidden_dim)->capture_default_str();
  tnn->add_option("--char-filter-width", mcfg.char_encoder->filter_width)->capture_default_str();
  tnn->add_option("--word-hidden-dim", mcfg.word_layer.word_hidden_dim)->capture_default_str();
  tnn->add_option("--conv-layers", mcfg.word_layer.conv_layers)->capture_default_str();
  tnn->add_option("--filter-width", mcfg.word_layer.filter_width)->capture_default_str();
  tnn->add_flag("--batch-norm", mcfg.word_layer.batch_norm, "Batch normalization in the conv word layer");
  tnn->add_option("--dropout", dropout)->capture_default_str();
  tnn->add_option("--embedding-dim", mcfg.embedding_dim, "Used without --vectors")->capture_default_str();
  auto* lr_opt = tnn->add_option("--lr", tcfg.learning_rate, "Default 0.015 (recurrent) or 0.005 (conv)");
  auto* epochs_opt = tnn->add_option("--epochs", tcfg.epochs, "Default 50 (recurrent) or 100 (conv)");
  tnn->add_option("--decay", tcfg.decay)->capture_default_str();
  tnn->add_option("--batch-size", tcfg.batch_size)->capture_default_str();
  tnn->add_option("--clip", tcfg.clip_norm)->capture_default_str();
  tnn->add_option("--unk-probability", tcfg.unk_replace_probability)->capture_default_str();
  tnn->add_option("--seed", tcfg.seed)->capture_default_str();
  tnn->add_option("--trace", trace_path, "Write the per-epoch trace (TSV)");
  tnn->add_option("--tagset", nn_tagset)->capture_default_str();
  tnn->callback([&] {
    action = [&] {
      manifest.input(in_path);
      manifest.input(dev_path);
      auto tags = tagsets::by_name_or_file(nn_tagset);
      if (char_kind == "none") {
        mcfg.char_encoder.reset();
      } else {
        mcfg.char_encoder->kind = nn::char_encoder_kind(char_kind);
      }
      mcfg.word_layer.kind = nn::word_layer_kind(word_kind);
      mcfg.word_layer.dropout = dropout;
      mcfg.inference.kind = nn::inference_kind(infer_kind);
      mcfg.seed = tcfg.seed;
      auto preset = mcfg.word_layer.kind == nn::WordLayerKind::Conv ? nn::TrainConfig::conv() : nn::TrainConfig::recurrent();
      if (lr_opt->count() == 0) tcfg.learning_rate = preset.learning_rate;
      if (epochs_opt->count() == 0) tcfg.epochs = preset.epochs;
      manifest.doc["config"]["lr"] = tcfg.learning_rate;
      manifest.doc["config"]["epochs"] = tcfg.epochs;
      auto train = parse_corpus(in_path, tags);
      auto dev = parse_corpus(dev_path, tags);
      std::optional<emb::WordVectorTable> vectors;
      if (!vectors_path.empty()) manifest.input(vectors_path), vectors = emb::load_vectors(vectors_path);
      require_parent_dir(out_path);
      auto model = nn::build_tagger(tags, mcfg, train, vectors ? &*vectors : nullptr);
      auto res = nn::train(std::move(model), train, dev, tcfg);
      nn::save_model(out_path, res.model);
      if (!trace_path.empty()) {
        std::ostringstream t;
        t << "epoch\tlearning_rate\ttrain_loss\tdev_accuracy\n";
        for (const auto& e : res.trace)
          t << e.epoch << '\t' << e.learning_rate << '\t' << e.train_loss << '\t' << eval::format_percent(e.dev_accuracy)
            << '\n';
        write_text(trace_path, t.str());
      }
      manifest.doc["best_epoch"] = res.best_epoch;
      std::cout << "best_epoch=" << res.best_epoch << "\ndev_accuracy=" << eval::format_percent(res.best_dev_accuracy)
                << '\n';
    };
  });

  // embed-train ------------------------------------------------------------
  emb::SkipgramConfig scfg;
  std::string embed_format = "text";
  bool binary_out = false;
  auto* embed = app.add_subcommand("embed-train", "Train subword skip-gram vectors");
  embed->add_option("corpus", in_path, "Sentences: plain text lines, or a column corpus with --format column")->required();
  embed->add_option("output", out_path)->required();
  embed->add_option("--format", embed_format, "text or column")->capture_default_str();
  embed->add_option("--dim", scfg.dim)->capture_default_str();
  embed->add_option("--window", scfg.window)->capture_default_str();
  embed->add_option("--negatives", scfg.negatives)->capture_default_str();
  embed->add_option("--epochs", scfg.epochs)->capture_default_str();
  embed->add_option("--lr", scfg.learning_rate)->capture_default_str();
  embed->add_option("--min-count", scfg.min_count)->capture_default_str();
  embed->add_option("--minn", scfg.subwords.min_n)->capture_default_str();
  embed->add_option("--maxn", scfg.subwords.max_n)->capture_default_str();
  embed->add_option("--buckets", scfg.subwords.buckets)->capture_default_str();
  embed->add_option("--seed", scfg.seed)->capture_default_str();
  embed->add_flag("--binary", binary_out, "Write the binary format (keeps subword buckets)");
  embed->callback([&] {
    action = [&] {
      manifest.input(in_path);
      std::vector<std::vector<std::string>> sentences;
      if (embed_format == "column") {
        auto c = parse_corpus(in_path, tagsets::ud(), ParseMode::Lenient);
        for (const auto& s : c.sentences) sentences.push_back(s.forms());
      } else if (embed_format == "text") {
        sentences = read_text_sentences(in_path);
      } else {
        throw Error(ErrorKind::Usage, "--format must be text or column");
      }
      auto res = emb::train_skipgram(sentences, scfg);
      if (binary_out) {
        emb::save_binary_vectors(out_path, res.table);
      } else {
        emb::save_text_vectors(out_path, res.table);
      }
      manifest.doc["epoch_loss"] = res.epoch_loss;
      std::cout << "words=" << res.table.size() << "\ndim=" << res.table.dim() << '\n';
    };
  });

  // tag --------------------------------------------------------------------
  std::string model_path;
  auto* tag = app.add_subcommand("tag", "Tag a corpus with a CRF or neural model");
  tag->add_option("model", model_path)->required();
  tag->add_option("input", in_path, "Corpus; tags, if present, are ignored")->required();
  tag->add_option("output", out_path)->required();
  tag->callback([&] {
    action = [&] {
      manifest.input(model_path);
      manifest.input(in_path);
      if (starts_with_file(model_path, crf::kCrfMagic)) {
        auto m = crf::load_model(model_path);
        auto input = parse_corpus(in_path, m.tags, ParseMode::Lenient);
        save_corpus(out_path, crf::tag_corpus(m, input));
      } else if (starts_with_file(model_path, nn::kNnMagic)) {
        auto m = nn::load_model(model_path);
        auto input = parse_corpus(in_path, m.tags, ParseMode::Lenient);
        save_corpus(out_path, nn::tag_corpus(m, input));
      } else {
        throw Error(ErrorKind::BadModelFile, model_path + " is neither a CRF nor a neural model");
      }
    };
  });

  // eval / confusion / compare ---------------------------------------------
  std::string gold_path, pred_path, pred_b_path, eval_tagset = "ud";
  auto* ev = app.add_subcommand("eval", "Token accuracy in percent");
  ev->add_option("gold", gold_path)->required();
  ev->add_option("predicted", pred_path)->required();
  ev->add_option("--tagset", eval_tagset)->capture_default_str();
  ev->callback([&] {
    action = [&] {
      manifest.input(gold_path);
      manifest.input(pred_path);
      auto tags = tagsets::by_name_or_file(eval_tagset);
      auto gold = parse_corpus(gold_path, tags);
      double acc = eval::token_accuracy(gold, parse_corpus(pred_path, tags));
      manifest.doc["accuracy"] = acc;
      std::cout << eval::format_percent(acc) << '\n';
    };
  });

  size_t top_k = 5;
  std::string matrix_out;
  auto* conf = app.add_subcommand("confusion", "Confusion matrix and top misclassifications");
  conf->add_option("gold", gold_path)->required();
  conf->add_option("predicted", pred_path)->required();
  conf->add_option("--top", top_k)->capture_default_str();
  conf->add_option("--matrix", matrix_out, "Write the matrix (TSV) here; default stdout");
  conf->add_option("--tagset", eval_tagset)->capture_default_str();
  conf->callback([&] {
    action = [&] {
      manifest.input(gold_path);
      manifest.input(pred_path);
      auto tags = tagsets::by_name_or_file(eval_tagset);
      auto gold = parse_corpus(gold_path, tags);
      auto cm = eval::confusion(gold, parse_corpus(pred_path, tags), tags);
      std::ostringstream m;
      eval::write_confusion(m, cm);
      if (matrix_out.empty()) {
        std::cout << m.str() << '\n';
      } else {
        write_text(matrix_out, m.str());
      }
      std::cout << eval::format_misclassifications(cm, cm.errors() ? eval::top_misclassifications(cm, top_k)
                                                                    : std::vector<eval::MisclassEntry>{});
    };
  });

  auto* cmp = app.add_subcommand("compare", "Agreement and wins on disagreement for two taggers");
  cmp->add_option("gold", gold_path)->required();
  cmp->add_option("predicted_a", pred_path)->required();
  cmp->add_option("predicted_b", pred_b_path)->required();
  cmp->add_option("--tagset", eval_tagset)->capture_default_str();
  cmp->callback([&] {
    action = [&] {
      for (const auto* p : {&gold_path, &pred_path, &pred_b_path}) manifest.input(*p);
      auto tags = tagsets::by_name_or_file(eval_tagset);
      auto gold = parse_corpus(gold_path, tags);
      auto a = parse_corpus(pred_path, tags);
      auto r = eval::pairwise_comparison(gold, a, parse_corpus(pred_b_path, tags));
      std::cout << eval::format_pairwise(r);
    };
  });

  // ensemble-iterate -------------------------------------------------------
  std::string test_path, rec_model_path, conv_model_path, out_dir;
  size_t max_iters = 5;
  nn::TrainConfig ens_rec = nn::TrainConfig::recurrent(), ens_conv = nn::TrainConfig::conv();
  auto* ens = app.add_subcommand("ensemble-iterate", "Agreement-feature refinement of a recurrent/conv tagger pair");
  ens->add_option("train", in_path)->required();
  ens->add_option("dev", dev_path)->required();
  ens->add_option("test", test_path)->required();
  ens->add_option("recurrent_model", rec_model_path)->required();
  ens->add_option("conv_model", conv_model_path)->required();
  ens->add_option("output_dir", out_dir, "Receives trace.tsv, recurrent.nn and conv.nn")->required();
  ens->add_option("--max-iters", max_iters)->capture_default_str();
  ens->add_option("--recurrent-epochs", ens_rec.epochs)->capture_default_str();
  ens->add_option("--recurrent-lr", ens_rec.learning_rate)->capture_default_str();
  ens->add_option("--conv-epochs", ens_conv.epochs)->capture_default_str();
  ens->add_option("--conv-lr", ens_conv.learning_rate)->capture_default_str();
  ens->add_option("--seed", ens_rec.seed)->capture_default_str();
  ens->callback([&] {
    action = [&] {
      for (const auto* p : {&in_path, &dev_path, &test_path, &rec_model_path, &conv_model_path}) manifest.input(*p);
      ens_conv.seed = ens_rec.seed;
      ensemble::TaggerPair base{nn::load_model(rec_model_path), nn::load_model(conv_model_path)};
      if (base.recurrent.config.word_layer.kind != nn::WordLayerKind::Birecurrent) {
        throw Error(ErrorKind::Usage, "the first model must have a birecurrent word layer");
      }
      if (base.recurrent.augmentation_dim || base.conv.augmentation_dim) {
        throw Error(ErrorKind::Usage, "base models must not already carry an agreement appendix");
      }
      const auto& tags = base.recurrent.tags;
      auto train = parse_corpus(in_path, tags);
      auto dev = parse_corpus(dev_path, tags);
      auto test = parse_corpus(test_path, tags);
      std::filesystem::create_directories(out_dir);
      const emb::WordVectorTable* vectors = base.recurrent.fallback ? &*base.recurrent.fallback : nullptr;
      auto retrain = ensemble::make_retrainer(base, train, dev, vectors, ens_rec, ens_conv, g.deterministic ? 1 : g.threads);
      auto res = ensemble::iterate_refinement(base, train, dev, test, max_iters, retrain);
      std::ostringstream t;
      ensemble::write_trace(t, res.trace);
      write_text((std::filesystem::path(out_dir) / "trace.tsv").string(), t.str());
      nn::save_model((std::filesystem::path(out_dir) / "recurrent.nn").string(), res.best.recurrent);
      nn::save_model((std::filesystem::path(out_dir) / "conv.nn").string(), res.best.conv);
      manifest.doc["best_iteration"] = res.best_iteration;
      std::cout << t.str() << "best_iteration=" << res.best_iteration << '\n';
    };
  });

  // gradcheck --------------------------------------------------------------
  std::string gc_char = "conv", gc_word = "birecurrent", gc_infer = "chain_crf", gc_corpus;
  bool gc_bn = false;
  uint64_t gc_seed = 1;
  double gc_tol = 1e-3;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of a tiny neural tagger");
  gc->add_option("corpus", gc_corpus, "Tagged UD corpus for the check (first 2 sentences; default: built-in sample)");
  gc->add_option("--char-encoder", gc_char)->capture_default_str();
  gc->add_option("--word-layer", gc_word)->capture_default_str();
  gc->add_option("--inference", gc_infer)->capture_default_str();
  gc->add_flag("--batch-norm", gc_bn);
  gc->add_option("--seed", gc_seed)->capture_default_str();
  gc->add_option("--tolerance", gc_tol)->capture_default_str();
  gc->callback([&] {
    action = [&] {
      TaggedCorpus corpus;
      if (gc_corpus.empty()) {
        std::istringstream sample("ଘର\tNOUN\nଯାଏ\tVERB\n\nସୁନ୍ଦର\tADJ\nଘର\tNOUN\n");
        corpus = parse_corpus_text(sample, tagsets::ud());
      } else {
        manifest.input(gc_corpus);
        corpus = parse_corpus(gc_corpus, tagsets::ud());
      }
      if (corpus.size() > 2) corpus.sentences.resize(2);
      nn::TaggerConfig c;
      if (gc_char == "none") {
        c.char_encoder.reset();
      } else {
        c.char_encoder = nn::CharEncoderConfig{nn::char_encoder_kind(gc_char), 3, 4, 3};
      }
      c.word_layer.kind = nn::word_layer_kind(gc_word);
      c.word_layer.word_hidden_dim = 4;
      c.word_layer.conv_layers = 2;
      c.word_layer.batch_norm = gc_bn;
      c.word_layer.dropout = 0;
      c.inference.kind = nn::inference_kind(gc_infer);
      c.embedding_dim = 3;
      c.seed = gc_seed;
      auto m = nn::build_tagger(tagsets::ud(), c, corpus);
      auto report = nn::gradient_check(m, corpus.sentences);
      bool ok = true;
      for (const auto& t : report.tensors) {
        const double tol = t.name == "crf.transitions" ? std::min(gc_tol, 1e-4) : gc_tol;
        const bool pass = t.max_rel_error < tol;
        ok = ok && pass;
        std::printf("%-20s %6zu  %.3e  %s\n", t.name.c_str(), t.entries, t.max_rel_error, pass ? "ok" : "FAIL");
      }
      manifest.doc["max_rel_error"] = report.max_rel_error();
      if (!ok) throw Error(ErrorKind::NonFinite, "gradient check failed, max relative error " + std::to_string(report.max_rel_error()));
    };
  });

  int code = kOk;
  std::string failure;
  CLI::App* chosen = nullptr;
  try {
    app.parse(argc, argv);
    for (auto* sub : app.get_subcommands()) chosen = sub;
    g.threads = resolve_threads(threads_opt, g.threads);
    if (g.deterministic) g.threads = 1;
    manifest.doc["command"] = chosen->get_name();
    json cfg = resolved_options(chosen);
    for (auto& [k, v] : manifest.doc["config"].items()) cfg[k] = v;
    manifest.doc["config"] = cfg;
    action();
    cfg = resolved_options(chosen);
    for (auto& [k, v] : manifest.doc["config"].items()) cfg[k] = v;
    manifest.doc["config"] = cfg;
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help();
    failure = e.what();
    code = kUsage;
  } catch (const Error& e) {
    std::cerr << "seqtag: " << e.what() << '\n';
    failure = e.what();
    if (is_numeric(e.kind())) {
      code = kNumeric;
    } else if (e.kind() == ErrorKind::Usage || e.kind() == ErrorKind::InvalidConfig ||
               e.kind() == ErrorKind::InvalidSplit) {
      code = kUsage;
    } else {
      code = kData;
    }
  } catch (const std::exception& e) {
    std::cerr << "seqtag: " << e.what() << '\n';
    failure = e.what();
    code = kData;
  }

  if (!manifest.doc.contains("command")) manifest.doc["command"] = chosen ? chosen->get_name() : "";
  manifest.doc["inputs"] = manifest.inputs;
  manifest.doc["version"] = kVersion;
  manifest.doc["threads"] = g.threads;
  manifest.doc["deterministic"] = g.deterministic;
  manifest.doc["exit_code"] = code;
  manifest.doc["status"] = code == kOk ? "ok" : "failed";
  if (!failure.empty()) manifest.doc["error"] = failure;
  manifest.doc["seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  if (manifest.doc.contains("config")) {
    for (const char* key : {"--seed"})
      if (manifest.doc["config"].contains(key)) manifest.doc["seed"] = manifest.doc["config"][key];
  }
  if (!g.manifest_path.empty()) {
    std::ofstream out(g.manifest_path);
    out << manifest.doc.dump(2) << '\n';
  } else {
    std::cerr << manifest.doc.dump() << '\n';
  }
  return code;
}
