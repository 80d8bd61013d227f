// Acceptance checks. Each test prints one PASS/FAIL line with its runtime.

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>

#include "seqtag/crf/model.hpp"
#include "seqtag/embeddings.hpp"
#include "seqtag/ensemble.hpp"
#include "seqtag/eval.hpp"
#include "seqtag/mapping.hpp"
#include "seqtag/nn/tagger.hpp"
#include "support.hpp"
#include "synthetic.hpp"

using namespace seqtag;
using seqtag::testing::brute_force_argmax;
using seqtag::testing::brute_force_log_z;
using seqtag::testing::brute_force_score;
using seqtag::testing::random_crf_instance;
using seqtag::testing::read_file;
using seqtag::testing::rel_error;
using seqtag::testing::TempDir;

namespace {

class Stopwatch {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count(); }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

const Tagset& tiny_tags() {
  static const Tagset t("tiny", {"N", "V", "A", "D", "P"});
  return t;
}

TaggedCorpus tiny_corpus() {
  return seqtag::testing::corpus_from("kati/N tolo/V a/A | mila/V kati/N | su/D lo/P kati/N mila/V", "tiny");
}

nn::TaggerConfig tiny_config(std::optional<nn::CharEncoderKind> chars, nn::WordLayerKind word, nn::InferenceKind head) {
  nn::TaggerConfig c;
  if (chars) {
    c.char_encoder = nn::CharEncoderConfig{*chars, 3, 4, 3};
  } else {
    c.char_encoder.reset();
  }
  c.word_layer.kind = word;
  c.word_layer.word_hidden_dim = 4;
  c.word_layer.conv_layers = 2;
  c.word_layer.dropout = 0.0;
  c.inference.kind = head;
  c.embedding_dim = 3;
  c.seed = 5;
  return c;
}

size_t correct(const TaggedCorpus& gold, const TaggedCorpus& pred, const std::set<std::string>* only, size_t& total) {
  size_t ok = 0;
  total = 0;
  for (size_t i = 0; i < gold.size(); ++i)
    for (size_t t = 0; t < gold.sentences[i].size(); ++t) {
      const auto& g = gold.sentences[i].tokens[t];
      if (only && !only->count(g.form)) continue;
      ++total;
      ok += g.tag == pred.sentences[i].tokens[t].tag;
    }
  return ok;
}

double accuracy_on(const TaggedCorpus& gold, const TaggedCorpus& pred, const std::set<std::string>* only = nullptr) {
  size_t total = 0;
  size_t ok = correct(gold, pred, only, total);
  return total ? static_cast<double>(ok) / static_cast<double>(total) : 0.0;
}

int run_cli(const std::string& args) {
  int status = std::system(("'" SEQTAG_CLI "' " + args + " >/dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Acceptance, Criterion1CrfOracleEquivalence) {
  Stopwatch clock;
  Rng rng(101);
  for (int rep = 0; rep < 50; ++rep) {
    const size_t n = 1 + rng.below(5), k = 1 + rng.below(4);
    auto inst = random_crf_instance(rng, n, k, 2.0);
    EXPECT_LT(rel_error(crf::partition(inst.model, inst.rows), brute_force_log_z(inst.model, inst.rows)), 1e-8)
        << "instance " << rep;
    auto v = crf::viterbi(inst.model, inst.rows);
    EXPECT_EQ(v.path, brute_force_argmax(inst.model, inst.rows)) << "instance " << rep;
    EXPECT_NEAR(v.score, brute_force_score(inst.model, inst.rows, v.path), 1e-12);
  }
  EXPECT_LT(clock.seconds(), 5.0);
}

TEST(Acceptance, Criterion2CrfGradient) {
  Stopwatch clock;
  Rng rng(202);
  const double h = 1e-5;
  double worst = 0;
  for (int rep = 0; rep < 20; ++rep) {
    auto inst = random_crf_instance(rng, 1 + rng.below(5), 1 + rng.below(4));
    auto g = crf::gradient(inst.model, inst.rows, inst.gold);
    for (size_t i = 0; i < inst.model.weights.size(); ++i) {
      auto m = inst.model;
      m.weights[i] += h;
      double up = crf::log_likelihood(m, inst.rows, inst.gold);
      m.weights[i] -= 2 * h;
      double down = crf::log_likelihood(m, inst.rows, inst.gold);
      worst = std::max(worst, rel_error(g[i], (up - down) / (2 * h), seqtag::testing::kCrfGradientFloor));
    }
  }
  std::printf("  max relative error %.3e\n", worst);
  EXPECT_LT(worst, 1e-4);
  EXPECT_LT(clock.seconds(), 10.0);
}

TEST(Acceptance, Criterion3NeuralGradient) {
  Stopwatch clock;
  using nn::CharEncoderKind;
  using nn::InferenceKind;
  using nn::WordLayerKind;
  const std::optional<CharEncoderKind> encoders[] = {CharEncoderKind::Conv, CharEncoderKind::Birecurrent, std::nullopt};
  size_t combos = 0;
  for (auto chars : encoders)
    for (auto head : {InferenceKind::Softmax, InferenceKind::ChainCrf})
      for (auto word : {WordLayerKind::Birecurrent, WordLayerKind::Conv}) {
        auto m = nn::build_tagger(tiny_tags(), tiny_config(chars, word, head), tiny_corpus());
        auto report = nn::gradient_check(m, tiny_corpus().sentences);
        ASSERT_EQ(report.tensors.size(), m.params.size());
        for (const auto& t : report.tensors) {
          const double tol = t.name == "crf.transitions" ? 1e-4 : 1e-3;
          EXPECT_LT(t.max_rel_error, tol) << t.name << " char=" << (chars ? nn::to_string(*chars) : "none")
                                          << " word=" << nn::to_string(word) << " head=" << nn::to_string(head);
        }
        ++combos;
      }
  EXPECT_EQ(combos, 12u);
  EXPECT_LT(clock.seconds(), 60.0);
}

TEST(Acceptance, Criterion4SyntheticEndToEnd) {
  Stopwatch clock;
  auto lang = seqtag::testing::make_suffix_language(1);
  ASSERT_EQ(lang.tags.size(), 17u);
  ASSERT_EQ(lang.train.size(), 200u);
  ASSERT_EQ(lang.dev.size(), 50u);
  ASSERT_EQ(lang.test.size(), 50u);
  const auto unseen = lang.unseen_test_types();
  const double unseen_share = static_cast<double>(unseen.size()) / static_cast<double>(lang.test_types().size());
  EXPECT_NEAR(unseen_share, 0.30, 0.005);
  const auto inputs = lang.test.untagged();

  auto crf_model = crf::train(lang.train, lang.tags, crf::default_templates()).model;
  const double crf_acc = accuracy_on(lang.test, crf::tag_corpus(crf_model, inputs));

  nn::TaggerConfig with_chars;
  with_chars.word_layer.word_hidden_dim = 100;
  with_chars.embedding_dim = 50;
  nn::TaggerConfig without_chars = with_chars;
  without_chars.char_encoder.reset();
  nn::TrainConfig tc = nn::TrainConfig::recurrent();
  tc.learning_rate = 0.05;
  tc.epochs = 30;
  auto fit = [&](const nn::TaggerConfig& c) {
    return nn::train(nn::build_tagger(lang.tags, c, lang.train), lang.train, lang.dev, tc).model;
  };
  const auto rec = nn::tag_corpus(fit(with_chars), inputs);
  const auto plain = nn::tag_corpus(fit(without_chars), inputs);
  const double rec_acc = accuracy_on(lang.test, rec);
  const double rec_unseen = accuracy_on(lang.test, rec, &unseen);
  const double plain_unseen = accuracy_on(lang.test, plain, &unseen);

  std::printf("  unseen types %.1f%%; crf %s; recurrent+char %s (unseen %s); recurrent without char unseen %s\n",
              100 * unseen_share, eval::format_percent(crf_acc).c_str(), eval::format_percent(rec_acc).c_str(),
              eval::format_percent(rec_unseen).c_str(), eval::format_percent(plain_unseen).c_str());
  EXPECT_GE(crf_acc, 0.99);
  EXPECT_GE(rec_acc, 0.99);
  EXPECT_LT(plain_unseen, rec_unseen);
  EXPECT_LT(clock.seconds(), 180.0);
}

TEST(Acceptance, Criterion5TagMapping) {
  const auto builtin = builtin_bis_to_ud();
  TempDir dir;
  std::ostringstream rules;
  save_mapping(rules, builtin);
  auto loaded = load_mapping(dir.write("bis_ud.tsv", rules.str()));
  EXPECT_EQ(loaded.rules().size(), 37u);
  EXPECT_EQ(loaded.rules(), builtin.rules());
  EXPECT_EQ(loaded.source().tags(), tagsets::bis().tags());
  for (const auto& tag : tagsets::bis().tags()) EXPECT_NO_THROW(map_tag(loaded, "w", tag)) << tag;

  // Every source tag several times, in shuffled sentences.
  Rng rng(55);
  TaggedCorpus sample;
  sample.tagset_name = "BIS";
  std::vector<std::string> pool;
  for (int rep = 0; rep < 3; ++rep)
    for (const auto& tag : tagsets::bis().tags()) pool.push_back(tag);
  rng.shuffle(std::span<std::string>(pool));
  for (size_t i = 0; i < pool.size();) {
    Sentence s;
    for (size_t n = 1 + rng.below(6); n > 0 && i < pool.size(); --n, ++i)
      s.tokens.push_back(Token{"ଶବ୍ଦ" + std::to_string(i), pool[i]});
    sample.sentences.push_back(std::move(s));
  }
  auto mapped = map_corpus(loaded, sample);
  EXPECT_EQ(mapped.token_count(), sample.token_count());
  ASSERT_EQ(mapped.size(), sample.size());
  std::set<std::string> image;
  for (size_t i = 0; i < mapped.size(); ++i) {
    ASSERT_EQ(mapped.sentences[i].size(), sample.sentences[i].size());
    for (const auto& t : mapped.sentences[i].tokens) image.insert(*t.tag);
  }
  const auto& ud = tagsets::ud().tags();
  EXPECT_EQ(image, std::set<std::string>(ud.begin(), ud.end()));
}

TEST(Acceptance, Criterion6ErrorRateConsistency) {
  // Denominators consistent with five reference (instances, rate) rows.
  const std::vector<std::pair<size_t, double>> rows{{890, 12.42}, {850, 11.86}, {760, 10.61}, {650, 9.07}, {541, 7.55}};
  std::vector<size_t> denominators;
  for (size_t e = 1000; e < 20000; ++e) {
    bool ok = true;
    for (auto [n, rate] : rows) ok = ok && std::abs(100.0 * static_cast<double>(n) / static_cast<double>(e) - rate) <= 0.005 + 1e-12;
    if (ok) denominators.push_back(e);
  }
  EXPECT_EQ(denominators, (std::vector<size_t>{7164, 7165, 7166}));
  for (auto [n, rate] : rows) EXPECT_DOUBLE_EQ(eval::error_rate(n, 7165), rate);

  Rng rng(66);
  for (int trial = 0; trial < 100; ++trial) {
    const Tagset& tags = trial % 2 ? tagsets::ud() : tiny_tags();
    eval::ConfusionMatrix cm(tags);
    for (size_t g = 0; g < tags.size(); ++g)
      for (size_t p = 0; p < tags.size(); ++p) cm.at(g, p) = rng.below(g == p ? 5000 : 400);
    auto cells = eval::top_misclassifications(cm, tags.size() * tags.size());
    double exact = 0, rounded = 0;
    for (const auto& c : cells) exact += c.exact_rate, rounded += c.error_rate;
    EXPECT_NEAR(exact, 100.0, 0.05);
    // Two-decimal rounding contributes at most 0.005 per cell.
    EXPECT_LE(std::abs(rounded - 100.0), 0.005 * static_cast<double>(cells.size()) + 1e-9);
    if (cells.size() <= 10) {
      EXPECT_NEAR(rounded, 100.0, 0.05);
    }
  }
}

TEST(Acceptance, Criterion7EnsembleMechanics) {
  emb::WordVectorTable table(200);
  Rng rng(77);
  for (const char* w : {"ଘର", "ଯାଏ", "ସେ"}) {
    std::vector<double> v(200);
    for (auto& x : v) x = rng.uniform(-1, 1);
    table.add(w, v);
  }
  nn::TypeAnnotation ann{17, {{"ଘର", 0}}};
  EXPECT_EQ(ensemble::augment_embeddings(table, ann, tagsets::ud()).dim(), 217u);

  seqtag::testing::SuffixLanguageOptions small;
  small.train_sentences = 30;
  small.dev_sentences = 10;
  small.test_sentences = 10;
  auto lang = seqtag::testing::make_suffix_language(7, small);
  nn::TaggerConfig c = tiny_config(nn::CharEncoderKind::Conv, nn::WordLayerKind::Birecurrent, nn::InferenceKind::Softmax);
  auto rec_cfg = c;
  auto conv_cfg = c;
  conv_cfg.word_layer.kind = nn::WordLayerKind::Conv;
  auto augmented = nn::build_tagger(lang.tags, rec_cfg, lang.train, &table, &ann);
  auto plain = nn::build_tagger(lang.tags, rec_cfg, lang.train, &table);
  EXPECT_EQ(plain.embedding_dim, 200u);
  EXPECT_EQ(augmented.embedding_dim + augmented.augmentation_dim, 217u);
  EXPECT_EQ(augmented.input_dim(), plain.input_dim() + 17);

  nn::TrainConfig tc;
  tc.epochs = 2;
  tc.learning_rate = 0.1;
  ensemble::TaggerPair base{nn::train(nn::build_tagger(lang.tags, rec_cfg, lang.train), lang.train, lang.dev, tc).model,
                            nn::train(nn::build_tagger(lang.tags, conv_cfg, lang.train), lang.train, lang.dev, tc).model};
  for (size_t max_iters : {1u, 3u}) {
    size_t calls = 0;
    auto inner = ensemble::make_retrainer(base, lang.train, lang.dev, nullptr, tc, tc);
    ensemble::Retrainer counted = [&](const nn::TypeAnnotation& a) {
      ++calls;
      return inner(a);
    };
    auto res = ensemble::iterate_refinement(base, lang.train, lang.dev, lang.test, max_iters, counted);
    EXPECT_GE(calls, 1u);
    EXPECT_LE(calls, max_iters);
    EXPECT_EQ(res.trace.size(), calls + 1);
    EXPECT_LE(res.best_iteration, calls);
  }

  // Annotations from gold-scrambled copies match those from the original.
  const auto reference = ensemble::annotate_types(lang.train, ensemble::compute_agreement(base.recurrent, base.conv, lang.train), 17);
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    Rng scramble(seed);
    TaggedCorpus noisy = lang.train;
    for (auto& s : noisy.sentences)
      for (auto& t : s.tokens) t.tag = lang.tags.tag(scramble.below(lang.tags.size()));
    auto agr = ensemble::compute_agreement(base.recurrent, base.conv, noisy);
    EXPECT_EQ(ensemble::annotate_types(noisy, agr, 17), reference) << "seed " << seed;
  }
}

TEST(Acceptance, Criterion8Determinism) {
  auto lang = seqtag::testing::make_suffix_language(3);
  const auto inputs = lang.test.untagged();

  crf::CrfTrainOptions co;
  co.deterministic = true;
  co.threads = 4;
  auto a = crf::train(lang.train, lang.tags, crf::default_templates(), co).model;
  auto b = crf::train(lang.train, lang.tags, crf::default_templates(), co).model;
  EXPECT_EQ(a.weights, b.weights);
  EXPECT_EQ(crf::tag_corpus(a, inputs), crf::tag_corpus(b, inputs));

  nn::TaggerConfig mc = tiny_config(nn::CharEncoderKind::Birecurrent, nn::WordLayerKind::Birecurrent, nn::InferenceKind::ChainCrf);
  mc.word_layer.dropout = 0.3;
  nn::TrainConfig tc;
  tc.epochs = 2;
  auto na = nn::train(nn::build_tagger(lang.tags, mc, lang.train), lang.train, lang.dev, tc).model;
  auto nb = nn::train(nn::build_tagger(lang.tags, mc, lang.train), lang.train, lang.dev, tc).model;
  for (size_t i = 0; i < na.params.size(); ++i) EXPECT_EQ(na.params[i].value, nb.params[i].value) << na.params[i].name;
  EXPECT_EQ(nn::tag_corpus(na, inputs), nn::tag_corpus(nb, inputs));

  std::vector<std::vector<std::string>> sentences;
  for (const auto& s : lang.train.sentences) sentences.push_back(s.forms());
  emb::SkipgramConfig sc;
  sc.dim = 8;
  sc.epochs = 1;
  sc.subwords.buckets = 1000;
  EXPECT_TRUE(emb::train_skipgram(sentences, sc).table == emb::train_skipgram(sentences, sc).table);

  // Same through the command line: byte-identical model files.
  TempDir dir;
  auto train = dir.file("train.col"), dev = dir.file("dev.col");
  save_corpus(train, lang.train);
  save_corpus(dev, lang.dev);
  for (int run = 0; run < 2; ++run) {
    const std::string r = std::to_string(run);
    ASSERT_EQ(run_cli("--deterministic --threads 4 train-crf " + train + " " + dir.file("m" + r + ".crf")), 0);
    ASSERT_EQ(run_cli("--deterministic train-neural --seed 9 --epochs 1 --embedding-dim 4 --char-embedding-dim 3 "
                      "--char-hidden-dim 4 --word-hidden-dim 4 " +
                      train + " " + dev + " " + dir.file("m" + r + ".nn")),
              0);
  }
  EXPECT_EQ(read_file(dir.file("m0.crf")), read_file(dir.file("m1.crf")));
  EXPECT_EQ(read_file(dir.file("m0.nn")), read_file(dir.file("m1.nn")));
}

TEST(Acceptance, Criterion9FormatRoundTrips) {
  auto lang = seqtag::testing::make_suffix_language(4);

  // Corpus.
  std::istringstream corpus_in(serialize_corpus(lang.train));
  auto corpus_back = parse_corpus_text(corpus_in, lang.tags, ParseMode::Strict, "mem");
  EXPECT_EQ(corpus_back, lang.train);
  EXPECT_EQ(serialize_corpus(corpus_back), serialize_corpus(lang.train));

  // Templates.
  auto templates = crf::default_templates();
  EXPECT_EQ(crf::parse_templates(crf::format_templates(templates)), templates);

  // Vectors: text at the written precision, binary exactly.
  std::vector<std::vector<std::string>> sentences;
  for (const auto& s : lang.train.sentences) sentences.push_back(s.forms());
  emb::SkipgramConfig sc;
  sc.dim = 6;
  sc.epochs = 1;
  sc.subwords.buckets = 500;
  auto table = emb::train_skipgram(sentences, sc).table;
  std::stringstream text;
  emb::save_text_vectors(text, table);
  auto text_back = emb::load_text_vectors(text);
  ASSERT_EQ(text_back.size(), table.size());
  for (size_t i = 0; i < table.size(); ++i)
    for (size_t d = 0; d < table.dim(); ++d) EXPECT_LT(rel_error(text_back.row(i)[d], table.row(i)[d], 1e-300), 1e-8);
  std::stringstream binary;
  emb::save_binary_vectors(binary, table);
  EXPECT_TRUE(emb::load_binary_vectors(binary) == table);

  // CRF model.
  auto crf_model = crf::train(lang.train, lang.tags, crf::default_templates()).model;
  std::stringstream crf_file;
  crf::save_model(crf_file, crf_model);
  const std::string crf_text = crf_file.str();
  auto crf_back = crf::load_model(crf_file);
  EXPECT_EQ(crf_back.weights, crf_model.weights);
  EXPECT_EQ(crf_back.vocabulary, crf_model.vocabulary);
  std::stringstream crf_again;
  crf::save_model(crf_again, crf_back);
  EXPECT_EQ(crf_again.str(), crf_text);

  // Neural model, including a fallback table and an annotation.
  nn::TypeAnnotation ann{17, {{lang.train.sentences[0].tokens[0].form, 2}}};
  auto nn_model = nn::build_tagger(lang.tags,
                                   tiny_config(nn::CharEncoderKind::Conv, nn::WordLayerKind::Conv, nn::InferenceKind::ChainCrf),
                                   lang.train, nullptr, &ann);
  std::stringstream nn_file;
  nn::save_model(nn_file, nn_model);
  const std::string nn_text = nn_file.str();
  auto nn_back = nn::load_model(nn_file);
  ASSERT_EQ(nn_back.params.size(), nn_model.params.size());
  for (size_t i = 0; i < nn_model.params.size(); ++i) EXPECT_EQ(nn_back.params[i].value, nn_model.params[i].value);
  EXPECT_EQ(nn_back.config, nn_model.config);
  EXPECT_EQ(nn_back.annotation, nn_model.annotation);
  std::stringstream nn_again;
  nn::save_model(nn_again, nn_back);
  EXPECT_EQ(nn_again.str(), nn_text);
}

namespace {

class CriterionPrinter : public ::testing::EmptyTestEventListener {
 public:
  void OnTestEnd(const ::testing::TestInfo& info) override {
    static const std::map<std::string, std::string> titles = {
        {"Criterion1CrfOracleEquivalence", "1 CRF oracle equivalence"},
        {"Criterion2CrfGradient", "2 CRF gradient"},
        {"Criterion3NeuralGradient", "3 neural gradient"},
        {"Criterion4SyntheticEndToEnd", "4 synthetic end-to-end"},
        {"Criterion5TagMapping", "5 tag mapping"},
        {"Criterion6ErrorRateConsistency", "6 error-rate consistency"},
        {"Criterion7EnsembleMechanics", "7 ensemble mechanics"},
        {"Criterion8Determinism", "8 determinism"},
        {"Criterion9FormatRoundTrips", "9 format round-trips"},
    };
    auto it = titles.find(info.name());
    const std::string title = it == titles.end() ? info.name() : it->second;
    const auto* r = info.result();
    lines_.push_back(std::string(r->Passed() ? "PASS" : "FAIL") + "  criterion " + title + " (" +
                     std::to_string(r->elapsed_time() / 1000.0).substr(0, 5) + " s)");
    std::printf("%s\n", lines_.back().c_str());
    std::fflush(stdout);
  }

  void OnTestProgramEnd(const ::testing::UnitTest&) override {
    std::printf("\nacceptance summary\n");
    for (const auto& l : lines_) std::printf("%s\n", l.c_str());
  }

 private:
  std::vector<std::string> lines_;
};

}  // namespace

int main(int argc, char** argv) {
  ::testing::InitGoogleTest(&argc, argv);
  ::testing::UnitTest::GetInstance()->listeners().Append(new CriterionPrinter);
  return RUN_ALL_TESTS();
}
