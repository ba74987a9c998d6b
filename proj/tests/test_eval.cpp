#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "mcqa/eval.hpp"
#include "mcqa/sha256.hpp"
#include "testutil.hpp"

using namespace mcqa;

namespace {

Vocabulary vocab_of(const std::vector<MCExample>& data) {
  std::vector<std::string> texts;
  for (auto& ex : data) {
    texts.push_back(ex.context);
    texts.push_back(ex.question);
    for (auto& c : ex.choices) texts.push_back(c);
  }
  return Vocabulary::build(texts, 1);
}

ModelConfig small_config(std::size_t vocab, std::size_t d = 16, std::uint64_t seed = 3) {
  ModelConfig cfg;
  cfg.d = d;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.max_len = 24;
  cfg.vocab_size = vocab;
  cfg.dropout = 0.0;
  cfg.seed = seed;
  return cfg;
}

std::vector<MCExample> overlap_data(std::size_t n, std::uint64_t seed = 7, bool typed = false) {
  SyntheticTaskSpec spec;
  spec.rule = SynthRule::token_overlap;
  spec.n = n;
  spec.vocab_words = 40;
  spec.seed = seed;
  spec.typed_questions = typed;
  return gen_synthetic(spec);
}

}  // namespace

TEST_CASE("question classification with the shipped rule file") {
  auto rules = QuestionTypeRules::load(default_question_types_path());
  CHECK(rules.size() == 6);

  CHECK(rules.classify("What will Tracy want to do next?") == QuestionType::wants);
  CHECK(rules.classify("How would Riley feel afterwards?") == QuestionType::reactions);
  CHECK(rules.classify("How would you describe Sydney?") == QuestionType::descriptions);
  CHECK(rules.classify("Why did Kai do this?") == QuestionType::motivations);
  CHECK(rules.classify("What does Jordan need to do before this?") == QuestionType::needs);
  CHECK(rules.classify("What will happen to Casey?") == QuestionType::effects);

  CHECK(!rules.classify("").has_value());
  CHECK(!rules.classify("a completely unrelated sentence").has_value());

  // priority order: "want" outranks the later "next" rule
  CHECK(rules.classify("want next") == QuestionType::wants);
  // deterministic
  for (int i = 0; i < 5; ++i)
    CHECK(rules.classify("what will happen") == QuestionType::effects);

  CHECK(question_type_from_name("needs") == QuestionType::needs);
  CHECK_THROWS_AS(question_type_from_name("bogus"), DataError);
  CHECK_THROWS_AS(QuestionTypeRules::load("no_such_rules.txt"), DataError);
}

TEST_CASE("accuracy: forced gold, chance level, and manual tally") {
  std::vector<Prediction> perfect;
  for (int i = 0; i < 17; ++i)
    perfect.push_back({"p" + std::to_string(i), std::size_t(i % 3), std::size_t(i % 3), {}});
  CHECK(accuracy_of(perfect) == 1.0);

  std::mt19937_64 rng(23);
  std::vector<Prediction> random_preds;
  for (int i = 0; i < 10000; ++i)
    random_preds.push_back({"r", rng() % 3, rng() % 3, {}});
  CHECK(std::abs(accuracy_of(random_preds) - 1.0 / 3.0) < 0.02);

  CHECK_THROWS_AS(accuracy_of({}), TrainError);

  // model accuracy equals a by-hand tally over 10 examples
  auto data = overlap_data(10);
  auto vocab = vocab_of(data);
  TransformerModel model(small_config(vocab.size()));
  McHead head = McHead::init(16, 4);
  std::size_t hits = 0;
  for (auto& ex : data)
    if (choice_scores(ex, model, head, FormatKind::standard, vocab).predicted() == ex.gold) ++hits;
  CHECK(accuracy(model, head, data, FormatKind::standard, vocab) ==
        doctest::Approx(hits / 10.0).epsilon(1e-12));
}

TEST_CASE("masking_eval: layout, no-op filter, and checkpoint invariance") {
  auto data = overlap_data(12);
  auto vocab = vocab_of(data);
  TransformerModel model(small_config(vocab.size()));
  McHead head = McHead::init(16, 4);
  LmHead lm = LmHead::init(vocab.size());
  Lexicon lex = Lexicon::load(std::string(MCQA_DATA_DIR) + "/content_lexicon.txt");

  auto params = detail::all_params(model, head, lm);
  const auto before = Checkpoint::from_params({}, params);
  const std::string hash_before = Sha256::of_bytes(before.values.data(),
                                                   before.values.size() * sizeof(double));

  auto table = masking_eval(model, head, data, lex, FormatKind::standard, vocab);
  for (std::size_t s = 0; s < 3; ++s)
    for (std::size_t m = 0; m < 3; ++m) {
      CHECK(table.cells[s][m] >= 0.0);
      CHECK(table.cells[s][m] <= 1.0);
    }

  // masking is inference-only: parameters are untouched
  const auto after = Checkpoint::from_params({}, params);
  CHECK(Sha256::of_bytes(after.values.data(), after.values.size() * sizeof(double)) ==
        hash_before);

  // an empty lexicon makes filter a no-op, reproducing Full bit-exactly
  auto noop = masking_eval(model, head, data, Lexicon{}, FormatKind::standard, vocab);
  CHECK(noop.cells[0][2] == noop.full);
  CHECK(noop.cells[1][2] == noop.full);
  CHECK(noop.cells[2][2] == noop.full);

  const std::string text = table.render();
  CHECK(text.find("Pad") != std::string::npos);
  CHECK(text.find("Delete") != std::string::npos);
  CHECK(text.find("Filter") != std::string::npos);
  CHECK(text.find("- Both") != std::string::npos);
  CHECK(text.find("Full") != std::string::npos);
  // column order matches: Pad before Delete before Filter
  CHECK(text.find("Pad") < text.find("Delete"));
  CHECK(text.find("Delete") < text.find("Filter"));

  auto j = table.to_json();
  CHECK(j.at("table").at("- Context").contains("Pad"));
}

TEST_CASE("type transfer: disjoint splits, generalizing rule, absent cells") {
  auto rules = QuestionTypeRules::load(default_question_types_path());
  SyntheticTaskSpec spec;
  spec.rule = SynthRule::copy_last;
  spec.n = 576;  // 96 per type: 48 train / 48 eval after the split
  spec.vocab_words = 10;  // small pool so held-out slices reuse seen words
  spec.seed = 5;
  spec.typed_questions = true;
  auto data = gen_synthetic(spec);
  auto vocab = vocab_of(data);

  auto factory = [&](std::uint64_t seed) {
    return std::make_tuple(TransformerModel(small_config(vocab.size(), 32, seed)),
                           McHead::init(32, seed + 1), LmHead::init(vocab.size()));
  };
  TrainConfig cfg;
  cfg.lr = 1e-3;
  cfg.per_device = 8;
  cfg.epochs = 250;
  cfg.seed = 11;
  cfg.lm_loss = false;

  auto mat = type_transfer_matrix(data, rules, factory, FormatKind::standard, vocab, cfg);
  CHECK(mat.unclassified == 0);
  for (std::size_t t = 0; t < kNumQuestionTypes; ++t) {
    CHECK(mat.train_sizes[t] == 48);
    CHECK(mat.eval_sizes[t] == 48);
  }
  // the copy-last rule is type-independent, so training on any one type
  // transfers to all the others
  for (std::size_t i = 0; i < kNumQuestionTypes; ++i)
    for (std::size_t j = 0; j < kNumQuestionTypes; ++j) {
      REQUIRE(mat.present[i][j]);
      CHECK(mat.cells[i][j] > 1.0 / 3.0);
    }
  CHECK(mat.render().find("wants") != std::string::npos);
  CHECK(mat.to_json().at("matrix").contains("effects"));

  // a type with no examples leaves its row and column absent
  std::vector<MCExample> partial;
  for (auto& ex : data)
    if (rules.classify(ex.question) != QuestionType::wants) partial.push_back(ex);
  TrainConfig quick = cfg;
  quick.epochs = 1;
  auto mat2 = type_transfer_matrix(partial, rules, factory, FormatKind::standard, vocab, quick);
  const auto w = static_cast<std::size_t>(QuestionType::wants);
  for (std::size_t j = 0; j < kNumQuestionTypes; ++j) {
    CHECK(!mat2.present[w][j]);
    CHECK(!mat2.present[j][w]);
  }
  CHECK(mat2.render().find("absent") != std::string::npos);
}

TEST_CASE("task transfer: provenance guard and chance baseline") {
  auto target = overlap_data(12, 31);
  auto vocab = vocab_of(target);
  TransformerModel model(small_config(vocab.size()));
  McHead head = McHead::init(16, 4);
  LmHead lm = LmHead::init(vocab.size());
  auto params = detail::all_params(model, head, lm);

  auto no_provenance = Checkpoint::from_params({{"stage", 1}}, params);
  CHECK_THROWS_AS(
      task_transfer(no_provenance, model, head, lm, target, FormatKind::standard, vocab),
      TrainError);

  auto leaked = Checkpoint::from_params(
      {{kTrainedTasksKey, {"cosmos_qa", "social_iqa"}}}, params);
  CHECK_THROWS_AS(task_transfer(leaked, model, head, lm, target, FormatKind::standard, vocab),
                  TrainError);

  auto clean = Checkpoint::from_params({{kTrainedTasksKey, {"cosmos_qa", "winogrande"}}}, params);
  auto res = task_transfer(clean, model, head, lm, target, FormatKind::standard, vocab);
  CHECK(res.chance == doctest::Approx(1.0 / 3.0));
  CHECK(res.accuracy >= 0.0);
  CHECK(res.accuracy <= 1.0);
  CHECK(res.source_tasks == std::vector<std::string>{"cosmos_qa", "winogrande"});
}

TEST_CASE("run report serialization and audit trail") {
  auto data = overlap_data(6, 13);
  auto vocab = vocab_of(data);
  TransformerModel model(small_config(vocab.size()));
  McHead head = McHead::init(16, 4);

  RunReport report;
  report.predictions = predict_all(model, head, data, FormatKind::standard, vocab);
  report.overall_accuracy = accuracy_of(report.predictions);
  report.metadata = {{"seed", 3}, {"dataset_hash", "x"}};

  // every report cell is recomputable from the persisted predictions
  CHECK(report.overall_accuracy == accuracy_of(report.predictions));

  auto j = report.to_json();
  CHECK(j.at("overall_accuracy") == report.overall_accuracy);
  CHECK(j.at("metadata").at("seed") == 3);
  CHECK(!j.contains("masking"));

  const std::string jpath = "eval_report_test.json";
  const std::string ppath = "eval_preds_test.tsv";
  report.save(jpath, ppath);
  std::ifstream is(jpath);
  auto parsed = nlohmann::json::parse(is);
  CHECK(parsed.at("overall_accuracy") == report.overall_accuracy);

  std::ifstream ps(ppath);
  std::string line;
  std::getline(ps, line);
  CHECK(line == "id\tgold\tpredicted\tprobabilities");
  std::size_t rows = 0;
  while (std::getline(ps, line))
    if (!line.empty()) ++rows;
  CHECK(rows == data.size());
  std::remove(jpath.c_str());
  std::remove(ppath.c_str());

  CHECK(report.render().find("accuracy") != std::string::npos);
}
