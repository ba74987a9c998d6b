#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>

#include "mcqa/run.hpp"
#include "mcqa/synth.hpp"
#include "testutil.hpp"

using namespace mcqa;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int exit_code;
  std::string out;
};

// run the built binary with stdout+stderr captured
CliResult run_cli(const std::string& args) {
  const std::string capture = "cli_capture.txt";
  const std::string cmd = std::string(MCQA_CLI_PATH) + " " + args + " > " + capture + " 2>&1";
  const int status = std::system(cmd.c_str());
  std::ifstream is(capture);
  std::stringstream ss;
  ss << is.rdbuf();
  return {WEXITSTATUS(status), ss.str()};
}

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE(is.good());
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

struct ScratchDir {
  std::string path;
  explicit ScratchDir(std::string p) : path(std::move(p)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~ScratchDir() { fs::remove_all(path); }
  std::string file(const std::string& rel) const { return path + "/" + rel; }
};

std::set<std::string> words_of(const std::string& text) {
  auto v = split_words(text);
  return {v.begin(), v.end()};
}

bool overlaps(const std::string& a, const std::string& b) {
  auto wa = words_of(a);
  for (auto& w : words_of(b))
    if (wa.count(w)) return true;
  return false;
}

}  // namespace

TEST_CASE("KVConfig: parsing, precedence, and errors") {
  ScratchDir dir("cli_kv_tmp");
  atomic_write_text(dir.file("a.cfg"),
                    "# comment\nlr = 1e-3\nepochs=7\n  d =  32  # trailing\n\n");
  auto kv = KVConfig::load(dir.file("a.cfg"));
  CHECK(kv.get_double("lr", 0.0) == 1e-3);
  CHECK(kv.get_size("epochs", 0) == 7);
  CHECK(kv.get_size("d", 0) == 32);
  CHECK(!kv.has("missing"));
  CHECK(kv.get("missing", "fallback") == "fallback");

  // flags win over file values
  KVConfig flags;
  flags.set("lr", "5e-4");
  flags.set("seed", "9");
  kv.merge(flags);
  CHECK(kv.get_double("lr", 0.0) == 5e-4);
  CHECK(kv.get_size("seed", 0) == 9);
  CHECK(kv.get_size("epochs", 0) == 7);

  kv.set("flag", "true");
  CHECK(kv.get_bool("flag", false));
  kv.set("flag", "0");
  CHECK(!kv.get_bool("flag", true));
  kv.set("flag", "maybe");
  CHECK_THROWS_AS(kv.get_bool("flag", false), RunError);

  atomic_write_text(dir.file("bad.cfg"), "lr = 1\nno equals sign here\n");
  try {
    KVConfig::load(dir.file("bad.cfg"));
    FAIL("expected RunError");
  } catch (const RunError& e) {
    CHECK(std::string(e.what()).find(":2:") != std::string::npos);
  }
  CHECK_THROWS_AS(KVConfig::load("no_such.cfg"), RunError);

  auto j = kv.to_json();
  CHECK(j.at("epochs") == "7");
}

TEST_CASE("RunDirectory: lock conflict, manifest hashes, unlock") {
  ScratchDir dir("cli_rd_tmp");
  const std::string run = dir.file("run");
  {
    RunDirectory rd(run);
    CHECK(fs::exists(run + "/lock"));
    // a second writer is refused while the lock is held
    CHECK_THROWS_AS(RunDirectory{run}, RunError);

    rd.write_config({{"command", "test"}});
    rd.write_text("note.txt", "hello\n");
    const std::string manifest = slurp(run + "/manifest.txt");
    // "sha256  relative-path" lines, recomputable from the files on disk
    std::istringstream is(manifest);
    std::string line;
    std::size_t rows = 0;
    while (std::getline(is, line)) {
      ++rows;
      REQUIRE(line.size() > 66);
      REQUIRE(line.substr(64, 2) == "  ");
      const std::string hash = line.substr(0, 64);
      const std::string rel = line.substr(66);
      CHECK(Sha256::of_file(run + "/" + rel) == hash);
    }
    CHECK(rows == 2);
  }
  // RAII unlock: the directory is reusable after the run ends
  CHECK(!fs::exists(run + "/lock"));
  RunDirectory again(run);
}

TEST_CASE("ModelBundle: self-contained round-trip") {
  ScratchDir dir("cli_mb_tmp");
  SyntheticTaskSpec spec;
  spec.n = 6;
  auto data = gen_synthetic(spec);
  std::vector<std::string> texts;
  for (auto& ex : data) {
    texts.push_back(ex.context);
    texts.push_back(ex.question);
    for (auto& c : ex.choices) texts.push_back(c);
  }
  auto vocab = Vocabulary::build(texts, 1);

  ModelConfig cfg;
  cfg.d = 16;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.max_len = 24;
  cfg.vocab_size = vocab.size();
  cfg.seed = 5;
  ModelBundle bundle(cfg, vocab, FormatKind::standard, 6);
  bundle.trained_tasks = {"social_iqa"};
  bundle.save(dir.file("m.ckpt"));

  auto loaded = ModelBundle::load(dir.file("m.ckpt"));
  CHECK(loaded.format == FormatKind::standard);
  CHECK(loaded.trained_tasks == std::vector<std::string>{"social_iqa"});
  CHECK(loaded.vocab.size() == vocab.size());
  auto a = bundle.params();
  auto b = loaded.params();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].first == b[i].first);
    CHECK(a[i].second.data() == b[i].second.data());
  }
  // predictions from the reloaded bundle are bit-identical
  for (auto& ex : data)
    CHECK(choice_scores(ex, bundle.model, bundle.head, bundle.format, bundle.vocab).predicted() ==
          choice_scores(ex, loaded.model, loaded.head, loaded.format, loaded.vocab).predicted());
}

TEST_CASE("prediction TSV round-trip and validation") {
  ScratchDir dir("cli_tsv_tmp");
  std::vector<Prediction> preds = {{"a", 0, 1, {0.2, 0.5, 0.3}}, {"b", 2, 2, {0.1, 0.1, 0.8}}};
  save_predictions_tsv(preds, dir.file("p.tsv"));
  auto back = load_predictions_tsv(dir.file("p.tsv"));
  REQUIRE(back.size() == 2);
  CHECK(back[0].id == "a");
  CHECK(back[0].gold == 0);
  CHECK(back[0].predicted == 1);
  REQUIRE(back[1].probs.size() == 3);
  CHECK(back[1].probs[2] == doctest::Approx(0.8).epsilon(1e-12));

  atomic_write_text(dir.file("bad.tsv"), "wrong\theader\n");
  CHECK_THROWS_AS(load_predictions_tsv(dir.file("bad.tsv")), DataError);
  CHECK_THROWS_AS(load_predictions_tsv("no_such.tsv"), DataError);
}

TEST_CASE("cli: usage errors exit 2, help exits 0") {
  CHECK(run_cli("no-such-subcommand").exit_code == 2);
  CHECK(run_cli("gen-synth --bogus-flag x --out o.jsonl").exit_code == 2);
  CHECK(run_cli("").exit_code == 2);  // a subcommand is required
  CHECK(run_cli("--help").exit_code == 0);
  CHECK(run_cli("train --help").exit_code == 0);
}

TEST_CASE("cli gen-synth: determinism, balance, and every rule holds") {
  ScratchDir dir("cli_gen_tmp");
  auto r1 = run_cli("gen-synth --rule token-overlap --n 480 --choices 3 --vocab-words 40"
                    " --seed 11 --out " + dir.file("a.jsonl"));
  REQUIRE(r1.exit_code == 0);
  auto r2 = run_cli("gen-synth --rule token-overlap --n 480 --choices 3 --vocab-words 40"
                    " --seed 11 --out " + dir.file("b.jsonl"));
  REQUIRE(r2.exit_code == 0);
  // same seed, byte-identical file
  CHECK(slurp(dir.file("a.jsonl")) == slurp(dir.file("b.jsonl")));

  auto data = load_jsonl(dir.file("a.jsonl"));
  REQUIRE(data.size() == 480);
  std::array<std::size_t, 3> hist{};
  for (auto& ex : data) {
    ++hist[ex.gold];
    // token-overlap: only the gold choice shares a token with the context
    for (std::size_t j = 0; j < 3; ++j)
      CHECK(overlaps(ex.choices[j], ex.context) == (j == ex.gold));
  }
  CHECK(hist[0] == 160);
  CHECK(hist[1] == 160);
  CHECK(hist[2] == 160);

  REQUIRE(run_cli("gen-synth --rule copy-last --n 90 --choices 3 --vocab-words 12 --seed 3"
                  " --out " + dir.file("cl.jsonl")).exit_code == 0);
  for (auto& ex : load_jsonl(dir.file("cl.jsonl"))) {
    auto ctx = split_words(ex.context);
    CHECK(ex.choices[ex.gold] == ctx.back());
    // every distractor also overlaps the context or is fresh; none equals the
    // last context word
    for (std::size_t j = 0; j < ex.choices.size(); ++j)
      if (j != ex.gold) CHECK(ex.choices[j] != ctx.back());
  }

  REQUIRE(run_cli("gen-synth --rule negation-flip --n 40 --choices 2 --vocab-words 12 --seed 4"
                  " --out " + dir.file("nf.jsonl")).exit_code == 0);
  for (auto& ex : load_jsonl(dir.file("nf.jsonl"))) {
    REQUIRE(ex.choices.size() == 2);
    CHECK(ex.context.find('_') != std::string::npos);
    const bool negated = words_of(ex.context).count("not") != 0;
    // the in-context choice wins unless the context is negated
    CHECK(overlaps(ex.choices[ex.gold], ex.context) == !negated);
  }

  REQUIRE(run_cli("gen-synth --rule joint-overlap --n 60 --choices 3 --vocab-words 20 --seed 5"
                  " --out " + dir.file("jo.jsonl")).exit_code == 0);
  for (auto& ex : load_jsonl(dir.file("jo.jsonl"))) {
    for (std::size_t j = 0; j < ex.choices.size(); ++j) {
      const bool both = overlaps(ex.choices[j], ex.context) && overlaps(ex.choices[j], ex.question);
      CHECK(both == (j == ex.gold));
    }
  }

  // infeasible spec is a runtime failure with a one-line diagnostic
  auto bad = run_cli("gen-synth --rule token-overlap --n 5 --choices 3 --vocab-words 4"
                     " --out " + dir.file("x.jsonl"));
  CHECK(bad.exit_code == 1);
  CHECK(bad.out.find("error:") != std::string::npos);
  CHECK(std::count(bad.out.begin(), bad.out.end(), '\n') == 1);
}

TEST_CASE("cli train: run directory contents, manifest, eval agreement") {
  ScratchDir dir("cli_train_tmp");
  REQUIRE(run_cli("gen-synth --rule copy-last --n 24 --choices 3 --vocab-words 10 --seed 7"
                  " --out " + dir.file("train.jsonl")).exit_code == 0);

  atomic_write_text(dir.file("base.cfg"), "lr = 1e-2\nepochs = 2\n");
  const std::string run = dir.file("run");
  auto r = run_cli("train --config " + dir.file("base.cfg") +
                   " --data " + dir.file("train.jsonl") + " --dev " + dir.file("train.jsonl") +
                   " --run-dir " + run + " --lr 2e-3 --per-device 8 --warmup 0 --lm-loss 0"
                   " --d 16 --seed 3");
  REQUIRE(r.exit_code == 0);
  CHECK(r.out.find("dev accuracy:") != std::string::npos);

  for (const char* f : {"config.json", "model.ckpt", "loss_curve.tsv", "manifest.txt",
                        "report.json", "predictions.tsv"})
    CHECK(fs::exists(run + "/" + std::string(f)));
  CHECK(!fs::exists(run + "/lock"));

  // the snapshot records the merged config, flag value winning over the file
  std::ifstream cs(run + "/config.json");
  auto cj = nlohmann::json::parse(cs);
  CHECK(cj.at("config").at("lr") == "2e-3");
  CHECK(cj.at("config").at("epochs") == "2");
  CHECK(cj.at("command") == "train");
  CHECK(cj.at("data_sha256") == Sha256::of_file(dir.file("train.jsonl")));

  // every manifest hash is recomputable from disk
  std::istringstream ms(slurp(run + "/manifest.txt"));
  std::string line;
  std::size_t rows = 0;
  while (std::getline(ms, line)) {
    ++rows;
    CHECK(Sha256::of_file(run + "/" + line.substr(66)) == line.substr(0, 64));
  }
  CHECK(rows >= 4);

  // loss curve header and shape
  std::istringstream ls(slurp(run + "/loss_curve.tsv"));
  std::getline(ls, line);
  CHECK(line == "step\tloss\tlm_loss\tmc_loss");

  // eval on the saved checkpoint reproduces the dev accuracy from training
  auto ev = run_cli("eval --ckpt " + run + "/model.ckpt --data " + dir.file("train.jsonl") +
                    " --report " + dir.file("ev.json") + " --predictions " + dir.file("ev.tsv"));
  REQUIRE(ev.exit_code == 0);
  auto value_after = [](const std::string& s, const std::string& key) {
    const auto at = s.find(key) + key.size();
    return s.substr(at, s.find('\n', at) - at);
  };
  CHECK(value_after(r.out, "dev accuracy:") == value_after(ev.out, "accuracy:"));
  // and the persisted prediction rows agree with the training-run ones
  auto p1 = load_predictions_tsv(run + "/predictions.tsv");
  auto p2 = load_predictions_tsv(dir.file("ev.tsv"));
  REQUIRE(p1.size() == p2.size());
  for (std::size_t i = 0; i < p1.size(); ++i) CHECK(p1[i].predicted == p2[i].predicted);

  // re-running into the same directory is allowed once the lock is gone,
  // but a held lock refuses a second writer
  atomic_write_text(run + "/lock", "locked\n");
  auto locked = run_cli("train --data " + dir.file("train.jsonl") + " --run-dir " + run +
                        " --epochs 1 --lm-loss 0 --d 16");
  CHECK(locked.exit_code == 1);
  CHECK(locked.out.find("lock") != std::string::npos);
  fs::remove(run + "/lock");
}

TEST_CASE("cli mask-eval, ensemble, fewshot wiring") {
  ScratchDir dir("cli_misc_tmp");
  REQUIRE(run_cli("gen-synth --rule copy-last --n 24 --choices 3 --vocab-words 10 --seed 9"
                  " --out " + dir.file("d.jsonl")).exit_code == 0);
  const std::string run = dir.file("run");
  REQUIRE(run_cli("train --data " + dir.file("d.jsonl") + " --dev " + dir.file("d.jsonl") +
                  " --run-dir " + run + " --epochs 1 --lm-loss 0 --d 16").exit_code == 0);

  // mask-eval defaults to the shipped lexicon and records its hash
  auto me = run_cli("mask-eval --ckpt " + run + "/model.ckpt --data " + dir.file("d.jsonl") +
                    " --report " + dir.file("mask.json"));
  REQUIRE(me.exit_code == 0);
  CHECK(me.out.find("Full") != std::string::npos);
  CHECK(me.out.find("- Both") != std::string::npos);
  std::ifstream mj(dir.file("mask.json"));
  auto mjson = nlohmann::json::parse(mj);
  CHECK(mjson.at("lexicon_sha256") ==
        Sha256::of_file(std::string(MCQA_DATA_DIR) + "/content_lexicon.txt"));
  CHECK(mjson.at("checkpoint_sha256") == Sha256::of_file(run + "/model.ckpt"));

  // an ensemble of identical voters reproduces the single-model predictions
  auto en = run_cli("ensemble --preds " + run + "/predictions.tsv --preds " + run +
                    "/predictions.tsv --preds " + run + "/predictions.tsv --out " +
                    dir.file("voted.tsv"));
  REQUIRE(en.exit_code == 0);
  auto single = load_predictions_tsv(run + "/predictions.tsv");
  auto voted = load_predictions_tsv(dir.file("voted.tsv"));
  REQUIRE(voted.size() == single.size());
  for (std::size_t i = 0; i < voted.size(); ++i) CHECK(voted[i].predicted == single[i].predicted);

  auto fw = run_cli("fewshot --data " + dir.file("d.jsonl") + " --fraction 0.25 --seed 2 --out " +
                    dir.file("few.jsonl"));
  REQUIRE(fw.exit_code == 0);
  CHECK(load_jsonl(dir.file("few.jsonl")).size() == 6);
  // deterministic subsample
  REQUIRE(run_cli("fewshot --data " + dir.file("d.jsonl") + " --fraction 0.25 --seed 2 --out " +
                  dir.file("few2.jsonl")).exit_code == 0);
  CHECK(slurp(dir.file("few.jsonl")) == slurp(dir.file("few2.jsonl")));
}

TEST_CASE("cli stage1 / task-transfer provenance across commands") {
  ScratchDir dir("cli_stage_tmp");
  REQUIRE(run_cli("gen-synth --rule copy-last --n 24 --choices 4 --vocab-words 10 --seed 1"
                  " --out " + dir.file("cosmos.jsonl")).exit_code == 0);
  REQUIRE(run_cli("gen-synth --rule negation-flip --n 24 --choices 2 --vocab-words 10 --seed 2"
                  " --out " + dir.file("wino.jsonl")).exit_code == 0);
  REQUIRE(run_cli("gen-synth --rule copy-last --n 12 --choices 3 --vocab-words 10 --seed 3"
                  " --out " + dir.file("siqa.jsonl")).exit_code == 0);

  const std::string run = dir.file("s1");
  auto s1 = run_cli("stage1 --data " + dir.file("cosmos.jsonl") + " --data " +
                    dir.file("wino.jsonl") + " --steps 5 --run-dir " + run +
                    " --per-device 4 --lm-loss 0 --d 16");
  REQUIRE(s1.exit_code == 0);
  CHECK(s1.out.find("cosmos_qa") != std::string::npos);
  CHECK(s1.out.find("winogrande") != std::string::npos);

  // the unseen task evaluates cleanly...
  auto tt = run_cli("task-transfer --ckpt " + run + "/model.ckpt --data " + dir.file("siqa.jsonl"));
  REQUIRE(tt.exit_code == 0);
  CHECK(tt.out.find("chance 0.333") != std::string::npos);

  // ...but after stage-2 on the target task, the provenance guard refuses
  const std::string run2 = dir.file("s2");
  REQUIRE(run_cli("stage2 --ckpt " + run + "/model.ckpt --data " + dir.file("siqa.jsonl") +
                  " --run-dir " + run2 + " --epochs 1 --per-device 4 --lm-loss 0")
              .exit_code == 0);
  auto leaked =
      run_cli("task-transfer --ckpt " + run2 + "/model.ckpt --data " + dir.file("siqa.jsonl"));
  CHECK(leaked.exit_code == 1);
  CHECK(leaked.out.find("social_iqa") != std::string::npos);
}
