// Command-line surface. Every run writes its merged configuration before any
// training step, artifacts are content-hashed into a manifest, and a lock
// file guards each run directory against concurrent writers.

#include <CLI11.hpp>
#include <iostream>

#include "mcqa/run.hpp"
#include "mcqa/synth.hpp"
#include "mcqa/train.hpp"

namespace {

using namespace mcqa;

// merged configuration: defaults < config file < explicit flags
struct ConfigSources {
  std::string config_path;
  KVConfig overrides;

  KVConfig merged() const {
    KVConfig kv;
    if (!config_path.empty()) kv = KVConfig::load(config_path);
    kv.merge(overrides);
    return kv;
  }
};

void add_config_options(CLI::App* cmd, ConfigSources& src) {
  cmd->add_option("--config", src.config_path, "key = value configuration file");
  // every tunable is also a flag; flags win over file values
  static const char* keys[] = {"lr",        "per-device", "accum",     "devices",
                               "epochs",    "seed",       "lm-weight", "mlm-rate",
                               "warmup",    "d",          "layers",    "heads",
                               "max-len",   "dropout",    "direction", "format",
                               "lm-loss"};
  for (const char* key : keys) {
    const std::string k = key;
    cmd->add_option_function<std::string>(
        "--" + k, [&src, k](const std::string& v) { src.overrides.set(k, v); });
  }
}

TrainConfig train_config_from(const KVConfig& kv) {
  TrainConfig c;
  c.lr = kv.get_double("lr", c.lr);
  c.per_device = kv.get_size("per-device", c.per_device);
  c.accum = kv.get_size("accum", c.accum);
  c.devices = kv.get_size("devices", c.devices);
  c.epochs = kv.get_size("epochs", c.epochs);
  c.seed = kv.get_size("seed", c.seed);
  c.lm_loss = kv.get_bool("lm-loss", c.lm_loss);
  c.lm_weight = kv.get_double("lm-weight", c.lm_weight);
  c.mlm_rate = kv.get_double("mlm-rate", c.mlm_rate);
  c.warmup_frac = kv.get_double("warmup", c.warmup_frac);
  c.validate();
  return c;
}

ModelConfig model_config_from(const KVConfig& kv, std::size_t vocab_size) {
  ModelConfig c;
  c.d = kv.get_size("d", 32);
  c.n_layers = kv.get_size("layers", 2);
  c.n_heads = kv.get_size("heads", 2);
  c.max_len = kv.get_size("max-len", 24);
  c.dropout = kv.get_double("dropout", 0.0);
  c.direction = kv.get("direction", "bidirectional") == "causal" ? Direction::causal
                                                                 : Direction::bidirectional;
  c.seed = kv.get_size("seed", 1);
  c.vocab_size = vocab_size;
  c.validate();
  return c;
}

Vocabulary vocab_of(const std::vector<MCExample>& data) {
  std::vector<std::string> texts;
  for (auto& ex : data) {
    texts.push_back(ex.context);
    texts.push_back(ex.question);
    for (auto& c : ex.choices) texts.push_back(c);
  }
  return Vocabulary::build(texts, 1);
}

FormatKind format_for(const KVConfig& kv, const std::vector<MCExample>& data) {
  if (kv.has("format")) return format_from_name(kv.get("format", ""));
  return default_format(data.front().task);
}

std::vector<std::string> tasks_of(const std::vector<MCExample>& data) {
  std::vector<std::string> out;
  for (auto& ex : data) {
    const std::string name = task_name(ex.task);
    if (std::find(out.begin(), out.end(), name) == out.end()) out.push_back(name);
  }
  return out;
}

nlohmann::json snapshot(const KVConfig& kv, std::initializer_list<std::pair<std::string, std::string>> extra) {
  nlohmann::json j = {{"config", kv.to_json()}};
  for (auto& [k, v] : extra) j[k] = v;
  return j;
}

std::vector<double> parse_doubles(const std::string& csv) {
  std::vector<double> out;
  std::istringstream is(csv);
  std::string v;
  while (std::getline(is, v, ',')) out.push_back(std::stod(v));
  return out;
}

std::vector<std::size_t> parse_sizes(const std::string& csv) {
  std::vector<std::size_t> out;
  std::istringstream is(csv);
  std::string v;
  while (std::getline(is, v, ',')) out.push_back(std::stoul(v));
  return out;
}

int cmd_gen_synth(const std::string& rule, std::size_t n, std::size_t choices,
                  std::size_t vocab_words, std::uint64_t seed, bool typed,
                  const std::string& prefix, const std::string& out) {
  SyntheticTaskSpec spec;
  spec.rule = synth_rule_from_name(rule);
  spec.n = n;
  spec.n_choices = choices;
  spec.vocab_words = vocab_words;
  spec.seed = seed;
  spec.typed_questions = typed;
  if (!prefix.empty()) spec.id_prefix = prefix;
  auto data = gen_synthetic(spec);
  save_jsonl(out, data);
  std::cout << "wrote " << data.size() << " examples to " << out << "\n";
  return 0;
}

int cmd_train(const ConfigSources& src, const std::string& data_path, const std::string& dev_path,
              const std::string& run_path) {
  const KVConfig kv = src.merged();
  auto data = load_jsonl(data_path);
  auto vocab = vocab_of(data);
  const FormatKind format = format_for(kv, data);

  RunDirectory run(run_path);
  run.write_config(snapshot(kv, {{"command", "train"},
                                 {"data", data_path},
                                 {"data_sha256", Sha256::of_file(data_path)},
                                 {"format", format_name(format)}}));

  ModelBundle bundle(model_config_from(kv, vocab.size()), vocab, format,
                     kv.get_size("seed", 1) + 1);
  bundle.trained_tasks = tasks_of(data);
  auto result = train(bundle.model, bundle.head, bundle.lm, data, format, vocab,
                      train_config_from(kv));
  result.save_curve_tsv(run.file("loss_curve.tsv"));
  run.record("loss_curve.tsv");
  bundle.save(run.file("model.ckpt"));
  run.record("model.ckpt");

  if (!dev_path.empty()) {
    auto dev = load_jsonl(dev_path);
    RunReport report;
    report.predictions = predict_all(bundle.model, bundle.head, dev, format, vocab);
    report.overall_accuracy = accuracy_of(report.predictions);
    report.metadata = {{"checkpoint_sha256", Sha256::of_file(run.file("model.ckpt"))},
                       {"dataset_sha256", Sha256::of_file(dev_path)},
                       {"seed", kv.get_size("seed", 1)}};
    report.save(run.file("report.json"), run.file("predictions.tsv"));
    run.record("report.json");
    run.record("predictions.tsv");
    std::cout << "dev accuracy: " << report.overall_accuracy << "\n";
  }
  std::cout << "checkpoint: " << run.file("model.ckpt") << "\n";
  return 0;
}

int cmd_grid(const ConfigSources& src, const std::string& data_path, const std::string& dev_path,
             const std::string& run_path, const std::string& lrs_csv,
             const std::string& batches_csv) {
  const KVConfig kv = src.merged();
  auto data = load_jsonl(data_path);
  auto dev = load_jsonl(dev_path);
  auto vocab = vocab_of(data);
  const FormatKind format = format_for(kv, data);
  const auto lrs = lrs_csv.empty() ? kDefaultLrGrid : parse_doubles(lrs_csv);
  const auto batches = batches_csv.empty() ? kDefaultBatchGrid : parse_sizes(batches_csv);

  RunDirectory run(run_path);
  run.write_config(snapshot(kv, {{"command", "grid"},
                                 {"data", data_path},
                                 {"data_sha256", Sha256::of_file(data_path)}}));

  auto factory = [&](std::uint64_t seed) {
    ModelConfig mc = model_config_from(kv, vocab.size());
    mc.seed = seed;
    return std::make_tuple(TransformerModel(mc), McHead::init(mc.d, seed + 1),
                           LmHead::init(vocab.size()));
  };
  auto grid = grid_search(factory, data, dev, format, vocab, train_config_from(kv), lrs, batches);
  run.write_text("grid.json", grid.to_json().dump(2) + "\n");
  if (!grid.succeeded().empty())
    std::cout << "best " << grid.best() << " | worst " << grid.worst() << " | mean " << grid.mean()
              << ", std " << grid.stddev() << "\n";
  return 0;
}

int cmd_stage1(const ConfigSources& src, const std::vector<std::string>& data_paths,
               const std::string& run_path, std::size_t steps) {
  const KVConfig kv = src.merged();
  std::map<Task, std::vector<MCExample>> tasks;
  std::vector<MCExample> all;
  for (const auto& path : data_paths) {
    for (auto& ex : load_jsonl(path)) {
      tasks[ex.task].push_back(ex);
      all.push_back(std::move(ex));
    }
  }
  auto vocab = vocab_of(all);
  std::map<Task, FormatKind> formats;
  for (auto& [task, pool] : tasks) formats[task] = default_format(task);

  RunDirectory run(run_path);
  run.write_config(snapshot(kv, {{"command", "stage1"}, {"steps", std::to_string(steps)}}));

  ModelBundle bundle(model_config_from(kv, vocab.size()), vocab, FormatKind::standard,
                     kv.get_size("seed", 1) + 1);
  bundle.trained_tasks = tasks_of(all);
  auto out = stage1_multitask(bundle.model, bundle.head, bundle.lm, tasks, formats, vocab,
                              train_config_from(kv), steps);
  out.result.save_curve_tsv(run.file("loss_curve.tsv"));
  run.record("loss_curve.tsv");
  bundle.save(run.file("model.ckpt"));
  run.record("model.ckpt");
  std::cout << "stage-1 checkpoint over {";
  for (std::size_t i = 0; i < bundle.trained_tasks.size(); ++i)
    std::cout << (i ? ", " : "") << bundle.trained_tasks[i];
  std::cout << "}: " << run.file("model.ckpt") << "\n";
  return 0;
}

int cmd_stage2(const ConfigSources& src, const std::string& ckpt_path,
               const std::string& data_path, const std::string& run_path) {
  const KVConfig kv = src.merged();
  auto data = load_jsonl(data_path);
  ModelBundle bundle = ModelBundle::load(ckpt_path);
  const FormatKind format =
      kv.has("format") ? format_from_name(kv.get("format", "")) : default_format(data.front().task);

  RunDirectory run(run_path);
  run.write_config(snapshot(kv, {{"command", "stage2"},
                                 {"stage1_ckpt", ckpt_path},
                                 {"stage1_sha256", Sha256::of_file(ckpt_path)},
                                 {"data_sha256", Sha256::of_file(data_path)}}));

  auto result = train(bundle.model, bundle.head, bundle.lm, data, format, bundle.vocab,
                      train_config_from(kv));
  for (const auto& t : tasks_of(data))
    if (std::find(bundle.trained_tasks.begin(), bundle.trained_tasks.end(), t) ==
        bundle.trained_tasks.end())
      bundle.trained_tasks.push_back(t);
  bundle.format = format;
  result.save_curve_tsv(run.file("loss_curve.tsv"));
  run.record("loss_curve.tsv");
  bundle.save(run.file("model.ckpt"));
  run.record("model.ckpt");
  std::cout << "stage-2 checkpoint: " << run.file("model.ckpt") << "\n";
  return 0;
}

int cmd_extract_features(const std::string& ckpt_path, const std::string& data_path,
                         const std::string& out) {
  ModelBundle bundle = ModelBundle::load(ckpt_path);
  auto data = load_jsonl(data_path);
  auto store = extract_features(bundle.model, data, bundle.vocab);
  store.save(out);
  std::cout << "stored " << store.size() << " features (d=" << store.d() << "), sha256 "
            << store.content_hash() << "\n";
  return 0;
}

int cmd_fuse_train(const ConfigSources& src, const std::string& ckpt_path,
                   const std::string& features_path, const std::string& data_path,
                   const std::string& run_path, const std::string& mode_name) {
  const KVConfig kv = src.merged();
  auto data = load_jsonl(data_path);
  ModelBundle bundle = ModelBundle::load(ckpt_path);
  auto store = FeatureStore::load(features_path);
  const CombineMode mode = combine_mode_from_name(mode_name);
  const TrainConfig cfg = train_config_from(kv);

  RunDirectory run(run_path);
  run.write_config(snapshot(kv, {{"command", "fuse-train"},
                                 {"mode", mode_name},
                                 {"features_sha256", store.content_hash()}}));

  auto scorer = FusionScorerParams::init(bundle.model.config().d, cfg.seed + 2, mode);
  NamedParams params = bundle.model.named_params();
  for (auto& p : scorer.named_params()) params.push_back(p);

  const std::size_t eff = cfg.effective_batch();
  const std::size_t total_steps = cfg.epochs * ((data.size() + eff - 1) / eff);
  Optimizer opt(params, cfg, total_steps);
  std::mt19937_64 shuffle_rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::vector<std::vector<double>> acc(params.size());
  for (std::size_t k = 0; k < params.size(); ++k) acc[k].assign(params[k].second.size(), 0.0);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (std::size_t start = 0; start < order.size(); start += eff) {
      const std::size_t stop = std::min(order.size(), start + eff);
      for (auto& a : acc) std::fill(a.begin(), a.end(), 0.0);
      Tape tape;
      Tensor total;
      for (std::size_t i = start; i < stop; ++i) {
        Tensor loss = fused_mc_loss(data[order[i]], bundle.model, store, scorer, bundle.vocab);
        total = i == start ? loss : add(total, loss);
      }
      detail::zero_grads(params);
      tape.backward(scale(total, 1.0 / static_cast<double>(stop - start)));
      for (std::size_t k = 0; k < params.size(); ++k) {
        const auto& g = params[k].second.grad();
        for (std::size_t i = 0; i < g.size(); ++i) acc[k][i] += g[i];
      }
      opt.step(acc);
    }
  }

  nlohmann::json meta = {{"model", bundle.model.config().to_json()},
                         {"vocab", vocab_to_json(bundle.vocab)},
                         {"format", format_name(bundle.format)},
                         {kTrainedTasksKey, bundle.trained_tasks},
                         {"fusion_mode", mode_name}};
  Checkpoint::from_params(std::move(meta), params).save(run.file("fused.ckpt"));
  run.record("fused.ckpt");
  std::cout << "fused checkpoint: " << run.file("fused.ckpt")
            << " (features untouched: " << store.content_hash() << ")\n";
  return 0;
}

int cmd_ensemble(const std::vector<std::string>& pred_paths, const std::string& out) {
  std::vector<std::vector<std::size_t>> preds;
  std::vector<std::vector<std::vector<double>>> probs;
  std::vector<Prediction> first;
  for (const auto& path : pred_paths) {
    auto rows = load_predictions_tsv(path);
    if (first.empty()) first = rows;
    if (rows.size() != first.size())
      throw DataError("prediction files disagree on example count: " + path);
    std::vector<std::size_t> p;
    std::vector<std::vector<double>> q;
    for (auto& r : rows) {
      p.push_back(r.predicted);
      q.push_back(r.probs);
    }
    preds.push_back(std::move(p));
    probs.push_back(std::move(q));
  }
  auto voted = majority_vote(preds, probs);
  std::vector<Prediction> out_rows = first;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < voted.size(); ++i) {
    out_rows[i].predicted = voted[i];
    if (voted[i] == out_rows[i].gold) ++hits;
  }
  if (!out.empty()) save_predictions_tsv(out_rows, out);
  std::cout << "ensemble of " << pred_paths.size()
            << " models: accuracy " << double(hits) / double(voted.size()) << "\n";
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_path,
             const std::string& report_path, const std::string& preds_path) {
  ModelBundle bundle = ModelBundle::load(ckpt_path);
  auto data = load_jsonl(data_path);
  RunReport report;
  report.predictions =
      predict_all(bundle.model, bundle.head, data, bundle.format, bundle.vocab);
  report.overall_accuracy = accuracy_of(report.predictions);
  report.metadata = {{"checkpoint_sha256", Sha256::of_file(ckpt_path)},
                     {"dataset_sha256", Sha256::of_file(data_path)}};
  std::cout << "accuracy: " << report.overall_accuracy << "\n";
  if (!report_path.empty())
    report.save(report_path, preds_path.empty() ? report_path + ".predictions.tsv" : preds_path);
  return 0;
}

int cmd_mask_eval(const std::string& ckpt_path, const std::string& data_path,
                  std::string lexicon_path, const std::string& report_path) {
  ModelBundle bundle = ModelBundle::load(ckpt_path);
  auto data = load_jsonl(data_path);
  if (lexicon_path.empty()) lexicon_path = std::string(MCQA_DATA_DIR) + "/content_lexicon.txt";
  Lexicon lex = Lexicon::load(lexicon_path);
  auto table = masking_eval(bundle.model, bundle.head, data, lex, bundle.format, bundle.vocab);
  std::cout << table.render();
  if (!report_path.empty()) {
    nlohmann::json j = table.to_json();
    j["lexicon_sha256"] = Sha256::of_file(lexicon_path);
    j["checkpoint_sha256"] = Sha256::of_file(ckpt_path);
    atomic_write_text(report_path, j.dump(2) + "\n");
  }
  return 0;
}

int cmd_type_transfer(const ConfigSources& src, const std::string& data_path,
                      const std::string& run_path, std::string rules_path) {
  const KVConfig kv = src.merged();
  auto data = load_jsonl(data_path);
  auto vocab = vocab_of(data);
  if (rules_path.empty()) rules_path = default_question_types_path();
  auto rules = QuestionTypeRules::load(rules_path);
  const FormatKind format = format_for(kv, data);

  RunDirectory run(run_path);
  run.write_config(snapshot(kv, {{"command", "type-transfer"},
                                 {"rules_sha256", Sha256::of_file(rules_path)},
                                 {"data_sha256", Sha256::of_file(data_path)}}));

  auto factory = [&](std::uint64_t seed) {
    ModelConfig mc = model_config_from(kv, vocab.size());
    mc.seed = seed;
    return std::make_tuple(TransformerModel(mc), McHead::init(mc.d, seed + 1),
                           LmHead::init(vocab.size()));
  };
  auto mat = type_transfer_matrix(data, rules, factory, format, vocab, train_config_from(kv));
  run.write_text("type_transfer.json", mat.to_json().dump(2) + "\n");
  std::cout << mat.render();
  return 0;
}

int cmd_task_transfer(const std::string& ckpt_path, const std::string& data_path) {
  auto ck = Checkpoint::load(ckpt_path);
  ModelBundle bundle = ModelBundle::from_checkpoint(ck);
  auto data = load_jsonl(data_path);
  auto res = task_transfer(ck, bundle.model, bundle.head, bundle.lm, data, bundle.format,
                           bundle.vocab);
  std::cout << "zero-shot accuracy: " << res.accuracy << " (chance " << res.chance << ")\n";
  return 0;
}

int cmd_fewshot(const std::string& data_path, double fraction, std::uint64_t seed,
                const std::string& out) {
  auto subset = few_shot_subsample(load_jsonl(data_path), fraction, seed);
  save_jsonl(out, subset);
  std::cout << "wrote " << subset.size() << " examples to " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multiple-choice QA trainer and analysis harness"};
  app.require_subcommand(1);

  ConfigSources src;
  std::string data_path, dev_path, run_path, ckpt_path, out_path, report_path, preds_path;
  std::string rule = "token-overlap", mode = "concat", lexicon_path, rules_path, prefix;
  std::string lrs_csv, batches_csv;
  std::vector<std::string> multi_paths;
  std::size_t n = 48, choices = 3, vocab_words = 40, steps = 100;
  std::uint64_t seed = 1;
  double fraction = 0.1;
  bool typed = false;

  auto* gen = app.add_subcommand("gen-synth", "generate a rule-based synthetic dataset");
  gen->add_option("--rule", rule, "token-overlap | copy-last | negation-flip | joint-overlap");
  gen->add_option("--n", n, "number of examples");
  gen->add_option("--choices", choices, "choices per example");
  gen->add_option("--vocab-words", vocab_words, "content word pool size");
  gen->add_option("--seed", seed, "generation seed");
  gen->add_flag("--typed", typed, "attach cycling question-type keywords");
  gen->add_option("--prefix", prefix, "example id prefix");
  gen->add_option("--out", out_path, "output JSONL path")->required();

  auto* tr = app.add_subcommand("train", "fine-tune on one dataset");
  add_config_options(tr, src);
  tr->add_option("--data", data_path, "training JSONL")->required();
  tr->add_option("--dev", dev_path, "optional dev JSONL");
  tr->add_option("--run-dir", run_path, "run directory")->required();

  auto* gr = app.add_subcommand("grid", "hyper-parameter grid search");
  add_config_options(gr, src);
  gr->add_option("--data", data_path, "training JSONL")->required();
  gr->add_option("--dev", dev_path, "dev JSONL")->required();
  gr->add_option("--run-dir", run_path, "run directory")->required();
  gr->add_option("--lrs", lrs_csv, "comma-separated learning rates");
  gr->add_option("--batches", batches_csv, "comma-separated effective batch sizes");

  auto* s1 = app.add_subcommand("stage1", "joint multi-task fine-tuning");
  add_config_options(s1, src);
  s1->add_option("--data", multi_paths, "one JSONL per task")->required();
  s1->add_option("--steps", steps, "optimizer steps");
  s1->add_option("--run-dir", run_path, "run directory")->required();

  auto* s2 = app.add_subcommand("stage2", "target-task fine-tuning from a stage-1 checkpoint");
  add_config_options(s2, src);
  s2->add_option("--ckpt", ckpt_path, "stage-1 checkpoint")->required();
  s2->add_option("--data", data_path, "target training JSONL")->required();
  s2->add_option("--run-dir", run_path, "run directory")->required();

  auto* ef = app.add_subcommand("extract-features", "freeze a decoder's CLS features");
  ef->add_option("--ckpt", ckpt_path, "decoder checkpoint")->required();
  ef->add_option("--data", data_path, "dataset JSONL")->required();
  ef->add_option("--out", out_path, "feature store path")->required();

  auto* ft = app.add_subcommand("fuse-train", "fine-tune an encoder with frozen decoder features");
  add_config_options(ft, src);
  ft->add_option("--ckpt", ckpt_path, "encoder checkpoint")->required();
  ft->add_option("--features", report_path, "feature store")->required();
  ft->add_option("--data", data_path, "training JSONL")->required();
  ft->add_option("--mode", mode, "concat | mean");
  ft->add_option("--run-dir", run_path, "run directory")->required();

  auto* en = app.add_subcommand("ensemble", "majority-vote over prediction files");
  en->add_option("--preds", multi_paths, "prediction TSVs")->required();
  en->add_option("--out", out_path, "voted predictions TSV");

  auto* ev = app.add_subcommand("eval", "accuracy of a checkpoint on a dataset");
  ev->add_option("--ckpt", ckpt_path, "checkpoint")->required();
  ev->add_option("--data", data_path, "dataset JSONL")->required();
  ev->add_option("--report", report_path, "write a JSON report here");
  ev->add_option("--predictions", preds_path, "write per-example predictions here");

  auto* me = app.add_subcommand("mask-eval", "information-masking ablation table");
  me->add_option("--ckpt", ckpt_path, "checkpoint")->required();
  me->add_option("--data", data_path, "dataset JSONL")->required();
  me->add_option("--lexicon", lexicon_path, "content lexicon (default: shipped)");
  me->add_option("--report", report_path, "write a JSON report here");

  auto* tt = app.add_subcommand("type-transfer", "zero-shot transfer across question types");
  add_config_options(tt, src);
  tt->add_option("--data", data_path, "dataset JSONL")->required();
  tt->add_option("--types", rules_path, "question-type rule file (default: shipped)");
  tt->add_option("--run-dir", run_path, "run directory")->required();

  auto* tk = app.add_subcommand("task-transfer", "zero-shot evaluation on an unseen task");
  tk->add_option("--ckpt", ckpt_path, "stage-1 checkpoint")->required();
  tk->add_option("--data", data_path, "target dev JSONL")->required();

  auto* fs = app.add_subcommand("fewshot", "deterministic training subsample");
  fs->add_option("--data", data_path, "dataset JSONL")->required();
  fs->add_option("--fraction", fraction, "subsample fraction in (0, 1]");
  fs->add_option("--seed", seed, "subsample seed");
  fs->add_option("--out", out_path, "output JSONL")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (gen->parsed())
      return cmd_gen_synth(rule, n, choices, vocab_words, seed, typed, prefix, out_path);
    if (tr->parsed()) return cmd_train(src, data_path, dev_path, run_path);
    if (gr->parsed()) return cmd_grid(src, data_path, dev_path, run_path, lrs_csv, batches_csv);
    if (s1->parsed()) return cmd_stage1(src, multi_paths, run_path, steps);
    if (s2->parsed()) return cmd_stage2(src, ckpt_path, data_path, run_path);
    if (ef->parsed()) return cmd_extract_features(ckpt_path, data_path, out_path);
    if (ft->parsed()) return cmd_fuse_train(src, ckpt_path, report_path, data_path, run_path, mode);
    if (en->parsed()) return cmd_ensemble(multi_paths, out_path);
    if (ev->parsed()) return cmd_eval(ckpt_path, data_path, report_path, preds_path);
    if (me->parsed()) return cmd_mask_eval(ckpt_path, data_path, lexicon_path, report_path);
    if (tt->parsed()) return cmd_type_transfer(src, data_path, run_path, rules_path);
    if (tk->parsed()) return cmd_task_transfer(ckpt_path, data_path);
    if (fs->parsed()) return cmd_fewshot(data_path, fraction, seed, out_path);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
