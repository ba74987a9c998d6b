#pragma once

// Optimization loop with simulated-device gradient accumulation, the
// hyper-parameter grid search, the two-stage multi-task schedule with a
// unified scoring head, and few-shot subsampling.

#include <cmath>
#include <functional>
#include <map>
#include <random>

#include "mcqa/checkpoint.hpp"
#include "mcqa/heads.hpp"
#include "mcqa/synth.hpp"

namespace mcqa {

struct TrainError : std::runtime_error {
  explicit TrainError(const std::string& msg) : std::runtime_error(msg) {}
};

// default grid constants
inline const std::vector<double> kDefaultLrGrid = {5e-6, 1e-5, 2.5e-5, 5e-5};
inline const std::vector<std::size_t> kDefaultBatchGrid = {16, 32, 64, 256};

struct TrainConfig {
  double lr = 1e-3;
  std::size_t per_device = 4;
  std::size_t accum = 1;
  std::size_t devices = 1;  // multiplier in effective-batch arithmetic only
  std::size_t epochs = 1;
  std::uint64_t seed = 1;
  bool lm_loss = true;
  double lm_weight = 1.0;
  double mlm_rate = 0.15;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8, weight_decay = 0.01;
  double warmup_frac = 0.06;  // linear warmup, then linear decay to zero

  std::size_t effective_batch() const { return devices * per_device * accum; }

  void validate() const {
    if (lr <= 0 || per_device == 0 || accum == 0 || devices == 0 || epochs == 0)
      throw TrainError("train config: lr, batch sizes, devices, and epochs must be positive");
    if (mlm_rate <= 0.0 || mlm_rate >= 1.0) throw TrainError("train config: mlm rate in (0,1)");
    if (warmup_frac < 0.0 || warmup_frac >= 1.0)
      throw TrainError("train config: warmup fraction in [0,1)");
  }

  nlohmann::json to_json() const {
    return {{"lr", lr},           {"per_device", per_device},
            {"accum", accum},     {"devices", devices},
            {"epochs", epochs},   {"seed", seed},
            {"lm_loss", lm_loss}, {"lm_weight", lm_weight},
            {"mlm_rate", mlm_rate}, {"beta1", beta1},
            {"beta2", beta2},     {"adam_eps", adam_eps},
            {"weight_decay", weight_decay}, {"warmup_frac", warmup_frac}};
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.lr = j.at("lr").get<double>();
    c.per_device = j.at("per_device").get<std::size_t>();
    c.accum = j.at("accum").get<std::size_t>();
    c.devices = j.at("devices").get<std::size_t>();
    c.epochs = j.at("epochs").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.lm_loss = j.at("lm_loss").get<bool>();
    c.lm_weight = j.at("lm_weight").get<double>();
    c.mlm_rate = j.at("mlm_rate").get<double>();
    c.beta1 = j.at("beta1").get<double>();
    c.beta2 = j.at("beta2").get<double>();
    c.adam_eps = j.at("adam_eps").get<double>();
    c.weight_decay = j.at("weight_decay").get<double>();
    c.warmup_frac = j.at("warmup_frac").get<double>();
    c.validate();
    return c;
  }
};

// Adaptive moments with decoupled weight decay and a trapezoid-free linear
// warmup/decay schedule. Gradients are supplied externally per step.
class Optimizer {
 public:
  Optimizer(NamedParams params, const TrainConfig& cfg, std::size_t total_steps)
      : params_(std::move(params)), cfg_(cfg), total_steps_(total_steps) {
    for (auto& [name, p] : params_) {
      m_.emplace_back(p.size(), 0.0);
      v_.emplace_back(p.size(), 0.0);
    }
  }

  double lr_at(std::size_t step) const {  // step is 1-based
    const double warm = std::max(1.0, cfg_.warmup_frac * static_cast<double>(total_steps_));
    const double s = static_cast<double>(step);
    if (s <= warm) return cfg_.lr * s / warm;
    const double rest = std::max(1.0, static_cast<double>(total_steps_) - warm);
    return cfg_.lr * std::max(0.0, (static_cast<double>(total_steps_) - s) / rest);
  }

  // grads is one flat vector per parameter, in params order
  void step(const std::vector<std::vector<double>>& grads) {
    ++t_;
    const double lr = lr_at(t_);
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = const_cast<Tensor&>(params_[k].second);
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double g = grads[k][i];
        m_[k][i] = cfg_.beta1 * m_[k][i] + (1.0 - cfg_.beta1) * g;
        v_[k][i] = cfg_.beta2 * v_[k][i] + (1.0 - cfg_.beta2) * g * g;
        const double mhat = m_[k][i] / bc1;
        const double vhat = v_[k][i] / bc2;
        p.data()[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.adam_eps) +
                             cfg_.weight_decay * p.data()[i]);
      }
    }
  }

  const NamedParams& params() const { return params_; }
  std::size_t steps_taken() const { return t_; }

 private:
  NamedParams params_;
  TrainConfig cfg_;
  std::size_t total_steps_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct StepRecord {
  std::size_t step = 0;
  double loss = 0.0;
  double lm_loss = 0.0;
  double mc_loss = 0.0;
};

struct TrainResult {
  std::vector<StepRecord> curve;

  void save_curve_tsv(const std::string& path) const {
    const std::string tmp = path + ".tmp";
    {
      std::ofstream os(tmp);
      if (!os) throw TrainError("cannot write loss curve: " + tmp);
      os << "step\tloss\tlm_loss\tmc_loss\n";
      os.precision(17);
      for (const auto& r : curve)
        os << r.step << "\t" << r.loss << "\t" << r.lm_loss << "\t" << r.mc_loss << "\n";
      if (!os) throw TrainError("short write on loss curve: " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
      throw TrainError("cannot rename loss curve into place: " + path);
  }
};

namespace detail {

// all trainable parameters of the (model, heads) triple in a fixed order
inline NamedParams all_params(const TransformerModel& model, const McHead& head,
                              const LmHead& lm) {
  NamedParams out = model.named_params();
  for (auto& p : head.named_params()) out.push_back(p);
  for (auto& p : lm.named_params()) out.push_back(p);
  return out;
}

inline void zero_grads(const NamedParams& params) {
  for (auto& [name, p] : params) {
    Tensor t = p;  // shared handle; grants mutable access to the buffer
    std::fill(t.grad().begin(), t.grad().end(), 0.0);
  }
}

// one accumulation step over a micro-batch: joint (or plain MC) loss summed
// over the examples and scaled by 1/effective_batch, backpropagated, and the
// parameter gradients added into acc
inline StepRecord micro_step(const std::vector<const MCExample*>& micro,
                             const TransformerModel& model, const McHead& head, const LmHead& lm,
                             const std::map<Task, FormatKind>& formats, const Vocabulary& vocab,
                             const TrainConfig& cfg, std::size_t eff_batch, std::mt19937_64& rng,
                             const NamedParams& params,
                             std::vector<std::vector<double>>& acc) {
  StepRecord rec;
  Tape tape;
  Tensor total;
  bool first = true;
  for (const MCExample* ex : micro) {
    JointLossStats stats;
    Tensor loss = cfg.lm_loss
                      ? joint_loss(*ex, model, head, lm, formats.at(ex->task), vocab, rng,
                                   cfg.mlm_rate, cfg.lm_weight, &stats)
                      : mc_loss(*ex, model, head, formats.at(ex->task), vocab);
    if (!cfg.lm_loss) stats.mc = loss.item();
    rec.lm_loss += stats.lm;
    rec.mc_loss += stats.mc;
    total = first ? loss : add(total, loss);
    first = false;
  }
  Tensor scaled = scale(total, 1.0 / static_cast<double>(eff_batch));
  rec.loss = scaled.item();
  zero_grads(params);
  tape.backward(scaled);
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto& g = params[k].second.grad();
    for (std::size_t i = 0; i < g.size(); ++i) acc[k][i] += g[i];
  }
  return rec;
}

}  // namespace detail

// Shuffled epochs, micro-batches of per_device examples accumulated over
// devices x accum micro-steps, one optimizer step per effective batch.
// Deterministic given the seed. A non-finite loss aborts with the step index.
inline TrainResult train(TransformerModel& model, McHead& head, LmHead& lm,
                         const std::vector<MCExample>& data,
                         const std::map<Task, FormatKind>& formats, const Vocabulary& vocab,
                         const TrainConfig& cfg) {
  cfg.validate();
  if (data.empty()) throw TrainError("train: empty dataset");
  for (const auto& ex : data)
    if (!formats.count(ex.task))
      throw TrainError(std::string("train: no format for task ") + task_name(ex.task));

  const std::size_t eff = cfg.effective_batch();
  const std::size_t steps_per_epoch = (data.size() + eff - 1) / eff;
  const std::size_t total_steps = cfg.epochs * steps_per_epoch;

  NamedParams params = detail::all_params(model, head, lm);
  Optimizer opt(params, cfg, total_steps);
  std::mt19937_64 shuffle_rng(cfg.seed);
  std::mt19937_64 mlm_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);

  TrainResult result;
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  std::vector<std::vector<double>> acc(params.size());
  for (std::size_t k = 0; k < params.size(); ++k) acc[k].assign(params[k].second.size(), 0.0);

  std::size_t global_step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (std::size_t start = 0; start < order.size(); start += eff) {
      const std::size_t stop = std::min(order.size(), start + eff);
      ++global_step;
      StepRecord rec;
      rec.step = global_step;
      for (auto& a : acc) std::fill(a.begin(), a.end(), 0.0);
      // the ragged final chunk scales by its own size so the step gradient
      // stays a mean over the examples it saw
      const std::size_t chunk = stop - start;
      for (std::size_t ms = start; ms < stop; ms += cfg.per_device) {
        std::vector<const MCExample*> micro;
        for (std::size_t i = ms; i < std::min(stop, ms + cfg.per_device); ++i)
          micro.push_back(&data[order[i]]);
        StepRecord part;
        try {
          part = detail::micro_step(micro, model, head, lm, formats, vocab, cfg, chunk, mlm_rng,
                                    params, acc);
        } catch (const TensorError& e) {
          throw TrainError("train: non-finite loss at step " + std::to_string(global_step) +
                           ": " + e.what());
        }
        rec.loss += part.loss;
        rec.lm_loss += part.lm_loss;
        rec.mc_loss += part.mc_loss;
      }
      if (!std::isfinite(rec.loss))
        throw TrainError("train: non-finite loss at step " + std::to_string(global_step));
      opt.step(acc);
      rec.lm_loss /= static_cast<double>(chunk);
      rec.mc_loss /= static_cast<double>(chunk);
      result.curve.push_back(rec);
    }
  }
  return result;
}

inline TrainResult train(TransformerModel& model, McHead& head, LmHead& lm,
                         const std::vector<MCExample>& data, FormatKind format,
                         const Vocabulary& vocab, const TrainConfig& cfg) {
  std::map<Task, FormatKind> formats;
  for (const auto& ex : data) formats[ex.task] = format;
  return train(model, head, lm, data, formats, vocab, cfg);
}

// dev-set accuracy with the plain MC head
inline double dataset_accuracy(const TransformerModel& model, const McHead& head,
                               const std::vector<MCExample>& data, FormatKind format,
                               const Vocabulary& vocab) {
  if (data.empty()) throw TrainError("accuracy: empty dataset");
  std::size_t hits = 0;
  for (const auto& ex : data)
    if (choice_scores(ex, model, head, format, vocab).predicted() == ex.gold) ++hits;
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

struct GridCell {
  double lr = 0.0;
  std::size_t eff_batch = 0;
  std::uint64_t seed = 0;
  bool failed = false;
  std::string error;
  double accuracy = 0.0;
};

struct GridResult {
  std::vector<GridCell> cells;

  std::vector<const GridCell*> succeeded() const {
    std::vector<const GridCell*> ok;
    for (const auto& c : cells)
      if (!c.failed) ok.push_back(&c);
    return ok;
  }
  double best() const { return extremum(true); }
  double worst() const { return extremum(false); }
  double mean() const {
    auto ok = succeeded();
    if (ok.empty()) throw TrainError("grid: no successful cells");
    double s = 0;
    for (auto* c : ok) s += c->accuracy;
    return s / static_cast<double>(ok.size());
  }
  double stddev() const {
    auto ok = succeeded();
    if (ok.empty()) throw TrainError("grid: no successful cells");
    const double mu = mean();
    double s = 0;
    for (auto* c : ok) s += (c->accuracy - mu) * (c->accuracy - mu);
    return std::sqrt(s / static_cast<double>(ok.size()));
  }

  nlohmann::json to_json() const {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& c : cells) {
      nlohmann::json row = {{"lr", c.lr}, {"eff_batch", c.eff_batch}, {"seed", c.seed}};
      if (c.failed) row["error"] = c.error;
      else row["accuracy"] = c.accuracy;
      rows.push_back(row);
    }
    nlohmann::json out = {{"cells", rows}};
    if (!succeeded().empty())
      out["summary"] = {{"best", best()}, {"worst", worst()}, {"mean", mean()},
                        {"std", stddev()}};
    return out;
  }

 private:
  double extremum(bool max) const {
    auto ok = succeeded();
    if (ok.empty()) throw TrainError("grid: no successful cells");
    double v = ok[0]->accuracy;
    for (auto* c : ok) v = max ? std::max(v, c->accuracy) : std::min(v, c->accuracy);
    return v;
  }
};

// Trains one fresh model per (lr, effective batch) cell and evaluates on the
// dev split. Cell failures are recorded and the grid continues.
inline GridResult grid_search(
    const std::function<std::tuple<TransformerModel, McHead, LmHead>(std::uint64_t seed)>& factory,
    const std::vector<MCExample>& train_data, const std::vector<MCExample>& dev_data,
    FormatKind format, const Vocabulary& vocab, const TrainConfig& base,
    const std::vector<double>& lrs = kDefaultLrGrid,
    const std::vector<std::size_t>& batches = kDefaultBatchGrid) {
  if (lrs.empty() || batches.empty()) throw TrainError("grid: empty axis");
  GridResult out;
  for (double lr : lrs) {
    for (std::size_t eb : batches) {
      GridCell cell;
      cell.lr = lr;
      cell.eff_batch = eb;
      cell.seed = base.seed;
      try {
        TrainConfig cfg = base;
        cfg.lr = lr;
        cfg.devices = 1;
        cfg.accum = 1;
        cfg.per_device = eb;
        auto [model, head, lm] = factory(base.seed);
        train(model, head, lm, train_data, format, vocab, cfg);
        cell.accuracy = dataset_accuracy(model, head, dev_data, format, vocab);
      } catch (const std::exception& e) {
        cell.failed = true;
        cell.error = e.what();
      }
      out.cells.push_back(cell);
    }
  }
  return out;
}

struct StagePlan {
  std::map<Task, FormatKind> stage1;  // tasks jointly trained at stage 1
  Task stage2_task = Task::social_iqa;
  FormatKind stage2_format = FormatKind::standard;
  TrainConfig stage1_cfg, stage2_cfg;

  void validate() const {
    if (stage1.empty()) throw TrainError("stage plan: stage 1 needs at least one task");
    if (stage1.count(stage2_task))
      throw TrainError(std::string("stage plan: stage 1 must exclude the stage 2 task ") +
                       task_name(stage2_task));
  }
};

struct Stage1Result {
  TrainResult result;
  std::map<Task, std::size_t> batch_counts;  // for sampling-rate audits
};

// Joint stage-1 fine-tuning: every optimizer step draws its task uniformly
// at random and samples an effective batch from that task's pool. One shared
// scoring head serves all tasks.
inline Stage1Result stage1_multitask(TransformerModel& model, McHead& head, LmHead& lm,
                                     const std::map<Task, std::vector<MCExample>>& tasks,
                                     const std::map<Task, FormatKind>& formats,
                                     const Vocabulary& vocab, const TrainConfig& cfg,
                                     std::size_t total_steps) {
  cfg.validate();
  if (tasks.empty()) throw TrainError("stage1: no tasks");
  if (total_steps == 0) throw TrainError("stage1: zero steps");
  std::vector<Task> task_list;
  for (const auto& [task, pool] : tasks) {
    if (pool.empty())
      throw TrainError(std::string("stage1: task ") + task_name(task) + " has no examples");
    if (!formats.count(task))
      throw TrainError(std::string("stage1: no format for task ") + task_name(task));
    task_list.push_back(task);
  }

  const std::size_t eff = cfg.effective_batch();
  NamedParams params = detail::all_params(model, head, lm);
  Optimizer opt(params, cfg, total_steps);
  std::mt19937_64 rng(cfg.seed);
  std::mt19937_64 mlm_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);

  Stage1Result out;
  std::vector<std::vector<double>> acc(params.size());
  for (std::size_t k = 0; k < params.size(); ++k) acc[k].assign(params[k].second.size(), 0.0);

  for (std::size_t step = 1; step <= total_steps; ++step) {
    const Task task = task_list[rng() % task_list.size()];
    out.batch_counts[task] += 1;
    const auto& pool = tasks.at(task);
    StepRecord rec;
    rec.step = step;
    for (auto& a : acc) std::fill(a.begin(), a.end(), 0.0);
    for (std::size_t ms = 0; ms < eff; ms += cfg.per_device) {
      std::vector<const MCExample*> micro;
      for (std::size_t i = ms; i < std::min(eff, ms + cfg.per_device); ++i)
        micro.push_back(&pool[rng() % pool.size()]);
      StepRecord part;
      try {
        part = detail::micro_step(micro, model, head, lm, formats, vocab, cfg, eff, mlm_rng,
                                  params, acc);
      } catch (const TensorError& e) {
        throw TrainError("stage1: non-finite loss at step " + std::to_string(step) + ": " +
                         e.what());
      }
      rec.loss += part.loss;
      rec.lm_loss += part.lm_loss;
      rec.mc_loss += part.mc_loss;
    }
    if (!std::isfinite(rec.loss))
      throw TrainError("stage1: non-finite loss at step " + std::to_string(step));
    opt.step(acc);
    rec.lm_loss /= static_cast<double>(eff);
    rec.mc_loss /= static_cast<double>(eff);
    out.result.curve.push_back(rec);
  }
  return out;
}

// Uniform sample without replacement of round(fraction * n) examples,
// deterministic per seed.
inline std::vector<MCExample> few_shot_subsample(const std::vector<MCExample>& data,
                                                 double fraction, std::uint64_t seed) {
  if (fraction <= 0.0 || fraction > 1.0) throw TrainError("fewshot: fraction must be in (0, 1]");
  const std::size_t k =
      static_cast<std::size_t>(std::lround(fraction * static_cast<double>(data.size())));
  if (k == 0) throw TrainError("fewshot: subsample is empty");
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<MCExample> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back(data[order[i]]);
  return out;
}

}  // namespace mcqa
