#pragma once

// Accuracy and the analysis harnesses: information-masking tables,
// question-type classification and zero-shot type transfer, and cross-task
// transfer with a provenance guard.

#include <array>
#include <iomanip>
#include <optional>
#include <sstream>

#include "mcqa/train.hpp"

namespace mcqa {

// ---- question types ----

enum class QuestionType { wants, reactions, descriptions, motivations, needs, effects };
inline constexpr std::size_t kNumQuestionTypes = 6;

inline const char* question_type_name(QuestionType t) {
  switch (t) {
    case QuestionType::wants: return "wants";
    case QuestionType::reactions: return "reactions";
    case QuestionType::descriptions: return "descriptions";
    case QuestionType::motivations: return "motivations";
    case QuestionType::needs: return "needs";
    case QuestionType::effects: return "effects";
  }
  return "?";
}

inline QuestionType question_type_from_name(const std::string& s) {
  for (std::size_t i = 0; i < kNumQuestionTypes; ++i)
    if (s == question_type_name(static_cast<QuestionType>(i)))
      return static_cast<QuestionType>(i);
  throw DataError("unknown question type: " + s);
}

// Priority-ordered keyword rules; earlier rules win. Keywords may be
// multi-word phrases, matched on word boundaries in the lowercased question.
class QuestionTypeRules {
 public:
  static QuestionTypeRules load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open question-type rule file: " + path);
    QuestionTypeRules rules;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      const auto colon = line.find(':');
      if (colon == std::string::npos)
        throw DataError(path + ":" + std::to_string(lineno) + ": expected 'type: keywords'");
      const QuestionType type = question_type_from_name(trim(line.substr(0, colon)));
      std::vector<std::string> keywords;
      std::stringstream ss(line.substr(colon + 1));
      std::string kw;
      while (std::getline(ss, kw, ',')) {
        kw = normalize(kw);
        if (!kw.empty()) keywords.push_back(kw);
      }
      if (keywords.empty())
        throw DataError(path + ":" + std::to_string(lineno) + ": rule has no keywords");
      rules.rules_.emplace_back(type, std::move(keywords));
    }
    if (rules.rules_.empty()) throw DataError("question-type rule file is empty: " + path);
    return rules;
  }

  std::optional<QuestionType> classify(const std::string& question) const {
    const std::string padded = " " + normalize(question) + " ";
    for (const auto& [type, keywords] : rules_) {
      for (const auto& kw : keywords)
        if (padded.find(" " + kw + " ") != std::string::npos) return type;
    }
    return std::nullopt;
  }

  std::size_t size() const { return rules_.size(); }

 private:
  static std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
  }
  // lowercased words joined by single spaces
  static std::string normalize(const std::string& s) {
    std::string out;
    for (const auto& w : split_words(s)) {
      if (!out.empty()) out += ' ';
      out += w;
    }
    return out;
  }

  std::vector<std::pair<QuestionType, std::vector<std::string>>> rules_;
};

inline std::string default_question_types_path() {
  return std::string(MCQA_DATA_DIR) + "/question_types.txt";
}

// ---- predictions and accuracy ----

struct Prediction {
  std::string id;
  std::size_t gold = 0;
  std::size_t predicted = 0;
  std::vector<double> probs;
};

inline std::vector<Prediction> predict_all(const TransformerModel& model, const McHead& head,
                                           const std::vector<MCExample>& data, FormatKind format,
                                           const Vocabulary& vocab) {
  std::vector<Prediction> out;
  for (const auto& ex : data) {
    auto cs = choice_scores(ex, model, head, format, vocab);
    out.push_back({ex.id, ex.gold, cs.predicted(), cs.probs});
  }
  return out;
}

inline double accuracy_of(const std::vector<Prediction>& preds) {
  if (preds.empty()) throw TrainError("accuracy: no predictions");
  std::size_t hits = 0;
  for (const auto& p : preds)
    if (p.predicted == p.gold) ++hits;
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

inline double accuracy(const TransformerModel& model, const McHead& head,
                       const std::vector<MCExample>& data, FormatKind format,
                       const Vocabulary& vocab) {
  return accuracy_of(predict_all(model, head, data, format, vocab));
}

inline void save_predictions_tsv(const std::vector<Prediction>& preds, const std::string& path) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp);
    if (!os) throw DataError("cannot write predictions: " + tmp);
    os << "id\tgold\tpredicted\tprobabilities\n";
    os.precision(17);
    for (const auto& p : preds) {
      os << p.id << "\t" << p.gold << "\t" << p.predicted << "\t";
      for (std::size_t i = 0; i < p.probs.size(); ++i) os << (i ? "," : "") << p.probs[i];
      os << "\n";
    }
    if (!os) throw DataError("short write on predictions: " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw DataError("cannot rename predictions into place: " + path);
}

// ---- masking table ----

struct MaskingTable {
  double full = 0.0;                      // unmasked baseline
  std::array<std::array<double, 3>, 3> cells{};  // [scope][method]

  static constexpr const char* kScopeLabels[3] = {"- Context", "- Question", "- Both"};
  static constexpr const char* kMethodLabels[3] = {"Pad", "Delete", "Filter"};

  std::string render() const {
    std::ostringstream os;
    os << std::fixed << std::setprecision(3);
    os << std::left << std::setw(12) << "" << std::right;
    for (auto* m : kMethodLabels) os << std::setw(8) << m;
    os << "\n" << std::left << std::setw(12) << "Full" << std::right << std::setw(8) << full
       << std::setw(8) << full << std::setw(8) << full << "\n";
    for (std::size_t s = 0; s < 3; ++s) {
      os << std::left << std::setw(12) << kScopeLabels[s] << std::right;
      for (std::size_t m = 0; m < 3; ++m) os << std::setw(8) << cells[s][m];
      os << "\n";
    }
    return os.str();
  }

  nlohmann::json to_json() const {
    nlohmann::json rows;
    for (std::size_t s = 0; s < 3; ++s) {
      nlohmann::json row;
      for (std::size_t m = 0; m < 3; ++m) row[kMethodLabels[m]] = cells[s][m];
      rows[kScopeLabels[s]] = row;
    }
    return {{"full", full}, {"table", rows}};
  }
};

// Inference-only ablation: per (method x scope), mask every example and
// re-score with the unchanged model.
inline MaskingTable masking_eval(const TransformerModel& model, const McHead& head,
                                 const std::vector<MCExample>& data, const Lexicon& lexicon,
                                 FormatKind format, const Vocabulary& vocab) {
  if (data.empty()) throw TrainError("masking_eval: empty dataset");
  MaskingTable out;
  out.full = accuracy(model, head, data, format, vocab);
  const MaskScope scopes[3] = {MaskScope::context, MaskScope::question, MaskScope::both};
  const MaskMethod methods[3] = {MaskMethod::pad, MaskMethod::del, MaskMethod::filter};
  for (std::size_t s = 0; s < 3; ++s) {
    for (std::size_t m = 0; m < 3; ++m) {
      std::vector<MCExample> masked;
      for (const auto& ex : data)
        masked.push_back(apply_mask(ex, {methods[m], scopes[s]}, lexicon, vocab));
      out.cells[s][m] = accuracy(model, head, masked, format, vocab);
    }
  }
  return out;
}

// ---- type transfer ----

struct TypeTransferMatrix {
  std::array<std::array<double, kNumQuestionTypes>, kNumQuestionTypes> cells{};
  std::array<std::array<bool, kNumQuestionTypes>, kNumQuestionTypes> present{};
  std::array<std::size_t, kNumQuestionTypes> train_sizes{}, eval_sizes{};
  std::size_t unclassified = 0;

  std::string render() const {
    std::ostringstream os;
    os << std::fixed << std::setprecision(3);
    os << std::left << std::setw(14) << "train \\ eval" << std::right;
    for (std::size_t j = 0; j < kNumQuestionTypes; ++j)
      os << std::setw(14) << question_type_name(static_cast<QuestionType>(j));
    os << "\n";
    for (std::size_t i = 0; i < kNumQuestionTypes; ++i) {
      os << std::left << std::setw(14) << question_type_name(static_cast<QuestionType>(i))
         << std::right;
      for (std::size_t j = 0; j < kNumQuestionTypes; ++j) {
        if (present[i][j])
          os << std::setw(14) << cells[i][j];
        else
          os << std::setw(14) << "absent";
      }
      os << "\n";
    }
    return os.str();
  }

  nlohmann::json to_json() const {
    nlohmann::json rows;
    for (std::size_t i = 0; i < kNumQuestionTypes; ++i) {
      nlohmann::json row;
      for (std::size_t j = 0; j < kNumQuestionTypes; ++j)
        row[question_type_name(static_cast<QuestionType>(j))] =
            present[i][j] ? nlohmann::json(cells[i][j]) : nlohmann::json(nullptr);
      rows[question_type_name(static_cast<QuestionType>(i))] = row;
    }
    return {{"matrix", rows}, {"unclassified", unclassified}};
  }
};

// Buckets the dataset by question type, splits each bucket into disjoint
// train/eval halves, trains one model per type on its train half, and
// evaluates on every type's eval half. Unclassifiable questions are counted
// and excluded; empty slices mark their cells absent.
inline TypeTransferMatrix type_transfer_matrix(
    const std::vector<MCExample>& data, const QuestionTypeRules& rules,
    const std::function<std::tuple<TransformerModel, McHead, LmHead>(std::uint64_t seed)>& factory,
    FormatKind format, const Vocabulary& vocab, const TrainConfig& cfg) {
  TypeTransferMatrix out;
  std::array<std::vector<MCExample>, kNumQuestionTypes> train_split, eval_split;
  std::array<std::size_t, kNumQuestionTypes> seen{};
  for (const auto& ex : data) {
    auto type = rules.classify(ex.question);
    if (!type) {
      ++out.unclassified;
      continue;
    }
    const auto t = static_cast<std::size_t>(*type);
    // alternate assignment keeps the halves disjoint and near-equal
    (seen[t]++ % 2 == 0 ? train_split[t] : eval_split[t]).push_back(ex);
  }
  for (std::size_t t = 0; t < kNumQuestionTypes; ++t) {
    out.train_sizes[t] = train_split[t].size();
    out.eval_sizes[t] = eval_split[t].size();
  }

  for (std::size_t i = 0; i < kNumQuestionTypes; ++i) {
    if (train_split[i].empty()) continue;
    auto [model, head, lm] = factory(cfg.seed);
    train(model, head, lm, train_split[i], format, vocab, cfg);
    for (std::size_t j = 0; j < kNumQuestionTypes; ++j) {
      if (eval_split[j].empty()) continue;
      out.cells[i][j] = accuracy(model, head, eval_split[j], format, vocab);
      out.present[i][j] = true;
    }
  }
  return out;
}

// ---- task transfer ----

inline constexpr const char* kTrainedTasksKey = "trained_tasks";

struct TaskTransferResult {
  double accuracy = 0.0;
  double chance = 0.0;
  std::vector<std::string> source_tasks;
};

// Zero-shot evaluation of a stage-1 checkpoint on a task it never saw. The
// checkpoint must carry a trained-task provenance list; a missing list or
// one naming the target task is refused.
inline TaskTransferResult task_transfer(const Checkpoint& ckpt, TransformerModel& model,
                                        McHead& head, LmHead& lm,
                                        const std::vector<MCExample>& target_dev,
                                        FormatKind format, const Vocabulary& vocab) {
  if (target_dev.empty()) throw TrainError("task_transfer: empty target dev set");
  const Task target = target_dev.front().task;
  if (!ckpt.meta.contains(kTrainedTasksKey))
    throw TrainError("task_transfer: checkpoint carries no trained-task provenance; refusing");
  TaskTransferResult out;
  for (const auto& t : ckpt.meta.at(kTrainedTasksKey)) {
    const std::string name = t.get<std::string>();
    if (name == task_name(target))
      throw TrainError(std::string("task_transfer: checkpoint was trained on the target task ") +
                       name + "; refusing");
    out.source_tasks.push_back(name);
  }
  ckpt.restore_into(detail::all_params(model, head, lm));
  out.accuracy = accuracy(model, head, target_dev, format, vocab);
  out.chance = 1.0 / static_cast<double>(task_choice_count(target));
  return out;
}

// ---- run report ----

struct RunReport {
  double overall_accuracy = 0.0;
  std::optional<MaskingTable> masking;
  std::optional<TypeTransferMatrix> type_transfer;
  std::optional<TaskTransferResult> transfer;
  nlohmann::json metadata;  // checkpoint hash, dataset hash, seed, ...
  std::vector<Prediction> predictions;

  nlohmann::json to_json() const {
    nlohmann::json j = {{"overall_accuracy", overall_accuracy}, {"metadata", metadata}};
    if (masking) j["masking"] = masking->to_json();
    if (type_transfer) j["type_transfer"] = type_transfer->to_json();
    if (transfer)
      j["task_transfer"] = {{"accuracy", transfer->accuracy},
                            {"chance", transfer->chance},
                            {"source_tasks", transfer->source_tasks}};
    return j;
  }

  std::string render() const {
    std::ostringstream os;
    os << std::fixed << std::setprecision(3);
    os << "accuracy: " << overall_accuracy << "\n";
    if (transfer)
      os << "zero-shot transfer: " << transfer->accuracy << " (chance " << transfer->chance
         << ")\n";
    if (masking) os << "\n" << masking->render();
    if (type_transfer) os << "\n" << type_transfer->render();
    return os.str();
  }

  void save(const std::string& json_path, const std::string& predictions_path) const {
    const std::string tmp = json_path + ".tmp";
    {
      std::ofstream os(tmp);
      if (!os) throw DataError("cannot write report: " + tmp);
      os << to_json().dump(2) << "\n";
      if (!os) throw DataError("short write on report: " + tmp);
    }
    if (std::rename(tmp.c_str(), json_path.c_str()) != 0)
      throw DataError("cannot rename report into place: " + json_path);
    save_predictions_tsv(predictions, predictions_path);
  }
};

}  // namespace mcqa
