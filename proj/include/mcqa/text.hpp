#pragma once

// Vocabulary construction, word-level tokenization, and JSONL dataset
// ingestion for the four multiple-choice task formats.

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

namespace mcqa {

struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

enum class Task { social_iqa, cosmos_qa, hella_swag, winogrande };

inline const char* task_name(Task t) {
  switch (t) {
    case Task::social_iqa: return "social_iqa";
    case Task::cosmos_qa: return "cosmos_qa";
    case Task::hella_swag: return "hella_swag";
    case Task::winogrande: return "winogrande";
  }
  return "?";
}

inline Task task_from_name(const std::string& s) {
  if (s == "social_iqa") return Task::social_iqa;
  if (s == "cosmos_qa") return Task::cosmos_qa;
  if (s == "hella_swag") return Task::hella_swag;
  if (s == "winogrande") return Task::winogrande;
  throw DataError("unknown task: " + s);
}

inline std::size_t task_choice_count(Task t) {
  switch (t) {
    case Task::social_iqa: return 3;
    case Task::cosmos_qa: return 4;
    case Task::hella_swag: return 4;
    case Task::winogrande: return 2;
  }
  return 0;
}

// Lowercased word-level split: alphanumeric runs (apostrophes kept inside
// words) plus single punctuation tokens.
inline std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&]() {
    if (!cur.empty()) {
      out.push_back(cur);
      cur.clear();
    }
  };
  for (unsigned char c : text) {
    if (std::isalnum(c) || c == '\'') {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else {
      flush();
      if (!std::isspace(c)) out.push_back(std::string(1, static_cast<char>(c)));
    }
  }
  flush();
  return out;
}

using TokenId = std::size_t;

class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kCls = 1;
  static constexpr TokenId kSep = 2;
  static constexpr TokenId kUnk = 3;
  static constexpr TokenId kMask = 4;
  static constexpr std::size_t kNumReserved = 5;

  Vocabulary() {
    for (const char* t : {"[PAD]", "[CLS]", "[SEP]", "[UNK]", "[MASK]"}) add(t);
  }

  // Tokens with count >= min_count, ids assigned by frequency desc then
  // lexicographic, after the reserved block.
  template <typename Iter>
  static Vocabulary build(Iter begin, Iter end, std::size_t min_count = 1) {
    std::map<std::string, std::size_t> counts;
    bool any = false;
    for (Iter it = begin; it != end; ++it) {
      any = true;
      for (auto& w : split_words(*it)) ++counts[w];
    }
    if (!any) throw DataError("build_vocab: empty corpus");
    std::vector<std::pair<std::string, std::size_t>> order(counts.begin(), counts.end());
    std::stable_sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
    Vocabulary v;
    for (auto& [tok, cnt] : order)
      if (cnt >= min_count) v.add(tok);
    return v;
  }

  static Vocabulary build(const std::vector<std::string>& corpus, std::size_t min_count = 1) {
    return build(corpus.begin(), corpus.end(), min_count);
  }

  std::size_t size() const { return id_to_token_.size(); }

  bool contains(const std::string& tok) const { return token_to_id_.count(tok) > 0; }

  TokenId id(const std::string& tok) const {
    auto it = token_to_id_.find(tok);
    return it == token_to_id_.end() ? kUnk : it->second;
  }

  const std::string& token(TokenId id) const {
    if (id >= id_to_token_.size()) throw DataError("token id out of range: " + std::to_string(id));
    return id_to_token_[id];
  }

  std::vector<TokenId> encode(const std::string& text) const {
    std::vector<TokenId> ids;
    for (auto& w : split_words(text)) ids.push_back(id(w));
    return ids;
  }

  std::string decode(const std::vector<TokenId>& ids) const {
    std::string out;
    for (auto i : ids) {
      if (!out.empty()) out += ' ';
      out += token(i);
    }
    return out;
  }

  void save(std::ostream& os) const {
    for (auto& t : id_to_token_) os << t << '\n';
  }

  static Vocabulary load(std::istream& is) {
    Vocabulary v;
    std::string line;
    std::size_t idx = 0;
    while (std::getline(is, line)) {
      if (idx < kNumReserved) {
        if (line != v.id_to_token_[idx])
          throw DataError("vocabulary file: reserved token mismatch at id " + std::to_string(idx));
      } else {
        v.add(line);
      }
      ++idx;
    }
    if (idx < kNumReserved) throw DataError("vocabulary file truncated");
    return v;
  }

 private:
  void add(const std::string& tok) {
    if (token_to_id_.count(tok)) throw DataError("duplicate vocabulary token: " + tok);
    token_to_id_[tok] = id_to_token_.size();
    id_to_token_.push_back(tok);
  }

  std::unordered_map<std::string, TokenId> token_to_id_;
  std::vector<std::string> id_to_token_;
};

inline std::vector<TokenId> tokenize(const std::string& text, const Vocabulary& vocab) {
  return vocab.encode(text);
}

// One multiple-choice instance.
struct MCExample {
  std::string id;
  std::string context;
  std::string question;  // empty allowed (hella_swag)
  std::vector<std::string> choices;
  std::size_t gold = 0;
  Task task = Task::social_iqa;

  void validate() const {
    if (choices.size() < 2 || choices.size() > 4)
      throw DataError("example " + id + ": choice count " + std::to_string(choices.size()) +
                      " outside [2,4]");
    if (choices.size() != task_choice_count(task))
      throw DataError("example " + id + ": task " + task_name(task) + " expects " +
                      std::to_string(task_choice_count(task)) + " choices, got " +
                      std::to_string(choices.size()));
    if (gold >= choices.size())
      throw DataError("example " + id + ": gold index " + std::to_string(gold) + " out of range");
    if (task == Task::winogrande) {
      auto first = context.find('_');
      if (first == std::string::npos || context.find('_', first + 1) != std::string::npos)
        throw DataError("example " + id + ": winogrande context must contain exactly one '_'");
    }
    if (task == Task::hella_swag && !question.empty())
      throw DataError("example " + id + ": hella_swag question must be empty");
  }

  nlohmann::json to_json() const {
    return {{"id", id},       {"context", context}, {"question", question},
            {"choices", choices}, {"gold", gold},   {"task", task_name(task)}};
  }

  static MCExample from_json(const nlohmann::json& j) {
    MCExample ex;
    for (const char* field : {"id", "context", "question", "choices", "gold", "task"})
      if (!j.contains(field)) throw DataError(std::string("missing field '") + field + "'");
    ex.id = j.at("id").get<std::string>();
    ex.context = j.at("context").get<std::string>();
    ex.question = j.at("question").get<std::string>();
    ex.choices = j.at("choices").get<std::vector<std::string>>();
    if (!j.at("gold").is_number_unsigned())
      throw DataError("field 'gold' must be a non-negative integer");
    ex.gold = j.at("gold").get<std::size_t>();
    ex.task = task_from_name(j.at("task").get<std::string>());
    ex.validate();
    return ex;
  }
};

inline std::vector<MCExample> load_jsonl(const std::string& path, std::optional<Task> expect_task = {}) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open dataset file: " + path);
  std::vector<MCExample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      MCExample ex = MCExample::from_json(j);
      if (expect_task && ex.task != *expect_task)
        throw DataError("task is " + std::string(task_name(ex.task)) + ", expected " +
                        task_name(*expect_task));
      out.push_back(std::move(ex));
    } catch (const std::exception& e) {
      throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline void save_jsonl(const std::string& path, const std::vector<MCExample>& examples) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write dataset file: " + path);
  for (auto& ex : examples) os << ex.to_json().dump() << '\n';
}

}  // namespace mcqa
