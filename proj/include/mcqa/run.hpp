#pragma once

// Run-directory plumbing shared by the CLI: key-value configuration files
// with flag overrides, lock files, atomic writes, a content-hash manifest,
// and self-contained checkpoint bundles (model config + vocabulary +
// provenance + parameters).

#include <filesystem>
#include <map>

#include "mcqa/eval.hpp"
#include "mcqa/fusion.hpp"
#include "mcqa/sha256.hpp"
#include "mcqa/xseg.hpp"

namespace mcqa {

struct RunError : std::runtime_error {
  explicit RunError(const std::string& msg) : std::runtime_error(msg) {}
};

// Plain `key = value` lines, '#' comments. Values stay strings until read.
class KVConfig {
 public:
  KVConfig() = default;

  static KVConfig load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw RunError("cannot open config file: " + path);
    KVConfig cfg;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw RunError(path + ":" + std::to_string(lineno) + ": expected 'key = value'");
      cfg.values_[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    return cfg;
  }

  // flags win over file values
  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  void merge(const KVConfig& overrides) {
    for (auto& [k, v] : overrides.values_) values_[k] = v;
  }
  bool has(const std::string& key) const { return values_.count(key) != 0; }

  std::string get(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }
  double get_double(const std::string& key, double fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : std::stod(it->second);
  }
  std::size_t get_size(const std::string& key, std::size_t fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : std::stoul(it->second);
  }
  bool get_bool(const std::string& key, bool fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    if (it->second == "true" || it->second == "1") return true;
    if (it->second == "false" || it->second == "0") return false;
    throw RunError("config key '" + key + "' is not a boolean: " + it->second);
  }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (auto& [k, v] : values_) j[k] = v;
    return j;
  }

 private:
  static std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
  }

  std::map<std::string, std::string> values_;
};

inline void atomic_write_text(const std::string& path, const std::string& body) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw RunError("cannot write " + tmp);
    os.write(body.data(), static_cast<std::streamsize>(body.size()));
    if (!os) throw RunError("short write on " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw RunError("cannot rename into place: " + path);
}

// One run per directory. The lock file blocks concurrent writers; the
// manifest lists every artifact as "sha256  relative-path".
class RunDirectory {
 public:
  explicit RunDirectory(std::string path) : path_(std::move(path)) {
    std::filesystem::create_directories(path_);
    const std::string lock = file("lock");
    if (std::filesystem::exists(lock))
      throw RunError("run directory is locked (stale lock? remove " + lock + "): " + path_);
    std::ofstream os(lock);
    if (!os) throw RunError("cannot create lock file: " + lock);
    os << "locked\n";
    locked_ = true;
  }

  ~RunDirectory() { unlock(); }
  RunDirectory(const RunDirectory&) = delete;
  RunDirectory& operator=(const RunDirectory&) = delete;

  const std::string& path() const { return path_; }
  std::string file(const std::string& rel) const { return path_ + "/" + rel; }

  // config snapshot; must be written before any training artifact
  void write_config(const nlohmann::json& merged) {
    write_text("config.json", merged.dump(2) + "\n");
  }

  void write_text(const std::string& rel, const std::string& body) {
    atomic_write_text(file(rel), body);
    record(rel);
  }

  // for artifacts written by their own savers (checkpoints, stores)
  void record(const std::string& rel) {
    hashes_[rel] = Sha256::of_file(file(rel));
    std::string manifest;
    for (auto& [r, h] : hashes_) manifest += h + "  " + r + "\n";
    atomic_write_text(file("manifest.txt"), manifest);
  }

  void unlock() {
    if (locked_) {
      std::error_code ec;
      std::filesystem::remove(file("lock"), ec);
      locked_ = false;
    }
  }

 private:
  std::string path_;
  bool locked_ = false;
  std::map<std::string, std::string> hashes_;
};

// ---- self-contained checkpoint bundles ----

inline nlohmann::json vocab_to_json(const Vocabulary& vocab) {
  std::ostringstream os;
  vocab.save(os);
  nlohmann::json tokens = nlohmann::json::array();
  std::istringstream is(os.str());
  std::string line;
  while (std::getline(is, line)) tokens.push_back(line);
  return tokens;
}

inline Vocabulary vocab_from_json(const nlohmann::json& j) {
  std::ostringstream os;
  for (const auto& t : j) os << t.get<std::string>() << '\n';
  std::istringstream is(os.str());
  return Vocabulary::load(is);
}

struct ModelBundle {
  TransformerModel model;
  McHead head;
  LmHead lm;
  Vocabulary vocab;
  FormatKind format = FormatKind::standard;
  std::vector<std::string> trained_tasks;

  ModelBundle(const ModelConfig& cfg, const Vocabulary& v, FormatKind fmt,
              std::uint64_t head_seed)
      : model(cfg), head(McHead::init(cfg.d, head_seed)), lm(LmHead::init(cfg.vocab_size)),
        vocab(v), format(fmt) {}

  NamedParams params() const { return detail::all_params(model, head, lm); }

  void save(const std::string& path) const {
    nlohmann::json meta = {{"model", model.config().to_json()},
                           {"vocab", vocab_to_json(vocab)},
                           {"format", format_name(format)},
                           {kTrainedTasksKey, trained_tasks}};
    Checkpoint::from_params(std::move(meta), params()).save(path);
  }

  static ModelBundle load(const std::string& path) {
    return from_checkpoint(Checkpoint::load(path));
  }

  static ModelBundle from_checkpoint(const Checkpoint& ck) {
    const ModelConfig cfg = ModelConfig::from_json(ck.meta.at("model"));
    Vocabulary vocab = vocab_from_json(ck.meta.at("vocab"));
    ModelBundle b(cfg, vocab, format_from_name(ck.meta.at("format").get<std::string>()), 0);
    if (ck.meta.contains(kTrainedTasksKey))
      for (const auto& t : ck.meta.at(kTrainedTasksKey))
        b.trained_tasks.push_back(t.get<std::string>());
    ck.restore_into(b.params());
    return b;
  }
};

// ---- prediction TSV loader (ensemble input) ----

inline std::vector<Prediction> load_predictions_tsv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open predictions file: " + path);
  std::vector<Prediction> out;
  std::string line;
  std::getline(is, line);
  if (line != "id\tgold\tpredicted\tprobabilities")
    throw DataError("unexpected predictions header in " + path);
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    Prediction p;
    std::string gold, predicted, probs;
    if (!std::getline(ls, p.id, '\t') || !std::getline(ls, gold, '\t') ||
        !std::getline(ls, predicted, '\t') || !std::getline(ls, probs, '\t'))
      throw DataError(path + ":" + std::to_string(lineno) + ": malformed prediction row");
    p.gold = std::stoul(gold);
    p.predicted = std::stoul(predicted);
    std::istringstream ps(probs);
    std::string v;
    while (std::getline(ps, v, ',')) p.probs.push_back(std::stod(v));
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace mcqa
