#pragma once

// Two-step feature ensemble: extract frozen CLS features from a fine-tuned
// decoder, then fine-tune the encoder with its CLS state combined with the
// stored feature before scoring. Also: k-model majority voting.

#include <map>
#include <sstream>

#include "mcqa/checkpoint.hpp"
#include "mcqa/heads.hpp"
#include "mcqa/sha256.hpp"

namespace mcqa {

// Immutable (example id, choice index) -> feature vector map. Features are
// stored raw (pre-tanh); tanh is applied at combine time. File format:
// 8-byte magic, u64 d, u64 count, sorted key table (u32 id length, id bytes,
// u64 choice), then count * d little-endian float64 values in key order.
class FeatureStore {
 public:
  using Key = std::pair<std::string, std::size_t>;

  static constexpr char kMagic[9] = "MCQAFST1";

  explicit FeatureStore(std::size_t d = 0) : d_(d) {}

  std::size_t d() const { return d_; }
  std::size_t size() const { return values_.size(); }
  bool contains(const std::string& id, std::size_t choice) const {
    return values_.count({id, choice}) != 0;
  }

  void put(const std::string& id, std::size_t choice, const std::vector<double>& v) {
    if (v.size() != d_)
      throw DataError("feature store: vector size " + std::to_string(v.size()) +
                      " does not match d=" + std::to_string(d_));
    values_[{id, choice}] = v;
  }

  const std::vector<double>& get(const std::string& id, std::size_t choice) const {
    auto it = values_.find({id, choice});
    if (it == values_.end())
      throw DataError("feature store: no feature for example '" + id + "' choice " +
                      std::to_string(choice));
    return it->second;
  }

  std::string serialize() const {
    std::ostringstream os(std::ios::binary);
    os.write(kMagic, 8);
    const std::uint64_t d = d_, count = values_.size();
    os.write(reinterpret_cast<const char*>(&d), 8);
    os.write(reinterpret_cast<const char*>(&count), 8);
    for (auto& [key, v] : values_) {  // std::map iterates keys in sorted order
      const std::uint32_t idlen = static_cast<std::uint32_t>(key.first.size());
      os.write(reinterpret_cast<const char*>(&idlen), 4);
      os.write(key.first.data(), idlen);
      const std::uint64_t choice = key.second;
      os.write(reinterpret_cast<const char*>(&choice), 8);
    }
    for (auto& [key, v] : values_)
      os.write(reinterpret_cast<const char*>(v.data()),
               static_cast<std::streamsize>(v.size() * sizeof(double)));
    return std::move(os).str();
  }

  std::string content_hash() const { return Sha256::of_string(serialize()); }

  void save(const std::string& path) const {
    const std::string body = serialize();
    const std::string tmp = path + ".tmp";
    {
      std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
      if (!os) throw DataError("cannot write feature store: " + tmp);
      os.write(body.data(), static_cast<std::streamsize>(body.size()));
      if (!os) throw DataError("short write on feature store: " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
      throw DataError("cannot rename feature store into place: " + path);
  }

  static FeatureStore load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open feature store: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::string(magic, 8) != std::string(kMagic, 8))
      throw DataError("not a feature store file: " + path);
    std::uint64_t d = 0, count = 0;
    is.read(reinterpret_cast<char*>(&d), 8);
    is.read(reinterpret_cast<char*>(&count), 8);
    if (!is) throw DataError("truncated feature store header: " + path);
    FeatureStore store(d);
    std::vector<Key> keys;
    for (std::uint64_t i = 0; i < count; ++i) {
      std::uint32_t idlen = 0;
      is.read(reinterpret_cast<char*>(&idlen), 4);
      std::string id(idlen, '\0');
      is.read(id.data(), idlen);
      std::uint64_t choice = 0;
      is.read(reinterpret_cast<char*>(&choice), 8);
      if (!is) throw DataError("truncated feature store key table: " + path);
      keys.emplace_back(std::move(id), choice);
    }
    for (auto& key : keys) {
      std::vector<double> v(d);
      is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(d * sizeof(double)));
      if (!is || is.gcount() != static_cast<std::streamsize>(d * sizeof(double)))
        throw DataError("truncated feature store value block: " + path);
      store.values_[key] = std::move(v);
    }
    return store;
  }

 private:
  std::size_t d_;
  std::map<Key, std::vector<double>> values_;
};

// Runs every (example, choice) through the decoder layout and stores the raw
// classifier-token state. Forward only; call without an active tape.
inline FeatureStore extract_features(const TransformerModel& decoder,
                                     const std::vector<MCExample>& dataset,
                                     const Vocabulary& vocab) {
  FeatureStore store(decoder.config().d);
  for (const auto& ex : dataset) {
    ex.validate();
    for (std::size_t i = 0; i < ex.choices.size(); ++i) {
      auto seq = format_decoder(ex, i, vocab, decoder.config().max_len);
      Tensor h = decoder.encode(seq);
      store.put(ex.id, i, cls_state(h, seq).data());
    }
  }
  return store;
}

enum class CombineMode { concat, mean };

inline const char* combine_mode_name(CombineMode m) {
  return m == CombineMode::concat ? "concat" : "mean";
}

inline CombineMode combine_mode_from_name(const std::string& s) {
  if (s == "concat") return CombineMode::concat;
  if (s == "mean") return CombineMode::mean;
  throw DataError("unknown combine mode: " + s);
}

// concat -> [tanh(feat) ; cls] of size 2d; mean -> (tanh(feat) + cls) / 2.
inline Tensor combine(const Tensor& feat, const Tensor& cls, CombineMode mode) {
  if (feat.rank() != 1 || cls.rank() != 1 || feat.size() != cls.size())
    throw TensorError("combine: expected equal-length vectors, got " + shape_str(feat.shape()) +
                      " and " + shape_str(cls.shape()));
  if (mode == CombineMode::concat) return concat({tanh(feat), cls});
  return scale(add(tanh(feat), cls), 0.5);
}

// Single affine scorer on the combined state; input width is fixed by the
// combine mode at construction.
struct FusionScorerParams {
  Tensor w_t, b_t;
  CombineMode mode = CombineMode::concat;

  static FusionScorerParams init(std::size_t d, std::uint64_t seed,
                                 CombineMode mode = CombineMode::concat) {
    std::mt19937_64 rng(seed);
    FusionScorerParams p;
    p.mode = mode;
    p.w_t = detail::init_normal({mode == CombineMode::concat ? 2 * d : d, 1}, rng);
    p.b_t = Tensor::zeros({1}, true);
    return p;
  }

  NamedParams named_params(const std::string& prefix = "fusion.") const {
    return {{prefix + "w_t", w_t}, {prefix + "b_t", b_t}};
  }
};

inline std::vector<Tensor> fused_score_choices(const MCExample& ex,
                                               const TransformerModel& encoder,
                                               const FeatureStore& store,
                                               const FusionScorerParams& params,
                                               const Vocabulary& vocab) {
  std::vector<Tensor> scores;
  for (std::size_t i = 0; i < ex.choices.size(); ++i) {
    auto seq = format_standard(ex, i, vocab, encoder.config().max_len);
    Tensor cls = cls_state(encoder.encode(seq), seq);
    // stored features enter as fresh constants, so no gradient reaches them
    Tensor feat(std::vector<std::size_t>{store.d()}, store.get(ex.id, i));
    scores.push_back(affine(combine(feat, cls, params.mode), params.w_t, params.b_t));
  }
  return scores;
}

inline Tensor fused_mc_loss(const MCExample& ex, const TransformerModel& encoder,
                            const FeatureStore& store, const FusionScorerParams& params,
                            const Vocabulary& vocab) {
  ex.validate();
  return cross_entropy(stack_scalars(fused_score_choices(ex, encoder, store, params, vocab)),
                       ex.gold);
}

inline ChoiceScores fused_choice_scores(const MCExample& ex, const TransformerModel& encoder,
                                        const FeatureStore& store,
                                        const FusionScorerParams& params, const Vocabulary& vocab) {
  std::vector<double> raw;
  for (auto& s : fused_score_choices(ex, encoder, store, params, vocab)) raw.push_back(s.item());
  return normalize_scores(std::move(raw));
}

// Per-example modal prediction over k models. Ties go to the candidate with
// the highest summed normalized probability across models, then lowest index.
inline std::vector<std::size_t> majority_vote(
    const std::vector<std::vector<std::size_t>>& predictions,
    const std::vector<std::vector<std::vector<double>>>& probabilities) {
  if (predictions.empty()) throw DataError("majority_vote: no models");
  if (probabilities.size() != predictions.size())
    throw DataError("majority_vote: predictions/probabilities model count mismatch");
  const std::size_t n = predictions[0].size();
  for (std::size_t m = 0; m < predictions.size(); ++m)
    if (predictions[m].size() != n || probabilities[m].size() != n)
      throw DataError("majority_vote: model " + std::to_string(m) + " has a different list length");

  std::vector<std::size_t> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t n_choices = probabilities[0][i].size();
    std::vector<std::size_t> votes(n_choices, 0);
    std::vector<double> prob_sum(n_choices, 0.0);
    for (std::size_t m = 0; m < predictions.size(); ++m) {
      if (predictions[m][i] >= n_choices || probabilities[m][i].size() != n_choices)
        throw DataError("majority_vote: inconsistent choice count at example " +
                        std::to_string(i));
      votes[predictions[m][i]] += 1;
      for (std::size_t c = 0; c < n_choices; ++c) prob_sum[c] += probabilities[m][i][c];
    }
    std::size_t best = 0;
    for (std::size_t c = 1; c < n_choices; ++c) {
      if (votes[c] > votes[best] ||
          (votes[c] == votes[best] && prob_sum[c] > prob_sum[best]))
        best = c;
    }
    out[i] = best;
  }
  return out;
}

}  // namespace mcqa
