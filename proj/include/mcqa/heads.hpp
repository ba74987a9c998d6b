#pragma once

// Choice scoring head, candidate softmax normalization, MLM/LM auxiliary
// losses, and the joint multi-task objective.

#include <optional>
#include <random>

#include "mcqa/transformer.hpp"

namespace mcqa {

// MLP on the classifier-token state: one hidden layer (d -> d, tanh), then
// linear d -> 1.
struct McHead {
  Tensor w1, b1, w2, b2;

  static McHead init(std::size_t d, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    McHead h;
    h.w1 = detail::init_normal({d, d}, rng);
    h.b1 = Tensor::zeros({d}, true);
    h.w2 = detail::init_normal({d, 1}, rng);
    h.b2 = Tensor::zeros({1}, true);
    return h;
  }

  NamedParams named_params(const std::string& prefix = "mc_head.") const {
    return {{prefix + "w1", w1}, {prefix + "b1", b1}, {prefix + "w2", w2}, {prefix + "b2", b2}};
  }

  Tensor score(const Tensor& cls) const {
    if (cls.rank() != 1 || cls.size() != w1.dim(0))
      throw TensorError("mc head expects a hidden vector of size " + std::to_string(w1.dim(0)) +
                        ", got " + shape_str(cls.shape()));
    return affine(tanh(affine(cls, w1, b1)), w2, b2);
  }
};

// Language-model output head. Logits are tied to the token embedding matrix;
// only the per-token bias is an extra parameter.
struct LmHead {
  Tensor bias;

  static LmHead init(std::size_t vocab_size) {
    LmHead h;
    h.bias = Tensor::zeros({vocab_size}, true);
    return h;
  }

  NamedParams named_params(const std::string& prefix = "lm_head.") const {
    return {{prefix + "bias", bias}};
  }

  // [k x V] logits for the given hidden rows.
  Tensor logits(const Tensor& hidden_rows, const Tensor& tok_emb) const {
    return add(matmul(hidden_rows, transpose(tok_emb)), bias);
  }
};

// Raw per-choice scores and their softmax normalization.
struct ChoiceScores {
  std::vector<double> raw;
  std::vector<double> probs;

  std::size_t predicted() const {
    return static_cast<std::size_t>(
        std::max_element(raw.begin(), raw.end()) - raw.begin());
  }
};

inline ChoiceScores normalize_scores(std::vector<double> raw) {
  ChoiceScores out;
  out.raw = std::move(raw);
  const double mx = *std::max_element(out.raw.begin(), out.raw.end());
  double z = 0.0;
  for (double v : out.raw) z += std::exp(v - mx);
  for (double v : out.raw) out.probs.push_back(std::exp(v - mx) / z);
  return out;
}

// Raw score per choice for one example (forward only; run without a tape for
// inference).
inline std::vector<Tensor> score_choices(const MCExample& ex, const TransformerModel& model,
                                         const McHead& head, FormatKind format,
                                         const Vocabulary& vocab) {
  std::vector<Tensor> scores;
  for (std::size_t i = 0; i < ex.choices.size(); ++i) {
    auto seq = format_example(ex, i, format, vocab, model.config().max_len);
    Tensor h = model.encode(seq);
    scores.push_back(head.score(cls_state(h, seq)));
  }
  return scores;
}

inline ChoiceScores choice_scores(const MCExample& ex, const TransformerModel& model,
                                  const McHead& head, FormatKind format, const Vocabulary& vocab) {
  std::vector<double> raw;
  for (auto& s : score_choices(ex, model, head, format, vocab)) raw.push_back(s.item());
  return normalize_scores(std::move(raw));
}

// N-way cross-entropy over the softmax-normalized choice scores.
inline Tensor mc_loss(const MCExample& ex, const TransformerModel& model, const McHead& head,
                      FormatKind format, const Vocabulary& vocab) {
  ex.validate();
  return cross_entropy(stack_scalars(score_choices(ex, model, head, format, vocab)), ex.gold);
}

// One MLM corruption of a sequence: selected positions with their original
// ids, plus the corrupted input.
struct MlmBatch {
  TokenSequence corrupted;
  std::vector<std::size_t> positions;
  std::vector<std::size_t> gold_ids;
};

// Each eligible (non-special, non-pad) position is independently selected
// with probability rate; selected positions become [MASK] 80% of the time, a
// random vocabulary token 10%, and stay unchanged 10%.
inline MlmBatch mlm_corrupt(const TokenSequence& seq, double rate, std::mt19937_64& rng,
                            std::size_t vocab_size) {
  if (rate <= 0.0 || rate >= 1.0) throw TensorError("mlm rate must be in (0, 1)");
  if (vocab_size <= Vocabulary::kNumReserved)
    throw TensorError("mlm_corrupt: vocabulary has no maskable tokens");
  MlmBatch out;
  out.corrupted = seq;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t i = 0; i < seq.ids.size(); ++i) {
    if (seq.pad[i] || seq.ids[i] < Vocabulary::kNumReserved) continue;
    if (u(rng) >= rate) continue;
    out.positions.push_back(i);
    out.gold_ids.push_back(seq.ids[i]);
    const double r = u(rng);
    if (r < 0.8) {
      out.corrupted.ids[i] = Vocabulary::kMask;
    } else if (r < 0.9) {
      out.corrupted.ids[i] = Vocabulary::kNumReserved +
                             rng() % (vocab_size - Vocabulary::kNumReserved);
    }  // else keep the original token
  }
  return out;
}

// Mean masked-token cross-entropy on the corrupted sequence; zero when
// nothing was selected.
inline Tensor mlm_loss(const MlmBatch& batch, const TransformerModel& model, const LmHead& lm) {
  if (batch.positions.empty()) return Tensor::scalar(0.0);
  Tensor h = model.encode(batch.corrupted);
  Tensor logits = lm.logits(gather_rows(h, batch.positions), model.token_embedding());
  return cross_entropy_rows(logits, batch.gold_ids);
}

// Next-token loss over all non-pad positions: position t predicts token t+1.
inline Tensor causal_lm_loss(const TokenSequence& seq, const TransformerModel& model,
                             const LmHead& lm) {
  const std::size_t n = seq.content_length();
  if (n < 2) return Tensor::scalar(0.0);
  std::vector<std::size_t> positions(n - 1);
  std::vector<std::size_t> targets(n - 1);
  for (std::size_t t = 0; t + 1 < n; ++t) {
    positions[t] = t;
    targets[t] = seq.ids[t + 1];
  }
  Tensor h = model.encode(seq);
  Tensor logits = lm.logits(gather_rows(h, positions), model.token_embedding());
  return cross_entropy_rows(logits, targets);
}

struct JointLossStats {
  std::size_t lm_sequences = 0;  // how many sequences fed the LM term
  double mc = 0.0;
  double lm = 0.0;
};

// mc_loss + lm_weight * LM term, where the LM term sees only the
// gold-choice sequence: MLM for bidirectional models, next-token LM for
// causal ones.
inline Tensor joint_loss(const MCExample& ex, const TransformerModel& model, const McHead& head,
                         const LmHead& lm, FormatKind format, const Vocabulary& vocab,
                         std::mt19937_64& rng, double mlm_rate = 0.15, double lm_weight = 1.0,
                         JointLossStats* stats = nullptr) {
  Tensor mc = mc_loss(ex, model, head, format, vocab);
  if (stats) {
    stats->mc = mc.item();
    stats->lm = 0.0;
    stats->lm_sequences = 0;
  }
  if (lm_weight == 0.0) return mc;

  const FormatKind gold_format =
      model.config().direction == Direction::causal ? FormatKind::decoder_standard : format;
  auto gold_seq = format_example(ex, ex.gold, gold_format, vocab, model.config().max_len);
  Tensor lm_term;
  if (model.config().direction == Direction::causal) {
    lm_term = causal_lm_loss(gold_seq, model, lm);
  } else {
    lm_term = mlm_loss(mlm_corrupt(gold_seq, mlm_rate, rng, model.config().vocab_size), model, lm);
  }
  if (stats) {
    stats->lm = lm_term.item();
    stats->lm_sequences = 1;
  }
  return add(mc, scale(lm_term, lm_weight));
}

}  // namespace mcqa
