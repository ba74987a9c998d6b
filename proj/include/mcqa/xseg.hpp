#pragma once

// Inter-segment attention over the encoder's final hidden states: a shared
// affine projection per segment, scaled softmax attention between segments
// only, and a pooling/fusion head producing a choice score. The base
// encoder's self-attention is untouched; this head is strictly additive.

#include <random>

#include <json.hpp>

#include "mcqa/heads.hpp"
#include "mcqa/transformer.hpp"

namespace mcqa {

// Fusion recipe over the six cross-representations. Pooling is max over the
// sequence dimension; the pooled vectors are combined, passed through ReLU,
// a linear layer to d, tanh, and a final linear layer to a scalar.
struct FusionConfig {
  enum class Combine { concat, add };
  Combine combine = Combine::concat;
  bool include_cls = false;  // experimental: also feed the [CLS] state

  std::size_t input_size(std::size_t d) const {
    return (combine == Combine::concat ? 6 * d : d) + (include_cls ? d : 0);
  }

  nlohmann::json to_json() const {
    return {{"pool", "max"},
            {"combine", combine == Combine::concat ? "concat" : "add"},
            {"include_cls", include_cls}};
  }

  static FusionConfig from_json(const nlohmann::json& j) {
    FusionConfig c;
    if (j.at("pool").get<std::string>() != "max")
      throw TensorError("fusion config: unknown pooling " + j.at("pool").get<std::string>());
    const auto comb = j.at("combine").get<std::string>();
    if (comb == "concat") c.combine = Combine::concat;
    else if (comb == "add") c.combine = Combine::add;
    else throw TensorError("fusion config: unknown combination " + comb);
    c.include_cls = j.at("include_cls").get<bool>();
    return c;
  }
};

// One shared (W, b1) pair projects all three segments; the fusion layers sit
// on the pooled cross-representations.
struct XSegParams {
  Tensor w, b1;
  Tensor fuse_w1, fuse_b1, fuse_w2, fuse_b2;
  FusionConfig fusion;

  static XSegParams init(std::size_t d, std::uint64_t seed, FusionConfig cfg = {}) {
    std::mt19937_64 rng(seed);
    XSegParams p;
    p.fusion = cfg;
    p.w = detail::init_normal({d, d}, rng);
    p.b1 = Tensor::zeros({d}, true);
    p.fuse_w1 = detail::init_normal({cfg.input_size(d), d}, rng);
    p.fuse_b1 = Tensor::zeros({d}, true);
    p.fuse_w2 = detail::init_normal({d, 1}, rng);
    p.fuse_b2 = Tensor::zeros({1}, true);
    return p;
  }

  NamedParams named_params(const std::string& prefix = "xseg.") const {
    return {{prefix + "w", w},
            {prefix + "b1", b1},
            {prefix + "fuse_w1", fuse_w1},
            {prefix + "fuse_b1", fuse_b1},
            {prefix + "fuse_w2", fuse_w2},
            {prefix + "fuse_b2", fuse_b2}};
  }
};

// Row-wise affine map shared across segments.
inline Tensor project(const Tensor& h, const XSegParams& params) {
  return add(matmul(h, params.w), params.b1);
}

// Attention from src rows onto unprojected tgt rows, sqrt(d)-scaled softmax
// over valid tgt keys only. Invalid src rows output exactly zero.
inline Tensor cross_attend(const Tensor& h_src, const Tensor& h_tgt,
                           const std::vector<std::uint8_t>& src_mask,
                           const std::vector<std::uint8_t>& tgt_mask, const XSegParams& params) {
  const std::size_t l = h_src.dim(0);
  const std::size_t d = h_src.dim(1);
  if (h_tgt.dim(1) != d || src_mask.size() != l || tgt_mask.size() != h_tgt.dim(0))
    throw TensorError("cross_attend shape mismatch");
  bool any_tgt = false;
  for (auto v : tgt_mask) any_tgt = any_tgt || v;
  if (!any_tgt) throw TensorError("cross_attend: target segment is empty (no valid keys)");

  Tensor q = project(h_src, params);
  Tensor k = project(h_tgt, params);
  Tensor scores = matmul(q, transpose(k));
  Tensor mask = Tensor::zeros(scores.shape());
  for (std::size_t i = 0; i < l; ++i)
    for (std::size_t j = 0; j < h_tgt.dim(0); ++j)
      mask.data()[i * h_tgt.dim(0) + j] = tgt_mask[j] ? 1.0 : 0.0;
  Tensor probs = masked_scaled_softmax(scores, std::sqrt(static_cast<double>(d)), mask);
  return zero_rows(matmul(probs, h_tgt), src_mask);
}

// The six directed cross-representations pooled and fused to one score.
inline Tensor xseg_score(const SegmentState& c, const SegmentState& q, const SegmentState& a,
                         const XSegParams& params, const Tensor* cls = nullptr) {
  struct Pair {
    const SegmentState* src;
    const SegmentState* tgt;
    const char* name;
  };
  const Pair pairs[6] = {{&c, &q, "context->question"}, {&c, &a, "context->answer"},
                         {&q, &c, "question->context"}, {&q, &a, "question->answer"},
                         {&a, &c, "answer->context"},   {&a, &q, "answer->question"}};
  std::vector<Tensor> pooled;
  for (const auto& p : pairs) {
    bool any_src = false;
    for (auto v : p.src->mask) any_src = any_src || v;
    if (!any_src) throw TensorError(std::string("xseg_score: empty source segment in ") + p.name);
    Tensor rep = cross_attend(p.src->h, p.tgt->h, p.src->mask, p.tgt->mask, params);
    pooled.push_back(masked_max_rows(rep, p.src->mask));
  }
  Tensor combined;
  if (params.fusion.combine == FusionConfig::Combine::concat) {
    combined = concat(pooled);
  } else {
    combined = pooled[0];
    for (std::size_t i = 1; i < pooled.size(); ++i) combined = add(combined, pooled[i]);
  }
  if (params.fusion.include_cls) {
    if (!cls) throw TensorError("xseg_score: fusion config requests the CLS state");
    combined = concat({combined, *cls});
  }
  return affine(tanh(affine(relu(combined), params.fuse_w1, params.fuse_b1)), params.fuse_w2,
                params.fuse_b2);
}

inline std::vector<Tensor> xseg_score_choices(const MCExample& ex, const TransformerModel& encoder,
                                              const XSegParams& params, const Vocabulary& vocab) {
  std::vector<Tensor> scores;
  const std::size_t l = encoder.config().max_len;
  for (std::size_t i = 0; i < ex.choices.size(); ++i) {
    auto seq = format_standard(ex, i, vocab, l);
    Tensor h = encoder.encode(seq);
    auto segs = segment_states(h, seq, l);
    Tensor cls = cls_state(h, seq);
    scores.push_back(xseg_score(segs.context, segs.question, segs.answer, params,
                                params.fusion.include_cls ? &cls : nullptr));
  }
  return scores;
}

// N-way cross-entropy with per-choice scores from the cross-segment head.
inline Tensor xseg_mc_loss(const MCExample& ex, const TransformerModel& encoder,
                           const XSegParams& params, const Vocabulary& vocab) {
  ex.validate();
  return cross_entropy(stack_scalars(xseg_score_choices(ex, encoder, params, vocab)), ex.gold);
}

inline ChoiceScores xseg_choice_scores(const MCExample& ex, const TransformerModel& encoder,
                                       const XSegParams& params, const Vocabulary& vocab) {
  std::vector<double> raw;
  for (auto& s : xseg_score_choices(ex, encoder, params, vocab)) raw.push_back(s.item());
  return normalize_scores(std::move(raw));
}

}  // namespace mcqa
