#pragma once

// Tiny pre-norm transformer: bidirectional encoder or causal decoder over
// token sequences, producing per-token hidden states and the CLS state.

#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "mcqa/format.hpp"
#include "mcqa/tensor.hpp"

namespace mcqa {

enum class Direction { bidirectional, causal };

struct ModelConfig {
  std::size_t d = 16;
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t max_len = 24;  // l
  std::size_t vocab_size = 0;
  Direction direction = Direction::bidirectional;
  double dropout = 0.1;
  std::uint64_t seed = 0;

  void validate() const {
    if (d == 0 || n_layers == 0 || n_heads == 0 || max_len == 0 || vocab_size == 0)
      throw TensorError("model config: all dimensions must be positive");
    if (d % n_heads != 0) throw TensorError("model config: d must be divisible by n_heads");
  }

  nlohmann::json to_json() const {
    return {{"d", d},
            {"n_layers", n_layers},
            {"n_heads", n_heads},
            {"max_len", max_len},
            {"vocab_size", vocab_size},
            {"direction", direction == Direction::causal ? "causal" : "bidirectional"},
            {"dropout", dropout},
            {"seed", seed}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.d = j.at("d").get<std::size_t>();
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.max_len = j.at("max_len").get<std::size_t>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.direction = j.at("direction").get<std::string>() == "causal" ? Direction::causal
                                                                   : Direction::bidirectional;
    c.dropout = j.at("dropout").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.validate();
    return c;
  }

  // Closed-form parameter census (see README): embeddings + per-layer block
  // + final layer norm.
  std::size_t param_count() const {
    const std::size_t per_layer = 2 * d                    // ln1
                                  + 3 * (d * d + d)        // q, k, v
                                  + d * d + d              // attn out
                                  + 2 * d                  // ln2
                                  + d * 4 * d + 4 * d      // ff in
                                  + 4 * d * d + d;         // ff out
    return vocab_size * d + max_len * d + n_layers * per_layer + 2 * d;
  }
};

using NamedParams = std::vector<std::pair<std::string, Tensor>>;

namespace detail {

inline Tensor init_normal(Shape shape, std::mt19937_64& rng, double stddev = 0.02) {
  std::normal_distribution<double> n(0.0, stddev);
  std::vector<double> d(shape_size(shape));
  for (auto& v : d) v = n(rng);
  return Tensor(std::move(shape), std::move(d), true);
}

}  // namespace detail

struct TransformerLayer {
  Tensor ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_g, ln2_b, w_ff1, b_ff1, w_ff2, b_ff2;
};

class TransformerModel {
 public:
  TransformerModel() = default;

  explicit TransformerModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::mt19937_64 rng(cfg_.seed);
    const std::size_t d = cfg_.d;
    tok_emb_ = detail::init_normal({cfg_.vocab_size, d}, rng);
    pos_emb_ = detail::init_normal({cfg_.max_len, d}, rng);
    for (std::size_t i = 0; i < cfg_.n_layers; ++i) {
      TransformerLayer l;
      l.ln1_g = Tensor::full({d}, 1.0, true);
      l.ln1_b = Tensor::zeros({d}, true);
      l.wq = detail::init_normal({d, d}, rng);
      l.bq = Tensor::zeros({d}, true);
      l.wk = detail::init_normal({d, d}, rng);
      l.bk = Tensor::zeros({d}, true);
      l.wv = detail::init_normal({d, d}, rng);
      l.bv = Tensor::zeros({d}, true);
      l.wo = detail::init_normal({d, d}, rng);
      l.bo = Tensor::zeros({d}, true);
      l.ln2_g = Tensor::full({d}, 1.0, true);
      l.ln2_b = Tensor::zeros({d}, true);
      l.w_ff1 = detail::init_normal({d, 4 * d}, rng);
      l.b_ff1 = Tensor::zeros({4 * d}, true);
      l.w_ff2 = detail::init_normal({4 * d, d}, rng);
      l.b_ff2 = Tensor::zeros({d}, true);
      layers_.push_back(std::move(l));
    }
    ln_f_g_ = Tensor::full({d}, 1.0, true);
    ln_f_b_ = Tensor::zeros({d}, true);
  }

  const ModelConfig& config() const { return cfg_; }
  const Tensor& token_embedding() const { return tok_emb_; }

  NamedParams named_params() const {
    NamedParams out;
    out.emplace_back("tok_emb", tok_emb_);
    out.emplace_back("pos_emb", pos_emb_);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto& l = layers_[i];
      const std::string p = "layer" + std::to_string(i) + ".";
      out.emplace_back(p + "ln1_g", l.ln1_g);
      out.emplace_back(p + "ln1_b", l.ln1_b);
      out.emplace_back(p + "wq", l.wq);
      out.emplace_back(p + "bq", l.bq);
      out.emplace_back(p + "wk", l.wk);
      out.emplace_back(p + "bk", l.bk);
      out.emplace_back(p + "wv", l.wv);
      out.emplace_back(p + "bv", l.bv);
      out.emplace_back(p + "wo", l.wo);
      out.emplace_back(p + "bo", l.bo);
      out.emplace_back(p + "ln2_g", l.ln2_g);
      out.emplace_back(p + "ln2_b", l.ln2_b);
      out.emplace_back(p + "w_ff1", l.w_ff1);
      out.emplace_back(p + "b_ff1", l.b_ff1);
      out.emplace_back(p + "w_ff2", l.w_ff2);
      out.emplace_back(p + "b_ff2", l.b_ff2);
    }
    out.emplace_back("ln_f_g", ln_f_g_);
    out.emplace_back("ln_f_b", ln_f_b_);
    return out;
  }

  // Per-token hidden states [n x d], n = seq.length(). Pad positions are
  // masked as attention keys and zeroed in the output; causal models
  // additionally mask future positions.
  Tensor encode(const TokenSequence& seq, std::mt19937_64* dropout_rng = nullptr) const {
    const std::size_t n = seq.length();
    if (n == 0) throw TensorError("encode: empty sequence");
    if (n > cfg_.max_len)
      throw TensorError("encode: sequence length " + std::to_string(n) + " exceeds l = " +
                        std::to_string(cfg_.max_len));
    for (auto id : seq.ids)
      if (id >= cfg_.vocab_size)
        throw TensorError("encode: token id " + std::to_string(id) + " outside vocabulary");

    std::vector<std::uint8_t> valid(n);
    for (std::size_t i = 0; i < n; ++i) valid[i] = seq.pad[i] ? 0 : 1;

    std::vector<std::size_t> positions(n);
    for (std::size_t i = 0; i < n; ++i) positions[i] = i;
    Tensor x = add(gather_rows(tok_emb_, seq.ids), gather_rows(pos_emb_, positions));

    // attention mask over keys: pad keys always excluded; causal excludes
    // future keys per query row
    Tensor attn_mask = Tensor::zeros({n, n});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        bool ok = valid[j] != 0;
        if (cfg_.direction == Direction::causal && j > i) ok = false;
        if (i == j) ok = true;  // every row keeps itself so pad rows stay defined
        attn_mask.data()[i * n + j] = ok ? 1.0 : 0.0;
      }

    const std::size_t dh = cfg_.d / cfg_.n_heads;
    const double scl = std::sqrt(static_cast<double>(dh));

    auto maybe_dropout = [&](Tensor t) {
      if (dropout_rng && cfg_.dropout > 0.0) return dropout(t, cfg_.dropout, *dropout_rng);
      return t;
    };

    for (const auto& l : layers_) {
      Tensor h = layer_norm(x, l.ln1_g, l.ln1_b);
      Tensor q = add(matmul(h, l.wq), l.bq);
      Tensor k = add(matmul(h, l.wk), l.bk);
      Tensor v = add(matmul(h, l.wv), l.bv);
      std::vector<Tensor> heads;
      for (std::size_t hd = 0; hd < cfg_.n_heads; ++hd) {
        Tensor qh = slice_cols(q, hd * dh, dh);
        Tensor kh = slice_cols(k, hd * dh, dh);
        Tensor vh = slice_cols(v, hd * dh, dh);
        Tensor probs = masked_scaled_softmax(matmul(qh, transpose(kh)), scl, attn_mask);
        heads.push_back(matmul(probs, vh));
      }
      Tensor attn = add(matmul(concat_cols(heads), l.wo), l.bo);
      x = add(x, maybe_dropout(attn));

      Tensor h2 = layer_norm(x, l.ln2_g, l.ln2_b);
      Tensor ff = add(matmul(gelu(add(matmul(h2, l.w_ff1), l.b_ff1)), l.w_ff2), l.b_ff2);
      x = add(x, maybe_dropout(ff));
    }
    return zero_rows(layer_norm(x, ln_f_g_, ln_f_b_), valid);
  }

 private:
  ModelConfig cfg_;
  Tensor tok_emb_, pos_emb_;
  std::vector<TransformerLayer> layers_;
  Tensor ln_f_g_, ln_f_b_;
};

// Hidden row at the classifier-token position: index 0 for bidirectional
// layouts, the last non-pad index for causal ones.
inline Tensor cls_state(const Tensor& h, const TokenSequence& seq) {
  const std::size_t pos = seq.cls_position();
  if (pos >= h.dim(0)) throw TensorError("cls_state: CLS position outside hidden states");
  return row(h, pos);
}

struct SegmentState {
  Tensor h;                         // [l x d], segment rows packed at the front
  std::vector<std::uint8_t> mask;   // validity per row
};

// Copies one segment's hidden rows to the front and zero-pads to l.
inline SegmentState segment_state(const Tensor& h, const TokenSequence& seq, SegKind kind,
                                  std::size_t l, int answer_index = -1) {
  auto pos = seq.segment_positions(kind, answer_index);
  if (pos.size() > l) throw TensorError("segment_state: segment longer than l");
  SegmentState out;
  out.mask.assign(l, 0);
  for (std::size_t i = 0; i < pos.size(); ++i) out.mask[i] = 1;
  out.h = pad_rows(gather_rows(h, pos), l);
  return out;
}

struct SegmentStates {
  SegmentState context, question, answer;
};

inline SegmentStates segment_states(const Tensor& h, const TokenSequence& seq, std::size_t l,
                                    bool require_question = true) {
  if (require_question && !seq.has_segment(SegKind::question))
    throw TensorError("segment_states: sequence has no question segment");
  SegmentStates s;
  s.context = segment_state(h, seq, SegKind::context, l);
  s.question = segment_state(h, seq, SegKind::question, l);
  s.answer = segment_state(h, seq, SegKind::answer, l);
  return s;
}

}  // namespace mcqa
