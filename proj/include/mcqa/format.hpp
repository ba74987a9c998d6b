#pragma once

// Converts MCExamples into model-ready token sequences for every input
// layout, plus the inference-time information-masking transforms.

#include <optional>
#include <set>
#include <string>
#include <vector>

#include "mcqa/text.hpp"

namespace mcqa {

struct FormatError : std::runtime_error {
  explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

enum class FormatKind { standard, decoder_standard, all_choices, hella_swag, winogrande };

inline const char* format_name(FormatKind k) {
  switch (k) {
    case FormatKind::standard: return "standard";
    case FormatKind::decoder_standard: return "decoder_standard";
    case FormatKind::all_choices: return "all_choices";
    case FormatKind::hella_swag: return "hella_swag";
    case FormatKind::winogrande: return "winogrande";
  }
  return "?";
}

inline FormatKind format_from_name(const std::string& s) {
  if (s == "standard") return FormatKind::standard;
  if (s == "decoder_standard") return FormatKind::decoder_standard;
  if (s == "all_choices") return FormatKind::all_choices;
  if (s == "hella_swag") return FormatKind::hella_swag;
  if (s == "winogrande") return FormatKind::winogrande;
  throw FormatError("unknown format: " + s);
}

// The natural format for a task when scoring choices independently.
inline FormatKind default_format(Task t) {
  switch (t) {
    case Task::hella_swag: return FormatKind::hella_swag;
    case Task::winogrande: return FormatKind::winogrande;
    default: return FormatKind::standard;
  }
}

enum class SegKind { cls, sep, context, question, answer, unk_marker };

struct Span {
  SegKind kind;
  std::size_t begin = 0;  // half-open [begin, end)
  std::size_t end = 0;
  int answer_index = -1;  // which choice, for answer spans

  std::size_t length() const { return end - begin; }
};

// Token ids plus labeled segment spans and tail pad mask. Spans are disjoint,
// ordered, and tile the whole non-pad region (separators included).
struct TokenSequence {
  std::vector<TokenId> ids;
  std::vector<Span> spans;
  std::vector<std::uint8_t> pad;  // 1 at tail padding positions

  std::size_t length() const { return ids.size(); }

  std::size_t content_length() const {
    std::size_t n = 0;
    while (n < pad.size() && !pad[n]) ++n;
    return n;
  }

  std::size_t cls_position() const {
    for (auto& s : spans)
      if (s.kind == SegKind::cls) return s.begin;
    throw FormatError("sequence has no [CLS] span");
  }

  // Indices covered by every span of the given kind (and answer index, when
  // kind == answer and which >= 0).
  std::vector<std::size_t> segment_positions(SegKind kind, int which = -1) const {
    std::vector<std::size_t> out;
    for (auto& s : spans) {
      if (s.kind != kind) continue;
      if (kind == SegKind::answer && which >= 0 && s.answer_index != which) continue;
      for (std::size_t i = s.begin; i < s.end; ++i) out.push_back(i);
    }
    return out;
  }

  bool has_segment(SegKind kind) const {
    for (auto& s : spans)
      if (s.kind == kind && s.length() > 0) return true;
    return false;
  }

  std::string detokenize(const Vocabulary& vocab) const {
    std::vector<TokenId> content(ids.begin(), ids.begin() + content_length());
    return vocab.decode(content);
  }

  // Appends tail padding up to total length l.
  TokenSequence padded_to(std::size_t l) const {
    if (l < ids.size()) throw FormatError("cannot pad sequence of length " +
                                          std::to_string(ids.size()) + " to " + std::to_string(l));
    TokenSequence out = *this;
    out.ids.resize(l, Vocabulary::kPad);
    out.pad.resize(l, 1);
    return out;
  }

  void check_spans() const {
    std::size_t pos = 0;
    for (auto& s : spans) {
      if (s.begin != pos || s.end < s.begin)
        throw FormatError("segment spans must be ordered and tiling");
      pos = s.end;
    }
    if (pos != content_length()) throw FormatError("segment spans do not cover the non-pad region");
  }
};

namespace detail {

// Tokenizes segment text; the literal word "[PAD]" maps to the pad id so that
// pad-masked segments keep their length (these mid-sequence pads are model
// input, not tail padding).
inline std::vector<TokenId> encode_segment(const std::string& text, const Vocabulary& vocab) {
  std::vector<TokenId> ids;
  std::string word;
  std::istringstream is(text);
  while (is >> word) {
    if (word == "[PAD]") {
      ids.push_back(Vocabulary::kPad);
    } else {
      for (auto id : vocab.encode(word)) ids.push_back(id);
    }
  }
  return ids;
}

struct SeqBuilder {
  TokenSequence seq;

  void push(SegKind kind, const std::vector<TokenId>& ids, int answer_index = -1) {
    Span s;
    s.kind = kind;
    s.begin = seq.ids.size();
    for (auto id : ids) seq.ids.push_back(id);
    s.end = seq.ids.size();
    s.answer_index = answer_index;
    seq.spans.push_back(s);
  }

  void push_special(SegKind kind, TokenId id) { push(kind, std::vector<TokenId>{id}); }

  TokenSequence finish() {
    seq.pad.assign(seq.ids.size(), 0);
    seq.check_spans();
    return seq;
  }
};

// Drops tokens from the head of the context until the sequence fits l.
// Answers are never truncated.
inline void truncate_context(std::vector<TokenId>& ctx, std::size_t other_len, std::size_t l,
                             const std::string& id) {
  if (other_len > l)
    throw FormatError("example " + id + ": formatted length " + std::to_string(other_len + ctx.size()) +
                      " exceeds maximum " + std::to_string(l) + " even with empty context");
  if (ctx.size() + other_len > l)
    ctx.erase(ctx.begin(), ctx.begin() + static_cast<long>(ctx.size() + other_len - l));
}

}  // namespace detail

// [CLS] C [SEP] Q [SEP] A_i [SEP]; an empty question collapses to the
// question-free layout [CLS] C [SEP] A_i [SEP].
inline TokenSequence format_standard(const MCExample& ex, std::size_t choice_i, const Vocabulary& vocab,
                                     std::size_t max_len) {
  if (choice_i >= ex.choices.size())
    throw FormatError("example " + ex.id + ": choice index out of range");
  auto ctx = detail::encode_segment(ex.context, vocab);
  auto q = detail::encode_segment(ex.question, vocab);
  auto a = detail::encode_segment(ex.choices[choice_i], vocab);
  const bool with_q = !ex.question.empty();
  const std::size_t specials = with_q ? 4 : 3;  // [CLS] + separators
  detail::truncate_context(ctx, specials + q.size() + a.size(), max_len, ex.id);

  detail::SeqBuilder b;
  b.push_special(SegKind::cls, Vocabulary::kCls);
  b.push(SegKind::context, ctx);
  b.push_special(SegKind::sep, Vocabulary::kSep);
  if (with_q) {
    b.push(SegKind::question, q);
    b.push_special(SegKind::sep, Vocabulary::kSep);
  }
  b.push(SegKind::answer, a, static_cast<int>(choice_i));
  b.push_special(SegKind::sep, Vocabulary::kSep);
  return b.finish();
}

// Same content with [CLS] moved to the end, for feed-forward (causal) models.
inline TokenSequence format_decoder(const MCExample& ex, std::size_t choice_i, const Vocabulary& vocab,
                                    std::size_t max_len) {
  if (choice_i >= ex.choices.size())
    throw FormatError("example " + ex.id + ": choice index out of range");
  auto ctx = detail::encode_segment(ex.context, vocab);
  auto q = detail::encode_segment(ex.question, vocab);
  auto a = detail::encode_segment(ex.choices[choice_i], vocab);
  const bool with_q = !ex.question.empty();
  const std::size_t specials = with_q ? 4 : 3;
  detail::truncate_context(ctx, specials + q.size() + a.size(), max_len, ex.id);

  detail::SeqBuilder b;
  b.push(SegKind::context, ctx);
  b.push_special(SegKind::sep, Vocabulary::kSep);
  if (with_q) {
    b.push(SegKind::question, q);
    b.push_special(SegKind::sep, Vocabulary::kSep);
  }
  b.push(SegKind::answer, a, static_cast<int>(choice_i));
  b.push_special(SegKind::sep, Vocabulary::kSep);
  b.push_special(SegKind::cls, Vocabulary::kCls);
  return b.finish();
}

// See-all-choices layout for 3-choice tasks:
//   [CLS] C [SEP] Q [SEP] A_j [SEP] A_k [UNK] A_target
// with j < k the non-target choices in original order. Reserved tokens are
// forbidden inside answer text so the [UNK] marker stays unique.
inline TokenSequence format_all_choices(const MCExample& ex, std::size_t target_i,
                                        const Vocabulary& vocab, std::size_t max_len) {
  if (ex.choices.size() != 3)
    throw FormatError("example " + ex.id + ": all_choices format requires exactly 3 choices, got " +
                      std::to_string(ex.choices.size()));
  if (target_i >= 3) throw FormatError("example " + ex.id + ": target index out of range");
  std::vector<std::size_t> others;
  for (std::size_t i = 0; i < 3; ++i)
    if (i != target_i) others.push_back(i);

  std::vector<std::vector<TokenId>> ans(3);
  for (std::size_t i = 0; i < 3; ++i) {
    ans[i] = detail::encode_segment(ex.choices[i], vocab);
    for (auto id : ans[i])
      if (id < Vocabulary::kNumReserved)
        throw FormatError("example " + ex.id + ": choice " + std::to_string(i) +
                          " contains a reserved or out-of-vocabulary token");
  }
  auto ctx = detail::encode_segment(ex.context, vocab);
  auto q = detail::encode_segment(ex.question, vocab);
  const std::size_t other_len =
      5 + q.size() + ans[0].size() + ans[1].size() + ans[2].size();  // CLS + 3 SEP + UNK
  detail::truncate_context(ctx, other_len, max_len, ex.id);

  detail::SeqBuilder b;
  b.push_special(SegKind::cls, Vocabulary::kCls);
  b.push(SegKind::context, ctx);
  b.push_special(SegKind::sep, Vocabulary::kSep);
  b.push(SegKind::question, q);
  b.push_special(SegKind::sep, Vocabulary::kSep);
  b.push(SegKind::answer, ans[others[0]], static_cast<int>(others[0]));
  b.push_special(SegKind::sep, Vocabulary::kSep);
  b.push(SegKind::answer, ans[others[1]], static_cast<int>(others[1]));
  b.push_special(SegKind::unk_marker, Vocabulary::kUnk);
  b.push(SegKind::answer, ans[target_i], static_cast<int>(target_i));
  return b.finish();
}

// [CLS] left-context [SEP] choice right-context [SEP]; the [SEP] sits
// immediately before the blank and the blank is filled by the choice text.
inline TokenSequence format_winogrande(const MCExample& ex, std::size_t choice_i,
                                       const Vocabulary& vocab, std::size_t max_len) {
  if (choice_i >= ex.choices.size())
    throw FormatError("example " + ex.id + ": choice index out of range");
  auto first = ex.context.find('_');
  if (first == std::string::npos || ex.context.find('_', first + 1) != std::string::npos)
    throw FormatError("example " + ex.id + ": winogrande context must contain exactly one '_'");
  auto left = detail::encode_segment(ex.context.substr(0, first), vocab);
  auto right = detail::encode_segment(ex.context.substr(first + 1), vocab);
  auto a = detail::encode_segment(ex.choices[choice_i], vocab);
  detail::truncate_context(left, 3 + right.size() + a.size(), max_len, ex.id);

  detail::SeqBuilder b;
  b.push_special(SegKind::cls, Vocabulary::kCls);
  b.push(SegKind::context, left);
  b.push_special(SegKind::sep, Vocabulary::kSep);
  b.push(SegKind::answer, a, static_cast<int>(choice_i));
  b.push(SegKind::context, right);
  b.push_special(SegKind::sep, Vocabulary::kSep);
  return b.finish();
}

inline TokenSequence format_example(const MCExample& ex, std::size_t choice_i, FormatKind kind,
                                    const Vocabulary& vocab, std::size_t max_len) {
  switch (kind) {
    case FormatKind::standard:
    case FormatKind::hella_swag:
      return format_standard(ex, choice_i, vocab, max_len);
    case FormatKind::decoder_standard:
      return format_decoder(ex, choice_i, vocab, max_len);
    case FormatKind::all_choices:
      return format_all_choices(ex, choice_i, vocab, max_len);
    case FormatKind::winogrande:
      return format_winogrande(ex, choice_i, vocab, max_len);
  }
  throw FormatError("unhandled format kind");
}

// ---- information masking (inference-time ablations) ----

enum class MaskMethod { pad, del, filter };
enum class MaskScope { context, question, both };

struct MaskSpec {
  MaskMethod method = MaskMethod::pad;
  MaskScope scope = MaskScope::context;
};

inline const char* mask_method_name(MaskMethod m) {
  switch (m) {
    case MaskMethod::pad: return "pad";
    case MaskMethod::del: return "delete";
    case MaskMethod::filter: return "filter";
  }
  return "?";
}

inline const char* mask_scope_name(MaskScope s) {
  switch (s) {
    case MaskScope::context: return "context";
    case MaskScope::question: return "question";
    case MaskScope::both: return "both";
  }
  return "?";
}

// Content-word lexicon for the filter masking method; one word per line,
// '#' comments, matched on lowercased words with outer punctuation stripped.
class Lexicon {
 public:
  Lexicon() = default;
  explicit Lexicon(std::set<std::string> words) : words_(std::move(words)) {}

  static Lexicon load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open lexicon file: " + path);
    std::set<std::string> words;
    std::string line;
    while (std::getline(is, line)) {
      auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      std::istringstream ls(line);
      std::string w;
      while (ls >> w) words.insert(normalize(w));
    }
    return Lexicon(std::move(words));
  }

  static std::string normalize(const std::string& word) {
    std::size_t b = 0, e = word.size();
    while (b < e && !std::isalnum(static_cast<unsigned char>(word[b]))) ++b;
    while (e > b && !std::isalnum(static_cast<unsigned char>(word[e - 1]))) --e;
    std::string out = word.substr(b, e - b);
    for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
  }

  bool contains(const std::string& word) const { return words_.count(normalize(word)) > 0; }
  std::size_t size() const { return words_.size(); }

 private:
  std::set<std::string> words_;
};

namespace detail {

inline std::string mask_segment(const std::string& text, MaskMethod method, const Lexicon& lex,
                                const Vocabulary& vocab) {
  switch (method) {
    case MaskMethod::del:
      return "";
    case MaskMethod::pad: {
      const std::size_t n = vocab.encode(text).size();
      std::string out;
      for (std::size_t i = 0; i < n; ++i) {
        if (!out.empty()) out += ' ';
        out += "[PAD]";
      }
      return out;
    }
    case MaskMethod::filter: {
      std::string out;
      std::istringstream is(text);
      std::string w;
      while (is >> w) {
        if (lex.contains(w)) continue;
        if (!out.empty()) out += ' ';
        out += w;
      }
      return out;
    }
  }
  throw FormatError("unhandled mask method");
}

}  // namespace detail

// Applies an information mask to an example's context and/or question text.
// Pad keeps segment token length; delete removes the segment; filter drops
// lexicon words. The result intentionally skips MCExample re-validation
// (a pad-masked winogrande context no longer carries its blank).
inline MCExample apply_mask(const MCExample& ex, const MaskSpec& spec, const Lexicon& lexicon,
                            const Vocabulary& vocab) {
  const bool mask_q = spec.scope == MaskScope::question || spec.scope == MaskScope::both;
  const bool mask_c = spec.scope == MaskScope::context || spec.scope == MaskScope::both;
  if (mask_q && ex.question.empty() && spec.scope == MaskScope::question)
    throw FormatError("example " + ex.id + ": question mask scope on a task without questions");
  MCExample out = ex;
  if (mask_c) out.context = detail::mask_segment(ex.context, spec.method, lexicon, vocab);
  if (mask_q && !ex.question.empty())
    out.question = detail::mask_segment(ex.question, spec.method, lexicon, vocab);
  return out;
}

}  // namespace mcqa
