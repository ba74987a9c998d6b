#pragma once

// Rule-based synthetic multiple-choice tasks: desk-scale stand-ins for the
// external datasets, with a gold answer that is fully determined by a simple
// token rule. Every generated example satisfies its rule by construction,
// and gold indices are balanced round-robin (within ±1 across indices).

#include <random>

#include "mcqa/text.hpp"

namespace mcqa {

enum class SynthRule { token_overlap, copy_last, negation_flip, joint_overlap };

inline const char* synth_rule_name(SynthRule r) {
  switch (r) {
    case SynthRule::token_overlap: return "token-overlap";
    case SynthRule::copy_last: return "copy-last";
    case SynthRule::negation_flip: return "negation-flip";
    case SynthRule::joint_overlap: return "joint-overlap";
  }
  return "?";
}

inline SynthRule synth_rule_from_name(const std::string& s) {
  if (s == "token-overlap") return SynthRule::token_overlap;
  if (s == "copy-last") return SynthRule::copy_last;
  if (s == "negation-flip") return SynthRule::negation_flip;
  if (s == "joint-overlap") return SynthRule::joint_overlap;
  throw DataError("unknown synthetic rule: " + s);
}

struct SyntheticTaskSpec {
  SynthRule rule = SynthRule::token_overlap;
  std::size_t n = 48;
  std::size_t vocab_words = 40;  // content word pool "w0".."w{V-1}"
  std::size_t n_choices = 3;
  std::uint64_t seed = 1;
  // when set, questions carry a cycling type keyword so classify_question
  // buckets the dataset evenly across the six types
  bool typed_questions = false;
  std::string id_prefix = "syn";

  void validate() const {
    if (n == 0) throw DataError("synthetic spec: n must be positive");
    if (n_choices < 2 || n_choices > 4)
      throw DataError("synthetic spec: choice count must be in [2, 4]");
    if (rule == SynthRule::negation_flip && n_choices != 2)
      throw DataError("synthetic spec: negation-flip requires exactly 2 choices");
    // each example draws 3 context words, up to 2 question words, and one
    // fresh word per distractor, all distinct
    const std::size_t needed = 5 + n_choices;
    if (vocab_words < needed)
      throw DataError("synthetic spec: vocabulary of " + std::to_string(vocab_words) +
                      " words cannot cover " + std::to_string(needed) + " distinct draws");
  }

  Task task() const {
    switch (n_choices) {
      case 2: return Task::winogrande;
      case 3: return Task::social_iqa;
      default: return Task::cosmos_qa;
    }
  }
};

namespace detail {

// cycling type keywords matching the shipped question-type rule file
inline const std::vector<std::string>& synth_type_keywords() {
  static const std::vector<std::string> kw = {"want", "feel", "describe",
                                              "why", "need", "next"};
  return kw;
}

inline std::vector<std::size_t> draw_distinct(std::size_t pool, std::size_t k,
                                              std::mt19937_64& rng) {
  std::vector<std::size_t> picked;
  while (picked.size() < k) {
    const std::size_t w = rng() % pool;
    if (std::find(picked.begin(), picked.end(), w) == picked.end()) picked.push_back(w);
  }
  return picked;
}

}  // namespace detail

inline std::vector<MCExample> gen_synthetic(const SyntheticTaskSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  auto word = [](std::size_t i) { return "w" + std::to_string(i); };
  std::vector<MCExample> out;

  for (std::size_t i = 0; i < spec.n; ++i) {
    MCExample ex;
    ex.id = spec.id_prefix + std::to_string(i);
    ex.task = spec.task();
    const std::size_t gold = i % spec.n_choices;
    ex.gold = gold;
    ex.choices.assign(spec.n_choices, "");

    // one draw covers every slot: 3 context words, 2 question words, one
    // fresh word per distractor
    auto ids = detail::draw_distinct(spec.vocab_words, 5 + spec.n_choices, rng);
    const auto c = [&](std::size_t k) { return word(ids[k]); };          // 0..2 context
    const auto q = [&](std::size_t k) { return word(ids[3 + k]); };      // 0..1 question
    const auto fresh = [&](std::size_t k) { return word(ids[5 + k]); };  // per choice

    switch (spec.rule) {
      case SynthRule::token_overlap:
        // gold is the only choice sharing a token with the context
        ex.context = c(0) + " " + c(1) + " " + c(2);
        ex.question = q(0) + " " + q(1);
        for (std::size_t j = 0; j < spec.n_choices; ++j)
          ex.choices[j] = j == gold ? c(rng() % 3) : fresh(j);
        break;
      case SynthRule::copy_last:
        // gold equals the final context token; distractors are other
        // context words, so pure overlap does not give the answer away
        ex.context = c(0) + " " + c(1) + " " + c(2);
        ex.question = q(0) + " " + q(1);
        for (std::size_t j = 0, alt = 0; j < spec.n_choices; ++j)
          ex.choices[j] = j == gold ? c(2) : (alt++ == 0 ? c(0) : (alt == 2 ? c(1) : fresh(j)));
        break;
      case SynthRule::negation_flip: {
        // 2-way: pick the in-context word, unless the context is negated
        const bool negated = rng() % 2 == 1;
        ex.context = c(0) + (negated ? " not " : " ") + c(1) + " _";
        ex.question = "";
        ex.choices[gold] = negated ? fresh(0) : c(1);
        ex.choices[1 - gold] = negated ? c(1) : fresh(0);
        break;
      }
      case SynthRule::joint_overlap:
        // gold shares a token with the context AND one with the question;
        // each distractor shares with at most one of the two
        ex.context = c(0) + " " + c(1) + " " + c(2);
        ex.question = q(0) + " " + q(1);
        for (std::size_t j = 0, alt = 0; j < spec.n_choices; ++j) {
          if (j == gold) {
            ex.choices[j] = c(rng() % 3) + " " + q(rng() % 2);
          } else if (alt++ == 0) {
            ex.choices[j] = c(rng() % 3) + " " + fresh(j);
          } else if (alt == 2) {
            ex.choices[j] = q(rng() % 2) + " " + fresh(j);
          } else {
            ex.choices[j] = fresh(j) + " " + fresh((j + 1) % spec.n_choices);
          }
        }
        break;
    }

    if (spec.typed_questions && ex.task != Task::winogrande)
      ex.question = detail::synth_type_keywords()[i % 6] + " " + ex.question;
    ex.validate();
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace mcqa
