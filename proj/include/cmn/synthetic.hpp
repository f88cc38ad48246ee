#pragma once

// Synthetic template dialogues with a one-to-many structure. Every
// conversation owns a few topics of its own; each context names all of them
// and each reply talks about one, chosen at random. A reply about another of
// the conversation's topics is a valid answer that shares no word with the
// stored reference.

#include "cmn/corpus.hpp"

#include <algorithm>
#include <map>
#include <ostream>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace cmn {

struct ToyCorpusOptions {
  int conversations = 24;
  int turns_per_conversation = 21;
  int topics_per_conversation = 2;
  int variants = 1;
  int words_per_variant = 2;
  std::uint64_t seed = 0;
};

struct ToyCorpus {
  ToyCorpusOptions options;
  std::vector<DialoguePair> pairs;
  std::map<std::string, std::vector<int>> topics_of_conversation;
  std::map<std::string, int> topic_of_pair;
  std::map<std::string, int> variant_of_pair;
};

inline std::string toy_cue_word(int topic) { return "topic" + std::to_string(topic); }

inline std::string toy_content_word(int topic, int variant, int k) {
  return "t" + std::to_string(topic) + "v" + std::to_string(variant) + "w" + std::to_string(k);
}

inline int toy_topic_count(const ToyCorpusOptions& opt) { return opt.conversations * opt.topics_per_conversation; }

// The content words of one (topic, variant) reply in random order.
inline Tokens toy_response(const ToyCorpusOptions& opt, int topic, int variant, Rng& rng) {
  Tokens words;
  for (int k = 0; k < opt.words_per_variant; ++k) words.push_back(toy_content_word(topic, variant, k));
  std::shuffle(words.begin(), words.end(), rng);
  return words;
}

// A templated question naming every topic, in random order.
inline Tokens toy_context(const std::vector<int>& topics, Rng& rng) {
  static const std::vector<std::vector<std::string>> templates = {
      {"what", "about", "#", "?"}, {"tell", "me", "about", "#", "."}, {"do", "you", "like", "#", "?"},
      {"any", "thoughts", "on", "#", "?"}};
  std::uniform_int_distribution<std::size_t> pick(0, templates.size() - 1);
  std::vector<int> order = topics;
  std::shuffle(order.begin(), order.end(), rng);
  Tokens out;
  for (const auto& w : templates[pick(rng)]) {
    if (w != "#") {
      out.push_back(w);
      continue;
    }
    for (std::size_t i = 0; i < order.size(); ++i) {
      if (i > 0) out.push_back("or");
      out.push_back(toy_cue_word(order[i]));
    }
  }
  return out;
}

inline ToyCorpus make_toy_corpus(const ToyCorpusOptions& opt) {
  if (opt.conversations < 2 || opt.turns_per_conversation < 1 || opt.topics_per_conversation < 1 ||
      opt.variants < 1 || opt.words_per_variant < 1)
    throw Error("toy corpus options out of range");
  ToyCorpus corpus;
  corpus.options = opt;
  Rng rng(opt.seed);
  std::uniform_int_distribution<int> variant(0, opt.variants - 1);
  std::uniform_int_distribution<int> which(0, opt.topics_per_conversation - 1);
  for (int conv = 0; conv < opt.conversations; ++conv) {
    const std::string cid = "conv" + std::to_string(conv);
    std::vector<int> topics;
    for (int j = 0; j < opt.topics_per_conversation; ++j) topics.push_back(conv * opt.topics_per_conversation + j);
    corpus.topics_of_conversation[cid] = topics;
    for (int turn = 0; turn < opt.turns_per_conversation; ++turn) {
      DialoguePair p;
      p.conversation_id = cid;
      p.turn_index = turn;
      p.pair_id = cid + ":" + std::to_string(turn);
      p.context = toy_context(topics, rng);
      const int t = topics[static_cast<std::size_t>(which(rng))];
      const int v = variant(rng);
      p.reference = toy_response(opt, t, v, rng);
      corpus.topic_of_pair[p.pair_id] = t;
      corpus.variant_of_pair[p.pair_id] = v;
      corpus.pairs.push_back(std::move(p));
    }
  }
  return corpus;
}

// Seeded Bernoulli split into (train, held_out).
inline std::pair<std::vector<DialoguePair>, std::vector<DialoguePair>> split_held_out(
    const std::vector<DialoguePair>& pairs, double fraction, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction < 1.0)) throw Error("held-out fraction must lie in [0, 1)");
  std::pair<std::vector<DialoguePair>, std::vector<DialoguePair>> out;
  Rng rng(seed);
  std::bernoulli_distribution held(fraction);
  for (const auto& p : pairs) (held(rng) ? out.second : out.first).push_back(p);
  return out;
}

enum class ToyCandidateKind { echo, alternative, off_topic };

inline const char* to_string(ToyCandidateKind k) {
  switch (k) {
    case ToyCandidateKind::echo: return "echo";
    case ToyCandidateKind::alternative: return "alternative";
    case ToyCandidateKind::off_topic: return "off_topic";
  }
  return "echo";
}

struct ToyCandidate {
  DialoguePair pair;  // pair_id is "<source id>/<kind>"
  ToyCandidateKind kind = ToyCandidateKind::echo;
  bool valid = true;
};

// Candidates for each source pair: the reference reshuffled (echo), a reply
// about the conversation's other topic (alternative, valid, no shared word
// with the reference), and a reply about another conversation's topic
// (off_topic, invalid).
inline std::vector<ToyCandidate> make_toy_candidates(const ToyCorpus& corpus, const std::vector<DialoguePair>& sources,
                                                     std::uint64_t seed, bool with_echo = true) {
  const auto& opt = corpus.options;
  if (opt.topics_per_conversation < 2) throw Error("toy candidates need at least 2 topics per conversation");
  Rng rng(seed);
  std::uniform_int_distribution<int> variant(0, opt.variants - 1);
  std::uniform_int_distribution<int> any_topic(0, toy_topic_count(opt) - 1);
  std::vector<ToyCandidate> out;
  for (const auto& p : sources) {
    const int topic = corpus.topic_of_pair.at(p.pair_id);
    const auto& own = corpus.topics_of_conversation.at(p.conversation_id);
    auto emit = [&](ToyCandidateKind kind, Tokens words, bool valid) {
      ToyCandidate c{p, kind, valid};
      c.pair.pair_id = p.pair_id + "/" + to_string(kind);
      c.pair.candidate = std::move(words);
      out.push_back(std::move(c));
    };
    if (with_echo) {
      Tokens echo = p.reference;
      std::shuffle(echo.begin(), echo.end(), rng);
      emit(ToyCandidateKind::echo, echo, true);
    }
    std::vector<int> others;
    for (int t : own)
      if (t != topic) others.push_back(t);
    const int alt = others[std::uniform_int_distribution<std::size_t>(0, others.size() - 1)(rng)];
    emit(ToyCandidateKind::alternative, toy_response(opt, alt, variant(rng), rng), true);
    int off;
    do off = any_topic(rng);
    while (std::find(own.begin(), own.end(), off) != own.end());
    emit(ToyCandidateKind::off_topic, toy_response(opt, off, variant(rng), rng), false);
  }
  return out;
}

// Simulated raters: valid candidates get 4 or 5, invalid ones 1 or 2; one
// rating in ten is moved by one point.
inline void write_toy_annotations(std::ostream& out, const std::vector<ToyCandidate>& candidates, int annotators,
                                  std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_int_distribution<int> coin(0, 1);
  std::bernoulli_distribution slip(0.1);
  auto rate = [&](bool valid) {
    int v = valid ? 4 + coin(rng) : 1 + coin(rng);
    if (slip(rng)) v += coin(rng) ? 1 : -1;
    return std::clamp(v, 1, 5);
  };
  out << "pair_id,annotator_id,appropriateness,coherence\n";
  for (const auto& c : candidates)
    for (int a = 0; a < annotators; ++a)
      out << c.pair.pair_id << ",rater" << a + 1 << ',' << rate(c.valid) << ',' << rate(c.valid) << '\n';
}

}  // namespace cmn
