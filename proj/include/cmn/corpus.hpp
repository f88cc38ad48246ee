#pragma once

// Dialogue data: JSONL ingestion, NSP batch construction with cross-
// conversation negatives, sentence BLEU-1, standard/diverse evaluation-set
// construction, and human annotation aggregation.

#include "cmn/error.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

namespace cmn {

using Tokens = std::vector<std::string>;
using Rng = std::mt19937_64;

// Lowercases, splits on whitespace, and emits every punctuation character as
// its own token.
inline Tokens tokenize(std::string_view text) {
  Tokens out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    const auto u = static_cast<unsigned char>(ch);
    if (std::isspace(u)) {
      flush();
    } else if (std::ispunct(u)) {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur.push_back(static_cast<char>(std::tolower(u)));
    }
  }
  flush();
  return out;
}

inline std::string join(const Tokens& tokens) {
  std::string s;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) s.push_back(' ');
    s += tokens[i];
  }
  return s;
}

struct DialoguePair {
  std::string pair_id;
  std::string conversation_id;
  int turn_index = 0;
  Tokens context;
  Tokens reference;
  std::optional<Tokens> candidate;
};

// ---------------------------------------------------------------------------
// JSONL corpus

inline DialoguePair pair_from_json(const nlohmann::json& j) {
  DialoguePair p;
  if (!j.is_object()) throw Error("expected a JSON object");
  p.conversation_id = j.at("conversation_id").get<std::string>();
  const auto turn = j.at("turn_index").get<long long>();
  if (turn < 0) throw Error("turn_index must be non-negative");
  p.turn_index = static_cast<int>(turn);
  p.context = tokenize(j.at("context").get<std::string>());
  p.reference = tokenize(j.at("reference").get<std::string>());
  if (p.context.empty()) throw Error("context is empty after tokenization");
  if (p.reference.empty()) throw Error("reference is empty after tokenization");
  if (j.contains("candidate") && !j["candidate"].is_null())
    p.candidate = tokenize(j["candidate"].get<std::string>());
  if (j.contains("pair_id") && !j["pair_id"].is_null())
    p.pair_id = j["pair_id"].get<std::string>();
  else
    p.pair_id = p.conversation_id + ":" + std::to_string(p.turn_index);
  return p;
}

inline nlohmann::json pair_to_json(const DialoguePair& p) {
  nlohmann::json j = {{"pair_id", p.pair_id},
                      {"conversation_id", p.conversation_id},
                      {"turn_index", p.turn_index},
                      {"context", join(p.context)},
                      {"reference", join(p.reference)}};
  if (p.candidate) j["candidate"] = join(*p.candidate);
  return j;
}

inline std::vector<DialoguePair> parse_dialogues(std::istream& in) {
  std::vector<DialoguePair> pairs;
  std::set<std::string> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); })) continue;
    DialoguePair p;
    try {
      p = pair_from_json(nlohmann::json::parse(line));
    } catch (const std::exception& e) {
      throw Error("line " + std::to_string(line_no) + ": malformed dialogue record: " + e.what());
    }
    if (!seen.insert(p.pair_id).second)
      throw Error("line " + std::to_string(line_no) + ": duplicate pair_id '" + p.pair_id + "'");
    pairs.push_back(std::move(p));
  }
  return pairs;
}

inline std::vector<DialoguePair> load_dialogues(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open dialogue file: " + path);
  return parse_dialogues(in);
}

inline void save_dialogues(const std::string& path, const std::vector<DialoguePair>& pairs) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write dialogue file: " + path);
  for (const auto& p : pairs) out << pair_to_json(p).dump() << '\n';
}

// ---------------------------------------------------------------------------
// NSP batches

struct NspBatchItem {
  std::string pair_id;
  std::string conversation_id;
  std::string response_conversation_id;
  Tokens context;
  Tokens response;
  std::vector<int> segment_ids;  // 0 per context token, then 1 per response token
  int nsp_label = 1;             // 1 = true continuation, 0 = sampled negative
  Tokens decoder_target;         // always the pair's own reference
};

namespace detail {

// Uniform draws over pairs outside a given conversation.
class CrossConversationSampler {
 public:
  explicit CrossConversationSampler(const std::vector<DialoguePair>& pairs) {
    std::map<std::string, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < pairs.size(); ++i) groups[pairs[i].conversation_id].push_back(i);
    for (auto& [id, members] : groups) {
      block_of_[id] = blocks_.size();
      blocks_.push_back(std::move(members));
    }
    total_ = pairs.size();
  }

  std::size_t conversations() const { return blocks_.size(); }

  std::size_t draw(const std::string& exclude, Rng& rng) const {
    const std::size_t own = block_of_.at(exclude);
    const std::size_t available = total_ - blocks_[own].size();
    if (available == 0) throw Error("no pairs outside conversation " + exclude);
    std::uniform_int_distribution<std::size_t> pick(0, available - 1);
    std::size_t k = pick(rng);
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      if (b == own) continue;
      if (k < blocks_[b].size()) return blocks_[b][k];
      k -= blocks_[b].size();
    }
    throw Error("cross-conversation sampler out of range");
  }

 private:
  std::vector<std::vector<std::size_t>> blocks_;
  std::unordered_map<std::string, std::size_t> block_of_;
  std::size_t total_ = 0;
};

}  // namespace detail

inline NspBatchItem make_nsp_item(const DialoguePair& p, const DialoguePair& response_source, int label) {
  NspBatchItem item;
  item.pair_id = p.pair_id;
  item.conversation_id = p.conversation_id;
  item.response_conversation_id = response_source.conversation_id;
  item.context = p.context;
  item.response = response_source.reference;
  item.segment_ids.assign(item.context.size(), 0);
  item.segment_ids.insert(item.segment_ids.end(), item.response.size(), 1);
  item.nsp_label = label;
  item.decoder_target = p.reference;
  return item;
}

// One item per pair, in input order. Each item independently becomes a
// negative with probability neg_prob, taking its response from a uniformly
// drawn pair of another conversation.
inline std::vector<NspBatchItem> make_nsp_batch(const std::vector<DialoguePair>& pairs, double neg_prob, Rng& rng) {
  if (!(neg_prob >= 0.0 && neg_prob <= 1.0)) throw Error("neg_prob must lie in [0, 1]");
  std::optional<detail::CrossConversationSampler> sampler;
  if (neg_prob > 0.0 && !pairs.empty()) {
    sampler.emplace(pairs);
    if (sampler->conversations() < 2)
      throw Error("negative sampling needs at least 2 distinct conversations");
  }
  std::bernoulli_distribution coin(neg_prob);
  std::vector<NspBatchItem> items;
  items.reserve(pairs.size());
  for (const auto& p : pairs) {
    if (neg_prob > 0.0 && coin(rng)) {
      const auto& src = pairs[sampler->draw(p.conversation_id, rng)];
      items.push_back(make_nsp_item(p, src, 0));
    } else {
      items.push_back(make_nsp_item(p, p, 1));
    }
  }
  return items;
}

// ---------------------------------------------------------------------------
// BLEU-1

// Sentence-level brevity penalty times clipped unigram precision, unsmoothed.
inline double bleu1(const Tokens& candidate, const Tokens& reference) {
  if (candidate.empty()) return 0.0;
  std::unordered_map<std::string, int> ref_counts;
  for (const auto& w : reference) ++ref_counts[w];
  std::unordered_map<std::string, int> cand_counts;
  for (const auto& w : candidate) ++cand_counts[w];
  int matched = 0;
  for (const auto& [w, n] : cand_counts) {
    auto it = ref_counts.find(w);
    if (it != ref_counts.end()) matched += std::min(n, it->second);
  }
  const double c = static_cast<double>(candidate.size());
  const double r = static_cast<double>(reference.size());
  const double precision = matched / c;
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return bp * precision;
}

// ---------------------------------------------------------------------------
// Evaluation sets

struct EvalSetSplit {
  std::vector<std::string> standard;
  std::vector<std::string> diverse;
  double threshold = 0.2;
  std::uint64_t seed = 0;
};

inline void to_json(nlohmann::json& j, const EvalSetSplit& s) {
  j = {{"standard", s.standard}, {"diverse", s.diverse}, {"threshold", s.threshold}, {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, EvalSetSplit& s) {
  s.standard = j.at("standard").get<std::vector<std::string>>();
  s.diverse = j.at("diverse").get<std::vector<std::string>>();
  s.threshold = j.at("threshold").get<double>();
  s.seed = j.at("seed").get<std::uint64_t>();
}

inline EvalSetSplit load_split(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open split file: " + path);
  try {
    return nlohmann::json::parse(in).get<EvalSetSplit>();
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed split file " + path + ": " + e.what());
  }
}

struct EvalSetOptions {
  std::size_t k_standard = 200;
  double diverse_threshold = 0.2;
  std::size_t k_diverse = 600;
  std::uint64_t seed = 0;
};

// standard: top-k by BLEU-1(candidate, reference), ties by pair_id.
// diverse: seeded sample without replacement among the remaining pairs whose
// BLEU-1 is below the threshold.
inline EvalSetSplit build_eval_sets(const std::vector<DialoguePair>& pairs, const EvalSetOptions& opt,
                                    std::vector<std::string>* warnings = nullptr) {
  struct Scored {
    double bleu;
    const DialoguePair* pair;
  };
  std::vector<Scored> scored;
  scored.reserve(pairs.size());
  for (const auto& p : pairs) {
    if (!p.candidate) throw Error("pair '" + p.pair_id + "' has no candidate");
    scored.push_back({bleu1(*p.candidate, p.reference), &p});
  }
  if (scored.size() < opt.k_standard)
    throw Error("standard set needs " + std::to_string(opt.k_standard) + " pairs but only " +
                std::to_string(scored.size()) + " are available");

  std::vector<Scored> ranked = scored;
  std::sort(ranked.begin(), ranked.end(), [](const Scored& a, const Scored& b) {
    if (a.bleu != b.bleu) return a.bleu > b.bleu;
    return a.pair->pair_id < b.pair->pair_id;
  });

  EvalSetSplit split;
  split.threshold = opt.diverse_threshold;
  split.seed = opt.seed;
  std::set<std::string> in_standard;
  for (std::size_t i = 0; i < opt.k_standard; ++i) {
    split.standard.push_back(ranked[i].pair->pair_id);
    in_standard.insert(ranked[i].pair->pair_id);
  }

  std::vector<std::string> qualifying;
  for (const auto& s : scored)
    if (s.bleu < opt.diverse_threshold && !in_standard.count(s.pair->pair_id)) qualifying.push_back(s.pair->pair_id);

  if (qualifying.size() <= opt.k_diverse) {
    if (qualifying.size() < opt.k_diverse && warnings)
      warnings->push_back("only " + std::to_string(qualifying.size()) + " pairs fall below BLEU-1 " +
                          std::to_string(opt.diverse_threshold) + "; requested " + std::to_string(opt.k_diverse));
    split.diverse = std::move(qualifying);
  } else {
    Rng rng(opt.seed);
    std::sample(qualifying.begin(), qualifying.end(), std::back_inserter(split.diverse), opt.k_diverse, rng);
  }
  return split;
}

// ---------------------------------------------------------------------------
// Annotations

struct AnnotationRecord {
  std::string pair_id;
  std::string annotator_id;
  std::optional<int> appropriateness;
  std::optional<int> coherence;
};

enum class HumanLabel { positive, negative };

struct HumanJudgement {
  double human_score = 0.0;
  HumanLabel label = HumanLabel::negative;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur.push_back('"');
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      cells.push_back(std::move(cur));
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  cells.push_back(std::move(cur));
  return cells;
}

inline std::optional<int> parse_rating(const std::string& cell, std::size_t line_no) {
  std::string s = cell;
  s.erase(std::remove_if(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); }), s.end());
  if (s.empty()) return std::nullopt;
  int v = 0;
  try {
    std::size_t used = 0;
    v = std::stoi(s, &used);
    if (used != s.size()) throw Error("trailing characters");
  } catch (const std::exception&) {
    throw Error("line " + std::to_string(line_no) + ": rating '" + cell + "' is not an integer");
  }
  if (v < 1 || v > 5) throw Error("line " + std::to_string(line_no) + ": rating " + s + " outside [1,5]");
  return v;
}

}  // namespace detail

// CSV with header pair_id,annotator_id,appropriateness,coherence. An empty
// rating cell is read as a missing aspect.
inline std::vector<AnnotationRecord> parse_annotations(std::istream& in) {
  std::vector<AnnotationRecord> records;
  std::string line;
  std::size_t line_no = 0;
  std::map<std::string, std::size_t> column;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto cells = detail::split_csv_line(line);
    if (column.empty()) {
      for (std::size_t i = 0; i < cells.size(); ++i) column[cells[i]] = i;
      for (const char* need : {"pair_id", "annotator_id", "appropriateness", "coherence"})
        if (!column.count(need)) throw Error(std::string("annotation header lacks column '") + need + "'");
      continue;
    }
    if (cells.size() < column.size())
      throw Error("line " + std::to_string(line_no) + ": expected " + std::to_string(column.size()) + " columns");
    AnnotationRecord r;
    r.pair_id = cells[column["pair_id"]];
    r.annotator_id = cells[column["annotator_id"]];
    r.appropriateness = detail::parse_rating(cells[column["appropriateness"]], line_no);
    r.coherence = detail::parse_rating(cells[column["coherence"]], line_no);
    records.push_back(std::move(r));
  }
  return records;
}

inline std::vector<AnnotationRecord> load_annotations(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open annotation file: " + path);
  return parse_annotations(in);
}

// Mean over every (annotator, aspect) rating of a pair; positive iff >= 4.
inline std::map<std::string, HumanJudgement> aggregate_annotations(const std::vector<AnnotationRecord>& records) {
  std::map<std::string, std::pair<double, int>> sums;
  for (const auto& r : records) {
    if (!r.appropriateness || !r.coherence)
      throw Error("pair '" + r.pair_id + "' annotator '" + r.annotator_id + "' is missing the " +
                  (!r.appropriateness ? "appropriateness" : "coherence") + " rating");
    for (int v : {*r.appropriateness, *r.coherence}) {
      if (v < 1 || v > 5) throw Error("rating outside [1,5] for pair '" + r.pair_id + "'");
      auto& [s, n] = sums[r.pair_id];
      s += v;
      ++n;
    }
  }
  std::map<std::string, HumanJudgement> out;
  for (const auto& [id, sn] : sums) {
    HumanJudgement h;
    h.human_score = sn.first / sn.second;
    h.label = h.human_score >= 4.0 ? HumanLabel::positive : HumanLabel::negative;
    out.emplace(id, h);
  }
  return out;
}

}  // namespace cmn
