#pragma once

// Candidate scoring. Mutual information between latent codes is estimated
// with a contrastive bound over a dot-product critic,
//
//   I = F_pos + log(N-1) - log( mean_n exp(F_neg_n) ),
//
// and combined with the NSP probability g of the candidate:
//
//   score = g * I(c,x) + I(x,r).

#include "cmn/corpus.hpp"
#include "cmn/model.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace cmn {

struct NegativeExample {
  std::string pair_id;
  std::string conversation_id;
  Tokens context;
  Tokens reference;
};

// References (with their contexts) from conversations other than the scored pair's.
struct NegativeSet {
  std::vector<NegativeExample> members;

  std::size_t size() const { return members.size(); }
};

struct CriticScores {
  double positive = 0.0;
  std::vector<double> negatives;
};

struct ScoreRecord {
  std::string pair_id;
  double g = 0.0;
  double mi_context = 0.0;
  double mi_reference = 0.0;
  double score = 0.0;
  double score_wo_nsp = 0.0;
  double score_wo_mi = 0.0;
  int n_negatives = 0;
  int mc_samples = 0;
  std::vector<std::string> negative_ids;
};

enum class MiKind { context_candidate, candidate_reference };

// ---------------------------------------------------------------------------
// Seeding

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

// Stream seed for one scored pair, independent of scheduling.
inline std::uint64_t pair_seed(std::uint64_t global_seed, const std::string& pair_id) {
  return splitmix64(global_seed ^ splitmix64(fnv1a64(pair_id)));
}

// ---------------------------------------------------------------------------
// Estimator pieces

inline double critic(const LatentSample& a, const LatentSample& b) {
  if (a.z.size() != b.z.size()) throw Error("critic: dimension mismatch");
  return a.z.dot(b.z);
}

inline double info_nce(const CriticScores& s) {
  const std::size_t n = s.negatives.size();
  if (n < 2) throw Error("info_nce: need at least 2 negatives");
  if (std::isnan(s.positive)) throw Error("info_nce: NaN positive score");
  double m = -std::numeric_limits<double>::infinity();
  for (double v : s.negatives) {
    if (std::isnan(v)) throw Error("info_nce: NaN negative score");
    m = std::max(m, v);
  }
  double acc = 0.0;
  for (double v : s.negatives) acc += std::exp(v - m);
  const double log_mean_exp = m + std::log(acc) - std::log(static_cast<double>(n));
  return s.positive + std::log(static_cast<double>(n) - 1.0) - log_mean_exp;
}

inline NegativeSet draw_negative_set(const std::vector<DialoguePair>& pool, const DialoguePair& pair, std::size_t n,
                                     Rng& rng) {
  if (n < 2) throw Error("negative set size must be >= 2");
  std::vector<const DialoguePair*> eligible;
  for (const auto& p : pool)
    if (p.conversation_id != pair.conversation_id) eligible.push_back(&p);
  if (eligible.size() < n)
    throw Error("pair '" + pair.pair_id + "': only " + std::to_string(eligible.size()) +
                " references from other conversations, need " + std::to_string(n));
  std::vector<const DialoguePair*> chosen;
  std::sample(eligible.begin(), eligible.end(), std::back_inserter(chosen), n, rng);
  NegativeSet set;
  for (const auto* p : chosen) set.members.push_back({p->pair_id, p->conversation_id, p->context, p->reference});
  return set;
}

struct MiEstimate {
  double value = 0.0;           // mean over resamplings
  double standard_error = 0.0;  // of the mean; 0 when a single resampling
  std::vector<double> draws;
};

inline MiEstimate estimate_mi_detailed(MiKind kind, const Model& model, const Vocabulary& vocab,
                                       const DialoguePair& pair, const NegativeSet& negatives, Rng& rng,
                                       int mc_samples) {
  if (!pair.candidate) throw Error("estimate_mi: pair '" + pair.pair_id + "' has no candidate");
  if (mc_samples < 1) throw Error("estimate_mi: mc_samples must be >= 1");
  if (negatives.size() < 2) throw Error("estimate_mi: need at least 2 negatives");
  for (const auto& m : negatives.members)
    if (m.conversation_id == pair.conversation_id)
      throw Error("estimate_mi: negative '" + m.pair_id + "' shares the scored pair's conversation");

  const TokenIds c = vocab.encode(pair.context);
  const TokenIds x = vocab.encode(*pair.candidate);
  const LatentGaussian candidate_post = model.posterior_params(model.encode_pair(c, x));

  LatentGaussian anchor;
  std::vector<LatentGaussian> negative_dists;
  negative_dists.reserve(negatives.size());
  if (kind == MiKind::candidate_reference) {
    anchor = model.posterior_params(model.encode_pair(c, vocab.encode(pair.reference)));
    for (const auto& m : negatives.members)
      negative_dists.push_back(model.posterior_params(model.encode_pair(c, vocab.encode(m.reference))));
  } else {
    anchor = model.prior_params(model.encode_context(c));
    for (const auto& m : negatives.members)
      negative_dists.push_back(model.prior_params(model.encode_context(vocab.encode(m.context))));
  }
  const LatentSource anchor_src =
      kind == MiKind::candidate_reference ? LatentSource::posterior_pair : LatentSource::prior;
  const LatentSource neg_src = kind == MiKind::candidate_reference ? LatentSource::posterior_negative : LatentSource::prior;

  MiEstimate est;
  for (int s = 0; s < mc_samples; ++s) {
    const LatentSample z2 = sample_latent(candidate_post, rng, 1, LatentSource::posterior_candidate).front();
    const LatentSample z1 = sample_latent(anchor, rng, 1, anchor_src).front();
    CriticScores scores;
    scores.positive = critic(z1, z2);
    for (const auto& nd : negative_dists) scores.negatives.push_back(critic(sample_latent(nd, rng, 1, neg_src).front(), z2));
    est.draws.push_back(info_nce(scores));
  }
  double mean = 0.0;
  for (double v : est.draws) mean += v;
  mean /= static_cast<double>(est.draws.size());
  est.value = mean;
  if (est.draws.size() > 1) {
    double ss = 0.0;
    for (double v : est.draws) ss += (v - mean) * (v - mean);
    est.standard_error = std::sqrt(ss / static_cast<double>(est.draws.size() - 1) / static_cast<double>(est.draws.size()));
  }
  return est;
}

inline double estimate_mi(MiKind kind, const Model& model, const Vocabulary& vocab, const DialoguePair& pair,
                          const NegativeSet& negatives, Rng& rng, int mc_samples) {
  return estimate_mi_detailed(kind, model, vocab, pair, negatives, rng, mc_samples).value;
}

inline double sigmoid(double y) { return y >= 0 ? 1.0 / (1.0 + std::exp(-y)) : std::exp(y) / (1.0 + std::exp(y)); }

inline double nsp_probability(const Model& model, const Vocabulary& vocab, const Tokens& context,
                              const Tokens& candidate) {
  return sigmoid(model.encode_pair(vocab.encode(context), vocab.encode(candidate)).nsp_logit);
}

// Assembles a record from its components. Ablations drop one side each:
// score_wo_nsp keeps both MI terms unweighted, score_wo_mi keeps g alone.
inline ScoreRecord combine_scores(std::string pair_id, double g, double mi_context, double mi_reference) {
  ScoreRecord r;
  r.pair_id = std::move(pair_id);
  r.g = g;
  r.mi_context = mi_context;
  r.mi_reference = mi_reference;
  r.score = g * mi_context + mi_reference;
  r.score_wo_nsp = mi_context + mi_reference;
  r.score_wo_mi = g;
  return r;
}

inline ScoreRecord score(const DialoguePair& pair, const NegativeSet& negatives, const Model& model,
                         const Vocabulary& vocab, Rng& rng, int mc_samples) {
  if (!pair.candidate) throw Error("score: pair '" + pair.pair_id + "' has no candidate");
  const double g = nsp_probability(model, vocab, pair.context, *pair.candidate);
  const double mi_c = estimate_mi(MiKind::context_candidate, model, vocab, pair, negatives, rng, mc_samples);
  const double mi_r = estimate_mi(MiKind::candidate_reference, model, vocab, pair, negatives, rng, mc_samples);
  ScoreRecord r = combine_scores(pair.pair_id, g, mi_c, mi_r);
  r.n_negatives = static_cast<int>(negatives.size());
  r.mc_samples = mc_samples;
  for (const auto& m : negatives.members) r.negative_ids.push_back(m.pair_id);
  return r;
}

struct EvalConfig {
  int n_negatives = 32;
  int mc_samples = 8;
  std::uint64_t seed = 0;
  int workers = 1;

  void validate() const {
    if (n_negatives < 2) throw Error("eval.n_negatives: must be >= 2");
    if (mc_samples < 1) throw Error("eval.mc_samples: must be >= 1");
    if (workers < 1) throw Error("eval.workers: must be >= 1");
  }
};

// Scores every pair. Each pair draws its negative set from `pool` and its
// latent samples from a stream seeded by (seed, pair_id), so results do not
// depend on the worker count.
inline std::vector<ScoreRecord> score_pairs(const std::vector<DialoguePair>& pairs,
                                            const std::vector<DialoguePair>& pool, const Model& model,
                                            const Vocabulary& vocab, const EvalConfig& cfg) {
  cfg.validate();
  std::vector<ScoreRecord> out(pairs.size());
  auto work = [&](std::size_t i) {
    Rng rng(pair_seed(cfg.seed, pairs[i].pair_id));
    const NegativeSet neg = draw_negative_set(pool, pairs[i], static_cast<std::size_t>(cfg.n_negatives), rng);
    out[i] = score(pairs[i], neg, model, vocab, rng, cfg.mc_samples);
  };
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(cfg.workers), std::max<std::size_t>(1, pairs.size()));
  if (workers <= 1) {
    for (std::size_t i = 0; i < pairs.size(); ++i) work(i);
    return out;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> threads;
  for (std::size_t w = 0; w < workers; ++w) {
    threads.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < pairs.size(); i += workers) work(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

// Affine min-max map onto [lo, hi].
inline std::vector<double> normalize_scores(const std::vector<double>& scores, double lo = 1.0, double hi = 5.0) {
  if (scores.empty()) throw Error("normalize_scores: empty input");
  const auto [mn, mx] = std::minmax_element(scores.begin(), scores.end());
  if (*mn == *mx) throw Error("normalize_scores: all values are equal");
  const double a = *mn, b = *mx;
  std::vector<double> out;
  out.reserve(scores.size());
  for (double s : scores) out.push_back(lo + (s - a) * (hi - lo) / (b - a));
  return out;
}

// ---------------------------------------------------------------------------
// Reports

inline nlohmann::json to_json(const ScoreRecord& r) {
  return {{"pair_id", r.pair_id},
          {"g", r.g},
          {"mi_context", r.mi_context},
          {"mi_reference", r.mi_reference},
          {"score", r.score},
          {"score_wo_nsp", r.score_wo_nsp},
          {"score_wo_mi", r.score_wo_mi},
          {"n_negatives", r.n_negatives},
          {"mc_samples", r.mc_samples},
          {"negative_ids", r.negative_ids}};
}

inline ScoreRecord score_record_from_json(const nlohmann::json& j) {
  ScoreRecord r;
  r.pair_id = j.at("pair_id").get<std::string>();
  r.g = j.at("g").get<double>();
  r.mi_context = j.at("mi_context").get<double>();
  r.mi_reference = j.at("mi_reference").get<double>();
  r.score = j.at("score").get<double>();
  r.score_wo_nsp = j.at("score_wo_nsp").get<double>();
  r.score_wo_mi = j.at("score_wo_mi").get<double>();
  r.n_negatives = j.value("n_negatives", 0);
  r.mc_samples = j.value("mc_samples", 0);
  r.negative_ids = j.value("negative_ids", std::vector<std::string>{});
  return r;
}

// JSONL: first line is the run header, one ScoreRecord per following line.
inline void write_score_report(const std::string& path, const nlohmann::json& header,
                               const std::vector<ScoreRecord>& records) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write score report: " + path);
  out << nlohmann::json{{"header", header}}.dump() << '\n';
  for (const auto& r : records) out << to_json(r).dump() << '\n';
}

struct ScoreReport {
  nlohmann::json header;
  std::vector<ScoreRecord> records;
};

inline ScoreReport read_score_report(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open score report: " + path);
  ScoreReport rep;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto j = nlohmann::json::parse(line);
      if (j.contains("header"))
        rep.header = j["header"];
      else
        rep.records.push_back(score_record_from_json(j));
    } catch (const nlohmann::json::exception& e) {
      throw Error(path + ":" + std::to_string(line_no) + ": malformed score record: " + e.what());
    }
  }
  return rep;
}

inline void write_score_csv(const std::string& path, const std::vector<ScoreRecord>& records) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write score CSV: " + path);
  out.precision(17);
  out << "pair_id,g,mi_context,mi_reference,score,score_wo_nsp,score_wo_mi\n";
  for (const auto& r : records)
    out << r.pair_id << ',' << r.g << ',' << r.mi_context << ',' << r.mi_reference << ',' << r.score << ','
        << r.score_wo_nsp << ',' << r.score_wo_mi << '\n';
}

}  // namespace cmn
