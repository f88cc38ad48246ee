#pragma once

// Neural core: a pair encoder over [CLS] c [SEP] r with segment embeddings, a
// context-only encoder, Gaussian posterior/prior heads, an NSP logit head, and
// a causal decoder conditioned on the context prefix and a latent vector.

#include "cmn/autodiff.hpp"
#include "cmn/corpus.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace cmn {

using ad::Matrix;
using ad::Tape;
using ad::Var;
using TokenIds = std::vector<int>;

// ---------------------------------------------------------------------------
// Vocabulary

class Vocabulary {
 public:
  static constexpr int kUnk = 0;
  static constexpr int kCls = 1;
  static constexpr int kSep = 2;

  Vocabulary() : tokens_{"[UNK]", "[CLS]", "[SEP]"} { reindex(); }

  explicit Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    if (tokens_.size() < 3 || tokens_[0] != "[UNK]" || tokens_[1] != "[CLS]" || tokens_[2] != "[SEP]")
      throw Error("vocabulary must start with [UNK], [CLS], [SEP]");
    reindex();
  }

  // Word-level vocabulary over contexts and references, sorted for stability.
  static Vocabulary build(const std::vector<DialoguePair>& pairs, int min_count = 1) {
    std::map<std::string, int> counts;
    for (const auto& p : pairs) {
      for (const auto& w : p.context) ++counts[w];
      for (const auto& w : p.reference) ++counts[w];
    }
    std::vector<std::string> tokens{"[UNK]", "[CLS]", "[SEP]"};
    for (const auto& [w, n] : counts)
      if (n >= min_count && w != "[UNK]" && w != "[CLS]" && w != "[SEP]") tokens.push_back(w);
    return Vocabulary(std::move(tokens));
  }

  int size() const { return static_cast<int>(tokens_.size()); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  int id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
  }

  TokenIds encode(const Tokens& tokens) const {
    TokenIds ids;
    ids.reserve(tokens.size());
    for (const auto& t : tokens) ids.push_back(id(t));
    return ids;
  }

 private:
  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < tokens_.size(); ++i)
      if (!index_.emplace(tokens_[i], static_cast<int>(i)).second) throw Error("duplicate vocabulary entry: " + tokens_[i]);
  }

  std::vector<std::string> tokens_;
  std::map<std::string, int> index_;
};

// ---------------------------------------------------------------------------
// Configuration and value types

struct ModelConfig {
  int vocab_size = 0;
  int latent_dim = 32;
  int hidden_dim = 64;
  int num_heads = 4;
  int ffn_dim = 0;  // 0 selects 2 * hidden_dim
  int encoder_layers = 2;
  int decoder_layers = 1;
  int max_sequence_length = 64;
  bool share_encoders = false;
  std::uint64_t seed = 0;
  double log_variance_min = -8.0;
  double log_variance_max = 8.0;

  int effective_ffn_dim() const { return ffn_dim > 0 ? ffn_dim : 2 * hidden_dim; }

  void validate() const {
    auto need = [](bool ok, const char* field, const char* what) {
      if (!ok) throw Error(std::string("model.") + field + ": " + what);
    };
    need(vocab_size >= 4, "vocab_size", "must be at least 4");
    need(latent_dim >= 1, "latent_dim", "must be >= 1");
    need(hidden_dim >= 1, "hidden_dim", "must be >= 1");
    need(num_heads >= 1 && hidden_dim % num_heads == 0, "num_heads", "must divide hidden_dim");
    need(encoder_layers >= 0, "encoder_layers", "must be >= 0");
    need(decoder_layers >= 0, "decoder_layers", "must be >= 0");
    need(max_sequence_length >= 4, "max_sequence_length", "must be >= 4");
    need(log_variance_min < log_variance_max, "log_variance_min", "must be below log_variance_max");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"vocab_size", c.vocab_size},
       {"latent_dim", c.latent_dim},
       {"hidden_dim", c.hidden_dim},
       {"num_heads", c.num_heads},
       {"ffn_dim", c.ffn_dim},
       {"encoder_layers", c.encoder_layers},
       {"decoder_layers", c.decoder_layers},
       {"max_sequence_length", c.max_sequence_length},
       {"share_encoders", c.share_encoders},
       {"seed", c.seed},
       {"log_variance_min", c.log_variance_min},
       {"log_variance_max", c.log_variance_max}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.latent_dim = j.value("latent_dim", d.latent_dim);
  c.hidden_dim = j.value("hidden_dim", d.hidden_dim);
  c.num_heads = j.value("num_heads", d.num_heads);
  c.ffn_dim = j.value("ffn_dim", d.ffn_dim);
  c.encoder_layers = j.value("encoder_layers", d.encoder_layers);
  c.decoder_layers = j.value("decoder_layers", d.decoder_layers);
  c.max_sequence_length = j.value("max_sequence_length", d.max_sequence_length);
  c.share_encoders = j.value("share_encoders", d.share_encoders);
  c.seed = j.value("seed", d.seed);
  c.log_variance_min = j.value("log_variance_min", d.log_variance_min);
  c.log_variance_max = j.value("log_variance_max", d.log_variance_max);
}

struct EncodedPair {
  Eigen::VectorXd h_q;
  double nsp_logit = 0.0;
};

struct EncodedContext {
  Eigen::VectorXd h_p;
};

struct LatentGaussian {
  Eigen::VectorXd mean;
  Eigen::VectorXd log_variance;
};

enum class LatentSource { posterior_pair, posterior_candidate, posterior_negative, prior };

struct LatentSample {
  Eigen::VectorXd z;
  LatentSource source = LatentSource::prior;
};

struct PairGraph {
  Var h_q;        // 1 x hidden
  Var nsp_logit;  // 1 x 1
};

struct GaussianGraph {
  Var mean;          // 1 x latent
  Var log_variance;  // 1 x latent
};

inline void require_finite(const Matrix& m, const char* what) {
  if (!m.allFinite()) throw Error(std::string(what) + ": non-finite values");
}

// Closed-form KL(q || p) between diagonal Gaussians, summed over dimensions.
inline double kl_gaussian(const LatentGaussian& q, const LatentGaussian& p) {
  const auto n = q.mean.size();
  if (q.log_variance.size() != n || p.mean.size() != n || p.log_variance.size() != n)
    throw Error("kl_gaussian: dimension mismatch");
  double kl = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double diff = q.mean(i) - p.mean(i);
    kl += 0.5 * (p.log_variance(i) - q.log_variance(i) +
                 (std::exp(q.log_variance(i)) + diff * diff) * std::exp(-p.log_variance(i)) - 1.0);
  }
  return kl;
}

inline Var kl_gaussian(const GaussianGraph& q, const GaussianGraph& p) {
  if (q.mean.cols() != p.mean.cols()) throw Error("kl_gaussian: dimension mismatch");
  using namespace ad;
  Var diff = sub(q.mean, p.mean);
  Var num = add(exp(q.log_variance), hadamard(diff, diff));
  Var ratio = hadamard(num, exp(scale(p.log_variance, -1.0)));
  Var terms = add_scalar(add(sub(p.log_variance, q.log_variance), ratio), -1.0);
  return scale(sum(terms), 0.5);
}

// Standard normal noise for a reparameterized draw; consumes rng.
inline Matrix standard_normal_row(Eigen::Index dim, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix eps(1, dim);
  for (Eigen::Index i = 0; i < dim; ++i) eps(0, i) = normal(rng);
  return eps;
}

// z = mean + exp(0.5 * log_variance) * eps, differentiable in mean and log_variance.
inline Var reparameterize(Tape& tape, const GaussianGraph& g, Rng& rng) {
  Var eps = tape.constant(standard_normal_row(g.mean.cols(), rng));
  return ad::add(g.mean, ad::hadamard(ad::exp(ad::scale(g.log_variance, 0.5)), eps));
}

inline std::vector<LatentSample> sample_latent(const LatentGaussian& g, Rng& rng, int n_samples,
                                               LatentSource source = LatentSource::prior) {
  if (n_samples < 1) throw Error("sample_latent: n_samples must be >= 1");
  const Eigen::VectorXd sd = (0.5 * g.log_variance.array()).exp();
  std::vector<LatentSample> out;
  out.reserve(static_cast<std::size_t>(n_samples));
  for (int s = 0; s < n_samples; ++s) {
    const Matrix eps = standard_normal_row(g.mean.size(), rng);
    LatentSample ls;
    ls.z = g.mean.array() + sd.array() * eps.row(0).transpose().array();
    ls.source = source;
    out.push_back(std::move(ls));
  }
  return out;
}

// Keeps the most recent context tokens and the leading response tokens so
// that |context| + |response| <= budget. Context is shortened first.
inline std::pair<TokenIds, TokenIds> truncate_pair(std::span<const int> context, std::span<const int> response,
                                                    std::size_t budget) {
  std::size_t c = context.size(), r = response.size();
  if (c + r > budget) {
    const std::size_t min_c = std::min<std::size_t>(c, 1);
    const std::size_t over = c + r - budget;
    const std::size_t cut = std::min(over, c - min_c);
    c -= cut;
  }
  if (c + r > budget) r = budget > c ? budget - c : 0;
  return {TokenIds(context.end() - static_cast<std::ptrdiff_t>(c), context.end()),
          TokenIds(response.begin(), response.begin() + static_cast<std::ptrdiff_t>(r))};
}

// ---------------------------------------------------------------------------
// Model

class Model {
 public:
  explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(cfg_.seed);
    pair_encoder_ = make_stack("pair_encoder", cfg_.encoder_layers, true, rng);
    if (!cfg_.share_encoders) context_encoder_ = make_stack("context_encoder", cfg_.encoder_layers, false, rng);
    nsp_w_ = linear_weight("nsp.w", cfg_.hidden_dim, 1, rng);
    nsp_b_ = zeros("nsp.b", 1, 1);
    post_mean_w_ = zeros("posterior.mean.w", cfg_.hidden_dim, cfg_.latent_dim);
    post_mean_b_ = zeros("posterior.mean.b", 1, cfg_.latent_dim);
    post_lv_w_ = zeros("posterior.log_variance.w", cfg_.hidden_dim, cfg_.latent_dim);
    post_lv_b_ = zeros("posterior.log_variance.b", 1, cfg_.latent_dim);
    prior_mean_w_ = zeros("prior.mean.w", cfg_.hidden_dim, cfg_.latent_dim);
    prior_mean_b_ = zeros("prior.mean.b", 1, cfg_.latent_dim);
    prior_lv_w_ = zeros("prior.log_variance.w", cfg_.hidden_dim, cfg_.latent_dim);
    prior_lv_b_ = zeros("prior.log_variance.b", 1, cfg_.latent_dim);
    decoder_ = make_stack("decoder", cfg_.decoder_layers, false, rng);
    latent_w_ = linear_weight("decoder.latent.w", cfg_.latent_dim, cfg_.hidden_dim, rng);
    latent_b_ = zeros("decoder.latent.b", 1, cfg_.hidden_dim);
    out_w_ = linear_weight("decoder.out.w", cfg_.hidden_dim, cfg_.vocab_size, rng);
    out_b_ = zeros("decoder.out.b", 1, cfg_.vocab_size);
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  const ModelConfig& config() const { return cfg_; }
  ad::ParameterStore& parameters() { return store_; }
  const ad::ParameterStore& parameters() const { return store_; }

  // Combined token budget for a (context, response) pair.
  std::size_t pair_budget() const { return static_cast<std::size_t>(cfg_.max_sequence_length) - 2; }

  // --- graph-level API (training) ---------------------------------------

  PairGraph pair_graph(Tape& tape, std::span<const int> context, std::span<const int> response) const {
    if (context.empty() || response.empty()) throw Error("encode_pair: empty context or response");
    check_ids(context);
    check_ids(response);
    auto [c, r] = truncate_pair(context, response, pair_budget());
    TokenIds ids{Vocabulary::kCls};
    ids.insert(ids.end(), c.begin(), c.end());
    ids.push_back(Vocabulary::kSep);
    std::vector<int> seg(ids.size(), 0);
    ids.insert(ids.end(), r.begin(), r.end());
    seg.resize(ids.size(), 1);
    Var h = run_stack(tape, pair_encoder_, embed(tape, pair_encoder_, ids, seg), false);
    PairGraph out;
    out.h_q = ad::slice_rows(h, 0, 1);
    out.nsp_logit = linear(tape, out.h_q, nsp_w_, nsp_b_);
    return out;
  }

  Var context_graph(Tape& tape, std::span<const int> context) const {
    if (context.empty()) throw Error("encode_context: empty context");
    check_ids(context);
    const std::size_t keep = std::min(context.size(), static_cast<std::size_t>(cfg_.max_sequence_length) - 1);
    TokenIds ids{Vocabulary::kCls};
    ids.insert(ids.end(), context.end() - static_cast<std::ptrdiff_t>(keep), context.end());
    const Stack& stack = cfg_.share_encoders ? pair_encoder_ : context_encoder_;
    std::vector<int> seg(ids.size(), 0);
    Var h = run_stack(tape, stack, embed(tape, stack, ids, seg), false);
    return ad::slice_rows(h, 0, 1);
  }

  GaussianGraph posterior_graph(Tape& tape, Var h_q) const {
    return {linear(tape, h_q, post_mean_w_, post_mean_b_),
            ad::clamp(linear(tape, h_q, post_lv_w_, post_lv_b_), cfg_.log_variance_min, cfg_.log_variance_max)};
  }

  GaussianGraph prior_graph(Tape& tape, Var h_p) const {
    return {linear(tape, h_p, prior_mean_w_, prior_mean_b_),
            ad::clamp(linear(tape, h_p, prior_lv_w_, prior_lv_b_), cfg_.log_variance_min, cfg_.log_variance_max)};
  }

  // log p(target | context, z) under teacher forcing, summed over target tokens.
  Var decode_graph(Tape& tape, std::span<const int> context, Var z, std::span<const int> target) const {
    if (target.empty()) throw Error("decode_logprob: empty target");
    if (context.empty()) throw Error("decode_logprob: empty context");
    check_ids(context);
    check_ids(target);
    if (z.rows() != 1 || z.cols() != cfg_.latent_dim) throw Error("decode_logprob: latent dimension mismatch");
    auto [c, t] = truncate_pair(context, target, pair_budget());
    TokenIds ids = c;
    ids.push_back(Vocabulary::kSep);
    ids.insert(ids.end(), t.begin(), t.end() - 1);
    Var zproj = linear(tape, z, latent_w_, latent_b_);
    Var tok = ad::gather_rows(tape.param(*decoder_.token), ids);
    Var x = ad::concat_rows(zproj, ad::add_row(tok, zproj));
    std::vector<int> pos(static_cast<std::size_t>(x.rows()));
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<int>(i);
    x = ad::add(x, ad::gather_rows(tape.param(*decoder_.position), pos));
    Var h = run_stack(tape, decoder_, x, true);
    const auto first = static_cast<Eigen::Index>(1 + c.size());
    Var logits = linear(tape, ad::slice_rows(h, first, static_cast<Eigen::Index>(t.size())), out_w_, out_b_);
    return ad::sequence_log_prob(logits, t);
  }

  // --- value-level API ---------------------------------------------------

  EncodedPair encode_pair(std::span<const int> context, std::span<const int> response) const {
    Tape tape;
    PairGraph g = pair_graph(tape, context, response);
    require_finite(g.h_q.value(), "encode_pair");
    require_finite(g.nsp_logit.value(), "encode_pair");
    return {g.h_q.value().row(0).transpose(), g.nsp_logit.scalar()};
  }

  EncodedContext encode_context(std::span<const int> context) const {
    Tape tape;
    Var h = context_graph(tape, context);
    require_finite(h.value(), "encode_context");
    return {h.value().row(0).transpose()};
  }

  LatentGaussian posterior_params(const EncodedPair& h) const {
    Tape tape;
    return to_value(posterior_graph(tape, as_row(tape, h.h_q)));
  }

  LatentGaussian prior_params(const EncodedContext& h) const {
    Tape tape;
    return to_value(prior_graph(tape, as_row(tape, h.h_p)));
  }

  double nsp_probability(std::span<const int> context, std::span<const int> candidate) const {
    const double y = encode_pair(context, candidate).nsp_logit;
    return 1.0 / (1.0 + std::exp(-y));
  }

  double decode_logprob(std::span<const int> context, const LatentSample& z, std::span<const int> target) const {
    Tape tape;
    Matrix zr = z.z.transpose();
    Var lp = decode_graph(tape, context, tape.constant(std::move(zr)), target);
    require_finite(lp.value(), "decode_logprob");
    return lp.scalar();
  }

 private:
  struct Layer {
    ad::Parameter *ln1_g, *ln1_b, *wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo;
    ad::Parameter *ln2_g, *ln2_b, *w1, *b1, *w2, *b2;
  };

  struct Stack {
    ad::Parameter* token = nullptr;
    ad::Parameter* position = nullptr;
    ad::Parameter* segment = nullptr;
    std::vector<Layer> layers;
    ad::Parameter *final_g = nullptr, *final_b = nullptr;
  };

  ad::Parameter* zeros(const std::string& name, int rows, int cols) {
    return store_.add(name, Matrix::Zero(rows, cols));
  }
  ad::Parameter* ones(const std::string& name, int rows, int cols) {
    return store_.add(name, Matrix::Ones(rows, cols));
  }
  ad::Parameter* gaussian(const std::string& name, int rows, int cols, double sd, Rng& rng) {
    std::normal_distribution<double> normal(0.0, sd);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
    return store_.add(name, std::move(m));
  }
  ad::Parameter* linear_weight(const std::string& name, int in, int out, Rng& rng) {
    return gaussian(name, in, out, 1.0 / std::sqrt(static_cast<double>(in)), rng);
  }

  Stack make_stack(const std::string& prefix, int layers, bool segments, Rng& rng) {
    const int d = cfg_.hidden_dim, f = cfg_.effective_ffn_dim();
    Stack s;
    s.token = gaussian(prefix + ".token_embedding", cfg_.vocab_size, d, 0.5, rng);
    s.position = gaussian(prefix + ".position_embedding", cfg_.max_sequence_length, d, 0.1, rng);
    if (segments) s.segment = gaussian(prefix + ".segment_embedding", 2, d, 0.5, rng);
    for (int l = 0; l < layers; ++l) {
      const std::string p = prefix + ".layer" + std::to_string(l) + ".";
      Layer L{};
      L.ln1_g = ones(p + "ln1.gain", 1, d);
      L.ln1_b = zeros(p + "ln1.bias", 1, d);
      L.wq = linear_weight(p + "attn.q.w", d, d, rng);
      L.bq = zeros(p + "attn.q.b", 1, d);
      L.wk = linear_weight(p + "attn.k.w", d, d, rng);
      L.bk = zeros(p + "attn.k.b", 1, d);
      L.wv = linear_weight(p + "attn.v.w", d, d, rng);
      L.bv = zeros(p + "attn.v.b", 1, d);
      L.wo = linear_weight(p + "attn.o.w", d, d, rng);
      L.bo = zeros(p + "attn.o.b", 1, d);
      L.ln2_g = ones(p + "ln2.gain", 1, d);
      L.ln2_b = zeros(p + "ln2.bias", 1, d);
      L.w1 = linear_weight(p + "ffn.w1", d, f, rng);
      L.b1 = zeros(p + "ffn.b1", 1, f);
      L.w2 = linear_weight(p + "ffn.w2", f, d, rng);
      L.b2 = zeros(p + "ffn.b2", 1, d);
      s.layers.push_back(L);
    }
    s.final_g = ones(prefix + ".final_ln.gain", 1, d);
    s.final_b = zeros(prefix + ".final_ln.bias", 1, d);
    return s;
  }

  void check_ids(std::span<const int> ids) const {
    for (int id : ids)
      if (id < 0 || id >= cfg_.vocab_size) throw Error("token id " + std::to_string(id) + " outside vocabulary");
  }

  static Var linear(Tape& tape, Var x, const ad::Parameter* w, const ad::Parameter* b) {
    return ad::add_row(ad::matmul(x, tape.param(*w)), tape.param(*b));
  }

  Var embed(Tape& tape, const Stack& s, const TokenIds& ids, const std::vector<int>& seg) const {
    Var x = ad::gather_rows(tape.param(*s.token), ids);
    std::vector<int> pos(ids.size());
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<int>(i);
    x = ad::add(x, ad::gather_rows(tape.param(*s.position), pos));
    if (s.segment) x = ad::add(x, ad::gather_rows(tape.param(*s.segment), seg));
    return x;
  }

  // Pre-norm transformer layers followed by a final layer norm.
  Var run_stack(Tape& tape, const Stack& s, Var x, bool causal) const {
    for (const Layer& L : s.layers) {
      Var h = ad::layer_norm(x, tape.param(*L.ln1_g), tape.param(*L.ln1_b));
      Var q = linear(tape, h, L.wq, L.bq);
      Var k = linear(tape, h, L.wk, L.bk);
      Var v = linear(tape, h, L.wv, L.bv);
      Var a = ad::attention(q, k, v, cfg_.num_heads, causal);
      x = ad::add(x, linear(tape, a, L.wo, L.bo));
      h = ad::layer_norm(x, tape.param(*L.ln2_g), tape.param(*L.ln2_b));
      h = ad::gelu(linear(tape, h, L.w1, L.b1));
      x = ad::add(x, linear(tape, h, L.w2, L.b2));
    }
    return ad::layer_norm(x, tape.param(*s.final_g), tape.param(*s.final_b));
  }

  static Var as_row(Tape& tape, const Eigen::VectorXd& v) {
    Matrix m = v.transpose();
    return tape.constant(std::move(m));
  }

  static LatentGaussian to_value(const GaussianGraph& g) {
    require_finite(g.mean.value(), "latent mean");
    require_finite(g.log_variance.value(), "latent log-variance");
    return {g.mean.value().row(0).transpose(), g.log_variance.value().row(0).transpose()};
  }

  ModelConfig cfg_;
  ad::ParameterStore store_;
  Stack pair_encoder_;
  Stack context_encoder_;
  Stack decoder_;
  ad::Parameter *nsp_w_ = nullptr, *nsp_b_ = nullptr;
  ad::Parameter *post_mean_w_ = nullptr, *post_mean_b_ = nullptr, *post_lv_w_ = nullptr, *post_lv_b_ = nullptr;
  ad::Parameter *prior_mean_w_ = nullptr, *prior_mean_b_ = nullptr, *prior_lv_w_ = nullptr, *prior_lv_b_ = nullptr;
  ad::Parameter *latent_w_ = nullptr, *latent_b_ = nullptr;
  ad::Parameter *out_w_ = nullptr, *out_b_ = nullptr;
};

}  // namespace cmn
