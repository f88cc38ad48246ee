#pragma once

// Two-regime CVAE + NSP objective and the optimization loop.
//
// Positive items (true continuation):
//   total = -E_q[log p(r|c,z)] + kl_weight * KL(q(z|c,r) || p(z|c)) - log sigma(y)
// Negative items (response from another conversation):
//   total = -E_p[log p(r|c,z)] - log sigma(-y)
// where r is always the pair's own reference and y the pair-encoder NSP logit.

#include "cmn/checkpoint.hpp"
#include "cmn/corpus.hpp"
#include "cmn/model.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace cmn {

enum class Regime { positive, negative };

inline const char* to_string(Regime r) { return r == Regime::positive ? "positive" : "negative"; }

struct LossBreakdown {
  double reconstruction = 0.0;
  double kl = 0.0;  // mean over positive items; 0 when the batch has none
  double nsp = 0.0;
  double total = 0.0;
  Regime regime = Regime::positive;
};

enum class KlSchedule { constant_1, linear_anneal };

struct TrainConfig {
  int epochs = 10;
  int batch_size = 16;
  double learning_rate = 1e-3;
  double neg_prob = 0.5;
  KlSchedule kl_schedule = KlSchedule::constant_1;
  int kl_warmup_steps = 0;
  int mc_samples_train = 1;
  std::optional<double> gradient_clip_norm;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  // steps; 0 disables periodic checkpoints
  bool nsp_loss = true;      // train-time toggle; scoring-time ablations do not use it
  bool select_best_nsp = false;

  void validate() const {
    auto need = [](bool ok, const char* field, const char* what) {
      if (!ok) throw Error(std::string("train.") + field + ": " + what);
    };
    need(epochs >= 1, "epochs", "must be >= 1");
    need(batch_size >= 1, "batch_size", "must be >= 1");
    need(learning_rate > 0.0, "learning_rate", "must be positive");
    need(neg_prob >= 0.0 && neg_prob <= 1.0, "neg_prob", "must lie in [0, 1]");
    need(mc_samples_train >= 1, "mc_samples_train", "must be >= 1");
    need(kl_schedule == KlSchedule::constant_1 || kl_warmup_steps >= 1, "kl_warmup_steps",
         "must be >= 1 for linear_anneal");
    need(!gradient_clip_norm || *gradient_clip_norm > 0.0, "gradient_clip_norm", "must be positive");
    need(checkpoint_every >= 0, "checkpoint_every", "must be >= 0");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"learning_rate", c.learning_rate},
       {"neg_prob", c.neg_prob},
       {"kl_schedule", c.kl_schedule == KlSchedule::constant_1 ? "constant_1" : "linear_anneal"},
       {"kl_warmup_steps", c.kl_warmup_steps},
       {"mc_samples_train", c.mc_samples_train},
       {"gradient_clip_norm", c.gradient_clip_norm ? nlohmann::json(*c.gradient_clip_norm) : nlohmann::json()},
       {"seed", c.seed},
       {"checkpoint_every", c.checkpoint_every},
       {"nsp_loss", c.nsp_loss},
       {"select_best_nsp", c.select_best_nsp}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.neg_prob = j.value("neg_prob", d.neg_prob);
  const std::string sched = j.value("kl_schedule", std::string("constant_1"));
  if (sched == "constant_1")
    c.kl_schedule = KlSchedule::constant_1;
  else if (sched == "linear_anneal")
    c.kl_schedule = KlSchedule::linear_anneal;
  else
    throw Error("train.kl_schedule: unknown schedule '" + sched + "'");
  c.kl_warmup_steps = j.value("kl_warmup_steps", d.kl_warmup_steps);
  c.mc_samples_train = j.value("mc_samples_train", d.mc_samples_train);
  if (j.contains("gradient_clip_norm") && !j["gradient_clip_norm"].is_null())
    c.gradient_clip_norm = j["gradient_clip_norm"].get<double>();
  else
    c.gradient_clip_norm.reset();
  c.seed = j.value("seed", d.seed);
  c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
  c.nsp_loss = j.value("nsp_loss", d.nsp_loss);
  c.select_best_nsp = j.value("select_best_nsp", d.select_best_nsp);
}

// KL weight for the 1-based optimizer step.
inline double kl_weight_at(const TrainConfig& cfg, long step) {
  if (cfg.kl_schedule == KlSchedule::constant_1) return 1.0;
  return std::min(1.0, static_cast<double>(step) / static_cast<double>(cfg.kl_warmup_steps));
}

struct ItemLoss {
  LossBreakdown breakdown;
  Var total;
};

struct LossOptions {
  double kl_weight = 1.0;
  int mc_samples = 1;
  bool nsp_loss = true;
};

// Records the loss of one item under the given regime on `tape`. The label
// is not checked here; loss_positive/loss_negative enforce it.
inline ItemLoss regime_loss(Tape& tape, const Model& model, const Vocabulary& vocab, const NspBatchItem& item,
                            Regime regime, Rng& rng, const LossOptions& opt = {}) {
  if (opt.mc_samples < 1) throw Error("mc_samples must be >= 1");
  const TokenIds c = vocab.encode(item.context);
  const TokenIds resp = vocab.encode(item.response);
  const TokenIds target = vocab.encode(item.decoder_target);

  PairGraph pg = model.pair_graph(tape, c, resp);
  GaussianGraph q = model.posterior_graph(tape, pg.h_q);
  GaussianGraph p = model.prior_graph(tape, model.context_graph(tape, c));
  const GaussianGraph& source = regime == Regime::positive ? q : p;

  Var recon_sum;
  for (int s = 0; s < opt.mc_samples; ++s) {
    Var z = reparameterize(tape, source, rng);
    Var lp = model.decode_graph(tape, c, z, target);
    recon_sum = s == 0 ? lp : ad::add(recon_sum, lp);
  }
  Var recon = ad::scale(recon_sum, -1.0 / opt.mc_samples);
  Var kl = kl_gaussian(q, p);
  Var nsp = regime == Regime::positive ? ad::scale(ad::log_sigmoid(pg.nsp_logit), -1.0)
                                       : ad::scale(ad::log_sigmoid(ad::scale(pg.nsp_logit, -1.0)), -1.0);

  Var total = recon;
  if (regime == Regime::positive) total = ad::add(total, ad::scale(kl, opt.kl_weight));
  if (opt.nsp_loss) total = ad::add(total, nsp);

  ItemLoss out;
  out.breakdown = {recon.scalar(), kl.scalar(), nsp.scalar(), total.scalar(), regime};
  out.total = total;
  return out;
}

inline ItemLoss loss_positive(Tape& tape, const Model& model, const Vocabulary& vocab, const NspBatchItem& item,
                              Rng& rng, const LossOptions& opt = {}) {
  if (item.nsp_label != 1) throw Error("loss_positive: item '" + item.pair_id + "' is not a positive sample");
  return regime_loss(tape, model, vocab, item, Regime::positive, rng, opt);
}

inline ItemLoss loss_negative(Tape& tape, const Model& model, const Vocabulary& vocab, const NspBatchItem& item,
                              Rng& rng, const LossOptions& opt = {}) {
  if (item.nsp_label != 0) throw Error("loss_negative: item '" + item.pair_id + "' is not a negative sample");
  return regime_loss(tape, model, vocab, item, Regime::negative, rng, opt);
}

inline LossBreakdown loss_positive(const Model& model, const Vocabulary& vocab, const NspBatchItem& item, Rng& rng,
                                   const LossOptions& opt = {}) {
  Tape tape;
  return loss_positive(tape, model, vocab, item, rng, opt).breakdown;
}

inline LossBreakdown loss_negative(const Model& model, const Vocabulary& vocab, const NspBatchItem& item, Rng& rng,
                                   const LossOptions& opt = {}) {
  Tape tape;
  return loss_negative(tape, model, vocab, item, rng, opt).breakdown;
}

// Routes the item to the regime matching its label.
inline ItemLoss item_loss(Tape& tape, const Model& model, const Vocabulary& vocab, const NspBatchItem& item, Rng& rng,
                          const LossOptions& opt = {}) {
  return item.nsp_label == 1 ? loss_positive(tape, model, vocab, item, rng, opt)
                             : loss_negative(tape, model, vocab, item, rng, opt);
}

// ---------------------------------------------------------------------------
// Optimizer

class Adam {
 public:
  explicit Adam(const ad::ParameterStore& params, double lr, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), m_(params.zero_grads()), v_(params.zero_grads()) {}

  void step(ad::ParameterStore& params, const std::vector<Matrix>& grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grads[i];
      v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grads[i].cwiseProduct(grads[i]);
      params[i].value.array() -= lr_ * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
    }
  }

  double learning_rate() const { return lr_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<Matrix> m_, v_;
};

inline double clip_grad_norm(std::vector<Matrix>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads) sq += g.squaredNorm();
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& g : grads) g *= s;
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Training loop

struct StepLog {
  long step = 0;
  int epoch = 0;
  int positives = 0;
  int negatives = 0;
  double reconstruction = 0.0;
  double kl = 0.0;  // mean over positive items; 0 when the batch has none
  double nsp = 0.0;
  double total = 0.0;
  double lr = 0.0;
  double kl_weight = 1.0;
};

inline nlohmann::json to_json(const StepLog& s) {
  return {{"step", s.step},
          {"epoch", s.epoch},
          {"regime_counts", {{"positive", s.positives}, {"negative", s.negatives}}},
          {"reconstruction", s.reconstruction},
          {"kl", s.kl},
          {"nsp", s.nsp},
          {"total", s.total},
          {"lr", s.lr},
          {"kl_weight", s.kl_weight}};
}

struct TrainResult {
  std::vector<StepLog> steps;
  std::vector<double> epoch_mean_total;
  std::vector<double> validation_nsp_accuracy;
  int selected_epoch = -1;
};

struct TrainHooks {
  std::function<void(const StepLog&)> on_step;
  std::function<void(long step)> on_checkpoint;  // called every checkpoint_every steps
  const std::vector<DialoguePair>* validation = nullptr;
};

struct TrainingError : Error {
  using Error::Error;
};

// Fraction of items classified correctly (g > 0.5 <=> label 1) on an NSP
// batch drawn from `pairs` with the given negative probability.
inline double nsp_accuracy(const Model& model, const Vocabulary& vocab, const std::vector<DialoguePair>& pairs,
                           std::uint64_t seed, double neg_prob = 0.5) {
  if (pairs.empty()) throw Error("nsp_accuracy: no pairs");
  Rng rng(seed);
  const auto items = make_nsp_batch(pairs, neg_prob, rng);
  int correct = 0;
  for (const auto& it : items) {
    const double g = model.nsp_probability(vocab.encode(it.context), vocab.encode(it.response));
    correct += (g > 0.5) == (it.nsp_label == 1);
  }
  return static_cast<double>(correct) / static_cast<double>(items.size());
}

namespace detail {

inline std::string dump_batch(const std::vector<const NspBatchItem*>& batch, const std::vector<LossBreakdown>& losses) {
  std::ostringstream os;
  os << "offending batch:";
  for (std::size_t i = 0; i < batch.size(); ++i) {
    os << "\n  pair_id=" << batch[i]->pair_id << " label=" << batch[i]->nsp_label;
    if (i < losses.size())
      os << " reconstruction=" << losses[i].reconstruction << " kl=" << losses[i].kl << " nsp=" << losses[i].nsp
         << " total=" << losses[i].total;
    os << "\n    context: " << join(batch[i]->context) << "\n    response: " << join(batch[i]->response);
  }
  return os.str();
}

}  // namespace detail

// Optimizes the mean per-item loss over mini-batches. Each epoch shuffles the
// corpus and rebuilds the NSP batch (fresh negatives) from it.
inline TrainResult train(Model& model, const Vocabulary& vocab, const std::vector<DialoguePair>& corpus,
                         const TrainConfig& cfg, const TrainHooks& hooks = {}) {
  cfg.validate();
  if (model.config().vocab_size != vocab.size()) throw Error("train: model vocab_size disagrees with vocabulary");
  {
    std::set<std::string> convs;
    for (const auto& p : corpus) convs.insert(p.conversation_id);
    if (convs.size() < 2) throw Error("train: corpus must span at least 2 conversations");
  }

  Rng rng(cfg.seed);
  auto& params = model.parameters();
  Adam opt(params, cfg.learning_rate);
  TrainResult result;
  long step = 0;
  double best_acc = -1.0;
  std::vector<Matrix> best_values;

  std::vector<std::size_t> order(corpus.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<DialoguePair> pool;
    pool.reserve(corpus.size());
    for (std::size_t i : order) pool.push_back(corpus[i]);
    const auto items = make_nsp_batch(pool, cfg.neg_prob, rng);

    double epoch_total = 0.0;
    for (std::size_t start = 0; start < items.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(items.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<const NspBatchItem*> batch;
      for (std::size_t i = start; i < end; ++i) batch.push_back(&items[i]);
      ++step;

      LossOptions lopt;
      lopt.kl_weight = kl_weight_at(cfg, step);
      lopt.mc_samples = cfg.mc_samples_train;
      lopt.nsp_loss = cfg.nsp_loss;

      auto grads = params.zero_grads();
      StepLog log;
      log.step = step;
      log.epoch = epoch;
      log.lr = opt.learning_rate();
      log.kl_weight = lopt.kl_weight;
      std::vector<LossBreakdown> losses;
      const double inv_b = 1.0 / static_cast<double>(batch.size());
      for (const NspBatchItem* it : batch) {
        Tape tape;
        ItemLoss l = item_loss(tape, model, vocab, *it, rng, lopt);
        losses.push_back(l.breakdown);
        if (!std::isfinite(l.breakdown.total))
          throw TrainingError("non-finite loss at step " + std::to_string(step) + "\n" +
                              detail::dump_batch(batch, losses));
        tape.backward(l.total, inv_b);
        tape.accumulate(grads);
        (it->nsp_label == 1 ? log.positives : log.negatives) += 1;
        log.reconstruction += l.breakdown.reconstruction * inv_b;
        if (it->nsp_label == 1) log.kl += l.breakdown.kl;
        log.nsp += l.breakdown.nsp * inv_b;
        log.total += l.breakdown.total * inv_b;
      }
      if (log.positives > 0) log.kl /= log.positives;
      for (const auto& g : grads)
        if (!g.allFinite())
          throw TrainingError("non-finite gradient at step " + std::to_string(step) + "\n" +
                              detail::dump_batch(batch, losses));
      if (cfg.gradient_clip_norm) clip_grad_norm(grads, *cfg.gradient_clip_norm);
      opt.step(params, grads);

      epoch_total += log.total * static_cast<double>(batch.size());
      result.steps.push_back(log);
      if (hooks.on_step) hooks.on_step(log);
      if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && hooks.on_checkpoint) hooks.on_checkpoint(step);
    }
    result.epoch_mean_total.push_back(epoch_total / static_cast<double>(std::max<std::size_t>(1, items.size())));

    if (hooks.validation && !hooks.validation->empty()) {
      const double acc = nsp_accuracy(model, vocab, *hooks.validation, cfg.seed + 1);
      result.validation_nsp_accuracy.push_back(acc);
      if (cfg.select_best_nsp && acc > best_acc) {
        best_acc = acc;
        result.selected_epoch = epoch;
        best_values.clear();
        for (std::size_t i = 0; i < params.size(); ++i) best_values.push_back(params[i].value);
      }
    }
  }
  if (cfg.select_best_nsp && !best_values.empty()) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i].value = best_values[i];
  } else {
    result.selected_epoch = cfg.epochs - 1;
  }
  return result;
}

}  // namespace cmn
