#include "cmn/checkpoint.hpp"
#include "cmn/model.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace cmn;

namespace {

ModelConfig tiny_config(int vocab = 20) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.hidden_dim = 8;
  c.latent_dim = 4;
  c.num_heads = 2;
  c.max_sequence_length = 12;
  c.seed = 3;
  return c;
}

void randomize(ad::Parameter& p, std::uint64_t seed, double sd = 0.5) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, sd);
  for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = n(rng);
}

ad::Parameter& param(Model& m, const std::string& name) {
  auto* p = m.parameters().find(name);
  if (!p) throw Error("no parameter " + name);
  return *p;
}

const TokenIds kContext{4, 5, 6, 7};
const TokenIds kResponse{8, 9, 10};

}  // namespace

TEST(Vocabulary, BuildEncodeAndSpecials) {
  std::vector<DialoguePair> pairs{{"a", "a", 0, {"b", "a"}, {"c"}, {}}};
  auto v = Vocabulary::build(pairs);
  EXPECT_EQ(v.tokens(), (std::vector<std::string>{"[UNK]", "[CLS]", "[SEP]", "a", "b", "c"}));
  EXPECT_EQ(v.encode({"c", "zzz"}), (TokenIds{5, Vocabulary::kUnk}));
  EXPECT_THROW(Vocabulary(std::vector<std::string>{"x"}), Error);
}

TEST(ModelConfig, ValidationNamesField) {
  auto c = tiny_config();
  c.num_heads = 3;
  try {
    Model m(c);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("num_heads"), std::string::npos);
  }
  c = tiny_config();
  c.latent_dim = 0;
  EXPECT_THROW(Model{c}, Error);
  EXPECT_EQ(ModelConfig{}.latent_dim, 32);
  EXPECT_FALSE(ModelConfig{}.share_encoders);
}

TEST(EncodePair, DeterministicForFixedWeights) {
  Model m(tiny_config());
  const auto a = m.encode_pair(kContext, kResponse);
  const auto b = m.encode_pair(kContext, kResponse);
  EXPECT_EQ(a.h_q, b.h_q);
  EXPECT_EQ(a.nsp_logit, b.nsp_logit);
  EXPECT_EQ(a.h_q.size(), 8);
}

TEST(EncodePair, SegmentsBreakSymmetry) {
  Model m(tiny_config());
  const TokenIds c{4, 5}, r{6, 7};
  EXPECT_GT((m.encode_pair(c, r).h_q - m.encode_pair(r, c).h_q).norm(), 1e-6);
  // Same token sequence [c; r] split at a different point: only segment ids differ.
  EXPECT_GT((m.encode_pair(TokenIds{4}, TokenIds{5, 6, 7}).h_q - m.encode_pair(TokenIds{4, 5, 6}, TokenIds{7}).h_q).norm(),
            1e-6);
}

TEST(EncodePair, OverLengthMatchesPreTruncated) {
  Model m(tiny_config());  // budget 10
  TokenIds long_ctx;
  for (int i = 0; i < 15; ++i) long_ctx.push_back(3 + i % 15);
  const TokenIds resp{8, 9, 10};
  const TokenIds tail(long_ctx.end() - 7, long_ctx.end());
  EXPECT_EQ(m.encode_pair(long_ctx, resp).h_q, m.encode_pair(tail, resp).h_q);

  const TokenIds long_resp{4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15};
  EXPECT_EQ(m.encode_pair(kContext, long_resp).h_q,
            m.encode_pair(TokenIds{7}, TokenIds(long_resp.begin(), long_resp.begin() + 9)).h_q);
}

TEST(EncodePair, ErrorsOnEmptyOrUnknownIds) {
  Model m(tiny_config());
  EXPECT_THROW(m.encode_pair(TokenIds{}, kResponse), Error);
  EXPECT_THROW(m.encode_pair(kContext, TokenIds{}), Error);
  EXPECT_THROW(m.encode_pair(kContext, TokenIds{99}), Error);
}

TEST(Truncation, ContextFirstThenResponse) {
  const TokenIds c{1, 2, 3, 4}, r{5, 6, 7};
  auto [c1, r1] = truncate_pair(c, r, 5);
  EXPECT_EQ(c1, (TokenIds{3, 4}));
  EXPECT_EQ(r1, r);
  auto [c2, r2] = truncate_pair(c, r, 3);
  EXPECT_EQ(c2, (TokenIds{4}));
  EXPECT_EQ(r2, (TokenIds{5, 6}));
  auto [c3, r3] = truncate_pair(c, r, 10);
  EXPECT_EQ(c3, c);
  EXPECT_EQ(r3, r);
}

TEST(EncodeContext, IsolatedFromPairEncoder) {
  Model m(tiny_config());
  const auto before = m.encode_context(kContext).h_p;
  randomize(param(m, "pair_encoder.token_embedding"), 1);
  randomize(param(m, "pair_encoder.layer0.attn.q.w"), 2);
  EXPECT_EQ(m.encode_context(kContext).h_p, before);
  EXPECT_EQ(m.encode_context(TokenIds{4}).h_p.size(), 8);
  EXPECT_THROW(m.encode_context(TokenIds{}), Error);
}

TEST(EncodeContext, SharedEncoderFollowsPairWeights) {
  auto cfg = tiny_config();
  cfg.share_encoders = true;
  Model m(cfg);
  EXPECT_EQ(m.parameters().find("context_encoder.token_embedding"), nullptr);
  const auto before = m.encode_context(kContext).h_p;
  randomize(param(m, "pair_encoder.token_embedding"), 1);
  EXPECT_GT((m.encode_context(kContext).h_p - before).norm(), 1e-6);
}

TEST(LatentHeads, ZeroHiddenGivesUnitGaussian) {
  Model m(tiny_config());
  for (const char* n : {"posterior.mean.w", "posterior.log_variance.w", "prior.mean.w", "prior.log_variance.w"})
    randomize(param(m, n), 4);
  EncodedPair h{Eigen::VectorXd::Zero(8), 0.0};
  const auto q = m.posterior_params(h);
  EXPECT_EQ(q.mean, Eigen::VectorXd::Zero(4));
  EXPECT_EQ(q.log_variance, Eigen::VectorXd::Zero(4));
  const auto p = m.prior_params(EncodedContext{Eigen::VectorXd::Zero(8)});
  EXPECT_EQ(p.mean, Eigen::VectorXd::Zero(4));
  EXPECT_EQ(p.log_variance, Eigen::VectorXd::Zero(4));
}

TEST(LatentHeads, LogVarianceClamped) {
  Model m(tiny_config());
  param(m, "posterior.log_variance.b").value.setConstant(20.0);
  param(m, "prior.log_variance.b").value.setConstant(-20.0);
  const auto q = m.posterior_params(m.encode_pair(kContext, kResponse));
  const auto p = m.prior_params(m.encode_context(kContext));
  for (Eigen::Index i = 0; i < 4; ++i) {
    EXPECT_DOUBLE_EQ(q.log_variance(i), 8.0);
    EXPECT_DOUBLE_EQ(p.log_variance(i), -8.0);
  }
}

TEST(LatentHeads, FiniteDifferenceJacobian) {
  Model m(tiny_config());
  for (const char* n : {"posterior.mean.w", "posterior.log_variance.w", "posterior.mean.b"}) randomize(param(m, n), 5, 0.3);
  EncodedPair h = m.encode_pair(kContext, kResponse);
  const double step = 1e-4;
  // Analytic Jacobian of an affine head is its weight matrix.
  const auto& wm = param(m, "posterior.mean.w").value;
  const auto& wl = param(m, "posterior.log_variance.w").value;
  double worst = 0.0;
  for (Eigen::Index i = 0; i < h.h_q.size(); ++i) {
    EncodedPair up = h, down = h;
    up.h_q(i) += step;
    down.h_q(i) -= step;
    const auto qu = m.posterior_params(up), qd = m.posterior_params(down);
    for (Eigen::Index j = 0; j < 4; ++j) {
      const double nm = (qu.mean(j) - qd.mean(j)) / (2 * step);
      const double nl = (qu.log_variance(j) - qd.log_variance(j)) / (2 * step);
      worst = std::max(worst, std::abs(nm - wm(i, j)) / std::max({std::abs(wm(i, j)), std::abs(nm), 1e-4}));
      worst = std::max(worst, std::abs(nl - wl(i, j)) / std::max({std::abs(wl(i, j)), std::abs(nl), 1e-4}));
    }
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(SampleLatent, DegenerateVarianceReturnsMean) {
  LatentGaussian g{Eigen::VectorXd::LinSpaced(4, -1, 1), Eigen::VectorXd::Constant(4, -40.0)};
  Rng rng(1);
  for (const auto& s : sample_latent(g, rng, 20)) EXPECT_LT((s.z - g.mean).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(SampleLatent, StandardNormalConcentration) {
  LatentGaussian g{Eigen::VectorXd::Zero(3), Eigen::VectorXd::Zero(3)};
  Rng rng(42);
  const auto draws = sample_latent(g, rng, 10000, LatentSource::posterior_pair);
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(3), sq = Eigen::VectorXd::Zero(3);
  for (const auto& d : draws) {
    EXPECT_EQ(d.source, LatentSource::posterior_pair);
    mean += d.z;
    sq += d.z.cwiseProduct(d.z);
  }
  mean /= 10000.0;
  const Eigen::VectorXd var = sq / 10000.0 - mean.cwiseProduct(mean);
  for (int i = 0; i < 3; ++i) {
    EXPECT_LT(std::abs(mean(i)), 0.05);
    EXPECT_LT(std::abs(var(i) - 1.0), 0.1);
  }
}

TEST(SampleLatent, SameSeedSameSamples) {
  LatentGaussian g{Eigen::VectorXd::Ones(4), Eigen::VectorXd::Zero(4)};
  Rng a(7), b(7);
  const auto x = sample_latent(g, a, 5), y = sample_latent(g, b, 5);
  for (int i = 0; i < 5; ++i) EXPECT_EQ(x[i].z, y[i].z);
  EXPECT_THROW(sample_latent(g, a, 0), Error);
}

TEST(SampleLatent, ReparameterizedGradientReachesParameters) {
  ad::Tape t;
  Matrix mu(1, 2), lv(1, 2);
  mu << 0.5, -0.5;
  lv << 0.2, -0.4;
  GaussianGraph g{t.constant(mu), t.constant(lv)};
  Rng rng(3);
  ad::Var z = reparameterize(t, g, rng);
  t.backward(ad::sum(z));
  EXPECT_DOUBLE_EQ(t.grad(g.mean.id)(0, 0), 1.0);
  const double eps0 = (z.value()(0, 0) - mu(0, 0)) / std::exp(0.5 * lv(0, 0));
  EXPECT_NEAR(t.grad(g.log_variance.id)(0, 0), 0.5 * std::exp(0.5 * lv(0, 0)) * eps0, 1e-12);
}

TEST(DecodeLogprob, UniformDecoderGivesLLogOneOverV) {
  Model m(tiny_config());
  param(m, "decoder.out.w").value.setZero();
  param(m, "decoder.out.b").value.setZero();
  LatentSample z{Eigen::VectorXd::Ones(4), LatentSource::prior};
  const TokenIds target{5, 9, 3, 3};
  EXPECT_NEAR(m.decode_logprob(kContext, z, target), 4.0 * std::log(1.0 / 20.0), 1e-12);
}

TEST(DecodeLogprob, CertainDecoderGivesZero) {
  Model m(tiny_config());
  param(m, "decoder.out.w").value.setZero();
  param(m, "decoder.out.b").value.setZero();
  param(m, "decoder.out.b").value(0, 7) = 1000.0;
  LatentSample z{Eigen::VectorXd::Zero(4), LatentSource::prior};
  EXPECT_EQ(m.decode_logprob(kContext, z, TokenIds{7, 7, 7}), 0.0);
}

TEST(DecodeLogprob, MatchesStepByStepSoftmaxAccumulation) {
  Model m(tiny_config());
  randomize(param(m, "decoder.out.w"), 9, 1.0);
  LatentSample z{Eigen::VectorXd::LinSpaced(4, -0.5, 0.8), LatentSource::prior};
  const TokenIds target{11, 4, 17, 6};
  const double total = m.decode_logprob(kContext, z, target);
  // Each step's distribution is read through prefix queries: the probability
  // of v after prefix p is exp(lp(p + v) - lp(p)).
  double acc = 0.0;
  TokenIds prefix;
  double prefix_lp = 0.0;
  for (int tok : target) {
    double norm = 0.0;
    for (int v = 0; v < 20; ++v) {
      TokenIds cand = prefix;
      cand.push_back(v);
      norm += std::exp(m.decode_logprob(kContext, z, cand) - prefix_lp);
    }
    EXPECT_NEAR(norm, 1.0, 1e-9);
    prefix.push_back(tok);
    const double lp = m.decode_logprob(kContext, z, prefix);
    acc += lp - prefix_lp;
    prefix_lp = lp;
  }
  EXPECT_NEAR(acc, total, 1e-6);
  EXPECT_LE(total, 0.0);
}

TEST(DecodeLogprob, LatentChangesOutput) {
  Model m(tiny_config());
  LatentSample a{Eigen::VectorXd::Zero(4), LatentSource::prior};
  LatentSample b{Eigen::VectorXd::Constant(4, 2.0), LatentSource::prior};
  EXPECT_NE(m.decode_logprob(kContext, a, kResponse), m.decode_logprob(kContext, b, kResponse));
}

TEST(DecodeLogprob, Errors) {
  Model m(tiny_config());
  LatentSample z{Eigen::VectorXd::Zero(4), LatentSource::prior};
  EXPECT_THROW(m.decode_logprob(kContext, z, TokenIds{}), Error);
  EXPECT_THROW(m.decode_logprob(kContext, z, TokenIds{20}), Error);
  LatentSample bad{Eigen::VectorXd::Zero(3), LatentSource::prior};
  EXPECT_THROW(m.decode_logprob(kContext, bad, kResponse), Error);
}

TEST(KlGaussian, IdentityAndClosedForm) {
  LatentGaussian q{Eigen::VectorXd::LinSpaced(5, -1, 2), Eigen::VectorXd::LinSpaced(5, -0.5, 0.7)};
  EXPECT_NEAR(kl_gaussian(q, q), 0.0, 1e-10);
  LatentGaussian a{Eigen::VectorXd::Ones(1), Eigen::VectorXd::Zero(1)};
  LatentGaussian b{Eigen::VectorXd::Zero(1), Eigen::VectorXd::Zero(1)};
  EXPECT_NEAR(kl_gaussian(a, b), 0.5, 1e-15);
  LatentGaussian c{Eigen::VectorXd::Zero(2), Eigen::VectorXd::Zero(2)};
  EXPECT_THROW(kl_gaussian(a, c), Error);
}

TEST(KlGaussian, NonNegativeOnRandomPairs) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n(0.0, 2.0);
  for (int k = 0; k < 1000; ++k) {
    LatentGaussian q{Eigen::VectorXd(6), Eigen::VectorXd(6)}, p{Eigen::VectorXd(6), Eigen::VectorXd(6)};
    for (int i = 0; i < 6; ++i) {
      q.mean(i) = n(rng);
      p.mean(i) = n(rng);
      q.log_variance(i) = std::clamp(n(rng), -8.0, 8.0);
      p.log_variance(i) = std::clamp(n(rng), -8.0, 8.0);
    }
    EXPECT_GE(kl_gaussian(q, p), -1e-9);
  }
}

TEST(KlGaussian, GraphMatchesValue) {
  LatentGaussian q{Eigen::VectorXd::LinSpaced(3, -1, 2), Eigen::VectorXd::LinSpaced(3, -0.5, 0.7)};
  LatentGaussian p{Eigen::VectorXd::LinSpaced(3, 0.3, -0.2), Eigen::VectorXd::LinSpaced(3, 1.0, -1.0)};
  ad::Tape t;
  auto row = [&](const Eigen::VectorXd& v) { return t.constant(Matrix(v.transpose())); };
  const double g = kl_gaussian(GaussianGraph{row(q.mean), row(q.log_variance)},
                               GaussianGraph{row(p.mean), row(p.log_variance)})
                       .scalar();
  EXPECT_NEAR(g, kl_gaussian(q, p), 1e-12);
}

TEST(Checkpoint, RoundTripPreservesOutputs) {
  Model m(tiny_config());
  randomize(param(m, "posterior.mean.w"), 12);
  std::vector<std::string> toks{"[UNK]", "[CLS]", "[SEP]"};
  for (int i = 3; i < 20; ++i) toks.push_back("w" + std::to_string(i));
  Vocabulary v(toks);
  const std::string path = ::testing::TempDir() + "model.ckpt";
  save_checkpoint(path, m, v, {{"note", "x"}});
  Checkpoint ck = load_checkpoint(path);
  EXPECT_EQ(ck.vocabulary.tokens(), toks);
  EXPECT_EQ(ck.metadata.at("note"), "x");
  EXPECT_EQ(ck.model.encode_pair(kContext, kResponse).h_q, m.encode_pair(kContext, kResponse).h_q);
  const auto a = ck.model.posterior_params(ck.model.encode_pair(kContext, kResponse));
  const auto b = m.posterior_params(m.encode_pair(kContext, kResponse));
  EXPECT_EQ(a.mean, b.mean);
}

TEST(Checkpoint, RejectsForeignFiles) {
  const std::string path = ::testing::TempDir() + "not_a.ckpt";
  {
    std::ofstream out(path);
    out << "hello";
  }
  EXPECT_THROW(load_checkpoint(path), Error);
  EXPECT_THROW(load_checkpoint(path + ".missing"), Error);
}
