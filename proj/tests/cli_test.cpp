#include "cmn/cli.hpp"
#include "cmn/synthetic.hpp"

#include <gtest/gtest.h>

#include <chrono>
#include <cstdlib>
#include <sys/wait.h>

using namespace cmn;
using namespace cmn::cli;

namespace {

class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = fs::temp_directory_path() / ("cmn_cli_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  fs::path operator/(const std::string& name) const { return path_ / name; }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

void write(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct RunResult {
  int exit_code;
  std::string output;
};

RunResult run_cli(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + " " + CMN_BIN + " " + args + " 2>&1";
  FILE* pipe = ::popen(cmd.c_str(), "r");
  std::string out;
  char buf[4096];
  while (std::size_t n = std::fread(buf, 1, sizeof(buf), pipe)) out.append(buf, n);
  const int status = ::pclose(pipe);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

// Small corpus and config that train in a couple of seconds.
struct TinyRun {
  TempDir dir;
  RunConfig cfg;

  TinyRun() {
    ToyCorpusOptions opt;
    opt.conversations = 4;
    opt.turns_per_conversation = 6;
    const auto corpus = make_toy_corpus(opt);
    save_dialogues((dir / "train.jsonl").string(), corpus.pairs);
    std::vector<DialoguePair> cands;
    for (const auto& c : make_toy_candidates(corpus, corpus.pairs, 3)) cands.push_back(c.pair);
    save_dialogues((dir / "cands.jsonl").string(), cands);
    write(dir / "run.toml",
          "seed = 5\n[model]\nhidden_dim = 8\nlatent_dim = 4\nnum_heads = 2\nencoder_layers = 1\n"
          "max_sequence_length = 16\n[train]\nepochs = 2\nbatch_size = 8\n[eval]\nn_negatives = 4\nmc_samples = 2\n"
          "[paths]\ncorpus = \"train.jsonl\"\npairs = \"cands.jsonl\"\noutput_dir = \"out\"\n");
    cfg = load_run_config((dir / "run.toml").string());
  }
};

}  // namespace

TEST(RunConfigParsing, TomlAndJsonAgree) {
  TempDir d;
  write(d / "a.toml", "seed = 3\n[model]\nhidden_dim = 16\n[train]\nlearning_rate = 0.002\ngradient_clip_norm = 1.0\n");
  write(d / "a.json", R"({"seed": 3, "model": {"hidden_dim": 16}, "train": {"learning_rate": 0.002, "gradient_clip_norm": 1.0}})");
  const auto t = load_run_config((d / "a.toml").string());
  const auto j = load_run_config((d / "a.json").string());
  EXPECT_EQ(t.model.hidden_dim, 16);
  EXPECT_EQ(t.train.learning_rate, 0.002);
  EXPECT_EQ(*t.train.gradient_clip_norm, 1.0);
  EXPECT_EQ(t.train.seed, 3u);
  EXPECT_EQ(t.eval.seed, 3u);
  EXPECT_EQ(config_hash(t), config_hash(j));
  RunConfig other = t;
  other.train.epochs += 1;
  EXPECT_NE(config_hash(t), config_hash(other));
  other = t;
  other.eval.workers = 7;
  other.paths.output_dir = "elsewhere";
  EXPECT_EQ(config_hash(t), config_hash(other));
}

TEST(RunConfigParsing, FieldLevelErrors) {
  TempDir d;
  auto message = [&](const std::string& toml) {
    write(d / "c.toml", toml);
    try {
      load_run_config((d / "c.toml").string());
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  EXPECT_EQ(message("[model]\nhidden_dimm = 3\n"), "model.hidden_dimm: unknown field");
  EXPECT_EQ(message("[train]\nepochs = \"ten\"\n"), "train.epochs: expected integer, got string");
  EXPECT_EQ(message("[train]\nepochs = 1.5\n"), "train.epochs: expected integer, got number");
  EXPECT_EQ(message("[train]\nepochs = 0\n"), "train.epochs: must be >= 1");
  EXPECT_EQ(message("[eval]\nn_negatives = 1\n"), "eval.n_negatives: must be >= 2");
  EXPECT_EQ(message("[model]\nhidden_dim = 6\nnum_heads = 4\n"), "model.num_heads: must divide hidden_dim");
  EXPECT_EQ(message("[eval_set]\ndiverse_threshold = 0.0\n"), "eval_set.diverse_threshold: must lie in (0, 1]");
  EXPECT_EQ(message("[train]\nkl_schedule = \"cosine\"\n"), "train.kl_schedule: unknown schedule 'cosine'");
  EXPECT_EQ(message("[eval_set]\nseed = -1\n"), "eval_set.seed: expected non-negative integer, got integer");
  EXPECT_EQ(message("extra = 1\n"), "extra: unknown field");
  EXPECT_NE(message("[model\n").find("c.toml:1"), std::string::npos);
}

TEST(RunConfigParsing, SeedPrecedenceAndPaths) {
  TempDir d;
  write(d / "s.toml", "seed = 3\n[paths]\ncorpus = \"data/x.jsonl\"\ncheckpoint = \"/abs/model.ckpt\"\n");
  const std::string path = (d / "s.toml").string();
  EXPECT_EQ(load_run_config(path).train.seed, 3u);
  Overrides env;
  env.env_seed = "9";
  EXPECT_EQ(load_run_config(path, env).train.seed, 9u);
  EXPECT_EQ(load_run_config("", env).model.seed, 9u);
  Overrides flag = env;
  flag.seed = 11;
  const auto c = load_run_config(path, flag);
  EXPECT_EQ(c.model.seed, 11u);
  EXPECT_EQ(c.eval_set.seed, 11u);
  EXPECT_EQ(c.paths.corpus, (d / "data/x.jsonl").string());
  EXPECT_EQ(c.paths.checkpoint, "/abs/model.ckpt");
  env.env_seed = "abc";
  EXPECT_THROW(load_run_config(path, env), ConfigError);
}

TEST(CmdTrain, WritesArtifactsAndIsDeterministic) {
  TinyRun a, b;
  std::ostringstream log;
  const auto ra = cmd_train(a.cfg, log);
  const auto rb = cmd_train(b.cfg, log);
  ASSERT_EQ(ra.result.steps.size(), rb.result.steps.size());
  EXPECT_NEAR(ra.result.steps.back().total, rb.result.steps.back().total, 1e-6);
  EXPECT_NEAR(ra.result.epoch_mean_total.back(), rb.result.epoch_mean_total.back(), 1e-6);

  const fs::path out = a.dir / "out";
  ASSERT_TRUE(fs::exists(out / "model.ckpt"));
  const auto frozen = nlohmann::json::parse(slurp(out / "effective_config.json"));
  EXPECT_EQ(frozen["config_hash"], config_hash(a.cfg));
  EXPECT_EQ(frozen["train"]["seed"], 5);

  std::ifstream logf(out / "train_log.jsonl");
  std::string line;
  std::getline(logf, line);
  const auto header = nlohmann::json::parse(line)["header"];
  EXPECT_EQ(header["config_hash"], config_hash(a.cfg));
  EXPECT_EQ(header["seeds"]["train"], 5);
  std::size_t steps = 0;
  while (std::getline(logf, line)) {
    const auto j = nlohmann::json::parse(line);
    for (const char* key : {"step", "regime_counts", "reconstruction", "kl", "nsp", "total", "lr"})
      EXPECT_TRUE(j.contains(key)) << key;
    ++steps;
  }
  EXPECT_EQ(steps, ra.result.steps.size());
  EXPECT_EQ(load_checkpoint((out / "model.ckpt").string()).metadata["config_hash"], config_hash(a.cfg));
}

TEST(CmdTrain, MissingCorpusNamesTheField) {
  RunConfig c;
  c.paths.corpus = "/nonexistent/train.jsonl";
  std::ostringstream log;
  try {
    cmd_train(c, log);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(std::string(e.what()), "paths.corpus: file not found: /nonexistent/train.jsonl");
  }
  c.paths.corpus.clear();
  EXPECT_THROW(cmd_train(c, log), ConfigError);
}

TEST(CmdScore, ModesRowsAndReproducibility) {
  TinyRun run;
  std::ostringstream log;
  run.cfg.paths.checkpoint = cmd_train(run.cfg, log).checkpoint.string();
  const auto pairs = load_dialogues(run.cfg.paths.pairs);

  run.cfg.paths.output_dir = (run.dir / "s1").string();
  const auto full = cmd_score(run.cfg, ScoreMode::full, log);
  EXPECT_EQ(full.records.size(), pairs.size());

  RunConfig again = run.cfg;
  again.paths.output_dir = (run.dir / "s2").string();
  again.eval.workers = 3;
  const auto wo_mi = cmd_score(again, ScoreMode::wo_mi, log);
  for (std::size_t i = 0; i < full.records.size(); ++i) {
    EXPECT_NEAR(full.records[i].score, wo_mi.records[i].score, 1e-9);
    EXPECT_NEAR(full.records[i].mi_reference, wo_mi.records[i].mi_reference, 1e-9);
  }

  std::ifstream csv(wo_mi.csv);
  std::string line;
  std::getline(csv, line);
  const auto header = nlohmann::json::parse(line.substr(2));
  EXPECT_EQ(header["mode"], "score_wo_mi");
  EXPECT_EQ(header["n_negatives"], 4);
  EXPECT_EQ(header["mc_samples"], 2);
  EXPECT_EQ(header["seed"], 5);
  EXPECT_EQ(header["config_hash"], config_hash(again));
  std::getline(csv, line);
  EXPECT_EQ(line, "pair_id,headline,g,mi_context,mi_reference,score,score_wo_nsp,score_wo_mi");
  std::size_t rows = 0;
  while (std::getline(csv, line)) {
    const auto cells = cmn::detail::split_csv_line(line);
    EXPECT_EQ(std::stod(cells[1]), std::stod(cells[2]));  // headline == g
    ++rows;
  }
  EXPECT_EQ(rows, pairs.size());

  const auto report = read_score_report(full.jsonl.string());
  EXPECT_EQ(report.header["checkpoint"], run.cfg.paths.checkpoint);
  ASSERT_EQ(report.records.size(), pairs.size());
  EXPECT_EQ(report.records[0].score, full.records[0].score);
}

TEST(CmdScore, CheckpointConfigMismatch) {
  TinyRun run;
  std::ostringstream log;
  run.cfg.paths.checkpoint = cmd_train(run.cfg, log).checkpoint.string();
  RunConfig bad = run.cfg;
  bad.model.latent_dim = 8;
  EXPECT_THROW(cmd_score(bad, ScoreMode::full, log), ConfigError);
  bad = run.cfg;
  bad.model.vocab_size = 999;
  EXPECT_THROW(cmd_score(bad, ScoreMode::full, log), ConfigError);
}

TEST(CmdBuildEvalSet, DefaultsCustomAndInsufficient) {
  TempDir d;
  std::vector<DialoguePair> pairs;
  for (int i = 0; i < 900; ++i) {
    DialoguePair p;
    p.pair_id = "p" + std::to_string(i);
    p.conversation_id = "c" + std::to_string(i % 30);
    p.context = {"hi"};
    p.reference = {"a", "b", "c", "d", "e"};
    p.candidate = i % 3 == 0 ? Tokens{"a", "b", "c", "x", "y"} : Tokens{"q", "r", "s", "t", "u"};
    pairs.push_back(p);
  }
  save_dialogues((d / "pairs.jsonl").string(), pairs);
  RunConfig c;
  c.paths.pairs = (d / "pairs.jsonl").string();
  c.paths.output_dir = (d / "out").string();
  std::ostringstream log;
  const auto split = cmd_build_eval_set(c, log);
  EXPECT_EQ(split.standard.size(), 200u);
  EXPECT_EQ(split.diverse.size(), 600u);
  auto j = nlohmann::json::parse(slurp(d / "out" / "eval_split.json"));
  EXPECT_EQ(j["k_standard"], 200);
  EXPECT_EQ(j["k_diverse"], 600);
  EXPECT_EQ(j["threshold"], 0.2);
  EXPECT_EQ(load_split((d / "out" / "eval_split.json").string()).standard, split.standard);

  c.eval_set.k_standard = 50;
  c.eval_set.k_diverse = 10;
  c.eval_set.diverse_threshold = 0.5;
  cmd_build_eval_set(c, log);
  j = nlohmann::json::parse(slurp(d / "out" / "eval_split.json"));
  EXPECT_EQ(j["standard"].size(), 50u);
  EXPECT_EQ(j["diverse"].size(), 10u);
  EXPECT_EQ(j["threshold"], 0.5);
  EXPECT_EQ(j["k_standard"], 50);

  c.eval_set.k_standard = 1000;
  EXPECT_THROW(cmd_build_eval_set(c, log), Error);
}

TEST(CmdCorrelate, ScoresEqualToHumanScoresGiveAllOnes) {
  TempDir d;
  std::ostringstream ann;
  ann << "pair_id,annotator_id,appropriateness,coherence\n";
  std::vector<ScoreRecord> recs;
  EvalSetSplit split;
  for (int i = 0; i < 30; ++i) {
    const std::string id = "p" + std::to_string(i);
    const int a = 1 + i % 5, b = 1 + (i / 5) % 5;
    ann << id << ",r1," << a << ',' << b << '\n';
    ScoreRecord r;
    r.pair_id = id;
    r.score = r.score_wo_nsp = r.score_wo_mi = (a + b) / 2.0;
    recs.push_back(r);
    (i % 2 ? split.diverse : split.standard).push_back(id);
  }
  write(d / "ann.csv", ann.str());
  write_score_report((d / "scores.jsonl").string(), {{"config_hash", "feed"}}, recs);
  write(d / "split.json", nlohmann::json(split).dump());
  RunConfig c;
  c.paths.annotations = (d / "ann.csv").string();
  c.paths.scores = (d / "scores.jsonl").string();
  c.paths.split = (d / "split.json").string();
  c.paths.output_dir = (d / "out").string();
  std::ostringstream log;
  const auto rows = cmd_correlate(c, log);
  ASSERT_EQ(rows.size(), 6u);
  for (const auto& r : rows) {
    EXPECT_NEAR(r.pearson.coefficient, 1.0, 1e-12);
    EXPECT_NEAR(r.spearman.coefficient, 1.0, 1e-12);
  }
  const std::string csv = slurp(d / "out" / "correlation.csv");
  EXPECT_NE(csv.find("\"score_config_hash\":\"feed\""), std::string::npos);
  EXPECT_NE(csv.find("split,metric_variant,pearson,pearson_p,spearman,spearman_p,n"), std::string::npos);
}

TEST(CmdKappa, ThreeAnnotatorsSymmetricTable) {
  TempDir d;
  std::ostringstream ann;
  ann << "pair_id,annotator_id,appropriateness,coherence\n";
  for (int i = 0; i < 20; ++i)
    for (int a = 0; a < 3; ++a) ann << "p" << i << ",r" << a << ',' << 1 + (i + (a == 2 && i % 4 == 0)) % 5 << ',' << 1 + i % 3 << '\n';
  write(d / "ann.csv", ann.str());
  RunConfig c;
  c.paths.annotations = (d / "ann.csv").string();
  c.paths.output_dir = (d / "out").string();
  std::ostringstream log;
  const auto t = cmd_kappa(c, log);
  ASSERT_EQ(t.annotators.size(), 3u);
  EXPECT_DOUBLE_EQ(t.kappa[0][1], 1.0);
  EXPECT_LT(t.kappa[0][2], 1.0);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(t.kappa[i][j], t.kappa[j][i]);
  const std::string csv = slurp(d / "out" / "kappa.csv");
  EXPECT_NE(csv.find("annotator,r0,r1,r2\n"), std::string::npos);
}

TEST(CmdProject, OneRowPerPairAndKind) {
  TinyRun run;
  std::ostringstream log;
  run.cfg.paths.checkpoint = cmd_train(run.cfg, log).checkpoint.string();
  run.cfg.paths.output_dir = (run.dir / "proj").string();
  const auto pts = cmd_project(run.cfg, ProjectionMethod::pca, log);
  const auto pairs = load_dialogues(run.cfg.paths.pairs);
  EXPECT_EQ(pts.size(), 2 * pairs.size());
  std::istringstream csv(slurp(run.dir / "proj" / "projection.csv"));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line.substr(0, 2), "# ");
  std::getline(csv, line);
  EXPECT_EQ(line, "pair_id,kind,x,y");
  std::set<std::pair<std::string, std::string>> keys;
  while (std::getline(csv, line)) {
    const auto cells = cmn::detail::split_csv_line(line);
    keys.insert({cells[0], cells[1]});
  }
  EXPECT_EQ(keys.size(), pts.size());
}

TEST(Binary, ExitCodesAndMessages) {
  EXPECT_EQ(run_cli("--help").exit_code, 0);
  EXPECT_NE(run_cli("").exit_code, 0);
  const auto missing = run_cli("train --corpus /nonexistent/corpus.jsonl --output-dir /tmp/cmn_unused");
  EXPECT_NE(missing.exit_code, 0);
  EXPECT_NE(missing.output.find("paths.corpus"), std::string::npos) << missing.output;

  TempDir d;
  write(d / "bad.toml", "[train]\nepochs = -3\n");
  const auto bad = run_cli("train --config " + (d / "bad.toml").string());
  EXPECT_NE(bad.exit_code, 0);
  EXPECT_NE(bad.output.find("train.epochs"), std::string::npos) << bad.output;

  const std::string pairs = std::string(CMN_SOURCE_DIR) + "/data/toy/candidates.jsonl";
  const auto short_pool = run_cli("build-eval-set --pairs " + pairs + " --k-standard 100000 --output-dir " + (d / "o").string());
  EXPECT_NE(short_pool.exit_code, 0);
  EXPECT_NE(short_pool.output.find("standard set needs"), std::string::npos) << short_pool.output;

  const auto mode = run_cli("score --mode best");
  EXPECT_NE(mode.exit_code, 0);
}

TEST(Binary, ShippedToyConfigRunsEndToEnd) {
  TempDir d;
  const std::string cfg = std::string(CMN_SOURCE_DIR) + "/configs/toy.toml";
  const std::string out = (d / "run").string();
  const auto t0 = std::chrono::steady_clock::now();
  const auto train = run_cli("train --config " + cfg + " --output-dir " + out);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  ASSERT_EQ(train.exit_code, 0) << train.output;
  EXPECT_LE(seconds, 300.0);
  EXPECT_NE(train.output.find("final validation nsp accuracy"), std::string::npos);

  const std::string ckpt = out + "/model.ckpt";
  auto step = [&](const std::string& args) {
    const auto r = run_cli(args + " --config " + cfg);
    EXPECT_EQ(r.exit_code, 0) << args << "\n" << r.output;
    return r;
  };
  step("score --checkpoint " + ckpt + " --output-dir " + out + "/score");
  step("build-eval-set --output-dir " + out + "/split");
  step("correlate --scores " + out + "/score/scores.jsonl --split " + out + "/split/eval_split.json --output-dir " + out +
       "/corr");
  step("kappa --output-dir " + out + "/kappa");
  step("project --method pca --checkpoint " + ckpt + " --output-dir " + out + "/proj");
  for (const char* f : {"/score/scores.csv", "/split/eval_split.json", "/corr/correlation.csv", "/kappa/kappa.csv",
                        "/proj/projection.csv"})
    EXPECT_TRUE(fs::exists(out + f)) << f;

  // Same config and seed: the final logged step agrees.
  const auto rerun = run_cli("train --config " + cfg + " --output-dir " + out + "2");
  ASSERT_EQ(rerun.exit_code, 0);
  auto last_total = [](const std::string& log) {
    std::ifstream in(log);
    std::string line, last;
    while (std::getline(in, line)) last = line;
    return nlohmann::json::parse(last)["total"].get<double>();
  };
  EXPECT_NEAR(last_total(out + "/train_log.jsonl"), last_total(out + "2/train_log.jsonl"), 1e-6);
}
