// cmn: train, score, build-eval-set, correlate, kappa, project.

#include "cmn/cli.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>

namespace {

using namespace cmn;
using namespace cmn::cli;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  std::optional<std::string> output_dir;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "TOML or JSON run config")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "seed for every component (overrides config and CMN_SEED)");
  cmd->add_option("--workers", c.workers, "scoring threads; results do not depend on it")->check(CLI::PositiveNumber);
  cmd->add_option("--output-dir", c.output_dir, "directory for outputs");
}

RunConfig resolve(const Common& c) {
  Overrides o;
  o.seed = c.seed;
  o.workers = c.workers;
  o.output_dir = c.output_dir;
  if (const char* env = std::getenv("CMN_SEED"); env && *env) o.env_seed = env;
  return load_run_config(c.config, o);
}

void set_if(std::string& dst, const std::string& flag_value) {
  if (!flag_value.empty()) dst = flag_value;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CMN dialogue evaluation: CVAE training, MI + NSP scoring, and correlation analysis"};
  app.require_subcommand(1);

  Common common;
  std::string corpus, validation, pairs, annotations, scores, split, checkpoint;
  std::string mode = "full", method = "pca";
  std::optional<std::size_t> k_standard, k_diverse;
  std::optional<double> threshold;

  auto* train = app.add_subcommand("train", "train a model; writes model.ckpt, train_log.jsonl, effective_config.json");
  add_common(train, common);
  train->add_option("--corpus", corpus, "training dialogues (JSONL)");
  train->add_option("--validation", validation, "held-out dialogues (JSONL)");

  auto* score = app.add_subcommand("score", "score candidate pairs; writes scores.jsonl and scores.csv");
  add_common(score, common);
  score->add_option("--checkpoint", checkpoint, "trained checkpoint");
  score->add_option("--pairs", pairs, "pairs with candidates (JSONL)");
  score->add_option("--pool", corpus, "negative pool (JSONL); defaults to the pairs file");
  score->add_option("--mode", mode, "headline column")->check(CLI::IsMember({"full", "wo_nsp", "wo_mi"}));

  auto* build = app.add_subcommand("build-eval-set", "split candidate pairs into standard and diverse sets");
  add_common(build, common);
  build->add_option("--pairs", pairs, "pairs with candidates (JSONL)");
  build->add_option("--k-standard", k_standard, "standard set size");
  build->add_option("--threshold", threshold, "diverse-set BLEU-1 threshold");
  build->add_option("--k-diverse", k_diverse, "diverse set size");

  auto* correlate = app.add_subcommand("correlate", "correlate score columns with human judgments");
  add_common(correlate, common);
  correlate->add_option("--scores", scores, "score report (JSONL)");
  correlate->add_option("--annotations", annotations, "annotation CSV");
  correlate->add_option("--split", split, "eval-set split (JSON)");

  auto* kappa = app.add_subcommand("kappa", "pairwise Cohen's kappa between annotators");
  add_common(kappa, common);
  kappa->add_option("--annotations", annotations, "annotation CSV");

  auto* project = app.add_subcommand("project", "2-D projection of reference and response representations");
  add_common(project, common);
  project->add_option("--checkpoint", checkpoint, "trained checkpoint");
  project->add_option("--pairs", pairs, "pairs (JSONL)");
  project->add_option("--method", method, "projection method")->check(CLI::IsMember({"pca", "tsne"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    RunConfig cfg = resolve(common);
    set_if(cfg.paths.corpus, corpus);
    set_if(cfg.paths.validation, validation);
    set_if(cfg.paths.pairs, pairs);
    set_if(cfg.paths.annotations, annotations);
    set_if(cfg.paths.scores, scores);
    set_if(cfg.paths.split, split);
    set_if(cfg.paths.checkpoint, checkpoint);
    if (k_standard) cfg.eval_set.k_standard = *k_standard;
    if (k_diverse) cfg.eval_set.k_diverse = *k_diverse;
    if (threshold) cfg.eval_set.diverse_threshold = *threshold;
    validate(cfg);

    if (train->parsed())
      cmd_train(cfg, std::cout);
    else if (score->parsed())
      cmd_score(cfg, parse_score_mode(mode), std::cout);
    else if (build->parsed())
      cmd_build_eval_set(cfg, std::cout);
    else if (correlate->parsed())
      cmd_correlate(cfg, std::cout);
    else if (kappa->parsed())
      cmd_kappa(cfg, std::cout);
    else if (project->parsed())
      cmd_project(cfg, method == "pca" ? ProjectionMethod::pca : ProjectionMethod::tsne, std::cout);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
