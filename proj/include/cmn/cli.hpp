#pragma once

// Run configuration and the six pipeline commands behind tools/cmn.
//
// A config file is TOML (or JSON when the name ends in .json) with the
// sections [model], [train], [eval], [eval_set], [paths] and an optional
// top-level `seed` that fans out to every component seed. Relative paths are
// resolved against the config file's directory.

#include "cmn/analysis.hpp"
#include "cmn/checkpoint.hpp"
#include "cmn/corpus.hpp"
#include "cmn/evaluator.hpp"
#include "cmn/model.hpp"
#include "cmn/training.hpp"

#include <nlohmann/json.hpp>
#include <toml.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace cmn::cli {

namespace fs = std::filesystem;

struct ConfigError : Error {
  using Error::Error;
};

struct Paths {
  std::string corpus;       // training dialogues; also the negative pool when scoring
  std::string validation;   // optional held-out dialogues for NSP accuracy
  std::string pairs;        // candidate pairs to score or project
  std::string annotations;
  std::string scores;       // score report (JSONL)
  std::string split;        // eval-set split (JSON)
  std::string checkpoint;
  std::string output_dir = "cmn_out";
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  EvalConfig eval;
  EvalSetOptions eval_set;
  Paths paths;
  std::optional<std::uint64_t> seed;
  std::string source;  // config file, empty when defaults only
};

// Command-line values that sit above the config file.
struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  std::optional<std::string> output_dir;
  std::optional<std::string> env_seed;  // CMN_SEED as read from the environment
};

// ---------------------------------------------------------------------------
// Parsing

namespace detail {

inline nlohmann::json eval_to_json(const EvalConfig& e) {
  return {{"n_negatives", e.n_negatives}, {"mc_samples", e.mc_samples}, {"seed", e.seed}, {"workers", e.workers}};
}

inline nlohmann::json eval_set_to_json(const EvalSetOptions& e) {
  return {{"k_standard", e.k_standard},
          {"diverse_threshold", e.diverse_threshold},
          {"k_diverse", e.k_diverse},
          {"seed", e.seed}};
}

inline nlohmann::json paths_to_json(const Paths& p) {
  return {{"corpus", p.corpus},   {"validation", p.validation},   {"pairs", p.pairs},
          {"annotations", p.annotations}, {"scores", p.scores}, {"split", p.split},
          {"checkpoint", p.checkpoint},   {"output_dir", p.output_dir}};
}

inline const char* type_name(const nlohmann::json& j) {
  if (j.is_boolean()) return "boolean";
  if (j.is_number_integer()) return "integer";
  if (j.is_number()) return "number";
  if (j.is_string()) return "string";
  if (j.is_null()) return "null";
  return j.type_name();
}

// Rejects unknown keys and values whose type differs from the default's.
inline void check_section(const nlohmann::json& given, const nlohmann::json& defaults, const std::string& section,
                          std::vector<std::string> nullable = {}) {
  if (!given.is_object()) throw ConfigError(section + ": expected a table");
  for (const auto& [key, value] : given.items()) {
    const std::string field = section + "." + key;
    if (!defaults.contains(key)) throw ConfigError(field + ": unknown field");
    const auto& d = defaults[key];
    const bool is_nullable = std::find(nullable.begin(), nullable.end(), key) != nullable.end();
    bool ok;
    if (d.is_boolean())
      ok = value.is_boolean();
    else if (d.is_number_unsigned())
      ok = value.is_number_integer() && (value.is_number_unsigned() || value.get<long long>() >= 0);
    else if (d.is_number_integer())
      ok = value.is_number_integer();
    else if (d.is_number() || (is_nullable && d.is_null()))
      ok = value.is_number() || (is_nullable && value.is_null());
    else if (d.is_string())
      ok = value.is_string();
    else
      ok = false;
    if (!ok) {
      const std::string want = is_nullable && d.is_null() ? "number" : type_name(d);
      throw ConfigError(field + ": expected " + (d.is_number_unsigned() ? "non-negative integer" : want) + ", got " +
                        type_name(value));
    }
  }
}

inline nlohmann::json read_config_document(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  if (fs::path(path).extension() == ".json") {
    try {
      return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config: " + path + ": " + e.what());
    }
  }
  try {
    const toml::table table = toml::parse(in, path);
    std::ostringstream os;
    os << toml::json_formatter(table);
    return nlohmann::json::parse(os.str());
  } catch (const toml::parse_error& e) {
    std::ostringstream os;
    os << "config: " << path << ":" << e.source().begin.line << ": " << e.description();
    throw ConfigError(os.str());
  }
}

inline std::uint64_t parse_seed(const std::string& text, const std::string& what) {
  try {
    std::size_t used = 0;
    if (!text.empty() && text[0] == '-') throw std::invalid_argument("negative");
    const auto v = std::stoull(text, &used);
    if (used != text.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw ConfigError(what + ": expected a non-negative integer, got '" + text + "'");
  }
}

}  // namespace detail

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j;
  j["model"] = c.model;
  j["train"] = c.train;
  j["eval"] = detail::eval_to_json(c.eval);
  j["eval_set"] = detail::eval_set_to_json(c.eval_set);
  j["paths"] = detail::paths_to_json(c.paths);
  if (c.seed) j["seed"] = *c.seed;
  return j;
}

// FNV-1a over the canonical dump, excluding settings that cannot change
// results (worker count, output location).
inline std::string config_hash(const RunConfig& c) {
  nlohmann::json j = to_json(c);
  j["eval"].erase("workers");
  j["paths"].erase("output_dir");
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << fnv1a64(j.dump());
  return os.str();
}

inline void apply_seed(RunConfig& c, std::uint64_t seed) {
  c.seed = seed;
  c.model.seed = seed;
  c.train.seed = seed;
  c.eval.seed = seed;
  c.eval_set.seed = seed;
}

inline RunConfig run_config_from_json(const nlohmann::json& doc, const std::string& base_dir = "") {
  if (!doc.is_object()) throw ConfigError("config: top level must be a table");
  RunConfig c;
  static const std::set<std::string> sections{"model", "train", "eval", "eval_set", "paths", "seed"};
  for (const auto& item : doc.items())
    if (!sections.count(item.key())) throw ConfigError(item.key() + ": unknown field");
  try {
    if (doc.contains("model")) {
      detail::check_section(doc["model"], nlohmann::json(ModelConfig{}), "model");
      c.model = doc["model"].get<ModelConfig>();
    }
    if (doc.contains("train")) {
      detail::check_section(doc["train"], nlohmann::json(TrainConfig{}), "train", {"gradient_clip_norm"});
      c.train = doc["train"].get<TrainConfig>();
    }
    if (doc.contains("eval")) {
      detail::check_section(doc["eval"], detail::eval_to_json(EvalConfig{}), "eval");
      const auto& e = doc["eval"];
      c.eval.n_negatives = e.value("n_negatives", c.eval.n_negatives);
      c.eval.mc_samples = e.value("mc_samples", c.eval.mc_samples);
      c.eval.seed = e.value("seed", c.eval.seed);
      c.eval.workers = e.value("workers", c.eval.workers);
    }
    if (doc.contains("eval_set")) {
      detail::check_section(doc["eval_set"], detail::eval_set_to_json(EvalSetOptions{}), "eval_set");
      const auto& e = doc["eval_set"];
      c.eval_set.k_standard = e.value("k_standard", c.eval_set.k_standard);
      c.eval_set.diverse_threshold = e.value("diverse_threshold", c.eval_set.diverse_threshold);
      c.eval_set.k_diverse = e.value("k_diverse", c.eval_set.k_diverse);
      c.eval_set.seed = e.value("seed", c.eval_set.seed);
    }
    if (doc.contains("paths")) {
      detail::check_section(doc["paths"], detail::paths_to_json(Paths{}), "paths");
      const auto& p = doc["paths"];
      auto path = [&](const char* key, std::string& dst) {
        if (!p.contains(key)) return;
        dst = p[key].get<std::string>();
        if (!dst.empty() && !base_dir.empty() && fs::path(dst).is_relative()) dst = (fs::path(base_dir) / dst).string();
      };
      path("corpus", c.paths.corpus);
      path("validation", c.paths.validation);
      path("pairs", c.paths.pairs);
      path("annotations", c.paths.annotations);
      path("scores", c.paths.scores);
      path("split", c.paths.split);
      path("checkpoint", c.paths.checkpoint);
      path("output_dir", c.paths.output_dir);
    }
    if (doc.contains("seed")) {
      const auto& s = doc["seed"];
      if (!s.is_number_integer() || (!s.is_number_unsigned() && s.get<long long>() < 0))
        throw ConfigError(std::string("seed: expected non-negative integer, got ") + detail::type_name(s));
      apply_seed(c, s.get<std::uint64_t>());
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  return c;
}

inline void validate(const RunConfig& c) {
  c.train.validate();
  c.eval.validate();
  if (!(c.eval_set.diverse_threshold > 0.0 && c.eval_set.diverse_threshold <= 1.0))
    throw ConfigError("eval_set.diverse_threshold: must lie in (0, 1]");
  if (c.paths.output_dir.empty()) throw ConfigError("paths.output_dir: must not be empty");
  ModelConfig probe = c.model;
  if (probe.vocab_size == 0) probe.vocab_size = 4;  // 0 means "size of the corpus vocabulary"
  probe.validate();
}

// Precedence, lowest first: defaults, config file, CMN_SEED, flags.
inline RunConfig load_run_config(const std::string& config_path, const Overrides& o = {}) {
  nlohmann::json doc = nlohmann::json::object();
  std::string base;
  if (!config_path.empty()) {
    doc = detail::read_config_document(config_path);
    base = fs::path(config_path).parent_path().string();
  }
  RunConfig c = run_config_from_json(doc, base);
  c.source = config_path;
  if (o.env_seed) apply_seed(c, detail::parse_seed(*o.env_seed, "CMN_SEED"));
  if (o.seed) apply_seed(c, *o.seed);
  if (o.workers) c.eval.workers = *o.workers;
  if (o.output_dir) c.paths.output_dir = *o.output_dir;
  try {
    validate(c);
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  return c;
}

// ---------------------------------------------------------------------------
// Command plumbing

namespace detail {

inline void require_file(const std::string& value, const std::string& field) {
  if (value.empty()) throw ConfigError(field + ": required but not set");
  if (!fs::is_regular_file(value)) throw ConfigError(field + ": file not found: " + value);
}

inline fs::path prepare_output(const RunConfig& c) {
  fs::path dir(c.paths.output_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw Error("paths.output_dir: cannot create " + dir.string());
  return dir;
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("failed writing " + path.string());
}

// Freezes the effective config next to the command's outputs.
inline void freeze_config(const RunConfig& c, const fs::path& dir) {
  nlohmann::json j = to_json(c);
  j["config_hash"] = config_hash(c);
  write_text(dir / "effective_config.json", j.dump(2) + "\n");
}

inline std::string csv_comment(const nlohmann::json& header) { return "# " + header.dump() + "\n"; }

}  // namespace detail

// Provenance stamped into every artifact.
inline nlohmann::json artifact_header(const RunConfig& c, const std::string& command) {
  return {{"command", command},
          {"config_hash", config_hash(c)},
          {"seeds",
           {{"model", c.model.seed}, {"train", c.train.seed}, {"eval", c.eval.seed}, {"eval_set", c.eval_set.seed}}}};
}

struct TrainOutcome {
  TrainResult result;
  fs::path checkpoint;
  std::optional<double> validation_accuracy;
};

inline TrainOutcome cmd_train(const RunConfig& c, std::ostream& log) {
  detail::require_file(c.paths.corpus, "paths.corpus");
  if (!c.paths.validation.empty()) detail::require_file(c.paths.validation, "paths.validation");
  const auto corpus = load_dialogues(c.paths.corpus);
  std::vector<DialoguePair> validation;
  if (!c.paths.validation.empty()) validation = load_dialogues(c.paths.validation);
  if (c.train.select_best_nsp && validation.empty())
    throw ConfigError("train.select_best_nsp: requires paths.validation");

  const Vocabulary vocab = Vocabulary::build(corpus);
  ModelConfig mc = c.model;
  if (mc.vocab_size != 0 && mc.vocab_size != vocab.size())
    throw ConfigError("model.vocab_size: corpus vocabulary has " + std::to_string(vocab.size()) + " entries, config says " +
                      std::to_string(mc.vocab_size));
  mc.vocab_size = vocab.size();
  Model model(mc);

  const fs::path dir = detail::prepare_output(c);
  detail::freeze_config(c, dir);
  nlohmann::json header = artifact_header(c, "train");
  header["vocab_size"] = vocab.size();
  header["corpus_pairs"] = corpus.size();

  std::ofstream train_log(dir / "train_log.jsonl");
  if (!train_log) throw Error("cannot write " + (dir / "train_log.jsonl").string());
  train_log << nlohmann::json{{"header", header}}.dump() << '\n';

  TrainHooks hooks;
  hooks.on_step = [&](const StepLog& s) { train_log << to_json(s).dump() << '\n'; };
  hooks.on_checkpoint = [&](long step) {
    nlohmann::json meta = header;
    meta["step"] = step;
    save_checkpoint((dir / ("checkpoint_step" + std::to_string(step) + ".ckpt")).string(), model, vocab, meta);
  };
  if (!validation.empty()) hooks.validation = &validation;

  log << "training on " << corpus.size() << " pairs, vocabulary " << vocab.size() << ", "
      << model.parameters().size() << " parameter tensors\n";
  TrainOutcome out;
  out.result = train(model, vocab, corpus, c.train, hooks);
  train_log.close();
  if (!train_log) throw Error("failed writing training log");

  for (std::size_t e = 0; e < out.result.epoch_mean_total.size(); ++e) {
    log << "epoch " << e + 1 << " mean total " << out.result.epoch_mean_total[e];
    if (e < out.result.validation_nsp_accuracy.size()) log << " validation nsp accuracy " << out.result.validation_nsp_accuracy[e];
    log << '\n';
  }
  if (!validation.empty()) {
    out.validation_accuracy = nsp_accuracy(model, vocab, validation, c.train.seed + 1);
    log << "final validation nsp accuracy " << *out.validation_accuracy << '\n';
  }

  nlohmann::json meta = header;
  meta["selected_epoch"] = out.result.selected_epoch;
  out.checkpoint = dir / "model.ckpt";
  save_checkpoint(out.checkpoint.string(), model, vocab, meta);
  log << "wrote " << out.checkpoint.string() << '\n';
  return out;
}

enum class ScoreMode { full, wo_nsp, wo_mi };

inline ScoreMode parse_score_mode(const std::string& s) {
  if (s == "full") return ScoreMode::full;
  if (s == "wo_nsp") return ScoreMode::wo_nsp;
  if (s == "wo_mi") return ScoreMode::wo_mi;
  throw ConfigError("--mode: expected full, wo_nsp or wo_mi, got '" + s + "'");
}

inline const char* headline_column(ScoreMode m) {
  switch (m) {
    case ScoreMode::full: return "score";
    case ScoreMode::wo_nsp: return "score_wo_nsp";
    case ScoreMode::wo_mi: return "score_wo_mi";
  }
  return "score";
}

inline double headline_value(const ScoreRecord& r, ScoreMode m) {
  switch (m) {
    case ScoreMode::full: return r.score;
    case ScoreMode::wo_nsp: return r.score_wo_nsp;
    case ScoreMode::wo_mi: return r.score_wo_mi;
  }
  return r.score;
}

inline Checkpoint load_matching_checkpoint(const RunConfig& c) {
  detail::require_file(c.paths.checkpoint, "paths.checkpoint");
  Checkpoint ck = load_checkpoint(c.paths.checkpoint);
  const auto& mc = ck.model.config();
  if (c.model.vocab_size != 0 && c.model.vocab_size != mc.vocab_size)
    throw ConfigError("model.vocab_size: config says " + std::to_string(c.model.vocab_size) + ", checkpoint has " +
                      std::to_string(mc.vocab_size));
  if (c.model.latent_dim != mc.latent_dim)
    throw ConfigError("model.latent_dim: config says " + std::to_string(c.model.latent_dim) + ", checkpoint has " +
                      std::to_string(mc.latent_dim));
  return ck;
}

struct ScoreOutcome {
  std::vector<ScoreRecord> records;
  fs::path jsonl;
  fs::path csv;
};

inline ScoreOutcome cmd_score(const RunConfig& c, ScoreMode mode, std::ostream& log) {
  detail::require_file(c.paths.pairs, "paths.pairs");
  if (!c.paths.corpus.empty()) detail::require_file(c.paths.corpus, "paths.corpus");
  const Checkpoint ck = load_matching_checkpoint(c);
  const auto pairs = load_dialogues(c.paths.pairs);
  for (const auto& p : pairs)
    if (!p.candidate) throw Error(c.paths.pairs + ": pair '" + p.pair_id + "' has no candidate");
  const auto pool = c.paths.corpus.empty() ? pairs : load_dialogues(c.paths.corpus);

  const fs::path dir = detail::prepare_output(c);
  detail::freeze_config(c, dir);
  ScoreOutcome out;
  out.records = score_pairs(pairs, pool, ck.model, ck.vocabulary, c.eval);

  nlohmann::json header = artifact_header(c, "score");
  header["checkpoint"] = c.paths.checkpoint;
  header["n_negatives"] = c.eval.n_negatives;
  header["mc_samples"] = c.eval.mc_samples;
  header["seed"] = c.eval.seed;
  header["mode"] = headline_column(mode);

  out.jsonl = dir / "scores.jsonl";
  write_score_report(out.jsonl.string(), header, out.records);

  std::ostringstream csv;
  csv.precision(17);
  csv << detail::csv_comment(header);
  csv << "pair_id,headline,g,mi_context,mi_reference,score,score_wo_nsp,score_wo_mi\n";
  for (const auto& r : out.records)
    csv << r.pair_id << ',' << headline_value(r, mode) << ',' << r.g << ',' << r.mi_context << ',' << r.mi_reference
        << ',' << r.score << ',' << r.score_wo_nsp << ',' << r.score_wo_mi << '\n';
  out.csv = dir / "scores.csv";
  detail::write_text(out.csv, csv.str());
  log << "scored " << out.records.size() << " pairs (" << headline_column(mode) << ") -> " << out.jsonl.string()
      << '\n';
  return out;
}

inline EvalSetSplit cmd_build_eval_set(const RunConfig& c, std::ostream& log) {
  detail::require_file(c.paths.pairs, "paths.pairs");
  const auto pairs = load_dialogues(c.paths.pairs);
  std::vector<std::string> warnings;
  const EvalSetSplit split = build_eval_sets(pairs, c.eval_set, &warnings);
  for (const auto& w : warnings) log << "warning: " << w << '\n';

  const fs::path dir = detail::prepare_output(c);
  detail::freeze_config(c, dir);
  nlohmann::json j = split;
  j["k_standard"] = c.eval_set.k_standard;
  j["k_diverse"] = c.eval_set.k_diverse;
  j["header"] = artifact_header(c, "build-eval-set");
  detail::write_text(dir / "eval_split.json", j.dump(2) + "\n");
  log << "standard " << split.standard.size() << ", diverse " << split.diverse.size() << " (BLEU-1 < "
      << split.threshold << ") -> " << (dir / "eval_split.json").string() << '\n';
  return split;
}

inline std::vector<CorrelationRow> cmd_correlate(const RunConfig& c, std::ostream& log) {
  detail::require_file(c.paths.scores, "paths.scores");
  detail::require_file(c.paths.annotations, "paths.annotations");
  detail::require_file(c.paths.split, "paths.split");
  const auto report = read_score_report(c.paths.scores);
  const auto humans = aggregate_annotations(load_annotations(c.paths.annotations));
  const auto split = load_split(c.paths.split);
  const auto rows = correlate_run(report.records, humans, split);

  const fs::path dir = detail::prepare_output(c);
  detail::freeze_config(c, dir);
  nlohmann::json header = artifact_header(c, "correlate");
  if (report.header.contains("config_hash")) header["score_config_hash"] = report.header["config_hash"];
  std::ostringstream csv, text;
  csv << detail::csv_comment(header);
  write_correlation_csv(csv, rows);
  write_correlation_text(text, rows);
  detail::write_text(dir / "correlation.csv", csv.str());
  detail::write_text(dir / "correlation.txt", "# " + header.dump() + "\n" + text.str());
  log << text.str();
  return rows;
}

inline KappaTable cmd_kappa(const RunConfig& c, std::ostream& log) {
  detail::require_file(c.paths.annotations, "paths.annotations");
  const KappaTable t = pairwise_kappa(load_annotations(c.paths.annotations));

  const fs::path dir = detail::prepare_output(c);
  detail::freeze_config(c, dir);
  std::ostringstream csv, text;
  csv << detail::csv_comment(artifact_header(c, "kappa")) << std::setprecision(10) << "annotator";
  for (const auto& a : t.annotators) csv << ',' << a;
  csv << '\n';
  text << std::left << std::setw(12) << "" << std::right;
  for (const auto& a : t.annotators) text << std::setw(12) << a;
  text << '\n';
  for (std::size_t i = 0; i < t.annotators.size(); ++i) {
    csv << t.annotators[i];
    text << std::left << std::setw(12) << t.annotators[i] << std::right;
    for (std::size_t j = 0; j < t.annotators.size(); ++j) {
      csv << ',' << t.kappa[i][j];
      text << std::setw(12) << std::fixed << std::setprecision(4) << t.kappa[i][j];
    }
    csv << '\n';
    text << '\n';
  }
  text << "mean pairwise kappa " << std::fixed << std::setprecision(4) << t.mean_off_diagonal() << '\n';
  detail::write_text(dir / "kappa.csv", csv.str());
  log << text.str();
  return t;
}

// Posterior means of (context, reference) and (context, candidate).
inline std::vector<ProjectionPoint> cmd_project(const RunConfig& c, ProjectionMethod method, std::ostream& log) {
  detail::require_file(c.paths.pairs, "paths.pairs");
  const Checkpoint ck = load_matching_checkpoint(c);
  const auto pairs = load_dialogues(c.paths.pairs);
  std::vector<ProjectionInput> inputs;
  for (const auto& p : pairs) {
    const auto ctx = ck.vocabulary.encode(p.context);
    auto mean = [&](const Tokens& response) {
      return ck.model.posterior_params(ck.model.encode_pair(ctx, ck.vocabulary.encode(response))).mean;
    };
    inputs.push_back({p.pair_id, ProjectionKind::reference, mean(p.reference)});
    if (p.candidate) inputs.push_back({p.pair_id, ProjectionKind::response, mean(*p.candidate)});
  }
  const auto points = project_embeddings(inputs, method, c.eval.seed);

  const fs::path dir = detail::prepare_output(c);
  detail::freeze_config(c, dir);
  nlohmann::json header = artifact_header(c, "project");
  header["method"] = method == ProjectionMethod::pca ? "pca" : "tsne";
  std::ostringstream csv;
  csv << detail::csv_comment(header);
  write_projection_csv(csv, points);
  detail::write_text(dir / "projection.csv", csv.str());
  log << "projected " << points.size() << " vectors -> " << (dir / "projection.csv").string() << '\n';
  return points;
}

}  // namespace cmn::cli
