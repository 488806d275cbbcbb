#pragma once

// The mlsan command-line tool. Commands live here so tests can drive them
// in-process; tools/mlsan_cli.cpp only forwards argv.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mlsan/checks.hpp"
#include "mlsan/corpus.hpp"
#include "mlsan/errors.hpp"
#include "mlsan/experiment.hpp"
#include "mlsan/run_config.hpp"
#include "mlsan/synth.hpp"
#include "mlsan/train.hpp"

namespace mlsan::cli {

namespace fs = std::filesystem;

inline constexpr const char* manifest_name = "manifest.json";

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::size_t jobs = 1;
  std::optional<std::string> ablation;
  std::optional<double> lambda;
  std::optional<std::string> corpus;
  std::string checkpoint;
  std::string resume;
  std::string split = "test";
  std::string weights = "best";
  bool embeddings = false;
};

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct LoadedCorpus {
  DialogueCorpus corpus;
  std::optional<GroundTruth> truth;
};

inline void print_effective(std::ostream& out, const json& effective) {
  out << "effective config:\n" << effective.dump(2) << "\n";
}

inline void persist_effective(const fs::path& dir, const json& effective) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  detail::write_file(dir / "effective_config.json", effective.dump(2) + "\n");
}

inline json corpus_manifest(const DialogueCorpus& c, const GroundTruth* truth) {
  json j{{"format", "mlsan-corpus"},
         {"version", 1},
         {"modality_names", c.modality_names},
         {"modality_dims", c.modality_dims},
         {"num_speakers", c.num_speakers},
         {"num_emotions", c.num_emotions},
         {"dialogues", c.dialogues.size()},
         {"utterances", c.utterance_count()}};
  j["ground_truth"] = truth ? to_json_value(*truth) : json(nullptr);
  return j;
}

// A corpus directory with a manifest carries its own shape (and, for
// generated corpora, the ground truth). Without one, the model section
// supplies modality names and the emotion count.
inline LoadedCorpus load_corpus_dir(const fs::path& dir, const RunConfig& rc) {
  LoadedCorpus out;
  const fs::path manifest_path = dir / manifest_name;
  if (fs::exists(manifest_path)) {
    json m;
    try {
      m = json::parse(read_text(manifest_path));
    } catch (const json::parse_error& e) {
      throw ParseError(manifest_path.string() + ": " + e.what());
    }
    try {
      if (m.value("format", "") != "mlsan-corpus") throw ParseError(manifest_path.string() + ": not a corpus manifest");
      const auto names = m.at("modality_names").get<std::vector<std::string>>();
      const auto dims = m.at("modality_dims").get<std::vector<std::size_t>>();
      CorpusSchema schema{m.at("num_emotions").get<std::size_t>(), m.at("num_speakers").get<std::size_t>()};
      out.corpus = read_corpus_dir(dir, names, schema);
      out.corpus.num_speakers = *schema.num_speakers;
      if (out.corpus.modality_dims != dims) {
        throw ParseError(manifest_path.string() + ": feature widths disagree with the CSV files");
      }
      if (!m.at("ground_truth").is_null()) {
        try {
          out.truth = ground_truth_from_json(m.at("ground_truth"));
        } catch (const ConfigError& e) {
          throw ParseError(manifest_path.string() + ": " + e.what());
        }
        out.corpus.synthetic = true;
      }
    } catch (const json::exception& e) {
      throw ParseError(manifest_path.string() + ": " + e.what());
    }
    return out;
  }
  CorpusSchema schema{rc.model.num_emotions, std::nullopt};
  if (rc.model_keys.count("num_speakers")) schema.num_speakers = rc.model.num_speakers;
  out.corpus = read_corpus_dir(dir, rc.model.modality_names, schema);
  return out;
}

inline LoadedCorpus load_data(const RunConfig& rc) {
  if (!rc.corpus_dir.empty()) return load_corpus_dir(rc.corpus_dir, rc);
  auto sc = generate_corpus(rc.generator);
  return LoadedCorpus{std::move(sc.corpus), std::move(sc.truth)};
}

inline RunConfig resolve_config(const Options& o, std::optional<RunConfig> base = std::nullopt) {
  RunConfig rc = base ? *base : (o.config.empty() ? RunConfig{} : load_run_config(o.config));
  if (o.out) rc.output_dir = *o.out;
  if (o.corpus) rc.corpus_dir = *o.corpus;
  if (o.ablation) rc.train.ablation = parse_ablation(*o.ablation);
  if (o.lambda) rc.train.lambda = *o.lambda;
  if (o.jobs == 0) throw ConfigError("--jobs must be at least 1");
  rc.validate();
  return rc;
}

// Report around a single trained or evaluated model.
inline ExperimentReport single_report(const std::string& kind, RunRecord record) {
  ExperimentReport rep;
  rep.kind = kind;
  rep.seeds = {record.seed};
  rep.reference = record.configuration;
  ConfigurationSummary row;
  row.name = record.configuration;
  row.ablation = record.ablation;
  row.lambda = record.lambda;
  row.runs.push_back(std::move(record));
  summarize(row);
  rep.rows.push_back(std::move(row));
  return rep;
}

inline std::string curve_csv(const std::vector<EpochRecord>& curve) {
  std::ostringstream os;
  os << "epoch,train_loss,train_l_erc,train_l_spk,validation_weighted_f1\n";
  for (const auto& r : curve) {
    os << r.epoch << ',' << format_double(r.train_loss) << ',' << format_double(r.train_l_erc) << ','
       << format_double(r.train_l_spk) << ',' << format_double(r.validation_weighted_f1) << '\n';
  }
  return os.str();
}

inline int cmd_generate(const Options& o, std::ostream& out) {
  if (o.ablation || o.lambda) throw ConfigError("generate does not take --ablation or --lambda");
  RunConfig rc = resolve_config(o);
  if (o.seed) rc.generator.seed = *o.seed;
  if (!rc.corpus_dir.empty()) throw ConfigError("generate writes a corpus; corpus_dir must be empty");
  const json effective = to_json_value(rc);
  print_effective(out, effective);
  const fs::path dir = rc.output_dir;
  persist_effective(dir, effective);

  auto sc = generate_corpus(rc.generator);
  write_corpus(sc.corpus, dir);
  detail::write_file(dir / manifest_name, corpus_manifest(sc.corpus, &sc.truth).dump(2) + "\n");
  const auto splits = split_corpus(sc.corpus, rc.evaluation.split, rc.evaluation.split_seed);
  const json oracle{{"oracle_accuracy", bayes_oracle(sc.corpus, sc.truth)},
                    {"oracle_accuracy_train", bayes_oracle(splits.train, sc.truth)},
                    {"oracle_accuracy_validation", bayes_oracle(splits.validation, sc.truth)},
                    {"oracle_accuracy_test", bayes_oracle(splits.test, sc.truth)},
                    {"split_seed", rc.evaluation.split_seed}};
  detail::write_file(dir / "oracle.json", oracle.dump(2) + "\n");
  out << "wrote " << sc.corpus.dialogues.size() << " dialogues (" << sc.corpus.utterance_count()
      << " utterances) to " << dir.string() << "\n";
  out << "oracle accuracy " << oracle["oracle_accuracy"].get<double>() << " (test split "
      << oracle["oracle_accuracy_test"].get<double>() << ")\n";
  return exit_codes::ok;
}

inline int cmd_train(const Options& o, std::ostream& out) {
  RunConfig rc = resolve_config(o);
  if (o.seed) rc.train.seed = *o.seed;
  auto data = load_data(rc);
  const ModelConfig model = resolve_model(rc, data.corpus);
  rc.model = model;
  const json effective = to_json_value(rc);
  print_effective(out, effective);
  const fs::path dir = rc.output_dir;
  persist_effective(dir, effective);

  const auto splits = split_corpus(data.corpus, rc.evaluation.split, rc.evaluation.split_seed);
  std::optional<Checkpoint> resume;
  if (!o.resume.empty()) resume = load_checkpoint(o.resume);
  auto result = train(splits, model, rc.train, resume ? &*resume : nullptr, json{{"run_config", effective}});
  const Checkpoint& ck = result.checkpoint;
  save_checkpoint(ck, dir / "checkpoint.bin");
  detail::write_file(dir / "curve.csv", curve_csv(ck.curve));

  RunRecord rec = record_from_evaluation(evaluate(ck.best_params, splits.test, rc.train.ablation));
  rec.configuration = std::string(to_string(rc.train.ablation));
  rec.ablation = rc.train.ablation;
  rec.lambda = rc.train.ablation == Ablation::no_aux ? 0.0 : rc.train.lambda;
  rec.seed = rc.train.seed;
  rec.epochs_run = ck.epoch;
  rec.best_epoch = ck.best_epoch;
  rec.best_validation_weighted_f1 = ck.best_validation_weighted_f1;
  rec.trainable_parameters = trainable_census(ck.params, rc.train.ablation);
  if (data.truth) rec.oracle_accuracy = bayes_oracle(splits.test, *data.truth);
  const auto rep = single_report("train", rec);
  write_report(rep, model.modality_names, dir);
  out << "trained " << ck.epoch << " epochs (best epoch " << ck.best_epoch << ", validation W-F1 "
      << detail::percent(ck.best_validation_weighted_f1) << ")\n";
  out << summary_table_csv(rep);
  return exit_codes::ok;
}

inline int cmd_evaluate(const Options& o, std::ostream& out) {
  if (o.checkpoint.empty()) throw ConfigError("evaluate needs --checkpoint");
  if (o.split != "test" && o.split != "validation" && o.split != "train") {
    throw ConfigError("--split must be train, validation or test");
  }
  if (o.weights != "best" && o.weights != "last") throw ConfigError("--weights must be best or last");
  if (o.ablation || o.lambda || o.seed) throw ConfigError("evaluate takes the ablation and seed from the checkpoint");
  const Checkpoint ck = load_checkpoint(o.checkpoint);
  std::optional<RunConfig> stored;
  if (o.config.empty() && ck.metadata.contains("run_config")) stored = run_config_from_json(ck.metadata["run_config"]);
  RunConfig rc = resolve_config(o, stored);
  rc.model = ck.model;
  for (const char* k : {"num_speakers", "num_emotions", "modality_names", "modality_dims"}) rc.model_keys.insert(k);
  rc.train = ck.train;
  const json effective = to_json_value(rc);
  print_effective(out, effective);
  const fs::path dir = rc.output_dir;
  persist_effective(dir, effective);

  auto data = load_data(rc);
  check_corpus_fits(data.corpus, ck.model);
  const auto splits = split_corpus(data.corpus, rc.evaluation.split, rc.evaluation.split_seed);
  const DialogueCorpus& part =
      o.split == "test" ? splits.test : o.split == "validation" ? splits.validation : splits.train;
  const ModelParameters& params = o.weights == "best" ? ck.best_params : ck.params;
  RunRecord rec = record_from_evaluation(evaluate(params, part, ck.train.ablation));
  rec.configuration = std::string(to_string(ck.train.ablation));
  rec.ablation = ck.train.ablation;
  rec.lambda = ck.train.ablation == Ablation::no_aux ? 0.0 : ck.train.lambda;
  rec.seed = ck.train.seed;
  rec.epochs_run = ck.epoch;
  rec.best_epoch = ck.best_epoch;
  rec.best_validation_weighted_f1 = ck.best_validation_weighted_f1;
  rec.trainable_parameters = trainable_census(params, ck.train.ablation);
  if (data.truth) rec.oracle_accuracy = bayes_oracle(part, *data.truth);
  const auto rep = single_report("evaluate", rec);
  write_report(rep, ck.model.modality_names, dir);
  if (o.embeddings) dump_embeddings(params, part, ck.train.ablation, dir / "embeddings.csv");
  out << o.split << " split: weighted F1 " << detail::percent(rec.weighted_f1) << ", accuracy "
      << detail::percent(rec.accuracy) << "\n";
  return exit_codes::ok;
}

inline int cmd_grid(const Options& o, std::ostream& out, bool sweep) {
  if (sweep && o.lambda) throw ConfigError("sweep takes its lambda values from sweep.lambdas");
  if (o.ablation) throw ConfigError(std::string(sweep ? "sweep" : "ablate") + " does not take --ablation");
  RunConfig rc = resolve_config(o);
  if (o.seed) rc.seeds = {*o.seed};
  auto data = load_data(rc);
  const ModelConfig model = resolve_model(rc, data.corpus);
  rc.model = model;
  const json effective = to_json_value(rc);
  print_effective(out, effective);
  const fs::path dir = rc.output_dir;
  persist_effective(dir, effective);

  const auto splits = split_corpus(data.corpus, rc.evaluation.split, rc.evaluation.split_seed);
  const GroundTruth* truth = data.truth ? &*data.truth : nullptr;
  const auto rep = sweep ? lambda_sweep(splits, model, rc.train, rc.sweep_lambdas, rc.seeds, o.jobs, truth)
                         : run_ablation(splits, model, rc.train, rc.seeds, o.jobs, truth);
  write_report(rep, model.modality_names, dir);
  out << summary_table_csv(rep);
  for (const auto& row : rep.rows) {
    if (row.failures) return exit_codes::numerical;
  }
  return exit_codes::ok;
}

inline int cmd_gradcheck(const Options& o, std::ostream& out) {
  RunConfig rc = resolve_config(o);
  const std::uint64_t seed = o.seed.value_or(3);
  json effective = to_json_value(rc.model);
  effective["seed"] = seed;
  effective["tolerance"] = gradcheck_tolerance;
  effective["step"] = gradcheck_step;
  print_effective(out, effective);
  const auto cases = gradcheck_suite(rc.model, seed);
  bool ok = true;
  json results = json::array();
  for (const auto& c : cases) {
    ok = ok && c.passed;
    out << (c.passed ? "PASS " : "FAIL ") << c.name << "  max_rel_err=" << c.result.max_relative_error
        << "  scalars=" << c.result.scalars_checked << "  worst=" << c.result.worst_parameter << "["
        << c.result.worst_index << "]\n";
    results.push_back(json{{"name", c.name},
                           {"passed", c.passed},
                           {"max_relative_error", c.result.max_relative_error},
                           {"worst_parameter", c.result.worst_parameter},
                           {"worst_index", c.result.worst_index},
                           {"scalars_checked", c.result.scalars_checked},
                           {"kink_retries", c.result.kink_retries}});
  }
  if (o.out) {
    persist_effective(*o.out, effective);
    detail::write_file(fs::path(*o.out) / "gradcheck.json", json{{"passed", ok}, {"cases", results}}.dump(2) + "\n");
  }
  return ok ? exit_codes::ok : exit_codes::check_failed;
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Speaker-adaptive multimodal emotion recognition experiments"};
  app.require_subcommand(1);
  Options o;
  auto common = [&o](CLI::App* sub) {
    sub->add_option("--config", o.config, "JSON run configuration");
    sub->add_option("--seed", o.seed, "Seed override");
    sub->add_option("--out", o.out, "Output directory");
    sub->add_option("--jobs", o.jobs, "Concurrent training runs")->default_val(1);
    sub->add_option("--ablation", o.ablation, "full, no_film, no_gate or no_aux");
    sub->add_option("--lambda", o.lambda, "Auxiliary speaker loss weight");
  };
  auto* gen = app.add_subcommand("generate", "Write a synthetic corpus with its ground truth");
  auto* tr = app.add_subcommand("train", "Train one model");
  auto* ev = app.add_subcommand("evaluate", "Score a checkpoint");
  auto* ab = app.add_subcommand("ablate", "Full model against each ablation over the seed list");
  auto* sw = app.add_subcommand("sweep", "Auxiliary loss weight sweep over the seed list");
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every gradient");
  for (auto* sub : {gen, tr, ev, ab, sw, gc}) common(sub);
  for (auto* sub : {tr, ev, ab, sw}) sub->add_option("--corpus", o.corpus, "Corpus directory (default: generate)");
  tr->add_option("--resume", o.resume, "Continue from this checkpoint");
  ev->add_option("--checkpoint", o.checkpoint, "Checkpoint file")->required();
  ev->add_option("--split", o.split, "train, validation or test")->default_val("test");
  ev->add_option("--weights", o.weights, "best or last")->default_val("best");
  ev->add_flag("--embeddings", o.embeddings, "Also write fused features to embeddings.csv");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? exit_codes::ok : exit_codes::config;
  }
  try {
    if (*gen) return cmd_generate(o, out);
    if (*tr) return cmd_train(o, out);
    if (*ev) return cmd_evaluate(o, out);
    if (*ab) return cmd_grid(o, out, false);
    if (*sw) return cmd_grid(o, out, true);
    if (*gc) return cmd_gradcheck(o, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const json::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_codes::config;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return exit_codes::internal;
  }
  return exit_codes::internal;
}

}  // namespace mlsan::cli
