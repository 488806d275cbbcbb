#pragma once

// Experiment configuration read by the command-line tool. Every section is
// optional in the file; the effective configuration (all defaults resolved)
// is what gets persisted next to results.

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mlsan/errors.hpp"
#include "mlsan/experiment.hpp"
#include "mlsan/json_io.hpp"
#include "mlsan/train.hpp"

namespace mlsan {

struct EvaluationConfig {
  SplitFractions split;
  std::uint64_t split_seed = 11;

  bool operator==(const EvaluationConfig& o) const {
    return split.train == o.split.train && split.validation == o.split.validation && split.test == o.split.test &&
           split_seed == o.split_seed;
  }
};

struct RunConfig {
  GeneratorConfig generator;
  ModelConfig model;
  TrainConfig train;
  EvaluationConfig evaluation;
  std::string corpus_dir;  // empty: generate from the generator section in memory
  std::string output_dir = "mlsan_out";
  std::vector<std::uint64_t> seeds{100, 101, 102, 103, 104};
  std::vector<double> sweep_lambdas = default_lambda_grid();

  // Model keys present in the source file. Absent corpus-shaped keys
  // (speakers, emotions, modalities) are taken from the corpus.
  std::set<std::string> model_keys;

  void validate() const {
    generator.validate();
    train.validate();
    if (seeds.empty()) throw ConfigError("seeds must list at least one seed");
    if (sweep_lambdas.empty()) throw ConfigError("sweep.lambdas must not be empty");
    for (double l : sweep_lambdas) {
      if (!(l >= 0.0) || !std::isfinite(l)) throw ConfigError("sweep.lambdas entries must be finite and >= 0");
    }
    if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
  }

  bool operator==(const RunConfig& o) const {
    return generator == o.generator && model == o.model && train == o.train && evaluation == o.evaluation &&
           corpus_dir == o.corpus_dir && output_dir == o.output_dir && seeds == o.seeds &&
           sweep_lambdas == o.sweep_lambdas;
  }
};

inline json to_json_value(const RunConfig& c) {
  return json{{"generator", to_json_value(c.generator)},
              {"model", to_json_value(c.model)},
              {"train", to_json_value(c.train)},
              {"evaluation", {{"split", to_json_value(c.evaluation.split)}, {"split_seed", c.evaluation.split_seed}}},
              {"corpus_dir", c.corpus_dir},
              {"output_dir", c.output_dir},
              {"seeds", c.seeds},
              {"sweep", {{"lambdas", c.sweep_lambdas}}}};
}

inline RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  StrictReader r(j, "config");
  if (r.has("generator")) c.generator = generator_config_from_json(r.at("generator"), "generator");
  if (r.has("model")) {
    const json& m = r.at("model");
    c.model = model_config_from_json(m, "model");
    for (auto it = m.begin(); it != m.end(); ++it) c.model_keys.insert(it.key());
  }
  if (r.has("train")) c.train = train_config_from_json(r.at("train"), "train");
  if (r.has("evaluation")) {
    StrictReader e(r.at("evaluation"), "evaluation");
    if (e.has("split")) c.evaluation.split = split_fractions_from_json(e.at("split"), "evaluation.split");
    e.get("split_seed", c.evaluation.split_seed);
    e.finish();
  }
  r.get("corpus_dir", c.corpus_dir);
  r.get("output_dir", c.output_dir);
  r.get("seeds", c.seeds);
  if (r.has("sweep")) {
    StrictReader s(r.at("sweep"), "sweep");
    s.get("lambdas", c.sweep_lambdas);
    s.finish();
  }
  r.finish();
  c.validate();
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  json j;
  try {
    j = json::parse(ss.str());
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

// Fills model fields the configuration left open from the corpus shape.
inline ModelConfig resolve_model(const RunConfig& rc, const DialogueCorpus& corpus) {
  ModelConfig m = rc.model;
  if (!rc.model_keys.count("num_speakers")) m.num_speakers = corpus.num_speakers;
  if (!rc.model_keys.count("num_emotions")) m.num_emotions = corpus.num_emotions;
  if (!rc.model_keys.count("modality_names")) m.modality_names = corpus.modality_names;
  if (!rc.model_keys.count("modality_dims")) m.modality_dims = corpus.modality_dims;
  m.validate();
  return m;
}

}  // namespace mlsan
