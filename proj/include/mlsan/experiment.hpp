#pragma once

// Seeded experiment protocols: single runs, the four-way ablation, the lambda
// sweep, and their reports (JSON plus flat CSV tables).

#include <atomic>
#include <filesystem>
#include <functional>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "mlsan/corpus.hpp"
#include "mlsan/errors.hpp"
#include "mlsan/json_io.hpp"
#include "mlsan/layers.hpp"
#include "mlsan/metrics.hpp"
#include "mlsan/synth.hpp"
#include "mlsan/train.hpp"

namespace mlsan {

inline constexpr int report_version = 1;

struct RunRecord {
  std::string configuration;
  Ablation ablation = Ablation::full;
  double lambda = 0.0;
  std::uint64_t seed = 0;
  bool failed = false;
  std::string failure;

  double weighted_f1 = 0.0;
  double macro_f1 = 0.0;
  double accuracy = 0.0;
  double speaker_accuracy = 0.0;
  std::vector<double> per_class_f1;
  ConfusionMatrix confusion;
  std::vector<std::vector<double>> gate_mean;  // [modality][speaker]
  std::vector<ModulationStats> gamma;
  std::vector<ModulationStats> beta;
  std::size_t epochs_run = 0;
  std::size_t best_epoch = 0;
  double best_validation_weighted_f1 = 0.0;
  std::size_t trainable_parameters = 0;
  std::optional<double> oracle_accuracy;  // on the same test split, synthetic corpora only
};

inline RunRecord record_from_evaluation(const Evaluation& ev) {
  RunRecord r;
  r.weighted_f1 = ev.weighted_f1;
  r.macro_f1 = ev.macro_f1;
  r.accuracy = ev.accuracy;
  r.speaker_accuracy = ev.speaker_accuracy;
  r.per_class_f1 = ev.per_class_f1;
  r.confusion = ev.confusion;
  r.gate_mean = ev.gate_mean;
  r.gamma = ev.gamma;
  r.beta = ev.beta;
  return r;
}

// Trains one configuration and scores its best checkpoint on the test split.
inline RunRecord run_single(const CorpusSplits& splits, const ModelConfig& model, const TrainConfig& cfg,
                            const GroundTruth* truth = nullptr, std::string configuration = "") {
  auto trained = train(splits, model, cfg);
  const auto& ck = trained.checkpoint;
  RunRecord r = record_from_evaluation(evaluate(ck.best_params, splits.test, cfg.ablation));
  r.configuration = configuration.empty() ? std::string(to_string(cfg.ablation)) : std::move(configuration);
  r.ablation = cfg.ablation;
  r.lambda = cfg.ablation == Ablation::no_aux ? 0.0 : cfg.lambda;
  r.seed = cfg.seed;
  r.epochs_run = ck.epoch;
  r.best_epoch = ck.best_epoch;
  r.best_validation_weighted_f1 = ck.best_validation_weighted_f1;
  r.trainable_parameters = trainable_census(ck.params, cfg.ablation);
  if (truth) r.oracle_accuracy = bayes_oracle(splits.test, *truth);
  return r;
}

// Runs independent jobs on up to `jobs` threads. Each job owns its state.
inline void run_parallel(std::size_t jobs, std::vector<std::function<void()>>& tasks) {
  if (jobs <= 1 || tasks.size() <= 1) {
    for (auto& t : tasks) t();
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < std::min(jobs, tasks.size()); ++w) {
    pool.emplace_back([&]() {
      for (std::size_t i = next++; i < tasks.size(); i = next++) tasks[i]();
    });
  }
  for (auto& t : pool) t.join();
}

struct ConfigurationSummary {
  std::string name;
  Ablation ablation = Ablation::full;
  double lambda = 0.0;
  std::vector<RunRecord> runs;  // one per seed, seed order
  std::optional<SeedAggregate> weighted_f1;
  std::optional<SeedAggregate> macro_f1;
  std::optional<SeedAggregate> accuracy;
  std::optional<double> delta_vs_reference;  // reference mean - this mean
  std::optional<PairedDeltas> paired;         // against the reference configuration
  std::size_t failures = 0;
};

struct ExperimentReport {
  std::string kind;  // "ablation" or "sweep"
  std::vector<std::uint64_t> seeds;
  std::string reference;  // configuration the deltas are measured against
  std::vector<ConfigurationSummary> rows;
};

inline void summarize(ConfigurationSummary& s) {
  std::vector<double> w, m, a;
  s.failures = 0;
  for (const auto& r : s.runs) {
    if (r.failed) {
      ++s.failures;
      continue;
    }
    w.push_back(r.weighted_f1);
    m.push_back(r.macro_f1);
    a.push_back(r.accuracy);
  }
  if (!w.empty()) {
    s.weighted_f1 = aggregate_seeds(w);
    s.macro_f1 = aggregate_seeds(m);
    s.accuracy = aggregate_seeds(a);
  }
}

inline void attach_deltas(ExperimentReport& report, std::size_t reference_row) {
  const auto& ref = report.rows[reference_row];
  report.reference = ref.name;
  for (auto& row : report.rows) {
    if (!row.weighted_f1 || !ref.weighted_f1) continue;
    row.delta_vs_reference = ref.weighted_f1->mean - row.weighted_f1->mean;
    bool all_ok = row.failures == 0 && ref.failures == 0;
    if (all_ok) {
      std::vector<double> a, b;
      for (std::size_t i = 0; i < row.runs.size(); ++i) {
        a.push_back(ref.runs[i].weighted_f1);
        b.push_back(row.runs[i].weighted_f1);
      }
      row.paired = paired_deltas(a, b);
    }
  }
}

inline RunRecord failed_record(std::string configuration, Ablation ablation, double lambda, std::uint64_t seed,
                               const std::string& why) {
  RunRecord r;
  r.configuration = std::move(configuration);
  r.ablation = ablation;
  r.lambda = lambda;
  r.seed = seed;
  r.failed = true;
  r.failure = why;
  return r;
}

// Every (configuration, seed) pair trains on identical splits and identical
// per-seed initialization, so per-seed deltas isolate the configuration.
inline ExperimentReport run_grid(const std::string& kind, const CorpusSplits& splits, const ModelConfig& model,
                                 const std::vector<std::pair<std::string, TrainConfig>>& configurations,
                                 const std::vector<std::uint64_t>& seeds, std::size_t jobs,
                                 const GroundTruth* truth) {
  if (seeds.empty()) throw ConfigError("at least one seed is required");
  ExperimentReport report;
  report.kind = kind;
  report.seeds = seeds;
  for (const auto& [name, cfg] : configurations) {
    ConfigurationSummary s;
    s.name = name;
    s.ablation = cfg.ablation;
    s.lambda = cfg.ablation == Ablation::no_aux ? 0.0 : cfg.lambda;
    s.runs.resize(seeds.size());
    report.rows.push_back(std::move(s));
  }
  std::vector<std::function<void()>> tasks;
  for (std::size_t c = 0; c < configurations.size(); ++c) {
    for (std::size_t k = 0; k < seeds.size(); ++k) {
      tasks.emplace_back([&, c, k]() {
        TrainConfig cfg = configurations[c].second;
        cfg.seed = seeds[k];
        const std::string& name = configurations[c].first;
        try {
          report.rows[c].runs[k] = run_single(splits, model, cfg, truth, name);
        } catch (const std::exception& e) {
          report.rows[c].runs[k] = failed_record(name, cfg.ablation, cfg.lambda, cfg.seed, e.what());
        }
      });
    }
  }
  run_parallel(jobs, tasks);
  for (auto& row : report.rows) summarize(row);
  return report;
}

inline ExperimentReport run_ablation(const CorpusSplits& splits, const ModelConfig& model, const TrainConfig& base,
                                     const std::vector<std::uint64_t>& seeds, std::size_t jobs = 1,
                                     const GroundTruth* truth = nullptr) {
  std::vector<std::pair<std::string, TrainConfig>> configs;
  for (Ablation a : all_ablations) {
    TrainConfig c = base;
    c.ablation = a;
    configs.emplace_back(std::string(to_string(a)), c);
  }
  auto report = run_grid("ablation", splits, model, configs, seeds, jobs, truth);
  attach_deltas(report, 0);
  return report;
}

inline const std::vector<double>& default_lambda_grid() {
  static const std::vector<double> grid{0.0, 0.1, 0.2, 0.5, 1.0, 2.0};
  return grid;
}

inline std::string lambda_label(double lambda) {
  std::ostringstream os;
  os << "lambda=" << lambda;
  return os.str();
}

// Deltas are measured against the best-scoring grid point.
inline ExperimentReport lambda_sweep(const CorpusSplits& splits, const ModelConfig& model, const TrainConfig& base,
                                     const std::vector<double>& grid, const std::vector<std::uint64_t>& seeds,
                                     std::size_t jobs = 1, const GroundTruth* truth = nullptr) {
  if (grid.empty()) throw ConfigError("lambda grid is empty");
  std::vector<std::pair<std::string, TrainConfig>> configs;
  for (double l : grid) {
    if (!(l >= 0.0) || !std::isfinite(l)) throw ConfigError("lambda grid values must be >= 0");
    TrainConfig c = base;
    c.ablation = Ablation::full;
    c.lambda = l;
    configs.emplace_back(lambda_label(l), c);
  }
  auto report = run_grid("sweep", splits, model, configs, seeds, jobs, truth);
  std::size_t best = 0;
  for (std::size_t i = 0; i < report.rows.size(); ++i) {
    const auto& w = report.rows[i].weighted_f1;
    const auto& b = report.rows[best].weighted_f1;
    if (w && (!b || w->mean > b->mean)) best = i;
  }
  attach_deltas(report, best);
  return report;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

inline json to_json_value(const ModulationStats& s) {
  return json{{"mean", s.mean}, {"std", s.std}, {"min", s.min}, {"max", s.max}};
}

inline json confusion_to_json(const ConfusionMatrix& cm) {
  json rows = json::array();
  for (std::size_t t = 0; t < cm.classes; ++t) {
    json row = json::array();
    for (std::size_t p = 0; p < cm.classes; ++p) row.push_back(cm.at(t, p));
    rows.push_back(row);
  }
  return rows;
}

inline json nan_as_null(const std::vector<std::vector<double>>& m) {
  json out = json::array();
  for (const auto& row : m) {
    json r = json::array();
    for (double v : row) r.push_back(std::isfinite(v) ? json(v) : json(nullptr));
    out.push_back(r);
  }
  return out;
}

inline json to_json_value(const RunRecord& r) {
  json j{{"configuration", r.configuration},
         {"ablation", std::string(to_string(r.ablation))},
         {"lambda", r.lambda},
         {"seed", r.seed},
         {"failed", r.failed}};
  if (r.failed) {
    j["failure"] = r.failure;
    return j;
  }
  json gamma = json::array(), beta = json::array();
  for (const auto& s : r.gamma) gamma.push_back(to_json_value(s));
  for (const auto& s : r.beta) beta.push_back(to_json_value(s));
  j.update(json{{"weighted_f1", r.weighted_f1},
                {"macro_f1", r.macro_f1},
                {"accuracy", r.accuracy},
                {"speaker_accuracy", r.speaker_accuracy},
                {"per_class_f1", r.per_class_f1},
                {"confusion_matrix", confusion_to_json(r.confusion)},
                {"gate_mean", nan_as_null(r.gate_mean)},
                {"gamma", gamma},
                {"beta", beta},
                {"epochs_run", r.epochs_run},
                {"best_epoch", r.best_epoch},
                {"best_validation_weighted_f1", r.best_validation_weighted_f1},
                {"trainable_parameters", r.trainable_parameters}});
  j["oracle_accuracy"] = r.oracle_accuracy ? json(*r.oracle_accuracy) : json(nullptr);
  return j;
}

inline json to_json_value(const SeedAggregate& a) {
  return json{{"n", a.n}, {"mean", a.mean}, {"std", a.std ? json(*a.std) : json(nullptr)}};
}

inline json to_json_value(const ExperimentReport& rep) {
  json rows = json::array();
  for (const auto& row : rep.rows) {
    json runs = json::array();
    for (const auto& r : row.runs) runs.push_back(to_json_value(r));
    json j{{"configuration", row.name},
           {"ablation", std::string(to_string(row.ablation))},
           {"lambda", row.lambda},
           {"failures", row.failures},
           {"runs", runs}};
    j["weighted_f1"] = row.weighted_f1 ? to_json_value(*row.weighted_f1) : json(nullptr);
    j["macro_f1"] = row.macro_f1 ? to_json_value(*row.macro_f1) : json(nullptr);
    j["accuracy"] = row.accuracy ? to_json_value(*row.accuracy) : json(nullptr);
    j["delta_vs_reference"] = row.delta_vs_reference ? json(*row.delta_vs_reference) : json(nullptr);
    if (row.paired) {
      j["paired_deltas"] = row.paired->deltas;
      j["positive_seeds"] = row.paired->positive;
    } else {
      j["paired_deltas"] = nullptr;
      j["positive_seeds"] = nullptr;
    }
    rows.push_back(j);
  }
  return json{{"format", "mlsan-report"}, {"version", report_version}, {"kind", rep.kind},
              {"seeds", rep.seeds},       {"reference", rep.reference}, {"rows", rows}};
}

namespace detail {

inline std::string percent(double v) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(2);
  os << 100.0 * v;
  return os.str();
}

}  // namespace detail

// Aggregated table: one row per configuration, values in percentage points.
inline std::string summary_table_csv(const ExperimentReport& rep) {
  std::ostringstream os;
  os << "configuration,lambda,n,mean_weighted_f1,std_weighted_f1,delta_vs_" << rep.reference
     << ",positive_seeds,mean_macro_f1,mean_accuracy,failures\n";
  for (const auto& row : rep.rows) {
    os << row.name << ',' << row.lambda << ',' << (row.weighted_f1 ? row.weighted_f1->n : 0) << ',';
    os << (row.weighted_f1 ? detail::percent(row.weighted_f1->mean) : "") << ',';
    os << (row.weighted_f1 && row.weighted_f1->std ? detail::percent(*row.weighted_f1->std) : "") << ',';
    os << (row.delta_vs_reference ? detail::percent(-*row.delta_vs_reference) : "") << ',';
    os << (row.paired ? std::to_string(row.paired->positive) : "") << ',';
    os << (row.macro_f1 ? detail::percent(row.macro_f1->mean) : "") << ',';
    os << (row.accuracy ? detail::percent(row.accuracy->mean) : "") << ',' << row.failures << '\n';
  }
  return os.str();
}

inline std::string per_seed_csv(const ExperimentReport& rep) {
  std::ostringstream os;
  os << "configuration,seed,weighted_f1,macro_f1,accuracy,speaker_accuracy,oracle_accuracy,epochs_run,failed\n";
  for (const auto& row : rep.rows) {
    for (const auto& r : row.runs) {
      os << row.name << ',' << r.seed << ',';
      if (r.failed) {
        os << ",,,,,,1\n";
        continue;
      }
      os << format_double(r.weighted_f1) << ',' << format_double(r.macro_f1) << ',' << format_double(r.accuracy)
         << ',' << format_double(r.speaker_accuracy) << ','
         << (r.oracle_accuracy ? format_double(*r.oracle_accuracy) : "") << ',' << r.epochs_run << ",0\n";
    }
  }
  return os.str();
}

inline std::string confusion_csv(const ExperimentReport& rep) {
  std::ostringstream os;
  os << "configuration,seed,true_class,predicted_class,count\n";
  for (const auto& row : rep.rows) {
    for (const auto& r : row.runs) {
      if (r.failed) continue;
      for (std::size_t t = 0; t < r.confusion.classes; ++t) {
        for (std::size_t p = 0; p < r.confusion.classes; ++p) {
          os << row.name << ',' << r.seed << ',' << t << ',' << p << ',' << r.confusion.at(t, p) << '\n';
        }
      }
    }
  }
  return os.str();
}

inline std::string gates_csv(const ExperimentReport& rep, const std::vector<std::string>& modality_names) {
  std::ostringstream os;
  os << "configuration,seed,modality,speaker,mean_gate\n";
  for (const auto& row : rep.rows) {
    for (const auto& r : row.runs) {
      if (r.failed) continue;
      for (std::size_t m = 0; m < r.gate_mean.size(); ++m) {
        for (std::size_t s = 0; s < r.gate_mean[m].size(); ++s) {
          if (!std::isfinite(r.gate_mean[m][s])) continue;
          os << row.name << ',' << r.seed << ',' << modality_names.at(m) << ',' << s << ','
             << format_double(r.gate_mean[m][s]) << '\n';
        }
      }
    }
  }
  return os.str();
}

inline void write_report(const ExperimentReport& rep, const std::vector<std::string>& modality_names,
                         const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  detail::write_file(dir / (rep.kind + "_report.json"), to_json_value(rep).dump(2) + "\n");
  detail::write_file(dir / (rep.kind + "_table.csv"), summary_table_csv(rep));
  detail::write_file(dir / (rep.kind + "_per_seed.csv"), per_seed_csv(rep));
  detail::write_file(dir / (rep.kind + "_confusion.csv"), confusion_csv(rep));
  detail::write_file(dir / (rep.kind + "_gates.csv"), gates_csv(rep, modality_names));
}

// One CSV row per utterance: fused features then emotion and speaker labels.
inline void dump_embeddings(const ModelParameters& params, const DialogueCorpus& corpus, Ablation ablation,
                            const std::filesystem::path& path) {
  const Evaluation ev = evaluate(params, corpus, ablation, true);
  std::ostringstream os;
  const std::size_t width = params.config.fused_dim();
  for (std::size_t j = 0; j < width; ++j) os << 'f' << j << ',';
  os << "emotion,speaker\n";
  for (std::size_t i = 0; i < ev.fused.size(); ++i) {
    for (double v : ev.fused[i]) os << format_double(v) << ',';
    os << ev.labels[i] << ',' << ev.speakers[i] << '\n';
  }
  detail::write_file(path, os.str());
}

}  // namespace mlsan
