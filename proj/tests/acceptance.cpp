// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "mlsan/checks.hpp"
#include "mlsan/experiment.hpp"
#include "test_support.hpp"

using namespace mlsan;
using mlsan::testing::random_tensor;
using mlsan::testing::random_values;
using mlsan::testing::TempDir;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void report(int id, const std::string& title, bool ok, const std::string& detail) {
  std::printf("criterion %2d %s: %s (%s)\n", id, ok ? "PASS" : "FAIL", title.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

std::string fmt(double v, int digits = 2) {
  std::ostringstream ss;
  ss.setf(std::ios::fixed);
  ss.precision(digits);
  ss << v;
  return ss.str();
}

const std::vector<std::uint64_t> seeds{100, 101, 102, 103, 104};
constexpr std::uint64_t split_seed = 11;

struct Setup {
  SyntheticCorpus sc;
  CorpusSplits splits;
  ModelConfig model;
};

Setup make_setup(const GeneratorConfig& g) {
  Setup s;
  s.sc = generate_corpus(g);
  s.splits = split_corpus(s.sc.corpus, SplitFractions{}, split_seed);
  s.model.num_speakers = s.sc.corpus.num_speakers;
  s.model.num_emotions = s.sc.corpus.num_emotions;
  s.model.modality_dims = s.sc.corpus.modality_dims;
  return s;
}

double mean_f1(const ConfigurationSummary& row) { return row.weighted_f1 ? 100.0 * row.weighted_f1->mean : NAN; }

// --- 1 --------------------------------------------------------------------------

void gradient_soundness() {
  const auto t0 = Clock::now();
  const auto cases = gradcheck_suite(ModelConfig{}, 3);
  const double secs = seconds_since(t0);
  bool ok = secs < 120.0 && !cases.empty();
  double worst = 0.0;
  std::size_t scalars = 0;
  std::string worst_name;
  for (const auto& c : cases) {
    ok = ok && c.passed && c.result.max_relative_error < 1e-4;
    scalars += c.result.scalars_checked;
    if (c.result.max_relative_error >= worst) {
      worst = c.result.max_relative_error;
      worst_name = c.name + ":" + c.result.worst_parameter;
    }
  }
  report(1, "gradient soundness", ok,
         std::to_string(cases.size()) + " cases, " + std::to_string(scalars) + " scalars, max rel err " +
             fmt(worst * 1e6, 3) + "e-6 at " + worst_name + ", " + fmt(secs, 1) + " s");
}

// --- 2 --------------------------------------------------------------------------

ModelConfig small_model() {
  ModelConfig c;
  c.num_speakers = 3;
  c.num_emotions = 3;
  c.modality_dims = {4, 3};
  c.speaker_dim = 5;
  c.hidden_dim = 6;
  c.context_window = 2;
  return c;
}

std::vector<std::vector<double>> grads(const ModelParameters& p) {
  std::vector<std::vector<double>> out;
  for (const auto& n : p.named()) out.emplace_back(n.tensor.grad().begin(), n.tensor.grad().end());
  return out;
}

void mechanism_invariants() {
  constexpr int trials = 100;
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<std::size_t> dim(1, 9);
  std::uniform_real_distribution<double> mag(-1e3, 1e3), scale(0.0, 1e4), lam(0.0, 5.0);
  std::uniform_int_distribution<std::size_t> cls(0, 3);
  int film = 0, gate = 0, loss = 0, detach = 0;

  for (int t = 0; t < trials; ++t) {
    const std::size_t n = dim(rng), d = dim(rng), ds = dim(rng);
    std::vector<double> xv(n * d), ev(n * ds);
    for (double& v : xv) v = mag(rng);
    for (double& v : ev) v = mag(rng);
    FilmParams f{Tensor::zeros({ds, d}), Tensor::full({d}, 1.0), Tensor::zeros({ds, d}), Tensor::zeros({d})};
    const Tensor out = film_modulate(Tensor({n, d}, xv), Tensor({n, ds}, ev), f).calibrated;
    film += std::equal(xv.begin(), xv.end(), out.data().begin(), out.data().end());
  }

  for (int t = 0; t < trials; ++t) {
    const std::size_t n = dim(rng), ds = dim(rng), dh = dim(rng);
    const double s = scale(rng);
    auto big = [&](Shape shape) {
      auto v = random_values(rng, shape_size(shape));
      for (double& x : v) x *= s;
      return Tensor(shape, v);
    };
    GateParams g{big({ds, dh}), big({dh})};
    const Tensor a = speaker_gate_modulate(random_tensor(rng, {n, dh}, false), big({n, ds}), g).gate;
    bool inside = true;
    for (double v : a.data()) inside = inside && v > 0.0 && v < 1.0;
    gate += inside;
  }

  for (int t = 0; t < trials; ++t) {
    Tensor ze = random_tensor(rng, {5, 4}), zs = random_tensor(rng, {5, 4});
    std::vector<std::size_t> e(5), s(5);
    for (auto& v : e) v = cls(rng);
    for (auto& v : s) v = cls(rng);
    const double lambda = t == 0 ? 0.0 : lam(rng);
    const auto l = total_loss(ze, e, zs, s, lambda);
    loss += l.total.item() - (l.l_erc.item() + lambda * l.l_spk.item()) == 0.0;
  }

  const ModelConfig cfg = small_model();
  for (int t = 0; t < trials; ++t) {
    ModelParameters p = init_parameters(cfg, 500 + t);
    for (auto& nt : p.named()) {
      auto v = nt.tensor.mutable_data();
      auto r = random_values(rng, v.size());
      std::copy(r.begin(), r.end(), v.begin());
    }
    const Batch b = gradcheck_batch(cfg, 500 + t);
    for (auto nt : p.named()) nt.tensor.zero_grad();
    backward(batch_loss(forward(p, b, Ablation::full), b, 0.0, Ablation::full).total);
    const auto g_full = grads(p);
    for (auto nt : p.named()) nt.tensor.zero_grad();
    backward(batch_loss(forward(p, b, Ablation::no_aux), b, lam(rng), Ablation::no_aux).total);
    detach += grads(p) == g_full;
  }

  const bool ok = film == trials && gate == trials && loss == trials && detach == trials;
  report(2, "mechanism invariants", ok,
         "FiLM identity " + std::to_string(film) + "/" + std::to_string(trials) + ", gate in (0,1) " +
             std::to_string(gate) + "/" + std::to_string(trials) + ", loss decomposition " + std::to_string(loss) +
             "/" + std::to_string(trials) + ", lambda=0 vs detached " + std::to_string(detach) + "/" +
             std::to_string(trials));
}

// --- 3 --------------------------------------------------------------------------

void metric_oracle() {
  std::mt19937_64 rng(303);
  std::uniform_int_distribution<std::size_t> classes(1, 8);
  std::uniform_int_distribution<std::uint64_t> count(0, 20);
  std::bernoulli_distribution sparse(0.3);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t k = classes(rng);
    ConfusionMatrix cm(k);
    std::vector<std::size_t> labels, preds;
    for (std::size_t t = 0; t < k; ++t) {
      for (std::size_t p = 0; p < k; ++p) {
        const std::uint64_t c = sparse(rng) ? 0 : count(rng);
        for (std::uint64_t i = 0; i < c; ++i) {
          labels.push_back(t);
          preds.push_back(p);
        }
      }
    }
    labels.push_back(0);
    preds.push_back(0);
    cm = confusion_matrix(preds, labels, k);
    // Per-class counts straight from the label lists.
    double weighted = 0.0, macro = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      double tp = 0, fp = 0, fn = 0;
      for (std::size_t i = 0; i < labels.size(); ++i) {
        tp += labels[i] == c && preds[i] == c;
        fp += labels[i] != c && preds[i] == c;
        fn += labels[i] == c && preds[i] != c;
      }
      const double precision = tp + fp > 0 ? tp / (tp + fp) : 0.0;
      const double recall = tp + fn > 0 ? tp / (tp + fn) : 0.0;
      const double f1 = precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
      weighted += f1 * (tp + fn) / static_cast<double>(labels.size());
      macro += f1 / static_cast<double>(k);
    }
    worst = std::max({worst, std::abs(weighted_f1(cm) - weighted), std::abs(macro_f1(cm) - macro)});
  }
  report(3, "metric oracle equivalence", worst <= 1e-12, "100 matrices, max abs diff " + fmt(worst * 1e15, 3) + "e-15");
}

// --- 4, 5, 6, 7, 8 --------------------------------------------------------------

struct OracleTally {
  std::size_t runs = 0, violations = 0;
  void add(const ExperimentReport& rep) {
    for (const auto& row : rep.rows) {
      for (const auto& r : row.runs) {
        ++runs;
        if (r.failed || !r.oracle_accuracy || r.accuracy > *r.oracle_accuracy) ++violations;
      }
    }
  }
};

void ablation_ordering(const ExperimentReport& rep, double secs) {
  bool ok = secs < 900.0;
  std::string detail = "full " + fmt(mean_f1(rep.rows[0]));
  for (std::size_t i = 1; i < rep.rows.size(); ++i) {
    const auto& row = rep.rows[i];
    const double delta = mean_f1(rep.rows[0]) - mean_f1(row);
    const std::size_t positive = row.paired ? row.paired->positive : 0;
    ok = ok && row.failures == 0 && rep.rows[0].failures == 0 && delta >= 1.0 && positive >= 4;
    detail += "; " + row.name + " " + fmt(mean_f1(row)) + " delta " + fmt(delta) + " positive " +
              std::to_string(positive) + "/5";
  }
  report(4, "ablation ordering", ok, detail + "; " + fmt(secs, 1) + " s");
}

void heterogeneity_control(const ExperimentReport& rep) {
  bool ok = true;
  std::string detail = "full " + fmt(mean_f1(rep.rows[0]));
  for (std::size_t i = 1; i < rep.rows.size(); ++i) {
    const double gap = std::abs(mean_f1(rep.rows[0]) - mean_f1(rep.rows[i]));
    ok = ok && gap < 2.0;
    detail += "; " + rep.rows[i].name + " |delta| " + fmt(gap);
  }
  report(5, "heterogeneity control", ok, detail);
}

void gate_reliability(const Setup& s, const ExperimentReport& rep) {
  const auto& names = s.sc.corpus.modality_names;
  std::size_t audio = 0, visual = 1;
  for (std::size_t m = 0; m < names.size(); ++m) {
    if (names[m] == "audio") audio = m;
    if (names[m] == "visual") visual = m;
  }
  const double lo = s.sc.truth.config.reliability_low, hi = s.sc.truth.config.reliability_high;
  std::vector<std::size_t> speakers;
  for (const auto& p : s.sc.truth.profiles) {
    if (p.reliability[audio] == lo && p.reliability[visual] == hi) speakers.push_back(p.id);
  }
  double a = 0.0, v = 0.0;
  std::size_t n = 0, seeds_ok = 0;
  for (const auto& r : rep.rows[0].runs) {
    double ra = 0.0, rv = 0.0;
    for (std::size_t sp : speakers) {
      ra += r.gate_mean[audio][sp];
      rv += r.gate_mean[visual][sp];
    }
    seeds_ok += ra < rv;
    a += ra;
    v += rv;
    n += speakers.size();
  }
  const bool ok = n > 0 && a / n < v / n;
  report(6, "gate-reliability correspondence", ok,
         std::to_string(speakers.size()) + " speakers, mean audio gate " + fmt(n ? a / n : NAN, 3) +
             ", mean visual gate " + fmt(n ? v / n : NAN, 3) + ", seeds with audio < visual " +
             std::to_string(seeds_ok) + "/" + std::to_string(rep.rows[0].runs.size()));
}

void sweep_shape(const ExperimentReport& rep) {
  double peak = -1.0, at_zero = NAN, at_two = NAN;
  std::string peak_name, curve;
  for (const auto& row : rep.rows) {
    const double v = mean_f1(row);
    curve += (curve.empty() ? "" : ", ") + row.name + " " + fmt(v);
    if (v > peak) {
      peak = v;
      peak_name = row.name;
    }
    if (row.lambda == 0.0) at_zero = v;
    if (row.lambda == 2.0) at_two = v;
  }
  const bool ok = peak > at_zero && peak - at_two <= 5.0;
  report(7, "lambda sweep shape", ok, curve + "; peak at " + peak_name);
}

// --- 9, 10 ----------------------------------------------------------------------

void determinism_and_resume(const Setup& s) {
  TrainConfig t;
  t.epochs = 6;
  const auto a = run_ablation(s.splits, s.model, t, {100}, 1, &s.sc.truth);
  const auto b = run_ablation(s.splits, s.model, t, {100}, 1, &s.sc.truth);
  const bool same_report = to_json_value(a).dump() == to_json_value(b).dump();

  const auto whole = train(s.splits, s.model, t);
  TrainConfig first = t;
  first.epochs = 3;
  TempDir dir("accept_resume");
  save_checkpoint(train(s.splits, s.model, first).checkpoint, dir / "ck.bin");
  const Checkpoint half = load_checkpoint(dir / "ck.bin");
  const auto rest = train(s.splits, s.model, t, &half);
  const bool same_run = encode_checkpoint(rest.checkpoint) == encode_checkpoint(whole.checkpoint);
  report(9, "determinism and resumption", same_report && same_run,
         std::string("repeat report ") + (same_report ? "identical" : "differs") + ", 3+3 epochs vs 6 epochs " +
             (same_run ? "identical" : "differs"));
}

void round_trips(const Setup& s) {
  TempDir dir("accept_roundtrip");
  write_corpus(s.sc.corpus, dir / "corpus");
  DialogueCorpus back = read_corpus_dir(dir / "corpus", s.sc.corpus.modality_names,
                                        CorpusSchema{s.sc.corpus.num_emotions, s.sc.corpus.num_speakers});
  DialogueCorpus expected = s.sc.corpus;
  expected.synthetic = false;
  const bool csv_ok = back == expected;

  TrainConfig t;
  t.epochs = 2;
  const Checkpoint ck = train(s.splits, s.model, t, nullptr, json{{"split_seed", split_seed}}).checkpoint;
  save_checkpoint(ck, dir / "ck.bin");
  const Checkpoint loaded = load_checkpoint(dir / "ck.bin");
  const bool ck_ok = encode_checkpoint(loaded) == encode_checkpoint(ck) && loaded.rng_state == ck.rng_state &&
                     loaded.adam == ck.adam && same_values(loaded.params, ck.params) &&
                     same_values(loaded.best_params, ck.best_params) && loaded.epoch == ck.epoch &&
                     loaded.metadata == ck.metadata;
  report(10, "data round trips", csv_ok && ck_ok,
         std::string("corpus CSV ") + (csv_ok ? "identical" : "differs") + " (" +
             std::to_string(s.sc.corpus.utterance_count()) + " utterances), checkpoint " +
             (ck_ok ? "identical incl. RNG and optimizer state" : "differs"));
}

}  // namespace

int main() {
  try {
    gradient_soundness();
    mechanism_invariants();
    metric_oracle();

    const Setup het = make_setup(GeneratorConfig{});
    OracleTally oracle;

    auto t0 = Clock::now();
    const auto ablation = run_ablation(het.splits, het.model, TrainConfig{}, seeds, 1, &het.sc.truth);
    ablation_ordering(ablation, seconds_since(t0));
    oracle.add(ablation);

    GeneratorConfig homo_cfg;
    homo_cfg.heterogeneous = false;
    const Setup homo = make_setup(homo_cfg);
    const auto control = run_ablation(homo.splits, homo.model, TrainConfig{}, seeds, 1, &homo.sc.truth);
    heterogeneity_control(control);
    oracle.add(control);

    gate_reliability(het, ablation);

    const auto sweep = lambda_sweep(het.splits, het.model, TrainConfig{}, default_lambda_grid(), seeds, 1, &het.sc.truth);
    sweep_shape(sweep);
    oracle.add(sweep);

    report(8, "oracle dominance", oracle.violations == 0 && oracle.runs > 0,
           std::to_string(oracle.runs) + " runs, " + std::to_string(oracle.violations) +
               " above oracle; oracle test accuracy heterogeneous " +
               fmt(bayes_oracle(het.splits.test, het.sc.truth), 4) + ", homogeneous " +
               fmt(bayes_oracle(homo.splits.test, homo.sc.truth), 4));

    determinism_and_resume(het);
    round_trips(het);
  } catch (const std::exception& e) {
    std::printf("acceptance aborted: %s\n", e.what());
    return 1;
  }
  std::printf("%s: %d criteria failed\n", failures == 0 ? "ACCEPTED" : "NOT ACCEPTED", failures);
  return failures == 0 ? 0 : 1;
}
