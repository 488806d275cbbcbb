#pragma once

// Deterministic mini-batch training with Adam, early stopping on validation
// weighted F1, and exact resumption through checkpoints.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "mlsan/corpus.hpp"
#include "mlsan/errors.hpp"
#include "mlsan/json_io.hpp"
#include "mlsan/layers.hpp"
#include "mlsan/metrics.hpp"
#include "mlsan/synth.hpp"

namespace mlsan {

struct TrainConfig {
  std::size_t epochs = 60;
  std::size_t batch_size = 32;  // utterances; batches are packed from whole dialogues
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double lambda = 0.5;
  std::uint64_t seed = 1;
  Ablation ablation = Ablation::full;
  std::size_t patience = 10;
  bool class_weighting = false;
  double oov_rate = 0.05;

  void validate() const {
    if (batch_size == 0) throw ConfigError("train.batch_size must be positive");
    if (!(learning_rate > 0.0)) throw ConfigError("train.learning_rate must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
      throw ConfigError("train.beta1 and train.beta2 must lie in [0, 1)");
    }
    if (!(epsilon > 0.0)) throw ConfigError("train.epsilon must be positive");
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("train.lambda must be >= 0");
    if (patience == 0) throw ConfigError("train.patience must be positive");
    if (!(oov_rate >= 0.0 && oov_rate < 1.0)) throw ConfigError("train.oov_rate must lie in [0, 1)");
  }

  bool operator==(const TrainConfig&) const = default;
};

inline json to_json_value(const TrainConfig& c) {
  return json{{"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"learning_rate", c.learning_rate},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"epsilon", c.epsilon},
              {"lambda", c.lambda},
              {"seed", c.seed},
              {"ablation", std::string(to_string(c.ablation))},
              {"patience", c.patience},
              {"class_weighting", c.class_weighting},
              {"oov_rate", c.oov_rate}};
}

inline TrainConfig train_config_from_json(const json& j, const std::string& path = "train") {
  TrainConfig c;
  StrictReader r(j, path);
  r.get("epochs", c.epochs);
  r.get("batch_size", c.batch_size);
  r.get("learning_rate", c.learning_rate);
  r.get("beta1", c.beta1);
  r.get("beta2", c.beta2);
  r.get("epsilon", c.epsilon);
  r.get("lambda", c.lambda);
  r.get("seed", c.seed);
  std::string ablation(to_string(c.ablation));
  r.get("ablation", ablation);
  c.ablation = parse_ablation(ablation);
  r.get("patience", c.patience);
  r.get("class_weighting", c.class_weighting);
  r.get("oov_rate", c.oov_rate);
  r.finish();
  return c;
}

// ---------------------------------------------------------------------------
// Batches
// ---------------------------------------------------------------------------

inline Batch make_batch(std::span<const Dialogue* const> dialogues, std::size_t num_modalities,
                        std::span<const std::size_t> modality_dims, std::size_t window) {
  Batch b;
  std::size_t n = 0;
  for (const Dialogue* d : dialogues) n += d->utterances.size();
  if (n == 0) throw ContractError("batch without utterances");
  std::vector<std::vector<double>> feats(num_modalities);
  for (std::size_t m = 0; m < num_modalities; ++m) feats[m].reserve(n * modality_dims[m]);
  std::size_t offset = 0;
  for (const Dialogue* d : dialogues) {
    const std::size_t len = d->utterances.size();
    for (std::size_t i = 0; i < len; ++i) {
      const auto& u = d->utterances[i];
      for (std::size_t m = 0; m < num_modalities; ++m) {
        if (u.features[m].size() != modality_dims[m]) {
          throw DimensionError("utterance feature width " + std::to_string(u.features[m].size()) +
                               " differs from model width " + std::to_string(modality_dims[m]));
        }
        feats[m].insert(feats[m].end(), u.features[m].begin(), u.features[m].end());
      }
      b.speaker_inputs.push_back(static_cast<std::int64_t>(u.speaker));
      b.speaker_targets.push_back(u.speaker);
      b.emotions.push_back(u.emotion);
      auto rows = context_positions(i, len, window);
      for (auto& r : rows) r += offset;
      b.history.push_back(std::move(rows));
    }
    offset += len;
  }
  for (std::size_t m = 0; m < num_modalities; ++m) {
    b.features.emplace_back(Shape{n, modality_dims[m]}, std::move(feats[m]));
  }
  return b;
}

// Groups dialogues (in the given order) into batches of at most batch_size
// utterances; a dialogue longer than batch_size forms its own batch.
inline std::vector<std::vector<const Dialogue*>> pack_batches(const std::vector<const Dialogue*>& order,
                                                              std::size_t batch_size) {
  std::vector<std::vector<const Dialogue*>> out;
  std::size_t count = 0;
  for (const Dialogue* d : order) {
    if (d->utterances.empty()) continue;
    if (out.empty() || count + d->utterances.size() > batch_size) {
      out.emplace_back();
      count = 0;
    }
    out.back().push_back(d);
    count += d->utterances.size();
  }
  return out;
}

inline void check_corpus_fits(const DialogueCorpus& corpus, const ModelConfig& cfg) {
  if (corpus.modality_dims != cfg.modality_dims) {
    auto widths = [](const std::vector<std::size_t>& d) {
      std::string s = "[";
      for (std::size_t i = 0; i < d.size(); ++i) s += (i ? ", " : "") + std::to_string(d[i]);
      return s + "]";
    };
    throw DimensionError("corpus feature widths " + widths(corpus.modality_dims) + " do not match model widths " +
                         widths(cfg.modality_dims));
  }
  if (corpus.num_emotions != cfg.num_emotions) {
    throw DimensionError("corpus has " + std::to_string(corpus.num_emotions) + " emotions, model " +
                         std::to_string(cfg.num_emotions));
  }
  if (corpus.num_speakers > cfg.num_speakers) {
    throw DimensionError("corpus registers " + std::to_string(corpus.num_speakers) +
                         " speakers, model only " + std::to_string(cfg.num_speakers));
  }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct ModulationStats {
  double mean = 0.0;
  double std = 0.0;
  double min = 0.0;
  double max = 0.0;
};

inline ModulationStats modulation_stats(const std::vector<double>& v) {
  ModulationStats s;
  if (v.empty()) return s;
  double sum = 0.0;
  s.min = s.max = v[0];
  for (double x : v) {
    sum += x;
    s.min = std::min(s.min, x);
    s.max = std::max(s.max, x);
  }
  s.mean = sum / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - s.mean) * (x - s.mean);
  s.std = std::sqrt(ss / static_cast<double>(v.size()));
  return s;
}

struct Evaluation {
  std::vector<std::size_t> predictions;
  std::vector<std::size_t> labels;
  std::vector<std::size_t> speakers;
  std::vector<std::size_t> speaker_predictions;
  ConfusionMatrix confusion;
  double weighted_f1 = 0.0;
  double macro_f1 = 0.0;
  double accuracy = 0.0;
  double speaker_accuracy = 0.0;
  std::vector<double> per_class_f1;
  // gate_mean[m][s]: mean gate activation of modality m over speaker s's utterances.
  std::vector<std::vector<double>> gate_mean;
  std::vector<std::size_t> speaker_counts;
  std::vector<ModulationStats> gamma;  // per modality
  std::vector<ModulationStats> beta;
  std::vector<std::vector<double>> fused;  // only when requested
};

inline constexpr std::size_t eval_chunk_dialogues = 64;

inline Evaluation evaluate(const ModelParameters& params, const DialogueCorpus& corpus, Ablation ablation,
                           bool keep_fused = false) {
  const auto& cfg = params.config;
  check_corpus_fits(corpus, cfg);
  NoGradGuard no_grad;
  Evaluation ev;
  const std::size_t M = cfg.num_modalities();
  std::vector<std::vector<double>> gate_sum(M, std::vector<double>(cfg.num_speakers, 0.0));
  ev.speaker_counts.assign(cfg.num_speakers, 0);
  std::vector<std::vector<double>> gammas(M), betas(M);

  std::vector<const Dialogue*> all;
  for (const auto& d : corpus.dialogues) {
    if (!d.utterances.empty()) all.push_back(&d);
  }
  for (std::size_t start = 0; start < all.size(); start += eval_chunk_dialogues) {
    const std::size_t end = std::min(all.size(), start + eval_chunk_dialogues);
    std::vector<const Dialogue*> chunk(all.begin() + static_cast<std::ptrdiff_t>(start),
                                       all.begin() + static_cast<std::ptrdiff_t>(end));
    Batch b = make_batch(chunk, M, cfg.modality_dims, cfg.context_window);
    ForwardPass fp = forward(params, b, ablation);
    auto preds = argmax_rows(fp.emotion_logits);
    auto spk = argmax_rows(fp.speaker_logits);
    const std::size_t dh = cfg.hidden_dim;
    for (std::size_t i = 0; i < b.size(); ++i) {
      ev.predictions.push_back(preds[i]);
      ev.labels.push_back(b.emotions[i]);
      ev.speakers.push_back(b.speaker_targets[i]);
      ev.speaker_predictions.push_back(spk[i]);
      const std::size_t s = b.speaker_targets[i];
      ++ev.speaker_counts[s];
      for (std::size_t m = 0; m < M; ++m) {
        double g = 0.0;
        for (std::size_t j = 0; j < dh; ++j) g += fp.gates[m].at(i, j);
        gate_sum[m][s] += g / static_cast<double>(dh);
      }
      if (keep_fused) {
        auto row = fp.fused.data().subspan(i * fp.fused.cols(), fp.fused.cols());
        ev.fused.emplace_back(row.begin(), row.end());
      }
    }
    for (std::size_t m = 0; m < M; ++m) {
      if (fp.film[m].gamma.defined()) {
        gammas[m].insert(gammas[m].end(), fp.film[m].gamma.data().begin(), fp.film[m].gamma.data().end());
        betas[m].insert(betas[m].end(), fp.film[m].beta.data().begin(), fp.film[m].beta.data().end());
      }
    }
  }
  if (ev.labels.empty()) throw ContractError("evaluation on an empty corpus");

  ev.confusion = confusion_matrix(ev.predictions, ev.labels, cfg.num_emotions);
  ev.weighted_f1 = weighted_f1(ev.confusion);
  ev.macro_f1 = macro_f1(ev.confusion);
  ev.accuracy = accuracy(ev.confusion);
  ev.per_class_f1 = per_class_f1(ev.confusion);
  std::size_t spk_correct = 0;
  for (std::size_t i = 0; i < ev.speakers.size(); ++i) spk_correct += ev.speakers[i] == ev.speaker_predictions[i];
  ev.speaker_accuracy = static_cast<double>(spk_correct) / static_cast<double>(ev.speakers.size());
  ev.gate_mean.assign(M, std::vector<double>(cfg.num_speakers, std::numeric_limits<double>::quiet_NaN()));
  for (std::size_t m = 0; m < M; ++m) {
    for (std::size_t s = 0; s < cfg.num_speakers; ++s) {
      if (ev.speaker_counts[s]) ev.gate_mean[m][s] = gate_sum[m][s] / static_cast<double>(ev.speaker_counts[s]);
    }
    // Identity calibration when FiLM is ablated.
    if (gammas[m].empty()) {
      ev.gamma.push_back({1.0, 0.0, 1.0, 1.0});
      ev.beta.push_back({0.0, 0.0, 0.0, 0.0});
    } else {
      ev.gamma.push_back(modulation_stats(gammas[m]));
      ev.beta.push_back(modulation_stats(betas[m]));
    }
  }
  return ev;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamState {
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;

  bool operator==(const AdamState&) const = default;
};

inline AdamState init_adam(const ModelParameters& params) {
  AdamState s;
  for (const auto& p : params.named()) {
    s.m.emplace_back(p.tensor.size(), 0.0);
    s.v.emplace_back(p.tensor.size(), 0.0);
  }
  return s;
}

// One bias-corrected Adam update of a single array. `step` counts from 1.
inline void adam_update(std::span<double> param, std::span<const double> grad, std::span<double> m,
                        std::span<double> v, std::uint64_t step, const TrainConfig& cfg) {
  if (step == 0) throw ContractError("Adam step index starts at 1");
  if (param.size() != grad.size() || m.size() != param.size() || v.size() != param.size()) {
    throw DimensionError("Adam state shapes do not agree with the parameter");
  }
  const double t = static_cast<double>(step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < param.size(); ++i) {
    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
    const double mhat = m[i] / c1;
    const double vhat = v[i] / c2;
    param[i] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.epsilon);
  }
}

// Advances the step counter and updates every unfrozen parameter.
inline void adam_step(ModelParameters& params, AdamState& state, const TrainConfig& cfg) {
  auto named = params.named();
  for (auto& p : named) {
    for (double g : p.tensor.grad()) {
      if (!std::isfinite(g)) throw NumericalError("non-finite gradient in parameter " + p.name);
    }
  }
  ++state.step;
  for (std::size_t k = 0; k < named.size(); ++k) {
    if (is_frozen(param_group(named[k].name), cfg.ablation)) continue;
    adam_update(named[k].tensor.mutable_data(), named[k].tensor.grad(), state.m[k], state.v[k], state.step, cfg);
  }
}

// ---------------------------------------------------------------------------
// Checkpoints and training
// ---------------------------------------------------------------------------

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double train_l_erc = 0.0;
  double train_l_spk = 0.0;
  double validation_weighted_f1 = 0.0;

  bool operator==(const EpochRecord&) const = default;
};

struct Checkpoint {
  ModelConfig model;
  TrainConfig train;
  json metadata = json::object();  // caller-supplied provenance (split settings, corpus)
  ModelParameters params;
  ModelParameters best_params;
  AdamState adam;
  std::size_t epoch = 0;  // epochs completed
  std::string rng_state;
  double best_validation_weighted_f1 = -1.0;
  std::size_t best_epoch = 0;
  std::size_t epochs_since_best = 0;
  bool stopped = false;
  std::vector<EpochRecord> curve;  // every epoch completed so far
};

inline bool same_values(const ModelParameters& a, const ModelParameters& b) {
  auto na = a.named();
  auto nb = b.named();
  if (na.size() != nb.size()) return false;
  for (std::size_t k = 0; k < na.size(); ++k) {
    if (na[k].name != nb[k].name || na[k].tensor.shape() != nb[k].tensor.shape()) return false;
    auto x = na[k].tensor.data();
    auto y = nb[k].tensor.data();
    if (!std::equal(x.begin(), x.end(), y.begin())) return false;
  }
  return true;
}

inline bool operator==(const Checkpoint& a, const Checkpoint& b) {
  return a.model == b.model && a.train == b.train && a.metadata == b.metadata && same_values(a.params, b.params) &&
         same_values(a.best_params, b.best_params) && a.adam == b.adam && a.epoch == b.epoch &&
         a.rng_state == b.rng_state && a.best_validation_weighted_f1 == b.best_validation_weighted_f1 &&
         a.best_epoch == b.best_epoch && a.epochs_since_best == b.epochs_since_best && a.stopped == b.stopped &&
         a.curve == b.curve;
}

inline std::string serialize_rng(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

inline std::mt19937_64 deserialize_rng(const std::string& state) {
  std::mt19937_64 rng;
  std::istringstream is(state);
  is >> rng;
  if (!is) throw LoadError("corrupt RNG state");
  return rng;
}

inline std::mt19937_64 training_rng(std::uint64_t seed) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), 0x7a17u};
  return std::mt19937_64(seq);
}

inline Checkpoint init_model(const ModelConfig& model, const TrainConfig& train) {
  Checkpoint ck;
  ck.model = model;
  ck.train = train;
  ck.params = init_parameters(model, train.seed);
  ck.best_params = ck.params.clone();
  ck.adam = init_adam(ck.params);
  ck.rng_state = serialize_rng(training_rng(train.seed));
  return ck;
}

// Inverse-frequency weights N / (E * count_e); classes absent from train get 1.
inline std::vector<double> inverse_frequency_weights(const DialogueCorpus& corpus) {
  const auto hist = corpus.emotion_histogram();
  const double n = static_cast<double>(corpus.utterance_count());
  std::vector<double> w(hist.size(), 1.0);
  for (std::size_t e = 0; e < hist.size(); ++e) {
    if (hist[e]) w[e] = n / (static_cast<double>(hist.size()) * static_cast<double>(hist[e]));
  }
  return w;
}

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<EpochRecord> curve;  // epochs run by this call
};

// Trains from scratch, or continues `resume` (whose configuration must match
// apart from the epoch budget) up to cfg.epochs completed epochs.
inline TrainResult train(const CorpusSplits& splits, const ModelConfig& model, const TrainConfig& cfg,
                         const Checkpoint* resume = nullptr, json metadata = json::object()) {
  model.validate();
  cfg.validate();
  if (splits.train.utterance_count() == 0) throw ConfigError("training split is empty");
  if (splits.validation.utterance_count() == 0) throw ConfigError("validation split is empty");
  check_corpus_fits(splits.train, model);
  check_corpus_fits(splits.validation, model);

  TrainResult result;
  Checkpoint& ck = result.checkpoint;
  if (resume) {
    TrainConfig a = resume->train, b = cfg;
    a.epochs = b.epochs = 0;
    if (!(resume->model == model) || !(a == b)) {
      throw ConfigError("checkpoint configuration differs from the requested run");
    }
    ck = *resume;
    ck.params = resume->params.clone();
    ck.best_params = resume->best_params.clone();
    ck.train = cfg;
  } else {
    ck = init_model(model, cfg);
    ck.metadata = std::move(metadata);
  }

  std::mt19937_64 rng = deserialize_rng(ck.rng_state);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<double> weights;
  if (cfg.class_weighting) weights = inverse_frequency_weights(splits.train);

  std::vector<const Dialogue*> order(splits.train.dialogues.size());
  while (ck.epoch < cfg.epochs && !ck.stopped) {
    // Each epoch shuffles from corpus order so the RNG stream alone fixes it.
    for (std::size_t k = 0; k < order.size(); ++k) order[k] = &splits.train.dialogues[k];
    for (std::size_t i = order.size(); i > 1; --i) {
      std::uniform_int_distribution<std::size_t> pick(0, i - 1);
      std::swap(order[i - 1], order[pick(rng)]);
    }
    const auto batches = pack_batches(order, cfg.batch_size);
    EpochRecord rec;
    rec.epoch = ck.epoch;
    std::size_t seen = 0;
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      Batch b = make_batch(batches[bi], model.num_modalities(), model.modality_dims, model.context_window);
      for (auto& id : b.speaker_inputs) {
        if (unit(rng) < cfg.oov_rate) id = static_cast<std::int64_t>(model.oov_row());
      }
      for (auto& p : ck.params.named()) p.tensor.zero_grad();
      ForwardPass fp = forward(ck.params, b, cfg.ablation);
      LossBreakdown loss = batch_loss(fp, b, cfg.lambda, cfg.ablation, weights);
      if (!std::isfinite(loss.total.item())) {
        throw NumericalError("non-finite loss at epoch " + std::to_string(ck.epoch) + ", batch " +
                             std::to_string(bi));
      }
      backward(loss.total);
      adam_step(ck.params, ck.adam, cfg);
      const double n = static_cast<double>(b.size());
      rec.train_loss += loss.total.item() * n;
      rec.train_l_erc += loss.l_erc.item() * n;
      rec.train_l_spk += loss.l_spk.item() * n;
      seen += b.size();
    }
    rec.train_loss /= static_cast<double>(seen);
    rec.train_l_erc /= static_cast<double>(seen);
    rec.train_l_spk /= static_cast<double>(seen);
    rec.validation_weighted_f1 = evaluate(ck.params, splits.validation, cfg.ablation).weighted_f1;

    if (rec.validation_weighted_f1 > ck.best_validation_weighted_f1) {
      ck.best_validation_weighted_f1 = rec.validation_weighted_f1;
      ck.best_params = ck.params.clone();
      ck.best_epoch = ck.epoch;
      ck.epochs_since_best = 0;
    } else {
      ++ck.epochs_since_best;
    }
    ++ck.epoch;
    if (ck.epochs_since_best >= cfg.patience) ck.stopped = true;
    ck.rng_state = serialize_rng(rng);
    ck.curve.push_back(rec);
    result.curve.push_back(rec);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoint file format (little-endian):
//   8 bytes   magic "MLSANCKP"
//   u32       format version
//   u64       length L of the metadata JSON, then L bytes of UTF-8 JSON
//   u32       array count, then per array:
//               u16 name length, name bytes, u8 rank, u64 dims[rank],
//               f64 values[prod(dims)]
//   u64       FNV-1a 64 hash of every preceding byte
// ---------------------------------------------------------------------------

inline constexpr char checkpoint_magic[8] = {'M', 'L', 'S', 'A', 'N', 'C', 'K', 'P'};
inline constexpr std::uint32_t checkpoint_version = 1;

namespace detail {

inline std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

class ByteWriter {
 public:
  template <typename T>
  void put(T v) {
    char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    buf_.append(b, sizeof(T));
  }
  void put_bytes(std::string_view s) { buf_.append(s); }
  std::string& buffer() { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view s) : s_(s) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, s_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string_view bytes(std::size_t n) {
    need(n);
    auto out = s_.substr(pos_, n);
    pos_ += n;
    return out;
  }
  std::size_t remaining() const { return s_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (s_.size() - pos_ < n) throw LoadError("checkpoint truncated");
  }
  std::string_view s_;
  std::size_t pos_ = 0;
};

inline json curve_to_json(const std::vector<EpochRecord>& curve) {
  json arr = json::array();
  for (const auto& r : curve) {
    arr.push_back({{"epoch", r.epoch},
                   {"train_loss", r.train_loss},
                   {"train_l_erc", r.train_l_erc},
                   {"train_l_spk", r.train_l_spk},
                   {"validation_weighted_f1", r.validation_weighted_f1}});
  }
  return arr;
}

inline std::vector<EpochRecord> curve_from_json(const json& arr) {
  std::vector<EpochRecord> out;
  for (const auto& j : arr) {
    out.push_back({j.at("epoch").get<std::size_t>(), j.at("train_loss").get<double>(),
                   j.at("train_l_erc").get<double>(), j.at("train_l_spk").get<double>(),
                   j.at("validation_weighted_f1").get<double>()});
  }
  return out;
}

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ck) {
  json meta{{"model", to_json_value(ck.model)},
            {"train", to_json_value(ck.train)},
            {"metadata", ck.metadata},
            {"epoch", ck.epoch},
            {"adam_step", ck.adam.step},
            {"rng_state", ck.rng_state},
            {"best_validation_weighted_f1", ck.best_validation_weighted_f1},
            {"best_epoch", ck.best_epoch},
            {"epochs_since_best", ck.epochs_since_best},
            {"stopped", ck.stopped},
            {"curve", detail::curve_to_json(ck.curve)}};
  const std::string meta_text = meta.dump();

  detail::ByteWriter w;
  w.put_bytes(std::string_view(checkpoint_magic, 8));
  w.put<std::uint32_t>(checkpoint_version);
  w.put<std::uint64_t>(meta_text.size());
  w.put_bytes(meta_text);

  const auto params = ck.params.named();
  const auto best = ck.best_params.named();
  struct Entry {
    std::string name;
    Shape shape;
    std::span<const double> values;
  };
  std::vector<Entry> entries;
  for (std::size_t k = 0; k < params.size(); ++k) {
    entries.push_back({"param/" + params[k].name, params[k].tensor.shape(), params[k].tensor.data()});
  }
  for (std::size_t k = 0; k < best.size(); ++k) {
    entries.push_back({"best/" + best[k].name, best[k].tensor.shape(), best[k].tensor.data()});
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    entries.push_back({"adam_m/" + params[k].name, params[k].tensor.shape(), ck.adam.m[k]});
    entries.push_back({"adam_v/" + params[k].name, params[k].tensor.shape(), ck.adam.v[k]});
  }
  w.put<std::uint32_t>(static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    w.put<std::uint16_t>(static_cast<std::uint16_t>(e.name.size()));
    w.put_bytes(e.name);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(e.shape.size()));
    for (std::size_t d : e.shape) w.put<std::uint64_t>(d);
    for (double v : e.values) w.put<double>(v);
  }
  const std::uint64_t hash = detail::fnv1a(w.buffer());
  w.put<std::uint64_t>(hash);
  return std::move(w.buffer());
}

inline Checkpoint decode_checkpoint(std::string_view bytes) {
  if (bytes.size() < 8 + 4 + 8) throw LoadError("checkpoint truncated");
  if (bytes.substr(0, 8) != std::string_view(checkpoint_magic, 8)) throw LoadError("not a checkpoint file");
  const std::string_view body = bytes.substr(0, bytes.size() - 8);
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + bytes.size() - 8, 8);
  detail::ByteReader r(body);
  r.bytes(8);
  const auto version = r.get<std::uint32_t>();
  if (version != checkpoint_version) {
    throw LoadError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                    std::to_string(checkpoint_version) + ")");
  }
  if (detail::fnv1a(body) != stored) throw LoadError("checkpoint checksum mismatch (truncated or corrupted)");

  Checkpoint ck;
  try {
    const auto meta_len = r.get<std::uint64_t>();
    const json meta = json::parse(r.bytes(meta_len));
    ck.model = model_config_from_json(meta.at("model"));
    ck.train = train_config_from_json(meta.at("train"));
    ck.metadata = meta.at("metadata");
    ck.epoch = meta.at("epoch").get<std::size_t>();
    ck.adam.step = meta.at("adam_step").get<std::uint64_t>();
    ck.rng_state = meta.at("rng_state").get<std::string>();
    ck.best_validation_weighted_f1 = meta.at("best_validation_weighted_f1").get<double>();
    ck.best_epoch = meta.at("best_epoch").get<std::size_t>();
    ck.epochs_since_best = meta.at("epochs_since_best").get<std::size_t>();
    ck.stopped = meta.at("stopped").get<bool>();
    ck.curve = detail::curve_from_json(meta.at("curve"));
  } catch (const json::exception& e) {
    throw LoadError(std::string("checkpoint metadata invalid: ") + e.what());
  } catch (const ConfigError& e) {
    throw LoadError(std::string("checkpoint configuration invalid: ") + e.what());
  }
  deserialize_rng(ck.rng_state);

  // Shapes come from the configuration; the file must agree exactly.
  ck.params = init_parameters(ck.model, 0);
  ck.best_params = init_parameters(ck.model, 0);
  ck.adam = AdamState{ck.adam.step, {}, {}};
  auto params = ck.params.named();
  auto best = ck.best_params.named();
  const std::size_t n = params.size();
  ck.adam.m.resize(n);
  ck.adam.v.resize(n);

  const auto count = r.get<std::uint32_t>();
  if (count != 4 * n) {
    throw LoadError("checkpoint holds " + std::to_string(count) + " arrays, configuration needs " +
                    std::to_string(4 * n));
  }
  auto read_array = [&r](const std::string& expected_name, const Shape& expected_shape, std::span<double> out) {
    const auto len = r.get<std::uint16_t>();
    const std::string name(r.bytes(len));
    if (name != expected_name) throw LoadError("checkpoint array '" + name + "' where '" + expected_name + "' expected");
    const auto rank = r.get<std::uint8_t>();
    Shape shape(rank);
    for (auto& d : shape) d = r.get<std::uint64_t>();
    if (shape != expected_shape) {
      throw LoadError("checkpoint array " + name + " has shape " + shape_string(shape) + ", expected " +
                      shape_string(expected_shape));
    }
    for (double& v : out) v = r.get<double>();
  };
  for (std::size_t k = 0; k < n; ++k) {
    read_array("param/" + params[k].name, params[k].tensor.shape(), params[k].tensor.mutable_data());
  }
  for (std::size_t k = 0; k < n; ++k) {
    read_array("best/" + best[k].name, best[k].tensor.shape(), best[k].tensor.mutable_data());
  }
  for (std::size_t k = 0; k < n; ++k) {
    ck.adam.m[k].assign(params[k].tensor.size(), 0.0);
    ck.adam.v[k].assign(params[k].tensor.size(), 0.0);
    read_array("adam_m/" + params[k].name, params[k].tensor.shape(), ck.adam.m[k]);
    read_array("adam_v/" + params[k].name, params[k].tensor.shape(), ck.adam.v[k]);
  }
  if (r.remaining() != 0) throw LoadError("trailing bytes after checkpoint arrays");
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  const std::string bytes = encode_checkpoint(ck);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for checkpoint " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

}  // namespace mlsan
