#pragma once

// Speaker-adaptive layer stack: speaker embedding, FiLM input calibration,
// causal context encoder, speaker-conditioned gate, concatenation fusion,
// emotion / speaker heads and the joint objective.
//
// All layer functions operate on batches: row i of every [N x .] tensor is
// utterance i of the batch. A single utterance is simply N = 1.

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mlsan/errors.hpp"
#include "mlsan/gradcheck.hpp"
#include "mlsan/tensor.hpp"

namespace mlsan {

struct ModelConfig {
  std::size_t num_speakers = 6;
  std::size_t num_emotions = 4;
  std::vector<std::string> modality_names{"audio", "visual"};
  std::vector<std::size_t> modality_dims{12, 12};
  std::size_t speaker_dim = 16;
  std::size_t hidden_dim = 32;
  std::size_t context_window = 4;
  double gate_bias_init = 2.0;

  std::size_t num_modalities() const { return modality_dims.size(); }
  std::size_t fused_dim() const { return num_modalities() * hidden_dim; }
  std::size_t oov_row() const { return num_speakers; }

  void validate() const {
    if (num_speakers == 0) throw ConfigError("model.num_speakers must be positive");
    if (num_emotions == 0) throw ConfigError("model.num_emotions must be positive");
    if (modality_dims.empty()) throw ConfigError("model needs at least one modality");
    if (modality_names.size() != modality_dims.size()) {
      throw ConfigError("model.modality_names and model.modality_dims differ in length");
    }
    for (std::size_t d : modality_dims) {
      if (d == 0) throw ConfigError("model.modality_dims entries must be positive");
    }
    if (speaker_dim == 0) throw ConfigError("model.speaker_dim must be positive");
    if (hidden_dim == 0) throw ConfigError("model.hidden_dim must be positive");
    if (!std::isfinite(gate_bias_init)) throw ConfigError("model.gate_bias_init must be finite");
  }

  bool operator==(const ModelConfig&) const = default;
};

enum class Ablation { full, no_film, no_gate, no_aux };

inline std::string_view to_string(Ablation a) {
  switch (a) {
    case Ablation::full: return "full";
    case Ablation::no_film: return "no_film";
    case Ablation::no_gate: return "no_gate";
    case Ablation::no_aux: return "no_aux";
  }
  return "full";
}

inline Ablation parse_ablation(std::string_view name) {
  if (name == "full") return Ablation::full;
  if (name == "no_film") return Ablation::no_film;
  if (name == "no_gate") return Ablation::no_gate;
  if (name == "no_aux") return Ablation::no_aux;
  throw ConfigError("unknown ablation '" + std::string(name) +
                    "' (expected full, no_film, no_gate or no_aux)");
}

inline constexpr Ablation all_ablations[] = {Ablation::full, Ablation::no_film, Ablation::no_gate,
                                            Ablation::no_aux};

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

struct FilmParams {
  Tensor w_gamma;  // [d_spk x d_m]
  Tensor b_gamma;  // [d_m]
  Tensor w_beta;   // [d_spk x d_m]
  Tensor b_beta;   // [d_m]
};

struct EncoderParams {
  Tensor weight;  // [2 d_m x d_h]; rows 0..d_m-1 read the utterance, the rest its history
  Tensor bias;    // [d_h]
};

struct GateParams {
  Tensor weight;  // [d_spk x d_h]
  Tensor bias;    // [d_h]
};

struct AffineParams {
  Tensor weight;  // [in x out]
  Tensor bias;    // [out]
};

struct ModalityParams {
  FilmParams film;
  EncoderParams encoder;
  GateParams gate;
};

enum class ParamGroup { embedding, film, encoder, gate, emotion_head, speaker_head };

struct ModelParameters {
  ModelConfig config;
  Tensor speaker_embedding;  // [(num_speakers + 1) x d_spk], last row is the OOV row
  std::vector<ModalityParams> modalities;
  AffineParams emotion_head;  // [fused x num_emotions]
  AffineParams speaker_head;  // [fused x num_speakers]

  // Stable enumeration order; names are unique.
  std::vector<NamedTensor> named() const {
    std::vector<NamedTensor> out;
    out.push_back({"speaker_embedding", speaker_embedding});
    for (std::size_t m = 0; m < modalities.size(); ++m) {
      const std::string p = config.modality_names[m];
      const auto& mp = modalities[m];
      out.push_back({p + ".film.w_gamma", mp.film.w_gamma});
      out.push_back({p + ".film.b_gamma", mp.film.b_gamma});
      out.push_back({p + ".film.w_beta", mp.film.w_beta});
      out.push_back({p + ".film.b_beta", mp.film.b_beta});
      out.push_back({p + ".encoder.weight", mp.encoder.weight});
      out.push_back({p + ".encoder.bias", mp.encoder.bias});
      out.push_back({p + ".gate.weight", mp.gate.weight});
      out.push_back({p + ".gate.bias", mp.gate.bias});
    }
    out.push_back({"emotion_head.weight", emotion_head.weight});
    out.push_back({"emotion_head.bias", emotion_head.bias});
    out.push_back({"speaker_head.weight", speaker_head.weight});
    out.push_back({"speaker_head.bias", speaker_head.bias});
    return out;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : named()) n += p.tensor.size();
    return n;
  }

  // Deep copy: the clone shares no storage with this set.
  ModelParameters clone() const {
    ModelParameters c;
    c.config = config;
    c.speaker_embedding = speaker_embedding.clone();
    for (const auto& mp : modalities) {
      c.modalities.push_back({{mp.film.w_gamma.clone(), mp.film.b_gamma.clone(), mp.film.w_beta.clone(),
                               mp.film.b_beta.clone()},
                              {mp.encoder.weight.clone(), mp.encoder.bias.clone()},
                              {mp.gate.weight.clone(), mp.gate.bias.clone()}});
    }
    c.emotion_head = {emotion_head.weight.clone(), emotion_head.bias.clone()};
    c.speaker_head = {speaker_head.weight.clone(), speaker_head.bias.clone()};
    return c;
  }
};

inline ParamGroup param_group(std::string_view name) {
  if (name == "speaker_embedding") return ParamGroup::embedding;
  if (name.find(".film.") != std::string_view::npos) return ParamGroup::film;
  if (name.find(".encoder.") != std::string_view::npos) return ParamGroup::encoder;
  if (name.find(".gate.") != std::string_view::npos) return ParamGroup::gate;
  if (name.starts_with("emotion_head.")) return ParamGroup::emotion_head;
  return ParamGroup::speaker_head;
}

// Whether an ablation pins (freezes) a parameter group.
inline bool is_frozen(ParamGroup group, Ablation ablation) {
  switch (ablation) {
    case Ablation::no_film: return group == ParamGroup::film;
    case Ablation::no_gate: return group == ParamGroup::gate;
    case Ablation::no_aux: return group == ParamGroup::speaker_head;
    case Ablation::full: return false;
  }
  return false;
}

// Closed-form scalar count for a configuration.
inline std::size_t parameter_census(const ModelConfig& c) {
  std::size_t n = (c.num_speakers + 1) * c.speaker_dim;
  for (std::size_t d : c.modality_dims) {
    n += 2 * (c.speaker_dim * d + d);                 // FiLM gamma, beta
    n += 2 * d * c.hidden_dim + c.hidden_dim;         // encoder
    n += c.speaker_dim * c.hidden_dim + c.hidden_dim; // gate
  }
  n += c.fused_dim() * c.num_emotions + c.num_emotions;
  n += c.fused_dim() * c.num_speakers + c.num_speakers;
  return n;
}

inline std::size_t trainable_census(const ModelParameters& params, Ablation ablation) {
  std::size_t n = 0;
  for (const auto& p : params.named()) {
    if (!is_frozen(param_group(p.name), ablation)) n += p.tensor.size();
  }
  return n;
}

// Initialization: FiLM at identity (zero projections, unit gamma bias, zero
// beta bias); gate bias at config.gate_bias_init; embedding rows uniform in
// +-1 with the OOV row set to the mean of the speaker rows; every other weight
// uniform in +-1/sqrt(fan_in); remaining biases zero.
inline ModelParameters init_parameters(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), 0x1417u};
  std::mt19937_64 rng(seq);

  auto uniform = [&rng](Shape shape, double bound) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<double> v(shape_size(shape));
    for (double& x : v) x = dist(rng);
    return Tensor(std::move(shape), std::move(v), true);
  };
  auto fan = [](std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); };

  ModelParameters p;
  p.config = config;
  {
    const std::size_t s = config.num_speakers, d = config.speaker_dim;
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    std::vector<double> rows((s + 1) * d, 0.0);
    for (std::size_t i = 0; i < s * d; ++i) rows[i] = dist(rng);
    for (std::size_t j = 0; j < d; ++j) {
      double m = 0.0;
      for (std::size_t i = 0; i < s; ++i) m += rows[i * d + j];
      rows[s * d + j] = m / static_cast<double>(s);
    }
    p.speaker_embedding = Tensor(Shape{s + 1, d}, std::move(rows), true);
  }
  const std::size_t ds = config.speaker_dim, dh = config.hidden_dim;
  for (std::size_t dm : config.modality_dims) {
    ModalityParams mp;
    mp.film.w_gamma = Tensor::zeros({ds, dm}, true);
    mp.film.b_gamma = Tensor::full({dm}, 1.0, true);
    mp.film.w_beta = Tensor::zeros({ds, dm}, true);
    mp.film.b_beta = Tensor::zeros({dm}, true);
    mp.encoder.weight = uniform({2 * dm, dh}, fan(2 * dm));
    mp.encoder.bias = Tensor::zeros({dh}, true);
    mp.gate.weight = uniform({ds, dh}, fan(ds));
    mp.gate.bias = Tensor::full({dh}, config.gate_bias_init, true);
    p.modalities.push_back(std::move(mp));
  }
  const std::size_t fused = config.fused_dim();
  p.emotion_head = {uniform({fused, config.num_emotions}, fan(fused)),
                    Tensor::zeros({config.num_emotions}, true)};
  p.speaker_head = {uniform({fused, config.num_speakers}, fan(fused)),
                    Tensor::zeros({config.num_speakers}, true)};
  return p;
}

// ---------------------------------------------------------------------------
// Layer operations
// ---------------------------------------------------------------------------

// Looks up embedding rows; ids at or beyond num_speakers map to the OOV row.
inline Tensor embed_speaker(const Tensor& table, std::span<const std::int64_t> speaker_ids,
                            std::size_t num_speakers) {
  if (table.rank() != 2 || table.shape()[0] != num_speakers + 1) {
    throw DimensionError("embedding table " + shape_string(table.shape()) + " does not hold " +
                         std::to_string(num_speakers) + " speakers plus an OOV row");
  }
  std::vector<std::size_t> rows;
  rows.reserve(speaker_ids.size());
  for (std::int64_t id : speaker_ids) {
    if (id < 0) throw IndexError("negative speaker id " + std::to_string(id));
    rows.push_back(static_cast<std::size_t>(id) < num_speakers ? static_cast<std::size_t>(id)
                                                               : num_speakers);
  }
  return gather_rows(table, rows);
}

struct FilmOutput {
  Tensor calibrated;  // gamma (.) x + beta
  Tensor gamma;
  Tensor beta;
};

inline FilmOutput film_modulate(const Tensor& x, const Tensor& embedding, const FilmParams& film) {
  if (x.rank() != 2 || embedding.rank() != 2 || x.shape()[0] != embedding.shape()[0]) {
    throw DimensionError("film_modulate: features " + shape_string(x.shape()) + " and embeddings " +
                         shape_string(embedding.shape()) + " must be row-aligned matrices");
  }
  if (film.w_gamma.shape()[1] != x.shape()[1] || film.w_gamma.shape()[0] != embedding.shape()[1]) {
    throw DimensionError("film_modulate: projection " + shape_string(film.w_gamma.shape()) +
                         " does not map embedding width " + std::to_string(embedding.shape()[1]) +
                         " to feature width " + std::to_string(x.shape()[1]));
  }
  FilmOutput out;
  out.gamma = add(matmul(embedding, film.w_gamma), film.b_gamma);
  out.beta = add(matmul(embedding, film.w_beta), film.b_beta);
  out.calibrated = add(mul(out.gamma, x), out.beta);
  return out;
}

// History rows (within one dialogue) feeding position `position`: the previous
// `window` utterances, oldest first. Causal: never includes `position` or later.
inline std::vector<std::size_t> context_positions(std::size_t position, std::size_t dialogue_length,
                                                  std::size_t window) {
  if (position >= dialogue_length) {
    throw IndexError("position " + std::to_string(position) + " outside dialogue of length " +
                     std::to_string(dialogue_length));
  }
  std::vector<std::size_t> rows;
  const std::size_t first = position > window ? position - window : 0;
  for (std::size_t j = first; j < position; ++j) rows.push_back(j);
  return rows;
}

// h = ReLU([x_i , mean(history of x_i)] . W + b)
inline Tensor context_encode(const Tensor& calibrated,
                             const std::vector<std::vector<std::size_t>>& history,
                             const EncoderParams& encoder) {
  if (history.size() != calibrated.rows()) {
    throw DimensionError("context_encode: " + std::to_string(history.size()) +
                         " history lists for " + std::to_string(calibrated.rows()) + " rows");
  }
  if (encoder.weight.shape()[0] != 2 * calibrated.cols()) {
    throw DimensionError("context_encode: encoder " + shape_string(encoder.weight.shape()) +
                         " expects input width " + std::to_string(encoder.weight.shape()[0]) +
                         ", features are " + std::to_string(calibrated.cols()) + " wide");
  }
  Tensor context = mean_rows(calibrated, history);
  return relu(add(matmul(concat_cols(calibrated, context), encoder.weight), encoder.bias));
}

struct GateOutput {
  Tensor gated;
  Tensor gate;
};

// g = sigmoid(e . W_gate + b_gate); returns (g (.) h, g).
inline GateOutput speaker_gate_modulate(const Tensor& hidden, const Tensor& embedding,
                                        const GateParams& gate) {
  if (gate.weight.shape()[0] != embedding.cols() || gate.weight.shape()[1] != hidden.cols() ||
      hidden.rows() != embedding.rows()) {
    throw DimensionError("speaker_gate_modulate: gate " + shape_string(gate.weight.shape()) +
                         " incompatible with embeddings " + shape_string(embedding.shape()) +
                         " and features " + shape_string(hidden.shape()));
  }
  GateOutput out;
  out.gate = sigmoid(add(matmul(embedding, gate.weight), gate.bias));
  out.gated = mul(out.gate, hidden);
  return out;
}

inline Tensor affine(const Tensor& x, const AffineParams& p) {
  if (x.rank() != 2 || x.cols() != p.weight.shape()[0]) {
    throw DimensionError("affine: input " + shape_string(x.shape()) + " does not match weight " +
                         shape_string(p.weight.shape()));
  }
  return add(matmul(x, p.weight), p.bias);
}

inline Tensor fuse(std::span<const Tensor> gated, std::size_t expected_modalities) {
  if (gated.size() != expected_modalities) {
    throw ContractError("fusion expects " + std::to_string(expected_modalities) +
                        " modalities, got " + std::to_string(gated.size()));
  }
  for (const auto& g : gated) {
    if (!g.defined()) throw ContractError("fusion input missing for a modality");
  }
  return concat_cols(gated);
}

inline Tensor fuse_and_classify(std::span<const Tensor> gated, const AffineParams& emotion_head,
                                std::size_t expected_modalities) {
  return affine(fuse(gated, expected_modalities), emotion_head);
}

inline Tensor speaker_head(const Tensor& fused, const AffineParams& head) { return affine(fused, head); }

struct LossBreakdown {
  Tensor l_erc;
  Tensor l_spk;
  double lambda = 0.0;
  Tensor total;
};

// total = L_erc + lambda * L_spk, both softmax cross-entropies.
inline LossBreakdown total_loss(const Tensor& emotion_logits, std::span<const std::size_t> emotions,
                                const Tensor& speaker_logits, std::span<const std::size_t> speakers,
                                double lambda, std::span<const double> emotion_weights = {}) {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) {
    throw ConfigError("lambda must be finite and non-negative, got " + std::to_string(lambda));
  }
  LossBreakdown out;
  out.lambda = lambda;
  out.l_erc = softmax_cross_entropy(emotion_logits, emotions, emotion_weights);
  out.l_spk = softmax_cross_entropy(speaker_logits, speakers);
  out.total = add(out.l_erc, scale(out.l_spk, lambda));
  return out;
}

// ---------------------------------------------------------------------------
// Whole-model forward
// ---------------------------------------------------------------------------

struct Batch {
  std::vector<Tensor> features;                        // per modality [N x d_m], constants
  std::vector<std::int64_t> speaker_inputs;            // ids fed to the embedding (may be OOV)
  std::vector<std::size_t> speaker_targets;            // true speaker ids
  std::vector<std::size_t> emotions;
  std::vector<std::vector<std::size_t>> history;       // batch rows feeding each row's context

  std::size_t size() const { return emotions.size(); }
};

struct ForwardPass {
  Tensor embeddings;
  std::vector<FilmOutput> film;
  std::vector<Tensor> hidden;
  std::vector<Tensor> gates;
  std::vector<Tensor> gated;
  Tensor fused;
  Tensor emotion_logits;
  Tensor speaker_logits;
};

// Ablation surgery: no_film uses x directly (the identity calibration),
// no_gate uses h directly (a unit gate), no_aux reads speaker logits from a
// detached copy of the fused features.
inline ForwardPass forward(const ModelParameters& params, const Batch& batch,
                           Ablation ablation = Ablation::full) {
  const auto& cfg = params.config;
  if (batch.features.size() != cfg.num_modalities()) {
    throw ContractError("batch has " + std::to_string(batch.features.size()) +
                        " modalities, model expects " + std::to_string(cfg.num_modalities()));
  }
  ForwardPass fp;
  fp.embeddings = embed_speaker(params.speaker_embedding, batch.speaker_inputs, cfg.num_speakers);
  for (std::size_t m = 0; m < cfg.num_modalities(); ++m) {
    const auto& mp = params.modalities[m];
    const Tensor& x = batch.features[m];
    if (x.rank() != 2 || x.cols() != cfg.modality_dims[m] || x.rows() != batch.size()) {
      throw DimensionError("modality " + cfg.modality_names[m] + " features " + shape_string(x.shape()) +
                           " do not match width " + std::to_string(cfg.modality_dims[m]));
    }
    FilmOutput film;
    if (ablation == Ablation::no_film) {
      film.calibrated = x;
    } else {
      film = film_modulate(x, fp.embeddings, mp.film);
    }
    Tensor h = context_encode(film.calibrated, batch.history, mp.encoder);
    GateOutput g;
    if (ablation == Ablation::no_gate) {
      g.gated = h;
      g.gate = Tensor::full(h.shape(), 1.0);
    } else {
      g = speaker_gate_modulate(h, fp.embeddings, mp.gate);
    }
    fp.film.push_back(std::move(film));
    fp.hidden.push_back(std::move(h));
    fp.gates.push_back(std::move(g.gate));
    fp.gated.push_back(std::move(g.gated));
  }
  fp.fused = fuse(fp.gated, cfg.num_modalities());
  fp.emotion_logits = affine(fp.fused, params.emotion_head);
  fp.speaker_logits =
      speaker_head(ablation == Ablation::no_aux ? fp.fused.detach() : fp.fused, params.speaker_head);
  return fp;
}

inline LossBreakdown batch_loss(const ForwardPass& fp, const Batch& batch, double lambda,
                                Ablation ablation, std::span<const double> emotion_weights = {}) {
  return total_loss(fp.emotion_logits, batch.emotions, fp.speaker_logits, batch.speaker_targets,
                    ablation == Ablation::no_aux ? 0.0 : lambda, emotion_weights);
}

inline std::vector<std::size_t> argmax_rows(const Tensor& logits) {
  std::vector<std::size_t> out(logits.rows());
  const std::size_t c = logits.cols();
  auto Z = logits.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<std::size_t>(std::max_element(&Z[i * c], &Z[i * c] + c) - &Z[i * c]);
  }
  return out;
}

}  // namespace mlsan
