#pragma once

// Speaker-heterogeneous synthetic dialogue corpora with a known generative
// model, its Bayes-optimal classifier, and dialogue-level splitting.
//
// Generative story, per utterance of speaker s with emotion e, modality m:
//   clean   = prototype[e][m] + noise_sigma * z
//   emitted = scale_s,m (.) clean + shift_s,m
//   with probability 1 - reliability_s,m the emitted vector is replaced by
//   scale_s,m (.) (background_sigma * z') + shift_s,m   (pure noise)
// where background_sigma^2 = prototype_scale^2 + noise_sigma^2 so that noise
// and signal have matching marginal spread.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "mlsan/corpus.hpp"
#include "mlsan/errors.hpp"

namespace mlsan {

struct GeneratorConfig {
  std::size_t num_speakers = 6;
  std::size_t num_emotions = 4;
  std::size_t d_audio = 12;
  std::size_t d_visual = 12;
  std::size_t dialogues = 300;
  std::size_t utterances_per_dialogue = 10;
  std::size_t speakers_per_dialogue = 2;
  std::vector<double> emotion_prior;  // empty: uniform, or geometric when long_tail is set
  bool long_tail = false;
  double long_tail_ratio = 0.6;
  double prototype_scale = 1.0;
  double noise_sigma = 1.4;
  bool heterogeneous = true;
  double scale_log_spread = 0.7;  // log scale_s,m ~ U(-spread, spread)
  double shift_sigma = 0.5;        // isotropic part of shift_s,m
  double confusion_shift = 1.5;    // weight of the emotion-swapping part of shift_s,m
  double reliability_low = 0.2;
  double reliability_high = 0.9;
  double homogeneous_reliability = 0.9;
  double temperament_strength = 0.0;  // 0: every speaker uses the corpus prior
  std::uint64_t seed = 7;

  std::vector<double> resolved_prior() const {
    if (!emotion_prior.empty()) return emotion_prior;
    std::vector<double> p(num_emotions, 1.0);
    if (long_tail) {
      for (std::size_t e = 1; e < num_emotions; ++e) p[e] = p[e - 1] * long_tail_ratio;
    }
    const double total = std::accumulate(p.begin(), p.end(), 0.0);
    for (double& v : p) v /= total;
    return p;
  }

  double background_sigma() const {
    return std::sqrt(prototype_scale * prototype_scale + noise_sigma * noise_sigma);
  }

  void validate() const {
    if (num_speakers == 0 || num_emotions == 0 || d_audio == 0 || d_visual == 0 || dialogues == 0 ||
        utterances_per_dialogue == 0 || speakers_per_dialogue == 0) {
      throw ConfigError("generator counts must all be positive");
    }
    if (speakers_per_dialogue > num_speakers) {
      throw ConfigError("generator.speakers_per_dialogue exceeds generator.num_speakers");
    }
    if (!emotion_prior.empty()) {
      if (emotion_prior.size() != num_emotions) {
        throw ConfigError("generator.emotion_prior must have one entry per emotion");
      }
      double total = 0.0;
      for (double p : emotion_prior) {
        if (!(p >= 0.0)) throw ConfigError("generator.emotion_prior entries must be non-negative");
        total += p;
      }
      if (std::abs(total - 1.0) > 1e-9) throw ConfigError("generator.emotion_prior must sum to 1");
    }
    if (!(long_tail_ratio > 0.0 && long_tail_ratio <= 1.0)) {
      throw ConfigError("generator.long_tail_ratio must lie in (0, 1]");
    }
    if (!(noise_sigma >= 0.0) || !(prototype_scale > 0.0) || !(shift_sigma >= 0.0) || !(confusion_shift >= 0.0) ||
        !(scale_log_spread >= 0.0)) {
      throw ConfigError("generator noise and distortion scales must be non-negative");
    }
    for (double r : {reliability_low, reliability_high, homogeneous_reliability}) {
      if (!(r >= 0.0 && r <= 1.0)) throw ConfigError("generator reliabilities must lie in [0, 1]");
    }
    if (!(temperament_strength >= 0.0)) throw ConfigError("generator.temperament_strength must be >= 0");
  }

  bool operator==(const GeneratorConfig&) const = default;
};

struct SpeakerProfile {
  std::size_t id = 0;
  std::string style;                            // which modality carries the speaker's expression
  std::vector<std::vector<double>> scale;       // per modality, strictly positive
  std::vector<std::vector<double>> shift;       // per modality
  std::vector<double> reliability;              // per modality, in [0, 1]
  std::vector<double> emotion_prior;            // this speaker's label distribution

  bool operator==(const SpeakerProfile&) const = default;
};

// Everything needed to score the corpus under its true generative model.
struct GroundTruth {
  GeneratorConfig config;
  std::vector<SpeakerProfile> profiles;
  std::vector<std::vector<std::vector<double>>> prototypes;  // [emotion][modality][dim]

  bool operator==(const GroundTruth&) const = default;
};

struct SyntheticCorpus {
  DialogueCorpus corpus;
  GroundTruth truth;
};

inline const std::vector<std::string>& synthetic_modality_names() {
  static const std::vector<std::string> names{"audio", "visual"};
  return names;
}

inline SyntheticCorpus generate_corpus(const GeneratorConfig& cfg) {
  cfg.validate();
  std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                    0x5e7du};
  std::mt19937_64 rng(seq);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  const std::vector<std::size_t> dims{cfg.d_audio, cfg.d_visual};
  const std::size_t modalities = dims.size();
  const auto prior = cfg.resolved_prior();

  GroundTruth truth;
  truth.config = cfg;
  truth.prototypes.assign(cfg.num_emotions, {});
  for (std::size_t e = 0; e < cfg.num_emotions; ++e) {
    for (std::size_t m = 0; m < modalities; ++m) {
      std::vector<double> p(dims[m]);
      for (double& v : p) v = cfg.prototype_scale * normal(rng);
      truth.prototypes[e].push_back(std::move(p));
    }
  }

  for (std::size_t s = 0; s < cfg.num_speakers; ++s) {
    SpeakerProfile prof;
    prof.id = s;
    const bool visual_style = s % 2 == 0;
    prof.style = cfg.heterogeneous ? (visual_style ? "visual_expressive" : "vocal_expressive") : "neutral";
    for (std::size_t m = 0; m < modalities; ++m) {
      std::vector<double> a(dims[m], 1.0), c(dims[m], 0.0);
      if (cfg.heterogeneous) {
        for (double& v : a) v = std::exp(cfg.scale_log_spread * (2.0 * unit(rng) - 1.0));
        for (double& v : c) v = cfg.shift_sigma * normal(rng);
        if (cfg.confusion_shift > 0.0 && cfg.num_emotions > 1) {
          // Moves this speaker's emotion `from` onto the prototype of `to`.
          std::uniform_int_distribution<std::size_t> pick(0, cfg.num_emotions - 1);
          const std::size_t from = pick(rng);
          std::size_t to = pick(rng);
          if (to == from) to = (to + 1) % cfg.num_emotions;
          for (std::size_t j = 0; j < dims[m]; ++j) {
            c[j] += cfg.confusion_shift * (truth.prototypes[to][m][j] - truth.prototypes[from][m][j]);
          }
        }
      }
      prof.scale.push_back(std::move(a));
      prof.shift.push_back(std::move(c));
      double r = cfg.homogeneous_reliability;
      if (cfg.heterogeneous) {
        const bool is_audio = m == 0;
        const bool expressive = is_audio != visual_style;
        r = expressive ? cfg.reliability_high : cfg.reliability_low;
      }
      prof.reliability.push_back(r);
    }
    // Temperament tilts the corpus prior towards a speaker-specific emotion.
    prof.emotion_prior = prior;
    if (cfg.heterogeneous && cfg.temperament_strength > 0.0) {
      const std::size_t favourite = s % cfg.num_emotions;
      double total = 0.0;
      for (std::size_t e = 0; e < cfg.num_emotions; ++e) {
        prof.emotion_prior[e] *= e == favourite ? std::exp(cfg.temperament_strength) : 1.0;
        total += prof.emotion_prior[e];
      }
      for (double& v : prof.emotion_prior) v /= total;
    }
    truth.profiles.push_back(std::move(prof));
  }

  DialogueCorpus corpus;
  corpus.modality_names = synthetic_modality_names();
  corpus.modality_dims = dims;
  corpus.num_speakers = cfg.num_speakers;
  corpus.num_emotions = cfg.num_emotions;
  corpus.synthetic = true;

  const double background = cfg.background_sigma();
  std::vector<std::size_t> speaker_pool(cfg.num_speakers);
  std::iota(speaker_pool.begin(), speaker_pool.end(), std::size_t{0});
  for (std::size_t d = 0; d < cfg.dialogues; ++d) {
    // Partial Fisher-Yates picks the dialogue's participants.
    for (std::size_t k = 0; k < cfg.speakers_per_dialogue; ++k) {
      std::uniform_int_distribution<std::size_t> pick(k, cfg.num_speakers - 1);
      std::swap(speaker_pool[k], speaker_pool[pick(rng)]);
    }
    Dialogue dialogue;
    dialogue.id = d;
    for (std::size_t i = 0; i < cfg.utterances_per_dialogue; ++i) {
      std::uniform_int_distribution<std::size_t> who(0, cfg.speakers_per_dialogue - 1);
      const std::size_t s = speaker_pool[who(rng)];
      const auto& prof = truth.profiles[s];
      std::discrete_distribution<std::size_t> emo(prof.emotion_prior.begin(), prof.emotion_prior.end());
      Utterance u;
      u.speaker = s;
      u.emotion = emo(rng);
      for (std::size_t m = 0; m < modalities; ++m) {
        const bool carries_signal = unit(rng) < prof.reliability[m];
        std::vector<double> f(dims[m]);
        for (std::size_t j = 0; j < dims[m]; ++j) {
          const double clean = carries_signal ? truth.prototypes[u.emotion][m][j] + cfg.noise_sigma * normal(rng)
                                              : background * normal(rng);
          f[j] = prof.scale[m][j] * clean + prof.shift[m][j];
        }
        u.features.push_back(std::move(f));
      }
      dialogue.utterances.push_back(std::move(u));
    }
    corpus.dialogues.push_back(std::move(dialogue));
  }
  return {std::move(corpus), std::move(truth)};
}

// Posterior-maximizing label for one utterance under the true model.
inline std::size_t bayes_decision(const Utterance& u, const GroundTruth& truth) {
  const auto& cfg = truth.config;
  const auto& prof = truth.profiles.at(u.speaker);
  const double sigma = std::max(cfg.noise_sigma, 1e-9);
  const double background = cfg.background_sigma();
  std::size_t best = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t e = 0; e < cfg.num_emotions; ++e) {
    double score = prof.emotion_prior[e] > 0.0 ? std::log(prof.emotion_prior[e])
                                               : -std::numeric_limits<double>::infinity();
    for (std::size_t m = 0; m < u.features.size(); ++m) {
      // Log densities in the undistorted space; the Jacobian of the speaker's
      // affine map is shared by both mixture components and cancels.
      double sq_signal = 0.0, sq_noise = 0.0;
      const std::size_t d = u.features[m].size();
      for (std::size_t j = 0; j < d; ++j) {
        const double x = (u.features[m][j] - prof.shift[m][j]) / prof.scale[m][j];
        const double ds = (x - truth.prototypes[e][m][j]) / sigma;
        const double dn = x / background;
        sq_signal += ds * ds;
        sq_noise += dn * dn;
      }
      const double dd = static_cast<double>(d);
      const double log_signal = -0.5 * sq_signal - dd * std::log(sigma);
      const double log_noise = -0.5 * sq_noise - dd * std::log(background);
      const double r = prof.reliability[m];
      double mix;
      if (r >= 1.0) {
        mix = log_signal;
      } else if (r <= 0.0) {
        mix = log_noise;
      } else {
        const double a = std::log(r) + log_signal;
        const double b = std::log1p(-r) + log_noise;
        const double hi = std::max(a, b);
        mix = hi + std::log(std::exp(a - hi) + std::exp(b - hi));
      }
      score += mix;
    }
    if (score > best_score) {
      best_score = score;
      best = e;
    }
  }
  return best;
}

inline std::vector<std::size_t> bayes_predictions(const DialogueCorpus& corpus, const GroundTruth& truth) {
  if (!corpus.synthetic) throw ContractError("the Bayes oracle only applies to synthetic corpora");
  if (corpus.num_emotions != truth.config.num_emotions ||
      corpus.num_speakers != truth.profiles.size()) {
    throw ContractError("corpus does not match the supplied generative model");
  }
  std::vector<std::size_t> out;
  for (const auto& d : corpus.dialogues) {
    for (const auto& u : d.utterances) out.push_back(bayes_decision(u, truth));
  }
  return out;
}

inline double bayes_oracle(const DialogueCorpus& corpus, const GroundTruth& truth) {
  const auto preds = bayes_predictions(corpus, truth);
  if (preds.empty()) throw ContractError("Bayes oracle on an empty corpus");
  std::size_t correct = 0, k = 0;
  for (const auto& d : corpus.dialogues) {
    for (const auto& u : d.utterances) correct += preds[k++] == u.emotion;
  }
  return static_cast<double>(correct) / static_cast<double>(preds.size());
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

struct SplitFractions {
  double train = 0.7;
  double validation = 0.15;
  double test = 0.15;

  bool operator==(const SplitFractions&) const = default;
};

struct CorpusSplits {
  DialogueCorpus train;
  DialogueCorpus validation;
  DialogueCorpus test;
};

// Dialogue-level split. Shuffles with `seed`; if some speaker is missing from
// train, retries with derived seeds (at most 100 attempts).
inline CorpusSplits split_corpus(const DialogueCorpus& corpus, const SplitFractions& f, std::uint64_t seed) {
  for (double v : {f.train, f.validation, f.test}) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("split fractions must be non-negative");
  }
  if (std::abs(f.train + f.validation + f.test - 1.0) > 1e-9) {
    throw ConfigError("split fractions must sum to 1");
  }
  const std::size_t n = corpus.dialogues.size();
  const auto n_train = static_cast<std::size_t>(std::llround(f.train * static_cast<double>(n)));
  const auto n_val = std::min(n - std::min(n, n_train),
                              static_cast<std::size_t>(std::llround(f.validation * static_cast<double>(n))));
  if (n_train > n) throw ConfigError("split rounding exceeded corpus size");

  auto empty_like = [&corpus]() {
    DialogueCorpus c = corpus;
    c.dialogues.clear();
    return c;
  };

  for (std::uint64_t attempt = 0; attempt < 100; ++attempt) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(attempt), 0x5b17u};
    std::mt19937_64 rng(seq);
    for (std::size_t i = n; i > 1; --i) {
      std::uniform_int_distribution<std::size_t> pick(0, i - 1);
      std::swap(order[i - 1], order[pick(rng)]);
    }
    CorpusSplits out{empty_like(), empty_like(), empty_like()};
    std::vector<bool> seen(corpus.num_speakers, false);
    for (std::size_t k = 0; k < n; ++k) {
      const auto& d = corpus.dialogues[order[k]];
      if (k < n_train) {
        out.train.dialogues.push_back(d);
        for (const auto& u : d.utterances) seen[u.speaker] = true;
      } else if (k < n_train + n_val) {
        out.validation.dialogues.push_back(d);
      } else {
        out.test.dialogues.push_back(d);
      }
    }
    // Every speaker that occurs anywhere must occur in train.
    std::vector<bool> occurs(corpus.num_speakers, false);
    for (const auto& d : corpus.dialogues) {
      for (const auto& u : d.utterances) occurs[u.speaker] = true;
    }
    bool ok = true;
    for (std::size_t s = 0; s < corpus.num_speakers; ++s) ok = ok && (!occurs[s] || seen[s]);
    if (ok) {
      auto by_id = [](const Dialogue& a, const Dialogue& b) { return a.id < b.id; };
      std::sort(out.train.dialogues.begin(), out.train.dialogues.end(), by_id);
      std::sort(out.validation.dialogues.begin(), out.validation.dialogues.end(), by_id);
      std::sort(out.test.dialogues.begin(), out.test.dialogues.end(), by_id);
      return out;
    }
  }
  throw ConfigError("could not place every speaker in the training split after 100 attempts");
}

}  // namespace mlsan
