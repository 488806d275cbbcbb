#pragma once

// JSON mapping of the configuration structs. Readers are strict: every key
// must be known, and missing keys keep their defaults.

#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "mlsan/errors.hpp"
#include "mlsan/layers.hpp"
#include "mlsan/synth.hpp"

namespace mlsan {

using json = nlohmann::json;

class StrictReader {
 public:
  StrictReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    used_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(path_ + "." + key + ": " + e.what());
    }
  }

  bool has(const char* key) const { return j_.contains(key); }
  const json& at(const char* key) {
    used_.insert(key);
    return j_.at(key);
  }
  std::string child(const char* key) const { return path_ + "." + key; }

  // Rejects keys that were never asked for.
  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!used_.count(it.key())) throw ConfigError("unknown key " + path_ + "." + it.key());
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

inline json to_json_value(const ModelConfig& c) {
  return json{{"num_speakers", c.num_speakers},   {"num_emotions", c.num_emotions},
              {"modality_names", c.modality_names}, {"modality_dims", c.modality_dims},
              {"speaker_dim", c.speaker_dim},     {"hidden_dim", c.hidden_dim},
              {"context_window", c.context_window}, {"gate_bias_init", c.gate_bias_init}};
}

inline ModelConfig model_config_from_json(const json& j, const std::string& path = "model") {
  ModelConfig c;
  StrictReader r(j, path);
  r.get("num_speakers", c.num_speakers);
  r.get("num_emotions", c.num_emotions);
  r.get("modality_names", c.modality_names);
  r.get("modality_dims", c.modality_dims);
  r.get("speaker_dim", c.speaker_dim);
  r.get("hidden_dim", c.hidden_dim);
  r.get("context_window", c.context_window);
  r.get("gate_bias_init", c.gate_bias_init);
  r.finish();
  return c;
}

inline json to_json_value(const GeneratorConfig& c) {
  return json{{"num_speakers", c.num_speakers},
              {"num_emotions", c.num_emotions},
              {"d_audio", c.d_audio},
              {"d_visual", c.d_visual},
              {"dialogues", c.dialogues},
              {"utterances_per_dialogue", c.utterances_per_dialogue},
              {"speakers_per_dialogue", c.speakers_per_dialogue},
              {"emotion_prior", c.emotion_prior},
              {"long_tail", c.long_tail},
              {"long_tail_ratio", c.long_tail_ratio},
              {"prototype_scale", c.prototype_scale},
              {"noise_sigma", c.noise_sigma},
              {"heterogeneous", c.heterogeneous},
              {"scale_log_spread", c.scale_log_spread},
              {"shift_sigma", c.shift_sigma},
              {"confusion_shift", c.confusion_shift},
              {"reliability_low", c.reliability_low},
              {"reliability_high", c.reliability_high},
              {"homogeneous_reliability", c.homogeneous_reliability},
              {"temperament_strength", c.temperament_strength},
              {"seed", c.seed}};
}

inline GeneratorConfig generator_config_from_json(const json& j, const std::string& path = "generator") {
  GeneratorConfig c;
  StrictReader r(j, path);
  r.get("num_speakers", c.num_speakers);
  r.get("num_emotions", c.num_emotions);
  r.get("d_audio", c.d_audio);
  r.get("d_visual", c.d_visual);
  r.get("dialogues", c.dialogues);
  r.get("utterances_per_dialogue", c.utterances_per_dialogue);
  r.get("speakers_per_dialogue", c.speakers_per_dialogue);
  r.get("emotion_prior", c.emotion_prior);
  r.get("long_tail", c.long_tail);
  r.get("long_tail_ratio", c.long_tail_ratio);
  r.get("prototype_scale", c.prototype_scale);
  r.get("noise_sigma", c.noise_sigma);
  r.get("heterogeneous", c.heterogeneous);
  r.get("scale_log_spread", c.scale_log_spread);
  r.get("shift_sigma", c.shift_sigma);
  r.get("confusion_shift", c.confusion_shift);
  r.get("reliability_low", c.reliability_low);
  r.get("reliability_high", c.reliability_high);
  r.get("homogeneous_reliability", c.homogeneous_reliability);
  r.get("temperament_strength", c.temperament_strength);
  r.get("seed", c.seed);
  r.finish();
  return c;
}

inline json to_json_value(const SpeakerProfile& p) {
  return json{{"id", p.id},       {"style", p.style},           {"scale", p.scale},
              {"shift", p.shift}, {"reliability", p.reliability}, {"emotion_prior", p.emotion_prior}};
}

inline SpeakerProfile speaker_profile_from_json(const json& j) {
  SpeakerProfile p;
  StrictReader r(j, "profile");
  r.get("id", p.id);
  r.get("style", p.style);
  r.get("scale", p.scale);
  r.get("shift", p.shift);
  r.get("reliability", p.reliability);
  r.get("emotion_prior", p.emotion_prior);
  r.finish();
  return p;
}

inline json to_json_value(const GroundTruth& t) {
  json profiles = json::array();
  for (const auto& p : t.profiles) profiles.push_back(to_json_value(p));
  return json{{"generator", to_json_value(t.config)}, {"profiles", profiles}, {"prototypes", t.prototypes}};
}

inline GroundTruth ground_truth_from_json(const json& j) {
  GroundTruth t;
  StrictReader r(j, "ground_truth");
  t.config = generator_config_from_json(r.at("generator"));
  for (const auto& p : r.at("profiles")) t.profiles.push_back(speaker_profile_from_json(p));
  r.get("prototypes", t.prototypes);
  r.finish();
  return t;
}

inline json to_json_value(const SplitFractions& f) {
  return json{{"train", f.train}, {"validation", f.validation}, {"test", f.test}};
}

inline SplitFractions split_fractions_from_json(const json& j, const std::string& path) {
  SplitFractions f;
  StrictReader r(j, path);
  r.get("train", f.train);
  r.get("validation", f.validation);
  r.get("test", f.test);
  r.finish();
  return f;
}

}  // namespace mlsan
