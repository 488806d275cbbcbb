#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include <gtest/gtest.h>

#include "mlsan/synth.hpp"

using namespace mlsan;

namespace {

GeneratorConfig small_generator(std::uint64_t seed = 5) {
  GeneratorConfig g;
  g.dialogues = 40;
  g.utterances_per_dialogue = 8;
  g.seed = seed;
  return g;
}

std::set<std::size_t> ids(const DialogueCorpus& c) {
  std::set<std::size_t> out;
  for (const auto& d : c.dialogues) out.insert(d.id);
  return out;
}

double accuracy(const DialogueCorpus& c, const std::vector<std::size_t>& preds) {
  std::size_t k = 0, hit = 0;
  for (const auto& d : c.dialogues) {
    for (const auto& u : d.utterances) hit += preds[k++] == u.emotion;
  }
  return static_cast<double>(hit) / static_cast<double>(k);
}

}  // namespace

TEST(Generator, SameSeedSameCorpusAndTruth) {
  auto a = generate_corpus(small_generator()), b = generate_corpus(small_generator());
  EXPECT_EQ(a.corpus, b.corpus);
  EXPECT_EQ(a.truth.prototypes, b.truth.prototypes);
  ASSERT_EQ(a.truth.profiles.size(), b.truth.profiles.size());
  for (std::size_t s = 0; s < a.truth.profiles.size(); ++s) {
    EXPECT_EQ(a.truth.profiles[s].scale, b.truth.profiles[s].scale);
    EXPECT_EQ(a.truth.profiles[s].shift, b.truth.profiles[s].shift);
  }
  auto c = generate_corpus(small_generator(6));
  EXPECT_NE(a.corpus, c.corpus);
}

TEST(Generator, ShapeAndParticipants) {
  const auto g = small_generator();
  auto sc = generate_corpus(g);
  EXPECT_TRUE(sc.corpus.synthetic);
  EXPECT_EQ(sc.corpus.dialogues.size(), g.dialogues);
  EXPECT_EQ(sc.corpus.utterance_count(), g.dialogues * g.utterances_per_dialogue);
  EXPECT_EQ(sc.corpus.modality_names, (std::vector<std::string>{"audio", "visual"}));
  EXPECT_NO_THROW(sc.corpus.validate());
  for (const auto& d : sc.corpus.dialogues) {
    std::set<std::size_t> who;
    for (const auto& u : d.utterances) who.insert(u.speaker);
    EXPECT_LE(who.size(), g.speakers_per_dialogue);
  }
}

TEST(Generator, ProfileInvariants) {
  auto sc = generate_corpus(small_generator());
  for (const auto& p : sc.truth.profiles) {
    for (const auto& row : p.scale) {
      for (double v : row) EXPECT_GT(v, 0.0);
    }
    ASSERT_EQ(p.reliability.size(), 2u);
    // Even speakers express through the face, odd ones through the voice.
    EXPECT_EQ(p.reliability[0], p.id % 2 == 0 ? 0.2 : 0.9);
    EXPECT_EQ(p.reliability[1], p.id % 2 == 0 ? 0.9 : 0.2);
    EXPECT_NEAR(std::accumulate(p.emotion_prior.begin(), p.emotion_prior.end(), 0.0), 1.0, 1e-12);
  }
}

TEST(Generator, HomogeneousProfilesAreIdentity) {
  auto g = small_generator();
  g.heterogeneous = false;
  auto sc = generate_corpus(g);
  for (const auto& p : sc.truth.profiles) {
    for (const auto& row : p.scale) {
      for (double v : row) EXPECT_EQ(v, 1.0);
    }
    for (const auto& row : p.shift) {
      for (double v : row) EXPECT_EQ(v, 0.0);
    }
    EXPECT_EQ(p.reliability, (std::vector<double>{0.9, 0.9}));
    EXPECT_EQ(p.style, "neutral");
  }
}

TEST(Generator, NoiselessReliableFeaturesAreDistortedPrototypes) {
  auto g = small_generator();
  g.noise_sigma = 0.0;
  g.reliability_low = g.reliability_high = 1.0;
  auto sc = generate_corpus(g);
  for (const auto& d : sc.corpus.dialogues) {
    for (const auto& u : d.utterances) {
      const auto& p = sc.truth.profiles[u.speaker];
      for (std::size_t m = 0; m < 2; ++m) {
        for (std::size_t j = 0; j < u.features[m].size(); ++j) {
          EXPECT_EQ(u.features[m][j], p.scale[m][j] * sc.truth.prototypes[u.emotion][m][j] + p.shift[m][j]);
        }
      }
    }
  }
  EXPECT_EQ(bayes_oracle(sc.corpus, sc.truth), 1.0);
}

TEST(Generator, ClassMeansApproachPrototypes) {
  auto g = small_generator();
  g.heterogeneous = false;
  g.homogeneous_reliability = 1.0;
  g.dialogues = 400;
  auto sc = generate_corpus(g);
  std::vector<std::vector<double>> sum(g.num_emotions, std::vector<double>(g.d_audio, 0.0));
  std::vector<double> count(g.num_emotions, 0.0);
  for (const auto& d : sc.corpus.dialogues) {
    for (const auto& u : d.utterances) {
      for (std::size_t j = 0; j < g.d_audio; ++j) sum[u.emotion][j] += u.features[0][j];
      count[u.emotion] += 1.0;
    }
  }
  for (std::size_t e = 0; e < g.num_emotions; ++e) {
    const double se = g.noise_sigma / std::sqrt(count[e]);
    for (std::size_t j = 0; j < g.d_audio; ++j) {
      EXPECT_NEAR(sum[e][j] / count[e], sc.truth.prototypes[e][0][j], 5.0 * se) << e << "," << j;
    }
  }
}

TEST(Generator, TemperamentFavoursOneEmotionPerSpeaker) {
  auto g = small_generator();
  g.temperament_strength = 3.0;
  g.dialogues = 200;
  auto sc = generate_corpus(g);
  std::vector<std::vector<double>> h(g.num_speakers, std::vector<double>(g.num_emotions, 0.0));
  for (const auto& d : sc.corpus.dialogues) {
    for (const auto& u : d.utterances) h[u.speaker][u.emotion] += 1.0;
  }
  for (std::size_t s = 0; s < g.num_speakers; ++s) {
    const auto top = static_cast<std::size_t>(std::max_element(h[s].begin(), h[s].end()) - h[s].begin());
    EXPECT_EQ(top, s % g.num_emotions);
  }
}

TEST(Generator, PriorsResolveAndValidate) {
  GeneratorConfig g;
  EXPECT_EQ(g.resolved_prior(), (std::vector<double>{0.25, 0.25, 0.25, 0.25}));
  g.long_tail = true;
  const auto p = g.resolved_prior();
  for (std::size_t e = 1; e < p.size(); ++e) EXPECT_NEAR(p[e] / p[e - 1], 0.6, 1e-12);
  g = GeneratorConfig{};
  g.emotion_prior = {0.5, 0.5, 0.5, 0.5};
  EXPECT_THROW(g.validate(), ConfigError);
  g.emotion_prior = {0.5, 0.5};
  EXPECT_THROW(g.validate(), ConfigError);
  g.emotion_prior = {1.5, -0.5, 0.0, 0.0};
  EXPECT_THROW(g.validate(), ConfigError);
  g = GeneratorConfig{};
  g.speakers_per_dialogue = 7;
  EXPECT_THROW(generate_corpus(g), ConfigError);
  g = GeneratorConfig{};
  g.reliability_low = -0.1;
  EXPECT_THROW(g.validate(), ConfigError);
}

// --- Bayes oracle ---------------------------------------------------------------

TEST(Oracle, NoSignalFallsToChance) {
  auto g = small_generator();
  g.reliability_low = g.reliability_high = 0.0;
  g.dialogues = 300;
  g.utterances_per_dialogue = 10;
  auto sc = generate_corpus(g);
  const double n = static_cast<double>(sc.corpus.utterance_count());
  const double acc = bayes_oracle(sc.corpus, sc.truth);
  EXPECT_NEAR(acc, 0.25, 4.0 * std::sqrt(0.25 * 0.75 / n));
}

TEST(Oracle, DefaultCorpusIsHardButLearnable) {
  auto sc = generate_corpus(GeneratorConfig{});
  const double acc = bayes_oracle(sc.corpus, sc.truth);
  EXPECT_GE(acc, 0.75);
  EXPECT_LE(acc, 0.95);
  EXPECT_EQ(accuracy(sc.corpus, bayes_predictions(sc.corpus, sc.truth)), acc);
}

TEST(Oracle, RequiresSyntheticCorpusWithMatchingTruth) {
  auto sc = generate_corpus(small_generator());
  DialogueCorpus real = sc.corpus;
  real.synthetic = false;
  EXPECT_THROW(bayes_oracle(real, sc.truth), ContractError);
  DialogueCorpus other = sc.corpus;
  other.num_emotions = 5;
  EXPECT_THROW(bayes_oracle(other, sc.truth), ContractError);
  DialogueCorpus empty = sc.corpus;
  empty.dialogues.clear();
  EXPECT_THROW(bayes_oracle(empty, sc.truth), ContractError);
}

// --- splits -----------------------------------------------------------------------

TEST(Split, DefaultFractionsOnThreeHundredDialogues) {
  auto sc = generate_corpus(GeneratorConfig{});
  auto s = split_corpus(sc.corpus, SplitFractions{}, 11);
  EXPECT_EQ(s.train.dialogues.size(), 210u);
  EXPECT_EQ(s.validation.dialogues.size(), 45u);
  EXPECT_EQ(s.test.dialogues.size(), 45u);
}

TEST(Split, DisjointCoveringAndEverySpeakerInTrain) {
  auto sc = generate_corpus(GeneratorConfig{});
  for (std::uint64_t seed : {1u, 11u, 99u}) {
    auto s = split_corpus(sc.corpus, SplitFractions{}, seed);
    auto a = ids(s.train), b = ids(s.validation), c = ids(s.test);
    std::set<std::size_t> all;
    for (const auto* part : {&a, &b, &c}) {
      for (std::size_t id : *part) EXPECT_TRUE(all.insert(id).second) << "dialogue " << id << " in two splits";
    }
    EXPECT_EQ(all, ids(sc.corpus));
    std::set<std::size_t> speakers;
    for (const auto& d : s.train.dialogues) {
      for (const auto& u : d.utterances) speakers.insert(u.speaker);
    }
    EXPECT_EQ(speakers.size(), sc.corpus.num_speakers);
  }
}

TEST(Split, SeedControlsAssignment) {
  auto sc = generate_corpus(GeneratorConfig{});
  EXPECT_EQ(ids(split_corpus(sc.corpus, SplitFractions{}, 4).test),
            ids(split_corpus(sc.corpus, SplitFractions{}, 4).test));
  EXPECT_NE(ids(split_corpus(sc.corpus, SplitFractions{}, 4).test),
            ids(split_corpus(sc.corpus, SplitFractions{}, 5).test));
}

TEST(Split, AllTrainAndInvalidFractions) {
  auto sc = generate_corpus(small_generator());
  auto s = split_corpus(sc.corpus, SplitFractions{1.0, 0.0, 0.0}, 3);
  EXPECT_EQ(s.train.dialogues.size(), sc.corpus.dialogues.size());
  EXPECT_TRUE(s.validation.dialogues.empty());
  EXPECT_TRUE(s.test.dialogues.empty());
  EXPECT_THROW(split_corpus(sc.corpus, SplitFractions{0.7, 0.2, 0.2}, 3), ConfigError);
  EXPECT_THROW(split_corpus(sc.corpus, SplitFractions{1.2, -0.1, -0.1}, 3), ConfigError);
}

TEST(Split, ImpossibleSpeakerCoverageIsConfigError) {
  auto sc = generate_corpus(small_generator());
  // A training split of a single dialogue cannot hold all six speakers.
  SplitFractions f{1.0 / 40.0, 0.5, 0.5 - 1.0 / 40.0};
  EXPECT_THROW(split_corpus(sc.corpus, f, 3), ConfigError);
}
