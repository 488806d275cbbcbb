#include <cmath>
#include <fstream>

#include <gtest/gtest.h>

#include "mlsan/synth.hpp"
#include "mlsan/train.hpp"
#include "test_support.hpp"

using namespace mlsan;
using mlsan::testing::TempDir;

namespace {

CorpusSplits small_splits(std::size_t dialogues = 60) {
  GeneratorConfig g;
  g.dialogues = dialogues;
  g.seed = 17;
  return split_corpus(generate_corpus(g).corpus, SplitFractions{}, 11);
}

ModelConfig model_for(const DialogueCorpus& c) {
  ModelConfig m;
  m.num_speakers = c.num_speakers;
  m.num_emotions = c.num_emotions;
  m.modality_names = c.modality_names;
  m.modality_dims = c.modality_dims;
  return m;
}

TrainConfig short_run(std::size_t epochs) {
  TrainConfig t;
  t.epochs = epochs;
  t.seed = 5;
  return t;
}

std::string expect_numerical(const std::function<void()>& f) {
  try {
    f();
  } catch (const NumericalError& e) {
    return e.what();
  }
  ADD_FAILURE() << "no NumericalError";
  return {};
}

}  // namespace

// --- optimizer ----------------------------------------------------------------------

TEST(Adam, ZeroGradientLeavesParameterAndMomentsAtRest) {
  std::vector<double> p{0.3, -1.2}, g{0.0, 0.0}, m(2, 0.0), v(2, 0.0);
  TrainConfig cfg;
  for (std::uint64_t t = 1; t <= 5; ++t) adam_update(p, g, m, v, t, cfg);
  EXPECT_EQ(p, (std::vector<double>{0.3, -1.2}));
  EXPECT_EQ(m, (std::vector<double>{0.0, 0.0}));
  EXPECT_EQ(v, (std::vector<double>{0.0, 0.0}));
}

TEST(Adam, ConstantGradientMovesByLearningRatePerStep) {
  // With bias correction the corrected moments equal g and g^2 exactly, so
  // every step moves lr * g / (|g| + eps).
  TrainConfig cfg;
  const double g0 = 0.37;
  std::vector<double> p{1.0}, g{g0}, m{0.0}, v{0.0};
  const int steps = 200;
  for (int t = 1; t <= steps; ++t) adam_update(p, g, m, v, static_cast<std::uint64_t>(t), cfg);
  EXPECT_NEAR(p[0], 1.0 - steps * cfg.learning_rate * g0 / (g0 + cfg.epsilon), 1e-12);
}

TEST(Adam, DescendsAQuadratic) {
  TrainConfig cfg;
  cfg.learning_rate = 1e-2;
  std::vector<double> p{1.5}, g(1), m{0.0}, v{0.0};
  for (std::uint64_t t = 1; t <= 3000; ++t) {
    g[0] = 2.0 * p[0];
    adam_update(p, g, m, v, t, cfg);
  }
  EXPECT_LT(std::abs(p[0]), 0.05);
}

TEST(Adam, StepZeroAndShapeMismatchAreRejected) {
  TrainConfig cfg;
  std::vector<double> p{1.0}, g{1.0}, m{0.0}, v{0.0}, wide{0.0, 0.0};
  EXPECT_THROW(adam_update(p, g, m, v, 0, cfg), ContractError);
  EXPECT_THROW(adam_update(p, g, wide, v, 1, cfg), DimensionError);
}

TEST(Adam, NonFiniteGradientNamesTheParameter) {
  auto params = init_parameters(ModelConfig{}, 1);
  auto state = init_adam(params);
  params.modalities[1].gate.bias.mutable_grad()[3] = std::nan("");
  const auto msg = expect_numerical([&] { adam_step(params, state, TrainConfig{}); });
  EXPECT_NE(msg.find("visual.gate.bias"), std::string::npos) << msg;
  EXPECT_EQ(state.step, 0u);
}

TEST(Adam, FrozenGroupsStayFixed) {
  auto params = init_parameters(ModelConfig{}, 2);
  auto state = init_adam(params);
  for (auto n : params.named()) {
    for (double& g : n.tensor.mutable_grad()) g = 0.1;
  }
  TrainConfig cfg;
  cfg.ablation = Ablation::no_film;
  const auto before = params.clone();
  adam_step(params, state, cfg);
  auto a = params.named(), b = before.named();
  for (std::size_t k = 0; k < a.size(); ++k) {
    const bool same = std::equal(a[k].tensor.data().begin(), a[k].tensor.data().end(), b[k].tensor.data().begin());
    EXPECT_EQ(same, param_group(a[k].name) == ParamGroup::film) << a[k].name;
  }
}

// --- batches ---------------------------------------------------------------------

TEST(Batches, PackingKeepsDialoguesWholeAndOrdered) {
  std::vector<Dialogue> ds;
  for (std::size_t len : {5u, 9u, 40u, 3u, 20u, 12u}) {
    Dialogue d;
    d.id = ds.size();
    d.utterances.resize(len, Utterance{0, 0, {{0.0}}});
    ds.push_back(d);
  }
  std::vector<const Dialogue*> order;
  for (const auto& d : ds) order.push_back(&d);
  const auto batches = pack_batches(order, 32);
  std::vector<std::size_t> seen;
  for (const auto& b : batches) {
    std::size_t n = 0;
    for (const Dialogue* d : b) {
      n += d->utterances.size();
      seen.push_back(d->id);
    }
    if (b.size() > 1) {
      EXPECT_LE(n, 32u);
    }
  }
  EXPECT_EQ(seen, (std::vector<std::size_t>{0, 1, 2, 3, 4, 5}));
  EXPECT_EQ(batches.size(), 4u);  // {5,9} {40} {3,20} {12}
}

TEST(Batches, HistoryStaysInsideEachDialogue) {
  auto s = small_splits();
  std::vector<const Dialogue*> two{&s.train.dialogues[0], &s.train.dialogues[1]};
  const std::size_t len0 = two[0]->utterances.size();
  Batch b = make_batch(two, 2, std::vector<std::size_t>{12, 12}, 4);
  ASSERT_EQ(b.size(), len0 + two[1]->utterances.size());
  EXPECT_TRUE(b.history[len0].empty());
  for (std::size_t i = 0; i < b.size(); ++i) {
    for (std::size_t r : b.history[i]) {
      EXPECT_LT(r, i);
      EXPECT_EQ(r < len0, i < len0);
      EXPECT_LE(i - r, 4u);
    }
  }
  EXPECT_THROW(make_batch(two, 2, std::vector<std::size_t>{12, 11}, 4), DimensionError);
}

TEST(Batches, CorpusMustFitModel) {
  auto s = small_splits();
  ModelConfig m = model_for(s.train);
  EXPECT_NO_THROW(check_corpus_fits(s.train, m));
  m.modality_dims = {12, 10};
  EXPECT_THROW(check_corpus_fits(s.train, m), DimensionError);
}

TEST(Weights, InverseFrequency) {
  auto s = small_splits();
  const auto h = s.train.emotion_histogram();
  const auto w = inverse_frequency_weights(s.train);
  const double n = static_cast<double>(s.train.utterance_count());
  for (std::size_t e = 0; e < h.size(); ++e) {
    EXPECT_NEAR(w[e] * static_cast<double>(h[e]), n / static_cast<double>(h.size()), 1e-9);
  }
}

// --- evaluation ----------------------------------------------------------------------

TEST(Evaluate, ChunkingDoesNotChangePredictions) {
  auto s = small_splits(160);
  auto params = init_parameters(model_for(s.train), 3);
  const auto ev = evaluate(params, s.train, Ablation::full);
  std::vector<const Dialogue*> all;
  for (const auto& d : s.train.dialogues) all.push_back(&d);
  ASSERT_GT(all.size(), eval_chunk_dialogues);
  NoGradGuard ng;
  Batch b = make_batch(all, 2, params.config.modality_dims, params.config.context_window);
  EXPECT_EQ(ev.predictions, argmax_rows(forward(params, b).emotion_logits));
  EXPECT_EQ(ev.labels, b.emotions);
  EXPECT_EQ(ev.confusion.total(), s.train.utterance_count());
}

// --- training loop ----------------------------------------------------------------

TEST(Train, ZeroEpochsReturnsInitialModel) {
  auto s = small_splits();
  auto r = train(s, model_for(s.train), short_run(0));
  EXPECT_TRUE(r.curve.empty());
  EXPECT_TRUE(same_values(r.checkpoint.params, init_parameters(model_for(s.train), 5)));
}

TEST(Train, SameSeedIsBitIdentical) {
  auto s = small_splits();
  auto a = train(s, model_for(s.train), short_run(3));
  auto b = train(s, model_for(s.train), short_run(3));
  EXPECT_TRUE(encode_checkpoint(a.checkpoint) == encode_checkpoint(b.checkpoint));
  TrainConfig other = short_run(3);
  other.seed = 6;
  EXPECT_FALSE(same_values(a.checkpoint.params, train(s, model_for(s.train), other).checkpoint.params));
}

TEST(Train, ResumeMatchesUninterruptedRun) {
  auto s = small_splits();
  const auto model = model_for(s.train);
  auto full = train(s, model, short_run(5));
  TempDir dir("resume");
  save_checkpoint(train(s, model, short_run(2)).checkpoint, dir / "ck.bin");
  const Checkpoint loaded = load_checkpoint(dir / "ck.bin");
  auto rest = train(s, model, short_run(5), &loaded);
  EXPECT_EQ(rest.curve.size(), 3u);
  EXPECT_TRUE(encode_checkpoint(rest.checkpoint) == encode_checkpoint(full.checkpoint));

  TrainConfig changed = short_run(5);
  changed.lambda = 0.2;
  EXPECT_THROW(train(s, model, changed, &loaded), ConfigError);
}

TEST(Train, EmptySplitsAreConfigErrors) {
  auto s = small_splits();
  CorpusSplits no_train = s;
  no_train.train.dialogues.clear();
  EXPECT_THROW(train(no_train, model_for(s.train), short_run(1)), ConfigError);
  CorpusSplits no_val = s;
  no_val.validation.dialogues.clear();
  EXPECT_THROW(train(no_val, model_for(s.train), short_run(1)), ConfigError);
}

TEST(Train, DivergenceIsNumericalError) {
  auto s = small_splits();
  TrainConfig t = short_run(3);
  t.learning_rate = 1e300;
  expect_numerical([&] { train(s, model_for(s.train), t); });
}

TEST(Train, LearnsWellAboveMajorityBaseline) {
  GeneratorConfig g;
  auto splits = split_corpus(generate_corpus(g).corpus, SplitFractions{}, 11);
  TrainConfig t;
  t.epochs = 10;
  t.seed = 100;
  auto r = train(splits, model_for(splits.train), t);
  ASSERT_EQ(r.curve.size(), 10u);
  EXPECT_LT(r.curve.back().train_loss, r.curve.front().train_loss);

  // Majority-class predictor on the test split.
  const auto h = splits.test.emotion_histogram();
  const std::size_t major = static_cast<std::size_t>(std::max_element(h.begin(), h.end()) - h.begin());
  const std::vector<std::size_t> preds(splits.test.utterance_count(), major);
  std::vector<std::size_t> labels;
  for (const auto& d : splits.test.dialogues) {
    for (const auto& u : d.utterances) labels.push_back(u.emotion);
  }
  const double baseline = weighted_f1(confusion_matrix(preds, labels, g.num_emotions));
  const double model = evaluate(r.checkpoint.best_params, splits.test, Ablation::full).weighted_f1;
  EXPECT_GE(model, baseline + 0.20) << "model " << model << " baseline " << baseline;
}

TEST(Train, PatienceStopsEarly) {
  auto s = small_splits();
  TrainConfig t = short_run(40);
  t.patience = 1;
  t.learning_rate = 1e-6;
  auto r = train(s, model_for(s.train), t);
  EXPECT_TRUE(r.checkpoint.stopped);
  EXPECT_LT(r.curve.size(), 40u);
  EXPECT_EQ(r.checkpoint.epochs_since_best, 1u);
}

// --- checkpoints -------------------------------------------------------------------

TEST(Checkpoint, SaveLoadRoundTrip) {
  auto s = small_splits();
  auto r = train(s, model_for(s.train), short_run(2), nullptr, json{{"note", "x"}});
  TempDir dir("ckpt");
  save_checkpoint(r.checkpoint, dir / "a.bin");
  const auto back = load_checkpoint(dir / "a.bin");
  EXPECT_TRUE(back == r.checkpoint);
  EXPECT_EQ(back.metadata, (json{{"note", "x"}}));
  EXPECT_TRUE(encode_checkpoint(back) == encode_checkpoint(r.checkpoint));
}

TEST(Checkpoint, CorruptionIsLoadError) {
  auto bytes = encode_checkpoint(init_model(ModelConfig{}, TrainConfig{}));
  EXPECT_NO_THROW(decode_checkpoint(bytes));
  EXPECT_THROW(decode_checkpoint(std::string_view(bytes).substr(0, bytes.size() - 10)), LoadError);

  std::string flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x40;
  EXPECT_THROW(decode_checkpoint(flipped), LoadError);

  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad_magic), LoadError);

  std::string v2 = bytes;
  v2[8] = 2;
  try {
    decode_checkpoint(v2);
    ADD_FAILURE() << "version 2 accepted";
  } catch (const LoadError& e) {
    EXPECT_NE(std::string(e.what()).find("version 2"), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, MissingFileIsIoError) {
  TempDir dir("nofile");
  EXPECT_THROW(load_checkpoint(dir / "absent.bin"), IoError);
}

TEST(TrainConfigJson, StrictKeysAndRoundTrip) {
  TrainConfig t;
  t.lambda = 0.2;
  t.ablation = Ablation::no_gate;
  EXPECT_EQ(train_config_from_json(to_json_value(t)), t);
  EXPECT_EQ(train_config_from_json(json{{"lambda", 0.5}}).lambda, 0.5);
  EXPECT_THROW(train_config_from_json(json{{"lamda", 0.5}}), ConfigError);
  EXPECT_THROW(train_config_from_json(json{{"ablation", "no_text"}}), ConfigError);
  TrainConfig bad;
  bad.lambda = -1.0;
  EXPECT_THROW(bad.validate(), ConfigError);
}
