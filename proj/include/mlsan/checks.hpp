#pragma once

// Finite-difference suite over every differentiable operation and over the
// whole model under each ablation.

#include <random>
#include <string>
#include <vector>

#include "mlsan/gradcheck.hpp"
#include "mlsan/layers.hpp"
#include "mlsan/synth.hpp"
#include "mlsan/tensor.hpp"
#include "mlsan/train.hpp"

namespace mlsan {

inline constexpr double gradcheck_tolerance = 1e-4;
inline constexpr double gradcheck_step = 1e-5;

struct GradCheckCase {
  std::string name;
  GradCheckResult result;
  bool passed = false;
};

namespace detail {

inline Tensor random_tensor(std::mt19937_64& rng, Shape shape, bool requires_grad = true) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> v(shape_size(shape));
  for (double& x : v) x = normal(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

// Values kept away from the ReLU kink so central differences stay smooth.
inline Tensor away_from_zero(std::mt19937_64& rng, Shape shape) {
  std::uniform_real_distribution<double> mag(0.2, 1.5);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> v(shape_size(shape));
  for (double& x : v) x = sign(rng) ? mag(rng) : -mag(rng);
  return Tensor(std::move(shape), std::move(v), true);
}

// Weighted sum so every output element reaches the loss with a distinct weight.
inline Tensor probe(const Tensor& y, const Tensor& w) { return sum(mul(y, w)); }

}  // namespace detail

// A small batch from the default synthetic generator shaped for `cfg`, with
// one speaker input replaced by the OOV id so the OOV row is exercised.
inline Batch gradcheck_batch(const ModelConfig& cfg, std::uint64_t seed) {
  GeneratorConfig g;
  g.num_speakers = cfg.num_speakers;
  g.num_emotions = cfg.num_emotions;
  if (cfg.num_modalities() != 2) throw ContractError("gradcheck batch expects two modalities");
  g.d_audio = cfg.modality_dims[0];
  g.d_visual = cfg.modality_dims[1];
  g.dialogues = 2;
  g.utterances_per_dialogue = 6;
  g.speakers_per_dialogue = std::min<std::size_t>(2, cfg.num_speakers);
  g.seed = seed;
  auto sc = generate_corpus(g);
  std::vector<const Dialogue*> ds;
  for (const auto& d : sc.corpus.dialogues) ds.push_back(&d);
  Batch b = make_batch(ds, cfg.num_modalities(), cfg.modality_dims, cfg.context_window);
  b.speaker_inputs[1] = static_cast<std::int64_t>(cfg.oov_row());
  return b;
}

inline GradCheckCase check_model(const ModelConfig& cfg, Ablation ablation, double lambda, std::uint64_t seed) {
  ModelParameters params = init_parameters(cfg, seed);
  // Move FiLM and the heads off their structured initial values so every
  // path carries a generic gradient.
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
  std::normal_distribution<double> jitter(0.0, 0.3);
  for (auto& p : params.named()) {
    if (param_group(p.name) == ParamGroup::film) {
      for (double& v : p.tensor.mutable_data()) v += jitter(rng);
    }
  }
  const Batch batch = gradcheck_batch(cfg, seed);
  auto named = params.named();
  auto loss_fn = [&]() {
    ForwardPass fp = forward(params, batch, ablation);
    return batch_loss(fp, batch, lambda, ablation).total;
  };
  GradCheckCase c;
  c.name = "model/" + std::string(to_string(ablation));
  c.result = finite_difference_check(loss_fn, named, gradcheck_step);
  c.passed = c.result.max_relative_error <= gradcheck_tolerance;
  return c;
}

inline std::vector<GradCheckCase> gradcheck_suite(const ModelConfig& cfg = ModelConfig{}, std::uint64_t seed = 3) {
  std::vector<GradCheckCase> out;
  std::mt19937_64 rng(seed);
  auto run = [&out](std::string name, const std::function<Tensor()>& f, std::vector<NamedTensor> params) {
    GradCheckCase c;
    c.name = std::move(name);
    c.result = finite_difference_check(f, params, gradcheck_step);
    c.passed = c.result.max_relative_error <= gradcheck_tolerance;
    out.push_back(std::move(c));
  };
  using detail::probe;
  using detail::random_tensor;

  {
    Tensor a = random_tensor(rng, {3, 4}), b = random_tensor(rng, {4, 5}), w = random_tensor(rng, {3, 5}, false);
    run("op/matmul", [&] { return probe(matmul(a, b), w); }, {{"a", a}, {"b", b}});
  }
  for (BinaryOp op : {BinaryOp::add, BinaryOp::sub, BinaryOp::mul}) {
    const char* label = op == BinaryOp::add ? "add" : op == BinaryOp::sub ? "sub" : "mul";
    Tensor a = random_tensor(rng, {3, 4}), b = random_tensor(rng, {3, 4}), row = random_tensor(rng, {4});
    Tensor w = random_tensor(rng, {3, 4}, false);
    run(std::string("op/") + label, [&] { return probe(elementwise(op, a, b), w); }, {{"a", a}, {"b", b}});
    run(std::string("op/") + label + "_row_broadcast", [&] { return probe(elementwise(op, a, row), w); },
        {{"a", a}, {"row", row}});
  }
  {
    Tensor x = random_tensor(rng, {3, 4}), w = random_tensor(rng, {3, 4}, false);
    run("op/scale", [&] { return probe(scale(x, -1.7), w); }, {{"x", x}});
    run("op/sigmoid", [&] { return probe(sigmoid(x), w); }, {{"x", x}});
  }
  {
    Tensor x = detail::away_from_zero(rng, {3, 4}), w = random_tensor(rng, {3, 4}, false);
    run("op/relu", [&] { return probe(relu(x), w); }, {{"x", x}});
  }
  {
    Tensor a = random_tensor(rng, {3, 2}), b = random_tensor(rng, {3, 3}), w = random_tensor(rng, {3, 5}, false);
    run("op/concat_cols", [&] { return probe(concat_cols(a, b), w); }, {{"a", a}, {"b", b}});
  }
  {
    Tensor t = random_tensor(rng, {4, 3}), w = random_tensor(rng, {5, 3}, false);
    const std::vector<std::size_t> idx{2, 0, 2, 3, 1};
    run("op/gather_rows", [&] { return probe(gather_rows(t, idx), w); }, {{"table", t}});
  }
  {
    Tensor x = random_tensor(rng, {4, 3}), w = random_tensor(rng, {4, 3}, false);
    const std::vector<std::vector<std::size_t>> groups{{}, {0}, {0, 1}, {0, 1, 2}};
    run("op/mean_rows", [&] { return probe(mean_rows(x, groups), w); }, {{"x", x}});
  }
  {
    Tensor z = random_tensor(rng, {5, 4});
    const std::vector<std::size_t> t{0, 3, 1, 1, 2};
    const std::vector<double> cw{0.5, 1.0, 2.0, 1.5};
    run("op/softmax_cross_entropy", [&] { return softmax_cross_entropy(z, t); }, {{"logits", z}});
    run("op/softmax_cross_entropy_weighted", [&] { return softmax_cross_entropy(z, t, cw); }, {{"logits", z}});
  }
  for (Ablation a : all_ablations) out.push_back(check_model(cfg, a, 0.5, seed));
  return out;
}

}  // namespace mlsan
