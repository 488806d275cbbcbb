#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "mlsan/errors.hpp"

namespace mlsan {

// counts[t][p]: rows are true classes, columns predictions.
struct ConfusionMatrix {
  std::size_t classes = 0;
  std::vector<std::uint64_t> counts;

  explicit ConfusionMatrix(std::size_t n = 0) : classes(n), counts(n * n, 0) {}

  std::uint64_t at(std::size_t truth, std::size_t predicted) const { return counts[truth * classes + predicted]; }
  std::uint64_t& at(std::size_t truth, std::size_t predicted) { return counts[truth * classes + predicted]; }

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto c : counts) t += c;
    return t;
  }
  std::uint64_t support(std::size_t cls) const {
    std::uint64_t s = 0;
    for (std::size_t p = 0; p < classes; ++p) s += at(cls, p);
    return s;
  }
  std::uint64_t predicted(std::size_t cls) const {
    std::uint64_t s = 0;
    for (std::size_t t = 0; t < classes; ++t) s += at(t, cls);
    return s;
  }

  bool operator==(const ConfusionMatrix&) const = default;
};

inline ConfusionMatrix confusion_matrix(std::span<const std::size_t> predictions,
                                        std::span<const std::size_t> labels, std::size_t classes) {
  if (predictions.size() != labels.size()) {
    throw ContractError("confusion_matrix: " + std::to_string(predictions.size()) + " predictions for " +
                        std::to_string(labels.size()) + " labels");
  }
  ConfusionMatrix cm(classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= classes || predictions[i] >= classes) {
      throw IndexError("confusion_matrix: class index outside " + std::to_string(classes) + " classes");
    }
    ++cm.at(labels[i], predictions[i]);
  }
  return cm;
}

// F1 per class; 0 when precision + recall is 0 (including classes that are
// neither present nor predicted).
inline std::vector<double> per_class_f1(const ConfusionMatrix& cm) {
  std::vector<double> f1(cm.classes, 0.0);
  for (std::size_t c = 0; c < cm.classes; ++c) {
    const double tp = static_cast<double>(cm.at(c, c));
    const double pred = static_cast<double>(cm.predicted(c));
    const double sup = static_cast<double>(cm.support(c));
    const double precision = pred > 0 ? tp / pred : 0.0;
    const double recall = sup > 0 ? tp / sup : 0.0;
    f1[c] = precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
  }
  return f1;
}

inline void require_nonempty(const ConfusionMatrix& cm) {
  if (cm.classes == 0 || cm.total() == 0) throw ContractError("metric undefined on an empty confusion matrix");
}

inline double weighted_f1(const ConfusionMatrix& cm) {
  require_nonempty(cm);
  const auto f1 = per_class_f1(cm);
  double acc = 0.0;
  for (std::size_t c = 0; c < cm.classes; ++c) acc += f1[c] * static_cast<double>(cm.support(c));
  return acc / static_cast<double>(cm.total());
}

inline double macro_f1(const ConfusionMatrix& cm) {
  require_nonempty(cm);
  const auto f1 = per_class_f1(cm);
  double acc = 0.0;
  for (double v : f1) acc += v;
  return acc / static_cast<double>(cm.classes);
}

inline double accuracy(const ConfusionMatrix& cm) {
  require_nonempty(cm);
  std::uint64_t diag = 0;
  for (std::size_t c = 0; c < cm.classes; ++c) diag += cm.at(c, c);
  return static_cast<double>(diag) / static_cast<double>(cm.total());
}

struct SeedAggregate {
  std::size_t n = 0;
  double mean = 0.0;
  std::optional<double> std;  // sample (n - 1) standard deviation; absent for n = 1
};

inline SeedAggregate aggregate_seeds(std::span<const double> values) {
  if (values.empty()) throw ContractError("aggregate_seeds needs at least one value");
  SeedAggregate a;
  a.n = values.size();
  double s = 0.0;
  for (double v : values) s += v;
  a.mean = s / static_cast<double>(a.n);
  if (a.n > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - a.mean) * (v - a.mean);
    a.std = std::sqrt(ss / static_cast<double>(a.n - 1));
  }
  return a;
}

struct PairedDeltas {
  std::vector<double> deltas;  // reference - candidate, per seed
  std::size_t positive = 0;    // seeds where the reference is strictly better
};

inline PairedDeltas paired_deltas(std::span<const double> reference, std::span<const double> candidate) {
  if (reference.size() != candidate.size()) throw ContractError("paired_deltas needs equal-length runs");
  PairedDeltas out;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    out.deltas.push_back(reference[i] - candidate[i]);
    out.positive += reference[i] > candidate[i];
  }
  return out;
}

}  // namespace mlsan
