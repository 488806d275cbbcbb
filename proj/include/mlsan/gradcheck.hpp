#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mlsan/errors.hpp"
#include "mlsan/tensor.hpp"

namespace mlsan {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t scalars_checked = 0;
  std::size_t kink_retries = 0;  // scalars re-evaluated with a smaller step
};

// Error between analytic and numeric derivatives: relative, except when both
// magnitudes are below 1e-8, where the absolute difference is used.
inline double gradient_discrepancy(double analytic, double numeric) {
  const double diff = std::abs(analytic - numeric);
  const double scale = std::max(std::abs(analytic), std::abs(numeric));
  if (scale < 1e-8) return diff;
  return diff / scale;
}

// Central-difference check of every scalar in `params` against the analytic
// gradient of the scalar produced by `loss_fn`, using (f(x+h) - f(x-h)) / 2h.
// If a stencil point changes the ReLU on/off pattern of the base point, the
// scalar is retried with a step ten times smaller, up to `max_refinements`
// times. `loss_fn` must rebuild its graph from the current parameter values
// on every call.
inline GradCheckResult finite_difference_check(const std::function<Tensor()>& loss_fn,
                                               std::vector<NamedTensor>& params, double step,
                                               int max_refinements = 4) {
  if (!(step > 0.0)) throw ContractError("finite-difference step must be positive");

  for (auto& p : params) p.tensor.zero_grad();
  Tensor loss = loss_fn();
  const double base = loss.item();
  backward(loss);
  {
    NoGradGuard no_grad;
    if (loss_fn().item() != base) {
      throw DeterminismError("loss function is not deterministic: repeated evaluation differs");
    }
  }

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) {
    analytic.emplace_back(p.tensor.grad().begin(), p.tensor.grad().end());
  }

  GradCheckResult result;
  NoGradGuard no_grad;
  auto evaluate = [&](std::uint64_t& sig) {
    sig = 0xcbf29ce484222325ull;
    detail::kink_signature = &sig;
    double v;
    try {
      v = loss_fn().item();
    } catch (...) {
      detail::kink_signature = nullptr;
      throw;
    }
    detail::kink_signature = nullptr;
    return v;
  };
  std::uint64_t base_sig = 0;
  evaluate(base_sig);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto values = params[k].tensor.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double original = values[i];
      double h = step;
      double numeric = 0.0;
      for (int attempt = 0;; ++attempt) {
        bool smooth = true;
        auto at = [&](double offset) {
          values[i] = original + offset;
          std::uint64_t sig = 0;
          const double v = evaluate(sig);
          smooth = smooth && sig == base_sig;
          return v;
        };
        const double f1 = at(h), b1 = at(-h);
        values[i] = original;
        numeric = (f1 - b1) / (2.0 * h);
        if (smooth || attempt == max_refinements) break;
        if (attempt == 0) ++result.kink_retries;
        h /= 10.0;
      }
      const double err = gradient_discrepancy(analytic[k][i], numeric);
      ++result.scalars_checked;
      if (err > result.max_relative_error || result.worst_parameter.empty()) {
        if (err >= result.max_relative_error) {
          result.max_relative_error = err;
          result.worst_parameter = params[k].name;
          result.worst_index = i;
          result.worst_analytic = analytic[k][i];
          result.worst_numeric = numeric;
        }
      }
    }
  }
  return result;
}

}  // namespace mlsan
