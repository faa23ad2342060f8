#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "kd/autograd.hpp"
#include "kd/ops.hpp"
#include "kd/rng.hpp"
#include "kd/tensor.hpp"

// Compares reverse-mode gradients against central finite differences,
// (f(x+h) - f(x-h)) / 2h, computed with a freshly built graph per probe.
// Error is normalized as |a - n| / max(1, |a|, |n|), so tiny gradients are
// judged on absolute error and large ones on relative error.

struct GradCheckReport {
  double max_err = 0.0;
  std::string where;
  bool ok(double tol = 1e-4) const { return max_err <= tol; }
};

using ScalarFn = std::function<kd::Var(const std::vector<kd::Var>&)>;

inline GradCheckReport grad_check(const std::vector<kd::Tensor>& inputs,
                                  const ScalarFn& fn, double step = 1e-5) {
  using kd::Tensor;
  using kd::Var;

  std::vector<Var> leaves;
  leaves.reserve(inputs.size());
  for (const auto& t : inputs) leaves.push_back(Var::leaf(t, true));
  Var out = fn(leaves);
  kd::backward(out);
  std::vector<Tensor> analytic;
  analytic.reserve(leaves.size());
  for (auto& l : leaves) analytic.push_back(l.grad());

  auto eval = [&](const std::vector<Tensor>& xs) {
    std::vector<Var> vs;
    vs.reserve(xs.size());
    for (const auto& t : xs) vs.push_back(Var::leaf(t, false));
    return fn(vs).value().item();
  };

  GradCheckReport rep;
  std::vector<Tensor> probe = inputs;
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    for (std::int64_t i = 0; i < inputs[ti].numel(); ++i) {
      double orig = probe[ti][i];
      probe[ti][i] = orig + step;
      double fp = eval(probe);
      probe[ti][i] = orig - step;
      double fm = eval(probe);
      probe[ti][i] = orig;
      double numeric = (fp - fm) / (2.0 * step);
      double a = analytic[ti][i];
      double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      if (err > rep.max_err) {
        rep.max_err = err;
        rep.where = "input " + std::to_string(ti) + " element " + std::to_string(i) +
                    " analytic " + std::to_string(a) + " numeric " + std::to_string(numeric);
      }
    }
  }
  return rep;
}

// Uniform values in [lo, hi] from a fixed-seed stream.
inline kd::Tensor random_tensor(kd::Rng& rng, std::vector<std::int64_t> shape,
                                double lo = -1.0, double hi = 1.0) {
  kd::Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// Weighted sum with fixed random weights, so every output element's gradient
// path is exercised with a distinct scale. Weights are re-derived from the
// seed on every call: grad_check re-evaluates the function many times and the
// probed function must be deterministic.
inline kd::Var weighted_sum(const kd::Var& y, std::uint64_t seed) {
  kd::Rng rng(seed);
  kd::Tensor w(y.shape());
  for (std::int64_t i = 0; i < w.numel(); ++i) w[i] = rng.uniform(0.5, 1.5);
  return kd::sum(kd::mul(y, kd::Var::leaf(w, false)));
}
