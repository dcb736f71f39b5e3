#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "kvmem/autograd.hpp"

namespace kvmem {

/// Compares tape gradients against central finite differences in 64-bit.
///
/// `f(tape, inputs)` must build a scalar from the given leaves. Returns the
/// max over every coordinate of every input of
/// |analytic - numeric| / max(1, |analytic|).
template <class F>
double grad_check(F&& f, std::vector<Tensor<double>> inputs, double eps = 1e-5) {
  auto evaluate = [&](std::vector<Tensor<double>>& xs, bool with_grad) {
    Tape<double> tape(with_grad);
    std::vector<Var> leaves;
    leaves.reserve(xs.size());
    for (auto& x : xs) leaves.push_back(tape.param(x));
    Var out = f(tape, std::span<const Var>(leaves));
    if (tape.value(out).size() != 1) {
      throw ShapeError("grad_check: function must be scalar-valued, got " +
                       shape_str(tape.value(out).shape()));
    }
    if (with_grad) tape.backward(out);
    return tape.value(out).item();
  };

  for (auto& x : inputs) {
    x.set_requires_grad(true);
    x.zero_grad();
  }
  evaluate(inputs, true);

  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    std::vector<double> analytic(inputs[i].grad().begin(), inputs[i].grad().end());
    for (std::size_t k = 0; k < inputs[i].size(); ++k) {
      const double orig = inputs[i][k];
      inputs[i][k] = orig + eps;
      const double up = evaluate(inputs, false);
      inputs[i][k] = orig - eps;
      const double down = evaluate(inputs, false);
      inputs[i][k] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double err =
          std::abs(analytic[k] - numeric) / std::max(1.0, std::abs(analytic[k]));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

/// Single-input convenience form; `f(tape, x)` returns a scalar node.
template <class F>
double grad_check(F&& f, Tensor<double> x, double eps = 1e-5) {
  return grad_check(
      [&f](Tape<double>& tape, std::span<const Var> xs) { return f(tape, xs[0]); },
      std::vector<Tensor<double>>{std::move(x)}, eps);
}

}  // namespace kvmem
