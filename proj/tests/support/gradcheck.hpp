#pragma once

// Finite-difference gradient oracle used across the test suites. Central
// differences with h = 1e-5 on 64-bit floats; this stays independent of the
// reverse-mode implementation it checks.

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "transfollower/tensor.hpp"

namespace tfl_test {

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_elem = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

// relative error with a floor so true-zero gradients compare cleanly
inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-4});
}

// `loss` must evaluate the scalar loss from scratch (it is called repeatedly
// with perturbed inputs). `inputs` are the leaves to differentiate.
inline GradCheckResult finite_diff_check(
    std::vector<transfollower::Tensor>& inputs,
    const std::function<double()>& loss_value,
    const std::function<void()>& run_backward, double h = 1e-5) {
  using transfollower::Tensor;

  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  run_backward();

  GradCheckResult res;
  for (std::size_t pi = 0; pi < inputs.size(); ++pi) {
    Tensor& t = inputs[pi];
    const std::vector<double> analytic = t.grad();
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double saved = t(i);
      t(i) = saved + h;
      const double fp = loss_value();
      t(i) = saved - h;
      const double fm = loss_value();
      t(i) = saved;
      const double numeric = (fp - fm) / (2.0 * h);
      const double e = rel_err(analytic[i], numeric);
      if (e > res.max_rel_err) {
        res.max_rel_err = e;
        res.worst_param = pi;
        res.worst_elem = i;
        res.analytic = analytic[i];
        res.numeric = numeric;
      }
    }
  }
  return res;
}

// Convenience wrapper when the whole computation fits in one lambda:
// builds a fresh tape, evaluates `f(inputs) -> scalar Tensor`, backprops.
inline GradCheckResult check_gradients(
    std::vector<transfollower::Tensor> inputs,
    const std::function<transfollower::Tensor(const std::vector<transfollower::Tensor>&)>& f,
    double h = 1e-5) {
  using namespace transfollower;
  auto loss_value = [&]() {
    return f(inputs).value();  // no tape active inside: pure forward
  };
  auto run_backward = [&]() {
    Tape tape;
    Tensor loss = f(inputs);
    tape.backward(loss);
  };
  return finite_diff_check(inputs, loss_value, run_backward, h);
}

inline transfollower::Tensor random_tensor(transfollower::Shape shape,
                                           transfollower::Rng& rng, double lo = -1.0,
                                           double hi = 1.0) {
  transfollower::Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t(i) = rng.uniform(lo, hi);
  return t;
}

}  // namespace tfl_test
