#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "cct/tensor.hpp"

// Central finite-difference oracle used across the test suites. Kept
// independent of the backward implementation: it only re-runs forwards.

namespace cct_test {

inline double rel_err(double a, double b) {
  double denom = std::max({std::fabs(a), std::fabs(b), 1e-6});
  return std::fabs(a - b) / denom;
}

// Compares tape gradients of `params` against central differences.
// `build` must re-run the whole forward from current parameter values
// and return the scalar loss; it is called O(total parameter count)
// times. Returns the worst relative error seen.
inline double max_grad_rel_err(cct::Tape& tape, std::vector<cct::Tensor> params,
                               const std::function<cct::Tensor()>& build,
                               double h = 1e-5) {
  auto run = [&]() {
    tape.reset();
    return build();
  };
  cct::Tensor loss = run();
  tape.backward(loss);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) analytic.push_back(p.grad());

  double worst = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& data = params[pi].mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double save = data[i];
      data[i] = save + h;
      const double fp = run().value();
      data[i] = save - h;
      const double fm = run().value();
      data[i] = save;
      const double fd = (fp - fm) / (2.0 * h);
      worst = std::max(worst, rel_err(fd, analytic[pi][i]));
    }
  }
  tape.reset();
  return worst;
}

}  // namespace cct_test
