#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "stfm/tensor.hpp"

namespace stfm::testing {

// Central finite differences around the parameters' current values.
// `build` must recompute the scalar loss from scratch on every call; the
// analytic pass runs it once under a tape, the probing passes run it
// tape-free so nothing is recorded.
//
// Error metric per element: |fd - analytic| / max(1, |fd|, |analytic|),
// i.e. relative for O(1) gradients and absolute for vanishing ones.
// Returns the maximum over all probed elements.
inline double max_fd_error(const std::function<Tensor()>& build,
                           const std::vector<Tensor>& params,
                           double step = 1e-5, int max_probes_per_param = 0) {
  std::vector<std::vector<double>> analytic;
  {
    for (auto p : params) p.zero_grad();
    ComputationTape tape;
    Tensor loss = build();
    tape.backward(loss);
    for (const auto& p : params) analytic.push_back(p.grad());
  }
  double worst = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor p = params[pi];
    auto& x = p.mutable_value();
    const int n = static_cast<int>(x.size());
    int stride = 1;
    if (max_probes_per_param > 0 && n > max_probes_per_param)
      stride = (n + max_probes_per_param - 1) / max_probes_per_param;
    for (int i = 0; i < n; i += stride) {
      const double saved = x[static_cast<size_t>(i)];
      x[static_cast<size_t>(i)] = saved + step;
      const double lp = build().item();
      x[static_cast<size_t>(i)] = saved - step;
      const double lm = build().item();
      x[static_cast<size_t>(i)] = saved;
      const double fd = (lp - lm) / (2.0 * step);
      const double an = analytic[pi][static_cast<size_t>(i)];
      const double denom = std::max({1.0, std::fabs(fd), std::fabs(an)});
      worst = std::max(worst, std::fabs(fd - an) / denom);
    }
  }
  return worst;
}

}  // namespace stfm::testing
