#pragma once

// Central-difference gradient oracles. They evaluate forward values only, so
// they stay independent of the reverse-mode path they are used to check.

#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "dasm/param_set.hpp"
#include "dasm/tensor.hpp"

namespace testsupport {

inline std::vector<double> central_diff(dasm::Tensor& leaf,
                                        const std::function<double()>& eval,
                                        double h = 1e-5) {
  auto v = leaf.raw_values();
  std::vector<double> g(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double orig = v[i];
    v[i] = orig + h;
    const double fp = eval();
    v[i] = orig - h;
    const double fm = eval();
    v[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

inline std::vector<double> central_diff_params(dasm::ParameterSet& params,
                                               const std::function<double()>& eval,
                                               double h = 1e-5) {
  std::vector<double> g;
  g.reserve(params.size());
  for (std::size_t p = 0; p < params.count(); ++p) {
    auto piece = central_diff(params[p], eval, h);
    g.insert(g.end(), piece.begin(), piece.end());
  }
  return g;
}

// Relative tolerance away from zero, absolute tolerance near zero.
inline void expect_grad_close(std::span<const double> analytic,
                              std::span<const double> numeric,
                              double rel_tol = 1e-4, double abs_tol = 1e-7) {
  ASSERT_EQ(analytic.size(), numeric.size());
  double worst_rel = 0.0;
  std::size_t worst_idx = 0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double diff = std::fabs(analytic[i] - numeric[i]);
    if (diff <= abs_tol) continue;
    const double denom = std::max(std::fabs(analytic[i]), std::fabs(numeric[i]));
    const double rel = diff / denom;
    if (rel > worst_rel) {
      worst_rel = rel;
      worst_idx = i;
    }
  }
  EXPECT_LE(worst_rel, rel_tol)
      << "worst mismatch at flat index " << worst_idx << ": analytic "
      << analytic[worst_idx] << " vs numeric " << numeric[worst_idx];
}

}  // namespace testsupport
