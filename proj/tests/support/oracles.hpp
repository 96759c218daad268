#pragma once

// Independent reference computations used to freeze expected values. All of
// these are written directly from the defining formulas with plain doubles;
// none of them touch the graph machinery under test.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

namespace testsupport {

// Pairwise double-loop contrastive loss: for each anchor with a non-empty
// positive set, term = -log(S+ / (S+ + S-)); average over those anchors.
inline double dscl_bruteforce(const std::vector<std::vector<double>>& z,
                              const std::vector<int>& d, double tau) {
  const std::size_t n = z.size();
  double total = 0.0;
  std::size_t active = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double s_pos = 0.0, s_neg = 0.0;
    bool has_pos = false;
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      double dot = 0.0;
      for (std::size_t k = 0; k < z[i].size(); ++k) dot += z[i][k] * z[j][k];
      if (d[i] == d[j]) {
        s_pos += std::exp(dot / tau);
        has_pos = true;
      } else {
        s_neg += std::exp(dot / tau);
      }
    }
    if (!has_pos) continue;
    total += -std::log(s_pos / (s_pos + s_neg));
    ++active;
  }
  return active == 0 ? 0.0 : total / static_cast<double>(active);
}

// Eq-8 weights recomputed without the library's stabilization path.
inline std::vector<double> adaptive_weights_reference(const std::vector<double>& gaps,
                                                      double xi) {
  double m = 0.0;
  for (double g : gaps) m += g;
  m /= static_cast<double>(gaps.size());
  double var = 0.0;
  for (double g : gaps) var += (g - m) * (g - m);
  const double tau_g = std::sqrt(var / static_cast<double>(gaps.size())) + xi;
  std::vector<double> e(gaps.size());
  double z = 0.0;
  for (std::size_t k = 0; k < gaps.size(); ++k) {
    e[k] = std::exp(-gaps[k] / tau_g);
    z += e[k];
  }
  for (auto& x : e) x /= z;
  return e;
}

// Eq-9 scalar recomputation from raw gaps and weights.
inline double adgm_reference(const std::vector<double>& gaps,
                             const std::vector<double>& weights, double xi) {
  double num = 0.0, mx = gaps[0];
  for (std::size_t k = 0; k < gaps.size(); ++k) {
    num += weights[k] * gaps[k];
    mx = std::max(mx, gaps[k]);
  }
  return 1.0 - num / (mx + xi);
}

// Per-row softmax cross entropy reference.
inline double softmax_ce_reference(const std::vector<double>& logits_row, int label) {
  double m = logits_row[0];
  for (double v : logits_row) m = std::max(m, v);
  double z = 0.0;
  for (double v : logits_row) z += std::exp(v - m);
  return -(logits_row[static_cast<std::size_t>(label)] - m - std::log(z));
}

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline double population_std(const std::vector<double>& v) {
  const double m = mean_of(v);
  double var = 0.0;
  for (double x : v) var += (x - m) * (x - m);
  return std::sqrt(var / static_cast<double>(v.size()));
}

}  // namespace testsupport
