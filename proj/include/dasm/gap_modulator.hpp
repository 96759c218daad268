#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "dasm/error.hpp"
#include "dasm/model.hpp"
#include "dasm/tensor.hpp"

namespace dasm {

// EMA centroid per domain, index 0 = cover. Centers are plain buffers

// outside the differentiation graph.
class DomainCenterBank {
 public:
  DomainCenterBank(std::size_t num_stego_domains, std::size_t feature_dim,
                   double mu, double xi = kDefaultXi)
      : stego_domains_(num_stego_domains),
        dim_(feature_dim),
        mu_(mu),
        xi_(xi),
        centers_((num_stego_domains + 1) * feature_dim, 0.0),
        initialized_(num_stego_domains + 1, false) {
    if (mu_ < 0.0 || mu_ > 1.0) throw ConfigError("EMA momentum must be in [0,1]");
  }

  std::size_t num_stego_domains() const { return stego_domains_; }
  std::size_t feature_dim() const { return dim_; }
  double mu() const { return mu_; }
  double xi() const { return xi_; }
  std::size_t step() const { return step_; }

  bool initialized(std::size_t k) const { return initialized_.at(k); }

  std::span<const double> center(std::size_t k) const {
    return {centers_.data() + k * dim_, dim_};
  }

  // c_k <- mu*c_k + (1-mu)*mean(z rows of domain k). The first update of a
  // domain assigns the batch mean directly. Features must already be
  // detached; only their values are read.
  void update(const Tensor& z_normalized, const std::vector<int>& d) {
    if (z_normalized.rank() != 2 || z_normalized.shape()[1] != dim_) {
      throw ShapeError("center update: expected [B," + std::to_string(dim_) +
                       "] features");
    }
    const std::size_t batch = z_normalized.shape()[0];
    if (d.size() != batch) throw ShapeError("center update: label length mismatch");
    std::vector<double> sums((stego_domains_ + 1) * dim_, 0.0);
    std::vector<std::size_t> counts(stego_domains_ + 1, 0);
    for (std::size_t i = 0; i < batch; ++i) {
      if (d[i] < 0 || static_cast<std::size_t>(d[i]) > stego_domains_) {
        throw IndexError("domain index " + std::to_string(d[i]) +
                         " outside [0," + std::to_string(stego_domains_) + "]");
      }
      const std::size_t k = static_cast<std::size_t>(d[i]);
      ++counts[k];
      for (std::size_t j = 0; j < dim_; ++j) {
        sums[k * dim_ + j] += z_normalized.values()[i * dim_ + j];
      }
    }
    for (std::size_t k = 0; k <= stego_domains_; ++k) {
      if (counts[k] == 0) continue;
      double* c = centers_.data() + k * dim_;
      const double inv = 1.0 / static_cast<double>(counts[k]);
      if (!initialized_[k]) {
        for (std::size_t j = 0; j < dim_; ++j) c[j] = sums[k * dim_ + j] * inv;
        initialized_[k] = true;
      } else {
        for (std::size_t j = 0; j < dim_; ++j) {
          c[j] = mu_ * c[j] + (1.0 - mu_) * sums[k * dim_ + j] * inv;
        }
      }
    }
    ++step_;
  }

  // Checkpoint support.
  void restore_center(std::size_t k, std::span<const double> values, bool init) {
    if (k > stego_domains_ || values.size() != dim_) {
      throw ShapeError("restore_center: bad domain or dimension");
    }
    std::copy(values.begin(), values.end(), centers_.begin() + k * dim_);
    initialized_[k] = init;
  }
  void set_step(std::size_t s) { step_ = s; }

 private:
  std::size_t stego_domains_;
  std::size_t dim_;
  double mu_;
  double xi_;
  std::size_t step_ = 0;
  std::vector<double> centers_;
  std::vector<bool> initialized_;
};

// Gaps, adaptive temperature and weights for one optimization step. Gap
// tensors stay attached to the feature graph; weights and tau_g are plain
// values (stop-gradient) derived from the EMA center gaps, which are far
// smoother than single-batch mean estimates.
struct GapState {
  std::vector<std::size_t> domains;  // initialized stego domains, ascending
  std::vector<Tensor> gap_tensors;   // scalar per domain, batch-mean based
  std::vector<double> gaps;          // detached values of gap_tensors
  std::vector<double> center_gaps;   // ||c_k - c_cover|| from the EMA bank
  std::vector<double> weights;
  double tau_g = 0.0;
  bool active = false;
};

// Population standard deviation of the gap vector plus the stability
// constant.
inline double gap_temperature(std::span<const double> gaps, double xi) {
  double m = 0.0;
  for (double g : gaps) m += g;
  m /= static_cast<double>(gaps.size());
  double var = 0.0;
  for (double g : gaps) var += (g - m) * (g - m);
  var /= static_cast<double>(gaps.size());
  return std::sqrt(var) + xi;
}

// w_k = softmax(-g_k / tau_g), stabilized by shifting with the smallest gap
// so a lone domain yields exactly 1 even when tau_g collapses to xi.
inline std::vector<double> adaptive_weights(std::span<const double> gaps, double xi) {
  if (gaps.empty()) throw ContractError("adaptive_weights: empty gap vector");
  const double tau_g = gap_temperature(gaps, xi);
  double g_min = gaps[0];
  for (double g : gaps) g_min = std::min(g_min, g);
  std::vector<double> w(gaps.size());
  double z = 0.0;
  for (std::size_t k = 0; k < gaps.size(); ++k) {
    w[k] = std::exp(-(gaps[k] - g_min) / tau_g);
    z += w[k];
  }
  for (auto& x : w) x /= z;
  return w;
}

// Builds the per-step gap state. The adaptive weights, tau_g and the
// normalizing max all come from the EMA center gaps ||c_k - c_cover||.
// The differentiable gap surrogate for a domain present in the batch is the
// projection of its current-batch mean offset from the (stop-gradient) EMA
// cover center onto the domain's EMA gap direction: it estimates the same
// quantity as the center gap without the norm inflation a small-sample mean
// picks up from feature noise, and its gradient pushes the batch mean along
// the established separation direction. Initialized domains absent from the
// batch contribute their center gap as a constant; domains never seen are
// excluded. Passing frozen_weights reuses a previous weight vector (the
// second pass of a two-pass step) instead of recomputing Eq-8 weights.
inline GapState compute_gaps(const DomainCenterBank& bank, const Tensor& z_normalized,
                             const std::vector<int>& d,
                             const std::vector<double>* frozen_weights = nullptr) {
  GapState gs;
  const std::size_t S = bank.num_stego_domains();
  bool any_stego = false;
  for (std::size_t k = 1; k <= S; ++k) any_stego |= bank.initialized(k);
  if (!bank.initialized(0) || !any_stego) {
    gs.active = false;
    return gs;
  }

  const std::size_t batch = z_normalized.shape()[0];
  const std::size_t dim = bank.feature_dim();
  std::vector<std::vector<std::size_t>> members(S + 1);
  for (std::size_t i = 0; i < batch; ++i) {
    if (d[i] < 0 || static_cast<std::size_t>(d[i]) > S) {
      throw IndexError("domain index " + std::to_string(d[i]) + " outside [0," +
                       std::to_string(S) + "]");
    }
    members[static_cast<std::size_t>(d[i])].push_back(i);
  }

  auto cover = bank.center(0);
  Tensor cover_const = Tensor::from({1, dim}, {cover.begin(), cover.end()});

  for (std::size_t k = 1; k <= S; ++k) {
    if (!bank.initialized(k)) continue;
    gs.domains.push_back(k);
    auto ck = bank.center(k);
    std::vector<double> dir(dim);
    double ema_gap = 0.0;
    for (std::size_t j = 0; j < dim; ++j) {
      dir[j] = ck[j] - cover[j];
      ema_gap += dir[j] * dir[j];
    }
    ema_gap = std::sqrt(ema_gap);
    gs.center_gaps.push_back(ema_gap);
    if (!members[k].empty()) {
      std::vector<double> sel(batch, 0.0);
      const double inv = 1.0 / static_cast<double>(members[k].size());
      for (std::size_t row : members[k]) sel[row] = inv;
      Tensor mean_k = matmul(Tensor::from({1, batch}, std::move(sel)), z_normalized);
      Tensor offset = sub(mean_k, cover_const);
      if (ema_gap > 0.0) {
        for (auto& v : dir) v /= ema_gap;
        gs.gap_tensors.push_back(sum(mul(offset, Tensor::from({1, dim}, std::move(dir)))));
      } else {
        // degenerate direction: fall back to the plain offset norm
        gs.gap_tensors.push_back(l2norm(offset));
      }
    } else {
      gs.gap_tensors.push_back(Tensor::scalar(ema_gap));
    }
    gs.gaps.push_back(gs.gap_tensors.back().item());
  }

  gs.tau_g = gap_temperature(gs.center_gaps, bank.xi());
  if (frozen_weights) {
    if (frozen_weights->size() != gs.domains.size()) {
      throw ContractError("frozen weights do not match initialized domains");
    }
    gs.weights = *frozen_weights;
  } else {
    gs.weights = adaptive_weights(gs.center_gaps, bank.xi());
  }
  gs.active = true;
  return gs;
}

// L_ADGM = 1 - sum_k(w_k * g_k) / (max_k(g_k) + xi). The numerator gaps are
// differentiable through the batch means; the weights and the normalizing
// max come from the EMA center gaps, which do not depend on the current
// parameters. Routing gradient into the max would reward shrinking the
// widest gap, inverting the intended hard-domain expansion pressure, and a
// detached batch-side max would break the analytic-vs-finite-difference
// gradient equality the loss contract requires.
inline Tensor adgm_loss(const GapState& gs, double xi = kDefaultXi) {
  if (!gs.active) return Tensor::scalar(0.0);
  Tensor weighted = scale(gs.gap_tensors[0], gs.weights[0]);
  for (std::size_t k = 1; k < gs.gap_tensors.size(); ++k) {
    weighted = add(weighted, scale(gs.gap_tensors[k], gs.weights[k]));
  }
  double max_gap = gs.center_gaps[0];
  for (double g : gs.center_gaps) max_gap = std::max(max_gap, g);
  return 1.0 - divide(weighted, Tensor::scalar(max_gap + xi));
}

// Test/diagnostic helper: gap state over raw gap values (constants, no
// gradient path).
inline GapState gap_state_from_values(const std::vector<double>& gaps, double xi,
                                      const std::vector<double>* frozen = nullptr) {
  GapState gs;
  for (std::size_t k = 0; k < gaps.size(); ++k) {
    gs.domains.push_back(k + 1);
    gs.gap_tensors.push_back(Tensor::scalar(gaps[k]));
    gs.gaps.push_back(gaps[k]);
    gs.center_gaps.push_back(gaps[k]);
  }
  gs.tau_g = gap_temperature(gs.gaps, xi);
  gs.weights = frozen ? *frozen : adaptive_weights(gs.gaps, xi);
  gs.active = !gaps.empty();
  return gs;
}

}  // namespace dasm
