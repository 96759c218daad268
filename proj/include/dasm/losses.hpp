#pragma once

#include <cstddef>
#include <vector>

#include "dasm/error.hpp"
#include "dasm/gap_modulator.hpp"
#include "dasm/model.hpp"
#include "dasm/tensor.hpp"

namespace dasm {

// One mini-batch: features, binary labels (0 cover / 1 stego) and domain
// indices (0 cover, 1..S stego algorithms).
struct LabeledBatch {
  Tensor x;            // [B, d], constant leaf
  std::vector<int> y;  // {0, 1}
  std::vector<int> d;  // {0..S}

  std::size_t size() const { return y.size(); }

  void validate() const {
    if (!x.defined() || x.rank() != 2) throw ShapeError("batch features must be [B,d]");
    const std::size_t batch = x.shape()[0];
    if (y.size() != batch || d.size() != batch) {
      throw ShapeError("batch label/domain length mismatch");
    }
    for (std::size_t i = 0; i < batch; ++i) {
      if (y[i] != 0 && y[i] != 1) throw InputError("labels must be 0 or 1");
      if ((y[i] == 0) != (d[i] == 0)) {
        throw InputError("cover samples must carry domain 0 and vice versa");
      }
    }
  }
};

// Mean of -log softmax(logits)[y], stabilized by subtracting the detached
// row maximum (a constant shift leaves the softmax gradient exact).
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& y) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy: logits must be [B,C]");
  const std::size_t batch = logits.shape()[0], classes = logits.shape()[1];
  if (y.size() != batch || batch == 0) {
    throw ShapeError("cross_entropy: label count mismatch");
  }
  std::vector<double> row_max(batch);
  std::vector<double> max_mat(batch * classes);
  std::vector<double> onehot(batch * classes, 0.0);
  for (std::size_t i = 0; i < batch; ++i) {
    if (y[i] < 0 || static_cast<std::size_t>(y[i]) >= classes) {
      throw InputError("cross_entropy: label out of range");
    }
    double m = logits.values()[i * classes];
    for (std::size_t c = 1; c < classes; ++c) {
      m = std::max(m, logits.values()[i * classes + c]);
    }
    row_max[i] = m;
    for (std::size_t c = 0; c < classes; ++c) max_mat[i * classes + c] = m;
    onehot[i * classes + static_cast<std::size_t>(y[i])] = 1.0;
  }
  Tensor shifted = sub(logits, Tensor::from({batch, classes}, std::move(max_mat)));
  Tensor lse = add(log(sum(exp(shifted), 1)), Tensor::from({batch}, std::move(row_max)));
  Tensor picked = sum(mul(logits, Tensor::from({batch, classes}, std::move(onehot))), 1);
  return mean(sub(lse, picked));
}

struct DsclResult {
  Tensor loss;
  std::size_t active_anchors = 0;
  // Set when every anchor lacked a positive; the loss is then an exact 0
  // constant.
  bool all_excluded = false;
};

// Domain-supervised contrastive loss. For each anchor i with positives
// P(i) = {j : d_j = d_i, j != i} and negatives N(i) = {j : d_j != d_i}:
//   term_i = -log(S_i+ / (S_i+ + S_i-)),  S_i± = sum exp(z_i.z_j / tau)
// averaged over anchors with non-empty P(i). Excluded anchors are rewritten
// to ratio 1 inside the graph, which contributes exactly zero value and
// zero gradient.
inline DsclResult dscl(const Tensor& z_normalized, const std::vector<int>& d,
                       double tau) {
  if (tau <= 0.0) throw ConfigError("dscl: temperature must be positive");
  if (z_normalized.rank() != 2) throw ShapeError("dscl: features must be [B,D]");
  const std::size_t batch = z_normalized.shape()[0];
  if (d.size() != batch) throw ShapeError("dscl: domain length mismatch");

  std::vector<double> pos(batch * batch, 0.0), negm(batch * batch, 0.0);
  std::vector<double> incl(batch, 0.0), excl(batch, 0.0);
  std::size_t active = 0;
  for (std::size_t i = 0; i < batch; ++i) {
    bool has_pos = false;
    for (std::size_t j = 0; j < batch; ++j) {
      if (i == j) continue;
      if (d[i] == d[j]) {
        pos[i * batch + j] = 1.0;
        has_pos = true;
      } else {
        negm[i * batch + j] = 1.0;
      }
    }
    if (has_pos) {
      incl[i] = 1.0;
      ++active;
    } else {
      excl[i] = 1.0;
    }
  }
  if (active == 0) return {Tensor::scalar(0.0), 0, true};

  Tensor sims = scale(matmul(z_normalized, transpose(z_normalized)), 1.0 / tau);
  Tensor sim_exp = exp(sims);
  Tensor s_pos = sum(mul(sim_exp, Tensor::from({batch, batch}, std::move(pos))), 1);
  Tensor s_neg = sum(mul(sim_exp, Tensor::from({batch, batch}, std::move(negm))), 1);
  // excluded anchors: S+ -> 1, S- -> 0, hence log(1) = 0 with no gradient
  s_pos = add(s_pos, Tensor::from({batch}, std::move(excl)));
  s_neg = mul(s_neg, Tensor::from({batch}, std::move(incl)));
  Tensor terms = neg(log(divide(s_pos, add(s_pos, s_neg))));
  Tensor loss = scale(sum(terms), 1.0 / static_cast<double>(active));
  return {loss, active, false};
}

struct LossBreakdown {
  double ce = 0.0;
  double dscl = 0.0;
  double adgm = 0.0;
  double total = 0.0;
  bool dscl_all_excluded = false;
  bool adgm_inactive = false;
};

struct TotalLossOptions {
  double tau = 0.1;
  double xi = kDefaultXi;
  bool use_dscl = true;
  bool use_adgm = true;
};

struct TotalLossResult {
  Tensor total;
  Tensor logits;
  Tensor features_normalized;
  LossBreakdown parts;
  GapState gaps;
};

namespace detail {

inline TotalLossResult total_loss_impl(const EncoderClassifier& model,
                                       const LabeledBatch& batch,
                                       const DomainCenterBank& bank,
                                       DomainCenterBank* bank_to_update,
                                       const TotalLossOptions& opt,
                                       const std::vector<double>* frozen_weights) {
  batch.validate();
  auto out = model.forward(batch.x);
  Tensor zn = normalize_rows(out.features, opt.xi);
  // center update precedes the gap computation and reads values only
  if (bank_to_update) bank_to_update->update(zn, batch.d);

  TotalLossResult res;
  res.logits = out.logits;
  res.features_normalized = zn;

  Tensor ce = cross_entropy(out.logits, batch.y);

  Tensor dscl_term = Tensor::scalar(0.0);
  if (opt.use_dscl) {
    DsclResult ds = dscl(zn, batch.d, opt.tau);
    dscl_term = ds.loss;
    res.parts.dscl_all_excluded = ds.all_excluded;
  }

  Tensor adgm_term = Tensor::scalar(0.0);
  if (opt.use_adgm) {
    res.gaps = compute_gaps(bank, zn, batch.d, frozen_weights);
    adgm_term = adgm_loss(res.gaps, opt.xi);
    res.parts.adgm_inactive = !res.gaps.active;
  }

  res.total = add(add(ce, dscl_term), adgm_term);
  res.parts.ce = ce.item();
  res.parts.dscl = dscl_term.item();
  res.parts.adgm = adgm_term.item();
  res.parts.total = res.total.item();
  return res;
}

}  // namespace detail

// L_total = L_CE + L_DSCL + L_ADGM with unit coefficients. Disabled
// components contribute an exact zero. The center bank is read, never
// updated here.
inline TotalLossResult total_loss(const EncoderClassifier& model,
                                  const LabeledBatch& batch,
                                  const DomainCenterBank& bank,
                                  const TotalLossOptions& opt,
                                  const std::vector<double>* frozen_weights = nullptr) {
  return detail::total_loss_impl(model, batch, bank, nullptr, opt, frozen_weights);
}

// First pass of a domain-aware step: the EMA centers absorb this batch's
// detached features before the gaps and weights are computed.
inline TotalLossResult total_loss_with_center_update(const EncoderClassifier& model,
                                                     const LabeledBatch& batch,
                                                     DomainCenterBank& bank,
                                                     const TotalLossOptions& opt) {
  return detail::total_loss_impl(model, batch, bank, &bank, opt, nullptr);
}

}  // namespace dasm
