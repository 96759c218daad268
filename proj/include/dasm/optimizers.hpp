#pragma once

#include <chrono>
#include <cmath>
#include <cstring>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "dasm/data.hpp"
#include "dasm/error.hpp"
#include "dasm/losses.hpp"
#include "dasm/model.hpp"
#include "dasm/param_set.hpp"
#include "dasm/report.hpp"
#include "dasm/rng.hpp"
#include "json.hpp"

namespace dasm {

enum class OptimizerKind { erm, adam, sam, dasm };
enum class BaseUpdate { sgd, adam };

inline std::string to_string(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::erm: return "erm";
    case OptimizerKind::adam: return "adam";
    case OptimizerKind::sam: return "sam";
    default: return "dasm";
  }
}

inline OptimizerKind optimizer_kind_from_string(const std::string& s) {
  if (s == "erm") return OptimizerKind::erm;
  if (s == "adam") return OptimizerKind::adam;
  if (s == "sam") return OptimizerKind::sam;
  if (s == "dasm") return OptimizerKind::dasm;
  throw ConfigError("unknown optimizer kind: " + s);
}

inline std::string to_string(BaseUpdate b) {
  return b == BaseUpdate::sgd ? "sgd" : "adam";
}

inline BaseUpdate base_update_from_string(const std::string& s) {
  if (s == "sgd") return BaseUpdate::sgd;
  if (s == "adam") return BaseUpdate::adam;
  throw ConfigError("unknown base update: " + s);
}

struct TrainConfig {
  OptimizerKind kind = OptimizerKind::dasm;
  BaseUpdate base = BaseUpdate::adam;
  double eta = 1e-3;
  double rho = 0.03;
  double tau = 0.1;
  double mu = 0.9;
  double xi = kDefaultXi;
  std::size_t batch_size = 128;
  std::size_t epochs = 100;
  std::size_t patience = 10;
  std::uint64_t seed = 1;
  bool stratified_batches = true;
  // component toggles for the domain-aware kinds; sam/erm/adam ignore them
  bool use_dscl = true;
  bool use_adgm = true;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps_adam = 1e-8;

  void validate() const {
    if (eta <= 0.0) throw ConfigError("learning rate must be positive");
    if (rho < 0.0) throw ConfigError("perturbation radius must be >= 0");
    if (tau <= 0.0) throw ConfigError("contrastive temperature must be positive");
    if (mu < 0.0 || mu > 1.0) throw ConfigError("EMA momentum must be in [0,1]");
    if (batch_size == 0) throw ConfigError("batch size must be positive");
  }

  // Every field materialized so reruns from the echo cannot drift.
  nlohmann::json to_json() const {
    return {{"kind", to_string(kind)},
            {"base", to_string(base)},
            {"eta", eta},
            {"rho", rho},
            {"tau", tau},
            {"mu", mu},
            {"xi", xi},
            {"batch_size", batch_size},
            {"epochs", epochs},
            {"patience", patience},
            {"seed", seed},
            {"stratified_batches", stratified_batches},
            {"use_dscl", use_dscl},
            {"use_adgm", use_adgm},
            {"beta1", beta1},
            {"beta2", beta2},
            {"eps_adam", eps_adam}};
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.kind = optimizer_kind_from_string(j.at("kind").get<std::string>());
    c.base = base_update_from_string(j.at("base").get<std::string>());
    c.eta = j.at("eta").get<double>();
    c.rho = j.at("rho").get<double>();
    c.tau = j.at("tau").get<double>();
    c.mu = j.at("mu").get<double>();
    c.xi = j.at("xi").get<double>();
    c.batch_size = j.at("batch_size").get<std::size_t>();
    c.epochs = j.at("epochs").get<std::size_t>();
    c.patience = j.at("patience").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.stratified_batches = j.at("stratified_batches").get<bool>();
    c.use_dscl = j.at("use_dscl").get<bool>();
    c.use_adgm = j.at("use_adgm").get<bool>();
    c.beta1 = j.at("beta1").get<double>();
    c.beta2 = j.at("beta2").get<double>();
    c.eps_adam = j.at("eps_adam").get<double>();
    return c;
  }
};

// eps_hat = rho * g / ||g||; the zero vector when rho is zero or the
// gradient norm is within the stability constant.
inline std::vector<double> perturbation(std::span<const double> grad, double rho,
                                        double xi) {
  std::vector<double> eps(grad.size(), 0.0);
  const double norm = l2_norm(grad);
  if (rho <= 0.0 || norm <= xi) return eps;
  const double s = rho / norm;
  for (std::size_t i = 0; i < grad.size(); ++i) eps[i] = s * grad[i];
  return eps;
}

struct AdamState {
  std::vector<double> m, v;
  std::size_t t = 0;

  void apply(ParameterSet& params, std::span<const double> g, double eta,
             double beta1, double beta2, double eps) {
    if (m.size() != g.size()) {
      m.assign(g.size(), 0.0);
      v.assign(g.size(), 0.0);
      t = 0;
    }
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    std::vector<double> step(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
      m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
      v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
      step[i] = -eta * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
    }
    params.add_in_place(step);
  }
};

inline void sgd_update(ParameterSet& params, std::span<const double> g, double eta) {
  std::vector<double> step(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) step[i] = -eta * g[i];
  params.add_in_place(step);
}

// Diagnostic record of one optimization step.
struct StepTrace {
  LossBreakdown at_theta;
  LossBreakdown at_perturbed;
  double grad_norm = 0.0;
  double eps_norm = 0.0;
  bool eps_zero = false;      // rho == 0 or ||g|| <= xi
  bool restored_exact = false;
  std::vector<std::size_t> gap_domains;
  std::vector<double> gaps;
  std::vector<double> weights;
  std::size_t forward_passes = 0;
  std::size_t backward_passes = 0;

  std::string dump() const {
    std::ostringstream os;
    os.precision(17);
    os << "loss@theta{ce=" << at_theta.ce << ",dscl=" << at_theta.dscl
       << ",adgm=" << at_theta.adgm << ",total=" << at_theta.total << "} "
       << "loss@perturbed{total=" << at_perturbed.total << "} "
       << "grad_norm=" << grad_norm << " eps_norm=" << eps_norm << " gaps=[";
    for (std::size_t i = 0; i < gaps.size(); ++i) os << (i ? "," : "") << gaps[i];
    os << "] weights=[";
    for (std::size_t i = 0; i < weights.size(); ++i) os << (i ? "," : "") << weights[i];
    os << "]";
    return os.str();
  }
};

// Generic skeleton of the perturb-then-update gradient pair: gradient at
// theta, normalized ascent step of radius rho, gradient at the perturbed
// point, bit-exact restore. Both losses are built define-by-run at the
// current parameter values.
struct TwoPassResult {
  double loss_at_theta = 0.0;
  double loss_at_perturbed = 0.0;
  double grad_norm = 0.0;
  double eps_norm = 0.0;
  bool eps_zero = false;
  bool restored_exact = false;
  std::vector<double> grad;
  std::vector<double> grad_adv;
};

template <class Loss1, class Loss2>
TwoPassResult two_pass_gradient(ParameterSet& params, Loss1&& loss_first,
                                Loss2&& loss_second, double rho, double xi) {
  TwoPassResult r;
  params.zero_grad();
  Tensor l1 = loss_first();
  r.loss_at_theta = l1.item();
  backward(l1);
  r.grad = params.flatten_grad();
  r.grad_norm = l2_norm(r.grad);

  std::vector<double> eps = perturbation(r.grad, rho, xi);
  r.eps_norm = l2_norm(eps);
  r.eps_zero = rho <= 0.0 || r.grad_norm <= xi;

  const std::vector<double> before = params.flatten();
  params.snapshot();
  params.add_in_place(eps);
  params.zero_grad();
  Tensor l2 = loss_second();
  r.loss_at_perturbed = l2.item();
  backward(l2);
  r.grad_adv = params.flatten_grad();

  params.restore();
  const std::vector<double> after = params.flatten();
  r.restored_exact =
      std::memcmp(before.data(), after.data(), after.size() * sizeof(double)) == 0;
  return r;
}

// Per-split evaluation. Per-domain detection accuracy is the balanced
// two-class form: the mean of the stego-domain hit rate and the cover hit
// rate, i.e. accuracy on an evenly weighted cover-vs-domain-k test.
struct EvalResult {
  std::map<std::string, double> accuracy;  // domain name -> acc, plus "avg"
  std::map<std::string, double> ce;        // domain name -> ce over (cover+k)
  double overall_ce = 0.0;
  double overall_accuracy = 0.0;
};

inline EvalResult evaluate_model(const EncoderClassifier& model,
                                 const SplitData& split,
                                 const std::vector<std::string>& domain_names) {
  const std::size_t S = domain_names.size() - 1;
  const std::size_t n = split.rows();
  if (n == 0) throw ConfigError("evaluate: empty split");

  std::vector<int> pred(n);
  std::vector<double> row_ce(n);
  const std::size_t chunk = 2048;
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t stop = std::min(n, start + chunk);
    std::vector<std::size_t> idx(stop - start);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = start + i;
    auto batch = split.batch(idx);
    auto out = model.forward(batch.x);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const double l0 = out.logits.values()[i * 2];
      const double l1 = out.logits.values()[i * 2 + 1];
      pred[start + i] = l1 > l0 ? 1 : 0;
      const double m = std::max(l0, l1);
      const double lse = m + std::log(std::exp(l0 - m) + std::exp(l1 - m));
      row_ce[start + i] = lse - (batch.y[i] == 0 ? l0 : l1);
    }
  }

  std::vector<std::size_t> correct(S + 1, 0), count(S + 1, 0);
  double ce_sum = 0.0;
  std::vector<double> ce_by_domain(S + 1, 0.0);
  std::size_t total_correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = static_cast<std::size_t>(split.d[i]);
    ++count[k];
    ce_sum += row_ce[i];
    ce_by_domain[k] += row_ce[i];
    if (pred[i] == split.y[i]) {
      ++correct[k];
      ++total_correct;
    }
  }

  EvalResult res;
  res.overall_ce = ce_sum / static_cast<double>(n);
  res.overall_accuracy = static_cast<double>(total_correct) / static_cast<double>(n);
  const double cover_acc = count[0] > 0
      ? static_cast<double>(correct[0]) / static_cast<double>(count[0]) : 0.0;
  res.accuracy[domain_names[0]] = cover_acc;
  res.ce[domain_names[0]] =
      count[0] > 0 ? ce_by_domain[0] / static_cast<double>(count[0]) : 0.0;
  const double cover_ce =
      count[0] > 0 ? ce_by_domain[0] / static_cast<double>(count[0]) : 0.0;
  double avg = 0.0;
  std::size_t present = 0;
  for (std::size_t k = 1; k <= S; ++k) {
    if (count[k] == 0) continue;
    const double stego_acc =
        static_cast<double>(correct[k]) / static_cast<double>(count[k]);
    const double acc = 0.5 * (stego_acc + cover_acc);
    res.accuracy[domain_names[k]] = acc;
    res.ce[domain_names[k]] =
        0.5 * (ce_by_domain[k] / static_cast<double>(count[k]) + cover_ce);
    avg += acc;
    ++present;
  }
  res.accuracy["avg"] = present > 0 ? avg / static_cast<double>(present) : cover_acc;
  return res;
}

// Batch index plan for one epoch. Stratified mode deals every domain into
// every batch (the contrastive and modulator losses are degenerate on
// single-domain batches); plain mode is a single shuffled stream.
inline std::vector<std::vector<std::size_t>> plan_batches(const SplitData& split,
                                                          std::size_t batch_size,
                                                          bool stratified,
                                                          std::size_t num_domains,
                                                          Rng& rng) {
  const std::size_t n = split.rows();
  if (n == 0) throw ConfigError("plan_batches: empty split");
  const std::size_t nb = (n + batch_size - 1) / batch_size;
  std::vector<std::vector<std::size_t>> batches(nb);

  if (!stratified) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    rng.shuffle(order);
    for (std::size_t i = 0; i < n; ++i) batches[i / batch_size].push_back(order[i]);
    return batches;
  }

  std::vector<std::vector<std::size_t>> by_domain(num_domains);
  for (std::size_t i = 0; i < n; ++i) {
    by_domain[static_cast<std::size_t>(split.d[i])].push_back(i);
  }
  for (auto& list : by_domain) rng.shuffle(list);
  for (const auto& list : by_domain) {
    const std::size_t m = list.size();
    for (std::size_t b = 0; b < nb; ++b) {
      const std::size_t lo = b * m / nb;
      const std::size_t hi = (b + 1) * m / nb;
      for (std::size_t i = lo; i < hi; ++i) batches[b].push_back(list[i]);
    }
  }
  for (auto& b : batches) rng.shuffle(b);
  return batches;
}

// Owns the optimization state for one run: the center bank, the base-update
// moments and the pass counters.
class Trainer {
 public:
  Trainer(EncoderClassifier& model, TrainConfig cfg, std::size_t num_stego_domains)
      : model_(model),
        cfg_(cfg),
        bank_(num_stego_domains, model.config().feature_dim, cfg.mu, cfg.xi) {
    cfg_.validate();
  }

  const TrainConfig& config() const { return cfg_; }
  const DomainCenterBank& bank() const { return bank_; }
  std::size_t total_forward_passes() const { return total_forward_; }
  std::size_t total_backward_passes() const { return total_backward_; }
  std::size_t total_steps() const { return steps_; }

  StepTrace step(const LabeledBatch& batch) {
    StepTrace tr;
    switch (cfg_.kind) {
      case OptimizerKind::erm:
      case OptimizerKind::adam:
        tr = single_pass_step(batch);
        break;
      case OptimizerKind::sam:
        tr = two_pass_step(batch, /*domain_aware=*/false);
        break;
      case OptimizerKind::dasm:
        tr = two_pass_step(batch, /*domain_aware=*/true);
        break;
    }
    total_forward_ += tr.forward_passes;
    total_backward_ += tr.backward_passes;
    ++steps_;
    return tr;
  }

  RunReport train(const DomainDataset& data) {
    cfg_.validate();
    if (data.train.rows() == 0 || data.val.rows() == 0) {
      throw ConfigError("train: empty train or validation split");
    }
    RunReport report;
    report.config_echo = {{"train", cfg_.to_json()},
                          {"data",
                           {{"er", data.er},
                            {"dim", data.dim},
                            {"stego_domains", data.num_stego_domains},
                            {"train_rows", data.train.rows()},
                            {"val_rows", data.val.rows()},
                            {"test_rows", data.test.rows()}}}};

    auto record_epoch = [&](std::size_t epoch, const EvalResult& ev, double dscl_mean,
                            double adgm_mean, double grad_mean,
                            const StepTrace* last) {
      for (std::size_t k = 0; k <= data.num_stego_domains; ++k) {
        EpochRow row;
        row.epoch = epoch;
        row.domain = data.domain_names[k];
        row.acc = ev.accuracy.count(row.domain) ? ev.accuracy.at(row.domain) : 0.0;
        row.ce = ev.ce.count(row.domain) ? ev.ce.at(row.domain) : 0.0;
        row.dscl = dscl_mean;
        row.adgm = adgm_mean;
        row.grad_norm = grad_mean;
        if (last && k > 0) {
          for (std::size_t i = 0; i < last->gap_domains.size(); ++i) {
            if (last->gap_domains[i] == k) {
              row.gap = last->gaps[i];
              row.weight = last->weights[i];
            }
          }
        }
        report.rows.push_back(std::move(row));
      }
    };

    EvalResult initial = evaluate_model(model_, data.val, data.domain_names);
    record_epoch(0, initial, 0.0, 0.0, 0.0, nullptr);

    double best_val = initial.overall_ce;
    std::size_t best_epoch = 0;
    std::vector<double> best_params = model_.params().flatten();
    DomainCenterBank best_bank = bank_;
    std::size_t since_best = 0;
    std::vector<double> batch_ms;

    Rng shuffle_rng(Rng::derive(cfg_.seed, 0x5u));
    StepTrace last_trace;
    for (std::size_t epoch = 1; epoch <= cfg_.epochs; ++epoch) {
      auto batches = plan_batches(data.train, cfg_.batch_size,
                                  cfg_.stratified_batches,
                                  data.num_stego_domains + 1, shuffle_rng);
      double dscl_sum = 0.0, adgm_sum = 0.0, grad_sum = 0.0;
      for (const auto& idx : batches) {
        auto batch = data.train.batch(idx);
        const auto t0 = std::chrono::steady_clock::now();
        last_trace = step(batch);
        const auto t1 = std::chrono::steady_clock::now();
        batch_ms.push_back(
            std::chrono::duration<double, std::milli>(t1 - t0).count());
        dscl_sum += last_trace.at_theta.dscl;
        adgm_sum += last_trace.at_theta.adgm;
        grad_sum += last_trace.grad_norm;
      }
      const double nb = static_cast<double>(batches.size());

      EvalResult ev = evaluate_model(model_, data.val, data.domain_names);
      record_epoch(epoch, ev, dscl_sum / nb, adgm_sum / nb, grad_sum / nb,
                   &last_trace);
      report.epochs_run = epoch;

      if (ev.overall_ce < best_val) {
        best_val = ev.overall_ce;
        best_epoch = epoch;
        best_params = model_.params().flatten();
        best_bank = bank_;
        since_best = 0;
      } else {
        ++since_best;
        if (since_best >= cfg_.patience) {
          report.early_stopped = true;
          break;
        }
      }
    }

    model_.params().assign(best_params);
    bank_ = best_bank;
    report.best_val_loss = best_val;
    report.best_epoch = best_epoch;

    if (data.test.rows() > 0) {
      EvalResult test_ev = evaluate_model(model_, data.test, data.domain_names);
      report.final_test_accuracy = test_ev.accuracy;
    }
    report.final_train_accuracy =
        evaluate_model(model_, data.train, data.domain_names).overall_accuracy;
    report.ms_per_batch_mean = vec_mean(batch_ms);
    report.ms_per_batch_std = vec_std(batch_ms);
    report.forward_passes = total_forward_;
    report.backward_passes = total_backward_;
    report.steps = steps_;
    return report;
  }

 private:
  TotalLossOptions loss_options(bool domain_aware) const {
    TotalLossOptions opt;
    opt.tau = cfg_.tau;
    opt.xi = cfg_.xi;
    opt.use_dscl = domain_aware && cfg_.use_dscl;
    opt.use_adgm = domain_aware && cfg_.use_adgm;
    return opt;
  }

  void check_finite(const LossBreakdown& parts, const StepTrace& tr) const {
    if (std::isfinite(parts.total)) return;
    throw NumericError("non-finite loss; step trace: " + tr.dump());
  }

  void apply_base_update(std::span<const double> g) {
    if (cfg_.base == BaseUpdate::adam) {
      adam_.apply(model_.params(), g, cfg_.eta, cfg_.beta1, cfg_.beta2,
                  cfg_.eps_adam);
    } else {
      sgd_update(model_.params(), g, cfg_.eta);
    }
  }

  StepTrace single_pass_step(const LabeledBatch& batch) {
    StepTrace tr;
    batch.validate();
    model_.params().zero_grad();
    auto out = model_.forward(batch.x);
    Tensor ce = cross_entropy(out.logits, batch.y);
    tr.at_theta.ce = ce.item();
    tr.at_theta.total = tr.at_theta.ce;
    tr.at_perturbed = tr.at_theta;
    check_finite(tr.at_theta, tr);
    backward(ce);
    auto g = model_.params().flatten_grad();
    tr.grad_norm = l2_norm(g);
    tr.eps_zero = true;
    tr.restored_exact = true;
    tr.forward_passes = 1;
    tr.backward_passes = 1;
    apply_base_update(g);
    return tr;
  }

  // Algorithm: update centers from the first forward's detached features,
  // freeze the adaptive weights, evaluate/backprop L_total at theta, perturb
  // by eps_hat, evaluate/backprop L_total at theta+eps_hat with the same
  // weights and batch, restore, then apply the base update with g_adv.
  StepTrace two_pass_step(const LabeledBatch& batch, bool domain_aware) {
    StepTrace tr;
    const TotalLossOptions opt = loss_options(domain_aware);

    TotalLossResult first, second;
    auto loss1 = [&]() {
      first = total_loss_with_center_update(model_, batch, bank_, opt);
      tr.at_theta = first.parts;
      check_finite(first.parts, tr);
      return first.total;
    };
    auto loss2 = [&]() {
      const std::vector<double>* frozen =
          first.gaps.active ? &first.gaps.weights : nullptr;
      second = total_loss(model_, batch, bank_, opt, frozen);
      tr.at_perturbed = second.parts;
      check_finite(second.parts, tr);
      return second.total;
    };

    TwoPassResult res =
        two_pass_gradient(model_.params(), loss1, loss2, cfg_.rho, cfg_.xi);
    tr.grad_norm = res.grad_norm;
    tr.eps_norm = res.eps_norm;
    tr.eps_zero = res.eps_zero;
    tr.restored_exact = res.restored_exact;
    tr.forward_passes = 2;
    tr.backward_passes = 2;
    if (first.gaps.active) {
      tr.gap_domains = first.gaps.domains;
      tr.gaps = first.gaps.center_gaps;  // Alg-1 semantics: ||c_k - c_cover||
      tr.weights = first.gaps.weights;
    }
    apply_base_update(res.grad_adv);
    return tr;
  }

  EncoderClassifier& model_;
  TrainConfig cfg_;
  DomainCenterBank bank_;
  AdamState adam_;
  std::size_t total_forward_ = 0;
  std::size_t total_backward_ = 0;
  std::size_t steps_ = 0;
};

}  // namespace dasm
