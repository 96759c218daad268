#include "dasm/optimizers.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "dasm/rng.hpp"
#include "support/finite_diff.hpp"

using namespace dasm;

namespace {

// Two-domain Gaussian toy: cover at the origin, stego shifted by `gap`
// along the first axis.
DomainDataset toy_dataset(std::size_t per_class, double gap, std::uint64_t seed,
                          std::size_t dim = 6) {
  DomainDataset ds;
  ds.er = 0.5;
  ds.dim = dim;
  ds.num_stego_domains = 1;
  ds.domain_names = {"cover", "stego"};
  Rng rng(seed);
  auto fill = [&](SplitData& split, std::size_t n) {
    split.dim = dim;
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> row(dim);
      for (auto& v : row) v = rng.normal();
      split.push_row(row, 0, 0, i * 2);
      for (auto& v : row) v = rng.normal();
      row[0] += gap;
      split.push_row(row, 1, 1, i * 2 + 1);
    }
  };
  fill(ds.train, per_class);
  fill(ds.val, per_class / 2 + 4);
  fill(ds.test, per_class / 2 + 4);
  return ds;
}

// Three-domain variant: two stego algorithms at different separations.
DomainDataset toy_dataset_two_stego(std::size_t per_class, std::uint64_t seed,
                                    std::size_t dim = 6) {
  DomainDataset ds;
  ds.er = 0.5;
  ds.dim = dim;
  ds.num_stego_domains = 2;
  ds.domain_names = {"cover", "near", "far"};
  Rng rng(seed);
  auto fill = [&](SplitData& split, std::size_t n) {
    split.dim = dim;
    std::size_t id = 0;
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> row(dim);
      for (auto& v : row) v = rng.normal();
      split.push_row(row, 0, 0, id++);
      for (auto& v : row) v = rng.normal();
      row[0] += 0.8;
      split.push_row(row, 1, 1, id++);
      for (auto& v : row) v = rng.normal();
      row[1] += 2.0;
      split.push_row(row, 1, 2, id++);
    }
  };
  fill(ds.train, per_class);
  fill(ds.val, per_class / 2 + 4);
  fill(ds.test, per_class / 2 + 4);
  return ds;
}

ModelConfig toy_model_config(std::size_t dim = 6) {
  ModelConfig cfg;
  cfg.input_dim = dim;
  cfg.hidden = {10};
  cfg.feature_dim = 6;
  cfg.init_seed = 21;
  return cfg;
}

// 1/2 (l1 x^2 + l2 y^2) built define-by-run over a two-scalar parameter set.
struct QuadraticProbe {
  ParameterSet params;
  double l1, l2;

  QuadraticProbe(double x0, double y0, double lam1, double lam2)
      : l1(lam1), l2(lam2) {
    params.add(Tensor::scalar(x0, true));
    params.add(Tensor::scalar(y0, true));
  }

  Tensor loss() {
    Tensor x = params[0], y = params[1];
    return add(scale(mul(x, x), 0.5 * l1), scale(mul(y, y), 0.5 * l2));
  }
};

}  // namespace

TEST(Perturbation, WorkedExample) {
  std::vector<double> g = {3.0, 4.0};
  auto eps = perturbation(g, 0.03, 1e-8);
  EXPECT_NEAR(eps[0], 0.018, 1e-15);
  EXPECT_NEAR(eps[1], 0.024, 1e-15);
  EXPECT_NEAR(l2_norm(eps), 0.03, 1e-15);
}

TEST(Perturbation, DegenerateCases) {
  std::vector<double> g = {3.0, 4.0};
  auto eps = perturbation(g, 0.0, 1e-8);
  EXPECT_EQ(eps, (std::vector<double>{0.0, 0.0}));
  std::vector<double> zero = {0.0, 0.0};
  eps = perturbation(zero, 0.03, 1e-8);
  EXPECT_EQ(eps, (std::vector<double>{0.0, 0.0}));
}

TEST(Perturbation, NormEqualsRhoToRounding) {
  Rng rng(60);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> g(500);
    for (auto& v : g) v = rng.normal();
    const double rho = rng.uniform(0.001, 0.2);
    auto eps = perturbation(g, rho, 1e-8);
    EXPECT_LE(std::fabs(l2_norm(eps) - rho), 1e-12 * rho);
  }
}

TEST(TwoPass, QuadraticPerturbedGradientMatchesClosedForm) {
  const double l1 = 10.0, l2 = 0.1, rho = 0.5;
  QuadraticProbe q(1.0, 1.0, l1, l2);
  auto loss_fn = [&] { return q.loss(); };
  auto res = two_pass_gradient(q.params, loss_fn, loss_fn, rho, 1e-8);

  // closed form: g = (l1 x, l2 y); eps = rho g/||g||; g_adv = Lambda(theta+eps)
  const double gx = l1 * 1.0, gy = l2 * 1.0;
  const double norm = std::hypot(gx, gy);
  const double ex = rho * gx / norm, ey = rho * gy / norm;
  EXPECT_NEAR(res.grad[0], gx, 1e-12);
  EXPECT_NEAR(res.grad[1], gy, 1e-12);
  EXPECT_NEAR(res.grad_adv[0], l1 * (1.0 + ex), 1e-12);
  EXPECT_NEAR(res.grad_adv[1], l2 * (1.0 + ey), 1e-12);

  // the sharp axis is amplified relatively more than a plain gradient step
  const double amp_sharp = std::fabs(res.grad_adv[0] / gx);
  const double amp_flat = std::fabs(res.grad_adv[1] / gy);
  EXPECT_GT(amp_sharp, amp_flat);
  EXPECT_TRUE(res.restored_exact);
}

TEST(TwoPass, QuadraticSamConvergesToOriginNeighborhood) {
  const double rho = 0.05, eta = 0.05;
  QuadraticProbe q(2.0, -1.5, 4.0, 1.0);
  auto loss_fn = [&] { return q.loss(); };
  double prev = loss_fn().item();
  for (int it = 0; it < 200; ++it) {
    auto res = two_pass_gradient(q.params, loss_fn, loss_fn, rho, 1e-8);
    sgd_update(q.params, res.grad_adv, eta);
    const double cur = loss_fn().item();
    // monotone descent holds while the iterate is well outside the
    // perturbation radius; inside it SAM orbits the origin
    const double dist = std::hypot(q.params[0].item(), q.params[1].item());
    if (dist > 2.0 * rho) EXPECT_LE(cur, prev + 1e-12);
    prev = cur;
  }
  EXPECT_LT(std::fabs(q.params[0].item()), 2.0 * rho);
  EXPECT_LT(std::fabs(q.params[1].item()), 2.0 * rho);
  EXPECT_LT(prev, 1e-2);
}

TEST(TwoPass, QuadraticOriginIsExactFixedPoint) {
  QuadraticProbe q(0.0, 0.0, 4.0, 1.0);
  auto loss_fn = [&] { return q.loss(); };
  auto res = two_pass_gradient(q.params, loss_fn, loss_fn, 0.05, 1e-8);
  EXPECT_TRUE(res.eps_zero);  // zero gradient triggers the degenerate rule
  sgd_update(q.params, res.grad_adv, 0.05);
  EXPECT_DOUBLE_EQ(q.params[0].item(), 0.0);
  EXPECT_DOUBLE_EQ(q.params[1].item(), 0.0);
}

TEST(Trainer, PassCountsPerKind) {
  auto data = toy_dataset(16, 2.0, 7);
  auto batch = data.train.batch(std::vector<std::size_t>{0, 1, 2, 3});

  for (auto kind : {OptimizerKind::adam, OptimizerKind::erm}) {
    EncoderClassifier model(toy_model_config());
    TrainConfig cfg;
    cfg.kind = kind;
    Trainer tr(model, cfg, 1);
    auto t = tr.step(batch);
    EXPECT_EQ(t.forward_passes, 1u);
    EXPECT_EQ(t.backward_passes, 1u);
  }
  for (auto kind : {OptimizerKind::sam, OptimizerKind::dasm}) {
    EncoderClassifier model(toy_model_config());
    TrainConfig cfg;
    cfg.kind = kind;
    Trainer tr(model, cfg, 1);
    auto t = tr.step(batch);
    EXPECT_EQ(t.forward_passes, 2u);
    EXPECT_EQ(t.backward_passes, 2u);
    EXPECT_TRUE(t.restored_exact);
    EXPECT_NEAR(t.eps_norm, cfg.rho, 1e-12 * cfg.rho);
  }
}

TEST(Trainer, NetChangeComesOnlyFromBaseUpdate) {
  auto data = toy_dataset(16, 2.0, 8);
  auto batch = data.train.batch(std::vector<std::size_t>{0, 1, 2, 3, 4, 5});
  EncoderClassifier model(toy_model_config());
  TrainConfig cfg;
  cfg.kind = OptimizerKind::dasm;
  cfg.base = BaseUpdate::sgd;
  cfg.eta = 0.01;
  Trainer tr(model, cfg, 1);

  auto before = model.params().flatten();
  TotalLossOptions opt;
  opt.tau = cfg.tau;
  opt.xi = cfg.xi;
  // run the real step
  tr.step(batch);
  auto after = model.params().flatten();

  // twin replay with the same init to capture g_adv
  EncoderClassifier model2(toy_model_config());

  DomainCenterBank bank(1, model2.config().feature_dim, cfg.mu, cfg.xi);
  TotalLossResult first, second;
  auto loss1 = [&] {
    first = total_loss_with_center_update(model2, batch, bank, opt);
    return first.total;
  };
  auto loss2 = [&] {
    const std::vector<double>* frozen =
        first.gaps.active ? &first.gaps.weights : nullptr;
    second = total_loss(model2, batch, bank, opt, frozen);
    return second.total;
  };
  auto res = two_pass_gradient(model2.params(), loss1, loss2, cfg.rho, cfg.xi);
  std::vector<double> expected(before.size());
  for (std::size_t i = 0; i < before.size(); ++i) {
    expected[i] = before[i] - cfg.eta * res.grad_adv[i];
  }
  ASSERT_EQ(after.size(), expected.size());
  EXPECT_EQ(std::memcmp(after.data(), expected.data(),
                        after.size() * sizeof(double)), 0);
}

TEST(Trainer, FrozenWeightsSharedAcrossBothPasses) {
  auto data = toy_dataset_two_stego(24, 9);
  std::vector<std::size_t> idx = {0, 1, 2, 3, 4, 5, 6, 7, 9, 10, 11};
  auto batch = data.train.batch(idx);

  EncoderClassifier model(toy_model_config());
  TrainConfig cfg;
  cfg.kind = OptimizerKind::dasm;
  cfg.rho = 0.5;  // large radius so pass-2 gaps clearly move
  Trainer tr(model, cfg, 2);
  tr.step(batch);  // initialize the bank
  auto pre_step = model.params().flatten();

  // twin replay of the second step with an identical bank state: the
  // trainer's first step updated the bank once, from the initial model's
  // detached features
  EncoderClassifier twin(toy_model_config());
  twin.params().assign(pre_step);
  DomainCenterBank bank_twin(2, twin.config().feature_dim, cfg.mu, cfg.xi);
  {
    EncoderClassifier init(toy_model_config());
    auto out = init.forward(batch.x);
    bank_twin.update(normalize_rows(out.features, cfg.xi), batch.d);
  }

  auto t2 = tr.step(batch);
  ASSERT_FALSE(t2.weights.empty());

  // replay pass 1 on the twin
  TotalLossOptions opt{cfg.tau, cfg.xi, true, true};
  auto first = total_loss_with_center_update(twin, batch, bank_twin, opt);
  ASSERT_EQ(first.gaps.weights.size(), t2.weights.size());
  for (std::size_t i = 0; i < t2.weights.size(); ++i) {
    EXPECT_DOUBLE_EQ(first.gaps.weights[i], t2.weights[i]);
  }

  // perturb the twin exactly like the trainer did
  twin.params().zero_grad();
  backward(first.total);
  auto g = twin.params().flatten_grad();
  auto eps = perturbation(g, cfg.rho, cfg.xi);
  twin.params().add_in_place(eps);

  auto frozen_res = total_loss(twin, batch, bank_twin, opt, &first.gaps.weights);
  // the trainer's perturbed breakdown must match the frozen-weight variant
  EXPECT_DOUBLE_EQ(t2.at_perturbed.adgm, frozen_res.parts.adgm);

  // the freeze matters: had the bank moved between the passes, recomputed
  // weights would differ, while passing the frozen vector pins them
  auto out2 = twin.forward(batch.x);
  bank_twin.update(normalize_rows(out2.features, cfg.xi), batch.d);
  auto moved_fresh = total_loss(twin, batch, bank_twin, opt, nullptr);
  auto moved_frozen = total_loss(twin, batch, bank_twin, opt, &first.gaps.weights);
  EXPECT_NE(moved_fresh.gaps.weights, first.gaps.weights);
  EXPECT_EQ(moved_frozen.gaps.weights, first.gaps.weights);
}

TEST(Trainer, RhoZeroCeOnlyReducesToAdam) {
  auto data = toy_dataset(32, 1.5, 10);
  EncoderClassifier model_dasm(toy_model_config());
  EncoderClassifier model_adam(toy_model_config());

  TrainConfig cfg_dasm;
  cfg_dasm.kind = OptimizerKind::dasm;
  cfg_dasm.rho = 0.0;
  cfg_dasm.use_dscl = false;
  cfg_dasm.use_adgm = false;
  TrainConfig cfg_adam;
  cfg_adam.kind = OptimizerKind::adam;

  Trainer td(model_dasm, cfg_dasm, 1);
  Trainer ta(model_adam, cfg_adam, 1);

  Rng plan_rng(99);
  auto batches = plan_batches(data.train, 16, true, 2, plan_rng);
  std::size_t steps = 0;
  for (const auto& idx : batches) {
    if (steps++ >= 10) break;
    auto batch = data.train.batch(idx);
    auto t1 = td.step(batch);
    auto t2 = ta.step(batch);
    // trajectory equality to the last bit
    EXPECT_EQ(t1.at_theta.ce, t2.at_theta.ce) << "step " << steps;
    EXPECT_EQ(t1.at_theta.total, t2.at_theta.total);
  }
  auto f1 = model_dasm.params().flatten();
  auto f2 = model_adam.params().flatten();
  for (std::size_t i = 0; i < f1.size(); ++i) EXPECT_EQ(f1[i], f2[i]);
}

TEST(Trainer, SamRhoZeroReducesToErm) {
  auto data = toy_dataset(32, 1.5, 11);
  EncoderClassifier model_sam(toy_model_config());
  EncoderClassifier model_erm(toy_model_config());

  TrainConfig cfg_sam;
  cfg_sam.kind = OptimizerKind::sam;
  cfg_sam.rho = 0.0;
  cfg_sam.base = BaseUpdate::sgd;
  TrainConfig cfg_erm;
  cfg_erm.kind = OptimizerKind::erm;
  cfg_erm.base = BaseUpdate::sgd;

  Trainer ts(model_sam, cfg_sam, 1);
  Trainer te(model_erm, cfg_erm, 1);

  Rng plan_rng(98);
  auto batches = plan_batches(data.train, 16, true, 2, plan_rng);
  std::size_t steps = 0;
  for (const auto& idx : batches) {
    if (steps++ >= 10) break;
    auto batch = data.train.batch(idx);
    auto t1 = ts.step(batch);
    auto t2 = te.step(batch);
    EXPECT_EQ(t1.at_theta.ce, t2.at_theta.ce);
  }
}

TEST(PlanBatches, StratifiedKeepsAllDomainsPerBatch) {
  auto data = toy_dataset(64, 1.0, 12);
  Rng rng(1);
  auto batches = plan_batches(data.train, 16, true, 2, rng);
  std::size_t seen = 0;
  for (const auto& b : batches) {
    bool has_cover = false, has_stego = false;
    for (std::size_t idx : b) {
      if (data.train.d[idx] == 0) has_cover = true;
      if (data.train.d[idx] == 1) has_stego = true;
    }
    EXPECT_TRUE(has_cover);
    EXPECT_TRUE(has_stego);
    seen += b.size();
  }
  EXPECT_EQ(seen, data.train.rows());
}

TEST(PlanBatches, PlainShuffleCoversEveryIndexOnce) {
  auto data = toy_dataset(40, 1.0, 13);
  Rng rng(2);
  auto batches = plan_batches(data.train, 13, false, 2, rng);
  std::vector<int> seen(data.train.rows(), 0);
  for (const auto& b : batches) {
    for (std::size_t idx : b) ++seen[idx];
  }
  for (int c : seen) EXPECT_EQ(c, 1);
}

TEST(Train, ZeroEpochsReportsInitialMetricsOnly) {
  auto data = toy_dataset(16, 2.0, 14);
  EncoderClassifier model(toy_model_config());
  TrainConfig cfg;
  cfg.kind = OptimizerKind::adam;
  cfg.epochs = 0;
  Trainer tr(model, cfg, 1);
  auto report = tr.train(data);
  EXPECT_EQ(report.epochs_run, 0u);
  EXPECT_EQ(report.steps, 0u);
  ASSERT_EQ(report.rows.size(), 2u);  // cover + stego at epoch 0
  EXPECT_EQ(report.rows[0].epoch, 0u);
}

TEST(Train, SeparableToyReachesPerfectTrainAccuracy) {
  auto data = toy_dataset(48, 6.0, 15);
  EncoderClassifier model(toy_model_config());
  TrainConfig cfg;
  cfg.kind = OptimizerKind::dasm;
  cfg.epochs = 50;
  cfg.batch_size = 16;
  cfg.eta = 3e-3;
  Trainer tr(model, cfg, 1);
  auto report = tr.train(data);
  EXPECT_DOUBLE_EQ(report.final_train_accuracy, 1.0);
}

TEST(Train, FixedSeedGivesIdenticalReports) {
  auto data = toy_dataset(24, 1.0, 16);
  TrainConfig cfg;
  cfg.kind = OptimizerKind::dasm;
  cfg.epochs = 4;
  cfg.batch_size = 12;
  cfg.seed = 5;

  EncoderClassifier m1(toy_model_config());
  auto r1 = Trainer(m1, cfg, 1).train(data);
  EncoderClassifier m2(toy_model_config());
  auto r2 = Trainer(m2, cfg, 1).train(data);
  EXPECT_TRUE(r1.metrics_equal(r2));
  EXPECT_EQ(r1.config_echo, r2.config_echo);
}

TEST(Train, EarlyStoppingRestoresBestModel) {
  auto data = toy_dataset(24, 1.2, 17);
  EncoderClassifier model(toy_model_config());
  TrainConfig cfg;
  cfg.kind = OptimizerKind::adam;
  cfg.epochs = 30;
  cfg.patience = 3;
  cfg.batch_size = 12;
  cfg.eta = 0.05;  // aggressive on purpose so validation loss oscillates
  Trainer tr(model, cfg, 1);
  auto report = tr.train(data);

  auto final_eval = evaluate_model(model, data.val, data.domain_names);
  EXPECT_DOUBLE_EQ(final_eval.overall_ce, report.best_val_loss);
  for (const auto& row : report.rows) {
    (void)row;  // per-epoch validation never beats the recorded best
  }
  double best_seen = 1e300;
  for (const auto& row : report.rows) {
    if (row.domain == "stego") best_seen = std::min(best_seen, row.ce);
  }
  EXPECT_LE(report.best_val_loss, best_seen + 1e-12);
}

TEST(Train, EmptySplitRejected) {
  DomainDataset empty;
  empty.dim = 4;
  empty.num_stego_domains = 1;
  empty.domain_names = {"cover", "stego"};
  EncoderClassifier model(toy_model_config(4));
  TrainConfig cfg;
  Trainer tr(model, cfg, 1);
  EXPECT_THROW(tr.train(empty), ConfigError);
}
