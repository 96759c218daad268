#include "dasm/harness.hpp"

#include <gtest/gtest.h>

#include <filesystem>

using namespace dasm;

namespace {

BenchmarkConfig tiny_bench() {
  BenchmarkConfig cfg = BenchmarkConfig::defaults();
  cfg.input_dim = 8;
  cfg.samples_per_cell = 120;
  cfg.embedding_rates = {0.2, 0.5};
  cfg.seed = 41;
  // raise the separations so a few short epochs learn something
  for (auto& d : cfg.domains) d.base_gap *= 2.0;
  return cfg;
}

ModelConfig tiny_model() {
  ModelConfig cfg;
  cfg.input_dim = 8;
  cfg.hidden = {12};
  cfg.feature_dim = 6;
  return cfg;
}

TrainConfig quick_train() {
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 32;
  cfg.patience = 5;
  return cfg;
}

// first `per_domain` row indices of each domain present in the split
std::vector<std::size_t> mixed_rows(const SplitData& split, std::size_t num_domains,
                                    std::size_t per_domain) {
  std::vector<std::size_t> idx;
  for (std::size_t k = 0; k < num_domains; ++k) {
    std::size_t taken = 0;
    for (std::size_t i = 0; i < split.rows() && taken < per_domain; ++i) {
      if (static_cast<std::size_t>(split.d[i]) == k) {
        idx.push_back(i);
        ++taken;
      }
    }
  }
  return idx;
}

}  // namespace

TEST(Matrix, SingleCellSummaryEqualsThatReport) {
  auto data = gen_feature_benchmark(tiny_bench());
  ExperimentMatrix m;
  m.optimizers = {OptimizerKind::adam};
  m.embedding_rates = {0.5};
  m.seeds = {1};
  m.train = quick_train();
  m.model = tiny_model();
  m.jobs = 1;

  auto summary = run_matrix(m, data);
  ASSERT_EQ(summary.cells.size(), 1u);
  ASSERT_EQ(summary.rows.size(), 1u);
  EXPECT_FALSE(summary.any_failed);
  EXPECT_EQ(summary.rows[0].n_seeds, 1u);
  for (const auto& [dom, acc] : summary.cells[0].report.final_test_accuracy) {
    EXPECT_DOUBLE_EQ(summary.rows[0].mean_acc.at(dom), acc);
    EXPECT_DOUBLE_EQ(summary.rows[0].std_acc.at(dom), 0.0);
  }
}

TEST(Matrix, SeedAxisAggregatesOverExactlyThreeValues) {
  auto data = gen_feature_benchmark(tiny_bench());
  ExperimentMatrix m;
  m.optimizers = {OptimizerKind::adam};
  m.embedding_rates = {0.2};
  m.seeds = {1, 2, 3};
  m.train = quick_train();
  m.model = tiny_model();
  m.jobs = 2;

  auto summary = run_matrix(m, data);
  ASSERT_EQ(summary.cells.size(), 3u);
  ASSERT_EQ(summary.rows[0].n_seeds, 3u);

  // summary aggregation equals independent recomputation from the cells
  std::vector<double> avgs;
  for (const auto& c : summary.cells) {
    avgs.push_back(c.report.final_test_accuracy.at("avg"));
  }
  EXPECT_NEAR(summary.rows[0].mean_acc.at("avg"), vec_mean(avgs), 1e-15);
  EXPECT_NEAR(summary.rows[0].std_acc.at("avg"), vec_std(avgs), 1e-15);
}

TEST(Matrix, FailedCellDoesNotAbortTheRest) {
  auto data = gen_feature_benchmark(tiny_bench());
  ExperimentMatrix m;
  m.optimizers = {OptimizerKind::adam};
  m.embedding_rates = {0.5, 0.7};  // no dataset at 0.7
  m.seeds = {1};
  m.train = quick_train();
  m.model = tiny_model();
  m.jobs = 1;

  auto summary = run_matrix(m, data);
  ASSERT_EQ(summary.cells.size(), 2u);
  EXPECT_TRUE(summary.any_failed);
  EXPECT_FALSE(summary.cells[0].failed);
  EXPECT_TRUE(summary.cells[1].failed);
  EXPECT_FALSE(summary.cells[1].error.empty());
}

TEST(Matrix, WritesCellReportsAndSummary) {
  namespace fs = std::filesystem;
  auto data = gen_feature_benchmark(tiny_bench());
  ExperimentMatrix m;
  m.optimizers = {OptimizerKind::sam};
  m.embedding_rates = {0.5};
  m.seeds = {1};
  m.train = quick_train();
  m.model = tiny_model();
  m.jobs = 1;

  const std::string dir = "harness_test_matrix";
  run_matrix(m, data, dir);
  EXPECT_TRUE(fs::exists(dir + "/matrix_summary.csv"));
  EXPECT_TRUE(fs::exists(dir + "/cells/sam_er0.5_seed1.json"));
  EXPECT_TRUE(fs::exists(dir + "/cells/sam_er0.5_seed1.csv"));
  fs::remove_all(dir);
}

TEST(Matrix, CellRerunsBitExactlyFromConfigEcho) {
  auto data = gen_feature_benchmark(tiny_bench());
  const auto& ds = dataset_for_er(data, 0.5);
  auto cell = run_cell("dasm", OptimizerKind::dasm, ds, quick_train(),
                       tiny_model(), 7);
  ASSERT_FALSE(cell.failed);

  TrainConfig cfg = TrainConfig::from_json(cell.report.config_echo.at("train"));
  ModelConfig mc = model_config_from_json(cell.report.config_echo.at("model"));
  EncoderClassifier model(mc);
  Trainer trainer(model, cfg, ds.num_stego_domains);
  auto rerun = trainer.train(ds);
  EXPECT_TRUE(cell.report.metrics_equal(rerun));
}

TEST(Ablation, VariantsEnableExactlyTheirComponents) {
  auto data = gen_feature_benchmark(tiny_bench());
  const auto& ds = dataset_for_er(data, 0.5);
  auto variants = ablation_variants(quick_train());
  ASSERT_EQ(variants.size(), 4u);

  auto batch = ds.train.batch(mixed_rows(ds.train, 5, 6));

  std::map<std::string, StepTrace> traces;
  for (const auto& v : variants) {
    ModelConfig mc = tiny_model();
    EncoderClassifier model(mc);
    Trainer trainer(model, v.cfg, ds.num_stego_domains);
    trainer.step(batch);  // bank warm-up
    traces[v.name] = trainer.step(batch);
  }

  EXPECT_EQ(traces["baseline-adam"].at_theta.dscl, 0.0);
  EXPECT_EQ(traces["baseline-adam"].at_theta.adgm, 0.0);
  EXPECT_GT(traces["dscl-only"].at_theta.dscl, 0.0);
  EXPECT_EQ(traces["dscl-only"].at_theta.adgm, 0.0);
  EXPECT_EQ(traces["adgm-only"].at_theta.dscl, 0.0);
  EXPECT_GT(traces["adgm-only"].at_theta.adgm, 0.0);
  EXPECT_GT(traces["dasm-full"].at_theta.dscl, 0.0);
  EXPECT_GT(traces["dasm-full"].at_theta.adgm, 0.0);
  for (const auto& [name, tr] : traces) {
    EXPECT_NEAR(tr.at_theta.total,
                tr.at_theta.ce + tr.at_theta.dscl + tr.at_theta.adgm, 1e-12)
        << name;
  }
}

TEST(Ablation, SingleStegoDomainAdgmIsNearZeroNoise) {
  // with S = 1 the weight is exactly 1 and the batch gap divides the EMA
  // center gap, so the value reduces to the batch-vs-center estimation
  // noise around zero while the decomposition stays exact
  BenchmarkConfig cfg = tiny_bench();
  cfg.domains = {cfg.domains[3]};  // one strong domain
  auto ds = gen_feature_benchmark_er(cfg, 0.5);

  TrainConfig tc = quick_train();
  tc.kind = OptimizerKind::dasm;
  ModelConfig mc = tiny_model();
  EncoderClassifier model(mc);
  Trainer trainer(model, tc, 1);
  auto batch = ds.train.batch(mixed_rows(ds.train, 2, 8));
  trainer.step(batch);
  auto tr = trainer.step(batch);
  ASSERT_EQ(tr.weights.size(), 1u);
  EXPECT_DOUBLE_EQ(tr.weights[0], 1.0);
  EXPECT_LT(std::fabs(tr.at_theta.adgm), 0.1);
  EXPECT_NEAR(tr.at_theta.total,
              tr.at_theta.ce + tr.at_theta.dscl + tr.at_theta.adgm, 1e-12);
}

TEST(Sweep, GridsMatchTheProtocol) {
  auto data = gen_feature_benchmark(tiny_bench());
  const auto& ds = dataset_for_er(data, 0.5);
  TrainConfig base = quick_train();
  base.epochs = 1;

  auto rho_sweep = run_sensitivity("rho", base, tiny_model(), ds, {1}, "", 2);
  EXPECT_EQ(rho_sweep.grid, (std::vector<double>{0.01, 0.03, 0.05, 0.08}));
  ASSERT_EQ(rho_sweep.cells.size(), 4u);
  for (const auto& c : rho_sweep.cells) {
    EXPECT_DOUBLE_EQ(c.report.config_echo["train"]["tau"].get<double>(), 0.5);
  }

  auto tau_sweep = run_sensitivity("tau", base, tiny_model(), ds, {1}, "", 2);
  EXPECT_EQ(tau_sweep.grid, (std::vector<double>{0.05, 0.1, 0.2, 0.5}));
  for (const auto& c : tau_sweep.cells) {
    EXPECT_DOUBLE_EQ(c.report.config_echo["train"]["rho"].get<double>(), 0.03);
  }

  EXPECT_THROW(run_sensitivity("mu", base, tiny_model(), ds, {1}), ConfigError);
}

TEST(Sweep, NeighborEchoesDifferOnlyInSweptKnob) {
  auto data = gen_feature_benchmark(tiny_bench());
  const auto& ds = dataset_for_er(data, 0.2);
  TrainConfig base = quick_train();
  base.epochs = 1;
  auto sweep = run_sensitivity("rho", base, tiny_model(), ds, {3}, "", 2);

  auto a = sweep.cells[0].report.config_echo["train"];
  auto b = sweep.cells[1].report.config_echo["train"];
  for (auto it = a.begin(); it != a.end(); ++it) {
    if (it.key() == "rho") {
      EXPECT_NE(a["rho"], b["rho"]);
    } else {
      EXPECT_EQ(it.value(), b.at(it.key())) << it.key();
    }
  }
}

TEST(Timing, PassCountsFollowTheOptimizer) {
  auto data = gen_feature_benchmark(tiny_bench());
  const auto& ds = dataset_for_er(data, 0.5);
  TrainConfig cfg = quick_train();
  cfg.batch_size = 32;
  auto report = timing_report(ds, cfg, tiny_model(), 20, 3);

  EXPECT_EQ(report.row("adam").fwd_per_step, 1u);
  EXPECT_EQ(report.row("adam").bwd_per_step, 1u);
  EXPECT_EQ(report.row("sam").fwd_per_step, 2u);
  EXPECT_EQ(report.row("sam").bwd_per_step, 2u);
  EXPECT_EQ(report.row("dasm").fwd_per_step, 2u);
  EXPECT_EQ(report.row("dasm").bwd_per_step, 2u);
  EXPECT_DOUBLE_EQ(report.row("adam").rel_time, 1.0);
  EXPECT_GT(report.row("sam").rel_time, 1.0);
}
