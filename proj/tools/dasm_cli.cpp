// Command-line front end: benchmark generation, training, the experiment
// matrix, ablations, sensitivity sweeps, geometry analysis and timing.
//
// Exit codes: 0 success, 1 configuration error, 2 one or more experiment
// cells failed, 3 internal error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dasm/analysis.hpp"
#include "dasm/checkpoint.hpp"
#include "dasm/harness.hpp"
#include "dasm/optimizers.hpp"
#include "dasm/synthdata.hpp"

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string out_root() {
  const char* env = std::getenv("DASM_OUT_ROOT");
  return env && *env ? env : ".";
}

std::string resolve_out(const std::string& dir) {
  fs::path p(dir);
  if (p.is_absolute()) return p.string();
  return (fs::path(out_root()) / p).string();
}

struct TrainFlags {
  dasm::TrainConfig cfg;
  std::vector<std::size_t> hidden = {64, 64};
  std::size_t feature_dim = 16;
  std::string opt = "dasm";
  std::string base = "adam";
  bool no_dscl = false;
  bool no_adgm = false;
  bool plain_shuffle = false;

  void attach(CLI::App* cmd) {
    cmd->add_option("--opt", opt, "optimizer: erm|adam|sam|dasm");
    cmd->add_option("--base", base, "base update rule: sgd|adam");
    cmd->add_option("--eta", cfg.eta, "learning rate");
    cmd->add_option("--rho", cfg.rho, "perturbation radius");
    cmd->add_option("--tau", cfg.tau, "contrastive temperature");
    cmd->add_option("--mu", cfg.mu, "EMA momentum");
    cmd->add_option("--xi", cfg.xi, "stability constant");
    cmd->add_option("--batch-size", cfg.batch_size, "mini-batch size");
    cmd->add_option("--epochs", cfg.epochs, "max training epochs");
    cmd->add_option("--patience", cfg.patience, "early-stopping patience");
    cmd->add_option("--seed", cfg.seed, "run seed");
    cmd->add_option("--hidden", hidden, "encoder hidden widths");
    cmd->add_option("--feature-dim", feature_dim, "feature dimension");
    cmd->add_flag("--no-dscl", no_dscl, "disable the contrastive component");
    cmd->add_flag("--no-adgm", no_adgm, "disable the gap-modulation component");
    cmd->add_flag("--plain-shuffle", plain_shuffle,
                  "plain shuffling instead of domain-stratified batches");
  }

  dasm::TrainConfig train_config() const {
    dasm::TrainConfig out = cfg;
    out.kind = dasm::optimizer_kind_from_string(opt);
    out.base = dasm::base_update_from_string(base);
    out.use_dscl = !no_dscl;
    out.use_adgm = !no_adgm;
    out.stratified_batches = !plain_shuffle;
    return out;
  }

  dasm::ModelConfig model_config() const {
    dasm::ModelConfig out;
    out.hidden = hidden;
    out.feature_dim = feature_dim;
    return out;
  }
};

int cmd_gen(const std::string& config_path, const std::string& out_dir,
            const std::string& emit_default) {
  if (!emit_default.empty()) {
    std::ofstream f(emit_default);
    if (!f) throw dasm::IoError("cannot write " + emit_default);
    f << dasm::BenchmarkConfig::defaults().to_json().dump(2) << '\n';
    std::cout << "wrote default benchmark config to " << emit_default << '\n';
    return 0;
  }
  dasm::BenchmarkConfig cfg = dasm::BenchmarkConfig::defaults();
  if (!config_path.empty()) {
    std::ifstream f(config_path);
    if (!f) throw dasm::ConfigError("cannot open config " + config_path);
    cfg = dasm::BenchmarkConfig::from_json(json::parse(f));
  }
  const std::string dir = resolve_out(out_dir);
  auto data = dasm::gen_feature_benchmark(cfg);
  dasm::write_benchmark(cfg, data, dir);
  std::cout << "benchmark written to " << dir << " ("
            << cfg.embedding_rates.size() << " embedding rates, "
            << cfg.domains.size() << " stego domains, "
            << cfg.samples_per_cell << " samples per cell)\n";
  return 0;
}

int cmd_train(const std::string& data_dir, double er, const TrainFlags& flags,
              const std::string& out_dir, bool save_ck) {
  auto data = dasm::load_benchmark(data_dir);
  const auto& ds = dasm::dataset_for_er(data, er);

  dasm::TrainConfig cfg = flags.train_config();
  dasm::ModelConfig mc = flags.model_config();
  mc.input_dim = ds.dim;
  mc.init_seed = dasm::Rng::derive(cfg.seed, 0x77);

  dasm::EncoderClassifier model(mc);
  dasm::Trainer trainer(model, cfg, ds.num_stego_domains);
  auto report = trainer.train(ds);
  report.config_echo["model"] = dasm::model_config_to_json(mc);
  report.config_echo["cell"] = {{"optimizer", dasm::to_string(cfg.kind)},
                                {"er", er},
                                {"seed", cfg.seed}};

  const std::string dir = resolve_out(out_dir);
  fs::create_directories(dir);
  const std::string stem =
      dasm::to_string(cfg.kind) + "_er" + dasm::er_tag(er) + "_seed" +
      std::to_string(cfg.seed);
  if (save_ck) {
    const std::string ck = dir + "/" + stem + ".ckpt";
    dasm::save_checkpoint(ck, model, &trainer.bank(), report.steps,
                          report.config_echo);
    report.artifacts.push_back(ck);
  }
  report.write(dir, stem);

  std::cout << "run " << stem << ": best val loss " << report.best_val_loss
            << " at epoch " << report.best_epoch << ", test accuracy:\n";
  for (const auto& [dom, acc] : report.final_test_accuracy) {
    std::cout << "  " << dom << ": " << acc << '\n';
  }
  return 0;
}

std::vector<dasm::OptimizerKind> parse_opts(const std::string& csv) {
  std::vector<dasm::OptimizerKind> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(dasm::optimizer_kind_from_string(item));
  }
  if (out.empty()) throw dasm::ConfigError("no optimizers given");
  return out;
}

int cmd_matrix(const std::string& data_dir, const std::string& opts,
               std::vector<double> ers, std::vector<std::uint64_t> seeds,
               const TrainFlags& flags, std::size_t jobs,
               const std::string& out_dir) {
  auto data = dasm::load_benchmark(data_dir);
  dasm::ExperimentMatrix m;
  m.optimizers = parse_opts(opts);
  if (!ers.empty()) {
    m.embedding_rates = ers;
  } else {
    m.embedding_rates.clear();
    for (const auto& ds : data) m.embedding_rates.push_back(ds.er);
  }
  if (!seeds.empty()) m.seeds = seeds;
  m.train = flags.train_config();
  m.model = flags.model_config();
  m.jobs = jobs;

  auto summary = dasm::run_matrix(m, data, resolve_out(out_dir));
  std::cout << "matrix complete: " << summary.cells.size() << " cells";
  std::size_t failed = 0;
  for (const auto& c : summary.cells) failed += c.failed ? 1 : 0;
  std::cout << ", " << failed << " failed\n";
  for (const auto& r : summary.rows) {
    std::cout << "  " << r.label << " er=" << r.er << " avg="
              << (r.mean_acc.count("avg") ? r.mean_acc.at("avg") : 0.0) << '\n';
  }
  return summary.any_failed ? 2 : 0;
}

int cmd_ablate(const std::string& data_dir, double er,
               std::vector<std::uint64_t> seeds, const TrainFlags& flags,
               std::size_t jobs, const std::string& out_dir) {
  auto data = dasm::load_benchmark(data_dir);
  const auto& ds = dasm::dataset_for_er(data, er);
  if (seeds.empty()) seeds = {1, 2, 3};
  auto summary = dasm::run_ablation(flags.train_config(), flags.model_config(), ds,
                                    seeds, resolve_out(out_dir), jobs);
  for (const auto& r : summary.rows) {
    std::cout << "  " << r.label << " avg="
              << (r.mean_acc.count("avg") ? r.mean_acc.at("avg") : 0.0) << '\n';
  }
  return summary.any_failed ? 2 : 0;
}

int cmd_sweep(const std::string& data_dir, double er, const std::string& knob,
              std::vector<std::uint64_t> seeds, const TrainFlags& flags,
              std::size_t jobs, const std::string& out_dir) {
  auto data = dasm::load_benchmark(data_dir);
  const auto& ds = dasm::dataset_for_er(data, er);
  if (seeds.empty()) seeds = {1, 2, 3};
  auto summary = dasm::run_sensitivity(knob, flags.train_config(),
                                       flags.model_config(), ds, seeds,
                                       resolve_out(out_dir), jobs);
  for (const auto& r : summary.rows) {
    std::cout << "  " << r.label << " avg="
              << (r.mean_acc.count("avg") ? r.mean_acc.at("avg") : 0.0) << '\n';
  }
  return summary.any_failed ? 2 : 0;
}

int cmd_analyze(const std::string& ck_path, const std::string& data_dir, double er,
                double rho, std::size_t probes, std::size_t grid, double extent,
                std::size_t hvp_iters, std::uint64_t seed,
                const std::string& out_dir) {
  auto ck = dasm::load_checkpoint(ck_path);
  auto data = dasm::load_benchmark(data_dir);
  const auto& ds = dasm::dataset_for_er(data, er);
  const std::string dir = resolve_out(out_dir);
  fs::create_directories(dir);

  auto sharp = dasm::zeroth_order_sharpness(*ck.model, ds, rho, probes, seed);
  {
    std::ofstream f(dir + "/sharpness.json");
    f << sharp.to_json().dump(2) << '\n';
  }
  std::cout << "sharpness: mean " << sharp.mean << " (std " << sharp.stddev
            << "), total " << sharp.total << '\n';

  auto pads = dasm::pad_matrix(*ck.model, ds, seed);
  pads.write_csv(dir + "/pad_matrix_ER" + dasm::er_tag(er) + ".csv");

  auto pooled = ds.test.all();
  auto probe = dasm::ce_probe(*ck.model, pooled);
  auto slice = dasm::landscape_slice(probe, grid, extent, seed);
  slice.write_csv(dir + "/landscape_er" + dasm::er_tag(er) + ".csv");

  auto hess = dasm::hessian_probe(probe, hvp_iters, seed);
  {
    std::ofstream f(dir + "/hessian.json");
    f << json{{"lambda_max", hess.lambda_max},
              {"trace", hess.trace},
              {"converged", hess.converged},
              {"iterations", hess.iterations}}
             .dump(2)
      << '\n';
  }
  std::cout << "hessian: lambda_max " << hess.lambda_max << ", trace "
            << hess.trace << (hess.converged ? "" : " (not converged)") << '\n';

  dasm::export_features_csv(*ck.model, ds, dir);
  std::cout << "analysis artifacts written to " << dir << '\n';
  return 0;
}

int cmd_time(const std::string& data_dir, double er, const TrainFlags& flags,
             std::size_t batches, const std::string& out_dir) {
  auto data = dasm::load_benchmark(data_dir);
  const auto& ds = dasm::dataset_for_er(data, er);
  auto report = dasm::timing_report(ds, flags.train_config(), flags.model_config(),
                                    batches);
  for (const auto& r : report.rows) {
    std::cout << "  " << r.optimizer << ": " << r.ms_mean << " +- " << r.ms_std
              << " ms/batch, rel " << r.rel_time << "x, fwd/bwd "
              << r.fwd_per_step << "/" << r.bwd_per_step << '\n';
  }
  if (!out_dir.empty()) {
    const std::string dir = resolve_out(out_dir);
    fs::create_directories(dir);
    std::ofstream f(dir + "/timing.json");
    f << report.to_json().dump(2) << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Domain-aware sharpness-minimization training and diagnostics"};
  app.require_subcommand(1);

  // gen
  auto* gen = app.add_subcommand("gen", "generate the synthetic benchmark");
  std::string gen_config, gen_out = "bench", gen_emit;
  gen->add_option("--config", gen_config, "benchmark config json");
  gen->add_option("--out", gen_out, "output directory");
  gen->add_option("--emit-default-config", gen_emit,
                  "write the default config json and exit");

  // train
  auto* train = app.add_subcommand("train", "train one model on one embedding rate");
  std::string train_data, train_out = "runs";
  double train_er = 0.5;
  bool train_ck = false;
  TrainFlags train_flags;
  train->add_option("--data", train_data, "benchmark directory")->required();
  train->add_option("--er", train_er, "embedding rate");
  train->add_option("--out", train_out, "output directory");
  train->add_flag("--save-checkpoint", train_ck, "write a model checkpoint");
  train_flags.attach(train);

  // matrix
  auto* matrix = app.add_subcommand("matrix", "optimizer x ER x seed grid");
  std::string mat_data, mat_opts = "adam,sam,dasm", mat_out = "matrix";
  std::vector<double> mat_ers;
  std::vector<std::uint64_t> mat_seeds;
  std::size_t mat_jobs = 0;
  TrainFlags mat_flags;
  matrix->add_option("--data", mat_data, "benchmark directory")->required();
  matrix->add_option("--opts", mat_opts, "comma list of optimizers");
  matrix->add_option("--ers", mat_ers, "embedding rates (default: all)");
  matrix->add_option("--seeds", mat_seeds, "seeds (default: 1 2 3)");
  matrix->add_option("--jobs", mat_jobs, "worker threads (0 = hardware)");
  matrix->add_option("--out", mat_out, "output directory");
  mat_flags.attach(matrix);

  // ablate
  auto* ablate = app.add_subcommand("ablate", "component ablation at one ER");
  std::string abl_data, abl_out = "ablation";
  double abl_er = 0.5;
  std::vector<std::uint64_t> abl_seeds;
  std::size_t abl_jobs = 0;
  TrainFlags abl_flags;
  ablate->add_option("--data", abl_data, "benchmark directory")->required();
  ablate->add_option("--er", abl_er, "embedding rate");
  ablate->add_option("--seeds", abl_seeds, "seeds (default: 1 2 3)");
  ablate->add_option("--jobs", abl_jobs, "worker threads");
  ablate->add_option("--out", abl_out, "output directory");
  abl_flags.attach(ablate);

  // sweep
  auto* sweep = app.add_subcommand("sweep", "hyperparameter sensitivity sweep");
  std::string sw_data, sw_knob = "rho", sw_out = "sweep";
  double sw_er = 0.5;
  std::vector<std::uint64_t> sw_seeds;
  std::size_t sw_jobs = 0;
  TrainFlags sw_flags;
  sweep->add_option("--data", sw_data, "benchmark directory")->required();
  sweep->add_option("--knob", sw_knob, "rho or tau");
  sweep->add_option("--er", sw_er, "embedding rate");
  sweep->add_option("--seeds", sw_seeds, "seeds (default: 1 2 3)");
  sweep->add_option("--jobs", sw_jobs, "worker threads");
  sweep->add_option("--out", sw_out, "output directory");
  sw_flags.attach(sweep);

  // analyze
  auto* analyze = app.add_subcommand("analyze", "geometry diagnostics on a checkpoint");
  std::string an_ck, an_data, an_out = "analysis";
  double an_er = 0.5, an_rho = 0.05, an_extent = 1.0;
  std::size_t an_probes = 64, an_grid = 41, an_iters = 100;
  std::uint64_t an_seed = 1;
  analyze->add_option("--checkpoint", an_ck, "model checkpoint")->required();
  analyze->add_option("--data", an_data, "benchmark directory")->required();
  analyze->add_option("--er", an_er, "embedding rate");
  analyze->add_option("--rho", an_rho, "sharpness radius");
  analyze->add_option("--probes", an_probes, "sharpness probe count");
  analyze->add_option("--grid", an_grid, "landscape grid (odd)");
  analyze->add_option("--extent", an_extent, "landscape extent");
  analyze->add_option("--hvp-iters", an_iters, "power-iteration budget");
  analyze->add_option("--seed", an_seed, "analysis seed");
  analyze->add_option("--out", an_out, "output directory");

  // time
  auto* timecmd = app.add_subcommand("time", "per-batch timing across optimizers");
  std::string tm_data, tm_out;
  double tm_er = 0.5;
  std::size_t tm_batches = 200;
  TrainFlags tm_flags;
  timecmd->add_option("--data", tm_data, "benchmark directory")->required();
  timecmd->add_option("--er", tm_er, "embedding rate");
  timecmd->add_option("--batches", tm_batches, "measured batches");
  timecmd->add_option("--out", tm_out, "output directory (optional)");
  tm_flags.attach(timecmd);

  try {
    app.parse(argc, argv);
    if (gen->parsed()) return cmd_gen(gen_config, gen_out, gen_emit);
    if (train->parsed())
      return cmd_train(train_data, train_er, train_flags, train_out, train_ck);
    if (matrix->parsed())
      return cmd_matrix(mat_data, mat_opts, mat_ers, mat_seeds, mat_flags,
                        mat_jobs, mat_out);
    if (ablate->parsed())
      return cmd_ablate(abl_data, abl_er, abl_seeds, abl_flags, abl_jobs, abl_out);
    if (sweep->parsed())
      return cmd_sweep(sw_data, sw_er, sw_knob, sw_seeds, sw_flags, sw_jobs, sw_out);
    if (analyze->parsed())
      return cmd_analyze(an_ck, an_data, an_er, an_rho, an_probes, an_grid,
                         an_extent, an_iters, an_seed, an_out);
    if (timecmd->parsed())
      return cmd_time(tm_data, tm_er, tm_flags, tm_batches, tm_out);
    return 1;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  } catch (const dasm::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const dasm::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 3;
  }
}
