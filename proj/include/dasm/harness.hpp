#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <thread>
#include <vector>

#include "dasm/analysis.hpp"
#include "dasm/checkpoint.hpp"
#include "dasm/error.hpp"
#include "dasm/model.hpp"
#include "dasm/optimizers.hpp"
#include "dasm/report.hpp"
#include "dasm/synthdata.hpp"
#include "json.hpp"

namespace dasm {

template <class Fn>
void parallel_for(std::size_t count, std::size_t jobs, Fn&& fn) {
  if (jobs == 0) jobs = std::max<std::size_t>(1, std::thread::hardware_concurrency());
  jobs = std::min(jobs, count);
  if (jobs <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(jobs);
  for (std::size_t w = 0; w < jobs; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= count) return;
        fn(i);
      }
    });
  }
  for (auto& t : pool) t.join();
}

inline const DomainDataset& dataset_for_er(const std::vector<DomainDataset>& data,
                                           double er) {
  for (const auto& ds : data) {
    if (std::fabs(ds.er - er) < 1e-12) return ds;
  }
  throw ConfigError("no dataset generated for embedding rate " + er_tag(er));
}

// One trained cell of an experiment grid.
struct CellResult {
  std::string label;
  OptimizerKind kind = OptimizerKind::adam;
  double er = 0.0;
  std::uint64_t seed = 0;
  RunReport report;
  bool failed = false;
  std::string error;
};

inline CellResult run_cell(const std::string& label, OptimizerKind kind,
                           const DomainDataset& data, TrainConfig cfg,
                           ModelConfig model_cfg, std::uint64_t seed) {
  CellResult cell;
  cell.label = label;
  cell.kind = kind;
  cell.er = data.er;
  cell.seed = seed;
  try {
    cfg.kind = kind;
    cfg.seed = seed;
    model_cfg.input_dim = data.dim;
    model_cfg.init_seed = Rng::derive(seed, 0x77);
    EncoderClassifier model(model_cfg);
    Trainer trainer(model, cfg, data.num_stego_domains);
    cell.report = trainer.train(data);
    cell.report.config_echo["cell"] = {{"label", label},
                                       {"optimizer", to_string(kind)},
                                       {"er", data.er},
                                       {"seed", seed}};
    cell.report.config_echo["model"] = model_config_to_json(model_cfg);
  } catch (const Error& e) {
    cell.failed = true;
    cell.error = e.what();
    cell.report.failed = true;
    cell.report.error = e.what();
  }
  return cell;
}

// Mean/std of final per-domain test accuracy over the seed axis.
struct AggregateRow {
  std::string label;
  double er = 0.0;
  std::size_t n_seeds = 0;
  std::map<std::string, double> mean_acc;
  std::map<std::string, double> std_acc;
};

inline AggregateRow aggregate_cells(const std::string& label, double er,
                                    const std::vector<const CellResult*>& cells) {
  AggregateRow row;
  row.label = label;
  row.er = er;
  std::map<std::string, std::vector<double>> samples;
  for (const auto* c : cells) {
    if (c->failed) continue;
    ++row.n_seeds;
    for (const auto& [dom, acc] : c->report.final_test_accuracy) {
      samples[dom].push_back(acc);
    }
  }
  for (const auto& [dom, vals] : samples) {
    row.mean_acc[dom] = vec_mean(vals);
    row.std_acc[dom] = vec_std(vals);
  }
  return row;
}

inline void write_aggregate_csv(const std::string& path,
                                const std::vector<AggregateRow>& rows) {
  if (rows.empty()) return;
  std::ofstream out(path);
  if (!out) throw IoError("cannot write summary: " + path);
  out << "# schema=1\n";
  std::vector<std::string> domains;
  for (const auto& [dom, v] : rows.front().mean_acc) domains.push_back(dom);
  out << "optimizer,er,n_seeds";
  for (const auto& d : domains) out << ',' << d << "_mean," << d << "_std";
  out << '\n';
  out.precision(17);
  for (const auto& r : rows) {
    out << r.label << ',' << r.er << ',' << r.n_seeds;
    for (const auto& d : domains) {
      out << ',' << (r.mean_acc.count(d) ? r.mean_acc.at(d) : 0.0) << ','
          << (r.std_acc.count(d) ? r.std_acc.at(d) : 0.0);
    }
    out << '\n';
  }
}

// --- optimizer x ER x seed matrix -------------------------------------------------

struct ExperimentMatrix {
  std::vector<OptimizerKind> optimizers = {OptimizerKind::adam, OptimizerKind::sam,
                                           OptimizerKind::dasm};
  std::vector<double> embedding_rates = {0.1, 0.2, 0.3, 0.4, 0.5};
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  TrainConfig train;
  ModelConfig model;
  std::size_t jobs = 0;

  void validate() const {
    if (optimizers.empty() || embedding_rates.empty() || seeds.empty()) {
      throw ConfigError("experiment matrix axes must be non-empty");
    }
  }
};

struct MatrixSummary {
  std::vector<CellResult> cells;
  std::vector<AggregateRow> rows;
  bool any_failed = false;

  double mean_accuracy(const std::string& optimizer, double er,
                       const std::string& domain) const {
    for (const auto& r : rows) {
      if (r.label == optimizer && std::fabs(r.er - er) < 1e-12) {
        return r.mean_acc.at(domain);
      }
    }
    throw ConfigError("no aggregate row for " + optimizer + " at er " + er_tag(er));
  }
};

// Executes every (optimizer, er, seed) cell. A failed cell is recorded and
// the rest of the matrix continues. Cells run in a worker pool; results are
// merged in deterministic cell order.
inline MatrixSummary run_matrix(const ExperimentMatrix& m,
                                const std::vector<DomainDataset>& data,
                                const std::string& out_dir = "") {
  m.validate();
  struct Spec {
    OptimizerKind kind;
    double er;
    std::uint64_t seed;
  };
  std::vector<Spec> specs;
  for (auto kind : m.optimizers) {
    for (double er : m.embedding_rates) {
      for (auto seed : m.seeds) specs.push_back({kind, er, seed});
    }
  }

  MatrixSummary summary;
  summary.cells.resize(specs.size());
  parallel_for(specs.size(), m.jobs, [&](std::size_t i) {
    const auto& s = specs[i];
    CellResult& cell = summary.cells[i];
    try {
      cell = run_cell(to_string(s.kind), s.kind, dataset_for_er(data, s.er),
                      m.train, m.model, s.seed);
    } catch (const Error& e) {
      cell.label = to_string(s.kind);
      cell.kind = s.kind;
      cell.er = s.er;
      cell.seed = s.seed;
      cell.failed = true;
      cell.error = e.what();
    }
  });

  for (const auto& c : summary.cells) summary.any_failed |= c.failed;
  for (auto kind : m.optimizers) {
    for (double er : m.embedding_rates) {
      std::vector<const CellResult*> group;
      for (const auto& c : summary.cells) {
        if (c.kind == kind && std::fabs(c.er - er) < 1e-12) group.push_back(&c);
      }
      summary.rows.push_back(aggregate_cells(to_string(kind), er, group));
    }
  }

  if (!out_dir.empty()) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir + "/cells");
    for (const auto& c : summary.cells) {
      const std::string stem = c.label + "_er" + er_tag(c.er) + "_seed" +
                               std::to_string(c.seed);
      if (!c.failed) {
        c.report.write(out_dir + "/cells", stem);
      } else {
        std::ofstream f(out_dir + "/cells/" + stem + ".failed.json");
        f << nlohmann::json{{"error", c.error}}.dump(2) << '\n';
      }
    }
    write_aggregate_csv(out_dir + "/matrix_summary.csv", summary.rows);
  }
  return summary;
}

// --- ablation -----------------------------------------------------------------------

struct AblationVariant {
  std::string name;
  TrainConfig cfg;
};

inline std::vector<AblationVariant> ablation_variants(const TrainConfig& base) {
  TrainConfig baseline = base;
  baseline.kind = OptimizerKind::adam;
  TrainConfig dscl_only = base;
  dscl_only.kind = OptimizerKind::dasm;
  dscl_only.use_dscl = true;
  dscl_only.use_adgm = false;
  TrainConfig adgm_only = base;
  adgm_only.kind = OptimizerKind::dasm;
  adgm_only.use_dscl = false;
  adgm_only.use_adgm = true;
  TrainConfig full = base;
  full.kind = OptimizerKind::dasm;
  full.use_dscl = true;
  full.use_adgm = true;
  return {{"baseline-adam", baseline},
          {"dscl-only", dscl_only},
          {"adgm-only", adgm_only},
          {"dasm-full", full}};
}

struct AblationSummary {
  std::vector<CellResult> cells;
  std::vector<AggregateRow> rows;
  bool any_failed = false;

  double mean_accuracy(const std::string& variant, const std::string& domain) const {
    for (const auto& r : rows) {
      if (r.label == variant) return r.mean_acc.at(domain);
    }
    throw ConfigError("no ablation row for " + variant);
  }
};

// Component ablation at one embedding rate with shared seeds across
// variants.
inline AblationSummary run_ablation(const TrainConfig& base, const ModelConfig& model,
                                    const DomainDataset& data,
                                    const std::vector<std::uint64_t>& seeds,
                                    const std::string& out_dir = "",
                                    std::size_t jobs = 0) {
  auto variants = ablation_variants(base);
  struct Spec {
    std::size_t variant;
    std::uint64_t seed;
  };
  std::vector<Spec> specs;
  for (std::size_t v = 0; v < variants.size(); ++v) {
    for (auto seed : seeds) specs.push_back({v, seed});
  }

  AblationSummary summary;
  summary.cells.resize(specs.size());
  parallel_for(specs.size(), jobs, [&](std::size_t i) {
    const auto& s = specs[i];
    const auto& v = variants[s.variant];
    summary.cells[i] = run_cell(v.name, v.cfg.kind, data, v.cfg, model, s.seed);
  });
  for (const auto& c : summary.cells) summary.any_failed |= c.failed;

  for (const auto& v : variants) {
    std::vector<const CellResult*> group;
    for (const auto& c : summary.cells) {
      if (c.label == v.name) group.push_back(&c);
    }
    summary.rows.push_back(aggregate_cells(v.name, data.er, group));
  }
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir + "/cells");
    for (const auto& c : summary.cells) {
      const std::string stem = c.label + "_seed" + std::to_string(c.seed);
      if (!c.failed) c.report.write(out_dir + "/cells", stem);
    }
    write_aggregate_csv(out_dir + "/ablation_summary.csv", summary.rows);
  }
  return summary;
}

// --- hyperparameter sweeps ------------------------------------------------------------

struct SweepSummary {
  std::string knob;
  std::vector<double> grid;
  std::vector<CellResult> cells;
  std::vector<AggregateRow> rows;  // one per grid value
  bool any_failed = false;
};

// Sweeps one knob over the grid with the other fixed, shared seeds per cell.
inline SweepSummary run_sensitivity(const std::string& knob, const TrainConfig& base,
                                    const ModelConfig& model,
                                    const DomainDataset& data,
                                    const std::vector<std::uint64_t>& seeds,
                                    const std::string& out_dir = "",
                                    std::size_t jobs = 0) {
  SweepSummary summary;
  summary.knob = knob;
  TrainConfig cfg = base;
  cfg.kind = OptimizerKind::dasm;
  if (knob == "rho") {
    summary.grid = {0.01, 0.03, 0.05, 0.08};
    cfg.tau = 0.5;
  } else if (knob == "tau") {
    summary.grid = {0.05, 0.1, 0.2, 0.5};
    cfg.rho = 0.03;
  } else {
    throw ConfigError("unknown sweep knob: " + knob + " (expected rho or tau)");
  }

  struct Spec {
    double value;
    std::uint64_t seed;
  };
  std::vector<Spec> specs;
  for (double v : summary.grid) {
    for (auto seed : seeds) specs.push_back({v, seed});
  }
  summary.cells.resize(specs.size());
  parallel_for(specs.size(), jobs, [&](std::size_t i) {
    TrainConfig cell_cfg = cfg;
    if (summary.knob == "rho") {
      cell_cfg.rho = specs[i].value;
    } else {
      cell_cfg.tau = specs[i].value;
    }
    const std::string label = summary.knob + "=" + er_tag(specs[i].value);
    summary.cells[i] = run_cell(label, OptimizerKind::dasm, data, cell_cfg, model,
                                specs[i].seed);
  });
  for (const auto& c : summary.cells) summary.any_failed |= c.failed;

  for (double v : summary.grid) {
    const std::string label = summary.knob + "=" + er_tag(v);
    std::vector<const CellResult*> group;
    for (const auto& c : summary.cells) {
      if (c.label == label) group.push_back(&c);
    }
    summary.rows.push_back(aggregate_cells(label, data.er, group));
  }
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    write_aggregate_csv(out_dir + "/sweep_" + knob + "_summary.csv", summary.rows);
  }
  return summary;
}

// --- timing -------------------------------------------------------------------------

struct TimingReport {
  struct Row {
    std::string optimizer;
    double ms_mean = 0.0;
    double ms_std = 0.0;
    double rel_time = 0.0;
    std::size_t fwd_per_step = 0;
    std::size_t bwd_per_step = 0;
  };
  std::vector<Row> rows;

  const Row& row(const std::string& name) const {
    for (const auto& r : rows) {
      if (r.optimizer == name) return r;
    }
    throw ConfigError("no timing row for " + name);
  }

  nlohmann::json to_json() const {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& r : rows) {
      out.push_back({{"optimizer", r.optimizer},
                     {"ms_mean", r.ms_mean},
                     {"ms_std", r.ms_std},
                     {"rel_time", r.rel_time},
                     {"fwd_per_step", r.fwd_per_step},
                     {"bwd_per_step", r.bwd_per_step}});
    }
    return out;
  }
};

// Wall time per optimization step on a warmed-up model, steady clock,
// excluding data generation and evaluation. Relative time is against the
// adam row.
inline TimingReport timing_report(const DomainDataset& data, const TrainConfig& base,
                                  ModelConfig model_cfg, std::size_t batches = 200,
                                  std::size_t warmup = 20) {
  model_cfg.input_dim = data.dim;
  TimingReport report;
  for (auto kind :
       {OptimizerKind::adam, OptimizerKind::sam, OptimizerKind::dasm}) {
    TrainConfig cfg = base;
    cfg.kind = kind;
    EncoderClassifier model(model_cfg);
    Trainer trainer(model, cfg, data.num_stego_domains);

    Rng rng(Rng::derive(cfg.seed, 0x7177));
    auto plan = plan_batches(data.train, cfg.batch_size, cfg.stratified_batches,
                             data.num_stego_domains + 1, rng);
    std::vector<LabeledBatch> prepared;
    prepared.reserve(plan.size());
    for (const auto& idx : plan) prepared.push_back(data.train.batch(idx));

    TimingReport::Row row;
    row.optimizer = to_string(kind);
    std::vector<double> ms;
    ms.reserve(batches);
    for (std::size_t i = 0; i < warmup + batches; ++i) {
      const auto& batch = prepared[i % prepared.size()];
      const auto t0 = std::chrono::steady_clock::now();
      auto trace = trainer.step(batch);
      const auto t1 = std::chrono::steady_clock::now();
      row.fwd_per_step = trace.forward_passes;
      row.bwd_per_step = trace.backward_passes;
      if (i >= warmup) {
        ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
      }
    }
    row.ms_mean = vec_mean(ms);
    row.ms_std = vec_std(ms);
    report.rows.push_back(row);
  }
  const double adam_ms = report.row("adam").ms_mean;
  for (auto& r : report.rows) r.rel_time = r.ms_mean / adam_ms;
  return report;
}

}  // namespace dasm
