#pragma once

#include <cmath>
#include <fstream>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "dasm/error.hpp"
#include "json.hpp"

namespace dasm {

// One (epoch, domain) record of the training log. acc/ce come from the
// validation split; dscl/adgm/grad_norm are epoch means over training
// batches; gap/weight are the modulator values at the end of the epoch
// (zero for cover and for optimizers without a modulator).
struct EpochRow {
  std::size_t epoch = 0;
  std::string domain;
  double acc = 0.0;
  double ce = 0.0;
  double dscl = 0.0;
  double adgm = 0.0;
  double gap = 0.0;
  double weight = 0.0;
  double grad_norm = 0.0;
};

struct RunReport {
  nlohmann::json config_echo;
  std::vector<EpochRow> rows;
  std::map<std::string, double> final_test_accuracy;  // per domain + "avg"
  double final_train_accuracy = 0.0;
  double best_val_loss = 0.0;
  std::size_t best_epoch = 0;
  std::size_t epochs_run = 0;
  bool early_stopped = false;
  double ms_per_batch_mean = 0.0;
  double ms_per_batch_std = 0.0;
  std::size_t forward_passes = 0;
  std::size_t backward_passes = 0;
  std::size_t steps = 0;
  std::vector<std::string> artifacts;
  bool failed = false;
  std::string error;

  nlohmann::json to_json() const {
    nlohmann::json rj = nlohmann::json::array();
    for (const auto& r : rows) {
      rj.push_back({{"epoch", r.epoch},
                    {"domain", r.domain},
                    {"acc", r.acc},
                    {"ce", r.ce},
                    {"dscl", r.dscl},
                    {"adgm", r.adgm},
                    {"gap", r.gap},
                    {"weight", r.weight},
                    {"grad_norm", r.grad_norm}});
    }
    return {{"config", config_echo},
            {"epochs", rj},
            {"final_test_accuracy", final_test_accuracy},
            {"final_train_accuracy", final_train_accuracy},
            {"best_val_loss", best_val_loss},
            {"best_epoch", best_epoch},
            {"epochs_run", epochs_run},
            {"early_stopped", early_stopped},
            {"ms_per_batch_mean", ms_per_batch_mean},
            {"ms_per_batch_std", ms_per_batch_std},
            {"forward_passes", forward_passes},
            {"backward_passes", backward_passes},
            {"steps", steps},
            {"artifacts", artifacts},
            {"failed", failed},
            {"error", error}};
  }

  static RunReport from_json(const nlohmann::json& j) {
    RunReport r;
    r.config_echo = j.at("config");
    for (const auto& e : j.at("epochs")) {
      EpochRow row;
      row.epoch = e.at("epoch").get<std::size_t>();
      row.domain = e.at("domain").get<std::string>();
      row.acc = e.at("acc").get<double>();
      row.ce = e.at("ce").get<double>();
      row.dscl = e.at("dscl").get<double>();
      row.adgm = e.at("adgm").get<double>();
      row.gap = e.at("gap").get<double>();
      row.weight = e.at("weight").get<double>();
      row.grad_norm = e.at("grad_norm").get<double>();
      r.rows.push_back(std::move(row));
    }
    r.final_test_accuracy =
        j.at("final_test_accuracy").get<std::map<std::string, double>>();
    r.final_train_accuracy = j.at("final_train_accuracy").get<double>();
    r.best_val_loss = j.at("best_val_loss").get<double>();
    r.best_epoch = j.at("best_epoch").get<std::size_t>();
    r.epochs_run = j.at("epochs_run").get<std::size_t>();
    r.early_stopped = j.at("early_stopped").get<bool>();
    r.ms_per_batch_mean = j.at("ms_per_batch_mean").get<double>();
    r.ms_per_batch_std = j.at("ms_per_batch_std").get<double>();
    r.forward_passes = j.at("forward_passes").get<std::size_t>();
    r.backward_passes = j.at("backward_passes").get<std::size_t>();
    r.steps = j.at("steps").get<std::size_t>();
    r.artifacts = j.at("artifacts").get<std::vector<std::string>>();
    r.failed = j.at("failed").get<bool>();
    r.error = j.at("error").get<std::string>();
    return r;
  }

  void write_csv(std::ostream& os) const {
    os << "# schema=1\n";
    os << "epoch,domain,acc,ce,dscl,adgm,gap_k,w_k,grad_norm\n";
    os.precision(17);
    for (const auto& r : rows) {
      os << r.epoch << ',' << r.domain << ',' << r.acc << ',' << r.ce << ','
         << r.dscl << ',' << r.adgm << ',' << r.gap << ',' << r.weight << ','
         << r.grad_norm << '\n';
    }
  }

  void write(const std::string& dir, const std::string& stem) const {
    {
      std::ofstream js(dir + "/" + stem + ".json");
      if (!js) throw IoError("cannot write report json in " + dir);
      js << to_json().dump(2) << '\n';
    }
    std::ofstream cs(dir + "/" + stem + ".csv");
    if (!cs) throw IoError("cannot write report csv in " + dir);
    write_csv(cs);
  }

  // Equality over everything deterministic; wall-clock fields are excluded.
  bool metrics_equal(const RunReport& o) const {
    if (rows.size() != o.rows.size()) return false;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto& a = rows[i];
      const auto& b = o.rows[i];
      if (a.epoch != b.epoch || a.domain != b.domain || a.acc != b.acc ||
          a.ce != b.ce || a.dscl != b.dscl || a.adgm != b.adgm ||
          a.gap != b.gap || a.weight != b.weight || a.grad_norm != b.grad_norm) {
        return false;
      }
    }
    return final_test_accuracy == o.final_test_accuracy &&
           final_train_accuracy == o.final_train_accuracy &&
           best_val_loss == o.best_val_loss && best_epoch == o.best_epoch &&
           epochs_run == o.epochs_run && early_stopped == o.early_stopped &&
           forward_passes == o.forward_passes &&
           backward_passes == o.backward_passes && steps == o.steps &&
           failed == o.failed;
  }
};

inline double vec_mean(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline double vec_std(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = vec_mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size()));
}

}  // namespace dasm
