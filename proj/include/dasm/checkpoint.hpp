#pragma once

#include <cstdint>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "dasm/error.hpp"
#include "dasm/gap_modulator.hpp"
#include "dasm/model.hpp"
#include "json.hpp"

namespace dasm {

// Checkpoint layout: u64 little-endian header length, JSON header bytes,
// then one flat little-endian float64 array (parameters first, then domain
// centers when a bank is present).

inline nlohmann::json model_config_to_json(const ModelConfig& cfg) {
  return {{"input_dim", cfg.input_dim},
          {"hidden", cfg.hidden},
          {"feature_dim", cfg.feature_dim},
          {"init_seed", cfg.init_seed},
          {"init_scale", cfg.init_scale}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  cfg.input_dim = j.at("input_dim").get<std::size_t>();
  cfg.hidden = j.at("hidden").get<std::vector<std::size_t>>();
  cfg.feature_dim = j.at("feature_dim").get<std::size_t>();
  cfg.init_seed = j.at("init_seed").get<std::uint64_t>();
  cfg.init_scale = j.at("init_scale").get<double>();
  return cfg;
}

inline void save_checkpoint(const std::string& path, const EncoderClassifier& model,
                            const DomainCenterBank* bank, std::size_t step,
                            const nlohmann::json& extra = {}) {
  nlohmann::json header;
  header["format"] = "dasm-checkpoint";
  header["version"] = 1;
  header["step"] = step;
  header["model"] = model_config_to_json(model.config());
  auto shapes = model.parameter_shapes();
  header["param_shapes"] = shapes;
  if (bank) {
    std::vector<bool> init;
    for (std::size_t k = 0; k <= bank->num_stego_domains(); ++k) {
      init.push_back(bank->initialized(k));
    }
    header["bank"] = {{"stego_domains", bank->num_stego_domains()},
                      {"feature_dim", bank->feature_dim()},
                      {"mu", bank->mu()},
                      {"xi", bank->xi()},
                      {"step", bank->step()},
                      {"initialized", init}};
  }
  if (!extra.is_null() && !extra.empty()) header["extra"] = extra;

  const std::string hs = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path);
  const std::uint64_t len = hs.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  auto flat = model.params().flatten();
  out.write(reinterpret_cast<const char*>(flat.data()),
            static_cast<std::streamsize>(flat.size() * sizeof(double)));
  if (bank) {
    for (std::size_t k = 0; k <= bank->num_stego_domains(); ++k) {
      auto c = bank->center(k);
      out.write(reinterpret_cast<const char*>(c.data()),
                static_cast<std::streamsize>(c.size() * sizeof(double)));
    }
  }
  if (!out) throw IoError("checkpoint write failed: " + path);
}

struct Checkpoint {
  std::unique_ptr<EncoderClassifier> model;
  std::unique_ptr<DomainCenterBank> bank;
  std::size_t step = 0;
  nlohmann::json header;
};

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string hs(len, '\0');
  in.read(hs.data(), static_cast<std::streamsize>(len));
  if (!in) throw IoError("truncated checkpoint header: " + path);

  Checkpoint ck;
  ck.header = nlohmann::json::parse(hs);
  if (ck.header.value("format", "") != "dasm-checkpoint") {
    throw IoError("not a checkpoint file: " + path);
  }
  ck.step = ck.header.at("step").get<std::size_t>();
  ck.model = std::make_unique<EncoderClassifier>(
      model_config_from_json(ck.header.at("model")));

  std::vector<double> flat(ck.model->params().size());
  in.read(reinterpret_cast<char*>(flat.data()),
          static_cast<std::streamsize>(flat.size() * sizeof(double)));
  if (!in) throw IoError("truncated checkpoint payload: " + path);
  ck.model->params().assign(flat);

  if (ck.header.contains("bank")) {
    const auto& jb = ck.header["bank"];
    ck.bank = std::make_unique<DomainCenterBank>(
        jb.at("stego_domains").get<std::size_t>(),
        jb.at("feature_dim").get<std::size_t>(), jb.at("mu").get<double>(),
        jb.at("xi").get<double>());
    const auto init = jb.at("initialized").get<std::vector<bool>>();
    const std::size_t dim = ck.bank->feature_dim();
    std::vector<double> c(dim);
    for (std::size_t k = 0; k <= ck.bank->num_stego_domains(); ++k) {
      in.read(reinterpret_cast<char*>(c.data()),
              static_cast<std::streamsize>(dim * sizeof(double)));
      ck.bank->restore_center(k, c, init.at(k));
    }
    ck.bank->set_step(jb.at("step").get<std::size_t>());
    if (!in) throw IoError("truncated center payload: " + path);
  }
  return ck;
}

}  // namespace dasm
