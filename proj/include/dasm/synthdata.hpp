#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "dasm/data.hpp"
#include "dasm/error.hpp"
#include "dasm/rng.hpp"
#include "json.hpp"

namespace dasm {

// --- benchmark configuration --------------------------------------------------

struct DomainSpec {
  std::string name;
  double base_gap = 1.0;  // separation magnitude at ER = 1
  enum class Kind { mean_shift, sparse_subspace } kind = Kind::mean_shift;
  std::size_t sparse_dim = 4;

  nlohmann::json to_json() const {
    return {{"name", name},
            {"base_gap", base_gap},
            {"kind", kind == Kind::mean_shift ? "mean-shift" : "sparse-subspace"},
            {"sparse_dim", sparse_dim}};
  }

  static DomainSpec from_json(const nlohmann::json& j) {
    DomainSpec s;
    s.name = j.at("name").get<std::string>();
    s.base_gap = j.at("base_gap").get<double>();
    const std::string k = j.at("kind").get<std::string>();
    if (k == "mean-shift") {
      s.kind = Kind::mean_shift;
    } else if (k == "sparse-subspace") {
      s.kind = Kind::sparse_subspace;
    } else {
      throw ConfigError("unknown distortion kind: " + k);
    }
    s.sparse_dim = j.at("sparse_dim").get<std::size_t>();
    return s;
  }
};

struct BenchmarkConfig {
  std::size_t input_dim = 32;
  std::vector<DomainSpec> domains;
  std::vector<double> embedding_rates = {0.1, 0.2, 0.3, 0.4, 0.5};
  std::size_t samples_per_cell = 2000;
  std::uint64_t seed = 7;

  // Gap profile calibrated so the measured feature-space discrepancy
  // ordering is pms < qim < lsb < ahcm at every embedding rate.
  static BenchmarkConfig defaults() {
    BenchmarkConfig cfg;
    cfg.domains = {
        {"pms-like", 0.5, DomainSpec::Kind::mean_shift, 4},
        {"qim-like", 1.0, DomainSpec::Kind::mean_shift, 4},
        {"lsb-like", 2.0, DomainSpec::Kind::sparse_subspace, 4},
        {"ahcm-like", 3.0, DomainSpec::Kind::sparse_subspace, 4},
    };
    return cfg;
  }

  void validate() const {
    if (input_dim < 1) throw ConfigError("input_dim must be >= 1");
    if (domains.empty()) throw ConfigError("at least one stego domain required");
    if (embedding_rates.empty()) throw ConfigError("at least one embedding rate required");
    if (samples_per_cell < 1) throw ConfigError("samples_per_cell must be >= 1");
    for (const auto& d : domains) {
      if (d.base_gap < 0.0) throw ConfigError("base_gap must be >= 0");
      if (d.kind == DomainSpec::Kind::sparse_subspace && d.sparse_dim > input_dim) {
        throw ConfigError("sparse_dim " + std::to_string(d.sparse_dim) +
                          " exceeds input_dim for domain " + d.name);
      }
    }
  }

  nlohmann::json to_json() const {
    nlohmann::json dj = nlohmann::json::array();
    for (const auto& d : domains) dj.push_back(d.to_json());
    return {{"input_dim", input_dim},
            {"domains", dj},
            {"embedding_rates", embedding_rates},
            {"samples_per_cell", samples_per_cell},
            {"seed", seed}};
  }

  static BenchmarkConfig from_json(const nlohmann::json& j) {
    BenchmarkConfig cfg;
    cfg.input_dim = j.at("input_dim").get<std::size_t>();
    for (const auto& dj : j.at("domains")) cfg.domains.push_back(DomainSpec::from_json(dj));
    cfg.embedding_rates = j.at("embedding_rates").get<std::vector<double>>();
    cfg.samples_per_cell = j.at("samples_per_cell").get<std::size_t>();
    cfg.seed = j.at("seed").get<std::uint64_t>();
    return cfg;
  }
};

// --- feature benchmark generation ----------------------------------------------

namespace detail {

// Unit perturbation direction for one domain; sparse kinds confine the
// support to a seeded coordinate subset.
inline std::vector<double> domain_direction(const BenchmarkConfig& cfg,
                                            std::size_t domain_idx) {
  const DomainSpec& spec = cfg.domains[domain_idx];
  Rng rng(Rng::derive(cfg.seed, 0xD00 + domain_idx));
  std::vector<double> u(cfg.input_dim, 0.0);
  if (spec.kind == DomainSpec::Kind::mean_shift) {
    for (auto& v : u) v = rng.normal();
  } else {
    std::vector<std::size_t> coords(cfg.input_dim);
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    rng.shuffle(coords);
    for (std::size_t i = 0; i < spec.sparse_dim; ++i) u[coords[i]] = rng.normal();
  }
  double n = 0.0;
  for (double v : u) n += v * v;
  n = std::sqrt(n);
  if (n == 0.0) {
    u[0] = 1.0;
  } else {
    for (auto& v : u) v /= n;
  }
  return u;
}

}  // namespace detail

// Generates the benchmark at a single embedding rate. Cover samples are
// standard normal; a stego sample of domain k is an independent cover draw
// plus ER*base_gap_k times the domain's unit direction. Every stego cell
// holds samples_per_cell rows and the cover pool holds S*samples_per_cell,
// so positives and negatives are balanced in every split. Cells are split
// 70/15/15.
inline DomainDataset gen_feature_benchmark_er(const BenchmarkConfig& cfg, double er) {
  cfg.validate();
  const std::size_t S = cfg.domains.size();
  const std::size_t d = cfg.input_dim;
  const std::size_t n = cfg.samples_per_cell;

  DomainDataset ds;
  ds.er = er;
  ds.dim = d;
  ds.num_stego_domains = S;
  ds.domain_names.push_back("cover");
  for (const auto& spec : cfg.domains) ds.domain_names.push_back(spec.name);
  ds.train.dim = ds.val.dim = ds.test.dim = d;

  std::size_t er_index = 0;
  for (std::size_t i = 0; i < cfg.embedding_rates.size(); ++i) {
    if (cfg.embedding_rates[i] == er) er_index = i;
  }

  std::size_t next_id = 0;
  for (std::size_t k = 0; k <= S; ++k) {
    Rng rng(Rng::derive(cfg.seed, 0x1000 + er_index * 64 + k));
    std::vector<double> direction;
    double shift = 0.0;
    if (k > 0) {
      direction = detail::domain_direction(cfg, k - 1);
      shift = er * cfg.domains[k - 1].base_gap;
    }
    const std::size_t cell = k == 0 ? n * S : n;
    const std::size_t n_train = cell * 70 / 100;
    const std::size_t n_val = cell * 15 / 100;
    std::vector<double> row(d);
    for (std::size_t i = 0; i < cell; ++i) {
      for (std::size_t j = 0; j < d; ++j) row[j] = rng.normal();
      if (k > 0) {
        for (std::size_t j = 0; j < d; ++j) row[j] += shift * direction[j];
      }
      SplitData& split = i < n_train ? ds.train
                         : i < n_train + n_val ? ds.val
                                               : ds.test;
      split.push_row(row, k == 0 ? 0 : 1, static_cast<int>(k), next_id++);
    }
  }
  return ds;
}

inline std::vector<DomainDataset> gen_feature_benchmark(const BenchmarkConfig& cfg) {
  cfg.validate();
  std::vector<DomainDataset> out;
  out.reserve(cfg.embedding_rates.size());
  for (double er : cfg.embedding_rates) out.push_back(gen_feature_benchmark_er(cfg, er));
  return out;
}

// --- split file format ----------------------------------------------------------
// u64 LE header length, JSON header, rows*dim float64 LE, one label byte and
// one domain byte per row, then u64 LE sample ids.

inline void write_split(const std::string& path, const SplitData& split,
                        const nlohmann::json& meta) {
  nlohmann::json header = meta;
  header["format"] = "dasm-split";
  header["version"] = 1;
  header["dim"] = split.dim;
  header["rows"] = split.rows();
  const std::string hs = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write split: " + path);
  const std::uint64_t len = hs.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  out.write(reinterpret_cast<const char*>(split.x.data()),
            static_cast<std::streamsize>(split.x.size() * sizeof(double)));
  for (std::size_t i = 0; i < split.rows(); ++i) {
    const unsigned char yb = static_cast<unsigned char>(split.y[i]);
    const unsigned char db = static_cast<unsigned char>(split.d[i]);
    out.write(reinterpret_cast<const char*>(&yb), 1);
    out.write(reinterpret_cast<const char*>(&db), 1);
  }
  for (std::size_t i = 0; i < split.rows(); ++i) {
    const std::uint64_t id = split.ids[i];
    out.write(reinterpret_cast<const char*>(&id), sizeof(id));
  }
  if (!out) throw IoError("split write failed: " + path);
}

inline SplitData read_split(const std::string& path, nlohmann::json* meta_out = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open split: " + path);
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string hs(len, '\0');
  in.read(hs.data(), static_cast<std::streamsize>(len));
  if (!in) throw IoError("truncated split header: " + path);
  auto header = nlohmann::json::parse(hs);
  if (header.value("format", "") != "dasm-split") {
    throw IoError("not a split file: " + path);
  }

  SplitData split;
  split.dim = header.at("dim").get<std::size_t>();
  const std::size_t rows = header.at("rows").get<std::size_t>();
  split.x.resize(rows * split.dim);
  in.read(reinterpret_cast<char*>(split.x.data()),
          static_cast<std::streamsize>(split.x.size() * sizeof(double)));
  split.y.resize(rows);
  split.d.resize(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    unsigned char yb = 0, db = 0;
    in.read(reinterpret_cast<char*>(&yb), 1);
    in.read(reinterpret_cast<char*>(&db), 1);
    split.y[i] = yb;
    split.d[i] = db;
  }
  split.ids.resize(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    std::uint64_t id = 0;
    in.read(reinterpret_cast<char*>(&id), sizeof(id));
    split.ids[i] = id;
  }
  if (!in) throw IoError("truncated split payload: " + path);
  if (meta_out) *meta_out = header;
  return split;
}

inline void write_split_csv(const std::string& path, const SplitData& split) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write csv: " + path);
  out << "# schema=1\n";
  out << "id,label,domain";
  for (std::size_t j = 0; j < split.dim; ++j) out << ",x" << j;
  out << '\n';
  out.precision(17);
  for (std::size_t i = 0; i < split.rows(); ++i) {
    out << split.ids[i] << ',' << split.y[i] << ',' << split.d[i];
    for (std::size_t j = 0; j < split.dim; ++j) out << ',' << split.x[i * split.dim + j];
    out << '\n';
  }
}

inline std::uint64_t fnv1a64_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot checksum: " + path);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[4096];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
    if (!in) break;
  }
  return h;
}

inline std::string er_tag(double er) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", er);
  return buf;
}

// Writes bin + csv mirror per (er, split), a config echo, and a checksum
// manifest. Returns the manifest.
inline nlohmann::json write_benchmark(const BenchmarkConfig& cfg,
                                      const std::vector<DomainDataset>& data,
                                      const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json manifest;
  manifest["config"] = cfg.to_json();
  nlohmann::json files = nlohmann::json::array();
  for (const auto& ds : data) {
    nlohmann::json meta = {{"er", ds.er},
                           {"seed", cfg.seed},
                           {"domain_names", ds.domain_names},
                           {"stego_domains", ds.num_stego_domains}};
    const std::string tag = er_tag(ds.er);
    const struct {
      const char* name;
      const SplitData* split;
    } splits[] = {{"train", &ds.train}, {"val", &ds.val}, {"test", &ds.test}};
    for (const auto& s : splits) {
      nlohmann::json m = meta;
      m["split"] = s.name;
      const std::string bin = dir + "/er" + tag + "_" + s.name + ".bin";
      const std::string csv = dir + "/er" + tag + "_" + s.name + ".csv";
      write_split(bin, *s.split, m);
      write_split_csv(csv, *s.split);
      files.push_back({{"path", fs::path(bin).filename().string()},
                       {"er", ds.er},
                       {"split", s.name},
                       {"fnv1a64", fnv1a64_file(bin)}});
    }
  }
  manifest["files"] = files;
  std::ofstream mf(dir + "/manifest.json");
  mf << manifest.dump(2) << '\n';
  std::ofstream cf(dir + "/bench_config.json");
  cf << cfg.to_json().dump(2) << '\n';
  return manifest;
}

inline std::vector<DomainDataset> load_benchmark(const std::string& dir,
                                                 bool verify_checksums = true) {
  std::ifstream mf(dir + "/manifest.json");
  if (!mf) throw IoError("no manifest.json in " + dir);
  nlohmann::json manifest = nlohmann::json::parse(mf);
  BenchmarkConfig cfg = BenchmarkConfig::from_json(manifest.at("config"));

  std::vector<DomainDataset> out;
  for (double er : cfg.embedding_rates) {
    DomainDataset ds;
    ds.er = er;
    ds.dim = cfg.input_dim;
    ds.num_stego_domains = cfg.domains.size();
    const std::string tag = er_tag(er);
    nlohmann::json meta;
    for (const char* name : {"train", "val", "test"}) {
      const std::string bin = dir + "/er" + tag + "_" + name + ".bin";
      if (verify_checksums) {
        const std::uint64_t sum = fnv1a64_file(bin);
        bool found = false;
        for (const auto& f : manifest.at("files")) {
          if (f.at("path") == std::filesystem::path(bin).filename().string()) {
            found = true;
            if (f.at("fnv1a64").get<std::uint64_t>() != sum) {
              throw IoError("checksum mismatch (benchmark mutated?): " + bin);
            }
          }
        }
        if (!found) throw IoError("file missing from manifest: " + bin);
      }
      SplitData split = read_split(bin, &meta);
      if (std::string(name) == "train") {
        ds.domain_names = meta.at("domain_names").get<std::vector<std::string>>();
      }
      if (std::string(name) == "train") ds.train = std::move(split);
      else if (std::string(name) == "val") ds.val = std::move(split);
      else ds.test = std::move(split);
    }
    out.push_back(std::move(ds));
  }
  return out;
}

// --- LSB on synthetic PCM ---------------------------------------------------------

struct PcmClip {
  std::vector<std::int16_t> samples;
  double rate_hz = 8000.0;
};

struct LsbPcmPair {
  std::vector<PcmClip> cover;
  std::vector<PcmClip> stego;
};

// Cover clips are a 2-4 sinusoid mixture plus Gaussian noise quantized to an
// even 16-bit grid, with the LSB plane drawn Bernoulli(0.25) so the plane
// carries a detectable bias. Stego replaces the LSBs of round(er*len)
// seeded positions with uniform random bits.
inline LsbPcmPair gen_lsb_pcm(std::size_t n_clips, std::size_t clip_len, double er,
                              std::uint64_t seed) {
  if (er < 0.0 || er > 1.0) throw ConfigError("embedding rate must be in [0,1]");
  LsbPcmPair out;
  out.cover.reserve(n_clips);
  out.stego.reserve(n_clips);
  constexpr double kTwoPi = 6.283185307179586476925286766559;

  for (std::size_t c = 0; c < n_clips; ++c) {
    Rng rng(Rng::derive(seed, 0xACu * (c + 1)));
    PcmClip clip;
    clip.samples.resize(clip_len);
    const std::size_t n_sin = 2 + rng.index(3);
    std::vector<double> amp(n_sin), freq(n_sin), phase(n_sin);
    for (std::size_t s = 0; s < n_sin; ++s) {
      amp[s] = rng.uniform(1500.0, 7000.0);
      freq[s] = rng.uniform(80.0, 1600.0);
      phase[s] = rng.uniform(0.0, kTwoPi);
    }
    const double noise_sigma = rng.uniform(40.0, 200.0);
    for (std::size_t t = 0; t < clip_len; ++t) {
      double x = 0.0;
      for (std::size_t s = 0; s < n_sin; ++s) {
        x += amp[s] * std::sin(kTwoPi * freq[s] * static_cast<double>(t) / clip.rate_hz +
                               phase[s]);
      }
      x += noise_sigma * rng.normal();
      x = std::clamp(x, -32768.0, 32766.0);
      const auto even = static_cast<std::int32_t>(std::floor(x / 2.0)) * 2;
      const int lsb = rng.uniform() < 0.25 ? 1 : 0;
      clip.samples[t] = static_cast<std::int16_t>(even + lsb);
    }

    PcmClip stego = clip;
    const auto n_embed = static_cast<std::size_t>(std::llround(er * static_cast<double>(clip_len)));
    if (n_embed > 0) {
      std::vector<std::size_t> pos(clip_len);
      for (std::size_t i = 0; i < clip_len; ++i) pos[i] = i;
      rng.shuffle(pos);
      for (std::size_t i = 0; i < n_embed; ++i) {
        const std::uint16_t bit = rng.uniform() < 0.5 ? 1 : 0;
        auto u = static_cast<std::uint16_t>(stego.samples[pos[i]]);
        u = static_cast<std::uint16_t>((u & 0xFFFEu) | bit);
        stego.samples[pos[i]] = static_cast<std::int16_t>(u);
      }
    }
    out.cover.push_back(std::move(clip));
    out.stego.push_back(std::move(stego));
  }
  return out;
}

inline constexpr std::size_t kPcmFeatureDim = 15;

// Fixed-length clip statistics: LSB-plane mean (1), LSB run-length histogram
// (8 bins, runs of length 1..7 and 8+), sample-pair LSB agreement over
// disjoint and overlapping pairs (2), and first-difference moments (4).
inline std::vector<double> extract_features(const PcmClip& clip) {
  const std::size_t n = clip.samples.size();
  if (n < 64) throw InputError("clip too short for feature extraction (< 64 samples)");

  std::vector<double> f;
  f.reserve(kPcmFeatureDim);
  std::vector<int> lsb(n);
  double lsb_mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    lsb[i] = clip.samples[i] & 1;
    lsb_mean += lsb[i];
  }
  lsb_mean /= static_cast<double>(n);
  f.push_back(lsb_mean);

  // run-length histogram over the LSB plane
  std::vector<double> bins(8, 0.0);
  std::size_t run = 1, total_runs = 0;
  for (std::size_t i = 1; i <= n; ++i) {
    if (i < n && lsb[i] == lsb[i - 1]) {
      ++run;
    } else {
      bins[std::min<std::size_t>(run, 8) - 1] += 1.0;
      ++total_runs;
      run = 1;
    }
  }
  for (double& b : bins) b /= static_cast<double>(total_runs);
  f.insert(f.end(), bins.begin(), bins.end());

  // pair parity agreement
  double agree_disjoint = 0.0;
  std::size_t pairs = n / 2;
  for (std::size_t i = 0; i + 1 < n; i += 2) {
    agree_disjoint += lsb[i] == lsb[i + 1] ? 1.0 : 0.0;
  }
  f.push_back(agree_disjoint / static_cast<double>(pairs));
  double agree_overlap = 0.0;
  for (std::size_t i = 0; i + 1 < n; ++i) {
    agree_overlap += lsb[i] == lsb[i + 1] ? 1.0 : 0.0;
  }
  f.push_back(agree_overlap / static_cast<double>(n - 1));

  // first-difference moments, scaled to the 16-bit range
  std::vector<double> diff(n - 1);
  for (std::size_t i = 0; i + 1 < n; ++i) {
    diff[i] = (static_cast<double>(clip.samples[i + 1]) -
               static_cast<double>(clip.samples[i])) / 32768.0;
  }
  double m1 = 0.0;
  for (double x : diff) m1 += x;
  m1 /= static_cast<double>(diff.size());
  double m2 = 0.0, m3 = 0.0, m4 = 0.0;
  for (double x : diff) {
    const double c = x - m1;
    m2 += c * c;
    m3 += c * c * c;
    m4 += c * c * c * c;
  }
  m2 /= static_cast<double>(diff.size());
  m3 /= static_cast<double>(diff.size());
  m4 /= static_cast<double>(diff.size());
  const double sd = std::sqrt(m2);
  f.push_back(m1);
  f.push_back(sd);
  f.push_back(sd > 0.0 ? m3 / (sd * sd * sd) : 0.0);
  f.push_back(m2 > 0.0 ? m4 / (m2 * m2) - 3.0 : 0.0);
  return f;
}

}  // namespace dasm
