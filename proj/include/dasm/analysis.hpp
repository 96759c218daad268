#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "dasm/data.hpp"
#include "dasm/error.hpp"
#include "dasm/losses.hpp"
#include "dasm/model.hpp"
#include "dasm/optimizers.hpp"
#include "dasm/param_set.hpp"
#include "dasm/rng.hpp"
#include "json.hpp"

namespace dasm {

// Read-only view of a scalar loss over a parameter set; the loss graph is
// rebuilt at the current parameter values on every call.
struct LossProbe {
  ParameterSet* params = nullptr;
  std::function<Tensor()> loss;

  double eval() const { return loss().item(); }

  std::vector<double> grad() const {
    params->zero_grad();
    backward(loss());
    return params->flatten_grad();
  }
};

inline LossProbe ce_probe(const EncoderClassifier& model, const LabeledBatch& batch) {
  auto& params = const_cast<EncoderClassifier&>(model).params();
  return LossProbe{&params, [&model, batch] {
                     return cross_entropy(model.forward(batch.x).logits, batch.y);
                   }};
}

// --- zeroth-order sharpness ------------------------------------------------------

struct SharpnessEstimate {
  double value = 0.0;        // max over probes of L(theta+eps) - L(theta)
  double best_random = 0.0;  // best among the random sphere candidates
  double ascent_value = 0.0; // the gradient-ascent candidate
  bool clamped = false;      // raw max was negative (estimator noise)
  std::size_t excluded = 0;  // probes rejected for non-finite losses
};

// max_{||eps|| <= rho} L(theta+eps) - L(theta), estimated from m seeded
// uniform-on-sphere directions plus one gradient-ascent candidate refined by
// three projected ascent steps of size rho/2. The same seed yields nested
// candidate prefixes, so the estimate is monotone in m.
inline SharpnessEstimate sharpness_estimate(const LossProbe& probe, double rho,
                                            std::size_t m, std::uint64_t seed) {
  if (m < 1) throw ConfigError("sharpness: at least one probe required");
  if (rho <= 0.0) throw ConfigError("sharpness: rho must be positive");
  ParameterSet& params = *probe.params;
  const std::vector<double> base = params.flatten();
  const std::size_t n = base.size();
  const double l0 = probe.eval();

  SharpnessEstimate est;
  est.best_random = -1e300;
  double best = -1e300;
  Rng rng(seed);

  auto eval_at = [&](const std::vector<double>& eps) {
    std::vector<double> shifted(n);
    for (std::size_t i = 0; i < n; ++i) shifted[i] = base[i] + eps[i];
    params.assign(shifted);
    const double l = probe.eval();
    params.assign(base);
    return l;
  };

  std::vector<double> eps(n);
  for (std::size_t probe_idx = 0; probe_idx < m; ++probe_idx) {
    double norm = 0.0;
    for (auto& v : eps) {
      v = rng.normal();
      norm += v * v;
    }
    norm = std::sqrt(norm);
    if (norm == 0.0) continue;
    for (auto& v : eps) v *= rho / norm;
    const double l = eval_at(eps);
    if (!std::isfinite(l)) {
      ++est.excluded;
      continue;
    }
    best = std::max(best, l - l0);
    est.best_random = std::max(est.best_random, l - l0);
  }

  // gradient-ascent candidate with projected refinements
  std::vector<double> g = probe.grad();
  double gnorm = l2_norm(g);
  if (gnorm > 0.0) {
    for (std::size_t i = 0; i < n; ++i) eps[i] = rho * g[i] / gnorm;
    for (int refine = 0; refine < 3; ++refine) {
      std::vector<double> shifted(n);
      for (std::size_t i = 0; i < n; ++i) shifted[i] = base[i] + eps[i];
      params.assign(shifted);
      std::vector<double> ga = probe.grad();
      params.assign(base);
      const double ganorm = l2_norm(ga);
      if (ganorm == 0.0) break;
      for (std::size_t i = 0; i < n; ++i) eps[i] += 0.5 * rho * ga[i] / ganorm;
      const double enorm = l2_norm(eps);
      for (auto& v : eps) v *= rho / enorm;
    }
    const double l = eval_at(eps);
    if (std::isfinite(l)) {
      est.ascent_value = l - l0;
      best = std::max(best, est.ascent_value);
    } else {
      ++est.excluded;
    }
  }

  params.assign(base);
  est.value = best;
  if (best < 0.0) {
    est.value = 0.0;
    est.clamped = true;
  }
  return est;
}

struct SharpnessReport {
  std::vector<std::string> domains;  // stego domains only
  std::vector<double> values;
  double mean = 0.0;
  double stddev = 0.0;  // population
  double total = 0.0;   // pooled test set
  double rho = 0.0;
  std::size_t samples = 0;
  std::uint64_t seed = 0;
  bool any_clamped = false;
  std::size_t excluded_probes = 0;

  nlohmann::json to_json() const {
    nlohmann::json per;
    for (std::size_t i = 0; i < domains.size(); ++i) per[domains[i]] = values[i];
    return {{"per_domain", per},  {"mean", mean},
            {"std", stddev},      {"total", total},
            {"rho", rho},         {"samples", samples},
            {"seed", seed},       {"clamped", any_clamped},
            {"excluded_probes", excluded_probes}};
  }
};

// Per-domain sharpness of the test cross-entropy: domain k is probed on its
// own samples plus all cover samples; "total" pools the whole split.
inline SharpnessReport zeroth_order_sharpness(EncoderClassifier& model,
                                              const DomainDataset& data,
                                              double rho, std::size_t m,
                                              std::uint64_t seed) {
  SharpnessReport rep;
  rep.rho = rho;
  rep.samples = m;
  rep.seed = seed;

  std::vector<std::size_t> cover_rows;
  std::vector<std::vector<std::size_t>> by_domain(data.num_stego_domains + 1);
  for (std::size_t i = 0; i < data.test.rows(); ++i) {
    by_domain[static_cast<std::size_t>(data.test.d[i])].push_back(i);
  }
  cover_rows = by_domain[0];

  for (std::size_t k = 1; k <= data.num_stego_domains; ++k) {
    // balanced probe set: as many cover rows as domain rows
    std::vector<std::size_t> rows(
        cover_rows.begin(),
        cover_rows.begin() +
            std::min(cover_rows.size(), by_domain[k].size()));
    rows.insert(rows.end(), by_domain[k].begin(), by_domain[k].end());
    auto batch = data.test.batch(rows);
    auto probe = ce_probe(model, batch);
    auto est = sharpness_estimate(probe, rho, m, Rng::derive(seed, k));
    rep.domains.push_back(data.domain_names[k]);
    rep.values.push_back(est.value);
    rep.any_clamped |= est.clamped;
    rep.excluded_probes += est.excluded;
  }
  rep.mean = vec_mean(rep.values);
  rep.stddev = vec_std(rep.values);

  auto pooled = data.test.all();
  auto probe = ce_probe(model, pooled);
  auto est = sharpness_estimate(probe, rho, m, Rng::derive(seed, 0));
  rep.total = est.value;
  rep.any_clamped |= est.clamped;
  rep.excluded_probes += est.excluded;
  return rep;
}

// --- proxy A-distance --------------------------------------------------------------

// d_A = 2(1 - 2*eps) with eps clipped into [0, 0.5].
inline double pad_from_error(double eps) {
  eps = std::clamp(eps, 0.0, 0.5);
  return 2.0 * (1.0 - 2.0 * eps);
}

struct PadResult {
  double d_a = 0.0;
  double probe_error = 0.5;
};

// Linear logistic probe distinguishing A from B: seeded 80/20 split per
// side, 500 full-batch gradient steps at rate 0.1, held-out error clipped to
// [0, 0.5].
inline PadResult proxy_a_distance(const std::vector<double>& a_rows,
                                  const std::vector<double>& b_rows,
                                  std::size_t dim, std::uint64_t seed) {
  const std::size_t na = a_rows.size() / dim, nb = b_rows.size() / dim;
  if (na < 20 || nb < 20) {
    throw SampleSizeError("proxy A-distance needs at least 20 samples per side");
  }
  Rng rng(seed);
  auto split_side = [&](std::size_t n) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    rng.shuffle(idx);
    const std::size_t cut = n * 80 / 100;
    return std::pair(std::vector<std::size_t>(idx.begin(), idx.begin() + cut),
                     std::vector<std::size_t>(idx.begin() + cut, idx.end()));
  };
  auto [a_train, a_test] = split_side(na);
  auto [b_train, b_test] = split_side(nb);

  std::vector<double> w(dim, 0.0);
  double bias = 0.0;
  const std::size_t n_train = a_train.size() + b_train.size();
  const double inv_n = 1.0 / static_cast<double>(n_train);
  std::vector<double> gw(dim);

  for (int step = 0; step < 500; ++step) {
    std::fill(gw.begin(), gw.end(), 0.0);
    double gb = 0.0;
    auto accumulate = [&](const std::vector<double>& rows,
                          const std::vector<std::size_t>& idx, double label) {
      for (std::size_t r : idx) {
        const double* x = rows.data() + r * dim;
        double score = bias;
        for (std::size_t j = 0; j < dim; ++j) score += w[j] * x[j];
        const double p = 1.0 / (1.0 + std::exp(-score));
        const double diff = (p - label) * inv_n;
        for (std::size_t j = 0; j < dim; ++j) gw[j] += diff * x[j];
        gb += diff;
      }
    };
    accumulate(a_rows, a_train, 0.0);
    accumulate(b_rows, b_train, 1.0);
    for (std::size_t j = 0; j < dim; ++j) w[j] -= 0.1 * gw[j];
    bias -= 0.1 * gb;
  }

  std::size_t errors = 0, n_test = 0;
  auto score_side = [&](const std::vector<double>& rows,
                        const std::vector<std::size_t>& idx, int label) {
    for (std::size_t r : idx) {
      const double* x = rows.data() + r * dim;
      double score = bias;
      for (std::size_t j = 0; j < dim; ++j) score += w[j] * x[j];
      const int pred = score > 0.0 ? 1 : 0;
      if (pred != label) ++errors;
      ++n_test;
    }
  };
  score_side(a_rows, a_test, 0);
  score_side(b_rows, b_test, 1);

  PadResult res;
  res.probe_error = static_cast<double>(errors) / static_cast<double>(n_test);
  res.d_a = pad_from_error(res.probe_error);
  return res;
}

struct PadMatrix {
  std::vector<std::string> names;
  double er = 0.0;
  std::vector<double> d_a;         // (S+1)^2 row-major
  std::vector<double> probe_error; // same layout

  std::size_t size() const { return names.size(); }
  double at(std::size_t i, std::size_t j) const { return d_a[i * size() + j]; }

  void write_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write pad matrix: " + path);
    out << "# schema=1\n";
    out << "domain";
    for (const auto& n : names) out << ',' << n;
    out << '\n';
    out.precision(17);
    for (std::size_t i = 0; i < size(); ++i) {
      out << names[i];
      for (std::size_t j = 0; j < size(); ++j) out << ',' << at(i, j);
      out << '\n';
    }
  }
};

inline std::vector<std::vector<double>> rows_by_domain(const SplitData& split,
                                                       std::size_t num_domains) {
  std::vector<std::vector<double>> out(num_domains);
  for (std::size_t i = 0; i < split.rows(); ++i) {
    const auto k = static_cast<std::size_t>(split.d[i]);
    out[k].insert(out[k].end(), split.x.begin() + i * split.dim,
                  split.x.begin() + (i + 1) * split.dim);
  }
  return out;
}

// Normalized model features of a split, grouped by domain.
inline std::vector<std::vector<double>> features_by_domain(
    const EncoderClassifier& model, const SplitData& split, std::size_t num_domains,
    double xi = kDefaultXi) {
  std::vector<std::vector<double>> out(num_domains);
  const std::size_t dim = model.config().feature_dim;
  const std::size_t chunk = 2048;
  for (std::size_t start = 0; start < split.rows(); start += chunk) {
    const std::size_t stop = std::min(split.rows(), start + chunk);
    std::vector<std::size_t> idx(stop - start);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = start + i;
    auto batch = split.batch(idx);
    Tensor zn = normalize_rows(model.forward(batch.x).features, xi);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const auto k = static_cast<std::size_t>(batch.d[i]);
      out[k].insert(out[k].end(), zn.values().begin() + i * dim,
                    zn.values().begin() + (i + 1) * dim);
    }
  }
  return out;
}

// Pairwise matrix over per-domain feature sets; one probe per unordered
// pair, mirrored for symmetry.
inline PadMatrix pad_matrix_from_sets(const std::vector<std::vector<double>>& sets,
                                      const std::vector<std::string>& names,
                                      std::size_t dim, double er,
                                      std::uint64_t seed) {
  PadMatrix m;
  m.names = names;
  m.er = er;
  const std::size_t n = names.size();
  m.d_a.assign(n * n, 0.0);
  m.probe_error.assign(n * n, 0.5);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      auto res = proxy_a_distance(sets[i], sets[j], dim,
                                  Rng::derive(seed, i * 97 + j));
      m.d_a[i * n + j] = m.d_a[j * n + i] = res.d_a;
      m.probe_error[i * n + j] = m.probe_error[j * n + i] = res.probe_error;
    }
  }
  return m;
}

inline PadMatrix pad_matrix(const EncoderClassifier& model, const DomainDataset& data,
                            std::uint64_t seed) {
  auto sets = features_by_domain(model, data.test, data.num_stego_domains + 1);
  return pad_matrix_from_sets(sets, data.domain_names, model.config().feature_dim,
                              data.er, seed);
}

// --- loss landscape slices -----------------------------------------------------------

struct LandscapeSlice {
  std::size_t grid = 0;
  double extent = 0.0;
  std::vector<double> loss;          // grid x grid, alpha-major
  std::vector<std::uint8_t> missing; // non-finite cells
  bool has_missing = false;
  std::vector<double> dir_u, dir_v;

  double at(std::size_t ai, std::size_t bi) const { return loss[ai * grid + bi]; }

  void write_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write landscape: " + path);
    out << "# schema=1\n";
    out << "alpha,beta,loss\n";
    out.precision(17);
    for (std::size_t ai = 0; ai < grid; ++ai) {
      const double a = -extent + 2.0 * extent * static_cast<double>(ai) /
                                     static_cast<double>(grid - 1);
      for (std::size_t bi = 0; bi < grid; ++bi) {
        const double b = -extent + 2.0 * extent * static_cast<double>(bi) /
                                       static_cast<double>(grid - 1);
        out << a << ',' << b << ',';
        if (missing[ai * grid + bi]) {
          out << "nan";
        } else {
          out << loss[ai * grid + bi];
        }
        out << '\n';
      }
    }
  }
};

// Filter-normalized random-plane slice: two seeded Gaussian directions, each
// parameter tensor's block rescaled to that block's parameter norm, loss
// evaluated over [-extent, extent]^2. The center cell evaluates at the exact
// theta bytes.
inline LandscapeSlice landscape_slice(const LossProbe& probe, std::size_t grid,
                                      double extent, std::uint64_t seed) {
  if (grid % 2 == 0 || grid < 3) {
    throw ConfigError("landscape grid must be odd and >= 3");
  }
  ParameterSet& params = *probe.params;
  const std::vector<double> base = params.flatten();
  const std::size_t n = base.size();

  Rng rng(seed);
  auto draw_direction = [&] {
    std::vector<double> dir(n);
    for (auto& v : dir) v = rng.normal();
    // per-block filter normalization
    std::size_t off = 0;
    for (std::size_t p = 0; p < params.count(); ++p) {
      const std::size_t len = params[p].numel();
      double pn = 0.0, dn = 0.0;
      for (std::size_t i = 0; i < len; ++i) {
        pn += base[off + i] * base[off + i];
        dn += dir[off + i] * dir[off + i];
      }
      pn = std::sqrt(pn);
      dn = std::sqrt(dn);
      const double s = dn > 0.0 ? pn / dn : 0.0;
      for (std::size_t i = 0; i < len; ++i) dir[off + i] *= s;
      off += len;
    }
    return dir;
  };

  LandscapeSlice slice;
  slice.grid = grid;
  slice.extent = extent;
  slice.dir_u = draw_direction();
  slice.dir_v = draw_direction();
  slice.loss.assign(grid * grid, 0.0);
  slice.missing.assign(grid * grid, 0);

  std::vector<double> shifted(n);
  const std::size_t center = grid / 2;
  for (std::size_t ai = 0; ai < grid; ++ai) {
    const double a = -extent + 2.0 * extent * static_cast<double>(ai) /
                                   static_cast<double>(grid - 1);
    for (std::size_t bi = 0; bi < grid; ++bi) {
      const double b = -extent + 2.0 * extent * static_cast<double>(bi) /
                                     static_cast<double>(grid - 1);
      if (ai == center && bi == center) {
        params.assign(base);  // exact center
      } else {
        for (std::size_t i = 0; i < n; ++i) {
          shifted[i] = base[i] + a * slice.dir_u[i] + b * slice.dir_v[i];
        }
        params.assign(shifted);
      }
      const double l = probe.eval();
      if (std::isfinite(l)) {
        slice.loss[ai * grid + bi] = l;
      } else {
        slice.missing[ai * grid + bi] = 1;
        slice.has_missing = true;
      }
    }
  }
  params.assign(base);
  return slice;
}

// --- Hessian probes ----------------------------------------------------------------

// Central-difference Hessian-vector product:
//   HVP(v) = (grad(theta + h v) - grad(theta - h v)) / (2h),
//   h = 1e-4 * (1 + ||theta||) / ||v||.
inline std::vector<double> hessian_vector_product(const LossProbe& probe,
                                                  const std::vector<double>& v) {
  ParameterSet& params = *probe.params;
  const std::vector<double> base = params.flatten();
  const std::size_t n = base.size();
  const double vnorm = l2_norm(v);
  if (vnorm == 0.0) return std::vector<double>(n, 0.0);
  const double h = 1e-4 * (1.0 + l2_norm(base)) / vnorm;

  std::vector<double> shifted(n);
  for (std::size_t i = 0; i < n; ++i) shifted[i] = base[i] + h * v[i];
  params.assign(shifted);
  std::vector<double> gp = probe.grad();
  for (std::size_t i = 0; i < n; ++i) shifted[i] = base[i] - h * v[i];
  params.assign(shifted);
  std::vector<double> gm = probe.grad();
  params.assign(base);

  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = (gp[i] - gm[i]) / (2.0 * h);
  return out;
}

struct HessianProbeResult {
  double lambda_max = 0.0;
  double trace = 0.0;
  bool converged = false;
  std::size_t iterations = 0;
};

// Top eigenvalue by power iteration on the HVP operator (convergence when
// the relative Rayleigh change drops below 1e-4) plus a Hutchinson trace
// estimate from 32 Rademacher probes.
inline HessianProbeResult hessian_probe(const LossProbe& probe, std::size_t k_iters,
                                        std::uint64_t seed) {
  ParameterSet& params = *probe.params;
  const std::size_t n = params.size();
  Rng rng(seed);

  HessianProbeResult res;
  std::vector<double> v(n);
  double vnorm = 0.0;
  for (auto& x : v) {
    x = rng.normal();
    vnorm += x * x;
  }
  vnorm = std::sqrt(vnorm);
  for (auto& x : v) x /= vnorm;

  double rayleigh = 0.0;
  for (std::size_t it = 0; it < k_iters; ++it) {
    res.iterations = it + 1;
    std::vector<double> w = hessian_vector_product(probe, v);
    double r = 0.0;
    for (std::size_t i = 0; i < n; ++i) r += v[i] * w[i];
    const double wnorm = l2_norm(w);
    if (wnorm < 1e-14) {
      // vanishing curvature along the iterate: zero-Hessian case
      rayleigh = r;
      res.converged = true;
      break;
    }
    if (it > 0 &&
        std::fabs(r - rayleigh) < 1e-4 * std::max(std::fabs(r), 1e-12)) {
      rayleigh = r;
      res.converged = true;
      break;
    }
    rayleigh = r;
    for (std::size_t i = 0; i < n; ++i) v[i] = w[i] / wnorm;
  }
  res.lambda_max = rayleigh;

  double trace = 0.0;
  const std::size_t probes = 32;
  for (std::size_t p = 0; p < probes; ++p) {
    std::vector<double> r(n);
    for (auto& x : r) x = rng.uniform() < 0.5 ? -1.0 : 1.0;
    std::vector<double> hr = hessian_vector_product(probe, r);
    double dot = 0.0;
    for (std::size_t i = 0; i < n; ++i) dot += r[i] * hr[i];
    trace += dot;
  }
  res.trace = trace / static_cast<double>(probes);
  return res;
}

// --- feature export -------------------------------------------------------------------

// Normalized test-split features per domain, one csv per domain, for
// external embedding tools.
inline std::vector<std::string> export_features_csv(const EncoderClassifier& model,
                                                    const DomainDataset& data,
                                                    const std::string& dir) {
  auto sets = features_by_domain(model, data.test, data.num_stego_domains + 1);
  const std::size_t dim = model.config().feature_dim;
  std::vector<std::string> written;
  for (std::size_t k = 0; k < sets.size(); ++k) {
    const std::string path = dir + "/features_" + data.domain_names[k] + ".csv";
    std::ofstream out(path);
    if (!out) throw IoError("cannot write features: " + path);
    out << "# schema=1\n";
    for (std::size_t j = 0; j < dim; ++j) out << (j ? "," : "") << 'f' << j;
    out << '\n';
    out.precision(17);
    const std::size_t rows = sets[k].size() / dim;
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < dim; ++j) {
        out << (j ? "," : "") << sets[k][i * dim + j];
      }
      out << '\n';
    }
    written.push_back(path);
  }
  return written;
}

}  // namespace dasm
