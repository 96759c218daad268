#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "dasm/error.hpp"
#include "dasm/param_set.hpp"
#include "dasm/rng.hpp"
#include "dasm/tensor.hpp"

namespace dasm {

inline constexpr double kDefaultXi = 1e-8;

struct ModelConfig {
  std::size_t input_dim = 32;
  std::vector<std::size_t> hidden = {64, 64};
  std::size_t feature_dim = 16;
  std::uint64_t init_seed = 1;
  // <= 0 picks the fan-based default s = sqrt(6 / (fan_in + fan_out))
  double init_scale = 0.0;

  void validate() const {
    if (input_dim < 1 || feature_dim < 1) {
      throw ConfigError("model dims must be >= 1");
    }
    for (std::size_t h : hidden) {
      if (h < 1) throw ConfigError("hidden widths must be >= 1");
    }
  }
};

// Divides each row by max(||row||, xi), so nonzero rows come out exactly
// unit-norm and zero rows stay zero. The gradient flows through the
// normalization, including the norm itself.
inline Tensor normalize_rows(const Tensor& z, double xi = kDefaultXi) {
  if (z.rank() != 2) {
    throw ShapeError("normalize_rows: rank-2 tensor required, got " +
                     shape_str(z.shape()));
  }
  const std::size_t rows = z.shape()[0], cols = z.shape()[1];
  Tensor out = detail::make_op(z.shape(), {z.node()});
  std::vector<double> norms(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      const double x = z.values()[i * cols + j];
      s += x * x;
    }
    norms[i] = std::sqrt(s);
    const double inv = 1.0 / std::max(norms[i], xi);
    for (std::size_t j = 0; j < cols; ++j) {
      out.raw_values()[i * cols + j] = z.values()[i * cols + j] * inv;
    }
  }
  if (out.requires_grad()) {
    out.node()->backward = [rows, cols, norms, xi](detail::Node& self) {
      detail::Node& A = *self.parents[0];
      A.ensure_grad();
      // ||x|| > xi:  y = x/||x||,  dL/dx = g/||x|| - x (g.x)/||x||^3
      // ||x|| <= xi: y = x/xi (linear), dL/dx = g/xi
      for (std::size_t i = 0; i < rows; ++i) {
        double gx = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
          gx += self.grad[i * cols + j] * A.value[i * cols + j];
        }
        const double r = norms[i];
        const double s = 1.0 / std::max(r, xi);
        const double corr = r > xi ? gx / (r * r * r) : 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
          const std::size_t idx = i * cols + j;
          A.grad[idx] += s * self.grad[idx] - corr * A.value[idx];
        }
      }
    };
  }
  return out;
}

// MLP encoder with a two-class affine head. Hidden layers are affine+relu;
// the feature projection and the head are affine, so features are not
// confined to the positive orthant before normalization.
class EncoderClassifier {
 public:
  struct Output {
    Tensor features;  // [B, D]
    Tensor logits;    // [B, 2]
  };

  explicit EncoderClassifier(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(cfg_.init_seed);
    std::size_t in = cfg_.input_dim;
    for (std::size_t h : cfg_.hidden) {
      add_layer(in, h, rng);
      in = h;
    }
    add_layer(in, cfg_.feature_dim, rng);  // feature projection
    add_layer(cfg_.feature_dim, 2, rng);   // head
  }

  Output forward(const Tensor& x) const {
    if (x.rank() != 2 || x.shape()[1] != cfg_.input_dim) {
      throw ShapeError("forward: expected [B," + std::to_string(cfg_.input_dim) +
                       "] input, got " + shape_str(x.shape()));
    }
    const std::size_t batch = x.shape()[0];
    Tensor h = x;
    const std::size_t n_encoder = cfg_.hidden.size() + 1;
    for (std::size_t l = 0; l < n_encoder; ++l) {
      h = affine(h, l, batch);
      if (l + 1 < n_encoder) h = relu(h);
    }
    Tensor logits = affine(h, n_encoder, batch);
    return {h, logits};
  }

  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }
  const ModelConfig& config() const { return cfg_; }
  std::size_t num_parameters() const { return params_.size(); }

  // Layer weight shapes in parameter order, used by checkpointing and
  // filter-normalized landscape directions.
  std::vector<Shape> parameter_shapes() const {
    std::vector<Shape> out;
    for (const auto& p : params_) out.push_back(p.shape());
    return out;
  }

 private:
  void add_layer(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    double s = cfg_.init_scale;
    if (s <= 0.0) s = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::vector<double> w(fan_in * fan_out);
    for (auto& v : w) v = rng.uniform(-s, s);
    weights_.push_back(Tensor::from({fan_in, fan_out}, std::move(w), true));
    biases_.push_back(Tensor::zeros({1, fan_out}, true));
    params_.add(weights_.back());
    params_.add(biases_.back());
  }

  // x @ W + 1 * b, with the bias broadcast expressed as a matmul against a
  // constant ones column so elementwise ops stay scalar-broadcast-only.
  Tensor affine(const Tensor& x, std::size_t layer, std::size_t batch) const {
    Tensor xb = matmul(x, weights_[layer]);
    Tensor ones = Tensor::filled({batch, 1}, 1.0);
    return add(xb, matmul(ones, biases_[layer]));
  }

  ModelConfig cfg_;
  std::vector<Tensor> weights_;
  std::vector<Tensor> biases_;
  ParameterSet params_;
};

}  // namespace dasm
