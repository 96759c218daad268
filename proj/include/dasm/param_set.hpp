#pragma once

#include <cstring>
#include <span>
#include <vector>

#include "dasm/error.hpp"
#include "dasm/tensor.hpp"

namespace dasm {

// Ordered collection of leaf parameter tensors with the flat-vector
// operations the two-pass optimizers need: flatten, in-place perturbation,
// and bit-exact snapshot/restore.
class ParameterSet {
 public:
  void add(Tensor t) {
    if (!t.defined() || !t.requires_grad()) {
      throw ContractError("ParameterSet: parameters must be leaves with requires_grad");
    }
    total_ += t.numel();
    params_.push_back(std::move(t));
  }

  std::size_t count() const { return params_.size(); }
  std::size_t size() const { return total_; }

  Tensor& operator[](std::size_t i) { return params_[i]; }
  const Tensor& operator[](std::size_t i) const { return params_[i]; }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::vector<double> flatten() const {
    std::vector<double> out;
    out.reserve(total_);
    for (const auto& p : params_) {
      out.insert(out.end(), p.values().begin(), p.values().end());
    }
    return out;
  }

  // Gradient in the same flat layout; parameters without a populated buffer
  // contribute zeros.
  std::vector<double> flatten_grad() const {
    std::vector<double> out;
    out.reserve(total_);
    for (const auto& p : params_) {
      if (p.has_grad()) {
        out.insert(out.end(), p.grad().begin(), p.grad().end());
      } else {
        out.insert(out.end(), p.numel(), 0.0);
      }
    }
    return out;
  }

  void add_in_place(std::span<const double> delta) {
    if (delta.size() != total_) {
      throw ShapeError("add_in_place: delta length " + std::to_string(delta.size()) +
                       " != parameter count " + std::to_string(total_));
    }
    std::size_t off = 0;
    for (auto& p : params_) {
      auto v = p.raw_values();
      for (std::size_t i = 0; i < v.size(); ++i) v[i] += delta[off + i];
      off += v.size();
    }
  }

  void assign(std::span<const double> values) {
    if (values.size() != total_) {
      throw ShapeError("assign: value length mismatch");
    }
    std::size_t off = 0;
    for (auto& p : params_) {
      auto v = p.raw_values();
      std::memcpy(v.data(), values.data() + off, v.size() * sizeof(double));
      off += v.size();
    }
  }

  void snapshot() {
    snapshot_ = flatten();
    has_snapshot_ = true;
  }

  // Restores the exact bytes captured by the last snapshot.
  void restore() {
    if (!has_snapshot_) throw StateError("restore called without snapshot");
    assign(snapshot_);
  }

  bool has_snapshot() const { return has_snapshot_; }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

 private:
  std::vector<Tensor> params_;
  std::vector<double> snapshot_;
  std::size_t total_ = 0;
  bool has_snapshot_ = false;
};

inline double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace dasm
