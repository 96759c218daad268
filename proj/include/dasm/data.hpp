#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "dasm/error.hpp"
#include "dasm/losses.hpp"
#include "dasm/tensor.hpp"

namespace dasm {

// One split (train/val/test) of a benchmark at a fixed embedding rate.
// Row-major features plus aligned label/domain/id columns.
struct SplitData {
  std::size_t dim = 0;
  std::vector<double> x;
  std::vector<int> y;
  std::vector<int> d;
  std::vector<std::size_t> ids;

  std::size_t rows() const { return y.size(); }

  void push_row(std::span<const double> features, int label, int domain,
                std::size_t id) {
    if (features.size() != dim) throw ShapeError("push_row: dimension mismatch");
    x.insert(x.end(), features.begin(), features.end());
    y.push_back(label);
    d.push_back(domain);
    ids.push_back(id);
  }

  LabeledBatch batch(std::span<const std::size_t> idx) const {
    std::vector<double> bx(idx.size() * dim);
    std::vector<int> by(idx.size()), bd(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const std::size_t row = idx[i];
      std::copy(x.begin() + row * dim, x.begin() + (row + 1) * dim,
                bx.begin() + i * dim);
      by[i] = y[row];
      bd[i] = d[row];
    }
    return LabeledBatch{Tensor::from({idx.size(), dim}, std::move(bx)),
                        std::move(by), std::move(bd)};
  }

  LabeledBatch all() const {
    std::vector<std::size_t> idx(rows());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    return batch(idx);
  }
};

// Benchmark data at one embedding rate: domain 0 is cover, 1..S are the
// stego algorithms.
struct DomainDataset {
  double er = 0.0;
  std::size_t dim = 0;
  std::size_t num_stego_domains = 0;
  std::vector<std::string> domain_names;  // [0] = "cover"
  SplitData train, val, test;
};

}  // namespace dasm
