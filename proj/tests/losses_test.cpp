#include "dasm/losses.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "dasm/rng.hpp"
#include "support/finite_diff.hpp"
#include "support/oracles.hpp"

using namespace dasm;

namespace {

// Rows drawn on the unit sphere.
Tensor random_unit_rows(std::size_t n, std::size_t dim, Rng& rng,
                        bool requires_grad = false) {
  std::vector<double> v(n * dim);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < dim; ++j) {
      v[i * dim + j] = rng.normal();
      s += v[i * dim + j] * v[i * dim + j];
    }
    s = std::sqrt(s);
    for (std::size_t j = 0; j < dim; ++j) v[i * dim + j] /= s;
  }
  return Tensor::from({n, dim}, std::move(v), requires_grad);
}

std::vector<std::vector<double>> rows_of(const Tensor& t) {
  const std::size_t n = t.shape()[0], d = t.shape()[1];
  std::vector<std::vector<double>> out(n, std::vector<double>(d));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) out[i][j] = t.values()[i * d + j];
  }
  return out;
}

}  // namespace

TEST(CrossEntropy, UniformLogitsGiveLogTwo) {
  Tensor logits = Tensor::zeros({3, 2});
  Tensor ce = cross_entropy(logits, {0, 1, 0});
  EXPECT_NEAR(ce.item(), std::log(2.0), 1e-15);
}

TEST(CrossEntropy, SaturatedCorrectIsNearZero) {
  Tensor logits = Tensor::from({1, 2}, {20.0, -20.0});
  EXPECT_LT(cross_entropy(logits, {0}).item(), 1e-8);
}

TEST(CrossEntropy, GradientIsSoftmaxMinusOnehot) {
  // two rows of uniform logits, label 0: per-row gradient (p - onehot)/B
  Tensor logits = Tensor::zeros({2, 2}, true);
  backward(cross_entropy(logits, {0, 0}));
  EXPECT_NEAR(logits.grad()[0], -0.25, 1e-15);
  EXPECT_NEAR(logits.grad()[1], 0.25, 1e-15);
  EXPECT_NEAR(logits.grad()[2], -0.25, 1e-15);
  EXPECT_NEAR(logits.grad()[3], 0.25, 1e-15);
}

TEST(CrossEntropy, GradientMatchesFiniteDifference) {
  Rng rng(31);
  std::vector<double> v(5 * 2);
  for (auto& x : v) x = rng.uniform(-2, 2);
  Tensor logits = Tensor::from({5, 2}, std::move(v), true);
  std::vector<int> y = {0, 1, 1, 0, 1};

  backward(cross_entropy(logits, y));
  auto fd = testsupport::central_diff(
      logits, [&] { return cross_entropy(logits, y).item(); });
  testsupport::expect_grad_close(logits.grad(), fd);

  // oracle cross-check of the value
  double ref = 0.0;
  auto rows = rows_of(logits);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    ref += testsupport::softmax_ce_reference(rows[i], y[i]);
  }
  EXPECT_NEAR(cross_entropy(logits, y).item(), ref / 5.0, 1e-12);
}

TEST(CrossEntropy, PermutationInvariant) {
  Rng rng(32);
  std::vector<double> v(6 * 2);
  for (auto& x : v) x = rng.uniform(-3, 3);
  std::vector<int> y = {0, 1, 0, 0, 1, 1};
  Tensor logits = Tensor::from({6, 2}, v);
  const double base = cross_entropy(logits, y).item();

  std::vector<std::size_t> perm = {5, 2, 0, 4, 1, 3};
  std::vector<double> pv(v.size());
  std::vector<int> py(y.size());
  for (std::size_t i = 0; i < 6; ++i) {
    pv[i * 2] = v[perm[i] * 2];
    pv[i * 2 + 1] = v[perm[i] * 2 + 1];
    py[i] = y[perm[i]];
  }
  EXPECT_NEAR(cross_entropy(Tensor::from({6, 2}, pv), py).item(), base, 1e-12);
}

TEST(Dscl, SameDomainBatchIsZero) {
  Rng rng(33);
  Tensor z = random_unit_rows(2, 4, rng);
  auto res = dscl(z, {1, 1}, 0.1);
  EXPECT_DOUBLE_EQ(res.loss.item(), 0.0);
  EXPECT_EQ(res.active_anchors, 2u);
  EXPECT_FALSE(res.all_excluded);
}

TEST(Dscl, WorkedThreeSampleExample) {
  // z1 = e1, z2 = e1 (domain 1); z3 = e2 (domain 2); tau = 1.
  // Anchors 1,2: S+ = e^1, S- = e^0, term = -log(e/(e+1)); anchor 3 excluded.
  Tensor z = Tensor::from({3, 2}, {1, 0, 1, 0, 0, 1});
  auto res = dscl(z, {1, 1, 2}, 1.0);
  const double expected = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
  EXPECT_NEAR(expected, 0.31326, 1e-5);  // pinned magnitude
  EXPECT_NEAR(res.loss.item(), expected, 1e-12);
  EXPECT_EQ(res.active_anchors, 2u);

  // brute-force pairwise oracle agrees
  const double oracle = testsupport::dscl_bruteforce(rows_of(z), {1, 1, 2}, 1.0);
  EXPECT_NEAR(res.loss.item(), oracle, 1e-12);
}

TEST(Dscl, AllAnchorsExcludedReturnsZeroWithFlag) {
  Rng rng(34);
  Tensor z = random_unit_rows(3, 4, rng);
  auto res = dscl(z, {0, 1, 2}, 0.1);  // one sample per domain
  EXPECT_DOUBLE_EQ(res.loss.item(), 0.0);
  EXPECT_TRUE(res.all_excluded);
  EXPECT_EQ(res.active_anchors, 0u);
}

TEST(Dscl, MatchesBruteForceOnRandomBatches) {
  Rng rng(35);
  for (std::size_t batch : {5u, 16u}) {
    Tensor z = random_unit_rows(batch, 6, rng);
    std::vector<int> d(batch);
    for (auto& x : d) x = static_cast<int>(rng.index(3));
    for (double tau : {1.0, 0.25, 0.1}) {
      auto res = dscl(z, d, tau);
      const double oracle = testsupport::dscl_bruteforce(rows_of(z), d, tau);
      EXPECT_NEAR(res.loss.item(), oracle, 1e-10 * std::max(1.0, std::fabs(oracle)));
      EXPECT_GE(res.loss.item(), 0.0);
    }
  }
}

TEST(Dscl, PermutationInvariant) {
  Rng rng(36);
  Tensor z = random_unit_rows(6, 4, rng);
  std::vector<int> d = {0, 1, 1, 2, 0, 2};
  const double base = dscl(z, d, 0.2).loss.item();

  std::vector<std::size_t> perm = {4, 0, 5, 2, 3, 1};
  std::vector<double> pv(6 * 4);
  std::vector<int> pd(6);
  for (std::size_t i = 0; i < 6; ++i) {
    for (std::size_t j = 0; j < 4; ++j) pv[i * 4 + j] = z.values()[perm[i] * 4 + j];
    pd[i] = d[perm[i]];
  }
  EXPECT_NEAR(dscl(Tensor::from({6, 4}, pv), pd, 0.2).loss.item(), base, 1e-12);
}

TEST(Dscl, ShrinkingTemperatureIncreasesLoss) {
  // anchor 0 has a negative more similar than its positive
  std::vector<double> v = {
      1.0, 0.0,   // z0, domain 1
      0.0, 1.0,   // z1, domain 1 (positive, cosine 0)
      1.0, 0.0,   // z2, domain 2 (negative, cosine 1)
      0.0, -1.0,  // z3, domain 2
  };
  Tensor z = Tensor::from({4, 2}, v);
  std::vector<int> d = {1, 1, 2, 2};
  double prev = -1.0;
  for (double tau : {1.0, 0.5, 0.25, 0.1}) {
    const double cur = dscl(z, d, tau).loss.item();
    EXPECT_GT(cur, prev);
    prev = cur;
  }
}

TEST(Dscl, GradientMatchesFiniteDifference) {
  Rng rng(37);
  std::vector<double> v(6 * 4);
  for (auto& x : v) x = rng.uniform(-1.5, 1.5);
  Tensor z = Tensor::from({6, 4}, std::move(v), true);
  std::vector<int> d = {0, 1, 1, 2, 0, 2};
  auto loss = [&] { return dscl(normalize_rows(z), d, 0.2).loss; };
  backward(loss());
  auto fd = testsupport::central_diff(z, [&] { return loss().item(); });
  testsupport::expect_grad_close(z.grad(), fd);
}

namespace {

LabeledBatch make_batch(const Tensor& x, std::vector<int> y, std::vector<int> d) {
  return LabeledBatch{x, std::move(y), std::move(d)};
}

}  // namespace

TEST(TotalLoss, CoverOnlyBatchDegenerates) {
  ModelConfig cfg;
  cfg.input_dim = 5;
  cfg.hidden = {6};
  cfg.feature_dim = 4;
  EncoderClassifier model(cfg);
  DomainCenterBank bank(2, 4, 0.9);

  Rng rng(38);
  std::vector<double> xs(3 * 5);
  for (auto& v : xs) v = rng.normal();
  auto batch = make_batch(Tensor::from({3, 5}, xs), {0, 0, 0}, {0, 0, 0});

  auto res = total_loss(model, batch, bank, {});
  EXPECT_DOUBLE_EQ(res.parts.dscl, 0.0);  // no negatives in a pure cover batch
  EXPECT_DOUBLE_EQ(res.parts.adgm, 0.0);  // no stego domain seen yet
  EXPECT_TRUE(res.parts.adgm_inactive);
  EXPECT_DOUBLE_EQ(res.parts.total, res.parts.ce);
}

TEST(TotalLoss, BreakdownSumsExactly) {
  ModelConfig cfg;
  cfg.input_dim = 5;
  cfg.hidden = {6};
  cfg.feature_dim = 4;
  EncoderClassifier model(cfg);
  DomainCenterBank bank(2, 4, 0.9);

  Rng rng(39);
  std::vector<double> xs(6 * 5);
  for (auto& v : xs) v = rng.normal();
  auto batch = make_batch(Tensor::from({6, 5}, xs), {0, 0, 1, 1, 1, 1},
                          {0, 0, 1, 1, 2, 2});

  // initialize centers from one pass of detached features
  auto fwd = model.forward(batch.x);
  bank.update(normalize_rows(fwd.features), batch.d);

  auto res = total_loss(model, batch, bank, {});
  EXPECT_NEAR(res.parts.total, res.parts.ce + res.parts.dscl + res.parts.adgm, 1e-12);
  EXPECT_GT(res.parts.dscl, 0.0);
  EXPECT_FALSE(res.parts.adgm_inactive);
}

TEST(TotalLoss, GradientMatchesFiniteDifference) {
  ModelConfig cfg;
  cfg.input_dim = 4;
  cfg.hidden = {5};
  cfg.feature_dim = 3;
  EncoderClassifier model(cfg);
  DomainCenterBank bank(2, 3, 0.9);

  Rng rng(40);
  std::vector<double> xs(6 * 4);
  for (auto& v : xs) v = rng.normal();
  auto batch = make_batch(Tensor::from({6, 4}, xs), {0, 0, 1, 1, 1, 1},
                          {0, 0, 1, 1, 2, 2});
  auto fwd = model.forward(batch.x);
  bank.update(normalize_rows(fwd.features), batch.d);

  auto res = total_loss(model, batch, bank, {});
  backward(res.total);
  auto analytic = model.params().flatten_grad();
  auto fd = testsupport::central_diff_params(model.params(), [&] {
    return total_loss(model, batch, bank, {}).parts.total;
  });
  testsupport::expect_grad_close(analytic, fd);
}

TEST(TotalLoss, DisabledComponentsAreExactZero) {
  ModelConfig cfg;
  cfg.input_dim = 4;
  cfg.hidden = {5};
  cfg.feature_dim = 3;
  EncoderClassifier model(cfg);
  DomainCenterBank bank(2, 3, 0.9);

  Rng rng(41);
  std::vector<double> xs(4 * 4);
  for (auto& v : xs) v = rng.normal();
  auto batch = make_batch(Tensor::from({4, 4}, xs), {0, 1, 1, 1}, {0, 1, 1, 2});
  auto fwd = model.forward(batch.x);
  bank.update(normalize_rows(fwd.features), batch.d);

  TotalLossOptions opt;
  opt.use_dscl = false;
  opt.use_adgm = false;
  auto res = total_loss(model, batch, bank, opt);
  EXPECT_EQ(res.parts.dscl, 0.0);
  EXPECT_EQ(res.parts.adgm, 0.0);
  EXPECT_DOUBLE_EQ(res.parts.total, res.parts.ce);
}

TEST(LabeledBatch, ValidationRules) {
  Tensor x = Tensor::zeros({2, 3});
  EXPECT_THROW(make_batch(x, {0, 2}, {0, 1}).validate(), InputError);
  EXPECT_THROW(make_batch(x, {0, 1}, {1, 1}).validate(), InputError);  // cover mislabeled
  EXPECT_THROW(make_batch(x, {0}, {0, 1}).validate(), ShapeError);
  make_batch(x, {0, 1}, {0, 2}).validate();
}
