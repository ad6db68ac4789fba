#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <map>
#include <numeric>
#include <random>

#include "test_support.hpp"
#include "viewlab/eval.hpp"

using namespace viewlab;
using namespace viewlab::testing;

TEST(Knn, MatchesBruteForceOnRandomInstances) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix tr = random_unit_rows(200, 8, rng), te = random_unit_rows(50, 8, rng);
    std::vector<int> y(200);
    std::uniform_int_distribution<int> lab(0, 4);
    for (auto& v : y) v = lab(rng);
    const std::size_t k = 1 + static_cast<std::size_t>(trial % 7);
    EXPECT_EQ(knn_predict(tr, y, te, k), brute_force_knn(tr, y, te, k)) << "trial " << trial;
  }
}

TEST(Knn, TiesResolveByIndexAndEarliestNeighbour) {
  // Three identical training rows: ranking falls back to index order.
  Matrix tr(4, 2);
  tr << 1, 0, 1, 0, 1, 0, 0, 1;
  Matrix te(1, 2);
  te << 1, 0;
  EXPECT_EQ(knn_predict(tr, {7, 3, 3, 3}, te, 1), std::vector<int>{7});
  // k=2 splits 7 vs 3; the label of the best-ranked neighbour wins.
  EXPECT_EQ(knn_predict(tr, {7, 3, 3, 3}, te, 2), std::vector<int>{7});
  EXPECT_EQ(knn_predict(tr, {7, 3, 3, 3}, te, 3), std::vector<int>{3});
}

TEST(Knn, DuplicatedPointAndSelfEvaluation) {
  std::mt19937_64 rng(3);
  const Matrix tr = random_unit_rows(60, 6, rng);
  std::vector<int> y(60);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = static_cast<int>(i % 4);
  EXPECT_EQ(knn_predict(tr, y, tr.row(17), 1), std::vector<int>{y[17]});
  EXPECT_DOUBLE_EQ(knn_accuracy(tr, y, tr, y, 1), 1.0);
}

TEST(Knn, RejectsBadK) {
  std::mt19937_64 rng(4);
  const Matrix tr = random_unit_rows(5, 3, rng);
  const std::vector<int> y{0, 1, 0, 1, 0};
  EXPECT_THROW(knn_predict(tr, y, tr, 6), ConfigError);
  EXPECT_THROW(knn_predict(tr, y, tr, 0), ConfigError);
}

TEST(LinearProbe, SeparatesOneHotFeatures) {
  std::mt19937_64 rng(5);
  const std::size_t classes = 4;
  auto make = [&](std::size_t n, std::vector<int>& y) {
    Matrix x = Matrix::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(classes));
    y.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = static_cast<int>(rng() % classes);
      x(static_cast<Eigen::Index>(i), y[i]) = 1.0;
    }
    return x;
  };
  std::vector<int> ytr, yte;
  const Matrix xtr = make(200, ytr), xte = make(100, yte);
  ProbeConfig cfg;
  cfg.epochs = 20;
  EXPECT_DOUBLE_EQ(linear_probe(xtr, ytr, xte, yte, classes, cfg, 1), 1.0);
}

TEST(LinearProbe, RandomFeaturesGiveChance) {
  std::mt19937_64 rng(6);
  const std::size_t classes = 4, n_test = 400;
  auto make = [&](std::size_t n, std::vector<int>& y) {
    y.resize(n);
    for (auto& v : y) v = static_cast<int>(rng() % classes);
    Matrix x(static_cast<Eigen::Index>(n), 16);
    std::normal_distribution<double> nd;
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = nd(rng);
    return x;
  };
  std::vector<int> ytr, yte;
  const Matrix xtr = make(400, ytr), xte = make(n_test, yte);
  ProbeConfig cfg;
  cfg.epochs = 20;
  const double acc = linear_probe(xtr, ytr, xte, yte, classes, cfg, 2);
  const double p = 1.0 / classes, sd = std::sqrt(p * (1 - p) / n_test);
  EXPECT_NEAR(acc, p, 3 * sd);
}

TEST(LinearProbe, LeavesBackboneUntouchedAndRejectsSingleClass) {
  BlobDatasetConfig dc;
  dc.classes = 2;
  dc.train_per_class = 20;
  dc.test_per_class = 10;
  dc.image = {3, 16, 16};
  const DatasetSplit split = make_blob_dataset(dc);
  const Network f = make_encoder(dc.image, 8, 1);
  const Vector before = f.parameters();
  ProbeConfig cfg;
  cfg.epochs = 3;
  const double acc = linear_probe(f, split.train, split.test, cfg, 0);
  EXPECT_GE(acc, 0.0);
  EXPECT_LE(acc, 1.0);
  ASSERT_EQ(before.size(), f.parameters().size());
  EXPECT_EQ(std::memcmp(before.data(), f.parameters().data(), sizeof(double) * before.size()), 0);

  Dataset single = split.train;
  std::fill(single.labels.begin(), single.labels.end(), 0);
  EXPECT_THROW(linear_probe(f, single, split.test, cfg, 0), ConfigError);
}

TEST(Mine, RecoversGaussianInformation) {
  const auto [u, v] = correlated_gaussians(5000, 0.9, 1);
  const MineResult r = mine_estimate(u, v, MineConfig{}, 1);
  EXPECT_NEAR(r.estimate, gaussian_mi(0.9), 0.15 * gaussian_mi(0.9)) << "bound " << r.bound;
}

TEST(Mine, IndependentPairsNearZero) {
  const auto [u, v] = correlated_gaussians(5000, 0.0, 2);
  const MineResult r = mine_estimate(u, v, MineConfig{}, 2);
  EXPECT_GE(r.estimate, 0.0);
  EXPECT_LE(r.estimate, 0.05) << "bound " << r.bound;
}

TEST(Mine, MonotoneInCorrelation) {
  MineConfig cfg;
  cfg.steps = 600;
  cfg.batch_size = 128;
  double prev = -1.0;
  for (double rho : {0.3, 0.6, 0.9}) {
    double mean = 0.0;
    for (std::uint64_t s = 0; s < 5; ++s) {
      const auto [u, v] = correlated_gaussians(2000, rho, 100 + s);
      mean += mine_estimate(u, v, cfg, s).estimate / 5.0;
    }
    EXPECT_GT(mean, prev) << "rho " << rho;
    std::printf("rho %.1f: mean estimate %.4f (true %.4f)\n", rho, mean, gaussian_mi(rho));
    prev = mean;
  }
}

TEST(Mine, AbortsOnUnstableCritic) {
  // Identical u and v have unbounded information; a tiny ceiling trips early.
  const auto [u, v] = correlated_gaussians(2000, 0.0, 3);
  MineConfig cfg;
  cfg.steps = 400;
  cfg.max_nats = 0.5;
  EXPECT_THROW(mine_estimate(u, u, cfg, 0), NumericalError);
  EXPECT_THROW(mine_estimate(u.topRows(999), v.topRows(999), cfg, 0), ConfigError);
}

TEST(Metrics, RowCarriesProvenance) {
  const auto j = metric_row("knn5_acc", 0.75, "abc123", 9);
  EXPECT_EQ(j.at("metric"), "knn5_acc");
  EXPECT_DOUBLE_EQ(j.at("value").get<double>(), 0.75);
  EXPECT_EQ(j.at("config_hash"), "abc123");
  EXPECT_EQ(j.at("seed").get<std::uint64_t>(), 9u);
}
