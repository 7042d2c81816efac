#include "ncprobe/metrics.hpp"

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "test_util.hpp"

namespace ncprobe {
namespace {

using testing::random_tensor;
using testing::rel_diff;

TEST(Cdnv, PointMassesGiveZero) {
  auto v = cdnv(Tensor::matrix({{1, 2}, {1, 2}}), Tensor::matrix({{3, 4}}));
  EXPECT_EQ(v.value, 0.0);
  EXPECT_FALSE(v.degenerate);
}

TEST(Cdnv, HandArithmetic) {
  auto v = cdnv(Tensor::matrix({{0}, {2}}), Tensor::matrix({{10}, {12}}));
  EXPECT_DOUBLE_EQ(v.value, 0.01);
}

TEST(Cdnv, CoincidentMeansAreFlagged) {
  auto v = cdnv(Tensor::matrix({{0}, {2}}), Tensor::matrix({{-1}, {3}}));
  EXPECT_TRUE(v.degenerate);
  EXPECT_EQ(v.value, kCdnvInf);
}

TEST(Cdnv, DimensionMismatch) {
  EXPECT_THROW(cdnv(Tensor({2, 3}), Tensor({2, 2})), ShapeError);
}

TEST(Cdnv, MatchesExtendedPrecisionOracle) {
  SeededRng rng(51);
  for (int t = 0; t < 50; ++t) {
    auto a = random_tensor(rng, {5, 3});
    auto b = random_tensor(rng, {5, 3});
    EXPECT_LE(rel_diff(cdnv(a, b).value, oracle::cdnv(a, b)), 1e-12);
  }
}

TEST(Cdnv, ScaleAndTranslationInvariant) {
  SeededRng rng(52);
  for (int t = 0; t < 20; ++t) {
    auto a = random_tensor(rng, {6, 4});
    auto b = random_tensor(rng, {7, 4});
    const double base = cdnv(a, b).value;
    for (double alpha : {-3.0, 0.01, 250.0}) {
      auto sa = a, sb = b;
      for (auto& v : sa.data()) v *= alpha;
      for (auto& v : sb.data()) v *= alpha;
      EXPECT_LE(rel_diff(cdnv(sa, sb).value, base), 1e-10);
    }
    auto shift = random_tensor(rng, {4});
    auto ta = a, tb = b;
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t j = 0; j < 4; ++j) ta.at(i, j) += shift[j];
    for (std::size_t i = 0; i < 7; ++i)
      for (std::size_t j = 0; j < 4; ++j) tb.at(i, j) += shift[j];
    EXPECT_LE(rel_diff(cdnv(ta, tb).value, base), 1e-10);
  }
}

std::pair<Tensor, std::vector<int>> labeled_features(SeededRng& rng, std::size_t classes, std::size_t per, std::size_t p) {
  Tensor f = random_tensor(rng, {classes * per, p});
  std::vector<int> y;
  for (std::size_t c = 0; c < classes; ++c)
    for (std::size_t i = 0; i < per; ++i) {
      y.push_back(static_cast<int>(c));
      f.at(c * per + i, 0) += 3.0 * static_cast<double>(c);
    }
  return {f, y};
}

TEST(AvgCdnv, TwoClassesEqualsSinglePair) {
  SeededRng rng(53);
  auto [f, y] = labeled_features(rng, 2, 5, 3);
  std::vector<std::size_t> i0{0, 1, 2, 3, 4}, i1{5, 6, 7, 8, 9};
  auto m = avg_cdnv(f, y, 2);
  EXPECT_EQ(m.average, cdnv(f.gather_rows(i0), f.gather_rows(i1)).value);
  EXPECT_EQ(m.at(0, 1), m.at(1, 0));
  EXPECT_TRUE(std::isnan(m.at(0, 0)));
}

TEST(AvgCdnv, DistinctPointMassesGiveZero) {
  Tensor f = Tensor::matrix({{0, 0}, {0, 0}, {1, 0}, {1, 0}, {0, 5}, {0, 5}});
  EXPECT_EQ(avg_cdnv(f, std::vector<int>{0, 0, 1, 1, 2, 2}, 3).average, 0.0);
}

TEST(AvgCdnv, MatchesBruteForcePairAverage) {
  SeededRng rng(54);
  for (std::size_t C = 2; C <= 6; ++C) {
    auto [f, y] = labeled_features(rng, C, 4, 3);
    auto groups = index_by_class(y, C);
    double sum = 0.0;
    int n = 0;
    for (std::size_t i = 0; i < C; ++i)
      for (std::size_t j = 0; j < C; ++j)
        if (i != j) {
          sum += oracle::cdnv(f.gather_rows(groups[i]), f.gather_rows(groups[j]));
          ++n;
        }
    EXPECT_LE(rel_diff(avg_cdnv(f, y, C).average, sum / n), 1e-12);
  }
}

TEST(AvgCdnv, DegeneratePairsExcludedAndCounted) {
  Tensor f = Tensor::matrix({{0}, {2}, {-1}, {3}, {10}, {12}});
  auto m = avg_cdnv(f, std::vector<int>{0, 0, 1, 1, 2, 2}, 3);
  EXPECT_EQ(m.degenerate_pairs, 1u);
  EXPECT_EQ(m.at(0, 1), kCdnvInf);
  const double v02 = (1.0 + 1.0) / (2 * 100.0), v12 = (4.0 + 1.0) / (2 * 100.0);
  EXPECT_NEAR(m.average, (v02 + v12) / 2, 1e-15);
}

TEST(AvgCdnv, AllDegenerateThrows) {
  Tensor f = Tensor::matrix({{0}, {2}, {-1}, {3}});
  EXPECT_THROW(avg_cdnv(f, std::vector<int>{0, 0, 1, 1}, 2), AllPairsDegenerateError);
}

TEST(NccPredict, ZeroDistanceWins) {
  Tensor means = Tensor::matrix({{0, 0}, {1, 1}, {2, 2}, {5, -1}});
  EXPECT_EQ(ncc_predict(std::vector<double>{2, 2}, means), 2);
}

TEST(NccPredict, DirectComparison) {
  Tensor means = Tensor::matrix({{0.5}, {4}});
  EXPECT_EQ(ncc_predict(std::vector<double>{2}, means), 0);
}

TEST(NccPredict, TiesGoToSmallestIndex) {
  Tensor means = Tensor::matrix({{-1}, {1}, {3}});
  EXPECT_EQ(ncc_predict(std::vector<double>{0}, means), 0);
  EXPECT_EQ(ncc_predict(std::vector<double>{2}, means), 1);
}

TEST(NccPredict, InvariantUnderRotationAndTranslation) {
  SeededRng rng(55);
  const std::size_t p = 5;
  auto means = random_tensor(rng, {4, p});
  auto xs = random_tensor(rng, {40, p});
  std::vector<int> base;
  for (std::size_t i = 0; i < 40; ++i) base.push_back(ncc_predict(xs.row(i), means));
  for (int r = 0; r < 20; ++r) {
    // Gram-Schmidt on a Gaussian matrix gives a random orthogonal Q.
    auto q = random_tensor(rng, {p, p});
    for (std::size_t i = 0; i < p; ++i) {
      for (std::size_t k = 0; k < i; ++k) {
        double dot = 0.0;
        for (std::size_t j = 0; j < p; ++j) dot += q.at(i, j) * q.at(k, j);
        for (std::size_t j = 0; j < p; ++j) q.at(i, j) -= dot * q.at(k, j);
      }
      double n = 0.0;
      for (std::size_t j = 0; j < p; ++j) n += q.at(i, j) * q.at(i, j);
      for (std::size_t j = 0; j < p; ++j) q.at(i, j) /= std::sqrt(n);
    }
    auto shift = random_tensor(rng, {1, p});
    auto rm = matmul(means, q), rx = matmul(xs, q);
    for (std::size_t i = 0; i < 40; ++i) {
      for (std::size_t j = 0; j < p; ++j) rx.at(i, j) += shift[j];
      ASSERT_EQ(ncc_predict(rx.row(i), [&] {
                  auto m = rm;
                  for (std::size_t c = 0; c < 4; ++c)
                    for (std::size_t j = 0; j < p; ++j) m.at(c, j) += shift[j];
                  return m;
                }()),
                base[i]);
    }
  }
}

TEST(NccError, CollapsedFeaturesGiveZero) {
  Tensor means = Tensor::matrix({{0, 0}, {3, 0}, {0, 3}});
  Tensor f = Tensor::matrix({{0, 0}, {3, 0}, {0, 3}, {0, 3}});
  EXPECT_EQ(ncc_error(f, std::vector<int>{0, 1, 2, 2}, means), 0.0);
  EXPECT_EQ(ncc_error(f, std::vector<int>{1, 1, 0, 2}, means), 0.5);
}

// Eight samples per class keeps every mean exact in binary floating point.
TEST(NccError, MatchesExactOracle) {
  SeededRng rng(56);
  for (int t = 0; t < 30; ++t) {
    const std::size_t C = 3, m = 24, p = 2;
    std::vector<std::vector<long long>> xs(m, std::vector<long long>(p));
    std::vector<int> y(m);
    Tensor f({m, p});
    for (std::size_t i = 0; i < m; ++i) {
      y[i] = static_cast<int>(i % C);
      for (std::size_t j = 0; j < p; ++j) f.at(i, j) = static_cast<double>(xs[i][j] = static_cast<long long>(rng.below(5)));
    }
    std::vector<std::vector<long long>> sums(C, std::vector<long long>(p, 0));
    std::vector<long long> counts(C, 0);
    for (std::size_t i = 0; i < m; ++i) {
      counts[y[i]]++;
      for (std::size_t j = 0; j < p; ++j) sums[y[i]][j] += xs[i][j];
    }
    auto st = class_stats(f, y, C);
    std::size_t wrong = 0;
    for (std::size_t i = 0; i < m; ++i) wrong += oracle::nearest_mean_exact(xs[i], sums, counts) != y[i];
    EXPECT_EQ(ncc_error(f, y, st.means), static_cast<double>(wrong) / m);
  }
}

TEST(EffectiveDepth, FirstQualifyingLayer) {
  EXPECT_EQ(effective_depth(std::vector<double>{0.5, 0.3, 0.0, 0.0}, 0.01), 3u);
  EXPECT_EQ(effective_depth(std::vector<double>{0.5, 0.3, 0.2}, 0.01), 3u);
  EXPECT_EQ(effective_depth(std::vector<double>{0.5, 0.3, 0.2, 0.4}, 0.01), 4u);
  EXPECT_EQ(effective_depth(std::vector<double>{0.0, 0.2, 0.0}, 0.01), 1u);
}

TEST(EffectiveDepth, MonotoneInEpsilon) {
  SeededRng rng(57);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> e(1 + rng.below(8));
    for (auto& v : e) v = rng.uniform() * 0.1;
    double prev_eps = 0.0;
    std::size_t prev = effective_depth(e, prev_eps);
    for (double eps : {0.001, 0.01, 0.03, 0.05, 0.1}) {
      auto d = effective_depth(e, eps);
      ASSERT_LE(d, prev);
      prev = d;
    }
  }
}

// Identity first block on positive point masses: layer 1 is NCC separable.
TEST(CollapseReport, IdentityBlockOnSeparableInput) {
  auto [tr, te] = synth_mixture_splits({3, 6, 4, 4, 2.0, 0.0}, SeededRng(58));
  for (auto* d : {&tr, &te})
    for (auto& v : d->inputs.data()) v += 10.0;
  SeededRng rng(59);
  auto net = build_mlp(2, 4, 4, 3, rng);
  net.layers[0].weight = Tensor::identity(4);
  auto& bn = net.layers[1];
  for (std::size_t j = 0; j < 4; ++j) bn.running_var[j] = 1.0 - bn.eps;
  auto rep = collapse_report(net, tr, te);
  EXPECT_EQ(rep.layers[0].ncc_train_err, 0.0);
  EXPECT_LE(rep.layers[0].cdnv_train.average, 1e-20);
  EXPECT_TRUE(rep.layers[0].ncc_separable);
  EXPECT_EQ(rep.effective_depth, 1u);
}

TEST(CollapseReport, UntrainedNetworkIsWellFormed) {
  auto [tr, te] = synth_mixture_splits({4, 5, 3, 6, 2.0, 0.0}, SeededRng(60));
  SeededRng rng(61);
  auto net = build_mlp(3, 8, 6, 4, rng);
  auto rep = collapse_report(net, tr, te);
  ASSERT_EQ(rep.layers.size(), 3u);
  for (const auto& l : rep.layers) {
    EXPECT_GE(l.ncc_train_err, 0.0);
    EXPECT_LE(l.ncc_train_err, 1.0);
    EXPECT_TRUE(l.cdnv_test.has_value());
    EXPECT_EQ(l.cdnv_train.values.size(), 16u);
  }
  EXPECT_GE(rep.effective_depth, 1u);
  EXPECT_LE(rep.effective_depth, 3u);
  auto j = to_json(rep);
  for (const char* k : {"epsilon", "layers", "model_train_err", "model_test_err", "effective_depth"})
    EXPECT_TRUE(j.contains(k)) << k;
  for (const char* k : {"index", "cdnv_train_avg", "cdnv_test_avg", "cdnv_train_matrix", "cdnv_test_matrix",
                        "ncc_train_err", "ncc_test_err", "degenerate_pairs"})
    EXPECT_TRUE(j["layers"][0].contains(k)) << k;
}

TEST(CollapseReport, TrainedNetworkCollapsesAtTopAndIsDeterministic) {
  auto [tr, te] = synth_mixture_splits({3, 40, 20, 6, 3.0, 1.0}, SeededRng(62));
  auto st = fit_standardizer(tr);
  tr = st.apply(tr);
  te = st.apply(te);
  SeededRng rng(63);
  SgdConfig cfg;
  cfg.epochs = 150;
  cfg.batch_size = 32;
  cfg.decay_epochs = {75, 110};
  auto net = train(build_mlp(3, 32, 6, 3, rng), tr, cfg).net;
  auto rep = collapse_report(net, tr, te);
  EXPECT_LE(rep.layers.back().ncc_train_err, 0.01);
  auto again = collapse_report(net, tr, te);
  EXPECT_EQ(to_json(rep).dump(), to_json(again).dump());
  EXPECT_EQ(layer_ncc_train_errors(net, tr), rep.ncc_train_errors());
  ReportOptions o;
  o.recompute_test_means = true;
  EXPECT_EQ(collapse_report(net, tr, te, o).layers.size(), rep.layers.size());
}

TEST(CollapseReport, CsvRowsPerLayer) {
  CollapseReport r;
  r.layers.resize(2);
  r.layers[0].index = 1;
  r.layers[1].index = 2;
  r.effective_depth = 2;
  auto csv = report_csv_rows(r, 7);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 2);
  EXPECT_EQ(csv.substr(0, 4), "7,1,");
}

TEST(LinearProbe, OneHotFeaturesAreFitExactly) {
  const std::size_t C = 4, m = 40;
  Tensor f({m, C});
  std::vector<int> y(m);
  for (std::size_t i = 0; i < m; ++i) {
    y[i] = static_cast<int>(i % C);
    f.at(i, y[i]) = 1.0;
  }
  auto r = linear_probe(f, y, f, y, C);
  EXPECT_EQ(r.train_err, 0.0);
  EXPECT_EQ(r.test_err, 0.0);
}

TEST(LinearProbe, RandomLabelsStayNearChance) {
  SeededRng rng(64);
  const std::size_t C = 3, m = 600;
  auto f = random_tensor(rng, {m, 3});
  std::vector<int> y(m);
  for (auto& v : y) v = static_cast<int>(rng.below(C));
  auto r = linear_probe(f, y, f, y, C);
  EXPECT_GT(r.train_err, 0.5);
  EXPECT_LT(r.train_err, 0.75);
}

TEST(LinearProbe, NoWorseThanNccOnSeparableFeatures) {
  auto [tr, te] = synth_mixture_splits({4, 30, 30, 8, 6.0, 0.5}, SeededRng(65));
  auto st = class_stats(tr.inputs, tr.labels, 4);
  const double ncc_tr = ncc_error(tr.inputs, tr.labels, st.means);
  ASSERT_EQ(ncc_tr, 0.0);
  auto r = linear_probe(tr.inputs, tr.labels, te.inputs, te.labels, 4);
  EXPECT_LE(r.train_err, ncc_tr);
}

}  // namespace
}  // namespace ncprobe
