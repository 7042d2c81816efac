#include "ncprobe/depth_bound.hpp"

#include <gtest/gtest.h>

#include "oracles.hpp"

namespace ncprobe {
namespace {

SgdConfig quick_sgd(std::size_t epochs = 30, std::size_t batch = 32) {
  SgdConfig c;
  c.epochs = epochs;
  c.batch_size = batch;
  c.decay_epochs = {epochs / 2, epochs * 3 / 4};
  return c;
}

TEST(Hoeffding, ClosedFormExample) {
  using oracle::HighPrec;
  const HighPrec expect = boost::multiprecision::sqrt(boost::multiprecision::log(HighPrec(2) / HighPrec("0.05")) / 400);
  EXPECT_NEAR(hoeffding(200, 0.05), expect.convert_to<double>(), 1e-15);
  EXPECT_NEAR(hoeffding(200, 0.05), 0.09603, 1e-5);
}

TEST(Hoeffding, MonotoneOnGrid) {
  for (std::size_t k = 1; k < 300; k += 7)
    for (double d = 0.01; d < 0.99; d += 0.05) {
      EXPECT_GT(hoeffding(k, d), hoeffding(k + 1, d));
      EXPECT_GT(hoeffding(k, d), hoeffding(k, d + 0.01));
    }
}

TEST(Hoeffding, RejectsBadArguments) {
  EXPECT_THROW(hoeffding(0, 0.05), std::invalid_argument);
  EXPECT_THROW(hoeffding(3, 0.0), std::invalid_argument);
  EXPECT_THROW(hoeffding(3, 1.5), std::invalid_argument);
}

TEST(BoundArithmetic, TotalIsFourTermSum) {
  SeededRng rng(70);
  for (int t = 0; t < 100; ++t) {
    std::vector<int> v(1 + rng.below(20));
    for (auto& x : v) x = static_cast<int>(rng.below(2));
    const double pm = rng.uniform(), dm = rng.uniform() * 0.2, delta = 0.01 + 0.98 * rng.uniform();
    auto b = bound_from_indicators(v, pm, delta, dm);
    double avg = 0.0;
    for (int x : v) avg += x;
    avg /= static_cast<double>(v.size());
    EXPECT_NEAR(b.total_raw, avg + pm + dm + hoeffding(v.size(), delta), 1e-15);
    EXPECT_GE(b.total_clipped, 0.0);
    EXPECT_LE(b.total_clipped, 1.0);
  }
}

TEST(BoundArithmetic, VanishingTerms) {
  double prev = 1e9;
  for (std::size_t k : {10u, 1000u, 100000u}) {
    auto b = bound_from_indicators(std::vector<int>(k, 0), 0.0, 1.0, 0.0);
    EXPECT_EQ(b.total_raw, hoeffding(k, 1.0));
    EXPECT_LT(b.total_raw, prev);
    prev = b.total_raw;
  }
  EXPECT_LT(prev, 2e-3);
}

TEST(MinimalDepthTable, ReevaluatesMonotoneInEpsilon) {
  std::vector<DepthRun> t{{1, 0, 0.3, false}, {1, 1, 0.2, false}, {2, 0, 0.05, false}, {3, 0, 0.0, true}};
  EXPECT_EQ(minimal_depth_from_table(t, 0.0), 3u);
  EXPECT_EQ(minimal_depth_from_table(t, 0.05), 2u);
  EXPECT_EQ(minimal_depth_from_table(t, 0.25), 1u);
  EXPECT_FALSE(minimal_depth_from_table({{1, 0, 0.3, false}}, 0.1).has_value());
}

TEST(MinimalDepth, PointMassMixtureQualifiesAtDepthOne) {
  auto [d, unused] = synth_mixture_splits({3, 10, 0, 5, 3.0, 0.0}, SeededRng(71));
  DepthSearchConfig c;
  c.width = 16;
  c.l_max = 3;
  c.sgd = quick_sgd(30, 16);
  c.seeds = {0};
  auto r = minimal_ncc_depth(d, c, SeededRng(72));
  ASSERT_TRUE(r.minimal.has_value());
  EXPECT_EQ(*r.minimal, 1u);
  EXPECT_EQ(r.table.size(), 1u);
  EXPECT_NE(r.note.find("proxy"), std::string::npos);
  EXPECT_EQ(depth_search_csv(r).substr(0, 37), "depth,seed,ncc_train_err,interpolated");
}

TEST(MinimalDepth, NoneIsAResultNotAnError) {
  SeededRng rng(73);
  Tensor x = gaussian(rng, {40, 4});
  std::vector<int> y(40);
  for (std::size_t i = 0; i < 40; ++i) y[i] = static_cast<int>(i % 2);
  Dataset d = make_dataset(x, y, 2, {"noise"});
  DepthSearchConfig c;
  c.width = 2;
  c.l_max = 2;
  c.epsilon = 0.0;
  c.sgd = quick_sgd(5, 8);
  c.seeds = {0, 1};
  auto r = minimal_ncc_depth(d, c, SeededRng(74));
  EXPECT_FALSE(r.minimal.has_value());
  EXPECT_EQ(r.table.size(), 4u);
  EXPECT_EQ(to_json(r)["minimal_depth"], "none");
  for (const auto& row : r.table) EXPECT_FALSE(row.interpolated);
}

TEST(MinimalDepth, ParallelMatchesSerial) {
  auto [d, unused] = synth_mixture_splits({3, 20, 0, 4, 1.0, 1.0}, SeededRng(75));
  DepthSearchConfig c;
  c.width = 8;
  c.l_max = 2;
  c.epsilon = 0.0;
  c.sgd = quick_sgd(8, 16);
  c.seeds = {0, 1, 2};
  auto a = minimal_ncc_depth(d, c, SeededRng(76));
  c.jobs = 3;
  auto b = minimal_ncc_depth(d, c, SeededRng(76));
  EXPECT_EQ(depth_search_csv(a), depth_search_csv(b));
}

TEST(ExpectedEffectiveDepth, MeanOfHandValues) {
  EXPECT_DOUBLE_EQ(mean_depth(std::vector<std::size_t>{3, 4, 4}), 11.0 / 3.0);
  EXPECT_DOUBLE_EQ(mean_depth(std::vector<std::size_t>{5}), 5.0);
}

TEST(ExpectedEffectiveDepth, SingleAndRepeatedSeeds) {
  auto [d, unused] = synth_mixture_splits({3, 20, 0, 6, 3.0, 0.5}, SeededRng(77));
  ArchSpec a{ArchFamily::Mlp, 3, 16};
  auto one = expected_effective_depth(d, a, quick_sgd(), {4}, 0.01, SeededRng(78));
  EXPECT_EQ(one.mean, static_cast<double>(one.depths[0]));
  auto rep = expected_effective_depth(d, a, quick_sgd(), {4, 4, 4}, 0.01, SeededRng(78));
  EXPECT_EQ(rep.depths, std::vector<std::size_t>(3, one.depths[0]));
  EXPECT_EQ(rep.mean, one.mean);
}

TEST(Uniformity, NoMistakes) {
  auto d = uniformity_from_mistakes({{}, {}, {}}, 10);
  EXPECT_EQ(d.spread, 0u);
  EXPECT_TRUE(d.frequencies.empty());
  EXPECT_EQ(d.chi_square, 0.0);
  EXPECT_EQ(d.delta_m_estimate, 0.0);
}

TEST(Uniformity, AllMistakesOnOneSampleMatchesClosedForm) {
  const std::size_t m = 50, seeds = 4, per = 3;
  std::vector<std::vector<std::size_t>> ms(seeds);
  for (auto& s : ms) s.assign(per, 7);  // same sample, counted per mistake
  auto d = uniformity_from_mistakes(ms, m);
  const double total = static_cast<double>(seeds * per);
  EXPECT_NEAR(d.chi_square, total * (m - 1), 1e-9);
  EXPECT_GT(d.chi_square, 10.0 * d.dof);
  EXPECT_LT(d.p_value, 1e-10);
  EXPECT_FALSE(d.uniform);
  EXPECT_EQ(d.delta_m_estimate, 1.0);
  ASSERT_EQ(d.frequencies.size(), 1u);
  EXPECT_EQ(d.frequencies[0].second, seeds * per);
}

TEST(Uniformity, FrequenciesSumToMistakes) {
  auto d = uniformity_from_mistakes({{1, 2}, {2, 5, 9}, {0}}, 10);
  std::size_t s = 0;
  for (auto [i, c] : d.frequencies) s += c;
  EXPECT_EQ(s, 6u);
  EXPECT_EQ(d.spread, 2u);
  EXPECT_EQ(d.error_counts, (std::vector<std::size_t>{2, 3, 1}));
}

TEST(Uniformity, RandomPlacementLooksLikeNull) {
  SeededRng rng(79);
  const std::size_t m = 200, seeds = 5, per = 20;
  double mean_chi = 0.0;
  const int reps = 200;
  for (int r = 0; r < reps; ++r) {
    std::vector<std::vector<std::size_t>> ms(seeds);
    for (auto& s : ms) {
      auto perm = permutation(rng, m);
      s.assign(perm.begin(), perm.begin() + per);
    }
    mean_chi += uniformity_from_mistakes(ms, m).chi_square / reps;
  }
  // Without-replacement draws per seed shrink the variance slightly below dof.
  EXPECT_NEAR(mean_chi / 199.0, 1.0, 0.1);
}

TEST(BoundEstimate, NoisySeparableTaskGivesZeroIndicators) {
  auto [d, unused] = synth_mixture_splits({3, 40, 0, 8, 4.0, 0.5}, SeededRng(80));
  auto d_std = fit_standardizer(d).apply(d);
  SeededRng split_rng(81);
  std::vector<std::pair<Dataset, Dataset>> pairs;
  for (int i = 0; i < 2; ++i) {
    auto sp = split_pair(d_std, 30, split_rng);
    pairs.emplace_back(sp.first, sp.second);
  }
  BoundConfig c;
  c.arch = {ArchFamily::Mlp, 2, 16};
  c.l_max = 2;
  c.p_m = 0.3;
  c.sgd = quick_sgd(20, 16);
  c.seeds = {0, 1};
  auto b = bound_estimate(pairs, c, SeededRng(82));
  EXPECT_EQ(b.k, 2u);
  EXPECT_EQ(b.delta_m_source, "diagnostic");
  EXPECT_EQ(b.indicator_avg, 0.0);
  EXPECT_NEAR(b.total_raw, b.indicator_avg + b.p_m + b.delta_m + b.hoeffding, 1e-15);
  auto j = to_json(b);
  for (const char* k : {"k", "p_m", "delta", "delta_m", "hoeffding", "indicators", "per_pair", "total_raw",
                        "total_clipped"})
    EXPECT_TRUE(j.contains(k)) << k;
  for (const auto& p : j["per_pair"]) {
    EXPECT_TRUE(p.contains("eff_depth"));
    EXPECT_TRUE(p.contains("min_depth_union"));
    EXPECT_TRUE(p.contains("valid"));
  }
  // Pair order does not change a pair's indicator.
  auto solo = evaluate_pair(pairs[1].first, pairs[1].second, c, SeededRng(82).child("pair").child(1));
  EXPECT_EQ(solo.indicator, b.per_pair[1].indicator);
  EXPECT_EQ(solo.eff_depths, b.per_pair[1].eff_depths);
}

TEST(BoundEstimate, InvalidPairIsExcluded) {
  auto [d, unused] = synth_mixture_splits({2, 20, 0, 4, 3.0, 0.5}, SeededRng(83));
  Dataset tiny = d.subset(std::vector<std::size_t>{0, 20});
  std::vector<std::pair<Dataset, Dataset>> pairs{{tiny, tiny}, {d.subset(std::vector<std::size_t>{0, 1, 2, 20, 21, 22}),
                                                                d.subset(std::vector<std::size_t>{3, 4, 23, 24})}};
  BoundConfig c;
  c.arch = {ArchFamily::Mlp, 1, 4};
  c.delta_m = 0.0;
  c.sgd = quick_sgd(3, 4);
  c.seeds = {0};
  auto b = bound_estimate(pairs, c, SeededRng(84));
  EXPECT_EQ(b.k, 1u);
  EXPECT_EQ(b.excluded, std::vector<std::size_t>{0});
  EXPECT_FALSE(b.per_pair[0].error.empty());
  EXPECT_EQ(b.hoeffding, hoeffding(1, 0.05));
}

TEST(BoundEstimate, ValidatesConfig) {
  BoundConfig c;
  c.p_m = 1.5;
  EXPECT_THROW(validate(c), std::invalid_argument);
  c.p_m = 0.1;
  c.seeds = {0};
  EXPECT_THROW(validate(c), std::invalid_argument);
  c.delta_m = 0.0;
  EXPECT_NO_THROW(validate(c));
}

}  // namespace
}  // namespace ncprobe
