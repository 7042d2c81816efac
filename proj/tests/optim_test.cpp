#include "ncprobe/optim.hpp"

#include <gtest/gtest.h>

#include "test_util.hpp"

namespace ncprobe {
namespace {

SgdConfig plain(double lr, double momentum, double wd) {
  SgdConfig c;
  c.base_lr = lr;
  c.momentum = momentum;
  c.weight_decay = wd;
  return c;
}

TEST(LrAt, DefaultSchedule) {
  SgdConfig c;
  EXPECT_DOUBLE_EQ(lr_at(c, 0), 0.1);
  EXPECT_DOUBLE_EQ(lr_at(c, 59), 0.1);
  EXPECT_NEAR(lr_at(c, 60), 0.01, 1e-17);
  EXPECT_NEAR(lr_at(c, 120), 1e-3, 1e-17);
  EXPECT_NEAR(lr_at(c, 160), 1e-4, 1e-17);
  EXPECT_NEAR(lr_at(c, 499), 1e-4, 1e-17);
}

TEST(LrAt, NoDecaysIsConstant) {
  SgdConfig c;
  c.decay_epochs.clear();
  for (std::size_t e : {0u, 10u, 1000u}) EXPECT_EQ(lr_at(c, e), c.base_lr);
}

TEST(SgdConfig, ValidationRejectsBadValues) {
  SgdConfig c;
  c.momentum = 1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.decay_epochs = {60, 60};
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.base_lr = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

struct StepFixture {
  SeededRng rng{31};
  Network net = build_linear_probe(3, 2, rng);
  std::vector<Tensor> grads() {
    std::vector<Tensor> g;
    for (auto& p : parameters(net)) {
      Tensor t(p.value->shape());
      for (std::size_t j = 0; j < t.size(); ++j) t[j] = 0.1 * static_cast<double>(j + 1);
      g.push_back(t);
    }
    return g;
  }
};

TEST(SgdStep, VanillaStepSubtractsGradient) {
  StepFixture f;
  auto before = f.net;
  auto g = f.grads();
  Velocity v;
  sgd_step(f.net, g, v, 1.0, plain(1.0, 0.0, 0.0));
  auto pb = parameters(before), pa = parameters(f.net);
  for (std::size_t p = 0; p < pa.size(); ++p)
    for (std::size_t j = 0; j < g[p].size(); ++j) EXPECT_EQ((*pa[p].value)[j], (*pb[p].value)[j] - g[p][j]);
}

TEST(SgdStep, PureDecayShrinksWeights) {
  StepFixture f;
  auto before = f.net;
  std::vector<Tensor> zero;
  for (auto& p : parameters(f.net)) zero.emplace_back(p.value->shape());
  Velocity v;
  const double lr = 0.5, lambda = 0.01;
  sgd_step(f.net, zero, v, lr, plain(lr, 0.0, lambda));
  auto pb = parameters(before), pa = parameters(f.net);
  for (std::size_t p = 0; p < pa.size(); ++p)
    for (std::size_t j = 0; j < pa[p].value->size(); ++j)
      EXPECT_NEAR((*pa[p].value)[j], (*pb[p].value)[j] * (1.0 - 2.0 * lambda * lr), 1e-15);
}

TEST(SgdStep, MomentumRecursionOnConstantGradient) {
  StepFixture f;
  auto g = f.grads();
  Velocity v;
  const double lr = 0.05;
  auto cfg = plain(lr, 0.9, 0.0);
  sgd_step(f.net, g, v, lr, cfg);
  auto mid = f.net;
  sgd_step(f.net, g, v, lr, cfg);
  auto pm = parameters(mid), pa = parameters(f.net);
  for (std::size_t p = 0; p < pa.size(); ++p)
    for (std::size_t j = 0; j < g[p].size(); ++j)
      EXPECT_NEAR((*pa[p].value)[j] - (*pm[p].value)[j], -lr * 1.9 * g[p][j], 1e-15);
}

TEST(SgdStep, NanGradientNamesLayer) {
  StepFixture f;
  auto g = f.grads();
  g[1][0] = std::nan("");
  Velocity v;
  try {
    sgd_step(f.net, g, v, 0.1, SgdConfig{});
    FAIL();
  } catch (const DivergenceError& e) {
    EXPECT_NE(std::string(e.what()).find("layer 0"), std::string::npos);
  }
}

// Full-batch least squares through a single linear map, gradient taken in the
// test; loss must not increase for lr below 2 / lambda_max of the Hessian.
TEST(SgdStep, QuadraticSurrogateDescends) {
  SeededRng rng(41);
  auto net = build_linear_probe(3, 1, rng);
  Tensor x = gaussian(rng, {20, 3});
  Tensor y = gaussian(rng, {20, 1});
  auto loss_and_grad = [&](std::vector<Tensor>& g) {
    auto& w = net.layers[0].weight;
    auto& b = net.layers[0].bias;
    g = {Tensor(w.shape()), Tensor(b.shape())};
    double loss = 0.0;
    for (std::size_t i = 0; i < 20; ++i) {
      double r = b[0] - y[i];
      for (std::size_t j = 0; j < 3; ++j) r += x.at(i, j) * w[j];
      loss += r * r / 20.0;
      for (std::size_t j = 0; j < 3; ++j) g[0][j] += 2.0 * r * x.at(i, j) / 20.0;
      g[1][0] += 2.0 * r / 20.0;
    }
    return loss;
  };
  // Hessian is (2/n) [X 1]^T [X 1]; bound its top eigenvalue by the trace.
  double trace = 0.0;
  for (std::size_t i = 0; i < 20; ++i) {
    trace += 2.0 / 20.0;
    for (std::size_t j = 0; j < 3; ++j) trace += 2.0 * x.at(i, j) * x.at(i, j) / 20.0;
  }
  const double lr = 1.9 / trace;
  Velocity v;
  std::vector<Tensor> g;
  double prev = loss_and_grad(g);
  for (int s = 0; s < 200; ++s) {
    sgd_step(net, g, v, lr, plain(lr, 0.0, 0.0));
    double cur = loss_and_grad(g);
    ASSERT_LE(cur, prev + 1e-15) << "step " << s;
    prev = cur;
  }
}

TEST(EpochBatches, KeepsPartialAndFoldsSingletons) {
  SeededRng rng(1);
  auto b = epoch_batches(rng, 10, 4, true);
  ASSERT_EQ(b.size(), 3u);
  EXPECT_EQ(b[2].size(), 2u);
  auto c = epoch_batches(rng, 9, 4, true);
  ASSERT_EQ(c.size(), 2u);
  EXPECT_EQ(c[1].size(), 5u);
  auto d = epoch_batches(rng, 9, 4, false);
  EXPECT_EQ(d.size(), 3u);
}

TEST(Train, ZeroEpochsReturnsInitialNetwork) {
  SeededRng rng(2);
  auto data = synth_mixture(2, 10, 2, 5.0, 1.0, SeededRng(1));
  auto net = build_mlp(1, 8, 2, 2, rng);
  SgdConfig cfg;
  cfg.epochs = 0;
  cfg.batch_size = 8;
  auto res = train(net, data, cfg);
  EXPECT_EQ(res.net, net);
  EXPECT_TRUE(res.record.epochs.empty());
}

TEST(Train, SeparableBlobsInterpolate) {
  SeededRng rng(3);
  auto data = synth_mixture(2, 50, 2, 6.0, 1.0, SeededRng(4));
  auto net = build_mlp(1, 8, 2, 2, rng);
  SgdConfig cfg;
  cfg.epochs = 50;
  cfg.batch_size = 16;
  cfg.decay_epochs = {30, 40};
  auto res = train(net, data, cfg);
  EXPECT_EQ(res.record.epochs.back().train_err, 0.0);
  EXPECT_EQ(evaluate(res.net, data.inputs, data.labels).err, 0.0);
}

TEST(Train, DeterministicAndScheduleRecorded) {
  auto data = synth_mixture(3, 20, 4, 3.0, 1.0, SeededRng(5));
  SgdConfig cfg;
  cfg.epochs = 12;
  cfg.batch_size = 16;
  cfg.decay_epochs = {4, 8};
  cfg.seed = 99;
  SeededRng r1(6), r2(6);
  auto a = train(build_mlp(2, 8, 4, 3, r1), data, cfg);
  auto b = train(build_mlp(2, 8, 4, 3, r2), data, cfg);
  EXPECT_EQ(a.net, b.net);
  EXPECT_EQ(train_record_csv(a.record), train_record_csv(b.record));
  for (const auto& e : a.record.epochs) {
    EXPECT_EQ(e.lr, lr_at(cfg, e.epoch));
    EXPECT_GE(e.train_err, 0.0);
    EXPECT_LE(e.train_err, 1.0);
  }
}

TEST(Train, InterpolatesWhenFewerSamplesThanWidth) {
  // m <= H and linearly separable classes: MLP-2-H fits within 200 epochs.
  auto data = synth_mixture(4, 8, 6, 4.0, 0.5, SeededRng(12));
  SeededRng rng(13);
  SgdConfig cfg;
  cfg.batch_size = 8;
  auto res = train(build_mlp(2, 32, 6, 4, rng), data, cfg);
  EXPECT_LE(res.record.epochs.back().train_err, 0.01);
}

TEST(Train, DivergenceReportsLastGoodNetwork) {
  auto data = synth_mixture(2, 10, 2, 3.0, 1.0, SeededRng(5));
  SeededRng rng(7);
  auto net = build_linear_probe(2, 2, rng);
  SgdConfig cfg;
  cfg.epochs = 200;
  cfg.batch_size = 20;
  cfg.base_lr = 1e300;
  cfg.momentum = 0.0;
  try {
    train(net, data, cfg);
    FAIL();
  } catch (const DivergenceError& e) {
    ASSERT_TRUE(e.last_good.has_value());
  }
}

TEST(Train, CsvHeader) {
  TrainRecord r;
  r.epochs.push_back({0, 0.1, 1.5, 0.25});
  EXPECT_EQ(train_record_csv(r), "epoch,lr,train_loss,train_err\n0,0.10000000000000001,1.5,0.25\n");
}

}  // namespace
}  // namespace ncprobe
