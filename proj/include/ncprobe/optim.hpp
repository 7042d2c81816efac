#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ncprobe/data.hpp"
#include "ncprobe/nn.hpp"

namespace ncprobe {

struct SgdConfig {
  double base_lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t batch_size = 128;
  std::size_t epochs = 200;
  std::vector<std::size_t> decay_epochs{60, 120, 160};
  double decay_factor = 0.1;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(base_lr > 0.0)) throw std::invalid_argument("sgd.base_lr must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("sgd.momentum must lie in [0, 1)");
    if (!(weight_decay >= 0.0)) throw std::invalid_argument("sgd.weight_decay must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("sgd.batch_size must be >= 1");
    for (std::size_t i = 1; i < decay_epochs.size(); ++i)
      if (decay_epochs[i] <= decay_epochs[i - 1])
        throw std::invalid_argument("sgd.decay_epochs must be strictly increasing");
  }
};

// base_lr * decay_factor^#{d in decay_epochs : d <= epoch}
inline double lr_at(const SgdConfig& cfg, std::size_t epoch) {
  double lr = cfg.base_lr;
  for (auto d : cfg.decay_epochs)
    if (d <= epoch) lr *= cfg.decay_factor;
  return lr;
}

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, std::size_t epoch, std::optional<Network> last_good = std::nullopt)
      : std::runtime_error(what), epoch(epoch), last_good(std::move(last_good)) {}
  std::size_t epoch;
  std::optional<Network> last_good;
};

using Velocity = std::vector<Tensor>;

// Heavy-ball SGD on the L2-regularized risk: g' = g + 2*lambda*W (every
// parameter, BatchNorm scale and shift included); v <- mu*v + g'; W <- W - lr*v.
inline void sgd_step(Network& net, const std::vector<Tensor>& grads, Velocity& velocity, double lr,
                     const SgdConfig& cfg) {
  auto params = parameters(net);
  if (grads.size() != params.size()) throw std::invalid_argument("gradient list does not match parameters");
  if (velocity.empty())
    for (auto& p : params) velocity.emplace_back(p.value->shape());
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor& w = *params[p].value;
    const Tensor& g = grads[p];
    Tensor& v = velocity[p];
    if (g.size() != w.size()) throw ShapeError("gradient shape mismatch", g.shape(), w.shape());
    for (std::size_t j = 0; j < g.size(); ++j)
      if (!std::isfinite(g[j])) {
        const auto& l = net.layers[params[p].layer];
        throw DivergenceError("non-finite gradient in layer " + std::to_string(params[p].layer) + " (" +
                                  kind_name(l.kind) + (params[p].is_bias ? " bias/shift" : " weight/scale") + ")",
                              0);
      }
    for (std::size_t j = 0; j < g.size(); ++j) {
      const double eff = g[j] + 2.0 * cfg.weight_decay * w[j];
      v[j] = cfg.momentum * v[j] + eff;
      w[j] -= lr * v[j];
    }
  }
}

struct EpochStats {
  std::size_t epoch;  // 0-based index of the epoch just trained
  double lr;
  double train_loss;
  double train_err;
};

struct TrainRecord {
  std::vector<EpochStats> epochs;
  std::vector<std::pair<std::size_t, std::string>> checkpoints;  // completed epochs -> path
};

struct TrainResult {
  TrainRecord record;
  Network net;
};

// Called after initialization (completed = 0) and after every epoch.
using EpochCallback = std::function<void(std::size_t completed, const Network&, TrainRecord&)>;

// Mini-batch index lists for one epoch: a full permutation, the last partial
// batch kept. A size-1 remainder is folded into the previous batch when the
// network needs batch statistics.
inline std::vector<std::vector<std::size_t>> epoch_batches(SeededRng& rng, std::size_t m, std::size_t batch,
                                                           bool needs_pairs) {
  auto perm = permutation(rng, m);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t s = 0; s < m; s += batch)
    out.emplace_back(perm.begin() + static_cast<long>(s), perm.begin() + static_cast<long>(std::min(m, s + batch)));
  if (needs_pairs && out.size() > 1 && out.back().size() == 1) {
    out[out.size() - 2].push_back(out.back()[0]);
    out.pop_back();
  }
  return out;
}

struct EvalStats {
  double loss;
  double err;
};

inline EvalStats evaluate(const Network& net, const Tensor& inputs, std::span<const int> labels) {
  auto t = forward_eval(net, inputs, false);
  return {cross_entropy(t.logits, labels), error_rate(t.logits, labels)};
}

// epochs x ceil(m/B) SGD steps. Per-epoch shuffles come from child generators of
// cfg.seed. Train loss/error are measured in eval mode on the whole training
// set after each epoch.
inline TrainResult train(Network net, const Dataset& data, const SgdConfig& cfg, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (data.size() == 0) throw std::invalid_argument("train: empty dataset");
  if (cfg.batch_size > data.size())
    throw std::invalid_argument("train: batch_size " + std::to_string(cfg.batch_size) + " exceeds dataset size " +
                                std::to_string(data.size()));
  TrainResult res;
  if (on_epoch) on_epoch(0, net, res.record);
  const SeededRng shuffle_root = SeededRng(cfg.seed).child("shuffle");
  const bool needs_pairs = net.has_batchnorm();
  Velocity velocity;
  Network last_good = net;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const double lr = lr_at(cfg, e);
    auto rng = shuffle_root.child(e);
    try {
      for (const auto& idx : epoch_batches(rng, data.size(), cfg.batch_size, needs_pairs)) {
        Tensor x = data.inputs.gather_rows(idx);
        std::vector<int> y;
        y.reserve(idx.size());
        for (auto i : idx) y.push_back(data.labels[i]);
        auto g = backward(net, x, y, true);
        sgd_step(net, g.tensors, velocity, lr, cfg);
      }
    } catch (const DivergenceError& d) {
      throw DivergenceError(std::string(d.what()) + " during epoch " + std::to_string(e), e, last_good);
    }
    auto st = evaluate(net, data.inputs, data.labels);
    if (!std::isfinite(st.loss))
      throw DivergenceError("training loss became non-finite during epoch " + std::to_string(e), e, last_good);
    res.record.epochs.push_back({e, lr, st.loss, st.err});
    last_good = net;
    if (on_epoch) on_epoch(e + 1, net, res.record);
  }
  res.net = std::move(net);
  return res;
}

inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string train_record_csv(const TrainRecord& r) {
  std::ostringstream os;
  os << "epoch,lr,train_loss,train_err\n";
  for (const auto& e : r.epochs)
    os << e.epoch << ',' << format_double(e.lr) << ',' << format_double(e.train_loss) << ','
       << format_double(e.train_err) << '\n';
  return os.str();
}

}  // namespace ncprobe
