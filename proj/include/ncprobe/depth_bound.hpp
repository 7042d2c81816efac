#pragma once

#include <boost/math/special_functions/gamma.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ncprobe/data.hpp"
#include "ncprobe/metrics.hpp"
#include "ncprobe/nn.hpp"
#include "ncprobe/optim.hpp"
#include "ncprobe/parallel.hpp"

namespace ncprobe {

// ---------------------------------------------------------------------------
// Architecture selection and seeded training runs.

struct ArchSpec {
  ArchFamily family = ArchFamily::Mlp;
  std::size_t depth = 4;
  std::size_t width = 64;
};

inline Network build_network(ArchFamily family, std::size_t depth, std::size_t width, const Dataset& data,
                             SeededRng& rng) {
  switch (family) {
    case ArchFamily::Mlp:
      return build_mlp(depth, width, data.input_dim(), data.classes, rng);
    case ArchFamily::Conv:
      return build_conv(depth, width, data.sample_shape(), data.classes, rng);
    case ArchFamily::Probe:
      break;
  }
  throw ConstructionError("architecture family '" + std::string(family_name(family)) + "' has no depth");
}

// One training run owns generator `gen`: initialization draws from
// gen.child("init"), batch order from a seed drawn off gen.child("sgd").
inline TrainResult train_seeded_record(ArchFamily family, std::size_t depth, std::size_t width, const Dataset& data,
                                       SgdConfig sgd, const SeededRng& gen, const EpochCallback& on_epoch = {}) {
  auto init = gen.child("init");
  sgd.seed = gen.child("sgd")();
  return train(build_network(family, depth, width, data, init), data, sgd, on_epoch);
}

inline Network train_seeded(ArchFamily family, std::size_t depth, std::size_t width, const Dataset& data,
                            const SgdConfig& sgd, const SeededRng& gen) {
  return train_seeded_record(family, depth, width, data, sgd, gen).net;
}

inline SeededRng run_generator(const SeededRng& root, std::size_t depth, std::uint64_t seed) {
  return root.child("depth").child(depth).child("seed").child(seed);
}

// ---------------------------------------------------------------------------
// Minimal NCC depth (SGD-reachable proxy).

inline constexpr const char* kMinimalDepthProxyNote =
    "SGD-reachable proxy: smallest trained depth whose top-block NCC train error is <= epsilon for some seed; "
    "an upper bound on the minimum over all parameters";

struct DepthSearchConfig {
  ArchFamily family = ArchFamily::Mlp;
  std::size_t width = 64;
  std::size_t l_max = 6;
  double epsilon = 0.01;
  SgdConfig sgd;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::size_t jobs = 1;
  // Stop after the first depth that qualifies; deeper rows are then not trained.
  bool stop_at_first = true;
};

struct DepthRun {
  std::size_t depth = 0;
  std::uint64_t seed = 0;
  double ncc_train_err = 1.0;
  bool interpolated = false;  // ncc_train_err <= epsilon
};

struct DepthSearchResult {
  double epsilon = 0.01;
  std::size_t l_max = 0;
  std::vector<std::uint64_t> seeds;
  std::vector<DepthRun> table;          // depth-major, seed order within a depth
  std::optional<std::size_t> minimal;   // nullopt means none up to l_max
  std::string note = kMinimalDepthProxyNote;
};

// Smallest depth in the table with some run at or below epsilon.
inline std::optional<std::size_t> minimal_depth_from_table(const std::vector<DepthRun>& table, double epsilon) {
  std::optional<std::size_t> best;
  for (const auto& r : table)
    if (r.ncc_train_err <= epsilon && (!best || r.depth < *best)) best = r.depth;
  return best;
}

inline DepthSearchResult minimal_ncc_depth(const Dataset& data, const DepthSearchConfig& cfg, const SeededRng& root) {
  if (cfg.l_max < 1) throw std::invalid_argument("minimal_ncc_depth: l_max must be >= 1");
  if (cfg.seeds.empty()) throw std::invalid_argument("minimal_ncc_depth: at least one seed required");
  DepthSearchResult res;
  res.epsilon = cfg.epsilon;
  res.l_max = cfg.l_max;
  res.seeds = cfg.seeds;
  for (std::size_t depth = 1; depth <= cfg.l_max; ++depth) {
    std::vector<DepthRun> rows(cfg.seeds.size());
    parallel_for(cfg.seeds.size(), cfg.jobs, [&](std::size_t s) {
      auto net = train_seeded(cfg.family, depth, cfg.width, data, cfg.sgd, run_generator(root, depth, cfg.seeds[s]));
      const double err = layer_ncc_train_errors(net, data).back();
      rows[s] = {depth, cfg.seeds[s], err, err <= cfg.epsilon};
    });
    res.table.insert(res.table.end(), rows.begin(), rows.end());
    res.minimal = minimal_depth_from_table(res.table, cfg.epsilon);
    if (res.minimal && cfg.stop_at_first) break;
  }
  return res;
}

inline std::string depth_search_csv(const DepthSearchResult& r) {
  std::ostringstream os;
  os << "depth,seed,ncc_train_err,interpolated\n";
  for (const auto& row : r.table)
    os << row.depth << ',' << row.seed << ',' << format_double(row.ncc_train_err) << ',' << (row.interpolated ? 1 : 0)
       << '\n';
  return os.str();
}

inline nlohmann::json to_json(const DepthSearchResult& r) {
  nlohmann::json j;
  j["epsilon"] = r.epsilon;
  j["l_max"] = r.l_max;
  j["seeds"] = r.seeds;
  j["minimal_depth"] = r.minimal ? nlohmann::json(*r.minimal) : nlohmann::json("none");
  j["note"] = r.note;
  j["table"] = nlohmann::json::array();
  for (const auto& row : r.table)
    j["table"].push_back(
        {{"depth", row.depth}, {"seed", row.seed}, {"ncc_train_err", row.ncc_train_err}, {"interpolated", row.interpolated}});
  return j;
}

// ---------------------------------------------------------------------------
// Expected effective depth over initializations.

struct EffectiveDepthResult {
  std::vector<std::uint64_t> seeds;
  std::vector<std::size_t> depths;
  double mean = 0.0;
};

inline double mean_depth(std::span<const std::size_t> depths) {
  if (depths.empty()) throw std::invalid_argument("mean of an empty depth list");
  double s = 0.0;
  for (auto d : depths) s += static_cast<double>(d);
  return s / static_cast<double>(depths.size());
}

// Trains arch on s1 once per seed and averages the epsilon-effective depths.
// When `heldout` is non-empty, each seed's model predictions on it are returned
// through `heldout_predictions` (seed order).
inline EffectiveDepthResult expected_effective_depth(const Dataset& s1, const ArchSpec& arch, const SgdConfig& sgd,
                                                     const std::vector<std::uint64_t>& seeds, double epsilon,
                                                     const SeededRng& root, std::size_t jobs = 1,
                                                     const Dataset* heldout = nullptr,
                                                     std::vector<std::vector<int>>* heldout_predictions = nullptr) {
  if (seeds.empty()) throw std::invalid_argument("expected_effective_depth: at least one seed required");
  EffectiveDepthResult res;
  res.seeds = seeds;
  res.depths.assign(seeds.size(), 0);
  if (heldout_predictions) heldout_predictions->assign(seeds.size(), {});
  ReportOptions opt;
  opt.epsilon = epsilon;
  parallel_for(seeds.size(), jobs, [&](std::size_t s) {
    auto net = train_seeded(arch.family, arch.depth, arch.width, s1, sgd, run_generator(root, arch.depth, seeds[s]));
    res.depths[s] = collapse_report(net, s1, Dataset{}, opt).effective_depth;
    if (heldout && heldout_predictions)
      (*heldout_predictions)[s] = argmax_rows(forward_eval(net, heldout->inputs, false).logits);
  });
  res.mean = mean_depth(res.depths);
  return res;
}

// ---------------------------------------------------------------------------
// Uniformity of held-out mistakes across initializations.

struct UniformityThresholds {
  std::size_t max_spread = 1;
  double min_p_value = 0.01;
};

struct UniformityDiagnostic {
  std::vector<std::size_t> error_counts;  // per seed, on the held-out split
  std::size_t spread = 0;
  std::size_t samples = 0;
  // (sample index, number of seeds that misclassified it); only samples with a
  // mistake appear, ascending by index.
  std::vector<std::pair<std::size_t, std::size_t>> frequencies;
  double chi_square = 0.0;
  std::size_t dof = 0;
  double p_value = 1.0;
  bool uniform = true;  // spread and p-value both inside the thresholds
  double delta_m_estimate = 0.0;
};

// Pearson statistic of the per-sample mistake counts against equal placement
// over all `samples` cells; upper-tail p-value from the chi-square(samples-1) law.
inline UniformityDiagnostic uniformity_from_mistakes(const std::vector<std::vector<std::size_t>>& mistakes_per_seed,
                                                     std::size_t samples, const UniformityThresholds& th = {}) {
  if (mistakes_per_seed.size() < 2) throw std::invalid_argument("uniformity diagnostic needs >= 2 seeds");
  if (samples < 1) throw std::invalid_argument("uniformity diagnostic needs a non-empty held-out split");
  UniformityDiagnostic d;
  d.samples = samples;
  std::vector<std::size_t> freq(samples, 0);
  std::size_t total = 0;
  for (const auto& ms : mistakes_per_seed) {
    d.error_counts.push_back(ms.size());
    total += ms.size();
    for (auto i : ms) {
      if (i >= samples) throw std::out_of_range("mistake index " + std::to_string(i) + " outside held-out split");
      ++freq[i];
    }
  }
  const auto [lo, hi] = std::minmax_element(d.error_counts.begin(), d.error_counts.end());
  d.spread = *hi - *lo;
  for (std::size_t i = 0; i < samples; ++i)
    if (freq[i] > 0) d.frequencies.emplace_back(i, freq[i]);
  d.dof = samples - 1;
  if (total > 0 && samples > 1) {
    const double expected = static_cast<double>(total) / static_cast<double>(samples);
    double chi = 0.0;
    for (auto f : freq) {
      const double r = static_cast<double>(f) - expected;
      chi += r * r / expected;
    }
    d.chi_square = chi;
    d.p_value = boost::math::gamma_q(static_cast<double>(d.dof) / 2.0, chi / 2.0);
  }
  d.uniform = d.spread <= th.max_spread && d.p_value >= th.min_p_value;
  d.delta_m_estimate = d.uniform ? 0.0 : 1.0;
  return d;
}

inline std::vector<std::vector<std::size_t>> mistakes_from_predictions(const std::vector<std::vector<int>>& preds,
                                                                       std::span<const int> labels) {
  std::vector<std::vector<std::size_t>> out;
  for (const auto& p : preds) {
    std::vector<std::size_t> ms;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (p[i] != labels[i]) ms.push_back(i);
    out.push_back(std::move(ms));
  }
  return out;
}

inline UniformityDiagnostic uniformity_diagnostic(const Dataset& s1, const Dataset& s2, const ArchSpec& arch,
                                                  const SgdConfig& sgd, const std::vector<std::uint64_t>& seeds,
                                                  const SeededRng& root, const UniformityThresholds& th = {},
                                                  std::size_t jobs = 1) {
  if (seeds.size() < 2) throw std::invalid_argument("uniformity diagnostic needs >= 2 seeds");
  std::vector<std::vector<int>> preds;
  expected_effective_depth(s1, arch, sgd, seeds, 0.01, root, jobs, &s2, &preds);
  return uniformity_from_mistakes(mistakes_from_predictions(preds, s2.labels), s2.size(), th);
}

inline nlohmann::json to_json(const UniformityDiagnostic& d) {
  nlohmann::json f = nlohmann::json::array();
  for (const auto& [i, c] : d.frequencies) f.push_back({i, c});
  return {{"error_counts", d.error_counts}, {"spread", d.spread},     {"samples", d.samples},
          {"frequencies", f},               {"chi_square", d.chi_square}, {"dof", d.dof},
          {"p_value", d.p_value},           {"uniform", d.uniform},   {"delta_m_estimate", d.delta_m_estimate}};
}

// ---------------------------------------------------------------------------
// Comparative generalization bound.

// sqrt(log(2/delta) / (2k))
inline double hoeffding(std::size_t k, double delta) {
  if (k < 1) throw std::invalid_argument("hoeffding: k must be >= 1");
  if (!(delta > 0.0 && delta <= 1.0)) throw std::invalid_argument("hoeffding: delta must lie in (0, 1]");
  return std::sqrt(std::log(2.0 / delta) / (2.0 * static_cast<double>(k)));
}

struct PairOutcome {
  bool valid = false;
  std::string error;
  double eff_depth = 0.0;                  // mean over seeds on S1
  std::vector<std::size_t> eff_depths;     // per seed
  std::optional<double> min_depth_union;   // mean over noise draws; nullopt if any draw found none
  std::vector<std::optional<std::size_t>> min_depth_draws;
  std::optional<UniformityDiagnostic> diagnostic;
  int indicator = 0;
};

struct BoundEstimate {
  std::size_t k = 0;  // valid pairs
  std::size_t pairs_requested = 0;
  std::vector<std::size_t> excluded;  // indices of invalid pairs
  double p_m = 0.0;
  double delta = 0.05;
  double delta_m = 0.0;
  std::string delta_m_source = "supplied";
  double hoeffding = 0.0;
  std::vector<int> indicators;  // valid pairs, pair order
  double indicator_avg = 0.0;
  std::size_t noise_draws = 1;
  std::vector<PairOutcome> per_pair;
  double total_raw = 0.0;
  double total_clipped = 0.0;
  std::string note = kMinimalDepthProxyNote;
};

// Fills the four bound terms from indicator values.
inline void finalize_bound(BoundEstimate& b) {
  if (b.indicators.empty()) throw std::invalid_argument("bound estimate needs at least one valid pair");
  b.k = b.indicators.size();
  double s = 0.0;
  for (int v : b.indicators) s += v;
  b.indicator_avg = s / static_cast<double>(b.k);
  b.hoeffding = hoeffding(b.k, b.delta);
  b.total_raw = b.indicator_avg + b.p_m + b.delta_m + b.hoeffding;
  b.total_clipped = std::clamp(b.total_raw, 0.0, 1.0);
}

inline BoundEstimate bound_from_indicators(std::vector<int> indicators, double p_m, double delta, double delta_m) {
  BoundEstimate b;
  b.pairs_requested = indicators.size();
  b.indicators = std::move(indicators);
  b.p_m = p_m;
  b.delta = delta;
  b.delta_m = delta_m;
  finalize_bound(b);
  return b;
}

struct BoundConfig {
  ArchSpec arch;                   // network whose effective depth is measured on S1
  std::size_t l_max = 0;           // minimal-depth search budget; 0 means arch.depth
  double p_m = 0.1;
  double delta = 0.05;
  std::optional<double> delta_m;   // unset: fraction of pairs failing the uniformity rule
  double epsilon = 0.01;
  SgdConfig sgd;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::size_t noise_draws = 1;
  UniformityThresholds thresholds;
  std::size_t jobs = 1;
};

inline void validate(const BoundConfig& c) {
  auto unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (!unit(c.p_m)) throw std::invalid_argument("bound.p_m must lie in [0, 1]");
  if (!(c.delta > 0.0 && c.delta <= 1.0)) throw std::invalid_argument("bound.delta must lie in (0, 1]");
  if (c.delta_m && !unit(*c.delta_m)) throw std::invalid_argument("bound.delta_m must lie in [0, 1]");
  if (c.seeds.empty()) throw std::invalid_argument("bound.seeds must be non-empty");
  if (!c.delta_m && c.seeds.size() < 2) throw std::invalid_argument("estimating delta_m needs >= 2 seeds");
  if (c.noise_draws < 1) throw std::invalid_argument("bound.noise_draws must be >= 1");
}

// Pair i draws everything from root.child("pair").child(i), so the outcome of a
// pair does not depend on which other pairs are processed or in what order.
inline PairOutcome evaluate_pair(const Dataset& s1, const Dataset& s2, const BoundConfig& cfg, const SeededRng& pair_root) {
  PairOutcome out;
  std::vector<std::vector<int>> preds;
  const bool diagnose = !cfg.delta_m.has_value();
  auto eff = expected_effective_depth(s1, cfg.arch, cfg.sgd, cfg.seeds, cfg.epsilon, pair_root.child("s1"), cfg.jobs,
                                      diagnose ? &s2 : nullptr, diagnose ? &preds : nullptr);
  out.eff_depths = eff.depths;
  out.eff_depth = eff.mean;
  if (diagnose)
    out.diagnostic = uniformity_from_mistakes(mistakes_from_predictions(preds, s2.labels), s2.size(), cfg.thresholds);
  DepthSearchConfig dc;
  dc.family = cfg.arch.family;
  dc.width = cfg.arch.width;
  dc.l_max = cfg.l_max ? cfg.l_max : cfg.arch.depth;
  dc.epsilon = cfg.epsilon;
  dc.sgd = cfg.sgd;
  dc.seeds = cfg.seeds;
  dc.jobs = cfg.jobs;
  double sum = 0.0;
  bool none = false;
  for (std::size_t j = 0; j < cfg.noise_draws; ++j) {
    auto noisy = inject_noise(s2, {cfg.p_m, pair_root.child("noise").child(j)()}).data;
    auto search = minimal_ncc_depth(concat(s1, noisy), dc, pair_root.child("union").child(j));
    out.min_depth_draws.push_back(search.minimal);
    if (search.minimal)
      sum += static_cast<double>(*search.minimal);
    else
      none = true;
  }
  // No qualifying depth means the minimal depth exceeds the budget; treat it as
  // +inf so the indicator is 0.
  if (!none) out.min_depth_union = sum / static_cast<double>(cfg.noise_draws);
  out.indicator = out.min_depth_union && out.eff_depth >= *out.min_depth_union ? 1 : 0;
  out.valid = true;
  return out;
}

inline BoundEstimate bound_estimate(const std::vector<std::pair<Dataset, Dataset>>& pairs, const BoundConfig& cfg,
                                    const SeededRng& root) {
  validate(cfg);
  if (pairs.empty()) throw std::invalid_argument("bound_estimate needs k >= 1 pairs");
  BoundEstimate b;
  b.pairs_requested = pairs.size();
  b.p_m = cfg.p_m;
  b.delta = cfg.delta;
  b.noise_draws = cfg.noise_draws;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    PairOutcome o;
    try {
      o = evaluate_pair(pairs[i].first, pairs[i].second, cfg, root.child("pair").child(i));
    } catch (const std::exception& e) {
      o = PairOutcome{};
      o.error = e.what();
    }
    if (o.valid)
      b.indicators.push_back(o.indicator);
    else
      b.excluded.push_back(i);
    b.per_pair.push_back(std::move(o));
  }
  if (cfg.delta_m) {
    b.delta_m = *cfg.delta_m;
  } else {
    b.delta_m_source = "diagnostic";
    double failing = 0.0, valid = 0.0;
    for (const auto& o : b.per_pair)
      if (o.valid) {
        valid += 1.0;
        failing += o.diagnostic->delta_m_estimate;
      }
    b.delta_m = valid > 0.0 ? failing / valid : 1.0;
  }
  if (b.indicators.empty())
    throw std::runtime_error("bound_estimate: every pair failed; first error: " + b.per_pair.front().error);
  finalize_bound(b);
  return b;
}

inline nlohmann::json to_json(const BoundEstimate& b) {
  nlohmann::json j;
  j["k"] = b.k;
  j["pairs_requested"] = b.pairs_requested;
  j["excluded_pairs"] = b.excluded;
  j["p_m"] = b.p_m;
  j["delta"] = b.delta;
  j["delta_m"] = b.delta_m;
  j["delta_m_source"] = b.delta_m_source;
  j["hoeffding"] = b.hoeffding;
  j["indicators"] = b.indicators;
  j["indicator_avg"] = b.indicator_avg;
  j["noise_draws"] = b.noise_draws;
  j["per_pair"] = nlohmann::json::array();
  for (const auto& o : b.per_pair) {
    nlohmann::json p;
    p["valid"] = o.valid;
    p["eff_depth"] = o.valid ? nlohmann::json(o.eff_depth) : nlohmann::json(nullptr);
    p["eff_depths"] = o.eff_depths;
    p["min_depth_union"] = o.min_depth_union ? nlohmann::json(*o.min_depth_union) : nlohmann::json("none");
    nlohmann::json draws = nlohmann::json::array();
    for (const auto& d : o.min_depth_draws) draws.push_back(d ? nlohmann::json(*d) : nlohmann::json("none"));
    p["min_depth_draws"] = draws;
    p["indicator"] = o.indicator;
    if (o.diagnostic) p["uniformity"] = to_json(*o.diagnostic);
    if (!o.valid) p["error"] = o.error;
    j["per_pair"].push_back(std::move(p));
  }
  j["total_raw"] = b.total_raw;
  j["total_clipped"] = b.total_clipped;
  j["note"] = b.note;
  return j;
}

inline std::string bound_summary_text(const BoundEstimate& b) {
  std::ostringstream os;
  os << "pairs used (k):        " << b.k << " of " << b.pairs_requested << '\n';
  os << "indicator average:     " << format_double(b.indicator_avg) << '\n';
  os << "p_m:                   " << format_double(b.p_m) << '\n';
  os << "delta_m (" << b.delta_m_source << "): " << format_double(b.delta_m) << '\n';
  os << "hoeffding (delta=" << format_double(b.delta) << "): " << format_double(b.hoeffding) << '\n';
  os << "total (raw):           " << format_double(b.total_raw) << '\n';
  os << "total (clipped):       " << format_double(b.total_clipped) << '\n';
  for (std::size_t i = 0; i < b.per_pair.size(); ++i) {
    const auto& o = b.per_pair[i];
    os << "pair " << i << ": ";
    if (!o.valid) {
      os << "excluded (" << o.error << ")\n";
      continue;
    }
    os << "effective depth " << format_double(o.eff_depth) << ", minimal depth on noisy union "
       << (o.min_depth_union ? format_double(*o.min_depth_union) : std::string("none")) << ", V=" << o.indicator
       << '\n';
  }
  os << b.note << '\n';
  return os.str();
}

}  // namespace ncprobe
