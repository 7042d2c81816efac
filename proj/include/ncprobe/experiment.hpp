#pragma once

#include <openssl/evp.h>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ncprobe/checkpoint.hpp"
#include "ncprobe/data.hpp"
#include "ncprobe/depth_bound.hpp"
#include "ncprobe/metrics.hpp"
#include "ncprobe/optim.hpp"
#include "ncprobe/parallel.hpp"
#include "ncprobe/svg.hpp"

namespace ncprobe {

inline constexpr const char* kToolVersion = "0.1.0";

// Exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitRunFailed = 1;
inline constexpr int kExitUsage = 2;

// ---------------------------------------------------------------------------
// Digests.

inline std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("sha256 digest failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

inline std::string sha256_hex(std::string_view s) {
  return sha256_hex(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

// ---------------------------------------------------------------------------
// Configuration: JSON defaults, merged with a user file and --set overrides.

class ConfigError : public std::invalid_argument {
 public:
  ConfigError(const std::string& path, const std::string& what)
      : std::invalid_argument(path + ": " + what), path(path) {}
  std::string path;
};

inline nlohmann::json default_config() {
  return nlohmann::json::parse(R"({
  "kind": "train",
  "seed": 0,
  "epsilon": 0.01,
  "seeds": [0, 1, 2],
  "dataset": {
    "source": "mixture",
    "classes": 5,
    "m0": 200,
    "m0_test": 100,
    "dim": 20,
    "radius": 3.0,
    "sigma": 1.0,
    "standardize": true,
    "train_images": "",
    "train_labels": "",
    "test_images": "",
    "test_labels": "",
    "idx_classes": 0
  },
  "arch": {"family": "mlp", "depth": 4, "width": 64},
  "sgd": {
    "base_lr": 0.1,
    "momentum": 0.9,
    "weight_decay": 0.0005,
    "batch_size": 128,
    "epochs": 200,
    "decay_epochs": [60, 120, 160],
    "decay_factor": 0.1
  },
  "report_epochs": [],
  "checkpoint_epochs": [],
  "depth_sweep": {"depths": [2, 4, 8]},
  "noise_sweep": {"fractions": [0.0, 0.1, 0.25, 0.5]},
  "bound": {
    "k": 2,
    "m_each": 250,
    "p_m": 0.1,
    "delta": 0.05,
    "delta_m": null,
    "l_max": 0,
    "noise_draws": 1,
    "max_spread": 1,
    "min_p_value": 0.01
  },
  "probe": {"epochs": 100, "decay_epochs": [50, 75], "batch_size": 128, "base_lr": 0.1, "checkpoint": ""},
  "report": {"checkpoint": "", "epoch": 0, "recompute_test_means": false}
})");
}

namespace detail {

inline const char* json_kind(const nlohmann::json& j) {
  if (j.is_null()) return "null";
  if (j.is_boolean()) return "boolean";
  if (j.is_number()) return "number";
  if (j.is_string()) return "string";
  if (j.is_array()) return "array";
  return "object";
}

// Keys with a null default accept a number or null.
inline bool compatible(const nlohmann::json& base, const nlohmann::json& v) {
  if (base.is_null()) return v.is_null() || v.is_number();
  if (base.is_number()) return v.is_number();
  return std::string(json_kind(base)) == json_kind(v);
}

}  // namespace detail

// Recursive merge; every key in `patch` must already exist in `base` with a
// compatible type.
inline void merge_config(nlohmann::json& base, const nlohmann::json& patch, const std::string& path = "") {
  if (!patch.is_object()) throw ConfigError(path.empty() ? "<root>" : path, "expected an object");
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string p = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError(p, "unknown key");
    auto& slot = base[it.key()];
    if (slot.is_object()) {
      merge_config(slot, it.value(), p);
    } else {
      if (!detail::compatible(slot, it.value()))
        throw ConfigError(p, std::string("expected ") + detail::json_kind(slot) + ", got " +
                                 detail::json_kind(it.value()));
      slot = it.value();
    }
  }
}

// "a.b.c=value"; the value is parsed as JSON, falling back to a plain string.
inline void apply_override(nlohmann::json& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError(assignment, "override must look like key=value");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  nlohmann::json patch = value;
  std::vector<std::string> parts;
  std::istringstream is(key);
  for (std::string part; std::getline(is, part, '.');) parts.push_back(part);
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = nlohmann::json{{*it, patch}};
  merge_config(cfg, patch);
}

struct DatasetConfig {
  std::string source = "mixture";
  MixtureSpec mixture;
  bool standardize = true;
  std::string train_images, train_labels, test_images, test_labels;
  std::size_t idx_classes = 0;
};

struct BoundSection {
  std::size_t k = 2;
  std::size_t m_each = 250;
  double p_m = 0.1;
  double delta = 0.05;
  std::optional<double> delta_m;
  std::size_t l_max = 0;
  std::size_t noise_draws = 1;
  UniformityThresholds thresholds;
};

struct ProbeSection {
  ProbeConfig config;
  std::string checkpoint;
};

struct ReportSection {
  std::string checkpoint;
  std::size_t epoch = 0;
  bool recompute_test_means = false;
};

struct ExperimentConfig {
  std::string kind = "train";
  std::uint64_t seed = 0;
  double epsilon = 0.01;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  DatasetConfig data;
  ArchSpec arch;
  SgdConfig sgd;
  std::vector<std::size_t> report_epochs;
  std::vector<std::size_t> checkpoint_epochs;
  std::vector<std::size_t> depths{2, 4, 8};
  std::vector<double> noise_fractions{0.0, 0.1, 0.25, 0.5};
  BoundSection bound;
  ProbeSection probe;
  ReportSection report;
  nlohmann::json resolved;  // the full merged JSON this struct was read from
};

namespace detail {

inline const nlohmann::json& at_path(const nlohmann::json& j, const std::string& path) {
  const nlohmann::json* cur = &j;
  std::istringstream is(path);
  for (std::string part; std::getline(is, part, '.');) cur = &cur->at(part);
  return *cur;
}

inline double get_double(const nlohmann::json& j, const std::string& path) {
  const auto& v = at_path(j, path);
  if (!v.is_number()) throw ConfigError(path, "expected a number");
  return v.get<double>();
}

inline std::uint64_t get_u64(const nlohmann::json& v, const std::string& path) {
  if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0))
    throw ConfigError(path, "expected a non-negative integer");
  return v.get<std::uint64_t>();
}

inline std::size_t get_size(const nlohmann::json& j, const std::string& path) {
  return static_cast<std::size_t>(get_u64(at_path(j, path), path));
}

inline std::string get_string(const nlohmann::json& j, const std::string& path) {
  const auto& v = at_path(j, path);
  if (!v.is_string()) throw ConfigError(path, "expected a string");
  return v.get<std::string>();
}

inline bool get_bool(const nlohmann::json& j, const std::string& path) {
  const auto& v = at_path(j, path);
  if (!v.is_boolean()) throw ConfigError(path, "expected a boolean");
  return v.get<bool>();
}

template <class T>
std::vector<T> get_list(const nlohmann::json& j, const std::string& path) {
  const auto& v = at_path(j, path);
  if (!v.is_array()) throw ConfigError(path, "expected an array");
  std::vector<T> out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const std::string p = path + "[" + std::to_string(i) + "]";
    if constexpr (std::is_same_v<T, double>) {
      if (!v[i].is_number()) throw ConfigError(p, "expected a number");
      out.push_back(v[i].get<double>());
    } else {
      out.push_back(static_cast<T>(get_u64(v[i], p)));
    }
  }
  return out;
}

inline void require(bool ok, const std::string& path, const std::string& what) {
  if (!ok) throw ConfigError(path, what);
}

}  // namespace detail

inline ExperimentConfig parse_config(const nlohmann::json& j) {
  using namespace detail;
  ExperimentConfig c;
  c.resolved = j;
  c.kind = get_string(j, "kind");
  static const std::set<std::string> kinds{"train", "report", "depth-sweep", "noise-sweep", "bound", "probe", "plot"};
  require(kinds.count(c.kind) > 0, "kind", "unknown experiment kind '" + c.kind + "'");
  c.seed = get_u64(j.at("seed"), "seed");
  c.epsilon = get_double(j, "epsilon");
  require(c.epsilon >= 0.0 && c.epsilon <= 1.0, "epsilon", "must lie in [0, 1]");
  c.seeds = get_list<std::uint64_t>(j, "seeds");
  require(!c.seeds.empty(), "seeds", "must be non-empty");

  auto& d = c.data;
  d.source = get_string(j, "dataset.source");
  require(d.source == "mixture" || d.source == "idx", "dataset.source", "must be \"mixture\" or \"idx\"");
  d.mixture.classes = get_size(j, "dataset.classes");
  d.mixture.m0 = get_size(j, "dataset.m0");
  d.mixture.m0_test = get_size(j, "dataset.m0_test");
  d.mixture.dim = get_size(j, "dataset.dim");
  d.mixture.radius = get_double(j, "dataset.radius");
  d.mixture.sigma = get_double(j, "dataset.sigma");
  d.standardize = get_bool(j, "dataset.standardize");
  d.train_images = get_string(j, "dataset.train_images");
  d.train_labels = get_string(j, "dataset.train_labels");
  d.test_images = get_string(j, "dataset.test_images");
  d.test_labels = get_string(j, "dataset.test_labels");
  d.idx_classes = get_size(j, "dataset.idx_classes");
  if (d.source == "mixture") {
    require(d.mixture.classes >= 2, "dataset.classes", "must be >= 2");
    require(d.mixture.m0 >= 1, "dataset.m0", "must be >= 1");
    require(d.mixture.dim >= 2, "dataset.dim", "must be >= 2");
    require(d.mixture.radius >= 0.0, "dataset.radius", "must be >= 0");
    require(d.mixture.sigma >= 0.0, "dataset.sigma", "must be >= 0");
  } else {
    require(!d.train_images.empty(), "dataset.train_images", "required when dataset.source is \"idx\"");
    require(!d.train_labels.empty(), "dataset.train_labels", "required when dataset.source is \"idx\"");
    require(d.test_images.empty() == d.test_labels.empty(), "dataset.test_labels",
            "test images and labels must be given together");
  }

  const auto family = get_string(j, "arch.family");
  require(family == "mlp" || family == "conv", "arch.family", "must be \"mlp\" or \"conv\"");
  c.arch.family = family == "mlp" ? ArchFamily::Mlp : ArchFamily::Conv;
  c.arch.depth = get_size(j, "arch.depth");
  c.arch.width = get_size(j, "arch.width");
  require(c.arch.depth >= 1, "arch.depth", "must be >= 1");
  require(c.arch.width >= 1, "arch.width", "must be >= 1");

  c.sgd.base_lr = get_double(j, "sgd.base_lr");
  c.sgd.momentum = get_double(j, "sgd.momentum");
  c.sgd.weight_decay = get_double(j, "sgd.weight_decay");
  c.sgd.batch_size = get_size(j, "sgd.batch_size");
  c.sgd.epochs = get_size(j, "sgd.epochs");
  c.sgd.decay_epochs = get_list<std::size_t>(j, "sgd.decay_epochs");
  c.sgd.decay_factor = get_double(j, "sgd.decay_factor");
  try {
    c.sgd.validate();
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    const auto sp = msg.find(' ');
    throw ConfigError(msg.substr(0, sp), msg.substr(sp + 1));
  }

  c.report_epochs = get_list<std::size_t>(j, "report_epochs");
  c.checkpoint_epochs = get_list<std::size_t>(j, "checkpoint_epochs");
  for (std::size_t i = 0; i < c.report_epochs.size(); ++i)
    require(c.report_epochs[i] <= c.sgd.epochs, "report_epochs[" + std::to_string(i) + "]", "exceeds sgd.epochs");
  for (std::size_t i = 0; i < c.checkpoint_epochs.size(); ++i)
    require(c.checkpoint_epochs[i] <= c.sgd.epochs, "checkpoint_epochs[" + std::to_string(i) + "]",
            "exceeds sgd.epochs");

  c.depths = get_list<std::size_t>(j, "depth_sweep.depths");
  require(!c.depths.empty(), "depth_sweep.depths", "must be non-empty");
  for (std::size_t i = 0; i < c.depths.size(); ++i)
    require(c.depths[i] >= 1, "depth_sweep.depths[" + std::to_string(i) + "]", "must be >= 1");
  c.noise_fractions = get_list<double>(j, "noise_sweep.fractions");
  require(!c.noise_fractions.empty(), "noise_sweep.fractions", "must be non-empty");
  for (std::size_t i = 0; i < c.noise_fractions.size(); ++i)
    require(c.noise_fractions[i] >= 0.0 && c.noise_fractions[i] <= 1.0,
            "noise_sweep.fractions[" + std::to_string(i) + "]", "must lie in [0, 1]");

  auto& b = c.bound;
  b.k = get_size(j, "bound.k");
  b.m_each = get_size(j, "bound.m_each");
  b.p_m = get_double(j, "bound.p_m");
  b.delta = get_double(j, "bound.delta");
  if (!at_path(j, "bound.delta_m").is_null()) b.delta_m = get_double(j, "bound.delta_m");
  b.l_max = get_size(j, "bound.l_max");
  b.noise_draws = get_size(j, "bound.noise_draws");
  b.thresholds.max_spread = get_size(j, "bound.max_spread");
  b.thresholds.min_p_value = get_double(j, "bound.min_p_value");
  require(b.k >= 1, "bound.k", "must be >= 1");
  require(b.p_m >= 0.0 && b.p_m <= 1.0, "bound.p_m", "must lie in [0, 1]");
  require(b.delta > 0.0 && b.delta <= 1.0, "bound.delta", "must lie in (0, 1]");
  require(!b.delta_m || (*b.delta_m >= 0.0 && *b.delta_m <= 1.0), "bound.delta_m", "must lie in [0, 1]");
  require(b.noise_draws >= 1, "bound.noise_draws", "must be >= 1");
  require(c.kind != "bound" || b.delta_m || c.seeds.size() >= 2, "seeds", "estimating bound.delta_m needs at least two seeds");

  auto& p = c.probe;
  p.config.sgd.epochs = get_size(j, "probe.epochs");
  p.config.sgd.decay_epochs = get_list<std::size_t>(j, "probe.decay_epochs");
  p.config.sgd.batch_size = get_size(j, "probe.batch_size");
  p.config.sgd.base_lr = get_double(j, "probe.base_lr");
  p.config.sgd.momentum = c.sgd.momentum;
  p.config.sgd.weight_decay = c.sgd.weight_decay;
  p.config.sgd.decay_factor = c.sgd.decay_factor;
  p.checkpoint = get_string(j, "probe.checkpoint");
  require(p.config.sgd.batch_size >= 1, "probe.batch_size", "must be >= 1");

  c.report.checkpoint = get_string(j, "report.checkpoint");
  c.report.epoch = get_size(j, "report.epoch");
  c.report.recompute_test_means = get_bool(j, "report.recompute_test_means");
  if (c.kind == "report") require(!c.report.checkpoint.empty(), "report.checkpoint", "required for the report command");
  return c;
}

struct ConfigSources {
  std::string config_path;             // optional JSON file
  std::vector<std::string> overrides;  // key=value
  std::optional<std::uint64_t> seed;   // --seed
  std::string kind;                    // subcommand
};

inline ExperimentConfig resolve_config(const ConfigSources& src) {
  nlohmann::json j = default_config();
  if (!src.config_path.empty()) {
    std::ifstream in(src.config_path);
    if (!in) throw ConfigError(src.config_path, "cannot open config file");
    nlohmann::json user = nlohmann::json::parse(in, nullptr, false);
    if (user.is_discarded()) throw ConfigError(src.config_path, "not valid JSON");
    merge_config(j, user);
  }
  for (const auto& o : src.overrides) apply_override(j, o);
  if (src.seed) j["seed"] = *src.seed;
  if (!src.kind.empty()) j["kind"] = src.kind;
  return parse_config(j);
}

inline std::string config_hash(const ExperimentConfig& c) { return sha256_hex(c.resolved.dump()); }

// ---------------------------------------------------------------------------
// Output directory with a file inventory and manifest.

class OutputDir {
 public:
  explicit OutputDir(std::filesystem::path root) : root_(std::move(root)) {
    std::filesystem::create_directories(root_);
  }

  const std::filesystem::path& root() const { return root_; }

  void write(const std::string& rel, std::span<const std::uint8_t> bytes) {
    const auto p = root_ / rel;
    std::filesystem::create_directories(p.parent_path());
    write_file_atomic(p, bytes);
    std::lock_guard lock(mu_);
    files_.insert(rel);
  }

  void write(const std::string& rel, std::string_view text) {
    write(rel, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  }

  std::vector<std::string> files() const {
    std::lock_guard lock(mu_);
    return {files_.begin(), files_.end()};
  }

 private:
  std::filesystem::path root_;
  mutable std::mutex mu_;
  std::set<std::string> files_;
};

struct Failure {
  std::string run;
  std::string error;
};

inline std::string utc_timestamp(std::chrono::system_clock::time_point t) {
  const std::time_t tt = std::chrono::system_clock::to_time_t(t);
  std::tm tm{};
  gmtime_r(&tt, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Writes manifest.json listing every emitted file with its SHA-256. The two
// wall-clock fields are the only non-deterministic content.
inline nlohmann::json write_manifest(OutputDir& out, const ExperimentConfig& cfg, const std::vector<Failure>& failures,
                                     std::chrono::system_clock::time_point started) {
  nlohmann::json m;
  m["tool"] = "ncprobe";
  m["version"] = kToolVersion;
  m["kind"] = cfg.kind;
  m["config_hash"] = config_hash(cfg);
  m["master_seed"] = cfg.seed;
  m["started_at"] = utc_timestamp(started);
  m["wall_clock_seconds"] =
      std::chrono::duration<double>(std::chrono::system_clock::now() - started).count();
  m["status"] = failures.empty() ? "ok" : "failed";
  m["failures"] = nlohmann::json::array();
  for (const auto& f : failures) m["failures"].push_back({{"run", f.run}, {"error", f.error}});
  m["files"] = nlohmann::json::array();
  for (const auto& rel : out.files()) {
    if (rel == "manifest.json") continue;
    auto bytes = read_file_bytes(out.root() / rel);
    m["files"].push_back({{"path", rel}, {"sha256", sha256_hex(bytes)}, {"bytes", bytes.size()}});
  }
  write_file_atomic(out.root() / "manifest.json", m.dump(2) + "\n");
  return m;
}

// Recomputes every digest; returns the paths that are missing or differ.
inline std::vector<std::string> verify_manifest(const std::filesystem::path& dir) {
  std::vector<std::string> bad;
  auto bytes = read_file_bytes(dir / "manifest.json");
  auto m = nlohmann::json::parse(bytes.begin(), bytes.end());
  for (const auto& f : m.at("files")) {
    const auto p = dir / f.at("path").get<std::string>();
    if (!std::filesystem::exists(p) || sha256_hex(read_file_bytes(p)) != f.at("sha256").get<std::string>())
      bad.push_back(f.at("path").get<std::string>());
  }
  return bad;
}

// ---------------------------------------------------------------------------
// Data.

struct ExperimentData {
  Dataset train;
  Dataset test;
};

inline ExperimentData load_experiment_data(const ExperimentConfig& cfg) {
  ExperimentData d;
  if (cfg.data.source == "mixture") {
    std::tie(d.train, d.test) = synth_mixture_splits(cfg.data.mixture, SeededRng(cfg.seed).child("data"));
  } else {
    d.train = load_idx(cfg.data.train_images, cfg.data.train_labels, cfg.data.idx_classes);
    if (!cfg.data.test_images.empty())
      d.test = load_idx(cfg.data.test_images, cfg.data.test_labels, d.train.classes);
  }
  if (cfg.data.standardize) {
    auto st = fit_standardizer(d.train);
    d.train = st.apply(std::move(d.train));
    if (d.test.size() > 0) d.test = st.apply(std::move(d.test));
  }
  return d;
}

inline SeededRng noise_generator(std::uint64_t master, double fraction, std::uint64_t seed) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", fraction);
  return SeededRng(master).child("noise").child(std::string_view(buf)).child(seed);
}

// k pairs of disjoint balanced splits of m_each samples each; no sample is used
// twice across all pairs.
inline std::vector<SplitPair> disjoint_pairs(const Dataset& d, std::size_t k, std::size_t m_each, SeededRng& rng) {
  if (m_each == 0 || m_each % d.classes != 0)
    throw DatasetError("bound.m_each=" + std::to_string(m_each) + " must be a positive multiple of C=" +
                       std::to_string(d.classes));
  const std::size_t per = m_each / d.classes;
  for (std::size_t c = 0; c < d.classes; ++c)
    if (d.per_class_index[c].size() < 2 * k * per)
      throw DatasetError("insufficient data for " + std::to_string(k) + " disjoint pairs of " + std::to_string(m_each) +
                         " samples: class " + std::to_string(c) + " has " +
                         std::to_string(d.per_class_index[c].size()) + ", needs " + std::to_string(2 * k * per));
  std::vector<SplitPair> out(k);
  for (std::size_t c = 0; c < d.classes; ++c) {
    const auto& idx = d.per_class_index[c];
    auto perm = permutation(rng, idx.size());
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t t = 0; t < per; ++t) {
        out[i].first_index.push_back(idx[perm[2 * i * per + t]]);
        out[i].second_index.push_back(idx[perm[(2 * i + 1) * per + t]]);
      }
  }
  for (auto& p : out) {
    std::sort(p.first_index.begin(), p.first_index.end());
    std::sort(p.second_index.begin(), p.second_index.end());
    p.first = d.subset(p.first_index);
    p.second = d.subset(p.second_index);
  }
  return out;
}

// ---------------------------------------------------------------------------
// One training run: train, periodic reports and checkpoints, final artifacts.

struct RunSpec {
  std::string id;
  std::size_t depth = 1;
  std::uint64_t seed = 0;
  double noise = 0.0;
};

struct RunOutcome {
  RunSpec spec;
  bool ok = false;
  std::string error;
  std::optional<CollapseReport> final_report;
};

inline constexpr const char* kSummaryCsvHeader =
    "run,depth,noise,seed,layer,cdnv_train,cdnv_test,ncc_train_err,ncc_test_err,model_train_err,model_test_err,"
    "effective_depth";

inline constexpr const char* kNoiseSummaryCsvHeader =
    "noise,seed,depth,effective_depth,model_train_err,model_test_err,top_ncc_test_err,best_intermediate_layer,"
    "best_intermediate_ncc_test_err";

inline std::string noise_label(double f) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", f);
  return buf;
}

// The run generator depends only on (master seed, depth, seed), so a clean
// noise-sweep point reproduces the matching train run exactly.
inline RunOutcome execute_run(const ExperimentConfig& cfg, const ExperimentData& data, const RunSpec& spec,
                              OutputDir& out) {
  RunOutcome res;
  res.spec = spec;
  const std::string dir = spec.id + "/";
  try {
    Dataset train_set = data.train;
    if (spec.noise > 0.0) train_set = inject_noise(std::move(train_set), {spec.noise, noise_generator(cfg.seed, spec.noise, spec.seed)()}).data;
    std::set<std::size_t> report_at(cfg.report_epochs.begin(), cfg.report_epochs.end());
    report_at.insert(cfg.sgd.epochs);
    const std::set<std::size_t> ckpt_at(cfg.checkpoint_epochs.begin(), cfg.checkpoint_epochs.end());
    ReportOptions opt;
    opt.epsilon = cfg.epsilon;
    std::string report_csv = std::string(kReportCsvHeader) + "\n";
    CollapseReport last;
    auto on_epoch = [&](std::size_t completed, const Network& net, TrainRecord&) {
      if (report_at.count(completed)) {
        last = collapse_report(net, train_set, data.test, opt);
        report_csv += report_csv_rows(last, completed);
      }
      if (ckpt_at.count(completed)) {
        char name[64];
        std::snprintf(name, sizeof name, "checkpoint_e%04zu.ncpk", completed);
        out.write(dir + name, encode_checkpoint(net));
      }
    };
    const auto gen = run_generator(SeededRng(cfg.seed).child("run"), spec.depth, spec.seed);
    TrainResult tr;
    try {
      tr = train_seeded_record(cfg.arch.family, spec.depth, cfg.arch.width, train_set, cfg.sgd, gen, on_epoch);
    } catch (const DivergenceError& e) {
      if (e.last_good) out.write(dir + "last_good.ncpk", encode_checkpoint(*e.last_good));
      out.write(dir + "report.csv", report_csv);
      throw;
    }
    out.write(dir + "final.ncpk", encode_checkpoint(tr.net));
    out.write(dir + "train.csv", train_record_csv(tr.record));
    out.write(dir + "report.csv", report_csv);
    out.write(dir + "report.json", to_json(last).dump(2) + "\n");
    res.final_report = std::move(last);
    res.ok = true;
  } catch (const std::exception& e) {
    res.error = e.what();
  }
  return res;
}

inline std::string summary_rows(const RunOutcome& r) {
  std::ostringstream os;
  if (!r.final_report) return {};
  const auto& rep = *r.final_report;
  for (const auto& l : rep.layers)
    os << r.spec.id << ',' << r.spec.depth << ',' << format_double(r.spec.noise) << ',' << r.spec.seed << ','
       << l.index << ',' << format_double(l.cdnv_train.average) << ','
       << format_double(l.cdnv_test ? l.cdnv_test->average : std::nan("")) << ',' << format_double(l.ncc_train_err)
       << ',' << format_double(l.ncc_test_err) << ',' << format_double(rep.model_train_err) << ','
       << format_double(rep.model_test_err) << ',' << rep.effective_depth << '\n';
  return os.str();
}

// Best NCC test error among layers 1..L-1; NaN layer 0 when L = 1.
inline std::pair<std::size_t, double> best_intermediate(const CollapseReport& rep) {
  std::pair<std::size_t, double> best{0, std::nan("")};
  for (std::size_t i = 0; i + 1 < rep.layers.size(); ++i)
    if (best.first == 0 || rep.layers[i].ncc_test_err < best.second) best = {i + 1, rep.layers[i].ncc_test_err};
  return best;
}

inline std::string noise_summary_row(const RunOutcome& r) {
  if (!r.final_report) return {};
  const auto& rep = *r.final_report;
  const auto [layer, err] = best_intermediate(rep);
  std::ostringstream os;
  os << format_double(r.spec.noise) << ',' << r.spec.seed << ',' << r.spec.depth << ',' << rep.effective_depth << ','
     << format_double(rep.model_train_err) << ',' << format_double(rep.model_test_err) << ','
     << format_double(rep.layers.back().ncc_test_err) << ',' << layer << ',' << format_double(err) << '\n';
  return os.str();
}

struct CommandContext {
  std::filesystem::path out_dir;
  std::size_t jobs = 1;
  std::filesystem::path plot_input;  // plot command only
  std::ostream* log = &std::cerr;
};

namespace detail {

inline int finish(OutputDir& out, const ExperimentConfig& cfg, const std::vector<Failure>& failures,
                  std::chrono::system_clock::time_point started, std::ostream& log) {
  out.write("config.json", cfg.resolved.dump(2) + "\n");
  write_manifest(out, cfg, failures, started);
  for (const auto& f : failures) log << "run " << f.run << " failed: " << f.error << '\n';
  log << "wrote " << out.files().size() + 1 << " files to " << out.root().string() << '\n';
  return failures.empty() ? kExitOk : kExitRunFailed;
}

inline int run_grid(const ExperimentConfig& cfg, const CommandContext& ctx, const std::vector<RunSpec>& runs,
                    bool noise_summary) {
  const auto started = std::chrono::system_clock::now();
  OutputDir out(ctx.out_dir);
  const auto data = load_experiment_data(cfg);
  std::vector<RunOutcome> results(runs.size());
  parallel_for(runs.size(), ctx.jobs, [&](std::size_t i) {
    results[i] = execute_run(cfg, data, runs[i], out);
    *ctx.log << "[" << cfg.kind << "] " << runs[i].id << (results[i].ok ? " done" : " FAILED") << '\n';
  });
  std::string summary = std::string(kSummaryCsvHeader) + "\n";
  std::string noise = std::string(kNoiseSummaryCsvHeader) + "\n";
  std::vector<Failure> failures;
  for (const auto& r : results) {
    summary += summary_rows(r);
    noise += noise_summary_row(r);
    if (!r.ok) failures.push_back({r.spec.id, r.error});
  }
  out.write("summary.csv", summary);
  if (noise_summary) out.write("noise_summary.csv", noise);
  return finish(out, cfg, failures, started, *ctx.log);
}

}  // namespace detail

inline int cmd_train(const ExperimentConfig& cfg, const CommandContext& ctx) {
  std::vector<RunSpec> runs;
  for (auto s : cfg.seeds) runs.push_back({"seed_" + std::to_string(s), cfg.arch.depth, s, 0.0});
  return detail::run_grid(cfg, ctx, runs, false);
}

inline int cmd_depth_sweep(const ExperimentConfig& cfg, const CommandContext& ctx) {
  std::vector<RunSpec> runs;
  for (auto L : cfg.depths)
    for (auto s : cfg.seeds) runs.push_back({"L" + std::to_string(L) + "_seed" + std::to_string(s), L, s, 0.0});
  return detail::run_grid(cfg, ctx, runs, false);
}

inline int cmd_noise_sweep(const ExperimentConfig& cfg, const CommandContext& ctx) {
  std::vector<RunSpec> runs;
  for (auto f : cfg.noise_fractions)
    for (auto s : cfg.seeds)
      runs.push_back({"noise" + noise_label(f) + "_seed" + std::to_string(s), cfg.arch.depth, s, f});
  return detail::run_grid(cfg, ctx, runs, true);
}

inline int cmd_report(const ExperimentConfig& cfg, const CommandContext& ctx) {
  const auto started = std::chrono::system_clock::now();
  OutputDir out(ctx.out_dir);
  std::vector<Failure> failures;
  try {
    const auto data = load_experiment_data(cfg);
    const auto net = load_checkpoint(cfg.report.checkpoint);
    ReportOptions opt;
    opt.epsilon = cfg.epsilon;
    opt.recompute_test_means = cfg.report.recompute_test_means;
    const auto rep = collapse_report(net, data.train, data.test, opt);
    out.write("report.json", to_json(rep).dump(2) + "\n");
    out.write("report.csv", std::string(kReportCsvHeader) + "\n" + report_csv_rows(rep, cfg.report.epoch));
  } catch (const std::exception& e) {
    failures.push_back({"report", e.what()});
  }
  return detail::finish(out, cfg, failures, started, *ctx.log);
}

inline int cmd_probe(const ExperimentConfig& cfg, const CommandContext& ctx) {
  const auto started = std::chrono::system_clock::now();
  OutputDir out(ctx.out_dir);
  const auto data = load_experiment_data(cfg);
  struct Item {
    std::string id;
    std::uint64_t seed;
  };
  std::vector<Item> items;
  if (!cfg.probe.checkpoint.empty())
    items.push_back({"checkpoint", 0});
  else
    for (auto s : cfg.seeds) items.push_back({"seed_" + std::to_string(s), s});
  std::vector<std::string> rows(items.size());
  std::vector<std::optional<Failure>> fails(items.size());
  parallel_for(items.size(), ctx.jobs, [&](std::size_t i) {
    try {
      Network net = cfg.probe.checkpoint.empty()
                        ? train_seeded(cfg.arch.family, cfg.arch.depth, cfg.arch.width, data.train, cfg.sgd,
                                       run_generator(SeededRng(cfg.seed).child("run"), cfg.arch.depth, items[i].seed))
                        : load_checkpoint(cfg.probe.checkpoint);
      ReportOptions opt;
      opt.epsilon = cfg.epsilon;
      const auto rep = collapse_report(net, data.train, data.test, opt);
      const auto ftr = forward_eval(net, data.train.inputs);
      const bool has_test = data.test.size() > 0;
      ForwardTrace fte;
      if (has_test) fte = forward_eval(net, data.test.inputs);
      std::ostringstream os;
      for (std::size_t b = 0; b < ftr.features.size(); ++b) {
        ProbeConfig pc = cfg.probe.config;
        pc.sgd.seed = SeededRng(cfg.seed).child("probe").child(items[i].seed).child(b)();
        const auto pr = has_test ? linear_probe(ftr.features[b], data.train.labels, fte.features[b], data.test.labels,
                                                data.train.classes, pc)
                                 : linear_probe(ftr.features[b], data.train.labels, ftr.features[b],
                                                std::span<const int>{}, data.train.classes, pc);
        os << items[i].id << ',' << b + 1 << ',' << format_double(rep.layers[b].ncc_train_err) << ','
           << format_double(rep.layers[b].ncc_test_err) << ',' << format_double(pr.train_err) << ','
           << format_double(pr.test_err) << '\n';
      }
      rows[i] = os.str();
    } catch (const std::exception& e) {
      fails[i] = Failure{items[i].id, e.what()};
    }
  });
  std::string csv = "run,layer,ncc_train_err,ncc_test_err,probe_train_err,probe_test_err\n";
  std::vector<Failure> failures;
  for (std::size_t i = 0; i < items.size(); ++i) {
    csv += rows[i];
    if (fails[i]) failures.push_back(*fails[i]);
  }
  out.write("probe.csv", csv);
  return detail::finish(out, cfg, failures, started, *ctx.log);
}

// Throws DatasetError when the training split cannot hold k disjoint pairs.
inline std::vector<std::pair<Dataset, Dataset>> bound_pairs(const ExperimentConfig& cfg, const Dataset& train) {
  auto rng = SeededRng(cfg.seed).child("pairs");
  std::vector<std::pair<Dataset, Dataset>> pairs;
  for (auto& p : disjoint_pairs(train, cfg.bound.k, cfg.bound.m_each, rng))
    pairs.emplace_back(std::move(p.first), std::move(p.second));
  return pairs;
}

inline BoundConfig bound_config(const ExperimentConfig& cfg, std::size_t jobs) {
  BoundConfig bc;
  bc.arch = cfg.arch;
  bc.l_max = cfg.bound.l_max;
  bc.p_m = cfg.bound.p_m;
  bc.delta = cfg.bound.delta;
  bc.delta_m = cfg.bound.delta_m;
  bc.epsilon = cfg.epsilon;
  bc.sgd = cfg.sgd;
  bc.seeds = cfg.seeds;
  bc.noise_draws = cfg.bound.noise_draws;
  bc.thresholds = cfg.bound.thresholds;
  bc.jobs = jobs;
  return bc;
}

inline int cmd_bound(const ExperimentConfig& cfg, const CommandContext& ctx) {
  const auto started = std::chrono::system_clock::now();
  const auto data = load_experiment_data(cfg);
  std::vector<std::pair<Dataset, Dataset>> pairs;
  try {
    pairs = bound_pairs(cfg, data.train);
  } catch (const DatasetError& e) {
    *ctx.log << "usage error: " << e.what() << '\n';
    return kExitUsage;
  }
  OutputDir out(ctx.out_dir);
  std::vector<Failure> failures;
  try {
    const auto b = bound_estimate(pairs, bound_config(cfg, ctx.jobs), SeededRng(cfg.seed).child("bound"));
    out.write("bound.json", to_json(b).dump(2) + "\n");
    out.write("bound.txt", bound_summary_text(b));
    for (auto i : b.excluded) failures.push_back({"pair_" + std::to_string(i), b.per_pair[i].error});
  } catch (const std::exception& e) {
    failures.push_back({"bound", e.what()});
  }
  return detail::finish(out, cfg, failures, started, *ctx.log);
}

// ---------------------------------------------------------------------------
// Plots from the CSV files of earlier runs.

namespace detail {

inline std::string plot_id(const std::filesystem::path& rel) {
  std::string s = rel.parent_path().generic_string();
  if (s.empty()) return "root";
  for (auto& ch : s)
    if (ch == '/') ch = '_';
  return s;
}

inline std::string read_text(const std::filesystem::path& p) {
  auto b = read_file_bytes(p);
  return {b.begin(), b.end()};
}

}  // namespace detail

// CDNV-vs-epoch (log y) and NCC-error-vs-layer charts for every report.csv under
// `input`, plus effective-depth-vs-noise for every noise_summary.csv. Returns the
// number of charts written.
inline std::size_t emit_plots(const std::filesystem::path& input, OutputDir& out, std::ostream& log) {
  std::vector<std::filesystem::path> reports, noise;
  if (std::filesystem::exists(input))
    for (const auto& e : std::filesystem::recursive_directory_iterator(input)) {
      if (!e.is_regular_file()) continue;
      const auto rel = std::filesystem::relative(e.path(), input);
      if (e.path().filename() == "report.csv") reports.push_back(rel);
      if (e.path().filename() == "noise_summary.csv") noise.push_back(rel);
    }
  std::sort(reports.begin(), reports.end());
  std::sort(noise.begin(), noise.end());
  std::size_t n = 0;
  for (const auto& rel : reports) {
    const auto t = parse_csv(detail::read_text(input / rel));
    if (t.rows.empty()) continue;
    const auto ce = t.column("epoch"), cl = t.column("layer"), cc = t.column("cdnv_train"),
               ctr = t.column("ncc_train_err"), cte = t.column("ncc_test_err");
    std::map<std::size_t, Series> by_layer;
    std::size_t last_epoch = 0;
    for (const auto& r : t.rows) {
      const auto layer = std::stoul(r[cl]);
      auto& s = by_layer[layer];
      s.name = "layer " + r[cl];
      s.points.emplace_back(csv_number(r[ce]), csv_number(r[cc]));
      last_epoch = std::max<std::size_t>(last_epoch, std::stoul(r[ce]));
    }
    const std::string id = detail::plot_id(rel);
    LineChart cdnv{"Train CDNV per layer: " + id, "epoch", "CDNV", true, {}};
    for (auto& [layer, s] : by_layer) cdnv.series.push_back(s);
    out.write("cdnv_epoch_" + id + ".svg", render_svg(cdnv));
    LineChart ncc{"NCC error per layer at epoch " + std::to_string(last_epoch) + ": " + id, "layer", "NCC error",
                  false, {{"train", {}}, {"test", {}}}};
    for (const auto& r : t.rows)
      if (std::stoul(r[ce]) == last_epoch) {
        ncc.series[0].points.emplace_back(csv_number(r[cl]), csv_number(r[ctr]));
        ncc.series[1].points.emplace_back(csv_number(r[cl]), csv_number(r[cte]));
      }
    out.write("ncc_layer_" + id + ".svg", render_svg(ncc));
    n += 2;
  }
  for (const auto& rel : noise) {
    const auto t = parse_csv(detail::read_text(input / rel));
    if (t.rows.empty()) continue;
    const auto cn = t.column("noise"), cs = t.column("seed"), cd = t.column("effective_depth");
    std::map<std::string, Series> by_seed;
    std::map<double, std::pair<double, int>> mean;
    for (const auto& r : t.rows) {
      auto& s = by_seed[r[cs]];
      s.name = "seed " + r[cs];
      const double x = csv_number(r[cn]), y = csv_number(r[cd]);
      s.points.emplace_back(x, y);
      mean[x].first += y;
      mean[x].second += 1;
    }
    LineChart c{"Effective depth vs label noise: " + detail::plot_id(rel), "noise fraction", "effective depth", false, {}};
    Series m{"mean", {}};
    for (const auto& [x, acc] : mean) m.points.emplace_back(x, acc.first / acc.second);
    c.series.push_back(m);
    for (auto& [seed, s] : by_seed) c.series.push_back(s);
    out.write("effective_depth_noise_" + detail::plot_id(rel) + ".svg", render_svg(c));
    ++n;
  }
  if (n == 0) log << "warning: no report.csv or noise_summary.csv found under " << input.string() << "; nothing plotted\n";
  return n;
}

inline int cmd_plot(const ExperimentConfig& cfg, const CommandContext& ctx) {
  const auto started = std::chrono::system_clock::now();
  OutputDir out(ctx.out_dir);
  std::vector<Failure> failures;
  try {
    emit_plots(ctx.plot_input, out, *ctx.log);
  } catch (const std::exception& e) {
    failures.push_back({"plot", e.what()});
  }
  return detail::finish(out, cfg, failures, started, *ctx.log);
}

inline int run_command(const ExperimentConfig& cfg, const CommandContext& ctx) {
  if (cfg.kind == "train") return cmd_train(cfg, ctx);
  if (cfg.kind == "depth-sweep") return cmd_depth_sweep(cfg, ctx);
  if (cfg.kind == "noise-sweep") return cmd_noise_sweep(cfg, ctx);
  if (cfg.kind == "report") return cmd_report(cfg, ctx);
  if (cfg.kind == "probe") return cmd_probe(cfg, ctx);
  if (cfg.kind == "bound") return cmd_bound(cfg, ctx);
  if (cfg.kind == "plot") return cmd_plot(cfg, ctx);
  throw ConfigError("kind", "unknown experiment kind '" + cfg.kind + "'");
}

}  // namespace ncprobe
